#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <string>
#include <vector>

#include "fednas/errors.hpp"
#include "fednas/rng.hpp"
#include "fednas/tensor.hpp"

namespace fednas {

struct Dataset {
  Tensor images;  // (N, C, H, W), values in [0, 1]
  std::vector<int> labels;
  int class_count = 0;

  long size() const { return static_cast<long>(labels.size()); }

  Dataset subset(const std::vector<int>& indices) const {
    const int c = images.dim(1), h = images.dim(2), w = images.dim(3);
    const std::size_t row = static_cast<std::size_t>(c) * h * w;
    Dataset out;
    out.class_count = class_count;
    out.images = Tensor({static_cast<int>(indices.size()), c, h, w});
    out.labels.reserve(indices.size());
    for (std::size_t i = 0; i < indices.size(); ++i) {
      const std::size_t src = static_cast<std::size_t>(indices[i]);
      std::copy_n(&images.data[src * row], row, &out.images.data[i * row]);
      out.labels.push_back(labels[src]);
    }
    return out;
  }

  std::vector<long> label_histogram() const {
    std::vector<long> hist(static_cast<std::size_t>(class_count), 0);
    for (const int y : labels) ++hist[static_cast<std::size_t>(y)];
    return hist;
  }
};

struct PartitionSpec {
  enum class Mode { iid, noniid };
  Mode mode = Mode::iid;
  int client_count = 10;
  int classes_per_client = 5;  // non-IID only
};

namespace detail {

inline constexpr int kCifarImageBytes = 3 * 32 * 32;
inline constexpr int kCifarRecordBytes = 1 + kCifarImageBytes;

inline void append_cifar_file(const std::string& file, std::vector<double>& pixels,
                              std::vector<int>& labels) {
  std::ifstream in(file, std::ios::binary | std::ios::ate);
  if (!in) throw IoError("cannot open CIFAR-10 batch file: " + file);
  const std::streamsize bytes = in.tellg();
  if (bytes <= 0 || bytes % kCifarRecordBytes != 0) {
    throw FormatError("CIFAR-10 file size " + std::to_string(bytes) +
                      " is not a multiple of " + std::to_string(kCifarRecordBytes) +
                      ": " + file);
  }
  in.seekg(0);
  const std::size_t records = static_cast<std::size_t>(bytes) / kCifarRecordBytes;
  std::vector<unsigned char> raw(static_cast<std::size_t>(bytes));
  in.read(reinterpret_cast<char*>(raw.data()), bytes);
  if (!in) throw IoError("failed reading " + file);
  pixels.reserve(pixels.size() + records * kCifarImageBytes);
  labels.reserve(labels.size() + records);
  for (std::size_t r = 0; r < records; ++r) {
    const unsigned char* rec = &raw[r * kCifarRecordBytes];
    if (rec[0] > 9) {
      throw FormatError("CIFAR-10 label byte " + std::to_string(rec[0]) +
                        " out of range in " + file);
    }
    labels.push_back(static_cast<int>(rec[0]));
    // 3072 pixel bytes: red plane, then green, then blue, each row-major.
    for (int i = 0; i < kCifarImageBytes; ++i) {
      pixels.push_back(static_cast<double>(rec[1 + i]) / 255.0);
    }
  }
}

inline Dataset dataset_from_raw(std::vector<double> pixels, std::vector<int> labels) {
  Dataset ds;
  ds.class_count = 10;
  ds.labels = std::move(labels);
  ds.images = Tensor({static_cast<int>(ds.labels.size()), 3, 32, 32});
  ds.images.data = std::move(pixels);
  return ds;
}

}  // namespace detail

// Parse the CIFAR-10 binary archive: data_batch_1..5.bin for training and
// test_batch.bin for testing, each a sequence of 3073-byte records (1 label
// byte + 3072 pixel bytes). Pixels are scaled by 1/255.
inline std::pair<Dataset, Dataset> load_cifar10(const std::string& dir) {
  std::vector<double> train_pixels, test_pixels;
  std::vector<int> train_labels, test_labels;
  for (int i = 1; i <= 5; ++i) {
    detail::append_cifar_file(dir + "/data_batch_" + std::to_string(i) + ".bin",
                              train_pixels, train_labels);
  }
  detail::append_cifar_file(dir + "/test_batch.bin", test_pixels, test_labels);
  return {detail::dataset_from_raw(std::move(train_pixels), std::move(train_labels)),
          detail::dataset_from_raw(std::move(test_pixels), std::move(test_labels))};
}

// Even random split without overlaps: shard sizes differ by at most one and
// the union is the whole dataset.
inline std::vector<std::vector<int>> partition_iid_indices(long n, int clients,
                                                           Rng& rng) {
  if (clients < 1) throw ConfigError("client count must be >= 1");
  if (n < clients) {
    throw ConfigError("cannot split " + std::to_string(n) + " samples across " +
                      std::to_string(clients) + " clients");
  }
  std::vector<int> perm(static_cast<std::size_t>(n));
  std::iota(perm.begin(), perm.end(), 0);
  rng.shuffle(perm);
  std::vector<std::vector<int>> shards(static_cast<std::size_t>(clients));
  const long base = n / clients;
  const long extra = n % clients;
  std::size_t pos = 0;
  for (int k = 0; k < clients; ++k) {
    const long take = base + (k < extra ? 1 : 0);
    shards[static_cast<std::size_t>(k)].assign(
        perm.begin() + static_cast<std::ptrdiff_t>(pos),
        perm.begin() + static_cast<std::ptrdiff_t>(pos + static_cast<std::size_t>(take)));
    pos += static_cast<std::size_t>(take);
  }
  return shards;
}

inline std::vector<Dataset> partition_iid(const Dataset& dataset, int clients,
                                          Rng& rng) {
  std::vector<Dataset> out;
  for (const auto& idx : partition_iid_indices(dataset.size(), clients, rng)) {
    out.push_back(dataset.subset(idx));
  }
  return out;
}

// Class assignment for the non-IID split: each client holds exactly
// classes_per_client distinct classes; assignments are redrawn until every
// class has at least one holder.
inline std::vector<std::vector<int>> draw_noniid_assignment(int clients,
                                                            int classes_per_client,
                                                            int class_count,
                                                            Rng& rng) {
  if (classes_per_client < 1 || classes_per_client > class_count) {
    throw ConfigError("classes_per_client must be in [1, class_count]");
  }
  if (static_cast<long>(clients) * classes_per_client < class_count) {
    throw ConfigError("infeasible non-IID split: " + std::to_string(clients) +
                      " clients x " + std::to_string(classes_per_client) +
                      " classes cannot cover " + std::to_string(class_count) +
                      " classes");
  }
  constexpr int kMaxAttempts = 10000;
  for (int attempt = 0; attempt < kMaxAttempts; ++attempt) {
    std::vector<std::vector<int>> assignment(static_cast<std::size_t>(clients));
    std::vector<bool> covered(static_cast<std::size_t>(class_count), false);
    for (auto& classes : assignment) {
      std::vector<int> all(static_cast<std::size_t>(class_count));
      std::iota(all.begin(), all.end(), 0);
      rng.shuffle(all);
      classes.assign(all.begin(), all.begin() + classes_per_client);
      std::sort(classes.begin(), classes.end());
      for (const int c : classes) covered[static_cast<std::size_t>(c)] = true;
    }
    if (std::all_of(covered.begin(), covered.end(), [](bool b) { return b; })) {
      return assignment;
    }
  }
  throw ConfigError("failed to cover all classes after " +
                    std::to_string(kMaxAttempts) + " assignment draws");
}

// Split one dataset according to a fixed class assignment: each class's
// samples are divided evenly (within one) among the clients holding it.
inline std::vector<std::vector<int>> partition_noniid_indices(
    const Dataset& dataset, const std::vector<std::vector<int>>& assignment,
    Rng& rng) {
  const int class_count = dataset.class_count;
  std::vector<std::vector<int>> holders(static_cast<std::size_t>(class_count));
  for (std::size_t k = 0; k < assignment.size(); ++k) {
    for (const int c : assignment[k]) {
      holders[static_cast<std::size_t>(c)].push_back(static_cast<int>(k));
    }
  }
  std::vector<std::vector<int>> by_class(static_cast<std::size_t>(class_count));
  for (long i = 0; i < dataset.size(); ++i) {
    by_class[static_cast<std::size_t>(dataset.labels[static_cast<std::size_t>(i)])]
        .push_back(static_cast<int>(i));
  }
  std::vector<std::vector<int>> shards(assignment.size());
  for (int c = 0; c < class_count; ++c) {
    auto& samples = by_class[static_cast<std::size_t>(c)];
    const auto& owner = holders[static_cast<std::size_t>(c)];
    if (samples.empty()) continue;
    if (owner.empty()) {
      throw ConfigError("class " + std::to_string(c) + " has no holder");
    }
    if (samples.size() < owner.size()) {
      throw ConfigError("class " + std::to_string(c) + " has " +
                        std::to_string(samples.size()) + " samples for " +
                        std::to_string(owner.size()) + " holding clients");
    }
    rng.shuffle(samples);
    const std::size_t base = samples.size() / owner.size();
    const std::size_t extra = samples.size() % owner.size();
    std::size_t pos = 0;
    for (std::size_t j = 0; j < owner.size(); ++j) {
      const std::size_t take = base + (j < extra ? 1 : 0);
      auto& shard = shards[static_cast<std::size_t>(owner[j])];
      shard.insert(shard.end(), samples.begin() + static_cast<std::ptrdiff_t>(pos),
                   samples.begin() + static_cast<std::ptrdiff_t>(pos + take));
      pos += take;
    }
  }
  for (auto& shard : shards) std::sort(shard.begin(), shard.end());
  return shards;
}

inline std::vector<Dataset> partition_noniid(const Dataset& dataset, int clients,
                                             int classes_per_client, Rng& rng) {
  const auto assignment =
      draw_noniid_assignment(clients, classes_per_client, dataset.class_count, rng);
  std::vector<Dataset> out;
  for (const auto& idx : partition_noniid_indices(dataset, assignment, rng)) {
    out.push_back(dataset.subset(idx));
  }
  return out;
}

// Synthetic class-conditional blob images: class c lights up a fixed 2x2
// patch on a 3-pixel grid, plus Gaussian pixel noise, clamped to [0, 1].
// Linearly separable at noise 0. Class priors are uniform within one sample.
struct SyntheticSpec {
  int class_count = 4;
  long samples = 256;
  int channels = 1;
  int height = 8;
  int width = 8;
  double noise = 0.0;
};

inline Dataset synthetic_dataset(const SyntheticSpec& spec, Rng& rng) {
  if (spec.class_count < 2) throw ConfigError("synthetic class_count must be >= 2");
  if (spec.samples < spec.class_count) {
    throw ConfigError("synthetic samples must be >= class_count");
  }
  const int grid_cols = std::max(1, spec.width / 3);
  const int grid_rows = std::max(1, spec.height / 3);
  if (spec.class_count > grid_cols * grid_rows) {
    throw ConfigError("image too small for " + std::to_string(spec.class_count) +
                      " distinct class patterns");
  }
  Dataset ds;
  ds.class_count = spec.class_count;
  ds.labels.resize(static_cast<std::size_t>(spec.samples));
  for (long i = 0; i < spec.samples; ++i) {
    ds.labels[static_cast<std::size_t>(i)] = static_cast<int>(i % spec.class_count);
  }
  rng.shuffle(ds.labels);
  ds.images = Tensor({static_cast<int>(spec.samples), spec.channels, spec.height,
                      spec.width});
  const std::size_t row =
      static_cast<std::size_t>(spec.channels) * spec.height * spec.width;
  for (long i = 0; i < spec.samples; ++i) {
    const int y = ds.labels[static_cast<std::size_t>(i)];
    const int r0 = (y / grid_cols) * 3;
    const int c0 = (y % grid_cols) * 3;
    double* img = &ds.images.data[static_cast<std::size_t>(i) * row];
    for (int ch = 0; ch < spec.channels; ++ch) {
      for (int dr = 0; dr < 2; ++dr) {
        for (int dc = 0; dc < 2; ++dc) {
          img[(static_cast<std::size_t>(ch) * spec.height + r0 + dr) * spec.width +
              c0 + dc] = 1.0;
        }
      }
    }
    if (spec.noise > 0.0) {
      for (std::size_t p = 0; p < row; ++p) {
        img[p] = std::clamp(img[p] + spec.noise * rng.normal(), 0.0, 1.0);
      }
    }
  }
  return ds;
}

}  // namespace fednas
