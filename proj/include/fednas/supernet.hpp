#pragma once

#include <bit>
#include <cstdint>
#include <fstream>
#include <map>
#include <memory>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "fednas/codec.hpp"
#include "fednas/errors.hpp"
#include "fednas/nn.hpp"
#include "fednas/rng.hpp"
#include "fednas/tensor.hpp"

namespace fednas {

// Master model template: a stem convolution block, a chain of choice blocks
// (four candidate branches each), global average pooling and a classifier.
// Channels double and the spatial extent is quartered at reduction blocks.
struct SupernetSpec {
  int in_channels = 3;
  int in_height = 32;
  int in_width = 32;
  int stem_channels = 64;
  std::vector<int> stage_channels;
  std::set<int> reduction_positions;
  int class_count = 10;
  int expansion_factor = 6;

  int block_count() const { return static_cast<int>(stage_channels.size()); }

  bool is_reduction(int block) const {
    return reduction_positions.count(block) > 0;
  }

  int block_in_channels(int block) const {
    return block == 0 ? stem_channels
                      : stage_channels[static_cast<std::size_t>(block - 1)];
  }

  int block_out_channels(int block) const {
    return stage_channels[static_cast<std::size_t>(block)];
  }

  int last_channels() const {
    return stage_channels.empty() ? stem_channels : stage_channels.back();
  }

  void validate() const {
    if (in_channels < 1 || in_height < 1 || in_width < 1) {
      throw ConfigError("input shape must be positive");
    }
    if (stem_channels < 1) throw ConfigError("stem_channels must be positive");
    if (stage_channels.empty()) throw ConfigError("at least one choice block required");
    if (class_count < 2) throw ConfigError("class_count must be >= 2");
    if (expansion_factor < 1) throw ConfigError("expansion_factor must be >= 1");
    for (const int r : reduction_positions) {
      if (r < 0 || r >= block_count()) {
        throw ConfigError("reduction position out of range: " + std::to_string(r));
      }
    }
    int prev = stem_channels;
    for (int i = 0; i < block_count(); ++i) {
      const int expect = is_reduction(i) ? 2 * prev : prev;
      if (block_out_channels(i) != expect) {
        throw ConfigError("stage_channels[" + std::to_string(i) + "] must be " +
                          std::to_string(expect) + " (channels double only at reductions)");
      }
      prev = block_out_channels(i);
    }
  }

  static SupernetSpec cifar10() {
    SupernetSpec spec;
    spec.in_channels = 3;
    spec.in_height = 32;
    spec.in_width = 32;
    spec.stem_channels = 64;
    spec.stage_channels = {64, 64, 64, 128, 128, 128, 256, 256, 256, 512, 512, 512};
    spec.reduction_positions = {3, 6, 9};
    spec.class_count = 10;
    spec.expansion_factor = 6;
    return spec;
  }
};

enum class BranchKind : std::uint8_t {
  identity = 0,
  residual = 1,
  inverted_residual = 2,
  depthwise_separable = 3,
};

// ---------------------------------------------------------------------------
// Branch plans. Each branch of each block is described once as a list of
// primitives plus a wrapper; the same plan drives parameter enumeration,
// sub-model construction and MAC accounting.
// ---------------------------------------------------------------------------

struct Prim {
  enum class Op { conv, dwconv, bn, relu };
  Op op;
  std::string name;  // parameter name within the branch; empty for bn/relu
  int c_in = 0;
  int c_out = 0;
  int kernel = 0;
  int stride = 1;
  int pad = 0;
};

struct BranchPlan {
  enum class Wrap {
    plain,              // just the primitive chain
    residual_add_relu,  // x + chain(x), then ReLU
    residual_add,       // x + chain(x)
    concat_pair,        // channel-concat of two single-conv branches
  };
  Wrap wrap = Wrap::plain;
  std::vector<Prim> prims;
};

inline BranchPlan branch_plan(const SupernetSpec& spec, int block, int branch) {
  const bool red = spec.is_reduction(block);
  const int c_in = spec.block_in_channels(block);
  const int c_out = spec.block_out_channels(block);
  const int s = red ? 2 : 1;
  BranchPlan plan;

  switch (static_cast<BranchKind>(branch)) {
    case BranchKind::identity:
      if (red) {
        // Two stride-2 pointwise branches concatenated along channels.
        plan.wrap = BranchPlan::Wrap::concat_pair;
        plan.prims = {
            {Prim::Op::conv, "left.w", c_in, c_in, 1, 2, 0},
            {Prim::Op::conv, "right.w", c_in, c_in, 1, 2, 0},
        };
      }
      // Normal identity is a pure pass-through.
      break;

    case BranchKind::residual:
      plan.prims = {
          {Prim::Op::conv, "conv1.w", c_in, c_out, 3, s, 1},
          {Prim::Op::bn, "", 0, 0, 0, 1, 0},
          {Prim::Op::relu, "", 0, 0, 0, 1, 0},
          {Prim::Op::conv, "conv2.w", c_out, c_out, 3, 1, 1},
          {Prim::Op::bn, "", 0, 0, 0, 1, 0},
      };
      if (red) {
        // No shortcut in the reduction variant.
        plan.prims.push_back({Prim::Op::relu, "", 0, 0, 0, 1, 0});
      } else {
        plan.wrap = BranchPlan::Wrap::residual_add_relu;
      }
      break;

    case BranchKind::inverted_residual: {
      const int expanded = spec.expansion_factor * c_in;
      plan.prims = {
          {Prim::Op::conv, "expand.w", c_in, expanded, 1, 1, 0},
          {Prim::Op::bn, "", 0, 0, 0, 1, 0},
          {Prim::Op::relu, "", 0, 0, 0, 1, 0},
          {Prim::Op::dwconv, "dw.w", expanded, expanded, 3, s, 1},
          {Prim::Op::bn, "", 0, 0, 0, 1, 0},
          {Prim::Op::relu, "", 0, 0, 0, 1, 0},
          {Prim::Op::conv, "project.w", expanded, c_out, 1, 1, 0},
          {Prim::Op::bn, "", 0, 0, 0, 1, 0},
      };
      if (!red) plan.wrap = BranchPlan::Wrap::residual_add;
      break;
    }

    case BranchKind::depthwise_separable:
      plan.prims = {
          {Prim::Op::dwconv, "dw1.w", c_in, c_in, 3, s, 1},
          {Prim::Op::conv, "pw1.w", c_in, c_out, 1, 1, 0},
          {Prim::Op::bn, "", 0, 0, 0, 1, 0},
          {Prim::Op::relu, "", 0, 0, 0, 1, 0},
          {Prim::Op::dwconv, "dw2.w", c_out, c_out, 3, 1, 1},
          {Prim::Op::conv, "pw2.w", c_out, c_out, 1, 1, 0},
          {Prim::Op::bn, "", 0, 0, 0, 1, 0},
          {Prim::Op::relu, "", 0, 0, 0, 1, 0},
      };
      if (!red) plan.wrap = BranchPlan::Wrap::residual_add;
      break;

    default:
      throw EncodingError("branch index out of range: " + std::to_string(branch));
  }
  return plan;
}

// ---------------------------------------------------------------------------
// Parameter enumeration.
// ---------------------------------------------------------------------------

struct ParamDef {
  std::string path;
  std::vector<int> shape;
  int fan_in = 0;  // 0 means zero-initialized (biases)
};

inline std::string block_prefix(int block, int branch) {
  return "block" + std::to_string(block) + "/b" + std::to_string(branch) + "/";
}

inline void append_branch_param_defs(const SupernetSpec& spec, int block, int branch,
                                     std::vector<ParamDef>& out) {
  const BranchPlan plan = branch_plan(spec, block, branch);
  const std::string prefix = block_prefix(block, branch);
  for (const Prim& p : plan.prims) {
    if (p.name.empty()) continue;
    if (p.op == Prim::Op::conv) {
      out.push_back({prefix + p.name,
                     {p.c_out, p.c_in, p.kernel, p.kernel},
                     p.c_in * p.kernel * p.kernel});
    } else if (p.op == Prim::Op::dwconv) {
      out.push_back({prefix + p.name,
                     {p.c_out, 1, p.kernel, p.kernel},
                     p.kernel * p.kernel});
    }
  }
}

inline void append_stem_and_head_defs(const SupernetSpec& spec, bool head_only,
                                      std::vector<ParamDef>& out) {
  if (!head_only) {
    out.push_back({"stem/conv.w",
                   {spec.stem_channels, spec.in_channels, 3, 3},
                   spec.in_channels * 9});
  } else {
    out.push_back({"head/fc.w", {spec.class_count, spec.last_channels()},
                   spec.last_channels()});
    out.push_back({"head/fc.b", {spec.class_count}, 0});
  }
}

// All parameters of the master model, in canonical order.
inline std::vector<ParamDef> master_param_defs(const SupernetSpec& spec) {
  std::vector<ParamDef> defs;
  append_stem_and_head_defs(spec, false, defs);
  for (int i = 0; i < spec.block_count(); ++i) {
    for (int b = 0; b < kBranchCount; ++b) append_branch_param_defs(spec, i, b, defs);
  }
  append_stem_and_head_defs(spec, true, defs);
  return defs;
}

// Parameters of the sub-model selected by a choice key, in canonical order.
inline std::vector<ParamDef> submodel_param_defs(const SupernetSpec& spec,
                                                 const ChoiceKey& key) {
  if (static_cast<int>(key.size()) != spec.block_count()) {
    throw StructuralError("choice key length " + std::to_string(key.size()) +
                          " does not match block count " +
                          std::to_string(spec.block_count()));
  }
  std::vector<ParamDef> defs;
  append_stem_and_head_defs(spec, false, defs);
  for (int i = 0; i < spec.block_count(); ++i) {
    append_branch_param_defs(spec, i, key[static_cast<std::size_t>(i)], defs);
  }
  append_stem_and_head_defs(spec, true, defs);
  return defs;
}

// ---------------------------------------------------------------------------
// Parameter store: the shared master weights, addressed by path.
// ---------------------------------------------------------------------------

struct ParameterStore {
  SupernetSpec spec;
  std::map<std::string, Tensor> params;
  std::int64_t round = 0;  // communication round t

  std::size_t param_count() const {
    std::size_t n = 0;
    for (const auto& [path, tensor] : params) n += tensor.numel();
    return n;
  }
};

inline Tensor init_param(const ParamDef& def, Rng& rng) {
  Tensor t(def.shape);
  if (def.fan_in > 0) {
    const double std_dev = std::sqrt(2.0 / static_cast<double>(def.fan_in));
    for (double& v : t.data) v = rng.normal() * std_dev;
  }
  return t;
}

inline ParameterStore build_master(const SupernetSpec& spec, Rng& rng) {
  spec.validate();
  ParameterStore store;
  store.spec = spec;
  for (const ParamDef& def : master_param_defs(spec)) {
    store.params.emplace(def.path, init_param(def, rng));
  }
  return store;
}

// ---------------------------------------------------------------------------
// Sub-model: one path through the master, with value-copied parameters.
// ---------------------------------------------------------------------------

struct SubModel {
  ChoiceKey key;
  SupernetSpec spec;
  std::unique_ptr<Layer> net;
  std::vector<ParamRef> params;  // construction order, stable

  SubModel() = default;
  SubModel(SubModel&&) = default;
  SubModel& operator=(SubModel&&) = default;

  Tensor run(const Tensor& x, Mode mode) { return net->forward(x, mode); }

  void zero_grads() {
    for (const ParamRef& p : params) p.grad->fill(0.0);
  }

  std::map<std::string, Tensor> param_values() const {
    std::map<std::string, Tensor> out;
    for (const ParamRef& p : params) out.emplace(p.path, *p.value);
    return out;
  }

  std::size_t param_count() const {
    std::size_t n = 0;
    for (const ParamRef& p : params) n += p.value->numel();
    return n;
  }
};

namespace detail {

template <class Getter>
std::unique_ptr<Layer> build_prim_chain(const std::vector<Prim>& prims,
                                        const std::string& prefix, Getter&& get) {
  auto seq = std::make_unique<Sequential>();
  for (const Prim& p : prims) {
    switch (p.op) {
      case Prim::Op::conv:
        seq->add(std::make_unique<Conv2d>(prefix + p.name, get(prefix + p.name),
                                          p.stride, p.pad, 1));
        break;
      case Prim::Op::dwconv:
        seq->add(std::make_unique<Conv2d>(prefix + p.name, get(prefix + p.name),
                                          p.stride, p.pad, p.c_in));
        break;
      case Prim::Op::bn:
        seq->add(std::make_unique<BatchNorm>());
        break;
      case Prim::Op::relu:
        seq->add(std::make_unique<ReLU>());
        break;
    }
  }
  return seq;
}

template <class Getter>
std::unique_ptr<Layer> build_branch_layer(const SupernetSpec& spec, int block,
                                          int branch, Getter&& get) {
  const BranchPlan plan = branch_plan(spec, block, branch);
  const std::string prefix = block_prefix(block, branch);
  if (plan.wrap == BranchPlan::Wrap::concat_pair) {
    std::vector<Prim> left{plan.prims[0]};
    std::vector<Prim> right{plan.prims[1]};
    return std::make_unique<ConcatPair>(build_prim_chain(left, prefix, get),
                                        build_prim_chain(right, prefix, get));
  }
  auto body = build_prim_chain(plan.prims, prefix, get);
  switch (plan.wrap) {
    case BranchPlan::Wrap::residual_add_relu:
      return std::make_unique<ResidualAdd>(std::move(body), true);
    case BranchPlan::Wrap::residual_add:
      return std::make_unique<ResidualAdd>(std::move(body), false);
    default:
      return body;
  }
}

template <class Getter>
SubModel make_submodel(const SupernetSpec& spec, const ChoiceKey& key, Getter&& get) {
  if (static_cast<int>(key.size()) != spec.block_count()) {
    throw StructuralError("choice key length " + std::to_string(key.size()) +
                          " does not match block count " +
                          std::to_string(spec.block_count()));
  }
  SubModel model;
  model.key = key;
  model.spec = spec;
  auto seq = std::make_unique<Sequential>();
  seq->add(std::make_unique<Conv2d>("stem/conv.w", get("stem/conv.w"), 1, 1, 1));
  seq->add(std::make_unique<BatchNorm>());
  seq->add(std::make_unique<ReLU>());
  for (int i = 0; i < spec.block_count(); ++i) {
    seq->add(build_branch_layer(spec, i, key[static_cast<std::size_t>(i)], get));
  }
  seq->add(std::make_unique<GlobalAvgPool>());
  seq->add(std::make_unique<Linear>("head/fc.w", "head/fc.b", get("head/fc.w"),
                                    get("head/fc.b")));
  model.net = std::move(seq);
  model.net->collect_params(model.params);
  return model;
}

}  // namespace detail

// Extract a sub-model whose parameters are value copies of the master's
// selected branches at call time.
inline SubModel extract_submodel(const ParameterStore& store, const ChoiceKey& key) {
  return detail::make_submodel(store.spec, key, [&store](const std::string& path) {
    const auto it = store.params.find(path);
    if (it == store.params.end()) {
      throw StructuralError("master store is missing parameter " + path);
    }
    return it->second;
  });
}

// Build a sub-model with freshly initialized parameters (no inheritance).
inline SubModel fresh_submodel(const SupernetSpec& spec, const ChoiceKey& key,
                               Rng& rng) {
  std::map<std::string, Tensor> init;
  for (const ParamDef& def : submodel_param_defs(spec, key)) {
    init.emplace(def.path, init_param(def, rng));
  }
  return detail::make_submodel(
      spec, key, [&init](const std::string& path) { return init.at(path); });
}

// ---------------------------------------------------------------------------
// Shape propagation and MAC accounting.
// ---------------------------------------------------------------------------

struct ShapeCHW {
  int c = 0, h = 0, w = 0;
  bool operator==(const ShapeCHW&) const = default;
};

inline int conv_out_extent(int extent, int kernel, int stride, int pad) {
  return (extent + 2 * pad - kernel) / stride + 1;
}

// Output shape after the stem and after every choice block.
inline std::vector<ShapeCHW> forward_shapes(const SupernetSpec& spec,
                                            const ChoiceKey& key) {
  if (static_cast<int>(key.size()) != spec.block_count()) {
    throw StructuralError("choice key length does not match block count");
  }
  std::vector<ShapeCHW> shapes;
  ShapeCHW cur{spec.stem_channels, spec.in_height, spec.in_width};
  shapes.push_back(cur);
  for (int i = 0; i < spec.block_count(); ++i) {
    if (spec.is_reduction(i)) {
      cur = ShapeCHW{spec.block_out_channels(i), conv_out_extent(cur.h, 3, 2, 1),
                     conv_out_extent(cur.w, 3, 2, 1)};
    } else {
      cur.c = spec.block_out_channels(i);
    }
    shapes.push_back(cur);
  }
  return shapes;
}

struct MacEntry {
  std::string name;
  long long macs = 0;
};

struct MacBreakdown {
  std::vector<MacEntry> entries;
  long long total = 0;
};

inline long long conv_macs(int h_out, int w_out, int c_out, int kernel, int c_in) {
  return static_cast<long long>(h_out) * w_out * c_out * kernel * kernel * c_in;
}

inline long long dwconv_macs(int h_out, int w_out, int c_out, int kernel) {
  return static_cast<long long>(h_out) * w_out * c_out * kernel * kernel;
}

// MACs of one branch of one block given its input spatial extent. Pooling,
// normalization, activation, addition and concatenation count zero.
inline long long branch_macs(const SupernetSpec& spec, int block, int branch,
                             int h_in, int w_in) {
  const BranchPlan plan = branch_plan(spec, block, branch);
  long long total = 0;
  int h = h_in, w = w_in;
  for (const Prim& p : plan.prims) {
    if (p.op == Prim::Op::bn || p.op == Prim::Op::relu) continue;
    const int h_out = conv_out_extent(h, p.kernel, p.stride, p.pad);
    const int w_out = conv_out_extent(w, p.kernel, p.stride, p.pad);
    if (p.op == Prim::Op::conv) {
      total += conv_macs(h_out, w_out, p.c_out, p.kernel, p.c_in);
    } else {
      total += dwconv_macs(h_out, w_out, p.c_out, p.kernel);
    }
    if (plan.wrap != BranchPlan::Wrap::concat_pair) {
      h = h_out;
      w = w_out;
    }
  }
  return total;
}

inline MacBreakdown count_macs_detail(const SupernetSpec& spec, const ChoiceKey& key) {
  const std::vector<ShapeCHW> shapes = forward_shapes(spec, key);
  MacBreakdown out;
  out.entries.push_back(
      {"stem", conv_macs(spec.in_height, spec.in_width, spec.stem_channels, 3,
                         spec.in_channels)});
  for (int i = 0; i < spec.block_count(); ++i) {
    const ShapeCHW in = shapes[static_cast<std::size_t>(i)];  // block input
    const int branch = key[static_cast<std::size_t>(i)];
    out.entries.push_back(
        {"block" + std::to_string(i) + "/b" + std::to_string(branch),
         branch_macs(spec, i, branch, in.h, in.w)});
  }
  out.entries.push_back(
      {"head/fc", static_cast<long long>(spec.last_channels()) * spec.class_count});
  for (const MacEntry& e : out.entries) out.total += e.macs;
  return out;
}

inline long long count_macs(const SupernetSpec& spec, const ChoiceKey& key) {
  return count_macs_detail(spec, key).total;
}

// Analytical MAC count of the 18-layer residual baseline on small images:
// a 3x3 stem, four stages of two basic blocks each (64/128/256/512 channels,
// stride-2 entry with a 1x1 projection shortcut from the second stage on),
// global average pooling and a fully connected classifier.
inline MacBreakdown count_macs_resnet18_detail(int in_c = 3, int in_h = 32,
                                               int in_w = 32, int classes = 10) {
  MacBreakdown out;
  int h = in_h, w = in_w;
  out.entries.push_back({"conv1", conv_macs(h, w, 64, 3, in_c)});

  const int stage_channels[4] = {64, 128, 256, 512};
  int c_in = 64;
  for (int s = 0; s < 4; ++s) {
    const int c = stage_channels[s];
    const bool down = s > 0;
    const std::string stage = "conv" + std::to_string(s + 2) + "_x";
    if (down) {
      h = conv_out_extent(h, 3, 2, 1);
      w = conv_out_extent(w, 3, 2, 1);
    }
    // First block: possibly strided, with projection shortcut when shapes change.
    long long macs = conv_macs(h, w, c, 3, c_in) + conv_macs(h, w, c, 3, c);
    if (down) macs += conv_macs(h, w, c, 1, c_in);
    out.entries.push_back({stage + "/block1", macs});
    // Second block.
    out.entries.push_back(
        {stage + "/block2", conv_macs(h, w, c, 3, c) + conv_macs(h, w, c, 3, c)});
    c_in = c;
  }
  out.entries.push_back({"fc", static_cast<long long>(512) * classes});
  for (const MacEntry& e : out.entries) out.total += e.macs;
  return out;
}

inline long long count_macs_resnet18(int in_c = 3, int in_h = 32, int in_w = 32,
                                     int classes = 10) {
  return count_macs_resnet18_detail(in_c, in_h, in_w, classes).total;
}

// ---------------------------------------------------------------------------
// Checkpoint format: a text manifest of (path, shape) entries followed by the
// raw little-endian 64-bit floats of every tensor in manifest order.
// ---------------------------------------------------------------------------

static_assert(std::endian::native == std::endian::little,
              "checkpoint format assumes a little-endian host");

inline void save_checkpoint(const ParameterStore& store, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open checkpoint for writing: " + path);
  out << "fednas-checkpoint 1\n";
  out << "round " << store.round << "\n";
  out << "tensors " << store.params.size() << "\n";
  for (const auto& [name, tensor] : store.params) {
    out << name << " " << tensor.shape.size();
    for (const int d : tensor.shape) out << " " << d;
    out << "\n";
  }
  out << "end\n";
  for (const auto& [name, tensor] : store.params) {
    out.write(reinterpret_cast<const char*>(tensor.data.data()),
              static_cast<std::streamsize>(tensor.data.size() * sizeof(double)));
  }
  if (!out) throw IoError("failed writing checkpoint: " + path);
}

inline ParameterStore load_checkpoint(const SupernetSpec& spec,
                                      const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint: " + path);
  std::string line;
  if (!std::getline(in, line) || line != "fednas-checkpoint 1") {
    throw FormatError("bad checkpoint header");
  }
  ParameterStore store;
  store.spec = spec;
  std::size_t tensor_count = 0;
  if (!std::getline(in, line) || line.rfind("round ", 0) != 0) {
    throw FormatError("bad checkpoint round line");
  }
  store.round = std::stoll(line.substr(6));
  if (!std::getline(in, line) || line.rfind("tensors ", 0) != 0) {
    throw FormatError("bad checkpoint tensor count line");
  }
  tensor_count = static_cast<std::size_t>(std::stoull(line.substr(8)));
  std::vector<std::string> order;
  for (std::size_t i = 0; i < tensor_count; ++i) {
    if (!std::getline(in, line)) throw FormatError("truncated checkpoint manifest");
    std::istringstream ls(line);
    std::string name;
    std::size_t ndim = 0;
    ls >> name >> ndim;
    std::vector<int> shape(ndim);
    for (auto& d : shape) ls >> d;
    if (!ls) throw FormatError("bad manifest entry: " + line);
    store.params.emplace(name, Tensor(shape));
    order.push_back(name);
  }
  if (!std::getline(in, line) || line != "end") {
    throw FormatError("missing checkpoint manifest terminator");
  }
  for (const std::string& name : order) {
    Tensor& t = store.params.at(name);
    in.read(reinterpret_cast<char*>(t.data.data()),
            static_cast<std::streamsize>(t.data.size() * sizeof(double)));
    if (!in) throw FormatError("truncated checkpoint payload at " + name);
  }
  return store;
}

}  // namespace fednas
