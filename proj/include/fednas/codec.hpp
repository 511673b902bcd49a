#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fednas/errors.hpp"
#include "fednas/rng.hpp"

namespace fednas {

// A genome is the binary wire form of an architecture: two bits per choice
// block, most significant bit first, so the pair [1,0] selects branch 2.
using Genome = std::vector<std::uint8_t>;

// A choice key selects one branch per choice block:
// 0 = identity, 1 = residual, 2 = inverted residual, 3 = depthwise separable.
using ChoiceKey = std::vector<std::uint8_t>;

inline constexpr int kBranchCount = 4;
inline constexpr int kBitsPerChoice = 2;

inline ChoiceKey decode(const Genome& genome) {
  if (genome.size() % kBitsPerChoice != 0) {
    throw EncodingError("genome length must be even, got " +
                        std::to_string(genome.size()));
  }
  ChoiceKey key(genome.size() / kBitsPerChoice);
  for (std::size_t i = 0; i < key.size(); ++i) {
    const std::uint8_t hi = genome[2 * i];
    const std::uint8_t lo = genome[2 * i + 1];
    if (hi > 1 || lo > 1) throw EncodingError("genome contains non-binary value");
    key[i] = static_cast<std::uint8_t>(2 * hi + lo);
  }
  return key;
}

inline Genome encode(const ChoiceKey& key) {
  Genome genome(key.size() * kBitsPerChoice);
  for (std::size_t i = 0; i < key.size(); ++i) {
    if (key[i] >= kBranchCount) {
      throw EncodingError("branch index out of range: " +
                          std::to_string(key[i]));
    }
    genome[2 * i] = static_cast<std::uint8_t>(key[i] >> 1);
    genome[2 * i + 1] = static_cast<std::uint8_t>(key[i] & 1);
  }
  return genome;
}

inline ChoiceKey random_key(int block_count, Rng& rng) {
  if (block_count < 1) throw ConfigError("block_count must be >= 1");
  ChoiceKey key(static_cast<std::size_t>(block_count));
  for (auto& branch : key) {
    branch = static_cast<std::uint8_t>(rng.uniform_below(kBranchCount));
  }
  return key;
}

// Log form of a genome: a string of '0'/'1' characters.
inline std::string genome_to_string(const Genome& genome) {
  std::string s;
  s.reserve(genome.size());
  for (const auto b : genome) s.push_back(b ? '1' : '0');
  return s;
}

inline Genome genome_from_string(const std::string& s) {
  Genome genome;
  genome.reserve(s.size());
  for (const char c : s) {
    if (c != '0' && c != '1') throw EncodingError("genome string must be binary");
    genome.push_back(c == '1' ? 1 : 0);
  }
  return genome;
}

// Log form of a choice key: comma-separated branch indices.
inline std::string key_to_string(const ChoiceKey& key) {
  std::string s;
  for (std::size_t i = 0; i < key.size(); ++i) {
    if (i) s.push_back(',');
    s += std::to_string(static_cast<int>(key[i]));
  }
  return s;
}

inline ChoiceKey key_from_string(const std::string& s) {
  ChoiceKey key;
  std::size_t pos = 0;
  while (pos < s.size()) {
    std::size_t next = s.find(',', pos);
    if (next == std::string::npos) next = s.size();
    const std::string tok = s.substr(pos, next - pos);
    if (tok.empty()) throw EncodingError("empty entry in choice key string");
    int v = 0;
    for (const char c : tok) {
      if (c < '0' || c > '9') throw EncodingError("invalid choice key string");
      v = v * 10 + (c - '0');
    }
    if (v >= kBranchCount) {
      throw EncodingError("branch index out of range: " + tok);
    }
    key.push_back(static_cast<std::uint8_t>(v));
    pos = next + 1;
  }
  return key;
}

}  // namespace fednas
