#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <numeric>
#include <vector>

#include "fednas/codec.hpp"
#include "fednas/errors.hpp"
#include "fednas/rng.hpp"

namespace fednas {

// Both objectives are minimized: objectives[0] is the weighted test error,
// objectives[1] the MAC count.
using Objectives = std::array<double, 2>;

struct Individual {
  Genome genome;
  Objectives objectives{0.0, 0.0};
  int rank = -1;
  double crowding = 0.0;
};

// True iff a is no worse in every objective and strictly better in at least one.
inline bool dominates(const Objectives& a, const Objectives& b) {
  bool strictly_better = false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i] > b[i]) return false;
    if (a[i] < b[i]) strictly_better = true;
  }
  return strictly_better;
}

// Deb's fast non-dominated sorting, O(mN^2). Front 0 is the non-dominated
// set; front j+1 is non-dominated once fronts <= j are removed.
inline std::vector<std::vector<int>> fast_nondominated_sort(
    const std::vector<Objectives>& objs) {
  for (const Objectives& o : objs) {
    if (!std::isfinite(o[0]) || !std::isfinite(o[1])) {
      throw NumericError("non-finite objective in population");
    }
  }
  const int n = static_cast<int>(objs.size());
  std::vector<std::vector<int>> dominated(static_cast<std::size_t>(n));
  std::vector<int> dom_count(static_cast<std::size_t>(n), 0);
  std::vector<std::vector<int>> fronts(1);
  for (int p = 0; p < n; ++p) {
    for (int q = 0; q < n; ++q) {
      if (p == q) continue;
      if (dominates(objs[static_cast<std::size_t>(p)], objs[static_cast<std::size_t>(q)])) {
        dominated[static_cast<std::size_t>(p)].push_back(q);
      } else if (dominates(objs[static_cast<std::size_t>(q)],
                           objs[static_cast<std::size_t>(p)])) {
        ++dom_count[static_cast<std::size_t>(p)];
      }
    }
    if (dom_count[static_cast<std::size_t>(p)] == 0) fronts[0].push_back(p);
  }
  std::size_t i = 0;
  while (!fronts[i].empty()) {
    std::vector<int> next;
    for (const int p : fronts[i]) {
      for (const int q : dominated[static_cast<std::size_t>(p)]) {
        if (--dom_count[static_cast<std::size_t>(q)] == 0) next.push_back(q);
      }
    }
    ++i;
    fronts.push_back(std::move(next));
  }
  fronts.pop_back();  // the loop always leaves one empty front behind
  return fronts;
}

// Crowding distance within one front: boundary points per objective get
// +infinity, interior points accumulate normalized neighbor gaps. A zero
// objective range contributes nothing.
inline std::vector<double> crowding_distance(const std::vector<Objectives>& front) {
  if (front.empty()) throw StructuralError("crowding distance of an empty front");
  const std::size_t n = front.size();
  std::vector<double> dist(n, 0.0);
  for (std::size_t obj = 0; obj < 2; ++obj) {
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
      if (front[a][obj] != front[b][obj]) return front[a][obj] < front[b][obj];
      return a < b;
    });
    dist[idx.front()] = std::numeric_limits<double>::infinity();
    dist[idx.back()] = std::numeric_limits<double>::infinity();
    const double range = front[idx.back()][obj] - front[idx.front()][obj];
    if (range <= 0.0) continue;
    for (std::size_t j = 1; j + 1 < n; ++j) {
      dist[idx[j]] += (front[idx[j + 1]][obj] - front[idx[j - 1]][obj]) / range;
    }
  }
  return dist;
}

namespace detail {

// Tie rule inside the last admitted front: higher crowding first, then lower
// MAC count, then lower genome lexicographic order. Lower error is the final
// key so the order is total even for hand-built populations where equal
// genomes carry unequal objectives.
inline bool select_before(const Individual& a, const Individual& b) {
  if (a.crowding != b.crowding) return a.crowding > b.crowding;
  if (a.objectives[1] != b.objectives[1]) return a.objectives[1] < b.objectives[1];
  if (a.genome != b.genome) return a.genome < b.genome;
  return a.objectives[0] < b.objectives[0];
}

}  // namespace detail

// Select the best N individuals from R: fill by ascending front, split the
// last admitted front by descending crowding distance. Annotates rank and
// crowding on every individual of R.
inline std::vector<int> environmental_select(std::vector<Individual>& combined,
                                             int select_count) {
  if (static_cast<int>(combined.size()) < select_count) {
    throw ConfigError("cannot select " + std::to_string(select_count) +
                      " individuals from " + std::to_string(combined.size()));
  }
  std::vector<Objectives> objs;
  objs.reserve(combined.size());
  for (const Individual& ind : combined) objs.push_back(ind.objectives);
  const auto fronts = fast_nondominated_sort(objs);

  for (std::size_t f = 0; f < fronts.size(); ++f) {
    // Canonical member order: with duplicate objective values the boundary
    // (infinite) crowding slots would otherwise follow the input order.
    std::vector<int> members = fronts[f];
    std::sort(members.begin(), members.end(), [&](int x, int y) {
      const Individual& ix = combined[static_cast<std::size_t>(x)];
      const Individual& iy = combined[static_cast<std::size_t>(y)];
      if (ix.objectives != iy.objectives) return ix.objectives < iy.objectives;
      if (ix.genome != iy.genome) return ix.genome < iy.genome;
      return x < y;
    });
    std::vector<Objectives> front_objs;
    front_objs.reserve(members.size());
    for (const int i : members) front_objs.push_back(objs[static_cast<std::size_t>(i)]);
    const auto dist = crowding_distance(front_objs);
    for (std::size_t j = 0; j < members.size(); ++j) {
      combined[static_cast<std::size_t>(members[j])].rank = static_cast<int>(f);
      combined[static_cast<std::size_t>(members[j])].crowding = dist[j];
    }
  }

  std::vector<int> selected;
  selected.reserve(static_cast<std::size_t>(select_count));
  for (const auto& front : fronts) {
    if (static_cast<int>(selected.size()) >= select_count) break;
    const int remaining = select_count - static_cast<int>(selected.size());
    if (static_cast<int>(front.size()) <= remaining) {
      selected.insert(selected.end(), front.begin(), front.end());
      continue;
    }
    std::vector<int> order = front;
    std::sort(order.begin(), order.end(), [&](int a, int b) {
      const Individual& ia = combined[static_cast<std::size_t>(a)];
      const Individual& ib = combined[static_cast<std::size_t>(b)];
      if (detail::select_before(ia, ib)) return true;
      if (detail::select_before(ib, ia)) return false;
      return a < b;
    });
    selected.insert(selected.end(), order.begin(), order.begin() + remaining);
  }
  return selected;
}

// Binary variation: parents are paired in shuffled order, one-point crossover
// applies with probability pc at a uniform cut, and mutation flips each bit
// with rate 1/length once the genome-level gate pm fires. With an odd parent
// count the leftover parent passes through mutation only.
inline std::vector<Genome> variation(const std::vector<Genome>& parents, double pc,
                                     double pm, Rng& rng) {
  if (parents.empty()) throw ConfigError("variation needs at least one parent");
  if (pc < 0.0 || pc > 1.0 || pm < 0.0 || pm > 1.0) {
    throw ConfigError("probabilities must lie in [0, 1]");
  }
  const std::size_t length = parents.front().size();
  if (length < 2) throw ConfigError("genome length must be >= 2");
  for (const Genome& g : parents) {
    if (g.size() != length) throw StructuralError("parents have mixed genome lengths");
  }

  std::vector<std::size_t> order(parents.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  rng.shuffle(order);

  const auto mutate = [&](Genome& g) {
    if (rng.uniform_real() >= pm) return;
    const double per_bit = 1.0 / static_cast<double>(length);
    for (auto& bit : g) {
      if (rng.uniform_real() < per_bit) bit ^= 1;
    }
  };

  std::vector<Genome> offspring;
  offspring.reserve(parents.size());
  std::size_t i = 0;
  for (; i + 1 < order.size(); i += 2) {
    Genome a = parents[order[i]];
    Genome b = parents[order[i + 1]];
    if (rng.uniform_real() < pc) {
      const int cut = rng.uniform_int(1, static_cast<int>(length) - 1);
      for (std::size_t j = static_cast<std::size_t>(cut); j < length; ++j) {
        std::swap(a[j], b[j]);
      }
    }
    mutate(a);
    mutate(b);
    offspring.push_back(std::move(a));
    offspring.push_back(std::move(b));
  }
  if (i < order.size()) {
    Genome a = parents[order[i]];
    mutate(a);
    offspring.push_back(std::move(a));
  }
  return offspring;
}

}  // namespace fednas
