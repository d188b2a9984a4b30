#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "i2v/corpus.hpp"
#include "i2v/error.hpp"
#include "i2v/metrics.hpp"
#include "i2v/rng.hpp"
#include "i2v/tensor.hpp"

namespace i2v {

// The five nearest activities to the anchor (the anchor itself, at distance
// zero, is the first of them) plus one intruder.
struct IntrusionSet {
  std::size_t anchor = 0;
  std::array<std::size_t, 5> neighbors{};
  std::size_t intruder = 0;
  std::size_t oracle_pick = 0;

  std::array<std::size_t, 6> members() const {
    return {neighbors[0], neighbors[1], neighbors[2], neighbors[3], neighbors[4], intruder};
  }
};

// Anchors are sampled with replacement. Rows of `embeddings` are activities.
inline std::vector<IntrusionSet> build_intrusion_sets(const Tensor& embeddings, std::size_t n_sets,
                                                      std::uint64_t seed) {
  const std::size_t n = embeddings.rows();
  if (n < 12) throw InputError("build_intrusion_sets: need at least 12 activities, got " + std::to_string(n));
  std::vector<IntrusionSet> sets;
  if (n_sets == 0) return sets;
  const Tensor dist = pairwise_euclidean(embeddings);
  const std::size_t far_count = (n + 1) / 2;
  Rng rng(derive_seed(seed, 0x1a7));
  std::vector<std::size_t> order(n);
  for (std::size_t s = 0; s < n_sets; ++s) {
    IntrusionSet set;
    set.anchor = rng.index(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      return dist(set.anchor, a) < dist(set.anchor, b);
    });
    std::copy_n(order.begin(), 5, set.neighbors.begin());
    // Farthest half; with n >= 12 it never overlaps the five nearest.
    set.intruder = order[n - far_count + rng.index(far_count)];
    sets.push_back(set);
  }
  return sets;
}

enum class IntrusionTieBreak { kRandom, kFarthestFromCentroid };

// The oracle picks the member whose cluster differs from the unique
// plurality cluster of the other five. Ambiguous sets are resolved by
// `tie_break` among the qualifying members (all six when none qualify).
inline double intrusion_precision_oracle(std::vector<IntrusionSet>& sets,
                                         const std::vector<std::size_t>& clusters, const Tensor& embeddings,
                                         std::uint64_t seed,
                                         IntrusionTieBreak tie_break = IntrusionTieBreak::kRandom) {
  if (sets.empty()) return 0.0;
  Rng rng(derive_seed(seed, 0x0ac1e));
  std::size_t correct = 0;
  for (auto& set : sets) {
    const auto all = set.members();
    std::vector<std::size_t> candidates;
    for (std::size_t i = 0; i < 6; ++i) {
      if (all[i] >= clusters.size()) throw InputError("intrusion oracle: ground truth misses an activity");
      std::map<std::size_t, std::size_t> count;
      for (std::size_t j = 0; j < 6; ++j)
        if (j != i) ++count[clusters[all[j]]];
      std::size_t top = 0, top_n = 0, ties = 0;
      for (const auto& [c, x] : count) {
        if (x > top_n) {
          top = c;
          top_n = x;
          ties = 1;
        } else if (x == top_n) {
          ++ties;
        }
      }
      if (ties == 1 && clusters[all[i]] != top) candidates.push_back(all[i]);
    }
    if (candidates.size() == 1) {
      set.oracle_pick = candidates[0];
    } else {
      if (candidates.empty()) candidates.assign(all.begin(), all.end());
      if (tie_break == IntrusionTieBreak::kRandom) {
        set.oracle_pick = candidates[rng.index(candidates.size())];
      } else {
        std::vector<double> centroid(embeddings.cols(), 0.0);
        for (std::size_t id : all)
          for (std::size_t k = 0; k < embeddings.cols(); ++k) centroid[k] += embeddings(id, k) / 6.0;
        double best = -1.0;
        for (std::size_t id : candidates) {
          double d = 0.0;
          for (std::size_t k = 0; k < embeddings.cols(); ++k) {
            const double x = embeddings(id, k) - centroid[k];
            d += x * x;
          }
          if (d > best) {
            best = d;
            set.oracle_pick = id;
          }
        }
      }
    }
    if (set.oracle_pick == set.intruder) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(sets.size());
}

// Ground-truth labels permuted across activities.
inline std::vector<std::size_t> shuffled_labels(std::vector<std::size_t> clusters, std::uint64_t seed) {
  Rng rng(derive_seed(seed, 0x5f1e));
  rng.shuffle(clusters);
  return clusters;
}

struct IntrusionWorksheet {
  std::string worksheet_csv;  // set_id, six shuffled codes
  std::string answer_key_csv; // set_id, intruder code
};

// Human-annotation worksheet with member order shuffled per set.
inline IntrusionWorksheet intrusion_worksheet(const std::vector<IntrusionSet>& sets, const Vocabulary& vocab,
                                              std::uint64_t seed) {
  Rng rng(derive_seed(seed, 0x3e7));
  std::ostringstream ws, key;
  ws << "set_id,code1,code2,code3,code4,code5,code6\n";
  key << "set_id,intruder\n";
  for (std::size_t s = 0; s < sets.size(); ++s) {
    const auto& set = sets[s];
    const auto arr = set.members();
    std::vector<std::size_t> members(arr.begin(), arr.end());
    rng.shuffle(members);
    ws << s;
    for (std::size_t id : members) ws << ',' << vocab.activity_code(static_cast<ActivityId>(id));
    ws << '\n';
    key << s << ',' << vocab.activity_code(static_cast<ActivityId>(set.intruder)) << '\n';
  }
  return {ws.str(), key.str()};
}

}  // namespace i2v
