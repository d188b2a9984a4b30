#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "i2v/corpus.hpp"
#include "i2v/error.hpp"
#include "i2v/rng.hpp"

namespace i2v {

// Generator parameters for a cohort with planted structure: activities fall
// into co-occurrence clusters, diagnoses into families, and every diagnosis
// uses phase-specific (early / middle / late) mixtures over clusters.
struct SyntheticSpec {
  std::size_t n_visits = 2000;
  std::size_t n_activities = 200;
  std::size_t n_clusters = 10;
  std::size_t n_diagnoses = 20;
  std::size_t n_families = 5;
  std::uint64_t seed = 1;

  // Used by make_synthetic_spec to fill the distributions below.
  double los_mean_min = 4.0;
  double los_mean_max = 8.0;
  double activities_per_day = 8.0;
  double primary_weight = 0.9;
  double secondary_weight = 0.07;
  double zipf_exponent = 0.5;

  // LOS = clamp(2 + Poisson(los_mean - 2), 2, 50).
  std::vector<double> diagnosis_weights;
  std::vector<double> los_mean;
  // Day t is early if t <= phase_end[g][0], middle if t <= phase_end[g][1].
  std::vector<std::array<std::size_t, 2>> phase_end;
  // [diagnosis][phase][cluster], each row sums to 1.
  std::vector<std::array<std::vector<double>, 3>> phase_cluster_weights;
  std::vector<std::size_t> activity_cluster;
  // Within-cluster popularity, unnormalized.
  std::vector<double> activity_weight;
  std::vector<std::size_t> diagnosis_family;

  std::size_t max_day_size() const {
    std::vector<std::size_t> sizes(n_clusters, 0);
    for (auto c : activity_cluster) ++sizes[c];
    return *std::min_element(sizes.begin(), sizes.end());
  }

  std::size_t phase_of(std::size_t g, std::size_t day) const {
    if (day <= phase_end[g][0]) return 0;
    if (day <= phase_end[g][1]) return 1;
    return 2;
  }
};

inline std::string synthetic_activity_code(std::size_t a) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "A%04zu", a);
  return buf;
}

// Family f gets the three-character ICD-style prefix X00..; diagnoses within
// it get a numeric suffix, so prefix grouping recovers the family.
inline std::string synthetic_diagnosis_code(std::size_t family, std::size_t member) {
  char buf[24];
  std::snprintf(buf, sizeof buf, "%c%02zu.%zu", static_cast<char>('D' + family / 100),
                family % 100, member);
  return buf;
}

// Fills every distribution of `spec` from its counts, shape knobs, and seed.
inline SyntheticSpec make_synthetic_spec(SyntheticSpec spec) {
  auto fail = [](const std::string& field, const std::string& why) {
    throw InputError("synthetic spec field '" + field + "': " + why);
  };
  if (spec.n_visits == 0) fail("n_visits", "must be positive");
  if (spec.n_clusters == 0) fail("n_clusters", "must be positive");
  if (spec.n_activities < spec.n_clusters) fail("n_activities", "must be >= n_clusters");
  if (spec.n_families == 0) fail("n_families", "must be positive");
  if (spec.n_diagnoses < spec.n_families) fail("n_diagnoses", "must be >= n_families");
  Rng rng(derive_seed(spec.seed, 0x51));
  const std::size_t A = spec.n_activities, C = spec.n_clusters;
  const std::size_t G = spec.n_diagnoses, F = spec.n_families;

  // Balanced random cluster assignment and within-cluster popularity ranks.
  std::vector<std::size_t> perm(A);
  for (std::size_t a = 0; a < A; ++a) perm[a] = a;
  rng.shuffle(perm);
  spec.activity_cluster.assign(A, 0);
  spec.activity_weight.assign(A, 0.0);
  std::vector<std::size_t> rank_in_cluster(C, 0);
  for (std::size_t i = 0; i < A; ++i) {
    const std::size_t a = perm[i];
    const std::size_t c = i % C;
    spec.activity_cluster[a] = c;
    spec.activity_weight[a] =
        1.0 / std::pow(static_cast<double>(rank_in_cluster[c]++ + 1), spec.zipf_exponent);
  }

  std::vector<std::size_t> cluster_perm(C);
  for (std::size_t c = 0; c < C; ++c) cluster_perm[c] = c;
  rng.shuffle(cluster_perm);

  spec.diagnosis_family.assign(G, 0);
  spec.diagnosis_weights.assign(G, 1.0 / static_cast<double>(G));
  spec.los_mean.assign(G, 0.0);
  spec.phase_end.assign(G, {0, 0});
  spec.phase_cluster_weights.assign(G, {});
  std::vector<double> family_los(F);
  for (std::size_t f = 0; f < F; ++f) {
    family_los[f] = spec.los_mean_min + (spec.los_mean_max - spec.los_mean_min) * rng.uniform();
  }
  const double background = (1.0 - spec.primary_weight - spec.secondary_weight) /
                            static_cast<double>(C);
  for (std::size_t g = 0; g < G; ++g) {
    const std::size_t f = g * F / G;
    spec.diagnosis_family[g] = f;
    spec.los_mean[g] = std::clamp(family_los[f] + rng.uniform() - 0.5, 2.0, 50.0);
    const std::size_t early = 1 + rng.index(3);
    spec.phase_end[g] = {early, early + 2 + rng.index(3)};
    for (std::size_t p = 0; p < 3; ++p) {
      const std::size_t primary = cluster_perm[(2 * f + p) % C];
      std::size_t secondary = primary;
      if (C > 1) {
        while (secondary == primary) secondary = rng.index(C);
      }
      std::vector<double> w(C, background);
      w[primary] += spec.primary_weight;
      w[secondary] += spec.secondary_weight;
      spec.phase_cluster_weights[g][p] = std::move(w);
    }
  }
  return spec;
}

// Throws InputError naming the offending field.
inline void validate_synthetic_spec(const SyntheticSpec& s) {
  auto fail = [](const std::string& field, const std::string& why) {
    throw InputError("synthetic spec field '" + field + "': " + why);
  };
  if (s.n_visits == 0) fail("n_visits", "must be positive");
  if (s.n_clusters == 0) fail("n_clusters", "must be positive");
  if (s.n_activities < s.n_clusters) fail("n_activities", "must be >= n_clusters");
  if (s.n_families == 0) fail("n_families", "must be positive");
  if (s.n_diagnoses < s.n_families) fail("n_diagnoses", "must be >= n_families");
  if (!(s.activities_per_day >= 1.0)) fail("activities_per_day", "must be >= 1");
  if (s.primary_weight < 0 || s.secondary_weight < 0 ||
      s.primary_weight + s.secondary_weight > 1.0 + 1e-12) {
    fail("primary_weight", "primary_weight + secondary_weight must lie in [0, 1]");
  }
  if (s.diagnosis_weights.size() != s.n_diagnoses) fail("diagnosis_weights", "size mismatch");
  double total = 0.0;
  for (double w : s.diagnosis_weights) {
    if (!(w >= 0)) fail("diagnosis_weights", "negative weight");
    total += w;
  }
  if (std::abs(total - 1.0) > 1e-9) fail("diagnosis_weights", "must sum to 1");
  if (s.los_mean.size() != s.n_diagnoses) fail("los_mean", "size mismatch");
  for (double m : s.los_mean) {
    if (!(m >= 2.0 && m <= 50.0)) fail("los_mean", "values must lie in [2, 50]");
  }
  if (s.phase_end.size() != s.n_diagnoses) fail("phase_end", "size mismatch");
  for (const auto& pe : s.phase_end) {
    if (pe[0] < 1 || pe[1] < pe[0]) fail("phase_end", "need 1 <= early_end <= middle_end");
  }
  if (s.phase_cluster_weights.size() != s.n_diagnoses) {
    fail("phase_cluster_weights", "size mismatch");
  }
  for (const auto& phases : s.phase_cluster_weights) {
    for (const auto& w : phases) {
      if (w.size() != s.n_clusters) fail("phase_cluster_weights", "row size mismatch");
      double t = 0.0;
      for (double x : w) {
        if (!(x >= 0)) fail("phase_cluster_weights", "negative weight");
        t += x;
      }
      if (std::abs(t - 1.0) > 1e-9) fail("phase_cluster_weights", "rows must sum to 1");
    }
  }
  if (s.activity_cluster.size() != s.n_activities) fail("activity_cluster", "size mismatch");
  std::vector<std::size_t> sizes(s.n_clusters, 0);
  for (auto c : s.activity_cluster) {
    if (c >= s.n_clusters) fail("activity_cluster", "cluster id out of range");
    ++sizes[c];
  }
  for (auto n : sizes) {
    if (n == 0) fail("activity_cluster", "every cluster needs at least one activity");
  }
  if (s.activity_weight.size() != s.n_activities) fail("activity_weight", "size mismatch");
  for (double w : s.activity_weight) {
    if (!(w > 0)) fail("activity_weight", "weights must be positive");
  }
  if (s.diagnosis_family.size() != s.n_diagnoses) fail("diagnosis_family", "size mismatch");
  for (auto f : s.diagnosis_family) {
    if (f >= s.n_families) fail("diagnosis_family", "family id out of range");
  }
}

struct GroundTruth {
  std::map<std::string, int> activity_clusters;
  std::map<std::string, int> diagnosis_families;

  nlohmann::json to_json() const {
    return {{"activity_clusters", activity_clusters},
            {"diagnosis_families", diagnosis_families}};
  }
  static GroundTruth from_json(const nlohmann::json& j) {
    GroundTruth gt;
    gt.activity_clusters = j.at("activity_clusters").get<std::map<std::string, int>>();
    gt.diagnosis_families = j.at("diagnosis_families").get<std::map<std::string, int>>();
    return gt;
  }

  // Labels in vocabulary id order; throws if the truth does not cover an id.
  std::vector<std::size_t> activity_labels(const Vocabulary& v) const {
    std::vector<std::size_t> out;
    for (const auto& code : v.activity_codes()) {
      auto it = activity_clusters.find(code);
      if (it == activity_clusters.end()) {
        throw InputError("ground truth has no cluster for activity " + code);
      }
      out.push_back(static_cast<std::size_t>(it->second));
    }
    return out;
  }
  std::vector<std::size_t> diagnosis_labels(const Vocabulary& v) const {
    std::vector<std::size_t> out;
    for (const auto& code : v.diagnosis_codes()) {
      auto it = diagnosis_families.find(code);
      if (it == diagnosis_families.end()) {
        throw InputError("ground truth has no family for diagnosis " + code);
      }
      out.push_back(static_cast<std::size_t>(it->second));
    }
    return out;
  }
};

// Families from literal three-character code prefixes (ICD-10 style).
inline std::vector<std::size_t> prefix_families(const Vocabulary& v) {
  std::map<std::string, std::size_t> ids;
  std::vector<std::size_t> out;
  for (const auto& code : v.diagnosis_codes()) {
    const std::string prefix = code.substr(0, 3);
    auto [it, inserted] = ids.emplace(prefix, ids.size());
    out.push_back(it->second);
  }
  return out;
}

inline void save_ground_truth(const GroundTruth& gt, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("cannot write ground truth: " + path.string());
  out << gt.to_json().dump(1) << '\n';
}

inline GroundTruth load_ground_truth(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open ground truth: " + path.string());
  try {
    return GroundTruth::from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::exception& e) {
    throw InputError("invalid ground truth file " + path.string() + ": " + e.what());
  }
}

struct SyntheticCohort {
  Cohort cohort;
  GroundTruth truth;
};

inline SyntheticCohort generate_synthetic(const SyntheticSpec& spec) {
  validate_synthetic_spec(spec);
  Rng rng(derive_seed(spec.seed, 0x6e));
  const std::size_t C = spec.n_clusters;
  std::vector<std::vector<std::size_t>> members(C);
  for (std::size_t a = 0; a < spec.n_activities; ++a) {
    members[spec.activity_cluster[a]].push_back(a);
  }
  std::vector<std::size_t> member_index(spec.n_activities, 0);
  for (const auto& m : members) {
    for (std::size_t i = 0; i < m.size(); ++i) member_index[m[i]] = i;
  }
  std::vector<std::size_t> family_count(spec.n_families, 0);
  std::vector<std::string> diag_code(spec.n_diagnoses);
  for (std::size_t g = 0; g < spec.n_diagnoses; ++g) {
    diag_code[g] = synthetic_diagnosis_code(spec.diagnosis_family[g],
                                            family_count[spec.diagnosis_family[g]]++);
  }
  const std::size_t max_day = spec.max_day_size();

  std::vector<CodedVisit> coded;
  coded.reserve(spec.n_visits);
  std::vector<double> w;
  std::vector<char> used(spec.n_activities, 0);
  for (std::size_t i = 0; i < spec.n_visits; ++i) {
    char id[32];
    std::snprintf(id, sizeof id, "V%06zu", i);
    CodedVisit v{id, {}, {}};
    const std::size_t g = rng.categorical(spec.diagnosis_weights);
    v.diagnosis = diag_code[g];
    const std::size_t los =
        std::clamp<std::size_t>(2 + rng.poisson(spec.los_mean[g] - 2.0), 2, 50);
    for (std::size_t t = 1; t <= los; ++t) {
      const auto& cw = spec.phase_cluster_weights[g][spec.phase_of(g, t)];
      const std::size_t n = std::clamp<std::size_t>(
          1 + rng.poisson(spec.activities_per_day - 1.0), 1, max_day);
      std::vector<std::size_t> day;
      for (std::size_t k = 0; k < n; ++k) {
        const auto& m = members[rng.categorical(cw)];
        w.assign(m.size(), 0.0);
        for (std::size_t j = 0; j < m.size(); ++j) {
          if (!used[m[j]]) w[j] = spec.activity_weight[m[j]];
        }
        const std::size_t a = m[rng.categorical(w)];
        used[a] = 1;
        day.push_back(a);
      }
      std::sort(day.begin(), day.end());
      std::vector<std::string> codes;
      for (auto a : day) {
        used[a] = 0;
        codes.push_back(synthetic_activity_code(a));
      }
      v.days.push_back(std::move(codes));
    }
    coded.push_back(std::move(v));
  }

  SyntheticCohort out;
  out.cohort = build_cohort(coded, "synthetic:seed=" + std::to_string(spec.seed));
  for (std::size_t a = 0; a < spec.n_activities; ++a) {
    out.truth.activity_clusters[synthetic_activity_code(a)] =
        static_cast<int>(spec.activity_cluster[a]);
  }
  for (std::size_t g = 0; g < spec.n_diagnoses; ++g) {
    out.truth.diagnosis_families[diag_code[g]] = static_cast<int>(spec.diagnosis_family[g]);
  }
  return out;
}

// Exact expectations implied by the spec (truncation included).
struct SyntheticExpectation {
  double mean_los = 0.0;
  double mean_activities_per_day = 0.0;
  double expected_days = 0.0;
};

namespace detail {

// E[clamp(offset + Poisson(lambda), lo, hi)].
inline double clamped_poisson_mean(double lambda, std::size_t offset, std::size_t lo,
                                   std::size_t hi) {
  double mean = 0.0;
  double pmf = std::exp(-lambda);
  double cdf = 0.0;
  for (std::size_t k = 0; offset + k < hi; ++k) {
    mean += pmf * static_cast<double>(std::max(offset + k, lo));
    cdf += pmf;
    pmf *= lambda / static_cast<double>(k + 1);
  }
  return mean + (1.0 - cdf) * static_cast<double>(hi);
}

}  // namespace detail

inline SyntheticExpectation expected_stats(const SyntheticSpec& spec) {
  SyntheticExpectation e;
  for (std::size_t g = 0; g < spec.n_diagnoses; ++g) {
    e.mean_los += spec.diagnosis_weights[g] *
                  detail::clamped_poisson_mean(spec.los_mean[g] - 2.0, 2, 2, 50);
  }
  e.mean_activities_per_day = detail::clamped_poisson_mean(spec.activities_per_day - 1.0, 1, 1,
                                                           spec.max_day_size());
  e.expected_days = e.mean_los * static_cast<double>(spec.n_visits);
  return e;
}

inline nlohmann::json synthetic_spec_to_json(const SyntheticSpec& s) {
  nlohmann::json j;
  j["n_visits"] = s.n_visits;
  j["n_activities"] = s.n_activities;
  j["n_clusters"] = s.n_clusters;
  j["n_diagnoses"] = s.n_diagnoses;
  j["n_families"] = s.n_families;
  j["seed"] = s.seed;
  j["los_mean_min"] = s.los_mean_min;
  j["los_mean_max"] = s.los_mean_max;
  j["activities_per_day"] = s.activities_per_day;
  j["primary_weight"] = s.primary_weight;
  j["secondary_weight"] = s.secondary_weight;
  j["zipf_exponent"] = s.zipf_exponent;
  return j;
}

// Reads generator knobs from JSON. Unknown keys are rejected by name.
inline SyntheticSpec synthetic_spec_from_json(const nlohmann::json& j, SyntheticSpec s = {}) {
  if (!j.is_object()) throw InputError("synthetic spec must be a JSON object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    const std::string& k = it.key();
    try {
      if (k == "n_visits") s.n_visits = it->get<std::size_t>();
      else if (k == "n_activities") s.n_activities = it->get<std::size_t>();
      else if (k == "n_clusters") s.n_clusters = it->get<std::size_t>();
      else if (k == "n_diagnoses") s.n_diagnoses = it->get<std::size_t>();
      else if (k == "n_families") s.n_families = it->get<std::size_t>();
      else if (k == "seed") s.seed = it->get<std::uint64_t>();
      else if (k == "los_mean_min") s.los_mean_min = it->get<double>();
      else if (k == "los_mean_max") s.los_mean_max = it->get<double>();
      else if (k == "activities_per_day") s.activities_per_day = it->get<double>();
      else if (k == "primary_weight") s.primary_weight = it->get<double>();
      else if (k == "secondary_weight") s.secondary_weight = it->get<double>();
      else if (k == "zipf_exponent") s.zipf_exponent = it->get<double>();
      else throw InputError("synthetic spec field '" + k + "': unknown key");
    } catch (const nlohmann::json::exception&) {
      throw InputError("synthetic spec field '" + k + "': wrong type");
    }
  }
  if (s.los_mean_min < 2.0 || s.los_mean_max < s.los_mean_min || s.los_mean_max > 50.0) {
    throw InputError("synthetic spec field 'los_mean_min': need 2 <= min <= max <= 50");
  }
  if (s.n_visits == 0) throw InputError("synthetic spec field 'n_visits': must be positive");
  return s;
}

}  // namespace i2v
