#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "i2v/error.hpp"
#include "i2v/rng.hpp"

namespace i2v {

using ActivityId = std::uint32_t;
using DiagnosisId = std::uint32_t;

// One hospital day: an unordered set of activities, stored sorted by id.
struct DayRecord {
  std::vector<ActivityId> activities;

  friend bool operator==(const DayRecord&, const DayRecord&) = default;
};

struct VisitRecord {
  std::string visit_id;
  DiagnosisId diagnosis = 0;
  std::vector<DayRecord> days;

  std::size_t los() const { return days.size(); }
  friend bool operator==(const VisitRecord&, const VisitRecord&) = default;
};

// Activity and diagnosis code spaces. Real activities occupy ids
// [0, |A|); the special tokens follow them.
class Vocabulary {
 public:
  Vocabulary() = default;

  // Codes are sorted so ids do not depend on input order. max_los is
  // indexed by the position of the code in the sorted diagnosis list.
  Vocabulary(std::vector<std::string> activity_codes,
             std::vector<std::pair<std::string, std::size_t>> diagnoses) {
    std::sort(activity_codes.begin(), activity_codes.end());
    activity_codes.erase(std::unique(activity_codes.begin(), activity_codes.end()),
                         activity_codes.end());
    std::sort(diagnoses.begin(), diagnoses.end());
    activities_ = std::move(activity_codes);
    for (std::size_t i = 0; i < activities_.size(); ++i) {
      activity_index_.emplace(activities_[i], static_cast<ActivityId>(i));
    }
    for (auto& [code, n] : diagnoses) {
      if (diagnosis_index_.count(code)) {
        throw InputError("duplicate diagnosis code in vocabulary: " + code);
      }
      if (n == 0 || n > 50) {
        throw InputError("diagnosis " + code + " has day capacity " + std::to_string(n) +
                         " outside [1, 50]");
      }
      diagnosis_index_.emplace(code, static_cast<DiagnosisId>(diagnoses_.size()));
      diagnoses_.push_back(code);
      max_los_.push_back(n);
    }
  }

  std::size_t n_activities() const { return activities_.size(); }
  std::size_t n_diagnoses() const { return diagnoses_.size(); }

  ActivityId cls_id() const { return static_cast<ActivityId>(activities_.size()); }
  ActivityId mask_id() const { return static_cast<ActivityId>(activities_.size() + 1); }
  ActivityId pad_id() const { return static_cast<ActivityId>(activities_.size() + 2); }
  static constexpr std::size_t kSpecialTokens = 3;

  const std::string& activity_code(ActivityId id) const { return activities_.at(id); }
  const std::string& diagnosis_code(DiagnosisId id) const { return diagnoses_.at(id); }
  const std::vector<std::string>& activity_codes() const { return activities_; }
  const std::vector<std::string>& diagnosis_codes() const { return diagnoses_; }

  std::optional<ActivityId> find_activity(const std::string& code) const {
    auto it = activity_index_.find(code);
    if (it == activity_index_.end()) return std::nullopt;
    return it->second;
  }
  std::optional<DiagnosisId> find_diagnosis(const std::string& code) const {
    auto it = diagnosis_index_.find(code);
    if (it == diagnosis_index_.end()) return std::nullopt;
    return it->second;
  }

  // N_g: maximum observed LOS for the diagnosis.
  std::size_t max_los(DiagnosisId g) const { return max_los_.at(g); }
  const std::vector<std::size_t>& max_los_table() const { return max_los_; }

  // FNV-1a 64 over codes and day capacities, as 16 hex digits.
  std::string digest() const {
    std::uint64_t h = 1469598103934665603ULL;
    auto feed = [&h](std::string_view s) {
      for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ULL;
      }
      h ^= 0xff;
      h *= 1099511628211ULL;
    };
    feed("activities");
    for (const auto& a : activities_) feed(a);
    feed("diagnoses");
    for (std::size_t g = 0; g < diagnoses_.size(); ++g) {
      feed(diagnoses_[g]);
      feed(std::to_string(max_los_[g]));
    }
    std::ostringstream out;
    out << std::hex << std::setw(16) << std::setfill('0') << h;
    return out.str();
  }

  nlohmann::json to_json() const {
    nlohmann::json diag = nlohmann::json::array();
    for (std::size_t g = 0; g < diagnoses_.size(); ++g) {
      diag.push_back({diagnoses_[g], max_los_[g]});
    }
    return {{"activities", activities_}, {"diagnoses", diag}};
  }

  static Vocabulary from_json(const nlohmann::json& j) {
    std::vector<std::pair<std::string, std::size_t>> diag;
    for (const auto& d : j.at("diagnoses")) {
      diag.emplace_back(d.at(0).get<std::string>(), d.at(1).get<std::size_t>());
    }
    return Vocabulary(j.at("activities").get<std::vector<std::string>>(), std::move(diag));
  }

  friend bool operator==(const Vocabulary& a, const Vocabulary& b) {
    return a.activities_ == b.activities_ && a.diagnoses_ == b.diagnoses_ &&
           a.max_los_ == b.max_los_;
  }

 private:
  std::vector<std::string> activities_;
  std::unordered_map<std::string, ActivityId> activity_index_;
  std::vector<std::string> diagnoses_;
  std::unordered_map<std::string, DiagnosisId> diagnosis_index_;
  std::vector<std::size_t> max_los_;
};

struct Cohort {
  std::vector<VisitRecord> visits;
  Vocabulary vocab;
  std::string provenance;
  // Repeated activity codes within a day that were merged at load time.
  std::size_t duplicates_merged = 0;

  std::size_t total_days() const {
    std::size_t n = 0;
    for (const auto& v : visits) n += v.los();
    return n;
  }
  std::size_t total_tokens() const {
    std::size_t n = 0;
    for (const auto& v : visits)
      for (const auto& d : v.days) n += d.activities.size();
    return n;
  }
};

// A visit expressed in codes; the form visits take before ids are assigned.
struct CodedVisit {
  std::string visit_id;
  std::string diagnosis;
  std::vector<std::vector<std::string>> days;
};

inline CodedVisit to_coded(const VisitRecord& v, const Vocabulary& vocab) {
  CodedVisit c{v.visit_id, vocab.diagnosis_code(v.diagnosis), {}};
  for (const auto& d : v.days) {
    std::vector<std::string> codes;
    for (auto a : d.activities) codes.push_back(vocab.activity_code(a));
    c.days.push_back(std::move(codes));
  }
  return c;
}

// Builds the vocabulary from the codes the visits use and assigns ids.
inline Cohort build_cohort(const std::vector<CodedVisit>& coded, std::string provenance) {
  std::set<std::string> activity_codes;
  std::map<std::string, std::size_t> diag_los;
  for (const auto& v : coded) {
    auto& n = diag_los[v.diagnosis];
    n = std::max(n, v.days.size());
    for (const auto& d : v.days) activity_codes.insert(d.begin(), d.end());
  }
  std::vector<std::pair<std::string, std::size_t>> diag(diag_los.begin(), diag_los.end());
  for (auto& [code, n] : diag) n = std::min<std::size_t>(std::max<std::size_t>(n, 1), 50);

  Cohort c;
  c.vocab = Vocabulary({activity_codes.begin(), activity_codes.end()}, std::move(diag));
  c.provenance = std::move(provenance);
  c.visits.reserve(coded.size());
  for (const auto& cv : coded) {
    VisitRecord v;
    v.visit_id = cv.visit_id;
    v.diagnosis = *c.vocab.find_diagnosis(cv.diagnosis);
    for (const auto& d : cv.days) {
      DayRecord day;
      for (const auto& code : d) day.activities.push_back(*c.vocab.find_activity(code));
      std::sort(day.activities.begin(), day.activities.end());
      const auto before = day.activities.size();
      day.activities.erase(std::unique(day.activities.begin(), day.activities.end()),
                           day.activities.end());
      c.duplicates_merged += before - day.activities.size();
      v.days.push_back(std::move(day));
    }
    c.visits.push_back(std::move(v));
  }
  return c;
}

// Re-derives the vocabulary from a subset of visits of `source`.
inline Cohort rebuild_cohort(const Cohort& source, const std::vector<std::size_t>& keep) {
  std::vector<CodedVisit> coded;
  coded.reserve(keep.size());
  for (auto i : keep) coded.push_back(to_coded(source.visits[i], source.vocab));
  Cohort c = build_cohort(coded, source.provenance);
  c.duplicates_merged = source.duplicates_merged;
  return c;
}

inline constexpr const char* kCohortSchema = "inpatient2vec-cohort";
inline constexpr int kCohortVersion = 1;

inline Cohort load_cohort(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open cohort file: " + path.string());
  std::string line;
  std::size_t line_no = 0;
  bool have_header = false;
  std::vector<CodedVisit> coded;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw InputError(path.string() + ":" + std::to_string(line_no) +
                       ": malformed JSON: " + e.what());
    }
    auto fail = [&](const std::string& msg) {
      throw InputError(path.string() + ":" + std::to_string(line_no) + ": " + msg);
    };
    if (!have_header) {
      if (!j.is_object() || j.value("schema", "") != kCohortSchema) {
        fail("first line must be the cohort header");
      }
      if (!j.contains("version") || !j["version"].is_number_integer() ||
          j["version"].get<int>() != kCohortVersion) {
        fail("unsupported schema version");
      }
      have_header = true;
      continue;
    }
    try {
      CodedVisit v;
      v.visit_id = j.at("visit_id").get<std::string>();
      v.diagnosis = j.at("diagnosis").get<std::string>();
      for (const auto& d : j.at("days")) {
        auto codes = d.get<std::vector<std::string>>();
        if (codes.empty()) fail("visit " + v.visit_id + " has an empty day");
        v.days.push_back(std::move(codes));
      }
      if (v.days.empty()) fail("visit " + v.visit_id + " has no days");
      coded.push_back(std::move(v));
    } catch (const nlohmann::json::exception& e) {
      fail(std::string("invalid visit record: ") + e.what());
    }
  }
  if (!have_header) throw InputError("empty cohort file: " + path.string());
  if (coded.empty()) throw InputError("cohort file has no visits: " + path.string());
  return build_cohort(coded, path.string());
}

inline void save_cohort(const Cohort& c, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("cannot write cohort file: " + path.string());
  out << nlohmann::json{{"schema", kCohortSchema}, {"version", kCohortVersion}}.dump() << '\n';
  for (const auto& v : c.visits) {
    const CodedVisit cv = to_coded(v, c.vocab);
    nlohmann::json j;
    j["visit_id"] = cv.visit_id;
    j["diagnosis"] = cv.diagnosis;
    j["days"] = cv.days;
    out << j.dump() << '\n';
  }
  if (!out) throw InputError("failed writing cohort file: " + path.string());
}

struct FilterConfig {
  std::size_t min_los = 2;
  std::size_t max_los = 50;
  std::size_t min_diag_visits = 100;
  std::size_t max_diag_visits = 3000;

  // Diagnosis-frequency bounds multiplied by s, for cohorts smaller than the
  // original claims data.
  static FilterConfig scaled(double s) {
    FilterConfig f;
    f.min_diag_visits = static_cast<std::size_t>(std::llround(100.0 * s));
    f.max_diag_visits = static_cast<std::size_t>(std::llround(3000.0 * s));
    return f;
  }

  friend bool operator==(const FilterConfig&, const FilterConfig&) = default;
};

// LOS filter first, then diagnosis frequency counted on the LOS-filtered
// visits; the vocabulary is rebuilt from the survivors.
inline Cohort filter_cohort(const Cohort& c, const FilterConfig& f = {}) {
  std::vector<std::size_t> los_ok;
  for (std::size_t i = 0; i < c.visits.size(); ++i) {
    const auto n = c.visits[i].los();
    if (n >= f.min_los && n <= f.max_los) los_ok.push_back(i);
  }
  std::vector<std::size_t> counts(c.vocab.n_diagnoses(), 0);
  for (auto i : los_ok) ++counts[c.visits[i].diagnosis];
  std::vector<std::size_t> keep;
  for (auto i : los_ok) {
    const auto n = counts[c.visits[i].diagnosis];
    if (n >= f.min_diag_visits && n <= f.max_diag_visits) keep.push_back(i);
  }
  return rebuild_cohort(c, keep);
}

struct StatsReport {
  std::size_t visits = 0;
  std::size_t days = 0;
  std::size_t diagnosis_codes = 0;
  std::size_t activity_codes = 0;
  double avg_activities_per_day = 0.0;
  double avg_los = 0.0;

  std::string table() const {
    std::ostringstream out;
    out << std::left << std::setw(34) << "Items" << "Numbers\n";
    out << std::setw(34) << "# of visits" << visits << '\n';
    out << std::setw(34) << "# of days" << days << '\n';
    out << std::setw(34) << "# of diagnosis codes" << diagnosis_codes << '\n';
    out << std::setw(34) << "# of medical codes" << activity_codes << '\n';
    out << std::setw(34) << "Avg. # of activities per day" << std::fixed
        << std::setprecision(2) << avg_activities_per_day << '\n';
    out << std::setw(34) << "Avg. of length of stay" << avg_los << '\n';
    return out.str();
  }

  nlohmann::json to_json() const {
    return {{"visits", visits},
            {"days", days},
            {"diagnosis_codes", diagnosis_codes},
            {"activity_codes", activity_codes},
            {"avg_activities_per_day", avg_activities_per_day},
            {"avg_los", avg_los}};
  }
};

inline StatsReport cohort_stats(const Cohort& c) {
  if (c.visits.empty()) throw InputError("cohort_stats: empty cohort");
  StatsReport s;
  s.visits = c.visits.size();
  s.days = c.total_days();
  std::set<DiagnosisId> diag;
  std::set<ActivityId> acts;
  for (const auto& v : c.visits) {
    diag.insert(v.diagnosis);
    for (const auto& d : v.days) acts.insert(d.activities.begin(), d.activities.end());
  }
  s.diagnosis_codes = diag.size();
  s.activity_codes = acts.size();
  s.avg_activities_per_day =
      static_cast<double>(c.total_tokens()) / static_cast<double>(s.days);
  s.avg_los = static_cast<double>(s.days) / static_cast<double>(s.visits);
  return s;
}

struct SplitRatios {
  double train = 0.75;
  double valid = 0.10;
  double test = 0.15;
};

struct CohortSplit {
  Cohort train;
  Cohort valid;
  Cohort test;
};

// Visit-level random partition. All three parts share the full cohort's
// vocabulary; visits keep their original relative order.
inline CohortSplit split_cohort(const Cohort& c, const SplitRatios& r, std::uint64_t seed) {
  if (r.train < 0 || r.valid < 0 || r.test < 0 ||
      std::abs(r.train + r.valid + r.test - 1.0) > 1e-9) {
    throw InputError("split ratios must be nonnegative and sum to 1");
  }
  const std::size_t n = c.visits.size();
  if (n < 3) throw InputError("split_cohort: need at least 3 visits, have " + std::to_string(n));
  auto count = [n](double ratio) {
    return std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(ratio * n)));
  };
  const std::size_t n_valid = count(r.valid);
  const std::size_t n_test = count(r.test);
  if (n_valid + n_test >= n) throw InputError("split_cohort: cohort too small for ratios");

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng rng(derive_seed(seed, 0x5b11));
  rng.shuffle(order);

  auto take = [&](std::size_t begin, std::size_t end) {
    std::vector<std::size_t> idx(order.begin() + begin, order.begin() + end);
    std::sort(idx.begin(), idx.end());
    Cohort part;
    part.vocab = c.vocab;
    part.provenance = c.provenance;
    for (auto i : idx) part.visits.push_back(c.visits[i]);
    return part;
  };
  const std::size_t n_train = n - n_valid - n_test;
  return {take(0, n_train), take(n_train, n_train + n_valid), take(n_train + n_valid, n)};
}

}  // namespace i2v
