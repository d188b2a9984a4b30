#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>

#include "i2v/corpus.hpp"
#include "i2v/synthetic.hpp"

using namespace i2v;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir() {
  const fs::path dir = fs::temp_directory_path() /
                       ("i2v_corpus_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

void write(const fs::path& p, const std::string& text) { std::ofstream(p) << text; }

const char* kHeader = R"({"schema":"inpatient2vec-cohort","version":1})";

std::vector<CodedVisit> toy_visits() {
  return {{"v1", "K35.8", {{"B", "A"}, {"C"}, {"A"}}},
          {"v2", "K35.8", {{"A"}, {"B", "B"}}},
          {"v3", "I21.0", {{"C", "D"}, {"D"}}},
          {"v4", "I21.0", {{"A"}}}};
}

std::string error_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const std::exception& e) {
    return e.what();
  }
  return "";
}

SyntheticSpec small_spec(std::uint64_t seed = 3) {
  SyntheticSpec s;
  s.n_visits = 600;
  s.seed = seed;
  return make_synthetic_spec(s);
}

}  // namespace

TEST(Vocabulary, SortedIdsAndSpecialTokens) {
  Vocabulary v({"b", "a", "c", "a"}, {{"Z1", 3}, {"A1", 5}});
  EXPECT_EQ(v.n_activities(), 3u);
  EXPECT_EQ(v.activity_code(0), "a");
  EXPECT_EQ(v.cls_id(), 3u);
  EXPECT_EQ(v.mask_id(), 4u);
  EXPECT_EQ(v.pad_id(), 5u);
  EXPECT_EQ(*v.find_diagnosis("A1"), 0u);
  EXPECT_EQ(v.max_los(1), 3u);
  EXPECT_FALSE(v.find_activity("zz"));
}

TEST(Vocabulary, RejectsBadDiagnoses) {
  EXPECT_THROW(Vocabulary({"a"}, {{"X", 2}, {"X", 3}}), InputError);
  EXPECT_THROW(Vocabulary({"a"}, {{"X", 0}}), InputError);
  EXPECT_THROW(Vocabulary({"a"}, {{"X", 51}}), InputError);
}

TEST(Vocabulary, DigestTracksContentAndJsonRoundTrips) {
  Vocabulary a({"a", "b"}, {{"X", 2}});
  Vocabulary b({"b", "a"}, {{"X", 2}});
  Vocabulary c({"a", "b"}, {{"X", 3}});
  EXPECT_EQ(a.digest(), b.digest());
  EXPECT_NE(a.digest(), c.digest());
  EXPECT_EQ(a.digest().size(), 16u);
  EXPECT_EQ(Vocabulary::from_json(a.to_json()), a);
}

TEST(Cohort, BuildMergesDuplicatesAndRecordsMaxLos) {
  Cohort c = build_cohort(toy_visits(), "toy");
  EXPECT_EQ(c.duplicates_merged, 1u);
  EXPECT_EQ(c.vocab.n_activities(), 4u);
  const DiagnosisId k = *c.vocab.find_diagnosis("K35.8");
  EXPECT_EQ(c.vocab.max_los(k), 3u);
  EXPECT_EQ(c.visits[0].days[0].activities, (std::vector<ActivityId>{0, 1}));
  EXPECT_EQ(c.total_days(), 8u);
  EXPECT_EQ(c.total_tokens(), 10u);
}

TEST(Cohort, SaveLoadRoundTrip) {
  const auto dir = temp_dir();
  Cohort c = build_cohort(toy_visits(), "toy");
  save_cohort(c, dir / "c.jsonl");
  Cohort d = load_cohort(dir / "c.jsonl");
  EXPECT_EQ(d.visits, c.visits);
  EXPECT_EQ(d.vocab, c.vocab);
  save_cohort(d, dir / "d.jsonl");
  std::ifstream a(dir / "c.jsonl"), b(dir / "d.jsonl");
  EXPECT_EQ(std::string(std::istreambuf_iterator<char>(a), {}), std::string(std::istreambuf_iterator<char>(b), {}));
}

TEST(Cohort, LoadErrorsCarryLineNumbers) {
  const auto dir = temp_dir();
  const std::string good = R"({"visit_id":"v","diagnosis":"X","days":[["a"]]})";
  write(dir / "bad_json.jsonl", std::string(kHeader) + "\n" + good + "\n{oops\n");
  EXPECT_NE(error_of([&] { load_cohort(dir / "bad_json.jsonl"); }).find("bad_json.jsonl:3"), std::string::npos);

  write(dir / "empty_day.jsonl", std::string(kHeader) + "\n\n" + R"({"visit_id":"v","diagnosis":"X","days":[[]]})");
  const auto msg = error_of([&] { load_cohort(dir / "empty_day.jsonl"); });
  EXPECT_NE(msg.find(":3:"), std::string::npos);
  EXPECT_NE(msg.find("empty day"), std::string::npos);

  write(dir / "missing.jsonl", std::string(kHeader) + "\n" + R"({"visit_id":"v","days":[["a"]]})");
  EXPECT_NE(error_of([&] { load_cohort(dir / "missing.jsonl"); }).find(":2:"), std::string::npos);

  write(dir / "no_header.jsonl", good + "\n");
  EXPECT_THROW(load_cohort(dir / "no_header.jsonl"), InputError);
  write(dir / "version.jsonl", R"({"schema":"inpatient2vec-cohort","version":2})");
  EXPECT_THROW(load_cohort(dir / "version.jsonl"), InputError);
  EXPECT_THROW(load_cohort(dir / "does_not_exist.jsonl"), InputError);
}

TEST(Filter, ScaledBounds) {
  const auto f = FilterConfig::scaled(0.1);
  EXPECT_EQ(f.min_diag_visits, 10u);
  EXPECT_EQ(f.max_diag_visits, 300u);
  EXPECT_EQ(f.min_los, 2u);
  EXPECT_EQ(f.max_los, 50u);
}

TEST(Filter, LosThenFrequency) {
  // Diagnosis X: three visits of LOS 2, one of LOS 1. After the LOS filter it
  // has 3 visits; Y keeps 2 and falls below min_diag_visits = 3.
  std::vector<CodedVisit> v;
  for (int i = 0; i < 3; ++i) v.push_back({"x" + std::to_string(i), "X", {{"a"}, {"b"}}});
  v.push_back({"x9", "X", {{"q"}}});
  v.push_back({"y0", "Y", {{"a"}, {"c"}}});
  v.push_back({"y1", "Y", {{"a"}, {"c"}}});
  FilterConfig f;
  f.min_diag_visits = 3;
  f.max_diag_visits = 3;
  Cohort out = filter_cohort(build_cohort(v, "t"), f);
  EXPECT_EQ(out.visits.size(), 3u);
  EXPECT_EQ(out.vocab.n_diagnoses(), 1u);
  // Codes used only by dropped visits leave the vocabulary.
  EXPECT_FALSE(out.vocab.find_activity("q"));
  EXPECT_FALSE(out.vocab.find_activity("c"));
}

TEST(Filter, PropertiesAndIdempotenceOnSyntheticData) {
  auto sc = generate_synthetic(small_spec());
  const auto f = FilterConfig::scaled(0.1);
  Cohort once = filter_cohort(sc.cohort, f);
  std::map<DiagnosisId, std::size_t> counts;
  for (const auto& v : once.visits) {
    EXPECT_GE(v.los(), f.min_los);
    EXPECT_LE(v.los(), f.max_los);
    ++counts[v.diagnosis];
  }
  for (auto [g, n] : counts) {
    EXPECT_GE(n, f.min_diag_visits);
    EXPECT_LE(n, f.max_diag_visits);
  }
  Cohort twice = filter_cohort(once, f);
  EXPECT_EQ(twice.visits, once.visits);
  EXPECT_EQ(twice.vocab, once.vocab);
}

TEST(Split, PartitionsVisitsWithSharedVocabulary) {
  auto sc = generate_synthetic(small_spec());
  auto s = split_cohort(sc.cohort, SplitRatios{}, 7);
  EXPECT_EQ(s.valid.visits.size(), 60u);
  EXPECT_EQ(s.test.visits.size(), 90u);
  EXPECT_EQ(s.train.visits.size(), 450u);
  std::set<std::string> ids;
  for (const Cohort* c : {&s.train, &s.valid, &s.test}) {
    EXPECT_EQ(c->vocab, sc.cohort.vocab);
    for (const auto& v : c->visits) EXPECT_TRUE(ids.insert(v.visit_id).second);
  }
  EXPECT_EQ(ids.size(), sc.cohort.visits.size());
  auto again = split_cohort(sc.cohort, SplitRatios{}, 7);
  EXPECT_EQ(again.test.visits, s.test.visits);
  auto other = split_cohort(sc.cohort, SplitRatios{}, 8);
  EXPECT_NE(other.test.visits, s.test.visits);
  EXPECT_THROW(split_cohort(sc.cohort, SplitRatios{0.5, 0.5, 0.5}, 1), InputError);
}

TEST(Stats, ToyCohort) {
  auto s = cohort_stats(build_cohort(toy_visits(), "toy"));
  EXPECT_EQ(s.visits, 4u);
  EXPECT_EQ(s.days, 8u);
  EXPECT_EQ(s.diagnosis_codes, 2u);
  EXPECT_EQ(s.activity_codes, 4u);
  EXPECT_DOUBLE_EQ(s.avg_activities_per_day, 10.0 / 8.0);
  EXPECT_DOUBLE_EQ(s.avg_los, 2.0);
  EXPECT_NE(s.table().find("# of visits"), std::string::npos);
  EXPECT_EQ(s.to_json()["days"], 8);
}

TEST(Synthetic, DeterministicForSeed) {
  auto a = generate_synthetic(small_spec(5));
  auto b = generate_synthetic(small_spec(5));
  auto c = generate_synthetic(small_spec(6));
  EXPECT_EQ(a.cohort.visits, b.cohort.visits);
  EXPECT_EQ(a.truth.to_json(), b.truth.to_json());
  EXPECT_NE(a.cohort.visits, c.cohort.visits);
}

TEST(Synthetic, CodesEncodeFamiliesAndClusters) {
  auto spec = small_spec();
  auto sc = generate_synthetic(spec);
  const auto& vocab = sc.cohort.vocab;
  const auto fam = prefix_families(vocab);
  const auto truth_fam = sc.truth.diagnosis_labels(vocab);
  ASSERT_EQ(fam.size(), truth_fam.size());
  // Prefix grouping induces the same partition as the planted families.
  std::map<std::size_t, std::size_t> m;
  for (std::size_t i = 0; i < fam.size(); ++i) {
    auto [it, fresh] = m.emplace(fam[i], truth_fam[i]);
    EXPECT_EQ(it->second, truth_fam[i]);
  }
  const auto labels = sc.truth.activity_labels(vocab);
  for (ActivityId a = 0; a < vocab.n_activities(); ++a) {
    const std::size_t original = std::stoul(vocab.activity_code(a).substr(1));
    EXPECT_EQ(labels[a], spec.activity_cluster[original]);
  }
}

TEST(Synthetic, DiagnosisFrequenciesPassChiSquare) {
  SyntheticSpec s;
  s.n_visits = 4000;
  s.seed = 11;
  s = make_synthetic_spec(s);
  auto sc = generate_synthetic(s);
  std::map<std::string, double> observed;
  for (const auto& v : sc.cohort.visits) observed[sc.cohort.vocab.diagnosis_code(v.diagnosis)] += 1.0;
  std::vector<std::size_t> per_family(s.n_families, 0);
  double chi2 = 0.0;
  for (std::size_t g = 0; g < s.n_diagnoses; ++g) {
    const auto code = synthetic_diagnosis_code(s.diagnosis_family[g], per_family[s.diagnosis_family[g]]++);
    const double expected = s.diagnosis_weights[g] * static_cast<double>(s.n_visits);
    chi2 += (observed[code] - expected) * (observed[code] - expected) / expected;
  }
  // 99.9% quantile of chi-square with 19 degrees of freedom.
  EXPECT_LT(chi2, 43.82);
}

TEST(Synthetic, DaySizesPassChiSquare) {
  SyntheticSpec s;
  s.n_visits = 2000;
  s.seed = 12;
  s = make_synthetic_spec(s);
  auto sc = generate_synthetic(s);
  const std::size_t cap = s.max_day_size();
  std::vector<double> observed(cap + 1, 0.0);
  for (const auto& v : sc.cohort.visits)
    for (const auto& d : v.days) observed[d.activities.size()] += 1.0;
  const double n = static_cast<double>(sc.cohort.total_days());
  // 1 + Poisson(lambda), the top bin absorbing the clamped tail.
  const double lambda = s.activities_per_day - 1.0;
  std::vector<double> expected(cap + 1, 0.0);
  double pmf = std::exp(-lambda), cdf = 0.0;
  for (std::size_t k = 1; k < cap; ++k) {
    expected[k] = pmf * n;
    cdf += pmf;
    pmf *= lambda / static_cast<double>(k);
  }
  expected[cap] = (1.0 - cdf) * n;
  // Pool sparse bins from both ends into their neighbours.
  double chi2 = 0.0, eo = 0.0, ee = 0.0;
  int bins = 0;
  for (std::size_t k = 1; k <= cap; ++k) {
    eo += observed[k];
    ee += expected[k];
    if (ee >= 5.0 && (k == cap || expected[k + 1] >= 5.0 || k + 1 == cap)) {
      chi2 += (eo - ee) * (eo - ee) / ee;
      eo = ee = 0.0;
      ++bins;
    }
  }
  if (ee > 0) chi2 += (eo - ee) * (eo - ee) / ee, ++bins;
  ASSERT_GE(bins, 8);
  // Generous bound: 99.9% quantile at 25 degrees of freedom is 52.6.
  EXPECT_LT(chi2, 52.6);
}

TEST(Synthetic, StatsMatchExpectationWithinFivePercent) {
  SyntheticSpec s;
  s.n_visits = 3000;
  s.seed = 13;
  s = make_synthetic_spec(s);
  auto sc = generate_synthetic(s);
  const auto st = cohort_stats(sc.cohort);
  const auto ex = expected_stats(s);
  EXPECT_NEAR(st.avg_los / ex.mean_los, 1.0, 0.05);
  EXPECT_NEAR(st.avg_activities_per_day / ex.mean_activities_per_day, 1.0, 0.05);
  EXPECT_NEAR(static_cast<double>(st.days) / ex.expected_days, 1.0, 0.05);
}

TEST(Synthetic, PhasesFollowTheirPrimaryClusters) {
  auto s = small_spec();
  auto sc = generate_synthetic(s);
  const auto labels = sc.truth.activity_labels(sc.cohort.vocab);
  std::map<std::string, std::size_t> code_to_g;
  std::vector<std::size_t> per_family(s.n_families, 0);
  for (std::size_t g = 0; g < s.n_diagnoses; ++g)
    code_to_g[synthetic_diagnosis_code(s.diagnosis_family[g], per_family[s.diagnosis_family[g]]++)] = g;
  double hits = 0.0, total = 0.0;
  for (const auto& v : sc.cohort.visits) {
    const std::size_t g = code_to_g.at(sc.cohort.vocab.diagnosis_code(v.diagnosis));
    for (std::size_t t = 1; t <= v.los(); ++t) {
      const auto& w = s.phase_cluster_weights[g][s.phase_of(g, t)];
      const std::size_t primary = std::max_element(w.begin(), w.end()) - w.begin();
      for (auto a : v.days[t - 1].activities) {
        hits += labels[a] == primary;
        total += 1.0;
      }
    }
  }
  // Sampling without replacement within a day shifts mass away from the
  // primary cluster slightly, so allow a few points below its weight.
  EXPECT_GT(hits / total, s.primary_weight + (1 - s.primary_weight - s.secondary_weight) / s.n_clusters - 0.05);
}

TEST(Synthetic, SpecJsonValidation) {
  auto s = synthetic_spec_from_json(nlohmann::json{{"n_visits", 10}, {"zipf_exponent", 1.0}});
  EXPECT_EQ(s.n_visits, 10u);
  EXPECT_EQ(synthetic_spec_from_json(synthetic_spec_to_json(s)).zipf_exponent, 1.0);
  EXPECT_NE(error_of([] { synthetic_spec_from_json(nlohmann::json{{"n_visit", 1}}); }).find("n_visit"),
            std::string::npos);
  EXPECT_NE(error_of([] { synthetic_spec_from_json(nlohmann::json{{"seed", "x"}}); }).find("'seed'"),
            std::string::npos);
  SyntheticSpec bad = small_spec();
  bad.primary_weight = 0.95;
  bad.secondary_weight = 0.1;
  EXPECT_NE(error_of([&] { validate_synthetic_spec(bad); }).find("primary_weight"), std::string::npos);
}

TEST(GroundTruth, JsonRoundTripAndMissingCodes) {
  auto sc = generate_synthetic(small_spec());
  const auto dir = temp_dir();
  save_ground_truth(sc.truth, dir / "t.json");
  auto back = load_ground_truth(dir / "t.json");
  EXPECT_EQ(back.to_json(), sc.truth.to_json());
  Vocabulary other({"nope"}, {{"Q", 2}});
  EXPECT_THROW(back.activity_labels(other), InputError);
}
