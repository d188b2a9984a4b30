#pragma once

#include <cstdint>
#include <iomanip>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "i2v/corpus.hpp"
#include "i2v/error.hpp"
#include "i2v/finetune.hpp"
#include "i2v/intrusion.hpp"
#include "i2v/metrics.hpp"
#include "i2v/model.hpp"
#include "i2v/synthetic.hpp"

namespace i2v {

inline const std::vector<std::string>& all_eval_tasks() {
  static const std::vector<std::string> tasks{"intrusion", "cluster", "recall", "los"};
  return tasks;
}

inline std::set<std::string> parse_eval_tasks(const std::string& list) {
  std::set<std::string> out;
  std::stringstream ss(list);
  std::string t;
  while (std::getline(ss, t, ',')) {
    if (t.empty()) continue;
    if (std::find(all_eval_tasks().begin(), all_eval_tasks().end(), t) == all_eval_tasks().end()) {
      throw InputError("unknown eval task '" + t + "' (intrusion, cluster, recall, los)");
    }
    out.insert(t);
  }
  if (out.empty()) throw InputError("no eval tasks selected");
  return out;
}

struct EvalOptions {
  std::set<std::string> tasks{all_eval_tasks().begin(), all_eval_tasks().end()};
  std::size_t n_intrusion_sets = 500;
  IntrusionTieBreak tie_break = IntrusionTieBreak::kRandom;
  DiagnosisVectorMode vector_mode = DiagnosisVectorMode::kDayMean;
  std::size_t control_repeats = 10;
  FinetuneConfig finetune;
  bool random_init_control = false;
  std::size_t bootstrap_resamples = 1000;
  std::uint64_t seed = 1;
  std::size_t threads = 1;
};

struct RecallRow {
  std::string method;
  RecallReport recall;
  Interval recall_a_ci;
  std::optional<double> los_rmse;
};

struct EvalReport {
  nlohmann::json metadata = nlohmann::json::object();
  std::optional<double> intrusion_precision;
  std::optional<double> intrusion_control;
  std::size_t intrusion_sets = 0;
  std::optional<double> nmi;
  std::optional<double> nmi_control;
  std::string cluster_labels;
  std::vector<RecallRow> rows;
  std::optional<double> los_rmse;
  std::optional<double> los_mean_baseline_rmse;
  std::optional<IntrusionWorksheet> worksheet;

  const RecallRow* row(const std::string& method) const {
    for (const auto& r : rows)
      if (r.method == method) return &r;
    return nullptr;
  }

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["metadata"] = metadata;
    auto opt = [](const std::optional<double>& x) { return x ? nlohmann::json(*x) : nlohmann::json(nullptr); };
    j["intrusion"] = {{"precision", opt(intrusion_precision)},
                      {"shuffled_label_control", opt(intrusion_control)},
                      {"n_sets", intrusion_sets}};
    j["cluster"] = {{"nmi", opt(nmi)}, {"random_embedding_control", opt(nmi_control)}, {"labels", cluster_labels}};
    nlohmann::json rs = nlohmann::json::array();
    for (const auto& r : rows) {
      nlohmann::json x = r.recall.to_json();
      x["method"] = r.method;
      x["recall_a_ci95"] = {r.recall_a_ci.lo, r.recall_a_ci.hi};
      x["los_rmse"] = opt(r.los_rmse);
      rs.push_back(x);
    }
    j["recall"] = rs;
    j["los"] = {{"rmse", opt(los_rmse)}, {"mean_predictor_rmse", opt(los_mean_baseline_rmse)}};
    return j;
  }

  // Aligned columns: RECALL@A, RECALL@5, RECALL@10, RECALL@20, LOS_RMSE.
  std::string to_table() const {
    std::ostringstream os;
    os << std::fixed << std::setprecision(4);
    os << std::left << std::setw(26) << "METHOD" << std::right;
    for (const char* h : {"RECALL@A", "RECALL@5", "RECALL@10", "RECALL@20", "LOS_RMSE"}) os << std::setw(11) << h;
    os << '\n';
    for (const auto& r : rows) {
      os << std::left << std::setw(26) << r.method << std::right;
      for (double v : {r.recall.recall_a, r.recall.recall_5, r.recall.recall_10, r.recall.recall_20})
        os << std::setw(11) << v;
      if (r.los_rmse) os << std::setw(11) << *r.los_rmse;
      else os << std::setw(11) << "-";
      os << '\n';
    }
    if (rows.empty() && los_rmse) {
      os << std::left << std::setw(26) << "fine-tuned" << std::right;
      for (int i = 0; i < 4; ++i) os << std::setw(11) << "-";
      os << std::setw(11) << *los_rmse << '\n';
    }
    if (intrusion_precision) {
      os << "intrusion precision " << *intrusion_precision << " (shuffled-label control "
         << *intrusion_control << ", " << intrusion_sets << " sets)\n";
    }
    if (nmi) os << "diagnosis clustering NMI " << *nmi << " (random-embedding control " << *nmi_control << ")\n";
    if (los_mean_baseline_rmse) os << "LOS mean-predictor RMSE " << *los_mean_baseline_rmse << '\n';
    return os.str();
  }
};

// Runs the selected evaluations of a pretrained model on a split cohort.
// Intrusion precision and ground-truth clustering need `truth`; without it
// intrusion sets are only written out as a worksheet and clustering falls
// back to three-character code prefixes.
inline EvalReport run_evaluation(const Model& pretrained, const CohortSplit& split,
                                 const std::optional<GroundTruth>& truth, const EvalOptions& opt) {
  for (const Cohort* c : {&split.train, &split.valid, &split.test}) require_compatible(pretrained, *c);
  EvalReport rep;
  rep.metadata = {{"seed", opt.seed},
                  {"vocab_digest", pretrained.vocab().digest()},
                  {"tasks", std::vector<std::string>(opt.tasks.begin(), opt.tasks.end())},
                  {"diagnosis_vector_mode", opt.vector_mode == DiagnosisVectorMode::kDayMean    ? "day_mean"
                                            : opt.vector_mode == DiagnosisVectorMode::kFirstDay ? "first_day"
                                                                                                : "flatten_pad"},
                  {"finetune", opt.finetune.to_json()},
                  {"test_visits", split.test.visits.size()}};

  if (opt.tasks.count("intrusion")) {
    const Tensor emb = activity_embeddings(pretrained);
    auto sets = build_intrusion_sets(emb, opt.n_intrusion_sets, derive_seed(opt.seed, 10));
    rep.intrusion_sets = sets.size();
    rep.worksheet = intrusion_worksheet(sets, pretrained.vocab(), derive_seed(opt.seed, 11));
    if (truth) {
      const auto labels = truth->activity_labels(pretrained.vocab());
      rep.intrusion_precision = intrusion_precision_oracle(sets, labels, emb, derive_seed(opt.seed, 12), opt.tie_break);
      auto control_sets = sets;
      rep.intrusion_control = intrusion_precision_oracle(
          control_sets, shuffled_labels(labels, derive_seed(opt.seed, 13)), emb, derive_seed(opt.seed, 12), opt.tie_break);
    }
  }

  if (opt.tasks.count("cluster")) {
    std::vector<std::size_t> labels;
    if (truth) {
      labels = truth->diagnosis_labels(pretrained.vocab());
      rep.cluster_labels = "ground_truth";
    } else {
      labels = prefix_families(pretrained.vocab());
      rep.cluster_labels = "code_prefix";
    }
    const std::size_t k = std::set<std::size_t>(labels.begin(), labels.end()).size();
    if (k < 2) throw InputError("diagnosis clustering needs at least 2 families");
    const Tensor vectors = diagnosis_vectors(pretrained, opt.vector_mode);
    rep.nmi = nmi(kmeans(vectors, k, derive_seed(opt.seed, 20)).assignments, labels);
    double control = 0.0;
    for (std::size_t r = 0; r < opt.control_repeats; ++r) {
      Rng rng(derive_seed(opt.seed, 100 + r));
      Tensor random(vectors.shape(), 0.0);
      for (std::size_t i = 0; i < random.size(); ++i) random[i] = rng.normal();
      control += nmi(kmeans(random, k, derive_seed(opt.seed, 200 + r)).assignments, labels);
    }
    rep.nmi_control = control / static_cast<double>(std::max<std::size_t>(opt.control_repeats, 1));
  }

  Model work = pretrained;
  auto add_row = [&](const std::string& method, const RecallReport& r) {
    rep.rows.push_back({method, r, bootstrap_mean_ci(r.per_slot_a, derive_seed(opt.seed, 30), opt.bootstrap_resamples),
                        std::nullopt});
  };
  if (opt.tasks.count("recall")) {
    add_row("frequency baseline", frequency_baseline(split.train, split.test));
    add_row("pretrained head", evaluate_next_day(work, split.test, opt.threads, opt.finetune.batch_size));
    FinetuneConfig fc = opt.finetune;
    fc.seed = derive_seed(opt.seed, 40);
    auto ft = finetune_next_day(pretrained, split.train, split.valid, split.test, fc, opt.threads);
    add_row("fine-tuned", ft.test);
    rep.metadata["finetune_best_epoch"] = ft.best_epoch;
    if (opt.random_init_control) {
      Model fresh(pretrained.config(), pretrained.vocab(), derive_seed(opt.seed, 41));
      auto fr = finetune_next_day(fresh, split.train, split.valid, split.test, fc, opt.threads);
      add_row("random init + fine-tune", fr.test);
    }
  }
  if (opt.tasks.count("los")) {
    FinetuneConfig fc = opt.finetune;
    fc.seed = derive_seed(opt.seed, 50);
    auto lr = finetune_los(pretrained, split.train, split.valid, split.test, fc, opt.threads);
    rep.los_rmse = lr.test.rmse;
    rep.metadata["los_best_epoch"] = lr.best_epoch;
    // Constant train-mean predictor.
    double sum = 0.0, n = 0.0;
    for (const auto& v : split.train.visits)
      for (std::size_t e = 1; e < v.los(); ++e) {
        sum += static_cast<double>(v.los() - e);
        n += 1.0;
      }
    std::vector<double> pred, actual;
    for (const auto& v : split.test.visits)
      for (std::size_t e = 1; e < v.los(); ++e) {
        pred.push_back(sum / n);
        actual.push_back(static_cast<double>(v.los() - e));
      }
    rep.los_mean_baseline_rmse = rmse(pred, actual);
    for (auto& r : rep.rows)
      if (r.method == "fine-tuned") r.los_rmse = rep.los_rmse;
  }
  return rep;
}

}  // namespace i2v
