#pragma once

#include <algorithm>
#include <cstdint>
#include <cstdlib>
#include <numeric>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "i2v/adam.hpp"
#include "i2v/corpus.hpp"
#include "i2v/error.hpp"
#include "i2v/metrics.hpp"
#include "i2v/model.hpp"
#include "i2v/rng.hpp"
#include "i2v/training.hpp"

namespace i2v {

// Evaluation parallelism: I2V_THREADS if set, else 1.
inline std::size_t eval_threads() {
  if (const char* env = std::getenv("I2V_THREADS")) {
    char* end = nullptr;
    const long n = std::strtol(env, &end, 10);
    if (end != env && *end == '\0' && n > 0) return static_cast<std::size_t>(n);
    throw InputError(std::string("I2V_THREADS must be a positive integer, got '") + env + "'");
  }
  return 1;
}

// Runs fn(i) for i in [0, n) on up to `threads` workers. Callers write
// results into per-index slots so the reduction order stays fixed.
template <class Fn>
void parallel_for(std::size_t n, std::size_t threads, Fn fn) {
  threads = std::max<std::size_t>(1, std::min(threads, n));
  if (threads == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(threads);
  for (std::size_t t = 0; t < threads; ++t) {
    pool.emplace_back([&, t] {
      try {
        for (std::size_t i = t; i < n; i += threads) fn(i);
      } catch (...) {
        errors[t] = std::current_exception();
      }
    });
  }
  for (auto& th : pool) th.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

struct FinetuneConfig {
  std::size_t epochs = 3;
  std::size_t batch_size = 128;
  AdamConfig adam{.lr = 1e-3};
  std::uint64_t seed = 1;

  nlohmann::json to_json() const {
    return {{"epochs", epochs}, {"batch_size", batch_size}, {"lr", adam.lr},
            {"weight_decay", adam.weight_decay}, {"seed", seed}};
  }
};

struct RecallReport {
  double recall_a = 0.0;
  double recall_5 = 0.0;
  double recall_10 = 0.0;
  double recall_20 = 0.0;
  double standard_recall_5 = 0.0;
  double standard_recall_10 = 0.0;
  double standard_recall_20 = 0.0;
  std::vector<double> per_slot_a;  // Recall@A per (visit, day >= 2)
  std::size_t count = 0;

  nlohmann::json to_json(bool with_slots = false) const {
    nlohmann::json j{{"recall_a", recall_a},
                     {"recall_5", recall_5},
                     {"recall_10", recall_10},
                     {"recall_20", recall_20},
                     {"standard_recall_5", standard_recall_5},
                     {"standard_recall_10", standard_recall_10},
                     {"standard_recall_20", standard_recall_20},
                     {"count", count}};
    if (with_slots) j["per_slot_recall_a"] = per_slot_a;
    return j;
  }
};

struct LosReport {
  double rmse = 0.0;
  std::vector<double> residuals;  // predicted - actual per (visit, day)
  std::size_t count = 0;

  nlohmann::json to_json() const { return {{"rmse", rmse}, {"count", count}}; }
};

// Accumulates recall over prediction slots in slot order.
class RecallAccumulator {
 public:
  void add(std::span<const std::size_t> ranking, std::span<const std::uint32_t> truth) {
    const double ra = recall_at_a(ranking, truth);
    r_.per_slot_a.push_back(ra);
    r_.recall_a += ra;
    r_.recall_5 += recall_at_k(ranking, truth, 5);
    r_.recall_10 += recall_at_k(ranking, truth, 10);
    r_.recall_20 += recall_at_k(ranking, truth, 20);
    r_.standard_recall_5 += standard_recall(ranking, truth, 5);
    r_.standard_recall_10 += standard_recall(ranking, truth, 10);
    r_.standard_recall_20 += standard_recall(ranking, truth, 20);
    ++r_.count;
  }

  RecallReport finish() const {
    if (r_.count == 0) throw InputError("recall: no prediction slots");
    RecallReport r = r_;
    const double n = static_cast<double>(r.count);
    for (double* x : {&r.recall_a, &r.recall_5, &r.recall_10, &r.recall_20, &r.standard_recall_5,
                      &r.standard_recall_10, &r.standard_recall_20})
      *x /= n;
    return r;
  }

 private:
  RecallReport r_;
};

inline std::size_t ranking_depth(const DayRecord& truth) {
  return std::max<std::size_t>(20, truth.activities.size());
}

// Unmasked day encoding followed by the prefix BiLSTM for a batch of visits.
inline Model::PrefixStates encode_visits(Graph& g, Model& model, const Cohort& cohort,
                                         std::span<const std::size_t> visit_idx, bool keep_all_states) {
  SequenceBatch b;
  std::vector<std::size_t> day_base, los;
  for (std::size_t v : visit_idx) {
    const VisitRecord& visit = cohort.visits[v];
    day_base.push_back(b.n_days());
    los.push_back(visit.los());
    for (std::size_t d = 0; d < visit.los(); ++d) model.append_day(b, visit.days[d], visit.diagnosis, d + 1);
  }
  Var out = model.encode(g, model.embed(g, b), b.offsets);
  return model.encode_prefixes(g, ops::gather_rows(out, b.cls_rows), day_base, los, keep_all_states);
}

struct SlotOutputs {
  std::vector<std::vector<std::size_t>> rankings;
  std::vector<const DayRecord*> truth;
  std::vector<double> los_pred;
  std::vector<double> los_true;
};

// Next-day rankings (and LOS predictions when the model has a LOS head) for
// every (visit, day >= 2) slot, in visit then day order.
inline SlotOutputs predict_slots(Model& model, const Cohort& cohort, bool downstream, std::size_t batch_size,
                                 std::size_t threads) {
  require_trainable(cohort, "evaluation");
  std::vector<std::size_t> order(cohort.visits.size());
  std::iota(order.begin(), order.end(), 0);
  const auto batches = make_batches(order, batch_size);
  std::vector<SlotOutputs> parts(batches.size());
  parallel_for(batches.size(), threads, [&](std::size_t bi) {
    Graph g(false);
    const auto& batch = batches[bi];
    auto ps = encode_visits(g, model, cohort, batch, downstream);
    Var logits = downstream ? model.downstream_next_logits(g, ps) : model.next_logits(g, ps.final_states);
    const Tensor& lv = logits.value();
    SlotOutputs& out = parts[bi];
    std::optional<Tensor> los;
    if (downstream) los = model.downstream_los(g, ps.final_states).value();
    for (std::size_t p = 0; p < ps.visit_of.size(); ++p) {
      const VisitRecord& visit = cohort.visits[batch[ps.visit_of[p]]];
      const DayRecord& truth = visit.days[ps.length[p]];
      out.rankings.push_back(rank_scores(lv.row_span(p), ranking_depth(truth)));
      out.truth.push_back(&truth);
      out.los_true.push_back(static_cast<double>(visit.los() - ps.length[p]));
      if (los) out.los_pred.push_back((*los)(p, 0));
    }
  });
  SlotOutputs all;
  for (auto& p : parts) {
    std::move(p.rankings.begin(), p.rankings.end(), std::back_inserter(all.rankings));
    all.truth.insert(all.truth.end(), p.truth.begin(), p.truth.end());
    all.los_pred.insert(all.los_pred.end(), p.los_pred.begin(), p.los_pred.end());
    all.los_true.insert(all.los_true.end(), p.los_true.begin(), p.los_true.end());
  }
  return all;
}

inline RecallReport recall_report(const SlotOutputs& s) {
  RecallAccumulator acc;
  for (std::size_t i = 0; i < s.rankings.size(); ++i) acc.add(s.rankings[i], s.truth[i]->activities);
  return acc.finish();
}

// Recall of the pretrained next-day head without fine-tuning.
inline RecallReport evaluate_next_day(Model& model, const Cohort& cohort, std::size_t threads = 1,
                                      std::size_t batch_size = 128) {
  return recall_report(predict_slots(model, cohort, false, batch_size, threads));
}

inline LosReport los_report(const SlotOutputs& s) {
  LosReport r;
  for (std::size_t i = 0; i < s.los_pred.size(); ++i) r.residuals.push_back(s.los_pred[i] - s.los_true[i]);
  r.count = r.residuals.size();
  r.rmse = rmse(s.los_pred, s.los_true);
  return r;
}

// Ranks activities by the number of train days that contain them.
inline std::vector<std::size_t> frequency_ranking(const Cohort& train) {
  std::vector<double> freq(train.vocab.n_activities(), 0.0);
  for (const auto& v : train.visits)
    for (const auto& d : v.days)
      for (ActivityId a : d.activities) freq[a] += 1.0;
  return rank_scores(freq, freq.size());
}

inline RecallReport frequency_baseline(const Cohort& train, const Cohort& test) {
  if (train.visits.empty()) throw InputError("frequency_baseline: empty train split");
  const auto ranking = frequency_ranking(train);
  RecallAccumulator acc;
  for (const auto& v : test.visits)
    for (std::size_t t = 1; t < v.los(); ++t) acc.add(ranking, v.days[t].activities);
  return acc.finish();
}

struct FinetuneResult {
  Model model;
  RecallReport test;
  std::vector<double> valid_history;  // Recall@A per epoch, epoch 0 first
  std::size_t best_epoch = 0;
};

inline void require_compatible(const Model& model, const Cohort& c) {
  if (!(model.vocab() == c.vocab)) {
    throw CompatibilityError("model vocabulary digest " + model.vocab().digest() +
                             " does not match cohort digest " + c.vocab.digest());
  }
}

// Trains the downstream next-day predictor end to end. Epoch 0 (no updates)
// reproduces the pretrained next-day head; the epoch with the best
// validation Recall@A is kept.
inline FinetuneResult finetune_next_day(const Model& init, const Cohort& train, const Cohort& valid,
                                        const Cohort& test, const FinetuneConfig& fc,
                                        std::size_t threads = 1) {
  for (const Cohort* c : {&train, &valid, &test}) require_compatible(init, *c);
  require_trainable(train, "train");
  Model model = init;
  model.add_downstream_heads(fc.seed);
  AdamState opt = AdamState::for_params(model.params());

  FinetuneResult r{model, {}, {}, 0};
  double best = recall_report(predict_slots(model, valid, true, fc.batch_size, threads)).recall_a;
  r.valid_history.push_back(best);
  std::vector<std::size_t> order(train.visits.size());
  for (std::size_t epoch = 1; epoch <= fc.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    Rng rng(derive_seed(fc.seed + epoch, 0xf1));
    rng.shuffle(order);
    for (const auto& batch : make_batches(order, fc.batch_size)) {
      Graph g;
      auto ps = encode_visits(g, model, train, batch, true);
      std::vector<const DayRecord*> targets;
      for (std::size_t p = 0; p < ps.visit_of.size(); ++p) {
        targets.push_back(&train.visits[batch[ps.visit_of[p]]].days[ps.length[p]]);
      }
      Var loss = loss_next_day(model.downstream_next_logits(g, ps), targets);
      if (!std::isfinite(loss.value().item())) throw NumericalError("fine-tuning diverged");
      g.backward(loss);
      adam_step(model.params(), opt, fc.adam);
      model.params().zero_grad();
    }
    const double ra = recall_report(predict_slots(model, valid, true, fc.batch_size, threads)).recall_a;
    r.valid_history.push_back(ra);
    if (ra > best) {
      best = ra;
      r.best_epoch = epoch;
      r.model = model;
    }
  }
  r.test = recall_report(predict_slots(r.model, test, true, fc.batch_size, threads));
  return r;
}

struct LosFinetuneResult {
  Model model;
  LosReport test;
  std::vector<double> valid_history;  // RMSE per epoch
  std::size_t best_epoch = 0;
};

// Remaining-LOS regression on the prefix state, trained end to end with
// squared error. The head starts as the train-set mean predictor.
inline LosFinetuneResult finetune_los(const Model& init, const Cohort& train, const Cohort& valid,
                                      const Cohort& test, const FinetuneConfig& fc, std::size_t threads = 1) {
  for (const Cohort* c : {&train, &valid, &test}) require_compatible(init, *c);
  require_trainable(train, "train");
  Model model = init;
  model.add_downstream_heads(fc.seed);
  double sum = 0.0, n = 0.0;
  for (const auto& v : train.visits)
    for (std::size_t e = 1; e < v.los(); ++e) {
      sum += static_cast<double>(v.los() - e);
      n += 1.0;
    }
  model.los_bias().value.fill(sum / n);
  AdamState opt = AdamState::for_params(model.params());

  auto valid_rmse = [&](Model& m) {
    return los_report(predict_slots(m, valid, true, fc.batch_size, threads)).rmse;
  };
  LosFinetuneResult r{model, {}, {}, 0};
  double best = valid_rmse(model);
  r.valid_history.push_back(best);
  std::vector<std::size_t> order(train.visits.size());
  for (std::size_t epoch = 1; epoch <= fc.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    Rng rng(derive_seed(fc.seed + epoch, 0x105));
    rng.shuffle(order);
    for (const auto& batch : make_batches(order, fc.batch_size)) {
      Graph g;
      auto ps = encode_visits(g, model, train, batch, false);
      Tensor y = Tensor::zeros(ps.visit_of.size(), 1);
      for (std::size_t p = 0; p < ps.visit_of.size(); ++p) {
        y(p, 0) = static_cast<double>(train.visits[batch[ps.visit_of[p]]].los() - ps.length[p]);
      }
      Var loss = ops::mse(model.downstream_los(g, ps.final_states), y);
      if (!std::isfinite(loss.value().item())) throw NumericalError("fine-tuning diverged");
      g.backward(loss);
      adam_step(model.params(), opt, fc.adam);
      model.params().zero_grad();
    }
    const double e = valid_rmse(model);
    r.valid_history.push_back(e);
    if (e < best) {
      best = e;
      r.best_epoch = epoch;
      r.model = model;
    }
  }
  r.test = los_report(predict_slots(r.model, test, true, fc.batch_size, threads));
  return r;
}

enum class DiagnosisVectorMode { kDayMean, kFirstDay, kFlattenPad };

inline DiagnosisVectorMode diagnosis_vector_mode_from_string(const std::string& s) {
  if (s == "day_mean") return DiagnosisVectorMode::kDayMean;
  if (s == "first_day") return DiagnosisVectorMode::kFirstDay;
  if (s == "flatten_pad") return DiagnosisVectorMode::kFlattenPad;
  throw InputError("unknown diagnosis vector mode '" + s + "' (day_mean, first_day, flatten_pad)");
}

// One row per diagnosis. flatten_pad concatenates the day rows, zero-padded
// to the longest N_g.
inline Tensor diagnosis_vectors(const Model& model, DiagnosisVectorMode mode = DiagnosisVectorMode::kDayMean) {
  const std::size_t G = model.vocab().n_diagnoses();
  const std::size_t q = model.embed_dim();
  std::vector<Tensor> mats;
  std::size_t max_rows = 0;
  for (std::size_t g = 0; g < G; ++g) {
    mats.push_back(model.diagnosis_matrix(static_cast<DiagnosisId>(g)));
    max_rows = std::max(max_rows, mats.back().rows());
  }
  const std::size_t width = mode == DiagnosisVectorMode::kFlattenPad ? max_rows * q : q;
  Tensor out = Tensor::zeros(G, width);
  for (std::size_t g = 0; g < G; ++g) {
    const Tensor& m = mats[g];
    switch (mode) {
      case DiagnosisVectorMode::kDayMean:
        for (std::size_t r = 0; r < m.rows(); ++r)
          for (std::size_t k = 0; k < q; ++k) out(g, k) += m(r, k);
        for (std::size_t k = 0; k < q; ++k) out(g, k) /= static_cast<double>(m.rows());
        break;
      case DiagnosisVectorMode::kFirstDay:
        for (std::size_t k = 0; k < q; ++k) out(g, k) = m(0, k);
        break;
      case DiagnosisVectorMode::kFlattenPad:
        for (std::size_t r = 0; r < m.rows(); ++r)
          for (std::size_t k = 0; k < q; ++k) out(g, r * q + k) = m(r, k);
        break;
    }
  }
  return out;
}

// Raw activity embeddings, one row per real activity.
inline Tensor activity_embeddings(const Model& model) {
  const std::size_t A = model.n_activities();
  const std::size_t q = model.embed_dim();
  const Tensor& t = model.activity_table();
  return Tensor({A, q}, std::vector<double>(t.data(), t.data() + A * q));
}

}  // namespace i2v
