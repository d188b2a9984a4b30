#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <iomanip>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "i2v/adam.hpp"
#include "i2v/corpus.hpp"
#include "i2v/error.hpp"
#include "i2v/graph.hpp"
#include "i2v/model.hpp"
#include "i2v/ops.hpp"
#include "i2v/rng.hpp"

namespace i2v {

enum class NextDayTarget { kSoftmax, kSigmoid };

inline const char* to_string(NextDayTarget t) {
  return t == NextDayTarget::kSoftmax ? "softmax" : "sigmoid";
}

inline NextDayTarget next_day_target_from_string(const std::string& s) {
  if (s == "softmax") return NextDayTarget::kSoftmax;
  if (s == "sigmoid") return NextDayTarget::kSigmoid;
  throw InputError("next_target must be softmax or sigmoid, got '" + s + "'");
}

struct TrainConfig {
  std::size_t epochs = 10;
  std::size_t batch_size = 32;  // visits
  AdamConfig adam{.lr = 1e-3};
  double mask_rate = 0.15;
  bool diagnosis_as_activity = false;
  bool pairwise_day_task = false;
  NextDayTarget next_target = NextDayTarget::kSoftmax;
  // Take next-day inputs from a separate unmasked encoder pass instead of
  // the masked pass.
  bool unmasked_day_reps = false;
  bool keep_optimizer_state = false;
  std::uint64_t seed = 1;

  void validate() const {
    if (epochs == 0) throw InputError("train config: epochs must be positive");
    if (batch_size == 0) throw InputError("train config: batch_size must be positive");
    if (!(mask_rate > 0.0 && mask_rate < 1.0)) throw InputError("train config: mask_rate must be in (0,1)");
    if (!(adam.lr >= 0.0)) throw InputError("train config: lr must be >= 0");
  }

  nlohmann::json to_json() const {
    return {{"epochs", epochs},
            {"batch_size", batch_size},
            {"lr", adam.lr},
            {"beta1", adam.beta1},
            {"beta2", adam.beta2},
            {"adam_eps", adam.eps},
            {"weight_decay", adam.weight_decay},
            {"mask_rate", mask_rate},
            {"mask_weight", 1.0},
            {"next_weight", 1.0},
            {"diagnosis_as_activity", diagnosis_as_activity},
            {"pairwise_day_task", pairwise_day_task},
            {"next_target", to_string(next_target)},
            {"unmasked_day_reps", unmasked_day_reps},
            {"seed", seed}};
  }

  static TrainConfig from_json(const nlohmann::json& j) {
    TrainConfig c;
    c.epochs = j.at("epochs");
    c.batch_size = j.at("batch_size");
    c.adam.lr = j.at("lr");
    c.adam.beta1 = j.at("beta1");
    c.adam.beta2 = j.at("beta2");
    c.adam.eps = j.at("adam_eps");
    c.adam.weight_decay = j.at("weight_decay");
    c.mask_rate = j.at("mask_rate");
    c.diagnosis_as_activity = j.at("diagnosis_as_activity");
    c.pairwise_day_task = j.at("pairwise_day_task");
    c.next_target = next_day_target_from_string(j.at("next_target"));
    c.unmasked_day_reps = j.at("unmasked_day_reps");
    c.seed = j.at("seed");
    return c;
  }
};

// Masked positions of every (visit, day), as indices into the day's sorted
// activity list, with the true ids alongside.
struct MaskingPlan {
  double rate = 0.15;
  std::uint64_t seed = 0;
  std::size_t total_tokens = 0;
  std::vector<std::vector<std::vector<std::size_t>>> positions;
  std::vector<std::vector<std::vector<ActivityId>>> targets;

  std::size_t masked_count() const {
    std::size_t n = 0;
    for (const auto& v : positions)
      for (const auto& d : v) n += d.size();
    return n;
  }
};

// Exactly round(rate * T) tokens, drawn uniformly in a random token order and
// skipping any token whose day would be left without context.
inline MaskingPlan select_masks(const Cohort& cohort, double rate, std::uint64_t seed) {
  if (!(rate > 0.0 && rate < 1.0)) throw InputError("select_masks: rate must be in (0,1)");
  struct Token {
    std::uint32_t visit, day, pos;
  };
  std::vector<Token> tokens;
  MaskingPlan plan;
  plan.rate = rate;
  plan.seed = seed;
  plan.positions.resize(cohort.visits.size());
  plan.targets.resize(cohort.visits.size());
  std::size_t capacity = 0;
  for (std::size_t v = 0; v < cohort.visits.size(); ++v) {
    const auto& days = cohort.visits[v].days;
    plan.positions[v].resize(days.size());
    plan.targets[v].resize(days.size());
    for (std::size_t d = 0; d < days.size(); ++d) {
      const std::size_t n = days[d].activities.size();
      capacity += n > 0 ? n - 1 : 0;
      for (std::size_t p = 0; p < n; ++p) {
        tokens.push_back({static_cast<std::uint32_t>(v), static_cast<std::uint32_t>(d),
                          static_cast<std::uint32_t>(p)});
      }
    }
  }
  if (tokens.empty()) throw InputError("select_masks: cohort has no activity tokens");
  plan.total_tokens = tokens.size();
  const auto want = static_cast<std::size_t>(std::llround(rate * static_cast<double>(tokens.size())));
  if (want > capacity) {
    throw InputError("select_masks: cannot mask " + std::to_string(want) +
                     " tokens while leaving context in every day");
  }
  Rng rng(derive_seed(seed, 0x3a5c));
  rng.shuffle(tokens);
  std::size_t taken = 0;
  for (const Token& t : tokens) {
    if (taken == want) break;
    auto& day = plan.positions[t.visit][t.day];
    if (day.size() + 1 >= cohort.visits[t.visit].days[t.day].activities.size()) continue;
    day.push_back(t.pos);
    ++taken;
  }
  for (std::size_t v = 0; v < cohort.visits.size(); ++v) {
    for (std::size_t d = 0; d < plan.positions[v].size(); ++d) {
      auto& pos = plan.positions[v][d];
      std::sort(pos.begin(), pos.end());
      for (std::size_t p : pos) plan.targets[v][d].push_back(cohort.visits[v].days[d].activities[p]);
    }
  }
  return plan;
}

// Mean categorical cross-entropy of the masked head against one-hot truth.
inline Var loss_masked(Var mask_logits, std::span<const ActivityId> targets) {
  if (targets.empty()) throw InputError("loss_masked: no masked tokens");
  Tensor y = Tensor::zeros(targets.size(), mask_logits.cols());
  for (std::size_t i = 0; i < targets.size(); ++i) y(i, targets[i]) = 1.0;
  return ops::cross_entropy(mask_logits, y);
}

// Mean over predicted days of the next-day loss. Softmax targets are the
// day's multi-hot normalized to sum 1.
inline Var loss_next_day(Var next_logits, std::span<const DayRecord* const> target_days,
                         NextDayTarget kind = NextDayTarget::kSoftmax) {
  if (target_days.empty()) throw InputError("loss_next_day: visit needs LOS >= 2");
  Tensor y = Tensor::zeros(target_days.size(), next_logits.cols());
  for (std::size_t i = 0; i < target_days.size(); ++i) {
    const auto& acts = target_days[i]->activities;
    if (acts.empty()) throw InputError("loss_next_day: empty target day");
    const double w = kind == NextDayTarget::kSoftmax ? 1.0 / static_cast<double>(acts.size()) : 1.0;
    for (ActivityId a : acts) y(i, a) = w;
  }
  return kind == NextDayTarget::kSoftmax ? ops::cross_entropy(next_logits, y)
                                         : ops::bce_with_logits(next_logits, y);
}

inline Var total_loss(Var l_mask, Var l_next) { return ops::add(l_mask, l_next); }

// A pair of day rows (into a batch's day list) and whether b follows a
// directly within the same visit.
struct DayPair {
  std::size_t a = 0;
  std::size_t b = 0;
  bool consecutive = false;
};

// Half the pairs (in expectation) are consecutive days of one visit; the rest
// are uniform pairs of distinct days that are not consecutive.
inline std::vector<DayPair> sample_day_pairs(const std::vector<std::size_t>& day_base,
                                             const std::vector<std::size_t>& los, std::size_t n_pairs,
                                             Rng& rng) {
  std::vector<std::pair<std::size_t, std::size_t>> consecutive;
  std::vector<std::size_t> visit_of;
  for (std::size_t v = 0; v < los.size(); ++v) {
    for (std::size_t t = 0; t < los[v]; ++t) {
      visit_of.push_back(v);
      if (t + 1 < los[v]) consecutive.emplace_back(day_base[v] + t, day_base[v] + t + 1);
    }
  }
  const std::size_t n_days = visit_of.size();
  if (n_days < 3 || consecutive.empty()) throw InputError("sample_day_pairs: pool too small");
  std::vector<DayPair> pairs;
  pairs.reserve(n_pairs);
  for (std::size_t i = 0; i < n_pairs; ++i) {
    if (rng.uniform() < 0.5) {
      const auto& c = consecutive[rng.index(consecutive.size())];
      pairs.push_back({c.first, c.second, true});
      continue;
    }
    for (;;) {
      const std::size_t a = rng.index(n_days);
      const std::size_t b = rng.index(n_days);
      if (a == b || (visit_of[a] == visit_of[b] && b == a + 1)) continue;
      pairs.push_back({a, b, false});
      break;
    }
  }
  return pairs;
}

inline Var loss_pairwise_days(Graph& g, Model& model, Var t_cls, std::span<const DayPair> pairs) {
  if (pairs.empty()) throw InputError("loss_pairwise_days: no pairs");
  std::vector<std::size_t> ia, ib;
  Tensor y = Tensor::zeros(pairs.size(), 1);
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    ia.push_back(pairs[i].a);
    ib.push_back(pairs[i].b);
    y(i, 0) = pairs[i].consecutive ? 1.0 : 0.0;
  }
  Var features = ops::concat_cols(ops::gather_rows(t_cls, std::move(ia)),
                                  ops::gather_rows(t_cls, std::move(ib)));
  return ops::bce_with_logits(model.pair_logits(g, features), y);
}

struct BatchLoss {
  Var total;
  Var mask;
  Var next;  // pairwise loss in that ablation
  std::size_t n_masked = 0;
  std::size_t n_next = 0;
  std::size_t n_mask_correct = 0;
};

// Forward pass of both pretraining tasks over a batch of visits. `pair_seed`
// drives the pairwise sampler in that ablation.
inline BatchLoss batch_loss(Graph& g, Model& model, const Cohort& cohort,
                            std::span<const std::size_t> visit_idx, const MaskingPlan& plan,
                            const TrainConfig& tc, std::uint64_t pair_seed = 0) {
  SequenceBatch masked;
  std::vector<std::size_t> day_base, los;
  for (std::size_t v : visit_idx) {
    const VisitRecord& visit = cohort.visits[v];
    day_base.push_back(masked.n_days());
    los.push_back(visit.los());
    for (std::size_t d = 0; d < visit.los(); ++d) {
      model.append_day(masked, visit.days[d], visit.diagnosis, d + 1, plan.positions[v][d]);
    }
  }
  Var out = model.encode(g, model.embed(g, masked), masked.offsets);
  Var t_cls = ops::gather_rows(out, masked.cls_rows);

  BatchLoss r;
  std::vector<Var> terms;
  if (!masked.mask_rows.empty()) {
    Var logits = model.masked_logits(g, ops::gather_rows(out, masked.mask_rows));
    r.mask = loss_masked(logits, masked.mask_targets);
    r.n_masked = masked.mask_rows.size();
    const Tensor& lv = logits.value();
    for (std::size_t i = 0; i < r.n_masked; ++i) {
      auto row = lv.row_span(i);
      const auto best = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
      if (best == masked.mask_targets[i]) ++r.n_mask_correct;
    }
    terms.push_back(r.mask);
  }

  Var day_reps = t_cls;
  if (tc.unmasked_day_reps && !tc.pairwise_day_task) {
    SequenceBatch clean;
    for (std::size_t v : visit_idx) {
      const VisitRecord& visit = cohort.visits[v];
      for (std::size_t d = 0; d < visit.los(); ++d) {
        model.append_day(clean, visit.days[d], visit.diagnosis, d + 1);
      }
    }
    day_reps = ops::gather_rows(model.encode(g, model.embed(g, clean), clean.offsets), clean.cls_rows);
  }

  if (tc.pairwise_day_task) {
    std::size_t n_pairs = 0;
    for (std::size_t l : los) n_pairs += l - 1;
    Rng rng(pair_seed);
    const auto pairs = sample_day_pairs(day_base, los, std::max<std::size_t>(n_pairs, 1), rng);
    r.next = loss_pairwise_days(g, model, day_reps, pairs);
    r.n_next = pairs.size();
    terms.push_back(r.next);
  } else {
    auto ps = model.encode_prefixes(g, day_reps, day_base, los);
    std::vector<const DayRecord*> targets;
    for (std::size_t p = 0; p < ps.visit_of.size(); ++p) {
      targets.push_back(&cohort.visits[visit_idx[ps.visit_of[p]]].days[ps.length[p]]);
    }
    r.next = loss_next_day(model.next_logits(g, ps.final_states), targets, tc.next_target);
    r.n_next = targets.size();
    terms.push_back(r.next);
  }
  r.total = terms.size() == 2 ? total_loss(terms[0], terms[1]) : terms[0];
  return r;
}

struct TrainLogRow {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double valid_loss = 0.0;
  double mask_loss = 0.0;  // validation component
  double next_loss = 0.0;  // validation component
};

inline std::string train_log_csv(const std::vector<TrainLogRow>& log) {
  std::ostringstream os;
  os << std::setprecision(17);
  os << "epoch,train_loss,valid_loss,mask_loss,next_loss\n";
  for (const auto& r : log) {
    os << r.epoch << ',' << r.train_loss << ',' << r.valid_loss << ',' << r.mask_loss << ','
       << r.next_loss << '\n';
  }
  return os.str();
}

struct SplitLoss {
  double total = 0.0;
  double mask = 0.0;
  double next = 0.0;
  double mask_accuracy = 0.0;
  std::size_t n_masked = 0;
  std::size_t n_next = 0;
};

inline std::vector<std::vector<std::size_t>> make_batches(std::vector<std::size_t> order,
                                                          std::size_t batch_size) {
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < order.size(); i += batch_size) {
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                     order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), i + batch_size)));
  }
  return out;
}

// Token- and prefix-weighted losses over a whole cohort with a fixed plan.
inline SplitLoss evaluate_loss(Model& model, const Cohort& cohort, const MaskingPlan& plan,
                               const TrainConfig& tc, std::uint64_t pair_seed = 0) {
  std::vector<std::size_t> order(cohort.visits.size());
  std::iota(order.begin(), order.end(), 0);
  SplitLoss s;
  std::size_t correct = 0;
  std::size_t b = 0;
  for (const auto& batch : make_batches(order, tc.batch_size)) {
    Graph g(false);
    BatchLoss bl = batch_loss(g, model, cohort, batch, plan, tc, derive_seed(pair_seed, b++));
    if (bl.n_masked > 0) s.mask += bl.mask.value().item() * static_cast<double>(bl.n_masked);
    s.next += bl.next.value().item() * static_cast<double>(bl.n_next);
    s.n_masked += bl.n_masked;
    s.n_next += bl.n_next;
    correct += bl.n_mask_correct;
  }
  if (s.n_masked > 0) {
    s.mask /= static_cast<double>(s.n_masked);
    s.mask_accuracy = static_cast<double>(correct) / static_cast<double>(s.n_masked);
  }
  if (s.n_next > 0) s.next /= static_cast<double>(s.n_next);
  s.total = s.mask + s.next;
  return s;
}

// Top-1 accuracy of always predicting the most frequent train activity.
inline double unigram_mask_accuracy(const Cohort& train, const Cohort& target, const MaskingPlan& plan) {
  std::vector<std::size_t> freq(train.vocab.n_activities(), 0);
  for (const auto& v : train.visits)
    for (const auto& d : v.days)
      for (ActivityId a : d.activities) ++freq[a];
  const auto top = static_cast<ActivityId>(std::max_element(freq.begin(), freq.end()) - freq.begin());
  std::size_t hit = 0, n = 0;
  for (std::size_t v = 0; v < target.visits.size(); ++v)
    for (const auto& d : plan.targets[v])
      for (ActivityId a : d) {
        hit += a == top;
        ++n;
      }
  if (n == 0) throw InputError("unigram_mask_accuracy: plan has no masked tokens");
  return static_cast<double>(hit) / static_cast<double>(n);
}

struct PretrainResult {
  Model model;  // best-validation epoch
  TrainConfig train;
  std::vector<TrainLogRow> log;
  std::size_t best_epoch = 0;
  std::optional<AdamState> optimizer;
};

inline void require_trainable(const Cohort& c, const char* what) {
  if (c.visits.empty()) throw InputError(std::string(what) + " split is empty");
  for (const auto& v : c.visits) {
    if (v.los() < 2) throw InputError("visit " + v.visit_id + " has LOS < 2; apply the cohort filter");
  }
}

using EpochCallback = std::function<void(const TrainLogRow&)>;

inline PretrainResult pretrain(const Cohort& train, const Cohort& valid, ModelConfig mc,
                               const TrainConfig& tc, const EpochCallback& on_epoch = {}) {
  tc.validate();
  require_trainable(train, "train");
  require_trainable(valid, "validation");
  if (!(train.vocab == valid.vocab)) throw CompatibilityError("train and validation vocabularies differ");
  mc.diagnosis_as_activity = tc.diagnosis_as_activity;
  mc.pairwise_head = tc.pairwise_day_task;

  Model model(mc, train.vocab, derive_seed(tc.seed, 1));
  AdamState opt = AdamState::for_params(model.params());
  const MaskingPlan valid_plan = select_masks(valid, tc.mask_rate, derive_seed(tc.seed, 2));
  const std::uint64_t valid_pairs = derive_seed(tc.seed, 3);

  PretrainResult result{model, tc, {}, 0, std::nullopt};
  auto check = [](double x, std::size_t epoch) {
    if (!std::isfinite(x)) {
      throw NumericalError("training diverged: non-finite loss in epoch " + std::to_string(epoch));
    }
  };

  {
    const MaskingPlan plan0 = select_masks(train, tc.mask_rate, tc.seed);
    const SplitLoss tl = evaluate_loss(model, train, plan0, tc, derive_seed(tc.seed, 4));
    const SplitLoss vl = evaluate_loss(model, valid, valid_plan, tc, valid_pairs);
    check(tl.total, 0);
    check(vl.total, 0);
    result.log.push_back({0, tl.total, vl.total, vl.mask, vl.next});
    if (on_epoch) on_epoch(result.log.back());
  }
  double best = result.log[0].valid_loss;

  std::vector<std::size_t> order(train.visits.size());
  for (std::size_t epoch = 1; epoch <= tc.epochs; ++epoch) {
    const MaskingPlan plan = select_masks(train, tc.mask_rate, tc.seed + epoch);
    std::iota(order.begin(), order.end(), 0);
    Rng rng(derive_seed(tc.seed + epoch, 5));
    rng.shuffle(order);
    double loss_sum = 0.0;
    std::size_t n_batches = 0;
    for (const auto& batch : make_batches(order, tc.batch_size)) {
      Graph g;
      BatchLoss bl = batch_loss(g, model, train, batch, plan, tc,
                                derive_seed(derive_seed(tc.seed + epoch, 6), n_batches));
      const double lv = bl.total.value().item();
      check(lv, epoch);
      g.backward(bl.total);
      adam_step(model.params(), opt, tc.adam);
      model.params().zero_grad();
      loss_sum += lv;
      ++n_batches;
    }
    const SplitLoss vl = evaluate_loss(model, valid, valid_plan, tc, valid_pairs);
    check(vl.total, epoch);
    result.log.push_back({epoch, loss_sum / static_cast<double>(n_batches), vl.total, vl.mask, vl.next});
    if (on_epoch) on_epoch(result.log.back());
    if (vl.total < best) {
      best = vl.total;
      result.best_epoch = epoch;
      result.model = model;
    }
  }
  if (tc.keep_optimizer_state) result.optimizer = opt;
  return result;
}

}  // namespace i2v
