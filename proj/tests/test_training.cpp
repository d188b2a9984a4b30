#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>

#include "i2v/checkpoint.hpp"
#include "i2v/synthetic.hpp"
#include "i2v/training.hpp"

using namespace i2v;
namespace fs = std::filesystem;

namespace {

ModelConfig tiny_config() {
  ModelConfig c;
  c.embed_dim = 16;
  c.n_heads = 2;
  c.n_layers = 1;
  c.ffn_dim = 32;
  c.lstm_hidden = 8;
  return c;
}

Cohort small_cohort(std::size_t visits = 60, std::uint64_t seed = 4) {
  SyntheticSpec s;
  s.n_visits = visits;
  s.n_activities = 40;
  s.n_clusters = 4;
  s.n_diagnoses = 4;
  s.n_families = 2;
  s.activities_per_day = 4;
  s.seed = seed;
  return generate_synthetic(make_synthetic_spec(s)).cohort;
}

std::vector<std::size_t> all_visits(const Cohort& c) {
  std::vector<std::size_t> idx(c.visits.size());
  std::iota(idx.begin(), idx.end(), 0);
  return idx;
}

FilterConfig los_only() {
  FilterConfig f;
  f.min_diag_visits = 1;
  f.max_diag_visits = 1000000;
  return f;
}

TrainConfig quick_train(std::size_t epochs = 2) {
  TrainConfig tc;
  tc.epochs = epochs;
  tc.batch_size = 16;
  tc.seed = 3;
  return tc;
}

}  // namespace

TEST(Masking, ExactCountAndNoFullyMaskedDay) {
  Cohort c = small_cohort();
  const MaskingPlan plan = select_masks(c, 0.15, 1);
  EXPECT_EQ(plan.total_tokens, c.total_tokens());
  EXPECT_EQ(plan.masked_count(), static_cast<std::size_t>(std::llround(0.15 * c.total_tokens())));
  for (std::size_t v = 0; v < c.visits.size(); ++v) {
    for (std::size_t d = 0; d < c.visits[v].los(); ++d) {
      const auto& pos = plan.positions[v][d];
      const auto& acts = c.visits[v].days[d].activities;
      EXPECT_LT(pos.size(), acts.size());
      EXPECT_TRUE(std::is_sorted(pos.begin(), pos.end()));
      for (std::size_t i = 0; i < pos.size(); ++i) EXPECT_EQ(plan.targets[v][d][i], acts[pos[i]]);
    }
  }
}

TEST(Masking, DeterministicPerSeed) {
  Cohort c = small_cohort();
  EXPECT_EQ(select_masks(c, 0.15, 5).positions, select_masks(c, 0.15, 5).positions);
  EXPECT_NE(select_masks(c, 0.15, 5).positions, select_masks(c, 0.15, 6).positions);
}

TEST(Masking, RejectsImpossibleRates) {
  // Only single-activity days: nothing can be masked without emptying a day.
  Cohort c = build_cohort({{"v", "X", {{"a"}, {"b"}, {"c"}, {"d"}}}}, "t");
  EXPECT_THROW(select_masks(c, 0.5, 1), InputError);
  EXPECT_THROW(select_masks(small_cohort(), 0.0, 1), InputError);
  EXPECT_THROW(select_masks(small_cohort(), 1.0, 1), InputError);
}

TEST(Losses, UniformLogitsGiveLogVocabulary) {
  const std::size_t A = 37;
  Graph g;
  Var logits = g.constant(Tensor::zeros(3, A));
  const std::vector<ActivityId> targets{0, 5, 36};
  EXPECT_NEAR(loss_masked(logits, targets).value().item(), std::log(37.0), 1e-13);
  DayRecord a{{1, 2, 3}}, b{{4}};
  const std::vector<const DayRecord*> days{&a, &b, &a};
  EXPECT_NEAR(loss_next_day(logits, days).value().item(), std::log(37.0), 1e-13);
  // Per-class BCE at zero logits is ln 2, summed over classes.
  EXPECT_NEAR(loss_next_day(logits, days, NextDayTarget::kSigmoid).value().item(), A * std::log(2.0), 1e-12);
}

TEST(Losses, NextDaySoftmaxTargetIsNormalizedMultiHot) {
  // Logits 0 on the day's two activities, -inf elsewhere: -2 * 0.5 * ln 0.5.
  Tensor l({1, 4}, -1e4);
  l(0, 1) = l(0, 2) = 0.0;
  DayRecord d{{1, 2}};
  const std::vector<const DayRecord*> days{&d};
  Graph g;
  EXPECT_NEAR(loss_next_day(g.constant(l), days).value().item(), std::log(2.0), 1e-12);
}

TEST(Losses, BatchLossIsMeanOfRowLosses) {
  Rng rng(1);
  Tensor l = truncated_normal_tensor({4, 6}, 1.0, rng);
  const std::vector<ActivityId> t{0, 3, 5, 2};
  Graph g;
  double sum = 0.0;
  for (std::size_t i = 0; i < 4; ++i) {
    Var row = ops::slice_rows(g.constant(l), i, i + 1);
    sum += loss_masked(row, std::span(&t[i], 1)).value().item();
  }
  EXPECT_NEAR(loss_masked(g.constant(l), t).value().item(), sum / 4.0, 1e-14);
}

TEST(Losses, TotalIsSumOfParts) {
  Cohort c = small_cohort();
  Model m(tiny_config(), c.vocab, 1);
  const auto plan = select_masks(c, 0.15, 2);
  const auto idx = all_visits(c);
  Graph g(false);
  BatchLoss bl = batch_loss(g, m, c, std::span(idx).first(8), plan, TrainConfig{});
  EXPECT_DOUBLE_EQ(bl.total.value().item(), bl.mask.value().item() + bl.next.value().item());
  std::size_t expect_next = 0, expect_masked = 0;
  for (std::size_t v = 0; v < 8; ++v) {
    expect_next += c.visits[v].los() - 1;
    for (const auto& d : plan.positions[v]) expect_masked += d.size();
  }
  EXPECT_EQ(bl.n_next, expect_next);
  EXPECT_EQ(bl.n_masked, expect_masked);
  // A fresh model predicts near-uniformly.
  EXPECT_NEAR(bl.mask.value().item(), std::log(static_cast<double>(c.vocab.n_activities())), 0.05);
}

TEST(PairwiseTask, ZeroedHeadGivesLogTwo) {
  Cohort c = small_cohort();
  ModelConfig mc = tiny_config();
  mc.pairwise_head = true;
  Model m(mc, c.vocab, 1);
  m.params().find("pair_head.w")->value.fill(0.0);
  Rng rng(2);
  Graph g(false);
  Var reps = g.constant(truncated_normal_tensor({10, 16}, 1.0, rng));
  auto pairs = sample_day_pairs({0, 4}, {4, 6}, 50, rng);
  EXPECT_NEAR(loss_pairwise_days(g, m, reps, pairs).value().item(), std::log(2.0), 1e-15);
}

TEST(PairwiseTask, HalfThePairsAreConsecutive) {
  Rng rng(3);
  const std::vector<std::size_t> base{0, 5, 8}, los{5, 3, 7};
  const std::size_t n = 20000;
  auto pairs = sample_day_pairs(base, los, n, rng);
  double pos = 0.0;
  for (const auto& p : pairs) {
    const bool same_next = [&] {
      for (std::size_t v = 0; v < los.size(); ++v)
        if (p.a >= base[v] && p.a + 1 < base[v] + los[v] && p.b == p.a + 1) return true;
      return false;
    }();
    EXPECT_EQ(same_next, p.consecutive);
    EXPECT_NE(p.a, p.b);
    pos += p.consecutive;
  }
  EXPECT_NEAR(pos / n, 0.5, 3.0 * std::sqrt(0.25 / n));
}

TEST(Optimizer, ZeroLearningRateLeavesParameters) {
  Cohort c = small_cohort();
  auto split = split_cohort(filter_cohort(c, los_only()), SplitRatios{}, 1);
  TrainConfig tc = quick_train(1);
  tc.adam.lr = 0.0;
  auto r = pretrain(split.train, split.valid, tiny_config(), tc);
  Model init(tiny_config(), split.train.vocab, derive_seed(tc.seed, 1));
  for (std::size_t i = 0; i < init.params().size(); ++i) {
    EXPECT_EQ(r.model.params()[i].value, init.params()[i].value) << init.params()[i].name;
  }
}

TEST(Optimizer, SmallStepDecreasesBatchLoss) {
  Cohort c = small_cohort();
  Model m(tiny_config(), c.vocab, 2);
  const auto plan = select_masks(c, 0.15, 2);
  const auto idx = all_visits(c);
  auto loss = [&] {
    Graph g(false);
    return batch_loss(g, m, c, idx, plan, TrainConfig{}).total.value().item();
  };
  const double before = loss();
  Graph g;
  g.backward(batch_loss(g, m, c, idx, plan, TrainConfig{}).total);
  AdamState st = AdamState::for_params(m.params());
  adam_step(m.params(), st, AdamConfig{.lr = 1e-3});
  EXPECT_LT(loss(), before);
}

TEST(Pretrain, DeterministicAndLogged) {
  Cohort c = filter_cohort(small_cohort(80), los_only());
  auto split = split_cohort(c, SplitRatios{}, 2);
  auto a = pretrain(split.train, split.valid, tiny_config(), quick_train());
  auto b = pretrain(split.train, split.valid, tiny_config(), quick_train());
  ASSERT_EQ(a.log.size(), 3u);
  for (std::size_t i = 0; i < a.log.size(); ++i) {
    EXPECT_EQ(a.log[i].epoch, i);
    EXPECT_EQ(a.log[i].valid_loss, b.log[i].valid_loss);
    EXPECT_EQ(a.log[i].train_loss, b.log[i].train_loss);
    EXPECT_NEAR(a.log[i].valid_loss, a.log[i].mask_loss + a.log[i].next_loss, 1e-12);
  }
  EXPECT_EQ(serialize_checkpoint(make_checkpoint(a)), serialize_checkpoint(make_checkpoint(b)));
  EXPECT_LT(a.log.back().valid_loss, a.log.front().valid_loss);
  EXPECT_EQ(a.best_epoch, 2u);
  TrainConfig other = quick_train();
  other.seed = 4;
  auto d = pretrain(split.train, split.valid, tiny_config(), other);
  EXPECT_NE(d.log[1].train_loss, a.log[1].train_loss);
  const std::string csv = train_log_csv(a.log);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "epoch,train_loss,valid_loss,mask_loss,next_loss");
}

TEST(Pretrain, RejectsSingleDayVisits) {
  Cohort c = small_cohort();
  auto split = split_cohort(c, SplitRatios{}, 1);
  Cohort bad = split.train;
  bad.visits[0].days.resize(1);
  EXPECT_THROW(pretrain(bad, split.valid, tiny_config(), quick_train()), InputError);
}

TEST(TrainConfig, JsonRoundTripAndValidation) {
  TrainConfig tc = quick_train();
  tc.next_target = NextDayTarget::kSigmoid;
  tc.adam.weight_decay = 0.5;
  TrainConfig back = TrainConfig::from_json(tc.to_json());
  EXPECT_EQ(back.to_json(), tc.to_json());
  tc.mask_rate = 1.5;
  EXPECT_THROW(tc.validate(), InputError);
  EXPECT_THROW(next_day_target_from_string("softplus"), InputError);
}

TEST(Unigram, MostFrequentTrainActivity) {
  Cohort c = build_cohort({{"v1", "X", {{"a", "b"}, {"a", "c"}}}, {"v2", "X", {{"a", "b", "c"}, {"b", "c"}}}}, "t");
  // a: 3, b: 3, c: 3 -> ties go to the lowest id, "a".
  MaskingPlan plan = select_masks(c, 0.3, 1);
  std::size_t hits = 0, n = 0;
  for (const auto& v : plan.targets)
    for (const auto& d : v)
      for (auto a : d) hits += a == 0, ++n;
  EXPECT_DOUBLE_EQ(unigram_mask_accuracy(c, c, plan), static_cast<double>(hits) / n);
}

namespace {

PretrainResult trained_with_optimizer() {
  Cohort c = filter_cohort(small_cohort(50), los_only());
  auto split = split_cohort(c, SplitRatios{}, 3);
  TrainConfig tc = quick_train(1);
  tc.keep_optimizer_state = true;
  return pretrain(split.train, split.valid, tiny_config(), tc);
}

fs::path temp_file(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "i2v_training_tests";
  fs::create_directories(dir);
  return dir / name;
}

}  // namespace

TEST(Checkpoint, ByteIdenticalRoundTrip) {
  auto r = trained_with_optimizer();
  Checkpoint ck = make_checkpoint(r, {{"filter_scale", 0.1}});
  ck.model.add_downstream_heads(5);
  ck.optimizer = AdamState::for_params(ck.model.params());
  ck.optimizer->step = 7;
  const std::string bytes = serialize_checkpoint(ck);
  Checkpoint back = deserialize_checkpoint(bytes);
  EXPECT_EQ(serialize_checkpoint(back), bytes);
  EXPECT_EQ(back.metadata["filter_scale"], 0.1);
  EXPECT_EQ(back.optimizer->step, 7u);
  EXPECT_EQ(back.model.config(), ck.model.config());
  for (std::size_t i = 0; i < ck.model.params().size(); ++i)
    EXPECT_EQ(back.model.params()[i].value, ck.model.params()[i].value);

  const auto path = temp_file("round_trip.i2v");
  save_checkpoint(ck, path);
  EXPECT_EQ(serialize_checkpoint(load_checkpoint(path)), bytes);
}

TEST(Checkpoint, RejectsForeignOrDamagedFiles) {
  auto r = trained_with_optimizer();
  const std::string bytes = serialize_checkpoint(make_checkpoint(r));
  const auto path = temp_file("errors.i2v");
  save_checkpoint(make_checkpoint(r), path);
  EXPECT_THROW(load_checkpoint(path, std::string("0000000000000000")), CompatibilityError);
  EXPECT_NO_THROW(load_checkpoint(path, r.model.vocab().digest()));

  std::string bad_magic = bytes;
  bad_magic[3] = '9';
  EXPECT_THROW(deserialize_checkpoint(bad_magic), CompatibilityError);

  std::string bumped = bytes;
  const auto at = bumped.find("\"format_version\":1");
  ASSERT_NE(at, std::string::npos);
  bumped[at + 17] = '2';
  EXPECT_THROW(deserialize_checkpoint(bumped), CompatibilityError);

  EXPECT_THROW(deserialize_checkpoint(bytes.substr(0, bytes.size() - 8)), InputError);
  EXPECT_THROW(deserialize_checkpoint(bytes + "x"), InputError);
  EXPECT_THROW(load_checkpoint(temp_file("missing.i2v")), InputError);
}
