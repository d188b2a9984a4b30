#pragma once

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "i2v/corpus.hpp"
#include "i2v/graph.hpp"
#include "i2v/ops.hpp"
#include "i2v/rng.hpp"
#include "i2v/tensor.hpp"

namespace i2v {

struct ModelConfig {
  std::size_t embed_dim = 64;
  std::size_t n_heads = 4;
  std::size_t n_layers = 2;
  std::size_t ffn_dim = 256;
  std::size_t lstm_hidden = 64;
  double init_std = 0.02;
  double ln_eps = 1e-12;
  // Ablation: no day-indexed diagnosis tables; the diagnosis enters every
  // day as an extra input-only token.
  bool diagnosis_as_activity = false;
  // Ablation: logistic head over two day representations.
  bool pairwise_head = false;

  static ModelConfig desk() { return {}; }

  static ModelConfig full() {
    ModelConfig c;
    c.embed_dim = 384;
    c.n_heads = 6;
    c.n_layers = 6;
    c.ffn_dim = 4 * 384;
    c.lstm_hidden = 200;
    return c;
  }

  void validate() const {
    if (embed_dim == 0 || n_heads == 0 || ffn_dim == 0 || lstm_hidden == 0) {
      throw InputError("model config: dimensions must be positive");
    }
    if (embed_dim % n_heads != 0) {
      throw InputError("model config: embed_dim " + std::to_string(embed_dim) +
                       " not divisible by n_heads " + std::to_string(n_heads));
    }
    if (!(init_std > 0.0)) throw InputError("model config: init_std must be positive");
  }

  nlohmann::json to_json() const {
    return {{"embed_dim", embed_dim},
            {"n_heads", n_heads},
            {"n_layers", n_layers},
            {"ffn_dim", ffn_dim},
            {"lstm_hidden", lstm_hidden},
            {"init_std", init_std},
            {"init", "truncated_normal_2sd"},
            {"ln_eps", ln_eps},
            {"ffn_activation", "gelu_erf"},
            {"diagnosis_as_activity", diagnosis_as_activity},
            {"pairwise_head", pairwise_head}};
  }

  static ModelConfig from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.embed_dim = j.at("embed_dim");
    c.n_heads = j.at("n_heads");
    c.n_layers = j.at("n_layers");
    c.ffn_dim = j.at("ffn_dim");
    c.lstm_hidden = j.at("lstm_hidden");
    c.init_std = j.at("init_std");
    c.ln_eps = j.at("ln_eps");
    c.diagnosis_as_activity = j.at("diagnosis_as_activity");
    c.pairwise_head = j.at("pairwise_head");
    return c;
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

struct LstmParams {
  std::size_t w = 0;  // input -> gates, q x 4H, gate blocks [i f g o]
  std::size_t u = 0;  // hidden -> gates, H x 4H
  std::size_t b = 0;  // 1 x 4H
};

struct LayerParams {
  std::size_t wq, bq, wk, bk, wv, bv, wo, bo;
  std::size_t ln1_gain, ln1_bias;
  std::size_t w1, b1, w2, b2;
  std::size_t ln2_gain, ln2_bias;
};

// Extra parameters of the fine-tuned downstream predictor.
struct DownstreamParams {
  std::size_t att_w = 0;  // 2H x 1, location-based attention score
  std::size_t att_b = 0;
  std::size_t ctx_w = 0;  // 2H x |A|, context contribution to next-day logits
  std::size_t los_w = 0;  // 2H x 1
  std::size_t los_b = 0;
};

// Rows of the input sequence batch: one segment per day.
struct SequenceBatch {
  std::vector<std::size_t> tokens;     // activity-table row
  std::vector<std::size_t> diag_rows;  // diagnosis-days row (unused in the ablation)
  std::vector<std::size_t> offsets{0};
  std::vector<std::size_t> cls_rows;
  std::vector<std::size_t> mask_rows;
  std::vector<ActivityId> mask_targets;

  std::size_t n_days() const { return cls_rows.size(); }
};

class Model {
 public:
  Model() = default;

  Model(const ModelConfig& config, const Vocabulary& vocab, std::uint64_t seed)
      : config_(config), vocab_(vocab) {
    config_.validate();
    Rng rng(derive_seed(seed, 0x1417));
    const std::size_t q = config_.embed_dim;
    const std::size_t A = vocab_.n_activities();
    const std::size_t G = vocab_.n_diagnoses();
    const std::size_t H = config_.lstm_hidden;
    auto normal = [&](std::size_t r, std::size_t c) {
      return truncated_normal_tensor({r, c}, config_.init_std, rng);
    };
    auto zeros = [](std::size_t r, std::size_t c) { return Tensor::zeros(r, c); };
    auto ones = [](std::size_t c) { return Tensor({1, c}, 1.0); };

    std::size_t table_rows = A + Vocabulary::kSpecialTokens;
    if (config_.diagnosis_as_activity) table_rows += G;
    activity_table_ = params_.add("activity_embedding", normal(table_rows, q));
    if (!config_.diagnosis_as_activity) {
      std::size_t rows = 0;
      for (std::size_t g = 0; g < G; ++g) {
        diag_offset_.push_back(rows);
        rows += vocab_.max_los(g);
      }
      diagnosis_days_ = params_.add("diagnosis_days", normal(rows, q));
    }
    for (std::size_t l = 0; l < config_.n_layers; ++l) {
      const std::string p = "layer" + std::to_string(l) + ".";
      LayerParams lp{};
      lp.wq = params_.add(p + "wq", normal(q, q));
      lp.bq = params_.add(p + "bq", zeros(1, q));
      lp.wk = params_.add(p + "wk", normal(q, q));
      lp.bk = params_.add(p + "bk", zeros(1, q));
      lp.wv = params_.add(p + "wv", normal(q, q));
      lp.bv = params_.add(p + "bv", zeros(1, q));
      lp.wo = params_.add(p + "wo", normal(q, q));
      lp.bo = params_.add(p + "bo", zeros(1, q));
      lp.ln1_gain = params_.add(p + "ln1.gain", ones(q));
      lp.ln1_bias = params_.add(p + "ln1.bias", zeros(1, q));
      lp.w1 = params_.add(p + "ffn.w1", normal(q, config_.ffn_dim));
      lp.b1 = params_.add(p + "ffn.b1", zeros(1, config_.ffn_dim));
      lp.w2 = params_.add(p + "ffn.w2", normal(config_.ffn_dim, q));
      lp.b2 = params_.add(p + "ffn.b2", zeros(1, q));
      lp.ln2_gain = params_.add(p + "ln2.gain", ones(q));
      lp.ln2_bias = params_.add(p + "ln2.bias", zeros(1, q));
      layers_.push_back(lp);
    }
    mask_w_ = params_.add("mask_head.w", normal(q, A));
    mask_b_ = params_.add("mask_head.b", zeros(1, A));
    for (auto [dir, lp] : {std::pair{"lstm_fwd.", &lstm_fwd_}, std::pair{"lstm_bwd.", &lstm_bwd_}}) {
      lp->w = params_.add(std::string(dir) + "w", normal(q, 4 * H));
      lp->u = params_.add(std::string(dir) + "u", normal(H, 4 * H));
      lp->b = params_.add(std::string(dir) + "b", zeros(1, 4 * H));
    }
    next_w_ = params_.add("next_head.w", normal(2 * H, A));
    next_b_ = params_.add("next_head.b", zeros(1, A));
    if (config_.pairwise_head) {
      pair_w_ = params_.add("pair_head.w", normal(2 * q, 1));
      pair_b_ = params_.add("pair_head.b", zeros(1, 1));
    }
  }

  // Adds the downstream predictor's parameters. The context weights start at
  // zero so an untrained downstream model reproduces the next-day head.
  void add_downstream_heads(std::uint64_t seed) {
    if (downstream_) return;
    Rng rng(derive_seed(seed, 0xd0));
    const std::size_t H2 = 2 * config_.lstm_hidden;
    DownstreamParams d;
    d.att_w = params_.add("downstream.att_w", truncated_normal_tensor({H2, 1}, config_.init_std, rng));
    d.att_b = params_.add("downstream.att_b", Tensor::zeros(1, 1));
    d.ctx_w = params_.add("downstream.ctx_w", Tensor::zeros(H2, vocab_.n_activities()));
    d.los_w = params_.add("downstream.los_w", Tensor::zeros(H2, 1));
    d.los_b = params_.add("downstream.los_b", Tensor::zeros(1, 1));
    downstream_ = d;
  }

  const ModelConfig& config() const { return config_; }
  const Vocabulary& vocab() const { return vocab_; }
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }
  const std::optional<DownstreamParams>& downstream() const { return downstream_; }

  std::size_t n_activities() const { return vocab_.n_activities(); }
  std::size_t embed_dim() const { return config_.embed_dim; }

  const Tensor& activity_table() const { return params_[activity_table_].value; }

  // Day-indexed rows of R_g (N_g x q). Empty in the diagnosis-as-activity
  // ablation, where the diagnosis token row is the only diagnosis vector.
  Tensor diagnosis_matrix(DiagnosisId g) const {
    const std::size_t q = config_.embed_dim;
    if (config_.diagnosis_as_activity) {
      const std::size_t row = diagnosis_token(g);
      const Tensor& t = activity_table();
      return Tensor({1, q}, std::vector<double>(t.data() + row * q, t.data() + (row + 1) * q));
    }
    const std::size_t n = vocab_.max_los(g);
    const Tensor& t = params_[*diagnosis_days_].value;
    const double* begin = t.data() + diag_offset_[g] * q;
    return Tensor({n, q}, std::vector<double>(begin, begin + n * q));
  }

  std::size_t diagnosis_token(DiagnosisId g) const {
    return vocab_.n_activities() + Vocabulary::kSpecialTokens + g;
  }

  // Row of R_g used on 1-based day t: min(t, N_g).
  std::size_t diagnosis_day_row(DiagnosisId g, std::size_t t) const {
    const std::size_t n = vocab_.max_los(g);
    return diag_offset_[g] + std::min(t, n) - 1;
  }

  // Appends one day as a segment: [CLS] (+ diagnosis token in the ablation)
  // then the day's activities in id order, masked positions as [MASK].
  void append_day(SequenceBatch& b, const DayRecord& day, DiagnosisId g, std::size_t t,
                  std::span<const std::size_t> masked_positions = {}) const {
    if (t < 1) throw InputError("day index must be >= 1");
    if (day.activities.empty()) throw InputError("day has no activities");
    if (g >= vocab_.n_diagnoses()) throw InputError("unknown diagnosis id");
    const std::size_t diag_row = config_.diagnosis_as_activity ? 0 : diagnosis_day_row(g, t);
    auto push = [&](std::size_t token) {
      b.tokens.push_back(token);
      b.diag_rows.push_back(diag_row);
    };
    b.cls_rows.push_back(b.tokens.size());
    push(vocab_.cls_id());
    if (config_.diagnosis_as_activity) push(diagnosis_token(g));
    std::size_t m = 0;
    for (std::size_t i = 0; i < day.activities.size(); ++i) {
      const ActivityId a = day.activities[i];
      if (a >= vocab_.n_activities()) throw InputError("unknown activity id " + std::to_string(a));
      if (m < masked_positions.size() && masked_positions[m] == i) {
        b.mask_rows.push_back(b.tokens.size());
        b.mask_targets.push_back(a);
        push(vocab_.mask_id());
        ++m;
      } else {
        push(a);
      }
    }
    if (m != masked_positions.size()) throw InputError("masked position out of range or unsorted");
    b.offsets.push_back(b.tokens.size());
  }

  Var embed(Graph& g, const SequenceBatch& b) {
    Var x = ops::gather_rows(g.param(params_[activity_table_]), b.tokens);
    if (!config_.diagnosis_as_activity) {
      x = ops::add(x, ops::gather_rows(g.param(params_[*diagnosis_days_]), b.diag_rows));
    }
    return x;
  }

  // N-layer post-norm Transformer over each segment independently.
  Var encode(Graph& g, Var x, const std::vector<std::size_t>& offsets) {
    using namespace ops;
    for (const auto& lp : layers_) {
      auto P = [&](std::size_t i) { return g.param(params_[i]); };
      Var q = add_bias(matmul(x, P(lp.wq)), P(lp.bq));
      Var k = add_bias(matmul(x, P(lp.wk)), P(lp.bk));
      Var v = add_bias(matmul(x, P(lp.wv)), P(lp.bv));
      Var att = segment_attention(q, k, v, offsets, config_.n_heads);
      Var o = add_bias(matmul(att, P(lp.wo)), P(lp.bo));
      x = layer_norm(add(x, o), P(lp.ln1_gain), P(lp.ln1_bias), config_.ln_eps);
      Var f = add_bias(matmul(gelu(add_bias(matmul(x, P(lp.w1)), P(lp.b1))), P(lp.w2)), P(lp.b2));
      x = layer_norm(add(x, f), P(lp.ln2_gain), P(lp.ln2_bias), config_.ln_eps);
    }
    return x;
  }

  Var masked_logits(Graph& g, Var t_mask) {
    return ops::add_bias(ops::matmul(t_mask, g.param(params_[mask_w_])),
                         g.param(params_[mask_b_]));
  }

  Var next_logits(Graph& g, Var h) {
    return ops::add_bias(ops::matmul(h, g.param(params_[next_w_])), g.param(params_[next_b_]));
  }

  Var pair_logits(Graph& g, Var pair_features) {
    if (!config_.pairwise_head) throw InputError("model has no pairwise head");
    return ops::add_bias(ops::matmul(pair_features, g.param(params_[*pair_w_])),
                         g.param(params_[*pair_b_]));
  }

  // Prefix BiLSTM over day representations for every (visit, e) with
  // e = 1..los-1: forward over days 1..e, backward over e..1, final states
  // concatenated. Rows are ordered by visit, then e.
  struct PrefixStates {
    Var final_states;                    // P x 2H
    std::vector<std::size_t> visit_of;   // prefix -> visit position in batch
    std::vector<std::size_t> length;     // prefix -> e
    Var all_states;                      // (sum e) x 2H, only when requested
    std::vector<std::size_t> offsets;    // segments of all_states, one per prefix
  };

  PrefixStates encode_prefixes(Graph& g, Var day_reps, const std::vector<std::size_t>& day_base,
                               const std::vector<std::size_t>& los, bool keep_all_states = false) {
    using namespace ops;
    const std::size_t V = los.size();
    PrefixStates out;
    for (std::size_t v = 0; v < V; ++v) {
      for (std::size_t e = 1; e < los[v]; ++e) {
        out.visit_of.push_back(v);
        out.length.push_back(e);
      }
    }
    if (out.visit_of.empty()) throw InputError("encode_prefixes: no visit has two or more days");
    const std::size_t P = out.visit_of.size();

    // Forward direction: visits sorted by length so each step's active set
    // is a leading block of rows.
    std::vector<std::size_t> order(V);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return los[a] > los[b]; });
    std::vector<std::size_t> rank(V);
    for (std::size_t r = 0; r < V; ++r) rank[order[r]] = r;
    const std::size_t steps = los[order[0]] - 1;
    std::vector<Var> fwd_h;
    std::vector<std::size_t> fwd_off;
    {
      Var h, c;
      std::size_t off = 0;
      for (std::size_t j = 1; j <= steps; ++j) {
        std::size_t active = 0;
        while (active < V && los[order[active]] - 1 >= j) ++active;
        std::vector<std::size_t> idx(active);
        for (std::size_t r = 0; r < active; ++r) idx[r] = day_base[order[r]] + j - 1;
        Var x = gather_rows(day_reps, std::move(idx));
        std::optional<Var> hp, cp;
        if (j > 1) {
          hp = slice_rows(h, 0, active);
          cp = slice_rows(c, 0, active);
        }
        std::tie(h, c) = lstm_step(g, lstm_fwd_, x, hp, cp);
        fwd_h.push_back(h);
        fwd_off.push_back(off);
        off += active;
      }
    }
    Var fwd_all = concat_rows(fwd_h);

    // Backward direction: one row per prefix, sorted by length; step s
    // processes day e - s of every prefix with e > s.
    std::vector<std::size_t> porder(P);
    std::iota(porder.begin(), porder.end(), 0);
    std::stable_sort(porder.begin(), porder.end(), [&](std::size_t a, std::size_t b) {
      return out.length[a] > out.length[b];
    });
    std::vector<std::size_t> prank(P);
    for (std::size_t r = 0; r < P; ++r) prank[porder[r]] = r;
    std::vector<Var> bwd_h;
    std::vector<std::size_t> bwd_off;
    {
      Var h, c;
      std::size_t off = 0;
      for (std::size_t s = 0; s < steps; ++s) {
        std::size_t active = 0;
        while (active < P && out.length[porder[active]] > s) ++active;
        std::vector<std::size_t> idx(active);
        for (std::size_t r = 0; r < active; ++r) {
          const std::size_t p = porder[r];
          idx[r] = day_base[out.visit_of[p]] + out.length[p] - s - 1;
        }
        Var x = gather_rows(day_reps, std::move(idx));
        std::optional<Var> hp, cp;
        if (s > 0) {
          hp = slice_rows(h, 0, active);
          cp = slice_rows(c, 0, active);
        }
        std::tie(h, c) = lstm_step(g, lstm_bwd_, x, hp, cp);
        bwd_h.push_back(h);
        bwd_off.push_back(off);
        off += active;
      }
    }
    Var bwd_all = concat_rows(bwd_h);

    std::vector<std::size_t> fi(P), bi(P);
    for (std::size_t p = 0; p < P; ++p) {
      const std::size_t e = out.length[p];
      fi[p] = fwd_off[e - 1] + rank[out.visit_of[p]];
      bi[p] = bwd_off[e - 1] + prank[p];
    }
    out.final_states = concat_cols(gather_rows(fwd_all, std::move(fi)),
                                   gather_rows(bwd_all, std::move(bi)));

    if (keep_all_states) {
      std::vector<std::size_t> fa, ba;
      out.offsets.push_back(0);
      for (std::size_t p = 0; p < P; ++p) {
        const std::size_t e = out.length[p];
        for (std::size_t j = 1; j <= e; ++j) {
          fa.push_back(fwd_off[j - 1] + rank[out.visit_of[p]]);
          ba.push_back(bwd_off[e - j] + prank[p]);
        }
        out.offsets.push_back(fa.size());
      }
      out.all_states = concat_cols(gather_rows(fwd_all, std::move(fa)),
                                   gather_rows(bwd_all, std::move(ba)));
    }
    return out;
  }

  // Downstream next-day logits: h W + b + c W_ctx with c the attention-pooled
  // prefix states.
  Var downstream_next_logits(Graph& g, const PrefixStates& ps) {
    using namespace ops;
    const auto& d = require_downstream();
    Var scores = add_bias(matmul(ps.all_states, g.param(params_[d.att_w])), g.param(params_[d.att_b]));
    Var ctx = segment_attention_pool(scores, ps.all_states, ps.offsets);
    return add(next_logits(g, ps.final_states), matmul(ctx, g.param(params_[d.ctx_w])));
  }

  Var downstream_los(Graph& g, Var h) {
    const auto& d = require_downstream();
    return ops::add_bias(ops::matmul(h, g.param(params_[d.los_w])), g.param(params_[d.los_b]));
  }

  Parameter& los_bias() { return params_[require_downstream().los_b]; }

  // Value-level entry points mirroring the individual model operations.

  Tensor assemble_input_sequence(const DayRecord& day, DiagnosisId g, std::size_t t,
                                 std::span<const std::size_t> masked_positions = {}) {
    Graph graph(false);
    SequenceBatch b;
    append_day(b, day, g, t, masked_positions);
    return embed(graph, b).value();
  }

  struct DayEncoderOutput {
    Tensor t_cls;      // 1 x q
    Tensor per_token;  // rows x q, row 0 is [CLS]
  };

  DayEncoderOutput encode_day(const Tensor& input) {
    if (input.rows() < 2 || input.cols() != config_.embed_dim) {
      throw ShapeError("encode_day: input must have >= 2 rows of width embed_dim");
    }
    Graph graph(false);
    Var out = encode(graph, graph.constant(input), {0, input.rows()});
    DayEncoderOutput r;
    r.per_token = out.value();
    r.t_cls = Tensor({1, config_.embed_dim},
                     std::vector<double>(r.per_token.data(), r.per_token.data() + config_.embed_dim));
    return r;
  }

  Tensor masked_head(const Tensor& t_mask) {
    Graph graph(false);
    return masked_logits(graph, graph.constant(t_mask)).value();
  }

  // h for a prefix of day representations (each 1 x q), 1 x 2H.
  Tensor encode_prefix_days(const std::vector<Tensor>& day_reps) {
    if (day_reps.empty()) throw InputError("encode_prefix_days: empty prefix");
    Graph graph(false);
    std::vector<Var> rows;
    for (const auto& r : day_reps) rows.push_back(graph.constant(r));
    // A visit of length n+1 has the n-day prefix as its last prefix.
    auto ps = encode_prefixes(graph, ops::concat_rows(rows), {0}, {day_reps.size() + 1});
    const Tensor& all = ps.final_states.value();
    const std::size_t w = all.cols();
    const double* last = all.data() + (all.rows() - 1) * w;
    return Tensor({1, w}, std::vector<double>(last, last + w));
  }

  Tensor next_day_head(const Tensor& h) {
    Graph graph(false);
    return next_logits(graph, graph.constant(h)).value();
  }

  // Copies parameter values (not gradients) from a model of identical layout.
  void copy_values_from(const Model& other) {
    if (other.params_.size() != params_.size()) {
      throw CompatibilityError("parameter layouts differ");
    }
    for (std::size_t i = 0; i < params_.size(); ++i) {
      other.params_[i].value.require_same_shape(params_[i].value, "copy_values_from");
      params_[i].value = other.params_[i].value;
    }
  }

 private:
  const DownstreamParams& require_downstream() const {
    if (!downstream_) throw InputError("model has no downstream heads");
    return *downstream_;
  }

  std::pair<Var, Var> lstm_step(Graph& g, const LstmParams& p, Var x, std::optional<Var> h_prev,
                                std::optional<Var> c_prev) {
    using namespace ops;
    const std::size_t H = config_.lstm_hidden;
    Var z = matmul(x, g.param(params_[p.w]));
    if (h_prev) z = add(z, matmul(*h_prev, g.param(params_[p.u])));
    z = add_bias(z, g.param(params_[p.b]));
    Var i = sigmoid(slice_cols(z, 0, H));
    Var gg = ops::tanh(slice_cols(z, 2 * H, 3 * H));
    Var o = sigmoid(slice_cols(z, 3 * H, 4 * H));
    Var c = mul(i, gg);
    if (c_prev) c = add(c, mul(sigmoid(slice_cols(z, H, 2 * H)), *c_prev));
    Var h = mul(o, ops::tanh(c));
    return {h, c};
  }

  ModelConfig config_;
  Vocabulary vocab_;
  ParamStore params_;
  std::size_t activity_table_ = 0;
  std::optional<std::size_t> diagnosis_days_;
  std::vector<std::size_t> diag_offset_;
  std::vector<LayerParams> layers_;
  std::size_t mask_w_ = 0, mask_b_ = 0;
  LstmParams lstm_fwd_, lstm_bwd_;
  std::size_t next_w_ = 0, next_b_ = 0;
  std::optional<std::size_t> pair_w_, pair_b_;
  std::optional<DownstreamParams> downstream_;
};

}  // namespace i2v
