#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "i2v/checkpoint.hpp"
#include "i2v/corpus.hpp"
#include "i2v/error.hpp"
#include "i2v/finetune.hpp"
#include "i2v/intrusion.hpp"
#include "i2v/model.hpp"
#include "i2v/report.hpp"
#include "i2v/synthetic.hpp"
#include "i2v/training.hpp"

namespace i2v::cli {

namespace fs = std::filesystem;

// Named hyperparameter presets. `full` is the built-in default.
struct Preset {
  ModelConfig model;
  double lr = 1e-4;
  double filter_scale = 1.0;
};

inline Preset preset(const std::string& name) {
  if (name == "full") return {ModelConfig::full(), 1e-4, 1.0};
  if (name == "desk") return {ModelConfig::desk(), 1e-3, 0.1};
  throw InputError("unknown preset '" + name + "' (full, desk)");
}

inline void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw InputError("cannot write " + path.string());
  out << text;
}

inline std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

inline fs::path sibling(const fs::path& p, const std::string& suffix) {
  return fs::path(p.string() + suffix);
}

// Filter and split exactly as recorded in a checkpoint's metadata.
inline CohortSplit prepare_split(const Cohort& raw, double filter_scale, std::uint64_t split_seed) {
  Cohort filtered = filter_cohort(raw, FilterConfig::scaled(filter_scale));
  if (filtered.visits.size() < 3) {
    throw InputError("cohort has " + std::to_string(filtered.visits.size()) +
                     " visits after filtering (scale " + std::to_string(filter_scale) + "); need at least 3");
  }
  return split_cohort(filtered, SplitRatios{}, split_seed);
}

struct SplitProvenance {
  double filter_scale = 1.0;
  std::uint64_t split_seed = 0;
};

inline SplitProvenance provenance_of(const Checkpoint& ck) {
  try {
    return {ck.metadata.at("filter_scale").get<double>(), ck.metadata.at("split_seed").get<std::uint64_t>()};
  } catch (const nlohmann::json::exception&) {
    throw CompatibilityError("checkpoint lacks filter/split provenance");
  }
}

inline std::string format_vector_row(const std::string& key, std::span<const double> v) {
  std::ostringstream os;
  os << std::setprecision(17) << key;
  for (double x : v) os << '\t' << x;
  os << '\n';
  return os.str();
}

inline std::span<const double> row_of(const Tensor& t, std::size_t r) { return t.row_span(r); }

inline int run_cli(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Inpatient day-sequence representation learning: synthesize, pretrain, evaluate, export."};
  app.set_config("--config", "", "TOML config file; [subcommand] tables mirror the flags");
  app.allow_config_extras(CLI::config_extras_mode::error);
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Show help for every subcommand");

  // synth
  auto* synth = app.add_subcommand("synth", "Generate a synthetic cohort with ground truth");
  std::string synth_out, synth_truth, synth_spec;
  std::optional<std::uint64_t> synth_seed;
  std::optional<std::size_t> s_visits, s_acts, s_clusters, s_diags, s_families;
  synth->add_option("--out", synth_out, "Cohort JSONL output")->required();
  synth->add_option("--truth", synth_truth, "Ground-truth JSON output (default <out>.truth.json)");
  synth->add_option("--spec", synth_spec, "JSON file with generator parameters");
  synth->add_option("--seed", synth_seed, "Generator seed");
  synth->add_option("--visits", s_visits);
  synth->add_option("--activities", s_acts);
  synth->add_option("--clusters", s_clusters);
  synth->add_option("--diagnoses", s_diags);
  synth->add_option("--families", s_families);

  // stats
  auto* stats = app.add_subcommand("stats", "Print cohort statistics");
  std::string stats_cohort;
  std::optional<double> stats_scale;
  bool stats_json = false;
  stats->add_option("cohort", stats_cohort, "Cohort JSONL")->required();
  stats->add_option("--filter-scale", stats_scale, "Apply the cohort filter with this scale first");
  stats->add_flag("--json", stats_json, "Emit JSON instead of a table");

  // pretrain
  auto* pre = app.add_subcommand("pretrain", "Filter, split, and pretrain; writes a checkpoint and CSV log");
  std::string pre_cohort, pre_out, pre_log, pre_preset = "full", pre_ablation = "none", pre_target = "softmax";
  std::uint64_t pre_seed = 1;
  std::optional<std::size_t> p_epochs, p_batch, p_dim, p_heads, p_layers, p_ffn, p_hidden;
  std::optional<double> p_lr, p_scale, p_wd;
  bool p_unmasked = false, p_keep_opt = false, p_quiet = false;
  pre->add_option("--cohort", pre_cohort, "Cohort JSONL")->required();
  pre->add_option("--out", pre_out, "Checkpoint output")->required();
  pre->add_option("--log", pre_log, "Training log CSV (default <out>.log.csv)");
  pre->add_option("--preset", pre_preset, "full or desk")->check(CLI::IsMember({"full", "desk"}));
  pre->add_option("--seed", pre_seed, "Seed for split, initialization, and masking");
  pre->add_option("--epochs", p_epochs);
  pre->add_option("--batch-size", p_batch);
  pre->add_option("--lr", p_lr);
  pre->add_option("--weight-decay", p_wd);
  pre->add_option("--dim", p_dim);
  pre->add_option("--heads", p_heads);
  pre->add_option("--layers", p_layers);
  pre->add_option("--ffn", p_ffn, "Feed-forward width (default 4 x dim)");
  pre->add_option("--lstm-hidden", p_hidden);
  pre->add_option("--filter-scale", p_scale, "Scale of the diagnosis-frequency bounds");
  pre->add_option("--ablation", pre_ablation)
      ->check(CLI::IsMember({"none", "diagnosis-as-activity", "pairwise-day"}));
  pre->add_option("--next-target", pre_target, "softmax or sigmoid")->check(CLI::IsMember({"softmax", "sigmoid"}));
  pre->add_flag("--unmasked-day-reps", p_unmasked, "Separate unmasked pass for next-day inputs");
  pre->add_flag("--keep-optimizer", p_keep_opt, "Store Adam moments in the checkpoint");
  pre->add_flag("--quiet", p_quiet);

  // finetune
  auto* fin = app.add_subcommand("finetune", "Fine-tune a downstream predictor from a pretrained checkpoint");
  std::string fin_ck, fin_cohort, fin_out, fin_task = "next";
  FinetuneConfig fin_cfg;
  fin->add_option("--checkpoint", fin_ck)->required();
  fin->add_option("--cohort", fin_cohort)->required();
  fin->add_option("--out", fin_out, "Fine-tuned checkpoint output");
  fin->add_option("--task", fin_task, "next or los")->check(CLI::IsMember({"next", "los"}));
  fin->add_option("--epochs", fin_cfg.epochs);
  fin->add_option("--batch-size", fin_cfg.batch_size);
  fin->add_option("--lr", fin_cfg.adam.lr);
  fin->add_option("--seed", fin_cfg.seed);

  // eval
  auto* ev = app.add_subcommand("eval", "Run intrusion, clustering, recall, and LOS evaluations");
  std::string ev_ck, ev_cohort, ev_truth, ev_out, ev_tasks = "intrusion,cluster,recall,los", ev_mode = "day_mean",
                                                   ev_tie = "random";
  EvalOptions ev_opt;
  ev->add_option("--checkpoint", ev_ck)->required();
  ev->add_option("--cohort", ev_cohort)->required();
  ev->add_option("--truth", ev_truth, "Ground-truth JSON (default <cohort>.truth.json when present)");
  ev->add_option("--out-dir", ev_out, "Directory for report files")->required();
  ev->add_option("--tasks", ev_tasks, "Comma list of intrusion,cluster,recall,los");
  ev->add_option("--sets", ev_opt.n_intrusion_sets, "Intrusion sets");
  ev->add_option("--vector-mode", ev_mode)->check(CLI::IsMember({"day_mean", "first_day", "flatten_pad"}));
  ev->add_option("--tie-break", ev_tie)->check(CLI::IsMember({"random", "centroid"}));
  ev->add_option("--finetune-epochs", ev_opt.finetune.epochs);
  ev->add_option("--finetune-lr", ev_opt.finetune.adam.lr);
  ev->add_option("--seed", ev_opt.seed);
  ev->add_flag("--random-init-control", ev_opt.random_init_control,
               "Also fine-tune a randomly initialized model of the same shape");

  // nearest
  auto* near = app.add_subcommand("nearest", "Nearest activities by Euclidean distance");
  std::string near_ck, near_code;
  std::size_t near_k = 5;
  near->add_option("--checkpoint", near_ck)->required();
  near->add_option("--code", near_code, "Activity code")->required();
  near->add_option("--k", near_k);

  // export
  auto* exp = app.add_subcommand("export", "Export embeddings as TSV");
  std::string exp_ck, exp_out, exp_what = "activities", exp_cohort;
  exp->add_option("--checkpoint", exp_ck)->required();
  exp->add_option("--out", exp_out)->required();
  exp->add_option("--what", exp_what)->check(CLI::IsMember({"activities", "diagnoses", "days"}));
  exp->add_option("--cohort", exp_cohort, "Cohort JSONL (required for days)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : static_cast<int>(ExitCode::kInput);
  }

  try {
    if (*synth) {
      SyntheticSpec spec;
      if (!synth_spec.empty()) {
        nlohmann::json j;
        try {
          j = nlohmann::json::parse(read_text(synth_spec));
        } catch (const nlohmann::json::parse_error& e) {
          throw InputError("synthetic spec " + synth_spec + ": " + e.what());
        }
        spec = synthetic_spec_from_json(j);
      }
      if (synth_seed) spec.seed = *synth_seed;
      if (s_visits) spec.n_visits = *s_visits;
      if (s_acts) spec.n_activities = *s_acts;
      if (s_clusters) spec.n_clusters = *s_clusters;
      if (s_diags) spec.n_diagnoses = *s_diags;
      if (s_families) spec.n_families = *s_families;
      const auto gen = generate_synthetic(make_synthetic_spec(spec));
      const fs::path cohort_path = synth_out;
      if (cohort_path.has_parent_path()) fs::create_directories(cohort_path.parent_path());
      save_cohort(gen.cohort, cohort_path);
      const fs::path truth_path = synth_truth.empty() ? sibling(cohort_path, ".truth.json") : fs::path(synth_truth);
      save_ground_truth(gen.truth, truth_path);
      out << "wrote " << gen.cohort.visits.size() << " visits to " << cohort_path.string() << " (seed "
          << spec.seed << "), ground truth to " << truth_path.string() << '\n';
      return 0;
    }

    if (*stats) {
      Cohort c = load_cohort(stats_cohort);
      if (stats_scale) c = filter_cohort(c, FilterConfig::scaled(*stats_scale));
      const StatsReport r = cohort_stats(c);
      if (stats_json) out << r.to_json().dump(2) << '\n';
      else out << r.table();
      if (c.duplicates_merged > 0) err << "note: merged " << c.duplicates_merged << " repeated codes within days\n";
      return 0;
    }

    if (*pre) {
      Preset ps = preset(pre_preset);
      ModelConfig mc = ps.model;
      if (p_dim) {
        mc.embed_dim = *p_dim;
        if (!p_ffn) mc.ffn_dim = 4 * *p_dim;
      }
      if (p_heads) mc.n_heads = *p_heads;
      if (p_layers) mc.n_layers = *p_layers;
      if (p_ffn) mc.ffn_dim = *p_ffn;
      if (p_hidden) mc.lstm_hidden = *p_hidden;
      mc.validate();
      TrainConfig tc;
      tc.seed = pre_seed;
      tc.adam.lr = p_lr.value_or(ps.lr);
      if (p_wd) tc.adam.weight_decay = *p_wd;
      if (p_epochs) tc.epochs = *p_epochs;
      if (p_batch) tc.batch_size = *p_batch;
      tc.diagnosis_as_activity = pre_ablation == "diagnosis-as-activity";
      tc.pairwise_day_task = pre_ablation == "pairwise-day";
      tc.next_target = next_day_target_from_string(pre_target);
      tc.unmasked_day_reps = p_unmasked;
      tc.keep_optimizer_state = p_keep_opt;
      tc.validate();
      const double scale = p_scale.value_or(ps.filter_scale);
      const std::uint64_t split_seed = derive_seed(pre_seed, 0x5911);

      const Cohort raw = load_cohort(pre_cohort);
      const CohortSplit split = prepare_split(raw, scale, split_seed);
      auto result = pretrain(split.train, split.valid, mc, tc, [&](const TrainLogRow& r) {
        if (!p_quiet) {
          err << "epoch " << r.epoch << " train " << std::setprecision(6) << r.train_loss << " valid "
              << r.valid_loss << '\n';
        }
      });
      nlohmann::json meta{{"filter_scale", scale},
                          {"split_seed", split_seed},
                          {"seed", pre_seed},
                          {"preset", pre_preset},
                          {"cohort_provenance", raw.provenance}};
      save_checkpoint(make_checkpoint(result, meta), pre_out);
      write_text(pre_log.empty() ? sibling(pre_out, ".log.csv") : fs::path(pre_log), train_log_csv(result.log));
      out << "best epoch " << result.best_epoch << " valid loss " << std::setprecision(6)
          << result.log[result.best_epoch].valid_loss << "; checkpoint " << pre_out << " (seed " << pre_seed << ")\n";
      return 0;
    }

    if (*fin) {
      const Cohort raw = load_cohort(fin_cohort);
      Checkpoint ck = load_checkpoint(fin_ck);
      const auto prov = provenance_of(ck);
      const CohortSplit split = prepare_split(raw, prov.filter_scale, prov.split_seed);
      require_compatible(ck.model, split.train);
      const std::size_t threads = eval_threads();
      nlohmann::json report;
      Model tuned;
      if (fin_task == "next") {
        auto r = finetune_next_day(ck.model, split.train, split.valid, split.test, fin_cfg, threads);
        report = r.test.to_json();
        report["best_epoch"] = r.best_epoch;
        report["valid_recall_a"] = r.valid_history;
        tuned = std::move(r.model);
      } else {
        auto r = finetune_los(ck.model, split.train, split.valid, split.test, fin_cfg, threads);
        report = r.test.to_json();
        report["best_epoch"] = r.best_epoch;
        report["valid_rmse"] = r.valid_history;
        tuned = std::move(r.model);
      }
      report["task"] = fin_task;
      report["seed"] = fin_cfg.seed;
      out << report.dump(2) << '\n';
      if (!fin_out.empty()) {
        Checkpoint tuned_ck{std::move(tuned), ck.train, ck.log, ck.best_epoch, std::nullopt, ck.metadata};
        tuned_ck.metadata["finetune"] = fin_cfg.to_json();
        tuned_ck.metadata["finetune_task"] = fin_task;
        save_checkpoint(tuned_ck, fin_out);
      }
      return 0;
    }

    if (*ev) {
      const Cohort raw = load_cohort(ev_cohort);
      Checkpoint ck = load_checkpoint(ev_ck);
      const auto prov = provenance_of(ck);
      const CohortSplit split = prepare_split(raw, prov.filter_scale, prov.split_seed);
      require_compatible(ck.model, split.train);
      std::optional<GroundTruth> truth;
      fs::path truth_path = ev_truth.empty() ? sibling(ev_cohort, ".truth.json") : fs::path(ev_truth);
      if (!ev_truth.empty() || fs::exists(truth_path)) truth = load_ground_truth(truth_path);
      ev_opt.tasks = parse_eval_tasks(ev_tasks);
      ev_opt.vector_mode = diagnosis_vector_mode_from_string(ev_mode);
      ev_opt.tie_break = ev_tie == "random" ? IntrusionTieBreak::kRandom : IntrusionTieBreak::kFarthestFromCentroid;
      ev_opt.threads = eval_threads();
      const EvalReport rep = run_evaluation(ck.model, split, truth, ev_opt);
      const fs::path dir = ev_out;
      fs::create_directories(dir);
      write_text(dir / "report.json", rep.to_json().dump(2) + "\n");
      write_text(dir / "report.txt", rep.to_table());
      if (rep.worksheet) {
        write_text(dir / "intrusion_worksheet.csv", rep.worksheet->worksheet_csv);
        write_text(dir / "intrusion_answers.csv", rep.worksheet->answer_key_csv);
      }
      out << rep.to_table();
      return 0;
    }

    if (*near) {
      Checkpoint ck = load_checkpoint(near_ck);
      const auto id = ck.model.vocab().find_activity(near_code);
      if (!id) throw InputError("unknown activity code '" + near_code + "'");
      const Tensor emb = activity_embeddings(ck.model);
      const std::size_t n = emb.rows();
      if (near_k > n - 1) {
        err << "warning: k=" << near_k << " exceeds " << n - 1 << " other activities; using " << n - 1 << '\n';
        near_k = n - 1;
      }
      std::vector<std::pair<double, std::size_t>> d;
      for (std::size_t a = 0; a < n; ++a) {
        if (a == *id) continue;
        double s = 0.0;
        for (std::size_t k = 0; k < emb.cols(); ++k) {
          const double x = emb(a, k) - emb(*id, k);
          s += x * x;
        }
        d.emplace_back(std::sqrt(s), a);
      }
      std::stable_sort(d.begin(), d.end(), [](const auto& x, const auto& y) { return x.first < y.first; });
      out << std::setprecision(6);
      for (std::size_t i = 0; i < near_k; ++i) {
        out << ck.model.vocab().activity_code(static_cast<ActivityId>(d[i].second)) << '\t' << d[i].first << '\n';
      }
      return 0;
    }

    if (*exp) {
      Checkpoint ck = load_checkpoint(exp_ck);
      const Model& m = ck.model;
      std::string text;
      if (exp_what == "activities") {
        const Tensor emb = activity_embeddings(m);
        for (std::size_t a = 0; a < emb.rows(); ++a)
          text += format_vector_row(m.vocab().activity_code(static_cast<ActivityId>(a)), row_of(emb, a));
      } else if (exp_what == "diagnoses") {
        const Tensor mean = diagnosis_vectors(m, DiagnosisVectorMode::kDayMean);
        for (std::size_t g = 0; g < m.vocab().n_diagnoses(); ++g) {
          const std::string& code = m.vocab().diagnosis_code(static_cast<DiagnosisId>(g));
          text += format_vector_row(code, row_of(mean, g));
          const Tensor rows = m.diagnosis_matrix(static_cast<DiagnosisId>(g));
          for (std::size_t t = 0; t < rows.rows(); ++t)
            text += format_vector_row(code + ":" + std::to_string(t + 1), row_of(rows, t));
        }
      } else {
        if (exp_cohort.empty()) throw InputError("--what days requires --cohort");
        // Same filter the checkpoint was trained under, so the vocabularies line up.
        Cohort c = load_cohort(exp_cohort);
        if (ck.metadata.contains("filter_scale")) c = filter_cohort(c, FilterConfig::scaled(provenance_of(ck).filter_scale));
        require_compatible(m, c);
        Model work = m;
        for (const auto& v : c.visits) {
          SequenceBatch b;
          for (std::size_t t = 0; t < v.los(); ++t) work.append_day(b, v.days[t], v.diagnosis, t + 1);
          Graph g(false);
          const Tensor cls = ops::gather_rows(work.encode(g, work.embed(g, b), b.offsets), b.cls_rows).value();
          for (std::size_t t = 0; t < v.los(); ++t)
            text += format_vector_row(v.visit_id + ":" + std::to_string(t + 1), row_of(cls, t));
        }
      }
      write_text(exp_out, text);
      return 0;
    }
  } catch (const CompatibilityError& e) {
    err << "error: " << e.what() << '\n';
    return static_cast<int>(ExitCode::kCompatibility);
  } catch (const NumericalError& e) {
    err << "error: " << e.what() << '\n';
    return static_cast<int>(ExitCode::kDivergence);
  } catch (const InputError& e) {
    err << "error: " << e.what() << '\n';
    return static_cast<int>(ExitCode::kInput);
  } catch (const ShapeError& e) {
    err << "error: " << e.what() << '\n';
    return static_cast<int>(ExitCode::kInput);
  } catch (const fs::filesystem_error& e) {
    err << "error: " << e.what() << '\n';
    return static_cast<int>(ExitCode::kInput);
  }
  return static_cast<int>(ExitCode::kInput);
}

}  // namespace i2v::cli
