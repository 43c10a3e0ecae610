// serinv: command-line driver for data generation, training, evaluation,
// embedding analysis and the strategy comparison.

#include <cstdio>
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "serinv/binary_io.hpp"
#include "serinv/data.hpp"
#include "serinv/errors.hpp"
#include "serinv/eval.hpp"
#include "serinv/experiment.hpp"
#include "serinv/gradcheck_suite.hpp"
#include "serinv/model.hpp"
#include "serinv/training.hpp"

namespace fs = std::filesystem;
using namespace serinv;

namespace {

fs::path default_out_dir() {
  const char* env = std::getenv("SERINV_OUT_DIR");
  return env && *env ? fs::path(env) : fs::path(".");
}

json read_json_file(const fs::path& path) {
  const std::string text = io::read_text(path);
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError("'" + path.string() + "' is not valid JSON: " + e.what());
  }
}

void write_json(const fs::path& path, const json& j) { io::write_text_atomic(path, j.dump(2) + "\n"); }

// Structured key=value log lines on stderr.
class Log {
 public:
  explicit Log(const char* event) { os_ << "event=" << event; }
  template <typename T>
  Log& kv(const char* key, const T& value) {
    os_ << ' ' << key << '=' << value;
    return *this;
  }
  ~Log() { std::cerr << os_.str() << '\n'; }

 private:
  std::ostringstream os_;
};

std::string quoted(const std::string& s) {
  if (s.find_first_of(" \t=\"") == std::string::npos && !s.empty()) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"' || c == '\\') out += '\\';
    out += c;
  }
  return out + "\"";
}

// Config file plus flag overrides; flags win.
struct CommonConfig {
  std::string config_path;
  std::optional<std::string> preset;
  std::optional<std::string> strategy;
  std::optional<double> learning_rate, momentum, lambda, epsilon, alpha, clip_norm;
  std::optional<std::size_t> epochs, batch_size;
  std::optional<std::string> lambda_schedule;
  std::optional<std::uint64_t> seed;
  bool no_clip = false;

  void add_to(CLI::App* app, bool training_flags) {
    app->add_option("--config", config_path, "JSON config (keys: model, train, data, data_path, ...)")
        ->check(CLI::ExistingFile);
    app->add_option("--seed", seed, "Top-level seed");
    if (!training_flags) return;
    app->add_option("--preset", preset, "Model preset: iemocap, mandarin, small, tiny");
    app->add_option("--strategy", strategy, "SER_ONLY, MTL, DAT or CGT");
    app->add_option("--lr", learning_rate, "Learning rate");
    app->add_option("--momentum", momentum, "Nesterov momentum");
    app->add_option("--epochs", epochs, "Epochs");
    app->add_option("--batch-size", batch_size, "Batch size");
    app->add_option("--lambda", lambda, "Gradient reversal coefficient (DAT)");
    app->add_option("--lambda-schedule", lambda_schedule, "constant or ramp");
    app->add_option("--epsilon", epsilon, "Input perturbation step (CGT)");
    app->add_option("--alpha", alpha, "Perturbed-loss weight (CGT)");
    app->add_option("--clip-norm", clip_norm, "Global gradient-norm clip");
    app->add_flag("--no-clip", no_clip, "Disable gradient clipping");
  }

  ExperimentConfig resolve() const {
    ExperimentConfig c;
    c.model = ModelConfig::iemocap();
    if (!config_path.empty()) {
      const json j = read_json_file(config_path);
      try {
        c = j.get<ExperimentConfig>();
        if (!j.contains("model")) c.model = ModelConfig::iemocap();
      } catch (const json::exception& e) {
        throw ConfigError("config '" + config_path + "': " + e.what());
      }
    }
    if (preset) c.model = ModelConfig::preset(*preset);
    auto& t = c.train;
    if (strategy) t.strategy = parse_strategy(*strategy);
    if (learning_rate) t.learning_rate = *learning_rate;
    if (momentum) t.momentum = *momentum;
    if (epochs) t.epochs = *epochs;
    if (batch_size) t.batch_size = *batch_size;
    if (lambda) t.grl_lambda = *lambda;
    if (lambda_schedule) {
      if (*lambda_schedule == "constant") t.lambda_schedule = LambdaSchedule::kConstant;
      else if (*lambda_schedule == "ramp") t.lambda_schedule = LambdaSchedule::kRamp;
      else throw ConfigError("--lambda-schedule must be 'constant' or 'ramp'");
    }
    if (epsilon) t.cgt_epsilon = *epsilon;
    if (alpha) t.cgt_alpha = *alpha;
    if (clip_norm) t.clip_norm = *clip_norm;
    if (no_clip) t.clip_norm.reset();
    if (seed) {
      t.seed = *seed;
      c.data.seed = *seed;
    }
    t.validate();
    return c;
  }
};

fs::path out_path(const fs::path& out_dir, const std::string& explicit_path, const char* name) {
  return explicit_path.empty() ? out_dir / name : fs::path(explicit_path);
}

const std::vector<std::string>& subset_ids(const SplitManifest& m, const std::string& subset) {
  if (subset == "train") return m.train;
  if (subset == "validation") return m.validation;
  if (subset == "test") return m.test;
  throw ConfigError("--subset must be train, validation or test");
}

SplitManifest read_manifest(const fs::path& path) {
  try {
    return read_json_file(path).get<SplitManifest>();
  } catch (const json::exception& e) {
    throw FormatError("split manifest '" + path.string() + "': " + e.what());
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Speaker-invariant emotion embeddings: data, training, evaluation and probing"};
  app.require_subcommand(1);
  std::string out_dir_flag;
  app.add_option("--out-dir", out_dir_flag, "Output directory (default: $SERINV_OUT_DIR or .)");

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic dataset (SERF) plus split and speaker manifests");
  std::string gen_spec;
  std::optional<std::size_t> gen_speakers, gen_utts, gen_dim, gen_emotions;
  std::optional<std::uint64_t> gen_seed;
  std::size_t gen_sessions = 5;
  double gen_train = 0.8, gen_val = 0.1;
  gen->add_option("--spec", gen_spec, "SyntheticSpec JSON")->check(CLI::ExistingFile);
  gen->add_option("--num-speakers", gen_speakers, "Speakers");
  gen->add_option("--utterances-per-speaker", gen_utts, "Utterances per speaker");
  gen->add_option("--feature-dim", gen_dim, "Feature dimension");
  gen->add_option("--num-emotions", gen_emotions, "Emotion classes");
  gen->add_option("--seed", gen_seed, "Seed");
  gen->add_option("--sessions", gen_sessions, "Pseudo-session count for the speaker manifest");
  gen->add_option("--train-fraction", gen_train, "Speaker fraction for training");
  gen->add_option("--validation-fraction", gen_val, "Speaker fraction for validation");

  // split
  auto* split = app.add_subcommand("split", "Speaker-disjoint split, or session cross-validation folds");
  std::string split_data, split_out, split_speakers_path;
  double split_train = 0.8, split_val = 0.1;
  std::uint64_t split_seed = 0;
  std::size_t split_folds = 0;
  split->add_option("--data", split_data, "SERF dataset")->required()->check(CLI::ExistingFile);
  split->add_option("--train-fraction", split_train, "Speaker fraction for training");
  split->add_option("--validation-fraction", split_val, "Speaker fraction for validation");
  split->add_option("--seed", split_seed, "Seed");
  split->add_option("--out", split_out, "Manifest path (default: <out-dir>/split.json)");
  split->add_option("--cv-folds", split_folds, "Emit k session folds (needs --speakers) instead of one split");
  split->add_option("--speakers", split_speakers_path, "Speaker metadata JSON with session tags")
      ->check(CLI::ExistingFile);

  // train
  auto* trn = app.add_subcommand("train", "Train a model; writes the best checkpoint and the history CSV");
  CommonConfig train_cfg;
  train_cfg.add_to(trn, true);
  std::string train_data, train_split, train_model_out, train_history_out;
  trn->add_option("--data", train_data, "SERF dataset")->required()->check(CLI::ExistingFile);
  trn->add_option("--split", train_split, "Split manifest JSON")->required()->check(CLI::ExistingFile);
  trn->add_option("--model-out", train_model_out, "Checkpoint path (default: <out-dir>/model.serm)");
  trn->add_option("--history-out", train_history_out, "History CSV (default: <out-dir>/history.csv)");

  // evaluate
  auto* evl = app.add_subcommand("evaluate", "Emotion metrics of a checkpoint on one split subset");
  std::string eval_model, eval_data, eval_split, eval_subset = "test", eval_out, eval_confusion;
  evl->add_option("--model", eval_model, "SERM checkpoint")->required()->check(CLI::ExistingFile);
  evl->add_option("--data", eval_data, "SERF dataset")->required()->check(CLI::ExistingFile);
  evl->add_option("--split", eval_split, "Split manifest JSON")->required()->check(CLI::ExistingFile);
  evl->add_option("--subset", eval_subset, "train, validation or test");
  evl->add_option("--out", eval_out, "Metrics JSON (default: <out-dir>/metrics.json)");
  evl->add_option("--confusion-out", eval_confusion, "Confusion CSV (default: <out-dir>/confusion.csv)");

  // embed
  auto* emb = app.add_subcommand("embed", "Export utterance embeddings of one split subset as CSV");
  std::string emb_model, emb_data, emb_split, emb_subset = "test", emb_out;
  emb->add_option("--model", emb_model, "SERM checkpoint")->required()->check(CLI::ExistingFile);
  emb->add_option("--data", emb_data, "SERF dataset")->required()->check(CLI::ExistingFile);
  emb->add_option("--split", emb_split, "Split manifest JSON")->required()->check(CLI::ExistingFile);
  emb->add_option("--subset", emb_subset, "train, validation or test");
  emb->add_option("--out", emb_out, "Embeddings CSV (default: <out-dir>/embeddings.csv)");

  // probe
  auto* prb = app.add_subcommand("probe", "Linear speaker probe on exported embeddings");
  std::string probe_in, probe_out;
  std::uint64_t probe_seed = 0;
  prb->add_option("--embeddings", probe_in, "Embeddings CSV")->required()->check(CLI::ExistingFile);
  prb->add_option("--seed", probe_seed, "Seed for the per-speaker split");
  prb->add_option("--out", probe_out, "Probe JSON (default: <out-dir>/probe.json)");

  // project
  auto* prj = app.add_subcommand("project", "PCA projection of exported embeddings");
  std::string proj_in, proj_out;
  std::size_t proj_k = 2;
  prj->add_option("--embeddings", proj_in, "Embeddings CSV")->required()->check(CLI::ExistingFile);
  prj->add_option("-k,--components", proj_k, "Number of components");
  prj->add_option("--out", proj_out, "Projection CSV (default: <out-dir>/projection.csv)");

  // gradcheck
  auto* gck = app.add_subcommand("gradcheck", "Finite-difference check of every op, layer and training objective");
  std::uint64_t gc_seed = 0;
  std::string gc_out;
  gck->add_option("--seed", gc_seed, "Seed");
  gck->add_option("--out", gc_out, "Report CSV (default: <out-dir>/gradcheck.csv)");

  // experiment
  auto* exp = app.add_subcommand("experiment", "Strategy x seed comparison with a mean±std summary table");
  CommonConfig exp_cfg;
  exp_cfg.add_to(exp, true);
  std::optional<std::size_t> exp_num_seeds;
  exp->add_option("--num-seeds", exp_num_seeds, "Use seeds 1..N");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error kind=usage message=" << quoted(e.what()) << '\n';
    return 2;
  }

  const fs::path out_dir = out_dir_flag.empty() ? default_out_dir() : fs::path(out_dir_flag);

  try {
    if (*gen) {
      SyntheticSpec spec;
      if (!gen_spec.empty()) {
        try {
          spec = read_json_file(gen_spec).get<SyntheticSpec>();
        } catch (const json::exception& e) {
          throw ConfigError("spec '" + gen_spec + "': " + e.what());
        }
      }
      if (gen_speakers) spec.num_speakers = *gen_speakers;
      if (gen_utts) spec.utterances_per_speaker = *gen_utts;
      if (gen_dim) spec.feature_dim = *gen_dim;
      if (gen_emotions) spec.num_emotions = *gen_emotions;
      if (gen_seed) spec.seed = *gen_seed;
      const Dataset ds = generate_synthetic(spec);
      const SplitManifest m = split_by_speaker(ds, gen_train, gen_val, spec.seed);
      write_serf(ds, out_dir / "data.serf");
      write_json(out_dir / "split.json", m);
      write_json(out_dir / "speakers.json", speaker_metadata_json(assign_pseudo_sessions(ds, gen_sessions)));
      write_json(out_dir / "spec.json", spec);
      Log("gen-data")
          .kv("utterances", ds.utterances.size())
          .kv("speakers", ds.num_speakers())
          .kv("train", m.train.size())
          .kv("validation", m.validation.size())
          .kv("test", m.test.size())
          .kv("out_dir", quoted(out_dir.string()));
    } else if (*split) {
      const Dataset ds = read_serf(split_data);
      if (split_folds > 0) {
        if (split_speakers_path.empty()) throw ConfigError("--cv-folds needs --speakers");
        const auto folds = make_cv_folds(ds, parse_speaker_metadata(read_json_file(split_speakers_path)), split_folds);
        for (std::size_t f = 0; f < folds.size(); ++f) {
          for (std::size_t o = 0; o < 2; ++o) {
            const auto p = out_dir / ("fold" + std::to_string(f + 1) + (o == 0 ? "a" : "b") + ".json");
            write_json(p, folds[f].orientations[o]);
          }
          Log("fold").kv("index", f + 1).kv("held_out_session", quoted(folds[f].held_out_session));
        }
      } else {
        const SplitManifest m = split_by_speaker(ds, split_train, split_val, split_seed);
        const auto p = out_path(out_dir, split_out, "split.json");
        write_json(p, m);
        Log("split")
            .kv("train", m.train.size())
            .kv("validation", m.validation.size())
            .kv("test", m.test.size())
            .kv("out", quoted(p.string()));
      }
    } else if (*trn) {
      const ExperimentConfig cfg = train_cfg.resolve();
      const Dataset ds = read_serf(train_data);
      const SplitManifest m = read_manifest(train_split);
      require_disjoint(ds, m);
      const ModelConfig mc = fit_heads(cfg.model, ds, m);
      const TrainConfig& tc = cfg.train;
      Log("train_start")
          .kv("strategy", strategy_name(tc.strategy))
          .kv("epochs", tc.epochs)
          .kv("lr", tc.learning_rate)
          .kv("seed", tc.seed)
          .kv("parameters", Model::build(mc, tc.seed).parameter_count());
      TrainResult r = train(ds, m, mc, tc, [](const EpochRecord& e) {
        Log("epoch")
            .kv("epoch", e.epoch)
            .kv("train_emotion_loss", e.train_emotion_loss)
            .kv("train_speaker_loss", e.train_speaker_loss)
            .kv("val_emotion_acc", e.validation_emotion_accuracy)
            .kv("train_speaker_acc", e.train_speaker_accuracy)
            .kv("grl_lambda", e.grl_lambda)
            .kv("seconds", e.seconds);
      });
      const auto model_path = out_path(out_dir, train_model_out, "model.serm");
      const auto history_path = out_path(out_dir, train_history_out, "history.csv");
      r.best.save(model_path);
      io::write_text_atomic(history_path, r.history.to_csv());
      Log("train_done")
          .kv("best_epoch", r.history.best_epoch)
          .kv("val_emotion_acc", r.history.epochs[r.history.best_epoch].validation_emotion_accuracy)
          .kv("model", quoted(model_path.string()))
          .kv("history", quoted(history_path.string()));
    } else if (*evl) {
      Model model = Model::load(eval_model);
      const Dataset ds = read_serf(eval_data);
      const SplitManifest m = read_manifest(eval_split);
      const Metrics metrics = evaluate(model, ds, subset_ids(m, eval_subset));
      const auto p = out_path(out_dir, eval_out, "metrics.json");
      const auto c = out_path(out_dir, eval_confusion, "confusion.csv");
      json j = metrics_json(metrics, ds.emotion_names);
      j["subset"] = eval_subset;
      write_json(p, j);
      io::write_text_atomic(c, confusion_csv(metrics, ds.emotion_names));
      Log("evaluate")
          .kv("subset", eval_subset)
          .kv("accuracy", metrics.accuracy)
          .kv("utterances", metrics.total())
          .kv("out", quoted(p.string()));
    } else if (*emb) {
      Model model = Model::load(emb_model);
      const Dataset ds = read_serf(emb_data);
      const SplitManifest m = read_manifest(emb_split);
      const EmbedResult r = embed(model, ds, select(ds, subset_ids(m, emb_subset)));
      const auto p = out_path(out_dir, emb_out, "embeddings.csv");
      io::write_text_atomic(p, embeddings_csv(r.records));
      if (!r.skipped.empty()) {
        auto skipped = p;
        skipped.replace_extension(".skipped.json");
        write_json(skipped, json{{"too_short", r.skipped}, {"min_frames", model.min_frames()}});
      }
      Log("embed").kv("records", r.records.size()).kv("skipped", r.skipped.size()).kv("out", quoted(p.string()));
    } else if (*prb) {
      const auto records = parse_embeddings_csv(io::read_text(probe_in));
      const ProbeResult r = speaker_probe(records, probe_seed);
      const auto p = out_path(out_dir, probe_out, "probe.json");
      write_json(p, probe_json(r));
      Log("probe")
          .kv("probe_accuracy", r.probe_accuracy)
          .kv("chance_level", r.chance_level)
          .kv("leakage_ratio", r.leakage_ratio)
          .kv("out", quoted(p.string()));
    } else if (*prj) {
      const auto records = parse_embeddings_csv(io::read_text(proj_in));
      const Projection pr = pca_project(records, proj_k);
      const auto p = out_path(out_dir, proj_out, "projection.csv");
      io::write_text_atomic(p, projection_csv(records, pr));
      auto variance = p;
      variance.replace_extension(".variance.json");
      write_json(variance, json{{"explained_variance", pr.explained_variance}});
      Log log("project");
      log.kv("records", records.size()).kv("out", quoted(p.string()));
      for (std::size_t c = 0; c < pr.explained_variance.size(); ++c) {
        log.kv(("explained_pc" + std::to_string(c + 1)).c_str(), pr.explained_variance[c]);
      }
    } else if (*gck) {
      const auto reports = run_gradcheck_suite(gc_seed);
      std::ostringstream csv;
      csv.precision(6);
      csv << "check,max_rel_error,passed\n";
      bool all = true;
      for (const auto& r : reports) {
        const bool ok = r.passed(kGradCheckTolerance);
        all = all && ok;
        csv << r.op_name << ',' << r.max_rel_error << ',' << (ok ? 1 : 0) << '\n';
        Log("gradcheck").kv("check", quoted(r.op_name)).kv("max_rel_error", r.max_rel_error).kv("passed", ok ? 1 : 0);
      }
      io::write_text_atomic(out_path(out_dir, gc_out, "gradcheck.csv"), csv.str());
      if (!all) {
        std::cerr << "error kind=gradcheck message=\"at least one check exceeded the tolerance "
                  << kGradCheckTolerance << "\"\n";
        return 1;
      }
    } else if (*exp) {
      ExperimentConfig cfg = exp_cfg.resolve();
      if (exp_cfg.config_path.empty() && !exp_cfg.preset) cfg.model = ModelConfig::small();
      if (exp_num_seeds) {
        cfg.seeds.clear();
        for (std::size_t s = 1; s <= *exp_num_seeds; ++s) cfg.seeds.push_back(s);
      }
      const fs::path dir = cfg.output_dir.empty() || !out_dir_flag.empty() ? out_dir : fs::path(cfg.output_dir);
      const auto runs = run_experiment(
          cfg,
          [](const RunResult& r) {
            Log("run")
                .kv("strategy", strategy_name(r.strategy))
                .kv("seed", r.seed)
                .kv("val_acc", r.validation_accuracy)
                .kv("test_acc", r.test_accuracy)
                .kv("leakage_ratio", r.probe.leakage_ratio);
          },
          [](Strategy s, std::uint64_t seed, const EpochRecord& e) {
            Log("epoch")
                .kv("strategy", strategy_name(s))
                .kv("seed", seed)
                .kv("epoch", e.epoch)
                .kv("val_emotion_acc", e.validation_emotion_accuracy)
                .kv("seconds", e.seconds);
          });
      io::write_text_atomic(dir / "runs.csv", runs_csv(runs));
      io::write_text_atomic(dir / "summary.csv", summary_csv(summarize(runs, cfg.strategies)));
      write_json(dir / "experiment.json", cfg);
      Log("experiment_done").kv("runs", runs.size()).kv("summary", quoted((dir / "summary.csv").string()));
    }
  } catch (const Error& e) {
    std::cerr << "error kind=" << e.kind() << " message=" << quoted(e.what()) << '\n';
    return 1;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "error kind=io message=" << quoted(e.what()) << '\n';
    return 1;
  } catch (const json::exception& e) {
    std::cerr << "error kind=config message=" << quoted(e.what()) << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error kind=internal message=" << quoted(e.what()) << '\n';
    return 1;
  }
  return 0;
}
