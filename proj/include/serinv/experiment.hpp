#pragma once

// Strategy x seed comparison: train every strategy on the same speaker-disjoint
// splits, then report validation/test emotion accuracy and test-speaker
// probe leakage as mean and standard deviation over seeds.

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "serinv/data.hpp"
#include "serinv/errors.hpp"
#include "serinv/eval.hpp"
#include "serinv/model.hpp"
#include "serinv/training.hpp"

namespace serinv {

struct ExperimentConfig {
  ModelConfig model = ModelConfig::small();
  TrainConfig train;
  SyntheticSpec data;
  /// When set, experiments read this SERF file instead of generating data.
  std::string data_path;
  double train_fraction = 25.0 / 35.0;
  double validation_fraction = 5.0 / 35.0;
  std::vector<Strategy> strategies{Strategy::kSerOnly, Strategy::kMtl, Strategy::kDat, Strategy::kCgt};
  std::vector<std::uint64_t> seeds{1, 2, 3};
  std::string output_dir;
};

inline void from_json(const json& j, ExperimentConfig& c) {
  reject_unknown_keys(j,
                      {"model", "train", "data", "data_path", "train_fraction", "validation_fraction", "strategies", "seeds",
                       "output_dir"},
                      "experiment");
  if (j.contains("model")) c.model = j.at("model").get<ModelConfig>();
  if (j.contains("train")) c.train = j.at("train").get<TrainConfig>();
  if (j.contains("data")) c.data = j.at("data").get<SyntheticSpec>();
  c.data_path = j.value("data_path", c.data_path);
  c.train_fraction = j.value("train_fraction", c.train_fraction);
  c.validation_fraction = j.value("validation_fraction", c.validation_fraction);
  if (j.contains("strategies")) {
    c.strategies.clear();
    for (const auto& s : j.at("strategies")) c.strategies.push_back(parse_strategy(s.get<std::string>()));
  }
  if (j.contains("seeds")) c.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
  c.output_dir = j.value("output_dir", c.output_dir);
  if (c.strategies.empty() || c.seeds.empty()) throw ConfigError("experiment: strategies and seeds must be non-empty");
}

inline void to_json(json& j, const ExperimentConfig& c) {
  json strategies = json::array();
  for (auto s : c.strategies) strategies.push_back(strategy_name(s));
  j = json{{"model", c.model},
           {"train", c.train},
           {"data", c.data},
           {"data_path", c.data_path},
           {"train_fraction", c.train_fraction},
           {"validation_fraction", c.validation_fraction},
           {"strategies", strategies},
           {"seeds", c.seeds},
           {"output_dir", c.output_dir}};
}

struct RunResult {
  Strategy strategy = Strategy::kSerOnly;
  std::uint64_t seed = 0;
  double validation_accuracy = 0.0;
  double test_accuracy = 0.0;
  ProbeResult probe;
  std::size_t best_epoch = 0;
};

/// Dataset and split for one seed: the generator (unless a SERF file is
/// given) and the speaker shuffle both follow the seed, so every strategy
/// sees identical data per seed.
struct SeedData {
  Dataset dataset;
  SplitManifest split;
};

inline SeedData seed_data(const ExperimentConfig& cfg, std::uint64_t seed) {
  SeedData d;
  if (!cfg.data_path.empty()) {
    d.dataset = read_serf(cfg.data_path);
  } else {
    SyntheticSpec spec = cfg.data;
    spec.seed = derive_seed(seed, "data");
    d.dataset = generate_synthetic(spec, cfg.model.min_frames());
  }
  d.split = split_by_speaker(d.dataset, cfg.train_fraction, cfg.validation_fraction, seed);
  return d;
}

/// Head sizes follow the data: emotion classes from the dataset, speaker
/// classes from the training split.
inline ModelConfig fit_heads(ModelConfig m, const Dataset& ds, const SplitManifest& split) {
  m.feature_dim = ds.feature_dim;
  m.emotion_head.num_classes = ds.num_emotions();
  m.speaker_head.num_classes = training_speaker_index(ds, split).num_classes;
  return m;
}

inline RunResult run_cell(const ExperimentConfig& cfg, const SeedData& data, Strategy strategy, std::uint64_t seed,
                          const EpochCallback& on_epoch = {}) {
  TrainConfig tc = cfg.train;
  tc.strategy = strategy;
  tc.seed = seed;
  TrainResult tr = train(data.dataset, data.split, fit_heads(cfg.model, data.dataset, data.split), tc, on_epoch);
  RunResult r;
  r.strategy = strategy;
  r.seed = seed;
  r.best_epoch = tr.history.best_epoch;
  r.validation_accuracy = evaluate(tr.best, data.dataset, data.split.validation, tc.batch_size).accuracy;
  r.test_accuracy = evaluate(tr.best, data.dataset, data.split.test, tc.batch_size).accuracy;
  const auto emb = embed(tr.best, data.dataset, select(data.dataset, data.split.test), tc.batch_size);
  r.probe = speaker_probe(emb.records, derive_seed(seed, "probe"));
  return r;
}

using RunCallback = std::function<void(const RunResult&)>;

inline std::vector<RunResult> run_experiment(const ExperimentConfig& cfg, const RunCallback& on_run = {},
                                             const std::function<void(Strategy, std::uint64_t, const EpochRecord&)>&
                                                 on_epoch = {}) {
  std::vector<RunResult> results;
  for (std::uint64_t seed : cfg.seeds) {
    const SeedData data = seed_data(cfg, seed);
    for (Strategy s : cfg.strategies) {
      EpochCallback cb;
      if (on_epoch) cb = [&](const EpochRecord& e) { on_epoch(s, seed, e); };
      results.push_back(run_cell(cfg, data, s, seed, cb));
      if (on_run) on_run(results.back());
    }
  }
  return results;
}

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;  // sample standard deviation; 0 for a single value
};

inline MeanStd mean_std(const std::vector<double>& v) {
  MeanStd m;
  if (v.empty()) return m;
  for (double x : v) m.mean += x;
  m.mean /= static_cast<double>(v.size());
  if (v.size() > 1) {
    double ss = 0.0;
    for (double x : v) ss += (x - m.mean) * (x - m.mean);
    m.std = std::sqrt(ss / static_cast<double>(v.size() - 1));
  }
  return m;
}

struct StrategySummary {
  Strategy strategy = Strategy::kSerOnly;
  MeanStd validation_accuracy;
  MeanStd test_accuracy;
  MeanStd gap;  // validation - test
  MeanStd leakage_ratio;
};

inline std::vector<StrategySummary> summarize(const std::vector<RunResult>& runs, const std::vector<Strategy>& order) {
  std::vector<StrategySummary> out;
  for (Strategy s : order) {
    std::vector<double> val, test, gap, leak;
    for (const auto& r : runs) {
      if (r.strategy != s) continue;
      val.push_back(r.validation_accuracy);
      test.push_back(r.test_accuracy);
      gap.push_back(r.validation_accuracy - r.test_accuracy);
      leak.push_back(r.probe.leakage_ratio);
    }
    out.push_back({s, mean_std(val), mean_std(test), mean_std(gap), mean_std(leak)});
  }
  return out;
}

/// Accuracies in percent with one decimal, as "mean±std".
/// Header: strategy,val,test,gap,test_probe_leakage.
inline std::string summary_csv(const std::vector<StrategySummary>& rows) {
  auto cell = [](const MeanStd& m, double scale, int decimals) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*f±%.*f", decimals, m.mean * scale, decimals, m.std * scale);
    return std::string(buf);
  };
  std::ostringstream os;
  os << "strategy,val,test,gap,test_probe_leakage\n";
  for (const auto& r : rows) {
    os << strategy_name(r.strategy) << ',' << cell(r.validation_accuracy, 100.0, 1) << ','
       << cell(r.test_accuracy, 100.0, 1) << ',' << cell(r.gap, 100.0, 1) << ',' << cell(r.leakage_ratio, 1.0, 3)
       << '\n';
  }
  return os.str();
}

/// One row per (strategy, seed) with full precision.
/// Header: strategy,seed,val_acc,test_acc,probe_accuracy,chance_level,leakage_ratio,best_epoch.
inline std::string runs_csv(const std::vector<RunResult>& runs) {
  std::ostringstream os;
  os.precision(17);
  os << "strategy,seed,val_acc,test_acc,probe_accuracy,chance_level,leakage_ratio,best_epoch\n";
  for (const auto& r : runs) {
    os << strategy_name(r.strategy) << ',' << r.seed << ',' << r.validation_accuracy << ',' << r.test_accuracy << ','
       << r.probe.probe_accuracy << ',' << r.probe.chance_level << ',' << r.probe.leakage_ratio << ',' << r.best_epoch
       << '\n';
  }
  return os.str();
}

}  // namespace serinv
