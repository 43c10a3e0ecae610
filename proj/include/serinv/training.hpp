#pragma once

// Training strategies: emotion-only, multi-task, domain-adversarial (gradient
// reversal on the speaker branch) and cross-gradient training (inputs
// perturbed along speaker/emotion input gradients).

#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "serinv/autodiff.hpp"
#include "serinv/data.hpp"
#include "serinv/errors.hpp"
#include "serinv/eval.hpp"
#include "serinv/model.hpp"
#include "serinv/rng.hpp"

namespace serinv {

enum class Strategy { kSerOnly, kMtl, kDat, kCgt };

inline const char* strategy_name(Strategy s) {
  switch (s) {
    case Strategy::kSerOnly: return "SER_ONLY";
    case Strategy::kMtl: return "MTL";
    case Strategy::kDat: return "DAT";
    case Strategy::kCgt: return "CGT";
  }
  return "?";
}

inline Strategy parse_strategy(const std::string& s) {
  if (s == "SER_ONLY" || s == "ser_only") return Strategy::kSerOnly;
  if (s == "MTL" || s == "mtl") return Strategy::kMtl;
  if (s == "DAT" || s == "dat") return Strategy::kDat;
  if (s == "CGT" || s == "cgt") return Strategy::kCgt;
  throw ConfigError("unknown strategy '" + s + "' (expected SER_ONLY, MTL, DAT or CGT)");
}

enum class LambdaSchedule { kConstant, kRamp };

struct TrainConfig {
  Strategy strategy = Strategy::kSerOnly;
  double learning_rate = 1e-3;
  double momentum = 0.9;
  std::size_t epochs = 100;
  std::size_t batch_size = 32;
  double grl_lambda = 1.0;
  LambdaSchedule lambda_schedule = LambdaSchedule::kConstant;
  double cgt_epsilon = 1.0;
  double cgt_alpha = 0.5;
  std::optional<double> clip_norm = 5.0;
  std::uint64_t seed = 0;

  void validate() const {
    if (!(learning_rate > 0)) throw ConfigError("train config: learning_rate must be > 0");
    if (!(momentum >= 0 && momentum < 1)) throw ConfigError("train config: momentum must be in [0, 1)");
    if (!(grl_lambda >= 0)) throw ConfigError("train config: grl_lambda must be >= 0");
    if (!(cgt_epsilon >= 0)) throw ConfigError("train config: cgt_epsilon must be >= 0");
    if (!(cgt_alpha >= 0 && cgt_alpha <= 1)) throw ConfigError("train config: cgt_alpha must be in [0, 1]");
    if (clip_norm && !(*clip_norm > 0)) throw ConfigError("train config: clip_norm must be > 0");
    if (epochs < 1 || batch_size < 1) throw ConfigError("train config: epochs and batch_size must be >= 1");
  }

  /// GRL coefficient for a 0-based epoch; the ramp reaches grl_lambda after
  /// the first half of training.
  double lambda_at(std::size_t epoch) const {
    if (lambda_schedule == LambdaSchedule::kConstant) return grl_lambda;
    const double half = 0.5 * static_cast<double>(epochs);
    return grl_lambda * std::min(1.0, static_cast<double>(epoch) / half);
  }
};

inline void to_json(json& j, const TrainConfig& c) {
  j = json{{"strategy", strategy_name(c.strategy)},
           {"learning_rate", c.learning_rate},
           {"momentum", c.momentum},
           {"epochs", c.epochs},
           {"batch_size", c.batch_size},
           {"grl_lambda", c.grl_lambda},
           {"lambda_schedule", c.lambda_schedule == LambdaSchedule::kRamp ? "ramp" : "constant"},
           {"cgt_epsilon", c.cgt_epsilon},
           {"cgt_alpha", c.cgt_alpha},
           {"clip_norm", c.clip_norm ? json(*c.clip_norm) : json(nullptr)},
           {"seed", c.seed}};
}

inline void from_json(const json& j, TrainConfig& c) {
  reject_unknown_keys(j,
                      {"strategy", "learning_rate", "momentum", "epochs", "batch_size", "grl_lambda",
                       "lambda_schedule", "cgt_epsilon", "cgt_alpha", "clip_norm", "seed"},
                      "train");
  if (j.contains("strategy")) c.strategy = parse_strategy(j.at("strategy").get<std::string>());
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.momentum = j.value("momentum", c.momentum);
  c.epochs = j.value("epochs", c.epochs);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.grl_lambda = j.value("grl_lambda", c.grl_lambda);
  if (j.contains("lambda_schedule")) {
    const auto s = j.at("lambda_schedule").get<std::string>();
    if (s == "constant") c.lambda_schedule = LambdaSchedule::kConstant;
    else if (s == "ramp") c.lambda_schedule = LambdaSchedule::kRamp;
    else throw ConfigError("train: lambda_schedule must be 'constant' or 'ramp'");
  }
  c.cgt_epsilon = j.value("cgt_epsilon", c.cgt_epsilon);
  c.cgt_alpha = j.value("cgt_alpha", c.cgt_alpha);
  if (j.contains("clip_norm")) {
    if (j.at("clip_norm").is_null()) c.clip_norm.reset();
    else c.clip_norm = j.at("clip_norm").get<double>();
  }
  c.seed = j.value("seed", c.seed);
}

// ---------------------------------------------------------------------------
// Losses.

/// Emotion loss plus speaker loss on the GRL-routed logits. The embedding
/// network receives grad(L_emo) - lambda * grad(L_spk) while the speaker
/// head itself still descends L_spk.
inline Tensor loss_dat(const ForwardOutput& out, const SequenceBatch& batch) {
  if (!out.grl_lambda) throw ContractError("loss_dat: forward pass was run without a gradient reversal layer");
  if (!out.emotion_logits.defined() || !out.speaker_logits.defined()) {
    throw ContractError("loss_dat: both heads must be evaluated");
  }
  return ad::add(ad::cross_entropy(out.emotion_logits, batch.emotion_targets),
                 ad::cross_entropy(out.speaker_logits, batch.speaker_targets));
}

/// Features as a leaf that collects input gradients.
inline Tensor input_leaf(const Tensor& features) {
  return Tensor::from(features.shape(), features.values(), true);
}

struct Perturbation {
  Tensor speaker_guided;  // X + eps * grad_X L_spk
  Tensor emotion_guided;  // X + eps * grad_X L_emo
};

/// Perturbs features along input gradients read off an existing clean tape.
/// `x` must be the leaf that produced `out`. Padded cells never receive
/// gradient, so they stay unchanged.
inline Perturbation perturb_from_tape(const Tensor& x, const Tensor& emotion_loss, const Tensor& speaker_loss,
                                      double epsilon, std::span<const std::size_t> lengths) {
  const Tensor wrt[] = {x};
  const auto g_spk = ad::gradients(speaker_loss, wrt)[0];
  const auto g_emo = ad::gradients(emotion_loss, wrt)[0];
  std::vector<double> xs = x.values(), xy = x.values();
  const std::size_t ch = x.dim(1), len = x.dim(2);
  for (std::size_t b = 0; b < x.dim(0); ++b)
    for (std::size_t c = 0; c < ch; ++c)
      for (std::size_t t = 0; t < lengths[b]; ++t) {
        const std::size_t i = (b * ch + c) * len + t;
        xs[i] += epsilon * g_spk[i];
        xy[i] += epsilon * g_emo[i];
      }
  return {Tensor::from(x.shape(), std::move(xs)), Tensor::from(x.shape(), std::move(xy))};
}

/// X_s = X + eps * grad_X L_spk(X), X_y = X + eps * grad_X L_emo(X) at the
/// current parameters, with both heads attached and no gradient reversal.
inline Perturbation cgt_perturb(Model& model, const SequenceBatch& batch, double epsilon,
                                const ForwardOptions& options) {
  if (!(epsilon >= 0)) throw ContractError("cgt_perturb: epsilon must be >= 0");
  if (epsilon == 0.0) return {batch.features.detach(), batch.features.detach()};
  ForwardOptions opt = options;
  opt.grl_lambda.reset();
  opt.emotion_head = opt.speaker_head = true;
  const Tensor x = input_leaf(batch.features);
  const auto out = model.forward({x, batch.valid_lengths}, opt, batch.ids);
  const Tensor le = ad::cross_entropy(out.emotion_logits, batch.emotion_targets);
  const Tensor ls = ad::cross_entropy(out.speaker_logits, batch.speaker_targets);
  return perturb_from_tape(x, le, ls, epsilon, batch.valid_lengths);
}

/// L_emo(X_s) and L_spk(X_y) for fixed perturbed inputs. Both passes replay
/// the dropout masks of `snapshot` and leave the running batch-norm
/// statistics alone; only the head each term needs is evaluated.
inline std::pair<Tensor, Tensor> cgt_perturbed_losses(Model& model, const SequenceBatch& batch, const Perturbation& p,
                                                      const ForwardOptions& clean_options,
                                                      const DropoutStreams& snapshot) {
  ForwardOptions opt = clean_options;
  opt.grl_lambda.reset();
  opt.update_running_stats = false;
  DropoutStreams s_emo = snapshot;
  opt.dropout = clean_options.dropout ? &s_emo : nullptr;
  opt.emotion_head = true;
  opt.speaker_head = false;
  const auto out_s = model.forward({p.speaker_guided, batch.valid_lengths}, opt, batch.ids);
  DropoutStreams s_spk = snapshot;
  opt.dropout = clean_options.dropout ? &s_spk : nullptr;
  opt.emotion_head = false;
  opt.speaker_head = true;
  const auto out_y = model.forward({p.emotion_guided, batch.valid_lengths}, opt, batch.ids);
  return {ad::cross_entropy(out_s.emotion_logits, batch.emotion_targets),
          ad::cross_entropy(out_y.speaker_logits, batch.speaker_targets)};
}

/// (1 - a)(L_emo(X) + L_spk(X)) + a (L_emo(X_s) + L_spk(X_y)).
inline Tensor cgt_combine(const Tensor& le, const Tensor& ls, const Tensor& le_s, const Tensor& ls_y, double alpha) {
  return ad::add(ad::scale(ad::add(le, ls), 1.0 - alpha), ad::scale(ad::add(le_s, ls_y), alpha));
}

// ---------------------------------------------------------------------------
// Optimizer.

struct OptimizerState {
  std::vector<std::vector<double>> velocity;

  static OptimizerState for_parameters(std::span<const NamedTensor> params) {
    OptimizerState s;
    for (const auto& p : params) s.velocity.emplace_back(p.tensor.numel(), 0.0);
    return s;
  }
};

/// Global-norm clipping, then v <- mu v + g; p <- p - lr (g + mu v). Every
/// gradient buffer is zeroed afterwards. Returns the pre-clip global norm.
inline double sgd_nesterov_update(std::span<NamedTensor> params, OptimizerState& state, double learning_rate,
                                  double momentum, std::optional<double> clip_norm) {
  if (state.velocity.size() != params.size()) throw ContractError("optimizer state does not match parameters");
  double sq = 0.0;
  for (auto& p : params) {
    if (!p.tensor.has_grad()) continue;
    for (double g : p.tensor.grad()) {
      if (!std::isfinite(g)) throw NonFiniteError("non-finite gradient in parameter '" + p.name + "'");
      sq += g * g;
    }
  }
  const double norm = std::sqrt(sq);
  const double factor = (clip_norm && norm > *clip_norm) ? *clip_norm / norm : 1.0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& t = params[i].tensor;
    auto& v = state.velocity[i];
    if (v.size() != t.numel()) throw ContractError("optimizer state shape mismatch for '" + params[i].name + "'");
    const bool has = t.has_grad();
    auto data = t.data();
    for (std::size_t k = 0; k < data.size(); ++k) {
      const double g = has ? factor * t.grad()[k] : 0.0;
      v[k] = momentum * v[k] + g;
      data[k] -= learning_rate * (g + momentum * v[k]);
    }
    if (has) t.zero_grad();
  }
  return norm;
}

// ---------------------------------------------------------------------------
// Steps.

struct StepLosses {
  double emotion = 0.0;
  double speaker = std::numeric_limits<double>::quiet_NaN();
  std::size_t speaker_correct = 0;
};

namespace detail {
inline std::size_t count_correct(const Tensor& logits, std::span<const std::size_t> labels) {
  const std::size_t c = logits.dim(1);
  std::size_t ok = 0;
  for (std::size_t b = 0; b < labels.size(); ++b) {
    const double* row = logits.data().data() + b * c;
    if (static_cast<std::size_t>(std::max_element(row, row + c) - row) == labels[b]) ++ok;
  }
  return ok;
}
}  // namespace detail

/// Runs the strategy's forward/backward pass for one batch and leaves the
/// gradients in the parameters' grad buffers; no parameter changes.
inline StepLosses accumulate_gradients(Model& model, const SequenceBatch& batch, const TrainConfig& cfg,
                                       double grl_lambda, DropoutStreams& streams) {
  ForwardOptions opt;
  opt.training = true;
  opt.dropout = &streams;
  StepLosses losses;
  switch (cfg.strategy) {
    case Strategy::kSerOnly: {
      opt.speaker_head = false;
      const auto out = model.forward(batch.sequence(), opt, batch.ids);
      const Tensor le = ad::cross_entropy(out.emotion_logits, batch.emotion_targets);
      le.backward();
      losses.emotion = le.item();
      return losses;
    }
    case Strategy::kMtl:
    case Strategy::kDat: {
      if (cfg.strategy == Strategy::kDat) opt.grl_lambda = grl_lambda;
      const auto out = model.forward(batch.sequence(), opt, batch.ids);
      const Tensor le = ad::cross_entropy(out.emotion_logits, batch.emotion_targets);
      const Tensor ls = ad::cross_entropy(out.speaker_logits, batch.speaker_targets);
      const Tensor total = ad::add(le, ls);
      total.backward();
      losses.emotion = le.item();
      losses.speaker = ls.item();
      losses.speaker_correct = detail::count_correct(out.speaker_logits, batch.speaker_labels);
      return losses;
    }
    case Strategy::kCgt: {
      const double alpha = cfg.cgt_alpha;
      const double eps = cfg.cgt_epsilon;
      // With alpha == 0 the perturbed terms carry no weight, and with
      // eps == 0 they are the clean terms again; either way the objective is
      // exactly L_emo(X) + L_spk(X).
      const bool perturbed = alpha > 0.0 && eps > 0.0;
      const DropoutStreams snapshot = streams;
      const Tensor x = perturbed ? input_leaf(batch.features) : batch.features;
      const auto out = model.forward({x, batch.valid_lengths}, opt, batch.ids);
      const Tensor le = ad::cross_entropy(out.emotion_logits, batch.emotion_targets);
      const Tensor ls = ad::cross_entropy(out.speaker_logits, batch.speaker_targets);
      losses.emotion = le.item();
      losses.speaker = ls.item();
      losses.speaker_correct = detail::count_correct(out.speaker_logits, batch.speaker_labels);
      if (!perturbed) {
        ad::add(le, ls).backward();
        return losses;
      }
      const Perturbation p = perturb_from_tape(x, le, ls, eps, batch.valid_lengths);
      const auto [le_s, ls_y] = cgt_perturbed_losses(model, batch, p, opt, snapshot);
      const Tensor total = cgt_combine(le, ls, le_s, ls_y, alpha);
      total.backward();
      return losses;
    }
  }
  return losses;
}

/// One CGT update: combined objective
/// (1 - a)(L_emo(X) + L_spk(X)) + a (L_emo(X_s) + L_spk(X_y)), perturbations
/// held constant, followed by one optimizer step.
inline StepLosses train_step_cgt(Model& model, const SequenceBatch& batch, OptimizerState& state,
                                 const TrainConfig& cfg, DropoutStreams& streams) {
  TrainConfig c = cfg;
  c.strategy = Strategy::kCgt;
  const StepLosses l = accumulate_gradients(model, batch, c, 0.0, streams);
  auto params = model.parameters();
  sgd_nesterov_update(params, state, cfg.learning_rate, cfg.momentum, cfg.clip_norm);
  return l;
}

inline StepLosses train_step(Model& model, const SequenceBatch& batch, OptimizerState& state, const TrainConfig& cfg,
                             double grl_lambda, DropoutStreams& streams) {
  const StepLosses l = accumulate_gradients(model, batch, cfg, grl_lambda, streams);
  auto params = model.parameters();
  sgd_nesterov_update(params, state, cfg.learning_rate, cfg.momentum, cfg.clip_norm);
  return l;
}

// ---------------------------------------------------------------------------
// Epoch loop.

struct EpochRecord {
  std::size_t epoch = 0;
  double train_emotion_loss = 0.0;
  double train_speaker_loss = std::numeric_limits<double>::quiet_NaN();
  double validation_emotion_accuracy = 0.0;
  /// Speaker-head accuracy on the epoch's training batches (validation
  /// speakers have no speaker-head class).
  double train_speaker_accuracy = std::numeric_limits<double>::quiet_NaN();
  double grl_lambda = 0.0;
  double seconds = 0.0;
};

struct TrainHistory {
  std::vector<EpochRecord> epochs;
  std::size_t best_epoch = 0;

  /// Deterministic CSV (wall-clock time is not written).
  std::string to_csv() const {
    std::ostringstream os;
    os.precision(17);
    os << "epoch,train_emotion_loss,train_speaker_loss,val_emotion_acc,train_speaker_acc,grl_lambda,best\n";
    for (const auto& e : epochs) {
      os << e.epoch << ',' << e.train_emotion_loss << ',' << e.train_speaker_loss << ','
         << e.validation_emotion_accuracy << ',' << e.train_speaker_accuracy << ',' << e.grl_lambda << ','
         << (e.epoch == best_epoch ? 1 : 0) << '\n';
    }
    return os.str();
  }
};

struct TrainResult {
  Model best;
  Model last;
  TrainHistory history;
};

using EpochCallback = std::function<void(const EpochRecord&)>;

/// Speaker-head classes are the training speakers in dataset order.
inline SpeakerIndex training_speaker_index(const Dataset& ds, const SplitManifest& split) {
  return SpeakerIndex::for_speakers(ds.num_speakers(), split_speakers(ds, split).train);
}

/// Trains on split.train, selects the epoch with the best validation emotion
/// accuracy (earliest on ties).
inline TrainResult train(const Dataset& ds, const SplitManifest& split, ModelConfig model_config,
                         const TrainConfig& cfg, const EpochCallback& on_epoch = {}) {
  cfg.validate();
  const auto speakers = split_speakers(ds, split);
  if (!speakers.overlapping.empty()) throw SplitError(speakers.overlapping);
  if (split.train.empty() || split.validation.empty()) throw ValidationError("train: empty train or validation split");
  const SpeakerIndex spk_index = SpeakerIndex::for_speakers(ds.num_speakers(), speakers.train);
  if (model_config.feature_dim != ds.feature_dim) {
    throw ConfigError("model feature_dim " + std::to_string(model_config.feature_dim) + " does not match data (" +
                      std::to_string(ds.feature_dim) + ")");
  }
  if (model_config.emotion_head.num_classes != ds.num_emotions()) {
    throw ConfigError("emotion head has " + std::to_string(model_config.emotion_head.num_classes) +
                      " classes, data has " + std::to_string(ds.num_emotions()));
  }
  if (model_config.speaker_head.num_classes != spk_index.num_classes) {
    throw ConfigError("speaker head has " + std::to_string(model_config.speaker_head.num_classes) +
                      " classes, training split has " + std::to_string(spk_index.num_classes) + " speakers");
  }
  const auto train_utts = select(ds, split.train);
  const auto val_utts = select(ds, split.validation);
  const std::size_t need = model_config.min_frames();
  for (const auto* list : {&train_utts, &val_utts})
    for (const auto* u : *list)
      if (u->frames < need) throw TooShortError(u->id, need, u->frames);

  TrainResult result{Model::build(model_config, cfg.seed), Model{}, {}};
  Model& model = result.last;
  model = result.best.clone();
  auto params = model.parameters();
  OptimizerState opt_state = OptimizerState::for_parameters(params);
  DropoutStreams streams = DropoutStreams::from_seed(derive_seed(cfg.seed, "dropout"));
  const std::uint64_t shuffle_seed = derive_seed(cfg.seed, "shuffle");
  double best_acc = -1.0;

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto start = std::chrono::steady_clock::now();
    EpochRecord rec;
    rec.epoch = epoch;
    rec.grl_lambda = cfg.strategy == Strategy::kDat ? cfg.lambda_at(epoch) : 0.0;
    double emo_sum = 0.0, spk_sum = 0.0;
    std::size_t seen = 0, spk_correct = 0, batch_index = 0;
    for (const auto& plan : plan_batches(train_utts, cfg.batch_size, shuffle_seed, epoch)) {
      const SequenceBatch batch = make_batch(plan, ds.feature_dim, ds.num_emotions(), &spk_index);
      const StepLosses l = accumulate_gradients(model, batch, cfg, rec.grl_lambda, streams);
      if (!std::isfinite(l.emotion) || (cfg.strategy != Strategy::kSerOnly && !std::isfinite(l.speaker))) {
        throw NonFiniteError("non-finite loss at epoch " + std::to_string(epoch) + " batch " +
                             std::to_string(batch_index));
      }
      try {
        sgd_nesterov_update(params, opt_state, cfg.learning_rate, cfg.momentum, cfg.clip_norm);
      } catch (const NonFiniteError& e) {
        throw NonFiniteError(std::string(e.what()) + " at epoch " + std::to_string(epoch) + " batch " +
                             std::to_string(batch_index));
      }
      const auto n = static_cast<double>(batch.size());
      emo_sum += l.emotion * n;
      if (cfg.strategy != Strategy::kSerOnly) spk_sum += l.speaker * n;
      spk_correct += l.speaker_correct;
      seen += batch.size();
      ++batch_index;
    }
    rec.train_emotion_loss = emo_sum / static_cast<double>(seen);
    if (cfg.strategy != Strategy::kSerOnly) {
      rec.train_speaker_loss = spk_sum / static_cast<double>(seen);
      rec.train_speaker_accuracy = static_cast<double>(spk_correct) / static_cast<double>(seen);
    }
    rec.validation_emotion_accuracy = evaluate(model, val_utts, ds.num_emotions(), cfg.batch_size).accuracy;
    if (rec.validation_emotion_accuracy > best_acc) {
      best_acc = rec.validation_emotion_accuracy;
      result.best = model.clone();
      result.history.best_epoch = epoch;
    }
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    result.history.epochs.push_back(rec);
    if (on_epoch) on_epoch(rec);
  }
  return result;
}

}  // namespace serinv
