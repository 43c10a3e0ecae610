#pragma once

// Independent reference computations shared by the unit tests and the
// acceptance runner. Each returns a max absolute deviation (or a bool for
// bit-level comparisons) against the library under test.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <random>
#include <string>
#include <vector>

#include "serinv/data.hpp"
#include "serinv/gradcheck_suite.hpp"
#include "serinv/layers.hpp"
#include "serinv/model.hpp"
#include "serinv/training.hpp"

namespace serinv::oracle {

using ad::Tensor;

inline double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) return std::numeric_limits<double>::infinity();
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

inline std::vector<double> flatten_grads(const std::vector<NamedTensor>& params) {
  std::vector<double> out;
  for (const auto& p : params) {
    if (p.tensor.has_grad()) out.insert(out.end(), p.tensor.grad().begin(), p.tensor.grad().end());
    else out.insert(out.end(), p.tensor.numel(), 0.0);
  }
  return out;
}

inline std::vector<double> flatten_values(const std::vector<NamedTensor>& params) {
  std::vector<double> out;
  for (const auto& p : params) out.insert(out.end(), p.tensor.values().begin(), p.tensor.values().end());
  return out;
}

inline std::vector<double> flatten(const std::vector<std::vector<double>>& parts) {
  std::vector<double> out;
  for (const auto& p : parts) out.insert(out.end(), p.begin(), p.end());
  return out;
}

inline bool bit_identical(const std::vector<double>& a, const std::vector<double>& b) {
  return a.size() == b.size() && (a.empty() || std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0);
}

// ---------------------------------------------------------------------------
// Convolution.

/// Nested-loop valid dilated convolution against conv1d_dilated on a random
/// ragged batch.
inline double conv_nested_loop_deviation(std::uint64_t seed) {
  const std::size_t cin = 3, cout = 4, k = 3, d = 2, len = 14;
  const std::vector<std::size_t> lengths{14, 10, 5};
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, 1.0);
  std::vector<double> x(lengths.size() * cin * len, 0.0), w(cout * cin * k), bias(cout);
  for (std::size_t b = 0; b < lengths.size(); ++b)
    for (std::size_t j = 0; j < cin; ++j)
      for (std::size_t t = 0; t < lengths[b]; ++t) x[(b * cin + j) * len + t] = n(rng);
  for (auto& v : w) v = n(rng);
  for (auto& v : bias) v = n(rng);
  const auto y = conv1d_dilated({Tensor::from({lengths.size(), cin, len}, x), lengths},
                                Tensor::from({cout, cin, k}, w), Tensor::from({cout}, bias), d);
  const std::size_t len_out = len - d * (k - 1);
  double dev = 0.0;
  for (std::size_t b = 0; b < lengths.size(); ++b)
    for (std::size_t c = 0; c < cout; ++c)
      for (std::size_t t = 0; t + d * (k - 1) < lengths[b]; ++t) {
        double s = bias[c];
        for (std::size_t j = 0; j < cin; ++j)
          for (std::size_t q = 0; q < k; ++q) s += w[(c * cin + j) * k + q] * x[(b * cin + j) * len + t + q * d];
        dev = std::max(dev, std::abs(s - y.values.values()[(b * cout + c) * len_out + t]));
      }
  return dev;
}

// ---------------------------------------------------------------------------
// Strategy gradients.

/// Emotion and speaker losses from one training-mode pass that replays
/// `snapshot`'s dropout masks and leaves running statistics untouched.
struct Losses {
  Tensor emotion;
  Tensor speaker;
};

inline Losses replay_losses(Model& model, const SequenceBatch& batch, const Tensor& x, const DropoutStreams& snapshot,
                            bool emotion_head, bool speaker_head) {
  DropoutStreams s = snapshot;
  ForwardOptions opt;
  opt.training = true;
  opt.update_running_stats = false;
  opt.dropout = &s;
  opt.emotion_head = emotion_head;
  opt.speaker_head = speaker_head;
  const auto out = model.forward({x, batch.valid_lengths}, opt, batch.ids);
  Losses l;
  if (emotion_head) l.emotion = ad::cross_entropy(out.emotion_logits, batch.emotion_targets);
  if (speaker_head) l.speaker = ad::cross_entropy(out.speaker_logits, batch.speaker_targets);
  return l;
}

/// DAT embedding-network gradient against g_emo - lambda * g_spk, the two
/// terms taken from separate forward/backward passes.
inline double dat_decomposition_deviation(std::uint64_t seed, double lambda) {
  TinyFixture fx = make_tiny_fixture(seed);
  const DropoutStreams snapshot = fx.streams;
  const auto embed = detail::tensors_of(fx.model.embedding_parameters());

  const auto g_emo = ad::gradients(replay_losses(fx.model, fx.batch, fx.batch.features, snapshot, true, false).emotion,
                                   embed);
  const auto g_spk = ad::gradients(replay_losses(fx.model, fx.batch, fx.batch.features, snapshot, false, true).speaker,
                                   embed);
  std::vector<double> expect = flatten(g_emo);
  const std::vector<double> spk = flatten(g_spk);
  for (std::size_t i = 0; i < expect.size(); ++i) expect[i] -= lambda * spk[i];

  fx.model.zero_grad();
  TrainConfig cfg;
  cfg.strategy = Strategy::kDat;
  DropoutStreams streams = snapshot;
  accumulate_gradients(fx.model, fx.batch, cfg, lambda, streams);
  return max_abs_diff(flatten_grads(fx.model.embedding_parameters()), expect);
}

/// One CGT step against the update assembled from the four separately
/// backpropagated terms (1-a) L_emo(X), (1-a) L_spk(X), a L_emo(X_s),
/// a L_spk(X_y), with the perturbations recomputed here from scratch.
inline double cgt_assembled_update_deviation(std::uint64_t seed, double alpha, double epsilon) {
  TinyFixture fx = make_tiny_fixture(seed);
  const DropoutStreams snapshot = fx.streams;
  Model& model = fx.model;
  const SequenceBatch& batch = fx.batch;
  const auto params = detail::tensors_of(model.parameters());
  const std::vector<double> before = flatten_values(model.parameters());

  // Input gradients of the clean losses.
  const Tensor x = Tensor::from(batch.features.shape(), batch.features.values(), true);
  const Losses clean_x = replay_losses(model, batch, x, snapshot, true, true);
  const Tensor xs[] = {x};
  const auto gx_spk = ad::gradients(clean_x.speaker, xs)[0];
  const auto gx_emo = ad::gradients(clean_x.emotion, xs)[0];
  std::vector<double> x_s = batch.features.values(), x_y = batch.features.values();
  const std::size_t ch = batch.features.dim(1), len = batch.features.dim(2);
  for (std::size_t b = 0; b < batch.size(); ++b)
    for (std::size_t c = 0; c < ch; ++c)
      for (std::size_t t = 0; t < batch.valid_lengths[b]; ++t) {
        const std::size_t i = (b * ch + c) * len + t;
        x_s[i] += epsilon * gx_spk[i];
        x_y[i] += epsilon * gx_emo[i];
      }
  const Tensor xs_t = Tensor::from(batch.features.shape(), x_s);
  const Tensor xy_t = Tensor::from(batch.features.shape(), x_y);

  const auto g1 = flatten(ad::gradients(replay_losses(model, batch, batch.features, snapshot, true, false).emotion, params));
  const auto g2 = flatten(ad::gradients(replay_losses(model, batch, batch.features, snapshot, false, true).speaker, params));
  const auto g3 = flatten(ad::gradients(replay_losses(model, batch, xs_t, snapshot, true, false).emotion, params));
  const auto g4 = flatten(ad::gradients(replay_losses(model, batch, xy_t, snapshot, false, true).speaker, params));

  TrainConfig cfg;
  cfg.strategy = Strategy::kCgt;
  cfg.cgt_alpha = alpha;
  cfg.cgt_epsilon = epsilon;
  cfg.clip_norm.reset();
  // First Nesterov step from zero velocity: p <- p - lr (1 + mu) g.
  std::vector<double> expect = before;
  for (std::size_t i = 0; i < expect.size(); ++i) {
    const double g = (1.0 - alpha) * (g1[i] + g2[i]) + alpha * (g3[i] + g4[i]);
    expect[i] -= cfg.learning_rate * (1.0 + cfg.momentum) * g;
  }

  model.zero_grad();
  auto named = model.parameters();
  OptimizerState state = OptimizerState::for_parameters(named);
  DropoutStreams streams = snapshot;
  train_step_cgt(model, batch, state, cfg, streams);
  // Compare updates rather than parameters so the tolerance is relative to
  // the step size.
  const auto after = flatten_values(model.parameters());
  double dev = 0.0;
  for (std::size_t i = 0; i < after.size(); ++i) {
    dev = std::max(dev, std::abs((after[i] - before[i]) - (expect[i] - before[i])) / cfg.learning_rate);
  }
  return dev;
}

/// Every model tensor (parameters and running statistics) after one step.
inline std::vector<double> state_after_step(TrainConfig cfg, std::uint64_t seed) {
  TinyFixture fx = make_tiny_fixture(seed);
  auto named = fx.model.parameters();
  OptimizerState state = OptimizerState::for_parameters(named);
  train_step(fx.model, fx.batch, state, cfg, cfg.grl_lambda, fx.streams);
  return flatten_values(fx.model.state());
}

/// CGT with the given alpha/epsilon against an MTL step, bit for bit.
inline bool cgt_degenerate_matches_mtl(std::uint64_t seed, double alpha, double epsilon) {
  TrainConfig mtl;
  mtl.strategy = Strategy::kMtl;
  TrainConfig cgt = mtl;
  cgt.strategy = Strategy::kCgt;
  cgt.cgt_alpha = alpha;
  cgt.cgt_epsilon = epsilon;
  return bit_identical(state_after_step(mtl, seed), state_after_step(cgt, seed));
}

// ---------------------------------------------------------------------------
// Datasets.

/// Random dataset for format fuzzing: arbitrary names (including empty and
/// non-ASCII bytes), arbitrary finite float bit patterns, occasional empty
/// utterance lists.
inline Dataset random_dataset(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  auto uniform = [&](std::size_t lo, std::size_t hi) {
    return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
  };
  auto name = [&](std::size_t max_len) {
    std::string s(uniform(0, max_len), '\0');
    for (char& c : s) c = static_cast<char>(uniform(0, 255));
    return s;
  };
  Dataset ds;
  ds.feature_dim = static_cast<std::uint32_t>(uniform(1, 8));
  const std::size_t emotions = uniform(1, 5), speakers = uniform(1, 6);
  for (std::size_t i = 0; i < emotions; ++i) ds.emotion_names.push_back(name(12));
  for (std::size_t i = 0; i < speakers; ++i) ds.speaker_ids.push_back(name(12));
  const std::size_t count = uniform(0, 4) == 0 ? 0 : uniform(1, 12);
  for (std::size_t i = 0; i < count; ++i) {
    Utterance u;
    u.id = "u" + std::to_string(i) + name(6);
    u.frames = static_cast<std::uint32_t>(uniform(1, 20));
    u.emotion = static_cast<std::uint32_t>(uniform(0, emotions - 1));
    u.speaker = static_cast<std::uint32_t>(uniform(0, speakers - 1));
    u.features.resize(static_cast<std::size_t>(u.frames) * ds.feature_dim);
    for (float& v : u.features) {
      do {
        v = std::bit_cast<float>(static_cast<std::uint32_t>(rng()));
      } while (!std::isfinite(v));
    }
    ds.utterances.push_back(std::move(u));
  }
  return ds;
}

inline bool datasets_bit_identical(const Dataset& a, const Dataset& b) {
  if (a.feature_dim != b.feature_dim || a.emotion_names != b.emotion_names || a.speaker_ids != b.speaker_ids ||
      a.utterances.size() != b.utterances.size()) {
    return false;
  }
  for (std::size_t i = 0; i < a.utterances.size(); ++i) {
    const auto &u = a.utterances[i], &v = b.utterances[i];
    if (u.id != v.id || u.frames != v.frames || u.emotion != v.emotion || u.speaker != v.speaker ||
        u.features.size() != v.features.size()) {
      return false;
    }
    if (!u.features.empty() &&
        std::memcmp(u.features.data(), v.features.data(), u.features.size() * sizeof(float)) != 0) {
      return false;
    }
  }
  return true;
}

/// 10 speakers, two per session tag "session1".."session5".
struct TaggedCorpus {
  Dataset dataset;
  SpeakerSessions sessions;
};

inline TaggedCorpus five_session_corpus(std::uint64_t seed) {
  SyntheticSpec spec;
  spec.num_speakers = 10;
  spec.utterances_per_speaker = 4;
  spec.feature_dim = 3;
  spec.min_length = 5;
  spec.max_length = 8;
  spec.seed = seed;
  TaggedCorpus c{generate_synthetic(spec), {}};
  for (std::size_t s = 0; s < 10; ++s) c.sessions[c.dataset.speaker_ids[s]] = "session" + std::to_string(s / 2 + 1);
  return c;
}

}  // namespace serinv::oracle
