#pragma once

// The full gradient-check suite: every differentiable op and layer, then the
// composite training objectives on the tiny model.

#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "serinv/autodiff.hpp"
#include "serinv/data.hpp"
#include "serinv/gradcheck.hpp"
#include "serinv/layers.hpp"
#include "serinv/model.hpp"
#include "serinv/training.hpp"

namespace serinv {

using ad::GradCheckReport;

inline constexpr double kGradCheckTolerance = 1e-4;

/// A tiny model plus one padded training batch of mixed lengths, with the
/// dropout streams the step will consume.
struct TinyFixture {
  Model model;
  SequenceBatch batch;
  DropoutStreams streams;
};

inline TinyFixture make_tiny_fixture(std::uint64_t seed, std::size_t utterances_per_speaker = 3) {
  const ModelConfig cfg = ModelConfig::tiny();
  SyntheticSpec spec;
  spec.num_speakers = cfg.speaker_head.num_classes;
  spec.num_emotions = cfg.emotion_head.num_classes;
  spec.utterances_per_speaker = utterances_per_speaker;
  spec.feature_dim = cfg.feature_dim;
  spec.min_length = cfg.min_frames() + 1;
  spec.max_length = cfg.min_frames() + 6;
  spec.seed = seed;
  const Dataset ds = generate_synthetic(spec, cfg.min_frames());
  std::vector<const Utterance*> utts;
  for (const auto& u : ds.utterances) utts.push_back(&u);
  const auto index = SpeakerIndex::for_speakers(ds.num_speakers(), {0, 1});
  return {Model::build(cfg, seed), make_batch(utts, ds.feature_dim, ds.num_emotions(), &index),
          DropoutStreams::from_seed(derive_seed(seed, "dropout"))};
}

namespace detail {

inline std::vector<Tensor> tensors_of(const std::vector<NamedTensor>& named) {
  std::vector<Tensor> v;
  for (const auto& n : named) v.push_back(n.tensor);
  return v;
}

inline std::vector<std::vector<double>> grads_of(const std::vector<Tensor>& ts) {
  std::vector<std::vector<double>> g;
  for (const auto& t : ts) {
    if (t.has_grad()) g.emplace_back(t.grad().begin(), t.grad().end());
    else g.emplace_back(t.numel(), 0.0);
  }
  return g;
}

inline GradCheckReport merge(std::string name, const std::vector<ad::GradCheckReport>& parts) {
  GradCheckReport r;
  r.op_name = std::move(name);
  for (const auto& p : parts) {
    r.per_input_errors.insert(r.per_input_errors.end(), p.per_input_errors.begin(), p.per_input_errors.end());
    r.max_rel_error = std::max(r.max_rel_error, p.max_rel_error);
  }
  return r;
}

struct CleanLosses {
  Tensor emotion;
  Tensor speaker;
};

inline CleanLosses clean_losses(Model& model, const SequenceBatch& batch, const Tensor& x, DropoutStreams streams,
                                bool speaker_head) {
  ForwardOptions opt;
  opt.training = true;
  opt.update_running_stats = false;
  opt.dropout = &streams;
  opt.speaker_head = speaker_head;
  const auto out = model.forward({x, batch.valid_lengths}, opt, batch.ids);
  CleanLosses l{ad::cross_entropy(out.emotion_logits, batch.emotion_targets), {}};
  if (speaker_head) l.speaker = ad::cross_entropy(out.speaker_logits, batch.speaker_targets);
  return l;
}

}  // namespace detail

/// Gradient check of one training objective on the tiny fixture. The analytic
/// gradients are exactly what a training step accumulates. The numeric
/// reference differentiates the objective each parameter group descends:
/// L_emo - lambda L_spk for the embedding network under DAT (the gradient
/// reversal), the plain objective elsewhere; CGT perturbations are held fixed
/// at their values for the current parameters.
inline GradCheckReport check_strategy_gradients(const std::string& name, const TrainConfig& cfg, double grl_lambda,
                                                std::uint64_t seed) {
  constexpr int kMaxDraws = 32;
  for (int attempt = 0;; ++attempt) {
    TinyFixture fx = make_tiny_fixture(derive_seed(seed, static_cast<std::uint64_t>(attempt)));
    const DropoutStreams snapshot = fx.streams;
    Model& model = fx.model;
    const SequenceBatch& batch = fx.batch;

    std::optional<Perturbation> fixed;
    double kink = 0.0;
    if (cfg.strategy == Strategy::kCgt) {
      kink = ad::kink_distance([&] {
        const Tensor x = input_leaf(batch.features);
        const auto l = detail::clean_losses(model, batch, x, snapshot, true);
        fixed = perturb_from_tape(x, l.emotion, l.speaker, cfg.cgt_epsilon, batch.valid_lengths);
        ForwardOptions o;
        o.training = true;
        o.dropout = &fx.streams;
        cgt_perturbed_losses(model, batch, *fixed, o, snapshot);
      });
    } else {
      kink = ad::kink_distance(
          [&] { detail::clean_losses(model, batch, batch.features, snapshot, cfg.strategy != Strategy::kSerOnly); });
    }
    if (kink < ad::kKinkMargin && attempt + 1 < kMaxDraws) continue;

    model.zero_grad();
    DropoutStreams streams = snapshot;
    accumulate_gradients(model, batch, cfg, grl_lambda, streams);

    auto objective = [&](double speaker_weight) -> double {
      if (cfg.strategy == Strategy::kSerOnly) {
        return detail::clean_losses(model, batch, batch.features, snapshot, false).emotion.item();
      }
      const auto l = detail::clean_losses(model, batch, batch.features, snapshot, true);
      if (cfg.strategy != Strategy::kCgt) return l.emotion.item() + speaker_weight * l.speaker.item();
      ForwardOptions o;
      o.training = true;
      DropoutStreams unused = snapshot;
      o.dropout = &unused;
      const auto [le_s, ls_y] = cgt_perturbed_losses(model, batch, *fixed, o, snapshot);
      return cgt_combine(l.emotion, l.speaker, le_s, ls_y, cfg.cgt_alpha).item();
    };

    auto embed = detail::tensors_of(model.embedding_parameters());
    auto heads = detail::tensors_of(model.emotion_head_parameters());
    if (cfg.strategy != Strategy::kSerOnly) {
      const auto spk = detail::tensors_of(model.speaker_head_parameters());
      heads.insert(heads.end(), spk.begin(), spk.end());
    }
    const double embed_speaker_weight = cfg.strategy == Strategy::kDat ? -grl_lambda : 1.0;
    const auto embed_report = ad::compare_with_finite_differences(
        name, detail::grads_of(embed), [&] { return objective(embed_speaker_weight); }, embed);
    const auto head_report =
        ad::compare_with_finite_differences(name, detail::grads_of(heads), [&] { return objective(1.0); }, heads);
    model.zero_grad();
    return detail::merge(name, {embed_report, head_report});
  }
}

/// Every op, layer and composite objective. Reports are returned in a fixed
/// order; the suite passes when each max_rel_error is below
/// kGradCheckTolerance.
inline std::vector<GradCheckReport> run_gradcheck_suite(std::uint64_t seed = 0) {
  using ad::check_gradients;
  std::vector<GradCheckReport> out;
  auto op = [&](const std::string& name, const ad::OpUnderTest& f, std::vector<Shape> shapes) {
    out.push_back(check_gradients(name, f, shapes, derive_seed(seed, name)));
  };
  const std::vector<std::size_t> lengths{7, 5, 6};

  op("add", [](auto in) { return ad::add(in[0], in[1]); }, {{3, 4}, {3, 4}});
  op("sub", [](auto in) { return ad::sub(in[0], in[1]); }, {{3, 4}, {3, 4}});
  op("mul", [](auto in) { return ad::mul(in[0], in[1]); }, {{3, 4}, {3, 4}});
  op("scale", [](auto in) { return ad::scale(in[0], -1.7); }, {{5}});
  op("sum", [](auto in) { return ad::sum(in[0]); }, {{2, 3}});
  op("reshape", [](auto in) { return ad::reshape(in[0], {3, 2}); }, {{2, 3}});
  op("relu", [](auto in) { return ad::relu(in[0]); }, {{4, 5}});
  {
    // The reversal layer is identity forward, so its reference derivative is
    // that of -lambda * x rather than of its own output.
    constexpr double kLambda = 0.5;
    Rng rng = make_rng(seed, "gradcheck/grad_reverse");
    std::normal_distribution<double> normal(0.0, 1.0);
    std::vector<double> xv(12), wv(12);
    for (double& v : xv) v = normal(rng);
    for (double& v : wv) v = normal(rng);
    std::vector<Tensor> x{Tensor::from({3, 4}, xv, true)};
    const Tensor w = Tensor::from({3, 4}, wv);
    const Tensor loss = ad::sum(ad::mul(ad::grad_reverse(x[0], kLambda), w));
    const auto analytic = ad::gradients(loss, x);
    out.push_back(ad::compare_with_finite_differences(
        "grad_reverse", analytic, [&] { return ad::sum(ad::mul(ad::scale(x[0], -kLambda), w)).item(); }, x));
  }
  op("matmul", [](auto in) { return ad::matmul(in[0], in[1]); }, {{3, 4}, {4, 2}});
  op("linear", [](auto in) { return ad::linear(in[0], in[1], in[2]); }, {{3, 4}, {5, 4}, {5}});
  op("linear_no_bias", [](auto in) { return ad::linear(in[0], in[1], Tensor{}); }, {{3, 4}, {5, 4}});
  op("cross_entropy",
     [](auto in) {
       const std::size_t labels[] = {2, 0, 1};
       return ad::cross_entropy(in[0], ad::one_hot(labels, 4));
     },
     {{3, 4}});
  op("conv1d_dilated",
     [&](auto in) { return conv1d_dilated({in[0], lengths}, in[1], in[2], 2).values; }, {{3, 2, 7}, {3, 2, 3}, {3}});
  op("conv1d_pointwise", [&](auto in) { return conv1d_dilated({in[0], lengths}, in[1], Tensor{}, 1).values; },
     {{3, 2, 7}, {4, 2}});
  op("bilstm",
     [&](auto in) {
       return bilstm({in[0], lengths}, {in[1], in[2], in[3]}, {in[4], in[5], in[6]}, 2).values;
     },
     {{3, 3, 7}, {8, 3}, {8, 2}, {8}, {8, 3}, {8, 2}, {8}});
  op("stats_pool", [&](auto in) { return stats_pool(Sequence{in[0], lengths}); }, {{3, 2, 7}});
  op("batchnorm_sequence",
     [&](auto in) {
       BatchNorm1d bn = BatchNorm1d::make(2);
       bn.gamma = in[1];
       bn.beta = in[2];
       return batchnorm(Sequence{in[0], lengths}, bn, true, false).values;
     },
     {{3, 2, 7}, {2}, {2}});
  op("batchnorm_dense",
     [](auto in) {
       BatchNorm1d bn = BatchNorm1d::make(3);
       bn.gamma = in[1];
       bn.beta = in[2];
       return batchnorm(in[0], bn, true, false);
     },
     {{4, 3}, {3}, {3}});
  op("dropout",
     [&](auto in) {
       Rng rng = make_rng(seed, "gradcheck/dropout");
       return dropout(in[0], 0.5, true, rng);
     },
     {{4, 6}});
  op("relu_sequence", [&](auto in) { return relu(Sequence{in[0], lengths}).values; }, {{3, 2, 7}});

  TrainConfig cfg;
  cfg.strategy = Strategy::kSerOnly;
  out.push_back(check_strategy_gradients("loss_ser_only", cfg, 0.0, derive_seed(seed, "ser_only")));
  cfg.strategy = Strategy::kMtl;
  out.push_back(check_strategy_gradients("loss_mtl", cfg, 0.0, derive_seed(seed, "mtl")));
  cfg.strategy = Strategy::kDat;
  for (double lambda : {0.0, 0.5, 1.0}) {
    const std::string name = "loss_dat(lambda=" + std::to_string(lambda).substr(0, 3) + ")";
    out.push_back(check_strategy_gradients(name, cfg, lambda, derive_seed(seed, name)));
  }
  cfg.strategy = Strategy::kCgt;
  for (double alpha : {0.0, 0.5, 1.0}) {
    for (double eps : {0.0, 1.0}) {
      cfg.cgt_alpha = alpha;
      cfg.cgt_epsilon = eps;
      const std::string name =
          "loss_cgt(alpha=" + std::to_string(alpha).substr(0, 3) + ",eps=" + std::to_string(eps).substr(0, 3) + ")";
      out.push_back(check_strategy_gradients(name, cfg, 0.0, derive_seed(seed, name)));
    }
  }
  return out;
}

}  // namespace serinv
