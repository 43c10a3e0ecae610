#pragma once

// Sequence layers of the embedding network: dilated valid convolution (TDNN),
// bidirectional LSTM, masked batch normalization, inverted dropout and
// statistics pooling. Sequences are carried as B x C x L tensors plus the
// per-utterance valid length; every op leaves frames at or beyond the valid
// length exactly zero and never reads them.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "serinv/autodiff.hpp"
#include "serinv/errors.hpp"
#include "serinv/rng.hpp"

namespace serinv {

using ad::Shape;
using ad::Tensor;

/// A padded batch of sequences: values is B x C x L, lengths[b] <= L.
struct Sequence {
  Tensor values;
  std::vector<std::size_t> lengths;

  std::size_t batch() const { return values.dim(0); }
  std::size_t channels() const { return values.dim(1); }
  std::size_t max_length() const { return values.dim(2); }
};

/// Network input: features B x F x L_max plus one-hot targets.
struct SequenceBatch {
  Tensor features;
  std::vector<std::size_t> valid_lengths;
  Tensor emotion_targets;
  Tensor speaker_targets;
  std::vector<std::size_t> emotion_labels;
  std::vector<std::size_t> speaker_labels;
  std::vector<std::string> ids;

  std::size_t size() const { return valid_lengths.size(); }
  Sequence sequence() const { return {features, valid_lengths}; }
};

namespace detail {

using ad::ConstMapRM;
using ad::MapRM;
using ad::RowMajor;

inline void check_sequence(const Sequence& s, const char* op) {
  if (s.values.rank() != 3 || s.lengths.size() != s.values.dim(0)) {
    throw ContractError(std::string(op) + ": expected B x C x L values with B lengths, got " +
                        ad::shape_str(s.values.shape()));
  }
  for (std::size_t len : s.lengths) {
    if (len > s.values.dim(2)) throw ContractError(std::string(op) + ": valid length exceeds L");
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Dilated convolution.

/// Valid dilated convolution: out[c,t] = bias[c] + sum_{j,k} w[c,j,k] * in[j, t + k*D].
/// `weight` is C_out x C_in x K (a C_out x C_in matrix means K = 1); `bias`
/// may be undefined. Output valid lengths shrink by D * (K - 1).
inline Sequence conv1d_dilated(const Sequence& input, const Tensor& weight, const Tensor& bias,
                               std::size_t dilation) {
  using namespace detail;
  check_sequence(input, "conv1d_dilated");
  if (dilation < 1) throw ContractError("conv1d_dilated: dilation must be >= 1");
  if (weight.rank() != 2 && weight.rank() != 3) {
    throw ContractError("conv1d_dilated: weight must be C_out x C_in x K");
  }
  const std::size_t cout = weight.dim(0);
  const std::size_t cin = weight.dim(1);
  const std::size_t kernel = weight.rank() == 3 ? weight.dim(2) : 1;
  if (kernel < 1) throw ContractError("conv1d_dilated: kernel size must be >= 1");
  if (input.channels() != cin) {
    throw ContractError("conv1d_dilated: input has " + std::to_string(input.channels()) +
                        " channels, weight expects " + std::to_string(cin));
  }
  if (bias.defined() && bias.numel() != cout) throw ContractError("conv1d_dilated: bias size mismatch");
  const std::size_t span = dilation * (kernel - 1);
  const std::size_t batch = input.batch();
  const std::size_t len_in = input.max_length();
  for (std::size_t b = 0; b < batch; ++b) {
    if (input.lengths[b] <= span) {
      throw TooShortError("#" + std::to_string(b), span + 1, input.lengths[b]);
    }
  }
  const std::size_t len_out = len_in - span;
  std::vector<std::size_t> out_lengths(batch);
  for (std::size_t b = 0; b < batch; ++b) out_lengths[b] = input.lengths[b] - span;

  // Per-tap C_out x C_in slices of the kernel.
  std::vector<RowMajor> taps(kernel, RowMajor(cout, cin));
  for (std::size_t c = 0; c < cout; ++c)
    for (std::size_t j = 0; j < cin; ++j)
      for (std::size_t k = 0; k < kernel; ++k)
        taps[k](c, j) = weight.data()[(c * cin + j) * kernel + k];

  std::vector<double> out(batch * cout * len_out, 0.0);
  const auto ecin = static_cast<Eigen::Index>(cin);
  const auto ecout = static_cast<Eigen::Index>(cout);
  for (std::size_t b = 0; b < batch; ++b) {
    const auto n = static_cast<Eigen::Index>(out_lengths[b]);
    ConstMapRM x(input.values.data().data() + b * cin * len_in, ecin, static_cast<Eigen::Index>(len_in));
    MapRM y(out.data() + b * cout * len_out, ecout, static_cast<Eigen::Index>(len_out));
    auto valid = y.leftCols(n);
    for (std::size_t k = 0; k < kernel; ++k) {
      valid.noalias() += taps[k] * x.middleCols(static_cast<Eigen::Index>(k * dilation), n);
    }
    if (bias.defined()) {
      valid.colwise() += Eigen::Map<const Eigen::VectorXd>(bias.data().data(), ecout);
    }
  }

  Tensor result = ad::make_op(
      {batch, cout, len_out}, std::move(out), ad::OpKind::kConv1d, {&input.values, &weight, &bias},
      [taps = std::move(taps), out_lengths, batch, cin, cout, kernel, dilation, len_in,
       len_out](ad::Node& self) {
        const auto ecin = static_cast<Eigen::Index>(cin);
        const auto ecout = static_cast<Eigen::Index>(cout);
        ad::Node& xn = *self.inputs[0];
        ad::Node& wn = *self.inputs[1];
        double* gx = ad::grad_buffer(xn);
        double* gw = ad::grad_buffer(wn);
        double* gb = self.inputs[2] ? ad::grad_buffer(*self.inputs[2]) : nullptr;
        std::vector<RowMajor> dtaps;
        if (gw) dtaps.assign(kernel, RowMajor::Zero(ecout, ecin));
        for (std::size_t b = 0; b < batch; ++b) {
          const auto n = static_cast<Eigen::Index>(out_lengths[b]);
          ConstMapRM dy_full(self.grad.data() + b * cout * len_out, ecout, static_cast<Eigen::Index>(len_out));
          const auto dy = dy_full.leftCols(n);
          ConstMapRM x(xn.data.data() + b * cin * len_in, ecin, static_cast<Eigen::Index>(len_in));
          for (std::size_t k = 0; k < kernel; ++k) {
            const auto off = static_cast<Eigen::Index>(k * dilation);
            if (gw) dtaps[k].noalias() += dy * x.middleCols(off, n).transpose();
            if (gx) {
              MapRM dx(gx + b * cin * len_in, ecin, static_cast<Eigen::Index>(len_in));
              dx.middleCols(off, n).noalias() += taps[k].transpose() * dy;
            }
          }
          if (gb) Eigen::Map<Eigen::VectorXd>(gb, ecout) += dy.rowwise().sum();
        }
        if (gw) {
          for (std::size_t c = 0; c < cout; ++c)
            for (std::size_t j = 0; j < cin; ++j)
              for (std::size_t k = 0; k < kernel; ++k)
                gw[(c * cin + j) * kernel + k] += dtaps[k](static_cast<Eigen::Index>(c), static_cast<Eigen::Index>(j));
        }
      });
  return {std::move(result), std::move(out_lengths)};
}

// ---------------------------------------------------------------------------
// Bidirectional LSTM.

struct LstmDirection {
  Tensor input_weights;      // 4H x F, gate blocks (input, forget, candidate, output)
  Tensor recurrent_weights;  // 4H x H
  Tensor bias;               // 4H
};

namespace detail {

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

struct LstmTrace {
  Eigen::MatrixXd gates;  // 4H x n activations (i, f, g, o)
  Eigen::MatrixXd cell;   // H x n
  Eigen::MatrixXd cell_tanh;
  Eigen::MatrixXd hidden;
};

// Runs one direction over the first n columns of x (F x n view); writes h_t
// into rows [row0, row0 + H) of y.
template <typename XBlock>
LstmTrace lstm_direction_forward(const XBlock& x, const LstmDirection& p, std::size_t hidden, bool reverse,
                                 MapRM& y, Eigen::Index row0) {
  const auto h = static_cast<Eigen::Index>(hidden);
  const auto f = x.rows();
  const auto n = x.cols();
  ConstMapRM wx(p.input_weights.data().data(), 4 * h, f);
  ConstMapRM wh(p.recurrent_weights.data().data(), 4 * h, h);
  Eigen::Map<const Eigen::VectorXd> bias(p.bias.data().data(), 4 * h);
  LstmTrace tr;
  Eigen::MatrixXd pre = wx * x;
  pre.colwise() += bias;
  tr.gates.resize(4 * h, n);
  tr.cell.resize(h, n);
  tr.cell_tanh.resize(h, n);
  tr.hidden.resize(h, n);
  Eigen::VectorXd h_prev = Eigen::VectorXd::Zero(h);
  Eigen::VectorXd c_prev = Eigen::VectorXd::Zero(h);
  Eigen::VectorXd a(4 * h);
  for (Eigen::Index s = 0; s < n; ++s) {
    const Eigen::Index t = reverse ? n - 1 - s : s;
    a.noalias() = pre.col(t) + wh * h_prev;
    auto g = tr.gates.col(t);
    for (Eigen::Index j = 0; j < h; ++j) {
      g(j) = sigmoid(a(j));
      g(h + j) = sigmoid(a(h + j));
      g(2 * h + j) = std::tanh(a(2 * h + j));
      g(3 * h + j) = sigmoid(a(3 * h + j));
      const double c = g(h + j) * c_prev(j) + g(j) * g(2 * h + j);
      const double tc = std::tanh(c);
      tr.cell(j, t) = c;
      tr.cell_tanh(j, t) = tc;
      tr.hidden(j, t) = g(3 * h + j) * tc;
    }
    h_prev = tr.hidden.col(t);
    c_prev = tr.cell.col(t);
    y.block(row0, t, h, 1) = tr.hidden.col(t);
  }
  return tr;
}

struct LstmGrads {
  double* input_weights;
  double* recurrent_weights;
  double* bias;
};

// Backpropagation through time for one direction of one utterance.
template <typename XBlock, typename DyBlock>
void lstm_direction_backward(const XBlock& x, const DyBlock& dy, const LstmTrace& tr, const LstmDirection& p,
                             std::size_t hidden, bool reverse, const LstmGrads& g, MapRM* dx) {
  const auto h = static_cast<Eigen::Index>(hidden);
  const auto f = x.rows();
  const auto n = x.cols();
  ConstMapRM wx(p.input_weights.data().data(), 4 * h, f);
  ConstMapRM wh(p.recurrent_weights.data().data(), 4 * h, h);
  Eigen::MatrixXd da(4 * h, n);
  Eigen::MatrixXd h_prev_all = Eigen::MatrixXd::Zero(h, n);
  Eigen::VectorXd dh_next = Eigen::VectorXd::Zero(h);
  Eigen::VectorXd dc_next = Eigen::VectorXd::Zero(h);
  for (Eigen::Index s = n - 1; s >= 0; --s) {
    const Eigen::Index t = reverse ? n - 1 - s : s;
    const bool first = s == 0;
    const Eigen::Index t_prev = reverse ? t + 1 : t - 1;
    const auto gate = tr.gates.col(t);
    for (Eigen::Index j = 0; j < h; ++j) {
      const double i_g = gate(j), f_g = gate(h + j), c_g = gate(2 * h + j), o_g = gate(3 * h + j);
      const double tc = tr.cell_tanh(j, t);
      const double c_prev = first ? 0.0 : tr.cell(j, t_prev);
      const double dh = dy(j, t) + dh_next(j);
      const double d_o = dh * tc;
      const double dc = dc_next(j) + dh * o_g * (1.0 - tc * tc);
      dc_next(j) = dc * f_g;
      da(j, t) = dc * c_g * i_g * (1.0 - i_g);
      da(h + j, t) = dc * c_prev * f_g * (1.0 - f_g);
      da(2 * h + j, t) = dc * i_g * (1.0 - c_g * c_g);
      da(3 * h + j, t) = d_o * o_g * (1.0 - o_g);
    }
    if (!first) h_prev_all.col(t) = tr.hidden.col(t_prev);
    dh_next.noalias() = wh.transpose() * da.col(t);
  }
  if (g.input_weights) MapRM(g.input_weights, 4 * h, f).noalias() += da * x.transpose();
  if (g.recurrent_weights) MapRM(g.recurrent_weights, 4 * h, h).noalias() += da * h_prev_all.transpose();
  if (g.bias) Eigen::Map<Eigen::VectorXd>(g.bias, 4 * h) += da.rowwise().sum();
  if (dx) dx->leftCols(n).noalias() += wx.transpose() * da;
}

}  // namespace detail

/// Single-layer bidirectional LSTM. Output frame t is [h_fwd(t); h_bwd(t)],
/// so the output has 2H channels. The backward direction starts at the last
/// valid frame of each utterance.
inline Sequence bilstm(const Sequence& input, const LstmDirection& fwd, const LstmDirection& bwd,
                       std::size_t hidden) {
  using namespace detail;
  check_sequence(input, "bilstm");
  const std::size_t feat = input.channels();
  for (const LstmDirection* d : {&fwd, &bwd}) {
    if (d->input_weights.numel() != 4 * hidden * feat || d->recurrent_weights.numel() != 4 * hidden * hidden ||
        d->bias.numel() != 4 * hidden) {
      throw ContractError("bilstm: parameter shapes do not match H=" + std::to_string(hidden) +
                          ", F=" + std::to_string(feat));
    }
  }
  const std::size_t batch = input.batch();
  const std::size_t len = input.max_length();
  const auto ef = static_cast<Eigen::Index>(feat);
  const auto eh = static_cast<Eigen::Index>(hidden);
  std::vector<double> out(batch * 2 * hidden * len, 0.0);
  std::vector<std::array<LstmTrace, 2>> traces(batch);
  for (std::size_t b = 0; b < batch; ++b) {
    const auto n = static_cast<Eigen::Index>(input.lengths[b]);
    if (n == 0) continue;
    ConstMapRM x(input.values.data().data() + b * feat * len, ef, static_cast<Eigen::Index>(len));
    MapRM y(out.data() + b * 2 * hidden * len, 2 * eh, static_cast<Eigen::Index>(len));
    traces[b][0] = lstm_direction_forward(x.leftCols(n), fwd, hidden, false, y, 0);
    traces[b][1] = lstm_direction_forward(x.leftCols(n), bwd, hidden, true, y, eh);
  }
  const std::vector<std::size_t> lengths = input.lengths;
  Tensor result = ad::make_op(
      {batch, 2 * hidden, len}, std::move(out), ad::OpKind::kBiLstm,
      {&input.values, &fwd.input_weights, &fwd.recurrent_weights, &fwd.bias, &bwd.input_weights,
       &bwd.recurrent_weights, &bwd.bias},
      [traces = std::move(traces), lengths, fwd, bwd, batch, feat, hidden, len](ad::Node& self) {
        const auto ef = static_cast<Eigen::Index>(feat);
        const auto eh = static_cast<Eigen::Index>(hidden);
        ad::Node& xn = *self.inputs[0];
        double* gx = ad::grad_buffer(xn);
        const LstmGrads gf{ad::grad_buffer(*self.inputs[1]), ad::grad_buffer(*self.inputs[2]),
                           ad::grad_buffer(*self.inputs[3])};
        const LstmGrads gbk{ad::grad_buffer(*self.inputs[4]), ad::grad_buffer(*self.inputs[5]),
                            ad::grad_buffer(*self.inputs[6])};
        for (std::size_t b = 0; b < batch; ++b) {
          const auto n = static_cast<Eigen::Index>(lengths[b]);
          if (n == 0) continue;
          ConstMapRM x(xn.data.data() + b * feat * len, ef, static_cast<Eigen::Index>(len));
          ConstMapRM dy(self.grad.data() + b * 2 * hidden * len, 2 * eh, static_cast<Eigen::Index>(len));
          MapRM dx(gx ? gx + b * feat * len : nullptr, ef, static_cast<Eigen::Index>(len));
          MapRM* dx_ptr = gx ? &dx : nullptr;
          lstm_direction_backward(x.leftCols(n), dy.topRows(eh), traces[b][0], fwd, hidden, false, gf, dx_ptr);
          lstm_direction_backward(x.leftCols(n), dy.bottomRows(eh), traces[b][1], bwd, hidden, true, gbk, dx_ptr);
        }
      });
  return {std::move(result), input.lengths};
}

// ---------------------------------------------------------------------------
// Statistics pooling.

inline constexpr double kStatsPoolEps = 1e-5;

/// B x F x L -> B x 2F: per-channel mean over the valid frames, then
/// sqrt(population variance + 1e-5).
inline Tensor stats_pool(const Sequence& input) {
  detail::check_sequence(input, "stats_pool");
  const std::size_t batch = input.batch();
  const std::size_t feat = input.channels();
  const std::size_t len = input.max_length();
  std::vector<double> out(batch * 2 * feat);
  for (std::size_t b = 0; b < batch; ++b) {
    const std::size_t n = input.lengths[b];
    if (n == 0) throw ContractError("stats_pool: valid_length must be >= 1");
    for (std::size_t c = 0; c < feat; ++c) {
      const double* row = input.values.data().data() + (b * feat + c) * len;
      double mean = 0.0;
      for (std::size_t t = 0; t < n; ++t) mean += row[t];
      mean /= static_cast<double>(n);
      double var = 0.0;
      for (std::size_t t = 0; t < n; ++t) var += (row[t] - mean) * (row[t] - mean);
      var /= static_cast<double>(n);
      out[b * 2 * feat + c] = mean;
      out[b * 2 * feat + feat + c] = std::sqrt(var + kStatsPoolEps);
    }
  }
  const std::vector<std::size_t> lengths = input.lengths;
  return ad::make_op({batch, 2 * feat}, out, ad::OpKind::kStatsPool, {&input.values},
                     [lengths, batch, feat, len, pooled = out](ad::Node& self) {
                       ad::Node& xn = *self.inputs[0];
                       double* gx = ad::grad_buffer(xn);
                       if (!gx) return;
                       for (std::size_t b = 0; b < batch; ++b) {
                         const std::size_t n = lengths[b];
                         const double inv_n = 1.0 / static_cast<double>(n);
                         for (std::size_t c = 0; c < feat; ++c) {
                           const double mean = pooled[b * 2 * feat + c];
                           const double sd = pooled[b * 2 * feat + feat + c];
                           const double dmean = self.grad[b * 2 * feat + c] * inv_n;
                           const double dsd = self.grad[b * 2 * feat + feat + c] * inv_n / sd;
                           const double* row = xn.data.data() + (b * feat + c) * len;
                           double* grow = gx + (b * feat + c) * len;
                           for (std::size_t t = 0; t < n; ++t) grow[t] += dmean + dsd * (row[t] - mean);
                         }
                       }
                     });
}

/// Single-utterance form: F x L matrix -> 2F vector.
inline Tensor stats_pool(const Tensor& seq, std::size_t valid_length) {
  if (seq.rank() != 2) throw ContractError("stats_pool: expected an F x L matrix");
  if (valid_length == 0) throw ContractError("stats_pool: valid_length must be >= 1");
  if (valid_length > seq.dim(1)) throw ContractError("stats_pool: valid_length exceeds sequence length");
  Tensor batched = Tensor::from({1, seq.dim(0), seq.dim(1)}, seq.values());
  Tensor pooled = stats_pool(Sequence{batched, {valid_length}});
  return Tensor::from({2 * seq.dim(0)}, pooled.values());
}

// ---------------------------------------------------------------------------
// Batch normalization.

struct BatchNorm1d {
  Tensor gamma;
  Tensor beta;
  Tensor running_mean;
  Tensor running_var;
  double momentum = 0.1;
  double eps = 1e-5;

  static BatchNorm1d make(std::size_t channels) {
    BatchNorm1d bn;
    bn.gamma = Tensor::from({channels}, std::vector<double>(channels, 1.0), true);
    bn.beta = Tensor::zeros({channels}, true);
    bn.running_mean = Tensor::zeros({channels});
    bn.running_var = Tensor::from({channels}, std::vector<double>(channels, 1.0));
    return bn;
  }

  std::size_t channels() const { return gamma.numel(); }
};

/// Per-channel normalization over batch and valid frames. In training mode
/// batch statistics are used (and folded into the running estimates when
/// `update_running` is set); in eval mode only the running estimates are.
inline Sequence batchnorm(const Sequence& input, BatchNorm1d& bn, bool training, bool update_running = true) {
  detail::check_sequence(input, "batchnorm");
  const std::size_t batch = input.batch();
  const std::size_t ch = input.channels();
  const std::size_t len = input.max_length();
  if (bn.channels() != ch) throw ContractError("batchnorm: channel count mismatch");
  std::size_t count = 0;
  for (std::size_t n : input.lengths) count += n;
  if (training && count < 2) {
    throw ContractError("batchnorm: training mode needs at least 2 samples per channel, got " +
                        std::to_string(count));
  }
  const auto& x = input.values.values();
  std::vector<double> mean(ch, 0.0), inv_std(ch, 0.0);
  if (training) {
    std::vector<double> var(ch, 0.0);
    for (std::size_t c = 0; c < ch; ++c) {
      double s = 0.0;
      for (std::size_t b = 0; b < batch; ++b) {
        const double* row = x.data() + (b * ch + c) * len;
        for (std::size_t t = 0; t < input.lengths[b]; ++t) s += row[t];
      }
      mean[c] = s / static_cast<double>(count);
      double v = 0.0;
      for (std::size_t b = 0; b < batch; ++b) {
        const double* row = x.data() + (b * ch + c) * len;
        for (std::size_t t = 0; t < input.lengths[b]; ++t) v += (row[t] - mean[c]) * (row[t] - mean[c]);
      }
      var[c] = v / static_cast<double>(count);
      inv_std[c] = 1.0 / std::sqrt(var[c] + bn.eps);
    }
    if (update_running) {
      const double unbias = static_cast<double>(count) / static_cast<double>(count - 1);
      for (std::size_t c = 0; c < ch; ++c) {
        bn.running_mean.data()[c] = (1.0 - bn.momentum) * bn.running_mean.data()[c] + bn.momentum * mean[c];
        bn.running_var.data()[c] = (1.0 - bn.momentum) * bn.running_var.data()[c] + bn.momentum * var[c] * unbias;
      }
    }
  } else {
    for (std::size_t c = 0; c < ch; ++c) {
      mean[c] = bn.running_mean.data()[c];
      inv_std[c] = 1.0 / std::sqrt(bn.running_var.data()[c] + bn.eps);
    }
  }
  std::vector<double> normalized(x.size(), 0.0);
  std::vector<double> out(x.size(), 0.0);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t c = 0; c < ch; ++c) {
      const std::size_t base = (b * ch + c) * len;
      const double g = bn.gamma.data()[c];
      const double be = bn.beta.data()[c];
      for (std::size_t t = 0; t < input.lengths[b]; ++t) {
        const double xh = (x[base + t] - mean[c]) * inv_std[c];
        normalized[base + t] = xh;
        out[base + t] = g * xh + be;
      }
    }
  }
  const std::vector<std::size_t> lengths = input.lengths;
  Tensor result = ad::make_op(
      input.values.shape(), std::move(out), ad::OpKind::kBatchNorm, {&input.values, &bn.gamma, &bn.beta},
      [normalized = std::move(normalized), inv_std = std::move(inv_std), lengths, batch, ch, len, count,
       training](ad::Node& self) {
        double* gx = ad::grad_buffer(*self.inputs[0]);
        double* gg = ad::grad_buffer(*self.inputs[1]);
        double* gb = ad::grad_buffer(*self.inputs[2]);
        const auto& gamma = self.inputs[1]->data;
        for (std::size_t c = 0; c < ch; ++c) {
          double sum_dy = 0.0, sum_dy_xh = 0.0;
          for (std::size_t b = 0; b < batch; ++b) {
            const std::size_t base = (b * ch + c) * len;
            for (std::size_t t = 0; t < lengths[b]; ++t) {
              sum_dy += self.grad[base + t];
              sum_dy_xh += self.grad[base + t] * normalized[base + t];
            }
          }
          if (gg) gg[c] += sum_dy_xh;
          if (gb) gb[c] += sum_dy;
          if (!gx) continue;
          const double k = gamma[c] * inv_std[c];
          const double mean_dy = training ? sum_dy / static_cast<double>(count) : 0.0;
          const double mean_dy_xh = training ? sum_dy_xh / static_cast<double>(count) : 0.0;
          for (std::size_t b = 0; b < batch; ++b) {
            const std::size_t base = (b * ch + c) * len;
            for (std::size_t t = 0; t < lengths[b]; ++t) {
              gx[base + t] += k * (self.grad[base + t] - mean_dy - normalized[base + t] * mean_dy_xh);
            }
          }
        }
      });
  return {std::move(result), input.lengths};
}

/// Dense form for B x C activations.
inline Tensor batchnorm(const Tensor& input, BatchNorm1d& bn, bool training, bool update_running = true) {
  if (input.rank() != 2) throw ContractError("batchnorm: expected B x C input");
  const std::size_t batch = input.dim(0);
  Sequence seq{ad::reshape(input, {batch, input.dim(1), 1}), std::vector<std::size_t>(batch, 1)};
  return ad::reshape(batchnorm(seq, bn, training, update_running).values, input.shape());
}

// ---------------------------------------------------------------------------
// Dropout.

/// Inverted dropout: in training each element survives with probability
/// keep_prob and is scaled by 1 / keep_prob. Identity otherwise.
inline Tensor dropout(const Tensor& input, double keep_prob, bool training, Rng& rng) {
  if (!(keep_prob > 0.0 && keep_prob <= 1.0)) throw ContractError("dropout: keep_prob must be in (0, 1]");
  if (!training || keep_prob == 1.0) return input;
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const double scale = 1.0 / keep_prob;
  std::vector<double> mask(input.numel());
  std::vector<double> out(input.numel());
  for (std::size_t i = 0; i < mask.size(); ++i) {
    mask[i] = unit(rng) < keep_prob ? scale : 0.0;
    out[i] = input.data()[i] * mask[i];
  }
  return ad::make_op(input.shape(), std::move(out), ad::OpKind::kDropout, {&input},
                     [mask = std::move(mask)](ad::Node& self) {
                       if (double* g = ad::grad_buffer(*self.inputs[0])) {
                         for (std::size_t i = 0; i < mask.size(); ++i) g[i] += mask[i] * self.grad[i];
                       }
                     });
}

inline Sequence dropout(const Sequence& input, double keep_prob, bool training, Rng& rng) {
  return {dropout(input.values, keep_prob, training, rng), input.lengths};
}

inline Sequence relu(const Sequence& input) {
  // Only valid frames are reported to the kink monitor; padded zeros are
  // not sample points.
  auto& monitor = ad::kink_monitor();
  const bool was_active = monitor.active;
  if (was_active) {
    const std::size_t ch = input.channels(), len = input.max_length();
    for (std::size_t b = 0; b < input.batch(); ++b)
      for (std::size_t c = 0; c < ch; ++c)
        ad::report_kink_distance(input.values.data().subspan((b * ch + c) * len, input.lengths[b]));
    monitor.active = false;
  }
  Sequence out{ad::relu(input.values), input.lengths};
  monitor.active = was_active;
  return out;
}

// ---------------------------------------------------------------------------
// Layer parameter bundles.

/// Regularization placement: affine -> [batch norm] -> ReLU -> [dropout].
struct BlockFlags {
  bool batch_norm = true;
  bool relu = true;
  bool dropout = false;
};

struct TdnnLayer {
  Tensor kernels;  // C_out x C_in x K
  Tensor bias;     // C_out; undefined when followed by batch norm
  std::size_t dilation = 1;
  BlockFlags flags;
  BatchNorm1d bn;

  std::size_t out_channels() const { return kernels.dim(0); }
  std::size_t in_channels() const { return kernels.dim(1); }
  std::size_t kernel_size() const { return kernels.dim(2); }
  std::size_t context() const { return dilation * (kernel_size() - 1); }

  static TdnnLayer make(std::size_t cin, std::size_t cout, std::size_t kernel, std::size_t dilation,
                        BlockFlags flags, Rng& rng) {
    if (kernel < 1 || dilation < 1 || cin < 1 || cout < 1) {
      throw ContractError("TdnnLayer: kernel, dilation and channel counts must be positive");
    }
    TdnnLayer l;
    const double limit = std::sqrt(6.0 / static_cast<double>((cin + cout) * kernel));
    std::uniform_real_distribution<double> u(-limit, limit);
    std::vector<double> w(cout * cin * kernel);
    for (double& v : w) v = u(rng);
    l.kernels = Tensor::from({cout, cin, kernel}, std::move(w), true);
    if (!flags.batch_norm) l.bias = Tensor::zeros({cout}, true);
    l.dilation = dilation;
    l.flags = flags;
    if (flags.batch_norm) l.bn = BatchNorm1d::make(cout);
    return l;
  }
};

struct BiLstmLayer {
  LstmDirection forward;
  LstmDirection backward;
  std::size_t hidden = 0;

  std::size_t output_dim() const { return 2 * hidden; }

  static BiLstmLayer make(std::size_t input_dim, std::size_t hidden, Rng& rng) {
    if (hidden < 1 || input_dim < 1) throw ContractError("BiLstmLayer: sizes must be positive");
    BiLstmLayer l;
    l.hidden = hidden;
    const double limit = 1.0 / std::sqrt(static_cast<double>(hidden));
    std::uniform_real_distribution<double> u(-limit, limit);
    auto draw = [&](Shape s) {
      std::vector<double> v(ad::numel_of(s));
      for (double& x : v) x = u(rng);
      return Tensor::from(std::move(s), std::move(v), true);
    };
    for (LstmDirection* d : {&l.forward, &l.backward}) {
      d->input_weights = draw({4 * hidden, input_dim});
      d->recurrent_weights = draw({4 * hidden, hidden});
      d->bias = draw({4 * hidden});
      for (std::size_t j = hidden; j < 2 * hidden; ++j) d->bias.data()[j] = 1.0;
    }
    return l;
  }
};

struct DenseLayer {
  Tensor weights;  // D_out x D_in
  Tensor bias;     // D_out; undefined when followed by batch norm
  BlockFlags flags;
  BatchNorm1d bn;

  std::size_t in_dim() const { return weights.dim(1); }
  std::size_t out_dim() const { return weights.dim(0); }

  static DenseLayer make(std::size_t din, std::size_t dout, BlockFlags flags, Rng& rng) {
    if (din < 1 || dout < 1) throw ContractError("DenseLayer: sizes must be positive");
    DenseLayer l;
    const double limit = std::sqrt(6.0 / static_cast<double>(din + dout));
    std::uniform_real_distribution<double> u(-limit, limit);
    std::vector<double> w(dout * din);
    for (double& v : w) v = u(rng);
    l.weights = Tensor::from({dout, din}, std::move(w), true);
    if (!flags.batch_norm) l.bias = Tensor::zeros({dout}, true);
    l.flags = flags;
    if (flags.batch_norm) l.bn = BatchNorm1d::make(dout);
    return l;
  }
};

/// Runtime switches shared by every layer in one forward pass.
struct ForwardMode {
  bool training = false;
  bool update_running_stats = true;
  double keep_prob = 0.5;
  Rng* dropout_rng = nullptr;
};

inline Sequence apply(TdnnLayer& layer, const Sequence& x, const ForwardMode& mode) {
  Sequence y = conv1d_dilated(x, layer.kernels, layer.bias, layer.dilation);
  if (layer.flags.batch_norm) y = batchnorm(y, layer.bn, mode.training, mode.update_running_stats);
  if (layer.flags.relu) y = relu(y);
  if (layer.flags.dropout && mode.dropout_rng) y = dropout(y, mode.keep_prob, mode.training, *mode.dropout_rng);
  return y;
}

/// Frame-wise dense layer over a sequence (a K = 1 convolution).
inline Sequence apply_framewise(DenseLayer& layer, const Sequence& x, const ForwardMode& mode) {
  Sequence y = conv1d_dilated(x, layer.weights, layer.bias, 1);
  if (layer.flags.batch_norm) y = batchnorm(y, layer.bn, mode.training, mode.update_running_stats);
  if (layer.flags.relu) y = relu(y);
  if (layer.flags.dropout && mode.dropout_rng) y = dropout(y, mode.keep_prob, mode.training, *mode.dropout_rng);
  return y;
}

inline Tensor apply(DenseLayer& layer, const Tensor& x, const ForwardMode& mode) {
  Tensor y = ad::linear(x, layer.weights, layer.bias);
  if (layer.flags.batch_norm) y = batchnorm(y, layer.bn, mode.training, mode.update_running_stats);
  if (layer.flags.relu) y = ad::relu(y);
  if (layer.flags.dropout && mode.dropout_rng) y = dropout(y, mode.keep_prob, mode.training, *mode.dropout_rng);
  return y;
}

inline Sequence apply(const BiLstmLayer& layer, const Sequence& x) {
  return bilstm(x, layer.forward, layer.backward, layer.hidden);
}

}  // namespace serinv
