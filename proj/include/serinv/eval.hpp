#pragma once

// Emotion metrics, embedding export, a linear speaker probe (leakage of
// speaker identity into embeddings) and a PCA projection of embeddings.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <map>
#include <numeric>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "json.hpp"

#include "serinv/binary_io.hpp"
#include "serinv/data.hpp"
#include "serinv/errors.hpp"
#include "serinv/model.hpp"
#include "serinv/rng.hpp"

namespace serinv {

struct Metrics {
  double accuracy = 0.0;
  /// NaN for classes with no support.
  std::vector<double> per_class_recall;
  std::vector<std::vector<std::size_t>> confusion;  // rows = truth

  std::size_t total() const {
    std::size_t n = 0;
    for (const auto& r : confusion) n = std::accumulate(r.begin(), r.end(), n);
    return n;
  }
};

inline Metrics compute_metrics(std::span<const std::size_t> truth, std::span<const std::size_t> predicted,
                               std::size_t num_classes) {
  if (truth.size() != predicted.size()) throw ContractError("compute_metrics: truth/prediction size mismatch");
  if (truth.empty()) throw ValidationError("compute_metrics: no utterances to score");
  Metrics m;
  m.confusion.assign(num_classes, std::vector<std::size_t>(num_classes, 0));
  std::size_t correct = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    if (truth[i] >= num_classes || predicted[i] >= num_classes) throw ContractError("compute_metrics: label out of range");
    ++m.confusion[truth[i]][predicted[i]];
    if (truth[i] == predicted[i]) ++correct;
  }
  m.accuracy = static_cast<double>(correct) / static_cast<double>(truth.size());
  for (std::size_t c = 0; c < num_classes; ++c) {
    const auto support = std::accumulate(m.confusion[c].begin(), m.confusion[c].end(), std::size_t{0});
    m.per_class_recall.push_back(support == 0 ? std::numeric_limits<double>::quiet_NaN()
                                              : static_cast<double>(m.confusion[c][c]) / static_cast<double>(support));
  }
  return m;
}

namespace detail {
inline std::size_t argmax_row(std::span<const double> logits, std::size_t row, std::size_t cols) {
  const double* p = logits.data() + row * cols;
  return static_cast<std::size_t>(std::max_element(p, p + cols) - p);
}
}  // namespace detail

/// Eval-mode emotion predictions in input order.
inline std::vector<std::size_t> predict(Model& model, std::span<const Utterance* const> utts, std::size_t num_emotions,
                                        std::size_t batch_size = 32) {
  std::vector<std::size_t> out(utts.size());
  const EvalPlan plan = plan_eval_batches(utts, batch_size);
  ForwardOptions opt;
  opt.speaker_head = false;
  for (std::size_t k = 0; k < plan.batches.size(); ++k) {
    const SequenceBatch b = make_batch(plan.batches[k], model.config().feature_dim, num_emotions, nullptr);
    const auto fwd = model.forward(b.sequence(), opt, b.ids);
    const std::size_t c = fwd.emotion_logits.dim(1);
    for (std::size_t i = 0; i < b.size(); ++i) out[plan.positions[k][i]] = detail::argmax_row(fwd.emotion_logits.data(), i, c);
  }
  return out;
}

inline Metrics evaluate(Model& model, std::span<const Utterance* const> utts, std::size_t num_emotions,
                        std::size_t batch_size = 32) {
  if (utts.empty()) throw ValidationError("evaluate: split is empty");
  const auto pred = predict(model, utts, num_emotions, batch_size);
  std::vector<std::size_t> truth;
  for (const auto* u : utts) truth.push_back(u->emotion);
  return compute_metrics(truth, pred, num_emotions);
}

inline Metrics evaluate(Model& model, const Dataset& ds, const std::vector<std::string>& ids,
                        std::size_t batch_size = 32) {
  return evaluate(model, select(ds, ids), ds.num_emotions(), batch_size);
}

inline json metrics_json(const Metrics& m, const std::vector<std::string>& emotion_names) {
  json recall = json::array();
  for (double r : m.per_class_recall) recall.push_back(std::isnan(r) ? json(nullptr) : json(r));
  return json{{"accuracy", m.accuracy},
              {"num_utterances", m.total()},
              {"emotion_names", emotion_names},
              {"per_class_recall", recall},
              {"confusion", m.confusion}};
}

/// Header: truth,<one column per predicted class>.
inline std::string confusion_csv(const Metrics& m, const std::vector<std::string>& emotion_names) {
  std::ostringstream os;
  os << "truth";
  for (const auto& n : emotion_names) os << ",pred_" << n;
  os << '\n';
  for (std::size_t r = 0; r < m.confusion.size(); ++r) {
    os << emotion_names.at(r);
    for (auto v : m.confusion[r]) os << ',' << v;
    os << '\n';
  }
  return os.str();
}

// ---------------------------------------------------------------------------
// Embeddings.

struct EmbeddingRecord {
  std::string id;
  std::uint32_t emotion = 0;
  std::string speaker;
  std::vector<double> embedding;

  bool operator==(const EmbeddingRecord&) const = default;
};

struct EmbedResult {
  std::vector<EmbeddingRecord> records;
  /// Utterances shorter than the model's receptive-field minimum.
  std::vector<std::string> skipped;
};

/// Eval-mode embeddings, in input order.
inline EmbedResult embed(Model& model, const Dataset& ds, std::span<const Utterance* const> utts,
                         std::size_t batch_size = 32) {
  EmbedResult res;
  std::vector<const Utterance*> kept;
  for (const auto* u : utts) {
    if (u->frames < model.min_frames()) res.skipped.push_back(u->id);
    else kept.push_back(u);
  }
  res.records.resize(kept.size());
  const EvalPlan plan = plan_eval_batches(kept, batch_size);
  ForwardOptions opt;
  opt.emotion_head = opt.speaker_head = false;
  for (std::size_t k = 0; k < plan.batches.size(); ++k) {
    const SequenceBatch b = make_batch(plan.batches[k], ds.feature_dim, ds.num_emotions(), nullptr);
    const auto fwd = model.forward(b.sequence(), opt, b.ids);
    const std::size_t dim = fwd.embedding.dim(1);
    for (std::size_t i = 0; i < b.size(); ++i) {
      const Utterance& u = *plan.batches[k][i];
      auto& r = res.records[plan.positions[k][i]];
      r.id = u.id;
      r.emotion = u.emotion;
      r.speaker = ds.speaker_ids.at(u.speaker);
      r.embedding.assign(fwd.embedding.data().begin() + static_cast<std::ptrdiff_t>(i * dim),
                         fwd.embedding.data().begin() + static_cast<std::ptrdiff_t>((i + 1) * dim));
    }
  }
  return res;
}

namespace detail {
inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream is(line);
  while (std::getline(is, cur, ',')) out.push_back(cur);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}
}  // namespace detail

/// Header: id,emotion,speaker,e0,...,e{D-1}. Values use 17 significant
/// digits so a read-back is exact.
inline std::string embeddings_csv(std::span<const EmbeddingRecord> records) {
  std::ostringstream os;
  os.precision(17);
  const std::size_t dim = records.empty() ? 0 : records[0].embedding.size();
  os << "id,emotion,speaker";
  for (std::size_t i = 0; i < dim; ++i) os << ",e" << i;
  os << '\n';
  for (const auto& r : records) {
    if (r.embedding.size() != dim) throw ContractError("embeddings_csv: ragged embedding dimensions");
    os << r.id << ',' << r.emotion << ',' << r.speaker;
    for (double v : r.embedding) os << ',' << v;
    os << '\n';
  }
  return os.str();
}

inline std::vector<EmbeddingRecord> parse_embeddings_csv(const std::string& text) {
  std::istringstream is(text);
  std::string line;
  if (!std::getline(is, line)) throw FormatError("embeddings CSV is empty");
  const auto header = detail::split_csv_line(line);
  if (header.size() < 4 || header[0] != "id" || header[1] != "emotion" || header[2] != "speaker") {
    throw FormatError("embeddings CSV: header must start with id,emotion,speaker,e0");
  }
  const std::size_t dim = header.size() - 3;
  std::vector<EmbeddingRecord> out;
  std::size_t line_no = 1;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto f = detail::split_csv_line(line);
    if (f.size() != dim + 3) {
      throw FormatError("embeddings CSV line " + std::to_string(line_no) + ": expected " + std::to_string(dim + 3) +
                        " fields, got " + std::to_string(f.size()));
    }
    EmbeddingRecord r;
    r.id = f[0];
    r.speaker = f[2];
    try {
      r.emotion = static_cast<std::uint32_t>(std::stoul(f[1]));
      for (std::size_t i = 0; i < dim; ++i) r.embedding.push_back(std::stod(f[3 + i]));
    } catch (const std::logic_error&) {
      throw FormatError("embeddings CSV line " + std::to_string(line_no) + ": malformed number");
    }
    out.push_back(std::move(r));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Speaker probe.

struct ProbeResult {
  double probe_accuracy = 0.0;
  double chance_level = 0.0;
  std::size_t num_probe_speakers = 0;
  double leakage_ratio = 0.0;
};

inline json probe_json(const ProbeResult& p) {
  return json{{"probe_accuracy", p.probe_accuracy},
              {"chance_level", p.chance_level},
              {"num_probe_speakers", p.num_probe_speakers},
              {"leakage_ratio", p.leakage_ratio}};
}

inline constexpr std::size_t kProbeIterations = 500;
inline constexpr double kProbeStep = 0.1;

/// Multinomial logistic regression from embedding to speaker. Each speaker's
/// records are split 50/50 (seeded); inputs are standardized with the
/// probe-train statistics; full-batch gradient descent from zero weights.
inline ProbeResult speaker_probe(std::span<const EmbeddingRecord> records, std::uint64_t seed) {
  std::map<std::string, std::vector<std::size_t>> by_speaker;
  for (std::size_t i = 0; i < records.size(); ++i) by_speaker[records[i].speaker].push_back(i);
  if (by_speaker.size() < 2) throw ValidationError("speaker_probe: need at least 2 speakers, got " +
                                                   std::to_string(by_speaker.size()));
  for (const auto& [spk, idx] : by_speaker) {
    if (idx.size() < 4) {
      throw ValidationError("speaker_probe: speaker '" + spk + "' has " + std::to_string(idx.size()) +
                            " records, need at least 4");
    }
  }
  const std::size_t dim = records[0].embedding.size();
  for (const auto& r : records)
    if (r.embedding.size() != dim) throw ContractError("speaker_probe: ragged embedding dimensions");

  Rng rng = make_rng(seed, "probe");
  std::vector<std::size_t> train_idx, eval_idx;
  std::vector<std::size_t> train_lbl, eval_lbl;
  std::size_t cls = 0;
  for (auto& [spk, idx] : by_speaker) {
    std::shuffle(idx.begin(), idx.end(), rng);
    const std::size_t half = idx.size() / 2;
    for (std::size_t k = 0; k < idx.size(); ++k) {
      (k < half ? train_idx : eval_idx).push_back(idx[k]);
      (k < half ? train_lbl : eval_lbl).push_back(cls);
    }
    ++cls;
  }
  const auto s = static_cast<Eigen::Index>(cls);
  const auto d = static_cast<Eigen::Index>(dim);
  auto gather = [&](const std::vector<std::size_t>& idx) {
    Eigen::MatrixXd x(static_cast<Eigen::Index>(idx.size()), d);
    for (std::size_t i = 0; i < idx.size(); ++i)
      for (Eigen::Index j = 0; j < d; ++j) x(static_cast<Eigen::Index>(i), j) = records[idx[i]].embedding[j];
    return x;
  };
  Eigen::MatrixXd xtr = gather(train_idx), xev = gather(eval_idx);
  const Eigen::RowVectorXd mean = xtr.colwise().mean();
  Eigen::RowVectorXd sd = ((xtr.rowwise() - mean).array().square().colwise().sum() / static_cast<double>(xtr.rows()))
                              .sqrt()
                              .matrix();
  for (Eigen::Index j = 0; j < d; ++j)
    if (!(sd(j) > 1e-12)) sd(j) = 1.0;
  xtr = ((xtr.rowwise() - mean).array().rowwise() / sd.array()).matrix();
  xev = ((xev.rowwise() - mean).array().rowwise() / sd.array()).matrix();

  const auto n = xtr.rows();
  Eigen::MatrixXd y = Eigen::MatrixXd::Zero(n, s);
  for (Eigen::Index i = 0; i < n; ++i) y(i, static_cast<Eigen::Index>(train_lbl[static_cast<std::size_t>(i)])) = 1.0;
  Eigen::MatrixXd w = Eigen::MatrixXd::Zero(d, s);
  Eigen::RowVectorXd b = Eigen::RowVectorXd::Zero(s);
  for (std::size_t it = 0; it < kProbeIterations; ++it) {
    Eigen::MatrixXd z = (xtr * w).rowwise() + b;
    const Eigen::VectorXd zmax = z.rowwise().maxCoeff();
    z = (z.colwise() - zmax).array().exp().matrix();
    const Eigen::VectorXd zsum = z.rowwise().sum();
    z = z.array().colwise() / zsum.array();
    const Eigen::MatrixXd g = (z - y) / static_cast<double>(n);
    w -= kProbeStep * (xtr.transpose() * g);
    b -= kProbeStep * g.colwise().sum();
  }
  const Eigen::MatrixXd ze = (xev * w).rowwise() + b;
  std::size_t correct = 0;
  for (Eigen::Index i = 0; i < ze.rows(); ++i) {
    Eigen::Index arg = 0;
    ze.row(i).maxCoeff(&arg);
    if (static_cast<std::size_t>(arg) == eval_lbl[static_cast<std::size_t>(i)]) ++correct;
  }
  ProbeResult r;
  r.num_probe_speakers = cls;
  r.chance_level = 1.0 / static_cast<double>(cls);
  r.probe_accuracy = static_cast<double>(correct) / static_cast<double>(ze.rows());
  r.leakage_ratio = r.probe_accuracy / r.chance_level;
  return r;
}

// ---------------------------------------------------------------------------
// PCA.

struct Projection {
  std::vector<std::vector<double>> coordinates;  // N x k
  std::vector<double> explained_variance;        // fractions, non-increasing
  std::vector<std::vector<double>> components;   // k x D
};

/// Principal components of the centered records. Each component's sign is
/// fixed so its largest-magnitude loading is positive (first such index on
/// ties).
inline Projection pca_project(std::span<const EmbeddingRecord> records, std::size_t k = 2) {
  if (k < 1) throw ContractError("pca_project: k must be >= 1");
  if (records.size() < k + 1) {
    throw ValidationError("pca_project: need at least " + std::to_string(k + 1) + " records, got " +
                          std::to_string(records.size()));
  }
  const std::size_t dim = records[0].embedding.size();
  if (k > dim) throw ContractError("pca_project: k exceeds the embedding dimension");
  const auto n = static_cast<Eigen::Index>(records.size());
  const auto d = static_cast<Eigen::Index>(dim);
  Eigen::MatrixXd x(n, d);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& e = records[static_cast<std::size_t>(i)].embedding;
    if (e.size() != dim) throw ContractError("pca_project: ragged embedding dimensions");
    for (Eigen::Index j = 0; j < d; ++j) x(i, j) = e[static_cast<std::size_t>(j)];
  }
  x.rowwise() -= x.colwise().mean();
  const Eigen::MatrixXd cov = (x.transpose() * x) / static_cast<double>(n - 1);
  const double total = cov.trace();
  if (!(total > 1e-12)) throw ValidationError("pca_project: data has zero variance");
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(cov);
  if (solver.info() != Eigen::Success) throw ValidationError("pca_project: eigendecomposition failed");
  Projection p;
  for (std::size_t c = 0; c < k; ++c) {
    const Eigen::Index col = d - 1 - static_cast<Eigen::Index>(c);  // eigenvalues ascend
    Eigen::VectorXd v = solver.eigenvectors().col(col);
    Eigen::Index arg = 0;
    v.cwiseAbs().maxCoeff(&arg);
    if (v(arg) < 0) v = -v;
    p.explained_variance.push_back(std::max(0.0, solver.eigenvalues()(col)) / total);
    p.components.emplace_back(v.data(), v.data() + d);
  }
  p.coordinates.assign(records.size(), std::vector<double>(k));
  for (std::size_t c = 0; c < k; ++c) {
    const Eigen::Map<const Eigen::VectorXd> v(p.components[c].data(), d);
    const Eigen::VectorXd proj = x * v;
    for (Eigen::Index i = 0; i < n; ++i) p.coordinates[static_cast<std::size_t>(i)][c] = proj(i);
  }
  return p;
}

/// Header: id,emotion,speaker,pc1,...,pc{k}.
inline std::string projection_csv(std::span<const EmbeddingRecord> records, const Projection& p) {
  std::ostringstream os;
  os.precision(17);
  const std::size_t k = p.explained_variance.size();
  os << "id,emotion,speaker";
  for (std::size_t c = 0; c < k; ++c) os << ",pc" << (c + 1);
  os << '\n';
  for (std::size_t i = 0; i < records.size(); ++i) {
    os << records[i].id << ',' << records[i].emotion << ',' << records[i].speaker;
    for (double v : p.coordinates[i]) os << ',' << v;
    os << '\n';
  }
  return os.str();
}

}  // namespace serinv
