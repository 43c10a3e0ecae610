#pragma once

// Embedding network (TDNN x2 -> BiLSTM -> frame-wise FC -> statistics
// pooling) feeding an emotion head and a speaker head.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <initializer_list>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "serinv/autodiff.hpp"
#include "serinv/binary_io.hpp"
#include "serinv/errors.hpp"
#include "serinv/layers.hpp"
#include "serinv/rng.hpp"

namespace serinv {

using json = nlohmann::json;

struct TdnnSpec {
  std::size_t channels = 0;
  std::size_t kernel = 1;
  std::size_t dilation = 1;
  bool operator==(const TdnnSpec&) const = default;
};

/// FC stack "D_in-h1-h2-classes"; D_in is the embedding dimension.
struct HeadSpec {
  std::size_t hidden1 = 0;
  std::size_t hidden2 = 0;
  std::size_t num_classes = 0;
  bool operator==(const HeadSpec&) const = default;
};

/// Where batch norm and dropout go. BN follows the affine map and precedes
/// the ReLU; dropout follows the ReLU. Output layers never get either.
struct Regularization {
  bool bn_tdnn = true;
  bool bn_frame_fc = true;
  bool bn_head = true;
  bool dropout_lstm = true;
  bool dropout_frame_fc = false;
  bool dropout_head = true;
  double keep_prob = 0.5;
  bool operator==(const Regularization&) const = default;
};

struct ModelConfig {
  std::size_t feature_dim = 39;
  TdnnSpec tdnn1{128, 5, 2};
  TdnnSpec tdnn2{64, 3, 4};
  std::size_t lstm_hidden = 64;
  std::size_t fc_embed_dim = 256;
  HeadSpec emotion_head{64, 64, 4};
  HeadSpec speaker_head{64, 64, 8};
  Regularization regularization;

  bool operator==(const ModelConfig&) const = default;

  std::size_t embedding_dim() const { return 2 * fc_embed_dim; }

  /// Shortest utterance for which both valid convolutions emit a frame.
  std::size_t min_frames() const {
    return 1 + tdnn1.dilation * (tdnn1.kernel - 1) + tdnn2.dilation * (tdnn2.kernel - 1);
  }

  void validate() const {
    auto positive = [](std::size_t v, const char* what) {
      if (v == 0) throw ConfigError(std::string("model config: ") + what + " must be positive");
    };
    positive(feature_dim, "feature_dim");
    positive(tdnn1.channels, "tdnn1.channels");
    positive(tdnn1.kernel, "tdnn1.kernel");
    positive(tdnn1.dilation, "tdnn1.dilation");
    positive(tdnn2.channels, "tdnn2.channels");
    positive(tdnn2.kernel, "tdnn2.kernel");
    positive(tdnn2.dilation, "tdnn2.dilation");
    positive(lstm_hidden, "lstm_hidden");
    positive(fc_embed_dim, "fc_embed_dim");
    for (const HeadSpec* h : {&emotion_head, &speaker_head}) {
      positive(h->hidden1, "head hidden1");
      positive(h->hidden2, "head hidden2");
      if (h->num_classes < 2) throw ConfigError("model config: heads need at least 2 classes");
    }
    if (!(regularization.keep_prob > 0.0 && regularization.keep_prob <= 1.0)) {
      throw ConfigError("model config: keep_prob must be in (0, 1]");
    }
  }

  /// TDNN 128-5-2, TDNN 64-3-4, Bi-LSTM 64, FC 256, heads 512-64-64-4 / 512-64-64-8.
  static ModelConfig iemocap() { return ModelConfig{}; }

  /// TDNN 128-5-2, TDNN 128-3-4, Bi-LSTM 128, FC 512, heads 1024-128-128-4 / 1024-128-128-200.
  static ModelConfig mandarin() {
    ModelConfig c;
    c.tdnn2 = {128, 3, 4};
    c.lstm_hidden = 128;
    c.fc_embed_dim = 512;
    c.emotion_head = {128, 128, 4};
    c.speaker_head = {128, 128, 200};
    return c;
  }

  /// TDNN 4-3-1, TDNN 4-3-1, LSTM 3, FC 8, heads 16-4-4-2 / 16-4-4-2.
  /// Used by gradient checks and oracle tests.
  static ModelConfig tiny() {
    ModelConfig c;
    c.tdnn1 = {4, 3, 1};
    c.tdnn2 = {4, 3, 1};
    c.lstm_hidden = 3;
    c.fc_embed_dim = 8;
    c.emotion_head = {4, 4, 2};
    c.speaker_head = {4, 4, 2};
    return c;
  }

  /// Desk-scale variant of the IEMOCAP preset with the same dilation
  /// pattern, sized for the synthetic experiments on a single CPU core.
  static ModelConfig small() {
    ModelConfig c;
    c.tdnn1 = {32, 5, 2};
    c.tdnn2 = {32, 3, 4};
    c.lstm_hidden = 16;
    c.fc_embed_dim = 32;
    c.emotion_head = {32, 32, 4};
    c.speaker_head = {32, 32, 8};
    return c;
  }

  static ModelConfig preset(const std::string& name) {
    if (name == "iemocap") return iemocap();
    if (name == "mandarin") return mandarin();
    if (name == "tiny") return tiny();
    if (name == "small") return small();
    throw ConfigError("unknown model preset '" + name + "' (expected iemocap, mandarin, tiny or small)");
  }
};

// ---------------------------------------------------------------------------
// JSON.

inline void reject_unknown_keys(const json& j, std::initializer_list<const char*> allowed, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + ": expected a JSON object");
  for (const auto& [key, _] : j.items()) {
    bool ok = false;
    for (const char* a : allowed) ok = ok || key == a;
    if (!ok) throw ConfigError(where + ": unknown key '" + key + "'");
  }
}

inline void to_json(json& j, const TdnnSpec& t) {
  j = json{{"channels", t.channels}, {"kernel", t.kernel}, {"dilation", t.dilation}};
}
inline void from_json(const json& j, TdnnSpec& t) {
  reject_unknown_keys(j, {"channels", "kernel", "dilation"}, "tdnn");
  t.channels = j.at("channels").get<std::size_t>();
  t.kernel = j.at("kernel").get<std::size_t>();
  t.dilation = j.at("dilation").get<std::size_t>();
}

inline void to_json(json& j, const HeadSpec& h) {
  j = json{{"hidden1", h.hidden1}, {"hidden2", h.hidden2}, {"num_classes", h.num_classes}};
}
inline void from_json(const json& j, HeadSpec& h) {
  reject_unknown_keys(j, {"hidden1", "hidden2", "num_classes"}, "head");
  h.hidden1 = j.at("hidden1").get<std::size_t>();
  h.hidden2 = j.at("hidden2").get<std::size_t>();
  h.num_classes = j.at("num_classes").get<std::size_t>();
}

inline void to_json(json& j, const Regularization& r) {
  j = json{{"bn_tdnn", r.bn_tdnn},           {"bn_frame_fc", r.bn_frame_fc},
           {"bn_head", r.bn_head},           {"dropout_lstm", r.dropout_lstm},
           {"dropout_frame_fc", r.dropout_frame_fc}, {"dropout_head", r.dropout_head},
           {"keep_prob", r.keep_prob}};
}
inline void from_json(const json& j, Regularization& r) {
  reject_unknown_keys(j,
                      {"bn_tdnn", "bn_frame_fc", "bn_head", "dropout_lstm", "dropout_frame_fc", "dropout_head",
                       "keep_prob"},
                      "regularization");
  r.bn_tdnn = j.value("bn_tdnn", r.bn_tdnn);
  r.bn_frame_fc = j.value("bn_frame_fc", r.bn_frame_fc);
  r.bn_head = j.value("bn_head", r.bn_head);
  r.dropout_lstm = j.value("dropout_lstm", r.dropout_lstm);
  r.dropout_frame_fc = j.value("dropout_frame_fc", r.dropout_frame_fc);
  r.dropout_head = j.value("dropout_head", r.dropout_head);
  r.keep_prob = j.value("keep_prob", r.keep_prob);
}

inline void to_json(json& j, const ModelConfig& c) {
  j = json{{"feature_dim", c.feature_dim},   {"tdnn1", c.tdnn1},
           {"tdnn2", c.tdnn2},               {"lstm_hidden", c.lstm_hidden},
           {"fc_embed_dim", c.fc_embed_dim}, {"emotion_head", c.emotion_head},
           {"speaker_head", c.speaker_head}, {"regularization", c.regularization}};
}

/// Accepts either a full literal or {"preset": name, ...overrides}.
inline void from_json(const json& j, ModelConfig& c) {
  reject_unknown_keys(j,
                      {"preset", "feature_dim", "tdnn1", "tdnn2", "lstm_hidden", "fc_embed_dim", "emotion_head",
                       "speaker_head", "regularization"},
                      "model");
  c = j.contains("preset") ? ModelConfig::preset(j.at("preset").get<std::string>()) : ModelConfig{};
  if (j.contains("feature_dim")) c.feature_dim = j.at("feature_dim").get<std::size_t>();
  if (j.contains("tdnn1")) c.tdnn1 = j.at("tdnn1").get<TdnnSpec>();
  if (j.contains("tdnn2")) c.tdnn2 = j.at("tdnn2").get<TdnnSpec>();
  if (j.contains("lstm_hidden")) c.lstm_hidden = j.at("lstm_hidden").get<std::size_t>();
  if (j.contains("fc_embed_dim")) c.fc_embed_dim = j.at("fc_embed_dim").get<std::size_t>();
  if (j.contains("emotion_head")) c.emotion_head = j.at("emotion_head").get<HeadSpec>();
  if (j.contains("speaker_head")) c.speaker_head = j.at("speaker_head").get<HeadSpec>();
  if (j.contains("regularization")) c.regularization = j.at("regularization").get<Regularization>();
}

// ---------------------------------------------------------------------------
// Model.

/// Independent dropout streams per sub-network, so that skipping a head
/// never shifts the masks drawn elsewhere.
struct DropoutStreams {
  Rng embedding;
  Rng emotion;
  Rng speaker;

  static DropoutStreams from_seed(std::uint64_t seed) {
    return {make_rng(seed, "dropout/embedding"), make_rng(seed, "dropout/emotion"),
            make_rng(seed, "dropout/speaker")};
  }
};

struct ForwardOptions {
  bool training = false;
  bool update_running_stats = true;
  /// When set, the speaker head consumes grad_reverse(embedding, lambda).
  std::optional<double> grl_lambda;
  bool emotion_head = true;
  bool speaker_head = true;
  DropoutStreams* dropout = nullptr;
};

struct ForwardOutput {
  Tensor embedding;       // B x 2*fc_embed_dim
  Tensor emotion_logits;  // B x num_emotions (undefined if the head was skipped)
  Tensor speaker_logits;  // B x num_speakers (undefined if the head was skipped)
  std::optional<double> grl_lambda;
};

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

struct ClassifierHead {
  DenseLayer hidden1;
  DenseLayer hidden2;
  DenseLayer output;
};

class Model {
 public:
  static Model build(const ModelConfig& config, std::uint64_t seed) {
    config.validate();
    Model m;
    m.config_ = config;
    Rng rng = make_rng(seed, "init");
    const auto& r = config.regularization;
    m.tdnn1_ = TdnnLayer::make(config.feature_dim, config.tdnn1.channels, config.tdnn1.kernel, config.tdnn1.dilation,
                               {r.bn_tdnn, true, false}, rng);
    m.tdnn2_ = TdnnLayer::make(config.tdnn1.channels, config.tdnn2.channels, config.tdnn2.kernel,
                               config.tdnn2.dilation, {r.bn_tdnn, true, false}, rng);
    m.lstm_ = BiLstmLayer::make(config.tdnn2.channels, config.lstm_hidden, rng);
    m.frame_fc_ = DenseLayer::make(2 * config.lstm_hidden, config.fc_embed_dim,
                                   {r.bn_frame_fc, true, r.dropout_frame_fc}, rng);
    m.emotion_ = make_head(config.embedding_dim(), config.emotion_head, r, rng);
    m.speaker_ = make_head(config.embedding_dim(), config.speaker_head, r, rng);
    return m;
  }

  const ModelConfig& config() const { return config_; }
  std::size_t min_frames() const { return config_.min_frames(); }

  /// Full pipeline on a padded batch. `ids`, when given, names utterances in
  /// too-short errors.
  ForwardOutput forward(const Sequence& input, const ForwardOptions& opt,
                        std::span<const std::string> ids = {}) {
    if (input.values.rank() != 3 || input.channels() != config_.feature_dim) {
      throw ContractError("forward: expected B x " + std::to_string(config_.feature_dim) + " x L features, got " +
                          ad::shape_str(input.values.shape()));
    }
    const std::size_t need = min_frames();
    for (std::size_t b = 0; b < input.lengths.size(); ++b) {
      if (input.lengths[b] < need) {
        throw TooShortError(b < ids.size() ? ids[b] : "#" + std::to_string(b), need, input.lengths[b]);
      }
    }
    if (opt.training && opt.dropout == nullptr && uses_dropout()) {
      throw ContractError("forward: training mode with dropout needs dropout streams");
    }
    ForwardMode embed_mode{opt.training, opt.update_running_stats, config_.regularization.keep_prob,
                           opt.dropout ? &opt.dropout->embedding : nullptr};
    Sequence x = apply(tdnn1_, input, embed_mode);
    x = apply(tdnn2_, x, embed_mode);
    x = apply(lstm_, x);
    if (config_.regularization.dropout_lstm && embed_mode.dropout_rng) {
      x = dropout(x, embed_mode.keep_prob, opt.training, *embed_mode.dropout_rng);
    }
    x = apply_framewise(frame_fc_, x, embed_mode);

    ForwardOutput out;
    out.embedding = stats_pool(x);
    out.grl_lambda = opt.grl_lambda;
    if (opt.emotion_head) {
      ForwardMode m = embed_mode;
      m.dropout_rng = opt.dropout ? &opt.dropout->emotion : nullptr;
      out.emotion_logits = apply_head(emotion_, out.embedding, m);
    }
    if (opt.speaker_head) {
      ForwardMode m = embed_mode;
      m.dropout_rng = opt.dropout ? &opt.dropout->speaker : nullptr;
      const Tensor head_in = opt.grl_lambda ? ad::grad_reverse(out.embedding, *opt.grl_lambda) : out.embedding;
      out.speaker_logits = apply_head(speaker_, head_in, m);
    }
    return out;
  }

  // Parameter groups, each in declaration order.
  std::vector<NamedTensor> embedding_parameters() const {
    std::vector<NamedTensor> v;
    visit_embedding([&](const std::string& n, const Tensor& t, bool trainable) {
      if (trainable) v.push_back({n, t});
    });
    return v;
  }
  std::vector<NamedTensor> emotion_head_parameters() const { return head_tensors(emotion_, "emotion", true); }
  std::vector<NamedTensor> speaker_head_parameters() const { return head_tensors(speaker_, "speaker", true); }

  /// Every trainable tensor in declaration order.
  std::vector<NamedTensor> parameters() const {
    std::vector<NamedTensor> v;
    visit([&](const std::string& n, const Tensor& t, bool trainable) {
      if (trainable) v.push_back({n, t});
    });
    return v;
  }

  /// Trainable tensors plus batch-norm running statistics, in declaration
  /// order. This is what a checkpoint stores.
  std::vector<NamedTensor> state() const {
    std::vector<NamedTensor> v;
    visit([&](const std::string& n, const Tensor& t, bool) { v.push_back({n, t}); });
    return v;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : parameters()) n += p.tensor.numel();
    return n;
  }

  /// Deep copy; the clone shares no storage with this model.
  Model clone() const {
    Model m = *this;
    m.visit_mutable([](const std::string&, Tensor& t, bool) {
      const bool rg = t.requires_grad();
      t = Tensor::from(t.shape(), t.values(), rg);
    });
    return m;
  }

  void zero_grad() {
    visit_mutable([](const std::string&, Tensor& t, bool) { t.node().grad.clear(); });
  }

  // ---- SERM checkpoint --------------------------------------------------

  static constexpr std::uint32_t kCheckpointVersion = 1;

  std::vector<unsigned char> serialize() const {
    io::ByteWriter w;
    w.bytes("SERM", 4);
    w.u32(kCheckpointVersion);
    w.str(json(config_).dump());
    for (const auto& nt : state()) {
      w.u64(nt.tensor.numel());
      for (double v : nt.tensor.data()) w.f64(v);
    }
    return w.buffer();
  }

  static Model deserialize(std::vector<unsigned char> bytes) {
    io::ByteReader r(std::move(bytes));
    const std::string magic = r.fixed(4, "magic");
    if (magic != "SERM") throw FormatError("bad checkpoint magic '" + magic + "' (expected 'SERM')");
    const std::uint32_t version = r.u32("version");
    if (version != kCheckpointVersion) {
      throw FormatError("unsupported checkpoint version " + std::to_string(version));
    }
    ModelConfig cfg;
    try {
      cfg = json::parse(r.str("model config")).get<ModelConfig>();
    } catch (const json::exception& e) {
      throw FormatError(std::string("checkpoint model config: ") + e.what());
    }
    Model m = build(cfg, 0);
    m.visit_mutable([&](const std::string& name, Tensor& t, bool) {
      const std::uint64_t count = r.u64("tensor element count");
      if (count != t.numel()) {
        throw FormatError("checkpoint tensor '" + name + "' has " + std::to_string(count) + " values, expected " +
                          std::to_string(t.numel()));
      }
      for (double& v : t.data()) v = r.f64("tensor values");
    });
    if (r.remaining() != 0) throw FormatError("trailing bytes after checkpoint tensors");
    return m;
  }

  void save(const std::filesystem::path& path) const { io::write_file_atomic(path, serialize()); }
  static Model load(const std::filesystem::path& path) { return deserialize(io::read_file(path)); }

 private:
  static ClassifierHead make_head(std::size_t in, const HeadSpec& spec, const Regularization& r, Rng& rng) {
    ClassifierHead h;
    h.hidden1 = DenseLayer::make(in, spec.hidden1, {r.bn_head, true, r.dropout_head}, rng);
    h.hidden2 = DenseLayer::make(spec.hidden1, spec.hidden2, {r.bn_head, true, r.dropout_head}, rng);
    h.output = DenseLayer::make(spec.hidden2, spec.num_classes, {false, false, false}, rng);
    return h;
  }

  static Tensor apply_head(ClassifierHead& h, const Tensor& x, const ForwardMode& mode) {
    Tensor y = apply(h.hidden1, x, mode);
    y = apply(h.hidden2, y, mode);
    return apply(h.output, y, mode);
  }

  bool uses_dropout() const {
    const auto& r = config_.regularization;
    return r.keep_prob < 1.0 && (r.dropout_lstm || r.dropout_frame_fc || r.dropout_head);
  }

  template <typename F>
  static void visit_bn(const std::string& p, BatchNorm1d& bn, bool present, F&& f) {
    if (!present) return;
    f(p + ".bn.gamma", bn.gamma, true);
    f(p + ".bn.beta", bn.beta, true);
    f(p + ".bn.running_mean", bn.running_mean, false);
    f(p + ".bn.running_var", bn.running_var, false);
  }

  template <typename F>
  static void visit_dense(const std::string& p, DenseLayer& l, F&& f) {
    f(p + ".weight", l.weights, true);
    if (l.bias.defined()) f(p + ".bias", l.bias, true);
    visit_bn(p, l.bn, l.flags.batch_norm, f);
  }

  template <typename F>
  static void visit_head(const std::string& p, ClassifierHead& h, F&& f) {
    visit_dense(p + ".fc1", h.hidden1, f);
    visit_dense(p + ".fc2", h.hidden2, f);
    visit_dense(p + ".out", h.output, f);
  }

  template <typename F>
  void visit_embedding_mutable(F&& f) {
    for (auto [name, layer] : {std::pair<const char*, TdnnLayer*>{"tdnn1", &tdnn1_}, {"tdnn2", &tdnn2_}}) {
      const std::string p = name;
      f(p + ".kernels", layer->kernels, true);
      if (layer->bias.defined()) f(p + ".bias", layer->bias, true);
      visit_bn(p, layer->bn, layer->flags.batch_norm, f);
    }
    for (auto [name, dir] : {std::pair<const char*, LstmDirection*>{"lstm.fwd", &lstm_.forward},
                             {"lstm.bwd", &lstm_.backward}}) {
      const std::string p = name;
      f(p + ".input_weights", dir->input_weights, true);
      f(p + ".recurrent_weights", dir->recurrent_weights, true);
      f(p + ".bias", dir->bias, true);
    }
    visit_dense("frame_fc", frame_fc_, f);
  }

  template <typename F>
  void visit_mutable(F&& f) {
    visit_embedding_mutable(f);
    visit_head("emotion", emotion_, f);
    visit_head("speaker", speaker_, f);
  }

  template <typename F>
  void visit(F&& f) const {
    const_cast<Model*>(this)->visit_mutable(
        [&](const std::string& n, Tensor& t, bool trainable) { f(n, static_cast<const Tensor&>(t), trainable); });
  }

  template <typename F>
  void visit_embedding(F&& f) const {
    const_cast<Model*>(this)->visit_embedding_mutable(
        [&](const std::string& n, Tensor& t, bool trainable) { f(n, static_cast<const Tensor&>(t), trainable); });
  }

  std::vector<NamedTensor> head_tensors(const ClassifierHead& h, const std::string& p, bool trainable_only) const {
    std::vector<NamedTensor> v;
    visit_head(p, const_cast<ClassifierHead&>(h), [&](const std::string& n, Tensor& t, bool trainable) {
      if (trainable || !trainable_only) v.push_back({n, t});
    });
    return v;
  }

  ModelConfig config_;
  TdnnLayer tdnn1_;
  TdnnLayer tdnn2_;
  BiLstmLayer lstm_;
  DenseLayer frame_fc_;
  ClassifierHead emotion_;
  ClassifierHead speaker_;
};

}  // namespace serinv
