#pragma once

// Feature-sequence datasets: the SERF container, a synthetic multi-speaker
// emotion generator, speaker-disjoint splits, session-based cross-validation
// folds and length-bucketed batching.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <numbers>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <unordered_map>
#include <unordered_set>
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

struct Utterance {
  std::string id;
  std::uint32_t frames = 0;
  std::vector<float> features;  // frame-major: features[t * feature_dim + d]
  std::uint32_t emotion = 0;
  std::uint32_t speaker = 0;

  float at(std::size_t dim, std::size_t frame, std::size_t feature_dim) const {
    return features[frame * feature_dim + dim];
  }
  bool operator==(const Utterance&) const = default;
};

struct Dataset {
  std::uint32_t feature_dim = 39;
  std::vector<std::string> emotion_names;
  std::vector<std::string> speaker_ids;
  std::vector<Utterance> utterances;

  bool operator==(const Dataset&) const = default;

  std::size_t num_emotions() const { return emotion_names.size(); }
  std::size_t num_speakers() const { return speaker_ids.size(); }

  void validate() const {
    std::unordered_set<std::string> seen;
    for (const auto& u : utterances) {
      if (!seen.insert(u.id).second) throw ValidationError("duplicate utterance id '" + u.id + "'");
      if (u.frames < 1) throw ValidationError("utterance '" + u.id + "' has no frames");
      if (u.features.size() != static_cast<std::size_t>(u.frames) * feature_dim) {
        throw ValidationError("utterance '" + u.id + "' feature count does not match frames x feature_dim");
      }
      if (u.emotion >= emotion_names.size()) {
        throw ValidationError("utterance '" + u.id + "' emotion label " + std::to_string(u.emotion) +
                              " out of range [0, " + std::to_string(emotion_names.size()) + ")");
      }
      if (u.speaker >= speaker_ids.size()) {
        throw ValidationError("utterance '" + u.id + "' speaker label " + std::to_string(u.speaker) +
                              " out of range [0, " + std::to_string(speaker_ids.size()) + ")");
      }
      for (float v : u.features) {
        if (!std::isfinite(v)) throw ValidationError("utterance '" + u.id + "' contains a non-finite value");
      }
    }
  }

  const Utterance& find(const std::string& id) const {
    for (const auto& u : utterances)
      if (u.id == id) return u;
    throw ValidationError("unknown utterance id '" + id + "'");
  }
};

// ---------------------------------------------------------------------------
// SERF container.

inline constexpr std::uint32_t kSerfVersion = 1;

inline std::vector<unsigned char> encode_serf(const Dataset& ds) {
  ds.validate();
  io::ByteWriter w;
  w.bytes("SERF", 4);
  w.u32(kSerfVersion);
  w.u32(ds.feature_dim);
  w.u32(static_cast<std::uint32_t>(ds.emotion_names.size()));
  w.u32(static_cast<std::uint32_t>(ds.speaker_ids.size()));
  for (const auto& n : ds.emotion_names) w.str(n);
  for (const auto& n : ds.speaker_ids) w.str(n);
  w.u32(static_cast<std::uint32_t>(ds.utterances.size()));
  for (const auto& u : ds.utterances) {
    w.str(u.id);
    w.u32(u.emotion);
    w.u32(u.speaker);
    w.u32(u.frames);
    for (float v : u.features) w.f32(v);
  }
  return w.buffer();
}

inline Dataset decode_serf(std::vector<unsigned char> bytes) {
  io::ByteReader r(std::move(bytes));
  const std::string magic = r.fixed(4, "magic");
  if (magic != "SERF") throw FormatError("bad magic '" + magic + "' (expected 'SERF')");
  const std::uint32_t version = r.u32("version");
  if (version != kSerfVersion) throw FormatError("unsupported SERF version " + std::to_string(version));
  Dataset ds;
  ds.feature_dim = r.u32("feature_dim");
  const std::uint32_t num_emotions = r.u32("emotion count");
  const std::uint32_t num_speakers = r.u32("speaker count");
  // Each name costs at least its 4-byte length prefix.
  r.need(4ULL * (static_cast<std::uint64_t>(num_emotions) + num_speakers), "name tables");
  for (std::uint32_t i = 0; i < num_emotions; ++i) ds.emotion_names.push_back(r.str("emotion name"));
  for (std::uint32_t i = 0; i < num_speakers; ++i) ds.speaker_ids.push_back(r.str("speaker id"));
  const std::uint32_t count = r.u32("utterance count");
  r.need(16ULL * count, "utterance headers");
  ds.utterances.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    Utterance u;
    u.id = r.str("utterance id");
    u.emotion = r.u32("emotion label");
    u.speaker = r.u32("speaker label");
    u.frames = r.u32("frame count");
    const std::uint64_t n = static_cast<std::uint64_t>(u.frames) * ds.feature_dim;
    r.need(4 * n, "feature values");
    u.features.resize(n);
    for (auto& v : u.features) v = r.f32("feature values");
    ds.utterances.push_back(std::move(u));
  }
  if (r.remaining() != 0) throw FormatError("trailing bytes after last utterance");
  ds.validate();
  return ds;
}

inline void write_serf(const Dataset& ds, const std::filesystem::path& path) {
  io::write_file_atomic(path, encode_serf(ds));
}

inline Dataset read_serf(const std::filesystem::path& path) { return decode_serf(io::read_file(path)); }

// ---------------------------------------------------------------------------
// Sidecar manifests.

struct SplitManifest {
  std::vector<std::string> train;
  std::vector<std::string> validation;
  std::vector<std::string> test;

  bool operator==(const SplitManifest&) const = default;
};

inline void to_json(json& j, const SplitManifest& m) {
  j = json{{"train", m.train}, {"validation", m.validation}, {"test", m.test}};
}

inline void from_json(const json& j, SplitManifest& m) {
  if (!j.is_object()) throw FormatError("split manifest must be a JSON object");
  for (const auto& [k, _] : j.items()) {
    if (k != "train" && k != "validation" && k != "test") throw FormatError("split manifest: unknown key '" + k + "'");
  }
  m.train = j.at("train").get<std::vector<std::string>>();
  m.validation = j.at("validation").get<std::vector<std::string>>();
  m.test = j.value("test", std::vector<std::string>{});
}

/// speaker id -> session tag.
using SpeakerSessions = std::map<std::string, std::string>;

inline json speaker_metadata_json(const SpeakerSessions& sessions) {
  json j = json::object();
  for (const auto& [spk, sess] : sessions) j[spk] = json{{"session", sess}};
  return j;
}

inline SpeakerSessions parse_speaker_metadata(const json& j) {
  if (!j.is_object()) throw FormatError("speaker metadata must be a JSON object");
  SpeakerSessions s;
  for (const auto& [spk, v] : j.items()) s[spk] = v.at("session").get<std::string>();
  return s;
}

/// Speaker ids (by dataset index) that occur in each split, plus every
/// speaker occurring in more than one split.
struct SplitSpeakers {
  std::set<std::uint32_t> train, validation, test;
  std::vector<std::string> overlapping;
};

inline SplitSpeakers split_speakers(const Dataset& ds, const SplitManifest& m) {
  std::unordered_map<std::string, const Utterance*> by_id;
  for (const auto& u : ds.utterances) by_id[u.id] = &u;
  SplitSpeakers s;
  auto collect = [&](const std::vector<std::string>& ids, std::set<std::uint32_t>& out) {
    for (const auto& id : ids) {
      auto it = by_id.find(id);
      if (it == by_id.end()) throw ValidationError("split manifest names unknown utterance '" + id + "'");
      out.insert(it->second->speaker);
    }
  };
  collect(m.train, s.train);
  collect(m.validation, s.validation);
  collect(m.test, s.test);
  std::set<std::uint32_t> bad;
  for (auto spk : s.train)
    if (s.validation.count(spk) || s.test.count(spk)) bad.insert(spk);
  for (auto spk : s.validation)
    if (s.test.count(spk)) bad.insert(spk);
  for (auto spk : bad) s.overlapping.push_back(ds.speaker_ids[spk]);
  return s;
}

/// Throws SplitError naming the shared speakers unless the splits are
/// speaker-disjoint.
inline void require_disjoint(const Dataset& ds, const SplitManifest& m) {
  auto s = split_speakers(ds, m);
  if (!s.overlapping.empty()) throw SplitError(std::move(s.overlapping));
}

inline std::vector<const Utterance*> select(const Dataset& ds, const std::vector<std::string>& ids) {
  std::unordered_map<std::string, const Utterance*> by_id;
  for (const auto& u : ds.utterances) by_id[u.id] = &u;
  std::vector<const Utterance*> out;
  out.reserve(ids.size());
  for (const auto& id : ids) {
    auto it = by_id.find(id);
    if (it == by_id.end()) throw ValidationError("unknown utterance id '" + id + "'");
    out.push_back(it->second);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic generator.

struct SyntheticSpec {
  std::size_t num_speakers = 35;
  std::size_t utterances_per_speaker = 40;
  std::size_t feature_dim = 39;
  std::size_t num_emotions = 4;
  std::size_t min_length = 80;
  std::size_t max_length = 300;
  double speaker_offset_scale = 1.0;
  double gain_min = 0.7;
  double gain_max = 1.3;
  double interaction_scale = 0.3;
  double noise_sigma = 0.5;
  /// Standard deviation of the per-emotion template coefficients A_y; the
  /// difficulty calibration constant (see fixtures/synthetic_calibration.json).
  double emotion_template_scale = 0.5;
  std::uint64_t seed = 0;

  bool operator==(const SyntheticSpec&) const = default;
};

inline void to_json(json& j, const SyntheticSpec& s) {
  j = json{{"num_speakers", s.num_speakers},
           {"utterances_per_speaker", s.utterances_per_speaker},
           {"feature_dim", s.feature_dim},
           {"num_emotions", s.num_emotions},
           {"length_range", {s.min_length, s.max_length}},
           {"speaker_offset_scale", s.speaker_offset_scale},
           {"speaker_channel_gain_range", {s.gain_min, s.gain_max}},
           {"interaction_scale", s.interaction_scale},
           {"noise_sigma", s.noise_sigma},
           {"emotion_template_scale", s.emotion_template_scale},
           {"seed", s.seed}};
}

inline void from_json(const json& j, SyntheticSpec& s) {
  static const std::set<std::string> allowed{"num_speakers",        "utterances_per_speaker",
                                             "feature_dim",         "num_emotions",
                                             "length_range",        "speaker_offset_scale",
                                             "speaker_channel_gain_range", "interaction_scale",
                                             "noise_sigma",         "emotion_template_scale",
                                             "seed"};
  if (!j.is_object()) throw ConfigError("synthetic spec must be a JSON object");
  for (const auto& [k, _] : j.items()) {
    if (!allowed.count(k)) throw ConfigError("synthetic spec: unknown key '" + k + "'");
  }
  s.num_speakers = j.value("num_speakers", s.num_speakers);
  s.utterances_per_speaker = j.value("utterances_per_speaker", s.utterances_per_speaker);
  s.feature_dim = j.value("feature_dim", s.feature_dim);
  s.num_emotions = j.value("num_emotions", s.num_emotions);
  if (j.contains("length_range")) {
    s.min_length = j.at("length_range").at(0).get<std::size_t>();
    s.max_length = j.at("length_range").at(1).get<std::size_t>();
  }
  s.speaker_offset_scale = j.value("speaker_offset_scale", s.speaker_offset_scale);
  if (j.contains("speaker_channel_gain_range")) {
    s.gain_min = j.at("speaker_channel_gain_range").at(0).get<double>();
    s.gain_max = j.at("speaker_channel_gain_range").at(1).get<double>();
  }
  s.interaction_scale = j.value("interaction_scale", s.interaction_scale);
  s.noise_sigma = j.value("noise_sigma", s.noise_sigma);
  s.emotion_template_scale = j.value("emotion_template_scale", s.emotion_template_scale);
  s.seed = j.value("seed", s.seed);
}

inline std::vector<std::string> default_emotion_names(std::size_t n) {
  static const char* kNames[] = {"happy", "sad", "angry", "neutral"};
  std::vector<std::string> v;
  for (std::size_t i = 0; i < n; ++i) v.push_back(n <= 4 ? kNames[i] : "emotion" + std::to_string(i));
  return v;
}

/// Draws a dataset in which emotion lives in per-emotion temporal templates
/// and speaker identity lives in per-channel offsets and gains plus a
/// speaker-specific modulation of how each emotion is expressed:
///
///   x_t = g_s * (A_y phi(t/l) + b_{s,y} psi_y(t/l)) + v_s + sigma * n_t
///
/// Every utterance draws its length and noise from its own stream derived from
/// (seed, utterance index), so generation order does not matter.
inline Dataset generate_synthetic(const SyntheticSpec& spec, std::size_t min_frames = 1) {
  if (spec.num_speakers < 1 || spec.utterances_per_speaker < 1 || spec.feature_dim < 1 || spec.num_emotions < 2) {
    throw SpecError("synthetic spec: speakers, utterances, feature_dim must be positive and num_emotions >= 2");
  }
  if (spec.min_length < 1 || spec.max_length < spec.min_length) throw SpecError("synthetic spec: bad length_range");
  if (spec.min_length < min_frames) {
    throw SpecError("synthetic spec: length_range minimum " + std::to_string(spec.min_length) +
                    " is below the model receptive-field minimum " + std::to_string(min_frames));
  }
  if (spec.speaker_offset_scale < 0 || spec.interaction_scale < 0 || spec.noise_sigma < 0 || spec.emotion_template_scale < 0 || spec.gain_min < 0 ||
      spec.gain_max < spec.gain_min) {
    throw SpecError("synthetic spec: scales must be non-negative and the gain range ordered");
  }
  const std::size_t d = spec.feature_dim;
  const std::size_t e_count = spec.num_emotions;
  constexpr std::size_t kBasis = 3;

  Rng structure = make_rng(spec.seed, "synthetic/structure");
  std::normal_distribution<double> normal(0.0, 1.0);
  // Per-emotion template coefficients A_y (d x 3), frequencies and phases.
  std::vector<std::vector<double>> templates(e_count, std::vector<double>(d * kBasis));
  std::vector<std::array<double, 3>> freq(e_count), phase(e_count);
  std::uniform_real_distribution<double> f_dist(0.5, 2.5), p_dist(0.0, 2.0 * std::numbers::pi);
  for (std::size_t y = 0; y < e_count; ++y) {
    for (double& a : templates[y]) a = spec.emotion_template_scale * normal(structure);
    for (std::size_t k = 0; k < kBasis; ++k) {
      freq[y][k] = f_dist(structure);
      phase[y][k] = p_dist(structure);
    }
  }
  // Speaker offsets v_s, gains g_s, and expression modulations b_{s,y}.
  std::vector<std::vector<double>> offset(spec.num_speakers, std::vector<double>(d));
  std::vector<std::vector<double>> gain(spec.num_speakers, std::vector<double>(d));
  std::vector<std::vector<std::vector<double>>> modulation(
      spec.num_speakers, std::vector<std::vector<double>>(e_count, std::vector<double>(d)));
  std::uniform_real_distribution<double> g_dist(spec.gain_min, std::nextafter(spec.gain_max, spec.gain_max + 1.0));
  for (std::size_t s = 0; s < spec.num_speakers; ++s) {
    for (std::size_t c = 0; c < d; ++c) offset[s][c] = spec.speaker_offset_scale * normal(structure);
    for (std::size_t c = 0; c < d; ++c) gain[s][c] = spec.gain_min == spec.gain_max ? spec.gain_min : g_dist(structure);
    for (std::size_t y = 0; y < e_count; ++y)
      for (std::size_t c = 0; c < d; ++c) modulation[s][y][c] = spec.interaction_scale * normal(structure);
  }

  Dataset ds;
  ds.feature_dim = static_cast<std::uint32_t>(d);
  ds.emotion_names = default_emotion_names(e_count);
  for (std::size_t s = 0; s < spec.num_speakers; ++s) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "spk%03zu", s);
    ds.speaker_ids.emplace_back(buf);
  }
  ds.utterances.reserve(spec.num_speakers * spec.utterances_per_speaker);
  const std::uint64_t utt_seed = derive_seed(spec.seed, "synthetic/utterances");
  std::vector<double> phi(kBasis);
  for (std::size_t s = 0; s < spec.num_speakers; ++s) {
    for (std::size_t j = 0; j < spec.utterances_per_speaker; ++j) {
      const std::size_t index = s * spec.utterances_per_speaker + j;
      Rng rng(derive_seed(utt_seed, static_cast<std::uint64_t>(index)));
      std::uniform_int_distribution<std::size_t> len_dist(spec.min_length, spec.max_length);
      std::normal_distribution<double> noise(0.0, 1.0);
      Utterance u;
      char buf[48];
      std::snprintf(buf, sizeof buf, "spk%03zu_utt%03zu", s, j);
      u.id = buf;
      u.speaker = static_cast<std::uint32_t>(s);
      u.emotion = static_cast<std::uint32_t>(j % e_count);
      const std::size_t len = len_dist(rng);
      u.frames = static_cast<std::uint32_t>(len);
      u.features.resize(len * d);
      const std::size_t y = u.emotion;
      for (std::size_t t = 0; t < len; ++t) {
        const double tau = static_cast<double>(t) / static_cast<double>(len);
        phi[0] = std::sin(2.0 * std::numbers::pi * freq[y][0] * tau + phase[y][0]);
        phi[1] = std::cos(2.0 * std::numbers::pi * freq[y][1] * tau + phase[y][1]);
        phi[2] = 2.0 * tau - 1.0;
        const double psi = std::sin(2.0 * std::numbers::pi * freq[y][2] * tau + phase[y][2]);
        for (std::size_t c = 0; c < d; ++c) {
          double content = 0.0;
          for (std::size_t k = 0; k < kBasis; ++k) content += templates[y][c * kBasis + k] * phi[k];
          content += modulation[s][y][c] * psi;
          const double x = gain[s][c] * content + offset[s][c] + spec.noise_sigma * noise(rng);
          u.features[t * d + c] = static_cast<float>(x);
        }
      }
      ds.utterances.push_back(std::move(u));
    }
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Splits.

inline std::vector<std::uint32_t> present_speakers(const Dataset& ds) {
  std::set<std::uint32_t> s;
  for (const auto& u : ds.utterances) s.insert(u.speaker);
  return {s.begin(), s.end()};
}

inline SplitManifest manifest_from_speakers(const Dataset& ds, const std::set<std::uint32_t>& train,
                                            const std::set<std::uint32_t>& validation,
                                            const std::set<std::uint32_t>& test) {
  SplitManifest m;
  for (const auto& u : ds.utterances) {
    if (train.count(u.speaker)) m.train.push_back(u.id);
    else if (validation.count(u.speaker)) m.validation.push_back(u.id);
    else if (test.count(u.speaker)) m.test.push_back(u.id);
  }
  return m;
}

/// Shuffles speakers (never utterances) and partitions them by the given
/// fractions; every utterance follows its speaker.
inline SplitManifest split_by_speaker(const Dataset& ds, double train_fraction, double validation_fraction,
                                      std::uint64_t seed) {
  auto speakers = present_speakers(ds);
  if (speakers.size() < 3) {
    throw ValidationError("split_by_speaker: need at least 3 speakers, dataset has " +
                          std::to_string(speakers.size()));
  }
  if (train_fraction <= 0 || validation_fraction <= 0 || train_fraction + validation_fraction >= 1.0) {
    throw ConfigError("split_by_speaker: fractions must be positive and leave room for a test split");
  }
  Rng rng = make_rng(seed, "split");
  std::shuffle(speakers.begin(), speakers.end(), rng);
  const auto n = static_cast<double>(speakers.size());
  std::size_t n_train = static_cast<std::size_t>(std::llround(train_fraction * n));
  std::size_t n_val = static_cast<std::size_t>(std::llround(validation_fraction * n));
  n_train = std::clamp<std::size_t>(n_train, 1, speakers.size() - 2);
  n_val = std::clamp<std::size_t>(n_val, 1, speakers.size() - n_train - 1);
  std::set<std::uint32_t> train(speakers.begin(), speakers.begin() + static_cast<std::ptrdiff_t>(n_train));
  std::set<std::uint32_t> val(speakers.begin() + static_cast<std::ptrdiff_t>(n_train),
                              speakers.begin() + static_cast<std::ptrdiff_t>(n_train + n_val));
  std::set<std::uint32_t> test(speakers.begin() + static_cast<std::ptrdiff_t>(n_train + n_val), speakers.end());
  return manifest_from_speakers(ds, train, val, test);
}

inline SplitManifest split_by_speaker(const Dataset& ds, std::uint64_t seed) {
  return split_by_speaker(ds, 0.8, 0.1, seed);
}

/// One cross-validation fold: train on every other session; the held-out
/// session's two speakers serve as validation and test, in both
/// orientations.
struct CvFold {
  std::string held_out_session;
  std::array<SplitManifest, 2> orientations;
};

inline std::vector<CvFold> make_cv_folds(const Dataset& ds, const SpeakerSessions& sessions, std::size_t k = 5) {
  std::map<std::string, std::vector<std::uint32_t>> by_session;
  for (std::uint32_t s : present_speakers(ds)) {
    auto it = sessions.find(ds.speaker_ids[s]);
    if (it == sessions.end()) throw LayoutError("speaker '" + ds.speaker_ids[s] + "' has no session tag");
    by_session[it->second].push_back(s);
  }
  if (by_session.size() != k) {
    throw LayoutError("expected " + std::to_string(k) + " sessions, found " + std::to_string(by_session.size()));
  }
  for (const auto& [name, spk] : by_session) {
    if (spk.size() != 2) {
      throw LayoutError("session '" + name + "' has " + std::to_string(spk.size()) + " speakers, expected 2");
    }
  }
  std::vector<CvFold> folds;
  for (const auto& [held, pair] : by_session) {
    std::set<std::uint32_t> train;
    for (const auto& [name, spk] : by_session)
      if (name != held) train.insert(spk.begin(), spk.end());
    CvFold f;
    f.held_out_session = held;
    f.orientations[0] = manifest_from_speakers(ds, train, {pair[0]}, {pair[1]});
    f.orientations[1] = manifest_from_speakers(ds, train, {pair[1]}, {pair[0]});
    folds.push_back(std::move(f));
  }
  return folds;
}

/// Tags speakers round-robin into `k` pseudo-sessions ("session1"...).
inline SpeakerSessions assign_pseudo_sessions(const Dataset& ds, std::size_t k) {
  SpeakerSessions s;
  const auto spk = present_speakers(ds);
  for (std::size_t i = 0; i < spk.size(); ++i) s[ds.speaker_ids[spk[i]]] = "session" + std::to_string(i % k + 1);
  return s;
}

// ---------------------------------------------------------------------------
// Batching.

/// Maps dataset speaker indices onto speaker-head classes; -1 means the
/// speaker has no class (unseen speaker).
struct SpeakerIndex {
  std::vector<int> class_of;
  std::size_t num_classes = 0;

  static SpeakerIndex for_speakers(std::size_t dataset_speakers, const std::set<std::uint32_t>& speakers) {
    SpeakerIndex m;
    m.class_of.assign(dataset_speakers, -1);
    for (auto s : speakers) m.class_of[s] = static_cast<int>(m.num_classes++);
    return m;
  }
};

/// Zero-padded B x F x L_max batch; rows of unseen speakers in the speaker
/// targets are all zero.
inline SequenceBatch make_batch(std::span<const Utterance* const> utts, std::size_t feature_dim,
                                std::size_t num_emotions, const SpeakerIndex* speakers) {
  SequenceBatch b;
  const std::size_t n = utts.size();
  std::size_t lmax = 0;
  for (const auto* u : utts) lmax = std::max<std::size_t>(lmax, u->frames);
  std::vector<double> feats(n * feature_dim * lmax, 0.0);
  const std::size_t spk_classes = speakers ? std::max<std::size_t>(speakers->num_classes, 1) : 1;
  std::vector<double> emo(n * num_emotions, 0.0), spk(n * spk_classes, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const Utterance& u = *utts[i];
    if (u.features.size() != static_cast<std::size_t>(u.frames) * feature_dim) {
      throw ContractError("make_batch: utterance '" + u.id + "' does not match feature_dim");
    }
    for (std::size_t t = 0; t < u.frames; ++t)
      for (std::size_t c = 0; c < feature_dim; ++c)
        feats[(i * feature_dim + c) * lmax + t] = static_cast<double>(u.features[t * feature_dim + c]);
    b.valid_lengths.push_back(u.frames);
    b.ids.push_back(u.id);
    if (u.emotion >= num_emotions) throw ContractError("make_batch: emotion label out of range");
    emo[i * num_emotions + u.emotion] = 1.0;
    b.emotion_labels.push_back(u.emotion);
    std::size_t cls = static_cast<std::size_t>(-1);
    if (speakers && u.speaker < speakers->class_of.size() && speakers->class_of[u.speaker] >= 0) {
      cls = static_cast<std::size_t>(speakers->class_of[u.speaker]);
      spk[i * spk_classes + cls] = 1.0;
    }
    b.speaker_labels.push_back(cls);
  }
  b.features = Tensor::from({n, feature_dim, lmax}, std::move(feats));
  b.emotion_targets = Tensor::from({n, num_emotions}, std::move(emo));
  b.speaker_targets = Tensor::from({n, spk_classes}, std::move(spk));
  return b;
}

/// Length-bucketed epoch batches: an epoch-seeded shuffle breaks length ties,
/// a stable sort by length groups similar lengths, consecutive slices form
/// batches, and the batch order is shuffled again.
inline std::vector<std::vector<const Utterance*>> plan_batches(std::span<const Utterance* const> utts,
                                                               std::size_t batch_size, std::uint64_t seed,
                                                               std::uint64_t epoch) {
  if (batch_size < 1) throw ContractError("make_batches: batch_size must be >= 1");
  std::vector<const Utterance*> order(utts.begin(), utts.end());
  Rng rng(derive_seed(seed, epoch));
  std::shuffle(order.begin(), order.end(), rng);
  std::stable_sort(order.begin(), order.end(), [](const Utterance* a, const Utterance* b) { return a->frames < b->frames; });
  std::vector<std::vector<const Utterance*>> batches;
  for (std::size_t i = 0; i < order.size(); i += batch_size) {
    batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                         order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), i + batch_size)));
  }
  std::shuffle(batches.begin(), batches.end(), rng);
  return batches;
}

inline std::vector<SequenceBatch> make_batches(std::span<const Utterance* const> utts, std::size_t batch_size,
                                               std::uint64_t seed, std::uint64_t epoch, std::size_t feature_dim,
                                               std::size_t num_emotions, const SpeakerIndex* speakers) {
  std::vector<SequenceBatch> out;
  for (const auto& plan : plan_batches(utts, batch_size, seed, epoch)) {
    out.push_back(make_batch(plan, feature_dim, num_emotions, speakers));
  }
  return out;
}

/// Deterministic evaluation batches: sorted by length (input order breaks
/// ties). `positions[k][i]` is the input position of row i of batch k.
struct EvalPlan {
  std::vector<std::vector<const Utterance*>> batches;
  std::vector<std::vector<std::size_t>> positions;
};

inline EvalPlan plan_eval_batches(std::span<const Utterance* const> utts, std::size_t batch_size) {
  if (batch_size < 1) throw ContractError("batch_size must be >= 1");
  std::vector<std::size_t> idx(utts.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return utts[a]->frames < utts[b]->frames; });
  EvalPlan p;
  for (std::size_t i = 0; i < idx.size(); i += batch_size) {
    std::vector<const Utterance*> batch;
    std::vector<std::size_t> pos;
    for (std::size_t j = i; j < std::min(idx.size(), i + batch_size); ++j) {
      batch.push_back(utts[idx[j]]);
      pos.push_back(idx[j]);
    }
    p.batches.push_back(std::move(batch));
    p.positions.push_back(std::move(pos));
  }
  return p;
}

}  // namespace serinv
