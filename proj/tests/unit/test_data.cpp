#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <map>
#include <set>

#include "oracles.hpp"
#include "serinv/data.hpp"

using namespace serinv;

TEST(Serf, FuzzRoundTripIsBitExact) {
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const Dataset ds = oracle::random_dataset(seed);
    EXPECT_TRUE(oracle::datasets_bit_identical(decode_serf(encode_serf(ds)), ds)) << "seed " << seed;
  }
}

TEST(Serf, EmptyDataset) {
  Dataset ds;
  ds.emotion_names = {"a", "b"};
  const Dataset back = decode_serf(encode_serf(ds));
  EXPECT_TRUE(back.utterances.empty());
  EXPECT_EQ(back, ds);
}

TEST(Serf, BadMagicNamesTheMagic) {
  auto bytes = encode_serf(oracle::random_dataset(1));
  bytes[0] = 'X';
  try {
    decode_serf(bytes);
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("XERF"), std::string::npos);
  }
}

TEST(Serf, EveryTruncationIsALengthError) {
  const auto bytes = encode_serf(oracle::random_dataset(2));
  for (std::size_t n = 0; n < bytes.size(); ++n) {
    EXPECT_THROW(decode_serf({bytes.begin(), bytes.begin() + static_cast<std::ptrdiff_t>(n)}), LengthError) << n;
  }
}

TEST(Serf, RandomCorruptionNeverCrashes) {
  std::mt19937_64 rng(3);
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    auto bytes = encode_serf(oracle::random_dataset(seed));
    for (int flips = 0; flips < 4; ++flips) bytes[rng() % bytes.size()] ^= static_cast<unsigned char>(1 + rng() % 255);
    try {
      decode_serf(bytes);
    } catch (const Error&) {
    }
  }
}

TEST(Serf, UnsupportedVersionAndTrailingBytes) {
  auto bytes = encode_serf(oracle::random_dataset(4));
  auto trailing = bytes;
  trailing.push_back(7);
  EXPECT_THROW(decode_serf(trailing), FormatError);
  bytes[4] = 9;
  EXPECT_THROW(decode_serf(bytes), FormatError);
}

TEST(Serf, FileRoundTrip) {
  const auto path = std::filesystem::temp_directory_path() / "serinv_test_roundtrip.serf";
  const Dataset ds = oracle::random_dataset(5);
  write_serf(ds, path);
  EXPECT_TRUE(oracle::datasets_bit_identical(read_serf(path), ds));
  std::filesystem::remove(path);
  EXPECT_THROW(read_serf(path), IoError);
}

TEST(Synthetic, ForcedCounts) {
  SyntheticSpec spec;
  spec.num_speakers = 10;
  spec.utterances_per_speaker = 20;
  const Dataset ds = generate_synthetic(spec);
  EXPECT_EQ(ds.utterances.size(), 200u);
  std::map<std::uint32_t, int> per_emotion;
  for (const auto& u : ds.utterances) {
    ++per_emotion[u.emotion];
    EXPECT_GE(u.frames, 80u);
    EXPECT_LE(u.frames, 300u);
  }
  for (const auto& [e, n] : per_emotion) EXPECT_EQ(n, 50) << e;
}

TEST(Synthetic, SameSeedBitIdentical) {
  SyntheticSpec spec;
  spec.num_speakers = 3;
  spec.utterances_per_speaker = 4;
  spec.seed = 17;
  EXPECT_TRUE(oracle::datasets_bit_identical(generate_synthetic(spec), generate_synthetic(spec)));
  SyntheticSpec other = spec;
  other.seed = 18;
  EXPECT_FALSE(oracle::datasets_bit_identical(generate_synthetic(spec), generate_synthetic(other)));
}

TEST(Synthetic, NoSpeakerFactorsMeansSpeakerIndependentMeans) {
  SyntheticSpec spec;
  spec.num_speakers = 4;
  spec.utterances_per_speaker = 40;
  spec.speaker_offset_scale = 0.0;
  spec.gain_min = spec.gain_max = 1.0;
  spec.interaction_scale = 0.0;
  spec.seed = 21;
  const Dataset ds = generate_synthetic(spec);
  std::vector<std::vector<double>> sum(4, std::vector<double>(ds.feature_dim, 0.0));
  std::vector<double> frames(4, 0.0);
  for (const auto& u : ds.utterances) {
    frames[u.speaker] += u.frames;
    for (std::size_t t = 0; t < u.frames; ++t)
      for (std::size_t c = 0; c < ds.feature_dim; ++c) sum[u.speaker][c] += u.at(c, t, ds.feature_dim);
  }
  // Two-sample bound 3 sigma sqrt(1/n0 + 1/n1) on frame means.
  for (std::size_t s = 1; s < 4; ++s)
    for (std::size_t c = 0; c < ds.feature_dim; ++c) {
      const double diff = std::abs(sum[0][c] / frames[0] - sum[s][c] / frames[s]);
      EXPECT_LT(diff, 3.0 * spec.noise_sigma * std::sqrt(1.0 / frames[0] + 1.0 / frames[s]))
          << "speaker " << s << " channel " << c;
    }
}

TEST(Synthetic, RejectsLengthBelowReceptiveField) {
  SyntheticSpec spec;
  spec.min_length = 10;
  spec.max_length = 20;
  EXPECT_THROW(generate_synthetic(spec, 17), SpecError);
  EXPECT_THROW(json::parse(R"({"num_speakrs": 3})").get<SyntheticSpec>(), ConfigError);
}

TEST(Split, PaperSpeakerCounts) {
  SyntheticSpec spec;
  spec.num_speakers = 250;
  spec.utterances_per_speaker = 1;
  spec.feature_dim = 2;
  spec.min_length = spec.max_length = 3;
  const Dataset ds = generate_synthetic(spec);
  const auto m = split_by_speaker(ds, 0.8, 0.1, 7);
  const auto s = split_speakers(ds, m);
  EXPECT_EQ(s.train.size(), 200u);
  EXPECT_EQ(s.validation.size(), 25u);
  EXPECT_EQ(s.test.size(), 25u);
  EXPECT_TRUE(s.overlapping.empty());
  EXPECT_EQ(m.train.size() + m.validation.size() + m.test.size(), ds.utterances.size());
}

TEST(Split, EveryUtteranceExactlyOnce) {
  const auto c = oracle::five_session_corpus(3);
  const auto m = split_by_speaker(c.dataset, 0.6, 0.2, 1);
  std::multiset<std::string> ids(m.train.begin(), m.train.end());
  ids.insert(m.validation.begin(), m.validation.end());
  ids.insert(m.test.begin(), m.test.end());
  EXPECT_EQ(ids.size(), c.dataset.utterances.size());
  for (const auto& u : c.dataset.utterances) EXPECT_EQ(ids.count(u.id), 1u);
}

TEST(Split, OverlapIsReportedByName) {
  const auto c = oracle::five_session_corpus(4);
  auto m = split_by_speaker(c.dataset, 0.6, 0.2, 1);
  m.test.push_back(m.train.front());
  try {
    require_disjoint(c.dataset, m);
    FAIL();
  } catch (const SplitError& e) {
    EXPECT_EQ(e.speakers(), std::vector<std::string>{c.dataset.speaker_ids[c.dataset.find(m.train.front()).speaker]});
  }
}

TEST(CvFolds, SessionProtocol) {
  const auto c = oracle::five_session_corpus(5);
  const auto folds = make_cv_folds(c.dataset, c.sessions, 5);
  ASSERT_EQ(folds.size(), 5u);
  std::set<std::string> held;
  for (const auto& f : folds) {
    held.insert(f.held_out_session);
    for (const auto& m : f.orientations) {
      const auto s = split_speakers(c.dataset, m);
      EXPECT_EQ(s.train.size(), 8u);
      ASSERT_EQ(s.validation.size(), 1u);
      ASSERT_EQ(s.test.size(), 1u);
      EXPECT_TRUE(s.overlapping.empty());
      EXPECT_EQ(c.sessions.at(c.dataset.speaker_ids[*s.validation.begin()]), f.held_out_session);
      EXPECT_EQ(c.sessions.at(c.dataset.speaker_ids[*s.test.begin()]), f.held_out_session);
      for (auto spk : s.train) EXPECT_NE(c.sessions.at(c.dataset.speaker_ids[spk]), f.held_out_session);
    }
    EXPECT_EQ(split_speakers(c.dataset, f.orientations[0]).test, split_speakers(c.dataset, f.orientations[1]).validation);
  }
  EXPECT_EQ(held.size(), 5u);
}

TEST(CvFolds, PseudoSessionsOnSyntheticData) {
  SyntheticSpec spec;
  spec.num_speakers = 10;
  spec.utterances_per_speaker = 2;
  spec.feature_dim = 2;
  spec.min_length = spec.max_length = 4;
  const Dataset ds = generate_synthetic(spec);
  for (const auto& f : make_cv_folds(ds, assign_pseudo_sessions(ds, 5), 5))
    for (const auto& m : f.orientations) EXPECT_NO_THROW(require_disjoint(ds, m));
}

TEST(CvFolds, RejectsWrongLayout) {
  auto c = oracle::five_session_corpus(6);
  c.sessions[c.dataset.speaker_ids[0]] = "session2";
  EXPECT_THROW(make_cv_folds(c.dataset, c.sessions, 5), LayoutError);
  c.sessions.erase(c.dataset.speaker_ids[0]);
  EXPECT_THROW(make_cv_folds(c.dataset, c.sessions, 5), LayoutError);
}

TEST(Batching, SizesPaddingAndShuffle) {
  SyntheticSpec spec;
  spec.num_speakers = 5;
  spec.utterances_per_speaker = 20;
  spec.feature_dim = 2;
  spec.min_length = 3;
  spec.max_length = 9;
  const Dataset ds = generate_synthetic(spec);
  std::vector<const Utterance*> utts;
  for (const auto& u : ds.utterances) utts.push_back(&u);
  const auto e0 = plan_batches(utts, 32, 1, 0);
  std::multiset<std::size_t> sizes;
  for (const auto& b : e0) sizes.insert(b.size());
  EXPECT_EQ(sizes, (std::multiset<std::size_t>{32, 32, 32, 4}));
  const auto e1 = plan_batches(utts, 32, 1, 1);
  std::multiset<const Utterance*> a, b;
  std::vector<const Utterance*> order0, order1;
  for (const auto& x : e0) a.insert(x.begin(), x.end()), order0.insert(order0.end(), x.begin(), x.end());
  for (const auto& x : e1) b.insert(x.begin(), x.end()), order1.insert(order1.end(), x.begin(), x.end());
  EXPECT_EQ(a, b);
  EXPECT_NE(order0, order1);

  const auto batch = make_batch(e0.front(), ds.feature_dim, ds.num_emotions(), nullptr);
  const std::size_t len = batch.features.dim(2);
  for (std::size_t i = 0; i < batch.size(); ++i)
    for (std::size_t c = 0; c < ds.feature_dim; ++c)
      for (std::size_t t = batch.valid_lengths[i]; t < len; ++t)
        EXPECT_EQ(batch.features.values()[(i * ds.feature_dim + c) * len + t], 0.0);
}
