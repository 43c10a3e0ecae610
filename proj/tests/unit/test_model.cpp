#include <gtest/gtest.h>

#include <random>
#include <vector>

#include "serinv/model.hpp"

using namespace serinv;
using ad::Tensor;

namespace {

Sequence random_input(std::size_t batch, std::size_t feat, std::vector<std::size_t> lengths, std::uint64_t seed) {
  std::size_t len = 0;
  for (auto l : lengths) len = std::max(len, l);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, 1.0);
  std::vector<double> v(batch * feat * len, 0.0);
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t f = 0; f < feat; ++f)
      for (std::size_t t = 0; t < lengths[b]; ++t) v[(b * feat + f) * len + t] = n(rng);
  return {Tensor::from({batch, feat, len}, std::move(v)), std::move(lengths)};
}

bool same_parameters(const Model& a, const Model& b) {
  const auto pa = a.state(), pb = b.state();
  if (pa.size() != pb.size()) return false;
  for (std::size_t i = 0; i < pa.size(); ++i)
    if (pa[i].name != pb[i].name || pa[i].tensor.values() != pb[i].tensor.values()) return false;
  return true;
}

}  // namespace

TEST(ModelConfig, IemocapReceptiveFieldAndEmbedding) {
  const auto c = ModelConfig::iemocap();
  EXPECT_EQ(c.min_frames(), 17u);
  EXPECT_EQ(c.embedding_dim(), 512u);
}

TEST(ModelConfig, PresetsMatchTableOne) {
  const auto m = ModelConfig::mandarin();
  EXPECT_EQ(m.tdnn2.channels, 128u);
  EXPECT_EQ(m.embedding_dim(), 1024u);
  EXPECT_EQ(m.speaker_head.num_classes, 200u);
  EXPECT_THROW(ModelConfig::preset("huge"), ConfigError);
}

TEST(ModelConfig, JsonRoundTripAndUnknownKeys) {
  const auto c = ModelConfig::small();
  EXPECT_EQ(json(c).get<ModelConfig>(), c);
  const auto p = json::parse(R"({"preset":"tiny","lstm_hidden":5})").get<ModelConfig>();
  EXPECT_EQ(p.lstm_hidden, 5u);
  EXPECT_EQ(p.tdnn1.channels, 4u);
  EXPECT_THROW(json::parse(R"({"lstm_hiden":5})").get<ModelConfig>(), ConfigError);
}

TEST(Model, SameSeedBitIdenticalParameters) {
  const auto a = Model::build(ModelConfig::tiny(), 42);
  const auto b = Model::build(ModelConfig::tiny(), 42);
  const auto c = Model::build(ModelConfig::tiny(), 43);
  EXPECT_TRUE(same_parameters(a, b));
  EXPECT_FALSE(same_parameters(a, c));
}

TEST(Model, IemocapOutputShapes) {
  Model m = Model::build(ModelConfig::iemocap(), 1);
  const auto out = m.forward(random_input(3, 39, {20, 17, 25}, 2), ForwardOptions{});
  EXPECT_EQ(out.embedding.shape(), (ad::Shape{3, 512}));
  EXPECT_EQ(out.emotion_logits.shape(), (ad::Shape{3, 4}));
  EXPECT_EQ(out.speaker_logits.shape(), (ad::Shape{3, 8}));
}

TEST(Model, GradientReversalIsForwardIdentity) {
  Model m = Model::build(ModelConfig::tiny(), 3);
  const auto x = random_input(2, 39, {7, 9}, 4);
  ForwardOptions plain;
  ForwardOptions grl;
  grl.grl_lambda = 1.0;
  const auto a = m.forward(x, plain);
  const auto b = m.forward(x, grl);
  EXPECT_EQ(a.embedding.values(), b.embedding.values());
  EXPECT_EQ(a.emotion_logits.values(), b.emotion_logits.values());
  EXPECT_EQ(a.speaker_logits.values(), b.speaker_logits.values());
}

TEST(Model, EvalModeIsDeterministic) {
  Model m = Model::build(ModelConfig::tiny(), 5);
  const auto x = random_input(2, 39, {6, 8}, 6);
  EXPECT_EQ(m.forward(x, {}).embedding.values(), m.forward(x, {}).embedding.values());
}

TEST(Model, TrainingDropoutNeedsStreams) {
  Model m = Model::build(ModelConfig::tiny(), 5);
  ForwardOptions opt;
  opt.training = true;
  EXPECT_THROW(m.forward(random_input(2, 39, {6, 8}, 6), opt), ContractError);
}

TEST(Model, MinimumLengthBoundary) {
  Model m = Model::build(ModelConfig::tiny(), 7);
  const std::size_t need = m.min_frames();
  EXPECT_NO_THROW(m.forward(random_input(1, 39, {need}, 8), {}));
  const std::vector<std::string> ids{"utt_short"};
  try {
    m.forward(random_input(1, 39, {need - 1}, 8), {}, ids);
    FAIL() << "expected TooShortError";
  } catch (const TooShortError& e) {
    EXPECT_EQ(e.utterance_id(), "utt_short");
    EXPECT_EQ(e.required(), need);
  }
}

TEST(Model, PaddingDoesNotChangeEmbedding) {
  Model m = Model::build(ModelConfig::tiny(), 9);
  const auto x = random_input(2, 39, {12, 7}, 10);
  const auto batched = m.forward(x, {}).embedding;
  std::vector<double> single;
  for (std::size_t f = 0; f < 39; ++f)
    for (std::size_t t = 0; t < 7; ++t) single.push_back(x.values.values()[(39 + f) * 12 + t]);
  const auto alone = m.forward({Tensor::from({1, 39, 7}, single), {7}}, {}).embedding;
  const std::size_t d = alone.numel();
  for (std::size_t i = 0; i < d; ++i) EXPECT_NEAR(batched.values()[d + i], alone.values()[i], 1e-12);
}

TEST(Checkpoint, RoundTripIsBitExact) {
  const Model m = Model::build(ModelConfig::tiny(), 11);
  const Model r = Model::deserialize(m.serialize());
  EXPECT_EQ(r.config(), m.config());
  EXPECT_TRUE(same_parameters(m, r));
}

TEST(Checkpoint, CorruptionIsRejected) {
  auto bytes = Model::build(ModelConfig::tiny(), 12).serialize();
  auto bad_magic = bytes;
  bad_magic[0] = 'X';
  EXPECT_THROW(Model::deserialize(bad_magic), FormatError);
  auto truncated = bytes;
  truncated.resize(truncated.size() - 3);
  EXPECT_THROW(Model::deserialize(truncated), LengthError);
  auto trailing = bytes;
  trailing.push_back(0);
  EXPECT_THROW(Model::deserialize(trailing), FormatError);
}

TEST(Model, CloneSharesNoStorage) {
  Model a = Model::build(ModelConfig::tiny(), 13);
  Model b = a.clone();
  a.parameters()[0].tensor.data()[0] += 1.0;
  EXPECT_NE(a.parameters()[0].tensor.values()[0], b.parameters()[0].tensor.values()[0]);
}
