#include <gtest/gtest.h>

#include "cdsm/encoders.hpp"
#include "cdsm/error.hpp"

using namespace cdsm;

namespace {

struct Light {
  ParamStore store;
  LightEncoder enc;
  explicit Light(std::size_t vocab = 12, std::size_t dim = 6, std::uint64_t seed = 1) {
    auto rng = make_rng(seed);
    enc = LightEncoder::create(store, {vocab, dim, 3}, rng);
  }
};

struct Heavy {
  ParamStore store;
  HeavyEncoder enc;
  explicit Heavy(std::size_t vocab = 12, std::size_t dim = 8, std::size_t layers = 2, std::uint64_t seed = 1) {
    auto rng = make_rng(seed);
    HeavyEncoderConfig c;
    c.vocab_size = vocab;
    c.dim = dim;
    c.layers = layers;
    c.heads = 2;
    c.ffn_dim = 12;
    c.max_len = 6;
    enc = HeavyEncoder::create(store, c, rng);
  }
};

}  // namespace

TEST(LightEncoder, SingleTokenDocumentIsItsOwnFeature) {
  Light l;
  std::vector<TokenId> doc = {4};
  Tape t;
  auto out = l.enc.forward(t, doc);
  ASSERT_EQ(out.alpha.cols(), 1);
  EXPECT_EQ(out.alpha.value()(0, 0), 1.0);
  EXPECT_EQ(out.r.value(), out.c.value());
}

TEST(LightEncoder, AttentionIsADistributionAndOutputInHull) {
  Light l(30, 8, 4);
  auto rng = make_rng(9);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<TokenId> doc(1 + uniform_index(rng, 10));
    for (auto& x : doc) x = static_cast<TokenId>(uniform_index(rng, 30));
    Tape t;
    auto out = l.enc.forward(t, doc);
    const Tensor& a = out.alpha.value();
    EXPECT_NEAR(a.sum(), 1.0, 1e-12);
    EXPECT_GE(a.minCoeff(), 0.0);
    double max_norm = 0.0;
    for (Eigen::Index i = 0; i < out.c.rows(); ++i) max_norm = std::max(max_norm, out.c.value().row(i).norm());
    EXPECT_LE(out.r.value().norm(), max_norm + 1e-12);
  }
}

TEST(LightEncoder, PureFunctionOfTokens) {
  Light l;
  std::vector<TokenId> a = {1, 2, 3}, b = {1, 2, 3};
  EXPECT_EQ(encode_light(l.enc, a), encode_light(l.enc, b));
}

TEST(LightEncoder, ErrorsOnEmptyAndUnknownTokens) {
  Light l;
  std::vector<TokenId> empty, bad = {1, 99};
  EXPECT_THROW(encode_light(l.enc, empty), DimensionError);
  EXPECT_THROW(encode_light(l.enc, bad), LookupError);
}

TEST(LightEncoder, GradCheckOnThreeTokenDocument) {
  Light l(10, 5, 2);
  std::vector<TokenId> doc = {2, 7, 3};
  std::vector<TokenId> other = {1, 4};
  auto r = grad_check([&](Tape& t, ParamStore&) { return dot(l.enc.encode(t, doc), l.enc.encode(t, other)); },
                      l.store);
  EXPECT_LE(r.max_rel_error, 1e-4) << r.worst_param;
}

TEST(HeavyEncoder, OutputDimensionAndPurity) {
  Heavy h;
  for (std::size_t len = 1; len <= 6; ++len) {
    std::vector<TokenId> doc(len, 3);
    auto v = encode_heavy(h.enc, doc);
    EXPECT_EQ(v.rows(), 1);
    EXPECT_EQ(v.cols(), 8);
    EXPECT_EQ(v, encode_heavy(h.enc, doc));
  }
}

TEST(HeavyEncoder, PositionSensitive) {
  Heavy h;
  std::vector<TokenId> a = {1, 2, 3, 4}, b = {1, 3, 2, 4};
  EXPECT_NE(encode_heavy(h.enc, a), encode_heavy(h.enc, b));
}

TEST(HeavyEncoder, OverLengthIsDimensionError) {
  Heavy h;
  std::vector<TokenId> doc(7, 1), empty;
  EXPECT_THROW(encode_heavy(h.enc, doc), DimensionError);
  EXPECT_THROW(encode_heavy(h.enc, empty), DimensionError);
  std::vector<TokenId> unknown = {12};  // row 12 is the summary token, not a word
  EXPECT_THROW(encode_heavy(h.enc, unknown), LookupError);
}

TEST(HeavyEncoder, GradCheckEndToEnd) {
  Heavy h(9, 8, 2, 3);
  std::vector<TokenId> a = {2, 7, 3}, b = {1, 4, 4, 8};
  auto r = grad_check([&](Tape& t, ParamStore&) { return dot(h.enc.encode(t, a), h.enc.encode(t, b)); }, h.store);
  EXPECT_LE(r.max_rel_error, 1e-4) << r.worst_param;
}

TEST(HeavyEncoder, BindRecoversTheSameFunction) {
  Heavy h;
  ParamStore copy = h.store;
  auto rebound = HeavyEncoder::bind(copy, h.enc.config);
  std::vector<TokenId> doc = {5, 6, 7};
  EXPECT_EQ(encode_heavy(rebound, doc), encode_heavy(h.enc, doc));
}

TEST(HeavyEncoder, RejectsHeadsNotDividingDim) {
  ParamStore ps;
  auto rng = make_rng(1);
  HeavyEncoderConfig c;
  c.vocab_size = 5;
  c.dim = 6;
  c.heads = 4;
  EXPECT_THROW(HeavyEncoder::create(ps, c, rng), ConfigError);
}
