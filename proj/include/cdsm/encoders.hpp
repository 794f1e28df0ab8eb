#pragma once

#include <span>
#include <string>

#include "cdsm/graphstore.hpp"
#include "cdsm/numerics.hpp"

namespace cdsm {

// CNN + word-attention encoder used by the selector.
//   c_i = ReLU(F [v_{i-k} .. v_{i+k}] + b)       (zero-padded window 2k+1)
//   alpha = softmax_i(c_i . tanh(W_q q_w + b_q))
//   r = sum_i alpha_i c_i
struct LightEncoderConfig {
  std::size_t vocab_size = 0;
  std::size_t dim = 64;
  int window = 3;
};

struct LightEncoder {
  LightEncoderConfig config;
  Parameter* embedding = nullptr;  // vocab x d
  Parameter* filters = nullptr;    // (window*d) x d
  Parameter* filter_bias = nullptr;
  Parameter* query = nullptr;      // q_w, 1 x d
  Parameter* proj = nullptr;       // W_q, d x d
  Parameter* proj_bias = nullptr;  // b_q

  // Registers parameters named "<prefix>.*" in `store`.
  static LightEncoder create(ParamStore& store, const LightEncoderConfig& config, Rng& rng,
                             const std::string& prefix = "light");
  // Rebinds to parameters already present in `store` (e.g. after copying the store).
  static LightEncoder bind(ParamStore& store, const LightEncoderConfig& config, const std::string& prefix = "light");

  struct Output {
    Var r;      // 1 x d
    Var alpha;  // 1 x n
    Var c;      // n x d
  };
  // Throws LookupError for a token outside the vocabulary, DimensionError for an empty document.
  Output forward(Tape& tape, std::span<const TokenId> tokens) const;
  Var encode(Tape& tape, std::span<const TokenId> tokens) const { return forward(tape, tokens).r; }
};

// Value-only convenience: the light encoding of one document.
Tensor encode_light(const LightEncoder& enc, std::span<const TokenId> tokens);

// Pre-LN transformer with a leading summary token; output is the summary
// token's final hidden state.
struct HeavyEncoderConfig {
  std::size_t vocab_size = 0;  // the summary token uses embedding row vocab_size
  std::size_t dim = 64;
  std::size_t layers = 2;
  std::size_t heads = 4;
  std::size_t ffn_dim = 256;
  std::size_t max_len = 32;  // document tokens; positions = max_len + 1
};

struct HeavyEncoder {
  struct Layer {
    Parameter *ln1_g, *ln1_b, *wqkv, *bqkv, *wo, *bo, *ln2_g, *ln2_b, *w1, *b1, *w2, *b2;
  };
  HeavyEncoderConfig config;
  Parameter* embedding = nullptr;  // (vocab+1) x d
  Parameter* positions = nullptr;  // (max_len+1) x d
  std::vector<Layer> layers;

  static HeavyEncoder create(ParamStore& store, const HeavyEncoderConfig& config, Rng& rng,
                             const std::string& prefix = "heavy");
  static HeavyEncoder bind(ParamStore& store, const HeavyEncoderConfig& config, const std::string& prefix = "heavy");

  // Throws DimensionError for an empty or over-length document, LookupError for an unknown token.
  Var encode(Tape& tape, std::span<const TokenId> tokens) const;
};

Tensor encode_heavy(const HeavyEncoder& enc, std::span<const TokenId> tokens);

}  // namespace cdsm
