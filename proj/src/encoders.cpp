#include "cdsm/encoders.hpp"

#include <cmath>

#include "cdsm/error.hpp"

namespace cdsm {

namespace {

void check_tokens(std::span<const TokenId> tokens, std::size_t vocab, const char* op) {
  if (tokens.empty()) throw DimensionError(op, "empty document");
  for (auto t : tokens) {
    if (t >= vocab) {
      throw LookupError(std::string(op) + ": token id " + std::to_string(t) + " outside vocabulary of " +
                        std::to_string(vocab));
    }
  }
}

double glorot(std::size_t fan_in, std::size_t fan_out) {
  return std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
}

// Projections that write into the residual stream start small so the summary
// vector, and with it every initial match score, stays O(1).
constexpr double kResidualInit = 0.02;

}  // namespace

LightEncoder LightEncoder::create(ParamStore& store, const LightEncoderConfig& cfg, Rng& rng,
                                  const std::string& prefix) {
  if (cfg.vocab_size == 0 || cfg.dim == 0) throw ConfigError("light encoder needs a vocabulary and a dimension");
  if (cfg.window < 1 || cfg.window % 2 == 0) throw ConfigError("light encoder window must be odd");
  const auto d = static_cast<Eigen::Index>(cfg.dim);
  const auto w = static_cast<Eigen::Index>(cfg.window);
  store.add_uniform(prefix + ".emb", static_cast<Eigen::Index>(cfg.vocab_size), d, 0.5, rng);
  store.add_uniform(prefix + ".F", w * d, d, glorot(cfg.window * cfg.dim, cfg.dim), rng);
  store.add_constant(prefix + ".b", 1, d, 0.0);
  store.add_uniform(prefix + ".q", 1, d, 1.0, rng);
  store.add_uniform(prefix + ".Wq", d, d, glorot(cfg.dim, cfg.dim), rng);
  store.add_constant(prefix + ".bq", 1, d, 0.0);
  return bind(store, cfg, prefix);
}

LightEncoder LightEncoder::bind(ParamStore& store, const LightEncoderConfig& cfg, const std::string& prefix) {
  LightEncoder e;
  e.config = cfg;
  e.embedding = &store.get(prefix + ".emb");
  e.filters = &store.get(prefix + ".F");
  e.filter_bias = &store.get(prefix + ".b");
  e.query = &store.get(prefix + ".q");
  e.proj = &store.get(prefix + ".Wq");
  e.proj_bias = &store.get(prefix + ".bq");
  if (e.embedding->value.rows() != static_cast<Eigen::Index>(cfg.vocab_size) ||
      e.embedding->value.cols() != static_cast<Eigen::Index>(cfg.dim)) {
    throw DimensionError("LightEncoder::bind", "embedding table does not match the configuration");
  }
  return e;
}

LightEncoder::Output LightEncoder::forward(Tape& tape, std::span<const TokenId> tokens) const {
  check_tokens(tokens, config.vocab_size, "encode_light");
  Var v = cdsm::embedding(tape.param(*embedding), tokens);
  Var c = relu(conv1d_same(v, tape.param(*filters), tape.param(*filter_bias), config.window));
  Var key = tanh(affine(tape.param(*query), tape.param(*proj), tape.param(*proj_bias)));
  Var alpha = softmax(matmul_nt(key, c));
  return {matmul(alpha, c), alpha, c};
}

Tensor encode_light(const LightEncoder& enc, std::span<const TokenId> tokens) {
  Tape tape(false);
  return enc.encode(tape, tokens).value();
}

HeavyEncoder HeavyEncoder::create(ParamStore& store, const HeavyEncoderConfig& cfg, Rng& rng,
                                  const std::string& prefix) {
  if (cfg.vocab_size == 0 || cfg.dim == 0) throw ConfigError("heavy encoder needs a vocabulary and a dimension");
  if (cfg.layers < 1) throw ConfigError("heavy encoder needs at least one layer");
  if (cfg.heads == 0 || cfg.dim % cfg.heads != 0) throw ConfigError("head count must divide the dimension");
  const auto d = static_cast<Eigen::Index>(cfg.dim);
  const auto f = static_cast<Eigen::Index>(cfg.ffn_dim);
  store.add_uniform(prefix + ".emb", static_cast<Eigen::Index>(cfg.vocab_size) + 1, d, 0.1, rng);
  store.add_uniform(prefix + ".pos", static_cast<Eigen::Index>(cfg.max_len) + 1, d, 0.05, rng);
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    const std::string p = prefix + ".l" + std::to_string(l);
    store.add_constant(p + ".ln1.g", 1, d, 1.0);
    store.add_constant(p + ".ln1.b", 1, d, 0.0);
    store.add_uniform(p + ".Wqkv", d, 3 * d, glorot(cfg.dim, cfg.dim), rng);
    store.add_constant(p + ".bqkv", 1, 3 * d, 0.0);
    store.add_uniform(p + ".Wo", d, d, kResidualInit, rng);
    store.add_constant(p + ".bo", 1, d, 0.0);
    store.add_constant(p + ".ln2.g", 1, d, 1.0);
    store.add_constant(p + ".ln2.b", 1, d, 0.0);
    store.add_uniform(p + ".W1", d, f, glorot(cfg.dim, cfg.ffn_dim), rng);
    store.add_constant(p + ".b1", 1, f, 0.0);
    store.add_uniform(p + ".W2", f, d, kResidualInit, rng);
    store.add_constant(p + ".b2", 1, d, 0.0);
  }
  return bind(store, cfg, prefix);
}

HeavyEncoder HeavyEncoder::bind(ParamStore& store, const HeavyEncoderConfig& cfg, const std::string& prefix) {
  HeavyEncoder e;
  e.config = cfg;
  e.embedding = &store.get(prefix + ".emb");
  e.positions = &store.get(prefix + ".pos");
  if (e.embedding->value.rows() != static_cast<Eigen::Index>(cfg.vocab_size) + 1 ||
      e.embedding->value.cols() != static_cast<Eigen::Index>(cfg.dim)) {
    throw DimensionError("HeavyEncoder::bind", "embedding table does not match the configuration");
  }
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    const std::string p = prefix + ".l" + std::to_string(l);
    e.layers.push_back({&store.get(p + ".ln1.g"), &store.get(p + ".ln1.b"), &store.get(p + ".Wqkv"),
                        &store.get(p + ".bqkv"), &store.get(p + ".Wo"), &store.get(p + ".bo"),
                        &store.get(p + ".ln2.g"), &store.get(p + ".ln2.b"), &store.get(p + ".W1"),
                        &store.get(p + ".b1"), &store.get(p + ".W2"), &store.get(p + ".b2")});
  }
  return e;
}

Var HeavyEncoder::encode(Tape& tape, std::span<const TokenId> tokens) const {
  if (tokens.size() > config.max_len) {
    throw DimensionError("encode_heavy", "document of " + std::to_string(tokens.size()) +
                                             " tokens exceeds max_len " + std::to_string(config.max_len));
  }
  check_tokens(tokens, config.vocab_size, "encode_heavy");
  std::vector<TokenId> ids;
  ids.reserve(tokens.size() + 1);
  ids.push_back(static_cast<TokenId>(config.vocab_size));
  ids.insert(ids.end(), tokens.begin(), tokens.end());
  const auto d = static_cast<Eigen::Index>(config.dim);
  const auto h = static_cast<Eigen::Index>(config.heads);
  const Eigen::Index dh = d / h;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));

  std::vector<std::uint32_t> pos(ids.size());
  for (std::size_t i = 0; i < pos.size(); ++i) pos[i] = static_cast<std::uint32_t>(i);
  Var x = add(cdsm::embedding(tape.param(*embedding), ids), cdsm::embedding(tape.param(*positions), pos));

  for (const auto& L : layers) {
    Var a = layer_norm_rows(x, tape.param(*L.ln1_g), tape.param(*L.ln1_b));
    Var qkv = affine(a, tape.param(*L.wqkv), tape.param(*L.bqkv));
    std::vector<Var> heads;
    heads.reserve(static_cast<std::size_t>(h));
    for (Eigen::Index j = 0; j < h; ++j) {
      Var q = slice_cols(qkv, j * dh, dh);
      Var k = slice_cols(qkv, d + j * dh, dh);
      Var v = slice_cols(qkv, 2 * d + j * dh, dh);
      Var att = softmax_rows(scale(matmul_nt(q, k), inv_sqrt));
      heads.push_back(matmul(att, v));
    }
    Var o = affine(concat_cols(heads), tape.param(*L.wo), tape.param(*L.bo));
    x = add(x, o);
    Var b = layer_norm_rows(x, tape.param(*L.ln2_g), tape.param(*L.ln2_b));
    Var ff = affine(relu(affine(b, tape.param(*L.w1), tape.param(*L.b1))), tape.param(*L.w2), tape.param(*L.b2));
    x = add(x, ff);
  }
  return row(x, 0);
}

Tensor encode_heavy(const HeavyEncoder& enc, std::span<const TokenId> tokens) {
  Tape tape(false);
  return enc.encode(tape, tokens).value();
}

}  // namespace cdsm
