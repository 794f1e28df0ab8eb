#include "cdsm/matcher.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <unordered_map>

#include "cdsm/error.hpp"
#include "cdsm/random.hpp"
#include "json.hpp"

namespace cdsm {

std::string_view aggregator_name(AggregatorKind k) {
  switch (k) {
    case AggregatorKind::GAT: return "gat";
    case AggregatorKind::Mean: return "mean";
    case AggregatorKind::Max: return "max";
    case AggregatorKind::Attn: return "attn";
    case AggregatorKind::CP: return "cp";
  }
  return "?";
}

AggregatorKind parse_aggregator(std::string_view s) {
  for (auto k : {AggregatorKind::GAT, AggregatorKind::Mean, AggregatorKind::Max, AggregatorKind::Attn,
                 AggregatorKind::CP}) {
    if (aggregator_name(k) == s) return k;
  }
  throw ConfigError("unknown aggregator '" + std::string(s) + "' (expected gat|mean|max|attn|cp)");
}

std::string_view loss_mode_name(LossMode m) { return m == LossMode::Log ? "log" : "literal"; }

LossMode parse_loss_mode(std::string_view s) {
  if (s == "log") return LossMode::Log;
  if (s == "literal") return LossMode::Literal;
  throw ConfigError("unknown loss mode '" + std::string(s) + "' (expected log|literal)");
}

// ---- MatchModel ------------------------------------------------------------

MatchModel::MatchModel(const MatchModelConfig& config, std::uint64_t seed) : config_(config) {
  auto rng = make_rng(seed, {0x6d6174636865ULL});
  HeavyEncoder::create(store_, config_.encoder, rng);
  const auto d = static_cast<Eigen::Index>(config_.encoder.dim);
  store_.add_uniform("agg.Wc", 2 * d, d, std::sqrt(6.0 / static_cast<double>(3 * d)), rng);
  store_.add_constant("agg.bc", 1, d, 0.0);
  bind();
}

MatchModel::MatchModel(const MatchModel& other) : config_(other.config_), store_(other.store_) { bind(); }

MatchModel& MatchModel::operator=(const MatchModel& other) {
  if (this != &other) {
    config_ = other.config_;
    store_ = other.store_;
    bind();
  }
  return *this;
}

void MatchModel::bind() {
  encoder_ = HeavyEncoder::bind(store_, config_.encoder);
  wc_ = &store_.get("agg.Wc");
  bc_ = &store_.get("agg.bc");
}

void MatchModel::save(const std::filesystem::path& path) const {
  const auto& e = config_.encoder;
  nlohmann::json h = {{"model", "matcher"},
                      {"aggregator", aggregator_name(config_.kind)},
                      {"vocab_size", e.vocab_size},
                      {"dim", e.dim},
                      {"layers", e.layers},
                      {"heads", e.heads},
                      {"ffn_dim", e.ffn_dim},
                      {"max_len", e.max_len}};
  save_checkpoint(store_, h.dump(), path);
}

MatchModel MatchModel::load(const std::filesystem::path& path) {
  auto h = nlohmann::json::parse(read_checkpoint_header(path));
  if (h.value("model", "") != "matcher") throw ParseError(path.string(), 0, "not a matcher checkpoint");
  MatchModelConfig cfg;
  cfg.kind = parse_aggregator(h.at("aggregator").get<std::string>());
  cfg.encoder.vocab_size = h.at("vocab_size");
  cfg.encoder.dim = h.at("dim");
  cfg.encoder.layers = h.at("layers");
  cfg.encoder.heads = h.at("heads");
  cfg.encoder.ffn_dim = h.at("ffn_dim");
  cfg.encoder.max_len = h.at("max_len");
  MatchModel m(cfg, 0);
  load_checkpoint(m.store_, path);
  return m;
}

// ---- aggregation -----------------------------------------------------------

namespace {

bool lex_less(const Tensor& a, const Tensor& b) {
  return std::lexicographical_compare(a.data(), a.data() + a.size(), b.data(), b.data() + b.size());
}

std::vector<std::size_t> canonical_order(std::span<const Var> xs) {
  std::vector<std::size_t> idx(xs.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(),
                   [&](std::size_t a, std::size_t b) { return lex_less(xs[a].value(), xs[b].value()); });
  return idx;
}

void require_dim(const char* op, Var v, Eigen::Index d) {
  if (v.rows() != 1 || v.cols() != d) {
    throw DimensionError(op, "expected 1x" + std::to_string(d) + ", got " + std::to_string(v.rows()) + "x" +
                                 std::to_string(v.cols()));
  }
}

}  // namespace

Aggregation aggregate_detailed(Tape& tape, Var center, std::span<const Var> neighbors, Var counterpart,
                               const MatchModel& model) {
  const auto d = static_cast<Eigen::Index>(model.dim());
  require_dim("aggregate", center, d);
  require_dim("aggregate", counterpart, d);
  for (const auto& n : neighbors) require_dim("aggregate", n, d);

  const auto kind = model.kind();
  auto order = canonical_order(neighbors);
  std::vector<Var> sorted;
  sorted.reserve(neighbors.size() + 1);
  if (kind == AggregatorKind::GAT) sorted.push_back(center);
  for (auto i : order) sorted.push_back(neighbors[i]);

  Aggregation out;
  if (kind == AggregatorKind::GAT) {
    Var rows = stack_rows(sorted);
    Var w = softmax(matmul_nt(center, rows));
    out.out = matmul(w, rows);
    out.pooled = out.out;
    out.weights.assign(neighbors.size() + 1, 0.0);
    out.weights[0] = w.value()(0, 0);
    for (std::size_t j = 0; j < order.size(); ++j) out.weights[order[j] + 1] = w.value()(0, j + 1);
    return out;
  }

  if (neighbors.empty()) {
    out.pooled = tape.constant(Tensor::Zero(1, d));
  } else {
    Var rows = stack_rows(sorted);
    switch (kind) {
      case AggregatorKind::Mean: out.pooled = mean_pool(rows); break;
      case AggregatorKind::Max: out.pooled = max_pool_rows(rows); break;
      case AggregatorKind::Attn:
      case AggregatorKind::CP: {
        Var target = kind == AggregatorKind::Attn ? center : counterpart;
        Var w = softmax(matmul_nt(target, rows));
        out.pooled = matmul(w, rows);
        out.weights.assign(neighbors.size(), 0.0);
        for (std::size_t j = 0; j < order.size(); ++j) out.weights[order[j]] = w.value()(0, j);
        break;
      }
      case AggregatorKind::GAT: break;
    }
  }
  out.out = relu(affine(concat(center, out.pooled), tape.param(model.combine_weight()),
                        tape.param(model.combine_bias())));
  return out;
}

Var aggregate(Tape& tape, Var center, std::span<const Var> neighbors, Var counterpart, const MatchModel& model) {
  return aggregate_detailed(tape, center, neighbors, counterpart, model).out;
}

Var match_score(Tape& tape, const MatchModel& model, Var query, std::span<const Var> query_neighbors, Var key,
                std::span<const Var> key_neighbors) {
  Var q = aggregate(tape, query, query_neighbors, key, model);
  Var k = aggregate(tape, key, key_neighbors, query, model);
  return dot(q, k);
}

Encodings encode_all_heavy(const MatchModel& model, const TextGraph& g) {
  Encodings out;
  out.reserve(g.size());
  for (NodeId n = 0; n < g.size(); ++n) out.push_back(encode_heavy(model.encoder(), g.doc(n).tokens));
  return out;
}

double match_score_cached(const MatchModel& model, const Encodings& enc, NodeId query,
                          std::span<const NodeId> query_neighbors, NodeId key, std::span<const NodeId> key_neighbors) {
  Tape tape(false);
  auto lift = [&](std::span<const NodeId> ids) {
    std::vector<Var> v;
    v.reserve(ids.size());
    for (auto id : ids) v.push_back(tape.constant(enc.at(id)));
    return v;
  };
  Var q = tape.constant(enc.at(query));
  Var k = tape.constant(enc.at(key));
  auto qn = lift(query_neighbors);
  auto kn = lift(key_neighbors);
  return match_score(tape, model, q, qn, k, kn).scalar();
}

// ---- loss ------------------------------------------------------------------

Var matcher_loss_from_scores(Var scores, LossMode mode) {
  const auto b = scores.rows();
  if (b < 2) throw ConfigError("matcher_loss needs a batch of at least 2 rows for in-batch negatives");
  if (scores.cols() != b) throw DimensionError("matcher_loss", "score matrix must be square");
  std::vector<Var> terms;
  terms.reserve(static_cast<std::size_t>(b));
  for (Eigen::Index i = 0; i < b; ++i) {
    Var r = row(scores, i);
    Var t = mode == LossMode::Log ? element(log_softmax(r), 0, i) : element(softmax(r), 0, i);
    terms.push_back(t);
  }
  return scale(sum(stack_rows(terms)), -1.0 / static_cast<double>(b));
}

Var matcher_loss(Tape& tape, const MatchModel& model, std::span<const MatchBatchRow> batch, LossMode mode) {
  const std::size_t b = batch.size();
  if (b < 2) throw ConfigError("matcher_loss needs a batch of at least 2 rows for in-batch negatives");
  std::vector<Var> rows;
  rows.reserve(b);
  for (std::size_t i = 0; i < b; ++i) {
    std::vector<Var> cells;
    cells.reserve(b);
    for (std::size_t j = 0; j < b; ++j) {
      cells.push_back(match_score(tape, model, batch[i].query, batch[i].query_neighbors, batch[j].key,
                                  batch[j].key_neighbors));
    }
    rows.push_back(concat_cols(cells));
  }
  return matcher_loss_from_scores(stack_rows(rows), mode);
}

// ---- training --------------------------------------------------------------

namespace {

struct BatchBuilder {
  const TextGraph& g;
  const MatchModel& model;
  Tape& tape;
  std::unordered_map<NodeId, Var> cache;

  Var encode(NodeId n) {
    auto it = cache.find(n);
    if (it != cache.end()) return it->second;
    Var v = model.encoder().encode(tape, g.doc(n).tokens);
    cache.emplace(n, v);
    return v;
  }
  std::vector<Var> encode_all(std::span<const NodeId> ids) {
    std::vector<Var> out;
    out.reserve(ids.size());
    for (auto id : ids) out.push_back(encode(id));
    return out;
  }
};

}  // namespace

MatcherTrainResult train_matcher(const TextGraph& g, std::span<const MatchTask> tasks,
                                 const MatchModelConfig& model_config, const MatcherTrainConfig& cfg) {
  if (tasks.empty()) throw ConfigError("train_matcher needs a non-empty training split");
  if (cfg.batch_size < 2) throw ConfigError("matcher batch_size must be at least 2");
  if (cfg.min_neighbors > cfg.neighbors_per_side) throw ConfigError("min_neighbors exceeds neighbors_per_side");
  MatcherTrainResult res{MatchModel(model_config, cfg.seed), {}};
  MatchModel& model = res.model;
  const AdamConfig adam{cfg.lr};

  auto order_rng = make_rng(cfg.seed, {0x6f72646572ULL});
  std::vector<std::size_t> order(tasks.size());
  std::iota(order.begin(), order.end(), 0);
  shuffle(order, order_rng);
  std::size_t cursor = 0;

  for (std::size_t step = 0; step < cfg.steps; ++step) {
    auto rng = make_rng(cfg.seed, {0x73746570ULL, step});
    std::vector<std::size_t> picked;
    while (picked.size() < std::min(cfg.batch_size, tasks.size())) {
      if (cursor == order.size()) {
        shuffle(order, order_rng);
        cursor = 0;
      }
      picked.push_back(order[cursor++]);
    }
    if (picked.size() < 2) throw ConfigError("train_matcher needs at least 2 training tasks");

    Tape tape(true);
    BatchBuilder bb{g, model, tape, {}};
    std::vector<MatchBatchRow> batch;
    batch.reserve(picked.size());
    auto draw = [&](const std::vector<NodeId>& list) {
      const std::size_t span = cfg.neighbors_per_side - cfg.min_neighbors;
      const std::size_t k = cfg.min_neighbors + (span ? uniform_index(rng, span + 1) : 0);
      return sample_without_replacement(list, k, rng);
    };
    for (auto i : picked) {
      const auto& t = tasks[i];
      auto qn = draw(t.query_neighbors.neighbors);
      auto kn = draw(t.key_neighbors.at(0).neighbors);
      batch.push_back({bb.encode(t.query), bb.encode_all(qn), bb.encode(t.positive_key), bb.encode_all(kn)});
    }
    model.params().zero_grad();
    Var loss = matcher_loss(tape, model, batch, cfg.loss);
    const double lv = loss.scalar();
    if (!std::isfinite(lv)) throw TrainingError(step, "matcher loss is not finite");
    tape.backward(loss);
    try {
      adam_step(model.params(), adam);
    } catch (const NumericError& e) {
      throw TrainingError(step, e.what());
    }
    res.loss_curve.push_back(lv);
  }
  return res;
}

double evaluate_matcher_loss(const MatchModel& model, const TextGraph& g, std::span<const MatchTask> tasks,
                             std::size_t batch_size, std::size_t neighbors_per_side, LossMode mode) {
  if (batch_size < 2 || tasks.size() < 2) throw ConfigError("evaluate_matcher_loss needs at least 2 tasks per batch");
  double total = 0.0;
  std::size_t batches = 0;
  for (std::size_t start = 0; start + 1 < tasks.size(); start += batch_size) {
    const std::size_t end = std::min(tasks.size(), start + batch_size);
    if (end - start < 2) break;
    Tape tape(false);
    BatchBuilder bb{g, model, tape, {}};
    std::vector<MatchBatchRow> batch;
    for (std::size_t i = start; i < end; ++i) {
      const auto& t = tasks[i];
      auto first = [&](const std::vector<NodeId>& l) {
        return std::vector<NodeId>(l.begin(), l.begin() + static_cast<std::ptrdiff_t>(
                                                             std::min(neighbors_per_side, l.size())));
      };
      batch.push_back({bb.encode(t.query), bb.encode_all(first(t.query_neighbors.neighbors)),
                       bb.encode(t.positive_key), bb.encode_all(first(t.key_neighbors.at(0).neighbors))});
    }
    total += matcher_loss(tape, model, batch, mode).scalar();
    ++batches;
  }
  return total / static_cast<double>(batches);
}

}  // namespace cdsm
