#include "cdsm/selector.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

#include "cdsm/error.hpp"
#include "cdsm/random.hpp"
#include "json.hpp"

namespace cdsm {

std::string_view ranking_mode_name(RankingMode m) { return m == RankingMode::OneStep ? "one-step" : "multi-step"; }

RankingMode parse_ranking_mode(std::string_view s) {
  if (s == "one-step") return RankingMode::OneStep;
  if (s == "multi-step") return RankingMode::MultiStep;
  throw ConfigError("unknown ranking mode '" + std::string(s) + "' (expected one-step|multi-step)");
}

// ---- SelectorModel ---------------------------------------------------------

SelectorModel::SelectorModel(const SelectorConfig& config, std::uint64_t seed) : config_(config) {
  auto rng = make_rng(seed, {0x73656c6563ULL});
  LightEncoder::create(store_, config_.encoder, rng);
  if (config_.mode == RankingMode::MultiStep) {
    const auto d = static_cast<Eigen::Index>(config_.encoder.dim);
    // Starts as the identity on the pooled half so early scores track one-step ranking.
    Tensor w = Tensor::Zero(2 * d, d);
    for (Eigen::Index i = 0; i < 2 * d; ++i) {
      for (Eigen::Index j = 0; j < d; ++j) w(i, j) = 0.05 * (2.0 * uniform01(rng) - 1.0);
    }
    w.bottomRows(d) += Tensor::Identity(d, d);
    store_.add("phi.W", std::move(w));
    store_.add_constant("phi.b", 1, d, 0.0);
  }
  bind();
}

SelectorModel::SelectorModel(const SelectorModel& other) : config_(other.config_), store_(other.store_) { bind(); }

SelectorModel& SelectorModel::operator=(const SelectorModel& other) {
  if (this != &other) {
    config_ = other.config_;
    store_ = other.store_;
    bind();
  }
  return *this;
}

void SelectorModel::bind() {
  encoder_ = LightEncoder::bind(store_, config_.encoder);
  phi_w_ = phi_b_ = nullptr;
  if (config_.mode == RankingMode::MultiStep) {
    phi_w_ = &store_.get("phi.W");
    phi_b_ = &store_.get("phi.b");
  } else if (store_.contains("phi.W")) {
    throw IntegrityError("one-step selector must not carry a combine layer");
  }
}

Parameter& SelectorModel::phi_weight() const {
  if (!phi_w_) throw ConfigError("one-step selector has no combine layer");
  return *phi_w_;
}

Parameter& SelectorModel::phi_bias() const {
  if (!phi_b_) throw ConfigError("one-step selector has no combine layer");
  return *phi_b_;
}

void SelectorModel::save(const std::filesystem::path& path) const {
  nlohmann::json h = {{"model", "selector"},
                      {"mode", ranking_mode_name(config_.mode)},
                      {"vocab_size", config_.encoder.vocab_size},
                      {"dim", config_.encoder.dim},
                      {"window", config_.encoder.window}};
  save_checkpoint(store_, h.dump(), path);
}

SelectorModel SelectorModel::load(const std::filesystem::path& path) {
  auto h = nlohmann::json::parse(read_checkpoint_header(path));
  if (h.value("model", "") != "selector") throw ParseError(path.string(), 0, "not a selector checkpoint");
  SelectorConfig cfg;
  cfg.mode = parse_ranking_mode(h.at("mode").get<std::string>());
  cfg.encoder.vocab_size = h.at("vocab_size");
  cfg.encoder.dim = h.at("dim");
  cfg.encoder.window = h.at("window");
  SelectorModel m(cfg, 0);
  load_checkpoint(m.store_, path);
  return m;
}

LightEncodings encode_all_light(const SelectorModel& model, const TextGraph& g) {
  LightEncodings out;
  out.reserve(g.size());
  for (NodeId n = 0; n < g.size(); ++n) out.push_back(encode_light(model.encoder(), g.doc(n).tokens));
  return out;
}

// ---- ranking ---------------------------------------------------------------

std::vector<double> rank_one_step(const Tensor& counterpart, std::span<const Tensor* const> neighbors) {
  std::vector<double> out;
  out.reserve(neighbors.size());
  for (const Tensor* n : neighbors) {
    if (n->size() != counterpart.size()) throw DimensionError("rank_one_step", "neighbor and counterpart differ");
    out.push_back(dot_values(*n, counterpart));
  }
  return out;
}

std::vector<double> rank_one_step(const SelectorModel& model, const Document& counterpart,
                                  std::span<const Document* const> neighbors) {
  const Tensor c = encode_light(model.encoder(), counterpart.tokens);
  std::vector<Tensor> enc;
  enc.reserve(neighbors.size());
  for (const Document* d : neighbors) enc.push_back(encode_light(model.encoder(), d->tokens));
  std::vector<const Tensor*> ptrs;
  for (const auto& e : enc) ptrs.push_back(&e);
  return rank_one_step(c, ptrs);
}

double multi_step_score(const SelectorModel& model, const Tensor& center, const Tensor& counterpart,
                        std::span<const Tensor* const> selected, const Tensor& candidate) {
  const auto d = static_cast<Eigen::Index>(model.dim());
  Tensor pooled = candidate;
  for (const Tensor* s : selected) pooled = pooled.cwiseMax(*s);
  Tensor x(1, 2 * d);
  x.leftCols(d) = center;
  x.rightCols(d) = pooled;
  Tensor z = x * model.phi_weight().value;
  z += model.phi_bias().value;
  return dot_values(z, counterpart);
}

MultiStepSelection rank_multi_step(const SelectorModel& model, const Tensor& center, const Tensor& counterpart,
                                   std::span<const Tensor* const> neighbors, std::size_t k) {
  if (k == 0) throw ConfigError("rank_multi_step needs k >= 1");
  const auto d = static_cast<Eigen::Index>(model.dim());
  const Tensor& w = model.phi_weight().value;
  // phi(concat(c, u)) . r = (c W_top + b) . r + u . (W_bottom r^T)
  const double base = dot_values(Tensor(center * w.topRows(d) + model.phi_bias().value), counterpart);
  const Tensor proj = (w.bottomRows(d) * counterpart.transpose()).transpose();

  MultiStepSelection out;
  const std::size_t n = neighbors.size();
  std::vector<bool> taken(n, false);
  Tensor pooled;
  for (std::size_t step = 0; step < std::min(k, n); ++step) {
    std::size_t best = n;
    double best_score = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      if (taken[i]) continue;
      const Tensor u = step == 0 ? *neighbors[i] : Tensor(pooled.cwiseMax(*neighbors[i]));
      const double s = base + dot_values(u, proj);
      if (best == n || s > best_score) {
        best = i;
        best_score = s;
      }
    }
    taken[best] = true;
    pooled = step == 0 ? *neighbors[best] : Tensor(pooled.cwiseMax(*neighbors[best]));
    out.order.push_back(best);
    out.scores.push_back(best_score);
  }
  return out;
}

double sim(const Tensor& q, const Tensor& k) { return dot_values(q, k); }

double sim(const SelectorModel& model, const Document& q, const Document& k) {
  return sim(encode_light(model.encoder(), q.tokens), encode_light(model.encoder(), k.tokens));
}

// ---- truncation ------------------------------------------------------------

std::string_view truncation_name(TruncationKind k) {
  switch (k) {
    case TruncationKind::FixedK: return "fixed-k";
    case TruncationKind::AbsoluteThreshold: return "absolute-threshold";
    case TruncationKind::OverallRanking: return "overall-ranking";
    case TruncationKind::RelevanceThreshold: return "relevance-threshold";
  }
  return "?";
}

TruncationKind parse_truncation(std::string_view s) {
  for (auto k : {TruncationKind::FixedK, TruncationKind::AbsoluteThreshold, TruncationKind::OverallRanking,
                 TruncationKind::RelevanceThreshold}) {
    if (truncation_name(k) == s) return k;
  }
  throw ConfigError("unknown truncation '" + std::string(s) + "'");
}

TruncationPolicy TruncationPolicy::fixed_k(std::size_t k, std::size_t cap) {
  TruncationPolicy p;
  p.kind = TruncationKind::FixedK;
  p.k = k;
  p.hard_cap = cap;
  return p;
}

TruncationPolicy TruncationPolicy::absolute(double tau, std::size_t cap) {
  TruncationPolicy p;
  p.kind = TruncationKind::AbsoluteThreshold;
  p.tau = tau;
  p.hard_cap = cap;
  return p;
}

TruncationPolicy TruncationPolicy::overall(std::size_t pp, std::size_t cap) {
  TruncationPolicy p;
  p.kind = TruncationKind::OverallRanking;
  p.p = pp;
  p.hard_cap = cap;
  return p;
}

TruncationPolicy TruncationPolicy::relevance(std::size_t cap) {
  TruncationPolicy p;
  p.kind = TruncationKind::RelevanceThreshold;
  p.hard_cap = cap;
  return p;
}

void TruncationPolicy::validate() const {
  if (hard_cap < 1) throw ConfigError("truncation hard_cap must be at least 1");
  const bool want_k = kind == TruncationKind::FixedK;
  const bool want_tau = kind == TruncationKind::AbsoluteThreshold;
  const bool want_p = kind == TruncationKind::OverallRanking;
  if (k.has_value() != want_k || tau.has_value() != want_tau || p.has_value() != want_p) {
    throw ConfigError("truncation '" + std::string(truncation_name(kind)) +
                      "' must set exactly its own parameter (k, tau or p)");
  }
}

std::string TruncationPolicy::describe() const {
  std::ostringstream s;
  s << truncation_name(kind);
  if (k) s << " k=" << *k;
  if (tau) s << " tau=" << *tau;
  if (p) s << " p=" << *p;
  s << " cap=" << hard_cap;
  return s.str();
}

namespace {

// Indices sorted by score descending, index ascending on ties.
std::vector<std::size_t> ranked(std::span<const double> scores) {
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  return idx;
}

}  // namespace

SelectionResult truncate(std::span<const double> scores, const TruncationPolicy& policy,
                         const TruncationContext& ctx) {
  policy.validate();
  SelectionResult res;
  res.policy = policy;
  std::vector<std::size_t> keep;
  const auto order = ranked(scores);
  switch (policy.kind) {
    case TruncationKind::FixedK:
      keep.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(std::min(*policy.k, order.size())));
      break;
    case TruncationKind::AbsoluteThreshold:
      for (auto i : order) {
        if (scores[i] > *policy.tau) keep.push_back(i);
      }
      break;
    case TruncationKind::RelevanceThreshold:
      if (!ctx.sim) throw ConfigError("relevance-threshold truncation needs sim(Q, K) in its context");
      for (auto i : order) {
        if (scores[i] > *ctx.sim) keep.push_back(i);
      }
      break;
    case TruncationKind::OverallRanking: {
      if (!ctx.overall) throw ConfigError("overall-ranking truncation needs the unified score list");
      const auto& lists = ctx.overall->lists;
      const std::size_t self = ctx.overall->self;
      if (self >= lists.size()) throw ConfigError("overall-ranking context does not contain this document");
      if (lists[self].size() != scores.size()) {
        throw ConfigError("overall-ranking context list disagrees with the scores being truncated");
      }
      struct Entry {
        double score;
        std::size_t doc, idx;
      };
      std::vector<Entry> all;
      for (std::size_t dl = 0; dl < lists.size(); ++dl) {
        for (std::size_t i = 0; i < lists[dl].size(); ++i) all.push_back({lists[dl][i], dl, i});
      }
      const std::size_t cut = std::min(*policy.p, all.size());
      std::partial_sort(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(cut), all.end(),
                        [](const Entry& a, const Entry& b) {
                          if (a.score != b.score) return a.score > b.score;
                          if (a.doc != b.doc) return a.doc < b.doc;
                          return a.idx < b.idx;
                        });
      std::vector<bool> in(scores.size(), false);
      for (std::size_t e = 0; e < cut; ++e) {
        if (all[e].doc == self) in[all[e].idx] = true;
      }
      for (auto i : order) {
        if (in[i]) keep.push_back(i);
      }
      break;
    }
  }
  if (keep.size() > policy.hard_cap) keep.resize(policy.hard_cap);
  res.selected = keep;
  for (auto i : keep) res.scores.push_back(scores[i]);
  return res;
}

// ---- loss and training -----------------------------------------------------

Var selector_loss_from_delta(Var delta, LossMode mode) {
  if (mode == LossMode::Log) return scale(log_sigmoid(delta), -1.0);
  return scale(sigmoid(delta), -1.0);
}

Var selector_score(Tape& tape, const SelectorModel& model, Var center, Var counterpart,
                   std::span<const Var> context, Var candidate) {
  if (model.mode() == RankingMode::OneStep) return dot(candidate, counterpart);
  std::vector<Var> pool(context.begin(), context.end());
  pool.push_back(candidate);
  Var u = max_pool_elementwise(pool);
  Var z = affine(concat(center, u), tape.param(model.phi_weight()), tape.param(model.phi_bias()));
  return dot(z, counterpart);
}

namespace {

double record_delta(const SelectorModel& model, const LightEncodings& enc, const PairRecord& r) {
  if (model.mode() == RankingMode::OneStep) {
    return dot_values(enc.at(r.positive), enc.at(r.counterpart)) - dot_values(enc.at(r.negative), enc.at(r.counterpart));
  }
  std::vector<const Tensor*> ctx;
  for (auto c : r.context) ctx.push_back(&enc.at(c));
  return multi_step_score(model, enc.at(r.owner), enc.at(r.counterpart), ctx, enc.at(r.positive)) -
         multi_step_score(model, enc.at(r.owner), enc.at(r.counterpart), ctx, enc.at(r.negative));
}

bool held_out(std::size_t task, std::uint64_t seed, double fraction) {
  return static_cast<double>(derive_seed(seed, {0x686f6c64ULL, task}) >> 11) * 0x1.0p-53 < fraction;
}

}  // namespace

double pairwise_accuracy(const SelectorModel& model, const LightEncodings& enc, std::span<const PairRecord> pairs) {
  if (pairs.empty()) return 0.0;
  std::size_t good = 0;
  for (const auto& r : pairs) good += record_delta(model, enc, r) > 0.0 ? 1 : 0;
  return static_cast<double>(good) / static_cast<double>(pairs.size());
}

SelectorTrainResult train_selector(const TextGraph& g, const PairDataset& pairs, const SelectorConfig& model_config,
                                   const SelectorTrainConfig& cfg) {
  if (pairs.records.empty()) throw ConfigError("train_selector needs a non-empty pair dataset");
  std::vector<const PairRecord*> train, holdout;
  for (const auto& r : pairs.records) {
    (held_out(r.task, cfg.seed, cfg.holdout_fraction) ? holdout : train).push_back(&r);
  }
  if (train.empty()) throw ConfigError("every pair fell into the held-out split");

  SelectorTrainResult res{SelectorModel(model_config, cfg.seed), {}, 0.0, train.size(), holdout.size()};
  SelectorModel& model = res.model;
  const AdamConfig adam{cfg.lr};
  auto order_rng = make_rng(cfg.seed, {0x736f7264ULL});
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);
  shuffle(order, order_rng);
  std::size_t cursor = 0;

  for (std::size_t step = 0; step < cfg.steps; ++step) {
    Tape tape(true);
    std::unordered_map<NodeId, Var> cache;
    auto enc = [&](NodeId n) {
      auto it = cache.find(n);
      if (it != cache.end()) return it->second;
      Var v = model.encoder().encode(tape, g.doc(n).tokens);
      cache.emplace(n, v);
      return v;
    };
    std::vector<Var> losses;
    const std::size_t b = std::min(cfg.batch_size, train.size());
    for (std::size_t i = 0; i < b; ++i) {
      if (cursor == order.size()) {
        shuffle(order, order_rng);
        cursor = 0;
      }
      const PairRecord& r = *train[order[cursor++]];
      Var center = enc(r.owner);
      Var cp = enc(r.counterpart);
      std::vector<Var> ctx;
      for (auto c : r.context) ctx.push_back(enc(c));
      Var delta = sub(selector_score(tape, model, center, cp, ctx, enc(r.positive)),
                      selector_score(tape, model, center, cp, ctx, enc(r.negative)));
      losses.push_back(selector_loss_from_delta(delta, cfg.loss));
    }
    Var loss = scale(sum(stack_rows(losses)), 1.0 / static_cast<double>(b));
    const double lv = loss.scalar();
    if (!std::isfinite(lv)) throw TrainingError(step, "selector loss is not finite");
    model.params().zero_grad();
    tape.backward(loss);
    try {
      adam_step(model.params(), adam);
    } catch (const NumericError& e) {
      throw TrainingError(step, e.what());
    }
    res.loss_curve.push_back(lv);
  }

  if (!holdout.empty()) {
    auto enc = encode_all_light(model, g);
    std::vector<PairRecord> hold;
    hold.reserve(holdout.size());
    for (const auto* r : holdout) hold.push_back(*r);
    res.holdout_accuracy = pairwise_accuracy(model, enc, hold);
  }
  return res;
}

}  // namespace cdsm
