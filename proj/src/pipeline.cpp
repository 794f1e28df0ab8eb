#include "cdsm/pipeline.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <cmath>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <sstream>
#include <thread>
#include <unordered_map>

#include "cdsm/error.hpp"
#include "cdsm/random.hpp"

namespace cdsm {

namespace fs = std::filesystem;
using nlohmann::json;

// ---- data ------------------------------------------------------------------

Dataset generate_dataset(const RunConfig& c) {
  GenConfig g = c.data;
  g.seed = stage_seed(c, kSeedData);
  auto gen = generate_graph(g);
  auto splits = sample_positive_edges(gen.graph, c.train_edges, c.valid_edges, c.test_edges, stage_seed(c, kSeedSplits));
  return {std::move(gen.graph), std::move(gen.truth), std::move(splits)};
}

std::vector<fs::path> write_dataset(const Dataset& ds, const fs::path& dir) {
  fs::create_directories(dir);
  std::vector<fs::path> files = {dir / "nodes.jsonl", dir / "edges.tsv", dir / "ground_truth.jsonl",
                                 dir / "splits.jsonl"};
  write_nodes(ds.graph, files[0]);
  write_edges(ds.graph, files[1]);
  write_ground_truth(ds.graph, ds.truth, files[2]);
  write_splits(ds.graph, ds.splits, files[3]);
  return files;
}

Dataset load_dataset(const fs::path& dir, const RunConfig& c) {
  for (const char* f : {"nodes.jsonl", "edges.tsv", "ground_truth.jsonl", "splits.jsonl"}) {
    if (!fs::exists(dir / f)) {
      throw DependencyError("generate-data", "missing input " + (dir / f).string());
    }
  }
  Dataset ds;
  ds.graph = load_graph(dir / "nodes.jsonl", dir / "edges.tsv", c.max_len);
  ds.truth = load_ground_truth(dir / "ground_truth.jsonl", ds.graph);
  ds.splits = load_splits(dir / "splits.jsonl", ds.graph);
  return ds;
}

std::vector<MatchTask> split_tasks(const Dataset& ds, const RunConfig& c, Split split) {
  auto edges = edges_of(ds.splits, split);
  const std::size_t negatives = split == Split::Train ? 0 : c.num_negatives;
  return build_tasks(ds.graph, edges, negatives, c.neighbor_cap,
                     derive_seed(stage_seed(c, kSeedTasks), {static_cast<std::uint64_t>(split)}));
}

// ---- metrics ---------------------------------------------------------------

double ndcg_at_rank(std::size_t rank) { return 1.0 / std::log2(static_cast<double>(rank) + 1.0); }

namespace {

template <typename Fn>
void parallel_for(std::size_t n, std::size_t workers, Fn&& fn) {
  if (workers <= 1 || n < 2) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  const std::size_t w = std::min(workers, n);
  std::vector<std::thread> threads;
  std::vector<std::exception_ptr> errors(w);
  for (std::size_t t = 0; t < w; ++t) {
    threads.emplace_back([&, t] {
      try {
        for (std::size_t i = t; i < n; i += w) fn(i);
      } catch (...) {
        errors[t] = std::current_exception();
      }
    });
  }
  for (auto& th : threads) th.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

}  // namespace

Metrics evaluate(std::span<const MatchTask> tasks, const TaskScorer& scorer, std::size_t workers) {
  if (tasks.empty()) throw ConfigError("evaluate needs at least one task");
  Metrics m;
  m.per_task.resize(tasks.size());
  parallel_for(tasks.size(), workers, [&](std::size_t i) {
    const auto& t = tasks[i];
    if (t.num_candidates() < 1) throw ConfigError("task without candidates");
    auto s = scorer(t);
    if (s.size() != t.num_candidates()) throw DimensionError("evaluate", "scorer returned the wrong count");
    for (double v : s) {
      if (std::isnan(v)) throw NumericError("NaN candidate score in task " + std::to_string(t.id));
    }
    std::size_t rank = 1;
    const NodeId pos = t.candidate(0);
    for (std::size_t j = 1; j < s.size(); ++j) {
      if (s[j] > s[0] || (s[j] == s[0] && t.candidate(j) < pos)) ++rank;
    }
    m.per_task[i] = {t.id, rank, ndcg_at_rank(rank)};
  });
  double p = 0.0, n = 0.0;
  for (const auto& r : m.per_task) {
    p += r.rank == 1 ? 1.0 : 0.0;
    n += r.ndcg;
  }
  m.p_at_1 = p / static_cast<double>(tasks.size());
  m.ndcg = n / static_cast<double>(tasks.size());
  return m;
}

Metrics evaluate(std::span<const MatchTask> tasks, const CandidateScorer& scorer, std::size_t workers) {
  TaskScorer ts = [&](const MatchTask& t) {
    std::vector<double> s(t.num_candidates());
    for (std::size_t j = 0; j < s.size(); ++j) s[j] = scorer(t, j);
    return s;
  };
  return evaluate(tasks, ts, workers);
}

// ---- cascade ---------------------------------------------------------------

InferenceContext InferenceContext::build(const TextGraph& g, const MatchModel& matcher, const SelectorModel& selector) {
  InferenceContext ctx;
  ctx.graph = &g;
  ctx.matcher = &matcher;
  ctx.selector = &selector;
  ctx.heavy = encode_all_heavy(matcher, g);
  ctx.light = encode_all_light(selector, g);
  return ctx;
}

namespace {

std::vector<const Tensor*> light_ptrs(const InferenceContext& ctx, std::span<const NodeId> ids) {
  std::vector<const Tensor*> out;
  out.reserve(ids.size());
  for (auto id : ids) out.push_back(&ctx.light.at(id));
  return out;
}

const std::vector<NodeId>& list_of(const MatchTask& task, std::size_t candidate, Side side) {
  return side == Side::Query ? task.query_neighbors.neighbors : task.key_neighbors.at(candidate).neighbors;
}

// Scores that drive truncation for one side of one candidate pair. In multi-step
// mode these are step scores in greedy order, and `order` maps them to list indices.
struct SideScores {
  std::vector<double> scores;
  std::vector<std::size_t> order;  // empty in one-step mode (identity)
};

SideScores side_scores(const InferenceContext& ctx, const MatchTask& task, std::size_t candidate, Side side,
                       std::size_t steps) {
  const auto& list = list_of(task, candidate, side);
  const NodeId owner = side == Side::Query ? task.query : task.candidate(candidate);
  const NodeId counterpart = side == Side::Query ? task.candidate(candidate) : task.query;
  auto ptrs = light_ptrs(ctx, list);
  SideScores out;
  if (ctx.selector->mode() == RankingMode::OneStep || list.empty()) {
    out.scores = rank_one_step(ctx.light.at(counterpart), ptrs);
    return out;
  }
  auto ms = rank_multi_step(*ctx.selector, ctx.light.at(owner), ctx.light.at(counterpart), ptrs, steps);
  out.scores = std::move(ms.scores);
  out.order = std::move(ms.order);
  return out;
}

std::vector<NodeId> to_nodes(const std::vector<NodeId>& list, const SideScores& s, const SelectionResult& r,
                             bool keep_greedy_order) {
  std::vector<std::size_t> picked = r.selected;
  if (keep_greedy_order) std::sort(picked.begin(), picked.end());
  std::vector<NodeId> out;
  out.reserve(picked.size());
  for (auto i : picked) out.push_back(list[s.order.empty() ? i : s.order[i]]);
  return out;
}

}  // namespace

std::vector<SideSelection> select_neighbors(const InferenceContext& ctx, const MatchTask& task,
                                            const TruncationPolicy& policy) {
  policy.validate();
  const std::size_t nc = task.num_candidates();
  const bool multi = ctx.selector->mode() == RankingMode::MultiStep;
  const std::size_t steps = policy.kind == TruncationKind::FixedK ? std::min(*policy.k, policy.hard_cap)
                                                                  : policy.hard_cap;
  std::vector<SideScores> qs(nc), ks(nc);
  for (std::size_t j = 0; j < nc; ++j) {
    qs[j] = side_scores(ctx, task, j, Side::Query, std::max<std::size_t>(steps, 1));
    ks[j] = side_scores(ctx, task, j, Side::Key, std::max<std::size_t>(steps, 1));
  }
  std::vector<std::vector<double>> q_lists, k_lists;
  if (policy.kind == TruncationKind::OverallRanking) {
    for (std::size_t j = 0; j < nc; ++j) {
      q_lists.push_back(qs[j].scores);
      k_lists.push_back(ks[j].scores);
    }
  }
  std::vector<SideSelection> out(nc);
  for (std::size_t j = 0; j < nc; ++j) {
    TruncationContext qctx, kctx;
    if (policy.kind == TruncationKind::RelevanceThreshold) {
      const double s = sim(ctx.light.at(task.query), ctx.light.at(task.candidate(j)));
      qctx.sim = s;
      kctx.sim = s;
    } else if (policy.kind == TruncationKind::OverallRanking) {
      qctx.overall = OverallContext{q_lists, j};
      kctx.overall = OverallContext{k_lists, j};
    }
    auto qr = truncate(qs[j].scores, policy, qctx);
    auto kr = truncate(ks[j].scores, policy, kctx);
    out[j].query = to_nodes(task.query_neighbors.neighbors, qs[j], qr, multi);
    out[j].key = to_nodes(task.key_neighbors.at(j).neighbors, ks[j], kr, multi);
  }
  return out;
}

namespace {

CascadeRanking rank_candidates(const InferenceContext& ctx, const MatchTask& task, std::vector<SideSelection> sel) {
  CascadeRanking r;
  const std::size_t nc = task.num_candidates();
  r.scores.resize(nc);
  for (std::size_t j = 0; j < nc; ++j) {
    r.scores[j] = match_score_cached(*ctx.matcher, ctx.heavy, task.query, sel[j].query, task.candidate(j), sel[j].key);
  }
  r.order.resize(nc);
  std::iota(r.order.begin(), r.order.end(), 0);
  std::stable_sort(r.order.begin(), r.order.end(), [&](std::size_t a, std::size_t b) { return r.scores[a] > r.scores[b]; });
  r.selections = std::move(sel);
  return r;
}

}  // namespace

CascadeRanking run_cascade(const InferenceContext& ctx, const MatchTask& task, const TruncationPolicy& policy) {
  return rank_candidates(ctx, task, select_neighbors(ctx, task, policy));
}

CascadeRanking run_full_neighbors(const InferenceContext& ctx, const MatchTask& task) {
  std::vector<SideSelection> sel(task.num_candidates());
  for (std::size_t j = 0; j < sel.size(); ++j) {
    sel[j].query = task.query_neighbors.neighbors;
    sel[j].key = task.key_neighbors.at(j).neighbors;
  }
  return rank_candidates(ctx, task, std::move(sel));
}

Metrics evaluate_cascade(const InferenceContext& ctx, std::span<const MatchTask> tasks, const TruncationPolicy& policy,
                         double* mean_selected, std::size_t workers) {
  std::vector<double> selected(tasks.size(), 0.0);
  std::unordered_map<std::size_t, std::size_t> index;
  for (std::size_t i = 0; i < tasks.size(); ++i) index.emplace(tasks[i].id, i);
  TaskScorer scorer = [&](const MatchTask& t) {
    auto r = run_cascade(ctx, t, policy);
    double total = 0.0;
    for (const auto& s : r.selections) total += static_cast<double>(s.query.size() + s.key.size());
    selected[index.at(t.id)] = total / (2.0 * static_cast<double>(r.selections.size()));
    return r.scores;
  };
  auto m = evaluate(tasks, scorer, workers);
  if (mean_selected) {
    *mean_selected = std::accumulate(selected.begin(), selected.end(), 0.0) / static_cast<double>(tasks.size());
  }
  return m;
}

// ---- cost ------------------------------------------------------------------

CostReport cost_model(std::size_t n, std::size_t k, double t_s, double t_m, double t_h) {
  if (k > n) throw ConfigError("cost_model needs k <= n");
  if (t_s < 0 || t_m < 0 || t_h < 0) throw ConfigError("cost_model times must be non-negative");
  CostReport r;
  r.n = n;
  r.k = k;
  r.t_s = t_s;
  r.t_m = t_m;
  r.t_h = t_h;
  const double dn = static_cast<double>(n), dk = static_cast<double>(k);
  r.all_neighbors = dn * t_m;
  r.heuristic = dn * t_h + dk * t_m;
  r.cdsm = dn * t_s + dk * t_m;
  return r;
}

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

}  // namespace

EncoderTimings measure_encoder_times(const TextGraph& g, const MatchModel& matcher, const SelectorModel& selector,
                                     std::size_t docs) {
  if (g.size() == 0 || docs == 0) throw ConfigError("timing needs at least one document");
  EncoderTimings t;
  double sink = 0.0;
  auto run_heavy = [&] {
    for (std::size_t i = 0; i < docs; ++i) sink += encode_heavy(matcher.encoder(), g.doc(static_cast<NodeId>(i % g.size())).tokens)(0, 0);
  };
  auto run_light = [&] {
    for (std::size_t i = 0; i < docs; ++i) sink += encode_light(selector.encoder(), g.doc(static_cast<NodeId>(i % g.size())).tokens)(0, 0);
  };
  run_heavy();
  run_light();
  auto t0 = Clock::now();
  run_heavy();
  t.t_m = seconds_since(t0) / static_cast<double>(docs);
  t0 = Clock::now();
  run_light();
  t.t_s = seconds_since(t0) / static_cast<double>(docs);
  // Heuristic: popularity ranking cost per neighbor.
  std::size_t neighbors = 0;
  t0 = Clock::now();
  for (std::size_t i = 0; i < docs; ++i) {
    auto nb = g.neighbors(static_cast<NodeId>(i % g.size()));
    std::vector<NodeId> v(nb.begin(), nb.end());
    std::stable_sort(v.begin(), v.end(), [&](NodeId a, NodeId b) { return g.degree(a) > g.degree(b); });
    neighbors += v.size();
    if (!v.empty()) sink += v[0];
  }
  t.t_h = neighbors ? seconds_since(t0) / static_cast<double>(neighbors) : 0.0;
  if (sink == 1.2345) t.t_h += 0.0;  // keeps the timed loops observable
  return t;
}

CostReport measure_cost(const TextGraph& g, const MatchModel& matcher, const SelectorModel& selector,
                        std::span<const MatchTask> tasks, std::size_t k, std::size_t timing_docs) {
  if (tasks.empty()) throw ConfigError("measure_cost needs tasks");
  auto times = measure_encoder_times(g, matcher, selector, timing_docs);
  double total_n = 0.0;
  for (const auto& t : tasks) {
    total_n += static_cast<double>(t.query_neighbors.neighbors.size() + t.key_neighbors.at(0).neighbors.size()) / 2.0;
  }
  const double mean_n = total_n / static_cast<double>(tasks.size());
  const auto n = static_cast<std::size_t>(std::lround(mean_n));
  auto report = cost_model(n, std::min(k, n), times.t_s, times.t_m, times.t_h);
  report.mean_neighbors = mean_n;
  report.measured_tasks = tasks.size();
  const auto policy = TruncationPolicy::fixed_k(k);
  double sink = 0.0;

  auto t0 = Clock::now();
  for (const auto& t : tasks) {
    const auto& ql = t.query_neighbors.neighbors;
    const auto& kl = t.key_neighbors.at(0).neighbors;
    const Tensor lq = encode_light(selector.encoder(), g.doc(t.query).tokens);
    const Tensor lk = encode_light(selector.encoder(), g.doc(t.positive_key).tokens);
    auto light_scores = [&](const std::vector<NodeId>& list, const Tensor& counterpart) {
      std::vector<double> s;
      s.reserve(list.size());
      for (auto id : list) s.push_back(dot_values(encode_light(selector.encoder(), g.doc(id).tokens), counterpart));
      return s;
    };
    auto qsel = truncate(light_scores(ql, lk), policy);
    auto ksel = truncate(light_scores(kl, lq), policy);
    Tape tape(false);
    Var q = matcher.encoder().encode(tape, g.doc(t.query).tokens);
    Var kk = matcher.encoder().encode(tape, g.doc(t.positive_key).tokens);
    std::vector<Var> qn, kn;
    for (auto i : qsel.selected) qn.push_back(matcher.encoder().encode(tape, g.doc(ql[i]).tokens));
    for (auto i : ksel.selected) kn.push_back(matcher.encoder().encode(tape, g.doc(kl[i]).tokens));
    sink += match_score(tape, matcher, q, qn, kk, kn).scalar();
  }
  report.measured_cascade = seconds_since(t0);

  t0 = Clock::now();
  for (const auto& t : tasks) {
    Tape tape(false);
    Var q = matcher.encoder().encode(tape, g.doc(t.query).tokens);
    Var kk = matcher.encoder().encode(tape, g.doc(t.positive_key).tokens);
    std::vector<Var> qn, kn;
    for (auto id : t.query_neighbors.neighbors) qn.push_back(matcher.encoder().encode(tape, g.doc(id).tokens));
    for (auto id : t.key_neighbors.at(0).neighbors) kn.push_back(matcher.encoder().encode(tape, g.doc(id).tokens));
    sink += match_score(tape, matcher, q, qn, kk, kn).scalar();
  }
  report.measured_full = seconds_since(t0);
  if (std::isnan(sink)) throw NumericError("non-finite score during cost measurement");
  return report;
}

// ---- analyses --------------------------------------------------------------

std::string_view selection_method_name(SelectionMethod m) {
  switch (m) {
    case SelectionMethod::Random: return "random";
    case SelectionMethod::Popularity: return "popularity";
    case SelectionMethod::SimilarityLite: return "similarity-lite";
    case SelectionMethod::CDSM: return "cdsm";
    case SelectionMethod::Oracle: return "oracle";
  }
  return "?";
}

std::vector<NodeId> select_by_method(const InferenceContext& ctx, const GroundTruth* truth, const MatchTask& task,
                                     std::size_t candidate, Side side, SelectionMethod method, std::size_t k,
                                     std::uint64_t seed) {
  const auto& list = list_of(task, candidate, side);
  if (k == 0 || list.empty()) return {};
  const NodeId owner = side == Side::Query ? task.query : task.candidate(candidate);
  const NodeId counterpart = side == Side::Query ? task.candidate(candidate) : task.query;
  const std::uint64_t side_id = side == Side::Query ? 0 : 1;
  std::vector<std::size_t> idx(list.size());
  std::iota(idx.begin(), idx.end(), 0);
  auto take = [&](const std::vector<std::size_t>& order) {
    std::vector<NodeId> out;
    for (std::size_t i = 0; i < std::min(k, order.size()); ++i) out.push_back(list[order[i]]);
    return out;
  };
  switch (method) {
    case SelectionMethod::Random: {
      auto rng = make_rng(seed, {0x726e64ULL, task.id, side_id, owner});
      shuffle(idx, rng);
      return take(idx);
    }
    case SelectionMethod::Popularity:
      std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
        const auto da = ctx.graph->degree(list[a]), db = ctx.graph->degree(list[b]);
        if (da != db) return da > db;
        return list[a] < list[b];
      });
      return take(idx);
    case SelectionMethod::SimilarityLite: {
      std::vector<double> s;
      for (auto id : list) s.push_back(sim(ctx.light.at(owner), ctx.light.at(id)));
      auto r = truncate(s, TruncationPolicy::fixed_k(k, std::max(k, kDefaultHardCap)));
      std::vector<NodeId> out;
      for (auto i : r.selected) out.push_back(list[i]);
      return out;
    }
    case SelectionMethod::CDSM: {
      auto s = side_scores(ctx, task, candidate, side, k);
      auto r = truncate(s.scores, TruncationPolicy::fixed_k(k, std::max(k, kDefaultHardCap)));
      return to_nodes(list, s, r, ctx.selector->mode() == RankingMode::MultiStep);
    }
    case SelectionMethod::Oracle: {
      if (!truth) throw ConfigError("oracle selection needs ground truth");
      auto rng = make_rng(seed, {0x6f7263ULL, task.id, side_id, owner, counterpart});
      shuffle(idx, rng);
      std::stable_partition(idx.begin(), idx.end(),
                            [&](std::size_t i) { return usefulness_oracle(*truth, counterpart, list[i]); });
      return take(idx);
    }
  }
  return {};
}

Metrics evaluate_method(const InferenceContext& ctx, const GroundTruth* truth, std::span<const MatchTask> tasks,
                        SelectionMethod method, std::size_t k, std::uint64_t seed, std::size_t workers) {
  CandidateScorer scorer = [&](const MatchTask& t, std::size_t j) {
    auto qs = select_by_method(ctx, truth, t, j, Side::Query, method, k, seed);
    auto ks = select_by_method(ctx, truth, t, j, Side::Key, method, k, seed);
    return match_score_cached(*ctx.matcher, ctx.heavy, t.query, qs, t.candidate(j), ks);
  };
  return evaluate(tasks, scorer, workers);
}

std::vector<CurveRow> curve_analysis(const InferenceContext& ctx, const GroundTruth* truth,
                                     std::span<const MatchTask> tasks, std::span<const std::size_t> ks,
                                     std::span<const SelectionMethod> methods, std::uint64_t seed,
                                     std::size_t workers) {
  std::vector<CurveRow> rows;
  for (auto m : methods) {
    for (auto k : ks) {
      auto met = evaluate_method(ctx, truth, tasks, m, k, seed, workers);
      rows.push_back({m, k, met.p_at_1, met.ndcg});
    }
  }
  return rows;
}

AgreementReport agreement_analysis(const InferenceContext& ctx, const AnnotationSet& annotations,
                                   std::span<const MatchTask> tasks) {
  std::unordered_map<std::size_t, const MatchTask*> by_id;
  for (const auto& t : tasks) by_id.emplace(t.id, &t);
  AgreementReport r;
  double expectation = 0.0;
  for (const auto& ta : annotations.tasks) {
    auto it = by_id.find(ta.task);
    if (it == by_id.end()) throw LookupError("annotation refers to unknown task " + std::to_string(ta.task));
    const MatchTask& task = *it->second;
    for (Side side : {Side::Query, Side::Key}) {
      const auto& list = list_of(task, 0, side);
      std::vector<double> margin(list.size(), 0.0);
      std::size_t seen = 0;
      for (const auto& l : ta.labels) {
        if (l.side != side) continue;
        if (seen >= list.size() || list[seen] != l.neighbor) {
          throw IntegrityError("annotation labels do not follow the neighbor list of task " + std::to_string(ta.task));
        }
        margin[seen++] = l.margin;
      }
      if (list.size() < 10) {
        ++r.skipped;
        continue;
      }
      std::vector<std::size_t> by_margin(list.size());
      std::iota(by_margin.begin(), by_margin.end(), 0);
      std::stable_sort(by_margin.begin(), by_margin.end(),
                       [&](std::size_t a, std::size_t b) { return margin[a] > margin[b]; });
      std::vector<std::size_t> position(list.size());
      for (std::size_t p = 0; p < by_margin.size(); ++p) position[by_margin[p]] = p;

      auto s = side_scores(ctx, task, 0, side, 10);
      auto top = truncate(s.scores, TruncationPolicy::fixed_k(10));
      for (auto i : top.selected) {
        const std::size_t li = s.order.empty() ? i : s.order[i];
        const std::size_t p = position[li];
        ++r.counts[p < 10 ? 0 : (p < 20 ? 1 : 2)];
      }
      expectation += 10.0 / static_cast<double>(list.size());
      ++r.lists;
    }
  }
  if (r.lists > 0) {
    for (int b = 0; b < 3; ++b) r.mass[b] = static_cast<double>(r.counts[b]) / (10.0 * static_cast<double>(r.lists));
    r.random_expectation = expectation / static_cast<double>(r.lists);
  }
  return r;
}

std::vector<TruncationRow> truncation_comparison(const InferenceContext& ctx, std::span<const MatchTask> valid,
                                                 std::span<const MatchTask> test, std::size_t k, std::size_t workers) {
  if (valid.empty() || test.empty()) throw ConfigError("truncation comparison needs validation and test tasks");
  // Candidate thresholds: quantiles of the one-step scores seen on validation.
  std::vector<double> all;
  for (const auto& t : valid) {
    for (std::size_t j = 0; j < t.num_candidates(); ++j) {
      for (Side side : {Side::Query, Side::Key}) {
        auto s = side_scores(ctx, t, j, side, kDefaultHardCap);
        all.insert(all.end(), s.scores.begin(), s.scores.end());
      }
    }
  }
  std::sort(all.begin(), all.end());
  auto best_of = [&](const std::vector<TruncationPolicy>& candidates) {
    TruncationPolicy best = candidates.front();
    double best_p = -1.0, best_sel = 0.0;
    for (const auto& p : candidates) {
      double sel = 0.0;
      auto m = evaluate_cascade(ctx, valid, p, &sel, workers);
      if (m.p_at_1 > best_p || (m.p_at_1 == best_p && sel < best_sel)) {
        best = p;
        best_p = m.p_at_1;
        best_sel = sel;
      }
    }
    return best;
  };
  std::vector<TruncationPolicy> taus;
  if (!all.empty()) {
    for (double q : {0.5, 0.7, 0.8, 0.9, 0.95, 0.98}) {
      taus.push_back(TruncationPolicy::absolute(all[static_cast<std::size_t>(q * static_cast<double>(all.size() - 1))]));
    }
  } else {
    taus.push_back(TruncationPolicy::absolute(0.0));
  }
  const std::size_t nc = valid.front().num_candidates();
  std::vector<TruncationPolicy> ps;
  for (std::size_t per : {1, 2, 5, 10, 20}) ps.push_back(TruncationPolicy::overall(per * nc));

  std::vector<TruncationPolicy> policies = {TruncationPolicy::fixed_k(k), best_of(taus), best_of(ps),
                                            TruncationPolicy::relevance()};
  std::vector<TruncationRow> rows;
  for (const auto& p : policies) {
    double sel = 0.0;
    auto m = evaluate_cascade(ctx, test, p, &sel, workers);
    rows.push_back({p, m.p_at_1, m.ndcg, sel});
  }
  return rows;
}

// ---- orchestration ---------------------------------------------------------

MatchModel stage_train_matcher(const RunConfig& c, const Dataset& ds, std::vector<double>* curve) {
  auto tasks = split_tasks(ds, c, Split::Train);
  MatcherTrainConfig tc = c.matcher;
  tc.seed = stage_seed(c, kSeedMatcher);
  auto res = train_matcher(ds.graph, tasks, matcher_config(c, ds.graph.vocab_size()), tc);
  if (curve) *curve = std::move(res.loss_curve);
  return std::move(res.model);
}

AnnotationSet stage_annotate(const RunConfig& c, const Dataset& ds, const MatchModel& matcher) {
  auto tasks = split_tasks(ds, c, Split::Train);
  auto enc = encode_all_heavy(matcher, ds.graph);
  return annotate(matcher, enc, tasks, c.annotation_mode, c.annotation_k);
}

SelectorModel stage_train_selector(const RunConfig& c, const Dataset& ds, const AnnotationSet& ann,
                                   std::vector<double>* curve, double* holdout_accuracy, PairDataset* pairs_out) {
  auto tasks = split_tasks(ds, c, Split::Train);
  auto pairs = build_pairs(ann, tasks, c.pairs_per_task, stage_seed(c, kSeedPairs));
  SelectorTrainConfig tc = c.selector;
  tc.seed = stage_seed(c, kSeedSelector);
  auto res = train_selector(ds.graph, pairs, selector_config(c, ds.graph.vocab_size(), c.selector_mode), tc);
  if (curve) *curve = std::move(res.loss_curve);
  if (holdout_accuracy) *holdout_accuracy = res.holdout_accuracy;
  if (pairs_out) *pairs_out = std::move(pairs);
  return std::move(res.model);
}

namespace {

template <typename Fn>
auto run_stage(const char* name, Fn&& fn) {
  try {
    return fn();
  } catch (const TrainingError& e) {
    throw TrainingError(e.step(), std::string("stage ") + name + ": " + e.what());
  } catch (const Error& e) {
    throw Error(e.kind(), std::string("stage ") + name + ": " + e.what());
  }
}

void write_curve_csv(const std::vector<double>& curve, const fs::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << "step,loss\n" << std::setprecision(17);
  for (std::size_t i = 0; i < curve.size(); ++i) out << i << ',' << curve[i] << '\n';
}

}  // namespace

HybridResult hybrid_optimize(const RunConfig& c, const Dataset& ds, const std::optional<fs::path>& out_dir) {
  std::optional<Manifest> manifest;
  if (out_dir) {
    fs::create_directories(*out_dir);
    manifest = Manifest::open(*out_dir);
    manifest->set_config(c);
  }
  auto started = std::chrono::system_clock::now();
  std::vector<double> mcurve;
  MatchModel matcher = run_stage("train-matcher", [&] { return stage_train_matcher(c, ds, &mcurve); });
  if (manifest) {
    matcher.save(*out_dir / "matcher.ckpt");
    write_curve_csv(mcurve, *out_dir / "matcher_curve.csv");
    manifest->record("train-matcher", {*out_dir / "matcher.ckpt"}, started);
    manifest->save();
  }

  started = std::chrono::system_clock::now();
  AnnotationSet ann = run_stage("annotate", [&] { return stage_annotate(c, ds, matcher); });
  if (manifest) {
    write_annotations(ds.graph, ann, *out_dir / "annotations.jsonl");
    manifest->record("annotate", {*out_dir / "annotations.jsonl"}, started);
    manifest->save();
  }

  started = std::chrono::system_clock::now();
  std::vector<double> scurve;
  double acc = 0.0;
  PairDataset pairs;
  SelectorModel selector =
      run_stage("train-selector", [&] { return stage_train_selector(c, ds, ann, &scurve, &acc, &pairs); });
  if (manifest) {
    selector.save(*out_dir / "selector.ckpt");
    write_curve_csv(scurve, *out_dir / "selector_curve.csv");
    manifest->record("train-selector", {*out_dir / "selector.ckpt"}, started);
    manifest->save();
  }
  return {std::move(matcher), std::move(mcurve), std::move(ann), std::move(pairs), std::move(selector),
          std::move(scurve), acc};
}

// ---- manifest --------------------------------------------------------------

std::string sha256_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  if (!ctx) throw IoError("cannot allocate digest context");
  EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr);
  char buf[1 << 16];
  while (in) {
    in.read(buf, sizeof buf);
    if (in.gcount() > 0) EVP_DigestUpdate(ctx, buf, static_cast<std::size_t>(in.gcount()));
  }
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_DigestFinal_ex(ctx, md, &len);
  EVP_MD_CTX_free(ctx);
  std::ostringstream s;
  for (unsigned int i = 0; i < len; ++i) s << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(md[i]);
  return s.str();
}

namespace {

std::string iso_time(std::chrono::system_clock::time_point t) {
  const std::time_t tt = std::chrono::system_clock::to_time_t(t);
  std::tm tm{};
  gmtime_r(&tt, &tm);
  std::ostringstream s;
  s << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return s.str();
}

}  // namespace

Manifest Manifest::open(const fs::path& dir) {
  Manifest m;
  m.dir_ = dir;
  const auto path = dir / "manifest.json";
  if (!fs::exists(path)) return m;
  std::ifstream in(path);
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw ParseError(path.string(), 0, e.what());
  }
  m.run_id_ = j.value("run_id", "");
  m.config_ = j.value("config", json::object());
  for (const auto& a : j.value("artifacts", json::array())) {
    m.artifacts_.push_back({a.at("stage"), a.at("path"), a.at("sha256")});
  }
  for (const auto& s : j.value("stages", json::array())) {
    m.stages_.push_back({s.at("stage"), s.at("started"), s.at("finished")});
  }
  return m;
}

void Manifest::set_config(const RunConfig& c) {
  config_ = to_json(c);
  const std::string text = config_.dump();
  // Run id: digest of the configuration snapshot.
  const auto tmp = dir_ / ".config_digest";
  {
    std::ofstream out(tmp);
    out << text;
  }
  run_id_ = sha256_file(tmp).substr(0, 16);
  fs::remove(tmp);
}

void Manifest::record(const std::string& stage, const std::vector<fs::path>& files,
                      std::chrono::system_clock::time_point started) {
  for (const auto& f : files) {
    const std::string rel = fs::relative(f, dir_).generic_string();
    ArtifactEntry e{stage, rel, sha256_file(f)};
    auto it = std::find_if(artifacts_.begin(), artifacts_.end(), [&](const ArtifactEntry& a) { return a.path == rel; });
    if (it != artifacts_.end()) {
      *it = e;
    } else {
      artifacts_.push_back(e);
    }
  }
  StageEntry s{stage, iso_time(started), iso_time(std::chrono::system_clock::now())};
  auto it = std::find_if(stages_.begin(), stages_.end(), [&](const StageEntry& x) { return x.stage == stage; });
  if (it != stages_.end()) {
    *it = s;
  } else {
    stages_.push_back(s);
  }
}

void Manifest::save() const {
  json arts = json::array();
  for (const auto& a : artifacts_) {
    if (!fs::exists(dir_ / a.path)) throw IntegrityError("manifest lists missing artifact " + a.path);
    arts.push_back({{"stage", a.stage}, {"path", a.path}, {"sha256", a.sha256}});
  }
  json stages = json::array();
  for (const auto& s : stages_) stages.push_back({{"stage", s.stage}, {"started", s.started}, {"finished", s.finished}});
  json j = {{"run_id", run_id_}, {"config", config_}, {"artifacts", arts}, {"stages", stages}};
  std::ofstream out(dir_ / "manifest.json");
  if (!out) throw IoError("cannot write manifest in " + dir_.string());
  out << j.dump(2) << '\n';
}

// ---- report writers ---------------------------------------------------------

json metrics_json(const Metrics& m) {
  json per = json::array();
  for (const auto& r : m.per_task) per.push_back({{"task", r.task}, {"rank", r.rank}, {"ndcg", r.ndcg}});
  return {{"p_at_1", m.p_at_1}, {"ndcg", m.ndcg}, {"tasks", m.per_task.size()}, {"per_task", per}};
}

void write_metrics(const Metrics& m, const fs::path& json_path, const fs::path& csv_path) {
  {
    std::ofstream out(json_path);
    if (!out) throw IoError("cannot write " + json_path.string());
    out << metrics_json(m).dump(2) << '\n';
  }
  std::ofstream out(csv_path);
  if (!out) throw IoError("cannot write " + csv_path.string());
  out << "task,rank,ndcg\n" << std::setprecision(17);
  for (const auto& r : m.per_task) out << r.task << ',' << r.rank << ',' << r.ndcg << '\n';
}

void write_curves(std::span<const CurveRow> rows, const fs::path& csv_path, const fs::path& json_path) {
  std::ofstream csv(csv_path);
  if (!csv) throw IoError("cannot write " + csv_path.string());
  csv << "method,k,p_at_1,ndcg\n" << std::setprecision(17);
  json arr = json::array();
  for (const auto& r : rows) {
    csv << selection_method_name(r.method) << ',' << r.k << ',' << r.p_at_1 << ',' << r.ndcg << '\n';
    arr.push_back({{"method", selection_method_name(r.method)}, {"k", r.k}, {"p_at_1", r.p_at_1}, {"ndcg", r.ndcg}});
  }
  std::ofstream js(json_path);
  if (!js) throw IoError("cannot write " + json_path.string());
  js << arr.dump(2) << '\n';
}

json agreement_json(const AgreementReport& r) {
  return {{"buckets", {"1-10", "11-20", "21+"}},
          {"counts", {r.counts[0], r.counts[1], r.counts[2]}},
          {"mass", {r.mass[0], r.mass[1], r.mass[2]}},
          {"random_expectation_top_bucket", r.random_expectation},
          {"lists", r.lists},
          {"skipped", r.skipped}};
}

void write_agreement_svg(const AgreementReport& r, const fs::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  const char* labels[] = {"1-10", "11-20", "21+"};
  const int w = 360, h = 240, base = 200, bar = 80;
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h << "\">\n";
  out << "<line x1=\"20\" y1=\"" << base << "\" x2=\"" << w - 20 << "\" y2=\"" << base << "\" stroke=\"black\"/>\n";
  for (int b = 0; b < 3; ++b) {
    const int x = 40 + b * (bar + 30);
    const int bh = static_cast<int>(std::lround(r.mass[b] * 180.0));
    out << "<rect x=\"" << x << "\" y=\"" << base - bh << "\" width=\"" << bar << "\" height=\"" << bh
        << "\" fill=\"steelblue\"/>\n";
    out << "<text x=\"" << x + bar / 2 << "\" y=\"" << base + 16 << "\" text-anchor=\"middle\" font-size=\"12\">"
        << labels[b] << "</text>\n";
    out << "<text x=\"" << x + bar / 2 << "\" y=\"" << base - bh - 4
        << "\" text-anchor=\"middle\" font-size=\"12\">" << std::fixed << std::setprecision(3) << r.mass[b]
        << "</text>\n";
  }
  const int ey = base - static_cast<int>(std::lround(r.random_expectation * 180.0));
  out << "<line x1=\"30\" y1=\"" << ey << "\" x2=\"" << 40 + bar + 10 << "\" y2=\"" << ey
      << "\" stroke=\"red\" stroke-dasharray=\"4 2\"/>\n";
  out << "</svg>\n";
}

json cost_json(const CostReport& r) {
  json j = {{"n", r.n},
            {"k", r.k},
            {"mean_neighbors", r.mean_neighbors},
            {"T_s", r.t_s},
            {"T_m", r.t_m},
            {"T_h", r.t_h},
            {"model",
             {{"all_neighbors", r.all_neighbors}, {"heuristic", r.heuristic}, {"cdsm", r.cdsm}}},
            {"measured_tasks", r.measured_tasks}};
  if (r.measured_cascade) j["measured"]["cascade_seconds"] = *r.measured_cascade;
  if (r.measured_full) j["measured"]["full_neighbor_seconds"] = *r.measured_full;
  return j;
}

}  // namespace cdsm
