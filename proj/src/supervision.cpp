#include "cdsm/supervision.hpp"

#include <algorithm>
#include <fstream>
#include <unordered_map>

#include "cdsm/error.hpp"
#include "cdsm/random.hpp"
#include "json.hpp"

namespace cdsm {

std::string_view annotation_mode_name(AnnotationMode m) {
  return m == AnnotationMode::OneStep ? "one-step" : "multi-step";
}

AnnotationMode parse_annotation_mode(std::string_view s) {
  if (s == "one-step") return AnnotationMode::OneStep;
  if (s == "multi-step") return AnnotationMode::MultiStep;
  throw ConfigError("unknown annotation mode '" + std::string(s) + "' (expected one-step|multi-step)");
}

std::string_view side_name(Side s) { return s == Side::Query ? "query" : "key"; }

Side parse_side(std::string_view s) {
  if (s == "query") return Side::Query;
  if (s == "key") return Side::Key;
  throw ConfigError("unknown side '" + std::string(s) + "'");
}

namespace {

const std::vector<NodeId>& side_list(const MatchTask& task, Side side) {
  return side == Side::Query ? task.query_neighbors.neighbors : task.key_neighbors.at(0).neighbors;
}

double score_side(const SubsetScorer& score, Side side, std::span<const NodeId> subset) {
  return side == Side::Query ? score(subset, {}) : score({}, subset);
}

}  // namespace

TaskAnnotation annotate_one_step(const SubsetScorer& score, const MatchTask& task) {
  TaskAnnotation out;
  out.task = task.id;
  const double baseline = score({}, {});
  for (Side side : {Side::Query, Side::Key}) {
    for (NodeId n : side_list(task, side)) {
      const NodeId one[] = {n};
      const double margin = score_side(score, side, one) - baseline;
      out.labels.push_back({side, n, margin > 0.0, margin, -1});
    }
  }
  return out;
}

TaskAnnotation annotate_multi_step(const SubsetScorer& score, const MatchTask& task, std::size_t k) {
  if (k == 0) throw ConfigError("annotate_multi_step needs k >= 1");
  TaskAnnotation out;
  out.task = task.id;
  const double baseline = score({}, {});
  for (Side side : {Side::Query, Side::Key}) {
    const auto& list = side_list(task, side);
    const std::size_t n = list.size();
    std::vector<int> step_of(n, -1);
    std::vector<double> margin(n, 0.0);
    std::vector<NodeId> accepted;
    double current = baseline;
    for (std::size_t step = 0; step < k && accepted.size() < n; ++step) {
      std::size_t best = n;
      double best_score = 0.0;
      std::vector<NodeId> trial = accepted;
      trial.push_back(0);
      for (std::size_t i = 0; i < n; ++i) {
        if (step_of[i] >= 0) continue;
        trial.back() = list[i];
        const double s = score_side(score, side, trial);
        margin[i] = std::min(0.0, s - current);
        if (best == n || s > best_score) {
          best = i;
          best_score = s;
        }
      }
      if (best == n || !(best_score > current)) break;
      step_of[best] = static_cast<int>(step);
      margin[best] = best_score - current;
      accepted.push_back(list[best]);
      current = best_score;
    }
    for (std::size_t i = 0; i < n; ++i) {
      out.labels.push_back({side, list[i], step_of[i] >= 0, margin[i], step_of[i]});
    }
  }
  return out;
}

SubsetScorer matcher_scorer(const MatchModel& model, const Encodings& enc, const MatchTask& task) {
  return [&model, &enc, q = task.query, k = task.positive_key](std::span<const NodeId> qs,
                                                                std::span<const NodeId> ks) {
    return match_score_cached(model, enc, q, qs, k, ks);
  };
}

AnnotationSet annotate(const MatchModel& model, const Encodings& enc, std::span<const MatchTask> tasks,
                       AnnotationMode mode, std::size_t k) {
  AnnotationSet set;
  set.mode = mode;
  set.tasks.reserve(tasks.size());
  for (const auto& t : tasks) {
    auto scorer = matcher_scorer(model, enc, t);
    set.tasks.push_back(mode == AnnotationMode::OneStep ? annotate_one_step(scorer, t)
                                                        : annotate_multi_step(scorer, t, k));
  }
  return set;
}

void write_annotations(const TextGraph& g, const AnnotationSet& ann, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  for (const auto& t : ann.tasks) {
    for (const auto& l : t.labels) {
      nlohmann::json rec = {{"task", t.task},
                            {"side", side_name(l.side)},
                            {"neighbor", g.doc(l.neighbor).id},
                            {"label", l.positive ? "+" : "-"},
                            {"margin", l.margin},
                            {"step", l.step >= 0 ? nlohmann::json(l.step) : nlohmann::json(nullptr)},
                            {"mode", annotation_mode_name(ann.mode)}};
      out << rec.dump() << '\n';
    }
  }
  if (!out) throw IoError("failed writing " + path.string());
}

AnnotationSet load_annotations(const TextGraph& g, const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read " + path.string());
  AnnotationSet set;
  std::string line;
  std::size_t lineno = 0;
  bool mode_seen = false;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      auto rec = nlohmann::json::parse(line);
      const auto task = rec.at("task").get<std::size_t>();
      NeighborLabel l;
      l.side = parse_side(rec.at("side").get<std::string>());
      l.neighbor = g.index_of(rec.at("neighbor").get<std::string>());
      const auto label = rec.at("label").get<std::string>();
      if (label != "+" && label != "-") throw ParseError(path.string(), lineno, "label must be + or -");
      l.positive = label == "+";
      l.margin = rec.at("margin").get<double>();
      l.step = rec.at("step").is_null() ? -1 : rec.at("step").get<int>();
      if (l.positive != (l.margin > 0.0)) {
        throw IntegrityError("annotation line " + std::to_string(lineno) + ": label disagrees with margin");
      }
      if (rec.contains("mode")) {
        auto m = parse_annotation_mode(rec["mode"].get<std::string>());
        if (mode_seen && m != set.mode) throw ParseError(path.string(), lineno, "mixed annotation modes");
        set.mode = m;
        mode_seen = true;
      }
      if (set.tasks.empty() || set.tasks.back().task != task) set.tasks.push_back({task, {}});
      set.tasks.back().labels.push_back(l);
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(path.string(), lineno, e.what());
    }
  }
  return set;
}

PairDataset build_pairs(const AnnotationSet& ann, std::span<const MatchTask> tasks, std::size_t per_task_cap,
                        std::uint64_t seed) {
  std::unordered_map<std::size_t, const MatchTask*> by_id;
  for (const auto& t : tasks) by_id.emplace(t.id, &t);
  PairDataset out;
  for (const auto& ta : ann.tasks) {
    auto it = by_id.find(ta.task);
    if (it == by_id.end()) throw LookupError("annotation refers to unknown task " + std::to_string(ta.task));
    const MatchTask& task = *it->second;
    for (Side side : {Side::Query, Side::Key}) {
      std::vector<const NeighborLabel*> pos, neg;
      for (const auto& l : ta.labels) {
        if (l.side != side) continue;
        (l.positive ? pos : neg).push_back(&l);
      }
      if (pos.empty() || neg.empty()) continue;
      // Acceptance order defines the multi-step context of each positive.
      std::vector<const NeighborLabel*> accepted = pos;
      std::stable_sort(accepted.begin(), accepted.end(),
                       [](const NeighborLabel* a, const NeighborLabel* b) { return a->step < b->step; });
      std::vector<std::pair<std::size_t, std::size_t>> cross;
      cross.reserve(pos.size() * neg.size());
      for (std::size_t i = 0; i < pos.size(); ++i) {
        for (std::size_t j = 0; j < neg.size(); ++j) cross.emplace_back(i, j);
      }
      if (cross.size() > per_task_cap) {
        auto rng = make_rng(seed, {0x70616972ULL, ta.task, side == Side::Query ? 0ULL : 1ULL});
        cross = sample_without_replacement(std::move(cross), per_task_cap, rng);
        std::sort(cross.begin(), cross.end());
      }
      const NodeId owner = side == Side::Query ? task.query : task.positive_key;
      const NodeId counterpart = side == Side::Query ? task.positive_key : task.query;
      for (auto [i, j] : cross) {
        PairRecord r;
        r.task = ta.task;
        r.side = side;
        r.owner = owner;
        r.counterpart = counterpart;
        if (ann.mode == AnnotationMode::MultiStep) {
          for (const auto* a : accepted) {
            if (a->step >= pos[i]->step) break;
            r.context.push_back(a->neighbor);
          }
        }
        r.positive = pos[i]->neighbor;
        r.negative = neg[j]->neighbor;
        out.records.push_back(std::move(r));
      }
    }
  }
  return out;
}

}  // namespace cdsm
