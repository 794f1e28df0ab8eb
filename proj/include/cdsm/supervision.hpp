#pragma once

#include <filesystem>
#include <functional>
#include <span>
#include <string_view>
#include <vector>

#include "cdsm/datagen.hpp"
#include "cdsm/graphstore.hpp"
#include "cdsm/matcher.hpp"

namespace cdsm {

enum class AnnotationMode { OneStep, MultiStep };
std::string_view annotation_mode_name(AnnotationMode m);
AnnotationMode parse_annotation_mode(std::string_view s);

std::string_view side_name(Side s);
Side parse_side(std::string_view s);

struct NeighborLabel {
  Side side = Side::Query;
  NodeId neighbor = 0;
  bool positive = false;  // positive <=> margin > 0
  double margin = 0.0;
  int step = -1;          // acceptance step (multi-step, positives only); -1 otherwise
};

// Labels for one task, in neighbor-list order per side (query side first).
struct TaskAnnotation {
  std::size_t task = 0;
  std::vector<NeighborLabel> labels;
};

struct AnnotationSet {
  AnnotationMode mode = AnnotationMode::OneStep;
  std::vector<TaskAnnotation> tasks;
};

// M(Q (+) query_side, K (+) key_side) for neighbor subsets of one positive pair.
using SubsetScorer = std::function<double(std::span<const NodeId> query_side, std::span<const NodeId> key_side)>;

// Label + iff M(Q (+) {N_i}, K) > M(Q, K), symmetrically on the key side with the
// query side bare. The key side is the positive key's list.
TaskAnnotation annotate_one_step(const SubsetScorer& score, const MatchTask& task);

// Greedy per side: accept the best remaining neighbor (lowest index on ties) while
// it strictly improves on the accepted set, at most k times. Never-accepted
// neighbors are labeled - with margin min(0, their gain in the last scan).
TaskAnnotation annotate_multi_step(const SubsetScorer& score, const MatchTask& task, std::size_t k);

SubsetScorer matcher_scorer(const MatchModel& model, const Encodings& enc, const MatchTask& task);

AnnotationSet annotate(const MatchModel& model, const Encodings& enc, std::span<const MatchTask> tasks,
                       AnnotationMode mode, std::size_t k);

// One JSON-lines record per label: {"task","side","neighbor","label","margin","step"}.
void write_annotations(const TextGraph& g, const AnnotationSet& ann, const std::filesystem::path& path);
AnnotationSet load_annotations(const TextGraph& g, const std::filesystem::path& path);

struct PairRecord {
  std::size_t task = 0;
  Side side = Side::Query;
  NodeId owner = 0;                // document whose neighbors are ranked
  NodeId counterpart = 0;
  std::vector<NodeId> context;     // neighbors accepted before the positive (multi-step)
  NodeId positive = 0;
  NodeId negative = 0;
};

struct PairDataset {
  std::vector<PairRecord> records;
};

// For each task and side, the cross product of + and - labels, uniformly
// subsampled to at most per_task_cap pairs. `tasks` resolves owners and
// counterparts by task id (annotation tasks index into it).
PairDataset build_pairs(const AnnotationSet& ann, std::span<const MatchTask> tasks, std::size_t per_task_cap,
                        std::uint64_t seed);

}  // namespace cdsm
