#pragma once

#include <chrono>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cdsm/config.hpp"
#include "cdsm/datagen.hpp"
#include "cdsm/matcher.hpp"
#include "cdsm/selector.hpp"
#include "cdsm/supervision.hpp"
#include "json.hpp"

namespace cdsm {

// ---- data ------------------------------------------------------------------

struct Dataset {
  TextGraph graph;
  GroundTruth truth;
  std::vector<PositiveEdge> splits;
};

Dataset generate_dataset(const RunConfig& config);
// nodes.jsonl, edges.tsv, ground_truth.jsonl, splits.jsonl
std::vector<std::filesystem::path> write_dataset(const Dataset& ds, const std::filesystem::path& dir);
// Missing files raise DependencyError naming "generate-data".
Dataset load_dataset(const std::filesystem::path& dir, const RunConfig& config);

// Tasks for one split. Training tasks carry no negatives.
std::vector<MatchTask> split_tasks(const Dataset& ds, const RunConfig& config, Split split);

// ---- metrics ---------------------------------------------------------------

struct TaskResult {
  std::size_t task = 0;
  std::size_t rank = 0;  // 1-based rank of the positive key
  double ndcg = 0.0;
};

struct Metrics {
  double p_at_1 = 0.0;
  double ndcg = 0.0;
  std::vector<TaskResult> per_task;
};

double ndcg_at_rank(std::size_t rank);  // 1 / log2(rank + 1)

// Scores candidate `i` of a task (0 = positive key).
using CandidateScorer = std::function<double(const MatchTask& task, std::size_t candidate)>;
// Scores every candidate of a task at once.
using TaskScorer = std::function<std::vector<double>(const MatchTask& task)>;

// Candidates are ranked by score, ties broken by node id, so the result does
// not depend on the order candidates are listed in. Throws ConfigError on an
// empty task list.
Metrics evaluate(std::span<const MatchTask> tasks, const TaskScorer& scorer, std::size_t workers = 1);
Metrics evaluate(std::span<const MatchTask> tasks, const CandidateScorer& scorer, std::size_t workers = 1);

// ---- cascade ---------------------------------------------------------------

// Frozen models plus per-node encodings.
struct InferenceContext {
  const TextGraph* graph = nullptr;
  const MatchModel* matcher = nullptr;
  const SelectorModel* selector = nullptr;
  Encodings heavy;
  LightEncodings light;

  static InferenceContext build(const TextGraph& g, const MatchModel& matcher, const SelectorModel& selector);
};

struct SideSelection {
  std::vector<NodeId> query;
  std::vector<NodeId> key;
};

// Selector + policy selection for every candidate of a task.
std::vector<SideSelection> select_neighbors(const InferenceContext& ctx, const MatchTask& task,
                                            const TruncationPolicy& policy);

struct CascadeRanking {
  std::vector<std::size_t> order;  // candidate indices, best first; ties by candidate index
  std::vector<double> scores;      // aligned with candidates
  std::vector<SideSelection> selections;
};

CascadeRanking run_cascade(const InferenceContext& ctx, const MatchTask& task, const TruncationPolicy& policy);
// Matcher over the complete neighbor lists.
CascadeRanking run_full_neighbors(const InferenceContext& ctx, const MatchTask& task);

// ---- cost ------------------------------------------------------------------

struct CostReport {
  std::size_t n = 0;
  std::size_t k = 0;
  double t_s = 0.0;  // seconds per document, selector encoder
  double t_m = 0.0;  // seconds per document, matcher encoder
  double t_h = 0.0;  // seconds per neighbor, heuristic selection
  double all_neighbors = 0.0;  // n * T_m
  double heuristic = 0.0;      // n * T_h + k * T_m
  double cdsm = 0.0;           // n * T_s + k * T_m
  // Wall-clock of an actual run over the same tasks (seconds), when measured.
  std::optional<double> measured_cascade;
  std::optional<double> measured_full;
  std::size_t measured_tasks = 0;
  double mean_neighbors = 0.0;
};

CostReport cost_model(std::size_t n, std::size_t k, double t_s, double t_m, double t_h);

struct EncoderTimings {
  double t_s = 0.0;
  double t_m = 0.0;
  double t_h = 0.0;
};
// Mean per-document encode time over a warm batch of `docs` documents.
EncoderTimings measure_encoder_times(const TextGraph& g, const MatchModel& matcher, const SelectorModel& selector,
                                     std::size_t docs = 1000);

// Times the cascade (FixedK k) and the full-neighbor matcher on the positive pair
// of each task, encoding every document from scratch.
CostReport measure_cost(const TextGraph& g, const MatchModel& matcher, const SelectorModel& selector,
                        std::span<const MatchTask> tasks, std::size_t k, std::size_t timing_docs = 1000);

// ---- analyses --------------------------------------------------------------

enum class SelectionMethod { Random, Popularity, SimilarityLite, CDSM, Oracle };
std::string_view selection_method_name(SelectionMethod m);
inline constexpr SelectionMethod kAllMethods[] = {SelectionMethod::Random, SelectionMethod::Popularity,
                                                  SelectionMethod::SimilarityLite, SelectionMethod::CDSM,
                                                  SelectionMethod::Oracle};

// First k neighbors of a side's list under `method`, for candidate `candidate`.
std::vector<NodeId> select_by_method(const InferenceContext& ctx, const GroundTruth* truth, const MatchTask& task,
                                     std::size_t candidate, Side side, SelectionMethod method, std::size_t k,
                                     std::uint64_t seed);

Metrics evaluate_method(const InferenceContext& ctx, const GroundTruth* truth, std::span<const MatchTask> tasks,
                        SelectionMethod method, std::size_t k, std::uint64_t seed, std::size_t workers = 1);

struct CurveRow {
  SelectionMethod method;
  std::size_t k = 0;
  double p_at_1 = 0.0;
  double ndcg = 0.0;
};

std::vector<CurveRow> curve_analysis(const InferenceContext& ctx, const GroundTruth* truth,
                                     std::span<const MatchTask> tasks, std::span<const std::size_t> ks,
                                     std::span<const SelectionMethod> methods, std::uint64_t seed,
                                     std::size_t workers = 1);

struct AgreementReport {
  std::size_t counts[3] = {0, 0, 0};  // annotator positions 1-10, 11-20, 21+
  double mass[3] = {0.0, 0.0, 0.0};
  double random_expectation = 0.0;    // mean of 10 / n over counted lists
  std::size_t lists = 0;
  std::size_t skipped = 0;            // lists with fewer than 10 neighbors
};

// For each task and side: neighbors ranked by annotation margin (descending,
// ties by list index) versus the selector's top 10.
AgreementReport agreement_analysis(const InferenceContext& ctx, const AnnotationSet& annotations,
                                   std::span<const MatchTask> tasks);

struct TruncationRow {
  TruncationPolicy policy;
  double p_at_1 = 0.0;
  double ndcg = 0.0;
  double mean_selected = 0.0;  // neighbors per side
};

Metrics evaluate_cascade(const InferenceContext& ctx, std::span<const MatchTask> tasks, const TruncationPolicy& policy,
                         double* mean_selected = nullptr, std::size_t workers = 1);

// tau and p are tuned on `valid` (best p@1, then smaller selection) and then
// applied to `test` alongside FixedK and RelevanceThreshold.
std::vector<TruncationRow> truncation_comparison(const InferenceContext& ctx, std::span<const MatchTask> valid,
                                                 std::span<const MatchTask> test, std::size_t k,
                                                 std::size_t workers = 1);

// ---- orchestration ---------------------------------------------------------

struct HybridResult {
  MatchModel matcher;
  std::vector<double> matcher_curve;
  AnnotationSet annotations;
  PairDataset pairs;
  SelectorModel selector;
  std::vector<double> selector_curve;
  double selector_holdout_accuracy = 0.0;
};

MatchModel stage_train_matcher(const RunConfig& c, const Dataset& ds, std::vector<double>* curve = nullptr);
AnnotationSet stage_annotate(const RunConfig& c, const Dataset& ds, const MatchModel& matcher);
SelectorModel stage_train_selector(const RunConfig& c, const Dataset& ds, const AnnotationSet& ann,
                                   std::vector<double>* curve = nullptr, double* holdout_accuracy = nullptr,
                                   PairDataset* pairs_out = nullptr);

// train-matcher -> annotate -> build_pairs -> train-selector. With `out_dir`,
// persists matcher.ckpt, annotations.jsonl, selector.ckpt and a manifest. A
// failing stage raises TrainingError/Error re-tagged with the stage name.
HybridResult hybrid_optimize(const RunConfig& c, const Dataset& ds,
                             const std::optional<std::filesystem::path>& out_dir = std::nullopt);

// ---- manifest --------------------------------------------------------------

std::string sha256_file(const std::filesystem::path& path);

struct ArtifactEntry {
  std::string stage;
  std::string path;  // relative to the run directory
  std::string sha256;
};

struct StageEntry {
  std::string stage;
  std::string started;
  std::string finished;
};

// manifest.json in a run directory. Every listed path must exist when saved.
class Manifest {
 public:
  static Manifest open(const std::filesystem::path& dir);  // loads or starts a new one
  void set_config(const RunConfig& c);
  void record(const std::string& stage, const std::vector<std::filesystem::path>& files,
              std::chrono::system_clock::time_point started);
  void save() const;

  const std::vector<ArtifactEntry>& artifacts() const noexcept { return artifacts_; }
  const std::vector<StageEntry>& stages() const noexcept { return stages_; }
  const std::string& run_id() const noexcept { return run_id_; }
  std::filesystem::path dir() const { return dir_; }

 private:
  std::filesystem::path dir_;
  std::string run_id_;
  nlohmann::json config_;
  std::vector<ArtifactEntry> artifacts_;
  std::vector<StageEntry> stages_;
};

// ---- report writers ---------------------------------------------------------

nlohmann::json metrics_json(const Metrics& m);
void write_metrics(const Metrics& m, const std::filesystem::path& json_path, const std::filesystem::path& csv_path);
void write_curves(std::span<const CurveRow> rows, const std::filesystem::path& csv_path,
                  const std::filesystem::path& json_path);
nlohmann::json agreement_json(const AgreementReport& r);
void write_agreement_svg(const AgreementReport& r, const std::filesystem::path& path);
nlohmann::json cost_json(const CostReport& r);

}  // namespace cdsm
