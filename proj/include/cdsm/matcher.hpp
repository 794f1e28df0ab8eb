#pragma once

#include <filesystem>
#include <span>
#include <string_view>
#include <vector>

#include "cdsm/encoders.hpp"
#include "cdsm/graphstore.hpp"

namespace cdsm {

enum class AggregatorKind { GAT, Mean, Max, Attn, CP };
std::string_view aggregator_name(AggregatorKind k);
AggregatorKind parse_aggregator(std::string_view s);  // throws ConfigError

// Log: -log p (default). Literal: -p, the un-logged form.
enum class LossMode { Log, Literal };
std::string_view loss_mode_name(LossMode m);
LossMode parse_loss_mode(std::string_view s);

struct MatchModelConfig {
  HeavyEncoderConfig encoder;
  AggregatorKind kind = AggregatorKind::CP;
};

// Heavy encoder plus the aggregator combine layer (W_c: 2d x d, b_c).
class MatchModel {
 public:
  MatchModel(const MatchModelConfig& config, std::uint64_t seed);
  MatchModel(const MatchModel& other);
  MatchModel& operator=(const MatchModel& other);

  const MatchModelConfig& config() const noexcept { return config_; }
  AggregatorKind kind() const noexcept { return config_.kind; }
  std::size_t dim() const noexcept { return config_.encoder.dim; }
  ParamStore& params() noexcept { return store_; }
  const ParamStore& params() const noexcept { return store_; }
  const HeavyEncoder& encoder() const noexcept { return encoder_; }
  Parameter& combine_weight() const { return *wc_; }
  Parameter& combine_bias() const { return *bc_; }

  void save(const std::filesystem::path& path) const;
  static MatchModel load(const std::filesystem::path& path);

 private:
  void bind();

  MatchModelConfig config_;
  ParamStore store_;
  HeavyEncoder encoder_;
  Parameter* wc_ = nullptr;
  Parameter* bc_ = nullptr;
};

struct Aggregation {
  Var out;                      // 1 x d
  Var pooled;                   // pre-combine pooled vector (GAT: equals out)
  std::vector<double> weights;  // attention weights aligned with the input neighbor order
                                // (GAT: center first); empty for Mean/Max
};

// Neighbors are processed in a canonical order (lexicographic on their values),
// so the result does not depend on the order they are passed in.
Aggregation aggregate_detailed(Tape& tape, Var center, std::span<const Var> neighbors, Var counterpart,
                               const MatchModel& model);
Var aggregate(Tape& tape, Var center, std::span<const Var> neighbors, Var counterpart, const MatchModel& model);

// m = aggregate(Q, Q.N, K) . aggregate(K, K.N, Q)
Var match_score(Tape& tape, const MatchModel& model, Var query, std::span<const Var> query_neighbors, Var key,
                std::span<const Var> key_neighbors);

// Cached heavy encodings, indexed by node.
using Encodings = std::vector<Tensor>;
Encodings encode_all_heavy(const MatchModel& model, const TextGraph& g);

// Value-only score from cached encodings.
double match_score_cached(const MatchModel& model, const Encodings& enc, NodeId query,
                          std::span<const NodeId> query_neighbors, NodeId key, std::span<const NodeId> key_neighbors);

// In-batch softmax loss over a B x B score matrix whose row i holds
// m(Q_i, K_j); the diagonal is the positive. Throws ConfigError for B < 2.
Var matcher_loss_from_scores(Var scores, LossMode mode);

struct MatchBatchRow {
  Var query;
  std::vector<Var> query_neighbors;
  Var key;
  std::vector<Var> key_neighbors;
};
Var matcher_loss(Tape& tape, const MatchModel& model, std::span<const MatchBatchRow> batch, LossMode mode);

struct MatcherTrainConfig {
  std::size_t batch_size = 32;
  std::size_t steps = 600;
  double lr = 1e-3;
  std::size_t neighbors_per_side = 5;
  // Neighbor count per side is drawn uniformly from [min_neighbors, neighbors_per_side].
  std::size_t min_neighbors = 5;
  LossMode loss = LossMode::Log;
  std::uint64_t seed = 1;
};

struct MatcherTrainResult {
  MatchModel model;
  std::vector<double> loss_curve;  // training loss per step
};

// Mini-batch Adam with in-batch negatives and freshly sampled neighbors each step.
// `tasks` supply (query, positive key) and the leakage-free neighbor lists.
// Throws TrainingError carrying the step index on a non-finite loss.
MatcherTrainResult train_matcher(const TextGraph& g, std::span<const MatchTask> tasks,
                                 const MatchModelConfig& model_config, const MatcherTrainConfig& config);

// Mean in-batch loss over fixed consecutive batches of `tasks` with the first
// `neighbors_per_side` neighbors of each list.
double evaluate_matcher_loss(const MatchModel& model, const TextGraph& g, std::span<const MatchTask> tasks,
                             std::size_t batch_size, std::size_t neighbors_per_side, LossMode mode);

}  // namespace cdsm
