#pragma once

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "cdsm/encoders.hpp"
#include "cdsm/matcher.hpp"
#include "cdsm/supervision.hpp"

namespace cdsm {

enum class RankingMode { OneStep, MultiStep };
std::string_view ranking_mode_name(RankingMode m);
RankingMode parse_ranking_mode(std::string_view s);

struct SelectorConfig {
  LightEncoderConfig encoder;
  RankingMode mode = RankingMode::OneStep;
};

// Light encoder, plus the affine combine layer phi (2d -> d) in multi-step mode.
class SelectorModel {
 public:
  SelectorModel(const SelectorConfig& config, std::uint64_t seed);
  SelectorModel(const SelectorModel& other);
  SelectorModel& operator=(const SelectorModel& other);

  const SelectorConfig& config() const noexcept { return config_; }
  RankingMode mode() const noexcept { return config_.mode; }
  std::size_t dim() const noexcept { return config_.encoder.dim; }
  ParamStore& params() noexcept { return store_; }
  const ParamStore& params() const noexcept { return store_; }
  const LightEncoder& encoder() const noexcept { return encoder_; }
  bool has_phi() const noexcept { return phi_w_ != nullptr; }
  Parameter& phi_weight() const;  // throws ConfigError in one-step mode
  Parameter& phi_bias() const;

  void save(const std::filesystem::path& path) const;
  static SelectorModel load(const std::filesystem::path& path);

 private:
  void bind();

  SelectorConfig config_;
  ParamStore store_;
  LightEncoder encoder_;
  Parameter* phi_w_ = nullptr;
  Parameter* phi_b_ = nullptr;
};

// Cached light encodings, indexed by node.
using LightEncodings = std::vector<Tensor>;
LightEncodings encode_all_light(const SelectorModel& model, const TextGraph& g);

// r(N_i) = enc(N_i) . enc(counterpart), evaluated per neighbor.
std::vector<double> rank_one_step(const Tensor& counterpart, std::span<const Tensor* const> neighbors);
std::vector<double> rank_one_step(const SelectorModel& model, const Document& counterpart,
                                  std::span<const Document* const> neighbors);

// Multi-step score of `candidate` given the already selected set:
//   phi(concat(r_center, maxpool(selected + {candidate}))) . r_counterpart
double multi_step_score(const SelectorModel& model, const Tensor& center, const Tensor& counterpart,
                        std::span<const Tensor* const> selected, const Tensor& candidate);

struct MultiStepSelection {
  std::vector<std::size_t> order;  // neighbor indices in selection order
  std::vector<double> scores;      // score of each pick at its step
};

// Greedy: k rounds (or until exhausted), argmax each round, ties to the lowest index.
MultiStepSelection rank_multi_step(const SelectorModel& model, const Tensor& center, const Tensor& counterpart,
                                   std::span<const Tensor* const> neighbors, std::size_t k);

double sim(const SelectorModel& model, const Document& q, const Document& k);
double sim(const Tensor& q, const Tensor& k);

// ---- truncation ------------------------------------------------------------

enum class TruncationKind { FixedK, AbsoluteThreshold, OverallRanking, RelevanceThreshold };
std::string_view truncation_name(TruncationKind k);
TruncationKind parse_truncation(std::string_view s);

inline constexpr std::size_t kDefaultHardCap = 20;

struct TruncationPolicy {
  TruncationKind kind = TruncationKind::FixedK;
  std::optional<std::size_t> k;   // FixedK
  std::optional<double> tau;      // AbsoluteThreshold
  std::optional<std::size_t> p;   // OverallRanking
  std::size_t hard_cap = kDefaultHardCap;

  static TruncationPolicy fixed_k(std::size_t k, std::size_t cap = kDefaultHardCap);
  static TruncationPolicy absolute(double tau, std::size_t cap = kDefaultHardCap);
  static TruncationPolicy overall(std::size_t p, std::size_t cap = kDefaultHardCap);
  static TruncationPolicy relevance(std::size_t cap = kDefaultHardCap);

  void validate() const;  // exactly the field matching `kind` is set; hard_cap >= 1
  std::string describe() const;
};

struct SelectionResult {
  std::vector<std::size_t> selected;  // indices into the scored list, best first
  std::vector<double> scores;         // the scores that justified selection
  TruncationPolicy policy;
};

// Unified list for OverallRanking: every document's neighbor scores, and which
// document the current call truncates.
struct OverallContext {
  std::span<const std::vector<double>> lists;
  std::size_t self = 0;
};

struct TruncationContext {
  std::optional<double> sim;              // RelevanceThreshold
  std::optional<OverallContext> overall;  // OverallRanking
};

// Ordering everywhere: higher score first, lower index on ties. The hard cap
// keeps the best hard_cap survivors. Missing context raises ConfigError.
SelectionResult truncate(std::span<const double> scores, const TruncationPolicy& policy,
                         const TruncationContext& context = {});

// ---- loss and training -----------------------------------------------------

// Log: -log sigma(delta) (default). Literal: -sigma(delta).
Var selector_loss_from_delta(Var delta, LossMode mode);

// Differentiable score of one neighbor for a pair record, in the model's mode.
Var selector_score(Tape& tape, const SelectorModel& model, Var center, Var counterpart,
                   std::span<const Var> context, Var candidate);

struct SelectorTrainConfig {
  std::size_t batch_size = 64;
  std::size_t steps = 1500;
  double lr = 1e-3;
  LossMode loss = LossMode::Log;
  double holdout_fraction = 0.1;
  std::uint64_t seed = 1;
};

struct SelectorTrainResult {
  SelectorModel model;
  std::vector<double> loss_curve;
  double holdout_accuracy = 0.0;  // fraction of held-out pairs with delta > 0
  std::size_t train_pairs = 0;
  std::size_t holdout_pairs = 0;
};

// Held-out pairs are those of a seeded subset of tasks, so no task contributes
// to both sides of the split. Throws TrainingError on a non-finite loss.
SelectorTrainResult train_selector(const TextGraph& g, const PairDataset& pairs, const SelectorConfig& model_config,
                                   const SelectorTrainConfig& config);

// Fraction of records with r(N+) > r(N-).
double pairwise_accuracy(const SelectorModel& model, const LightEncodings& enc, std::span<const PairRecord> pairs);

}  // namespace cdsm
