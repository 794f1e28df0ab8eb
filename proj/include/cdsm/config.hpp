#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "cdsm/datagen.hpp"
#include "cdsm/matcher.hpp"
#include "cdsm/selector.hpp"
#include "cdsm/supervision.hpp"
#include "json.hpp"

namespace cdsm {

// Every experiment knob. All randomness derives from `seed`.
struct RunConfig {
  std::uint64_t seed = 1;
  std::size_t workers = 1;

  GenConfig data;  // data.seed is ignored; the graph seed derives from `seed`
  std::size_t train_edges = 4000;
  std::size_t valid_edges = 500;
  std::size_t test_edges = 1000;
  std::size_t num_negatives = kDefaultNegatives;
  std::size_t neighbor_cap = kDefaultNeighborCap;
  std::size_t max_len = 32;

  // matcher
  std::size_t dim = 64;
  std::size_t layers = 2;
  std::size_t heads = 4;
  std::size_t ffn_dim = 256;
  AggregatorKind aggregator = AggregatorKind::CP;
  MatcherTrainConfig matcher;  // matcher.seed is derived

  // supervision
  AnnotationMode annotation_mode = AnnotationMode::OneStep;
  std::size_t annotation_k = 5;
  std::size_t pairs_per_task = 16;

  // selector
  RankingMode selector_mode = RankingMode::OneStep;
  int window = 3;
  SelectorTrainConfig selector;  // selector.seed is derived

  // evaluation
  TruncationPolicy policy = TruncationPolicy::fixed_k(5);
  std::vector<std::size_t> curve_ks = {0, 1, 2, 3, 5, 10, 20, 50};
  std::size_t cost_tasks = 1000;
  std::size_t cost_k = 5;
  bool compare_truncation = true;
  bool compare_modes = false;

  void validate() const;  // throws ConfigError
};

nlohmann::json to_json(const RunConfig& c);
// Unknown keys raise UsageError naming the key; type errors raise ConfigError.
RunConfig config_from_json(const nlohmann::json& j);

// `base` overlaid with the JSON file at `path`; keys must already exist in `base`.
void overlay_json(nlohmann::json& base, const nlohmann::json& patch, const std::string& where = "");
// Applies "a.b.c=value"; value is parsed as JSON, falling back to a plain string.
void apply_override(nlohmann::json& doc, const std::string& assignment);

RunConfig load_config(const std::filesystem::path* path, const std::vector<std::string>& overrides);

// Stream seeds derived from the root seed.
std::uint64_t stage_seed(const RunConfig& c, std::uint64_t stage);
inline constexpr std::uint64_t kSeedData = 1, kSeedSplits = 2, kSeedTasks = 3, kSeedMatcher = 4, kSeedPairs = 5,
                               kSeedSelector = 6, kSeedEval = 7;

MatchModelConfig matcher_config(const RunConfig& c, std::size_t vocab_size);
SelectorConfig selector_config(const RunConfig& c, std::size_t vocab_size, RankingMode mode);

}  // namespace cdsm
