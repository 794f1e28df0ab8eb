#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "cdsm/graphstore.hpp"

namespace cdsm {

// Synthetic planted-topic textual graph.
//
// Every node carries one topic, or two for a `multi_topic_frac` share of "hub"
// nodes. Pairs sharing a topic connect with probability `intra_p`, others with
// `inter_p`. Text tokens come from the node's topic vocabularies, mixed with a
// shared noise vocabulary at rate `noise_frac`.
//
// With `locality > 0` each topic membership also gets a position on a unit ring:
// the intra-topic edge probability becomes intra_p * exp(-d/locality) / (2 locality)
// (same mean, concentrated on nearby pairs) and topic tokens are drawn around the
// position with standard deviation `token_spread` (in vocabulary slots). This gives
// edges a within-topic signal that text and neighbors can carry; with
// locality == 0 the model is a plain planted partition.
struct GenConfig {
  std::size_t num_nodes = 2000;
  std::size_t num_topics = 16;
  std::size_t tokens_per_doc = 12;
  std::size_t topic_vocab = 64;
  std::size_t noise_vocab = 256;
  double noise_frac = 0.25;
  double intra_p = 0.13;
  double inter_p = 0.0008;
  double multi_topic_frac = 0.1;
  double locality = 0.0;
  double token_spread = 8.0;
  std::uint64_t seed = 1;

  void validate() const;  // throws ConfigError
};

struct GroundTruth {
  // One or two topics per node, primary first.
  std::vector<std::vector<std::uint32_t>> topics;
  // Ring position per topic membership (aligned with `topics`); empty entries when locality == 0.
  std::vector<std::vector<double>> positions;

  bool shares_topic(NodeId a, NodeId b) const;
  const std::vector<std::uint32_t>& topics_of(NodeId n) const;  // throws LookupError
};

struct GeneratedData {
  TextGraph graph;
  GroundTruth truth;
};

GeneratedData generate_graph(const GenConfig& config);

void write_ground_truth(const TextGraph& g, const GroundTruth& gt, const std::filesystem::path& path);
GroundTruth load_ground_truth(const std::filesystem::path& path, const TextGraph& g);

// True iff `neighbor` shares a topic with `counterpart`.
bool usefulness_oracle(const GroundTruth& gt, NodeId counterpart, NodeId neighbor);

enum class Side { Query, Key };

// Task form: `neighbor` must belong to the list of the query (side Query) or of
// candidate `candidate` (side Key); the counterpart is the candidate key for a
// query-side neighbor and the query for a key-side neighbor.
bool usefulness_oracle(const GroundTruth& gt, const MatchTask& task, Side side, std::size_t candidate,
                       NodeId neighbor);

// Positive edges for training/evaluation: a uniform sample of graph edges split
// into train/valid/test with the given counts, oriented at random.
std::vector<PositiveEdge> sample_positive_edges(const TextGraph& g, std::size_t train, std::size_t valid,
                                                std::size_t test, std::uint64_t seed);

}  // namespace cdsm
