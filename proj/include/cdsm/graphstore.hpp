#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace cdsm {

using NodeId = std::uint32_t;
using TokenId = std::uint32_t;

// Whitespace-token vocabulary with implicit index order. On disk: one token per line.
class Vocabulary {
 public:
  Vocabulary() = default;
  explicit Vocabulary(std::vector<std::string> tokens);

  // Index of `token`, adding it if absent.
  TokenId intern(std::string_view token);
  std::optional<TokenId> find(std::string_view token) const;
  const std::string& token(TokenId id) const;
  std::size_t size() const noexcept { return tokens_.size(); }
  const std::vector<std::string>& tokens() const noexcept { return tokens_; }

  void save(const std::filesystem::path& path) const;
  static Vocabulary load(const std::filesystem::path& path);

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> index_;
};

struct Document {
  std::string id;
  std::vector<TokenId> tokens;
};

struct Edge {
  NodeId a = 0;
  NodeId b = 0;
  friend bool operator==(const Edge&, const Edge&) = default;
};

// Immutable textual graph: documents plus symmetric adjacency without self-loops.
class TextGraph {
 public:
  TextGraph() = default;
  // Validates every invariant; duplicate edges are merged.
  TextGraph(std::vector<Document> docs, std::span<const Edge> edges, Vocabulary vocab);

  std::size_t size() const noexcept { return docs_.size(); }
  std::size_t num_edges() const noexcept { return num_edges_; }
  std::size_t vocab_size() const noexcept { return vocab_.size(); }
  const Vocabulary& vocab() const noexcept { return vocab_; }

  const Document& doc(NodeId n) const { return docs_.at(n); }
  const std::vector<Document>& docs() const noexcept { return docs_; }
  NodeId index_of(std::string_view id) const;  // throws LookupError
  std::optional<NodeId> find(std::string_view id) const;

  // Sorted ascending.
  std::span<const NodeId> neighbors(NodeId n) const { return adj_.at(n); }
  std::size_t degree(NodeId n) const { return adj_.at(n).size(); }
  bool adjacent(NodeId u, NodeId v) const;
  std::vector<Edge> edges() const;  // each undirected edge once, a < b

  std::string text(NodeId n) const;  // tokens joined by single spaces

 private:
  std::vector<Document> docs_;
  std::unordered_map<std::string, NodeId> index_;
  std::vector<std::vector<NodeId>> adj_;
  Vocabulary vocab_;
  std::size_t num_edges_ = 0;
};

// Reads the nodes file (JSON-lines {"id","text"}) and edges file (two tab-separated
// ids per line). Texts are whitespace-tokenized and truncated to their first
// `max_len` tokens. The vocabulary is built from the corpus in first-seen order
// unless `vocab` is given, in which case unknown tokens are an error.
TextGraph load_graph(const std::filesystem::path& nodes_path, const std::filesystem::path& edges_path,
                     std::size_t max_len, const Vocabulary* vocab = nullptr);

void write_nodes(const TextGraph& g, const std::filesystem::path& path);
void write_edges(const TextGraph& g, const std::filesystem::path& path);

struct NeighborList {
  NodeId owner = 0;
  std::vector<NodeId> neighbors;
};

inline constexpr std::size_t kDefaultNeighborCap = 50;
inline constexpr std::size_t kDefaultNegatives = 29;

// Nodes within two hops of `node`, excluding `node` itself, sorted ascending.
// A masked edge is treated as absent; ids in `excluded` are dropped.
std::vector<NodeId> two_hop_population(const TextGraph& g, NodeId node,
                                       std::optional<Edge> masked = std::nullopt,
                                       std::span<const NodeId> excluded = {});

// Uniform sample without replacement of at most `cap` nodes from the 1- and
// 2-hop population. Deterministic in (graph, node, cap, seed).
NeighborList sample_neighbors(const TextGraph& g, NodeId node, std::size_t cap, std::uint64_t seed);
NeighborList sample_neighbors(const TextGraph& g, NodeId node, std::size_t cap, std::uint64_t seed,
                              std::optional<Edge> masked, std::span<const NodeId> excluded);

enum class Split { Train, Valid, Test };
std::string_view split_name(Split s);
Split parse_split(std::string_view s);

struct PositiveEdge {
  NodeId query = 0;
  NodeId key = 0;
  Split split = Split::Train;
};

// JSON-lines {"query","key","split"}.
std::vector<PositiveEdge> load_splits(const std::filesystem::path& path, const TextGraph& g);
void write_splits(const TextGraph& g, std::span<const PositiveEdge> edges, const std::filesystem::path& path);
std::vector<Edge> edges_of(std::span<const PositiveEdge> edges, Split split);

// One ranking instance: the positive key must outrank every negative.
struct MatchTask {
  std::size_t id = 0;
  NodeId query = 0;
  NodeId positive_key = 0;
  std::vector<NodeId> negative_keys;
  NeighborList query_neighbors;
  // One list per candidate, aligned with candidates(): positive first.
  std::vector<NeighborList> key_neighbors;

  std::size_t num_candidates() const noexcept { return 1 + negative_keys.size(); }
  NodeId candidate(std::size_t i) const { return i == 0 ? positive_key : negative_keys.at(i - 1); }
  std::vector<NodeId> candidates() const;
};

// One task per positive edge. Negatives are drawn uniformly from nodes not
// adjacent to the query. Neighbor lists are sampled with the positive edge masked;
// the query's list holds no candidate key and no candidate's list holds the query.
std::vector<MatchTask> build_tasks(const TextGraph& g, std::span<const Edge> positive_edges,
                                   std::size_t num_negatives, std::size_t cap, std::uint64_t seed);

}  // namespace cdsm
