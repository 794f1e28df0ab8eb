#include "cdsm/graphstore.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

#include "cdsm/error.hpp"
#include "cdsm/random.hpp"
#include "json.hpp"

namespace cdsm {

using nlohmann::json;

Vocabulary::Vocabulary(std::vector<std::string> tokens) {
  for (auto& t : tokens) {
    if (index_.contains(t)) throw IntegrityError("duplicate vocabulary token '" + t + "'");
    index_.emplace(t, static_cast<TokenId>(tokens_.size()));
    tokens_.push_back(std::move(t));
  }
}

TokenId Vocabulary::intern(std::string_view token) {
  auto it = index_.find(std::string(token));
  if (it != index_.end()) return it->second;
  auto id = static_cast<TokenId>(tokens_.size());
  tokens_.emplace_back(token);
  index_.emplace(tokens_.back(), id);
  return id;
}

std::optional<TokenId> Vocabulary::find(std::string_view token) const {
  auto it = index_.find(std::string(token));
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

const std::string& Vocabulary::token(TokenId id) const {
  if (id >= tokens_.size()) throw LookupError("token id " + std::to_string(id) + " out of vocabulary");
  return tokens_[id];
}

void Vocabulary::save(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  for (const auto& t : tokens_) out << t << '\n';
}

Vocabulary Vocabulary::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read " + path.string());
  std::vector<std::string> tokens;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line.find_first_of(" \t") != std::string::npos) {
      throw ParseError(path.string(), lineno, "expected one token per line");
    }
    tokens.push_back(line);
  }
  return Vocabulary(std::move(tokens));
}

TextGraph::TextGraph(std::vector<Document> docs, std::span<const Edge> edges, Vocabulary vocab)
    : docs_(std::move(docs)), vocab_(std::move(vocab)) {
  index_.reserve(docs_.size());
  for (std::size_t i = 0; i < docs_.size(); ++i) {
    const auto& d = docs_[i];
    if (d.tokens.empty()) throw IntegrityError("document '" + d.id + "' has no tokens");
    for (auto t : d.tokens) {
      if (t >= vocab_.size()) {
        throw IntegrityError("document '" + d.id + "' has token id " + std::to_string(t) +
                             " outside the vocabulary");
      }
    }
    if (!index_.emplace(d.id, static_cast<NodeId>(i)).second) {
      throw IntegrityError("duplicate node id '" + d.id + "'");
    }
  }
  adj_.assign(docs_.size(), {});
  for (const auto& e : edges) {
    if (e.a >= docs_.size() || e.b >= docs_.size()) throw IntegrityError("edge endpoint out of range");
    if (e.a == e.b) throw IntegrityError("self-loop on node '" + docs_[e.a].id + "'");
    adj_[e.a].push_back(e.b);
    adj_[e.b].push_back(e.a);
  }
  for (auto& list : adj_) {
    std::sort(list.begin(), list.end());
    list.erase(std::unique(list.begin(), list.end()), list.end());
    num_edges_ += list.size();
  }
  num_edges_ /= 2;
}

NodeId TextGraph::index_of(std::string_view id) const {
  auto found = find(id);
  if (!found) throw LookupError("unknown node id '" + std::string(id) + "'");
  return *found;
}

std::optional<NodeId> TextGraph::find(std::string_view id) const {
  auto it = index_.find(std::string(id));
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

bool TextGraph::adjacent(NodeId u, NodeId v) const {
  const auto& list = adj_.at(u);
  return std::binary_search(list.begin(), list.end(), v);
}

std::vector<Edge> TextGraph::edges() const {
  std::vector<Edge> out;
  out.reserve(num_edges_);
  for (NodeId u = 0; u < adj_.size(); ++u) {
    for (NodeId v : adj_[u]) {
      if (u < v) out.push_back({u, v});
    }
  }
  return out;
}

std::string TextGraph::text(NodeId n) const {
  std::string out;
  for (auto t : doc(n).tokens) {
    if (!out.empty()) out += ' ';
    out += vocab_.token(t);
  }
  return out;
}

namespace {

std::vector<std::string> split_ws(std::string_view s) {
  std::vector<std::string> out;
  std::istringstream in{std::string(s)};
  std::string tok;
  while (in >> tok) out.push_back(tok);
  return out;
}

}  // namespace

TextGraph load_graph(const std::filesystem::path& nodes_path, const std::filesystem::path& edges_path,
                     std::size_t max_len, const Vocabulary* vocab) {
  if (max_len == 0) throw ConfigError("max_len must be positive");
  std::ifstream nodes(nodes_path);
  if (!nodes) throw IoError("cannot read " + nodes_path.string());

  Vocabulary built;
  std::vector<Document> docs;
  std::unordered_map<std::string, NodeId> ids;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(nodes, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    json rec;
    try {
      rec = json::parse(line);
    } catch (const json::exception& e) {
      throw ParseError(nodes_path.string(), lineno, e.what());
    }
    if (!rec.is_object() || !rec.contains("id") || !rec["id"].is_string() || !rec.contains("text") ||
        !rec["text"].is_string()) {
      throw ParseError(nodes_path.string(), lineno, "expected {\"id\": string, \"text\": string}");
    }
    Document d;
    d.id = rec["id"].get<std::string>();
    auto words = split_ws(rec["text"].get<std::string>());
    if (words.size() > max_len) words.resize(max_len);
    if (words.empty()) throw ParseError(nodes_path.string(), lineno, "empty text");
    for (const auto& w : words) {
      if (vocab != nullptr) {
        auto t = vocab->find(w);
        if (!t) throw ParseError(nodes_path.string(), lineno, "token '" + w + "' not in vocabulary");
        d.tokens.push_back(*t);
      } else {
        d.tokens.push_back(built.intern(w));
      }
    }
    if (!ids.emplace(d.id, static_cast<NodeId>(docs.size())).second) {
      throw ParseError(nodes_path.string(), lineno, "duplicate node id '" + d.id + "'");
    }
    docs.push_back(std::move(d));
  }

  std::ifstream edges_in(edges_path);
  if (!edges_in) throw IoError("cannot read " + edges_path.string());
  std::vector<Edge> edges;
  lineno = 0;
  while (std::getline(edges_in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    auto tab = line.find('\t');
    if (tab == std::string::npos || line.find('\t', tab + 1) != std::string::npos) {
      throw ParseError(edges_path.string(), lineno, "expected two tab-separated node ids");
    }
    auto a = line.substr(0, tab);
    auto b = line.substr(tab + 1);
    if (a.empty() || b.empty()) throw ParseError(edges_path.string(), lineno, "empty node id");
    auto ia = ids.find(a);
    auto ib = ids.find(b);
    if (ia == ids.end() || ib == ids.end()) {
      throw IntegrityError(edges_path.string() + ":" + std::to_string(lineno) + ": edge references unknown node '" +
                           (ia == ids.end() ? a : b) + "'");
    }
    if (ia->second == ib->second) {
      throw IntegrityError(edges_path.string() + ":" + std::to_string(lineno) + ": self-loop on '" + a + "'");
    }
    edges.push_back({ia->second, ib->second});
  }
  return TextGraph(std::move(docs), edges, vocab != nullptr ? *vocab : std::move(built));
}

void write_nodes(const TextGraph& g, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  for (NodeId n = 0; n < g.size(); ++n) {
    json rec = {{"id", g.doc(n).id}, {"text", g.text(n)}};
    out << rec.dump() << '\n';
  }
}

void write_edges(const TextGraph& g, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  for (const auto& e : g.edges()) out << g.doc(e.a).id << '\t' << g.doc(e.b).id << '\n';
}

std::vector<NodeId> two_hop_population(const TextGraph& g, NodeId node, std::optional<Edge> masked,
                                       std::span<const NodeId> excluded) {
  if (node >= g.size()) throw LookupError("node index out of range");
  auto is_masked = [&](NodeId u, NodeId v) {
    return masked && ((masked->a == u && masked->b == v) || (masked->a == v && masked->b == u));
  };
  std::vector<NodeId> pop;
  for (NodeId u : g.neighbors(node)) {
    if (is_masked(node, u)) continue;
    pop.push_back(u);
    for (NodeId v : g.neighbors(u)) {
      if (is_masked(u, v)) continue;
      pop.push_back(v);
    }
  }
  std::sort(pop.begin(), pop.end());
  pop.erase(std::unique(pop.begin(), pop.end()), pop.end());
  std::erase_if(pop, [&](NodeId v) {
    return v == node || std::find(excluded.begin(), excluded.end(), v) != excluded.end();
  });
  return pop;
}

NeighborList sample_neighbors(const TextGraph& g, NodeId node, std::size_t cap, std::uint64_t seed) {
  return sample_neighbors(g, node, cap, seed, std::nullopt, {});
}

NeighborList sample_neighbors(const TextGraph& g, NodeId node, std::size_t cap, std::uint64_t seed,
                              std::optional<Edge> masked, std::span<const NodeId> excluded) {
  auto pop = two_hop_population(g, node, masked, excluded);
  auto rng = make_rng(seed, {node, 0x6e6bULL});
  return {node, sample_without_replacement(std::move(pop), cap, rng)};
}

std::string_view split_name(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Valid: return "valid";
    case Split::Test: return "test";
  }
  return "train";
}

Split parse_split(std::string_view s) {
  if (s == "train") return Split::Train;
  if (s == "valid") return Split::Valid;
  if (s == "test") return Split::Test;
  throw ConfigError("unknown split '" + std::string(s) + "'");
}

std::vector<PositiveEdge> load_splits(const std::filesystem::path& path, const TextGraph& g) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read " + path.string());
  std::vector<PositiveEdge> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    json rec;
    try {
      rec = json::parse(line);
    } catch (const json::exception& e) {
      throw ParseError(path.string(), lineno, e.what());
    }
    if (!rec.is_object() || !rec.contains("query") || !rec.contains("key") || !rec.contains("split") ||
        !rec["query"].is_string() || !rec["key"].is_string() || !rec["split"].is_string()) {
      throw ParseError(path.string(), lineno, "expected {\"query\", \"key\", \"split\"}");
    }
    PositiveEdge e;
    try {
      e.split = parse_split(rec["split"].get<std::string>());
    } catch (const ConfigError& err) {
      throw ParseError(path.string(), lineno, err.what());
    }
    auto q = g.find(rec["query"].get<std::string>());
    auto k = g.find(rec["key"].get<std::string>());
    if (!q || !k) throw IntegrityError(path.string() + ":" + std::to_string(lineno) + ": unknown node id");
    if (!g.adjacent(*q, *k)) {
      throw IntegrityError(path.string() + ":" + std::to_string(lineno) + ": positive edge not in graph");
    }
    e.query = *q;
    e.key = *k;
    out.push_back(e);
  }
  return out;
}

void write_splits(const TextGraph& g, std::span<const PositiveEdge> edges, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  for (const auto& e : edges) {
    json rec = {{"query", g.doc(e.query).id}, {"key", g.doc(e.key).id}, {"split", split_name(e.split)}};
    out << rec.dump() << '\n';
  }
}

std::vector<Edge> edges_of(std::span<const PositiveEdge> edges, Split split) {
  std::vector<Edge> out;
  for (const auto& e : edges) {
    if (e.split == split) out.push_back({e.query, e.key});
  }
  return out;
}

std::vector<NodeId> MatchTask::candidates() const {
  std::vector<NodeId> out;
  out.reserve(num_candidates());
  out.push_back(positive_key);
  out.insert(out.end(), negative_keys.begin(), negative_keys.end());
  return out;
}

std::vector<MatchTask> build_tasks(const TextGraph& g, std::span<const Edge> positive_edges,
                                   std::size_t num_negatives, std::size_t cap, std::uint64_t seed) {
  std::vector<MatchTask> tasks;
  tasks.reserve(positive_edges.size());
  for (std::size_t i = 0; i < positive_edges.size(); ++i) {
    const auto [q, k] = positive_edges[i];
    if (q >= g.size() || k >= g.size() || !g.adjacent(q, k)) {
      throw IntegrityError("positive edge " + std::to_string(i) + " is not in the graph");
    }
    const std::size_t eligible = g.size() - 1 - g.degree(q);
    if (eligible < num_negatives) {
      throw IntegrityError("query '" + g.doc(q).id + "' has only " + std::to_string(eligible) +
                           " eligible negatives, " + std::to_string(num_negatives) + " requested");
    }
    auto rng = make_rng(seed, {i, q, k, 0x7461ULL});
    MatchTask t;
    t.id = i;
    t.query = q;
    t.positive_key = k;
    // Rejection sampling; the eligible pool is most of the graph in practice.
    std::vector<NodeId> negatives;
    if (eligible * 2 >= g.size()) {
      while (negatives.size() < num_negatives) {
        auto c = static_cast<NodeId>(uniform_index(rng, g.size()));
        if (c == q || g.adjacent(q, c) || std::find(negatives.begin(), negatives.end(), c) != negatives.end()) {
          continue;
        }
        negatives.push_back(c);
      }
    } else {
      std::vector<NodeId> pool;
      for (NodeId c = 0; c < g.size(); ++c) {
        if (c != q && !g.adjacent(q, c)) pool.push_back(c);
      }
      negatives = sample_without_replacement(std::move(pool), num_negatives, rng);
    }
    t.negative_keys = std::move(negatives);

    const Edge masked{q, k};
    const auto cands = t.candidates();
    const std::uint64_t list_seed = derive_seed(seed, {i, 0x6c73ULL});
    t.query_neighbors = sample_neighbors(g, q, cap, list_seed, masked, cands);
    const NodeId query_only[] = {q};
    t.key_neighbors.reserve(cands.size());
    for (NodeId c : cands) {
      t.key_neighbors.push_back(sample_neighbors(g, c, cap, list_seed, masked, query_only));
    }
    tasks.push_back(std::move(t));
  }
  return tasks;
}

}  // namespace cdsm
