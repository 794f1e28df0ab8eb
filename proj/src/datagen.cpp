#include "cdsm/datagen.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "cdsm/error.hpp"
#include "cdsm/random.hpp"
#include "json.hpp"

namespace cdsm {

using nlohmann::json;

void GenConfig::validate() const {
  if (num_nodes < 2) throw ConfigError("num_nodes must be at least 2");
  if (num_topics < 2) throw ConfigError("num_topics must be at least 2");
  if (tokens_per_doc == 0) throw ConfigError("tokens_per_doc must be positive");
  if (topic_vocab == 0) throw ConfigError("topic_vocab must be positive");
  if (!(inter_p >= 0.0 && inter_p < intra_p && intra_p <= 1.0)) {
    throw ConfigError("need 0 <= inter_p < intra_p <= 1");
  }
  if (!(multi_topic_frac >= 0.0 && multi_topic_frac <= 1.0)) throw ConfigError("multi_topic_frac must be in [0,1]");
  if (!(noise_frac >= 0.0 && noise_frac <= 1.0)) throw ConfigError("noise_frac must be in [0,1]");
  if (noise_frac > 0.0 && noise_vocab == 0) throw ConfigError("noise_vocab must be positive when noise_frac > 0");
  if (!(locality >= 0.0 && locality < 0.5)) throw ConfigError("locality must be in [0, 0.5)");
  if (!(token_spread >= 0.0)) throw ConfigError("token_spread must be non-negative");
}

bool GroundTruth::shares_topic(NodeId a, NodeId b) const {
  const auto& ta = topics_of(a);
  const auto& tb = topics_of(b);
  for (auto x : ta) {
    if (std::find(tb.begin(), tb.end(), x) != tb.end()) return true;
  }
  return false;
}

const std::vector<std::uint32_t>& GroundTruth::topics_of(NodeId n) const {
  if (n >= topics.size()) throw LookupError("no ground truth for node index " + std::to_string(n));
  return topics[n];
}

namespace {

double ring_distance(double x, double y) {
  double d = std::abs(x - y);
  return std::min(d, 1.0 - d);
}

}  // namespace

GeneratedData generate_graph(const GenConfig& cfg) {
  cfg.validate();
  const std::size_t n = cfg.num_nodes;
  auto rng = make_rng(cfg.seed, {0x67656eULL});

  GroundTruth gt;
  gt.topics.resize(n);
  gt.positions.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    auto primary = static_cast<std::uint32_t>(uniform_index(rng, cfg.num_topics));
    gt.topics[i].push_back(primary);
    if (uniform01(rng) < cfg.multi_topic_frac) {
      auto offset = 1 + uniform_index(rng, cfg.num_topics - 1);
      gt.topics[i].push_back(static_cast<std::uint32_t>((primary + offset) % cfg.num_topics));
    }
    if (cfg.locality > 0.0) {
      for (std::size_t m = 0; m < gt.topics[i].size(); ++m) gt.positions[i].push_back(uniform01(rng));
    }
  }

  // Edge probability for a pair: the largest over shared topics, inter_p otherwise.
  auto pair_p = [&](std::size_t a, std::size_t b) {
    double p = cfg.inter_p;
    const auto& ta = gt.topics[a];
    const auto& tb = gt.topics[b];
    for (std::size_t x = 0; x < ta.size(); ++x) {
      for (std::size_t y = 0; y < tb.size(); ++y) {
        if (ta[x] != tb[y]) continue;
        double q = cfg.intra_p;
        if (cfg.locality > 0.0) {
          double d = ring_distance(gt.positions[a][x], gt.positions[b][y]);
          q = std::min(1.0, cfg.intra_p * std::exp(-d / cfg.locality) / (2.0 * cfg.locality));
        }
        p = std::max(p, q);
      }
    }
    return p;
  };

  auto edge_rng = make_rng(cfg.seed, {0x65646765ULL});
  std::vector<Edge> edges;
  for (std::size_t a = 0; a < n; ++a) {
    for (std::size_t b = a + 1; b < n; ++b) {
      if (uniform01(edge_rng) < pair_p(a, b)) edges.push_back({static_cast<NodeId>(a), static_cast<NodeId>(b)});
    }
  }

  Vocabulary vocab;
  auto text_rng = make_rng(cfg.seed, {0x74657874ULL});
  std::vector<Document> docs(n);
  const auto v = static_cast<long>(cfg.topic_vocab);
  for (std::size_t i = 0; i < n; ++i) {
    docs[i].id = "n" + std::to_string(i);
    for (std::size_t t = 0; t < cfg.tokens_per_doc; ++t) {
      if (uniform01(text_rng) < cfg.noise_frac) {
        docs[i].tokens.push_back(vocab.intern("z" + std::to_string(uniform_index(text_rng, cfg.noise_vocab))));
        continue;
      }
      const std::size_t m = uniform_index(text_rng, gt.topics[i].size());
      long slot;
      if (cfg.locality > 0.0) {
        double centre = gt.positions[i][m] * static_cast<double>(v);
        slot = std::lround(centre + cfg.token_spread * normal(text_rng));
        slot = ((slot % v) + v) % v;
      } else {
        slot = static_cast<long>(uniform_index(text_rng, cfg.topic_vocab));
      }
      docs[i].tokens.push_back(vocab.intern("t" + std::to_string(gt.topics[i][m]) + "w" + std::to_string(slot)));
    }
  }
  return {TextGraph(std::move(docs), edges, std::move(vocab)), std::move(gt)};
}

void write_ground_truth(const TextGraph& g, const GroundTruth& gt, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  for (NodeId i = 0; i < g.size(); ++i) {
    json rec = {{"id", g.doc(i).id}, {"topics", gt.topics_of(i)}};
    if (i < gt.positions.size() && !gt.positions[i].empty()) rec["positions"] = gt.positions[i];
    out << rec.dump() << '\n';
  }
}

GroundTruth load_ground_truth(const std::filesystem::path& path, const TextGraph& g) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read " + path.string());
  GroundTruth gt;
  gt.topics.resize(g.size());
  gt.positions.resize(g.size());
  std::vector<bool> seen(g.size(), false);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    json rec;
    try {
      rec = json::parse(line);
      auto id = g.index_of(rec.at("id").get<std::string>());
      gt.topics[id] = rec.at("topics").get<std::vector<std::uint32_t>>();
      if (rec.contains("positions")) gt.positions[id] = rec["positions"].get<std::vector<double>>();
      if (gt.topics[id].empty()) throw ParseError(path.string(), lineno, "node without topics");
      seen[id] = true;
    } catch (const json::exception& e) {
      throw ParseError(path.string(), lineno, e.what());
    }
  }
  for (NodeId i = 0; i < g.size(); ++i) {
    if (!seen[i]) throw IntegrityError("ground truth missing node '" + g.doc(i).id + "'");
  }
  return gt;
}

bool usefulness_oracle(const GroundTruth& gt, NodeId counterpart, NodeId neighbor) {
  return gt.shares_topic(counterpart, neighbor);
}

bool usefulness_oracle(const GroundTruth& gt, const MatchTask& task, Side side, std::size_t candidate,
                       NodeId neighbor) {
  if (candidate >= task.num_candidates()) throw LookupError("candidate index out of range");
  const auto& list = side == Side::Query ? task.query_neighbors.neighbors : task.key_neighbors[candidate].neighbors;
  if (std::find(list.begin(), list.end(), neighbor) == list.end()) {
    throw LookupError("node " + std::to_string(neighbor) + " is not in the owner's neighbor list");
  }
  NodeId counterpart = side == Side::Query ? task.candidate(candidate) : task.query;
  return usefulness_oracle(gt, counterpart, neighbor);
}

std::vector<PositiveEdge> sample_positive_edges(const TextGraph& g, std::size_t train, std::size_t valid,
                                                std::size_t test, std::uint64_t seed) {
  auto all = g.edges();
  const std::size_t want = train + valid + test;
  if (want > all.size()) {
    throw ConfigError("requested " + std::to_string(want) + " positive edges but the graph has " +
                      std::to_string(all.size()));
  }
  auto rng = make_rng(seed, {0x73706c74ULL});
  auto picked = sample_without_replacement(std::move(all), want, rng);
  std::vector<PositiveEdge> out;
  out.reserve(want);
  for (std::size_t i = 0; i < picked.size(); ++i) {
    auto e = picked[i];
    if (uniform01(rng) < 0.5) std::swap(e.a, e.b);
    Split s = i < train ? Split::Train : (i < train + valid ? Split::Valid : Split::Test);
    out.push_back({e.a, e.b, s});
  }
  return out;
}

}  // namespace cdsm
