#include "cdsm/config.hpp"

#include <fstream>

#include "cdsm/error.hpp"
#include "cdsm/random.hpp"

namespace cdsm {

using nlohmann::json;

void RunConfig::validate() const {
  data.validate();
  if (workers < 1) throw ConfigError("workers must be at least 1");
  if (train_edges < 2) throw ConfigError("train_edges must be at least 2");
  if (test_edges < 1) throw ConfigError("test_edges must be positive");
  if (neighbor_cap < 1) throw ConfigError("neighbor_cap must be positive");
  if (max_len < 1) throw ConfigError("max_len must be positive");
  if (heads == 0 || dim % heads != 0) throw ConfigError("heads must divide dim");
  if (annotation_k < 1) throw ConfigError("annotation_k must be at least 1");
  if (pairs_per_task < 1) throw ConfigError("pairs_per_task must be at least 1");
  if (matcher.batch_size < 2) throw ConfigError("matcher.batch_size must be at least 2");
  if (matcher.min_neighbors > matcher.neighbors_per_side) {
    throw ConfigError("matcher.min_neighbors exceeds matcher.neighbors_per_side");
  }
  if (!(selector.holdout_fraction >= 0.0 && selector.holdout_fraction < 1.0)) {
    throw ConfigError("selector.holdout_fraction must be in [0,1)");
  }
  if (cost_k > neighbor_cap) throw ConfigError("cost_k exceeds neighbor_cap");
  for (auto k : curve_ks) {
    if (k > neighbor_cap) throw ConfigError("curve k " + std::to_string(k) + " exceeds neighbor_cap");
  }
  policy.validate();
}

namespace {

json policy_json(const TruncationPolicy& p) {
  json j = {{"kind", truncation_name(p.kind)}, {"hard_cap", p.hard_cap}};
  j["k"] = p.k ? json(*p.k) : json(nullptr);
  j["tau"] = p.tau ? json(*p.tau) : json(nullptr);
  j["p"] = p.p ? json(*p.p) : json(nullptr);
  return j;
}

TruncationPolicy policy_from(const json& j) {
  TruncationPolicy p;
  p.kind = parse_truncation(j.at("kind").get<std::string>());
  p.hard_cap = j.at("hard_cap").get<std::size_t>();
  if (!j.at("k").is_null()) p.k = j.at("k").get<std::size_t>();
  if (!j.at("tau").is_null()) p.tau = j.at("tau").get<double>();
  if (!j.at("p").is_null()) p.p = j.at("p").get<std::size_t>();
  return p;
}

}  // namespace

json to_json(const RunConfig& c) {
  const auto& d = c.data;
  return {
      {"seed", c.seed},
      {"workers", c.workers},
      {"data",
       {{"num_nodes", d.num_nodes},
        {"num_topics", d.num_topics},
        {"tokens_per_doc", d.tokens_per_doc},
        {"topic_vocab", d.topic_vocab},
        {"noise_vocab", d.noise_vocab},
        {"noise_frac", d.noise_frac},
        {"intra_p", d.intra_p},
        {"inter_p", d.inter_p},
        {"multi_topic_frac", d.multi_topic_frac},
        {"locality", d.locality},
        {"token_spread", d.token_spread}}},
      {"splits", {{"train", c.train_edges}, {"valid", c.valid_edges}, {"test", c.test_edges}}},
      {"tasks", {{"num_negatives", c.num_negatives}, {"neighbor_cap", c.neighbor_cap}, {"max_len", c.max_len}}},
      {"matcher",
       {{"dim", c.dim},
        {"layers", c.layers},
        {"heads", c.heads},
        {"ffn_dim", c.ffn_dim},
        {"aggregator", aggregator_name(c.aggregator)},
        {"batch_size", c.matcher.batch_size},
        {"steps", c.matcher.steps},
        {"lr", c.matcher.lr},
        {"neighbors_per_side", c.matcher.neighbors_per_side},
        {"min_neighbors", c.matcher.min_neighbors},
        {"loss", loss_mode_name(c.matcher.loss)}}},
      {"annotation",
       {{"mode", annotation_mode_name(c.annotation_mode)}, {"k", c.annotation_k}, {"pairs_per_task", c.pairs_per_task}}},
      {"selector",
       {{"mode", ranking_mode_name(c.selector_mode)},
        {"window", c.window},
        {"batch_size", c.selector.batch_size},
        {"steps", c.selector.steps},
        {"lr", c.selector.lr},
        {"loss", loss_mode_name(c.selector.loss)},
        {"holdout_fraction", c.selector.holdout_fraction}}},
      {"eval",
       {{"policy", policy_json(c.policy)},
        {"curve_ks", c.curve_ks},
        {"cost_tasks", c.cost_tasks},
        {"cost_k", c.cost_k},
        {"compare_truncation", c.compare_truncation},
        {"compare_modes", c.compare_modes}}},
  };
}

void overlay_json(json& base, const json& patch, const std::string& where) {
  if (!patch.is_object()) throw ConfigError("configuration must be a JSON object" + (where.empty() ? "" : " at " + where));
  for (auto it = patch.begin(); it != patch.end(); ++it) {
    const std::string key = where.empty() ? it.key() : where + "." + it.key();
    if (!base.contains(it.key())) throw UsageError("unknown configuration key '" + key + "'");
    auto& slot = base[it.key()];
    if (slot.is_object() && it->is_object()) {
      overlay_json(slot, *it, key);
    } else {
      slot = *it;
    }
  }
}

void apply_override(json& doc, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw UsageError("override '" + assignment + "' is not key=value");
  const std::string path = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  json* node = &doc;
  std::size_t start = 0;
  while (true) {
    const auto dot = path.find('.', start);
    const std::string part = path.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (!node->is_object() || !node->contains(part)) throw UsageError("unknown configuration key '" + path + "'");
    node = &(*node)[part];
    if (dot == std::string::npos) break;
    start = dot + 1;
  }
  json value;
  try {
    value = json::parse(text);
  } catch (const json::exception&) {
    value = text;
  }
  *node = value;
}

RunConfig config_from_json(const json& j) {
  RunConfig defaults;
  json full = to_json(defaults);
  overlay_json(full, j);
  RunConfig c;
  try {
    c.seed = full.at("seed").get<std::uint64_t>();
    c.workers = full.at("workers").get<std::size_t>();
    const auto& d = full.at("data");
    c.data.num_nodes = d.at("num_nodes");
    c.data.num_topics = d.at("num_topics");
    c.data.tokens_per_doc = d.at("tokens_per_doc");
    c.data.topic_vocab = d.at("topic_vocab");
    c.data.noise_vocab = d.at("noise_vocab");
    c.data.noise_frac = d.at("noise_frac");
    c.data.intra_p = d.at("intra_p");
    c.data.inter_p = d.at("inter_p");
    c.data.multi_topic_frac = d.at("multi_topic_frac");
    c.data.locality = d.at("locality");
    c.data.token_spread = d.at("token_spread");
    c.train_edges = full.at("splits").at("train");
    c.valid_edges = full.at("splits").at("valid");
    c.test_edges = full.at("splits").at("test");
    c.num_negatives = full.at("tasks").at("num_negatives");
    c.neighbor_cap = full.at("tasks").at("neighbor_cap");
    c.max_len = full.at("tasks").at("max_len");
    const auto& m = full.at("matcher");
    c.dim = m.at("dim");
    c.layers = m.at("layers");
    c.heads = m.at("heads");
    c.ffn_dim = m.at("ffn_dim");
    c.aggregator = parse_aggregator(m.at("aggregator").get<std::string>());
    c.matcher.batch_size = m.at("batch_size");
    c.matcher.steps = m.at("steps");
    c.matcher.lr = m.at("lr");
    c.matcher.neighbors_per_side = m.at("neighbors_per_side");
    c.matcher.min_neighbors = m.at("min_neighbors");
    c.matcher.loss = parse_loss_mode(m.at("loss").get<std::string>());
    const auto& a = full.at("annotation");
    c.annotation_mode = parse_annotation_mode(a.at("mode").get<std::string>());
    c.annotation_k = a.at("k");
    c.pairs_per_task = a.at("pairs_per_task");
    const auto& s = full.at("selector");
    c.selector_mode = parse_ranking_mode(s.at("mode").get<std::string>());
    c.window = s.at("window");
    c.selector.batch_size = s.at("batch_size");
    c.selector.steps = s.at("steps");
    c.selector.lr = s.at("lr");
    c.selector.loss = parse_loss_mode(s.at("loss").get<std::string>());
    c.selector.holdout_fraction = s.at("holdout_fraction");
    const auto& e = full.at("eval");
    c.policy = policy_from(e.at("policy"));
    c.curve_ks = e.at("curve_ks").get<std::vector<std::size_t>>();
    c.cost_tasks = e.at("cost_tasks");
    c.cost_k = e.at("cost_k");
    c.compare_truncation = e.at("compare_truncation");
    c.compare_modes = e.at("compare_modes");
  } catch (const json::exception& ex) {
    throw ConfigError(std::string("invalid configuration value: ") + ex.what());
  }
  c.validate();
  return c;
}

RunConfig load_config(const std::filesystem::path* path, const std::vector<std::string>& overrides) {
  json doc = to_json(RunConfig{});
  if (path) {
    std::ifstream in(*path);
    if (!in) throw IoError("cannot read config " + path->string());
    json file;
    try {
      file = json::parse(in);
    } catch (const json::exception& e) {
      throw ParseError(path->string(), 0, e.what());
    }
    overlay_json(doc, file);
  }
  for (const auto& o : overrides) apply_override(doc, o);
  return config_from_json(doc);
}

std::uint64_t stage_seed(const RunConfig& c, std::uint64_t stage) { return derive_seed(c.seed, {stage}); }

MatchModelConfig matcher_config(const RunConfig& c, std::size_t vocab_size) {
  MatchModelConfig m;
  m.kind = c.aggregator;
  m.encoder.vocab_size = vocab_size;
  m.encoder.dim = c.dim;
  m.encoder.layers = c.layers;
  m.encoder.heads = c.heads;
  m.encoder.ffn_dim = c.ffn_dim;
  m.encoder.max_len = c.max_len;
  return m;
}

SelectorConfig selector_config(const RunConfig& c, std::size_t vocab_size, RankingMode mode) {
  SelectorConfig s;
  s.mode = mode;
  s.encoder.vocab_size = vocab_size;
  s.encoder.dim = c.dim;
  s.encoder.window = c.window;
  return s;
}

}  // namespace cdsm
