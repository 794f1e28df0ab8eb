// Batch front end. One subcommand per pipeline stage; every artifact lives in
// the --out run directory and is recorded in its manifest.json.

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "cdsm/config.hpp"
#include "cdsm/error.hpp"
#include "cdsm/pipeline.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace cdsm;

namespace {

struct Options {
  std::string config;
  std::vector<std::string> sets;
  std::string out = "run";
  std::size_t workers = 1;
  bool workers_given = false;
};

struct Run {
  RunConfig config;
  fs::path dir;
  Manifest manifest;
};

Run open_run(const Options& o) {
  std::vector<std::string> sets = o.sets;
  if (o.workers_given) sets.push_back("workers=" + std::to_string(o.workers));
  const fs::path cfg_path(o.config);
  Run r{load_config(o.config.empty() ? nullptr : &cfg_path, sets), fs::path(o.out), {}};
  fs::create_directories(r.dir);
  r.manifest = Manifest::open(r.dir);
  r.manifest.set_config(r.config);
  return r;
}

// Input artifact produced by an earlier subcommand.
fs::path require(const Run& r, const char* file, const char* producer, const char* consumer) {
  const fs::path p = r.dir / file;
  if (!fs::exists(p)) {
    throw DependencyError(producer, std::string("stage '") + consumer + "' input " + p.string() + " is missing");
  }
  return p;
}

Dataset dataset_of(const Run& r) { return load_dataset(r.dir, r.config); }

void write_json(const json& j, const fs::path& p) {
  std::ofstream out(p);
  if (!out) throw IoError("cannot write " + p.string());
  out << j.dump(2) << '\n';
}

void write_loss_curve(const std::vector<double>& curve, const fs::path& p) {
  std::ofstream out(p);
  if (!out) throw IoError("cannot write " + p.string());
  out << "step,loss\n" << std::setprecision(17);
  for (std::size_t i = 0; i < curve.size(); ++i) out << i << ',' << curve[i] << '\n';
}

using Clock = std::chrono::system_clock;

void cmd_generate(Run& r) {
  const auto t0 = Clock::now();
  auto ds = generate_dataset(r.config);
  auto files = write_dataset(ds, r.dir);
  r.manifest.record("generate-data", files, t0);
  r.manifest.save();
}

void cmd_train_matcher(Run& r) {
  const auto t0 = Clock::now();
  auto ds = dataset_of(r);
  std::vector<double> curve;
  auto model = stage_train_matcher(r.config, ds, &curve);
  model.save(r.dir / "matcher.ckpt");
  write_loss_curve(curve, r.dir / "matcher_curve.csv");
  r.manifest.record("train-matcher", {r.dir / "matcher.ckpt", r.dir / "matcher_curve.csv"}, t0);
  r.manifest.save();
}

void cmd_annotate(Run& r) {
  const auto t0 = Clock::now();
  auto ds = dataset_of(r);
  auto matcher = MatchModel::load(require(r, "matcher.ckpt", "train-matcher", "annotate"));
  auto ann = stage_annotate(r.config, ds, matcher);
  write_annotations(ds.graph, ann, r.dir / "annotations.jsonl");
  r.manifest.record("annotate", {r.dir / "annotations.jsonl"}, t0);
  r.manifest.save();
}

void cmd_train_selector(Run& r) {
  const auto t0 = Clock::now();
  auto ds = dataset_of(r);
  auto ann = load_annotations(ds.graph, require(r, "annotations.jsonl", "annotate", "train-selector"));
  std::vector<double> curve;
  double acc = 0.0;
  auto model = stage_train_selector(r.config, ds, ann, &curve, &acc);
  model.save(r.dir / "selector.ckpt");
  write_loss_curve(curve, r.dir / "selector_curve.csv");
  write_json({{"holdout_pairwise_accuracy", acc}}, r.dir / "selector_train.json");
  r.manifest.record("train-selector",
                    {r.dir / "selector.ckpt", r.dir / "selector_curve.csv", r.dir / "selector_train.json"}, t0);
  r.manifest.save();
}

struct Models {
  Dataset ds;
  MatchModel matcher;
  SelectorModel selector;
};

Models load_models(const Run& r, const char* consumer) {
  auto ds = dataset_of(r);
  auto matcher = MatchModel::load(require(r, "matcher.ckpt", "train-matcher", consumer));
  auto selector = SelectorModel::load(require(r, "selector.ckpt", "train-selector", consumer));
  return {std::move(ds), std::move(matcher), std::move(selector)};
}

json truncation_rows_json(const std::vector<TruncationRow>& rows) {
  json arr = json::array();
  for (const auto& row : rows) {
    arr.push_back({{"policy", row.policy.describe()},
                   {"p_at_1", row.p_at_1},
                   {"ndcg", row.ndcg},
                   {"mean_selected", row.mean_selected}});
  }
  return arr;
}

void cmd_evaluate(Run& r) {
  const auto t0 = Clock::now();
  auto m = load_models(r, "evaluate");
  auto test = split_tasks(m.ds, r.config, Split::Test);
  auto ctx = InferenceContext::build(m.ds.graph, m.matcher, m.selector);
  const std::size_t w = r.config.workers;
  std::vector<fs::path> files = {r.dir / "metrics.json", r.dir / "metrics.csv", r.dir / "summary.json"};

  double selected = 0.0;
  auto cascade = evaluate_cascade(ctx, test, r.config.policy, &selected, w);
  write_metrics(cascade, files[0], files[1]);
  TaskScorer full = [&](const MatchTask& t) { return run_full_neighbors(ctx, t).scores; };
  auto full_m = evaluate(test, full, w);
  const std::size_t k = r.config.policy.k.value_or(5);
  auto random_m = evaluate_method(ctx, &m.ds.truth, test, SelectionMethod::Random, k,
                                  stage_seed(r.config, kSeedEval), w);
  json summary = {{"metric_note", "ndcg uses one relevant key and no cutoff: 1/log2(rank+1)"},
                  {"tasks", test.size()},
                  {"cascade", {{"policy", r.config.policy.describe()},
                               {"p_at_1", cascade.p_at_1},
                               {"ndcg", cascade.ndcg},
                               {"mean_selected", selected}}},
                  {"random", {{"k", k}, {"p_at_1", random_m.p_at_1}, {"ndcg", random_m.ndcg}}},
                  {"all_neighbors", {{"p_at_1", full_m.p_at_1}, {"ndcg", full_m.ndcg}}}};

  if (r.config.compare_truncation) {
    auto valid = split_tasks(m.ds, r.config, Split::Valid);
    auto rows = truncation_comparison(ctx, valid, test, k, w);
    summary["truncation"] = truncation_rows_json(rows);
  }
  if (r.config.compare_modes) {
    auto ann = load_annotations(m.ds.graph, require(r, "annotations.jsonl", "annotate", "evaluate"));
    RunConfig alt = r.config;
    alt.selector_mode =
        r.config.selector_mode == RankingMode::OneStep ? RankingMode::MultiStep : RankingMode::OneStep;
    auto other = stage_train_selector(alt, m.ds, ann);
    auto alt_ctx = InferenceContext::build(m.ds.graph, m.matcher, other);
    auto am = evaluate_cascade(alt_ctx, test, r.config.policy, nullptr, w);
    summary["modes"] = {{ranking_mode_name(r.config.selector_mode), {{"p_at_1", cascade.p_at_1}, {"ndcg", cascade.ndcg}}},
                        {ranking_mode_name(alt.selector_mode), {{"p_at_1", am.p_at_1}, {"ndcg", am.ndcg}}}};
  }
  write_json(summary, files[2]);
  r.manifest.record("evaluate", files, t0);
  r.manifest.save();
}

void cmd_curves(Run& r) {
  const auto t0 = Clock::now();
  auto m = load_models(r, "curves");
  auto test = split_tasks(m.ds, r.config, Split::Test);
  auto ctx = InferenceContext::build(m.ds.graph, m.matcher, m.selector);
  auto rows = curve_analysis(ctx, &m.ds.truth, test, r.config.curve_ks, kAllMethods, stage_seed(r.config, kSeedEval),
                             r.config.workers);
  write_curves(rows, r.dir / "curves.csv", r.dir / "curves.json");
  r.manifest.record("curves", {r.dir / "curves.csv", r.dir / "curves.json"}, t0);
  r.manifest.save();
}

void cmd_agreement(Run& r) {
  const auto t0 = Clock::now();
  auto m = load_models(r, "agreement");
  auto test = split_tasks(m.ds, r.config, Split::Test);
  auto ctx = InferenceContext::build(m.ds.graph, m.matcher, m.selector);
  // Held-out annotations: the matcher labels the test pairs the selector never saw.
  auto ann = annotate(m.matcher, ctx.heavy, test, AnnotationMode::OneStep, r.config.annotation_k);
  auto rep = agreement_analysis(ctx, ann, test);
  write_json(agreement_json(rep), r.dir / "agreement.json");
  write_agreement_svg(rep, r.dir / "agreement.svg");
  r.manifest.record("agreement", {r.dir / "agreement.json", r.dir / "agreement.svg"}, t0);
  r.manifest.save();
}

void cmd_cost(Run& r) {
  const auto t0 = Clock::now();
  auto m = load_models(r, "cost");
  auto test = split_tasks(m.ds, r.config, Split::Test);
  std::vector<MatchTask> tasks;
  for (std::size_t i = 0; i < r.config.cost_tasks; ++i) tasks.push_back(test[i % test.size()]);
  auto rep = measure_cost(m.ds.graph, m.matcher, m.selector, tasks, r.config.cost_k);
  write_json(cost_json(rep), r.dir / "cost.json");
  r.manifest.record("cost", {r.dir / "cost.json"}, t0);
  r.manifest.save();
}

void cmd_all(Run& r) {
  cmd_generate(r);
  auto ds = dataset_of(r);
  hybrid_optimize(r.config, ds, r.dir);
  // Stages recorded by hybrid_optimize use their pipeline names; reload so the
  // later records land in the same manifest.
  r.manifest = Manifest::open(r.dir);
  r.manifest.set_config(r.config);
  cmd_evaluate(r);
  cmd_curves(r);
  cmd_agreement(r);
}

void print_error(const std::string& kind, const std::string& message, const std::string& producer) {
  json rec = {{"error", kind}, {"message", message}};
  if (!producer.empty()) rec["producer"] = producer;
  std::cerr << rec.dump() << std::endl;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Counterpart-aware neighbor selection for text matching on graphs"};
  app.require_subcommand(1);
  Options opt;
  struct Cmd {
    const char* name;
    const char* help;
    void (*fn)(Run&);
  };
  const Cmd cmds[] = {
      {"generate-data", "Generate the synthetic graph, ground truth and edge splits", cmd_generate},
      {"train-matcher", "Train the matcher with in-batch negatives", cmd_train_matcher},
      {"annotate", "Label neighbors with the trained matcher", cmd_annotate},
      {"train-selector", "Train the selector on annotation pairs", cmd_train_selector},
      {"evaluate", "Cascade metrics on the test split", cmd_evaluate},
      {"curves", "Accuracy versus neighbor count for each selection method", cmd_curves},
      {"agreement", "Selector top-10 versus annotator ranking", cmd_agreement},
      {"cost", "Encoder timings and cascade wall-clock", cmd_cost},
      {"all", "generate-data, training stages, evaluate, curves, agreement", cmd_all},
  };
  void (*chosen)(Run&) = nullptr;
  for (const auto& c : cmds) {
    auto* sub = app.add_subcommand(c.name, c.help);
    sub->add_option("--config", opt.config, "JSON configuration file");
    sub->add_option("--set", opt.sets, "Override, dotted key=value (repeatable)");
    sub->add_option("--out", opt.out, "Run directory")->capture_default_str();
    sub->add_option("--workers", opt.workers, "Evaluation threads")->each([&](const std::string&) {
      opt.workers_given = true;
    });
    sub->callback([&chosen, fn = c.fn] { chosen = fn; });
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    print_error("usage", e.what(), "");
    return 2;
  }
  try {
    Run run = open_run(opt);
    chosen(run);
  } catch (const DependencyError& e) {
    print_error(e.kind(), e.what(), e.producer());
    return 3;
  } catch (const UsageError& e) {
    print_error(e.kind(), e.what(), "");
    return 2;
  } catch (const Error& e) {
    print_error(e.kind(), e.what(), "");
    return 1;
  } catch (const std::exception& e) {
    print_error("internal", e.what(), "");
    return 1;
  }
  return 0;
}
