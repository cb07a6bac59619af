#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "vaps/config.hpp"
#include "vaps/corpus.hpp"
#include "vaps/datagen.hpp"
#include "vaps/eval.hpp"
#include "vaps/index.hpp"
#include "vaps/linkage.hpp"
#include "vaps/pipeline.hpp"
#include "vaps/value.hpp"

namespace fs = std::filesystem;
using namespace vaps;

namespace {

constexpr const char* kBm25 = "BM25";

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw DataError("cannot read " + p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string file_hash(const fs::path& p) { return hex64(fnv1a(read_file(p))); }

std::ofstream open_output(const fs::path& p) {
  fs::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary);
  if (!out) throw DataError("cannot write " + p.string());
  return out;
}

/// One invocation of a stage: resolved config, declared inputs and outputs,
/// and the manifest written when it finishes.
class StageRun {
 public:
  StageRun(std::string name, RunConfig cfg) : name_(std::move(name)), cfg_(std::move(cfg)), dir_(cfg_.out) {
    fs::create_directories(dir_);
  }

  const RunConfig& cfg() const { return cfg_; }
  fs::path path(const std::string& rel) const { return dir_ / rel; }

  /// Declares an upstream artifact; a missing one names the stage to run.
  fs::path require(const std::string& rel, const std::string& stage) {
    auto p = path(rel);
    if (!fs::exists(p)) throw DependencyError(p.string() + " not found: run " + stage + " first");
    inputs_[rel] = file_hash(p);
    return p;
  }

  void produced(const std::string& rel) { outputs_.push_back(rel); }

  void finish(const std::string& manifest_name) {
    nlohmann::json j;
    j["stage"] = name_;
    j["config_hash"] = config_hash(cfg_);
    j["config"] = to_json(cfg_);
    j["inputs"] = inputs_;
    nlohmann::json outs = nlohmann::json::object();
    for (const auto& o : outputs_) outs[o] = file_hash(path(o));
    j["outputs"] = outs;
    j["seconds"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    auto out = open_output(path("manifests/" + manifest_name + ".json"));
    out << j.dump(2) << '\n';
  }

 private:
  std::string name_;
  RunConfig cfg_;
  fs::path dir_;
  std::map<std::string, std::string> inputs_;
  std::vector<std::string> outputs_;
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

Corpus load_stage_corpus(StageRun& run) {
  auto items = run.require("items.jsonl", "datagen or ingest");
  auto events = run.require("events.jsonl", "datagen or ingest");
  return load_corpus(items.string(), events.string());
}

void write_corpus_outputs(StageRun& run, const Corpus& corpus) {
  {
    auto out = open_output(run.path("items.jsonl"));
    write_items(out, corpus);
  }
  {
    auto out = open_output(run.path("events.jsonl"));
    write_events(out, corpus);
  }
  run.produced("items.jsonl");
  run.produced("events.jsonl");
}

void cmd_datagen(StageRun& run) {
  auto spec = run.cfg().gen;
  spec.seed = run.cfg().seed;
  auto data = generate(spec);
  write_corpus_outputs(run, data.corpus);
  {
    auto out = open_output(run.path("oracle.jsonl"));
    write_oracle(out, data.oracle);
  }
  run.produced("oracle.jsonl");
  std::size_t consultations = 0;
  for (const auto& [_, h] : data.corpus.users) consultations += h.consultations.size();
  std::cout << "generated " << data.corpus.users.size() << " users, " << data.corpus.items.size() << " items, "
            << consultations << " consultations\n";
  run.finish("datagen");
}

void cmd_ingest(StageRun& run) {
  const auto& cfg = run.cfg();
  if (cfg.items_path.empty() || cfg.events_path.empty()) {
    throw ConfigError("ingest needs items_path and events_path");
  }
  auto corpus = load_corpus(cfg.items_path, cfg.events_path);
  write_corpus_outputs(run, corpus);
  std::cout << "ingested " << corpus.users.size() << " users, " << corpus.items.size() << " items\n";
  run.finish("ingest");
}

void cmd_index(StageRun& run) {
  auto corpus = load_stage_corpus(run);
  auto index = build_index(corpus);
  auto out = open_output(run.path("index.jsonl"));
  write_index(out, index);
  out.close();
  run.produced("index.jsonl");
  std::cout << "indexed " << index.size() << " terms\n";
  run.finish("index");
}

void cmd_link(StageRun& run) {
  auto corpus = load_stage_corpus(run);
  auto table = build_linkage(corpus, run.cfg().linkage);
  auto out = open_output(run.path("linkage.jsonl"));
  write_linkage(out, table);
  out.close();
  run.produced("linkage.jsonl");
  std::size_t links = 0;
  for (const auto& [_, per_user] : table.links)
    for (const auto& [__, acts] : per_user) links += acts.size();
  std::cout << "linked " << links << " consultation-action pairs\n";
  run.finish("link");
}

std::unique_ptr<Prepared> load_prepared(StageRun& run) {
  auto corpus = load_stage_corpus(run);
  auto index_path = run.require("index.jsonl", "index");
  auto linkage_path = run.require("linkage.jsonl", "link");
  std::ifstream index_in(index_path);
  std::ifstream linkage_in(linkage_path);
  return std::make_unique<Prepared>(std::move(corpus), read_index(index_in), read_linkage(linkage_in),
                                    run.cfg().features.max_tokens);
}

std::string values_text(const Prepared& p, const ValueParams& vp) {
  ConsultationValuer valuer(p.corpus, p.index, p.linkage, p.buckets, vp);
  std::ostringstream ss;
  write_values(ss, assess_corpus(p.corpus, valuer));
  return ss.str();
}

void cmd_assess(StageRun& run) {
  // Dependency order matters for the message: linkage is checked first.
  run.require("linkage.jsonl", "link");
  auto p = load_prepared(run);
  ConsultationValuer valuer(p->corpus, p->index, p->linkage, p->buckets, run.cfg().value);
  auto reports = assess_corpus(p->corpus, valuer);
  {
    auto out = open_output(run.path("values.jsonl"));
    write_values(out, reports);
  }
  std::ostringstream summary;
  write_value_summary(summary, reports);
  if (fs::exists(run.path("oracle.jsonl"))) {
    std::ifstream oracle_in(run.require("oracle.jsonl", "datagen"));
    auto sep = planted_separation(reports, read_oracle(oracle_in));
    summary << "\nplanted separation: " << sep.correct << " / " << sep.triples << " triples ordered correctly ("
            << fixed6(sep.rate()) << ")\n";
  }
  {
    auto out = open_output(run.path("values_summary.txt"));
    out << summary.str();
  }
  run.produced("values.jsonl");
  run.produced("values_summary.txt");
  std::cout << summary.str();
  run.finish("assess");
}

ExperimentConfig experiment(const RunConfig& cfg) {
  ExperimentConfig e;
  e.value = cfg.value;
  e.model = cfg.model;
  e.train = cfg.train;
  e.features = cfg.features;
  e.eval_negatives = cfg.eval_negatives;
  return e;
}

/// Applies a variant's switches the same way run_variant does.
struct VariantSetup {
  ValueParams value;
  FeatureParams features;
  ModelConfig model;
  TrainConfig train;
};

VariantSetup variant_setup(const RunConfig& cfg, const Variant& v) {
  VariantSetup s{cfg.value, cfg.features, cfg.model, cfg.train};
  s.value.lambda1 = v.lambda1;
  s.value.lambda2 = v.lambda2;
  s.features.filter = v.filter;
  if (!v.use_va) s.train.lambda_va = 0.0;
  if (!v.use_cai) s.model.lambda3_skip = 0.0;
  s.model.seed = cfg.seed;
  s.train.seed = cfg.seed;
  return s;
}

std::string model_dir(const std::string& variant) { return "models/" + variant_slug(variant) + "/"; }

void cmd_train(StageRun& run) {
  const auto& cfg = run.cfg();
  if (cfg.variant == kBm25) throw ConfigError("variant: BM25 has no training stage; run eval directly");
  auto values_path = run.require("values.jsonl", "assess");
  auto p = load_prepared(run);
  const auto v = resolve_variant(cfg);
  // Variants that reuse the configured value weights must see the values
  // the assess stage wrote.
  if (v.lambda1 == cfg.value.lambda1 && v.lambda2 == cfg.value.lambda2 && read_file(values_path) != values_text(*p, cfg.value)) {
    throw DataError("values.jsonl does not match the current corpus and value settings: rerun assess");
  }
  auto s = variant_setup(cfg, v);
  auto split = featurize(*p, s.value, s.features);
  Model model(sized_model(*p, s.model, s.features, s.value), p->catalog.item_tokens());
  std::cerr << "training " << v.name << " on " << split.train.size() << " sessions (" << split.valid.size()
            << " valid)\n";
  auto result = train(model, split.train, split.valid, p->catalog, s.train, [](const EpochLog& e) {
    std::fprintf(stderr, "epoch %3zu  l_search %.4f  l_va %.4f  valid NDCG@10 %.4f  %.1fs\n", e.epoch, e.l_search,
                 e.l_va, e.valid_ndcg10, e.elapsed_seconds);
  });

  const auto dir = model_dir(v.name);
  {
    auto out = open_output(run.path(dir + "checkpoint.bin"));
    ad::save_checkpoint(out, model.named_parameters());
  }
  {
    nlohmann::json j;
    j["variant"] = v.name;
    j["model"] = model.config();
    j["features"] = {{"history_len", s.features.history_len}, {"max_tokens", s.features.max_tokens}};
    j["best_epoch"] = result.best_epoch;
    j["best_valid_ndcg10"] = result.best_valid_ndcg10;
    j["epochs_run"] = result.log.size();
    auto out = open_output(run.path(dir + "model.json"));
    out << j.dump(2) << '\n';
  }
  {
    auto out = open_output(run.path(dir + "train_log.csv"));
    write_epoch_csv(out, result.log);
  }
  run.produced(dir + "checkpoint.bin");
  run.produced(dir + "model.json");
  run.produced(dir + "train_log.csv");
  std::cout << v.name << ": best epoch " << result.best_epoch << ", valid NDCG@10 " << fixed6(result.best_valid_ndcg10)
            << '\n';
  run.finish("train-" + variant_slug(v.name));
}

void write_metrics(StageRun& run, const std::string& dir, const std::string& method, const MetricReport& rep) {
  {
    auto j = to_json(rep);
    j["method"] = method;
    auto out = open_output(run.path(dir + "metrics.json"));
    out << j.dump(2) << '\n';
  }
  std::ostringstream table;
  write_metric_table(table, {{method, rep}});
  {
    auto out = open_output(run.path(dir + "metrics.txt"));
    out << table.str();
  }
  run.produced(dir + "metrics.json");
  run.produced(dir + "metrics.txt");
  std::cout << rep.protocol << " protocol, " << rep.split << " split, " << rep.sessions.size() << " sessions\n"
            << table.str();
}

void cmd_eval(StageRun& run) {
  const auto& cfg = run.cfg();
  EvalOptions eo;
  eo.protocol = cfg.protocol == "retrieval" ? Protocol::retrieval : Protocol::ranking;
  eo.seed = cfg.seed;
  eo.split = cfg.split;

  if (cfg.variant == kBm25) {
    auto p = load_prepared(run);
    eo.n_neg = std::min(cfg.eval_negatives, p->catalog.n_items() - 1);
    auto split = featurize(*p, cfg.value, cfg.features);
    auto rep = evaluate(bm25_scorer(p->corpus, p->catalog), cfg.split == "test" ? split.test : split.valid,
                        p->catalog, eo);
    write_metrics(run, model_dir(kBm25), kBm25, rep);
    run.finish("eval-" + variant_slug(kBm25));
    return;
  }

  const auto v = resolve_variant(cfg);
  const auto dir = model_dir(v.name);
  auto ckpt = run.require(dir + "checkpoint.bin", "train");
  auto meta_path = run.require(dir + "model.json", "train");
  auto p = load_prepared(run);
  auto meta = nlohmann::json::parse(read_file(meta_path));
  auto mcfg = meta.at("model").get<ModelConfig>();
  if (mcfg.vocab_size != p->vocab.size() || mcfg.n_items != p->catalog.n_items() ||
      mcfg.n_users != p->catalog.n_users()) {
    throw DataError("checkpoint tables do not match the corpus: rerun train");
  }
  auto s = variant_setup(cfg, v);
  s.features.history_len = meta.at("features").at("history_len").get<std::size_t>();
  s.features.max_tokens = mcfg.max_tokens;
  Model model(mcfg, p->catalog.item_tokens());
  {
    std::ifstream in(ckpt, std::ios::binary);
    ad::load_checkpoint(in, model.named_parameters());
  }
  auto split = featurize(*p, s.value, s.features);
  eo.n_neg = std::min(cfg.eval_negatives, p->catalog.n_items() - 1);
  auto rep = evaluate(model_scorer(model), cfg.split == "test" ? split.test : split.valid, p->catalog, eo);
  write_metrics(run, dir, v.name, rep);
  run.finish("eval-" + variant_slug(v.name));
}

void cmd_report(StageRun& run) {
  std::vector<std::string> order;
  for (const auto& v : ablation_variants()) order.push_back(v.name);
  order.push_back(kBm25);

  std::vector<std::pair<std::string, MetricReport>> rows;
  for (const auto& name : order) {
    auto rel = model_dir(name) + "metrics.json";
    if (!fs::exists(run.path(rel))) continue;
    run.require(rel, "eval");
    auto j = nlohmann::json::parse(read_file(run.path(rel)));
    rows.emplace_back(name, metric_report_from_json(j));
  }
  if (rows.empty()) throw DependencyError("no metrics.json under " + run.path("models").string() + ": run eval first");
  for (const auto& [name, rep] : rows) {
    if (rep.protocol != rows.front().second.protocol || rep.split != rows.front().second.split) {
      throw DataError("metrics files mix protocols or splits (" + name + ")");
    }
  }

  std::ostringstream text;
  text << rows.front().second.protocol << " protocol, " << rows.front().second.split << " split\n";
  write_metric_table(text, rows);
  nlohmann::json flags = nlohmann::json::array();
  const MetricReport* full = nullptr;
  for (const auto& [name, rep] : rows) {
    if (name == "VAPS") full = &rep;
  }
  if (full != nullptr) {
    const double base = full->at("NDCG@10");
    for (const auto& [name, rep] : rows) {
      if (name == "VAPS") continue;
      if (rep.at("NDCG@10") >= base) {
        std::string msg = "inversion: " + name + " NDCG@10 " + fixed6(rep.at("NDCG@10")) + " >= VAPS " + fixed6(base);
        flags.push_back(msg);
        text << msg << '\n';
      }
    }
  }
  nlohmann::json j;
  j["protocol"] = rows.front().second.protocol;
  j["split"] = rows.front().second.split;
  nlohmann::json methods = nlohmann::json::array();
  for (const auto& [name, rep] : rows) methods.push_back({{"method", name}, {"metrics", rep.metrics}});
  j["methods"] = methods;
  j["flags"] = flags;
  {
    auto out = open_output(run.path("report.json"));
    out << j.dump(2) << '\n';
  }
  {
    auto out = open_output(run.path("report.txt"));
    out << text.str();
  }
  run.produced("report.json");
  run.produced("report.txt");
  std::cout << text.str();
  run.finish("report");
}

struct CommonFlags {
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::vector<std::string> overrides;
};

RunConfig resolve_config(const CommonFlags& f) {
  RunConfig cfg = f.config.empty() ? RunConfig{} : load_run_config(f.config);
  apply_config(cfg, parse_overrides(f.overrides));
  if (f.seed) cfg.seed = *f.seed;
  if (!f.out.empty()) cfg.out = f.out;
  validate(cfg);
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Value-aware personalized search pipeline"};
  app.require_subcommand(1);
  CommonFlags flags;

  using StageFn = void (*)(StageRun&);
  const std::vector<std::tuple<const char*, const char*, StageFn>> stages = {
      {"datagen", "generate a synthetic corpus with planted consultation patterns", cmd_datagen},
      {"ingest", "validate an external corpus (items_path, events_path) and store it canonically", cmd_ingest},
      {"index", "build the scenario-term inverted index", cmd_index},
      {"link", "link consultations to the actions that follow them", cmd_link},
      {"assess", "score every (search, consultation) pair", cmd_assess},
      {"train", "train the configured variant", cmd_train},
      {"eval", "evaluate the configured variant (or BM25)", cmd_eval},
      {"report", "collate metrics.json files into one table", cmd_report},
  };
  std::vector<std::pair<CLI::App*, StageFn>> subs;
  for (const auto& [name, desc, fn] : stages) {
    auto* sub = app.add_subcommand(name, desc);
    sub->add_option("--config", flags.config, "flat JSON config file");
    sub->add_option("--out", flags.out, "artifact directory (config key out)");
    sub->add_option("--seed", flags.seed, "global seed (config key seed)");
    sub->add_option("--set", flags.overrides, "override a config key: key=value")->take_all();
    subs.emplace_back(sub, fn);
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  for (const auto& [sub, fn] : subs) {
    if (!sub->parsed()) continue;
    try {
      StageRun run(sub->get_name(), resolve_config(flags));
      fn(run);
      return 0;
    } catch (const ConfigError& e) {
      std::cerr << "config error: " << e.what() << '\n';
      return 2;
    } catch (const DependencyError& e) {
      std::cerr << "missing dependency: " << e.what() << '\n';
      return 3;
    } catch (const DataError& e) {
      std::cerr << "data error: " << e.what() << '\n';
      return 4;
    } catch (const nlohmann::json::exception& e) {
      std::cerr << "data error: " << e.what() << '\n';
      return 4;
    } catch (const std::exception& e) {
      std::cerr << "error: " << e.what() << '\n';
      return 1;
    }
  }
  return 1;
}
