#ifndef SHORTLVLM_CLI_HPP
#define SHORTLVLM_CLI_HPP

// `shortlvlm <subcommand> [--flags]`. Every run writes its artifacts and a
// manifest.json (resolved config + content digests) into --out-dir.
// Exit codes: 0 ok, 1 pipeline error, 2 usage error.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "shortlvlm/archive.hpp"
#include "shortlvlm/calibration.hpp"
#include "shortlvlm/error.hpp"
#include "shortlvlm/eval_harness.hpp"
#include "shortlvlm/hash.hpp"
#include "shortlvlm/layer_localizer.hpp"
#include "shortlvlm/model.hpp"
#include "shortlvlm/scp.hpp"
#include "shortlvlm/token_importance.hpp"
#include "shortlvlm/train.hpp"

namespace shortlvlm::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitPipeline = 1;
inline constexpr int kExitUsage = 2;

struct RunConfig {
  std::string subcommand;
  std::string model;
  std::string baseline_model;
  std::string corpus;
  std::string plan;
  std::string out_dir = ".";
  std::size_t limit = 256;
  std::uint64_t corpus_seed = 0;
  double ratio = 0.25;
  std::string policy = "tis";
  double p = kDefaultKeepRatio;
  std::size_t k = kDefaultRank;
  std::string window = "deep";
  std::string site = "output";
  bool scp = true;
  bool restrict_tokens = false;
  std::uint64_t seed = 0;
  std::size_t threads = 1;
  std::vector<std::size_t> layers;
  std::size_t layer = 0;
  std::vector<double> ratios{0.05, 0.10, 0.20};
  std::size_t seeds = kDefaultSeeds;
  std::size_t count = 2;
  std::uint64_t budget = kDefaultEnumerationBudget;
  std::size_t repeats = 3;
  // model shape (init / train)
  std::size_t vocab = 16, dim = 64, n_layers = 12, heads = 4, mlp = 128, max_seq = 32;
  std::string activation = "gelu";
  bool no_norm = false;
  // training
  std::size_t steps = 1000;
  double lr = 2e-3;
  std::string task = "majority";
  std::size_t calib_size = 256, eval_size = 1000;

  nlohmann::json to_json() const {
    return {{"subcommand", subcommand}, {"model", model}, {"baseline_model", baseline_model},
            {"corpus", corpus}, {"plan", plan}, {"out_dir", out_dir}, {"limit", limit},
            {"corpus_seed", corpus_seed}, {"ratio", ratio}, {"policy", policy}, {"p", p}, {"k", k},
            {"window", window}, {"site", site}, {"scp", scp}, {"restrict_tokens", restrict_tokens},
            {"seed", seed}, {"threads", threads}, {"layers", layers}, {"layer", layer}, {"ratios", ratios},
            {"seeds", seeds}, {"count", count}, {"budget", budget}, {"repeats", repeats}, {"vocab", vocab},
            {"dim", dim}, {"n_layers", n_layers}, {"heads", heads}, {"mlp", mlp}, {"max_seq", max_seq},
            {"activation", activation}, {"no_norm", no_norm}, {"steps", steps}, {"lr", lr}, {"task", task},
            {"calib_size", calib_size}, {"eval_size", eval_size}};
  }
};

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// "a:b" → [a, b); "deep" → deeper half.
inline LayerWindow parse_window(const std::string& s, std::size_t n_layers) {
  if (s == "deep") return LayerWindow::deep_half(n_layers);
  if (s == "all") return {0, n_layers};
  const auto colon = s.find(':');
  if (colon == std::string::npos) throw ParameterError("cli", "window must be 'deep', 'all' or 'begin:end'");
  try {
    LayerWindow w{std::stoul(s.substr(0, colon)), std::stoul(s.substr(colon + 1))};
    w.validate(n_layers);
    return w;
  } catch (const std::logic_error&) {
    throw ParameterError("cli", "window '" + s + "' is not 'begin:end'");
  }
}

namespace detail {

/// Expands `--config file.json` into explicit flags for every key that the
/// command line did not already set.
inline std::vector<std::string> expand_config(const std::vector<std::string>& args) {
  std::vector<std::string> out;
  std::string path;
  for (std::size_t i = 0; i < args.size(); ++i) {
    if (args[i] == "--config") {
      if (i + 1 >= args.size()) throw UsageError("--config needs a file");
      path = args[++i];
    } else if (args[i].rfind("--config=", 0) == 0) {
      path = args[i].substr(9);
    } else {
      out.push_back(args[i]);
    }
  }
  if (path.empty()) return out;
  std::ifstream in(path);
  if (!in) throw UsageError("cannot open config file '" + path + "'");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw UsageError("config file '" + path + "': " + e.what());
  }
  if (!j.is_object()) throw UsageError("config file must hold a JSON object");
  std::set<std::string> given;
  for (const auto& a : out)
    if (a.rfind("--", 0) == 0) given.insert(a.substr(2, a.find('=') == std::string::npos ? std::string::npos : a.find('=') - 2));
  for (const auto& [key, value] : j.items()) {
    std::string flag = key;
    std::replace(flag.begin(), flag.end(), '_', '-');
    if (given.count(flag) != 0) continue;
    if (value.is_boolean()) {
      out.push_back("--" + flag + "=" + (value.get<bool>() ? "true" : "false"));
    } else if (value.is_array()) {
      std::string joined;
      for (const auto& v : value) joined += (joined.empty() ? "" : ",") + (v.is_string() ? v.get<std::string>() : v.dump());
      out.push_back("--" + flag + "=" + joined);
    } else {
      out.push_back("--" + flag + "=" + (value.is_string() ? value.get<std::string>() : value.dump()));
    }
  }
  return out;
}

class Runner {
 public:
  Runner(const RunConfig& cfg, std::ostream& out) : cfg_(cfg), out_(out) {}

  void run() {
    std::filesystem::create_directories(cfg_.out_dir);
    const std::string& s = cfg_.subcommand;
    if (s == "init") init();
    else if (s == "train") train();
    else if (s == "extract") extract();
    else if (s == "score-tokens") score();
    else if (s == "localize") localize();
    else if (s == "prune") prune();
    else if (s == "eval") eval();
    else if (s == "heatmap") heat();
    else if (s == "seed-study") seeds();
    else if (s == "enum-oracle") enumerate();
    else if (s == "gap-report") gap();
    else throw UsageError("unknown subcommand '" + s + "'");
    write_manifest();
  }

 private:
  std::string out_path(const std::string& name) const {
    return (std::filesystem::path(cfg_.out_dir) / name).string();
  }

  void emit(const std::string& name, const std::string& bytes) {
    const auto path = out_path(name);
    write_file(path, bytes);
    outputs_[name] = content_digest(bytes);
    out_ << "wrote " << path << '\n';
  }

  void emit_model(const std::string& name, const Model& m, const nlohmann::json& provenance) {
    emit(name, model_to_archive(m, provenance).serialize());
  }

  Model load_model(const std::string& path) {
    if (path.empty()) throw UsageError("--model is required");
    inputs_[path] = file_digest(path);
    return load_archive(path);
  }

  CalibrationCorpus load(const std::string& path) {
    if (path.empty()) throw UsageError("--corpus is required");
    inputs_[path] = file_digest(path);
    return load_corpus(path, cfg_.limit, cfg_.corpus_seed);
  }

  ModelConfig shape() const {
    ModelConfig c;
    c.vocab_size = cfg_.vocab;
    c.dim = cfg_.dim;
    c.n_layers = cfg_.n_layers;
    c.n_heads = cfg_.heads;
    c.mlp_hidden = cfg_.mlp;
    c.max_seq = cfg_.max_seq;
    c.seed = cfg_.seed;
    c.activation = activation_from_string(cfg_.activation);
    c.use_norm = !cfg_.no_norm;
    return c;
  }

  PolicySpec policy() const { return PolicySpec::parse(cfg_.policy, cfg_.p); }

  void init() { emit_model("model.star", init_model(shape()), {{"source", "init"}}); }

  void train() {
    SyntheticTask task;
    if (cfg_.task == "majority") task.kind = TaskKind::kMajority;
    else if (cfg_.task == "membership") task.kind = TaskKind::kMembership;
    else throw ParameterError("cli", "unknown task '" + cfg_.task + "'");
    const Model start = cfg_.model.empty() ? init_model(shape()) : load_model(cfg_.model);
    TrainOptions opt;
    opt.data_seed = cfg_.seed + 1;
    TrainReport rep;
    const Model m = train_toy(start, task, cfg_.steps, cfg_.lr, opt, &rep);
    const CalibrationCorpus heldout{task.generate(cfg_.eval_size, cfg_.seed + 2000, "eval"), 0, "eval"};
    const double acc = accuracy(m, heldout, cfg_.threads);
    emit_model("model.star", m, {{"source", "train"}, {"task", cfg_.task}, {"steps", cfg_.steps}, {"lr", cfg_.lr}});
    emit("calib.jsonl", corpus_to_jsonl(task.generate(cfg_.calib_size, cfg_.seed + 1000, "calib")));
    emit("eval.jsonl", corpus_to_jsonl(heldout.samples));
    emit("train_report.json", nlohmann::json{{"initial_heldout_loss", rep.initial_heldout_loss},
                                             {"final_heldout_loss", rep.final_heldout_loss},
                                             {"eval_accuracy", acc}}
                                  .dump(2) + "\n");
    out_ << "held-out loss " << rep.initial_heldout_loss << " -> " << rep.final_heldout_loss << ", accuracy "
         << acc << '\n';
  }

  void extract() {
    const Model m = load_model(cfg_.model);
    const auto corpus = load(cfg_.corpus);
    std::set<std::size_t> layers(cfg_.layers.begin(), cfg_.layers.end());
    if (layers.empty())
      for (std::size_t l = 0; l <= m.config.n_layers; ++l) layers.insert(l);
    const auto feats = extract_features(m, corpus, layers, nullptr, cfg_.threads);
    TensorArchive ar;
    nlohmann::json rows = nlohmann::json::array();
    for (const auto& r : feats.begin()->second.rows)
      rows.push_back({r.sample, r.position, r.modality == Modality::kVisual ? "visual" : "text"});
    ar.header["rows"] = rows;
    ar.header["corpus"] = corpus.source;
    for (const auto& [l, fm] : feats) ar.add("features." + std::to_string(l), fm.data);
    emit("features.star", ar.serialize());
  }

  void score() {
    const Model m = load_model(cfg_.model);
    const auto corpus = load(cfg_.corpus);
    if (cfg_.layer >= m.config.n_layers) throw ParameterError("cli", "--layer outside the model");
    std::string dump;
    for (std::size_t s = 0; s < corpus.size(); ++s) {
      const auto tr = forward(m, corpus.samples[s], true);
      dump += score_records(score_and_select(tr, corpus.samples[s], cfg_.layer, cfg_.p), s);
    }
    emit("token_scores.jsonl", dump);
  }

  RedundancyReport report_for(const Model& m, const CalibrationCorpus& corpus) {
    return score_layers(m, corpus, policy(), parse_window(cfg_.window, m.config.n_layers), cfg_.threads);
  }

  void localize() {
    const Model m = load_model(cfg_.model);
    const auto corpus = load(cfg_.corpus);
    const auto rep = report_for(m, corpus);
    for (const auto& w : rep.warnings) out_ << "warning: " << w << '\n';
    auto plan = make_plan(rep, cfg_.ratio);
    plan.pairing = pair_layers(plan);
    emit("report.tsv", rep.to_table());
    emit("plan.json", nlohmann::json(plan).dump(2) + "\n");
  }

  PruningPlan plan_for(const Model& m, const CalibrationCorpus& corpus) {
    if (!cfg_.plan.empty()) {
      inputs_[cfg_.plan] = file_digest(cfg_.plan);
      PruningPlan plan = nlohmann::json::parse(read_file(cfg_.plan)).get<PruningPlan>();
      if (plan.n_layers != m.config.n_layers) throw ParameterError("cli", "plan does not match model depth");
      return plan;
    }
    return make_plan(report_for(m, corpus), cfg_.ratio);
  }

  ScpOptions scp_options() const {
    ScpOptions o;
    o.k = cfg_.k;
    o.site = feature_site_from_string(cfg_.site);
    o.restrict_to_tis = cfg_.restrict_tokens;
    o.tis_p = cfg_.p;
    o.threads = cfg_.threads;
    return o;
  }

  void prune() {
    const Model m = load_model(cfg_.model);
    const auto corpus = load(cfg_.corpus);
    const auto plan = plan_for(m, corpus);
    const PrunedModel pm = cfg_.scp ? compensate(m, plan, corpus, scp_options()) : prune_naive(m, plan);
    auto pj = pm.provenance();
    pj["policy"] = plan.policy;
    pj["ratio"] = plan.ratio;
    emit_model("pruned.star", pm.model, pj);
    PruningPlan done = plan;
    done.pairing = pair_layers(plan);
    emit("plan.json", nlohmann::json(done).dump(2) + "\n");
  }

  void eval() {
    const Model m = load_model(cfg_.model);
    const auto corpus = load(cfg_.corpus);
    std::optional<double> base;
    std::vector<ExperimentResult> rs;
    EvalOptions opt;
    opt.repeats = cfg_.repeats;
    opt.threads = cfg_.threads;
    opt.timed_threads = cfg_.threads;
    opt.seed = cfg_.seed;
    if (!cfg_.baseline_model.empty()) {
      const Model b = load_model(cfg_.baseline_model);
      opt.model_id = cfg_.baseline_model;
      opt.plan = "unpruned";
      rs.push_back(evaluate(b, corpus, opt));
      base = rs.back().value;
    }
    opt.model_id = cfg_.model;
    opt.plan = std::to_string(m.config.n_layers) + " layers";
    rs.push_back(evaluate(m, corpus, opt, base));
    emit("results.jsonl", results_jsonl(rs));
    emit("results.tsv", results_table(rs));
    out_ << results_table(rs);
  }

  void heat() {
    const Model m = load_model(cfg_.model);
    const auto corpus = load(cfg_.corpus);
    emit("heatmap.txt", numeric_grid(heatmap(m, corpus, cfg_.threads).values));
  }

  void seeds() {
    const Model m = load_model(cfg_.model);
    const auto corpus = load(cfg_.corpus);
    const auto rows = seed_study(m, corpus, parse_window(cfg_.window, m.config.n_layers), cfg_.ratios,
                                 cfg_.seeds, cfg_.seed, cfg_.threads);
    std::string jl;
    for (const auto& r : rows)
      jl += nlohmann::json{{"ratio", r.ratio}, {"pruned", r.pruned}, {"mean", r.mean}, {"std", r.stddev},
                           {"relative", r.relative}, {"plans", r.plans}}
                .dump() + "\n";
    emit("seed_study.tsv", seed_study_table(rows));
    emit("seed_study.jsonl", jl);
    out_ << seed_study_table(rows);
  }

  void enumerate() {
    const Model m = load_model(cfg_.model);
    const auto corpus = load(cfg_.corpus);
    const auto window = parse_window(cfg_.window, m.config.n_layers);
    const auto res = enumerate_oracle(
        m.config.n_layers, window, cfg_.count,
        [&](const PruningPlan& plan) { return accuracy(prune_naive(m, plan).model, corpus); }, cfg_.budget,
        cfg_.threads);
    std::ostringstream os;
    os << "pruned\tmetric\n";
    os.precision(9);
    for (const auto& [layers, metric] : res.table) {
      for (std::size_t i = 0; i < layers.size(); ++i) os << (i ? "," : "") << layers[i];
      os << '\t' << metric << '\n';
    }
    emit("enum.tsv", os.str());
    emit("plan.json", nlohmann::json(res.best).dump(2) + "\n");
  }

  void gap() {
    const Model m = load_model(cfg_.model);
    const auto corpus = load(cfg_.corpus);
    const auto plan = plan_for(m, corpus);
    const auto traces = capture_traces(m, corpus, cfg_.threads);
    const auto naive = prune_naive(m, plan);
    const auto comp = compensate(m, plan, corpus, scp_options(), &traces);
    const auto rep = gap_reduction(m, naive, comp, corpus, cfg_.threads);
    emit("gap.json", rep.to_json().dump(2) + "\n");
    emit("gap_points.txt", rep.points_grid());
    out_ << "aggregate cosine " << rep.before << " -> " << rep.after << '\n';
  }

  void write_manifest() {
    nlohmann::json in = nlohmann::json::object(), outj = nlohmann::json::object();
    for (const auto& [k, v] : inputs_) in[k] = v;
    for (const auto& [k, v] : outputs_) outj[k] = v;
    const nlohmann::json man{{"config", cfg_.to_json()}, {"inputs", in}, {"outputs", outj}};
    write_file(out_path("manifest.json"), man.dump(2) + "\n");
  }

  const RunConfig& cfg_;
  std::ostream& out_;
  std::map<std::string, std::string> inputs_;
  std::map<std::string, std::string> outputs_;
};

}  // namespace detail

inline int run(const std::vector<std::string>& args, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  RunConfig cfg;
  CLI::App app{"Layer pruning with token-importance localization and subspace compensation", "shortlvlm"};
  app.require_subcommand(1);
  app.allow_extras(false);

  auto common = [&](CLI::App* sc) {
    sc->add_option("--out-dir", cfg.out_dir, "Output directory");
    sc->add_option("--threads", cfg.threads, "Worker threads")->check(CLI::PositiveNumber);
    sc->add_option("--seed", cfg.seed, "Seed");
  };
  auto with_model = [&](CLI::App* sc) { sc->add_option("--model", cfg.model, "Model archive"); };
  auto with_corpus = [&](CLI::App* sc) {
    sc->add_option("--corpus", cfg.corpus, "Corpus (JSON lines)");
    sc->add_option("--limit", cfg.limit, "Max samples")->check(CLI::PositiveNumber);
    sc->add_option("--corpus-seed", cfg.corpus_seed, "Corpus shuffle seed");
  };
  auto with_localize = [&](CLI::App* sc) {
    sc->add_option("--ratio", cfg.ratio, "Pruning ratio in [0, 0.5]");
    sc->add_option("--policy", cfg.policy, "all | visual | text | tis");
    sc->add_option("--p", cfg.p, "Top-p keep ratio for tis");
    sc->add_option("--window", cfg.window, "deep | all | begin:end");
    sc->add_option("--plan", cfg.plan, "Use this plan.json instead of localizing");
  };
  auto with_scp = [&](CLI::App* sc) {
    sc->add_option("--k", cfg.k, "Subspace rank")->check(CLI::PositiveNumber);
    sc->add_option("--site", cfg.site, "input | output");
    sc->add_flag("--restrict-tokens", cfg.restrict_tokens, "Build H from TIS-kept tokens only");
  };
  auto with_shape = [&](CLI::App* sc) {
    sc->add_option("--vocab", cfg.vocab);
    sc->add_option("--dim", cfg.dim);
    sc->add_option("--layers", cfg.n_layers);
    sc->add_option("--heads", cfg.heads);
    sc->add_option("--mlp", cfg.mlp);
    sc->add_option("--max-seq", cfg.max_seq);
    sc->add_option("--activation", cfg.activation, "gelu | identity");
    sc->add_flag("--no-norm", cfg.no_norm);
  };

  std::map<std::string, CLI::App*> subs;
  auto add = [&](const std::string& name, const std::string& desc) {
    auto* sc = app.add_subcommand(name, desc);
    common(sc);
    subs[name] = sc;
    return sc;
  };

  with_shape(add("init", "Create a randomly initialized model"));
  {
    auto* sc = add("train", "Train a toy model; writes model, calibration and eval corpora");
    with_shape(sc);
    with_model(sc);
    sc->add_option("--steps", cfg.steps);
    sc->add_option("--lr", cfg.lr);
    sc->add_option("--task", cfg.task, "majority | membership");
    sc->add_option("--calib-size", cfg.calib_size);
    sc->add_option("--eval-size", cfg.eval_size);
  }
  {
    auto* sc = add("extract", "Dump per-layer residual features");
    with_model(sc);
    with_corpus(sc);
    sc->add_option("--layers", cfg.layers, "Residual indices in [0, L]")->delimiter(',');
  }
  {
    auto* sc = add("score-tokens", "Dump token importance scores");
    with_model(sc);
    with_corpus(sc);
    sc->add_option("--layer", cfg.layer);
    sc->add_option("--p", cfg.p);
  }
  {
    auto* sc = add("localize", "Score layer redundancy and emit a pruning plan");
    with_model(sc);
    with_corpus(sc);
    with_localize(sc);
  }
  {
    auto* sc = add("prune", "Prune a model, optionally with subspace compensation");
    with_model(sc);
    with_corpus(sc);
    with_localize(sc);
    with_scp(sc);
    sc->add_flag("--scp,!--no-scp", cfg.scp, "Apply subspace compensation (default on)");
  }
  {
    auto* sc = add("eval", "Accuracy and throughput on a labeled corpus");
    with_model(sc);
    with_corpus(sc);
    sc->add_option("--baseline-model", cfg.baseline_model, "Unpruned model for relative performance");
    sc->add_option("--repeats", cfg.repeats, "Timed repetitions (>= 3)");
  }
  {
    auto* sc = add("heatmap", "Inter-layer feature similarity grid");
    with_model(sc);
    with_corpus(sc);
  }
  {
    auto* sc = add("seed-study", "Random-plan pruning over several seeds");
    with_model(sc);
    with_corpus(sc);
    sc->add_option("--window", cfg.window);
    sc->add_option("--ratios", cfg.ratios)->delimiter(',');
    sc->add_option("--seeds", cfg.seeds);
  }
  {
    auto* sc = add("enum-oracle", "Exhaustive plan search on a labeled corpus");
    with_model(sc);
    with_corpus(sc);
    sc->add_option("--window", cfg.window);
    sc->add_option("--count", cfg.count);
    sc->add_option("--budget", cfg.budget);
  }
  {
    auto* sc = add("gap-report", "Feature gap before and after compensation");
    with_model(sc);
    with_corpus(sc);
    with_localize(sc);
    with_scp(sc);
  }

  try {
    auto expanded = detail::expand_config(args);
    std::reverse(expanded.begin(), expanded.end());
    app.parse(expanded);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "usage: " << e.what() << '\n';
    return kExitUsage;
  } catch (const UsageError& e) {
    err << "usage: " << e.what() << '\n';
    return kExitUsage;
  }
  for (const auto& [name, sc] : subs)
    if (sc->parsed()) cfg.subcommand = name;

  try {
    detail::Runner(cfg, out).run();
  } catch (const UsageError& e) {
    err << "usage: " << e.what() << '\n';
    return kExitUsage;
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return kExitPipeline;
  } catch (const nlohmann::json::exception& e) {
    err << "error: cli: " << e.what() << '\n';
    return kExitPipeline;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitPipeline;
  }
  return kExitOk;
}

inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  std::vector<std::string> args;
  for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
  return run(args, out, err);
}

}  // namespace shortlvlm::cli

#endif  // SHORTLVLM_CLI_HPP
