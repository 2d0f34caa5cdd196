// promptroute command-line front end.
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "promptroute/checkpoint.hpp"
#include "promptroute/cvrp.hpp"
#include "promptroute/error.hpp"
#include "promptroute/evaluator.hpp"
#include "promptroute/instance_gen.hpp"
#include "promptroute/instance_io.hpp"
#include "promptroute/model.hpp"
#include "promptroute/parallel.hpp"
#include "promptroute/prompt_pool.hpp"
#include "promptroute/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace promptroute;

namespace {

struct Globals {
  std::string workdir = ".";
  std::string config;
  bool force = false;
  int threads = 0;
  std::string preset = "desk";
  std::uint64_t seed = 1;
  CLI::Option* seed_opt = nullptr;
  CLI::Option* preset_opt = nullptr;
  CLI::Option* threads_opt = nullptr;
};

// Options whose values land in the settings object only when given.
class Flags {
 public:
  explicit Flags(CLI::App* app) : app_(app) {}

  template <typename T>
  CLI::Option* add(const std::string& flag, const std::string& key, const std::string& help) {
    auto value = std::make_shared<T>();
    CLI::Option* opt = app_->add_option(flag, *value, help);
    apply_.push_back([opt, value, key](json& s) {
      if (opt->count() > 0) s[key] = *value;
    });
    return opt;
  }

  void add_switch(const std::string& flag, const std::string& key, const std::string& help) {
    auto value = std::make_shared<bool>(false);
    CLI::Option* opt = app_->add_flag(flag, *value, help);
    apply_.push_back([opt, value, key](json& s) {
      if (opt->count() > 0) s[key] = *value;
    });
  }

  void apply(json& settings) const {
    for (const auto& f : apply_) f(settings);
  }

 private:
  CLI::App* app_;
  std::vector<std::function<void(json&)>> apply_;
};

void check_keys(const json& settings, const std::set<std::string>& allowed, const std::string& where) {
  for (const auto& [k, v] : settings.items())
    if (!allowed.count(k)) throw Error(ErrorCode::kConfig, "unknown key '" + k + "' in " + where);
}

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kIo, "cannot read " + path.string());
  try {
    json j;
    in >> j;
    return j;
  } catch (const json::exception& e) {
    throw Error(ErrorCode::kParse, path.string() + ": " + e.what());
  }
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::kIo, "cannot write " + path.string());
  out << text;
  if (!out) throw Error(ErrorCode::kIo, "write failed for " + path.string());
}

class Run {
 public:
  Run(const Globals& g, std::string command) : g_(g), command_(std::move(command)) {
    if (!g.config.empty()) {
      file_ = read_json(path(g.config));
      if (!file_.is_object()) throw Error(ErrorCode::kConfig, "config file must hold an object");
      check_keys(file_, {"seed", "preset", "threads", "gen", "pretrain", "build-keys", "train", "eval",
                         "solve", "report"},
                 "config file");
    }
    preset_ = g.preset;
    if (g.preset_opt->count() == 0 && file_.contains("preset")) preset_ = file_["preset"].get<std::string>();
    if (preset_ != "desk" && preset_ != "paper")
      throw Error(ErrorCode::kConfig, "preset must be 'desk' or 'paper'");
    seed_ = g.seed;
    if (g.seed_opt->count() == 0 && file_.contains("seed")) seed_ = file_["seed"].get<std::uint64_t>();
    int threads = g.threads;
    if (g.threads_opt->count() == 0 && file_.contains("threads")) threads = file_["threads"].get<int>();
    threads_ = threads;
    set_max_threads(threads);
  }

  bool paper() const { return preset_ == "paper"; }
  std::uint64_t seed() const { return seed_; }

  // defaults <- config file section <- flags.
  json settings(json defaults, const Flags& flags) const {
    if (file_.contains(command_)) {
      const json& sec = file_[command_];
      if (!sec.is_object()) throw Error(ErrorCode::kConfig, "config section '" + command_ + "' must be an object");
      for (const auto& [k, v] : sec.items()) {
        if (!defaults.contains(k))
          throw Error(ErrorCode::kConfig, "unknown key '" + k + "' in config section '" + command_ + "'");
        defaults[k] = v;
      }
    }
    flags.apply(defaults);
    return defaults;
  }

  fs::path path(const std::string& p) const {
    const fs::path q(p);
    return q.is_absolute() ? q : fs::path(g_.workdir) / q;
  }

  // Fails on an existing output unless --force.
  void claim(const fs::path& p) const {
    if (fs::exists(p) && !g_.force)
      throw Error(ErrorCode::kIo, p.string() + " exists; pass --force to overwrite");
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
  }

  json snapshot(const json& settings) const {
    return {{"command", command_}, {"preset", preset_}, {"seed", seed_}, {"threads", threads_},
            {"settings", settings}};
  }

 private:
  const Globals& g_;
  std::string command_;
  json file_ = json::object();
  std::string preset_;
  std::uint64_t seed_ = 1;
  int threads_ = 0;
};

fs::path with_suffix(const fs::path& stem, const std::string& suffix) {
  return fs::path(stem.string() + suffix);
}

DistributionSpec gen_spec(const json& s) {
  const auto dist = s.at("dist").get<std::string>();
  const int n = s.at("n").get<int>();
  DistributionSpec spec;
  if (dist == "uniform" || dist == "U") {
    spec = DistributionSpec::geometric(0, 0, n);
  } else if (dist == "gm" || dist == "GM") {
    const int c = s.at("c").get<int>(), l = s.at("l").get<int>();
    if (c < 1 || l < 1) throw Error(ErrorCode::kConfig, "--dist gm needs --c >= 1 and --l >= 1");
    spec = DistributionSpec::geometric(c, l, n);
  } else {
    spec.kind = parse_kind(dist);
    if (!is_test_kind(spec.kind)) throw Error(ErrorCode::kUnknownKind, "unknown distribution '" + dist + "'");
    spec.size = n;
  }
  spec.validate();
  return spec;
}

int cmd_gen(const Run& run, const json& s) {
  check_keys(s, {"dist", "n", "c", "l", "count", "out"}, "gen settings");
  DistributionSpec spec = gen_spec(s);
  const int count = s.at("count").get<int>();
  if (count < 1) throw Error(ErrorCode::kConfig, "--count must be >= 1");
  const fs::path dir = run.path(s.at("out").get<std::string>());
  std::vector<fs::path> files;
  for (int i = 0; i < count; ++i)
    files.push_back(dir / (spec.label() + "-n" + std::to_string(spec.size) + "-" + std::to_string(i) + ".json"));
  for (const auto& f : files) run.claim(f);
  run.claim(dir / "gen.config.json");
  for (int i = 0; i < count; ++i) {
    spec.stream = "gen/" + std::to_string(i);
    Instance inst = gen_instance(spec, run.seed());
    inst.id = files[static_cast<std::size_t>(i)].stem().string();
    write_instance(files[static_cast<std::size_t>(i)], inst);
  }
  write_text(dir / "gen.config.json", run.snapshot(s).dump(2) + "\n");
  std::cout << json{{"written", count}, {"dir", dir.string()}}.dump() << "\n";
  return 0;
}

json train_defaults(const TrainConfig& c) {
  json j = train_config_to_json(c);
  j.erase("schedule");
  j.erase("mode");
  j.erase("seed");
  return j;
}

TrainConfig train_from_settings(json s, TrainConfig base, const std::vector<std::string>& extras,
                                std::uint64_t seed) {
  for (const auto& k : extras) s.erase(k);
  s["seed"] = seed;
  return train_config_from_json(s, std::move(base));
}

int cmd_pretrain(const Run& run, const json& s) {
  TrainConfig base = run.paper() ? TrainConfig::paper_pretrain() : TrainConfig::desk_pretrain();
  base.schedule = {DistributionSpec::geometric(0, 0, s.at("size").get<int>())};
  base.schedule.front().stream = "pretrain";
  TrainConfig cfg = train_from_settings(s, base, {"out", "size"}, run.seed());
  const fs::path out = run.path(s.at("out").get<std::string>());
  for (const auto& suffix : {".json", ".bin", ".log.ndjson", ".config.json"}) run.claim(with_suffix(out, suffix));
  write_text(with_suffix(out, ".config.json"), run.snapshot(s).dump(2) + "\n");

  ModelParams params = ModelParams::init(ModelConfig{}, run.seed());
  std::ofstream log(with_suffix(out, ".log.ndjson"));
  TrainHooks hooks;
  hooks.log = &log;
  hooks.diagnostic_path = with_suffix(out, ".diagnostic.json");
  hooks.checkpoint = [&](int epoch) {
    save_model(out, params, {{"epoch", epoch}, {"training", train_config_to_json(cfg)}});
  };
  const TrainSummary sum = pretrain_backbone(params, cfg, hooks);
  const auto& last = sum.batches_log.back();
  std::cout << json{{"backbone", out.string()}, {"epochs", sum.epochs}, {"batches", sum.batches},
                    {"last_mean_cost", last.mean_cost}, {"params_hash", hex64(params.hash())}}
                   .dump()
            << "\n";
  return 0;
}

ModelParams load_backbone(const Run& run, const json& s) {
  return load_model(run.path(s.at("backbone").get<std::string>()));
}

void check_pool_backbone(const KeyPromptPool& pool, const ModelParams& backbone) {
  if (pool.info().contains("backbone_hash") &&
      pool.info()["backbone_hash"].get<std::string>() != hex64(backbone.hash()))
    throw Error(ErrorCode::kConfig, "pool keys were built with a different backbone");
}

int cmd_build_keys(const Run& run, const json& s) {
  check_keys(s,
             {"backbone", "out", "clusters_per_group", "prompt_tokens", "prompt_init_range", "sizes",
              "per_distribution"},
             "build-keys settings");
  const ModelParams backbone = load_backbone(run, s);
  KeyPlan plan;
  plan.sizes = s.at("sizes").get<std::vector<int>>();
  plan.per_distribution = s.at("per_distribution").get<int>();
  if (plan.per_distribution < 1) throw Error(ErrorCode::kConfig, "per_distribution must be >= 1");
  const int clusters = s.at("clusters_per_group").get<int>();
  const int tokens = s.at("prompt_tokens").get<int>();
  if (clusters < 1) throw Error(ErrorCode::kConfig, "clusters_per_group must be >= 1");
  if (tokens < 0) throw Error(ErrorCode::kConfig, "prompt_tokens must be >= 0");
  const double range = s.at("prompt_init_range").get<double>();
  const fs::path out = run.path(s.at("out").get<std::string>());
  for (const auto& suffix : {".json", ".bin", ".config.json"}) run.claim(with_suffix(out, suffix));

  KeyBuild kb = build_keys(backbone, plan, clusters, run.seed());
  const int m = static_cast<int>(kb.keys.rows());
  KeyPromptPool pool(std::move(kb.keys), std::move(kb.scaler), kb.groups, clusters, tokens,
                     backbone.config, init_prompts(m, tokens, backbone.config, run.seed(), range),
                     {{"backbone_hash", hex64(backbone.hash())}, {"key_plan", s}});
  pool.save(out);
  write_text(with_suffix(out, ".config.json"), run.snapshot(s).dump(2) + "\n");
  std::cout << json{{"pool", out.string()}, {"keys", m}, {"key_length", pool.keys().cols()},
                    {"prompt_length", prompt_length(backbone.config, tokens)}}
                   .dump()
            << "\n";
  return 0;
}

int cmd_train(const Run& run, const json& s) {
  TrainConfig base = run.paper() ? TrainConfig::paper_prompt() : TrainConfig::desk_prompt();
  base.schedule = training_schedule(s.at("sizes").get<std::vector<int>>());
  TrainConfig cfg = train_from_settings(s, base, {"backbone", "pool", "out", "sizes"}, run.seed());
  const ModelParams backbone = load_backbone(run, s);
  KeyPromptPool pool = KeyPromptPool::load(run.path(s.at("pool").get<std::string>()));
  check_pool_backbone(pool, backbone);
  const fs::path out = run.path(s.at("out").get<std::string>());
  for (const auto& suffix : {".json", ".bin", ".log.ndjson", ".config.json"}) run.claim(with_suffix(out, suffix));
  write_text(with_suffix(out, ".config.json"), run.snapshot(s).dump(2) + "\n");

  std::ofstream log(with_suffix(out, ".log.ndjson"));
  TrainHooks hooks;
  hooks.log = &log;
  hooks.diagnostic_path = with_suffix(out, ".diagnostic.json");
  hooks.checkpoint = [&](int) { pool.save(out); };
  const TrainSummary sum = train_prompts(backbone, pool, cfg, hooks);
  std::cout << json{{"pool", out.string()}, {"epochs", sum.epochs}, {"batches", sum.batches},
                    {"backbone_hash", hex64(backbone.hash())}}
                   .dump()
            << "\n";
  return 0;
}

std::vector<SolveOptions> modes_from(const json& s) {
  std::vector<SolveOptions> out;
  for (const auto& m : s.at("modes")) {
    SolveOptions o;
    o.mode = parse_solve_mode(m.get<std::string>());
    o.k = s.at("k").get<int>();
    o.use_prompt = s.at("use_prompt").get<bool>();
    out.push_back(o);
  }
  if (out.empty()) throw Error(ErrorCode::kConfig, "no modes requested");
  return out;
}

std::optional<KeyPromptPool> load_pool_if(const Run& run, const json& s, const ModelParams& backbone,
                                          bool required) {
  const auto p = s.at("pool").get<std::string>();
  if (p.empty()) {
    if (required) throw Error(ErrorCode::kMissingArtifact, "prompted modes need --pool");
    return std::nullopt;
  }
  KeyPromptPool pool = KeyPromptPool::load(run.path(p));
  check_pool_backbone(pool, backbone);
  return pool;
}

std::vector<double> baselines_for(const Run& run, const std::string& kind,
                                  const std::vector<Instance>& instances) {
  std::vector<double> out;
  if (kind == "nn") {
    for (const auto& i : instances) out.push_back(nearest_neighbor(i).cost * i.scale);
  } else if (kind == "oracle") {
    for (const auto& i : instances) out.push_back(brute_force_solve(i).cost * i.scale);
  } else if (kind.rfind("file:", 0) == 0) {
    const auto known = load_best_known(run.path(kind.substr(5)));
    for (const auto& i : instances) {
      auto it = known.find(i.id);
      if (it == known.end())
        throw Error(ErrorCode::kMissingBaseline, "no best-known cost for '" + i.id + "'");
      out.push_back(it->second);
    }
  } else {
    throw Error(ErrorCode::kConfig, "baseline must be nn, oracle or file:<path>");
  }
  return out;
}

int cmd_eval(const Run& run, const json& s) {
  check_keys(s, {"backbone", "pool", "instances", "modes", "k", "use_prompt", "baseline", "out"},
             "eval settings");
  const auto modes = modes_from(s);
  bool prompted = false;
  for (const auto& m : modes) prompted = prompted || m.prompted();
  const ModelParams backbone = load_backbone(run, s);
  const auto pool = load_pool_if(run, s, backbone, prompted);

  const fs::path dir = run.path(s.at("instances").get<std::string>());
  std::vector<fs::path> files;
  if (fs::is_directory(dir)) {
    for (const auto& e : fs::directory_iterator(dir)) {
      const auto ext = e.path().extension();
      if (ext == ".vrp" || (ext == ".json" && e.path().filename().string().find(".config.") == std::string::npos))
        files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
  } else if (fs::exists(dir)) {
    files.push_back(dir);
  } else {
    throw Error(ErrorCode::kMissingArtifact, "no instances at " + dir.string());
  }
  if (files.empty()) throw Error(ErrorCode::kEmptySet, "no instance files in " + dir.string());
  std::vector<Instance> instances;
  for (const auto& f : files) instances.push_back(load_any_instance(f));

  const fs::path out = run.path(s.at("out").get<std::string>());
  for (const auto& suffix : {".json", ".txt", ".config.json"}) run.claim(with_suffix(out, suffix));
  const auto baselines = baselines_for(run, s.at("baseline").get<std::string>(), instances);
  const EvalReport report =
      run_benchmark(instances, baselines, modes, backbone, pool ? &*pool : nullptr);
  write_text(with_suffix(out, ".json"), report.to_json().dump(2) + "\n");
  write_text(with_suffix(out, ".txt"), report.to_table());
  write_text(with_suffix(out, ".config.json"), run.snapshot(s).dump(2) + "\n");
  std::cout << report.to_table();
  return 0;
}

int cmd_solve(const Run& run, const json& s) {
  check_keys(s, {"file", "backbone", "pool", "mode", "k", "use_prompt"}, "solve settings");
  SolveOptions opt;
  opt.mode = parse_solve_mode(s.at("mode").get<std::string>());
  opt.k = s.at("k").get<int>();
  opt.use_prompt = s.at("use_prompt").get<bool>();
  const ModelParams backbone = load_backbone(run, s);
  const auto pool = load_pool_if(run, s, backbone, opt.prompted());
  const auto file = s.at("file").get<std::string>();
  if (file.empty()) throw Error(ErrorCode::kConfig, "solve needs --file");
  const Instance inst = load_any_instance(run.path(file));
  const SolveResult r = solve(inst, backbone, pool ? &*pool : nullptr, opt);
  const auto report = validate_solution(inst, r.solution);
  if (!report.valid()) throw Error(ErrorCode::kInvalidRoute, report.describe());
  std::cout << json{{"id", inst.id},
                    {"method", opt.label()},
                    {"cost", r.solution.cost * inst.scale},
                    {"normalized_cost", r.solution.cost},
                    {"routes", r.solution.routes},
                    {"prompt", r.prompt},
                    {"transform", r.transform},
                    {"seconds", r.seconds},
                    {"config", run.snapshot(s)}}
                   .dump()
            << "\n";
  return 0;
}

int cmd_report(const Run& run, const json& s) {
  check_keys(s, {"in"}, "report settings");
  const EvalReport report = EvalReport::from_json(read_json(run.path(s.at("in").get<std::string>())));
  std::cout << report.to_table();
  if (!report.prompt_histogram.empty())
    std::cout << "prompt selection frequencies: " << json(report.prompt_histogram).dump() << "\n";
  return 0;
}

void print_error(std::string_view code, const std::string& message) {
  std::cerr << json{{"error", {{"code", code}, {"message", message}}}}.dump() << "\n";
}

std::uint64_t env_seed() {
  const char* v = std::getenv("PROMPTROUTE_SEED");
  if (!v || !*v) return 1;
  try {
    std::size_t used = 0;
    const auto s = std::stoull(v, &used);
    if (used == std::string(v).size()) return s;
  } catch (const std::exception&) {
  }
  throw Error(ErrorCode::kConfig, std::string("PROMPTROUTE_SEED is not an unsigned integer: ") + v);
}

}  // namespace

int main(int argc, char** argv) {
  try {
    CLI::App app{"Prompt-tuned neural solver for capacitated vehicle routing"};
    app.require_subcommand(1);
    app.fallthrough();
    Globals g;
    g.seed = env_seed();
    app.add_option("--workdir", g.workdir, "Base directory for relative paths");
    app.add_option("--config", g.config, "JSON config file; flags override its values");
    app.add_flag("--force", g.force, "Overwrite existing outputs");
    g.threads_opt = app.add_option("--threads", g.threads, "Worker thread cap (0 = all cores)");
    g.preset_opt = app.add_option("--preset", g.preset, "desk or paper")->check(CLI::IsMember({"desk", "paper"}));
    g.seed_opt = app.add_option("--seed", g.seed, "Global seed (default: PROMPTROUTE_SEED or 1)");

    auto* gen = app.add_subcommand("gen", "Generate instances as JSON files");
    Flags gen_f(gen);
    gen_f.add<std::string>("--dist", "dist", "uniform, gm, or a test family (cluster, expansion, ...)");
    gen_f.add<int>("--n", "n", "Customers per instance");
    gen_f.add<int>("--c", "c", "Gaussian mixture centers");
    gen_f.add<int>("--l", "l", "Gaussian mixture scale");
    gen_f.add<int>("--count", "count", "Number of instances");
    gen_f.add<std::string>("--out", "out", "Output directory");

    auto* pre = app.add_subcommand("pretrain", "Train the backbone on uniform instances");
    Flags pre_f(pre);
    pre_f.add<std::string>("--out", "out", "Backbone output stem");
    pre_f.add<int>("--size", "size", "Customers per training instance");
    pre_f.add<int>("--epochs", "epochs", "Epochs");
    pre_f.add<int>("--batch-size", "batch_size", "Instances per batch");
    pre_f.add<int>("--instances-per-epoch", "instances_per_epoch", "Instances per epoch");
    pre_f.add<double>("--lr-start", "lr_start", "First-epoch learning rate");
    pre_f.add<double>("--lr-end", "lr_end", "Last-epoch learning rate");
    pre_f.add<std::string>("--rollout", "rollout", "sample or greedy");
    pre_f.add<int>("--checkpoint-every", "checkpoint_every", "Epochs between checkpoints");

    auto* keys = app.add_subcommand("build-keys", "Build the key set and initial prompts");
    Flags keys_f(keys);
    keys_f.add<std::string>("--backbone", "backbone", "Backbone stem");
    keys_f.add<std::string>("--out", "out", "Pool output stem");
    keys_f.add<int>("--clusters", "clusters_per_group", "Keys per size group");
    keys_f.add<int>("--prompt-tokens", "prompt_tokens", "Prompt tokens per layer");
    keys_f.add<double>("--prompt-init-range", "prompt_init_range", "Prompts start i.i.d. in [-range, range]");
    keys_f.add<std::vector<int>>("--sizes", "sizes", "Instance sizes sampled for keys");
    keys_f.add<int>("--per-distribution", "per_distribution", "Instances per size and setting");

    auto* train = app.add_subcommand("train", "Train prompts with a frozen backbone");
    Flags train_f(train);
    train_f.add<std::string>("--backbone", "backbone", "Backbone stem");
    train_f.add<std::string>("--pool", "pool", "Input pool stem");
    train_f.add<std::string>("--out", "out", "Trained pool output stem");
    train_f.add<std::vector<int>>("--sizes", "sizes", "Training sizes (11 settings each)");
    train_f.add<int>("--epochs", "epochs", "Epochs");
    train_f.add<int>("--batch-size", "batch_size", "Instances per batch");
    train_f.add<int>("--instances-per-epoch", "instances_per_epoch", "Instances per epoch");
    train_f.add<double>("--lr-start", "lr_start", "First-epoch learning rate");
    train_f.add<double>("--lr-end", "lr_end", "Last-epoch learning rate");
    train_f.add<std::string>("--rollout", "rollout", "greedy or sample");
    train_f.add<int>("--checkpoint-every", "checkpoint_every", "Epochs between checkpoints");

    auto* eval = app.add_subcommand("eval", "Benchmark solve modes on an instance set");
    Flags eval_f(eval);
    eval_f.add<std::string>("--backbone", "backbone", "Backbone stem");
    eval_f.add<std::string>("--pool", "pool", "Pool stem (prompted modes)");
    eval_f.add<std::string>("--instances", "instances", "Directory or file of instances");
    eval_f.add<std::vector<std::string>>("--mode", "modes", "greedy, aug8, topk, topk_aug (repeatable)");
    eval_f.add<int>("--k", "k", "Prompts for the top-k modes");
    eval_f.add_switch("--use-prompt", "use_prompt", "Greedy/aug8 with the best-matched prompt");
    eval_f.add<std::string>("--baseline", "baseline", "nn, oracle, or file:<best-known json>");
    eval_f.add<std::string>("--out", "out", "Report output stem");

    auto* slv = app.add_subcommand("solve", "Solve a single instance");
    Flags solve_f(slv);
    solve_f.add<std::string>("--file", "file", ".vrp or JSON instance");
    solve_f.add<std::string>("--backbone", "backbone", "Backbone stem");
    solve_f.add<std::string>("--pool", "pool", "Pool stem (prompted modes)");
    solve_f.add<std::string>("--mode", "mode", "greedy, aug8, topk, topk_aug");
    solve_f.add<int>("--k", "k", "Prompts for the top-k modes");
    solve_f.add_switch("--use-prompt", "use_prompt", "Greedy/aug8 with the best-matched prompt");

    auto* rep = app.add_subcommand("report", "Print a saved evaluation report");
    Flags rep_f(rep);
    rep_f.add<std::string>("--in", "in", "Report JSON");

    try {
      app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
      if (e.get_exit_code() == 0) return app.exit(e);
      print_error("usage", e.what());
      return 1;
    }

    if (gen->parsed()) {
      Run run(g, "gen");
      return cmd_gen(run, run.settings({{"dist", "uniform"}, {"n", 20}, {"c", 0}, {"l", 0}, {"count", 10},
                                        {"out", "instances"}},
                                       gen_f));
    }
    if (pre->parsed()) {
      Run run(g, "pretrain");
      json d = train_defaults(run.paper() ? TrainConfig::paper_pretrain() : TrainConfig::desk_pretrain());
      d["out"] = "backbone";
      d["size"] = run.paper() ? 100 : 20;
      return cmd_pretrain(run, run.settings(d, pre_f));
    }
    if (keys->parsed()) {
      Run run(g, "build-keys");
      const KeyPlan plan = run.paper() ? KeyPlan::paper() : KeyPlan::desk();
      return cmd_build_keys(run, run.settings({{"backbone", "backbone"}, {"out", "pool"},
                                               {"clusters_per_group", 4}, {"prompt_tokens", 5},
                                               {"prompt_init_range", run.paper() ? 1.0 : kDeskPromptRange},
                                               {"sizes", plan.sizes},
                                               {"per_distribution", plan.per_distribution}},
                                              keys_f));
    }
    if (train->parsed()) {
      Run run(g, "train");
      json d = train_defaults(run.paper() ? TrainConfig::paper_prompt() : TrainConfig::desk_prompt());
      d["backbone"] = "backbone";
      d["pool"] = "pool";
      d["out"] = "pool-trained";
      d["sizes"] = run.paper() ? paper_training_sizes() : desk_training_sizes();
      return cmd_train(run, run.settings(d, train_f));
    }
    if (eval->parsed()) {
      Run run(g, "eval");
      return cmd_eval(run, run.settings({{"backbone", "backbone"}, {"pool", ""}, {"instances", "instances"},
                                         {"modes", {"greedy"}}, {"k", 8}, {"use_prompt", false},
                                         {"baseline", "nn"}, {"out", "report"}},
                                        eval_f));
    }
    if (slv->parsed()) {
      Run run(g, "solve");
      return cmd_solve(run, run.settings({{"file", ""}, {"backbone", "backbone"}, {"pool", ""},
                                          {"mode", "greedy"}, {"k", 8}, {"use_prompt", false}},
                                         solve_f));
    }
    if (rep->parsed()) {
      Run run(g, "report");
      return cmd_report(run, run.settings({{"in", "report.json"}}, rep_f));
    }
    print_error("usage", "no subcommand");
    return 1;
  } catch (const Error& e) {
    print_error(error_code_name(e.code()), e.what());
    return 2;
  } catch (const json::exception& e) {
    print_error("config_error", e.what());
    return 2;
  } catch (const std::exception& e) {
    print_error("internal", e.what());
    return 3;
  }
}
