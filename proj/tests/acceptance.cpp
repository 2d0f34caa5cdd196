// Acceptance run: one line per criterion. Trains the desk backbone and prompt
// pool from scratch inside the work directory unless --reuse finds them there.
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "oracles.hpp"
#include "promptroute/checkpoint.hpp"
#include "promptroute/cvrp.hpp"
#include "promptroute/evaluator.hpp"
#include "promptroute/instance_gen.hpp"
#include "promptroute/instance_io.hpp"
#include "promptroute/model.hpp"
#include "promptroute/parallel.hpp"
#include "promptroute/prompt_pool.hpp"
#include "promptroute/rng.hpp"
#include "promptroute/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace promptroute;
using ad::Graph;
using ad::Index;
using ad::Matrix;

namespace {

constexpr std::uint64_t kSeed = 1;
constexpr int kPromptTokens = 5;
constexpr int kClustersPerGroup = 4;

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

// Uniform, the nine GM_c^l with c in {3,5,7}, and the six test families.
std::vector<DistributionSpec> sweep_specs(int size) {
  std::vector<DistributionSpec> out{DistributionSpec::geometric(0, 0, size)};
  for (int c : {3, 5, 7})
    for (int l : {10, 30, 50}) out.push_back(DistributionSpec::geometric(c, l, size));
  for (DistKind k : {DistKind::kCluster, DistKind::kExpansion, DistKind::kExplosion, DistKind::kImplosion,
                     DistKind::kGrid, DistKind::kMixed}) {
    DistributionSpec s;
    s.kind = k;
    s.size = size;
    out.push_back(s);
  }
  return out;
}

Instance make_instance(DistributionSpec spec, const std::string& stream, std::size_t i) {
  spec.stream = stream + "/" + std::to_string(i);
  return gen_instance(spec, kSeed);
}

// Instance i of a set cycling through the sweep distributions and desk sizes.
Instance mixed_instance(const std::string& stream, std::size_t i) {
  const auto sizes = desk_training_sizes();
  const int n = sizes[(i / 16) % sizes.size()];
  return make_instance(sweep_specs(n)[i % 16], stream, i);
}

double mean(const std::vector<double>& v) {
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

class Acceptance {
 public:
  Acceptance(fs::path workdir, bool reuse) : dir_(std::move(workdir)), reuse_(reuse) {
    fs::create_directories(dir_);
  }

  Outcome structural();
  Outcome feasibility();
  Outcome gradients();
  Outcome attention_oracle();
  Outcome empty_prompt();
  Outcome token_counts();
  Outcome clip_and_mask();
  Outcome mode_dominance();
  Outcome optimality_gap();
  Outcome trainability();
  Outcome adaptation();
  Outcome selected_only();
  Outcome cvrplib();
  Outcome determinism();

 private:
  const ModelParams& backbone();
  KeyPromptPool& initial_pool();
  KeyPromptPool& trained_pool();
  KeyPromptPool build_pool(const ModelParams& backbone) const;

  fs::path dir_;
  bool reuse_;
  std::optional<ModelParams> backbone_;
  std::optional<KeyPromptPool> initial_pool_, trained_pool_;
  std::set<int> selected_;
  std::uint64_t hash_before_prompts_ = 0;
};

const ModelParams& Acceptance::backbone() {
  if (backbone_) return *backbone_;
  const fs::path stem = dir_ / "backbone";
  if (reuse_ && tensor_file_exists(stem)) {
    backbone_ = load_model(stem);
    return *backbone_;
  }
  ModelParams p = ModelParams::init(ModelConfig{}, kSeed);
  const TrainConfig cfg = TrainConfig::desk_pretrain();
  std::ofstream log(dir_ / "backbone.log.ndjson");
  TrainHooks hooks;
  hooks.log = &log;
  hooks.diagnostic_path = dir_ / "backbone.diagnostic.json";
  (void)pretrain_backbone(p, cfg, hooks);
  save_model(stem, p, {{"training", train_config_to_json(cfg)}});
  backbone_ = std::move(p);
  return *backbone_;
}

KeyPromptPool Acceptance::build_pool(const ModelParams& bb) const {
  KeyBuild kb = build_keys(bb, KeyPlan::desk(), kClustersPerGroup, kSeed);
  const int m = static_cast<int>(kb.keys.rows());
  return KeyPromptPool(std::move(kb.keys), std::move(kb.scaler), kb.groups, kClustersPerGroup, kPromptTokens,
                       bb.config, init_prompts(m, kPromptTokens, bb.config, kSeed, kDeskPromptRange));
}

KeyPromptPool& Acceptance::initial_pool() {
  if (!initial_pool_) initial_pool_ = build_pool(backbone());
  return *initial_pool_;
}

KeyPromptPool& Acceptance::trained_pool() {
  if (trained_pool_) return *trained_pool_;
  const ModelParams& bb = backbone();
  hash_before_prompts_ = bb.hash();
  const fs::path stem = dir_ / "pool-trained";
  const fs::path selected_file = dir_ / "pool-trained.selected.json";
  if (reuse_ && tensor_file_exists(stem) && fs::exists(selected_file)) {
    trained_pool_ = KeyPromptPool::load(stem);
    std::ifstream in(selected_file);
    selected_ = json::parse(in).get<std::set<int>>();
    return *trained_pool_;
  }
  KeyPromptPool pool = initial_pool();
  std::ofstream log(dir_ / "pool-trained.log.ndjson");
  TrainHooks hooks;
  hooks.log = &log;
  hooks.diagnostic_path = dir_ / "pool-trained.diagnostic.json";
  const TrainSummary sum = train_prompts(bb, pool, TrainConfig::desk_prompt(), hooks);
  for (const auto& b : sum.batches_log) selected_.insert(b.selected.begin(), b.selected.end());
  pool.save(stem);
  std::ofstream(selected_file) << json(selected_).dump() << "\n";
  trained_pool_ = std::move(pool);
  return *trained_pool_;
}

Outcome Acceptance::structural() {
  const ModelConfig cfg;
  const Instance inst = gen_instance(DistributionSpec::geometric(0, 0, 12), kSeed);
  const auto feature = extract_feature(ModelParams::init(cfg, kSeed), inst);
  const auto plan = KeyPlan::paper();
  const int m = plan.groups().count * kClustersPerGroup;
  const auto prompts = init_prompts(m, kPromptTokens, cfg, kSeed);
  const auto schedule = training_schedule();
  const bool ok = cfg.embed == 128 && cfg.layers == 6 && feature.size() == 768 &&
                  prompt_length(cfg, kPromptTokens) == 3840 && prompts.size() == 16 &&
                  prompts.front().value.size() == 3840 && m == 16 && schedule.size() == 341 &&
                  capacity_for(50) == 40 && capacity_for(100) == 50 && capacity_for(200) == 70;
  std::ostringstream d;
  d << "key " << feature.size() << ", prompt " << prompt_length(cfg, kPromptTokens) << ", M " << m
    << ", schedule " << schedule.size() << ", C(50/100/200) " << capacity_for(50) << "/" << capacity_for(100)
    << "/" << capacity_for(200);
  return {ok, d.str()};
}

Outcome Acceptance::feasibility() {
  const ModelParams& bb = backbone();
  const KeyPromptPool& pool = initial_pool();
  constexpr std::size_t kRollouts = 1000;
  std::vector<int> bad(kRollouts, 0);
  std::vector<std::size_t> checked(kRollouts, 0);
  parallel_for(kRollouts, [&](std::size_t i) {
    const Instance inst = mixed_instance("feasibility", i);
    Rng rng = Rng::stream(kSeed, {"feasibility-rollout", std::to_string(i)});
    RolloutOptions opt;
    opt.mode = i % 2 ? DecodeMode::kSample : DecodeMode::kGreedy;
    opt.rng = &rng;
    const ad::Tensor* prompt = (i / 2) % 2 ? &pool.prompt(static_cast<int>(i % pool.size())) : nullptr;
    const auto r = infer(bb, inst, prompt, prompt ? pool.prompt_tokens() : 0, opt);
    for (const auto& t : r.trajectories) {
      ++checked[i];
      if (!validate_solution(inst, t.solution).valid()) ++bad[i];
    }
  });
  const int failures = std::accumulate(bad.begin(), bad.end(), 0);
  const std::size_t total = std::accumulate(checked.begin(), checked.end(), std::size_t{0});
  return {failures == 0, std::to_string(kRollouts) + " rollouts, " + std::to_string(total) + " solutions, " +
                             std::to_string(failures) + " invalid"};
}

Outcome Acceptance::gradients() {
  ModelParams p = ModelParams::init(ModelConfig{}, 7);
  const Instance inst = gen_instance(DistributionSpec::geometric(0, 0, 10), 7);
  Rng init(11);
  Matrix pv(1, prompt_length(p.config, kPromptTokens));
  for (Index j = 0; j < pv.cols(); ++j) pv(0, j) = init.uniform(-1.0, 1.0);
  ad::Tensor prompt("prompt", pv);

  Rng rng(13);
  RolloutOptions sample;
  sample.mode = DecodeMode::kSample;
  sample.rng = &rng;
  const auto run = infer(p, inst, &prompt, kPromptTokens, sample);
  std::vector<std::vector<int>> seqs;
  double baseline = 0;
  for (const auto& t : run.trajectories) {
    seqs.push_back(t.sequence);
    baseline += t.reward;
  }
  baseline /= static_cast<double>(seqs.size());
  std::vector<double> weights;
  for (const auto& t : run.trajectories)
    weights.push_back(-(t.reward - baseline) / static_cast<double>(seqs.size()));

  auto build = [&](Graph& g) {
    const auto m = bind(g, p);
    const auto enc = prompted_encoder_forward(g, m, inst, g.leaf(prompt), kPromptTokens);
    RolloutOptions forced;
    forced.mode = DecodeMode::kForced;
    forced.forced = &seqs;
    const auto r = rollout(g, m, inst, enc, forced);
    if (g.recording()) return weighted_log_prob(g, r.trace, weights);
    double v = 0;
    for (std::size_t j = 0; j < seqs.size(); ++j) v += weights[j] * r.trajectories[j].log_prob;
    return g.constant(Matrix::Constant(1, 1, v));
  };

  p.set_trainable(false);
  ad::FdOptions popt;
  popt.max_coords = 200;
  const auto pf = ad::finite_difference_check(build, prompt, popt);

  p.set_trainable(true);
  double theta_err = 0;
  std::size_t theta_compared = 0, theta_retried = 0, tensors = 0;
  std::uint64_t seed = 100;
  for (ad::Tensor* t : p.tensors()) {
    ad::FdOptions topt;
    topt.max_coords = 4;
    topt.seed = ++seed;
    topt.retry_step = 1e-6;
    const auto r = ad::finite_difference_check(build, *t, topt);
    theta_err = std::max(theta_err, r.max_rel_error);
    theta_compared += r.compared;
    theta_retried += r.retried;
    ++tensors;
  }
  const bool ok = pf.max_rel_error < 1e-4 && theta_err < 1e-4 && pf.compared >= 100 && theta_compared >= tensors;
  return {ok, "prompt " + fmt("%.2e", pf.max_rel_error) + " over " + std::to_string(pf.compared) +
                  " coords, theta " + fmt("%.2e", theta_err) + " over " + std::to_string(theta_compared) +
                  " coords in " + std::to_string(tensors) + " tensors (" + std::to_string(theta_retried) +
                  " retried at step 1e-6)"};
}

Outcome Acceptance::attention_oracle() {
  Rng rng(21);
  double worst = 0;
  for (int s = 0; s < 100; ++s) {
    ModelConfig cfg;
    cfg.layers = 1;
    cfg.heads = static_cast<int>(std::vector<int>{1, 2, 4, 8}[static_cast<std::size_t>(rng.uniform_int(0, 3))]);
    cfg.embed = cfg.heads * static_cast<int>(rng.uniform_int(1, 6));
    cfg.ff_hidden = 4;
    const ModelParams p = ModelParams::init(cfg, 1000 + static_cast<std::uint64_t>(s));
    const Index tokens = rng.uniform_int(1, 8);
    Matrix x(tokens, cfg.embed);
    for (Index i = 0; i < x.size(); ++i) x.data()[i] = rng.uniform(-2.0, 2.0);
    Graph g(false);
    const auto m = bind(g, p);
    const Matrix got = g.value(mha(g, g.constant(x), m.layers[0].attn, cfg.heads));
    const Matrix want = oracle::naive_mha(x, p.layers[0].attn, cfg.heads);
    worst = std::max(worst, (got - want).cwiseAbs().maxCoeff());
  }
  return {worst < 1e-10, "100 shapes, max abs error " + fmt("%.2e", worst)};
}

Outcome Acceptance::empty_prompt() {
  const ModelParams p = ModelParams::init(ModelConfig{}, 31);
  double worst = 0;
  for (std::size_t i = 0; i < 50; ++i) {
    const Instance inst = mixed_instance("empty-prompt", i);
    Graph g(false);
    const auto m = bind(g, p);
    const auto plain = encoder_forward(g, m, inst);
    const auto prompted = prompted_encoder_forward(g, m, inst, g.constant(Matrix(1, 0)), 0);
    worst = std::max(worst, (g.value(plain.nodes) - g.value(prompted.nodes)).cwiseAbs().maxCoeff());
    for (std::size_t l = 0; l < plain.residual_sums.size(); ++l)
      worst = std::max(worst, (g.value(plain.residual_sums[l]) - g.value(prompted.residual_sums[l]))
                                  .cwiseAbs()
                                  .maxCoeff());
  }
  return {worst < 1e-12, "50 instances, max abs diff " + fmt("%.2e", worst)};
}

Outcome Acceptance::token_counts() {
  const ModelParams p = ModelParams::init(ModelConfig{}, 41);
  const Instance inst = gen_instance(DistributionSpec::geometric(3, 30, 12), 41);
  const Index n0 = static_cast<Index>(inst.num_nodes());
  const int layers = p.config.layers;
  bool ok = true;
  int checks = 0;
  for (int d : {1, 5, 10}) {
    Matrix pv = Matrix::Constant(1, prompt_length(p.config, d), 0.25);
    Graph g(false);
    const auto m = bind(g, p);
    const auto enc = prompted_encoder_forward(g, m, inst, g.constant(pv), d);
    ok = ok && static_cast<int>(enc.layer_input_tokens.size()) == layers;
    for (int l = 1; l <= layers && ok; ++l, ++checks)
      ok = enc.layer_input_tokens[static_cast<std::size_t>(l - 1)] == n0 + (l - 1) * d;
    ok = ok && enc.final_tokens == n0 + layers * d && g.value(enc.nodes).rows() == n0;
  }
  return {ok, "D in {1,5,10}, " + std::to_string(checks) + " layer lengths plus final n0+L*D"};
}

Outcome Acceptance::clip_and_mask() {
  const ModelParams& bb = backbone();
  const double clip = bb.config.clip;
  constexpr int kSteps = 10000;
  int steps = 0, clip_violations = 0, mask_violations = 0, sum_violations = 0;
  double worst_sum = 0, max_abs_compat = 0;
  Rng rng(51);
  for (std::size_t i = 0; steps < kSteps; ++i) {
    const Instance inst = mixed_instance("clip-mask", i);
    Graph g(false);
    const auto m = bind(g, bb);
    const auto enc = encoder_forward(g, m, inst);
    const auto cache = prepare_decoder(g, m, enc.nodes);
    const int n = static_cast<int>(inst.num_customers());
    for (int start = 1; start <= n && steps < kSteps; ++start) {
      DecodeState st = DecodeState::start(inst);
      st.visit(inst, start);
      while (!st.done() && steps < kSteps) {
        const std::size_t mark = g.size();
        Matrix compat;
        const auto probs = decoder_step(g, m, cache, inst, st, &compat);
        g.truncate(mark);
        ++steps;
        max_abs_compat = std::max(max_abs_compat, compat.cwiseAbs().maxCoeff());
        if (compat.maxCoeff() > clip || compat.minCoeff() < -clip) ++clip_violations;
        double total = 0;
        std::vector<double> allowed;
        for (int v = 0; v <= n; ++v) {
          const bool excluded = v == 0 ? st.current == 0
                                       : st.visited[static_cast<std::size_t>(v)] ||
                                             inst.demand(static_cast<std::size_t>(v)) > st.remaining;
          const double pr = probs[static_cast<std::size_t>(v)];
          if (excluded && pr != 0.0) ++mask_violations;
          total += pr;
          allowed.push_back(excluded ? 0.0 : pr);
        }
        worst_sum = std::max(worst_sum, std::abs(total - 1.0));
        if (std::abs(total - 1.0) > 1e-6) ++sum_violations;
        double u = rng.uniform() * std::accumulate(allowed.begin(), allowed.end(), 0.0), acc = 0;
        int pick = -1;
        for (int v = 0; v <= n; ++v) {
          if (allowed[static_cast<std::size_t>(v)] <= 0.0) continue;
          pick = v;
          acc += allowed[static_cast<std::size_t>(v)];
          if (u < acc) break;
        }
        st.visit(inst, pick);
      }
    }
  }
  const bool ok = steps == kSteps && clip_violations == 0 && mask_violations == 0 && sum_violations == 0;
  return {ok, std::to_string(steps) + " steps, max |compat| " + fmt("%.4f", max_abs_compat) +
                  ", masked nonzero " + std::to_string(mask_violations) + ", max |sum-1| " +
                  fmt("%.1e", worst_sum)};
}

SolveOptions mode(SolveMode m, int k = 8, bool prompt = false) {
  SolveOptions o;
  o.mode = m;
  o.k = k;
  o.use_prompt = prompt;
  return o;
}

bool same_solution(const Solution& a, const Solution& b) { return a.cost == b.cost && a.routes == b.routes; }

Outcome Acceptance::mode_dominance() {
  const ModelParams& bb = backbone();
  const KeyPromptPool& pool = trained_pool();
  constexpr std::size_t kCount = 200;
  std::vector<int> aug(kCount), topk(kCount), ident(kCount);
  parallel_for(kCount, [&](std::size_t i) {
    const Instance inst = mixed_instance("dominance", i);
    const double greedy = solve(inst, bb, &pool, mode(SolveMode::kGreedy)).solution.cost;
    const double aug8 = solve(inst, bb, &pool, mode(SolveMode::kAug8)).solution.cost;
    const auto t1 = solve(inst, bb, &pool, mode(SolveMode::kTopK, 1));
    const double t4 = solve(inst, bb, &pool, mode(SolveMode::kTopK, 4)).solution.cost;
    const double t8 = solve(inst, bb, &pool, mode(SolveMode::kTopK, 8)).solution.cost;
    const auto gp = solve(inst, bb, &pool, mode(SolveMode::kGreedy, 8, true));
    aug[i] = aug8 <= greedy;
    topk[i] = t8 <= t4 && t4 <= t1.solution.cost;
    ident[i] = same_solution(t1.solution, gp.solution) && t1.prompt == gp.prompt;
  });
  const int a = std::accumulate(aug.begin(), aug.end(), 0), t = std::accumulate(topk.begin(), topk.end(), 0),
            s = std::accumulate(ident.begin(), ident.end(), 0);
  const int n = static_cast<int>(kCount);
  return {a == n && t == n && s == n, "aug8<=greedy " + std::to_string(a) + "/" + std::to_string(n) +
                                          ", topk8<=topk4<=topk1 " + std::to_string(t) + "/" + std::to_string(n) +
                                          ", topk1==greedy+prompt " + std::to_string(s) + "/" + std::to_string(n)};
}

Outcome Acceptance::optimality_gap() {
  const ModelParams& bb = backbone();
  const KeyPromptPool& pool = trained_pool();
  const std::vector<SolveOptions> modes = {mode(SolveMode::kGreedy),        mode(SolveMode::kAug8),
                                           mode(SolveMode::kTopK, 1),       mode(SolveMode::kTopK, 8),
                                           mode(SolveMode::kTopKAug, 8),    mode(SolveMode::kGreedy, 8, true),
                                           mode(SolveMode::kAug8, 8, true)};
  constexpr std::size_t kCount = 50;
  std::vector<double> oracle_diff(kCount), min_gap(kCount);
  parallel_for(kCount, [&](std::size_t i) {
    const int n = 1 + static_cast<int>(i % 7);
    const Instance inst = make_instance(sweep_specs(n)[i % 16], "optimality", i);
    const double exact = brute_force_solve(inst).cost;
    oracle_diff[i] = std::abs(exact - oracle::partition_oracle(inst)) / exact;
    double g = std::numeric_limits<double>::infinity();
    for (const auto& o : modes) g = std::min(g, (solve(inst, bb, &pool, o).solution.cost - exact) / exact);
    min_gap[i] = g;
  });
  const double diff = *std::max_element(oracle_diff.begin(), oracle_diff.end());
  const double gap = *std::min_element(min_gap.begin(), min_gap.end());
  // Equal tours summed in a different route order can differ in the last bits.
  const bool ok = diff <= 1e-12 && gap >= -1e-12;
  return {ok, "50 instances, brute force vs oracle max rel diff " + fmt("%.1e", diff) + ", min gap over " +
                  std::to_string(modes.size()) + " modes " + fmt("%.3e", gap)};
}

Outcome Acceptance::trainability() {
  const ModelParams& bb = backbone();
  const ModelParams untrained = ModelParams::init(ModelConfig{}, kSeed);
  constexpr std::size_t kCount = 1000;
  std::vector<double> trained(kCount), raw(kCount), nn(kCount);
  parallel_for(kCount, [&](std::size_t i) {
    const Instance inst = make_instance(DistributionSpec::geometric(0, 0, 20), "heldout-uniform", i);
    trained[i] = solve(inst, bb, nullptr, mode(SolveMode::kGreedy)).solution.cost;
    raw[i] = solve(inst, untrained, nullptr, mode(SolveMode::kGreedy)).solution.cost;
    nn[i] = nearest_neighbor(inst).cost;
  });
  const double t = mean(trained), u = mean(raw), h = mean(nn);

  // Training log: the last 100 batches average a lower rollout cost than the first 100.
  std::vector<double> logged;
  std::ifstream log(dir_ / "backbone.log.ndjson");
  for (std::string line; std::getline(log, line);) logged.push_back(json::parse(line).at("mean_cost").get<double>());
  bool window = logged.size() >= 200;
  double first = 0, last = 0;
  if (window) {
    first = std::accumulate(logged.begin(), logged.begin() + 100, 0.0) / 100;
    last = std::accumulate(logged.end() - 100, logged.end(), 0.0) / 100;
    window = last < first;
  }
  return {t < u && t < h && window, "1000 uniform n=20: trained " + fmt("%.4f", t) + ", untrained " +
                                        fmt("%.4f", u) + ", nearest neighbor " + fmt("%.4f", h) + "; " +
                                        std::to_string(logged.size()) + " logged batches, first/last 100 " +
                                        fmt("%.4f", first) + "/" + fmt("%.4f", last)};
}

Outcome Acceptance::adaptation() {
  const ModelParams& bb = backbone();
  const KeyPromptPool& pool = trained_pool();
  constexpr std::size_t kCount = 500;
  std::vector<double> frozen(kCount), prompted(kCount);
  parallel_for(kCount, [&](std::size_t i) {
    const Instance inst = make_instance(DistributionSpec::geometric(3, 50, 20), "heldout-gm", i);
    frozen[i] = solve(inst, bb, nullptr, mode(SolveMode::kGreedy)).solution.cost;
    prompted[i] = solve(inst, bb, &pool, mode(SolveMode::kTopK, 1)).solution.cost;
  });
  std::vector<double> gain(kCount);
  for (std::size_t i = 0; i < kCount; ++i) gain[i] = frozen[i] - prompted[i];
  // Percentile bootstrap of the mean paired improvement.
  Rng rng(61);
  std::vector<double> means(10000);
  for (auto& m : means) {
    double s = 0;
    for (std::size_t i = 0; i < kCount; ++i) s += gain[static_cast<std::size_t>(rng.uniform_int(0, kCount - 1))];
    m = s / static_cast<double>(kCount);
  }
  std::sort(means.begin(), means.end());
  const double lo = means[250], hi = means[9749];
  const double f = mean(frozen), p = mean(prompted);
  return {p <= f && lo > 0, "500 GM3_50 n=20: frozen greedy " + fmt("%.4f", f) + ", topk(1) " + fmt("%.4f", p) +
                                ", improvement 95% CI [" + fmt("%.4f", lo) + ", " + fmt("%.4f", hi) + "]"};
}

Outcome Acceptance::selected_only() {
  const KeyPromptPool& trained = trained_pool();
  const KeyPromptPool& initial = initial_pool();
  const std::uint64_t after = backbone().hash();
  const std::uint64_t on_disk = load_model(dir_ / "backbone").hash();
  int untouched_ok = 0, untouched = 0, moved = 0;
  for (int i = 0; i < trained.size(); ++i) {
    const bool same = trained.prompt(i).value == initial.prompt(i).value;
    if (selected_.count(i)) {
      moved += !same;
    } else {
      ++untouched;
      untouched_ok += same;
    }
  }
  // One more batch on top of the trained pool: prompts outside that batch's
  // selection must stay bit-identical.
  KeyPromptPool extra = trained;
  TrainConfig one = TrainConfig::desk_prompt();
  one.epochs = 1;
  one.instances_per_epoch = one.batch_size;
  const auto sum = train_prompts(backbone(), extra, one);
  const std::set<int> chosen(sum.batches_log.front().selected.begin(), sum.batches_log.front().selected.end());
  int idle = 0, idle_ok = 0;
  for (int i = 0; i < extra.size(); ++i) {
    if (chosen.count(i)) continue;
    ++idle;
    idle_ok += extra.prompt(i).value == trained.prompt(i).value;
  }
  const bool ok = after == hash_before_prompts_ && on_disk == hash_before_prompts_ && untouched_ok == untouched &&
                  idle_ok == idle && trained.keys() == initial.keys() && backbone().hash() == after;
  return {ok, "backbone hash " + hex64(after) + " unchanged, " + std::to_string(untouched_ok) + "/" +
                  std::to_string(untouched) + " never-selected prompts identical, " + std::to_string(moved) + "/" +
                  std::to_string(selected_.size()) + " selected prompts moved; extra batch left " +
                  std::to_string(idle_ok) + "/" + std::to_string(idle) + " unselected prompts identical"};
}

Outcome Acceptance::cvrplib() {
  const fs::path data = PROMPTROUTE_DATA_DIR;
  const auto best = load_best_known(data / "best_known.json");
  std::ifstream in(data / "best_known.json");
  const json meta = json::parse(in).at("instances");
  bool ok = true;
  std::ostringstream d;
  for (const char* name : {"A-n32-k5", "X-n101-k25"}) {
    const CvrplibFile f = read_cvrplib(data / (std::string(name) + ".vrp"));
    const json& m = meta.at(name);
    ok = ok && f.name == name && f.dimension == m.at("dimension").get<int>() &&
         f.capacity == m.at("capacity").get<int>() && static_cast<int>(f.instance.num_nodes()) == f.dimension &&
         f.instance.capacity == f.capacity;
    d << name << " dim " << f.dimension << " cap " << f.capacity << " best " << best.at(name) << "; ";
  }
  ok = ok && best.at("A-n32-k5") == 784.0 && best.at("X-n101-k25") == 27591.0;

  double worst = 0;
  for (std::size_t i = 0; i < 50; ++i) {
    const Instance inst = mixed_instance("roundtrip", i);
    RawInstance raw = denormalize(inst);
    Rng rng = Rng::stream(kSeed, {"roundtrip-scale", std::to_string(i)});
    const double s = rng.uniform(1.0, 1000.0);
    raw.depot = Point{raw.depot.x * s, raw.depot.y * s};
    for (auto& c : raw.customers) c.pos = Point{c.pos.x * s, c.pos.y * s};
    const CvrplibFile back = parse_cvrplib(format_cvrplib(raw, "roundtrip"));
    worst = std::max({worst, std::abs(raw.depot.x - back.raw.depot.x), std::abs(raw.depot.y - back.raw.depot.y)});
    ok = ok && back.raw.customers.size() == raw.customers.size();
    for (std::size_t k = 0; ok && k < raw.customers.size(); ++k) {
      const Point a = raw.customers[k].pos, b = back.raw.customers[k].pos;
      worst = std::max({worst, std::abs(a.x - b.x), std::abs(a.y - b.y)});
      ok = raw.customers[k].demand == back.raw.customers[k].demand;
    }
    ok = ok && back.raw.capacity == raw.capacity;
  }
  ok = ok && worst < 1e-9;
  d << "round trip max error " << fmt("%.1e", worst);
  return {ok, d.str()};
}

std::string dump_all(const std::vector<Instance>& v) {
  std::string s;
  for (const auto& i : v) s += instance_to_json(i).dump();
  return s;
}

Outcome Acceptance::determinism() {
  std::vector<std::string> failed;
  auto check = [&](bool same, const char* stage) {
    if (!same) failed.push_back(stage);
  };

  // Generation.
  auto gen_all = [] {
    std::vector<Instance> v;
    for (int n : {10, 50, 100})
      for (const auto& s : sweep_specs(n))
        for (std::size_t i = 0; i < 5; ++i) v.push_back(make_instance(s, "determinism", i));
    return v;
  };
  check(dump_all(gen_all()) == dump_all(gen_all()), "gen");

  // Pretraining, shortened, also across thread counts.
  TrainConfig pre = TrainConfig::desk_pretrain();
  pre.epochs = 3;
  auto pretrain_hash = [&](unsigned threads) {
    const unsigned saved = max_threads();
    set_max_threads(threads);
    ModelParams p = ModelParams::init(ModelConfig{}, kSeed);
    (void)pretrain_backbone(p, pre);
    set_max_threads(saved);
    return p.hash();
  };
  const std::uint64_t h1 = pretrain_hash(1);
  check(h1 == pretrain_hash(1) && h1 == pretrain_hash(3), "pretrain");

  // Key building, against the pool used above.
  const ModelParams& bb = backbone();
  const KeyPromptPool rebuilt = build_pool(bb);
  const KeyPromptPool& initial = initial_pool();
  bool same_pool = rebuilt.keys() == initial.keys() && rebuilt.scaler().mean == initial.scaler().mean &&
                   rebuilt.scaler().stddev == initial.scaler().stddev;
  for (int i = 0; i < rebuilt.size(); ++i) same_pool = same_pool && rebuilt.prompt(i).value == initial.prompt(i).value;
  check(same_pool, "build-keys");

  // Prompt training, full desk preset, against the trained pool.
  const KeyPromptPool& trained = trained_pool();
  KeyPromptPool again = initial;
  (void)train_prompts(bb, again, TrainConfig::desk_prompt());
  bool same_prompts = true;
  for (int i = 0; i < again.size(); ++i) same_prompts = same_prompts && again.prompt(i).value == trained.prompt(i).value;
  check(same_prompts, "train");

  // Evaluation.
  std::vector<Instance> insts;
  for (std::size_t i = 0; i < 40; ++i) insts.push_back(mixed_instance("determinism-eval", i));
  const std::vector<double> baselines(insts.size(), 1.0);
  const std::vector<SolveOptions> modes = {mode(SolveMode::kGreedy), mode(SolveMode::kTopKAug, 4)};
  const json r1 = run_benchmark(insts, baselines, modes, bb, &trained).to_json();
  const json r2 = run_benchmark(insts, baselines, modes, bb, &trained).to_json();
  auto strip_time = [](json r) {
    for (auto& row : r["rows"]) row.erase("seconds");
    for (auto& s : r["summary"]) s.erase("total_seconds");
    return r;
  };
  check(strip_time(r1) == strip_time(r2), "eval");

  std::string detail = "gen, pretrain (3 epochs, 1 and 3 threads), build-keys, train, eval";
  if (!failed.empty()) {
    detail += "; differing:";
    for (const auto& f : failed) detail += " " + f;
  }
  return {failed.empty(), detail};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app("acceptance checks");
  std::string workdir = (fs::temp_directory_path() / "promptroute-acceptance").string();
  bool reuse = false;
  std::vector<int> only;
  unsigned threads = 0;
  app.add_option("--workdir", workdir, "artifact directory");
  app.add_flag("--reuse", reuse, "load backbone and trained pool from the workdir when present");
  app.add_option("--only", only, "criteria to run")->check(CLI::Range(1, 14));
  app.add_option("--threads", threads, "worker threads");
  CLI11_PARSE(app, argc, argv);
  if (threads > 0) set_max_threads(threads);

  Acceptance a(workdir, reuse);
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"structural constants", [&] { return a.structural(); }},
      {"feasibility sweep", [&] { return a.feasibility(); }},
      {"gradient fidelity", [&] { return a.gradients(); }},
      {"attention oracle", [&] { return a.attention_oracle(); }},
      {"empty-prompt equivalence", [&] { return a.empty_prompt(); }},
      {"token-count law", [&] { return a.token_counts(); }},
      {"clipping and masking", [&] { return a.clip_and_mask(); }},
      {"mode dominance", [&] { return a.mode_dominance(); }},
      {"oracle optimality gap", [&] { return a.optimality_gap(); }},
      {"desk trainability", [&] { return a.trainability(); }},
      {"prompt adaptation effect", [&] { return a.adaptation(); }},
      {"selected-only updates, frozen backbone", [&] { return a.selected_only(); }},
      {"cvrplib fidelity", [&] { return a.cvrplib(); }},
      {"determinism", [&] { return a.determinism(); }},
  };
  int failures = 0;
  for (std::size_t c = 0; c < criteria.size(); ++c) {
    const int id = static_cast<int>(c) + 1;
    if (!only.empty() && std::find(only.begin(), only.end(), id) == only.end()) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = criteria[c].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    failures += !o.pass;
    std::printf("criterion %2d %s  %s: %s (%.1f s)\n", id, o.pass ? "PASS" : "FAIL", criteria[c].first.c_str(),
                o.detail.c_str(), secs);
    std::fflush(stdout);
  }
  return failures == 0 ? 0 : 1;
}
