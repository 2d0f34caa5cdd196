#include "promptroute/evaluator.hpp"

#include <chrono>
#include <cstdio>
#include <limits>
#include <sstream>

#include "promptroute/error.hpp"
#include "promptroute/instance_gen.hpp"
#include "promptroute/parallel.hpp"

namespace promptroute {

using nlohmann::json;

SolveMode parse_solve_mode(std::string_view name) {
  if (name == "greedy") return SolveMode::kGreedy;
  if (name == "aug8") return SolveMode::kAug8;
  if (name == "topk") return SolveMode::kTopK;
  if (name == "topk_aug") return SolveMode::kTopKAug;
  throw Error(ErrorCode::kConfig, "unknown solve mode '" + std::string(name) +
                                      "' (greedy, aug8, topk, topk_aug)");
}

std::string_view solve_mode_name(SolveMode mode) {
  switch (mode) {
    case SolveMode::kGreedy: return "greedy";
    case SolveMode::kAug8: return "aug8";
    case SolveMode::kTopK: return "topk";
    case SolveMode::kTopKAug: return "topk_aug";
  }
  return "?";
}

bool SolveOptions::prompted() const {
  return use_prompt || mode == SolveMode::kTopK || mode == SolveMode::kTopKAug;
}

std::string SolveOptions::label() const {
  std::string s(solve_mode_name(mode));
  if (mode == SolveMode::kTopK || mode == SolveMode::kTopKAug) return s + "(" + std::to_string(k) + ")";
  if (use_prompt) s += "+prompt";
  return s;
}

SolveResult solve(const Instance& instance, const ModelParams& backbone,
                  const KeyPromptPool* pool, const SolveOptions& options) {
  const auto t0 = std::chrono::steady_clock::now();
  SolveResult out;
  std::vector<int> prompts{-1};
  if (options.prompted()) {
    if (!pool) throw Error(ErrorCode::kMissingArtifact, options.label() + " needs a prompt pool");
    const bool topk = options.mode == SolveMode::kTopK || options.mode == SolveMode::kTopKAug;
    const int k = topk ? options.k : 1;
    if (k < 1) throw Error(ErrorCode::kConfig, "k must be >= 1");
    prompts.clear();
    for (const auto& m : pool->match_instance(backbone, instance, k)) prompts.push_back(m.index);
    out.matched = prompts;
  }
  const bool aug = options.mode == SolveMode::kAug8 || options.mode == SolveMode::kTopKAug;
  std::vector<Instance> copies;
  if (aug) {
    auto all = augment_x8(instance);
    copies.assign(all.begin(), all.end());
  } else {
    copies.push_back(instance);
  }

  RolloutOptions greedy;
  greedy.mode = DecodeMode::kGreedy;
  out.solution.cost = std::numeric_limits<double>::infinity();
  for (int p : prompts) {
    const ad::Tensor* prompt = p >= 0 ? &pool->prompt(p) : nullptr;
    const int tokens = p >= 0 ? pool->prompt_tokens() : 0;
    for (std::size_t t = 0; t < copies.size(); ++t) {
      const RolloutResult r = infer(backbone, copies[t], prompt, tokens, greedy);
      for (const auto& traj : r.trajectories) {
        // Index-based routes carry over to the original instance unchanged.
        Solution sol = make_solution(instance, traj.solution.routes);
        if (sol.cost < out.solution.cost) {
          out.solution = std::move(sol);
          out.prompt = p;
          out.transform = static_cast<int>(t);
        }
      }
    }
  }
  out.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return out;
}

Solution nearest_neighbor(const Instance& instance) {
  const int n = static_cast<int>(instance.num_customers());
  std::vector<bool> visited(static_cast<std::size_t>(n) + 1, false);
  std::vector<Route> routes;
  Route current;
  int load = 0, at = 0, left = n;
  while (left > 0) {
    int best = -1;
    double best_d = std::numeric_limits<double>::infinity();
    for (int c = 1; c <= n; ++c) {
      if (visited[static_cast<std::size_t>(c)] || load + instance.demand(c) > instance.capacity)
        continue;
      const double d = distance(instance.node(at), instance.node(c));
      if (d < best_d) {
        best_d = d;
        best = c;
      }
    }
    if (best < 0) {
      routes.push_back(std::move(current));
      current.clear();
      load = 0;
      at = 0;
      continue;
    }
    visited[static_cast<std::size_t>(best)] = true;
    current.push_back(best);
    load += instance.demand(best);
    at = best;
    --left;
  }
  if (!current.empty()) routes.push_back(std::move(current));
  return make_solution(instance, std::move(routes));
}

json EvalReport::to_json() const {
  json rows_j = json::array();
  for (const auto& r : rows)
    rows_j.push_back({{"id", r.id},
                      {"distribution", r.distribution},
                      {"n", r.n},
                      {"method", r.method},
                      {"cost", r.cost},
                      {"baseline", r.baseline},
                      {"gap_percent", 100.0 * r.gap},
                      {"seconds", r.seconds},
                      {"prompt", r.prompt}});
  json sums = json::array();
  for (const auto& s : summaries)
    sums.push_back({{"method", s.method},
                    {"count", s.count},
                    {"mean_cost", s.mean_cost},
                    {"mean_gap_percent", 100.0 * s.mean_gap},
                    {"total_seconds", s.total_seconds}});
  return {{"rows", rows_j}, {"summary", sums}, {"prompt_histogram", prompt_histogram}};
}

EvalReport EvalReport::from_json(const json& j) {
  EvalReport r;
  try {
    for (const auto& row : j.at("rows"))
      r.rows.push_back({row.at("id").get<std::string>(), row.at("distribution").get<std::string>(),
                        row.at("n").get<int>(), row.at("method").get<std::string>(),
                        row.at("cost").get<double>(), row.at("baseline").get<double>(),
                        row.at("gap_percent").get<double>() / 100.0,
                        row.at("seconds").get<double>(), row.at("prompt").get<int>()});
    for (const auto& s : j.at("summary"))
      r.summaries.push_back({s.at("method").get<std::string>(), s.at("count").get<int>(),
                             s.at("mean_cost").get<double>(),
                             s.at("mean_gap_percent").get<double>() / 100.0,
                             s.at("total_seconds").get<double>()});
    r.prompt_histogram = j.at("prompt_histogram").get<std::vector<double>>();
  } catch (const json::exception& e) {
    throw Error(ErrorCode::kParse, std::string("report json: ") + e.what());
  }
  return r;
}

std::string EvalReport::to_table() const {
  std::size_t width = 6;
  for (const auto& s : summaries) width = std::max(width, s.method.size());
  std::ostringstream out;
  char buf[160];
  std::snprintf(buf, sizeof buf, "%-*s %12s %9s %10s\n", static_cast<int>(width), "Method", "Dis.",
                "Gap", "Time");
  out << buf;
  for (const auto& s : summaries) {
    std::snprintf(buf, sizeof buf, "%-*s %12.4f %8.3f%% %9.2fs\n", static_cast<int>(width),
                  s.method.c_str(), s.mean_cost, 100.0 * s.mean_gap, s.total_seconds);
    out << buf;
  }
  return out.str();
}

EvalReport run_benchmark(std::span<const Instance> instances, std::span<const double> baselines,
                         std::span<const SolveOptions> modes, const ModelParams& backbone,
                         const KeyPromptPool* pool) {
  if (baselines.size() != instances.size())
    throw Error(ErrorCode::kMissingBaseline,
                "got " + std::to_string(baselines.size()) + " baselines for " +
                    std::to_string(instances.size()) + " instances");
  for (std::size_t i = 0; i < baselines.size(); ++i)
    if (!(baselines[i] > 0.0))
      throw Error(ErrorCode::kMissingBaseline, "no positive baseline for '" + instances[i].id + "'");
  for (const auto& m : modes)
    if (m.prompted() && !pool)
      throw Error(ErrorCode::kMissingArtifact, m.label() + " needs a prompt pool");

  EvalReport report;
  std::vector<int> nearest(instances.size(), -1);
  for (const auto& mode : modes) {
    std::vector<SolveResult> results(instances.size());
    parallel_for(instances.size(),
                 [&](std::size_t i) { results[i] = solve(instances[i], backbone, pool, mode); });
    EvalSummary sum;
    sum.method = mode.label();
    for (std::size_t i = 0; i < instances.size(); ++i) {
      const auto& inst = instances[i];
      EvalRow row;
      row.id = inst.id;
      row.distribution = inst.meta;
      row.n = static_cast<int>(inst.num_customers());
      row.method = sum.method;
      row.cost = results[i].solution.cost * inst.scale;
      row.baseline = baselines[i];
      row.gap = (row.cost - row.baseline) / row.baseline;
      row.seconds = results[i].seconds;
      row.prompt = results[i].prompt;
      if (!results[i].matched.empty()) nearest[i] = results[i].matched.front();
      sum.mean_cost += row.cost;
      sum.mean_gap += row.gap;
      sum.total_seconds += row.seconds;
      ++sum.count;
      report.rows.push_back(std::move(row));
    }
    if (sum.count > 0) {
      sum.mean_cost /= sum.count;
      sum.mean_gap /= sum.count;
    }
    report.summaries.push_back(sum);
  }

  if (pool && !instances.empty()) {
    parallel_for(instances.size(), [&](std::size_t i) {
      if (nearest[i] < 0) nearest[i] = pool->match_instance(backbone, instances[i], 1).front().index;
    });
    report.prompt_histogram.assign(static_cast<std::size_t>(pool->size()), 0.0);
    for (int p : nearest) report.prompt_histogram[static_cast<std::size_t>(p)] += 1.0;
    for (auto& f : report.prompt_histogram) f /= static_cast<double>(instances.size());
  }
  return report;
}

}  // namespace promptroute
