#pragma once

#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "promptroute/cvrp.hpp"
#include "promptroute/model.hpp"
#include "promptroute/prompt_pool.hpp"

namespace promptroute {

enum class SolveMode { kGreedy, kAug8, kTopK, kTopKAug };

SolveMode parse_solve_mode(std::string_view name);
std::string_view solve_mode_name(SolveMode mode);

struct SolveOptions {
  SolveMode mode = SolveMode::kGreedy;
  int k = 8;                // prompts tried by the top-k modes
  bool use_prompt = false;  // greedy/aug8 with the best-matched prompt

  bool prompted() const;
  // "greedy", "greedy+prompt", "aug8", "topk(8)", "topk_aug(8)", ...
  std::string label() const;
};

struct SolveResult {
  Solution solution;          // on the input instance, normalized units
  std::vector<int> matched;   // prompt indices tried, nearest first
  int prompt = -1;            // prompt behind the returned solution
  int transform = 0;          // dihedral copy behind the returned solution
  double seconds = 0.0;
};

// Best of the n-start greedy rollouts over every (prompt, transform) pair the
// mode allows. The prompt is matched once, on the untransformed instance.
// Throws kMissingArtifact for a prompted mode without a pool.
SolveResult solve(const Instance& instance, const ModelParams& backbone,
                  const KeyPromptPool* pool, const SolveOptions& options);

// Nearest feasible customer next; back to the depot when nothing fits.
Solution nearest_neighbor(const Instance& instance);

struct EvalRow {
  std::string id;
  std::string distribution;
  int n = 0;
  std::string method;
  double cost = 0.0;      // source units (normalized cost times scale)
  double baseline = 0.0;
  double gap = 0.0;       // (cost - baseline) / baseline
  double seconds = 0.0;
  int prompt = -1;
};

struct EvalSummary {
  std::string method;
  int count = 0;
  double mean_cost = 0.0;
  double mean_gap = 0.0;
  double total_seconds = 0.0;
};

struct EvalReport {
  std::vector<EvalRow> rows;
  std::vector<EvalSummary> summaries;  // one per method, in request order
  // Fraction of instances whose nearest key is i; empty without a pool.
  std::vector<double> prompt_histogram;

  nlohmann::json to_json() const;
  static EvalReport from_json(const nlohmann::json& j);
  // Aligned columns: Method, Dis., Gap, Time.
  std::string to_table() const;
};

// Baseline costs are in source units, one per instance. Rows are grouped by
// method in the order of `modes`, instances in input order.
EvalReport run_benchmark(std::span<const Instance> instances, std::span<const double> baselines,
                         std::span<const SolveOptions> modes, const ModelParams& backbone,
                         const KeyPromptPool* pool);

}  // namespace promptroute
