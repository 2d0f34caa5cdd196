#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <utility>
#include <vector>

#include "json.hpp"
#include "promptroute/autodiff.hpp"
#include "promptroute/cvrp.hpp"
#include "promptroute/instance_gen.hpp"
#include "promptroute/model.hpp"

namespace promptroute {

using FeatureRow = Eigen::RowVectorXd;

struct Scaler {
  FeatureRow mean;
  FeatureRow stddev;

  bool empty() const { return mean.size() == 0; }
  FeatureRow apply(const FeatureRow& raw) const;
};

inline constexpr double kScalerStdFloor = 1e-8;

// Per-coordinate mean and population standard deviation (floored at 1e-8).
// Needs at least two features.
Scaler fit_scaler(std::span<const FeatureRow> features);

// Layer-wise token means of the pre-norm residual sums, concatenated: length
// layers * embed. Computed from an encoding already on `g`.
FeatureRow feature_from_encoding(const ad::Graph& g, const EncoderOutput& encoded);

// Raw feature from the plain (unprompted) backbone.
FeatureRow extract_feature(const ModelParams& params, const Instance& instance);
// Standardized with `scaler`; throws kUnstandardizedFeature when it is null or
// empty.
FeatureRow extract_feature(const ModelParams& params, const Instance& instance,
                           const Scaler* scaler);

// Equal-width partition of [min_size, max_size] into `count` groups.
struct SizeGroups {
  int min_size = 50;
  int max_size = 200;
  int count = 4;

  int group_of(int n) const;
  std::vector<std::pair<int, int>> bounds() const;
};

struct KMeansResult {
  ad::Matrix centers;           // k x d, each the mean of its members
  std::vector<int> assignment;  // cluster per point
  int iterations = 0;
  bool converged = false;
};

// Lloyd's algorithm with k-means++ seeding. Stops when no center moves by more
// than `tolerance`; empty clusters are reseeded with the point farthest from
// its center.
KMeansResult kmeans(const ad::Matrix& points, int k, std::uint64_t seed, int max_iterations = 200,
                    double tolerance = 1e-7);

// Instances sampled for key building: `per_distribution` instances for every
// (size, geometric setting) pair.
struct KeyPlan {
  std::vector<int> sizes;
  int per_distribution = 8;

  static KeyPlan paper();  // sizes 50..200 step 5, 128 each
  static KeyPlan desk();   // sizes 10..20 step 2, 8 each
  std::vector<DistributionSpec> specs() const;
  SizeGroups groups() const;
};

struct KeyBuild {
  ad::Matrix keys;  // M x (layers * embed), group-major
  Scaler scaler;
  SizeGroups groups;
  int clusters_per_group = 0;
  std::vector<FeatureRow> features;  // standardized, in plan order
  std::vector<int> feature_group;
  std::vector<std::vector<int>> assignments;  // per group, over its members
};

KeyBuild build_keys(const ModelParams& params, const KeyPlan& plan, int clusters_per_group,
                    std::uint64_t seed);

// M prompts of length D * layers * embed, i.i.d. U(-range, range).
std::vector<ad::Tensor> init_prompts(int count, int prompt_tokens, const ModelConfig& config,
                                     std::uint64_t seed, double range = 1.0);

// Desk backbones are small and see few nodes per instance; full-range prompt
// tokens swamp them before training can start.
inline constexpr double kDeskPromptRange = 0.01;

struct KeyMatch {
  int index = 0;
  double distance = 0.0;
};

// The k nearest rows of `keys` to `feature` by Euclidean distance, ascending,
// ties to the lower index.
std::vector<KeyMatch> match_keys(const ad::Matrix& keys, const FeatureRow& feature, int k);

// M (key, prompt) pairs. Keys and scaler are fixed at construction; only
// prompt values can change afterwards.
class KeyPromptPool {
 public:
  KeyPromptPool() = default;
  KeyPromptPool(ad::Matrix keys, Scaler scaler, SizeGroups groups, int clusters_per_group,
                int prompt_tokens, ModelConfig model, std::vector<ad::Tensor> prompts,
                nlohmann::json info = nlohmann::json::object());

  int size() const { return static_cast<int>(keys_.rows()); }
  int prompt_tokens() const { return prompt_tokens_; }
  int clusters_per_group() const { return clusters_per_group_; }
  const ad::Matrix& keys() const { return keys_; }
  const Scaler& scaler() const { return scaler_; }
  const SizeGroups& groups() const { return groups_; }
  const ModelConfig& model() const { return model_; }
  const nlohmann::json& info() const { return info_; }

  ad::Tensor& prompt(int i);
  const ad::Tensor& prompt(int i) const;
  std::vector<ad::Tensor>& prompts() { return prompts_; }
  const std::vector<ad::Tensor>& prompts() const { return prompts_; }

  std::vector<KeyMatch> match(const FeatureRow& standardized, int k) const;
  // Standardized feature of `instance` under `params`, then match.
  std::vector<KeyMatch> match_instance(const ModelParams& params, const Instance& instance,
                                       int k) const;

  std::uint64_t keys_hash() const;

  void save(const std::filesystem::path& stem) const;
  static KeyPromptPool load(const std::filesystem::path& stem);

 private:
  ad::Matrix keys_;
  Scaler scaler_;
  SizeGroups groups_;
  int clusters_per_group_ = 0;
  int prompt_tokens_ = 0;
  ModelConfig model_;
  std::vector<ad::Tensor> prompts_;
  nlohmann::json info_;
};

}  // namespace promptroute
