#include "promptroute/prompt_pool.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "promptroute/checkpoint.hpp"
#include "promptroute/error.hpp"
#include "promptroute/parallel.hpp"

namespace promptroute {

using ad::Index;
using ad::Matrix;
using nlohmann::json;

FeatureRow Scaler::apply(const FeatureRow& raw) const {
  if (empty()) throw Error(ErrorCode::kUnstandardizedFeature, "no scaler fitted");
  if (raw.size() != mean.size())
    throw Error(ErrorCode::kShapeMismatch, "feature length " + std::to_string(raw.size()) +
                                               " does not match scaler length " +
                                               std::to_string(mean.size()));
  return ((raw - mean).array() / stddev.array()).matrix();
}

Scaler fit_scaler(std::span<const FeatureRow> features) {
  if (features.size() < 2)
    throw Error(ErrorCode::kEmptySet, "fit_scaler needs at least two features");
  const Index d = features[0].size();
  Scaler s;
  s.mean = FeatureRow::Zero(d);
  for (const auto& f : features) {
    if (f.size() != d) throw Error(ErrorCode::kShapeMismatch, "features differ in length");
    s.mean += f;
  }
  s.mean /= static_cast<double>(features.size());
  FeatureRow var = FeatureRow::Zero(d);
  for (const auto& f : features) var += (f - s.mean).array().square().matrix();
  var /= static_cast<double>(features.size());
  s.stddev = var.array().sqrt().max(kScalerStdFloor).matrix();
  return s;
}

FeatureRow feature_from_encoding(const ad::Graph& g, const EncoderOutput& encoded) {
  const std::size_t L = encoded.residual_sums.size();
  if (L == 0) return {};
  const Index E = g.value(encoded.residual_sums[0]).cols();
  FeatureRow f(static_cast<Index>(L) * E);
  for (std::size_t l = 0; l < L; ++l)
    f.segment(static_cast<Index>(l) * E, E) = g.value(encoded.residual_sums[l]).colwise().mean();
  return f;
}

FeatureRow extract_feature(const ModelParams& params, const Instance& instance) {
  ad::Graph g(false);
  const BoundModel model = bind(g, params);
  return feature_from_encoding(g, encoder_forward(g, model, instance));
}

FeatureRow extract_feature(const ModelParams& params, const Instance& instance,
                           const Scaler* scaler) {
  if (!scaler || scaler->empty())
    throw Error(ErrorCode::kUnstandardizedFeature, "standardization requested without a scaler");
  return scaler->apply(extract_feature(params, instance));
}

int SizeGroups::group_of(int n) const {
  const long span = static_cast<long>(max_size) - min_size + 1;
  const long g = (static_cast<long>(n) - min_size) * count / span;
  return static_cast<int>(std::clamp<long>(g, 0, count - 1));
}

std::vector<std::pair<int, int>> SizeGroups::bounds() const {
  std::vector<std::pair<int, int>> out(static_cast<std::size_t>(count), {0, -1});
  for (int n = min_size; n <= max_size; ++n) {
    auto& b = out[static_cast<std::size_t>(group_of(n))];
    if (b.second < b.first) b.first = n;
    b.second = n;
  }
  return out;
}

namespace {

double squared_distance(const Matrix& a, Index i, const Matrix& b, Index j) {
  return (a.row(i) - b.row(j)).squaredNorm();
}

}  // namespace

KMeansResult kmeans(const Matrix& points, int k, std::uint64_t seed, int max_iterations,
                    double tolerance) {
  const Index n = points.rows();
  if (k < 1) throw Error(ErrorCode::kOutOfRange, "k-means needs k >= 1");
  if (n < k)
    throw Error(ErrorCode::kGroupTooSmall, "k-means with k=" + std::to_string(k) + " on " +
                                               std::to_string(n) + " points");
  Rng rng = Rng::stream(seed, {"kmeans"});

  // k-means++ seeding.
  Matrix centers(k, points.cols());
  centers.row(0) = points.row(rng.uniform_int(0, n - 1));
  std::vector<double> nearest(static_cast<std::size_t>(n), std::numeric_limits<double>::infinity());
  for (int c = 1; c < k; ++c) {
    double total = 0;
    for (Index i = 0; i < n; ++i) {
      auto& d = nearest[static_cast<std::size_t>(i)];
      d = std::min(d, squared_distance(points, i, centers, c - 1));
      total += d;
    }
    Index pick = n - 1;
    if (total > 0) {
      const double u = rng.uniform() * total;
      double acc = 0;
      for (Index i = 0; i < n; ++i) {
        acc += nearest[static_cast<std::size_t>(i)];
        if (u < acc) {
          pick = i;
          break;
        }
      }
    } else {
      pick = rng.uniform_int(0, n - 1);
    }
    centers.row(c) = points.row(pick);
  }

  KMeansResult r;
  r.assignment.assign(static_cast<std::size_t>(n), 0);
  auto assign = [&](std::vector<int>& out) {
    for (Index i = 0; i < n; ++i) {
      int best = 0;
      double bd = std::numeric_limits<double>::infinity();
      for (int c = 0; c < k; ++c) {
        const double d = squared_distance(points, i, centers, c);
        if (d < bd) {
          bd = d;
          best = c;
        }
      }
      out[static_cast<std::size_t>(i)] = best;
    }
  };

  std::vector<int> labels(static_cast<std::size_t>(n));
  for (r.iterations = 1; r.iterations <= max_iterations; ++r.iterations) {
    assign(labels);
    Matrix next = Matrix::Zero(k, points.cols());
    std::vector<int> counts(static_cast<std::size_t>(k), 0);
    for (Index i = 0; i < n; ++i) {
      next.row(labels[static_cast<std::size_t>(i)]) += points.row(i);
      ++counts[static_cast<std::size_t>(labels[static_cast<std::size_t>(i)])];
    }
    bool reseeded = false;
    for (int c = 0; c < k; ++c) {
      if (counts[static_cast<std::size_t>(c)] > 0) continue;
      // Empty cluster: take the point farthest from its center.
      Index far = -1;
      double fd = -1;
      for (Index i = 0; i < n; ++i) {
        const int li = labels[static_cast<std::size_t>(i)];
        if (counts[static_cast<std::size_t>(li)] <= 1) continue;
        const double d = squared_distance(points, i, centers, li);
        if (d > fd) {
          fd = d;
          far = i;
        }
      }
      --counts[static_cast<std::size_t>(labels[static_cast<std::size_t>(far)])];
      labels[static_cast<std::size_t>(far)] = c;
      counts[static_cast<std::size_t>(c)] = 1;
      reseeded = true;
    }
    if (reseeded) {
      next.setZero();
      for (Index i = 0; i < n; ++i) next.row(labels[static_cast<std::size_t>(i)]) += points.row(i);
    }
    for (int c = 0; c < k; ++c) next.row(c) /= static_cast<double>(counts[static_cast<std::size_t>(c)]);
    double shift = 0;
    for (int c = 0; c < k; ++c) shift = std::max(shift, (next.row(c) - centers.row(c)).norm());
    centers = std::move(next);
    r.assignment = labels;
    if (shift < tolerance && !reseeded) {
      r.converged = true;
      break;
    }
  }
  r.iterations = std::min(r.iterations, max_iterations);
  r.centers = std::move(centers);
  return r;
}

KeyPlan KeyPlan::paper() {
  KeyPlan p;
  for (int n = 50; n <= 200; n += 5) p.sizes.push_back(n);
  p.per_distribution = 128;
  return p;
}

KeyPlan KeyPlan::desk() {
  KeyPlan p;
  for (int n = 10; n <= 20; n += 2) p.sizes.push_back(n);
  p.per_distribution = 8;
  return p;
}

std::vector<DistributionSpec> KeyPlan::specs() const { return training_schedule(sizes); }

SizeGroups KeyPlan::groups() const {
  if (sizes.empty()) throw Error(ErrorCode::kConfig, "key plan has no sizes");
  SizeGroups g;
  g.min_size = *std::min_element(sizes.begin(), sizes.end());
  g.max_size = *std::max_element(sizes.begin(), sizes.end());
  g.count = 4;
  return g;
}

KeyBuild build_keys(const ModelParams& params, const KeyPlan& plan, int clusters_per_group,
                    std::uint64_t seed) {
  if (plan.per_distribution < 1) throw Error(ErrorCode::kConfig, "key plan needs instances");
  KeyBuild kb;
  kb.groups = plan.groups();
  kb.clusters_per_group = clusters_per_group;

  std::vector<Instance> instances;
  for (DistributionSpec spec : plan.specs())
    for (int i = 0; i < plan.per_distribution; ++i) {
      spec.stream = "keys/" + std::to_string(i);
      instances.push_back(gen_instance(spec, seed));
    }

  std::vector<FeatureRow> raw(instances.size());
  parallel_for(instances.size(), [&](std::size_t i) { raw[i] = extract_feature(params, instances[i]); });
  kb.scaler = fit_scaler(raw);
  kb.features.reserve(raw.size());
  for (const auto& f : raw) kb.features.push_back(kb.scaler.apply(f));
  for (const auto& inst : instances)
    kb.feature_group.push_back(kb.groups.group_of(static_cast<int>(inst.num_customers())));

  const Index d = kb.features.empty() ? 0 : kb.features[0].size();
  kb.keys = Matrix(static_cast<Index>(kb.groups.count) * clusters_per_group, d);
  for (int g = 0; g < kb.groups.count; ++g) {
    std::vector<std::size_t> members;
    for (std::size_t i = 0; i < kb.features.size(); ++i)
      if (kb.feature_group[i] == g) members.push_back(i);
    if (static_cast<int>(members.size()) < clusters_per_group)
      throw Error(ErrorCode::kGroupTooSmall,
                  "size group " + std::to_string(g) + " has " + std::to_string(members.size()) +
                      " samples, fewer than " + std::to_string(clusters_per_group) + " clusters");
    Matrix pts(static_cast<Index>(members.size()), d);
    for (std::size_t r = 0; r < members.size(); ++r) pts.row(static_cast<Index>(r)) = kb.features[members[r]];
    KMeansResult km = kmeans(pts, clusters_per_group,
                             Rng::stream(seed, {"keys", "group", std::to_string(g)}).next_u64());
    kb.keys.middleRows(static_cast<Index>(g) * clusters_per_group, clusters_per_group) = km.centers;
    kb.assignments.push_back(std::move(km.assignment));
  }
  return kb;
}

std::vector<ad::Tensor> init_prompts(int count, int prompt_tokens, const ModelConfig& config,
                                     std::uint64_t seed, double range) {
  if (count < 1 || prompt_tokens < 0) throw Error(ErrorCode::kConfig, "bad prompt pool shape");
  if (!(range > 0.0)) throw Error(ErrorCode::kConfig, "prompt init range must be positive");
  std::vector<ad::Tensor> out;
  const auto len = static_cast<Index>(prompt_length(config, prompt_tokens));
  for (int i = 0; i < count; ++i) {
    Rng rng = Rng::stream(seed, {"prompt-init", std::to_string(i)});
    Matrix m(1, len);
    for (Index j = 0; j < len; ++j) m(0, j) = rng.uniform(-range, range);
    out.emplace_back("prompt." + std::to_string(i), std::move(m));
  }
  return out;
}

std::vector<KeyMatch> match_keys(const Matrix& keys, const FeatureRow& feature, int k) {
  const int M = static_cast<int>(keys.rows());
  if (k < 1 || k > M)
    throw Error(ErrorCode::kOutOfRange,
                "k=" + std::to_string(k) + " outside [1, " + std::to_string(M) + "]");
  if (feature.size() != keys.cols())
    throw Error(ErrorCode::kShapeMismatch, "feature length does not match key length");
  std::vector<KeyMatch> all(static_cast<std::size_t>(M));
  for (int j = 0; j < M; ++j) all[static_cast<std::size_t>(j)] = {j, (keys.row(j) - feature).norm()};
  std::partial_sort(all.begin(), all.begin() + k, all.end(), [](const KeyMatch& a, const KeyMatch& b) {
    return a.distance < b.distance || (a.distance == b.distance && a.index < b.index);
  });
  all.resize(static_cast<std::size_t>(k));
  return all;
}

KeyPromptPool::KeyPromptPool(Matrix keys, Scaler scaler, SizeGroups groups, int clusters_per_group,
                             int prompt_tokens, ModelConfig model, std::vector<ad::Tensor> prompts,
                             json info)
    : keys_(std::move(keys)),
      scaler_(std::move(scaler)),
      groups_(groups),
      clusters_per_group_(clusters_per_group),
      prompt_tokens_(prompt_tokens),
      model_(model),
      prompts_(std::move(prompts)),
      info_(std::move(info)) {
  if (static_cast<Index>(prompts_.size()) != keys_.rows())
    throw Error(ErrorCode::kShapeMismatch, "pool needs one prompt per key");
  if (keys_.cols() != static_cast<Index>(model_.layers) * model_.embed)
    throw Error(ErrorCode::kShapeMismatch, "key length does not match layers * embed");
  if (scaler_.mean.size() != keys_.cols())
    throw Error(ErrorCode::kUnstandardizedFeature, "pool scaler does not match key length");
  const auto len = prompt_length(model_, prompt_tokens_);
  for (const auto& p : prompts_)
    if (p.value.size() != len)
      throw Error(ErrorCode::kWrongPromptLength, "prompt '" + p.name + "' has wrong length");
}

ad::Tensor& KeyPromptPool::prompt(int i) {
  if (i < 0 || i >= size()) throw Error(ErrorCode::kOutOfRange, "prompt index out of range");
  return prompts_[static_cast<std::size_t>(i)];
}

const ad::Tensor& KeyPromptPool::prompt(int i) const {
  return const_cast<KeyPromptPool*>(this)->prompt(i);
}

std::vector<KeyMatch> KeyPromptPool::match(const FeatureRow& standardized, int k) const {
  return match_keys(keys_, standardized, k);
}

std::vector<KeyMatch> KeyPromptPool::match_instance(const ModelParams& params,
                                                    const Instance& instance, int k) const {
  return match(extract_feature(params, instance, &scaler_), k);
}

std::uint64_t KeyPromptPool::keys_hash() const {
  std::uint64_t h = fnv1a64(keys_.data(), static_cast<std::size_t>(keys_.size()) * sizeof(double));
  h = fnv1a64(scaler_.mean.data(), static_cast<std::size_t>(scaler_.mean.size()) * sizeof(double), h);
  return fnv1a64(scaler_.stddev.data(),
                 static_cast<std::size_t>(scaler_.stddev.size()) * sizeof(double), h);
}

void KeyPromptPool::save(const std::filesystem::path& stem) const {
  ad::Tensor keys("keys", keys_, false);
  ad::Tensor mean("scaler.mean", scaler_.mean, false);
  ad::Tensor sd("scaler.std", scaler_.stddev, false);
  std::vector<const ad::Tensor*> tensors{&keys, &mean, &sd};
  for (const auto& p : prompts_) tensors.push_back(&p);
  json groups = json::array();
  for (auto [lo, hi] : groups_.bounds()) groups.push_back({lo, hi});
  json meta = {{"M", size()},
               {"D", prompt_tokens_},
               {"N", clusters_per_group_},
               {"size_range", {groups_.min_size, groups_.max_size}},
               {"group_count", groups_.count},
               {"group_bounds", groups},
               {"model", config_to_json(model_)},
               {"keys_hash", hex64(keys_hash())},
               {"info", info_}};
  save_tensors(stem, tensors, meta);
}

KeyPromptPool KeyPromptPool::load(const std::filesystem::path& stem) {
  TensorFile f = load_tensors(stem);
  try {
    const auto& m = f.meta;
    const int M = m.at("M").get<int>();
    const int D = m.at("D").get<int>();
    SizeGroups groups;
    groups.min_size = m.at("size_range").at(0).get<int>();
    groups.max_size = m.at("size_range").at(1).get<int>();
    groups.count = m.at("group_count").get<int>();
    ModelConfig model = config_from_json(m.at("model"));
    Scaler s;
    s.mean = f.at("scaler.mean");
    s.stddev = f.at("scaler.std");
    std::vector<ad::Tensor> prompts;
    for (int i = 0; i < M; ++i) {
      const std::string name = "prompt." + std::to_string(i);
      prompts.emplace_back(name, f.at(name));
    }
    KeyPromptPool pool(f.at("keys"), std::move(s), groups, m.at("N").get<int>(), D, model,
                       std::move(prompts), m.value("info", json::object()));
    if (hex64(pool.keys_hash()) != m.value("keys_hash", ""))
      throw Error(ErrorCode::kIo, stem.string() + ": keys hash mismatch");
    return pool;
  } catch (const json::exception& e) {
    throw Error(ErrorCode::kParse, stem.string() + ": bad pool manifest: " + e.what());
  }
}

}  // namespace promptroute
