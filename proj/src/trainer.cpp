#include "promptroute/trainer.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <set>

#include "promptroute/error.hpp"
#include "promptroute/parallel.hpp"

namespace promptroute {

using ad::Matrix;
using nlohmann::json;

double lr_at(int epoch, int total_epochs, double lr_start, double lr_end) {
  if (total_epochs < 1 || epoch < 1 || epoch > total_epochs)
    throw Error(ErrorCode::kOutOfRange, "epoch " + std::to_string(epoch) + " outside [1, " +
                                            std::to_string(total_epochs) + "]");
  if (total_epochs == 1 || epoch == 1 || lr_start == lr_end) return lr_start;
  if (epoch == total_epochs) return lr_end;
  const double t = static_cast<double>(epoch - 1) / static_cast<double>(total_epochs - 1);
  return lr_start * std::pow(lr_end / lr_start, t);
}

void adam_update(ad::Tensor& tensor, const Matrix& grad, double lr, AdamState& s,
                 const AdamConfig& c) {
  if (grad.rows() != tensor.value.rows() || grad.cols() != tensor.value.cols())
    throw Error(ErrorCode::kShapeMismatch, "gradient shape differs from '" + tensor.name + "'");
  if (s.m.size() == 0) {
    s.m = Matrix::Zero(grad.rows(), grad.cols());
    s.v = Matrix::Zero(grad.rows(), grad.cols());
  }
  ++s.step;
  s.m = c.beta1 * s.m + (1.0 - c.beta1) * grad;
  s.v = c.beta2 * s.v + (1.0 - c.beta2) * grad.cwiseProduct(grad);
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(s.step));
  const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(s.step));
  tensor.value.array() -=
      lr * (s.m.array() / bc1) / ((s.v.array() / bc2).sqrt() + c.eps);
}

int TrainConfig::batches_per_epoch() const {
  return std::max(1, instances_per_epoch / std::max(1, batch_size));
}

void TrainConfig::validate() const {
  if (batch_size < 1) throw Error(ErrorCode::kConfig, "batch_size must be >= 1");
  if (epochs < 1) throw Error(ErrorCode::kConfig, "epochs must be >= 1");
  if (instances_per_epoch < 1) throw Error(ErrorCode::kConfig, "instances_per_epoch must be >= 1");
  if (!(lr_end > 0.0) && !(lr_start == 0.0 && lr_end == 0.0))
    throw Error(ErrorCode::kConfig, "lr_end must be positive");
  if (lr_start < lr_end) throw Error(ErrorCode::kConfig, "lr_start must be >= lr_end");
  if (schedule.empty()) throw Error(ErrorCode::kConfig, "empty distribution schedule");
  for (const auto& s : schedule) s.validate();
  if (checkpoint_every < 0) throw Error(ErrorCode::kConfig, "checkpoint_every must be >= 0");
  if (rollout == DecodeMode::kForced) throw Error(ErrorCode::kConfig, "rollout must be greedy or sample");
}

TrainConfig TrainConfig::desk_pretrain() {
  TrainConfig c;
  c.mode = TrainMode::kPretrain;
  c.batch_size = 16;
  c.epochs = 100;
  c.instances_per_epoch = 320;
  c.lr_start = 2e-4;
  c.lr_end = 2e-5;
  c.schedule = {DistributionSpec::geometric(0, 0, 20)};
  c.rollout = DecodeMode::kSample;
  return c;
}

TrainConfig TrainConfig::paper_pretrain() {
  TrainConfig c = desk_pretrain();
  c.batch_size = 64;
  c.epochs = 2000;
  c.instances_per_epoch = 100000;
  c.lr_start = 1e-4;
  c.lr_end = 1e-4;
  c.schedule = {DistributionSpec::geometric(0, 0, 100)};
  return c;
}

TrainConfig TrainConfig::desk_prompt() {
  TrainConfig c;
  c.mode = TrainMode::kPrompt;
  c.batch_size = 16;
  c.epochs = 200;
  c.instances_per_epoch = 128;
  c.lr_start = 1e-3;
  c.lr_end = 1e-4;
  c.schedule = training_schedule(desk_training_sizes());
  c.rollout = DecodeMode::kGreedy;
  return c;
}

TrainConfig TrainConfig::paper_prompt() {
  TrainConfig c = desk_prompt();
  c.batch_size = 64;
  c.epochs = 10000;
  c.instances_per_epoch = 1000;
  c.lr_start = 1e-3;
  c.lr_end = 1e-5;
  c.schedule = training_schedule();
  return c;
}

namespace {

std::string_view decode_name(DecodeMode m) {
  switch (m) {
    case DecodeMode::kGreedy: return "greedy";
    case DecodeMode::kSample: return "sample";
    case DecodeMode::kForced: return "forced";
  }
  return "?";
}

DecodeMode parse_decode(const std::string& s) {
  if (s == "greedy") return DecodeMode::kGreedy;
  if (s == "sample") return DecodeMode::kSample;
  throw Error(ErrorCode::kConfig, "rollout must be 'greedy' or 'sample', got '" + s + "'");
}

json spec_to_json(const DistributionSpec& s) {
  json j = {{"kind", kind_name(s.kind)}, {"size", s.size}, {"stream", s.stream}};
  if (s.kind == DistKind::kGaussianMixture) {
    j["clusters"] = s.clusters;
    j["scale"] = s.scale;
  }
  return j;
}

DistributionSpec spec_from_json(const json& j) {
  for (const auto& [k, v] : j.items())
    if (k != "kind" && k != "size" && k != "clusters" && k != "scale" && k != "stream")
      throw Error(ErrorCode::kConfig, "unknown distribution key '" + k + "'");
  DistributionSpec s;
  s.kind = parse_kind(j.at("kind").get<std::string>());
  s.size = j.at("size").get<int>();
  s.clusters = j.value("clusters", 0);
  s.scale = j.value("scale", 0);
  s.stream = j.value("stream", s.stream);
  s.validate();
  return s;
}

}  // namespace

json train_config_to_json(const TrainConfig& c) {
  json sched = json::array();
  for (const auto& s : c.schedule) sched.push_back(spec_to_json(s));
  return {{"mode", c.mode == TrainMode::kPretrain ? "pretrain" : "prompt"},
          {"batch_size", c.batch_size},
          {"epochs", c.epochs},
          {"instances_per_epoch", c.instances_per_epoch},
          {"lr_start", c.lr_start},
          {"lr_end", c.lr_end},
          {"seed", c.seed},
          {"schedule", sched},
          {"rollout", decode_name(c.rollout)},
          {"checkpoint_every", c.checkpoint_every},
          {"adam", {{"beta1", c.adam.beta1}, {"beta2", c.adam.beta2}, {"eps", c.adam.eps}}}};
}

TrainConfig train_config_from_json(const json& j, TrainConfig c) {
  if (!j.is_object()) throw Error(ErrorCode::kConfig, "training config must be an object");
  try {
    for (const auto& [k, v] : j.items()) {
      if (k == "mode") {
        const auto m = v.get<std::string>();
        if (m != "pretrain" && m != "prompt") throw Error(ErrorCode::kConfig, "bad mode '" + m + "'");
        c.mode = m == "pretrain" ? TrainMode::kPretrain : TrainMode::kPrompt;
      } else if (k == "batch_size") {
        c.batch_size = v.get<int>();
      } else if (k == "epochs") {
        c.epochs = v.get<int>();
      } else if (k == "instances_per_epoch") {
        c.instances_per_epoch = v.get<int>();
      } else if (k == "lr_start") {
        c.lr_start = v.get<double>();
      } else if (k == "lr_end") {
        c.lr_end = v.get<double>();
      } else if (k == "seed") {
        c.seed = v.get<std::uint64_t>();
      } else if (k == "schedule") {
        c.schedule.clear();
        for (const auto& s : v) c.schedule.push_back(spec_from_json(s));
      } else if (k == "rollout") {
        c.rollout = parse_decode(v.get<std::string>());
      } else if (k == "checkpoint_every") {
        c.checkpoint_every = v.get<int>();
      } else if (k == "adam") {
        for (const auto& [ak, av] : v.items()) {
          if (ak == "beta1") c.adam.beta1 = av.get<double>();
          else if (ak == "beta2") c.adam.beta2 = av.get<double>();
          else if (ak == "eps") c.adam.eps = av.get<double>();
          else throw Error(ErrorCode::kConfig, "unknown adam key '" + ak + "'");
        }
      } else {
        throw Error(ErrorCode::kConfig, "unknown training key '" + k + "'");
      }
    }
  } catch (const json::exception& e) {
    throw Error(ErrorCode::kConfig, std::string("training config: ") + e.what());
  }
  c.validate();
  return c;
}

json BatchStats::to_json(int pool_size) const {
  json j = {{"epoch", epoch},       {"batch", batch},         {"distribution", distribution},
            {"mean_cost", mean_cost}, {"mean_best", mean_best}, {"baseline", baseline},
            {"loss", loss},         {"grad_norm", grad_norm}, {"lr", lr}};
  if (pool_size > 0) {
    std::vector<int> hist(static_cast<std::size_t>(pool_size), 0);
    for (int s : selected) ++hist[static_cast<std::size_t>(s)];
    j["selected_prompt_histogram"] = hist;
  }
  return j;
}

std::vector<Instance> training_batch(const TrainConfig& config, int epoch, int batch) {
  DistributionSpec spec = schedule_entry(config.schedule, epoch);
  std::vector<Instance> out;
  out.reserve(static_cast<std::size_t>(config.batch_size));
  for (int i = 0; i < config.batch_size; ++i) {
    spec.stream = "train/" + std::to_string(epoch) + "/" + std::to_string(batch) + "/" +
                  std::to_string(i);
    out.push_back(gen_instance(spec, config.seed));
  }
  return out;
}

namespace {

struct InstanceResult {
  ad::Gradients grads;
  double mean_cost = 0;
  double best_cost = 0;
  double baseline = 0;
  double loss = 0;
  int selected = -1;
};

InstanceResult instance_gradients(const Instance& inst, const ModelParams& params,
                                  const KeyPromptPool* pool, DecodeMode mode, Rng rng,
                                  double scale) {
  InstanceResult r;
  ad::Graph g(true);
  const BoundModel model = bind(g, params);
  EncoderOutput enc;
  if (pool) {
    r.selected = pool->match_instance(params, inst, 1).front().index;
    enc = prompted_encoder_forward(g, model, inst, g.leaf(pool->prompt(r.selected)),
                                   pool->prompt_tokens());
  } else {
    enc = encoder_forward(g, model, inst);
  }
  RolloutOptions opt;
  opt.mode = mode;
  opt.rng = &rng;
  RolloutResult roll = rollout(g, model, inst, enc, opt);

  const auto n = static_cast<double>(roll.trajectories.size());
  r.best_cost = std::numeric_limits<double>::infinity();
  for (const auto& t : roll.trajectories) {
    r.baseline += t.reward;
    r.mean_cost += t.solution.cost;
    r.best_cost = std::min(r.best_cost, t.solution.cost);
  }
  r.baseline /= n;
  r.mean_cost /= n;
  std::vector<double> weights;
  weights.reserve(roll.trajectories.size());
  for (const auto& t : roll.trajectories) weights.push_back(-(t.reward - r.baseline) * scale / n);
  const ad::Var loss = weighted_log_prob(g, roll.trace, weights);
  r.loss = g.scalar(loss);
  r.grads = g.backward(loss);
  return r;
}

void add_into(ad::Gradients& total, ad::Gradients&& part) {
  for (auto& [t, m] : part) {
    auto it = total.find(t);
    if (it == total.end())
      total.emplace(t, std::move(m));
    else
      it->second += m;
  }
}

}  // namespace

BatchGradients reinforce_gradients(const std::vector<Instance>& batch, const ModelParams& params,
                                   const KeyPromptPool* pool, DecodeMode mode,
                                   std::uint64_t rollout_seed) {
  if (batch.empty()) throw Error(ErrorCode::kEmptySet, "empty training batch");
  BatchGradients out;
  const double scale = 1.0 / static_cast<double>(batch.size());
  const std::size_t chunk = std::max<std::size_t>(1, max_threads());
  double sum_cost = 0, sum_best = 0, sum_base = 0, sum_loss = 0;
  for (std::size_t start = 0; start < batch.size(); start += chunk) {
    const std::size_t count = std::min(chunk, batch.size() - start);
    std::vector<InstanceResult> results(count);
    parallel_for(count, [&](std::size_t k) {
      const std::size_t i = start + k;
      results[k] = instance_gradients(batch[i], params, pool, mode,
                                      Rng::stream(rollout_seed, {"rollout", std::to_string(i)}),
                                      scale);
    });
    // Serial reduction in instance order keeps sums bit-reproducible.
    for (auto& r : results) {
      sum_cost += r.mean_cost;
      sum_best += r.best_cost;
      sum_base += r.baseline;
      sum_loss += r.loss;
      out.stats.selected.push_back(r.selected);
      add_into(out.grads, std::move(r.grads));
    }
  }
  const double B = static_cast<double>(batch.size());
  out.stats.mean_cost = sum_cost / B;
  out.stats.mean_best = sum_best / B;
  out.stats.baseline = sum_base / B;
  out.stats.loss = sum_loss;
  double sq = 0;
  for (const auto& [t, m] : out.grads) sq += m.squaredNorm();
  out.stats.grad_norm = std::sqrt(sq);
  if (!pool) out.stats.selected.clear();
  return out;
}

namespace {

std::uint64_t batch_rollout_seed(const TrainConfig& c, int epoch, int batch) {
  return Rng::stream(c.seed, {"train-rollout", std::to_string(epoch), std::to_string(batch)})
      .next_u64();
}

void check_finite(const BatchStats& s, const std::vector<Instance>& batch,
                  const TrainHooks& hooks) {
  if (std::isfinite(s.loss) && std::isfinite(s.grad_norm) && std::isfinite(s.mean_cost)) return;
  json dump = s.to_json(0);
  json ids = json::array();
  for (const auto& inst : batch) ids.push_back(inst.id);
  dump["instances"] = ids;
  dump["selected"] = s.selected;
  if (!hooks.diagnostic_path.empty()) {
    std::ofstream out(hooks.diagnostic_path);
    out << dump.dump(2) << "\n";
  }
  throw Error(ErrorCode::kNonFinite, "non-finite loss at epoch " + std::to_string(s.epoch) +
                                         " batch " + std::to_string(s.batch) + ": " + dump.dump());
}

template <typename Step>
TrainSummary run_epochs(const TrainConfig& config, const TrainHooks& hooks, int pool_size,
                        Step&& step) {
  config.validate();
  TrainSummary summary;
  const int batches = config.batches_per_epoch();
  for (int e = 1; e <= config.epochs; ++e) {
    const double lr = lr_at(e, config.epochs, config.lr_start, config.lr_end);
    const std::string dist = schedule_entry(config.schedule, e).label() + "_n" +
                             std::to_string(schedule_entry(config.schedule, e).size);
    for (int b = 1; b <= batches; ++b) {
      const auto batch = training_batch(config, e, b);
      BatchStats stats = step(batch, lr, batch_rollout_seed(config, e, b));
      stats.epoch = e;
      stats.batch = b;
      stats.distribution = dist;
      stats.lr = lr;
      check_finite(stats, batch, hooks);
      if (hooks.log) *hooks.log << stats.to_json(pool_size).dump() << "\n" << std::flush;
      summary.batches_log.push_back(std::move(stats));
      ++summary.batches;
    }
    summary.epochs = e;
    const bool last = e == config.epochs;
    if (hooks.checkpoint && (last || (config.checkpoint_every > 0 && e % config.checkpoint_every == 0)))
      hooks.checkpoint(e);
  }
  return summary;
}

}  // namespace

TrainSummary pretrain_backbone(ModelParams& params, const TrainConfig& config,
                               const TrainHooks& hooks) {
  params.set_trainable(true);
  std::map<const ad::Tensor*, AdamState> states;
  const auto tensors = params.tensors();
  return run_epochs(config, hooks, 0, [&](const std::vector<Instance>& batch, double lr,
                                          std::uint64_t seed) {
    BatchGradients bg = reinforce_gradients(batch, params, nullptr, config.rollout, seed);
    if (std::isfinite(bg.stats.loss) && std::isfinite(bg.stats.grad_norm)) {
      for (auto* t : tensors) {
        auto it = bg.grads.find(t);
        if (it == bg.grads.end()) continue;
        adam_update(*t, it->second, lr, states[t], config.adam);
      }
    }
    return bg.stats;
  });
}

TrainSummary train_prompts(const ModelParams& backbone, KeyPromptPool& pool,
                           const TrainConfig& config, const TrainHooks& hooks) {
  if (pool.keys().rows() == 0 || pool.scaler().empty())
    throw Error(ErrorCode::kMissingArtifact, "prompt training needs keys and a scaler");
  ModelParams frozen = backbone;
  frozen.set_trainable(false);
  for (auto& p : pool.prompts()) p.trainable = true;
  std::vector<AdamState> states(static_cast<std::size_t>(pool.size()));
  return run_epochs(config, hooks, pool.size(), [&](const std::vector<Instance>& batch, double lr,
                                                    std::uint64_t seed) {
    BatchGradients bg = reinforce_gradients(batch, frozen, &pool, config.rollout, seed);
    if (std::isfinite(bg.stats.loss) && std::isfinite(bg.stats.grad_norm)) {
      const std::set<int> chosen(bg.stats.selected.begin(), bg.stats.selected.end());
      for (int i : chosen) {
        ad::Tensor& p = pool.prompt(i);
        auto it = bg.grads.find(&p);
        const Matrix grad = it == bg.grads.end() ? Matrix::Zero(p.value.rows(), p.value.cols())
                                                 : it->second;
        adam_update(p, grad, lr, states[static_cast<std::size_t>(i)], config.adam);
      }
    }
    return bg.stats;
  });
}

}  // namespace promptroute
