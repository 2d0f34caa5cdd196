#include "promptroute/model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "promptroute/checkpoint.hpp"
#include "promptroute/error.hpp"

namespace promptroute {

using ad::Graph;
using ad::Index;
using ad::Matrix;
using ad::Var;

void ModelConfig::validate() const {
  if (layers < 1 || embed < 1 || heads < 1 || ff_hidden < 1)
    throw Error(ErrorCode::kConfig, "model dimensions must be positive");
  if (embed % heads != 0)
    throw Error(ErrorCode::kConfig, "embedding size must be divisible by the head count");
  if (!(clip > 0.0) || !(norm_eps > 0.0))
    throw Error(ErrorCode::kConfig, "clip and norm epsilon must be positive");
}

namespace {

ad::Tensor uniform_tensor(std::string name, Index rows, Index cols, double bound, Rng& rng) {
  Matrix m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = rng.uniform(-bound, bound);
  return ad::Tensor(std::move(name), std::move(m));
}

AttentionWeights init_attention(const std::string& prefix, Index in, Index embed, double bound,
                                Rng& rng) {
  AttentionWeights w;
  w.wq = uniform_tensor(prefix + ".wq", in, embed, bound, rng);
  w.wk = uniform_tensor(prefix + ".wk", embed, embed, bound, rng);
  w.wv = uniform_tensor(prefix + ".wv", embed, embed, bound, rng);
  w.wo = uniform_tensor(prefix + ".wo", embed, embed, bound, rng);
  w.bo = uniform_tensor(prefix + ".bo", 1, embed, bound, rng);
  return w;
}

void push_attention(AttentionWeights& w, std::vector<ad::Tensor*>& out) {
  out.insert(out.end(), {&w.wq, &w.wk, &w.wv, &w.wo, &w.bo});
}

BoundAttention bind_attention(Graph& g, const AttentionWeights& w) {
  return {g.leaf(w.wq), g.leaf(w.wk), g.leaf(w.wv), g.leaf(w.wo), g.leaf(w.bo)};
}

}  // namespace

ModelParams ModelParams::init(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  ModelParams p;
  p.config = config;
  const Index E = config.embed;
  const double bound = 1.0 / std::sqrt(static_cast<double>(E));
  Rng root = Rng::stream(seed, {"model-init"});

  Rng r = root.fork("input");
  p.w_in = uniform_tensor("input.w", 3, E, bound, r);
  p.b_in = uniform_tensor("input.b", 1, E, bound, r);
  for (int l = 0; l < config.layers; ++l) {
    Rng lr = root.fork("layer").fork(static_cast<std::uint64_t>(l));
    const std::string pre = "encoder." + std::to_string(l);
    EncoderLayerParams layer;
    layer.attn = init_attention(pre + ".attn", E, E, bound, lr);
    layer.norm1_gamma = ad::Tensor(pre + ".norm1.gamma", Matrix::Ones(1, E));
    layer.norm1_beta = ad::Tensor(pre + ".norm1.beta", Matrix::Zero(1, E));
    layer.ff_w1 = uniform_tensor(pre + ".ff.w1", E, config.ff_hidden, bound, lr);
    layer.ff_b1 = uniform_tensor(pre + ".ff.b1", 1, config.ff_hidden, bound, lr);
    layer.ff_w2 = uniform_tensor(pre + ".ff.w2", config.ff_hidden, E, bound, lr);
    layer.ff_b2 = uniform_tensor(pre + ".ff.b2", 1, E, bound, lr);
    layer.norm2_gamma = ad::Tensor(pre + ".norm2.gamma", Matrix::Ones(1, E));
    layer.norm2_beta = ad::Tensor(pre + ".norm2.beta", Matrix::Zero(1, E));
    p.layers.push_back(std::move(layer));
  }
  Rng dr = root.fork("decoder");
  p.decoder.attn = init_attention("decoder.attn", E + 1, E, bound, dr);
  return p;
}

std::vector<ad::Tensor*> ModelParams::tensors() {
  std::vector<ad::Tensor*> out{&w_in, &b_in};
  for (auto& l : layers) {
    push_attention(l.attn, out);
    out.insert(out.end(), {&l.norm1_gamma, &l.norm1_beta, &l.ff_w1, &l.ff_b1, &l.ff_w2,
                           &l.ff_b2, &l.norm2_gamma, &l.norm2_beta});
  }
  push_attention(decoder.attn, out);
  return out;
}

std::vector<const ad::Tensor*> ModelParams::tensors() const {
  auto mut = const_cast<ModelParams*>(this)->tensors();
  return {mut.begin(), mut.end()};
}

void ModelParams::set_trainable(bool trainable) {
  for (auto* t : tensors()) t->trainable = trainable;
}

std::uint64_t ModelParams::hash() const {
  std::uint64_t h = fnv1a64(nullptr, 0);
  for (const auto* t : tensors())
    h = fnv1a64(t->value.data(), static_cast<std::size_t>(t->value.size()) * sizeof(double), h);
  return h;
}

BoundModel bind(Graph& g, const ModelParams& params) {
  BoundModel m;
  m.params = &params;
  m.w_in = g.leaf(params.w_in);
  m.b_in = g.leaf(params.b_in);
  for (const auto& l : params.layers) {
    BoundLayer b;
    b.attn = bind_attention(g, l.attn);
    b.norm1_gamma = g.leaf(l.norm1_gamma);
    b.norm1_beta = g.leaf(l.norm1_beta);
    b.ff_w1 = g.leaf(l.ff_w1);
    b.ff_b1 = g.leaf(l.ff_b1);
    b.ff_w2 = g.leaf(l.ff_w2);
    b.ff_b2 = g.leaf(l.ff_b2);
    b.norm2_gamma = g.leaf(l.norm2_gamma);
    b.norm2_beta = g.leaf(l.norm2_beta);
    m.layers.push_back(b);
  }
  m.decoder = bind_attention(g, params.decoder.attn);
  return m;
}

namespace {

// Per-head attention given already-projected query/key/value matrices.
Var attend(Graph& g, Var q, std::span<const Var> keys, std::span<const Var> values,
           const BoundAttention& w, int heads, const ad::Mask* mask) {
  const Index E = g.value(q).cols();
  const Index dk = E / heads;
  const double inv = 1.0 / std::sqrt(static_cast<double>(dk));
  std::vector<Var> outs;
  outs.reserve(static_cast<std::size_t>(heads));
  for (int h = 0; h < heads; ++h) {
    Var qh = g.slice_cols(q, h * dk, dk);
    Var scores = g.scale(g.matmul_nt(qh, keys[static_cast<std::size_t>(h)]), inv);
    Var weights = g.softmax_rows(scores, mask);
    outs.push_back(g.matmul(weights, values[static_cast<std::size_t>(h)]));
  }
  Var cat = heads == 1 ? outs[0] : g.concat_cols(outs);
  return g.add_row(g.matmul(cat, w.wo), w.bo);
}

void split_heads(Graph& g, Var m, int heads, std::vector<Var>& out) {
  const Index dk = g.value(m).cols() / heads;
  out.clear();
  for (int h = 0; h < heads; ++h) out.push_back(g.slice_cols(m, h * dk, dk));
}

}  // namespace

Var attention(Graph& g, Var queries, Var keys_values, const BoundAttention& w, int heads,
              const ad::Mask* mask) {
  if (g.value(queries).rows() < 1 || g.value(keys_values).rows() < 1)
    throw Error(ErrorCode::kShapeMismatch, "attention needs at least one token");
  Var q = g.matmul(queries, w.wq);
  Var k = g.matmul(keys_values, w.wk);
  Var v = g.matmul(keys_values, w.wv);
  if (g.value(q).cols() % heads != 0)
    throw Error(ErrorCode::kShapeMismatch, "embedding size not divisible by head count");
  std::vector<Var> kh, vh;
  split_heads(g, k, heads, kh);
  split_heads(g, v, heads, vh);
  return attend(g, q, kh, vh, w, heads, mask);
}

Var mha(Graph& g, Var tokens, const BoundAttention& w, int heads) {
  return attention(g, tokens, tokens, w, heads, nullptr);
}

Matrix node_features(const Instance& instance) {
  const Index n0 = static_cast<Index>(instance.num_nodes());
  Matrix f(n0, 3);
  const double cap = static_cast<double>(instance.capacity);
  for (Index i = 0; i < n0; ++i) {
    const Point p = instance.node(static_cast<std::size_t>(i));
    f(i, 0) = p.x;
    f(i, 1) = p.y;
    f(i, 2) = static_cast<double>(instance.demand(static_cast<std::size_t>(i))) / cap;
  }
  return f;
}

namespace {

EncoderOutput encode(Graph& g, const BoundModel& model, const Instance& instance,
                     const Var* prompt_tokens_var, int prompt_tokens) {
  const ModelConfig& cfg = model.params->config;
  EncoderOutput out;
  out.node_count = static_cast<Index>(instance.num_nodes());
  Var h = g.add_row(g.matmul(g.constant(node_features(instance)), model.w_in), model.b_in);
  for (int l = 0; l < cfg.layers; ++l) {
    const BoundLayer& layer = model.layers[static_cast<std::size_t>(l)];
    out.layer_input_tokens.push_back(g.value(h).rows());
    if (prompt_tokens_var && prompt_tokens > 0) {
      Var p = g.slice_rows(*prompt_tokens_var, static_cast<Index>(l) * prompt_tokens,
                           prompt_tokens);
      const Var parts[] = {h, p};
      h = g.concat_rows(parts);
    }
    out.layer_attended_tokens.push_back(g.value(h).rows());
    Var residual = g.add(h, mha(g, h, layer.attn, cfg.heads));
    out.residual_sums.push_back(residual);
    Var hn = g.instance_norm(residual, layer.norm1_gamma, layer.norm1_beta, cfg.norm_eps);
    Var ff = g.add_row(
        g.matmul(g.relu(g.add_row(g.matmul(hn, layer.ff_w1), layer.ff_b1)), layer.ff_w2),
        layer.ff_b2);
    h = g.instance_norm(g.add(hn, ff), layer.norm2_gamma, layer.norm2_beta, cfg.norm_eps);
  }
  out.final_tokens = g.value(h).rows();
  out.nodes = out.final_tokens == out.node_count ? h : g.slice_rows(h, 0, out.node_count);
  return out;
}

}  // namespace

EncoderOutput encoder_forward(Graph& g, const BoundModel& model, const Instance& instance) {
  return encode(g, model, instance, nullptr, 0);
}

EncoderOutput prompted_encoder_forward(Graph& g, const BoundModel& model, const Instance& instance,
                                       Var prompt, int prompt_tokens) {
  const ModelConfig& cfg = model.params->config;
  if (prompt_tokens < 0)
    throw Error(ErrorCode::kWrongPromptLength, "negative prompt token count");
  const Matrix& pv = g.value(prompt);
  const std::int64_t expected = prompt_length(cfg, prompt_tokens);
  if (pv.size() != expected)
    throw Error(ErrorCode::kWrongPromptLength,
                "prompt has " + std::to_string(pv.size()) + " values, expected " +
                    std::to_string(expected));
  if (prompt_tokens == 0) return encode(g, model, instance, nullptr, 0);
  Var tokens = g.reshape(prompt, static_cast<Index>(cfg.layers) * prompt_tokens, cfg.embed);
  return encode(g, model, instance, &tokens, prompt_tokens);
}

DecoderCache prepare_decoder(Graph& g, const BoundModel& model, Var nodes) {
  DecoderCache c;
  c.nodes = nodes;
  const int heads = model.params->config.heads;
  split_heads(g, g.matmul(nodes, model.decoder.wk), heads, c.head_keys);
  split_heads(g, g.matmul(nodes, model.decoder.wv), heads, c.head_values);
  return c;
}

DecoderOutput decoder_forward(Graph& g, const BoundModel& model, const DecoderCache& cache,
                              std::span<const Index> current, std::span<const double> load_fraction,
                              const ad::Mask& mask) {
  const ModelConfig& cfg = model.params->config;
  const Index rows = static_cast<Index>(current.size());
  const Index N = g.value(cache.nodes).rows();
  if (static_cast<Index>(load_fraction.size()) != rows || mask.rows() != rows || mask.cols() != N)
    throw Error(ErrorCode::kShapeMismatch, "decoder inputs disagree on batch or node count");

  Matrix load(rows, 1);
  for (Index i = 0; i < rows; ++i) load(i, 0) = load_fraction[static_cast<std::size_t>(i)];
  const Var ctx_parts[] = {g.gather_rows(cache.nodes, current), g.constant(std::move(load))};
  Var context = g.concat_cols(ctx_parts);
  Var q = g.matmul(context, model.decoder.wq);
  Var glimpse = attend(g, q, cache.head_keys, cache.head_values, model.decoder, cfg.heads, &mask);

  const double inv = 1.0 / std::sqrt(static_cast<double>(cfg.embed));
  Var compat = g.scale(g.tanh(g.scale(g.matmul_nt(glimpse, cache.nodes), inv)), cfg.clip);
  DecoderOutput out;
  out.compat = g.value(compat);
  out.log_probs = g.log_softmax_rows(compat, &mask);
  return out;
}

DecodeState DecodeState::start(const Instance& instance) {
  DecodeState s;
  s.current = 0;
  s.remaining = instance.capacity;
  s.visited.assign(instance.num_nodes(), false);
  return s;
}

ad::Mask DecodeState::mask(const Instance& instance) const {
  const Index N = static_cast<Index>(instance.num_nodes());
  ad::Mask m(1, N);
  m(0, 0) = current == 0 && !done();
  for (Index i = 1; i < N; ++i)
    m(0, i) = visited[static_cast<std::size_t>(i)] ||
              instance.demand(static_cast<std::size_t>(i)) > remaining;
  return m;
}

bool DecodeState::done() const {
  return std::all_of(visited.begin() + 1, visited.end(), [](bool v) { return v; });
}

void DecodeState::visit(const Instance& instance, int node) {
  if (node < 0 || static_cast<std::size_t>(node) >= instance.num_nodes())
    throw Error(ErrorCode::kOutOfRange, "node " + std::to_string(node) + " out of range");
  if (node == 0) {
    remaining = instance.capacity;
  } else {
    if (visited[static_cast<std::size_t>(node)])
      throw Error(ErrorCode::kInvalidRoute, "customer " + std::to_string(node) + " revisited");
    const int d = instance.demand(static_cast<std::size_t>(node));
    if (d > remaining)
      throw Error(ErrorCode::kInvalidRoute,
                  "customer " + std::to_string(node) + " exceeds remaining capacity");
    visited[static_cast<std::size_t>(node)] = true;
    remaining -= d;
  }
  current = node;
  ++step;
}

std::vector<double> decoder_step(Graph& g, const BoundModel& model, const DecoderCache& cache,
                                 const Instance& instance, const DecodeState& state,
                                 Matrix* compat) {
  const ad::Mask mask = state.mask(instance);
  const Index cur[] = {state.current};
  const double load[] = {static_cast<double>(state.remaining) / instance.capacity};
  DecoderOutput out = decoder_forward(g, model, cache, cur, load, mask);
  if (compat) *compat = out.compat;
  const Matrix& lp = g.value(out.log_probs);
  std::vector<double> p(static_cast<std::size_t>(lp.cols()));
  for (Index j = 0; j < lp.cols(); ++j) p[static_cast<std::size_t>(j)] = std::exp(lp(0, j));
  return p;
}

std::vector<Route> sequence_to_routes(const std::vector<int>& sequence) {
  std::vector<Route> routes;
  Route cur;
  for (int v : sequence) {
    if (v == 0) {
      if (!cur.empty()) routes.push_back(std::move(cur));
      cur.clear();
    } else {
      cur.push_back(v);
    }
  }
  if (!cur.empty()) routes.push_back(std::move(cur));
  return routes;
}

RolloutResult rollout(Graph& g, const BoundModel& model, const Instance& instance,
                      const EncoderOutput& encoded, const RolloutOptions& options) {
  const int n = static_cast<int>(instance.num_customers());
  const Index N = static_cast<Index>(instance.num_nodes());
  std::vector<int> starts = options.starts;
  if (starts.empty())
    for (int j = 1; j <= n; ++j) starts.push_back(j);
  for (int s : starts)
    if (s < 1 || s > n)
      throw Error(ErrorCode::kOutOfRange, "start customer " + std::to_string(s) + " out of range");
  if (options.mode == DecodeMode::kSample && !options.rng)
    throw Error(ErrorCode::kConfig, "sampling rollout needs an RNG");
  if (options.mode == DecodeMode::kForced &&
      (!options.forced || options.forced->size() != starts.size()))
    throw Error(ErrorCode::kConfig, "forced rollout needs one sequence per start");

  const std::size_t T = starts.size();
  RolloutResult result;
  result.trajectories.resize(T);
  std::vector<DecodeState> states(T, DecodeState::start(instance));
  for (std::size_t j = 0; j < T; ++j) {
    result.trajectories[j].start = starts[j];
    states[j].visit(instance, starts[j]);
    result.trajectories[j].sequence.push_back(starts[j]);
  }

  const bool keep = g.recording();
  DecoderCache cache = prepare_decoder(g, model, encoded.nodes);
  std::vector<int> active;
  std::vector<Index> current;
  std::vector<double> load;
  std::vector<Index> chosen;
  while (true) {
    active.clear();
    for (std::size_t j = 0; j < T; ++j)
      if (!states[j].done()) active.push_back(static_cast<int>(j));
    if (active.empty()) break;

    const Index rows = static_cast<Index>(active.size());
    ad::Mask mask(rows, N);
    current.assign(active.size(), 0);
    load.assign(active.size(), 0.0);
    for (Index r = 0; r < rows; ++r) {
      const DecodeState& s = states[static_cast<std::size_t>(active[static_cast<std::size_t>(r)])];
      mask.row(r) = s.mask(instance).row(0);
      current[static_cast<std::size_t>(r)] = s.current;
      load[static_cast<std::size_t>(r)] = static_cast<double>(s.remaining) / instance.capacity;
    }

    const std::size_t mark = g.size();
    DecoderOutput out = decoder_forward(g, model, cache, current, load, mask);
    const Matrix& lp = g.value(out.log_probs);

    chosen.assign(active.size(), 0);
    for (Index r = 0; r < rows; ++r) {
      const auto j = static_cast<std::size_t>(active[static_cast<std::size_t>(r)]);
      Index pick = -1;
      switch (options.mode) {
        case DecodeMode::kGreedy: {
          double best = -std::numeric_limits<double>::infinity();
          for (Index c = 0; c < N; ++c)
            if (!mask(r, c) && (pick < 0 || lp(r, c) > best)) {
              best = lp(r, c);
              pick = c;
            }
          break;
        }
        case DecodeMode::kSample: {
          const double u = options.rng->uniform();
          double acc = 0.0;
          for (Index c = 0; c < N; ++c) {
            if (mask(r, c)) continue;
            pick = c;
            acc += std::exp(lp(r, c));
            if (u < acc) break;
          }
          break;
        }
        case DecodeMode::kForced: {
          const auto& seq = (*options.forced)[j];
          const auto pos = static_cast<std::size_t>(states[j].step);
          if (pos >= seq.size())
            throw Error(ErrorCode::kInvalidRoute, "forced sequence ended early");
          pick = seq[pos];
          if (pick < 0 || pick >= N || mask(r, pick))
            throw Error(ErrorCode::kInvalidRoute,
                        "forced action " + std::to_string(pick) + " is masked");
          break;
        }
      }
      if (pick < 0) throw Error(ErrorCode::kDecodeDeadlock, "no feasible action");
      chosen[static_cast<std::size_t>(r)] = pick;
      auto& traj = result.trajectories[j];
      traj.log_prob += lp(r, pick);
      traj.sequence.push_back(static_cast<int>(pick));
      states[j].visit(instance, static_cast<int>(pick));
    }

    if (keep) {
      result.trace.picked.push_back(g.pick(out.log_probs, chosen));
      result.trace.rows.push_back(active);
    } else {
      g.truncate(mark);
    }
  }

  for (auto& traj : result.trajectories) {
    traj.solution = make_solution(instance, sequence_to_routes(traj.sequence));
    traj.reward = -traj.solution.cost;
  }
  return result;
}

Var weighted_log_prob(Graph& g, const LogProbTrace& trace, std::span<const double> weights) {
  std::vector<Var> terms;
  terms.reserve(trace.picked.size());
  for (std::size_t s = 0; s < trace.picked.size(); ++s) {
    const auto& rows = trace.rows[s];
    Matrix w(static_cast<Index>(rows.size()), 1);
    for (std::size_t r = 0; r < rows.size(); ++r)
      w(static_cast<Index>(r), 0) = weights[static_cast<std::size_t>(rows[r])];
    terms.push_back(g.dot(trace.picked[s], g.constant(std::move(w))));
  }
  if (terms.empty()) return g.constant(Matrix::Zero(1, 1));
  return g.add_n(terms);
}

RolloutResult infer(const ModelParams& params, const Instance& instance, const ad::Tensor* prompt,
                    int prompt_tokens, const RolloutOptions& options) {
  Graph g(false);
  BoundModel model = bind(g, params);
  EncoderOutput enc = prompt ? prompted_encoder_forward(g, model, instance, g.leaf(*prompt),
                                                        prompt_tokens)
                             : encoder_forward(g, model, instance);
  return rollout(g, model, instance, enc, options);
}

nlohmann::json config_to_json(const ModelConfig& c) {
  return {{"layers", c.layers}, {"embed", c.embed},   {"heads", c.heads},
          {"ff_hidden", c.ff_hidden}, {"clip", c.clip}, {"norm_eps", c.norm_eps}};
}

ModelConfig config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.layers = j.at("layers").get<int>();
  c.embed = j.at("embed").get<int>();
  c.heads = j.at("heads").get<int>();
  c.ff_hidden = j.at("ff_hidden").get<int>();
  c.clip = j.at("clip").get<double>();
  c.norm_eps = j.at("norm_eps").get<double>();
  c.validate();
  return c;
}

void save_model(const std::filesystem::path& stem, const ModelParams& params, nlohmann::json meta) {
  meta["model"] = config_to_json(params.config);
  meta["params_hash"] = hex64(params.hash());
  const auto tensors = params.tensors();
  save_tensors(stem, tensors, meta);
}

ModelParams load_model(const std::filesystem::path& stem, nlohmann::json* meta) {
  TensorFile file = load_tensors(stem);
  if (!file.meta.contains("model"))
    throw Error(ErrorCode::kParse, stem.string() + ": checkpoint has no model config");
  ModelConfig config;
  try {
    config = config_from_json(file.meta.at("model"));
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kParse, stem.string() + ": bad model config: " + e.what());
  }
  ModelParams params = ModelParams::init(config, 0);
  for (auto* t : params.tensors()) file.load_into(*t);
  if (meta) *meta = file.meta;
  return params;
}

}  // namespace promptroute
