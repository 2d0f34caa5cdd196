#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "json.hpp"
#include "promptroute/autodiff.hpp"
#include "promptroute/cvrp.hpp"
#include "promptroute/rng.hpp"

namespace promptroute {

struct ModelConfig {
  int layers = 6;
  int embed = 128;
  int heads = 8;
  int ff_hidden = 512;
  double clip = 10.0;
  double norm_eps = 1e-5;

  int head_dim() const { return embed / heads; }
  void validate() const;
};

// Weights use the row-vector convention: tokens (rows) x W (in x out).
struct AttentionWeights {
  ad::Tensor wq, wk, wv;  // in x E, no bias
  ad::Tensor wo, bo;      // E x E, 1 x E
};

struct EncoderLayerParams {
  AttentionWeights attn;
  ad::Tensor norm1_gamma, norm1_beta;
  ad::Tensor ff_w1, ff_b1, ff_w2, ff_b2;
  ad::Tensor norm2_gamma, norm2_beta;
};

struct DecoderParams {
  AttentionWeights attn;  // wq maps the (E + 1) context, wk/wv map node embeddings
};

struct ModelParams {
  ModelConfig config;
  ad::Tensor w_in, b_in;  // 3 x E, 1 x E
  std::vector<EncoderLayerParams> layers;
  DecoderParams decoder;

  // U(-1/sqrt(E), 1/sqrt(E)) weights and biases, unit/zero norm affine.
  static ModelParams init(const ModelConfig& config, std::uint64_t seed);

  std::vector<ad::Tensor*> tensors();
  std::vector<const ad::Tensor*> tensors() const;
  void set_trainable(bool trainable);
  // FNV-1a over every value, in tensors() order.
  std::uint64_t hash() const;
};

// Graph-side handles to one copy of the parameters.
struct BoundAttention {
  ad::Var wq, wk, wv, wo, bo;
};
struct BoundLayer {
  BoundAttention attn;
  ad::Var norm1_gamma, norm1_beta, ff_w1, ff_b1, ff_w2, ff_b2, norm2_gamma, norm2_beta;
};
struct BoundModel {
  const ModelParams* params = nullptr;
  ad::Var w_in, b_in;
  std::vector<BoundLayer> layers;
  BoundAttention decoder;
};

BoundModel bind(ad::Graph& g, const ModelParams& params);

// Multi-head scaled dot-product attention of `queries` over `keys_values`,
// heads concatenated and projected by wo (+ bo). `mask` is queries x keys.
ad::Var attention(ad::Graph& g, ad::Var queries, ad::Var keys_values, const BoundAttention& w,
                  int heads, const ad::Mask* mask = nullptr);

// Self-attention over `tokens`.
ad::Var mha(ad::Graph& g, ad::Var tokens, const BoundAttention& w, int heads);

// Rows (x, y, d / C), depot first with demand 0.
ad::Matrix node_features(const Instance& instance);

struct EncoderOutput {
  ad::Var nodes;  // first n0 tokens of the final layer, n0 x E
  // Per layer: h + MHA(h) before normalization, over all tokens of that layer.
  std::vector<ad::Var> residual_sums;
  std::vector<ad::Index> layer_input_tokens;     // tokens arriving at layer l
  std::vector<ad::Index> layer_attended_tokens;  // tokens the layer's MHA sees
  ad::Index final_tokens = 0;                    // tokens leaving the last layer
  ad::Index node_count = 0;                      // n0 = n + 1
};

EncoderOutput encoder_forward(ad::Graph& g, const BoundModel& model, const Instance& instance);

// `prompt` is 1 x (D * L * E). Layer l appends rows [l*D, (l+1)*D) of the
// reshaped (L*D) x E prompt to its input before attention. D == 0 reduces to
// encoder_forward.
EncoderOutput prompted_encoder_forward(ad::Graph& g, const BoundModel& model,
                                       const Instance& instance, ad::Var prompt,
                                       int prompt_tokens);

inline std::int64_t prompt_length(const ModelConfig& config, int prompt_tokens) {
  return static_cast<std::int64_t>(prompt_tokens) * config.layers * config.embed;
}

// Decoder tensors computed once per encoding.
struct DecoderCache {
  ad::Var nodes;  // N x E
  std::vector<ad::Var> head_keys, head_values;  // per head, N x d_k
};

DecoderCache prepare_decoder(ad::Graph& g, const BoundModel& model, ad::Var nodes);

struct DecoderOutput {
  ad::Var log_probs;   // rows x N, -inf where masked
  ad::Matrix compat;   // rows x N, clipped compatibilities before masking
};

// One decoding step for a batch of partial tours: `current` node index and
// remaining-capacity fraction per row, `mask` true for excluded nodes.
DecoderOutput decoder_forward(ad::Graph& g, const BoundModel& model, const DecoderCache& cache,
                              std::span<const ad::Index> current,
                              std::span<const double> load_fraction, const ad::Mask& mask);

// Single-trajectory decoding state.
struct DecodeState {
  int current = 0;
  int remaining = 0;  // capacity left, in demand units
  std::vector<bool> visited;  // size n + 1, entry 0 unused
  int step = 0;

  static DecodeState start(const Instance& instance);
  // Depot masked right after a depot visit; customers masked when served or
  // heavier than the remaining load.
  ad::Mask mask(const Instance& instance) const;
  bool done() const;
  void visit(const Instance& instance, int node);
};

// Probability vector over nodes (depot first). Throws kDecodeDeadlock when
// every node is masked.
std::vector<double> decoder_step(ad::Graph& g, const BoundModel& model, const DecoderCache& cache,
                                 const Instance& instance, const DecodeState& state,
                                 ad::Matrix* compat = nullptr);

enum class DecodeMode { kGreedy, kSample, kForced };

struct Trajectory {
  int start = 0;
  std::vector<int> sequence;  // visits after the depot; 0 marks a depot return
  Solution solution;
  double reward = 0.0;   // -cost
  double log_prob = 0.0; // sum over decoded (non-forced) steps
};

// Per decoding step: picked log-probabilities (rows x 1) and the trajectory
// each row belongs to. Only filled when the graph records.
struct LogProbTrace {
  std::vector<ad::Var> picked;
  std::vector<std::vector<int>> rows;
};

struct RolloutOptions {
  DecodeMode mode = DecodeMode::kGreedy;
  Rng* rng = nullptr;  // kSample
  // kForced: one visit sequence per start, same encoding as Trajectory.
  const std::vector<std::vector<int>>* forced = nullptr;
  // Start customers; empty means 1..n.
  std::vector<int> starts;
};

struct RolloutResult {
  std::vector<Trajectory> trajectories;
  LogProbTrace trace;
};

// Multi-start construction: trajectory j first visits starts[j], then decodes.
RolloutResult rollout(ad::Graph& g, const BoundModel& model, const Instance& instance,
                      const EncoderOutput& encoded, const RolloutOptions& options);

// sum_j weights[j] * log p(trajectory j), built on the graph from `trace`.
ad::Var weighted_log_prob(ad::Graph& g, const LogProbTrace& trace,
                          std::span<const double> weights);

// Inference helper: encodes (optionally prompted) and rolls out in a
// non-recording graph.
RolloutResult infer(const ModelParams& params, const Instance& instance,
                    const ad::Tensor* prompt, int prompt_tokens, const RolloutOptions& options);

std::vector<Route> sequence_to_routes(const std::vector<int>& sequence);

nlohmann::json config_to_json(const ModelConfig& config);
ModelConfig config_from_json(const nlohmann::json& j);

// Tensor container at <stem>.json/.bin; meta gains "model" (the config) and
// "params_hash".
void save_model(const std::filesystem::path& stem, const ModelParams& params,
                nlohmann::json meta = nlohmann::json::object());
ModelParams load_model(const std::filesystem::path& stem, nlohmann::json* meta = nullptr);

}  // namespace promptroute
