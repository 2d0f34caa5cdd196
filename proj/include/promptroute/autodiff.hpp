#pragma once

// Dense 2-D tensors with a reverse-mode tape.
//
// Graph records operations eagerly: calling an op computes its value and, when
// gradients are needed, pushes a backward closure. backward() walks the tape
// in reverse and returns gradients for every trainable Tensor bound with
// leaf(). Parameter values are never modified here; the trainer owns updates.

#include <Eigen/Core>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

namespace promptroute::ad {

using Index = Eigen::Index;
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
// true marks an excluded entry.
using Mask = Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Sentinel added to masked logits before normalization.
inline constexpr double kMaskedLogit = -1e9;

// A named value with an optional gradient slot.
struct Tensor {
  std::string name;
  Matrix value;
  Matrix grad;  // empty, or same shape as value
  bool trainable = true;

  Tensor() = default;
  Tensor(std::string n, Matrix v, bool train = true)
      : name(std::move(n)), value(std::move(v)), trainable(train) {}

  std::vector<Index> shape() const { return {value.rows(), value.cols()}; }
  Index size() const { return value.size(); }
  bool has_grad() const { return grad.size() != 0; }
};

struct Var {
  std::int32_t id = -1;
  bool valid() const { return id >= 0; }
};

using Gradients = std::unordered_map<const Tensor*, Matrix>;

class Graph {
 public:
  // With record = false no backward closures are stored (inference).
  explicit Graph(bool record = true) : record_(record) {}

  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  bool recording() const { return record_; }
  std::size_t size() const { return nodes_.size(); }
  // Drops every node created after `mark`. Vars past the mark become invalid.
  void truncate(std::size_t mark);

  Var constant(Matrix value);
  Var leaf(const Tensor& tensor);

  const Matrix& value(Var v) const;
  double scalar(Var v) const;

  Var matmul(Var a, Var b);
  Var matmul_nt(Var a, Var b);  // a * b^T
  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var mul(Var a, Var b);        // elementwise
  Var add_row(Var a, Var row);  // row (1 x c) broadcast over a's rows
  Var scale(Var a, double factor);
  Var relu(Var a);
  Var tanh(Var a);
  Var exp(Var a);
  Var log(Var a);

  // Row-wise softmax; masked entries are exactly 0 in the output.
  Var softmax_rows(Var a, const Mask* mask = nullptr);
  // Row-wise log-softmax; masked entries are -infinity in the output and
  // receive no gradient.
  Var log_softmax_rows(Var a, const Mask* mask = nullptr);

  Var mean_rows(Var a);      // 1 x c, mean over rows
  Var variance_rows(Var a);  // 1 x c, population variance over rows
  // Per-column normalization over rows with affine gamma/beta (1 x c each).
  Var instance_norm(Var a, Var gamma, Var beta, double eps);

  Var concat_rows(std::span<const Var> parts);
  Var concat_cols(std::span<const Var> parts);
  Var slice_rows(Var a, Index begin, Index count);
  Var slice_cols(Var a, Index begin, Index count);
  Var gather_rows(Var a, std::span<const Index> rows);
  // out(i, 0) = a(i, cols[i])
  Var pick(Var a, std::span<const Index> cols);
  // Row-major reinterpretation.
  Var reshape(Var a, Index rows, Index cols);

  Var sum(Var a);  // 1 x 1
  Var mean(Var a);
  Var dot(Var a, Var b);  // 1 x 1, sum of elementwise product
  Var add_n(std::span<const Var> parts);

  // `output` must be 1 x 1. Throws kBackwardBeforeForward if `output` is not
  // a node of this graph, or if the graph does not record.
  Gradients backward(Var output);

 private:
  struct Node {
    Matrix value;
    std::function<void(Graph&, std::int32_t)> backward;
    const Tensor* tensor = nullptr;
    bool needs_grad = false;
  };

  Var push(Matrix value, bool needs_grad,
           std::function<void(Graph&, std::int32_t)> backward = nullptr);
  const Node& node(Var v) const;
  bool needs(Var v) const { return nodes_[static_cast<std::size_t>(v.id)].needs_grad; }
  bool track(std::initializer_list<Var> inputs) const;
  void accumulate(Var v, const Matrix& g);
  template <typename Expr>
  void accumulate_expr(Var v, const Expr& g);
  const Matrix& grad(std::int32_t id) const { return grads_[static_cast<std::size_t>(id)]; }

  bool record_;
  std::vector<Node> nodes_;
  std::vector<Matrix> grads_;
};

struct FdOptions {
  double step = 1e-5;
  // Checks at most this many coordinates (chosen with `seed`); 0 means all.
  std::size_t max_coords = 0;
  std::uint64_t seed = 1;
  double min_analytic = 1e-8;
  // When set, a coordinate whose error exceeds `retry_above` is measured again
  // with this step and the smaller error kept. A ReLU kink inside +-step
  // spoils the first difference without meaning the gradient is wrong.
  double retry_step = 0.0;
  double retry_above = 1e-4;
};

struct FdResult {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  std::size_t compared = 0;  // coordinates with |analytic| > min_analytic
  std::size_t retried = 0;
};

// Central differences of the scalar produced by `build` with respect to every
// (or a sampled subset of) coordinate of `tensor`, against the tape gradient.
// `tensor` is perturbed in place and restored.
FdResult finite_difference_check(const std::function<Var(Graph&)>& build, Tensor& tensor,
                                 const FdOptions& options = {});

}  // namespace promptroute::ad
