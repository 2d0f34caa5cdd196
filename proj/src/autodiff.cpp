#include "promptroute/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <numeric>
#include <sstream>

#include "promptroute/error.hpp"
#include "promptroute/rng.hpp"

namespace promptroute::ad {

namespace {

std::string shape_str(const Matrix& m) {
  std::ostringstream s;
  s << '[' << m.rows() << 'x' << m.cols() << ']';
  return s.str();
}

[[noreturn]] void shape_error(const char* op, const Matrix& a, const Matrix& b) {
  throw Error(ErrorCode::kShapeMismatch,
              std::string(op) + ": incompatible shapes " + shape_str(a) + " and " + shape_str(b));
}

void check_mask(const char* op, const Matrix& a, const Mask* mask) {
  if (mask && (mask->rows() != a.rows() || mask->cols() != a.cols()))
    throw Error(ErrorCode::kShapeMismatch, std::string(op) + ": mask shape does not match input");
}

// Per-row max over unmasked entries; throws if a row is fully masked.
Eigen::VectorXd row_max(const Matrix& x, const Mask* mask) {
  Eigen::VectorXd out(x.rows());
  for (Index i = 0; i < x.rows(); ++i) {
    double m = -std::numeric_limits<double>::infinity();
    bool any = false;
    for (Index j = 0; j < x.cols(); ++j) {
      if (mask && (*mask)(i, j)) continue;
      m = std::max(m, x(i, j));
      any = true;
    }
    if (!any)
      throw Error(ErrorCode::kDecodeDeadlock,
                  "softmax row " + std::to_string(i) + " is fully masked");
    out(i) = m;
  }
  return out;
}

}  // namespace

void Graph::truncate(std::size_t mark) {
  if (mark < nodes_.size()) nodes_.resize(mark);
}

Var Graph::push(Matrix value, bool needs_grad,
                std::function<void(Graph&, std::int32_t)> backward) {
  Node n;
  n.value = std::move(value);
  n.needs_grad = needs_grad && record_;
  if (n.needs_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return Var{static_cast<std::int32_t>(nodes_.size() - 1)};
}

const Graph::Node& Graph::node(Var v) const {
  if (v.id < 0 || static_cast<std::size_t>(v.id) >= nodes_.size())
    throw Error(ErrorCode::kBackwardBeforeForward,
                "variable " + std::to_string(v.id) + " is not a node of this graph");
  return nodes_[static_cast<std::size_t>(v.id)];
}

bool Graph::track(std::initializer_list<Var> inputs) const {
  if (!record_) return false;
  for (auto v : inputs)
    if (node(v).needs_grad) return true;
  return false;
}

void Graph::accumulate(Var v, const Matrix& g) { accumulate_expr(v, g); }

template <typename Expr>
void Graph::accumulate_expr(Var v, const Expr& g) {
  auto& slot = grads_[static_cast<std::size_t>(v.id)];
  if (!nodes_[static_cast<std::size_t>(v.id)].needs_grad) return;
  if (slot.size() == 0)
    slot = g;
  else
    slot += g;
}

Var Graph::constant(Matrix value) { return push(std::move(value), false); }

Var Graph::leaf(const Tensor& tensor) {
  Var v = push(tensor.value, tensor.trainable, [](Graph&, std::int32_t) {});
  nodes_.back().tensor = &tensor;
  return v;
}

const Matrix& Graph::value(Var v) const { return node(v).value; }

double Graph::scalar(Var v) const {
  const auto& m = value(v);
  if (m.size() != 1)
    throw Error(ErrorCode::kShapeMismatch, "scalar(): value has shape " + shape_str(m));
  return m(0, 0);
}

Var Graph::matmul(Var a, Var b) {
  const auto& A = value(a);
  const auto& B = value(b);
  if (A.cols() != B.rows()) shape_error("matmul", A, B);
  Matrix out = A * B;
  return push(std::move(out), track({a, b}), [a, b](Graph& g, std::int32_t self) {
    const auto& G = g.grad(self);
    if (g.needs(a)) g.accumulate(a, G * g.nodes_[b.id].value.transpose());
    if (g.needs(b)) g.accumulate(b, g.nodes_[a.id].value.transpose() * G);
  });
}

Var Graph::matmul_nt(Var a, Var b) {
  const auto& A = value(a);
  const auto& B = value(b);
  if (A.cols() != B.cols()) shape_error("matmul_nt", A, B);
  Matrix out = A * B.transpose();
  return push(std::move(out), track({a, b}), [a, b](Graph& g, std::int32_t self) {
    const auto& G = g.grad(self);
    if (g.needs(a)) g.accumulate(a, G * g.nodes_[b.id].value);
    if (g.needs(b)) g.accumulate(b, G.transpose() * g.nodes_[a.id].value);
  });
}

Var Graph::add(Var a, Var b) {
  const auto& A = value(a);
  const auto& B = value(b);
  if (A.rows() != B.rows() || A.cols() != B.cols()) shape_error("add", A, B);
  Matrix out = A + B;
  return push(std::move(out), track({a, b}), [a, b](Graph& g, std::int32_t self) {
    g.accumulate(a, g.grad(self));
    g.accumulate(b, g.grad(self));
  });
}

Var Graph::sub(Var a, Var b) {
  const auto& A = value(a);
  const auto& B = value(b);
  if (A.rows() != B.rows() || A.cols() != B.cols()) shape_error("sub", A, B);
  Matrix out = A - B;
  return push(std::move(out), track({a, b}), [a, b](Graph& g, std::int32_t self) {
    g.accumulate(a, g.grad(self));
    if (g.needs(b)) g.accumulate(b, -g.grad(self));
  });
}

Var Graph::mul(Var a, Var b) {
  const auto& A = value(a);
  const auto& B = value(b);
  if (A.rows() != B.rows() || A.cols() != B.cols()) shape_error("mul", A, B);
  Matrix out = A.cwiseProduct(B);
  return push(std::move(out), track({a, b}), [a, b](Graph& g, std::int32_t self) {
    const auto& G = g.grad(self);
    if (g.needs(a)) g.accumulate(a, G.cwiseProduct(g.nodes_[b.id].value));
    if (g.needs(b)) g.accumulate(b, G.cwiseProduct(g.nodes_[a.id].value));
  });
}

Var Graph::add_row(Var a, Var row) {
  const auto& A = value(a);
  const auto& R = value(row);
  if (R.rows() != 1 || R.cols() != A.cols()) shape_error("add_row", A, R);
  Matrix out = A.rowwise() + R.row(0);
  return push(std::move(out), track({a, row}), [a, row](Graph& g, std::int32_t self) {
    const auto& G = g.grad(self);
    g.accumulate(a, G);
    if (g.needs(row)) g.accumulate(row, G.colwise().sum());
  });
}

Var Graph::scale(Var a, double factor) {
  Matrix out = value(a) * factor;
  return push(std::move(out), track({a}), [a, factor](Graph& g, std::int32_t self) {
    g.accumulate(a, g.grad(self) * factor);
  });
}

Var Graph::relu(Var a) {
  Matrix out = value(a).cwiseMax(0.0);
  return push(std::move(out), track({a}), [a](Graph& g, std::int32_t self) {
    const auto& X = g.nodes_[a.id].value;
    g.accumulate(a, (X.array() > 0.0).select(g.grad(self), 0.0).matrix());
  });
}

Var Graph::tanh(Var a) {
  Matrix out = value(a).array().tanh().matrix();
  return push(std::move(out), track({a}), [a](Graph& g, std::int32_t self) {
    const auto& Y = g.nodes_[self].value;
    g.accumulate(a, (g.grad(self).array() * (1.0 - Y.array().square())).matrix());
  });
}

Var Graph::exp(Var a) {
  Matrix out = value(a).array().exp().matrix();
  return push(std::move(out), track({a}), [a](Graph& g, std::int32_t self) {
    g.accumulate(a, g.grad(self).cwiseProduct(g.nodes_[self].value));
  });
}

Var Graph::log(Var a) {
  Matrix out = value(a).array().log().matrix();
  return push(std::move(out), track({a}), [a](Graph& g, std::int32_t self) {
    g.accumulate(a, g.grad(self).cwiseQuotient(g.nodes_[a.id].value));
  });
}

Var Graph::softmax_rows(Var a, const Mask* mask) {
  const auto& X = value(a);
  check_mask("softmax_rows", X, mask);
  Matrix Y = X;
  const auto mx = row_max(X, mask);
  for (Index i = 0; i < Y.rows(); ++i) {
    double total = 0.0;
    for (Index j = 0; j < Y.cols(); ++j) {
      const double e = (mask && (*mask)(i, j)) ? 0.0 : std::exp(Y(i, j) - mx(i));
      Y(i, j) = e;
      total += e;
    }
    Y.row(i) /= total;
  }
  return push(std::move(Y), track({a}), [a](Graph& g, std::int32_t self) {
    const auto& P = g.nodes_[self].value;
    const auto& G = g.grad(self);
    const Eigen::VectorXd inner = G.cwiseProduct(P).rowwise().sum();
    Matrix dx = P.cwiseProduct(G.colwise() - inner);
    g.accumulate(a, dx);
  });
}

Var Graph::log_softmax_rows(Var a, const Mask* mask) {
  const auto& X = value(a);
  check_mask("log_softmax_rows", X, mask);
  const auto mx = row_max(X, mask);
  Matrix Y(X.rows(), X.cols());
  for (Index i = 0; i < X.rows(); ++i) {
    double total = 0.0;
    for (Index j = 0; j < X.cols(); ++j)
      if (!(mask && (*mask)(i, j))) total += std::exp(X(i, j) - mx(i));
    const double lse = mx(i) + std::log(total);
    for (Index j = 0; j < X.cols(); ++j)
      Y(i, j) = (mask && (*mask)(i, j)) ? -std::numeric_limits<double>::infinity()
                                        : X(i, j) - lse;
  }
  std::shared_ptr<const Mask> kept = mask ? std::make_shared<const Mask>(*mask) : nullptr;
  return push(std::move(Y), track({a}), [a, kept](Graph& g, std::int32_t self) {
    const auto& L = g.nodes_[self].value;
    Matrix G = g.grad(self);
    if (kept) G = kept->select(0.0, G.array()).matrix();
    const Matrix P = L.array().exp().matrix();  // exp(-inf) == 0 for masked
    const Eigen::VectorXd total = G.rowwise().sum();
    Matrix dx = G - (P.array().colwise() * total.array()).matrix();
    if (kept) dx = kept->select(0.0, dx.array()).matrix();
    g.accumulate(a, dx);
  });
}

Var Graph::mean_rows(Var a) {
  const auto& X = value(a);
  Matrix out = X.colwise().mean();
  const Index n = X.rows();
  return push(std::move(out), track({a}), [a, n](Graph& g, std::int32_t self) {
    const auto& G = g.grad(self);
    g.accumulate(a, G.replicate(n, 1) / static_cast<double>(n));
  });
}

Var Graph::variance_rows(Var a) {
  const auto& X = value(a);
  const Index n = X.rows();
  const Eigen::RowVectorXd mu = X.colwise().mean();
  Matrix centered = X.rowwise() - mu;
  Matrix out = centered.array().square().colwise().sum().matrix() / static_cast<double>(n);
  return push(std::move(out), track({a}),
              [a, n, centered = std::move(centered)](Graph& g, std::int32_t self) {
                const Eigen::RowVectorXd G = g.grad(self).row(0);
                Matrix dx = (centered.array().rowwise() * G.array()).matrix() *
                            (2.0 / static_cast<double>(n));
                g.accumulate(a, dx);
              });
}

Var Graph::instance_norm(Var a, Var gamma, Var beta, double eps) {
  const auto& X = value(a);
  const auto& Gm = value(gamma);
  const auto& Bt = value(beta);
  if (Gm.rows() != 1 || Gm.cols() != X.cols()) shape_error("instance_norm gamma", X, Gm);
  if (Bt.rows() != 1 || Bt.cols() != X.cols()) shape_error("instance_norm beta", X, Bt);
  const Index n = X.rows();
  const Eigen::RowVectorXd mu = X.colwise().mean();
  Matrix xhat = X.rowwise() - mu;
  const Eigen::RowVectorXd var =
      xhat.array().square().colwise().sum().matrix() / static_cast<double>(n);
  const Eigen::RowVectorXd inv_std = (var.array() + eps).rsqrt().matrix();
  xhat.array().rowwise() *= inv_std.array();
  Matrix out = (xhat.array().rowwise() * Gm.row(0).array()).rowwise() + Bt.row(0).array();
  return push(std::move(out), track({a, gamma, beta}),
              [a, gamma, beta, n, xhat = std::move(xhat), inv_std](Graph& g, std::int32_t self) {
                const auto& G = g.grad(self);
                if (g.needs(beta)) g.accumulate(beta, G.colwise().sum());
                if (g.needs(gamma)) g.accumulate(gamma, G.cwiseProduct(xhat).colwise().sum());
                if (g.needs(a)) {
                  const auto& gm = g.nodes_[gamma.id].value;
                  const Matrix dxhat = (G.array().rowwise() * gm.row(0).array()).matrix();
                  const Eigen::RowVectorXd s1 = dxhat.colwise().sum();
                  const Eigen::RowVectorXd s2 = dxhat.cwiseProduct(xhat).colwise().sum();
                  const double inv_n = 1.0 / static_cast<double>(n);
                  Matrix dx = ((dxhat.rowwise() - s1 * inv_n).array() -
                               xhat.array().rowwise() * (s2.array() * inv_n))
                                  .rowwise() *
                              inv_std.array();
                  g.accumulate(a, dx);
                }
              });
}

Var Graph::concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw Error(ErrorCode::kShapeMismatch, "concat_rows: no inputs");
  const Index cols = value(parts[0]).cols();
  Index rows = 0;
  bool tracked = false;
  for (auto p : parts) {
    if (value(p).cols() != cols) shape_error("concat_rows", value(parts[0]), value(p));
    rows += value(p).rows();
    tracked = tracked || track({p});
  }
  Matrix out(rows, cols);
  Index r = 0;
  for (auto p : parts) {
    const auto& v = value(p);
    out.middleRows(r, v.rows()) = v;
    r += v.rows();
  }
  std::vector<Var> ins(parts.begin(), parts.end());
  return push(std::move(out), tracked, [ins](Graph& g, std::int32_t self) {
    const auto& G = g.grad(self);
    Index r0 = 0;
    for (auto p : ins) {
      const Index k = g.nodes_[p.id].value.rows();
      if (g.needs(p)) g.accumulate(p, G.middleRows(r0, k));
      r0 += k;
    }
  });
}

Var Graph::concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw Error(ErrorCode::kShapeMismatch, "concat_cols: no inputs");
  const Index rows = value(parts[0]).rows();
  Index cols = 0;
  bool tracked = false;
  for (auto p : parts) {
    if (value(p).rows() != rows) shape_error("concat_cols", value(parts[0]), value(p));
    cols += value(p).cols();
    tracked = tracked || track({p});
  }
  Matrix out(rows, cols);
  Index c = 0;
  for (auto p : parts) {
    const auto& v = value(p);
    out.middleCols(c, v.cols()) = v;
    c += v.cols();
  }
  std::vector<Var> ins(parts.begin(), parts.end());
  return push(std::move(out), tracked, [ins](Graph& g, std::int32_t self) {
    const auto& G = g.grad(self);
    Index c0 = 0;
    for (auto p : ins) {
      const Index k = g.nodes_[p.id].value.cols();
      if (g.needs(p)) g.accumulate(p, G.middleCols(c0, k));
      c0 += k;
    }
  });
}

Var Graph::slice_rows(Var a, Index begin, Index count) {
  const auto& X = value(a);
  if (begin < 0 || count < 0 || begin + count > X.rows())
    throw Error(ErrorCode::kShapeMismatch, "slice_rows: range out of bounds for " + shape_str(X));
  Matrix out = X.middleRows(begin, count);
  const Index rows = X.rows();
  return push(std::move(out), track({a}), [a, begin, count, rows](Graph& g, std::int32_t self) {
    Matrix dx = Matrix::Zero(rows, g.grad(self).cols());
    dx.middleRows(begin, count) = g.grad(self);
    g.accumulate(a, dx);
  });
}

Var Graph::slice_cols(Var a, Index begin, Index count) {
  const auto& X = value(a);
  if (begin < 0 || count < 0 || begin + count > X.cols())
    throw Error(ErrorCode::kShapeMismatch, "slice_cols: range out of bounds for " + shape_str(X));
  Matrix out = X.middleCols(begin, count);
  const Index cols = X.cols();
  return push(std::move(out), track({a}), [a, begin, count, cols](Graph& g, std::int32_t self) {
    Matrix dx = Matrix::Zero(g.grad(self).rows(), cols);
    dx.middleCols(begin, count) = g.grad(self);
    g.accumulate(a, dx);
  });
}

Var Graph::gather_rows(Var a, std::span<const Index> rows) {
  const auto& X = value(a);
  Matrix out(static_cast<Index>(rows.size()), X.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] < 0 || rows[i] >= X.rows())
      throw Error(ErrorCode::kShapeMismatch, "gather_rows: index out of range");
    out.row(static_cast<Index>(i)) = X.row(rows[i]);
  }
  std::vector<Index> idx(rows.begin(), rows.end());
  const Index n = X.rows();
  return push(std::move(out), track({a}), [a, idx, n](Graph& g, std::int32_t self) {
    const auto& G = g.grad(self);
    Matrix dx = Matrix::Zero(n, G.cols());
    for (std::size_t i = 0; i < idx.size(); ++i) dx.row(idx[i]) += G.row(static_cast<Index>(i));
    g.accumulate(a, dx);
  });
}

Var Graph::pick(Var a, std::span<const Index> cols) {
  const auto& X = value(a);
  if (static_cast<Index>(cols.size()) != X.rows())
    throw Error(ErrorCode::kShapeMismatch, "pick: need one column per row");
  Matrix out(X.rows(), 1);
  for (Index i = 0; i < X.rows(); ++i) {
    const Index c = cols[static_cast<std::size_t>(i)];
    if (c < 0 || c >= X.cols()) throw Error(ErrorCode::kShapeMismatch, "pick: column out of range");
    out(i, 0) = X(i, c);
  }
  std::vector<Index> idx(cols.begin(), cols.end());
  const Index nc = X.cols();
  return push(std::move(out), track({a}), [a, idx, nc](Graph& g, std::int32_t self) {
    const auto& G = g.grad(self);
    Matrix dx = Matrix::Zero(G.rows(), nc);
    for (Index i = 0; i < G.rows(); ++i) dx(i, idx[static_cast<std::size_t>(i)]) = G(i, 0);
    g.accumulate(a, dx);
  });
}

Var Graph::reshape(Var a, Index rows, Index cols) {
  const auto& X = value(a);
  if (rows * cols != X.size())
    throw Error(ErrorCode::kShapeMismatch, "reshape: size mismatch for " + shape_str(X));
  Matrix out = Eigen::Map<const Matrix>(X.data(), rows, cols);
  const Index r0 = X.rows(), c0 = X.cols();
  return push(std::move(out), track({a}), [a, r0, c0](Graph& g, std::int32_t self) {
    const auto& G = g.grad(self);
    g.accumulate(a, Matrix(Eigen::Map<const Matrix>(G.data(), r0, c0)));
  });
}

Var Graph::sum(Var a) {
  const auto& X = value(a);
  Matrix out(1, 1);
  out(0, 0) = X.sum();
  const Index r = X.rows(), c = X.cols();
  return push(std::move(out), track({a}), [a, r, c](Graph& g, std::int32_t self) {
    g.accumulate(a, Matrix::Constant(r, c, g.grad(self)(0, 0)));
  });
}

Var Graph::mean(Var a) {
  const auto n = static_cast<double>(value(a).size());
  return scale(sum(a), 1.0 / n);
}

Var Graph::dot(Var a, Var b) {
  const auto& A = value(a);
  const auto& B = value(b);
  if (A.rows() != B.rows() || A.cols() != B.cols()) shape_error("dot", A, B);
  Matrix out(1, 1);
  out(0, 0) = A.cwiseProduct(B).sum();
  return push(std::move(out), track({a, b}), [a, b](Graph& g, std::int32_t self) {
    const double G = g.grad(self)(0, 0);
    if (g.needs(a)) g.accumulate(a, g.nodes_[b.id].value * G);
    if (g.needs(b)) g.accumulate(b, g.nodes_[a.id].value * G);
  });
}

Var Graph::add_n(std::span<const Var> parts) {
  if (parts.empty()) throw Error(ErrorCode::kShapeMismatch, "add_n: no inputs");
  Matrix out = value(parts[0]);
  bool tracked = track({parts[0]});
  for (std::size_t i = 1; i < parts.size(); ++i) {
    const auto& v = value(parts[i]);
    if (v.rows() != out.rows() || v.cols() != out.cols()) shape_error("add_n", out, v);
    out += v;
    tracked = tracked || track({parts[i]});
  }
  std::vector<Var> ins(parts.begin(), parts.end());
  return push(std::move(out), tracked, [ins](Graph& g, std::int32_t self) {
    for (auto p : ins) g.accumulate(p, g.grad(self));
  });
}

Gradients Graph::backward(Var output) {
  if (!record_)
    throw Error(ErrorCode::kBackwardBeforeForward, "backward() on a non-recording graph");
  const auto& out = node(output);
  if (out.value.size() != 1)
    throw Error(ErrorCode::kShapeMismatch,
                "backward() needs a scalar output, got " + shape_str(out.value));
  Gradients result;
  if (!out.needs_grad) return result;

  grads_.assign(nodes_.size(), Matrix());
  grads_[static_cast<std::size_t>(output.id)] = Matrix::Ones(1, 1);
  for (std::int32_t id = output.id; id >= 0; --id) {
    auto& n = nodes_[static_cast<std::size_t>(id)];
    if (!n.needs_grad || grads_[static_cast<std::size_t>(id)].size() == 0) continue;
    if (n.tensor) {
      auto& slot = result[n.tensor];
      if (slot.size() == 0)
        slot = grads_[static_cast<std::size_t>(id)];
      else
        slot += grads_[static_cast<std::size_t>(id)];
      continue;
    }
    if (n.backward) n.backward(*this, id);
    // Interior gradients are not needed once propagated.
    grads_[static_cast<std::size_t>(id)] = Matrix();
  }
  grads_.clear();
  return result;
}

FdResult finite_difference_check(const std::function<Var(Graph&)>& build, Tensor& tensor,
                                 const FdOptions& options) {
  Matrix analytic;
  {
    Graph g(true);
    const Var out = build(g);
    auto grads = g.backward(out);
    auto it = grads.find(&tensor);
    analytic = it == grads.end() ? Matrix::Zero(tensor.value.rows(), tensor.value.cols())
                                 : it->second;
  }

  std::vector<Index> coords(static_cast<std::size_t>(tensor.value.size()));
  std::iota(coords.begin(), coords.end(), Index{0});
  if (options.max_coords > 0 && options.max_coords < coords.size()) {
    Rng rng = Rng::stream(options.seed, {"fd-check"});
    for (std::size_t i = 0; i < options.max_coords; ++i) {
      const auto j = static_cast<std::size_t>(
          rng.uniform_int(static_cast<std::int64_t>(i), static_cast<std::int64_t>(coords.size() - 1)));
      std::swap(coords[i], coords[j]);
    }
    coords.resize(options.max_coords);
  }

  auto evaluate = [&]() {
    Graph g(false);
    return g.scalar(build(g));
  };

  double* data = tensor.value.data();
  auto central = [&](Index k, double step) {
    const double saved = data[k];
    data[k] = saved + step;
    const double plus = evaluate();
    data[k] = saved - step;
    const double minus = evaluate();
    data[k] = saved;
    return (plus - minus) / (2.0 * step);
  };
  auto rel_error = [](double a, double n) { return std::abs(a - n) / std::max(std::abs(a), std::abs(n)); };

  FdResult result;
  for (Index k : coords) {
    const double a = analytic.data()[k];
    ++result.checked;
    if (std::abs(a) <= options.min_analytic) continue;
    ++result.compared;
    double rel = rel_error(a, central(k, options.step));
    if (options.retry_step > 0.0 && rel > options.retry_above) {
      rel = std::min(rel, rel_error(a, central(k, options.retry_step)));
      ++result.retried;
    }
    result.max_rel_error = std::max(result.max_rel_error, rel);
  }
  return result;
}

}  // namespace promptroute::ad
