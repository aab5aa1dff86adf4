#pragma once

// Reverse-mode differentiation over row-major double matrices.
//
// A Tape records nodes in creation order; backward() walks them in reverse.
// Parameters are bound by pointer: reading their value never copies, and
// gradients are accumulated into the owning Tensor's `grad` buffer so that
// several tapes (one per sequence in a batch) can share one accumulator.

#include <array>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "mera/error.hpp"
#include "mera/rng.hpp"

namespace mera::ad {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowVector = Eigen::Matrix<double, 1, Eigen::Dynamic>;

struct Tensor {
  std::string name;
  Matrix value;
  Matrix grad;

  Tensor() = default;
  Tensor(std::string n, Eigen::Index rows, Eigen::Index cols)
      : name(std::move(n)), value(Matrix::Zero(rows, cols)), grad(Matrix::Zero(rows, cols)) {}
  void zero_grad() { grad.setZero(value.rows(), value.cols()); }
};

struct Var {
  int id = -1;
};

enum class Op {
  kConstant,
  kParam,
  kEmbedding,
  kMatMul,
  kMatMulNT,
  kAdd,
  kAddRow,
  kMul,
  kScale,
  kRelu,
  kGelu,
  kSoftmaxRows,
  kCausalSoftmax,
  kLog,
  kLayerNorm,
  kSliceCols,
  kConcatCols,
  kSum,
  kMean,
  kDropout,
  kLossHead,
  kExternal,
};

class Tape {
 public:
  /// With `record == false` nothing needs gradients and backward() is an error.
  explicit Tape(bool record = true) : record_(record) { nodes_.reserve(256); }

  const Matrix& value(Var v) const {
    const auto& n = node(v);
    return n.ref != nullptr ? *n.ref : n.value;
  }
  const Matrix& grad(Var v) const { return node(v).grad; }
  std::size_t size() const { return nodes_.size(); }

  Var constant(Matrix m) {
    auto& n = push(Op::kConstant, false);
    n.value = std::move(m);
    return last();
  }

  /// Binds a parameter tensor; gradients flow into `t.grad` when recording.
  Var param(Tensor& t) {
    auto& n = push(Op::kParam, record_);
    n.ref = &t.value;
    n.sink = record_ ? &t.grad : nullptr;
    return last();
  }
  Var param(const Tensor& t) {
    auto& n = push(Op::kParam, false);
    n.ref = &t.value;
    return last();
  }

  /// Rows of `table` selected by `ids`.
  Var embedding(Tensor& table, std::span<const int> ids) { return embedding_impl(table, ids, record_ ? &table.grad : nullptr); }
  Var embedding(const Tensor& table, std::span<const int> ids) { return embedding_impl(table, ids, nullptr); }

  Var matmul(Var a, Var b) {
    Matrix out;
    out.noalias() = value(a) * value(b);
    return unary_like(Op::kMatMul, {a, b}, std::move(out));
  }

  /// a * b^T
  Var matmul_nt(Var a, Var b) {
    Matrix out;
    out.noalias() = value(a) * value(b).transpose();
    return unary_like(Op::kMatMulNT, {a, b}, std::move(out));
  }

  Var add(Var a, Var b) {
    check_same_shape(a, b, "add");
    return unary_like(Op::kAdd, {a, b}, value(a) + value(b));
  }

  /// Adds a 1 x n row to every row of `a`.
  Var add_row(Var a, Var row) {
    if (value(row).rows() != 1 || value(row).cols() != value(a).cols()) {
      throw ValidationError("add_row: shape mismatch");
    }
    Matrix out = value(a).rowwise() + value(row).row(0);
    return unary_like(Op::kAddRow, {a, row}, std::move(out));
  }

  Var mul(Var a, Var b) {
    check_same_shape(a, b, "mul");
    return unary_like(Op::kMul, {a, b}, value(a).cwiseProduct(value(b)));
  }

  Var scale(Var a, double s) {
    Var out = unary_like(Op::kScale, {a}, value(a) * s);
    nodes_.back().scalar = s;
    return out;
  }

  Var relu(Var a) { return unary_like(Op::kRelu, {a}, value(a).cwiseMax(0.0)); }

  /// tanh approximation.
  Var gelu(Var a) {
    const Matrix& x = value(a);
    Matrix out = x.unaryExpr([](double v) {
      return 0.5 * v * (1.0 + std::tanh(kGeluC * (v + 0.044715 * v * v * v)));
    });
    return unary_like(Op::kGelu, {a}, std::move(out));
  }

  Var softmax_rows(Var a) { return unary_like(Op::kSoftmaxRows, {a}, softmax(value(a), false)); }

  /// Row i only sees columns 0..i; masked entries are exactly 0.
  Var causal_softmax(Var a) {
    if (value(a).rows() != value(a).cols()) throw ValidationError("causal_softmax needs a square matrix");
    return unary_like(Op::kCausalSoftmax, {a}, softmax(value(a), true));
  }

  Var log(Var a) {
    if ((value(a).array() <= 0.0).any()) throw NumericError("log of non-positive value");
    return unary_like(Op::kLog, {a}, value(a).array().log().matrix());
  }

  /// Normalizes each row, then applies gamma and beta (both 1 x n).
  Var layer_norm(Var x, Var gamma, Var beta, double eps = 1e-5) {
    const Matrix& in = value(x);
    const auto cols = static_cast<double>(in.cols());
    Matrix xhat(in.rows(), in.cols());
    Matrix rstd(in.rows(), 1);
    for (Eigen::Index r = 0; r < in.rows(); ++r) {
      const double mean = in.row(r).sum() / cols;
      const double var = (in.row(r).array() - mean).square().sum() / cols;
      rstd(r, 0) = 1.0 / std::sqrt(var + eps);
      xhat.row(r) = (in.row(r).array() - mean) * rstd(r, 0);
    }
    Matrix out = (xhat.array().rowwise() * value(gamma).row(0).array()).rowwise() + value(beta).row(0).array();
    Var v = unary_like(Op::kLayerNorm, {x, gamma, beta}, std::move(out));
    nodes_.back().aux = std::move(xhat);
    nodes_.back().aux2 = std::move(rstd);
    return v;
  }

  Var slice_cols(Var a, int start, int count) {
    Var v = unary_like(Op::kSliceCols, {a}, value(a).middleCols(start, count));
    nodes_.back().i0 = start;
    return v;
  }

  Var concat_cols(const std::vector<Var>& parts) {
    if (parts.empty()) throw ValidationError("concat_cols of nothing");
    Eigen::Index cols = 0;
    const auto rows = value(parts[0]).rows();
    for (auto p : parts) {
      if (value(p).rows() != rows) throw ValidationError("concat_cols: row mismatch");
      cols += value(p).cols();
    }
    Matrix out(rows, cols);
    Eigen::Index at = 0;
    bool needs = false;
    for (auto p : parts) {
      out.middleCols(at, value(p).cols()) = value(p);
      at += value(p).cols();
      needs = needs || node(p).needs_grad;
    }
    auto& n = push(Op::kConcatCols, needs);
    n.value = std::move(out);
    for (auto p : parts) n.list.push_back(p.id);
    return last();
  }

  Var sum(Var a) { return unary_like(Op::kSum, {a}, Matrix::Constant(1, 1, value(a).sum())); }
  Var mean(Var a) {
    return unary_like(Op::kMean, {a}, Matrix::Constant(1, 1, value(a).mean()));
  }

  /// Inverted dropout; identity when p == 0.
  Var dropout(Var a, double p, Rng& rng) {
    if (p <= 0.0) return a;
    Matrix mask(value(a).rows(), value(a).cols());
    for (Eigen::Index i = 0; i < mask.size(); ++i) {
      mask.data()[i] = uniform_real(rng) < p ? 0.0 : 1.0 / (1.0 - p);
    }
    Var v = unary_like(Op::kDropout, {a}, value(a).cwiseProduct(mask));
    nodes_.back().aux = std::move(mask);
    return v;
  }

  /// Scalar loss whose gradient w.r.t. `input` was computed analytically
  /// elsewhere (`d_input` has the input's shape).
  Var loss_head(Var input, double loss, Matrix d_input) {
    if (d_input.rows() != value(input).rows() || d_input.cols() != value(input).cols()) {
      throw ValidationError("loss_head: gradient shape mismatch");
    }
    Var v = unary_like(Op::kLossHead, {input}, Matrix::Constant(1, 1, loss));
    nodes_.back().aux = std::move(d_input);
    return v;
  }

  /// A value computed outside the tape from `deps`; it has no backward rule.
  Var external(Matrix m, std::initializer_list<Var> deps) { return unary_like(Op::kExternal, deps, std::move(m)); }

  /// Accumulates d(loss)/d(node) for every node; loss must be 1 x 1.
  void backward(Var loss) {
    if (!record_) throw ValidationError("backward on a tape that does not record gradients");
    auto& root = node(loss);
    if (root.value.rows() != 1 || root.value.cols() != 1) throw ValidationError("backward needs a scalar loss");
    root.grad = Matrix::Ones(1, 1);
    for (int id = loss.id; id >= 0; --id) {
      auto& n = nodes_[static_cast<std::size_t>(id)];
      if (!n.needs_grad || n.grad.size() == 0) continue;
      propagate(n);
    }
  }

 private:
  static constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)

  struct Node {
    Op op;
    bool needs_grad = false;
    std::array<int, 3> in{-1, -1, -1};
    std::vector<int> list;
    Matrix value;
    const Matrix* ref = nullptr;
    Matrix* sink = nullptr;
    Matrix grad;
    Matrix aux;
    Matrix aux2;
    std::vector<int> ids;
    double scalar = 0.0;
    int i0 = 0;
  };

  Node& node(Var v) { return nodes_.at(static_cast<std::size_t>(v.id)); }
  const Node& node(Var v) const { return nodes_.at(static_cast<std::size_t>(v.id)); }
  Var last() const { return Var{static_cast<int>(nodes_.size()) - 1}; }

  Node& push(Op op, bool needs) {
    nodes_.push_back(Node{});
    nodes_.back().op = op;
    nodes_.back().needs_grad = needs;
    return nodes_.back();
  }

  Var unary_like(Op op, std::initializer_list<Var> inputs, Matrix out) {
    bool needs = false;
    for (auto v : inputs) needs = needs || node(v).needs_grad;
    auto& n = push(op, needs);
    std::size_t i = 0;
    for (auto v : inputs) n.in[i++] = v.id;
    n.value = std::move(out);
    return last();
  }

  Var embedding_impl(const Tensor& table, std::span<const int> ids, Matrix* sink) {
    Matrix out(static_cast<Eigen::Index>(ids.size()), table.value.cols());
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (ids[i] < 0 || ids[i] >= table.value.rows()) {
        throw ValidationError("embedding id out of range: " + std::to_string(ids[i]));
      }
      out.row(static_cast<Eigen::Index>(i)) = table.value.row(ids[i]);
    }
    auto& n = push(Op::kEmbedding, sink != nullptr);
    n.value = std::move(out);
    n.sink = sink;
    n.ids.assign(ids.begin(), ids.end());
    return last();
  }

  void check_same_shape(Var a, Var b, const char* what) const {
    if (value(a).rows() != value(b).rows() || value(a).cols() != value(b).cols()) {
      throw ValidationError(std::string(what) + ": shape mismatch");
    }
  }

  static Matrix softmax(const Matrix& x, bool causal) {
    Matrix out = Matrix::Zero(x.rows(), x.cols());
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
      const Eigen::Index width = causal ? r + 1 : x.cols();
      const double m = x.row(r).head(width).maxCoeff();
      auto e = (x.row(r).head(width).array() - m).exp();
      out.row(r).head(width) = e / e.sum();
    }
    return out;
  }

  void accumulate(int id, const Matrix& g) {
    if (id < 0) return;
    auto& n = nodes_[static_cast<std::size_t>(id)];
    if (!n.needs_grad) return;
    if (n.grad.size() == 0) {
      n.grad = g;
    } else {
      n.grad += g;
    }
  }

  template <class Expr>
  void accumulate_expr(int id, const Expr& g) {
    if (id < 0) return;
    auto& n = nodes_[static_cast<std::size_t>(id)];
    if (!n.needs_grad) return;
    if (n.grad.size() == 0) {
      n.grad = g;
    } else {
      n.grad += g;
    }
  }

  bool wants(int id) const { return id >= 0 && nodes_[static_cast<std::size_t>(id)].needs_grad; }

  void propagate(Node& n) {
    const Matrix& g = n.grad;
    switch (n.op) {
      case Op::kConstant:
        return;
      case Op::kParam:
        if (n.sink != nullptr) *n.sink += g;
        return;
      case Op::kEmbedding:
        for (std::size_t i = 0; i < n.ids.size(); ++i) n.sink->row(n.ids[i]) += g.row(static_cast<Eigen::Index>(i));
        return;
      case Op::kMatMul: {
        const Matrix& a = value(Var{n.in[0]});
        const Matrix& b = value(Var{n.in[1]});
        if (wants(n.in[0])) accumulate_expr(n.in[0], g * b.transpose());
        if (wants(n.in[1])) accumulate_expr(n.in[1], a.transpose() * g);
        return;
      }
      case Op::kMatMulNT: {
        const Matrix& a = value(Var{n.in[0]});
        const Matrix& b = value(Var{n.in[1]});
        if (wants(n.in[0])) accumulate_expr(n.in[0], g * b);
        if (wants(n.in[1])) accumulate_expr(n.in[1], g.transpose() * a);
        return;
      }
      case Op::kAdd:
        accumulate(n.in[0], g);
        accumulate(n.in[1], g);
        return;
      case Op::kAddRow:
        accumulate(n.in[0], g);
        if (wants(n.in[1])) accumulate_expr(n.in[1], g.colwise().sum());
        return;
      case Op::kMul:
        if (wants(n.in[0])) accumulate_expr(n.in[0], g.cwiseProduct(value(Var{n.in[1]})));
        if (wants(n.in[1])) accumulate_expr(n.in[1], g.cwiseProduct(value(Var{n.in[0]})));
        return;
      case Op::kScale:
        accumulate_expr(n.in[0], g * n.scalar);
        return;
      case Op::kRelu:
        accumulate_expr(n.in[0], (value(Var{n.in[0]}).array() > 0.0).cast<double>().matrix().cwiseProduct(g));
        return;
      case Op::kGelu: {
        const Matrix& x = value(Var{n.in[0]});
        Matrix d = x.unaryExpr([](double v) {
          const double u = kGeluC * (v + 0.044715 * v * v * v);
          const double t = std::tanh(u);
          const double du = kGeluC * (1.0 + 3.0 * 0.044715 * v * v);
          return 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du;
        });
        accumulate_expr(n.in[0], d.cwiseProduct(g));
        return;
      }
      case Op::kSoftmaxRows:
      case Op::kCausalSoftmax: {
        const Matrix& y = n.value;
        Matrix d = y.cwiseProduct(g);
        const Eigen::VectorXd dots = d.rowwise().sum();
        d -= (y.array().colwise() * dots.array()).matrix();
        accumulate(n.in[0], d);
        return;
      }
      case Op::kLog:
        accumulate_expr(n.in[0], g.cwiseQuotient(value(Var{n.in[0]})));
        return;
      case Op::kLayerNorm: {
        const Matrix& xhat = n.aux;
        const Matrix& rstd = n.aux2;
        const auto& gamma = value(Var{n.in[1]});
        if (wants(n.in[1])) accumulate_expr(n.in[1], (g.cwiseProduct(xhat)).colwise().sum());
        if (wants(n.in[2])) accumulate_expr(n.in[2], g.colwise().sum());
        if (wants(n.in[0])) {
          const auto cols = static_cast<double>(xhat.cols());
          Matrix gx = g.array().rowwise() * gamma.row(0).array();
          Matrix dx(xhat.rows(), xhat.cols());
          for (Eigen::Index r = 0; r < xhat.rows(); ++r) {
            const double mean_g = gx.row(r).sum() / cols;
            const double mean_gx = gx.row(r).dot(xhat.row(r)) / cols;
            dx.row(r) = rstd(r, 0) * (gx.row(r).array() - mean_g - xhat.row(r).array() * mean_gx);
          }
          accumulate(n.in[0], dx);
        }
        return;
      }
      case Op::kSliceCols: {
        if (!wants(n.in[0])) return;
        const Matrix& src = value(Var{n.in[0]});
        Matrix d = Matrix::Zero(src.rows(), src.cols());
        d.middleCols(n.i0, g.cols()) = g;
        accumulate(n.in[0], d);
        return;
      }
      case Op::kConcatCols: {
        Eigen::Index at = 0;
        for (int id : n.list) {
          const auto cols = value(Var{id}).cols();
          if (wants(id)) accumulate_expr(id, g.middleCols(at, cols));
          at += cols;
        }
        return;
      }
      case Op::kSum: {
        const Matrix& src = value(Var{n.in[0]});
        accumulate_expr(n.in[0], Matrix::Constant(src.rows(), src.cols(), g(0, 0)));
        return;
      }
      case Op::kMean: {
        const Matrix& src = value(Var{n.in[0]});
        accumulate_expr(n.in[0], Matrix::Constant(src.rows(), src.cols(), g(0, 0) / static_cast<double>(src.size())));
        return;
      }
      case Op::kDropout:
        accumulate_expr(n.in[0], g.cwiseProduct(n.aux));
        return;
      case Op::kLossHead:
        accumulate_expr(n.in[0], n.aux * g(0, 0));
        return;
      case Op::kExternal:
        throw UnsupportedPrimitive("gradient requested through an external value with no backward rule");
    }
    throw UnsupportedPrimitive("unknown primitive in graph");
  }

  bool record_;
  std::vector<Node> nodes_;
};

}  // namespace mera::ad
