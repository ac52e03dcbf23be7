#pragma once

// Reverse-mode differentiation over dense Eigen matrices.
//
// Every operation records its value on a Tape together with a closure that
// maps the output gradient to input gradients. Rows are samples, columns are
// features. Stacked element states use an element-major block layout: block j
// occupies rows [j * block_rows, (j + 1) * block_rows).

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <functional>
#include <span>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include "hgt/error.hpp"
#include "hgt/random.hpp"

namespace hgt::ad {

template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

template <typename Scalar>
class Tape;

/// Handle to a value recorded on a tape.
template <typename Scalar>
class Var {
 public:
  Var() = default;
  Var(Tape<Scalar>* tape, int id) : tape_(tape), id_(id) {}

  const Matrix<Scalar>& value() const { return tape_->value(id_); }
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  int id() const { return id_; }
  Tape<Scalar>* tape() const { return tape_; }
  bool valid() const { return tape_ != nullptr; }
  bool requires_grad() const { return tape_->requires_grad(id_); }

 private:
  Tape<Scalar>* tape_ = nullptr;
  int id_ = -1;
};

template <typename Scalar>
class Tape {
 public:
  using Mat = Matrix<Scalar>;
  using BackwardFn = std::function<void(Tape&, const Mat&)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<Scalar> constant(Mat value) { return push(std::move(value), false, nullptr); }
  Var<Scalar> leaf(Mat value) { return push(std::move(value), true, nullptr); }

  Var<Scalar> push(Mat value, bool requires_grad, BackwardFn fn) {
    nodes_.push_back(Node{std::move(value), Mat(), requires_grad,
                          requires_grad ? std::move(fn) : BackwardFn()});
    return Var<Scalar>(this, static_cast<int>(nodes_.size()) - 1);
  }

  const Mat& value(int id) const { return nodes_[id].value; }
  bool requires_grad(int id) const { return nodes_[id].requires_grad; }

  /// Gradient buffer of a node, zero-initialized on first access.
  Mat& grad_buffer(int id) {
    Node& n = nodes_[id];
    if (n.grad.size() == 0) n.grad = Mat::Zero(n.value.rows(), n.value.cols());
    return n.grad;
  }

  template <typename Expr>
  void accumulate(int id, const Expr& delta) {
    Node& n = nodes_[id];
    if (!n.requires_grad) return;
    if (n.grad.size() == 0) {
      n.grad = delta;
    } else {
      n.grad += delta;
    }
  }

  /// Gradient of a node after backward(); nullptr when nothing reached it.
  const Mat* grad(int id) const {
    const Node& n = nodes_[id];
    return n.grad.size() == 0 ? nullptr : &n.grad;
  }

  void backward(const Var<Scalar>& root) {
    if (root.rows() != 1 || root.cols() != 1) {
      throw ShapeError("backward() needs a scalar root");
    }
    if (!requires_grad(root.id())) return;
    nodes_[root.id()].grad = Mat::Ones(1, 1);
    for (int i = root.id(); i >= 0; --i) {
      Node& n = nodes_[i];
      if (!n.backward || n.grad.size() == 0) continue;
      n.backward(*this, n.grad);
    }
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Mat value;
    Mat grad;
    bool requires_grad;
    BackwardFn backward;
  };
  std::vector<Node> nodes_;
};

namespace detail {

template <typename Scalar>
void require_same_tape(const Var<Scalar>& a, const Var<Scalar>& b) {
  if (a.tape() != b.tape()) throw StateError("operands live on different tapes");
}

template <typename Scalar>
void require_same_shape(const Var<Scalar>& a, const Var<Scalar>& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + std::to_string(a.rows()) + "x" +
                     std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                     std::to_string(b.cols()));
  }
}

}  // namespace detail

template <typename Scalar>
Var<Scalar> matmul(const Var<Scalar>& a, const Var<Scalar>& b) {
  detail::require_same_tape(a, b);
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: inner dimensions " + std::to_string(a.cols()) + " and " +
                     std::to_string(b.rows()) + " differ");
  }
  auto& tape = *a.tape();
  const int ia = a.id(), ib = b.id();
  return tape.push(a.value() * b.value(), a.requires_grad() || b.requires_grad(),
                   [ia, ib](Tape<Scalar>& t, const Matrix<Scalar>& g) {
                     if (t.requires_grad(ia)) t.accumulate(ia, g * t.value(ib).transpose());
                     if (t.requires_grad(ib)) t.accumulate(ib, t.value(ia).transpose() * g);
                   });
}

template <typename Scalar>
Var<Scalar> add(const Var<Scalar>& a, const Var<Scalar>& b) {
  detail::require_same_tape(a, b);
  detail::require_same_shape(a, b, "add");
  const int ia = a.id(), ib = b.id();
  return a.tape()->push(a.value() + b.value(), a.requires_grad() || b.requires_grad(),
                        [ia, ib](Tape<Scalar>& t, const Matrix<Scalar>& g) {
                          t.accumulate(ia, g);
                          t.accumulate(ib, g);
                        });
}

template <typename Scalar>
Var<Scalar> sub(const Var<Scalar>& a, const Var<Scalar>& b) {
  detail::require_same_tape(a, b);
  detail::require_same_shape(a, b, "sub");
  const int ia = a.id(), ib = b.id();
  return a.tape()->push(a.value() - b.value(), a.requires_grad() || b.requires_grad(),
                        [ia, ib](Tape<Scalar>& t, const Matrix<Scalar>& g) {
                          t.accumulate(ia, g);
                          t.accumulate(ib, -g);
                        });
}

/// Elementwise product.
template <typename Scalar>
Var<Scalar> mul(const Var<Scalar>& a, const Var<Scalar>& b) {
  detail::require_same_tape(a, b);
  detail::require_same_shape(a, b, "mul");
  const int ia = a.id(), ib = b.id();
  return a.tape()->push(a.value().cwiseProduct(b.value()),
                        a.requires_grad() || b.requires_grad(),
                        [ia, ib](Tape<Scalar>& t, const Matrix<Scalar>& g) {
                          if (t.requires_grad(ia)) t.accumulate(ia, g.cwiseProduct(t.value(ib)));
                          if (t.requires_grad(ib)) t.accumulate(ib, g.cwiseProduct(t.value(ia)));
                        });
}

template <typename Scalar>
Var<Scalar> scale(const Var<Scalar>& a, Scalar s) {
  const int ia = a.id();
  return a.tape()->push(a.value() * s, a.requires_grad(),
                        [ia, s](Tape<Scalar>& t, const Matrix<Scalar>& g) { t.accumulate(ia, g * s); });
}

/// Adds a 1 x cols row vector to every row.
template <typename Scalar>
Var<Scalar> add_row(const Var<Scalar>& a, const Var<Scalar>& row) {
  detail::require_same_tape(a, row);
  if (row.rows() != 1 || row.cols() != a.cols()) throw ShapeError("add_row: bias shape mismatch");
  const int ia = a.id(), ib = row.id();
  Matrix<Scalar> out = a.value();
  out.rowwise() += row.value().row(0);
  return a.tape()->push(std::move(out), a.requires_grad() || row.requires_grad(),
                        [ia, ib](Tape<Scalar>& t, const Matrix<Scalar>& g) {
                          t.accumulate(ia, g);
                          if (t.requires_grad(ib)) t.accumulate(ib, g.colwise().sum());
                        });
}

template <typename Scalar>
Var<Scalar> relu(const Var<Scalar>& a) {
  const int ia = a.id();
  return a.tape()->push(a.value().cwiseMax(Scalar(0)), a.requires_grad(),
                        [ia](Tape<Scalar>& t, const Matrix<Scalar>& g) {
                          t.accumulate(ia, (t.value(ia).array() > Scalar(0))
                                               .select(g.array(), Scalar(0))
                                               .matrix());
                        });
}

template <typename Scalar>
Var<Scalar> sigmoid(const Var<Scalar>& a) {
  Matrix<Scalar> y = (Scalar(1) + (-a.value().array()).exp()).inverse().matrix();
  const int ia = a.id();
  auto& tape = *a.tape();
  const int iy = static_cast<int>(tape.size());
  return tape.push(std::move(y), a.requires_grad(),
                   [ia, iy](Tape<Scalar>& t, const Matrix<Scalar>& g) {
                     const auto& y = t.value(iy).array();
                     t.accumulate(ia, (g.array() * y * (Scalar(1) - y)).matrix());
                   });
}

template <typename Scalar>
Var<Scalar> tanh(const Var<Scalar>& a) {
  Matrix<Scalar> y = a.value().array().tanh().matrix();
  const int ia = a.id();
  auto& tape = *a.tape();
  const int iy = static_cast<int>(tape.size());
  return tape.push(std::move(y), a.requires_grad(),
                   [ia, iy](Tape<Scalar>& t, const Matrix<Scalar>& g) {
                     const auto& y = t.value(iy).array();
                     t.accumulate(ia, (g.array() * (Scalar(1) - y.square())).matrix());
                   });
}

/// Columns [start, start + count).
template <typename Scalar>
Var<Scalar> cols(const Var<Scalar>& a, Eigen::Index start, Eigen::Index count) {
  if (start < 0 || count < 0 || start + count > a.cols()) throw ShapeError("cols: out of range");
  const int ia = a.id();
  return a.tape()->push(a.value().middleCols(start, count), a.requires_grad(),
                        [ia, start, count](Tape<Scalar>& t, const Matrix<Scalar>& g) {
                          t.grad_buffer(ia).middleCols(start, count) += g;
                        });
}

/// Horizontal concatenation.
template <typename Scalar>
Var<Scalar> hcat(std::span<const Var<Scalar>> parts) {
  if (parts.empty()) throw ShapeError("hcat: no operands");
  const Eigen::Index rows = parts[0].rows();
  Eigen::Index total = 0;
  bool needs_grad = false;
  for (const auto& p : parts) {
    detail::require_same_tape(p, parts[0]);
    if (p.rows() != rows) throw ShapeError("hcat: row count mismatch");
    total += p.cols();
    needs_grad = needs_grad || p.requires_grad();
  }
  Matrix<Scalar> out(rows, total);
  std::vector<int> ids;
  std::vector<Eigen::Index> widths;
  Eigen::Index offset = 0;
  for (const auto& p : parts) {
    out.middleCols(offset, p.cols()) = p.value();
    offset += p.cols();
    ids.push_back(p.id());
    widths.push_back(p.cols());
  }
  return parts[0].tape()->push(std::move(out), needs_grad,
                               [ids, widths](Tape<Scalar>& t, const Matrix<Scalar>& g) {
                                 Eigen::Index off = 0;
                                 for (std::size_t k = 0; k < ids.size(); ++k) {
                                   if (t.requires_grad(ids[k])) {
                                     t.accumulate(ids[k], g.middleCols(off, widths[k]));
                                   }
                                   off += widths[k];
                                 }
                               });
}

template <typename Scalar>
Var<Scalar> hcat(std::initializer_list<Var<Scalar>> parts) {
  std::vector<Var<Scalar>> v(parts);
  return hcat(std::span<const Var<Scalar>>(v));
}

/// Row-wise dot product: rows x 1.
template <typename Scalar>
Var<Scalar> row_dot(const Var<Scalar>& a, const Var<Scalar>& b) {
  detail::require_same_tape(a, b);
  detail::require_same_shape(a, b, "row_dot");
  const int ia = a.id(), ib = b.id();
  return a.tape()->push(a.value().cwiseProduct(b.value()).rowwise().sum(),
                        a.requires_grad() || b.requires_grad(),
                        [ia, ib](Tape<Scalar>& t, const Matrix<Scalar>& g) {
                          if (t.requires_grad(ia)) {
                            t.accumulate(ia, (t.value(ib).array().colwise() * g.col(0).array()).matrix());
                          }
                          if (t.requires_grad(ib)) {
                            t.accumulate(ib, (t.value(ia).array().colwise() * g.col(0).array()).matrix());
                          }
                        });
}

/// Softmax over each row.
template <typename Scalar>
Var<Scalar> softmax_rows(const Var<Scalar>& a) {
  Matrix<Scalar> y = a.value();
  for (Eigen::Index r = 0; r < y.rows(); ++r) {
    const Scalar m = y.row(r).maxCoeff();
    y.row(r) = (y.row(r).array() - m).exp().matrix();
    y.row(r) /= y.row(r).sum();
  }
  const int ia = a.id();
  auto& tape = *a.tape();
  const int iy = static_cast<int>(tape.size());
  return tape.push(std::move(y), a.requires_grad(),
                   [ia, iy](Tape<Scalar>& t, const Matrix<Scalar>& g) {
                     const Matrix<Scalar>& y = t.value(iy);
                     const Eigen::Matrix<Scalar, Eigen::Dynamic, 1> dots = g.cwiseProduct(y).rowwise().sum();
                     t.accumulate(ia, (y.array() * (g.array().colwise() - dots.array())).matrix());
                   });
}

/// Scales row r of `a` by c(r); c is rows x 1.
template <typename Scalar>
Var<Scalar> mul_col(const Var<Scalar>& a, const Var<Scalar>& c) {
  detail::require_same_tape(a, c);
  if (c.cols() != 1 || c.rows() != a.rows()) throw ShapeError("mul_col: expected rows x 1 scale");
  const int ia = a.id(), ic = c.id();
  return a.tape()->push((a.value().array().colwise() * c.value().col(0).array()).matrix(),
                        a.requires_grad() || c.requires_grad(),
                        [ia, ic](Tape<Scalar>& t, const Matrix<Scalar>& g) {
                          if (t.requires_grad(ia)) {
                            t.accumulate(ia, (g.array().colwise() * t.value(ic).col(0).array()).matrix());
                          }
                          if (t.requires_grad(ic)) {
                            t.accumulate(ic, g.cwiseProduct(t.value(ia)).rowwise().sum());
                          }
                        });
}

/// Layer normalization over the columns of each row.
template <typename Scalar>
Var<Scalar> layer_norm(const Var<Scalar>& x, const Var<Scalar>& gamma, const Var<Scalar>& beta,
                       Scalar eps = Scalar(1e-5)) {
  const Eigen::Index n = x.cols();
  if (gamma.cols() != n || beta.cols() != n) throw ShapeError("layer_norm: affine shape mismatch");
  const Matrix<Scalar>& v = x.value();
  Matrix<Scalar> xhat(v.rows(), n);
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> inv_std(v.rows());
  for (Eigen::Index r = 0; r < v.rows(); ++r) {
    const Scalar mu = v.row(r).mean();
    const Scalar var = (v.row(r).array() - mu).square().mean();
    inv_std(r) = Scalar(1) / std::sqrt(var + eps);
    xhat.row(r) = (v.row(r).array() - mu) * inv_std(r);
  }
  Matrix<Scalar> y = (xhat.array().rowwise() * gamma.value().row(0).array()).matrix();
  y.rowwise() += beta.value().row(0);
  const int ix = x.id(), ig = gamma.id(), ib = beta.id();
  return x.tape()->push(
      std::move(y), x.requires_grad() || gamma.requires_grad() || beta.requires_grad(),
      [ix, ig, ib, xhat = std::move(xhat), inv_std = std::move(inv_std), n](
          Tape<Scalar>& t, const Matrix<Scalar>& g) {
        if (t.requires_grad(ig)) t.accumulate(ig, g.cwiseProduct(xhat).colwise().sum());
        if (t.requires_grad(ib)) t.accumulate(ib, g.colwise().sum());
        if (t.requires_grad(ix)) {
          const Matrix<Scalar> dxhat = (g.array().rowwise() * t.value(ig).row(0).array()).matrix();
          const Eigen::Matrix<Scalar, Eigen::Dynamic, 1> s1 = dxhat.rowwise().sum();
          const Eigen::Matrix<Scalar, Eigen::Dynamic, 1> s2 = dxhat.cwiseProduct(xhat).rowwise().sum();
          Matrix<Scalar> dx = (Scalar(n) * dxhat.array()).colwise() - s1.array();
          dx.array() -= xhat.array().colwise() * s2.array();
          dx.array().colwise() *= inv_std.array() / Scalar(n);
          t.accumulate(ix, dx);
        }
      });
}

/// Running statistics owned by a batch-normalization layer.
template <typename Scalar>
struct NormStats {
  Matrix<Scalar>* mean;
  Matrix<Scalar>* var;
};

/// Batch normalization over the rows of each column.
///
/// Training mode normalizes with the batch statistics and updates the
/// running estimates; inference mode uses the running estimates only.
template <typename Scalar>
Var<Scalar> batch_norm(const Var<Scalar>& x, const Var<Scalar>& gamma, const Var<Scalar>& beta,
                       NormStats<Scalar> stats, bool training, Scalar momentum = Scalar(0.1),
                       Scalar eps = Scalar(1e-5)) {
  const Eigen::Index n = x.cols();
  if (gamma.cols() != n || beta.cols() != n) throw ShapeError("batch_norm: affine shape mismatch");
  const Matrix<Scalar>& v = x.value();
  const Eigen::Index m = v.rows();
  Eigen::Matrix<Scalar, 1, Eigen::Dynamic> mean, var;
  if (training) {
    if (m == 0) throw ShapeError("batch_norm: empty batch in training mode");
    mean = v.colwise().mean();
    var = (v.rowwise() - mean).array().square().colwise().mean().matrix();
    const Scalar unbias = m > 1 ? Scalar(m) / Scalar(m - 1) : Scalar(1);
    *stats.mean = (Scalar(1) - momentum) * *stats.mean + momentum * mean;
    *stats.var = (Scalar(1) - momentum) * *stats.var + momentum * unbias * var;
  } else {
    mean = stats.mean->row(0);
    var = stats.var->row(0);
  }
  const Eigen::Matrix<Scalar, 1, Eigen::Dynamic> inv_std = (var.array() + eps).rsqrt().matrix();
  Matrix<Scalar> xhat = ((v.rowwise() - mean).array().rowwise() * inv_std.array()).matrix();
  Matrix<Scalar> y = (xhat.array().rowwise() * gamma.value().row(0).array()).matrix();
  y.rowwise() += beta.value().row(0);
  const int ix = x.id(), ig = gamma.id(), ib = beta.id();
  return x.tape()->push(
      std::move(y), x.requires_grad() || gamma.requires_grad() || beta.requires_grad(),
      [ix, ig, ib, xhat = std::move(xhat), inv_std, training, m](Tape<Scalar>& t,
                                                                 const Matrix<Scalar>& g) {
        if (t.requires_grad(ig)) t.accumulate(ig, g.cwiseProduct(xhat).colwise().sum());
        if (t.requires_grad(ib)) t.accumulate(ib, g.colwise().sum());
        if (!t.requires_grad(ix)) return;
        const Matrix<Scalar> dxhat = (g.array().rowwise() * t.value(ig).row(0).array()).matrix();
        if (!training) {
          t.accumulate(ix, (dxhat.array().rowwise() * inv_std.array()).matrix());
          return;
        }
        const Eigen::Matrix<Scalar, 1, Eigen::Dynamic> s1 = dxhat.colwise().sum();
        const Eigen::Matrix<Scalar, 1, Eigen::Dynamic> s2 = dxhat.cwiseProduct(xhat).colwise().sum();
        Matrix<Scalar> dx = (Scalar(m) * dxhat.array()).rowwise() - s1.array();
        dx.array() -= xhat.array().rowwise() * s2.array();
        dx.array().rowwise() *= inv_std.array() / Scalar(m);
        t.accumulate(ix, dx);
      });
}

/// Inverted dropout; identity when rate is zero.
template <typename Scalar>
Var<Scalar> dropout(const Var<Scalar>& x, double rate, Rng& rng) {
  if (rate <= 0.0) return x;
  if (rate >= 1.0) throw ArgumentError("dropout rate must be below 1");
  const Scalar keep_scale = Scalar(1.0 / (1.0 - rate));
  Matrix<Scalar> mask(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < mask.size(); ++i) {
    mask.data()[i] = rng.uniform() < rate ? Scalar(0) : keep_scale;
  }
  const int ix = x.id();
  Matrix<Scalar> y = x.value().cwiseProduct(mask);
  return x.tape()->push(std::move(y), x.requires_grad(),
                        [ix, mask = std::move(mask)](Tape<Scalar>& t, const Matrix<Scalar>& g) {
                          t.accumulate(ix, g.cwiseProduct(mask));
                        });
}

/// One term of a block mixing: output block `out` += weight * input block `in`.
struct BlockEntry {
  int out;
  int in;
  double weight;
};

/// Linear mixing of row blocks: out_i = sum_j w_ij in_j.
///
/// Gathers, scatters, tiling and neighborhood means are all expressed this way.
template <typename Scalar>
Var<Scalar> mix_blocks(const Var<Scalar>& x, Eigen::Index block_rows, int out_blocks,
                       std::vector<BlockEntry> entries) {
  if (block_rows <= 0) throw ShapeError("mix_blocks: block_rows must be positive");
  const Eigen::Index in_blocks = x.rows() / block_rows;
  if (in_blocks * block_rows != x.rows()) throw ShapeError("mix_blocks: rows not a multiple of block size");
  Matrix<Scalar> out = Matrix<Scalar>::Zero(out_blocks * block_rows, x.cols());
  for (const auto& e : entries) {
    if (e.out < 0 || e.out >= out_blocks || e.in < 0 || e.in >= in_blocks) {
      throw ShapeError("mix_blocks: block index out of range");
    }
    out.middleRows(e.out * block_rows, block_rows) +=
        Scalar(e.weight) * x.value().middleRows(e.in * block_rows, block_rows);
  }
  const int ix = x.id();
  return x.tape()->push(std::move(out), x.requires_grad(),
                        [ix, block_rows, entries = std::move(entries)](Tape<Scalar>& t,
                                                                       const Matrix<Scalar>& g) {
                          auto& gx = t.grad_buffer(ix);
                          for (const auto& e : entries) {
                            gx.middleRows(e.in * block_rows, block_rows) +=
                                Scalar(e.weight) * g.middleRows(e.out * block_rows, block_rows);
                          }
                        });
}

/// Adds row j of `table` to every row of block j.
template <typename Scalar>
Var<Scalar> add_block_rows(const Var<Scalar>& x, const Var<Scalar>& table, Eigen::Index block_rows) {
  detail::require_same_tape(x, table);
  if (table.cols() != x.cols() || table.rows() * block_rows != x.rows()) {
    throw ShapeError("add_block_rows: table does not match block layout");
  }
  Matrix<Scalar> out = x.value();
  for (Eigen::Index j = 0; j < table.rows(); ++j) {
    out.middleRows(j * block_rows, block_rows).rowwise() += table.value().row(j);
  }
  const int ix = x.id(), it = table.id();
  return x.tape()->push(std::move(out), x.requires_grad() || table.requires_grad(),
                        [ix, it, block_rows](Tape<Scalar>& t, const Matrix<Scalar>& g) {
                          t.accumulate(ix, g);
                          if (!t.requires_grad(it)) return;
                          auto& gt = t.grad_buffer(it);
                          for (Eigen::Index j = 0; j < gt.rows(); ++j) {
                            gt.row(j) += g.middleRows(j * block_rows, block_rows).colwise().sum();
                          }
                        });
}

/// Per-block affine readout: column j of the result is block_j * w_j^T + b_j.
template <typename Scalar>
Var<Scalar> block_logits(const Var<Scalar>& x, const Var<Scalar>& weight, const Var<Scalar>& bias,
                         Eigen::Index block_rows) {
  detail::require_same_tape(x, weight);
  const Eigen::Index blocks = weight.rows();
  if (weight.cols() != x.cols() || blocks * block_rows != x.rows() || bias.rows() != 1 ||
      bias.cols() != blocks) {
    throw ShapeError("block_logits: parameter shapes do not match block layout");
  }
  Matrix<Scalar> out(block_rows, blocks);
  for (Eigen::Index j = 0; j < blocks; ++j) {
    out.col(j) = x.value().middleRows(j * block_rows, block_rows) * weight.value().row(j).transpose();
    out.col(j).array() += bias.value()(0, j);
  }
  const int ix = x.id(), iw = weight.id(), ib = bias.id();
  return x.tape()->push(
      std::move(out), x.requires_grad() || weight.requires_grad() || bias.requires_grad(),
      [ix, iw, ib, block_rows](Tape<Scalar>& t, const Matrix<Scalar>& g) {
        const Eigen::Index blocks = g.cols();
        if (t.requires_grad(ix)) {
          auto& gx = t.grad_buffer(ix);
          for (Eigen::Index j = 0; j < blocks; ++j) {
            gx.middleRows(j * block_rows, block_rows) += g.col(j) * t.value(iw).row(j);
          }
        }
        if (t.requires_grad(iw)) {
          auto& gw = t.grad_buffer(iw);
          for (Eigen::Index j = 0; j < blocks; ++j) {
            gw.row(j) += g.col(j).transpose() * t.value(ix).middleRows(j * block_rows, block_rows);
          }
        }
        if (t.requires_grad(ib)) t.accumulate(ib, g.colwise().sum());
      });
}

/// Column gather: result column k is column index[k] of x.
template <typename Scalar>
Var<Scalar> select_cols(const Var<Scalar>& x, std::vector<int> index) {
  Matrix<Scalar> out(x.rows(), static_cast<Eigen::Index>(index.size()));
  for (std::size_t k = 0; k < index.size(); ++k) {
    if (index[k] < 0 || index[k] >= x.cols()) throw ShapeError("select_cols: index out of range");
    out.col(static_cast<Eigen::Index>(k)) = x.value().col(index[k]);
  }
  const int ix = x.id();
  return x.tape()->push(std::move(out), x.requires_grad(),
                        [ix, index = std::move(index)](Tape<Scalar>& t, const Matrix<Scalar>& g) {
                          auto& gx = t.grad_buffer(ix);
                          for (std::size_t k = 0; k < index.size(); ++k) {
                            gx.col(index[k]) += g.col(static_cast<Eigen::Index>(k));
                          }
                        });
}

/// Probability clamp used by the cross-entropy terms.
inline constexpr double kProbEpsilon = 1e-7;

/// Binary cross-entropy of one probability against a {0,1} target, with an
/// optional focal modulation (gamma = 0 gives plain cross-entropy).
inline double bce_term(double p, double y, double gamma = 0.0) {
  const double pc = std::clamp(p, kProbEpsilon, 1.0 - kProbEpsilon);
  const double pt = y > 0.5 ? pc : 1.0 - pc;
  const double modulation = gamma == 0.0 ? 1.0 : std::pow(1.0 - pt, gamma);
  return -modulation * std::log(pt);
}

/// Derivative of bce_term with respect to p; zero where the clamp is active.
inline double bce_term_grad(double p, double y, double gamma = 0.0) {
  if (p <= kProbEpsilon || p >= 1.0 - kProbEpsilon) return 0.0;
  const double pt = y > 0.5 ? p : 1.0 - p;
  const double sign = y > 0.5 ? 1.0 : -1.0;
  double d = -1.0 / pt;
  if (gamma != 0.0) {
    d = gamma * std::pow(1.0 - pt, gamma - 1.0) * std::log(pt) - std::pow(1.0 - pt, gamma) / pt;
  }
  return sign * d;
}

/// Weighted mean cross-entropy; returns a 1 x 1 node.
///
/// Entries with zero weight contribute nothing, including to the gradient.
template <typename Scalar>
Var<Scalar> bce(const Var<Scalar>& probs, const std::type_identity_t<Matrix<Scalar>>& truth,
                const std::type_identity_t<Matrix<Scalar>>& weight,
                double gamma = 0.0) {
  if (truth.rows() != probs.rows() || truth.cols() != probs.cols() ||
      weight.rows() != probs.rows() || weight.cols() != probs.cols()) {
    throw ShapeError("bce: prediction, truth and weight shapes differ");
  }
  const Matrix<Scalar>& p = probs.value();
  double total = 0.0;
  double norm = 0.0;
  for (Eigen::Index i = 0; i < p.size(); ++i) {
    const double w = static_cast<double>(weight.data()[i]);
    if (w == 0.0) continue;
    total += w * bce_term(static_cast<double>(p.data()[i]), static_cast<double>(truth.data()[i]), gamma);
    norm += w;
  }
  Matrix<Scalar> out(1, 1);
  out(0, 0) = norm > 0.0 ? Scalar(total / norm) : Scalar(0);
  const int ip = probs.id();
  return probs.tape()->push(
      std::move(out), probs.requires_grad(),
      [ip, truth, weight, norm, gamma](Tape<Scalar>& t, const Matrix<Scalar>& g) {
        if (norm == 0.0) return;
        const Matrix<Scalar>& p = t.value(ip);
        Matrix<Scalar> d = Matrix<Scalar>::Zero(p.rows(), p.cols());
        const double scale = static_cast<double>(g(0, 0)) / norm;
        for (Eigen::Index i = 0; i < p.size(); ++i) {
          const double w = static_cast<double>(weight.data()[i]);
          if (w == 0.0) continue;
          d.data()[i] = Scalar(scale * w *
                               bce_term_grad(static_cast<double>(p.data()[i]),
                                             static_cast<double>(truth.data()[i]), gamma));
        }
        t.accumulate(ip, d);
      });
}

}  // namespace hgt::ad
