#include "ptst/autograd.hpp"

#include <cmath>
#include <stdexcept>
#include <string>
#include <unordered_set>

namespace ptst::ag {

namespace {

constexpr double kNormEps = 1e-12;

template <typename T>
using NodePtr = std::shared_ptr<Node<T>>;

template <typename T>
Tensor<T> make_op(Matrix<T> value, std::vector<NodePtr<T>> parents, std::function<void(Node<T>&)> fn) {
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(value);
  bool needs = false;
  for (const auto& p : parents) needs = needs || p->requires_grad;
  if (needs) {
    n->requires_grad = true;
    n->parents = std::move(parents);
    n->backward_fn = std::move(fn);
  }
  return Tensor<T>::from_node(std::move(n));
}

void check(bool ok, const char* op, const std::string& msg) {
  if (!ok) throw std::invalid_argument(std::string(op) + ": " + msg);
}

template <typename T>
std::string shape(const Tensor<T>& t) {
  return std::to_string(t.rows()) + "x" + std::to_string(t.cols());
}

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  check(a.rows() == b.rows() && a.cols() == b.cols(), op, "shape mismatch " + shape(a) + " vs " + shape(b));
}

}  // namespace

template <typename T>
Tensor<T>::Tensor(Matrix<T> value, bool requires_grad) : node_(std::make_shared<Node<T>>()) {
  node_->value = std::move(value);
  node_->requires_grad = requires_grad;
}

template <typename T>
Tensor<T> Tensor<T>::scalar(T v) {
  Matrix<T> m(1, 1);
  m(0, 0) = v;
  return Tensor(std::move(m), false);
}

template <typename T>
Matrix<T> Tensor<T>::grad() const {
  if (node_->grad.size() == 0) return Matrix<T>::Zero(node_->value.rows(), node_->value.cols());
  return node_->grad;
}

template <typename T>
void Tensor<T>::backward() const {
  check(rows() == 1 && cols() == 1, "backward", "implicit seed needs a 1x1 tensor, got " + shape(*this));
  backward(Matrix<T>::Ones(1, 1));
}

template <typename T>
void Tensor<T>::backward(const Matrix<T>& seed) const {
  if (!node_->requires_grad) return;
  // iterative post-order DFS gives a topological order
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<std::pair<Node<T>*, std::size_t>> stack{{node_.get(), 0}};
  seen.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, i] = stack.back();
    if (i < n->parents.size()) {
      Node<T>* p = n->parents[i++].get();
      if (p->requires_grad && seen.insert(p).second) stack.push_back({p, 0});
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }
  node_->grad_buffer() += seed;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (n->backward_fn && n->grad.size() != 0) n->backward_fn(*n);
  }
}

// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "add");
  auto pa = a.node().get(), pb = b.node().get();
  return make_op<T>(a.value() + b.value(), {a.node(), b.node()}, [pa, pb](Node<T>& self) {
    if (pa->requires_grad) pa->grad_buffer() += self.grad;
    if (pb->requires_grad) pb->grad_buffer() += self.grad;
  });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "sub");
  auto pa = a.node().get(), pb = b.node().get();
  return make_op<T>(a.value() - b.value(), {a.node(), b.node()}, [pa, pb](Node<T>& self) {
    if (pa->requires_grad) pa->grad_buffer() += self.grad;
    if (pb->requires_grad) pb->grad_buffer() -= self.grad;
  });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "mul");
  auto pa = a.node().get(), pb = b.node().get();
  return make_op<T>(a.value().cwiseProduct(b.value()), {a.node(), b.node()}, [pa, pb](Node<T>& self) {
    if (pa->requires_grad) pa->grad_buffer() += self.grad.cwiseProduct(pb->value);
    if (pb->requires_grad) pb->grad_buffer() += self.grad.cwiseProduct(pa->value);
  });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T s) {
  auto pa = a.node().get();
  return make_op<T>(a.value() * s, {a.node()}, [pa, s](Node<T>& self) { pa->grad_buffer() += self.grad * s; });
}

template <typename T>
Tensor<T> scale_by(const Tensor<T>& a, const Tensor<T>& s) {
  check(s.rows() == 1 && s.cols() == 1, "scale_by", "scale must be 1x1");
  auto pa = a.node().get(), ps = s.node().get();
  return make_op<T>(a.value() * s.item(), {a.node(), s.node()}, [pa, ps](Node<T>& self) {
    if (pa->requires_grad) pa->grad_buffer() += self.grad * ps->value(0, 0);
    if (ps->requires_grad) ps->grad_buffer()(0, 0) += self.grad.cwiseProduct(pa->value).sum();
  });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T s) {
  auto pa = a.node().get();
  return make_op<T>((a.value().array() + s).matrix(), {a.node()},
                    [pa](Node<T>& self) { pa->grad_buffer() += self.grad; });
}

template <typename T>
Tensor<T> square(const Tensor<T>& a) {
  auto pa = a.node().get();
  return make_op<T>(a.value().cwiseAbs2(), {a.node()},
                    [pa](Node<T>& self) { pa->grad_buffer() += T(2) * self.grad.cwiseProduct(pa->value); });
}

template <typename T>
Tensor<T> exp(const Tensor<T>& a) {
  auto pa = a.node().get();
  auto out = make_op<T>(a.value().array().exp().matrix(), {a.node()}, nullptr);
  if (out.requires_grad()) {
    auto po = out.node().get();
    out.node()->backward_fn = [pa, po](Node<T>& self) { pa->grad_buffer() += self.grad.cwiseProduct(po->value); };
  }
  return out;
}

template <typename T>
Tensor<T> relu(const Tensor<T>& a) {
  auto pa = a.node().get();
  return make_op<T>(a.value().cwiseMax(T(0)), {a.node()}, [pa](Node<T>& self) {
    pa->grad_buffer() += (pa->value.array() > T(0)).select(self.grad, T(0)).matrix();
  });
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& a) {
  const T inv_sqrt2 = T(0.70710678118654752440);
  Matrix<T> v = a.value().unaryExpr([inv_sqrt2](T x) { return T(0.5) * x * (T(1) + std::erf(x * inv_sqrt2)); });
  auto pa = a.node().get();
  return make_op<T>(std::move(v), {a.node()}, [pa, inv_sqrt2](Node<T>& self) {
    const T inv_sqrt_2pi = T(0.39894228040143267794);
    Matrix<T> d = pa->value.unaryExpr([&](T x) {
      return T(0.5) * (T(1) + std::erf(x * inv_sqrt2)) + x * inv_sqrt_2pi * std::exp(T(-0.5) * x * x);
    });
    pa->grad_buffer() += self.grad.cwiseProduct(d);
  });
}

template <typename T>
Tensor<T> clamp(const Tensor<T>& a, T lo, T hi) {
  auto pa = a.node().get();
  return make_op<T>(a.value().cwiseMax(lo).cwiseMin(hi), {a.node()}, [pa, lo, hi](Node<T>& self) {
    pa->grad_buffer() +=
        ((pa->value.array() >= lo) && (pa->value.array() <= hi)).select(self.grad, T(0)).matrix();
  });
}

template <typename T>
Tensor<T> add_row(const Tensor<T>& a, const Tensor<T>& v) {
  check(v.rows() == 1 && v.cols() == a.cols(), "add_row", "row vector " + shape(v) + " vs " + shape(a));
  auto pa = a.node().get(), pv = v.node().get();
  Matrix<T> out = a.value();
  out.rowwise() += v.value().row(0);
  return make_op<T>(std::move(out), {a.node(), v.node()}, [pa, pv](Node<T>& self) {
    if (pa->requires_grad) pa->grad_buffer() += self.grad;
    if (pv->requires_grad) pv->grad_buffer() += self.grad.colwise().sum();
  });
}

template <typename T>
Tensor<T> mul_col(const Tensor<T>& a, const Tensor<T>& c) {
  check(c.cols() == 1 && c.rows() == a.rows(), "mul_col", "column vector " + shape(c) + " vs " + shape(a));
  auto pa = a.node().get(), pc = c.node().get();
  Matrix<T> out = a.value().array().colwise() * c.value().col(0).array();
  return make_op<T>(std::move(out), {a.node(), c.node()}, [pa, pc](Node<T>& self) {
    if (pa->requires_grad)
      pa->grad_buffer() += (self.grad.array().colwise() * pc->value.col(0).array()).matrix();
    if (pc->requires_grad) pc->grad_buffer() += self.grad.cwiseProduct(pa->value).rowwise().sum();
  });
}

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  check(a.cols() == b.rows(), "matmul", shape(a) + " * " + shape(b));
  auto pa = a.node().get(), pb = b.node().get();
  Matrix<T> out(a.rows(), b.cols());
  out.noalias() = a.value() * b.value();
  return make_op<T>(std::move(out), {a.node(), b.node()}, [pa, pb](Node<T>& self) {
    if (pa->requires_grad) pa->grad_buffer().noalias() += self.grad * pb->value.transpose();
    if (pb->requires_grad) pb->grad_buffer().noalias() += pa->value.transpose() * self.grad;
  });
}

template <typename T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b) {
  check(a.cols() == b.cols(), "matmul_nt", shape(a) + " * " + shape(b) + "^T");
  auto pa = a.node().get(), pb = b.node().get();
  Matrix<T> out(a.rows(), b.rows());
  out.noalias() = a.value() * b.value().transpose();
  return make_op<T>(std::move(out), {a.node(), b.node()}, [pa, pb](Node<T>& self) {
    if (pa->requires_grad) pa->grad_buffer().noalias() += self.grad * pb->value;
    if (pb->requires_grad) pb->grad_buffer().noalias() += self.grad.transpose() * pa->value;
  });
}

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  check(x.cols() == w.rows(), "linear", shape(x) + " * " + shape(w));
  const bool has_bias = b.defined();
  if (has_bias) check(b.rows() == 1 && b.cols() == w.cols(), "linear", "bias " + shape(b));
  Matrix<T> out(x.rows(), w.cols());
  out.noalias() = x.value() * w.value();
  if (has_bias) out.rowwise() += b.value().row(0);
  auto px = x.node().get(), pw = w.node().get();
  Node<T>* pb = has_bias ? b.node().get() : nullptr;
  std::vector<NodePtr<T>> parents{x.node(), w.node()};
  if (has_bias) parents.push_back(b.node());
  return make_op<T>(std::move(out), std::move(parents), [px, pw, pb](Node<T>& self) {
    if (px->requires_grad) px->grad_buffer().noalias() += self.grad * pw->value.transpose();
    if (pw->requires_grad) pw->grad_buffer().noalias() += px->value.transpose() * self.grad;
    if (pb && pb->requires_grad) pb->grad_buffer() += self.grad.colwise().sum();
  });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  Matrix<T> out(1, 1);
  out(0, 0) = a.value().sum();
  auto pa = a.node().get();
  return make_op<T>(std::move(out), {a.node()},
                    [pa](Node<T>& self) { pa->grad_buffer().array() += self.grad(0, 0); });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
  check(a.value().size() > 0, "mean", "empty tensor");
  return scale(sum(a), T(1) / static_cast<T>(a.value().size()));
}

template <typename T>
Tensor<T> row_sum(const Tensor<T>& a) {
  auto pa = a.node().get();
  return make_op<T>(a.value().rowwise().sum(), {a.node()},
                    [pa](Node<T>& self) { pa->grad_buffer().colwise() += self.grad.col(0); });
}

template <typename T>
Tensor<T> concat_cols(const Tensor<T>& a, const Tensor<T>& b) {
  check(a.rows() == b.rows(), "concat_cols", shape(a) + " | " + shape(b));
  Matrix<T> out(a.rows(), a.cols() + b.cols());
  out << a.value(), b.value();
  auto pa = a.node().get(), pb = b.node().get();
  const auto ca = a.cols(), cb = b.cols();
  return make_op<T>(std::move(out), {a.node(), b.node()}, [pa, pb, ca, cb](Node<T>& self) {
    if (pa->requires_grad) pa->grad_buffer() += self.grad.leftCols(ca);
    if (pb->requires_grad) pb->grad_buffer() += self.grad.rightCols(cb);
  });
}

template <typename T>
Tensor<T> slice_rows(const Tensor<T>& a, Eigen::Index start, Eigen::Index count) {
  check(start >= 0 && count >= 0 && start + count <= a.rows(), "slice_rows", "range outside " + shape(a));
  auto pa = a.node().get();
  return make_op<T>(a.value().middleRows(start, count), {a.node()}, [pa, start, count](Node<T>& self) {
    pa->grad_buffer().middleRows(start, count) += self.grad;
  });
}

template <typename T>
Tensor<T> slice_cols(const Tensor<T>& a, Eigen::Index start, Eigen::Index count) {
  check(start >= 0 && count >= 0 && start + count <= a.cols(), "slice_cols", "range outside " + shape(a));
  auto pa = a.node().get();
  return make_op<T>(a.value().middleCols(start, count), {a.node()}, [pa, start, count](Node<T>& self) {
    pa->grad_buffer().middleCols(start, count) += self.grad;
  });
}

template <typename T>
Tensor<T> gather_rows(const Tensor<T>& a, const std::vector<Eigen::Index>& rows) {
  Matrix<T> out(static_cast<Eigen::Index>(rows.size()), a.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    check(rows[i] >= 0 && rows[i] < a.rows(), "gather_rows", "row index out of range");
    out.row(static_cast<Eigen::Index>(i)) = a.value().row(rows[i]);
  }
  auto pa = a.node().get();
  return make_op<T>(std::move(out), {a.node()}, [pa, rows](Node<T>& self) {
    auto& g = pa->grad_buffer();
    for (std::size_t i = 0; i < rows.size(); ++i) g.row(rows[i]) += self.grad.row(static_cast<Eigen::Index>(i));
  });
}

template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& a) {
  Matrix<T> out = a.value();
  for (Eigen::Index r = 0; r < out.rows(); ++r) {
    auto row = out.row(r);
    row.array() = (row.array() - row.maxCoeff()).exp();
    row /= row.sum();
  }
  auto pa = a.node().get();
  auto t = make_op<T>(std::move(out), {a.node()}, nullptr);
  if (t.requires_grad()) {
    auto po = t.node().get();
    t.node()->backward_fn = [pa, po](Node<T>& self) {
      const auto& y = po->value;
      Eigen::Matrix<T, Eigen::Dynamic, 1> dot = self.grad.cwiseProduct(y).rowwise().sum();
      pa->grad_buffer() += (y.array() * (self.grad.colwise() - dot).array()).matrix();
    };
  }
  return t;
}

template <typename T>
Tensor<T> log_softmax_rows(const Tensor<T>& a) {
  Matrix<T> out = a.value();
  for (Eigen::Index r = 0; r < out.rows(); ++r) {
    auto row = out.row(r);
    const T m = row.maxCoeff();
    const T lse = m + std::log((row.array() - m).exp().sum());
    row.array() -= lse;
  }
  auto pa = a.node().get();
  auto t = make_op<T>(std::move(out), {a.node()}, nullptr);
  if (t.requires_grad()) {
    auto po = t.node().get();
    t.node()->backward_fn = [pa, po](Node<T>& self) {
      Matrix<T> p = po->value.array().exp().matrix();
      Eigen::Matrix<T, Eigen::Dynamic, 1> gs = self.grad.rowwise().sum();
      pa->grad_buffer() += self.grad - (p.array().colwise() * gs.array()).matrix();
    };
  }
  return t;
}

template <typename T>
Tensor<T> l2_normalize_rows(const Tensor<T>& a) {
  const auto& x = a.value();
  Eigen::Matrix<T, Eigen::Dynamic, 1> norms = x.rowwise().norm().cwiseMax(T(kNormEps));
  Matrix<T> out = (x.array().colwise() / norms.array()).matrix();
  auto pa = a.node().get();
  auto t = make_op<T>(std::move(out), {a.node()}, nullptr);
  if (t.requires_grad()) {
    auto po = t.node().get();
    t.node()->backward_fn = [pa, po, norms](Node<T>& self) {
      const auto& y = po->value;
      auto& g = pa->grad_buffer();
      for (Eigen::Index r = 0; r < y.rows(); ++r) {
        if (norms[r] > T(kNormEps)) {
          g.row(r) += (self.grad.row(r) - y.row(r) * y.row(r).dot(self.grad.row(r))) / norms[r];
        } else {
          g.row(r) += self.grad.row(r) / norms[r];
        }
      }
    };
  }
  return t;
}

template <typename T>
Tensor<T> scale_norm_rows(const Tensor<T>& a, const Tensor<T>& g) {
  check(g.rows() == 1 && g.cols() == 1, "scale_norm_rows", "gain must be 1x1");
  return scale_by(l2_normalize_rows(a), g);
}

// ---------------------------------------------------------------------------
// sequence ops

template <typename T>
Tensor<T> im2col_1d(const Tensor<T>& x, int batch, int time, int kernel, int stride, int padding) {
  check(x.rows() == static_cast<Eigen::Index>(batch) * time, "im2col_1d", "rows != batch*time");
  check(kernel >= 1 && stride >= 1 && padding >= 0, "im2col_1d", "invalid kernel/stride/padding");
  const int t_out = (time + 2 * padding - kernel) / stride + 1;
  check(t_out >= 1, "im2col_1d", "sequence too short for kernel");
  const auto c = x.cols();
  Matrix<T> out = Matrix<T>::Zero(static_cast<Eigen::Index>(batch) * t_out, kernel * c);
  for (int b = 0; b < batch; ++b)
    for (int to = 0; to < t_out; ++to)
      for (int j = 0; j < kernel; ++j) {
        const int ti = to * stride + j - padding;
        if (ti < 0 || ti >= time) continue;
        out.row(static_cast<Eigen::Index>(b) * t_out + to).segment(j * c, c) =
            x.value().row(static_cast<Eigen::Index>(b) * time + ti);
      }
  auto px = x.node().get();
  return make_op<T>(std::move(out), {x.node()}, [=](Node<T>& self) {
    auto& g = px->grad_buffer();
    for (int b = 0; b < batch; ++b)
      for (int to = 0; to < t_out; ++to)
        for (int j = 0; j < kernel; ++j) {
          const int ti = to * stride + j - padding;
          if (ti < 0 || ti >= time) continue;
          g.row(static_cast<Eigen::Index>(b) * time + ti) +=
              self.grad.row(static_cast<Eigen::Index>(b) * t_out + to).segment(j * c, c);
        }
  });
}

template <typename T>
Tensor<T> depthwise_conv1d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, int batch, int time) {
  check(x.rows() == static_cast<Eigen::Index>(batch) * time, "depthwise_conv1d", "rows != batch*time");
  check(w.cols() == x.cols() && w.rows() % 2 == 1, "depthwise_conv1d", "weights must be [odd kernel x C]");
  check(b.rows() == 1 && b.cols() == x.cols(), "depthwise_conv1d", "bias must be [1 x C]");
  const int kernel = static_cast<int>(w.rows());
  const int pad = kernel / 2;
  Matrix<T> out(x.rows(), x.cols());
  out.rowwise() = b.value().row(0);
  for (int bb = 0; bb < batch; ++bb)
    for (int t = 0; t < time; ++t) {
      auto dst = out.row(static_cast<Eigen::Index>(bb) * time + t);
      for (int j = 0; j < kernel; ++j) {
        const int ti = t + j - pad;
        if (ti < 0 || ti >= time) continue;
        dst += x.value().row(static_cast<Eigen::Index>(bb) * time + ti).cwiseProduct(w.value().row(j));
      }
    }
  auto px = x.node().get(), pw = w.node().get(), pbias = b.node().get();
  return make_op<T>(std::move(out), {x.node(), w.node(), b.node()}, [=](Node<T>& self) {
    if (pbias->requires_grad) pbias->grad_buffer() += self.grad.colwise().sum();
    const bool gx = px->requires_grad, gw = pw->requires_grad;
    Matrix<T>* dx = gx ? &px->grad_buffer() : nullptr;
    Matrix<T>* dw = gw ? &pw->grad_buffer() : nullptr;
    for (int bb = 0; bb < batch; ++bb)
      for (int t = 0; t < time; ++t) {
        const auto g = self.grad.row(static_cast<Eigen::Index>(bb) * time + t);
        for (int j = 0; j < kernel; ++j) {
          const int ti = t + j - pad;
          if (ti < 0 || ti >= time) continue;
          const auto src = static_cast<Eigen::Index>(bb) * time + ti;
          if (gx) dx->row(src) += g.cwiseProduct(pw->value.row(j));
          if (gw) dw->row(j) += g.cwiseProduct(px->value.row(src));
        }
      }
  });
}

template <typename T>
Tensor<T> self_attention(const Tensor<T>& qkv, int batch, int time, int heads) {
  check(qkv.rows() == static_cast<Eigen::Index>(batch) * time, "self_attention", "rows != batch*time");
  check(qkv.cols() % 3 == 0, "self_attention", "packed qkv width must be 3*C");
  const Eigen::Index c = qkv.cols() / 3;
  check(heads >= 1 && c % heads == 0, "self_attention", "channels not divisible by heads");
  const Eigen::Index dh = c / heads;
  const T scale_factor = T(1) / std::sqrt(static_cast<T>(dh));

  const auto& in = qkv.value();
  Matrix<T> out(in.rows(), c);
  auto probs = std::make_shared<std::vector<Matrix<T>>>(static_cast<std::size_t>(batch) * heads);
  Matrix<T> scores(time, time);
  for (int b = 0; b < batch; ++b) {
    const Eigen::Index r0 = static_cast<Eigen::Index>(b) * time;
    for (int h = 0; h < heads; ++h) {
      const auto q = in.block(r0, h * dh, time, dh);
      const auto k = in.block(r0, c + h * dh, time, dh);
      const auto v = in.block(r0, 2 * c + h * dh, time, dh);
      scores.noalias() = q * k.transpose();
      scores *= scale_factor;
      for (Eigen::Index r = 0; r < time; ++r) {
        auto row = scores.row(r);
        row.array() = (row.array() - row.maxCoeff()).exp();
        row /= row.sum();
      }
      out.block(r0, h * dh, time, dh).noalias() = scores * v;
      (*probs)[static_cast<std::size_t>(b) * heads + h] = scores;
    }
  }
  auto pq = qkv.node().get();
  return make_op<T>(std::move(out), {qkv.node()}, [=](Node<T>& self) {
    auto& g = pq->grad_buffer();
    const auto& x = pq->value;
    Matrix<T> dp(time, time), ds(time, time);
    for (int b = 0; b < batch; ++b) {
      const Eigen::Index r0 = static_cast<Eigen::Index>(b) * time;
      for (int h = 0; h < heads; ++h) {
        const auto& p = (*probs)[static_cast<std::size_t>(b) * heads + h];
        const auto q = x.block(r0, h * dh, time, dh);
        const auto k = x.block(r0, c + h * dh, time, dh);
        const auto v = x.block(r0, 2 * c + h * dh, time, dh);
        const auto go = self.grad.block(r0, h * dh, time, dh);
        g.block(r0, 2 * c + h * dh, time, dh).noalias() += p.transpose() * go;
        dp.noalias() = go * v.transpose();
        Eigen::Matrix<T, Eigen::Dynamic, 1> rs = dp.cwiseProduct(p).rowwise().sum();
        ds = (p.array() * (dp.colwise() - rs).array()).matrix() * scale_factor;
        g.block(r0, h * dh, time, dh).noalias() += ds * k;
        g.block(r0, c + h * dh, time, dh).noalias() += ds.transpose() * q;
      }
    }
  });
}

template <typename T>
Tensor<T> mean_over_time(const Tensor<T>& x, int batch, int time) {
  check(x.rows() == static_cast<Eigen::Index>(batch) * time && time > 0, "mean_over_time", "rows != batch*time");
  Matrix<T> out(batch, x.cols());
  for (int b = 0; b < batch; ++b)
    out.row(b) = x.value().middleRows(static_cast<Eigen::Index>(b) * time, time).colwise().mean();
  auto px = x.node().get();
  return make_op<T>(std::move(out), {x.node()}, [=](Node<T>& self) {
    auto& g = px->grad_buffer();
    const T inv = T(1) / static_cast<T>(time);
    for (int b = 0; b < batch; ++b)
      g.middleRows(static_cast<Eigen::Index>(b) * time, time).rowwise() += self.grad.row(b) * inv;
  });
}

template <typename T>
Tensor<T> repeat_over_time(const Tensor<T>& x, int time) {
  const auto batch = x.rows();
  Matrix<T> out(batch * time, x.cols());
  for (Eigen::Index b = 0; b < batch; ++b) out.middleRows(b * time, time).rowwise() = x.value().row(b);
  auto px = x.node().get();
  return make_op<T>(std::move(out), {x.node()}, [=](Node<T>& self) {
    auto& g = px->grad_buffer();
    for (Eigen::Index b = 0; b < batch; ++b) g.row(b) += self.grad.middleRows(b * time, time).colwise().sum();
  });
}

template <typename T>
Tensor<T> tile_batch(const Tensor<T>& x, int batch) {
  const auto time = x.rows();
  Matrix<T> out(batch * time, x.cols());
  for (int b = 0; b < batch; ++b) out.middleRows(b * time, time) = x.value();
  auto px = x.node().get();
  return make_op<T>(std::move(out), {x.node()}, [=](Node<T>& self) {
    auto& g = px->grad_buffer();
    for (int b = 0; b < batch; ++b) g += self.grad.middleRows(b * time, time);
  });
}

template <typename T>
Tensor<T> upsample_nearest(const Tensor<T>& x, int batch, int time_in, int time_out) {
  check(x.rows() == static_cast<Eigen::Index>(batch) * time_in, "upsample_nearest", "rows != batch*time");
  std::vector<Eigen::Index> rows;
  rows.reserve(static_cast<std::size_t>(batch) * time_out);
  for (int b = 0; b < batch; ++b)
    for (int t = 0; t < time_out; ++t)
      rows.push_back(static_cast<Eigen::Index>(b) * time_in +
                     static_cast<Eigen::Index>(static_cast<long long>(t) * time_in / time_out));
  return gather_rows(x, rows);
}

// ---------------------------------------------------------------------------

#define PTST_INSTANTIATE(T)                                                                          \
  template class Tensor<T>;                                                                          \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                        \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                        \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                        \
  template Tensor<T> scale(const Tensor<T>&, T);                                                     \
  template Tensor<T> scale_by(const Tensor<T>&, const Tensor<T>&);                                   \
  template Tensor<T> add_scalar(const Tensor<T>&, T);                                                \
  template Tensor<T> square(const Tensor<T>&);                                                       \
  template Tensor<T> exp(const Tensor<T>&);                                                          \
  template Tensor<T> relu(const Tensor<T>&);                                                         \
  template Tensor<T> gelu(const Tensor<T>&);                                                         \
  template Tensor<T> clamp(const Tensor<T>&, T, T);                                                  \
  template Tensor<T> add_row(const Tensor<T>&, const Tensor<T>&);                                    \
  template Tensor<T> mul_col(const Tensor<T>&, const Tensor<T>&);                                    \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                                     \
  template Tensor<T> matmul_nt(const Tensor<T>&, const Tensor<T>&);                                  \
  template Tensor<T> linear(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);                   \
  template Tensor<T> sum(const Tensor<T>&);                                                          \
  template Tensor<T> mean(const Tensor<T>&);                                                         \
  template Tensor<T> row_sum(const Tensor<T>&);                                                      \
  template Tensor<T> concat_cols(const Tensor<T>&, const Tensor<T>&);                                \
  template Tensor<T> slice_rows(const Tensor<T>&, Eigen::Index, Eigen::Index);                       \
  template Tensor<T> slice_cols(const Tensor<T>&, Eigen::Index, Eigen::Index);                       \
  template Tensor<T> gather_rows(const Tensor<T>&, const std::vector<Eigen::Index>&);                 \
  template Tensor<T> softmax_rows(const Tensor<T>&);                                                 \
  template Tensor<T> log_softmax_rows(const Tensor<T>&);                                             \
  template Tensor<T> l2_normalize_rows(const Tensor<T>&);                                            \
  template Tensor<T> scale_norm_rows(const Tensor<T>&, const Tensor<T>&);                            \
  template Tensor<T> im2col_1d(const Tensor<T>&, int, int, int, int, int);                           \
  template Tensor<T> depthwise_conv1d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, int, int); \
  template Tensor<T> self_attention(const Tensor<T>&, int, int, int);                                \
  template Tensor<T> mean_over_time(const Tensor<T>&, int, int);                                     \
  template Tensor<T> repeat_over_time(const Tensor<T>&, int);                                        \
  template Tensor<T> tile_batch(const Tensor<T>&, int);                                              \
  template Tensor<T> upsample_nearest(const Tensor<T>&, int, int, int);

PTST_INSTANTIATE(float)
PTST_INSTANTIATE(double)

#undef PTST_INSTANTIATE

}  // namespace ptst::ag
