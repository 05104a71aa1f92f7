#pragma once

// Minimal reverse-mode differentiation over dense row-major matrices.
//
// Every value is a 2-D matrix. Sequence data for a batch of B records of
// length T is stacked into B*T rows (record-major), so a [B*T x C] tensor
// holds record b's timestep t at row b*T + t. Ops that need the sequence
// structure take (batch, time) explicitly.

#include <functional>
#include <memory>
#include <vector>

#include <Eigen/Core>

namespace ptst::ag {

template <typename T>
using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename T>
struct Node {
  Matrix<T> value;
  Matrix<T> grad;  // empty until something flows into it
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  Matrix<T>& grad_buffer() {
    if (grad.size() == 0) grad = Matrix<T>::Zero(value.rows(), value.cols());
    return grad;
  }
};

template <typename T>
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Matrix<T> value, bool requires_grad = false);

  static Tensor constant(Matrix<T> value) { return Tensor(std::move(value), false); }
  static Tensor parameter(Matrix<T> value) { return Tensor(std::move(value), true); }
  static Tensor scalar(T v);

  bool defined() const { return static_cast<bool>(node_); }
  const Matrix<T>& value() const { return node_->value; }
  Matrix<T>& mutable_value() { return node_->value; }
  /// Gradient accumulated by backward(); zeros if nothing flowed here.
  Matrix<T> grad() const;
  bool has_grad() const { return node_->grad.size() != 0; }
  Matrix<T>& grad_buffer() { return node_->grad_buffer(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }
  void zero_grad() { node_->grad.resize(0, 0); }

  Eigen::Index rows() const { return node_->value.rows(); }
  Eigen::Index cols() const { return node_->value.cols(); }
  T item() const { return node_->value(0, 0); }

  /// Back-propagates from this 1x1 tensor (seed 1) or from `seed`.
  void backward() const;
  void backward(const Matrix<T>& seed) const;

  /// Same value, cut off from the graph.
  Tensor detach() const { return Tensor(node_->value, false); }

  const std::shared_ptr<Node<T>>& node() const { return node_; }
  static Tensor from_node(std::shared_ptr<Node<T>> n) {
    Tensor t;
    t.node_ = std::move(n);
    return t;
  }

 private:
  std::shared_ptr<Node<T>> node_;
};

// --- elementwise and structural ops -----------------------------------------

template <typename T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> scale(const Tensor<T>& a, T s);
/// a * s where s is a 1x1 tensor.
template <typename T> Tensor<T> scale_by(const Tensor<T>& a, const Tensor<T>& s);
template <typename T> Tensor<T> add_scalar(const Tensor<T>& a, T s);
template <typename T> Tensor<T> square(const Tensor<T>& a);
template <typename T> Tensor<T> exp(const Tensor<T>& a);
template <typename T> Tensor<T> relu(const Tensor<T>& a);
template <typename T> Tensor<T> gelu(const Tensor<T>& a);
/// Clamp; gradient is zero outside [lo, hi].
template <typename T> Tensor<T> clamp(const Tensor<T>& a, T lo, T hi);

/// a [n x m] + v [1 x m] broadcast over rows.
template <typename T> Tensor<T> add_row(const Tensor<T>& a, const Tensor<T>& v);
/// a [n x m] * c [n x 1] broadcast over columns.
template <typename T> Tensor<T> mul_col(const Tensor<T>& a, const Tensor<T>& c);

template <typename T> Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);
/// a * b^T
template <typename T> Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b);
/// x * w + b with w [in x out], b [1 x out] (b may be undefined).
template <typename T> Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b);

template <typename T> Tensor<T> sum(const Tensor<T>& a);
template <typename T> Tensor<T> mean(const Tensor<T>& a);
/// [n x m] -> [n x 1]
template <typename T> Tensor<T> row_sum(const Tensor<T>& a);
template <typename T> Tensor<T> concat_cols(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> slice_rows(const Tensor<T>& a, Eigen::Index start, Eigen::Index count);
template <typename T> Tensor<T> slice_cols(const Tensor<T>& a, Eigen::Index start, Eigen::Index count);
/// Picks rows by index (with repetition allowed).
template <typename T> Tensor<T> gather_rows(const Tensor<T>& a, const std::vector<Eigen::Index>& rows);

template <typename T> Tensor<T> softmax_rows(const Tensor<T>& a);
template <typename T> Tensor<T> log_softmax_rows(const Tensor<T>& a);

/// Row-wise x / max(||x||, 1e-12).
template <typename T> Tensor<T> l2_normalize_rows(const Tensor<T>& a);
/// Row-wise g * x / max(||x||, 1e-12) with a learnable 1x1 gain g.
template <typename T> Tensor<T> scale_norm_rows(const Tensor<T>& a, const Tensor<T>& g);

// --- sequence ops (rows = batch * time) ---------------------------------------

/// Overlapping patch extraction for a 1-D convolution with zero padding.
/// [B*T x C] -> [B*T_out x kernel*C], column block j holds input offset j.
template <typename T>
Tensor<T> im2col_1d(const Tensor<T>& x, int batch, int time, int kernel, int stride, int padding);

/// Depthwise 1-D convolution with odd kernel, same-length zero padding.
/// w [kernel x C], b [1 x C].
template <typename T>
Tensor<T> depthwise_conv1d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, int batch, int time);

/// Multi-head scaled dot-product self-attention on packed qkv [B*T x 3C].
template <typename T>
Tensor<T> self_attention(const Tensor<T>& qkv, int batch, int time, int heads);

/// [B*T x C] -> [B x C], mean over time.
template <typename T> Tensor<T> mean_over_time(const Tensor<T>& x, int batch, int time);
/// [B x C] -> [B*T x C], each row repeated T times.
template <typename T> Tensor<T> repeat_over_time(const Tensor<T>& x, int time);
/// [T x C] -> [B*T x C], the whole block tiled B times.
template <typename T> Tensor<T> tile_batch(const Tensor<T>& x, int batch);
/// Nearest-neighbour resampling along time: [B*T_in x C] -> [B*T_out x C].
template <typename T> Tensor<T> upsample_nearest(const Tensor<T>& x, int batch, int time_in, int time_out);

}  // namespace ptst::ag
