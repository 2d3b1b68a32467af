#pragma once

#include <cstdint>
#include <functional>
#include <random>
#include <vector>

#include "dedpc/types.hpp"

namespace dedpc::ad {

class Tape;

/// Handle to a node on a Tape. Cheap to copy; only valid while the tape lives.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  const Mat& value() const;
  const Mat& grad() const;
  Index rows() const { return value().rows(); }
  Index cols() const { return value().cols(); }
  double scalar() const { return value()(0, 0); }
  std::size_t id() const { return id_; }
  Tape* tape() const { return tape_; }

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Reverse-mode tape over dense matrices.
///
/// Nodes are appended in evaluation order, so reverse creation order is a
/// topological order and backward() touches every node once.
class Tape {
 public:
  using Backward = std::function<void(Tape&, std::size_t self)>;

  Var leaf(Mat value, bool requires_grad = true);
  Var constant(Mat value) { return leaf(std::move(value), false); }

  /// Appends a node computed from `parents`. `backward` reads grad(self) and
  /// accumulates into the parents' gradients; it is skipped when no parent
  /// needs a gradient.
  Var push(Mat value, std::vector<std::size_t> parents, Backward backward);

  /// Seeds d root / d root = 1 and propagates to every node. Throws
  /// InvalidInput for a non-scalar root and NumericFault on NaN/Inf gradients.
  void backward(const Var& root);

  const Mat& value(std::size_t id) const { return nodes_[id].value; }
  const Mat& grad(std::size_t id) const { return nodes_[id].grad; }
  /// Gradient accumulator of a node; allocated during backward().
  Mat& grad_ref(std::size_t id) { return nodes_[id].grad; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Mat value;
    Mat grad;
    bool requires_grad = false;
    std::vector<std::size_t> parents;
    Backward backward;
  };
  std::vector<Node> nodes_;
};

// Elementwise and linear algebra.
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var cwise_mul(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var matmul(const Var& a, const Var& b);
/// a + bias * 1^T with bias a column vector.
Var add_col_bias(const Var& a, const Var& bias);
Var relu(const Var& a);
Var tanh(const Var& a);
Var abs(const Var& a);
Var square(const Var& a);
/// Sum of all entries, as a 1x1 node.
Var sum(const Var& a);
Var squared_norm(const Var& a);
/// Sum over columns of a .* w with w constant, as a 1x1 node.
Var weighted_sum(const Var& a, const Mat& w);
Var vcat(const std::vector<Var>& parts);
Var rows(const Var& a, Index start, Index count);
Var cols(const Var& a, Index start, Index count);

/// Padding on each side for a length-preserving convolution of width w:
/// ceil((w-1)/2) on the left and floor((w-1)/2) on the right.
inline Index conv_left_pad(Index width) { return width / 2; }

/// Stride-1 zero-padded 1-D convolution (cross-correlation) along columns.
///
/// input:  C_in x (L * segments), each block of `segment_length` columns is
///         an independent sequence (0 means a single segment).
/// weight: C_out x (C_in * width), column c * width + m holds tap m of channel c.
/// bias:   C_out x 1.
/// Output length equals input length for every width, odd or even.
Var conv1d(const Var& input, const Var& weight, const Var& bias, Index width,
           Index segment_length = 0);

/// Interpolation weights of fine index `f` over `n_knots` knots spread
/// evenly from the first to the last fine index.
struct InterpWeight {
  Index lower;
  double frac;  // weight on lower + 1
};
InterpWeight interp_weight(Index f, Index n_knots, Index n_fine);

/// Piecewise-linear resampling of each row from n_knots to n_fine columns.
/// Knot j sits at fractional fine position j * (n_fine - 1) / (n_knots - 1).
/// With segments, each block of `n_knots` columns is resampled separately.
Mat linear_interpolate(const Mat& knots, Index n_fine, Index n_knots = 0);
Var linear_interpolate(const Var& knots, Index n_fine, Index n_knots = 0);

/// Deterministic uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialization.
Mat uniform_init(Index rows, Index cols, Index fan_in, std::mt19937_64& rng);

struct AdamWConfig {
  double lr = 5e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

struct OptimizerState {
  std::vector<Mat> m;
  std::vector<Mat> v;
  std::int64_t step = 0;
  AdamWConfig config;
};

OptimizerState make_optimizer(const std::vector<Mat*>& params, const AdamWConfig& config);

/// Decoupled weight decay followed by a bias-corrected Adam update.
void adamw_step(const std::vector<Mat*>& params, const std::vector<Mat>& grads,
                OptimizerState& state);

}  // namespace dedpc::ad
