#include "dedpc/diffcore.hpp"

#include <algorithm>

#include "dedpc/errors.hpp"

namespace dedpc::ad {

const Mat& Var::value() const { return tape_->value(id_); }
const Mat& Var::grad() const { return tape_->grad(id_); }

Var Tape::leaf(Mat value, bool requires_grad) {
  nodes_.push_back({std::move(value), Mat(), requires_grad, {}, nullptr});
  return {this, nodes_.size() - 1};
}

Var Tape::push(Mat value, std::vector<std::size_t> parents, Backward backward) {
  bool needs = false;
  for (auto p : parents) needs = needs || nodes_[p].requires_grad;
  nodes_.push_back({std::move(value), Mat(), needs, std::move(parents),
                    needs ? std::move(backward) : Backward{}});
  return {this, nodes_.size() - 1};
}

void Tape::backward(const Var& root) {
  if (root.tape() != this) throw InvalidInput("backward: root belongs to another tape");
  const auto& rv = nodes_[root.id()].value;
  if (rv.rows() != 1 || rv.cols() != 1) throw InvalidInput("backward: root must be a scalar");
  for (auto& n : nodes_) {
    if (n.requires_grad) n.grad = Mat::Zero(n.value.rows(), n.value.cols());
  }
  if (!nodes_[root.id()].requires_grad) return;
  nodes_[root.id()].grad(0, 0) = 1.0;
  for (std::size_t i = root.id() + 1; i-- > 0;) {
    auto& n = nodes_[i];
    if (!n.requires_grad || !n.backward) continue;
    if (!n.grad.allFinite()) throw NumericFault("non-finite gradient during backward pass");
    n.backward(*this, i);
  }
  for (const auto& n : nodes_)
    if (n.requires_grad && !n.grad.allFinite())
      throw NumericFault("non-finite gradient during backward pass");
}

namespace {

void accumulate(Tape& t, std::size_t id, const Mat& delta) {
  if (t.requires_grad(id)) t.grad_ref(id) += delta;
}

void check_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw InvalidInput(std::string(op) + ": shape mismatch");
}

}  // namespace

Var add(const Var& a, const Var& b) {
  check_same_shape(a, b, "add");
  Tape& t = *a.tape();
  const auto ia = a.id(), ib = b.id();
  return t.push(a.value() + b.value(), {ia, ib}, [ia, ib](Tape& t, std::size_t self) {
    accumulate(t, ia, t.grad(self));
    accumulate(t, ib, t.grad(self));
  });
}

Var sub(const Var& a, const Var& b) {
  check_same_shape(a, b, "sub");
  Tape& t = *a.tape();
  const auto ia = a.id(), ib = b.id();
  return t.push(a.value() - b.value(), {ia, ib}, [ia, ib](Tape& t, std::size_t self) {
    accumulate(t, ia, t.grad(self));
    accumulate(t, ib, -t.grad(self));
  });
}

Var cwise_mul(const Var& a, const Var& b) {
  check_same_shape(a, b, "cwise_mul");
  Tape& t = *a.tape();
  const auto ia = a.id(), ib = b.id();
  return t.push(a.value().cwiseProduct(b.value()), {ia, ib}, [ia, ib](Tape& t, std::size_t self) {
    accumulate(t, ia, t.grad(self).cwiseProduct(t.value(ib)));
    accumulate(t, ib, t.grad(self).cwiseProduct(t.value(ia)));
  });
}

Var scale(const Var& a, double s) {
  Tape& t = *a.tape();
  const auto ia = a.id();
  return t.push(a.value() * s, {ia}, [ia, s](Tape& t, std::size_t self) {
    accumulate(t, ia, t.grad(self) * s);
  });
}

Var matmul(const Var& a, const Var& b) {
  if (a.cols() != b.rows()) throw InvalidInput("matmul: inner dimensions differ");
  Tape& t = *a.tape();
  const auto ia = a.id(), ib = b.id();
  Mat v = a.value() * b.value();
  return t.push(std::move(v), {ia, ib}, [ia, ib](Tape& t, std::size_t self) {
    if (t.requires_grad(ia)) t.grad_ref(ia).noalias() += t.grad(self) * t.value(ib).transpose();
    if (t.requires_grad(ib)) t.grad_ref(ib).noalias() += t.value(ia).transpose() * t.grad(self);
  });
}

Var add_col_bias(const Var& a, const Var& bias) {
  if (bias.cols() != 1 || bias.rows() != a.rows()) throw InvalidInput("add_col_bias: bias shape");
  Tape& t = *a.tape();
  const auto ia = a.id(), ib = bias.id();
  Mat v = a.value().colwise() + bias.value().col(0);
  return t.push(std::move(v), {ia, ib}, [ia, ib](Tape& t, std::size_t self) {
    accumulate(t, ia, t.grad(self));
    if (t.requires_grad(ib)) t.grad_ref(ib) += t.grad(self).rowwise().sum();
  });
}

Var relu(const Var& a) {
  Tape& t = *a.tape();
  const auto ia = a.id();
  return t.push(a.value().cwiseMax(0.0), {ia}, [ia](Tape& t, std::size_t self) {
    // zero slope at exactly 0
    const Mat mask = (t.value(ia).array() > 0.0).cast<double>();
    accumulate(t, ia, t.grad(self).cwiseProduct(mask));
  });
}

Var tanh(const Var& a) {
  Tape& t = *a.tape();
  const auto ia = a.id();
  Mat v = a.value().array().tanh().matrix();
  return t.push(std::move(v), {ia}, [ia](Tape& t, std::size_t self) {
    const auto& y = t.value(self);
    accumulate(t, ia, (t.grad(self).array() * (1.0 - y.array().square())).matrix());
  });
}

Var abs(const Var& a) {
  Tape& t = *a.tape();
  const auto ia = a.id();
  return t.push(a.value().cwiseAbs(), {ia}, [ia](Tape& t, std::size_t self) {
    // sign(0) = 0
    const Mat s = t.value(ia).unaryExpr([](double x) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
    accumulate(t, ia, t.grad(self).cwiseProduct(s));
  });
}

Var square(const Var& a) {
  Tape& t = *a.tape();
  const auto ia = a.id();
  return t.push(a.value().cwiseAbs2(), {ia}, [ia](Tape& t, std::size_t self) {
    accumulate(t, ia, 2.0 * t.grad(self).cwiseProduct(t.value(ia)));
  });
}

Var sum(const Var& a) {
  Tape& t = *a.tape();
  const auto ia = a.id();
  Mat v(1, 1);
  v(0, 0) = a.value().sum();
  return t.push(std::move(v), {ia}, [ia](Tape& t, std::size_t self) {
    const double g = t.grad(self)(0, 0);
    if (t.requires_grad(ia)) t.grad_ref(ia).array() += g;
  });
}

Var squared_norm(const Var& a) {
  Tape& t = *a.tape();
  const auto ia = a.id();
  Mat v(1, 1);
  v(0, 0) = a.value().squaredNorm();
  return t.push(std::move(v), {ia}, [ia](Tape& t, std::size_t self) {
    accumulate(t, ia, 2.0 * t.grad(self)(0, 0) * t.value(ia));
  });
}

Var weighted_sum(const Var& a, const Mat& w) {
  if (w.rows() != a.rows() || w.cols() != a.cols()) throw InvalidInput("weighted_sum: shape mismatch");
  Tape& t = *a.tape();
  const auto ia = a.id();
  Mat v(1, 1);
  v(0, 0) = a.value().cwiseProduct(w).sum();
  return t.push(std::move(v), {ia}, [ia, w](Tape& t, std::size_t self) {
    accumulate(t, ia, t.grad(self)(0, 0) * w);
  });
}

Var vcat(const std::vector<Var>& parts) {
  if (parts.empty()) throw InvalidInput("vcat: no parts");
  Tape& t = *parts.front().tape();
  const Index c = parts.front().cols();
  Index r = 0;
  std::vector<std::size_t> ids;
  for (const auto& p : parts) {
    if (p.cols() != c) throw InvalidInput("vcat: column mismatch");
    r += p.rows();
    ids.push_back(p.id());
  }
  Mat v(r, c);
  Index off = 0;
  for (const auto& p : parts) {
    v.middleRows(off, p.rows()) = p.value();
    off += p.rows();
  }
  return t.push(std::move(v), ids, [ids](Tape& t, std::size_t self) {
    Index off = 0;
    for (auto id : ids) {
      const Index n = t.value(id).rows();
      if (t.requires_grad(id)) t.grad_ref(id) += t.grad(self).middleRows(off, n);
      off += n;
    }
  });
}

Var rows(const Var& a, Index start, Index count) {
  if (start < 0 || start + count > a.rows()) throw InvalidInput("rows: out of range");
  Tape& t = *a.tape();
  const auto ia = a.id();
  return t.push(a.value().middleRows(start, count), {ia}, [ia, start, count](Tape& t, std::size_t self) {
    if (t.requires_grad(ia)) t.grad_ref(ia).middleRows(start, count) += t.grad(self);
  });
}

Var cols(const Var& a, Index start, Index count) {
  if (start < 0 || start + count > a.cols()) throw InvalidInput("cols: out of range");
  Tape& t = *a.tape();
  const auto ia = a.id();
  return t.push(a.value().middleCols(start, count), {ia}, [ia, start, count](Tape& t, std::size_t self) {
    if (t.requires_grad(ia)) t.grad_ref(ia).middleCols(start, count) += t.grad(self);
  });
}

Var conv1d(const Var& input, const Var& weight, const Var& bias, Index width, Index segment_length) {
  if (width < 1) throw InvalidInput("conv1d: width must be positive");
  const Index cin = input.rows();
  const Index total = input.cols();
  const Index seg = segment_length > 0 ? segment_length : total;
  if (total % seg != 0) throw InvalidInput("conv1d: length is not a multiple of the segment length");
  if (weight.cols() != cin * width) throw InvalidInput("conv1d: weight does not match input channels");
  if (bias.rows() != weight.rows() || bias.cols() != 1) throw InvalidInput("conv1d: bias shape");
  const Index left = conv_left_pad(width);

  // im2col, one column per output position
  Mat col = Mat::Zero(cin * width, total);
  for (Index s0 = 0; s0 < total; s0 += seg) {
    for (Index tpos = 0; tpos < seg; ++tpos) {
      for (Index m = 0; m < width; ++m) {
        const Index src = tpos + m - left;
        if (src < 0 || src >= seg) continue;
        for (Index c = 0; c < cin; ++c) col(c * width + m, s0 + tpos) = input.value()(c, s0 + src);
      }
    }
  }
  Mat out = weight.value() * col;
  out.colwise() += bias.value().col(0);

  Tape& t = *input.tape();
  const auto ii = input.id(), iw = weight.id(), ib = bias.id();
  return t.push(std::move(out), {ii, iw, ib},
                [ii, iw, ib, col = std::move(col), width, left, seg, cin, total](Tape& t, std::size_t self) {
                  const Mat& g = t.grad(self);
                  if (t.requires_grad(iw)) t.grad_ref(iw).noalias() += g * col.transpose();
                  if (t.requires_grad(ib)) t.grad_ref(ib) += g.rowwise().sum();
                  if (!t.requires_grad(ii)) return;
                  const Mat dcol = t.value(iw).transpose() * g;
                  Mat& din = t.grad_ref(ii);
                  for (Index s0 = 0; s0 < total; s0 += seg)
                    for (Index tpos = 0; tpos < seg; ++tpos)
                      for (Index m = 0; m < width; ++m) {
                        const Index src = tpos + m - left;
                        if (src < 0 || src >= seg) continue;
                        for (Index c = 0; c < cin; ++c) din(c, s0 + src) += dcol(c * width + m, s0 + tpos);
                      }
                });
}

InterpWeight interp_weight(Index f, Index n_knots, Index n_fine) {
  if (n_knots == 1 || n_fine == 1) return {0, 0.0};
  const double pos = static_cast<double>(f) * static_cast<double>(n_knots - 1) /
                     static_cast<double>(n_fine - 1);
  auto lower = static_cast<Index>(pos);
  if (lower >= n_knots - 1) return {n_knots - 2, 1.0};
  return {lower, pos - static_cast<double>(lower)};
}

namespace {

void check_interp(Index n_knots, Index n_fine) {
  if (n_knots < 2) throw InvalidInput("linear_interpolate: need at least two knots");
  if (n_fine < n_knots) throw InvalidInput("linear_interpolate: n_fine must be >= number of knots");
}

}  // namespace

Mat linear_interpolate(const Mat& knots, Index n_fine, Index n_knots) {
  const Index nk = n_knots > 0 ? n_knots : knots.cols();
  check_interp(nk, n_fine);
  if (knots.cols() % nk != 0) throw InvalidInput("linear_interpolate: ragged segments");
  const Index segs = knots.cols() / nk;
  Mat fine(knots.rows(), n_fine * segs);
  for (Index s = 0; s < segs; ++s) {
    for (Index f = 0; f < n_fine; ++f) {
      const auto w = interp_weight(f, nk, n_fine);
      const auto a = knots.col(s * nk + w.lower);
      const auto b = knots.col(s * nk + w.lower + 1);
      fine.col(s * n_fine + f) = a + w.frac * (b - a);
    }
  }
  return fine;
}

Var linear_interpolate(const Var& knots, Index n_fine, Index n_knots) {
  const Index nk = n_knots > 0 ? n_knots : knots.cols();
  Mat fine = linear_interpolate(knots.value(), n_fine, nk);
  Tape& t = *knots.tape();
  const auto ik = knots.id();
  return t.push(std::move(fine), {ik}, [ik, nk, n_fine](Tape& t, std::size_t self) {
    const Mat& g = t.grad(self);
    Mat& dk = t.grad_ref(ik);
    const Index segs = g.cols() / n_fine;
    for (Index s = 0; s < segs; ++s)
      for (Index f = 0; f < n_fine; ++f) {
        const auto w = interp_weight(f, nk, n_fine);
        dk.col(s * nk + w.lower) += (1.0 - w.frac) * g.col(s * n_fine + f);
        dk.col(s * nk + w.lower + 1) += w.frac * g.col(s * n_fine + f);
      }
  });
}

Mat uniform_init(Index rows, Index cols, Index fan_in, std::mt19937_64& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(std::max<Index>(fan_in, 1)));
  std::uniform_real_distribution<double> dist(-bound, bound);
  Mat m(rows, cols);
  // column-major fill order is part of the seeded contract
  for (Index j = 0; j < cols; ++j)
    for (Index i = 0; i < rows; ++i) m(i, j) = dist(rng);
  return m;
}

OptimizerState make_optimizer(const std::vector<Mat*>& params, const AdamWConfig& config) {
  OptimizerState s;
  s.config = config;
  for (const Mat* p : params) {
    s.m.push_back(Mat::Zero(p->rows(), p->cols()));
    s.v.push_back(Mat::Zero(p->rows(), p->cols()));
  }
  return s;
}

void adamw_step(const std::vector<Mat*>& params, const std::vector<Mat>& grads, OptimizerState& state) {
  if (params.size() != grads.size() || params.size() != state.m.size())
    throw InvalidInput("adamw_step: parameter/gradient count mismatch");
  const auto& c = state.config;
  ++state.step;
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Mat& p = *params[i];
    const Mat& g = grads[i];
    if (g.rows() != p.rows() || g.cols() != p.cols()) throw InvalidInput("adamw_step: shape mismatch");
    p *= (1.0 - c.lr * c.weight_decay);
    state.m[i] = c.beta1 * state.m[i] + (1.0 - c.beta1) * g;
    state.v[i] = c.beta2 * state.v[i] + (1.0 - c.beta2) * g.cwiseAbs2();
    p.array() -= c.lr * (state.m[i].array() / bc1) / ((state.v[i].array() / bc2).sqrt() + c.eps);
  }
}

}  // namespace dedpc::ad
