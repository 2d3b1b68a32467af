#include "dedpc/dedko.hpp"

#include <algorithm>

#include "dedpc/errors.hpp"

namespace dedpc::dedko {

using ad::Tape;
using ad::Var;

double coarse_ramp_limit(double fine_limit, Index n_steps, Index n_knots) {
  return static_cast<double>(n_steps) / static_cast<double>(n_knots) * fine_limit;
}

DedKoProblem make_problem(const scenario::ProblemInstance& inst, const grid::Network& net,
                          const koopman::KoopmanModel& model, const koopman::KoopmanResponse& response,
                          double ramp_limit_fine) {
  if (inst.horizon.n_steps != response.n_steps())
    throw InvalidInput("instance horizon does not match the response horizon");
  DedKoProblem p;
  const Vec psi0 = koopman::observe(inst.x0, model);
  const Mat loads = inst.load_forecast();
  p.free = response.free_response(psi0, loads);
  p.cost = inst.cost;
  p.p_min = net.generator_min();
  p.p_max = net.generator_max();
  p.p_g0 = inst.p_g0;
  p.dt = inst.horizon.dt;
  p.omega_bound = hz_to_rad(inst.regime.omega_bound_hz);
  p.n_steps = response.n_steps();
  p.n_knots = response.n_knots();
  p.ramp_limit = coarse_ramp_limit(ramp_limit_fine, p.n_steps, p.n_knots);
  return p;
}

Vec knot_sum_weights(Index n_knots, Index n_steps) {
  Vec w = Vec::Zero(n_knots);
  for (Index k = 0; k < n_steps; ++k) {
    const auto iw = ad::interp_weight(k, n_knots, n_steps);
    w(iw.lower) += 1.0 - iw.frac;
    w(iw.lower + 1) += iw.frac;
  }
  return w;
}

Mat bounded_knots(const Mat& z, const Vec& p_min, const Vec& p_max) {
  Mat out(z.rows(), z.cols());
  for (Index i = 0; i < z.rows(); ++i)
    for (Index j = 0; j < z.cols(); ++j)
      out(i, j) = p_min(i) + 0.5 * (1.0 + std::tanh(z(i, j))) * (p_max(i) - p_min(i));
  // rounding can land a hair outside when tanh saturates
  for (Index i = 0; i < z.rows(); ++i) out.row(i) = out.row(i).cwiseMax(p_min(i)).cwiseMin(p_max(i));
  return out;
}

Var bounded_knots(const Var& z, const Mat& lower, const Mat& span) {
  Tape& t = *z.tape();
  const Mat th = z.value().array().tanh().matrix();
  Mat out = lower + 0.5 * (Mat::Ones(th.rows(), th.cols()) + th).cwiseProduct(span);
  out = out.cwiseMax(lower).cwiseMin(lower + span);
  const auto iz = z.id();
  Mat slope = 0.5 * (Mat::Ones(th.rows(), th.cols()) - th.cwiseProduct(th)).cwiseProduct(span);
  return t.push(std::move(out), {iz}, [iz, slope = std::move(slope)](Tape& t, std::size_t self) {
    t.grad_ref(iz) += t.grad(self).cwiseProduct(slope);
  });
}

SurrogateMetrics evaluate_surrogate(const DedKoProblem& p, const koopman::KoopmanResponse& response,
                                    const Mat& knots) {
  if (knots.rows() != p.n_gen() || knots.cols() != p.n_knots) throw InvalidInput("knot matrix shape");
  SurrogateMetrics m;
  m.outputs = response.outputs(p.free, knots);
  const Index ng = p.n_gen();
  const Vec w = knot_sum_weights(p.n_knots, p.n_steps);
  m.cost = p.dt * (p.cost.head(ng).dot(knots * w) + p.cost(ng) * m.outputs.row(ng).cwiseAbs().sum());
  m.max_freq_violation = std::max(0.0, m.outputs.topRows(ng).cwiseAbs().maxCoeff() - p.omega_bound);
  for (Index j = 0; j + 1 < p.n_knots; ++j)
    for (Index g = 0; g < ng; ++g)
      m.max_ramp_violation =
          std::max(m.max_ramp_violation, std::abs(knots(g, j + 1) - knots(g, j)) - p.ramp_limit);
  m.max_initial_violation = (knots.col(0) - p.p_g0).cwiseAbs().maxCoeff();
  return m;
}

BatchTerms batch_terms(const std::vector<const DedKoProblem*>& problems,
                       const koopman::KoopmanResponse& response, const Var& knots) {
  if (problems.empty()) throw InvalidInput("empty batch");
  const auto nb = static_cast<Index>(problems.size());
  const DedKoProblem& p0 = *problems.front();
  const Index ng = p0.n_gen(), nk = p0.n_knots, n = p0.n_steps;
  if (knots.rows() != ng || knots.cols() != nk * nb) throw InvalidInput("batch knot shape");
  Tape& t = *knots.tape();

  Mat free(ng + 1, n * nb);
  Mat wk(ng, nk * nb), ws(1, n * nb), bound(2 * ng, n * nb);
  Mat diff = Mat::Zero(nk * nb, (nk - 1) * nb), pick = Mat::Zero(nk * nb, nb);
  Mat ramp(ng, (nk - 1) * nb), p_g0(ng, nb);
  const Vec w = knot_sum_weights(nk, n);
  for (Index b = 0; b < nb; ++b) {
    const DedKoProblem& p = *problems[static_cast<std::size_t>(b)];
    if (p.n_gen() != ng || p.n_knots != nk || p.n_steps != n) throw InvalidInput("mixed problem shapes in batch");
    free.middleCols(b * n, n) = p.free;
    for (Index g = 0; g < ng; ++g) wk.block(g, b * nk, 1, nk) = p.dt * p.cost(g) * w.transpose();
    ws.middleCols(b * n, n).setConstant(p.dt * p.cost(ng));
    bound.middleCols(b * n, n).setConstant(p.omega_bound);
    for (Index j = 0; j + 1 < nk; ++j) {
      diff(b * nk + j + 1, b * (nk - 1) + j) = 1.0;
      diff(b * nk + j, b * (nk - 1) + j) = -1.0;
    }
    ramp.middleCols(b * (nk - 1), nk - 1).setConstant(p.ramp_limit);
    pick(b * nk, b) = 1.0;
    p_g0.col(b) = p.p_g0;
  }

  BatchTerms out;
  out.outputs = response.outputs(free, knots);
  Var omega = ad::rows(out.outputs, 0, ng);
  Var slack = ad::rows(out.outputs, ng, 1);
  out.cost = ad::add(ad::weighted_sum(knots, wk), ad::weighted_sum(ad::abs(slack), ws));
  Var both = ad::vcat({omega, ad::scale(omega, -1.0)});
  out.freq_excess = ad::relu(ad::sub(both, t.constant(bound)));
  Var delta = ad::matmul(knots, t.constant(diff));
  out.ramp_excess = ad::relu(ad::sub(ad::abs(delta), t.constant(ramp)));
  out.initial_gap = ad::sub(ad::matmul(knots, t.constant(pick)), t.constant(p_g0));
  return out;
}

}  // namespace dedpc::dedko
