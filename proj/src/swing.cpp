#include "dedpc/swing.hpp"

#include <fstream>
#include <iomanip>

#include "dedpc/errors.hpp"

namespace dedpc::swing {

using grid::Network;

Vec Trajectory::state_vector(std::size_t k) const {
  const auto& s = states[k];
  Vec x(s.theta.size() + s.omega.size() + 1);
  x << s.theta, s.omega, slack_power(static_cast<Index>(k));
  return x;
}

Vec full_angles(const Network& net, const Vec& theta_nonslack) {
  Vec theta = Vec::Zero(net.num_buses());
  const auto& slots = net.non_slack();
  for (std::size_t k = 0; k < slots.size(); ++k) theta(slots[k]) = theta_nonslack(static_cast<Index>(k));
  return theta;
}

namespace {

// Target injection at each algebraic bus: the load value, or zero at junctions.
Vec algebraic_targets(const Network& net, const Vec& p_load) {
  const auto& alg = net.algebraic();
  Vec target = Vec::Zero(static_cast<Index>(alg.size()));
  for (std::size_t a = 0; a < alg.size(); ++a) {
    for (Index l = 0; l < net.num_loads(); ++l)
      if (net.loads()[static_cast<std::size_t>(l)] == alg[a]) target(static_cast<Index>(a)) = p_load(l);
  }
  return target;
}

// Newton on the algebraic angles with everything else frozen. Returns false on failure.
bool solve_algebraic(const Network& net, Vec& theta, const Vec& target, const SimOptions& opts) {
  const auto& alg = net.algebraic();
  const auto na = static_cast<Index>(alg.size());
  for (int it = 0; it <= opts.max_newton_iterations; ++it) {
    const Vec f = grid::power_injection(net, theta);
    Vec r(na);
    for (Index a = 0; a < na; ++a) r(a) = f(alg[static_cast<std::size_t>(a)]) - target(a);
    if (!r.allFinite()) return false;
    if (r.lpNorm<Eigen::Infinity>() <= opts.newton_tolerance) return true;
    if (it == opts.max_newton_iterations) return false;
    const Mat full = grid::injection_jacobian(net, theta);
    Mat jac(na, na);
    for (Index p = 0; p < na; ++p)
      for (Index q = 0; q < na; ++q)
        jac(p, q) = full(alg[static_cast<std::size_t>(p)], alg[static_cast<std::size_t>(q)]);
    const Vec step = jac.partialPivLu().solve(-r);
    if (!step.allFinite()) return false;
    for (Index a = 0; a < na; ++a) theta(alg[static_cast<std::size_t>(a)]) += step(a);
  }
  return false;
}

Vec nonslack_part(const Network& net, const Vec& theta) {
  Vec out(net.num_angles());
  const auto& slots = net.non_slack();
  for (std::size_t k = 0; k < slots.size(); ++k) out(static_cast<Index>(k)) = theta(slots[k]);
  return out;
}

}  // namespace

double algebraic_residual(const Network& net, const Vec& theta_nonslack, const Vec& p_load) {
  const Vec f = grid::power_injection(net, full_angles(net, theta_nonslack));
  const Vec target = algebraic_targets(net, p_load);
  double worst = 0.0;
  const auto& alg = net.algebraic();
  for (std::size_t a = 0; a < alg.size(); ++a)
    worst = std::max(worst, std::abs(f(alg[a]) - target(static_cast<Index>(a))));
  return worst;
}

SwingState make_consistent(const Network& net, const SwingState& state, const Vec& p_load,
                           const SimOptions& opts) {
  if (state.theta.size() != net.num_angles() || state.omega.size() != net.num_generators())
    throw InitializationError("initial state has wrong dimensions");
  if (p_load.size() != net.num_loads()) throw InitializationError("initial load has wrong dimension");
  if (!state.theta.allFinite() || !state.omega.allFinite())
    throw InitializationError("initial state is not finite");
  Vec theta = full_angles(net, state.theta);
  if (!solve_algebraic(net, theta, algebraic_targets(net, p_load), opts))
    throw InitializationError("cannot solve load-bus balance for the initial state");
  SwingState out = state;
  out.theta = nonslack_part(net, theta);
  return out;
}

Trajectory simulate(const Network& net, const Mat& p_gen, const Mat& p_load, const SwingState& x0,
                    double dt, std::size_t n_steps, const SimOptions& opts) {
  const Index ng = net.num_generators();
  const Index nl = net.num_loads();
  const auto steps = static_cast<Index>(n_steps);
  if (p_gen.rows() != ng || p_gen.cols() < steps || p_load.rows() != nl || p_load.cols() < steps)
    throw InvalidInput("simulate: input sequences must have one column per step");
  if (!(dt > 0.0)) throw InvalidInput("simulate: dt must be positive");
  if (n_steps == 0) throw InvalidInput("simulate: n_steps must be positive");

  const auto& gens = net.generators();
  const auto& alg = net.algebraic();
  const auto na = static_cast<Index>(alg.size());
  const Vec m = net.inertia();
  const Vec d = net.damping();
  const double h = dt;
  const Index nu = 2 * ng + na;

  SwingState start = make_consistent(net, x0, p_load.col(0), opts);

  Trajectory traj;
  traj.dt = dt;
  traj.p_gen = p_gen.leftCols(steps);
  traj.p_load = p_load.leftCols(steps);
  traj.states.reserve(n_steps + 1);
  traj.slack_power.resize(steps + 1);

  Vec theta = full_angles(net, start.theta);
  Vec omega = start.omega;
  traj.states.push_back({start.theta, omega, 0.0});
  traj.slack_power(0) = grid::power_injection(net, theta)(net.slack());

  Vec held_load = p_load.col(0);
  Vec target = algebraic_targets(net, held_load);
  Mat jac(nu, nu);
  Vec r(nu);

  for (Index k = 0; k < steps; ++k) {
    if (k > 0 && p_load.col(k) != held_load) {
      held_load = p_load.col(k);
      target = algebraic_targets(net, held_load);
      if (!solve_algebraic(net, theta, target, opts))
        throw StepFailure(static_cast<std::size_t>(k),
                          "load-bus re-initialization failed at step " + std::to_string(k));
    }
    const Vec pg = p_gen.col(k);
    const Vec f0 = grid::power_injection(net, theta);
    Vec rhs0(ng);  // P - f_g - D w at the start of the step
    for (Index g = 0; g < ng; ++g) rhs0(g) = pg(g) - f0(gens[static_cast<std::size_t>(g)]) - d(g) * omega(g);

    Vec theta_new = theta;
    Vec omega_new = omega;
    bool converged = false;
    for (int it = 0; it <= opts.max_newton_iterations; ++it) {
      const Vec f1 = grid::power_injection(net, theta_new);
      for (Index g = 0; g < ng; ++g) {
        const Index b = gens[static_cast<std::size_t>(g)];
        r(g) = theta_new(b) - theta(b) - 0.5 * h * (omega(g) + omega_new(g));
        const double rhs1 = pg(g) - f1(b) - d(g) * omega_new(g);
        r(ng + g) = m(g) * (omega_new(g) - omega(g)) - 0.5 * h * (rhs0(g) + rhs1);
      }
      for (Index a = 0; a < na; ++a) r(2 * ng + a) = f1(alg[static_cast<std::size_t>(a)]) - target(a);
      if (!r.allFinite()) break;
      if (r.lpNorm<Eigen::Infinity>() <= opts.newton_tolerance) {
        converged = true;
        break;
      }
      if (it == opts.max_newton_iterations) break;

      const Mat fj = grid::injection_jacobian(net, theta_new);
      jac.setZero();
      for (Index g = 0; g < ng; ++g) {
        const Index bg = gens[static_cast<std::size_t>(g)];
        jac(g, g) = 1.0;
        jac(g, ng + g) = -0.5 * h;
        jac(ng + g, ng + g) = m(g) + 0.5 * h * d(g);
        for (Index g2 = 0; g2 < ng; ++g2) jac(ng + g, g2) = 0.5 * h * fj(bg, gens[static_cast<std::size_t>(g2)]);
        for (Index a = 0; a < na; ++a) jac(ng + g, 2 * ng + a) = 0.5 * h * fj(bg, alg[static_cast<std::size_t>(a)]);
      }
      for (Index a = 0; a < na; ++a) {
        const Index ba = alg[static_cast<std::size_t>(a)];
        for (Index g = 0; g < ng; ++g) jac(2 * ng + a, g) = fj(ba, gens[static_cast<std::size_t>(g)]);
        for (Index a2 = 0; a2 < na; ++a2) jac(2 * ng + a, 2 * ng + a2) = fj(ba, alg[static_cast<std::size_t>(a2)]);
      }
      const Vec step = jac.partialPivLu().solve(-r);
      if (!step.allFinite()) break;
      for (Index g = 0; g < ng; ++g) {
        theta_new(gens[static_cast<std::size_t>(g)]) += step(g);
        omega_new(g) += step(ng + g);
      }
      for (Index a = 0; a < na; ++a) theta_new(alg[static_cast<std::size_t>(a)]) += step(2 * ng + a);
    }
    if (!converged)
      throw StepFailure(static_cast<std::size_t>(k), "Newton failed at step " + std::to_string(k) +
                                                         " (t = " + std::to_string(k * h) + " s)");
    theta = theta_new;
    omega = omega_new;
    traj.states.push_back({nonslack_part(net, theta), omega, static_cast<double>(k + 1) * h});
    traj.slack_power(k + 1) = grid::power_injection(net, theta)(net.slack());
  }
  return traj;
}

double storage_function(const Network& net, const SwingState& state, const Vec& p_gen,
                        const Vec& p_load) {
  const Vec theta = full_angles(net, state.theta);
  const Mat& a = net.coupling();
  double potential = 0.0;
  for (Index i = 0; i < net.num_buses(); ++i)
    for (Index j = i + 1; j < net.num_buses(); ++j)
      if (a(i, j) != 0.0) potential += a(i, j) * (1.0 - std::cos(theta(i) - theta(j)));
  for (Index g = 0; g < net.num_generators(); ++g)
    potential -= p_gen(g) * theta(net.generators()[static_cast<std::size_t>(g)]);
  for (Index l = 0; l < net.num_loads(); ++l)
    potential -= p_load(l) * theta(net.loads()[static_cast<std::size_t>(l)]);
  const double kinetic = 0.5 * net.inertia().dot(state.omega.cwiseProduct(state.omega));
  return kinetic + potential;
}

EvalMetrics evaluate_schedule(const Trajectory& traj, const Vec& cost, double omega_bound_hz,
                              double ramp_limit) {
  const Index ng = traj.p_gen.rows();
  const auto steps = static_cast<Index>(traj.num_steps());
  EvalMetrics out;
  for (Index k = 0; k < steps; ++k)
    out.cost += traj.dt * (cost.head(ng).dot(traj.p_gen.col(k)) + cost(ng) * std::abs(traj.slack_power(k)));
  for (const auto& s : traj.states) {
    for (Index g = 0; g < s.omega.size(); ++g)
      out.max_freq_violation_hz =
          std::max(out.max_freq_violation_hz, rad_to_hz(std::abs(s.omega(g))) - omega_bound_hz);
  }
  for (Index k = 0; k + 1 < steps; ++k)
    for (Index g = 0; g < ng; ++g)
      out.max_ramp_violation = std::max(
          out.max_ramp_violation, std::abs(traj.p_gen(g, k + 1) - traj.p_gen(g, k)) - ramp_limit);
  return out;
}

void write_trajectory_csv(const std::filesystem::path& path, const Network& net,
                          const Trajectory& traj) {
  std::ofstream out(path);
  if (!out) throw InvalidInput("cannot write " + path.string());
  out << "time";
  for (const auto& b : net.buses()) out << ",theta_" << b.id;
  for (Index g : net.generators()) out << ",omega_hz_" << net.buses()[static_cast<std::size_t>(g)].id;
  out << ",P_s";
  for (Index g : net.generators()) out << ",P_" << net.buses()[static_cast<std::size_t>(g)].id;
  out << '\n' << std::setprecision(12);
  const auto steps = static_cast<Index>(traj.num_steps());
  for (std::size_t k = 0; k < traj.states.size(); ++k) {
    const auto& s = traj.states[k];
    out << s.time;
    const Vec theta = full_angles(net, s.theta);
    for (Index i = 0; i < theta.size(); ++i) out << ',' << theta(i);
    for (Index g = 0; g < s.omega.size(); ++g) out << ',' << rad_to_hz(s.omega(g));
    out << ',' << traj.slack_power(static_cast<Index>(k));
    // the final state has no step after it; repeat the last applied input
    const Index col = std::min<Index>(static_cast<Index>(k), steps - 1);
    for (Index g = 0; g < traj.p_gen.rows(); ++g) out << ',' << traj.p_gen(g, col);
    out << '\n';
  }
}

}  // namespace dedpc::swing
