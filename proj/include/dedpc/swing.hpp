#pragma once

#include <filesystem>
#include <vector>

#include "dedpc/grid.hpp"
#include "dedpc/types.hpp"

namespace dedpc::swing {

struct SwingState {
  Vec theta;  // non-slack angles, rad, network slot order
  Vec omega;  // generator frequency deviations, rad/s
  double time = 0.0;
};

/// Time-gridded solution of the swing DAE.
///
/// states[k] is the state at t_k = k * dt (n_steps + 1 entries). Inputs are
/// held constant over [t_k, t_{k+1}); states[k + 1] therefore satisfies the
/// load balance for p_load column k. slack_power[k] = f_s(theta(t_k)).
struct Trajectory {
  double dt = 0.0;
  std::vector<SwingState> states;
  Vec slack_power;
  Mat p_gen;   // generators x n_steps
  Mat p_load;  // loads x n_steps

  std::size_t num_steps() const { return states.empty() ? 0 : states.size() - 1; }
  /// Full state x_k = (angles, omegas, P_s) used by the Koopman model.
  Vec state_vector(std::size_t k) const;
};

struct SimOptions {
  double newton_tolerance = 1e-10;
  int max_newton_iterations = 25;
};

/// Integrates M w' + D w = P - f(theta), theta' = w at generators together with
/// L - f(theta) = 0 at load and junction buses, using the trapezoidal rule with a
/// full Newton solve per step. Algebraic angles are re-solved whenever the
/// held load changes, so input discontinuities on the grid are handled exactly.
///
/// Throws InitializationError when x0's algebraic angles cannot be made
/// consistent and StepFailure (carrying the step index) when Newton fails.
Trajectory simulate(const grid::Network& net, const Mat& p_gen, const Mat& p_load,
                    const SwingState& x0, double dt, std::size_t n_steps,
                    const SimOptions& opts = {});

/// Re-solves the algebraic angles of `state` for the given loads, keeping the
/// generator angles. Throws InitializationError on failure.
SwingState make_consistent(const grid::Network& net, const SwingState& state, const Vec& p_load,
                           const SimOptions& opts = {});

/// Largest |L_i - f_i(theta)| over load and junction buses.
double algebraic_residual(const grid::Network& net, const Vec& theta_nonslack, const Vec& p_load);

/// Full per-bus angle vector with the slack pinned to zero.
Vec full_angles(const grid::Network& net, const Vec& theta_nonslack);

/// Kinetic plus network potential energy for frozen inputs; non-increasing
/// along exact trajectories because damping dissipates sum D w^2.
double storage_function(const grid::Network& net, const SwingState& state, const Vec& p_gen,
                        const Vec& p_load);

struct EvalMetrics {
  double cost = 0.0;
  double max_freq_violation_hz = 0.0;
  double max_ramp_violation = 0.0;
};

/// `cost` lists generators then the slack. The frequency bound is symmetric, in Hz.
EvalMetrics evaluate_schedule(const Trajectory& traj, const Vec& cost, double omega_bound_hz,
                              double ramp_limit);

/// Columns: time, theta per bus, omega per generator in Hz, P_s, P per generator.
void write_trajectory_csv(const std::filesystem::path& path, const grid::Network& net,
                          const Trajectory& traj);

}  // namespace dedpc::swing
