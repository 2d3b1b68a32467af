#pragma once

#include <cstdint>
#include <vector>

#include <json.hpp>

#include "dedpc/dedko.hpp"
#include "dedpc/grid.hpp"
#include "dedpc/koopman.hpp"
#include "dedpc/scenario.hpp"
#include "dedpc/types.hpp"

// Online baseline for the dispatch problem on the Koopman surrogate: an
// augmented Lagrangian method over the tanh-bounded knot parameterization.
// The first knot is pinned at p_g0, which removes the initial equality.
namespace dedpc::online {

enum class InnerMethod { Lbfgs, Adam };

struct OnlineConfig {
  InnerMethod inner = InnerMethod::Lbfgs;
  int memory = 10;        // L-BFGS pairs
  bool knot_metric = true;  // L-BFGS curvature in knot space rather than z
  double max_step = 2.0;  // largest change of any z per step
  // |z| cap; keeps tanh' alive so a knot parked near a bound can move back.
  // At 6 the knot is within 6e-6 of its span from the bound.
  double z_limit = 6.0;
  int outer_iterations = 20;
  int inner_iterations = 500;
  double lr = 1e-2;
  double min_lr = 1e-7;
  double rho0 = 10.0;
  double rho_growth = 10.0;
  double rho_max = 1e8;
  double residual_decrease = 0.5;  // grow rho unless the residual drops by this factor
  double tolerance = 1e-4;         // raw units: rad/s, pu, pu
  double objective_tolerance = 1e-7;  // relative change between outer rounds
  double stall = 1e-7;             // relative inner progress over a check window
  double lr_recovery = 1.0;        // lr growth after an accepted step, capped at lr
  // |P_s| is replaced by a Huber function of width smoothing * decay^outer
  // (floored at smoothing_min) while solving each subproblem
  double smoothing = 1e-2;
  double smoothing_decay = 0.1;
  double smoothing_min = 1e-6;
};

/// Penalty parameter of one outer round and the scaled residual it reached.
struct OuterStep {
  double rho = 0.0;
  double residual = 0.0;
};

struct SolveReport {
  Mat coarse;  // n_gen x n_knots
  Mat fine;    // n_gen x n_steps
  double objective = 0.0;
  double freq_residual = 0.0;     // rad/s above the bound, controllable steps
  double ramp_residual = 0.0;     // pu above the coarse ramp limit
  double initial_residual = 0.0;  // pu
  int iterations = 0;             // inner gradient steps
  int outer_iterations = 0;
  double seconds = 0.0;
  bool converged = false;
  std::vector<OuterStep> trace;

  double max_residual() const;
};

nlohmann::json to_json(const SolveReport& r);

/// Solves one problem. The response gain is shared between calls.
SolveReport solve_ded_ko(const dedko::DedKoProblem& problem, const koopman::KoopmanResponse& response,
                         const OnlineConfig& config = {});

/// Builds the problem from an instance (lifting x0 and the free response are
/// part of the timed solve).
SolveReport solve_ded_ko(const scenario::ProblemInstance& inst, const grid::Network& net,
                         const koopman::KoopmanModel& model, const koopman::KoopmanResponse& response,
                         double ramp_limit_fine, const OnlineConfig& config = {});

struct ToyResult {
  double objective = 0.0;
  Mat knots;
  bool feasible = false;
  std::int64_t evaluated = 0;
};

/// Exhaustive search on a single-generator problem. Knot 0 is pinned at
/// p_g0; every later knot ranges over `resolution` equal intervals of
/// [p_min, p_max]. Schedules violating the frequency or ramp limits by more
/// than `tolerance` are skipped. Ties keep the first schedule in
/// lexicographic order of knot indices (knot 1 most significant).
ToyResult brute_force_toy(const dedko::DedKoProblem& problem, const koopman::KoopmanResponse& response,
                          int resolution, double tolerance = 1e-9);

}  // namespace dedpc::online
