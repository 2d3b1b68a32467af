#pragma once

#include <vector>

#include "dedpc/diffcore.hpp"
#include "dedpc/grid.hpp"
#include "dedpc/koopman.hpp"
#include "dedpc/scenario.hpp"
#include "dedpc/types.hpp"

// Dispatch problem on the Koopman surrogate, shared by the policy loss and
// the online solver. Decisions are n_gen x n_knots coarse knots; the fine
// input is their linear interpolation over n_steps steps.
namespace dedpc::dedko {

struct DedKoProblem {
  Mat free;  // (n_gen + 1) x n_steps readouts with zero generator input
  Vec cost;  // generators then slack
  Vec p_min, p_max, p_g0;
  double dt = 0.01;
  double omega_bound = 0.0;  // rad/s
  double ramp_limit = 0.0;   // per coarse interval, pu
  Index n_steps = 0;
  Index n_knots = 0;

  Index n_gen() const { return p_g0.size(); }
};

/// Per-fine-step ramp limit scaled to the knot spacing. With knots spread
/// over n_steps - 1 intervals the spacing is at least n_steps / n_knots
/// fine steps, so the scaled bound n_steps / n_knots * eps is conservative.
double coarse_ramp_limit(double fine_limit, Index n_steps, Index n_knots);

DedKoProblem make_problem(const scenario::ProblemInstance& inst, const grid::Network& net,
                          const koopman::KoopmanModel& model, const koopman::KoopmanResponse& response,
                          double ramp_limit_fine);

/// Sum over fine steps of the interpolated input equals knots * weights.
Vec knot_sum_weights(Index n_knots, Index n_steps);

/// P_min + (1 + tanh z)/2 (P_max - P_min), row-wise per generator.
Mat bounded_knots(const Mat& z, const Vec& p_min, const Vec& p_max);
ad::Var bounded_knots(const ad::Var& z, const Mat& lower, const Mat& span);

struct SurrogateMetrics {
  double cost = 0.0;
  double max_freq_violation = 0.0;     // rad/s
  double max_ramp_violation = 0.0;     // pu per coarse interval
  double max_initial_violation = 0.0;  // pu
  Mat outputs;                         // (n_gen + 1) x n_steps
};

SurrogateMetrics evaluate_surrogate(const DedKoProblem& p, const koopman::KoopmanResponse& response,
                                    const Mat& knots);

/// Differentiable pieces on a batch of problems laid side by side: knots is
/// n_gen x (n_knots * batch), outputs (n_gen + 1) x (n_steps * batch).
struct BatchTerms {
  ad::Var cost;          // summed over the batch
  ad::Var freq_excess;   // relu(|omega| - bound) per readout, 2 rows per generator
  ad::Var ramp_excess;   // relu(|delta pi| - limit), coarse
  ad::Var initial_gap;   // pi_0 - p_g0
  ad::Var outputs;
};

BatchTerms batch_terms(const std::vector<const DedKoProblem*>& problems,
                       const koopman::KoopmanResponse& response, const ad::Var& knots);

}  // namespace dedpc::dedko
