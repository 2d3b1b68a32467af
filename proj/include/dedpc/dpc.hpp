#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "dedpc/dedko.hpp"
#include "dedpc/diffcore.hpp"
#include "dedpc/grid.hpp"
#include "dedpc/koopman.hpp"
#include "dedpc/scenario.hpp"
#include "dedpc/types.hpp"

namespace dedpc::dpc {

/// Channel layout of the policy input: load knots, costs, x0, p_g0.
struct InputLayout {
  Index n_loads = 0;
  Index n_cost = 0;
  Index n_state = 0;
  Index n_gen = 0;
  Index n_knots = 50;
  Index n_steps = 6000;

  Index channels() const { return n_loads + n_cost + n_state + n_gen; }
};

InputLayout layout_for(const grid::Network& net, Index n_knots, Index n_steps);

/// channels x n_knots. Load channel j holds the forecast at fine index
/// j * (n_steps / n_knots); the other channels are constant across knots.
Mat encode_input(const scenario::ProblemInstance& inst, const InputLayout& layout);

struct PolicyParams {
  InputLayout layout;
  std::vector<Index> widths{5, 10, 5};
  Index hidden = 30;
  Vec in_shift, in_scale;  // per-channel input standardization
  Mat w1, b1, w2, b2, w3, b3;
  Vec p_min, p_max;

  std::vector<Mat*> tensors() { return {&w1, &b1, &w2, &b2, &w3, &b3}; }
  std::vector<const Mat*> tensors() const { return {&w1, &b1, &w2, &b2, &w3, &b3}; }
};

/// Seeded uniform(+-1/sqrt(fan_in)) weights; identity standardization.
PolicyParams init_policy(const InputLayout& layout, const Vec& p_min, const Vec& p_max, std::uint64_t seed,
                         Index hidden = 30, std::vector<Index> widths = {5, 10, 5});

/// Per-channel mean and standard deviation over a set of instances.
void fit_standardization(PolicyParams& params, const std::vector<scenario::ProblemInstance>& instances);

struct Schedule {
  Mat coarse;  // n_gen x n_knots
  Mat fine;    // n_gen x n_steps
};

/// Last-layer activations before the tanh scaling (n_gen x n_knots).
Mat policy_preactivation(const Mat& encoded, const PolicyParams& params);
Schedule policy_forward(const scenario::ProblemInstance& inst, const PolicyParams& params);
Schedule policy_forward_encoded(const Mat& encoded, const PolicyParams& params);

/// Tape version over a batch: `encoded` holds the instances side by side
/// (channels x n_knots*batch); returns bounded coarse knots.
ad::Var policy_forward(const ad::Var& encoded, const std::vector<ad::Var>& weights, const PolicyParams& params);

struct LossWeights {
  double q_omega = 1e3;
  double q_ramp = 1e2;
  double q_initial = 1e4;
};

struct LossParts {
  double total = 0.0;
  double cost = 0.0;
  double frequency = 0.0;
  double ramp = 0.0;
  double initial = 0.0;
};

/// Mean over the batch of cost + Q_w |relu(|A psi| - w_bnd)|^2
/// + Q_r |relu(|delta pi| - ramp)|^2 + Q_0 |pi_0 - p_g0|^2 for given knots.
ad::Var dpc_objective(const std::vector<const dedko::DedKoProblem*>& problems,
                      const koopman::KoopmanResponse& response, const ad::Var& knots, const LossWeights& weights,
                      LossParts* parts = nullptr);

/// Loss of the policy on a batch. With `weight_vars` the gradient flows to
/// the policy weights; otherwise they are constants on a private tape and
/// only the value is returned. Throws NumericFault on non-finite values.
double dpc_loss(const std::vector<const dedko::DedKoProblem*>& problems, const std::vector<Mat>& encoded,
                const PolicyParams& params, const koopman::KoopmanResponse& response,
                const LossWeights& weights, std::vector<Mat>* grads = nullptr, LossParts* parts = nullptr);

struct TrainConfig {
  double lr = 5e-4;
  double weight_decay = 0.01;
  Index batch = 16;
  int epochs = 400;
  int patience = 50;  // epochs without improvement before stopping
  double min_improvement = 1e-6;  // relative
  LossWeights weights;
  std::uint64_t seed = 1;
  bool verbose = false;
};

struct TrainReport {
  std::vector<double> epoch_loss;
  int best_epoch = 0;
  double best_loss = 0.0;
  bool early_stopped = false;
};

/// Algorithm: shuffle, forward each minibatch through the policy and the
/// surrogate, AdamW on the policy weights. The epoch with the lowest mean
/// training loss is returned. Throws TrainingFailure carrying the epoch on
/// divergence.
PolicyParams train_policy(const std::vector<scenario::ProblemInstance>& train, const grid::Network& net,
                          const koopman::KoopmanModel& model, const koopman::KoopmanResponse& response,
                          const TrainConfig& config, TrainReport* report = nullptr,
                          double ramp_limit_fine = 5e-4);

struct Inference {
  Schedule schedule;
  double seconds = 0.0;
};

/// Encode, forward and interpolate, timed with a steady clock.
Inference infer(const scenario::ProblemInstance& inst, const PolicyParams& params);

inline constexpr int kPolicyVersion = 1;
void save_policy(const std::filesystem::path& path, const PolicyParams& params);
PolicyParams load_policy(const std::filesystem::path& path);

}  // namespace dedpc::dpc
