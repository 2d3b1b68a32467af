#pragma once

#include <filesystem>
#include <random>
#include <vector>

#include "dedpc/diffcore.hpp"
#include "dedpc/grid.hpp"
#include "dedpc/types.hpp"

namespace dedpc::koopman {

/// Shapes of the lifted model. The state x is (angles, generator omegas, P_s);
/// the lifted vector psi is (omegas, P_s, latent); inputs are (P_gen, P_load).
struct KoopmanDims {
  Index n_angles = 0;
  Index n_gen = 0;
  Index n_loads = 0;
  Index n_latent = 0;
  Index hidden = 0;

  Index n_x() const { return n_angles + n_gen + 1; }
  Index n_psi() const { return n_gen + 1 + n_latent; }
  Index n_u() const { return n_gen + n_loads; }
  Index slack_slot() const { return n_gen; }
};

/// Optional physics feature block appended to x before the MLP: network
/// injections at the non-slack buses and, with `rates`, their time
/// derivatives at generators and slack under the current frequencies plus the
/// matching algebraic angle velocities.
struct InjectionFeatures {
  Mat coupling;                        // |V_i||V_j||Y_ij| over all buses
  std::vector<Index> slots;            // bus index of each non-slack angle slot
  std::vector<Index> generator_slots;  // angle slot of each generator
  Index slack = 0;
  bool rates = false;

  bool empty() const { return slots.empty(); }
  Index size() const;
};

/// Observable lifting N(x; w): standardize features, two tanh layers, linear
/// output, plus a linear skip from the standardized features.
struct ObservableNet {
  Vec shift;  // feature standardization
  Vec scale;
  Mat w1, b1, w2, b2, w3, b3;
  Mat skip;  // n_latent x n_features; zero when unused
};

struct KoopmanModel {
  KoopmanDims dims;
  InjectionFeatures features;
  ObservableNet net;
  Mat K;  // n_psi x n_psi
  Mat B;  // n_psi x n_u

  Index n_features() const { return dims.n_x() + features.size(); }
  /// Feature vectors for the columns of X (n_x x batch).
  Mat feature_batch(const Mat& X) const;
  /// Lifted vectors for the columns of X.
  Mat observe_batch(const Mat& X) const;
  /// A = [I, 0] picking the generator frequencies out of psi.
  Mat readout_omega() const;
  /// 1_s picking P_s out of psi.
  Vec readout_slack() const;
};

/// Allocates a model with deterministic random observable weights, K = I and
/// B = 0. `features` may be empty.
KoopmanModel make_model(const KoopmanDims& dims, InjectionFeatures features, std::mt19937_64& rng);
InjectionFeatures injection_features(const grid::Network& net, bool rates = true);

/// psi(x) = (omega, P_s, N(x; w)); the first n_gen + 1 entries are copied.
Vec observe(const Vec& x, const KoopmanModel& model);
/// psi_next = K (psi - B P) + B P
Vec ko_step(const Vec& psi, const Vec& input, const KoopmanModel& model);
/// psi_0 .. psi_N for inputs P_0 .. P_{N-1} (one column each).
Mat rollout(const Vec& psi0, const Mat& inputs, const KoopmanModel& model);
/// Same recursion on the tape; gradients flow to the inputs by the adjoint
/// recursion lambda_k = g_k + K^T lambda_{k+1}. Returns psi_0 .. psi_N.
ad::Var rollout(const Vec& psi0, const ad::Var& inputs, const KoopmanModel& model);

double spectral_radius(const Mat& K);
/// Growth-rate estimate of the dominant eigenvalue magnitude by repeated
/// application of K to a fixed start vector.
double spectral_radius_power(const Mat& K, int iterations = 20000);
double spectral_norm(const Mat& K);

/// Exact affine map from coarse generator knots to the physical readouts.
///
/// With the input interpolated from `n_knots` knots to `n_steps` fine steps,
/// readouts (omega block then P_s, rows) at psi_0 .. psi_{N-1} equal
///   free_response(psi0, loads) + reshape(gain * vec(knots)).
/// vec() is column-major, matching the n_gen x n_knots knot matrix layout.
class KoopmanResponse {
 public:
  KoopmanResponse(const KoopmanModel& model, Index n_steps, Index n_knots);

  Index n_steps() const { return n_steps_; }
  Index n_knots() const { return n_knots_; }
  Index n_out() const { return n_out_; }
  const Mat& gain() const { return gain_; }
  /// Rows of the gain split by readout: frequencies (row g + n_gen * k) and
  /// slack power (row k).
  const Mat& omega_gain() const { return omega_gain_; }
  const Mat& slack_gain() const { return slack_gain_; }
  /// Readouts (n_gen + 1) x N with zero generator input.
  Mat free_response(const Vec& psi0, const Mat& loads) const;
  /// Readouts for a concrete knot matrix (n_gen x n_knots).
  Mat outputs(const Mat& free, const Mat& knots) const;
  /// Tape version; `knots` may hold several instances side by side
  /// (n_gen x n_knots*batch) with matching `free` blocks (n_out x N*batch).
  ad::Var outputs(const Mat& free, const ad::Var& knots) const;

 private:
  const KoopmanModel* model_;
  Index n_steps_;
  Index n_knots_;
  Index n_out_;
  Mat gain_;  // (n_out * N) x (n_gen * n_knots)
  Mat omega_gain_;
  Mat slack_gain_;
};

/// Transition pairs (x_k, P_k, x_{k+1}) stored column-wise.
struct TransitionDataset {
  Mat x0;
  Mat u;
  Mat x1;
  std::vector<int> group;  // source trajectory, used for held-out splits

  Index size() const { return x0.cols(); }
  void append(const Vec& xa, const Vec& input, const Vec& xb, int source);
};

struct KoopmanTrainConfig {
  Index n_latent = 30;
  Index hidden = 64;
  int epochs = 200;
  Index batch = 64;
  double lr = 1e-3;
  double weight_decay = 0.0;
  double epsilon = 1e-8;           // relative-loss denominator floor
  double stability_weight = 10.0;  // lambda_s
  double stability_margin = 1e-3;  // delta
  double validation_fraction = 0.1;
  bool injection_features = true;
  bool injection_rates = true;
  bool linear_skip = true;
  double skip_gain = 0.1;  // latent scale of the skip copy, in feature units
  /// Re-solve K and B by weighted least squares after every epoch (AdamW
  /// then trains only the observable net). Off: AdamW on everything, with
  /// K = I and B = 0 at the start.
  bool least_squares_operator = true;
  double ridge = 1e-10;           // relative Tikhonov weight pulling K toward 0
  double rank_tolerance = 1e-7;   // relative singular-value cut on the lifted data
  std::uint64_t seed = 1;
  bool verbose = false;
};

struct KoopmanTrainReport {
  std::vector<double> epoch_loss;
  std::vector<double> validation_history;  // entry 0 is before the first epoch
  int best_epoch = 0;
  double validation_loss = 0.0;  // mean relative one-step loss on held-out pairs
  double train_loss = 0.0;
  double stability_penalty = 0.0;
  double spectral_norm = 0.0;
  double spectral_radius = 0.0;
  Index train_pairs = 0;
  Index validation_pairs = 0;
};

/// Per-pair relative one-step error
///   ||K(psi(x_k) - B P_k) + B P_k - psi(x_{k+1})||^2 / (||x_k - x_{k+1}||^2 + eps).
Vec relative_one_step_loss(const KoopmanModel& model, const Mat& x0, const Mat& u, const Mat& x1,
                           double epsilon);

/// weight * relu(rho(K) - (1 - margin))^2
double stability_penalty(const Mat& K, double weight, double margin);

/// Fits K, B and the observable weights on the mean relative one-step loss,
/// keeping the epoch with the lowest held-out loss. The stability penalty acts
/// on the spectral radius; in least-squares mode eigenvalues beyond the margin
/// are clipped instead. Throws TrainingFailure when the loss becomes non-finite.
KoopmanModel train_koopman(const TransitionDataset& data, const KoopmanDims& dims,
                           InjectionFeatures features, const KoopmanTrainConfig& config,
                           KoopmanTrainReport* report = nullptr);

inline constexpr int kCheckpointVersion = 1;
void save_model(const std::filesystem::path& path, const KoopmanModel& model);
/// Throws FormatError on a version mismatch or a corrupt/truncated file.
KoopmanModel load_model(const std::filesystem::path& path);

}  // namespace dedpc::koopman
