#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "dedpc/bench.hpp"
#include "dedpc/dpc.hpp"
#include "dedpc/grid.hpp"
#include "dedpc/koopman.hpp"
#include "dedpc/online.hpp"
#include "dedpc/scenario.hpp"

namespace dedpc::cli {

/// Every tunable of the pipeline under a flat dotted key. Values come from
/// the defaults, then a JSON config file (an object of flat keys), then
/// --set key=value and the dedicated flags, later sources winning. Without
/// --config the file named by DEDPC_CONFIG is used when set.
struct RunConfig {
  std::string network;  // empty: bundled 9-bus case
  std::string data_dir = "artifacts/data";
  std::string checkpoint_dir = "artifacts/checkpoints";
  std::string report_dir = "artifacts/reports";
  std::string regime = "NO";
  double omega_bound_hz = 0.0;  // 0: regime default

  std::uint64_t data_seed = 7;
  int n_total = 500;
  int n_train = 400;
  double dt = 0.01;
  Index n_steps = 6000;
  double ramp_limit = 5e-4;

  std::uint64_t koopman_seed = 11;
  int koopman_trajectories = 200;
  int koopman_pairs = 100;
  double koopman_dither = 1e-3;
  double koopman_max_step = 0.06;
  Index koopman_latent = 30;
  Index koopman_hidden = 64;
  int koopman_epochs = 200;
  Index koopman_batch = 64;
  double koopman_lr = 1e-3;
  double koopman_stability_weight = 10.0;
  double koopman_stability_margin = 1e-3;

  std::uint64_t dpc_seed = 1;
  Index n_knots = 50;
  double dpc_lr = 5e-4;
  double dpc_weight_decay = 0.01;
  int dpc_batch = 16;
  int dpc_epochs = 400;
  int dpc_patience = 50;
  double q_omega = 1e3;
  double q_ramp = 1e2;
  double q_initial = 1e4;

  int online_outer = 20;
  int online_inner = 500;
  double online_lr = 1e-2;
  double online_tolerance = 1e-4;

  int bench_limit = 0;
  bool verbose = true;

  /// Applies one key/value pair; throws InvalidInput on unknown keys or
  /// unparsable values.
  void set(const std::string& key, const std::string& value);
  void merge(const nlohmann::json& flat);
  /// Range and positivity checks; throws InvalidInput.
  void validate() const;
  nlohmann::json to_json() const;
  static std::vector<std::string> keys();

  scenario::RegimeSpec regime_spec() const;
  scenario::HorizonSpec horizon() const;
  std::filesystem::path network_path() const;
  std::filesystem::path dataset_path() const;     // data_dir/<regime>
  std::filesystem::path checkpoint_path() const;  // checkpoint_dir/<regime>
  std::filesystem::path report_path() const;      // report_dir/<regime>
  std::filesystem::path koopman_file() const;
  std::filesystem::path policy_file() const;

  koopman::KoopmanTrainConfig koopman_config() const;
  dpc::TrainConfig dpc_config() const;
  online::OnlineConfig online_config() const;
  bench::BenchConfig bench_config() const;
};

struct IdentificationConfig {
  int trajectories = 200;
  int pairs = 100;        // transitions drawn per trajectory
  double dither = 1e-3;   // uniform input noise on every other trajectory
  double max_step = 0.06;
  Index n_knots = 50;
  scenario::HorizonSpec horizon;
  std::uint64_t seed = 11;
};

/// Transition pairs from swing simulations of sampled instances driven by
/// random generator schedules.
koopman::TransitionDataset identification_data(const grid::Network& net, const scenario::RegimeSpec& regime,
                                               const IdentificationConfig& config);

/// Pipeline steps shared by the subcommands and the tests.
scenario::Dataset generate_data(const RunConfig& cfg, const grid::Network& net);
koopman::KoopmanModel fit_koopman(const RunConfig& cfg, const grid::Network& net,
                                  koopman::KoopmanTrainReport* report = nullptr);
dpc::PolicyParams train_dpc(const RunConfig& cfg, const grid::Network& net, const scenario::Dataset& data,
                            const koopman::KoopmanModel& model, dpc::TrainReport* report = nullptr);

/// Entry point of the command-line tool; returns the process exit status.
int dispatch_command(int argc, char** argv);

}  // namespace dedpc::cli
