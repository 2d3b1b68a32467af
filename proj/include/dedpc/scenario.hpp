#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "dedpc/grid.hpp"
#include "dedpc/swing.hpp"
#include "dedpc/types.hpp"

namespace dedpc::scenario {

struct RegimeSpec {
  std::string label;
  double omega_bound_hz = 0.0;
};

inline const RegimeSpec kNominal{"NO", 0.05};
inline const RegimeSpec kTight{"TO", 0.0016};
/// "NO" or "TO" (case-insensitive); throws InvalidInput otherwise.
RegimeSpec regime_from_label(const std::string& label);

/// P0 until t0, a ramp of slope `rate` for `duration` seconds, then flat.
struct LoadRamp {
  double p0 = 0.0;
  double t0 = 0.0;
  double duration = 0.0;
  double rate = 0.0;

  double value(double t) const;
};

struct HorizonSpec {
  double dt = 0.01;
  Index n_steps = 6000;
};

struct ProblemInstance {
  int id = 0;
  std::uint64_t seed = 0;
  RegimeSpec regime;
  HorizonSpec horizon;
  std::vector<LoadRamp> loads;  // one per load bus, network order
  Vec cost;                     // generators then slack
  Vec s;                        // perturbation factor per generator
  Vec omega0;                   // initial generator frequency, rad/s
  Vec p_opt;                    // static dispatch at the initial loads
  Vec p_g0;                     // initial generator inputs
  Vec x0;                       // (non-slack angles, omegas, P_s)

  /// Loads x n_steps, column k holding the loads at t_k = k dt.
  Mat load_forecast() const;
  Vec loads_at(double t) const;
  swing::SwingState initial_state(const grid::Network& net) const;
};

struct SamplerOptions {
  HorizonSpec horizon;
  int max_retries = 100;
};

/// Draws one instance. Loads, costs, perturbation and omega0 come from a
/// mt19937_64 seeded with `seed`; a draw whose power flow fails is redrawn
/// from the same stream, at most max_retries times (then InfeasibleInjection).
ProblemInstance sample_instance(const grid::Network& net, const RegimeSpec& regime, std::uint64_t seed,
                                const SamplerOptions& opts = {});

struct Dataset {
  std::vector<ProblemInstance> train;
  std::vector<ProblemInstance> test;
};

/// n_total instances with per-instance seeds drawn from `seed`, shuffled and
/// split into n_train / n_total - n_train.
Dataset make_dataset(const grid::Network& net, const RegimeSpec& regime, int n_total, int n_train,
                     std::uint64_t seed, const SamplerOptions& opts = {});

inline constexpr int kDatasetVersion = 1;
/// Writes `instances` as one JSON document; `n_knots` sets the resolution of
/// the informational downsampled forecast stored with each record.
void save_instances(const std::filesystem::path& path, const std::vector<ProblemInstance>& instances,
                    Index n_knots = 50);
std::vector<ProblemInstance> load_instances(const std::filesystem::path& path);
void save_dataset(const std::filesystem::path& dir, const Dataset& data);
Dataset load_dataset(const std::filesystem::path& dir);

/// Generator input knots for identification runs: a clipped random walk from
/// p_g0 with steps up to `max_step` scaled by a per-trajectory activity level.
Mat random_input_knots(const grid::Network& net, const Vec& p_g0, Index n_knots, double max_step,
                       std::mt19937_64& rng);

}  // namespace dedpc::scenario
