#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "dedpc/types.hpp"

namespace dedpc::grid {

/// Junction buses carry no injection; their balance equation is still algebraic.
enum class BusKind { Slack, Generator, Load, Junction };

BusKind parse_bus_kind(const std::string& s);
std::string to_string(BusKind kind);

struct BusRecord {
  std::string id;
  BusKind kind = BusKind::Junction;
  double p_nominal = 0.0;  // P_n for generators, L_n (< 0) for loads
  double v_mag = 1.0;
  double inertia = 0.0;  // generators and slack only
  double damping = 0.0;
};

struct LineRecord {
  std::string from_bus;
  std::string to_bus;
  double resistance = 0.0;
  double reactance = 0.0;
};

/// Immutable bus/line model with role index maps.
///
/// Bus order is the order of the input records. Generators, loads and the
/// non-slack angle slots all follow that order, so the state vector
/// (non-slack angles, generator frequencies, slack power) is fixed by the
/// network file.
class Network {
 public:
  Network(std::vector<BusRecord> buses, Mat y_mag, double bound_fraction);

  const std::vector<BusRecord>& buses() const { return buses_; }
  Index num_buses() const { return static_cast<Index>(buses_.size()); }
  const Mat& y_mag() const { return y_mag_; }
  /// |V_i||V_j||Y_ij|
  const Mat& coupling() const { return coupling_; }

  Index slack() const { return slack_; }
  const std::vector<Index>& generators() const { return generators_; }
  const std::vector<Index>& loads() const { return loads_; }
  /// Every bus except the slack, in bus order; these are the angle slots.
  const std::vector<Index>& non_slack() const { return non_slack_; }
  /// Non-generator, non-slack buses: load angles solved algebraically.
  const std::vector<Index>& algebraic() const { return algebraic_; }

  Index num_generators() const { return static_cast<Index>(generators_.size()); }
  Index num_loads() const { return static_cast<Index>(loads_.size()); }
  Index num_angles() const { return static_cast<Index>(non_slack_.size()); }
  /// Dimension of the full state x = (angles, generator omegas, slack power).
  Index state_dim() const { return num_angles() + num_generators() + 1; }

  /// Position of bus `bus` among the non-slack angle slots, or -1 for the slack.
  Index angle_slot(Index bus) const { return angle_slot_[static_cast<std::size_t>(bus)]; }
  Index find_bus(const std::string& id) const;

  Vec generator_nominal() const;
  Vec generator_min() const;
  Vec generator_max() const;
  Vec load_nominal() const;
  Vec inertia() const;  // per generator
  Vec damping() const;  // per generator
  double bound_fraction() const { return bound_fraction_; }

 private:
  std::vector<BusRecord> buses_;
  Mat y_mag_;
  Mat coupling_;
  double bound_fraction_;
  Index slack_ = -1;
  std::vector<Index> generators_;
  std::vector<Index> loads_;
  std::vector<Index> non_slack_;
  std::vector<Index> algebraic_;
  std::vector<Index> angle_slot_;
};

/// Builds the admittance-magnitude matrix with |Y| = 1/sqrt(R^2 + X^2) per line.
/// Generator limits are P_n -/+ bound_fraction * P_n.
Network build_network(std::vector<BusRecord> buses, const std::vector<LineRecord>& lines,
                      double bound_fraction = 0.5);

Network load_network(const std::filesystem::path& path);
void save_network(const std::filesystem::path& path, const std::vector<BusRecord>& buses,
                  const std::vector<LineRecord>& lines);
/// The shipped 9-bus test system.
std::filesystem::path default_network_path();

/// f_i(theta) = sum_j |V_i||V_j||Y_ij| sin(theta_i - theta_j), one entry per bus.
Vec power_injection(const Network& net, const Vec& theta);
/// df_i/dtheta_j over all buses.
Mat injection_jacobian(const Network& net, const Vec& theta);

struct PowerFlowOptions {
  double tolerance = 1e-10;
  int max_iterations = 50;
};

/// Solves f_i(theta) = p_i at every non-slack bus with theta_slack = 0.
/// `p_nonslack` is indexed by non-slack slot; the result has one angle per bus.
/// Throws InfeasibleInjection when Newton does not converge.
Vec solve_power_flow(const Network& net, const Vec& p_nonslack, const PowerFlowOptions& opts = {});

/// Injection vector over non-slack slots for given generator and load values
/// (junction buses get zero).
Vec nonslack_injections(const Network& net, const Vec& p_gen, const Vec& p_load);

/// Steady-state merit-order dispatch minimizing sum c_i P_i + c_s |P_s| with
/// P_s = -sum P_i - sum L_i and P_i within limits. `cost` lists generators in
/// network order followed by the slack. Ties go to the earlier generator.
Vec static_dispatch(const Network& net, const Vec& loads, const Vec& cost);

/// Objective of a steady dispatch, used by tests and the scenario sampler.
double static_cost(const Vec& p_gen, double p_slack, const Vec& cost);

}  // namespace dedpc::grid
