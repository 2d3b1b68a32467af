#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "dedpc/dpc.hpp"
#include "dedpc/grid.hpp"
#include "dedpc/koopman.hpp"
#include "dedpc/online.hpp"
#include "dedpc/scenario.hpp"

// Evaluation of the learned policy against the online baseline. Both
// schedules are replayed through the swing DAE; every reported violation
// comes from that simulation.
namespace dedpc::bench {

inline constexpr const char* kPolicyLabel = "DED-DPC";
inline constexpr const char* kOnlineLabel = "DED-KO online";

struct BenchConfig {
  double ramp_limit = 5e-4;  // per fine step, pu
  online::OnlineConfig online;
  int limit = 0;  // evaluate only the first `limit` instances when positive
  bool verbose = false;
};

struct MethodResult {
  double cost = 0.0;            // true-dynamics cost
  double surrogate_cost = 0.0;  // the same schedule on the Koopman model
  double max_freq_violation_hz = 0.0;
  double max_ramp_violation = 0.0;  // pu per fine step above the limit
  double seconds = 0.0;             // solve or inference time
  bool failed = false;
  std::string error;
};

struct InstanceResult {
  int id = 0;
  MethodResult policy;
  MethodResult online;
  bool online_converged = false;
  double gap_percent = 0.0;  // (policy - online) / online * 100

  bool failed() const { return policy.failed || online.failed; }
};

struct MethodSummary {
  std::string label;
  double cost = 0.0;
  double gap_percent = 0.0;  // increase of the mean cost over the online mean
  double max_freq_violation_hz = 0.0;
  double max_ramp_violation = 0.0;
  double seconds = 0.0;
};

struct EvalReport {
  std::string regime;
  double omega_bound_hz = 0.0;
  double ramp_limit = 0.0;
  std::vector<InstanceResult> instances;
  MethodSummary policy;
  MethodSummary online;
  int evaluated = 0;  // instances entering the aggregates
  int failed = 0;
  int unconverged = 0;  // online solves that stopped on the budget
  double cost_gap = 0.0;          // (mean policy - mean online) / mean online
  double mean_instance_gap = 0.0;  // mean of the per-instance ratios
  double speedup = 0.0;            // mean per-instance online / policy time
  nlohmann::json config;           // echo of the effective settings
};

/// Runs both methods on every test instance. Instances whose simulation or
/// solve throws are flagged and left out of the aggregates.
EvalReport run_benchmark(const std::vector<scenario::ProblemInstance>& test, const grid::Network& net,
                         const koopman::KoopmanModel& model, const koopman::KoopmanResponse& response,
                         const dpc::PolicyParams& policy, const scenario::RegimeSpec& regime,
                         const BenchConfig& config = {});

/// Means over the non-failed instances.
void aggregate(EvalReport& report);

nlohmann::json to_json(const EvalReport& report);
EvalReport report_from_json(const nlohmann::json& j);

/// Human-readable tables: timing and cost increase, then violations.
std::string summary_table(const EvalReport& report);

struct ReportPaths {
  std::filesystem::path json;
  std::filesystem::path csv;
  std::filesystem::path summary;
};

/// Writes report.json, instances.csv and summary.txt into `dir`.
ReportPaths emit_report(const EvalReport& report, const std::filesystem::path& dir);

}  // namespace dedpc::bench
