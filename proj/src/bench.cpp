#include "dedpc/bench.hpp"

#include <chrono>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

#include "dedpc/dedko.hpp"
#include "dedpc/errors.hpp"
#include "dedpc/swing.hpp"
#include "json_util.hpp"

namespace dedpc::bench {

namespace {

MethodResult replay(const scenario::ProblemInstance& inst, const grid::Network& net, const Mat& fine,
                    double ramp_limit) {
  MethodResult r;
  const swing::Trajectory traj = swing::simulate(net, fine, inst.load_forecast(), inst.initial_state(net),
                                                 inst.horizon.dt, static_cast<std::size_t>(inst.horizon.n_steps));
  const swing::EvalMetrics m = swing::evaluate_schedule(traj, inst.cost, inst.regime.omega_bound_hz, ramp_limit);
  r.cost = m.cost;
  r.max_freq_violation_hz = m.max_freq_violation_hz;
  r.max_ramp_violation = m.max_ramp_violation;
  return r;
}

MethodResult failure(const std::exception& e) {
  MethodResult r;
  r.failed = true;
  r.error = e.what();
  return r;
}

nlohmann::json method_json(const MethodResult& m) {
  nlohmann::json j = {{"cost", m.cost},
                      {"surrogate_cost", m.surrogate_cost},
                      {"max_freq_violation_hz", m.max_freq_violation_hz},
                      {"max_ramp_violation", m.max_ramp_violation},
                      {"seconds", m.seconds},
                      {"failed", m.failed}};
  if (m.failed) j["error"] = m.error;
  return j;
}

MethodResult method_from_json(const nlohmann::json& j) {
  MethodResult m;
  m.cost = j.at("cost").get<double>();
  m.surrogate_cost = j.at("surrogate_cost").get<double>();
  m.max_freq_violation_hz = j.at("max_freq_violation_hz").get<double>();
  m.max_ramp_violation = j.at("max_ramp_violation").get<double>();
  m.seconds = j.at("seconds").get<double>();
  m.failed = j.at("failed").get<bool>();
  if (j.contains("error")) m.error = j.at("error").get<std::string>();
  return m;
}

nlohmann::json summary_json(const MethodSummary& s) {
  return {{"label", s.label},
          {"cost", s.cost},
          {"gap_percent", s.gap_percent},
          {"max_freq_violation_hz", s.max_freq_violation_hz},
          {"max_ramp_violation", s.max_ramp_violation},
          {"seconds", s.seconds}};
}

MethodSummary summary_from_json(const nlohmann::json& j) {
  MethodSummary s;
  s.label = j.at("label").get<std::string>();
  s.cost = j.at("cost").get<double>();
  s.gap_percent = j.at("gap_percent").get<double>();
  s.max_freq_violation_hz = j.at("max_freq_violation_hz").get<double>();
  s.max_ramp_violation = j.at("max_ramp_violation").get<double>();
  s.seconds = j.at("seconds").get<double>();
  return s;
}

std::string fmt(const char* spec, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, spec, v);
  return buf;
}

}  // namespace

EvalReport run_benchmark(const std::vector<scenario::ProblemInstance>& test, const grid::Network& net,
                         const koopman::KoopmanModel& model, const koopman::KoopmanResponse& response,
                         const dpc::PolicyParams& policy, const scenario::RegimeSpec& regime,
                         const BenchConfig& cfg) {
  EvalReport rep;
  rep.regime = regime.label;
  rep.omega_bound_hz = regime.omega_bound_hz;
  rep.ramp_limit = cfg.ramp_limit;
  std::size_t count = test.size();
  if (cfg.limit > 0) count = std::min(count, static_cast<std::size_t>(cfg.limit));
  for (std::size_t i = 0; i < count; ++i) {
    const auto& inst = test[i];
    InstanceResult row;
    row.id = inst.id;

    try {
      const dpc::Inference inf = dpc::infer(inst, policy);
      row.policy = replay(inst, net, inf.schedule.fine, cfg.ramp_limit);
      row.policy.seconds = inf.seconds;
      const auto prob = dedko::make_problem(inst, net, model, response, cfg.ramp_limit);
      row.policy.surrogate_cost = dedko::evaluate_surrogate(prob, response, inf.schedule.coarse).cost;
    } catch (const std::exception& e) {
      row.policy = failure(e);
    }

    try {
      const online::SolveReport sol = online::solve_ded_ko(inst, net, model, response, cfg.ramp_limit, cfg.online);
      row.online = replay(inst, net, sol.fine, cfg.ramp_limit);
      row.online.seconds = sol.seconds;
      row.online.surrogate_cost = sol.objective;
      row.online_converged = sol.converged;
    } catch (const std::exception& e) {
      row.online = failure(e);
    }

    if (!row.failed() && row.online.cost != 0.0)
      row.gap_percent = 100.0 * (row.policy.cost - row.online.cost) / row.online.cost;
    if (cfg.verbose) {
      std::cerr << "  instance " << inst.id;
      if (row.failed())
        std::cerr << " failed: " << (row.policy.failed ? row.policy.error : row.online.error) << '\n';
      else
        std::cerr << " policy " << row.policy.cost << " online " << row.online.cost << " gap "
                  << row.gap_percent << "% freq " << row.policy.max_freq_violation_hz << " Hz times "
                  << row.policy.seconds << " / " << row.online.seconds << " s\n";
    }
    rep.instances.push_back(std::move(row));
  }
  aggregate(rep);
  return rep;
}

void aggregate(EvalReport& rep) {
  rep.policy = MethodSummary{kPolicyLabel};
  rep.online = MethodSummary{kOnlineLabel};
  rep.evaluated = rep.failed = rep.unconverged = 0;
  rep.cost_gap = rep.mean_instance_gap = rep.speedup = 0.0;
  double ratio = 0.0, speed = 0.0;
  for (const auto& r : rep.instances) {
    if (r.failed()) {
      ++rep.failed;
      continue;
    }
    ++rep.evaluated;
    if (!r.online_converged) ++rep.unconverged;
    for (auto [s, m] : {std::pair{&rep.policy, &r.policy}, std::pair{&rep.online, &r.online}}) {
      s->cost += m->cost;
      s->max_freq_violation_hz += m->max_freq_violation_hz;
      s->max_ramp_violation += m->max_ramp_violation;
      s->seconds += m->seconds;
    }
    ratio += r.gap_percent / 100.0;
    speed += r.policy.seconds > 0.0 ? r.online.seconds / r.policy.seconds : 0.0;
  }
  if (rep.evaluated == 0) return;
  const double n = rep.evaluated;
  for (MethodSummary* s : {&rep.policy, &rep.online}) {
    s->cost /= n;
    s->max_freq_violation_hz /= n;
    s->max_ramp_violation /= n;
    s->seconds /= n;
  }
  rep.cost_gap = rep.online.cost != 0.0 ? (rep.policy.cost - rep.online.cost) / rep.online.cost : 0.0;
  rep.policy.gap_percent = 100.0 * rep.cost_gap;
  rep.online.gap_percent = 0.0;
  rep.mean_instance_gap = ratio / n;
  rep.speedup = speed / n;
}

nlohmann::json to_json(const EvalReport& rep) {
  nlohmann::json j;
  j["format"] = "dedpc-report";
  j["regime"] = rep.regime;
  j["omega_bound_hz"] = rep.omega_bound_hz;
  j["ramp_limit"] = rep.ramp_limit;
  j["evaluated"] = rep.evaluated;
  j["failed"] = rep.failed;
  j["unconverged"] = rep.unconverged;
  j["cost_gap"] = rep.cost_gap;
  j["mean_instance_gap"] = rep.mean_instance_gap;
  j["speedup"] = rep.speedup;
  j["methods"] = {summary_json(rep.policy), summary_json(rep.online)};
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& r : rep.instances)
    rows.push_back({{"id", r.id},
                    {"gap_percent", r.gap_percent},
                    {"online_converged", r.online_converged},
                    {"policy", method_json(r.policy)},
                    {"online", method_json(r.online)}});
  j["instances"] = std::move(rows);
  j["config"] = rep.config.is_null() ? nlohmann::json::object() : rep.config;
  return j;
}

EvalReport report_from_json(const nlohmann::json& j) {
  try {
    if (j.at("format").get<std::string>() != "dedpc-report") throw FormatError("not a benchmark report");
    EvalReport rep;
    rep.regime = j.at("regime").get<std::string>();
    rep.omega_bound_hz = j.at("omega_bound_hz").get<double>();
    rep.ramp_limit = j.at("ramp_limit").get<double>();
    rep.evaluated = j.at("evaluated").get<int>();
    rep.failed = j.at("failed").get<int>();
    rep.unconverged = j.at("unconverged").get<int>();
    rep.cost_gap = j.at("cost_gap").get<double>();
    rep.mean_instance_gap = j.at("mean_instance_gap").get<double>();
    rep.speedup = j.at("speedup").get<double>();
    rep.policy = summary_from_json(j.at("methods").at(0));
    rep.online = summary_from_json(j.at("methods").at(1));
    for (const auto& r : j.at("instances")) {
      InstanceResult row;
      row.id = r.at("id").get<int>();
      row.gap_percent = r.at("gap_percent").get<double>();
      row.online_converged = r.at("online_converged").get<bool>();
      row.policy = method_from_json(r.at("policy"));
      row.online = method_from_json(r.at("online"));
      rep.instances.push_back(std::move(row));
    }
    rep.config = j.at("config");
    return rep;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("benchmark report: ") + e.what());
  }
}

std::string summary_table(const EvalReport& rep) {
  std::ostringstream out;
  out << "Regime " << rep.regime << " (frequency bound " << rep.omega_bound_hz << " Hz), " << rep.evaluated
      << " instances";
  if (rep.failed) out << ", " << rep.failed << " failed";
  out << "\n\n";
  char line[160];
  std::snprintf(line, sizeof line, "%-16s %16s %20s\n", "Method", "Sol. time (s)", "Obj. increase (%)");
  out << line;
  for (const MethodSummary* s : {&rep.online, &rep.policy}) {
    std::snprintf(line, sizeof line, "%-16s %16s %20s\n", s->label.c_str(), fmt("%.3e", s->seconds).c_str(),
                  fmt("%.3f", s->gap_percent).c_str());
    out << line;
  }
  out << '\n';
  std::snprintf(line, sizeof line, "%-16s %24s %24s\n", "Method", "Max freq. viol. (Hz)", "Max ramp viol. (pu)");
  out << line;
  for (const MethodSummary* s : {&rep.online, &rep.policy}) {
    std::snprintf(line, sizeof line, "%-16s %24s %24s\n", s->label.c_str(),
                  fmt("%.3e", s->max_freq_violation_hz).c_str(), fmt("%.3e", s->max_ramp_violation).c_str());
    out << line;
  }
  return out.str();
}

ReportPaths emit_report(const EvalReport& rep, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  ReportPaths paths{dir / "report.json", dir / "instances.csv", dir / "summary.txt"};
  detail::write_json_file(paths.json, to_json(rep));

  std::ofstream csv(paths.csv);
  if (!csv) throw InvalidInput("cannot write " + paths.csv.string());
  csv << "id,failed,online_converged,gap_percent";
  for (const char* m : {"policy", "online"})
    csv << ',' << m << "_cost," << m << "_surrogate_cost," << m << "_max_freq_violation_hz," << m
        << "_max_ramp_violation," << m << "_seconds";
  csv << '\n';
  csv.precision(17);
  for (const auto& r : rep.instances) {
    csv << r.id << ',' << (r.failed() ? 1 : 0) << ',' << (r.online_converged ? 1 : 0) << ',' << r.gap_percent;
    for (const MethodResult* m : {&r.policy, &r.online})
      csv << ',' << m->cost << ',' << m->surrogate_cost << ',' << m->max_freq_violation_hz << ','
          << m->max_ramp_violation << ',' << m->seconds;
    csv << '\n';
  }
  if (!csv) throw InvalidInput("write failed: " + paths.csv.string());

  std::ofstream txt(paths.summary);
  txt << summary_table(rep);
  if (!txt) throw InvalidInput("write failed: " + paths.summary.string());
  return paths;
}

}  // namespace dedpc::bench
