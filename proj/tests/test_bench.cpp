#include <algorithm>
#include <filesystem>
#include <fstream>
#include <random>
#include <string>

#include "doctest.h"
#include "dedpc/bench.hpp"
#include "dedpc/errors.hpp"
#include "dedpc/swing.hpp"

using namespace dedpc;
using namespace dedpc::bench;

namespace {

const grid::Network& net9() {
  static const grid::Network net = grid::load_network(grid::default_network_path());
  return net;
}

MethodResult method(double cost, double freq, double ramp, double secs) {
  MethodResult m;
  m.cost = cost;
  m.surrogate_cost = cost * 0.99;
  m.max_freq_violation_hz = freq;
  m.max_ramp_violation = ramp;
  m.seconds = secs;
  return m;
}

InstanceResult row(int id, double pc, double oc, double ps, double os) {
  InstanceResult r;
  r.id = id;
  r.policy = method(pc, 1e-3 * id, 0.0, ps);
  r.online = method(oc, 0.0, 1e-5, os);
  r.online_converged = id % 2 == 0;
  r.gap_percent = 100.0 * (pc - oc) / oc;
  return r;
}

EvalReport hand_report() {
  EvalReport rep;
  rep.regime = "NO";
  rep.omega_bound_hz = 0.05;
  rep.ramp_limit = 5e-4;
  rep.instances = {row(1, 110, 100, 1e-3, 2.0), row(2, 200, 180, 2e-3, 1.0), row(3, 90, 100, 1e-3, 4.0)};
  InstanceResult bad = row(4, 1e6, 1.0, 1.0, 1.0);
  bad.online.failed = true;
  bad.online.error = "solver blew up";
  rep.instances.push_back(bad);
  rep.config = {{"regime", "NO"}, {"dpc.epochs", 3}};
  aggregate(rep);
  return rep;
}

std::filesystem::path scratch(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("dedpc_bench_" + name);
  std::filesystem::remove_all(p);
  return p;
}

Mat random_mat(Index r, Index c, std::mt19937_64& rng, double s) {
  std::normal_distribution<double> n(0.0, s);
  Mat m(r, c);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

}  // namespace

TEST_CASE("aggregate skips failed instances") {
  const EvalReport rep = hand_report();
  CHECK(rep.evaluated == 3);
  CHECK(rep.failed == 1);
  CHECK(rep.unconverged == 2);
  CHECK(rep.policy.cost == doctest::Approx(400.0 / 3.0));
  CHECK(rep.online.cost == doctest::Approx(380.0 / 3.0));
  CHECK(rep.cost_gap == doctest::Approx(20.0 / 380.0));
  CHECK(rep.policy.gap_percent == doctest::Approx(2000.0 / 380.0));
  CHECK(rep.online.gap_percent == 0.0);
  CHECK(rep.mean_instance_gap == doctest::Approx((0.1 + 20.0 / 180.0 - 0.1) / 3.0));
  CHECK(rep.speedup == doctest::Approx((2000.0 + 500.0 + 4000.0) / 3.0));
  CHECK(rep.policy.max_freq_violation_hz == doctest::Approx(2e-3));
  CHECK(rep.online.max_ramp_violation == doctest::Approx(1e-5));
  CHECK(rep.policy.label == kPolicyLabel);
  CHECK(rep.online.label == kOnlineLabel);
}

TEST_CASE("aggregate with every instance failed") {
  EvalReport rep = hand_report();
  for (auto& r : rep.instances) r.policy.failed = true;
  aggregate(rep);
  CHECK(rep.evaluated == 0);
  CHECK(rep.failed == 4);
  CHECK(rep.cost_gap == 0.0);
  CHECK(rep.speedup == 0.0);
}

TEST_CASE("report json round trip") {
  const EvalReport rep = hand_report();
  const nlohmann::json j = to_json(rep);
  const EvalReport back = report_from_json(nlohmann::json::parse(j.dump()));
  CHECK(to_json(back) == j);
  CHECK(back.instances.size() == 4);
  CHECK(back.instances[3].online.error == "solver blew up");
  CHECK(back.cost_gap == rep.cost_gap);
  CHECK(back.speedup == rep.speedup);

  EvalReport re = back;
  aggregate(re);
  CHECK(re.cost_gap == rep.cost_gap);
  CHECK(re.policy.cost == rep.policy.cost);

  nlohmann::json broken = j;
  broken["format"] = "something-else";
  CHECK_THROWS_AS(report_from_json(broken), FormatError);
  broken = j;
  broken.erase("instances");
  CHECK_THROWS_AS(report_from_json(broken), FormatError);
}

TEST_CASE("emitted files") {
  const EvalReport rep = hand_report();
  const auto dir = scratch("emit");
  const ReportPaths p = emit_report(rep, dir);
  REQUIRE(std::filesystem::exists(p.json));
  REQUIRE(std::filesystem::exists(p.csv));
  REQUIRE(std::filesystem::exists(p.summary));

  std::ifstream csv(p.csv);
  std::string line, header;
  std::getline(csv, header);
  CHECK(header.rfind("id,failed,online_converged,gap_percent,policy_cost", 0) == 0);
  int rows = 0;
  while (std::getline(csv, line)) {
    ++rows;
    CHECK(std::count(line.begin(), line.end(), ',') == std::count(header.begin(), header.end(), ','));
  }
  CHECK(rows == 4);

  std::ifstream txt(p.summary);
  const std::string summary((std::istreambuf_iterator<char>(txt)), std::istreambuf_iterator<char>());
  CHECK(summary == summary_table(rep));
  CHECK(summary.find("Sol. time (s)") != std::string::npos);
  CHECK(summary.find("Obj. increase (%)") != std::string::npos);
  CHECK(summary.find("Max freq. viol. (Hz)") != std::string::npos);
  CHECK(summary.find(kPolicyLabel) != std::string::npos);
  CHECK(summary.find(kOnlineLabel) != std::string::npos);
  CHECK(summary.find("1 failed") != std::string::npos);

  std::ifstream js(p.json);
  CHECK(to_json(report_from_json(nlohmann::json::parse(js))) == to_json(rep));
  std::filesystem::remove_all(dir);
}

TEST_CASE("small benchmark run") {
  const grid::Network& net = net9();
  const Index n_steps = 400, nk = 8;
  koopman::KoopmanDims d{net.num_angles(), net.num_generators(), net.num_loads(), 4, 8};
  std::mt19937_64 rng(5);
  koopman::KoopmanModel model = koopman::make_model(d, {}, rng);
  model.K = random_mat(d.n_psi(), d.n_psi(), rng, 1.0);
  model.K *= 0.95 / koopman::spectral_radius(model.K);
  model.B = random_mat(d.n_psi(), d.n_u(), rng, 0.02);
  const koopman::KoopmanResponse response(model, n_steps, nk);

  scenario::SamplerOptions opts;
  opts.horizon.n_steps = n_steps;
  std::vector<scenario::ProblemInstance> test;
  for (int i = 0; i < 3; ++i) test.push_back(scenario::sample_instance(net, scenario::kNominal, 40 + i, opts));
  test.back().loads[0].p0 = -80.0;  // the swing replay cannot start from this

  const dpc::PolicyParams policy =
      dpc::init_policy(dpc::layout_for(net, nk, n_steps), net.generator_min(), net.generator_max(), 3);
  BenchConfig cfg;
  cfg.online.outer_iterations = 4;
  cfg.online.inner_iterations = 60;
  const EvalReport rep = run_benchmark(test, net, model, response, policy, scenario::kNominal, cfg);
  REQUIRE(rep.instances.size() == 3);
  CHECK(rep.instances[2].failed());
  CHECK_FALSE(rep.instances[2].policy.error.empty());
  CHECK(rep.failed == 1);
  CHECK(rep.evaluated == 2);

  for (int i = 0; i < 2; ++i) {
    const auto& r = rep.instances[static_cast<std::size_t>(i)];
    REQUIRE_FALSE(r.failed());
    const auto fine = dpc::infer(test[static_cast<std::size_t>(i)], policy).schedule.fine;
    const auto& inst = test[static_cast<std::size_t>(i)];
    const auto traj = swing::simulate(net, fine, inst.load_forecast(), inst.initial_state(net), inst.horizon.dt,
                                      static_cast<std::size_t>(n_steps));
    const auto m = swing::evaluate_schedule(traj, inst.cost, inst.regime.omega_bound_hz, cfg.ramp_limit);
    CHECK(r.policy.cost == doctest::Approx(m.cost).epsilon(1e-12));
    CHECK(r.policy.max_freq_violation_hz == doctest::Approx(m.max_freq_violation_hz).epsilon(1e-12));
    CHECK(r.gap_percent == doctest::Approx(100.0 * (r.policy.cost - r.online.cost) / r.online.cost));
    CHECK(r.online.seconds > 0.0);
    CHECK(r.policy.seconds > 0.0);
  }

  BenchConfig limited = cfg;
  limited.limit = 1;
  CHECK(run_benchmark(test, net, model, response, policy, scenario::kNominal, limited).instances.size() == 1);
}
