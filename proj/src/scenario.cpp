#include "dedpc/scenario.hpp"

#include <algorithm>
#include <cctype>
#include <numeric>

#include "dedpc/diffcore.hpp"
#include "dedpc/errors.hpp"
#include "json_util.hpp"

namespace dedpc::scenario {

RegimeSpec regime_from_label(const std::string& label) {
  std::string up = label;
  for (auto& ch : up) ch = static_cast<char>(std::toupper(static_cast<unsigned char>(ch)));
  if (up == "NO") return kNominal;
  if (up == "TO") return kTight;
  throw InvalidInput("unknown regime '" + label + "' (expected NO or TO)");
}

double LoadRamp::value(double t) const {
  if (t <= t0) return p0;
  if (t >= t0 + duration) return p0 + rate * duration;
  return p0 + rate * (t - t0);
}

Mat ProblemInstance::load_forecast() const {
  Mat out(static_cast<Index>(loads.size()), horizon.n_steps);
  for (Index k = 0; k < horizon.n_steps; ++k) out.col(k) = loads_at(static_cast<double>(k) * horizon.dt);
  return out;
}

Vec ProblemInstance::loads_at(double t) const {
  Vec v(static_cast<Index>(loads.size()));
  for (std::size_t i = 0; i < loads.size(); ++i) v(static_cast<Index>(i)) = loads[i].value(t);
  return v;
}

swing::SwingState ProblemInstance::initial_state(const grid::Network& net) const {
  const Index na = net.num_angles(), ng = net.num_generators();
  return {x0.head(na), x0.segment(na, ng), 0.0};
}

namespace {

double uniform(std::mt19937_64& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

}  // namespace

ProblemInstance sample_instance(const grid::Network& net, const RegimeSpec& regime, std::uint64_t seed,
                                const SamplerOptions& opts) {
  if (!(regime.omega_bound_hz > 0.0)) throw InvalidInput("regime bound must be positive");
  std::mt19937_64 rng(seed);
  const Index ng = net.num_generators(), nl = net.num_loads();
  const Vec ln = net.load_nominal();
  const Vec pn = net.generator_nominal();
  const Vec pmin = net.generator_min(), pmax = net.generator_max();

  for (int attempt = 0; attempt <= opts.max_retries; ++attempt) {
    ProblemInstance inst;
    inst.seed = seed;
    inst.regime = regime;
    inst.horizon = opts.horizon;
    for (Index i = 0; i < nl; ++i) {
      LoadRamp r;
      r.p0 = ln(i) * (1.0 + uniform(rng, -0.25, 0.25));
      r.t0 = uniform(rng, 0.0, 60.0);
      r.duration = uniform(rng, 5.0, 20.0);
      const bool flat = uniform(rng, 0.0, 1.0) < 0.15;
      const double mag = uniform(rng, 0.01, 0.05);
      const double sign = uniform(rng, 0.0, 1.0) < 0.5 ? -1.0 : 1.0;
      r.rate = flat ? 0.0 : sign * mag;
      inst.loads.push_back(r);
    }
    inst.cost.resize(ng + 1);
    for (Index i = 0; i <= ng; ++i) inst.cost(i) = uniform(rng, 0.0, 1.0);
    inst.s.resize(ng);
    inst.omega0.resize(ng);
    for (Index i = 0; i < ng; ++i) inst.s(i) = uniform(rng, 0.0, 1.0);
    for (Index i = 0; i < ng; ++i) inst.omega0(i) = uniform(rng, -0.01, 0.01);

    const Vec l0 = inst.loads_at(0.0);
    inst.p_opt = grid::static_dispatch(net, l0, inst.cost);
    inst.p_g0 = inst.p_opt - 0.5 * (inst.p_opt - pn).cwiseProduct(inst.s);
    inst.p_g0 = inst.p_g0.cwiseMax(pmin).cwiseMin(pmax);
    try {
      const Vec theta = grid::solve_power_flow(net, grid::nonslack_injections(net, inst.p_g0, l0));
      const Vec f = grid::power_injection(net, theta);
      inst.x0.resize(net.state_dim());
      for (Index s = 0; s < net.num_angles(); ++s) inst.x0(s) = theta(net.non_slack()[static_cast<std::size_t>(s)]);
      inst.x0.segment(net.num_angles(), ng) = inst.omega0;
      inst.x0(net.state_dim() - 1) = f(net.slack());
      return inst;
    } catch (const InfeasibleInjection&) {
      // redraw from the same stream
    }
  }
  throw InfeasibleInjection("no feasible instance after " + std::to_string(opts.max_retries) + " retries");
}

Dataset make_dataset(const grid::Network& net, const RegimeSpec& regime, int n_total, int n_train,
                     std::uint64_t seed, const SamplerOptions& opts) {
  if (n_total <= 0 || n_train < 0 || n_train > n_total)
    throw InvalidInput("dataset split must satisfy 0 <= n_train <= n_total, n_total > 0");
  std::mt19937_64 rng(seed);
  std::vector<ProblemInstance> all;
  all.reserve(static_cast<std::size_t>(n_total));
  for (int i = 0; i < n_total; ++i) {
    all.push_back(sample_instance(net, regime, rng(), opts));
    all.back().id = i;
  }
  std::shuffle(all.begin(), all.end(), rng);
  Dataset d;
  d.train.assign(all.begin(), all.begin() + n_train);
  d.test.assign(all.begin() + n_train, all.end());
  return d;
}

using detail::json;

namespace {

json instance_to_json(const ProblemInstance& p, Index n_knots) {
  json loads = json::array();
  for (const auto& r : p.loads)
    loads.push_back({{"p0", r.p0}, {"t0", r.t0}, {"duration", r.duration}, {"rate", r.rate}});
  json knots = json::array();
  if (n_knots >= 2) {
    const Index stride = p.horizon.n_steps / n_knots;
    for (Index j = 0; j < n_knots; ++j)
      knots.push_back(detail::vec_to_json(p.loads_at(static_cast<double>(j * stride) * p.horizon.dt)));
  }
  return {{"id", p.id},
          {"seed", p.seed},
          {"regime", p.regime.label},
          {"omega_bound_hz", p.regime.omega_bound_hz},
          {"dt", p.horizon.dt},
          {"n_steps", p.horizon.n_steps},
          {"loads", loads},
          {"cost", detail::vec_to_json(p.cost)},
          {"s", detail::vec_to_json(p.s)},
          {"omega0", detail::vec_to_json(p.omega0)},
          {"p_opt", detail::vec_to_json(p.p_opt)},
          {"p_g0", detail::vec_to_json(p.p_g0)},
          {"x0", detail::vec_to_json(p.x0)},
          {"load_knots", knots}};
}

ProblemInstance instance_from_json(const json& j) {
  ProblemInstance p;
  p.id = j.at("id").get<int>();
  p.seed = j.at("seed").get<std::uint64_t>();
  p.regime = {j.at("regime").get<std::string>(), j.at("omega_bound_hz").get<double>()};
  p.horizon = {j.at("dt").get<double>(), j.at("n_steps").get<Index>()};
  for (const auto& r : j.at("loads"))
    p.loads.push_back({r.at("p0").get<double>(), r.at("t0").get<double>(), r.at("duration").get<double>(),
                       r.at("rate").get<double>()});
  p.cost = detail::vec_from_json(j.at("cost"));
  p.s = detail::vec_from_json(j.at("s"));
  p.omega0 = detail::vec_from_json(j.at("omega0"));
  p.p_opt = detail::vec_from_json(j.at("p_opt"));
  p.p_g0 = detail::vec_from_json(j.at("p_g0"));
  p.x0 = detail::vec_from_json(j.at("x0"));
  return p;
}

}  // namespace

void save_instances(const std::filesystem::path& path, const std::vector<ProblemInstance>& instances,
                    Index n_knots) {
  json doc;
  doc["format"] = "dedpc-instances";
  doc["version"] = kDatasetVersion;
  json arr = json::array();
  for (const auto& p : instances) arr.push_back(instance_to_json(p, n_knots));
  doc["instances"] = std::move(arr);
  detail::write_json_file(path, doc);
}

std::vector<ProblemInstance> load_instances(const std::filesystem::path& path) {
  const json doc = detail::read_json_file(path);
  try {
    if (doc.at("format").get<std::string>() != "dedpc-instances")
      throw FormatError(path.string() + " is not an instance file");
    if (doc.at("version").get<int>() != kDatasetVersion)
      throw FormatError(path.string() + ": unsupported dataset version");
    std::vector<ProblemInstance> out;
    for (const auto& j : doc.at("instances")) out.push_back(instance_from_json(j));
    return out;
  } catch (const json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

void save_dataset(const std::filesystem::path& dir, const Dataset& data) {
  save_instances(dir / "train.json", data.train);
  save_instances(dir / "test.json", data.test);
}

Dataset load_dataset(const std::filesystem::path& dir) {
  return {load_instances(dir / "train.json"), load_instances(dir / "test.json")};
}

Mat random_input_knots(const grid::Network& net, const Vec& p_g0, Index n_knots, double max_step,
                       std::mt19937_64& rng) {
  const Vec pmin = net.generator_min(), pmax = net.generator_max();
  const Index ng = net.num_generators();
  Mat knots(ng, n_knots);
  knots.col(0) = p_g0;
  const double activity = uniform(rng, 0.0, 1.0);
  for (Index j = 1; j < n_knots; ++j)
    for (Index g = 0; g < ng; ++g) {
      const double step = activity * max_step * uniform(rng, -1.0, 1.0);
      knots(g, j) = std::clamp(knots(g, j - 1) + step, pmin(g), pmax(g));
    }
  return knots;
}

}  // namespace dedpc::scenario
