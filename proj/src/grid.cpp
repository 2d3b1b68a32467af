#include "dedpc/grid.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <queue>
#include <set>

#include <json.hpp>

#include "dedpc/errors.hpp"

namespace dedpc::grid {

using nlohmann::json;

BusKind parse_bus_kind(const std::string& s) {
  if (s == "slack") return BusKind::Slack;
  if (s == "generator") return BusKind::Generator;
  if (s == "load") return BusKind::Load;
  if (s == "junction") return BusKind::Junction;
  throw InvalidInput("unknown bus kind '" + s + "'");
}

std::string to_string(BusKind kind) {
  switch (kind) {
    case BusKind::Slack: return "slack";
    case BusKind::Generator: return "generator";
    case BusKind::Load: return "load";
    case BusKind::Junction: return "junction";
  }
  return "junction";
}

Network::Network(std::vector<BusRecord> buses, Mat y_mag, double bound_fraction)
    : buses_(std::move(buses)), y_mag_(std::move(y_mag)), bound_fraction_(bound_fraction) {
  const Index n = num_buses();
  angle_slot_.assign(buses_.size(), -1);
  for (Index i = 0; i < n; ++i) {
    const auto& b = buses_[static_cast<std::size_t>(i)];
    switch (b.kind) {
      case BusKind::Slack:
        if (slack_ >= 0) throw InvalidInput("more than one slack bus");
        slack_ = i;
        break;
      case BusKind::Generator: generators_.push_back(i); break;
      case BusKind::Load: loads_.push_back(i); break;
      case BusKind::Junction: break;
    }
    if (b.kind != BusKind::Slack) {
      angle_slot_[static_cast<std::size_t>(i)] = static_cast<Index>(non_slack_.size());
      non_slack_.push_back(i);
      if (b.kind != BusKind::Generator) algebraic_.push_back(i);
    }
  }
  if (slack_ < 0) throw InvalidInput("network has no slack bus");

  coupling_.resize(n, n);
  for (Index i = 0; i < n; ++i)
    for (Index j = 0; j < n; ++j)
      coupling_(i, j) = buses_[static_cast<std::size_t>(i)].v_mag *
                        buses_[static_cast<std::size_t>(j)].v_mag * y_mag_(i, j);
}

Index Network::find_bus(const std::string& id) const {
  for (std::size_t i = 0; i < buses_.size(); ++i)
    if (buses_[i].id == id) return static_cast<Index>(i);
  return -1;
}

Vec Network::generator_nominal() const {
  Vec v(num_generators());
  for (Index k = 0; k < v.size(); ++k)
    v(k) = buses_[static_cast<std::size_t>(generators_[static_cast<std::size_t>(k)])].p_nominal;
  return v;
}

Vec Network::generator_min() const {
  return generator_nominal() * (1.0 - bound_fraction_);
}

Vec Network::generator_max() const {
  return generator_nominal() * (1.0 + bound_fraction_);
}

Vec Network::load_nominal() const {
  Vec v(num_loads());
  for (Index k = 0; k < v.size(); ++k)
    v(k) = buses_[static_cast<std::size_t>(loads_[static_cast<std::size_t>(k)])].p_nominal;
  return v;
}

Vec Network::inertia() const {
  Vec v(num_generators());
  for (Index k = 0; k < v.size(); ++k)
    v(k) = buses_[static_cast<std::size_t>(generators_[static_cast<std::size_t>(k)])].inertia;
  return v;
}

Vec Network::damping() const {
  Vec v(num_generators());
  for (Index k = 0; k < v.size(); ++k)
    v(k) = buses_[static_cast<std::size_t>(generators_[static_cast<std::size_t>(k)])].damping;
  return v;
}

namespace {

void validate_bus(const BusRecord& b) {
  if (!(b.v_mag > 0.0)) throw InvalidInput("bus " + b.id + ": v_mag must be positive");
  switch (b.kind) {
    case BusKind::Slack:
    case BusKind::Generator:
      if (!(b.inertia > 0.0) || !(b.damping > 0.0))
        throw InvalidInput("bus " + b.id + ": inertia and damping must be positive");
      break;
    case BusKind::Load:
      if (!(b.p_nominal < 0.0)) throw InvalidInput("bus " + b.id + ": load p_nominal must be negative");
      break;
    case BusKind::Junction:
      if (b.p_nominal != 0.0) throw InvalidInput("bus " + b.id + ": junction p_nominal must be zero");
      break;
  }
}

}  // namespace

Network build_network(std::vector<BusRecord> buses, const std::vector<LineRecord>& lines,
                      double bound_fraction) {
  std::set<std::string> seen;
  for (const auto& b : buses) {
    if (!seen.insert(b.id).second) throw InvalidInput("duplicate bus label '" + b.id + "'");
    validate_bus(b);
  }
  const auto n = static_cast<Index>(buses.size());
  auto index_of = [&](const std::string& id) -> Index {
    for (Index i = 0; i < n; ++i)
      if (buses[static_cast<std::size_t>(i)].id == id) return i;
    throw InvalidInput("line references unknown bus '" + id + "'");
  };

  Mat y = Mat::Zero(n, n);
  for (const auto& l : lines) {
    const Index a = index_of(l.from_bus);
    const Index b = index_of(l.to_bus);
    if (a == b) throw InvalidInput("self-loop at bus '" + l.from_bus + "'");
    if (!(l.reactance > 0.0))
      throw InvalidInput("line " + l.from_bus + "-" + l.to_bus + ": reactance must be positive");
    if (l.resistance < 0.0)
      throw InvalidInput("line " + l.from_bus + "-" + l.to_bus + ": negative resistance");
    // Parallel lines add admittance; magnitudes are a fine proxy at R << X.
    const double mag = 1.0 / std::hypot(l.resistance, l.reactance);
    y(a, b) += mag;
    y(b, a) += mag;
  }

  Network net(std::move(buses), std::move(y), bound_fraction);

  // every bus must hang off the slack through some line
  std::vector<bool> reached(static_cast<std::size_t>(n), false);
  std::queue<Index> frontier;
  frontier.push(net.slack());
  reached[static_cast<std::size_t>(net.slack())] = true;
  while (!frontier.empty()) {
    const Index i = frontier.front();
    frontier.pop();
    for (Index j = 0; j < n; ++j) {
      if (net.y_mag()(i, j) > 0.0 && !reached[static_cast<std::size_t>(j)]) {
        reached[static_cast<std::size_t>(j)] = true;
        frontier.push(j);
      }
    }
  }
  for (Index i = 0; i < n; ++i)
    if (!reached[static_cast<std::size_t>(i)])
      throw InvalidInput("bus '" + net.buses()[static_cast<std::size_t>(i)].id +
                         "' is not connected to the slack");
  return net;
}

Network load_network(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw InvalidInput("cannot open network file " + path.string());
  json doc;
  try {
    in >> doc;
  } catch (const json::exception& e) {
    throw InvalidInput("malformed network file " + path.string() + ": " + e.what());
  }
  std::vector<BusRecord> buses;
  std::vector<LineRecord> lines;
  try {
    for (const auto& b : doc.at("buses")) {
      BusRecord r;
      r.id = b.at("id").get<std::string>();
      r.kind = parse_bus_kind(b.at("kind").get<std::string>());
      r.p_nominal = b.value("p_nominal", 0.0);
      r.v_mag = b.at("v_mag").get<double>();
      r.inertia = b.value("inertia", 0.0);
      r.damping = b.value("damping", 0.0);
      buses.push_back(r);
    }
    for (const auto& l : doc.at("lines")) {
      lines.push_back({l.at("from_bus").get<std::string>(), l.at("to_bus").get<std::string>(),
                       l.at("resistance").get<double>(), l.at("reactance").get<double>()});
    }
  } catch (const json::exception& e) {
    throw InvalidInput("network file " + path.string() + ": " + e.what());
  }
  return build_network(std::move(buses), lines, doc.value("bound_fraction", 0.5));
}

void save_network(const std::filesystem::path& path, const std::vector<BusRecord>& buses,
                  const std::vector<LineRecord>& lines) {
  json doc;
  doc["buses"] = json::array();
  for (const auto& b : buses) {
    json r{{"id", b.id}, {"kind", to_string(b.kind)}, {"p_nominal", b.p_nominal}, {"v_mag", b.v_mag}};
    if (b.kind == BusKind::Slack || b.kind == BusKind::Generator) {
      r["inertia"] = b.inertia;
      r["damping"] = b.damping;
    }
    doc["buses"].push_back(r);
  }
  doc["lines"] = json::array();
  for (const auto& l : lines)
    doc["lines"].push_back({{"from_bus", l.from_bus}, {"to_bus", l.to_bus},
                            {"resistance", l.resistance}, {"reactance", l.reactance}});
  std::ofstream out(path);
  if (!out) throw InvalidInput("cannot write " + path.string());
  out << doc.dump(2) << '\n';
}

std::filesystem::path default_network_path() {
  return std::filesystem::path(DEDPC_DATA_DIR) / "ieee9.json";
}

Vec power_injection(const Network& net, const Vec& theta) {
  const Index n = net.num_buses();
  if (theta.size() != n)
    throw InvalidInput("power_injection: expected " + std::to_string(n) + " angles, got " +
                       std::to_string(theta.size()));
  const Mat& a = net.coupling();
  Vec f = Vec::Zero(n);
  // pairwise so that the antisymmetric terms cancel to rounding
  for (Index i = 0; i < n; ++i) {
    for (Index j = i + 1; j < n; ++j) {
      if (a(i, j) == 0.0) continue;
      const double t = a(i, j) * std::sin(theta(i) - theta(j));
      f(i) += t;
      f(j) -= t;
    }
  }
  return f;
}

Mat injection_jacobian(const Network& net, const Vec& theta) {
  const Index n = net.num_buses();
  const Mat& a = net.coupling();
  Mat jac = Mat::Zero(n, n);
  for (Index i = 0; i < n; ++i) {
    for (Index j = 0; j < n; ++j) {
      if (i == j || a(i, j) == 0.0) continue;
      const double c = a(i, j) * std::cos(theta(i) - theta(j));
      jac(i, j) = -c;
      jac(i, i) += c;
    }
  }
  return jac;
}

Vec solve_power_flow(const Network& net, const Vec& p_nonslack, const PowerFlowOptions& opts) {
  const Index m = net.num_angles();
  if (p_nonslack.size() != m)
    throw InvalidInput("solve_power_flow: expected " + std::to_string(m) + " injections");
  const auto& slots = net.non_slack();

  Vec theta = Vec::Zero(net.num_buses());
  for (int it = 0; it <= opts.max_iterations; ++it) {
    const Vec f = power_injection(net, theta);
    Vec residual(m);
    for (Index k = 0; k < m; ++k) residual(k) = f(slots[static_cast<std::size_t>(k)]) - p_nonslack(k);
    if (!residual.allFinite()) break;
    if (residual.lpNorm<Eigen::Infinity>() <= opts.tolerance) return theta;
    if (it == opts.max_iterations) break;

    const Mat full = injection_jacobian(net, theta);
    Mat jac(m, m);
    for (Index r = 0; r < m; ++r)
      for (Index c = 0; c < m; ++c)
        jac(r, c) = full(slots[static_cast<std::size_t>(r)], slots[static_cast<std::size_t>(c)]);
    const Vec step = jac.partialPivLu().solve(-residual);
    if (!step.allFinite()) break;
    for (Index k = 0; k < m; ++k) theta(slots[static_cast<std::size_t>(k)]) += step(k);
  }
  throw InfeasibleInjection("power flow did not converge within " +
                            std::to_string(opts.max_iterations) + " Newton iterations");
}

Vec nonslack_injections(const Network& net, const Vec& p_gen, const Vec& p_load) {
  Vec p = Vec::Zero(net.num_angles());
  for (Index k = 0; k < net.num_generators(); ++k)
    p(net.angle_slot(net.generators()[static_cast<std::size_t>(k)])) = p_gen(k);
  for (Index k = 0; k < net.num_loads(); ++k)
    p(net.angle_slot(net.loads()[static_cast<std::size_t>(k)])) = p_load(k);
  return p;
}

Vec static_dispatch(const Network& net, const Vec& loads, const Vec& cost) {
  const Index ng = net.num_generators();
  if (loads.size() != net.num_loads() || cost.size() != ng + 1)
    throw InvalidInput("static_dispatch: dimension mismatch");
  const Vec pmin = net.generator_min();
  const Vec pmax = net.generator_max();
  const double c_slack = cost(ng);

  Vec p = pmin;
  // slack covers whatever the generators do not: P_s = demand - sum P_i
  double remainder = -loads.sum() - pmin.sum();

  std::vector<Index> order(static_cast<std::size_t>(ng));
  std::iota(order.begin(), order.end(), Index{0});
  std::stable_sort(order.begin(), order.end(), [&](Index a, Index b) { return cost(a) < cost(b); });
  for (Index g : order) {
    if (remainder <= 0.0) break;
    if (!(cost(g) < c_slack)) break;
    const double add = std::min(remainder, pmax(g) - pmin(g));
    p(g) += add;
    remainder -= add;
  }
  return p;
}

double static_cost(const Vec& p_gen, double p_slack, const Vec& cost) {
  const Index ng = p_gen.size();
  return cost.head(ng).dot(p_gen) + cost(ng) * std::abs(p_slack);
}

}  // namespace dedpc::grid
