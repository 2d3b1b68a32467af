#include "dedpc/online.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>

#include "dedpc/errors.hpp"

namespace dedpc::online {

double SolveReport::max_residual() const { return std::max({freq_residual, ramp_residual, initial_residual}); }

nlohmann::json to_json(const SolveReport& r) {
  nlohmann::json j;
  j["objective"] = r.objective;
  j["freq_residual"] = r.freq_residual;
  j["ramp_residual"] = r.ramp_residual;
  j["initial_residual"] = r.initial_residual;
  j["iterations"] = r.iterations;
  j["outer_iterations"] = r.outer_iterations;
  j["seconds"] = r.seconds;
  j["converged"] = r.converged;
  nlohmann::json knots = nlohmann::json::array();
  for (Index g = 0; g < r.coarse.rows(); ++g) {
    nlohmann::json row = nlohmann::json::array();
    for (Index k = 0; k < r.coarse.cols(); ++k) row.push_back(r.coarse(g, k));
    knots.push_back(std::move(row));
  }
  j["knots"] = std::move(knots);
  return j;
}

namespace {

double sign(double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }

// Everything the augmented Lagrangian needs at one point.
struct Point {
  Vec z, pi;
  Vec ys, yw;  // slack readouts per step; frequencies, row g + n_gen * k
  double objective = 0.0;  // normalized, exact |P_s|
  double lagrangian = 0.0;
  Vec grad;  // wrt z, filled by Solver::gradient
  double freq = 0.0, ramp = 0.0, initial = 0.0;  // raw residuals
  double scaled = 0.0;                            // max scaled residual
  // pieces of the gradient gathered during evaluation
  Vec th, d_slack, d_pi;
  std::vector<std::pair<Index, double>> d_omega;
};

class Solver {
 public:
  Solver(const dedko::DedKoProblem& p, const koopman::KoopmanResponse& r)
      : p_(p), gw_(r.omega_gain()), gs_(r.slack_gain()), ng_(p.n_gen()), nk_(p.n_knots), n_(p.n_steps) {
    if (r.n_steps() != n_ || r.n_knots() != nk_ || r.n_out() != ng_ + 1 || p.free.rows() != ng_ + 1 ||
        p.free.cols() != n_)
      throw InvalidInput("online solver: problem and response shapes differ");
    if (!(p.ramp_limit > 0.0)) throw InvalidInput("online solver: ramp limit must be positive");
    q_ = ng_ * nk_;
    free_s_ = p.free.row(ng_).transpose();
    const Mat fw = p.free.topRows(ng_);
    free_w_ = Eigen::Map<const Vec>(fw.data(), fw.size());
    const Vec w = dedko::knot_sum_weights(nk_, n_);
    lin_.resize(q_);
    for (Index j = 0; j < nk_; ++j)
      for (Index g = 0; g < ng_; ++g) lin_(g + ng_ * j) = p.cost(g) * w(j) / static_cast<double>(n_);
    slack_w_ = p.cost(ng_) / static_cast<double>(n_);
    lower_.resize(q_);
    span_.resize(q_);
    for (Index j = 0; j < nk_; ++j)
      for (Index g = 0; g < ng_; ++g) {
        lower_(g + ng_ * j) = p.p_min(g);
        span_(g + ng_ * j) = p.p_max(g) - p.p_min(g);
      }
    // steps whose frequency the knots cannot move (the initial state) are
    // left out of the constraint set
    controllable_.assign(static_cast<std::size_t>(ng_ * n_), 0);
    for (Index c = 0; c < ng_ * n_; ++c) controllable_[static_cast<std::size_t>(c)] = gw_.row(c).squaredNorm() > 0.0;
    f_scale_ = p.omega_bound > 0.0 ? 1.0 / p.omega_bound : 1.0;
    r_scale_ = 1.0 / p.ramp_limit;
    mu_f_ = Vec::Zero(ng_ * n_);
    mu_r_ = Vec::Zero(ng_ * (nk_ - 1));
    lam_ = Vec::Zero(ng_);
  }

  Index q() const { return q_; }

  // smoothing width of |P_s| inside the subproblems
  double delta = 0.0;

  void evaluate(Point& pt, double rho, bool with_grad) const {
    pt.th = pt.z.array().tanh().matrix();
    pt.pi = lower_ + 0.5 * (Vec::Ones(q_) + pt.th).cwiseProduct(span_);
    pt.pi = pt.pi.cwiseMax(lower_).cwiseMin(lower_ + span_);
    pt.pi.head(ng_) = p_.p_g0;
    pt.ys.noalias() = gs_ * pt.pi;
    pt.ys += free_s_;
    pt.yw.noalias() = gw_ * pt.pi;
    pt.yw += free_w_;

    pt.d_slack.resize(n_);
    pt.d_omega.clear();
    pt.d_pi = lin_;
    double obj = lin_.dot(pt.pi);
    double smooth = obj;
    double pen = 0.0;
    pt.freq = pt.ramp = pt.initial = pt.scaled = 0.0;

    for (Index k = 0; k < n_; ++k) {
      const double ys = pt.ys(k);
      obj += slack_w_ * std::abs(ys);
      if (delta <= 0.0 || std::abs(ys) > delta) {
        smooth += slack_w_ * (std::abs(ys) - 0.5 * delta);
        pt.d_slack(k) = slack_w_ * sign(ys);
      } else {
        smooth += slack_w_ * 0.5 * ys * ys / delta;
        pt.d_slack(k) = slack_w_ * ys / delta;
      }
    }
    for (Index c = 0; c < ng_ * n_; ++c) {
      if (!controllable_[static_cast<std::size_t>(c)]) continue;
      const double om = pt.yw(c);
      const double viol = std::abs(om) - p_.omega_bound;
      pt.freq = std::max(pt.freq, viol);
      const double a = std::max(0.0, viol * f_scale_ + mu_f_(c) / rho);
      if (a > 0.0) {
        pen += 0.5 * rho * a * a;
        pt.d_omega.emplace_back(c, rho * a * f_scale_ * sign(om));
      }
    }
    for (Index j = 0; j + 1 < nk_; ++j)
      for (Index g = 0; g < ng_; ++g) {
        const Index c = g + ng_ * j;
        const double d = pt.pi(g + ng_ * (j + 1)) - pt.pi(g + ng_ * j);
        const double viol = std::abs(d) - p_.ramp_limit;
        pt.ramp = std::max(pt.ramp, viol);
        const double a = std::max(0.0, viol * r_scale_ + mu_r_(c) / rho);
        pen += 0.5 * rho * a * a;
        const double gd = rho * a * r_scale_ * sign(d);
        pt.d_pi(g + ng_ * (j + 1)) += gd;
        pt.d_pi(g + ng_ * j) -= gd;
      }
    for (Index g = 0; g < ng_; ++g) {
      const double h = pt.pi(g) - p_.p_g0(g);
      pt.initial = std::max(pt.initial, std::abs(h));
      pen += lam_(g) * h + 0.5 * rho * h * h;
      pt.d_pi(g) += lam_(g) + rho * h;
    }
    pt.freq = std::max(0.0, pt.freq);
    pt.ramp = std::max(0.0, pt.ramp);
    pt.scaled = std::max({pt.freq * f_scale_, pt.ramp * r_scale_, pt.initial});
    pt.objective = obj;
    pt.lagrangian = smooth + pen;
    if (with_grad) gradient(pt);
  }

  // d pi / d z, zero for the pinned first knot
  Vec slope(const Point& pt) const {
    Vec sl = 0.5 * (Vec::Ones(q_) - pt.th.cwiseProduct(pt.th)).cwiseProduct(span_);
    sl.head(ng_).setZero();
    return sl;
  }

  void gradient(Point& pt) const {
    Vec dpi = pt.d_pi;
    dpi.noalias() += gs_.transpose() * pt.d_slack;
    for (const auto& [row, coeff] : pt.d_omega) dpi += coeff * gw_.row(row).transpose();
    pt.grad = dpi.cwiseProduct(slope(pt));
  }

  void update_multipliers(const Point& pt, double rho) {
    for (Index c = 0; c < ng_ * n_; ++c) {
      if (!controllable_[static_cast<std::size_t>(c)]) continue;
      const double s = (std::abs(pt.yw(c)) - p_.omega_bound) * f_scale_;
      mu_f_(c) = std::max(0.0, mu_f_(c) + rho * s);
    }
    for (Index j = 0; j + 1 < nk_; ++j)
      for (Index g = 0; g < ng_; ++g) {
        const double d = pt.pi(g + ng_ * (j + 1)) - pt.pi(g + ng_ * j);
        mu_r_(g + ng_ * j) = std::max(0.0, mu_r_(g + ng_ * j) + rho * (std::abs(d) - p_.ramp_limit) * r_scale_);
      }
    for (Index g = 0; g < ng_; ++g) lam_(g) += rho * (pt.pi(g) - p_.p_g0(g));
  }

  double raw_cost(const Point& pt) const { return pt.objective * static_cast<double>(n_) * p_.dt; }

 private:
  const dedko::DedKoProblem& p_;
  const Mat& gw_;
  const Mat& gs_;
  Index ng_, nk_, n_, q_ = 0;
  Vec free_s_, free_w_, lin_, lower_, span_;
  double slack_w_ = 0.0, f_scale_ = 1.0, r_scale_ = 1.0;
  std::vector<char> controllable_;
  Vec mu_f_, mu_r_, lam_;
};

template <class Consider>
int inner_adam(const Solver& s, Point& cur, double rho, const OnlineConfig& cfg, Consider&& consider) {
  const Index q = cur.z.size();
  Vec m = Vec::Zero(q), v = Vec::Zero(q);
  const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
  double lr = cfg.lr;
  double window_start = cur.lagrangian;
  int it = 0;
  while (it < cfg.inner_iterations) {
    ++it;
    m = b1 * m + (1.0 - b1) * cur.grad;
    v = b2 * v + (1.0 - b2) * cur.grad.cwiseProduct(cur.grad);
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(it));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(it));
    Point trial;
    trial.z = (cur.z - lr * ((m / c1).array() / ((v / c2).array().sqrt() + eps)).matrix())
                  .cwiseMax(-cfg.z_limit)
                  .cwiseMin(cfg.z_limit);
    s.evaluate(trial, rho, true);
    if (!std::isfinite(trial.lagrangian)) throw NumericFault("online solver produced a non-finite value");
    if (trial.lagrangian <= cur.lagrangian) {
      cur = std::move(trial);
      consider(cur);
      lr = std::min(cfg.lr, lr * cfg.lr_recovery);
    } else {
      lr *= 0.5;
      if (lr < cfg.min_lr) break;
    }
    if (it % 50 == 0) {
      if (window_start - cur.lagrangian <= cfg.stall * (1.0 + std::abs(cur.lagrangian))) break;
      window_start = cur.lagrangian;
    }
  }
  return it;
}

// Limited-memory BFGS with a backtracking line search that halves the step
// until the sufficient-decrease test passes.
template <class Consider>
int inner_lbfgs(const Solver& s, Point& cur, double rho, const OnlineConfig& cfg, Consider&& consider) {
  std::vector<Vec> S, Y;
  std::vector<double> R;
  double window_start = cur.lagrangian;
  // with knot_metric the curvature pairs live in knot space, where the
  // subproblem is convex; z only enforces the bounds
  auto metric_grad = [&](const Point& pt) -> Vec {
    if (!cfg.knot_metric) return pt.grad;
    const Vec sl = s.slope(pt);
    Vec g = Vec::Zero(sl.size());
    for (Index i = 0; i < sl.size(); ++i)
      if (sl(i) > 0.0) g(i) = pt.grad(i) / sl(i);
    return g;
  };
  Vec gm = metric_grad(cur);
  int it = 0;
  while (it < cfg.inner_iterations) {
    ++it;
    const Vec& g = cur.grad;
    Vec d = -gm;
    if (!S.empty()) {
      std::vector<double> alpha(S.size());
      for (std::size_t i = S.size(); i-- > 0;) {
        alpha[i] = R[i] * S[i].dot(d);
        d -= alpha[i] * Y[i];
      }
      d *= S.back().dot(Y.back()) / Y.back().squaredNorm();
      for (std::size_t i = 0; i < S.size(); ++i) d += S[i] * (alpha[i] - R[i] * Y[i].dot(d));
    } else {
      const double gmax = gm.cwiseAbs().maxCoeff();
      if (gmax == 0.0) break;
      d *= cfg.lr / gmax;
    }
    if (cfg.knot_metric) {
      const Vec sl = s.slope(cur);
      for (Index i = 0; i < d.size(); ++i) d(i) = sl(i) > 0.0 ? d(i) / sl(i) : 0.0;
    }
    double slope = g.dot(d);
    if (!(slope < 0.0)) {
      S.clear();
      Y.clear();
      R.clear();
      const double gmax = g.cwiseAbs().maxCoeff();
      if (gmax == 0.0) break;
      d = -g * (cfg.lr / gmax);
      slope = g.dot(d);
    }
    // keep steps short in z so a knot cannot jump deep into the flat tail of tanh
    if (cfg.knot_metric) {
      d = d.cwiseMax(-cfg.max_step).cwiseMin(cfg.max_step);
      slope = g.dot(d);
      if (!(slope < 0.0)) {
        d = -g * (cfg.lr / g.cwiseAbs().maxCoeff());
        slope = g.dot(d);
      }
    } else {
      const double dmax = d.cwiseAbs().maxCoeff();
      if (dmax > cfg.max_step) {
        d *= cfg.max_step / dmax;
        slope = g.dot(d);
      }
    }
    double t = 1.0;
    Point trial;
    bool accepted = false;
    for (int k = 0; k < 40; ++k) {
      trial.z = (cur.z + t * d).cwiseMax(-cfg.z_limit).cwiseMin(cfg.z_limit);
      s.evaluate(trial, rho, false);
      if (std::isfinite(trial.lagrangian) && trial.lagrangian <= cur.lagrangian + 1e-4 * t * slope) {
        s.gradient(trial);
        accepted = true;
        break;
      }
      t *= 0.5;
    }
    if (!accepted) {
      if (S.empty()) break;
      S.clear();
      Y.clear();
      R.clear();
      continue;
    }
    const Vec gm_next = metric_grad(trial);
    Vec sk = cfg.knot_metric ? Vec(trial.pi - cur.pi) : Vec(trial.z - cur.z);
    Vec yk = cfg.knot_metric ? Vec(gm_next - gm) : Vec(trial.grad - cur.grad);
    const double sy = sk.dot(yk);
    if (sy > 1e-12 * sk.norm() * yk.norm()) {
      if (static_cast<int>(S.size()) == cfg.memory) {
        S.erase(S.begin());
        Y.erase(Y.begin());
        R.erase(R.begin());
      }
      S.push_back(std::move(sk));
      Y.push_back(std::move(yk));
      R.push_back(1.0 / sy);
    }
    cur = std::move(trial);
    gm = gm_next;
    consider(cur);
    if (it % 10 == 0) {
      if (window_start - cur.lagrangian <= cfg.stall * (1.0 + std::abs(cur.lagrangian))) break;
      window_start = cur.lagrangian;
    }
  }
  return it;
}

}  // namespace

SolveReport solve_ded_ko(const dedko::DedKoProblem& problem, const koopman::KoopmanResponse& response,
                         const OnlineConfig& cfg) {
  const auto t0 = std::chrono::steady_clock::now();
  if (cfg.outer_iterations <= 0 || cfg.inner_iterations <= 0 || !(cfg.lr > 0.0) || !(cfg.rho0 > 0.0))
    throw InvalidInput("online solver: bad configuration");
  Solver s(problem, response);
  const Index q = s.q();
  double rho = cfg.rho0;

  Point cur;
  cur.z = Vec::Zero(q);
  s.evaluate(cur, rho, true);

  Point best = cur;
  bool have_feasible = false;
  auto consider = [&](const Point& pt) {
    const double res = std::max({pt.freq, pt.ramp, pt.initial});
    const bool feasible = res <= cfg.tolerance;
    if (feasible && (!have_feasible || pt.objective < best.objective)) {
      best = pt;
      have_feasible = true;
    } else if (!have_feasible && res < std::max({best.freq, best.ramp, best.initial})) {
      best = pt;
    }
  };
  consider(cur);

  SolveReport rep;
  double prev_scaled = std::numeric_limits<double>::infinity();
  double prev_objective = std::numeric_limits<double>::infinity();
  for (int outer = 0; outer < cfg.outer_iterations; ++outer) {
    rep.outer_iterations = outer + 1;
    s.delta = std::max(cfg.smoothing_min, cfg.smoothing * std::pow(cfg.smoothing_decay, outer));
    s.evaluate(cur, rho, true);
    if (cfg.inner == InnerMethod::Lbfgs)
      rep.iterations += inner_lbfgs(s, cur, rho, cfg, consider);
    else
      rep.iterations += inner_adam(s, cur, rho, cfg, consider);
    rep.trace.push_back({rho, cur.scaled});
    const bool feasible = std::max({cur.freq, cur.ramp, cur.initial}) <= cfg.tolerance;
    const bool sharp = s.delta <= cfg.smoothing_min;
    if (feasible && sharp && std::abs(cur.objective - prev_objective) <= cfg.objective_tolerance * (1.0 + std::abs(cur.objective))) {
      rep.converged = true;
      break;
    }
    prev_objective = cur.objective;
    s.update_multipliers(cur, rho);
    // a feasible iterate needs no stiffer penalty
    if (!feasible && cur.scaled > cfg.residual_decrease * prev_scaled)
      rho = std::min(cfg.rho_max, rho * cfg.rho_growth);
    prev_scaled = cur.scaled;
  }
  rep.converged = rep.converged && have_feasible;

  rep.coarse = Eigen::Map<const Mat>(best.pi.data(), problem.n_gen(), problem.n_knots);
  rep.fine = ad::linear_interpolate(rep.coarse, problem.n_steps);
  rep.objective = s.raw_cost(best);
  rep.freq_residual = best.freq;
  rep.ramp_residual = best.ramp;
  rep.initial_residual = best.initial;
  rep.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return rep;
}

SolveReport solve_ded_ko(const scenario::ProblemInstance& inst, const grid::Network& net,
                         const koopman::KoopmanModel& model, const koopman::KoopmanResponse& response,
                         double ramp_limit_fine, const OnlineConfig& config) {
  const auto t0 = std::chrono::steady_clock::now();
  const dedko::DedKoProblem p = dedko::make_problem(inst, net, model, response, ramp_limit_fine);
  SolveReport r = solve_ded_ko(p, response, config);
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return r;
}

ToyResult brute_force_toy(const dedko::DedKoProblem& p, const koopman::KoopmanResponse& response, int resolution,
                          double tolerance) {
  if (p.n_gen() != 1) throw InvalidInput("brute_force_toy: single-generator problems only");
  if (resolution < 1) throw InvalidInput("brute_force_toy: resolution must be positive");
  const Index free_knots = p.n_knots - 1;
  const double points = static_cast<double>(resolution) + 1.0;
  if (std::pow(points, static_cast<double>(free_knots)) > 1e7)
    throw InvalidInput("brute_force_toy: enumeration exceeds 1e7 schedules");
  const double lo = p.p_min(0), hi = p.p_max(0);
  auto value = [&](Index i) { return lo + (hi - lo) * static_cast<double>(i) / resolution; };

  ToyResult out;
  std::vector<Index> idx(static_cast<std::size_t>(free_knots), 0);
  Mat knots(1, p.n_knots);
  knots(0, 0) = p.p_g0(0);
  while (true) {
    for (Index j = 0; j < free_knots; ++j) knots(0, j + 1) = value(idx[static_cast<std::size_t>(j)]);
    ++out.evaluated;
    const auto m = dedko::evaluate_surrogate(p, response, knots);
    // the first step is fixed by the initial state
    double freq = 0.0;
    for (Index k = 1; k < p.n_steps; ++k) freq = std::max(freq, std::abs(m.outputs(0, k)) - p.omega_bound);
    const bool ok = freq <= tolerance && m.max_ramp_violation <= tolerance;
    if (ok && (!out.feasible || m.cost < out.objective)) {
      out.feasible = true;
      out.objective = m.cost;
      out.knots = knots;
    }
    // odometer with the last knot varying fastest
    Index j = free_knots - 1;
    while (j >= 0 && idx[static_cast<std::size_t>(j)] == resolution) idx[static_cast<std::size_t>(j--)] = 0;
    if (j < 0) break;
    ++idx[static_cast<std::size_t>(j)];
  }
  return out;
}

}  // namespace dedpc::online
