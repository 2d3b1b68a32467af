#include "dedpc/koopman.hpp"

#include <algorithm>
#include <iostream>
#include <numeric>
#include <limits>
#include <set>

#include <complex>

#include <Eigen/Eigenvalues>
#include <Eigen/SVD>

#include "dedpc/errors.hpp"
#include "json_util.hpp"

namespace dedpc::koopman {

using ad::Tape;
using ad::Var;

// ---------------------------------------------------------------------------
// model

Index InjectionFeatures::size() const {
  if (empty()) return 0;
  const auto ns = static_cast<Index>(slots.size());
  const auto ng = static_cast<Index>(generator_slots.size());
  return rates ? ns + ng + 1 + (ns - ng) : ns;
}

InjectionFeatures injection_features(const grid::Network& net, bool rates) {
  InjectionFeatures f;
  f.coupling = net.coupling();
  f.slots = net.non_slack();
  for (Index g : net.generators()) f.generator_slots.push_back(net.angle_slot(g));
  f.slack = net.slack();
  f.rates = rates;
  return f;
}

Mat KoopmanModel::feature_batch(const Mat& X) const {
  if (X.rows() != dims.n_x()) throw InvalidInput("observe: state has wrong dimension");
  if (features.empty()) return X;
  Mat F(n_features(), X.cols());
  F.topRows(dims.n_x()) = X;
  const Mat& a = features.coupling;
  const Index nb = a.rows();
  const auto ns = static_cast<Index>(features.slots.size());
  const auto ng = static_cast<Index>(features.generator_slots.size());
  std::vector<char> is_gen(static_cast<std::size_t>(ns), 0);
  for (Index s : features.generator_slots) is_gen[static_cast<std::size_t>(s)] = 1;
  std::vector<Index> alg_bus, gen_bus;
  for (Index s = 0; s < ns; ++s)
    (is_gen[static_cast<std::size_t>(s)] ? gen_bus : alg_bus).push_back(features.slots[static_cast<std::size_t>(s)]);
  gen_bus.clear();
  for (Index s : features.generator_slots) gen_bus.push_back(features.slots[static_cast<std::size_t>(s)]);
  const auto na = static_cast<Index>(alg_bus.size());

  Vec theta(nb), rate(nb);
  Mat jaa(na, na);
  Vec rhs(na);
  for (Index c = 0; c < X.cols(); ++c) {
    theta.setZero();
    for (Index s = 0; s < ns; ++s) theta(features.slots[static_cast<std::size_t>(s)]) = X(s, c);
    Index row = dims.n_x();
    for (Index s = 0; s < ns; ++s) {
      const Index i = features.slots[static_cast<std::size_t>(s)];
      double f = 0.0;
      for (Index j = 0; j < nb; ++j)
        if (a(i, j) != 0.0) f += a(i, j) * std::sin(theta(i) - theta(j));
      F(row++, c) = f;
    }
    if (!features.rates) continue;
    // angle velocities: omega at generators, zero at the slack, algebraic
    // angles follow from holding their injections fixed
    auto jac = [&](Index i, Index j) {
      if (i != j) return -a(i, j) * std::cos(theta(i) - theta(j));
      double d = 0.0;
      for (Index k = 0; k < nb; ++k)
        if (k != i && a(i, k) != 0.0) d += a(i, k) * std::cos(theta(i) - theta(k));
      return d;
    };
    rate.setZero();
    for (Index g = 0; g < ng; ++g) rate(gen_bus[static_cast<std::size_t>(g)]) = X(ns + g, c);
    for (Index p = 0; p < na; ++p) {
      double r = 0.0;
      for (Index g = 0; g < ng; ++g) r -= jac(alg_bus[static_cast<std::size_t>(p)], gen_bus[static_cast<std::size_t>(g)]) * rate(gen_bus[static_cast<std::size_t>(g)]);
      rhs(p) = r;
      for (Index q = 0; q < na; ++q) jaa(p, q) = jac(alg_bus[static_cast<std::size_t>(p)], alg_bus[static_cast<std::size_t>(q)]);
    }
    const Vec va = jaa.partialPivLu().solve(rhs);
    for (Index p = 0; p < na; ++p) rate(alg_bus[static_cast<std::size_t>(p)]) = va(p);
    auto fdot = [&](Index i) {
      double d = 0.0;
      for (Index j = 0; j < nb; ++j)
        if (j != i && a(i, j) != 0.0) d += a(i, j) * std::cos(theta(i) - theta(j)) * (rate(i) - rate(j));
      return d;
    };
    for (Index g = 0; g < ng; ++g) F(row++, c) = fdot(gen_bus[static_cast<std::size_t>(g)]);
    F(row++, c) = fdot(features.slack);
    for (Index p = 0; p < na; ++p) F(row++, c) = va(p);
  }
  return F;
}

namespace {

Mat standardize(const KoopmanModel& m, const Mat& F) {
  return (F.colwise() - m.net.shift).array().colwise() / m.net.scale.array();
}

Mat latent_batch(const KoopmanModel& m, const Mat& Z) {
  const auto& n = m.net;
  Mat h1 = n.w1 * Z;
  h1.colwise() += n.b1.col(0);
  h1 = h1.array().tanh();
  Mat h2 = n.w2 * h1;
  h2.colwise() += n.b2.col(0);
  h2 = h2.array().tanh();
  Mat out = n.w3 * h2 + n.skip * Z;
  out.colwise() += n.b3.col(0);
  return out;
}

}  // namespace

Mat KoopmanModel::observe_batch(const Mat& X) const {
  const Mat Z = standardize(*this, feature_batch(X));
  Mat psi(dims.n_psi(), X.cols());
  psi.topRows(dims.n_gen) = X.middleRows(dims.n_angles, dims.n_gen);
  psi.row(dims.n_gen) = X.row(dims.n_x() - 1);
  psi.bottomRows(dims.n_latent) = latent_batch(*this, Z);
  return psi;
}

Mat KoopmanModel::readout_omega() const {
  Mat a = Mat::Zero(dims.n_gen, dims.n_psi());
  a.leftCols(dims.n_gen).setIdentity();
  return a;
}

Vec KoopmanModel::readout_slack() const {
  Vec s = Vec::Zero(dims.n_psi());
  s(dims.slack_slot()) = 1.0;
  return s;
}

KoopmanModel make_model(const KoopmanDims& dims, InjectionFeatures features, std::mt19937_64& rng) {
  KoopmanModel m;
  m.dims = dims;
  m.features = std::move(features);
  const Index nf = m.n_features();
  m.net.shift = Vec::Zero(nf);
  m.net.scale = Vec::Ones(nf);
  m.net.w1 = ad::uniform_init(dims.hidden, nf, nf, rng);
  m.net.b1 = ad::uniform_init(dims.hidden, 1, nf, rng);
  m.net.w2 = ad::uniform_init(dims.hidden, dims.hidden, dims.hidden, rng);
  m.net.b2 = ad::uniform_init(dims.hidden, 1, dims.hidden, rng);
  m.net.w3 = ad::uniform_init(dims.n_latent, dims.hidden, dims.hidden, rng);
  m.net.b3 = ad::uniform_init(dims.n_latent, 1, dims.hidden, rng);
  m.net.skip = Mat::Zero(dims.n_latent, nf);
  m.K = Mat::Identity(dims.n_psi(), dims.n_psi());
  m.B = Mat::Zero(dims.n_psi(), dims.n_u());
  return m;
}

Vec observe(const Vec& x, const KoopmanModel& model) {
  if (x.size() != model.dims.n_x()) throw InvalidInput("observe: state has wrong dimension");
  return model.observe_batch(x);
}

Vec ko_step(const Vec& psi, const Vec& input, const KoopmanModel& model) {
  if (psi.size() != model.dims.n_psi() || input.size() != model.dims.n_u())
    throw InvalidInput("ko_step: dimension mismatch");
  const Vec bp = model.B * input;
  return model.K * (psi - bp) + bp;
}

Mat rollout(const Vec& psi0, const Mat& inputs, const KoopmanModel& model) {
  if (psi0.size() != model.dims.n_psi() || inputs.rows() != model.dims.n_u())
    throw InvalidInput("rollout: dimension mismatch");
  const Index n = inputs.cols();
  Mat psi(model.dims.n_psi(), n + 1);
  psi.col(0) = psi0;
  for (Index k = 0; k < n; ++k) psi.col(k + 1) = ko_step(psi.col(k), inputs.col(k), model);
  return psi;
}

Var rollout(const Vec& psi0, const Var& inputs, const KoopmanModel& model) {
  Mat psi = rollout(psi0, inputs.value(), model);
  Tape& t = *inputs.tape();
  const auto iu = inputs.id();
  const Mat kt = model.K.transpose();
  const Mat ct = ((Mat::Identity(model.dims.n_psi(), model.dims.n_psi()) - model.K) * model.B).transpose();
  return t.push(std::move(psi), {iu}, [iu, kt, ct](Tape& t, std::size_t self) {
    const Mat& g = t.grad(self);
    const Index n = g.cols() - 1;
    Mat& du = t.grad_ref(iu);
    Vec lambda = g.col(n);
    for (Index k = n - 1; k >= 0; --k) {
      du.col(k) += ct * lambda;
      lambda = g.col(k) + kt * lambda;
    }
  });
}

double spectral_radius(const Mat& K) {
  Eigen::EigenSolver<Mat> es(K, false);
  return es.eigenvalues().cwiseAbs().maxCoeff();
}

double spectral_radius_power(const Mat& K, int iterations) {
  Vec v = Vec::Ones(K.rows()) / std::sqrt(static_cast<double>(K.rows()));
  // deterministic irregular start so no eigenvector is missed by symmetry
  for (Index i = 0; i < v.size(); ++i) v(i) += 1e-3 * static_cast<double>((i * 7919) % 13);
  v.normalize();
  double log_growth = 0.0;
  const int burn_in = iterations / 2;
  for (int it = 0; it < iterations; ++it) {
    v = K * v;
    const double n = v.norm();
    if (n == 0.0) return 0.0;
    if (it >= burn_in) log_growth += std::log(n);
    v /= n;
  }
  return std::exp(log_growth / static_cast<double>(iterations - burn_in));
}

double spectral_norm(const Mat& K) {
  Eigen::JacobiSVD<Mat> svd(K);
  return svd.singularValues()(0);
}

double stability_penalty(const Mat& K, double weight, double margin) {
  const double excess = std::max(0.0, spectral_radius(K) - (1.0 - margin));
  return weight * excess * excess;
}

// ---------------------------------------------------------------------------
// affine response

KoopmanResponse::KoopmanResponse(const KoopmanModel& model, Index n_steps, Index n_knots)
    : model_(&model), n_steps_(n_steps), n_knots_(n_knots), n_out_(model.dims.n_gen + 1) {
  if (n_knots < 2 || n_steps < n_knots) throw InvalidInput("KoopmanResponse: bad horizon");
  const Index ng = model.dims.n_gen;
  const Index np = model.dims.n_psi();
  const Index q = ng * n_knots;
  const Mat c = (Mat::Identity(np, np) - model.K) * model.B;
  const Mat cg = c.leftCols(ng);

  gain_.resize(n_out_ * n_steps, q);
  Mat psi = Mat::Zero(np, q);
  Mat next(np, q);
  for (Index k = 0; k < n_steps; ++k) {
    gain_.middleRows(n_out_ * k, n_out_) = psi.topRows(n_out_);
    if (k + 1 == n_steps) break;
    next.noalias() = model.K * psi;
    const auto w = ad::interp_weight(k, n_knots, n_steps);
    for (Index i = 0; i < ng; ++i) {
      next.col(i + ng * w.lower) += (1.0 - w.frac) * cg.col(i);
      next.col(i + ng * (w.lower + 1)) += w.frac * cg.col(i);
    }
    psi.swap(next);
  }
  omega_gain_.resize(ng * n_steps, q);
  slack_gain_.resize(n_steps, q);
  for (Index k = 0; k < n_steps; ++k) {
    omega_gain_.middleRows(ng * k, ng) = gain_.middleRows(n_out_ * k, ng);
    slack_gain_.row(k) = gain_.row(n_out_ * k + ng);
  }
}

Mat KoopmanResponse::free_response(const Vec& psi0, const Mat& loads) const {
  const auto& m = *model_;
  if (loads.rows() != m.dims.n_loads || loads.cols() < n_steps_)
    throw InvalidInput("free_response: load sequence shape");
  const Index np = m.dims.n_psi();
  const Mat cl = ((Mat::Identity(np, np) - m.K) * m.B).rightCols(m.dims.n_loads);
  Mat out(n_out_, n_steps_);
  Vec psi = psi0;
  for (Index k = 0; k < n_steps_; ++k) {
    out.col(k) = psi.head(n_out_);
    psi = m.K * psi + cl * loads.col(k);
  }
  return out;
}

Mat KoopmanResponse::outputs(const Mat& free, const Mat& knots) const {
  const Index q = gain_.cols();
  if (knots.size() != q) throw InvalidInput("KoopmanResponse: knot matrix shape");
  const Vec y = gain_ * Eigen::Map<const Vec>(knots.data(), q);
  return free + Eigen::Map<const Mat>(y.data(), n_out_, n_steps_);
}

Var KoopmanResponse::outputs(const Mat& free, const Var& knots) const {
  const Index q = gain_.cols();
  const Index batch = knots.value().size() / q;
  if (knots.rows() != model_->dims.n_gen || knots.value().size() != q * batch ||
      free.rows() != n_out_ || free.cols() != n_steps_ * batch)
    throw InvalidInput("KoopmanResponse: batch shapes");
  const Mat y = gain_ * Eigen::Map<const Mat>(knots.value().data(), q, batch);
  Mat out = free + Eigen::Map<const Mat>(y.data(), n_out_, n_steps_ * batch);
  Tape& t = *knots.tape();
  const auto ik = knots.id();
  const Mat* gain = &gain_;
  return t.push(std::move(out), {ik}, [ik, gain, q, batch](Tape& t, std::size_t self) {
    const Mat& g = t.grad(self);
    const Mat dk = gain->transpose() * Eigen::Map<const Mat>(g.data(), gain->rows(), batch);
    Mat& dst = t.grad_ref(ik);
    Eigen::Map<Mat>(dst.data(), q, batch) += dk;
  });
}

// ---------------------------------------------------------------------------
// training

void TransitionDataset::append(const Vec& xa, const Vec& input, const Vec& xb, int source) {
  const Index n = size();
  if (n == 0) {
    x0.resize(xa.size(), 0);
    u.resize(input.size(), 0);
    x1.resize(xb.size(), 0);
  }
  x0.conservativeResize(Eigen::NoChange, n + 1);
  u.conservativeResize(Eigen::NoChange, n + 1);
  x1.conservativeResize(Eigen::NoChange, n + 1);
  x0.col(n) = xa;
  u.col(n) = input;
  x1.col(n) = xb;
  group.push_back(source);
}

Vec relative_one_step_loss(const KoopmanModel& model, const Mat& x0, const Mat& u, const Mat& x1,
                           double epsilon) {
  const Mat psi0 = model.observe_batch(x0);
  const Mat psi1 = model.observe_batch(x1);
  const Mat bp = model.B * u;
  const Mat pred = model.K * (psi0 - bp) + bp;
  const Vec num = (pred - psi1).colwise().squaredNorm();
  const Vec den = (x0 - x1).colwise().squaredNorm().array() + epsilon;
  return num.array() / den.array();
}

namespace {

struct Params {
  Mat* w1; Mat* b1; Mat* w2; Mat* b2; Mat* w3; Mat* b3; Mat* skip; Mat* K; Mat* B;
  std::vector<Mat*> all() const { return {w1, b1, w2, b2, w3, b3, skip, K, B}; }
};

Var latent_on_tape(const std::vector<Var>& p, const Var& z) {
  Var h1 = ad::tanh(ad::add_col_bias(ad::matmul(p[0], z), p[1]));
  Var h2 = ad::tanh(ad::add_col_bias(ad::matmul(p[2], h1), p[3]));
  Var out = ad::add_col_bias(ad::matmul(p[4], h2), p[5]);
  return ad::add(out, ad::matmul(p[6], z));
}

// d|lambda|/dK for the dominant eigenvalue is Re(conj(lambda)/|lambda| w v^T),
// with v the right eigenvector and w^H the matching row of V^{-1}.
Var spectral_penalty_on_tape(const Var& k, double weight, double margin) {
  Eigen::ComplexEigenSolver<Mat> es(k.value());
  const auto& lam = es.eigenvalues();
  Index top = 0;
  for (Index i = 1; i < lam.size(); ++i)
    if (std::abs(lam(i)) > std::abs(lam(top))) top = i;
  const double rho = std::abs(lam(top));
  const double excess = std::max(0.0, rho - (1.0 - margin));
  Mat v(1, 1);
  v(0, 0) = weight * excess * excess;
  Mat dir = Mat::Zero(k.rows(), k.cols());
  if (excess > 0.0) {
    const Eigen::MatrixXcd vinv = es.eigenvectors().inverse();
    const std::complex<double> phase = std::conj(lam(top)) / rho;
    dir = (phase * (vinv.row(top).transpose() * es.eigenvectors().col(top).transpose())).real();
  }
  const double slope = 2.0 * weight * excess;
  Tape& t = *k.tape();
  const auto ik = k.id();
  return t.push(std::move(v), {ik}, [ik, dir, slope](Tape& t, std::size_t self) {
    if (slope != 0.0) t.grad_ref(ik) += t.grad(self)(0, 0) * slope * dir;
  });
}

// Moves eigenvalues of magnitude above `radius` onto that circle.
Mat clip_spectrum(const Mat& K, double radius) {
  Eigen::ComplexEigenSolver<Mat> es(K);
  Eigen::VectorXcd lam = es.eigenvalues();
  bool changed = false;
  for (Index i = 0; i < lam.size(); ++i)
    if (std::abs(lam(i)) > radius) {
      lam(i) *= radius / std::abs(lam(i));
      changed = true;
    }
  if (!changed) return K;
  const Eigen::MatrixXcd& v = es.eigenvectors();
  return (v * lam.asDiagonal() * v.inverse()).real();
}

// Weighted least squares for [K - I, C] on fixed observables, then
// B = (I - K)^{-1} C. Fitting increments keeps the near-identity part exact;
// QR avoids squaring the conditioning of the collinear feature block. The
// ridge pulls K itself toward zero, and directions the data never visits get
// no dynamics, so unexcited modes decay instead of sitting at 1.
void fit_operator(KoopmanModel& m, const Mat& x0, const Mat& u, const Mat& x1, const KoopmanTrainConfig& cfg) {
  const Mat psi0 = m.observe_batch(x0);
  const Mat psi1 = m.observe_batch(x1);
  const Vec w = ((x0 - x1).colwise().squaredNorm().array() + cfg.epsilon).rsqrt();
  const Index np = m.dims.n_psi();
  const Index nu = m.dims.n_u();
  const Index n = x0.cols();
  const Index nc = np + nu;
  Mat z = Mat::Zero(n + nc, nc);
  z.topLeftCorner(n, np) = w.asDiagonal() * psi0.transpose();
  z.topRightCorner(n, nu) = w.asDiagonal() * u.transpose();
  const double lambda = std::sqrt(cfg.ridge * z.topRows(n).squaredNorm() / static_cast<double>(nc));
  z.bottomRows(nc).diagonal().setConstant(lambda);
  Mat rhs = Mat::Zero(n + nc, np);
  rhs.topRows(n) = w.asDiagonal() * (psi1 - psi0).transpose();
  rhs.block(n, 0, np, np).diagonal().setConstant(-lambda);
  const Mat kc = z.colPivHouseholderQr().solve(rhs).transpose();

  Eigen::JacobiSVD<Mat> svd(psi0, Eigen::ComputeFullU);
  const Vec& sv = svd.singularValues();
  Index rank = 0;
  while (rank < sv.size() && sv(rank) > cfg.rank_tolerance * sv(0)) ++rank;
  const Mat basis = svd.matrixU().leftCols(rank);

  Mat K = (kc.leftCols(np) + Mat::Identity(np, np)) * (basis * basis.transpose());
  K = clip_spectrum(K, 1.0 - cfg.stability_margin);
  const Mat C = kc.rightCols(nu);
  m.K = K;
  m.B = (Mat::Identity(np, np) - K).fullPivLu().solve(C);
}

Mat gather_cols(const Mat& src, const std::vector<Index>& idx) {
  Mat out(src.rows(), static_cast<Index>(idx.size()));
  for (std::size_t c = 0; c < idx.size(); ++c) out.col(static_cast<Index>(c)) = src.col(idx[c]);
  return out;
}

}  // namespace

KoopmanModel train_koopman(const TransitionDataset& data, const KoopmanDims& dims_in,
                           InjectionFeatures features, const KoopmanTrainConfig& cfg,
                           KoopmanTrainReport* report) {
  if (data.size() == 0) throw InvalidInput("train_koopman: empty dataset");
  if (!(cfg.epsilon > 0.0)) throw InvalidInput("train_koopman: epsilon must be positive");
  if (cfg.batch <= 0 || cfg.epochs < 0) throw InvalidInput("train_koopman: bad batch or epoch count");
  KoopmanDims dims = dims_in;
  dims.n_latent = cfg.n_latent;
  dims.hidden = cfg.hidden;
  if (data.x0.rows() != dims.n_x() || data.u.rows() != dims.n_u())
    throw InvalidInput("train_koopman: dataset does not match model dimensions");
  if (!cfg.injection_features) features = {};
  features.rates = features.rates && cfg.injection_rates;

  std::mt19937_64 rng(cfg.seed);

  // held-out split by source trajectory
  std::vector<int> groups(data.group.begin(), data.group.end());
  std::sort(groups.begin(), groups.end());
  groups.erase(std::unique(groups.begin(), groups.end()), groups.end());
  std::shuffle(groups.begin(), groups.end(), rng);
  const auto n_val_groups =
      groups.size() > 1 ? std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil(
                                                       cfg.validation_fraction * static_cast<double>(groups.size()))))
                        : 0;
  const std::set<int> val_groups(groups.begin(), groups.begin() + static_cast<std::ptrdiff_t>(n_val_groups));
  std::vector<Index> train_idx, val_idx;
  for (Index i = 0; i < data.size(); ++i)
    (val_groups.count(data.group[static_cast<std::size_t>(i)]) ? val_idx : train_idx).push_back(i);
  if (train_idx.empty()) throw InvalidInput("train_koopman: no training pairs after split");

  const Mat tx0 = gather_cols(data.x0, train_idx), tu = gather_cols(data.u, train_idx),
            tx1 = gather_cols(data.x1, train_idx);
  const Mat vx0 = gather_cols(data.x0, val_idx), vu = gather_cols(data.u, val_idx),
            vx1 = gather_cols(data.x1, val_idx);

  KoopmanModel model = make_model(dims, std::move(features), rng);
  const Index nf = model.n_features();
  {
    const Mat f = model.feature_batch(tx0);
    model.net.shift = f.rowwise().mean();
    const Vec sd = ((f.colwise() - model.net.shift).rowwise().squaredNorm() / static_cast<double>(f.cols())).cwiseSqrt();
    for (Index i = 0; i < nf; ++i) model.net.scale(i) = sd(i) > 1e-9 ? sd(i) : 1.0;
  }
  if (cfg.linear_skip) {
    // latent starts as the raw features times skip_gain, with no constant
    // offset (a constant needs a unit eigenvalue in K); the MLP branch starts at 0
    const Index n = std::min(nf, dims.n_latent);
    model.net.b3.setZero();
    model.net.w3.setZero();
    for (Index i = 0; i < n; ++i) {
      model.net.skip(i, i) = cfg.skip_gain * model.net.scale(i);
      model.net.b3(i, 0) = cfg.skip_gain * model.net.shift(i);
    }
  }
  const bool lsq = cfg.least_squares_operator;
  if (lsq) fit_operator(model, tx0, tu, tx1, cfg);

  Params p{&model.net.w1, &model.net.b1, &model.net.w2, &model.net.b2, &model.net.w3,
           &model.net.b3, &model.net.skip, &model.K, &model.B};
  std::vector<Mat*> params = p.all();
  std::vector<char> trained(params.size(), 1);
  trained[6] = cfg.linear_skip;
  trained[7] = trained[8] = !lsq;
  std::vector<Mat*> active;
  for (std::size_t i = 0; i < params.size(); ++i)
    if (trained[i]) active.push_back(params[i]);
  ad::OptimizerState opt = ad::make_optimizer(active, {cfg.lr, 0.9, 0.999, 1e-8, cfg.weight_decay});

  const Mat tz0 = standardize(model, model.feature_batch(tx0));
  const Mat tz1 = standardize(model, model.feature_batch(tx1));
  const Vec tden = (tx0 - tx1).colwise().squaredNorm().array() + cfg.epsilon;
  const Index n_train = tx0.cols();
  const Index ng = dims.n_gen;

  auto held_out = [&]() {
    return val_idx.empty() ? relative_one_step_loss(model, tx0, tu, tx1, cfg.epsilon).mean()
                           : relative_one_step_loss(model, vx0, vu, vx1, cfg.epsilon).mean();
  };
  KoopmanTrainReport rep;
  KoopmanModel best = model;
  double best_val = held_out();
  rep.validation_history.push_back(best_val);
  if (!std::isfinite(best_val)) best_val = std::numeric_limits<double>::infinity();

  std::vector<Index> order(static_cast<std::size_t>(n_train));
  std::iota(order.begin(), order.end(), Index{0});
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_sum = 0.0;
    for (Index start = 0; start < n_train; start += cfg.batch) {
      const Index bs = std::min(cfg.batch, n_train - start);
      Mat z0(nf, bs), z1(nf, bs), ph0(ng + 1, bs), ph1(ng + 1, bs), ub(dims.n_u(), bs), w(dims.n_psi(), bs);
      for (Index c = 0; c < bs; ++c) {
        const Index i = order[static_cast<std::size_t>(start + c)];
        z0.col(c) = tz0.col(i);
        z1.col(c) = tz1.col(i);
        ph0.col(c) << tx0.col(i).segment(dims.n_angles, ng), tx0(dims.n_x() - 1, i);
        ph1.col(c) << tx1.col(i).segment(dims.n_angles, ng), tx1(dims.n_x() - 1, i);
        ub.col(c) = tu.col(i);
        w.col(c).setConstant(1.0 / (tden(i) * static_cast<double>(bs)));
      }
      Tape tape;
      std::vector<Var> pv;
      for (std::size_t k = 0; k < params.size(); ++k) pv.push_back(tape.leaf(*params[k], trained[k] != 0));
      Var psi0 = ad::vcat({tape.constant(ph0), latent_on_tape(pv, tape.constant(z0))});
      Var psi1 = ad::vcat({tape.constant(ph1), latent_on_tape(pv, tape.constant(z1))});
      Var bp = ad::matmul(pv[8], tape.constant(ub));
      Var pred = ad::add(ad::matmul(pv[7], ad::sub(psi0, bp)), bp);
      Var fit = ad::weighted_sum(ad::square(ad::sub(pred, psi1)), w);
      Var loss = lsq ? fit : ad::add(fit, spectral_penalty_on_tape(pv[7], cfg.stability_weight, cfg.stability_margin));
      const double lv = loss.scalar();
      const auto ep = static_cast<std::size_t>(epoch);
      if (!std::isfinite(lv)) throw TrainingFailure(ep, "Koopman training diverged at epoch " + std::to_string(epoch));
      try {
        tape.backward(loss);
      } catch (const NumericFault&) {
        throw TrainingFailure(ep, "non-finite gradient at epoch " + std::to_string(epoch));
      }
      std::vector<Mat> grads;
      for (std::size_t k = 0; k < pv.size(); ++k)
        if (trained[k]) grads.push_back(pv[k].grad());
      ad::adamw_step(active, grads, opt);
      epoch_sum += fit.scalar() * static_cast<double>(bs);
    }
    rep.epoch_loss.push_back(epoch_sum / static_cast<double>(n_train));
    if (lsq) fit_operator(model, tx0, tu, tx1, cfg);
    const double val = held_out();
    rep.validation_history.push_back(val);
    if (std::isfinite(val) && val < best_val) {
      best_val = val;
      best = model;
      rep.best_epoch = epoch + 1;
    }
    if (cfg.verbose && (epoch % 10 == 0 || epoch + 1 == cfg.epochs))
      std::cerr << "  koopman epoch " << epoch << " loss " << rep.epoch_loss.back() << " held-out " << val
                << " rho " << spectral_radius(model.K) << '\n';
  }
  model = std::move(best);

  rep.train_pairs = n_train;
  rep.validation_pairs = static_cast<Index>(val_idx.size());
  rep.train_loss = relative_one_step_loss(model, tx0, tu, tx1, cfg.epsilon).mean();
  rep.validation_loss = val_idx.empty() ? rep.train_loss : relative_one_step_loss(model, vx0, vu, vx1, cfg.epsilon).mean();
  rep.stability_penalty = stability_penalty(model.K, cfg.stability_weight, cfg.stability_margin);
  rep.spectral_norm = spectral_norm(model.K);
  rep.spectral_radius = spectral_radius(model.K);
  if (!std::isfinite(rep.train_loss))
    throw TrainingFailure(static_cast<std::size_t>(cfg.epochs), "Koopman training produced a non-finite model");
  if (report) *report = std::move(rep);
  return model;
}

// ---------------------------------------------------------------------------
// checkpoint

using detail::json;

void save_model(const std::filesystem::path& path, const KoopmanModel& m) {
  json doc;
  doc["format"] = "dedpc-koopman";
  doc["version"] = kCheckpointVersion;
  doc["dims"] = {{"n_angles", m.dims.n_angles}, {"n_gen", m.dims.n_gen}, {"n_loads", m.dims.n_loads},
                 {"n_latent", m.dims.n_latent}, {"hidden", m.dims.hidden}};
  json feat = json::object();
  if (!m.features.empty()) {
    feat["coupling"] = detail::to_json(m.features.coupling);
    feat["slots"] = m.features.slots;
    feat["generator_slots"] = m.features.generator_slots;
    feat["slack"] = m.features.slack;
    feat["rates"] = m.features.rates;
  }
  doc["features"] = feat;
  doc["net"] = {{"shift", detail::vec_to_json(m.net.shift)}, {"scale", detail::vec_to_json(m.net.scale)},
                {"w1", detail::to_json(m.net.w1)}, {"b1", detail::to_json(m.net.b1)},
                {"w2", detail::to_json(m.net.w2)}, {"b2", detail::to_json(m.net.b2)},
                {"w3", detail::to_json(m.net.w3)}, {"b3", detail::to_json(m.net.b3)},
                {"skip", detail::to_json(m.net.skip)}};
  doc["K"] = detail::to_json(m.K);
  doc["B"] = detail::to_json(m.B);
  detail::write_json_file(path, doc);
}

KoopmanModel load_model(const std::filesystem::path& path) {
  const json doc = detail::read_json_file(path);
  try {
    if (doc.at("format").get<std::string>() != "dedpc-koopman")
      throw FormatError(path.string() + " is not a Koopman checkpoint");
    const int version = doc.at("version").get<int>();
    if (version != kCheckpointVersion)
      throw FormatError("Koopman checkpoint version " + std::to_string(version) + " is not supported (expected " +
                        std::to_string(kCheckpointVersion) + ")");
    KoopmanModel m;
    const auto& d = doc.at("dims");
    m.dims = {d.at("n_angles").get<Index>(), d.at("n_gen").get<Index>(), d.at("n_loads").get<Index>(),
              d.at("n_latent").get<Index>(), d.at("hidden").get<Index>()};
    const auto& f = doc.at("features");
    if (f.contains("slots")) {
      m.features.coupling = detail::mat_from_json(f.at("coupling"));
      m.features.slots = f.at("slots").get<std::vector<Index>>();
      m.features.generator_slots = f.at("generator_slots").get<std::vector<Index>>();
      m.features.slack = f.at("slack").get<Index>();
      m.features.rates = f.at("rates").get<bool>();
    }
    const auto& n = doc.at("net");
    m.net.shift = detail::vec_from_json(n.at("shift"));
    m.net.scale = detail::vec_from_json(n.at("scale"));
    m.net.w1 = detail::mat_from_json(n.at("w1"));
    m.net.b1 = detail::mat_from_json(n.at("b1"));
    m.net.w2 = detail::mat_from_json(n.at("w2"));
    m.net.b2 = detail::mat_from_json(n.at("b2"));
    m.net.w3 = detail::mat_from_json(n.at("w3"));
    m.net.b3 = detail::mat_from_json(n.at("b3"));
    m.net.skip = detail::mat_from_json(n.at("skip"));
    m.K = detail::mat_from_json(doc.at("K"));
    m.B = detail::mat_from_json(doc.at("B"));
    const Index np = m.dims.n_psi(), nf = m.n_features();
    if (m.K.rows() != np || m.K.cols() != np || m.B.rows() != np || m.B.cols() != m.dims.n_u() ||
        m.net.shift.size() != nf || m.net.scale.size() != nf || m.net.w1.cols() != nf ||
        m.net.w3.rows() != m.dims.n_latent || m.net.skip.rows() != m.dims.n_latent || m.net.skip.cols() != nf)
      throw FormatError(path.string() + ": matrix shapes do not match the recorded dimensions");
    return m;
  } catch (const detail::json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

}  // namespace dedpc::koopman
