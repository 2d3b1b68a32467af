#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include <Eigen/Eigenvalues>

#include "doctest.h"
#include "dedpc/errors.hpp"
#include "dedpc/grid.hpp"
#include "dedpc/koopman.hpp"

using namespace dedpc;
using namespace dedpc::koopman;

namespace {

Mat random_mat(Index r, Index c, std::mt19937_64& rng, double s = 1.0) {
  std::normal_distribution<double> n(0.0, s);
  Mat m(r, c);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

Mat with_radius(Mat k, double rho) { return k * (rho / spectral_radius(k)); }

KoopmanModel nine_bus_model(std::uint64_t seed, Index latent = 6) {
  const grid::Network net = grid::load_network(grid::default_network_path());
  KoopmanDims d{net.num_angles(), net.num_generators(), net.num_loads(), latent, 8};
  std::mt19937_64 rng(seed);
  KoopmanModel m = make_model(d, injection_features(net), rng);
  m.K = with_radius(random_mat(d.n_psi(), d.n_psi(), rng), 0.95);
  m.B = random_mat(d.n_psi(), d.n_u(), rng);
  return m;
}

std::filesystem::path tmp_file(const char* name) { return std::filesystem::temp_directory_path() / name; }

}  // namespace

TEST_CASE("readouts are copied through") {
  KoopmanModel m = nine_bus_model(1);
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 20; ++trial) {
    const Vec x = random_mat(11, 1, rng, 0.3);
    const Vec psi = observe(x, m);
    REQUIRE(psi.size() == m.dims.n_psi());
    CHECK(m.readout_omega() * psi == x.segment(8, 2));
    CHECK(m.readout_slack().dot(psi) == x(10));
  }
  CHECK_THROWS_AS(observe(Vec::Zero(10), m), InvalidInput);
}

TEST_CASE("zero observable weights give a zero latent block") {
  KoopmanModel m = nine_bus_model(3);
  for (Mat* w : {&m.net.w1, &m.net.b1, &m.net.w2, &m.net.b2, &m.net.w3, &m.net.b3}) w->setZero();
  const Vec psi = observe(Vec::LinSpaced(11, -0.2, 0.4), m);
  CHECK(psi.tail(m.dims.n_latent).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("ko_step algebra") {
  KoopmanModel m = nine_bus_model(4);
  std::mt19937_64 rng(5);
  const Vec p = random_mat(5, 1, rng);
  const Vec bp = m.B * p;
  CHECK((ko_step(bp, p, m) - bp).cwiseAbs().maxCoeff() <= 1e-12);
  const Vec psi = random_mat(m.dims.n_psi(), 1, rng);
  const Mat keep = m.K;
  m.K.setZero();
  CHECK((ko_step(psi, p, m) - bp).cwiseAbs().maxCoeff() <= 1e-14);
  m.K.setIdentity();
  CHECK((ko_step(psi, p, m) - psi).cwiseAbs().maxCoeff() <= 1e-14);
  m.K = keep;
  CHECK((ko_step(psi, p, m) - (m.K * (psi - bp) + bp)).cwiseAbs().maxCoeff() <= 1e-12);
  CHECK_THROWS_AS(ko_step(psi, Vec::Zero(4), m), InvalidInput);
}

TEST_CASE("rollout is affine and decays to the fixed point") {
  const KoopmanModel m = nine_bus_model(6);
  std::mt19937_64 rng(7);
  const Index n = 40;
  const Vec p = random_mat(5, 1, rng);
  const Mat hold = p.replicate(1, n);
  const Vec bp = m.B * p;
  const Mat constant = rollout(bp, hold, m);
  CHECK(constant.cols() == n + 1);
  CHECK((constant.colwise() - bp).cwiseAbs().maxCoeff() <= 1e-11);

  const Mat inputs = random_mat(5, n, rng);
  const Vec psi0 = random_mat(m.dims.n_psi(), 1, rng);
  const Vec delta = random_mat(m.dims.n_psi(), 1, rng);
  const Mat a = rollout(psi0, inputs, m);
  const Mat b = rollout(psi0 + delta, inputs, m);
  Vec kd = delta;
  for (Index k = 0; k <= n; ++k) {
    CHECK((b.col(k) - a.col(k) - kd).cwiseAbs().maxCoeff() <= 1e-9);
    kd = m.K * kd;
  }
  // joint affinity in (psi0, inputs)
  const Mat in2 = random_mat(5, n, rng);
  const Vec psi2 = random_mat(m.dims.n_psi(), 1, rng);
  const Mat mix = rollout(0.3 * psi0 + 0.7 * psi2, 0.3 * inputs + 0.7 * in2, m);
  CHECK((mix - 0.3 * a - 0.7 * rollout(psi2, in2, m)).cwiseAbs().maxCoeff() <= 1e-9);

  // geometric approach to B P at the spectral radius
  const Mat longrun = rollout(psi0, p.replicate(1, 600), m);
  const double e300 = (longrun.col(300) - bp).norm();
  const double e600 = (longrun.col(600) - bp).norm();
  CHECK(e600 < e300);
  CHECK(std::pow(e600 / e300, 1.0 / 300.0) == doctest::Approx(0.95).epsilon(0.01));
}

TEST_CASE("spectral radius estimates agree") {
  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 5; ++trial) {
    const Mat k = with_radius(random_mat(12, 12, rng), 0.9 + 0.02 * trial);
    CHECK(spectral_radius(k) == doctest::Approx(0.9 + 0.02 * trial).epsilon(1e-10));
    CHECK(spectral_radius_power(k) == doctest::Approx(spectral_radius(k)).epsilon(1e-3));
    CHECK(spectral_norm(k) >= spectral_radius(k) - 1e-12);
  }
  CHECK(stability_penalty(Mat::Identity(3, 3) * 0.5, 10.0, 1e-3) == 0.0);
  CHECK(stability_penalty(Mat::Identity(3, 3) * 1.001, 10.0, 1e-3) == doctest::Approx(10.0 * 0.002 * 0.002));
}

TEST_CASE("tape rollout gradient matches finite differences") {
  const KoopmanModel m = nine_bus_model(9);
  std::mt19937_64 rng(10);
  const Index n = 12;
  const Vec psi0 = random_mat(m.dims.n_psi(), 1, rng);
  Mat u = random_mat(5, n, rng);
  const Mat w = random_mat(m.dims.n_psi(), n + 1, rng);
  auto f = [&](const Mat& inputs) { return (rollout(psi0, inputs, m).array() * w.array()).sum(); };
  ad::Tape t;
  const ad::Var in = t.leaf(u);
  const ad::Var out = ad::weighted_sum(rollout(psi0, in, m), w);
  CHECK(out.scalar() == doctest::Approx(f(u)).epsilon(1e-12));
  t.backward(out);
  double worst = 0.0;
  for (Index i = 0; i < u.size(); ++i) {
    const double x = u.data()[i];
    const double h = 1e-6 * std::max(1.0, std::abs(x));
    u.data()[i] = x + h;
    const double up = f(u);
    u.data()[i] = x - h;
    const double down = f(u);
    u.data()[i] = x;
    const double fd = (up - down) / (2 * h);
    worst = std::max(worst, std::abs(fd - in.grad().data()[i]) / std::max(1.0, std::abs(fd)));
  }
  CHECK(worst <= 1e-5);
}

TEST_CASE("knot response reproduces the interpolated rollout") {
  const KoopmanModel m = nine_bus_model(11);
  std::mt19937_64 rng(12);
  const Index n = 37, nk = 6;
  const KoopmanResponse resp(m, n, nk);
  CHECK(resp.gain().rows() == 3 * n);
  CHECK(resp.gain().cols() == 2 * nk);
  const Vec psi0 = random_mat(m.dims.n_psi(), 1, rng);
  const Mat loads = random_mat(3, n, rng);
  const Mat knots = random_mat(2, nk, rng);

  Mat inputs(5, n);
  inputs.topRows(2) = ad::linear_interpolate(knots, n);
  inputs.bottomRows(3) = loads;
  const Mat psi = rollout(psi0, inputs, m);
  Mat expect(3, n);
  expect.topRows(2) = m.readout_omega() * psi.leftCols(n);
  expect.row(2) = m.readout_slack().transpose() * psi.leftCols(n);

  const Mat free = resp.free_response(psi0, loads);
  const Mat got = resp.outputs(free, knots);
  CHECK((got - expect).cwiseAbs().maxCoeff() <= 1e-9);

  // split gains hold the same rows
  const Vec q = Eigen::Map<const Vec>(knots.data(), knots.size());
  const Vec om = resp.omega_gain() * q;
  const Vec sl = resp.slack_gain() * q;
  for (Index k = 0; k < n; ++k) {
    CHECK(std::abs(free(0, k) + om(2 * k) - expect(0, k)) <= 1e-9);
    CHECK(std::abs(free(1, k) + om(2 * k + 1) - expect(1, k)) <= 1e-9);
    CHECK(std::abs(free(2, k) + sl(k) - expect(2, k)) <= 1e-9);
  }

  // tape version, two instances side by side
  const Mat knots2 = random_mat(2, nk, rng);
  Mat both(2, 2 * nk);
  both << knots, knots2;
  Mat free2(3, 2 * n);
  free2 << free, free;
  ad::Tape t;
  const ad::Var kv = t.leaf(both);
  const ad::Var out = resp.outputs(free2, kv);
  CHECK((out.value().leftCols(n) - got).cwiseAbs().maxCoeff() <= 1e-12);
  CHECK((out.value().rightCols(n) - resp.outputs(free, knots2)).cwiseAbs().maxCoeff() <= 1e-12);
  const Mat w = random_mat(3, 2 * n, rng);
  t.backward(ad::weighted_sum(out, w));
  const Mat w1 = w.leftCols(n);
  const Vec g1 = resp.gain().transpose() * Eigen::Map<const Vec>(w1.data(), w1.size());
  CHECK((Eigen::Map<const Vec>(kv.grad().data(), 2 * nk) - g1).cwiseAbs().maxCoeff() <= 1e-10);

  CHECK_THROWS_AS(KoopmanResponse(m, 4, 5), InvalidInput);
}

TEST_CASE("relative one-step loss") {
  KoopmanModel m = nine_bus_model(13);
  std::mt19937_64 rng(14);
  const Mat x0 = random_mat(11, 6, rng, 0.1);
  const Mat u = random_mat(5, 6, rng);
  const Mat x1 = random_mat(11, 6, rng, 0.1);
  const Vec l = relative_one_step_loss(m, x0, u, x1, 1e-8);
  CHECK(l.minCoeff() >= 0.0);

  // a zero-motion pair under K = I, B = 0 is predicted exactly; eps keeps it finite
  m.K.setIdentity();
  m.B.setZero();
  const Vec same = relative_one_step_loss(m, x0, u, x0, 1e-8);
  CHECK(same.allFinite());
  CHECK(same.maxCoeff() == 0.0);
  m.K *= 0.5;
  const Vec off = relative_one_step_loss(m, x0.leftCols(1), u.leftCols(1), x0.leftCols(1), 1e-8);
  const Vec psi = observe(x0.col(0), m);
  CHECK(off(0) == doctest::Approx(0.25 * psi.squaredNorm() / 1e-8).epsilon(1e-9));
}

TEST_CASE("training recovers a known linear system") {
  // x' = A x + G u on a small synthetic state; the skip copy makes the lift exact
  KoopmanDims d{3, 1, 1, 5, 8};
  std::mt19937_64 rng(15);
  const Mat a = with_radius(random_mat(5, 5, rng), 0.9);
  const Mat g = random_mat(5, 2, rng, 0.5);
  TransitionDataset data;
  for (int traj = 0; traj < 40; ++traj) {
    Vec x = random_mat(5, 1, rng);
    for (int k = 0; k < 25; ++k) {
      const Vec u = random_mat(2, 1, rng);
      const Vec xn = a * x + g * u;
      data.append(x, u, xn, traj);
      x = xn;
    }
  }
  KoopmanTrainConfig cfg;
  cfg.epochs = 3;
  cfg.seed = 3;
  KoopmanTrainReport rep;
  const KoopmanModel m = train_koopman(data, d, {}, cfg, &rep);
  CHECK(rep.validation_pairs > 0);
  CHECK(rep.validation_loss <= 1e-3);
  CHECK(rep.spectral_radius < 1.0);

  // training is seed deterministic
  KoopmanTrainReport rep2;
  const KoopmanModel m2 = train_koopman(data, d, {}, cfg, &rep2);
  CHECK(m.K == m2.K);
  CHECK(m.B == m2.B);
  CHECK(rep.validation_loss == rep2.validation_loss);

  KoopmanTrainConfig bad = cfg;
  bad.lr = NAN;
  bad.least_squares_operator = false;
  CHECK_THROWS_AS(train_koopman(data, d, {}, bad), TrainingFailure);
}

TEST_CASE("checkpoint round trip and rejection") {
  const KoopmanModel m = nine_bus_model(16);
  const auto path = tmp_file("dedpc_koopman_test.json");
  save_model(path, m);
  const KoopmanModel back = load_model(path);
  CHECK(back.K == m.K);
  CHECK(back.B == m.B);
  CHECK(back.net.w1 == m.net.w1);
  CHECK(back.net.w3 == m.net.w3);
  CHECK(back.net.skip == m.net.skip);
  CHECK(back.net.shift == m.net.shift);
  CHECK(back.features.rates == m.features.rates);
  const Vec x = Vec::LinSpaced(11, -0.1, 0.2);
  CHECK(observe(x, back) == observe(x, m));

  std::string text;
  {
    std::ifstream in(path);
    text.assign(std::istreambuf_iterator<char>(in), {});
  }
  {
    std::ofstream out(path);
    out << text.substr(0, text.size() / 2);
  }
  CHECK_THROWS_AS(load_model(path), FormatError);
  {
    std::string bumped = text;
    const auto at = bumped.find("\"version\":");
    REQUIRE(at != std::string::npos);
    bumped.replace(at, 11, "\"version\":9");
    std::ofstream out(path);
    out << bumped;
  }
  CHECK_THROWS_WITH_AS(load_model(path), doctest::Contains("version"), FormatError);
  std::filesystem::remove(path);
  CHECK_THROWS(load_model(path));
}
