#include "dedpc/dpc.hpp"

#include <algorithm>
#include <chrono>
#include <iostream>
#include <numeric>
#include <random>

#include "dedpc/errors.hpp"
#include "json_util.hpp"

namespace dedpc::dpc {

using ad::Tape;
using ad::Var;

InputLayout layout_for(const grid::Network& net, Index n_knots, Index n_steps) {
  if (n_knots < 2 || n_steps < n_knots) throw InvalidInput("policy horizon needs 2 <= n_knots <= n_steps");
  InputLayout l;
  l.n_loads = net.num_loads();
  l.n_gen = net.num_generators();
  l.n_cost = l.n_gen + 1;
  l.n_state = net.state_dim();
  l.n_knots = n_knots;
  l.n_steps = n_steps;
  return l;
}

Mat encode_input(const scenario::ProblemInstance& inst, const InputLayout& l) {
  if (static_cast<Index>(inst.loads.size()) != l.n_loads || inst.cost.size() != l.n_cost ||
      inst.x0.size() != l.n_state || inst.p_g0.size() != l.n_gen)
    throw InvalidInput("instance does not match the policy input layout");
  if (inst.horizon.n_steps != l.n_steps) throw InvalidInput("instance horizon does not match the policy layout");
  Mat out(l.channels(), l.n_knots);
  const Index stride = l.n_steps / l.n_knots;
  for (Index j = 0; j < l.n_knots; ++j) {
    out.col(j).head(l.n_loads) = inst.loads_at(static_cast<double>(j * stride) * inst.horizon.dt);
    out.col(j).segment(l.n_loads, l.n_cost) = inst.cost;
    out.col(j).segment(l.n_loads + l.n_cost, l.n_state) = inst.x0;
    out.col(j).tail(l.n_gen) = inst.p_g0;
  }
  return out;
}

PolicyParams init_policy(const InputLayout& layout, const Vec& p_min, const Vec& p_max, std::uint64_t seed,
                         Index hidden, std::vector<Index> widths) {
  if (widths.size() != 3) throw InvalidInput("policy needs three layer widths");
  std::mt19937_64 rng(seed);
  PolicyParams p;
  p.layout = layout;
  p.widths = std::move(widths);
  p.hidden = hidden;
  const Index cin = layout.channels();
  const Index w1 = p.widths[0], w2 = p.widths[1], w3 = p.widths[2];
  p.in_shift = Vec::Zero(cin);
  p.in_scale = Vec::Ones(cin);
  p.w1 = ad::uniform_init(hidden, cin * w1, cin * w1, rng);
  p.b1 = ad::uniform_init(hidden, 1, cin * w1, rng);
  p.w2 = ad::uniform_init(hidden, hidden * w2, hidden * w2, rng);
  p.b2 = ad::uniform_init(hidden, 1, hidden * w2, rng);
  p.w3 = ad::uniform_init(layout.n_gen, hidden * w3, hidden * w3, rng);
  p.b3 = ad::uniform_init(layout.n_gen, 1, hidden * w3, rng);
  p.p_min = p_min;
  p.p_max = p_max;
  return p;
}

void fit_standardization(PolicyParams& params, const std::vector<scenario::ProblemInstance>& instances) {
  if (instances.empty()) return;
  const Index c = params.layout.channels();
  Vec sum = Vec::Zero(c), sq = Vec::Zero(c);
  double count = 0.0;
  for (const auto& inst : instances) {
    const Mat e = encode_input(inst, params.layout);
    sum += e.rowwise().sum();
    sq += e.rowwise().squaredNorm();
    count += static_cast<double>(e.cols());
  }
  params.in_shift = sum / count;
  const Vec var = (sq / count - params.in_shift.cwiseProduct(params.in_shift)).cwiseMax(0.0);
  params.in_scale.resize(c);
  for (Index i = 0; i < c; ++i) params.in_scale(i) = var(i) > 1e-18 ? std::sqrt(var(i)) : 1.0;
}

namespace {

Mat standardize(const Mat& encoded, const PolicyParams& p) {
  return ((encoded.colwise() - p.in_shift).array().colwise() / p.in_scale.array()).matrix();
}

Mat conv_plain(const Mat& in, const Mat& w, const Mat& b, Index width) {
  const Index cin = in.rows(), len = in.cols(), left = ad::conv_left_pad(width);
  Mat col = Mat::Zero(cin * width, len);
  for (Index t = 0; t < len; ++t)
    for (Index m = 0; m < width; ++m) {
      const Index src = t + m - left;
      if (src < 0 || src >= len) continue;
      for (Index c = 0; c < cin; ++c) col(c * width + m, t) = in(c, src);
    }
  Mat out = w * col;
  out.colwise() += b.col(0);
  return out;
}

Mat bounds_lower(const PolicyParams& p, Index cols) { return p.p_min.replicate(1, cols); }
Mat bounds_span(const PolicyParams& p, Index cols) { return (p.p_max - p.p_min).replicate(1, cols); }

}  // namespace

Mat policy_preactivation(const Mat& encoded, const PolicyParams& p) {
  const Mat x = standardize(encoded, p);
  const Mat h1 = conv_plain(x, p.w1, p.b1, p.widths[0]).cwiseMax(0.0);
  const Mat h2 = conv_plain(h1, p.w2, p.b2, p.widths[1]).cwiseMax(0.0);
  return conv_plain(h2, p.w3, p.b3, p.widths[2]);
}

Schedule policy_forward_encoded(const Mat& encoded, const PolicyParams& p) {
  Schedule s;
  s.coarse = dedko::bounded_knots(policy_preactivation(encoded, p), p.p_min, p.p_max);
  s.fine = ad::linear_interpolate(s.coarse, p.layout.n_steps);
  return s;
}

Schedule policy_forward(const scenario::ProblemInstance& inst, const PolicyParams& p) {
  return policy_forward_encoded(encode_input(inst, p.layout), p);
}

Var policy_forward(const Var& encoded, const std::vector<Var>& w, const PolicyParams& p) {
  Tape& t = *encoded.tape();
  const Index seg = p.layout.n_knots;
  const Index cols = encoded.cols();
  const Mat shift = p.in_shift.replicate(1, cols);
  const Mat inv = p.in_scale.cwiseInverse().replicate(1, cols);
  Var x = ad::cwise_mul(ad::sub(encoded, t.constant(shift)), t.constant(inv));
  Var h1 = ad::relu(ad::conv1d(x, w[0], w[1], p.widths[0], seg));
  Var h2 = ad::relu(ad::conv1d(h1, w[2], w[3], p.widths[1], seg));
  Var z = ad::conv1d(h2, w[4], w[5], p.widths[2], seg);
  return dedko::bounded_knots(z, bounds_lower(p, cols), bounds_span(p, cols));
}

Var dpc_objective(const std::vector<const dedko::DedKoProblem*>& problems, const koopman::KoopmanResponse& response,
                  const Var& knots, const LossWeights& q, LossParts* parts) {
  const double inv_batch = 1.0 / static_cast<double>(problems.size());
  const dedko::BatchTerms terms = dedko::batch_terms(problems, response, knots);
  Var freq = ad::scale(ad::squared_norm(terms.freq_excess), q.q_omega);
  Var ramp = ad::scale(ad::squared_norm(terms.ramp_excess), q.q_ramp);
  Var init = ad::scale(ad::squared_norm(terms.initial_gap), q.q_initial);
  Var total = ad::scale(ad::add(ad::add(terms.cost, freq), ad::add(ramp, init)), inv_batch);
  if (parts) {
    parts->cost = terms.cost.scalar() * inv_batch;
    parts->frequency = freq.scalar() * inv_batch;
    parts->ramp = ramp.scalar() * inv_batch;
    parts->initial = init.scalar() * inv_batch;
    parts->total = total.scalar();
  }
  return total;
}

double dpc_loss(const std::vector<const dedko::DedKoProblem*>& problems, const std::vector<Mat>& encoded,
                const PolicyParams& params, const koopman::KoopmanResponse& response, const LossWeights& weights,
                std::vector<Mat>* grads, LossParts* parts) {
  if (problems.empty() || problems.size() != encoded.size()) throw InvalidInput("dpc_loss: batch mismatch");
  const Index nk = params.layout.n_knots;
  Mat stacked(params.layout.channels(), nk * static_cast<Index>(encoded.size()));
  for (std::size_t b = 0; b < encoded.size(); ++b) stacked.middleCols(static_cast<Index>(b) * nk, nk) = encoded[b];
  Tape tape;
  std::vector<Var> w;
  for (const Mat* m : params.tensors()) w.push_back(tape.leaf(*m, grads != nullptr));
  Var knots = policy_forward(tape.constant(std::move(stacked)), w, params);
  Var loss = dpc_objective(problems, response, knots, weights, parts);
  const double value = loss.scalar();
  if (!std::isfinite(value)) throw NumericFault("non-finite policy loss");
  if (grads) {
    tape.backward(loss);
    grads->clear();
    for (const Var& v : w) grads->push_back(v.grad());
  }
  return value;
}

PolicyParams train_policy(const std::vector<scenario::ProblemInstance>& train, const grid::Network& net,
                          const koopman::KoopmanModel& model, const koopman::KoopmanResponse& response,
                          const TrainConfig& cfg, TrainReport* report, double ramp_limit_fine) {
  if (train.empty()) throw InvalidInput("train_policy: empty training set");
  if (cfg.batch <= 0 || cfg.epochs < 0 || !(cfg.lr > 0.0)) throw InvalidInput("train_policy: bad configuration");
  const InputLayout layout = layout_for(net, response.n_knots(), response.n_steps());
  PolicyParams params = init_policy(layout, net.generator_min(), net.generator_max(), cfg.seed);
  fit_standardization(params, train);

  std::vector<dedko::DedKoProblem> problems;
  std::vector<Mat> encoded;
  problems.reserve(train.size());
  for (const auto& inst : train) {
    problems.push_back(dedko::make_problem(inst, net, model, response, ramp_limit_fine));
    encoded.push_back(encode_input(inst, layout));
  }

  std::mt19937_64 rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);
  ad::OptimizerState opt = ad::make_optimizer(params.tensors(), {cfg.lr, 0.9, 0.999, 1e-8, cfg.weight_decay});
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), std::size_t{0});

  TrainReport rep;
  PolicyParams best = params;
  double best_loss = std::numeric_limits<double>::infinity();
  int stale = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double sum = 0.0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch));
      std::vector<const dedko::DedKoProblem*> bp;
      std::vector<Mat> be;
      for (std::size_t i = start; i < end; ++i) {
        bp.push_back(&problems[order[i]]);
        be.push_back(encoded[order[i]]);
      }
      std::vector<Mat> grads;
      double loss = 0.0;
      try {
        loss = dpc_loss(bp, be, params, response, cfg.weights, &grads);
      } catch (const NumericFault& e) {
        throw TrainingFailure(static_cast<std::size_t>(epoch),
                              "policy training diverged at epoch " + std::to_string(epoch) + ": " + e.what());
      }
      ad::adamw_step(params.tensors(), grads, opt);
      sum += loss * static_cast<double>(end - start);
    }
    const double mean = sum / static_cast<double>(order.size());
    rep.epoch_loss.push_back(mean);
    if (mean < best_loss - cfg.min_improvement * std::abs(best_loss) || epoch == 0) {
      best_loss = mean;
      best = params;
      rep.best_epoch = epoch;
      stale = 0;
    } else if (++stale >= cfg.patience) {
      rep.early_stopped = true;
      if (cfg.verbose) std::cerr << "  dpc early stop at epoch " << epoch << '\n';
      break;
    }
    if (cfg.verbose && (epoch % 10 == 0 || epoch + 1 == cfg.epochs))
      std::cerr << "  dpc epoch " << epoch << " loss " << mean << '\n';
  }
  rep.best_loss = best_loss;
  if (report) *report = std::move(rep);
  return best;
}

Inference infer(const scenario::ProblemInstance& inst, const PolicyParams& params) {
  const auto t0 = std::chrono::steady_clock::now();
  Inference out;
  out.schedule = policy_forward(inst, params);
  out.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return out;
}

using detail::json;

void save_policy(const std::filesystem::path& path, const PolicyParams& p) {
  json doc;
  doc["format"] = "dedpc-policy";
  doc["version"] = kPolicyVersion;
  const auto& l = p.layout;
  doc["layout"] = {{"n_loads", l.n_loads}, {"n_cost", l.n_cost}, {"n_state", l.n_state},
                   {"n_gen", l.n_gen},     {"n_knots", l.n_knots}, {"n_steps", l.n_steps}};
  doc["widths"] = p.widths;
  doc["hidden"] = p.hidden;
  doc["in_shift"] = detail::vec_to_json(p.in_shift);
  doc["in_scale"] = detail::vec_to_json(p.in_scale);
  doc["p_min"] = detail::vec_to_json(p.p_min);
  doc["p_max"] = detail::vec_to_json(p.p_max);
  const char* names[] = {"w1", "b1", "w2", "b2", "w3", "b3"};
  const auto t = p.tensors();
  for (std::size_t i = 0; i < t.size(); ++i) doc[names[i]] = detail::to_json(*t[i]);
  detail::write_json_file(path, doc);
}

PolicyParams load_policy(const std::filesystem::path& path) {
  const json doc = detail::read_json_file(path);
  try {
    if (doc.at("format").get<std::string>() != "dedpc-policy")
      throw FormatError(path.string() + " is not a policy checkpoint");
    const int version = doc.at("version").get<int>();
    if (version != kPolicyVersion)
      throw FormatError("policy checkpoint version " + std::to_string(version) + " is not supported (expected " +
                        std::to_string(kPolicyVersion) + ")");
    PolicyParams p;
    const auto& l = doc.at("layout");
    p.layout = {l.at("n_loads").get<Index>(), l.at("n_cost").get<Index>(), l.at("n_state").get<Index>(),
                l.at("n_gen").get<Index>(),   l.at("n_knots").get<Index>(), l.at("n_steps").get<Index>()};
    p.widths = doc.at("widths").get<std::vector<Index>>();
    p.hidden = doc.at("hidden").get<Index>();
    p.in_shift = detail::vec_from_json(doc.at("in_shift"));
    p.in_scale = detail::vec_from_json(doc.at("in_scale"));
    p.p_min = detail::vec_from_json(doc.at("p_min"));
    p.p_max = detail::vec_from_json(doc.at("p_max"));
    const char* names[] = {"w1", "b1", "w2", "b2", "w3", "b3"};
    auto t = p.tensors();
    for (std::size_t i = 0; i < t.size(); ++i) *t[i] = detail::mat_from_json(doc.at(names[i]));
    const Index c = p.layout.channels();
    if (p.widths.size() != 3 || p.in_shift.size() != c || p.in_scale.size() != c ||
        p.w1.cols() != c * p.widths[0] || p.w2.cols() != p.hidden * p.widths[1] ||
        p.w3.rows() != p.layout.n_gen || p.w3.cols() != p.hidden * p.widths[2] || p.p_min.size() != p.layout.n_gen ||
        p.p_max.size() != p.layout.n_gen)
      throw FormatError(path.string() + ": tensor shapes do not match the recorded layout");
    return p;
  } catch (const json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

}  // namespace dedpc::dpc
