#include "dedpc/cli.hpp"

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <random>
#include <variant>

#include <CLI11.hpp>

#include "dedpc/errors.hpp"
#include "dedpc/swing.hpp"
#include "json_util.hpp"

namespace dedpc::cli {

namespace {

using Field = std::variant<std::string RunConfig::*, double RunConfig::*, int RunConfig::*, Index RunConfig::*,
                           std::uint64_t RunConfig::*, bool RunConfig::*>;

const std::vector<std::pair<std::string, Field>>& fields() {
  static const std::vector<std::pair<std::string, Field>> table = {
      {"paths.network", &RunConfig::network},
      {"paths.data_dir", &RunConfig::data_dir},
      {"paths.checkpoint_dir", &RunConfig::checkpoint_dir},
      {"paths.report_dir", &RunConfig::report_dir},
      {"regime", &RunConfig::regime},
      {"regime.omega_bound_hz", &RunConfig::omega_bound_hz},
      {"data.seed", &RunConfig::data_seed},
      {"data.n_total", &RunConfig::n_total},
      {"data.n_train", &RunConfig::n_train},
      {"horizon.dt", &RunConfig::dt},
      {"horizon.n_steps", &RunConfig::n_steps},
      {"ramp.limit", &RunConfig::ramp_limit},
      {"koopman.seed", &RunConfig::koopman_seed},
      {"koopman.trajectories", &RunConfig::koopman_trajectories},
      {"koopman.pairs", &RunConfig::koopman_pairs},
      {"koopman.dither", &RunConfig::koopman_dither},
      {"koopman.max_step", &RunConfig::koopman_max_step},
      {"koopman.latent", &RunConfig::koopman_latent},
      {"koopman.hidden", &RunConfig::koopman_hidden},
      {"koopman.epochs", &RunConfig::koopman_epochs},
      {"koopman.batch", &RunConfig::koopman_batch},
      {"koopman.lr", &RunConfig::koopman_lr},
      {"koopman.stability_weight", &RunConfig::koopman_stability_weight},
      {"koopman.stability_margin", &RunConfig::koopman_stability_margin},
      {"dpc.seed", &RunConfig::dpc_seed},
      {"dpc.n_knots", &RunConfig::n_knots},
      {"dpc.lr", &RunConfig::dpc_lr},
      {"dpc.weight_decay", &RunConfig::dpc_weight_decay},
      {"dpc.batch", &RunConfig::dpc_batch},
      {"dpc.epochs", &RunConfig::dpc_epochs},
      {"dpc.patience", &RunConfig::dpc_patience},
      {"dpc.q_omega", &RunConfig::q_omega},
      {"dpc.q_ramp", &RunConfig::q_ramp},
      {"dpc.q_initial", &RunConfig::q_initial},
      {"online.outer", &RunConfig::online_outer},
      {"online.inner", &RunConfig::online_inner},
      {"online.lr", &RunConfig::online_lr},
      {"online.tolerance", &RunConfig::online_tolerance},
      {"bench.limit", &RunConfig::bench_limit},
      {"verbose", &RunConfig::verbose},
  };
  return table;
}

template <class T>
T parse_number(const std::string& key, const std::string& text) {
  std::size_t used = 0;
  T v{};
  try {
    if constexpr (std::is_same_v<T, double>)
      v = std::stod(text, &used);
    else if constexpr (std::is_same_v<T, std::uint64_t>) {
      if (!text.empty() && text[0] == '-') throw std::invalid_argument("negative");
      v = std::stoull(text, &used);
    } else {
      const long long x = std::stoll(text, &used);
      if (x < std::numeric_limits<T>::min() || x > std::numeric_limits<T>::max()) throw std::out_of_range("range");
      v = static_cast<T>(x);
    }
  } catch (const std::exception&) {
    throw InvalidInput("config key " + key + ": cannot parse '" + text + "'");
  }
  if (used != text.size()) throw InvalidInput("config key " + key + ": cannot parse '" + text + "'");
  return v;
}

void require(bool ok, const std::string& what) {
  if (!ok) throw InvalidInput("invalid config: " + what);
}

void write_echo(const RunConfig& cfg, const std::filesystem::path& dir, const std::string& command) {
  std::filesystem::create_directories(dir);
  nlohmann::json doc = cfg.to_json();
  doc["command"] = command;
  detail::write_json_file(dir / ("config_" + command + ".json"), doc, 2);
}

void require_file(const std::filesystem::path& path, const std::string& hint) {
  if (!std::filesystem::exists(path)) throw MissingArtifact(path.string() + " not found; run " + hint + " first");
}

}  // namespace

void RunConfig::set(const std::string& key, const std::string& value) {
  for (const auto& [name, field] : fields()) {
    if (name != key) continue;
    std::visit(
        [&](auto member) {
          using T = std::remove_reference_t<decltype(this->*member)>;
          if constexpr (std::is_same_v<T, std::string>)
            this->*member = value;
          else if constexpr (std::is_same_v<T, bool>) {
            if (value == "true" || value == "1")
              this->*member = true;
            else if (value == "false" || value == "0")
              this->*member = false;
            else
              throw InvalidInput("config key " + key + ": expected true or false");
          } else
            this->*member = parse_number<T>(key, value);
        },
        field);
    return;
  }
  throw InvalidInput("unknown config key '" + key + "'");
}

void RunConfig::merge(const nlohmann::json& flat) {
  if (!flat.is_object()) throw InvalidInput("config file must hold a JSON object of flat keys");
  for (const auto& [key, value] : flat.items()) {
    if (key == "command") continue;
    if (value.is_string())
      set(key, value.get<std::string>());
    else if (value.is_number_integer() || value.is_number_unsigned() || value.is_boolean())
      set(key, value.dump());
    else if (value.is_number_float()) {
      char buf[40];
      std::snprintf(buf, sizeof buf, "%.17g", value.get<double>());
      set(key, buf);
    } else
      throw InvalidInput("config key " + key + " must be a string, number or boolean");
  }
}

void RunConfig::validate() const {
  (void)scenario::regime_from_label(regime);
  require(omega_bound_hz >= 0.0, "regime.omega_bound_hz must be >= 0");
  require(n_total > 0 && n_train > 0 && n_train <= n_total, "need 0 < data.n_train <= data.n_total");
  require(dt > 0.0, "horizon.dt must be positive");
  require(n_knots >= 2 && n_steps >= n_knots, "need 2 <= dpc.n_knots <= horizon.n_steps");
  require(ramp_limit > 0.0, "ramp.limit must be positive");
  require(koopman_trajectories > 1 && koopman_pairs > 0, "koopman.trajectories > 1 and koopman.pairs > 0");
  require(koopman_pairs <= n_steps, "koopman.pairs cannot exceed horizon.n_steps");
  require(koopman_dither >= 0.0 && koopman_max_step > 0.0, "koopman.dither >= 0, koopman.max_step > 0");
  require(koopman_latent >= 0 && koopman_hidden > 0 && koopman_batch > 0, "koopman sizes must be positive");
  require(koopman_epochs >= 0 && koopman_lr > 0.0, "koopman.epochs >= 0, koopman.lr > 0");
  require(koopman_stability_weight >= 0.0 && koopman_stability_margin >= 0.0 && koopman_stability_margin < 1.0,
          "koopman stability weight >= 0 and margin in [0, 1)");
  require(dpc_lr > 0.0 && dpc_weight_decay >= 0.0 && dpc_batch > 0 && dpc_epochs >= 0 && dpc_patience > 0,
          "dpc learning settings");
  require(q_omega >= 0.0 && q_ramp >= 0.0 && q_initial >= 0.0, "penalty weights must be >= 0");
  require(online_outer > 0 && online_inner > 0 && online_lr > 0.0 && online_tolerance > 0.0, "online settings");
  require(bench_limit >= 0, "bench.limit must be >= 0");
}

nlohmann::json RunConfig::to_json() const {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& [name, field] : fields())
    std::visit([&, name = name](auto member) { j[name] = this->*member; }, field);
  return j;
}

std::vector<std::string> RunConfig::keys() {
  std::vector<std::string> out;
  for (const auto& f : fields()) out.push_back(f.first);
  return out;
}

scenario::RegimeSpec RunConfig::regime_spec() const {
  scenario::RegimeSpec r = scenario::regime_from_label(regime);
  if (omega_bound_hz > 0.0) r.omega_bound_hz = omega_bound_hz;
  return r;
}

scenario::HorizonSpec RunConfig::horizon() const { return {dt, n_steps}; }

std::filesystem::path RunConfig::network_path() const {
  return network.empty() ? grid::default_network_path() : std::filesystem::path(network);
}
std::filesystem::path RunConfig::dataset_path() const { return std::filesystem::path(data_dir) / regime_spec().label; }
std::filesystem::path RunConfig::checkpoint_path() const {
  return std::filesystem::path(checkpoint_dir) / regime_spec().label;
}
std::filesystem::path RunConfig::report_path() const {
  return std::filesystem::path(report_dir) / regime_spec().label;
}
std::filesystem::path RunConfig::koopman_file() const { return checkpoint_path() / "koopman.json"; }
std::filesystem::path RunConfig::policy_file() const { return checkpoint_path() / "policy.json"; }

koopman::KoopmanTrainConfig RunConfig::koopman_config() const {
  koopman::KoopmanTrainConfig c;
  c.n_latent = koopman_latent;
  c.hidden = koopman_hidden;
  c.epochs = koopman_epochs;
  c.batch = koopman_batch;
  c.lr = koopman_lr;
  c.stability_weight = koopman_stability_weight;
  c.stability_margin = koopman_stability_margin;
  c.seed = koopman_seed;
  c.verbose = verbose;
  return c;
}

dpc::TrainConfig RunConfig::dpc_config() const {
  dpc::TrainConfig c;
  c.lr = dpc_lr;
  c.weight_decay = dpc_weight_decay;
  c.batch = dpc_batch;
  c.epochs = dpc_epochs;
  c.patience = dpc_patience;
  c.weights = {q_omega, q_ramp, q_initial};
  c.seed = dpc_seed;
  c.verbose = verbose;
  return c;
}

online::OnlineConfig RunConfig::online_config() const {
  online::OnlineConfig c;
  c.outer_iterations = online_outer;
  c.inner_iterations = online_inner;
  c.lr = online_lr;
  c.tolerance = online_tolerance;
  return c;
}

bench::BenchConfig RunConfig::bench_config() const {
  bench::BenchConfig c;
  c.ramp_limit = ramp_limit;
  c.online = online_config();
  c.limit = bench_limit;
  c.verbose = verbose;
  return c;
}

koopman::TransitionDataset identification_data(const grid::Network& net, const scenario::RegimeSpec& regime,
                                               const IdentificationConfig& cfg) {
  if (cfg.trajectories <= 0 || cfg.pairs <= 0 || cfg.pairs > cfg.horizon.n_steps)
    throw InvalidInput("identification: bad trajectory or pair count");
  std::mt19937_64 rng(cfg.seed);
  scenario::SamplerOptions opts;
  opts.horizon = cfg.horizon;
  const Index n = cfg.horizon.n_steps;
  const Index ng = net.num_generators(), nl = net.num_loads();
  koopman::TransitionDataset data;
  for (int t = 0; t < cfg.trajectories; ++t) {
    const auto inst = scenario::sample_instance(net, regime, rng(), opts);
    const Mat knots = scenario::random_input_knots(net, inst.p_g0, cfg.n_knots, cfg.max_step, rng);
    Mat pg = ad::linear_interpolate(knots, n);
    Mat pl = inst.load_forecast();
    if (t % 2 == 1 && cfg.dither > 0.0) {
      std::uniform_real_distribution<double> noise(-cfg.dither, cfg.dither);
      for (Index k = 0; k < n; ++k) {
        for (Index i = 0; i < nl; ++i) pl(i, k) += noise(rng);
        for (Index i = 0; i < ng; ++i) pg(i, k) += noise(rng);
      }
    }
    const auto traj = swing::simulate(net, pg, pl, inst.initial_state(net), cfg.horizon.dt,
                                      static_cast<std::size_t>(n));
    std::uniform_int_distribution<Index> pick(0, n - 1);
    Vec u(ng + nl);
    for (int i = 0; i < cfg.pairs; ++i) {
      const Index k = pick(rng);
      u << pg.col(k), pl.col(k);
      data.append(traj.state_vector(static_cast<std::size_t>(k)), u,
                  traj.state_vector(static_cast<std::size_t>(k + 1)), t);
    }
  }
  return data;
}

scenario::Dataset generate_data(const RunConfig& cfg, const grid::Network& net) {
  scenario::SamplerOptions opts;
  opts.horizon = cfg.horizon();
  return scenario::make_dataset(net, cfg.regime_spec(), cfg.n_total, cfg.n_train, cfg.data_seed, opts);
}

koopman::KoopmanModel fit_koopman(const RunConfig& cfg, const grid::Network& net,
                                  koopman::KoopmanTrainReport* report) {
  IdentificationConfig ic;
  ic.trajectories = cfg.koopman_trajectories;
  ic.pairs = cfg.koopman_pairs;
  ic.dither = cfg.koopman_dither;
  ic.max_step = cfg.koopman_max_step;
  ic.n_knots = cfg.n_knots;
  ic.horizon = cfg.horizon();
  ic.seed = cfg.koopman_seed;
  const auto data = identification_data(net, cfg.regime_spec(), ic);
  const koopman::KoopmanDims dims{net.num_angles(), net.num_generators(), net.num_loads(), cfg.koopman_latent,
                                  cfg.koopman_hidden};
  return koopman::train_koopman(data, dims, koopman::injection_features(net), cfg.koopman_config(), report);
}

dpc::PolicyParams train_dpc(const RunConfig& cfg, const grid::Network& net, const scenario::Dataset& data,
                            const koopman::KoopmanModel& model, dpc::TrainReport* report) {
  const koopman::KoopmanResponse response(model, cfg.n_steps, cfg.n_knots);
  return dpc::train_policy(data.train, net, model, response, cfg.dpc_config(), report, cfg.ramp_limit);
}

namespace {

struct Common {
  std::string config_file;
  std::vector<std::string> sets;
  std::string regime;
  bool quiet = false;
};

RunConfig resolve(const Common& c, const std::vector<std::pair<std::string, std::string>>& extra) {
  RunConfig cfg;
  std::string file = c.config_file;
  if (file.empty())
    if (const char* env = std::getenv("DEDPC_CONFIG"); env && *env) file = env;
  if (!file.empty()) {
    if (!std::filesystem::exists(file)) throw InvalidInput("config file " + file + " not found");
    nlohmann::json doc;
    try {
      doc = detail::read_json_file(file);
    } catch (const FormatError& e) {
      throw InvalidInput(e.what());
    }
    cfg.merge(doc);
  }
  for (const auto& s : c.sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw InvalidInput("--set expects key=value, got '" + s + "'");
    cfg.set(s.substr(0, eq), s.substr(eq + 1));
  }
  if (!c.regime.empty()) cfg.set("regime", c.regime);
  for (const auto& [k, v] : extra) cfg.set(k, v);
  if (c.quiet) cfg.verbose = false;
  cfg.validate();
  return cfg;
}

void log(const RunConfig& cfg, const std::string& msg) {
  if (cfg.verbose) std::cerr << msg << '\n';
}

const scenario::ProblemInstance& find_instance(const scenario::Dataset& data, int id) {
  for (const auto* set : {&data.test, &data.train})
    for (const auto& inst : *set)
      if (inst.id == id) return inst;
  throw InvalidInput("no instance with id " + std::to_string(id));
}

int run_gen_data(const RunConfig& cfg) {
  const auto net = grid::load_network(cfg.network_path());
  log(cfg, "generating " + std::to_string(cfg.n_total) + " " + cfg.regime_spec().label + " instances");
  const auto data = generate_data(cfg, net);
  scenario::save_dataset(cfg.dataset_path(), data);
  write_echo(cfg, cfg.dataset_path(), "gen-data");
  std::cout << "wrote " << data.train.size() << " train and " << data.test.size() << " test instances to "
            << cfg.dataset_path().string() << '\n';
  return 0;
}

int run_fit_koopman(const RunConfig& cfg) {
  const auto net = grid::load_network(cfg.network_path());
  log(cfg, "simulating " + std::to_string(cfg.koopman_trajectories) + " identification trajectories");
  koopman::KoopmanTrainReport rep;
  const auto model = fit_koopman(cfg, net, &rep);
  std::filesystem::create_directories(cfg.checkpoint_path());
  koopman::save_model(cfg.koopman_file(), model);
  write_echo(cfg, cfg.checkpoint_path(), "fit-koopman");
  std::cout << "koopman model: held-out loss " << rep.validation_loss << ", spectral radius "
            << rep.spectral_radius << ", best epoch " << rep.best_epoch << " -> " << cfg.koopman_file().string()
            << '\n';
  return 0;
}

int run_train_dpc(const RunConfig& cfg) {
  require_file(cfg.dataset_path() / "train.json", "gen-data");
  require_file(cfg.koopman_file(), "fit-koopman");
  const auto net = grid::load_network(cfg.network_path());
  const auto data = scenario::load_dataset(cfg.dataset_path());
  const auto model = koopman::load_model(cfg.koopman_file());
  dpc::TrainReport rep;
  const auto policy = train_dpc(cfg, net, data, model, &rep);
  dpc::save_policy(cfg.policy_file(), policy);
  write_echo(cfg, cfg.checkpoint_path(), "train-dpc");
  std::cout << "policy: best epoch " << rep.best_epoch << " loss " << rep.best_loss
            << (rep.early_stopped ? " (early stop)" : "") << " -> " << cfg.policy_file().string() << '\n';
  return 0;
}

int run_sim(const RunConfig& cfg, int id, const std::string& schedule, const std::string& out_path) {
  require_file(cfg.dataset_path() / "test.json", "gen-data");
  const auto net = grid::load_network(cfg.network_path());
  const auto data = scenario::load_dataset(cfg.dataset_path());
  const auto& inst = find_instance(data, id);
  Mat fine;
  if (schedule == "hold") {
    fine = inst.p_g0.replicate(1, inst.horizon.n_steps);
  } else if (schedule == "dpc") {
    require_file(cfg.policy_file(), "train-dpc");
    fine = dpc::infer(inst, dpc::load_policy(cfg.policy_file())).schedule.fine;
  } else if (schedule == "online") {
    require_file(cfg.koopman_file(), "fit-koopman");
    const auto model = koopman::load_model(cfg.koopman_file());
    const koopman::KoopmanResponse response(model, inst.horizon.n_steps, cfg.n_knots);
    fine = online::solve_ded_ko(inst, net, model, response, cfg.ramp_limit, cfg.online_config()).fine;
  } else {
    throw InvalidInput("--schedule must be hold, dpc or online");
  }
  const auto traj = swing::simulate(net, fine, inst.load_forecast(), inst.initial_state(net), inst.horizon.dt,
                                    static_cast<std::size_t>(inst.horizon.n_steps));
  std::filesystem::path out = out_path;
  if (out.empty()) out = cfg.report_path() / ("sim_" + std::to_string(id) + "_" + schedule + ".csv");
  if (out.has_parent_path()) std::filesystem::create_directories(out.parent_path());
  swing::write_trajectory_csv(out, net, traj);
  write_echo(cfg, cfg.report_path(), "sim");
  const auto m = swing::evaluate_schedule(traj, inst.cost, inst.regime.omega_bound_hz, cfg.ramp_limit);
  std::cout << "instance " << id << " (" << schedule << "): cost " << m.cost << ", max frequency violation "
            << m.max_freq_violation_hz << " Hz -> " << out.string() << '\n';
  return 0;
}

int run_solve_online(const RunConfig& cfg, int id) {
  require_file(cfg.dataset_path() / "test.json", "gen-data");
  require_file(cfg.koopman_file(), "fit-koopman");
  const auto net = grid::load_network(cfg.network_path());
  const auto data = scenario::load_dataset(cfg.dataset_path());
  const auto model = koopman::load_model(cfg.koopman_file());
  const koopman::KoopmanResponse response(model, cfg.n_steps, cfg.n_knots);
  std::vector<const scenario::ProblemInstance*> todo;
  if (id >= 0)
    todo.push_back(&find_instance(data, id));
  else
    for (const auto& inst : data.test) {
      if (cfg.bench_limit > 0 && static_cast<int>(todo.size()) >= cfg.bench_limit) break;
      todo.push_back(&inst);
    }
  std::filesystem::create_directories(cfg.report_path());
  const auto out = cfg.report_path() / "online.jsonl";
  std::ofstream file(out);
  if (!file) throw InvalidInput("cannot write " + out.string());
  for (const auto* inst : todo) {
    const auto rep = online::solve_ded_ko(*inst, net, model, response, cfg.ramp_limit, cfg.online_config());
    nlohmann::json j = online::to_json(rep);
    j["id"] = inst->id;
    file << j.dump() << '\n';
    log(cfg, "  instance " + std::to_string(inst->id) + ": objective " + std::to_string(rep.objective) +
                 (rep.converged ? "" : " (not converged)"));
  }
  write_echo(cfg, cfg.report_path(), "solve-online");
  std::cout << "solved " << todo.size() << " instances -> " << out.string() << '\n';
  return 0;
}

int run_benchmark_cmd(const RunConfig& cfg) {
  require_file(cfg.dataset_path() / "test.json", "gen-data");
  require_file(cfg.koopman_file(), "fit-koopman");
  require_file(cfg.policy_file(), "train-dpc");
  const auto net = grid::load_network(cfg.network_path());
  const auto data = scenario::load_dataset(cfg.dataset_path());
  const auto model = koopman::load_model(cfg.koopman_file());
  const auto policy = dpc::load_policy(cfg.policy_file());
  const koopman::KoopmanResponse response(model, cfg.n_steps, cfg.n_knots);
  auto rep = bench::run_benchmark(data.test, net, model, response, policy, cfg.regime_spec(), cfg.bench_config());
  rep.config = cfg.to_json();
  const auto paths = bench::emit_report(rep, cfg.report_path());
  write_echo(cfg, cfg.report_path(), "benchmark");
  std::cout << bench::summary_table(rep) << "\nreport: " << paths.json.string() << '\n';
  return 0;
}

}  // namespace

int dispatch_command(int argc, char** argv) {
  CLI::App app{"Dynamics-aware economic dispatch with a learned Koopman surrogate"};
  app.require_subcommand(1);
  Common common;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", common.config_file, "JSON file of flat config keys (default: $DEDPC_CONFIG)");
    sub->add_option("--set", common.sets, "override one config key, key=value (repeatable)");
    sub->add_option("--regime", common.regime, "NO or TO");
    sub->add_flag("--quiet", common.quiet, "suppress progress output");
  };

  int n_total = 0;
  std::string split;
  std::string seed;
  auto* gen = app.add_subcommand("gen-data", "sample problem instances and split them");
  add_common(gen);
  gen->add_option("--n", n_total, "number of instances");
  gen->add_option("--split", split, "train:test counts, e.g. 400:100");
  gen->add_option("--seed", seed, "dataset seed");

  int instance = -1;
  std::string schedule = "hold";
  std::string out;
  auto* sim = app.add_subcommand("sim", "simulate one instance and write its trajectory CSV");
  add_common(sim);
  sim->add_option("--instance", instance, "instance id")->required();
  sim->add_option("--schedule", schedule, "hold, dpc or online");
  sim->add_option("--out", out, "output CSV path");

  auto* fit = app.add_subcommand("fit-koopman", "identify the Koopman surrogate");
  add_common(fit);
  auto* train = app.add_subcommand("train-dpc", "train the dispatch policy");
  add_common(train);
  auto* solve = app.add_subcommand("solve-online", "solve test instances with the online baseline");
  add_common(solve);
  solve->add_option("--instance", instance, "single instance id (default: test set)");
  auto* benchmark = app.add_subcommand("benchmark", "evaluate policy and baseline on the test set");
  add_common(benchmark);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    std::vector<std::pair<std::string, std::string>> extra;
    if (*gen) {
      if (n_total > 0) extra.emplace_back("data.n_total", std::to_string(n_total));
      if (!split.empty()) {
        const auto colon = split.find(':');
        if (colon == std::string::npos) throw InvalidInput("--split expects train:test");
        const std::string a = split.substr(0, colon), b = split.substr(colon + 1);
        const int tr = parse_number<int>("--split", a), te = parse_number<int>("--split", b);
        if (tr <= 0 || te < 0) throw InvalidInput("--split counts must be positive");
        if (n_total > 0 && tr + te != n_total) throw InvalidInput("--split does not add up to --n");
        extra.emplace_back("data.n_total", std::to_string(tr + te));
        extra.emplace_back("data.n_train", std::to_string(tr));
      }
      if (!seed.empty()) extra.emplace_back("data.seed", seed);
    }
    const RunConfig cfg = resolve(common, extra);
    if (*gen) return run_gen_data(cfg);
    if (*sim) return run_sim(cfg, instance, schedule, out);
    if (*fit) return run_fit_koopman(cfg);
    if (*train) return run_train_dpc(cfg);
    if (*solve) return run_solve_online(cfg, instance);
    if (*benchmark) return run_benchmark_cmd(cfg);
  } catch (const MissingArtifact& e) {
    std::cerr << "error: missing artifact: " << e.what() << '\n';
    return 3;
  } catch (const InvalidInput& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 2;
}

}  // namespace dedpc::cli
