#include "qsdlab/experiment.hpp"

#include <omp.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <exception>
#include <fstream>
#include <map>
#include <numeric>
#include <ostream>
#include <set>
#include <sstream>

#include <fmt/format.h>

#include "qsdlab/errors.hpp"
#include "qsdlab/spectral.hpp"

namespace qsdlab {

using nlohmann::json;

std::string to_string(Mode m) {
  switch (m) {
    case Mode::simulate: return "simulate";
    case Mode::oracle: return "oracle";
    case Mode::harris: return "harris";
    case Mode::sweep: return "sweep";
  }
  return "unknown";
}

Mode parse_mode(const std::string& s) {
  if (s == "simulate") return Mode::simulate;
  if (s == "oracle") return Mode::oracle;
  if (s == "harris") return Mode::harris;
  if (s == "sweep") return Mode::sweep;
  throw InputError(fmt::format("unknown mode '{}' (expected simulate, oracle, harris or sweep)", s));
}

// ---------------------------------------------------------------------------
// Strict JSON reading

namespace {

void check_keys(const json& j, const std::set<std::string>& allowed, const std::string& where) {
  if (!j.is_object()) throw InputError(fmt::format("{} must be a JSON object", where));
  for (const auto& [k, v] : j.items())
    if (!allowed.count(k)) throw InputError(fmt::format("unknown key '{}' in {}", k, where));
}

double get_double(const json& j, const std::string& key, double def, const std::string& where) {
  if (!j.contains(key)) return def;
  const auto& v = j.at(key);
  if (!v.is_number()) throw InputError(fmt::format("{}.{} must be a number", where, key));
  const double x = v.get<double>();
  if (!std::isfinite(x)) throw InputError(fmt::format("{}.{} must be finite", where, key));
  return x;
}

std::uint64_t get_u64(const json& j, const std::string& key, std::uint64_t def, const std::string& where) {
  if (!j.contains(key)) return def;
  const auto& v = j.at(key);
  if (v.is_number_unsigned()) return v.get<std::uint64_t>();
  if (v.is_number_integer() && v.get<std::int64_t>() >= 0) return static_cast<std::uint64_t>(v.get<std::int64_t>());
  throw InputError(fmt::format("{}.{} must be a nonnegative integer", where, key));
}

std::size_t get_size(const json& j, const std::string& key, std::size_t def, const std::string& where) {
  return static_cast<std::size_t>(get_u64(j, key, def, where));
}

std::string get_string(const json& j, const std::string& key, const std::string& def, const std::string& where) {
  if (!j.contains(key)) return def;
  if (!j.at(key).is_string()) throw InputError(fmt::format("{}.{} must be a string", where, key));
  return j.at(key).get<std::string>();
}

std::vector<double> get_doubles(const json& j, const std::string& key, const std::string& where) {
  if (!j.contains(key)) return {};
  const auto& v = j.at(key);
  if (!v.is_array()) throw InputError(fmt::format("{}.{} must be an array of numbers", where, key));
  std::vector<double> out;
  for (const auto& x : v) {
    if (!x.is_number()) throw InputError(fmt::format("{}.{} must be an array of numbers", where, key));
    out.push_back(x.get<double>());
  }
  return out;
}

std::vector<std::uint64_t> get_u64s(const json& j, const std::string& key, const std::string& where) {
  if (!j.contains(key)) return {};
  const auto& v = j.at(key);
  if (!v.is_array()) throw InputError(fmt::format("{}.{} must be an array of integers", where, key));
  std::vector<std::uint64_t> out;
  for (const auto& x : v) {
    if (x.is_number_unsigned()) out.push_back(x.get<std::uint64_t>());
    else if (x.is_number_integer() && x.get<std::int64_t>() >= 0) out.push_back(static_cast<std::uint64_t>(x.get<std::int64_t>()));
    else throw InputError(fmt::format("{}.{} must be an array of nonnegative integers", where, key));
  }
  return out;
}

bool has_grid_oracle(const Preset& p) {
  if (const auto* td = std::get_if<presets::TorusDiffusion>(&p)) return td->dim == 1;
  return std::holds_alternative<presets::IntervalBrownian>(p) || std::holds_alternative<presets::HouseOfCard>(p);
}

bool is_finite(const Preset& p) {
  return std::holds_alternative<presets::TwoPoint>(p) || std::holds_alternative<presets::BirthDeath>(p);
}

std::size_t model_dim(const Preset& p) {
  if (const auto* td = std::get_if<presets::TorusDiffusion>(&p)) return td->dim;
  return 1;
}

const std::set<std::string> kMetrics = {"w1_qsd", "w1_qsd_gamma", "theta_hat", "tv_qsd"};

}  // namespace

Preset parse_preset(const json& model) {
  check_keys(model, {"name", "params"}, "model");
  if (!model.contains("name") || !model.at("name").is_string()) throw InputError("model.name must be a string");
  const auto name = model.at("name").get<std::string>();
  const json params = model.contains("params") ? model.at("params") : json::object();
  const std::string w = "model.params";
  Preset p;
  if (name == "two_point") {
    check_keys(params, {"a", "b"}, w);
    presets::TwoPoint v;
    v.a = get_double(params, "a", v.a, w);
    v.b = get_double(params, "b", v.b, w);
    p = v;
  } else if (name == "house_of_card") {
    check_keys(params, {"c", "q"}, w);
    presets::HouseOfCard v;
    v.c = get_double(params, "c", v.c, w);
    v.q = get_double(params, "q", v.q, w);
    p = v;
  } else if (name == "birth_death") {
    check_keys(params, {"b", "d", "b1", "d1", "truncation"}, w);
    presets::BirthDeath v;
    v.b = get_double(params, "b", v.b, w);
    v.d = get_double(params, "d", v.d, w);
    v.b1 = get_double(params, "b1", v.b1, w);
    v.d1 = get_double(params, "d1", v.d1, w);
    v.truncation = get_size(params, "truncation", v.truncation, w);
    p = v;
  } else if (name == "periodic_shift") {
    check_keys(params, {"kill_base", "kill_amp"}, w);
    presets::PeriodicShift v;
    v.kill_base = get_double(params, "kill_base", v.kill_base, w);
    v.kill_amp = get_double(params, "kill_amp", v.kill_amp, w);
    p = v;
  } else if (name == "growth_frag") {
    check_keys(params, {"alpha", "r", "jump_rate", "kill_rate"}, w);
    presets::GrowthFrag v;
    v.alpha = get_double(params, "alpha", v.alpha, w);
    v.r = get_double(params, "r", v.r, w);
    v.jump_rate = get_double(params, "jump_rate", v.jump_rate, w);
    v.kill_rate = get_double(params, "kill_rate", v.kill_rate, w);
    p = v;
  } else if (name == "torus_diffusion") {
    check_keys(params, {"dim", "drift_amp", "kill_base", "kill_amp"}, w);
    presets::TorusDiffusion v;
    v.dim = get_size(params, "dim", v.dim, w);
    v.drift_amp = get_double(params, "drift_amp", v.drift_amp, w);
    v.kill_base = get_double(params, "kill_base", v.kill_base, w);
    v.kill_amp = get_double(params, "kill_amp", v.kill_amp, w);
    p = v;
  } else if (name == "interval_brownian") {
    check_keys(params, {}, w);
    p = presets::IntervalBrownian{};
  } else {
    throw InputError(fmt::format("unknown preset '{}'", name));
  }
  validate_preset(p);
  return p;
}

json preset_to_json(const Preset& p) {
  json params = std::visit(
      [](const auto& v) -> json {
        using T = std::decay_t<decltype(v)>;
        if constexpr (std::is_same_v<T, presets::TwoPoint>) return {{"a", v.a}, {"b", v.b}};
        else if constexpr (std::is_same_v<T, presets::HouseOfCard>) return {{"c", v.c}, {"q", v.q}};
        else if constexpr (std::is_same_v<T, presets::BirthDeath>)
          return {{"b", v.b}, {"d", v.d}, {"b1", v.b1}, {"d1", v.d1}, {"truncation", v.truncation}};
        else if constexpr (std::is_same_v<T, presets::PeriodicShift>)
          return {{"kill_base", v.kill_base}, {"kill_amp", v.kill_amp}};
        else if constexpr (std::is_same_v<T, presets::GrowthFrag>)
          return {{"alpha", v.alpha}, {"r", v.r}, {"jump_rate", v.jump_rate}, {"kill_rate", v.kill_rate}};
        else if constexpr (std::is_same_v<T, presets::TorusDiffusion>)
          return {{"dim", v.dim}, {"drift_amp", v.drift_amp}, {"kill_base", v.kill_base}, {"kill_amp", v.kill_amp}};
        else return json::object();
      },
      p);
  return {{"name", preset_name(p)}, {"params", params}};
}

std::string model_hash(const Preset& p) {
  const std::string s = preset_to_json(p).dump();
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return fmt::format("{:016x}", h);
}

namespace {

InitSpec parse_init(const json& j) {
  check_keys(j, {"type", "point", "index", "weights"}, "fv.init");
  InitSpec s;
  const auto type = get_string(j, "type", "uniform", "fv.init");
  if (type == "uniform") {
    s.kind = InitSpec::Kind::uniform;
  } else if (type == "dirac") {
    s.kind = InitSpec::Kind::dirac;
    s.point = get_doubles(j, "point", "fv.init");
    if (s.point.empty()) throw InputError("fv.init.point is required for a dirac init");
  } else if (type == "state") {
    s.kind = InitSpec::Kind::state;
    if (!j.contains("index")) throw InputError("fv.init.index is required for a state init");
    s.index = get_size(j, "index", 0, "fv.init");
  } else if (type == "weights") {
    s.kind = InitSpec::Kind::weights;
    s.weights = get_doubles(j, "weights", "fv.init");
  } else {
    throw InputError(fmt::format("unknown fv.init.type '{}'", type));
  }
  return s;
}

json init_to_json(const InitSpec& s) {
  switch (s.kind) {
    case InitSpec::Kind::uniform: return {{"type", "uniform"}};
    case InitSpec::Kind::dirac: return {{"type", "dirac"}, {"point", s.point}};
    case InitSpec::Kind::state: return {{"type", "state"}, {"index", s.index}};
    case InitSpec::Kind::weights: return {{"type", "weights"}, {"weights", s.weights}};
  }
  return {};
}

std::size_t finite_size(const Preset& p) { return finite_chain(p)->n_states(); }

void validate_init(const InitSpec& s, const Preset& p) {
  if (is_finite(p)) {
    const auto n = finite_size(p);
    if (s.kind == InitSpec::Kind::dirac) throw InputError("finite chains take a 'state' or 'weights' init");
    if (s.kind == InitSpec::Kind::state && s.index >= n)
      throw InputError(fmt::format("fv.init.index {} out of range for {} states", s.index, n));
    if (s.kind == InitSpec::Kind::weights) {
      if (s.weights.size() != n) throw InputError("fv.init.weights must have one entry per state");
      double total = 0.0;
      for (double w : s.weights) {
        if (!(w >= 0.0)) throw InputError("fv.init.weights must be nonnegative");
        total += w;
      }
      if (!(total > 0.0)) throw InputError("fv.init.weights must have positive mass");
    }
    return;
  }
  if (s.kind == InitSpec::Kind::state || s.kind == InitSpec::Kind::weights)
    throw InputError("'state' and 'weights' inits apply to finite chains only");
  if (s.kind == InitSpec::Kind::dirac && s.point.size() != model_dim(p))
    throw InputError("fv.init.point dimension differs from the model's");
}

Eigen::VectorXd init_weights(const InitSpec& s, const Preset& p) {
  const auto n = static_cast<Eigen::Index>(finite_size(p));
  Eigen::VectorXd w = Eigen::VectorXd::Zero(n);
  switch (s.kind) {
    case InitSpec::Kind::state: w(static_cast<Eigen::Index>(s.index)) = 1.0; break;
    case InitSpec::Kind::weights:
      for (Eigen::Index i = 0; i < n; ++i) w(i) = s.weights[static_cast<std::size_t>(i)];
      break;
    default: w.setConstant(1.0);
  }
  return w / w.sum();
}

void validate_for_mode(const ExperimentConfig& c, Mode mode) {
  switch (mode) {
    case Mode::simulate: break;
    case Mode::oracle:
      if (!is_finite(c.preset) && !has_grid_oracle(c.preset))
        throw UnsupportedModelError(
            fmt::format("oracle mode needs a finite chain or a 1-d grid model, not {}", preset_name(c.preset)));
      if (c.oracle.n_grid < 16) throw InputError("oracle.n_grid must be at least 16");
      if (!(c.oracle.horizon > 0.0)) throw InputError("oracle.horizon must be positive");
      if (c.oracle.survival_steps < 1) throw InputError("oracle.survival_steps must be at least 1");
      break;
    case Mode::harris:
      if (!is_finite(c.preset))
        throw UnsupportedModelError(fmt::format("harris mode needs a finite chain, not {}", preset_name(c.preset)));
      if (c.harris.q1_grid.empty()) throw InputError("harris.q1_grid must be nonempty");
      if (c.harris.t0 && !(*c.harris.t0 > 0.0)) throw InputError("harris.t0 must be positive");
      if (c.harris.n_max < 1) throw InputError("harris.n_max must be at least 1");
      break;
    case Mode::sweep: {
      const auto& s = c.sweep;
      if (s.Ns.empty()) throw InputError("sweep.Ns must be nonempty");
      if (s.horizons.empty()) throw InputError("sweep.horizons must be nonempty");
      if (s.seeds.empty()) throw InputError("sweep needs seeds or n_seeds >= 1");
      for (auto n : s.Ns)
        if (n < 1) throw InputError("sweep.Ns entries must be >= 1");
      for (double t : s.horizons)
        if (!(t > 0.0)) throw InputError("sweep.horizons entries must be positive");
      if (!(s.burn_in_fraction >= 0.0 && s.burn_in_fraction < 1.0))
        throw InputError("sweep.burn_in_fraction must be in [0, 1)");
      if (!(s.snapshot_interval > 0.0)) throw InputError("sweep.snapshot_interval must be positive");
      if (s.experiment == "noncommutation") {
        const auto* tp = std::get_if<presets::TwoPoint>(&c.preset);
        if (!tp || !(tp->b > tp->a)) throw InputError("the noncommutation experiment needs two_point with b > a");
        break;
      }
      if (!s.experiment.empty()) throw InputError(fmt::format("unknown sweep.experiment '{}'", s.experiment));
      if (s.gammas.empty()) throw InputError("sweep.gammas must be nonempty");
      for (double g : s.gammas) {
        if (!(g > 0.0)) throw InputError("sweep.gammas entries must be positive");
        auto model = make_model(c.preset, g);
        FVConfig fv = c.fv;
        fv.gamma = g;
        fv.validate(*model);
        for (double t : s.horizons)
          if (t < g) throw InputError(fmt::format("horizon {} is shorter than one step of gamma {}", t, g));
      }
      if (c.metrics.empty()) throw InputError("metrics must be nonempty in sweep mode");
      for (const auto& m : c.metrics) {
        if ((m == "w1_qsd" || m == "w1_qsd_gamma") && !has_grid_oracle(c.preset))
          throw UnsupportedModelError(fmt::format("metric {} has no oracle for {}", m, preset_name(c.preset)));
        if (m == "tv_qsd" && !is_finite(c.preset))
          throw UnsupportedModelError("metric tv_qsd applies to finite chains only");
      }
      break;
    }
  }
}

}  // namespace

ExperimentConfig parse_config(const json& j, std::optional<Mode> mode) {
  check_keys(j, {"mode", "seed", "output_dir", "model", "fv", "sweep", "metrics", "oracle", "harris"}, "config");
  ExperimentConfig c;
  if (j.contains("mode")) {
    if (!j.at("mode").is_string()) throw InputError("config.mode must be a string");
    c.mode = parse_mode(j.at("mode").get<std::string>());
    if (mode && *mode != *c.mode)
      throw InputError(fmt::format("command-line mode {} differs from config mode {}", to_string(*mode),
                                   to_string(*c.mode)));
  } else {
    c.mode = mode;
  }
  c.seed = get_u64(j, "seed", 0, "config");
  if (j.contains("output_dir")) c.output_dir = get_string(j, "output_dir", "", "config");
  if (!j.contains("model")) throw InputError("config.model is required");
  c.preset = parse_preset(j.at("model"));
  c.model_json = preset_to_json(c.preset);
  c.model_hash = model_hash(c.preset);

  const json fv = j.contains("fv") ? j.at("fv") : json::object();
  check_keys(fv, {"N", "gamma", "n_steps", "max_resurrection_iters", "snapshot_stride", "init"}, "fv");
  c.fv.n_particles = get_size(fv, "N", c.fv.n_particles, "fv");
  c.fv.gamma = get_double(fv, "gamma", c.fv.gamma, "fv");
  c.fv.n_steps = get_size(fv, "n_steps", c.fv.n_steps, "fv");
  c.fv.max_resurrection_iters = get_size(fv, "max_resurrection_iters", c.fv.max_resurrection_iters, "fv");
  c.fv.snapshot_stride = get_size(fv, "snapshot_stride", c.fv.snapshot_stride, "fv");
  if (fv.contains("init")) c.init = parse_init(fv.at("init"));
  if (!(c.fv.gamma > 0.0)) throw InputError("fv.gamma must be positive");
  if (c.fv.n_steps < 1) throw InputError("fv.n_steps must be at least 1");
  {
    auto model = make_model(c.preset, c.fv.gamma);
    c.fv.validate(*model);
  }
  validate_init(c.init, c.preset);

  if (j.contains("sweep")) {
    const auto& s = j.at("sweep");
    check_keys(s, {"gammas", "Ns", "horizons", "seeds", "n_seeds", "burn_in_fraction", "snapshot_interval", "experiment"},
               "sweep");
    c.sweep.gammas = get_doubles(s, "gammas", "sweep");
    for (auto n : get_u64s(s, "Ns", "sweep")) c.sweep.Ns.push_back(static_cast<std::size_t>(n));
    if (s.contains("Ns") && s.at("Ns").is_array() && s.at("Ns").empty()) c.sweep.Ns.clear();
    c.sweep.horizons = get_doubles(s, "horizons", "sweep");
    if (s.contains("seeds") && s.contains("n_seeds")) throw InputError("give sweep.seeds or sweep.n_seeds, not both");
    c.sweep.seeds = get_u64s(s, "seeds", "sweep");
    if (s.contains("n_seeds")) {
      const auto k = get_u64(s, "n_seeds", 0, "sweep");
      for (std::uint64_t i = 0; i < k; ++i) c.sweep.seeds.push_back(i);
    }
    c.sweep.burn_in_fraction = get_double(s, "burn_in_fraction", c.sweep.burn_in_fraction, "sweep");
    c.sweep.snapshot_interval = get_double(s, "snapshot_interval", c.sweep.snapshot_interval, "sweep");
    c.sweep.experiment = get_string(s, "experiment", "", "sweep");
  }
  if (j.contains("metrics")) {
    const auto& m = j.at("metrics");
    if (!m.is_array()) throw InputError("metrics must be an array of names");
    for (const auto& x : m) {
      if (!x.is_string() || !kMetrics.count(x.get<std::string>()))
        throw InputError(fmt::format("unknown metric {} (expected w1_qsd, w1_qsd_gamma, theta_hat, tv_qsd)", x.dump()));
      c.metrics.push_back(x.get<std::string>());
    }
  }
  if (j.contains("oracle")) {
    const auto& o = j.at("oracle");
    check_keys(o, {"n_grid", "horizon", "survival_steps"}, "oracle");
    c.oracle.n_grid = get_size(o, "n_grid", c.oracle.n_grid, "oracle");
    c.oracle.horizon = get_double(o, "horizon", c.oracle.horizon, "oracle");
    c.oracle.survival_steps = get_size(o, "survival_steps", c.oracle.survival_steps, "oracle");
  }
  if (j.contains("harris")) {
    const auto& h = j.at("harris");
    check_keys(h, {"family", "q1_grid", "q2_grid", "t0", "k_policy", "n_max"}, "harris");
    const auto fam = get_string(h, "family", "geometric", "harris");
    if (fam == "geometric") c.harris.family = LyapunovFamily::geometric;
    else if (fam == "exponential") c.harris.family = LyapunovFamily::exponential;
    else throw InputError(fmt::format("unknown harris.family '{}'", fam));
    if (h.contains("q1_grid")) c.harris.q1_grid = get_doubles(h, "q1_grid", "harris");
    if (h.contains("q2_grid")) {
      c.harris.q2_grid = get_doubles(h, "q2_grid", "harris");
      if (c.harris.q2_grid.empty()) throw InputError("harris.q2_grid must be nonempty when given");
    }
    if (h.contains("t0")) c.harris.t0 = get_double(h, "t0", 1.0, "harris");
    const auto pol = get_string(h, "k_policy", "proper_sublevel_sets", "harris");
    if (pol == "proper_sublevel_sets") c.harris.k_policy = KPolicy::proper_sublevel_sets;
    else if (pol == "all_sublevel_sets") c.harris.k_policy = KPolicy::all_sublevel_sets;
    else throw InputError(fmt::format("unknown harris.k_policy '{}'", pol));
    c.harris.n_max = get_size(h, "n_max", c.harris.n_max, "harris");
  }
  if (c.mode) validate_for_mode(c, *c.mode);
  return c;
}

json config_to_json(const ExperimentConfig& c) {
  json j;
  if (c.mode) j["mode"] = to_string(*c.mode);
  j["seed"] = c.seed;
  if (c.output_dir) j["output_dir"] = *c.output_dir;
  j["model"] = c.model_json;
  j["fv"] = {{"N", c.fv.n_particles},
             {"gamma", c.fv.gamma},
             {"n_steps", c.fv.n_steps},
             {"max_resurrection_iters", c.fv.max_resurrection_iters},
             {"snapshot_stride", c.fv.snapshot_stride},
             {"init", init_to_json(c.init)}};
  j["sweep"] = {{"gammas", c.sweep.gammas},
                {"Ns", c.sweep.Ns},
                {"horizons", c.sweep.horizons},
                {"seeds", c.sweep.seeds},
                {"burn_in_fraction", c.sweep.burn_in_fraction},
                {"snapshot_interval", c.sweep.snapshot_interval}};
  if (!c.sweep.experiment.empty()) j["sweep"]["experiment"] = c.sweep.experiment;
  j["metrics"] = c.metrics;
  j["oracle"] = {{"n_grid", c.oracle.n_grid}, {"horizon", c.oracle.horizon}, {"survival_steps", c.oracle.survival_steps}};
  json h = {{"family", c.harris.family == LyapunovFamily::geometric ? "geometric" : "exponential"},
            {"q1_grid", c.harris.q1_grid},
            {"k_policy", c.harris.k_policy == KPolicy::proper_sublevel_sets ? "proper_sublevel_sets" : "all_sublevel_sets"},
            {"n_max", c.harris.n_max}};
  if (!c.harris.q2_grid.empty()) h["q2_grid"] = c.harris.q2_grid;
  if (c.harris.t0) h["t0"] = *c.harris.t0;
  j["harris"] = h;
  return j;
}

std::unique_ptr<SampleableMeasure> make_init(const InitSpec& init, const Preset& p) {
  validate_init(init, p);
  if (is_finite(p)) {
    const auto w = init_weights(init, p);
    return std::make_unique<FiniteStateMeasure>(std::vector<double>(w.data(), w.data() + w.size()));
  }
  if (init.kind == InitSpec::Kind::dirac) return std::make_unique<DiracMeasure>(init.point);
  return std::make_unique<UniformCubeMeasure>(model_dim(p));
}

// ---------------------------------------------------------------------------
// Oracles

MeasureOracle continuous_qsd_oracle(const Preset& p, std::size_t n_grid) {
  const Geometry g = std::holds_alternative<presets::TorusDiffusion>(p) ? Geometry::torus : Geometry::interval;
  if (auto an = analytic_qsd(p); an && !is_finite(p) && !an->qsds.empty()) {
    const auto& q = an->qsds.front();
    return {discretize(q, n_grid, g), q.theta, fmt::format("closed form ({})", an->regime)};
  }
  if (!has_grid_oracle(p)) throw UnsupportedModelError(fmt::format("no continuous QSD oracle for {}", preset_name(p)));
  const auto chain = grid_generator(p, n_grid);
  const auto trip = perron_triplet_generator(chain);
  std::vector<double> w(trip.gamma_left.data(), trip.gamma_left.data() + trip.gamma_left.size());
  const double total = std::accumulate(w.begin(), w.end(), 0.0);
  for (double& x : w) x /= total;
  return {EmpiricalMeasure::weighted(g, 1, chain.coordinates, std::move(w)), trip.theta,
          fmt::format("grid generator Perron vector, n_grid={}", n_grid)};
}

MeasureOracle discrete_qsd_oracle(const Preset& p, double gamma, std::size_t n_grid) {
  const Geometry g = std::holds_alternative<presets::TorusDiffusion>(p) ? Geometry::torus : Geometry::interval;
  const auto k = grid_step_kernel(p, gamma, n_grid);
  PowerIterationOptions opts;
  opts.max_iterations = 1'000'000;
  const auto trip = perron_triplet(k, opts);
  std::vector<double> w(trip.gamma_left.data(), trip.gamma_left.data() + trip.gamma_left.size());
  const double total = std::accumulate(w.begin(), w.end(), 0.0);
  for (double& x : w) x /= total;
  return {EmpiricalMeasure::weighted(g, 1, midpoint_grid(n_grid), std::move(w)), trip.theta,
          fmt::format("step kernel Perron vector, gamma={}, n_grid={}", gamma, n_grid)};
}

Eigen::VectorXd finite_qsd_oracle(const Preset& p, double horizon, const Eigen::VectorXd& eta0) {
  const auto chain = finite_chain(p);
  if (!chain) throw UnsupportedModelError(fmt::format("{} is not a finite chain", preset_name(p)));
  const auto m = killed_semigroup(*chain, horizon);
  const auto qsds = class_qsds(m);
  const auto c = attracting_class(m, qsds, eta0);
  if (!c) throw ExtinctionUnderflowError("no unique QSD attracts the initial law");
  return *qsds[*c].qsd;
}

// ---------------------------------------------------------------------------
// Sweeps

namespace {

template <class F>
void parallel_points(std::size_t n, int jobs, F&& body) {
  std::vector<std::exception_ptr> errors(n);
#pragma omp parallel for num_threads(std::max(jobs, 1)) schedule(dynamic)
  for (std::size_t i = 0; i < n; ++i) {
    try {
      body(i);
    } catch (...) {
      errors[i] = std::current_exception();
    }
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

std::uint64_t replica_seed(std::uint64_t seed, std::uint64_t replica) {
  return Stream::derive(seed, 0x5357454550ULL, replica).next_u64();
}

struct Summary {
  double mean = 0.0;
  double se = 0.0;
  std::size_t n = 0;
};

Summary summarize(const std::vector<double>& v) {
  Summary s;
  s.n = v.size();
  if (v.empty()) return s;
  const double n = static_cast<double>(v.size());
  s.mean = std::accumulate(v.begin(), v.end(), 0.0) / n;
  if (v.size() > 1) {
    double var = 0.0;
    for (double x : v) var += (x - s.mean) * (x - s.mean);
    s.se = std::sqrt(var / (n - 1.0) / n);
  }
  return s;
}

double alpha_slope_reference(std::size_t d, const std::vector<std::size_t>& Ns) {
  if (d == 1) return -0.5;
  if (d >= 3) return -1.0 / static_cast<double>(d);
  std::vector<double> xs, ys;
  for (auto n : Ns) {
    xs.push_back(static_cast<double>(n));
    ys.push_back(std::log(1.0 + static_cast<double>(n)) / std::sqrt(static_cast<double>(n)));
  }
  if (xs.size() < 3) return -0.5;
  return fit_power_law(xs, ys).slope;
}

}  // namespace

SweepResult run_sweep(const ExperimentConfig& cfg, int jobs) {
  validate_for_mode(cfg, Mode::sweep);
  if (!cfg.sweep.experiment.empty()) throw InputError("run_sweep does not run named experiments");
  const auto& sw = cfg.sweep;
  const auto& metrics = cfg.metrics;
  auto wants = [&](const char* m) { return std::find(metrics.begin(), metrics.end(), m) != metrics.end(); };

  std::optional<MeasureOracle> cont;
  if (wants("w1_qsd")) cont = continuous_qsd_oracle(cfg.preset, cfg.oracle.n_grid);
  std::vector<std::optional<MeasureOracle>> disc(sw.gammas.size());
  if (wants("w1_qsd_gamma"))
    for (std::size_t g = 0; g < sw.gammas.size(); ++g)
      disc[g] = discrete_qsd_oracle(cfg.preset, sw.gammas[g], cfg.oracle.n_grid);
  std::optional<Eigen::VectorXd> finite_qsd;
  if (wants("tv_qsd")) finite_qsd = finite_qsd_oracle(cfg.preset, cfg.oracle.horizon, init_weights(cfg.init, cfg.preset));

  const double t_max = *std::max_element(sw.horizons.begin(), sw.horizons.end());
  const std::size_t nG = sw.gammas.size(), nN = sw.Ns.size(), nS = sw.seeds.size(), nT = sw.horizons.size(),
                    nM = metrics.size();
  const std::size_t n_points = nG * nN * nS;
  // rows[point][t * nM + metric]
  std::vector<std::vector<SweepRow>> rows(n_points);
  const auto init = make_init(cfg.init, cfg.preset);

  parallel_points(n_points, jobs, [&](std::size_t pi) {
    const std::size_t gi = pi / (nN * nS), ni = (pi / nS) % nN, si = pi % nS;
    const double gamma = sw.gammas[gi];
    auto model = make_model(cfg.preset, gamma);
    FVConfig fv = cfg.fv;
    fv.gamma = gamma;
    fv.n_particles = sw.Ns[ni];
    fv.seed = replica_seed(cfg.seed, sw.seeds[si]);
    fv.n_steps = static_cast<std::size_t>(std::llround(t_max / gamma));
    fv.snapshot_stride = static_cast<std::size_t>(std::max<long long>(1, std::llround(sw.snapshot_interval / gamma)));
    const auto report = run_fv(*model, fv, *init);

    auto& out = rows[pi];
    out.resize(nT * nM);
    for (std::size_t ti = 0; ti < nT; ++ti) {
      const double t = sw.horizons[ti];
      const auto step_t = static_cast<std::size_t>(std::llround(t / gamma));
      const auto first = static_cast<std::size_t>(std::ceil(sw.burn_in_fraction * static_cast<double>(step_t)));
      std::vector<const Snapshot*> window;
      for (const auto& s : report.snapshots)
        if (s.step >= first && s.step <= step_t) window.push_back(&s);
      if (window.empty())
        for (const auto& s : report.snapshots)
          if (s.step <= step_t) window = {&s};

      for (std::size_t mi = 0; mi < nM; ++mi) {
        const auto& name = metrics[mi];
        SweepRow row{name, 0.0, 0.0, 0, fv.seed, gamma, fv.n_particles, t};
        if (name == "theta_hat") {
          FVReport sub = report;
          sub.deaths_per_step.assign(report.deaths_per_step.begin(),
                                     report.deaths_per_step.begin() + static_cast<std::ptrdiff_t>(step_t));
          const auto burn = static_cast<std::size_t>(std::floor(sw.burn_in_fraction * static_cast<double>(step_t)));
          const auto est = estimate_theta(sub, std::min(burn, step_t - 1));
          row.value = est.value;
          row.std_error = est.std_error;
          row.n = step_t - std::min(burn, step_t - 1);
        } else {
          std::vector<double> vals;
          for (const auto* s : window) {
            if (name == "tv_qsd") {
              Eigen::VectorXd h = Eigen::VectorXd::Zero(finite_qsd->size());
              for (double x : s->states) h(static_cast<Eigen::Index>(x)) += 1.0;
              vals.push_back(tv_finite(h / static_cast<double>(s->states.size()), *finite_qsd));
            } else {
              const auto emp = from_snapshot(report, *s);
              vals.push_back(w1(emp, name == "w1_qsd" ? cont->measure : disc[gi]->measure));
            }
          }
          const auto sm = summarize(vals);
          row.value = sm.mean;
          row.std_error = sm.se;
          row.n = sm.n;
        }
        out[ti * nM + mi] = std::move(row);
      }
    }
  });

  SweepResult res;
  for (std::size_t gi = 0; gi < nG; ++gi)
    for (std::size_t ni = 0; ni < nN; ++ni)
      for (std::size_t ti = 0; ti < nT; ++ti)
        for (std::size_t si = 0; si < nS; ++si)
          for (std::size_t mi = 0; mi < nM; ++mi)
            res.rows.push_back(rows[(gi * nN + ni) * nS + si][ti * nM + mi]);

  // Seed-averaged values and fitted slopes.
  auto mean_over_seeds = [&](std::size_t gi, std::size_t ni, std::size_t ti, std::size_t mi) {
    double s = 0.0;
    for (std::size_t si = 0; si < nS; ++si) s += rows[(gi * nN + ni) * nS + si][ti * nM + mi].value;
    return s / static_cast<double>(nS);
  };
  json fits = json::array();
  for (std::size_t mi = 0; mi < nM; ++mi) {
    for (std::size_t ti = 0; ti < nT; ++ti) {
      if (nN >= 3)
        for (std::size_t gi = 0; gi < nG; ++gi) {
          std::vector<double> xs, ys;
          json pts = json::array();
          for (std::size_t ni = 0; ni < nN; ++ni) {
            xs.push_back(static_cast<double>(sw.Ns[ni]));
            ys.push_back(mean_over_seeds(gi, ni, ti, mi));
            pts.push_back({xs.back(), ys.back()});
          }
          json f = {{"metric", metrics[mi]}, {"against", "N"}, {"gamma", sw.gammas[gi]}, {"t", sw.horizons[ti]},
                    {"points", pts}};
          if (std::all_of(ys.begin(), ys.end(), [](double y) { return y > 0.0; }) &&
              std::adjacent_find(xs.begin(), xs.end()) == xs.end()) {
            const auto r = fit_power_law(xs, ys);
            f["slope"] = r.slope;
            f["intercept"] = r.intercept;
            f["r2"] = r.r2;
          }
          fits.push_back(f);
        }
      if (nG >= 3)
        for (std::size_t ni = 0; ni < nN; ++ni) {
          std::vector<double> xs, ys;
          json pts = json::array();
          for (std::size_t gi = 0; gi < nG; ++gi) {
            xs.push_back(sw.gammas[gi]);
            ys.push_back(mean_over_seeds(gi, ni, ti, mi));
            pts.push_back({xs.back(), ys.back()});
          }
          json f = {{"metric", metrics[mi]}, {"against", "gamma"}, {"N", sw.Ns[ni]}, {"t", sw.horizons[ti]},
                    {"points", pts}};
          if (std::all_of(ys.begin(), ys.end(), [](double y) { return y > 0.0; })) {
            const auto r = fit_power_law(xs, ys);
            f["slope"] = r.slope;
            f["intercept"] = r.intercept;
            f["r2"] = r.r2;
          }
          fits.push_back(f);
        }
    }
  }
  const auto d = model_dim(cfg.preset);
  res.summary = {{"schema", "qsdlab.sweep_summary.v1"},
                 {"model", cfg.model_json},
                 {"model_hash", cfg.model_hash},
                 {"reference",
                  {{"alpha_N_law", d == 1 ? "N^-1/2" : d == 2 ? "N^-1/2 ln(1+N)" : fmt::format("N^-1/{}", d)},
                   {"alpha_N_slope", alpha_slope_reference(d, sw.Ns)},
                   {"gamma_slope", 0.5}}},
                 {"fits", fits}};
  if (cont) res.summary["oracle"] = {{"theta", cont->theta}, {"source", cont->source}};
  return res;
}

std::string sweep_csv(const SweepResult& r, const std::string& hash) {
  std::string s = "# qsdlab.sweep.v1\nmetric,value,stderr,n,seed,gamma,N,t,model_hash\n";
  for (const auto& row : r.rows)
    s += fmt::format("{},{},{},{},{},{},{},{},{}\n", row.metric, row.value, row.std_error, row.n, row.seed, row.gamma,
                     row.N, row.t, hash);
  return s;
}

NoncommutationTable run_noncommutation(const ExperimentConfig& cfg, int jobs) {
  validate_for_mode(cfg, Mode::sweep);
  const auto& tp = std::get<presets::TwoPoint>(cfg.preset);
  const auto& sw = cfg.sweep;
  const double gamma = cfg.fv.gamma;
  NoncommutationTable tab;
  tab.Ns = sw.Ns;
  tab.ts = sw.horizons;
  tab.qsd_mass = (tp.b - tp.a) / tp.b;
  const auto chain = *finite_chain(cfg.preset);
  const Eigen::VectorXd start = Eigen::Vector2d(0.0, 1.0);
  for (double t : tab.ts) {
    const auto eta = propagate(chain, start, t);
    tab.conditional_law.push_back(eta(1) / eta.sum());
  }

  const std::size_t nN = sw.Ns.size(), nS = sw.seeds.size(), nT = sw.horizons.size();
  std::vector<std::vector<double>> mass(nN * nS, std::vector<double>(nT, 0.0));
  std::vector<std::size_t> steps(nT);
  for (std::size_t ti = 0; ti < nT; ++ti) steps[ti] = static_cast<std::size_t>(std::llround(sw.horizons[ti] / gamma));
  const std::size_t last = *std::max_element(steps.begin(), steps.end());

  parallel_points(nN * nS, jobs, [&](std::size_t pi) {
    const std::size_t ni = pi / nS, si = pi % nS;
    auto model = make_model(cfg.preset, gamma);
    const DiracMeasure init({1.0});
    auto ens = initial_ensemble(*model, sw.Ns[ni], init, replica_seed(cfg.seed, sw.seeds[si]));
    auto record = [&](const ParticleEnsemble& e) {
      for (std::size_t ti = 0; ti < nT; ++ti)
        if (steps[ti] == e.step_index) {
          const auto& s = e.states();
          mass[pi][ti] = static_cast<double>(std::count(s.begin(), s.end(), 1.0)) / static_cast<double>(s.size());
        }
    };
    record(ens);
    for (std::size_t k = 0; k < last; ++k) {
      ens = fv_step(*model, ens, cfg.fv.max_resurrection_iters);
      record(ens);
    }
  });

  tab.mass.assign(nN, std::vector<double>(nT));
  tab.std_error.assign(nN, std::vector<double>(nT));
  for (std::size_t ni = 0; ni < nN; ++ni)
    for (std::size_t ti = 0; ti < nT; ++ti) {
      std::vector<double> v;
      for (std::size_t si = 0; si < nS; ++si) v.push_back(mass[ni * nS + si][ti]);
      const auto sm = summarize(v);
      tab.mass[ni][ti] = sm.mean;
      tab.std_error[ni][ti] = sm.se;
    }
  return tab;
}

std::string format_noncommutation(const NoncommutationTable& t) {
  std::string s = "mass on the transient state, FV started from the transient state\n";
  s += fmt::format("{:>12}", "N \\ t");
  for (double x : t.ts) s += fmt::format(" {:>10}", x);
  s += '\n';
  for (std::size_t i = 0; i < t.Ns.size(); ++i) {
    s += fmt::format("{:>12}", t.Ns[i]);
    for (double m : t.mass[i]) s += fmt::format(" {:>10.4f}", m);
    s += '\n';
  }
  s += fmt::format("{:>12}", "inf");
  for (double m : t.conditional_law) s += fmt::format(" {:>10.4f}", m);
  s += fmt::format("\nN -> inf then t -> inf: {:.4f}; t -> inf at fixed N: 0 (the dying state traps the system)\n",
                   t.qsd_mass);
  return s;
}

// ---------------------------------------------------------------------------
// Runner

std::filesystem::path resolve_output_dir(const ExperimentConfig& cfg, const RunOptions& opts) {
  if (opts.output_dir) return *opts.output_dir;
  if (cfg.output_dir) return *cfg.output_dir;
  if (const char* env = std::getenv("QSDLAB_OUTPUT_DIR"); env && *env) return env;
  return "qsdlab_out";
}

namespace {

void write_file(const std::filesystem::path& p, const std::string& content) {
  std::ofstream f(p, std::ios::binary);
  if (!f) throw IoError(fmt::format("cannot write {}", p.string()));
  f << content;
  if (!f) throw IoError(fmt::format("write failed for {}", p.string()));
}

std::vector<double> to_vec(const Eigen::VectorXd& v) { return {v.data(), v.data() + v.size()}; }

void run_oracle(const ExperimentConfig& cfg, const std::filesystem::path& dir, std::ostream& log) {
  json out = {{"model", cfg.model_json}, {"model_hash", cfg.model_hash}};
  if (auto an = analytic_qsd(cfg.preset)) {
    json list = json::array();
    for (const auto& q : an->qsds) {
      json atoms = json::array();
      for (const auto& [x, w] : q.atoms) atoms.push_back({x, w});
      list.push_back({{"label", q.label}, {"theta", q.theta}, {"atoms", atoms}, {"has_density", bool(q.density)}});
    }
    out["analytic"] = {{"regime", an->regime}, {"qsds", list}};
  }
  std::string survival = "step,t,survival\n";
  if (is_finite(cfg.preset)) {
    const auto chain = *finite_chain(cfg.preset);
    const auto m = killed_semigroup(chain, cfg.oracle.horizon);
    const auto qsds = class_qsds(m);
    json classes = json::array();
    for (const auto& c : qsds) {
      json e = {{"states", c.states}, {"theta", c.theta}, {"note", c.note}};
      e["qsd"] = c.qsd ? json(to_vec(*c.qsd)) : json(nullptr);
      classes.push_back(e);
      log << fmt::format("class {{{}}}: theta = {}{}\n", fmt::join(c.states, ","), c.theta,
                         c.qsd ? "" : " (no QSD: " + c.note + ")");
    }
    out["horizon"] = cfg.oracle.horizon;
    out["classes"] = classes;
    const auto eta0 = init_weights(cfg.init, cfg.preset);
    const auto att = attracting_class(m, qsds, eta0);
    out["attracting_class"] = att ? json(*att) : json(nullptr);
    if (qsds.size() == 1) {
      const auto trip = perron_triplet(m);
      out["triplet"] = {{"theta", trip.theta},
                        {"h", to_vec(trip.h)},
                        {"gamma", to_vec(trip.gamma_left)},
                        {"left_residual", trip.left_residual},
                        {"right_residual", trip.right_residual},
                        {"converged", trip.converged}};
    } else {
      out["triplet"] = nullptr;
    }
    const auto surv = survival_curve(m, eta0, cfg.oracle.survival_steps);
    for (std::size_t k = 0; k < surv.size(); ++k)
      survival += fmt::format("{},{},{}\n", k + 1, static_cast<double>(k + 1) * cfg.oracle.horizon, surv[k]);
  } else {
    const auto chain = grid_generator(cfg.preset, cfg.oracle.n_grid);
    const auto trip = perron_triplet_generator(chain);
    const auto disc = discrete_qsd_oracle(cfg.preset, cfg.fv.gamma, cfg.oracle.n_grid);
    out["n_grid"] = cfg.oracle.n_grid;
    out["generator"] = {{"theta", trip.theta}, {"left_residual", trip.left_residual},
                        {"right_residual", trip.right_residual}, {"converged", trip.converged}};
    out["step_kernel"] = {{"gamma", cfg.fv.gamma}, {"theta", disc.theta}};
    log << fmt::format("theta (generator grid) = {}\ntheta_gamma (step kernel, gamma = {}) = {}\n", trip.theta,
                       cfg.fv.gamma, disc.theta);
    std::string q = "x,weight\n";
    for (std::size_t i = 0; i < chain.n_states(); ++i)
      q += fmt::format("{},{}\n", chain.coordinates[i], trip.gamma_left(static_cast<Eigen::Index>(i)));
    write_file(dir / "qsd_generator.csv", q);
    std::string qg = "x,weight\n";
    for (std::size_t i = 0; i < disc.measure.size(); ++i)
      qg += fmt::format("{},{}\n", disc.measure.support[i], disc.measure.weights[i]);
    write_file(dir / "qsd_gamma.csv", qg);
    const auto k = grid_step_kernel(cfg.preset, cfg.fv.gamma, cfg.oracle.n_grid);
    Eigen::VectorXd eta0(static_cast<Eigen::Index>(disc.measure.size()));
    for (std::size_t i = 0; i < disc.measure.size(); ++i) eta0(static_cast<Eigen::Index>(i)) = disc.measure.weights[i];
    const auto surv = survival_curve(k, eta0, cfg.oracle.survival_steps);
    for (std::size_t s = 0; s < surv.size(); ++s)
      survival += fmt::format("{},{},{}\n", s + 1, static_cast<double>(s + 1) * cfg.fv.gamma, surv[s]);
  }
  write_file(dir / "oracle.json", out.dump(2) + "\n");
  write_file(dir / "survival.csv", survival);
}

void run_harris(const ExperimentConfig& cfg, const std::filesystem::path& dir, std::ostream& log) {
  const auto chain = *finite_chain(cfg.preset);
  const auto res = search_lyapunov_pair(chain, cfg.harris);
  json out = {{"model", cfg.model_json}, {"model_hash", cfg.model_hash}, {"search", search_to_json(res)}};
  const auto irr = check_irreducibility(chain, res.best.K, res.t0);
  out["irreducibility"] = {{"epsilon", irr.epsilon}, {"pass", irr.pass}, {"from", irr.witness_from},
                           {"to", irr.witness_to}};
  log << res.diagnostic << '\n';
  if (res.found) {
    const auto m = killed_semigroup(chain, res.t0);
    out["conclusion"] = conclusion_to_json(verify_conclusion(m, res.best));
  }
  write_file(dir / "certificate.json", out.dump(2) + "\n");
}

}  // namespace

void run_experiment(ExperimentConfig cfg, Mode mode, const RunOptions& opts, std::ostream& log) {
  if (opts.seed) cfg.seed = *opts.seed;
  cfg.mode = mode;
  validate_for_mode(cfg, mode);
  const auto dir = resolve_output_dir(cfg, opts);
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError(fmt::format("cannot create output directory {}: {}", dir.string(), ec.message()));
  const auto t0 = std::chrono::steady_clock::now();
  write_file(dir / "config.json", config_to_json(cfg).dump(2) + "\n");

  switch (mode) {
    case Mode::simulate: {
      auto model = make_model(cfg.preset, cfg.fv.gamma);
      FVConfig fv = cfg.fv;
      fv.seed = cfg.seed;
      const auto init = make_init(cfg.init, cfg.preset);
      auto report = run_fv(*model, fv, *init);
      report.model_info = {{"model", cfg.model_json}, {"model_hash", cfg.model_hash}};
      write_report(report, dir);
      const auto est = estimate_theta(report, report.deaths_per_step.size() / 2);
      log << fmt::format("theta_hat (second half) = {} +- {}\n", est.value, est.std_error);
      break;
    }
    case Mode::oracle: run_oracle(cfg, dir, log); break;
    case Mode::harris: run_harris(cfg, dir, log); break;
    case Mode::sweep: {
      if (cfg.sweep.experiment == "noncommutation") {
        const auto tab = run_noncommutation(cfg, opts.jobs);
        std::string csv = "# qsdlab.noncommutation.v1\nN,t,transient_mass,stderr,n_seeds\n";
        for (std::size_t i = 0; i < tab.Ns.size(); ++i)
          for (std::size_t k = 0; k < tab.ts.size(); ++k)
            csv += fmt::format("{},{},{},{},{}\n", tab.Ns[i], tab.ts[k], tab.mass[i][k], tab.std_error[i][k],
                               cfg.sweep.seeds.size());
        for (std::size_t k = 0; k < tab.ts.size(); ++k)
          csv += fmt::format("inf,{},{},0,0\n", tab.ts[k], tab.conditional_law[k]);
        write_file(dir / "noncommutation.csv", csv);
        log << format_noncommutation(tab);
      } else {
        const auto res = run_sweep(cfg, opts.jobs);
        write_file(dir / "sweep.csv", sweep_csv(res, cfg.model_hash));
        write_file(dir / "summary.json", res.summary.dump(2) + "\n");
        for (const auto& f : res.summary["fits"])
          if (f.contains("slope"))
            log << fmt::format("{} vs {}: slope {:.4f} (r2 {:.3f})\n", f["metric"].get<std::string>(),
                               f["against"].get<std::string>(), f["slope"].get<double>(), f["r2"].get<double>());
      }
      break;
    }
  }
  const double elapsed = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  write_file(dir / "run.meta.json", json{{"elapsed_seconds", elapsed}, {"jobs", opts.jobs}}.dump(2) + "\n");
}

int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const IoError*>(&e)) return 4;
  if (dynamic_cast<const InputError*>(&e) || dynamic_cast<const UnsupportedModelError*>(&e) ||
      dynamic_cast<const json::exception*>(&e))
    return 2;
  return 3;
}

}  // namespace qsdlab
