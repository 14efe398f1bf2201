#pragma once

// Run configuration as a nested JSON document. Unknown keys are rejected and
// missing keys keep their defaults, so an empty object is a valid config.

#include "ccmpc/io.hpp"

#include <set>

namespace ccmpc {

struct PriorSettings {
  double alpha0 = 1.0;
  double beta0 = 1.0;
  double nu0 = 5.0;  // excess over D - 1
  int K_init = 30;
  int max_iter = 2000;
  double tol = 1e-12;
  bool deletion_moves = true;
};

/// The controller settings with scalar bounds, so every value has a JSON form.
struct MpcSettings {
  int N = 25;
  double phi = 0.05;
  double confidence = 0.95;
  double d_safe = 2.0;
  bool inflate_moving = true;
  double static_backoff = 0.05;
  double t_max = 0.2;
  std::string budget_clock = "work";  // work | wall
  double work_unit_time = 3.5e-9;
  int n_set = 3;
  double rho = 1e5;
  double rho_w = 1e5;
  double e_margin = 1e-4;
  bool use_stability = true;
  bool value_decrease = true;
  int sqp_max_iter = 50;
  double sqp_tol = 1e-6;
  std::vector<double> q_diag = std::vector<double>(12, 1.0);
  std::vector<double> r_diag = std::vector<double>(4, 1.0);
  double v_max = 5.0;
  double roll_max = kPi;
  double pitch_max = kPi / 2;
  double yaw_max = kPi;
  std::vector<double> u_min = std::vector<double>(4, -2.0);
  std::vector<double> u_max = std::vector<double>(4, 2.0);
  std::vector<double> du_min = std::vector<double>(4, -1.96);
  std::vector<double> du_max = std::vector<double>(4, 1.96);

  MpcConfig to_config() const {
    if (q_diag.size() != 12 || r_diag.size() != 4) throw InputError("config mpc: q_diag needs 12 and r_diag 4 entries");
    for (const auto* v : {&u_min, &u_max, &du_min, &du_max})
      if (v->size() != 4) throw InputError("config mpc: input bounds need 4 entries");
    MpcConfig c = MpcConfig::quad_defaults();
    c.N = N;
    c.phi = phi;
    c.confidence = confidence;
    c.d_safe = d_safe;
    c.inflate_moving = inflate_moving;
    c.static_backoff = static_backoff;
    c.t_max = t_max;
    if (budget_clock == "work") {
      c.budget_clock = BudgetClock::work;
    } else if (budget_clock == "wall") {
      c.budget_clock = BudgetClock::wall;
    } else {
      throw InputError("config mpc: budget_clock must be 'work' or 'wall'");
    }
    c.work_unit_time = work_unit_time;
    c.n_set = n_set;
    c.rho = rho;
    c.rho_w = rho_w;
    c.e_margin = e_margin;
    c.use_stability = use_stability;
    c.value_decrease = value_decrease;
    c.sqp_max_iter = sqp_max_iter;
    c.sqp_tol = sqp_tol;
    c.Q = Eigen::Map<const Vec>(q_diag.data(), 12).asDiagonal();
    c.R = Eigen::Map<const Vec>(r_diag.data(), 4).asDiagonal();
    for (int i = 3; i < 6; ++i) {
      c.x_lo(i) = -v_max;
      c.x_hi(i) = v_max;
    }
    const double ang[3] = {roll_max, pitch_max, yaw_max};
    for (int i = 0; i < 3; ++i) {
      c.x_lo(6 + i) = -ang[i];
      c.x_hi(6 + i) = ang[i];
    }
    c.u_lo = Eigen::Map<const Vec>(u_min.data(), 4);
    c.u_hi = Eigen::Map<const Vec>(u_max.data(), 4);
    c.du_lo = Eigen::Map<const Vec>(du_min.data(), 4);
    c.du_hi = Eigen::Map<const Vec>(du_max.data(), 4);
    c.validate(kNx, kNu);
    return c;
  }
};

struct RunConfig {
  std::uint64_t seed = 2024;  // scenario and model fit; the corpus has its own
  std::string out = "out";
  bool strict = false;
  CorpusSpec corpus;
  FeatureWindow window;
  PriorSettings prior;
  MpcSettings mpc;
  QuadParams quad;
  AcceptanceScenarioSpec scenario;

  void validate() const {
    corpus.validate();
    FeatureWindow w = window;
    w.dt = quad.dt;
    w.validate();
    if (!(prior.alpha0 > 0 && prior.beta0 > 0 && prior.nu0 > 0)) throw InputError("config prior: alpha0, beta0, nu0 must be positive");
    if (prior.K_init < 1) throw InputError("config prior: K_init must be >= 1");
    quad.validate();
    mpc.to_config();
    if (!(scenario.duration > 0 && scenario.detection_radius > 0)) throw InputError("config scenario: duration and detection_radius must be positive");
    if (scenario.static_lateral_min > scenario.static_lateral_max) throw InputError("config scenario: lateral range reversed");
    if (std::abs(corpus.dt - quad.dt) > 1e-12) throw InputError("config: corpus.dt must equal quad.dt");
  }

  FeatureWindow feature_window() const {
    FeatureWindow w = window;
    w.dt = quad.dt;
    return w;
  }

  Scenario make_scenario() const {
    AcceptanceScenarioSpec s = scenario;
    s.seed = seed;
    s.dt = quad.dt;
    CorpusSpec gen = corpus;
    return acceptance_scenario(s, gen);
  }

  RunOptions run_options() const {
    RunOptions o;
    o.params = quad;
    o.window = feature_window();
    return o;
  }
};

namespace detail {

/// Reads the members of one JSON object, remembering which keys were used.
class ObjectReader {
 public:
  ObjectReader(const Json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw InputError("config: '" + path_ + "' must be an object");
  }

  template <class T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const Json::exception&) {
      throw InputError("config: '" + path_ + "." + key + "' has the wrong type");
    }
  }

  void get(const char* key, double& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    if (!j_.at(key).is_number()) throw InputError("config: '" + path_ + "." + key + "' must be a number");
    out = j_.at(key).get<double>();
  }

  const Json* child(const char* key) {
    seen_.insert(key);
    return j_.contains(key) ? &j_.at(key) : nullptr;
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (!seen_.count(it.key())) throw InputError("config: unknown key '" + path_ + "." + it.key() + "'");
  }

 private:
  const Json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

}  // namespace detail

inline Json to_json(const RunConfig& c) {
  Json j;
  j["seed"] = c.seed;
  j["out"] = c.out;
  j["strict"] = c.strict;
  const auto& k = c.corpus;
  j["corpus"] = {{"n_traj", k.n_traj},         {"seed", k.seed},
                 {"duration", k.duration},     {"dt", k.dt},
                 {"segment_time", k.segment_time}, {"speed_min", k.speed_min},
                 {"speed_max", k.speed_max},   {"turn_std", k.turn_std},
                 {"turn_max", k.turn_max},     {"climb_std", k.climb_std},
                 {"max_accel", k.max_accel},   {"box_lo", {k.box_lo.x(), k.box_lo.y(), k.box_lo.z()}},
                 {"box_hi", {k.box_hi.x(), k.box_hi.y(), k.box_hi.z()}},
                 {"n_env_obstacles", k.n_env_obstacles}, {"clearance", k.clearance},
                 {"train_fraction", k.train_fraction}};
  const auto& w = c.window;
  j["window"] = {{"length", w.length},
                 {"history_frac", w.history_frac},
                 {"future_frac", w.future_frac},
                 {"degree", w.degree},
                 {"nodes", w.nodes}};
  const auto& p = c.prior;
  j["prior"] = {{"alpha0", p.alpha0}, {"beta0", p.beta0},       {"nu0", p.nu0},
                {"K_init", p.K_init}, {"max_iter", p.max_iter}, {"tol", p.tol},
                {"deletion_moves", p.deletion_moves}};
  const auto& m = c.mpc;
  j["mpc"] = {{"N", m.N},
              {"phi", m.phi},
              {"confidence", m.confidence},
              {"d_safe", m.d_safe},
              {"inflate_moving", m.inflate_moving},
              {"static_backoff", m.static_backoff},
              {"t_max", m.t_max},
              {"budget_clock", m.budget_clock},
              {"work_unit_time", m.work_unit_time},
              {"n_set", m.n_set},
              {"rho", m.rho},
              {"rho_w", m.rho_w},
              {"e_margin", m.e_margin},
              {"use_stability", m.use_stability},
              {"value_decrease", m.value_decrease},
              {"sqp_max_iter", m.sqp_max_iter},
              {"sqp_tol", m.sqp_tol},
              {"q_diag", m.q_diag},
              {"r_diag", m.r_diag},
              {"v_max", m.v_max},
              {"roll_max", m.roll_max},
              {"pitch_max", m.pitch_max},
              {"yaw_max", m.yaw_max},
              {"u_min", m.u_min},
              {"u_max", m.u_max},
              {"du_min", m.du_min},
              {"du_max", m.du_max}};
  const auto& q = c.quad;
  j["quad"] = {{"m", q.m}, {"g", q.g}, {"J", {q.J.x(), q.J.y(), q.J.z()}}, {"L", q.L}, {"c", q.c}, {"dt", q.dt}};
  const auto& s = c.scenario;
  j["scenario"] = {{"duration", s.duration},
                   {"speed", s.speed},
                   {"n_static", s.n_static},
                   {"static_lateral_min", s.static_lateral_min},
                   {"static_lateral_max", s.static_lateral_max},
                   {"crossing_times", s.crossing_times},
                   {"crossing_lead", s.crossing_lead},
                   {"pre_roll", s.pre_roll},
                   {"detection_radius", s.detection_radius}};
  return j;
}

inline Vec3 vec3_from_json(const Json& j, const std::string& what) {
  const Vec v = vec_from_json(j, what);
  if (v.size() != 3) throw InputError("config: '" + what + "' needs 3 entries");
  return v;
}

inline RunConfig run_config_from_json(const Json& j) {
  RunConfig c;
  detail::ObjectReader top(j, "config");
  top.get("seed", c.seed);
  top.get("out", c.out);
  top.get("strict", c.strict);
  if (const Json* cj = top.child("corpus")) {
    detail::ObjectReader r(*cj, "corpus");
    auto& k = c.corpus;
    r.get("n_traj", k.n_traj);
    r.get("seed", k.seed);
    r.get("duration", k.duration);
    r.get("dt", k.dt);
    r.get("segment_time", k.segment_time);
    r.get("speed_min", k.speed_min);
    r.get("speed_max", k.speed_max);
    r.get("turn_std", k.turn_std);
    r.get("turn_max", k.turn_max);
    r.get("climb_std", k.climb_std);
    r.get("max_accel", k.max_accel);
    if (const Json* b = r.child("box_lo")) k.box_lo = vec3_from_json(*b, "corpus.box_lo");
    if (const Json* b = r.child("box_hi")) k.box_hi = vec3_from_json(*b, "corpus.box_hi");
    r.get("n_env_obstacles", k.n_env_obstacles);
    r.get("clearance", k.clearance);
    r.get("train_fraction", k.train_fraction);
    r.finish();
  }
  if (const Json* wj = top.child("window")) {
    detail::ObjectReader r(*wj, "window");
    r.get("length", c.window.length);
    r.get("history_frac", c.window.history_frac);
    r.get("future_frac", c.window.future_frac);
    r.get("degree", c.window.degree);
    r.get("nodes", c.window.nodes);
    r.finish();
  }
  if (const Json* pj = top.child("prior")) {
    detail::ObjectReader r(*pj, "prior");
    r.get("alpha0", c.prior.alpha0);
    r.get("beta0", c.prior.beta0);
    r.get("nu0", c.prior.nu0);
    r.get("K_init", c.prior.K_init);
    r.get("max_iter", c.prior.max_iter);
    r.get("tol", c.prior.tol);
    r.get("deletion_moves", c.prior.deletion_moves);
    r.finish();
  }
  if (const Json* mj = top.child("mpc")) {
    detail::ObjectReader r(*mj, "mpc");
    auto& m = c.mpc;
    r.get("N", m.N);
    r.get("phi", m.phi);
    r.get("confidence", m.confidence);
    r.get("d_safe", m.d_safe);
    r.get("inflate_moving", m.inflate_moving);
    r.get("static_backoff", m.static_backoff);
    r.get("t_max", m.t_max);
    r.get("budget_clock", m.budget_clock);
    r.get("work_unit_time", m.work_unit_time);
    r.get("n_set", m.n_set);
    r.get("rho", m.rho);
    r.get("rho_w", m.rho_w);
    r.get("e_margin", m.e_margin);
    r.get("use_stability", m.use_stability);
    r.get("value_decrease", m.value_decrease);
    r.get("sqp_max_iter", m.sqp_max_iter);
    r.get("sqp_tol", m.sqp_tol);
    r.get("q_diag", m.q_diag);
    r.get("r_diag", m.r_diag);
    r.get("v_max", m.v_max);
    r.get("roll_max", m.roll_max);
    r.get("pitch_max", m.pitch_max);
    r.get("yaw_max", m.yaw_max);
    r.get("u_min", m.u_min);
    r.get("u_max", m.u_max);
    r.get("du_min", m.du_min);
    r.get("du_max", m.du_max);
    r.finish();
  }
  if (const Json* qj = top.child("quad")) {
    detail::ObjectReader r(*qj, "quad");
    r.get("m", c.quad.m);
    r.get("g", c.quad.g);
    if (const Json* J = r.child("J")) c.quad.J = vec3_from_json(*J, "quad.J");
    r.get("L", c.quad.L);
    r.get("c", c.quad.c);
    r.get("dt", c.quad.dt);
    r.finish();
  }
  if (const Json* sj = top.child("scenario")) {
    detail::ObjectReader r(*sj, "scenario");
    auto& s = c.scenario;
    r.get("duration", s.duration);
    r.get("speed", s.speed);
    r.get("n_static", s.n_static);
    r.get("static_lateral_min", s.static_lateral_min);
    r.get("static_lateral_max", s.static_lateral_max);
    r.get("crossing_times", s.crossing_times);
    r.get("crossing_lead", s.crossing_lead);
    r.get("pre_roll", s.pre_roll);
    r.get("detection_radius", s.detection_radius);
    r.finish();
  }
  top.finish();
  c.scenario.seed = c.seed;
  c.scenario.dt = c.quad.dt;
  return c;
}

inline RunConfig load_run_config(const fs::path& path) {
  try {
    return run_config_from_json(read_json(path));
  } catch (const InputError& e) {
    throw InputError(path.string() + ": " + e.what());
  }
}

/// Prior for a training matrix from the settings.
inline VbgmmPrior make_prior(const Mat& X, const PriorSettings& p) {
  return default_prior(X, p.K_init, p.alpha0, p.beta0, p.nu0);
}

inline FitOptions make_fit_options(const PriorSettings& p, std::uint64_t seed) {
  FitOptions f;
  f.max_iter = p.max_iter;
  f.tol = p.tol;
  f.seed = seed;
  f.deletion_moves = p.deletion_moves;
  return f;
}

}  // namespace ccmpc
