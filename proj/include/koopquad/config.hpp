#pragma once

// Experiment configuration file (YAML). Every key is optional; a missing file
// section keeps the defaults below.
//
//   seed: 0
//   output: out
//   task: helix            # helix | torus | hover | a name under `tasks`
//   duration: 0            # seconds; 0 keeps the task default
//   order: {M: 3, N: 3}
//   sweep: [[3, 3], [4, 4], [5, 5]]
//   quadrotor: {mass: 0.904, inertia: [0.0023, 0.0026, 0.0032], gravity: 9.81}
//   mpc: {horizon: 1.5, dt: 0.05, mode: realizable, bounds: false,
//         thrust: [0, 40], moment: [-0.05, 0.05], tolerance: 1e-8, max_iterations: 2000}
//   simulation: {plant_dt: 0.001, timing: true}
//   approx_error: {duration: 10, dt: 0.001, hold: 0.05, sample_every: 0.05}
//   analysis: {omega_norm: 0.5, states: 100, gramian_duration: 1.0}
//   initial_state: {x: [0, 0, 0], v: [0, 0, 0], omega: [0, 0, 0], rpy: [0, 0, 0]}
//   tasks:
//     corner: {target: [1, 1.3, 2], start: [0, 0, 0], duration: 40}

#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <yaml-cpp/yaml.h>

#include "koopquad/io.hpp"

namespace koopquad {

class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Go-to-point task declared in the config file.
struct SetpointTaskSpec {
  Vec3 target = Vec3::Zero();
  Vec3 start = Vec3::Zero();
  double duration = 40.0;
};

struct ExperimentConfig {
  std::uint64_t seed = 0;
  std::string output = "out";
  std::string task = "helix";
  double duration = 0.0;
  TruncationOrder order{3, 3};
  std::vector<TruncationOrder> sweep{{3, 3}, {4, 4}, {5, 5}};
  QuadParams params{};
  MpcConfig mpc{};
  bool bounds = false;
  PseudoControlBox control_box{{0.0, Vec3::Constant(-0.05)}, {40.0, Vec3::Constant(0.05)}};
  double plant_dt = 1e-3;
  bool timing = true;
  ApproxErrorConfig approx{};
  double omega_norm = 0.5;
  int analysis_states = 100;
  double gramian_duration = 1.0;
  QuadState initial_state{};
  std::map<std::string, SetpointTaskSpec> tasks;

  /// Checks everything a run depends on before any run starts.
  void validate() const {
    params.validate();
    order.validate();
    for (const auto& o : sweep) o.validate();
    if (order.M < 2 || order.N < 2) throw ConfigError("order: M and N must be at least 2");
    MpcConfig m = mpc;
    if (bounds) m.control_box = control_box;
    m.finalize(order);
    if (!(plant_dt > 0.0) || plant_dt > mpc.dt) throw ConfigError("simulation.plant_dt must be in (0, mpc.dt]");
    if (duration < 0.0) throw ConfigError("duration must be nonnegative");
    if (!(approx.duration > 0.0) || !(approx.dt > 0.0) || !(approx.hold > 0.0) ||
        !(approx.sample_every > 0.0)) {
      throw ConfigError("approx_error: durations and steps must be positive");
    }
    if (!(omega_norm > 0.0) || analysis_states < 1 || !(gramian_duration > 0.0)) {
      throw ConfigError("analysis: omega_norm, states and gramian_duration must be positive");
    }
    if (!is_rotation(initial_state.R)) throw ConfigError("initial_state: not a rotation");
  }

  /// Built-in or config-defined task by name, with the duration override applied.
  TrackingTask resolve_task(const std::string& name) const {
    if (auto t = builtin_task(name, duration)) return *t;
    const auto it = tasks.find(name);
    if (it == tasks.end()) throw ConfigError("unknown task '" + name + "'");
    TrackingTask t;
    t.name = name;
    const Vec3 target = it->second.target;
    t.x_ref = [target](double) { return target; };
    t.v_ref = [](double) { return Vec3::Zero(); };
    t.duration = duration > 0.0 ? duration : it->second.duration;
    t.initial.x = it->second.start;
    return t;
  }

  MpcConfig mpc_config() const {
    MpcConfig m = mpc;
    if (bounds) m.control_box = control_box;
    return m;
  }
};

inline json to_json(const TruncationOrder& o) { return {{"M", o.M}, {"N", o.N}}; }

inline json vec_json(const Vec3& v) { return {v.x(), v.y(), v.z()}; }

inline json to_json(const ExperimentConfig& c) {
  json sweep = json::array();
  for (const auto& o : c.sweep) sweep.push_back({o.M, o.N});
  json tasks = json::object();
  for (const auto& [name, t] : c.tasks) {
    tasks[name] = {{"target", vec_json(t.target)}, {"start", vec_json(t.start)}, {"duration", t.duration}};
  }
  return {
      {"seed", c.seed},
      {"output", c.output},
      {"task", c.task},
      {"duration", c.duration},
      {"order", to_json(c.order)},
      {"sweep", sweep},
      {"quadrotor",
       {{"mass", c.params.m}, {"inertia", vec_json(c.params.J.diagonal())}, {"gravity", c.params.g}}},
      {"mpc",
       {{"horizon", c.mpc.horizon},
        {"dt", c.mpc.dt},
        {"mode", to_string(c.mpc.mode)},
        {"bounds", c.bounds},
        {"thrust", {c.control_box.lower.f, c.control_box.upper.f}},
        {"moment", {c.control_box.lower.Mbar.x(), c.control_box.upper.Mbar.x()}},
        {"tolerance", c.mpc.tolerance},
        {"max_iterations", c.mpc.max_iterations}}},
      {"simulation", {{"plant_dt", c.plant_dt}, {"timing", c.timing}}},
      {"approx_error",
       {{"duration", c.approx.duration},
        {"dt", c.approx.dt},
        {"hold", c.approx.hold},
        {"sample_every", c.approx.sample_every}}},
      {"analysis",
       {{"omega_norm", c.omega_norm},
        {"states", c.analysis_states},
        {"gramian_duration", c.gramian_duration}}},
      {"initial_state",
       {{"x", vec_json(c.initial_state.x)},
        {"v", vec_json(c.initial_state.v)},
        {"omega", vec_json(c.initial_state.omega)}}},
      {"tasks", tasks},
  };
}

namespace detail {

class ConfigReader {
 public:
  explicit ConfigReader(std::string source) : source_(std::move(source)) {}

  [[noreturn]] void fail(const YAML::Node& n, const std::string& msg) const {
    const YAML::Mark m = n.Mark();
    std::string where = source_;
    if (!m.is_null()) where += ":" + std::to_string(m.line + 1) + ":" + std::to_string(m.column + 1);
    throw ConfigError(where + ": " + msg);
  }

  void expect_map(const YAML::Node& n, const std::string& section,
                  const std::set<std::string>& keys) const {
    if (!n.IsMap()) fail(n, "'" + section + "' must be a mapping");
    for (const auto& kv : n) {
      const auto key = kv.first.as<std::string>();
      if (!keys.count(key)) fail(kv.first, "unknown key '" + key + "' in " + section);
    }
  }

  template <typename T>
  void read(const YAML::Node& parent, const char* key, T& out) const {
    const YAML::Node n = parent[key];
    if (!n) return;
    try {
      out = n.as<T>();
    } catch (const YAML::Exception&) {
      fail(n, std::string("bad value for '") + key + "'");
    }
  }

  void read_vec3(const YAML::Node& parent, const char* key, Vec3& out) const {
    const YAML::Node n = parent[key];
    if (!n) return;
    if (!n.IsSequence() || n.size() != 3) fail(n, std::string("'") + key + "' must be a list of 3 numbers");
    for (std::size_t i = 0; i < 3; ++i) {
      try {
        out(static_cast<Eigen::Index>(i)) = n[i].as<double>();
      } catch (const YAML::Exception&) {
        fail(n[i], std::string("bad number in '") + key + "'");
      }
    }
  }

  void read_pair(const YAML::Node& parent, const char* key, double& lo, double& hi) const {
    const YAML::Node n = parent[key];
    if (!n) return;
    if (!n.IsSequence() || n.size() != 2) fail(n, std::string("'") + key + "' must be [lower, upper]");
    try {
      lo = n[0].as<double>();
      hi = n[1].as<double>();
    } catch (const YAML::Exception&) {
      fail(n, std::string("bad number in '") + key + "'");
    }
    if (lo > hi) fail(n, std::string("'") + key + "' has lower > upper");
  }

  TruncationOrder read_order(const YAML::Node& n) const {
    TruncationOrder o{3, 3};
    if (n.IsSequence() && n.size() == 2) {
      try {
        o = {n[0].as<int>(), n[1].as<int>()};
      } catch (const YAML::Exception&) {
        fail(n, "order must be two integers");
      }
    } else {
      expect_map(n, "order", {"M", "N"});
      read(n, "M", o.M);
      read(n, "N", o.N);
    }
    if (o.M < 2 || o.N < 2) fail(n, "truncation order must have M >= 2 and N >= 2");
    return o;
  }

 private:
  std::string source_;
};

}  // namespace detail

/// Parses a YAML document. `source` names it in error messages.
inline ExperimentConfig parse_config(const std::string& text, const std::string& source = "<config>") {
  detail::ConfigReader r(source);
  YAML::Node root;
  try {
    root = YAML::Load(text);
  } catch (const YAML::ParserException& e) {
    throw ConfigError(source + ":" + std::to_string(e.mark.line + 1) + ":" +
                      std::to_string(e.mark.column + 1) + ": " + e.msg);
  }
  ExperimentConfig c;
  if (!root || root.IsNull()) return c;
  try {
    r.expect_map(root, "config",
                 {"seed", "output", "task", "duration", "order", "sweep", "quadrotor", "mpc", "simulation",
                  "approx_error", "analysis", "initial_state", "tasks"});
    r.read(root, "seed", c.seed);
    r.read(root, "output", c.output);
    r.read(root, "task", c.task);
    r.read(root, "duration", c.duration);
    if (root["order"]) c.order = r.read_order(root["order"]);
    if (const YAML::Node s = root["sweep"]) {
      if (!s.IsSequence() || s.size() == 0) r.fail(s, "'sweep' must be a non-empty list of orders");
      c.sweep.clear();
      for (const auto& o : s) c.sweep.push_back(r.read_order(o));
    }
    if (const YAML::Node q = root["quadrotor"]) {
      r.expect_map(q, "quadrotor", {"mass", "inertia", "gravity"});
      r.read(q, "mass", c.params.m);
      r.read(q, "gravity", c.params.g);
      if (const YAML::Node j = q["inertia"]) {
        if (j.IsSequence() && j.size() == 3 && j[0].IsScalar()) {
          Vec3 d;
          r.read_vec3(q, "inertia", d);
          c.params.J = d.asDiagonal();
        } else if (j.IsSequence() && j.size() == 3) {
          for (std::size_t i = 0; i < 3; ++i) {
            if (!j[i].IsSequence() || j[i].size() != 3) r.fail(j[i], "inertia rows must have 3 entries");
            for (std::size_t k = 0; k < 3; ++k) {
              c.params.J(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k)) = j[i][k].as<double>();
            }
          }
        } else {
          r.fail(j, "inertia must be a diagonal [a, b, c] or a 3x3 matrix");
        }
      }
      try {
        c.params.validate();
      } catch (const Error& e) {
        r.fail(q, e.what());
      }
    }
    if (const YAML::Node m = root["mpc"]) {
      r.expect_map(m, "mpc",
                   {"horizon", "dt", "mode", "bounds", "thrust", "moment", "tolerance", "max_iterations"});
      r.read(m, "horizon", c.mpc.horizon);
      r.read(m, "dt", c.mpc.dt);
      r.read(m, "bounds", c.bounds);
      r.read(m, "tolerance", c.mpc.tolerance);
      r.read(m, "max_iterations", c.mpc.max_iterations);
      if (m["mode"]) {
        std::string mode;
        r.read(m, "mode", mode);
        const auto parsed = parse_control_mode(mode);
        if (!parsed) r.fail(m["mode"], "mode must be 'realizable' or 'virtual'");
        c.mpc.mode = *parsed;
      }
      r.read_pair(m, "thrust", c.control_box.lower.f, c.control_box.upper.f);
      double lo = c.control_box.lower.Mbar.x(), hi = c.control_box.upper.Mbar.x();
      r.read_pair(m, "moment", lo, hi);
      c.control_box.lower.Mbar.setConstant(lo);
      c.control_box.upper.Mbar.setConstant(hi);
    }
    if (const YAML::Node s = root["simulation"]) {
      r.expect_map(s, "simulation", {"plant_dt", "timing"});
      r.read(s, "plant_dt", c.plant_dt);
      r.read(s, "timing", c.timing);
    }
    if (const YAML::Node a = root["approx_error"]) {
      r.expect_map(a, "approx_error", {"duration", "dt", "hold", "sample_every"});
      r.read(a, "duration", c.approx.duration);
      r.read(a, "dt", c.approx.dt);
      r.read(a, "hold", c.approx.hold);
      r.read(a, "sample_every", c.approx.sample_every);
    }
    if (const YAML::Node a = root["analysis"]) {
      r.expect_map(a, "analysis", {"omega_norm", "states", "gramian_duration"});
      r.read(a, "omega_norm", c.omega_norm);
      r.read(a, "states", c.analysis_states);
      r.read(a, "gramian_duration", c.gramian_duration);
    }
    if (const YAML::Node s = root["initial_state"]) {
      r.expect_map(s, "initial_state", {"x", "v", "omega", "rpy"});
      r.read_vec3(s, "x", c.initial_state.x);
      r.read_vec3(s, "v", c.initial_state.v);
      r.read_vec3(s, "omega", c.initial_state.omega);
      Vec3 rpy = Vec3::Zero();
      r.read_vec3(s, "rpy", rpy);
      c.initial_state.R = (Eigen::AngleAxisd(rpy.z(), Vec3::UnitZ()) *
                           Eigen::AngleAxisd(rpy.y(), Vec3::UnitY()) *
                           Eigen::AngleAxisd(rpy.x(), Vec3::UnitX()))
                              .toRotationMatrix();
    }
    if (const YAML::Node ts = root["tasks"]) {
      if (!ts.IsMap()) r.fail(ts, "'tasks' must map names to task definitions");
      for (const auto& kv : ts) {
        const auto name = kv.first.as<std::string>();
        if (builtin_task(name)) r.fail(kv.first, "task '" + name + "' shadows a built-in task");
        SetpointTaskSpec spec;
        r.expect_map(kv.second, "tasks." + name, {"target", "start", "duration"});
        if (!kv.second["target"]) r.fail(kv.second, "task '" + name + "' needs a target");
        r.read_vec3(kv.second, "target", spec.target);
        r.read_vec3(kv.second, "start", spec.start);
        r.read(kv.second, "duration", spec.duration);
        if (!(spec.duration > 0.0)) r.fail(kv.second, "task duration must be positive");
        c.tasks[name] = spec;
      }
    }
  } catch (const YAML::Exception& e) {
    throw ConfigError(source + ":" + std::to_string(e.mark.line + 1) + ":" +
                      std::to_string(e.mark.column + 1) + ": " + e.msg);
  }
  try {
    c.validate();
  } catch (const Error& e) {
    throw ConfigError(source + ": " + e.what());
  }
  return c;
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), path.string());
}

}  // namespace koopquad
