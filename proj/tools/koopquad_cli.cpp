#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "koopquad/config.hpp"

namespace fs = std::filesystem;
using namespace koopquad;

namespace {

// Flags shared by every subcommand; unset ones leave the config untouched.
struct Overrides {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::optional<int> M, N;
  std::optional<double> duration, dt, horizon, omega_norm;
  std::optional<std::string> bounds, mode, timing;

  ExperimentConfig apply() const {
    ExperimentConfig c = config.empty() ? ExperimentConfig{} : load_config(config);
    if (seed) c.seed = *seed;
    if (out) c.output = *out;
    if (M) c.order.M = *M;
    if (N) c.order.N = *N;
    if (M || N) c.sweep = {c.order};
    if (duration) {
      c.duration = *duration;
      c.approx.duration = *duration;
    }
    if (dt) c.mpc.dt = *dt;
    if (horizon) c.mpc.horizon = *horizon;
    if (omega_norm) c.omega_norm = *omega_norm;
    if (bounds) c.bounds = *bounds == "on";
    if (mode) c.mpc.mode = *parse_control_mode(*mode);
    if (timing) c.timing = *timing == "on";
    c.approx.seed = c.seed;
    c.approx.params = c.params;
    try {
      c.validate();
    } catch (const ConfigError&) {
      throw;
    } catch (const Error& e) {
      throw ConfigError(e.what());
    }
    return c;
  }
};

void add_common(CLI::App* app, Overrides& o) {
  app->add_option("--config", o.config, "YAML experiment file; defaults are used without one")
      ->check(CLI::ExistingFile);
  app->add_option("--seed", o.seed, "RNG seed");
  app->add_option("--out", o.out, "output directory");
  app->add_option("--M", o.M, "positional chain length M")->check(CLI::Range(2, 12));
  app->add_option("--N", o.N, "attitude chain length N")->check(CLI::Range(2, 12));
}

std::string command_line(int argc, char** argv) {
  std::string s;
  for (int i = 0; i < argc; ++i) s += (i ? " " : "") + std::string(argv[i]);
  return s;
}

int cmd_track(const std::string& task_name, const Overrides& o, const std::string& cmd) {
  const ExperimentConfig c = o.apply();
  const TrackingTask task = c.resolve_task(task_name.empty() ? c.task : task_name);
  TrackingOptions opts;
  opts.plant_dt = c.plant_dt;
  opts.control_box = c.control_box;
  const ClosedLoopLog log = run_tracking(task, c.params, c.order, c.mpc_config(), opts);

  const fs::path csv = fs::path(c.output) / (run_stem(task.name, c.order) + ".csv");
  {
    std::ofstream out = open_output(csv);
    write_tracking_csv(out, log, c.timing);
  }
  const TrackingSummary s = log.summary();
  json summary = to_json(s);
  summary["task"] = task.name;
  summary["steps"] = log.records.size();
  summary["max_psi_after_5s"] = log.max_psi_after(5.0);
  summary["max_err_pos_after_20s"] = log.max_err_pos_after(20.0);
  json meta = run_metadata(cmd, c.seed, to_json(c));
  meta["csv"] = csv.filename().string();
  write_json(fs::path(csv).replace_extension(".json"), {{"metadata", meta}, {"summary", summary}});

  std::printf("%s: %zu steps, mean QP solve %.3f ms, max psi %.3e, mean |x - x_ref| %.4f m\n",
              task.name.c_str(), log.records.size(), s.mean_qp_ms, s.max_psi, s.mean_err_pos);
  std::printf("wrote %s\n", csv.string().c_str());
  return s.unconverged_solves == 0 ? 0 : 3;
}

int cmd_approx_error(const Overrides& o, const std::string& cmd) {
  ExperimentConfig c = o.apply();
  ApproxErrorConfig a = c.approx;
  a.orders = c.sweep;
  const auto series = approximation_error_experiment(a);
  for (const auto& s : series) {
    const fs::path csv = fs::path(c.output) / (run_stem("approx_error", s.order) + ".csv");
    {
      std::ofstream out = open_output(csv);
      write_error_csv(out, s);
    }
    json meta = run_metadata(cmd, c.seed, to_json(c));
    meta["csv"] = csv.filename().string();
    write_json(fs::path(csv).replace_extension(".json"), {{"metadata", meta}, {"summary", to_json(s)}});
    std::printf("(%d,%d): mean err_x over [0,10] s %.4e -> %s\n", s.order.M, s.order.N,
                s.mean_err_x(10.0), csv.string().c_str());
  }
  return 0;
}

int cmd_analyze(const std::string& what, const Overrides& o, const std::string& cmd) {
  const ExperimentConfig c = o.apply();
  json result;
  std::string stem;
  if (what == "controllability") {
    const RankReport lti = lti_controllability(c.order);
    const PbhReport pbh = lpv_pbh_test(c.initial_state, c.params, c.order);
    result = to_json(lti);
    result["M"] = c.order.M;
    result["N"] = c.order.N;
    result["pbh_at_initial_state"] = to_json(pbh.pbh);
    result["c_star_at_initial_state"] = to_json(pbh.c_star);
    stem = run_stem("controllability", c.order);
    std::printf("rank %d of %d, full_row_rank=%s\n", lti.rank, lti.rows, lti.full_row_rank() ? "true" : "false");
  } else if (what == "residuals") {
    const ResidualDecayReport r = residual_decay(c.omega_norm, c.analysis_states, c.seed, c.params);
    result = to_json(r);
    double worst = 0.0;
    for (double q : r.worst_y_ratio) worst = std::max(worst, q);
    result["worst_y_ratio_overall"] = worst;
    result["y_ratio_within_bound"] = worst <= c.omega_norm + 1e-12;
    stem = "residuals";
    std::printf("|omega| = %.3f: worst |y_k|/|y_k-1| = %.6f\n", c.omega_norm, worst);
  } else {
    ApproxErrorConfig a = c.approx;
    a.duration = c.gramian_duration;
    const ApproxTestSignal signal(a);
    const int steps = static_cast<int>(std::lround(c.gramian_duration / a.dt));
    auto ctrl = [&](double t, const QuadState& s) {
      const auto interval = static_cast<std::size_t>(std::floor(t / a.hold + 1e-9));
      return pseudo_to_body(s, signal.at(t, interval), c.params);
    };
    const auto traj = integrate(c.initial_state, ctrl, a.dt, steps, c.params);
    const GramianReport g = gramian(traj, a.dt, c.params, c.order, 0.0, c.gramian_duration);
    result = to_json(g);
    result["M"] = c.order.M;
    result["N"] = c.order.N;
    result["interval"] = c.gramian_duration;
    stem = run_stem("gramian", c.order);
    std::printf("gramian rank %d of %d, min sv %.3e, max sv %.3e\n", g.rank, c.order.dim(), g.min_sv,
                g.max_sv);
  }
  write_json(fs::path(c.output) / (stem + ".json"),
             {{"metadata", run_metadata(cmd, c.seed, to_json(c))}, {"result", result}});
  return 0;
}

int cmd_export_model(const Overrides& o, const std::string& cmd) {
  const ExperimentConfig c = o.apply();
  const LtiSystem lti(c.order);
  const MatX B = build_B(c.initial_state, c.params, c.order);
  const std::string stem = run_stem("model", c.order);
  const std::pair<const char*, const MatX*> mats[] = {{"A", &lti.A}, {"Bbar", &lti.Bbar}, {"B", &B}};
  json files = json::object();
  for (const auto& [name, m] : mats) {
    const fs::path path = fs::path(c.output) / (stem + "_" + name + ".mtx");
    std::ofstream out = open_output(path);
    write_matrix(out, *m, name);
    files[name] = {{"file", path.filename().string()}, {"rows", m->rows()}, {"cols", m->cols()}};
    std::printf("%-4s %3td x %-3td -> %s\n", name, m->rows(), m->cols(), path.string().c_str());
  }
  write_json(fs::path(c.output) / (stem + ".json"),
             {{"metadata", run_metadata(cmd, c.seed, to_json(c))}, {"matrices", files}});
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{
      "Lifted-model MPC for a quadrotor on SE(3).\n"
      "Units are SI throughout (m, s, kg, N, N m); angles are in radians."};
  app.require_subcommand(1);
  Overrides o;
  std::string task_name, what;

  auto* track = app.add_subcommand("track", "closed-loop tracking of a named task");
  track->add_option("task", task_name, "helix | torus | hover | a task from the config");
  add_common(track, o);
  track->add_option("--duration", o.duration, "run length [s]")->check(CLI::PositiveNumber);
  track->add_option("--dt", o.dt, "control interval [s]")->check(CLI::PositiveNumber);
  track->add_option("--horizon", o.horizon, "prediction horizon [s]")->check(CLI::PositiveNumber);
  track->add_option("--bounds", o.bounds, "pseudo-control box")->check(CLI::IsMember({"on", "off"}));
  track->add_option("--mode", o.mode, "virtual-control parameterization")
      ->check(CLI::IsMember({"realizable", "virtual"}));
  track->add_option("--timing", o.timing, "write wall-clock solve times (off gives reproducible files)")
      ->check(CLI::IsMember({"on", "off"}));

  auto* approx = app.add_subcommand("approx-error", "lifted-model prediction error over the (M,N) sweep");
  add_common(approx, o);
  approx->add_option("--duration", o.duration, "simulated time [s]")->check(CLI::PositiveNumber);

  auto* analyze = app.add_subcommand("analyze", "rank, residual-decay and Gramian reports");
  analyze->add_option("what", what, "controllability | residuals | gramian")
      ->required()
      ->check(CLI::IsMember({"controllability", "residuals", "gramian"}));
  add_common(analyze, o);
  analyze->add_option("--omega-norm", o.omega_norm, "angular-rate norm for residuals [rad/s]")
      ->check(CLI::PositiveNumber);

  auto* exp = app.add_subcommand("export-model", "write A, Bbar and B(X0) as MatrixMarket arrays");
  add_common(exp, o);

  CLI11_PARSE(app, argc, argv);
  const std::string cmd = command_line(argc, argv);
  try {
    if (*track) return cmd_track(task_name, o, cmd);
    if (*approx) return cmd_approx_error(o, cmd);
    if (*analyze) return cmd_analyze(what, o, cmd);
    return cmd_export_model(o, cmd);
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
}
