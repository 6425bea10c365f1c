#pragma once

#include <algorithm>
#include <cmath>
#include <future>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "koopquad/models.hpp"

namespace koopquad {

/// Relative SVD cutoff used for every rank decision in this module.
inline constexpr double kRankTol = 1e-9;

struct RankReport {
  std::string name;
  int rows = 0;
  int cols = 0;
  int rank = 0;
  double sigma_max = 0.0;
  double sigma_min_retained = 0.0;  // smallest singular value counted in the rank
  double tolerance = kRankTol;      // relative to sigma_max

  bool full_row_rank() const { return rank == rows; }
  bool full_column_rank() const { return rank == cols; }
};

inline RankReport numerical_rank(const MatX& A, std::string name, double rel_tol = kRankTol) {
  RankReport r;
  r.name = std::move(name);
  r.rows = static_cast<int>(A.rows());
  r.cols = static_cast<int>(A.cols());
  r.tolerance = rel_tol;
  if (A.size() == 0) return r;
  Eigen::BDCSVD<MatX> svd(A);
  const VecX& sv = svd.singularValues();
  r.sigma_max = sv.size() ? sv(0) : 0.0;
  for (Eigen::Index i = 0; i < sv.size(); ++i) {
    if (sv(i) > rel_tol * r.sigma_max && sv(i) > 0.0) {
      ++r.rank;
      r.sigma_min_retained = sv(i);
    }
  }
  return r;
}

/// exp(A t) for a nilpotent A: the Taylor series terminates.
inline MatX nilpotent_expm(const MatX& A, double t) {
  MatX result = MatX::Identity(A.rows(), A.cols());
  MatX term = result;
  for (int i = 1; i <= A.rows(); ++i) {
    term = term * A * (t / i);
    if (term.cwiseAbs().maxCoeff() == 0.0) break;
    result += term;
  }
  return result;
}

/// Rank of [Bbar, A Bbar, A^2 Bbar, ...] for the lifted LTI pair. Powers past
/// the nilpotency index vanish and are omitted.
inline RankReport lti_controllability(const TruncationOrder& ord) {
  const LtiSystem sys(ord);
  const int q = nilpotency_index(ord);
  MatX C(ord.dim(), static_cast<Eigen::Index>(q) * ord.virtual_dim());
  MatX block = sys.Bbar;
  for (int i = 0; i < q; ++i) {
    C.middleCols(static_cast<Eigen::Index>(i) * ord.virtual_dim(), ord.virtual_dim()) = block;
    block = sys.A * block;
  }
  return numerical_rank(C, "lti_controllability");
}

struct PbhReport {
  RankReport pbh;     // [A - 0 I | B(s)], the only eigenvalue of A being 0
  RankReport c_star;  // rows of B(s) where A has empty rows (18 x 4)
};

/// Pointwise PBH data for the LPV pair at a state.
inline PbhReport lpv_pbh_test(const QuadState& s, const QuadParams& p, const TruncationOrder& ord) {
  const MatX A = build_A(ord);
  const MatX B = build_B(s, p, ord);
  MatX AB(ord.dim(), ord.dim() + 4);
  AB << A, B;

  MatX c_star(18, 4);
  c_star << B.middleRows<3>(ord.p_row(ord.M)), B.middleRows<3>(ord.y_row(ord.M)),
      B.middleRows<3>(ord.h_row(ord.M)), B.middleRows<9>(ord.z_row(ord.N));
  return {numerical_rank(AB, "pbh"), numerical_rank(c_star, "c_star")};
}

struct GramianReport {
  double min_sv = 0.0;
  double max_sv = 0.0;
  int rank = 0;             // eigenvalues above kGramianRankTol * max_sv
  int samples = 0;
};

/// The Gramian is formed through its square-root factor, so eigenvalues are
/// resolved down to roughly eps^2 relative to the largest one.
inline constexpr double kGramianRankTol = 1e-20;

/// Controllability Gramian of the LPV pair along a sampled trajectory,
/// W = int_0^{tf-t0} e^{A tau} B(s(t0+tau)) B^T e^{A^T tau} dtau, by the
/// trapezoidal rule on the trajectory's own samples (sample i at i * dt).
/// W = F F^T with F = [sqrt(w_i) e^{A tau_i} B(s_i)], and eig(W) = sv(F)^2.
inline GramianReport gramian(std::span<const QuadState> traj, double dt, const QuadParams& p,
                             const TruncationOrder& ord, double t0, double tf) {
  if (!(dt > 0.0)) throw InvalidArgument("gramian: dt must be positive");
  GramianReport rep;
  if (!(tf > t0)) return rep;
  const auto i0 = static_cast<std::size_t>(std::llround(t0 / dt));
  const auto i1 = static_cast<std::size_t>(std::llround(tf / dt));
  if (i1 >= traj.size()) throw InvalidArgument("gramian: trajectory does not cover [t0, tf]");

  const LpvSystem sys(p, ord);
  const auto n = static_cast<Eigen::Index>(i1 - i0 + 1);
  MatX F(ord.dim(), 4 * n);
  for (std::size_t i = i0; i <= i1; ++i) {
    const double tau = static_cast<double>(i - i0) * dt;
    const double w = (i == i0 || i == i1) ? 0.5 * dt : dt;
    F.middleCols(4 * static_cast<Eigen::Index>(i - i0), 4) =
        std::sqrt(w) * nilpotent_expm(sys.A(), tau) * sys.B(traj[i]);
  }
  const VecX eig = Eigen::BDCSVD<MatX>(F).singularValues().array().square();
  rep.max_sv = eig(0);
  rep.min_sv = eig.size() == ord.dim() ? eig(eig.size() - 1) : 0.0;
  rep.rank = static_cast<int>((eig.array() > kGramianRankTol * rep.max_sv).count());
  rep.samples = static_cast<int>(n);
  return rep;
}

inline double gramian_min_sv(std::span<const QuadState> traj, double dt, const QuadParams& p,
                             const TruncationOrder& ord, double t0, double tf) {
  return gramian(traj, dt, p, ord, t0, tf).min_sv;
}

// ---------------------------------------------------------------------------
// Residual decay

struct ResidualDecayReport {
  double omega_norm = 0.0;
  int states = 0;
  int max_index = 0;
  /// worst_y_ratio[k-2] = max over states of |y_k| / |y_{k-1}|, k = 2..max_index.
  std::vector<double> worst_y_ratio;
  /// worst_z_bound_ratio[j-1] = max over states of |z_j| / ((sqrt2 |w|)^{j-1} |z_1|).
  std::vector<double> worst_z_bound_ratio;
  /// Mean terminal residual norm for M = N = m, m = m_min..m_max.
  int m_min = 3;
  std::vector<double> mean_terminal_residual;
};

/// Samples random states with |omega| fixed and measures the geometric decay
/// of the observable chains plus the truncation residual as M, N grow.
inline ResidualDecayReport residual_decay(double omega_norm, int states, std::uint64_t seed,
                                          const QuadParams& p, int max_index = 10,
                                          int m_min = 3, int m_max = 8,
                                          bool normalize = false) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> unif(-1.0, 1.0);
  auto unit = [&] { return Vec3(normal(rng), normal(rng), normal(rng)).normalized(); };

  ResidualDecayReport rep;
  rep.omega_norm = omega_norm;
  rep.states = states;
  rep.max_index = max_index;
  rep.m_min = m_min;
  rep.worst_y_ratio.assign(std::max(0, max_index - 1), 0.0);
  rep.worst_z_bound_ratio.assign(max_index, 0.0);
  rep.mean_terminal_residual.assign(std::max(0, m_max - m_min + 1), 0.0);

  for (int n = 0; n < states; ++n) {
    QuadState s;
    s.x = 2.0 * unit() * std::abs(unif(rng));
    s.v = 2.0 * unit() * std::abs(unif(rng));
    s.R = Eigen::Quaterniond(normal(rng), normal(rng), normal(rng), normal(rng))
              .normalized()
              .toRotationMatrix();
    s.omega = omega_norm * unit();
    if (normalize) s.omega = normalize_omega(s.omega, omega_norm);
    const double w = s.omega.norm();

    const LiftedState X = lift(s, p, {max_index, max_index});
    for (int k = 2; k <= max_index; ++k) {
      const double prev = X.y(k - 1).norm();
      if (prev > 0.0) {
        rep.worst_y_ratio[k - 2] = std::max(rep.worst_y_ratio[k - 2], X.y(k).norm() / prev);
      }
    }
    const double z1 = X.z(1).norm();
    for (int j = 1; j <= max_index; ++j) {
      const double bound = std::pow(std::sqrt(2.0) * w, j - 1) * z1;
      const double ratio = bound > 0.0 ? X.z(j).norm() / bound : (X.z(j).norm() > 0.0 ? 1e300 : 0.0);
      rep.worst_z_bound_ratio[j - 1] = std::max(rep.worst_z_bound_ratio[j - 1], ratio);
    }

    Vec4 u(normal(rng), normal(rng), normal(rng), normal(rng));
    u = u.normalized() * 10.0 * std::abs(unif(rng));
    for (int m = m_min; m <= m_max; ++m) {
      const auto r = residual_blocks(s, PseudoControl::from_vector(u), p, {m, m});
      rep.mean_terminal_residual[m - m_min] += r.as_lifted_vector().norm() / states;
    }
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Approximation error of the truncated LPV model against the plant

struct ErrorSeries {
  TruncationOrder order;
  std::vector<double> t;
  std::vector<double> err_x;  // |x_model - x_plant| / |x_plant|
  std::vector<double> err_v;
  std::vector<double> psi;    // trace(I - R_plant^T R_model) / 2, R_model projected to SO(3)

  double mean_err_x(double t_end) const {
    double sum = 0.0;
    int n = 0;
    for (std::size_t i = 0; i < t.size() && t[i] <= t_end + 1e-12; ++i, ++n) sum += err_x[i];
    return n ? sum / n : 0.0;
  }
};

struct ApproxErrorConfig {
  std::vector<TruncationOrder> orders{{3, 3}, {4, 4}, {5, 5}};
  double duration = 10.0;
  double dt = 1e-3;            // integrator step for plant and model
  double hold = 0.05;          // random moment sample-and-hold interval
  double sample_every = 0.05;  // output resolution
  std::uint64_t seed = 0;
  QuadParams params{};
  double blowup_guard = 1e6;
  bool parallel = true;

  QuadState initial_state() const {
    QuadState s;
    s.omega = Vec3::Constant(0.05);
    s.x = Vec3::Constant(0.1);
    s.v = Vec3::Constant(0.1);
    return s;
  }
};

/// Pseudo-control test signal f = 20 m g sin t, Mbar_i = 1e-3 xi_i sin(0.01 t),
/// with xi_i ~ U[-6, 6] redrawn every `hold` seconds from a seeded generator.
class ApproxTestSignal {
 public:
  ApproxTestSignal(const ApproxErrorConfig& cfg) : cfg_(cfg) {
    std::mt19937_64 rng(cfg.seed);
    std::uniform_real_distribution<double> xi(-6.0, 6.0);
    const auto n = static_cast<std::size_t>(std::ceil(cfg.duration / cfg.hold)) + 1;
    xi_.reserve(n);
    for (std::size_t i = 0; i < n; ++i) xi_.emplace_back(xi(rng), xi(rng), xi(rng));
  }

  /// Control at time t inside hold interval `interval`.
  PseudoControl at(double t, std::size_t interval) const {
    const auto& p = cfg_.params;
    return {20.0 * p.m * p.g * std::sin(t),
            1e-3 * xi_[std::min(interval, xi_.size() - 1)] * std::sin(0.01 * t)};
  }

 private:
  ApproxErrorConfig cfg_;
  std::vector<Vec3> xi_;
};

inline ErrorSeries approximation_error_run(const ApproxErrorConfig& cfg,
                                           const TruncationOrder& ord) {
  if (ord.N < 2) throw InvalidArgument("approximation error needs N >= 2");
  const QuadParams& p = cfg.params;
  const Mat3 J_inv = p.J_inv();
  const LpvSystem sys(p, ord);
  const ApproxTestSignal signal(cfg);

  const int steps_per_hold = static_cast<int>(std::lround(cfg.hold / cfg.dt));
  const int steps_per_sample = std::max(1, static_cast<int>(std::lround(cfg.sample_every / cfg.dt)));
  const int total_steps = static_cast<int>(std::lround(cfg.duration / cfg.dt));

  QuadState plant = cfg.initial_state();
  LiftedState model = lift(plant, p, ord);

  ErrorSeries out;
  out.order = ord;
  auto record = [&](double t) {
    const Mat3 Rm = unvec(model.z(1));
    const Vec3 xm = Rm * model.p(1);
    const Vec3 vm = Rm * model.y(1);
    out.t.push_back(t);
    out.err_x.push_back((xm - plant.x).norm() / plant.x.norm());
    out.err_v.push_back((vm - plant.v).norm() / plant.v.norm());
    out.psi.push_back(attitude_error(plant.R, project_to_so3(Rm)));
  };
  record(0.0);

  for (int i = 0; i < total_steps; ++i) {
    const double t = i * cfg.dt;
    const std::size_t interval = static_cast<std::size_t>(i / steps_per_hold);
    auto ubar = [&](double tq) { return signal.at(tq, interval); };

    auto plant_ctrl = [&](double tq, const QuadState& q) { return pseudo_to_body(q, ubar(tq), p); };
    plant = rk4_step(plant, t, cfg.dt, plant_ctrl, p, J_inv);

    auto f = [&](const VecX& x, double tq) {
      return sys.derivative(LiftedState{ord, x}, ubar(tq));
    };
    const double h = cfg.dt;
    const VecX& x0 = model.data;
    const VecX k1 = f(x0, t);
    const VecX k2 = f(x0 + 0.5 * h * k1, t + 0.5 * h);
    const VecX k3 = f(x0 + 0.5 * h * k2, t + 0.5 * h);
    const VecX k4 = f(x0 + h * k3, t + h);
    model.data = x0 + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);

    if (!model.data.allFinite() || model.data.cwiseAbs().maxCoeff() > cfg.blowup_guard ||
        !plant.all_finite() || plant.max_abs() > cfg.blowup_guard) {
      throw NumericalBlowup("approximation error run diverged at t = " +
                            std::to_string(t + cfg.dt));
    }
    if ((i + 1) % steps_per_sample == 0) record((i + 1) * cfg.dt);
  }
  return out;
}

/// Runs every configured truncation order against the same plant run and
/// random signal.
inline std::vector<ErrorSeries> approximation_error_experiment(const ApproxErrorConfig& cfg) {
  std::vector<ErrorSeries> out;
  if (!cfg.parallel) {
    for (const auto& ord : cfg.orders) out.push_back(approximation_error_run(cfg, ord));
    return out;
  }
  std::vector<std::future<ErrorSeries>> jobs;
  for (const auto& ord : cfg.orders) {
    jobs.push_back(std::async(std::launch::async, [&cfg, ord] {
      return approximation_error_run(cfg, ord);
    }));
  }
  for (auto& j : jobs) out.push_back(j.get());
  return out;
}

}  // namespace koopquad
