#pragma once

#include <chrono>
#include <cmath>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <unsupported/Eigen/MatrixFunctions>

#include "koopquad/models.hpp"
#include "koopquad/qp.hpp"

namespace koopquad {

struct DiscreteLti {
  MatX Ad;
  MatX Bd;
  double dt = 0.0;
};

/// Zero-order-hold discretization. The Taylor sums terminate because A is
/// nilpotent, so both matrices are exact up to rounding.
inline DiscreteLti discretize(const LtiSystem& sys, double dt) {
  if (!(dt > 0.0)) throw InvalidArgument("discretize: dt must be positive");
  const Eigen::Index n = sys.A.rows();
  const int nu = nilpotency_index(sys.order);
  MatX Ad = MatX::Identity(n, n);
  MatX S = MatX::Identity(n, n) * dt;  // sum A^i dt^{i+1} / (i+1)!
  MatX term = MatX::Identity(n, n);
  for (int i = 1; i < nu; ++i) {
    term = term * sys.A * (dt / i);
    Ad += term;
    S += term * (dt / (i + 1));
  }
  return {Ad, S * sys.Bbar, dt};
}

/// Diagonal state weight: 1000 on y1, y2, p1, p2 and 1 on z1, z2.
inline MatX default_state_weight(const TruncationOrder& ord) {
  VecX d = VecX::Zero(ord.dim());
  for (int k = 1; k <= std::min(2, ord.M); ++k) {
    d.segment<3>(ord.p_row(k)).setConstant(1000.0);
    d.segment<3>(ord.y_row(k)).setConstant(1000.0);
  }
  for (int j = 1; j <= std::min(2, ord.N); ++j) d.segment<9>(ord.z_row(j)).setConstant(1.0);
  return d.asDiagonal();
}

inline MatX default_control_weight(const TruncationOrder& ord) {
  return 0.05 * MatX::Identity(ord.virtual_dim(), ord.virtual_dim());
}

/// Affine discrete prediction X+ = Ad X + Bd w + cd.
struct PredictionModel {
  MatX Ad;
  MatX Bd;
  VecX cd;
  double dt = 0.0;

  static PredictionModel from(const DiscreteLti& d) {
    return {d.Ad, d.Bd, VecX::Zero(d.Ad.rows()), d.dt};
  }
};

/// Jacobian of X -> B(X) ubar at Xc (central differences in lifted coordinates).
inline MatX lpv_input_jacobian(const LiftedState& Xc, const PseudoControl& ubar,
                               const QuadParams& p) {
  const TruncationOrder& ord = Xc.order;
  const Mat3 J_inv = p.J_inv();
  const Vec4 u = ubar.as_vector();
  auto Bu = [&](const VecX& x) {
    return VecX(assemble_B(InputBlocks(InputBasis::from_lifted(LiftedState{ord, x}), J_inv, p.m, ord),
                           ord) *
                u);
  };
  const Eigen::Index n = ord.dim();
  MatX J = MatX::Zero(n, n);
  // Only p1, y1, h1, z1, z2 enter B(X).
  std::vector<Eigen::Index> cols;
  for (int i = 0; i < 3; ++i) {
    cols.push_back(ord.p_row(1) + i);
    cols.push_back(ord.y_row(1) + i);
    cols.push_back(ord.h_row(1) + i);
  }
  for (int i = 0; i < 9; ++i) {
    cols.push_back(ord.z_row(1) + i);
    if (ord.N >= 2) cols.push_back(ord.z_row(2) + i);
  }
  for (Eigen::Index c : cols) {
    const double h = 1e-6 * std::max(1.0, std::abs(Xc.data(c)));
    VecX a = Xc.data, b = Xc.data;
    a(c) += h;
    b(c) -= h;
    J.col(c) = (Bu(a) - Bu(b)) / (2.0 * h);
  }
  return J;
}

/// Zero-order-hold discretization of the LPV model linearized about (Xc, uc):
///   X' = (A + Jc) X + B(Xc) w - Jc Xc,   Jc = d(B(X) uc)/dX at Xc,
/// which is exact to first order in X - Xc and affine in w.
inline PredictionModel linearize_lpv(const LiftedState& Xc, const PseudoControl& uc,
                                     const QuadParams& p, double dt) {
  if (!(dt > 0.0)) throw InvalidArgument("linearize_lpv: dt must be positive");
  const TruncationOrder& ord = Xc.order;
  const Eigen::Index n = ord.dim();
  const MatX J = lpv_input_jacobian(Xc, uc, p);
  MatX Mc = MatX::Zero(n + 5, n + 5);
  Mc.topLeftCorner(n, n) = build_A(ord) + J;
  Mc.block(0, n, n, 4) = build_B(InputBasis::from_lifted(Xc), p, ord);
  Mc.block(0, n + 4, n, 1) = -J * Xc.data;
  const MatX E = (Mc * dt).exp();
  return {E.topLeftCorner(n, n), E.block(0, n, n, 4), E.block(0, n + 4, n, 1), dt};
}

struct StateBox {
  VecX lower;
  VecX upper;
};

struct PseudoControlBox {
  PseudoControl lower;
  PseudoControl upper;
};

/// How the tracking controller parameterizes the virtual control.
///  Virtual:    U free in R^{9(M+N)-15} on the LTI model, pseudo-control by least squares.
///  Realizable: U_i = Bbar^T B(X) ubar_i, predicted with the LPV model linearized at the
///              current lifted state; the decision variables are the ubar_i.
enum class ControlMode { Virtual, Realizable };

inline std::string to_string(ControlMode m) {
  return m == ControlMode::Virtual ? "virtual" : "realizable";
}

inline std::optional<ControlMode> parse_control_mode(const std::string& s) {
  if (s == "virtual") return ControlMode::Virtual;
  if (s == "realizable") return ControlMode::Realizable;
  return std::nullopt;
}

struct MpcConfig {
  double horizon = 1.5;
  double dt = 0.05;
  MatX Q;   // empty: default_state_weight
  MatX Rw;  // empty: default_control_weight
  std::optional<StateBox> state_box;
  std::optional<PseudoControlBox> control_box;
  ControlMode mode = ControlMode::Realizable;
  double tolerance = 1e-8;
  int max_iterations = 2000;

  int steps() const { return static_cast<int>(std::lround(horizon / dt)); }

  /// Fills empty weights and checks every invariant against `ord`.
  void finalize(const TruncationOrder& ord) {
    if (Q.size() == 0) Q = default_state_weight(ord);
    if (Rw.size() == 0) Rw = default_control_weight(ord);
    validate(ord);
  }

  void validate(const TruncationOrder& ord) const {
    if (!(dt > 0.0) || !(horizon > 0.0)) throw InvalidArgument("mpc: horizon and dt must be positive");
    if (steps() < 1 || std::abs(steps() * dt - horizon) > 1e-9 * horizon) {
      throw InvalidArgument("mpc: horizon must be an integer multiple of dt");
    }
    if (Q.rows() != ord.dim() || Q.cols() != ord.dim()) throw InvalidArgument("mpc: Q has the wrong size");
    if (Rw.rows() != ord.virtual_dim() || Rw.cols() != ord.virtual_dim()) {
      throw InvalidArgument("mpc: Rw has the wrong size");
    }
    if (!Q.isApprox(Q.transpose()) || !Rw.isApprox(Rw.transpose())) {
      throw InvalidArgument("mpc: weights must be symmetric");
    }
    Eigen::SelfAdjointEigenSolver<MatX> q_eig(Q, Eigen::EigenvaluesOnly);
    if (q_eig.eigenvalues().minCoeff() < -1e-12 * std::max(1.0, q_eig.eigenvalues().maxCoeff())) {
      throw InvalidArgument("mpc: Q must be positive semidefinite");
    }
    if (Eigen::LLT<MatX>(Rw).info() != Eigen::Success) {
      throw InvalidArgument("mpc: Rw must be positive definite");
    }
    if (state_box) {
      if (state_box->lower.size() != ord.dim() || state_box->upper.size() != ord.dim()) {
        throw InvalidArgument("mpc: state box has the wrong size");
      }
      if (((state_box->lower - state_box->upper).array() > 0.0).any()) {
        throw InfeasibleBounds("mpc: empty state box");
      }
    }
    if (control_box &&
        ((control_box->lower.as_vector() - control_box->upper.as_vector()).array() > 0.0).any()) {
      throw InfeasibleBounds("mpc: empty control box");
    }
    if (tolerance <= 0.0 || max_iterations < 1) throw InvalidArgument("mpc: bad solver settings");
  }
};

/// Lifted references over a horizon; entry i belongs to t + i dt, i = 0..H.
struct ReferenceWindow {
  std::vector<VecX> X;
  std::vector<VecX> U;
};

/// Per-step box on the decision variables, held constant over the horizon.
struct InputBox {
  VecX lower;
  VecX upper;
};

/// Interval hull of the pseudo-control box mapped to virtual controls at `s`.
inline InputBox virtual_control_box(const QuadState& s, const PseudoControlBox& box,
                                    const QuadParams& p, const TruncationOrder& ord) {
  const MatX L = build_Bbar(ord).transpose() * build_B(s, p, ord);
  const Vec4 lo = box.lower.as_vector();
  const Vec4 hi = box.upper.as_vector();
  const VecX center = L * (0.5 * (lo + hi));
  const VecX radius = L.cwiseAbs() * (0.5 * (hi - lo));
  return {center - radius, center + radius};
}

inline InputBox pseudo_control_box(const PseudoControlBox& box) {
  return {box.lower.as_vector(), box.upper.as_vector()};
}

struct OcpSolution {
  VecX W;  // stacked decision variables w_0 .. w_{H-1}
  VecX U;  // stacked virtual controls U_i = L w_i
  int iterations = 0;
  QpStatus status = QpStatus::Solved;
  double cost = 0.0;
  double stationarity = 0.0;
  double primal_residual = 0.0;
  double solve_ms = 0.0;

  VecX first(Eigen::Index m) const { return U.head(m); }
};

/// Condensed tracking OCP over H steps with the states eliminated:
///   X_i = Ad^i X0 + sum_{j<i} Ad^{i-1-j} (Bd w_j + cd),  U_j = L w_j,
///   cost = dt sum_{i=1..H} |X_i - Xr_i|_Q^2 + dt sum_{i=0..H-1} |U_i - Ur_i|_Rw^2.
/// L is the identity for the plain virtual-control problem. The Hessian and its
/// factorization are built once; solve() is const and may be shared.
class CondensedOcp {
 public:
  CondensedOcp(const PredictionModel& model, MpcConfig cfg, const TruncationOrder& ord,
               std::optional<MatX> input_map = std::nullopt, bool input_box = false)
      : cfg_(std::move(cfg)), order_(ord) {
    cfg_.finalize(ord);
    H_ = cfg_.steps();
    n_ = model.Ad.rows();
    r_ = model.Bd.cols();
    L_ = input_map.value_or(MatX::Identity(r_, r_));
    m_ = L_.rows();
    if (m_ != ord.virtual_dim() || L_.cols() != r_) {
      throw InvalidArgument("CondensedOcp: input map has the wrong shape");
    }
    if (n_ != ord.dim()) throw InvalidArgument("CondensedOcp: model has the wrong state size");
    if (std::abs(model.dt - cfg_.dt) > 1e-12) throw InvalidArgument("CondensedOcp: dt mismatch");

    Phi_.resize(H_ * n_, n_);
    Gamma_ = MatX::Zero(H_ * n_, H_ * r_);
    drift_.resize(H_ * n_);
    MatX Ai = MatX::Identity(n_, n_);
    VecX c = VecX::Zero(n_);
    std::vector<MatX> AiB;  // Ad^i Bd
    for (int i = 0; i < H_; ++i) {
      AiB.push_back(Ai * model.Bd);
      c = model.Ad * c + model.cd;
      Ai = model.Ad * Ai;
      Phi_.middleRows(i * n_, n_) = Ai;
      drift_.segment(i * n_, n_) = c;
    }
    for (int i = 0; i < H_; ++i) {
      for (int j = 0; j <= i; ++j) Gamma_.block(i * n_, j * r_, n_, r_) = AiB[i - j];
    }

    MatX QG(H_ * n_, H_ * r_);
    for (int i = 0; i < H_; ++i) QG.middleRows(i * n_, n_) = cfg_.Q * Gamma_.middleRows(i * n_, n_);
    MatX P = Gamma_.transpose() * QG;
    LtR_ = L_.transpose() * cfg_.Rw;
    const MatX LtRL = LtR_ * L_;
    for (int i = 0; i < H_; ++i) P.block(i * r_, i * r_, r_, r_) += LtRL;
    P *= 2.0 * cfg_.dt;
    P = 0.5 * (P + P.transpose());
    QGt_ = QG.transpose();

    input_box_ = input_box;
    Eigen::Index rows = 0;
    if (input_box_) rows += H_ * r_;
    if (cfg_.state_box) rows += H_ * n_;
    MatX C(rows, H_ * r_);
    Eigen::Index row = 0;
    if (input_box_) {
      C.topRows(H_ * r_).setIdentity();
      row += H_ * r_;
    }
    if (cfg_.state_box) C.middleRows(row, H_ * n_) = Gamma_;

    QpSettings qs;
    qs.tolerance = cfg_.tolerance;
    qs.max_iterations = cfg_.max_iterations;
    solver_ = QpSolver(std::move(P), std::move(C), qs);
  }

  const MpcConfig& config() const { return cfg_; }
  int horizon_steps() const { return H_; }
  Eigen::Index input_dim() const { return r_; }
  Eigen::Index control_dim() const { return m_; }
  const MatX& input_map() const { return L_; }
  const MatX& hessian() const { return solver_.P(); }
  const MatX& prediction_free() const { return Phi_; }
  const MatX& prediction_forced() const { return Gamma_; }
  const QpSolver& qp() const { return solver_; }

  /// Gradient q and constant c of the objective 1/2 w^T P w + q^T w + c.
  std::pair<VecX, double> linear_term(const VecX& X0, const ReferenceWindow& refs) const {
    check_refs(refs);
    VecX E = Phi_ * X0 + drift_;  // free response minus reference
    VecX g(H_ * r_);
    double c = 0.0;
    for (int i = 0; i < H_; ++i) {
      E.segment(i * n_, n_) -= refs.X[static_cast<std::size_t>(i + 1)];
      const VecX& Ur = refs.U[static_cast<std::size_t>(i)];
      g.segment(i * r_, r_) = LtR_ * Ur;
      c += E.segment(i * n_, n_).dot(cfg_.Q * E.segment(i * n_, n_));
      c += Ur.dot(cfg_.Rw * Ur);
    }
    const VecX q = 2.0 * cfg_.dt * (QGt_ * E - g);
    return {q, cfg_.dt * c};
  }

  /// Predicted lifted states X_1..X_H for stacked decision variables.
  VecX predict(const VecX& X0, const VecX& W) const { return Phi_ * X0 + drift_ + Gamma_ * W; }

  double cost(const VecX& X0, const ReferenceWindow& refs, const VecX& W) const {
    const auto [q, c] = linear_term(X0, refs);
    return std::max(0.0, 0.5 * W.dot(solver_.P() * W) + q.dot(W) + c);
  }

  OcpSolution solve(const VecX& X0, const ReferenceWindow& refs,
                    const std::optional<InputBox>& box = std::nullopt,
                    const std::optional<VecX>& warm = std::nullopt) const {
    const auto start = std::chrono::steady_clock::now();
    if (X0.size() != n_) throw InvalidArgument("solve_ocp: X0 has the wrong length");
    const auto [q, c] = linear_term(X0, refs);

    VecX lower(solver_.num_constraints()), upper(solver_.num_constraints());
    Eigen::Index row = 0;
    if (input_box_) {
      if (!box) throw InvalidArgument("solve_ocp: input box configured but not supplied");
      if (box->lower.size() != r_ || box->upper.size() != r_) {
        throw InvalidArgument("solve_ocp: input box has the wrong size");
      }
      if (((box->lower - box->upper).array() > 0.0).any()) {
        throw InfeasibleBounds("solve_ocp: empty input box");
      }
      for (int i = 0; i < H_; ++i) {
        lower.segment(i * r_, r_) = box->lower;
        upper.segment(i * r_, r_) = box->upper;
      }
      row += H_ * r_;
    } else if (box) {
      throw InvalidArgument("solve_ocp: input box supplied but not configured");
    }
    if (cfg_.state_box) {
      const VecX free = Phi_ * X0 + drift_;
      for (int i = 0; i < H_; ++i) {
        lower.segment(row + i * n_, n_) = cfg_.state_box->lower - free.segment(i * n_, n_);
        upper.segment(row + i * n_, n_) = cfg_.state_box->upper - free.segment(i * n_, n_);
      }
    }

    const QpResult qp = solver_.solve(q, lower, upper, warm);
    OcpSolution out;
    out.W = qp.x;
    out.U.resize(H_ * m_);
    for (int i = 0; i < H_; ++i) out.U.segment(i * m_, m_) = L_ * qp.x.segment(i * r_, r_);
    out.iterations = qp.iterations;
    out.status = qp.status;
    out.stationarity = qp.stationarity_residual;
    out.primal_residual = qp.primal_residual;
    out.cost = std::max(0.0, 0.5 * qp.x.dot(solver_.P() * qp.x) + q.dot(qp.x) + c);
    out.solve_ms =
        std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
    return out;
  }

 private:
  void check_refs(const ReferenceWindow& refs) const {
    if (refs.X.size() < static_cast<std::size_t>(H_ + 1) ||
        refs.U.size() < static_cast<std::size_t>(H_)) {
      throw InvalidArgument("solve_ocp: reference window shorter than the horizon");
    }
  }

  MpcConfig cfg_;
  TruncationOrder order_;
  int H_ = 0;
  Eigen::Index n_ = 0;
  Eigen::Index r_ = 0;  // decision variables per step
  Eigen::Index m_ = 0;  // virtual controls per step
  MatX L_;
  MatX LtR_;
  MatX Phi_;
  MatX Gamma_;
  VecX drift_;
  MatX QGt_;  // Gamma^T Qbar
  bool input_box_ = false;
  QpSolver solver_;
};

/// One-shot solve of the virtual-control OCP on the discretized LTI model.
/// A configured control box is applied as its interval hull at `s`.
inline OcpSolution solve_ocp(const LiftedState& X0, const ReferenceWindow& refs,
                             const DiscreteLti& disc, const MpcConfig& cfg,
                             const std::optional<InputBox>& box = std::nullopt) {
  return CondensedOcp(PredictionModel::from(disc), cfg, X0.order, std::nullopt, box.has_value())
      .solve(X0.data, refs, box);
}

// ---------------------------------------------------------------------------
// Tracking tasks

struct ReferenceSample {
  Vec3 x = Vec3::Zero();
  Vec3 v = Vec3::Zero();
  Mat3 R = Mat3::Identity();
  Vec3 omega = Vec3::Zero();
};

struct TrackingTask {
  std::string name;
  std::function<Vec3(double)> x_ref;
  std::function<Vec3(double)> v_ref;  // empty: central differences of x_ref
  std::function<Mat3(double)> R_ref;  // empty: identity
  std::function<Vec3(double)> omega_ref;  // empty: zero
  std::function<PseudoControl(double, const QuadParams&)> u_ref;  // empty: hover thrust
  double duration = 0.0;
  QuadState initial;

  ReferenceSample at(double t) const {
    t = std::clamp(t, 0.0, duration);
    ReferenceSample r;
    r.x = x_ref(t);
    if (v_ref) {
      r.v = v_ref(t);
    } else {
      const double h = 1e-5;
      r.v = (x_ref(t + h) - x_ref(t - h)) / (2.0 * h);
    }
    if (R_ref) r.R = R_ref(t);
    if (omega_ref) r.omega = omega_ref(t);
    return r;
  }

  PseudoControl control_ref(double t, const QuadParams& p) const {
    if (u_ref) return u_ref(std::clamp(t, 0.0, duration), p);
    return {p.m * p.g, Vec3::Zero()};
  }

  void validate() const {
    if (!x_ref) throw InvalidArgument("task " + name + ": missing position reference");
    if (!(duration > 0.0)) throw InvalidArgument("task " + name + ": duration must be positive");
  }
};

inline TrackingTask helix_task(double duration = 60.0) {
  TrackingTask t;
  t.name = "helix";
  t.x_ref = [](double s) { return Vec3(s / 20.0, std::sin(s / 6.0), 2.0 * std::cos(s / 6.0)); };
  t.v_ref = [](double s) {
    return Vec3(1.0 / 20.0, std::cos(s / 6.0) / 6.0, -std::sin(s / 6.0) / 3.0);
  };
  t.duration = duration;
  t.initial.x = t.x_ref(0.0);
  t.initial.v = t.v_ref(0.0);
  return t;
}

inline TrackingTask torus_task(double duration = 60.0) {
  TrackingTask t;
  t.name = "torus";
  t.x_ref = [](double s) {
    return Vec3(std::sin(0.1 * s) + 2.0 * std::sin(0.2 * s),
                std::cos(0.1 * s) - 2.0 * std::cos(0.2 * s), -std::sin(0.3 * s));
  };
  t.v_ref = [](double s) {
    return Vec3(0.1 * std::cos(0.1 * s) + 0.4 * std::cos(0.2 * s),
                -0.1 * std::sin(0.1 * s) + 0.4 * std::sin(0.2 * s), -0.3 * std::cos(0.3 * s));
  };
  t.duration = duration;
  t.initial.x = t.x_ref(0.0);
  t.initial.v = t.v_ref(0.0);
  return t;
}

inline TrackingTask hover_task(double duration = 40.0) {
  TrackingTask t;
  t.name = "hover";
  t.x_ref = [](double) { return Vec3(1.0, 1.3, 2.0); };
  t.v_ref = [](double) { return Vec3::Zero(); };
  t.duration = duration;
  return t;
}

/// Built-in tasks by name; nullopt for unknown names. A nonpositive duration
/// keeps the task default.
inline std::optional<TrackingTask> builtin_task(const std::string& name, double duration = 0.0) {
  std::optional<TrackingTask> t;
  if (name == "helix") t = helix_task();
  if (name == "torus") t = torus_task();
  if (name == "hover") t = hover_task();
  if (t && duration > 0.0) t->duration = duration;
  return t;
}

inline QuadState reference_state(const ReferenceSample& r) { return {r.x, r.v, r.R, r.omega}; }

/// H + 1 lifted references starting at t. Times past the task end reuse the
/// final sample.
inline ReferenceWindow build_reference_window(const TrackingTask& task, double t, int H, double dt,
                                              const QuadParams& p, const TruncationOrder& ord) {
  ReferenceWindow w;
  w.X.reserve(static_cast<std::size_t>(H) + 1);
  w.U.reserve(static_cast<std::size_t>(H) + 1);
  for (int i = 0; i <= H; ++i) {
    const double ti = t + i * dt;
    const QuadState ref = reference_state(task.at(ti));
    w.X.push_back(lift(ref, p, ord).data);
    w.U.push_back(map_control_bounds(ref, task.control_ref(ti, p), p, ord));
  }
  return w;
}

// ---------------------------------------------------------------------------
// Closed loop

struct ClosedLoopRecord {
  double t = 0.0;
  QuadState state;
  BodyControl control;
  PseudoControl ubar;
  int qp_iterations = 0;
  double qp_ms = 0.0;
  QpStatus qp_status = QpStatus::Solved;
  double err_pos = 0.0;
  double err_vel = 0.0;
  double psi = 0.0;
};

struct TrackingSummary {
  double mean_err_pos = 0.0;
  double max_err_pos = 0.0;
  double mean_err_vel = 0.0;
  double max_err_vel = 0.0;
  double mean_normalized_err_pos = 0.0;  // |x - x_ref| / max(|x_ref|, 1)
  double max_psi = 0.0;
  double mean_qp_ms = 0.0;
  double max_qp_ms = 0.0;
  int max_qp_iterations = 0;
  int unconverged_solves = 0;
  std::optional<double> settle_time;  // first t after which err_pos stays below the band
};

struct ClosedLoopLog {
  std::string task;
  TruncationOrder order;
  double dt = 0.0;
  std::vector<ClosedLoopRecord> records;
  std::vector<Vec3> x_ref;  // reference position per record

  double max_psi_after(double t0) const {
    double m = 0.0;
    for (const auto& r : records) {
      if (r.t > t0) m = std::max(m, r.psi);
    }
    return m;
  }

  double max_err_pos_after(double t0) const {
    double m = 0.0;
    for (const auto& r : records) {
      if (r.t > t0) m = std::max(m, r.err_pos);
    }
    return m;
  }

  TrackingSummary summary(double settle_band = 0.05) const {
    TrackingSummary s;
    if (records.empty()) return s;
    const double n = static_cast<double>(records.size());
    std::optional<double> settle;
    for (std::size_t i = 0; i < records.size(); ++i) {
      const auto& r = records[i];
      s.mean_err_pos += r.err_pos / n;
      s.mean_err_vel += r.err_vel / n;
      s.mean_qp_ms += r.qp_ms / n;
      s.mean_normalized_err_pos += r.err_pos / std::max(1.0, x_ref[i].norm()) / n;
      s.max_err_pos = std::max(s.max_err_pos, r.err_pos);
      s.max_err_vel = std::max(s.max_err_vel, r.err_vel);
      s.max_psi = std::max(s.max_psi, r.psi);
      s.max_qp_ms = std::max(s.max_qp_ms, r.qp_ms);
      s.max_qp_iterations = std::max(s.max_qp_iterations, r.qp_iterations);
      s.unconverged_solves += r.qp_status != QpStatus::Solved;
      if (r.err_pos < settle_band) {
        if (!settle) settle = r.t;
      } else {
        settle.reset();
      }
    }
    s.settle_time = settle;
    return s;
  }
};

struct TrackingOptions {
  double plant_dt = 1e-3;
  bool bounds = false;
  PseudoControlBox control_box{{0.0, Vec3::Constant(-0.05)}, {40.0, Vec3::Constant(0.05)}};
  IntegratorOptions integrator{};
  bool warm_start = true;
};

namespace detail {

/// One controller evaluation: pseudo-control to apply plus solver diagnostics.
struct ControllerStep {
  PseudoControl ubar;
  OcpSolution sol;
  double ms = 0.0;
};

}  // namespace detail

/// Receding-horizon loop: lift the plant state, solve the OCP, recover the
/// pseudo-control from the first virtual control, hold the body control for
/// one sampling interval while integrating the plant. The recorded qp_ms
/// covers the whole controller evaluation, model update included.
inline ClosedLoopLog run_tracking(const TrackingTask& task, const QuadParams& p,
                                  const TruncationOrder& ord, MpcConfig cfg,
                                  const TrackingOptions& opts = {}) {
  task.validate();
  p.validate();
  if (opts.bounds && !cfg.control_box) cfg.control_box = opts.control_box;
  cfg.finalize(ord);
  const Mat3 J_inv = p.J_inv();
  const int H = cfg.steps();
  const int steps = static_cast<int>(std::lround(task.duration / cfg.dt));
  const int substeps = static_cast<int>(std::lround(cfg.dt / opts.plant_dt));
  if (substeps < 1 || std::abs(substeps * opts.plant_dt - cfg.dt) > 1e-9) {
    throw InvalidArgument("run_tracking: dt must be an integer multiple of the plant step");
  }
  const bool boxed = cfg.control_box.has_value();
  const MatX Bbar_t = build_Bbar(ord).transpose();

  std::optional<CondensedOcp> lti_ocp;
  if (cfg.mode == ControlMode::Virtual) {
    lti_ocp.emplace(PredictionModel::from(discretize(LtiSystem(ord), cfg.dt)), cfg, ord,
                    std::nullopt, boxed);
  }

  ClosedLoopLog log;
  log.task = task.name;
  log.order = ord;
  log.dt = cfg.dt;
  log.records.reserve(static_cast<std::size_t>(steps));

  QuadState s = task.initial;
  std::optional<VecX> warm;
  auto control_step = [&](double t) {
    const auto start = std::chrono::steady_clock::now();
    const ReferenceWindow refs = build_reference_window(task, t, H, cfg.dt, p, ord);
    const LiftedState X = lift(s, p, ord);
    detail::ControllerStep out;
    Eigen::Index r = 0;
    if (cfg.mode == ControlMode::Virtual) {
      std::optional<InputBox> box;
      if (boxed) box = virtual_control_box(s, *cfg.control_box, p, ord);
      out.sol = lti_ocp->solve(X.data, refs, box, warm);
      out.ubar = recover_control(s, out.sol.first(lti_ocp->control_dim()), p, ord);
      r = lti_ocp->input_dim();
    } else {
      const PseudoControl uc = task.control_ref(t, p);
      const MatX L = Bbar_t * build_B(InputBasis::from_lifted(X), p, ord);
      const CondensedOcp ocp(linearize_lpv(X, uc, p, cfg.dt), cfg, ord, L, boxed);
      std::optional<InputBox> box;
      if (boxed) box = pseudo_control_box(*cfg.control_box);
      out.sol = ocp.solve(X.data, refs, box, warm);
      out.ubar = recover_control(s, out.sol.first(ocp.control_dim()), p, ord);
      r = ocp.input_dim();
    }
    if (opts.warm_start) {
      VecX shifted = out.sol.W;
      shifted.head(shifted.size() - r) = out.sol.W.tail(shifted.size() - r);
      warm = shifted;
    }
    out.ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start)
                 .count();
    return out;
  };

  for (int k = 0; k < steps; ++k) {
    const double t = k * cfg.dt;
    const detail::ControllerStep c = control_step(t);
    const BodyControl u = pseudo_to_body(s, c.ubar, p);

    const ReferenceSample ref = task.at(t);
    ClosedLoopRecord rec;
    rec.t = t;
    rec.state = s;
    rec.control = u;
    rec.ubar = c.ubar;
    rec.qp_iterations = c.sol.iterations;
    rec.qp_ms = c.ms;
    rec.qp_status = c.sol.status;
    rec.err_pos = (s.x - ref.x).norm();
    rec.err_vel = (s.v - ref.v).norm();
    rec.psi = attitude_error(ref.R, s.R);
    log.records.push_back(rec);
    log.x_ref.push_back(ref.x);

    auto hold = [&u](double, const QuadState&) { return u; };
    for (int i = 0; i < substeps; ++i) {
      s = rk4_step(s, t + i * opts.plant_dt, opts.plant_dt, hold, p, J_inv,
                   opts.integrator.reorthonormalize);
    }
    if (!s.all_finite() || s.max_abs() > opts.integrator.blowup_guard) {
      throw NumericalBlowup("run_tracking: plant diverged at t = " + std::to_string(t + cfg.dt));
    }
  }
  return log;
}

}  // namespace koopquad
