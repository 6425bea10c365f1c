#pragma once

#include <cmath>
#include <string>
#include <type_traits>
#include <vector>

#include "koopquad/types.hpp"

namespace koopquad {

/// Skew-symmetric matrix with hat(v) * q == v.cross(q).
inline Mat3 hat(const Vec3& v) {
  Mat3 S;
  S << 0.0, -v.z(), v.y(),
       v.z(), 0.0, -v.x(),
       -v.y(), v.x(), 0.0;
  return S;
}

/// Inverse of hat(). Throws NonSkewError when S + S^T is not zero within tol.
inline Vec3 vee(const Mat3& S, double tol = 1e-9) {
  if ((S + S.transpose()).norm() > tol) {
    throw NonSkewError("vee: matrix is not skew-symmetric");
  }
  return Vec3(S(2, 1), S(0, 2), S(1, 0));
}

/// Column-major vectorization. Every z-chain quantity goes through these two.
inline Vec9 vec(const Mat3& A) { return Eigen::Map<const Vec9>(A.data()); }

inline Mat3 unvec(const Eigen::Ref<const Vec9>& a) {
  Mat3 A;
  Eigen::Map<Vec9>(A.data()) = a;
  return A;
}

inline bool is_rotation(const Mat3& R, double tol = 1e-9) {
  return (R.transpose() * R - Mat3::Identity()).norm() < tol &&
         std::abs(R.determinant() - 1.0) < tol;
}

/// Nearest rotation in Frobenius norm (polar factor).
inline Mat3 project_to_so3(const Mat3& A) {
  Eigen::JacobiSVD<Mat3> svd(A, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Mat3 U = svd.matrixU();
  const Mat3& V = svd.matrixV();
  if ((U * V.transpose()).determinant() < 0.0) U.col(2) *= -1.0;
  return U * V.transpose();
}

/// Chordal attitude distance trace(I - Ra^T Rb) / 2, in [0, 2] on SO(3).
/// Evaluated as |Ra - Rb|_F^2 / 4 so it never rounds below zero.
inline double attitude_error(const Mat3& Ra, const Mat3& Rb) {
  return 0.25 * (Ra - Rb).squaredNorm();
}

struct QuadParams {
  double m = 0.904;
  Mat3 J = Eigen::Vector3d(0.0023, 0.0026, 0.0032).asDiagonal();
  double g = 9.81;

  Mat3 J_inv() const {
    Eigen::FullPivLU<Mat3> lu(J);
    if (!lu.isInvertible()) throw SingularInertia("inertia matrix J is singular");
    return lu.inverse();
  }

  void validate() const {
    if (!(m > 0.0) || !std::isfinite(m)) throw InvalidArgument("mass must be positive");
    if (!(g >= 0.0) || !std::isfinite(g)) throw InvalidArgument("gravity must be non-negative");
    if ((J - J.transpose()).norm() > 1e-12 * J.norm()) {
      throw InvalidArgument("inertia matrix must be symmetric");
    }
    Eigen::SelfAdjointEigenSolver<Mat3> es(J);
    if (es.eigenvalues().minCoeff() <= 0.0) {
      throw SingularInertia("inertia matrix must be positive definite");
    }
  }
};

struct QuadState {
  Vec3 x = Vec3::Zero();      // inertial position [m]
  Vec3 v = Vec3::Zero();      // inertial velocity [m/s]
  Mat3 R = Mat3::Identity();  // body -> inertial
  Vec3 omega = Vec3::Zero();  // body angular velocity [rad/s]

  double max_abs() const {
    return std::max({x.cwiseAbs().maxCoeff(), v.cwiseAbs().maxCoeff(),
                     R.cwiseAbs().maxCoeff(), omega.cwiseAbs().maxCoeff()});
  }
  bool all_finite() const {
    return x.allFinite() && v.allFinite() && R.allFinite() && omega.allFinite();
  }
};

struct QuadStateDerivative {
  Vec3 x_dot = Vec3::Zero();
  Vec3 v_dot = Vec3::Zero();
  Mat3 R_dot = Mat3::Zero();
  Vec3 omega_dot = Vec3::Zero();
};

struct BodyControl {
  double f = 0.0;
  Vec3 M = Vec3::Zero();
};

/// Thrust plus gyroscopically compensated moment Mbar = M - omega x J omega.
struct PseudoControl {
  double f = 0.0;
  Vec3 Mbar = Vec3::Zero();

  Vec4 as_vector() const { return Vec4(f, Mbar.x(), Mbar.y(), Mbar.z()); }
  static PseudoControl from_vector(const Eigen::Ref<const Vec4>& u) {
    return {u(0), u.tail<3>()};
  }
};

inline PseudoControl body_to_pseudo(const QuadState& s, const BodyControl& u, const QuadParams& p) {
  return {u.f, u.M - s.omega.cross(p.J * s.omega)};
}

inline BodyControl pseudo_to_body(const QuadState& s, const PseudoControl& ubar,
                                  const QuadParams& p) {
  return {ubar.f, ubar.Mbar + s.omega.cross(p.J * s.omega)};
}

namespace detail {

inline QuadStateDerivative derivative_pseudo(const QuadState& s, const PseudoControl& ubar,
                                             const QuadParams& p, const Mat3& J_inv) {
  QuadStateDerivative d;
  d.x_dot = s.v;
  d.v_dot = -p.g * Vec3::UnitZ() + (ubar.f / p.m) * s.R.col(2);
  d.R_dot = s.R * hat(s.omega);
  d.omega_dot = J_inv * ubar.Mbar;
  return d;
}

inline QuadState advance(const QuadState& s, const QuadStateDerivative& d, double h) {
  QuadState out;
  out.x = s.x + h * d.x_dot;
  out.v = s.v + h * d.v_dot;
  out.R = s.R + h * d.R_dot;
  out.omega = s.omega + h * d.omega_dot;
  return out;
}

}  // namespace detail

/// Rigid-body quadrotor vector field: x' = v, v' = -g e3 + (f/m) R e3,
/// R' = R hat(omega), omega' = J^{-1} (M - omega x J omega).
inline QuadStateDerivative quad_derivative(const QuadState& s, const BodyControl& u,
                                           const QuadParams& p) {
  return detail::derivative_pseudo(s, body_to_pseudo(s, u, p), p, p.J_inv());
}

struct IntegratorOptions {
  double blowup_guard = 1e6;
  bool reorthonormalize = true;
};

/// One classical RK4 step. `control(t, state)` returns the BodyControl applied
/// at each stage; holding it constant over the step is the caller's choice.
template <typename ControlFn>
QuadState rk4_step(const QuadState& s, double t, double dt, ControlFn&& control,
                   const QuadParams& p, const Mat3& J_inv, bool reorthonormalize = true) {
  auto f = [&](const QuadState& q, double tq) {
    return detail::derivative_pseudo(q, body_to_pseudo(q, control(tq, q), p), p, J_inv);
  };
  const double h2 = 0.5 * dt;
  const QuadStateDerivative k1 = f(s, t);
  const QuadStateDerivative k2 = f(detail::advance(s, k1, h2), t + h2);
  const QuadStateDerivative k3 = f(detail::advance(s, k2, h2), t + h2);
  const QuadStateDerivative k4 = f(detail::advance(s, k3, dt), t + dt);

  QuadState out;
  out.x = s.x + dt / 6.0 * (k1.x_dot + 2.0 * k2.x_dot + 2.0 * k3.x_dot + k4.x_dot);
  out.v = s.v + dt / 6.0 * (k1.v_dot + 2.0 * k2.v_dot + 2.0 * k3.v_dot + k4.v_dot);
  out.R = s.R + dt / 6.0 * (k1.R_dot + 2.0 * k2.R_dot + 2.0 * k3.R_dot + k4.R_dot);
  out.omega = s.omega +
              dt / 6.0 * (k1.omega_dot + 2.0 * k2.omega_dot + 2.0 * k3.omega_dot + k4.omega_dot);
  if (reorthonormalize) out.R = project_to_so3(out.R);
  return out;
}

namespace detail {

template <typename ControlFn>
auto as_state_control(ControlFn&& control) {
  return [&control](double t, const QuadState& s) -> BodyControl {
    if constexpr (std::is_invocable_r_v<BodyControl, ControlFn, double, const QuadState&>) {
      return control(t, s);
    } else {
      (void)s;
      return control(t);
    }
  };
}

}  // namespace detail

/// Fixed-step RK4 propagation of the quadrotor from `s0`, starting at time t0.
/// Returns steps + 1 samples; sample i is at time t0 + i * dt. `control` may
/// take (t) or (t, state).
template <typename ControlFn>
std::vector<QuadState> integrate(const QuadState& s0, ControlFn&& control, double dt, int steps,
                                 const QuadParams& p, const IntegratorOptions& opts = {},
                                 double t0 = 0.0) {
  if (!(dt > 0.0)) throw InvalidArgument("integrate: dt must be positive");
  if (steps < 0) throw InvalidArgument("integrate: negative step count");
  const Mat3 J_inv = p.J_inv();
  auto ctrl = detail::as_state_control(control);

  std::vector<QuadState> traj;
  traj.reserve(static_cast<std::size_t>(steps) + 1);
  traj.push_back(s0);
  QuadState s = s0;
  for (int i = 0; i < steps; ++i) {
    s = rk4_step(s, t0 + i * dt, dt, ctrl, p, J_inv, opts.reorthonormalize);
    if (!s.all_finite() || s.max_abs() > opts.blowup_guard) {
      throw NumericalBlowup("integrate: state exceeded guard at t = " +
                            std::to_string(t0 + (i + 1) * dt));
    }
    traj.push_back(s);
  }
  return traj;
}

}  // namespace koopquad
