#pragma once

#include <cmath>
#include <string>

#include "koopquad/se3.hpp"

namespace koopquad {

/// Chain lengths of the truncated observable dictionary: M blocks in each of
/// the position, velocity and gravity chains, N blocks in the attitude chain.
struct TruncationOrder {
  int M = 3;
  int N = 3;

  void validate() const {
    if (M < 1 || N < 1) {
      throw InvalidArgument("truncation order requires M >= 1 and N >= 1 (got M=" +
                            std::to_string(M) + ", N=" + std::to_string(N) + ")");
    }
  }

  int dim() const { return 9 * (M + N); }
  int virtual_dim() const { return 9 * (M + N) - 15; }

  // Offsets into the lifted vector, 1-based block index.
  // Layout: [p_1..p_M | y_1..y_M | h_1..h_M | z_1..z_N].
  int p_row(int k) const { return 3 * (k - 1); }
  int y_row(int k) const { return 3 * M + 3 * (k - 1); }
  int h_row(int k) const { return 6 * M + 3 * (k - 1); }
  int z_row(int j) const { return 9 * M + 9 * (j - 1); }

  // Offsets into the virtual control.
  // Layout: [u_h1..u_h(M-1) | u_y0..u_y(M-1) | u_p1..u_p(M-1) | u_a1..u_a(N-1)].
  int uh_col(int k) const { return 3 * (k - 1); }
  int uy_col(int k) const { return 3 * (M - 1) + 3 * k; }
  int up_col(int k) const { return 3 * (M - 1) + 3 * M + 3 * (k - 1); }
  int ua_col(int k) const { return 9 * M - 6 + 9 * (k - 1); }

  friend bool operator==(const TruncationOrder&, const TruncationOrder&) = default;
};

/// Inertial acceleration lifted by the h-chain. Negative sign so that
/// d/dt(R^T v) = Omega^T R^T v + h_1 + f e3 / m matches the plant.
inline Vec3 gravity_observable(const QuadParams& p) { return Vec3(0.0, 0.0, -p.g); }

struct LiftedState {
  TruncationOrder order;
  VecX data;

  LiftedState() = default;
  LiftedState(const TruncationOrder& ord, VecX values) : order(ord), data(std::move(values)) {
    if (data.size() != order.dim()) throw InvalidArgument("lifted state has wrong length");
  }

  auto p(int k) const { return data.segment<3>(order.p_row(k)); }
  auto y(int k) const { return data.segment<3>(order.y_row(k)); }
  auto h(int k) const { return data.segment<3>(order.h_row(k)); }
  auto z(int j) const { return data.segment<9>(order.z_row(j)); }
};

/// Evaluates the observable dictionary at a state:
///   p_k = (Omega^T)^{k-1} R^T x,  y_k = (Omega^T)^{k-1} R^T v,
///   h_k = (Omega^T)^{k-1} R^T gamma,  z_j = vec(R Omega^{j-1}).
inline LiftedState lift(const QuadState& s, const QuadParams& p, const TruncationOrder& ord) {
  ord.validate();
  LiftedState X{ord, VecX::Zero(ord.dim())};
  const Mat3 Omega = hat(s.omega);
  const Mat3 Omega_t = Omega.transpose();

  Vec3 pk = s.R.transpose() * s.x;
  Vec3 yk = s.R.transpose() * s.v;
  Vec3 hk = s.R.transpose() * gravity_observable(p);
  for (int k = 1; k <= ord.M; ++k) {
    X.data.segment<3>(ord.p_row(k)) = pk;
    X.data.segment<3>(ord.y_row(k)) = yk;
    X.data.segment<3>(ord.h_row(k)) = hk;
    pk = Omega_t * pk;
    yk = Omega_t * yk;
    hk = Omega_t * hk;
  }
  Mat3 Zj = s.R;
  for (int j = 1; j <= ord.N; ++j) {
    X.data.segment<9>(ord.z_row(j)) = vec(Zj);
    Zj = Zj * Omega;
  }
  return X;
}

inline LiftedState lift_reference(const Vec3& x_ref, const Vec3& v_ref, const Mat3& R_ref,
                                  const Vec3& omega_ref, const QuadParams& p,
                                  const TruncationOrder& ord) {
  return lift(QuadState{x_ref, v_ref, R_ref, omega_ref}, p, ord);
}

/// Recovers the physical state from the leading blocks:
/// R = unvec(z_1), omega = vee(R^T unvec(z_2)), x = R p_1, v = R y_1.
inline QuadState unlift(const LiftedState& X, double rotation_tol = 1e-6) {
  const TruncationOrder& ord = X.order;
  if (ord.N < 2) throw NeedsN2("unlift: angular velocity needs at least two attitude blocks");
  const Mat3 R = unvec(X.z(1));
  if (!R.allFinite() || (R.transpose() * R - Mat3::Identity()).norm() > rotation_tol ||
      std::abs(R.determinant() - 1.0) > rotation_tol) {
    throw InvalidRotation("unlift: z_1 does not reshape to a rotation matrix");
  }
  const Mat3 Omega = R.transpose() * unvec(X.z(2));
  const double skew_tol = rotation_tol * std::max(1.0, Omega.norm());
  if ((Omega + Omega.transpose()).norm() > skew_tol) {
    throw InvalidRotation("unlift: R^T unvec(z_2) is not skew-symmetric");
  }
  QuadState s;
  s.R = R;
  s.omega = vee(0.5 * (Omega - Omega.transpose()), skew_tol);
  s.x = R * X.p(1);
  s.v = R * X.y(1);
  return s;
}

/// Terms dropped by truncation at a state.
///
/// `omitted_*` are the next observables past the retained chains. The
/// `terminal_*` vectors are what the truncated model misses on its last
/// block-rows: the position and velocity terminal rows of A are empty, so
/// they also lose the y_M and h_M couplings respectively.
struct ResidualReport {
  TruncationOrder order;
  Vec3 omitted_p = Vec3::Zero();  // p_{M+1}
  Vec3 omitted_y = Vec3::Zero();  // y_{M+1}
  Vec3 omitted_h = Vec3::Zero();  // h_{M+1}
  Vec9 omitted_z = Vec9::Zero();  // z_{N+1}
  Vec3 terminal_p = Vec3::Zero();
  Vec3 terminal_y = Vec3::Zero();
  Vec3 terminal_h = Vec3::Zero();
  Vec9 terminal_z = Vec9::Zero();

  /// Residual laid out as a full lifted-space vector (zero off the terminal rows).
  VecX as_lifted_vector() const {
    VecX r = VecX::Zero(order.dim());
    r.segment<3>(order.p_row(order.M)) = terminal_p;
    r.segment<3>(order.y_row(order.M)) = terminal_y;
    r.segment<3>(order.h_row(order.M)) = terminal_h;
    r.segment<9>(order.z_row(order.N)) = terminal_z;
    return r;
  }
};

/// Truncation residual on the terminal block-rows. The control enters the
/// lifted evolution only through the retained input matrix, so `ubar` does
/// not change the result; it is part of the signature to mirror the
/// derivative it corrects.
inline ResidualReport residual_blocks(const QuadState& s, const PseudoControl& /*ubar*/,
                                      const QuadParams& p, const TruncationOrder& ord) {
  const TruncationOrder extended{ord.M + 1, ord.N + 1};
  const LiftedState Xe = lift(s, p, extended);
  ResidualReport r;
  r.order = ord;
  r.omitted_p = Xe.p(ord.M + 1);
  r.omitted_y = Xe.y(ord.M + 1);
  r.omitted_h = Xe.h(ord.M + 1);
  r.omitted_z = Xe.z(ord.N + 1);
  r.terminal_p = r.omitted_p + Xe.y(ord.M);
  r.terminal_y = r.omitted_y + Xe.h(ord.M);
  r.terminal_h = r.omitted_h;
  r.terminal_z = r.omitted_z;
  return r;
}

/// Rescales omega by sqrt(2) * omega_max so the result has norm <= 1/sqrt(2)
/// whenever |omega| <= omega_max.
inline Vec3 normalize_omega(const Vec3& omega, double omega_max) {
  if (!(omega_max > 0.0)) throw InvalidArgument("normalize_omega: omega_max must be positive");
  return omega / (std::sqrt(2.0) * omega_max);
}

}  // namespace koopquad
