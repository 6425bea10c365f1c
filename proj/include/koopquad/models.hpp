#pragma once

#include <vector>

#include "koopquad/lift.hpp"

namespace koopquad {

/// Constant drift matrix of the truncated lifted system, block-diagonal in
/// the translational chains [p|y|h] and the attitude chain z.
///
/// Non-terminal rows: p_k' <- p_{k+1} + y_k, y_k' <- y_{k+1} + h_k,
/// h_k' <- h_{k+1}, z_j' <- z_{j+1}. The terminal rows p_M, y_M, h_M and z_N
/// are empty, so A has 9(M+N-2) nonzero rows and is nilpotent.
inline MatX build_A(const TruncationOrder& ord) {
  ord.validate();
  MatX A = MatX::Zero(ord.dim(), ord.dim());
  const Mat3 I3 = Mat3::Identity();
  for (int k = 1; k < ord.M; ++k) {
    A.block<3, 3>(ord.p_row(k), ord.p_row(k + 1)) = I3;
    A.block<3, 3>(ord.p_row(k), ord.y_row(k)) = I3;
    A.block<3, 3>(ord.y_row(k), ord.y_row(k + 1)) = I3;
    A.block<3, 3>(ord.y_row(k), ord.h_row(k)) = I3;
    A.block<3, 3>(ord.h_row(k), ord.h_row(k + 1)) = I3;
  }
  for (int j = 1; j < ord.N; ++j) {
    A.block<9, 9>(ord.z_row(j), ord.z_row(j + 1)).setIdentity();
  }
  return A;
}

/// Smallest q with A^q = 0 for build_A(ord).
inline int nilpotency_index(const TruncationOrder& ord) {
  // Longest path in the coupling graph: p_1 -> y_1 -> h_1 -> h_2 -> ... -> h_{M-1},
  // or along a single chain; plus one for the final zero row.
  const int translational = ord.M >= 2 ? (ord.M - 1) + 2 + 1 : 1;
  return std::max(translational, ord.N);
}

/// Quantities the input matrix depends on, extracted either from a physical
/// state or directly from a lifted vector.
struct InputBasis {
  Mat3 R = Mat3::Identity();
  Mat3 Omega = Mat3::Zero();
  Vec3 p1 = Vec3::Zero();
  Vec3 y1 = Vec3::Zero();
  Vec3 h1 = Vec3::Zero();

  static InputBasis from_state(const QuadState& s, const QuadParams& p) {
    return {s.R, hat(s.omega), s.R.transpose() * s.x, s.R.transpose() * s.v,
            s.R.transpose() * gravity_observable(p)};
  }

  /// Reads R from z_1 and Omega from R^{-1} z_2 (skew part). Used when
  /// propagating the lifted model on its own, where z_1 drifts off SO(3).
  static InputBasis from_lifted(const LiftedState& X) {
    if (X.order.N < 2) throw NeedsN2("input basis needs at least two attitude blocks");
    InputBasis b;
    b.R = unvec(X.z(1));
    const Mat3 W = b.R.partialPivLu().solve(unvec(X.z(2)));
    b.Omega = 0.5 * (W - W.transpose());
    b.p1 = X.p(1);
    b.y1 = X.y(1);
    b.h1 = X.h(1);
    return b;
  }
};

/// The per-chain blocks of the state-dependent input matrix.
///
/// For k = 0..M-1 the row-block of chain c at index k+1 is
///   [0 | C_k] with C_k = sum_{i=1}^{k} (Omega^T)^{i-1} hat((Omega^T)^{k-i} c_1) J^{-1}
/// for c in {p, y, h}; the y rows also carry thrust (Omega^T)^k e3 / m.
/// For k = 0..N-1 the z row-block at k+1 is [0 | G_k] with column m equal to
///   vec(R sum_{i=1}^{k} Omega^{i-1} hat(j_m) Omega^{k-i}), j_m = J^{-1} e_m.
struct InputBlocks {
  std::vector<Vec3> thrust;  // thrust[k] = sigma_{k+1} e3 / m, k = 0..M-1
  std::vector<Mat3> P, Y, H;  // index k = 0..M-1
  std::vector<Mat93> G;       // index k = 0..N-1

  InputBlocks(const InputBasis& b, const Mat3& J_inv, double mass, const TruncationOrder& ord) {
    const int M = ord.M;
    const int N = ord.N;
    const Mat3 Omega_t = b.Omega.transpose();

    // Powers (Omega^T)^n and Omega^n for n = 0..max(M, N).
    const int max_pow = std::max(M, N) + 1;
    std::vector<Mat3> pow_t(max_pow + 1), pow(max_pow + 1);
    pow_t[0] = pow[0] = Mat3::Identity();
    for (int n = 1; n <= max_pow; ++n) {
      pow_t[n] = pow_t[n - 1] * Omega_t;
      pow[n] = pow[n - 1] * b.Omega;
    }

    thrust.resize(M);
    for (int k = 0; k < M; ++k) thrust[k] = pow_t[k].col(2) / mass;

    auto chain_block = [&](const Vec3& c1, int k) {
      Mat3 S = Mat3::Zero();
      for (int i = 1; i <= k; ++i) S += pow_t[i - 1] * hat(pow_t[k - i] * c1);
      return Mat3(S * J_inv);
    };
    P.resize(M);
    Y.resize(M);
    H.resize(M);
    for (int k = 0; k < M; ++k) {
      P[k] = chain_block(b.p1, k);
      Y[k] = chain_block(b.y1, k);
      H[k] = chain_block(b.h1, k);
    }

    G.resize(N);
    for (int k = 0; k < N; ++k) {
      G[k].setZero();
      for (int m = 0; m < 3; ++m) {
        const Mat3 jm_hat = hat(J_inv.col(m));
        Mat3 S = Mat3::Zero();
        for (int i = 1; i <= k; ++i) S += pow[i - 1] * jm_hat * pow[k - i];
        G[k].col(m) = vec(b.R * S);
      }
    }
  }
};

inline MatX assemble_B(const InputBlocks& blk, const TruncationOrder& ord) {
  MatX B = MatX::Zero(ord.dim(), 4);
  for (int k = 0; k < ord.M; ++k) {
    B.block<3, 1>(ord.y_row(k + 1), 0) = blk.thrust[k];
    B.block<3, 3>(ord.p_row(k + 1), 1) = blk.P[k];
    B.block<3, 3>(ord.y_row(k + 1), 1) = blk.Y[k];
    B.block<3, 3>(ord.h_row(k + 1), 1) = blk.H[k];
  }
  for (int k = 0; k < ord.N; ++k) B.block<9, 3>(ord.z_row(k + 1), 1) = blk.G[k];
  return B;
}

/// State-dependent input matrix of the lifted system, rows ordered like the
/// lifted vector. Throws SingularInertia when J cannot be inverted.
inline MatX build_B(const QuadState& s, const QuadParams& p, const TruncationOrder& ord) {
  ord.validate();
  return assemble_B(InputBlocks(InputBasis::from_state(s, p), p.J_inv(), p.m, ord), ord);
}

inline MatX build_B(const InputBasis& basis, const QuadParams& p, const TruncationOrder& ord) {
  ord.validate();
  return assemble_B(InputBlocks(basis, p.J_inv(), p.m, ord), ord);
}

/// Constant 0/1 selector routing each virtual-control component to the
/// lifted row where its block acts: u_h(k) -> h_{k+1}, u_y(k) -> y_{k+1},
/// u_p(k) -> p_{k+1}, u_a(k) -> z_{k+1}.
inline MatX build_Bbar(const TruncationOrder& ord) {
  ord.validate();
  if (ord.M < 2 || ord.N < 2) throw InvalidArgument("build_Bbar requires M >= 2 and N >= 2");
  MatX Bbar = MatX::Zero(ord.dim(), ord.virtual_dim());
  for (int k = 1; k < ord.M; ++k) {
    Bbar.block<3, 3>(ord.h_row(k + 1), ord.uh_col(k)).setIdentity();
    Bbar.block<3, 3>(ord.p_row(k + 1), ord.up_col(k)).setIdentity();
  }
  for (int k = 0; k < ord.M; ++k) {
    Bbar.block<3, 3>(ord.y_row(k + 1), ord.uy_col(k)).setIdentity();
  }
  for (int k = 1; k < ord.N; ++k) {
    Bbar.block<9, 9>(ord.z_row(k + 1), ord.ua_col(k)).setIdentity();
  }
  return Bbar;
}

/// Gathers the virtual control from a lifted input image B * ubar.
inline VecX gather_virtual(const VecX& Bu, const TruncationOrder& ord) {
  VecX U(ord.virtual_dim());
  for (int k = 1; k < ord.M; ++k) {
    U.segment<3>(ord.uh_col(k)) = Bu.segment<3>(ord.h_row(k + 1));
    U.segment<3>(ord.up_col(k)) = Bu.segment<3>(ord.p_row(k + 1));
  }
  for (int k = 0; k < ord.M; ++k) U.segment<3>(ord.uy_col(k)) = Bu.segment<3>(ord.y_row(k + 1));
  for (int k = 1; k < ord.N; ++k) U.segment<9>(ord.ua_col(k)) = Bu.segment<9>(ord.z_row(k + 1));
  return U;
}

inline VecX pack_virtual(const QuadState& s, const PseudoControl& ubar, const QuadParams& p,
                         const TruncationOrder& ord) {
  if (ord.M < 2 || ord.N < 2) throw InvalidArgument("pack_virtual requires M >= 2 and N >= 2");
  return gather_virtual(build_B(s, p, ord) * ubar.as_vector(), ord);
}

/// Relative singular-value cutoff below which B is treated as rank deficient.
inline constexpr double kRecoveryRankTol = 1e-10;

/// Least-squares pseudo-control: argmin |B ubar - Bbar U|^2 via SVD of B.
inline PseudoControl recover_control_with(const MatX& B, const MatX& Bbar, const VecX& U) {
  Eigen::JacobiSVD<MatX> svd(B, Eigen::ComputeThinU | Eigen::ComputeThinV);
  const auto& sv = svd.singularValues();
  if (sv(0) == 0.0 || sv(sv.size() - 1) < kRecoveryRankTol * sv(0)) {
    throw RankDeficient("recover_control: input matrix lost column rank");
  }
  const Vec4 u = svd.solve(Bbar * U);
  return PseudoControl::from_vector(u);
}

inline PseudoControl recover_control(const QuadState& s, const VecX& U, const QuadParams& p,
                                     const TruncationOrder& ord) {
  if (U.size() != ord.virtual_dim()) throw InvalidArgument("virtual control has wrong length");
  return recover_control_with(build_B(s, p, ord), build_Bbar(ord), U);
}

/// Image of a pseudo-control bound in virtual-control space, Bbar^+ B ubar_b.
inline VecX map_control_bounds(const QuadState& s, const PseudoControl& ubar_b,
                               const QuadParams& p, const TruncationOrder& ord) {
  const MatX Bbar = build_Bbar(ord);
  return Bbar.colPivHouseholderQr().solve(build_B(s, p, ord) * ubar_b.as_vector());
}

/// Truncated lifted LPV model X' = A X + B(X) ubar.
class LpvSystem {
 public:
  LpvSystem(const QuadParams& params, const TruncationOrder& ord)
      : params_(params), order_(ord), A_(build_A(ord)), J_inv_(params.J_inv()) {}

  const QuadParams& params() const { return params_; }
  const TruncationOrder& order() const { return order_; }
  const MatX& A() const { return A_; }

  MatX B(const QuadState& s) const {
    return assemble_B(InputBlocks(InputBasis::from_state(s, params_), J_inv_, params_.m, order_),
                      order_);
  }
  MatX B(const LiftedState& X) const {
    return assemble_B(InputBlocks(InputBasis::from_lifted(X), J_inv_, params_.m, order_), order_);
  }

  /// Right-hand side with B evaluated at the lifted vector itself.
  VecX derivative(const LiftedState& X, const PseudoControl& ubar) const {
    return A_ * X.data + B(X) * ubar.as_vector();
  }

 private:
  QuadParams params_;
  TruncationOrder order_;
  MatX A_;
  Mat3 J_inv_;
};

/// A lift(s) + B(s) ubar.
inline VecX lpv_derivative(const QuadState& s, const PseudoControl& ubar, const LpvSystem& sys) {
  return sys.A() * lift(s, sys.params(), sys.order()).data + sys.B(s) * ubar.as_vector();
}

/// Lifted LTI approximation X' = A X + Bbar U.
struct LtiSystem {
  TruncationOrder order;
  MatX A;
  MatX Bbar;

  explicit LtiSystem(const TruncationOrder& ord)
      : order(ord), A(build_A(ord)), Bbar(build_Bbar(ord)) {}
};

}  // namespace koopquad
