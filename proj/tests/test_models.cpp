#include <gtest/gtest.h>

#include "koopquad/models.hpp"
#include "test_support.hpp"

using namespace koopquad;
using koopquad::testing::Rng;

namespace {

int nonzero_rows(const MatX& A) {
  int n = 0;
  for (int r = 0; r < A.rows(); ++r) n += A.row(r).cwiseAbs().maxCoeff() > 0.0;
  return n;
}

// Smallest q with A^q == 0, by repeated multiplication.
int numeric_nilpotency(const MatX& A) {
  MatX P = A;
  for (int q = 1; q <= A.rows() + 1; ++q) {
    if (P.cwiseAbs().maxCoeff() == 0.0) return q;
    P = P * A;
  }
  return -1;
}

}  // namespace

TEST(BuildA, AttitudeShift) {
  const TruncationOrder ord{3, 3};
  const MatX A = build_A(ord);
  Rng rng(20);
  VecX X = VecX::Zero(ord.dim());
  X.tail(27).setRandom();
  const VecX AX = A * X;
  EXPECT_EQ(AX.segment<9>(ord.z_row(1)), X.segment<9>(ord.z_row(2)));
  EXPECT_EQ(AX.segment<9>(ord.z_row(2)), X.segment<9>(ord.z_row(3)));
  EXPECT_EQ(AX.segment<9>(ord.z_row(3)).norm(), 0.0);
}

TEST(BuildA, NilpotentStructure) {
  for (int M = 1; M <= 6; ++M) {
    for (int N = 1; N <= 6; ++N) {
      const TruncationOrder ord{M, N};
      const MatX A = build_A(ord);
      const int q = numeric_nilpotency(A);
      EXPECT_EQ(q, nilpotency_index(ord)) << M << "," << N;
      EXPECT_LE(q, std::max(2 * M, N));
      EXPECT_EQ(nonzero_rows(A), 9 * (M + N - 2)) << M << "," << N;
      // upper triangular with zero diagonal
      EXPECT_EQ(MatX(A.triangularView<Eigen::Lower>()).cwiseAbs().maxCoeff(), 0.0);
    }
  }
  const MatX A = build_A({3, 3});
  EXPECT_EQ(A.rows(), 54);
  Eigen::JacobiSVD<MatX> svd(A);
  const auto& sv = svd.singularValues();
  int rank = 0;
  for (int i = 0; i < sv.size(); ++i) rank += sv(i) > 1e-9 * sv(0);
  EXPECT_EQ(rank, 36);
}

TEST(BuildB, IdentityAttitudeBlocks) {
  QuadParams p;
  const TruncationOrder ord{3, 3};
  const MatX B = build_B(QuadState{}, p, ord);
  ASSERT_EQ(B.rows(), 54);
  ASSERT_EQ(B.cols(), 4);
  EXPECT_TRUE((B.block<3, 1>(ord.y_row(1), 0).isApprox(Vec3::UnitZ() / p.m)));
  EXPECT_EQ((B.block<3, 3>(ord.y_row(1), 1).norm()), 0.0);

  const Mat3 Ji = p.J_inv();
  const Mat93 G1 = B.block<9, 3>(ord.z_row(2), 1);
  for (int m = 0; m < 3; ++m) EXPECT_TRUE(G1.col(m).isApprox(vec(hat(Ji.col(m)))));
  EXPECT_EQ(B.col(0).segment<9>(ord.z_row(2)).norm(), 0.0);
}

TEST(BuildB, ZeroOmegaH1) {
  QuadParams p;
  Rng rng(21);
  QuadState s = koopquad::testing::random_state(rng);
  s.omega.setZero();
  const TruncationOrder ord{3, 3};
  const MatX B = build_B(s, p, ord);
  const Vec3 h1 = s.R.transpose() * gravity_observable(p);
  EXPECT_LT((B.block<3, 3>(ord.h_row(2), 1) - hat(h1) * p.J_inv()).norm(), 1e-12);
  EXPECT_EQ((B.block<3, 3>(ord.h_row(3), 1).norm()), 0.0);
}

TEST(BuildB, SingularInertia) {
  QuadParams p;
  p.J = Vec3(0.0023, 0.0, 0.0032).asDiagonal();
  EXPECT_THROW(build_B(QuadState{}, p, {3, 3}), SingularInertia);
}

TEST(BuildB, MatchesFlowDerivative) {
  QuadParams p;
  Rng rng(22);
  const TruncationOrder ord{4, 3};
  const LpvSystem sys(p, ord);
  for (int trial = 0; trial < 30; ++trial) {
    const QuadState s = koopquad::testing::random_state(rng);
    const PseudoControl u = koopquad::testing::random_pseudo(rng);
    const VecX fd_u = koopquad::testing::flow_derivative_of_lift(s, u, p, ord);
    const VecX fd_0 = koopquad::testing::flow_derivative_of_lift(s, {}, p, ord);
    const VecX Bu = sys.B(s) * u.as_vector();
    EXPECT_LT((fd_u - fd_0 - Bu).norm(), 1e-6 * std::max(1.0, Bu.norm()));
  }
}

TEST(LpvDerivative, SpecialStates) {
  QuadParams p;
  const TruncationOrder ord{3, 3};
  const LpvSystem sys(p, ord);
  const VecX hover = lpv_derivative(QuadState{}, {p.m * p.g, Vec3::Zero()}, sys);
  EXPECT_LT(hover.segment<3>(ord.y_row(1)).norm(), 1e-14);
  const VecX fall = lpv_derivative(QuadState{}, {}, sys);
  EXPECT_EQ(Vec3(fall.segment<3>(ord.y_row(1))), gravity_observable(p));
}

TEST(LpvDerivative, MatchesFlowPlusResidual) {
  QuadParams p;
  Rng rng(23);
  for (const TruncationOrder ord : {TruncationOrder{3, 3}, TruncationOrder{5, 2}}) {
    const LpvSystem sys(p, ord);
    for (int trial = 0; trial < 100; ++trial) {
      const QuadState s = koopquad::testing::random_state(rng);
      const PseudoControl u = koopquad::testing::random_pseudo(rng);
      const VecX fd = koopquad::testing::flow_derivative_of_lift(s, u, p, ord);
      const VecX model = lpv_derivative(s, u, sys);
      const VecX res = residual_blocks(s, u, p, ord).as_lifted_vector();
      EXPECT_LT((fd - model - res).norm() / fd.norm(), 1e-5);
    }
  }
}

TEST(LpvDerivative, LiftedBasisAgreesOnLiftedStates) {
  QuadParams p;
  Rng rng(24);
  const TruncationOrder ord{3, 3};
  const LpvSystem sys(p, ord);
  for (int trial = 0; trial < 20; ++trial) {
    const QuadState s = koopquad::testing::random_state(rng);
    EXPECT_LT((sys.B(s) - sys.B(lift(s, p, ord))).norm(), 1e-10);
  }
}

TEST(Bbar, ShapeAndOrthonormality) {
  const MatX B33 = build_Bbar({3, 3});
  EXPECT_EQ(B33.rows(), 54);
  EXPECT_EQ(B33.cols(), 39);
  for (int M = 2; M <= 5; ++M) {
    for (int N = 2; N <= 5; ++N) {
      const MatX Bb = build_Bbar({M, N});
      EXPECT_EQ(Bb.cols(), 9 * (M + N) - 15);
      EXPECT_TRUE((Bb.transpose() * Bb).isIdentity(0.0));
      EXPECT_TRUE(((Bb.array() == 0.0) || (Bb.array() == 1.0)).all());
    }
  }
  EXPECT_THROW(build_Bbar({1, 3}), InvalidArgument);
}

TEST(Pack, RoutesThroughBbar) {
  QuadParams p;
  Rng rng(25);
  const TruncationOrder ord{3, 3};
  const MatX Bbar = build_Bbar(ord);
  for (int trial = 0; trial < 100; ++trial) {
    const QuadState s = koopquad::testing::random_state(rng);
    const PseudoControl u = koopquad::testing::random_pseudo(rng);
    const VecX U = pack_virtual(s, u, p, ord);
    EXPECT_LT((Bbar * U - build_B(s, p, ord) * u.as_vector()).norm(), 1e-12);
  }
  EXPECT_EQ(pack_virtual(QuadState{}, {}, p, ord).norm(), 0.0);

  const VecX hover = pack_virtual(QuadState{}, {p.m * p.g, Vec3::Zero()}, p, ord);
  EXPECT_TRUE(hover.segment<3>(ord.uy_col(0)).isApprox(p.g * Vec3::UnitZ()));
  VecX rest = hover;
  rest.segment<3>(ord.uy_col(0)).setZero();
  EXPECT_LT(rest.norm(), 1e-15);
}

TEST(Recover, Roundtrip) {
  QuadParams p;
  Rng rng(26);
  const TruncationOrder ord{3, 3};
  for (int trial = 0; trial < 100; ++trial) {
    const QuadState s = koopquad::testing::random_state(rng);
    const PseudoControl u = koopquad::testing::random_pseudo(rng);
    const PseudoControl r = recover_control(s, pack_virtual(s, u, p, ord), p, ord);
    EXPECT_LT((r.as_vector() - u.as_vector()).norm(), 1e-9);
  }
  EXPECT_EQ(recover_control(QuadState{}, VecX::Zero(39), p, ord).as_vector().norm(), 0.0);
}

TEST(Recover, OrthogonalComplementGivesZero) {
  QuadParams p;
  Rng rng(27);
  const TruncationOrder ord{3, 3};
  const MatX Bbar = build_Bbar(ord);
  for (int trial = 0; trial < 20; ++trial) {
    const QuadState s = koopquad::testing::random_state(rng);
    const MatX B = build_B(s, p, ord);
    // Project a random lifted vector off col(B), then pull back through Bbar^T;
    // the component outside range(Bbar) lies on rows B does not touch.
    const VecX w = VecX::Random(ord.dim());
    const MatX Q = B.householderQr().householderQ() * MatX::Identity(ord.dim(), 4);
    const VecX perp = w - Q * (Q.transpose() * w);
    const VecX U = Bbar.transpose() * perp;
    const VecX lifted = Bbar * U;
    const double leak = (Q.transpose() * lifted).norm();
    const PseudoControl r = recover_control(s, U, p, ord);
    EXPECT_LT(r.as_vector().norm(), 1e-9 + 10.0 * leak);
  }
}

TEST(Recover, ResidualIsOrthogonal) {
  QuadParams p;
  Rng rng(28);
  const TruncationOrder ord{3, 3};
  const MatX Bbar = build_Bbar(ord);
  for (int trial = 0; trial < 20; ++trial) {
    const QuadState s = koopquad::testing::random_state(rng);
    const VecX U = VecX::Random(ord.virtual_dim());
    const MatX B = build_B(s, p, ord);
    const Vec4 u = recover_control(s, U, p, ord).as_vector();
    EXPECT_LT((B.transpose() * (B * u - Bbar * U)).norm(), 1e-8 * (Bbar * U).norm());
  }
}

TEST(Recover, MinSingularValuePositive) {
  QuadParams p;
  Rng rng(29);
  for (int trial = 0; trial < 100; ++trial) {
    const QuadState s = koopquad::testing::random_state(rng);
    Eigen::JacobiSVD<MatX> svd(build_B(s, p, {3, 3}));
    EXPECT_GT(svd.singularValues()(3), 0.0);
  }
}

TEST(MapBounds, EqualsPack) {
  QuadParams p;
  Rng rng(30);
  const TruncationOrder ord{3, 3};
  EXPECT_EQ(map_control_bounds(QuadState{}, {}, p, ord).norm(), 0.0);
  for (int trial = 0; trial < 50; ++trial) {
    const QuadState s = koopquad::testing::random_state(rng);
    const PseudoControl ub = koopquad::testing::random_pseudo(rng);
    const VecX Ub = map_control_bounds(s, ub, p, ord);
    EXPECT_LT((Ub - pack_virtual(s, ub, p, ord)).norm(), 1e-12 * std::max(1.0, Ub.norm()));
    EXPECT_LT((recover_control(s, Ub, p, ord).as_vector() - ub.as_vector()).norm(), 1e-9);
  }
}
