#include <gtest/gtest.h>

#include <cmath>

#include "koopquad/lift.hpp"
#include "test_support.hpp"

using namespace koopquad;
using koopquad::testing::Rng;

TEST(Lift, IdentityState) {
  QuadParams p;
  const TruncationOrder ord{4, 3};
  const LiftedState X = lift(QuadState{}, p, ord);
  ASSERT_EQ(X.data.size(), 63);
  for (int k = 1; k <= ord.M; ++k) {
    EXPECT_EQ(X.p(k).norm(), 0.0);
    EXPECT_EQ(X.y(k).norm(), 0.0);
    if (k == 1) {
      EXPECT_EQ(Vec3(X.h(1)), gravity_observable(p));
    } else {
      EXPECT_EQ(X.h(k).norm(), 0.0);
    }
  }
  EXPECT_EQ(Vec9(X.z(1)), vec(Mat3::Identity()));
  for (int j = 2; j <= ord.N; ++j) EXPECT_EQ(X.z(j).norm(), 0.0);
}

TEST(Lift, ZeroOmegaKillsHigherBlocks) {
  QuadParams p;
  Rng rng(10);
  QuadState s = koopquad::testing::random_state(rng);
  s.omega.setZero();
  const TruncationOrder ord{5, 4};
  const LiftedState X = lift(s, p, ord);
  for (int k = 2; k <= ord.M; ++k) {
    EXPECT_EQ(X.p(k).norm() + X.y(k).norm() + X.h(k).norm(), 0.0);
  }
  for (int j = 2; j <= ord.N; ++j) EXPECT_EQ(X.z(j).norm(), 0.0);
  EXPECT_GT(X.p(1).norm(), 0.0);
}

TEST(Lift, RecurrencesHold) {
  QuadParams p;
  Rng rng(11);
  const TruncationOrder ord{6, 6};
  for (int trial = 0; trial < 50; ++trial) {
    const QuadState s = koopquad::testing::random_state(rng);
    const LiftedState X = lift(s, p, ord);
    const Mat3 Omega = hat(s.omega);
    const Mat3 Omega_t = Omega.transpose();
    for (int k = 1; k < ord.M; ++k) {
      EXPECT_LT((X.p(k + 1) - Omega_t * X.p(k)).norm(), 1e-12);
      EXPECT_LT((X.y(k + 1) - Omega_t * X.y(k)).norm(), 1e-12);
      EXPECT_LT((X.h(k + 1) - Omega_t * X.h(k)).norm(), 1e-12);
    }
    Mat3 RO = s.R;
    for (int j = 1; j < ord.N; ++j) {
      RO = RO * Omega;
      EXPECT_LT((X.z(j + 1) - vec(RO)).norm(), 1e-12);
    }
  }
}

TEST(Lift, VecIsColumnMajor) {
  Mat3 A;
  A << 1, 2, 3, 4, 5, 6, 7, 8, 9;
  const Vec9 a = vec(A);
  EXPECT_EQ(a(1), 4.0);
  EXPECT_EQ(a(3), 2.0);
  EXPECT_EQ(unvec(a), A);
}

TEST(Unlift, Roundtrip) {
  QuadParams p;
  Rng rng(12);
  const TruncationOrder ord{3, 2};
  for (int trial = 0; trial < 100; ++trial) {
    const QuadState s = koopquad::testing::random_state(rng, 3.0, 3.0, 1.0);
    const QuadState r = unlift(lift(s, p, ord));
    EXPECT_LT((r.x - s.x).norm(), 1e-10);
    EXPECT_LT((r.v - s.v).norm(), 1e-10);
    EXPECT_LT((r.R - s.R).norm(), 1e-10);
    EXPECT_LT((r.omega - s.omega).norm(), 1e-10);
  }
  const QuadState id = unlift(lift(QuadState{}, p, ord));
  EXPECT_EQ(id.x.norm() + id.v.norm() + id.omega.norm(), 0.0);
  EXPECT_EQ(id.R, Mat3::Identity());

  QuadState s;
  s.R = Eigen::AngleAxisd(M_PI / 4.0, Vec3::UnitZ()).toRotationMatrix();
  EXPECT_LT((unlift(lift(s, p, ord)).R - s.R).norm(), 1e-12);
}

TEST(Unlift, Errors) {
  QuadParams p;
  EXPECT_THROW(unlift(lift(QuadState{}, p, TruncationOrder{3, 1})), NeedsN2);
  LiftedState X = lift(QuadState{}, p, TruncationOrder{3, 3});
  X.data.segment<9>(X.order.z_row(1)) *= 1.1;
  EXPECT_THROW(unlift(X), InvalidRotation);
  EXPECT_THROW(lift(QuadState{}, p, TruncationOrder{0, 2}), InvalidArgument);
}

TEST(LiftReference, TaskStartPoints) {
  QuadParams p;
  const TruncationOrder ord{3, 3};
  const Vec3 helix0(0.0, std::sin(0.0), 2.0 * std::cos(0.0));
  const LiftedState Xh = lift_reference(helix0, Vec3::Zero(), Mat3::Identity(), Vec3::Zero(), p, ord);
  EXPECT_EQ(Vec3(Xh.p(1)), Vec3(0, 0, 2));
  EXPECT_EQ(Xh.p(2).norm() + Xh.p(3).norm(), 0.0);

  const LiftedState Xv = lift_reference(Vec3(1, 1.3, 2), Vec3::Zero(), Mat3::Identity(),
                                        Vec3::Zero(), p, ord);
  for (int k = 1; k <= 3; ++k) EXPECT_EQ(Xv.y(k).norm(), 0.0);

  const Vec3 torus0(std::sin(0.0) + 2 * std::sin(0.0), std::cos(0.0) - 2 * std::cos(0.0),
                    -std::sin(0.0));
  EXPECT_EQ(torus0, Vec3(0, -1, 0));
  const QuadState ref{torus0, Vec3(0.5, 0, -0.3), Mat3::Identity(), Vec3::Zero()};
  EXPECT_EQ(lift_reference(ref.x, ref.v, ref.R, ref.omega, p, ord).data, lift(ref, p, ord).data);
}

TEST(Residuals, ZeroOmega) {
  QuadParams p;
  Rng rng(13);
  QuadState s = koopquad::testing::random_state(rng);
  s.omega.setZero();
  const auto r = residual_blocks(s, PseudoControl{3.0, Vec3(0.1, 0.0, 0.0)}, p, {3, 3});
  EXPECT_EQ(r.omitted_p.norm() + r.omitted_y.norm() + r.omitted_h.norm() + r.omitted_z.norm(),
            0.0);
  EXPECT_EQ(r.terminal_h.norm() + r.terminal_z.norm(), 0.0);
}

TEST(Residuals, GeometricBounds) {
  QuadParams p;
  Rng rng(14);
  for (int trial = 0; trial < 100; ++trial) {
    QuadState s = koopquad::testing::random_state(rng);
    s.omega = 0.5 * koopquad::testing::random_unit(rng);
    s.v = koopquad::testing::random_unit(rng);
    for (int M = 2; M <= 8; ++M) {
      const auto r = residual_blocks(s, {}, p, {M, 2});
      EXPECT_LE(r.omitted_y.norm(), std::pow(0.5, M) * s.v.norm() + 1e-14);
    }
    const LiftedState X = lift(s, p, {2, 10});
    for (int j = 1; j <= 10; ++j) {
      EXPECT_LE(X.z(j).norm(), std::pow(std::sqrt(2.0) * 0.5, j - 1) * 3.0);
    }
  }
}

TEST(Residuals, NormalizeOmega) {
  Rng rng(15);
  for (int i = 0; i < 50; ++i) {
    const Vec3 w = koopquad::testing::random_in_ball(rng, 4.0);
    const double wmax = w.norm() * (1.0 + 0.5 * i / 50.0);
    EXPECT_LE(normalize_omega(w, wmax).norm(), 1.0 / std::sqrt(2.0) + 1e-15);
  }
  EXPECT_THROW(normalize_omega(Vec3::UnitX(), 0.0), InvalidArgument);
}
