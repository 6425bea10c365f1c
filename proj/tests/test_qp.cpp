#include <gtest/gtest.h>

#include "koopquad/mpc.hpp"
#include "qp_oracle.hpp"
#include "test_support.hpp"

using namespace koopquad;
using koopquad::testing::Rng;

namespace {

MatX random_spd(Rng& rng, Eigen::Index n, double shift = 0.1) {
  std::normal_distribution<double> normal(0.0, 1.0);
  MatX G(n, n);
  for (Eigen::Index i = 0; i < G.size(); ++i) G.data()[i] = normal(rng);
  return G * G.transpose() + shift * MatX::Identity(n, n);
}

VecX random_vec(Rng& rng, Eigen::Index n, double scale = 1.0) {
  std::normal_distribution<double> normal(0.0, scale);
  VecX v(n);
  for (Eigen::Index i = 0; i < n; ++i) v(i) = normal(rng);
  return v;
}

double rel_err(const VecX& a, const VecX& b) {
  return (a - b).cwiseAbs().maxCoeff() / std::max(1.0, b.cwiseAbs().maxCoeff());
}

}  // namespace

TEST(QpSolver, UnconstrainedIsOneSolve) {
  Rng rng(1);
  const MatX P = random_spd(rng, 8);
  const VecX q = random_vec(rng, 8);
  const QpSolver qp(P, MatX(0, 8));
  const QpResult r = qp.solve(q, VecX(0), VecX(0));
  EXPECT_EQ(r.status, QpStatus::Solved);
  EXPECT_LT(rel_err(r.x, VecX(P.fullPivLu().solve(-q))), 1e-12);
}

TEST(QpSolver, BoxMatchesEnumeration) {
  Rng rng(2);
  for (int trial = 0; trial < 20; ++trial) {
    const Eigen::Index n = 5;
    const MatX P = random_spd(rng, n);
    const VecX q = random_vec(rng, n, 3.0);
    const VecX lo = -VecX::Constant(n, 0.5) + random_vec(rng, n, 0.1);
    const VecX hi = lo + VecX::Constant(n, 0.6);
    const VecX oracle = koopquad::testing::box_qp_by_enumeration(P, q, lo, hi);
    const QpResult r = QpSolver(P, MatX::Identity(n, n)).solve(q, lo, hi);
    EXPECT_EQ(r.status, QpStatus::Solved);
    EXPECT_LT(rel_err(r.x, oracle), 1e-9) << trial;
  }
}

TEST(QpSolver, GeneralConstraintsMatchEnumeration) {
  Rng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    const Eigen::Index n = 4, m = 3;
    const MatX P = random_spd(rng, n);
    const VecX q = random_vec(rng, n, 3.0);
    MatX C(m, n);
    for (Eigen::Index i = 0; i < C.size(); ++i) C.data()[i] = random_vec(rng, 1)(0);
    const VecX lo = -VecX::Constant(m, 0.3);
    const VecX hi = VecX::Constant(m, 0.4);
    const VecX oracle = koopquad::testing::general_qp_by_enumeration(P, q, C, lo, hi);
    const QpResult r = QpSolver(P, C).solve(q, lo, hi);
    EXPECT_EQ(r.status, QpStatus::Solved) << trial;
    EXPECT_LT(rel_err(r.x, oracle), 1e-8) << trial;
    EXPECT_LE(r.stationarity_residual, 1e-8);
  }
}

TEST(QpSolver, MaxIterationsIsFlagged) {
  Rng rng(4);
  const MatX P = random_spd(rng, 6, 1e-3);
  MatX C(3, 6);
  for (Eigen::Index i = 0; i < C.size(); ++i) C.data()[i] = random_vec(rng, 1)(0);
  QpSettings s;
  s.max_iterations = 1;
  s.polish = false;
  const QpResult r = QpSolver(P, C, s).solve(random_vec(rng, 6, 10.0), -VecX::Constant(3, 0.01),
                                             VecX::Constant(3, 0.01));
  EXPECT_EQ(r.status, QpStatus::MaxIterations);
  EXPECT_EQ(r.x.size(), 6);
}

TEST(QpSolver, RejectsBadInput) {
  const MatX P = MatX::Identity(3, 3);
  EXPECT_THROW(QpSolver(-P, MatX(0, 3)), InvalidArgument);
  const QpSolver qp(P, MatX::Identity(3, 3));
  EXPECT_THROW(qp.solve(VecX::Zero(3), VecX::Ones(3), VecX::Zero(3)), InfeasibleBounds);
  EXPECT_THROW(qp.solve(VecX::Zero(2), VecX::Zero(3), VecX::Ones(3)), InvalidArgument);
}

// Condensed OCP against the full-space KKT oracle.

TEST(CondensedOcp, UnconstrainedMatchesKkt) {
  Rng rng(10);
  const TruncationOrder ord{2, 2};
  const QuadParams p;
  for (int trial = 0; trial < 10; ++trial) {
    const auto inst = koopquad::testing::random_ocp_instance(rng, ord, p, 1 + trial % 3);
    const CondensedOcp ocp(PredictionModel::from(inst.disc), inst.cfg, ord);
    const OcpSolution sol = ocp.solve(inst.X0, inst.refs);
    const VecX oracle = koopquad::testing::ocp_by_kkt(inst, {});
    EXPECT_LT(rel_err(sol.U, oracle), 1e-9) << trial;
    EXPECT_NEAR(sol.cost, koopquad::testing::ocp_cost(inst, oracle),
                1e-9 * std::max(1.0, sol.cost));
    const auto [q, c] = ocp.linear_term(inst.X0, inst.refs);
    const VecX grad = ocp.hessian() * sol.W + q;
    EXPECT_LT(grad.norm(), 1e-9 * std::max(1.0, q.norm()));
  }
}

TEST(CondensedOcp, BoxedMatchesKktEnumeration) {
  Rng rng(11);
  const TruncationOrder ord{2, 2};
  const QuadParams p;
  for (int trial = 0; trial < 10; ++trial) {
    const int H = 1 + trial % 3;
    const auto inst = koopquad::testing::random_ocp_instance(rng, ord, p, H);
    const CondensedOcp free_ocp(PredictionModel::from(inst.disc), inst.cfg, ord);
    const VecX U_free = free_ocp.solve(inst.X0, inst.refs).U;
    const InputBox box = koopquad::testing::tight_box(U_free, ord.virtual_dim(), H, rng);
    const CondensedOcp ocp(PredictionModel::from(inst.disc), inst.cfg, ord, std::nullopt, true);
    const OcpSolution sol = ocp.solve(inst.X0, inst.refs, box);
    const VecX oracle = koopquad::testing::ocp_by_enumeration(inst, box);
    EXPECT_EQ(sol.status, QpStatus::Solved);
    EXPECT_LT(rel_err(sol.U, oracle), 1e-9) << trial;
  }
}

TEST(CondensedOcp, StateBoxSatisfiesKkt) {
  Rng rng(12);
  const TruncationOrder ord{2, 2};
  const QuadParams p;
  const auto inst = koopquad::testing::random_ocp_instance(rng, ord, p, 2);
  MpcConfig cfg = inst.cfg;
  const CondensedOcp free_ocp(PredictionModel::from(inst.disc), cfg, ord);
  const VecX Xf = free_ocp.predict(inst.X0, free_ocp.solve(inst.X0, inst.refs).W);
  // Clip the free prediction to pull a few states onto their bounds.
  StateBox sb{VecX::Constant(ord.dim(), -1e3), VecX::Constant(ord.dim(), 1e3)};
  const Eigen::Index k = ord.p_row(1);
  sb.upper(k) = std::min(Xf(k), Xf(ord.dim() + k)) - 0.01;
  cfg.state_box = sb;
  const CondensedOcp ocp(PredictionModel::from(inst.disc), cfg, ord);
  const OcpSolution sol = ocp.solve(inst.X0, inst.refs);
  EXPECT_EQ(sol.status, QpStatus::Solved);
  const VecX X = ocp.predict(inst.X0, sol.W);
  for (int i = 0; i < 2; ++i) EXPECT_LE(X(i * ord.dim() + k), sb.upper(k) + 1e-8);
  EXPECT_LE(sol.stationarity, 1e-8);
  EXPECT_LT(rel_err(sol.U, koopquad::testing::ocp_by_enumeration_state(inst, sb, k)), 1e-7);
}

TEST(CondensedOcp, OnReferenceIsZeroCost) {
  const TruncationOrder ord{3, 3};
  const QuadParams p;
  const TrackingTask task = hover_task();
  MpcConfig cfg;
  cfg.horizon = 0.5;
  const ReferenceWindow refs = build_reference_window(task, 0.0, cfg.steps(), cfg.dt, p, ord);
  const CondensedOcp ocp(PredictionModel::from(discretize(LtiSystem(ord), cfg.dt)), cfg, ord);
  const OcpSolution sol = ocp.solve(refs.X[0], refs);
  EXPECT_LT(sol.cost, 1e-12);
  for (int i = 0; i < cfg.steps(); ++i) {
    EXPECT_LT((sol.U.segment(i * ord.virtual_dim(), ord.virtual_dim()) - refs.U[i]).norm(), 1e-9);
  }
}

TEST(CondensedOcp, SingletonBoxReturnsReference) {
  const TruncationOrder ord{3, 3};
  const QuadParams p;
  TrackingTask task = hover_task();
  task.initial.x = Vec3(0.2, -0.1, 0.4);
  MpcConfig cfg;
  cfg.horizon = 0.5;
  const ReferenceWindow refs = build_reference_window(task, 0.0, cfg.steps(), cfg.dt, p, ord);
  const CondensedOcp ocp(PredictionModel::from(discretize(LtiSystem(ord), cfg.dt)), cfg, ord,
                         std::nullopt, true);
  const InputBox box{refs.U[0], refs.U[0]};
  const OcpSolution sol = ocp.solve(lift(task.initial, p, ord).data, refs, box);
  for (int i = 0; i < cfg.steps(); ++i) {
    EXPECT_EQ(sol.U.segment(i * ord.virtual_dim(), ord.virtual_dim()), refs.U[0]);
  }
  EXPECT_THROW(ocp.solve(refs.X[0], refs, InputBox{refs.U[0], refs.U[0] - VecX::Ones(refs.U[0].size())}),
               InfeasibleBounds);
}

TEST(CondensedOcp, Deterministic) {
  Rng rng(13);
  const TruncationOrder ord{2, 2};
  const auto inst = koopquad::testing::random_ocp_instance(rng, ord, QuadParams{}, 3);
  const CondensedOcp ocp(PredictionModel::from(inst.disc), inst.cfg, ord, std::nullopt, true);
  const VecX U_free = CondensedOcp(PredictionModel::from(inst.disc), inst.cfg, ord)
                          .solve(inst.X0, inst.refs)
                          .U;
  const InputBox box = koopquad::testing::tight_box(U_free, ord.virtual_dim(), 3, rng);
  const OcpSolution a = ocp.solve(inst.X0, inst.refs, box);
  const OcpSolution b = ocp.solve(inst.X0, inst.refs, box);
  EXPECT_EQ(a.U, b.U);
  EXPECT_EQ(a.iterations, b.iterations);
}

TEST(CondensedOcp, HeavierControlWeightShrinksDeviation) {
  Rng rng(14);
  const TruncationOrder ord{2, 2};
  for (int trial = 0; trial < 10; ++trial) {
    auto inst = koopquad::testing::random_ocp_instance(rng, ord, QuadParams{}, 3);
    auto deviation = [&](const MatX& Rw) {
      MpcConfig cfg = inst.cfg;
      cfg.Rw = Rw;
      const VecX U = CondensedOcp(PredictionModel::from(inst.disc), cfg, ord).solve(inst.X0, inst.refs).U;
      double d = 0.0;
      for (int i = 0; i < 3; ++i) {
        const VecX e = U.segment(i * ord.virtual_dim(), ord.virtual_dim()) - inst.refs.U[i];
        d += e.dot(Rw * e);
      }
      return d / Rw(0, 0);
    };
    const MatX R = inst.cfg.Rw;
    EXPECT_LE(deviation(2.0 * R), deviation(R) * (1.0 + 1e-9)) << trial;
  }
}

TEST(CondensedOcp, InputMapChangesDecisionSpace) {
  Rng rng(15);
  const TruncationOrder ord{3, 3};
  const QuadParams p;
  const QuadState s = koopquad::testing::random_state(rng);
  const LiftedState X = lift(s, p, ord);
  MpcConfig cfg;
  cfg.horizon = 0.1;
  const MatX L = build_Bbar(ord).transpose() * build_B(s, p, ord);
  const PseudoControl uc{p.m * p.g, Vec3::Zero()};
  const CondensedOcp ocp(linearize_lpv(X, uc, p, cfg.dt), cfg, ord, L);
  EXPECT_EQ(ocp.input_dim(), 4);
  EXPECT_EQ(ocp.control_dim(), ord.virtual_dim());
  TrackingTask task = hover_task();
  const ReferenceWindow refs = build_reference_window(task, 0.0, cfg.steps(), cfg.dt, p, ord);
  const OcpSolution sol = ocp.solve(X.data, refs);
  for (int i = 0; i < cfg.steps(); ++i) {
    const VecX w = sol.W.segment(4 * i, 4);
    EXPECT_LT((sol.U.segment(i * ord.virtual_dim(), ord.virtual_dim()) - L * w).norm(), 1e-12);
  }
  // recovery of a realizable virtual control is exact
  const PseudoControl back = recover_control(s, sol.first(ord.virtual_dim()), p, ord);
  EXPECT_LT((back.as_vector() - sol.W.head<4>()).norm(), 1e-9 * std::max(1.0, sol.W.head<4>().norm()));
}
