#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <vector>

#include "koopquad/types.hpp"

namespace koopquad {

/// Settings for QpSolver. Residuals are measured in the infinity norm.
struct QpSettings {
  double tolerance = 1e-8;
  int max_iterations = 2000;
  double rho = 0.0;    // ADMM penalty; 0 picks one from the problem scaling
  double sigma = 1e-9;
  double alpha = 1.6;  // over-relaxation
  int check_every = 10;
  bool polish = true;
};

enum class QpStatus { Solved, MaxIterations };

struct QpResult {
  VecX x;
  VecX y;  // multipliers of lower <= C x <= upper (negative at lower, positive at upper)
  int iterations = 0;
  QpStatus status = QpStatus::Solved;
  double primal_residual = 0.0;      // distance of C x from [lower, upper]
  double stationarity_residual = 0.0;  // |P x + q + C^T y|
  bool polished = false;
};

/// Dense convex QP
///   minimize 1/2 x^T P x + q^T x   subject to  lower <= C x <= upper
/// with P positive definite. P and C are fixed at construction; q and the
/// bounds change per solve. Without constraint rows the solve is a single
/// Cholesky back-substitution. With constraints it runs ADMM with
/// over-relaxation and tries an active-set polish every `check_every`
/// iterations, accepting it once the KKT conditions hold to tolerance.
class QpSolver {
 public:
  QpSolver() = default;

  QpSolver(MatX P, MatX C, QpSettings settings = {})
      : settings_(settings), P_(std::move(P)), C_(std::move(C)) {
    if (P_.rows() != P_.cols()) throw InvalidArgument("QpSolver: P must be square");
    if (C_.size() != 0 && C_.cols() != P_.rows()) {
      throw InvalidArgument("QpSolver: C has the wrong number of columns");
    }
    if (C_.size() == 0) C_.resize(0, P_.rows());
    P_llt_.compute(P_);
    if (P_llt_.info() != Eigen::Success) throw InvalidArgument("QpSolver: P is not positive definite");

    unit_column_.assign(static_cast<std::size_t>(C_.rows()), -1);
    for (Eigen::Index r = 0; r < C_.rows(); ++r) {
      Eigen::Index nz = 0, col = -1;
      for (Eigen::Index c = 0; c < C_.cols(); ++c) {
        if (C_(r, c) != 0.0) {
          ++nz;
          col = c;
        }
      }
      if (nz == 1 && C_(r, col) == 1.0) unit_column_[static_cast<std::size_t>(r)] = col;
    }

    simple_box_ = C_.rows() == P_.rows() && C_.isIdentity(0.0);
    if (C_.rows() > 0 && !simple_box_) {
      rho_ = settings_.rho > 0.0 ? settings_.rho : default_rho();
      factorize();
    }
  }

  const MatX& P() const { return P_; }
  const MatX& C() const { return C_; }
  Eigen::Index num_variables() const { return P_.rows(); }
  Eigen::Index num_constraints() const { return C_.rows(); }

  /// Unconstrained minimizer -P^{-1} q.
  VecX solve_unconstrained(const VecX& q) const { return -P_llt_.solve(q); }

  QpResult solve(const VecX& q, const VecX& lower, const VecX& upper,
                 const std::optional<VecX>& warm_x = std::nullopt,
                 const std::optional<VecX>& warm_y = std::nullopt) const {
    const Eigen::Index n = P_.rows();
    const Eigen::Index m = C_.rows();
    if (q.size() != n) throw InvalidArgument("QpSolver: q has the wrong length");
    if (lower.size() != m || upper.size() != m) {
      throw InvalidArgument("QpSolver: bounds have the wrong length");
    }
    if (((lower - upper).array() > 0.0).any()) throw InfeasibleBounds("QpSolver: lower > upper");

    QpResult res;
    if (m == 0) {
      res.x = solve_unconstrained(q);
      res.y = VecX::Zero(0);
      res.stationarity_residual = (P_ * res.x + q).cwiseAbs().maxCoeff();
      return res;
    }

    if (simple_box_) return solve_box(q, lower, upper, warm_x);

    VecX x = warm_x.value_or(solve_unconstrained(q));
    VecX y = warm_y.value_or(VecX::Zero(m));
    VecX z = (C_ * x).cwiseMax(lower).cwiseMin(upper);
    const double alpha = settings_.alpha;
    const double sigma = settings_.sigma;
    double rho = rho_;
    const Eigen::LLT<MatX>* kkt = &kkt_llt_;
    Eigen::LLT<MatX> refactored;

    for (int it = 1; it <= settings_.max_iterations; ++it) {
      const VecX rhs = sigma * x - q + C_.transpose() * (rho * z - y);
      const VecX x_tilde = kkt->solve(rhs);
      const VecX z_tilde = C_ * x_tilde;
      x = alpha * x_tilde + (1.0 - alpha) * x;
      const VecX z_relaxed = alpha * z_tilde + (1.0 - alpha) * z;
      const VecX z_next = (z_relaxed + y / rho).cwiseMax(lower).cwiseMin(upper);
      y += rho * (z_relaxed - z_next);
      z = z_next;

      if (it % settings_.check_every != 0 && it != settings_.max_iterations) continue;

      if (settings_.polish) {
        if (auto polished = polish(q, lower, upper, z, y)) {
          polished->iterations = it;
          return *polished;
        }
      }
      const VecX Cx = C_ * x;
      const double r_prim = (Cx - z).cwiseAbs().maxCoeff();
      const double r_dual = (P_ * x + q + C_.transpose() * y).cwiseAbs().maxCoeff();
      if (r_prim <= settings_.tolerance && r_dual <= settings_.tolerance) {
        res.iterations = it;
        break;
      }
      const double rho_new = updated_rho(rho, r_prim, r_dual, x, z, y, q);
      if (rho_new != rho) {
        rho = rho_new;
        refactored.compute(kkt_matrix(rho));
        kkt = &refactored;
      }
      res.iterations = it;
    }

    res.x = x;
    res.y = y;
    fill_residuals(res, q, lower, upper);
    res.status = (res.primal_residual <= settings_.tolerance &&
                  res.stationarity_residual <= settings_.tolerance)
                     ? QpStatus::Solved
                     : QpStatus::MaxIterations;
    return res;
  }

 private:
  /// Projected Newton method for lower <= x <= upper (C = I). Variables within
  /// eps of a bound whose gradient pushes outward are held fixed; the rest take
  /// a Newton step on the reduced Hessian, followed by Armijo backtracking
  /// along the projection arc. Stops once the projected gradient is below
  /// tolerance relative to the gradient scale.
  QpResult solve_box(const VecX& q, const VecX& lower, const VecX& upper,
                     const std::optional<VecX>& warm_x) const {
    const Eigen::Index n = P_.rows();
    auto project = [&](const VecX& v) { return VecX(v.cwiseMax(lower).cwiseMin(upper)); };
    const double g_scale = std::max(1.0, q.cwiseAbs().maxCoeff());

    QpResult res;
    VecX x = project(warm_x.value_or(solve_unconstrained(q)));
    std::vector<Eigen::Index> free;
    free.reserve(static_cast<std::size_t>(n));
    std::vector<Eigen::Index> prev_free;
    std::vector<char> is_free(static_cast<std::size_t>(n));
    bool settled = false;
    for (int it = 1; it <= settings_.max_iterations; ++it) {
      res.iterations = it;
      const VecX g = P_ * x + q;
      const VecX pg = x - project(x - g);
      const double pg_norm = pg.cwiseAbs().maxCoeff();
      // A full Newton step on an unchanged free set is exact for that set.
      if (pg_norm <= settings_.tolerance * g_scale && settled) break;
      if (pg_norm == 0.0) break;

      const double eps = std::min(1e-3, pg_norm);
      prev_free.swap(free);
      free.clear();
      for (Eigen::Index i = 0; i < n; ++i) {
        const bool pinned = lower(i) == upper(i);
        const bool at_lower = x(i) <= lower(i) + eps && g(i) > 0.0;
        const bool at_upper = x(i) >= upper(i) - eps && g(i) < 0.0;
        is_free[static_cast<std::size_t>(i)] = !pinned && !at_lower && !at_upper;
        if (is_free[static_cast<std::size_t>(i)]) free.push_back(i);
      }

      // Newton on the free set, plain gradient on the held set.
      VecX d = -g;
      if (!free.empty()) {
        const auto nf = static_cast<Eigen::Index>(free.size());
        MatX Pff(nf, nf);
        VecX gf(nf);
        for (Eigen::Index a = 0; a < nf; ++a) {
          gf(a) = g(free[a]);
          for (Eigen::Index b = 0; b < nf; ++b) Pff(a, b) = P_(free[a], free[b]);
        }
        const VecX df = -Pff.llt().solve(gf);
        for (Eigen::Index a = 0; a < nf; ++a) d(free[a]) = df(a);
      }

      // Objective changes are evaluated from the step itself; differencing
      // f values loses everything to cancellation when P is ill-conditioned.
      double step = 1.0;
      VecX x_new = x;
      bool moved = false;
      for (int ls = 0; ls < 60; ++ls, step *= 0.5) {
        x_new = project(x + step * d);
        const VecX s = x_new - x;
        const double change = g.dot(s) + 0.5 * s.dot(P_ * s);
        double decrease = 0.0;  // Bertsekas' sufficient-decrease measure
        for (Eigen::Index i = 0; i < n; ++i) {
          decrease += is_free[static_cast<std::size_t>(i)] ? -step * g(i) * d(i) : -g(i) * s(i);
        }
        if (-change >= 1e-4 * decrease) {
          moved = s.cwiseAbs().maxCoeff() > 0.0;
          break;
        }
      }
      settled = step == 1.0 && free == prev_free;
      if (!moved) break;
      x = x_new;
    }

    // Multipliers from stationarity: y = -(P x + q) on bound variables.
    const VecX g = P_ * x + q;
    res.x = x;
    res.y = VecX::Zero(n);
    for (Eigen::Index i = 0; i < n; ++i) {
      if (x(i) <= lower(i) && g(i) > 0.0) res.y(i) = -g(i);
      if (x(i) >= upper(i) && g(i) < 0.0) res.y(i) = -g(i);
      if (lower(i) == upper(i)) res.y(i) = -g(i);
    }
    fill_residuals(res, q, lower, upper);
    res.status = res.stationarity_residual <= settings_.tolerance * g_scale ? QpStatus::Solved
                                                                            : QpStatus::MaxIterations;
    return res;
  }

  double default_rho() const {
    const double p_scale = P_.diagonal().cwiseAbs().mean();
    const double c_scale = std::max(1e-12, C_.rowwise().squaredNorm().mean());
    return std::max(1e-6, 0.1 * p_scale / c_scale);
  }

  MatX kkt_matrix(double rho) const {
    return P_ + settings_.sigma * MatX::Identity(P_.rows(), P_.cols()) + rho * C_.transpose() * C_;
  }

  void factorize() { kkt_llt_.compute(kkt_matrix(rho_)); }

  /// Balances primal and dual residuals; returns `rho` unchanged unless the
  /// suggested value differs by more than a factor of 5.
  double updated_rho(double rho, double r_prim, double r_dual, const VecX& x, const VecX& z,
                     const VecX& y, const VecX& q) const {
    const double eps = 1e-30;
    const double prim_scale = std::max({(C_ * x).cwiseAbs().maxCoeff(), z.cwiseAbs().maxCoeff(), eps});
    const double dual_scale = std::max({(P_ * x).cwiseAbs().maxCoeff(),
                                        (C_.transpose() * y).cwiseAbs().maxCoeff(),
                                        q.cwiseAbs().maxCoeff(), eps});
    const double ratio = std::sqrt((r_prim / prim_scale + eps) / (r_dual / dual_scale + eps));
    const double rho_new = std::clamp(rho * ratio, 1e-6, 1e6);
    return (rho_new > 5.0 * rho || rho_new < 0.2 * rho) ? rho_new : rho;
  }

  void fill_residuals(QpResult& res, const VecX& q, const VecX& lower, const VecX& upper) const {
    const VecX Cx = C_ * res.x;
    const VecX violation = (Cx - upper).cwiseMax(lower - Cx).cwiseMax(0.0);
    res.primal_residual = violation.size() ? violation.maxCoeff() : 0.0;
    res.stationarity_residual = (P_ * res.x + q + C_.transpose() * res.y).cwiseAbs().maxCoeff();
  }

  /// Solves the equality-constrained QP on the guessed active set and returns
  /// it when it is primal feasible with correctly signed multipliers.
  std::optional<QpResult> polish(const VecX& q, const VecX& lower, const VecX& upper,
                                 const VecX& z, const VecX& y) const {
    const Eigen::Index m = C_.rows();
    std::vector<Eigen::Index> active;
    VecX target(m);
    for (Eigen::Index i = 0; i < m; ++i) {
      if (lower(i) == upper(i)) {
        active.push_back(i);
        target(i) = lower(i);
      } else if (z(i) - lower(i) < -y(i)) {
        active.push_back(i);
        target(i) = lower(i);
      } else if (upper(i) - z(i) < y(i)) {
        active.push_back(i);
        target(i) = upper(i);
      }
    }

    QpResult res;
    res.y = VecX::Zero(m);
    const VecX x_free = -P_llt_.solve(q);
    if (active.empty()) {
      res.x = x_free;
    } else {
      const auto na = static_cast<Eigen::Index>(active.size());
      MatX CA(na, C_.cols());
      VecX bA(na);
      for (Eigen::Index a = 0; a < na; ++a) {
        CA.row(a) = C_.row(active[a]);
        bA(a) = target(active[a]);
      }
      const MatX PinvCAt = P_llt_.solve(CA.transpose());
      const MatX S = CA * PinvCAt;
      Eigen::LDLT<MatX> ldlt(S);
      if (ldlt.info() != Eigen::Success) return std::nullopt;
      const VecX yA = ldlt.solve(CA * x_free - bA);
      if (!yA.allFinite()) return std::nullopt;
      res.x = x_free - PinvCAt * yA;
      for (Eigen::Index a = 0; a < na; ++a) {
        res.y(active[a]) = yA(a);
        const auto col = unit_column_[static_cast<std::size_t>(active[a])];
        if (col >= 0) res.x(col) = bA(a);  // land exactly on simple bounds
      }
    }

    fill_residuals(res, q, lower, upper);
    const double tol = settings_.tolerance;
    for (Eigen::Index i = 0; i < m; ++i) {
      if (lower(i) == upper(i)) continue;
      const bool at_lower = res.y(i) < 0.0;
      const bool at_upper = res.y(i) > 0.0;
      if ((at_lower && target(i) != lower(i)) || (at_upper && target(i) != upper(i))) {
        if (std::abs(res.y(i)) > tol) return std::nullopt;
      }
    }
    const double scale = std::max(1.0, q.cwiseAbs().maxCoeff());
    if (res.primal_residual > tol || res.stationarity_residual > tol * scale) return std::nullopt;
    res.polished = true;
    res.status = QpStatus::Solved;
    return res;
  }

  QpSettings settings_;
  MatX P_;
  MatX C_;
  Eigen::LLT<MatX> P_llt_;
  Eigen::LLT<MatX> kkt_llt_;
  double rho_ = 1.0;
  bool simple_box_ = false;
  std::vector<Eigen::Index> unit_column_;
};

}  // namespace koopquad
