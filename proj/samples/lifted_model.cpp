// Lift one state, build the lifted model and check it against the plant.

#include <cstdio>

#include "koopquad/koopquad.hpp"

using namespace koopquad;

int main() {
  const QuadParams p;
  const TruncationOrder ord{3, 3};

  QuadState s;
  s.x = Vec3(0.5, -0.2, 1.0);
  s.v = Vec3(0.3, 0.1, 0.0);
  s.R = Eigen::AngleAxisd(0.3, Vec3::UnitZ()).toRotationMatrix();
  s.omega = Vec3(0.1, -0.2, 0.3);
  const PseudoControl u{p.m * p.g, Vec3(1e-4, 0.0, -2e-4)};

  const LiftedState X = lift(s, p, ord);
  const LpvSystem lpv(p, ord);
  const LtiSystem lti(ord);
  std::printf("lifted dimension %d, virtual control dimension %d\n", ord.dim(), ord.virtual_dim());

  // LPV input term equals the LTI selector applied to the packed virtual control.
  const VecX U = pack_virtual(s, u, p, ord);
  const VecX gap = lpv.B(s) * u.as_vector() - lti.Bbar * U;
  std::printf("|B(X) u - Bbar U| = %.2e\n", gap.norm());

  const PseudoControl back = recover_control(s, U, p, ord);
  std::printf("recovered f = %.6f N, Mbar = [%.3e %.3e %.3e]\n", back.f, back.Mbar.x(), back.Mbar.y(),
              back.Mbar.z());

  const QuadState round = unlift(X);
  std::printf("unlift error: position %.2e m, attitude %.2e\n", (round.x - s.x).norm(),
              attitude_error(round.R, s.R));

  const RankReport rank = lti_controllability(ord);
  std::printf("controllability matrix rank %d of %d\n", rank.rank, rank.rows);
  return 0;
}
