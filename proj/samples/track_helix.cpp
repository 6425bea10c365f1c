// Ten seconds of helix tracking with the default controller, printed once per second.

#include <cmath>
#include <cstdio>

#include "koopquad/koopquad.hpp"

using namespace koopquad;

int main() {
  const QuadParams p;
  const ClosedLoopLog log = run_tracking(helix_task(10.0), p, {3, 3}, MpcConfig{});

  std::printf("%6s %10s %10s %10s %12s %8s\n", "t", "x", "y", "z", "psi", "qp_ms");
  for (const auto& r : log.records) {
    if (std::fmod(r.t + 1e-9, 1.0) > 1e-6) continue;
    std::printf("%6.2f %10.4f %10.4f %10.4f %12.3e %8.2f\n", r.t, r.state.x(0), r.state.x(1),
                r.state.x(2), r.psi, r.qp_ms);
  }
  const TrackingSummary s = log.summary();
  std::printf("mean |x - x_ref| %.4f m, max psi %.3e, mean solve %.2f ms\n", s.mean_err_pos, s.max_psi,
              s.mean_qp_ms);
  return 0;
}
