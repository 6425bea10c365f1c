#pragma once

#include <algorithm>
#include <charconv>
#include <cstdint>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <system_error>

#include <json.hpp>

#include "koopquad/analysis.hpp"
#include "koopquad/mpc.hpp"

namespace koopquad {

using json = nlohmann::json;

class IoError : public Error {
 public:
  using Error::Error;
};

/// Shortest text that parses back to the same double.
inline std::string format_double(double v) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

/// Current UTC time as 2026-01-31T12:00:00Z.
inline std::string iso8601_now() {
  const std::time_t now = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

inline std::ofstream open_output(const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  return out;
}

inline constexpr const char* kTrackingCsvHeader =
    "t,x1,x2,x3,v1,v2,v3,r11,r12,r13,r21,r22,r23,r31,r32,r33,w1,w2,w3,f,M1,M2,M3,psi,"
    "err_pos,err_vel,qp_ms,qp_iters";

inline constexpr const char* kErrorCsvHeader = "t,err_x,err_v,psi";

/// One row per control step; r_ij is R(i, j). `timing` false writes qp_ms as 0
/// so that repeated runs produce identical files.
inline void write_tracking_csv(std::ostream& out, const ClosedLoopLog& log, bool timing = true) {
  out << kTrackingCsvHeader << '\n';
  std::string row;
  auto put = [&row](double v) {
    row += format_double(v);
    row += ',';
  };
  for (const auto& r : log.records) {
    row.clear();
    put(r.t);
    for (int i = 0; i < 3; ++i) put(r.state.x(i));
    for (int i = 0; i < 3; ++i) put(r.state.v(i));
    for (int i = 0; i < 3; ++i) {
      for (int j = 0; j < 3; ++j) put(r.state.R(i, j));
    }
    for (int i = 0; i < 3; ++i) put(r.state.omega(i));
    put(r.control.f);
    for (int i = 0; i < 3; ++i) put(r.control.M(i));
    put(r.psi);
    put(r.err_pos);
    put(r.err_vel);
    put(timing ? r.qp_ms : 0.0);
    row += std::to_string(r.qp_iterations);
    out << row << '\n';
  }
}

inline void write_error_csv(std::ostream& out, const ErrorSeries& s) {
  out << kErrorCsvHeader << '\n';
  for (std::size_t i = 0; i < s.t.size(); ++i) {
    out << format_double(s.t[i]) << ',' << format_double(s.err_x[i]) << ','
        << format_double(s.err_v[i]) << ',' << format_double(s.psi[i]) << '\n';
  }
}

/// `{experiment}_{M}_{N}`
inline std::string run_stem(const std::string& experiment, const TruncationOrder& ord) {
  return experiment + "_" + std::to_string(ord.M) + "_" + std::to_string(ord.N);
}

// Matrix exchange: MatrixMarket dense array format, column-major values.

inline void write_matrix(std::ostream& out, const MatX& A, const std::string& name) {
  out << "%%MatrixMarket matrix array real general\n";
  out << "% " << name << '\n';
  out << A.rows() << ' ' << A.cols() << '\n';
  for (Eigen::Index j = 0; j < A.cols(); ++j) {
    for (Eigen::Index i = 0; i < A.rows(); ++i) out << format_double(A(i, j)) << '\n';
  }
}

inline MatX read_matrix(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || line.rfind("%%MatrixMarket matrix array real general", 0) != 0) {
    throw IoError("read_matrix: missing MatrixMarket array header");
  }
  while (std::getline(in, line) && !line.empty() && line[0] == '%') {
  }
  std::istringstream dims(line);
  Eigen::Index rows = -1, cols = -1;
  if (!(dims >> rows >> cols) || rows < 0 || cols < 0) throw IoError("read_matrix: bad dimension line");
  MatX A(rows, cols);
  for (Eigen::Index j = 0; j < cols; ++j) {
    for (Eigen::Index i = 0; i < rows; ++i) {
      if (!(in >> A(i, j))) throw IoError("read_matrix: truncated data");
    }
  }
  return A;
}

// JSON summaries

inline json to_json(const TrackingSummary& s, double settle_deadline = 20.0) {
  json j;
  j["mean_err_pos"] = s.mean_err_pos;
  j["max_err_pos"] = s.max_err_pos;
  j["mean_err_vel"] = s.mean_err_vel;
  j["max_err_vel"] = s.max_err_vel;
  j["mean_normalized_err_pos"] = s.mean_normalized_err_pos;
  j["max_psi"] = s.max_psi;
  j["mean_qp_ms"] = s.mean_qp_ms;
  j["max_qp_ms"] = s.max_qp_ms;
  j["max_qp_iterations"] = s.max_qp_iterations;
  j["unconverged_solves"] = s.unconverged_solves;
  j["settle_time"] = s.settle_time ? json(*s.settle_time) : json(nullptr);
  j["settled_within_20s"] = s.settle_time.has_value() && *s.settle_time < settle_deadline;
  return j;
}

inline json to_json(const RankReport& r) {
  return {{"name", r.name},
          {"rows", r.rows},
          {"cols", r.cols},
          {"rank", r.rank},
          {"full_row_rank", r.full_row_rank()},
          {"full_column_rank", r.full_column_rank()},
          {"sigma_max", r.sigma_max},
          {"sigma_min_retained", r.sigma_min_retained},
          {"tolerance", r.tolerance}};
}

inline json to_json(const ResidualDecayReport& r) {
  return {{"omega_norm", r.omega_norm},
          {"states", r.states},
          {"max_index", r.max_index},
          {"worst_y_ratio", r.worst_y_ratio},
          {"worst_z_bound_ratio", r.worst_z_bound_ratio},
          {"terminal_residual_first_order", r.m_min},
          {"mean_terminal_residual", r.mean_terminal_residual}};
}

inline json to_json(const GramianReport& g) {
  return {{"min_sv", g.min_sv}, {"max_sv", g.max_sv}, {"rank", g.rank}, {"samples", g.samples}};
}

inline json to_json(const ErrorSeries& s) {
  return {{"M", s.order.M},
          {"N", s.order.N},
          {"samples", s.t.size()},
          {"mean_err_x_10s", s.mean_err_x(10.0)},
          {"final_err_x", s.err_x.empty() ? 0.0 : s.err_x.back()},
          {"max_psi", s.psi.empty() ? 0.0 : *std::max_element(s.psi.begin(), s.psi.end())}};
}

/// Metadata block stored next to every emitted file.
inline json run_metadata(const std::string& command, std::uint64_t seed, const json& config) {
  return {{"created", iso8601_now()}, {"command", command}, {"seed", seed}, {"config", config}};
}

inline void write_json(const std::filesystem::path& path, const json& j) {
  std::ofstream out = open_output(path);
  out << j.dump(2) << '\n';
}

}  // namespace koopquad
