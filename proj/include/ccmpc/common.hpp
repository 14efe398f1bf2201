#pragma once

#include <Eigen/Dense>

#include <cstdlib>
#include <iostream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace ccmpc {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;
using Vec4 = Eigen::Vector4d;
using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

inline constexpr double kPi = 3.14159265358979323846;

/// Malformed or non-finite caller input.
class InputError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Argument outside the mathematical domain of an operation.
class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// A numerical procedure failed (factorization, non-convergence).
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Logging. Level is read once from CHANCE_MPC_LOG_LEVEL (error|warn|info|debug).

enum class LogLevel { error = 0, warn = 1, info = 2, debug = 3 };

inline LogLevel parse_log_level(std::string_view s, LogLevel fallback = LogLevel::warn) {
  if (s == "error") return LogLevel::error;
  if (s == "warn") return LogLevel::warn;
  if (s == "info") return LogLevel::info;
  if (s == "debug") return LogLevel::debug;
  return fallback;
}

inline LogLevel& log_level() {
  static LogLevel level = [] {
    const char* env = std::getenv("CHANCE_MPC_LOG_LEVEL");
    return env ? parse_log_level(env) : LogLevel::warn;
  }();
  return level;
}

inline void log(LogLevel level, std::string_view msg) {
  static constexpr const char* names[] = {"error", "warn", "info", "debug"};
  if (static_cast<int>(level) <= static_cast<int>(log_level()))
    std::cerr << "[ccmpc:" << names[static_cast<int>(level)] << "] " << msg << '\n';
}

inline void warn(std::string_view msg) { log(LogLevel::warn, msg); }

// ---------------------------------------------------------------------------

inline bool all_finite(const Eigen::Ref<const Mat>& m) { return m.allFinite(); }

inline Mat symmetrize(const Eigen::Ref<const Mat>& m) { return 0.5 * (m + m.transpose()); }

/// Clip negative eigenvalues of a symmetric matrix to zero. Returns true if any were clipped.
inline bool clip_to_psd(Mat& m, double clip_below = 0.0) {
  m = symmetrize(m);
  Eigen::SelfAdjointEigenSolver<Mat> es(m);
  if (es.info() != Eigen::Success) throw NumericalError("eigen-decomposition failed");
  Vec ev = es.eigenvalues();
  if (ev.minCoeff() >= clip_below) return false;
  ev = ev.cwiseMax(0.0);
  m = es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
  m = symmetrize(m);
  return true;
}

}  // namespace ccmpc
