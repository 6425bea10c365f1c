#pragma once

#include <stdexcept>
#include <string>

#include <Eigen/Dense>

namespace koopquad {

using Vec3 = Eigen::Vector3d;
using Vec4 = Eigen::Vector4d;
using Vec9 = Eigen::Matrix<double, 9, 1>;
using Mat3 = Eigen::Matrix3d;
using Mat34 = Eigen::Matrix<double, 3, 4>;
using Mat93 = Eigen::Matrix<double, 9, 3>;
using VecX = Eigen::VectorXd;
using MatX = Eigen::MatrixXd;

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class NonSkewError : public Error {
 public:
  using Error::Error;
};

class NumericalBlowup : public Error {
 public:
  using Error::Error;
};

class InvalidRotation : public Error {
 public:
  using Error::Error;
};

/// Angular velocity cannot be recovered from a lifted state with N < 2.
class NeedsN2 : public Error {
 public:
  using Error::Error;
};

class SingularInertia : public Error {
 public:
  using Error::Error;
};

class RankDeficient : public Error {
 public:
  using Error::Error;
};

class InfeasibleBounds : public Error {
 public:
  using Error::Error;
};

class InvalidArgument : public Error {
 public:
  using Error::Error;
};

}  // namespace koopquad
