#pragma once

#include <Eigen/Core>
#include <Eigen/Geometry>

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace anerf {

using Vec3 = Eigen::Vector3d;
using Vec4 = Eigen::Vector4d;
using Mat3 = Eigen::Matrix3d;
using Mat4 = Eigen::Matrix4d;
using Affine = Eigen::Matrix<double, 3, 4>;
using VecX = Eigen::VectorXd;
using MatX = Eigen::MatrixXd;

/// Base class for all errors raised by this library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Argument shapes or values violate an operation's preconditions.
class InvalidInputError : public Error {
 public:
  using Error::Error;
};

/// A file could not be parsed; the message carries line/field context.
class ParseError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

/// Non-finite values or singular matrices where they cannot be tolerated.
class NumericalError : public Error {
 public:
  using Error::Error;
};

/// Checkpoint or file version the reader does not understand.
class VersionError : public Error {
 public:
  using Error::Error;
};

inline void require(bool condition, const std::string& message) {
  if (!condition) {
    throw InvalidInputError(message);
  }
}

/// Homogeneous 4x4 from a 3x4 affine block.
inline Mat4 to_mat4(const Affine& a) {
  Mat4 m = Mat4::Identity();
  m.topRows<3>() = a;
  return m;
}

inline Mat4 translation(const Vec3& t) {
  Mat4 m = Mat4::Identity();
  m.block<3, 1>(0, 3) = t;
  return m;
}

/// Inverse of a homogeneous matrix whose bottom row is (0,0,0,1).
inline Mat4 affine_inverse(const Mat4& m) {
  Mat4 inv = Mat4::Identity();
  const Mat3 linear_inv = m.topLeftCorner<3, 3>().inverse();
  inv.topLeftCorner<3, 3>() = linear_inv;
  inv.block<3, 1>(0, 3) = -linear_inv * m.block<3, 1>(0, 3);
  return inv;
}

}  // namespace anerf
