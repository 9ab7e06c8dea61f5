#pragma once

#include "anerf/common.hpp"

#include <array>

namespace anerf {

/// Below this axis-angle magnitude the Rodrigues formula switches to its
/// Taylor expansion.
inline constexpr double kSmallAngle = 1e-8;

Mat3 skew(const Vec3& v);

/// Axis-angle to rotation matrix (Rodrigues).
Mat3 axis_angle_to_matrix(const Vec3& axis_angle);

/// Partial derivatives dR/dv_c for c = 0, 1, 2.
std::array<Mat3, 3> axis_angle_derivatives(const Vec3& axis_angle);

/// Rotation matrix to axis-angle with magnitude in [0, pi].
Vec3 matrix_to_axis_angle(const Mat3& rotation);

/// Geodesic angle (radians) between two rotations.
double rotation_angle_between(const Mat3& a, const Mat3& b);

}  // namespace anerf
