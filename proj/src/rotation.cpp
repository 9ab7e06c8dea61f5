#include "anerf/rotation.hpp"

#include <cmath>

namespace anerf {

Mat3 skew(const Vec3& v) {
  Mat3 s;
  s << 0.0, -v.z(), v.y(),  //
      v.z(), 0.0, -v.x(),   //
      -v.y(), v.x(), 0.0;
  return s;
}

Mat3 axis_angle_to_matrix(const Vec3& axis_angle) {
  const double angle = axis_angle.norm();
  const Mat3 k = skew(axis_angle);
  if (angle < kSmallAngle) {
    return Mat3::Identity() + k + 0.5 * k * k;
  }
  const double a = std::sin(angle) / angle;
  const double b = (1.0 - std::cos(angle)) / (angle * angle);
  return Mat3::Identity() + a * k + b * k * k;
}

std::array<Mat3, 3> axis_angle_derivatives(const Vec3& axis_angle) {
  std::array<Mat3, 3> out;
  const double sq = axis_angle.squaredNorm();
  if (std::sqrt(sq) < kSmallAngle) {
    for (int c = 0; c < 3; ++c) {
      out[c] = skew(Vec3::Unit(c));
    }
    return out;
  }
  // dR/dv_c = (v_c [v]x + [v x (I - R) e_c]x) R / |v|^2
  const Mat3 r = axis_angle_to_matrix(axis_angle);
  const Mat3 k = skew(axis_angle);
  const Mat3 i_minus_r = Mat3::Identity() - r;
  for (int c = 0; c < 3; ++c) {
    const Vec3 w = axis_angle.cross(i_minus_r.col(c));
    out[c] = (axis_angle[c] * k + skew(w)) * r / sq;
  }
  return out;
}

Vec3 matrix_to_axis_angle(const Mat3& rotation) {
  const Eigen::AngleAxisd aa(rotation);
  return aa.axis() * aa.angle();
}

double rotation_angle_between(const Mat3& a, const Mat3& b) {
  return Eigen::AngleAxisd(Mat3(a.transpose() * b)).angle();
}

}  // namespace anerf
