#pragma once

#include "anerf/common.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace anerf {

/// Per-vertex 3D offsets for one blendshape coefficient (rows = vertices).
using VertexOffsets = Eigen::Matrix<double, Eigen::Dynamic, 3>;

/// A parametric skinned body: rest mesh, joint tree, blend-skinning weights
/// and linear shape/pose correctives.
///
/// Joints are stored in topological order: parent[0] == -1 and
/// parent[j] < j for every other joint. Pose correctives, when present, are
/// driven by the flattened (R_j - I) entries of the non-root joints, so
/// pose_basis is either empty or has 9 * (K - 1) entries.
struct SkinnedBody {
  std::vector<Vec3> rest_vertices;
  std::vector<int> parent;
  std::vector<Vec3> joint_rest_positions;
  /// Optional; empty or one entry per joint.
  std::vector<std::string> joint_names;
  /// V x K, rows are convex combinations.
  MatX blend_weights;
  std::vector<VertexOffsets> shape_basis;
  std::vector<VertexOffsets> pose_basis;
  std::vector<Eigen::Vector3i> faces;

  int vertex_count() const { return static_cast<int>(rest_vertices.size()); }
  int joint_count() const { return static_cast<int>(parent.size()); }
  int shape_count() const { return static_cast<int>(shape_basis.size()); }
  /// Root translation plus one axis-angle per joint.
  int pose_param_count() const { return 3 + 3 * joint_count(); }
  /// -1 when the body carries no joint names or the name is unknown.
  int joint_index(const std::string& name) const;

  bool operator==(const SkinnedBody& other) const;
};

/// Per-frame pose. The root joint carries the global orientation and the
/// translation, so cameras can stay fixed.
struct PoseParams {
  Vec3 root_translation = Vec3::Zero();
  std::vector<Vec3> joint_rotations;

  static PoseParams zero(int joint_count);
  /// [tx, ty, tz, r0x, r0y, r0z, r1x, ...]
  VecX flatten() const;
  static PoseParams unflatten(const VecX& values);
  int joint_count() const { return static_cast<int>(joint_rotations.size()); }

  bool operator==(const PoseParams& other) const = default;
};

struct ShapeParams {
  VecX coefficients;

  static ShapeParams zero(int count) { return ShapeParams{VecX::Zero(count)}; }
};

struct VertexTransforms {
  /// Rest-to-posed homogeneous transform per vertex.
  std::vector<Mat4> transforms;
  std::vector<Vec3> posed_vertices;
};

/// Throws InvalidInputError naming the first violated invariant.
void validate_body(const SkinnedBody& body);
void validate_pose(const SkinnedBody& body, const PoseParams& pose);

/// World transform G_j of every joint frame. At the zero pose G_j is a pure
/// translation to the joint's rest position.
std::vector<Mat4> forward_kinematics(const SkinnedBody& body, const PoseParams& pose);

/// Rest-relative skinning transforms G_j * translate(-rest_j).
std::vector<Mat4> skinning_transforms(const SkinnedBody& body, const PoseParams& pose);

/// Flattened (R_j - I) of the non-root joints; length 9 * (K - 1).
VecX pose_feature(const SkinnedBody& body, const PoseParams& pose);

/// Shape plus pose blendshape offset of one vertex.
Vec3 blendshape_offset(const SkinnedBody& body, const ShapeParams& shape, const VecX& pose_feat,
                       int vertex);

/// M_i = (sum_j b_ij G_j) * translate(B_S,i(beta) + B_P,i(theta)).
VertexTransforms vertex_transforms(const SkinnedBody& body, const ShapeParams& shape,
                                   const PoseParams& pose);

void save_body(const SkinnedBody& body, const std::filesystem::path& path);
SkinnedBody load_body(const std::filesystem::path& path);

struct ToyBodySpec {
  /// 10 selects the humanoid (torso, head, two-segment arms and legs); any
  /// other count >= 2 builds a vertical chain of capsules.
  int joint_count = 10;
  /// Approximate number of surface vertices per capsule segment.
  int vertices_per_segment = 220;
  double torso_radius = 0.14;
  double head_radius = 0.10;
  double upper_arm_radius = 0.05;
  double forearm_radius = 0.045;
  double thigh_radius = 0.07;
  double shin_radius = 0.055;
  /// Half-width (meters) of the weight transition around each joint.
  double blend_half_width = 0.06;
};

SkinnedBody make_toy_body(const ToyBodySpec& spec, std::uint64_t seed);

/// Rest-pose capsule of the toy body, rigidly driven by `joint`.
struct Capsule {
  Vec3 start;
  Vec3 end;
  double radius;
  int joint;
};

std::vector<Capsule> toy_body_capsules(const ToyBodySpec& spec);

enum class PosePreset { kT, kA, kX };

PosePreset parse_pose_preset(const std::string& name);
std::string to_string(PosePreset preset);

/// Template pose built from named shoulder/hip joints. Bodies without those
/// names get the zero (rest) pose for every preset.
PoseParams preset_pose(const SkinnedBody& body, PosePreset preset);

}  // namespace anerf
