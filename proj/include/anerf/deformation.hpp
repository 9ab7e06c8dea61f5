#pragma once

#include "anerf/body_model.hpp"
#include "anerf/common.hpp"

#include <array>
#include <vector>

namespace anerf {

inline constexpr int kMaxNeighbors = 16;

struct DeformationConfig {
  int k_neighbors = 4;
  /// Gaussian bandwidth of the neighbor weights, in meter * weight-distance units.
  double bandwidth = 0.1;
  /// 3D mask threshold (meters).
  double mask_threshold = 0.2;
  /// Template pose of canonical space.
  PoseParams canonical_pose;

  void validate() const;
};

/// Config with defaults and the canonical pose set from a preset.
DeformationConfig make_deformation_config(const SkinnedBody& body, PosePreset preset);

/// Exact k-nearest-neighbor index over a fixed point set (kd-tree).
/// Results are ordered by ascending distance, ties by ascending point index.
class SpatialIndex {
 public:
  struct Neighbor {
    int index;
    double distance;
  };

  explicit SpatialIndex(std::vector<Vec3> points);

  /// Writes min(k, size) neighbors to out; returns the count.
  int knn(const Vec3& query, int k, Neighbor* out) const;
  std::vector<Neighbor> knn(const Vec3& query, int k) const;
  /// True when some point lies within `radius` (inclusive).
  bool any_within(const Vec3& query, double radius) const;

  const std::vector<Vec3>& points() const { return points_; }
  int size() const { return static_cast<int>(points_.size()); }

 private:
  struct Node {
    int begin;
    int end;
    int axis;      // -1 for leaves
    double split;
    int left;
    int right;
  };

  int build(int begin, int end);

  std::vector<Vec3> points_;
  std::vector<int> order_;
  std::vector<Node> nodes_;
};

SpatialIndex build_index(const std::vector<Vec3>& posed_vertices);

/// Normalized neighbor weights omega_i / omega of a query point.
struct NeighborWeights {
  int count = 0;
  std::array<int, kMaxNeighbors> indices{};
  std::array<double, kMaxNeighbors> weights{};
  std::array<double, kMaxNeighbors> distances{};
};

NeighborWeights neighbor_weights(const Vec3& x, const SpatialIndex& index, const SkinnedBody& body,
                                 const DeformationConfig& config);

/// Everything the per-point warp needs for one (body, shape, pose) triple:
/// the posed-vertex index and per-vertex canonical transforms
/// M_i(beta, theta0) * M_i(beta, theta_t)^-1. Immutable once built; rebuild
/// after any pose update. Keeps a reference to `body`, which must outlive it.
class PosedBody {
 public:
  PosedBody(const SkinnedBody& body, const ShapeParams& shape, const PoseParams& pose,
            const DeformationConfig& config, bool with_pose_jacobian = false);

  const SkinnedBody& body() const { return *body_; }
  const DeformationConfig& config() const { return config_; }
  const PoseParams& pose() const { return pose_; }
  const SpatialIndex& index() const { return index_; }
  const std::vector<Vec3>& posed_vertices() const { return index_.points(); }
  /// Blended per-vertex observation-to-canonical transform.
  const Affine& canonical_transform(int vertex) const { return to_canonical_[vertex]; }
  bool has_pose_jacobian() const { return with_jacobian_; }

  /// Axis-aligned bounds of the posed vertices.
  Eigen::AlignedBox3d bounds() const;

  struct Query {
    bool inside = false;  // mask value
    double distance = 0.0;
    NeighborWeights neighbors;
    Vec3 canonical = Vec3::Zero();
  };

  /// Mask test plus warp; the warp is only computed for points inside the mask.
  Query query(const Vec3& x) const;

  /// grad_pose += (d x0 / d theta_t)^T grad_x0 under the frozen-weights
  /// convention. grad_pose has pose_param_count() entries.
  void accumulate_pose_vjp(const NeighborWeights& neighbors, const Vec3& x, const Vec3& grad_x0,
                           Eigen::Ref<VecX> grad_pose) const;

 private:
  PosedBody(const SkinnedBody& body, const ShapeParams& shape, const PoseParams& pose,
            const DeformationConfig& config, bool with_pose_jacobian, VertexTransforms posed);

  struct AncestorBlend {
    int joint;
    Affine blend;   // sum of b_ij G'_j over descendants j of `joint`
    double weight;  // sum of those b_ij
  };

  const SkinnedBody* body_;
  DeformationConfig config_;
  PoseParams pose_;
  SpatialIndex index_;
  std::vector<Affine> to_canonical_;
  bool with_jacobian_ = false;

  // Jacobian support.
  std::vector<Affine> skin_inverse_;        // W_i^-1
  std::vector<Mat3> canonical_linear_;      // linear part of M_i(theta0)
  std::vector<int> ancestor_offset_;
  std::vector<AncestorBlend> ancestors_;
  std::vector<std::array<Affine, 3>> joint_derivative_;  // D_ac
  std::vector<std::array<Mat3, 3>> rotation_derivative_;
};

Vec3 warp_to_canonical(const Vec3& x, const PosedBody& posed);
double weighted_distance(const Vec3& x, const PosedBody& posed);
bool mask_indicator(const Vec3& x, const PosedBody& posed);

/// 3 x P Jacobian of warp_to_canonical w.r.t. the flattened pose, with the
/// neighbor set and weights held fixed. Requires a context built with
/// with_pose_jacobian = true.
Eigen::Matrix<double, 3, Eigen::Dynamic> warp_pose_jacobian(const Vec3& x, const PosedBody& posed);

}  // namespace anerf
