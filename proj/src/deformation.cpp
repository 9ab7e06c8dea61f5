#include "anerf/deformation.hpp"

#include "anerf/rotation.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace anerf {

namespace {

constexpr int kLeafSize = 8;

// Candidate ordering used everywhere: squared distance, then point index.
bool closer(double d2_a, int idx_a, double d2_b, int idx_b) {
  return d2_a < d2_b || (d2_a == d2_b && idx_a < idx_b);
}

}  // namespace

void DeformationConfig::validate() const {
  require(k_neighbors >= 1 && k_neighbors <= kMaxNeighbors,
          "k_neighbors must be in [1, " + std::to_string(kMaxNeighbors) + "]");
  require(bandwidth > 0.0, "bandwidth must be positive");
  require(mask_threshold > 0.0, "mask_threshold must be positive");
}

DeformationConfig make_deformation_config(const SkinnedBody& body, PosePreset preset) {
  DeformationConfig config;
  config.canonical_pose = preset_pose(body, preset);
  return config;
}

// ---------------------------------------------------------------------------
// SpatialIndex
// ---------------------------------------------------------------------------

SpatialIndex::SpatialIndex(std::vector<Vec3> points) : points_(std::move(points)) {
  require(!points_.empty(), "spatial index needs at least one vertex");
  order_.resize(points_.size());
  std::iota(order_.begin(), order_.end(), 0);
  nodes_.reserve(2 * points_.size() / kLeafSize + 2);
  build(0, static_cast<int>(points_.size()));
}

int SpatialIndex::build(int begin, int end) {
  const int id = static_cast<int>(nodes_.size());
  nodes_.push_back({begin, end, -1, 0.0, -1, -1});
  if (end - begin <= kLeafSize) {
    return id;
  }
  Eigen::AlignedBox3d box;
  for (int i = begin; i < end; ++i) {
    box.extend(points_[order_[i]]);
  }
  int axis = 0;
  box.sizes().maxCoeff(&axis);
  const int mid = begin + (end - begin) / 2;
  std::nth_element(order_.begin() + begin, order_.begin() + mid, order_.begin() + end,
                   [&](int a, int b) {
                     const double ca = points_[a][axis];
                     const double cb = points_[b][axis];
                     return ca < cb || (ca == cb && a < b);
                   });
  const double split = points_[order_[mid]][axis];
  const int left = build(begin, mid);
  const int right = build(mid, end);
  nodes_[id].axis = axis;
  nodes_[id].split = split;
  nodes_[id].left = left;
  nodes_[id].right = right;
  return id;
}

int SpatialIndex::knn(const Vec3& query, int k, Neighbor* out) const {
  k = std::min(k, size());
  if (k <= 0) {
    return 0;
  }
  // Sorted candidate list (ascending), at most k entries.
  std::array<double, kMaxNeighbors> best_d2;
  std::array<int, kMaxNeighbors> best_idx;
  std::vector<double> big_d2;
  std::vector<int> big_idx;
  double* d2s = best_d2.data();
  int* idxs = best_idx.data();
  if (k > kMaxNeighbors) {
    big_d2.resize(static_cast<size_t>(k));
    big_idx.resize(static_cast<size_t>(k));
    d2s = big_d2.data();
    idxs = big_idx.data();
  }
  int count = 0;

  auto offer = [&](double d2, int idx) {
    if (count == k && !closer(d2, idx, d2s[k - 1], idxs[k - 1])) {
      return;
    }
    int pos = count < k ? count++ : k - 1;
    while (pos > 0 && closer(d2, idx, d2s[pos - 1], idxs[pos - 1])) {
      d2s[pos] = d2s[pos - 1];
      idxs[pos] = idxs[pos - 1];
      --pos;
    }
    d2s[pos] = d2;
    idxs[pos] = idx;
  };

  // Iterative depth-first traversal with (node, lower bound) stack.
  std::array<std::pair<int, double>, 64> stack;
  int top = 0;
  stack[top++] = {0, 0.0};
  while (top > 0) {
    const auto [node_id, bound] = stack[--top];
    if (count == k && bound > d2s[k - 1]) {
      continue;
    }
    const Node& node = nodes_[node_id];
    if (node.axis < 0) {
      for (int i = node.begin; i < node.end; ++i) {
        const int idx = order_[i];
        offer((points_[idx] - query).squaredNorm(), idx);
      }
      continue;
    }
    const double diff = query[node.axis] - node.split;
    const int near_child = diff < 0.0 ? node.left : node.right;
    const int far_child = diff < 0.0 ? node.right : node.left;
    stack[top++] = {far_child, std::max(bound, diff * diff)};
    stack[top++] = {near_child, bound};
  }
  for (int i = 0; i < count; ++i) {
    out[i] = {idxs[i], std::sqrt(d2s[i])};
  }
  return count;
}

std::vector<SpatialIndex::Neighbor> SpatialIndex::knn(const Vec3& query, int k) const {
  std::vector<Neighbor> out(static_cast<size_t>(std::max(0, std::min(k, size()))));
  const int n = knn(query, k, out.data());
  out.resize(static_cast<size_t>(n));
  return out;
}

bool SpatialIndex::any_within(const Vec3& query, double radius) const {
  const double r2 = radius * radius;
  std::array<int, 64> stack;
  int top = 0;
  stack[top++] = 0;
  while (top > 0) {
    const Node& node = nodes_[stack[--top]];
    if (node.axis < 0) {
      for (int i = node.begin; i < node.end; ++i) {
        if ((points_[order_[i]] - query).squaredNorm() <= r2) {
          return true;
        }
      }
      continue;
    }
    const double diff = query[node.axis] - node.split;
    const int near_child = diff < 0.0 ? node.left : node.right;
    const int far_child = diff < 0.0 ? node.right : node.left;
    if (diff * diff <= r2) {
      stack[top++] = far_child;
    }
    stack[top++] = near_child;
  }
  return false;
}

SpatialIndex build_index(const std::vector<Vec3>& posed_vertices) {
  return SpatialIndex(posed_vertices);
}

// ---------------------------------------------------------------------------
// Neighbor weights
// ---------------------------------------------------------------------------

NeighborWeights neighbor_weights(const Vec3& x, const SpatialIndex& index, const SkinnedBody& body,
                                 const DeformationConfig& config) {
  std::array<SpatialIndex::Neighbor, kMaxNeighbors> found;
  NeighborWeights out;
  out.count = index.knn(x, config.k_neighbors, found.data());
  const auto b_hat = body.blend_weights.row(found[0].index);
  const double inv_two_sigma2 = 1.0 / (2.0 * config.bandwidth * config.bandwidth);
  double total = 0.0;
  for (int n = 0; n < out.count; ++n) {
    const int i = found[n].index;
    const double weight_gap = (b_hat - body.blend_weights.row(i)).norm();
    const double w = std::exp(-found[n].distance * weight_gap * inv_two_sigma2);
    out.indices[n] = i;
    out.distances[n] = found[n].distance;
    out.weights[n] = w;
    total += w;
  }
  // total >= 1: the nearest vertex has zero weight gap.
  for (int n = 0; n < out.count; ++n) {
    out.weights[n] /= total;
  }
  return out;
}

// ---------------------------------------------------------------------------
// PosedBody
// ---------------------------------------------------------------------------

PosedBody::PosedBody(const SkinnedBody& body, const ShapeParams& shape, const PoseParams& pose,
                     const DeformationConfig& config, bool with_pose_jacobian)
    : PosedBody(body, shape, pose, config, with_pose_jacobian,
                vertex_transforms(body, shape, pose)) {}

PosedBody::PosedBody(const SkinnedBody& body, const ShapeParams& shape, const PoseParams& pose,
                     const DeformationConfig& config, bool with_pose_jacobian,
                     VertexTransforms posed)
    : body_(&body),
      config_(config),
      pose_(pose),
      index_(std::move(posed.posed_vertices)),
      with_jacobian_(with_pose_jacobian) {
  config_.validate();
  const VertexTransforms canonical = vertex_transforms(body, shape, config.canonical_pose);
  const int v = body.vertex_count();
  to_canonical_.resize(static_cast<size_t>(v));
  for (int i = 0; i < v; ++i) {
    const Mat4& m = posed.transforms[i];
    if (std::abs(m.topLeftCorner<3, 3>().determinant()) < 1e-12) {
      throw NumericalError("vertex " + std::to_string(i) + " has a singular skinning transform");
    }
    to_canonical_[i] = (canonical.transforms[i] * affine_inverse(m)).topRows<3>();
  }
  if (!with_jacobian_) {
    return;
  }

  const int k = body.joint_count();
  const auto skin = skinning_transforms(body, pose);
  const auto world = forward_kinematics(body, pose);

  // D_ac = G_parent(a) * [dR_ac 0; 0 0] * G_a^-1: world-frame derivative of
  // every descendant transform w.r.t. rotation parameter (a, c).
  joint_derivative_.resize(static_cast<size_t>(k));
  rotation_derivative_.resize(static_cast<size_t>(k));
  for (int a = 0; a < k; ++a) {
    const auto dr = axis_angle_derivatives(pose.joint_rotations[a]);
    rotation_derivative_[a] = dr;
    const Mat4 parent_world = a == 0 ? Mat4::Identity() : world[body.parent[a]];
    const Mat4 inv_world = affine_inverse(world[a]);
    for (int c = 0; c < 3; ++c) {
      Mat4 e = Mat4::Zero();
      e.topLeftCorner<3, 3>() = dr[c];
      joint_derivative_[a][c] = (parent_world * e * inv_world).topRows<3>();
    }
  }

  skin_inverse_.resize(static_cast<size_t>(v));
  canonical_linear_.resize(static_cast<size_t>(v));
  ancestor_offset_.assign(static_cast<size_t>(v) + 1, 0);
  std::vector<double> chain_weight(static_cast<size_t>(k));
  for (int i = 0; i < v; ++i) {
    Mat4 blended = Mat4::Zero();
    std::fill(chain_weight.begin(), chain_weight.end(), 0.0);
    for (int j = 0; j < k; ++j) {
      const double w = body.blend_weights(i, j);
      if (w == 0.0) {
        continue;
      }
      blended += w * skin[j];
      for (int a = j; a >= 0; a = body.parent[a]) {
        chain_weight[a] += w;
      }
    }
    blended.row(3) << 0.0, 0.0, 0.0, 1.0;
    skin_inverse_[i] = affine_inverse(blended).topRows<3>();
    canonical_linear_[i] = canonical.transforms[i].topLeftCorner<3, 3>();
    for (int a = 0; a < k; ++a) {
      if (chain_weight[a] == 0.0) {
        continue;
      }
      Affine sum = Affine::Zero();
      for (int j = 0; j < k; ++j) {
        const double w = body.blend_weights(i, j);
        if (w == 0.0) {
          continue;
        }
        bool descends = false;
        for (int p = j; p >= 0 && !descends; p = body.parent[p]) {
          descends = p == a;
        }
        if (descends) {
          sum += w * skin[j].topRows<3>();
        }
      }
      ancestors_.push_back({a, sum, chain_weight[a]});
    }
    ancestor_offset_[i + 1] = static_cast<int>(ancestors_.size());
  }
}

Eigen::AlignedBox3d PosedBody::bounds() const {
  Eigen::AlignedBox3d box;
  for (const auto& p : posed_vertices()) {
    box.extend(p);
  }
  return box;
}

PosedBody::Query PosedBody::query(const Vec3& x) const {
  Query q;
  // The weighted distance is at least the nearest-vertex distance, so points
  // with no vertex within the threshold are outside the mask.
  if (!index_.any_within(x, config_.mask_threshold)) {
    q.distance = std::numeric_limits<double>::infinity();
    return q;
  }
  q.neighbors = neighbor_weights(x, index_, *body_, config_);
  for (int n = 0; n < q.neighbors.count; ++n) {
    q.distance += q.neighbors.weights[n] * q.neighbors.distances[n];
  }
  q.inside = q.distance <= config_.mask_threshold;
  if (q.inside) {
    Affine blended = Affine::Zero();
    for (int n = 0; n < q.neighbors.count; ++n) {
      blended += q.neighbors.weights[n] * to_canonical_[q.neighbors.indices[n]];
    }
    q.canonical = blended * x.homogeneous();
  }
  return q;
}

void PosedBody::accumulate_pose_vjp(const NeighborWeights& neighbors, const Vec3& x,
                                    const Vec3& grad_x0, Eigen::Ref<VecX> grad_pose) const {
  if (!with_jacobian_) {
    throw InvalidInputError("PosedBody was built without pose Jacobian support");
  }
  const SkinnedBody& body = *body_;
  const bool pose_correctives = !body.pose_basis.empty();
  for (int n = 0; n < neighbors.count; ++n) {
    const int i = neighbors.indices[n];
    const double w = neighbors.weights[n];
    // d x0 = -sum_i w_i lin(A_i) (dM_i y_i), with dM_i y_i = D_ac S_ia W_i^-1 x.
    const Vec3 u = to_canonical_[i].leftCols<3>().transpose() * grad_x0;
    const Vec3 z = skin_inverse_[i] * x.homogeneous();
    grad_pose.head<3>() -= w * u;
    for (int t = ancestor_offset_[i]; t < ancestor_offset_[i + 1]; ++t) {
      const AncestorBlend& anc = ancestors_[t];
      Vec4 s;
      s.head<3>() = anc.blend * z.homogeneous();
      s[3] = anc.weight;
      for (int c = 0; c < 3; ++c) {
        grad_pose[3 + 3 * anc.joint + c] -= w * u.dot(joint_derivative_[anc.joint][c] * s);
      }
    }
    if (pose_correctives) {
      // Pose blendshapes: dM_i y_i = lin(W_i) dB_i, giving -w_i lin(M_i(theta0)) dB_i.
      const Vec3 u0 = canonical_linear_[i].transpose() * grad_x0;
      for (int j = 1; j < body.joint_count(); ++j) {
        for (int c = 0; c < 3; ++c) {
          const Mat3& dr = rotation_derivative_[j][c];
          Vec3 db = Vec3::Zero();
          for (int m = 0; m < 9; ++m) {
            db += dr(m / 3, m % 3) * body.pose_basis[9 * (j - 1) + m].row(i).transpose();
          }
          grad_pose[3 + 3 * j + c] -= w * u0.dot(db);
        }
      }
    }
  }
}

Vec3 warp_to_canonical(const Vec3& x, const PosedBody& posed) {
  const NeighborWeights nw = neighbor_weights(x, posed.index(), posed.body(), posed.config());
  Affine blended = Affine::Zero();
  for (int n = 0; n < nw.count; ++n) {
    blended += nw.weights[n] * posed.canonical_transform(nw.indices[n]);
  }
  return blended * x.homogeneous();
}

double weighted_distance(const Vec3& x, const PosedBody& posed) {
  const NeighborWeights nw = neighbor_weights(x, posed.index(), posed.body(), posed.config());
  double d = 0.0;
  for (int n = 0; n < nw.count; ++n) {
    d += nw.weights[n] * nw.distances[n];
  }
  return d;
}

bool mask_indicator(const Vec3& x, const PosedBody& posed) {
  return weighted_distance(x, posed) <= posed.config().mask_threshold;
}

Eigen::Matrix<double, 3, Eigen::Dynamic> warp_pose_jacobian(const Vec3& x, const PosedBody& posed) {
  const NeighborWeights nw = neighbor_weights(x, posed.index(), posed.body(), posed.config());
  const int p = posed.body().pose_param_count();
  Eigen::Matrix<double, 3, Eigen::Dynamic> jac(3, p);
  for (int r = 0; r < 3; ++r) {
    VecX row = VecX::Zero(p);
    posed.accumulate_pose_vjp(nw, x, Vec3::Unit(r), row);
    jac.row(r) = row.transpose();
  }
  return jac;
}

}  // namespace anerf
