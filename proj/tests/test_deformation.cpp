#include "anerf/deformation.hpp"
#include "anerf/rotation.hpp"
#include "test_helpers.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <random>

using namespace anerf;

namespace {

SkinnedBody point_body(const std::vector<Vec3>& points, const MatX& weights) {
  SkinnedBody body;
  body.rest_vertices = points;
  const int k = static_cast<int>(weights.cols());
  for (int j = 0; j < k; ++j) {
    body.parent.push_back(j - 1);
    body.joint_rest_positions.push_back(Vec3(0.0, 0.1 * j, 0.0));
  }
  body.blend_weights = weights;
  return body;
}

std::vector<SpatialIndex::Neighbor> brute_knn(const std::vector<Vec3>& pts, const Vec3& q, int k) {
  std::vector<std::pair<double, int>> all;
  for (int i = 0; i < static_cast<int>(pts.size()); ++i) {
    all.push_back({(pts[i] - q).squaredNorm(), i});
  }
  std::sort(all.begin(), all.end());
  std::vector<SpatialIndex::Neighbor> out;
  for (int n = 0; n < std::min<int>(k, static_cast<int>(all.size())); ++n) {
    out.push_back({all[n].second, std::sqrt(all[n].first)});
  }
  return out;
}

bool want_within(const std::vector<Vec3>& pts, const Vec3& q, double r) {
  for (const auto& p : pts) {
    if ((p - q).squaredNorm() <= r * r) {
      return true;
    }
  }
  return false;
}

// The warp evaluated from scratch: brute-force neighbors, exp/normalize weights,
// full vertex transforms for both poses, blended matrix applied last.
struct NaiveWarp {
  std::vector<int> idx;
  std::vector<double> w;
};

NaiveWarp naive_neighbors(const SkinnedBody& body, const std::vector<Vec3>& posed, const Vec3& x,
                          const DeformationConfig& cfg) {
  const auto nn = brute_knn(posed, x, cfg.k_neighbors);
  NaiveWarp out;
  double total = 0.0;
  for (const auto& n : nn) {
    const double gap = (body.blend_weights.row(nn[0].index) - body.blend_weights.row(n.index)).norm();
    const double w = std::exp(-n.distance * gap / (2.0 * cfg.bandwidth * cfg.bandwidth));
    out.idx.push_back(n.index);
    out.w.push_back(w);
    total += w;
  }
  for (double& w : out.w) {
    w /= total;
  }
  return out;
}

Vec3 naive_warp(const SkinnedBody& body, const ShapeParams& shape, const PoseParams& pose,
                const DeformationConfig& cfg, const NaiveWarp& nw, const Vec3& x) {
  const auto posed = vertex_transforms(body, shape, pose);
  const auto canon = vertex_transforms(body, shape, cfg.canonical_pose);
  Mat4 blended = Mat4::Zero();
  for (size_t n = 0; n < nw.idx.size(); ++n) {
    const int i = nw.idx[n];
    blended += nw.w[n] * canon.transforms[i] * posed.transforms[i].inverse();
  }
  return (blended * x.homogeneous()).head<3>();
}

DeformationConfig chain_config(const SkinnedBody& body, std::mt19937_64& rng) {
  DeformationConfig cfg;
  cfg.canonical_pose = testing_util::random_pose(body.joint_count(), rng, 0.5);
  return cfg;
}

}  // namespace

TEST(SpatialIndex, SingleVertex) {
  const SpatialIndex index({Vec3(1, 2, 3)});
  const auto nn = index.knn(Vec3(1, 2, 5), 4);
  ASSERT_EQ(nn.size(), 1u);
  EXPECT_EQ(nn[0].index, 0);
  EXPECT_DOUBLE_EQ(nn[0].distance, 2.0);
}

TEST(SpatialIndex, MatchesLinearScan) {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(-1, 1);
  std::vector<Vec3> pts;
  for (int i = 0; i < 1000; ++i) {
    pts.push_back(Vec3(u(rng), u(rng), u(rng)));
  }
  const SpatialIndex index = build_index(pts);
  for (int q = 0; q < 100; ++q) {
    const Vec3 x(1.2 * u(rng), 1.2 * u(rng), 1.2 * u(rng));
    for (int k : {1, 4, 16}) {
      const auto got = index.knn(x, k);
      const auto want = brute_knn(pts, x, k);
      ASSERT_EQ(got.size(), want.size());
      for (size_t n = 0; n < got.size(); ++n) {
        EXPECT_EQ(got[n].index, want[n].index);
        EXPECT_EQ(got[n].distance, want[n].distance);
      }
    }
    const double r = 0.1 + 0.2 * std::abs(u(rng));
    EXPECT_EQ(index.any_within(x, r), want_within(pts, x, r));
  }
}

TEST(SpatialIndex, DuplicatesComeFirstByIndex) {
  std::vector<Vec3> pts(40, Vec3(5, 5, 5));
  pts[7] = Vec3(0.1, 0, 0);
  pts[31] = Vec3(0.1, 0, 0);
  pts[12] = Vec3(0.05, 0.3, 0);
  const SpatialIndex index(pts);
  const auto nn = index.knn(Vec3::Zero(), 3);
  ASSERT_EQ(nn.size(), 3u);
  EXPECT_EQ(nn[0].index, 7);
  EXPECT_EQ(nn[1].index, 31);
  EXPECT_EQ(nn[2].index, 12);
}

TEST(SpatialIndex, EmptyIsRejected) {
  EXPECT_THROW(build_index({}), InvalidInputError);
}

TEST(NeighborWeights, SingleNeighborIsOne) {
  const SkinnedBody body = testing_util::chain_body(3, 30, 0);
  DeformationConfig cfg;
  cfg.k_neighbors = 1;
  const SpatialIndex index(body.rest_vertices);
  const auto nw = neighbor_weights(Vec3(0.1, 0.2, 0.0), index, body, cfg);
  ASSERT_EQ(nw.count, 1);
  EXPECT_EQ(nw.weights[0], 1.0);
}

TEST(NeighborWeights, SharedBlendWeightsAreUniform) {
  MatX w(4, 2);
  w.col(0).setConstant(0.3);
  w.col(1).setConstant(0.7);
  const SkinnedBody body =
      point_body({Vec3(0.01, 0, 0), Vec3(0, 0.05, 0), Vec3(0, 0, 0.2), Vec3(-0.4, 0, 0)}, w);
  const SpatialIndex index(body.rest_vertices);
  const auto nw = neighbor_weights(Vec3::Zero(), index, body, DeformationConfig{});
  ASSERT_EQ(nw.count, 4);
  for (int n = 0; n < 4; ++n) {
    EXPECT_EQ(nw.weights[n], 0.25);
  }
}

TEST(NeighborWeights, HandComputedOracle) {
  MatX w(4, 3);
  w << 1.0, 0.0, 0.0,  //
      0.5, 0.5, 0.0,   //
      0.0, 1.0, 0.0,   //
      0.2, 0.3, 0.5;
  const SkinnedBody body = point_body(
      {Vec3(0.02, 0, 0), Vec3(0, 0.05, 0), Vec3(0, 0, -0.09), Vec3(0.1, 0.1, 0)}, w);
  DeformationConfig cfg;
  cfg.bandwidth = 0.1;
  const SpatialIndex index(body.rest_vertices);
  const auto nw = neighbor_weights(Vec3::Zero(), index, body, cfg);
  // Distances 0.02, 0.05, 0.09, sqrt(0.02); gaps to b_hat = (1,0,0).
  const double d[4] = {0.02, 0.05, 0.09, std::sqrt(0.02)};
  const double g[4] = {0.0, std::sqrt(0.5), std::sqrt(2.0), std::sqrt(0.64 + 0.09 + 0.25)};
  double e[4];
  double total = 0.0;
  for (int n = 0; n < 4; ++n) {
    e[n] = std::exp(-d[n] * g[n] / 0.02);
    total += e[n];
  }
  ASSERT_EQ(nw.count, 4);
  for (int n = 0; n < 4; ++n) {
    EXPECT_EQ(nw.indices[n], n);
    EXPECT_NEAR(nw.weights[n], e[n] / total, 1e-12);
    EXPECT_NEAR(nw.distances[n], d[n], 1e-15);
  }
}

TEST(NeighborWeights, PartitionOfUnity) {
  const SkinnedBody body = make_toy_body({}, 3);
  const PosedBody posed(body, ShapeParams::zero(body.shape_count()),
                        preset_pose(body, PosePreset::kA),
                        make_deformation_config(body, PosePreset::kX));
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> u(-1, 1);
  for (int t = 0; t < 500; ++t) {
    const Vec3 x(0.8 * u(rng), 0.8 * u(rng), 0.3 * u(rng));
    const auto nw = neighbor_weights(x, posed.index(), body, posed.config());
    double s = 0.0;
    for (int n = 0; n < nw.count; ++n) {
      EXPECT_GE(nw.weights[n], 0.0);
      s += nw.weights[n];
      for (int m = 0; m < n; ++m) {
        EXPECT_NE(nw.indices[n], nw.indices[m]);
      }
    }
    EXPECT_NEAR(s, 1.0, 1e-6);
  }
}

TEST(Warp, IdentityAtCanonicalPose) {
  const SkinnedBody body = make_toy_body({}, 3);
  const DeformationConfig cfg = make_deformation_config(body, PosePreset::kX);
  const PosedBody posed(body, ShapeParams{VecX::Constant(body.shape_count(), 0.5)},
                        cfg.canonical_pose, cfg);
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(-1, 1);
  for (int t = 0; t < 2000; ++t) {
    const Vec3 x(u(rng), u(rng), u(rng));
    EXPECT_LT((warp_to_canonical(x, posed) - x).norm(), 1e-10);
  }
}

TEST(Warp, RigidElbowQuarterTurn) {
  const SkinnedBody body = make_toy_body({}, 1);
  const int elbow = body.joint_index("l_elbow");
  const DeformationConfig cfg = make_deformation_config(body, PosePreset::kT);
  PoseParams pose = cfg.canonical_pose;
  pose.joint_rotations[elbow] = Vec3(0, 0, M_PI / 2);
  const PosedBody posed(body, ShapeParams::zero(body.shape_count()), pose, cfg);
  const auto g_t = forward_kinematics(body, pose);
  const auto g_0 = forward_kinematics(body, cfg.canonical_pose);
  const Mat4 rigid = g_0[elbow] * g_t[elbow].inverse();
  // Points near the middle of the bent forearm: all neighbors one-hot on the elbow.
  const Vec3 wrist_dir = (g_t[elbow].topLeftCorner<3, 3>() * Vec3(1, 0, 0));
  int checked = 0;
  for (double s : {0.10, 0.13, 0.16}) {
    for (double off : {-0.01, 0.0, 0.01}) {
      const Vec3 x = g_t[elbow].block<3, 1>(0, 3) + s * wrist_dir + Vec3(0, 0, off);
      const auto nw = neighbor_weights(x, posed.index(), body, cfg);
      bool one_hot = true;
      for (int n = 0; n < nw.count; ++n) {
        one_hot = one_hot && body.blend_weights(nw.indices[n], elbow) == 1.0;
      }
      if (!one_hot) {
        continue;
      }
      ++checked;
      const Vec3 expected = (rigid * x.homogeneous()).head<3>();
      EXPECT_LT((warp_to_canonical(x, posed) - expected).norm(), 1e-12);
    }
  }
  EXPECT_GT(checked, 3);
}

TEST(Warp, MatchesNaiveEquationOracle) {
  std::mt19937_64 rng(8);
  std::uniform_real_distribution<double> u(-1, 1);
  for (int trial = 0; trial < 10; ++trial) {
    const SkinnedBody body = testing_util::chain_body(4, 48, 2, trial % 2 == 1, 100 + trial);
    const DeformationConfig cfg = chain_config(body, rng);
    const ShapeParams shape{VecX::Random(2)};
    const PoseParams pose = testing_util::random_pose(4, rng, 0.9);
    const PosedBody posed(body, shape, pose, cfg);
    const auto verts = vertex_transforms(body, shape, pose).posed_vertices;
    for (int q = 0; q < 20; ++q) {
      const Vec3 x = verts[q % verts.size()] + 0.05 * Vec3(u(rng), u(rng), u(rng));
      const NaiveWarp nw = naive_neighbors(body, verts, x, cfg);
      const Vec3 want = naive_warp(body, shape, pose, cfg, nw, x);
      EXPECT_LT((warp_to_canonical(x, posed) - want).norm(), 1e-9);
      double d = 0.0;
      for (size_t n = 0; n < nw.idx.size(); ++n) {
        d += nw.w[n] * (verts[nw.idx[n]] - x).norm();
      }
      EXPECT_NEAR(weighted_distance(x, posed), d, 1e-12);
      EXPECT_EQ(mask_indicator(x, posed), d <= cfg.mask_threshold);
      const auto q_out = posed.query(x);
      EXPECT_EQ(q_out.inside, d <= cfg.mask_threshold);
      if (q_out.inside) {
        EXPECT_LT((q_out.canonical - want).norm(), 1e-9);
      }
    }
  }
}

TEST(WeightedDistance, IsolatedVertexIsZero) {
  MatX w = MatX::Ones(1, 1);
  SkinnedBody body = point_body({Vec3(0.3, 0.1, 0.2)}, w);
  DeformationConfig cfg;
  cfg.k_neighbors = 1;
  cfg.canonical_pose = PoseParams::zero(1);
  const PosedBody posed(body, ShapeParams::zero(0), PoseParams::zero(1), cfg);
  EXPECT_EQ(weighted_distance(Vec3(0.3, 0.1, 0.2), posed), 0.0);
}

TEST(WeightedDistance, TwoNeighborsArithmeticMean) {
  MatX w = MatX::Ones(2, 1);
  SkinnedBody body = point_body({Vec3(0.1, 0, 0), Vec3(-0.3, 0, 0)}, w);
  DeformationConfig cfg;
  cfg.k_neighbors = 2;
  cfg.canonical_pose = PoseParams::zero(1);
  const PosedBody posed(body, ShapeParams::zero(0), PoseParams::zero(1), cfg);
  EXPECT_NEAR(weighted_distance(Vec3::Zero(), posed), 0.2, 1e-15);
}

TEST(Mask, ThresholdExamples) {
  MatX w = MatX::Ones(1, 1);
  SkinnedBody body = point_body({Vec3::Zero()}, w);
  DeformationConfig cfg;
  cfg.k_neighbors = 1;
  cfg.canonical_pose = PoseParams::zero(1);
  const PosedBody posed(body, ShapeParams::zero(0), PoseParams::zero(1), cfg);
  EXPECT_TRUE(mask_indicator(Vec3(0.1, 0, 0), posed));
  EXPECT_FALSE(mask_indicator(Vec3(0.3, 0, 0), posed));
  cfg.mask_threshold = 0.25;
  const PosedBody boundary(body, ShapeParams::zero(0), PoseParams::zero(1), cfg);
  EXPECT_TRUE(mask_indicator(Vec3(0.25, 0, 0), boundary));
  EXPECT_TRUE(boundary.query(Vec3(0.25, 0, 0)).inside);
  EXPECT_FALSE(boundary.query(Vec3(0.2500001, 0, 0)).inside);
}

TEST(Mask, MonotoneAlongOutwardRays) {
  const SkinnedBody body = make_toy_body({}, 3);
  const PosedBody posed(body, ShapeParams::zero(body.shape_count()),
                        preset_pose(body, PosePreset::kA),
                        make_deformation_config(body, PosePreset::kX));
  std::mt19937_64 rng(12);
  std::uniform_real_distribution<double> u(-1, 1);
  int rays = 0;
  for (int t = 0; t < 200; ++t) {
    const Vec3 start = posed.posed_vertices()[(t * 37) % body.vertex_count()];
    const Vec3 dir = Vec3(u(rng), u(rng), u(rng)).normalized();
    double prev_d = weighted_distance(start, posed);
    bool prev_mask = mask_indicator(start, posed);
    bool increasing = true;
    for (int s = 1; s <= 60 && increasing; ++s) {
      const Vec3 x = start + 0.005 * s * dir;
      const double d = weighted_distance(x, posed);
      if (d < prev_d) {
        increasing = false;
        break;
      }
      const bool m = mask_indicator(x, posed);
      EXPECT_FALSE(m && !prev_mask);
      prev_d = d;
      prev_mask = m;
    }
    rays += increasing ? 1 : 0;
  }
  EXPECT_GT(rays, 0);
}

TEST(Warp, RigidLimbIsIsometry) {
  SkinnedBody body = testing_util::chain_body(3, 60, 0);
  // Make every weight one-hot so all neighbor sets agree.
  for (int i = 0; i < body.vertex_count(); ++i) {
    body.blend_weights.row(i).setZero();
    body.blend_weights(i, 2) = 1.0;
  }
  std::mt19937_64 rng(13);
  DeformationConfig cfg = chain_config(body, rng);
  const PosedBody posed(body, ShapeParams::zero(0), testing_util::random_pose(3, rng, 1.0), cfg);
  std::uniform_real_distribution<double> u(-0.3, 0.3);
  for (int t = 0; t < 50; ++t) {
    Vec3 p[3];
    Vec3 q[3];
    for (int a = 0; a < 3; ++a) {
      p[a] = posed.posed_vertices()[(t + 7 * a) % body.vertex_count()] +
             Vec3(u(rng), u(rng), u(rng));
      q[a] = warp_to_canonical(p[a], posed);
    }
    for (int a = 0; a < 3; ++a) {
      for (int b = a + 1; b < 3; ++b) {
        EXPECT_NEAR((p[a] - p[b]).norm(), (q[a] - q[b]).norm(), 1e-9);
      }
    }
  }
}

namespace {

// Central differences of the warp with the neighbor set and weights frozen at
// the unperturbed pose.
Eigen::MatrixXd fd_pose_jacobian(const SkinnedBody& body, const ShapeParams& shape,
                                 const PoseParams& pose, const DeformationConfig& cfg,
                                 const Vec3& x) {
  const auto verts = vertex_transforms(body, shape, pose).posed_vertices;
  const NaiveWarp nw = naive_neighbors(body, verts, x, cfg);
  const VecX flat = pose.flatten();
  Eigen::MatrixXd jac(3, flat.size());
  const double h = 1e-5;
  for (int p = 0; p < flat.size(); ++p) {
    VecX plus = flat;
    VecX minus = flat;
    plus[p] += h;
    minus[p] -= h;
    jac.col(p) = (naive_warp(body, shape, PoseParams::unflatten(plus), cfg, nw, x) -
                  naive_warp(body, shape, PoseParams::unflatten(minus), cfg, nw, x)) /
                 (2 * h);
  }
  return jac;
}

double rel_error(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  return (a - b).norm() / std::max(1e-12, std::max(a.norm(), b.norm()));
}

}  // namespace

TEST(PoseJacobian, MatchesFiniteDifferencesAtCanonical) {
  std::mt19937_64 rng(21);
  std::uniform_real_distribution<double> u(-1, 1);
  for (int trial = 0; trial < 6; ++trial) {
    const SkinnedBody body = testing_util::chain_body(4, 40, 2, trial % 2 == 1, 50 + trial);
    const DeformationConfig cfg = chain_config(body, rng);
    const ShapeParams shape{VecX::Random(2)};
    const PosedBody posed(body, shape, cfg.canonical_pose, cfg, true);
    for (int q = 0; q < 5; ++q) {
      const Vec3 x = posed.posed_vertices()[q * 7] + 0.05 * Vec3(u(rng), u(rng), u(rng));
      const Eigen::MatrixXd jac = warp_pose_jacobian(x, posed);
      const Eigen::MatrixXd fd = fd_pose_jacobian(body, shape, cfg.canonical_pose, cfg, x);
      EXPECT_LT(rel_error(jac, fd), 1e-5) << "trial " << trial << " query " << q;
    }
  }
}

TEST(PoseJacobian, MatchesFiniteDifferencesAtRandomPose) {
  std::mt19937_64 rng(22);
  std::uniform_real_distribution<double> u(-1, 1);
  for (int trial = 0; trial < 6; ++trial) {
    const SkinnedBody body = testing_util::chain_body(4, 40, 2, trial % 2 == 0, 70 + trial);
    const DeformationConfig cfg = chain_config(body, rng);
    const ShapeParams shape{VecX::Random(2)};
    const PoseParams pose = testing_util::random_pose(4, rng, 1.0);
    const PosedBody posed(body, shape, pose, cfg, true);
    for (int q = 0; q < 5; ++q) {
      const Vec3 x = posed.posed_vertices()[q * 5 + 1] + 0.05 * Vec3(u(rng), u(rng), u(rng));
      const Eigen::MatrixXd jac = warp_pose_jacobian(x, posed);
      const Eigen::MatrixXd fd = fd_pose_jacobian(body, shape, pose, cfg, x);
      EXPECT_LT(rel_error(jac, fd), 1e-5) << "trial " << trial << " query " << q;
      // Root translation block checked on its own as well.
      EXPECT_LT(rel_error(jac.leftCols<3>(), fd.leftCols<3>()), 1e-5);
    }
  }
}

TEST(PoseJacobian, UninvolvedJointsHaveZeroColumns) {
  SkinnedBody body = testing_util::chain_body(4, 40, 0);
  // Only joints 0 and 1 carry weight.
  for (int i = 0; i < body.vertex_count(); ++i) {
    body.blend_weights.row(i).setZero();
    body.blend_weights(i, i % 2) = 1.0;
  }
  std::mt19937_64 rng(23);
  const DeformationConfig cfg = chain_config(body, rng);
  const PosedBody posed(body, ShapeParams::zero(0), testing_util::random_pose(4, rng, 0.7), cfg,
                        true);
  const Eigen::MatrixXd jac = warp_pose_jacobian(posed.posed_vertices()[3], posed);
  EXPECT_EQ(jac.middleCols(3 + 3 * 2, 6).cwiseAbs().maxCoeff(), 0.0);
  EXPECT_GT(jac.middleCols(3, 6).cwiseAbs().maxCoeff(), 0.0);
}

TEST(PoseJacobian, RequiresJacobianContext) {
  const SkinnedBody body = testing_util::chain_body(2, 10, 0);
  DeformationConfig cfg;
  cfg.canonical_pose = PoseParams::zero(2);
  const PosedBody posed(body, ShapeParams::zero(0), PoseParams::zero(2), cfg);
  EXPECT_THROW(warp_pose_jacobian(Vec3::Zero(), posed), InvalidInputError);
}
