#include "anerf/synth_data.hpp"

#include "test_helpers.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>

using namespace anerf;
using testing_util::temp_path;

namespace {

double deg(double rad) { return rad * 180.0 / std::numbers::pi; }

/// Distance to the capsule union by dense sampling of each axis.
double brute_signed_distance(const std::vector<Capsule>& caps, const Vec3& x) {
  double best = 1e30;
  for (const Capsule& c : caps) {
    double d = 1e30;
    for (int s = 0; s <= 20000; ++s) {
      const Vec3 p = c.start + (c.end - c.start) * (s / 20000.0);
      d = std::min(d, (x - p).norm());
    }
    best = std::min(best, d - c.radius);
  }
  return best;
}

Vec3 perpendicular(const Vec3& v) {
  const Vec3 a = std::abs(v.x()) < 0.9 ? Vec3::UnitX() : Vec3::UnitY();
  return v.cross(a).normalized();
}

}  // namespace

TEST(ScenePreset, TinyAndDefault) {
  const SceneSpec d = scene_preset("default");
  EXPECT_EQ(d.width, 64);
  EXPECT_EQ(d.frame_count, 30);
  const SceneSpec t = scene_preset("tiny");
  EXPECT_EQ(t.width, 16);
  EXPECT_EQ(t.height, 16);
  EXPECT_THROW(scene_preset("huge"), InvalidInputError);
}

TEST(ScenePreset, ValidateRejectsBadValues) {
  SceneSpec s = scene_preset("tiny");
  s.frame_count = 7;
  EXPECT_THROW(s.validate(), InvalidInputError);
  s = scene_preset("tiny");
  s.texture_contrast = 0.8;
  EXPECT_THROW(s.validate(), InvalidInputError);
  s = scene_preset("tiny");
  s.edge_width = 0.0;
  EXPECT_THROW(Scene(s, PosePreset::kA), InvalidInputError);
}

TEST(SceneField, SurfaceIsDense) {
  const Scene scene(scene_preset("tiny"), PosePreset::kA);
  const double rho = scene.spec().interior_density;
  for (const Capsule& c : scene.canonical_capsules()) {
    const Vec3 mid = 0.5 * (c.start + c.end);
    const Vec3 x = mid + c.radius * perpendicular(c.end - c.start);
    if (scene.signed_distance(x) < -1e-9) {
      continue;  // buried inside a neighboring capsule
    }
    EXPECT_NEAR(scene.signed_distance(x), 0.0, 1e-9);
    EXPECT_GE(scene.eval(x).density, 0.9 * rho);
    EXPECT_GE(scene.eval(mid).density, 0.999 * rho);
  }
}

TEST(SceneField, FarAwayIsEmpty) {
  const Scene scene(scene_preset("tiny"), PosePreset::kA);
  EXPECT_EQ(scene.eval(Vec3(0.0, 0.0, 5.0)).density, 0.0);
  EXPECT_EQ(scene.eval(Vec3(3.0, -2.0, 1.0)).density, 0.0);
  const double shell = scene.spec().shell_thickness;
  const double edge = scene.spec().edge_width;
  const Capsule& c = scene.canonical_capsules().front();
  const Vec3 x = c.start + (c.radius + shell + 40.0 * edge) * perpendicular(c.end - c.start);
  if (scene.signed_distance(x) > shell + 30.0 * edge) {
    EXPECT_EQ(scene.eval(x).density, 0.0);
  }
}

TEST(SceneField, SignedDistanceMatchesBruteForce) {
  const Scene scene(scene_preset("tiny"), PosePreset::kX);
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (int i = 0; i < 40; ++i) {
    const Vec3 x(0.8 * u(rng), 0.9 * u(rng), 0.3 * u(rng));
    EXPECT_NEAR(scene.signed_distance(x), brute_signed_distance(scene.canonical_capsules(), x),
                1e-4);
  }
}

TEST(SceneField, ColorsStayInRange) {
  const Scene scene(scene_preset("tiny"), PosePreset::kA);
  const double c = scene.spec().texture_contrast;
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(-2.0, 2.0);
  for (int i = 0; i < 1000; ++i) {
    const FieldOutput out = scene.eval(Vec3(u(rng), u(rng), u(rng)));
    for (int k = 0; k < 3; ++k) {
      EXPECT_GE(out.color[k], 0.5 - c - 1e-12);
      EXPECT_LE(out.color[k], 0.5 + c + 1e-12);
    }
  }
}

TEST(SceneField, CanonicalCapsulesFollowThePreset) {
  const Scene a(scene_preset("tiny"), PosePreset::kA);
  const Scene x(scene_preset("tiny"), PosePreset::kX);
  ASSERT_EQ(a.canonical_capsules().size(), x.canonical_capsules().size());
  double moved = 0.0;
  for (size_t i = 0; i < a.canonical_capsules().size(); ++i) {
    moved = std::max(moved,
                     (a.canonical_capsules()[i].end - x.canonical_capsules()[i].end).norm());
  }
  EXPECT_GT(moved, 0.05);
  EXPECT_EQ(a.canonical_preset(), PosePreset::kA);
}

TEST(Trajectory, TurntableAngle) {
  EXPECT_DOUBLE_EQ(Scene::turntable_angle(0, 10, 0.0), 0.0);
  EXPECT_DOUBLE_EQ(Scene::turntable_angle(10, 10, 0.0), 2.0 * std::numbers::pi);
  EXPECT_DOUBLE_EQ(Scene::turntable_angle(5, 10, 0.25), std::numbers::pi + 0.25);
}

TEST(Trajectory, TrainingCirclesInterleaveAndTestIsOffset) {
  const Scene scene(scene_preset("default"), PosePreset::kA);
  const auto poses = scene.trajectory();
  const auto split = scene.training_split();
  ASSERT_EQ(poses.size(), 30u);
  std::vector<double> train;
  std::vector<double> test;
  for (size_t i = 0; i < poses.size(); ++i) {
    const double a = std::fmod(deg(poses[i].joint_rotations[0].y()) + 720.0, 360.0);
    (split[i] ? train : test).push_back(a);
    EXPECT_EQ(poses[i].joint_rotations[0].x(), 0.0);
    EXPECT_EQ(poses[i].root_translation.z(), -scene.spec().camera_distance);
  }
  ASSERT_EQ(train.size(), 20u);
  ASSERT_EQ(test.size(), 10u);
  std::sort(train.begin(), train.end());
  for (size_t i = 1; i < train.size(); ++i) {
    EXPECT_NEAR(train[i] - train[i - 1], 18.0, 1e-9);
  }
  for (double t : test) {
    double nearest = 360.0;
    for (double a : train) {
      nearest = std::min(nearest, std::abs(std::remainder(t - a, 360.0)));
    }
    EXPECT_NEAR(nearest, 9.0, 1e-9);
  }
}

TEST(Trajectory, ArticulationIsSeededAndBounded) {
  const Scene scene(scene_preset("tiny"), PosePreset::kA);
  const auto a = scene.articulated_trajectory(8, 15.0, 4);
  const auto b = scene.articulated_trajectory(8, 15.0, 4);
  const auto c = scene.articulated_trajectory(8, 15.0, 5);
  ASSERT_EQ(a.size(), 8u);
  EXPECT_EQ(a[3].flatten(), b[3].flatten());
  EXPECT_NE(a[3].flatten(), c[3].flatten());
  const PoseParams hold = preset_pose(scene.body(), PosePreset::kA);
  EXPECT_GT((a[0].joint_rotations[3] - hold.joint_rotations[3]).norm(), 0.0);
  EXPECT_THROW(scene.articulated_trajectory(0, 15.0, 4), InvalidInputError);
}

TEST(PerturbPoses, StatisticsMatchTheRequestedNoise) {
  const std::vector<PoseParams> base(4000, PoseParams::zero(10));
  const auto noisy = perturb_poses(base, 5.0, 0.02, 11);
  double rot = 0.0;
  double lateral = 0.0;
  double depth = 0.0;
  int nrot = 0;
  for (const PoseParams& p : noisy) {
    for (const Vec3& r : p.joint_rotations) {
      rot += r.squaredNorm();
      nrot += 3;
    }
    lateral += p.root_translation.head<2>().squaredNorm();
    depth += p.root_translation.z() * p.root_translation.z();
  }
  EXPECT_NEAR(deg(std::sqrt(rot / nrot)), 5.0, 0.05);
  EXPECT_NEAR(std::sqrt(lateral / (2.0 * noisy.size())), 0.02, 0.0008);
  EXPECT_NEAR(std::sqrt(depth / noisy.size()), 0.04, 0.002);
}

TEST(PerturbPoses, ZeroNoiseAndSeeds) {
  std::mt19937_64 rng(2);
  std::vector<PoseParams> base;
  for (int i = 0; i < 5; ++i) {
    base.push_back(testing_util::random_pose(10, rng, 0.5));
  }
  const auto same = perturb_poses(base, 0.0, 0.0, 1);
  for (size_t i = 0; i < base.size(); ++i) {
    EXPECT_EQ(same[i].flatten(), base[i].flatten());
  }
  EXPECT_EQ(perturb_poses(base, 2.0, 0.01, 9)[2].flatten(),
            perturb_poses(base, 2.0, 0.01, 9)[2].flatten());
  EXPECT_NE(perturb_poses(base, 2.0, 0.01, 9)[2].flatten(),
            perturb_poses(base, 2.0, 0.01, 8)[2].flatten());
  EXPECT_THROW(perturb_poses(base, -1.0, 0.0, 1), InvalidInputError);
}

TEST(SceneRender, DeterministicWithVisibleBody) {
  const Scene a(scene_preset("tiny"), PosePreset::kA);
  const Scene b(scene_preset("tiny"), PosePreset::kA);
  const PoseParams pose = a.trajectory()[1];
  const ImageRender ra = a.render(pose);
  const ImageRender rb = b.render(pose);
  EXPECT_EQ(ra.color.pixels, rb.color.pixels);
  int fg = 0;
  int white = 0;
  for (int r = 0; r < ra.density.height; ++r) {
    for (int c = 0; c < ra.density.width; ++c) {
      if (ra.density.at(r, c) > 0.5f) {
        ++fg;
      } else if (ra.density.at(r, c) == 0.0f) {
        ++white;
        EXPECT_EQ(ra.color.at(r, c, 0), 1.0f);
      }
    }
  }
  EXPECT_GT(fg, 5);
  EXPECT_GT(white, 50);
}

TEST(SceneRender, SeedChangesTexture) {
  SceneSpec s = scene_preset("tiny");
  const Scene a(s, PosePreset::kA);
  s.seed = 1;
  const Scene b(s, PosePreset::kA);
  EXPECT_NE(a.eval(Vec3(0.0, 0.1, 0.0)).color, b.eval(Vec3(0.0, 0.1, 0.0)).color);
}

TEST(Dataset, RoundTripReproducesTheScene) {
  const Scene scene(scene_preset("tiny"), PosePreset::kA);
  const auto dir = temp_path("dataset_roundtrip");
  std::filesystem::remove_all(dir);
  render_dataset(scene, dir);
  const Dataset ds = load_dataset(dir);
  ASSERT_EQ(ds.train.size(), 4u);
  ASSERT_EQ(ds.test.size(), 2u);
  EXPECT_EQ(ds.train_ids, (std::vector<int>{0, 1, 2, 3}));
  EXPECT_EQ(ds.test_ids, (std::vector<int>{4, 5}));
  EXPECT_EQ(ds.body.rest_vertices.size(), scene.body().rest_vertices.size());
  const auto poses = scene.trajectory();
  for (size_t i = 0; i < ds.train.size(); ++i) {
    const Frame& f = ds.train[i];
    EXPECT_EQ(f.pose_gt->flatten(), poses[i].flatten());
    EXPECT_EQ(f.pose_init.flatten(), poses[i].flatten());
    EXPECT_EQ(f.pose_current.flatten(), poses[i].flatten());
    const ImageRender r = scene.render(poses[i]);
    int fg = 0;
    for (size_t p = 0; p < r.color.pixels.size(); ++p) {
      EXPECT_NEAR(f.image.pixels[p], r.color.pixels[p], 0.5 / 65535.0 + 1e-7);
    }
    for (size_t p = 0; p < f.mask.pixels.size(); ++p) {
      EXPECT_EQ(f.mask.pixels[p], r.density.pixels[p] > 0.5f ? 1.0f : 0.0f);
      fg += f.mask.pixels[p] > 0.5f;
    }
    EXPECT_GT(fg, 0);
  }
}

TEST(Dataset, NoisyInitKeepsGroundTruth) {
  const Scene scene(scene_preset("tiny"), PosePreset::kA);
  const auto dir = temp_path("dataset_noisy");
  std::filesystem::remove_all(dir);
  render_dataset(scene, dir);
  write_noisy_init(dir, 5.0, 0.02, 3);
  const Dataset ds = load_dataset(dir);
  const auto expected = perturb_poses(scene.trajectory(), 5.0, 0.02, 3);
  EXPECT_EQ(ds.train[0].pose_gt->flatten(), scene.trajectory()[0].flatten());
  EXPECT_EQ(ds.train[0].pose_init.flatten(), expected[0].flatten());
  EXPECT_EQ(ds.test[1].pose_init.flatten(), expected[5].flatten());
}

TEST(Dataset, MissingOrCorruptManifest) {
  const auto dir = temp_path("dataset_missing");
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  EXPECT_THROW(load_dataset(dir), IoError);
  {
    std::ofstream out(dir / "manifest.json");
    out << "{ not json";
  }
  EXPECT_THROW(load_dataset(dir), ParseError);
  {
    std::ofstream out(dir / "manifest.json");
    out << R"({"version": 7})";
  }
  EXPECT_THROW(load_dataset(dir), VersionError);
}

TEST(PoseFile, RoundTripIsExact) {
  std::mt19937_64 rng(8);
  std::vector<PoseParams> poses;
  for (int i = 0; i < 3; ++i) {
    poses.push_back(testing_util::random_pose(10, rng, 1.0));
  }
  const auto path = temp_path("poses/roundtrip.json");
  save_pose_file(poses, path);
  const auto back = load_pose_file(path);
  ASSERT_EQ(back.size(), poses.size());
  for (size_t i = 0; i < poses.size(); ++i) {
    EXPECT_EQ(back[i].flatten(), poses[i].flatten());
  }
  {
    std::ofstream out(path);
    out << R"({"poses": []})";
  }
  EXPECT_THROW(load_pose_file(path), ParseError);
}
