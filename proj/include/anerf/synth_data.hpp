#pragma once

#include "anerf/body_model.hpp"
#include "anerf/common.hpp"
#include "anerf/deformation.hpp"
#include "anerf/renderer.hpp"
#include "anerf/trainer.hpp"

#include <filesystem>
#include <memory>
#include <string>
#include <vector>

namespace anerf {

struct SceneSpec {
  ToyBodySpec body;
  /// Procedural color: per-channel sinusoids of canonical position.
  double texture_wavelength = 0.3;
  double texture_contrast = 0.35;
  /// Solid body grown by shell_thickness; edge_width sets the density falloff.
  double shell_thickness = 0.01;
  double edge_width = 0.003;
  double interior_density = 200.0;
  int frame_count = 30;
  /// The first train_turns circles are training frames, the rest testing.
  int train_turns = 2;
  int test_turns = 1;
  PosePreset hold_pose = PosePreset::kA;
  /// Std of per-frame limb articulation (degrees) on top of the hold pose.
  double articulation_deg = 0.0;
  int width = 64;
  int height = 64;
  double fov_y_deg = 38.0;
  double camera_distance = 3.0;
  int coarse_samples = 64;
  int fine_samples = 32;
  std::uint64_t seed = 0;

  void validate() const;
};

/// Named presets: "default" and "tiny" (16x16, few frames, for smoke runs).
SceneSpec scene_preset(const std::string& name);

/// Ground-truth scene: the body, its canonical pose, and an analytic field
/// in canonical space.
class Scene {
 public:
  Scene(const SceneSpec& spec, PosePreset canonical);
  Scene(const Scene&) = delete;
  Scene& operator=(const Scene&) = delete;

  const SceneSpec& spec() const { return spec_; }
  const SkinnedBody& body() const { return body_; }
  const DeformationConfig& deformation_config() const { return config_; }
  const PoseParams& canonical_pose() const { return config_.canonical_pose; }
  PosePreset canonical_preset() const { return canonical_; }
  /// Body surfaces in canonical space, the union of these capsules.
  const std::vector<Capsule>& canonical_capsules() const { return capsules_; }

  /// Signed distance to the canonical surface estimate (negative inside).
  double signed_distance(const Vec3& x0) const;
  FieldOutput eval(const Vec3& x0) const;
  const FieldEvaluator& field() const { return *field_; }
  Camera camera() const;

  /// Root rotation of frame k: 2 pi k / frames_per_circle + phase about +y.
  static double turntable_angle(int k, int frames_per_circle, double phase);

  /// Ground-truth poses of all frames (training circles first).
  std::vector<PoseParams> trajectory() const;
  std::vector<bool> training_split() const;
  /// Random limb articulations around the hold pose on the test turntable.
  std::vector<PoseParams> articulated_trajectory(int count, double amplitude_deg,
                                                 std::uint64_t seed) const;

  /// Renders one frame with jitter off. Mask = (D > 0.5).
  ImageRender render(const PoseParams& pose) const;

 private:
  SceneSpec spec_;
  SkinnedBody body_;
  DeformationConfig config_;
  PosePreset canonical_;
  std::vector<Capsule> capsules_;
  std::unique_ptr<FieldEvaluator> field_;
  Vec3 wave_dirs_[3];
  double wave_phase_[3];
};

/// Per-axis Gaussian noise on every joint axis-angle (degrees) and on the
/// root translation, whose depth axis gets twice the lateral std.
std::vector<PoseParams> perturb_poses(const std::vector<PoseParams>& poses, double noise_deg,
                                      double translation_std, std::uint64_t seed);

/// Writes frames/%04d.png (16-bit RGB), masks/%04d.png, body.txt and
/// manifest.json. Initial poses equal ground truth.
void render_dataset(const Scene& scene, const std::filesystem::path& dir);

struct Dataset {
  SkinnedBody body;
  Camera camera;
  std::vector<Frame> train;
  std::vector<Frame> test;
  std::vector<int> train_ids;
  std::vector<int> test_ids;
};

/// Reads a dataset directory. Frames get pose_init = pose_current = the
/// manifest's initial poses and pose_gt = its ground-truth poses.
Dataset load_dataset(const std::filesystem::path& dir);

/// Rewrites the manifest's initial poses with perturbed ground truth.
void write_noisy_init(const std::filesystem::path& dir, double noise_deg, double translation_std,
                      std::uint64_t seed);

/// Pose sequence files hold {"poses": [...]}; a dataset manifest is one.
std::vector<PoseParams> load_pose_file(const std::filesystem::path& path);
void save_pose_file(const std::vector<PoseParams>& poses, const std::filesystem::path& path);

}  // namespace anerf
