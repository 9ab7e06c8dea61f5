#pragma once

#include "anerf/body_model.hpp"
#include "anerf/common.hpp"
#include "anerf/deformation.hpp"
#include "anerf/image_io.hpp"
#include "anerf/radiance_field.hpp"
#include "anerf/renderer.hpp"

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace anerf {

using FieldParams = FieldParamsT<float>;

/// One training or test image with its camera and pose estimates.
struct Frame {
  Image image;  // RGB in [0, 1]
  Image mask;   // single channel, 0 or 1
  Camera camera;
  PoseParams pose_init;
  PoseParams pose_current;
  ShapeParams shape_init;
  /// Known only for synthetic data; used for pose-error logging.
  std::optional<PoseParams> pose_gt;

  void validate() const;
};

struct TrainConfig {
  double lambda_d = 0.1;
  double lambda_1 = 0.001;
  double lambda_2 = 0.01;
  int batch_rays = 1024;
  int iterations = 20000;
  double lr_field = 5e-4;
  double lr_pose = 5e-5;
  double lr_latent = 5e-4;
  std::uint64_t seed = 0;
  bool refine_poses = true;
  PosePreset canonical = PosePreset::kX;
  /// Off gives the plain-NeRF baseline: no warp and no mask.
  bool deformation = true;
  /// Per-frame latent code length; 0 disables the latent arm.
  int latent_dim = 0;
  bool view_dirs = false;
  double foreground_fraction = 0.9;
  int coarse_samples = 64;
  int fine_samples = 32;
  bool jitter = true;
  Vec3 background = Vec3::Ones();
  FieldArch arch;
  int k_neighbors = 4;
  double bandwidth = 0.1;
  double mask_threshold = 0.2;
  /// Write a checkpoint every this many iterations (0: only at the end).
  int checkpoint_every = 0;

  void validate() const;
  /// Field arch with the ablation switches applied.
  FieldArch field_arch() const;
  DeformationConfig deformation_config(const SkinnedBody& body) const;
  bool operator==(const TrainConfig&) const = default;
};

/// Every key with its value, one `key = value` per line.
std::string config_to_text(const TrainConfig& config);
/// Applies `key = value` lines over `base`; '#' starts a comment.
TrainConfig parse_config(const std::string& text, TrainConfig base = TrainConfig());
TrainConfig load_config(const std::filesystem::path& path, TrainConfig base = TrainConfig());
/// Sets one key; throws InvalidInputError for unknown keys or bad values.
void set_config_value(TrainConfig& config, const std::string& key, const std::string& value);

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

struct ReconstructionLoss {
  double value = 0.0;
  Eigen::Matrix3Xd d_coarse;
  Eigen::Matrix3Xd d_fine;
};

/// Batch mean of |C_coarse - C|^2 + |C_fine - C|^2 over 3 x B pixel colors.
ReconstructionLoss loss_reconstruction(const Eigen::Matrix3Xd& coarse,
                                       const Eigen::Matrix3Xd& fine,
                                       const Eigen::Matrix3Xd& target);

struct BackgroundLoss {
  double value = 0.0;
  VecX d_coarse;
  VecX d_fine;
};

/// Batch mean of |D_coarse - D| + |D_fine - D|.
BackgroundLoss loss_background(const VecX& coarse, const VecX& fine, const VecX& mask);

struct PoseLoss {
  double value = 0.0;
  std::vector<VecX> gradients;  // per frame, flattened pose layout
};

/// sum_t l1 |p_t - p0_t| + sum_t l2 |p_t - p_{t+1}| with L2 norms over the
/// flattened pose vectors; zero subgradient at zero differences.
PoseLoss loss_pose(const std::vector<PoseParams>& current, const std::vector<PoseParams>& init,
                   double lambda_1, double lambda_2);

struct LossParts {
  double reconstruction = 0.0;
  double pose = 0.0;
  double background = 0.0;
};

double total_loss(const LossParts& parts, const TrainConfig& config);

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

struct AdamState {
  std::vector<double> m;
  std::vector<double> v;
  long long step = 0;
};

/// Moments for every parameter group. Pose and latent states are per frame
/// and only advance when that frame is visited.
struct OptimizerState {
  AdamState coarse;
  AdamState fine;
  std::vector<AdamState> poses;
  std::vector<AdamState> latents;
};

inline constexpr double kAdamBeta1 = 0.9;
inline constexpr double kAdamBeta2 = 0.999;
inline constexpr double kAdamEpsilon = 1e-8;

/// One bias-corrected Adam update. Empty moments are zero-initialized.
template <typename T>
void adam_step(std::span<T> params, std::span<const T> grads, AdamState& state, double lr,
               std::string_view group);

ShapeParams mean_shape(const std::vector<ShapeParams>& shapes);

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

inline constexpr int kCheckpointVersion = 1;

struct Checkpoint {
  int iteration = 0;
  FieldParams coarse;
  FieldParams fine;
  bool deformation = true;
  DeformationConfig deformation_config;
  /// Translation used by the deformation-off baseline.
  Vec3 center = Vec3::Zero();
  Vec3 background = Vec3::Ones();
  ShapeParams shape;
  std::vector<PoseParams> poses;
  std::vector<VecX> latents;

  bool operator==(const Checkpoint&) const;
};

/// Versioned text header, then a little-endian float32 blob (coarse, fine).
void save_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct TrainLogRow {
  int iteration = 0;
  int frame = 0;
  double reconstruction = 0.0;
  double pose = 0.0;
  double background = 0.0;
  double total = 0.0;
  /// Mean joint-angle error in degrees against pose_gt; NaN when unknown.
  double pose_error_deg = 0.0;
};

void write_log_csv(const std::vector<TrainLogRow>& log, const std::filesystem::path& path);

struct TrainOptions {
  /// Where periodic and final checkpoints go; empty disables writing.
  std::filesystem::path checkpoint_path;
  std::function<void(const TrainLogRow&)> on_iteration;
};

struct TrainResult {
  Checkpoint checkpoint;
  std::vector<TrainLogRow> log;
};

/// Joint optimization of both fields and (optionally) the frames' poses.
/// Refined poses are written back to frames[t].pose_current.
TrainResult train(const SkinnedBody& body, std::vector<Frame>& frames, const TrainConfig& config,
                  const TrainOptions& options = TrainOptions());

/// Same loop with the fields frozen: only the test frames' poses move.
/// Returns the refined poses and updates frames[t].pose_current.
std::vector<PoseParams> refine_test_poses(const Checkpoint& checkpoint, const SkinnedBody& body,
                                          std::vector<Frame>& frames, const TrainConfig& config,
                                          int iterations, std::vector<TrainLogRow>* log = nullptr);

/// Mean angle in degrees between corresponding joint rotations.
double mean_joint_angle_error_deg(const std::vector<PoseParams>& a,
                                  const std::vector<PoseParams>& b);

/// Latent code for frames outside the training set: the mean training code.
VecX mean_latent(const Checkpoint& checkpoint);

/// Renders the trained fields at a pose. Near/far come from the posed body.
ImageRender render_pose(const Checkpoint& checkpoint, const SkinnedBody& body,
                        const PoseParams& pose, const Camera& camera,
                        const RenderSettings& settings, const VecX& latent = VecX());

}  // namespace anerf
