#pragma once

#include "anerf/common.hpp"
#include "anerf/deformation.hpp"
#include "anerf/image_io.hpp"
#include "anerf/radiance_field.hpp"

#include <cstdint>
#include <functional>
#include <random>
#include <utility>
#include <vector>

namespace anerf {

using Rng = std::mt19937_64;

/// Pinhole camera at the origin looking down -z with +y up. Pixel (row, col)
/// has its center at image coordinates (col + 0.5, row + 0.5).
struct Camera {
  double fx = 1.0;
  double fy = 1.0;
  double cx = 0.0;
  double cy = 0.0;
  int width = 1;
  int height = 1;
  double near = 0.1;
  double far = 10.0;

  void validate() const;
  bool operator==(const Camera&) const = default;
};

/// Square-pixel camera with the principal point at the image center.
Camera make_camera(int width, int height, double fov_y_degrees);

struct Pixel {
  int row = 0;
  int col = 0;
  bool operator==(const Pixel&) const = default;
};

struct Ray {
  Vec3 origin = Vec3::Zero();
  Vec3 direction = -Vec3::UnitZ();
  Pixel pixel;
};

std::vector<Ray> generate_rays(const Camera& camera, const std::vector<Pixel>& pixels);
std::vector<Pixel> all_pixels(const Camera& camera);

/// Samples along one ray. deltas[k] = t[k+1] - t[k]; the last one is the
/// sentinel far - near.
struct RaySamples {
  double near = 0.0;
  double far = 0.0;
  std::vector<double> depths;
  std::vector<Vec3> points;
  std::vector<double> deltas;

  int size() const { return static_cast<int>(depths.size()); }
};

RaySamples make_ray_samples(const Ray& ray, std::vector<double> depths, double near, double far);

/// One draw per equal bin of [near, far]; bin midpoints when rng is null.
std::vector<double> stratified_depths(double near, double far, int count, Rng* rng);

/// Inverse-CDF draws from the piecewise-constant PDF over the coarse bins,
/// merged with the coarse depths. Bin k spans the midpoints around depth k
/// (near / far at the ends). All-zero weights fall back to a uniform PDF.
/// Without rng the draws sit at u = (i + 0.5) / count.
std::vector<double> importance_depths(const std::vector<double>& coarse_depths, double near,
                                      double far, const double* weights, int count, Rng* rng);

RaySamples sample_stratified(const Ray& ray, double near, double far, int count, Rng* rng);
RaySamples sample_importance(const Ray& ray, const RaySamples& coarse,
                             const std::vector<double>& weights, int count, Rng* rng);

/// Evaluates color and density at canonical points.
class FieldEvaluator {
 public:
  virtual ~FieldEvaluator() = default;
  /// canonical and directions are 3 x N; outputs are 3 x N and N.
  virtual void evaluate(const Eigen::Matrix3Xd& canonical, const Eigen::Matrix3Xd& directions,
                        Eigen::Matrix3Xd& color, VecX& sigma) const = 0;
};

template <typename T>
class NetworkField : public FieldEvaluator {
 public:
  /// Keeps a reference to params. latent is required when the arch uses one.
  explicit NetworkField(const FieldParamsT<T>& params, VecX latent = VecX());
  void evaluate(const Eigen::Matrix3Xd& canonical, const Eigen::Matrix3Xd& directions,
                Eigen::Matrix3Xd& color, VecX& sigma) const override;

 private:
  const FieldParamsT<T>* params_;
  FieldNetwork<T> net_;
  VecX latent_;
};

extern template class NetworkField<float>;
extern template class NetworkField<double>;

class AnalyticField : public FieldEvaluator {
 public:
  explicit AnalyticField(std::function<FieldOutput(const Vec3&)> fn) : fn_(std::move(fn)) {}
  void evaluate(const Eigen::Matrix3Xd& canonical, const Eigen::Matrix3Xd& directions,
                Eigen::Matrix3Xd& color, VecX& sigma) const override;

 private:
  std::function<FieldOutput(const Vec3&)> fn_;
};

/// Observation-to-canonical mapping of one frame. Without a posed body the
/// warp is the translation x - center and every sample is inside the mask
/// (deformation-off baseline).
struct WarpContext {
  const PosedBody* posed = nullptr;
  Vec3 center = Vec3::Zero();
};

/// All samples of a ray batch for one pass, after the mask and the warp.
/// Only masked-in samples get a column in the active arrays.
struct PassSamples {
  int ray_count = 0;
  int per_ray = 0;
  std::vector<double> depths;  // ray-major, ray_count * per_ray
  std::vector<double> deltas;
  std::vector<int> column;     // active column or -1
  Eigen::Matrix3Xd canonical;  // 3 x active
  Eigen::Matrix3Xd observed;
  Eigen::Matrix3Xd directions;
  /// Filled when neighbors are kept (pose gradients).
  std::vector<NeighborWeights> neighbors;

  int active() const { return static_cast<int>(canonical.cols()); }
};

/// depths holds per_ray ascending depths per ray, ray-major.
PassSamples prepare_pass(const std::vector<Ray>& rays, const std::vector<double>& depths,
                         int per_ray, double near, double far, const WarpContext& warp,
                         bool keep_neighbors);

struct PassResult {
  Eigen::Matrix3Xd color;  // pre-composite C per ray
  VecX density;            // D per ray
  VecX depth;              // sum_k w_k t_k per ray
  std::vector<double> weights;        // w_k, ray-major
  std::vector<double> transmittance;  // T_k, ray-major
};

/// alpha_k = 1 - exp(-eta sigma_k delta_k), w_k = T_k alpha_k.
PassResult composite(const PassSamples& samples, const Eigen::Matrix3Xd& color, const VecX& sigma);

/// Reverse of composite: upstream gradients on per-ray C and D to per-sample
/// color and density (active columns only).
void composite_backward(const PassSamples& samples, const Eigen::Matrix3Xd& color,
                        const VecX& sigma, const PassResult& result,
                        const Eigen::Matrix3Xd& d_ray_color, const VecX& d_ray_density,
                        Eigen::Matrix3Xd& d_color, VecX& d_sigma);

/// One pass of a network field with everything kept for the backward pass.
template <typename T>
class DifferentiablePass {
 public:
  explicit DifferentiablePass(const FieldArch& arch) : net_(arch) {}

  /// Evaluates the network on the active samples and composites.
  void forward(const FieldParamsT<T>& params, const PassSamples& samples, const VecX* latent);

  const PassResult& result() const { return result_; }
  const PassSamples& samples() const { return *samples_; }

  /// Accumulates gradients of upstream . (C, D) into grad_params. Pose and
  /// latent gradients are accumulated when their outputs are given; pose
  /// gradients need samples prepared with neighbors and a Jacobian-enabled
  /// posed body.
  void backward(const FieldParamsT<T>& params, const Eigen::Matrix3Xd& d_ray_color,
                const VecX& d_ray_density, T* grad_params, const PosedBody* posed,
                VecX* grad_pose, VecX* grad_latent) const;

 private:
  FieldNetwork<T> net_;
  const PassSamples* samples_ = nullptr;
  typename FieldNetwork<T>::Cache cache_;
  Eigen::Matrix3Xd color_;
  VecX sigma_;
  PassResult result_;
};

extern template class DifferentiablePass<float>;
extern template class DifferentiablePass<double>;

struct RenderOutput {
  Vec3 color = Vec3::Zero();  // C, before background compositing
  double integral_density = 0.0;
  double depth = 0.0;
  Vec3 pixel = Vec3::Zero();  // C + (1 - D) * background
};

RenderOutput render_ray(const FieldEvaluator& field, const Ray& ray, const RaySamples& samples,
                        const WarpContext& warp, const Vec3& background);

struct RenderSettings {
  int coarse_samples = 64;
  int fine_samples = 32;
  bool jitter = false;
  std::uint64_t seed = 0;
  Vec3 background = Vec3::Ones();
  /// Rays per internal batch.
  int chunk = 512;
};

/// Deterministic per-ray generator derived from a root seed and a ray id.
Rng ray_rng(std::uint64_t seed, std::uint64_t ray_id);

struct BatchRender {
  PassResult coarse;
  PassResult fine;
  int coarse_evaluations = 0;
  int fine_evaluations = 0;
};

/// Coarse pass with `coarse`, importance resampling, fine pass with `fine`
/// over the merged samples. ray_ids seed the per-ray jitter.
BatchRender render_batch(const FieldEvaluator& coarse, const FieldEvaluator& fine,
                         const std::vector<Ray>& rays, const std::vector<std::uint64_t>& ray_ids,
                         double near, double far, const WarpContext& warp,
                         const RenderSettings& settings);

struct ImageRender {
  Image color;    // composited RGB
  Image density;  // D
  Image depth;
};

/// Renders every pixel; the fine pass is reported. camera.near/far bound the rays.
ImageRender render_image(const FieldEvaluator& coarse, const FieldEvaluator& fine,
                         const Camera& camera, const WarpContext& warp,
                         const RenderSettings& settings);

/// Near/far from the posed-body bounding box padded by pad + 10% of its
/// largest extent, as seen from the camera at the origin.
std::pair<double, double> near_far_for_bounds(const Eigen::AlignedBox3d& bounds, double pad);

/// ceil(fraction * count) pixels from mask > 0.5 and the rest from the
/// background, each uniform with replacement. When one side is empty all
/// pixels come from the other.
std::vector<Pixel> sample_training_pixels(const Image& mask, int count, double foreground_fraction,
                                          Rng& rng);

}  // namespace anerf
