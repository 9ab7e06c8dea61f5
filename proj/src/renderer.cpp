#include "anerf/renderer.hpp"

#include "anerf/parallel.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

namespace anerf {

void Camera::validate() const {
  require(fx > 0.0 && fy > 0.0, "camera focal lengths must be positive");
  require(width > 0 && height > 0, "camera resolution must be positive");
  require(near > 0.0 && near < far, "camera needs 0 < near < far");
}

Camera make_camera(int width, int height, double fov_y_degrees) {
  require(fov_y_degrees > 0.0 && fov_y_degrees < 180.0, "field of view must be in (0, 180)");
  Camera cam;
  cam.width = width;
  cam.height = height;
  cam.fy = 0.5 * height / std::tan(0.5 * fov_y_degrees * std::numbers::pi / 180.0);
  cam.fx = cam.fy;
  cam.cx = 0.5 * width;
  cam.cy = 0.5 * height;
  cam.validate();
  return cam;
}

std::vector<Ray> generate_rays(const Camera& camera, const std::vector<Pixel>& pixels) {
  camera.validate();
  std::vector<Ray> rays;
  rays.reserve(pixels.size());
  for (const Pixel& p : pixels) {
    if (p.row < 0 || p.row >= camera.height || p.col < 0 || p.col >= camera.width) {
      throw InvalidInputError("pixel (" + std::to_string(p.row) + ", " + std::to_string(p.col) +
                              ") is outside the image");
    }
    const double u = p.col + 0.5;
    const double v = p.row + 0.5;
    Ray ray;
    ray.direction = Vec3((u - camera.cx) / camera.fx, -(v - camera.cy) / camera.fy, -1.0).normalized();
    ray.pixel = p;
    rays.push_back(ray);
  }
  return rays;
}

std::vector<Pixel> all_pixels(const Camera& camera) {
  std::vector<Pixel> pixels;
  pixels.reserve(static_cast<size_t>(camera.width) * camera.height);
  for (int r = 0; r < camera.height; ++r) {
    for (int c = 0; c < camera.width; ++c) {
      pixels.push_back({r, c});
    }
  }
  return pixels;
}

// ---------------------------------------------------------------------------
// Sampling
// ---------------------------------------------------------------------------

RaySamples make_ray_samples(const Ray& ray, std::vector<double> depths, double near, double far) {
  RaySamples s;
  s.near = near;
  s.far = far;
  s.depths = std::move(depths);
  const int n = s.size();
  s.points.resize(static_cast<size_t>(n));
  s.deltas.resize(static_cast<size_t>(n));
  for (int k = 0; k < n; ++k) {
    s.points[k] = ray.origin + s.depths[k] * ray.direction;
    s.deltas[k] = k + 1 < n ? s.depths[k + 1] - s.depths[k] : far - near;
  }
  return s;
}

std::vector<double> stratified_depths(double near, double far, int count, Rng* rng) {
  require(count >= 1, "sample count must be >= 1");
  require(far > near, "far must exceed near");
  std::vector<double> depths(static_cast<size_t>(count));
  const double step = (far - near) / count;
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (int i = 0; i < count; ++i) {
    const double offset = rng != nullptr ? unit(*rng) : 0.5;
    depths[i] = near + (i + offset) * step;
  }
  return depths;
}

std::vector<double> importance_depths(const std::vector<double>& coarse_depths, double near,
                                      double far, const double* weights, int count, Rng* rng) {
  const int n = static_cast<int>(coarse_depths.size());
  require(n >= 1, "importance sampling needs coarse samples");
  std::vector<double> edges(static_cast<size_t>(n) + 1);
  edges[0] = near;
  edges[n] = far;
  for (int k = 1; k < n; ++k) {
    edges[k] = 0.5 * (coarse_depths[k - 1] + coarse_depths[k]);
  }
  double total = 0.0;
  for (int k = 0; k < n; ++k) {
    require(weights[k] >= 0.0 && std::isfinite(weights[k]), "importance weights must be >= 0");
    total += weights[k];
  }
  std::vector<double> cdf(static_cast<size_t>(n) + 1, 0.0);
  for (int k = 0; k < n; ++k) {
    // Uniform density over [near, far] when every weight is zero.
    const double p = total > 0.0 ? weights[k] / total : (edges[k + 1] - edges[k]) / (far - near);
    cdf[k + 1] = cdf[k] + p;
  }
  cdf[n] = 1.0;

  std::vector<double> out(coarse_depths);
  out.reserve(static_cast<size_t>(n + count));
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  int bin = 0;
  for (int i = 0; i < count; ++i) {
    // Stratified in u, so draws arrive sorted.
    const double u = (i + (rng != nullptr ? unit(*rng) : 0.5)) / count;
    while (bin + 1 < n && cdf[bin + 1] <= u) {
      ++bin;
    }
    const double mass = cdf[bin + 1] - cdf[bin];
    const double frac = mass > 0.0 ? std::clamp((u - cdf[bin]) / mass, 0.0, 1.0) : 0.5;
    out.push_back(edges[bin] + frac * (edges[bin + 1] - edges[bin]));
  }
  std::sort(out.begin(), out.end());
  for (size_t k = 1; k < out.size(); ++k) {
    if (out[k] <= out[k - 1]) {
      out[k] = std::nextafter(out[k - 1], std::numeric_limits<double>::infinity());
    }
  }
  return out;
}

RaySamples sample_stratified(const Ray& ray, double near, double far, int count, Rng* rng) {
  return make_ray_samples(ray, stratified_depths(near, far, count, rng), near, far);
}

RaySamples sample_importance(const Ray& ray, const RaySamples& coarse,
                             const std::vector<double>& weights, int count, Rng* rng) {
  require(static_cast<int>(weights.size()) == coarse.size(), "one weight per coarse sample");
  return make_ray_samples(
      ray, importance_depths(coarse.depths, coarse.near, coarse.far, weights.data(), count, rng),
      coarse.near, coarse.far);
}

// ---------------------------------------------------------------------------
// Field evaluators
// ---------------------------------------------------------------------------

template <typename T>
NetworkField<T>::NetworkField(const FieldParamsT<T>& params, VecX latent)
    : params_(&params), net_(params.arch), latent_(std::move(latent)) {
  params.validate();
  require(latent_.size() == params.arch.latent_dim, "latent code length must match the arch");
}

template <typename T>
void NetworkField<T>::evaluate(const Eigen::Matrix3Xd& canonical,
                               const Eigen::Matrix3Xd& directions, Eigen::Matrix3Xd& color,
                               VecX& sigma) const {
  const Eigen::Index n = canonical.cols();
  color.resize(3, n);
  sigma.resize(n);
  constexpr Eigen::Index kBlock = 2048;
  const int blocks = static_cast<int>((n + kBlock - 1) / kBlock);
  parallel_for(0, blocks, [&](int b) {
    const Eigen::Index begin = b * kBlock;
    const Eigen::Index len = std::min(kBlock, n - begin);
    const Eigen::Matrix3Xd pos = canonical.middleCols(begin, len);
    const Eigen::Matrix3Xd dir = directions.middleCols(begin, len);
    MatX latent;
    if (latent_.size() > 0) {
      latent = latent_.replicate(1, len);
    }
    typename FieldNetwork<T>::Matrix in;
    typename FieldNetwork<T>::Matrix dir_in;
    net_.encode(pos, &dir, &latent, in, dir_in);
    typename FieldNetwork<T>::Matrix c;
    typename FieldNetwork<T>::Matrix s;
    net_.forward(params_->values.data(), in, dir_in, c, s, nullptr);
    color.middleCols(begin, len) = c.template cast<double>();
    sigma.segment(begin, len) = s.row(0).transpose().template cast<double>();
  });
}

template class NetworkField<float>;
template class NetworkField<double>;

void AnalyticField::evaluate(const Eigen::Matrix3Xd& canonical, const Eigen::Matrix3Xd&,
                             Eigen::Matrix3Xd& color, VecX& sigma) const {
  const Eigen::Index n = canonical.cols();
  color.resize(3, n);
  sigma.resize(n);
  parallel_for(0, static_cast<int>(n), [&](int i) {
    const FieldOutput out = fn_(canonical.col(i));
    color.col(i) = out.color;
    sigma[i] = out.density;
  });
}

// ---------------------------------------------------------------------------
// Passes and compositing
// ---------------------------------------------------------------------------

PassSamples prepare_pass(const std::vector<Ray>& rays, const std::vector<double>& depths,
                         int per_ray, double near, double far, const WarpContext& warp,
                         bool keep_neighbors) {
  const int r_count = static_cast<int>(rays.size());
  require(per_ray >= 1, "per_ray must be >= 1");
  require(depths.size() == static_cast<size_t>(r_count) * per_ray,
          "depth count must equal rays * per_ray");
  PassSamples s;
  s.ray_count = r_count;
  s.per_ray = per_ray;
  s.depths = depths;
  const size_t total = depths.size();
  s.deltas.resize(total);
  s.column.assign(total, -1);

  std::vector<unsigned char> inside(total, 0);
  std::vector<Vec3> canonical(total);
  std::vector<NeighborWeights> neighbors(keep_neighbors && warp.posed != nullptr ? total : 0);
  parallel_for(0, r_count, [&](int r) {
    const Ray& ray = rays[r];
    for (int k = 0; k < per_ray; ++k) {
      const size_t id = static_cast<size_t>(r) * per_ray + k;
      s.deltas[id] = k + 1 < per_ray ? depths[id + 1] - depths[id] : far - near;
      const Vec3 x = ray.origin + depths[id] * ray.direction;
      if (warp.posed == nullptr) {
        inside[id] = 1;
        canonical[id] = x - warp.center;
        continue;
      }
      const PosedBody::Query q = warp.posed->query(x);
      if (q.inside) {
        inside[id] = 1;
        canonical[id] = q.canonical;
        if (!neighbors.empty()) {
          neighbors[id] = q.neighbors;
        }
      }
    }
  });

  int active = 0;
  for (size_t id = 0; id < total; ++id) {
    active += inside[id];
  }
  s.canonical.resize(3, active);
  s.observed.resize(3, active);
  s.directions.resize(3, active);
  if (!neighbors.empty()) {
    s.neighbors.resize(static_cast<size_t>(active));
  }
  int col = 0;
  for (size_t id = 0; id < total; ++id) {
    if (inside[id] == 0) {
      continue;
    }
    const Ray& ray = rays[id / per_ray];
    s.column[id] = col;
    s.canonical.col(col) = canonical[id];
    s.observed.col(col) = ray.origin + depths[id] * ray.direction;
    s.directions.col(col) = ray.direction;
    if (!neighbors.empty()) {
      s.neighbors[col] = neighbors[id];
    }
    ++col;
  }
  return s;
}

PassResult composite(const PassSamples& s, const Eigen::Matrix3Xd& color, const VecX& sigma) {
  require(color.cols() == s.active() && sigma.size() == s.active(),
          "field outputs must match the active sample count");
  PassResult out;
  out.color = Eigen::Matrix3Xd::Zero(3, s.ray_count);
  out.density = VecX::Zero(s.ray_count);
  out.depth = VecX::Zero(s.ray_count);
  out.weights.assign(s.depths.size(), 0.0);
  out.transmittance.assign(s.depths.size(), 0.0);
  for (int r = 0; r < s.ray_count; ++r) {
    double t = 1.0;
    Vec3 c = Vec3::Zero();
    double d = 0.0;
    double depth = 0.0;
    for (int k = 0; k < s.per_ray; ++k) {
      const size_t id = static_cast<size_t>(r) * s.per_ray + k;
      out.transmittance[id] = t;
      const int col = s.column[id];
      if (col < 0) {
        continue;
      }
      const double tau = sigma[col] * s.deltas[id];
      const double alpha = -std::expm1(-tau);
      const double w = t * alpha;
      out.weights[id] = w;
      c += w * color.col(col);
      d += w;
      depth += w * s.depths[id];
      t *= std::exp(-tau);
    }
    out.color.col(r) = c;
    out.density[r] = d;
    out.depth[r] = depth;
  }
  return out;
}

void composite_backward(const PassSamples& s, const Eigen::Matrix3Xd& color, const VecX& sigma,
                        const PassResult& result, const Eigen::Matrix3Xd& d_ray_color,
                        const VecX& d_ray_density, Eigen::Matrix3Xd& d_color, VecX& d_sigma) {
  d_color = Eigen::Matrix3Xd::Zero(3, s.active());
  d_sigma = VecX::Zero(s.active());
  for (int r = 0; r < s.ray_count; ++r) {
    const Vec3 gc = d_ray_color.col(r);
    const double gd = d_ray_density[r];
    if (gc.isZero(0.0) && gd == 0.0) {
      continue;
    }
    double suffix = 0.0;  // sum_{j > k} w_j g_j
    for (int k = s.per_ray - 1; k >= 0; --k) {
      const size_t id = static_cast<size_t>(r) * s.per_ray + k;
      const int col = s.column[id];
      if (col < 0) {
        continue;
      }
      const double w = result.weights[id];
      const double g = gc.dot(color.col(col)) + gd;
      const double t_next = result.transmittance[id] * std::exp(-sigma[col] * s.deltas[id]);
      d_sigma[col] = s.deltas[id] * (t_next * g - suffix);
      d_color.col(col) = w * gc;
      suffix += w * g;
    }
  }
}

template <typename T>
void DifferentiablePass<T>::forward(const FieldParamsT<T>& params, const PassSamples& samples,
                                    const VecX* latent) {
  samples_ = &samples;
  const Eigen::Index n = samples.active();
  MatX latent_cols;
  if (params.arch.latent_dim > 0) {
    require(latent != nullptr && latent->size() == params.arch.latent_dim,
            "latent code length must match the arch");
    latent_cols = latent->replicate(1, n);
  }
  typename FieldNetwork<T>::Matrix in;
  typename FieldNetwork<T>::Matrix dir_in;
  net_.encode(samples.canonical, &samples.directions, &latent_cols, in, dir_in);
  typename FieldNetwork<T>::Matrix c;
  typename FieldNetwork<T>::Matrix s;
  net_.forward(params.values.data(), in, dir_in, c, s, &cache_);
  color_ = c.template cast<double>();
  sigma_ = s.row(0).transpose().template cast<double>();
  result_ = composite(samples, color_, sigma_);
}

template <typename T>
void DifferentiablePass<T>::backward(const FieldParamsT<T>& params,
                                     const Eigen::Matrix3Xd& d_ray_color,
                                     const VecX& d_ray_density, T* grad_params,
                                     const PosedBody* posed, VecX* grad_pose,
                                     VecX* grad_latent) const {
  require(samples_ != nullptr, "backward called before forward");
  const PassSamples& s = *samples_;
  Eigen::Matrix3Xd d_color;
  VecX d_sigma;
  composite_backward(s, color_, sigma_, result_, d_ray_color, d_ray_density, d_color, d_sigma);
  const bool want_pose = grad_pose != nullptr && posed != nullptr;
  const bool want_input = want_pose || (grad_latent != nullptr && params.arch.latent_dim > 0);
  typename FieldNetwork<T>::Matrix dc = d_color.cast<T>();
  typename FieldNetwork<T>::Matrix ds = d_sigma.transpose().cast<T>();
  typename FieldNetwork<T>::Matrix d_in;
  net_.backward(params.values.data(), cache_, dc, ds, grad_params, want_input ? &d_in : nullptr);
  if (!want_input) {
    return;
  }
  Eigen::Matrix3Xd d_pos;
  MatX d_latent;
  net_.encoding_backward(s.canonical, d_in, want_pose ? &d_pos : nullptr,
                         params.arch.latent_dim > 0 ? &d_latent : nullptr);
  if (grad_latent != nullptr && params.arch.latent_dim > 0) {
    *grad_latent += d_latent.rowwise().sum();
  }
  if (want_pose) {
    require(static_cast<int>(s.neighbors.size()) == s.active(),
            "pose gradients need samples prepared with neighbors");
    for (int m = 0; m < s.active(); ++m) {
      posed->accumulate_pose_vjp(s.neighbors[m], s.observed.col(m), d_pos.col(m), *grad_pose);
    }
  }
}

template class DifferentiablePass<float>;
template class DifferentiablePass<double>;

RenderOutput render_ray(const FieldEvaluator& field, const Ray& ray, const RaySamples& samples,
                        const WarpContext& warp, const Vec3& background) {
  const PassSamples s =
      prepare_pass({ray}, samples.depths, samples.size(), samples.near, samples.far, warp, false);
  Eigen::Matrix3Xd color;
  VecX sigma;
  field.evaluate(s.canonical, s.directions, color, sigma);
  const PassResult r = composite(s, color, sigma);
  RenderOutput out;
  out.color = r.color.col(0);
  out.integral_density = r.density[0];
  out.depth = r.depth[0];
  out.pixel = out.color + (1.0 - out.integral_density) * background;
  return out;
}

Rng ray_rng(std::uint64_t seed, std::uint64_t ray_id) {
  auto mix = [](std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  };
  return Rng(mix(mix(seed) ^ ray_id));
}

BatchRender render_batch(const FieldEvaluator& coarse, const FieldEvaluator& fine,
                         const std::vector<Ray>& rays, const std::vector<std::uint64_t>& ray_ids,
                         double near, double far, const WarpContext& warp,
                         const RenderSettings& settings) {
  require(ray_ids.size() == rays.size(), "one id per ray");
  const int n = static_cast<int>(rays.size());
  const int nc = settings.coarse_samples;
  const int nf = settings.fine_samples;
  std::vector<Rng> rngs;
  if (settings.jitter) {
    for (int r = 0; r < n; ++r) {
      rngs.push_back(ray_rng(settings.seed, ray_ids[r]));
    }
  }
  std::vector<double> depths(static_cast<size_t>(n) * nc);
  for (int r = 0; r < n; ++r) {
    const auto d = stratified_depths(near, far, nc, settings.jitter ? &rngs[r] : nullptr);
    std::copy(d.begin(), d.end(), depths.begin() + static_cast<long>(r) * nc);
  }
  BatchRender out;
  const PassSamples cs = prepare_pass(rays, depths, nc, near, far, warp, false);
  Eigen::Matrix3Xd color;
  VecX sigma;
  coarse.evaluate(cs.canonical, cs.directions, color, sigma);
  out.coarse = composite(cs, color, sigma);
  out.coarse_evaluations = cs.active();
  if (nf <= 0) {
    out.fine = out.coarse;
    return out;
  }
  std::vector<double> fine_depths(static_cast<size_t>(n) * (nc + nf));
  for (int r = 0; r < n; ++r) {
    const std::vector<double> coarse_d(depths.begin() + static_cast<long>(r) * nc,
                                       depths.begin() + static_cast<long>(r + 1) * nc);
    const auto d = importance_depths(coarse_d, near, far,
                                     out.coarse.weights.data() + static_cast<size_t>(r) * nc, nf,
                                     settings.jitter ? &rngs[r] : nullptr);
    std::copy(d.begin(), d.end(), fine_depths.begin() + static_cast<long>(r) * (nc + nf));
  }
  const PassSamples fs = prepare_pass(rays, fine_depths, nc + nf, near, far, warp, false);
  fine.evaluate(fs.canonical, fs.directions, color, sigma);
  out.fine = composite(fs, color, sigma);
  out.fine_evaluations = fs.active();
  return out;
}

ImageRender render_image(const FieldEvaluator& coarse, const FieldEvaluator& fine,
                         const Camera& camera, const WarpContext& warp,
                         const RenderSettings& settings) {
  camera.validate();
  const std::vector<Ray> rays = generate_rays(camera, all_pixels(camera));
  ImageRender out{Image(camera.width, camera.height, 3), Image(camera.width, camera.height, 1),
                  Image(camera.width, camera.height, 1)};
  const int n = static_cast<int>(rays.size());
  const int chunk = std::max(1, settings.chunk);
  for (int begin = 0; begin < n; begin += chunk) {
    const int end = std::min(n, begin + chunk);
    const std::vector<Ray> batch(rays.begin() + begin, rays.begin() + end);
    std::vector<std::uint64_t> ids;
    for (int i = begin; i < end; ++i) {
      ids.push_back(static_cast<std::uint64_t>(i));
    }
    const BatchRender br =
        render_batch(coarse, fine, batch, ids, camera.near, camera.far, warp, settings);
    for (int i = begin; i < end; ++i) {
      const Pixel& p = rays[i].pixel;
      const int b = i - begin;
      const double dd = br.fine.density[b];
      for (int c = 0; c < 3; ++c) {
        out.color.at(p.row, p.col, c) =
            static_cast<float>(br.fine.color(c, b) + (1.0 - dd) * settings.background[c]);
      }
      out.density.at(p.row, p.col) = static_cast<float>(dd);
      out.depth.at(p.row, p.col) = static_cast<float>(br.fine.depth[b]);
    }
  }
  return out;
}

std::pair<double, double> near_far_for_bounds(const Eigen::AlignedBox3d& bounds, double pad) {
  require(!bounds.isEmpty(), "bounds must be non-empty");
  const double grow = pad + 0.1 * bounds.sizes().maxCoeff();
  Eigen::AlignedBox3d box(bounds.min() - Vec3::Constant(grow), bounds.max() + Vec3::Constant(grow));
  const double near = std::max(1e-3, box.exteriorDistance(Vec3::Zero()));
  double far = 0.0;
  for (int corner = 0; corner < 8; ++corner) {
    far = std::max(far, box.corner(static_cast<Eigen::AlignedBox3d::CornerType>(corner)).norm());
  }
  return {near, far};
}

std::vector<Pixel> sample_training_pixels(const Image& mask, int count, double foreground_fraction,
                                          Rng& rng) {
  require(mask.channels == 1, "mask must be single-channel");
  require(count >= 0, "pixel count must be >= 0");
  require(foreground_fraction >= 0.0 && foreground_fraction <= 1.0,
          "foreground fraction must be in [0, 1]");
  require(mask.width > 0 && mask.height > 0, "mask must be non-empty");
  std::vector<Pixel> fg;
  std::vector<Pixel> bg;
  for (int r = 0; r < mask.height; ++r) {
    for (int c = 0; c < mask.width; ++c) {
      (mask.at(r, c) > 0.5f ? fg : bg).push_back({r, c});
    }
  }
  int n_fg = static_cast<int>(std::ceil(foreground_fraction * count - 1e-9));
  if (fg.empty()) {
    n_fg = 0;
  } else if (bg.empty()) {
    n_fg = count;
  }
  std::vector<Pixel> out;
  out.reserve(static_cast<size_t>(count));
  for (int i = 0; i < count; ++i) {
    const auto& pool = i < n_fg ? fg : bg;
    std::uniform_int_distribution<size_t> pick(0, pool.size() - 1);
    out.push_back(pool[pick(rng)]);
  }
  return out;
}

}  // namespace anerf
