#include "anerf/radiance_field.hpp"

#include <cmath>
#include <numbers>
#include <random>

namespace anerf {

void FieldArch::validate() const {
  require(encoding_bands >= 0, "encoding_bands must be >= 0");
  require(hidden_width > 0, "hidden_width must be positive");
  require(hidden_depth > 0, "hidden_depth must be positive");
  require(skip_layer > 0 && skip_layer < hidden_depth, "skip_layer must be in [1, hidden_depth)");
  require(dir_bands >= 0, "dir_bands must be >= 0");
  require(latent_dim >= 0, "latent_dim must be >= 0");
  require(scene_bound > 0.0, "scene_bound must be positive");
}

std::size_t param_count(const FieldArch& arch) {
  const std::size_t w = static_cast<std::size_t>(arch.hidden_width);
  const std::size_t in = static_cast<std::size_t>(arch.input_dim());
  std::size_t count = in * w + w;
  for (int l = 1; l < arch.hidden_depth; ++l) {
    const std::size_t fan_in = w + (l == arch.skip_layer ? in : 0);
    count += fan_in * w + w;
  }
  count += w + 1;
  count += (w + static_cast<std::size_t>(arch.dir_dim())) * 3 + 3;
  return count;
}

template <typename T>
void FieldParamsT<T>::validate() const {
  arch.validate();
  require(values.size() == param_count(arch),
          "field parameter count " + std::to_string(values.size()) + " does not match arch (" +
              std::to_string(param_count(arch)) + ")");
  for (const T v : values) {
    if (!std::isfinite(static_cast<double>(v))) {
      throw NumericalError("field parameters contain non-finite values");
    }
  }
}

template struct FieldParamsT<float>;
template struct FieldParamsT<double>;

VecX positional_encoding(const Vec3& x, int bands) {
  require(bands >= 0, "encoding bands must be >= 0");
  VecX out(3 + 6 * bands);
  out.head<3>() = x;
  double freq = std::numbers::pi;
  for (int l = 0; l < bands; ++l) {
    for (int c = 0; c < 3; ++c) {
      out[3 + 6 * l + c] = std::sin(freq * x[c]);
      out[3 + 6 * l + 3 + c] = std::cos(freq * x[c]);
    }
    freq *= 2.0;
  }
  return out;
}

// ---------------------------------------------------------------------------
// FieldNetwork
// ---------------------------------------------------------------------------

template <typename T>
FieldNetwork<T>::FieldNetwork(const FieldArch& arch) : arch_(arch) {
  arch_.validate();
  std::size_t offset = 0;
  auto make = [&](int in, int out) {
    Layer layer{in, out, offset};
    offset += static_cast<std::size_t>(in) * out + out;
    return layer;
  };
  const int w = arch_.hidden_width;
  hidden_.push_back(make(arch_.input_dim(), w));
  for (int l = 1; l < arch_.hidden_depth; ++l) {
    hidden_.push_back(make(w + (l == arch_.skip_layer ? arch_.input_dim() : 0), w));
  }
  density_ = make(w, 1);
  color_ = make(w + arch_.dir_dim(), 3);
  size_ = offset;
}

template <typename T>
void FieldNetwork<T>::encode(const Eigen::Matrix3Xd& positions,
                             const Eigen::Matrix3Xd* directions, const MatX* latent,
                             Matrix& input, Matrix& dir_input) const {
  const Eigen::Index n = positions.cols();
  const int bands = arch_.encoding_bands;
  input.resize(arch_.input_dim(), n);
  const double inv_bound = 1.0 / arch_.scene_bound;
  for (Eigen::Index p = 0; p < n; ++p) {
    const Vec3 x = positions.col(p) * inv_bound;
    for (int c = 0; c < 3; ++c) {
      input(c, p) = static_cast<T>(x[c]);
    }
    double freq = std::numbers::pi;
    for (int l = 0; l < bands; ++l) {
      for (int c = 0; c < 3; ++c) {
        input(3 + 6 * l + c, p) = static_cast<T>(std::sin(freq * x[c]));
        input(3 + 6 * l + 3 + c, p) = static_cast<T>(std::cos(freq * x[c]));
      }
      freq *= 2.0;
    }
  }
  if (arch_.latent_dim > 0) {
    require(latent != nullptr && latent->rows() == arch_.latent_dim && latent->cols() == n,
            "latent codes must be latent_dim x N");
    input.bottomRows(arch_.latent_dim) = latent->cast<T>();
  }
  if (arch_.view_dirs) {
    require(directions != nullptr && directions->cols() == n, "view directions required");
    dir_input.resize(arch_.dir_dim(), n);
    for (Eigen::Index p = 0; p < n; ++p) {
      const VecX e = positional_encoding(directions->col(p), arch_.dir_bands);
      dir_input.col(p) = e.cast<T>();
    }
  } else {
    dir_input.resize(0, n);
  }
}

template <typename T>
void FieldNetwork<T>::forward(const T* params, const Matrix& input, const Matrix& dir_input,
                              Matrix& color, Matrix& sigma, Cache* cache) const {
  const Vector staged = Eigen::Map<const Vector>(params, static_cast<Eigen::Index>(size_));
  forward_staged(staged.data(), input, dir_input, color, sigma, cache);
}

template <typename T>
void FieldNetwork<T>::backward(const T* params, const Cache& cache, const Matrix& d_color,
                               const Matrix& d_sigma, T* grad_params, Matrix* d_input) const {
  const auto size = static_cast<Eigen::Index>(size_);
  const Vector staged = Eigen::Map<const Vector>(params, size);
  Vector grad = Vector::Zero(size);
  backward_staged(staged.data(), cache, d_color, d_sigma, grad.data(), d_input);
  Eigen::Map<Vector>(grad_params, size) += grad;
}

template <typename T>
void FieldNetwork<T>::forward_staged(const T* params, const Matrix& input, const Matrix& dir_input,
                                     Matrix& color, Matrix& sigma, Cache* cache) const {
  using Map = Eigen::Map<const Matrix>;
  using VecMap = Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>>;
  const Eigen::Index n = input.cols();
  Matrix h;
  Matrix concat;
  std::vector<Matrix>* acts = nullptr;
  if (cache != nullptr) {
    cache->input = input;
    cache->dir_input = dir_input;
    cache->activations.resize(hidden_.size());
    acts = &cache->activations;
  }
  for (size_t l = 0; l < hidden_.size(); ++l) {
    const Layer& layer = hidden_[l];
    const Map weight(params + layer.offset, layer.out, layer.in);
    const VecMap bias(params + layer.offset + static_cast<std::size_t>(layer.in) * layer.out,
                      layer.out);
    Matrix next;
    if (l == 0) {
      next.noalias() = weight * input;
    } else if (static_cast<int>(l) == arch_.skip_layer) {
      concat.resize(h.rows() + input.rows(), n);
      concat.topRows(h.rows()) = h;
      concat.bottomRows(input.rows()) = input;
      next.noalias() = weight * concat;
    } else {
      next.noalias() = weight * h;
    }
    next.colwise() += bias;
    h = next.cwiseMax(T(0));
    if (acts != nullptr) {
      (*acts)[l] = h;
    }
  }
  {
    const Map weight(params + density_.offset, 1, density_.in);
    const T bias = params[density_.offset + static_cast<std::size_t>(density_.in)];
    Matrix pre = weight * h;
    pre.array() += bias;
    sigma.resize(1, n);
    for (Eigen::Index p = 0; p < n; ++p) {
      const T z = pre(0, p);
      // softplus(z) = max(z, 0) + log1p(exp(-|z|))
      sigma(0, p) = std::max(z, T(0)) + std::log1p(std::exp(-std::abs(z)));
    }
    if (cache != nullptr) {
      cache->sigma_pre = pre;
    }
  }
  {
    const Map weight(params + color_.offset, 3, color_.in);
    const VecMap bias(params + color_.offset + static_cast<std::size_t>(color_.in) * 3, 3);
    Matrix pre;
    if (arch_.view_dirs) {
      concat.resize(h.rows() + dir_input.rows(), n);
      concat.topRows(h.rows()) = h;
      concat.bottomRows(dir_input.rows()) = dir_input;
      pre.noalias() = weight * concat;
    } else {
      pre.noalias() = weight * h;
    }
    pre.colwise() += bias;
    color = (T(1) / (T(1) + (-pre.array()).exp())).matrix();
    if (cache != nullptr) {
      cache->color = color;
    }
  }
}

template <typename T>
void FieldNetwork<T>::backward_staged(const T* params, const Cache& cache, const Matrix& d_color,
                                      const Matrix& d_sigma, T* grad_params,
                                      Matrix* d_input) const {
  using Map = Eigen::Map<const Matrix>;
  using MutMap = Eigen::Map<Matrix>;
  using MutVecMap = Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>>;
  const Eigen::Index n = cache.input.cols();
  const Matrix& h_last = cache.activations.back();
  const int w = arch_.hidden_width;

  // Color head: sigmoid' = c (1 - c).
  const Matrix d_color_pre = (d_color.array() * cache.color.array() * (T(1) - cache.color.array())).matrix();
  Matrix d_h;
  {
    MutMap g_weight(grad_params + color_.offset, 3, color_.in);
    MutVecMap g_bias(grad_params + color_.offset + static_cast<std::size_t>(color_.in) * 3, 3);
    const Map weight(params + color_.offset, 3, color_.in);
    if (arch_.view_dirs) {
      Matrix concat(h_last.rows() + cache.dir_input.rows(), n);
      concat.topRows(h_last.rows()) = h_last;
      concat.bottomRows(cache.dir_input.rows()) = cache.dir_input;
      g_weight.noalias() += d_color_pre * concat.transpose();
      d_h.noalias() = weight.leftCols(w).transpose() * d_color_pre;
    } else {
      g_weight.noalias() += d_color_pre * h_last.transpose();
      d_h.noalias() = weight.transpose() * d_color_pre;
    }
    g_bias += d_color_pre.rowwise().sum();
  }
  // Density head: softplus' = sigmoid(z).
  {
    Matrix d_pre(1, n);
    for (Eigen::Index p = 0; p < n; ++p) {
      const T z = cache.sigma_pre(0, p);
      d_pre(0, p) = d_sigma(0, p) / (T(1) + std::exp(-z));
    }
    MutMap g_weight(grad_params + density_.offset, 1, density_.in);
    g_weight.noalias() += d_pre * h_last.transpose();
    grad_params[density_.offset + static_cast<std::size_t>(density_.in)] += d_pre.sum();
    const Map weight(params + density_.offset, 1, density_.in);
    d_h.noalias() += weight.transpose() * d_pre;
  }

  if (d_input != nullptr) {
    d_input->setZero(cache.input.rows(), n);
  }
  for (int l = static_cast<int>(hidden_.size()) - 1; l >= 0; --l) {
    const Layer& layer = hidden_[l];
    // ReLU': activation > 0.
    const Matrix d_pre = (cache.activations[l].array() > T(0)).select(d_h.array(), T(0)).matrix();
    MutMap g_weight(grad_params + layer.offset, layer.out, layer.in);
    MutVecMap g_bias(grad_params + layer.offset + static_cast<std::size_t>(layer.in) * layer.out,
                     layer.out);
    g_bias += d_pre.rowwise().sum();
    const Map weight(params + layer.offset, layer.out, layer.in);
    if (l == 0) {
      g_weight.noalias() += d_pre * cache.input.transpose();
      if (d_input != nullptr) {
        d_input->noalias() += weight.transpose() * d_pre;
      }
    } else if (l == arch_.skip_layer) {
      const Matrix& prev = cache.activations[l - 1];
      g_weight.leftCols(w).noalias() += d_pre * prev.transpose();
      g_weight.rightCols(cache.input.rows()).noalias() += d_pre * cache.input.transpose();
      if (d_input != nullptr) {
        d_input->noalias() += weight.rightCols(cache.input.rows()).transpose() * d_pre;
      }
      d_h.noalias() = weight.leftCols(w).transpose() * d_pre;
    } else {
      g_weight.noalias() += d_pre * cache.activations[l - 1].transpose();
      d_h.noalias() = weight.transpose() * d_pre;
    }
  }
}

template <typename T>
void FieldNetwork<T>::encoding_backward(const Eigen::Matrix3Xd& positions, const Matrix& d_input,
                                        Eigen::Matrix3Xd* d_positions, MatX* d_latent) const {
  const Eigen::Index n = positions.cols();
  const double inv_bound = 1.0 / arch_.scene_bound;
  if (d_positions != nullptr) {
    d_positions->resize(3, n);
    for (Eigen::Index p = 0; p < n; ++p) {
      const Vec3 x = positions.col(p) * inv_bound;
      Vec3 g;
      for (int c = 0; c < 3; ++c) {
        g[c] = static_cast<double>(d_input(c, p));
      }
      double freq = std::numbers::pi;
      for (int l = 0; l < arch_.encoding_bands; ++l) {
        for (int c = 0; c < 3; ++c) {
          g[c] += static_cast<double>(d_input(3 + 6 * l + c, p)) * freq * std::cos(freq * x[c]);
          g[c] -= static_cast<double>(d_input(3 + 6 * l + 3 + c, p)) * freq * std::sin(freq * x[c]);
        }
        freq *= 2.0;
      }
      d_positions->col(p) = g * inv_bound;
    }
  }
  if (d_latent != nullptr && arch_.latent_dim > 0) {
    *d_latent = d_input.bottomRows(arch_.latent_dim).template cast<double>();
  }
}

template class FieldNetwork<float>;
template class FieldNetwork<double>;

// ---------------------------------------------------------------------------
// Initialization and single-point helpers
// ---------------------------------------------------------------------------

template <typename T>
FieldParamsT<T> init_field(const FieldArch& arch, std::uint64_t seed) {
  arch.validate();
  FieldParamsT<T> params{arch, std::vector<T>(param_count(arch), T(0))};
  std::mt19937_64 rng(seed);
  std::size_t offset = 0;
  auto fill = [&](int in, int out, double scale) {
    const double bound = scale / std::sqrt(static_cast<double>(in));
    std::uniform_real_distribution<double> dist(-bound, bound);
    const std::size_t weights = static_cast<std::size_t>(in) * out;
    for (std::size_t i = 0; i < weights; ++i) {
      params.values[offset + i] = static_cast<T>(dist(rng));
    }
    // Biases start at zero.
    offset += weights + static_cast<std::size_t>(out);
  };
  const int w = arch.hidden_width;
  // ReLU layers use the He-style sqrt(6 / fan_in) bound.
  fill(arch.input_dim(), w, std::sqrt(6.0));
  for (int l = 1; l < arch.hidden_depth; ++l) {
    fill(w + (l == arch.skip_layer ? arch.input_dim() : 0), w, std::sqrt(6.0));
  }
  fill(w, 1, 0.1);
  fill(w + arch.dir_dim(), 3, 1.0);
  return params;
}

template FieldParamsT<float> init_field<float>(const FieldArch&, std::uint64_t);
template FieldParamsT<double> init_field<double>(const FieldArch&, std::uint64_t);

namespace {

template <typename T>
void single_point_inputs(const FieldArch& arch, const FieldInput& input, Eigen::Matrix3Xd& pos,
                         Eigen::Matrix3Xd& dir, MatX& latent) {
  if (!input.position.allFinite()) {
    throw NumericalError("field input position is not finite");
  }
  pos = input.position;
  dir = input.direction;
  if (arch.latent_dim > 0) {
    require(input.latent.size() == arch.latent_dim, "latent code has wrong length");
    latent = input.latent;
  }
}

}  // namespace

template <typename T>
FieldOutput eval_field(const FieldParamsT<T>& params, const FieldInput& input) {
  require(params.values.size() == param_count(params.arch), "field parameter count mismatch");
  const FieldNetwork<T> net(params.arch);
  Eigen::Matrix3Xd pos;
  Eigen::Matrix3Xd dir;
  MatX latent;
  single_point_inputs<T>(params.arch, input, pos, dir, latent);
  typename FieldNetwork<T>::Matrix in;
  typename FieldNetwork<T>::Matrix dir_in;
  net.encode(pos, &dir, &latent, in, dir_in);
  typename FieldNetwork<T>::Matrix color;
  typename FieldNetwork<T>::Matrix sigma;
  net.forward(params.values.data(), in, dir_in, color, sigma, nullptr);
  FieldOutput out;
  out.color = color.col(0).template cast<double>();
  out.density = static_cast<double>(sigma(0, 0));
  return out;
}

template <typename T>
FieldOutput eval_field(const FieldParamsT<T>& params, const Vec3& x0) {
  return eval_field(params, FieldInput{x0, Vec3::Zero(), VecX()});
}

template <typename T>
FieldGradient eval_field_backward(const FieldParamsT<T>& params, const FieldInput& input,
                                  const Vec3& d_color, double d_density) {
  require(params.values.size() == param_count(params.arch), "field parameter count mismatch");
  const FieldNetwork<T> net(params.arch);
  Eigen::Matrix3Xd pos;
  Eigen::Matrix3Xd dir;
  MatX latent;
  single_point_inputs<T>(params.arch, input, pos, dir, latent);
  typename FieldNetwork<T>::Matrix in;
  typename FieldNetwork<T>::Matrix dir_in;
  net.encode(pos, &dir, &latent, in, dir_in);
  typename FieldNetwork<T>::Matrix color;
  typename FieldNetwork<T>::Matrix sigma;
  typename FieldNetwork<T>::Cache cache;
  net.forward(params.values.data(), in, dir_in, color, sigma, &cache);
  typename FieldNetwork<T>::Matrix dc = d_color.cast<T>();
  typename FieldNetwork<T>::Matrix ds(1, 1);
  ds(0, 0) = static_cast<T>(d_density);
  std::vector<T> grad(params.values.size(), T(0));
  typename FieldNetwork<T>::Matrix d_in;
  net.backward(params.values.data(), cache, dc, ds, grad.data(), &d_in);
  FieldGradient out;
  out.params = Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>>(grad.data(), grad.size())
                   .template cast<double>();
  Eigen::Matrix3Xd d_pos;
  MatX d_latent;
  net.encoding_backward(pos, d_in, &d_pos, &d_latent);
  out.position = d_pos.col(0);
  if (params.arch.latent_dim > 0) {
    out.latent = d_latent.col(0);
  }
  return out;
}

template FieldOutput eval_field<float>(const FieldParamsT<float>&, const FieldInput&);
template FieldOutput eval_field<double>(const FieldParamsT<double>&, const FieldInput&);
template FieldOutput eval_field<float>(const FieldParamsT<float>&, const Vec3&);
template FieldOutput eval_field<double>(const FieldParamsT<double>&, const Vec3&);
template FieldGradient eval_field_backward<float>(const FieldParamsT<float>&, const FieldInput&,
                                                  const Vec3&, double);
template FieldGradient eval_field_backward<double>(const FieldParamsT<double>&, const FieldInput&,
                                                   const Vec3&, double);

}  // namespace anerf
