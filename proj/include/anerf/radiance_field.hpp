#pragma once

#include "anerf/common.hpp"

#include <cstdint>
#include <vector>

namespace anerf {

/// Architecture of the canonical-space field network.
///
/// Layer order of the flat parameter vector: hidden layer 0 (input ->
/// width), hidden layers 1..depth-1 (width [+ input at skip_layer] ->
/// width), density head (width -> 1), color head (width [+ direction
/// encoding] -> 3). Each layer stores its weight matrix column-major
/// (out x in) followed by its bias.
struct FieldArch {
  int encoding_bands = 10;
  int hidden_width = 128;
  int hidden_depth = 6;
  int skip_layer = 3;
  /// Appends an encoded ray direction to the color head (ablation only).
  bool view_dirs = false;
  int dir_bands = 4;
  /// Per-frame latent code appended to the position encoding (ablation only).
  int latent_dim = 0;
  /// Canonical coordinates are divided by this before encoding.
  double scene_bound = 1.5;

  void validate() const;
  int encoding_dim() const { return 3 + 6 * encoding_bands; }
  int input_dim() const { return encoding_dim() + latent_dim; }
  int dir_dim() const { return view_dirs ? 3 + 6 * dir_bands : 0; }

  bool operator==(const FieldArch&) const = default;
};

std::size_t param_count(const FieldArch& arch);

template <typename T>
struct FieldParamsT {
  FieldArch arch;
  std::vector<T> values;

  void validate() const;
};

using FieldParams = FieldParamsT<float>;

template <typename To, typename From>
FieldParamsT<To> cast_params(const FieldParamsT<From>& params) {
  FieldParamsT<To> out{params.arch, {}};
  out.values.assign(params.values.begin(), params.values.end());
  return out;
}

struct FieldOutput {
  Vec3 color = Vec3::Zero();
  double density = 0.0;
};

/// [x, sin(2^l pi x), cos(2^l pi x) for l < bands], sines then cosines per band.
VecX positional_encoding(const Vec3& x, int bands);

/// Fan-in scaled uniform initialization; the density head starts near zero
/// so the initial density is close to softplus(0).
template <typename T = float>
FieldParamsT<T> init_field(const FieldArch& arch, std::uint64_t seed);

/// Everything the network consumes per point besides its parameters.
struct FieldInput {
  Vec3 position = Vec3::Zero();
  Vec3 direction = Vec3::Zero();
  VecX latent;
};

template <typename T>
FieldOutput eval_field(const FieldParamsT<T>& params, const Vec3& x0);

template <typename T>
FieldOutput eval_field(const FieldParamsT<T>& params, const FieldInput& input);

struct FieldGradient {
  VecX params;
  Vec3 position = Vec3::Zero();
  VecX latent;
};

/// Reverse-mode gradient of upstream . (color, density).
template <typename T>
FieldGradient eval_field_backward(const FieldParamsT<T>& params, const FieldInput& input,
                                  const Vec3& d_color, double d_density);

template <typename T>
FieldGradient eval_field_backward(const FieldParamsT<T>& params, const Vec3& x0,
                                  const Vec3& d_color, double d_density) {
  return eval_field_backward(params, FieldInput{x0, Vec3::Zero(), VecX()}, d_color, d_density);
}

/// Batched forward/backward over columns of points.
template <typename T>
class FieldNetwork {
 public:
  using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>;
  using Vector = Eigen::Matrix<T, Eigen::Dynamic, 1>;

  struct Cache {
    Matrix input;      // input_dim x N
    Matrix dir_input;  // dir_dim x N
    std::vector<Matrix> activations;  // post-ReLU per hidden layer
    Matrix sigma_pre;  // 1 x N
    Matrix color;      // 3 x N (post-sigmoid)
  };

  explicit FieldNetwork(const FieldArch& arch);

  /// Encodes raw inputs (positions 3xN, directions 3xN, latent LxN).
  void encode(const Eigen::Matrix3Xd& positions, const Eigen::Matrix3Xd* directions,
              const MatX* latent, Matrix& input, Matrix& dir_input) const;

  void forward(const T* params, const Matrix& input, const Matrix& dir_input, Matrix& color,
               Matrix& sigma, Cache* cache) const;

  /// Accumulates into grad_params; d_input (input_dim x N) is optional.
  void backward(const T* params, const Cache& cache, const Matrix& d_color, const Matrix& d_sigma,
                T* grad_params, Matrix* d_input) const;

  /// Chains d_input through the encoding to raw positions and latent codes.
  void encoding_backward(const Eigen::Matrix3Xd& positions, const Matrix& d_input,
                         Eigen::Matrix3Xd* d_positions, MatX* d_latent) const;

  const FieldArch& arch() const { return arch_; }

 private:
  struct Layer {
    int in;
    int out;
    std::size_t offset;
  };

  /// Parameters are copied to aligned storage first so that vectorized
  /// products do not depend on where the caller's buffer happens to sit.
  void forward_staged(const T* params, const Matrix& input, const Matrix& dir_input,
                      Matrix& color, Matrix& sigma, Cache* cache) const;
  void backward_staged(const T* params, const Cache& cache, const Matrix& d_color,
                       const Matrix& d_sigma, T* grad_params, Matrix* d_input) const;

  FieldArch arch_;
  std::vector<Layer> hidden_;
  Layer density_{};
  Layer color_{};
  std::size_t size_ = 0;
};

extern template class FieldNetwork<float>;
extern template class FieldNetwork<double>;

}  // namespace anerf
