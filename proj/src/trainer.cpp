#include "anerf/trainer.hpp"

#include "anerf/rotation.hpp"
#include "anerf/text_util.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <map>
#include <numbers>
#include <sstream>

namespace anerf {

void Frame::validate() const {
  require(image.channels == 3, "frame image must be RGB");
  require(mask.channels == 1, "frame mask must be single-channel");
  require(image.width == camera.width && image.height == camera.height,
          "frame image resolution must match its camera");
  require(mask.width == image.width && mask.height == image.height,
          "frame mask resolution must match its image");
  for (float v : mask.pixels) {
    require(v == 0.0f || v == 1.0f, "frame mask must be binary");
  }
  camera.validate();
}

void TrainConfig::validate() const {
  require(lambda_d >= 0.0 && lambda_1 >= 0.0 && lambda_2 >= 0.0, "loss weights must be >= 0");
  require(lr_field > 0.0 && lr_pose > 0.0 && lr_latent > 0.0, "learning rates must be > 0");
  require(batch_rays >= 1, "batch_rays must be >= 1");
  require(iterations >= 0, "iterations must be >= 0");
  require(latent_dim >= 0, "latent_dim must be >= 0");
  require(foreground_fraction >= 0.0 && foreground_fraction <= 1.0,
          "foreground_fraction must be in [0, 1]");
  require(coarse_samples >= 1 && fine_samples >= 0, "sample counts must be positive");
  require(k_neighbors >= 1 && k_neighbors <= kMaxNeighbors, "k_neighbors must be in [1, 16]");
  require(bandwidth > 0.0 && mask_threshold > 0.0, "bandwidth and mask_threshold must be > 0");
  require(checkpoint_every >= 0, "checkpoint_every must be >= 0");
  field_arch().validate();
}

FieldArch TrainConfig::field_arch() const {
  FieldArch a = arch;
  a.view_dirs = view_dirs;
  a.latent_dim = latent_dim;
  return a;
}

DeformationConfig TrainConfig::deformation_config(const SkinnedBody& body) const {
  DeformationConfig d = make_deformation_config(body, canonical);
  d.k_neighbors = k_neighbors;
  d.bandwidth = bandwidth;
  d.mask_threshold = mask_threshold;
  d.validate();
  return d;
}

// ---------------------------------------------------------------------------
// Config text
// ---------------------------------------------------------------------------

namespace {

std::string bool_text(bool b) { return b ? "true" : "false"; }

bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1" || value == "on") {
    return true;
  }
  if (value == "false" || value == "0" || value == "off") {
    return false;
  }
  throw InvalidInputError("config key '" + key + "' expects true/false, got '" + value + "'");
}

double parse_real(const std::string& key, const std::string& value) {
  double out = 0.0;
  if (!parse_double(value, out) || !std::isfinite(out)) {
    throw InvalidInputError("config key '" + key + "' expects a number, got '" + value + "'");
  }
  return out;
}

long long parse_integer(const std::string& key, const std::string& value) {
  long long out = 0;
  if (!parse_int(value, out)) {
    throw InvalidInputError("config key '" + key + "' expects an integer, got '" + value + "'");
  }
  return out;
}

Vec3 parse_vec3(const std::string& key, const std::string& value) {
  std::string v = value;
  std::replace(v.begin(), v.end(), ',', ' ');
  const auto tokens = split_whitespace(v);
  if (tokens.size() != 3) {
    throw InvalidInputError("config key '" + key + "' expects three numbers");
  }
  return Vec3(parse_real(key, tokens[0]), parse_real(key, tokens[1]), parse_real(key, tokens[2]));
}

}  // namespace

std::string config_to_text(const TrainConfig& c) {
  std::ostringstream out;
  out << "lambda_d = " << format_double(c.lambda_d) << '\n'
      << "lambda_1 = " << format_double(c.lambda_1) << '\n'
      << "lambda_2 = " << format_double(c.lambda_2) << '\n'
      << "batch_rays = " << c.batch_rays << '\n'
      << "iterations = " << c.iterations << '\n'
      << "lr_field = " << format_double(c.lr_field) << '\n'
      << "lr_pose = " << format_double(c.lr_pose) << '\n'
      << "lr_latent = " << format_double(c.lr_latent) << '\n'
      << "seed = " << c.seed << '\n'
      << "refine_poses = " << bool_text(c.refine_poses) << '\n'
      << "canonical = " << to_string(c.canonical) << '\n'
      << "deformation = " << bool_text(c.deformation) << '\n'
      << "latent_dim = " << c.latent_dim << '\n'
      << "view_dirs = " << bool_text(c.view_dirs) << '\n'
      << "foreground_fraction = " << format_double(c.foreground_fraction) << '\n'
      << "coarse_samples = " << c.coarse_samples << '\n'
      << "fine_samples = " << c.fine_samples << '\n'
      << "jitter = " << bool_text(c.jitter) << '\n'
      << "background = " << format_double(c.background.x()) << ' '
      << format_double(c.background.y()) << ' ' << format_double(c.background.z()) << '\n'
      << "encoding_bands = " << c.arch.encoding_bands << '\n'
      << "hidden_width = " << c.arch.hidden_width << '\n'
      << "hidden_depth = " << c.arch.hidden_depth << '\n'
      << "skip_layer = " << c.arch.skip_layer << '\n'
      << "dir_bands = " << c.arch.dir_bands << '\n'
      << "scene_bound = " << format_double(c.arch.scene_bound) << '\n'
      << "k_neighbors = " << c.k_neighbors << '\n'
      << "bandwidth = " << format_double(c.bandwidth) << '\n'
      << "mask_threshold = " << format_double(c.mask_threshold) << '\n'
      << "checkpoint_every = " << c.checkpoint_every << '\n';
  return out.str();
}

void set_config_value(TrainConfig& c, const std::string& key, const std::string& value) {
  auto as_int = [&] { return static_cast<int>(parse_integer(key, value)); };
  if (key == "lambda_d") {
    c.lambda_d = parse_real(key, value);
  } else if (key == "lambda_1") {
    c.lambda_1 = parse_real(key, value);
  } else if (key == "lambda_2") {
    c.lambda_2 = parse_real(key, value);
  } else if (key == "batch_rays") {
    c.batch_rays = as_int();
  } else if (key == "iterations") {
    c.iterations = as_int();
  } else if (key == "lr_field") {
    c.lr_field = parse_real(key, value);
  } else if (key == "lr_pose") {
    c.lr_pose = parse_real(key, value);
  } else if (key == "lr_latent") {
    c.lr_latent = parse_real(key, value);
  } else if (key == "seed") {
    const long long s = parse_integer(key, value);
    require(s >= 0, "config key 'seed' must be >= 0");
    c.seed = static_cast<std::uint64_t>(s);
  } else if (key == "refine_poses") {
    c.refine_poses = parse_bool(key, value);
  } else if (key == "canonical") {
    c.canonical = parse_pose_preset(value);
  } else if (key == "deformation") {
    c.deformation = parse_bool(key, value);
  } else if (key == "latent_dim") {
    c.latent_dim = as_int();
  } else if (key == "view_dirs") {
    c.view_dirs = parse_bool(key, value);
  } else if (key == "foreground_fraction") {
    c.foreground_fraction = parse_real(key, value);
  } else if (key == "coarse_samples") {
    c.coarse_samples = as_int();
  } else if (key == "fine_samples") {
    c.fine_samples = as_int();
  } else if (key == "jitter") {
    c.jitter = parse_bool(key, value);
  } else if (key == "background") {
    c.background = parse_vec3(key, value);
  } else if (key == "encoding_bands") {
    c.arch.encoding_bands = as_int();
  } else if (key == "hidden_width") {
    c.arch.hidden_width = as_int();
  } else if (key == "hidden_depth") {
    c.arch.hidden_depth = as_int();
  } else if (key == "skip_layer") {
    c.arch.skip_layer = as_int();
  } else if (key == "dir_bands") {
    c.arch.dir_bands = as_int();
  } else if (key == "scene_bound") {
    c.arch.scene_bound = parse_real(key, value);
  } else if (key == "k_neighbors") {
    c.k_neighbors = as_int();
  } else if (key == "bandwidth") {
    c.bandwidth = parse_real(key, value);
  } else if (key == "mask_threshold") {
    c.mask_threshold = parse_real(key, value);
  } else if (key == "checkpoint_every") {
    c.checkpoint_every = as_int();
  } else {
    throw InvalidInputError("unknown config key '" + key + "'");
  }
}

TrainConfig parse_config(const std::string& text, TrainConfig base) {
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto hash = line.find('#');
    const std::string body = trim(line.substr(0, hash));
    if (body.empty()) {
      continue;
    }
    const auto eq = body.find('=');
    if (eq == std::string::npos) {
      throw ParseError("config line " + std::to_string(line_no) + ": expected key = value");
    }
    try {
      set_config_value(base, trim(body.substr(0, eq)), trim(body.substr(eq + 1)));
    } catch (const InvalidInputError& e) {
      throw ParseError("config line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  base.validate();
  return base;
}

TrainConfig load_config(const std::filesystem::path& path, TrainConfig base) {
  std::ifstream in(path);
  if (!in) {
    throw IoError("cannot open config file " + path.string());
  }
  std::stringstream buffer;
  buffer << in.rdbuf();
  return parse_config(buffer.str(), std::move(base));
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

ReconstructionLoss loss_reconstruction(const Eigen::Matrix3Xd& coarse,
                                       const Eigen::Matrix3Xd& fine,
                                       const Eigen::Matrix3Xd& target) {
  require(coarse.cols() == target.cols() && fine.cols() == target.cols(),
          "reconstruction loss needs equal batch sizes");
  require(target.cols() > 0, "reconstruction loss needs a non-empty batch");
  const double inv_b = 1.0 / static_cast<double>(target.cols());
  ReconstructionLoss out;
  const Eigen::Matrix3Xd rc = coarse - target;
  const Eigen::Matrix3Xd rf = fine - target;
  out.value = (rc.squaredNorm() + rf.squaredNorm()) * inv_b;
  out.d_coarse = 2.0 * inv_b * rc;
  out.d_fine = 2.0 * inv_b * rf;
  return out;
}

BackgroundLoss loss_background(const VecX& coarse, const VecX& fine, const VecX& mask) {
  require(coarse.size() == mask.size() && fine.size() == mask.size(),
          "background loss needs equal batch sizes");
  require(mask.size() > 0, "background loss needs a non-empty batch");
  const double inv_b = 1.0 / static_cast<double>(mask.size());
  BackgroundLoss out;
  out.d_coarse.resize(mask.size());
  out.d_fine.resize(mask.size());
  for (Eigen::Index i = 0; i < mask.size(); ++i) {
    const double rc = coarse[i] - mask[i];
    const double rf = fine[i] - mask[i];
    out.value += (std::abs(rc) + std::abs(rf)) * inv_b;
    out.d_coarse[i] = (rc > 0.0 ? 1.0 : rc < 0.0 ? -1.0 : 0.0) * inv_b;
    out.d_fine[i] = (rf > 0.0 ? 1.0 : rf < 0.0 ? -1.0 : 0.0) * inv_b;
  }
  return out;
}

PoseLoss loss_pose(const std::vector<PoseParams>& current, const std::vector<PoseParams>& init,
                   double lambda_1, double lambda_2) {
  require(!current.empty(), "pose loss needs at least one frame");
  require(current.size() == init.size(), "pose loss needs one initial pose per frame");
  const size_t n = current.size();
  std::vector<VecX> cur(n);
  PoseLoss out;
  out.gradients.resize(n);
  for (size_t t = 0; t < n; ++t) {
    cur[t] = current[t].flatten();
    out.gradients[t] = VecX::Zero(cur[t].size());
  }
  for (size_t t = 0; t < n; ++t) {
    const VecX diff = cur[t] - init[t].flatten();
    require(diff.size() == cur[t].size(), "pose sizes must agree");
    const double norm = diff.norm();
    out.value += lambda_1 * norm;
    if (norm > 0.0) {
      out.gradients[t] += lambda_1 * diff / norm;
    }
    if (t + 1 < n) {
      const VecX step = cur[t] - cur[t + 1];
      const double s = step.norm();
      out.value += lambda_2 * s;
      if (s > 0.0) {
        out.gradients[t] += lambda_2 * step / s;
        out.gradients[t + 1] -= lambda_2 * step / s;
      }
    }
  }
  return out;
}

double total_loss(const LossParts& parts, const TrainConfig& config) {
  return parts.reconstruction + parts.pose + config.lambda_d * parts.background;
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

template <typename T>
void adam_step(std::span<T> params, std::span<const T> grads, AdamState& state, double lr,
               std::string_view group) {
  const size_t n = params.size();
  if (grads.size() != n) {
    throw InvalidInputError("adam: gradient length does not match parameter group '" +
                            std::string(group) + "'");
  }
  if (state.m.empty() && state.v.empty()) {
    state.m.assign(n, 0.0);
    state.v.assign(n, 0.0);
  }
  if (state.m.size() != n || state.v.size() != n) {
    throw InvalidInputError("adam: moment length does not match parameter group '" +
                            std::string(group) + "'");
  }
  for (size_t i = 0; i < n; ++i) {
    if (!std::isfinite(static_cast<double>(grads[i]))) {
      throw NumericalError("adam: non-finite gradient in parameter group '" + std::string(group) +
                           "'");
    }
  }
  ++state.step;
  const double c1 = 1.0 - std::pow(kAdamBeta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(kAdamBeta2, static_cast<double>(state.step));
  for (size_t i = 0; i < n; ++i) {
    const double g = static_cast<double>(grads[i]);
    state.m[i] = kAdamBeta1 * state.m[i] + (1.0 - kAdamBeta1) * g;
    state.v[i] = kAdamBeta2 * state.v[i] + (1.0 - kAdamBeta2) * g * g;
    const double m_hat = state.m[i] / c1;
    const double v_hat = state.v[i] / c2;
    params[i] = static_cast<T>(static_cast<double>(params[i]) -
                               lr * m_hat / (std::sqrt(v_hat) + kAdamEpsilon));
  }
}

template void adam_step<float>(std::span<float>, std::span<const float>, AdamState&, double,
                               std::string_view);
template void adam_step<double>(std::span<double>, std::span<const double>, AdamState&, double,
                                std::string_view);

ShapeParams mean_shape(const std::vector<ShapeParams>& shapes) {
  require(!shapes.empty(), "mean_shape needs at least one shape");
  VecX sum = VecX::Zero(shapes[0].coefficients.size());
  for (const ShapeParams& s : shapes) {
    require(s.coefficients.size() == sum.size(), "mean_shape needs equal dimensions");
    sum += s.coefficients;
  }
  return ShapeParams{sum / static_cast<double>(shapes.size())};
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

bool Checkpoint::operator==(const Checkpoint& o) const {
  if (latents.size() != o.latents.size()) {
    return false;
  }
  for (size_t i = 0; i < latents.size(); ++i) {
    if (latents[i] != o.latents[i]) {
      return false;
    }
  }
  return iteration == o.iteration && coarse.arch == o.coarse.arch &&
         coarse.values == o.coarse.values && fine.arch == o.fine.arch &&
         fine.values == o.fine.values && deformation == o.deformation &&
         deformation_config.k_neighbors == o.deformation_config.k_neighbors &&
         deformation_config.bandwidth == o.deformation_config.bandwidth &&
         deformation_config.mask_threshold == o.deformation_config.mask_threshold &&
         deformation_config.canonical_pose == o.deformation_config.canonical_pose &&
         center == o.center && background == o.background &&
         shape.coefficients == o.shape.coefficients && poses == o.poses;
}

namespace {

constexpr const char* kCheckpointMagic = "anerf-checkpoint";

void write_values(std::ostream& out, const VecX& v) {
  for (Eigen::Index i = 0; i < v.size(); ++i) {
    out << (i == 0 ? "" : " ") << format_double(v[i]);
  }
  out << '\n';
}

void write_floats_le(std::ostream& out, const std::vector<float>& values) {
  std::vector<char> bytes(values.size() * 4);
  for (size_t i = 0; i < values.size(); ++i) {
    std::uint32_t u = std::bit_cast<std::uint32_t>(values[i]);
    for (int b = 0; b < 4; ++b) {
      bytes[i * 4 + b] = static_cast<char>((u >> (8 * b)) & 0xffu);
    }
  }
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

class HeaderReader {
 public:
  explicit HeaderReader(std::istream& in) : in_(in) {}

  std::vector<std::string> line(const std::string& key, size_t min_tokens) {
    std::string text;
    if (!std::getline(in_, text)) {
      throw ParseError("checkpoint truncated before '" + key + "' (line " +
                       std::to_string(line_no_ + 1) + ")");
    }
    ++line_no_;
    auto tokens = split_whitespace(text);
    if (!key.empty() && (tokens.empty() || tokens[0] != key)) {
      throw ParseError("checkpoint line " + std::to_string(line_no_) + ": expected '" + key + "'");
    }
    if (tokens.size() < min_tokens) {
      throw ParseError("checkpoint line " + std::to_string(line_no_) + ": too few fields for '" +
                       key + "'");
    }
    return tokens;
  }

  double real(const std::string& token) const {
    double v = 0.0;
    if (!parse_double(token, v)) {
      throw ParseError("checkpoint line " + std::to_string(line_no_) + ": bad number '" + token +
                       "'");
    }
    return v;
  }

  long long integer(const std::string& token) const {
    long long v = 0;
    if (!parse_int(token, v)) {
      throw ParseError("checkpoint line " + std::to_string(line_no_) + ": bad integer '" + token +
                       "'");
    }
    return v;
  }

  VecX values(const std::vector<std::string>& tokens, size_t first, size_t count) const {
    if (tokens.size() != first + count) {
      throw ParseError("checkpoint line " + std::to_string(line_no_) + ": expected " +
                       std::to_string(count) + " values");
    }
    VecX v(static_cast<Eigen::Index>(count));
    for (size_t i = 0; i < count; ++i) {
      v[static_cast<Eigen::Index>(i)] = real(tokens[first + i]);
    }
    return v;
  }

  VecX value_line(size_t count) {
    const auto tokens = line("", 0);
    return values(tokens, 0, count);
  }

 private:
  std::istream& in_;
  int line_no_ = 0;
};

}  // namespace

void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path) {
  const FieldArch& a = ck.coarse.arch;
  require(ck.fine.arch == a, "coarse and fine networks must share an arch");
  require(ck.coarse.values.size() == param_count(a) && ck.fine.values.size() == param_count(a),
          "parameter count does not match the arch");
  if (path.has_parent_path()) {
    std::filesystem::create_directories(path.parent_path());
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) {
    throw IoError("cannot write checkpoint " + path.string());
  }
  out << kCheckpointMagic << ' ' << kCheckpointVersion << '\n';
  out << "iteration " << ck.iteration << '\n';
  out << "arch " << a.encoding_bands << ' ' << a.hidden_width << ' ' << a.hidden_depth << ' '
      << a.skip_layer << ' ' << (a.view_dirs ? 1 : 0) << ' ' << a.dir_bands << ' '
      << a.latent_dim << '\n';
  out << "scene_bound " << format_double(a.scene_bound) << '\n';
  const DeformationConfig& d = ck.deformation_config;
  out << "deformation " << (ck.deformation ? 1 : 0) << ' ' << d.k_neighbors << ' '
      << format_double(d.bandwidth) << ' ' << format_double(d.mask_threshold) << '\n';
  out << "center ";
  write_values(out, ck.center);
  out << "background ";
  write_values(out, ck.background);
  const VecX canonical = d.canonical_pose.flatten();
  out << "canonical_pose " << canonical.size() << '\n';
  write_values(out, canonical);
  out << "shape " << ck.shape.coefficients.size() << '\n';
  write_values(out, ck.shape.coefficients);
  const size_t pose_len = ck.poses.empty() ? 0 : static_cast<size_t>(ck.poses[0].flatten().size());
  out << "poses " << ck.poses.size() << ' ' << pose_len << '\n';
  for (const PoseParams& p : ck.poses) {
    const VecX v = p.flatten();
    require(static_cast<size_t>(v.size()) == pose_len, "all poses must have the same size");
    write_values(out, v);
  }
  const size_t latent_len = ck.latents.empty() ? 0 : static_cast<size_t>(ck.latents[0].size());
  out << "latents " << ck.latents.size() << ' ' << latent_len << '\n';
  for (const VecX& l : ck.latents) {
    require(static_cast<size_t>(l.size()) == latent_len, "all latent codes must have one size");
    write_values(out, l);
  }
  out << "params " << ck.coarse.values.size() << '\n';
  out << "blob\n";
  write_floats_le(out, ck.coarse.values);
  write_floats_le(out, ck.fine.values);
  if (!out) {
    throw IoError("failed writing checkpoint " + path.string());
  }
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw IoError("cannot open checkpoint " + path.string());
  }
  HeaderReader r(in);
  const auto magic = r.line("", 2);
  if (magic[0] != kCheckpointMagic) {
    throw ParseError("not a checkpoint file: " + path.string());
  }
  const long long version = r.integer(magic[1]);
  if (version != kCheckpointVersion) {
    throw VersionError("checkpoint version " + std::to_string(version) +
                       " is not supported (expected " + std::to_string(kCheckpointVersion) + ")");
  }
  Checkpoint ck;
  ck.iteration = static_cast<int>(r.integer(r.line("iteration", 2)[1]));
  const auto arch = r.line("arch", 8);
  FieldArch a;
  a.encoding_bands = static_cast<int>(r.integer(arch[1]));
  a.hidden_width = static_cast<int>(r.integer(arch[2]));
  a.hidden_depth = static_cast<int>(r.integer(arch[3]));
  a.skip_layer = static_cast<int>(r.integer(arch[4]));
  a.view_dirs = r.integer(arch[5]) != 0;
  a.dir_bands = static_cast<int>(r.integer(arch[6]));
  a.latent_dim = static_cast<int>(r.integer(arch[7]));
  a.scene_bound = r.real(r.line("scene_bound", 2)[1]);
  try {
    a.validate();
  } catch (const InvalidInputError& e) {
    throw ParseError(std::string("checkpoint arch: ") + e.what());
  }
  const auto def = r.line("deformation", 5);
  ck.deformation = r.integer(def[1]) != 0;
  ck.deformation_config.k_neighbors = static_cast<int>(r.integer(def[2]));
  ck.deformation_config.bandwidth = r.real(def[3]);
  ck.deformation_config.mask_threshold = r.real(def[4]);
  ck.center = r.values(r.line("center", 4), 1, 3);
  ck.background = r.values(r.line("background", 4), 1, 3);
  const size_t canon_len = static_cast<size_t>(r.integer(r.line("canonical_pose", 2)[1]));
  ck.deformation_config.canonical_pose = PoseParams::unflatten(r.value_line(canon_len));
  const size_t shape_len = static_cast<size_t>(r.integer(r.line("shape", 2)[1]));
  ck.shape.coefficients = r.value_line(shape_len);
  const auto poses = r.line("poses", 3);
  const long long pose_count = r.integer(poses[1]);
  const size_t pose_len = static_cast<size_t>(r.integer(poses[2]));
  for (long long i = 0; i < pose_count; ++i) {
    ck.poses.push_back(PoseParams::unflatten(r.value_line(pose_len)));
  }
  const auto latents = r.line("latents", 3);
  const long long latent_count = r.integer(latents[1]);
  const size_t latent_len = static_cast<size_t>(r.integer(latents[2]));
  for (long long i = 0; i < latent_count; ++i) {
    ck.latents.push_back(r.value_line(latent_len));
  }
  const size_t count = static_cast<size_t>(r.integer(r.line("params", 2)[1]));
  if (count != param_count(a)) {
    throw ParseError("checkpoint parameter count " + std::to_string(count) +
                     " does not match its arch (" + std::to_string(param_count(a)) + ")");
  }
  r.line("blob", 1);
  std::vector<char> bytes(count * 8);
  in.read(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (in.gcount() != static_cast<std::streamsize>(bytes.size())) {
    throw ParseError("checkpoint parameter blob is truncated");
  }
  auto decode = [&](size_t offset, std::vector<float>& out) {
    out.resize(count);
    for (size_t i = 0; i < count; ++i) {
      std::uint32_t u = 0;
      for (int b = 0; b < 4; ++b) {
        u |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[offset + i * 4 + b]))
             << (8 * b);
      }
      out[i] = std::bit_cast<float>(u);
    }
  };
  ck.coarse.arch = a;
  ck.fine.arch = a;
  decode(0, ck.coarse.values);
  decode(count * 4, ck.fine.values);
  return ck;
}

void write_log_csv(const std::vector<TrainLogRow>& log, const std::filesystem::path& path) {
  if (path.has_parent_path()) {
    std::filesystem::create_directories(path.parent_path());
  }
  std::ofstream out(path);
  if (!out) {
    throw IoError("cannot write training log " + path.string());
  }
  out << "iteration,frame,loss_c,loss_p,loss_d,total,pose_error_deg\n";
  for (const TrainLogRow& row : log) {
    out << row.iteration << ',' << row.frame << ',' << format_double(row.reconstruction) << ','
        << format_double(row.pose) << ',' << format_double(row.background) << ','
        << format_double(row.total) << ',';
    if (std::isfinite(row.pose_error_deg)) {
      out << format_double(row.pose_error_deg);
    }
    out << '\n';
  }
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

double mean_joint_angle_error_deg(const std::vector<PoseParams>& a,
                                  const std::vector<PoseParams>& b) {
  require(a.size() == b.size() && !a.empty(), "pose lists must be non-empty and equal in size");
  double sum = 0.0;
  long long count = 0;
  for (size_t t = 0; t < a.size(); ++t) {
    require(a[t].joint_rotations.size() == b[t].joint_rotations.size(),
            "poses must have the same joint count");
    for (size_t j = 0; j < a[t].joint_rotations.size(); ++j) {
      sum += rotation_angle_between(axis_angle_to_matrix(a[t].joint_rotations[j]),
                                    axis_angle_to_matrix(b[t].joint_rotations[j]));
      ++count;
    }
  }
  return sum / static_cast<double>(count) * 180.0 / std::numbers::pi;
}

VecX mean_latent(const Checkpoint& ck) {
  const int dim = ck.coarse.arch.latent_dim;
  if (dim == 0) {
    return VecX();
  }
  VecX sum = VecX::Zero(dim);
  for (const VecX& l : ck.latents) {
    sum += l;
  }
  return ck.latents.empty() ? sum : VecX(sum / static_cast<double>(ck.latents.size()));
}

namespace {

/// Everything the shared loop mutates.
struct LoopState {
  Checkpoint* checkpoint;
  OptimizerState optimizer;
  bool update_field = true;
  bool update_poses = true;
  bool update_latents = true;
};

Eigen::AlignedBox3d posed_bounds(const SkinnedBody& body, const ShapeParams& shape,
                                 const PoseParams& pose) {
  const VertexTransforms vt = vertex_transforms(body, shape, pose);
  Eigen::AlignedBox3d box;
  for (const Vec3& v : vt.posed_vertices) {
    box.extend(v);
  }
  return box;
}

std::vector<TrainLogRow> run_loop(const SkinnedBody& body, std::vector<Frame>& frames,
                                  const TrainConfig& config, LoopState& st, int iterations,
                                  const TrainOptions& options) {
  Checkpoint& ck = *st.checkpoint;
  const size_t frame_count = frames.size();
  const int nc = config.coarse_samples;
  const int nf = config.fine_samples;
  const int b = config.batch_rays;
  const bool want_pose_grad = st.update_poses && ck.deformation;
  const bool have_gt = std::all_of(frames.begin(), frames.end(),
                                   [](const Frame& f) { return f.pose_gt.has_value(); });
  std::vector<PoseParams> gt;
  std::vector<PoseParams> init;
  for (const Frame& f : frames) {
    init.push_back(f.pose_init);
    if (have_gt) {
      gt.push_back(*f.pose_gt);
    }
  }
  st.optimizer.poses.resize(frame_count);
  st.optimizer.latents.resize(frame_count);

  const FieldArch& arch = ck.coarse.arch;
  DifferentiablePass<float> coarse_pass(arch);
  DifferentiablePass<float> fine_pass(arch);
  std::vector<float> grad_coarse(ck.coarse.values.size());
  std::vector<float> grad_fine(ck.fine.values.size());
  Rng rng(config.seed);
  std::vector<TrainLogRow> log;
  log.reserve(static_cast<size_t>(iterations));

  for (int it = 1; it <= iterations; ++it) {
    std::uniform_int_distribution<size_t> pick_frame(0, frame_count - 1);
    const size_t t = pick_frame(rng);
    Frame& frame = frames[t];
    const std::vector<Pixel> pixels =
        sample_training_pixels(frame.mask, b, config.foreground_fraction, rng);
    const std::vector<Ray> rays = generate_rays(frame.camera, pixels);

    std::optional<PosedBody> posed;
    Eigen::AlignedBox3d bounds;
    if (ck.deformation) {
      posed.emplace(body, ck.shape, frame.pose_current, ck.deformation_config, want_pose_grad);
      bounds = posed->bounds();
    } else {
      bounds = posed_bounds(body, ck.shape, frame.pose_current);
    }
    const auto [near, far] = near_far_for_bounds(bounds, ck.deformation_config.mask_threshold);
    const WarpContext warp{posed ? &*posed : nullptr, ck.center};

    std::vector<Rng> ray_rngs;
    if (config.jitter) {
      ray_rngs.reserve(rays.size());
      for (size_t r = 0; r < rays.size(); ++r) {
        ray_rngs.push_back(ray_rng(config.seed, static_cast<std::uint64_t>(it - 1) * b + r));
      }
    }
    std::vector<double> coarse_depths(static_cast<size_t>(b) * nc);
    for (int r = 0; r < b; ++r) {
      const auto d = stratified_depths(near, far, nc, config.jitter ? &ray_rngs[r] : nullptr);
      std::copy(d.begin(), d.end(), coarse_depths.begin() + static_cast<long>(r) * nc);
    }
    const PassSamples cs = prepare_pass(rays, coarse_depths, nc, near, far, warp, want_pose_grad);
    const VecX* latent = arch.latent_dim > 0 ? &ck.latents[t] : nullptr;
    coarse_pass.forward(ck.coarse, cs, latent);

    std::vector<double> fine_depths;
    int per_fine = nc;
    if (nf > 0) {
      per_fine = nc + nf;
      fine_depths.resize(static_cast<size_t>(b) * per_fine);
      for (int r = 0; r < b; ++r) {
        const std::vector<double> cd(coarse_depths.begin() + static_cast<long>(r) * nc,
                                     coarse_depths.begin() + static_cast<long>(r + 1) * nc);
        const auto d = importance_depths(cd, near, far,
                                         coarse_pass.result().weights.data() +
                                             static_cast<size_t>(r) * nc,
                                         nf, config.jitter ? &ray_rngs[r] : nullptr);
        std::copy(d.begin(), d.end(), fine_depths.begin() + static_cast<long>(r) * per_fine);
      }
    } else {
      fine_depths = coarse_depths;
    }
    const PassSamples fs = prepare_pass(rays, fine_depths, per_fine, near, far, warp,
                                        want_pose_grad);
    fine_pass.forward(ck.fine, fs, latent);

    const PassResult& rc = coarse_pass.result();
    const PassResult& rf = fine_pass.result();
    Eigen::Matrix3Xd target(3, b);
    VecX mask(b);
    for (int r = 0; r < b; ++r) {
      const Pixel& p = pixels[r];
      for (int c = 0; c < 3; ++c) {
        target(c, r) = frame.image.at(p.row, p.col, c);
      }
      mask[r] = frame.mask.at(p.row, p.col);
    }
    const Vec3& bg = ck.background;
    const Eigen::Matrix3Xd pixel_c = rc.color + bg * (VecX::Ones(b) - rc.density).transpose();
    const Eigen::Matrix3Xd pixel_f = rf.color + bg * (VecX::Ones(b) - rf.density).transpose();
    const ReconstructionLoss lc = loss_reconstruction(pixel_c, pixel_f, target);
    const BackgroundLoss ld = loss_background(rc.density, rf.density, mask);
    std::vector<PoseParams> current;
    current.reserve(frame_count);
    for (const Frame& f : frames) {
      current.push_back(f.pose_current);
    }
    const PoseLoss lp = loss_pose(current, init, config.lambda_1, config.lambda_2);
    const LossParts parts{lc.value, lp.value, ld.value};
    const double total = total_loss(parts, config);
    if (!std::isfinite(total)) {
      throw NumericalError("non-finite loss at iteration " + std::to_string(it) + " (frame " +
                           std::to_string(t) + ")");
    }

    // Pixel = C + (1 - D) bg, so dL/dD picks up -bg . dL/dpixel.
    const VecX dd_c = config.lambda_d * ld.d_coarse - (bg.transpose() * lc.d_coarse).transpose();
    const VecX dd_f = config.lambda_d * ld.d_fine - (bg.transpose() * lc.d_fine).transpose();
    std::fill(grad_coarse.begin(), grad_coarse.end(), 0.0f);
    std::fill(grad_fine.begin(), grad_fine.end(), 0.0f);
    VecX grad_pose = VecX::Zero(frame.pose_current.flatten().size());
    VecX grad_latent = VecX::Zero(arch.latent_dim);
    const bool want_latent = st.update_latents && arch.latent_dim > 0;
    coarse_pass.backward(ck.coarse, lc.d_coarse, dd_c, grad_coarse.data(),
                         want_pose_grad ? &*posed : nullptr, want_pose_grad ? &grad_pose : nullptr,
                         want_latent ? &grad_latent : nullptr);
    fine_pass.backward(ck.fine, lc.d_fine, dd_f, grad_fine.data(),
                       want_pose_grad ? &*posed : nullptr, want_pose_grad ? &grad_pose : nullptr,
                       want_latent ? &grad_latent : nullptr);

    if (st.update_field) {
      adam_step<float>(ck.coarse.values, grad_coarse, st.optimizer.coarse, config.lr_field,
                       "coarse field");
      adam_step<float>(ck.fine.values, grad_fine, st.optimizer.fine, config.lr_field,
                       "fine field");
    }
    if (st.update_poses) {
      grad_pose += lp.gradients[t];
      VecX theta = frame.pose_current.flatten();
      adam_step<double>(std::span<double>(theta.data(), static_cast<size_t>(theta.size())),
                        std::span<const double>(grad_pose.data(),
                                                static_cast<size_t>(grad_pose.size())),
                        st.optimizer.poses[t], config.lr_pose, "pose");
      frame.pose_current = PoseParams::unflatten(theta);
    }
    if (want_latent) {
      VecX& code = ck.latents[t];
      adam_step<double>(std::span<double>(code.data(), static_cast<size_t>(code.size())),
                        std::span<const double>(grad_latent.data(),
                                                static_cast<size_t>(grad_latent.size())),
                        st.optimizer.latents[t], config.lr_latent, "latent");
    }

    TrainLogRow row;
    row.iteration = ck.iteration + 1;
    row.frame = static_cast<int>(t);
    row.reconstruction = lc.value;
    row.pose = lp.value;
    row.background = ld.value;
    row.total = total;
    row.pose_error_deg = std::numeric_limits<double>::quiet_NaN();
    if (have_gt) {
      std::vector<PoseParams> now;
      for (const Frame& f : frames) {
        now.push_back(f.pose_current);
      }
      row.pose_error_deg = mean_joint_angle_error_deg(now, gt);
    }
    ++ck.iteration;
    log.push_back(row);
    if (options.on_iteration) {
      options.on_iteration(row);
    }
    if (st.update_field && !options.checkpoint_path.empty() && config.checkpoint_every > 0 &&
        it % config.checkpoint_every == 0 && it != iterations) {
      ck.poses.clear();
      for (const Frame& f : frames) {
        ck.poses.push_back(f.pose_current);
      }
      save_checkpoint(ck, options.checkpoint_path);
    }
  }
  return log;
}

}  // namespace

TrainResult train(const SkinnedBody& body, std::vector<Frame>& frames, const TrainConfig& config,
                  const TrainOptions& options) {
  config.validate();
  require(!frames.empty(), "training needs at least one frame");
  validate_body(body);
  std::vector<ShapeParams> shapes;
  Vec3 center = Vec3::Zero();
  for (Frame& f : frames) {
    f.validate();
    validate_pose(body, f.pose_init);
    validate_pose(body, f.pose_current);
    shapes.push_back(f.shape_init);
    center += f.pose_init.root_translation;
  }
  TrainResult result;
  Checkpoint& ck = result.checkpoint;
  const FieldArch arch = config.field_arch();
  const std::uint64_t field_seed = config.seed * 0x9e3779b97f4a7c15ULL;
  ck.coarse = init_field<float>(arch, field_seed + 1);
  ck.fine = init_field<float>(arch, field_seed + 2);
  ck.deformation = config.deformation;
  ck.deformation_config = config.deformation_config(body);
  ck.center = center / static_cast<double>(frames.size());
  ck.background = config.background;
  ck.shape = mean_shape(shapes);
  if (arch.latent_dim > 0) {
    Rng latent_rng(config.seed ^ 0x5bd1e995ULL);
    std::normal_distribution<double> normal(0.0, 0.01);
    for (size_t t = 0; t < frames.size(); ++t) {
      VecX code(arch.latent_dim);
      for (int i = 0; i < arch.latent_dim; ++i) {
        code[i] = normal(latent_rng);
      }
      ck.latents.push_back(code);
    }
  }
  LoopState st{&ck, OptimizerState(), true, config.refine_poses, true};
  result.log = run_loop(body, frames, config, st, config.iterations, options);
  for (const Frame& f : frames) {
    ck.poses.push_back(f.pose_current);
  }
  if (!options.checkpoint_path.empty()) {
    save_checkpoint(ck, options.checkpoint_path);
  }
  return result;
}

std::vector<PoseParams> refine_test_poses(const Checkpoint& checkpoint, const SkinnedBody& body,
                                          std::vector<Frame>& frames, const TrainConfig& config,
                                          int iterations, std::vector<TrainLogRow>* log) {
  config.validate();
  require(!frames.empty(), "pose refinement needs at least one frame");
  require(iterations >= 0, "iterations must be >= 0");
  for (Frame& f : frames) {
    f.validate();
    validate_pose(body, f.pose_current);
  }
  Checkpoint work = checkpoint;
  work.iteration = 0;
  const VecX latent = mean_latent(checkpoint);
  work.latents.assign(frames.size(), latent);
  LoopState st{&work, OptimizerState(), false, true, false};
  std::vector<TrainLogRow> rows = run_loop(body, frames, config, st, iterations, TrainOptions());
  if (log != nullptr) {
    *log = std::move(rows);
  }
  std::vector<PoseParams> out;
  for (const Frame& f : frames) {
    out.push_back(f.pose_current);
  }
  return out;
}

ImageRender render_pose(const Checkpoint& ck, const SkinnedBody& body, const PoseParams& pose,
                        const Camera& camera, const RenderSettings& settings, const VecX& latent) {
  const VecX code = latent.size() > 0 ? latent : mean_latent(ck);
  const NetworkField<float> coarse(ck.coarse, code);
  const NetworkField<float> fine(ck.fine, code);
  std::optional<PosedBody> posed;
  Eigen::AlignedBox3d bounds;
  if (ck.deformation) {
    posed.emplace(body, ck.shape, pose, ck.deformation_config);
    bounds = posed->bounds();
  } else {
    bounds = posed_bounds(body, ck.shape, pose);
  }
  Camera cam = camera;
  std::tie(cam.near, cam.far) = near_far_for_bounds(bounds, ck.deformation_config.mask_threshold);
  RenderSettings s = settings;
  s.background = ck.background;
  return render_image(coarse, fine, cam, {posed ? &*posed : nullptr, ck.center}, s);
}

}  // namespace anerf
