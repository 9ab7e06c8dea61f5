#include "anerf/synth_data.hpp"

#include "anerf/parallel.hpp"
#include "anerf/text_util.hpp"

#include "json.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numbers>
#include <random>

namespace anerf {

using json = nlohmann::json;

void SceneSpec::validate() const {
  require(frame_count >= 1, "scene needs at least one frame");
  require(train_turns >= 1 && test_turns >= 0, "scene needs >= 1 training turn");
  require(frame_count % (train_turns + test_turns) == 0,
          "frame_count must be a multiple of the number of turns");
  require(shell_thickness > 0.0, "shell_thickness must be > 0");
  require(edge_width > 0.0, "edge_width must be > 0");
  require(interior_density > 0.0, "interior_density must be > 0");
  require(texture_wavelength > 0.0, "texture_wavelength must be > 0");
  require(texture_contrast >= 0.0 && texture_contrast <= 0.5, "texture_contrast must be in [0, 0.5]");
  require(width >= 1 && height >= 1, "image size must be positive");
  require(camera_distance > 0.0, "camera_distance must be > 0");
  require(articulation_deg >= 0.0, "articulation_deg must be >= 0");
  require(coarse_samples >= 1 && fine_samples >= 0, "sample counts must be positive");
}

SceneSpec scene_preset(const std::string& name) {
  SceneSpec spec;
  if (name == "default") {
    return spec;
  }
  if (name == "tiny") {
    spec.width = 16;
    spec.height = 16;
    spec.frame_count = 6;
    spec.body.vertices_per_segment = 60;
    return spec;
  }
  throw InvalidInputError("unknown scene preset '" + name + "' (expected default or tiny)");
}

namespace {

double segment_distance(const Vec3& p, const Vec3& a, const Vec3& b) {
  const Vec3 ab = b - a;
  const double t = std::clamp((p - a).dot(ab) / ab.squaredNorm(), 0.0, 1.0);
  return (p - (a + t * ab)).norm();
}

Vec3 affine_apply(const Mat4& m, const Vec3& x) {
  return m.topLeftCorner<3, 3>() * x + m.block<3, 1>(0, 3);
}

/// Evaluates the scene's ground-truth field over point batches.
class SceneField : public FieldEvaluator {
 public:
  explicit SceneField(const Scene& scene) : scene_(scene) {}
  void evaluate(const Eigen::Matrix3Xd& canonical, const Eigen::Matrix3Xd&,
                Eigen::Matrix3Xd& color, VecX& sigma) const override {
    const Eigen::Index n = canonical.cols();
    color.resize(3, n);
    sigma.resize(n);
    parallel_for(0, static_cast<int>(n), [&](int i) {
      const FieldOutput out = scene_.eval(canonical.col(i));
      color.col(i) = out.color;
      sigma[i] = out.density;
    });
  }

 private:
  const Scene& scene_;
};

std::vector<Capsule> posed_capsules(const SceneSpec& spec, const SkinnedBody& body,
                                        const PoseParams& canonical) {
  const std::vector<Mat4> skin = skinning_transforms(body, canonical);
  std::vector<Capsule> caps = toy_body_capsules(spec.body);
  for (Capsule& c : caps) {
    c.start = affine_apply(skin[c.joint], c.start);
    c.end = affine_apply(skin[c.joint], c.end);
  }
  return caps;
}

}  // namespace

Scene::Scene(const SceneSpec& spec, PosePreset canonical) : spec_(spec), canonical_(canonical) {
  spec_.validate();
  body_ = make_toy_body(spec_.body, spec_.seed);
  config_ = make_deformation_config(body_, canonical);
  std::mt19937_64 rng(spec_.seed ^ 0xc0105eedULL);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (int c = 0; c < 3; ++c) {
    wave_dirs_[c] = Vec3(normal(rng), normal(rng), normal(rng)).normalized();
    wave_phase_[c] = 2.0 * std::numbers::pi * unit(rng);
  }
  capsules_ = posed_capsules(spec_, body_, config_.canonical_pose);
  field_ = std::make_unique<SceneField>(*this);
}

double Scene::signed_distance(const Vec3& x0) const {
  double best = std::numeric_limits<double>::infinity();
  for (const Capsule& c : capsules_) {
    best = std::min(best, segment_distance(x0, c.start, c.end) - c.radius);
  }
  return best;
}

FieldOutput Scene::eval(const Vec3& x0) const {
  FieldOutput out;
  for (int c = 0; c < 3; ++c) {
    const double phase =
        2.0 * std::numbers::pi * wave_dirs_[c].dot(x0) / spec_.texture_wavelength + wave_phase_[c];
    out.color[c] = 0.5 + spec_.texture_contrast * std::sin(phase);
  }
  const double z = (spec_.shell_thickness - signed_distance(x0)) / spec_.edge_width;
  out.density = z < -30.0 ? 0.0 : spec_.interior_density / (1.0 + std::exp(-z));
  return out;
}

Camera Scene::camera() const {
  return make_camera(spec_.width, spec_.height, spec_.fov_y_deg);
}

double Scene::turntable_angle(int k, int frames_per_circle, double phase) {
  return 2.0 * std::numbers::pi * k / frames_per_circle + phase;
}

namespace {

PoseParams placed(const SkinnedBody& body, const PoseParams& hold, double angle,
                  double distance) {
  PoseParams p = hold;
  double lo = std::numeric_limits<double>::infinity();
  double hi = -lo;
  for (const Vec3& v : body.rest_vertices) {
    lo = std::min(lo, v.y());
    hi = std::max(hi, v.y());
  }
  p.joint_rotations[0] = Vec3(0.0, angle, 0.0);
  p.root_translation = Vec3(0.0, -0.5 * (lo + hi), -distance);
  return p;
}

}  // namespace

std::vector<PoseParams> Scene::trajectory() const {
  const int turns = spec_.train_turns + spec_.test_turns;
  const int per_circle = spec_.frame_count / turns;
  const PoseParams hold = preset_pose(body_, spec_.hold_pose);
  std::mt19937_64 rng(spec_.seed ^ 0xa271c0deULL);
  std::normal_distribution<double> normal(0.0, spec_.articulation_deg * std::numbers::pi / 180.0);
  std::vector<PoseParams> poses;
  for (int c = 0; c < turns; ++c) {
    const bool train = c < spec_.train_turns;
    const double step = 2.0 * std::numbers::pi / per_circle;
    const double phase = train ? step * c / spec_.train_turns
                               : step * (2 * (c - spec_.train_turns) + 1) /
                                     (2.0 * spec_.train_turns * spec_.test_turns);
    for (int i = 0; i < per_circle; ++i) {
      PoseParams p = placed(body_, hold, turntable_angle(i, per_circle, phase),
                            spec_.camera_distance);
      if (spec_.articulation_deg > 0.0) {
        for (size_t j = 1; j < p.joint_rotations.size(); ++j) {
          p.joint_rotations[j] += Vec3(normal(rng), normal(rng), normal(rng));
        }
      }
      poses.push_back(p);
    }
  }
  return poses;
}

std::vector<bool> Scene::training_split() const {
  const int turns = spec_.train_turns + spec_.test_turns;
  const int train = spec_.frame_count / turns * spec_.train_turns;
  std::vector<bool> out(static_cast<size_t>(spec_.frame_count), false);
  std::fill(out.begin(), out.begin() + train, true);
  return out;
}

std::vector<PoseParams> Scene::articulated_trajectory(int count, double amplitude_deg,
                                                      std::uint64_t seed) const {
  require(count >= 1, "trajectory needs at least one pose");
  const PoseParams hold = preset_pose(body_, spec_.hold_pose);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, amplitude_deg * std::numbers::pi / 180.0);
  const double phase = std::numbers::pi / count / 2.0;
  std::vector<PoseParams> poses;
  for (int i = 0; i < count; ++i) {
    PoseParams p = placed(body_, hold, turntable_angle(i, count, phase), spec_.camera_distance);
    for (size_t j = 1; j < p.joint_rotations.size(); ++j) {
      p.joint_rotations[j] += Vec3(normal(rng), normal(rng), normal(rng));
    }
    poses.push_back(p);
  }
  return poses;
}

ImageRender Scene::render(const PoseParams& pose) const {
  const PosedBody posed(body_, ShapeParams::zero(static_cast<int>(body_.shape_basis.size())), pose,
                        config_);
  Camera cam = camera();
  std::tie(cam.near, cam.far) = near_far_for_bounds(posed.bounds(), config_.mask_threshold);
  RenderSettings settings;
  settings.coarse_samples = spec_.coarse_samples;
  settings.fine_samples = spec_.fine_samples;
  settings.jitter = false;
  return render_image(*field_, *field_, cam, {&posed, Vec3::Zero()}, settings);
}

std::vector<PoseParams> perturb_poses(const std::vector<PoseParams>& poses, double noise_deg,
                                      double translation_std, std::uint64_t seed) {
  require(noise_deg >= 0.0 && translation_std >= 0.0, "noise levels must be >= 0");
  if (noise_deg == 0.0 && translation_std == 0.0) {
    return poses;
  }
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  const double sigma = noise_deg * std::numbers::pi / 180.0;
  std::vector<PoseParams> out = poses;
  for (PoseParams& p : out) {
    for (Vec3& r : p.joint_rotations) {
      r += sigma * Vec3(normal(rng), normal(rng), normal(rng));
    }
    p.root_translation +=
        translation_std * Vec3(normal(rng), normal(rng), 2.0 * normal(rng));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Files
// ---------------------------------------------------------------------------

namespace {

json pose_to_json(const PoseParams& p) {
  json rot = json::array();
  for (const Vec3& r : p.joint_rotations) {
    rot.push_back({r.x(), r.y(), r.z()});
  }
  return {{"root_translation", {p.root_translation.x(), p.root_translation.y(),
                                p.root_translation.z()}},
          {"joint_rotations", rot}};
}

Vec3 vec3_from_json(const json& j, const std::string& what) {
  if (!j.is_array() || j.size() != 3) {
    throw ParseError(what + ": expected an array of 3 numbers");
  }
  return Vec3(j[0].get<double>(), j[1].get<double>(), j[2].get<double>());
}

PoseParams pose_from_json(const json& j, const std::string& what) {
  if (!j.is_object() || !j.contains("root_translation") || !j.contains("joint_rotations")) {
    throw ParseError(what + ": pose needs root_translation and joint_rotations");
  }
  PoseParams p;
  p.root_translation = vec3_from_json(j["root_translation"], what + ".root_translation");
  for (const json& r : j["joint_rotations"]) {
    p.joint_rotations.push_back(vec3_from_json(r, what + ".joint_rotations"));
  }
  return p;
}

json read_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) {
    throw IoError("cannot open " + path.string());
  }
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
}

void write_json(const json& j, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) {
    throw IoError("cannot write " + path.string());
  }
  out << j.dump(1) << '\n';
}

std::string frame_name(int i) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "%04d.png", i);
  return buf;
}

json spec_to_json(const SceneSpec& s) {
  return {{"frame_count", s.frame_count},
          {"train_turns", s.train_turns},
          {"test_turns", s.test_turns},
          {"width", s.width},
          {"height", s.height},
          {"fov_y_deg", s.fov_y_deg},
          {"camera_distance", s.camera_distance},
          {"hold_pose", to_string(s.hold_pose)},
          {"articulation_deg", s.articulation_deg},
          {"texture_wavelength", s.texture_wavelength},
          {"texture_contrast", s.texture_contrast},
          {"shell_thickness", s.shell_thickness},
          {"edge_width", s.edge_width},
          {"interior_density", s.interior_density},
          {"vertices_per_segment", s.body.vertices_per_segment},
          {"seed", s.seed}};
}

}  // namespace

void render_dataset(const Scene& scene, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir / "frames");
  fs::create_directories(dir / "masks");
  const std::vector<PoseParams> poses = scene.trajectory();
  const std::vector<bool> split = scene.training_split();
  for (size_t i = 0; i < poses.size(); ++i) {
    const ImageRender r = scene.render(poses[i]);
    Image mask(r.density.width, r.density.height, 1);
    for (size_t p = 0; p < mask.pixels.size(); ++p) {
      mask.pixels[p] = r.density.pixels[p] > 0.5f ? 1.0f : 0.0f;
    }
    write_png16(r.color, dir / "frames" / frame_name(static_cast<int>(i)));
    write_png8(mask, dir / "masks" / frame_name(static_cast<int>(i)));
  }
  save_body(scene.body(), dir / "body.txt");
  const Camera cam = scene.camera();
  json frames = json::array();
  json gt = json::array();
  for (size_t i = 0; i < poses.size(); ++i) {
    frames.push_back({{"image", "frames/" + frame_name(static_cast<int>(i))},
                      {"mask", "masks/" + frame_name(static_cast<int>(i))},
                      {"split", split[i] ? "train" : "test"}});
    gt.push_back(pose_to_json(poses[i]));
  }
  const json manifest = {
      {"version", 1},
      {"body", "body.txt"},
      {"camera",
       {{"fx", cam.fx}, {"fy", cam.fy}, {"cx", cam.cx}, {"cy", cam.cy},
        {"width", cam.width}, {"height", cam.height}}},
      {"shape", std::vector<double>(scene.body().shape_basis.size(), 0.0)},
      {"canonical", to_string(scene.canonical_preset())},
      {"frames", frames},
      {"poses", gt},
      {"init_poses", gt},
      {"spec", spec_to_json(scene.spec())}};
  write_json(manifest, dir / "manifest.json");
}

Dataset load_dataset(const std::filesystem::path& dir) {
  const json m = read_json(dir / "manifest.json");
  try {
    if (m.value("version", 0) != 1) {
      throw VersionError("dataset manifest version " + std::to_string(m.value("version", 0)) +
                         " is not supported");
    }
    Dataset ds;
    ds.body = load_body(dir / m.at("body").get<std::string>());
    const json& c = m.at("camera");
    ds.camera.fx = c.at("fx").get<double>();
    ds.camera.fy = c.at("fy").get<double>();
    ds.camera.cx = c.at("cx").get<double>();
    ds.camera.cy = c.at("cy").get<double>();
    ds.camera.width = c.at("width").get<int>();
    ds.camera.height = c.at("height").get<int>();
    ds.camera.validate();
    VecX shape(static_cast<Eigen::Index>(m.at("shape").size()));
    for (size_t i = 0; i < m.at("shape").size(); ++i) {
      shape[static_cast<Eigen::Index>(i)] = m.at("shape")[i].get<double>();
    }
    if (shape.size() != static_cast<Eigen::Index>(ds.body.shape_basis.size())) {
      throw ParseError("manifest shape length does not match the body");
    }
    const json& frames = m.at("frames");
    const json& gt = m.at("poses");
    const json& init = m.at("init_poses");
    if (gt.size() != frames.size() || init.size() != frames.size()) {
      throw ParseError("manifest pose lists must have one entry per frame");
    }
    for (size_t i = 0; i < frames.size(); ++i) {
      const json& f = frames[i];
      Frame frame;
      frame.image = read_png(dir / f.at("image").get<std::string>());
      if (frame.image.channels != 3) {
        throw ParseError("frame " + std::to_string(i) + " is not RGB");
      }
      const Image mask = read_png(dir / f.at("mask").get<std::string>());
      frame.mask = Image(mask.width, mask.height, 1);
      for (int r = 0; r < mask.height; ++r) {
        for (int col = 0; col < mask.width; ++col) {
          frame.mask.at(r, col) = mask.at(r, col, 0) > 0.5f ? 1.0f : 0.0f;
        }
      }
      frame.camera = ds.camera;
      const std::string where = "manifest frame " + std::to_string(i);
      frame.pose_gt = pose_from_json(gt[i], where);
      frame.pose_init = pose_from_json(init[i], where);
      frame.pose_current = frame.pose_init;
      frame.shape_init = ShapeParams{shape};
      validate_pose(ds.body, frame.pose_init);
      frame.validate();
      const std::string split = f.at("split").get<std::string>();
      if (split == "train") {
        ds.train.push_back(std::move(frame));
        ds.train_ids.push_back(static_cast<int>(i));
      } else if (split == "test") {
        ds.test.push_back(std::move(frame));
        ds.test_ids.push_back(static_cast<int>(i));
      } else {
        throw ParseError(where + ": split must be train or test");
      }
    }
    return ds;
  } catch (const json::exception& e) {
    throw ParseError((dir / "manifest.json").string() + ": " + e.what());
  }
}

void write_noisy_init(const std::filesystem::path& dir, double noise_deg, double translation_std,
                      std::uint64_t seed) {
  json m = read_json(dir / "manifest.json");
  std::vector<PoseParams> gt;
  for (const json& p : m.at("poses")) {
    gt.push_back(pose_from_json(p, "manifest pose"));
  }
  json init = json::array();
  for (const PoseParams& p : perturb_poses(gt, noise_deg, translation_std, seed)) {
    init.push_back(pose_to_json(p));
  }
  m["init_poses"] = init;
  m["init_noise"] = {{"noise_deg", noise_deg}, {"translation_std", translation_std},
                     {"seed", seed}};
  write_json(m, dir / "manifest.json");
}

std::vector<PoseParams> load_pose_file(const std::filesystem::path& path) {
  const json j = read_json(path);
  if (!j.is_object() || !j.contains("poses") || !j["poses"].is_array()) {
    throw ParseError(path.string() + ": expected an object with a \"poses\" array");
  }
  std::vector<PoseParams> poses;
  try {
    for (size_t i = 0; i < j["poses"].size(); ++i) {
      poses.push_back(pose_from_json(j["poses"][i], path.string() + " pose " + std::to_string(i)));
    }
  } catch (const json::exception& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
  if (poses.empty()) {
    throw ParseError(path.string() + ": pose list is empty");
  }
  return poses;
}

void save_pose_file(const std::vector<PoseParams>& poses, const std::filesystem::path& path) {
  json arr = json::array();
  for (const PoseParams& p : poses) {
    arr.push_back(pose_to_json(p));
  }
  if (path.has_parent_path()) {
    std::filesystem::create_directories(path.parent_path());
  }
  write_json({{"poses", arr}}, path);
}

}  // namespace anerf
