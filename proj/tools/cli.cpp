#include "cli.hpp"

#include "anerf/evalx.hpp"
#include "anerf/geometry.hpp"
#include "anerf/parallel.hpp"
#include "anerf/rotation.hpp"
#include "anerf/synth_data.hpp"
#include "anerf/text_util.hpp"
#include "anerf/trainer.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <optional>
#include <ostream>

namespace anerf::cli {

namespace fs = std::filesystem;

namespace {

std::string frame_name(int id) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%04d", id);
  return buf;
}

void require_output_dir(const fs::path& dir) {
  if (fs::exists(dir) && !fs::is_directory(dir)) {
    throw IoError("output path exists and is not a directory: " + dir.string());
  }
  fs::create_directories(dir);
}

void require_output_file(const fs::path& file) {
  if (fs::is_directory(file)) {
    throw IoError("output path is a directory: " + file.string());
  }
  if (file.has_parent_path()) {
    fs::create_directories(file.parent_path());
  }
}

struct CameraOverrides {
  int width = 0;
  int height = 0;
  double fov_deg = 0.0;

  void add(CLI::App* cmd) {
    cmd->add_option("--width", width, "Image width (default: dataset camera)")
        ->check(CLI::PositiveNumber);
    cmd->add_option("--height", height, "Image height (default: dataset camera)")
        ->check(CLI::PositiveNumber);
    cmd->add_option("--fov", fov_deg, "Vertical field of view in degrees")
        ->check(CLI::Range(1.0, 179.0));
  }

  Camera apply(const Camera& base) const {
    if (width == 0 && height == 0 && fov_deg == 0.0) {
      return base;
    }
    const int w = width > 0 ? width : base.width;
    const int h = height > 0 ? height : base.height;
    const double fov = fov_deg > 0.0
                           ? fov_deg
                           : 2.0 * std::atan(0.5 * base.height / base.fy) * 180.0 / std::numbers::pi;
    Camera c = make_camera(w, h, fov);
    c.near = base.near;
    c.far = base.far;
    return c;
  }
};

/// Turns the subject about its root joint, which equals orbiting the camera.
PoseParams with_yaw(PoseParams pose, double yaw_deg) {
  if (yaw_deg != 0.0) {
    const Mat3 turn = Eigen::AngleAxisd(yaw_deg * std::numbers::pi / 180.0, Vec3::UnitY())
                          .toRotationMatrix();
    pose.joint_rotations[0] = matrix_to_axis_angle(turn * axis_angle_to_matrix(pose.joint_rotations[0]));
  }
  return pose;
}

struct RenderRequest {
  fs::path checkpoint;
  fs::path data;
  fs::path out;
  fs::path config;
  CameraOverrides camera;
  double yaw_deg = 0.0;
};

void add_render_options(CLI::App* cmd, RenderRequest& r) {
  cmd->add_option("--checkpoint", r.checkpoint, "Checkpoint written by train")
      ->required()
      ->check(CLI::ExistingFile);
  cmd->add_option("--data", r.data, "Dataset directory (body and camera)")
      ->required()
      ->check(CLI::ExistingDirectory);
  cmd->add_option("--out", r.out, "Output directory for PNG renders")->required();
  cmd->add_option("--config", r.config, "Config file for sample counts")->check(CLI::ExistingFile);
  cmd->add_option("--yaw", r.yaw_deg, "Turn the subject about the vertical axis (degrees)");
  r.camera.add(cmd);
}

RenderSettings render_settings(const fs::path& config_path, std::optional<std::uint64_t> seed) {
  const TrainConfig c = config_path.empty() ? TrainConfig() : load_config(config_path);
  RenderSettings s;
  s.coarse_samples = c.coarse_samples;
  s.fine_samples = c.fine_samples;
  s.seed = seed.value_or(c.seed);
  return s;
}

/// Writes name.png (8-bit color), name_density.png and name_depth.png
/// (16-bit) and returns the sidecar record.
nlohmann::json write_render(const ImageRender& r, const Camera& camera, const fs::path& dir,
                            const std::string& name) {
  write_png8(r.color, dir / (name + ".png"));
  write_png16(r.density, dir / (name + "_density.png"));
  const double depth_scale = camera.far > 0.0 ? camera.far : 1.0;
  write_png16(r.depth, dir / (name + "_depth.png"), depth_scale);
  return {{"name", name}, {"density_scale", 1.0}, {"depth_scale", depth_scale}};
}

void write_sidecar(const nlohmann::json& frames, const fs::path& dir) {
  std::ofstream out(dir / "renders.json");
  out << nlohmann::json{{"frames", frames}}.dump(2) << '\n';
  if (!out) {
    throw IoError("cannot write " + (dir / "renders.json").string());
  }
}

std::vector<int> select_ids(const std::vector<int>& available, const std::vector<int>& wanted) {
  if (wanted.empty()) {
    return available;
  }
  for (int id : wanted) {
    if (std::find(available.begin(), available.end(), id) == available.end()) {
      throw InvalidInputError("frame " + std::to_string(id) + " is not in the selected split");
    }
  }
  return wanted;
}

int run_synth(const std::string& spec_name, const fs::path& out_dir, const std::string& canonical,
              std::optional<std::uint64_t> seed, double noise_deg, double translation_std,
              int mesh_resolution, bool gt_mesh, std::ostream& out) {
  SceneSpec spec = scene_preset(spec_name);
  if (seed) {
    spec.seed = *seed;
  }
  const PosePreset preset = parse_pose_preset(canonical);
  require_output_dir(out_dir);
  const Scene scene(spec, preset);
  render_dataset(scene, out_dir);
  if (noise_deg > 0.0 || translation_std > 0.0) {
    write_noisy_init(out_dir, noise_deg, translation_std, spec.seed);
  }
  out << "wrote dataset " << out_dir.string() << '\n';
  if (gt_mesh) {
    Eigen::AlignedBox3d box;
    for (const Capsule& c : scene.canonical_capsules()) {
      box.extend(c.start - Vec3::Constant(c.radius));
      box.extend(c.start + Vec3::Constant(c.radius));
      box.extend(c.end - Vec3::Constant(c.radius));
      box.extend(c.end + Vec3::Constant(c.radius));
    }
    const GridSpec grid = grid_around(box, 4.0 * spec.shell_thickness + 0.02, mesh_resolution, 0.0);
    std::vector<double> values(grid.sample_count());
    const int nx = grid.resolution.x();
    const int ny = grid.resolution.y();
    parallel_for(0, grid.resolution.z(), [&](int k) {
      for (int j = 0; j < ny; ++j) {
        for (int i = 0; i < nx; ++i) {
          values[(static_cast<size_t>(k) * ny + j) * nx + i] =
              spec.shell_thickness - scene.signed_distance(grid.point(i, j, k));
        }
      }
    });
    const Mesh mesh = marching_cubes(values, grid);
    write_obj(mesh, out_dir / "gt_mesh.obj");
    out << "wrote " << (out_dir / "gt_mesh.obj").string() << " (" << mesh.faces.size()
        << " faces)\n";
  }
  return kOk;
}

int run_train(const fs::path& data, const fs::path& out_dir, const fs::path& config_path,
              const std::vector<std::string>& sets, std::optional<std::uint64_t> seed,
              int progress_every, std::ostream& out) {
  TrainConfig config = config_path.empty() ? TrainConfig() : load_config(config_path);
  for (const std::string& kv : sets) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) {
      throw InvalidInputError("--set expects key=value, got '" + kv + "'");
    }
    set_config_value(config, trim(kv.substr(0, eq)), trim(kv.substr(eq + 1)));
  }
  if (seed) {
    config.seed = *seed;
  }
  config.validate();
  Dataset ds = load_dataset(data);
  require_output_dir(out_dir);
  {
    std::ofstream cfg(out_dir / "config.txt");
    cfg << config_to_text(config);
  }
  TrainOptions options;
  options.checkpoint_path = out_dir / "checkpoint.bin";
  options.on_iteration = [&](const TrainLogRow& row) {
    if (progress_every > 0 && row.iteration % progress_every == 0) {
      out << "iteration " << row.iteration << " loss " << format_double(row.total) << '\n';
    }
  };
  const TrainResult result = train(ds.body, ds.train, config, options);
  write_log_csv(result.log, out_dir / "train_log.csv");
  save_pose_file(result.checkpoint.poses, out_dir / "poses.json");
  out << "wrote " << options.checkpoint_path.string() << '\n';
  return kOk;
}

int run_render_view(const RenderRequest& r, const std::string& split,
                    const std::vector<int>& frame_ids, std::optional<std::uint64_t> seed,
                    std::ostream& out) {
  const Checkpoint ck = load_checkpoint(r.checkpoint);
  const Dataset ds = load_dataset(r.data);
  const RenderSettings settings = render_settings(r.config, seed);
  const bool train_split = split == "train";
  const std::vector<int>& ids = train_split ? ds.train_ids : ds.test_ids;
  const std::vector<Frame>& frames = train_split ? ds.train : ds.test;
  if (train_split && ck.poses.size() != frames.size()) {
    throw InvalidInputError("checkpoint holds " + std::to_string(ck.poses.size()) +
                            " poses but the dataset has " + std::to_string(frames.size()) +
                            " training frames");
  }
  const std::vector<int> selected = select_ids(ids, frame_ids);
  require_output_dir(r.out);
  nlohmann::json sidecar = nlohmann::json::array();
  for (int id : selected) {
    const size_t i = static_cast<size_t>(std::find(ids.begin(), ids.end(), id) - ids.begin());
    const PoseParams pose = with_yaw(train_split ? ck.poses[i] : frames[i].pose_init, r.yaw_deg);
    const VecX latent = train_split && i < ck.latents.size() ? ck.latents[i] : VecX();
    const Camera camera = r.camera.apply(frames[i].camera);
    const ImageRender img = render_pose(ck, ds.body, pose, camera, settings, latent);
    sidecar.push_back(write_render(img, camera, r.out, frame_name(id)));
  }
  write_sidecar(sidecar, r.out);
  out << "rendered " << selected.size() << " frames to " << r.out.string() << '\n';
  return kOk;
}

int run_animate(const RenderRequest& r, const fs::path& pose_path,
                std::optional<std::uint64_t> seed, std::ostream& out) {
  const Checkpoint ck = load_checkpoint(r.checkpoint);
  const Dataset ds = load_dataset(r.data);
  const std::vector<PoseParams> poses = load_pose_file(pose_path);
  const RenderSettings settings = render_settings(r.config, seed);
  for (size_t t = 0; t < poses.size(); ++t) {
    if (poses[t].joint_count() != ds.body.joint_count()) {
      throw InvalidInputError("pose " + std::to_string(t) + " has " +
                              std::to_string(poses[t].joint_count()) + " joints, the body has " +
                              std::to_string(ds.body.joint_count()));
    }
  }
  require_output_dir(r.out);
  const Camera camera = r.camera.apply(ds.camera);
  nlohmann::json sidecar = nlohmann::json::array();
  for (size_t t = 0; t < poses.size(); ++t) {
    const ImageRender img =
        render_pose(ck, ds.body, with_yaw(poses[t], r.yaw_deg), camera, settings);
    sidecar.push_back(write_render(img, camera, r.out, frame_name(static_cast<int>(t))));
  }
  write_sidecar(sidecar, r.out);
  out << "rendered " << poses.size() << " poses to " << r.out.string() << '\n';
  return kOk;
}

int run_extract_mesh(const fs::path& checkpoint, const fs::path& data, const fs::path& out_file,
                     int resolution, double iso, bool use_mask, std::ostream& out) {
  const Checkpoint ck = load_checkpoint(checkpoint);
  const Dataset ds = load_dataset(data);
  require_output_file(out_file);
  const PosedBody canonical(ds.body, ck.shape, ck.deformation_config.canonical_pose,
                            ck.deformation_config);
  const GridSpec grid =
      grid_around(canonical.bounds(), ck.deformation_config.mask_threshold, resolution, iso);
  const NetworkField<float> field(ck.fine, mean_latent(ck));
  const bool masked = use_mask && ck.deformation;
  const Mesh mesh = extract_mesh(field, grid, masked ? &canonical : nullptr);
  write_obj(mesh, out_file);
  out << "wrote " << out_file.string() << " (" << mesh.vertices.size() << " vertices, "
      << mesh.faces.size() << " faces)\n";
  return kOk;
}

int run_evaluate(const fs::path& data, const fs::path& renders, const std::string& split,
                 const fs::path& out_dir, const fs::path& mesh_path, const fs::path& gt_path,
                 const std::string& align, int samples, std::optional<std::uint64_t> seed,
                 std::ostream& out) {
  if (mesh_path.empty() != gt_path.empty()) {
    throw InvalidInputError("--mesh and --gt-mesh must be given together");
  }
  require_output_dir(out_dir);
  if (!renders.empty()) {
    const Dataset ds = load_dataset(data);
    const bool train_split = split == "train";
    const std::vector<int>& ids = train_split ? ds.train_ids : ds.test_ids;
    const std::vector<Frame>& frames = train_split ? ds.train : ds.test;
    std::vector<Image> rendered;
    std::vector<Image> truth;
    std::vector<std::string> names;
    for (size_t i = 0; i < ids.size(); ++i) {
      const fs::path file = renders / (frame_name(ids[i]) + ".png");
      if (!fs::exists(file)) {
        throw IoError("missing render " + file.string());
      }
      rendered.push_back(read_png(file));
      truth.push_back(frames[i].image);
      names.push_back(frame_name(ids[i]));
    }
    const MetricReport report = evaluate_frames(rendered, truth, names);
    report.write_csv(out_dir / "metrics.csv");
    out << "psnr " << format_double(report.mean_psnr()) << " ssim "
        << format_double(report.mean_ssim()) << '\n';
  }
  if (!mesh_path.empty()) {
    Mesh mesh = read_obj(mesh_path);
    const Mesh gt = read_obj(gt_path);
    const std::uint64_t s = seed.value_or(0);
    if (align == "icp") {
      mesh = align_iterative(sample_surface(mesh, samples, s), sample_surface(gt, samples, s + 1))
                 .apply(mesh);
    }
    const double p2s = p2s_cm(mesh, gt, samples, s);
    const double chamfer = chamfer_cm(mesh, gt, samples, s);
    std::ofstream csv(out_dir / "geometry.csv");
    csv << "mesh,gt_mesh,alignment,chamfer_cm,p2s_cm\n"
        << mesh_path.string() << ',' << gt_path.string() << ',' << align << ','
        << format_double(chamfer) << ',' << format_double(p2s) << '\n';
    if (!csv) {
      throw IoError("cannot write " + (out_dir / "geometry.csv").string());
    }
    out << "chamfer_cm " << format_double(chamfer) << " p2s_cm " << format_double(p2s) << '\n';
  }
  if (renders.empty() && mesh_path.empty()) {
    throw InvalidInputError("evaluate needs --renders or --mesh with --gt-mesh");
  }
  return kOk;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Animatable radiance fields of a skinned body"};
  app.name("anerf");
  app.require_subcommand(1, 1);
  int threads = 0;
  app.add_option("--threads", threads, "Worker threads (default: ANERF_THREADS or all cores)")
      ->check(CLI::PositiveNumber);

  std::optional<std::uint64_t> seed;
  auto add_seed = [&](CLI::App* cmd) { cmd->add_option("--seed", seed, "Root random seed"); };

  auto* synth = app.add_subcommand("synth", "Render a synthetic dataset");
  std::string spec_name = "default";
  fs::path synth_out;
  std::string canonical = "A";
  double noise_deg = 0.0;
  double translation_std = 0.0;
  int mesh_resolution = 128;
  bool no_gt_mesh = false;
  synth->add_option("--spec", spec_name, "Scene preset: default or tiny")->capture_default_str();
  synth->add_option("--out", synth_out, "Dataset directory")->required();
  synth->add_option("--canonical", canonical, "Canonical pose of the scene: A, T or X")
      ->capture_default_str();
  synth->add_option("--noise-deg", noise_deg, "Initial-pose joint noise (degrees)")
      ->check(CLI::NonNegativeNumber);
  synth->add_option("--translation-std", translation_std, "Initial-pose lateral translation noise")
      ->check(CLI::NonNegativeNumber);
  synth->add_option("--mesh-resolution", mesh_resolution, "Grid size for gt_mesh.obj")
      ->check(CLI::Range(8, 1024))
      ->capture_default_str();
  synth->add_flag("--no-gt-mesh", no_gt_mesh, "Skip writing gt_mesh.obj");
  add_seed(synth);

  auto* train_cmd = app.add_subcommand("train", "Fit the fields and poses to a dataset");
  fs::path train_data;
  fs::path train_out;
  fs::path train_config;
  std::vector<std::string> sets;
  int progress_every = 1000;
  train_cmd->add_option("--data", train_data, "Dataset directory")
      ->required()
      ->check(CLI::ExistingDirectory);
  train_cmd->add_option("--out", train_out, "Run directory")->required();
  train_cmd->add_option("--config", train_config, "Config file of key = value lines")
      ->check(CLI::ExistingFile);
  train_cmd->add_option("--set", sets, "Override one config key (key=value), repeatable");
  train_cmd->add_option("--progress", progress_every, "Print the loss every N iterations (0: off)")
      ->check(CLI::NonNegativeNumber);
  add_seed(train_cmd);

  auto* view = app.add_subcommand("render-view", "Render dataset views through a checkpoint");
  RenderRequest view_req;
  std::string split = "test";
  std::vector<int> frame_ids;
  add_render_options(view, view_req);
  view->add_option("--split", split, "test: held-out frames at their poses; train: refined poses")
      ->check(CLI::IsMember({"test", "train"}))
      ->capture_default_str();
  view->add_option("--frames", frame_ids, "Frame ids to render (default: the whole split)");
  add_seed(view);

  auto* animate = app.add_subcommand("animate", "Render a pose sequence through a checkpoint");
  RenderRequest anim_req;
  fs::path pose_path;
  add_render_options(animate, anim_req);
  animate->add_option("--poses", pose_path, "Pose file ({\"poses\": [...]}, or a manifest)")
      ->required()
      ->check(CLI::ExistingFile);
  add_seed(animate);

  auto* mesh_cmd = app.add_subcommand("extract-mesh", "Extract the canonical surface as OBJ");
  fs::path mesh_ck;
  fs::path mesh_data;
  fs::path mesh_out;
  int resolution = 128;
  double iso = 10.0;
  bool no_mask = false;
  mesh_cmd->add_option("--checkpoint", mesh_ck, "Checkpoint written by train")
      ->required()
      ->check(CLI::ExistingFile);
  mesh_cmd->add_option("--data", mesh_data, "Dataset directory (body)")
      ->required()
      ->check(CLI::ExistingDirectory);
  mesh_cmd->add_option("--out", mesh_out, "OBJ file")->required();
  mesh_cmd->add_option("--resolution", resolution, "Samples along the longest grid axis")
      ->check(CLI::Range(8, 1024))
      ->capture_default_str();
  mesh_cmd->add_option("--iso", iso, "Density iso level")->capture_default_str();
  mesh_cmd->add_flag("--no-mask", no_mask, "Keep density outside the canonical body mask");

  auto* eval = app.add_subcommand("evaluate", "Score renders and meshes against ground truth");
  fs::path eval_data;
  fs::path eval_renders;
  fs::path eval_out;
  std::string eval_split = "test";
  fs::path eval_mesh;
  fs::path eval_gt;
  std::string align = "none";
  int samples = 10000;
  eval->add_option("--data", eval_data, "Dataset directory")->check(CLI::ExistingDirectory);
  eval->add_option("--renders", eval_renders, "Directory of NNNN.png renders")
      ->check(CLI::ExistingDirectory);
  eval->add_option("--split", eval_split, "Split the renders belong to")
      ->check(CLI::IsMember({"test", "train"}))
      ->capture_default_str();
  eval->add_option("--out", eval_out, "Directory for metrics.csv and geometry.csv")->required();
  eval->add_option("--mesh", eval_mesh, "Reconstructed OBJ")->check(CLI::ExistingFile);
  eval->add_option("--gt-mesh", eval_gt, "Ground-truth OBJ")->check(CLI::ExistingFile);
  eval->add_option("--align", align, "Mesh alignment before scoring: none or icp")
      ->check(CLI::IsMember({"none", "icp"}))
      ->capture_default_str();
  eval->add_option("--samples", samples, "Surface samples per mesh")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  add_seed(eval);

  auto* show = app.add_subcommand("show-config", "Print every training setting");
  fs::path show_config;
  show->add_option("--config", show_config, "Config file applied over the defaults")
      ->check(CLI::ExistingFile);

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err);
  }

  try {
    if (threads > 0) {
      set_thread_count(threads);
    }
    if (*synth) {
      return run_synth(spec_name, synth_out, canonical, seed, noise_deg, translation_std,
                       mesh_resolution, !no_gt_mesh, out);
    }
    if (*train_cmd) {
      return run_train(train_data, train_out, train_config, sets, seed, progress_every, out);
    }
    if (*view) {
      return run_render_view(view_req, split, frame_ids, seed, out);
    }
    if (*animate) {
      return run_animate(anim_req, pose_path, seed, out);
    }
    if (*mesh_cmd) {
      return run_extract_mesh(mesh_ck, mesh_data, mesh_out, resolution, iso, !no_mask, out);
    }
    if (*eval) {
      if (!eval_renders.empty() && eval_data.empty()) {
        throw InvalidInputError("--renders needs --data");
      }
      return run_evaluate(eval_data, eval_renders, eval_split, eval_out, eval_mesh, eval_gt, align,
                          samples, seed, out);
    }
    if (*show) {
      out << config_to_text(show_config.empty() ? TrainConfig() : load_config(show_config));
      return kOk;
    }
  } catch (const VersionError& e) {
    err << "error: incompatible version: " << e.what() << '\n';
    return kVersionMismatch;
  } catch (const ParseError& e) {
    err << "error: parse failure: " << e.what() << '\n';
    return kParseFailure;
  } catch (const IoError& e) {
    err << "error: i/o failure: " << e.what() << '\n';
    return kIoFailure;
  } catch (const InvalidInputError& e) {
    err << "error: invalid input: " << e.what() << '\n';
    return kInvalidInput;
  } catch (const NumericalError& e) {
    err << "error: numerical failure: " << e.what() << '\n';
    return kNumericalFailure;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kFailure;
  }
  return kFailure;
}

}  // namespace anerf::cli
