#include "anerf/synth_data.hpp"
#include "anerf/trainer.hpp"

#include "test_helpers.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>

using namespace anerf;
using testing_util::temp_path;

namespace {

Eigen::Matrix3Xd random_colors(int n, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Eigen::Matrix3Xd m(3, n);
  for (int i = 0; i < n; ++i) {
    m.col(i) = Vec3(u(rng), u(rng), u(rng));
  }
  return m;
}

VecX random_vec(int n, std::mt19937_64& rng, double lo = 0.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  VecX v(n);
  for (int i = 0; i < n; ++i) {
    v[i] = u(rng);
  }
  return v;
}

TrainConfig small_config() {
  TrainConfig c;
  c.batch_rays = 64;
  c.coarse_samples = 16;
  c.fine_samples = 8;
  c.arch.hidden_width = 32;
  c.arch.hidden_depth = 2;
  c.arch.skip_layer = 1;
  c.arch.encoding_bands = 4;
  c.canonical = PosePreset::kA;
  c.lr_field = 5e-3;
  c.jitter = false;
  c.iterations = 20;
  return c;
}

struct TinyData {
  std::unique_ptr<Scene> scene;
  std::vector<Frame> frames;
};

TinyData tiny_frames(int count) {
  TinyData d;
  d.scene = std::make_unique<Scene>(scene_preset("tiny"), PosePreset::kA);
  const auto poses = d.scene->trajectory();
  const int shapes = static_cast<int>(d.scene->body().shape_basis.size());
  for (int i = 0; i < count; ++i) {
    const ImageRender r = d.scene->render(poses[i]);
    Frame f;
    f.image = r.color;
    f.mask = Image(r.density.width, r.density.height, 1);
    for (size_t p = 0; p < f.mask.pixels.size(); ++p) {
      f.mask.pixels[p] = r.density.pixels[p] > 0.5f ? 1.0f : 0.0f;
    }
    f.camera = d.scene->camera();
    f.pose_init = poses[i];
    f.pose_current = poses[i];
    f.pose_gt = poses[i];
    f.shape_init = ShapeParams::zero(shapes);
    d.frames.push_back(std::move(f));
  }
  return d;
}

/// Geometric median by Weiszfeld iteration.
VecX geometric_median(const std::vector<VecX>& points) {
  VecX m = VecX::Zero(points[0].size());
  for (const VecX& p : points) {
    m += p / static_cast<double>(points.size());
  }
  for (int it = 0; it < 5000; ++it) {
    VecX num = VecX::Zero(m.size());
    double den = 0.0;
    for (const VecX& p : points) {
      const double d = std::max((p - m).norm(), 1e-15);
      num += p / d;
      den += 1.0 / d;
    }
    m = num / den;
  }
  return m;
}

}  // namespace

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

TEST(ReconstructionLoss, Examples) {
  Eigen::Matrix3Xd c(3, 1);
  c << 1.0, 0.0, 0.0;
  const Eigen::Matrix3Xd zero = Eigen::Matrix3Xd::Zero(3, 1);
  EXPECT_DOUBLE_EQ(loss_reconstruction(c, c, c).value, 0.0);
  EXPECT_DOUBLE_EQ(loss_reconstruction(c, c, zero).value, 2.0);
  EXPECT_THROW(loss_reconstruction(c, Eigen::Matrix3Xd::Zero(3, 2), c), InvalidInputError);
}

TEST(ReconstructionLoss, MatchesNaiveLoop) {
  std::mt19937_64 rng(1);
  const int b = 37;
  const auto c = random_colors(b, rng);
  const auto f = random_colors(b, rng);
  const auto t = random_colors(b, rng);
  double sum = 0.0;
  for (int r = 0; r < b; ++r) {
    for (int k = 0; k < 3; ++k) {
      sum += (c(k, r) - t(k, r)) * (c(k, r) - t(k, r)) + (f(k, r) - t(k, r)) * (f(k, r) - t(k, r));
    }
  }
  EXPECT_NEAR(loss_reconstruction(c, f, t).value, sum / b, 1e-13);
}

TEST(ReconstructionLoss, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(2);
  const int b = 5;
  auto c = random_colors(b, rng);
  auto f = random_colors(b, rng);
  const auto t = random_colors(b, rng);
  const ReconstructionLoss l = loss_reconstruction(c, f, t);
  const double h = 1e-6;
  for (int r = 0; r < b; ++r) {
    for (int k = 0; k < 3; ++k) {
      const double x = c(k, r);
      c(k, r) = x + h;
      const double up = loss_reconstruction(c, f, t).value;
      c(k, r) = x - h;
      const double dn = loss_reconstruction(c, f, t).value;
      c(k, r) = x;
      EXPECT_NEAR(l.d_coarse(k, r), (up - dn) / (2 * h), 1e-6 * std::max(1.0, std::abs(l.d_coarse(k, r))));
      const double y = f(k, r);
      f(k, r) = y + h;
      const double up2 = loss_reconstruction(c, f, t).value;
      f(k, r) = y - h;
      const double dn2 = loss_reconstruction(c, f, t).value;
      f(k, r) = y;
      EXPECT_NEAR(l.d_fine(k, r), (up2 - dn2) / (2 * h), 1e-6 * std::max(1.0, std::abs(l.d_fine(k, r))));
    }
  }
}

TEST(BackgroundLoss, Examples) {
  VecX half(1);
  half << 0.5;
  VecX zero = VecX::Zero(1);
  EXPECT_DOUBLE_EQ(loss_background(half, half, half).value, 0.0);
  EXPECT_DOUBLE_EQ(loss_background(half, half, zero).value, 1.0);
  const BackgroundLoss at_zero = loss_background(zero, zero, zero);
  EXPECT_EQ(at_zero.d_coarse[0], 0.0);
  EXPECT_EQ(at_zero.d_fine[0], 0.0);
  EXPECT_THROW(loss_background(half, VecX::Zero(2), half), InvalidInputError);
}

TEST(BackgroundLoss, MatchesNaiveLoopAndFiniteDifferences) {
  std::mt19937_64 rng(3);
  const int b = 41;
  VecX c = random_vec(b, rng);
  VecX f = random_vec(b, rng);
  VecX m(b);
  for (int i = 0; i < b; ++i) {
    m[i] = i % 3 == 0 ? 1.0 : 0.0;
  }
  double sum = 0.0;
  for (int i = 0; i < b; ++i) {
    sum += std::abs(c[i] - m[i]) + std::abs(f[i] - m[i]);
  }
  const BackgroundLoss l = loss_background(c, f, m);
  EXPECT_NEAR(l.value, sum / b, 1e-13);
  const double h = 1e-7;
  for (int i = 0; i < b; ++i) {
    const double x = c[i];
    c[i] = x + h;
    const double up = loss_background(c, f, m).value;
    c[i] = x - h;
    const double dn = loss_background(c, f, m).value;
    c[i] = x;
    EXPECT_NEAR(l.d_coarse[i], (up - dn) / (2 * h), 1e-6 / b);
    const double y = f[i];
    f[i] = y + h;
    const double up2 = loss_background(c, f, m).value;
    f[i] = y - h;
    const double dn2 = loss_background(c, f, m).value;
    f[i] = y;
    EXPECT_NEAR(l.d_fine[i], (up2 - dn2) / (2 * h), 1e-6 / b);
  }
}

TEST(PoseLoss, Examples) {
  std::mt19937_64 rng(4);
  const PoseParams p = testing_util::random_pose(3, rng, 0.5);
  EXPECT_DOUBLE_EQ(loss_pose({p, p, p}, {p, p, p}, 0.001, 0.01).value, 0.0);
  PoseParams q = p;
  q.joint_rotations[1].x() += 1.0;
  const PoseLoss l = loss_pose({p, q}, {p, q}, 0.001, 0.01);
  EXPECT_NEAR(l.value, 0.01, 1e-15);
  EXPECT_NEAR(l.gradients[0][6], -0.01, 1e-15);
  EXPECT_NEAR(l.gradients[1][6], 0.01, 1e-15);
  EXPECT_EQ(loss_pose({p}, {p}, 1.0, 1.0).gradients[0], VecX::Zero(12));
}

TEST(PoseLoss, MatchesNaiveLoopAndFiniteDifferences) {
  std::mt19937_64 rng(5);
  std::vector<PoseParams> cur;
  std::vector<PoseParams> init;
  for (int t = 0; t < 4; ++t) {
    cur.push_back(testing_util::random_pose(3, rng, 1.0));
    init.push_back(testing_util::random_pose(3, rng, 1.0));
  }
  const double l1 = 0.3;
  const double l2 = 0.7;
  double naive = 0.0;
  for (int t = 0; t < 4; ++t) {
    double a = 0.0;
    double s = 0.0;
    const VecX x = cur[t].flatten();
    const VecX x0 = init[t].flatten();
    for (Eigen::Index i = 0; i < x.size(); ++i) {
      a += (x[i] - x0[i]) * (x[i] - x0[i]);
      if (t + 1 < 4) {
        const double d = x[i] - cur[t + 1].flatten()[i];
        s += d * d;
      }
    }
    naive += l1 * std::sqrt(a) + l2 * std::sqrt(s);
  }
  const PoseLoss l = loss_pose(cur, init, l1, l2);
  EXPECT_NEAR(l.value, naive, 1e-13);
  const double h = 1e-6;
  for (int t = 0; t < 4; ++t) {
    VecX x = cur[t].flatten();
    for (Eigen::Index i = 0; i < x.size(); ++i) {
      auto shifted = cur;
      VecX y = x;
      y[i] += h;
      shifted[t] = PoseParams::unflatten(y);
      const double up = loss_pose(shifted, init, l1, l2).value;
      y[i] -= 2 * h;
      shifted[t] = PoseParams::unflatten(y);
      const double dn = loss_pose(shifted, init, l1, l2).value;
      EXPECT_NEAR(l.gradients[t][i], (up - dn) / (2 * h), 1e-6);
    }
  }
}

TEST(TotalLoss, WeightedSum) {
  TrainConfig c;
  EXPECT_NEAR(total_loss({1.0, 0.5, 2.0}, c), 1.7, 1e-15);
  EXPECT_EQ(total_loss({0.0, 0.0, 0.0}, c), 0.0);
  c.lambda_d = 0.0;
  EXPECT_EQ(total_loss({1.0, 0.5, 2.0}, c), 1.5);
}

TEST(TotalLoss, AffineInLambdaD) {
  const LossParts parts{0.75, 0.25, 0.5};
  TrainConfig c;
  c.lambda_d = 0.0;
  const double base = total_loss(parts, c);
  for (double lambda : {0.5, 1.0, 2.0, 4.0}) {
    c.lambda_d = lambda;
    EXPECT_EQ(total_loss(parts, c), base + lambda * parts.background);
  }
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

TEST(Adam, FirstStepMovesByLearningRate) {
  std::vector<double> p{0.0};
  const std::vector<double> g{1.0};
  AdamState s;
  adam_step<double>(p, g, s, 1e-3, "test");
  EXPECT_NEAR(p[0], -1e-3 / (1.0 + 1e-8), 1e-15);
  EXPECT_EQ(s.step, 1);
}

TEST(Adam, ZeroGradientLeavesParams) {
  std::vector<double> p{0.5, -2.0};
  const std::vector<double> g{0.0, 0.0};
  AdamState s;
  for (int i = 0; i < 50; ++i) {
    adam_step<double>(p, g, s, 1e-2, "test");
  }
  EXPECT_EQ(p, (std::vector<double>{0.5, -2.0}));
}

TEST(Adam, MatchesReferenceLoop) {
  std::mt19937_64 rng(6);
  std::normal_distribution<double> n(0.0, 1.0);
  const int dim = 7;
  std::vector<double> p(dim);
  for (double& v : p) {
    v = n(rng);
  }
  std::vector<double> ref = p;
  std::vector<double> m(dim, 0.0);
  std::vector<double> v(dim, 0.0);
  AdamState s;
  const double lr = 3e-3;
  for (int t = 1; t <= 100; ++t) {
    std::vector<double> g(dim);
    for (double& x : g) {
      x = n(rng);
    }
    adam_step<double>(p, g, s, lr, "test");
    for (int i = 0; i < dim; ++i) {
      m[i] = 0.9 * m[i] + 0.1 * g[i];
      v[i] = 0.999 * v[i] + 0.001 * g[i] * g[i];
      const double mh = m[i] / (1.0 - std::pow(0.9, t));
      const double vh = v[i] / (1.0 - std::pow(0.999, t));
      ref[i] -= lr * mh / (std::sqrt(vh) + 1e-8);
    }
  }
  for (int i = 0; i < dim; ++i) {
    EXPECT_NEAR(p[i], ref[i], 1e-12);
  }
}

TEST(Adam, RejectsBadInput) {
  std::vector<float> p{1.0f, 2.0f};
  const std::vector<float> short_g{1.0f};
  AdamState s;
  EXPECT_THROW(adam_step<float>(p, short_g, s, 1e-3, "fine field"), InvalidInputError);
  const std::vector<float> bad{1.0f, std::nanf("")};
  try {
    adam_step<float>(p, bad, s, 1e-3, "fine field");
    FAIL() << "expected NumericalError";
  } catch (const NumericalError& e) {
    EXPECT_NE(std::string(e.what()).find("fine field"), std::string::npos);
  }
}

// ---------------------------------------------------------------------------
// Shape, config, checkpoint, log
// ---------------------------------------------------------------------------

TEST(MeanShape, Examples) {
  VecX a(2);
  a << 1, 2;
  VecX b(2);
  b << 3, 4;
  VecX expected(2);
  expected << 2, 3;
  EXPECT_EQ(mean_shape({ShapeParams{a}, ShapeParams{b}}).coefficients, expected);
  EXPECT_EQ(mean_shape({ShapeParams{a}}).coefficients, a);
  EXPECT_THROW(mean_shape({}), InvalidInputError);
  EXPECT_THROW(mean_shape({ShapeParams{a}, ShapeParams{VecX::Zero(3)}}), InvalidInputError);
}

TEST(MeanShape, MatchesNaiveSum) {
  std::mt19937_64 rng(7);
  std::vector<ShapeParams> shapes;
  for (int i = 0; i < 100; ++i) {
    shapes.push_back(ShapeParams{random_vec(4, rng, -1.0, 1.0)});
  }
  const VecX m = mean_shape(shapes).coefficients;
  for (int k = 0; k < 4; ++k) {
    double s = 0.0;
    for (const auto& sh : shapes) {
      s += sh.coefficients[k];
    }
    EXPECT_NEAR(m[k], s / 100.0, 1e-14);
  }
}

TEST(Config, TextRoundTrip) {
  TrainConfig c;
  c.lambda_d = 0.25;
  c.lr_pose = 1.5e-3;
  c.seed = 42;
  c.refine_poses = false;
  c.canonical = PosePreset::kT;
  c.latent_dim = 8;
  c.background = Vec3(0.1, 0.2, 0.3);
  c.arch.hidden_width = 48;
  c.checkpoint_every = 100;
  EXPECT_EQ(parse_config(config_to_text(c)), c);
  EXPECT_EQ(parse_config(config_to_text(TrainConfig())), TrainConfig());
}

TEST(Config, ParsesCommentsAndOverridesBase) {
  TrainConfig base;
  base.iterations = 7;
  const TrainConfig c = parse_config("# comment\n\nlambda_d = 0   # off\nbackground = 0,0,0\n", base);
  EXPECT_EQ(c.lambda_d, 0.0);
  EXPECT_EQ(c.background, Vec3::Zero());
  EXPECT_EQ(c.iterations, 7);
}

TEST(Config, ErrorsNameTheLine) {
  auto message = [](const std::string& text) {
    try {
      parse_config(text);
    } catch (const ParseError& e) {
      return std::string(e.what());
    }
    return std::string();
  };
  EXPECT_NE(message("lambda_d = 0.1\nwhat = 3\n").find("line 2"), std::string::npos);
  EXPECT_NE(message("no equals sign\n").find("line 1"), std::string::npos);
  EXPECT_NE(message("jitter = maybe\n").find("jitter"), std::string::npos);
  EXPECT_THROW(parse_config("lr_field = -1\n"), InvalidInputError);
  EXPECT_THROW(load_config(temp_path("missing.cfg")), IoError);
  TrainConfig c;
  EXPECT_THROW(set_config_value(c, "canonical", "Y"), InvalidInputError);
}

TEST(Checkpoint, RoundTripIsExact) {
  const SkinnedBody body = testing_util::chain_body(4, 30, 2);
  std::mt19937_64 rng(9);
  Checkpoint ck;
  ck.iteration = 123;
  FieldArch arch;
  arch.hidden_width = 16;
  arch.hidden_depth = 3;
  arch.skip_layer = 1;
  arch.latent_dim = 3;
  ck.coarse = init_field<float>(arch, 1);
  ck.fine = init_field<float>(arch, 2);
  ck.deformation_config = make_deformation_config(body, PosePreset::kX);
  ck.deformation_config.mask_threshold = 0.15;
  ck.center = Vec3(0.1, -0.2, -3.0);
  ck.background = Vec3(1.0, 0.5, 0.0);
  ck.shape = ShapeParams{random_vec(2, rng)};
  for (int i = 0; i < 3; ++i) {
    ck.poses.push_back(testing_util::random_pose(4, rng, 1.0));
    ck.latents.push_back(random_vec(3, rng, -0.1, 0.1));
  }
  const auto path = temp_path("ck/roundtrip.ckpt");
  save_checkpoint(ck, path);
  EXPECT_TRUE(load_checkpoint(path) == ck);
}

TEST(Checkpoint, RejectsOtherVersionsAndTruncation) {
  Checkpoint ck;
  FieldArch arch;
  arch.hidden_width = 8;
  arch.hidden_depth = 2;
  arch.skip_layer = 1;
  ck.coarse = init_field<float>(arch, 1);
  ck.fine = init_field<float>(arch, 2);
  const auto path = temp_path("ck/versions.ckpt");
  save_checkpoint(ck, path);
  std::ifstream in(path, std::ios::binary);
  std::stringstream buf;
  buf << in.rdbuf();
  in.close();
  std::string text = buf.str();
  {
    std::string v2 = text;
    v2.replace(v2.find(" 1\n"), 3, " 2\n");
    std::ofstream out(path, std::ios::binary);
    out << v2;
  }
  EXPECT_THROW(load_checkpoint(path), VersionError);
  {
    std::ofstream out(path, std::ios::binary);
    out << text.substr(0, text.size() - 10);
  }
  EXPECT_THROW(load_checkpoint(path), ParseError);
  {
    std::ofstream out(path, std::ios::binary);
    out << "hello 1\n";
  }
  EXPECT_THROW(load_checkpoint(path), ParseError);
  EXPECT_THROW(load_checkpoint(temp_path("ck/none.ckpt")), IoError);
}

TEST(TrainLog, CsvLayout) {
  TrainLogRow a{1, 0, 0.5, 0.0, 0.25, 0.525, std::nan("")};
  TrainLogRow b{2, 1, 0.25, 0.0, 0.125, 0.2625, 1.5};
  const auto path = temp_path("log/train.csv");
  write_log_csv({a, b}, path);
  std::ifstream in(path);
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, "iteration,frame,loss_c,loss_p,loss_d,total,pose_error_deg");
  std::getline(in, line);
  EXPECT_EQ(line, "1,0,0.5,0,0.25,0.525,");
  std::getline(in, line);
  EXPECT_EQ(line, "2,1,0.25,0,0.125,0.2625,1.5");
}

TEST(JointAngleError, KnownRotation) {
  PoseParams a = PoseParams::zero(4);
  PoseParams b = a;
  b.joint_rotations[2] = Vec3(0.0, 0.0, 20.0 * std::numbers::pi / 180.0);
  EXPECT_NEAR(mean_joint_angle_error_deg({a}, {b}), 5.0, 1e-9);
  EXPECT_NEAR(mean_joint_angle_error_deg({a, a}, {a, b}), 2.5, 1e-9);
  EXPECT_THROW(mean_joint_angle_error_deg({a}, {}), InvalidInputError);
}

TEST(PoseRegularizer, ConvergesToConstantGeometricMedian) {
  std::mt19937_64 rng(10);
  std::vector<PoseParams> init;
  for (int t = 0; t < 3; ++t) {
    init.push_back(testing_util::random_pose(2, rng, 0.4));
  }
  std::vector<VecX> x;
  for (const PoseParams& p : init) {
    x.push_back(p.flatten());
  }
  std::vector<AdamState> states(3);
  const double l1 = 1.0;
  const double l2 = 10.0;
  for (int it = 0; it < 100000; ++it) {
    std::vector<PoseParams> cur;
    for (const VecX& v : x) {
      cur.push_back(PoseParams::unflatten(v));
    }
    const PoseLoss l = loss_pose(cur, init, l1, l2);
    const double lr = 1e-2 / (1.0 + it / 2000.0);
    for (int t = 0; t < 3; ++t) {
      adam_step<double>(std::span<double>(x[t].data(), x[t].size()),
                        std::span<const double>(l.gradients[t].data(), l.gradients[t].size()),
                        states[t], lr, "pose");
    }
  }
  std::vector<VecX> targets;
  for (const PoseParams& p : init) {
    targets.push_back(p.flatten());
  }
  const VecX median = geometric_median(targets);
  for (int t = 0; t < 3; ++t) {
    EXPECT_LT((x[t] - median).norm(), 1e-3);
  }
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

TEST(Train, SmokeRunHalvesTheLoss) {
  TinyData d = tiny_frames(1);
  TrainConfig c = small_config();
  c.iterations = 200;
  c.batch_rays = 128;
  const TrainResult r = train(d.scene->body(), d.frames, c);
  ASSERT_EQ(r.log.size(), 200u);
  EXPECT_EQ(r.checkpoint.iteration, 200);
  EXPECT_LE(r.log.back().total, 0.5 * r.log.front().total);
}

TEST(Train, FrozenPosesStayBitEqual) {
  TinyData d = tiny_frames(2);
  for (Frame& f : d.frames) {
    f.pose_init.joint_rotations[3].x() += 0.05;
    f.pose_current = f.pose_init;
  }
  TrainConfig c = small_config();
  c.refine_poses = false;
  const TrainResult r = train(d.scene->body(), d.frames, c);
  for (size_t t = 0; t < d.frames.size(); ++t) {
    EXPECT_EQ(d.frames[t].pose_current.flatten(), d.frames[t].pose_init.flatten());
    EXPECT_EQ(r.checkpoint.poses[t].flatten(), d.frames[t].pose_init.flatten());
  }
}

TEST(Train, RefinementMovesPosesAndLogsError) {
  TinyData d = tiny_frames(2);
  for (Frame& f : d.frames) {
    f.pose_init.joint_rotations[3].x() += 0.05;
    f.pose_current = f.pose_init;
  }
  TrainConfig c = small_config();
  c.lr_pose = 1e-3;
  const TrainResult r = train(d.scene->body(), d.frames, c);
  EXPECT_NE(d.frames[0].pose_current.flatten(), d.frames[0].pose_init.flatten());
  EXPECT_TRUE(std::isfinite(r.log.back().pose_error_deg));
  EXPECT_GT(r.log.front().pose_error_deg, 0.0);
}

TEST(Train, DeterministicGivenSeed) {
  TrainConfig c = small_config();
  c.refine_poses = true;
  c.lr_pose = 1e-3;
  TinyData a = tiny_frames(2);
  TinyData b = tiny_frames(2);
  const TrainResult ra = train(a.scene->body(), a.frames, c);
  const TrainResult rb = train(b.scene->body(), b.frames, c);
  EXPECT_TRUE(ra.checkpoint == rb.checkpoint);
  const auto pa = temp_path("det/a.ckpt");
  const auto pb = temp_path("det/b.ckpt");
  save_checkpoint(ra.checkpoint, pa);
  save_checkpoint(rb.checkpoint, pb);
  std::ifstream fa(pa, std::ios::binary);
  std::ifstream fb(pb, std::ios::binary);
  std::stringstream sa;
  std::stringstream sb;
  sa << fa.rdbuf();
  sb << fb.rdbuf();
  EXPECT_EQ(sa.str(), sb.str());
  c.seed = 1;
  TinyData e = tiny_frames(2);
  EXPECT_FALSE(train(e.scene->body(), e.frames, c).checkpoint == ra.checkpoint);
}

TEST(Train, JitteredRunsAreAlsoRepeatable) {
  TrainConfig c = small_config();
  c.jitter = true;
  c.iterations = 5;
  TinyData a = tiny_frames(1);
  TinyData b = tiny_frames(1);
  EXPECT_TRUE(train(a.scene->body(), a.frames, c).checkpoint ==
              train(b.scene->body(), b.frames, c).checkpoint);
}

TEST(Train, NonFiniteLossNamesTheIteration) {
  TinyData d = tiny_frames(1);
  std::fill(d.frames[0].image.pixels.begin(), d.frames[0].image.pixels.end(), std::nanf(""));
  TrainConfig c = small_config();
  try {
    train(d.scene->body(), d.frames, c);
    FAIL() << "expected NumericalError";
  } catch (const NumericalError& e) {
    EXPECT_NE(std::string(e.what()).find("iteration 1"), std::string::npos);
  }
}

TEST(Train, RejectsInconsistentFrames) {
  TinyData d = tiny_frames(1);
  TrainConfig c = small_config();
  std::vector<Frame> none;
  EXPECT_THROW(train(d.scene->body(), none, c), InvalidInputError);
  d.frames[0].mask.pixels[0] = 0.5f;
  EXPECT_THROW(train(d.scene->body(), d.frames, c), InvalidInputError);
}

TEST(Train, LatentArmLearnsPerFrameCodes) {
  TinyData d = tiny_frames(2);
  TrainConfig c = small_config();
  c.latent_dim = 4;
  const TrainResult r = train(d.scene->body(), d.frames, c);
  ASSERT_EQ(r.checkpoint.latents.size(), 2u);
  EXPECT_EQ(r.checkpoint.latents[0].size(), 4);
  EXPECT_EQ(mean_latent(r.checkpoint), 0.5 * (r.checkpoint.latents[0] + r.checkpoint.latents[1]));
}

TEST(Train, CheckpointCadenceWritesFile) {
  TinyData d = tiny_frames(1);
  TrainConfig c = small_config();
  c.checkpoint_every = 5;
  const auto path = temp_path("cadence/run.ckpt");
  std::filesystem::remove(path);
  TrainOptions o;
  o.checkpoint_path = path;
  int seen = 0;
  o.on_iteration = [&](const TrainLogRow& row) {
    ++seen;
    if (row.iteration == 11) {
      EXPECT_EQ(load_checkpoint(path).iteration, 10);
    }
  };
  const TrainResult r = train(d.scene->body(), d.frames, c, o);
  EXPECT_EQ(seen, c.iterations);
  EXPECT_TRUE(load_checkpoint(path) == r.checkpoint);
}

TEST(RefineTestPoses, FieldsFrozenAndGroundTruthNearlyFixed) {
  TinyData d = tiny_frames(2);
  TrainConfig c = small_config();
  c.iterations = 100;
  const TrainResult r = train(d.scene->body(), d.frames, c);
  const Checkpoint before = r.checkpoint;
  TinyData test = tiny_frames(2);
  std::vector<TrainLogRow> log;
  const auto refined = refine_test_poses(r.checkpoint, test.scene->body(), test.frames, c, 50, &log);
  EXPECT_TRUE(r.checkpoint == before);
  ASSERT_EQ(log.size(), 50u);
  for (size_t t = 0; t < refined.size(); ++t) {
    EXPECT_EQ(refined[t].flatten(), test.frames[t].pose_current.flatten());
    EXPECT_LT((refined[t].flatten() - test.frames[t].pose_gt->flatten()).norm(), 1e-2);
  }
}

TEST(RenderPose, DeformationOffBaselineRenders) {
  TinyData d = tiny_frames(1);
  TrainConfig c = small_config();
  c.deformation = false;
  const TrainResult r = train(d.scene->body(), d.frames, c);
  EXPECT_FALSE(r.checkpoint.deformation);
  RenderSettings s;
  s.coarse_samples = 8;
  s.fine_samples = 4;
  const ImageRender img =
      render_pose(r.checkpoint, d.scene->body(), d.frames[0].pose_gt.value(), d.frames[0].camera, s);
  EXPECT_EQ(img.color.width, 16);
  for (float v : img.color.pixels) {
    EXPECT_TRUE(std::isfinite(v));
  }
}
