#include "anerf/body_model.hpp"

#include "anerf/rotation.hpp"
#include "anerf/text_util.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <random>

namespace anerf {

namespace {

constexpr const char* kBodyMagic = "ANERF_BODY";
constexpr int kBodyVersion = 1;
constexpr double kWeightSumTolerance = 1e-6;

}  // namespace

int SkinnedBody::joint_index(const std::string& name) const {
  const auto it = std::find(joint_names.begin(), joint_names.end(), name);
  return it == joint_names.end() ? -1 : static_cast<int>(it - joint_names.begin());
}

bool SkinnedBody::operator==(const SkinnedBody& other) const {
  auto bases_equal = [](const std::vector<VertexOffsets>& a, const std::vector<VertexOffsets>& b) {
    if (a.size() != b.size()) {
      return false;
    }
    for (size_t i = 0; i < a.size(); ++i) {
      if (a[i].rows() != b[i].rows() || a[i] != b[i]) {
        return false;
      }
    }
    return true;
  };
  return rest_vertices == other.rest_vertices && parent == other.parent &&
         joint_rest_positions == other.joint_rest_positions && joint_names == other.joint_names &&
         blend_weights.rows() == other.blend_weights.rows() &&
         blend_weights.cols() == other.blend_weights.cols() &&
         blend_weights == other.blend_weights && bases_equal(shape_basis, other.shape_basis) &&
         bases_equal(pose_basis, other.pose_basis) && faces == other.faces;
}

PoseParams PoseParams::zero(int joint_count) {
  PoseParams pose;
  pose.joint_rotations.assign(static_cast<size_t>(joint_count), Vec3::Zero());
  return pose;
}

VecX PoseParams::flatten() const {
  VecX v(3 + 3 * joint_rotations.size());
  v.head<3>() = root_translation;
  for (size_t j = 0; j < joint_rotations.size(); ++j) {
    v.segment<3>(3 + 3 * static_cast<Eigen::Index>(j)) = joint_rotations[j];
  }
  return v;
}

PoseParams PoseParams::unflatten(const VecX& values) {
  require(values.size() >= 3 && values.size() % 3 == 0,
          "pose vector length must be 3 + 3K, got " + std::to_string(values.size()));
  PoseParams pose;
  pose.root_translation = values.head<3>();
  const auto joints = (values.size() - 3) / 3;
  pose.joint_rotations.resize(static_cast<size_t>(joints));
  for (Eigen::Index j = 0; j < joints; ++j) {
    pose.joint_rotations[static_cast<size_t>(j)] = values.segment<3>(3 + 3 * j);
  }
  return pose;
}

void validate_body(const SkinnedBody& body) {
  const int v = body.vertex_count();
  const int k = body.joint_count();
  require(v >= 1, "body has no vertices");
  require(k >= 1, "body has no joints");
  require(static_cast<int>(body.joint_rest_positions.size()) == k,
          "joint_rest_positions count does not match joint count");
  require(body.joint_names.empty() || static_cast<int>(body.joint_names.size()) == k,
          "joint_names count does not match joint count");
  require(body.parent[0] == -1, "joint 0 must be the root (parent -1)");
  for (int j = 1; j < k; ++j) {
    require(body.parent[j] >= 0 && body.parent[j] < j,
            "joint " + std::to_string(j) + " parent must precede it (tree in topological order)");
  }
  require(body.blend_weights.rows() == v && body.blend_weights.cols() == k,
          "blend_weights must be V x K");
  for (int i = 0; i < v; ++i) {
    const auto row = body.blend_weights.row(i);
    require(row.allFinite(), "blend weights of vertex " + std::to_string(i) + " are not finite");
    require((row.array() >= 0.0).all(),
            "blend weights of vertex " + std::to_string(i) + " are negative");
    const double sum = row.sum();
    require(std::abs(sum - 1.0) <= kWeightSumTolerance,
            "blend weights of vertex " + std::to_string(i) + " sum to " + format_double(sum) +
                ", expected 1");
  }
  for (const auto& basis : body.shape_basis) {
    require(basis.rows() == v, "shape_basis row count must equal vertex count");
  }
  require(body.pose_basis.empty() || static_cast<int>(body.pose_basis.size()) == 9 * (k - 1),
          "pose_basis must be empty or hold 9*(K-1) entries");
  for (const auto& basis : body.pose_basis) {
    require(basis.rows() == v, "pose_basis row count must equal vertex count");
  }
  for (const auto& f : body.faces) {
    require((f.array() >= 0).all() && (f.array() < v).all(), "face index out of range");
  }
  for (const auto& p : body.rest_vertices) {
    require(p.allFinite(), "rest vertex is not finite");
  }
}

void validate_pose(const SkinnedBody& body, const PoseParams& pose) {
  require(pose.joint_count() == body.joint_count(),
          "pose has " + std::to_string(pose.joint_count()) + " joints, body has " +
              std::to_string(body.joint_count()));
  require(pose.root_translation.allFinite(), "root translation is not finite");
  for (const auto& r : pose.joint_rotations) {
    require(r.allFinite(), "joint rotation is not finite");
  }
}

std::vector<Mat4> forward_kinematics(const SkinnedBody& body, const PoseParams& pose) {
  validate_pose(body, pose);
  const int k = body.joint_count();
  std::vector<Mat4> world(static_cast<size_t>(k));
  for (int j = 0; j < k; ++j) {
    Mat4 local = Mat4::Identity();
    local.topLeftCorner<3, 3>() = axis_angle_to_matrix(pose.joint_rotations[j]);
    if (j == 0) {
      local.block<3, 1>(0, 3) = body.joint_rest_positions[0] + pose.root_translation;
      world[0] = local;
    } else {
      const int p = body.parent[j];
      local.block<3, 1>(0, 3) = body.joint_rest_positions[j] - body.joint_rest_positions[p];
      world[j] = world[p] * local;
    }
  }
  return world;
}

std::vector<Mat4> skinning_transforms(const SkinnedBody& body, const PoseParams& pose) {
  auto world = forward_kinematics(body, pose);
  for (size_t j = 0; j < world.size(); ++j) {
    world[j] = world[j] * translation(-body.joint_rest_positions[j]);
  }
  return world;
}

VecX pose_feature(const SkinnedBody& body, const PoseParams& pose) {
  const int k = body.joint_count();
  VecX feat(9 * (k - 1));
  for (int j = 1; j < k; ++j) {
    const Mat3 r = axis_angle_to_matrix(pose.joint_rotations[j]) - Mat3::Identity();
    for (int m = 0; m < 9; ++m) {
      feat[9 * (j - 1) + m] = r(m / 3, m % 3);
    }
  }
  return feat;
}

Vec3 blendshape_offset(const SkinnedBody& body, const ShapeParams& shape, const VecX& pose_feat,
                       int vertex) {
  Vec3 offset = Vec3::Zero();
  for (int c = 0; c < body.shape_count(); ++c) {
    offset += shape.coefficients[c] * body.shape_basis[c].row(vertex).transpose();
  }
  for (size_t c = 0; c < body.pose_basis.size(); ++c) {
    offset += pose_feat[static_cast<Eigen::Index>(c)] * body.pose_basis[c].row(vertex).transpose();
  }
  return offset;
}

VertexTransforms vertex_transforms(const SkinnedBody& body, const ShapeParams& shape,
                                   const PoseParams& pose) {
  require(shape.coefficients.size() == body.shape_count(),
          "shape has " + std::to_string(shape.coefficients.size()) + " coefficients, body has " +
              std::to_string(body.shape_count()));
  const auto skin = skinning_transforms(body, pose);
  const VecX feat = body.pose_basis.empty() ? VecX() : pose_feature(body, pose);
  const int v = body.vertex_count();
  const int k = body.joint_count();
  VertexTransforms out;
  out.transforms.resize(static_cast<size_t>(v));
  out.posed_vertices.resize(static_cast<size_t>(v));
  for (int i = 0; i < v; ++i) {
    Mat4 blended = Mat4::Zero();
    for (int j = 0; j < k; ++j) {
      const double w = body.blend_weights(i, j);
      if (w != 0.0) {
        blended += w * skin[j];
      }
    }
    // Convex combination keeps the bottom row exact only up to round-off.
    blended.row(3) << 0.0, 0.0, 0.0, 1.0;
    const Mat4 m = blended * translation(blendshape_offset(body, shape, feat, i));
    out.transforms[i] = m;
    out.posed_vertices[i] = (m * body.rest_vertices[i].homogeneous()).head<3>();
  }
  return out;
}

// ---------------------------------------------------------------------------
// Body file I/O
//
//   ANERF_BODY 1
//   counts <V> <K> <S> <P> <F>
//   vertices            V lines: x y z
//   joints              K lines: name parent x y z   (name "-" when unnamed)
//   weights             V lines: K weights
//   shape_basis         S blocks of V lines: dx dy dz
//   pose_basis          P blocks of V lines: dx dy dz
//   faces               F lines: a b c
//   end
// ---------------------------------------------------------------------------

void save_body(const SkinnedBody& body, const std::filesystem::path& path) {
  validate_body(body);
  std::ofstream out(path);
  if (!out) {
    throw IoError("cannot open body file for writing: " + path.string());
  }
  const bool named = !body.joint_names.empty();
  out << kBodyMagic << ' ' << kBodyVersion << '\n';
  out << "counts " << body.vertex_count() << ' ' << body.joint_count() << ' '
      << body.shape_basis.size() << ' ' << body.pose_basis.size() << ' ' << body.faces.size()
      << '\n';
  auto write_vec = [&](const Vec3& p) {
    out << format_double(p.x()) << ' ' << format_double(p.y()) << ' ' << format_double(p.z());
  };
  out << "vertices\n";
  for (const auto& p : body.rest_vertices) {
    write_vec(p);
    out << '\n';
  }
  out << "joints\n";
  for (int j = 0; j < body.joint_count(); ++j) {
    out << (named ? body.joint_names[j] : std::string("-")) << ' ' << body.parent[j] << ' ';
    write_vec(body.joint_rest_positions[j]);
    out << '\n';
  }
  out << "weights\n";
  for (int i = 0; i < body.vertex_count(); ++i) {
    for (int j = 0; j < body.joint_count(); ++j) {
      out << (j ? " " : "") << format_double(body.blend_weights(i, j));
    }
    out << '\n';
  }
  auto write_basis = [&](const char* name, const std::vector<VertexOffsets>& basis) {
    out << name << '\n';
    for (const auto& b : basis) {
      for (int i = 0; i < b.rows(); ++i) {
        write_vec(b.row(i).transpose());
        out << '\n';
      }
    }
  };
  write_basis("shape_basis", body.shape_basis);
  write_basis("pose_basis", body.pose_basis);
  out << "faces\n";
  for (const auto& f : body.faces) {
    out << f[0] << ' ' << f[1] << ' ' << f[2] << '\n';
  }
  out << "end\n";
  if (!out) {
    throw IoError("failed writing body file: " + path.string());
  }
}

namespace {

class BodyReader {
 public:
  BodyReader(std::istream& in, std::string source) : in_(in), source_(std::move(source)) {}

  std::vector<std::string> next(const std::string& what) {
    std::string line;
    while (std::getline(in_, line)) {
      ++line_no_;
      auto tokens = split_whitespace(line);
      if (!tokens.empty()) {
        return tokens;
      }
    }
    fail("unexpected end of file while reading " + what);
  }

  void expect_keyword(const std::string& keyword) {
    const auto tokens = next(keyword);
    if (tokens.size() != 1 || tokens[0] != keyword) {
      fail("expected section '" + keyword + "'");
    }
  }

  std::vector<double> numbers(const std::string& what, size_t count) {
    const auto tokens = next(what);
    if (tokens.size() != count) {
      fail(what + ": expected " + std::to_string(count) + " values, got " +
           std::to_string(tokens.size()));
    }
    std::vector<double> values(count);
    for (size_t i = 0; i < count; ++i) {
      if (!parse_double(tokens[i], values[i])) {
        fail(what + ": field " + std::to_string(i) + " is not a number: '" + tokens[i] + "'");
      }
    }
    return values;
  }

  long long integer(const std::string& token, const std::string& what) {
    long long v = 0;
    if (!parse_int(token, v)) {
      fail(what + " is not an integer: '" + token + "'");
    }
    return v;
  }

  [[noreturn]] void fail(const std::string& message) const {
    throw ParseError(source_ + ":" + std::to_string(line_no_) + ": " + message);
  }

 private:
  std::istream& in_;
  std::string source_;
  int line_no_ = 0;
};

}  // namespace

SkinnedBody load_body(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) {
    throw IoError("cannot open body file: " + path.string());
  }
  BodyReader reader(in, path.string());
  const auto header = reader.next("header");
  if (header.size() != 2 || header[0] != kBodyMagic) {
    reader.fail("missing ANERF_BODY header");
  }
  if (reader.integer(header[1], "version") != kBodyVersion) {
    throw VersionError(path.string() + ": unsupported body file version " + header[1]);
  }
  const auto counts = reader.next("counts");
  if (counts.size() != 6 || counts[0] != "counts") {
    reader.fail("expected 'counts V K S P F'");
  }
  const auto v = reader.integer(counts[1], "vertex count");
  const auto k = reader.integer(counts[2], "joint count");
  const auto s = reader.integer(counts[3], "shape count");
  const auto p = reader.integer(counts[4], "pose count");
  const auto f = reader.integer(counts[5], "face count");
  if (v < 1 || k < 1 || s < 0 || p < 0 || f < 0) {
    reader.fail("counts out of range");
  }

  SkinnedBody body;
  reader.expect_keyword("vertices");
  body.rest_vertices.reserve(static_cast<size_t>(v));
  for (long long i = 0; i < v; ++i) {
    const auto xyz = reader.numbers("vertex " + std::to_string(i), 3);
    body.rest_vertices.emplace_back(xyz[0], xyz[1], xyz[2]);
  }
  reader.expect_keyword("joints");
  bool any_named = false;
  for (long long j = 0; j < k; ++j) {
    const auto tokens = reader.next("joint " + std::to_string(j));
    if (tokens.size() != 5) {
      reader.fail("joint " + std::to_string(j) + ": expected 'name parent x y z'");
    }
    body.joint_names.push_back(tokens[0]);
    any_named = any_named || tokens[0] != "-";
    body.parent.push_back(static_cast<int>(reader.integer(tokens[1], "joint parent")));
    Vec3 pos;
    for (int c = 0; c < 3; ++c) {
      if (!parse_double(tokens[2 + c], pos[c])) {
        reader.fail("joint " + std::to_string(j) + ": position field " + std::to_string(c) +
                    " is not a number");
      }
    }
    body.joint_rest_positions.push_back(pos);
  }
  if (!any_named) {
    body.joint_names.clear();
  }
  reader.expect_keyword("weights");
  body.blend_weights.resize(v, k);
  for (long long i = 0; i < v; ++i) {
    const auto w = reader.numbers("weights of vertex " + std::to_string(i), static_cast<size_t>(k));
    for (long long j = 0; j < k; ++j) {
      body.blend_weights(i, j) = w[static_cast<size_t>(j)];
    }
  }
  auto read_basis = [&](const char* name, long long count, std::vector<VertexOffsets>& basis) {
    reader.expect_keyword(name);
    for (long long c = 0; c < count; ++c) {
      VertexOffsets b(v, 3);
      for (long long i = 0; i < v; ++i) {
        const auto xyz = reader.numbers(std::string(name) + " " + std::to_string(c) +
                                            " vertex " + std::to_string(i),
                                        3);
        b.row(i) << xyz[0], xyz[1], xyz[2];
      }
      basis.push_back(std::move(b));
    }
  };
  read_basis("shape_basis", s, body.shape_basis);
  read_basis("pose_basis", p, body.pose_basis);
  reader.expect_keyword("faces");
  for (long long i = 0; i < f; ++i) {
    const auto tokens = reader.next("face " + std::to_string(i));
    if (tokens.size() != 3) {
      reader.fail("face " + std::to_string(i) + ": expected 3 indices");
    }
    Eigen::Vector3i face;
    for (int c = 0; c < 3; ++c) {
      face[c] = static_cast<int>(reader.integer(tokens[c], "face index"));
    }
    body.faces.push_back(face);
  }
  reader.expect_keyword("end");
  try {
    validate_body(body);
  } catch (const InvalidInputError& e) {
    throw ParseError(path.string() + ": invalid body: " + e.what());
  }
  return body;
}

// ---------------------------------------------------------------------------
// Procedural toy body
// ---------------------------------------------------------------------------

namespace {

struct Segment {
  Vec3 start;
  Vec3 end;
  double radius;
  int joint;        // joint driving this segment
  int child = -1;   // joint at the distal end that continues along the axis
};

double smoothstep01(double t) {
  t = std::clamp(t, 0.0, 1.0);
  return t * t * (3.0 - 2.0 * t);
}

double distance_to_segment(const Vec3& p, const Vec3& a, const Vec3& b) {
  const Vec3 ab = b - a;
  const double t = std::clamp((p - a).dot(ab) / ab.squaredNorm(), 0.0, 1.0);
  return (p - (a + t * ab)).norm();
}

struct Skeleton {
  std::vector<std::string> names;
  std::vector<int> parent;
  std::vector<Vec3> joints;
  std::vector<Segment> segments;
};

Skeleton humanoid(const ToyBodySpec& spec) {
  Skeleton s;
  auto add = [&](const std::string& name, int parent, const Vec3& pos) {
    s.names.push_back(name);
    s.parent.push_back(parent);
    s.joints.push_back(pos);
    return static_cast<int>(s.joints.size()) - 1;
  };
  const int pelvis = add("pelvis", -1, Vec3(0.0, 0.0, 0.0));
  const int neck = add("neck", pelvis, Vec3(0.0, 0.55, 0.0));
  const int l_shoulder = add("l_shoulder", pelvis, Vec3(0.18, 0.45, 0.0));
  const int l_elbow = add("l_elbow", l_shoulder, Vec3(0.46, 0.45, 0.0));
  const int r_shoulder = add("r_shoulder", pelvis, Vec3(-0.18, 0.45, 0.0));
  const int r_elbow = add("r_elbow", r_shoulder, Vec3(-0.46, 0.45, 0.0));
  const int l_hip = add("l_hip", pelvis, Vec3(0.09, -0.05, 0.0));
  const int l_knee = add("l_knee", l_hip, Vec3(0.09, -0.48, 0.0));
  const int r_hip = add("r_hip", pelvis, Vec3(-0.09, -0.05, 0.0));
  const int r_knee = add("r_knee", r_hip, Vec3(-0.09, -0.48, 0.0));

  s.segments = {
      {Vec3(0.0, -0.02, 0.0), Vec3(0.0, 0.42, 0.0), spec.torso_radius, pelvis},
      {Vec3(0.0, 0.64, 0.0), Vec3(0.0, 0.74, 0.0), spec.head_radius, neck},
      {s.joints[l_shoulder], s.joints[l_elbow], spec.upper_arm_radius, l_shoulder, l_elbow},
      {s.joints[l_elbow], Vec3(0.72, 0.45, 0.0), spec.forearm_radius, l_elbow},
      {s.joints[r_shoulder], s.joints[r_elbow], spec.upper_arm_radius, r_shoulder, r_elbow},
      {s.joints[r_elbow], Vec3(-0.72, 0.45, 0.0), spec.forearm_radius, r_elbow},
      {s.joints[l_hip], s.joints[l_knee], spec.thigh_radius, l_hip, l_knee},
      {s.joints[l_knee], Vec3(0.09, -0.90, 0.0), spec.shin_radius, l_knee},
      {s.joints[r_hip], s.joints[r_knee], spec.thigh_radius, r_hip, r_knee},
      {s.joints[r_knee], Vec3(-0.09, -0.90, 0.0), spec.shin_radius, r_knee},
  };
  return s;
}

Skeleton chain(const ToyBodySpec& spec) {
  Skeleton s;
  const double length = 0.3;
  for (int j = 0; j < spec.joint_count; ++j) {
    s.names.push_back("joint" + std::to_string(j));
    s.parent.push_back(j - 1);
    s.joints.emplace_back(0.0, length * j, 0.0);
  }
  for (int j = 0; j < spec.joint_count; ++j) {
    Segment seg{s.joints[j], s.joints[j] + Vec3(0.0, length, 0.0), spec.upper_arm_radius, j};
    seg.child = j + 1 < spec.joint_count ? j + 1 : -1;
    s.segments.push_back(seg);
  }
  return s;
}

// Capsule surface: hemispherical caps plus a cylinder, as rings of vertices.
struct CapsuleMesh {
  std::vector<Vec3> points;
  std::vector<Vec3> normals;
  std::vector<double> axial;  // signed distance along the axis from the start
  std::vector<Eigen::Vector3i> faces;
};

CapsuleMesh capsule(const Segment& seg, int target_vertices, double phase) {
  const Vec3 axis = (seg.end - seg.start).normalized();
  const double length = (seg.end - seg.start).norm();
  const Vec3 helper = std::abs(axis.z()) < 0.9 ? Vec3::UnitZ() : Vec3::UnitX();
  const Vec3 u = axis.cross(helper).normalized();
  const Vec3 w = axis.cross(u);
  const double r = seg.radius;
  const double circumference = 2.0 * std::numbers::pi * r;
  const double profile = length + std::numbers::pi * r;
  const double spacing = std::sqrt(circumference * profile / std::max(target_vertices, 16));
  const int around = std::max(8, static_cast<int>(std::lround(circumference / spacing)));
  const int cap_rings = std::max(2, static_cast<int>(std::lround(0.5 * std::numbers::pi * r / spacing)));
  const int body_rings = std::max(2, static_cast<int>(std::lround(length / spacing)) + 1);

  // Ring profile: (axial offset, ring radius, normal axial component).
  struct Ring {
    double axial;
    double radius;
    double normal_axial;
  };
  std::vector<Ring> rings;
  for (int i = cap_rings - 1; i >= 1; --i) {
    const double a = 0.5 * std::numbers::pi * i / cap_rings;
    rings.push_back({-r * std::sin(a), r * std::cos(a), -std::sin(a)});
  }
  for (int i = 0; i < body_rings; ++i) {
    rings.push_back({length * i / (body_rings - 1), r, 0.0});
  }
  for (int i = 1; i < cap_rings; ++i) {
    const double a = 0.5 * std::numbers::pi * i / cap_rings;
    rings.push_back({length + r * std::sin(a), r * std::cos(a), std::sin(a)});
  }

  CapsuleMesh mesh;
  mesh.points.push_back(seg.start - r * axis);
  mesh.normals.push_back(-axis);
  mesh.axial.push_back(-r);
  for (const auto& ring : rings) {
    for (int k = 0; k < around; ++k) {
      const double t = 2.0 * std::numbers::pi * k / around + phase;
      const Vec3 radial = std::cos(t) * u + std::sin(t) * w;
      mesh.points.push_back(seg.start + ring.axial * axis + ring.radius * radial);
      const double radial_scale = std::sqrt(std::max(0.0, 1.0 - ring.normal_axial * ring.normal_axial));
      mesh.normals.push_back((ring.normal_axial * axis + radial_scale * radial).normalized());
      mesh.axial.push_back(ring.axial);
    }
  }
  mesh.points.push_back(seg.end + r * axis);
  mesh.normals.push_back(axis);
  mesh.axial.push_back(length + r);

  const int ring_count = static_cast<int>(rings.size());
  const int tip = static_cast<int>(mesh.points.size()) - 1;
  auto idx = [&](int ring, int k) { return 1 + ring * around + (k % around); };
  for (int k = 0; k < around; ++k) {
    mesh.faces.emplace_back(0, idx(0, k + 1), idx(0, k));
  }
  for (int ring = 0; ring + 1 < ring_count; ++ring) {
    for (int k = 0; k < around; ++k) {
      mesh.faces.emplace_back(idx(ring, k), idx(ring, k + 1), idx(ring + 1, k + 1));
      mesh.faces.emplace_back(idx(ring, k), idx(ring + 1, k + 1), idx(ring + 1, k));
    }
  }
  for (int k = 0; k < around; ++k) {
    mesh.faces.emplace_back(tip, idx(ring_count - 1, k), idx(ring_count - 1, k + 1));
  }
  return mesh;
}

}  // namespace

std::vector<Capsule> toy_body_capsules(const ToyBodySpec& spec) {
  require(spec.joint_count >= 2, "toy body needs at least 2 joints");
  const Skeleton skel = spec.joint_count == 10 ? humanoid(spec) : chain(spec);
  std::vector<Capsule> out;
  for (const Segment& seg : skel.segments) {
    out.push_back({seg.start, seg.end, seg.radius, seg.joint});
  }
  return out;
}

SkinnedBody make_toy_body(const ToyBodySpec& spec, std::uint64_t seed) {
  require(spec.joint_count >= 2, "toy body needs at least 2 joints");
  require(spec.vertices_per_segment >= 16, "vertices_per_segment must be >= 16");
  require(spec.blend_half_width > 0.0, "blend_half_width must be positive");
  const Skeleton skel = spec.joint_count == 10 ? humanoid(spec) : chain(spec);
  const int k = static_cast<int>(skel.joints.size());

  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  SkinnedBody body;
  body.parent = skel.parent;
  body.joint_rest_positions = skel.joints;
  body.joint_names = skel.names;

  std::vector<std::vector<double>> weights;
  std::vector<Vec3> normals;
  for (size_t s = 0; s < skel.segments.size(); ++s) {
    const Segment& seg = skel.segments[s];
    const CapsuleMesh mesh = capsule(seg, spec.vertices_per_segment, 2.0 * std::numbers::pi * unit(rng));
    const Vec3 axis = (seg.end - seg.start).normalized();
    const double joint_axial = (body.joint_rest_positions[seg.joint] - seg.start).dot(axis);
    const double child_axial =
        seg.child >= 0 ? (body.joint_rest_positions[seg.child] - seg.start).dot(axis) : 0.0;

    std::vector<int> remap(mesh.points.size(), -1);
    for (size_t i = 0; i < mesh.points.size(); ++i) {
      const Vec3& p = mesh.points[i];
      bool buried = false;
      for (size_t t = 0; t < skel.segments.size() && !buried; ++t) {
        if (t != s) {
          const Segment& other = skel.segments[t];
          buried = distance_to_segment(p, other.start, other.end) < other.radius - 1e-9;
        }
      }
      if (buried) {
        continue;
      }
      std::vector<double> w(static_cast<size_t>(k), 0.0);
      const double h = spec.blend_half_width;
      const int parent = body.parent[seg.joint];
      const double u = mesh.axial[i] - joint_axial;
      double own = parent >= 0 ? smoothstep01((u + h) / (2.0 * h)) : 1.0;
      if (parent >= 0) {
        w[static_cast<size_t>(parent)] += 1.0 - own;
      }
      if (seg.child >= 0) {
        const double to_child = smoothstep01((mesh.axial[i] - child_axial + h) / (2.0 * h));
        w[static_cast<size_t>(seg.child)] += own * to_child;
        own *= 1.0 - to_child;
      }
      w[static_cast<size_t>(seg.joint)] += own;
      remap[i] = static_cast<int>(body.rest_vertices.size());
      body.rest_vertices.push_back(p);
      normals.push_back(mesh.normals[i]);
      weights.push_back(std::move(w));
    }
    for (const auto& f : mesh.faces) {
      const int a = remap[f[0]];
      const int b = remap[f[1]];
      const int c = remap[f[2]];
      if (a >= 0 && b >= 0 && c >= 0) {
        body.faces.emplace_back(a, b, c);
      }
    }
  }

  const int v = body.vertex_count();
  body.blend_weights.resize(v, k);
  for (int i = 0; i < v; ++i) {
    double sum = 0.0;
    for (int j = 0; j < k; ++j) {
      sum += weights[i][j];
    }
    for (int j = 0; j < k; ++j) {
      body.blend_weights(i, j) = weights[i][j] / sum;
    }
  }

  // Shape 0 inflates every limb along its normal; shape 1 is a smooth random
  // bulge pattern drawn from the seed.
  VertexOffsets inflate(v, 3);
  VertexOffsets bulge(v, 3);
  const Vec3 dir = Vec3(unit(rng) - 0.5, unit(rng) - 0.5, unit(rng) - 0.5).normalized();
  const double freq = 6.0 + 4.0 * unit(rng);
  const double phase = 2.0 * std::numbers::pi * unit(rng);
  for (int i = 0; i < v; ++i) {
    inflate.row(i) = 0.02 * normals[i].transpose();
    bulge.row(i) = 0.01 * std::sin(freq * dir.dot(body.rest_vertices[i]) + phase) * normals[i].transpose();
  }
  body.shape_basis = {inflate, bulge};
  validate_body(body);
  return body;
}

PosePreset parse_pose_preset(const std::string& name) {
  if (name == "T" || name == "t") {
    return PosePreset::kT;
  }
  if (name == "A" || name == "a") {
    return PosePreset::kA;
  }
  if (name == "X" || name == "x") {
    return PosePreset::kX;
  }
  throw InvalidInputError("unknown pose preset '" + name + "' (expected A, T or X)");
}

std::string to_string(PosePreset preset) {
  switch (preset) {
    case PosePreset::kT:
      return "T";
    case PosePreset::kA:
      return "A";
    case PosePreset::kX:
      return "X";
  }
  return "T";
}

PoseParams preset_pose(const SkinnedBody& body, PosePreset preset) {
  PoseParams pose = PoseParams::zero(body.joint_count());
  const double deg = std::numbers::pi / 180.0;
  double arm = 0.0;
  double leg = 0.0;
  switch (preset) {
    case PosePreset::kT:
      return pose;
    case PosePreset::kA:
      arm = -45.0 * deg;
      break;
    case PosePreset::kX:
      arm = 45.0 * deg;
      leg = 25.0 * deg;
      break;
  }
  auto set = [&](const char* name, double angle_about_z) {
    const int j = body.joint_index(name);
    if (j >= 0) {
      pose.joint_rotations[j] = Vec3(0.0, 0.0, angle_about_z);
    }
  };
  set("l_shoulder", arm);
  set("r_shoulder", -arm);
  set("l_hip", leg);
  set("r_hip", -leg);
  return pose;
}

}  // namespace anerf
