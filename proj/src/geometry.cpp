#include "anerf/geometry.hpp"

#include "anerf/parallel.hpp"
#include "anerf/text_util.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>
#include <unordered_map>

namespace anerf {

void Mesh::validate() const {
  const int n = static_cast<int>(vertices.size());
  for (const Vec3& v : vertices) {
    require(v.allFinite(), "mesh vertex is not finite");
  }
  for (const Eigen::Vector3i& f : faces) {
    for (int k = 0; k < 3; ++k) {
      require(f[k] >= 0 && f[k] < n, "mesh face index out of range");
    }
  }
}

double Mesh::area() const {
  double total = 0.0;
  for (const Eigen::Vector3i& f : faces) {
    total += 0.5 * (vertices[f[1]] - vertices[f[0]]).cross(vertices[f[2]] - vertices[f[0]]).norm();
  }
  return total;
}

double Mesh::volume() const {
  double total = 0.0;
  for (const Eigen::Vector3i& f : faces) {
    total += vertices[f[0]].dot(vertices[f[1]].cross(vertices[f[2]])) / 6.0;
  }
  return total;
}

void GridSpec::validate() const {
  require((resolution.array() >= 2).all(), "grid resolution must be >= 2 per axis");
  require(!bounds.isEmpty() && (bounds.sizes().array() > 0.0).all(),
          "grid bounds must be non-degenerate");
  require(std::isfinite(iso_level), "iso_level must be finite");
}

Vec3 GridSpec::spacing() const {
  return bounds.sizes().cwiseQuotient((resolution.array() - 1).cast<double>().matrix());
}

Vec3 GridSpec::point(int i, int j, int k) const {
  return bounds.min() + spacing().cwiseProduct(Vec3(i, j, k));
}

std::size_t GridSpec::sample_count() const {
  return static_cast<std::size_t>(resolution.x()) * resolution.y() * resolution.z();
}

GridSpec grid_around(const Eigen::AlignedBox3d& box, double pad, int max_resolution,
                     double iso_level) {
  require(!box.isEmpty(), "grid_around needs a non-empty box");
  require(max_resolution >= 2, "grid resolution must be >= 2");
  GridSpec g;
  g.bounds = Eigen::AlignedBox3d(box.min().array() - pad, box.max().array() + pad);
  const double step = g.bounds.sizes().maxCoeff() / (max_resolution - 1);
  for (int a = 0; a < 3; ++a) {
    const int n = std::max(2, static_cast<int>(std::ceil(g.bounds.sizes()[a] / step)) + 1);
    g.resolution[a] = n;
    const double mid = 0.5 * (g.bounds.min()[a] + g.bounds.max()[a]);
    g.bounds.min()[a] = mid - 0.5 * step * (n - 1);
    g.bounds.max()[a] = mid + 0.5 * step * (n - 1);
  }
  g.iso_level = iso_level;
  g.validate();
  return g;
}

// ---------------------------------------------------------------------------
// Marching cubes
// ---------------------------------------------------------------------------

namespace {

struct CubeTables {
  /// Corner c sits at (c & 1, c >> 1 & 1, c >> 2 & 1).
  std::array<std::array<int, 2>, 12> edges{};
  std::array<int, 12> edge_axis{};
  /// Polygons per inside-corner mask, as lists of cube edges.
  std::array<std::vector<std::vector<int>>, 256> polygons;
};

bool share_face(int e, int f, const CubeTables& t) {
  for (int axis = 0; axis < 3; ++axis) {
    const int bits[4] = {t.edges[e][0] >> axis & 1, t.edges[e][1] >> axis & 1, t.edges[f][0] >> axis & 1,
                   t.edges[f][1] >> axis & 1};
    if (bits[0] == bits[1] && bits[1] == bits[2] && bits[2] == bits[3]) {
      return true;
    }
  }
  return false;
}

/// Rotates a loop so no fan chord runs along a cube face, where it could
/// coincide with an edge of the neighboring cell.
std::vector<int> fan_start(const std::vector<int>& loop, const CubeTables& t) {
  const size_t n = loop.size();
  for (size_t r = 0; r < n; ++r) {
    bool clean = true;
    for (size_t m = 2; m + 1 < n && clean; ++m) {
      clean = !share_face(loop[r], loop[(r + m) % n], t);
    }
    if (clean) {
      std::vector<int> out(n);
      for (size_t i = 0; i < n; ++i) {
        out[i] = loop[(r + i) % n];
      }
      return out;
    }
  }
  throw std::logic_error("no clean fan for marching cubes loop");
}

CubeTables build_tables() {
  CubeTables t;
  int e = 0;
  std::array<std::array<int, 8>, 8> edge_of{};
  for (auto& row : edge_of) {
    row.fill(-1);
  }
  for (int axis = 0; axis < 3; ++axis) {
    for (int c = 0; c < 8; ++c) {
      if ((c >> axis & 1) == 0) {
        const int d = c | 1 << axis;
        t.edges[e] = {c, d};
        t.edge_axis[e] = axis;
        edge_of[c][d] = edge_of[d][c] = e;
        ++e;
      }
    }
  }
  // Faces with corners counter-clockwise seen from outside the cube.
  std::vector<std::array<int, 4>> faces;
  for (int axis = 0; axis < 3; ++axis) {
    const int u = (axis + 1) % 3;
    const int v = (axis + 2) % 3;
    for (int side = 0; side < 2; ++side) {
      std::array<int, 4> f{};
      const int uv[4][2] = {{0, 0}, {1, 0}, {1, 1}, {0, 1}};
      for (int k = 0; k < 4; ++k) {
        f[k] = side << axis | uv[k][0] << u | uv[k][1] << v;
      }
      if (side == 0) {
        std::reverse(f.begin(), f.end());
      }
      faces.push_back(f);
    }
  }
  for (int mask = 1; mask < 255; ++mask) {
    auto inside = [&](int c) { return (mask >> c & 1) != 0; };
    std::array<int, 12> next{};
    next.fill(-1);
    for (const auto& f : faces) {
      // Pair each entry into the inside region with the next exit, which
      // keeps diagonally opposite inside corners apart.
      for (int k = 0; k < 4; ++k) {
        if (inside(f[k]) || !inside(f[(k + 1) % 4])) {
          continue;
        }
        for (int m = 1; m < 4; ++m) {
          const int a = f[(k + m) % 4];
          const int b = f[(k + m + 1) % 4];
          if (inside(a) && !inside(b)) {
            next[edge_of[f[k]][f[(k + 1) % 4]]] = edge_of[a][b];
            break;
          }
        }
      }
    }
    std::array<bool, 12> used{};
    for (int start = 0; start < 12; ++start) {
      if (next[start] == -1 || used[start]) {
        continue;
      }
      std::vector<int> loop;
      for (int cur = start; !used[cur]; cur = next[cur]) {
        used[cur] = true;
        loop.push_back(cur);
      }
      t.polygons[mask].push_back(fan_start(loop, t));
    }
  }
  return t;
}

const CubeTables& cube_tables() {
  static const CubeTables tables = build_tables();
  return tables;
}

}  // namespace

Mesh marching_cubes(const std::vector<double>& values, const GridSpec& grid) {
  grid.validate();
  require(values.size() == grid.sample_count(), "marching cubes needs one value per grid point");
  const CubeTables& t = cube_tables();
  const int nx = grid.resolution.x();
  const int ny = grid.resolution.y();
  const int nz = grid.resolution.z();
  const double iso = grid.iso_level;
  auto lin = [&](int i, int j, int k) {
    return (static_cast<std::int64_t>(k) * ny + j) * nx + i;
  };
  Mesh mesh;
  std::unordered_map<std::int64_t, int> vertex_of_edge;
  std::array<std::int64_t, 8> corner_index{};
  std::array<double, 8> corner_value{};
  std::array<int, 12> cell_vertex{};
  for (int k = 0; k + 1 < nz; ++k) {
    for (int j = 0; j + 1 < ny; ++j) {
      for (int i = 0; i + 1 < nx; ++i) {
        int mask = 0;
        for (int c = 0; c < 8; ++c) {
          corner_index[c] = lin(i + (c & 1), j + (c >> 1 & 1), k + (c >> 2 & 1));
          corner_value[c] = values[static_cast<size_t>(corner_index[c])];
          if (corner_value[c] > iso) {
            mask |= 1 << c;
          }
        }
        if (mask == 0 || mask == 255) {
          continue;
        }
        cell_vertex.fill(-1);
        for (const std::vector<int>& loop : t.polygons[mask]) {
          for (int e : loop) {
            const int a = t.edges[e][0];
            const int b = t.edges[e][1];
            const std::int64_t key = corner_index[a] * 3 + t.edge_axis[e];
            auto [it, fresh] = vertex_of_edge.try_emplace(key, static_cast<int>(mesh.vertices.size()));
            if (fresh) {
              const Vec3 pa = grid.point(i + (a & 1), j + (a >> 1 & 1), k + (a >> 2 & 1));
              const Vec3 pb = grid.point(i + (b & 1), j + (b >> 1 & 1), k + (b >> 2 & 1));
              const double s = (iso - corner_value[a]) / (corner_value[b] - corner_value[a]);
              mesh.vertices.push_back(pa + std::clamp(s, 0.0, 1.0) * (pb - pa));
            }
            cell_vertex[e] = it->second;
          }
          for (size_t m = 1; m + 1 < loop.size(); ++m) {
            mesh.faces.emplace_back(cell_vertex[loop[0]], cell_vertex[loop[m]],
                                    cell_vertex[loop[m + 1]]);
          }
        }
      }
    }
  }
  return mesh;
}

std::vector<double> sample_density(const FieldEvaluator& field, const GridSpec& grid,
                                   const PosedBody* mask) {
  grid.validate();
  const std::size_t total = grid.sample_count();
  const int nx = grid.resolution.x();
  const int ny = grid.resolution.y();
  std::vector<double> out(total, 0.0);
  constexpr std::size_t kChunk = 1 << 16;
  std::vector<char> keep;
  for (std::size_t begin = 0; begin < total; begin += kChunk) {
    const int n = static_cast<int>(std::min(kChunk, total - begin));
    keep.assign(static_cast<size_t>(n), 1);
    auto position = [&](std::size_t idx) {
      const int i = static_cast<int>(idx % nx);
      const int j = static_cast<int>(idx / nx % ny);
      const int k = static_cast<int>(idx / (static_cast<std::size_t>(nx) * ny));
      return grid.point(i, j, k);
    };
    if (mask != nullptr) {
      parallel_for(0, n, [&](int p) { keep[p] = mask_indicator(position(begin + p), *mask); });
    }
    const int active = static_cast<int>(std::count(keep.begin(), keep.end(), 1));
    if (active == 0) {
      continue;
    }
    Eigen::Matrix3Xd points(3, active);
    int a = 0;
    for (int p = 0; p < n; ++p) {
      if (keep[p]) {
        points.col(a++) = position(begin + p);
      }
    }
    Eigen::Matrix3Xd color;
    VecX sigma;
    field.evaluate(points, Eigen::Matrix3Xd::Zero(3, active), color, sigma);
    a = 0;
    for (int p = 0; p < n; ++p) {
      if (keep[p]) {
        out[begin + p] = sigma[a++];
      }
    }
  }
  return out;
}

Mesh extract_mesh(const FieldEvaluator& field, const GridSpec& grid, const PosedBody* mask) {
  return marching_cubes(sample_density(field, grid, mask), grid);
}

void write_obj(const Mesh& mesh, const std::filesystem::path& path) {
  mesh.validate();
  if (path.has_parent_path()) {
    std::filesystem::create_directories(path.parent_path());
  }
  std::ofstream out(path);
  if (!out) {
    throw IoError("cannot write mesh " + path.string());
  }
  for (const Vec3& v : mesh.vertices) {
    out << "v " << format_double(v.x()) << ' ' << format_double(v.y()) << ' '
        << format_double(v.z()) << '\n';
  }
  for (const Eigen::Vector3i& f : mesh.faces) {
    out << "f " << f[0] + 1 << ' ' << f[1] + 1 << ' ' << f[2] + 1 << '\n';
  }
  if (!out) {
    throw IoError("failed writing mesh " + path.string());
  }
}

Mesh read_obj(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) {
    throw IoError("cannot open mesh " + path.string());
  }
  Mesh mesh;
  std::string line;
  int line_no = 0;
  auto fail = [&](const std::string& what) {
    throw ParseError(path.string() + " line " + std::to_string(line_no) + ": " + what);
  };
  while (std::getline(in, line)) {
    ++line_no;
    const auto tokens = split_whitespace(line);
    if (tokens.empty() || tokens[0][0] == '#') {
      continue;
    }
    if (tokens[0] == "v") {
      if (tokens.size() < 4) {
        fail("vertex needs three coordinates");
      }
      Vec3 v;
      for (int a = 0; a < 3; ++a) {
        if (!parse_double(tokens[1 + a], v[a])) {
          fail("bad number '" + tokens[1 + a] + "'");
        }
      }
      mesh.vertices.push_back(v);
    } else if (tokens[0] == "f") {
      if (tokens.size() < 4) {
        fail("face needs at least three vertices");
      }
      std::vector<int> idx;
      for (size_t m = 1; m < tokens.size(); ++m) {
        const std::string head = tokens[m].substr(0, tokens[m].find('/'));
        long long v = 0;
        if (!parse_int(head, v) || v == 0) {
          fail("bad face index '" + tokens[m] + "'");
        }
        idx.push_back(static_cast<int>(v > 0 ? v - 1 : static_cast<long long>(mesh.vertices.size()) + v));
      }
      for (size_t m = 1; m + 1 < idx.size(); ++m) {
        mesh.faces.emplace_back(idx[0], idx[m], idx[m + 1]);
      }
    }
  }
  try {
    mesh.validate();
  } catch (const InvalidInputError& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
  return mesh;
}

// ---------------------------------------------------------------------------
// Distances
// ---------------------------------------------------------------------------

double point_triangle_distance(const Vec3& p, const Vec3& a, const Vec3& b, const Vec3& c) {
  const Vec3 ab = b - a;
  const Vec3 ac = c - a;
  const Vec3 ap = p - a;
  const double d1 = ab.dot(ap);
  const double d2 = ac.dot(ap);
  if (d1 <= 0.0 && d2 <= 0.0) {
    return ap.norm();
  }
  const Vec3 bp = p - b;
  const double d3 = ab.dot(bp);
  const double d4 = ac.dot(bp);
  if (d3 >= 0.0 && d4 <= d3) {
    return bp.norm();
  }
  const double vc = d1 * d4 - d3 * d2;
  if (vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0) {
    const double v = d1 / (d1 - d3);
    return (p - (a + v * ab)).norm();
  }
  const Vec3 cp = p - c;
  const double d5 = ab.dot(cp);
  const double d6 = ac.dot(cp);
  if (d6 >= 0.0 && d5 <= d6) {
    return cp.norm();
  }
  const double vb = d5 * d2 - d1 * d6;
  if (vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0) {
    const double w = d2 / (d2 - d6);
    return (p - (a + w * ac)).norm();
  }
  const double va = d3 * d6 - d5 * d4;
  if (va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0) {
    const double w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
    return (p - (b + w * (c - b))).norm();
  }
  const double denom = 1.0 / (va + vb + vc);
  const double v = vb * denom;
  const double w = vc * denom;
  return (p - (a + ab * v + ac * w)).norm();
}

MeshDistance::MeshDistance(const Mesh& mesh) : mesh_(&mesh) {
  mesh.validate();
  require(!mesh.empty(), "distance queries need a non-empty mesh");
  const int n = static_cast<int>(mesh.faces.size());
  order_.resize(static_cast<size_t>(n));
  std::iota(order_.begin(), order_.end(), 0);
  boxes_.resize(static_cast<size_t>(n));
  for (int f = 0; f < n; ++f) {
    for (int k = 0; k < 3; ++k) {
      boxes_[f].extend(mesh.vertices[mesh.faces[f][k]]);
    }
  }
  nodes_.reserve(static_cast<size_t>(2 * n));
  build(0, n);
}

int MeshDistance::build(int begin, int end) {
  const int id = static_cast<int>(nodes_.size());
  nodes_.emplace_back();
  Eigen::AlignedBox3d box;
  for (int i = begin; i < end; ++i) {
    box.extend(boxes_[order_[i]]);
  }
  nodes_[id].box = box;
  nodes_[id].begin = begin;
  nodes_[id].end = end;
  if (end - begin <= 4) {
    return id;
  }
  int axis = 0;
  box.sizes().maxCoeff(&axis);
  const int mid = (begin + end) / 2;
  std::nth_element(order_.begin() + begin, order_.begin() + mid, order_.begin() + end,
                   [&](int a, int b) {
                     const double ca = boxes_[a].center()[axis];
                     const double cb = boxes_[b].center()[axis];
                     return ca < cb || (ca == cb && a < b);
                   });
  const int left = build(begin, mid);
  const int right = build(mid, end);
  nodes_[id].left = left;
  nodes_[id].right = right;
  return id;
}

double MeshDistance::distance(const Vec3& p) const {
  double best = std::numeric_limits<double>::infinity();
  std::vector<int> stack{0};
  while (!stack.empty()) {
    const Node& node = nodes_[stack.back()];
    stack.pop_back();
    if (node.box.exteriorDistance(p) >= best) {
      continue;
    }
    if (node.left < 0) {
      for (int i = node.begin; i < node.end; ++i) {
        const Eigen::Vector3i& f = mesh_->faces[order_[i]];
        best = std::min(best, point_triangle_distance(p, mesh_->vertices[f[0]],
                                                      mesh_->vertices[f[1]],
                                                      mesh_->vertices[f[2]]));
      }
      continue;
    }
    const double dl = nodes_[node.left].box.exteriorDistance(p);
    const double dr = nodes_[node.right].box.exteriorDistance(p);
    if (dl < dr) {
      stack.push_back(node.right);
      stack.push_back(node.left);
    } else {
      stack.push_back(node.left);
      stack.push_back(node.right);
    }
  }
  return best;
}

std::vector<Vec3> sample_surface(const Mesh& mesh, int count, std::uint64_t seed) {
  mesh.validate();
  require(!mesh.empty(), "cannot sample an empty mesh");
  require(count >= 1, "sample count must be >= 1");
  std::vector<double> cumulative(mesh.faces.size());
  double total = 0.0;
  for (size_t f = 0; f < mesh.faces.size(); ++f) {
    const auto& t = mesh.faces[f];
    total += 0.5 * (mesh.vertices[t[1]] - mesh.vertices[t[0]])
                       .cross(mesh.vertices[t[2]] - mesh.vertices[t[0]])
                       .norm();
    cumulative[f] = total;
  }
  require(total > 0.0, "cannot sample a mesh with zero area");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::vector<Vec3> out;
  out.reserve(static_cast<size_t>(count));
  for (int s = 0; s < count; ++s) {
    const double pick = unit(rng) * total;
    const size_t f = std::min<size_t>(
        static_cast<size_t>(std::upper_bound(cumulative.begin(), cumulative.end(), pick) -
                            cumulative.begin()),
        cumulative.size() - 1);
    const double r1 = std::sqrt(unit(rng));
    const double r2 = unit(rng);
    const auto& t = mesh.faces[f];
    out.push_back((1.0 - r1) * mesh.vertices[t[0]] + r1 * (1.0 - r2) * mesh.vertices[t[1]] +
                  r1 * r2 * mesh.vertices[t[2]]);
  }
  return out;
}

double p2s_cm(const std::vector<Vec3>& points, const Mesh& target) {
  require(!points.empty(), "p2s needs at least one point");
  const MeshDistance dist(target);
  std::vector<double> d(points.size());
  parallel_for(0, static_cast<int>(points.size()), [&](int i) { d[i] = dist.distance(points[i]); });
  double sum = 0.0;
  for (double v : d) {
    sum += v;
  }
  return 100.0 * sum / static_cast<double>(points.size());
}

double p2s_cm(const Mesh& source, const Mesh& target, int sample_count, std::uint64_t seed) {
  return p2s_cm(sample_surface(source, sample_count, seed), target);
}

double chamfer_cm(const Mesh& a, const Mesh& b, int sample_count, std::uint64_t seed) {
  return 0.5 * (p2s_cm(a, b, sample_count, seed) + p2s_cm(b, a, sample_count, seed));
}

// ---------------------------------------------------------------------------
// Registration
// ---------------------------------------------------------------------------

Mesh Similarity::apply(const Mesh& mesh) const {
  Mesh out = mesh;
  for (Vec3& v : out.vertices) {
    v = apply(v);
  }
  return out;
}

Similarity align_similarity(const std::vector<Vec3>& source, const std::vector<Vec3>& target) {
  require(source.size() == target.size(), "alignment needs one target per source point");
  require(source.size() >= 3, "alignment needs at least 3 correspondences");
  const double n = static_cast<double>(source.size());
  Vec3 mu_s = Vec3::Zero();
  Vec3 mu_t = Vec3::Zero();
  for (size_t i = 0; i < source.size(); ++i) {
    mu_s += source[i];
    mu_t += target[i];
  }
  mu_s /= n;
  mu_t /= n;
  Mat3 cov = Mat3::Zero();
  Mat3 spread = Mat3::Zero();
  double var_s = 0.0;
  for (size_t i = 0; i < source.size(); ++i) {
    const Vec3 s = source[i] - mu_s;
    cov += (target[i] - mu_t) * s.transpose();
    spread += s * s.transpose();
    var_s += s.squaredNorm();
  }
  cov /= n;
  var_s /= n;
  const Eigen::JacobiSVD<Mat3> spread_svd(spread);
  const Vec3 sv = spread_svd.singularValues();
  require(var_s > 0.0 && sv[1] > 1e-12 * sv[0],
          "alignment source points are degenerate (coincident or collinear)");
  const Eigen::JacobiSVD<Mat3> svd(cov, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Mat3 d = Mat3::Identity();
  if (svd.matrixU().determinant() * svd.matrixV().determinant() < 0.0) {
    d(2, 2) = -1.0;
  }
  Similarity out;
  out.rotation = svd.matrixU() * d * svd.matrixV().transpose();
  out.scale = (svd.singularValues().asDiagonal() * d).trace() / var_s;
  out.translation = mu_t - out.scale * out.rotation * mu_s;
  return out;
}

Similarity align_iterative(const std::vector<Vec3>& source, const std::vector<Vec3>& target,
                           int iterations) {
  require(source.size() >= 3 && target.size() >= 3, "alignment needs at least 3 points");
  require(iterations >= 1, "alignment needs at least one iteration");
  auto centroid = [](const std::vector<Vec3>& pts) {
    Vec3 m = Vec3::Zero();
    for (const Vec3& p : pts) {
      m += p;
    }
    return Vec3(m / static_cast<double>(pts.size()));
  };
  auto rms = [](const std::vector<Vec3>& pts, const Vec3& m) {
    double s = 0.0;
    for (const Vec3& p : pts) {
      s += (p - m).squaredNorm();
    }
    return std::sqrt(s / static_cast<double>(pts.size()));
  };
  const Vec3 ms = centroid(source);
  const Vec3 mt = centroid(target);
  const double rs = rms(source, ms);
  require(rs > 0.0, "alignment source points are degenerate");
  Similarity current;
  current.scale = rms(target, mt) / rs;
  current.translation = mt - current.scale * ms;
  const SpatialIndex index(target);
  std::vector<Vec3> matched(source.size());
  for (int it = 0; it < iterations; ++it) {
    parallel_for(0, static_cast<int>(source.size()), [&](int i) {
      SpatialIndex::Neighbor nb{};
      index.knn(current.apply(source[i]), 1, &nb);
      matched[i] = target[static_cast<size_t>(nb.index)];
    });
    const Similarity next = align_similarity(source, matched);
    const double change = std::abs(next.scale - current.scale) +
                          (next.rotation - current.rotation).norm() +
                          (next.translation - current.translation).norm();
    current = next;
    if (change < 1e-12) {
      break;
    }
  }
  return current;
}

}  // namespace anerf
