#pragma once

#include "anerf/common.hpp"
#include "anerf/deformation.hpp"
#include "anerf/renderer.hpp"

#include <cstdint>
#include <filesystem>
#include <vector>

namespace anerf {

struct Mesh {
  std::vector<Vec3> vertices;
  std::vector<Eigen::Vector3i> faces;

  void validate() const;
  bool empty() const { return faces.empty(); }
  double area() const;
  /// Signed volume; positive when faces wind counter-clockwise seen from outside.
  double volume() const;
};

struct GridSpec {
  Eigen::Vector3i resolution = Eigen::Vector3i::Constant(128);
  Eigen::AlignedBox3d bounds;
  double iso_level = 10.0;

  void validate() const;
  /// Spacing between neighboring samples along each axis.
  Vec3 spacing() const;
  double voxel_diagonal() const { return spacing().norm(); }
  Vec3 point(int i, int j, int k) const;
  std::size_t sample_count() const;
};

/// Cubic-voxel grid around a box grown by `pad` on every side.
GridSpec grid_around(const Eigen::AlignedBox3d& box, double pad, int max_resolution,
                     double iso_level);

/// Iso-surface of samples laid out x-fastest, then y, then z. Cells count as
/// inside where the value exceeds the iso level; faces are oriented outward.
Mesh marching_cubes(const std::vector<double>& values, const GridSpec& grid);

/// Densities of `field` on the grid. With `mask` set, samples outside the 3D
/// mask of that (canonical-pose) body are zero and skip the field.
std::vector<double> sample_density(const FieldEvaluator& field, const GridSpec& grid,
                                   const PosedBody* mask);

Mesh extract_mesh(const FieldEvaluator& field, const GridSpec& grid, const PosedBody* mask);

void write_obj(const Mesh& mesh, const std::filesystem::path& path);
/// Reads `v` and `f` records; polygon faces are fan-triangulated.
Mesh read_obj(const std::filesystem::path& path);

/// Exact distance from p to triangle abc.
double point_triangle_distance(const Vec3& p, const Vec3& a, const Vec3& b, const Vec3& c);

/// Bounding-volume hierarchy over the triangles of a mesh, which must outlive it.
class MeshDistance {
 public:
  explicit MeshDistance(const Mesh& mesh);
  double distance(const Vec3& p) const;

 private:
  struct Node {
    Eigen::AlignedBox3d box;
    int left = -1;
    int right = -1;
    int begin = 0;
    int end = 0;
  };
  int build(int begin, int end);

  const Mesh* mesh_;
  std::vector<int> order_;
  std::vector<Eigen::AlignedBox3d> boxes_;
  std::vector<Node> nodes_;
};

/// Area-weighted uniform points on the surface; deterministic given seed.
std::vector<Vec3> sample_surface(const Mesh& mesh, int count, std::uint64_t seed);

/// Mean distance (cm) from points sampled on source to the target surface.
double p2s_cm(const Mesh& source, const Mesh& target, int sample_count, std::uint64_t seed = 0);
/// Mean distance (cm) from the given points to the target surface.
double p2s_cm(const std::vector<Vec3>& points, const Mesh& target);
/// Symmetric mean of the two directed P2S values.
double chamfer_cm(const Mesh& a, const Mesh& b, int sample_count, std::uint64_t seed = 0);

struct Similarity {
  double scale = 1.0;
  Mat3 rotation = Mat3::Identity();
  Vec3 translation = Vec3::Zero();

  Vec3 apply(const Vec3& x) const { return scale * (rotation * x) + translation; }
  Mesh apply(const Mesh& mesh) const;
};

/// Least-squares similarity mapping source[i] onto target[i] (closed form).
Similarity align_similarity(const std::vector<Vec3>& source, const std::vector<Vec3>& target);

/// Alternates nearest-neighbor matching against `target` with closed-form
/// solves, starting from centroid and RMS-radius alignment.
Similarity align_iterative(const std::vector<Vec3>& source, const std::vector<Vec3>& target,
                           int iterations = 50);

}  // namespace anerf
