#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <initializer_list>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "pcgan/tensor.hpp"

namespace pcgan {

namespace fs = std::filesystem;

/// Triangle mesh with per-vertex RGB in [0, 1]. Per-face colours are stored
/// by giving each face its own copies of its vertices.
struct ColoredMesh {
  std::vector<std::array<double, 3>> vertices;
  std::vector<std::array<double, 3>> colors;
  std::vector<std::array<std::uint32_t, 3>> faces;

  /// Appends a triangle with a flat colour.
  void add_triangle(const std::array<double, 3>& a, const std::array<double, 3>& b,
                    const std::array<double, 3>& c, const std::array<double, 3>& rgb);
  double face_area(std::size_t face) const;
  double total_area() const;
  /// Throws DataError on bad indices or a colour count mismatch.
  void validate() const;
};

/// N rows of (x, y, z, r, g, b) plus a class label (-1 when unknown).
struct PointCloud {
  std::vector<double> points;
  int label = -1;

  PointCloud() = default;
  explicit PointCloud(std::size_t n, int label = -1) : points(n * 6, 0.0), label(label) {}

  std::size_t size() const { return points.size() / 6; }
  double& at(std::size_t i, std::size_t c) { return points[i * 6 + c]; }
  double at(std::size_t i, std::size_t c) const { return points[i * 6 + c]; }
};

/// Stacks equally sized clouds into a [batch, n, 6] tensor.
Tensor to_tensor(const std::vector<const PointCloud*>& clouds);
Tensor to_tensor(const std::vector<PointCloud>& clouds);
/// Splits a [batch, n, 6] tensor back into clouds.
std::vector<PointCloud> from_tensor(const Tensor& batch, const std::vector<int>& labels = {});

/// Area-weighted surface sample: a face is chosen with probability
/// proportional to its area, then a uniform barycentric point on it; colours
/// are interpolated barycentrically. Chosen faces are reported if requested.
PointCloud sample_surface(const ColoredMesh& mesh, std::size_t n, std::uint64_t seed,
                          std::vector<std::size_t>* chosen_faces = nullptr);

/// Centres the bounding box at the origin and scales by 1 / (largest edge).
/// A single point (or a zero-extent cloud) is only translated.
void normalize_positions(PointCloud& cloud);
/// normalize_positions, then maps colours from [0, 1] to [-0.5, 0.5].
void normalize(PointCloud& cloud);

// ---- PLY -------------------------------------------------------------------

enum class PlyPositionType { Float32, Float64 };

/// Binary little-endian PLY; colours as uchar via round-half-up of
/// (c + 0.5) * 255. The label is kept in a "comment label" header line.
void write_ply(const PointCloud& cloud, const fs::path& path,
               PlyPositionType position_type = PlyPositionType::Float64);
std::string encode_ply(const PointCloud& cloud, PlyPositionType position_type = PlyPositionType::Float64);
/// Reads binary (either endianness) or ASCII PLY vertices.
PointCloud read_ply(const fs::path& path);
PointCloud decode_ply(const std::string& bytes);

std::uint8_t color_to_byte(double c);
double byte_to_color(std::uint8_t b);

// ---- meshes ----------------------------------------------------------------

/// Wavefront OBJ: "v x y z [r g b]" vertex colours or material diffuse (Kd)
/// colours via mtllib/usemtl. Polygons are fan-triangulated.
ColoredMesh read_obj(const fs::path& path);
/// PLY mesh with per-vertex red/green/blue (uchar or float) and a face list.
ColoredMesh read_ply_mesh(const fs::path& path);
/// Dispatches on extension (.obj, .ply). Meshes without colour raise DataError.
ColoredMesh read_mesh(const fs::path& path);

// ---- procedural dataset ------------------------------------------------------

struct ProceduralClass {
  std::string name;
  std::string shape;  // "box" or "table"
  std::array<double, 3> primary{0.8, 0.2, 0.2};    // box body / table top
  std::array<double, 3> secondary{0.9, 0.9, 0.2};  // box top / table legs
  double color_jitter = 0.05;
};

struct ProceduralSpec {
  std::vector<ProceduralClass> classes;
  std::size_t samples_per_class = 32;
  std::vector<std::size_t> resolutions{1024, 2048, 4096, 8192};

  /// Two classes: red boxes with yellow tops, blue-topped tables with brown legs.
  static ProceduralSpec desk_default();
  void validate() const;
};

void to_json(nlohmann::json& j, const ProceduralSpec& spec);
void from_json(const nlohmann::json& j, ProceduralSpec& spec);

/// Mesh of one procedural sample; shape proportions and colours vary by seed.
ColoredMesh make_procedural_mesh(const ProceduralClass& cls, std::uint64_t seed);

struct ManifestSample {
  int class_id = 0;
  std::string id;
  std::map<std::size_t, std::string> paths;  // resolution -> path relative to the dataset dir
};

struct DatasetManifest {
  std::vector<std::string> classes;  // index is the class id
  std::vector<std::size_t> resolutions;
  std::vector<ManifestSample> samples;

  std::size_t count(int class_id) const;
  int class_id(const std::string& name) const;  // UsageError if unknown
  /// DataError unless every sample has a file at every listed resolution.
  void verify(const fs::path& dataset_dir, const std::vector<std::size_t>& required) const;

  void save(const fs::path& dataset_dir) const;
  static DatasetManifest load(const fs::path& dataset_dir);
};

void to_json(nlohmann::json& j, const DatasetManifest& m);
void from_json(const nlohmann::json& j, DatasetManifest& m);

/// Samples meshes, normalizes, and writes dataset_dir/<class>/<id>/<res>.ply
/// plus manifest.json.
DatasetManifest make_procedural_dataset(const ProceduralSpec& spec, const fs::path& dataset_dir,
                                        std::uint64_t seed);

/// Same layout from a directory of meshes: meshes_dir/<class>/<file>.{obj,ply}.
/// Meshes without colour information are skipped and reported in `skipped`.
DatasetManifest ingest_meshes(const fs::path& meshes_dir, const fs::path& dataset_dir,
                              const std::vector<std::size_t>& resolutions, std::uint64_t seed,
                              std::vector<std::string>* skipped = nullptr);

/// Every cloud of the dataset at one resolution, in manifest order.
std::vector<PointCloud> load_clouds(const fs::path& dataset_dir, const DatasetManifest& manifest,
                                    std::size_t resolution);

/// Deterministic 64-bit mix of a base seed with further keys.
std::uint64_t derive_seed(std::uint64_t base, std::initializer_list<std::uint64_t> keys);
std::uint64_t derive_seed(std::uint64_t base, std::span<const std::uint64_t> keys);

}  // namespace pcgan
