#include "pcgan/data.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <random>
#include <sstream>
#include <unordered_map>

#include "pcgan/errors.hpp"

namespace pcgan {

// ---- mesh ------------------------------------------------------------------

void ColoredMesh::add_triangle(const std::array<double, 3>& a, const std::array<double, 3>& b,
                               const std::array<double, 3>& c, const std::array<double, 3>& rgb) {
  const auto base = static_cast<std::uint32_t>(vertices.size());
  for (const auto* p : {&a, &b, &c}) {
    vertices.push_back(*p);
    colors.push_back(rgb);
  }
  faces.push_back({base, base + 1, base + 2});
}

double ColoredMesh::face_area(std::size_t face) const {
  const auto& f = faces.at(face);
  const auto& a = vertices[f[0]];
  const auto& b = vertices[f[1]];
  const auto& c = vertices[f[2]];
  const double u[3] = {b[0] - a[0], b[1] - a[1], b[2] - a[2]};
  const double v[3] = {c[0] - a[0], c[1] - a[1], c[2] - a[2]};
  const double x = u[1] * v[2] - u[2] * v[1];
  const double y = u[2] * v[0] - u[0] * v[2];
  const double z = u[0] * v[1] - u[1] * v[0];
  return 0.5 * std::sqrt(x * x + y * y + z * z);
}

double ColoredMesh::total_area() const {
  double s = 0;
  for (std::size_t f = 0; f < faces.size(); ++f) s += face_area(f);
  return s;
}

void ColoredMesh::validate() const {
  if (colors.size() != vertices.size())
    throw DataError("mesh: " + std::to_string(colors.size()) + " colours for " + std::to_string(vertices.size()) +
                    " vertices");
  for (std::size_t f = 0; f < faces.size(); ++f)
    for (auto v : faces[f])
      if (v >= vertices.size())
        throw DataError("mesh: face " + std::to_string(f) + " references vertex " + std::to_string(v) + " of " +
                        std::to_string(vertices.size()));
}

// ---- clouds <-> tensors ----------------------------------------------------------

Tensor to_tensor(const std::vector<const PointCloud*>& clouds) {
  if (clouds.empty()) throw ShapeError("to_tensor: no clouds");
  const std::size_t n = clouds.front()->size();
  std::vector<Real> v;
  v.reserve(clouds.size() * n * 6);
  for (const auto* c : clouds) {
    if (c->size() != n)
      throw ShapeError("to_tensor: clouds of " + std::to_string(n) + " and " + std::to_string(c->size()) + " points");
    for (double x : c->points) v.push_back(static_cast<Real>(x));
  }
  return Tensor({clouds.size(), n, 6}, std::move(v));
}

Tensor to_tensor(const std::vector<PointCloud>& clouds) {
  std::vector<const PointCloud*> ptrs;
  for (const auto& c : clouds) ptrs.push_back(&c);
  return to_tensor(ptrs);
}

std::vector<PointCloud> from_tensor(const Tensor& batch, const std::vector<int>& labels) {
  if (batch.rank() != 3 || batch.size(2) != 6)
    throw ShapeError("from_tensor: expected [batch, n, 6], got " + shape_string(batch.shape()));
  const std::size_t b = batch.size(0), n = batch.size(1);
  if (!labels.empty() && labels.size() != b) throw ShapeError("from_tensor: label count mismatch");
  std::vector<PointCloud> out;
  const auto v = batch.values();
  for (std::size_t i = 0; i < b; ++i) {
    PointCloud c(n, labels.empty() ? -1 : labels[i]);
    for (std::size_t k = 0; k < n * 6; ++k) c.points[k] = static_cast<double>(v[i * n * 6 + k]);
    out.push_back(std::move(c));
  }
  return out;
}

// ---- sampling and normalization ------------------------------------------------

PointCloud sample_surface(const ColoredMesh& mesh, std::size_t n, std::uint64_t seed,
                          std::vector<std::size_t>* chosen_faces) {
  mesh.validate();
  if (n == 0) throw UsageError("sample_surface: N must be at least 1");
  std::vector<double> areas(mesh.faces.size());
  for (std::size_t f = 0; f < areas.size(); ++f) areas[f] = mesh.face_area(f);
  double total = 0;
  for (double a : areas) total += a;
  if (!(total > 0)) throw DataError("sample_surface: mesh has zero total area");

  std::mt19937_64 rng(seed);
  std::discrete_distribution<std::size_t> pick_face(areas.begin(), areas.end());
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  PointCloud cloud(n);
  if (chosen_faces) chosen_faces->assign(n, 0);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t f = pick_face(rng);
    double u = unit(rng), v = unit(rng);
    if (u + v > 1) {
      u = 1 - u;
      v = 1 - v;
    }
    const double w = 1 - u - v;
    const auto& face = mesh.faces[f];
    for (std::size_t c = 0; c < 3; ++c) {
      cloud.at(i, c) = w * mesh.vertices[face[0]][c] + u * mesh.vertices[face[1]][c] + v * mesh.vertices[face[2]][c];
      cloud.at(i, 3 + c) = w * mesh.colors[face[0]][c] + u * mesh.colors[face[1]][c] + v * mesh.colors[face[2]][c];
    }
    if (chosen_faces) (*chosen_faces)[i] = f;
  }
  return cloud;
}

void normalize_positions(PointCloud& cloud) {
  if (cloud.size() == 0) throw DataError("normalize: empty cloud");
  double lo[3], hi[3];
  for (std::size_t c = 0; c < 3; ++c) lo[c] = hi[c] = cloud.at(0, c);
  for (std::size_t i = 1; i < cloud.size(); ++i)
    for (std::size_t c = 0; c < 3; ++c) {
      lo[c] = std::min(lo[c], cloud.at(i, c));
      hi[c] = std::max(hi[c], cloud.at(i, c));
    }
  double extent = 0;
  for (std::size_t c = 0; c < 3; ++c) extent = std::max(extent, hi[c] - lo[c]);
  const double scale = extent > 0 ? 1.0 / extent : 1.0;
  for (std::size_t i = 0; i < cloud.size(); ++i)
    for (std::size_t c = 0; c < 3; ++c) {
      const double mid = 0.5 * (lo[c] + hi[c]);
      // rounding may overshoot the half-extent by an ulp
      cloud.at(i, c) = std::clamp((cloud.at(i, c) - mid) * scale, -0.5, 0.5);
    }
}

void normalize(PointCloud& cloud) {
  normalize_positions(cloud);
  for (std::size_t i = 0; i < cloud.size(); ++i)
    for (std::size_t c = 3; c < 6; ++c) cloud.at(i, c) = std::clamp(cloud.at(i, c), 0.0, 1.0) - 0.5;
}

// ---- PLY -------------------------------------------------------------------

std::uint8_t color_to_byte(double c) {
  const double scaled = std::floor((c + 0.5) * 255.0 + 0.5);
  return static_cast<std::uint8_t>(std::clamp(scaled, 0.0, 255.0));
}

double byte_to_color(std::uint8_t b) { return static_cast<double>(b) / 255.0 - 0.5; }

namespace {

enum class PlyType { Int8, UInt8, Int16, UInt16, Int32, UInt32, Float32, Float64 };

PlyType parse_ply_type(const std::string& t) {
  static const std::unordered_map<std::string, PlyType> types{
      {"char", PlyType::Int8},     {"int8", PlyType::Int8},       {"uchar", PlyType::UInt8},
      {"uint8", PlyType::UInt8},   {"short", PlyType::Int16},     {"int16", PlyType::Int16},
      {"ushort", PlyType::UInt16}, {"uint16", PlyType::UInt16},   {"int", PlyType::Int32},
      {"int32", PlyType::Int32},   {"uint", PlyType::UInt32},     {"uint32", PlyType::UInt32},
      {"float", PlyType::Float32}, {"float32", PlyType::Float32}, {"double", PlyType::Float64},
      {"float64", PlyType::Float64}};
  auto it = types.find(t);
  if (it == types.end()) throw DataError("ply: unknown property type '" + t + "'");
  return it->second;
}

std::size_t ply_type_size(PlyType t) {
  switch (t) {
    case PlyType::Int8:
    case PlyType::UInt8: return 1;
    case PlyType::Int16:
    case PlyType::UInt16: return 2;
    case PlyType::Int32:
    case PlyType::UInt32:
    case PlyType::Float32: return 4;
    case PlyType::Float64: return 8;
  }
  return 0;
}

struct PlyProperty {
  std::string name;
  PlyType type = PlyType::Float64;
  bool is_list = false;
  PlyType count_type = PlyType::UInt8;
};

struct PlyElement {
  std::string name;
  std::size_t count = 0;
  std::vector<PlyProperty> properties;
  std::vector<double> scalars;                // count x (number of scalar properties)
  std::vector<std::vector<double>> lists;     // first list property, one entry per row
  std::size_t scalar_count() const {
    return static_cast<std::size_t>(std::count_if(properties.begin(), properties.end(),
                                                  [](const auto& p) { return !p.is_list; }));
  }
  /// Column among the scalar properties, or -1.
  int column(std::initializer_list<const char*> names) const {
    int col = 0;
    for (const auto& p : properties) {
      if (p.is_list) continue;
      for (const char* n : names)
        if (p.name == n) return col;
      ++col;
    }
    return -1;
  }
  PlyType type_of(int column) const {
    int col = 0;
    for (const auto& p : properties) {
      if (p.is_list) continue;
      if (col++ == column) return p.type;
    }
    return PlyType::Float64;
  }
};

struct PlyFile {
  enum class Format { Ascii, BinaryLittle, BinaryBig } format = Format::BinaryLittle;
  std::vector<PlyElement> elements;
  std::vector<std::string> comments;
  const PlyElement* find(const std::string& name) const {
    for (const auto& e : elements)
      if (e.name == name) return &e;
    return nullptr;
  }
};

class ByteReader {
 public:
  ByteReader(const std::string& bytes, std::size_t pos, bool big_endian)
      : bytes_(bytes), pos_(pos), big_(big_endian) {}

  double read(PlyType t) {
    const std::size_t n = ply_type_size(t);
    if (pos_ + n > bytes_.size()) throw DataError("ply: truncated payload");
    unsigned char raw[8];
    std::memcpy(raw, bytes_.data() + pos_, n);
    pos_ += n;
    if (big_ != (std::endian::native == std::endian::big)) std::reverse(raw, raw + n);
    switch (t) {
      case PlyType::Int8: return static_cast<double>(static_cast<std::int8_t>(raw[0]));
      case PlyType::UInt8: return static_cast<double>(raw[0]);
      case PlyType::Int16: return static_cast<double>(load<std::int16_t>(raw));
      case PlyType::UInt16: return static_cast<double>(load<std::uint16_t>(raw));
      case PlyType::Int32: return static_cast<double>(load<std::int32_t>(raw));
      case PlyType::UInt32: return static_cast<double>(load<std::uint32_t>(raw));
      case PlyType::Float32: return static_cast<double>(load<float>(raw));
      case PlyType::Float64: return load<double>(raw);
    }
    return 0;
  }

 private:
  template <class T>
  static T load(const unsigned char* raw) {
    T v;
    std::memcpy(&v, raw, sizeof(T));
    return v;
  }
  const std::string& bytes_;
  std::size_t pos_;
  bool big_;
};

PlyFile parse_ply(const std::string& bytes) {
  const std::string end_marker = "end_header";
  const auto end = bytes.find(end_marker);
  if (bytes.rfind("ply", 0) != 0 || end == std::string::npos) throw DataError("ply: malformed header");
  std::size_t body = bytes.find('\n', end);
  if (body == std::string::npos) throw DataError("ply: malformed header");
  ++body;

  PlyFile ply;
  bool have_format = false;
  std::istringstream header(bytes.substr(0, end));
  std::string line;
  std::getline(header, line);  // "ply"
  while (std::getline(header, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    std::istringstream ls(line);
    std::string word;
    if (!(ls >> word)) continue;
    if (word == "format") {
      std::string fmt;
      ls >> fmt;
      if (fmt == "ascii") ply.format = PlyFile::Format::Ascii;
      else if (fmt == "binary_little_endian") ply.format = PlyFile::Format::BinaryLittle;
      else if (fmt == "binary_big_endian") ply.format = PlyFile::Format::BinaryBig;
      else throw DataError("ply: unknown format '" + fmt + "'");
      have_format = true;
    } else if (word == "comment" || word == "obj_info") {
      std::string rest;
      std::getline(ls, rest);
      ply.comments.push_back(rest.empty() ? rest : rest.substr(rest.find_first_not_of(' ')));
    } else if (word == "element") {
      PlyElement e;
      long long count = -1;
      if (!(ls >> e.name >> count) || count < 0) throw DataError("ply: malformed element line '" + line + "'");
      e.count = static_cast<std::size_t>(count);
      ply.elements.push_back(std::move(e));
    } else if (word == "property") {
      if (ply.elements.empty()) throw DataError("ply: property before any element");
      PlyProperty p;
      std::string type;
      ls >> type;
      if (type == "list") {
        std::string count_type, item_type;
        ls >> count_type >> item_type;
        p.is_list = true;
        p.count_type = parse_ply_type(count_type);
        p.type = parse_ply_type(item_type);
      } else {
        p.type = parse_ply_type(type);
      }
      if (!(ls >> p.name)) throw DataError("ply: malformed property line '" + line + "'");
      ply.elements.back().properties.push_back(p);
    } else {
      throw DataError("ply: unexpected header line '" + line + "'");
    }
  }
  if (!have_format) throw DataError("ply: missing format line");

  if (ply.format == PlyFile::Format::Ascii) {
    std::istringstream in(bytes.substr(body));
    auto next = [&in]() {
      double v;
      if (!(in >> v)) throw DataError("ply: truncated payload");
      return v;
    };
    for (auto& e : ply.elements) {
      e.scalars.reserve(e.count * e.scalar_count());
      for (std::size_t r = 0; r < e.count; ++r) {
        bool first_list = true;
        for (const auto& p : e.properties) {
          if (!p.is_list) {
            e.scalars.push_back(next());
            continue;
          }
          const double n = next();
          if (n < 0) throw DataError("ply: negative list length");
          std::vector<double> items(static_cast<std::size_t>(n));
          for (auto& v : items) v = next();
          if (first_list) e.lists.push_back(std::move(items));
          first_list = false;
        }
      }
    }
  } else {
    ByteReader in(bytes, body, ply.format == PlyFile::Format::BinaryBig);
    for (auto& e : ply.elements) {
      e.scalars.reserve(e.count * e.scalar_count());
      for (std::size_t r = 0; r < e.count; ++r) {
        bool first_list = true;
        for (const auto& p : e.properties) {
          if (!p.is_list) {
            e.scalars.push_back(in.read(p.type));
            continue;
          }
          const double n = in.read(p.count_type);
          if (n < 0) throw DataError("ply: negative list length");
          std::vector<double> items(static_cast<std::size_t>(n));
          for (auto& v : items) v = in.read(p.type);
          if (first_list) e.lists.push_back(std::move(items));
          first_list = false;
        }
      }
    }
  }
  return ply;
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const fs::path& path, const std::string& bytes) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write '" + path.string() + "'");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("failed writing '" + path.string() + "'");
}

struct ColorColumns {
  int r = -1, g = -1, b = -1;
  bool found() const { return r >= 0 && g >= 0 && b >= 0; }
};

ColorColumns color_columns(const PlyElement& e) {
  return {e.column({"red", "r", "diffuse_red"}), e.column({"green", "g", "diffuse_green"}),
          e.column({"blue", "b", "diffuse_blue"})};
}

// Colour channel value in [0, 1]: integers are bytes, floats are taken as is.
double unit_color(const PlyElement& e, int column, double raw) {
  const PlyType t = e.type_of(column);
  if (t == PlyType::Float32 || t == PlyType::Float64) return raw;
  return raw / 255.0;
}

}  // namespace

std::string encode_ply(const PointCloud& cloud, PlyPositionType position_type) {
  std::ostringstream out;
  const char* type = position_type == PlyPositionType::Float64 ? "double" : "float";
  out << "ply\nformat binary_little_endian 1.0\n";
  if (cloud.label >= 0) out << "comment label " << cloud.label << "\n";
  out << "element vertex " << cloud.size() << "\n"
      << "property " << type << " x\nproperty " << type << " y\nproperty " << type << " z\n"
      << "property uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n";
  std::string bytes = out.str();
  const std::size_t row = (position_type == PlyPositionType::Float64 ? 24 : 12) + 3;
  const std::size_t header = bytes.size();
  bytes.resize(header + row * cloud.size());
  char* p = bytes.data() + header;
  static_assert(std::endian::native == std::endian::little, "PLY writer assumes a little-endian host");
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    for (std::size_t c = 0; c < 3; ++c) {
      if (position_type == PlyPositionType::Float64) {
        const double v = cloud.at(i, c);
        std::memcpy(p, &v, 8);
        p += 8;
      } else {
        const float v = static_cast<float>(cloud.at(i, c));
        std::memcpy(p, &v, 4);
        p += 4;
      }
    }
    for (std::size_t c = 3; c < 6; ++c) *p++ = static_cast<char>(color_to_byte(cloud.at(i, c)));
  }
  return bytes;
}

void write_ply(const PointCloud& cloud, const fs::path& path, PlyPositionType position_type) {
  write_file(path, encode_ply(cloud, position_type));
}

PointCloud decode_ply(const std::string& bytes) {
  const PlyFile ply = parse_ply(bytes);
  const PlyElement* vertex = ply.find("vertex");
  if (!vertex) throw DataError("ply: no vertex element");
  const int x = vertex->column({"x"}), y = vertex->column({"y"}), z = vertex->column({"z"});
  if (x < 0 || y < 0 || z < 0) throw DataError("ply: vertex element lacks x/y/z");
  const ColorColumns col = color_columns(*vertex);
  if (!col.found()) throw DataError("ply: vertex element lacks red/green/blue");
  const std::size_t stride = vertex->scalar_count();
  PointCloud cloud(vertex->count);
  for (std::size_t i = 0; i < vertex->count; ++i) {
    const double* row = vertex->scalars.data() + i * stride;
    cloud.at(i, 0) = row[x];
    cloud.at(i, 1) = row[y];
    cloud.at(i, 2) = row[z];
    const int cc[3] = {col.r, col.g, col.b};
    for (std::size_t c = 0; c < 3; ++c) {
      const PlyType t = vertex->type_of(cc[c]);
      cloud.at(i, 3 + c) = t == PlyType::UInt8 ? byte_to_color(static_cast<std::uint8_t>(row[cc[c]]))
                                               : unit_color(*vertex, cc[c], row[cc[c]]) - 0.5;
    }
  }
  for (const auto& comment : ply.comments)
    if (comment.rfind("label ", 0) == 0) cloud.label = std::stoi(comment.substr(6));
  return cloud;
}

PointCloud read_ply(const fs::path& path) {
  try {
    return decode_ply(read_file(path));
  } catch (const DataError& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

// ---- mesh readers ---------------------------------------------------------------

namespace {

std::unordered_map<std::string, std::array<double, 3>> read_mtl(const fs::path& path) {
  std::unordered_map<std::string, std::array<double, 3>> materials;
  std::ifstream in(path);
  if (!in) return materials;  // a missing library just means no material colours
  std::string line, current;
  while (std::getline(in, line)) {
    std::istringstream ls(line);
    std::string word;
    if (!(ls >> word)) continue;
    if (word == "newmtl") {
      ls >> current;
    } else if (word == "Kd" && !current.empty()) {
      std::array<double, 3> kd{};
      if (ls >> kd[0] >> kd[1] >> kd[2]) materials[current] = kd;
    }
  }
  return materials;
}

}  // namespace

ColoredMesh read_obj(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open '" + path.string() + "'");
  std::vector<std::array<double, 3>> positions;
  std::vector<std::array<double, 3>> vertex_colors;
  std::vector<bool> has_color;
  std::unordered_map<std::string, std::array<double, 3>> materials;
  const std::array<double, 3>* material = nullptr;
  ColoredMesh mesh;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    std::istringstream ls(line);
    std::string word;
    if (!(ls >> word) || word[0] == '#') continue;
    if (word == "v") {
      std::vector<double> vals;
      double v;
      while (ls >> v) vals.push_back(v);
      if (vals.size() < 3) throw DataError(path.string() + ":" + std::to_string(line_no) + ": vertex needs 3 coordinates");
      positions.push_back({vals[0], vals[1], vals[2]});
      if (vals.size() >= 6) {
        vertex_colors.push_back({vals[3], vals[4], vals[5]});
        has_color.push_back(true);
      } else {
        vertex_colors.push_back({0, 0, 0});
        has_color.push_back(false);
      }
    } else if (word == "mtllib") {
      std::string name;
      while (ls >> name)
        for (auto& [k, v] : read_mtl(path.parent_path() / name)) materials[k] = v;
    } else if (word == "usemtl") {
      std::string name;
      ls >> name;
      auto it = materials.find(name);
      material = it == materials.end() ? nullptr : &it->second;
    } else if (word == "f") {
      std::vector<std::size_t> idx;
      std::string tok;
      while (ls >> tok) {
        const long long i = std::stoll(tok.substr(0, tok.find('/')));
        const long long resolved = i < 0 ? static_cast<long long>(positions.size()) + i : i - 1;
        if (resolved < 0 || resolved >= static_cast<long long>(positions.size()))
          throw DataError(path.string() + ":" + std::to_string(line_no) + ": face index " + tok + " out of range");
        idx.push_back(static_cast<std::size_t>(resolved));
      }
      if (idx.size() < 3) throw DataError(path.string() + ":" + std::to_string(line_no) + ": face needs 3 vertices");
      for (std::size_t t = 1; t + 1 < idx.size(); ++t) {
        const std::size_t corner[3] = {idx[0], idx[t], idx[t + 1]};
        const auto base = static_cast<std::uint32_t>(mesh.vertices.size());
        for (std::size_t c : corner) {
          mesh.vertices.push_back(positions[c]);
          if (has_color[c]) mesh.colors.push_back(vertex_colors[c]);
          else if (material) mesh.colors.push_back(*material);
          else throw DataError(path.string() + ": mesh has no colour information");
        }
        mesh.faces.push_back({base, base + 1, base + 2});
      }
    }
  }
  if (mesh.faces.empty()) throw DataError(path.string() + ": no faces");
  mesh.validate();
  return mesh;
}

ColoredMesh read_ply_mesh(const fs::path& path) {
  PlyFile ply;
  try {
    ply = parse_ply(read_file(path));
  } catch (const DataError& e) {
    throw DataError(path.string() + ": " + e.what());
  }
  const PlyElement* vertex = ply.find("vertex");
  const PlyElement* face = ply.find("face");
  if (!vertex || !face) throw DataError(path.string() + ": mesh needs vertex and face elements");
  const int x = vertex->column({"x"}), y = vertex->column({"y"}), z = vertex->column({"z"});
  if (x < 0 || y < 0 || z < 0) throw DataError(path.string() + ": vertex element lacks x/y/z");
  const ColorColumns vc = color_columns(*vertex);
  const ColorColumns fc = color_columns(*face);
  if (!vc.found() && !fc.found()) throw DataError(path.string() + ": mesh has no colour information");
  if (face->lists.size() != face->count) throw DataError(path.string() + ": face element lacks an index list");

  const std::size_t vstride = vertex->scalar_count();
  const std::size_t fstride = face->scalar_count();
  ColoredMesh mesh;
  for (std::size_t f = 0; f < face->count; ++f) {
    const auto& idx = face->lists[f];
    if (idx.size() < 3) throw DataError(path.string() + ": face " + std::to_string(f) + " has fewer than 3 vertices");
    for (std::size_t t = 1; t + 1 < idx.size(); ++t) {
      const auto base = static_cast<std::uint32_t>(mesh.vertices.size());
      for (double raw : {idx[0], idx[t], idx[t + 1]}) {
        if (raw < 0 || raw >= static_cast<double>(vertex->count))
          throw DataError(path.string() + ": face " + std::to_string(f) + " index out of range");
        const double* row = vertex->scalars.data() + static_cast<std::size_t>(raw) * vstride;
        mesh.vertices.push_back({row[x], row[y], row[z]});
        if (vc.found()) {
          mesh.colors.push_back({unit_color(*vertex, vc.r, row[vc.r]), unit_color(*vertex, vc.g, row[vc.g]),
                                 unit_color(*vertex, vc.b, row[vc.b])});
        } else {
          const double* frow = face->scalars.data() + f * fstride;
          mesh.colors.push_back({unit_color(*face, fc.r, frow[fc.r]), unit_color(*face, fc.g, frow[fc.g]),
                                 unit_color(*face, fc.b, frow[fc.b])});
        }
      }
      mesh.faces.push_back({base, base + 1, base + 2});
    }
  }
  mesh.validate();
  return mesh;
}

ColoredMesh read_mesh(const fs::path& path) {
  std::string ext = path.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  if (ext == ".obj") return read_obj(path);
  if (ext == ".ply") return read_ply_mesh(path);
  throw DataError(path.string() + ": unsupported mesh format (expected .obj or .ply)");
}

// ---- procedural dataset ------------------------------------------------------------

std::uint64_t derive_seed(std::uint64_t base, std::initializer_list<std::uint64_t> keys) {
  return derive_seed(base, std::span<const std::uint64_t>(keys.begin(), keys.size()));
}

std::uint64_t derive_seed(std::uint64_t base, std::span<const std::uint64_t> keys) {
  auto mix = [](std::uint64_t z) {  // splitmix64 finalizer
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  };
  std::uint64_t h = mix(base);
  for (std::uint64_t k : keys) h = mix(h ^ mix(k));
  return h;
}

ProceduralSpec ProceduralSpec::desk_default() {
  ProceduralSpec spec;
  spec.classes = {
      ProceduralClass{"box", "box", {0.80, 0.20, 0.20}, {0.95, 0.85, 0.20}, 0.05},
      ProceduralClass{"table", "table", {0.20, 0.35, 0.80}, {0.45, 0.30, 0.15}, 0.05},
  };
  return spec;
}

void ProceduralSpec::validate() const {
  if (classes.size() < 2) throw UsageError("procedural dataset needs at least 2 classes");
  for (const auto& c : classes) {
    if (c.name.empty() || c.name.find('/') != std::string::npos) throw UsageError("procedural class needs a plain name");
    if (c.shape != "box" && c.shape != "table")
      throw UsageError("procedural class '" + c.name + "': shape must be box or table");
  }
  if (samples_per_class == 0) throw UsageError("procedural dataset needs samples_per_class >= 1");
  if (resolutions.empty()) throw UsageError("procedural dataset needs at least one resolution");
}

void to_json(nlohmann::json& j, const ProceduralSpec& s) {
  j = nlohmann::json{{"samples_per_class", s.samples_per_class}, {"resolutions", s.resolutions}};
  j["classes"] = nlohmann::json::array();
  for (const auto& c : s.classes)
    j["classes"].push_back({{"name", c.name},
                            {"shape", c.shape},
                            {"primary", c.primary},
                            {"secondary", c.secondary},
                            {"color_jitter", c.color_jitter}});
}

void from_json(const nlohmann::json& j, ProceduralSpec& s) {
  const ProceduralSpec d = ProceduralSpec::desk_default();
  s.samples_per_class = j.value("samples_per_class", d.samples_per_class);
  s.resolutions = j.value("resolutions", d.resolutions);
  s.classes.clear();
  if (!j.contains("classes")) {
    s.classes = d.classes;
    return;
  }
  for (const auto& c : j.at("classes")) {
    ProceduralClass pc;
    pc.name = c.at("name").get<std::string>();
    pc.shape = c.value("shape", std::string("box"));
    pc.primary = c.value("primary", pc.primary);
    pc.secondary = c.value("secondary", pc.secondary);
    pc.color_jitter = c.value("color_jitter", pc.color_jitter);
    s.classes.push_back(pc);
  }
}

namespace {

using Vec3 = std::array<double, 3>;

// Axis-aligned box; the +z face gets `top`, every other face `sides`.
void add_box(ColoredMesh& mesh, const Vec3& lo, const Vec3& hi, const Vec3& sides, const Vec3& top) {
  auto corner = [&](int i) {
    return Vec3{(i & 1) ? hi[0] : lo[0], (i & 2) ? hi[1] : lo[1], (i & 4) ? hi[2] : lo[2]};
  };
  auto quad = [&](int a, int b, int c, int d, const Vec3& rgb) {
    mesh.add_triangle(corner(a), corner(b), corner(c), rgb);
    mesh.add_triangle(corner(a), corner(c), corner(d), rgb);
  };
  quad(0, 2, 3, 1, sides);  // bottom
  quad(4, 5, 7, 6, top);    // top
  quad(0, 1, 5, 4, sides);
  quad(2, 6, 7, 3, sides);
  quad(0, 4, 6, 2, sides);
  quad(1, 3, 7, 5, sides);
}

}  // namespace

ColoredMesh make_procedural_mesh(const ProceduralClass& cls, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto range = [&](double lo, double hi) { return lo + (hi - lo) * unit(rng); };
  auto jitter = [&](const Vec3& base) {
    Vec3 c;
    for (std::size_t i = 0; i < 3; ++i) c[i] = std::clamp(base[i] + range(-cls.color_jitter, cls.color_jitter), 0.0, 1.0);
    return c;
  };
  const Vec3 primary = jitter(cls.primary);
  const Vec3 secondary = jitter(cls.secondary);
  ColoredMesh mesh;
  if (cls.shape == "box") {
    const double w = range(0.6, 1.0), d = range(0.6, 1.0), h = range(0.4, 1.0);
    add_box(mesh, {-w / 2, -d / 2, 0}, {w / 2, d / 2, h}, primary, secondary);
  } else if (cls.shape == "table") {
    const double w = range(0.8, 1.2), d = range(0.5, 0.9), h = range(0.5, 0.8);
    const double slab = range(0.04, 0.08), leg = range(0.05, 0.09);
    add_box(mesh, {-w / 2, -d / 2, h - slab}, {w / 2, d / 2, h}, primary, primary);
    for (int sx : {-1, 1})
      for (int sy : {-1, 1}) {
        const double cx = sx * (w / 2 - leg), cy = sy * (d / 2 - leg);
        add_box(mesh, {cx - leg / 2, cy - leg / 2, 0}, {cx + leg / 2, cy + leg / 2, h - slab}, secondary, secondary);
      }
  } else {
    throw UsageError("procedural class '" + cls.name + "': unknown shape '" + cls.shape + "'");
  }
  return mesh;
}

// ---- manifest ------------------------------------------------------------------

std::size_t DatasetManifest::count(int id) const {
  return static_cast<std::size_t>(
      std::count_if(samples.begin(), samples.end(), [id](const auto& s) { return s.class_id == id; }));
}

int DatasetManifest::class_id(const std::string& name) const {
  for (std::size_t i = 0; i < classes.size(); ++i)
    if (classes[i] == name) return static_cast<int>(i);
  throw UsageError("unknown class '" + name + "'");
}

void DatasetManifest::verify(const fs::path& dataset_dir, const std::vector<std::size_t>& required) const {
  for (std::size_t r : required)
    if (std::find(resolutions.begin(), resolutions.end(), r) == resolutions.end())
      throw DataError("dataset '" + dataset_dir.string() + "' has no clouds at resolution " + std::to_string(r));
  for (const auto& s : samples)
    for (std::size_t r : required) {
      auto it = s.paths.find(r);
      if (it == s.paths.end() || !fs::exists(dataset_dir / it->second))
        throw DataError("dataset '" + dataset_dir.string() + "': sample " + classes.at(s.class_id) + "/" + s.id +
                        " is missing resolution " + std::to_string(r));
    }
}

void to_json(nlohmann::json& j, const DatasetManifest& m) {
  j = nlohmann::json::object();
  j["classes"] = nlohmann::json::array();
  for (std::size_t i = 0; i < m.classes.size(); ++i)
    j["classes"].push_back({{"name", m.classes[i]}, {"id", i}, {"count", m.count(static_cast<int>(i))}});
  j["resolutions"] = m.resolutions;
  j["samples"] = nlohmann::json::array();
  for (const auto& s : m.samples) {
    nlohmann::json paths = nlohmann::json::object();
    for (const auto& [r, p] : s.paths) paths[std::to_string(r)] = p;
    j["samples"].push_back({{"class", m.classes.at(s.class_id)}, {"class_id", s.class_id}, {"id", s.id}, {"paths", paths}});
  }
}

void from_json(const nlohmann::json& j, DatasetManifest& m) {
  m = DatasetManifest{};
  for (const auto& c : j.at("classes")) {
    const auto id = c.at("id").get<std::size_t>();
    if (id != m.classes.size()) throw DataError("manifest: class ids must be 0..n-1 in order");
    m.classes.push_back(c.at("name").get<std::string>());
  }
  m.resolutions = j.at("resolutions").get<std::vector<std::size_t>>();
  for (const auto& s : j.at("samples")) {
    ManifestSample ms;
    ms.class_id = s.at("class_id").get<int>();
    if (ms.class_id < 0 || static_cast<std::size_t>(ms.class_id) >= m.classes.size())
      throw DataError("manifest: sample with unknown class id");
    ms.id = s.at("id").get<std::string>();
    for (const auto& [r, p] : s.at("paths").items()) ms.paths[std::stoul(r)] = p.get<std::string>();
    m.samples.push_back(std::move(ms));
  }
}

void DatasetManifest::save(const fs::path& dataset_dir) const {
  write_file(dataset_dir / "manifest.json", nlohmann::json(*this).dump(2) + "\n");
}

DatasetManifest DatasetManifest::load(const fs::path& dataset_dir) {
  const fs::path path = dataset_dir / "manifest.json";
  if (!fs::exists(path)) throw DataError("no manifest.json in '" + dataset_dir.string() + "'");
  try {
    return nlohmann::json::parse(read_file(path)).get<DatasetManifest>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

namespace {

std::string sample_name(std::size_t i) {
  std::ostringstream ss;
  ss << std::setw(4) << std::setfill('0') << i;
  return ss.str();
}

void write_sample(const ColoredMesh& mesh, int class_id, const std::string& class_name, const std::string& id,
                  const std::vector<std::size_t>& resolutions, std::uint64_t seed, const fs::path& dataset_dir,
                  DatasetManifest& manifest) {
  ManifestSample sample;
  sample.class_id = class_id;
  sample.id = id;
  for (std::size_t r : resolutions) {
    PointCloud cloud = sample_surface(mesh, r, derive_seed(seed, {static_cast<std::uint64_t>(class_id), r}));
    normalize(cloud);
    cloud.label = class_id;
    const std::string rel = class_name + "/" + id + "/" + std::to_string(r) + ".ply";
    write_ply(cloud, dataset_dir / rel);
    sample.paths[r] = rel;
  }
  manifest.samples.push_back(std::move(sample));
}

}  // namespace

DatasetManifest make_procedural_dataset(const ProceduralSpec& spec, const fs::path& dataset_dir, std::uint64_t seed) {
  spec.validate();
  DatasetManifest manifest;
  manifest.resolutions = spec.resolutions;
  for (const auto& c : spec.classes) manifest.classes.push_back(c.name);
  for (std::size_t ci = 0; ci < spec.classes.size(); ++ci)
    for (std::size_t i = 0; i < spec.samples_per_class; ++i) {
      const std::uint64_t sample_seed = derive_seed(seed, {ci, i});
      const ColoredMesh mesh = make_procedural_mesh(spec.classes[ci], sample_seed);
      write_sample(mesh, static_cast<int>(ci), spec.classes[ci].name, sample_name(i), spec.resolutions, sample_seed,
                   dataset_dir, manifest);
    }
  manifest.save(dataset_dir);
  return manifest;
}

DatasetManifest ingest_meshes(const fs::path& meshes_dir, const fs::path& dataset_dir,
                              const std::vector<std::size_t>& resolutions, std::uint64_t seed,
                              std::vector<std::string>* skipped) {
  if (!fs::is_directory(meshes_dir)) throw DataError("input directory '" + meshes_dir.string() + "' does not exist");
  if (resolutions.empty()) throw UsageError("ingest needs at least one resolution");
  std::vector<fs::path> class_dirs;
  for (const auto& e : fs::directory_iterator(meshes_dir))
    if (e.is_directory()) class_dirs.push_back(e.path());
  std::sort(class_dirs.begin(), class_dirs.end());
  if (class_dirs.empty()) throw DataError("'" + meshes_dir.string() + "' has no class subdirectories");

  DatasetManifest manifest;
  manifest.resolutions = resolutions;
  for (const auto& dir : class_dirs) {
    const int class_id = static_cast<int>(manifest.classes.size());
    const std::string class_name = dir.filename().string();
    manifest.classes.push_back(class_name);
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(dir))
      if (e.is_regular_file()) {
        std::string ext = e.path().extension().string();
        std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
        if (ext == ".obj" || ext == ".ply") files.push_back(e.path());
      }
    std::sort(files.begin(), files.end());
    for (std::size_t i = 0; i < files.size(); ++i) {
      ColoredMesh mesh;
      try {
        mesh = read_mesh(files[i]);
        if (!(mesh.total_area() > 0)) throw DataError(files[i].string() + ": zero surface area");
      } catch (const DataError& e) {
        if (skipped) skipped->push_back(e.what());
        continue;
      }
      write_sample(mesh, class_id, class_name, files[i].stem().string(), resolutions,
                   derive_seed(seed, {static_cast<std::uint64_t>(class_id), i}), dataset_dir, manifest);
    }
  }
  manifest.save(dataset_dir);
  return manifest;
}

std::vector<PointCloud> load_clouds(const fs::path& dataset_dir, const DatasetManifest& manifest,
                                    std::size_t resolution) {
  manifest.verify(dataset_dir, {resolution});
  std::vector<PointCloud> clouds;
  clouds.reserve(manifest.samples.size());
  for (const auto& s : manifest.samples) {
    PointCloud c = read_ply(dataset_dir / s.paths.at(resolution));
    if (c.size() != resolution)
      throw DataError((dataset_dir / s.paths.at(resolution)).string() + ": holds " + std::to_string(c.size()) +
                      " points, expected " + std::to_string(resolution));
    c.label = s.class_id;
    clouds.push_back(std::move(c));
  }
  return clouds;
}

}  // namespace pcgan
