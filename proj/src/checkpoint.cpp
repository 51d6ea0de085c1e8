#include "pcgan/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <unordered_map>

#include "pcgan/errors.hpp"

namespace pcgan {

namespace {

static_assert(std::endian::native == std::endian::little,
              "checkpoint encoding assumes a little-endian host");

template <class T>
void put(std::string& out, T value) {
  char bytes[sizeof(T)];
  std::memcpy(bytes, &value, sizeof(T));
  out.append(bytes, sizeof(T));
}

class Reader {
 public:
  explicit Reader(std::string_view bytes) : bytes_(bytes) {}

  template <class T>
  T get(const char* what) {
    T value;
    need(sizeof(T), what);
    std::memcpy(&value, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return value;
  }

  std::string_view take(std::size_t n, const char* what) {
    need(n, what);
    auto view = bytes_.substr(pos_, n);
    pos_ += n;
    return view;
  }

  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n, const char* what) const {
    if (bytes_.size() - pos_ < n)
      throw DataError(std::string("checkpoint truncated while reading ") + what);
  }
  std::string_view bytes_;
  std::size_t pos_ = 0;
};

constexpr DType native_dtype() { return sizeof(Real) == 4 ? DType::Float32 : DType::Float64; }

}  // namespace

std::string encode_checkpoint(const std::vector<CheckpointRecord>& records) {
  std::string out(kCheckpointMagic, 4);
  put<std::uint16_t>(out, kCheckpointVersion);
  for (const auto& r : records) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(r.name.size()));
    out += r.name;
    put<std::uint8_t>(out, static_cast<std::uint8_t>(native_dtype()));
    const Shape& shape = r.tensor.shape();
    put<std::uint8_t>(out, static_cast<std::uint8_t>(shape.size()));
    for (std::size_t d : shape) put<std::uint64_t>(out, d);
    auto values = r.tensor.values();
    out.append(reinterpret_cast<const char*>(values.data()), values.size() * sizeof(Real));
  }
  return out;
}

std::vector<CheckpointRecord> decode_checkpoint(std::string_view bytes) {
  Reader in(bytes);
  if (in.take(4, "magic") != std::string_view(kCheckpointMagic, 4))
    throw DataError("not a checkpoint file (bad magic)");
  const auto version = in.get<std::uint16_t>("version");
  if (version != kCheckpointVersion)
    throw DataError("unsupported checkpoint version " + std::to_string(version));
  std::vector<CheckpointRecord> records;
  while (!in.done()) {
    const auto name_len = in.get<std::uint32_t>("name length");
    std::string name(in.take(name_len, "name"));
    const auto tag = in.get<std::uint8_t>("dtype");
    if (tag != static_cast<std::uint8_t>(DType::Float32) && tag != static_cast<std::uint8_t>(DType::Float64))
      throw DataError("checkpoint record '" + name + "' has unknown dtype tag " + std::to_string(tag));
    const auto rank = in.get<std::uint8_t>("rank");
    Shape shape(rank);
    for (auto& d : shape) d = static_cast<std::size_t>(in.get<std::uint64_t>("dims"));
    const std::size_t n = shape_numel(shape);
    std::vector<Real> values(n);
    if (tag == static_cast<std::uint8_t>(DType::Float64)) {
      auto raw = in.take(n * sizeof(double), "payload");
      for (std::size_t i = 0; i < n; ++i) {
        double v;
        std::memcpy(&v, raw.data() + i * sizeof(double), sizeof(double));
        values[i] = static_cast<Real>(v);
      }
    } else {
      auto raw = in.take(n * sizeof(float), "payload");
      for (std::size_t i = 0; i < n; ++i) {
        float v;
        std::memcpy(&v, raw.data() + i * sizeof(float), sizeof(float));
        values[i] = static_cast<Real>(v);
      }
    }
    records.push_back({std::move(name), Tensor(std::move(shape), std::move(values))});
  }
  return records;
}

void save_checkpoint(const std::filesystem::path& path, const std::vector<CheckpointRecord>& records) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write checkpoint " + path.string());
  const std::string bytes = encode_checkpoint(records);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("failed writing checkpoint " + path.string());
}

std::vector<CheckpointRecord> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes);
}

std::vector<CheckpointRecord> to_records(const ParameterStore& store) {
  std::vector<CheckpointRecord> out;
  for (const auto& p : store.items()) out.push_back({p.name, p.tensor.detach()});
  return out;
}

void assign_from_records(ParameterStore& store, const std::vector<CheckpointRecord>& records) {
  std::unordered_map<std::string, const CheckpointRecord*> by_name;
  for (const auto& r : records) by_name[r.name] = &r;
  for (const auto& p : store.items()) {
    auto it = by_name.find(p.name);
    if (it == by_name.end()) throw DataError("checkpoint is missing parameter '" + p.name + "'");
    if (it->second->tensor.shape() != p.tensor.shape())
      throw DataError("checkpoint parameter '" + p.name + "' has shape " +
                      shape_string(it->second->tensor.shape()) + ", model expects " +
                      shape_string(p.tensor.shape()));
  }
  for (const auto& p : std::vector<Parameter>(store.items()))
    store.replace(p.name, by_name.at(p.name)->tensor);
}

}  // namespace pcgan
