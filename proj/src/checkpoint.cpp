#include "bsm/checkpoint.hpp"

#include "bsm/errors.hpp"
#include "parse.hpp"

#include <zlib.h>

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <set>

namespace bsm {

namespace {

constexpr char kMagic[4] = {'B', 'S', 'M', 'K'};

class Writer {
 public:
  template <typename T>
  void put(T value) {
    static_assert(std::is_integral_v<T>);
    for (std::size_t i = 0; i < sizeof(T); ++i)
      bytes_.push_back(static_cast<char>((static_cast<std::uint64_t>(value) >> (8 * i)) & 0xff));
  }
  void put_bytes(const std::string& s) { bytes_.insert(bytes_.end(), s.begin(), s.end()); }
  std::vector<char>& bytes() { return bytes_; }

 private:
  std::vector<char> bytes_;
};

class Reader {
 public:
  Reader(const std::vector<char>& bytes, std::size_t end) : bytes_(bytes), end_(end) {}

  template <typename T>
  T get() {
    need(sizeof(T));
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i)
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += sizeof(T);
    return static_cast<T>(v);
  }
  std::string get_bytes(std::size_t n) {
    need(n);
    std::string s(bytes_.begin() + pos_, bytes_.begin() + pos_ + n);
    pos_ += n;
    return s;
  }
  std::size_t position() const { return pos_; }

 private:
  void need(std::size_t n) const {
    if (n > end_ - pos_) throw CheckpointError("checkpoint is truncated");
  }
  const std::vector<char>& bytes_;
  std::size_t end_;
  std::size_t pos_ = 0;
};

std::uint32_t crc_of(const char* data, std::size_t n) {
  uLong crc = crc32(0L, Z_NULL, 0);
  // zlib takes 32-bit lengths; feed large buffers in pieces.
  while (n > 0) {
    const uInt piece = static_cast<uInt>(std::min<std::size_t>(n, 1u << 30));
    crc = crc32(crc, reinterpret_cast<const Bytef*>(data), piece);
    data += piece;
    n -= piece;
  }
  return static_cast<std::uint32_t>(crc);
}

template <typename Scalar>
constexpr DType dtype_of() {
  return std::is_same_v<Scalar, float> ? DType::f32 : DType::f64;
}

std::size_t dtype_size(DType d) { return d == DType::f32 ? 4 : 8; }

}  // namespace

template <typename Scalar>
void save_checkpoint(const std::filesystem::path& path, const ModelConfig& config,
                     const NamedParameters<Scalar>& parameters) {
  using Bits = std::conditional_t<std::is_same_v<Scalar, float>, std::uint32_t, std::uint64_t>;
  Writer w;
  w.put_bytes(std::string(kMagic, 4));
  w.put<std::uint32_t>(kCheckpointVersion);
  const std::string text = config.to_text();
  w.put<std::uint32_t>(static_cast<std::uint32_t>(text.size()));
  w.put_bytes(text);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(parameters.size()));
  std::uint64_t offset = 0;
  for (const auto& [name, t] : parameters) {
    w.put<std::uint16_t>(static_cast<std::uint16_t>(name.size()));
    w.put_bytes(name);
    w.put<std::uint8_t>(static_cast<std::uint8_t>(dtype_of<Scalar>()));
    w.put<std::uint8_t>(static_cast<std::uint8_t>(t.ndim()));
    for (Index d : t.shape()) w.put<std::int64_t>(d);
    w.put<std::uint64_t>(offset);
    offset += static_cast<std::uint64_t>(t.numel()) * sizeof(Scalar);
  }
  for (const auto& [name, t] : parameters)
    for (Index i = 0; i < t.numel(); ++i) w.put<Bits>(std::bit_cast<Bits>(t.values()[i]));
  w.put<std::uint32_t>(crc_of(w.bytes().data(), w.bytes().size()));

  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError("cannot write " + tmp.string());
    out.write(w.bytes().data(), static_cast<std::streamsize>(w.bytes().size()));
    out.flush();
    if (!out) throw CheckpointError("short write to " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

CheckpointContents read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint " + path.string());
  const std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.size() < 8 || std::memcmp(bytes.data(), kMagic, 4) != 0)
    throw CheckpointError(path.string() + " is not a checkpoint (bad magic)");
  const std::size_t body = bytes.size() - 4;
  std::uint32_t stored = 0;
  for (std::size_t i = 0; i < 4; ++i)
    stored |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[body + i])) << (8 * i);
  if (stored != crc_of(bytes.data(), body))
    throw CheckpointError(path.string() + ": CRC mismatch");

  Reader r(bytes, body);
  r.get_bytes(4);
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion)
    throw CheckpointError(path.string() + ": unsupported version " + std::to_string(version));
  CheckpointContents c;
  c.config_text = r.get_bytes(r.get<std::uint32_t>());
  try {
    c.config = ModelConfig::from_entries(detail::parse_entries(c.config_text, path.string()));
  } catch (const Error& e) {
    throw CheckpointError(path.string() + ": bad architecture block: " + e.what());
  }
  const auto count = r.get<std::uint32_t>();
  std::vector<std::uint64_t> offsets;
  std::set<std::string> seen;
  for (std::uint32_t i = 0; i < count; ++i) {
    StoredTensor t;
    t.name = r.get_bytes(r.get<std::uint16_t>());
    if (!seen.insert(t.name).second) throw CheckpointError(path.string() + ": duplicate tensor " + t.name);
    const auto code = r.get<std::uint8_t>();
    if (code != 1 && code != 2)
      throw CheckpointError(path.string() + ": tensor " + t.name + " has unknown dtype " + std::to_string(code));
    t.dtype = static_cast<DType>(code);
    const auto ndim = r.get<std::uint8_t>();
    for (int d = 0; d < ndim; ++d) {
      const auto extent = r.get<std::int64_t>();
      if (extent < 0) throw CheckpointError(path.string() + ": tensor " + t.name + " has a negative extent");
      t.shape.push_back(extent);
    }
    offsets.push_back(r.get<std::uint64_t>());
    c.tensors.push_back(std::move(t));
  }
  const std::size_t payload = r.position();
  for (std::size_t i = 0; i < c.tensors.size(); ++i) {
    StoredTensor& t = c.tensors[i];
    const std::size_t n = static_cast<std::size_t>(shape_numel(t.shape));
    const std::size_t width = dtype_size(t.dtype);
    if (offsets[i] > body - payload || n * width > body - payload - offsets[i])
      throw CheckpointError(path.string() + ": tensor " + t.name + " lies outside the payload");
    Reader v(bytes, body);
    v.get_bytes(payload + offsets[i]);
    t.values.resize(n);
    for (std::size_t k = 0; k < n; ++k)
      t.values[k] = t.dtype == DType::f32 ? static_cast<double>(std::bit_cast<float>(v.get<std::uint32_t>()))
                                          : std::bit_cast<double>(v.get<std::uint64_t>());
  }
  return c;
}

template <typename Scalar>
BsmambaModel<Scalar> load_model(const std::filesystem::path& path) {
  const CheckpointContents c = read_checkpoint(path);
  BsmambaModel<Scalar> model(c.config, 0);
  NamedParameters<Scalar> source;
  for (const auto& t : c.tensors) {
    Vector<Scalar> v(static_cast<Index>(t.values.size()));
    for (std::size_t k = 0; k < t.values.size(); ++k) v[static_cast<Index>(k)] = static_cast<Scalar>(t.values[k]);
    source.emplace_back(t.name, Tensor<Scalar>(t.shape, std::move(v)));
  }
  model.load_parameters(source);
  return model;
}

template <typename Scalar>
BsmambaModel<Scalar> load_model(const std::filesystem::path& path, const ModelConfig& expected) {
  const CheckpointContents c = read_checkpoint(path);
  if (!(c.config == expected))
    throw CheckpointError(path.string() + ": architecture mismatch; checkpoint has\n" + c.config_text +
                          "expected\n" + expected.to_text());
  return load_model<Scalar>(path);
}

template void save_checkpoint(const std::filesystem::path&, const ModelConfig&, const NamedParameters<float>&);
template void save_checkpoint(const std::filesystem::path&, const ModelConfig&, const NamedParameters<double>&);
template BsmambaModel<float> load_model(const std::filesystem::path&);
template BsmambaModel<double> load_model(const std::filesystem::path&);
template BsmambaModel<float> load_model(const std::filesystem::path&, const ModelConfig&);
template BsmambaModel<double> load_model(const std::filesystem::path&, const ModelConfig&);

}  // namespace bsm
