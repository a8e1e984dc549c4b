#include "minimt/serialize.hpp"

#include <bit>
#include <cstring>

#include "minimt/io.hpp"

namespace minimt {

static_assert(std::endian::native == std::endian::little,
              "container I/O assumes a little-endian host");

namespace {

constexpr char kMagic[4] = {'M', 'N', 'M', 'T'};

template <typename T>
void put(std::string& out, T value) {
  char buf[sizeof(T)];
  std::memcpy(buf, &value, sizeof(T));
  out.append(buf, sizeof(T));
}

class Reader {
 public:
  explicit Reader(std::string_view bytes) : bytes_(bytes) {}

  template <typename T>
  T get() {
    need(sizeof(T));
    T value;
    std::memcpy(&value, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return value;
  }

  std::string_view take(std::size_t n) {
    need(n);
    auto view = bytes_.substr(pos_, n);
    pos_ += n;
    return view;
  }

  std::size_t pos() const { return pos_; }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) throw FormatError("container is truncated");
  }
  std::string_view bytes_;
  std::size_t pos_ = 0;
};

std::size_t dtype_width(DType d) {
  switch (d) {
    case DType::kF32: return 4;
    case DType::kF64: return 8;
    case DType::kI32: return 4;
    case DType::kU8: return 1;
  }
  throw FormatError("unknown dtype tag");
}

}  // namespace

DType NamedArray::dtype() const {
  return static_cast<DType>(values.index());
}

std::size_t NamedArray::size() const {
  return std::visit([](const auto& v) { return v.size(); }, values);
}

NamedArray NamedArray::from_tensor(std::string name, const Tensor& t,
                                   DType dtype) {
  NamedArray a;
  a.name = std::move(name);
  a.dims.assign(t.shape().begin(), t.shape().end());
  auto data = t.data();
  if (dtype == DType::kF32) {
    a.values = std::vector<float>(data.begin(), data.end());
  } else if (dtype == DType::kF64) {
    a.values = std::vector<double>(data.begin(), data.end());
  } else {
    throw std::invalid_argument("tensors are stored as f32 or f64");
  }
  return a;
}

NamedArray NamedArray::from_ints(std::string name, std::vector<std::int32_t> v) {
  NamedArray a;
  a.name = std::move(name);
  a.dims = {v.size()};
  a.values = std::move(v);
  return a;
}

NamedArray NamedArray::from_text(std::string name, std::string_view text) {
  NamedArray a;
  a.name = std::move(name);
  a.dims = {text.size()};
  a.values = std::vector<std::uint8_t>(text.begin(), text.end());
  return a;
}

Tensor NamedArray::to_tensor() const {
  Shape shape(dims.begin(), dims.end());
  if (const auto* f = std::get_if<std::vector<float>>(&values)) {
    return Tensor::from(std::move(shape), std::vector<double>(f->begin(), f->end()));
  }
  if (const auto* d = std::get_if<std::vector<double>>(&values)) {
    return Tensor::from(std::move(shape), *d);
  }
  throw FormatError("array '" + name + "' is not floating point");
}

std::vector<std::int32_t> NamedArray::ints() const {
  if (const auto* v = std::get_if<std::vector<std::int32_t>>(&values)) return *v;
  throw FormatError("array '" + name + "' is not i32");
}

std::string NamedArray::text() const {
  if (const auto* v = std::get_if<std::vector<std::uint8_t>>(&values)) {
    return std::string(v->begin(), v->end());
  }
  throw FormatError("array '" + name + "' is not u8");
}

std::string encode_container(const std::vector<NamedArray>& arrays) {
  std::string out(kMagic, 4);
  put<std::uint32_t>(out, kContainerVersion);
  for (const auto& a : arrays) {
    if (a.name.empty()) throw std::invalid_argument("array names must be non-empty");
    if (a.dims.empty()) throw std::invalid_argument("array '" + a.name + "' has rank 0");
    std::uint64_t count = 1;
    for (auto d : a.dims) count *= d;
    if (count != a.size()) {
      throw std::invalid_argument("array '" + a.name + "' dims do not match payload");
    }
    put<std::uint32_t>(out, static_cast<std::uint32_t>(a.name.size()));
    out += a.name;
    put<std::uint32_t>(out, static_cast<std::uint32_t>(a.dims.size()));
    for (auto d : a.dims) put<std::uint64_t>(out, d);
    put<std::uint32_t>(out, static_cast<std::uint32_t>(a.dtype()));
    std::visit(
        [&out](const auto& v) {
          out.append(reinterpret_cast<const char*>(v.data()),
                     v.size() * sizeof(v[0]));
        },
        a.values);
  }
  put<std::uint32_t>(out, 0);
  put<std::uint64_t>(out, fnv1a64(out));
  return out;
}

std::vector<NamedArray> decode_container(std::string_view bytes) {
  Reader r(bytes);
  if (r.take(4) != std::string_view(kMagic, 4)) {
    throw FormatError("bad magic: not a named-tensor container");
  }
  const auto version = r.get<std::uint32_t>();
  if (version != kContainerVersion) {
    throw FormatError("unsupported container version " + std::to_string(version) +
                      " (expected " + std::to_string(kContainerVersion) + ")");
  }
  // Verify the trailing checksum before parsing so a damaged file is never
  // partially decoded.
  constexpr std::size_t kTrailer = sizeof(std::uint64_t);
  if (bytes.size() < 8 + sizeof(std::uint32_t) + kTrailer) {
    throw FormatError("container is truncated");
  }
  const std::size_t body = bytes.size() - kTrailer;
  std::uint64_t stored;
  std::memcpy(&stored, bytes.data() + body, kTrailer);
  if (stored != fnv1a64(bytes.substr(0, body))) {
    throw FormatError("checksum mismatch: container is truncated or corrupted");
  }
  std::vector<NamedArray> arrays;
  while (true) {
    const auto name_len = r.get<std::uint32_t>();
    if (name_len == 0) break;
    NamedArray a;
    a.name = std::string(r.take(name_len));
    const auto rank = r.get<std::uint32_t>();
    if (rank == 0 || rank > 16) throw FormatError("bad rank for '" + a.name + "'");
    std::uint64_t count = 1;
    for (std::uint32_t i = 0; i < rank; ++i) {
      const auto d = r.get<std::uint64_t>();
      if (d == 0 || d > (1ULL << 40)) throw FormatError("bad dimension for '" + a.name + "'");
      a.dims.push_back(d);
      count *= d;
      if (count > (1ULL << 40)) throw FormatError("array '" + a.name + "' too large");
    }
    const auto tag = r.get<std::uint32_t>();
    if (tag > 3) throw FormatError("unknown dtype tag " + std::to_string(tag));
    const auto dtype = static_cast<DType>(tag);
    auto payload = r.take(count * dtype_width(dtype));
    auto fill = [&](auto vec) {
      std::memcpy(vec.data(), payload.data(), payload.size());
      a.values = std::move(vec);
    };
    switch (dtype) {
      case DType::kF32: fill(std::vector<float>(count)); break;
      case DType::kF64: fill(std::vector<double>(count)); break;
      case DType::kI32: fill(std::vector<std::int32_t>(count)); break;
      case DType::kU8: fill(std::vector<std::uint8_t>(count)); break;
    }
    arrays.push_back(std::move(a));
  }
  if (r.pos() != body) throw FormatError("unexpected bytes after end marker");
  return arrays;
}

void write_container(const std::filesystem::path& path,
                     const std::vector<NamedArray>& arrays) {
  write_file_atomic(path, encode_container(arrays));
}

std::vector<NamedArray> read_container(const std::filesystem::path& path) {
  return decode_container(read_file(path));
}

const NamedArray& find_array(const std::vector<NamedArray>& arrays,
                             std::string_view name) {
  for (const auto& a : arrays) {
    if (a.name == name) return a;
  }
  throw FormatError("container has no array named '" + std::string(name) + "'");
}

}  // namespace minimt
