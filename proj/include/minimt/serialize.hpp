#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "minimt/tensor.hpp"

namespace minimt {

// Named-tensor container layout (all integers little-endian):
//   "MNMT"  u32 version
//   repeated: u32 name_len (> 0), name bytes (UTF-8), u32 rank,
//             u64 dims[rank], u32 dtype, payload
//   u32 0   (end marker)
//   u64 FNV-1a checksum of every preceding byte
inline constexpr std::uint32_t kContainerVersion = 1;

enum class DType : std::uint32_t { kF32 = 0, kF64 = 1, kI32 = 2, kU8 = 3 };

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct NamedArray {
  using Values = std::variant<std::vector<float>, std::vector<double>,
                              std::vector<std::int32_t>,
                              std::vector<std::uint8_t>>;

  std::string name;
  std::vector<std::uint64_t> dims;
  Values values;

  DType dtype() const;
  std::size_t size() const;

  static NamedArray from_tensor(std::string name, const Tensor& t,
                                DType dtype = DType::kF64);
  static NamedArray from_ints(std::string name, std::vector<std::int32_t> v);
  static NamedArray from_text(std::string name, std::string_view text);

  Tensor to_tensor() const;
  std::vector<std::int32_t> ints() const;
  std::string text() const;
};

std::string encode_container(const std::vector<NamedArray>& arrays);
std::vector<NamedArray> decode_container(std::string_view bytes);

void write_container(const std::filesystem::path& path,
                     const std::vector<NamedArray>& arrays);
std::vector<NamedArray> read_container(const std::filesystem::path& path);

const NamedArray& find_array(const std::vector<NamedArray>& arrays,
                             std::string_view name);

}  // namespace minimt
