#pragma once

// Named-tensor archive ("TOPF").
//
// Layout, all integers little-endian:
//   magic   "TOPF"
//   version u32 (= 1)
//   records until end of file:
//     name length u32, name bytes (UTF-8)
//     rank u32, dims u64[rank]
//     data float64[product(dims)]

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "topforge/errors.hpp"
#include "topforge/tensor.hpp"

namespace topforge {

inline constexpr std::array<char, 4> kArchiveMagic{'T', 'O', 'P', 'F'};
inline constexpr std::uint32_t kArchiveVersion = 1;

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

namespace detail {

template <typename U>
void put_le(std::ostream& out, U v) {
  static_assert(std::is_unsigned_v<U>);
  std::array<char, sizeof(U)> buf;
  for (std::size_t i = 0; i < sizeof(U); ++i) buf[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  out.write(buf.data(), buf.size());
}

template <typename U>
bool get_le(std::istream& in, U& v) {
  std::array<unsigned char, sizeof(U)> buf;
  if (!in.read(reinterpret_cast<char*>(buf.data()), buf.size())) return false;
  v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(buf[i]) << (8 * i);
  return true;
}

}  // namespace detail

inline void save_archive(const std::vector<NamedTensor>& records, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open '" + path.string() + "' for writing");
  out.write(kArchiveMagic.data(), kArchiveMagic.size());
  detail::put_le<std::uint32_t>(out, kArchiveVersion);
  for (const auto& rec : records) {
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(rec.name.size()));
    out.write(rec.name.data(), static_cast<std::streamsize>(rec.name.size()));
    const Shape& shape = rec.tensor.shape();
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(shape.size()));
    for (std::size_t d : shape) detail::put_le<std::uint64_t>(out, d);
    for (real v : rec.tensor.data()) detail::put_le<std::uint64_t>(out, std::bit_cast<std::uint64_t>(double(v)));
  }
  if (!out) throw std::runtime_error("write to '" + path.string() + "' failed");
}

inline std::vector<NamedTensor> load_archive(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open '" + path.string() + "' for reading");
  std::array<char, 4> magic{};
  if (!in.read(magic.data(), magic.size()) || magic != kArchiveMagic)
    throw SchemaError("'" + path.string() + "' is not a TOPF archive");
  std::uint32_t version = 0;
  if (!detail::get_le(in, version) || version != kArchiveVersion)
    throw SchemaError("unsupported TOPF archive version " + std::to_string(version));

  std::vector<NamedTensor> out;
  std::uint32_t name_len = 0;
  while (detail::get_le(in, name_len)) {
    auto truncated = [&] { return SchemaError("truncated record in '" + path.string() + "'"); };
    if (name_len > (1u << 16)) throw SchemaError("implausible name length in '" + path.string() + "'");
    std::string name(name_len, '\0');
    if (!in.read(name.data(), name_len)) throw truncated();
    std::uint32_t rank = 0;
    if (!detail::get_le(in, rank)) throw truncated();
    if (rank > 2) throw SchemaError("record '" + name + "' has unsupported rank " + std::to_string(rank));
    Shape shape(rank);
    for (auto& d : shape) {
      std::uint64_t v = 0;
      if (!detail::get_le(in, v)) throw truncated();
      d = static_cast<std::size_t>(v);
    }
    std::vector<real> data(numel_of(shape));
    for (auto& x : data) {
      std::uint64_t bits = 0;
      if (!detail::get_le(in, bits)) throw truncated();
      x = static_cast<real>(std::bit_cast<double>(bits));
    }
    out.push_back({std::move(name), Tensor(std::move(shape), std::move(data))});
  }
  return out;
}

}  // namespace topforge
