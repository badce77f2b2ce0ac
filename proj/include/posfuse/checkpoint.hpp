#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>

#include "config.hpp"
#include "model.hpp"

namespace posfuse {

// Checkpoint layout:
//   "posfuse-checkpoint 1\n"
//   ModelConfig as `key = value` lines
//   "---\n"
//   u64 parameter count, then per parameter:
//     u64 name length, name bytes, u64 rank, u64 dims[rank],
//     element_count doubles
// All integers and doubles little-endian.

namespace detail {

inline constexpr const char* kCheckpointMagic = "posfuse-checkpoint 1";

template <typename T>
void write_le(std::ostream& out, T v) {
  static_assert(sizeof(T) == 8);
  std::uint64_t bits;
  std::memcpy(&bits, &v, 8);
  if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap64(bits);
  out.write(reinterpret_cast<const char*>(&bits), 8);
}

template <typename T>
T read_le(std::istream& in) {
  std::uint64_t bits = 0;
  if (!in.read(reinterpret_cast<char*>(&bits), 8)) throw DataError("checkpoint: truncated");
  if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap64(bits);
  T v;
  std::memcpy(&v, &bits, 8);
  return v;
}

}  // namespace detail

inline void save_checkpoint(Model& model, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write checkpoint '" + path + "'");
  out << detail::kCheckpointMagic << '\n'
      << format_key_values(model.config().to_key_values()) << "---\n";
  const auto params = model.parameters();
  detail::write_le<std::uint64_t>(out, params.size());
  for (const auto* p : params) {
    detail::write_le<std::uint64_t>(out, p->name.size());
    out.write(p->name.data(), static_cast<std::streamsize>(p->name.size()));
    detail::write_le<std::uint64_t>(out, p->value.rank());
    for (std::size_t d : p->value.shape()) detail::write_le<std::uint64_t>(out, d);
    for (double v : p->value.values()) detail::write_le<double>(out, v);
  }
}

inline Model load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint '" + path + "'");
  std::string line;
  std::getline(in, line);
  if (line != detail::kCheckpointMagic) throw DataError("'" + path + "' is not a checkpoint");
  std::string header;
  while (std::getline(in, line) && line != "---") header += line + "\n";
  if (line != "---") throw DataError("checkpoint: missing config terminator");
  Model model(ModelConfig::from_key_values(parse_key_values(header)), 0);
  const auto count = detail::read_le<std::uint64_t>(in);
  if (count != model.parameters().size()) throw DataError("checkpoint: parameter count mismatch");
  for (std::uint64_t i = 0; i < count; ++i) {
    const auto len = detail::read_le<std::uint64_t>(in);
    std::string name(len, '\0');
    if (!in.read(name.data(), static_cast<std::streamsize>(len)))
      throw DataError("checkpoint: truncated name");
    Parameter* p = model.find(name);
    if (!p) throw DataError("checkpoint: unknown parameter '" + name + "'");
    const auto rank = detail::read_le<std::uint64_t>(in);
    Shape shape(rank);
    for (auto& d : shape) d = detail::read_le<std::uint64_t>(in);
    if (shape != p->value.shape())
      throw DataError("checkpoint: shape mismatch for '" + name + "'");
    for (double& v : p->value.values()) v = detail::read_le<double>(in);
  }
  return model;
}

}  // namespace posfuse
