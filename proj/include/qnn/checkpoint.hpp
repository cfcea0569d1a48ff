#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>

#include "qnn/network.hpp"

// QNET1 checkpoint layout, all integers and reals little-endian:
//   "QNET1"
//   u64 byte length, then the resolved architecture as compact JSON
//   u64 tensor count
//   per tensor: u32 rank, rank x u64 extents, product(extents) x f64
// Tensors follow Network::state() order.

namespace qnn {

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);

namespace detail {

template <typename T>
void write_le(std::ostream& os, T v) {
  auto bits = std::bit_cast<std::array<unsigned char, sizeof(T)>>(v);
  if constexpr (std::endian::native == std::endian::big) std::reverse(bits.begin(), bits.end());
  os.write(reinterpret_cast<const char*>(bits.data()), sizeof(T));
}

template <typename T>
T read_le(std::istream& is, const char* what) {
  std::array<unsigned char, sizeof(T)> bits{};
  if (!is.read(reinterpret_cast<char*>(bits.data()), sizeof(T))) {
    throw ParseError(std::string("checkpoint truncated while reading ") + what + " at byte " +
                     std::to_string(static_cast<long long>(is.tellg())));
  }
  if constexpr (std::endian::native == std::endian::big) std::reverse(bits.begin(), bits.end());
  return std::bit_cast<T>(bits);
}

}  // namespace detail

inline constexpr char kCheckpointMagic[] = "QNET1";

inline void save_checkpoint(Network& net, std::ostream& os) {
  os.write(kCheckpointMagic, 5);
  const std::string arch = arch_json::to_json(net.arch()).dump();
  detail::write_le<std::uint64_t>(os, arch.size());
  os.write(arch.data(), static_cast<std::streamsize>(arch.size()));
  const auto state = net.state();
  detail::write_le<std::uint64_t>(os, state.size());
  for (const auto& [name, t] : state) {
    detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(t->rank()));
    for (std::size_t e : t->shape()) detail::write_le<std::uint64_t>(os, e);
    for (double v : t->data()) detail::write_le<double>(os, v);
  }
}

inline Network load_checkpoint(std::istream& is) {
  char magic[5] = {};
  if (!is.read(magic, 5) || std::memcmp(magic, kCheckpointMagic, 5) != 0) {
    throw ParseError("not a QNET1 checkpoint (bad magic at byte 0)");
  }
  const auto len = detail::read_le<std::uint64_t>(is, "architecture length");
  if (len > (1ULL << 30)) throw ParseError("checkpoint architecture block too large at byte 5");
  std::string arch(len, '\0');
  if (!is.read(arch.data(), static_cast<std::streamsize>(len))) throw ParseError("checkpoint truncated in architecture");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(arch);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("checkpoint architecture is not valid JSON: ") + e.what());
  }
  Network net(arch_json::from_json(j));
  auto state = net.state();
  const auto count = detail::read_le<std::uint64_t>(is, "tensor count");
  if (count != state.size()) {
    throw ParseError("checkpoint holds " + std::to_string(count) + " tensors, architecture needs " +
                     std::to_string(state.size()));
  }
  for (auto& [name, t] : state) {
    const auto rank = detail::read_le<std::uint32_t>(is, "tensor rank");
    Shape shape(rank);
    for (auto& e : shape) e = detail::read_le<std::uint64_t>(is, "tensor extent");
    if (shape != t->shape()) {
      throw ParseError("checkpoint tensor " + name + " has shape " + shape_str(shape) + ", expected " +
                       shape_str(t->shape()));
    }
    for (double& v : t->data()) v = detail::read_le<double>(is, "tensor data");
  }
  return net;
}

inline void save_checkpoint(Network& net, const std::string& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw ParseError("cannot open " + path + " for writing");
  save_checkpoint(net, os);
}

inline Network load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ParseError("cannot open checkpoint " + path);
  return load_checkpoint(is);
}

}  // namespace qnn
