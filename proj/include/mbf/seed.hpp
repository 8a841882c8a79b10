#pragma once

#include <cstdint>
#include <string_view>

namespace mbf {

// SplitMix64 finalizer. Used to derive independent stream seeds from a
// master seed so parallel work is reproducible regardless of scheduling.
constexpr std::uint64_t mix64(std::uint64_t z) {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

constexpr std::uint64_t fnv1a(std::string_view text) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (char c : text) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  return h;
}

constexpr std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a) {
  return mix64(seed ^ mix64(a));
}

constexpr std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a,
                                    std::uint64_t b) {
  return derive_seed(derive_seed(seed, a), b);
}

// Per-voxel chain seed: hash(seed, patient_id, x, y).
constexpr std::uint64_t voxel_seed(std::uint64_t seed, std::string_view patient_id,
                                   int x, int y) {
  return derive_seed(derive_seed(seed, fnv1a(patient_id)),
                     static_cast<std::uint64_t>(static_cast<std::uint32_t>(x)),
                     static_cast<std::uint64_t>(static_cast<std::uint32_t>(y)));
}

}  // namespace mbf
