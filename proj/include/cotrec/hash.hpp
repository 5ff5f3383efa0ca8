#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <string_view>

namespace cotrec {

// SHA-256 digest of `data`.
std::array<unsigned char, 32> sha256(std::string_view data);

// Lowercase hex encoding of the full digest (64 chars).
std::string sha256_hex(std::string_view data);

// First 8 hex chars of the digest. Used as a short stable content tag.
std::string sha256_hex8(std::string_view data);

// First 8 digest bytes interpreted as a big-endian unsigned integer.
// Stable across platforms and processes, unlike std::hash.
std::uint64_t stable_u64(std::string_view data);

// stable_u64 mapped into [0, 1).
double stable_unit(std::string_view data);

}  // namespace cotrec
