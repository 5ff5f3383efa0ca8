#include "cotrec/hash.hpp"

#include <openssl/evp.h>

#include <stdexcept>

namespace cotrec {

std::array<unsigned char, 32> sha256(std::string_view data) {
  std::array<unsigned char, 32> out{};
  unsigned int len = 0;
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  if (ctx == nullptr ||
      EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr) != 1 ||
      EVP_DigestUpdate(ctx, data.data(), data.size()) != 1 ||
      EVP_DigestFinal_ex(ctx, out.data(), &len) != 1) {
    EVP_MD_CTX_free(ctx);
    throw std::runtime_error("sha256: digest computation failed");
  }
  EVP_MD_CTX_free(ctx);
  return out;
}

namespace {
constexpr char kHexDigits[] = "0123456789abcdef";

std::string to_hex(const unsigned char* bytes, std::size_t n) {
  std::string s;
  s.reserve(2 * n);
  for (std::size_t i = 0; i < n; ++i) {
    s.push_back(kHexDigits[bytes[i] >> 4]);
    s.push_back(kHexDigits[bytes[i] & 0x0f]);
  }
  return s;
}
}  // namespace

std::string sha256_hex(std::string_view data) {
  auto d = sha256(data);
  return to_hex(d.data(), d.size());
}

std::string sha256_hex8(std::string_view data) {
  auto d = sha256(data);
  return to_hex(d.data(), 4);
}

std::uint64_t stable_u64(std::string_view data) {
  auto d = sha256(data);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v = (v << 8) | d[static_cast<std::size_t>(i)];
  return v;
}

double stable_unit(std::string_view data) {
  // 53 high bits give an exactly representable double in [0, 1).
  return static_cast<double>(stable_u64(data) >> 11) / 9007199254740992.0;
}

}  // namespace cotrec
