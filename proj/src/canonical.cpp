#include "mviz/canonical.hpp"

#include <openssl/evp.h>

#include <cmath>
#include <cstdio>

#include "mviz/error.hpp"

namespace mviz {

namespace {

void write_string(std::string& out, const std::string& s) {
  // nlohmann's dump already escapes strings correctly.
  out += nlohmann::json(s).dump();
}

void write(std::string& out, const nlohmann::json& j) {
  switch (j.type()) {
    case nlohmann::json::value_t::object: {
      out += '{';
      bool first = true;
      for (auto it = j.begin(); it != j.end(); ++it) {  // std::map keeps keys sorted
        if (!first) out += ',';
        first = false;
        write_string(out, it.key());
        out += ':';
        write(out, it.value());
      }
      out += '}';
      break;
    }
    case nlohmann::json::value_t::array: {
      out += '[';
      for (std::size_t i = 0; i < j.size(); ++i) {
        if (i) out += ',';
        write(out, j[i]);
      }
      out += ']';
      break;
    }
    case nlohmann::json::value_t::number_float: {
      const double v = j.get<double>();
      if (!std::isfinite(v)) throw Error(ErrorCode::kInvalidArgument, "non-finite value in canonical JSON");
      char buf[32];
      // -0 prints as "-0"; normalise so equal values serialise identically.
      std::snprintf(buf, sizeof buf, "%.9g", v == 0.0 ? 0.0 : v);
      out += buf;
      break;
    }
    default:
      out += j.dump();
  }
}

}  // namespace

std::string canonical_dump(const nlohmann::json& j) {
  std::string out;
  write(out, j);
  return out;
}

std::string sha256_hex(std::string_view bytes) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), md, &len, EVP_sha256(), nullptr) != 1) {
    throw Error(ErrorCode::kIoFailure, "sha256 failed");
  }
  static constexpr char kHex[] = "0123456789abcdef";
  std::string hex;
  hex.reserve(2 * len);
  for (unsigned int i = 0; i < len; ++i) {
    hex += kHex[md[i] >> 4];
    hex += kHex[md[i] & 15];
  }
  return hex;
}

std::string json_digest(const nlohmann::json& j) { return sha256_hex(canonical_dump(j)); }

}  // namespace mviz
