#pragma once

#include <string>
#include <string_view>

#include "json.hpp"

namespace mviz {

// Sorted keys, no whitespace, floats printed with "%.9g". Integers print
// as integers. Non-finite floats are rejected.
std::string canonical_dump(const nlohmann::json& j);

std::string sha256_hex(std::string_view bytes);

// sha256 of the canonical form.
std::string json_digest(const nlohmann::json& j);

}  // namespace mviz
