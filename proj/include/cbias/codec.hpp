#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace cbias::codec {

// Base64 (RFC 4648, padded) of the little-endian IEEE-754 bytes.
std::string encode_f64(std::span<const double> values);
// Throws std::invalid_argument on bad alphabet, padding, or length.
std::vector<double> decode_f64(std::string_view text);

std::uint64_t fnv1a(std::string_view bytes);

}  // namespace cbias::codec
