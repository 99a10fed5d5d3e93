// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <random>
#include <string>
#include <string_view>

namespace bdkit {

std::array<unsigned char, 32> sha256(std::string_view message);
std::string sha256_hex(std::string_view message);
std::string sha256_file_hex(const std::string& path);

/// Per-stage seed: the first 8 bytes (little-endian) of
/// HMAC-SHA256(key = root_seed as 8 little-endian bytes, message = stage_name).
std::uint64_t derive_seed(std::uint64_t root_seed, std::string_view stage_name);

using Rng = std::mt19937_64;

}  // namespace bdkit
