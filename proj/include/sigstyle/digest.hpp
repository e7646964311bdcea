#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>

#include "sigstyle/tensor.hpp"

namespace sigstyle {

// Lower-case hex SHA-256.
std::string sha256_hex(std::span<const std::uint8_t> bytes);
// Digest over (name, shape, raw doubles) of every tensor in name order.
std::string tensors_digest(const std::map<std::string, Tensor>& tensors);

}  // namespace sigstyle
