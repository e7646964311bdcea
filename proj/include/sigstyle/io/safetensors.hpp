#pragma once

#include <filesystem>
#include <map>
#include <string>

#include "sigstyle/tensor.hpp"

namespace sigstyle {

// Integer types are widened to double on read and rounded on write.
enum class StoredType { f16, bf16, f32, f64, i32, i64 };

// Tensors of a .safetensors file, widened to double.
struct SafetensorsFile {
    std::map<std::string, Tensor> tensors;
    std::map<std::string, std::string> metadata;
};

SafetensorsFile read_safetensors(const std::filesystem::path& path);
// Writes tensors in name order with the requested element type.
void write_safetensors(const std::filesystem::path& path, const std::map<std::string, Tensor>& tensors,
                       StoredType type = StoredType::f32, const std::map<std::string, std::string>& metadata = {});

}  // namespace sigstyle
