#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace ncatlas {

enum class DType { f32, f16, bf16, f64 };

std::size_t dtype_size(DType dtype);
std::string_view to_string(DType dtype);

struct TensorEntry {
    std::string name;
    DType dtype = DType::f32;
    std::vector<std::size_t> shape;
    std::uint64_t begin = 0;  // relative to the data section
    std::uint64_t end = 0;

    std::size_t element_count() const;
};

struct SafetensorsHeader {
    std::vector<TensorEntry> tensors;
    std::map<std::string, std::string> metadata;
    std::uint64_t data_offset = 0;  // 8 + header length
};

// A tensor promoted to float32.
struct Tensor {
    std::vector<std::size_t> shape;
    std::vector<float> values;
};

SafetensorsHeader read_safetensors_header(const std::filesystem::path& path);
std::map<std::string, Tensor> read_safetensors(const std::filesystem::path& path);

// Writes tensors in name order; values are converted to `dtype`.
void write_safetensors(const std::filesystem::path& path, const std::map<std::string, Tensor>& tensors,
                       DType dtype = DType::f32, const std::map<std::string, std::string>& metadata = {});

float f16_to_f32(std::uint16_t bits);
std::uint16_t f32_to_f16(float value);
float bf16_to_f32(std::uint16_t bits);
std::uint16_t f32_to_bf16(float value);

} // namespace ncatlas
