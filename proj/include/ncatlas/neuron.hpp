#pragma once

#include <compare>
#include <cstdint>
#include <string>
#include <string_view>

namespace ncatlas {

// Which weight vector a neuron index refers to: a row of the up or gate
// projection, or a column of the down projection.
enum class MatrixKind : std::uint8_t { up, gate, down_column };

std::string_view to_string(MatrixKind kind);
MatrixKind parse_matrix_kind(std::string_view text);

// Coordinates are 0-based internally. The 1-based rendering numbers
// layers from 1 and keeps the neuron index as is.
struct NeuronAddress {
    std::uint32_t layer = 0;
    std::uint32_t neuron = 0;
    MatrixKind kind = MatrixKind::up;

    auto operator<=>(const NeuronAddress&) const = default;
};

std::string describe(const NeuronAddress& address);

} // namespace ncatlas
