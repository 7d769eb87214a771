#include "ncatlas/neuron.hpp"

#include "ncatlas/error.hpp"

namespace ncatlas {

std::string_view to_string(MatrixKind kind) {
    switch (kind) {
    case MatrixKind::up: return "up";
    case MatrixKind::gate: return "gate";
    case MatrixKind::down_column: return "down-column";
    }
    return "up";
}

MatrixKind parse_matrix_kind(std::string_view text) {
    if (text == "up") return MatrixKind::up;
    if (text == "gate") return MatrixKind::gate;
    if (text == "down-column" || text == "down") return MatrixKind::down_column;
    throw Error(ErrorCode::invalid_argument,
                "unknown matrix kind '" + std::string(text) + "' (expected up, gate or down-column)");
}

std::string describe(const NeuronAddress& a) {
    std::string out = "layer " + std::to_string(a.layer) + " neuron " + std::to_string(a.neuron) +
                      " [0-based] = layer " + std::to_string(a.layer + 1) + " neuron " + std::to_string(a.neuron) +
                      " [1-based]";
    if (a.kind != MatrixKind::up) out += " (" + std::string(to_string(a.kind)) + ")";
    return out;
}

} // namespace ncatlas
