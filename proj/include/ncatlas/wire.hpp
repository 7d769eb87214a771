#pragma once

// JSON encodings shared by the HTTP service and the CLI's data output.

#include "ncatlas/engine.hpp"
#include "ncatlas/lab.hpp"
#include "ncatlas/query.hpp"

#include <json.hpp>

namespace ncatlas::wire {

using nlohmann::json;

// {"layer", "neuron", "one_based_layer", "kind"}; one_based_layer is the 1-based layer.
json address(const NeuronAddress& address);
NeuronAddress address_from(const json& doc, MatrixKind default_kind = MatrixKind::up);

json feature_hits(std::span<const FeatureHit> hits);
json heatmap_summary(const Heatmap& map);
json profile(const NeuronProfile& profile, std::size_t top_n);
json diff_report(const DiffReport& report);
json stability(const StabilityReport& report);
json sweep(const SweepResult& sweep);
json params(const GenerationParams& params);

// [{"layer", "neuron", "value"} or {"layer", "neuron", "per_position": [...]}]
std::vector<ClampSpec> clamps_from(const json& doc);
json clamps(std::span<const ClampSpec> clamps);
GenerationParams params_from(const json& doc, GenerationParams defaults = {});

} // namespace ncatlas::wire
