#pragma once

#include "ncatlas/numerics.hpp"

#include <json.hpp>

#include <cstddef>
#include <filesystem>
#include <optional>

namespace ncatlas {

// Architectural configuration of a Llama-family checkpoint.
struct ModelConfig {
    std::size_t n_layers = 0;
    std::size_t d_model = 0;
    std::size_t d_ff = 0;
    std::size_t vocab_size = 0;
    std::size_t n_heads = 0;
    std::size_t n_kv_heads = 0;
    std::size_t head_dim = 0;
    double rope_theta = 10000.0;
    double norm_eps = 1e-5;
    bool tied_embeddings = false;
    std::optional<RopeScaling> rope_scaling;

    // Throws Error(invalid_argument) when an invariant fails.
    void validate() const;

    std::size_t neuron_count() const noexcept { return n_layers * d_ff; }
    std::size_t kv_dim() const noexcept { return n_kv_heads * head_dim; }

    bool operator==(const ModelConfig&) const = default;
};

// Accepts either the native field names (n_layers, d_model, ...) or the
// Hugging Face names (num_hidden_layers, hidden_size, ...).
ModelConfig config_from_json(const nlohmann::json& doc);
nlohmann::json config_to_json(const ModelConfig& config);

ModelConfig load_config(const std::filesystem::path& path);
void save_config(const ModelConfig& config, const std::filesystem::path& path);

} // namespace ncatlas
