#pragma once

#include "ncatlas/config.hpp"
#include "ncatlas/neuron.hpp"
#include "ncatlas/numerics.hpp"
#include "ncatlas/safetensors.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace ncatlas {

struct LayerWeights {
    Matrix q_proj;     // [n_heads*head_dim x d_model]
    Matrix k_proj;     // [n_kv_heads*head_dim x d_model]
    Matrix v_proj;     // [n_kv_heads*head_dim x d_model]
    Matrix o_proj;     // [d_model x n_heads*head_dim]
    Vector attn_norm;  // [d_model]
    Vector mlp_norm;   // [d_model]
    Matrix gate_proj;  // [d_ff x d_model]
    Matrix up_proj;    // [d_ff x d_model]
    Matrix down_proj;  // [d_model x d_ff]
};

struct ModelCheckpoint {
    ModelConfig config;
    Matrix token_embeddings;  // [vocab x d_model]
    std::vector<LayerWeights> layers;
    Vector final_norm;        // [d_model]
    Matrix lm_head;           // [vocab x d_model]
    std::uint64_t fingerprint = 0;

    // Weight vector (length d_model) for a neuron: a row for up/gate, a column for down.
    Vector weight_vector(const NeuronAddress& address) const;
    void check_address(const NeuronAddress& address) const;
};

enum class DTypePolicy { promote_to_f32 };

// Reads config.json plus every *.safetensors file in `path` (a directory, or a
// single .safetensors file whose directory holds config.json).
ModelCheckpoint load_checkpoint(const std::filesystem::path& path, DTypePolicy policy = DTypePolicy::promote_to_f32);

// Shapes against config, finiteness, tied-embedding identity.
void validate_checkpoint(const ModelCheckpoint& ckpt);

std::uint64_t compute_fingerprint(const ModelCheckpoint& ckpt);
std::string fingerprint_hex(std::uint64_t fingerprint);

// Writes config.json and model.safetensors using Hugging Face tensor names.
void save_checkpoint(const ModelCheckpoint& ckpt, const std::filesystem::path& dir, DType dtype = DType::f32);

} // namespace ncatlas
