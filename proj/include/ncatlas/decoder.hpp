#pragma once

#include "ncatlas/checkpoint.hpp"
#include "ncatlas/neuron.hpp"
#include "ncatlas/numerics.hpp"

#include <cstddef>
#include <functional>
#include <vector>

namespace ncatlas {

// Number of top probabilities the normalization statistics are taken over.
inline constexpr std::size_t normalization_depth = 100;

enum class ScoreMode { mean100, sum100 };

std::string_view to_string(ScoreMode mode);
ScoreMode parse_score_mode(std::string_view text);

struct DecodeOptions {
    // Pass the weight vector through the final RMSNorm before the LM-head.
    bool apply_final_norm = false;
    MatrixKind matrix_kind = MatrixKind::up;
    Accumulation accumulation = Accumulation::f32;

    bool operator==(const DecodeOptions&) const = default;
};

struct DecodedNeuron {
    NeuronAddress address;
    std::vector<ScoredIndex> top_tokens;  // descending probability, ties by lower id
    float top100_mean = 0.0f;
    float top100_sum = 0.0f;

    bool operator==(const DecodedNeuron&) const = default;
};

struct NeuronDecode {
    Vector probabilities;  // softmax over the vocabulary
    DecodedNeuron summary;
};

// The vector fed to the LM-head: the raw weight vector, or its final-norm transform.
Vector decode_input(const ModelCheckpoint& ckpt, const NeuronAddress& address, const DecodeOptions& options);

// Top-k plus top-100 statistics of one probability row.
DecodedNeuron summarize_probabilities(const NeuronAddress& address, std::span<const float> probabilities,
                                      std::size_t k);

// The address's kind selects the weight vector; options.matrix_kind is not consulted.
NeuronDecode decode_neuron(const ModelCheckpoint& ckpt, const NeuronAddress& address,
                           const DecodeOptions& options = {}, std::size_t k = normalization_depth);

// p(token) divided by the top-100 mean (mean100) or the top-100 sum (sum100).
// Both are computed from the stored sum, so mean100 == 100 * sum100.
double normalized_token_probability(float token_probability, float top100_sum, ScoreMode mode);
double normalized_token_probability(const NeuronDecode& decoded, TokenId token, ScoreMode mode);

double cosine_to_token(const ModelCheckpoint& ckpt, const NeuronAddress& address, TokenId token);

NeuronAddress address_of(const ModelConfig& config, std::size_t flat_index, MatrixKind kind);

// Streams softmax-normalized decodes of every neuron in flat (layer, neuron)
// order, batch_size rows at a time. `visit` receives the flat index of the
// first row and the [rows x vocab] probability matrix.
using DecodeVisitor = std::function<void(std::size_t first, Matrix& probabilities)>;
void stream_decode(const ModelCheckpoint& ckpt, const DecodeOptions& options, std::size_t batch_size,
                   const DecodeVisitor& visit);

} // namespace ncatlas
