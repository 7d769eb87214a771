#include "ncatlas/decoder.hpp"

#include "ncatlas/error.hpp"
#include "ncatlas/parallel.hpp"

#include <algorithm>
#include <cmath>

namespace ncatlas {

std::string_view to_string(ScoreMode mode) { return mode == ScoreMode::mean100 ? "mean100" : "sum100"; }

ScoreMode parse_score_mode(std::string_view text) {
    if (text == "mean100") return ScoreMode::mean100;
    if (text == "sum100") return ScoreMode::sum100;
    throw Error(ErrorCode::invalid_argument, "unknown score mode '" + std::string(text) + "' (expected mean100 or sum100)");
}

NeuronAddress address_of(const ModelConfig& config, std::size_t flat, MatrixKind kind) {
    return {static_cast<std::uint32_t>(flat / config.d_ff), static_cast<std::uint32_t>(flat % config.d_ff), kind};
}

namespace {

void check_vocab_depth(const ModelConfig& config, std::size_t k) {
    if (config.vocab_size < normalization_depth)
        throw Error(ErrorCode::invalid_argument, "vocabulary of " + std::to_string(config.vocab_size) +
                                                     " tokens is smaller than the top-100 normalization depth");
    if (k > config.vocab_size)
        throw Error(ErrorCode::invalid_argument,
                    "k = " + std::to_string(k) + " exceeds vocab size " + std::to_string(config.vocab_size));
}

void fill_decode_input(const ModelCheckpoint& ckpt, const NeuronAddress& address, const DecodeOptions& options,
                       std::span<float> out) {
    const auto& layer = ckpt.layers[address.layer];
    switch (address.kind) {
    case MatrixKind::up:
        std::copy_n(layer.up_proj.row(address.neuron).begin(), out.size(), out.begin());
        break;
    case MatrixKind::gate:
        std::copy_n(layer.gate_proj.row(address.neuron).begin(), out.size(), out.begin());
        break;
    case MatrixKind::down_column:
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = layer.down_proj(i, address.neuron);
        break;
    }
    if (options.apply_final_norm) {
        const Vector raw(out.begin(), out.end());
        rms_norm_into(raw, ckpt.final_norm, static_cast<float>(ckpt.config.norm_eps), out);
    }
}

} // namespace

Vector decode_input(const ModelCheckpoint& ckpt, const NeuronAddress& address, const DecodeOptions& options) {
    ckpt.check_address(address);
    Vector out(ckpt.config.d_model);
    fill_decode_input(ckpt, address, options, out);
    return out;
}

DecodedNeuron summarize_probabilities(const NeuronAddress& address, std::span<const float> probabilities,
                                      std::size_t k) {
    DecodedNeuron d;
    d.address = address;
    const std::size_t depth = std::max(k, normalization_depth);
    auto top = top_k(probabilities, depth);
    double sum = 0.0;
    for (std::size_t i = 0; i < normalization_depth; ++i) sum += top[i].value;
    d.top100_sum = static_cast<float>(sum);
    d.top100_mean = static_cast<float>(sum / double(normalization_depth));
    top.resize(k);
    d.top_tokens = std::move(top);
    return d;
}

NeuronDecode decode_neuron(const ModelCheckpoint& ckpt, const NeuronAddress& address, const DecodeOptions& options,
                           std::size_t k) {
    ckpt.check_address(address);
    check_vocab_depth(ckpt.config, k);
    Matrix input(1, ckpt.config.d_model);
    fill_decode_input(ckpt, address, options, input.row(0));
    Matrix logits = matmul(input, ckpt.lm_head, {options.accumulation});
    softmax_inplace(logits.row(0));
    NeuronDecode out;
    out.probabilities.assign(logits.row(0).begin(), logits.row(0).end());
    out.summary = summarize_probabilities(address, out.probabilities, k);
    return out;
}

double normalized_token_probability(float token_probability, float top100_sum, ScoreMode mode) {
    const double ratio = double(token_probability) / double(top100_sum);
    return mode == ScoreMode::mean100 ? ratio * double(normalization_depth) : ratio;
}

double normalized_token_probability(const NeuronDecode& decoded, TokenId token, ScoreMode mode) {
    if (token >= decoded.probabilities.size())
        throw Error(ErrorCode::unknown_token, "token id " + std::to_string(token) + " is outside the vocabulary");
    return normalized_token_probability(decoded.probabilities[token], decoded.summary.top100_sum, mode);
}

double cosine_to_token(const ModelCheckpoint& ckpt, const NeuronAddress& address, TokenId token) {
    if (token >= ckpt.config.vocab_size)
        throw Error(ErrorCode::unknown_token, "token id " + std::to_string(token) + " is outside the vocabulary");
    const Vector w = ckpt.weight_vector(address);
    const auto u = ckpt.lm_head.row(token);
    const double wu = dot_f64(w, u);
    const double ww = dot_f64(w, w);
    const double uu = dot_f64(u, u);
    if (ww == 0.0 || uu == 0.0)
        throw Error(ErrorCode::invalid_argument, "cosine similarity is undefined for a zero-norm vector");
    return std::clamp(wu / (std::sqrt(ww) * std::sqrt(uu)), -1.0, 1.0);
}

void stream_decode(const ModelCheckpoint& ckpt, const DecodeOptions& options, std::size_t batch_size,
                   const DecodeVisitor& visit) {
    if (batch_size == 0) throw Error(ErrorCode::invalid_argument, "batch size must be >= 1");
    const auto& config = ckpt.config;
    const std::size_t total = config.neuron_count();
    const std::size_t d = config.d_model;
    for (std::size_t first = 0; first < total; first += batch_size) {
        const std::size_t rows = std::min(batch_size, total - first);
        Matrix inputs(rows, d);
        parallel_for(rows, 64, [&](std::size_t begin, std::size_t end) {
            for (std::size_t i = begin; i < end; ++i)
                fill_decode_input(ckpt, address_of(config, first + i, options.matrix_kind), options, inputs.row(i));
        });
        Matrix probabilities = matmul(inputs, ckpt.lm_head, {options.accumulation});
        softmax_rows_inplace(probabilities);
        visit(first, probabilities);
    }
}

} // namespace ncatlas
