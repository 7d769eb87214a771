#pragma once

#include "ncatlas/chat_template.hpp"
#include "ncatlas/checkpoint.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>

namespace ncatlas {

// Synthetic checkpoints for tests and demos.
//   base     random Llama-architecture weights
//   planted  base plus one up row = alpha * lm_head[token]
//   causal   analytic model: every token embeds as scale*e0, attention output
//            is zero, and a single MLP neuron writes along e1, which only the
//            target token's LM-head row reads (logit = beta * normalized e1)
//   uniform  base with all up rows zero, so every decode is uniform
enum class FixtureVariant { base, planted, causal, uniform };

std::string_view to_string(FixtureVariant variant);
FixtureVariant parse_fixture_variant(std::string_view text);

ModelConfig tiny_config();  // 4 layers, d_model 64, d_ff 128, vocab 256

struct FixtureSpec {
    FixtureVariant variant = FixtureVariant::base;
    std::uint64_t seed = 0;
    ModelConfig config = tiny_config();

    // planted / causal target; drawn from the seed when unset
    std::optional<NeuronAddress> neuron;
    std::optional<TokenId> token;

    float alpha = 5.0f;               // planted scale
    float embed_scale = 1.0f;         // causal: embedding = embed_scale * e0
    float gate_preactivation = 4.0f;  // causal: gate output of the neuron
    float natural_activation = -0.5f; // causal: unclamped up output
    float beta = 2.0f;                // causal: lm_head[token] = beta * e1
};

struct Fixture {
    ModelCheckpoint checkpoint;
    FixtureVariant variant = FixtureVariant::base;
    NeuronAddress neuron;  // planted / causal neuron (meaningless for base/uniform)
    TokenId token = 0;
};

Fixture make_fixture(const FixtureSpec& spec);

ChatTemplate fixture_chat_template();

// Writes config.json, model.safetensors, tokenizer.json (256 byte tokens),
// chat_template.json and fixture.json (variant, neuron, token, seed).
void write_fixture(const Fixture& fixture, const FixtureSpec& spec, const std::filesystem::path& dir,
                   DType dtype = DType::f32);

} // namespace ncatlas
