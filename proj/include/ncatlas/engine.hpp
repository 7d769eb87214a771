#pragma once

#include "ncatlas/checkpoint.hpp"
#include "ncatlas/neuron.hpp"
#include "ncatlas/numerics.hpp"

#include <cstdint>
#include <functional>
#include <set>
#include <span>
#include <vector>

namespace ncatlas {

// Forces the up-projection output of one neuron (before it is multiplied by
// SiLU(gate)) at every sequence position. A non-empty per_position schedule
// replaces `value` with one value per absolute position.
struct ClampSpec {
    NeuronAddress address;
    float value = 0.0f;
    std::vector<float> per_position;

    float value_at(std::size_t position) const;
    bool operator==(const ClampSpec&) const = default;
};

void validate_clamps(const ModelCheckpoint& ckpt, std::span<const ClampSpec> clamps);

// Called once per (layer, position) with the natural up-projection outputs and
// the outputs actually used after clamping.
using UpProjectionObserver = std::function<void(std::size_t layer, std::size_t position,
                                                std::span<const float> natural, std::span<const float> applied)>;

// Incremental forward pass with a KV cache. Not thread-safe; separate sessions
// over the same checkpoint may run concurrently.
class InferenceSession {
public:
    explicit InferenceSession(const ModelCheckpoint& ckpt, std::vector<ClampSpec> clamps = {});

    // Replacing clamps invalidates the cache, so the session is reset.
    void set_clamps(std::vector<ClampSpec> clamps);
    const std::vector<ClampSpec>& clamps() const noexcept { return clamps_; }
    void set_observer(UpProjectionObserver observer) { observer_ = std::move(observer); }

    // Appends tokens and returns the logits at the last appended position.
    Vector feed(std::span<const TokenId> tokens);
    void reset();

    std::size_t position() const noexcept { return tokens_.size(); }
    const std::vector<TokenId>& tokens() const noexcept { return tokens_; }
    const ModelCheckpoint& checkpoint() const noexcept { return *ckpt_; }

private:
    const ModelCheckpoint* ckpt_;
    std::vector<ClampSpec> clamps_;
    std::vector<std::vector<const ClampSpec*>> clamps_by_layer_;
    std::vector<double> rope_freq_;
    std::vector<std::vector<float>> k_cache_;  // per layer, [position x kv_dim]
    std::vector<std::vector<float>> v_cache_;
    std::vector<TokenId> tokens_;
    UpProjectionObserver observer_;
};

Vector forward(const ModelCheckpoint& ckpt, std::span<const TokenId> tokens, std::span<const ClampSpec> clamps = {});
Vector next_token_distribution(const ModelCheckpoint& ckpt, std::span<const TokenId> tokens,
                               std::span<const ClampSpec> clamps = {});

// Natural (unclamped) up-projection output of each address at every position.
std::vector<std::vector<float>> probe_up_activations(const ModelCheckpoint& ckpt, std::span<const TokenId> tokens,
                                                     std::span<const NeuronAddress> addresses);

enum class Sampling { greedy, temperature };

std::string_view to_string(Sampling sampling);
Sampling parse_sampling(std::string_view text);

struct GenerationParams {
    std::size_t max_new_tokens = 64;
    Sampling sampling = Sampling::greedy;
    double temperature = 0.7;  // ignored by greedy
    std::uint64_t seed = 0;    // ignored by greedy
    std::set<TokenId> stop_token_ids;
    bool use_kv_cache = true;  // false recomputes the whole sequence every step
};

void validate_params(const GenerationParams& params);

using TokenCallback = std::function<void(TokenId)>;

// Generated ids (the stop token, when hit, is included as the last id).
std::vector<TokenId> generate(const ModelCheckpoint& ckpt, std::span<const TokenId> prompt,
                              std::span<const ClampSpec> clamps, const GenerationParams& params,
                              const TokenCallback& on_token = {});

// Same loop on an existing session: feeds `input` after whatever the session
// already holds, then samples. The last sampled token is not fed back.
std::vector<TokenId> generate_in_session(InferenceSession& session, std::span<const TokenId> input,
                                         const GenerationParams& params, const TokenCallback& on_token = {});

} // namespace ncatlas
