#include "ncatlas/engine.hpp"

#include "ncatlas/error.hpp"
#include "ncatlas/parallel.hpp"

#include <algorithm>
#include <cmath>
#include <random>

namespace ncatlas {

float ClampSpec::value_at(std::size_t position) const {
    if (per_position.empty()) return value;
    if (position >= per_position.size())
        throw Error(ErrorCode::out_of_range, "clamp schedule for " + describe(address) + " has " +
                                                 std::to_string(per_position.size()) + " values but position " +
                                                 std::to_string(position) + " was reached");
    return per_position[position];
}

void validate_clamps(const ModelCheckpoint& ckpt, std::span<const ClampSpec> clamps) {
    for (const auto& c : clamps) {
        if (c.address.kind != MatrixKind::up)
            throw Error(ErrorCode::invalid_argument, "clamps must reference up-projection neurons");
        ckpt.check_address(c.address);
        if (!std::isfinite(c.value)) throw Error(ErrorCode::invalid_argument, "clamp value must be finite");
        for (float v : c.per_position)
            if (!std::isfinite(v)) throw Error(ErrorCode::invalid_argument, "clamp schedule values must be finite");
    }
}

InferenceSession::InferenceSession(const ModelCheckpoint& ckpt, std::vector<ClampSpec> clamps) : ckpt_(&ckpt) {
    const auto& c = ckpt.config;
    rope_freq_ = rope_frequencies(c.head_dim, c.rope_theta, c.rope_scaling ? &*c.rope_scaling : nullptr);
    set_clamps(std::move(clamps));
}

void InferenceSession::set_clamps(std::vector<ClampSpec> clamps) {
    validate_clamps(*ckpt_, clamps);
    clamps_ = std::move(clamps);
    clamps_by_layer_.assign(ckpt_->config.n_layers, {});
    for (const auto& c : clamps_) clamps_by_layer_[c.address.layer].push_back(&c);
    reset();
}

void InferenceSession::reset() {
    k_cache_.assign(ckpt_->config.n_layers, {});
    v_cache_.assign(ckpt_->config.n_layers, {});
    tokens_.clear();
}

Vector InferenceSession::feed(std::span<const TokenId> tokens) {
    if (tokens.empty()) throw Error(ErrorCode::invalid_argument, "forward pass needs at least one token");
    const auto& ckpt = *ckpt_;
    const auto& c = ckpt.config;
    for (TokenId t : tokens)
        if (t >= c.vocab_size)
            throw Error(ErrorCode::unknown_token, "token id " + std::to_string(t) + " is outside the vocabulary");

    const std::size_t n = tokens.size();
    const std::size_t first = tokens_.size();
    const std::size_t d = c.d_model;
    const std::size_t hd = c.head_dim;
    const std::size_t q_dim = c.n_heads * hd;
    const std::size_t kv_dim = c.kv_dim();
    const std::size_t group = c.n_heads / c.n_kv_heads;
    const float eps = static_cast<float>(c.norm_eps);
    const float scale = 1.0f / std::sqrt(static_cast<float>(hd));

    Matrix x(n, d);
    for (std::size_t t = 0; t < n; ++t) {
        const auto e = ckpt.token_embeddings.row(tokens[t]);
        std::copy(e.begin(), e.end(), x.row(t).begin());
    }

    Matrix normed(n, d);
    for (std::size_t l = 0; l < c.n_layers; ++l) {
        const auto& w = ckpt.layers[l];

        for (std::size_t t = 0; t < n; ++t) rms_norm_into(x.row(t), w.attn_norm, eps, normed.row(t));
        Matrix q = matmul(normed, w.q_proj);
        Matrix k = matmul(normed, w.k_proj);
        Matrix v = matmul(normed, w.v_proj);
        for (std::size_t t = 0; t < n; ++t) {
            for (std::size_t h = 0; h < c.n_heads; ++h) rope_apply(q.row(t).subspan(h * hd, hd), first + t, rope_freq_);
            for (std::size_t h = 0; h < c.n_kv_heads; ++h)
                rope_apply(k.row(t).subspan(h * hd, hd), first + t, rope_freq_);
        }
        auto& kc = k_cache_[l];
        auto& vc = v_cache_[l];
        kc.insert(kc.end(), k.values().begin(), k.values().end());
        vc.insert(vc.end(), v.values().begin(), v.values().end());

        Matrix attended(n, q_dim);
        parallel_for(n * c.n_heads, 4, [&](std::size_t begin, std::size_t end) {
            std::vector<float> weights;
            for (std::size_t job = begin; job < end; ++job) {
                const std::size_t t = job / c.n_heads;
                const std::size_t h = job % c.n_heads;
                const std::size_t kvh = h / group;
                const std::size_t keys = first + t + 1;  // causal
                const auto qh = q.row(t).subspan(h * hd, hd);
                weights.resize(keys);
                for (std::size_t s = 0; s < keys; ++s) {
                    const std::span<const float> ks(kc.data() + s * kv_dim + kvh * hd, hd);
                    weights[s] = dot(qh, ks) * scale;
                }
                softmax_inplace(weights);
                auto out = attended.row(t).subspan(h * hd, hd);
                std::fill(out.begin(), out.end(), 0.0f);
                for (std::size_t s = 0; s < keys; ++s) {
                    const float* vs = vc.data() + s * kv_dim + kvh * hd;
                    for (std::size_t i = 0; i < hd; ++i) out[i] += weights[s] * vs[i];
                }
            }
        });
        Matrix attn_out = matmul(attended, w.o_proj);
        for (std::size_t i = 0; i < x.size(); ++i) x.values()[i] += attn_out.values()[i];

        for (std::size_t t = 0; t < n; ++t) rms_norm_into(x.row(t), w.mlp_norm, eps, normed.row(t));
        Matrix gate = matmul(normed, w.gate_proj);
        Matrix up = matmul(normed, w.up_proj);
        const auto& layer_clamps = clamps_by_layer_[l];
        for (std::size_t t = 0; t < n; ++t) {
            auto row = up.row(t);
            Vector natural;
            if (observer_) natural.assign(row.begin(), row.end());
            for (const ClampSpec* cs : layer_clamps) row[cs->address.neuron] = cs->value_at(first + t);
            if (observer_) observer_(l, first + t, natural, row);
        }
        for (std::size_t i = 0; i < gate.size(); ++i) gate.values()[i] = silu(gate.values()[i]) * up.values()[i];
        Matrix mlp_out = matmul(gate, w.down_proj);
        for (std::size_t i = 0; i < x.size(); ++i) x.values()[i] += mlp_out.values()[i];
    }

    tokens_.insert(tokens_.end(), tokens.begin(), tokens.end());
    Matrix last(1, d);
    rms_norm_into(x.row(n - 1), ckpt.final_norm, eps, last.row(0));
    Matrix logits = matmul(last, ckpt.lm_head);
    return {logits.values().begin(), logits.values().end()};
}

Vector forward(const ModelCheckpoint& ckpt, std::span<const TokenId> tokens, std::span<const ClampSpec> clamps) {
    InferenceSession session(ckpt, {clamps.begin(), clamps.end()});
    return session.feed(tokens);
}

Vector next_token_distribution(const ModelCheckpoint& ckpt, std::span<const TokenId> tokens,
                               std::span<const ClampSpec> clamps) {
    Vector p = forward(ckpt, tokens, clamps);
    softmax_inplace(p);
    return p;
}

std::vector<std::vector<float>> probe_up_activations(const ModelCheckpoint& ckpt, std::span<const TokenId> tokens,
                                                     std::span<const NeuronAddress> addresses) {
    for (const auto& a : addresses) ckpt.check_address(a);
    std::vector<std::vector<float>> traces(addresses.size(), std::vector<float>(tokens.size()));
    InferenceSession session(ckpt);
    session.set_observer([&](std::size_t layer, std::size_t pos, std::span<const float> natural, std::span<const float>) {
        for (std::size_t i = 0; i < addresses.size(); ++i)
            if (addresses[i].layer == layer) traces[i][pos] = natural[addresses[i].neuron];
    });
    session.feed(tokens);
    return traces;
}

std::string_view to_string(Sampling sampling) { return sampling == Sampling::greedy ? "greedy" : "temperature"; }

Sampling parse_sampling(std::string_view text) {
    if (text == "greedy") return Sampling::greedy;
    if (text == "temperature") return Sampling::temperature;
    throw Error(ErrorCode::invalid_argument, "unknown sampling mode '" + std::string(text) + "' (greedy|temperature)");
}

void validate_params(const GenerationParams& params) {
    if (params.max_new_tokens == 0) throw Error(ErrorCode::invalid_argument, "max_new_tokens must be >= 1");
    if (params.sampling == Sampling::temperature && !(params.temperature > 0.0 && std::isfinite(params.temperature)))
        throw Error(ErrorCode::invalid_argument, "temperature must be a positive number");
}

namespace {

TokenId argmax(std::span<const float> logits) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < logits.size(); ++i)
        if (logits[i] > logits[best]) best = i;
    return static_cast<TokenId>(best);
}

class Sampler {
public:
    explicit Sampler(const GenerationParams& params) : params_(params), rng_(params.seed) {}

    TokenId pick(std::span<const float> logits) {
        if (params_.sampling == Sampling::greedy) return argmax(logits);
        const float peak = *std::max_element(logits.begin(), logits.end());
        std::vector<double> weights(logits.size());
        double total = 0.0;
        for (std::size_t i = 0; i < logits.size(); ++i) {
            weights[i] = std::exp((double(logits[i]) - peak) / params_.temperature);
            total += weights[i];
        }
        // 53 random bits -> [0, 1), independent of the standard library's distributions.
        const double u = double(rng_() >> 11) * 0x1.0p-53 * total;
        double acc = 0.0;
        for (std::size_t i = 0; i < weights.size(); ++i) {
            acc += weights[i];
            if (u < acc) return static_cast<TokenId>(i);
        }
        return argmax(logits);
    }

private:
    const GenerationParams& params_;
    std::mt19937_64 rng_;
};

} // namespace

std::vector<TokenId> generate_in_session(InferenceSession& session, std::span<const TokenId> input,
                                         const GenerationParams& params, const TokenCallback& on_token) {
    validate_params(params);
    Sampler sampler(params);
    std::vector<TokenId> out;
    Vector logits = session.feed(input);
    for (std::size_t i = 0; i < params.max_new_tokens; ++i) {
        const TokenId next = sampler.pick(logits);
        out.push_back(next);
        if (on_token) on_token(next);
        if (params.stop_token_ids.count(next) || i + 1 == params.max_new_tokens) break;
        if (params.use_kv_cache) {
            logits = session.feed(std::span<const TokenId>(&next, 1));
        } else {
            std::vector<TokenId> all = session.tokens();
            all.push_back(next);
            session.reset();
            logits = session.feed(all);
        }
    }
    return out;
}

std::vector<TokenId> generate(const ModelCheckpoint& ckpt, std::span<const TokenId> prompt,
                              std::span<const ClampSpec> clamps, const GenerationParams& params,
                              const TokenCallback& on_token) {
    if (prompt.empty()) throw Error(ErrorCode::invalid_argument, "prompt must not be empty");
    validate_params(params);
    InferenceSession session(ckpt, {clamps.begin(), clamps.end()});
    return generate_in_session(session, prompt, params, on_token);
}

} // namespace ncatlas
