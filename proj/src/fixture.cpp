#include "ncatlas/fixture.hpp"

#include "ncatlas/error.hpp"
#include "ncatlas/vocabulary.hpp"

#include <json.hpp>

#include <cmath>
#include <fstream>
#include <numbers>
#include <random>

namespace ncatlas {

namespace {

// Box-Muller over raw 64-bit draws so fixtures are identical across standard libraries.
class Gaussian {
public:
    explicit Gaussian(std::uint64_t seed) : rng_(seed) {}

    float operator()(float stddev) {
        if (has_spare_) {
            has_spare_ = false;
            return static_cast<float>(spare_ * stddev);
        }
        double u1 = 0.0;
        while (u1 == 0.0) u1 = uniform();
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        spare_ = r * std::sin(2.0 * std::numbers::pi * u2);
        has_spare_ = true;
        return static_cast<float>(r * std::cos(2.0 * std::numbers::pi * u2) * stddev);
    }

    std::uint64_t below(std::uint64_t n) { return rng_() % n; }

private:
    double uniform() { return double(rng_() >> 11) * 0x1.0p-53; }

    std::mt19937_64 rng_;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

Matrix random_matrix(Gaussian& g, std::size_t rows, std::size_t cols, float stddev) {
    Matrix m(rows, cols);
    for (float& v : m.values()) v = g(stddev);
    return m;
}

Vector norm_weights(Gaussian& g, std::size_t n) {
    Vector v(n);
    for (float& x : v) x = 1.0f + g(0.1f);
    return v;
}

ModelCheckpoint random_checkpoint(const ModelConfig& c, Gaussian& g) {
    ModelCheckpoint ckpt;
    ckpt.config = c;
    const float in_scale = 1.0f / std::sqrt(float(c.d_model));
    ckpt.token_embeddings = random_matrix(g, c.vocab_size, c.d_model, 1.0f);
    for (std::size_t l = 0; l < c.n_layers; ++l) {
        LayerWeights w;
        w.q_proj = random_matrix(g, c.n_heads * c.head_dim, c.d_model, in_scale);
        w.k_proj = random_matrix(g, c.kv_dim(), c.d_model, in_scale);
        w.v_proj = random_matrix(g, c.kv_dim(), c.d_model, in_scale);
        w.o_proj = random_matrix(g, c.d_model, c.n_heads * c.head_dim, 1.0f / std::sqrt(float(c.n_heads * c.head_dim)));
        w.attn_norm = norm_weights(g, c.d_model);
        w.mlp_norm = norm_weights(g, c.d_model);
        w.gate_proj = random_matrix(g, c.d_ff, c.d_model, in_scale);
        w.up_proj = random_matrix(g, c.d_ff, c.d_model, in_scale);
        w.down_proj = random_matrix(g, c.d_model, c.d_ff, 1.0f / std::sqrt(float(c.d_ff)));
        ckpt.layers.push_back(std::move(w));
    }
    ckpt.final_norm = norm_weights(g, c.d_model);
    ckpt.lm_head = c.tied_embeddings ? ckpt.token_embeddings : random_matrix(g, c.vocab_size, c.d_model, 0.25f);
    return ckpt;
}

} // namespace

std::string_view to_string(FixtureVariant v) {
    switch (v) {
    case FixtureVariant::base: return "base";
    case FixtureVariant::planted: return "planted";
    case FixtureVariant::causal: return "causal";
    case FixtureVariant::uniform: return "uniform";
    }
    return "base";
}

FixtureVariant parse_fixture_variant(std::string_view text) {
    if (text == "base") return FixtureVariant::base;
    if (text == "planted") return FixtureVariant::planted;
    if (text == "causal") return FixtureVariant::causal;
    if (text == "uniform") return FixtureVariant::uniform;
    throw Error(ErrorCode::invalid_argument,
                "unknown fixture variant '" + std::string(text) + "' (base|planted|causal|uniform)");
}

ModelConfig tiny_config() {
    ModelConfig c;
    c.n_layers = 4;
    c.d_model = 64;
    c.d_ff = 128;
    c.vocab_size = 256;
    c.n_heads = 4;
    c.n_kv_heads = 2;
    c.head_dim = 16;
    c.rope_theta = 10000.0;
    c.norm_eps = 1e-5;
    c.tied_embeddings = false;
    return c;
}

Fixture make_fixture(const FixtureSpec& spec) {
    const ModelConfig& c = spec.config;
    c.validate();
    Gaussian g(spec.seed);
    Fixture f;
    f.variant = spec.variant;
    f.neuron = spec.neuron.value_or(NeuronAddress{static_cast<std::uint32_t>(g.below(c.n_layers)),
                                                  static_cast<std::uint32_t>(g.below(c.d_ff)), MatrixKind::up});
    f.token = spec.token.value_or(static_cast<TokenId>(g.below(c.vocab_size)));
    if (f.neuron.layer >= c.n_layers || f.neuron.neuron >= c.d_ff || f.token >= c.vocab_size)
        throw Error(ErrorCode::out_of_range, "fixture neuron or token is outside the configured model");

    f.checkpoint = random_checkpoint(c, g);
    auto& ckpt = f.checkpoint;

    switch (spec.variant) {
    case FixtureVariant::base:
        break;
    case FixtureVariant::planted: {
        auto row = ckpt.layers[f.neuron.layer].up_proj.row(f.neuron.neuron);
        const auto target = ckpt.lm_head.row(f.token);
        for (std::size_t i = 0; i < row.size(); ++i) row[i] = spec.alpha * target[i];
        break;
    }
    case FixtureVariant::uniform:
        for (auto& w : ckpt.layers) std::fill(w.up_proj.values().begin(), w.up_proj.values().end(), 0.0f);
        break;
    case FixtureVariant::causal: {
        if (c.d_model < 2 || c.tied_embeddings)
            throw Error(ErrorCode::invalid_argument, "causal fixture needs d_model >= 2 and untied embeddings");
        std::fill(ckpt.token_embeddings.values().begin(), ckpt.token_embeddings.values().end(), 0.0f);
        for (std::size_t t = 0; t < c.vocab_size; ++t) ckpt.token_embeddings(t, 0) = spec.embed_scale;
        // x / rms(x) for x = s*e0 has first component s / sqrt(s^2/d + eps)
        const double s = spec.embed_scale;
        const double normalized = s / std::sqrt(s * s / double(c.d_model) + c.norm_eps);
        for (auto& w : ckpt.layers) {
            std::fill(w.o_proj.values().begin(), w.o_proj.values().end(), 0.0f);
            std::fill(w.attn_norm.begin(), w.attn_norm.end(), 1.0f);
            std::fill(w.mlp_norm.begin(), w.mlp_norm.end(), 1.0f);
            std::fill(w.gate_proj.values().begin(), w.gate_proj.values().end(), 0.0f);
            std::fill(w.up_proj.values().begin(), w.up_proj.values().end(), 0.0f);
            std::fill(w.down_proj.values().begin(), w.down_proj.values().end(), 0.0f);
        }
        auto& w = ckpt.layers[f.neuron.layer];
        w.gate_proj(f.neuron.neuron, 0) = static_cast<float>(spec.gate_preactivation / normalized);
        w.up_proj(f.neuron.neuron, 0) = static_cast<float>(spec.natural_activation / normalized);
        w.down_proj(1, f.neuron.neuron) = 1.0f;
        std::fill(ckpt.final_norm.begin(), ckpt.final_norm.end(), 1.0f);
        std::fill(ckpt.lm_head.values().begin(), ckpt.lm_head.values().end(), 0.0f);
        ckpt.lm_head(f.token, 1) = spec.beta;
        break;
    }
    }
    if (c.tied_embeddings) ckpt.lm_head = ckpt.token_embeddings;
    validate_checkpoint(ckpt);
    ckpt.fingerprint = compute_fingerprint(ckpt);
    return f;
}

ChatTemplate fixture_chat_template() {
    ChatTemplate t;
    t.name = "fixture";
    t.roles["system"] = {"<s>", "</s>"};
    t.roles["user"] = {"<u>", "</u>"};
    t.roles["assistant"] = {"<a>", "</a>"};
    t.generation_prompt = "<a>";
    return t;
}

void write_fixture(const Fixture& fixture, const FixtureSpec& spec, const std::filesystem::path& dir, DType dtype) {
    using nlohmann::json;
    save_checkpoint(fixture.checkpoint, dir, dtype);
    save_vocabulary(byte_vocabulary(), dir / "tokenizer.json");

    const ChatTemplate t = fixture_chat_template();
    json roles = json::object();
    for (const auto& [name, r] : t.roles) roles[name] = {{"prefix", r.prefix}, {"suffix", r.suffix}};
    const json tmpl = {{"name", t.name}, {"prefix", t.prefix}, {"roles", roles},
                       {"generation_prompt", t.generation_prompt}, {"stop", t.stop}};
    std::ofstream(dir / "chat_template.json") << tmpl.dump(2) << '\n';

    const json info = {{"variant", std::string(to_string(fixture.variant))},
                       {"seed", spec.seed},
                       {"layer", fixture.neuron.layer},
                       {"neuron", fixture.neuron.neuron},
                       {"token", fixture.token},
                       {"fingerprint", fingerprint_hex(fixture.checkpoint.fingerprint)}};
    std::ofstream out(dir / "fixture.json");
    if (!out) throw Error(ErrorCode::io_error, "cannot write " + (dir / "fixture.json").string());
    out << info.dump(2) << '\n';
}

} // namespace ncatlas
