#include "support.hpp"

#include "ncatlas/engine.hpp"
#include "ncatlas/error.hpp"
#include "ncatlas/fixture.hpp"
#include "ncatlas/parallel.hpp"

#include <doctest.h>

#include <cmath>
#include <random>

using namespace ncatlas;
using namespace ncatlas::testing;

namespace {

const ModelCheckpoint& base_model() {
    static const ModelCheckpoint ckpt = make_fixture({}).checkpoint;
    return ckpt;
}

Fixture causal(std::uint64_t seed = 0) {
    FixtureSpec spec;
    spec.variant = FixtureVariant::causal;
    spec.seed = seed;
    return make_fixture(spec);
}

double max_abs_diff(std::span<const float> got, const std::vector<double>& expect) {
    double worst = 0.0;
    for (std::size_t i = 0; i < expect.size(); ++i) worst = std::max(worst, std::abs(double(got[i]) - expect[i]));
    return worst;
}

// Target-token logit of the causal fixture when its neuron's up output is c:
// the residual is s*e0 + c*silu(g)*e1, final-normed, read by beta*e1.
double causal_logit(const FixtureSpec& spec, double c) {
    const double s = spec.embed_scale;
    const double g = spec.gate_preactivation;
    const double cg = c * g / (1.0 + std::exp(-g));
    const double d = double(spec.config.d_model);
    return spec.beta * cg / std::sqrt((s * s + cg * cg) / d + spec.config.norm_eps);
}

} // namespace

TEST_CASE("forward logits match the double-precision reference on random prompts") {
    const auto& ckpt = base_model();
    std::mt19937_64 rng(21);
    for (int trial = 0; trial < 8; ++trial) {
        const auto prompt = random_prompt(rng, 256, 1, 24);
        CHECK(max_abs_diff(forward(ckpt, prompt), reference_logits(ckpt, prompt)) <= 1e-4);
    }
}

TEST_CASE("forward matches the reference with llama3 rope scaling and wider GQA groups") {
    FixtureSpec spec;
    spec.seed = 4;
    spec.config.n_heads = 8;
    spec.config.n_kv_heads = 2;
    spec.config.head_dim = 8;
    spec.config.rope_theta = 500000.0;
    spec.config.rope_scaling = RopeScaling{8.0, 1.0, 4.0, 32.0};
    const auto ckpt = make_fixture(spec).checkpoint;
    std::mt19937_64 rng(22);
    for (int trial = 0; trial < 3; ++trial) {
        const auto prompt = random_prompt(rng, 256, 20, 40);
        CHECK(max_abs_diff(forward(ckpt, prompt), reference_logits(ckpt, prompt)) <= 1e-4);
    }
}

TEST_CASE("forward with clamps matches the reference with the same clamps") {
    const auto& ckpt = base_model();
    const std::vector<TokenId> prompt{5, 200, 31, 31, 90};
    const std::vector<ClampSpec> clamps{{{1, 10, MatrixKind::up}, 3.5f, {}}, {{3, 127, MatrixKind::up}, -40.0f, {}}};
    CHECK(max_abs_diff(forward(ckpt, prompt, clamps), reference_logits(ckpt, prompt, clamps)) <= 1e-4);
}

TEST_CASE("incremental feeding is bitwise equal to full recompute") {
    const auto& ckpt = base_model();
    std::mt19937_64 rng(23);
    const auto prompt = random_prompt(rng, 256, 12, 12);
    const Vector full = forward(ckpt, prompt);
    InferenceSession session(ckpt);
    session.feed(std::span(prompt).first(5));
    session.feed(std::span(prompt).subspan(5, 1));
    const Vector pieces = session.feed(std::span(prompt).subspan(6));
    CHECK(bitwise_equal(full, pieces));
    CHECK(session.position() == 12);
    CHECK(session.tokens() == prompt);
}

TEST_CASE("KV-cache generation equals recompute-every-step generation") {
    const auto& ckpt = base_model();
    const std::vector<TokenId> prompt{1, 2, 3, 4};
    GenerationParams p;
    p.max_new_tokens = 16;
    const auto cached = generate(ckpt, prompt, {}, p);
    p.use_kv_cache = false;
    const auto recomputed = generate(ckpt, prompt, {}, p);
    CHECK(cached == recomputed);
    CHECK(cached.size() == 16);

    p.sampling = Sampling::temperature;
    p.temperature = 1.3;
    p.seed = 99;
    p.use_kv_cache = true;
    const auto sampled_cached = generate(ckpt, prompt, {}, p);
    p.use_kv_cache = false;
    CHECK(generate(ckpt, prompt, {}, p) == sampled_cached);
}

TEST_CASE("probed activations match the reference trace") {
    const auto& ckpt = base_model();
    const std::vector<TokenId> prompt{9, 8, 7, 6, 5};
    const NeuronAddress addr{2, 33, MatrixKind::up};
    const auto traces = probe_up_activations(ckpt, prompt, std::span(&addr, 1));
    const auto expect = reference_up_trace(ckpt, prompt, addr);
    for (std::size_t t = 0; t < prompt.size(); ++t) CHECK(traces[0][t] == doctest::Approx(expect[t]).epsilon(1e-4).scale(1e-5));
}

TEST_CASE("clamping a neuron to its natural activations leaves the logits unchanged") {
    const auto& ckpt = base_model();
    std::mt19937_64 rng(24);
    for (int trial = 0; trial < 5; ++trial) {
        const auto prompt = random_prompt(rng, 256, 3, 16);
        const NeuronAddress addr{std::uint32_t(rng() % 4), std::uint32_t(rng() % 128), MatrixKind::up};
        const auto trace = probe_up_activations(ckpt, prompt, std::span(&addr, 1))[0];
        const ClampSpec identity{addr, 0.0f, trace};
        const Vector base = forward(ckpt, prompt);
        const Vector clamped = forward(ckpt, prompt, std::span(&identity, 1));
        CHECK(bitwise_equal(base, clamped));
    }
}

TEST_CASE("causal fixture logits follow the analytic formula") {
    FixtureSpec spec;
    spec.variant = FixtureVariant::causal;
    const auto f = make_fixture(spec);
    const std::vector<TokenId> prompt{3, 1, 4, 1, 5};
    for (float c : {-100.0f, -3.0f, -0.5f, 0.0f, 0.25f, 2.0f, 50.0f}) {
        const ClampSpec clamp{f.neuron, c, {}};
        const Vector logits = forward(f.checkpoint, prompt, std::span(&clamp, 1));
        const double expect = causal_logit(spec, c);
        CHECK(logits[f.token] == doctest::Approx(expect).epsilon(1e-5).scale(1e-6));
        for (TokenId t = 0; t < 256; ++t)
            if (t != f.token) REQUIRE(logits[t] == 0.0f);
    }
    // Unclamped, the neuron outputs spec.natural_activation.
    CHECK(forward(f.checkpoint, prompt)[f.token] ==
          doctest::Approx(causal_logit(spec, spec.natural_activation)).epsilon(1e-5));
    const auto trace = probe_up_activations(f.checkpoint, prompt, std::span(&f.neuron, 1))[0];
    for (float a : trace) CHECK(a == doctest::Approx(spec.natural_activation).epsilon(1e-5));
}

TEST_CASE("causal steering: p(target) is non-decreasing in the clamp value") {
    const auto f = causal(3);
    const std::vector<TokenId> prompt{10, 20, 30};
    double previous = -1.0;
    for (int v = -100; v <= 100; v += 5) {
        const ClampSpec clamp{f.neuron, float(v), {}};
        const double p = next_token_distribution(f.checkpoint, prompt, std::span(&clamp, 1))[f.token];
        CHECK(p >= previous);
        previous = p;
    }
    CHECK(previous > 0.99);
}

TEST_CASE("greedy and seeded generation are reproducible across thread counts") {
    const auto& ckpt = base_model();
    const std::vector<TokenId> prompt{40, 41, 42};
    GenerationParams greedy;
    greedy.max_new_tokens = 10;
    GenerationParams sampled = greedy;
    sampled.sampling = Sampling::temperature;
    sampled.seed = 5;
    const auto saved = worker_threads();
    set_worker_threads(1);
    const auto g1 = generate(ckpt, prompt, {}, greedy);
    const auto s1 = generate(ckpt, prompt, {}, sampled);
    set_worker_threads(6);
    CHECK(generate(ckpt, prompt, {}, greedy) == g1);
    CHECK(generate(ckpt, prompt, {}, sampled) == s1);
    set_worker_threads(saved);

    sampled.seed = 6;
    std::size_t differing = 0;
    for (std::uint64_t seed = 6; seed < 12; ++seed) {
        sampled.seed = seed;
        differing += generate(ckpt, prompt, {}, sampled) != s1;
    }
    CHECK(differing > 0);
}

TEST_CASE("a vanishing temperature reduces to greedy decoding") {
    const auto& ckpt = base_model();
    const std::vector<TokenId> prompt{100, 7};
    GenerationParams greedy;
    greedy.max_new_tokens = 8;
    GenerationParams cold = greedy;
    cold.sampling = Sampling::temperature;
    cold.temperature = 1e-6;
    CHECK(generate(ckpt, prompt, {}, cold) == generate(ckpt, prompt, {}, greedy));
}

TEST_CASE("generation stops at a stop token and reports every token to the callback") {
    const auto f = causal();
    const ClampSpec clamp{f.neuron, 100.0f, {}};
    GenerationParams p;
    p.max_new_tokens = 10;
    std::vector<TokenId> seen;
    auto ids = generate(f.checkpoint, std::vector<TokenId>{1, 2}, std::span(&clamp, 1), p,
                        [&](TokenId t) { seen.push_back(t); });
    CHECK(ids == std::vector<TokenId>(10, f.token));
    CHECK(seen == ids);
    p.stop_token_ids = {f.token};
    ids = generate(f.checkpoint, std::vector<TokenId>{1, 2}, std::span(&clamp, 1), p);
    CHECK(ids == std::vector<TokenId>{f.token});
}

TEST_CASE("observer sees natural and applied up outputs") {
    const auto& ckpt = base_model();
    const ClampSpec clamp{{1, 4, MatrixKind::up}, 7.0f, {}};
    InferenceSession session(ckpt, {clamp});
    std::size_t calls = 0;
    session.set_observer([&](std::size_t layer, std::size_t, std::span<const float> natural, std::span<const float> applied) {
        ++calls;
        if (layer == 1) {
            CHECK(applied[4] == 7.0f);
            CHECK(natural[4] != 7.0f);
            CHECK(natural[5] == applied[5]);
        } else {
            CHECK(bitwise_equal(natural, applied));
        }
    });
    session.feed(std::vector<TokenId>{1, 2, 3});
    CHECK(calls == 4 * 3);
}

TEST_CASE("set_clamps resets the session") {
    const auto& ckpt = base_model();
    InferenceSession session(ckpt);
    session.feed(std::vector<TokenId>{1, 2, 3});
    session.set_clamps({{{0, 0, MatrixKind::up}, 1.0f, {}}});
    CHECK(session.position() == 0);
}

TEST_CASE("invalid inputs are rejected") {
    const auto& ckpt = base_model();
    const std::vector<TokenId> prompt{1, 2};
    auto code_of = [&](auto&& fn) {
        try {
            fn();
        } catch (const Error& e) {
            return e.code();
        }
        FAIL("no error");
        return ErrorCode::not_found;
    };
    CHECK(code_of([&] { forward(ckpt, std::vector<TokenId>{}); }) == ErrorCode::invalid_argument);
    CHECK(code_of([&] { forward(ckpt, std::vector<TokenId>{256}); }) == ErrorCode::unknown_token);
    const ClampSpec gate{{0, 0, MatrixKind::gate}, 1.0f, {}};
    CHECK(code_of([&] { forward(ckpt, prompt, std::span(&gate, 1)); }) == ErrorCode::invalid_argument);
    const ClampSpec far{{9, 0, MatrixKind::up}, 1.0f, {}};
    CHECK(code_of([&] { forward(ckpt, prompt, std::span(&far, 1)); }) == ErrorCode::out_of_range);
    const ClampSpec nan{{0, 0, MatrixKind::up}, std::nanf(""), {}};
    CHECK(code_of([&] { forward(ckpt, prompt, std::span(&nan, 1)); }) == ErrorCode::invalid_argument);
    const ClampSpec short_schedule{{0, 0, MatrixKind::up}, 0.0f, {1.0f}};
    CHECK(code_of([&] { forward(ckpt, prompt, std::span(&short_schedule, 1)); }) == ErrorCode::out_of_range);
    GenerationParams p;
    p.max_new_tokens = 0;
    CHECK(code_of([&] { generate(ckpt, prompt, {}, p); }) == ErrorCode::invalid_argument);
    p.max_new_tokens = 1;
    p.sampling = Sampling::temperature;
    p.temperature = 0.0;
    CHECK(code_of([&] { generate(ckpt, prompt, {}, p); }) == ErrorCode::invalid_argument);
    CHECK(code_of([&] { parse_sampling("nucleus"); }) == ErrorCode::invalid_argument);
}
