#include "support.hpp"

#include <atomic>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>
#include <sstream>
#include <unistd.h>

namespace ncatlas::testing {

namespace fs = std::filesystem;
using Vec = std::vector<double>;

TempDir::TempDir() {
    static std::atomic<int> counter{0};
    path_ = fs::temp_directory_path() /
            ("ncatlas-test-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
    fs::remove_all(path_);
    fs::create_directories(path_);
}

TempDir::~TempDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
}

namespace {

Vec matvec(const Matrix& w, const Vec& x) {
    Vec out(w.rows(), 0.0);
    for (std::size_t r = 0; r < w.rows(); ++r) {
        double s = 0.0;
        for (std::size_t c = 0; c < w.cols(); ++c) s += double(w(r, c)) * x[c];
        out[r] = s;
    }
    return out;
}

Vec rmsnorm(const Vec& x, const Vector& gamma, double eps) {
    double ss = 0.0;
    for (double v : x) ss += v * v;
    const double inv = 1.0 / std::sqrt(ss / double(x.size()) + eps);
    Vec out(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] * inv * gamma[i];
    return out;
}

double inverse_frequency(const ModelConfig& c, std::size_t i) {
    double f = std::pow(c.rope_theta, -double(2 * i) / double(c.head_dim));
    if (!c.rope_scaling) return f;
    // Llama 3.1 rule: keep high frequencies, divide low ones by the factor,
    // interpolate linearly (in 1/wavelength) in between.
    const auto& s = *c.rope_scaling;
    const double wavelength = 2.0 * std::numbers::pi / f;
    if (wavelength < s.original_max_position / s.high_freq_factor) return f;
    if (wavelength > s.original_max_position / s.low_freq_factor) return f / s.factor;
    const double t = (s.original_max_position / wavelength - s.low_freq_factor) / (s.high_freq_factor - s.low_freq_factor);
    return t * f + (1.0 - t) * f / s.factor;
}

void rotate(Vec& v, std::size_t offset, std::size_t pos, const ModelConfig& c) {
    const std::size_t half = c.head_dim / 2;
    for (std::size_t i = 0; i < half; ++i) {
        const double a = double(pos) * inverse_frequency(c, i);
        const double x = v[offset + i], y = v[offset + i + half];
        v[offset + i] = x * std::cos(a) - y * std::sin(a);
        v[offset + i + half] = y * std::cos(a) + x * std::sin(a);
    }
}

struct Trace {
    Vec last_hidden;
    std::vector<Vec> up_trace;  // [position] of the traced neuron
};

Trace run_reference(const ModelCheckpoint& ckpt, const std::vector<TokenId>& tokens,
                    const std::vector<ClampSpec>& clamps, const NeuronAddress* traced) {
    const auto& c = ckpt.config;
    const std::size_t n = tokens.size();
    const std::size_t hd = c.head_dim;
    std::vector<Vec> x(n);
    for (std::size_t t = 0; t < n; ++t) {
        const auto e = ckpt.token_embeddings.row(tokens[t]);
        x[t].assign(e.begin(), e.end());
    }
    Trace trace;
    trace.up_trace.assign(1, Vec(n, 0.0));
    for (std::size_t l = 0; l < c.n_layers; ++l) {
        const auto& w = ckpt.layers[l];
        std::vector<Vec> q(n), k(n), v(n);
        for (std::size_t t = 0; t < n; ++t) {
            const Vec h = rmsnorm(x[t], w.attn_norm, c.norm_eps);
            q[t] = matvec(w.q_proj, h);
            k[t] = matvec(w.k_proj, h);
            v[t] = matvec(w.v_proj, h);
            for (std::size_t head = 0; head < c.n_heads; ++head) rotate(q[t], head * hd, t, c);
            for (std::size_t head = 0; head < c.n_kv_heads; ++head) rotate(k[t], head * hd, t, c);
        }
        for (std::size_t t = 0; t < n; ++t) {
            Vec attended(c.n_heads * hd, 0.0);
            for (std::size_t head = 0; head < c.n_heads; ++head) {
                const std::size_t kv = head * c.n_kv_heads / c.n_heads;
                Vec scores(t + 1);
                for (std::size_t s = 0; s <= t; ++s) {
                    double dotp = 0.0;
                    for (std::size_t i = 0; i < hd; ++i) dotp += q[t][head * hd + i] * k[s][kv * hd + i];
                    scores[s] = dotp / std::sqrt(double(hd));
                }
                const Vec p = naive_softmax(scores);
                for (std::size_t s = 0; s <= t; ++s)
                    for (std::size_t i = 0; i < hd; ++i) attended[head * hd + i] += p[s] * v[s][kv * hd + i];
            }
            const Vec o = matvec(w.o_proj, attended);
            for (std::size_t i = 0; i < c.d_model; ++i) x[t][i] += o[i];
        }
        for (std::size_t t = 0; t < n; ++t) {
            const Vec h = rmsnorm(x[t], w.mlp_norm, c.norm_eps);
            const Vec g = matvec(w.gate_proj, h);
            Vec u = matvec(w.up_proj, h);
            if (traced && traced->layer == l) trace.up_trace[0][t] = u[traced->neuron];
            for (const auto& cs : clamps)
                if (cs.address.layer == l) u[cs.address.neuron] = cs.per_position.empty() ? cs.value : cs.per_position[t];
            Vec act(c.d_ff);
            for (std::size_t j = 0; j < c.d_ff; ++j) act[j] = g[j] / (1.0 + std::exp(-g[j])) * u[j];
            const Vec d = matvec(w.down_proj, act);
            for (std::size_t i = 0; i < c.d_model; ++i) x[t][i] += d[i];
        }
    }
    trace.last_hidden = rmsnorm(x[n - 1], ckpt.final_norm, c.norm_eps);
    return trace;
}

} // namespace

std::vector<double> naive_softmax(const std::vector<double>& logits) {
    double peak = logits[0];
    for (double v : logits) peak = std::max(peak, v);
    Vec out(logits.size());
    double total = 0.0;
    for (std::size_t i = 0; i < logits.size(); ++i) total += out[i] = std::exp(logits[i] - peak);
    for (double& v : out) v /= total;
    return out;
}

std::vector<double> naive_decode(const ModelCheckpoint& ckpt, const NeuronAddress& address, bool apply_final_norm) {
    const auto& c = ckpt.config;
    Vec w(c.d_model);
    for (std::size_t i = 0; i < c.d_model; ++i) {
        const auto& layer = ckpt.layers[address.layer];
        switch (address.kind) {
        case MatrixKind::up: w[i] = layer.up_proj(address.neuron, i); break;
        case MatrixKind::gate: w[i] = layer.gate_proj(address.neuron, i); break;
        case MatrixKind::down_column: w[i] = layer.down_proj(i, address.neuron); break;
        }
    }
    if (apply_final_norm) w = rmsnorm(w, ckpt.final_norm, c.norm_eps);
    return naive_softmax(matvec(ckpt.lm_head, w));
}

std::vector<double> reference_logits(const ModelCheckpoint& ckpt, const std::vector<TokenId>& tokens,
                                     const std::vector<ClampSpec>& clamps) {
    return matvec(ckpt.lm_head, run_reference(ckpt, tokens, clamps, nullptr).last_hidden);
}

std::vector<double> reference_up_trace(const ModelCheckpoint& ckpt, const std::vector<TokenId>& tokens,
                                       const NeuronAddress& address) {
    return run_reference(ckpt, tokens, {}, &address).up_trace[0];
}

std::vector<TokenId> random_prompt(std::mt19937_64& rng, std::size_t vocab, std::size_t min_len, std::size_t max_len) {
    const std::size_t len = min_len + rng() % (max_len - min_len + 1);
    std::vector<TokenId> out(len);
    for (auto& t : out) t = static_cast<TokenId>(rng() % vocab);
    return out;
}

bool bitwise_equal(std::span<const float> a, std::span<const float> b) {
    return a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size() * sizeof(float)) == 0;
}

std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
}

} // namespace ncatlas::testing
