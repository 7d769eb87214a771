#include "ncatlas/checkpoint.hpp"

#include "ncatlas/error.hpp"
#include "ncatlas/parallel.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <future>
#include <map>

namespace ncatlas {

namespace {

namespace fs = std::filesystem;

std::string layer_name(std::size_t layer, const char* suffix) {
    return "model.layers." + std::to_string(layer) + "." + suffix;
}

std::string shape_text(const std::vector<std::size_t>& shape) {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) s += (i ? "x" : "") + std::to_string(shape[i]);
    return s + "]";
}

class TensorPool {
public:
    explicit TensorPool(std::map<std::string, Tensor> tensors) : tensors_(std::move(tensors)) {}

    bool has(const std::string& name) const { return tensors_.count(name) != 0; }

    Matrix matrix(const std::string& name, std::size_t rows, std::size_t cols) {
        Tensor t = take(name, {rows, cols});
        return Matrix(rows, cols, std::move(t.values));
    }

    Vector vector(const std::string& name, std::size_t n) { return take(name, {n}).values; }

private:
    Tensor take(const std::string& name, const std::vector<std::size_t>& expected) {
        auto it = tensors_.find(name);
        if (it == tensors_.end()) throw Error(ErrorCode::incomplete_checkpoint, "incomplete checkpoint: missing tensor " + name);
        if (it->second.shape != expected)
            throw Error(ErrorCode::shape_mismatch, "tensor " + name + " has shape " + shape_text(it->second.shape) +
                                                       ", expected " + shape_text(expected));
        Tensor t = std::move(it->second);
        tensors_.erase(it);
        return t;
    }

    std::map<std::string, Tensor> tensors_;
};

void check_finite(std::span<const float> values, const std::string& name) {
    for (std::size_t i = 0; i < values.size(); ++i) {
        if (!std::isfinite(values[i]))
            throw Error(ErrorCode::non_finite, "tensor " + name + " contains a non-finite value at flat index " +
                                                   std::to_string(i));
    }
}

void check_shape(const Matrix& m, std::size_t rows, std::size_t cols, const std::string& name) {
    if (m.rows() != rows || m.cols() != cols)
        throw Error(ErrorCode::shape_mismatch, "tensor " + name + " has shape " + shape_text({m.rows(), m.cols()}) +
                                                   ", expected " + shape_text({rows, cols}));
}

void check_length(const Vector& v, std::size_t n, const std::string& name) {
    if (v.size() != n)
        throw Error(ErrorCode::shape_mismatch,
                    "tensor " + name + " has shape " + shape_text({v.size()}) + ", expected " + shape_text({n}));
}

// Every named tensor of the checkpoint, in a fixed order.
template <typename Fn>
void for_each_tensor(const ModelCheckpoint& ckpt, Fn&& fn) {
    fn("model.embed_tokens.weight", ckpt.token_embeddings.values());
    for (std::size_t l = 0; l < ckpt.layers.size(); ++l) {
        const auto& w = ckpt.layers[l];
        fn(layer_name(l, "self_attn.q_proj.weight"), w.q_proj.values());
        fn(layer_name(l, "self_attn.k_proj.weight"), w.k_proj.values());
        fn(layer_name(l, "self_attn.v_proj.weight"), w.v_proj.values());
        fn(layer_name(l, "self_attn.o_proj.weight"), w.o_proj.values());
        fn(layer_name(l, "input_layernorm.weight"), std::span<const float>(w.attn_norm));
        fn(layer_name(l, "post_attention_layernorm.weight"), std::span<const float>(w.mlp_norm));
        fn(layer_name(l, "mlp.gate_proj.weight"), w.gate_proj.values());
        fn(layer_name(l, "mlp.up_proj.weight"), w.up_proj.values());
        fn(layer_name(l, "mlp.down_proj.weight"), w.down_proj.values());
    }
    fn("model.norm.weight", std::span<const float>(ckpt.final_norm));
    fn("lm_head.weight", ckpt.lm_head.values());
}

constexpr std::uint64_t fnv_offset = 14695981039346656037ull;
constexpr std::uint64_t fnv_prime = 1099511628211ull;

std::uint64_t hash_bytes(std::uint64_t h, const void* data, std::size_t n) {
    const auto* p = static_cast<const unsigned char*>(data);
    std::size_t i = 0;
    for (; i + 8 <= n; i += 8) {
        std::uint64_t word;
        std::memcpy(&word, p + i, 8);
        h = (h ^ word) * fnv_prime;
    }
    for (; i < n; ++i) h = (h ^ p[i]) * fnv_prime;
    return h;
}

} // namespace

void ModelCheckpoint::check_address(const NeuronAddress& a) const {
    if (a.layer >= config.n_layers)
        throw Error(ErrorCode::out_of_range, "layer " + std::to_string(a.layer) + " out of range (model has " +
                                                 std::to_string(config.n_layers) + " layers, 0-based)");
    if (a.neuron >= config.d_ff)
        throw Error(ErrorCode::out_of_range, "neuron " + std::to_string(a.neuron) + " out of range (d_ff is " +
                                                 std::to_string(config.d_ff) + ")");
}

Vector ModelCheckpoint::weight_vector(const NeuronAddress& a) const {
    check_address(a);
    const auto& w = layers[a.layer];
    switch (a.kind) {
    case MatrixKind::up: {
        auto r = w.up_proj.row(a.neuron);
        return {r.begin(), r.end()};
    }
    case MatrixKind::gate: {
        auto r = w.gate_proj.row(a.neuron);
        return {r.begin(), r.end()};
    }
    case MatrixKind::down_column: {
        Vector out(config.d_model);
        for (std::size_t i = 0; i < config.d_model; ++i) out[i] = w.down_proj(i, a.neuron);
        return out;
    }
    }
    return {};
}

void validate_checkpoint(const ModelCheckpoint& ckpt) {
    const auto& c = ckpt.config;
    c.validate();
    check_shape(ckpt.token_embeddings, c.vocab_size, c.d_model, "model.embed_tokens.weight");
    if (ckpt.layers.size() != c.n_layers)
        throw Error(ErrorCode::incomplete_checkpoint, "incomplete checkpoint: expected " + std::to_string(c.n_layers) +
                                                          " layers, found " + std::to_string(ckpt.layers.size()));
    for (std::size_t l = 0; l < c.n_layers; ++l) {
        const auto& w = ckpt.layers[l];
        check_shape(w.q_proj, c.n_heads * c.head_dim, c.d_model, layer_name(l, "self_attn.q_proj.weight"));
        check_shape(w.k_proj, c.kv_dim(), c.d_model, layer_name(l, "self_attn.k_proj.weight"));
        check_shape(w.v_proj, c.kv_dim(), c.d_model, layer_name(l, "self_attn.v_proj.weight"));
        check_shape(w.o_proj, c.d_model, c.n_heads * c.head_dim, layer_name(l, "self_attn.o_proj.weight"));
        check_length(w.attn_norm, c.d_model, layer_name(l, "input_layernorm.weight"));
        check_length(w.mlp_norm, c.d_model, layer_name(l, "post_attention_layernorm.weight"));
        check_shape(w.gate_proj, c.d_ff, c.d_model, layer_name(l, "mlp.gate_proj.weight"));
        check_shape(w.up_proj, c.d_ff, c.d_model, layer_name(l, "mlp.up_proj.weight"));
        check_shape(w.down_proj, c.d_model, c.d_ff, layer_name(l, "mlp.down_proj.weight"));
    }
    check_length(ckpt.final_norm, c.d_model, "model.norm.weight");
    check_shape(ckpt.lm_head, c.vocab_size, c.d_model, "lm_head.weight");
    if (c.tied_embeddings && ckpt.lm_head != ckpt.token_embeddings)
        throw Error(ErrorCode::invalid_argument, "tied_embeddings is set but lm_head differs from token embeddings");
    for_each_tensor(ckpt, [](const std::string& name, std::span<const float> v) { check_finite(v, name); });
}

ModelCheckpoint load_checkpoint(const fs::path& path, DTypePolicy) {
    fs::path dir = path;
    std::vector<fs::path> files;
    if (fs::is_regular_file(path)) {
        dir = path.parent_path();
        files.push_back(path);
    } else if (fs::is_directory(path)) {
        for (const auto& e : fs::directory_iterator(path)) {
            if (e.is_regular_file() && e.path().extension() == ".safetensors") files.push_back(e.path());
        }
        std::sort(files.begin(), files.end());
    } else {
        throw Error(ErrorCode::io_error, "checkpoint path " + path.string() + " does not exist");
    }
    if (files.empty()) throw Error(ErrorCode::io_error, "no .safetensors files under " + path.string());

    ModelCheckpoint ckpt;
    ckpt.config = load_config(dir / "config.json");
    const auto& c = ckpt.config;

    std::vector<std::future<std::map<std::string, Tensor>>> reads;
    for (const auto& f : files) reads.push_back(std::async(std::launch::async, [f] { return read_safetensors(f); }));
    std::map<std::string, Tensor> all;
    for (std::size_t i = 0; i < reads.size(); ++i) {
        for (auto& [name, t] : reads[i].get()) {
            if (all.count(name)) throw Error(ErrorCode::parse_error, "tensor " + name + " appears in more than one file");
            all.emplace(name, std::move(t));
        }
    }

    TensorPool pool(std::move(all));
    ckpt.token_embeddings = pool.matrix("model.embed_tokens.weight", c.vocab_size, c.d_model);
    ckpt.layers.resize(c.n_layers);
    for (std::size_t l = 0; l < c.n_layers; ++l) {
        auto& w = ckpt.layers[l];
        w.q_proj = pool.matrix(layer_name(l, "self_attn.q_proj.weight"), c.n_heads * c.head_dim, c.d_model);
        w.k_proj = pool.matrix(layer_name(l, "self_attn.k_proj.weight"), c.kv_dim(), c.d_model);
        w.v_proj = pool.matrix(layer_name(l, "self_attn.v_proj.weight"), c.kv_dim(), c.d_model);
        w.o_proj = pool.matrix(layer_name(l, "self_attn.o_proj.weight"), c.d_model, c.n_heads * c.head_dim);
        w.attn_norm = pool.vector(layer_name(l, "input_layernorm.weight"), c.d_model);
        w.mlp_norm = pool.vector(layer_name(l, "post_attention_layernorm.weight"), c.d_model);
        w.gate_proj = pool.matrix(layer_name(l, "mlp.gate_proj.weight"), c.d_ff, c.d_model);
        w.up_proj = pool.matrix(layer_name(l, "mlp.up_proj.weight"), c.d_ff, c.d_model);
        w.down_proj = pool.matrix(layer_name(l, "mlp.down_proj.weight"), c.d_model, c.d_ff);
    }
    ckpt.final_norm = pool.vector("model.norm.weight", c.d_model);
    if (c.tied_embeddings && !pool.has("lm_head.weight")) {
        ckpt.lm_head = ckpt.token_embeddings;
    } else {
        ckpt.lm_head = pool.matrix("lm_head.weight", c.vocab_size, c.d_model);
    }
    validate_checkpoint(ckpt);
    ckpt.fingerprint = compute_fingerprint(ckpt);
    return ckpt;
}

std::uint64_t compute_fingerprint(const ModelCheckpoint& ckpt) {
    std::vector<std::pair<std::string, std::span<const float>>> tensors;
    for_each_tensor(ckpt, [&](const std::string& name, std::span<const float> v) { tensors.emplace_back(name, v); });
    std::vector<std::uint64_t> digests(tensors.size());
    parallel_for(tensors.size(), 1, [&](std::size_t begin, std::size_t end) {
        for (std::size_t i = begin; i < end; ++i) {
            std::uint64_t h = hash_bytes(fnv_offset, tensors[i].first.data(), tensors[i].first.size());
            digests[i] = hash_bytes(h, tensors[i].second.data(), tensors[i].second.size_bytes());
        }
    });
    const std::string config = config_to_json(ckpt.config).dump();
    std::uint64_t h = hash_bytes(fnv_offset, config.data(), config.size());
    for (auto d : digests) h = hash_bytes(h, &d, sizeof d);
    return h;
}

std::string fingerprint_hex(std::uint64_t fingerprint) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fingerprint));
    return buf;
}

void save_checkpoint(const ModelCheckpoint& ckpt, const fs::path& dir, DType dtype) {
    validate_checkpoint(ckpt);
    fs::create_directories(dir);
    save_config(ckpt.config, dir / "config.json");
    std::map<std::string, Tensor> tensors;
    auto add = [&](const std::string& name, std::vector<std::size_t> shape, std::span<const float> v) {
        tensors.emplace(name, Tensor{std::move(shape), {v.begin(), v.end()}});
    };
    const auto& c = ckpt.config;
    for_each_tensor(ckpt, [&](const std::string& name, std::span<const float> v) {
        if (name == "lm_head.weight" && c.tied_embeddings) return;
        std::vector<std::size_t> shape;
        if (name.ends_with("layernorm.weight") || name == "model.norm.weight") {
            shape = {v.size()};
        } else if (name.ends_with("q_proj.weight")) {
            shape = {c.n_heads * c.head_dim, c.d_model};
        } else if (name.ends_with("k_proj.weight") || name.ends_with("v_proj.weight")) {
            shape = {c.kv_dim(), c.d_model};
        } else if (name.ends_with("o_proj.weight")) {
            shape = {c.d_model, c.n_heads * c.head_dim};
        } else if (name.ends_with("gate_proj.weight") || name.ends_with("up_proj.weight")) {
            shape = {c.d_ff, c.d_model};
        } else if (name.ends_with("down_proj.weight")) {
            shape = {c.d_model, c.d_ff};
        } else {
            shape = {c.vocab_size, c.d_model};
        }
        add(name, std::move(shape), v);
    });
    write_safetensors(dir / "model.safetensors", tensors, dtype, {{"format", "pt"}});
}

} // namespace ncatlas
