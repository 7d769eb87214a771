#include "ncatlas/config.hpp"

#include "ncatlas/error.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

namespace ncatlas {

namespace {

using nlohmann::json;

template <typename T>
std::optional<T> first_of(const json& doc, std::initializer_list<const char*> keys) {
    for (const char* key : keys) {
        auto it = doc.find(key);
        if (it != doc.end() && !it->is_null()) return it->get<T>();
    }
    return std::nullopt;
}

std::size_t required_count(const json& doc, std::initializer_list<const char*> keys) {
    auto value = first_of<long long>(doc, keys);
    if (!value) throw Error(ErrorCode::parse_error, std::string("config is missing field ") + *keys.begin());
    if (*value < 1)
        throw Error(ErrorCode::invalid_argument, std::string("config field ") + *keys.begin() + " must be >= 1");
    return static_cast<std::size_t>(*value);
}

} // namespace

void ModelConfig::validate() const {
    auto fail = [](const std::string& what) { throw Error(ErrorCode::invalid_argument, "invalid model config: " + what); };
    if (n_layers < 1 || d_model < 1 || d_ff < 1 || vocab_size < 1 || n_heads < 1 || n_kv_heads < 1 || head_dim < 1)
        fail("all counts must be >= 1");
    if (d_model != n_heads * head_dim)
        fail("d_model (" + std::to_string(d_model) + ") != n_heads * head_dim (" + std::to_string(n_heads) + " * " +
             std::to_string(head_dim) + ")");
    if (n_heads % n_kv_heads != 0) fail("n_heads must be a multiple of n_kv_heads");
    if (head_dim % 2 != 0) fail("head_dim must be even for rotary embeddings");
    if (!(rope_theta > 0.0) || !std::isfinite(rope_theta)) fail("rope_theta must be positive");
    if (!(norm_eps > 0.0) || !std::isfinite(norm_eps)) fail("norm_eps must be positive");
}

ModelConfig config_from_json(const json& doc) {
    if (!doc.is_object()) throw Error(ErrorCode::parse_error, "config must be a JSON object");
    ModelConfig c;
    try {
        c.n_layers = required_count(doc, {"n_layers", "num_hidden_layers"});
        c.d_model = required_count(doc, {"d_model", "hidden_size"});
        c.d_ff = required_count(doc, {"d_ff", "intermediate_size"});
        c.vocab_size = required_count(doc, {"vocab_size"});
        c.n_heads = required_count(doc, {"n_heads", "num_attention_heads"});
        c.n_kv_heads = first_of<std::size_t>(doc, {"n_kv_heads", "num_key_value_heads"}).value_or(c.n_heads);
        c.head_dim = first_of<std::size_t>(doc, {"head_dim"}).value_or(c.d_model / c.n_heads);
        c.rope_theta = first_of<double>(doc, {"rope_theta"}).value_or(10000.0);
        c.norm_eps = first_of<double>(doc, {"norm_eps", "rms_norm_eps"}).value_or(1e-5);
        c.tied_embeddings = first_of<bool>(doc, {"tied_embeddings", "tie_word_embeddings"}).value_or(false);
        if (auto it = doc.find("rope_scaling"); it != doc.end() && it->is_object()) {
            const std::string type = it->value("rope_type", it->value("type", std::string("llama3")));
            if (type != "llama3")
                throw Error(ErrorCode::parse_error, "unsupported rope_scaling type '" + type + "'");
            RopeScaling s;
            s.factor = it->value("factor", s.factor);
            s.low_freq_factor = it->value("low_freq_factor", s.low_freq_factor);
            s.high_freq_factor = it->value("high_freq_factor", s.high_freq_factor);
            s.original_max_position = it->value("original_max_position_embeddings", s.original_max_position);
            c.rope_scaling = s;
        }
    } catch (const json::exception& e) {
        throw Error(ErrorCode::parse_error, std::string("malformed config: ") + e.what());
    }
    c.validate();
    return c;
}

json config_to_json(const ModelConfig& c) {
    json doc = {
        {"n_layers", c.n_layers},     {"d_model", c.d_model},       {"d_ff", c.d_ff},
        {"vocab_size", c.vocab_size}, {"n_heads", c.n_heads},       {"n_kv_heads", c.n_kv_heads},
        {"head_dim", c.head_dim},     {"rope_theta", c.rope_theta}, {"norm_eps", c.norm_eps},
        {"tied_embeddings", c.tied_embeddings},
    };
    if (c.rope_scaling) {
        doc["rope_scaling"] = {
            {"rope_type", "llama3"},
            {"factor", c.rope_scaling->factor},
            {"low_freq_factor", c.rope_scaling->low_freq_factor},
            {"high_freq_factor", c.rope_scaling->high_freq_factor},
            {"original_max_position_embeddings", c.rope_scaling->original_max_position},
        };
    }
    return doc;
}

ModelConfig load_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error(ErrorCode::io_error, "cannot open config file " + path.string());
    json doc;
    try {
        doc = json::parse(in);
    } catch (const json::exception& e) {
        throw Error(ErrorCode::parse_error, "config file " + path.string() + " is not valid JSON: " + e.what());
    }
    return config_from_json(doc);
}

void save_config(const ModelConfig& config, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw Error(ErrorCode::io_error, "cannot write config file " + path.string());
    out << config_to_json(config).dump(2) << '\n';
}

} // namespace ncatlas
