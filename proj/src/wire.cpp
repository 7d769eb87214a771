#include "ncatlas/wire.hpp"

#include "ncatlas/error.hpp"

namespace ncatlas::wire {

namespace {

template <typename T>
T field(const json& doc, const char* name) {
    if (!doc.contains(name)) throw Error(ErrorCode::invalid_argument, std::string("missing field \"") + name + "\"");
    try {
        return doc.at(name).get<T>();
    } catch (const json::exception&) {
        throw Error(ErrorCode::invalid_argument, std::string("field \"") + name + "\" has the wrong type");
    }
}

json decode_options(const DecodeOptions& o) {
    return {{"apply_final_norm", o.apply_final_norm},
            {"matrix_kind", std::string(to_string(o.matrix_kind))},
            {"accumulation", o.accumulation == Accumulation::f64 ? "f64" : "f32"}};
}

} // namespace

json address(const NeuronAddress& a) {
    return {{"layer", a.layer}, {"neuron", a.neuron}, {"one_based_layer", a.layer + 1},
            {"kind", std::string(to_string(a.kind))}};
}

NeuronAddress address_from(const json& doc, MatrixKind default_kind) {
    if (!doc.is_object()) throw Error(ErrorCode::invalid_argument, "neuron must be an object with layer and neuron");
    const auto layer = field<std::int64_t>(doc, "layer");
    const auto neuron = field<std::int64_t>(doc, "neuron");
    if (layer < 0 || neuron < 0 || layer > INT32_MAX || neuron > INT32_MAX)
        throw Error(ErrorCode::out_of_range, "layer and neuron must be non-negative");
    NeuronAddress a{static_cast<std::uint32_t>(layer), static_cast<std::uint32_t>(neuron), default_kind};
    if (doc.contains("kind")) a.kind = parse_matrix_kind(field<std::string>(doc, "kind"));
    return a;
}

json feature_hits(std::span<const FeatureHit> hits) {
    json out = json::array();
    for (const auto& h : hits) {
        json j = address(h.address);
        j["score"] = h.normalized_score;
        j["probability"] = h.raw_probability;
        j["mode"] = std::string(to_string(h.mode));
        out.push_back(std::move(j));
    }
    return out;
}

json heatmap_summary(const Heatmap& map) {
    json grid = json::array();
    for (std::size_t l = 0; l < map.n_layers; ++l) {
        json row = json::array();
        for (std::size_t c = 0; c < map.summary_cols; ++c) row.push_back(map.summary[l * map.summary_cols + c]);
        grid.push_back(std::move(row));
    }
    const auto peak = map.argmax();
    return {{"token_id", map.token},
            {"mode", std::string(to_string(map.options.mode))},
            {"options", decode_options(map.options.decode)},
            {"fingerprint", fingerprint_hex(map.fingerprint)},
            {"n_layers", map.n_layers},
            {"d_ff", map.d_ff},
            {"pool_width", map.pool_width},
            {"summary_cols", map.summary_cols},
            {"summary", std::move(grid)},
            {"argmax", address(peak)},
            {"max_score", map.at(peak.layer, peak.neuron)}};
}

json profile(const NeuronProfile& p, std::size_t top_n) {
    json tokens = json::array();
    for (std::size_t i = 0; i < p.tokens.size() && i < top_n; ++i) {
        const auto& t = p.tokens[i];
        tokens.push_back({{"id", t.token}, {"probability", t.probability}, {"surface", t.surface}});
    }
    json out = address(p.address);
    out["top100_mean"] = p.top100_mean;
    out["top100_sum"] = p.top100_sum;
    out["tokens"] = std::move(tokens);
    return out;
}

json diff_report(const DiffReport& r) {
    json layers = json::array();
    for (const auto& l : r.per_layer)
        layers.push_back({{"layer", l.layer}, {"total", l.total}, {"matching", l.matching}, {"fraction", l.fraction}});
    json changed = json::array();
    for (const auto& c : r.changed_examples) {
        json j = address(c.address);
        j["before"] = c.before;
        j["after"] = c.after;
        changed.push_back(std::move(j));
    }
    return {{"total_neurons", r.total_neurons},
            {"matching_top1", r.matching_top1},
            {"match_fraction", r.match_fraction},
            {"per_layer", std::move(layers)},
            {"changed_examples", std::move(changed)},
            {"fingerprint_a", fingerprint_hex(r.fingerprint_a)},
            {"fingerprint_b", fingerprint_hex(r.fingerprint_b)},
            {"options", decode_options(r.options)}};
}

json stability(const StabilityReport& r) {
    json out = diff_report(r.diff);
    json watch = json::array();
    for (const auto& w : r.watchlist) {
        json j = address(w.address);
        j["before"] = w.before;
        j["after"] = w.after;
        j["preserved"] = w.preserved;
        watch.push_back(std::move(j));
    }
    out["watchlist"] = std::move(watch);
    return out;
}

json sweep(const SweepResult& s) {
    json points = json::array();
    for (const auto& p : s.points) points.push_back({{"value", p.clamp_value}, {"probability", p.probability}});
    return {{"prompt", s.prompt_text},
            {"prompt_ids", s.prompt_ids},
            {"target_id", s.target_token},
            {"neuron", address(s.neuron)},
            {"baseline_probability", s.baseline_probability},
            {"natural_activation", s.natural_activation},
            {"points", std::move(points)}};
}

json params(const GenerationParams& p) {
    return {{"max_new_tokens", p.max_new_tokens},
            {"sampling", std::string(to_string(p.sampling))},
            {"temperature", p.temperature},
            {"seed", p.seed},
            {"stop_token_ids", p.stop_token_ids},
            {"use_kv_cache", p.use_kv_cache}};
}

std::vector<ClampSpec> clamps_from(const json& doc) {
    std::vector<ClampSpec> out;
    if (doc.is_null()) return out;
    if (!doc.is_array()) throw Error(ErrorCode::invalid_argument, "clamps must be an array");
    for (const auto& c : doc) {
        ClampSpec spec;
        spec.address = address_from(c);
        const bool has_value = c.contains("value");
        const bool has_schedule = c.contains("per_position");
        if (has_value == has_schedule)
            throw Error(ErrorCode::invalid_argument, "each clamp needs exactly one of value or per_position");
        if (has_value) spec.value = field<float>(c, "value");
        else spec.per_position = field<std::vector<float>>(c, "per_position");
        out.push_back(std::move(spec));
    }
    return out;
}

json clamps(std::span<const ClampSpec> clamps) {
    json out = json::array();
    for (const auto& c : clamps) {
        json j = address(c.address);
        if (c.per_position.empty()) j["value"] = c.value;
        else j["per_position"] = c.per_position;
        out.push_back(std::move(j));
    }
    return out;
}

GenerationParams params_from(const json& doc, GenerationParams p) {
    if (doc.is_null()) return p;
    if (!doc.is_object()) throw Error(ErrorCode::invalid_argument, "params must be an object");
    if (doc.contains("max_new_tokens")) {
        const auto n = field<std::int64_t>(doc, "max_new_tokens");
        if (n < 0) throw Error(ErrorCode::invalid_argument, "max_new_tokens must be non-negative");
        p.max_new_tokens = static_cast<std::size_t>(n);
    }
    if (doc.contains("sampling")) p.sampling = parse_sampling(field<std::string>(doc, "sampling"));
    if (doc.contains("temperature")) p.temperature = field<double>(doc, "temperature");
    if (doc.contains("seed")) p.seed = field<std::uint64_t>(doc, "seed");
    if (doc.contains("stop_token_ids")) {
        const auto ids = field<std::vector<TokenId>>(doc, "stop_token_ids");
        p.stop_token_ids.insert(ids.begin(), ids.end());
    }
    if (doc.contains("use_kv_cache")) p.use_kv_cache = field<bool>(doc, "use_kv_cache");
    validate_params(p);
    return p;
}

} // namespace ncatlas::wire
