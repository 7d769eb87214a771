#include "ncatlas/lab.hpp"

#include "ncatlas/error.hpp"
#include "ncatlas/parallel.hpp"
#include "ncatlas/vocabulary.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <ostream>

namespace ncatlas {

namespace {

std::string fmt_float(double v, const char* spec = "%.9g") {
    char buf[64];
    std::snprintf(buf, sizeof buf, spec, v);
    return buf;
}

std::string json_string(const std::string& s) { return nlohmann::json(s).dump(-1, ' ', false, nlohmann::json::error_handler_t::replace); }

std::string ids_text(std::span<const TokenId> ids) {
    std::string out;
    for (std::size_t i = 0; i < ids.size(); ++i) out += (i ? "," : "") + std::to_string(ids[i]);
    return out;
}

std::string xml_escape(const std::string& s) {
    std::string out;
    for (char c : s) {
        switch (c) {
        case '<': out += "&lt;"; break;
        case '>': out += "&gt;"; break;
        case '&': out += "&amp;"; break;
        case '"': out += "&quot;"; break;
        default: out.push_back(c);
        }
    }
    return out;
}

} // namespace

std::vector<float> sweep_grid(float low, float high, std::size_t points) {
    if (points == 0) throw Error(ErrorCode::invalid_argument, "sweep grid needs at least one point");
    if (!(low <= high)) throw Error(ErrorCode::invalid_argument, "sweep grid needs low <= high");
    if (points == 1) return {low};
    std::vector<float> grid(points);
    for (std::size_t i = 0; i < points; ++i)
        grid[i] = static_cast<float>(double(low) + (double(high) - double(low)) * double(i) / double(points - 1));
    return grid;
}

SweepResult clamp_sweep(const ModelCheckpoint& ckpt, std::span<const TokenId> prompt_ids, const NeuronAddress& neuron,
                        std::span<const float> values, TokenId target, std::string prompt_text) {
    if (values.empty()) throw Error(ErrorCode::invalid_argument, "sweep needs at least one clamp value");
    if (prompt_ids.empty()) throw Error(ErrorCode::invalid_argument, "sweep prompt must not be empty");
    if (target >= ckpt.config.vocab_size)
        throw Error(ErrorCode::unknown_token, "target token " + std::to_string(target) + " is outside the vocabulary");
    for (float v : values)
        if (!std::isfinite(v)) throw Error(ErrorCode::invalid_argument, "clamp values must be finite");
    NeuronAddress addr = neuron;
    addr.kind = MatrixKind::up;
    ckpt.check_address(addr);

    SweepResult result;
    result.prompt_text = std::move(prompt_text);
    result.prompt_ids.assign(prompt_ids.begin(), prompt_ids.end());
    result.target_token = target;
    result.neuron = addr;

    std::vector<float> sorted(values.begin(), values.end());
    std::stable_sort(sorted.begin(), sorted.end());
    result.points.resize(sorted.size());

    result.baseline_probability = next_token_distribution(ckpt, prompt_ids)[target];
    result.natural_activation = probe_up_activations(ckpt, prompt_ids, std::span(&addr, 1))[0].back();

    parallel_for(sorted.size(), 1, [&](std::size_t begin, std::size_t end) {
        for (std::size_t i = begin; i < end; ++i) {
            const ClampSpec clamp{addr, sorted[i], {}};
            result.points[i] = {sorted[i], next_token_distribution(ckpt, prompt_ids, std::span(&clamp, 1))[target]};
        }
    });
    return result;
}

SweepResult clamp_sweep(const ModelCheckpoint& ckpt, const Vocabulary& vocab, const std::string& prompt,
                        const NeuronAddress& neuron, std::span<const float> values, const std::string& target) {
    const TokenId target_id = lookup_token(vocab, target);
    const auto ids = encode_text(vocab, prompt, SpecialTokens::parse);
    return clamp_sweep(ckpt, ids, neuron, values, target_id, prompt);
}

void write_sweep_data(const SweepResult& s, std::ostream& out) {
    out << "# sweep\n";
    out << "# prompt=" << json_string(s.prompt_text) << '\n';
    out << "# prompt_ids=" << ids_text(s.prompt_ids) << '\n';
    out << "# target=" << s.target_token << '\n';
    out << "# layer=" << s.neuron.layer << " neuron=" << s.neuron.neuron << " one_based_layer=" << s.neuron.layer + 1 << '\n';
    out << "# baseline=" << fmt_float(s.baseline_probability) << '\n';
    out << "# natural_activation=" << fmt_float(s.natural_activation) << '\n';
    out << "# clamp_value probability\n";
    for (const auto& p : s.points) out << fmt_float(p.clamp_value) << ' ' << fmt_float(p.probability) << '\n';
}

void write_sweep_svg(const SweepResult& s, std::ostream& out, const std::string& title) {
    constexpr double width = 640, height = 400, left = 60, right = 20, top = 40, bottom = 50;
    const double plot_w = width - left - right;
    const double plot_h = height - top - bottom;
    const double x_lo = s.points.front().clamp_value;
    const double x_hi = s.points.back().clamp_value;
    const double x_span = x_hi > x_lo ? x_hi - x_lo : 1.0;
    auto px = [&](double x) { return left + (x - x_lo) / x_span * plot_w; };
    auto py = [&](double p) { return top + (1.0 - p) * plot_h; };

    out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height << "\">\n";
    out << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    out << "<text x=\"" << width / 2 << "\" y=\"24\" text-anchor=\"middle\" font-size=\"14\">"
        << xml_escape(title.empty() ? "p(target) vs clamp value" : title) << "</text>\n";
    out << "<line x1=\"" << left << "\" y1=\"" << top + plot_h << "\" x2=\"" << left + plot_w << "\" y2=\""
        << top + plot_h << "\" stroke=\"black\"/>\n";
    out << "<line x1=\"" << left << "\" y1=\"" << top << "\" x2=\"" << left << "\" y2=\"" << top + plot_h
        << "\" stroke=\"black\"/>\n";
    for (double p : {0.0, 0.5, 1.0})
        out << "<text x=\"" << left - 6 << "\" y=\"" << py(p) + 4 << "\" text-anchor=\"end\" font-size=\"11\">" << p
            << "</text>\n";
    out << "<text x=\"" << left << "\" y=\"" << height - 20 << "\" font-size=\"11\">" << fmt_float(x_lo, "%g")
        << "</text>\n";
    out << "<text x=\"" << left + plot_w << "\" y=\"" << height - 20 << "\" text-anchor=\"end\" font-size=\"11\">"
        << fmt_float(x_hi, "%g") << "</text>\n";
    out << "<line x1=\"" << left << "\" y1=\"" << py(s.baseline_probability) << "\" x2=\"" << left + plot_w
        << "\" y2=\"" << py(s.baseline_probability) << "\" stroke=\"gray\" stroke-dasharray=\"4 4\"/>\n";
    out << "<polyline fill=\"none\" stroke=\"crimson\" stroke-width=\"2\" points=\"";
    for (const auto& p : s.points) out << fmt_float(px(p.clamp_value), "%.2f") << ',' << fmt_float(py(p.probability), "%.2f") << ' ';
    out << "\"/>\n</svg>\n";
}

void write_heatmap_svg(const Heatmap& map, std::ostream& out, const std::string& title) {
    constexpr double cell_h = 12, left = 60, top = 40;
    const double cell_w = std::max(1.0, 768.0 / double(map.summary_cols));
    const double width = left + cell_w * double(map.summary_cols) + 20;
    const double height = top + cell_h * double(map.n_layers) + 30;
    double peak = 0.0;
    for (double v : map.summary) peak = std::max(peak, v);
    if (peak <= 0.0) peak = 1.0;

    out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height << "\">\n";
    out << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    out << "<text x=\"" << width / 2 << "\" y=\"24\" text-anchor=\"middle\" font-size=\"14\">"
        << xml_escape(title.empty() ? "normalized token probability" : title) << "</text>\n";
    for (std::size_t l = 0; l < map.n_layers; ++l) {
        out << "<text x=\"" << left - 6 << "\" y=\"" << top + cell_h * double(l) + cell_h - 2
            << "\" text-anchor=\"end\" font-size=\"10\">L" << l << "</text>\n";
        for (std::size_t c = 0; c < map.summary_cols; ++c) {
            const double v = map.summary[l * map.summary_cols + c] / peak;
            const int shade = static_cast<int>(std::lround(255.0 * (1.0 - std::clamp(v, 0.0, 1.0))));
            out << "<rect x=\"" << fmt_float(left + cell_w * double(c), "%.2f") << "\" y=\"" << top + cell_h * double(l)
                << "\" width=\"" << fmt_float(cell_w, "%.2f") << "\" height=\"" << cell_h << "\" fill=\"rgb(255,"
                << shade << ',' << shade << ")\"/>\n";
        }
    }
    out << "</svg>\n";
}

StabilityReport stability_experiment(const Atlas& a, const Atlas& b, std::span<const NeuronAddress> watchlist) {
    StabilityReport report;
    report.diff = diff_atlases(a, b);
    for (const auto& addr : watchlist) {
        WatchResult w;
        w.address = addr;
        w.before = a.record(addr).top_tokens.front().index;
        w.after = b.record(addr).top_tokens.front().index;
        w.preserved = w.before == w.after;
        report.watchlist.push_back(w);
    }
    return report;
}

namespace {

Atlas cached_atlas(const ModelCheckpoint& ckpt, const AtlasOptions& options,
                   const std::optional<std::filesystem::path>& cache_dir) {
    if (!cache_dir) return build_atlas(ckpt, options);
    const std::string name = fingerprint_hex(ckpt.fingerprint) + "-k" + std::to_string(options.k) + "-" +
                             std::string(to_string(options.decode.matrix_kind)) +
                             (options.decode.apply_final_norm ? "-norm" : "-raw") +
                             (options.decode.accumulation == Accumulation::f64 ? "-f64" : "") + ".atlas";
    const auto path = *cache_dir / name;
    if (std::filesystem::exists(path)) {
        Atlas atlas = load_atlas(path);
        if (atlas.fingerprint == ckpt.fingerprint && atlas.options == options.decode && atlas.k == options.k)
            return atlas;
    }
    std::filesystem::create_directories(*cache_dir);
    Atlas atlas = build_atlas(ckpt, options);
    save_atlas(atlas, path);
    return atlas;
}

} // namespace

StabilityReport stability_experiment(const ModelCheckpoint& a, const ModelCheckpoint& b, const AtlasOptions& options,
                                     std::span<const NeuronAddress> watchlist,
                                     const std::optional<std::filesystem::path>& cache_dir) {
    if (a.config != b.config)
        throw Error(ErrorCode::incompatible, "checkpoints are incomparable: model configs differ");
    return stability_experiment(cached_atlas(a, options, cache_dir), cached_atlas(b, options, cache_dir), watchlist);
}

void write_stability_report(const StabilityReport& r, std::ostream& out, const Vocabulary* vocab) {
    auto token = [&](TokenId id) {
        std::string s = std::to_string(id);
        if (vocab && vocab->contains(id)) s += " \"" + display_token(*vocab, id) + "\"";
        return s;
    };
    const auto& d = r.diff;
    out << "top-1 token preserved: " << d.matching_top1 << " / " << d.total_neurons << " = "
        << fmt_float(100.0 * d.match_fraction, "%.1f") << "%\n";
    out << "decode options: matrix_kind=" << to_string(d.options.matrix_kind)
        << " apply_final_norm=" << (d.options.apply_final_norm ? 1 : 0) << '\n';
    out << "per layer (0-based):\n";
    for (const auto& l : d.per_layer)
        out << "  layer " << l.layer << ": " << l.matching << " / " << l.total << " = "
            << fmt_float(100.0 * l.fraction, "%.1f") << "%\n";
    if (!r.watchlist.empty()) out << "watchlist:\n";
    for (const auto& w : r.watchlist)
        out << "  " << describe(w.address) << ": " << token(w.before) << " -> " << token(w.after)
            << (w.preserved ? "  preserved" : "  changed") << '\n';
}

ChatSampleSet clamped_chat(const ModelCheckpoint& ckpt, const Vocabulary& vocab, const ChatTemplate& tmpl,
                           const std::string& question, const std::optional<ClampSpec>& clamp, std::size_t n_samples,
                           GenerationParams params) {
    validate_params(params);
    if (clamp) validate_clamps(ckpt, std::span(&*clamp, 1));
    const ChatMessage message{"user", question};
    ChatSampleSet set;
    set.question = question;
    set.prompt = apply_chat_template(tmpl, std::span(&message, 1), true);
    set.clamp = clamp;
    for (TokenId id : stop_token_ids(tmpl, vocab)) params.stop_token_ids.insert(id);
    set.params = params;

    const auto prompt_ids = encode_text(vocab, set.prompt, SpecialTokens::parse);
    auto run = [&](std::span<const ClampSpec> clamps, std::vector<ChatSample>& samples) {
        samples.resize(n_samples);
        parallel_for(n_samples, 1, [&](std::size_t begin, std::size_t end) {
            for (std::size_t i = begin; i < end; ++i) {
                GenerationParams p = params;
                p.seed = params.seed + i;
                auto ids = generate(ckpt, prompt_ids, clamps, p);
                std::span<const TokenId> visible(ids);
                if (!visible.empty() && p.stop_token_ids.count(visible.back())) visible = visible.first(visible.size() - 1);
                samples[i] = {p.seed, ids, decode_tokens(vocab, visible)};
            }
        });
    };
    run({}, set.control);
    if (clamp) run(std::span(&*clamp, 1), set.clamped);
    return set;
}

void write_chat_transcripts(const ChatSampleSet& set, std::ostream& out) {
    out << "=== question: " << set.question << '\n';
    out << "=== params: sampling=" << to_string(set.params.sampling);
    if (set.params.sampling == Sampling::temperature) out << " temperature=" << fmt_float(set.params.temperature, "%g");
    out << " max_new_tokens=" << set.params.max_new_tokens << '\n';
    if (set.clamp)
        out << "=== clamp: " << describe(set.clamp->address) << " value=" << fmt_float(set.clamp->value, "%g") << '\n';
    auto block = [&](const char* label, const std::vector<ChatSample>& samples) {
        for (std::size_t i = 0; i < samples.size(); ++i) {
            out << "--- " << label << " sample " << i << " seed=" << samples[i].seed << '\n';
            out << samples[i].text << '\n';
        }
    };
    block("control", set.control);
    block("clamped", set.clamped);
    out << "=== end\n";
}

} // namespace ncatlas
