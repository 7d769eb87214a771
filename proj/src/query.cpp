#include "ncatlas/query.hpp"

#include "ncatlas/error.hpp"
#include "ncatlas/parallel.hpp"
#include "ncatlas/vocabulary.hpp"

#include <algorithm>
#include <cstdio>
#include <istream>
#include <numeric>
#include <ostream>
#include <sstream>

namespace ncatlas {

using nlohmann::json;

double TokenScores::score(std::size_t flat) const {
    const double r = ratio(flat);
    return options.mode == ScoreMode::mean100 ? r * double(normalization_depth) : r;
}

TokenScores score_token(const ModelCheckpoint& ckpt, TokenId token, const QueryOptions& options) {
    if (token >= ckpt.config.vocab_size)
        throw Error(ErrorCode::unknown_token, "token id " + std::to_string(token) + " is outside the vocabulary (size " +
                                                  std::to_string(ckpt.config.vocab_size) + ")");
    if (ckpt.config.vocab_size < normalization_depth)
        throw Error(ErrorCode::invalid_argument, "vocabulary is smaller than the top-100 normalization depth");
    TokenScores out;
    out.token = token;
    out.config = ckpt.config;
    out.options = options;
    const std::size_t total = ckpt.config.neuron_count();
    out.probability.resize(total);
    out.top100_sum.resize(total);
    stream_decode(ckpt, options.decode, options.batch_size, [&](std::size_t first, Matrix& probs) {
        parallel_for(probs.rows(), 4, [&](std::size_t begin, std::size_t end) {
            for (std::size_t i = begin; i < end; ++i) {
                const auto row = probs.row(i);
                const auto summary = summarize_probabilities({}, row, normalization_depth);
                out.probability[first + i] = row[token];
                out.top100_sum[first + i] = summary.top100_sum;
            }
        });
    });
    return out;
}

namespace {

// Descending ratio, then ascending flat index.
auto ranking(const TokenScores& s) {
    return [&s](std::size_t x, std::size_t y) {
        const double rx = s.ratio(x);
        const double ry = s.ratio(y);
        return rx > ry || (rx == ry && x < y);
    };
}

} // namespace

std::vector<FeatureHit> rank_features(const TokenScores& scores, std::size_t top_n) {
    const std::size_t total = scores.probability.size();
    top_n = std::min(top_n, total);
    std::vector<std::size_t> order(total);
    std::iota(order.begin(), order.end(), std::size_t{0});
    const auto before = ranking(scores);
    std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(top_n), order.end(), before);
    std::vector<FeatureHit> hits;
    hits.reserve(top_n);
    for (std::size_t i = 0; i < top_n; ++i) {
        const std::size_t flat = order[i];
        hits.push_back({address_of(scores.config, flat, scores.options.decode.matrix_kind), scores.score(flat),
                        scores.probability[flat], scores.options.mode});
    }
    return hits;
}

std::vector<FeatureHit> find_feature_neurons(const ModelCheckpoint& ckpt, TokenId token, std::size_t top_n,
                                             const QueryOptions& options) {
    return rank_features(score_token(ckpt, token, options), top_n);
}

NeuronAddress Heatmap::argmax() const {
    // Scaling by 100 can merge two distinct ratios into one score, so the
    // ratios (when known) decide, matching rank_features exactly.
    const auto& key = ratios.empty() ? scores : ratios;
    std::size_t best = 0;
    for (std::size_t i = 1; i < key.size(); ++i)
        if (key[i] > key[best]) best = i;
    return {static_cast<std::uint32_t>(best / d_ff), static_cast<std::uint32_t>(best % d_ff),
            options.decode.matrix_kind};
}

namespace {

void build_summary(Heatmap& map, std::size_t summary_columns) {
    if (summary_columns == 0) throw Error(ErrorCode::invalid_argument, "summary grid needs at least one column");
    map.pool_width = (map.d_ff + summary_columns - 1) / summary_columns;
    map.summary_cols = (map.d_ff + map.pool_width - 1) / map.pool_width;
    map.summary.assign(map.n_layers * map.summary_cols, 0.0);
    for (std::size_t l = 0; l < map.n_layers; ++l) {
        for (std::size_t c = 0; c < map.summary_cols; ++c) {
            const std::size_t begin = c * map.pool_width;
            const std::size_t end = std::min(map.d_ff, begin + map.pool_width);
            double peak = map.at(l, begin);
            for (std::size_t n = begin + 1; n < end; ++n) peak = std::max(peak, map.at(l, n));
            map.summary[l * map.summary_cols + c] = peak;
        }
    }
}

json heatmap_header(const Heatmap& map, const std::string& surface) {
    return {{"format", "ncatlas-heatmap"},
            {"version", 1},
            {"token", map.token},
            {"surface", surface},
            {"mode", std::string(to_string(map.options.mode))},
            {"apply_final_norm", map.options.decode.apply_final_norm},
            {"matrix_kind", std::string(to_string(map.options.decode.matrix_kind))},
            {"fingerprint", fingerprint_hex(map.fingerprint)},
            {"n_layers", map.n_layers},
            {"d_ff", map.d_ff},
            {"summary_columns", map.summary_cols}};
}

} // namespace

Heatmap heatmap_from_scores(const TokenScores& scores, std::uint64_t fingerprint, std::size_t summary_columns) {
    Heatmap map;
    map.token = scores.token;
    map.options = scores.options;
    map.fingerprint = fingerprint;
    map.n_layers = scores.config.n_layers;
    map.d_ff = scores.config.d_ff;
    map.scores.resize(scores.probability.size());
    map.ratios.resize(scores.probability.size());
    for (std::size_t i = 0; i < map.scores.size(); ++i) {
        map.scores[i] = scores.score(i);
        map.ratios[i] = scores.ratio(i);
    }
    build_summary(map, summary_columns);
    return map;
}

Heatmap heatmap(const ModelCheckpoint& ckpt, TokenId token, const QueryOptions& options, std::size_t summary_columns) {
    return heatmap_from_scores(score_token(ckpt, token, options), ckpt.fingerprint, summary_columns);
}

void write_heatmap_data(const Heatmap& map, std::ostream& out, const std::string& surface) {
    out << "# heatmap " << heatmap_header(map, surface).dump(-1, ' ', false, nlohmann::json::error_handler_t::replace) << '\n';
    out << "# layer neuron score\n";
    char buf[64];
    for (std::size_t l = 0; l < map.n_layers; ++l) {
        for (std::size_t n = 0; n < map.d_ff; ++n) {
            std::snprintf(buf, sizeof buf, "%zu %zu %.17g\n", l, n, map.at(l, n));
            out << buf;
        }
    }
}

Heatmap read_heatmap_data(std::istream& in) {
    std::string line;
    if (!std::getline(in, line) || !line.starts_with("# heatmap "))
        throw Error(ErrorCode::parse_error, "not a heatmap data file");
    Heatmap map;
    std::size_t summary_columns = 256;
    try {
        const json h = json::parse(line.substr(10));
        map.token = h.at("token").get<TokenId>();
        map.options.mode = parse_score_mode(h.at("mode").get<std::string>());
        map.options.decode.apply_final_norm = h.at("apply_final_norm").get<bool>();
        map.options.decode.matrix_kind = parse_matrix_kind(h.at("matrix_kind").get<std::string>());
        map.fingerprint = std::stoull(h.at("fingerprint").get<std::string>(), nullptr, 16);
        map.n_layers = h.at("n_layers").get<std::size_t>();
        map.d_ff = h.at("d_ff").get<std::size_t>();
        summary_columns = h.at("summary_columns").get<std::size_t>();
    } catch (const std::exception& e) {
        throw Error(ErrorCode::parse_error, std::string("malformed heatmap header: ") + e.what());
    }
    map.scores.assign(map.n_layers * map.d_ff, 0.0);
    std::size_t seen = 0;
    while (std::getline(in, line)) {
        if (line.empty() || line[0] == '#') continue;
        std::istringstream fields(line);
        std::size_t l = 0, n = 0;
        double score = 0.0;
        if (!(fields >> l >> n >> score) || l >= map.n_layers || n >= map.d_ff)
            throw Error(ErrorCode::parse_error, "malformed heatmap line: " + line);
        map.scores[l * map.d_ff + n] = score;
        ++seen;
    }
    if (seen != map.scores.size()) throw Error(ErrorCode::parse_error, "heatmap data file is missing neurons");
    build_summary(map, summary_columns);
    return map;
}

NeuronProfile neuron_profile(const DecodedNeuron& record, const Vocabulary* vocab) {
    NeuronProfile p;
    p.address = record.address;
    p.top100_mean = record.top100_mean;
    p.top100_sum = record.top100_sum;
    for (const auto& t : record.top_tokens) {
        ProfileEntry e{t.index, t.value, {}};
        if (vocab && vocab->contains(t.index)) e.surface = display_token(*vocab, t.index);
        p.tokens.push_back(std::move(e));
    }
    return p;
}

NeuronProfile neuron_profile(const Atlas& atlas, const NeuronAddress& address, const Vocabulary* vocab) {
    return neuron_profile(atlas.record(address), vocab);
}

DiffReport diff_atlases(const Atlas& a, const Atlas& b) {
    if (a.config != b.config)
        throw Error(ErrorCode::incompatible, "atlases are incomparable: model configs differ");
    if (a.k != b.k) throw Error(ErrorCode::incompatible, "atlases are incomparable: k differs");
    if (a.options != b.options)
        throw Error(ErrorCode::incompatible, "atlases are incomparable: decode options (final norm / matrix kind / "
                                             "accumulation) differ");
    if (a.records.size() != b.records.size())
        throw Error(ErrorCode::incompatible, "atlases are incomparable: record counts differ");

    DiffReport report;
    report.total_neurons = a.records.size();
    report.fingerprint_a = a.fingerprint;
    report.fingerprint_b = b.fingerprint;
    report.options = a.options;
    report.per_layer.resize(a.config.n_layers);
    for (std::size_t l = 0; l < a.config.n_layers; ++l) report.per_layer[l].layer = static_cast<std::uint32_t>(l);
    for (std::size_t i = 0; i < a.records.size(); ++i) {
        const auto& ra = a.records[i];
        const auto& rb = b.records[i];
        auto& layer = report.per_layer[ra.address.layer];
        ++layer.total;
        const TokenId before = ra.top_tokens.front().index;
        const TokenId after = rb.top_tokens.front().index;
        if (before == after) {
            ++layer.matching;
            ++report.matching_top1;
        } else if (report.changed_examples.size() < max_changed_examples) {
            report.changed_examples.push_back({ra.address, before, after});
        }
    }
    for (auto& layer : report.per_layer)
        layer.fraction = layer.total ? double(layer.matching) / double(layer.total) : 0.0;
    report.match_fraction = report.total_neurons ? double(report.matching_top1) / double(report.total_neurons) : 0.0;
    return report;
}

} // namespace ncatlas
