#pragma once

#include "ncatlas/atlas.hpp"
#include "ncatlas/checkpoint.hpp"
#include "ncatlas/decoder.hpp"

#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

namespace ncatlas {

class Vocabulary;

struct QueryOptions {
    DecodeOptions decode;
    ScoreMode mode = ScoreMode::mean100;
    std::size_t batch_size = 512;
};

struct FeatureHit {
    NeuronAddress address;
    double normalized_score = 0.0;  // in `mode`
    float raw_probability = 0.0f;
    ScoreMode mode = ScoreMode::mean100;
};

// p(token) and the top-100 sum for every neuron, from one streaming pass.
struct TokenScores {
    TokenId token = 0;
    ModelConfig config;
    QueryOptions options;
    std::vector<float> probability;
    std::vector<float> top100_sum;

    // p / top100_sum; identical ordering in both modes.
    double ratio(std::size_t flat) const { return double(probability[flat]) / double(top100_sum[flat]); }
    double score(std::size_t flat) const;
};

TokenScores score_token(const ModelCheckpoint& ckpt, TokenId token, const QueryOptions& options = {});

// Highest normalized scores first; ties by (layer, neuron).
std::vector<FeatureHit> rank_features(const TokenScores& scores, std::size_t top_n);
std::vector<FeatureHit> find_feature_neurons(const ModelCheckpoint& ckpt, TokenId token, std::size_t top_n,
                                             const QueryOptions& options = {});

struct Heatmap {
    TokenId token = 0;
    QueryOptions options;
    std::uint64_t fingerprint = 0;
    std::size_t n_layers = 0;
    std::size_t d_ff = 0;
    std::vector<double> scores;  // [n_layers x d_ff], row-major, in options.mode
    std::vector<double> ratios;  // p / top100_sum; empty when read back from a data file

    // Max-pooled over column blocks of pool_width neurons.
    std::size_t pool_width = 1;
    std::size_t summary_cols = 0;
    std::vector<double> summary;  // [n_layers x summary_cols]

    double at(std::size_t layer, std::size_t neuron) const { return scores[layer * d_ff + neuron]; }
    NeuronAddress argmax() const;
};

Heatmap heatmap(const ModelCheckpoint& ckpt, TokenId token, const QueryOptions& options = {},
                std::size_t summary_columns = 256);
Heatmap heatmap_from_scores(const TokenScores& scores, std::uint64_t fingerprint, std::size_t summary_columns = 256);

// "# heatmap {json header}" then "layer neuron score" per neuron.
void write_heatmap_data(const Heatmap& map, std::ostream& out, const std::string& surface = {});
Heatmap read_heatmap_data(std::istream& in);

struct ProfileEntry {
    TokenId token = 0;
    float probability = 0.0f;
    std::string surface;  // empty without a vocabulary
};

struct NeuronProfile {
    NeuronAddress address;
    std::vector<ProfileEntry> tokens;
    float top100_mean = 0.0f;
    float top100_sum = 0.0f;
};

NeuronProfile neuron_profile(const Atlas& atlas, const NeuronAddress& address, const Vocabulary* vocab = nullptr);
NeuronProfile neuron_profile(const DecodedNeuron& record, const Vocabulary* vocab = nullptr);

struct LayerMatch {
    std::uint32_t layer = 0;
    std::size_t total = 0;
    std::size_t matching = 0;
    double fraction = 0.0;
};

struct ChangedNeuron {
    NeuronAddress address;
    TokenId before = 0;
    TokenId after = 0;
};

struct DiffReport {
    std::size_t total_neurons = 0;
    std::size_t matching_top1 = 0;
    double match_fraction = 0.0;
    std::vector<LayerMatch> per_layer;
    std::vector<ChangedNeuron> changed_examples;  // first 100 mismatches in (layer, neuron) order
    std::uint64_t fingerprint_a = 0;
    std::uint64_t fingerprint_b = 0;
    DecodeOptions options;
};

inline constexpr std::size_t max_changed_examples = 100;

// Compares top-1 tokens per neuron. Refuses atlases whose config, k or decode
// options differ.
DiffReport diff_atlases(const Atlas& a, const Atlas& b);

} // namespace ncatlas
