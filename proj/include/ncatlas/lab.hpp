#pragma once

#include "ncatlas/atlas.hpp"
#include "ncatlas/chat_template.hpp"
#include "ncatlas/engine.hpp"
#include "ncatlas/query.hpp"

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

namespace ncatlas {

class Vocabulary;

// ---- clamp sweeps ----

struct SweepPoint {
    float clamp_value = 0.0f;
    float probability = 0.0f;
    bool operator==(const SweepPoint&) const = default;
};

struct SweepResult {
    std::string prompt_text;
    std::vector<TokenId> prompt_ids;
    TokenId target_token = 0;
    NeuronAddress neuron;
    std::vector<SweepPoint> points;  // ascending clamp value
    float baseline_probability = 0.0f;
    float natural_activation = 0.0f;  // unclamped up output at the last prompt position

    bool operator==(const SweepResult&) const = default;
};

// Evenly spaced values, endpoints included. Defaults give 101 points on [-500, 500].
std::vector<float> sweep_grid(float low = -500.0f, float high = 500.0f, std::size_t points = 101);

SweepResult clamp_sweep(const ModelCheckpoint& ckpt, std::span<const TokenId> prompt_ids, const NeuronAddress& neuron,
                        std::span<const float> values, TokenId target, std::string prompt_text = {});

// Text front end: the prompt is encoded and the target must be a single token.
SweepResult clamp_sweep(const ModelCheckpoint& ckpt, const Vocabulary& vocab, const std::string& prompt,
                        const NeuronAddress& neuron, std::span<const float> values, const std::string& target);

// "# key=value" header, then "clamp_value probability" per line.
void write_sweep_data(const SweepResult& sweep, std::ostream& out);
void write_sweep_svg(const SweepResult& sweep, std::ostream& out, const std::string& title = {});
void write_heatmap_svg(const Heatmap& map, std::ostream& out, const std::string& title = {});

// ---- fine-tuning stability ----

struct WatchResult {
    NeuronAddress address;
    TokenId before = 0;
    TokenId after = 0;
    bool preserved = false;
};

struct StabilityReport {
    DiffReport diff;
    std::vector<WatchResult> watchlist;
};

StabilityReport stability_experiment(const Atlas& a, const Atlas& b, std::span<const NeuronAddress> watchlist);

// Builds (or loads from cache_dir, keyed by fingerprint and options) both atlases first.
StabilityReport stability_experiment(const ModelCheckpoint& a, const ModelCheckpoint& b, const AtlasOptions& options,
                                     std::span<const NeuronAddress> watchlist,
                                     const std::optional<std::filesystem::path>& cache_dir = std::nullopt);

void write_stability_report(const StabilityReport& report, std::ostream& out, const Vocabulary* vocab = nullptr);

// ---- clamped chat ----

struct ChatSample {
    std::uint64_t seed = 0;
    std::vector<TokenId> ids;
    std::string text;
    bool operator==(const ChatSample&) const = default;
};

struct ChatSampleSet {
    std::string question;
    std::string prompt;
    std::optional<ClampSpec> clamp;
    GenerationParams params;
    std::vector<ChatSample> control;  // unclamped, same seeds as `clamped`
    std::vector<ChatSample> clamped;  // empty when no clamp is given
};

// Sample i uses seed params.seed + i in both sets.
ChatSampleSet clamped_chat(const ModelCheckpoint& ckpt, const Vocabulary& vocab, const ChatTemplate& tmpl,
                           const std::string& question, const std::optional<ClampSpec>& clamp, std::size_t n_samples,
                           GenerationParams params);

void write_chat_transcripts(const ChatSampleSet& set, std::ostream& out);

} // namespace ncatlas
