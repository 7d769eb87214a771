#include "cli.hpp"

#include "ncatlas/error.hpp"
#include "ncatlas/fixture.hpp"
#include "ncatlas/lab.hpp"
#include "ncatlas/parallel.hpp"
#include "ncatlas/service.hpp"
#include "ncatlas/vocabulary.hpp"
#include "ncatlas/wire.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <optional>
#include <ostream>
#include <sstream>

namespace ncatlas::cli {

namespace {

namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

struct DecodeFlags {
    bool apply_final_norm = false;
    std::string matrix_kind = "up";
    std::string mode = "mean100";

    DecodeOptions decode() const {
        DecodeOptions o;
        o.apply_final_norm = apply_final_norm;
        o.matrix_kind = parse_matrix_kind(matrix_kind);
        return o;
    }
    QueryOptions query(std::size_t batch_size) const {
        QueryOptions q;
        q.decode = decode();
        q.mode = parse_score_mode(mode);
        q.batch_size = batch_size;
        return q;
    }
};

struct Flags {
    std::string checkpoint;
    std::string tokenizer;
    std::string atlas;
    std::string out;
    std::string format = "human";
    std::size_t k = normalization_depth;
    std::size_t batch_size = 512;
    DecodeFlags decode;
    bool one_based = false;
};

void add_checkpoint(CLI::App* cmd, Flags& f, bool required = true) {
    auto* opt = cmd->add_option("--checkpoint", f.checkpoint, "Checkpoint directory or .safetensors file");
    if (required) opt->required();
}
void add_tokenizer(CLI::App* cmd, Flags& f) {
    cmd->add_option("--tokenizer", f.tokenizer, "tokenizer.json (default: next to the checkpoint)");
}
void add_decode(CLI::App* cmd, Flags& f, bool with_mode) {
    cmd->add_flag("--apply-final-norm", f.decode.apply_final_norm, "Apply the final RMSNorm before the LM-head");
    cmd->add_option("--matrix-kind", f.decode.matrix_kind, "Weight vector to decode")
        ->check(CLI::IsMember({"up", "gate", "down-column", "down"}));
    if (with_mode)
        cmd->add_option("--mode", f.decode.mode, "Normalization of token probabilities")
            ->check(CLI::IsMember({"mean100", "sum100"}));
}
void add_format(CLI::App* cmd, Flags& f) {
    cmd->add_option("--format", f.format, "human or data (stable, line-oriented)")
        ->check(CLI::IsMember({"human", "data"}));
}
void add_batch(CLI::App* cmd, Flags& f) {
    cmd->add_option("--batch-size", f.batch_size, "Neurons decoded per batch")->check(CLI::PositiveNumber);
}

fs::path sibling(const fs::path& checkpoint, const char* name) {
    const fs::path dir = fs::is_directory(checkpoint) ? checkpoint : checkpoint.parent_path();
    return dir / name;
}

ModelCheckpoint open_checkpoint(const Flags& f) { return load_checkpoint(f.checkpoint); }

Vocabulary open_vocabulary(const Flags& f, const ModelConfig& config) {
    const fs::path path = f.tokenizer.empty() ? sibling(f.checkpoint, "tokenizer.json") : fs::path(f.tokenizer);
    if (!fs::exists(path))
        throw Error(ErrorCode::io_error, "tokenizer not found at " + path.string() + "; pass --tokenizer");
    return load_vocabulary(path, config.vocab_size);
}

std::uint32_t layer_index(long long layer, bool one_based) {
    const long long zero = one_based ? layer - 1 : layer;
    if (zero < 0) throw Error(ErrorCode::out_of_range, "layer must be >= " + std::string(one_based ? "1" : "0"));
    return static_cast<std::uint32_t>(zero);
}

std::string quoted(const std::string& s) { return wire::json(s).dump(-1, ' ', false, wire::json::error_handler_t::replace); }

std::string surface(const Vocabulary* vocab, TokenId id) {
    return vocab && vocab->contains(id) ? display_token(*vocab, id) : std::string();
}

// display_token output is already escaped; human output only adds the quotes.
std::string shown(const std::string& s) { return '"' + s + '"'; }

std::string number(double v, const char* spec = "%.9g") {
    char buf[64];
    std::snprintf(buf, sizeof buf, spec, v);
    return buf;
}

std::uint64_t file_hash(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    std::uint64_t h = 0xcbf29ce484222325ULL;
    char buf[1 << 16];
    while (in.read(buf, sizeof buf) || in.gcount() > 0) {
        for (std::streamsize i = 0; i < in.gcount(); ++i) {
            h ^= static_cast<unsigned char>(buf[i]);
            h *= 0x100000001b3ULL;
        }
    }
    return h;
}

std::vector<float> parse_floats(const std::string& text) {
    std::vector<float> values;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        try {
            std::size_t used = 0;
            values.push_back(std::stof(item, &used));
            if (used != item.size()) throw std::invalid_argument(item);
        } catch (const std::exception&) {
            throw Error(ErrorCode::invalid_argument, "cannot parse \"" + item + "\" as a number");
        }
    }
    return values;
}

std::vector<TokenId> parse_ids(const std::string& text) {
    std::vector<TokenId> ids;
    for (float v : parse_floats(text)) ids.push_back(static_cast<TokenId>(v));
    return ids;
}

NeuronAddress parse_watch(const std::string& text, bool one_based) {
    const auto colon = text.find(':');
    if (colon == std::string::npos) throw Error(ErrorCode::invalid_argument, "watch entries look like LAYER:NEURON");
    try {
        return {layer_index(std::stoll(text.substr(0, colon)), one_based),
                static_cast<std::uint32_t>(std::stoul(text.substr(colon + 1))), MatrixKind::up};
    } catch (const std::logic_error&) {
        throw Error(ErrorCode::invalid_argument, "watch entries look like LAYER:NEURON, got " + text);
    }
}

bool is_atlas_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    char magic[8] = {};
    return in.read(magic, 8) && std::string_view(magic, 8) == "NCATLAS1";
}

std::string remediation(ErrorCode code) {
    switch (code) {
    case ErrorCode::io_error: return "check that the path exists and is readable";
    case ErrorCode::parse_error: return "the file is not in the expected format; regenerate it or check its source";
    case ErrorCode::incomplete_checkpoint:
        return "the checkpoint directory needs config.json and every safetensors shard";
    case ErrorCode::shape_mismatch: return "config.json does not match the tensors; use the config shipped with the weights";
    case ErrorCode::multi_token: return "use one of the listed pieces, or pass the id with --token-id";
    case ErrorCode::unknown_token: return "pass a token that exists in the tokenizer's vocabulary";
    case ErrorCode::out_of_range: return "coordinates are 0-based unless --one-based is given";
    case ErrorCode::incompatible: return "both inputs must come from the same architecture and decode options";
    case ErrorCode::non_finite: return "the checkpoint contains NaN or Inf weights";
    default: return "see --help for the expected arguments";
    }
}

class Runner {
public:
    Runner(std::ostream& out, std::ostream& err) : out_(out), err_(err) {}

    int run(int argc, const char* const* argv) {
        CLI::App app{"Neuron atlas: decode, query and steer feed-forward neurons of Llama-family checkpoints"};
        app.require_subcommand(1);
        app.fallthrough();  // lets --threads follow the subcommand
        app.add_option("--threads", threads_, "Worker threads (overrides NC_THREADS)")->check(CLI::PositiveNumber);
        build(app);
        try {
            app.parse(argc, argv);
        } catch (const CLI::CallForHelp&) {
            out_ << app.help();
            return 0;
        } catch (const CLI::CallForAllHelp&) {
            out_ << app.help("", CLI::AppFormatMode::All);
            return 0;
        } catch (const CLI::ParseError& e) {
            err_ << "error[usage]: " << e.what() << "\nrun with --help for usage\n";
            return 2;
        }
        try {
            if (threads_) set_worker_threads(threads_);
            action_();
            return 0;
        } catch (const Error& e) {
            err_ << "error[" << to_string(e.code()) << "]: " << e.what() << "\nhint: " << remediation(e.code()) << '\n';
            return 1;
        } catch (const std::exception& e) {
            err_ << "error[internal]: " << e.what() << '\n';
            return 1;
        }
    }

private:
    std::ostream& out_;
    std::ostream& err_;
    std::function<void()> action_;
    std::size_t threads_ = 0;
    Flags f_;

    // subcommand state
    std::string token_;
    std::optional<TokenId> token_id_;
    std::size_t top_n_ = 10;
    std::size_t columns_ = 256;
    std::string svg_;
    long long layer_ = 0;
    long long neuron_ = 0;
    std::vector<std::string> inputs_;
    std::vector<std::string> watch_;
    std::string cache_dir_;
    std::string prompt_;
    std::string prompt_ids_;
    std::string target_;
    std::optional<TokenId> target_id_;
    std::string values_;
    float low_ = -500.0f, high_ = 500.0f;
    std::size_t points_ = 101;
    std::string template_;
    std::string question_;
    std::optional<float> clamp_value_;
    bool clamp_ = false;
    std::size_t samples_ = 3;
    GenerationParams gen_;
    std::string sampling_ = "temperature";
    std::string host_;
    std::optional<int> port_;
    std::string atlas_dir_;
    std::string variant_ = "all";
    std::uint64_t seed_ = 0;
    std::string dtype_ = "f32";
    std::size_t repeat_ = 3;

    template <typename Fn>
    void on(CLI::App* cmd, Fn fn) {
        cmd->callback([this, fn] { action_ = fn; });
    }

    void build(CLI::App& app) {
        auto* atlas = app.add_subcommand("atlas", "Build or export a neuron atlas");
        atlas->require_subcommand(1);
        auto* atlas_build = atlas->add_subcommand("build", "Decode every neuron and save the top-k tokens");
        add_checkpoint(atlas_build, f_);
        atlas_build->add_option("--out,--atlas", f_.out, "Atlas file to write")->required();
        atlas_build->add_option("--k", f_.k, "Tokens kept per neuron (>= 100)");
        add_batch(atlas_build, f_);
        add_decode(atlas_build, f_, false);
        add_format(atlas_build, f_);
        on(atlas_build, [this] { atlas_build_cmd(); });

        auto* atlas_export = atlas->add_subcommand("export", "Write an atlas as text");
        atlas_export->add_option("--atlas", f_.atlas, "Atlas file")->required()->check(CLI::ExistingFile);
        atlas_export->add_option("--out", f_.out, "Output file (default stdout)");
        on(atlas_export, [this] { atlas_export_cmd(); });

        auto* find = app.add_subcommand("find", "Rank neurons by normalized probability of a token");
        add_checkpoint(find, f_);
        add_tokenizer(find, f_);
        find->add_option("--token", token_, "Token surface form, e.g. \" dog\"");
        find->add_option("--token-id", token_id_, "Token id");
        find->add_option("--top-n", top_n_, "Rows to print");
        add_batch(find, f_);
        add_decode(find, f_, true);
        add_format(find, f_);
        on(find, [this] { find_cmd(); });

        auto* heat = app.add_subcommand("heatmap", "Normalized probability of a token for every neuron");
        add_checkpoint(heat, f_);
        add_tokenizer(heat, f_);
        heat->add_option("--token", token_, "Token surface form");
        heat->add_option("--token-id", token_id_, "Token id");
        heat->add_option("--out", f_.out, "Heatmap data file (default stdout)");
        heat->add_option("--svg", svg_, "Also write an SVG plot of the summary grid");
        heat->add_option("--columns", columns_, "Summary grid width")->check(CLI::PositiveNumber);
        add_batch(heat, f_);
        add_decode(heat, f_, true);
        on(heat, [this] { heatmap_cmd(); });

        auto* profile = app.add_subcommand("profile", "Top tokens of one neuron");
        add_checkpoint(profile, f_, false);
        add_tokenizer(profile, f_);
        profile->add_option("--atlas", f_.atlas, "Read the profile from an atlas instead of decoding");
        profile->add_option("--layer", layer_, "Layer")->required();
        profile->add_option("--neuron", neuron_, "Neuron index")->required()->check(CLI::NonNegativeNumber);
        profile->add_flag("--one-based", f_.one_based, "--layer counts from 1");
        profile->add_option("--top-n", top_n_, "Rows to print");
        add_decode(profile, f_, false);
        add_format(profile, f_);
        on(profile, [this] { profile_cmd(); });

        auto* diff = app.add_subcommand("diff", "Compare top-1 tokens of two atlases or checkpoints");
        diff->add_option("inputs", inputs_, "Two atlas files or checkpoints")->required()->expected(2);
        diff->add_option("--watch", watch_, "LAYER:NEURON to check for preservation (repeatable)");
        diff->add_flag("--one-based", f_.one_based, "--watch layers count from 1");
        diff->add_option("--cache-dir", cache_dir_, "Where atlases built from checkpoints are cached");
        diff->add_option("--k", f_.k, "Tokens kept per neuron when building atlases");
        add_batch(diff, f_);
        add_decode(diff, f_, false);
        add_tokenizer(diff, f_);
        add_format(diff, f_);
        on(diff, [this] { diff_cmd(); });

        auto* sweep = app.add_subcommand("sweep", "Next-token probability of a target while clamping a neuron");
        add_checkpoint(sweep, f_);
        add_tokenizer(sweep, f_);
        sweep->add_option("--prompt", prompt_, "Prompt text");
        sweep->add_option("--prompt-ids", prompt_ids_, "Comma-separated prompt ids");
        sweep->add_option("--layer", layer_, "Layer")->required();
        sweep->add_option("--neuron", neuron_, "Neuron index")->required()->check(CLI::NonNegativeNumber);
        sweep->add_flag("--one-based", f_.one_based, "--layer counts from 1");
        sweep->add_option("--target", target_, "Target token surface form");
        sweep->add_option("--target-id", target_id_, "Target token id");
        sweep->add_option("--values", values_, "Comma-separated clamp values (overrides the grid)");
        sweep->add_option("--low", low_, "Grid start");
        sweep->add_option("--high", high_, "Grid end");
        sweep->add_option("--points", points_, "Grid size")->check(CLI::PositiveNumber);
        sweep->add_option("--out", f_.out, "Sweep data file (default stdout)");
        sweep->add_option("--svg", svg_, "Also write a line chart");
        on(sweep, [this] { sweep_cmd(); });

        auto* chat = app.add_subcommand("chat", "Sample answers with and without a clamped neuron");
        add_checkpoint(chat, f_);
        add_tokenizer(chat, f_);
        chat->add_option("--template", template_, "Chat template JSON (default: chat_template.json next to the checkpoint)");
        chat->add_option("--question", question_, "User message")->required();
        chat->add_option("--layer", layer_, "Clamped layer");
        chat->add_option("--neuron", neuron_, "Clamped neuron")->check(CLI::NonNegativeNumber);
        chat->add_option("--value", clamp_value_, "Clamp value; omit for control samples only");
        chat->add_flag("--one-based", f_.one_based, "--layer counts from 1");
        chat->add_option("--samples", samples_, "Samples per set");
        chat->add_option("--sampling", sampling_, "greedy or temperature")
            ->check(CLI::IsMember({"greedy", "temperature"}));
        chat->add_option("--temperature", gen_.temperature, "Sampling temperature");
        chat->add_option("--seed", gen_.seed, "Seed of the first sample");
        chat->add_option("--max-new-tokens", gen_.max_new_tokens, "Generation length cap");
        chat->add_option("--out", f_.out, "Transcript file (default stdout)");
        on(chat, [this] { chat_cmd(); });

        auto* serve = app.add_subcommand("serve", "Run the HTTP service");
        add_checkpoint(serve, f_);
        add_tokenizer(serve, f_);
        serve->add_option("--template", template_, "Chat template JSON");
        serve->add_option("--atlas", f_.atlas, "Atlas served by /neuron")->check(CLI::ExistingFile);
        serve->add_option("--atlas-dir", atlas_dir_, "Base directory for atlas paths in POST /diff");
        serve->add_option("--host", host_, "Bind host (default from NC_ADDR, else 127.0.0.1)");
        serve->add_option("--port", port_, "Bind port (default from NC_ADDR, else 8080)");
        add_decode(serve, f_, true);
        on(serve, [this] { serve_cmd(); });

        auto* fixture = app.add_subcommand("fixture", "Synthetic test checkpoints");
        fixture->require_subcommand(1);
        auto* gen = fixture->add_subcommand("gen", "Write fixture checkpoints");
        gen->add_option("--out", f_.out, "Output directory")->required();
        gen->add_option("--variant", variant_, "base, planted, causal, uniform, or all")
            ->check(CLI::IsMember({"base", "planted", "causal", "uniform", "all"}));
        gen->add_option("--seed", seed_, "Generator seed");
        gen->add_option("--dtype", dtype_, "Tensor storage type")->check(CLI::IsMember({"f32", "f16", "bf16"}));
        on(gen, [this] { fixture_cmd(); });

        auto* bench = app.add_subcommand("bench", "Atlas throughput in neurons per second");
        add_checkpoint(bench, f_);
        bench->add_option("--repeat", repeat_, "Timed runs")->check(CLI::PositiveNumber);
        bench->add_option("--k", f_.k, "Tokens kept per neuron");
        add_batch(bench, f_);
        add_decode(bench, f_, false);
        add_format(bench, f_);
        on(bench, [this] { bench_cmd(); });
    }

    bool data() const { return f_.format == "data"; }

    TokenId resolve_token(const Vocabulary* vocab, const ModelConfig& config) const {
        if (token_id_) {
            if (*token_id_ >= config.vocab_size)
                throw Error(ErrorCode::unknown_token, "token id " + std::to_string(*token_id_) + " is outside the vocabulary");
            return *token_id_;
        }
        if (token_.empty()) throw Error(ErrorCode::invalid_argument, "pass --token or --token-id");
        return lookup_token(*vocab, token_);
    }

    std::optional<Vocabulary> maybe_vocab(const ModelConfig& config, bool needed) const {
        if (!needed && f_.tokenizer.empty() &&
            (f_.checkpoint.empty() || !fs::exists(sibling(f_.checkpoint, "tokenizer.json"))))
            return std::nullopt;
        return open_vocabulary(f_, config);
    }

    template <typename Fn>
    void with_output(Fn&& write) {
        if (f_.out.empty()) {
            write(out_);
            return;
        }
        std::ofstream file(f_.out, std::ios::binary);
        if (!file) throw Error(ErrorCode::io_error, "cannot write " + f_.out);
        write(file);
    }

    void write_svg(const std::function<void(std::ostream&)>& emit) {
        if (svg_.empty()) return;
        std::ofstream file(svg_);
        if (!file) throw Error(ErrorCode::io_error, "cannot write " + svg_);
        emit(file);
    }

    void atlas_build_cmd() {
        if (f_.k < normalization_depth)
            throw Error(ErrorCode::invalid_argument, "--k must be at least 100 for the normalization statistics");
        const auto ckpt = open_checkpoint(f_);
        AtlasOptions opts{f_.k, f_.batch_size, f_.decode.decode()};
        const auto start = Clock::now();
        const Atlas atlas = build_atlas(ckpt, opts);
        const double seconds = std::chrono::duration<double>(Clock::now() - start).count();
        save_atlas(atlas, f_.out);
        const auto n = atlas.records.size();
        if (data()) {
            out_ << "fingerprint " << fingerprint_hex(atlas.fingerprint) << '\n'
                 << "neurons " << n << '\n'
                 << "k " << atlas.k << '\n'
                 << "seconds " << number(seconds) << '\n'
                 << "neurons_per_second " << number(double(n) / seconds) << '\n'
                 << "file_hash " << fingerprint_hex(file_hash(f_.out)) << '\n';
        } else {
            out_ << "wrote " << f_.out << ": " << n << " neurons, top-" << atlas.k << " tokens each\n"
                 << "checkpoint fingerprint " << fingerprint_hex(atlas.fingerprint) << ", atlas file hash "
                 << fingerprint_hex(file_hash(f_.out)) << '\n'
                 << number(seconds, "%.3f") << " s (" << number(double(n) / seconds, "%.0f") << " neurons/s)\n";
        }
    }

    void atlas_export_cmd() {
        const Atlas atlas = load_atlas(f_.atlas);
        with_output([&](std::ostream& os) { export_atlas_text(atlas, os); });
    }

    void find_cmd() {
        const auto ckpt = open_checkpoint(f_);
        const auto vocab = maybe_vocab(ckpt.config, !token_id_);
        const TokenId token = resolve_token(vocab ? &*vocab : nullptr, ckpt.config);
        const auto q = f_.decode.query(f_.batch_size);
        const auto hits = find_feature_neurons(ckpt, token, top_n_, q);
        if (data()) {
            out_ << "# rank layer neuron one_based_layer score probability\n";
            for (std::size_t i = 0; i < hits.size(); ++i) {
                const auto& h = hits[i];
                out_ << i + 1 << ' ' << h.address.layer << ' ' << h.address.neuron << ' ' << h.address.layer + 1 << ' '
                     << number(h.normalized_score, "%.17g") << ' ' << number(h.raw_probability) << '\n';
            }
            return;
        }
        out_ << "token " << token;
        if (vocab) out_ << " " << shown(surface(&*vocab, token));
        out_ << ", mode " << to_string(q.mode) << "\n";
        out_ << std::left << std::setw(6) << "rank" << std::setw(24) << "layer/neuron (0-based)" << std::setw(22)
             << "layer/neuron (1-based)" << std::setw(14) << "score" << "probability\n";
        for (std::size_t i = 0; i < hits.size(); ++i) {
            const auto& h = hits[i];
            out_ << std::setw(6) << i + 1 << std::setw(24)
                 << (std::to_string(h.address.layer) + "/" + std::to_string(h.address.neuron)) << std::setw(22)
                 << (std::to_string(h.address.layer + 1) + "/" + std::to_string(h.address.neuron)) << std::setw(14)
                 << number(h.normalized_score, "%.4g") << number(h.raw_probability, "%.4g") << '\n';
        }
    }

    void heatmap_cmd() {
        const auto ckpt = open_checkpoint(f_);
        const auto vocab = maybe_vocab(ckpt.config, !token_id_);
        const TokenId token = resolve_token(vocab ? &*vocab : nullptr, ckpt.config);
        const auto map = heatmap(ckpt, token, f_.decode.query(f_.batch_size), columns_);
        const std::string surface_bytes = vocab && vocab->contains(token) ? vocab->bytes(token) : std::string();
        with_output([&](std::ostream& os) { write_heatmap_data(map, os, surface_bytes); });
        write_svg([&](std::ostream& os) {
            write_heatmap_svg(map, os, "normalized p(" + surface(vocab ? &*vocab : nullptr, token) + ")");
        });
        if (!f_.out.empty()) {
            const auto peak = map.argmax();
            out_ << "wrote " << f_.out << "; peak at " << describe(peak) << ", score "
                 << number(map.at(peak.layer, peak.neuron), "%.4g") << '\n';
        }
    }

    void profile_cmd() {
        const NeuronAddress addr{layer_index(layer_, f_.one_based), static_cast<std::uint32_t>(neuron_),
                                 parse_matrix_kind(f_.decode.matrix_kind)};
        std::optional<Vocabulary> vocab;
        NeuronProfile p;
        if (!f_.atlas.empty()) {
            const Atlas atlas = load_atlas(f_.atlas);
            if (!f_.tokenizer.empty()) vocab = load_vocabulary(f_.tokenizer, atlas.config.vocab_size);
            p = neuron_profile(atlas, addr, vocab ? &*vocab : nullptr);
        } else {
            if (f_.checkpoint.empty()) throw Error(ErrorCode::invalid_argument, "pass --atlas or --checkpoint");
            const auto ckpt = open_checkpoint(f_);
            vocab = maybe_vocab(ckpt.config, false);
            const auto decoded =
                decode_neuron(ckpt, addr, f_.decode.decode(), std::max(top_n_, normalization_depth));
            p = neuron_profile(decoded.summary, vocab ? &*vocab : nullptr);
        }
        if (data()) {
            out_ << "# layer " << p.address.layer << " neuron " << p.address.neuron << " one_based_layer "
                 << p.address.layer + 1 << " top100_mean " << number(p.top100_mean) << " top100_sum "
                 << number(p.top100_sum) << '\n';
            out_ << "# rank token_id probability surface\n";
            for (std::size_t i = 0; i < p.tokens.size() && i < top_n_; ++i)
                out_ << i + 1 << ' ' << p.tokens[i].token << ' ' << number(p.tokens[i].probability) << ' '
                     << quoted(p.tokens[i].surface) << '\n';
            return;
        }
        out_ << describe(p.address) << "\ntop-100 mean " << number(p.top100_mean, "%.4g") << ", sum "
             << number(p.top100_sum, "%.4g") << '\n';
        for (std::size_t i = 0; i < p.tokens.size() && i < top_n_; ++i)
            out_ << std::setw(4) << i + 1 << "  " << std::setw(8) << p.tokens[i].token << "  " << std::setw(10)
                 << number(p.tokens[i].probability, "%.4g") << "  " << shown(p.tokens[i].surface) << '\n';
    }

    void diff_cmd() {
        std::vector<NeuronAddress> watch;
        for (const auto& w : watch_) watch.push_back(parse_watch(w, f_.one_based));
        StabilityReport report;
        const bool atlases = is_atlas_file(inputs_[0]) && is_atlas_file(inputs_[1]);
        std::optional<Vocabulary> vocab;
        if (atlases) {
            const Atlas a = load_atlas(inputs_[0]);
            const Atlas b = load_atlas(inputs_[1]);
            if (!f_.tokenizer.empty()) vocab = load_vocabulary(f_.tokenizer, a.config.vocab_size);
            report = stability_experiment(a, b, watch);
        } else {
            if (is_atlas_file(inputs_[0]) || is_atlas_file(inputs_[1]))
                throw Error(ErrorCode::invalid_argument, "pass two atlases or two checkpoints, not a mix");
            const auto a = load_checkpoint(inputs_[0]);
            const auto b = load_checkpoint(inputs_[1]);
            if (!f_.tokenizer.empty()) vocab = load_vocabulary(f_.tokenizer, a.config.vocab_size);
            std::optional<fs::path> cache;
            if (!cache_dir_.empty()) cache = cache_dir_;
            report = stability_experiment(a, b, AtlasOptions{f_.k, f_.batch_size, f_.decode.decode()}, watch, cache);
        }
        if (data()) {
            const auto& d = report.diff;
            out_ << "total " << d.total_neurons << "\nmatching " << d.matching_top1 << "\nfraction "
                 << number(d.match_fraction, "%.17g") << '\n';
            for (const auto& l : d.per_layer)
                out_ << "layer " << l.layer << ' ' << l.total << ' ' << l.matching << ' ' << number(l.fraction, "%.17g")
                     << '\n';
            for (const auto& w : report.watchlist)
                out_ << "watch " << w.address.layer << ' ' << w.address.neuron << ' ' << w.before << ' ' << w.after
                     << ' ' << (w.preserved ? "preserved" : "changed") << '\n';
            return;
        }
        write_stability_report(report, out_, vocab ? &*vocab : nullptr);
    }

    void sweep_cmd() {
        const auto ckpt = open_checkpoint(f_);
        const bool need_vocab = prompt_ids_.empty() || !target_id_;
        const auto vocab = maybe_vocab(ckpt.config, need_vocab);
        const NeuronAddress addr{layer_index(layer_, f_.one_based), static_cast<std::uint32_t>(neuron_),
                                 MatrixKind::up};
        const std::vector<float> values = values_.empty() ? sweep_grid(low_, high_, points_) : parse_floats(values_);

        std::vector<TokenId> ids;
        if (!prompt_ids_.empty()) ids = parse_ids(prompt_ids_);
        else if (!prompt_.empty()) ids = encode_text(*vocab, prompt_, SpecialTokens::parse);
        else throw Error(ErrorCode::invalid_argument, "pass --prompt or --prompt-ids");

        TokenId target = 0;
        if (target_id_) target = *target_id_;
        else if (!target_.empty()) target = lookup_token(*vocab, target_);
        else throw Error(ErrorCode::invalid_argument, "pass --target or --target-id");

        const auto result = clamp_sweep(ckpt, ids, addr, values, target, prompt_);
        with_output([&](std::ostream& os) { write_sweep_data(result, os); });
        write_svg([&](std::ostream& os) {
            write_sweep_svg(result, os,
                            "p(" + surface(vocab ? &*vocab : nullptr, target) + ") clamping " + describe(addr));
        });
    }

    void chat_cmd() {
        const auto ckpt = open_checkpoint(f_);
        const auto vocab = open_vocabulary(f_, ckpt.config);
        const fs::path tmpl_path = template_.empty() ? sibling(f_.checkpoint, "chat_template.json") : fs::path(template_);
        if (!fs::exists(tmpl_path))
            throw Error(ErrorCode::io_error, "chat template not found at " + tmpl_path.string() + "; pass --template");
        const auto tmpl = load_chat_template(tmpl_path);
        std::optional<ClampSpec> clamp;
        if (clamp_value_)
            clamp = ClampSpec{{layer_index(layer_, f_.one_based), static_cast<std::uint32_t>(neuron_), MatrixKind::up},
                              *clamp_value_,
                              {}};
        gen_.sampling = parse_sampling(sampling_);
        const auto set = clamped_chat(ckpt, vocab, tmpl, question_, clamp, samples_, gen_);
        with_output([&](std::ostream& os) { write_chat_transcripts(set, os); });
    }

    void serve_cmd() {
        ServiceResources r;
        auto ckpt = std::make_shared<const ModelCheckpoint>(open_checkpoint(f_));
        r.checkpoint = ckpt;
        if (auto vocab = maybe_vocab(ckpt->config, false)) r.vocab = std::make_shared<const Vocabulary>(std::move(*vocab));
        const fs::path tmpl_path = template_.empty() ? sibling(f_.checkpoint, "chat_template.json") : fs::path(template_);
        if (fs::exists(tmpl_path)) r.chat_template = load_chat_template(tmpl_path);
        if (!f_.atlas.empty()) {
            r.atlas = std::make_shared<const Atlas>(load_atlas(f_.atlas));
            if (r.atlas->fingerprint != ckpt->fingerprint)
                throw Error(ErrorCode::incompatible, "atlas " + f_.atlas + " was built from a different checkpoint");
        }
        if (!atlas_dir_.empty()) r.atlas_dir = atlas_dir_;
        r.query = f_.decode.query(f_.batch_size);
        r.model_name = fs::path(f_.checkpoint).filename().string();

        BindAddress addr = default_bind_address();
        if (!host_.empty()) addr.host = host_;
        if (port_) addr.port = *port_;
        Service service(std::move(r));
        const int port = service.bind(addr.host, addr.port);
        out_ << "listening on http://" << addr.host << ':' << port << std::endl;
        service.listen();
    }

    void fixture_cmd() {
        const DType dtype = dtype_ == "f16" ? DType::f16 : dtype_ == "bf16" ? DType::bf16 : DType::f32;
        std::vector<FixtureVariant> variants;
        if (variant_ == "all")
            variants = {FixtureVariant::base, FixtureVariant::planted, FixtureVariant::causal, FixtureVariant::uniform};
        else
            variants = {parse_fixture_variant(variant_)};
        for (const auto v : variants) {
            FixtureSpec spec;
            spec.variant = v;
            spec.seed = seed_;
            const Fixture fixture = make_fixture(spec);
            const fs::path dir = variant_ == "all" ? fs::path(f_.out) / std::string(to_string(v)) : fs::path(f_.out);
            write_fixture(fixture, spec, dir, dtype);
            out_ << "wrote " << dir.string() << " (" << to_string(v) << ", fingerprint "
                 << fingerprint_hex(fixture.checkpoint.fingerprint) << ")";
            if (v == FixtureVariant::planted || v == FixtureVariant::causal)
                out_ << ": " << describe(fixture.neuron) << ", token " << fixture.token;
            out_ << '\n';
        }
    }

    void bench_cmd() {
        const auto ckpt = open_checkpoint(f_);
        const AtlasOptions opts{f_.k, f_.batch_size, f_.decode.decode()};
        std::vector<double> runs;
        for (std::size_t i = 0; i < repeat_; ++i) {
            const auto start = Clock::now();
            const Atlas atlas = build_atlas(ckpt, opts);
            runs.push_back(std::chrono::duration<double>(Clock::now() - start).count());
        }
        std::sort(runs.begin(), runs.end());
        const double median = runs[runs.size() / 2];
        const double n = double(ckpt.config.neuron_count());
        if (data()) {
            out_ << "neurons " << ckpt.config.neuron_count() << "\nthreads " << worker_threads() << "\nbatch_size "
                 << f_.batch_size << "\nmedian_seconds " << number(median) << "\nneurons_per_second "
                 << number(n / median) << '\n';
        } else {
            out_ << ckpt.config.neuron_count() << " neurons, " << worker_threads() << " threads, batch "
                 << f_.batch_size << ": median " << number(median, "%.4f") << " s over " << runs.size() << " runs, "
                 << number(n / median, "%.0f") << " neurons/s\n";
        }
    }
};

} // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
    return Runner(out, err).run(argc, argv);
}

} // namespace ncatlas::cli
