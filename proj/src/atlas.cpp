#include "ncatlas/atlas.hpp"

#include "ncatlas/error.hpp"
#include "ncatlas/parallel.hpp"

#include <bit>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <ostream>

namespace ncatlas {

namespace {

using nlohmann::json;

constexpr char magic[8] = {'N', 'C', 'A', 'T', 'L', 'A', 'S', '1'};

std::size_t record_bytes(std::size_t k) { return 8 + 8 * k + 8; }

void put_u32(unsigned char* p, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) p[i] = static_cast<unsigned char>(v >> (8 * i));
}

std::uint32_t get_u32(const unsigned char* p) {
    return std::uint32_t(p[0]) | (std::uint32_t(p[1]) << 8) | (std::uint32_t(p[2]) << 16) | (std::uint32_t(p[3]) << 24);
}

std::uint64_t parse_hex64(const std::string& text) {
    try {
        std::size_t used = 0;
        const auto v = std::stoull(text, &used, 16);
        if (used != text.size()) throw std::invalid_argument("trailing");
        return v;
    } catch (const std::exception&) {
        throw Error(ErrorCode::parse_error, "malformed fingerprint '" + text + "' in atlas header");
    }
}

} // namespace

const DecodedNeuron& Atlas::record(const NeuronAddress& address) const {
    if (address.layer >= config.n_layers || address.neuron >= config.d_ff)
        throw Error(ErrorCode::not_found, "atlas has no record for " + describe(address));
    return records[std::size_t(address.layer) * config.d_ff + address.neuron];
}

Atlas build_atlas(const ModelCheckpoint& ckpt, const AtlasOptions& options) {
    if (options.k < normalization_depth)
        throw Error(ErrorCode::invalid_argument,
                    "k must be >= 100 so top-100 statistics can be stored (got " + std::to_string(options.k) + ")");
    if (options.k > ckpt.config.vocab_size)
        throw Error(ErrorCode::invalid_argument, "k = " + std::to_string(options.k) + " exceeds vocab size " +
                                                     std::to_string(ckpt.config.vocab_size));
    Atlas atlas;
    atlas.fingerprint = ckpt.fingerprint;
    atlas.config = ckpt.config;
    atlas.k = options.k;
    atlas.options = options.decode;
    atlas.records.resize(ckpt.config.neuron_count());
    stream_decode(ckpt, options.decode, options.batch_size, [&](std::size_t first, Matrix& probs) {
        parallel_for(probs.rows(), 4, [&](std::size_t begin, std::size_t end) {
            for (std::size_t i = begin; i < end; ++i) {
                atlas.records[first + i] = summarize_probabilities(
                    address_of(ckpt.config, first + i, options.decode.matrix_kind), probs.row(i), options.k);
            }
        });
    });
    return atlas;
}

json atlas_header_json(const Atlas& atlas) {
    return {
        {"format", "ncatlas-atlas"},
        {"version", 1},
        {"fingerprint", fingerprint_hex(atlas.fingerprint)},
        {"config", config_to_json(atlas.config)},
        {"k", atlas.k},
        {"apply_final_norm", atlas.options.apply_final_norm},
        {"matrix_kind", std::string(to_string(atlas.options.matrix_kind))},
        {"accumulation", atlas.options.accumulation == Accumulation::f64 ? "f64" : "f32"},
        {"records", atlas.records.size()},
    };
}

void save_atlas(const Atlas& atlas, const std::filesystem::path& path) {
    const std::string header = atlas_header_json(atlas).dump();
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ErrorCode::io_error, "cannot write atlas file " + path.string());
    out.write(magic, 8);
    unsigned char len[8];
    const std::uint64_t n = header.size();
    for (int i = 0; i < 8; ++i) len[i] = static_cast<unsigned char>(n >> (8 * i));
    out.write(reinterpret_cast<const char*>(len), 8);
    out.write(header.data(), static_cast<std::streamsize>(header.size()));

    std::vector<unsigned char> buf(record_bytes(atlas.k));
    for (const auto& r : atlas.records) {
        if (r.top_tokens.size() != atlas.k)
            throw Error(ErrorCode::invalid_argument, "atlas record has the wrong number of top tokens");
        unsigned char* p = buf.data();
        put_u32(p, r.address.layer);
        put_u32(p + 4, r.address.neuron);
        p += 8;
        for (const auto& t : r.top_tokens) {
            put_u32(p, t.index);
            put_u32(p + 4, std::bit_cast<std::uint32_t>(t.value));
            p += 8;
        }
        put_u32(p, std::bit_cast<std::uint32_t>(r.top100_mean));
        put_u32(p + 4, std::bit_cast<std::uint32_t>(r.top100_sum));
        out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    }
    if (!out) throw Error(ErrorCode::io_error, "failed writing atlas file " + path.string());
}

Atlas load_atlas(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(ErrorCode::io_error, "cannot open atlas file " + path.string());
    char head[8];
    if (!in.read(head, 8) || std::memcmp(head, magic, 8) != 0)
        throw Error(ErrorCode::parse_error, path.string() + " is not an atlas file (bad magic)");
    unsigned char len_bytes[8];
    if (!in.read(reinterpret_cast<char*>(len_bytes), 8)) throw Error(ErrorCode::parse_error, "truncated atlas header");
    std::uint64_t len = 0;
    for (int i = 7; i >= 0; --i) len = (len << 8) | len_bytes[i];
    if (len > (1u << 24)) throw Error(ErrorCode::parse_error, "atlas header length is implausible");
    std::string text(len, '\0');
    if (!in.read(text.data(), static_cast<std::streamsize>(len))) throw Error(ErrorCode::parse_error, "truncated atlas header");

    Atlas atlas;
    std::size_t count = 0;
    try {
        const json h = json::parse(text);
        if (h.at("format") != "ncatlas-atlas" || h.at("version") != 1)
            throw Error(ErrorCode::parse_error, "unsupported atlas format/version");
        atlas.fingerprint = parse_hex64(h.at("fingerprint").get<std::string>());
        atlas.config = config_from_json(h.at("config"));
        atlas.k = h.at("k").get<std::size_t>();
        atlas.options.apply_final_norm = h.at("apply_final_norm").get<bool>();
        atlas.options.matrix_kind = parse_matrix_kind(h.at("matrix_kind").get<std::string>());
        atlas.options.accumulation = h.value("accumulation", std::string("f32")) == "f64" ? Accumulation::f64 : Accumulation::f32;
        count = h.at("records").get<std::size_t>();
    } catch (const json::exception& e) {
        throw Error(ErrorCode::parse_error, std::string("malformed atlas header: ") + e.what());
    }
    if (count != atlas.config.neuron_count())
        throw Error(ErrorCode::parse_error, "atlas record count does not equal n_layers * d_ff");

    atlas.records.resize(count);
    std::vector<unsigned char> buf(record_bytes(atlas.k));
    for (std::size_t r = 0; r < count; ++r) {
        if (!in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size())))
            throw Error(ErrorCode::parse_error, "atlas file is truncated at record " + std::to_string(r));
        const unsigned char* p = buf.data();
        auto& rec = atlas.records[r];
        rec.address = {get_u32(p), get_u32(p + 4), atlas.options.matrix_kind};
        p += 8;
        rec.top_tokens.resize(atlas.k);
        for (auto& t : rec.top_tokens) {
            t.index = get_u32(p);
            t.value = std::bit_cast<float>(get_u32(p + 4));
            p += 8;
        }
        rec.top100_mean = std::bit_cast<float>(get_u32(p));
        rec.top100_sum = std::bit_cast<float>(get_u32(p + 4));
        if (rec.address.layer * atlas.config.d_ff + rec.address.neuron != r)
            throw Error(ErrorCode::parse_error, "atlas record " + std::to_string(r) + " is out of order");
    }
    if (in.peek() != std::char_traits<char>::eof()) throw Error(ErrorCode::parse_error, "atlas file has trailing bytes");
    return atlas;
}

void export_atlas_text(const Atlas& atlas, std::ostream& out) {
    out << "# " << atlas_header_json(atlas).dump() << '\n';
    char buf[64];
    for (const auto& r : atlas.records) {
        out << r.address.layer << ' ' << r.address.neuron;
        std::snprintf(buf, sizeof buf, " %.9g %.9g", double(r.top100_mean), double(r.top100_sum));
        out << buf;
        for (const auto& t : r.top_tokens) {
            std::snprintf(buf, sizeof buf, " %u:%.9g", t.index, double(t.value));
            out << buf;
        }
        out << '\n';
    }
}

} // namespace ncatlas
