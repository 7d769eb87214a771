#pragma once

#include "ncatlas/config.hpp"
#include "ncatlas/decoder.hpp"

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <vector>

namespace ncatlas {

class Vocabulary;

// Per-neuron top-k decode of one checkpoint.
struct Atlas {
    std::uint64_t fingerprint = 0;
    ModelConfig config;
    std::size_t k = normalization_depth;
    DecodeOptions options;
    std::vector<DecodedNeuron> records;  // flat (layer, neuron) order

    const DecodedNeuron& record(const NeuronAddress& address) const;
    bool operator==(const Atlas&) const = default;
};

struct AtlasOptions {
    std::size_t k = normalization_depth;
    std::size_t batch_size = 512;
    DecodeOptions decode;
};

Atlas build_atlas(const ModelCheckpoint& ckpt, const AtlasOptions& options = {});

// Binary layout: "NCATLAS1", u64 header length, JSON header, then records of
// u32 layer, u32 neuron, k x (u32 token, f32 probability), f32 mean, f32 sum.
// All integers and floats little-endian.
void save_atlas(const Atlas& atlas, const std::filesystem::path& path);
Atlas load_atlas(const std::filesystem::path& path);

// One line per record: layer neuron top100_mean top100_sum id:prob ...
void export_atlas_text(const Atlas& atlas, std::ostream& out);

nlohmann::json atlas_header_json(const Atlas& atlas);

} // namespace ncatlas
