#pragma once

// Independent reference implementations used as test oracles. Everything
// here is written from the model definition with plain loops in double
// precision; nothing calls back into the library's numeric kernels.

#include "ncatlas/checkpoint.hpp"
#include "ncatlas/engine.hpp"

#include <filesystem>
#include <random>
#include <string>
#include <vector>

namespace ncatlas::testing {

// Unique directory under the system temp dir, removed on destruction.
class TempDir {
public:
    TempDir();
    ~TempDir();
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;
    const std::filesystem::path& path() const { return path_; }
    std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

private:
    std::filesystem::path path_;
};

// softmax(lm_head . w) for one neuron's weight vector, optionally after the final RMSNorm.
std::vector<double> naive_decode(const ModelCheckpoint& ckpt, const NeuronAddress& address, bool apply_final_norm);

std::vector<double> naive_softmax(const std::vector<double>& logits);

// Full recompute of the last-position logits with no caching.
std::vector<double> reference_logits(const ModelCheckpoint& ckpt, const std::vector<TokenId>& tokens,
                                     const std::vector<ClampSpec>& clamps = {});

// Up-projection output of `address` at every position (unclamped).
std::vector<double> reference_up_trace(const ModelCheckpoint& ckpt, const std::vector<TokenId>& tokens,
                                       const NeuronAddress& address);

std::vector<TokenId> random_prompt(std::mt19937_64& rng, std::size_t vocab, std::size_t min_len, std::size_t max_len);

// Exact bitwise comparison of float sequences (distinguishes -0.0 and NaN payloads).
bool bitwise_equal(std::span<const float> a, std::span<const float> b);

std::string read_file(const std::filesystem::path& path);

} // namespace ncatlas::testing
