#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <utility>
#include <vector>

namespace ncatlas {

using TokenId = std::uint32_t;
using Vector = std::vector<float>;

// Dense row-major float32 matrix.
class Matrix {
public:
    Matrix() = default;
    Matrix(std::size_t rows, std::size_t cols, float fill = 0.0f);
    Matrix(std::size_t rows, std::size_t cols, std::vector<float> values);

    std::size_t rows() const noexcept { return rows_; }
    std::size_t cols() const noexcept { return cols_; }
    std::size_t size() const noexcept { return values_.size(); }
    bool empty() const noexcept { return values_.empty(); }

    float& operator()(std::size_t r, std::size_t c) { return values_[r * cols_ + c]; }
    float operator()(std::size_t r, std::size_t c) const { return values_[r * cols_ + c]; }

    std::span<float> row(std::size_t r) { return {values_.data() + r * cols_, cols_}; }
    std::span<const float> row(std::size_t r) const { return {values_.data() + r * cols_, cols_}; }

    std::span<float> values() noexcept { return values_; }
    std::span<const float> values() const noexcept { return values_; }

    bool operator==(const Matrix&) const = default;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<float> values_;
};

// Non-owning read-only view with the same layout as Matrix.
struct MatrixView {
    std::span<const float> values;
    std::size_t rows = 0;
    std::size_t cols = 0;

    MatrixView() = default;
    MatrixView(std::span<const float> v, std::size_t r, std::size_t c);
    MatrixView(const Matrix& m) : values(m.values()), rows(m.rows()), cols(m.cols()) {}  // NOLINT

    std::span<const float> row(std::size_t r) const { return values.subspan(r * cols, cols); }
};

enum class Accumulation { f32, f64 };

struct KernelOptions {
    Accumulation accumulation = Accumulation::f32;
};

// Fixed-order dot product (eight interleaved partial sums, combined pairwise).
// The order depends only on the length, never on the caller.
float dot(std::span<const float> a, std::span<const float> b);
double dot_f64(std::span<const float> a, std::span<const float> b);

// C[i][j] = sum_d A[i][d] * Bt[j][d]. Parallel over column blocks of C.
Matrix matmul(MatrixView a, MatrixView b_transposed, const KernelOptions& options = {});
void matmul_into(MatrixView a, MatrixView b_transposed, std::span<float> out,
                 const KernelOptions& options = {});

void softmax_inplace(std::span<float> row);
Matrix softmax_rows(const Matrix& logits);
void softmax_rows_inplace(Matrix& logits);

struct ScoredIndex {
    TokenId index = 0;
    float value = 0.0f;
    bool operator==(const ScoredIndex&) const = default;
};

// Highest k entries, descending by value, ties by lower index.
std::vector<ScoredIndex> top_k(std::span<const float> row, std::size_t k);
std::vector<std::vector<ScoredIndex>> top_k_rows(const Matrix& m, std::size_t k);

Vector rms_norm(std::span<const float> x, std::span<const float> gamma, float eps);
void rms_norm_into(std::span<const float> x, std::span<const float> gamma, float eps, std::span<float> out);

float silu(float x);

// Llama-3 style low-frequency rescaling of rotary frequencies.
struct RopeScaling {
    double factor = 8.0;
    double low_freq_factor = 1.0;
    double high_freq_factor = 4.0;
    double original_max_position = 8192.0;
    bool operator==(const RopeScaling&) const = default;
};

// Inverse frequencies for one head, length head_dim / 2.
std::vector<double> rope_frequencies(std::size_t head_dim, double theta, const RopeScaling* scaling = nullptr);

// Rotates pairs (x[i], x[i + head_dim/2]) by position * freq[i].
void rope_apply(std::span<float> head, std::size_t position, std::span<const double> frequencies);
void rope_apply(std::span<float> head, std::size_t position, double theta);

} // namespace ncatlas
