#include "ncatlas/numerics.hpp"

#include "ncatlas/error.hpp"
#include "ncatlas/parallel.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <string>

namespace ncatlas {

Matrix::Matrix(std::size_t rows, std::size_t cols, float fill)
    : rows_(rows), cols_(cols), values_(rows * cols, fill) {
    if (rows == 0 || cols == 0) throw Error(ErrorCode::invalid_argument, "matrix dimensions must be positive");
}

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<float> values)
    : rows_(rows), cols_(cols), values_(std::move(values)) {
    if (rows == 0 || cols == 0) throw Error(ErrorCode::invalid_argument, "matrix dimensions must be positive");
    if (values_.size() != rows * cols)
        throw Error(ErrorCode::dimension_mismatch,
                    "matrix storage has " + std::to_string(values_.size()) + " values, expected " +
                        std::to_string(rows * cols));
}

MatrixView::MatrixView(std::span<const float> v, std::size_t r, std::size_t c) : values(v), rows(r), cols(c) {
    if (v.size() != r * c) throw Error(ErrorCode::dimension_mismatch, "matrix view size does not match its shape");
}

float dot(std::span<const float> a, std::span<const float> b) {
    const std::size_t n = a.size();
    float acc[8] = {0, 0, 0, 0, 0, 0, 0, 0};
    std::size_t i = 0;
    for (; i + 8 <= n; i += 8) {
        for (std::size_t l = 0; l < 8; ++l) acc[l] += a[i + l] * b[i + l];
    }
    for (std::size_t l = 0; i < n; ++i, ++l) acc[l] += a[i] * b[i];
    return ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]));
}

double dot_f64(std::span<const float> a, std::span<const float> b) {
    const std::size_t n = a.size();
    double acc[4] = {0, 0, 0, 0};
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        for (std::size_t l = 0; l < 4; ++l) acc[l] += double(a[i + l]) * double(b[i + l]);
    }
    for (std::size_t l = 0; i < n; ++i, ++l) acc[l] += double(a[i]) * double(b[i]);
    return (acc[0] + acc[2]) + (acc[1] + acc[3]);
}

void matmul_into(MatrixView a, MatrixView bt, std::span<float> out, const KernelOptions& options) {
    if (a.cols != bt.cols)
        throw Error(ErrorCode::dimension_mismatch, "matmul inner dimensions disagree: " + std::to_string(a.cols) +
                                                       " vs " + std::to_string(bt.cols));
    const std::size_t m = a.rows;
    const std::size_t n = bt.rows;
    if (out.size() != m * n) throw Error(ErrorCode::dimension_mismatch, "matmul output has the wrong size");

    constexpr std::size_t block = 16;
    const std::size_t blocks = (n + block - 1) / block;
    // Aim for a few hundred thousand multiply-adds per chunk before splitting.
    const std::size_t work_per_block = std::max<std::size_t>(1, m * a.cols * block);
    const std::size_t min_chunk = std::max<std::size_t>(1, (1u << 18) / work_per_block);
    const bool wide = options.accumulation == Accumulation::f64;

    parallel_for(blocks, min_chunk, [&](std::size_t begin, std::size_t end) {
        for (std::size_t jb = begin; jb < end; ++jb) {
            const std::size_t j0 = jb * block;
            const std::size_t j1 = std::min(n, j0 + block);
            for (std::size_t i = 0; i < m; ++i) {
                const auto ar = a.row(i);
                float* orow = out.data() + i * n;
                for (std::size_t j = j0; j < j1; ++j) {
                    orow[j] = wide ? static_cast<float>(dot_f64(ar, bt.row(j))) : dot(ar, bt.row(j));
                }
            }
        }
    });
}

Matrix matmul(MatrixView a, MatrixView bt, const KernelOptions& options) {
    if (a.cols != bt.cols)
        throw Error(ErrorCode::dimension_mismatch, "matmul inner dimensions disagree: " + std::to_string(a.cols) +
                                                       " vs " + std::to_string(bt.cols));
    Matrix out(a.rows, bt.rows);
    matmul_into(a, bt, out.values(), options);
    return out;
}

void softmax_inplace(std::span<float> row) {
    if (row.empty()) return;
    const float peak = *std::max_element(row.begin(), row.end());
    double total = 0.0;
    for (float& x : row) {
        x = std::exp(x - peak);
        total += x;
    }
    for (float& x : row) x = static_cast<float>(double(x) / total);
}

void softmax_rows_inplace(Matrix& logits) {
    parallel_for(logits.rows(), 16, [&](std::size_t begin, std::size_t end) {
        for (std::size_t r = begin; r < end; ++r) softmax_inplace(logits.row(r));
    });
}

Matrix softmax_rows(const Matrix& logits) {
    Matrix out = logits;
    softmax_rows_inplace(out);
    return out;
}

std::vector<ScoredIndex> top_k(std::span<const float> row, std::size_t k) {
    if (k > row.size())
        throw Error(ErrorCode::invalid_argument,
                    "top-k of " + std::to_string(k) + " exceeds row width " + std::to_string(row.size()));
    std::vector<TokenId> order(row.size());
    std::iota(order.begin(), order.end(), TokenId{0});
    auto before = [&](TokenId x, TokenId y) { return row[x] > row[y] || (row[x] == row[y] && x < y); };
    if (k < order.size()) {
        std::nth_element(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(), before);
    }
    std::sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), before);
    std::vector<ScoredIndex> out(k);
    for (std::size_t i = 0; i < k; ++i) out[i] = {order[i], row[order[i]]};
    return out;
}

std::vector<std::vector<ScoredIndex>> top_k_rows(const Matrix& m, std::size_t k) {
    if (k > m.cols())
        throw Error(ErrorCode::invalid_argument,
                    "top-k of " + std::to_string(k) + " exceeds row width " + std::to_string(m.cols()));
    std::vector<std::vector<ScoredIndex>> out(m.rows());
    parallel_for(m.rows(), 8, [&](std::size_t begin, std::size_t end) {
        for (std::size_t r = begin; r < end; ++r) out[r] = top_k(m.row(r), k);
    });
    return out;
}

void rms_norm_into(std::span<const float> x, std::span<const float> gamma, float eps, std::span<float> out) {
    if (x.size() != gamma.size() || out.size() != x.size())
        throw Error(ErrorCode::dimension_mismatch, "rms_norm length mismatch: x " + std::to_string(x.size()) +
                                                       ", gamma " + std::to_string(gamma.size()));
    if (x.empty()) return;
    double squares = 0.0;
    for (float v : x) squares += double(v) * double(v);
    const double inv = 1.0 / std::sqrt(squares / double(x.size()) + double(eps));
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = static_cast<float>(double(gamma[i]) * (double(x[i]) * inv));
}

Vector rms_norm(std::span<const float> x, std::span<const float> gamma, float eps) {
    Vector out(x.size());
    rms_norm_into(x, gamma, eps, out);
    return out;
}

float silu(float x) { return x / (1.0f + std::exp(-x)); }

std::vector<double> rope_frequencies(std::size_t head_dim, double theta, const RopeScaling* scaling) {
    if (head_dim == 0 || head_dim % 2 != 0)
        throw Error(ErrorCode::invalid_argument, "rotary embedding needs an even head dimension, got " +
                                                     std::to_string(head_dim));
    const std::size_t half = head_dim / 2;
    std::vector<double> freq(half);
    for (std::size_t i = 0; i < half; ++i) {
        freq[i] = 1.0 / std::pow(theta, double(2 * i) / double(head_dim));
    }
    if (scaling) {
        const double low_wavelen = scaling->original_max_position / scaling->low_freq_factor;
        const double high_wavelen = scaling->original_max_position / scaling->high_freq_factor;
        for (double& f : freq) {
            const double wavelen = 2.0 * std::numbers::pi / f;
            if (wavelen < high_wavelen) continue;
            if (wavelen > low_wavelen) {
                f /= scaling->factor;
                continue;
            }
            const double smooth = (scaling->original_max_position / wavelen - scaling->low_freq_factor) /
                                  (scaling->high_freq_factor - scaling->low_freq_factor);
            f = (1.0 - smooth) * f / scaling->factor + smooth * f;
        }
    }
    return freq;
}

void rope_apply(std::span<float> head, std::size_t position, std::span<const double> frequencies) {
    if (head.size() % 2 != 0)
        throw Error(ErrorCode::invalid_argument, "rotary embedding needs an even head dimension, got " +
                                                     std::to_string(head.size()));
    const std::size_t half = head.size() / 2;
    if (frequencies.size() != half) throw Error(ErrorCode::dimension_mismatch, "rotary frequency table size mismatch");
    for (std::size_t i = 0; i < half; ++i) {
        const double angle = double(position) * frequencies[i];
        const double c = std::cos(angle);
        const double s = std::sin(angle);
        const double x0 = head[i];
        const double x1 = head[i + half];
        head[i] = static_cast<float>(x0 * c - x1 * s);
        head[i + half] = static_cast<float>(x0 * s + x1 * c);
    }
}

void rope_apply(std::span<float> head, std::size_t position, double theta) {
    const auto freq = rope_frequencies(head.size(), theta);
    rope_apply(head, position, freq);
}

} // namespace ncatlas
