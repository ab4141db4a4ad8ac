// SPDX-License-Identifier: Apache-2.0
#include "evl/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <vector>

namespace evl::kernels {

namespace {

// Below this much work per call the fork/join costs more than it saves.
constexpr std::size_t kParallelWork = 1 << 15;

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;

inline double a_at(const GemmShape& s, const double* a, std::size_t i, std::size_t p) {
    return s.trans_a ? a[p * s.m + i] : a[i * s.k + p];
}

inline double b_at(const GemmShape& s, const double* b, std::size_t p, std::size_t j) {
    return s.trans_b ? b[j * s.k + p] : b[p * s.n + j];
}

// R rows starting at i0, b not transposed. Each output element starts from c
// (or zero) and adds a[i][p] * b[p][j] for p ascending; the register tile only
// changes which elements are in flight together, never the order of the sum.
// Four doubles per register; with -ffp-contract=off each lane does a separate
// multiply and add, exactly like the scalar loop.
typedef double Vec4 __attribute__((vector_size(32)));

template <std::size_t R, bool TransA>
void gemm_tile(const GemmShape& s, const double* a, const double* b, double* c, std::size_t i0, bool accumulate) {
    constexpr std::size_t kNr = 8;
    auto a_elem = [&](std::size_t i, std::size_t p) { return TransA ? a[p * s.m + i] : a[i * s.k + p]; };
    std::size_t j = 0;
    for (; j + kNr <= s.n; j += kNr) {
        Vec4 acc[R][2];
        for (std::size_t r = 0; r < R; ++r) {
            for (std::size_t h = 0; h < 2; ++h) {
                acc[r][h] = Vec4{};
                if (accumulate) std::memcpy(&acc[r][h], c + (i0 + r) * s.n + j + 4 * h, sizeof(Vec4));
            }
        }
        for (std::size_t p = 0; p < s.k; ++p) {
            Vec4 b0, b1;
            std::memcpy(&b0, b + p * s.n + j, sizeof(Vec4));
            std::memcpy(&b1, b + p * s.n + j + 4, sizeof(Vec4));
            for (std::size_t r = 0; r < R; ++r) {
                const double av = a_elem(i0 + r, p);
                acc[r][0] += av * b0;
                acc[r][1] += av * b1;
            }
        }
        for (std::size_t r = 0; r < R; ++r)
            for (std::size_t h = 0; h < 2; ++h) std::memcpy(c + (i0 + r) * s.n + j + 4 * h, &acc[r][h], sizeof(Vec4));
    }
    for (; j < s.n; ++j) {
        for (std::size_t r = 0; r < R; ++r) {
            double acc = accumulate ? c[(i0 + r) * s.n + j] : 0.0;
            for (std::size_t p = 0; p < s.k; ++p) acc += a_elem(i0 + r, p) * b[p * s.n + j];
            c[(i0 + r) * s.n + j] = acc;
        }
    }
}

void softmax_row(const double* x, double* y, std::size_t n) {
    double mx = x[0];
    for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, x[j]);
    double total = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
        y[j] = std::exp(x[j] - mx);
        total += y[j];
    }
    const double inv = 1.0 / total;
    for (std::size_t j = 0; j < n; ++j) y[j] *= inv;
}

void softmax_backward_row(const double* y, const double* gy, double* gx, std::size_t n) {
    double dot = 0.0;
    for (std::size_t j = 0; j < n; ++j) dot += gy[j] * y[j];
    for (std::size_t j = 0; j < n; ++j) gx[j] += y[j] * (gy[j] - dot);
}

void layer_norm_row(const double* x, const double* gain, const double* bias, double eps, double* y, double* xhat,
                    double* rstd, std::size_t n) {
    double mean = 0.0;
    for (std::size_t j = 0; j < n; ++j) mean += x[j];
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
        const double d = x[j] - mean;
        var += d * d;
    }
    var /= static_cast<double>(n);
    const double r = 1.0 / std::sqrt(var + eps);
    *rstd = r;
    for (std::size_t j = 0; j < n; ++j) {
        xhat[j] = (x[j] - mean) * r;
        y[j] = xhat[j] * gain[j] + bias[j];
    }
}

}  // namespace

double gelu_scalar(double x) { return 0.5 * x * (1.0 + std::tanh(kGeluC * (x + kGeluA * x * x * x))); }

double gelu_derivative(double x) {
    const double u = kGeluC * (x + kGeluA * x * x * x);
    const double t = std::tanh(u);
    const double du = kGeluC * (1.0 + 3.0 * kGeluA * x * x);
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
}

void gemm(const GemmShape& s, const double* a, const double* b, double* c, bool accumulate) {
    if (s.trans_b) {
        // Transposing b once lets every row use the vectorizable axpy loop;
        // each output element still sums over p in ascending order.
        const std::size_t entries = s.stride_b == 0 ? 1 : s.batch;
        std::vector<double> bt(entries * s.k * s.n);
        for (std::size_t e = 0; e < entries; ++e) {
            const double* src = b + e * s.stride_b;
            double* dst = bt.data() + e * s.k * s.n;
            for (std::size_t j = 0; j < s.n; ++j)
                for (std::size_t p = 0; p < s.k; ++p) dst[p * s.n + j] = src[j * s.k + p];
        }
        GemmShape plain = s;
        plain.trans_b = false;
        plain.stride_b = s.stride_b == 0 ? 0 : s.k * s.n;
        gemm(plain, a, bt.data(), c, accumulate);
        return;
    }
    constexpr std::size_t kMr = 4;
    const std::size_t tiles_per_entry = (s.m + kMr - 1) / kMr;
    const auto tiles = static_cast<long>(s.batch * tiles_per_entry);
    const bool par = s.batch * s.m * s.n * s.k >= kParallelWork;
#pragma omp parallel for schedule(static) if (par)
    for (long t = 0; t < tiles; ++t) {
        const auto bi = static_cast<std::size_t>(t) / tiles_per_entry;
        const auto i0 = (static_cast<std::size_t>(t) % tiles_per_entry) * kMr;
        const double* ab = a + bi * s.stride_a;
        const double* bb = b + bi * s.stride_b;
        double* cb = c + bi * s.stride_c;
        if (i0 + kMr <= s.m) {
            if (s.trans_a) gemm_tile<kMr, true>(s, ab, bb, cb, i0, accumulate);
            else gemm_tile<kMr, false>(s, ab, bb, cb, i0, accumulate);
        } else {
            for (std::size_t i = i0; i < s.m; ++i) {
                if (s.trans_a) gemm_tile<1, true>(s, ab, bb, cb, i, accumulate);
                else gemm_tile<1, false>(s, ab, bb, cb, i, accumulate);
            }
        }
    }
}

void softmax_rows(const double* x, double* y, std::size_t rows, std::size_t n) {
    const bool par = rows * n >= kParallelWork;
#pragma omp parallel for schedule(static) if (par)
    for (long r = 0; r < static_cast<long>(rows); ++r) softmax_row(x + r * n, y + r * n, n);
}

void softmax_rows_backward(const double* y, const double* gy, double* gx, std::size_t rows, std::size_t n) {
    const bool par = rows * n >= kParallelWork;
#pragma omp parallel for schedule(static) if (par)
    for (long r = 0; r < static_cast<long>(rows); ++r) softmax_backward_row(y + r * n, gy + r * n, gx + r * n, n);
}

void layer_norm_rows(const double* x, const double* gain, const double* bias, double eps, double* y, double* xhat,
                     double* rstd, std::size_t rows, std::size_t n) {
    const bool par = rows * n >= kParallelWork;
#pragma omp parallel for schedule(static) if (par)
    for (long r = 0; r < static_cast<long>(rows); ++r) {
        layer_norm_row(x + r * n, gain, bias, eps, y + r * n, xhat + r * n, rstd + r, n);
    }
}

void gelu(const double* x, double* y, std::size_t count) {
    const bool par = count >= kParallelWork;
#pragma omp parallel for schedule(static) if (par)
    for (long i = 0; i < static_cast<long>(count); ++i) y[i] = gelu_scalar(x[i]);
}

void gelu_backward(const double* x, const double* gy, double* gx, std::size_t count) {
    const bool par = count >= kParallelWork;
#pragma omp parallel for schedule(static) if (par)
    for (long i = 0; i < static_cast<long>(count); ++i) gx[i] += gy[i] * gelu_derivative(x[i]);
}

namespace serial {

void gemm(const GemmShape& s, const double* a, const double* b, double* c, bool accumulate) {
    for (std::size_t bi = 0; bi < s.batch; ++bi) {
        const double* ab = a + bi * s.stride_a;
        const double* bb = b + bi * s.stride_b;
        double* cb = c + bi * s.stride_c;
        for (std::size_t i = 0; i < s.m; ++i) {
            for (std::size_t j = 0; j < s.n; ++j) {
                double acc = accumulate ? cb[i * s.n + j] : 0.0;
                for (std::size_t p = 0; p < s.k; ++p) acc += a_at(s, ab, i, p) * b_at(s, bb, p, j);
                cb[i * s.n + j] = acc;
            }
        }
    }
}

void softmax_rows(const double* x, double* y, std::size_t rows, std::size_t n) {
    for (std::size_t r = 0; r < rows; ++r) softmax_row(x + r * n, y + r * n, n);
}

void softmax_rows_backward(const double* y, const double* gy, double* gx, std::size_t rows, std::size_t n) {
    for (std::size_t r = 0; r < rows; ++r) softmax_backward_row(y + r * n, gy + r * n, gx + r * n, n);
}

void layer_norm_rows(const double* x, const double* gain, const double* bias, double eps, double* y, double* xhat,
                     double* rstd, std::size_t rows, std::size_t n) {
    for (std::size_t r = 0; r < rows; ++r) {
        layer_norm_row(x + r * n, gain, bias, eps, y + r * n, xhat + r * n, rstd + r, n);
    }
}

void gelu(const double* x, double* y, std::size_t count) {
    for (std::size_t i = 0; i < count; ++i) y[i] = gelu_scalar(x[i]);
}

void gelu_backward(const double* x, const double* gy, double* gx, std::size_t count) {
    for (std::size_t i = 0; i < count; ++i) gx[i] += gy[i] * gelu_derivative(x[i]);
}

}  // namespace serial

}  // namespace evl::kernels
