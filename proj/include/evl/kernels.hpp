// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>

// Raw row-major kernels behind the differentiable ops.
//
// The OpenMP kernels split work over output rows only, so every output element
// is reduced in the same order no matter how many threads run. The naive
// versions in `serial` follow that order too and serve as the test oracle:
// parallel and serial results must agree bit for bit.
namespace evl::kernels {

struct GemmShape {
    std::size_t batch = 1;
    std::size_t m = 0, n = 0, k = 0;
    bool trans_a = false;  // a stored as [k, m] instead of [m, k]
    bool trans_b = false;  // b stored as [n, k] instead of [k, n]
    std::size_t stride_a = 0, stride_b = 0, stride_c = 0;  // per-batch; 0 broadcasts
};

// c (+)= op(a) * op(b) for every batch entry.
void gemm(const GemmShape& s, const double* a, const double* b, double* c, bool accumulate);

void softmax_rows(const double* x, double* y, std::size_t rows, std::size_t n);
// gx += y * (gy - <gy, y>) per row.
void softmax_rows_backward(const double* y, const double* gy, double* gx, std::size_t rows, std::size_t n);

// Writes normalized rows (before the affine map) to xhat and 1/sqrt(var+eps) to rstd.
void layer_norm_rows(const double* x, const double* gain, const double* bias, double eps, double* y, double* xhat,
                     double* rstd, std::size_t rows, std::size_t n);

void gelu(const double* x, double* y, std::size_t count);
void gelu_backward(const double* x, const double* gy, double* gx, std::size_t count);

namespace serial {

void gemm(const GemmShape& s, const double* a, const double* b, double* c, bool accumulate);
void softmax_rows(const double* x, double* y, std::size_t rows, std::size_t n);
void softmax_rows_backward(const double* y, const double* gy, double* gx, std::size_t rows, std::size_t n);
void layer_norm_rows(const double* x, const double* gain, const double* bias, double eps, double* y, double* xhat,
                     double* rstd, std::size_t rows, std::size_t n);
void gelu(const double* x, double* y, std::size_t count);
void gelu_backward(const double* x, const double* gy, double* gx, std::size_t count);

}  // namespace serial

// tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3))).
double gelu_scalar(double x);
double gelu_derivative(double x);

}  // namespace evl::kernels
