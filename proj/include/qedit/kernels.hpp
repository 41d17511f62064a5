#pragma once

// Dense linear-layer kernels used by the transformer.
//
// Every kernel exists twice: `kernels::serial` holds the plain textbook loops
// kept as the reference for tests and benchmarks, and the top-level
// `kernels::` versions are the OpenMP row-parallel, cache-ordered variants the
// model actually calls. Each output element is reduced in the same order in
// both, so results agree to rounding (and exactly across thread counts).
//
// Shapes are row-major. A "weight" W is stored out x in, so a linear layer is
// Y = X W^T.

#include <cstddef>
#include <span>

namespace qedit::kernels {

struct Dims {
    std::size_t m;  // rows of X / Y
    std::size_t n;  // out features
    std::size_t k;  // in features
};

namespace serial {

// y[m x n] (+)= x[m x k] * w[n x k]^T
void linear(Dims d, std::span<const double> x, std::span<const double> w, std::span<double> y,
            bool accumulate = false);
// dx[m x k] += dy[m x n] * w[n x k]
void linear_grad_input(Dims d, std::span<const double> dy, std::span<const double> w,
                       std::span<double> dx);
// dw[n x k] += dy[m x n]^T * x[m x k]
void linear_grad_weight(Dims d, std::span<const double> dy, std::span<const double> x,
                        std::span<double> dw);

}  // namespace serial

void linear(Dims d, std::span<const double> x, std::span<const double> w, std::span<double> y,
            bool accumulate = false);
void linear_grad_input(Dims d, std::span<const double> dy, std::span<const double> w,
                       std::span<double> dx);
void linear_grad_weight(Dims d, std::span<const double> dy, std::span<const double> x,
                        std::span<double> dw);

// Number of OpenMP threads the parallel kernels will use (1 without OpenMP).
int max_threads();

}  // namespace qedit::kernels
