#include "qedit/kernels.hpp"

#include <algorithm>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace qedit::kernels {

namespace serial {

void linear(Dims d, std::span<const double> x, std::span<const double> w, std::span<double> y,
            bool accumulate) {
    for (std::size_t i = 0; i < d.m; ++i) {
        for (std::size_t j = 0; j < d.n; ++j) {
            double s = accumulate ? y[i * d.n + j] : 0.0;
            for (std::size_t p = 0; p < d.k; ++p) s += x[i * d.k + p] * w[j * d.k + p];
            y[i * d.n + j] = s;
        }
    }
}

void linear_grad_input(Dims d, std::span<const double> dy, std::span<const double> w,
                       std::span<double> dx) {
    for (std::size_t i = 0; i < d.m; ++i) {
        for (std::size_t p = 0; p < d.k; ++p) {
            double s = dx[i * d.k + p];
            for (std::size_t j = 0; j < d.n; ++j) s += dy[i * d.n + j] * w[j * d.k + p];
            dx[i * d.k + p] = s;
        }
    }
}

void linear_grad_weight(Dims d, std::span<const double> dy, std::span<const double> x,
                        std::span<double> dw) {
    for (std::size_t j = 0; j < d.n; ++j) {
        for (std::size_t p = 0; p < d.k; ++p) {
            double s = dw[j * d.k + p];
            for (std::size_t i = 0; i < d.m; ++i) s += dy[i * d.n + j] * x[i * d.k + p];
            dw[j * d.k + p] = s;
        }
    }
}

}  // namespace serial

namespace {

// Below this many multiply-adds the fork/join cost dominates.
constexpr std::size_t kParallelWork = 1u << 16;

bool worth_parallel(Dims d) { return d.m * d.n * d.k >= kParallelWork; }

constexpr std::size_t kBlock = 4;

}  // namespace

void linear(Dims d, std::span<const double> x, std::span<const double> w, std::span<double> y,
            bool accumulate) {
    // Dot products against contiguous weight rows, four input rows at a
    // time so each weight row is loaded once per block.
    const std::size_t n = d.n, k = d.k;
    const long blocks = static_cast<long>((d.m + kBlock - 1) / kBlock);
#pragma omp parallel for schedule(static) if (worth_parallel(d))
    for (long b = 0; b < blocks; ++b) {
        const std::size_t i0 = static_cast<std::size_t>(b) * kBlock;
        const std::size_t rows = std::min(kBlock, d.m - i0);
        if (rows == kBlock) {
            const double* x0 = x.data() + i0 * k;
            const double* x1 = x0 + k;
            const double* x2 = x1 + k;
            const double* x3 = x2 + k;
            double* yb = y.data() + i0 * n;
            for (std::size_t j = 0; j < n; ++j) {
                const double* wr = w.data() + j * k;
                double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
#pragma omp simd reduction(+ : s0, s1, s2, s3)
                for (std::size_t p = 0; p < k; ++p) {
                    const double wp = wr[p];
                    s0 += x0[p] * wp;
                    s1 += x1[p] * wp;
                    s2 += x2[p] * wp;
                    s3 += x3[p] * wp;
                }
                if (accumulate) {
                    yb[j] += s0;
                    yb[n + j] += s1;
                    yb[2 * n + j] += s2;
                    yb[3 * n + j] += s3;
                } else {
                    yb[j] = s0;
                    yb[n + j] = s1;
                    yb[2 * n + j] = s2;
                    yb[3 * n + j] = s3;
                }
            }
        } else {
            for (std::size_t i = i0; i < i0 + rows; ++i) {
                const double* xr = x.data() + i * k;
                for (std::size_t j = 0; j < n; ++j) {
                    const double* wr = w.data() + j * k;
                    double s = 0.0;
#pragma omp simd reduction(+ : s)
                    for (std::size_t p = 0; p < k; ++p) s += xr[p] * wr[p];
                    y[i * n + j] = accumulate ? y[i * n + j] + s : s;
                }
            }
        }
    }
}

void linear_grad_input(Dims d, std::span<const double> dy, std::span<const double> w,
                       std::span<double> dx) {
    const std::size_t n = d.n, k = d.k;
    const long blocks = static_cast<long>((d.m + kBlock - 1) / kBlock);
#pragma omp parallel for schedule(static) if (worth_parallel(d))
    for (long b = 0; b < blocks; ++b) {
        const std::size_t i0 = static_cast<std::size_t>(b) * kBlock;
        const std::size_t rows = std::min(kBlock, d.m - i0);
        if (rows == kBlock) {
            double* __restrict x0 = dx.data() + i0 * k;
            double* __restrict x1 = x0 + k;
            double* __restrict x2 = x1 + k;
            double* __restrict x3 = x2 + k;
            const double* g = dy.data() + i0 * n;
            for (std::size_t j = 0; j < n; ++j) {
                const double g0 = g[j], g1 = g[n + j], g2 = g[2 * n + j], g3 = g[3 * n + j];
                const double* wr = w.data() + j * k;
                for (std::size_t p = 0; p < k; ++p) {
                    const double wp = wr[p];
                    x0[p] += g0 * wp;
                    x1[p] += g1 * wp;
                    x2[p] += g2 * wp;
                    x3[p] += g3 * wp;
                }
            }
        } else {
            for (std::size_t i = i0; i < i0 + rows; ++i) {
                double* dxr = dx.data() + i * k;
                const double* dyr = dy.data() + i * n;
                for (std::size_t j = 0; j < n; ++j) {
                    const double g = dyr[j];
                    const double* wr = w.data() + j * k;
                    for (std::size_t p = 0; p < k; ++p) dxr[p] += g * wr[p];
                }
            }
        }
    }
}

void linear_grad_weight(Dims d, std::span<const double> dy, std::span<const double> x,
                        std::span<double> dw) {
    // Four input rows per pass over a gradient row.
    const std::size_t n = d.n, k = d.k, m = d.m;
    const long outs = static_cast<long>(n);
#pragma omp parallel for schedule(static) if (worth_parallel(d))
    for (long jl = 0; jl < outs; ++jl) {
        const std::size_t j = static_cast<std::size_t>(jl);
        double* __restrict dwr = dw.data() + j * k;
        std::size_t i = 0;
        for (; i + kBlock <= m; i += kBlock) {
            const double g0 = dy[i * n + j], g1 = dy[(i + 1) * n + j], g2 = dy[(i + 2) * n + j],
                         g3 = dy[(i + 3) * n + j];
            if (g0 == 0.0 && g1 == 0.0 && g2 == 0.0 && g3 == 0.0) continue;
            const double* x0 = x.data() + i * k;
            const double* x1 = x0 + k;
            const double* x2 = x1 + k;
            const double* x3 = x2 + k;
            for (std::size_t p = 0; p < k; ++p) dwr[p] += g0 * x0[p] + g1 * x1[p] + g2 * x2[p] + g3 * x3[p];
        }
        for (; i < m; ++i) {
            const double g = dy[i * n + j];
            const double* xr = x.data() + i * k;
            for (std::size_t p = 0; p < k; ++p) dwr[p] += g * xr[p];
        }
    }
}

int max_threads() {
#ifdef _OPENMP
    return omp_get_max_threads();
#else
    return 1;
#endif
}

}  // namespace qedit::kernels
