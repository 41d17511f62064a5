#include "qedit/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>

namespace qedit {

double l2_distance(const Matrix& a, const Matrix& b) {
    if (!a.same_shape(b)) {
        throw Error(ErrorKind::dimension,
                    "l2_distance of " + std::to_string(a.rows()) + "x" + std::to_string(a.cols()) +
                        " and " + std::to_string(b.rows()) + "x" + std::to_string(b.cols()));
    }
    auto fa = a.flat();
    auto fb = b.flat();
    double s = 0.0;
    for (std::size_t i = 0; i < fa.size(); ++i) {
        const double d = fa[i] - fb[i];
        s += d * d;
    }
    return std::sqrt(s);
}

double l2_distance(const Vec& a, const Vec& b) {
    if (a.dim() != b.dim()) throw Error(ErrorKind::dimension, "l2_distance of unequal vectors");
    double s = 0.0;
    for (std::size_t i = 0; i < a.dim(); ++i) {
        const double d = a[i] - b[i];
        s += d * d;
    }
    return std::sqrt(s);
}

namespace {

void check_distribution(std::span<const double> p, const char* name) {
    double total = 0.0;
    for (double v : p) {
        if (!(v >= 0.0) || !std::isfinite(v)) {
            throw Error(ErrorKind::domain, std::string(name) + " has a negative or non-finite entry");
        }
        total += v;
    }
    if (std::abs(total - 1.0) > 1e-6) {
        throw Error(ErrorKind::domain,
                    std::string(name) + " sums to " + std::to_string(total) + ", not 1");
    }
}

}  // namespace

double kl_divergence(std::span<const double> p, std::span<const double> q) {
    if (p.size() != q.size()) throw Error(ErrorKind::dimension, "kl_divergence length mismatch");
    check_distribution(p, "p");
    check_distribution(q, "q");
    double kl = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        if (p[i] == 0.0) continue;
        if (q[i] == 0.0) throw Error(ErrorKind::domain, "q vanishes where p is positive");
        kl += p[i] * std::log(p[i] / q[i]);
    }
    // Rounding can leave a tiny negative value for p == q.
    return std::max(kl, 0.0);
}

Vec pool_span(const Matrix& per_token, Span span) {
    if (span.start >= span.end || span.end > per_token.rows()) {
        throw Error(ErrorKind::span, "span [" + std::to_string(span.start) + "," +
                                         std::to_string(span.end) + ") over " +
                                         std::to_string(per_token.rows()) + " rows");
    }
    Vec out(per_token.cols());
    for (std::size_t r = span.start; r < span.end; ++r) {
        auto row = per_token.row(r);
        for (std::size_t c = 0; c < out.dim(); ++c) out[c] += row[c];
    }
    out *= 1.0 / static_cast<double>(span.length());
    return out;
}

Vec finite_diff_grad(const std::function<double(const Vec&)>& f, const Vec& x, double h) {
    if (!(h > 0.0)) throw Error(ErrorKind::domain, "finite difference step must be positive");
    Vec grad(x.dim());
    Vec probe = x;
    for (std::size_t i = 0; i < x.dim(); ++i) {
        probe[i] = x[i] + h;
        const double up = f(probe);
        probe[i] = x[i] - h;
        const double down = f(probe);
        probe[i] = x[i];
        if (!std::isfinite(up) || !std::isfinite(down)) {
            throw Error(ErrorKind::numeric,
                        "non-finite function value at coordinate " + std::to_string(i));
        }
        grad[i] = (up - down) / (2.0 * h);
    }
    return grad;
}

std::vector<double> softmax(std::span<const double> logits) {
    std::vector<double> out(logits.size());
    const double mx = *std::max_element(logits.begin(), logits.end());
    double z = 0.0;
    for (std::size_t i = 0; i < logits.size(); ++i) {
        out[i] = std::exp(logits[i] - mx);
        z += out[i];
    }
    for (auto& v : out) v /= z;
    return out;
}

std::vector<double> log_softmax(std::span<const double> logits) {
    std::vector<double> out(logits.size());
    const double mx = *std::max_element(logits.begin(), logits.end());
    double z = 0.0;
    for (double v : logits) z += std::exp(v - mx);
    const double lse = mx + std::log(z);
    for (std::size_t i = 0; i < logits.size(); ++i) out[i] = logits[i] - lse;
    return out;
}

Cholesky::Cholesky(const Matrix& spd) : l_(spd.rows(), spd.cols()) {
    if (spd.rows() != spd.cols()) throw Error(ErrorKind::dimension, "Cholesky of non-square matrix");
    const std::size_t n = spd.rows();
    for (std::size_t j = 0; j < n; ++j) {
        double diag = spd(j, j);
        for (std::size_t k = 0; k < j; ++k) diag -= l_(j, k) * l_(j, k);
        if (!(diag > 0.0) || !std::isfinite(diag)) {
            throw Error(ErrorKind::algebra,
                        "matrix is not positive definite (pivot " + std::to_string(j) + ")");
        }
        const double ljj = std::sqrt(diag);
        l_(j, j) = ljj;
        for (std::size_t i = j + 1; i < n; ++i) {
            double s = spd(i, j);
            const auto li = l_.row(i);
            const auto lj = l_.row(j);
            for (std::size_t k = 0; k < j; ++k) s -= li[k] * lj[k];
            l_(i, j) = s / ljj;
        }
    }
}

Vec Cholesky::solve(const Vec& b) const {
    const std::size_t n = l_.rows();
    if (b.dim() != n) throw Error(ErrorKind::dimension, "Cholesky solve dimension mismatch");
    Vec y(n);
    for (std::size_t i = 0; i < n; ++i) {
        double s = b[i];
        const auto li = l_.row(i);
        for (std::size_t k = 0; k < i; ++k) s -= li[k] * y[k];
        y[i] = s / li[i];
    }
    Vec x(n);
    for (std::size_t ii = n; ii-- > 0;) {
        double s = y[ii];
        for (std::size_t k = ii + 1; k < n; ++k) s -= l_(k, ii) * x[k];
        x[ii] = s / l_(ii, ii);
    }
    return x;
}

}  // namespace qedit
