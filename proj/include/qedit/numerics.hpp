#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <vector>

#include "qedit/matrix.hpp"

namespace qedit {

// Half-open token range [start, end).
struct Span {
    std::size_t start = 0;
    std::size_t end = 0;

    std::size_t length() const noexcept { return end > start ? end - start : 0; }
    bool contains(std::size_t i) const noexcept { return i >= start && i < end; }
    friend bool operator==(const Span&, const Span&) = default;
};

// Frobenius distance between equally shaped matrices.
double l2_distance(const Matrix& a, const Matrix& b);
double l2_distance(const Vec& a, const Vec& b);

// KL(p || q) in nats. Both must be distributions (sum 1 within 1e-6), and q may
// not vanish where p is positive.
double kl_divergence(std::span<const double> p, std::span<const double> q);

// Mean of rows [span.start, span.end).
Vec pool_span(const Matrix& per_token, Span span);

// Central-difference gradient. Test oracle only; the library never calls it.
Vec finite_diff_grad(const std::function<double(const Vec&)>& f, const Vec& x, double h);

// Numerically stable softmax and log-softmax over a row of logits.
std::vector<double> softmax(std::span<const double> logits);
std::vector<double> log_softmax(std::span<const double> logits);

// Lower-triangular Cholesky factor of a symmetric positive definite matrix.
class Cholesky {
public:
    // Throws Error(algebra) if the matrix is not positive definite.
    explicit Cholesky(const Matrix& spd);

    Vec solve(const Vec& b) const;
    const Matrix& lower() const noexcept { return l_; }

private:
    Matrix l_;
};

}  // namespace qedit
