#include "qedit/matrix.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace qedit {

namespace {

void require_same_dim(std::size_t a, std::size_t b, const char* what) {
    if (a != b) {
        throw Error(ErrorKind::dimension, std::string(what) + ": " + std::to_string(a) +
                                              " vs " + std::to_string(b));
    }
}

}  // namespace

Vec& Vec::operator+=(const Vec& other) {
    require_same_dim(dim(), other.dim(), "vector add");
    for (std::size_t i = 0; i < dim(); ++i) data_[i] += other.data_[i];
    return *this;
}

Vec& Vec::operator-=(const Vec& other) {
    require_same_dim(dim(), other.dim(), "vector subtract");
    for (std::size_t i = 0; i < dim(); ++i) data_[i] -= other.data_[i];
    return *this;
}

Vec& Vec::operator*=(double s) {
    for (auto& v : data_) v *= s;
    return *this;
}

double Vec::norm() const { return std::sqrt(dot(*this, *this)); }

bool Vec::all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

Vec operator+(Vec a, const Vec& b) { return a += b; }
Vec operator-(Vec a, const Vec& b) { return a -= b; }
Vec operator*(double s, Vec a) { return a *= s; }

double dot(const Vec& a, const Vec& b) {
    require_same_dim(a.dim(), b.dim(), "dot");
    double s = 0.0;
    for (std::size_t i = 0; i < a.dim(); ++i) s += a[i] * b[i];
    return s;
}

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
    require_same_dim(rows_ * cols_, data_.size(), "matrix data length");
}

Matrix::Matrix(std::initializer_list<std::initializer_list<double>> rows) {
    rows_ = rows.size();
    cols_ = rows_ == 0 ? 0 : rows.begin()->size();
    data_.reserve(rows_ * cols_);
    for (const auto& r : rows) {
        require_same_dim(r.size(), cols_, "ragged matrix literal");
        data_.insert(data_.end(), r.begin(), r.end());
    }
}

Matrix Matrix::identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
}

Vec Matrix::row_vec(std::size_t r) const {
    auto s = row(r);
    return Vec(std::vector<double>(s.begin(), s.end()));
}

void Matrix::set_row(std::size_t r, std::span<const double> values) {
    require_same_dim(values.size(), cols_, "set_row");
    std::copy(values.begin(), values.end(), row(r).begin());
}

Matrix Matrix::transposed() const {
    Matrix t(cols_, rows_);
    for (std::size_t r = 0; r < rows_; ++r)
        for (std::size_t c = 0; c < cols_; ++c) t(c, r) = (*this)(r, c);
    return t;
}

Matrix& Matrix::operator+=(const Matrix& other) {
    if (!same_shape(other)) throw Error(ErrorKind::dimension, "matrix add shape mismatch");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
    return *this;
}

Matrix& Matrix::operator-=(const Matrix& other) {
    if (!same_shape(other)) throw Error(ErrorKind::dimension, "matrix subtract shape mismatch");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= other.data_[i];
    return *this;
}

Matrix& Matrix::operator*=(double s) {
    for (auto& v : data_) v *= s;
    return *this;
}

double Matrix::frobenius_norm() const {
    double s = 0.0;
    for (double v : data_) s += v * v;
    return std::sqrt(s);
}

bool Matrix::all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

Matrix operator+(Matrix a, const Matrix& b) { return a += b; }
Matrix operator-(Matrix a, const Matrix& b) { return a -= b; }

Vec matvec(const Matrix& a, const Vec& x) {
    require_same_dim(a.cols(), x.dim(), "matvec");
    Vec y(a.rows());
    for (std::size_t r = 0; r < a.rows(); ++r) {
        auto row = a.row(r);
        double s = 0.0;
        for (std::size_t c = 0; c < a.cols(); ++c) s += row[c] * x[c];
        y[r] = s;
    }
    return y;
}

Vec matvec_t(const Matrix& a, const Vec& x) {
    require_same_dim(a.rows(), x.dim(), "matvec_t");
    Vec y(a.cols());
    for (std::size_t r = 0; r < a.rows(); ++r) {
        auto row = a.row(r);
        const double xr = x[r];
        for (std::size_t c = 0; c < a.cols(); ++c) y[c] += row[c] * xr;
    }
    return y;
}

Matrix matmul(const Matrix& a, const Matrix& b) {
    require_same_dim(a.cols(), b.rows(), "matmul");
    Matrix c(a.rows(), b.cols());
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t k = 0; k < a.cols(); ++k) {
            const double aik = a(i, k);
            for (std::size_t j = 0; j < b.cols(); ++j) c(i, j) += aik * b(k, j);
        }
    return c;
}

Matrix outer(const Vec& a, const Vec& b) {
    Matrix m(a.dim(), b.dim());
    for (std::size_t i = 0; i < a.dim(); ++i)
        for (std::size_t j = 0; j < b.dim(); ++j) m(i, j) = a[i] * b[j];
    return m;
}

const char* to_string(ErrorKind kind) {
    switch (kind) {
        case ErrorKind::dimension: return "dimension";
        case ErrorKind::domain: return "domain";
        case ErrorKind::span: return "span";
        case ErrorKind::numeric: return "numeric";
        case ErrorKind::input: return "input";
        case ErrorKind::patch: return "patch";
        case ErrorKind::config: return "config";
        case ErrorKind::data: return "data";
        case ErrorKind::parse: return "parse";
        case ErrorKind::algebra: return "algebra";
        case ErrorKind::trace: return "trace";
        case ErrorKind::training: return "training";
        case ErrorKind::io: return "io";
    }
    return "unknown";
}

}  // namespace qedit
