#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstring>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

#include "loraview/numerics/errors.hpp"

namespace loraview {

/// Dense row-major float32 matrix. The universal value type of the library:
/// weights, activations, gate vectors (1 x n) and images all live in one.
class Matrix {
public:
    Matrix() = default;

    Matrix(std::size_t rows, std::size_t cols, float fill = 0.0f)
        : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

    Matrix(std::size_t rows, std::size_t cols, std::vector<float> data)
        : rows_(rows), cols_(cols), data_(std::move(data)) {
        if (data_.size() != rows_ * cols_) {
            throw ShapeError("data length " + std::to_string(data_.size()) + " != " +
                             std::to_string(rows_) + "x" + std::to_string(cols_));
        }
    }

    /// Row-major literal, e.g. `Matrix::from({{1, 2}, {3, 4}})`.
    static Matrix from(std::initializer_list<std::initializer_list<float>> rows) {
        std::size_t r = rows.size();
        std::size_t c = r ? rows.begin()->size() : 0;
        Matrix m(r, c);
        std::size_t i = 0;
        for (const auto& row : rows) {
            if (row.size() != c) throw ShapeError("ragged matrix literal");
            std::copy(row.begin(), row.end(), m.data_.begin() + static_cast<std::ptrdiff_t>(i * c));
            ++i;
        }
        return m;
    }

    static Matrix zeros(std::size_t r, std::size_t c) { return Matrix(r, c, 0.0f); }
    static Matrix ones(std::size_t r, std::size_t c) { return Matrix(r, c, 1.0f); }
    static Matrix identity(std::size_t n) {
        Matrix m(n, n);
        for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0f;
        return m;
    }
    static Matrix row_vector(std::span<const float> values) {
        return Matrix(1, values.size(), std::vector<float>(values.begin(), values.end()));
    }

    std::size_t rows() const noexcept { return rows_; }
    std::size_t cols() const noexcept { return cols_; }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    float& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols_ + c]; }
    float operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * cols_ + c]; }
    float& operator[](std::size_t i) noexcept { return data_[i]; }
    float operator[](std::size_t i) const noexcept { return data_[i]; }

    std::span<float> values() noexcept { return data_; }
    std::span<const float> values() const noexcept { return data_; }
    float* data() noexcept { return data_.data(); }
    const float* data() const noexcept { return data_.data(); }
    std::span<const float> row(std::size_t r) const noexcept {
        return {data_.data() + r * cols_, cols_};
    }
    std::span<float> row(std::size_t r) noexcept { return {data_.data() + r * cols_, cols_}; }

    bool same_shape(const Matrix& o) const noexcept { return rows_ == o.rows_ && cols_ == o.cols_; }

    /// Bitwise equality (distinguishes -0.0f from 0.0f, NaN payloads, ...).
    bool bit_equal(const Matrix& o) const noexcept {
        return same_shape(o) &&
               (data_.empty() || std::memcmp(data_.data(), o.data_.data(), data_.size() * sizeof(float)) == 0);
    }

    bool all_finite() const noexcept {
        return std::all_of(data_.begin(), data_.end(), [](float v) { return std::isfinite(v); });
    }

    std::string shape_str() const { return std::to_string(rows_) + "x" + std::to_string(cols_); }

    Matrix transposed() const {
        Matrix t(cols_, rows_);
        for (std::size_t i = 0; i < rows_; ++i)
            for (std::size_t j = 0; j < cols_; ++j) t(j, i) = (*this)(i, j);
        return t;
    }

    Matrix& operator+=(const Matrix& o) {
        require_same(o, "+=");
        for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
        return *this;
    }
    Matrix& operator-=(const Matrix& o) {
        require_same(o, "-=");
        for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= o.data_[i];
        return *this;
    }
    Matrix& operator*=(float s) noexcept {
        for (auto& v : data_) v *= s;
        return *this;
    }

    friend Matrix operator+(Matrix a, const Matrix& b) { return a += b; }
    friend Matrix operator-(Matrix a, const Matrix& b) { return a -= b; }
    friend Matrix operator*(Matrix a, float s) { return a *= s; }
    friend Matrix operator*(float s, Matrix a) { return a *= s; }

private:
    void require_same(const Matrix& o, const char* what) const {
        if (!same_shape(o)) throw ShapeError(std::string(what) + ": " + shape_str() + " vs " + o.shape_str());
    }

    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<float> data_;
};

/// Frobenius norm with double accumulation.
inline double frobenius(const Matrix& m) {
    double s = 0.0;
    for (float v : m.values()) s += static_cast<double>(v) * v;
    return std::sqrt(s);
}

/// ||a - b||_F / max(||b||_F, tiny). Used throughout the test suites.
inline double relative_error(const Matrix& a, const Matrix& b) {
    if (!a.same_shape(b)) throw ShapeError("relative_error: " + a.shape_str() + " vs " + b.shape_str());
    double num = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        double d = static_cast<double>(a[i]) - b[i];
        num += d * d;
    }
    double den = frobenius(b);
    return std::sqrt(num) / std::max(den, 1e-30);
}

}  // namespace loraview
