#pragma once

#include <cstddef>
#include <span>
#include <utility>
#include <vector>

#include "moediff/rng.hpp"

namespace moediff {

// Dense row-major matrix of doubles. Everything in the engine (hidden states,
// logits, router scores, weights) lives in these; all arithmetic is 64-bit.
struct Matrix {
    int rows = 0;
    int cols = 0;
    std::vector<double> data;

    Matrix() = default;
    Matrix(int r, int c) : rows(r), cols(c), data(static_cast<size_t>(r) * c, 0.0) {}
    Matrix(int r, int c, std::vector<double> values);

    static Matrix from_rows(const std::vector<std::vector<double>>& values);

    double& at(int r, int c) { return data[static_cast<size_t>(r) * cols + c]; }
    double at(int r, int c) const { return data[static_cast<size_t>(r) * cols + c]; }

    std::span<const double> row(int r) const {
        return {data.data() + static_cast<size_t>(r) * cols, static_cast<size_t>(cols)};
    }
    std::span<double> row(int r) {
        return {data.data() + static_cast<size_t>(r) * cols, static_cast<size_t>(cols)};
    }

    bool all_finite() const;

    bool operator==(const Matrix& other) const = default;
};

// Fill with uniform draws in [-scale, scale) from the shared stream.
void fill_uniform(Matrix& m, Rng& rng, double scale);

// Standard product. Throws ShapeError on a.cols != b.rows, NumericError if the
// result is not finite.
Matrix matmul(const Matrix& a, const Matrix& b);

// Row-wise softmax with per-row max subtraction. Rows sum to 1 within 1e-9
// for any finite input.
Matrix softmax_rows(const Matrix& m);

// Per row: (index, value) of the maximum, smallest index on ties.
std::vector<std::pair<int, double>> row_argmax(const Matrix& m);

// Indices of the k largest values, descending by value, ties broken by
// ascending index. Throws ArgumentError if k > values.size().
std::vector<int> top_k(std::span<const double> values, int k);

// dot(a,b) / (|a|*|b|), clamped to [-1, 1]. Throws DegenerateInputError on a
// zero-norm input, ShapeError on length mismatch.
double cosine_similarity(std::span<const double> a, std::span<const double> b);

double dot(std::span<const double> a, std::span<const double> b);

}  // namespace moediff
