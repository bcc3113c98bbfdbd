#include "moediff/matrix.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "moediff/errors.hpp"

namespace moediff {

Matrix::Matrix(int r, int c, std::vector<double> values)
    : rows(r), cols(c), data(std::move(values)) {
    if (data.size() != static_cast<size_t>(r) * c) {
        throw ShapeError("matrix data length does not match rows*cols");
    }
}

Matrix Matrix::from_rows(const std::vector<std::vector<double>>& values) {
    Matrix m(static_cast<int>(values.size()),
             values.empty() ? 0 : static_cast<int>(values[0].size()));
    for (int r = 0; r < m.rows; ++r) {
        if (static_cast<int>(values[r].size()) != m.cols) {
            throw ShapeError("ragged row in Matrix::from_rows");
        }
        std::copy(values[r].begin(), values[r].end(), m.row(r).begin());
    }
    return m;
}

bool Matrix::all_finite() const {
    return std::all_of(data.begin(), data.end(),
                       [](double v) { return std::isfinite(v); });
}

void fill_uniform(Matrix& m, Rng& rng, double scale) {
    for (double& v : m.data) {
        v = rng.next_range(-scale, scale);
    }
}

Matrix matmul(const Matrix& a, const Matrix& b) {
    if (a.cols != b.rows) {
        throw ShapeError("matmul dimension mismatch: " + std::to_string(a.cols) +
                         " vs " + std::to_string(b.rows));
    }
    Matrix out(a.rows, b.cols);
    for (int i = 0; i < a.rows; ++i) {
        for (int k = 0; k < a.cols; ++k) {
            const double aik = a.at(i, k);
            if (aik == 0.0) continue;
            const double* brow = b.data.data() + static_cast<size_t>(k) * b.cols;
            double* orow = out.data.data() + static_cast<size_t>(i) * out.cols;
            for (int j = 0; j < b.cols; ++j) {
                orow[j] += aik * brow[j];
            }
        }
    }
    if (!out.all_finite()) {
        throw NumericError("matmul produced a non-finite entry");
    }
    return out;
}

Matrix softmax_rows(const Matrix& m) {
    if (!m.all_finite()) {
        throw ArgumentError("softmax_rows requires finite input");
    }
    Matrix out(m.rows, m.cols);
    for (int r = 0; r < m.rows; ++r) {
        auto in = m.row(r);
        auto o = out.row(r);
        double mx = in[0];
        for (double v : in) mx = std::max(mx, v);
        double sum = 0.0;
        for (int c = 0; c < m.cols; ++c) {
            o[c] = std::exp(in[c] - mx);
            sum += o[c];
        }
        for (int c = 0; c < m.cols; ++c) o[c] /= sum;
    }
    return out;
}

std::vector<std::pair<int, double>> row_argmax(const Matrix& m) {
    if (m.cols == 0) {
        throw ShapeError("row_argmax on empty rows");
    }
    std::vector<std::pair<int, double>> out;
    out.reserve(m.rows);
    for (int r = 0; r < m.rows; ++r) {
        auto row = m.row(r);
        int best = 0;
        for (int c = 1; c < m.cols; ++c) {
            if (row[c] > row[best]) best = c;  // strict: ties keep smallest index
        }
        out.emplace_back(best, row[best]);
    }
    return out;
}

std::vector<int> top_k(std::span<const double> values, int k) {
    if (k < 0 || static_cast<size_t>(k) > values.size()) {
        throw ArgumentError("top_k: k=" + std::to_string(k) + " out of range for length " +
                            std::to_string(values.size()));
    }
    std::vector<int> idx(values.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) {
        if (values[a] != values[b]) return values[a] > values[b];
        return a < b;
    });
    idx.resize(k);
    return idx;
}

double dot(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) {
        throw ShapeError("dot length mismatch");
    }
    double s = 0.0;
    for (size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

double cosine_similarity(std::span<const double> a, std::span<const double> b) {
    const double na = std::sqrt(dot(a, a));
    const double nb = std::sqrt(dot(b, b));
    if (na == 0.0 || nb == 0.0) {
        throw DegenerateInputError("cosine_similarity on zero-norm vector");
    }
    return std::clamp(dot(a, b) / (na * nb), -1.0, 1.0);
}

}  // namespace moediff
