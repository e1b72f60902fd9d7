#include "mml/matrix.hpp"

#include <cmath>
#include <stdexcept>

namespace mml {

static void check_mul(size_t inner_a, size_t inner_b, const char* what) {
    if (inner_a != inner_b)
        throw std::invalid_argument(std::string(what) + ": inner dimensions do not match (" +
                                    std::to_string(inner_a) + " vs " + std::to_string(inner_b) + ")");
}

Matrix matmul(const Matrix& a, const Matrix& b) {
    check_mul(a.cols, b.rows, "matmul");
    Matrix c(a.rows, b.cols);
    for (size_t i = 0; i < a.rows; ++i) {
        const double* arow = a.row(i);
        double* crow = c.row(i);
        for (size_t k = 0; k < a.cols; ++k) {
            const double aik = arow[k];
            if (aik == 0.0) continue;
            const double* brow = b.row(k);
            for (size_t j = 0; j < b.cols; ++j) crow[j] += aik * brow[j];
        }
    }
    return c;
}

Matrix matmul_abt(const Matrix& a, const Matrix& b) {
    check_mul(a.cols, b.cols, "matmul_abt");
    Matrix c(a.rows, b.rows);
    for (size_t i = 0; i < a.rows; ++i) {
        const double* arow = a.row(i);
        double* crow = c.row(i);
        for (size_t j = 0; j < b.rows; ++j) crow[j] = dot(arow, b.row(j), a.cols);
    }
    return c;
}

Matrix matmul_atb(const Matrix& a, const Matrix& b) {
    check_mul(a.rows, b.rows, "matmul_atb");
    Matrix c(a.cols, b.cols);
    for (size_t i = 0; i < a.rows; ++i) {
        const double* arow = a.row(i);
        const double* brow = b.row(i);
        for (size_t k = 0; k < a.cols; ++k) {
            const double aik = arow[k];
            if (aik == 0.0) continue;
            double* crow = c.row(k);
            for (size_t j = 0; j < b.cols; ++j) crow[j] += aik * brow[j];
        }
    }
    return c;
}

std::vector<double> matvec(const Matrix& m, const std::vector<double>& x) {
    check_mul(m.cols, x.size(), "matvec");
    std::vector<double> y(m.rows);
    for (size_t i = 0; i < m.rows; ++i) y[i] = dot(m.row(i), x.data(), m.cols);
    return y;
}

void add_row_inplace(Matrix& m, const std::vector<double>& v) {
    check_mul(m.cols, v.size(), "add_row_inplace");
    for (size_t i = 0; i < m.rows; ++i) {
        double* row = m.row(i);
        for (size_t j = 0; j < m.cols; ++j) row[j] += v[j];
    }
}

double dot(const double* a, const double* b, size_t n) {
    double s = 0.0;
    for (size_t i = 0; i < n; ++i) s += a[i] * b[i];
    return s;
}

double squared_distance(const double* a, const double* b, size_t n) {
    double s = 0.0;
    for (size_t i = 0; i < n; ++i) {
        const double d = a[i] - b[i];
        s += d * d;
    }
    return s;
}

double norm2(const double* a, size_t n) {
    return std::sqrt(dot(a, a, n));
}

void ensure_finite(const Matrix& m, const std::string& context) {
    for (double v : m.data)
        if (!std::isfinite(v)) throw std::runtime_error(context + ": non-finite value encountered");
}

void ensure_finite(const std::vector<double>& v, const std::string& context) {
    for (double x : v)
        if (!std::isfinite(x)) throw std::runtime_error(context + ": non-finite value encountered");
}

Matrix take_rows(const Matrix& m, const std::vector<size_t>& idx) {
    Matrix out(idx.size(), m.cols);
    for (size_t i = 0; i < idx.size(); ++i) {
        if (idx[i] >= m.rows) throw std::out_of_range("take_rows: row index out of range");
        const double* src = m.row(idx[i]);
        std::copy(src, src + m.cols, out.row(i));
    }
    return out;
}

} // namespace mml
