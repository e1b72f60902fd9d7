#pragma once

#include <cstddef>
#include <string>
#include <vector>

namespace mml {

// Dense row-major matrix of doubles. The workhorse container for images
// (one flattened image per row), latent codes, weights, and gradients.
struct Matrix {
    size_t rows = 0;
    size_t cols = 0;
    std::vector<double> data;

    Matrix() = default;
    Matrix(size_t r, size_t c, double fill = 0.0) : rows(r), cols(c), data(r * c, fill) {}

    double& at(size_t r, size_t c) { return data[r * cols + c]; }
    double at(size_t r, size_t c) const { return data[r * cols + c]; }

    double* row(size_t r) { return data.data() + r * cols; }
    const double* row(size_t r) const { return data.data() + r * cols; }

    size_t size() const { return data.size(); }
    bool empty() const { return rows == 0 || cols == 0; }

    bool same_shape(const Matrix& o) const { return rows == o.rows && cols == o.cols; }
};

// C = A * B
Matrix matmul(const Matrix& a, const Matrix& b);
// C = A * B^T  (rows of both operands are contiguous; preferred kernel)
Matrix matmul_abt(const Matrix& a, const Matrix& b);
// C = A^T * B
Matrix matmul_atb(const Matrix& a, const Matrix& b);

// y = M * x for a flat vector x
std::vector<double> matvec(const Matrix& m, const std::vector<double>& x);

void add_row_inplace(Matrix& m, const std::vector<double>& v);

double dot(const double* a, const double* b, size_t n);
double squared_distance(const double* a, const double* b, size_t n);
double norm2(const double* a, size_t n);

// Throws if any entry is NaN or infinite. `context` names the producer.
void ensure_finite(const Matrix& m, const std::string& context);
void ensure_finite(const std::vector<double>& v, const std::string& context);

Matrix take_rows(const Matrix& m, const std::vector<size_t>& idx);

} // namespace mml
