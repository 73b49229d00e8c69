#include "af/matrix.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace af {

DenseMatrix::DenseMatrix(int rows, int cols)
    : rows_(rows), cols_(cols), data_(static_cast<std::size_t>(rows) * cols, 0.0) {
    check(rows >= 0 && cols >= 0, "DenseMatrix: negative dimensions");
}

DenseMatrix::DenseMatrix(int rows, int cols, double fill)
    : rows_(rows), cols_(cols), data_(static_cast<std::size_t>(rows) * cols, fill) {
    check(rows >= 0 && cols >= 0, "DenseMatrix: negative dimensions");
}

DenseMatrix DenseMatrix::from_rows(int rows, int cols, std::vector<double> data) {
    check(data.size() == static_cast<std::size_t>(rows) * cols,
          "DenseMatrix::from_rows: data length does not match " + std::to_string(rows) + "x" +
              std::to_string(cols));
    DenseMatrix m;
    m.rows_ = rows;
    m.cols_ = cols;
    m.data_ = std::move(data);
    return m;
}

void DenseMatrix::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

bool DenseMatrix::all_finite() const noexcept {
    for (double v : data_) {
        if (!std::isfinite(v)) {
            return false;
        }
    }
    return true;
}

std::string shape_str(const DenseMatrix& m) {
    return std::to_string(m.rows()) + "x" + std::to_string(m.cols());
}

void check(bool cond, const std::string& msg) {
    if (!cond) {
        throw std::invalid_argument(msg);
    }
}

void check_runtime(bool cond, const std::string& msg) {
    if (!cond) {
        throw std::runtime_error(msg);
    }
}

namespace mat {

void matmul_into(const DenseMatrix& a, const DenseMatrix& b, DenseMatrix& out) {
    const int n = a.rows();
    const int k = a.cols();
    const int m = b.cols();
    // ikj order keeps the inner loop contiguous in both b and out.
    for (int i = 0; i < n; ++i) {
        double* orow = out.row(i);
        const double* arow = a.row(i);
        for (int p = 0; p < k; ++p) {
            const double aip = arow[p];
            const double* brow = b.row(p);
            for (int j = 0; j < m; ++j) {
                orow[j] += aip * brow[j];
            }
        }
    }
}

DenseMatrix matmul(const DenseMatrix& a, const DenseMatrix& b) {
    check(a.cols() == b.rows(),
          "matmul: inner dimensions mismatch (" + shape_str(a) + " vs " + shape_str(b) + ")");
    DenseMatrix out(a.rows(), b.cols());
    matmul_into(a, b, out);
    return out;
}

void matmul_tn_accum(const DenseMatrix& a, const DenseMatrix& b, DenseMatrix& out) {
    // out (a.cols x b.cols) += a^T * b
    const int n = a.rows();
    const int k = a.cols();
    const int m = b.cols();
    for (int p = 0; p < n; ++p) {
        const double* arow = a.row(p);
        const double* brow = b.row(p);
        for (int i = 0; i < k; ++i) {
            const double aip = arow[i];
            double* orow = out.row(i);
            for (int j = 0; j < m; ++j) {
                orow[j] += aip * brow[j];
            }
        }
    }
}

void matmul_nt_accum(const DenseMatrix& a, const DenseMatrix& b, DenseMatrix& out) {
    // out (a.rows x b.rows) += a * b^T; inner loop is a dot product.
    const int n = a.rows();
    const int k = a.cols();
    const int m = b.rows();
    for (int i = 0; i < n; ++i) {
        const double* arow = a.row(i);
        double* orow = out.row(i);
        for (int j = 0; j < m; ++j) {
            const double* brow = b.row(j);
            double acc = 0.0;
            for (int p = 0; p < k; ++p) {
                acc += arow[p] * brow[p];
            }
            orow[j] += acc;
        }
    }
}

DenseMatrix transpose(const DenseMatrix& a) {
    DenseMatrix out(a.cols(), a.rows());
    for (int i = 0; i < a.rows(); ++i) {
        for (int j = 0; j < a.cols(); ++j) {
            out(j, i) = a(i, j);
        }
    }
    return out;
}

DenseMatrix softmax_rows(const DenseMatrix& a) {
    DenseMatrix out(a.rows(), a.cols());
    for (int i = 0; i < a.rows(); ++i) {
        const double* x = a.row(i);
        double* y = out.row(i);
        double mx = x[0];
        for (int j = 1; j < a.cols(); ++j) {
            mx = std::max(mx, x[j]);
        }
        double sum = 0.0;
        for (int j = 0; j < a.cols(); ++j) {
            y[j] = std::exp(x[j] - mx);
            sum += y[j];
        }
        const double inv = 1.0 / sum;
        for (int j = 0; j < a.cols(); ++j) {
            y[j] *= inv;
        }
    }
    return out;
}

DenseMatrix layernorm_rows(const DenseMatrix& x, const DenseMatrix& gain,
                           const DenseMatrix& bias, double eps) {
    check(x.cols() >= 2, "layernorm: needs at least 2 columns, got " + shape_str(x));
    check(gain.rows() == 1 && gain.cols() == x.cols(),
          "layernorm: gain shape " + shape_str(gain) + " does not match " + shape_str(x));
    check(bias.rows() == 1 && bias.cols() == x.cols(),
          "layernorm: bias shape " + shape_str(bias) + " does not match " + shape_str(x));
    DenseMatrix out(x.rows(), x.cols());
    const int m = x.cols();
    for (int i = 0; i < x.rows(); ++i) {
        const double* xr = x.row(i);
        double* yr = out.row(i);
        double mean = 0.0;
        for (int j = 0; j < m; ++j) {
            mean += xr[j];
        }
        mean /= m;
        double var = 0.0;
        for (int j = 0; j < m; ++j) {
            const double d = xr[j] - mean;
            var += d * d;
        }
        var /= m;
        const double inv = 1.0 / std::sqrt(var + eps);
        for (int j = 0; j < m; ++j) {
            yr[j] = (xr[j] - mean) * inv * gain(0, j) + bias(0, j);
        }
    }
    return out;
}

}  // namespace mat
}  // namespace af
