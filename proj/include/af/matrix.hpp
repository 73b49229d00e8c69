#pragma once

#include <cstddef>
#include <string>
#include <vector>

namespace af {

// Dense row-major double matrix. The only numeric storage type in the
// project: token sequences, parameters, gradients and images all live in
// one of these. Row vectors are 1 x n matrices.
class DenseMatrix {
public:
    DenseMatrix() = default;
    DenseMatrix(int rows, int cols);                 // zero-filled
    DenseMatrix(int rows, int cols, double fill);

    static DenseMatrix from_rows(int rows, int cols, std::vector<double> data);

    int rows() const noexcept { return rows_; }
    int cols() const noexcept { return cols_; }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    double& operator()(int r, int c) noexcept { return data_[static_cast<std::size_t>(r) * cols_ + c]; }
    double operator()(int r, int c) const noexcept { return data_[static_cast<std::size_t>(r) * cols_ + c]; }

    double* row(int r) noexcept { return data_.data() + static_cast<std::size_t>(r) * cols_; }
    const double* row(int r) const noexcept { return data_.data() + static_cast<std::size_t>(r) * cols_; }

    double* data() noexcept { return data_.data(); }
    const double* data() const noexcept { return data_.data(); }

    bool same_shape(const DenseMatrix& o) const noexcept { return rows_ == o.rows_ && cols_ == o.cols_; }
    void fill(double v);
    void zero() { fill(0.0); }

    bool all_finite() const noexcept;

private:
    int rows_ = 0;
    int cols_ = 0;
    std::vector<double> data_;
};

std::string shape_str(const DenseMatrix& m);

// Plain (non-differentiating) kernels. The autodiff ops call these for their
// forward values, so tests against these functions cover both paths.
namespace mat {

DenseMatrix matmul(const DenseMatrix& a, const DenseMatrix& b);
void matmul_into(const DenseMatrix& a, const DenseMatrix& b, DenseMatrix& out);
// out += a^T * b and out += a * b^T, used by backward rules.
void matmul_tn_accum(const DenseMatrix& a, const DenseMatrix& b, DenseMatrix& out);
void matmul_nt_accum(const DenseMatrix& a, const DenseMatrix& b, DenseMatrix& out);

DenseMatrix transpose(const DenseMatrix& a);

// Row-wise softmax with max subtraction.
DenseMatrix softmax_rows(const DenseMatrix& a);

// Per-row standardization followed by the affine map. gain/bias are 1 x cols.
// eps sits inside the square root: (x - mean) / sqrt(var + eps).
DenseMatrix layernorm_rows(const DenseMatrix& x, const DenseMatrix& gain,
                           const DenseMatrix& bias, double eps);

}  // namespace mat

// Guard helpers. check() throws std::invalid_argument, check_runtime()
// throws std::runtime_error.
void check(bool cond, const std::string& msg);
void check_runtime(bool cond, const std::string& msg);

}  // namespace af
