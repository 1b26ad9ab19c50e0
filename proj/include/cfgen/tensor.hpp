#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace cfgen {

// Dense row-major tensor of 64-bit floats. On-disk interchange is 32-bit
// (see dataio); arithmetic stays at 64 bits so gradient checks can be tight.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::vector<std::size_t> dims);                      // zero-filled
    Tensor(std::vector<std::size_t> dims, std::vector<double> data);     // rejects NaN/Inf

    const std::vector<std::size_t>& dims() const { return dims_; }
    std::size_t rank() const { return dims_.size(); }
    std::size_t size() const { return data_.size(); }

    // rank-2 accessors
    std::size_t rows() const;
    std::size_t cols() const;
    double& operator()(std::size_t i, std::size_t j);
    double operator()(std::size_t i, std::size_t j) const;
    std::span<double> row(std::size_t i);
    std::span<const double> row(std::size_t i) const;

    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }
    std::span<double> flat() { return data_; }
    std::span<const double> flat() const { return data_; }

    void fill(double v);
    bool same_shape(const Tensor& other) const { return dims_ == other.dims_; }
    bool operator==(const Tensor& other) const = default;

    // Throws if any entry is NaN/Inf; `what` names the tensor in the message.
    void check_finite(const char* what) const;

private:
    std::vector<std::size_t> dims_;
    std::vector<double> data_;
};

// ---- numeric primitives ----

// Max-subtracted softmax; output sums to 1. Throws on empty input.
std::vector<double> softmax(std::span<const double> v);
void softmax_inplace(std::span<double> v);

// log(sum_i exp(v_i)) without overflow. Throws on empty input.
double log_sum_exp(std::span<const double> v);

// v / ||v||. Throws on a zero-norm vector.
std::vector<double> l2_normalize(std::span<const double> v);

// u^T W w for W of shape [len(u), len(w)].
double bilinear(std::span<const double> u, const Tensor& W, std::span<const double> w);

double dot(std::span<const double> a, std::span<const double> b);
double l2_norm(std::span<const double> v);

// out = M x
void mat_vec(const Tensor& M, std::span<const double> x, std::span<double> out);
// out = M^T x
void matT_vec(const Tensor& M, std::span<const double> x, std::span<double> out);
// A[m,k] * B[k,n]
Tensor mat_mul(const Tensor& A, const Tensor& B);
// A[m,k] * B[n,k]^T
Tensor mat_mul_bt(const Tensor& A, const Tensor& B);

// gradient accumulation: dest += A B, A^T B, A B^T
void add_ab(Tensor& dest, const Tensor& A, const Tensor& B);
void add_atb(Tensor& dest, const Tensor& A, const Tensor& B);
void add_abt(Tensor& dest, const Tensor& A, const Tensor& B);

} // namespace cfgen
