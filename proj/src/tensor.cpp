#include "cfgen/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>

namespace cfgen {

namespace {

std::size_t checked_product(const std::vector<std::size_t>& dims) {
    std::size_t n = 1;
    for (std::size_t d : dims) n *= d;
    return n;
}

} // namespace

Tensor::Tensor(std::vector<std::size_t> dims)
    : dims_(std::move(dims)), data_(checked_product(dims_), 0.0) {}

Tensor::Tensor(std::vector<std::size_t> dims, std::vector<double> data)
    : dims_(std::move(dims)), data_(std::move(data)) {
    if (checked_product(dims_) != data_.size())
        throw std::invalid_argument("Tensor: dims product " +
                                    std::to_string(checked_product(dims_)) +
                                    " != data length " + std::to_string(data_.size()));
    check_finite("Tensor");
}

std::size_t Tensor::rows() const {
    if (rank() != 2) throw std::invalid_argument("Tensor::rows: tensor is not rank-2");
    return dims_[0];
}

std::size_t Tensor::cols() const {
    if (rank() != 2) throw std::invalid_argument("Tensor::cols: tensor is not rank-2");
    return dims_[1];
}

double& Tensor::operator()(std::size_t i, std::size_t j) {
    return data_[i * dims_[1] + j];
}

double Tensor::operator()(std::size_t i, std::size_t j) const {
    return data_[i * dims_[1] + j];
}

std::span<double> Tensor::row(std::size_t i) {
    return std::span<double>(data_.data() + i * dims_[1], dims_[1]);
}

std::span<const double> Tensor::row(std::size_t i) const {
    return std::span<const double>(data_.data() + i * dims_[1], dims_[1]);
}

void Tensor::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

void Tensor::check_finite(const char* what) const {
    for (double x : data_)
        if (!std::isfinite(x))
            throw std::invalid_argument(std::string(what) + ": non-finite entry");
}

std::vector<double> softmax(std::span<const double> v) {
    std::vector<double> out(v.begin(), v.end());
    softmax_inplace(out);
    return out;
}

void softmax_inplace(std::span<double> v) {
    if (v.empty()) throw std::invalid_argument("softmax: empty input");
    const double m = *std::max_element(v.begin(), v.end());
    double sum = 0.0;
    for (double& x : v) {
        x = std::exp(x - m);
        sum += x;
    }
    for (double& x : v) x /= sum;
}

double log_sum_exp(std::span<const double> v) {
    if (v.empty()) throw std::invalid_argument("log_sum_exp: empty input");
    const double m = *std::max_element(v.begin(), v.end());
    double sum = 0.0;
    for (double x : v) sum += std::exp(x - m);
    return m + std::log(sum);
}

std::vector<double> l2_normalize(std::span<const double> v) {
    const double n = l2_norm(v);
    if (n == 0.0) throw std::invalid_argument("l2_normalize: zero-norm vector");
    std::vector<double> out(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) out[i] = v[i] / n;
    return out;
}

double bilinear(std::span<const double> u, const Tensor& W, std::span<const double> w) {
    if (W.rank() != 2 || W.rows() != u.size() || W.cols() != w.size())
        throw std::invalid_argument("bilinear: shape mismatch");
    double acc = 0.0;
    for (std::size_t i = 0; i < u.size(); ++i)
        acc += u[i] * dot(W.row(i), w);
    return acc;
}

double dot(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) throw std::invalid_argument("dot: length mismatch");
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
    return acc;
}

double l2_norm(std::span<const double> v) { return std::sqrt(dot(v, v)); }

void mat_vec(const Tensor& M, std::span<const double> x, std::span<double> out) {
    if (M.rank() != 2 || M.cols() != x.size() || M.rows() != out.size())
        throw std::invalid_argument("mat_vec: shape mismatch");
    for (std::size_t i = 0; i < M.rows(); ++i) out[i] = dot(M.row(i), x);
}

void matT_vec(const Tensor& M, std::span<const double> x, std::span<double> out) {
    if (M.rank() != 2 || M.rows() != x.size() || M.cols() != out.size())
        throw std::invalid_argument("matT_vec: shape mismatch");
    std::fill(out.begin(), out.end(), 0.0);
    for (std::size_t i = 0; i < M.rows(); ++i) {
        const double xi = x[i];
        auto r = M.row(i);
        for (std::size_t j = 0; j < M.cols(); ++j) out[j] += xi * r[j];
    }
}

Tensor mat_mul(const Tensor& A, const Tensor& B) {
    if (A.rank() != 2 || B.rank() != 2 || A.cols() != B.rows())
        throw std::invalid_argument("mat_mul: shape mismatch");
    Tensor C({A.rows(), B.cols()});
    for (std::size_t i = 0; i < A.rows(); ++i) {
        auto a = A.row(i);
        auto c = C.row(i);
        for (std::size_t k = 0; k < A.cols(); ++k) {
            const double aik = a[k];
            auto b = B.row(k);
            for (std::size_t j = 0; j < B.cols(); ++j) c[j] += aik * b[j];
        }
    }
    return C;
}

Tensor mat_mul_bt(const Tensor& A, const Tensor& B) {
    if (A.rank() != 2 || B.rank() != 2 || A.cols() != B.cols())
        throw std::invalid_argument("mat_mul_bt: shape mismatch");
    Tensor C({A.rows(), B.rows()});
    for (std::size_t i = 0; i < A.rows(); ++i)
        for (std::size_t j = 0; j < B.rows(); ++j)
            C(i, j) = dot(A.row(i), B.row(j));
    return C;
}

void add_ab(Tensor& dest, const Tensor& A, const Tensor& B) {
    if (A.cols() != B.rows() || dest.rows() != A.rows() || dest.cols() != B.cols())
        throw std::invalid_argument("add_ab: shape mismatch");
    for (std::size_t i = 0; i < A.rows(); ++i) {
        auto a = A.row(i);
        auto c = dest.row(i);
        for (std::size_t k = 0; k < A.cols(); ++k) {
            const double aik = a[k];
            auto b = B.row(k);
            for (std::size_t j = 0; j < B.cols(); ++j) c[j] += aik * b[j];
        }
    }
}

void add_atb(Tensor& dest, const Tensor& A, const Tensor& B) {
    if (A.rows() != B.rows() || dest.rows() != A.cols() || dest.cols() != B.cols())
        throw std::invalid_argument("add_atb: shape mismatch");
    for (std::size_t k = 0; k < A.rows(); ++k) {
        auto a = A.row(k);
        auto b = B.row(k);
        for (std::size_t i = 0; i < A.cols(); ++i) {
            const double aki = a[i];
            auto c = dest.row(i);
            for (std::size_t j = 0; j < B.cols(); ++j) c[j] += aki * b[j];
        }
    }
}

void add_abt(Tensor& dest, const Tensor& A, const Tensor& B) {
    if (A.cols() != B.cols() || dest.rows() != A.rows() || dest.cols() != B.rows())
        throw std::invalid_argument("add_abt: shape mismatch");
    for (std::size_t i = 0; i < A.rows(); ++i)
        for (std::size_t j = 0; j < B.rows(); ++j)
            dest(i, j) += dot(A.row(i), B.row(j));
}

} // namespace cfgen
