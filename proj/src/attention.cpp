#include "cfgen/attention.hpp"

#include <cmath>
#include <stdexcept>

namespace cfgen {

ModelParams init_params(const Tensor& attr_sem, std::size_t feature_dim, Rng& rng) {
    const std::size_t dv = attr_sem.cols();
    const double scale = 1.0 / std::sqrt(static_cast<double>(feature_dim));
    ModelParams p;
    p.w_alpha = Tensor({dv, feature_dim});
    p.w_e = Tensor({dv, feature_dim});
    for (double& x : p.w_alpha.flat()) x = (2.0 * rng.next_double() - 1.0) * scale;
    for (double& x : p.w_e.flat()) x = (2.0 * rng.next_double() - 1.0) * scale;
    p.v = attr_sem;
    return p;
}

ForwardCache attention_forward(const Tensor& regions, const ModelParams& params) {
    if (regions.rank() != 2 || regions.cols() != params.feature_dim())
        throw std::invalid_argument("attention_forward: region shape mismatch");
    if (regions.rows() == 0)
        throw std::invalid_argument("attention_forward: image has no regions");

    ForwardCache c;
    c.proj = mat_mul_bt(regions, params.w_alpha);     // R x dv
    c.logits = mat_mul_bt(params.v, c.proj);          // A x R
    c.alpha = c.logits;
    for (std::size_t a = 0; a < c.alpha.rows(); ++a) softmax_inplace(c.alpha.row(a));
    c.dense = mat_mul(c.alpha, regions);              // A x d
    c.scores = attribute_scores(c.dense, params);
    return c;
}

Tensor attention_weights(const Tensor& regions, const ModelParams& params) {
    if (regions.rank() != 2 || regions.cols() != params.feature_dim())
        throw std::invalid_argument("attention_weights: shape mismatch");
    if (regions.rows() == 0)
        throw std::invalid_argument("attention_weights: image has no regions");
    Tensor proj = mat_mul_bt(regions, params.w_alpha);
    Tensor logits = mat_mul_bt(params.v, proj);
    for (std::size_t a = 0; a < logits.rows(); ++a) softmax_inplace(logits.row(a));
    return logits;
}

Tensor attribute_features(const Tensor& regions, const Tensor& weights) {
    if (weights.rank() != 2 || regions.rank() != 2 || weights.cols() != regions.rows())
        throw std::invalid_argument("attribute_features: shape mismatch");
    return mat_mul(weights, regions);
}

std::vector<double> attribute_scores(const Tensor& dense, const ModelParams& params) {
    if (dense.rank() != 2 || dense.rows() != params.attr_count() ||
        dense.cols() != params.feature_dim())
        throw std::invalid_argument("attribute_scores: shape mismatch");
    const std::size_t A = dense.rows();
    std::vector<double> e(A);
    std::vector<double> tmp(params.semantic_dim());
    for (std::size_t a = 0; a < A; ++a) {
        mat_vec(params.w_e, dense.row(a), tmp);       // W_e h^a
        e[a] = dot(params.v.row(a), tmp);
    }
    return e;
}

double class_score(std::span<const double> scores, std::span<const double> class_sem) {
    return dot(scores, class_sem);
}

std::vector<double> class_scores(std::span<const double> attr_scores, const Tensor& Z,
                                 std::span<const int> subset) {
    std::vector<double> s(subset.size());
    for (std::size_t i = 0; i < subset.size(); ++i)
        s[i] = dot(attr_scores, Z.row(static_cast<std::size_t>(subset[i])));
    return s;
}

std::vector<double> class_probabilities(const Tensor& dense, const Tensor& Z,
                                        const ModelParams& params,
                                        std::span<const int> subset) {
    if (subset.empty())
        throw std::invalid_argument("class_probabilities: empty class subset");
    const auto e = attribute_scores(dense, params);
    auto s = class_scores(e, Z, subset);
    softmax_inplace(s);
    return s;
}

Tensor dense_feature(const Tensor& regions, const ModelParams& params) {
    return attribute_features(regions, attention_weights(regions, params));
}

} // namespace cfgen
