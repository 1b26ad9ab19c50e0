#pragma once

#include "cfgen/rng.hpp"
#include "cfgen/tensor.hpp"

#include <span>
#include <vector>

namespace cfgen {

// Trainable state: attention compatibility W_alpha, attribute embedding W_e,
// and the attribute semantic matrix V (grounded during training).
struct ModelParams {
    Tensor w_alpha;   // dv x d
    Tensor w_e;       // dv x d
    Tensor v;         // A x dv

    std::size_t attr_count() const { return v.rows(); }
    std::size_t semantic_dim() const { return v.cols(); }
    std::size_t feature_dim() const { return w_alpha.cols(); }
};

// Entries of W_alpha and W_e i.i.d. uniform in [-1/sqrt(d), 1/sqrt(d)];
// V copied from the dataset's attribute semantics.
ModelParams init_params(const Tensor& attr_sem, std::size_t feature_dim, Rng& rng);

// Row a = softmax over regions of v_a^T W_alpha f^r.  F is R x d; result A x R.
Tensor attention_weights(const Tensor& regions, const ModelParams& params);

// h^a = sum_r weights[a,r] f^r.  Result A x d.
Tensor attribute_features(const Tensor& regions, const Tensor& weights);

// e_a = v_a^T W_e h^a; negative values mark absent attributes.
std::vector<double> attribute_scores(const Tensor& dense, const ModelParams& params);

// s = sum_a e_a z_c^a
double class_score(std::span<const double> scores, std::span<const double> class_sem);

// Raw class scores for a class subset (rows of Z).
std::vector<double> class_scores(std::span<const double> attr_scores, const Tensor& Z,
                                 std::span<const int> subset);

// Softmax over {s(H, z_c) : c in subset}.
std::vector<double> class_probabilities(const Tensor& dense, const Tensor& Z,
                                        const ModelParams& params,
                                        std::span<const int> subset);

// Full forward pass for one image, caching what the backward pass needs.
struct ForwardCache {
    Tensor proj;      // R x dv,  rows W_alpha f^r
    Tensor logits;    // A x R
    Tensor alpha;     // A x R attention weights
    Tensor dense;     // A x d attribute features
    std::vector<double> scores;   // A attribute scores
};

ForwardCache attention_forward(const Tensor& regions, const ModelParams& params);

// Dense feature only (used where the cache is not needed).
Tensor dense_feature(const Tensor& regions, const ModelParams& params);

} // namespace cfgen
