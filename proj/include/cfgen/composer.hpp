#pragma once

#include "cfgen/dataio.hpp"
#include "cfgen/optim.hpp"

#include <span>
#include <vector>

namespace cfgen {

// Result of nonnegative orthogonal matching pursuit: at most k distinct atom
// indices in selection order, their nonnegative weights, and the final
// residual norm.
struct RelatedSet {
    std::vector<int> indices;
    std::vector<double> gammas;
    double residual_norm = 0.0;

    bool contains(int idx) const;
};

// Lawson-Hanson nonnegative least squares: min ||sum_j x_j atom_j - target||,
// x >= 0. Atoms share target's dimension.
std::vector<double> nnls(std::span<const std::vector<double>> atoms,
                         std::span<const double> target);

// Greedy NN-OMP: repeatedly add the atom with the largest positive correlation
// to the residual, re-solve NNLS on the active set, prune zero coefficients,
// and stop at k atoms, no positive correlation, or residual improvement below
// 1e-8 (the non-improving step is reverted). Correlation ties break toward the
// lowest atom index.
RelatedSet nnomp(std::span<const double> target,
                 std::span<const std::vector<double>> dictionary, int k);

// When pursuit selects nothing, fall back to the single atom with the highest
// cosine similarity to the target (lowest index on ties).
RelatedSet related_or_fallback(RelatedSet rel,
                               std::span<const std::vector<double>> dictionary,
                               std::span<const double> target);

struct CompositionPrior {
    RelatedSet related;
    std::vector<double> probs;    // aligned with related.indices, sums to 1
    double beta = 0.0;
};

// probs_i = exp(beta <sem_i, target>) / sum over the related set; zero mass
// elsewhere. beta = 0 gives the uniform prior.
CompositionPrior prior_probs(const RelatedSet& related,
                             std::span<const std::vector<double>> sample_sem,
                             std::span<const double> target_sem, double beta);

struct ComposedFeature {
    Tensor dense;                // A x d, row a copied from source sample i_a
    std::vector<int> sources;    // per attribute: dictionary index i_a
    double log_prior = 0.0;      // sum_a log probs[i_a]
    double log_score = 0.0;      // log p(n|H,z_n) + log p(H|z_n), set by selection
};

// Draw b candidates; every attribute row is sampled i.i.d. from the prior.
std::vector<ComposedFeature> sample_candidates(const CompositionPrior& prior,
                                               std::span<const Tensor* const> dense_features,
                                               int b, Rng& rng);

// argmax over candidates of log p(target|H, z) + log p(H|.), softmax over
// all_classes; ties resolve to the lowest candidate index.
ComposedFeature select_composition(std::vector<ComposedFeature> candidates,
                                   int target_class, const Tensor& Z,
                                   std::span<const int> all_classes,
                                   const ModelParams& params);

// Algorithm stage 2, zero-shot: every iteration draws a seen minibatch S,
// extracts frozen dense features, composes one feature per novel class
// (NN-OMP over the batch class semantics -> tempered prior -> b candidates ->
// argmax), and updates W_e and V on seen + composed cross-entropy.
ModelParams train_stage2_zeroshot(const Dataset& ds, ModelParams params,
                                  const TrainConfig& cfg, const IterCallback& cb = {});

} // namespace cfgen
