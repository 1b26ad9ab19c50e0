#pragma once

#include "cfgen/composer.hpp"

namespace cfgen {

// hbar = sum_a z[a] H[a,:], the class-strength-weighted sum of attribute
// features; conditions few-shot composition on visual evidence.
std::vector<double> visual_semantic_feature(const Tensor& dense,
                                            std::span<const double> class_sem);

// NN-OMP with visual-semantic vectors as target and atoms.
RelatedSet related_samples_fs(std::span<const double> hbar_target,
                              std::span<const std::vector<double>> hbar_atoms, int k);

// probs_i proportional to exp(beta cos(hbar_i, hbar_target)) on the related
// set. hbar norms vary, so similarities are explicitly cosine-normalized;
// a zero-norm visual-semantic feature is rejected.
CompositionPrior prior_probs_fs(const RelatedSet& related,
                                std::span<const std::vector<double>> hbar_atoms,
                                std::span<const double> hbar_target, double beta);

// Compose a feature for one novel training sample: related samples and prior
// from visual-semantic similarity, b candidates, argmax of
// log p(y_j|H, z_j) + log p(H | hbar_j).
ComposedFeature compose_fewshot(const Tensor& dense_target,
                                std::span<const double> class_sem_target,
                                int target_class,
                                std::span<const std::vector<double>> hbar_atoms,
                                std::span<const Tensor* const> dense_features,
                                const Tensor& Z, std::span<const int> all_classes,
                                const ModelParams& params, const TrainConfig& cfg,
                                Rng& rng);

enum class FewShotPrior {
    VisualSemantic,   // condition on hbar (the full few-shot method)
    Semantic,         // condition on z only (the semantic-composer ablation)
};

// Stage-2 few-shot trainer: per iteration draws a seen batch S and the novel
// shots S_n, composes one feature per shot from S, and minimizes
//   mean_S ce + 1/(1+lambda) mean_Sn ce(real) + lambda/(1+lambda) mean_Sn ce(composed)
// over W_e and V with dense features frozen.
ModelParams train_stage2_fewshot(const Dataset& ds, ModelParams params,
                                 const TrainConfig& cfg,
                                 FewShotPrior prior_mode = FewShotPrior::VisualSemantic,
                                 const IterCallback& cb = {});

// Derive a few-shot dataset: `shots` samples per novel class move from the
// test split (or are drawn from an existing novelTrain pool) into novelTrain.
Dataset with_few_shot_split(const Dataset& ds, int shots, std::uint64_t seed);

} // namespace cfgen
