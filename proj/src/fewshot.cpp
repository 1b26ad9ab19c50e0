#include "cfgen/fewshot.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <stdexcept>

namespace cfgen {

std::vector<double> visual_semantic_feature(const Tensor& dense,
                                            std::span<const double> class_sem) {
    if (dense.rank() != 2 || dense.rows() != class_sem.size())
        throw std::invalid_argument("visual_semantic_feature: shape mismatch");
    std::vector<double> hbar(dense.cols(), 0.0);
    for (std::size_t a = 0; a < dense.rows(); ++a) {
        const double za = class_sem[a];
        if (za == 0.0) continue;
        auto row = dense.row(a);
        for (std::size_t j = 0; j < hbar.size(); ++j) hbar[j] += za * row[j];
    }
    return hbar;
}

RelatedSet related_samples_fs(std::span<const double> hbar_target,
                              std::span<const std::vector<double>> hbar_atoms, int k) {
    return nnomp(hbar_target, hbar_atoms, k);
}

CompositionPrior prior_probs_fs(const RelatedSet& related,
                                std::span<const std::vector<double>> hbar_atoms,
                                std::span<const double> hbar_target, double beta) {
    if (related.indices.empty())
        throw std::invalid_argument("prior_probs_fs: empty related set");
    if (beta < 0) throw std::invalid_argument("prior_probs_fs: beta must be >= 0");
    const double tnorm = l2_norm(hbar_target);
    if (tnorm == 0.0)
        throw std::invalid_argument("prior_probs_fs: degenerate visual-semantic feature");

    CompositionPrior prior;
    prior.related = related;
    prior.beta = beta;
    std::vector<double> logits(related.indices.size());
    for (std::size_t i = 0; i < logits.size(); ++i) {
        const auto& hb = hbar_atoms[static_cast<std::size_t>(related.indices[i])];
        const double anorm = l2_norm(hb);
        if (anorm == 0.0)
            throw std::invalid_argument("prior_probs_fs: degenerate visual-semantic feature");
        logits[i] = beta * dot(hb, hbar_target) / (anorm * tnorm);
    }
    softmax_inplace(logits);
    prior.probs = std::move(logits);
    return prior;
}

ComposedFeature compose_fewshot(const Tensor& dense_target,
                                std::span<const double> class_sem_target,
                                int target_class,
                                std::span<const std::vector<double>> hbar_atoms,
                                std::span<const Tensor* const> dense_features,
                                const Tensor& Z, std::span<const int> all_classes,
                                const ModelParams& params, const TrainConfig& cfg,
                                Rng& rng) {
    const auto hbar = visual_semantic_feature(dense_target, class_sem_target);
    RelatedSet rel;
    if (cfg.beta == 0.0 && cfg.k >= static_cast<int>(hbar_atoms.size())) {
        for (std::size_t j = 0; j < hbar_atoms.size(); ++j)
            rel.indices.push_back(static_cast<int>(j));
        rel.gammas.assign(hbar_atoms.size(), 0.0);
        rel.residual_norm = l2_norm(hbar);
    } else {
        rel = related_samples_fs(hbar, hbar_atoms, cfg.k);
    }
    rel = related_or_fallback(std::move(rel), hbar_atoms, hbar);
    const auto prior = prior_probs_fs(rel, hbar_atoms, hbar, cfg.beta);
    auto cands = sample_candidates(prior, dense_features, cfg.b, rng);
    return select_composition(std::move(cands), target_class, Z, all_classes, params);
}

ModelParams train_stage2_fewshot(const Dataset& ds, ModelParams params,
                                 const TrainConfig& cfg, FewShotPrior prior_mode,
                                 const IterCallback& cb) {
    cfg.validate();
    if (ds.novel_train.empty())
        throw std::invalid_argument("train_stage2_fewshot: no novel shots, use zero-shot trainer");
    if (cfg.b < 1)
        throw std::invalid_argument("train_stage2_fewshot: b must be >= 1");
    if (ds.few_shot_budget > 0) {
        std::vector<int> count(ds.num_classes(), 0);
        for (int i : ds.novel_train) ++count[static_cast<std::size_t>(ds.labels[i])];
        for (int c : count)
            if (c > ds.few_shot_budget)
                throw std::invalid_argument(
                    "train_stage2_fewshot: novel class exceeds few-shot budget");
    }

    const BatchSampler sampler(ds);
    const Rng root(cfg.seed);
    const Rng batch_root = root.substream(stream::kBatch);
    const Rng compose_root = root.substream(stream::kCompose);
    OptState state = OptState::zeros_like(params);
    const auto all = ds.all_classes();
    const Tensor& Z = ds.class_sem;
    const double lam = cfg.lambda;

    std::vector<int> fixed_idx;
    if (cfg.fixed_s) {
        Rng brng = batch_root.substream(0);
        fixed_idx = sampler.sample(cfg.batch_size, brng);
    }

    for (int t = 0; t < cfg.n_comp; ++t) {
        std::vector<int> idx;
        if (cfg.fixed_s) {
            idx = fixed_idx;
        } else {
            Rng brng = batch_root.substream(static_cast<std::uint64_t>(t));
            idx = sampler.sample(cfg.batch_size, brng);
        }

        std::vector<Tensor> dense;
        dense.reserve(idx.size());
        std::vector<const Tensor*> dense_ptrs;
        std::vector<FrozenItem> seen_items;
        for (int i : idx)
            dense.push_back(dense_feature(ds.features[static_cast<std::size_t>(i)], params));
        for (std::size_t j = 0; j < idx.size(); ++j) {
            dense_ptrs.push_back(&dense[j]);
            seen_items.push_back({&dense[j], ds.labels[static_cast<std::size_t>(idx[j])]});
        }

        // building blocks come from seen samples only; shots are targets
        std::vector<std::vector<double>> atoms;
        atoms.reserve(idx.size());
        if (prior_mode == FewShotPrior::VisualSemantic) {
            for (std::size_t j = 0; j < idx.size(); ++j) {
                const auto z = Z.row(static_cast<std::size_t>(ds.labels[static_cast<std::size_t>(idx[j])]));
                atoms.push_back(visual_semantic_feature(dense[j], z));
            }
        } else {
            for (std::size_t j = 0; j < idx.size(); ++j) {
                const auto z = Z.row(static_cast<std::size_t>(ds.labels[static_cast<std::size_t>(idx[j])]));
                atoms.emplace_back(z.begin(), z.end());
            }
        }

        std::vector<Tensor> novel_dense;
        novel_dense.reserve(ds.novel_train.size());
        std::vector<FrozenItem> real_items;
        for (int j : ds.novel_train) {
            novel_dense.push_back(dense_feature(ds.features[static_cast<std::size_t>(j)], params));
            real_items.push_back({&novel_dense.back(), ds.labels[static_cast<std::size_t>(j)]});
        }

        const Rng iter_compose = compose_root.substream(static_cast<std::uint64_t>(t));
        std::vector<ComposedFeature> composed;
        std::vector<FrozenItem> composed_items;
        double sum_logscore = 0.0;
        if (lam > 0.0) {
            composed.reserve(ds.novel_train.size());
            for (std::size_t s = 0; s < ds.novel_train.size(); ++s) {
                const int j = ds.novel_train[s];
                const int yj = ds.labels[static_cast<std::size_t>(j)];
                const auto zj = Z.row(static_cast<std::size_t>(yj));
                Rng crng = iter_compose.substream(static_cast<std::uint64_t>(j));
                if (prior_mode == FewShotPrior::VisualSemantic) {
                    composed.push_back(compose_fewshot(novel_dense[s], zj, yj, atoms,
                                                       dense_ptrs, Z, all, params, cfg, crng));
                } else {
                    RelatedSet rel;
                    if (cfg.beta == 0.0 && cfg.k >= static_cast<int>(idx.size())) {
                        for (std::size_t p = 0; p < idx.size(); ++p)
                            rel.indices.push_back(static_cast<int>(p));
                        rel.gammas.assign(idx.size(), 0.0);
                        rel.residual_norm = l2_norm(zj);
                    } else {
                        rel = nnomp(zj, atoms, cfg.k);
                    }
                    rel = related_or_fallback(std::move(rel), atoms, zj);
                    const auto prior = prior_probs(rel, atoms, zj, cfg.beta);
                    auto cands = sample_candidates(prior, dense_ptrs, cfg.b, crng);
                    composed.push_back(select_composition(std::move(cands), yj, Z, all, params));
                }
                sum_logscore += composed.back().log_score;
            }
            for (std::size_t s = 0; s < composed.size(); ++s)
                composed_items.push_back(
                    {&composed[s].dense, ds.labels[static_cast<std::size_t>(ds.novel_train[s])]});
        }

        LossResult total = ce_loss_frozen(seen_items, Z, all, params);
        LossResult real_loss = ce_loss_frozen(real_items, Z, all, params);
        real_loss.grads.scale(1.0 / (1.0 + lam));
        real_loss.value /= (1.0 + lam);
        total.value += real_loss.value;
        total.grads.add(real_loss.grads);
        double comp_value = 0.0;
        if (lam > 0.0) {
            LossResult comp_loss = ce_loss_frozen(composed_items, Z, all, params);
            comp_value = comp_loss.value;
            comp_loss.grads.scale(lam / (1.0 + lam));
            total.value += lam / (1.0 + lam) * comp_loss.value;
            total.grads.add(comp_loss.grads);
        }
        rmsprop_step(params, total.grads, state, cfg);
        if (cb)
            cb({t, total.value, comp_value,
                composed.empty() ? 0.0 : sum_logscore / static_cast<double>(composed.size())});
    }
    return params;
}

Dataset with_few_shot_split(const Dataset& ds, int shots, std::uint64_t seed) {
    if (shots < 1) throw std::invalid_argument("with_few_shot_split: shots must be >= 1");
    Dataset out = ds;
    Rng rng = Rng(seed).substream(stream::kShots);

    std::vector<std::vector<int>> pool(ds.num_classes());
    const bool from_pool = !ds.novel_train.empty();
    if (from_pool) {
        for (int i : ds.novel_train) pool[static_cast<std::size_t>(ds.labels[i])].push_back(i);
    } else {
        for (int i : ds.test)
            if (ds.is_novel(ds.labels[static_cast<std::size_t>(i)]))
                pool[static_cast<std::size_t>(ds.labels[static_cast<std::size_t>(i)])].push_back(i);
    }

    std::set<int> chosen;
    out.novel_train.clear();
    for (int c : ds.novel_classes) {
        auto& candidates = pool[static_cast<std::size_t>(c)];
        const int need = shots;
        if (static_cast<int>(candidates.size()) < need + (from_pool ? 0 : 1))
            throw std::invalid_argument(
                "with_few_shot_split: not enough novel samples for requested shots");
        for (int s = 0; s < need; ++s) {
            const std::size_t j = s + rng.next_below(candidates.size() - s);
            std::swap(candidates[s], candidates[j]);
            out.novel_train.push_back(candidates[s]);
            chosen.insert(candidates[s]);
        }
    }
    if (!from_pool) {
        std::vector<int> new_test;
        for (int i : ds.test)
            if (!chosen.count(i)) new_test.push_back(i);
        out.test = std::move(new_test);
    }
    out.few_shot_budget = shots;
    out.validate();
    return out;
}

} // namespace cfgen
