#include "cfgen/composer.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace cfgen {

namespace {

constexpr double kCorrTol = 1e-12;     // minimum correlation to count as positive
constexpr double kImproveTol = 1e-8;   // minimum residual-norm improvement per step

// Gaussian elimination with partial pivoting on a small dense system.
std::vector<double> solve_linear(std::vector<std::vector<double>> m, std::vector<double> rhs) {
    const std::size_t n = rhs.size();
    for (std::size_t col = 0; col < n; ++col) {
        std::size_t pivot = col;
        for (std::size_t r = col + 1; r < n; ++r)
            if (std::abs(m[r][col]) > std::abs(m[pivot][col])) pivot = r;
        if (std::abs(m[pivot][col]) < 1e-12)
            throw std::runtime_error("nnls: singular normal equations");
        std::swap(m[col], m[pivot]);
        std::swap(rhs[col], rhs[pivot]);
        for (std::size_t r = col + 1; r < n; ++r) {
            const double f = m[r][col] / m[col][col];
            if (f == 0.0) continue;
            for (std::size_t c = col; c < n; ++c) m[r][c] -= f * m[col][c];
            rhs[r] -= f * rhs[col];
        }
    }
    std::vector<double> x(n);
    for (std::size_t i = n; i-- > 0;) {
        double acc = rhs[i];
        for (std::size_t j = i + 1; j < n; ++j) acc -= m[i][j] * x[j];
        x[i] = acc / m[i][i];
    }
    return x;
}

// Unconstrained least squares on the passive columns via normal equations.
std::vector<double> ls_on_subset(std::span<const std::vector<double>> atoms,
                                 std::span<const double> target,
                                 const std::vector<std::size_t>& subset) {
    const std::size_t n = subset.size();
    std::vector<std::vector<double>> gram(n, std::vector<double>(n));
    std::vector<double> rhs(n);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = i; j < n; ++j) {
            const double g = dot(atoms[subset[i]], atoms[subset[j]]);
            gram[i][j] = g;
            gram[j][i] = g;
        }
        rhs[i] = dot(atoms[subset[i]], target);
    }
    return solve_linear(std::move(gram), std::move(rhs));
}

} // namespace

bool RelatedSet::contains(int idx) const {
    return std::find(indices.begin(), indices.end(), idx) != indices.end();
}

std::vector<double> nnls(std::span<const std::vector<double>> atoms,
                         std::span<const double> target) {
    const std::size_t n = atoms.size();
    for (const auto& a : atoms)
        if (a.size() != target.size())
            throw std::invalid_argument("nnls: dimension mismatch");

    std::vector<double> x(n, 0.0);
    std::vector<bool> passive(n, false);
    std::vector<double> residual(target.begin(), target.end());

    const std::size_t max_outer = 3 * n + 30;
    for (std::size_t outer = 0; outer < max_outer; ++outer) {
        // most positive gradient among active (zero) coordinates
        int best = -1;
        double best_w = kCorrTol;
        for (std::size_t j = 0; j < n; ++j) {
            if (passive[j]) continue;
            const double w = dot(atoms[j], residual);
            if (w > best_w) {
                best_w = w;
                best = static_cast<int>(j);
            }
        }
        if (best < 0) break;
        passive[static_cast<std::size_t>(best)] = true;

        while (true) {
            std::vector<std::size_t> subset;
            for (std::size_t j = 0; j < n; ++j)
                if (passive[j]) subset.push_back(j);
            const auto z = ls_on_subset(atoms, target, subset);
            const double zmin = *std::min_element(z.begin(), z.end());
            if (zmin > 0.0) {
                std::fill(x.begin(), x.end(), 0.0);
                for (std::size_t i = 0; i < subset.size(); ++i) x[subset[i]] = z[i];
                break;
            }
            // step toward z until the first coordinate hits zero, then drop it
            double alpha = std::numeric_limits<double>::infinity();
            for (std::size_t i = 0; i < subset.size(); ++i) {
                if (z[i] > 0.0) continue;
                const double xj = x[subset[i]];
                const double denom = xj - z[i];
                if (denom > 0.0) alpha = std::min(alpha, xj / denom);
            }
            if (!std::isfinite(alpha)) alpha = 0.0;
            for (std::size_t i = 0; i < subset.size(); ++i) {
                const std::size_t j = subset[i];
                x[j] += alpha * (z[i] - x[j]);
                if (x[j] <= 1e-14) {
                    x[j] = 0.0;
                    passive[j] = false;
                }
            }
        }
        for (std::size_t i = 0; i < residual.size(); ++i) residual[i] = target[i];
        for (std::size_t j = 0; j < n; ++j) {
            if (x[j] == 0.0) continue;
            const auto& a = atoms[j];
            for (std::size_t i = 0; i < residual.size(); ++i) residual[i] -= x[j] * a[i];
        }
    }
    return x;
}

RelatedSet nnomp(std::span<const double> target,
                 std::span<const std::vector<double>> dictionary, int k) {
    if (k < 1) throw std::invalid_argument("nnomp: k must be >= 1");
    if (dictionary.empty()) throw std::invalid_argument("nnomp: empty dictionary");
    for (const auto& a : dictionary)
        if (a.size() != target.size())
            throw std::invalid_argument("nnomp: dimension mismatch");

    RelatedSet rel;
    std::vector<double> residual(target.begin(), target.end());
    rel.residual_norm = l2_norm(residual);

    for (int iter = 0; iter < 10000; ++iter) {
        if (static_cast<int>(rel.indices.size()) >= k) break;
        int best = -1;
        double best_corr = kCorrTol;
        for (std::size_t j = 0; j < dictionary.size(); ++j) {
            if (rel.contains(static_cast<int>(j))) continue;
            const double c = dot(dictionary[j], residual);
            if (c > best_corr) {
                best_corr = c;
                best = static_cast<int>(j);
            }
        }
        if (best < 0) break;

        std::vector<int> cand = rel.indices;
        cand.push_back(best);
        std::vector<std::vector<double>> atoms;
        atoms.reserve(cand.size());
        for (int idx : cand) atoms.push_back(dictionary[static_cast<std::size_t>(idx)]);
        const auto gamma = nnls(atoms, target);

        std::vector<int> kept;
        std::vector<double> kept_gamma;
        for (std::size_t i = 0; i < cand.size(); ++i) {
            if (gamma[i] > 0.0) {
                kept.push_back(cand[i]);
                kept_gamma.push_back(gamma[i]);
            }
        }
        std::vector<double> res(target.begin(), target.end());
        for (std::size_t i = 0; i < kept.size(); ++i) {
            const auto& a = dictionary[static_cast<std::size_t>(kept[i])];
            for (std::size_t c = 0; c < res.size(); ++c) res[c] -= kept_gamma[i] * a[c];
        }
        const double new_norm = l2_norm(res);
        if (rel.residual_norm - new_norm < kImproveTol) break;   // revert this step
        rel.indices = std::move(kept);
        rel.gammas = std::move(kept_gamma);
        residual = std::move(res);
        rel.residual_norm = new_norm;
    }
    return rel;
}

RelatedSet related_or_fallback(RelatedSet rel,
                               std::span<const std::vector<double>> dictionary,
                               std::span<const double> target) {
    if (!rel.indices.empty()) return rel;
    const double tnorm = l2_norm(target);
    int best = -1;
    double best_cos = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < dictionary.size(); ++j) {
        const double anorm = l2_norm(dictionary[j]);
        if (anorm == 0.0 || tnorm == 0.0) continue;
        const double c = dot(dictionary[j], target) / (anorm * tnorm);
        if (c > best_cos) {
            best_cos = c;
            best = static_cast<int>(j);
        }
    }
    if (best < 0)
        throw std::invalid_argument("related_or_fallback: no usable atom");
    const auto& a = dictionary[static_cast<std::size_t>(best)];
    const double aa = dot(a, a);
    const double gamma = std::max(0.0, dot(a, target) / aa);
    std::vector<double> res(target.begin(), target.end());
    for (std::size_t c = 0; c < res.size(); ++c) res[c] -= gamma * a[c];
    rel.indices = {best};
    rel.gammas = {gamma};
    rel.residual_norm = l2_norm(res);
    return rel;
}

CompositionPrior prior_probs(const RelatedSet& related,
                             std::span<const std::vector<double>> sample_sem,
                             std::span<const double> target_sem, double beta) {
    if (related.indices.empty())
        throw std::invalid_argument("prior_probs: empty related set");
    if (beta < 0) throw std::invalid_argument("prior_probs: beta must be >= 0");
    CompositionPrior prior;
    prior.related = related;
    prior.beta = beta;
    std::vector<double> logits(related.indices.size());
    for (std::size_t i = 0; i < logits.size(); ++i) {
        const auto& sem = sample_sem[static_cast<std::size_t>(related.indices[i])];
        logits[i] = beta * dot(sem, target_sem);
    }
    softmax_inplace(logits);
    prior.probs = std::move(logits);
    return prior;
}

std::vector<ComposedFeature> sample_candidates(const CompositionPrior& prior,
                                               std::span<const Tensor* const> dense_features,
                                               int b, Rng& rng) {
    if (b < 1) throw std::invalid_argument("sample_candidates: b must be >= 1");
    if (prior.related.indices.empty())
        throw std::invalid_argument("sample_candidates: empty prior support");
    const Tensor& first = *dense_features[static_cast<std::size_t>(prior.related.indices[0])];
    const std::size_t A = first.rows();
    const std::size_t d = first.cols();

    std::vector<ComposedFeature> out;
    out.reserve(static_cast<std::size_t>(b));
    for (int c = 0; c < b; ++c) {
        ComposedFeature f;
        f.dense = Tensor({A, d});
        f.sources.resize(A);
        for (std::size_t a = 0; a < A; ++a) {
            const double u = rng.next_double();
            std::size_t pick = prior.probs.size() - 1;
            double acc = 0.0;
            for (std::size_t i = 0; i < prior.probs.size(); ++i) {
                acc += prior.probs[i];
                if (u < acc) {
                    pick = i;
                    break;
                }
            }
            const int src = prior.related.indices[pick];
            f.sources[a] = src;
            auto row = dense_features[static_cast<std::size_t>(src)]->row(a);
            std::copy(row.begin(), row.end(), f.dense.row(a).begin());
            f.log_prior += std::log(prior.probs[pick]);
        }
        out.push_back(std::move(f));
    }
    return out;
}

ComposedFeature select_composition(std::vector<ComposedFeature> candidates,
                                   int target_class, const Tensor& Z,
                                   std::span<const int> all_classes,
                                   const ModelParams& params) {
    if (candidates.empty())
        throw std::invalid_argument("select_composition: empty candidate list");
    int target_pos = -1;
    for (std::size_t i = 0; i < all_classes.size(); ++i)
        if (all_classes[i] == target_class) target_pos = static_cast<int>(i);
    if (target_pos < 0)
        throw std::invalid_argument("select_composition: target class not in class set");

    const Tensor vwe = mat_mul(params.v, params.w_e);   // A x d
    const std::size_t A = vwe.rows();
    std::vector<double> e(A);
    std::size_t best = 0;
    double best_score = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < candidates.size(); ++c) {
        ComposedFeature& cand = candidates[c];
        for (std::size_t a = 0; a < A; ++a) e[a] = dot(vwe.row(a), cand.dense.row(a));
        const auto s = class_scores(e, Z, all_classes);
        const double lse = log_sum_exp(s);
        cand.log_score = (s[static_cast<std::size_t>(target_pos)] - lse) + cand.log_prior;
        if (cand.log_score > best_score) {
            best_score = cand.log_score;
            best = c;
        }
    }
    return std::move(candidates[best]);
}

ModelParams train_stage2_zeroshot(const Dataset& ds, ModelParams params,
                                  const TrainConfig& cfg, const IterCallback& cb) {
    cfg.validate();
    if (ds.novel_classes.empty())
        throw std::invalid_argument("train_stage2: no novel classes to compose");
    if (cfg.b < 1)
        throw std::invalid_argument("train_stage2: b must be >= 1");

    const BatchSampler sampler(ds);
    const Rng root(cfg.seed);
    const Rng batch_root = root.substream(stream::kBatch);
    const Rng compose_root = root.substream(stream::kCompose);
    OptState state = OptState::zeros_like(params);
    const auto all = ds.all_classes();
    const Tensor& Z = ds.class_sem;

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

        // frozen dense features of the batch under the current parameters
        std::vector<Tensor> dense;
        dense.reserve(idx.size());
        std::vector<std::vector<double>> zatoms;
        zatoms.reserve(idx.size());
        std::vector<const Tensor*> dense_ptrs;
        std::vector<FrozenItem> seen_items;
        for (int i : idx) {
            dense.push_back(dense_feature(ds.features[static_cast<std::size_t>(i)], params));
            const auto z = Z.row(static_cast<std::size_t>(ds.labels[static_cast<std::size_t>(i)]));
            zatoms.emplace_back(z.begin(), z.end());
        }
        for (std::size_t j = 0; j < idx.size(); ++j) {
            dense_ptrs.push_back(&dense[j]);
            seen_items.push_back({&dense[j], ds.labels[static_cast<std::size_t>(idx[j])]});
        }

        const Rng iter_compose = compose_root.substream(static_cast<std::uint64_t>(t));
        std::vector<ComposedFeature> composed;
        composed.reserve(ds.novel_classes.size());
        double sum_logscore = 0.0;
        for (int n : ds.novel_classes) {
            Rng crng = iter_compose.substream(static_cast<std::uint64_t>(n));
            const auto zn = Z.row(static_cast<std::size_t>(n));
            RelatedSet rel;
            if (cfg.beta == 0.0 && cfg.k >= static_cast<int>(idx.size())) {
                // uniform random composition over the whole batch
                for (std::size_t j = 0; j < idx.size(); ++j)
                    rel.indices.push_back(static_cast<int>(j));
                rel.gammas.assign(idx.size(), 0.0);
                rel.residual_norm = l2_norm(zn);
            } else {
                rel = nnomp(zn, zatoms, cfg.k);
            }
            rel = related_or_fallback(std::move(rel), zatoms, zn);
            const auto prior = prior_probs(rel, zatoms, zn, cfg.beta);
            auto cands = sample_candidates(prior, dense_ptrs, cfg.b, crng);
            composed.push_back(select_composition(std::move(cands), n, Z, all, params));
            sum_logscore += composed.back().log_score;
        }

        std::vector<FrozenItem> composed_items;
        for (std::size_t j = 0; j < composed.size(); ++j)
            composed_items.push_back({&composed[j].dense, ds.novel_classes[j]});

        LossResult seen_loss = ce_loss_frozen(seen_items, Z, all, params);
        const LossResult comp_loss = ce_loss_frozen(composed_items, Z, all, params);
        seen_loss.grads.add(comp_loss.grads);
        rmsprop_step(params, seen_loss.grads, state, cfg);
        if (cb)
            cb({t, seen_loss.value, comp_loss.value,
                sum_logscore / static_cast<double>(composed.size())});
    }
    return params;
}

} // namespace cfgen
