#include "cfgen/fewshot.hpp"

#include "oracles.hpp"

#include <doctest.h>

#include <cmath>

using namespace cfgen;

TEST_CASE("visual semantic feature") {
    Tensor h({3, 2}, {1, 2, 3, 4, 5, 6});

    SUBCASE("one-hot selects a single attribute row") {
        const auto hbar = visual_semantic_feature(h, std::vector<double>{0, 1, 0});
        CHECK(hbar == std::vector<double>{3, 4});
    }
    SUBCASE("zero semantics give the zero vector") {
        const auto hbar = visual_semantic_feature(h, std::vector<double>{0, 0, 0});
        CHECK(hbar == std::vector<double>{0, 0});
    }
    SUBCASE("two active attributes") {
        const double r = 1.0 / std::sqrt(2.0);
        const auto hbar = visual_semantic_feature(h, std::vector<double>{r, r, 0});
        CHECK(hbar[0] == doctest::Approx((1.0 + 3.0) * r).epsilon(1e-12));
        CHECK(hbar[1] == doctest::Approx((2.0 + 4.0) * r).epsilon(1e-12));
    }
    SUBCASE("shape mismatch") {
        CHECK_THROWS_AS(visual_semantic_feature(h, std::vector<double>{1, 0}),
                        std::invalid_argument);
    }
}

TEST_CASE("related_samples_fs shares the nnomp contract") {
    SUBCASE("own visual-semantic vector is recovered exactly") {
        const std::vector<std::vector<double>> atoms{{0.3, 0.1}, {0.5, 0.5}};
        const auto rel = related_samples_fs(std::vector<double>{0.5, 0.5}, atoms, 2);
        REQUIRE(rel.indices.size() == 1);
        CHECK(rel.indices[0] == 1);
        CHECK(rel.gammas[0] == doctest::Approx(1.0).epsilon(1e-10));
        CHECK(rel.residual_norm < 1e-10);
    }
    SUBCASE("orthogonal reconstruction") {
        const std::vector<std::vector<double>> atoms{{2, 0}, {0, 1}};
        const auto rel = related_samples_fs(std::vector<double>{1.0, 0.75}, atoms, 2);
        REQUIRE(rel.indices.size() == 2);
        CHECK(rel.gammas[0] >= 0.0);
        CHECK(rel.gammas[1] >= 0.0);
        CHECK(rel.residual_norm < 1e-10);
    }
    SUBCASE("random instances agree with the brute-force oracle") {
        Rng rng(55);
        for (int trial = 0; trial < 25; ++trial) {
            const std::size_t n = 2 + rng.next_below(4);
            const std::size_t dim = 2 + rng.next_below(3);
            const int k = 1 + static_cast<int>(rng.next_below(3));
            std::vector<std::vector<double>> atoms(n, std::vector<double>(dim));
            std::vector<double> target(dim);
            for (auto& a : atoms)
                for (double& x : a) x = rng.next_gaussian();
            for (double& x : target) x = rng.next_gaussian();
            const auto got = related_samples_fs(target, atoms, k);
            const auto expect = oracle::nnomp_oracle(target, atoms, k);
            CHECK(got.indices == expect.indices);
            for (std::size_t i = 0; i < got.gammas.size(); ++i)
                CHECK(got.gammas[i] ==
                      doctest::Approx(expect.gammas[i]).epsilon(1e-7).scale(1.0));
        }
    }
}

TEST_CASE("few-shot prior uses cosine similarity") {
    RelatedSet rel;
    rel.indices = {0, 1};
    rel.gammas = {1.0, 1.0};

    SUBCASE("beta zero is uniform") {
        const std::vector<std::vector<double>> atoms{{5, 0}, {0, 0.1}};
        const auto prior = prior_probs_fs(rel, atoms, std::vector<double>{1, 1}, 0.0);
        CHECK(prior.probs[0] == 0.5);
        CHECK(prior.probs[1] == 0.5);
    }
    SUBCASE("identical directions are uniform for any beta") {
        // norms differ but cosine is 1 for both
        const std::vector<std::vector<double>> atoms{{2, 0}, {7, 0}};
        const auto prior = prior_probs_fs(rel, atoms, std::vector<double>{3, 0}, 4.0);
        CHECK(prior.probs[0] == doctest::Approx(0.5).epsilon(1e-12));
        CHECK(prior.probs[1] == doctest::Approx(0.5).epsilon(1e-12));
    }
    SUBCASE("cosines 1 and 0 at beta = ln 3") {
        const std::vector<std::vector<double>> atoms{{4, 0}, {0, 9}};
        const auto prior =
            prior_probs_fs(rel, atoms, std::vector<double>{2, 0}, std::log(3.0));
        CHECK(prior.probs[0] == doctest::Approx(0.75).epsilon(1e-12));
        CHECK(prior.probs[1] == doctest::Approx(0.25).epsilon(1e-12));
    }
    SUBCASE("zero-norm visual-semantic features are rejected") {
        const std::vector<std::vector<double>> atoms{{1, 0}, {0, 1}};
        CHECK_THROWS_WITH_AS(prior_probs_fs(rel, atoms, std::vector<double>{0, 0}, 1.0),
                             "prior_probs_fs: degenerate visual-semantic feature",
                             std::invalid_argument);
        const std::vector<std::vector<double>> zero_atom{{0, 0}, {0, 1}};
        CHECK_THROWS_AS(prior_probs_fs(rel, zero_atom, std::vector<double>{1, 0}, 1.0),
                        std::invalid_argument);
    }
}

namespace {

Dataset fs_synth(std::uint64_t seed) {
    SynthConfig cfg;
    cfg.num_seen = 3;
    cfg.num_novel = 2;
    cfg.num_attributes = 6;
    cfg.region_dim = 8;
    cfg.regions_per_image = 4;
    cfg.samples_per_seen_class = 8;
    cfg.attributes_per_class = 2;
    cfg.noise_sigma = 0.05;
    cfg.seed = seed;
    return synth_dataset(cfg);
}

} // namespace

TEST_CASE("with_few_shot_split moves shots out of the test pool") {
    const Dataset ds = fs_synth(2);
    const Dataset fs = with_few_shot_split(ds, 2, 7);
    CHECK(fs.novel_train.size() == 4);   // 2 shots x 2 novel classes
    CHECK(fs.few_shot_budget == 2);
    CHECK(fs.test.size() == ds.test.size() - 4);
    for (int i : fs.novel_train) {
        CHECK(fs.is_novel(fs.labels[static_cast<std::size_t>(i)]));
        for (int t : fs.test) CHECK(t != i);
    }
    // reproducible per seed
    const Dataset fs2 = with_few_shot_split(ds, 2, 7);
    CHECK(fs2.novel_train == fs.novel_train);
    const Dataset fs3 = with_few_shot_split(ds, 2, 8);
    CHECK(fs3.novel_train != fs.novel_train);
}

TEST_CASE("compose_fewshot") {
    const Dataset ds = fs_synth(3);
    TrainConfig cfg;
    cfg.n_att = 10;
    cfg.batch_size = 9;
    cfg.seed = 1;
    const ModelParams params = train_stage1(ds, cfg, false);
    const auto all = ds.all_classes();

    // seen pool: first six seen-train samples
    std::vector<Tensor> dense;
    std::vector<const Tensor*> ptrs;
    std::vector<std::vector<double>> hbars;
    for (int j = 0; j < 6; ++j) {
        const int i = ds.seen_train[static_cast<std::size_t>(j)];
        dense.push_back(dense_feature(ds.features[static_cast<std::size_t>(i)], params));
        hbars.push_back(visual_semantic_feature(
            dense.back(), ds.class_sem.row(static_cast<std::size_t>(ds.labels[static_cast<std::size_t>(i)]))));
    }
    for (const auto& t : dense) ptrs.push_back(&t);

    const int target = ds.novel_classes[0];
    const int target_sample = ds.test.back();
    const Tensor target_dense =
        dense_feature(ds.features[static_cast<std::size_t>(target_sample)], params);
    const auto zt = ds.class_sem.row(static_cast<std::size_t>(target));

    SUBCASE("b=1 with a single related sample returns that sample's feature") {
        TrainConfig c = cfg;
        c.b = 1;
        c.k = 1;
        c.beta = 5.0;
        Rng rng(3);
        const auto comp =
            compose_fewshot(target_dense, zt, target, hbars, ptrs, ds.class_sem, all,
                            params, c, rng);
        REQUIRE(!comp.sources.empty());
        const int src = comp.sources[0];
        for (int s : comp.sources) CHECK(s == src);
        CHECK(comp.dense == dense[static_cast<std::size_t>(src)]);
    }
    SUBCASE("seeded composition is deterministic") {
        TrainConfig c = cfg;
        c.b = 4;
        c.k = 3;
        Rng r1(5);
        Rng r2(5);
        const auto a = compose_fewshot(target_dense, zt, target, hbars, ptrs,
                                       ds.class_sem, all, params, c, r1);
        const auto b = compose_fewshot(target_dense, zt, target, hbars, ptrs,
                                       ds.class_sem, all, params, c, r2);
        CHECK(a.sources == b.sources);
        CHECK(a.dense == b.dense);
        CHECK(a.log_score == b.log_score);
    }
    SUBCASE("beta 0 with k >= |S| composes uniformly over the whole pool") {
        // pursuit would never touch an anti-correlated atom; the random-comp
        // degenerate config must still draw from it
        std::vector<std::vector<double>> anti = hbars;
        for (double& x : anti[0]) x = -x;
        TrainConfig c = cfg;
        c.beta = 0.0;
        c.k = static_cast<int>(anti.size());
        c.b = 64;
        Rng rng(8);
        const auto comp = compose_fewshot(target_dense, zt, target, anti, ptrs,
                                          ds.class_sem, all, params, c, rng);
        (void)comp;
        // with a uniform prior over 6 atoms and 64 * A draws, atom 0 is hit
        // essentially surely; verify through sample_candidates on the same prior
        RelatedSet relall;
        for (std::size_t j = 0; j < anti.size(); ++j)
            relall.indices.push_back(static_cast<int>(j));
        relall.gammas.assign(anti.size(), 0.0);
        const auto prior = prior_probs_fs(relall, anti,
                                          visual_semantic_feature(target_dense, zt), 0.0);
        for (double p : prior.probs)
            CHECK(p == doctest::Approx(1.0 / 6.0).epsilon(1e-12));
        Rng rng2(9);
        const auto cands = sample_candidates(prior, ptrs, 64, rng2);
        bool hit_anti = false;
        for (const auto& cand : cands)
            for (int s : cand.sources)
                if (s == 0) hit_anti = true;
        CHECK(hit_anti);
    }
}

TEST_CASE("few-shot loss weights") {
    // the two novel-term weights always sum to 1/|S_n|
    for (double lam : {0.0, 0.5, 2.0, 7.5}) {
        const double w_real = 1.0 / (1.0 + lam);
        const double w_synth = lam / (1.0 + lam);
        CHECK(w_real + w_synth == doctest::Approx(1.0).epsilon(1e-12));
    }
}

TEST_CASE("train_stage2_fewshot") {
    const Dataset zs = fs_synth(4);
    const Dataset ds = with_few_shot_split(zs, 1, 11);
    TrainConfig cfg;
    cfg.n_att = 10;
    cfg.batch_size = 9;
    cfg.seed = 6;
    const ModelParams stage1 = train_stage1(ds, cfg, false);

    SUBCASE("rejects a dataset without shots") {
        TrainConfig c = cfg;
        c.n_comp = 1;
        CHECK_THROWS_AS(train_stage2_fewshot(zs, stage1, c), std::invalid_argument);
    }
    SUBCASE("lambda = 0 equals the real-features-only objective exactly") {
        TrainConfig c = cfg;
        c.n_comp = 1;
        c.lambda = 0.0;
        double seen_loss = -1.0;
        (void)train_stage2_fewshot(ds, stage1, c, FewShotPrior::VisualSemantic,
                                   [&](const IterStats& s) { seen_loss = s.loss; });

        // replay the first iteration by hand: same batch stream, frozen features
        Rng brng = Rng(c.seed).substream(stream::kBatch).substream(0);
        const auto idx = BatchSampler(ds).sample(c.batch_size, brng);
        std::vector<Tensor> dense;
        dense.reserve(idx.size() + ds.novel_train.size());
        std::vector<FrozenItem> seen_items, real_items;
        for (int i : idx)
            dense.push_back(dense_feature(ds.features[static_cast<std::size_t>(i)], stage1));
        for (std::size_t j = 0; j < idx.size(); ++j)
            seen_items.push_back({&dense[j], ds.labels[static_cast<std::size_t>(idx[j])]});
        for (int i : ds.novel_train) {
            dense.push_back(dense_feature(ds.features[static_cast<std::size_t>(i)], stage1));
            real_items.push_back({&dense.back(), ds.labels[static_cast<std::size_t>(i)]});
        }
        const auto all = ds.all_classes();
        const double expect = ce_loss_frozen(seen_items, ds.class_sem, all, stage1).value +
                              ce_loss_frozen(real_items, ds.class_sem, all, stage1).value;
        CHECK(seen_loss == expect);
    }
    SUBCASE("both prior modes run deterministically") {
        TrainConfig c = cfg;
        c.n_comp = 3;
        c.k = 3;
        c.b = 4;
        const ModelParams a =
            train_stage2_fewshot(ds, stage1, c, FewShotPrior::VisualSemantic);
        const ModelParams b =
            train_stage2_fewshot(ds, stage1, c, FewShotPrior::VisualSemantic);
        CHECK(a.w_e == b.w_e);
        CHECK(a.v == b.v);
        CHECK(a.w_alpha == stage1.w_alpha);
        const ModelParams sem = train_stage2_fewshot(ds, stage1, c, FewShotPrior::Semantic);
        CHECK(sem.w_e.dims() == a.w_e.dims());
    }
}
