#include "cfgen/attention.hpp"
#include "cfgen/rng.hpp"

#include <doctest.h>

#include <algorithm>
#include <cmath>

using namespace cfgen;

namespace {

ModelParams random_params(std::size_t A, std::size_t d, std::size_t dv, Rng& rng) {
    ModelParams p;
    p.w_alpha = Tensor({dv, d});
    p.w_e = Tensor({dv, d});
    p.v = Tensor({A, dv});
    for (double& x : p.w_alpha.flat()) x = rng.next_gaussian();
    for (double& x : p.w_e.flat()) x = rng.next_gaussian();
    for (double& x : p.v.flat()) x = rng.next_gaussian();
    return p;
}

Tensor random_regions(std::size_t R, std::size_t d, Rng& rng) {
    Tensor f({R, d});
    for (double& x : f.flat()) x = rng.next_gaussian();
    return f;
}

} // namespace

TEST_CASE("attention weights: constant logits give uniform rows") {
    Rng rng(1);
    ModelParams p = random_params(3, 4, 2, rng);
    p.w_alpha.fill(0.0);
    const Tensor f = random_regions(5, 4, rng);
    const Tensor w = attention_weights(f, p);
    for (std::size_t a = 0; a < 3; ++a)
        for (std::size_t r = 0; r < 5; ++r)
            CHECK(w(a, r) == doctest::Approx(0.2).epsilon(1e-12));
}

TEST_CASE("attention weights: closed form logits") {
    // dv = d = 1, v = [1], W_alpha = [1]: logits equal the region scalars
    ModelParams p;
    p.w_alpha = Tensor({1, 1}, {1.0});
    p.w_e = Tensor({1, 1}, {1.0});
    p.v = Tensor({1, 1}, {1.0});
    const Tensor f({2, 1}, {std::log(3.0), 0.0});
    const Tensor w = attention_weights(f, p);
    CHECK(w(0, 0) == doctest::Approx(0.75).epsilon(1e-12));
    CHECK(w(0, 1) == doctest::Approx(0.25).epsilon(1e-12));
}

TEST_CASE("attention weights match a scalar-loop reference") {
    Rng rng(0);
    const std::size_t A = 3, R = 4, d = 2, dv = 2;
    const ModelParams p = random_params(A, d, dv, rng);
    const Tensor f = random_regions(R, d, rng);
    const Tensor w = attention_weights(f, p);

    for (std::size_t a = 0; a < A; ++a) {
        // naive: logit[r] = sum_{i,j} v[a][i] W[i][j] f[r][j], then softmax
        std::vector<double> logits(R, 0.0);
        for (std::size_t r = 0; r < R; ++r)
            for (std::size_t i = 0; i < dv; ++i)
                for (std::size_t j = 0; j < d; ++j)
                    logits[r] += p.v(a, i) * p.w_alpha(i, j) * f(r, j);
        double denom = 0.0;
        const double m = *std::max_element(logits.begin(), logits.end());
        for (double l : logits) denom += std::exp(l - m);
        double row_sum = 0.0;
        for (std::size_t r = 0; r < R; ++r) {
            CHECK(w(a, r) == doctest::Approx(std::exp(logits[r] - m) / denom).epsilon(1e-10));
            row_sum += w(a, r);
        }
        CHECK(std::fabs(row_sum - 1.0) < 1e-10);
    }
    CHECK_THROWS_AS(attention_weights(Tensor({0, 2}), p), std::invalid_argument);
}

TEST_CASE("attribute features") {
    Rng rng(2);
    const Tensor f = random_regions(4, 3, rng);

    Tensor onehot({2, 4});
    onehot(0, 2) = 1.0;
    onehot(1, 2) = 1.0;
    Tensor h = attribute_features(f, onehot);
    for (std::size_t j = 0; j < 3; ++j) {
        CHECK(h(0, j) == f(2, j));
        CHECK(h(1, j) == f(2, j));
    }

    Tensor uniform({1, 4});
    uniform.fill(0.25);
    h = attribute_features(f, uniform);
    for (std::size_t j = 0; j < 3; ++j) {
        double mean = 0.0;
        for (std::size_t r = 0; r < 4; ++r) mean += f(r, j) / 4.0;
        CHECK(h(0, j) == doctest::Approx(mean).epsilon(1e-12));
    }

    // seeded random weights vs scalar loop
    Tensor w({2, 4});
    for (double& x : w.flat()) x = rng.next_double();
    h = attribute_features(f, w);
    for (std::size_t a = 0; a < 2; ++a)
        for (std::size_t j = 0; j < 3; ++j) {
            double acc = 0.0;
            for (std::size_t r = 0; r < 4; ++r) acc += w(a, r) * f(r, j);
            CHECK(h(a, j) == doctest::Approx(acc).epsilon(1e-12));
        }
}

TEST_CASE("attribute scores") {
    Rng rng(3);
    ModelParams p = random_params(2, 2, 2, rng);

    p.w_e.fill(0.0);
    Tensor h({2, 2}, {1, 0, 0, 1});
    auto e = attribute_scores(h, p);
    CHECK(e[0] == 0.0);
    CHECK(e[1] == 0.0);

    // W_e = I, v_a = h^a = [1,0] -> score 1
    p.w_e = Tensor({2, 2}, {1, 0, 0, 1});
    p.v = Tensor({2, 2}, {1, 0, 1, 0});
    h = Tensor({2, 2}, {1, 0, 1, 0});
    e = attribute_scores(h, p);
    CHECK(e[0] == doctest::Approx(1.0).epsilon(1e-12));

    // bilinear reference per attribute
    const ModelParams q = random_params(3, 4, 2, rng);
    Tensor hr({3, 4});
    for (double& x : hr.flat()) x = rng.next_gaussian();
    e = attribute_scores(hr, q);
    for (std::size_t a = 0; a < 3; ++a)
        CHECK(e[a] == doctest::Approx(bilinear(q.v.row(a), q.w_e, hr.row(a))).epsilon(1e-10));
}

TEST_CASE("class score") {
    CHECK(class_score(std::vector<double>{1, 2}, std::vector<double>{0, 1}) == 2.0);
    const double r = 1.0 / std::sqrt(2.0);
    CHECK(class_score(std::vector<double>{1, 1}, std::vector<double>{r, r}) ==
          doctest::Approx(std::sqrt(2.0)).epsilon(1e-12));

    Rng rng(0);
    std::vector<double> e(312), z(312);
    for (double& x : e) x = rng.next_gaussian();
    for (double& x : z) x = rng.next_double();
    double expected = 0.0;
    for (std::size_t i = 0; i < e.size(); ++i) expected += e[i] * z[i];
    CHECK(class_score(e, z) == doctest::Approx(expected).epsilon(1e-12));

    // linear in e
    std::vector<double> e2(e);
    for (double& x : e2) x *= -2.5;
    CHECK(class_score(e2, z) == doctest::Approx(-2.5 * expected).epsilon(1e-12));
}

TEST_CASE("class probabilities") {
    // A = 1, scalar pipeline: e = H[0][0]
    ModelParams p;
    p.w_alpha = Tensor({1, 1}, {1.0});
    p.w_e = Tensor({1, 1}, {1.0});
    p.v = Tensor({1, 1}, {1.0});
    const Tensor h({1, 1}, {std::log(3.0)});
    const Tensor Z({2, 1}, {1.0, 0.0});

    const std::vector<int> one{0};
    auto probs = class_probabilities(h, Z, p, one);
    CHECK(probs[0] == 1.0);

    const std::vector<int> both{0, 1};
    probs = class_probabilities(h, Z, p, both);
    CHECK(probs[0] == doctest::Approx(0.75).epsilon(1e-12));
    CHECK(probs[1] == doctest::Approx(0.25).epsilon(1e-12));

    const Tensor same({1, 1}, {0.0});
    probs = class_probabilities(same, Z, p, both);
    CHECK(probs[0] == doctest::Approx(0.5).epsilon(1e-12));

    CHECK_THROWS_AS(class_probabilities(h, Z, p, std::vector<int>{}), std::invalid_argument);
}

TEST_CASE("attention convexity and permutation invariance") {
    Rng rng(4);
    const std::size_t A = 4, R = 5, d = 3;
    const ModelParams p = random_params(A, d, 3, rng);
    const Tensor f = random_regions(R, d, rng);
    const ForwardCache c = attention_forward(f, p);

    for (std::size_t a = 0; a < A; ++a)
        for (std::size_t j = 0; j < d; ++j) {
            double lo = f(0, j), hi = f(0, j);
            for (std::size_t r = 1; r < R; ++r) {
                lo = std::min(lo, f(r, j));
                hi = std::max(hi, f(r, j));
            }
            CHECK(c.dense(a, j) >= lo - 1e-12);
            CHECK(c.dense(a, j) <= hi + 1e-12);
        }

    // permute regions: dense features and scores unchanged
    Tensor perm({R, d});
    const std::size_t order[5] = {3, 1, 4, 0, 2};
    for (std::size_t r = 0; r < R; ++r)
        std::copy(f.row(order[r]).begin(), f.row(order[r]).end(), perm.row(r).begin());
    const ForwardCache cp = attention_forward(perm, p);
    for (std::size_t i = 0; i < c.dense.size(); ++i)
        CHECK(cp.dense[i] == doctest::Approx(c.dense[i]).epsilon(1e-12));
    for (std::size_t a = 0; a < A; ++a)
        CHECK(cp.scores[a] == doctest::Approx(c.scores[a]).epsilon(1e-12));
}

TEST_CASE("probability argmax equals raw score argmax") {
    Rng rng(5);
    const ModelParams p = random_params(3, 4, 3, rng);
    const Tensor f = random_regions(4, 4, rng);
    Tensor Z({4, 3});
    for (double& x : Z.flat()) x = rng.next_double();
    const std::vector<int> subset{0, 1, 2, 3};

    const ForwardCache c = attention_forward(f, p);
    const auto raw = class_scores(c.scores, Z, subset);
    const auto probs = class_probabilities(c.dense, Z, p, subset);
    const auto raw_arg = std::max_element(raw.begin(), raw.end()) - raw.begin();
    const auto prob_arg = std::max_element(probs.begin(), probs.end()) - probs.begin();
    CHECK(raw_arg == prob_arg);
}
