#include "cfgen/optim.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <numeric>
#include <stdexcept>

namespace cfgen {

namespace {

using nlohmann::json;

int subset_pos(std::span<const int> subset, int label) {
    for (std::size_t i = 0; i < subset.size(); ++i)
        if (subset[i] == label) return static_cast<int>(i);
    throw std::invalid_argument("loss: batch label not in class subset");
}

// ge = Z_subset^T dscore, the loss gradient w.r.t. the attribute scores
void score_to_attr_grad(const Tensor& Z, std::span<const int> subset,
                        std::span<const double> dscore, std::span<double> ge) {
    std::fill(ge.begin(), ge.end(), 0.0);
    for (std::size_t c = 0; c < subset.size(); ++c) {
        const double dc = dscore[c];
        if (dc == 0.0) continue;
        auto z = Z.row(static_cast<std::size_t>(subset[c]));
        for (std::size_t a = 0; a < ge.size(); ++a) ge[a] += dc * z[a];
    }
}

// dW_e += V^T GH;  dV += GH W_e^T   where GH = sum_i diag(ge_i) H_i
void finish_embedding_grads(const ModelParams& p, const Tensor& gh_sum, Gradients& g) {
    add_atb(g.w_e, p.v, gh_sum);
    add_abt(g.v, gh_sum, p.w_e);
}

// Continue the chain below h^a = sum_r alpha[a,r] f^r into W_alpha and V.
// pf is V W_e F^T (A x R) so that dh_a . f_r = ge[a] * pf[a,r].
void backprop_attention(const Tensor& regions, const ForwardCache& c, const Tensor& pf,
                        std::span<const double> ge, const ModelParams& p, Gradients& g) {
    const std::size_t A = c.alpha.rows();
    const std::size_t R = c.alpha.cols();
    Tensor dlogits({A, R});
    for (std::size_t a = 0; a < A; ++a) {
        const double ga = ge[a];
        auto alpha = c.alpha.row(a);
        auto m = pf.row(a);
        double inner = 0.0;
        for (std::size_t r = 0; r < R; ++r) inner += alpha[r] * ga * m[r];
        auto dl = dlogits.row(a);
        for (std::size_t r = 0; r < R; ++r) dl[r] = alpha[r] * (ga * m[r] - inner);
    }
    Tensor dl_f = mat_mul(dlogits, regions);    // A x d
    add_atb(g.w_alpha, p.v, dl_f);
    add_ab(g.v, dlogits, c.proj);               // A x R times R x dv
}

} // namespace

void TrainConfig::validate() const {
    if (learning_rate < 0 || rmsprop_decay < 0 || rmsprop_eps < 0 || lambda_cal < 0 ||
        lambda < 0 || margin < 0)
        throw std::invalid_argument("TrainConfig: rates must be nonnegative");
    if (batch_size < 1) throw std::invalid_argument("TrainConfig: batchSize must be >= 1");
    if (beta < 0) throw std::invalid_argument("TrainConfig: beta must be >= 0");
    if (k < 1) throw std::invalid_argument("TrainConfig: k must be >= 1");
    if (b < 0) throw std::invalid_argument("TrainConfig: b must be >= 0");
    if (n_att < 0 || n_comp < 0)
        throw std::invalid_argument("TrainConfig: iteration counts must be >= 0");
}

namespace {

TrainConfig parse_train_config(const std::string& json_text) {
    json j;
    try {
        j = json::parse(json_text);
    } catch (const json::exception& e) {
        throw FormatError(std::string("train config: invalid JSON: ") + e.what());
    }
    TrainConfig cfg;
    auto get = [&](const char* key, auto& field) {
        if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
    };
    get("learningRate", cfg.learning_rate);
    get("batchSize", cfg.batch_size);
    get("Natt", cfg.n_att);
    get("Ncomp", cfg.n_comp);
    get("lambdaCal", cfg.lambda_cal);
    get("beta", cfg.beta);
    get("k", cfg.k);
    get("b", cfg.b);
    get("lambda", cfg.lambda);
    get("margin", cfg.margin);
    get("rmspropDecay", cfg.rmsprop_decay);
    get("rmspropEps", cfg.rmsprop_eps);
    get("seed", cfg.seed);
    get("fixedS", cfg.fixed_s);
    cfg.validate();
    return cfg;
}

} // namespace

TrainConfig train_config_from_json(const std::string& json_text) {
    TrainConfig cfg = parse_train_config(json_text);
    if (const char* env = std::getenv("COMPOSER_SEED"))
        cfg.seed = std::strtoull(env, nullptr, 10);
    return cfg;
}

TrainConfig load_train_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw FormatError("train config: cannot open: " + path.string());
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return train_config_from_json(text);
}

std::string train_config_to_json(const TrainConfig& cfg) {
    json j;
    j["learningRate"] = cfg.learning_rate;
    j["batchSize"] = cfg.batch_size;
    j["Natt"] = cfg.n_att;
    j["Ncomp"] = cfg.n_comp;
    j["lambdaCal"] = cfg.lambda_cal;
    j["beta"] = cfg.beta;
    j["k"] = cfg.k;
    j["b"] = cfg.b;
    j["lambda"] = cfg.lambda;
    j["margin"] = cfg.margin;
    j["rmspropDecay"] = cfg.rmsprop_decay;
    j["rmspropEps"] = cfg.rmsprop_eps;
    j["seed"] = cfg.seed;
    j["fixedS"] = cfg.fixed_s;
    return j.dump(2);
}

Gradients Gradients::zeros_like(const ModelParams& p) {
    Gradients g;
    g.w_alpha = Tensor(p.w_alpha.dims());
    g.w_e = Tensor(p.w_e.dims());
    g.v = Tensor(p.v.dims());
    return g;
}

void Gradients::add(const Gradients& other) {
    for (std::size_t i = 0; i < w_alpha.size(); ++i) w_alpha[i] += other.w_alpha[i];
    for (std::size_t i = 0; i < w_e.size(); ++i) w_e[i] += other.w_e[i];
    for (std::size_t i = 0; i < v.size(); ++i) v[i] += other.v[i];
}

void Gradients::scale(double factor) {
    for (double& x : w_alpha.flat()) x *= factor;
    for (double& x : w_e.flat()) x *= factor;
    for (double& x : v.flat()) x *= factor;
}

LossResult ce_loss_stage1(std::span<const Stage1Item> batch, const Tensor& Z,
                          std::span<const int> subset, const ModelParams& params) {
    if (batch.empty()) throw std::invalid_argument("ce_loss: empty batch");
    if (subset.empty()) throw std::invalid_argument("ce_loss: empty class subset");

    LossResult r;
    r.grads = Gradients::zeros_like(params);
    const double w = 1.0 / static_cast<double>(batch.size());
    const std::size_t A = params.attr_count();
    const Tensor vwe = mat_mul(params.v, params.w_e);    // A x d
    Tensor gh_sum({A, params.feature_dim()});
    std::vector<double> ge(A), dscore(subset.size());

    for (const Stage1Item& item : batch) {
        const int ypos = subset_pos(subset, item.label);
        const ForwardCache cache = attention_forward(*item.regions, params);
        const auto s = class_scores(cache.scores, Z, subset);
        const double lse = log_sum_exp(s);
        r.value += w * (lse - s[ypos]);
        for (std::size_t c = 0; c < s.size(); ++c)
            dscore[c] = w * (std::exp(s[c] - lse) - (static_cast<int>(c) == ypos ? 1.0 : 0.0));
        score_to_attr_grad(Z, subset, dscore, ge);
        for (std::size_t a = 0; a < A; ++a) {
            const double ga = ge[a];
            auto h = cache.dense.row(a);
            auto out = gh_sum.row(a);
            for (std::size_t j = 0; j < h.size(); ++j) out[j] += ga * h[j];
        }
        const Tensor pf = mat_mul_bt(vwe, *item.regions);   // A x R
        backprop_attention(*item.regions, cache, pf, ge, params, r.grads);
    }
    finish_embedding_grads(params, gh_sum, r.grads);
    return r;
}

LossResult ce_loss_frozen(std::span<const FrozenItem> batch, const Tensor& Z,
                          std::span<const int> subset, const ModelParams& params) {
    if (batch.empty()) throw std::invalid_argument("ce_loss: empty batch");
    if (subset.empty()) throw std::invalid_argument("ce_loss: empty class subset");

    LossResult r;
    r.grads = Gradients::zeros_like(params);
    const double w = 1.0 / static_cast<double>(batch.size());
    const std::size_t A = params.attr_count();
    Tensor gh_sum({A, params.feature_dim()});
    std::vector<double> ge(A), dscore(subset.size());

    for (const FrozenItem& item : batch) {
        const int ypos = subset_pos(subset, item.label);
        const auto e = attribute_scores(*item.dense, params);
        const auto s = class_scores(e, Z, subset);
        const double lse = log_sum_exp(s);
        r.value += w * (lse - s[ypos]);
        for (std::size_t c = 0; c < s.size(); ++c)
            dscore[c] = w * (std::exp(s[c] - lse) - (static_cast<int>(c) == ypos ? 1.0 : 0.0));
        score_to_attr_grad(Z, subset, dscore, ge);
        for (std::size_t a = 0; a < A; ++a) {
            const double ga = ge[a];
            auto h = item.dense->row(a);
            auto out = gh_sum.row(a);
            for (std::size_t j = 0; j < h.size(); ++j) out[j] += ga * h[j];
        }
    }
    finish_embedding_grads(params, gh_sum, r.grads);
    return r;
}

LossResult calibration_loss(std::span<const Stage1Item> batch, const Tensor& Z,
                            std::span<const int> all_classes,
                            std::span<const int> novel_classes,
                            const ModelParams& params, double lambda_cal) {
    if (batch.empty()) throw std::invalid_argument("calibration_loss: empty batch");
    if (novel_classes.empty())
        throw std::invalid_argument("calibration_loss: no novel classes");
    LossResult r;
    r.grads = Gradients::zeros_like(params);
    if (lambda_cal == 0.0) return r;

    std::vector<bool> is_novel(all_classes.size(), false);
    for (std::size_t c = 0; c < all_classes.size(); ++c)
        for (int n : novel_classes)
            if (all_classes[c] == n) is_novel[c] = true;

    const double w = lambda_cal / static_cast<double>(batch.size());
    const std::size_t A = params.attr_count();
    const Tensor vwe = mat_mul(params.v, params.w_e);
    Tensor gh_sum({A, params.feature_dim()});
    std::vector<double> ge(A), dscore(all_classes.size()), novel_scores;

    for (const Stage1Item& item : batch) {
        const ForwardCache cache = attention_forward(*item.regions, params);
        const auto s = class_scores(cache.scores, Z, all_classes);
        const double lse_all = log_sum_exp(s);
        novel_scores.clear();
        for (std::size_t c = 0; c < s.size(); ++c)
            if (is_novel[c]) novel_scores.push_back(s[c]);
        const double lse_novel = log_sum_exp(novel_scores);
        // -log sum_{n} p(n|.) = lse_all - lse_novel, safe against underflow
        r.value += w * (lse_all - lse_novel);
        for (std::size_t c = 0; c < s.size(); ++c) {
            const double p_all = std::exp(s[c] - lse_all);
            const double p_novel = is_novel[c] ? std::exp(s[c] - lse_novel) : 0.0;
            dscore[c] = w * (p_all - p_novel);
        }
        score_to_attr_grad(Z, all_classes, dscore, ge);
        for (std::size_t a = 0; a < A; ++a) {
            const double ga = ge[a];
            auto h = cache.dense.row(a);
            auto out = gh_sum.row(a);
            for (std::size_t j = 0; j < h.size(); ++j) out[j] += ga * h[j];
        }
        const Tensor pf = mat_mul_bt(vwe, *item.regions);
        backprop_attention(*item.regions, cache, pf, ge, params, r.grads);
    }
    finish_embedding_grads(params, gh_sum, r.grads);
    return r;
}

OptState OptState::zeros_like(const ModelParams& p) {
    OptState s;
    s.s_w_alpha = Tensor(p.w_alpha.dims());
    s.s_w_e = Tensor(p.w_e.dims());
    s.s_v = Tensor(p.v.dims());
    return s;
}

namespace {

void rmsprop_tensor(Tensor& theta, const Tensor& g, Tensor& s, const TrainConfig& cfg) {
    const double rho = cfg.rmsprop_decay;
    for (std::size_t i = 0; i < theta.size(); ++i) {
        s[i] = rho * s[i] + (1.0 - rho) * g[i] * g[i];
        theta[i] -= cfg.learning_rate * g[i] / (std::sqrt(s[i]) + cfg.rmsprop_eps);
    }
}

} // namespace

void rmsprop_step(ModelParams& params, const Gradients& grads, OptState& state,
                  const TrainConfig& cfg) {
    rmsprop_tensor(params.w_alpha, grads.w_alpha, state.s_w_alpha, cfg);
    rmsprop_tensor(params.w_e, grads.w_e, state.s_w_e, cfg);
    rmsprop_tensor(params.v, grads.v, state.s_v, cfg);
    ++state.iteration;
}

BatchSampler::BatchSampler(const Dataset& ds) {
    std::vector<std::vector<int>> by_class(ds.num_classes());
    for (int i : ds.seen_train) by_class[static_cast<std::size_t>(ds.labels[i])].push_back(i);
    for (auto& v : by_class)
        if (!v.empty()) per_class_.push_back(std::move(v));
    if (per_class_.empty())
        throw std::invalid_argument("BatchSampler: no seen training samples");
}

std::vector<int> BatchSampler::sample(int batch_size, Rng& rng) const {
    const std::size_t ncls = per_class_.size();
    const std::size_t take = std::min<std::size_t>(static_cast<std::size_t>(batch_size), ncls);
    std::vector<std::size_t> order(ncls);
    std::iota(order.begin(), order.end(), std::size_t{0});
    for (std::size_t i = 0; i < take; ++i) {
        const std::size_t j = i + rng.next_below(ncls - i);
        std::swap(order[i], order[j]);
    }
    const int per = batch_size / static_cast<int>(take);
    const int rem = batch_size % static_cast<int>(take);
    std::vector<int> out;
    out.reserve(static_cast<std::size_t>(batch_size));
    for (std::size_t i = 0; i < take; ++i) {
        const auto& pool = per_class_[order[i]];
        const int count = per + (static_cast<int>(i) < rem ? 1 : 0);
        for (int c = 0; c < count; ++c)
            out.push_back(pool[rng.next_below(pool.size())]);
    }
    return out;
}

ModelParams train_stage1(const Dataset& ds, const TrainConfig& cfg, bool use_calibration,
                         const IterCallback& cb) {
    cfg.validate();
    if (ds.seen_train.empty())
        throw std::invalid_argument("train_stage1: dataset has no seen training samples");

    const Rng root(cfg.seed);
    Rng init_rng = root.substream(stream::kInit);
    ModelParams params = init_params(ds.attr_sem, ds.region_dim(), init_rng);
    OptState state = OptState::zeros_like(params);
    const BatchSampler sampler(ds);
    const Rng batch_root = root.substream(stream::kBatch);
    const auto all = ds.all_classes();

    std::vector<Stage1Item> items;
    for (int t = 0; t < cfg.n_att; ++t) {
        Rng brng = batch_root.substream(static_cast<std::uint64_t>(t));
        const auto idx = sampler.sample(cfg.batch_size, brng);
        items.clear();
        for (int i : idx) items.push_back({&ds.features[static_cast<std::size_t>(i)], ds.labels[static_cast<std::size_t>(i)]});

        // the softmax runs over all classes, the inference-time candidate set
        LossResult r = ce_loss_stage1(items, ds.class_sem, all, params);
        if (use_calibration && cfg.lambda_cal > 0.0) {
            LossResult c = calibration_loss(items, ds.class_sem, all, ds.novel_classes,
                                            params, cfg.lambda_cal);
            r.value += c.value;
            r.grads.add(c.grads);
        }
        rmsprop_step(params, r.grads, state, cfg);
        if (cb) cb({t, r.value, 0.0, 0.0});
    }
    return params;
}

double grad_check(const std::function<double(const ModelParams&)>& loss_fn,
                  const ModelParams& at, const Gradients& analytic, int probe_count,
                  double h, Rng& rng) {
    if (h <= 0) throw std::invalid_argument("grad_check: h must be positive");
    if (probe_count < 1) throw std::invalid_argument("grad_check: probeCount must be >= 1");

    ModelParams work = at;
    Tensor* tensors[3] = {&work.w_alpha, &work.w_e, &work.v};
    const Tensor* grads[3] = {&analytic.w_alpha, &analytic.w_e, &analytic.v};
    const std::size_t sizes[3] = {work.w_alpha.size(), work.w_e.size(), work.v.size()};
    const std::size_t total = sizes[0] + sizes[1] + sizes[2];

    double max_rel = 0.0;
    for (int p = 0; p < probe_count; ++p) {
        std::size_t flat = rng.next_below(total);
        int ti = 0;
        while (flat >= sizes[ti]) {
            flat -= sizes[ti];
            ++ti;
        }
        Tensor& t = *tensors[ti];
        const double orig = t[flat];
        t[flat] = orig + h;
        const double fp = loss_fn(work);
        t[flat] = orig - h;
        const double fm = loss_fn(work);
        t[flat] = orig;
        const double numeric = (fp - fm) / (2.0 * h);
        const double analytic_v = (*grads[ti])[flat];
        const double denom = std::max({std::abs(numeric), std::abs(analytic_v), 1e-6});
        max_rel = std::max(max_rel, std::abs(numeric - analytic_v) / denom);
    }
    return max_rel;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw FormatError("checkpoint: cannot open for writing: " + path.string());
    store_tensor(ckpt.params.w_alpha, out);
    store_tensor(ckpt.params.w_e, out);
    store_tensor(ckpt.params.v, out);
    if (!out) throw FormatError("checkpoint: write failed: " + path.string());

    json side;
    side["iteration"] = ckpt.iteration;
    side["stage"] = ckpt.stage;
    side["seed"] = ckpt.config.seed;
    side["config"] = json::parse(train_config_to_json(ckpt.config));
    std::ofstream js(path.string() + ".json");
    if (!js) throw FormatError("checkpoint: cannot write sidecar: " + path.string() + ".json");
    js << side.dump(2) << "\n";
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("checkpoint: cannot open: " + path.string());
    Checkpoint ckpt;
    ckpt.params.w_alpha = load_tensor(in);
    ckpt.params.w_e = load_tensor(in);
    ckpt.params.v = load_tensor(in);

    std::ifstream js(path.string() + ".json");
    if (!js) throw FormatError("checkpoint: missing sidecar: " + path.string() + ".json");
    json side;
    try {
        js >> side;
    } catch (const json::exception& e) {
        throw FormatError(std::string("checkpoint: invalid sidecar JSON: ") + e.what());
    }
    if (side.contains("iteration")) ckpt.iteration = side.at("iteration").get<long>();
    if (side.contains("stage")) ckpt.stage = side.at("stage").get<int>();
    if (side.contains("config"))
        ckpt.config = parse_train_config(side.at("config").dump());
    return ckpt;
}

} // namespace cfgen
