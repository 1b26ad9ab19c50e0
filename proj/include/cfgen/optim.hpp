#pragma once

#include "cfgen/attention.hpp"
#include "cfgen/dataio.hpp"
#include "cfgen/rng.hpp"

#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

namespace cfgen {

struct TrainConfig {
    double learning_rate = 1e-4;
    int batch_size = 50;
    int n_att = 2000;
    int n_comp = 4000;
    double lambda_cal = 0.1;
    double beta = 5.0;           // composition prior temperature
    int k = 5;                   // related-sample budget
    int b = 50;                  // candidate combinations per composition
    double lambda = 0.5;         // few-shot real/synthetic tradeoff
    double margin = 1.0;         // calibrated stacking margin
    double rmsprop_decay = 0.99;
    double rmsprop_eps = 1e-8;
    std::uint64_t seed = 0;
    bool fixed_s = false;        // ablation: reuse the first sample set S forever

    void validate() const;
};

// Keys mirror the field names above (learningRate, batchSize, Natt, Ncomp,
// lambdaCal, beta, k, b, lambda, margin, rmspropDecay, rmspropEps, seed,
// fixedS). COMPOSER_SEED in the environment overrides seed.
TrainConfig train_config_from_json(const std::string& json_text);
TrainConfig load_train_config(const std::filesystem::path& path);
std::string train_config_to_json(const TrainConfig& cfg);

struct Gradients {
    Tensor w_alpha, w_e, v;

    static Gradients zeros_like(const ModelParams& p);
    void add(const Gradients& other);
    void scale(double factor);
};

struct LossResult {
    double value = 0.0;
    Gradients grads;
};

// One training sample entering through the full attention graph.
struct Stage1Item {
    const Tensor* regions;    // R x d
    int label;
};

// One sample whose dense feature is a frozen constant (stage 2).
struct FrozenItem {
    const Tensor* dense;      // A x d
    int label;
};

// Mean cross-entropy -1/|B| sum log p(y_i | H_i, z_{y_i}) over `subset`,
// with gradients for W_alpha, W_e, V through attention.
LossResult ce_loss_stage1(std::span<const Stage1Item> batch, const Tensor& Z,
                          std::span<const int> subset, const ModelParams& params);

// Same loss with H frozen; gradients for W_e and V only.
LossResult ce_loss_frozen(std::span<const FrozenItem> batch, const Tensor& Z,
                          std::span<const int> subset, const ModelParams& params);

// Self-calibration term: mean of -lambda_cal log sum_{n in novel} p(n | H_i, z_n)
// under the softmax over `all_classes`. Gradients through the full graph.
LossResult calibration_loss(std::span<const Stage1Item> batch, const Tensor& Z,
                            std::span<const int> all_classes,
                            std::span<const int> novel_classes,
                            const ModelParams& params, double lambda_cal);

struct OptState {
    Tensor s_w_alpha, s_w_e, s_v;   // running mean-square accumulators
    long iteration = 0;

    static OptState zeros_like(const ModelParams& p);
};

// s <- rho s + (1-rho) g^2;  theta <- theta - lr g / (sqrt(s) + eps)
void rmsprop_step(ModelParams& params, const Gradients& grads, OptState& state,
                  const TrainConfig& cfg);

// Equal-per-class minibatches over the seen training split: min(batch, #classes)
// distinct classes drawn uniformly, floor(batch/classes) samples per class with
// replacement, remainder round-robin over the drawn classes.
class BatchSampler {
public:
    explicit BatchSampler(const Dataset& ds);
    std::vector<int> sample(int batch_size, Rng& rng) const;

private:
    std::vector<std::vector<int>> per_class_;   // seen-train indices per class
};

struct IterStats {
    int iteration = 0;
    double loss = 0.0;
    double compose_loss = 0.0;        // stage-2 trainers only
    double mean_selected_logscore = 0.0;
};
using IterCallback = std::function<void(const IterStats&)>;

// rng substream layout shared by all trainers: the run seed fans out into one
// stream per purpose, then per iteration, then per novel target, so results
// do not depend on evaluation order.
namespace stream {
constexpr std::uint64_t kInit = 0;     // parameter initialization
constexpr std::uint64_t kBatch = 1;    // minibatch sampling, per iteration
constexpr std::uint64_t kCompose = 2;  // composition, per iteration per target
constexpr std::uint64_t kShots = 3;    // few-shot sample draws
} // namespace stream

// Algorithm stage 1: minibatch cross-entropy over seen classes (optionally plus
// the self-calibration term) for up to n_att iterations.
ModelParams train_stage1(const Dataset& ds, const TrainConfig& cfg,
                         bool use_calibration, const IterCallback& cb = {});

// Max relative error between analytic gradient entries and central differences
// (f(th+h) - f(th-h)) / 2h over a random probe set.
double grad_check(const std::function<double(const ModelParams&)>& loss_fn,
                  const ModelParams& at, const Gradients& analytic, int probe_count,
                  double h, Rng& rng);

// Checkpoint: W_alpha, W_e, V as consecutive CFGF tensors, plus a JSON sidecar
// at <path>.json with iteration, stage, seed, and the config.
struct Checkpoint {
    ModelParams params;
    TrainConfig config;
    long iteration = 0;
    int stage = 1;
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

} // namespace cfgen
