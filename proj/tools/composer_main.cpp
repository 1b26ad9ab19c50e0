// Command-line surface: synthetic data generation, the two-stage trainer,
// few-shot runs, evaluation, gradient checking, and attention inspection.

#include "cfgen/composer.hpp"
#include "cfgen/fewshot.hpp"
#include "cfgen/metrics.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>

namespace {

using namespace cfgen;
using nlohmann::json;

std::string slurp(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw FormatError("cannot open: " + path);
    return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

TrainConfig config_or_default(const std::string& path) {
    if (path.empty()) {
        TrainConfig cfg;
        if (const char* env = std::getenv("COMPOSER_SEED"))
            cfg.seed = std::strtoull(env, nullptr, 10);
        return cfg;
    }
    return train_config_from_json(slurp(path));
}

void print_iter(const IterStats& s) {
    json j;
    j["iteration"] = s.iteration;
    j["seenLoss"] = s.loss;
    j["composeLoss"] = s.compose_loss;
    j["meanSelectedLogScore"] = s.mean_selected_logscore;
    std::cout << j.dump() << "\n";
}

int cmd_synth(const std::string& config_path, const std::string& out_dir) {
    const SynthConfig cfg = synth_config_from_json(slurp(config_path));
    const Dataset ds = synth_dataset(cfg);
    store_dataset(ds, out_dir);
    std::cout << "wrote " << ds.num_samples() << " samples, "
              << ds.seen_classes.size() << " seen / " << ds.novel_classes.size()
              << " novel classes to " << out_dir << "\n";
    return 0;
}

int cmd_train_attention(const std::string& data, const std::string& config_path,
                        bool calibration, const std::string& out) {
    const Dataset ds = load_manifest(data);
    const TrainConfig cfg = config_or_default(config_path);
    const ModelParams params =
        train_stage1(ds, cfg, calibration, [](const IterStats& s) {
            if (s.iteration % 100 == 0) {
                json j;
                j["iteration"] = s.iteration;
                j["loss"] = s.loss;
                std::cout << j.dump() << "\n";
            }
        });
    save_checkpoint(out, {params, cfg, cfg.n_att, 1});
    std::cout << "saved stage-1 checkpoint to " << out << "\n";
    return 0;
}

int cmd_train_compose(const std::string& data, const std::string& ckpt_path,
                      const std::string& config_path, const std::string& out) {
    const Dataset ds = load_manifest(data);
    const TrainConfig cfg = config_or_default(config_path);
    const Checkpoint ckpt = load_checkpoint(ckpt_path);
    const ModelParams params = train_stage2_zeroshot(ds, ckpt.params, cfg, print_iter);
    save_checkpoint(out, {params, cfg, cfg.n_comp, 2});
    std::cout << "saved stage-2 checkpoint to " << out << "\n";
    return 0;
}

int cmd_train_fewshot(const std::string& data, const std::string& ckpt_path, int shots,
                      double lambda, int runs, const std::string& out_dir,
                      const std::string& config_path, const std::string& prior_name,
                      double margin) {
    const Dataset base = load_manifest(data);
    TrainConfig cfg = config_or_default(config_path);
    cfg.lambda = lambda;
    cfg.margin = margin;
    const FewShotPrior prior = prior_name == "semantic" ? FewShotPrior::Semantic
                                                        : FewShotPrior::VisualSemantic;
    const Checkpoint ckpt = load_checkpoint(ckpt_path);
    std::filesystem::create_directories(out_dir);

    json aggregate;
    double sum_nn = 0.0, sum_h = 0.0, sum_s = 0.0, sum_n = 0.0;
    for (int r = 0; r < runs; ++r) {
        TrainConfig run_cfg = cfg;
        run_cfg.seed = Rng(cfg.seed).substream(1000 + static_cast<std::uint64_t>(r)).next_u64();
        const Dataset ds = with_few_shot_split(base, shots, run_cfg.seed);
        const ModelParams params = train_stage2_fewshot(ds, ckpt.params, run_cfg, prior);
        const Metrics nn = evaluate(ds, params, EvalSetting::NovelOnly);
        const Metrics g = evaluate(ds, params, EvalSetting::Generalized, {cfg.margin, false});
        json run;
        run["run"] = r;
        run["seed"] = run_cfg.seed;
        run["accNovelOnly"] = nn.acc_novel_only;
        run["accSeen"] = g.acc_seen;
        run["accNovel"] = g.acc_novel;
        run["harmonicMean"] = g.harmonic;
        std::ofstream(std::filesystem::path(out_dir) /
                      ("run_" + std::to_string(r) + ".json"))
            << run.dump(2) << "\n";
        aggregate["runs"].push_back(run);
        sum_nn += nn.acc_novel_only;
        sum_s += g.acc_seen;
        sum_n += g.acc_novel;
        sum_h += g.harmonic;
    }
    aggregate["shots"] = shots;
    aggregate["lambda"] = lambda;
    aggregate["prior"] = prior_name;
    aggregate["meanAccNovelOnly"] = sum_nn / runs;
    aggregate["meanAccSeen"] = sum_s / runs;
    aggregate["meanAccNovel"] = sum_n / runs;
    aggregate["meanHarmonicMean"] = sum_h / runs;
    std::ofstream(std::filesystem::path(out_dir) / "aggregate.json")
        << aggregate.dump(2) << "\n";
    std::cout << aggregate.dump(2) << "\n";
    return 0;
}

int cmd_eval(const std::string& data, const std::string& ckpt_path,
             const std::string& setting, double margin, bool micro,
             const std::string& report) {
    const Dataset ds = load_manifest(data);
    const Checkpoint ckpt = load_checkpoint(ckpt_path);
    const EvalSetting s =
        setting == "novel" ? EvalSetting::NovelOnly : EvalSetting::Generalized;
    const Metrics m = evaluate(ds, ckpt.params, s, {margin, micro});
    if (!report.empty()) write_metrics_report(report, m, s);
    std::cout << metrics_to_json(m, s) << "\n";
    return 0;
}

int cmd_grad_check(const std::string& data, int stage) {
    const Dataset ds = load_manifest(data);
    Rng init_rng = Rng(0).substream(stream::kInit);
    const ModelParams params = init_params(ds.attr_sem, ds.region_dim(), init_rng);

    const std::size_t take = std::min<std::size_t>(6, ds.seen_train.size());
    std::vector<Stage1Item> batch;
    for (std::size_t i = 0; i < take; ++i) {
        const int idx = ds.seen_train[i];
        batch.push_back({&ds.features[static_cast<std::size_t>(idx)],
                         ds.labels[static_cast<std::size_t>(idx)]});
    }

    double worst = 0.0;
    if (stage == 1 || stage == 0) {
        const auto r = ce_loss_stage1(batch, ds.class_sem, ds.seen_classes, params);
        const auto loss_fn = [&](const ModelParams& p) {
            return ce_loss_stage1(batch, ds.class_sem, ds.seen_classes, p).value;
        };
        Rng probe(1);
        const double err = grad_check(loss_fn, params, r.grads, 50, 1e-5, probe);
        std::printf("stage 1 max relative error: %.3e\n", err);
        worst = std::max(worst, err);
    }
    if (stage == 2 || stage == 0) {
        std::vector<Tensor> dense;
        dense.reserve(batch.size());
        std::vector<FrozenItem> frozen;
        for (const auto& item : batch) {
            dense.push_back(dense_feature(*item.regions, params));
            frozen.push_back({&dense.back(), item.label});
        }
        const auto all = ds.all_classes();
        const auto r = ce_loss_frozen(frozen, ds.class_sem, all, params);
        const auto loss_fn = [&](const ModelParams& p) {
            return ce_loss_frozen(frozen, ds.class_sem, all, p).value;
        };
        Rng probe(2);
        const double err = grad_check(loss_fn, params, r.grads, 50, 1e-5, probe);
        std::printf("stage 2 max relative error: %.3e\n", err);
        worst = std::max(worst, err);
    }
    return worst < 1e-4 ? 0 : 1;
}

int cmd_inspect_attention(const std::string& data, const std::string& ckpt_path,
                          int sample, const std::string& out) {
    const Dataset ds = load_manifest(data);
    const Checkpoint ckpt = load_checkpoint(ckpt_path);
    if (sample < 0 || static_cast<std::size_t>(sample) >= ds.num_samples())
        throw std::invalid_argument("inspect-attention: sample index out of range");
    const Tensor w =
        attention_weights(ds.features[static_cast<std::size_t>(sample)], ckpt.params);
    std::ofstream csv(out);
    if (!csv) throw FormatError("cannot write: " + out);
    csv << "attribute_id,region_id,weight\n";
    char buf[64];
    for (std::size_t a = 0; a < w.rows(); ++a)
        for (std::size_t r = 0; r < w.cols(); ++r) {
            std::snprintf(buf, sizeof(buf), "%zu,%zu,%.17g\n", a, r, w(a, r));
            csv << buf;
        }
    std::cout << "wrote " << w.rows() * w.cols() << " attention weights to " << out << "\n";
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"compositional fine-grained low-shot classifier"};
    app.require_subcommand(1);

    std::string config_path, data, out, ckpt_path, report, setting = "generalized";
    std::string prior_name = "visual-semantic";
    int shots = 1, runs = 10, stage = 0, sample = 0;
    double lambda = 0.5, margin = 1.0;
    bool calibration = false, micro = false;

    auto* synth = app.add_subcommand("synth", "generate a planted synthetic dataset");
    synth->add_option("--config", config_path, "SynthConfig JSON")->required();
    synth->add_option("--out", out, "output directory")->required();

    auto* ta = app.add_subcommand("train-attention", "stage 1: dense attention model");
    ta->add_option("--data", data, "dataset manifest")->required();
    ta->add_option("--config", config_path, "TrainConfig JSON");
    ta->add_flag("--calibration", calibration, "add the self-calibration loss");
    ta->add_option("--out", out, "checkpoint path")->required();

    auto* tc = app.add_subcommand("train-compose", "stage 2: zero-shot composition");
    tc->add_option("--data", data, "dataset manifest")->required();
    tc->add_option("--ckpt", ckpt_path, "stage-1 checkpoint")->required();
    tc->add_option("--config", config_path, "TrainConfig JSON");
    tc->add_option("--out", out, "checkpoint path")->required();

    auto* tf = app.add_subcommand("train-fewshot", "stage 2: few-shot composition");
    tf->add_option("--data", data, "dataset manifest")->required();
    tf->add_option("--ckpt", ckpt_path, "stage-1 checkpoint")->required();
    tf->add_option("--shots", shots, "samples per novel class")->required();
    tf->add_option("--lambda", lambda, "real/synthetic tradeoff");
    tf->add_option("--runs", runs, "number of seeded runs");
    tf->add_option("--out", out, "output directory")->required();
    tf->add_option("--config", config_path, "TrainConfig JSON");
    tf->add_option("--prior", prior_name, "visual-semantic | semantic")
        ->check(CLI::IsMember({"visual-semantic", "semantic"}));
    tf->add_option("--margin", margin, "calibrated-stacking margin");

    auto* ev = app.add_subcommand("eval", "evaluate a checkpoint");
    ev->add_option("--data", data, "dataset manifest")->required();
    ev->add_option("--ckpt", ckpt_path, "checkpoint")->required();
    ev->add_option("--setting", setting, "novel | generalized")
        ->check(CLI::IsMember({"novel", "generalized"}))
        ->required();
    ev->add_option("--margin", margin, "calibrated-stacking margin");
    ev->add_flag("--micro", micro, "micro (sample) averaging");
    ev->add_option("--report", report, "report path (JSON; CSV twin alongside)");

    auto* gc = app.add_subcommand("grad-check", "finite-difference gradient check");
    gc->add_option("--data", data, "dataset manifest")->required();
    gc->add_option("--stage", stage, "1 or 2; default both")->check(CLI::IsMember({1, 2}));

    auto* ia = app.add_subcommand("inspect-attention", "dump one sample's attention");
    ia->add_option("--data", data, "dataset manifest")->required();
    ia->add_option("--ckpt", ckpt_path, "checkpoint")->required();
    ia->add_option("--sample", sample, "sample index")->required();
    ia->add_option("--out", out, "CSV path")->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (synth->parsed()) return cmd_synth(config_path, out);
        if (ta->parsed()) return cmd_train_attention(data, config_path, calibration, out);
        if (tc->parsed()) return cmd_train_compose(data, ckpt_path, config_path, out);
        if (tf->parsed())
            return cmd_train_fewshot(data, ckpt_path, shots, lambda, runs, out,
                                     config_path, prior_name, margin);
        if (ev->parsed()) return cmd_eval(data, ckpt_path, setting, margin, micro, report);
        if (gc->parsed()) return cmd_grad_check(data, stage);
        if (ia->parsed()) return cmd_inspect_attention(data, ckpt_path, sample, out);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
