#pragma once

#include "cfgen/attention.hpp"
#include "cfgen/dataio.hpp"

#include <map>
#include <span>
#include <string>
#include <vector>

namespace cfgen {

struct Metrics {
    double acc_novel_only = 0.0;   // n->n
    double acc_seen = 0.0;         // a->s
    double acc_novel = 0.0;        // a->n
    double harmonic = 0.0;         // H
    std::map<int, double> per_class;
};

// perClass = true: mean over classes present in `labels` of within-class
// accuracy; false: plain sample accuracy.
double top1_accuracy(std::span<const int> predictions, std::span<const int> labels,
                     bool per_class);

// 2sn/(s+n), 0 when s+n = 0.
double harmonic_mean(double s, double n);

// novel entries += margin, seen entries -= margin (calibrated stacking);
// used only in generalized evaluation.
std::vector<double> calibrated_scores(std::span<const double> raw,
                                      const std::vector<bool>& seen_mask, double margin);

enum class EvalSetting { NovelOnly, Generalized };

struct EvalOptions {
    double margin = 1.0;
    bool micro = false;      // micro (sample) instead of macro (per-class) averaging
};

// Novel-only: novel test samples scored against novel classes, no margin.
// Generalized: all test samples scored against all classes with the margin;
// reports a->s, a->n, and their harmonic mean.
Metrics evaluate(const Dataset& ds, const ModelParams& params, EvalSetting setting,
                 const EvalOptions& opt = {});

std::string metrics_to_json(const Metrics& m, EvalSetting setting);
std::string metrics_to_csv(const Metrics& m, EvalSetting setting);

// Writes the JSON report to `path` and the CSV twin next to it (.csv).
void write_metrics_report(const std::filesystem::path& path, const Metrics& m,
                          EvalSetting setting);

} // namespace cfgen
