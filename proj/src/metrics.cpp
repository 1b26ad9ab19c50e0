#include "cfgen/metrics.hpp"

#include <json.hpp>

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <map>
#include <stdexcept>

namespace cfgen {

double top1_accuracy(std::span<const int> predictions, std::span<const int> labels,
                     bool per_class) {
    if (predictions.empty() || predictions.size() != labels.size())
        throw std::invalid_argument("top1_accuracy: empty or mismatched inputs");
    if (!per_class) {
        std::size_t correct = 0;
        for (std::size_t i = 0; i < labels.size(); ++i)
            if (predictions[i] == labels[i]) ++correct;
        return static_cast<double>(correct) / static_cast<double>(labels.size());
    }
    std::map<int, std::pair<int, int>> tally;   // class -> (correct, total)
    for (std::size_t i = 0; i < labels.size(); ++i) {
        auto& t = tally[labels[i]];
        ++t.second;
        if (predictions[i] == labels[i]) ++t.first;
    }
    double sum = 0.0;
    for (const auto& [cls, t] : tally)
        sum += static_cast<double>(t.first) / static_cast<double>(t.second);
    return sum / static_cast<double>(tally.size());
}

double harmonic_mean(double s, double n) {
    const double denom = s + n;
    if (denom <= 0.0) return 0.0;
    return 2.0 * s * n / denom;
}

std::vector<double> calibrated_scores(std::span<const double> raw,
                                      const std::vector<bool>& seen_mask, double margin) {
    if (raw.size() != seen_mask.size())
        throw std::invalid_argument("calibrated_scores: mask length mismatch");
    if (margin < 0) throw std::invalid_argument("calibrated_scores: margin must be >= 0");
    std::vector<double> out(raw.begin(), raw.end());
    for (std::size_t i = 0; i < out.size(); ++i)
        out[i] += seen_mask[i] ? -margin : margin;
    return out;
}

namespace {

// argmax with ties resolved to the lowest class id (candidates ascend)
int predict(std::span<const double> scores, std::span<const int> candidates) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < scores.size(); ++i)
        if (scores[i] > scores[best]) best = i;
    return candidates[best];
}

std::map<int, double> per_class_table(std::span<const int> predictions,
                                      std::span<const int> labels) {
    std::map<int, std::pair<int, int>> tally;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        auto& t = tally[labels[i]];
        ++t.second;
        if (predictions[i] == labels[i]) ++t.first;
    }
    std::map<int, double> out;
    for (const auto& [cls, t] : tally)
        out[cls] = static_cast<double>(t.first) / static_cast<double>(t.second);
    return out;
}

} // namespace

Metrics evaluate(const Dataset& ds, const ModelParams& params, EvalSetting setting,
                 const EvalOptions& opt) {
    if (ds.test.empty()) throw std::invalid_argument("evaluate: empty test split");
    Metrics m;

    if (setting == EvalSetting::NovelOnly) {
        const auto candidates = ds.novel_classes;
        std::vector<int> preds, labels;
        for (int i : ds.test) {
            const int y = ds.labels[static_cast<std::size_t>(i)];
            if (!ds.is_novel(y)) continue;
            const auto cache = attention_forward(ds.features[static_cast<std::size_t>(i)], params);
            const auto s = class_scores(cache.scores, ds.class_sem, candidates);
            preds.push_back(predict(s, candidates));
            labels.push_back(y);
        }
        if (labels.empty())
            throw std::invalid_argument("evaluate: novel-only setting has no novel test samples");
        m.acc_novel_only = top1_accuracy(preds, labels, !opt.micro);
        m.per_class = per_class_table(preds, labels);
        return m;
    }

    const auto candidates = ds.all_classes();
    std::vector<bool> seen_mask(candidates.size(), false);
    for (std::size_t c = 0; c < candidates.size(); ++c)
        seen_mask[c] = !ds.is_novel(candidates[c]);

    std::vector<int> seen_preds, seen_labels, novel_preds, novel_labels, preds, labels;
    for (int i : ds.test) {
        const int y = ds.labels[static_cast<std::size_t>(i)];
        const auto cache = attention_forward(ds.features[static_cast<std::size_t>(i)], params);
        const auto raw = class_scores(cache.scores, ds.class_sem, candidates);
        const auto s = calibrated_scores(raw, seen_mask, opt.margin);
        const int pred = predict(s, candidates);
        preds.push_back(pred);
        labels.push_back(y);
        if (ds.is_novel(y)) {
            novel_preds.push_back(pred);
            novel_labels.push_back(y);
        } else {
            seen_preds.push_back(pred);
            seen_labels.push_back(y);
        }
    }
    if (!seen_labels.empty())
        m.acc_seen = top1_accuracy(seen_preds, seen_labels, !opt.micro);
    if (!novel_labels.empty())
        m.acc_novel = top1_accuracy(novel_preds, novel_labels, !opt.micro);
    m.harmonic = harmonic_mean(m.acc_seen, m.acc_novel);
    m.per_class = per_class_table(preds, labels);
    return m;
}

namespace {

const char* setting_name(EvalSetting s) {
    return s == EvalSetting::NovelOnly ? "novel" : "generalized";
}

std::string format_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

} // namespace

std::string metrics_to_json(const Metrics& m, EvalSetting setting) {
    nlohmann::json j;
    j["setting"] = setting_name(setting);
    if (setting == EvalSetting::NovelOnly) {
        j["accNovelOnly"] = m.acc_novel_only;
    } else {
        j["accSeen"] = m.acc_seen;
        j["accNovel"] = m.acc_novel;
        j["harmonicMean"] = m.harmonic;
    }
    nlohmann::json per = nlohmann::json::object();
    for (const auto& [cls, acc] : m.per_class) per[std::to_string(cls)] = acc;
    j["perClass"] = per;
    return j.dump(2);
}

std::string metrics_to_csv(const Metrics& m, EvalSetting setting) {
    std::string out = "metric,value\n";
    if (setting == EvalSetting::NovelOnly) {
        out += "accNovelOnly," + format_double(m.acc_novel_only) + "\n";
    } else {
        out += "accSeen," + format_double(m.acc_seen) + "\n";
        out += "accNovel," + format_double(m.acc_novel) + "\n";
        out += "harmonicMean," + format_double(m.harmonic) + "\n";
    }
    for (const auto& [cls, acc] : m.per_class)
        out += "class_" + std::to_string(cls) + "," + format_double(acc) + "\n";
    return out;
}

void write_metrics_report(const std::filesystem::path& path, const Metrics& m,
                          EvalSetting setting) {
    std::ofstream out(path);
    if (!out) throw FormatError("report: cannot write: " + path.string());
    out << metrics_to_json(m, setting) << "\n";

    std::filesystem::path csv = path;
    csv.replace_extension(".csv");
    std::ofstream cout_(csv);
    if (!cout_) throw FormatError("report: cannot write: " + csv.string());
    cout_ << metrics_to_csv(m, setting);
}

} // namespace cfgen
