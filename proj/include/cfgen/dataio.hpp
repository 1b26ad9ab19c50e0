#pragma once

#include "cfgen/tensor.hpp"

#include <filesystem>
#include <iosfwd>
#include <stdexcept>
#include <string>
#include <vector>

namespace cfgen {

// Raised on malformed CFGF files or manifests; the message names the field.
class FormatError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// CFGF binary tensor format, little-endian:
//   "CFGF" | version u32 = 1 | ndim u32 | dims u32 each | row-major f32 data
void store_tensor(const Tensor& t, std::ostream& out);
void store_tensor(const Tensor& t, const std::filesystem::path& path);
Tensor load_tensor(std::istream& in);
Tensor load_tensor(const std::filesystem::path& path);

struct Dataset {
    std::string name;
    std::vector<Tensor> features;        // per sample, R x d region features
    std::vector<int> labels;             // per sample class id, row into class_sem
    Tensor class_sem;                    // C x A, rows unit-norm
    Tensor attr_sem;                     // A x dv
    std::vector<int> seen_classes;
    std::vector<int> novel_classes;
    std::vector<int> seen_train;         // sample indices
    std::vector<int> novel_train;
    std::vector<int> test;
    int few_shot_budget = 0;

    std::size_t num_samples() const { return features.size(); }
    std::size_t num_classes() const { return class_sem.rows(); }
    std::size_t num_attributes() const { return class_sem.cols(); }
    std::size_t num_regions() const { return features.empty() ? 0 : features[0].rows(); }
    std::size_t region_dim() const { return features.empty() ? 0 : features[0].cols(); }
    std::size_t semantic_dim() const { return attr_sem.cols(); }

    // seen ∪ novel, ascending; the candidate set for all-class softmaxes
    std::vector<int> all_classes() const;
    bool is_novel(int class_id) const;

    void validate() const;   // enforces every invariant; throws FormatError
};

// JSON manifest with keys: name, features[] (path, classId), classSemantics,
// attributeSemantics, seenClasses, novelClasses,
// splits{seenTrain, novelTrain, test}, fewShotBudget.
// Tensor paths are resolved relative to the manifest's directory.
Dataset load_manifest(const std::filesystem::path& path);
void store_dataset(const Dataset& ds, const std::filesystem::path& dir);

struct SynthConfig {
    int num_seen = 10;
    int num_novel = 4;
    int num_attributes = 20;
    int region_dim = 32;
    int regions_per_image = 6;
    int samples_per_seen_class = 40;
    int attributes_per_class = 4;
    double noise_sigma = 0.05;
    std::uint64_t seed = 0;
    int semantic_dim = 0;    // 0 -> region_dim
};

SynthConfig synth_config_from_json(const std::string& json_text);

// Planted-model generator: orthogonalized attribute prototypes u_a in R^d,
// each class a random attribute subset (novel subsets always covered by the
// union of seen subsets), one region per active attribute = u_a + noise,
// remaining regions pure noise. Deterministic given cfg.seed.
Dataset synth_dataset(const SynthConfig& cfg);

} // namespace cfgen
