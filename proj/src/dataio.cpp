#include "cfgen/dataio.hpp"
#include "cfgen/rng.hpp"

#include <json.hpp>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <set>
#include <sstream>

namespace cfgen {

namespace {

using nlohmann::json;

void write_u32(std::ostream& out, std::uint32_t v) {
    const unsigned char b[4] = {
        static_cast<unsigned char>(v & 0xFF),
        static_cast<unsigned char>((v >> 8) & 0xFF),
        static_cast<unsigned char>((v >> 16) & 0xFF),
        static_cast<unsigned char>((v >> 24) & 0xFF),
    };
    out.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t read_u32(std::istream& in, const char* field) {
    unsigned char b[4];
    in.read(reinterpret_cast<char*>(b), 4);
    if (in.gcount() != 4)
        throw FormatError(std::string("CFGF: truncated ") + field);
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

constexpr std::uint32_t kFormatVersion = 1;

double quantize_f32(double x) { return static_cast<double>(static_cast<float>(x)); }

void quantize_tensor(Tensor& t) {
    for (double& x : t.flat()) x = quantize_f32(x);
}

json require_key(const json& j, const char* key) {
    if (!j.contains(key))
        throw FormatError(std::string("manifest: missing key '") + key + "'");
    return j.at(key);
}

std::vector<int> int_list(const json& j, const char* key) {
    std::vector<int> out;
    for (const auto& v : require_key(j, key)) out.push_back(v.get<int>());
    return out;
}

} // namespace

void store_tensor(const Tensor& t, std::ostream& out) {
    out.write("CFGF", 4);
    write_u32(out, kFormatVersion);
    write_u32(out, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.dims()) write_u32(out, static_cast<std::uint32_t>(d));
    for (double x : t.flat()) {
        const auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(x));
        write_u32(out, bits);
    }
}

void store_tensor(const Tensor& t, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw FormatError("CFGF: cannot open for writing: " + path.string());
    store_tensor(t, out);
    if (!out) throw FormatError("CFGF: write failed: " + path.string());
}

Tensor load_tensor(std::istream& in) {
    char magic[4];
    in.read(magic, 4);
    if (in.gcount() != 4 || std::string_view(magic, 4) != "CFGF")
        throw FormatError("CFGF: bad magic");
    const std::uint32_t version = read_u32(in, "version");
    if (version != kFormatVersion)
        throw FormatError("CFGF: bad version " + std::to_string(version));
    const std::uint32_t ndim = read_u32(in, "ndim");
    std::vector<std::size_t> dims(ndim);
    std::size_t total = 1;
    for (std::uint32_t i = 0; i < ndim; ++i) {
        dims[i] = read_u32(in, "dims");
        total *= dims[i];
    }
    std::vector<double> data(total);
    for (std::size_t i = 0; i < total; ++i) {
        const std::uint32_t bits = read_u32(in, "data");
        data[i] = static_cast<double>(std::bit_cast<float>(bits));
    }
    return Tensor(std::move(dims), std::move(data));
}

Tensor load_tensor(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("CFGF: cannot open: " + path.string());
    return load_tensor(in);
}

std::vector<int> Dataset::all_classes() const {
    std::vector<int> out(seen_classes);
    out.insert(out.end(), novel_classes.begin(), novel_classes.end());
    std::sort(out.begin(), out.end());
    return out;
}

bool Dataset::is_novel(int class_id) const {
    return std::find(novel_classes.begin(), novel_classes.end(), class_id) !=
           novel_classes.end();
}

void Dataset::validate() const {
    const int num_cls = static_cast<int>(num_classes());
    std::set<int> seen(seen_classes.begin(), seen_classes.end());
    std::set<int> novel(novel_classes.begin(), novel_classes.end());
    for (int c : seen)
        if (novel.count(c)) throw FormatError("manifest: overlapping class sets");
    for (int c : seen_classes)
        if (c < 0 || c >= num_cls) throw FormatError("manifest: seen class id out of range");
    for (int c : novel_classes)
        if (c < 0 || c >= num_cls) throw FormatError("manifest: novel class id out of range");

    if (labels.size() != features.size())
        throw FormatError("manifest: features/labels length mismatch");
    for (int y : labels)
        if (!seen.count(y) && !novel.count(y))
            throw FormatError("manifest: sample class not in seen or novel set");

    const std::size_t R = num_regions();
    const std::size_t d = region_dim();
    for (const Tensor& f : features) {
        if (f.rank() != 2 || f.rows() != R || f.cols() != d)
            throw FormatError("manifest: inconsistent region feature shape");
        f.check_finite("features");
    }

    const int n = static_cast<int>(num_samples());
    std::set<int> used;
    auto check_split = [&](const std::vector<int>& split, const char* name) {
        for (int i : split) {
            if (i < 0 || i >= n)
                throw FormatError(std::string("manifest: ") + name + " index out of range");
            if (!used.insert(i).second)
                throw FormatError(std::string("manifest: split overlap at ") + name);
        }
    };
    check_split(seen_train, "seenTrain");
    check_split(novel_train, "novelTrain");
    check_split(test, "test");
    for (int i : seen_train)
        if (!seen.count(labels[i]))
            throw FormatError("manifest: seenTrain sample has non-seen class");
    for (int i : novel_train)
        if (!novel.count(labels[i]))
            throw FormatError("manifest: novelTrain sample has non-novel class");
    if (novel_train.size() >
        static_cast<std::size_t>(few_shot_budget) * novel_classes.size())
        throw FormatError("manifest: novelTrain exceeds few-shot budget");

    if (class_sem.rank() != 2 || attr_sem.rank() != 2)
        throw FormatError("manifest: semantics must be matrices");
    if (attr_sem.rows() != num_attributes())
        throw FormatError("manifest: attribute semantics row count != attribute count");
    for (std::size_t c = 0; c < class_sem.rows(); ++c) {
        auto z = class_sem.row(c);
        for (double v : z)
            if (v < 0.0) throw FormatError("manifest: class semantics has negative entry");
        if (std::abs(l2_norm(z) - 1.0) > 1e-6)
            throw FormatError("manifest: class semantic row not unit norm");
    }
}

Dataset load_manifest(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw FormatError("manifest: cannot open: " + path.string());
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw FormatError(std::string("manifest: invalid JSON: ") + e.what());
    }
    const auto base = path.parent_path();

    Dataset ds;
    ds.name = require_key(j, "name").get<std::string>();
    for (const auto& f : require_key(j, "features")) {
        ds.features.push_back(load_tensor(base / require_key(f, "path").get<std::string>()));
        ds.labels.push_back(require_key(f, "classId").get<int>());
    }
    ds.class_sem = load_tensor(base / require_key(j, "classSemantics").get<std::string>());
    ds.attr_sem = load_tensor(base / require_key(j, "attributeSemantics").get<std::string>());
    ds.seen_classes = int_list(j, "seenClasses");
    ds.novel_classes = int_list(j, "novelClasses");
    const json splits = require_key(j, "splits");
    ds.seen_train = int_list(splits, "seenTrain");
    ds.novel_train = int_list(splits, "novelTrain");
    ds.test = int_list(splits, "test");
    ds.few_shot_budget = require_key(j, "fewShotBudget").get<int>();

    if (ds.class_sem.rank() != 2)
        throw FormatError("manifest: classSemantics must be a matrix");
    for (std::size_t c = 0; c < ds.class_sem.rows(); ++c) {
        auto z = ds.class_sem.row(c);
        for (double v : z)
            if (v < 0.0) throw FormatError("manifest: class semantics has negative entry");
        const auto unit = l2_normalize(z);
        std::copy(unit.begin(), unit.end(), z.begin());
    }
    ds.validate();
    return ds;
}

void store_dataset(const Dataset& ds, const std::filesystem::path& dir) {
    namespace fs = std::filesystem;
    fs::create_directories(dir / "features");

    json j;
    j["name"] = ds.name;
    json feats = json::array();
    for (std::size_t i = 0; i < ds.features.size(); ++i) {
        char buf[32];
        std::snprintf(buf, sizeof(buf), "features/sample_%05zu.cfgf", i);
        store_tensor(ds.features[i], dir / buf);
        feats.push_back({{"path", buf}, {"classId", ds.labels[i]}});
    }
    j["features"] = feats;
    store_tensor(ds.class_sem, dir / "class_semantics.cfgf");
    store_tensor(ds.attr_sem, dir / "attribute_semantics.cfgf");
    j["classSemantics"] = "class_semantics.cfgf";
    j["attributeSemantics"] = "attribute_semantics.cfgf";
    j["seenClasses"] = ds.seen_classes;
    j["novelClasses"] = ds.novel_classes;
    j["splits"] = {{"seenTrain", ds.seen_train},
                   {"novelTrain", ds.novel_train},
                   {"test", ds.test}};
    j["fewShotBudget"] = ds.few_shot_budget;

    std::ofstream out(dir / "manifest.json");
    if (!out) throw FormatError("manifest: cannot write: " + (dir / "manifest.json").string());
    out << j.dump(2) << "\n";
}

SynthConfig synth_config_from_json(const std::string& json_text) {
    json j;
    try {
        j = json::parse(json_text);
    } catch (const json::exception& e) {
        throw FormatError(std::string("synth config: invalid JSON: ") + e.what());
    }
    SynthConfig cfg;
    auto get = [&](const char* key, auto& field) {
        if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
    };
    get("numSeen", cfg.num_seen);
    get("numNovel", cfg.num_novel);
    get("numAttributes", cfg.num_attributes);
    get("regionDim", cfg.region_dim);
    get("regionsPerImage", cfg.regions_per_image);
    get("samplesPerSeenClass", cfg.samples_per_seen_class);
    get("attributesPerClass", cfg.attributes_per_class);
    get("noiseSigma", cfg.noise_sigma);
    get("seed", cfg.seed);
    get("semanticDim", cfg.semantic_dim);
    return cfg;
}

namespace {

// Distractor regions draw i.i.d. N(0, kNoiseScale^2) coordinates, putting their
// norms a little above the unit-norm attribute prototypes.
constexpr double kNoiseScale = 0.4;

// random subset of size k from [0, n)
std::vector<int> random_subset(int n, int k, Rng& rng) {
    std::vector<int> pool(n);
    for (int i = 0; i < n; ++i) pool[i] = i;
    for (int i = 0; i < k; ++i) {
        const std::size_t j = i + rng.next_below(pool.size() - i);
        std::swap(pool[i], pool[j]);
    }
    pool.resize(k);
    std::sort(pool.begin(), pool.end());
    return pool;
}

} // namespace

Dataset synth_dataset(const SynthConfig& cfg) {
    if (cfg.attributes_per_class > cfg.num_attributes)
        throw std::invalid_argument("synth: attributesPerClass exceeds attribute count");
    if (cfg.attributes_per_class > cfg.regions_per_image)
        throw std::invalid_argument("synth: regions cannot host attributes");
    if (cfg.noise_sigma < 0)
        throw std::invalid_argument("synth: noiseSigma must be nonnegative");

    const int A = cfg.num_attributes;
    const int d = cfg.region_dim;
    const int dv = cfg.semantic_dim > 0 ? cfg.semantic_dim : d;
    const int C = cfg.num_seen + cfg.num_novel;
    const int R = cfg.regions_per_image;
    Rng rng(cfg.seed);

    // Attribute prototypes: Gaussian rows, Gram-Schmidt when they fit, unit norm.
    Tensor proto({static_cast<std::size_t>(A), static_cast<std::size_t>(d)});
    for (int a = 0; a < A; ++a) {
        auto row = proto.row(a);
        while (true) {
            for (double& x : row) x = rng.next_gaussian();
            if (d >= A) {
                for (int p = 0; p < a; ++p) {
                    const double c = dot(row, proto.row(p));
                    auto prev = proto.row(p);
                    for (int k = 0; k < d; ++k) row[k] -= c * prev[k];
                }
            }
            const double n = l2_norm(row);
            if (n > 1e-8) {
                for (double& x : row) x /= n;
                break;
            }
        }
    }

    // Class attribute subsets; novel subsets must be composable from seen ones.
    std::vector<std::vector<int>> class_attrs(C);
    std::vector<bool> seen_union(A, false);
    for (int c = 0; c < cfg.num_seen; ++c) {
        class_attrs[c] = random_subset(A, cfg.attributes_per_class, rng);
        for (int a : class_attrs[c]) seen_union[a] = true;
    }
    for (int c = cfg.num_seen; c < C; ++c) {
        int tries = 0;
        while (true) {
            auto subset = random_subset(A, cfg.attributes_per_class, rng);
            const bool covered = std::all_of(subset.begin(), subset.end(),
                                             [&](int a) { return seen_union[a]; });
            if (covered) {
                class_attrs[c] = subset;
                break;
            }
            if (++tries > 10000)
                throw std::runtime_error(
                    "synth: cannot draw novel attribute set inside seen union");
        }
    }

    Dataset ds;
    ds.name = "synthetic";
    ds.class_sem = Tensor({static_cast<std::size_t>(C), static_cast<std::size_t>(A)});
    const double strength = 1.0 / std::sqrt(static_cast<double>(cfg.attributes_per_class));
    for (int c = 0; c < C; ++c)
        for (int a : class_attrs[c]) ds.class_sem(c, a) = strength;

    // Attribute semantic vectors: random unit rows, stand-ins for word embeddings.
    ds.attr_sem = Tensor({static_cast<std::size_t>(A), static_cast<std::size_t>(dv)});
    for (int a = 0; a < A; ++a) {
        auto row = ds.attr_sem.row(a);
        double n = 0.0;
        do {
            for (double& x : row) x = rng.next_gaussian();
            n = l2_norm(row);
        } while (n <= 1e-8);
        for (double& x : row) x /= n;
    }

    for (int c = 0; c < C; ++c) {
        for (int s = 0; s < cfg.samples_per_seen_class; ++s) {
            Tensor f({static_cast<std::size_t>(R), static_cast<std::size_t>(d)});
            // active attributes occupy a random subset of region slots
            const auto slots = random_subset(R, cfg.attributes_per_class, rng);
            std::vector<bool> hosts(R, false);
            for (std::size_t i = 0; i < slots.size(); ++i) {
                const int r = slots[i];
                hosts[r] = true;
                const int a = class_attrs[c][i];
                auto row = f.row(r);
                auto u = proto.row(a);
                for (int k = 0; k < d; ++k)
                    row[k] = u[k] + cfg.noise_sigma * rng.next_gaussian();
            }
            for (int r = 0; r < R; ++r) {
                if (hosts[r]) continue;
                auto row = f.row(r);
                for (double& x : row) x = kNoiseScale * rng.next_gaussian();
            }
            ds.features.push_back(std::move(f));
            ds.labels.push_back(c);
        }
    }

    for (int c = 0; c < cfg.num_seen; ++c) ds.seen_classes.push_back(c);
    for (int c = cfg.num_seen; c < C; ++c) ds.novel_classes.push_back(c);

    // seen classes: 75/25 train/test; novel classes: all samples to test
    const int per = cfg.samples_per_seen_class;
    const int train_per = (per * 3) / 4;
    for (int c = 0; c < C; ++c) {
        const int base = c * per;
        if (c < cfg.num_seen) {
            for (int s = 0; s < per; ++s)
                (s < train_per ? ds.seen_train : ds.test).push_back(base + s);
        } else {
            for (int s = 0; s < per; ++s) ds.test.push_back(base + s);
        }
    }
    ds.few_shot_budget = 0;

    // Quantize to the 32-bit interchange precision so a stored-and-reloaded
    // copy matches this one bit for bit.
    for (Tensor& f : ds.features) quantize_tensor(f);
    quantize_tensor(ds.attr_sem);
    quantize_tensor(ds.class_sem);
    for (std::size_t c = 0; c < ds.class_sem.rows(); ++c) {
        auto z = ds.class_sem.row(c);
        const auto unit = l2_normalize(z);
        std::copy(unit.begin(), unit.end(), z.begin());
    }

    ds.validate();
    return ds;
}

} // namespace cfgen
