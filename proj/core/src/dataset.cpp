#include "shapeprior/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numbers>
#include <random>
#include <set>
#include <stdexcept>

#include <nlohmann/json.hpp>

namespace shapeprior::data {

namespace {

constexpr const char* kImageSuffix = "_img.spmv";
constexpr const char* kMaskSuffix = "_seg.spmv";
const char* const kSplitNames[3] = {"train", "val", "test"};

bool ends_with(const std::string& s, const std::string& suffix) {
    return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

}  // namespace

std::uint64_t case_seed(std::uint64_t dataset_seed, std::size_t index) {
    // splitmix64 of (seed, index): decorrelates neighbouring case seeds.
    std::uint64_t z = dataset_seed * 0x9E3779B97F4A7C15ULL + static_cast<std::uint64_t>(index) + 1;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

SyntheticCase gen_case(std::uint64_t seed, const Extents3& extents, double noise_sigma) {
    if (extents[0] < 1 || extents[1] < kMinInPlaneExtent || extents[2] < kMinInPlaneExtent) {
        throw std::invalid_argument("gen_case: in-plane extents must be at least " + std::to_string(kMinInPlaneExtent));
    }
    if (noise_sigma < 0.0) throw std::invalid_argument("gen_case: negative noise sigma");
    std::mt19937_64 rng(seed);
    auto uniform = [&rng](double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); };

    const double scale = static_cast<double>(std::min(extents[1], extents[2])) / 64.0;
    const double cy = extents[1] / 2.0 + uniform(-6.0, 6.0) * scale;
    const double cx = extents[2] / 2.0 + uniform(-6.0, 6.0) * scale;
    const double lv_radius = std::max(2.0, uniform(6.0, 9.5) * scale);
    const double wall = std::max(1.5, uniform(2.5, 4.0) * scale);
    const double rv_angle = uniform(0.0, 2.0 * std::numbers::pi);
    const double rv_scale = uniform(1.0, 1.35);
    const double taper = uniform(0.2, 0.45);
    const double intensity[kSyntheticClasses] = {uniform(0.05, 0.2), uniform(0.7, 0.85), uniform(0.35, 0.5),
                                                 uniform(0.85, 1.0)};

    SyntheticCase out{Volume(extents, {5.0f, 1.5f, 1.5f}), MaskVolume(extents, {5.0f, 1.5f, 1.5f})};
    const double depth_span = extents[0] > 1 ? static_cast<double>(extents[0] - 1) : 1.0;
    for (std::size_t z = 0; z < extents[0]; ++z) {
        const double t = static_cast<double>(z) / depth_span;
        const double shrink = 1.0 - taper * t * t;
        const double r_lv = std::max(2.0, lv_radius * shrink);
        const double r_myo = r_lv + wall;
        const double r_rv = r_myo * rv_scale;
        const double rv_cy = cy + std::sin(rv_angle) * (r_myo + 0.35 * r_rv);
        const double rv_cx = cx + std::cos(rv_angle) * (r_myo + 0.35 * r_rv);
        for (std::size_t y = 0; y < extents[1]; ++y)
            for (std::size_t x = 0; x < extents[2]; ++x) {
                const double py = static_cast<double>(y) + 0.5, px = static_cast<double>(x) + 0.5;
                const double d = std::hypot(py - cy, px - cx);
                std::uint8_t label = kBackground;
                if (d < r_lv) {
                    label = kLeftVentricle;
                } else if (d < r_myo) {
                    label = kMyocardium;
                } else if (std::hypot(py - rv_cy, px - rv_cx) < r_rv) {
                    label = kRightVentricle;
                }
                out.mask.at(z, y, x) = label;
            }
    }
    std::normal_distribution<double> noise(0.0, noise_sigma > 0.0 ? noise_sigma : 1.0);
    for (std::size_t i = 0; i < out.volume.voxels.size(); ++i) {
        double v = intensity[out.mask.labels[i]];
        if (noise_sigma > 0.0) v += noise(rng);
        out.volume.voxels[i] = static_cast<float>(v);
    }
    return out;
}

std::vector<CaseEntry> DatasetManifest::split(const std::string& tag) const {
    std::vector<CaseEntry> out;
    std::copy_if(cases.begin(), cases.end(), std::back_inserter(out), [&](const CaseEntry& c) { return c.split == tag; });
    return out;
}

std::array<std::size_t, 3> split_counts(std::size_t n, const SplitFractions& f) {
    double total = 0.0;
    for (double v : f) {
        if (!(v >= 0.0)) throw std::invalid_argument("split fractions must be non-negative");
        total += v;
    }
    if (std::abs(total - 1.0) > 1e-6) throw std::invalid_argument("split fractions must sum to 1");
    const auto train = static_cast<std::size_t>(std::floor(f[0] * static_cast<double>(n) + 0.5));
    const auto val = std::min(n - std::min(n, train), static_cast<std::size_t>(std::floor(f[1] * static_cast<double>(n) + 0.5)));
    const std::size_t tr = std::min(n, train);
    return {tr, val, n - tr - val};
}

DatasetManifest make_manifest(const std::filesystem::path& dir, const SplitFractions& fractions, std::uint64_t seed) {
    if (!std::filesystem::is_directory(dir)) throw std::runtime_error("make_manifest: no such directory " + dir.string());
    std::vector<std::string> ids;
    for (const auto& entry : std::filesystem::directory_iterator(dir)) {
        const std::string name = entry.path().filename().string();
        if (!ends_with(name, kImageSuffix)) continue;
        const std::string id = name.substr(0, name.size() - std::string(kImageSuffix).size());
        if (std::filesystem::exists(dir / (id + kMaskSuffix))) ids.push_back(id);
    }
    std::sort(ids.begin(), ids.end());
    if (ids.empty()) throw std::runtime_error("make_manifest: no generated cases in " + dir.string());
    const auto counts = split_counts(ids.size(), fractions);

    std::vector<std::string> order = ids;
    std::shuffle(order.begin(), order.end(), std::mt19937_64(seed));
    std::map<std::string, std::string> split_of;
    std::size_t pos = 0;
    for (int s = 0; s < 3; ++s)
        for (std::size_t i = 0; i < counts[s]; ++i) split_of[order[pos++]] = kSplitNames[s];

    DatasetManifest m;
    m.root = dir;
    m.seed = seed;
    std::size_t max_label = 0;
    for (const auto& id : ids) {
        m.cases.push_back({id, id + kImageSuffix, id + kMaskSuffix, split_of.at(id)});
        for (auto l : read_mask(dir / (id + kMaskSuffix)).labels) max_label = std::max<std::size_t>(max_label, l);
    }
    m.n_classes = std::max<std::size_t>(2, max_label + 1);
    return m;
}

void write_manifest(const std::filesystem::path& path, const DatasetManifest& m) {
    nlohmann::ordered_json j;
    j["n_classes"] = m.n_classes;
    j["seed"] = m.seed;
    j["generator_version"] = m.generator_version;
    j["cases"] = nlohmann::ordered_json::array();
    for (const auto& c : m.cases) {
        j["cases"].push_back({{"id", c.id}, {"volume", c.volume}, {"mask", c.mask}, {"split", c.split}});
    }
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot write manifest " + path.string());
    os << j.dump(2) << '\n';
}

DatasetManifest read_manifest(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot open manifest " + path.string());
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(is);
    } catch (const nlohmann::json::exception& e) {
        throw std::runtime_error("malformed manifest " + path.string() + ": " + e.what());
    }
    DatasetManifest m;
    m.root = path.parent_path();
    try {
        m.n_classes = j.at("n_classes").get<std::size_t>();
        m.seed = j.at("seed").get<std::uint64_t>();
        m.generator_version = j.value("generator_version", std::string{});
        std::map<std::string, std::string> seen;
        for (const auto& c : j.at("cases")) {
            CaseEntry e{c.at("id"), c.at("volume"), c.at("mask"), c.at("split")};
            if (e.split != "train" && e.split != "val" && e.split != "test")
                throw std::runtime_error("case " + e.id + " has unknown split '" + e.split + "'");
            auto [it, inserted] = seen.emplace(e.id, e.split);
            if (!inserted) throw std::runtime_error("case " + e.id + " listed twice (splits must be disjoint)");
            for (const auto& p : {m.volume_path(e), m.mask_path(e)})
                if (!std::filesystem::exists(p)) throw std::runtime_error("manifest path does not exist: " + p.string());
            m.cases.push_back(std::move(e));
        }
    } catch (const nlohmann::json::exception& e) {
        throw std::runtime_error("malformed manifest " + path.string() + ": " + e.what());
    }
    return m;
}

DatasetManifest generate_dataset(const std::filesystem::path& dir, const GenerateOptions& options) {
    std::filesystem::create_directories(dir);
    for (std::size_t i = 0; i < options.cases; ++i) {
        SyntheticCase c = gen_case(case_seed(options.seed, i), options.extents, options.noise_sigma);
        c.volume.spacing = options.spacing;
        c.mask.spacing = options.spacing;
        char id[32];
        std::snprintf(id, sizeof id, "case_%04zu", i);
        write_volume(dir / (std::string(id) + kImageSuffix), c.volume);
        write_mask(dir / (std::string(id) + kMaskSuffix), c.mask);
    }
    DatasetManifest m = make_manifest(dir, options.fractions, options.seed);
    write_manifest(dir / "manifest.json", m);
    return m;
}

}  // namespace shapeprior::data
