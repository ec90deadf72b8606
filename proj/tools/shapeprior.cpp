#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

#include "shapeprior/baselines.hpp"
#include "shapeprior/dataset.hpp"
#include "shapeprior/gradient_suite.hpp"
#include "shapeprior/metrics.hpp"
#include "shapeprior/trainer.hpp"

namespace fs = std::filesystem;
using namespace shapeprior;

namespace {

std::string read_text(const fs::path& p) {
    std::ifstream is(p);
    if (!is) throw std::runtime_error("cannot read " + p.string());
    std::stringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

void print_report(const harness::MetricsRecord& r, const std::string& out) {
    std::ostringstream os;
    os << harness::kMetricsHeader << '\n' << harness::metrics_rows(r, true);
    std::cout << os.str();
    if (!out.empty()) {
        std::ofstream f(out, std::ios::trunc);
        if (!(f << os.str())) throw std::runtime_error("cannot write " + out);
    }
}

struct Split {
    std::vector<data::Volume> images;
    std::vector<data::MaskVolume> masks;
    std::vector<std::string> ids;
};

// Baselines read z-scored intensities, like the network.
Split read_split(const data::DatasetManifest& m, const std::string& tag) {
    Split s;
    for (const auto& e : m.split(tag)) {
        s.images.push_back(data::zscore(data::read_volume(m.volume_path(e))));
        s.masks.push_back(data::read_mask(m.mask_path(e)));
        data::validate_labels(s.masks.back(), m.n_classes);
        s.ids.push_back(e.id);
    }
    if (s.ids.empty()) throw std::invalid_argument("split '" + tag + "' has no cases");
    return s;
}

int gen_data(const fs::path& out, std::size_t cases, std::uint64_t seed, const std::vector<std::size_t>& extents,
             double noise) {
    data::GenerateOptions o;
    o.cases = cases;
    o.seed = seed;
    o.extents = {extents[0], extents[1], extents[2]};
    o.noise_sigma = noise;
    const auto m = data::generate_dataset(out, o);
    std::printf("wrote %zu cases (train %zu, val %zu, test %zu) to %s\n", m.cases.size(), m.split("train").size(),
                m.split("val").size(), m.split("test").size(), (out / "manifest.json").c_str());
    return 0;
}

int train(const fs::path& config_path) {
    const auto cfg = harness::train_config_from_json(read_text(config_path), config_path.parent_path());
    const auto r = harness::train(cfg, [](const std::string& line) { std::cout << line << std::endl; });
    std::printf("best epoch %zu, val mean dice %.4f, checkpoint %s\n", r.best_epoch, r.best_val_dice, r.checkpoint.c_str());
    return 0;
}

int export_attn(const fs::path& ckpt, const std::string& which, const std::string& manifest, const fs::path& out) {
    fs::path volume = which;
    if (!manifest.empty()) {
        const auto m = data::read_manifest(manifest);
        bool found = false;
        for (const auto& e : m.cases)
            if (e.id == which) {
                volume = m.volume_path(e);
                found = true;
            }
        if (!found) throw std::invalid_argument("no case '" + which + "' in " + manifest);
    }
    const auto s = harness::export_attention(ckpt, volume, out);
    std::printf("wrote %zu files to %s\n", s.files.size(), out.c_str());
    return 0;
}

int baseline_atlas(const fs::path& manifest, int radius, double temperature, const std::string& out) {
    const auto m = data::read_manifest(manifest);
    const Split train = read_split(m, "train"), test = read_split(m, "test");
    std::vector<baselines::AtlasPair> bases;
    for (std::size_t i = 0; i < train.ids.size(); ++i) bases.push_back({train.images[i], train.masks[i]});
    std::vector<harness::CaseMetrics> cases;
    for (std::size_t i = 0; i < test.ids.size(); ++i) {
        const auto r = baselines::atlas_segment(test.images[i], bases, radius, temperature);
        cases.push_back(harness::case_metrics(test.ids[i], r.mask, test.masks[i], m.n_classes));
    }
    print_report(harness::aggregate(cases, 0, "test"), out);
    return 0;
}

int baseline_gmm(const fs::path& manifest, std::size_t components, std::uint64_t seed, const std::string& out) {
    const auto m = data::read_manifest(manifest);
    if (components != m.n_classes)
        throw std::invalid_argument("--components must equal the number of classes (" + std::to_string(m.n_classes) + ")");
    // Reference class means from the training split order the components.
    const Split train = read_split(m, "train"), test = read_split(m, "test");
    std::vector<double> sum(m.n_classes, 0.0), count(m.n_classes, 0.0);
    for (std::size_t i = 0; i < train.ids.size(); ++i)
        for (std::size_t v = 0; v < train.masks[i].labels.size(); ++v) {
            sum[train.masks[i].labels[v]] += train.images[i].voxels[v];
            count[train.masks[i].labels[v]] += 1.0;
        }
    std::vector<double> class_means(m.n_classes);
    for (std::size_t c = 0; c < m.n_classes; ++c) class_means[c] = count[c] > 0 ? sum[c] / count[c] : 0.0;

    std::vector<harness::CaseMetrics> cases;
    std::size_t degenerate = 0;
    for (std::size_t i = 0; i < test.ids.size(); ++i) {
        const auto g = baselines::gmm_fit_em(test.images[i].voxels, components, seed);
        degenerate += g.degenerate;
        const auto labels = baselines::rank_component_labels(g, class_means);
        auto mask = baselines::gmm_segment(test.images[i], g);
        for (auto& l : mask.labels) l = labels[l];
        cases.push_back(harness::case_metrics(test.ids[i], mask, test.masks[i], m.n_classes));
    }
    if (degenerate) std::fprintf(stderr, "warning: %zu case(s) had fewer distinct intensities than components\n", degenerate);
    print_report(harness::aggregate(cases, 0, "test"), out);
    return 0;
}

int gradcheck(bool full) {
    const auto results = run_gradient_suite(3, 1, full);
    bool ok = true;
    std::printf("op,seed,checked,max_rel_error,passed\n");
    for (const auto& r : results) {
        std::printf("%s,%llu,%zu,%.3e,%s\n", r.op.c_str(), static_cast<unsigned long long>(r.seed), r.report.checked,
                    r.report.max_rel_error, r.report.passed ? "yes" : "no");
        ok &= r.report.passed;
    }
    return ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Shape prior segmentation: data, training, evaluation and baselines"};
    app.require_subcommand(1);

    std::string out, ckpt, manifest, split = "test", config, which, csv;
    std::size_t cases = 60, components = 4;
    std::uint64_t seed = 0;
    std::vector<std::size_t> extents{8, 64, 64};
    double noise = 0.1, temperature = 0.0;
    int radius = 2;
    bool full = false;

    auto* gen = app.add_subcommand("gen-data", "Write a synthetic dataset and its manifest");
    gen->add_option("--out", out, "Output directory")->required();
    gen->add_option("--cases", cases, "Number of cases")->capture_default_str();
    gen->add_option("--seed", seed, "Dataset seed")->capture_default_str();
    gen->add_option("--extents", extents, "Volume extents D H W")->expected(3)->capture_default_str();
    gen->add_option("--noise", noise, "Gaussian noise sigma")->capture_default_str();

    auto* tr = app.add_subcommand("train", "Train a model from a JSON config");
    tr->add_option("--config", config, "Training config (JSON)")->required()->check(CLI::ExistingFile);

    auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint on a split");
    ev->add_option("--ckpt", ckpt, "Checkpoint")->required()->check(CLI::ExistingFile);
    ev->add_option("--manifest", manifest, "Dataset manifest")->required()->check(CLI::ExistingFile);
    ev->add_option("--split", split, "train, val or test")->capture_default_str();
    ev->add_option("--out", csv, "Also write the CSV here");

    auto* ex = app.add_subcommand("export-attn", "Export shape prior maps and features for one case");
    ex->add_option("--ckpt", ckpt, "Checkpoint")->required()->check(CLI::ExistingFile);
    ex->add_option("--case", which, "Image volume path, or a case id with --manifest")->required();
    ex->add_option("--manifest", manifest, "Resolve --case as an id in this manifest");
    ex->add_option("--out", out, "Output directory")->required();

    auto* at = app.add_subcommand("baseline-atlas", "Multi-atlas segmentation of the test split");
    at->add_option("--manifest", manifest, "Dataset manifest")->required()->check(CLI::ExistingFile);
    at->add_option("--radius", radius, "Translation search radius (voxels)")->capture_default_str();
    at->add_option("--temperature", temperature, "Fusion temperature; 0 keeps only the best bases")->capture_default_str();
    at->add_option("--out", csv, "Also write the CSV here");

    auto* gm = app.add_subcommand("baseline-gmm", "Per-case EM intensity clustering of the test split");
    gm->add_option("--manifest", manifest, "Dataset manifest")->required()->check(CLI::ExistingFile);
    gm->add_option("--components", components, "Mixture components")->capture_default_str();
    gm->add_option("--seed", seed, "Initialization seed")->capture_default_str();
    gm->add_option("--out", csv, "Also write the CSV here");

    auto* gc = app.add_subcommand("gradcheck", "Finite-difference gradient suite");
    gc->add_flag("--full", full, "Larger instances");

    CLI11_PARSE(app, argc, argv);
    try {
        if (*gen) return gen_data(out, cases, seed, extents, noise);
        if (*tr) return train(config);
        if (*ev) {
            print_report(harness::evaluate(ckpt, manifest, split).record, csv);
            return 0;
        }
        if (*ex) return export_attn(ckpt, which, manifest, out);
        if (*at) return baseline_atlas(manifest, radius, temperature, csv);
        if (*gm) return baseline_gmm(manifest, components, seed, csv);
        if (*gc) return gradcheck(full);
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 1;
}
