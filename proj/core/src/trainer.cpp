#include "shapeprior/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <set>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "shapeprior/losses.hpp"
#include "shapeprior/optim.hpp"

namespace shapeprior::harness {

namespace fs = std::filesystem;

namespace {

std::string fixed(double v, int digits = 6) {
    char buf[48];
    std::snprintf(buf, sizeof buf, "%.*f", digits, v);
    return buf;
}

std::ofstream open_text(const fs::path& path) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw std::runtime_error("cannot write " + path.string());
    return os;
}

fs::path resolve(const fs::path& p, const fs::path& base) { return p.is_absolute() || base.empty() ? p : base / p; }

// Copies a case so augmentation never touches the cached original.
LoadedCase copy_case(const LoadedCase& c) { return {c.id, c.volume.clone(), c.mask}; }

// out[i] = in[map[i]] for the image and the labels.
void remap(LoadedCase& s, const std::vector<std::size_t>& map) {
    auto v = s.volume.data();
    std::vector<float> img(v.begin(), v.end());
    std::vector<std::uint8_t> lab = s.mask.labels;
    for (std::size_t i = 0; i < map.size(); ++i) {
        v[i] = img[map[i]];
        s.mask.labels[i] = lab[map[i]];
    }
}

}  // namespace

void validate(const TrainConfig& c) {
    if (c.epochs < 1) throw std::invalid_argument("train config: epochs must be >= 1");
    if (c.warmup_epochs > c.epochs) throw std::invalid_argument("train config: warmup_epochs exceeds epochs");
    if (c.batch_size < 1) throw std::invalid_argument("train config: batch_size must be >= 1");
    if (!(c.lr > 0.0)) throw std::invalid_argument("train config: lr must be positive");
    if (c.weight_decay < 0.0) throw std::invalid_argument("train config: negative weight_decay");
    if (c.threads != 1) throw std::invalid_argument("train config: only threads = 1 is supported");
    model::validate(c.model);
}

TrainConfig train_config_from_json(const std::string& text, const fs::path& base_dir) {
    static const std::set<std::string> kKeys = {"manifest", "model",   "epochs", "batch_size", "lr",     "warmup_epochs",
                                                "weight_decay", "seed", "augment", "out_dir",  "threads"};
    TrainConfig c;
    try {
        const auto j = nlohmann::json::parse(text);
        if (!j.is_object()) throw std::invalid_argument("train config must be a JSON object");
        for (const auto& [key, value] : j.items())
            if (!kKeys.count(key)) throw std::invalid_argument("unknown train config key '" + key + "'");
        if (!j.contains("manifest")) throw std::invalid_argument("train config: missing 'manifest'");
        c.manifest = resolve(j["manifest"].get<std::string>(), base_dir);
        c.epochs = j.value("epochs", c.epochs);
        c.batch_size = j.value("batch_size", c.batch_size);
        c.lr = j.value("lr", c.lr);
        c.warmup_epochs = j.value("warmup_epochs", c.warmup_epochs);
        c.weight_decay = j.value("weight_decay", c.weight_decay);
        c.seed = j.value("seed", c.seed);
        c.threads = j.value("threads", c.threads);
        if (j.contains("out_dir")) c.out_dir = resolve(j["out_dir"].get<std::string>(), base_dir);
        if (j.contains("augment")) {
            const auto& a = j["augment"];
            for (const auto& [key, value] : a.items())
                if (key != "flip" && key != "rotate") throw std::invalid_argument("unknown augment key '" + key + "'");
            c.augment.flip = a.value("flip", c.augment.flip);
            c.augment.rotate = a.value("rotate", c.augment.rotate);
        }
        nlohmann::json m = j.value("model", nlohmann::json::object());
        if (!m.contains("seed")) m["seed"] = c.seed;
        c.model = model::config_from_json(m.dump());
    } catch (const nlohmann::json::exception& e) {
        throw std::invalid_argument(std::string("malformed train config: ") + e.what());
    }
    validate(c);
    return c;
}

std::string train_config_to_json(const TrainConfig& c) {
    nlohmann::ordered_json j;
    j["manifest"] = c.manifest.string();
    j["model"] = nlohmann::ordered_json::parse(model::config_to_json(c.model));
    j["epochs"] = c.epochs;
    j["batch_size"] = c.batch_size;
    j["lr"] = c.lr;
    j["warmup_epochs"] = c.warmup_epochs;
    j["weight_decay"] = c.weight_decay;
    j["seed"] = c.seed;
    j["augment"] = {{"flip", c.augment.flip}, {"rotate", c.augment.rotate}};
    j["out_dir"] = c.out_dir.string();
    j["threads"] = c.threads;
    return j.dump(2);
}

std::vector<LoadedCase> load_split(const data::DatasetManifest& manifest, const std::string& split) {
    std::vector<LoadedCase> out;
    for (const auto& e : manifest.split(split)) {
        const data::Volume v = data::zscore(data::read_volume(manifest.volume_path(e)));
        data::MaskVolume m = data::read_mask(manifest.mask_path(e));
        if (m.extents != v.extents) throw std::runtime_error("case " + e.id + ": image and mask extents differ");
        data::validate_labels(m, manifest.n_classes);
        out.push_back({e.id, Tensorf({1, v.extents[0], v.extents[1], v.extents[2]}, v.voxels), std::move(m)});
    }
    return out;
}

void augment(LoadedCase& s, const AugmentFlags& flags, std::mt19937_64& rng) {
    const auto e = s.mask.extents;
    std::bernoulli_distribution coin(0.5);
    std::array<bool, 3> flip{false, false, false};
    if (flags.flip)
        for (int a = 0; a < 3; ++a) flip[a] = e[a] > 1 && coin(rng);
    int turns = 0;
    if (flags.rotate && e[1] == e[2]) turns = std::uniform_int_distribution<int>(0, 3)(rng);
    if (!flip[0] && !flip[1] && !flip[2] && turns == 0) return;

    const std::size_t n = e[1];
    std::vector<std::size_t> map(s.mask.labels.size());
    for (std::size_t z = 0; z < e[0]; ++z)
        for (std::size_t y = 0; y < e[1]; ++y)
            for (std::size_t x = 0; x < e[2]; ++x) {
                std::size_t sy = y, sx = x;
                for (int t = 0; t < turns; ++t) {  // one counter-clockwise quarter turn
                    const std::size_t ny = sx, nx = n - 1 - sy;
                    sy = ny;
                    sx = nx;
                }
                const std::size_t fz = flip[0] ? e[0] - 1 - z : z;
                if (flip[1]) sy = e[1] - 1 - sy;
                if (flip[2]) sx = e[2] - 1 - sx;
                map[s.mask.index(z, y, x)] = s.mask.index(fz, sy, sx);
            }
    remap(s, map);
}

data::MaskVolume predict(model::UNetModel<float>& m, const LoadedCase& sample) {
    NoGradGuard guard;
    const Tensorf logits = model::forward(m, sample.volume);
    const std::size_t n = logits.dim(0), vox = logits.size() / n;
    data::MaskVolume out(sample.mask.extents, sample.mask.spacing);
    const auto z = logits.data();
    for (std::size_t v = 0; v < vox; ++v) {
        std::size_t best = 0;
        for (std::size_t c = 1; c < n; ++c)
            if (z[c * vox + v] > z[best * vox + v]) best = c;
        out.labels[v] = static_cast<std::uint8_t>(best);
    }
    return out;
}

EvalReport evaluate(model::UNetModel<float>& m, const std::vector<LoadedCase>& cases, std::size_t epoch,
                    const std::string& split) {
    EvalReport r;
    for (const auto& c : cases) r.cases.push_back(case_metrics(c.id, predict(m, c), c.mask, m.config.n_classes));
    r.record = aggregate(r.cases, epoch, split);
    return r;
}

EvalReport evaluate(const fs::path& checkpoint, const fs::path& manifest_path, const std::string& split) {
    auto m = model::load_checkpoint(checkpoint);
    const auto manifest = data::read_manifest(manifest_path);
    if (manifest.n_classes != m.config.n_classes)
        throw std::invalid_argument("checkpoint has " + std::to_string(m.config.n_classes) + " classes, manifest " +
                                    std::to_string(manifest.n_classes));
    const auto cases = load_split(manifest, split);
    if (cases.empty()) throw std::invalid_argument("split '" + split + "' has no cases");
    return evaluate(m, cases, 0, split);
}

TrainResult train(const TrainConfig& cfg, const Logger& log) {
    validate(cfg);
    const auto manifest = data::read_manifest(cfg.manifest);
    if (manifest.n_classes != cfg.model.n_classes)
        throw std::invalid_argument("model has " + std::to_string(cfg.model.n_classes) + " classes but the manifest has " +
                                    std::to_string(manifest.n_classes));
    const auto train_cases = load_split(manifest, "train");
    const auto val_cases = load_split(manifest, "val");
    if (train_cases.empty() || val_cases.empty()) throw std::invalid_argument("need at least one train and one val case");
    for (const auto& c : train_cases)
        if (c.mask.extents != cfg.model.patch)
            throw std::invalid_argument("case " + c.id + " extents do not match the model patch; volumes are used whole");

    fs::create_directories(cfg.out_dir);
    open_text(cfg.out_dir / "config.json") << train_config_to_json(cfg) << '\n';
    auto metrics = open_text(cfg.out_dir / "metrics.csv");
    auto losses = open_text(cfg.out_dir / "loss.csv");
    metrics << kMetricsHeader << '\n';
    losses << "epoch,train_loss,lr\n";

    auto m = model::build_model<float>(cfg.model);
    AdamW opt(m.parameters(), {.weight_decay = cfg.weight_decay});
    const std::size_t steps_per_epoch = (train_cases.size() + cfg.batch_size - 1) / cfg.batch_size;
    const std::size_t total_steps = steps_per_epoch * cfg.epochs;
    const std::size_t warmup_steps = steps_per_epoch * cfg.warmup_epochs;
    std::mt19937_64 rng(cfg.seed);
    std::vector<std::size_t> order(train_cases.size());
    std::iota(order.begin(), order.end(), 0);

    TrainResult result;
    result.checkpoint = cfg.out_dir / "best.spmc";
    std::size_t step = 0;
    double lr = 0.0;
    for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng);
        double loss_sum = 0.0;
        for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
            const std::size_t end = std::min(order.size(), start + cfg.batch_size);
            opt.zero_grad();
            for (std::size_t i = start; i < end; ++i) {
                LoadedCase s = copy_case(train_cases[order[i]]);
                augment(s, cfg.augment, rng);
                const Tensorf loss = total_loss(model::forward(m, s.volume), std::span<const std::uint8_t>(s.mask.labels));
                const double value = loss.item();
                if (!std::isfinite(value))
                    throw NumericError("non-finite loss at epoch " + std::to_string(epoch) + ", step " + std::to_string(step) +
                                       ", case " + s.id);
                ops::scale(loss, 1.0f / float(end - start)).backward();
                loss_sum += value;
            }
            lr = warmup_cosine(cfg.lr, step++, warmup_steps, total_steps);
            opt.step(lr);
        }
        const double train_loss = loss_sum / double(train_cases.size());
        const EvalReport val = evaluate(m, val_cases, epoch, "val");
        result.train_loss.push_back(train_loss);
        result.val.push_back(val.record);
        metrics << metrics_rows(val.record, false) << std::flush;
        losses << epoch << ',' << fixed(train_loss) << ',' << fixed(lr, 9) << '\n' << std::flush;
        const bool best = val.record.mean_dice > result.best_val_dice;
        if (best) {
            result.best_val_dice = val.record.mean_dice;
            result.best_epoch = epoch;
            model::save_checkpoint(result.checkpoint, m);
        }
        if (log)
            log("epoch " + std::to_string(epoch) + "/" + std::to_string(cfg.epochs) + " loss " + fixed(train_loss, 4) +
                " val dice " + fixed(val.record.mean_dice, 4) + (best ? " *" : ""));
    }
    return result;
}

std::size_t expected_export_files(std::size_t n_classes, bool spm_enabled) {
    const std::size_t priors = spm_enabled ? model::kSpmStages * n_classes * 3 : 0;
    return priors + model::kSpmStages * 2 + 2;
}

void write_pgm(const fs::path& path, std::size_t width, std::size_t height, const std::vector<std::uint8_t>& pixels) {
    if (pixels.size() != width * height) throw std::invalid_argument("write_pgm: pixel count does not match dimensions");
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("cannot write " + path.string());
    os << "P5\n" << width << ' ' << height << "\n255\n";
    os.write(reinterpret_cast<const char*>(pixels.data()), static_cast<std::streamsize>(pixels.size()));
    if (!os) throw std::runtime_error("write failed: " + path.string());
}

std::vector<std::uint8_t> to_gray(const std::vector<float>& values, float lo, float hi) {
    std::vector<std::uint8_t> out(values.size(), 128);
    if (!(hi > lo)) return out;
    for (std::size_t i = 0; i < values.size(); ++i)
        out[i] = static_cast<std::uint8_t>(std::lround(255.0 * (double(values[i]) - lo) / (double(hi) - lo)));
    return out;
}

ExportSummary export_attention(model::UNetModel<float>& m, const Tensorf& volume, const fs::path& out_dir) {
    fs::create_directories(out_dir);
    ExportSummary s;
    s.stages = model::export_stage_priors(m, volume);
    auto priors_csv = open_text(out_dir / "priors.csv");
    auto features_csv = open_text(out_dir / "features.csv");
    priors_csv << "stage,kind,channel,z,y,x,value\n";
    features_csv << "stage,which,z,y,x,value\n";

    for (const auto& st : s.stages) {
        const std::string stage = "stage" + std::to_string(st.spm_stage);
        if (st.prior.defined()) {
            const std::pair<const char*, const Tensorf*> kinds[] = {{"global", &st.global}, {"local", &st.local}, {"enhanced", &st.prior}};
            for (const auto& [kind, t] : kinds) {
                const std::size_t n = t->dim(0), d = t->dim(1), h = t->dim(2), w = t->dim(3);
                for (std::size_t c = 0; c < n; ++c) {
                    std::vector<float> slice(h * w);
                    for (std::size_t y = 0; y < h; ++y)
                        for (std::size_t x = 0; x < w; ++x) slice[y * w + x] = t->at(((c * d + d / 2) * h + y) * w + x);
                    const auto [lo, hi] = std::minmax_element(slice.begin(), slice.end());
                    const fs::path p = out_dir / (stage + "_" + kind + "_c" + std::to_string(c) + ".pgm");
                    write_pgm(p, w, h, to_gray(slice, *lo, *hi));
                    s.files.push_back(p);
                    for (std::size_t z = 0; z < d; ++z)
                        for (std::size_t y = 0; y < h; ++y)
                            for (std::size_t x = 0; x < w; ++x)
                                priors_csv << st.spm_stage << ',' << kind << ',' << c << ',' << z << ',' << y << ',' << x << ','
                                           << fixed(t->at(((c * d + z) * h + y) * w + x), 8) << '\n';
                }
            }
        }
        // Channel-mean F_o and F_e on a shared intensity range.
        const std::size_t ch = st.features_in.dim(0), vox = st.features_in.size() / ch;
        const std::size_t d = st.features_in.dim(1), h = st.features_in.dim(2), w = st.features_in.dim(3);
        std::vector<float> mean_in(vox, 0.0f), mean_out(vox, 0.0f);
        for (std::size_t c = 0; c < ch; ++c)
            for (std::size_t v = 0; v < vox; ++v) {
                mean_in[v] += st.features_in.at(c * vox + v) / float(ch);
                mean_out[v] += st.features_out.at(c * vox + v) / float(ch);
            }
        const std::size_t off = (d / 2) * h * w;
        std::vector<float> a(mean_in.begin() + off, mean_in.begin() + off + h * w);
        std::vector<float> b(mean_out.begin() + off, mean_out.begin() + off + h * w);
        float lo = std::min(*std::min_element(a.begin(), a.end()), *std::min_element(b.begin(), b.end()));
        float hi = std::max(*std::max_element(a.begin(), a.end()), *std::max_element(b.begin(), b.end()));
        for (const auto& [which, img] : {std::pair{"before", &a}, std::pair{"after", &b}}) {
            const fs::path p = out_dir / (stage + "_features_" + which + ".pgm");
            write_pgm(p, w, h, to_gray(*img, lo, hi));
            s.files.push_back(p);
        }
        for (const auto& [which, vals] : {std::pair{"before", &mean_in}, std::pair{"after", &mean_out}})
            for (std::size_t v = 0; v < vox; ++v)
                features_csv << st.spm_stage << ',' << which << ',' << v / (h * w) << ',' << (v / w) % h << ',' << v % w << ','
                             << fixed((*vals)[v], 8) << '\n';
    }
    s.files.push_back(out_dir / "priors.csv");
    s.files.push_back(out_dir / "features.csv");
    return s;
}

ExportSummary export_attention(const fs::path& checkpoint, const fs::path& volume, const fs::path& out_dir) {
    auto m = model::load_checkpoint(checkpoint);
    const data::Volume v = data::zscore(data::read_volume(volume));
    return export_attention(m, Tensorf({1, v.extents[0], v.extents[1], v.extents[2]}, v.voxels), out_dir);
}

std::vector<Localisation> prior_localisation(const std::vector<model::StageSnapshot<float>>& stages,
                                             const data::MaskVolume& mask) {
    std::vector<Localisation> out;
    for (const auto& st : stages) {
        if (!st.prior.defined()) continue;
        const Tensorf up = ops::resize_trilinear(st.prior, mask.extents);
        const std::size_t vox = mask.labels.size();
        for (std::size_t c = 1; c < up.dim(0); ++c) {
            double in = 0, outside = 0;
            std::size_t n_in = 0;
            for (std::size_t v = 0; v < vox; ++v) {
                const double a = up.at(c * vox + v);
                if (mask.labels[v] == c) {
                    in += a;
                    ++n_in;
                } else {
                    outside += a;
                }
            }
            if (n_in == 0 || n_in == vox) continue;
            out.push_back({st.spm_stage, c, in / double(n_in), outside / double(vox - n_in)});
        }
    }
    return out;
}

}  // namespace shapeprior::harness
