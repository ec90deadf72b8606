#include "shapeprior/backbone.hpp"

#include <cstring>
#include <fstream>
#include <set>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "binary_io.hpp"
#include "shapeprior/random.hpp"

namespace shapeprior::model {

namespace {

constexpr char kMagic[4] = {'S', 'P', 'M', 'C'};
constexpr std::uint64_t kSpmStream = 0x9E3779B97F4A7C15ULL;
constexpr std::uint64_t kPriorStream = 0xD1B54A32D192ED03ULL;

Extents3 kernel_for(const ModelConfig& cfg, const Extents3& in) {
    return {in[0] == 1 ? 1 : cfg.kernel_depth, in[1] == 1 ? std::size_t{1} : 3, in[2] == 1 ? std::size_t{1} : 3};
}

Extents3 stride_for(const ModelConfig& cfg) {
    return {cfg.patch[0] == 1 ? std::size_t{1} : 2, cfg.patch[1] == 1 ? std::size_t{1} : 2,
            cfg.patch[2] == 1 ? std::size_t{1} : 2};
}

template <typename T>
ConvNorm<T> make_conv_norm(std::size_t in, std::size_t out, const Extents3& k, const Extents3& stride,
                           std::mt19937_64& rng) {
    ConvNorm<T> c;
    c.kernel = fan_in_uniform<T>({out, in, k[0], k[1], k[2]}, in * k[0] * k[1] * k[2], rng);
    c.gamma = Tensor<T>::ones({out});
    c.beta = Tensor<T>::zeros({out});
    c.params.stride = stride;
    c.params.padding = {k[0] / 2, k[1] / 2, k[2] / 2};
    for (auto* t : {&c.kernel, &c.gamma, &c.beta}) t->set_requires_grad(true);
    return c;
}

template <typename T>
ResBlock<T> make_block(const ModelConfig& cfg, std::size_t in, std::size_t out, const Extents3& in_extents,
                       const Extents3& stride, std::mt19937_64& rng) {
    ResBlock<T> b;
    const Extents3 out_extents = {in_extents[0] / stride[0], in_extents[1] / stride[1], in_extents[2] / stride[2]};
    b.conv1 = make_conv_norm<T>(in, out, kernel_for(cfg, in_extents), stride, rng);
    b.conv2 = make_conv_norm<T>(out, out, kernel_for(cfg, out_extents), {1, 1, 1}, rng);
    if (in != out || stride != Extents3{1, 1, 1}) b.projection = make_conv_norm<T>(in, out, {1, 1, 1}, stride, rng);
    return b;
}

template <typename T>
Tensor<T> apply(const ConvNorm<T>& c, const Tensor<T>& x) {
    return ops::channel_norm(ops::conv3d(x, c.kernel, Tensor<T>{}, c.params), c.gamma, c.beta);
}

template <typename T>
Tensor<T> apply(const ResBlock<T>& b, const Tensor<T>& x) {
    const Tensor<T> h = apply(b.conv2, ops::leaky_relu(apply(b.conv1, x)));
    const Tensor<T> shortcut = b.projection ? apply(*b.projection, x) : x;
    return ops::leaky_relu(ops::add(h, shortcut));
}

template <typename T>
void push(NamedTensors<T>& out, const std::string& prefix, const ConvNorm<T>& c) {
    out.emplace_back(prefix + ".w", c.kernel);
    out.emplace_back(prefix + ".gamma", c.gamma);
    out.emplace_back(prefix + ".beta", c.beta);
}

template <typename T>
void push(NamedTensors<T>& out, const std::string& prefix, const ResBlock<T>& b) {
    push(out, prefix + ".conv1", b.conv1);
    push(out, prefix + ".conv2", b.conv2);
    if (b.projection) push(out, prefix + ".proj", *b.projection);
}

std::size_t conv_norm_count(std::size_t in, std::size_t out, const Extents3& k) {
    return out * in * k[0] * k[1] * k[2] + 2 * out;
}

std::size_t block_count(const ModelConfig& cfg, std::size_t in, std::size_t out, const Extents3& in_extents,
                        bool strided) {
    const Extents3 s = strided ? stride_for(cfg) : Extents3{1, 1, 1};
    const Extents3 out_extents = {in_extents[0] / s[0], in_extents[1] / s[1], in_extents[2] / s[2]};
    std::size_t n = conv_norm_count(in, out, kernel_for(cfg, in_extents)) +
                    conv_norm_count(out, out, kernel_for(cfg, out_extents));
    if (in != out || strided) n += conv_norm_count(in, out, {1, 1, 1});
    return n;
}

}  // namespace

std::string config_to_json(const ModelConfig& c) {
    nlohmann::ordered_json j;
    j["in_channels"] = c.in_channels;
    j["n_classes"] = c.n_classes;
    j["base_width"] = c.base_width;
    j["stage_factors"] = c.stage_factors;
    j["spm_enabled"] = c.spm_enabled;
    j["patch"] = c.patch;
    j["seed"] = c.seed;
    j["kernel_depth"] = c.kernel_depth;
    j["blocks_per_stage"] = c.blocks_per_stage;
    j["attention_scale"] = spm::to_string(c.attention_scale);
    return j.dump();
}

ModelConfig config_from_json(const std::string& text) {
    static const std::set<std::string> kKeys = {"in_channels", "n_classes",  "base_width",   "stage_factors",
                                                "spm_enabled", "patch",      "seed",         "kernel_depth",
                                                "blocks_per_stage", "attention_scale"};
    ModelConfig c;
    try {
        const auto j = nlohmann::json::parse(text);
        if (!j.is_object()) throw std::invalid_argument("model config must be a JSON object");
        for (const auto& [key, value] : j.items())
            if (!kKeys.count(key)) throw std::invalid_argument("unknown model config key '" + key + "'");
        c.in_channels = j.value("in_channels", c.in_channels);
        c.n_classes = j.value("n_classes", c.n_classes);
        c.base_width = j.value("base_width", c.base_width);
        c.stage_factors = j.value("stage_factors", c.stage_factors);
        c.spm_enabled = j.value("spm_enabled", c.spm_enabled);
        c.patch = j.value("patch", c.patch);
        c.seed = j.value("seed", c.seed);
        c.kernel_depth = j.value("kernel_depth", c.kernel_depth);
        c.blocks_per_stage = j.value("blocks_per_stage", c.blocks_per_stage);
        if (j.contains("attention_scale"))
            c.attention_scale = spm::attention_scale_from_string(j["attention_scale"].get<std::string>());
    } catch (const nlohmann::json::exception& e) {
        throw std::invalid_argument(std::string("malformed model config: ") + e.what());
    }
    return c;
}

void validate(const ModelConfig& c) {
    if (c.in_channels == 0 || c.base_width == 0 || c.blocks_per_stage == 0)
        throw std::invalid_argument("model config: channels, width and blocks must be positive");
    if (c.n_classes < 2) throw std::invalid_argument("model config: need at least 2 classes");
    if (c.stage_factors != std::array<std::size_t, 3>{2, 4, 8})
        throw std::invalid_argument("model config: stage factors must be [2, 4, 8]");
    if (c.kernel_depth != 1 && c.kernel_depth != 3) throw std::invalid_argument("model config: kernel_depth must be 1 or 3");
    for (auto e : c.patch)
        if (e == 0 || (e != 1 && e % 8 != 0))
            throw std::invalid_argument("model config: patch extents must be 1 or divisible by 8, got " +
                                        shape_str({c.patch[0], c.patch[1], c.patch[2]}));
}

Extents3 stage_extents(const ModelConfig& c, std::size_t stage) {
    Extents3 e = c.patch;
    for (auto& v : e)
        if (v > 1) v >>= stage;
    return e;
}

std::size_t stage_width(const ModelConfig& c, std::size_t stage) { return c.base_width << stage; }

spm::SpmConfig spm_stage_config(const ModelConfig& c, std::size_t spm_stage) {
    if (spm_stage < 1 || spm_stage > kSpmStages) throw std::out_of_range("spm stage must be 1..3");
    const std::size_t enc = kEncoderStages - spm_stage;  // stage 1 sits on the deepest skip
    spm::SpmConfig s;
    s.classes = c.n_classes;
    s.channels = stage_width(c, enc);
    s.stage_factor = c.stage_factors[enc - 1];
    s.prior = spm::prior_extents(c.patch);
    s.features = stage_extents(c, enc);
    s.scale = c.attention_scale;
    return s;
}

template <typename T>
NamedTensors<T> UNetModel<T>::parameters() const {
    NamedTensors<T> out;
    for (std::size_t s = 0; s < kEncoderStages; ++s) {
        const std::string p = "enc" + std::to_string(s);
        if (encoder[s].stem) push(out, p + ".stem", *encoder[s].stem);
        for (std::size_t b = 0; b < encoder[s].blocks.size(); ++b) push(out, p + ".block" + std::to_string(b), encoder[s].blocks[b]);
    }
    for (std::size_t s = kEncoderStages - 1; s-- > 0;) {
        const std::string p = "dec" + std::to_string(s);
        push(out, p + ".fuse", decoder[s].fuse);
        push(out, p + ".block", decoder[s].block);
    }
    out.emplace_back("head.w", head_w);
    out.emplace_back("head.b", head_b);
    if (config.spm_enabled) {
        out.emplace_back("spm.prior", prior.values);
        for (std::size_t i = 0; i < spm.size(); ++i) {
            auto named = spm::named_parameters(spm[i], "spm.stage" + std::to_string(i + 1) + ".");
            out.insert(out.end(), named.begin(), named.end());
        }
    }
    return out;
}

template <typename T>
std::size_t UNetModel<T>::parameter_count() const {
    std::size_t n = 0;
    for (const auto& [name, t] : parameters()) n += t.size();
    return n;
}

template <typename T>
const std::vector<StageSnapshot<T>>& UNetModel<T>::last_stages() const {
    if (!last_stages_) throw std::logic_error("stage snapshots requested before any forward pass");
    return *last_stages_;
}

template <typename T>
UNetModel<T> build_model(const ModelConfig& cfg) {
    validate(cfg);
    UNetModel<T> m;
    m.config = cfg;
    std::mt19937_64 rng(cfg.seed);
    const Extents3 stride = stride_for(cfg);

    auto& stem_stage = m.encoder[0];
    stem_stage.stem = make_conv_norm<T>(cfg.in_channels, stage_width(cfg, 0), kernel_for(cfg, cfg.patch), {1, 1, 1}, rng);
    for (std::size_t s = 0; s < kEncoderStages; ++s) {
        const std::size_t width = stage_width(cfg, s);
        for (std::size_t b = 0; b < cfg.blocks_per_stage; ++b) {
            const bool down = s > 0 && b == 0;
            const std::size_t in = down ? stage_width(cfg, s - 1) : width;
            const Extents3 in_extents = down ? stage_extents(cfg, s - 1) : stage_extents(cfg, s);
            m.encoder[s].blocks.push_back(make_block<T>(cfg, in, width, in_extents, down ? stride : Extents3{1, 1, 1}, rng));
        }
    }
    for (std::size_t s = kEncoderStages - 1; s-- > 0;) {
        const std::size_t width = stage_width(cfg, s);
        const Extents3 e = stage_extents(cfg, s);
        m.decoder[s].fuse = make_conv_norm<T>(width + stage_width(cfg, s + 1), width, kernel_for(cfg, e), {1, 1, 1}, rng);
        m.decoder[s].block = make_block<T>(cfg, width, width, e, {1, 1, 1}, rng);
    }
    const std::size_t w0 = stage_width(cfg, 0);
    m.head_w = fan_in_uniform<T>({cfg.n_classes, w0, 1, 1, 1}, w0, rng).set_requires_grad(true);
    m.head_b = Tensor<T>::zeros({cfg.n_classes}).set_requires_grad(true);

    if (cfg.spm_enabled) {
        std::mt19937_64 spm_rng(cfg.seed ^ kSpmStream);
        for (std::size_t i = 1; i <= kSpmStages; ++i) m.spm.push_back(spm::init_spm_weights<T>(spm_stage_config(cfg, i), spm_rng));
        m.prior = spm::init_shape_prior<T>(cfg.n_classes, cfg.patch, cfg.seed ^ kPriorStream);
    }
    return m;
}

std::size_t parameter_count(const ModelConfig& cfg) {
    validate(cfg);
    std::size_t n = conv_norm_count(cfg.in_channels, stage_width(cfg, 0), kernel_for(cfg, cfg.patch));
    for (std::size_t s = 0; s < kEncoderStages; ++s) {
        const std::size_t width = stage_width(cfg, s);
        n += block_count(cfg, s > 0 ? stage_width(cfg, s - 1) : width, width, stage_extents(cfg, s > 0 ? s - 1 : 0), s > 0);
        n += (cfg.blocks_per_stage - 1) * block_count(cfg, width, width, stage_extents(cfg, s), false);
    }
    for (std::size_t s = 0; s + 1 < kEncoderStages; ++s) {
        const std::size_t width = stage_width(cfg, s);
        const Extents3 k = kernel_for(cfg, stage_extents(cfg, s));
        n += conv_norm_count(width + stage_width(cfg, s + 1), width, k) + block_count(cfg, width, width, stage_extents(cfg, s), false);
    }
    n += cfg.n_classes * stage_width(cfg, 0) + cfg.n_classes;
    if (cfg.spm_enabled) {
        const Extents3 p = spm::prior_extents(cfg.patch);
        n += cfg.n_classes * p[0] * p[1] * p[2];
        for (std::size_t i = 1; i <= kSpmStages; ++i) n += spm::parameter_count(spm_stage_config(cfg, i));
    }
    return n;
}

template <typename T>
Tensor<T> forward(UNetModel<T>& m, const Tensor<T>& volume) {
    const ModelConfig& cfg = m.config;
    const Shape expected = {cfg.in_channels, cfg.patch[0], cfg.patch[1], cfg.patch[2]};
    if (volume.shape() != expected)
        throw ShapeError("forward: input " + shape_str(volume.shape()) + " does not match configured " + shape_str(expected));

    std::array<Tensor<T>, kEncoderStages> skips;
    Tensor<T> x = ops::leaky_relu(apply(*m.encoder[0].stem, volume));
    for (std::size_t s = 0; s < kEncoderStages; ++s) {
        for (const auto& b : m.encoder[s].blocks) x = apply(b, x);
        skips[s] = x;
    }

    std::vector<StageSnapshot<T>> snapshots;
    spm::ShapePrior<T> prior = m.prior;
    for (std::size_t i = 1; i <= kSpmStages; ++i) {
        const std::size_t enc = kEncoderStages - i;
        StageSnapshot<T> snap;
        snap.spm_stage = i;
        snap.stage_factor = cfg.stage_factors[enc - 1];
        snap.features_in = skips[enc].detach();
        if (cfg.spm_enabled) {
            const auto out = spm::spm_forward<T>({skips[enc], snap.stage_factor}, prior, m.spm[i - 1]);
            skips[enc] = out.enhanced.values;
            prior = out.prior;
            snap.prior = prior.values.detach();
            snap.global = out.global.values.detach();
            snap.local = out.local.values.detach();
        }
        snap.features_out = skips[enc].detach();
        snapshots.push_back(std::move(snap));
    }

    x = skips[kEncoderStages - 1];
    for (std::size_t s = kEncoderStages - 1; s-- > 0;) {
        const Tensor<T> up = ops::resize_trilinear(x, ops::spatial_extents(skips[s]));
        x = ops::leaky_relu(apply(m.decoder[s].fuse, ops::concat0(up, skips[s])));
        x = apply(m.decoder[s].block, x);
    }
    m.record_stages(std::move(snapshots));
    return ops::conv3d(x, m.head_w, m.head_b);
}

template <typename T>
std::vector<StageSnapshot<T>> export_stage_priors(UNetModel<T>& model, const Tensor<T>& volume) {
    NoGradGuard guard;
    forward(model, volume);
    return model.last_stages();
}

template <typename T>
const std::vector<StageSnapshot<T>>& export_stage_priors(const UNetModel<T>& model) {
    return model.last_stages();
}

void save_checkpoint(const std::filesystem::path& path, const UNetModel<float>& model) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw CheckpointError("cannot open " + path.string() + " for writing");
    os.write(kMagic, 4);
    detail::write_le<std::uint32_t>(os, kCheckpointVersion);
    const std::string cfg = config_to_json(model.config);
    detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(cfg.size()));
    os.write(cfg.data(), static_cast<std::streamsize>(cfg.size()));
    const auto params = model.parameters();
    detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(params.size()));
    std::uint64_t offset = 0;
    for (const auto& [name, t] : params) {
        detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
        os.write(name.data(), static_cast<std::streamsize>(name.size()));
        detail::write_le<std::uint8_t>(os, static_cast<std::uint8_t>(t.ndim()));
        for (auto d : t.shape()) detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(d));
        detail::write_le<std::uint64_t>(os, offset);
        offset += t.size() * sizeof(float);
    }
    for (const auto& [name, t] : params) detail::write_le_span<float>(os, t.data());
    if (!os) throw CheckpointError("write failed: " + path.string());
}

UNetModel<float> load_checkpoint(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw CheckpointError("cannot open checkpoint " + path.string());
    char magic[4];
    if (!is.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0)
        throw CheckpointError(path.string() + ": bad magic, not an SPMC checkpoint");
    const auto version = detail::read_le<CheckpointError, std::uint32_t>(is, "version");
    if (version != kCheckpointVersion)
        throw CheckpointError(path.string() + ": unsupported checkpoint version " + std::to_string(version));
    std::string cfg(detail::read_le<CheckpointError, std::uint32_t>(is, "config length"), '\0');
    if (!is.read(cfg.data(), static_cast<std::streamsize>(cfg.size()))) throw CheckpointError("truncated checkpoint config");
    UNetModel<float> model = build_model<float>(config_from_json(cfg));
    auto params = model.parameters();

    const auto count = detail::read_le<CheckpointError, std::uint32_t>(is, "tensor count");
    if (count != params.size())
        throw CheckpointError("checkpoint holds " + std::to_string(count) + " tensors, model expects " + std::to_string(params.size()));
    std::uint64_t expected_offset = 0;
    for (auto& [name, t] : params) {
        std::string stored(detail::read_le<CheckpointError, std::uint32_t>(is, "name length"), '\0');
        if (!is.read(stored.data(), static_cast<std::streamsize>(stored.size()))) throw CheckpointError("truncated tensor name");
        Shape shape(detail::read_le<CheckpointError, std::uint8_t>(is, "ndim"));
        for (auto& d : shape) d = detail::read_le<CheckpointError, std::uint32_t>(is, "dims");
        const auto offset = detail::read_le<CheckpointError, std::uint64_t>(is, "offset");
        if (stored != name || shape != t.shape() || offset != expected_offset)
            throw CheckpointError("checkpoint tensor '" + stored + "' " + shape_str(shape) + " does not match model tensor '" +
                                  name + "' " + shape_str(t.shape()));
        expected_offset += t.size() * sizeof(float);
    }
    for (auto& [name, t] : params) detail::read_le_span<CheckpointError, float>(is, t.data(), name);
    if (is.peek() != std::char_traits<char>::eof()) throw CheckpointError("trailing bytes after checkpoint buffers");
    return model;
}

template <typename T>
std::uint64_t parameter_checksum(const UNetModel<T>& model) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const auto& [name, t] : model.parameters()) {
        const auto bytes = std::as_bytes(t.data());
        for (std::byte b : bytes) h = (h ^ static_cast<std::uint64_t>(b)) * 0x100000001b3ULL;
    }
    return h;
}

#define SHAPEPRIOR_INSTANTIATE_MODEL(T)                                                               \
    template class UNetModel<T>;                                                                      \
    template UNetModel<T> build_model(const ModelConfig&);                                            \
    template Tensor<T> forward(UNetModel<T>&, const Tensor<T>&);                                      \
    template std::vector<StageSnapshot<T>> export_stage_priors(UNetModel<T>&, const Tensor<T>&);      \
    template const std::vector<StageSnapshot<T>>& export_stage_priors(const UNetModel<T>&);           \
    template std::uint64_t parameter_checksum(const UNetModel<T>&);

SHAPEPRIOR_INSTANTIATE_MODEL(float)
SHAPEPRIOR_INSTANTIATE_MODEL(double)

}  // namespace shapeprior::model
