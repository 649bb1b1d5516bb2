#ifndef HOPFLOW_MODEL_HPP
#define HOPFLOW_MODEL_HPP

// Hop-interaction classifier: a shared linear encoder over the L+1 hop tokens of
// each node (plus a learned per-hop order embedding), K residual interaction
// layers among those tokens, fusion of the tokens into one vector, and a linear
// softmax head.
//
// Parameter names:
//   encoder.weight [d_in, d]    encoder.bias [d]     order_embedding [L+1, d]
//   interaction.<k>.wq/wk/wv [d, d] (+ .wo)           attention kind
//   interaction.<k>.weight [d or 2d, d], .bias [d]    gcn_mean / sage / mlp kinds
//   interaction.<k>.norm.gamma/.beta [d]              every kind except none
//   fusion.score [d]                                  attention fusion only
//   head.weight [d, c]          head.bias [c]

#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "autodiff.hpp"
#include "io.hpp"
#include "params.hpp"

namespace hopflow {

enum class InteractionKind { attention, gcn_mean, sage, mlp, none };
enum class FusionKind { mean, max, attention };

inline InteractionKind parse_interaction_kind(std::string_view s)
{
    if (s == "attention") return InteractionKind::attention;
    if (s == "gcn_mean" || s == "gcn") return InteractionKind::gcn_mean;
    if (s == "sage") return InteractionKind::sage;
    if (s == "mlp") return InteractionKind::mlp;
    if (s == "none") return InteractionKind::none;
    throw ConfigError("unknown interaction kind '" + std::string(s) + "'");
}

inline std::string to_string(InteractionKind k)
{
    switch (k) {
    case InteractionKind::attention: return "attention";
    case InteractionKind::gcn_mean: return "gcn_mean";
    case InteractionKind::sage: return "sage";
    case InteractionKind::mlp: return "mlp";
    case InteractionKind::none: return "none";
    }
    return "?";
}

inline FusionKind parse_fusion_kind(std::string_view s)
{
    if (s == "mean") return FusionKind::mean;
    if (s == "max") return FusionKind::max;
    if (s == "attention") return FusionKind::attention;
    throw ConfigError("unknown fusion kind '" + std::string(s) + "'");
}

inline std::string to_string(FusionKind k)
{
    switch (k) {
    case FusionKind::mean: return "mean";
    case FusionKind::max: return "max";
    case FusionKind::attention: return "attention";
    }
    return "?";
}

struct ModelConfig {
    std::size_t hops = 6;    // L; the model sees L+1 tokens
    std::size_t layers = 2;  // K interaction layers
    std::size_t hidden = 128;
    std::size_t heads = 1;
    InteractionKind interaction = InteractionKind::attention;
    FusionKind fusion = FusionKind::mean;
    bool order_embedding = true;
    bool output_projection = false;
    bool encoder_activation = false;
    double dropout = 0.5;
    double norm_eps = 1e-5;
    std::size_t input_dim = 0;
    std::size_t num_classes = 0;

    std::size_t num_tokens() const { return hops + 1; }

    void validate() const
    {
        if (hidden == 0) throw ConfigError("model.hidden must be >= 1");
        if (heads == 0 || hidden % heads != 0)
            throw ConfigError("model.hidden=" + std::to_string(hidden) + " is not divisible by model.heads=" + std::to_string(heads));
        if (layers == 0 && interaction != InteractionKind::none) throw ConfigError("model.layers must be >= 1 unless interaction is none");
        if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("model.dropout must be in [0, 1)");
        if (input_dim == 0) throw ConfigError("model.input_dim is not set");
        if (num_classes < 2) throw ConfigError("model.num_classes must be >= 2");
    }
};

inline void to_json(nlohmann::json& j, const ModelConfig& c)
{
    j = nlohmann::json{{"hops", c.hops},
                       {"layers", c.layers},
                       {"hidden", c.hidden},
                       {"heads", c.heads},
                       {"interaction_kind", to_string(c.interaction)},
                       {"fusion_kind", to_string(c.fusion)},
                       {"use_order_embedding", c.order_embedding},
                       {"output_projection", c.output_projection},
                       {"encoder_activation", c.encoder_activation},
                       {"dropout", c.dropout},
                       {"norm_eps", c.norm_eps},
                       {"input_dim", c.input_dim},
                       {"num_classes", c.num_classes}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c)
{
    auto get = [&j](const char* key, auto& field) {
        if (j.contains(key)) j.at(key).get_to(field);
    };
    get("hops", c.hops);
    get("layers", c.layers);
    get("hidden", c.hidden);
    get("heads", c.heads);
    if (j.contains("interaction_kind")) c.interaction = parse_interaction_kind(j.at("interaction_kind").get<std::string>());
    if (j.contains("fusion_kind")) c.fusion = parse_fusion_kind(j.at("fusion_kind").get<std::string>());
    get("use_order_embedding", c.order_embedding);
    get("output_projection", c.output_projection);
    get("encoder_activation", c.encoder_activation);
    get("dropout", c.dropout);
    get("norm_eps", c.norm_eps);
    get("input_dim", c.input_dim);
    get("num_classes", c.num_classes);
}

/// Closed-form number of trainable scalars implied by a config.
inline std::size_t expected_param_count(const ModelConfig& c)
{
    const std::size_t d = c.hidden;
    std::size_t n = c.input_dim * d + d + d * c.num_classes + c.num_classes;
    if (c.order_embedding) n += c.num_tokens() * d;
    std::size_t per_layer = 0;
    switch (c.interaction) {
    case InteractionKind::attention: per_layer = 3 * d * d + (c.output_projection ? d * d : 0); break;
    case InteractionKind::gcn_mean:
    case InteractionKind::mlp: per_layer = d * d + d; break;
    case InteractionKind::sage: per_layer = 2 * d * d + d; break;
    case InteractionKind::none: break;
    }
    if (c.interaction != InteractionKind::none) n += c.layers * (per_layer + 2 * d);
    if (c.fusion == FusionKind::attention) n += d;
    return n;
}

template <class Real>
struct ForwardResult {
    ad::Var logits; // b x c
    ad::Var probs;  // b x c
    ad::Var hk;     // b x (L+1) x d, after the last interaction layer
    ad::Var z;      // b x d, fused
};

template <class Real>
class Model {
public:
    Model() = default;
    Model(ModelConfig config, ParamStore<Real> params) : config_(std::move(config)), params_(std::move(params))
    {
        config_.validate();
        check_shapes();
    }

    /// Xavier-uniform weights, zero biases, unit layer-norm gain, zero order embedding.
    static Model init(const ModelConfig& config, std::uint64_t seed)
    {
        config.validate();
        auto rng = make_rng(seed, RngPurpose::init);
        const std::size_t d = config.hidden;
        ParamStore<Real> p;
        auto xavier = [&rng](std::size_t fan_in, std::size_t fan_out, Shape shape) {
            Tensor<Real> w(std::move(shape));
            const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
            for (auto& v : w.data) v = static_cast<Real>((2.0 * uniform01(rng) - 1.0) * bound);
            return w;
        };
        p.add("encoder.weight", xavier(config.input_dim, d, {config.input_dim, d}));
        p.add("encoder.bias", Tensor<Real>({d}));
        if (config.order_embedding) p.add("order_embedding", Tensor<Real>({config.num_tokens(), d}));
        if (config.interaction != InteractionKind::none)
            for (std::size_t k = 0; k < config.layers; ++k) {
                const std::string pre = "interaction." + std::to_string(k) + ".";
                switch (config.interaction) {
                case InteractionKind::attention:
                    p.add(pre + "wq", xavier(d, d, {d, d}));
                    p.add(pre + "wk", xavier(d, d, {d, d}));
                    p.add(pre + "wv", xavier(d, d, {d, d}));
                    if (config.output_projection) p.add(pre + "wo", xavier(d, d, {d, d}));
                    break;
                case InteractionKind::sage:
                    p.add(pre + "weight", xavier(2 * d, d, {2 * d, d}));
                    p.add(pre + "bias", Tensor<Real>({d}));
                    break;
                default:
                    p.add(pre + "weight", xavier(d, d, {d, d}));
                    p.add(pre + "bias", Tensor<Real>({d}));
                    break;
                }
                p.add(pre + "norm.gamma", Tensor<Real>({d}, Real(1)));
                p.add(pre + "norm.beta", Tensor<Real>({d}));
            }
        if (config.fusion == FusionKind::attention) p.add("fusion.score", xavier(d, 1, {d}));
        p.add("head.weight", xavier(d, config.num_classes, {d, config.num_classes}));
        p.add("head.bias", Tensor<Real>({config.num_classes}));
        return Model(config, std::move(p));
    }

    const ModelConfig& config() const { return config_; }
    ParamStore<Real>& params() { return params_; }
    const ParamStore<Real>& params() const { return params_; }

    template <class Other>
    Model<Other> cast() const
    {
        return Model<Other>(config_, params_.template cast<Other>());
    }

    /// H = f(x_l) + E_order for every hop token; dropout on the raw input when training.
    ad::Var encode_hops(ad::Tape<Real>& t, ad::Var batch, std::mt19937_64& rng, bool training)
    {
        const auto& s = t.shape(batch);
        if (s.size() != 3 || s[2] != config_.input_dim)
            throw ConfigError("encode_hops: batch " + shape_str(s) + " does not match encoder input dim " +
                              std::to_string(config_.input_dim));
        if (s[1] != config_.num_tokens())
            throw ConfigError("encode_hops: batch has " + std::to_string(s[1]) + " hop slices, model expects " +
                              std::to_string(config_.num_tokens()));
        ad::Var x = ad::dropout(t, batch, config_.dropout, rng, training);
        ad::Var h = ad::linear(t, x, t.parameter(params_, "encoder.weight"), t.parameter(params_, "encoder.bias"));
        if (config_.encoder_activation) h = ad::relu(t, h);
        if (config_.order_embedding) h = ad::add_broadcast(t, h, t.parameter(params_, "order_embedding"));
        return h;
    }

    /// GNN(H) + H for one layer, before normalization.
    ad::Var interaction_residual(ad::Tape<Real>& t, ad::Var h, std::size_t layer)
    {
        const std::string pre = "interaction." + std::to_string(layer) + ".";
        auto param = [&](const std::string& name) { return t.parameter(params_, pre + name); };
        switch (config_.interaction) {
        case InteractionKind::none: return h;
        case InteractionKind::attention: {
            ad::Var wo = config_.output_projection ? param("wo") : ad::Var{};
            return ad::add(t, ad::multi_head_attention(t, h, param("wq"), param("wk"), param("wv"), config_.heads, wo), h);
        }
        case InteractionKind::gcn_mean:
            return ad::add(t, ad::linear(t, ad::hop_mean_all(t, h), param("weight"), param("bias")), h);
        case InteractionKind::sage: {
            ad::Var both = ad::concat_last(t, h, ad::hop_mean_others(t, h));
            return ad::add(t, ad::linear(t, both, param("weight"), param("bias")), h);
        }
        case InteractionKind::mlp:
            return ad::add(t, ad::relu(t, ad::linear(t, h, param("weight"), param("bias"))), h);
        }
        throw ConfigError("unknown interaction kind");
    }

    /// Residual interaction, post layer-norm, then dropout.
    ad::Var interaction_layer(ad::Tape<Real>& t, ad::Var h, std::size_t layer, std::mt19937_64& rng, bool training)
    {
        if (config_.interaction == InteractionKind::none) return h;
        const std::string pre = "interaction." + std::to_string(layer) + ".";
        ad::Var r = interaction_residual(t, h, layer);
        r = ad::layer_norm(t, r, t.parameter(params_, pre + "norm.gamma"), t.parameter(params_, pre + "norm.beta"), config_.norm_eps);
        return ad::dropout(t, r, config_.dropout, rng, training);
    }

    ad::Var fuse(ad::Tape<Real>& t, ad::Var hk)
    {
        switch (config_.fusion) {
        case FusionKind::mean: return ad::mean_hops(t, hk);
        case FusionKind::max: return ad::max_hops(t, hk);
        case FusionKind::attention: {
            ad::Var scores = ad::project_last(t, hk, t.parameter(params_, "fusion.score"));
            return ad::weighted_hops(t, hk, ad::softmax(t, scores));
        }
        }
        throw ConfigError("unknown fusion kind");
    }

    /// (logits, softmax probabilities).
    std::pair<ad::Var, ad::Var> predict(ad::Tape<Real>& t, ad::Var z)
    {
        ad::Var logits = ad::linear(t, z, t.parameter(params_, "head.weight"), t.parameter(params_, "head.bias"));
        return {logits, ad::softmax(t, logits)};
    }

    ForwardResult<Real> forward(ad::Tape<Real>& t, ad::Var batch, std::mt19937_64& rng, bool training)
    {
        ad::Var h = encode_hops(t, batch, rng, training);
        const std::size_t k_layers = config_.interaction == InteractionKind::none ? 0 : config_.layers;
        for (std::size_t k = 0; k < k_layers; ++k) h = interaction_layer(t, h, k, rng, training);
        ad::Var z = fuse(t, h);
        auto [logits, probs] = predict(t, z);
        return {logits, probs, h, z};
    }

private:
    void check_shapes() const
    {
        if (params_.num_scalars() != expected_param_count(config_))
            throw ConfigError("parameter count " + std::to_string(params_.num_scalars()) + " does not match config (" +
                              std::to_string(expected_param_count(config_)) + ")");
        if (params_.has("order_embedding") != config_.order_embedding)
            throw ConfigError("order_embedding presence does not match config");
        for (const auto& [name, e] : params_)
            for (auto v : e.value.data)
                if (!std::isfinite(static_cast<double>(v))) throw NumericError("non-finite value in parameter " + name);
    }

    ModelConfig config_;
    ParamStore<Real> params_;
};

/// HGM1: magic, u64 config length + config JSON, u64 parameter count, then per parameter
/// u64 name length + name, u64 rank + u64 dims, float32 payload.
inline void save_checkpoint(const Model<float>& model, const std::filesystem::path& path)
{
    auto os = io::open_out(path);
    os.write("HGM1", 4);
    const std::string cfg = nlohmann::json(model.config()).dump();
    io::write_u64(os, cfg.size());
    os.write(cfg.data(), static_cast<std::streamsize>(cfg.size()));
    io::write_u64(os, model.params().size());
    for (const auto& [name, e] : model.params()) {
        io::write_u64(os, name.size());
        os.write(name.data(), static_cast<std::streamsize>(name.size()));
        io::write_u64(os, e.value.shape.size());
        for (auto dim : e.value.shape) io::write_u64(os, dim);
        os.write(reinterpret_cast<const char*>(e.value.data.data()), static_cast<std::streamsize>(e.value.numel() * sizeof(float)));
    }
    if (!os) throw DataError("write failed: " + path.string());
}

inline Model<float> load_checkpoint(const std::filesystem::path& path)
{
    auto is = io::open_in(path);
    io::expect_magic(is, "HGM1", path.string());
    const auto size = io::file_size(path);
    auto bounded = [&](std::uint64_t n, const char* what) {
        if (n > size) throw FormatError(path.string() + ": " + what + " length " + std::to_string(n) + " exceeds file size");
        return n;
    };
    std::string cfg(bounded(io::read_u64(is, "config length"), "config"), '\0');
    if (!is.read(cfg.data(), static_cast<std::streamsize>(cfg.size()))) throw FormatError(path.string() + ": truncated config");
    ModelConfig config;
    try {
        config = nlohmann::json::parse(cfg).get<ModelConfig>();
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(path.string() + ": bad config block: " + e.what());
    }
    ParamStore<float> params;
    const auto count = bounded(io::read_u64(is, "parameter count"), "parameter count");
    for (std::uint64_t i = 0; i < count; ++i) {
        std::string name(bounded(io::read_u64(is, "name length"), "name"), '\0');
        if (!is.read(name.data(), static_cast<std::streamsize>(name.size()))) throw FormatError(path.string() + ": truncated name");
        const auto rank = bounded(io::read_u64(is, "rank"), "rank");
        Shape shape(rank);
        for (auto& dim : shape) dim = bounded(io::read_u64(is, "dim"), "dim");
        Tensor<float> value(shape);
        if (!is.read(reinterpret_cast<char*>(value.data.data()), static_cast<std::streamsize>(value.numel() * sizeof(float))))
            throw FormatError(path.string() + ": truncated payload for " + name);
        params.add(name, std::move(value));
    }
    if (is.peek() != std::char_traits<char>::eof()) throw FormatError(path.string() + ": trailing bytes after parameters");
    return Model<float>(config, std::move(params));
}

} // namespace hopflow

#endif
