#ifndef HOPFLOW_CONFIG_HPP
#define HOPFLOW_CONFIG_HPP

// JSON form of TrainConfig, config files, and dotted-path overrides
// ("loss.ssl_kind=barlow", "model.hops=16"). Unknown keys are errors.

#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "train.hpp"

namespace hopflow {

inline void to_json(nlohmann::json& j, const LossConfig& c)
{
    j = {{"ssl_kind", to_string(c.ssl_kind)}, {"lambda", c.lambda},       {"alpha", c.alpha},
         {"tau", c.tau},                      {"scl_normalize", c.scl_normalize}, {"barlow_eps", c.barlow_eps}};
}

inline void from_json(const nlohmann::json& j, LossConfig& c)
{
    c.ssl_kind = parse_ssl_kind(j.at("ssl_kind").get<std::string>());
    j.at("lambda").get_to(c.lambda);
    j.at("alpha").get_to(c.alpha);
    j.at("tau").get_to(c.tau);
    j.at("scl_normalize").get_to(c.scl_normalize);
    j.at("barlow_eps").get_to(c.barlow_eps);
}

inline void to_json(nlohmann::json& j, const DataConfig& c)
{
    j = {{"norm", to_string(c.norm)},
         {"self_loops", c.self_loops},
         {"num_splits", c.num_splits},
         {"split_seed", c.split_seed},
         {"use_split_files", c.use_split_files}};
}

inline void from_json(const nlohmann::json& j, DataConfig& c)
{
    c.norm = parse_norm_mode(j.at("norm").get<std::string>());
    j.at("self_loops").get_to(c.self_loops);
    j.at("num_splits").get_to(c.num_splits);
    j.at("split_seed").get_to(c.split_seed);
    j.at("use_split_files").get_to(c.use_split_files);
}

inline void to_json(nlohmann::json& j, const TrainConfig& c)
{
    j = {{"lr", c.lr},
         {"weight_decay", c.weight_decay},
         {"decoupled_weight_decay", c.decoupled_weight_decay},
         {"beta1", c.beta1},
         {"beta2", c.beta2},
         {"adam_eps", c.adam_eps},
         {"batch_size", c.batch_size},
         {"eval_batch_size", c.eval_batch_size},
         {"max_epochs", c.max_epochs},
         {"patience", c.patience},
         {"seed", c.seed},
         {"determinism", c.determinism},
         {"loss", c.loss},
         {"model", c.model},
         {"data", c.data}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& c)
{
    j.at("lr").get_to(c.lr);
    j.at("weight_decay").get_to(c.weight_decay);
    j.at("decoupled_weight_decay").get_to(c.decoupled_weight_decay);
    j.at("beta1").get_to(c.beta1);
    j.at("beta2").get_to(c.beta2);
    j.at("adam_eps").get_to(c.adam_eps);
    j.at("batch_size").get_to(c.batch_size);
    j.at("eval_batch_size").get_to(c.eval_batch_size);
    j.at("max_epochs").get_to(c.max_epochs);
    j.at("patience").get_to(c.patience);
    j.at("seed").get_to(c.seed);
    j.at("determinism").get_to(c.determinism);
    j.at("loss").get_to(c.loss);
    j.at("model").get_to(c.model);
    j.at("data").get_to(c.data);
}

namespace detail {

inline void merge_known(nlohmann::json& base, const nlohmann::json& patch, const std::string& prefix)
{
    if (!patch.is_object()) throw ConfigError("config" + (prefix.empty() ? "" : " section '" + prefix + "'") + " must be a JSON object");
    for (const auto& [key, value] : patch.items()) {
        const std::string path = prefix.empty() ? key : prefix + "." + key;
        if (!base.contains(key)) throw ConfigError("unknown config key '" + path + "'");
        if (base[key].is_object())
            merge_known(base[key], value, path);
        else
            base[key] = value;
    }
}

inline TrainConfig config_from_json_checked(const nlohmann::json& j)
{
    try {
        return j.get<TrainConfig>();
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("invalid config value: ") + e.what());
    }
}

} // namespace detail

/// Defaults overlaid with `patch`; every key in `patch` must name an existing field.
inline TrainConfig config_from_json(const nlohmann::json& patch)
{
    nlohmann::json base = TrainConfig{};
    detail::merge_known(base, patch, "");
    return detail::config_from_json_checked(base);
}

inline TrainConfig load_config(const std::filesystem::path& path)
{
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot open config " + path.string());
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(is, nullptr, true, true);
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError("config " + path.string() + ": " + e.what());
    }
    return config_from_json(j);
}

/// Applies "a.b.c=value". The value is parsed as JSON when possible, else taken as a string.
inline TrainConfig apply_override(const TrainConfig& cfg, std::string_view assignment)
{
    const auto eq = assignment.find('=');
    if (eq == std::string_view::npos || eq == 0) throw ConfigError("override '" + std::string(assignment) + "' is not key=value");
    const std::string key(assignment.substr(0, eq));
    const std::string text(assignment.substr(eq + 1));
    nlohmann::json value = nlohmann::json::parse(text, nullptr, false);
    if (value.is_discarded()) value = text;

    nlohmann::json j = cfg;
    nlohmann::json* node = &j;
    std::string walked;
    std::istringstream parts(key);
    std::string part;
    std::vector<std::string> path;
    while (std::getline(parts, part, '.')) path.push_back(part);
    for (std::size_t i = 0; i < path.size(); ++i) {
        walked += (i ? "." : "") + path[i];
        if (!node->is_object() || !node->contains(path[i])) throw ConfigError("unknown config key '" + walked + "'");
        node = &(*node)[path[i]];
    }
    if (node->is_object()) throw ConfigError("config key '" + key + "' names a section, not a value");
    *node = value;
    return detail::config_from_json_checked(j);
}

inline TrainConfig apply_overrides(TrainConfig cfg, const std::vector<std::string>& overrides)
{
    for (const auto& o : overrides) cfg = apply_override(cfg, o);
    return cfg;
}

} // namespace hopflow

#endif
