// Copyright (C) 2026 confkv contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cerrno>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <limits>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>

#include <nlohmann/json.hpp>

namespace confkv {

/// Base error for everything the library throws on bad input or broken invariants.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Raised while loading or validating configuration. The CLI maps it to exit code 1.
class ConfigError : public Error {
public:
    using Error::Error;
};

#define CONFKV_CHECK(cond, msg)                                          \
    do {                                                                 \
        if (!(cond)) {                                                   \
            std::ostringstream confkv_check_os_;                         \
            confkv_check_os_ << msg;                                     \
            throw ::confkv::Error(confkv_check_os_.str());               \
        }                                                                \
    } while (0)

enum class SamplingKind { greedy, temperature };

struct SamplingMode {
    SamplingKind kind = SamplingKind::greedy;
    double temperature = 1.0;

    bool operator==(const SamplingMode&) const = default;
};

/**
 * All policy hyperparameters. Defaults are the WikiText operating point; named
 * profiles ("wikitext", "niah", "vwa") override the per-workload rows.
 */
struct PolicyConfig {
    double tau = 0.7;
    std::size_t n_high = 128;
    std::size_t n_low = 256;
    std::size_t protected_p = 32;
    double alpha = 0.65;
    double ema_lambda = 0.90;
    std::size_t fp16_window_w = 128;
    std::size_t block_size_b = 128;
    /// Token span (in generation steps) that shares one set of INT8 scales.
    std::size_t quant_group = 128;
    double w_entropy = 0.4;
    double w_margin = 0.3;
    double w_top = 0.3;
    bool pyramid_enabled = false;
    double pyramid_beta = 0.5;
    std::size_t pyramid_n_min = 96;
    SamplingMode sampling_mode{};
    std::uint64_t seed = 1;

    bool operator==(const PolicyConfig&) const = default;
};

struct ModelShape {
    std::size_t num_layers = 4;
    std::size_t num_heads = 4;
    std::size_t head_dim = 16;
    std::size_t vocab_size = 64;

    std::size_t row_size() const { return num_heads * head_dim; }

    bool operator==(const ModelShape&) const = default;
};

/// Fully loaded configuration document: policy knobs plus the reference model shape.
struct RunConfig {
    PolicyConfig policy{};
    ModelShape model{};

    bool operator==(const RunConfig&) const = default;
};

/// Throws ConfigError naming the first violated invariant.
inline void validate(const PolicyConfig& cfg) {
    auto fail = [](const std::string& what) { throw ConfigError("invalid config: " + what); };
    auto unit = [&](double v, const char* name) {
        if (!std::isfinite(v) || v < 0.0 || v > 1.0) {
            fail(std::string(name) + " must lie in [0,1]");
        }
    };
    unit(cfg.tau, "tau");
    unit(cfg.alpha, "alpha");
    unit(cfg.ema_lambda, "ema_lambda");
    if (cfg.n_high > cfg.n_low) {
        fail("n_high <= n_low violated (n_high=" + std::to_string(cfg.n_high) +
             ", n_low=" + std::to_string(cfg.n_low) + ")");
    }
    if (cfg.protected_p > cfg.pyramid_n_min || cfg.pyramid_n_min > cfg.n_high) {
        fail("protected_p <= pyramid_n_min <= n_high violated (protected_p=" + std::to_string(cfg.protected_p) +
             ", pyramid_n_min=" + std::to_string(cfg.pyramid_n_min) + ", n_high=" + std::to_string(cfg.n_high) + ")");
    }
    for (double w : {cfg.w_entropy, cfg.w_margin, cfg.w_top}) {
        if (!std::isfinite(w) || w < 0.0) {
            fail("confidence weights must be nonnegative");
        }
    }
    if (std::abs(cfg.w_entropy + cfg.w_margin + cfg.w_top - 1.0) > 1e-9) {
        fail("confidence weights w_entropy + w_margin + w_top must sum to 1");
    }
    if (cfg.block_size_b < 1) {
        fail("block_size_b must be >= 1");
    }
    if (cfg.quant_group < 1) {
        fail("quant_group must be >= 1");
    }
    if (!std::isfinite(cfg.pyramid_beta) || cfg.pyramid_beta <= 0.0 || cfg.pyramid_beta > 1.0) {
        fail("pyramid_beta must lie in (0,1]");
    }
    if (cfg.sampling_mode.kind == SamplingKind::temperature &&
        !(std::isfinite(cfg.sampling_mode.temperature) && cfg.sampling_mode.temperature > 0.0)) {
        fail("sampling temperature must be positive");
    }
}

inline void validate(const ModelShape& shape) {
    if (shape.num_layers == 0 || shape.num_heads == 0 || shape.head_dim == 0 || shape.vocab_size == 0) {
        throw ConfigError("invalid config: model shape entries must be strictly positive");
    }
}

/// Named hyperparameter rows. Throws ConfigError on an unknown name.
inline PolicyConfig profile_defaults(const std::string& name) {
    PolicyConfig cfg;
    if (name == "wikitext") {
        return cfg;
    }
    if (name == "niah" || name == "vwa") {
        cfg.n_high = 256;
        cfg.n_low = 512;
        cfg.protected_p = 64;
        cfg.alpha = name == "niah" ? 0.70 : 0.65;
        cfg.fp16_window_w = 256;
        return cfg;
    }
    throw ConfigError("unknown profile '" + name + "'");
}

namespace detail {

inline std::size_t read_count(const nlohmann::json& v, const std::string& key) {
    if (!v.is_number_integer() && !v.is_number_unsigned()) {
        throw ConfigError("invalid config: '" + key + "' must be a nonnegative integer");
    }
    if (v.is_number_integer() && v.get<std::int64_t>() < 0) {
        throw ConfigError("invalid config: '" + key + "' must be a nonnegative integer");
    }
    return v.get<std::size_t>();
}

inline double read_real(const nlohmann::json& v, const std::string& key) {
    if (!v.is_number()) {
        throw ConfigError("invalid config: '" + key + "' must be a number");
    }
    return v.get<double>();
}

inline SamplingMode read_sampling(const nlohmann::json& v) {
    if (v.is_string() && v.get<std::string>() == "greedy") {
        return {};
    }
    if (v.is_object() && v.size() == 1 && v.contains("temperature")) {
        return {SamplingKind::temperature, read_real(v.at("temperature"), "sampling_mode.temperature")};
    }
    throw ConfigError(R"(invalid config: sampling_mode must be "greedy" or {"temperature": t})");
}

inline ModelShape read_shape(const nlohmann::json& v) {
    if (!v.is_object()) {
        throw ConfigError("invalid config: 'model' must be an object");
    }
    ModelShape shape;
    for (const auto& [key, value] : v.items()) {
        if (key == "num_layers") {
            shape.num_layers = read_count(value, key);
        } else if (key == "num_heads") {
            shape.num_heads = read_count(value, key);
        } else if (key == "head_dim") {
            shape.head_dim = read_count(value, key);
        } else if (key == "vocab_size") {
            shape.vocab_size = read_count(value, key);
        } else {
            throw ConfigError("invalid config: unknown key 'model." + key + "'");
        }
    }
    return shape;
}

}  // namespace detail

/**
 * Parses a JSON config document. Absent keys take profile defaults (the
 * "wikitext" row unless a "profile" key selects another); unknown keys are
 * rejected. The result is validated before it is returned.
 */
inline RunConfig load_config(const std::string& text) {
    nlohmann::json doc;
    try {
        doc = nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError(std::string("config parse error: ") + e.what());
    }
    if (!doc.is_object()) {
        throw ConfigError("config parse error: top level must be a JSON object");
    }

    RunConfig out;
    if (doc.contains("profile")) {
        if (!doc["profile"].is_string()) {
            throw ConfigError("invalid config: 'profile' must be a string");
        }
        out.policy = profile_defaults(doc["profile"].get<std::string>());
    }
    PolicyConfig& cfg = out.policy;
    for (const auto& [key, v] : doc.items()) {
        if (key == "profile") {
            continue;
        } else if (key == "tau") {
            cfg.tau = detail::read_real(v, key);
        } else if (key == "n_high") {
            cfg.n_high = detail::read_count(v, key);
        } else if (key == "n_low") {
            cfg.n_low = detail::read_count(v, key);
        } else if (key == "protected_p") {
            cfg.protected_p = detail::read_count(v, key);
        } else if (key == "alpha") {
            cfg.alpha = detail::read_real(v, key);
        } else if (key == "ema_lambda") {
            cfg.ema_lambda = detail::read_real(v, key);
        } else if (key == "fp16_window_w") {
            cfg.fp16_window_w = detail::read_count(v, key);
        } else if (key == "block_size_b") {
            cfg.block_size_b = detail::read_count(v, key);
        } else if (key == "quant_group") {
            cfg.quant_group = detail::read_count(v, key);
        } else if (key == "w_entropy") {
            cfg.w_entropy = detail::read_real(v, key);
        } else if (key == "w_margin") {
            cfg.w_margin = detail::read_real(v, key);
        } else if (key == "w_top") {
            cfg.w_top = detail::read_real(v, key);
        } else if (key == "pyramid_enabled") {
            if (!v.is_boolean()) {
                throw ConfigError("invalid config: 'pyramid_enabled' must be a boolean");
            }
            cfg.pyramid_enabled = v.get<bool>();
        } else if (key == "pyramid_beta") {
            cfg.pyramid_beta = detail::read_real(v, key);
        } else if (key == "pyramid_n_min") {
            cfg.pyramid_n_min = detail::read_count(v, key);
        } else if (key == "sampling_mode") {
            cfg.sampling_mode = detail::read_sampling(v);
        } else if (key == "seed") {
            cfg.seed = detail::read_count(v, key);
        } else if (key == "model") {
            out.model = detail::read_shape(v);
        } else {
            throw ConfigError("invalid config: unknown key '" + key + "'");
        }
    }
    validate(out.policy);
    validate(out.model);
    return out;
}

inline nlohmann::json to_json(const RunConfig& rc) {
    const PolicyConfig& c = rc.policy;
    nlohmann::json j;
    j["tau"] = c.tau;
    j["n_high"] = c.n_high;
    j["n_low"] = c.n_low;
    j["protected_p"] = c.protected_p;
    j["alpha"] = c.alpha;
    j["ema_lambda"] = c.ema_lambda;
    j["fp16_window_w"] = c.fp16_window_w;
    j["block_size_b"] = c.block_size_b;
    j["quant_group"] = c.quant_group;
    j["w_entropy"] = c.w_entropy;
    j["w_margin"] = c.w_margin;
    j["w_top"] = c.w_top;
    j["pyramid_enabled"] = c.pyramid_enabled;
    j["pyramid_beta"] = c.pyramid_beta;
    j["pyramid_n_min"] = c.pyramid_n_min;
    if (c.sampling_mode.kind == SamplingKind::greedy) {
        j["sampling_mode"] = "greedy";
    } else {
        j["sampling_mode"] = {{"temperature", c.sampling_mode.temperature}};
    }
    j["seed"] = c.seed;
    j["model"] = {{"num_layers", rc.model.num_layers},
                  {"num_heads", rc.model.num_heads},
                  {"head_dim", rc.model.head_dim},
                  {"vocab_size", rc.model.vocab_size}};
    return j;
}

inline std::string serialize(const RunConfig& rc) {
    return to_json(rc).dump();
}

/// FNV-1a over the canonical serialization, as 16 hex digits.
inline std::string config_hash(const RunConfig& rc) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char ch : serialize(rc)) {
        h ^= ch;
        h *= 0x100000001b3ULL;
    }
    static constexpr char digits[] = "0123456789abcdef";
    std::string out(16, '0');
    for (int i = 15; i >= 0; --i) {
        out[static_cast<std::size_t>(i)] = digits[h & 0xF];
        h >>= 4;
    }
    return out;
}

/// CONFKV_SEED, when set, replaces the configured seed.
inline void apply_env_overrides(RunConfig& rc) {
    const char* env = std::getenv("CONFKV_SEED");
    if (env == nullptr) {
        return;
    }
    std::string text(env);
    char* end = nullptr;
    errno = 0;
    unsigned long long v = std::strtoull(text.c_str(), &end, 10);
    if (text.empty() || text[0] == '-' || end == nullptr || *end != '\0' || errno != 0) {
        throw ConfigError("CONFKV_SEED must be a nonnegative integer, got '" + text + "'");
    }
    rc.policy.seed = v;
}

}  // namespace confkv
