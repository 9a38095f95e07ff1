// Copyright (C) 2026 confkv contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <atomic>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "confkv/baselines.hpp"
#include "confkv/confidence.hpp"
#include "confkv/kv_cache.hpp"
#include "confkv/quantizer.hpp"
#include "confkv/ranking.hpp"
#include "confkv/rng.hpp"

namespace confkv {

namespace instrumentation {
/// Incremented once per Engine::step, whatever drives the engine.
inline std::atomic<std::uint64_t> policy_step_calls{0};
}  // namespace instrumentation

inline constexpr std::size_t kUnbounded = std::numeric_limits<std::size_t>::max();

enum class PolicyKind { confkv, full, sliding, heavy_hitter, matched_random, matched_recency, matched_attention };

struct PolicySpec {
    std::string name = "confkv";
    PolicyKind kind = PolicyKind::confkv;
    bool int8 = false;
    bool pyramid = false;
    std::size_t window_n = 512;  ///< sliding window size
    std::size_t cap_n = 256;     ///< heavy-hitter cap

    bool is_matched() const {
        return kind == PolicyKind::matched_random || kind == PolicyKind::matched_recency ||
               kind == PolicyKind::matched_attention;
    }
};

/**
 * Policy names accepted on the command line: confkv, confkv-int8, confkv-l,
 * full, sliding, heavy-hitter, matched-random, matched-recency, matched-attention.
 */
inline PolicySpec parse_policy(const std::string& name) {
    PolicySpec spec;
    spec.name = name;
    if (name == "confkv-int8") {
        spec.int8 = true;
    } else if (name == "confkv-l") {
        spec.int8 = true;
        spec.pyramid = true;
    } else if (name == "full") {
        spec.kind = PolicyKind::full;
    } else if (name == "sliding") {
        spec.kind = PolicyKind::sliding;
    } else if (name == "heavy-hitter") {
        spec.kind = PolicyKind::heavy_hitter;
    } else if (name == "matched-random") {
        spec.kind = PolicyKind::matched_random;
    } else if (name == "matched-recency") {
        spec.kind = PolicyKind::matched_recency;
    } else if (name == "matched-attention") {
        spec.kind = PolicyKind::matched_attention;
    } else if (name != "confkv") {
        throw ConfigError("unknown policy '" + name + "'");
    }
    return spec;
}

/// What the model (or a synthetic trace) produced for one decoding step.
struct StepInputs {
    std::vector<double> logits;                  ///< [V]
    std::vector<std::vector<double>> attention;  ///< per layer, [heads x pre-eviction size]
    std::vector<std::vector<float>> keys;        ///< per layer, [heads x head_dim] for the input token
    std::vector<std::vector<float>> values;
};

/// One row of the decode trace.
struct StepRecord {
    std::int64_t step = 0;
    std::int32_t token = 0;
    ConfidenceFeatures confidence;
    bool confident = false;
    std::vector<std::size_t> budget;  ///< active cap per layer, kUnbounded for full KV
    std::vector<std::size_t> len_pre;
    std::vector<std::size_t> len_post_evict;
    std::vector<std::size_t> evicted;
    std::vector<std::size_t> quantized;
    std::vector<std::size_t> int8_entries;  ///< INT8 rows after quantization, before the append
    std::vector<std::size_t> len_post;
    std::size_t bytes = 0;  ///< analytic bytes over all layers after the append

    std::size_t total_evicted() const {
        std::size_t s = 0;
        for (auto e : evicted) s += e;
        return s;
    }
};

inline nlohmann::json to_json(const StepRecord& r) {
    nlohmann::json budget = nlohmann::json::array();
    for (auto b : r.budget) {
        budget.push_back(b == kUnbounded ? nlohmann::json(nullptr) : nlohmann::json(b));
    }
    return nlohmann::json{{"step", r.step},
                          {"token", r.token},
                          {"confidence",
                           {{"entropy_norm", r.confidence.entropy_norm},
                            {"margin", r.confidence.margin},
                            {"margin_sig", r.confidence.margin_sig},
                            {"top_prob", r.confidence.top_prob},
                            {"score", r.confidence.score}}},
                          {"tier", r.confident ? "high" : "low"},
                          {"budget", budget},
                          {"len_pre", r.len_pre},
                          {"len_post_evict", r.len_post_evict},
                          {"evicted", r.evicted},
                          {"quantized", r.quantized},
                          {"int8_entries", r.int8_entries},
                          {"len_post", r.len_post},
                          {"bytes", r.bytes}};
}

/**
 * Owns one LayerCache per layer and runs the per-step cache policy:
 * confidence -> budget -> per layer {EMA update, eviction, FP16-window
 * quantization} -> append in HIGH precision -> sample.
 *
 * Baselines and matched-rate replays share this path; only the eviction
 * choice differs.
 */
class Engine {
public:
    Engine(const PolicyConfig& cfg, const ModelShape& shape, PolicySpec spec, EvictionSchedule replay = {})
        : m_cfg(cfg),
          m_shape(shape),
          m_spec(std::move(spec)),
          m_replay(std::move(replay)),
          m_sample_rng(hash_combine(cfg.seed, 1)),
          m_evict_rng(hash_combine(cfg.seed, 2)) {
        validate(m_cfg);
        validate(m_shape);
        m_caches.reserve(shape.num_layers);
        for (std::size_t l = 0; l < shape.num_layers; ++l) {
            m_caches.emplace_back(shape.num_heads, shape.head_dim, 64, l);
        }
    }

    const PolicyConfig& config() const { return m_cfg; }
    const ModelShape& shape() const { return m_shape; }
    const PolicySpec& spec() const { return m_spec; }
    const std::vector<LayerCache>& caches() const { return m_caches; }
    const EvictionSchedule& recorded_schedule() const { return m_recorded; }
    std::int64_t next_position() const { return m_next_position; }
    std::int64_t steps_done() const { return m_steps_done; }
    std::size_t prefill_len() const { return m_prefill_len; }

    bool pyramid_active() const { return m_spec.kind == PolicyKind::confkv && (m_spec.pyramid || m_cfg.pyramid_enabled); }
    bool int8_active() const { return m_spec.int8; }

    void begin_prefill(std::size_t prefill_len) {
        CONFKV_CHECK(m_next_position == 0, "begin_prefill must precede every append");
        m_prefill_len = prefill_len;
    }

    /// Appends one prompt token's K/V to every layer; no policy runs during prefill.
    void append_prefill(const std::vector<std::vector<float>>& keys, const std::vector<std::vector<float>>& values) {
        CONFKV_CHECK(static_cast<std::size_t>(m_next_position) < m_prefill_len,
                     "append_prefill: more prompt tokens than announced (" << m_prefill_len << ")");
        append_all(keys, values, m_next_position - static_cast<std::int64_t>(m_prefill_len));
    }

    /// Budget for a layer on a confident or uncertain step.
    std::size_t layer_budget(std::size_t layer, bool confident) const {
        const std::size_t tier = confident ? m_cfg.n_high : m_cfg.n_low;
        switch (m_spec.kind) {
            case PolicyKind::full:
                return kUnbounded;
            case PolicyKind::sliding:
                return m_spec.window_n;
            case PolicyKind::heavy_hitter:
                return m_spec.cap_n;
            default:
                break;
        }
        if (pyramid_active()) {
            return pyramid_budget(layer, m_shape, tier, m_cfg.pyramid_beta, m_cfg.pyramid_n_min);
        }
        return tier;
    }

    /// The distribution confidence and sampling both use (temperature applied when configured).
    std::vector<double> distribution(std::span<const double> logits) const {
        if (m_cfg.sampling_mode.kind == SamplingKind::greedy) {
            return stable_softmax(logits);
        }
        std::vector<double> scaled(logits.begin(), logits.end());
        for (double& l : scaled) {
            l /= m_cfg.sampling_mode.temperature;
        }
        return stable_softmax(scaled);
    }

    StepRecord step(const StepInputs& in, std::int64_t t) {
        instrumentation::policy_step_calls.fetch_add(1, std::memory_order_relaxed);
        CONFKV_CHECK(t == m_steps_done, "step: expected step " << m_steps_done << ", got " << t);
        CONFKV_CHECK(static_cast<std::size_t>(m_next_position) == m_prefill_len + static_cast<std::size_t>(t),
                     "step: prefill incomplete (" << m_next_position << " of " << m_prefill_len << " tokens)");
        check_inputs(in);

        StepRecord rec;
        rec.step = t;
        const auto p = distribution(in.logits);
        rec.confidence = confidence_score(p, ConfidenceWeights::from(m_cfg));
        rec.confident = rec.confidence.score >= m_cfg.tau;

        const std::size_t layers = m_shape.num_layers;
        rec.budget.resize(layers);
        rec.len_pre.resize(layers);
        rec.len_post_evict.resize(layers);
        rec.evicted.resize(layers);
        rec.quantized.resize(layers);
        rec.int8_entries.resize(layers);
        rec.len_post.resize(layers);

        for (std::size_t l = 0; l < layers; ++l) {
            LayerCache& cache = m_caches[l];
            rec.len_pre[l] = cache.size();
            if (!cache.empty()) {
                cache.update_attention_ema(in.attention[l], m_cfg.ema_lambda);
            }
            rec.budget[l] = layer_budget(l, rec.confident);
            rec.evicted[l] = evict(cache, l, rec.budget[l], t);
            m_recorded.record(t, l, rec.evicted[l]);
            rec.len_post_evict[l] = cache.size();
            if (m_spec.int8) {
                rec.quantized[l] = apply_fp16_window(cache, m_cfg.fp16_window_w, t, m_cfg.quant_group);
            }
            rec.int8_entries[l] = cache.int8_count();
        }

        append_all(in.keys, in.values, t);
        ++m_steps_done;

        for (std::size_t l = 0; l < layers; ++l) {
            rec.len_post[l] = m_caches[l].size();
            rec.bytes += m_caches[l].memory_bytes();
        }
        rec.token = sample(p);
        return rec;
    }

private:
    void check_inputs(const StepInputs& in) const {
        CONFKV_CHECK(in.logits.size() == m_shape.vocab_size,
                     "step: expected " << m_shape.vocab_size << " logits, got " << in.logits.size());
        CONFKV_CHECK(in.attention.size() == m_shape.num_layers && in.keys.size() == m_shape.num_layers &&
                         in.values.size() == m_shape.num_layers,
                     "step: per-layer inputs must cover " << m_shape.num_layers << " layers");
        for (std::size_t l = 0; l < m_shape.num_layers; ++l) {
            CONFKV_CHECK(in.attention[l].size() == m_shape.num_heads * m_caches[l].size(),
                         "step: layer " << l << " attention has " << in.attention[l].size() << " weights, expected "
                                        << m_shape.num_heads * m_caches[l].size());
        }
    }

    void append_all(const std::vector<std::vector<float>>& keys, const std::vector<std::vector<float>>& values,
                    std::int64_t generation_step) {
        CONFKV_CHECK(keys.size() == m_shape.num_layers && values.size() == m_shape.num_layers,
                     "append: per-layer K/V must cover " << m_shape.num_layers << " layers");
        for (std::size_t l = 0; l < m_shape.num_layers; ++l) {
            m_caches[l].append(keys[l], values[l], m_next_position, generation_step);
        }
        ++m_next_position;
    }

    std::size_t evict(LayerCache& cache, std::size_t layer, std::size_t budget, std::int64_t t) {
        switch (m_spec.kind) {
            case PolicyKind::full:
                return 0;
            case PolicyKind::sliding:
                return sliding_window_step(cache, budget);
            case PolicyKind::heavy_hitter:
                return heavy_hitter_step(cache, budget, m_cfg.protected_p);
            case PolicyKind::matched_random:
                return matched_rate_evict(cache, m_replay.count_at(t, layer), m_cfg.protected_p, MatchedMode::random,
                                          m_evict_rng);
            case PolicyKind::matched_recency:
                return matched_rate_evict(cache, m_replay.count_at(t, layer), m_cfg.protected_p,
                                          MatchedMode::recency_only, m_evict_rng);
            case PolicyKind::matched_attention:
                return matched_rate_evict(cache, m_replay.count_at(t, layer), m_cfg.protected_p,
                                          MatchedMode::attention_only, m_evict_rng);
            case PolicyKind::confkv:
                break;
        }
        const std::size_t protected_p = std::min(m_cfg.protected_p, budget);
        return evict_to_budget(cache, budget, protected_p, m_cfg.alpha);
    }

    std::int32_t sample(const std::vector<double>& p) {
        if (m_cfg.sampling_mode.kind == SamplingKind::greedy) {
            std::size_t best = 0;
            for (std::size_t i = 1; i < p.size(); ++i) {
                if (p[i] > p[best]) {
                    best = i;
                }
            }
            return static_cast<std::int32_t>(best);
        }
        const double u = m_sample_rng.uniform();
        double cdf = 0.0;
        for (std::size_t i = 0; i < p.size(); ++i) {
            cdf += p[i];
            if (u < cdf) {
                return static_cast<std::int32_t>(i);
            }
        }
        return static_cast<std::int32_t>(p.size() - 1);
    }

    PolicyConfig m_cfg;
    ModelShape m_shape;
    PolicySpec m_spec;
    EvictionSchedule m_replay;
    EvictionSchedule m_recorded;
    SeededRng m_sample_rng;
    SeededRng m_evict_rng;
    std::vector<LayerCache> m_caches;
    std::size_t m_prefill_len = 0;
    std::int64_t m_next_position = 0;
    std::int64_t m_steps_done = 0;
};

}  // namespace confkv
