// Copyright (C) 2026 confkv contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <functional>
#include <map>
#include <istream>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "confkv/attention.hpp"
#include "confkv/confidence.hpp"
#include "confkv/engine.hpp"
#include "confkv/rng.hpp"

namespace confkv {

// ---------------------------------------------------------------------------
// Reference model

enum class AttentionPath { tiled, naive };

/// Row-major weights; every projection maps a d-vector to a d-vector (d = heads * head_dim).
struct ModelWeights {
    std::vector<float> embedding;  ///< [V x d]
    std::vector<std::vector<float>> wq, wk, wv, wo;  ///< per layer, [d x d]
    std::vector<float> unembed;    ///< [V x d]
    float position_scale = 0.5f;
    float logit_scale = 4.0f;
};

struct ForwardResult {
    std::vector<double> logits;                  ///< [V]
    std::vector<std::vector<double>> attention;  ///< per layer, [heads x cache size]
    std::vector<std::vector<float>> keys;        ///< per layer, [d]
    std::vector<std::vector<float>> values;
};

/**
 * Tiny decoder with seeded random weights. Per layer: q, k, v projections of
 * the residual stream; attention over that layer's cache (the input token's own
 * value stands in when the cache is empty); residual add of Wo * attn; RMS
 * normalization. Logits are logit_scale * unembed * x.
 */
class ReferenceModel {
public:
    ReferenceModel(const ModelShape& shape, std::uint64_t seed) : m_shape(shape) {
        validate(shape);
        const std::size_t d = shape.row_size();
        SeededRng rng(hash_combine(seed, 0x6d6f64656cULL));
        const double sd = 1.0 / std::sqrt(static_cast<double>(d));
        auto fill = [&](std::size_t count, double scale) {
            std::vector<float> out(count);
            for (float& w : out) {
                w = static_cast<float>(rng.normal() * scale);
            }
            return out;
        };
        m_w.embedding = fill(shape.vocab_size * d, 1.0);
        for (std::size_t l = 0; l < shape.num_layers; ++l) {
            m_w.wq.push_back(fill(d * d, sd));
            m_w.wk.push_back(fill(d * d, sd));
            m_w.wv.push_back(fill(d * d, sd));
            m_w.wo.push_back(fill(d * d, sd));
        }
        m_w.unembed = fill(shape.vocab_size * d, sd);
    }

    ReferenceModel(const ModelShape& shape, ModelWeights weights) : m_shape(shape), m_w(std::move(weights)) {
        validate(shape);
        const std::size_t d = shape.row_size();
        CONFKV_CHECK(m_w.embedding.size() == shape.vocab_size * d && m_w.unembed.size() == shape.vocab_size * d,
                     "ReferenceModel: embedding/unembedding shape mismatch");
        CONFKV_CHECK(m_w.wq.size() == shape.num_layers && m_w.wk.size() == shape.num_layers &&
                         m_w.wv.size() == shape.num_layers && m_w.wo.size() == shape.num_layers,
                     "ReferenceModel: need one projection set per layer");
    }

    const ModelShape& shape() const { return m_shape; }

    /// Reads the caches, never mutates them.
    ForwardResult forward(std::int32_t token, std::int64_t position, std::span<const LayerCache> caches,
                          AttentionPath path = AttentionPath::tiled, std::size_t block = 128) const {
        CONFKV_CHECK(m_shape.vocab_size > 0, "forward: empty vocabulary");
        CONFKV_CHECK(token >= 0 && static_cast<std::size_t>(token) < m_shape.vocab_size,
                     "forward: token " << token << " outside vocabulary");
        CONFKV_CHECK(caches.size() == m_shape.num_layers, "forward: expected " << m_shape.num_layers << " caches");
        const std::size_t d = m_shape.row_size();

        std::vector<float> x(d);
        for (std::size_t i = 0; i < d; ++i) {
            const double freq = std::pow(10000.0, -static_cast<double>(2 * (i / 2)) / static_cast<double>(d));
            const double angle = static_cast<double>(position) * freq;
            const double pe = (i % 2 == 0) ? std::sin(angle) : std::cos(angle);
            x[i] = m_w.embedding[static_cast<std::size_t>(token) * d + i] + m_w.position_scale * static_cast<float>(pe);
        }

        ForwardResult out;
        out.attention.resize(m_shape.num_layers);
        out.keys.resize(m_shape.num_layers);
        out.values.resize(m_shape.num_layers);
        for (std::size_t l = 0; l < m_shape.num_layers; ++l) {
            const auto q = matvec(m_w.wq[l], x);
            out.keys[l] = matvec(m_w.wk[l], x);
            out.values[l] = matvec(m_w.wv[l], x);

            std::vector<float> attended;
            const LayerCache& cache = caches[l];
            if (cache.empty()) {
                attended = out.values[l];
            } else {
                AttentionResult a;
                if (path == AttentionPath::tiled) {
                    a = tiled_attention(q, cache, block);
                } else {
                    const auto keys = cache.dense_keys();
                    const auto values = cache.dense_values();
                    a = naive_attention(q, keys, values, cache.size(), cache.heads(), cache.head_dim());
                }
                attended = std::move(a.output);
                out.attention[l] = std::move(a.weights);
            }
            const auto proj = matvec(m_w.wo[l], attended);
            double sq = 0.0;
            for (std::size_t i = 0; i < d; ++i) {
                x[i] += proj[i];
                sq += static_cast<double>(x[i]) * x[i];
            }
            const auto inv_rms = static_cast<float>(1.0 / std::sqrt(sq / static_cast<double>(d) + 1e-6));
            for (float& xi : x) {
                xi *= inv_rms;
            }
        }

        out.logits.resize(m_shape.vocab_size);
        for (std::size_t v = 0; v < m_shape.vocab_size; ++v) {
            double dot = 0.0;
            for (std::size_t i = 0; i < d; ++i) {
                dot += static_cast<double>(m_w.unembed[v * d + i]) * x[i];
            }
            out.logits[v] = static_cast<double>(m_w.logit_scale) * dot;
        }
        return out;
    }

private:
    std::vector<float> matvec(const std::vector<float>& w, const std::vector<float>& x) const {
        const std::size_t d = x.size();
        std::vector<float> y(d, 0.0f);
        for (std::size_t r = 0; r < d; ++r) {
            double acc = 0.0;
            for (std::size_t c = 0; c < d; ++c) {
                acc += static_cast<double>(w[r * d + c]) * x[c];
            }
            y[r] = static_cast<float>(acc);
        }
        return y;
    }

    ModelShape m_shape;
    ModelWeights m_w;
};

// ---------------------------------------------------------------------------
// Synthetic traces

struct NeedleAnnotation {
    std::int64_t position = 0;    ///< original position of the planted needle
    std::int64_t query_step = 0;  ///< generation step at which the needle is queried
    double spike_mass = 0.5;
    std::size_t spike_period = 8;

    bool operator==(const NeedleAnnotation&) const = default;
};

struct Spike {
    std::int64_t position = 0;
    double mass = 0.0;

    bool operator==(const Spike&) const = default;
};

struct TraceStep {
    double target_confidence = 0.0;
    std::vector<double> logits;  ///< optional; derived from target_confidence when empty
    std::vector<Spike> spikes;

    bool operator==(const TraceStep&) const = default;
};

struct SyntheticTrace {
    ModelShape shape;
    std::size_t prefill = 0;
    std::uint64_t kv_seed = 0;
    std::optional<NeedleAnnotation> needle;
    std::vector<TraceStep> steps;

    bool operator==(const SyntheticTrace&) const = default;
};

/// Per-step confidence targets: k low steps then one high step, always high, etc.
struct ConfidenceProfile {
    enum class Kind { always_high, always_low, alternating, bernoulli };
    Kind kind = Kind::bernoulli;
    std::size_t low_run = 1;   ///< alternating: low steps between confident steps
    double p_high = 0.6;       ///< bernoulli: probability of a confident step
    double high_level = 0.9;
    double low_level = 0.4;

    /// "always_high", "always_low", "alternating:<k>", "bernoulli:<p>".
    static ConfidenceProfile parse(const std::string& text) {
        ConfidenceProfile p;
        const auto colon = text.find(':');
        const std::string head = text.substr(0, colon);
        const std::string arg = colon == std::string::npos ? "" : text.substr(colon + 1);
        try {
            if (head == "always_high" && arg.empty()) {
                p.kind = Kind::always_high;
            } else if (head == "always_low" && arg.empty()) {
                p.kind = Kind::always_low;
            } else if (head == "alternating" && !arg.empty()) {
                p.kind = Kind::alternating;
                p.low_run = std::stoul(arg);
            } else if (head == "bernoulli" && !arg.empty()) {
                p.kind = Kind::bernoulli;
                p.p_high = std::stod(arg);
            } else {
                throw ConfigError("");
            }
        } catch (const std::exception&) {
            throw ConfigError("unknown confidence profile '" + text + "'");
        }
        return p;
    }

    bool is_high(std::int64_t step, SeededRng& rng) const {
        switch (kind) {
            case Kind::always_high:
                return true;
            case Kind::always_low:
                return false;
            case Kind::alternating:
                return static_cast<std::size_t>(step) % (low_run + 1) == low_run;
            case Kind::bernoulli:
                return rng.uniform() < p_high;
        }
        return false;
    }
};

namespace detail {

inline std::vector<double> two_level(double p1, std::size_t vocab, std::size_t top_token) {
    std::vector<double> p(vocab, (1.0 - p1) / static_cast<double>(vocab - 1));
    p[top_token] = p1;
    return p;
}

}  // namespace detail

/**
 * Top mass p1 of a two-level distribution over V tokens (p1 on one token,
 * (1 - p1) / (V - 1) on each other) whose confidence score equals `target`.
 * Bisection on [1/V, 1 - 1e-12], where the score is increasing in p1.
 */
inline double top_mass_for_confidence(double target, std::size_t vocab, const ConfidenceWeights& w) {
    CONFKV_CHECK(vocab >= 2, "top_mass_for_confidence: vocabulary must have at least 2 tokens");
    double lo = 1.0 / static_cast<double>(vocab);
    double hi = 1.0 - 1e-12;
    const double c_lo = confidence_score(detail::two_level(lo, vocab, 0), w).score;
    const double c_hi = confidence_score(detail::two_level(hi, vocab, 0), w).score;
    CONFKV_CHECK(target >= c_lo - 1e-12 && target <= c_hi + 1e-12,
                 "target confidence " << target << " outside the reachable range [" << c_lo << ", " << c_hi << "]");
    for (int it = 0; it < 100; ++it) {
        const double mid = 0.5 * (lo + hi);
        if (confidence_score(detail::two_level(mid, vocab, 0), w).score < target) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    return 0.5 * (lo + hi);
}

inline std::vector<double> distribution_for_confidence(double target, std::size_t vocab, std::size_t top_token,
                                                       const ConfidenceWeights& w) {
    CONFKV_CHECK(top_token < vocab, "distribution_for_confidence: top token outside vocabulary");
    return detail::two_level(top_mass_for_confidence(target, vocab, w), vocab, top_token);
}

/// Log of the two-level distribution; softmax of the result reproduces it.
inline std::vector<double> logits_for_top_mass(double p1, std::size_t vocab, std::size_t top_token) {
    auto p = detail::two_level(p1, vocab, top_token);
    for (double& v : p) {
        v = std::log(v);
    }
    return p;
}

inline std::vector<double> logits_for_confidence(double target, std::size_t vocab, std::size_t top_token,
                                                 const ConfidenceWeights& w) {
    return logits_for_top_mass(top_mass_for_confidence(target, vocab, w), vocab, top_token);
}

/// Deterministic unit-Gaussian K and V rows for (layer, position) of a trace.
inline std::pair<std::vector<float>, std::vector<float>> trace_kv(const SyntheticTrace& trace, std::size_t layer,
                                                                  std::int64_t position) {
    SeededRng rng(hash_combine(trace.kv_seed, layer, position));
    const std::size_t row = trace.shape.row_size();
    std::pair<std::vector<float>, std::vector<float>> kv{std::vector<float>(row), std::vector<float>(row)};
    for (float& k : kv.first) k = static_cast<float>(rng.normal());
    for (float& v : kv.second) v = static_cast<float>(rng.normal());
    return kv;
}

/**
 * Attention rows for one layer of a trace step over the cache's current
 * entries. Spiked positions that are present get exactly their mass; the rest
 * is split over the other entries with hashed background weights in [0.5, 1.5).
 */
inline std::vector<double> trace_attention(const SyntheticTrace& trace, std::int64_t step, std::size_t layer,
                                           const LayerCache& cache) {
    const std::size_t n = cache.size();
    const std::size_t heads = trace.shape.num_heads;
    std::vector<double> rows(heads * n, 0.0);
    if (n == 0) {
        return rows;
    }
    const TraceStep& ts = trace.steps.at(static_cast<std::size_t>(step));
    std::vector<double> spike(n, 0.0);
    double spiked_total = 0.0;
    std::size_t spiked_entries = 0;
    for (std::size_t i = 0; i < n; ++i) {
        for (const Spike& s : ts.spikes) {
            if (s.position == cache.meta(i).original_position) {
                spike[i] += s.mass;
            }
        }
        if (spike[i] > 0.0) {
            spiked_total += spike[i];
            ++spiked_entries;
        }
    }
    for (std::size_t h = 0; h < heads; ++h) {
        double* row = rows.data() + h * n;
        if (spiked_entries == n) {
            for (std::size_t i = 0; i < n; ++i) row[i] = spike[i] / spiked_total;
            continue;
        }
        double background = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            if (spike[i] > 0.0) {
                continue;
            }
            const auto bits = hash_combine(trace.kv_seed, 0xa77e5ULL, step, layer, h, cache.meta(i).original_position);
            row[i] = 0.5 + static_cast<double>(bits >> 11) * 0x1.0p-53;
            background += row[i];
        }
        const double rest = 1.0 - spiked_total;
        for (std::size_t i = 0; i < n; ++i) {
            row[i] = spike[i] > 0.0 ? spike[i] : row[i] / background * rest;
        }
    }
    return rows;
}

struct NeedleTraceOptions {
    ModelShape shape{};
    std::size_t prefill = 64;
    std::size_t spike_period = 8;
    ConfidenceWeights weights{};
};

/**
 * Needle-in-a-haystack trace: the needle at `needle_position` receives
 * `spike_mass` of every head's attention every spike_period steps once it is
 * cached, and again at `query_step`, where confidence is forced to the low
 * level. Other steps follow `profile`.
 */
inline SyntheticTrace generate_needle_trace(SeededRng& rng, std::size_t length, std::int64_t needle_position,
                                            std::int64_t query_step, double spike_mass,
                                            const ConfidenceProfile& profile, const NeedleTraceOptions& opt = {}) {
    const auto prefill = static_cast<std::int64_t>(opt.prefill);
    if (needle_position < 0 || query_step < 0 || needle_position >= prefill + query_step ||
        query_step >= static_cast<std::int64_t>(length)) {
        throw Error("generate_needle_trace: need 0 <= needle_position < prefill + query_step and query_step < length");
    }
    CONFKV_CHECK(spike_mass > 0.0 && spike_mass < 1.0, "generate_needle_trace: spike_mass must lie in (0,1)");
    CONFKV_CHECK(opt.spike_period >= 1, "generate_needle_trace: spike_period must be >= 1");

    SyntheticTrace trace;
    trace.shape = opt.shape;
    trace.prefill = opt.prefill;
    trace.kv_seed = rng.next_u64();
    trace.needle = NeedleAnnotation{needle_position, query_step, spike_mass, opt.spike_period};

    // The needle is appended at the end of step (position - prefill); it is first visible one step later.
    const std::int64_t first_visible = std::max<std::int64_t>(0, needle_position - prefill + 1);
    trace.steps.resize(length);
    for (std::size_t s = 0; s < length; ++s) {
        const auto t = static_cast<std::int64_t>(s);
        TraceStep& ts = trace.steps[s];
        const bool high = profile.is_high(t, rng) && t != query_step;
        ts.target_confidence = high ? profile.high_level : profile.low_level;
        const bool periodic = t >= first_visible && t < query_step &&
                              (t - first_visible) % static_cast<std::int64_t>(opt.spike_period) == 0;
        if (periodic || t == query_step) {
            ts.spikes.push_back({needle_position, spike_mass});
        }
    }
    return trace;
}

/// A trace with no needle: confidence follows `profile`, attention is background only.
inline SyntheticTrace generate_profile_trace(SeededRng& rng, std::size_t length, const ConfidenceProfile& profile,
                                             const NeedleTraceOptions& opt = {}) {
    SyntheticTrace trace;
    trace.shape = opt.shape;
    trace.prefill = opt.prefill;
    trace.kv_seed = rng.next_u64();
    trace.steps.resize(length);
    for (std::size_t s = 0; s < length; ++s) {
        trace.steps[s].target_confidence =
            profile.is_high(static_cast<std::int64_t>(s), rng) ? profile.high_level : profile.low_level;
    }
    return trace;
}

// Trace JSONL: a header object, then one object per step.
inline void write_trace_jsonl(std::ostream& os, const SyntheticTrace& trace) {
    nlohmann::json header{{"type", "header"},
                          {"num_layers", trace.shape.num_layers},
                          {"num_heads", trace.shape.num_heads},
                          {"head_dim", trace.shape.head_dim},
                          {"vocab_size", trace.shape.vocab_size},
                          {"prefill", trace.prefill},
                          {"length", trace.steps.size()},
                          {"kv_seed", trace.kv_seed}};
    if (trace.needle) {
        header["needle"] = {{"position", trace.needle->position},
                            {"query_step", trace.needle->query_step},
                            {"spike_mass", trace.needle->spike_mass},
                            {"spike_period", trace.needle->spike_period}};
    }
    os << header.dump() << '\n';
    for (std::size_t s = 0; s < trace.steps.size(); ++s) {
        const TraceStep& ts = trace.steps[s];
        nlohmann::json j{{"type", "step"}, {"step", s}, {"target_confidence", ts.target_confidence}};
        nlohmann::json spikes = nlohmann::json::array();
        for (const Spike& sp : ts.spikes) {
            spikes.push_back({{"position", sp.position}, {"mass", sp.mass}});
        }
        j["spikes"] = spikes;
        if (!ts.logits.empty()) {
            j["logits"] = ts.logits;
        }
        os << j.dump() << '\n';
    }
}

inline SyntheticTrace read_trace_jsonl(std::istream& is) {
    SyntheticTrace trace;
    std::string line;
    std::size_t line_no = 0;
    bool have_header = false;
    std::size_t length = 0;
    try {
        while (std::getline(is, line)) {
            ++line_no;
            if (line.empty()) {
                continue;
            }
            const auto j = nlohmann::json::parse(line);
            const auto type = j.at("type").get<std::string>();
            if (type == "header") {
                trace.shape = {j.at("num_layers").get<std::size_t>(), j.at("num_heads").get<std::size_t>(),
                               j.at("head_dim").get<std::size_t>(), j.at("vocab_size").get<std::size_t>()};
                trace.prefill = j.at("prefill").get<std::size_t>();
                length = j.at("length").get<std::size_t>();
                trace.kv_seed = j.at("kv_seed").get<std::uint64_t>();
                if (j.contains("needle")) {
                    const auto& n = j["needle"];
                    trace.needle = NeedleAnnotation{n.at("position").get<std::int64_t>(),
                                                    n.at("query_step").get<std::int64_t>(),
                                                    n.at("spike_mass").get<double>(),
                                                    n.at("spike_period").get<std::size_t>()};
                }
                have_header = true;
            } else if (type == "step") {
                CONFKV_CHECK(have_header, "trace line " << line_no << ": step before header");
                CONFKV_CHECK(j.at("step").get<std::size_t>() == trace.steps.size(),
                             "trace line " << line_no << ": steps must be consecutive from 0");
                TraceStep ts;
                ts.target_confidence = j.at("target_confidence").get<double>();
                for (const auto& sp : j.at("spikes")) {
                    ts.spikes.push_back({sp.at("position").get<std::int64_t>(), sp.at("mass").get<double>()});
                }
                if (j.contains("logits")) {
                    ts.logits = j["logits"].get<std::vector<double>>();
                }
                trace.steps.push_back(std::move(ts));
            } else {
                throw Error("trace line " + std::to_string(line_no) + ": unknown type '" + type + "'");
            }
        }
    } catch (const nlohmann::json::exception& e) {
        throw Error("trace line " + std::to_string(line_no) + ": " + e.what());
    }
    CONFKV_CHECK(have_header, "trace has no header line");
    CONFKV_CHECK(trace.steps.size() == length,
                 "trace header announces " << length << " steps, found " << trace.steps.size());
    validate(trace.shape);
    return trace;
}

// ---------------------------------------------------------------------------
// Drivers and the decode loop

class Driver {
public:
    virtual ~Driver() = default;
    /// Announces and appends the prompt.
    virtual void prefill(Engine& engine) = 0;
    /// Inputs for step t, computed against the engine's current (pre-eviction) caches.
    virtual StepInputs inputs(std::int64_t t, const Engine& engine) = 0;
    virtual void observe(std::int64_t /*t*/, std::int32_t /*token*/) {}
    virtual std::optional<std::size_t> max_steps() const { return std::nullopt; }
    virtual std::optional<NeedleAnnotation> needle() const { return std::nullopt; }
};

/// Drives the engine with the reference model over a seeded random prompt.
class ModelDriver : public Driver {
public:
    ModelDriver(const ReferenceModel& model, std::size_t prompt_len, std::uint64_t seed,
                AttentionPath path = AttentionPath::tiled, std::size_t block = 128)
        : m_model(model), m_prompt_len(prompt_len), m_seed(seed), m_path(path), m_block(block) {}

    void prefill(Engine& engine) override {
        CONFKV_CHECK(engine.shape() == m_model.shape(), "ModelDriver: engine and model shapes differ");
        SeededRng rng(hash_combine(m_seed, 3));
        engine.begin_prefill(m_prompt_len);
        std::vector<double> last_logits;
        for (std::size_t i = 0; i < m_prompt_len; ++i) {
            const auto token = static_cast<std::int32_t>(rng.below(m_model.shape().vocab_size));
            auto res = m_model.forward(token, static_cast<std::int64_t>(i), engine.caches(), m_path, m_block);
            engine.append_prefill(res.keys, res.values);
            last_logits = std::move(res.logits);
        }
        m_pending = 0;
        for (std::size_t v = 1; v < last_logits.size(); ++v) {
            if (last_logits[v] > last_logits[static_cast<std::size_t>(m_pending)]) {
                m_pending = static_cast<std::int32_t>(v);
            }
        }
    }

    StepInputs inputs(std::int64_t /*t*/, const Engine& engine) override {
        auto res = m_model.forward(m_pending, engine.next_position(), engine.caches(), m_path, m_block);
        return StepInputs{std::move(res.logits), std::move(res.attention), std::move(res.keys), std::move(res.values)};
    }

    void observe(std::int64_t /*t*/, std::int32_t token) override { m_pending = token; }

    std::int32_t pending_token() const { return m_pending; }
    const ReferenceModel& model() const { return m_model; }
    AttentionPath path() const { return m_path; }
    std::size_t block() const { return m_block; }

private:
    const ReferenceModel& m_model;
    std::size_t m_prompt_len;
    std::uint64_t m_seed;
    AttentionPath m_path;
    std::size_t m_block;
    std::int32_t m_pending = 0;
};

/// Replays a synthetic trace: scripted confidence, hashed attention, Gaussian K/V.
class TraceDriver : public Driver {
public:
    explicit TraceDriver(const SyntheticTrace& trace, ConfidenceWeights weights = {})
        : m_trace(trace), m_weights(weights) {}

    void prefill(Engine& engine) override {
        CONFKV_CHECK(engine.shape() == m_trace.shape, "TraceDriver: engine and trace shapes differ");
        engine.begin_prefill(m_trace.prefill);
        for (std::size_t i = 0; i < m_trace.prefill; ++i) {
            auto kv = all_layers_kv(static_cast<std::int64_t>(i));
            engine.append_prefill(kv.first, kv.second);
        }
    }

    StepInputs inputs(std::int64_t t, const Engine& engine) override {
        CONFKV_CHECK(t >= 0 && static_cast<std::size_t>(t) < m_trace.steps.size(), "trace exhausted at step " << t);
        const TraceStep& ts = m_trace.steps[static_cast<std::size_t>(t)];
        StepInputs in;
        if (!ts.logits.empty()) {
            in.logits = ts.logits;
        } else {
            const auto top = static_cast<std::size_t>(t) % m_trace.shape.vocab_size;
            auto it = m_top_mass.find(ts.target_confidence);
            if (it == m_top_mass.end()) {
                const double p1 = top_mass_for_confidence(ts.target_confidence, m_trace.shape.vocab_size, m_weights);
                it = m_top_mass.emplace(ts.target_confidence, p1).first;
            }
            in.logits = logits_for_top_mass(it->second, m_trace.shape.vocab_size, top);
        }
        for (std::size_t l = 0; l < m_trace.shape.num_layers; ++l) {
            in.attention.push_back(trace_attention(m_trace, t, l, engine.caches()[l]));
        }
        auto kv = all_layers_kv(engine.next_position());
        in.keys = std::move(kv.first);
        in.values = std::move(kv.second);
        return in;
    }

    std::optional<std::size_t> max_steps() const override { return m_trace.steps.size(); }
    std::optional<NeedleAnnotation> needle() const override { return m_trace.needle; }

private:
    std::pair<std::vector<std::vector<float>>, std::vector<std::vector<float>>> all_layers_kv(std::int64_t position) {
        std::pair<std::vector<std::vector<float>>, std::vector<std::vector<float>>> out;
        for (std::size_t l = 0; l < m_trace.shape.num_layers; ++l) {
            auto kv = trace_kv(m_trace, l, position);
            out.first.push_back(std::move(kv.first));
            out.second.push_back(std::move(kv.second));
        }
        return out;
    }

    const SyntheticTrace& m_trace;
    ConfidenceWeights m_weights;
    std::map<double, double> m_top_mass;  ///< target confidence -> inverted top mass
};

struct RunResult {
    std::vector<StepRecord> records;
    /// Whether every layer still held the needle when the query step began (needle traces only).
    std::optional<bool> needle_retained;
};

inline bool cache_holds(const LayerCache& cache, std::int64_t position) {
    for (const TokenMeta& m : cache.metas()) {
        if (m.original_position == position) {
            return true;
        }
    }
    return false;
}

/// The generation loop: prefill, then `steps` policy steps. `sink` sees each record as it is produced.
inline RunResult run_decode(Engine& engine, Driver& driver, std::size_t steps,
                            const std::function<void(const StepRecord&)>& sink = {}) {
    driver.prefill(engine);
    RunResult result;
    result.records.reserve(steps);
    const auto needle = driver.needle();
    for (std::size_t s = 0; s < steps; ++s) {
        const auto t = static_cast<std::int64_t>(s);
        if (const auto limit = driver.max_steps(); limit && s >= *limit) {
            throw Error("driver exhausted after " + std::to_string(*limit) + " steps (" + std::to_string(steps) +
                        " requested)");
        }
        if (needle && needle->query_step == t) {
            bool held = true;
            for (const LayerCache& c : engine.caches()) {
                held = held && cache_holds(c, needle->position);
            }
            result.needle_retained = held;
        }
        const StepInputs in = driver.inputs(t, engine);
        StepRecord rec = engine.step(in, t);
        driver.observe(t, rec.token);
        if (sink) {
            sink(rec);
        }
        result.records.push_back(std::move(rec));
    }
    return result;
}

}  // namespace confkv
