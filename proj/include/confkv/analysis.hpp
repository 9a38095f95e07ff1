// Copyright (C) 2026 confkv contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <optional>
#include <span>
#include <vector>

#include "confkv/engine.hpp"
#include "confkv/simulator.hpp"

namespace confkv {

inline constexpr double kKlFloor = 1e-12;

/// KL(p || q) in nats. q is floored at 1e-12; zero-probability terms of p contribute nothing.
inline double kl_divergence(std::span<const double> p, std::span<const double> q) {
    CONFKV_CHECK(p.size() == q.size(), "kl_divergence: length mismatch (" << p.size() << " vs " << q.size() << ")");
    double kl = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        if (p[i] <= 0.0 || p[i] == q[i]) {
            continue;
        }
        kl += p[i] * std::log(p[i] / std::max(q[i], kKlFloor));
    }
    return std::max(kl, 0.0);
}

/// Sample Pearson correlation. Throws on n < 3 or a constant series.
inline double pearson(std::span<const double> xs, std::span<const double> ys) {
    CONFKV_CHECK(xs.size() == ys.size(), "pearson: length mismatch");
    CONFKV_CHECK(xs.size() >= 3, "pearson: need at least 3 pairs, got " << xs.size());
    const auto n = static_cast<double>(xs.size());
    double mx = 0.0;
    double my = 0.0;
    for (std::size_t i = 0; i < xs.size(); ++i) {
        mx += xs[i];
        my += ys[i];
    }
    mx /= n;
    my /= n;
    double sxy = 0.0;
    double sxx = 0.0;
    double syy = 0.0;
    for (std::size_t i = 0; i < xs.size(); ++i) {
        const double dx = xs[i] - mx;
        const double dy = ys[i] - my;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if (!(sxx > 0.0) || !(syy > 0.0)) {
        throw Error("pearson: correlation undefined for a constant series");
    }
    return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

// ---------------------------------------------------------------------------
// Context ablation

struct AblationPair {
    std::int64_t step = 0;
    double confidence = 0.0;
    double kl_shift = 0.0;
};

struct ConfidenceBin {
    double c_lo = 0.0;  ///< smallest confidence in the bin
    double c_hi = 0.0;
    std::size_t count = 0;
    double mean_kl = 0.0;
};

struct AblationResult {
    std::vector<AblationPair> pairs;
    std::optional<double> pearson_r;  ///< empty when undefined (constant series)
    std::vector<ConfidenceBin> bins;  ///< 10 equal-count bins by confidence
};

struct AblationOptions {
    std::size_t prompt_len = 256;
    std::size_t steps = 1500;
    std::size_t ablate_r = 256;
    std::size_t samples = 1200;
    std::uint64_t seed = 1;
};

/// Copies of the caches with the `r` most recent entries of every layer removed.
inline std::vector<LayerCache> drop_recent(const std::vector<LayerCache>& caches, std::size_t r) {
    std::vector<LayerCache> out = caches;
    for (LayerCache& c : out) {
        const std::size_t n = c.size();
        std::vector<bool> keep(n, true);
        for (std::size_t i = n - std::min(r, n); i < n; ++i) {
            keep[i] = false;
        }
        c.compact(keep);
    }
    return out;
}

/// Quantile bins: pairs sorted by confidence and split into `count` near-equal chunks.
inline std::vector<ConfidenceBin> decile_bins(std::vector<AblationPair> pairs, std::size_t count = 10) {
    std::vector<ConfidenceBin> bins;
    if (pairs.empty()) {
        return bins;
    }
    std::stable_sort(pairs.begin(), pairs.end(),
                     [](const AblationPair& a, const AblationPair& b) { return a.confidence < b.confidence; });
    const std::size_t n = pairs.size();
    for (std::size_t b = 0; b < count; ++b) {
        const std::size_t lo = b * n / count;
        const std::size_t hi = (b + 1) * n / count;
        if (lo == hi) {
            continue;
        }
        ConfidenceBin bin;
        bin.c_lo = pairs[lo].confidence;
        bin.c_hi = pairs[hi - 1].confidence;
        bin.count = hi - lo;
        for (std::size_t i = lo; i < hi; ++i) {
            bin.mean_kl += pairs[i].kl_shift;
        }
        bin.mean_kl /= static_cast<double>(bin.count);
        bins.push_back(bin);
    }
    return bins;
}

/**
 * Decodes `steps` tokens with the given engine and model. At `samples` steps
 * drawn uniformly without replacement, the forward pass is repeated on a copy
 * of the caches without the most recent ablate_r entries, and
 * KL(p_full || p_ablated) is paired with the step's confidence. Sampled steps
 * whose caches hold no more than ablate_r entries are skipped.
 */
inline AblationResult ablation_experiment(Engine& engine, const ReferenceModel& model, const AblationOptions& opt) {
    CONFKV_CHECK(opt.samples <= opt.steps, "ablation: samples (" << opt.samples << ") exceed steps (" << opt.steps << ")");
    ModelDriver driver(model, opt.prompt_len, opt.seed, AttentionPath::tiled, engine.config().block_size_b);
    driver.prefill(engine);

    SeededRng rng(hash_combine(opt.seed, 4));
    std::vector<bool> sampled(opt.steps, false);
    for (std::size_t s : rng.sample_without_replacement(opt.steps, opt.samples)) {
        sampled[s] = true;
    }
    const ConfidenceWeights weights = ConfidenceWeights::from(engine.config());

    AblationResult result;
    for (std::size_t s = 0; s < opt.steps; ++s) {
        const auto t = static_cast<std::int64_t>(s);
        const StepInputs in = driver.inputs(t, engine);
        if (sampled[s]) {
            bool enough = true;
            for (const LayerCache& c : engine.caches()) {
                enough = enough && c.size() > opt.ablate_r;
            }
            if (enough) {
                const auto ablated = drop_recent(engine.caches(), opt.ablate_r);
                const auto alt = model.forward(driver.pending_token(), engine.next_position(), ablated,
                                               AttentionPath::tiled, engine.config().block_size_b);
                const auto p_full = engine.distribution(in.logits);
                const auto p_abl = engine.distribution(alt.logits);
                result.pairs.push_back({t, confidence_score(p_full, weights).score, kl_divergence(p_full, p_abl)});
            }
        }
        const StepRecord rec = engine.step(in, t);
        driver.observe(t, rec.token);
    }
    if (opt.samples > 0 && result.pairs.empty()) {
        throw Error("ablation: every sampled step had no more than ablate_r=" + std::to_string(opt.ablate_r) +
                    " cached entries");
    }

    std::vector<double> cs;
    std::vector<double> kls;
    for (const AblationPair& p : result.pairs) {
        cs.push_back(p.confidence);
        kls.push_back(p.kl_shift);
    }
    try {
        result.pearson_r = pearson(cs, kls);
    } catch (const Error&) {
        result.pearson_r.reset();
    }
    result.bins = decile_bins(result.pairs);
    return result;
}

// ---------------------------------------------------------------------------
// Trace summaries

inline constexpr std::size_t kHistogramBins = 20;

struct TraceSummary {
    std::size_t steps = 0;
    double mean_len = 0.0;       ///< mean over steps and layers of the post-append length
    std::size_t max_len = 0;
    double eviction_rate = 0.0;  ///< fraction of steps on which any layer evicted
    std::size_t total_evicted = 0;
    std::size_t peak_bytes = 0;
    double mean_bytes = 0.0;
    std::size_t final_bytes = 0;
    double quantized_fraction = 0.0;  ///< INT8 share of retained entries, pooled over steps and layers
    double confident_fraction = 0.0;
    std::array<std::size_t, kHistogramBins> confidence_histogram{};  ///< bin k covers [k/20, (k+1)/20)
};

inline TraceSummary summarize_trace(std::span<const StepRecord> records) {
    CONFKV_CHECK(!records.empty(), "summarize_trace: no records");
    TraceSummary s;
    s.steps = records.size();
    double len_sum = 0.0;
    std::size_t len_count = 0;
    std::size_t evicting_steps = 0;
    std::size_t confident = 0;
    double bytes_sum = 0.0;
    std::size_t int8_sum = 0;
    std::size_t retained_sum = 0;
    for (const StepRecord& r : records) {
        for (std::size_t l = 0; l < r.len_post.size(); ++l) {
            len_sum += static_cast<double>(r.len_post[l]);
            ++len_count;
            s.max_len = std::max(s.max_len, r.len_post[l]);
            int8_sum += r.int8_entries[l];
            retained_sum += r.len_post_evict[l];
        }
        const std::size_t ev = r.total_evicted();
        s.total_evicted += ev;
        evicting_steps += ev > 0 ? 1 : 0;
        confident += r.confident ? 1 : 0;
        s.peak_bytes = std::max(s.peak_bytes, r.bytes);
        bytes_sum += static_cast<double>(r.bytes);
        const double c = std::clamp(r.confidence.score, 0.0, 1.0);
        const auto bin = std::min(kHistogramBins - 1, static_cast<std::size_t>(c * kHistogramBins));
        ++s.confidence_histogram[bin];
    }
    const auto n = static_cast<double>(records.size());
    s.mean_len = len_count ? len_sum / static_cast<double>(len_count) : 0.0;
    s.eviction_rate = static_cast<double>(evicting_steps) / n;
    s.mean_bytes = bytes_sum / n;
    s.final_bytes = records.back().bytes;
    s.quantized_fraction = retained_sum ? static_cast<double>(int8_sum) / static_cast<double>(retained_sum) : 0.0;
    s.confident_fraction = static_cast<double>(confident) / n;
    return s;
}

}  // namespace confkv
