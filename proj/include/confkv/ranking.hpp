// Copyright (C) 2026 confkv contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "confkv/core.hpp"
#include "confkv/kv_cache.hpp"

namespace confkv {

struct RankScore {
    double attention_norm = 0.0;
    double recency_norm = 0.0;
    double composite = 0.0;
};

struct RankedCandidate {
    std::size_t index = 0;  ///< storage index in the layer cache
    RankScore score;
};

namespace detail {

// Min-max normalization over the candidates; a flat feature maps to 0 everywhere.
inline std::vector<double> min_max(const std::vector<double>& xs) {
    std::vector<double> out(xs.size(), 0.0);
    if (xs.empty()) {
        return out;
    }
    const auto [lo_it, hi_it] = std::minmax_element(xs.begin(), xs.end());
    const double lo = *lo_it;
    const double span = *hi_it - lo;
    if (!(span > 0.0)) {
        return out;
    }
    for (std::size_t i = 0; i < xs.size(); ++i) {
        out[i] = (xs[i] - lo) / span;
    }
    return out;
}

// Sort key shared by every ranked eviction: lowest score first, then older, then lower index.
inline bool evict_before(double score_a, std::int64_t pos_a, std::size_t idx_a, double score_b, std::int64_t pos_b,
                         std::size_t idx_b) {
    if (score_a != score_b) {
        return score_a < score_b;
    }
    if (pos_a != pos_b) {
        return pos_a < pos_b;
    }
    return idx_a < idx_b;
}

}  // namespace detail

/**
 * Scores every entry outside the protected window (the protected_p entries
 * with the largest original positions). Attention mass and recency are
 * min-max normalized over the candidates only; recency is the generation step.
 */
inline std::vector<RankedCandidate> rank_candidates(const LayerCache& cache, double alpha, std::size_t protected_p) {
    const std::size_t n = cache.size();
    if (n <= protected_p) {
        return {};
    }
    // Storage is sorted by original position, so the protected window is the tail.
    const std::size_t candidates = n - protected_p;
    std::vector<double> ema(candidates);
    std::vector<double> step(candidates);
    for (std::size_t i = 0; i < candidates; ++i) {
        ema[i] = cache.meta(i).ema_attention;
        step[i] = static_cast<double>(cache.meta(i).generation_step);
    }
    const auto a_hat = detail::min_max(ema);
    const auto r_hat = detail::min_max(step);
    std::vector<RankedCandidate> out(candidates);
    for (std::size_t i = 0; i < candidates; ++i) {
        out[i].index = i;
        out[i].score.attention_norm = a_hat[i];
        out[i].score.recency_norm = r_hat[i];
        out[i].score.composite = alpha * a_hat[i] + (1.0 - alpha) * r_hat[i];
    }
    return out;
}

/// Evicts the `count` lowest-scored candidates (ties: older, then lower index) and compacts.
inline std::size_t evict_lowest(LayerCache& cache, const std::vector<RankedCandidate>& ranked, std::size_t count,
                                const std::vector<double>& scores) {
    CONFKV_CHECK(count <= ranked.size(), "cannot evict " << count << " of " << ranked.size() << " candidates");
    if (count == 0) {
        return 0;
    }
    std::vector<std::size_t> order(ranked.size());
    for (std::size_t i = 0; i < order.size(); ++i) {
        order[i] = i;
    }
    auto before = [&](std::size_t a, std::size_t b) {
        const auto ia = ranked[a].index;
        const auto ib = ranked[b].index;
        return detail::evict_before(scores[a], cache.meta(ia).original_position, ia, scores[b],
                                    cache.meta(ib).original_position, ib);
    };
    std::nth_element(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(count - 1), order.end(), before);
    std::vector<bool> keep(cache.size(), true);
    const std::size_t pivot = order[count - 1];
    for (std::size_t i = 0; i < order.size(); ++i) {
        if (i == pivot || before(i, pivot)) {
            keep[ranked[i].index] = false;
        }
    }
    return cache.compact(keep);
}

/**
 * Shrinks the cache to at most n entries by evicting the lowest composite
 * scores among non-protected entries. No-op when size() <= n.
 */
inline std::size_t evict_to_budget(LayerCache& cache, std::size_t n, std::size_t protected_p, double alpha) {
    if (n < protected_p) {
        throw Error("evict_to_budget: budget " + std::to_string(n) + " is smaller than the protected window " +
                    std::to_string(protected_p));
    }
    if (cache.size() <= n) {
        return 0;
    }
    const auto ranked = rank_candidates(cache, alpha, protected_p);
    std::vector<double> scores(ranked.size());
    for (std::size_t i = 0; i < ranked.size(); ++i) {
        scores[i] = ranked[i].score.composite;
    }
    return evict_lowest(cache, ranked, cache.size() - n, scores);
}

/// floor(n0 * beta^(layer / num_layers)), clamped below by n_min.
inline std::size_t pyramid_budget(std::size_t layer, const ModelShape& shape, std::size_t n0, double beta,
                                  std::size_t n_min) {
    CONFKV_CHECK(layer <= shape.num_layers, "pyramid_budget: layer " << layer << " > L=" << shape.num_layers);
    const double exponent = static_cast<double>(layer) / static_cast<double>(shape.num_layers);
    const double raw = static_cast<double>(n0) * std::pow(beta, exponent);
    const auto floored = static_cast<std::size_t>(std::floor(raw));
    return std::max(n_min, floored);
}

}  // namespace confkv
