// Copyright (C) 2026 confkv contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <vector>

#include "confkv/kv_cache.hpp"

namespace confkv {

struct AttentionResult {
    std::vector<float> output;    ///< [heads x head_dim]
    std::vector<double> weights;  ///< [heads x n], each head row sums to 1
};

/// Running state of a blockwise softmax for one head.
struct OnlineSoftmaxState {
    double running_max = -std::numeric_limits<double>::infinity();
    double normalizer = 0.0;
    std::vector<double> accumulator;

    explicit OnlineSoftmaxState(std::size_t head_dim) : accumulator(head_dim, 0.0) {}

    /// Folds in a block given its logits and a value reader v(j, c) for j in [0, logits.size()).
    template <typename ValueAt>
    void absorb(std::span<const double> logits, ValueAt&& value_at) {
        double block_max = -std::numeric_limits<double>::infinity();
        for (double l : logits) {
            block_max = std::max(block_max, l);
        }
        const double new_max = std::max(running_max, block_max);
        const double rescale = std::exp(running_max - new_max);
        normalizer *= rescale;
        for (double& a : accumulator) {
            a *= rescale;
        }
        for (std::size_t j = 0; j < logits.size(); ++j) {
            const double e = std::exp(logits[j] - new_max);
            normalizer += e;
            for (std::size_t c = 0; c < accumulator.size(); ++c) {
                accumulator[c] += e * static_cast<double>(value_at(j, c));
            }
        }
        running_max = new_max;
    }
};

namespace detail {

template <typename KeyAt>
double scaled_dot(std::span<const float> q_head, KeyAt&& key_at, double inv_sqrt_d) {
    double dot = 0.0;
    for (std::size_t c = 0; c < q_head.size(); ++c) {
        dot += static_cast<double>(q_head[c]) * static_cast<double>(key_at(c));
    }
    return dot * inv_sqrt_d;
}

}  // namespace detail

/**
 * Dense reference attention. query is [heads x head_dim], keys and values are
 * [n x heads x head_dim]. Logits are q.k / sqrt(head_dim).
 */
inline AttentionResult naive_attention(std::span<const float> query, std::span<const float> keys,
                                       std::span<const float> values, std::size_t n, std::size_t heads,
                                       std::size_t head_dim) {
    CONFKV_CHECK(n >= 1, "naive_attention needs at least one key");
    const std::size_t row = heads * head_dim;
    CONFKV_CHECK(query.size() == row, "naive_attention: query has " << query.size() << " elements, expected " << row);
    CONFKV_CHECK(keys.size() == n * row && values.size() == n * row, "naive_attention: K/V shape mismatch");
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(head_dim));

    AttentionResult out;
    out.output.assign(row, 0.0f);
    out.weights.assign(heads * n, 0.0);
    std::vector<double> logits(n);
    std::vector<double> acc(head_dim);
    for (std::size_t h = 0; h < heads; ++h) {
        auto q_head = query.subspan(h * head_dim, head_dim);
        double max_logit = -std::numeric_limits<double>::infinity();
        for (std::size_t i = 0; i < n; ++i) {
            const float* k = keys.data() + i * row + h * head_dim;
            logits[i] = detail::scaled_dot(q_head, [&](std::size_t c) { return k[c]; }, inv_sqrt_d);
            max_logit = std::max(max_logit, logits[i]);
        }
        double z = 0.0;
        std::fill(acc.begin(), acc.end(), 0.0);
        for (std::size_t i = 0; i < n; ++i) {
            const double e = std::exp(logits[i] - max_logit);
            z += e;
            const float* v = values.data() + i * row + h * head_dim;
            for (std::size_t c = 0; c < head_dim; ++c) {
                acc[c] += e * static_cast<double>(v[c]);
            }
        }
        for (std::size_t c = 0; c < head_dim; ++c) {
            out.output[h * head_dim + c] = static_cast<float>(acc[c] / z);
        }
        for (std::size_t i = 0; i < n; ++i) {
            out.weights[h * n + i] = std::exp(logits[i] - max_logit) / z;
        }
    }
    return out;
}

/**
 * Exact attention over the cache, read in blocks of `block` rows with an online
 * softmax per head. INT8 rows are dequantized as they are read. Blocks are
 * visited in ascending storage order.
 */
inline AttentionResult tiled_attention(std::span<const float> query, const LayerCache& cache, std::size_t block) {
    const std::size_t n = cache.size();
    CONFKV_CHECK(n >= 1, "tiled_attention: cache is empty");
    CONFKV_CHECK(block >= 1, "tiled_attention: block size must be >= 1");
    const std::size_t heads = cache.heads();
    const std::size_t head_dim = cache.head_dim();
    CONFKV_CHECK(query.size() == heads * head_dim,
                 "tiled_attention: query has " << query.size() << " elements, expected " << heads * head_dim);
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(head_dim));

    AttentionResult out;
    out.output.assign(heads * head_dim, 0.0f);
    out.weights.assign(heads * n, 0.0);
    std::vector<double> logits(n);
    for (std::size_t h = 0; h < heads; ++h) {
        auto q_head = query.subspan(h * head_dim, head_dim);
        OnlineSoftmaxState state(head_dim);
        for (std::size_t start = 0; start < n; start += block) {
            const std::size_t end = std::min(n, start + block);
            for (std::size_t i = start; i < end; ++i) {
                logits[i] = detail::scaled_dot(q_head, [&](std::size_t c) { return cache.key_at(i, h, c); }, inv_sqrt_d);
            }
            state.absorb(std::span<const double>(logits.data() + start, end - start),
                         [&](std::size_t j, std::size_t c) { return cache.value_at(start + j, h, c); });
        }
        for (std::size_t c = 0; c < head_dim; ++c) {
            out.output[h * head_dim + c] = static_cast<float>(state.accumulator[c] / state.normalizer);
        }
        for (std::size_t i = 0; i < n; ++i) {
            out.weights[h * n + i] = std::exp(logits[i] - state.running_max) / state.normalizer;
        }
    }
    return out;
}

}  // namespace confkv
