// Copyright (C) 2026 confkv contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <vector>

#include "confkv/kv_cache.hpp"

namespace confkv {

/// Codes and per-(head, channel) scale for a block of [n_tokens x lanes] values.
struct QuantizedBlock {
    std::vector<std::int8_t> codes;
    std::vector<float> scale;
};

/// round-half-away-from-zero(x / scale) clamped to [-127, 127]; a zero scale yields 0.
inline std::int8_t quantize_value(float x, float scale) {
    if (scale == 0.0f) {
        return 0;
    }
    const double q = std::round(static_cast<double>(x) / static_cast<double>(scale));
    return static_cast<std::int8_t>(std::clamp(q, -127.0, 127.0));
}

inline float lane_scale(float max_abs) {
    return max_abs / 127.0f;
}

/**
 * Symmetric INT8 quantization with one scale per lane (head x channel):
 * scale = max |x| / 127 over the tokens, codes = round(x / scale).
 */
inline QuantizedBlock quantize_segment(std::span<const float> values, std::size_t n_tokens, std::size_t lanes) {
    CONFKV_CHECK(n_tokens >= 1, "quantize_segment needs at least one token");
    CONFKV_CHECK(values.size() == n_tokens * lanes, "quantize_segment: expected " << n_tokens * lanes << " values");
    QuantizedBlock out;
    out.scale.assign(lanes, 0.0f);
    out.codes.resize(values.size());
    for (std::size_t lane = 0; lane < lanes; ++lane) {
        float max_abs = 0.0f;
        for (std::size_t t = 0; t < n_tokens; ++t) {
            const float x = values[t * lanes + lane];
            CONFKV_CHECK(std::isfinite(x), "quantize_segment got a non-finite value");
            max_abs = std::max(max_abs, std::abs(x));
        }
        out.scale[lane] = lane_scale(max_abs);
    }
    for (std::size_t t = 0; t < n_tokens; ++t) {
        for (std::size_t lane = 0; lane < lanes; ++lane) {
            out.codes[t * lanes + lane] = quantize_value(values[t * lanes + lane], out.scale[lane]);
        }
    }
    return out;
}

inline float dequantize_value(std::int8_t code, float scale) {
    return static_cast<float>(code) * scale;
}

inline std::vector<float> dequantize(std::span<const std::int8_t> codes, std::span<const float> scale) {
    const std::size_t lanes = scale.size();
    CONFKV_CHECK(lanes > 0 && codes.size() % lanes == 0, "dequantize: code count is not a multiple of the lane count");
    std::vector<float> out(codes.size());
    for (std::size_t i = 0; i < codes.size(); ++i) {
        out[i] = dequantize_value(codes[i], scale[i % lanes]);
    }
    return out;
}

namespace detail {

inline std::int64_t floor_div(std::int64_t a, std::int64_t b) {
    std::int64_t q = a / b;
    if ((a % b != 0) && ((a < 0) != (b < 0))) {
        --q;
    }
    return q;
}

// New segment for the group containing `step`, computed over every HIGH entry of
// that group not already covered by an existing segment.
inline std::uint32_t open_segment(LayerCache& cache, std::int64_t step, std::size_t group) {
    const auto g = static_cast<std::int64_t>(group);
    const std::int64_t group_lo = floor_div(step, g) * g;
    const std::int64_t group_hi = group_lo + g - 1;
    std::int64_t lo = group_lo;
    for (const QuantSegment& s : cache.segments()) {
        if (s.step_hi >= group_lo && s.step_lo <= group_hi) {
            lo = std::max(lo, s.step_hi + 1);
        }
    }

    const std::size_t lanes = cache.row_size();
    QuantSegment seg;
    seg.key_scale.assign(lanes, 0.0f);
    seg.value_scale.assign(lanes, 0.0f);
    seg.step_lo = lo;
    seg.step_hi = lo - 1;
    std::vector<float> key_max(lanes, 0.0f);
    std::vector<float> value_max(lanes, 0.0f);
    for (std::size_t i = 0; i < cache.size(); ++i) {
        const TokenMeta& m = cache.meta(i);
        if (m.precision != Precision::high || m.generation_step < lo || m.generation_step > group_hi) {
            continue;
        }
        seg.step_hi = std::max(seg.step_hi, m.generation_step);
        auto k = cache.high_key(i);
        auto v = cache.high_value(i);
        for (std::size_t lane = 0; lane < lanes; ++lane) {
            key_max[lane] = std::max(key_max[lane], std::abs(k[lane]));
            value_max[lane] = std::max(value_max[lane], std::abs(v[lane]));
        }
    }
    for (std::size_t lane = 0; lane < lanes; ++lane) {
        seg.key_scale[lane] = lane_scale(key_max[lane]);
        seg.value_scale[lane] = lane_scale(value_max[lane]);
    }
    return cache.add_segment(std::move(seg));
}

}  // namespace detail

/**
 * Quantizes every HIGH entry whose generation step is <= current_step - w.
 *
 * Entries are grouped into spans of `group` generation steps; the first time an
 * entry of a span is quantized, one segment is opened whose scales cover all
 * HIGH entries of the span present at that moment (including those still inside
 * the window). Later entries of the span reuse those scales, so nothing is ever
 * requantized and |x - dequant(x)| <= scale / 2 holds for every member. Entries
 * appended after the segment was opened get a fresh segment.
 *
 * Returns the number of entries converted.
 */
inline std::size_t apply_fp16_window(LayerCache& cache, std::size_t w, std::int64_t current_step,
                                     std::size_t group = 128) {
    CONFKV_CHECK(group >= 1, "apply_fp16_window: group must be >= 1");
    constexpr auto kHuge = static_cast<std::size_t>(std::numeric_limits<std::int64_t>::max() / 4);
    const std::int64_t threshold = current_step - static_cast<std::int64_t>(std::min(w, kHuge));

    const std::size_t lanes = cache.row_size();
    std::vector<std::int8_t> key_codes(lanes);
    std::vector<std::int8_t> value_codes(lanes);
    std::size_t converted = 0;
    for (std::size_t i = 0; i < cache.size(); ++i) {
        const TokenMeta& m = cache.meta(i);
        if (m.precision != Precision::high || m.generation_step > threshold) {
            continue;
        }
        std::uint32_t seg_id = 0;
        bool found = false;
        for (std::size_t s = 0; s < cache.segments().size(); ++s) {
            if (cache.segment(s).covers(m.generation_step)) {
                seg_id = static_cast<std::uint32_t>(s);
                found = true;
                break;
            }
        }
        if (!found) {
            seg_id = detail::open_segment(cache, m.generation_step, group);
            CONFKV_CHECK(cache.segment(seg_id).covers(m.generation_step),
                         "apply_fp16_window: generation steps are not monotone in storage order");
        }
        const QuantSegment& seg = cache.segment(seg_id);
        auto k = cache.high_key(i);
        auto v = cache.high_value(i);
        for (std::size_t lane = 0; lane < lanes; ++lane) {
            key_codes[lane] = quantize_value(k[lane], seg.key_scale[lane]);
            value_codes[lane] = quantize_value(v[lane], seg.value_scale[lane]);
        }
        cache.store_int8(i, seg_id, key_codes, value_codes);
        ++converted;
    }
    return converted;
}

}  // namespace confkv
