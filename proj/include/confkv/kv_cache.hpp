// Copyright (C) 2026 confkv contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <span>
#include <vector>

#include "confkv/core.hpp"

namespace confkv {

enum class Precision : std::uint8_t { high = 0, int8 = 1 };

/// Per-entry bookkeeping kept parallel to the K/V rows.
struct TokenMeta {
    std::int64_t original_position = 0;
    /// Prefill tokens carry position - prefill_len (negative); generated token t carries t.
    std::int64_t generation_step = 0;
    double ema_attention = 0.0;
    /// Running sum of head-mean attention, used by the heavy-hitter baseline.
    double cumulative_attention = 0.0;
    bool seen_once = false;
    Precision precision = Precision::high;
    /// Index into LayerCache::segments(); meaningful only for INT8 entries.
    std::uint32_t segment = 0;

    bool operator==(const TokenMeta&) const = default;
};

/**
 * Shared INT8 scales for one group of entries. The scales were computed over
 * every entry of the layer whose generation step lies in [step_lo, step_hi]
 * at creation time; only those entries may be quantized against it.
 */
struct QuantSegment {
    std::vector<float> key_scale;    ///< [heads * head_dim]
    std::vector<float> value_scale;  ///< [heads * head_dim]
    std::size_t member_count = 0;    ///< live INT8 entries referencing this segment
    std::int64_t step_lo = 0;
    std::int64_t step_hi = -1;

    bool covers(std::int64_t step) const { return step >= step_lo && step <= step_hi; }

    bool operator==(const QuantSegment&) const = default;
};

/**
 * K/V storage for one decoder layer.
 *
 * Rows 0..size()-1 are contiguous and sorted by original position. HIGH rows
 * live in the float arrays (accounted as 2 bytes/element); INT8 rows live in
 * the code arrays and are dequantized on read with their segment's scales.
 * Capacity doubles when an append finds the arrays full.
 */
class LayerCache {
public:
    LayerCache(std::size_t heads, std::size_t head_dim, std::size_t initial_capacity = 64, std::size_t layer_id = 0)
        : m_layer_id(layer_id), m_heads(heads), m_head_dim(head_dim) {
        CONFKV_CHECK(heads > 0 && head_dim > 0, "LayerCache needs positive heads and head_dim");
        reserve_rows(std::max<std::size_t>(initial_capacity, 1));
    }

    std::size_t layer_id() const { return m_layer_id; }
    std::size_t heads() const { return m_heads; }
    std::size_t head_dim() const { return m_head_dim; }
    std::size_t row_size() const { return m_heads * m_head_dim; }
    std::size_t size() const { return m_meta.size(); }
    bool empty() const { return m_meta.empty(); }
    std::size_t capacity() const { return m_capacity; }

    const TokenMeta& meta(std::size_t i) const { return m_meta[i]; }
    TokenMeta& meta_mut(std::size_t i) { return m_meta[i]; }
    std::span<const TokenMeta> metas() const { return m_meta; }

    const std::vector<QuantSegment>& segments() const { return m_segments; }
    const QuantSegment& segment(std::size_t id) const { return m_segments[id]; }

    void append(std::span<const float> k, std::span<const float> v, std::int64_t original_position,
                std::int64_t generation_step) {
        CONFKV_CHECK(k.size() == row_size() && v.size() == row_size(),
                     "append: expected rows of " << row_size() << " elements, got K=" << k.size()
                                                 << " V=" << v.size());
        CONFKV_CHECK(m_meta.empty() || m_meta.back().original_position < original_position,
                     "append: original positions must be strictly increasing");
        if (size() == m_capacity) {
            reserve_rows(m_capacity * 2);
        }
        const std::size_t row = size() * row_size();
        std::copy(k.begin(), k.end(), m_keys.begin() + static_cast<std::ptrdiff_t>(row));
        std::copy(v.begin(), v.end(), m_values.begin() + static_cast<std::ptrdiff_t>(row));
        TokenMeta meta;
        meta.original_position = original_position;
        meta.generation_step = generation_step;
        m_meta.push_back(meta);
    }

    /**
     * Folds one step of attention into the EMA. head_attention is [heads x size()],
     * each row a distribution. A never-seen entry takes the head mean directly.
     */
    void update_attention_ema(std::span<const double> head_attention, double lambda) {
        const std::size_t n = size();
        CONFKV_CHECK(head_attention.size() == m_heads * n,
                     "update_attention_ema: expected " << m_heads * n << " weights, got " << head_attention.size());
        for (std::size_t h = 0; h < m_heads; ++h) {
            double row_sum = 0.0;
            for (std::size_t i = 0; i < n; ++i) {
                const double w = head_attention[h * n + i];
                CONFKV_CHECK(std::isfinite(w) && w >= 0.0, "update_attention_ema: invalid attention weight");
                row_sum += w;
            }
            CONFKV_CHECK(n == 0 || std::abs(row_sum - 1.0) <= 1e-4,
                         "update_attention_ema: head " << h << " row sums to " << row_sum);
        }
        for (std::size_t i = 0; i < n; ++i) {
            double mean = 0.0;
            for (std::size_t h = 0; h < m_heads; ++h) {
                mean += head_attention[h * n + i];
            }
            mean /= static_cast<double>(m_heads);
            TokenMeta& m = m_meta[i];
            if (!m.seen_once) {
                m.ema_attention = mean;
                m.seen_once = true;
            } else {
                m.ema_attention = lambda * m.ema_attention + (1.0 - lambda) * mean;
            }
            m.cumulative_attention += mean;
        }
    }

    /// Keeps rows whose mask bit is set, preserving order. Returns the number removed.
    std::size_t compact(const std::vector<bool>& keep) {
        CONFKV_CHECK(keep.size() == size(), "compact: mask has " << keep.size() << " entries, cache has " << size());
        std::size_t write = 0;
        for (std::size_t read = 0; read < keep.size(); ++read) {
            if (!keep[read]) {
                continue;
            }
            if (write != read) {
                move_row(read, write);
                m_meta[write] = m_meta[read];
            }
            ++write;
        }
        const std::size_t evicted = size() - write;
        m_meta.resize(write);
        if (evicted > 0) {
            collect_segments();
        }
        return evicted;
    }

    /// Analytic footprint: 2 bytes/element for HIGH, 1 for INT8, K and V, plus 4-byte scales per segment.
    std::size_t memory_bytes() const {
        std::size_t bytes = 0;
        for (const TokenMeta& m : m_meta) {
            bytes += row_size() * (m.precision == Precision::high ? 2 : 1) * 2;
        }
        bytes += m_segments.size() * 4 * row_size() * 2;
        return bytes;
    }

    std::size_t int8_count() const {
        return static_cast<std::size_t>(std::count_if(m_meta.begin(), m_meta.end(), [](const TokenMeta& m) {
            return m.precision == Precision::int8;
        }));
    }

    std::span<const float> high_key(std::size_t i) const { return {m_keys.data() + i * row_size(), row_size()}; }
    std::span<const float> high_value(std::size_t i) const { return {m_values.data() + i * row_size(), row_size()}; }
    std::span<const std::int8_t> key_codes(std::size_t i) const {
        return {m_key_codes.data() + i * row_size(), row_size()};
    }
    std::span<const std::int8_t> value_codes(std::size_t i) const {
        return {m_value_codes.data() + i * row_size(), row_size()};
    }

    /// Element (h, c) of key row i as attention sees it (dequantized for INT8 rows).
    float key_at(std::size_t i, std::size_t h, std::size_t c) const {
        const std::size_t off = i * row_size() + h * m_head_dim + c;
        const TokenMeta& m = m_meta[i];
        if (m.precision == Precision::high) {
            return m_keys[off];
        }
        return static_cast<float>(m_key_codes[off]) * m_segments[m.segment].key_scale[h * m_head_dim + c];
    }

    float value_at(std::size_t i, std::size_t h, std::size_t c) const {
        const std::size_t off = i * row_size() + h * m_head_dim + c;
        const TokenMeta& m = m_meta[i];
        if (m.precision == Precision::high) {
            return m_values[off];
        }
        return static_cast<float>(m_value_codes[off]) * m_segments[m.segment].value_scale[h * m_head_dim + c];
    }

    /// Dense [size() x row_size()] copy of the keys as attention sees them.
    std::vector<float> dense_keys() const { return dense(true); }
    std::vector<float> dense_values() const { return dense(false); }

    /// Registers scales for a group of entries; returns the segment id.
    std::uint32_t add_segment(QuantSegment segment) {
        CONFKV_CHECK(segment.key_scale.size() == row_size() && segment.value_scale.size() == row_size(),
                     "add_segment: scale arrays must have " << row_size() << " elements");
        segment.member_count = 0;
        m_segments.push_back(std::move(segment));
        return static_cast<std::uint32_t>(m_segments.size() - 1);
    }

    /// Replaces HIGH row i with INT8 codes bound to segment_id.
    void store_int8(std::size_t i, std::uint32_t segment_id, std::span<const std::int8_t> key_codes,
                    std::span<const std::int8_t> value_codes) {
        CONFKV_CHECK(i < size(), "store_int8: index out of range");
        CONFKV_CHECK(segment_id < m_segments.size(), "store_int8: unknown segment " << segment_id);
        CONFKV_CHECK(m_meta[i].precision == Precision::high, "store_int8: entry is already INT8");
        CONFKV_CHECK(key_codes.size() == row_size() && value_codes.size() == row_size(), "store_int8: bad code rows");
        const std::size_t off = i * row_size();
        std::copy(key_codes.begin(), key_codes.end(), m_key_codes.begin() + static_cast<std::ptrdiff_t>(off));
        std::copy(value_codes.begin(), value_codes.end(), m_value_codes.begin() + static_cast<std::ptrdiff_t>(off));
        std::fill_n(m_keys.begin() + static_cast<std::ptrdiff_t>(off), row_size(), 0.0f);
        std::fill_n(m_values.begin() + static_cast<std::ptrdiff_t>(off), row_size(), 0.0f);
        m_meta[i].precision = Precision::int8;
        m_meta[i].segment = segment_id;
        ++m_segments[segment_id].member_count;
    }

private:
    void reserve_rows(std::size_t rows) {
        const std::size_t n = rows * row_size();
        m_keys.resize(n, 0.0f);
        m_values.resize(n, 0.0f);
        m_key_codes.resize(n, 0);
        m_value_codes.resize(n, 0);
        m_capacity = rows;
    }

    void move_row(std::size_t from, std::size_t to) {
        const std::size_t row = row_size();
        std::copy_n(m_keys.begin() + static_cast<std::ptrdiff_t>(from * row), row,
                    m_keys.begin() + static_cast<std::ptrdiff_t>(to * row));
        std::copy_n(m_values.begin() + static_cast<std::ptrdiff_t>(from * row), row,
                    m_values.begin() + static_cast<std::ptrdiff_t>(to * row));
        std::copy_n(m_key_codes.begin() + static_cast<std::ptrdiff_t>(from * row), row,
                    m_key_codes.begin() + static_cast<std::ptrdiff_t>(to * row));
        std::copy_n(m_value_codes.begin() + static_cast<std::ptrdiff_t>(from * row), row,
                    m_value_codes.begin() + static_cast<std::ptrdiff_t>(to * row));
    }

    // Drops segments with no INT8 members and no HIGH entries still waiting on them.
    void collect_segments() {
        if (m_segments.empty()) {
            return;
        }
        std::vector<std::size_t> members(m_segments.size(), 0);
        std::vector<bool> pending(m_segments.size(), false);
        for (const TokenMeta& m : m_meta) {
            if (m.precision == Precision::int8) {
                ++members[m.segment];
            }
        }
        for (const TokenMeta& m : m_meta) {
            if (m.precision != Precision::high) {
                continue;
            }
            for (std::size_t s = 0; s < m_segments.size(); ++s) {
                if (m_segments[s].covers(m.generation_step)) {
                    pending[s] = true;
                }
            }
        }
        std::vector<std::uint32_t> remap(m_segments.size(), 0);
        std::vector<QuantSegment> kept;
        for (std::size_t s = 0; s < m_segments.size(); ++s) {
            if (members[s] == 0 && !pending[s]) {
                continue;
            }
            remap[s] = static_cast<std::uint32_t>(kept.size());
            kept.push_back(std::move(m_segments[s]));
            kept.back().member_count = members[s];
        }
        m_segments = std::move(kept);
        for (TokenMeta& m : m_meta) {
            if (m.precision == Precision::int8) {
                m.segment = remap[m.segment];
            }
        }
    }

    std::vector<float> dense(bool keys) const {
        std::vector<float> out(size() * row_size());
        for (std::size_t i = 0; i < size(); ++i) {
            for (std::size_t h = 0; h < m_heads; ++h) {
                for (std::size_t c = 0; c < m_head_dim; ++c) {
                    out[i * row_size() + h * m_head_dim + c] = keys ? key_at(i, h, c) : value_at(i, h, c);
                }
            }
        }
        return out;
    }

    std::size_t m_layer_id;
    std::size_t m_heads;
    std::size_t m_head_dim;
    std::size_t m_capacity = 0;
    std::vector<float> m_keys;
    std::vector<float> m_values;
    std::vector<std::int8_t> m_key_codes;
    std::vector<std::int8_t> m_value_codes;
    std::vector<TokenMeta> m_meta;
    std::vector<QuantSegment> m_segments;
};

// ---------------------------------------------------------------------------
// Debug snapshots. Layout (all little-endian):
//   u32 layer_id, u64 valid_len, u32 heads, u32 head_dim,
//   f32 keys[valid_len*heads*head_dim], f32 values[...] (dequantized, row-major),
//   i64 original_position[valid_len], i64 generation_step[valid_len],
//   f64 ema_attention[valid_len], u8 precision[valid_len]

struct CacheSnapshot {
    std::uint32_t layer_id = 0;
    std::uint32_t heads = 0;
    std::uint32_t head_dim = 0;
    std::vector<float> keys;
    std::vector<float> values;
    std::vector<std::int64_t> original_position;
    std::vector<std::int64_t> generation_step;
    std::vector<double> ema_attention;
    std::vector<std::uint8_t> precision;

    bool operator==(const CacheSnapshot&) const = default;
};

namespace detail {

template <typename T>
void put_le(std::ostream& os, T value) {
    using U = std::conditional_t<sizeof(T) == 8, std::uint64_t,
                                 std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint8_t>>;
    const U bits = std::bit_cast<U>(value);
    for (std::size_t b = 0; b < sizeof(U); ++b) {
        os.put(static_cast<char>((bits >> (8 * b)) & 0xFF));
    }
}

template <typename T>
T get_le(std::istream& is) {
    using U = std::conditional_t<sizeof(T) == 8, std::uint64_t,
                                 std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint8_t>>;
    U bits = 0;
    for (std::size_t b = 0; b < sizeof(U); ++b) {
        const int ch = is.get();
        CONFKV_CHECK(ch != std::char_traits<char>::eof(), "snapshot truncated");
        bits |= static_cast<U>(static_cast<U>(ch) << (8 * b));
    }
    return std::bit_cast<T>(bits);
}

}  // namespace detail

inline CacheSnapshot snapshot(const LayerCache& cache) {
    CacheSnapshot s;
    s.layer_id = static_cast<std::uint32_t>(cache.layer_id());
    s.heads = static_cast<std::uint32_t>(cache.heads());
    s.head_dim = static_cast<std::uint32_t>(cache.head_dim());
    s.keys = cache.dense_keys();
    s.values = cache.dense_values();
    for (const TokenMeta& m : cache.metas()) {
        s.original_position.push_back(m.original_position);
        s.generation_step.push_back(m.generation_step);
        s.ema_attention.push_back(m.ema_attention);
        s.precision.push_back(static_cast<std::uint8_t>(m.precision));
    }
    return s;
}

inline void write_snapshot(std::ostream& os, const CacheSnapshot& s) {
    const std::uint64_t n = s.original_position.size();
    detail::put_le(os, s.layer_id);
    detail::put_le(os, n);
    detail::put_le(os, s.heads);
    detail::put_le(os, s.head_dim);
    for (float f : s.keys) detail::put_le(os, f);
    for (float f : s.values) detail::put_le(os, f);
    for (auto p : s.original_position) detail::put_le(os, p);
    for (auto p : s.generation_step) detail::put_le(os, p);
    for (double e : s.ema_attention) detail::put_le(os, e);
    for (auto p : s.precision) detail::put_le(os, p);
}

inline CacheSnapshot read_snapshot(std::istream& is) {
    CacheSnapshot s;
    s.layer_id = detail::get_le<std::uint32_t>(is);
    const auto n = detail::get_le<std::uint64_t>(is);
    s.heads = detail::get_le<std::uint32_t>(is);
    s.head_dim = detail::get_le<std::uint32_t>(is);
    const std::size_t elems = static_cast<std::size_t>(n) * s.heads * s.head_dim;
    s.keys.resize(elems);
    s.values.resize(elems);
    for (float& f : s.keys) f = detail::get_le<float>(is);
    for (float& f : s.values) f = detail::get_le<float>(is);
    s.original_position.resize(n);
    s.generation_step.resize(n);
    s.ema_attention.resize(n);
    s.precision.resize(n);
    for (auto& p : s.original_position) p = detail::get_le<std::int64_t>(is);
    for (auto& p : s.generation_step) p = detail::get_le<std::int64_t>(is);
    for (double& e : s.ema_attention) e = detail::get_le<double>(is);
    for (auto& p : s.precision) p = detail::get_le<std::uint8_t>(is);
    return s;
}

}  // namespace confkv
