// Copyright (C) 2026 confkv contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <istream>
#include <map>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "confkv/ranking.hpp"
#include "confkv/rng.hpp"

namespace confkv {

/// Keeps the window_n entries with the largest original positions.
inline std::size_t sliding_window_step(LayerCache& cache, std::size_t window_n) {
    CONFKV_CHECK(window_n >= 1, "sliding_window_step: window must be >= 1");
    if (cache.size() <= window_n) {
        return 0;
    }
    std::vector<bool> keep(cache.size(), false);
    for (std::size_t i = cache.size() - window_n; i < cache.size(); ++i) {
        keep[i] = true;
    }
    return cache.compact(keep);
}

/// H2O-style: protected window plus the highest cumulative-attention candidates, up to cap_n.
inline std::size_t heavy_hitter_step(LayerCache& cache, std::size_t cap_n, std::size_t protected_p) {
    if (cap_n < protected_p) {
        throw Error("heavy_hitter_step: cap " + std::to_string(cap_n) + " is smaller than the protected window " +
                    std::to_string(protected_p));
    }
    if (cache.size() <= cap_n) {
        return 0;
    }
    auto ranked = rank_candidates(cache, 1.0, protected_p);
    std::vector<double> scores(ranked.size());
    for (std::size_t i = 0; i < ranked.size(); ++i) {
        scores[i] = cache.meta(ranked[i].index).cumulative_attention;
    }
    return evict_lowest(cache, ranked, cache.size() - cap_n, scores);
}

struct EvictionEvent {
    std::int64_t step = 0;
    std::size_t layer = 0;
    std::size_t evict_count = 0;

    bool operator==(const EvictionEvent&) const = default;
};

/// Eviction events of a recorded run, keyed by (step, layer).
class EvictionSchedule {
public:
    void record(std::int64_t step, std::size_t layer, std::size_t count) {
        if (count > 0) {
            m_events[{step, layer}] += count;
        }
    }

    std::size_t count_at(std::int64_t step, std::size_t layer) const {
        auto it = m_events.find({step, layer});
        return it == m_events.end() ? 0 : it->second;
    }

    std::vector<EvictionEvent> events() const {
        std::vector<EvictionEvent> out;
        out.reserve(m_events.size());
        for (const auto& [key, count] : m_events) {
            out.push_back({key.first, key.second, count});
        }
        return out;
    }

    std::size_t total() const {
        std::size_t sum = 0;
        for (const auto& [key, count] : m_events) {
            sum += count;
        }
        return sum;
    }

    bool empty() const { return m_events.empty(); }

    /// JSONL, one {"step","layer","evict_count"} object per line, ordered by (step, layer).
    void write_jsonl(std::ostream& os) const {
        for (const auto& e : events()) {
            os << nlohmann::json{{"step", e.step}, {"layer", e.layer}, {"evict_count", e.evict_count}}.dump() << '\n';
        }
    }

    static EvictionSchedule read_jsonl(std::istream& is) {
        EvictionSchedule s;
        std::string line;
        std::size_t line_no = 0;
        while (std::getline(is, line)) {
            ++line_no;
            if (line.empty()) {
                continue;
            }
            try {
                const auto j = nlohmann::json::parse(line);
                s.record(j.at("step").get<std::int64_t>(), j.at("layer").get<std::size_t>(),
                         j.at("evict_count").get<std::size_t>());
            } catch (const nlohmann::json::exception& e) {
                throw Error("schedule line " + std::to_string(line_no) + ": " + e.what());
            }
        }
        return s;
    }

private:
    std::map<std::pair<std::int64_t, std::size_t>, std::size_t> m_events;
};

enum class MatchedMode { random, recency_only, attention_only };

/**
 * One matched-rate replay event: evicts exactly `count` non-protected entries,
 * chosen uniformly (random), by recency alone (alpha = 0) or by attention alone
 * (alpha = 1). Throws when the cache has fewer candidates than the event needs.
 */
inline std::size_t matched_rate_evict(LayerCache& cache, std::size_t count, std::size_t protected_p, MatchedMode mode,
                                      SeededRng& rng) {
    if (count == 0) {
        return 0;
    }
    const std::size_t candidates = cache.size() > protected_p ? cache.size() - protected_p : 0;
    if (count > candidates) {
        throw Error("matched-rate schedule mismatch: event needs " + std::to_string(count) + " evictions but only " +
                    std::to_string(candidates) + " candidates exist");
    }
    switch (mode) {
        case MatchedMode::recency_only:
            return evict_to_budget(cache, cache.size() - count, protected_p, 0.0);
        case MatchedMode::attention_only:
            return evict_to_budget(cache, cache.size() - count, protected_p, 1.0);
        case MatchedMode::random: {
            std::vector<bool> keep(cache.size(), true);
            for (std::size_t idx : rng.sample_without_replacement(candidates, count)) {
                keep[idx] = false;
            }
            return cache.compact(keep);
        }
    }
    return 0;
}

}  // namespace confkv
