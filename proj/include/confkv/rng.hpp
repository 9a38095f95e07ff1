// Copyright (C) 2026 confkv contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <vector>

#include "confkv/core.hpp"

namespace confkv {

/// SplitMix64 finalizer: the avalanche mix applied to every counter value.
constexpr std::uint64_t splitmix64_mix(std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

/// Stateless hash of a key tuple; used to derive per-(layer, position, ...) streams.
template <typename... Ts>
constexpr std::uint64_t hash_combine(std::uint64_t seed, Ts... parts) {
    std::uint64_t h = splitmix64_mix(seed + 0x9E3779B97F4A7C15ULL);
    ((h = splitmix64_mix(h ^ (static_cast<std::uint64_t>(parts) + 0x9E3779B97F4A7C15ULL))), ...);
    return h;
}

/**
 * Counter-based SplitMix64 generator.
 *
 * state_{k+1} = state_k + 0x9E3779B97F4A7C15 (mod 2^64); output = mix(state_{k+1})
 * with mix() = splitmix64_mix above. Integer draws are exact on every platform.
 * uniform() takes the top 53 bits; below() uses Lemire's multiply-shift with
 * rejection, so both are bit-reproducible. normal() goes through std::log and
 * std::cos and inherits the platform libm's last-ulp behaviour.
 */
class SeededRng {
public:
    explicit SeededRng(std::uint64_t seed = 0) : m_seed(seed), m_state(seed) {}

    std::uint64_t seed() const { return m_seed; }

    std::uint64_t next_u64() {
        m_state += 0x9E3779B97F4A7C15ULL;
        return splitmix64_mix(m_state);
    }

    /// Uniform in [0, 1).
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    /// Uniform integer in [0, n). n must be positive.
    std::uint64_t below(std::uint64_t n) {
        CONFKV_CHECK(n > 0, "SeededRng::below requires n > 0");
        std::uint64_t x = next_u64();
        unsigned __int128 m = static_cast<unsigned __int128>(x) * n;
        auto low = static_cast<std::uint64_t>(m);
        if (low < n) {
            const std::uint64_t threshold = (0 - n) % n;
            while (low < threshold) {
                x = next_u64();
                m = static_cast<unsigned __int128>(x) * n;
                low = static_cast<std::uint64_t>(m);
            }
        }
        return static_cast<std::uint64_t>(m >> 64);
    }

    /// Standard normal via Box-Muller (one draw per call, the sine branch is discarded).
    double normal() {
        double u1 = uniform();
        while (u1 <= 0.0) {
            u1 = uniform();
        }
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
    }

    /// k distinct indices from [0, n) in draw order (partial Fisher-Yates).
    std::vector<std::size_t> sample_without_replacement(std::size_t n, std::size_t k) {
        CONFKV_CHECK(k <= n, "cannot sample " << k << " of " << n << " without replacement");
        std::vector<std::size_t> pool(n);
        for (std::size_t i = 0; i < n; ++i) {
            pool[i] = i;
        }
        for (std::size_t i = 0; i < k; ++i) {
            const std::size_t j = i + static_cast<std::size_t>(below(n - i));
            std::swap(pool[i], pool[j]);
        }
        pool.resize(k);
        return pool;
    }

private:
    std::uint64_t m_seed;
    std::uint64_t m_state;
};

}  // namespace confkv
