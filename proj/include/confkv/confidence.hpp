// Copyright (C) 2026 confkv contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <vector>

#include "confkv/core.hpp"

namespace confkv {

/// Floor applied to the runner-up probability when computing the log margin.
inline constexpr double kMarginFloor = 1e-12;

struct ConfidenceWeights {
    double entropy = 0.4;
    double margin = 0.3;
    double top = 0.3;

    static ConfidenceWeights from(const PolicyConfig& cfg) { return {cfg.w_entropy, cfg.w_margin, cfg.w_top}; }
};

struct ConfidenceFeatures {
    double entropy_norm = 0.0;  ///< H(p) / ln V, nats over nats
    double margin = 0.0;        ///< ln p(1) - ln p(2)
    double margin_sig = 0.5;    ///< logistic(margin)
    double top_prob = 0.0;
    double score = 0.0;
};

inline double logistic(double x) {
    return 1.0 / (1.0 + std::exp(-x));
}

/// Max-subtracted softmax. Throws on fewer than two logits or a non-finite logit.
inline std::vector<double> stable_softmax(std::span<const double> logits) {
    CONFKV_CHECK(logits.size() >= 2, "softmax needs at least 2 logits, got " << logits.size());
    double max_logit = -std::numeric_limits<double>::infinity();
    for (double l : logits) {
        CONFKV_CHECK(std::isfinite(l), "softmax got a non-finite logit");
        max_logit = std::max(max_logit, l);
    }
    std::vector<double> p(logits.size());
    double z = 0.0;
    for (std::size_t i = 0; i < logits.size(); ++i) {
        p[i] = std::exp(logits[i] - max_logit);
        z += p[i];
    }
    for (double& v : p) {
        v /= z;
    }
    return p;
}

/**
 * Composite confidence c = w_H (1 - H/ln V) + w_m logistic(ln p1 - ln p2) + w_p p1.
 * Zero-probability terms contribute nothing to H; p2 is floored at kMarginFloor.
 */
inline ConfidenceFeatures confidence_score(std::span<const double> p, const ConfidenceWeights& w) {
    const std::size_t vocab = p.size();
    CONFKV_CHECK(vocab >= 2, "confidence_score needs V >= 2, got " << vocab);
    double total = 0.0;
    double entropy = 0.0;
    double p1 = -1.0;
    double p2 = -1.0;
    for (double v : p) {
        CONFKV_CHECK(std::isfinite(v) && v >= 0.0, "confidence_score got an invalid probability");
        total += v;
        if (v > 0.0) {
            entropy -= v * std::log(v);
        }
        if (v > p1) {
            p2 = p1;
            p1 = v;
        } else if (v > p2) {
            p2 = v;
        }
    }
    CONFKV_CHECK(std::abs(total - 1.0) <= 1e-6, "confidence_score: probabilities sum to " << total);

    ConfidenceFeatures f;
    f.entropy_norm = std::clamp(entropy / std::log(static_cast<double>(vocab)), 0.0, 1.0);
    f.top_prob = p1;
    f.margin = std::max(0.0, std::log(p1) - std::log(std::max(p2, kMarginFloor)));
    f.margin_sig = logistic(f.margin);
    f.score = w.entropy * (1.0 - f.entropy_norm) + w.margin * f.margin_sig + w.top * f.top_prob;
    return f;
}

/// N_high when c >= tau, N_low otherwise.
inline std::size_t select_budget(double c, const PolicyConfig& cfg) {
    return c >= cfg.tau ? cfg.n_high : cfg.n_low;
}

}  // namespace confkv
