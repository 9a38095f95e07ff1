// Copyright (C) 2026 confkv contributors
// SPDX-License-Identifier: Apache-2.0

// Acceptance run: one PASS/FAIL line per criterion, nonzero exit if any fails.

#include <sys/wait.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <set>
#include <sstream>
#include <string>
#include <tuple>

#include "confkv/analysis.hpp"
#include "confkv/attention.hpp"
#include "confkv/engine.hpp"
#include "confkv/quantizer.hpp"
#include "confkv/simulator.hpp"

using namespace confkv;
namespace fs = std::filesystem;

namespace {

struct Outcome {
    bool pass = true;
    std::string detail;
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string num(double x, int precision = 4) {
    std::ostringstream os;
    os.precision(precision);
    os << x;
    return os.str();
}

// ---------------------------------------------------------------------------
// 1. tiled vs naive attention

std::vector<float> gaussian(SeededRng& rng, std::size_t n, double sd) {
    std::vector<float> v(n);
    for (auto& x : v) x = static_cast<float>(rng.normal() * sd);
    return v;
}

Outcome attention_exactness() {
    const auto t0 = std::chrono::steady_clock::now();
    SeededRng rng(101);
    const std::size_t blocks[] = {1, 2, 3, 16, 128};
    double worst = 0.0;
    std::size_t mixed = 0;
    for (int trial = 0; trial < 1000; ++trial) {
        const std::size_t n = 1 + rng.below(512);
        const std::size_t heads = 1 + rng.below(4);
        const std::size_t dim = 1 + rng.below(16);
        LayerCache cache(heads, dim);
        for (std::size_t i = 0; i < n; ++i) {
            cache.append(gaussian(rng, heads * dim, 1.0), gaussian(rng, heads * dim, 1.0),
                         static_cast<std::int64_t>(i), static_cast<std::int64_t>(i));
        }
        apply_fp16_window(cache, rng.below(n + 1), static_cast<std::int64_t>(n - 1), 1 + rng.below(128));
        mixed += cache.int8_count() > 0 && cache.int8_count() < n ? 1 : 0;
        const auto q = gaussian(rng, heads * dim, 0.5 + 2.0 * rng.uniform());
        const std::size_t b = blocks[rng.below(5)];
        const auto tiled = tiled_attention(q, cache, b);
        const auto keys = cache.dense_keys();
        const auto values = cache.dense_values();
        const auto ref = naive_attention(q, keys, values, n, heads, dim);
        for (std::size_t h = 0; h < heads; ++h) {
            double scale = 0.0;
            double diff = 0.0;
            for (std::size_t c = 0; c < dim; ++c) {
                const double want = ref.output[h * dim + c];
                scale = std::max(scale, std::abs(want));
                diff = std::max(diff, std::abs(tiled.output[h * dim + c] - want));
            }
            worst = std::max(worst, scale > 0.0 ? diff / scale : diff);
        }
    }
    const double secs = seconds_since(t0);
    return {worst <= 1e-5 && secs < 60.0, "1000 cases (" + std::to_string(mixed) + " mixed HIGH/INT8), max rel err " +
                                              num(worst) + ", " + num(secs, 3) + " s"};
}

// ---------------------------------------------------------------------------
// 2. eviction oracle

std::set<std::int64_t> full_sort_survivors(const LayerCache& c, std::size_t n, std::size_t p, double alpha) {
    std::set<std::int64_t> kept;
    for (const auto& m : c.metas()) kept.insert(m.original_position);
    if (c.size() <= n) return kept;
    std::vector<std::int64_t> by_pos(kept.begin(), kept.end());
    const std::set<std::int64_t> prot(by_pos.end() - static_cast<std::ptrdiff_t>(p), by_pos.end());
    std::vector<std::size_t> cand;
    for (std::size_t i = 0; i < c.size(); ++i) {
        if (!prot.count(c.meta(i).original_position)) cand.push_back(i);
    }
    double alo = INFINITY, ahi = -INFINITY, rlo = INFINITY, rhi = -INFINITY;
    for (std::size_t i : cand) {
        const double a = c.meta(i).ema_attention;
        const auto r = static_cast<double>(c.meta(i).generation_step);
        alo = std::min(alo, a);
        ahi = std::max(ahi, a);
        rlo = std::min(rlo, r);
        rhi = std::max(rhi, r);
    }
    std::vector<std::tuple<double, std::int64_t, std::size_t>> keyed;
    for (std::size_t i : cand) {
        const double a = ahi > alo ? (c.meta(i).ema_attention - alo) / (ahi - alo) : 0.0;
        const double r = rhi > rlo ? (static_cast<double>(c.meta(i).generation_step) - rlo) / (rhi - rlo) : 0.0;
        keyed.emplace_back(alpha * a + (1.0 - alpha) * r, c.meta(i).original_position, i);
    }
    std::sort(keyed.begin(), keyed.end());
    for (std::size_t k = 0; k < c.size() - n; ++k) kept.erase(std::get<1>(keyed[k]));
    return kept;
}

Outcome eviction_oracle() {
    const auto t0 = std::chrono::steady_clock::now();
    SeededRng rng(202);
    std::size_t mismatches = 0;
    std::size_t invariant_failures = 0;
    const std::vector<float> row{1.0f};
    for (int trial = 0; trial < 10000; ++trial) {
        const std::size_t len = 1 + rng.below(400);
        LayerCache c(1, 1);
        std::int64_t step = -static_cast<std::int64_t>(rng.below(300));
        for (std::size_t i = 0; i < len; ++i) {
            step += static_cast<std::int64_t>(1 + rng.below(2));
            c.append(row, row, static_cast<std::int64_t>(i), step);
            c.meta_mut(i).ema_attention = rng.below(3) == 0 ? 0.5 : std::floor(rng.uniform() * 16.0) / 16.0;
        }
        const std::size_t p = rng.below(std::min<std::size_t>(len, 64) + 1);
        const std::size_t n = p + rng.below(len + 8);
        const double alpha = rng.below(5) == 0 ? static_cast<double>(rng.below(2)) : rng.uniform();
        std::vector<std::int64_t> tail;
        for (std::size_t i = len - p; i < len; ++i) tail.push_back(c.meta(i).original_position);
        const auto expect = full_sort_survivors(c, n, p, alpha);
        evict_to_budget(c, n, p, alpha);
        std::set<std::int64_t> got;
        for (const auto& m : c.metas()) got.insert(m.original_position);
        mismatches += got != expect ? 1 : 0;
        bool ok = c.size() == std::min(len, n);
        for (auto pos : tail) ok = ok && got.count(pos) == 1;
        invariant_failures += ok ? 0 : 1;
    }
    const double secs = seconds_since(t0);
    return {mismatches == 0 && invariant_failures == 0 && secs < 120.0,
            "10000 cases, " + std::to_string(mismatches) + " survivor mismatches, " +
                std::to_string(invariant_failures) + " invariant failures, " + num(secs, 3) + " s"};
}

// ---------------------------------------------------------------------------
// 3. confidence formula

Outcome confidence_formula() {
    const ConfidenceWeights w{0.4, 0.3, 0.3};
    std::vector<double> one_hot(8, 1e-12);
    one_hot[0] = 1.0 - 7e-12;
    const double c1 = confidence_score(one_hot, w).score;
    const double c2 = confidence_score(std::vector<double>(4, 0.25), w).score;
    // Independent scalar evaluation for (0.9, 0.1).
    const double h = -(0.9 * std::log(0.9) + 0.1 * std::log(0.1)) / std::log(2.0);
    const double sig = 1.0 / (1.0 + std::exp(-std::log(9.0)));
    const double oracle = 0.4 * (1.0 - h) + 0.3 * sig + 0.3 * 0.9;
    const double c3 = confidence_score(std::vector<double>{0.9, 0.1}, w).score;
    bool pass = std::abs(c1 - 1.0) <= 1e-6 && std::abs(c2 - 0.225) <= 1e-6 && std::abs(c3 - oracle) <= 1e-6 &&
                std::abs(c3 - 0.7524) <= 1e-4;

    SeededRng rng(303);
    std::size_t violations = 0;
    for (int i = 0; i < 1000; ++i) {
        const std::size_t v = 2 + rng.below(200);
        std::vector<double> p(v);
        double sum = 0.0;
        for (auto& x : p) sum += x = std::pow(-std::log(1.0 - rng.uniform()), 2.0);
        for (auto& x : p) x /= sum;
        const double power = 1.0 + 4.0 * rng.uniform() + 1e-3;
        std::vector<double> q(v);
        double qs = 0.0;
        for (std::size_t j = 0; j < v; ++j) qs += q[j] = std::pow(p[j], power);
        for (auto& x : q) x /= qs;
        violations += confidence_score(q, w).score + 1e-12 < confidence_score(p, w).score ? 1 : 0;
    }
    pass = pass && violations == 0;
    return {pass, "c(one-hot)=" + num(c1, 10) + ", c(uniform4)=" + num(c2, 10) + ", c(0.9,0.1)=" + num(c3, 10) +
                      " (scalar " + num(oracle, 10) + "), " + std::to_string(violations) +
                      "/1000 sharpening violations"};
}

// ---------------------------------------------------------------------------
// 4. quantization

Outcome quantization() {
    SeededRng rng(404);
    std::size_t checked = 0;
    std::size_t over = 0;
    while (checked < 1000000) {
        const std::size_t tokens = 1 + rng.below(256);
        const std::size_t lanes = 64;
        std::vector<float> v(tokens * lanes);
        const double spread = std::exp(rng.normal() * 2.0);
        for (auto& x : v) x = static_cast<float>(rng.normal() * spread);
        const auto q = quantize_segment(v, tokens, lanes);
        for (std::size_t i = 0; i < v.size(); ++i) {
            const double s = q.scale[i % lanes];
            over += std::abs(static_cast<double>(v[i]) - q.codes[i] * s) <= s / 2.0 ? 0 : 1;
        }
        checked += v.size();
    }
    double err = 0.0;
    double mag = 0.0;
    for (int seg = 0; seg < 200; ++seg) {
        std::vector<float> v(128 * 64);
        for (auto& x : v) x = static_cast<float>(rng.normal());
        const auto q = quantize_segment(v, 128, 64);
        const auto back = dequantize(q.codes, q.scale);
        for (std::size_t i = 0; i < v.size(); ++i) {
            err += std::abs(v[i] - back[i]);
            mag += std::abs(v[i]);
        }
    }
    const double rel = err / mag;
    return {over == 0 && rel <= 0.015, std::to_string(over) + "/" + std::to_string(checked) +
                                           " elements over scale/2, Gaussian mean relative error " +
                                           num(rel * 100.0, 3) + "%"};
}

// ---------------------------------------------------------------------------
// 5. matched-rate ordering and sliding-window loss

Outcome matched_rate_ordering() {
    const auto t0 = std::chrono::steady_clock::now();
    const PolicyConfig cfg;
    const ModelShape shape;
    const std::size_t prefill = 64;
    const std::size_t length = 400;
    const std::int64_t query = static_cast<std::int64_t>(length) - 1;
    const auto profile = ConfidenceProfile::parse("bernoulli:0.6");
    const NeedleTraceOptions opt{shape, prefill, 8, ConfidenceWeights::from(cfg)};
    const char* names[] = {"confkv", "matched-attention", "matched-recency", "matched-random"};
    int retained[4] = {0, 0, 0, 0};
    for (std::uint64_t i = 0; i < 200; ++i) {
        SeededRng rng(hash_combine(42, i));
        const auto age = static_cast<std::int64_t>(40 + rng.below(261));
        const auto trace = generate_needle_trace(rng, length, static_cast<std::int64_t>(prefill) + query - age, query,
                                                 0.5, profile, opt);
        EvictionSchedule schedule;
        for (int k = 0; k < 4; ++k) {
            Engine e(cfg, shape, parse_policy(names[k]), schedule);
            TraceDriver driver(trace, ConfidenceWeights::from(cfg));
            const auto run = run_decode(e, driver, length);
            if (k == 0) schedule = e.recorded_schedule();
            retained[k] += run.needle_retained.value() ? 1 : 0;
        }
    }
    // Sliding window of 512 with the needle more than 513 positions behind the query.
    int sliding = 0;
    const std::size_t long_length = 700;
    const std::int64_t long_query = static_cast<std::int64_t>(long_length) - 1;
    for (std::uint64_t i = 0; i < 200; ++i) {
        SeededRng rng(hash_combine(43, i));
        const auto age = static_cast<std::int64_t>(520 + rng.below(180));
        const auto trace = generate_needle_trace(rng, long_length, static_cast<std::int64_t>(prefill) + long_query - age,
                                                 long_query, 0.5, profile, opt);
        Engine e(cfg, shape, parse_policy("sliding"));
        TraceDriver driver(trace, ConfidenceWeights::from(cfg));
        sliding += run_decode(e, driver, long_length).needle_retained.value() ? 1 : 0;
    }
    auto pct = [](int n) { return n / 2.0; };
    const double secs = seconds_since(t0);
    const bool pass = pct(retained[1]) >= pct(retained[2]) + 10.0 && pct(retained[2]) >= pct(retained[3]) + 10.0 &&
                      sliding == 0 && secs < 300.0;
    return {pass, "retention confkv " + num(pct(retained[0])) + "%, attention-only " + num(pct(retained[1])) +
                      "%, recency-only " + num(pct(retained[2])) + "%, random " + num(pct(retained[3])) +
                      "%, sliding-512 " + num(pct(sliding)) + "%, " + num(secs, 3) + " s"};
}

// ---------------------------------------------------------------------------
// 6. sawtooth

Outcome sawtooth() {
    const PolicyConfig cfg;
    const ModelShape shape{4, 2, 8, 64};
    std::size_t mismatches = 0;
    std::size_t over_budget = 0;
    std::size_t checked = 0;
    for (std::size_t k : {1u, 2u, 5u, 10u, 40u}) {
        SeededRng rng(600 + k);
        const std::size_t prefill = 180;
        const std::size_t steps = 400;
        const auto trace = generate_profile_trace(rng, steps, ConfidenceProfile::parse("alternating:" + std::to_string(k)),
                                                  {shape, prefill, 8, ConfidenceWeights::from(cfg)});
        Engine e(cfg, shape, parse_policy("confkv"));
        TraceDriver driver(trace, ConfidenceWeights::from(cfg));
        const auto run = run_decode(e, driver, steps);
        for (std::size_t t = 0; t < steps; ++t) {
            // Before the first confident step the cache only grows (prefill + steps stays under N_low here).
            const std::size_t expected = t < k ? prefill + t + 1 : cfg.n_high + 1 + (t - k) % (k + 1);
            const auto& r = run.records[t];
            for (std::size_t l = 0; l < shape.num_layers; ++l) {
                ++checked;
                mismatches += r.len_post[l] == expected ? 0 : 1;
                if (r.confident) over_budget += r.len_post_evict[l] <= cfg.n_high ? 0 : 1;
            }
        }
    }
    return {mismatches == 0 && over_budget == 0, std::to_string(checked) + " (step, layer) lengths, " +
                                                     std::to_string(mismatches) + " closed-form mismatches, " +
                                                     std::to_string(over_budget) + " post-confident lengths > N_high"};
}

// ---------------------------------------------------------------------------
// 7. pyramid budgets

Outcome pyramid() {
    const ModelShape shape{12, 4, 16, 64};
    bool pass = true;
    std::size_t prev = SIZE_MAX;
    std::string values;
    for (std::size_t l = 0; l <= 12; ++l) {
        const auto b = pyramid_budget(l, shape, 128, 0.5, 96);
        const auto direct = std::max<std::size_t>(96, static_cast<std::size_t>(std::floor(128.0 * std::pow(0.5, l / 12.0))));
        pass = pass && b == direct && b <= prev;
        prev = b;
        values += (l ? "," : "") + std::to_string(b);
    }
    pass = pass && pyramid_budget(0, shape, 128, 0.5, 96) == 128 && pyramid_budget(4, shape, 128, 0.5, 96) == 101 &&
           pyramid_budget(12, shape, 128, 0.5, 96) == 96;
    return {pass, "budgets l=0..12: " + values};
}

// ---------------------------------------------------------------------------
// 8. memory model

Outcome memory_model() {
    // Matched token budget: both runs keep the same 2048 entries per layer; only precision differs.
    PolicyConfig cfg;
    cfg.n_high = 2048;
    cfg.n_low = 2048;
    cfg.fp16_window_w = 32;
    const ModelShape shape;
    SeededRng rng(808);
    const auto trace = generate_profile_trace(rng, 300, ConfidenceProfile::parse("bernoulli:0.5"),
                                              {shape, 2400, 8, ConfidenceWeights::from(cfg)});
    Engine high(cfg, shape, parse_policy("confkv"));
    Engine low(cfg, shape, parse_policy("confkv-int8"));
    TraceDriver dh(trace, ConfidenceWeights::from(cfg));
    TraceDriver dl(trace, ConfidenceWeights::from(cfg));
    const auto rh = run_decode(high, dh, 300).records;
    const auto rl = run_decode(low, dl, 300).records;
    double worst_ratio = 0.0;
    double min_quant = 1.0;
    std::size_t qualifying = 0;
    bool same_lengths = true;
    for (std::size_t t = 0; t < rl.size(); ++t) {
        same_lengths = same_lengths && rh[t].len_post == rl[t].len_post;
        std::size_t int8 = 0;
        std::size_t kept = 0;
        for (std::size_t l = 0; l < shape.num_layers; ++l) {
            int8 += rl[t].int8_entries[l];
            kept += rl[t].len_post[l];
        }
        const double frac = static_cast<double>(int8) / static_cast<double>(kept);
        if (frac > 0.9) {
            ++qualifying;
            min_quant = std::min(min_quant, frac);
            worst_ratio = std::max(worst_ratio, static_cast<double>(rl[t].bytes) / static_cast<double>(rh[t].bytes));
        }
    }

    // Shape: full KV grows by a constant per step; a 512 sliding window stops growing once full.
    const ModelShape small{4, 4, 16, 64};
    SeededRng rng2(809);
    const auto long_trace = generate_profile_trace(rng2, 1200, ConfidenceProfile::parse("bernoulli:0.5"),
                                                   {small, 64, 8, ConfidenceWeights::from(PolicyConfig{})});
    Engine full(PolicyConfig{}, small, parse_policy("full"));
    Engine sliding(PolicyConfig{}, small, parse_policy("sliding"));
    TraceDriver df(long_trace);
    TraceDriver ds(long_trace);
    const auto rf = run_decode(full, df, 1200).records;
    const auto rs = run_decode(sliding, ds, 1200).records;
    const std::size_t per_token = small.num_layers * small.row_size() * 2 * 2;
    bool linear = true;
    for (std::size_t t = 1; t < rf.size(); ++t) linear = linear && rf[t].bytes - rf[t - 1].bytes == per_token;
    const std::size_t plateau = rs.back().bytes;
    bool flat = plateau == small.num_layers * 513 * small.row_size() * 2 * 2;
    for (std::size_t t = 600; t < rs.size(); ++t) flat = flat && rs[t].bytes == plateau;

    const bool pass = qualifying > 0 && same_lengths && worst_ratio <= 0.55 && linear && flat;
    return {pass, std::to_string(qualifying) + " steps with >90% INT8 (min " + num(min_quant * 100.0, 4) +
                      "%), worst int8/high bytes " + num(worst_ratio) + "; full KV +" + std::to_string(per_token) +
                      " B/step " + (linear ? "linear" : "NOT linear") + ", sliding plateau " +
                      std::to_string(plateau) + " B " + (flat ? "flat" : "NOT flat")};
}

// ---------------------------------------------------------------------------
// 9. analysis machinery

std::string snapshot_bytes(const Engine& e) {
    std::stringstream buf;
    for (const LayerCache& c : e.caches()) write_snapshot(buf, snapshot(c));
    return buf.str();
}

Outcome analysis_machinery() {
    const std::vector<double> p{0.9, 0.1};
    const std::vector<double> q{0.5, 0.5};
    bool examples = kl_divergence(p, p) == 0.0 &&
                    std::abs(kl_divergence(std::vector<double>{1.0, 0.0}, q) - std::log(2.0)) <= 1e-12 &&
                    std::abs(kl_divergence(p, q) - 0.3681) <= 1e-4 && std::abs(kl_divergence(q, p) - 0.5108) <= 1e-4;
    const std::vector<double> xs{1, 2, 3};
    examples = examples && std::abs(pearson(xs, std::vector<double>{1, 3, 2}) - 0.5) <= 1e-12 &&
               std::abs(pearson(xs, std::vector<double>{3, 5, 7}) - 1.0) <= 1e-12 &&
               std::abs(pearson(xs, std::vector<double>{-1, -2, -3}) + 1.0) <= 1e-12;

    const ModelShape shape;
    const PolicyConfig cfg;
    const ReferenceModel model(shape, cfg.seed);
    Engine zero_engine(cfg, shape, parse_policy("full"));
    const auto zero = ablation_experiment(zero_engine, model, {64, 200, 0, 100, cfg.seed});
    bool all_zero = !zero.pairs.empty();
    for (const auto& pr : zero.pairs) all_zero = all_zero && pr.kl_shift == 0.0;

    const AblationOptions opt;  // prompt 256, 1500 steps, r = 256, 1200 samples
    const auto t0 = std::chrono::steady_clock::now();
    Engine engine(cfg, shape, parse_policy("full"));
    const auto res = ablation_experiment(engine, model, opt);
    const double secs = seconds_since(t0);
    bool finite = res.pearson_r.has_value() && std::isfinite(*res.pearson_r) && res.bins.size() == 10;
    for (const auto& pr : res.pairs) finite = finite && std::isfinite(pr.kl_shift) && std::isfinite(pr.confidence);
    for (const auto& b : res.bins) finite = finite && std::isfinite(b.mean_kl);

    Engine plain(cfg, shape, parse_policy("full"));
    ModelDriver driver(model, opt.prompt_len, opt.seed, AttentionPath::tiled, cfg.block_size_b);
    run_decode(plain, driver, opt.steps);
    const bool unchanged = snapshot_bytes(engine) == snapshot_bytes(plain);

    const bool pass = examples && all_zero && finite && unchanged && secs < 60.0;
    return {pass, std::string("KL/Pearson examples ") + (examples ? "ok" : "WRONG") + ", r=0 ablation " +
                      (all_zero ? "all zero" : "NONZERO") + ", default run " + std::to_string(res.pairs.size()) +
                      " pairs, pearson_r=" + (res.pearson_r ? num(*res.pearson_r) : "undefined") + ", " +
                      num(secs, 3) + " s, engine state " + (unchanged ? "unchanged" : "CHANGED")};
}

// ---------------------------------------------------------------------------
// 10. CLI determinism

int run_cli(const std::string& args) {
    const std::string cmd = std::string(CONFKV_CLI_PATH) + " " + args + " >/dev/null 2>&1";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
}

Outcome determinism() {
    const fs::path root = fs::temp_directory_path() / "confkv_acceptance_determinism";
    fs::remove_all(root);
    fs::create_directories(root);
    const std::string trace = (root / "needle.jsonl").string();
    const std::string trace2 = (root / "needle2.jsonl").string();
    bool ok = run_cli("gen-trace --length 300 --prefill 200 --needle-position 50 --out " + trace) == 0 &&
              run_cli("gen-trace --length 300 --prefill 200 --needle-position 50 --out " + trace2) == 0;
    std::size_t compared = 0;
    std::size_t differing = ok && slurp(trace) == slurp(trace2) ? 0 : 1;
    ++compared;
    const std::vector<std::string> commands = {
        "decode --policy confkv-int8 --steps 300 --prefill 128",
        "decode --policy confkv-l --driver trace:" + trace,
        "compare --policies confkv,matched-random,matched-recency,sliding,heavy-hitter --driver trace:" + trace,
        "sweep --param tau --values 0.5,0.7,0.9 --steps 200 --prefill 128",
        "sweep --param w --values 0,32,inf --steps 200 --prefill 128",
        "ablate --steps 200 --prefill 128 --ablate-r 64 --samples 100",
    };
    for (std::size_t c = 0; c < commands.size(); ++c) {
        std::string outs[2];
        for (int rep = 0; rep < 2; ++rep) {
            const fs::path out = root / (std::to_string(c) + "_" + std::to_string(rep));
            ok = ok && run_cli(commands[c] + " --out " + out.string()) == 0;
            outs[rep] = out.string();
        }
        for (const auto& entry : fs::directory_iterator(outs[0])) {
            ++compared;
            const auto other = fs::path(outs[1]) / entry.path().filename();
            differing += slurp(entry.path()) == slurp(other) ? 0 : 1;
        }
    }
    fs::remove_all(root);
    return {ok && differing == 0 && compared > commands.size(),
            std::to_string(compared) + " output files compared across repeated runs, " + std::to_string(differing) +
                " differ" + (ok ? "" : ", a command FAILED")};
}

}  // namespace

int main() {
    const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
        {"attention exactness", attention_exactness},
        {"eviction-policy oracle", eviction_oracle},
        {"confidence formula", confidence_formula},
        {"quantization", quantization},
        {"matched-rate isolation ordering", matched_rate_ordering},
        {"sawtooth behavior", sawtooth},
        {"pyramid budgets", pyramid},
        {"memory model", memory_model},
        {"analysis machinery", analysis_machinery},
        {"determinism", determinism},
    };
    int failures = 0;
    for (std::size_t i = 0; i < criteria.size(); ++i) {
        Outcome o;
        try {
            o = criteria[i].second();
        } catch (const std::exception& e) {
            o = {false, std::string("threw: ") + e.what()};
        }
        failures += o.pass ? 0 : 1;
        std::cout << (o.pass ? "PASS" : "FAIL") << " criterion " << i + 1 << ": " << criteria[i].first << " -- "
                  << o.detail << std::endl;
    }
    return failures == 0 ? 0 : 1;
}
