// Copyright (C) 2026 confkv contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <charconv>
#include <filesystem>
#include <fstream>
#include <future>
#include <iostream>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "confkv/analysis.hpp"
#include "confkv/engine.hpp"
#include "confkv/simulator.hpp"

namespace confkv::cli {

enum ExitCode : int { kOk = 0, kConfigError = 1, kRuntimeError = 2 };

/// Shortest round-trip decimal form; identical bytes on every run.
inline std::string fmt(double v) {
    if (std::isnan(v)) return "nan";
    if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, res.ptr);
}

inline std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw ConfigError("cannot read " + path.string());
    }
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

inline std::ofstream open_out(const std::filesystem::path& path) {
    if (path.has_parent_path()) {
        std::filesystem::create_directories(path.parent_path());
    }
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw Error("cannot write " + path.string());
    }
    return out;
}

/// Config file (or defaults), then CONFKV_SEED.
inline RunConfig resolve_config(const std::optional<std::string>& path) {
    RunConfig rc = path ? load_config(read_file(*path)) : load_config("{}");
    apply_env_overrides(rc);
    return rc;
}

// ---------------------------------------------------------------------------
// Drivers

struct DriverSpec {
    bool model = true;
    std::string trace_path;
    std::size_t prefill = 256;

    /// "model" or "trace:<path>".
    static DriverSpec parse(const std::string& text, std::size_t prefill) {
        DriverSpec d;
        d.prefill = prefill;
        if (text == "model") {
            return d;
        }
        if (text.rfind("trace:", 0) == 0 && text.size() > 6) {
            d.model = false;
            d.trace_path = text.substr(6);
            return d;
        }
        throw ConfigError("unknown driver '" + text + "' (expected model or trace:<path>)");
    }
};

/// Everything one run needs; the trace, if any, is loaded once and shared read-only.
struct RunInputs {
    RunConfig rc;
    DriverSpec driver;
    std::shared_ptr<const SyntheticTrace> trace;
    std::size_t steps = 0;
};

inline RunInputs prepare_inputs(const RunConfig& rc, const DriverSpec& driver, std::optional<std::size_t> steps) {
    RunInputs in{rc, driver, nullptr, 0};
    if (!driver.model) {
        std::ifstream f(driver.trace_path);
        if (!f) {
            throw ConfigError("cannot read trace " + driver.trace_path);
        }
        in.trace = std::make_shared<SyntheticTrace>(read_trace_jsonl(f));
        if (!(in.trace->shape == rc.model)) {
            // The trace fixes the model shape.
            in.rc.model = in.trace->shape;
        }
        in.steps = steps.value_or(in.trace->steps.size());
    } else {
        in.steps = steps.value_or(500);
    }
    return in;
}

inline RunResult execute(const RunInputs& in, const PolicySpec& spec, EvictionSchedule replay = {},
                         const std::function<void(const StepRecord&)>& sink = {},
                         EvictionSchedule* recorded = nullptr) {
    Engine engine(in.rc.policy, in.rc.model, spec, std::move(replay));
    RunResult result;
    if (in.driver.model) {
        const ReferenceModel model(in.rc.model, in.rc.policy.seed);
        ModelDriver driver(model, in.driver.prefill, in.rc.policy.seed, AttentionPath::tiled,
                           in.rc.policy.block_size_b);
        result = run_decode(engine, driver, in.steps, sink);
    } else {
        TraceDriver driver(*in.trace, ConfidenceWeights::from(in.rc.policy));
        result = run_decode(engine, driver, in.steps, sink);
    }
    if (recorded) {
        *recorded = engine.recorded_schedule();
    }
    return result;
}

// ---------------------------------------------------------------------------
// CSV

inline const char* kSummaryHeader =
    "config_hash,policy,driver,steps,mean_len,max_len,eviction_rate,total_evicted,peak_bytes,mean_bytes,"
    "final_bytes,quantized_fraction,confident_fraction,needle_retained";

inline std::string summary_row(const std::string& hash, const std::string& policy, const std::string& driver,
                               const TraceSummary& s, std::optional<bool> needle) {
    std::ostringstream os;
    os << hash << ',' << policy << ',' << driver << ',' << s.steps << ',' << fmt(s.mean_len) << ',' << s.max_len << ','
       << fmt(s.eviction_rate) << ',' << s.total_evicted << ',' << s.peak_bytes << ',' << fmt(s.mean_bytes) << ','
       << s.final_bytes << ',' << fmt(s.quantized_fraction) << ',' << fmt(s.confident_fraction) << ','
       << (needle ? (*needle ? "1" : "0") : "");
    return os.str();
}

// ---------------------------------------------------------------------------
// Commands

struct PolicySizes {
    std::size_t window = 512;
    std::size_t cap = 256;
};

inline PolicySpec make_policy(const std::string& name, const PolicySizes& sizes) {
    PolicySpec spec = parse_policy(name);
    spec.window_n = sizes.window;
    spec.cap_n = sizes.cap;
    if (spec.window_n < 1) {
        throw ConfigError("--window must be >= 1");
    }
    return spec;
}

struct DecodeOptions {
    std::optional<std::string> config;
    std::string policy = "confkv";
    std::string driver = "model";
    std::optional<std::size_t> steps;
    std::size_t prefill = 256;
    PolicySizes sizes;
    std::string out = "out";
};

/// Writes <out>/trace.jsonl, <out>/summary.csv and, for confkv policies, <out>/schedule.jsonl.
inline int cmd_decode(const DecodeOptions& o) {
    const RunConfig rc = resolve_config(o.config);
    const PolicySpec spec = make_policy(o.policy, o.sizes);
    if (spec.is_matched()) {
        throw ConfigError("decode: matched-rate policies need a recorded schedule; use compare");
    }
    const RunInputs in = prepare_inputs(rc, DriverSpec::parse(o.driver, o.prefill), o.steps);
    const std::filesystem::path dir(o.out);
    auto trace_out = open_out(dir / "trace.jsonl");
    EvictionSchedule schedule;
    const RunResult res = execute(
        in, spec, {}, [&](const StepRecord& r) { trace_out << to_json(r).dump() << '\n'; }, &schedule);
    const TraceSummary s = summarize_trace(res.records);
    auto csv = open_out(dir / "summary.csv");
    csv << kSummaryHeader << '\n' << summary_row(config_hash(in.rc), spec.name, o.driver, s, res.needle_retained) << '\n';
    if (spec.kind == PolicyKind::confkv) {
        auto sched = open_out(dir / "schedule.jsonl");
        schedule.write_jsonl(sched);
    }
    return kOk;
}

struct CompareOptions {
    std::optional<std::string> config;
    std::vector<std::string> policies;
    std::string driver = "model";
    std::optional<std::size_t> steps;
    std::size_t prefill = 256;
    PolicySizes sizes;
    std::string out = "out";
};

/**
 * Runs each policy on identical inputs. Matched-rate variants replay the
 * eviction schedule of a plain confkv run on the same inputs.
 */
inline int cmd_compare(const CompareOptions& o) {
    if (o.policies.size() < 2) {
        throw ConfigError("compare: need at least two policies");
    }
    const RunConfig rc = resolve_config(o.config);
    std::vector<PolicySpec> specs;
    bool need_schedule = false;
    for (const auto& name : o.policies) {
        specs.push_back(make_policy(name, o.sizes));
        need_schedule = need_schedule || specs.back().is_matched();
    }
    const RunInputs in = prepare_inputs(rc, DriverSpec::parse(o.driver, o.prefill), o.steps);
    EvictionSchedule schedule;
    if (need_schedule) {
        execute(in, parse_policy("confkv"), {}, {}, &schedule);
    }
    auto csv = open_out(std::filesystem::path(o.out) / "compare.csv");
    csv << kSummaryHeader << '\n';
    for (const PolicySpec& spec : specs) {
        const RunResult res = execute(in, spec, spec.is_matched() ? schedule : EvictionSchedule{});
        csv << summary_row(config_hash(in.rc), spec.name, o.driver, summarize_trace(res.records), res.needle_retained)
            << '\n';
    }
    return kOk;
}

struct AblateOptions {
    std::optional<std::string> config;
    std::string policy = "full";
    std::size_t steps = 1500;
    std::size_t prefill = 256;
    std::size_t ablate_r = 256;
    std::size_t samples = 1200;
    PolicySizes sizes;
    std::string out = "out";
};

/// Writes <out>/ablation_pairs.csv and <out>/ablation_summary.json; prints Pearson r.
inline int cmd_ablate(const AblateOptions& o, std::ostream& stdout_stream = std::cout) {
    const RunConfig rc = resolve_config(o.config);
    if (o.samples > o.steps) {
        throw ConfigError("ablate: --samples (" + std::to_string(o.samples) + ") exceeds --steps (" +
                          std::to_string(o.steps) + ")");
    }
    const PolicySpec spec = make_policy(o.policy, o.sizes);
    if (spec.is_matched()) {
        throw ConfigError("ablate: matched-rate policies are not supported");
    }
    Engine engine(rc.policy, rc.model, spec);
    const ReferenceModel model(rc.model, rc.policy.seed);
    const AblationResult res =
        ablation_experiment(engine, model, {o.prefill, o.steps, o.ablate_r, o.samples, rc.policy.seed});

    const std::filesystem::path dir(o.out);
    const std::string hash = config_hash(rc);
    auto csv = open_out(dir / "ablation_pairs.csv");
    csv << "config_hash,step,confidence,kl_shift\n";
    for (const AblationPair& p : res.pairs) {
        csv << hash << ',' << p.step << ',' << fmt(p.confidence) << ',' << fmt(p.kl_shift) << '\n';
    }
    nlohmann::json bins = nlohmann::json::array();
    for (const ConfidenceBin& b : res.bins) {
        bins.push_back({{"c_lo", b.c_lo}, {"c_hi", b.c_hi}, {"count", b.count}, {"mean_kl", b.mean_kl}});
    }
    nlohmann::json summary{{"config_hash", hash},
                           {"policy", spec.name},
                           {"steps", o.steps},
                           {"prefill", o.prefill},
                           {"ablate_r", o.ablate_r},
                           {"samples", o.samples},
                           {"pairs", res.pairs.size()},
                           {"pearson_r", res.pearson_r ? nlohmann::json(*res.pearson_r) : nlohmann::json(nullptr)},
                           {"bins", bins}};
    auto js = open_out(dir / "ablation_summary.json");
    js << summary.dump(2) << '\n';
    stdout_stream << "pairs=" << res.pairs.size() << " pearson_r=" << (res.pearson_r ? fmt(*res.pearson_r) : "undefined")
                  << '\n';
    return kOk;
}

struct SweepOptions {
    std::optional<std::string> config;
    std::string param;
    std::vector<std::string> values;
    std::optional<std::string> policy;  ///< default: confkv-int8 for w, confkv otherwise
    std::string driver = "model";
    std::optional<std::size_t> steps;
    std::size_t prefill = 256;
    std::size_t workers = 0;  ///< 0: one task per value
    std::string out = "out";
};

inline std::size_t parse_count(const std::string& text, const std::string& what) {
    if (text == "inf") {
        return std::numeric_limits<std::size_t>::max();
    }
    std::size_t v = 0;
    auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
    if (ec != std::errc{} || ptr != text.data() + text.size()) {
        throw ConfigError("invalid " + what + " value '" + text + "'");
    }
    return v;
}

inline double parse_real(const std::string& text, const std::string& what) {
    double v = 0.0;
    auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
    if (ec != std::errc{} || ptr != text.data() + text.size()) {
        throw ConfigError("invalid " + what + " value '" + text + "'");
    }
    return v;
}

/// Returns a validated copy of rc with one parameter replaced.
inline RunConfig with_param(RunConfig rc, const std::string& param, const std::string& value) {
    if (param == "tau") {
        rc.policy.tau = parse_real(value, param);
    } else if (param == "alpha") {
        rc.policy.alpha = parse_real(value, param);
    } else if (param == "n_high") {
        rc.policy.n_high = parse_count(value, param);
    } else if (param == "w") {
        rc.policy.fp16_window_w = parse_count(value, param);
    } else {
        throw ConfigError("unknown sweep parameter '" + param + "' (expected tau, n_high, w or alpha)");
    }
    try {
        validate(rc.policy);
    } catch (const Error& e) {
        throw ConfigError(param + "=" + value + ": " + e.what());
    }
    return rc;
}

/// One row per value, in input order, whatever order the runs finish in.
inline int cmd_sweep(const SweepOptions& o) {
    const RunConfig base = resolve_config(o.config);
    if (o.values.empty()) {
        throw ConfigError("sweep: --values is empty");
    }
    const PolicySpec spec = parse_policy(o.policy.value_or(o.param == "w" ? "confkv-int8" : "confkv"));
    if (spec.is_matched()) {
        throw ConfigError("sweep: matched-rate policies are not supported");
    }
    const DriverSpec driver = DriverSpec::parse(o.driver, o.prefill);
    std::vector<RunInputs> inputs;
    for (const auto& v : o.values) {
        inputs.push_back(prepare_inputs(with_param(base, o.param, v), driver, o.steps));
    }

    std::vector<std::string> rows(inputs.size());
    const std::size_t workers = o.workers == 0 ? inputs.size() : o.workers;
    for (std::size_t start = 0; start < inputs.size(); start += workers) {
        std::vector<std::future<std::string>> batch;
        for (std::size_t i = start; i < std::min(inputs.size(), start + workers); ++i) {
            batch.push_back(std::async(std::launch::async, [&, i] {
                const RunResult res = execute(inputs[i], spec);
                const TraceSummary s = summarize_trace(res.records);
                std::ostringstream os;
                os << o.param << ',' << o.values[i] << ',' << config_hash(inputs[i].rc) << ',' << spec.name << ','
                   << fmt(s.eviction_rate) << ',' << fmt(s.mean_bytes) << ',' << s.peak_bytes << ','
                   << fmt(s.mean_len) << ',' << fmt(s.quantized_fraction) << ','
                   << (res.needle_retained ? (*res.needle_retained ? "1" : "0") : "");
                return os.str();
            }));
        }
        for (std::size_t k = 0; k < batch.size(); ++k) {
            rows[start + k] = batch[k].get();
        }
    }
    auto csv = open_out(std::filesystem::path(o.out) / "sweep.csv");
    csv << "param,value,config_hash,policy,eviction_rate,mean_bytes,peak_bytes,mean_len,quantized_fraction,"
           "needle_retained\n";
    for (const auto& r : rows) {
        csv << r << '\n';
    }
    return kOk;
}

struct GenTraceOptions {
    std::optional<std::string> config;
    std::string out = "trace.jsonl";
    std::size_t length = 512;
    std::size_t prefill = 64;
    std::optional<std::int64_t> needle_position;
    std::optional<std::int64_t> query_step;
    double spike_mass = 0.5;
    std::size_t spike_period = 8;
    std::string profile = "bernoulli:0.6";
};

/// Writes one synthetic trace; a needle is planted when --needle-position is given.
inline int cmd_gen_trace(const GenTraceOptions& o) {
    const RunConfig rc = resolve_config(o.config);
    const ConfidenceProfile profile = ConfidenceProfile::parse(o.profile);
    SeededRng rng(hash_combine(rc.policy.seed, 5));
    const NeedleTraceOptions opt{rc.model, o.prefill, o.spike_period, ConfidenceWeights::from(rc.policy)};
    SyntheticTrace trace;
    if (o.needle_position) {
        const std::int64_t query = o.query_step.value_or(static_cast<std::int64_t>(o.length) - 1);
        try {
            trace = generate_needle_trace(rng, o.length, *o.needle_position, query, o.spike_mass, profile, opt);
        } catch (const Error& e) {
            throw ConfigError(e.what());
        }
    } else {
        if (o.query_step) {
            throw ConfigError("--query-step requires --needle-position");
        }
        trace = generate_profile_trace(rng, o.length, profile, opt);
    }
    auto out = open_out(o.out);
    write_trace_jsonl(out, trace);
    return kOk;
}

/// Maps exceptions to exit codes: ConfigError -> 1, anything else -> 2.
template <typename F>
int guarded(F&& f, std::ostream& err = std::cerr) {
    try {
        return f();
    } catch (const ConfigError& e) {
        err << "error: " << e.what() << '\n';
        return kConfigError;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << '\n';
        return kRuntimeError;
    }
}

}  // namespace confkv::cli
