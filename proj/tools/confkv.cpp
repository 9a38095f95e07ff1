// Copyright (C) 2026 confkv contributors
// SPDX-License-Identifier: Apache-2.0

// confkv: decode, compare, ablate, sweep and gen-trace front end.

#include <CLI11.hpp>

#include "confkv/commands.hpp"

namespace {

using namespace confkv::cli;

void add_common(CLI::App* cmd, std::optional<std::string>& config, std::string& out) {
    cmd->add_option("--config", config, "JSON policy/model config");
    cmd->add_option("--out", out, "output directory")->capture_default_str();
}

void add_sizes(CLI::App* cmd, PolicySizes& sizes) {
    cmd->add_option("--window", sizes.window, "sliding-window size")->capture_default_str();
    cmd->add_option("--cap", sizes.cap, "heavy-hitter cap")->capture_default_str();
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Confidence-gated KV-cache engine"};
    app.require_subcommand(1);

    DecodeOptions dec;
    auto* decode = app.add_subcommand("decode", "run one policy and write trace.jsonl + summary.csv");
    add_common(decode, dec.config, dec.out);
    add_sizes(decode, dec.sizes);
    decode->add_option("--policy", dec.policy, "confkv | confkv-int8 | confkv-l | full | sliding | heavy-hitter")
        ->capture_default_str();
    decode->add_option("--driver", dec.driver, "model | trace:<path>")->capture_default_str();
    decode->add_option("--steps", dec.steps, "decode steps (default: 500, or the trace length)");
    decode->add_option("--prefill", dec.prefill, "prompt length for the model driver")->capture_default_str();

    CompareOptions cmp;
    auto* compare = app.add_subcommand("compare", "run several policies on identical inputs");
    add_common(compare, cmp.config, cmp.out);
    add_sizes(compare, cmp.sizes);
    compare->add_option("--policies", cmp.policies, "comma-separated policy list")->delimiter(',')->required();
    compare->add_option("--driver", cmp.driver, "model | trace:<path>")->capture_default_str();
    compare->add_option("--steps", cmp.steps, "decode steps");
    compare->add_option("--prefill", cmp.prefill, "prompt length for the model driver")->capture_default_str();

    AblateOptions abl;
    auto* ablate = app.add_subcommand("ablate", "context-ablation KL vs confidence");
    add_common(ablate, abl.config, abl.out);
    add_sizes(ablate, abl.sizes);
    ablate->add_option("--policy", abl.policy, "cache policy during the run")->capture_default_str();
    ablate->add_option("--steps", abl.steps, "decode steps")->capture_default_str();
    ablate->add_option("--prefill", abl.prefill, "prompt length")->capture_default_str();
    ablate->add_option("--ablate-r", abl.ablate_r, "recent entries removed")->capture_default_str();
    ablate->add_option("--samples", abl.samples, "sampled steps")->capture_default_str();

    SweepOptions swp;
    auto* sweep = app.add_subcommand("sweep", "one run per parameter value");
    add_common(sweep, swp.config, swp.out);
    sweep->add_option("--param", swp.param, "tau | n_high | w | alpha")->required();
    sweep->add_option("--values", swp.values, "comma-separated values (w and n_high accept inf)")
        ->delimiter(',')
        ->required();
    sweep->add_option("--policy", swp.policy, "policy (default confkv, confkv-int8 for w)");
    sweep->add_option("--driver", swp.driver, "model | trace:<path>")->capture_default_str();
    sweep->add_option("--steps", swp.steps, "decode steps");
    sweep->add_option("--prefill", swp.prefill, "prompt length for the model driver")->capture_default_str();
    sweep->add_option("--workers", swp.workers, "concurrent runs (0: all at once)")->capture_default_str();

    GenTraceOptions gen;
    auto* gen_trace = app.add_subcommand("gen-trace", "write a synthetic trace");
    gen_trace->add_option("--config", gen.config, "JSON config (model shape, seed, confidence weights)");
    gen_trace->add_option("--out", gen.out, "trace file")->capture_default_str();
    gen_trace->add_option("--length", gen.length, "steps")->capture_default_str();
    gen_trace->add_option("--prefill", gen.prefill, "prompt length")->capture_default_str();
    gen_trace->add_option("--needle-position", gen.needle_position, "plant a needle at this position");
    gen_trace->add_option("--query-step", gen.query_step, "needle query step (default: last step)");
    gen_trace->add_option("--spike-mass", gen.spike_mass, "attention mass on the needle")->capture_default_str();
    gen_trace->add_option("--spike-period", gen.spike_period, "steps between spikes")->capture_default_str();
    gen_trace->add_option("--profile", gen.profile, "always_high | always_low | alternating:k | bernoulli:p")
        ->capture_default_str();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kOk : kConfigError;
    }

    return guarded([&] {
        if (*decode) return cmd_decode(dec);
        if (*compare) return cmd_compare(cmp);
        if (*ablate) return cmd_ablate(abl);
        if (*sweep) return cmd_sweep(swp);
        return cmd_gen_trace(gen);
    });
}
