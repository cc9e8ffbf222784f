// hcnr: command-line front end for the honesty-restoration pipeline.
//
// Every subcommand shares --config / --seed / --out / --variant / --stage and
// computes whatever upstream stages it needs; trained checkpoints are cached
// under <out>/cache, so running the subcommands one by one produces the same
// artifacts as `run-all`.
//
// Exit codes: 0 success, 2 configuration error, 3 stage failure,
// 4 degradation gate failure.

#include <cstdio>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "hcnr/errors.hpp"
#include "hcnr/experiment.hpp"

namespace {

enum ExitCode : int { kOk = 0, kConfig = 2, kStage = 3, kGate = 4 };

struct Options {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string out;
    std::string variant;
    std::string stage;
    std::string checkpoint;
    std::vector<std::string> axes;
    bool quiet = false;
};

hcnr::ExperimentConfig resolve_config(const Options& o) {
    hcnr::ExperimentConfig cfg = o.config.empty() ? hcnr::ExperimentConfig{} : hcnr::load_config(o.config);
    if (o.seed) cfg.seed = *o.seed;
    if (!o.out.empty()) cfg.output_dir = o.out;
    if (cfg.output_dir.empty()) throw hcnr::ConfigError("no output directory: pass --out or set 'output_dir'");
    if (!o.variant.empty() && !hcnr::is_variant(o.variant))
        throw hcnr::ConfigError("unknown variant '" + o.variant + "'");
    return cfg;
}

void print_report(const hcnr::EvalReport& r) { std::cout << hcnr::to_json(r).dump(2) << '\n'; }

int run(const std::string& cmd, const Options& o) {
    if (cmd == "eval") {
        if (o.out.empty()) throw hcnr::ConfigError("eval: --out (the run directory) is required");
        if (o.checkpoint.empty() && o.variant.empty())
            throw hcnr::ConfigError("eval: pass --variant NAME or --checkpoint PATH");
        const std::filesystem::path ckpt =
            o.checkpoint.empty() ? std::filesystem::path(o.out) / ("ckpt_" + o.variant + ".hcnr")
                                 : std::filesystem::path(o.checkpoint);
        hcnr::EvalReport r;
        try {
            r = hcnr::evaluate_checkpoint_file(ckpt, o.out);
        } catch (const hcnr::Error& e) {
            throw hcnr::StageError("eval", e.what());
        }
        if (!o.variant.empty()) r.variant = o.variant;
        print_report(r);
        return kOk;
    }

    const hcnr::ExperimentConfig cfg = resolve_config(o);
    hcnr::LogSink echo;
    if (!o.quiet) echo = [](const std::string& line) { std::cerr << line << '\n'; };
    hcnr::Pipeline p(cfg, cfg.output_dir, echo);
    const std::vector<std::string> variants =
        o.variant.empty() ? cfg.variants : std::vector<std::string>{o.variant};

    if (cmd == "gen-world") {
        p.datasets();
    } else if (cmd == "pretrain") {
        print_report(p.report_for("pretrained", p.pretrained()));
    } else if (cmd == "sft") {
        p.report_for("pretrained", p.pretrained());
        print_report(p.report_for("sft", p.sft()));
        p.gate();
    } else if (cmd == "rait") {
        print_report(p.variant("rait").report);
    } else if (cmd == "analyze") {
        p.gate();
        p.plan();
    } else if (cmd == "restore") {
        print_report(p.variant("wo_com").report);
    } else if (cmd == "compensate") {
        print_report(p.variant("hcnr").report);
    } else if (cmd == "probe") {
        p.probes();
    } else if (cmd == "ablate") {
        p.run_variants(variants);
    } else if (cmd == "sweep") {
        if (o.axes.empty())
            p.sweep();
        else
            p.sweep(o.axes);
    } else if (cmd == "run-all") {
        p.run_all(variants, o.stage);
    }
    return kOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Honesty-critical neuron restoration: desk-scale experiment pipeline"};
    app.require_subcommand(1);
    Options o;

    const std::vector<std::pair<std::string, std::string>> commands = {
        {"gen-world", "Generate the synthetic world and dataset splits"},
        {"pretrain", "Pretrain the model (answers known facts, refuses unknown ones)"},
        {"sft", "Fine-tune on the domain corpus and check the degradation gate"},
        {"rait", "Refusal-aware retraining baseline on the IDK set"},
        {"analyze", "Importance scores and surgery plan"},
        {"restore", "Restore honesty-critical neurons without compensation"},
        {"compensate", "Restore with Hessian-guided compensation (full method)"},
        {"probe", "Linear probes, cross-model transfer and permuted-unit control"},
        {"eval", "Evaluate a checkpoint against a run directory's eval splits"},
        {"ablate", "Run the ablation variants and write summary.csv"},
        {"sweep", "Dataset-size and ratio sweeps"},
        {"run-all", "Run the full pipeline"},
    };
    for (const auto& [name, help] : commands) {
        CLI::App* sub = app.add_subcommand(name, help);
        sub->add_option("--config", o.config, "Experiment config (JSON, schema hcnr-config/1)");
        sub->add_option("--seed", o.seed, "Override the config seed");
        sub->add_option("--out", o.out, "Output directory");
        sub->add_option("--variant", o.variant, "Restrict to one variant");
        sub->add_option("--stage", o.stage, "run-all: stop after this stage");
        sub->add_flag("--quiet", o.quiet, "Do not echo progress to stderr");
        if (name == "eval") sub->add_option("--checkpoint", o.checkpoint, "Checkpoint file to evaluate");
        if (name == "sweep") sub->add_option("--axis", o.axes, "Sweep axes (d_hon_size, d_task_size, r_iw, r_cw)");
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? kOk : kConfig;
    }

    const std::string cmd = app.get_subcommands().front()->get_name();
    try {
        return run(cmd, o);
    } catch (const hcnr::ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return kConfig;
    } catch (const hcnr::DegradationGateError& e) {
        std::cerr << e.what() << '\n';
        return kGate;
    } catch (const hcnr::StageError& e) {
        std::cerr << e.what() << '\n';
        return kStage;
    } catch (const hcnr::Error& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kStage;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kStage;
    }
}
