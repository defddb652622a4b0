// nlbss: command-line front end for the separation pipeline.
//
// Exit codes: 0 success, 1 stage failure, 2 configuration error.

#include "nlbss/nlbss.hpp"

#include "CLI11.hpp"

#include <iostream>
#include <optional>
#include <string>

namespace {

struct CommonArgs {
    std::string config;
    std::string out;
    std::size_t threads = 0;
    bool threads_set = false;
};

nlbss::PipelineConfig resolve_config(const CommonArgs& args) {
    nlbss::PipelineConfig cfg = args.config.empty() ? nlbss::PipelineConfig{} : nlbss::load_config(args.config);
    if (!args.out.empty()) cfg.output_dir = args.out;
    if (args.threads_set) cfg.analysis.threads = args.threads;
    cfg.validate();
    return cfg;
}

void add_common(CLI::App* cmd, CommonArgs& args) {
    cmd->add_option("-c,--config", args.config, "INI configuration file")->check(CLI::ExistingFile);
    cmd->add_option("-o,--out", args.out, "artifact directory (overrides output.dir)");
    cmd->add_option_function<std::size_t>(
           "-j,--threads",
           [&args](std::size_t n) {
               args.threads = n;
               args.threads_set = true;
           },
           "worker thread cap (0 = hardware concurrency)")
        ->check(CLI::NonNegativeNumber);
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Nonlinear blind source separation from phase-space velocity statistics"};
    app.require_subcommand(1);
    CommonArgs args;
    std::string quiver_out;
    std::string recover_format;
    bool print_config = false;

    auto* run = app.add_subcommand("run", "run every stage and write summary.txt");
    auto* gen = app.add_subcommand("gen", "generate synthetic sources");
    auto* mix = app.add_subcommand("mix", "mix sources (or import [input] mixtures)");
    auto* bin = app.add_subcommand("bin", "PCA-normalize mixtures and accumulate binned moments");
    auto* frames = app.add_subcommand("frames", "build and align local frames");
    auto* weights = app.add_subcommand("weights", "compute weights and uncorrelated partitions");
    auto* map = app.add_subcommand("map", "integrate the separable coordinate map");
    auto* verify = app.add_subcommand("verify", "test separability of the mapped data");
    auto* recover = app.add_subcommand("recover", "write recovered source waveforms");
    for (auto* cmd : {run, gen, mix, bin, frames, weights, map, verify, recover}) add_common(cmd, args);
    frames->add_option("--quiver-out", quiver_out, "extra copy of the quiver CSV");
    recover->add_option("--format", recover_format, "wav16 or csv")->check(CLI::IsMember({"wav16", "wav", "csv"}));
    run->add_flag("--print-config", print_config, "print the effective configuration and exit");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    std::optional<nlbss::StageContext> ctx;
    try {
        auto cfg = resolve_config(args);
        if (!recover_format.empty()) cfg.recover_format = nlbss::parse_series_format(recover_format);
        if (print_config) {
            std::cout << nlbss::dump_config(cfg);
            return 0;
        }
        ctx.emplace(std::move(cfg));
        if (!quiver_out.empty()) ctx->quiver_out = quiver_out;
    } catch (const nlbss::Error& e) {
        std::cerr << "nlbss: " << e.what() << '\n';
        return 2;
    }

    try {
        if (*run) {
            nlbss::run_pipeline(*ctx);
            std::cout << "summary written to " << ctx->store.path(nlbss::artifact::summary).string() << '\n';
        } else if (*gen) {
            nlbss::stage_gen(*ctx);
        } else if (*mix) {
            nlbss::stage_mix(*ctx);
        } else if (*bin) {
            nlbss::stage_bin(*ctx);
        } else if (*frames) {
            nlbss::stage_frames(*ctx);
        } else if (*weights) {
            nlbss::stage_weights(*ctx);
        } else if (*map) {
            nlbss::stage_map(*ctx);
        } else if (*verify) {
            const auto v = nlbss::stage_verify(*ctx);
            std::cout << "verdict=" << (v.separable ? "separable" : "inseparable")
                      << " max_stat=" << nlbss::format_double(v.report.max_stat) << '\n';
        } else if (*recover) {
            const auto r = nlbss::stage_recover(*ctx);
            for (const auto& p : r.outputs) std::cout << p.string() << '\n';
        }
    } catch (const nlbss::Error& e) {
        std::cerr << "nlbss: " << e.what() << '\n';
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "nlbss: unexpected failure: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
