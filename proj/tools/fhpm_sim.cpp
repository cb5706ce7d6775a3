#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include <CLI11.hpp>
#include <fmt/core.h>

#include "fhpm/harness.hpp"

namespace {

std::string read_text(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is)
        throw fhpm::Error(fmt::format("cannot open {}", path));
    std::ostringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Huge-page management simulator: runs the registered experiments and writes CSV reports"};
    app.name("fhpm_sim");
    app.require_subcommand(1);

    std::optional<std::uint64_t> seed;
    std::optional<std::string> out;
    app.add_option("--seed", seed, "override the config or trace seed");
    app.add_option("--out", out, "override the output directory");

    std::string config_path;
    auto* run = app.add_subcommand("run", "run the experiment described by a config file");
    run->add_option("config", config_path, "experiment config (JSON)")->required();
    run->fallthrough();

    auto* list = app.add_subcommand("list-experiments", "print the registered experiment names");

    std::string spec_path;
    std::string trace_out;
    auto* gen = app.add_subcommand("gen-trace", "generate a binary trace file from a trace spec");
    gen->add_option("spec", spec_path, "trace spec (JSON)")->required();
    gen->add_option("out", trace_out, "output trace file")->required();
    gen->fallthrough();

    std::string validate_path;
    auto* validate = app.add_subcommand("validate", "check a config file and print ok");
    validate->add_option("config", validate_path, "experiment config (JSON)")->required();
    validate->fallthrough();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << "error: " << e.what() << "\n\n" << app.help();
        return 2;
    }

    try {
        if (*list) {
            for (const auto& n : fhpm::experiment_names())
                std::cout << n << "\n";
            return 0;
        }
        if (*validate) {
            fhpm::load_config(validate_path);
            std::cout << "ok\n";
            return 0;
        }
        if (*gen) {
            fhpm::TraceSpec spec = fhpm::parse_trace_spec(read_text(spec_path));
            if (seed)
                spec.seed = *seed;
            const fhpm::Trace trace = fhpm::generate_trace(spec);
            fhpm::write_trace(trace_out, trace);
            std::cout << fmt::format("wrote {} events to {}\n", trace.size(), trace_out);
            return 0;
        }
        if (*run) {
            fhpm::ExperimentConfig cfg = fhpm::load_config(config_path);
            if (seed)
                cfg.seed = *seed;
            if (out)
                cfg.output_dir = *out;
            for (const auto& f : fhpm::run_experiment(cfg))
                std::cout << f.string() << "\n";
            return 0;
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 2;
}
