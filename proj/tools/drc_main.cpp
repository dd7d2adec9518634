// drc: pipeline driver and benchmark harness.
//
//   drc run --config pipeline.json [--report out.json]
//   drc bench-scaling --op sort --mode weak --rows 10000 --parallelism 1,2,4 \
//       --reps 3 --out scaling.csv
//   drc bench-modes --config pipeline.json --out modes.json
//
// Exit codes: 0 success, 2 config/usage error, 3 task failure.

#include <cstdio>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "drc/drc.hpp"

namespace {

struct GlobalArgs {
    std::optional<uint64_t> seed;
    std::optional<std::string> backend;
    std::string log_level;
};

void apply_globals(const GlobalArgs& g, drc::PipelineConfig& cfg) {
    if (g.seed) cfg.seed = *g.seed;
    if (g.backend) cfg.backend = drc::pipeline_detail::parse_backend(*g.backend);
}

std::vector<uint32_t> parse_parallelism_list(const std::string& csv) {
    std::vector<uint32_t> out;
    size_t pos = 0;
    while (pos <= csv.size()) {
        size_t comma = csv.find(',', pos);
        std::string tok =
            comma == std::string::npos ? csv.substr(pos) : csv.substr(pos, comma - pos);
        if (!tok.empty()) out.push_back(static_cast<uint32_t>(std::stoul(tok)));
        if (comma == std::string::npos) break;
        pos = comma + 1;
    }
    if (out.empty()) throw drc::ConfigError("empty parallelism list");
    return out;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"deeprc pipeline driver"};
    app.require_subcommand(1);

    GlobalArgs globals;
    app.add_option("--seed", globals.seed, "Override the session seed");
    app.add_option("--backend", globals.backend, "Fabric backend: inproc|tcp")
        ->check(CLI::IsMember({"inproc", "tcp"}));
    app.add_option("--log-level", globals.log_level,
                   "off|error|warn|info|debug (also env DRC_LOG)");

    auto* run = app.add_subcommand("run", "Run a pipeline config");
    std::string run_config, run_report;
    run->add_option("--config", run_config, "Pipeline JSON config")->required();
    run->add_option("--report", run_report, "Report path override");

    auto* scaling = app.add_subcommand("bench-scaling", "Strong/weak scaling benchmark");
    std::string sc_op, sc_mode, sc_parallelism, sc_out;
    uint64_t sc_rows = 10000;
    uint32_t sc_reps = 3;
    scaling->add_option("--op", sc_op, "sort|join")->required()
        ->check(CLI::IsMember({"sort", "join"}));
    scaling->add_option("--mode", sc_mode, "strong|weak")->required()
        ->check(CLI::IsMember({"strong", "weak"}));
    scaling->add_option("--rows", sc_rows, "Base row count");
    scaling->add_option("--parallelism", sc_parallelism, "Comma list, e.g. 1,2,4,8")->required();
    scaling->add_option("--reps", sc_reps, "Repetitions per parallelism");
    scaling->add_option("--out", sc_out, "Output CSV path")->required();

    auto* modes = app.add_subcommand("bench-modes", "Batch vs pipelined comparison");
    std::string bm_config, bm_out;
    modes->add_option("--config", bm_config, "Pipeline JSON config")->required();
    modes->add_option("--out", bm_out, "Output JSON path")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    }

    if (!globals.log_level.empty())
        drc::logging::set_level(drc::logging::level_from_name(globals.log_level));

    try {
        if (*run) {
            drc::PipelineConfig cfg = drc::load_pipeline_config(run_config);
            apply_globals(globals, cfg);
            std::optional<std::string> report;
            if (!run_report.empty()) report = run_report;
            drc::RunReport rep = drc::run_pipeline(cfg, report);
            std::printf("%s\n", rep.to_json().dump(2).c_str());
            return rep.exit_code();
        }
        if (*scaling) {
            auto parallelisms = parse_parallelism_list(sc_parallelism);
            drc::Backend backend = globals.backend
                                       ? drc::pipeline_detail::parse_backend(*globals.backend)
                                       : drc::Backend::InProcess;
            auto rows = drc::bench_scaling(sc_op, sc_mode, sc_rows, parallelisms, sc_reps,
                                           globals.seed.value_or(0), backend);
            std::string csv = drc::bench_scaling_csv(rows);
            drc::pipeline_detail::write_file(sc_out, csv);
            std::printf("%s", csv.c_str());
            return 0;
        }
        if (*modes) {
            drc::PipelineConfig cfg = drc::load_pipeline_config(bm_config);
            apply_globals(globals, cfg);
            drc::BenchModesReport rep = drc::bench_modes(cfg);
            drc::pipeline_detail::write_file(bm_out, rep.to_json().dump(2) + "\n");
            std::printf("%s\n", rep.to_json().dump(2).c_str());
            return 0;
        }
    } catch (const drc::ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return 2;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 3;
    }
    return 2;
}
