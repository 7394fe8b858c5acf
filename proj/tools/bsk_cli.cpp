#include "bsk/bsk.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

namespace {

struct CommonFlags {
    std::string config_file;
    std::string benchmark;
    std::vector<std::string> overrides;
    std::string save_lift;
    bool quiet = false;
    // typed mirrors of the most used keys
    std::map<std::string, std::string> typed;
};

void add_common(CLI::App* cmd, CommonFlags& f, bool with_benchmark_flag)
{
    cmd->add_option("-c,--config", f.config_file, "key = value configuration file");
    if (with_benchmark_flag)
        cmd->add_option("-b,--benchmark", f.benchmark, "benchmark name (when no config file is given)")
            ->check(CLI::IsMember(bsk::benchmark_names()));
    cmd->add_option("-s,--set", f.overrides, "override a configuration key (key=value), repeatable");
    cmd->add_option("--save-lift", f.save_lift, "write the trained lift network to this file");
    cmd->add_flag("-q,--quiet", f.quiet, "print only the report file names");
    for (const char* key : {"method", "kernel", "sigma", "depth", "lift", "lift_alpha", "normalization", "train_fraction",
                            "cadence", "window", "ridge", "seed", "samples", "output_dir", "data"}) {
        std::string flag = std::string("--") + key;
        for (auto& ch : flag)
            if (ch == '_') ch = '-';
        cmd->add_option_function<std::string>(flag, [&f, key](const std::string& v) { f.typed[key] = v; },
                                              std::string("sets config key ") + key);
    }
}

bsk::ExperimentConfig resolve(const CommonFlags& f, const std::string& benchmark, const char* mode)
{
    bsk::ExperimentConfig cfg;
    if (!f.config_file.empty()) {
        cfg = bsk::ExperimentConfig::load(f.config_file);
        if (!benchmark.empty() && benchmark != cfg.benchmark())
            throw bsk::InvalidInput("config: file is for " + cfg.benchmark() + ", not " + benchmark);
    } else {
        if (benchmark.empty()) throw bsk::InvalidInput("config: give --config or --benchmark");
        cfg = bsk::ExperimentConfig::defaults(benchmark);
    }
    if (mode) cfg.set("mode", mode);
    for (const auto& [k, v] : f.typed) cfg.set(k, v);
    for (const auto& kv : f.overrides) cfg.apply_override(kv);
    return cfg;
}

int run(const CommonFlags& f, const std::string& benchmark, const char* mode)
{
    bsk::ExperimentConfig cfg = resolve(f, benchmark, mode);
    bsk::ExperimentResult res = bsk::run_experiment(cfg);
    bsk::ReportFiles files;
    try {
        files = bsk::write_report(res.report, cfg.str("output_dir"));
        if (!f.save_lift.empty()) {
            if (res.lift.layers() == 0) throw bsk::InvalidInput("no lift network was trained (lift != nn)");
            bsk::save_mlp(res.lift, f.save_lift);
        }
    } catch (const std::exception& e) {
        throw bsk::Error(std::string("output: ") + e.what());
    }
    if (!f.quiet) std::cout << bsk::report_text(res.report);
    std::cout << "report: " << files.report << "\ntrace: " << files.trace << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv)
{
    CLI::App app{"Signature-kernel ODE solvers: calibration, streaming and benchmark runs"};
    app.require_subcommand(1);

    CommonFlags solve_flags, stream_flags, exp_flags;
    auto* solve = app.add_subcommand("solve", "batch calibration on the full record");
    add_common(solve, solve_flags, true);
    auto* stream = app.add_subcommand("stream", "streaming run: initial window, online updates, periodic retraining");
    add_common(stream, stream_flags, true);
    auto* experiment = app.add_subcommand("experiment", "run a benchmark with its default settings");
    std::string exp_name;
    experiment->add_option("name", exp_name, "benchmark name")->required()->check(CLI::IsMember(bsk::benchmark_names()));
    add_common(experiment, exp_flags, false);

    auto* bench = app.add_subcommand("bench-speedup", "time naive against streamed prefix signatures");
    std::vector<bsk::Index> sizes{200, 400, 800};
    bsk::Index dim = 2;
    int depth = 3, repeats = 3;
    bench->add_option("--sizes", sizes, "sample counts")->delimiter(',');
    bench->add_option("--dim", dim, "path dimension")->check(CLI::PositiveNumber);
    bench->add_option("--depth", depth, "truncation depth")->check(CLI::PositiveNumber);
    bench->add_option("--repeats", repeats, "timing repeats (best is kept)")->check(CLI::PositiveNumber);

    auto* gc = app.add_subcommand("grad-check", "compare analytic gradients with central differences");
    int instances = 20;
    std::uint64_t gc_seed = 0;
    gc->add_option("--instances", instances, "random instances")->check(CLI::PositiveNumber);
    gc->add_option("--seed", gc_seed, "seed");

    CLI11_PARSE(app, argc, argv);

    try {
        if (*solve) return run(solve_flags, solve_flags.benchmark, "calibrate");
        if (*stream) return run(stream_flags, stream_flags.benchmark, "stream");
        if (*experiment) return run(exp_flags, exp_name, nullptr);
        if (*bench) {
            auto rows = bsk::bench_speedup(sizes, dim, depth, repeats);
            std::printf("%8s %14s %14s %10s\n", "N", "naive_s", "streamed_s", "ratio");
            for (const auto& r : rows)
                std::printf("%8td %14.6e %14.6e %10.2f\n", static_cast<std::ptrdiff_t>(r.samples), r.naive_seconds,
                            r.streamed_seconds, r.ratio);
            return 0;
        }
        if (*gc) {
            auto res = bsk::run_grad_checks(instances, gc_seed);
            std::printf("%8s %16s %16s\n", "instance", "solver_relerr", "lift_relerr");
            for (std::size_t i = 0; i < res.solver_errors.size(); ++i)
                std::printf("%8zu %16.3e %16.3e\n", i, res.solver_errors[i], res.lift_errors[i]);
            std::printf("worst solver %.3e (limit 1e-5), worst lift %.3e (limit 1e-4)\n", res.worst_solver, res.worst_lift);
            return res.worst_solver < 1e-5 && res.worst_lift < 1e-4 ? 0 : 1;
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
