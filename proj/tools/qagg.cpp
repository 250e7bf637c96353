#include "qagg/cli.hpp"

#include <CLI11.hpp>

#include <iostream>

int main(int argc, char** argv) {
    using namespace qagg::cli;

    CLI::App app{"Q-aggregation of ordered linear smoothers"};
    app.set_version_flag("--version", std::string(kToolVersion));
    app.require_subcommand(1);

    AggregateArgs agg;
    auto* aggregate = app.add_subcommand("aggregate", "Aggregate a Tikhonov family fitted to a response");
    aggregate->add_option("--design", agg.design, "n x p design matrix (CSV)")->required();
    aggregate->add_option("--response", agg.response, "length-n response vector (CSV)")->required();
    aggregate->add_option("--penalty", agg.penalty, "p x p penalty matrix (CSV) or 'identity'")
        ->capture_default_str();
    aggregate->add_option("--lambdas", agg.lambdas, "comma list or geom:min:max:M")->required();
    aggregate->add_option("--sigma", agg.sigma, "known noise level")->required();
    aggregate->add_option("--output", agg.output, "output directory")->required();
    aggregate->add_option("--max-iters", agg.solver.max_iters, "solver iteration cap")->capture_default_str();
    aggregate->add_option("--kkt-tol", agg.solver.kkt_tol, "relative KKT tolerance")->capture_default_str();

    BenchArgs bench;
    std::uint64_t seed = 0;
    unsigned threads = 1;
    std::string sweep;
    auto* bench_cmd = app.add_subcommand("bench", "Run a Monte Carlo experiment from a JSON config");
    bench_cmd->add_option("config", bench.config, "experiment config (JSON)")->required();
    bench_cmd->add_option("--output", bench.output, "output directory")->required();
    auto* seed_opt = bench_cmd->add_option("--seed", seed, "override the config seed");
    auto* threads_opt = bench_cmd->add_option("--threads", threads, "cap on worker threads");
    auto* sweep_opt = bench_cmd->add_option("--sweep", sweep, "M or q")->check(CLI::IsMember({"M", "q"}));

    ValidateArgs validate;
    double tol = 0.0;
    auto* validate_cmd = app.add_subcommand("validate", "Check the ordered-smoother axioms on a list of matrices");
    validate_cmd->add_option("matrices", validate.matrices, "blank-line separated CSV matrices")->required();
    auto* tol_opt = validate_cmd->add_option("--tol", tol, "absolute tolerance");

    try {
        app.parse(argc, argv);
    } catch (const CLI::Success& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kInputError;
    }

    if (*aggregate) return cmd_aggregate(agg, std::cout, std::cerr);
    if (*bench_cmd) {
        if (*seed_opt) bench.seed = seed;
        if (*threads_opt) bench.threads = threads;
        if (*sweep_opt) bench.sweep = sweep;
        return cmd_bench(bench, std::cout, std::cerr);
    }
    if (*tol_opt) validate.tol = tol;
    return cmd_validate(validate, std::cout, std::cerr);
}
