#include "qagg/cli.hpp"

#include "qagg/bench.hpp"
#include "qagg/error.hpp"
#include "qagg/io.hpp"
#include "qagg/smoother.hpp"
#include "qagg/spectral.hpp"

#include <chrono>
#include <cmath>
#include <ctime>
#include <iomanip>
#include <ostream>
#include <sstream>

namespace qagg::cli {

namespace fs = std::filesystem;
using nlohmann::json;

std::string utc_timestamp() {
    const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&now, &tm);
    std::ostringstream os;
    os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
    return os.str();
}

json RunManifest::to_json() const {
    json files_json = json::array();
    for (const auto& f : files) files_json.push_back({{"path", f.path}, {"bytes", f.bytes}, {"sha256", f.sha256}});
    json j;
    j["command"] = command;
    j["config_path"] = config_path;
    j["output_dir"] = output_dir;
    j["tool_version"] = tool_version;
    j["seed"] = seed ? json(*seed) : json(nullptr);
    j["started_utc"] = started_utc;
    j["finished_utc"] = finished_utc;
    j["files"] = files_json;
    return j;
}

void emit_file(RunManifest& manifest, const fs::path& dir, const std::string& name, const std::string& text) {
    io::write_text_file(dir / name, text);
    manifest.files.push_back({name, text.size(), io::sha256_hex(text)});
}

void write_manifest(RunManifest& manifest, const fs::path& dir) {
    manifest.finished_utc = utc_timestamp();
    io::write_text_file(dir / "manifest.json", manifest.to_json().dump(2) + "\n");
}

namespace {

void prepare_output(const std::string& dir) {
    if (dir.empty()) throw InputError("--output: missing output directory");
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec || !fs::is_directory(dir)) throw InputError("--output: cannot create directory '" + dir + "'");
}

std::string csv_of(const Eigen::MatrixXd& m) {
    std::ostringstream os;
    io::write_matrix_csv(os, m);
    return os.str();
}

std::vector<double> to_std(const Eigen::VectorXd& v) { return {v.data(), v.data() + v.size()}; }

int run_aggregate(const AggregateArgs& args, std::ostream& out, std::ostream& err) {
    RunManifest manifest;
    manifest.command = "aggregate";
    manifest.output_dir = args.output;
    manifest.started_utc = utc_timestamp();

    if (!(args.sigma > 0.0) || !std::isfinite(args.sigma)) throw InputError("--sigma: must be positive");
    if (args.lambdas.empty()) throw InputError("--lambdas: missing tuning grid");
    DesignProblem problem;
    problem.design = io::read_matrix_csv(args.design, "--design");
    const auto p = problem.design.cols();
    if (args.penalty == "identity") {
        problem.penalty = Eigen::MatrixXd::Identity(p, p);
    } else {
        problem.penalty = io::read_matrix_csv(args.penalty, "--penalty");
        if (problem.penalty.rows() != p || problem.penalty.cols() != p) {
            std::ostringstream os;
            os << "--penalty: expected " << p << "x" << p << ", got " << problem.penalty.rows() << "x"
               << problem.penalty.cols();
            throw InputError(os.str());
        }
        try {
            inverse_sqrt_spd(problem.penalty);
        } catch (const InputError& e) {
            throw InputError(std::string("--penalty: ") + e.what());
        }
    }
    try {
        problem.lambdas = canonicalize_lambdas(parse_grid_spec(args.lambdas).resolve(1.0));
    } catch (const InputError& e) {
        const std::string msg = e.what();
        throw InputError(msg.rfind("lambdas", 0) == 0 ? "--" + msg : "--lambdas: " + msg);
    }
    SpectralFamily family = [&] {
        try {
            return build_tikhonov_family(problem);
        } catch (const InputError& e) {
            throw InputError(std::string("--design: ") + e.what());
        }
    }();

    const Eigen::VectorXd y = io::read_vector_csv(args.response, "--response");
    if (static_cast<std::size_t>(y.size()) != family.dim()) {
        std::ostringstream os;
        os << "--response: length " << y.size() << " does not match the " << family.dim() << " design rows";
        throw InputError(os.str());
    }
    prepare_output(args.output);

    const CandidateFits fits(family, y);
    const SolveReport sol = solve_q_aggregation(fits, args.sigma, args.solver);
    const Eigen::VectorXd& theta = sol.weights.theta;
    const Eigen::VectorXd coef = recover_coefficients(family, theta, y);
    const Eigen::VectorXd cp = cp_values(fits, args.sigma);

    json j;
    j["converged"] = sol.converged;
    j["objective"] = sol.objective;
    j["kkt_residual"] = sol.kkt_residual;
    j["iterations"] = sol.iterations;
    j["gradient_iterations"] = sol.gradient_iterations;
    j["sigma"] = args.sigma;
    j["n"] = family.dim();
    j["p"] = coef.size();
    j["M"] = family.size();
    j["lambdas"] = family.lambdas();
    j["theta"] = to_std(theta);
    j["df"] = to_std(fits.df());
    j["cp"] = to_std(cp);
    j["coefficients"] = to_std(coef);
    j["fitted"] = to_std(sol.weights.fitted);

    std::ostringstream members;
    members << std::setprecision(17) << "index,lambda,theta,df,cp,residual_sq\n";
    for (std::size_t k = 0; k < family.size(); ++k) {
        const auto i = static_cast<Eigen::Index>(k);
        members << k << ',' << family.lambdas()[k] << ',' << theta(i) << ',' << fits.df()(i) << ',' << cp(i)
                << ',' << fits.residual_sq()(i) << '\n';
    }

    emit_file(manifest, args.output, "aggregate.json", j.dump(2) + "\n");
    emit_file(manifest, args.output, "members.csv", members.str());
    emit_file(manifest, args.output, "coefficients.csv", csv_of(coef));
    emit_file(manifest, args.output, "fitted.csv", csv_of(sol.weights.fitted));
    write_manifest(manifest, args.output);

    if (!sol.converged) {
        err << "solver did not converge: kkt residual " << sol.kkt_residual << " after " << sol.iterations
            << " iterations; partial output written to " << args.output << "\n";
        return kNonConvergence;
    }
    out << "aggregated " << family.size() << " members, objective " << std::setprecision(10) << sol.objective
        << ", kkt " << sol.kkt_residual << ", " << sol.iterations << " iterations\n";
    return kOk;
}

int run_bench(const BenchArgs& args, std::ostream& out, std::ostream& err) {
    RunManifest manifest;
    manifest.command = "bench";
    manifest.config_path = args.config;
    manifest.output_dir = args.output;
    manifest.started_utc = utc_timestamp();

    ExperimentConfig config;
    try {
        config = parse_experiment_config(io::read_text_file(args.config));
    } catch (const InputError& e) {
        throw InputError(args.config + ": " + e.what());
    }
    if (args.seed) config.seed = *args.seed;
    if (args.threads) {
        if (*args.threads == 0) throw InputError("--threads: must be at least 1");
        config.threads = *args.threads;
    }
    manifest.seed = config.seed;

    std::vector<RegretReport> reports;
    if (!args.sweep) {
        prepare_output(args.output);
        reports.push_back(run_experiment(config));
    } else if (*args.sweep == "M") {
        if (config.sweep.m_values.empty()) throw InputError(args.config + ": sweep.M_values: required for --sweep M");
        prepare_output(args.output);
        reports = regret_vs_m_sweep(config, config.sweep.m_values);
    } else if (*args.sweep == "q") {
        if (config.sweep.q_values.empty()) throw InputError(args.config + ": sweep.q_values: required for --sweep q");
        prepare_output(args.output);
        reports = regret_vs_q_sweep(config, config.sweep.q_values);
    } else {
        throw InputError("--sweep: expected M or q, got '" + *args.sweep + "'");
    }

    json all = json::array();
    for (const auto& r : reports) all.push_back(report_to_json(r));
    std::ostringstream csv;
    write_reports_csv(csv, reports);

    emit_file(manifest, args.output, "reports.json", all.dump(2) + "\n");
    emit_file(manifest, args.output, "reports.csv", csv.str());
    write_manifest(manifest, args.output);

    out << std::left << std::setw(28) << "label" << std::setw(8) << "M" << std::setw(5) << "q" << std::setw(14)
        << "method" << std::right << std::setw(12) << "regret" << std::setw(12) << "ci95" << "\n";
    for (const auto& r : reports) {
        for (const auto& s : r.methods) {
            out << std::left << std::setw(28) << r.label << std::setw(8) << r.members << std::setw(5) << r.families
                << std::setw(14) << method_name(s.method) << std::right << std::fixed << std::setprecision(4)
                << std::setw(12) << s.regret << std::setw(12) << s.ci_half_width << "\n"
                << std::defaultfloat;
        }
        if (r.nonconverged > 0) {
            err << r.label << ": " << r.nonconverged << " replicate(s) did not converge and were excluded\n";
        }
    }
    return kOk;
}

int run_validate(const ValidateArgs& args, std::ostream& out) {
    const auto matrices = io::read_matrix_list(args.matrices, "matrices");
    double tol = 0.0;
    try {
        tol = args.tol ? *args.tol : default_ordered_tolerance(matrices);
    } catch (const std::exception& e) {
        throw InputError(std::string("matrices: ") + e.what());
    }
    if (!(tol > 0.0)) throw InputError("--tol: must be positive");
    OrderedReport report;
    try {
        report = check_ordered(matrices, tol);
    } catch (const InputError& e) {
        throw InputError(std::string("matrices: ") + e.what());
    }

    auto line = [&](const char* name, const AxiomResult& a) {
        out << std::left << std::setw(26) << name << (a.pass ? "PASS" : "FAIL") << "  worst=" << std::scientific
            << std::setprecision(3) << a.worst << std::defaultfloat;
        if (!a.pass) out << "  " << a.detail;
        out << "\n";
    };
    out << matrices.size() << " matrices of size " << matrices.front().rows() << ", tol=" << std::scientific
        << std::setprecision(3) << tol << std::defaultfloat << "\n";
    line("symmetric-unit-spectrum", report.symmetric_unit_spectrum);
    line("commuting", report.commuting);
    line("totally-ordered", report.totally_ordered);
    return report.pass() ? kOk : kValidationFailure;
}

template <class Fn>
int guarded(std::ostream& err, Fn&& fn) {
    try {
        return fn();
    } catch (const InputError& e) {
        err << "error: " << e.what() << "\n";
        return kInputError;
    } catch (const NumericalError& e) {
        err << "numerical failure: " << e.what() << "\n";
        return kNonConvergence;
    }
}

}  // namespace

int cmd_aggregate(const AggregateArgs& args, std::ostream& out, std::ostream& err) {
    return guarded(err, [&] { return run_aggregate(args, out, err); });
}

int cmd_bench(const BenchArgs& args, std::ostream& out, std::ostream& err) {
    return guarded(err, [&] { return run_bench(args, out, err); });
}

int cmd_validate(const ValidateArgs& args, std::ostream& out, std::ostream& err) {
    return guarded(err, [&] { return run_validate(args, out); });
}

}  // namespace qagg::cli
