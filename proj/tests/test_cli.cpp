#include "oracles/dense_oracle.hpp"
#include "qagg/bench.hpp"
#include "qagg/cli.hpp"
#include "qagg/error.hpp"
#include "qagg/io.hpp"
#include "qagg/spectral.hpp"

#include <doctest.h>

#include <sys/wait.h>
#include <unistd.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

using namespace qagg;
using Eigen::MatrixXd;
using Eigen::VectorXd;
namespace fs = std::filesystem;

namespace {

const fs::path kFixtures = QAGG_FIXTURE_DIR;

fs::path scratch(const std::string& name) {
    const fs::path dir = fs::temp_directory_path() / ("qagg_cli_test_" + std::to_string(::getpid())) / name;
    fs::remove_all(dir);
    fs::create_directories(dir.parent_path());
    return dir;
}

cli::AggregateArgs toy_args(const fs::path& out) {
    cli::AggregateArgs a;
    a.design = (kFixtures / "toy_design.csv").string();
    a.response = (kFixtures / "toy_response.csv").string();
    a.penalty = (kFixtures / "toy_penalty.csv").string();
    a.lambdas = "0.05,0.5,5";
    a.sigma = 0.3;
    a.output = out.string();
    return a;
}

nlohmann::json read_json(const fs::path& p) { return nlohmann::json::parse(io::read_text_file(p)); }

VectorXd json_vector(const nlohmann::json& j) {
    const auto v = j.get<std::vector<double>>();
    return Eigen::Map<const VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
}

int run_tool(const std::string& args) {
    const std::string cmd = std::string(QAGG_TOOL_PATH) + " " + args + " > /dev/null 2>&1";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

TEST_CASE("matrix CSV parsing") {
    std::istringstream ok("# 2 3\n1,2,3\n4, 5 ,6\n");
    const MatrixXd m = io::parse_matrix_csv(ok, "m");
    CHECK(m.rows() == 2);
    CHECK(m(1, 1) == 5.0);

    std::istringstream bad_shape("# 3 3\n1,2,3\n");
    CHECK_THROWS_WITH_AS(io::parse_matrix_csv(bad_shape, "--design"), doctest::Contains("--design"), InputError);
    std::istringstream ragged("1,2\n3\n");
    CHECK_THROWS_AS(io::parse_matrix_csv(ragged, "m"), InputError);
    std::istringstream junk("1,abc\n");
    CHECK_THROWS_WITH_AS(io::parse_matrix_csv(junk, "m"), doctest::Contains("line 1"), InputError);

    std::istringstream list("1,0\n0,1\n\n\n# 2 2\n0,0\n0,0\n");
    CHECK(io::parse_matrix_list(list, "m").size() == 2);

    std::ostringstream os;
    MatrixXd r(1, 2);
    r << 0.1, 1.0 / 3.0;
    io::write_matrix_csv(os, r);
    std::istringstream back(os.str());
    CHECK(io::parse_matrix_csv(back, "m") == r);
}

TEST_CASE("sha256 known vector") {
    CHECK(io::sha256_hex("abc") == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}

TEST_CASE("aggregate output equals the library call and the dense oracle") {
    const fs::path out = scratch("toy");
    std::ostringstream o;
    std::ostringstream e;
    REQUIRE(cli::cmd_aggregate(toy_args(out), o, e) == cli::kOk);

    const nlohmann::json j = read_json(out / "aggregate.json");
    CHECK(j["converged"].get<bool>());

    // Library path on identical inputs.
    DesignProblem prob{io::read_matrix_csv(kFixtures / "toy_design.csv", "design"),
                       io::read_matrix_csv(kFixtures / "toy_penalty.csv", "penalty"), {0.05, 0.5, 5.0}};
    const VectorXd y = io::read_vector_csv(kFixtures / "toy_response.csv", "response");
    const SpectralFamily fam = build_tikhonov_family(prob);
    const SolveReport sol = solve_q_aggregation(fam, y, 0.3);
    const VectorXd coef = recover_coefficients(fam, sol.weights.theta, y);
    CHECK(json_vector(j["theta"]) == sol.weights.theta);
    CHECK(json_vector(j["coefficients"]) == coef);
    CHECK(json_vector(j["fitted"]) == sol.weights.fitted);
    CHECK(j["objective"].get<double>() == sol.objective);
    CHECK(io::read_vector_csv(out / "coefficients.csv", "c") == coef);
    CHECK(io::read_vector_csv(out / "fitted.csv", "f") == sol.weights.fitted);

    // Dense oracle golden values.
    const VectorXd theta = json_vector(j["theta"]);
    VectorXd w = VectorXd::Zero(3);
    std::vector<MatrixXd> dense;
    for (std::size_t k = 0; k < 3; ++k) {
        dense.push_back(oracle::tikhonov_matrix(prob.design, prob.penalty, prob.lambdas[k]));
        w += theta(static_cast<Eigen::Index>(k)) *
             oracle::tikhonov_coefficients(prob.design, prob.penalty, prob.lambdas[k], y);
        CHECK(j["df"][k].get<double>() == doctest::Approx(dense[k].trace()).epsilon(1e-10));
        CHECK(j["cp"][k].get<double>() == doctest::Approx(oracle::cp(dense[k], y, 0.3)).epsilon(1e-10));
    }
    CHECK((json_vector(j["coefficients"]) - w).cwiseAbs().maxCoeff() < 1e-10);
    CHECK((json_vector(j["fitted"]) - oracle::combine(dense, theta) * y).cwiseAbs().maxCoeff() < 1e-10);
    CHECK(std::abs(sol.objective - oracle::brute_force_min(dense, y, 0.3, 1e-3)) < 1e-5);

    const nlohmann::json man = read_json(out / "manifest.json");
    CHECK(man["files"].size() == 4);
    for (const auto& f : man["files"]) {
        CHECK(f["sha256"].get<std::string>() == io::sha256_hex(io::read_text_file(out / f["path"].get<std::string>())));
    }
}

TEST_CASE("aggregate edge cases") {
    SUBCASE("single member") {
        const fs::path out = scratch("single");
        cli::AggregateArgs a = toy_args(out);
        a.lambdas = "1.0";
        std::ostringstream o;
        std::ostringstream e;
        REQUIRE(cli::cmd_aggregate(a, o, e) == cli::kOk);
        CHECK(read_json(out / "aggregate.json")["theta"] == nlohmann::json::array({1.0}));
    }
    SUBCASE("zero response gives zero coefficients") {
        const fs::path out = scratch("zero");
        fs::create_directories(out);
        io::write_text_file(out / "y.csv", "0\n0\n0\n0\n0\n");
        cli::AggregateArgs a = toy_args(out / "res");
        a.response = (out / "y.csv").string();
        a.lambdas = "geom:0.01:10:6";
        std::ostringstream o;
        std::ostringstream e;
        REQUIRE(cli::cmd_aggregate(a, o, e) == cli::kOk);
        CHECK(json_vector(read_json(out / "res" / "aggregate.json")["coefficients"]).cwiseAbs().maxCoeff() == 0.0);
    }
    SUBCASE("malformed inputs name the field") {
        auto check_field = [](cli::AggregateArgs a, const std::string& field) {
            std::ostringstream o;
            std::ostringstream e;
            CHECK(cli::cmd_aggregate(a, o, e) == cli::kInputError);
            CHECK(e.str().find(field) != std::string::npos);
        };
        const fs::path out = scratch("bad");
        cli::AggregateArgs a = toy_args(out);
        a.sigma = 0.0;
        check_field(a, "--sigma");
        a = toy_args(out);
        a.lambdas = "1,1";
        check_field(a, "--lambdas");
        a = toy_args(out);
        a.design = (kFixtures / "missing.csv").string();
        check_field(a, "--design");
        a = toy_args(out);
        a.response = (kFixtures / "toy_design.csv").string();
        check_field(a, "--response");
        a = toy_args(out);
        a.penalty = (kFixtures / "incomparable.csv").string();
        check_field(a, "--penalty");
    }
    SUBCASE("non-convergence writes partial output and exits 3") {
        const fs::path out = scratch("nonconv");
        cli::AggregateArgs a = toy_args(out);
        a.lambdas = "geom:0.001:1000:40";
        a.solver.max_iters = 1;
        a.solver.gradient_budget = 1;
        std::ostringstream o;
        std::ostringstream e;
        CHECK(cli::cmd_aggregate(a, o, e) == cli::kNonConvergence);
        CHECK_FALSE(read_json(out / "aggregate.json")["converged"].get<bool>());
        CHECK(fs::exists(out / "manifest.json"));
        CHECK(e.str().find("did not converge") != std::string::npos);
    }
}

TEST_CASE("bench command") {
    const fs::path out = scratch("bench");
    cli::BenchArgs b;
    b.config = (kFixtures / "bench_small.json").string();
    b.output = out.string();
    std::ostringstream o;
    std::ostringstream e;
    REQUIRE(cli::cmd_bench(b, o, e) == cli::kOk);
    const std::string first = io::read_text_file(out / "reports.csv");

    SUBCASE("byte-identical reruns") {
        b.threads = 1;
        REQUIRE(cli::cmd_bench(b, o, e) == cli::kOk);
        CHECK(io::read_text_file(out / "reports.csv") == first);
    }
    SUBCASE("seed override changes the draws") {
        b.seed = 8;
        REQUIRE(cli::cmd_bench(b, o, e) == cli::kOk);
        CHECK(io::read_text_file(out / "reports.csv") != first);
        CHECK(read_json(out / "manifest.json")["seed"].get<std::uint64_t>() == 8);
    }
    SUBCASE("reports round-trip") {
        const auto j = read_json(out / "reports.json");
        REQUIRE(j.size() == 1);
        const RegretReport r = report_from_json(j[0]);
        std::ostringstream csv;
        write_reports_csv(csv, {r});
        CHECK(csv.str() == first);
    }
    SUBCASE("sweeps") {
        b.sweep = "M";
        REQUIRE(cli::cmd_bench(b, o, e) == cli::kOk);
        CHECK(read_json(out / "reports.json").size() == 2);
        b.sweep = "q";
        REQUIRE(cli::cmd_bench(b, o, e) == cli::kOk);
        CHECK(read_json(out / "reports.json")[1]["q"] == 2);
        b.sweep = "x";
        CHECK(cli::cmd_bench(b, o, e) == cli::kInputError);
    }
    SUBCASE("config errors carry line or key") {
        fs::create_directories(out);
        io::write_text_file(out / "broken.json", "{\n  \"seed\": 1,\n  \"scenario\": [\n}\n");
        b.config = (out / "broken.json").string();
        std::ostringstream err;
        CHECK(cli::cmd_bench(b, o, err) == cli::kInputError);
        CHECK(err.str().find("line 4") != std::string::npos);
        io::write_text_file(out / "badkey.json",
                            R"({"scenario": {"n": 10, "sigma": 1}, "families": [{"lambdas": [1], "penalty": 3}]})");
        b.config = (out / "badkey.json").string();
        std::ostringstream err2;
        CHECK(cli::cmd_bench(b, o, err2) == cli::kInputError);
        CHECK(err2.str().find("families[0].penalty") != std::string::npos);
    }
}

TEST_CASE("validate command") {
    auto run = [](const std::string& file, std::string* text = nullptr) {
        cli::ValidateArgs v;
        v.matrices = (kFixtures / file).string();
        std::ostringstream o;
        std::ostringstream e;
        const int code = cli::cmd_validate(v, o, e);
        if (text) *text = o.str();
        return code;
    };
    CHECK(run("identity_zero.csv") == cli::kOk);
    std::string text;
    CHECK(run("incomparable.csv", &text) == cli::kValidationFailure);
    CHECK(text.find("totally-ordered") != std::string::npos);
    CHECK(text.find("FAIL") != std::string::npos);
    CHECK(run("tikhonov_family.csv") == cli::kOk);
    CHECK(run("toy_response.csv") == cli::kInputError);  // not square
    CHECK(run("does_not_exist.csv") == cli::kInputError);
}

TEST_CASE("executable exit codes") {
    const fs::path out = scratch("exe");
    const std::string fx = kFixtures.string();
    CHECK(run_tool("validate " + fx + "/identity_zero.csv") == 0);
    CHECK(run_tool("validate " + fx + "/incomparable.csv") == 1);
    CHECK(run_tool("validate " + fx + "/incomparable.csv --tol 2") == 0);
    CHECK(run_tool("aggregate --design " + fx + "/toy_design.csv --response " + fx +
                   "/toy_response.csv --lambdas geom:0.01:10:5 --sigma 0.3 --output " + out.string()) == 0);
    CHECK(run_tool("aggregate --design " + fx + "/toy_design.csv --response " + fx +
                   "/toy_response.csv --lambdas 1 --output " + out.string()) == 2);
    CHECK(run_tool("frobnicate") == 2);
    CHECK(run_tool("--help") == 0);
}
