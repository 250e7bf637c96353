#pragma once

#include "qagg/aggregate.hpp"
#include "qagg/smoother.hpp"
#include "qagg/spectral.hpp"

#include <Eigen/Dense>
#include <json.hpp>

#include <array>
#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

namespace qagg {

enum class Method { QAgg, CpSelect, Gcv, ExpWeights, Oracle };

const char* method_name(Method m);
Method parse_method(const std::string& name);

struct MeanSpec {
    enum class Shape { Zero, SpectralDecay, SingleSpike, Explicit };
    Shape shape = Shape::Zero;
    double rate = 1.0;             // spectral-decay: coefficient i ~ i^-rate
    std::size_t coordinate = 0;    // single-spike: basis vector index
    double amplitude = 1.0;        // scale when no risk target is given
    std::optional<double> target_oracle_risk;  // rescale so that R* hits this value
    Eigen::VectorXd values;        // explicit mean
};

struct PenaltySpec {
    enum class Kind { Identity, DiagPower, Diagonal };
    Kind kind = Kind::Identity;
    double power = 0.0;       // K = diag(i^power), i = 1..p
    Eigen::VectorXd diagonal;
};

struct GridSpec {
    enum class Kind { Geometric, Explicit };
    Kind kind = Kind::Geometric;
    double min = 1e-3;
    double max = 1e3;
    std::size_t count = 20;
    /// Multiply the grid by the mean squared singular value of X K^{-1/2}.
    bool relative = true;
    std::vector<double> values;

    [[nodiscard]] std::vector<double> resolve(double scale) const;
};

/// "geom:min:max:M" or a comma separated list. Absolute units.
GridSpec parse_grid_spec(const std::string& text);

struct FamilySpec {
    PenaltySpec penalty;
    GridSpec grid;
};

struct DesignSpec {
    enum class Kind { Gaussian, Explicit };
    Kind kind = Kind::Gaussian;
    std::size_t p = 30;
    Eigen::MatrixXd matrix;
};

struct SweepSpec {
    std::vector<std::size_t> m_values;
    std::vector<std::size_t> q_values;
    double penalty_spread = 2.0;
};

struct ExperimentConfig {
    std::string label = "experiment";
    std::size_t n = 50;
    double sigma = 1.0;
    MeanSpec mean;
    DesignSpec design;
    std::vector<FamilySpec> families;
    std::size_t replicates = 1;
    std::uint64_t seed = 0;
    std::vector<Method> methods{Method::QAgg, Method::CpSelect, Method::Gcv, Method::ExpWeights,
                                Method::Oracle};
    SolverOptions solver;
    std::optional<double> exp_weights_temperature;
    bool lemma_check = true;
    unsigned threads = 1;
    SweepSpec sweep;

    /// Throws InputError naming the offending field.
    void validate() const;
};

/// Parses the JSON experiment format. Errors carry the key path, syntax
/// errors the line and column.
ExperimentConfig parse_experiment_config(const std::string& text);
ExperimentConfig experiment_config_from_json(const nlohmann::json& j);
nlohmann::json experiment_config_to_json(const ExperimentConfig& config);

/// Deterministic instance: design, families, union and the Gaussian mean model.
struct Instance {
    Eigen::MatrixXd design;
    std::vector<DesignProblem> problems;
    FamilyUnion candidates;
    GroundTruth truth;
};

Instance build_instance(const ExperimentConfig& config);

struct MethodSummary {
    Method method = Method::QAgg;
    std::size_t count = 0;
    double mean_risk = 0.0;
    double std_error = 0.0;
    double regret = 0.0;
    double ci_half_width = 0.0;
    /// Quantiles {0.5, 0.9, 0.99} of ||fit - mu||^2 - ||A_{j*} y - mu||^2.
    std::array<double, 3> excess_quantiles{};
};

inline constexpr std::array<double, 3> kExcessLevels{0.5, 0.9, 0.99};
inline constexpr double kCiZ = 1.959963984540054;

struct RegretReport {
    std::string label;
    std::size_t n = 0;
    std::size_t members = 0;  // M
    std::size_t families = 0; // q
    double sigma = 0.0;
    std::uint64_t seed = 0;
    std::size_t replicates = 0;
    double r_star = 0.0;
    std::size_t oracle_index = 0;
    std::vector<MethodSummary> methods;
    std::size_t nonconverged = 0;
    std::vector<std::size_t> excluded_replicates;
    std::size_t lemma_checks = 0;
    std::size_t lemma_violations = 0;
    double max_lemma_excess = 0.0;  // max over draws of lhs - rhs - slack
    double mean_solver_iterations = 0.0;
    double runtime_seconds = 0.0;

    [[nodiscard]] const MethodSummary* find(Method m) const;
};

/// Per-replicate outcome kept for paired comparisons and tests.
struct ReplicateRecord {
    std::vector<double> loss;  // aligned with config.methods
    double oracle_loss = 0.0;
    bool converged = true;
    int iterations = 0;
    bool lemma_checked = false;
    double lemma_excess = 0.0;
};

struct ExperimentRun {
    RegretReport report;
    std::vector<ReplicateRecord> replicates;
};

/// Runs every replicate: eps ~ N(0, sigma^2 I) from a stream seeded by
/// (seed, replicate), y = mu + eps, then each configured method.
ExperimentRun run_experiment_detailed(const ExperimentConfig& config);
RegretReport run_experiment(const ExperimentConfig& config);

/// Resolves the mean once on the base configuration and varies the grid size.
std::vector<RegretReport> regret_vs_m_sweep(const ExperimentConfig& base, const std::vector<std::size_t>& m_values);

/// Resolves the mean once on the base configuration and runs q diagonal
/// penalty families K = diag(i^s), with nested exponents s, each with the
/// base grid.
std::vector<RegretReport> regret_vs_q_sweep(const ExperimentConfig& base, const std::vector<std::size_t>& q_values);

/// Exponent of the m-th family in a q sweep: 0, 1, -1, 1/2, -1/2, 1/4, ... times spread.
double sweep_penalty_power(std::size_t m, double spread);

/// Fixes the mean of a configuration to the explicit vector it resolves to.
ExperimentConfig with_resolved_mean(const ExperimentConfig& config);

nlohmann::json report_to_json(const RegretReport& report);
RegretReport report_from_json(const nlohmann::json& j);

void write_reports_csv(std::ostream& os, const std::vector<RegretReport>& reports);

/// Linear-interpolation empirical quantile of unsorted data.
double empirical_quantile(std::vector<double> data, double level);

}  // namespace qagg
