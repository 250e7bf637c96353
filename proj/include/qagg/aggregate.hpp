#pragma once

#include "qagg/smoother.hpp"
#include "qagg/spectral.hpp"

#include <Eigen/Dense>

#include <cstddef>
#include <optional>
#include <vector>

namespace qagg {

/**
 * Fits of every candidate for one response y, expressed in an orthonormal
 * frame that contains all of them.
 *
 * For a single family the frame is the family's eigenbasis (d = r) and the
 * fit of member j has coordinates alphas(j, :) o U^T y. For a union of
 * families with different bases the frame is the identity on R^n.
 */
class CandidateFits {
public:
    CandidateFits(const SpectralFamily& family, const Eigen::VectorXd& y);
    CandidateFits(const FamilyUnion& candidates, const Eigen::VectorXd& y);

    [[nodiscard]] std::size_t size() const { return static_cast<std::size_t>(fits_.cols()); }
    [[nodiscard]] std::size_t dim() const { return n_; }
    [[nodiscard]] std::size_t frame_dim() const { return static_cast<std::size_t>(fits_.rows()); }

    /// d x M, column j = frame coordinates of A_j y.
    [[nodiscard]] const Eigen::MatrixXd& fits() const { return fits_; }
    /// Frame coordinates of y.
    [[nodiscard]] const Eigen::VectorXd& target() const { return target_; }
    /// ||y||^2 outside the frame.
    [[nodiscard]] double target_perp_sq() const { return target_perp_sq_; }
    /// trace(A_j) for every member.
    [[nodiscard]] const Eigen::VectorXd& df() const { return df_; }
    /// ||A_j y - y||^2 for every member.
    [[nodiscard]] const Eigen::VectorXd& residual_sq() const { return residual_sq_; }

    /// Frame coordinates of an arbitrary vector in R^n.
    [[nodiscard]] Eigen::VectorXd coords(const Eigen::VectorXd& v) const;
    /// ||v||^2 outside the frame given its coordinates.
    [[nodiscard]] double perp_sq(const Eigen::VectorXd& v, const Eigen::VectorXd& c) const;
    /// Maps frame coordinates back to R^n.
    [[nodiscard]] Eigen::VectorXd lift(const Eigen::VectorXd& c) const;

private:
    void finish();

    std::size_t n_ = 0;
    std::optional<Eigen::MatrixXd> basis_;  // empty = identity frame
    Eigen::MatrixXd fits_;
    Eigen::VectorXd target_;
    double target_perp_sq_ = 0.0;
    Eigen::VectorXd df_;
    Eigen::VectorXd residual_sq_;
};

/// A point of the simplex together with the aggregate fit A_theta y.
struct SimplexWeights {
    Eigen::VectorXd theta;
    Eigen::VectorXd fitted;
};

struct SolverOptions {
    int max_iters = 10000;
    /// Convergence when kkt_residual >= -kkt_tol * (1 + |objective|).
    double kkt_tol = 1e-7;
    /// Iterations of accelerated projected gradient before switching to the
    /// active-set finish.
    int gradient_budget = 400;
};

struct SolveReport {
    SimplexWeights weights;
    double objective = 0.0;
    double kkt_residual = 0.0;
    int iterations = 0;
    int gradient_iterations = 0;
    bool converged = false;
};

/// Euclidean projection onto the probability simplex.
Eigen::VectorXd project_to_simplex(const Eigen::VectorXd& v);

/// Clips tiny negatives and rescales to unit sum; throws InputError if theta is not
/// (numerically) in the simplex.
Eigen::VectorXd normalize_simplex(const Eigen::VectorXd& theta);

/// Mallows Cp: ||A_j y - y||^2 + 2 sigma^2 trace(A_j).
double cp_criterion(const SpectralFamily& family, std::size_t j, const Eigen::VectorXd& y, double sigma);
Eigen::VectorXd cp_values(const CandidateFits& fits, double sigma);

/// Convex form of the Q-aggregation objective:
///   1/2 ||A_theta y - y||^2 + 2 sigma^2 trace(A_theta) + 1/2 sum_j theta_j ||A_j y - y||^2.
double q_objective(const CandidateFits& fits, const Eigen::VectorXd& theta, double sigma);
double q_objective(const SpectralFamily& family, const Eigen::VectorXd& theta,
                   const Eigen::VectorXd& y, double sigma);

/// Penalized form Cp(A_theta) + 1/2 sum_j theta_j ||(A_theta - A_j) y||^2. Equal to
/// q_objective on the simplex; evaluated independently.
double q_objective_penalized(const CandidateFits& fits, const Eigen::VectorXd& theta, double sigma);
double q_objective_penalized(const SpectralFamily& family, const Eigen::VectorXd& theta,
                             const Eigen::VectorXd& y, double sigma);

/// Analytic gradient of q_objective.
Eigen::VectorXd q_gradient(const CandidateFits& fits, const Eigen::VectorXd& theta, double sigma);

/// min_k grad H(theta) . (e_k - theta). Nonnegative exactly at a minimizer.
double certify_kkt(const CandidateFits& fits, const Eigen::VectorXd& theta, double sigma);
double certify_kkt(const SpectralFamily& family, const Eigen::VectorXd& theta,
                   const Eigen::VectorXd& y, double sigma);

SolveReport solve_q_aggregation(const CandidateFits& fits, double sigma, const SolverOptions& opts = {});
SolveReport solve_q_aggregation(const SpectralFamily& family, const Eigen::VectorXd& y, double sigma,
                                const SolverOptions& opts = {});
SolveReport solve_q_aggregation(const FamilyUnion& candidates, const Eigen::VectorXd& y, double sigma,
                                const SolverOptions& opts = {});

/// argmin_j Cp, ties to the smallest index.
std::size_t select_cp(const CandidateFits& fits, double sigma);
std::size_t select_cp(const SpectralFamily& family, const Eigen::VectorXd& y, double sigma);

struct GcvChoice {
    std::size_t index = 0;
    /// Members dropped because trace(A_j) >= n - tol.
    std::vector<std::size_t> excluded;
};

/// argmin_j ||A_j y - y||^2 / (n - trace A_j)^2 over members with a
/// non-degenerate denominator. Throws InputError if every member is excluded.
GcvChoice select_gcv(const CandidateFits& fits);
GcvChoice select_gcv(const SpectralFamily& family, const Eigen::VectorXd& y);

/// theta_j proportional to exp(-Cp_j / temperature).
SimplexWeights exponential_weights(const CandidateFits& fits, double sigma, double temperature);
SimplexWeights exponential_weights(const SpectralFamily& family, const Eigen::VectorXd& y, double sigma,
                                   std::optional<double> temperature = std::nullopt);

/// A_theta y in R^n.
Eigen::VectorXd aggregate_fit(const CandidateFits& fits, const Eigen::VectorXd& theta);

/**
 * Both sides of the deterministic oracle inequality for the aggregate theta
 * against the vertex k, for a draw y = mu + eps with known mu and eps:
 *
 *   lhs = ||A_theta y - mu||^2 - ||A_k y - mu||^2
 *   rhs = max_j [ 2 eps^T (A_j - A_k) y - 2 sigma^2 tr(A_j - A_k) - 1/2 ||(A_j - A_k) y||^2 ]
 *
 * slack = max(0, -grad H(theta) . (e_k - theta)) absorbs inexact optimality.
 */
struct LemmaCheck {
    double lhs = 0.0;
    double rhs = 0.0;
    double slack = 0.0;
    [[nodiscard]] bool holds(double tol) const { return lhs <= rhs + slack + tol; }
};

LemmaCheck lemma_check(const CandidateFits& fits, const Eigen::VectorXd& theta, double sigma,
                       const Eigen::VectorXd& mu, const Eigen::VectorXd& eps, std::size_t k);

}  // namespace qagg
