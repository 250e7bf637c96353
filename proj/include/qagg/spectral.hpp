#pragma once

#include <Eigen/Dense>

#include <cstddef>
#include <optional>
#include <vector>

namespace qagg {

/**
 * Tikhonov problem data: design X (n x p), penalty K (p x p, SPD) and the
 * tuning grid. The grid is canonicalized on construction of a family
 * (sorted ascending, exact duplicates rejected).
 */
struct DesignProblem {
    Eigen::MatrixXd design;
    Eigen::MatrixXd penalty;
    std::vector<double> lambdas;
};

/**
 * A family of simultaneously diagonalizable linear smoothers
 *
 *   A_j = sum_i alphas(j, i) u_i u_i^T,
 *
 * stored through the shared orthonormal basis U (n x r) and the eigenvalue
 * table alphas (M x r). Everything downstream (fits, traces, risks, Cp)
 * reduces to O(n r) or O(r M) work in this representation.
 *
 * Families built from a DesignProblem also carry a coefficient map so that
 * aggregated fits can be mapped back to a weight vector in R^p.
 *
 * Instances are immutable.
 */
class SpectralFamily {
public:
    /// Synthetic family from an explicit basis and eigenvalue table.
    /// Validates orthonormality, the [0,1] range and the total PSD order
    /// between members. Throws InputError on violation.
    SpectralFamily(Eigen::MatrixXd basis, Eigen::MatrixXd alphas, int family_id = 0);

    [[nodiscard]] std::size_t dim() const { return static_cast<std::size_t>(basis_.rows()); }
    [[nodiscard]] std::size_t rank() const { return static_cast<std::size_t>(basis_.cols()); }
    [[nodiscard]] std::size_t size() const { return static_cast<std::size_t>(alphas_.rows()); }

    [[nodiscard]] const Eigen::MatrixXd& basis() const { return basis_; }
    [[nodiscard]] const Eigen::MatrixXd& alphas() const { return alphas_; }
    /// Singular values of B = X K^{-1/2} kept after rank truncation (empty for synthetic families).
    [[nodiscard]] const Eigen::VectorXd& sing_vals() const { return sing_vals_; }
    /// Canonical tuning grid (empty for synthetic families).
    [[nodiscard]] const std::vector<double>& lambdas() const { return lambdas_; }
    /// p x r map taking spectral fit coordinates (alpha_j o U^T y) to w_hat(K, lambda_j).
    [[nodiscard]] const std::optional<Eigen::MatrixXd>& right_factor() const { return right_factor_; }
    [[nodiscard]] int family_id() const { return family_id_; }

    /// Coordinates U^T v; throws InputError on length mismatch.
    [[nodiscard]] Eigen::VectorXd project(const Eigen::VectorXd& v) const;
    /// ||v - U U^T v||^2 given precomputed coordinates.
    [[nodiscard]] double perp_norm_sq(const Eigen::VectorXd& v, const Eigen::VectorXd& coords) const;

    void check_index(std::size_t j) const;

    friend SpectralFamily build_tikhonov_family(const DesignProblem& problem, int family_id);

private:
    SpectralFamily() = default;

    Eigen::MatrixXd basis_;
    Eigen::VectorXd sing_vals_;
    Eigen::MatrixXd alphas_;
    std::vector<double> lambdas_;
    std::optional<Eigen::MatrixXd> right_factor_;
    int family_id_ = 0;
};

/// Sorts the grid ascending; throws InputError on negative, non-finite or duplicate values.
std::vector<double> canonicalize_lambdas(std::vector<double> lambdas);

/// Builds the Tikhonov family A_j = X (X^T X + lambda_j K)^{-1} X^T via the SVD of X K^{-1/2}.
/// Singular values below 1e-12 * max are truncated; lambda = 0 then gives the
/// minimum-norm least-squares fit.
SpectralFamily build_tikhonov_family(const DesignProblem& problem, int family_id = 0);

/// A_j y.
Eigen::VectorXd apply_member(const SpectralFamily& family, std::size_t j, const Eigen::VectorXd& y);

/// trace(A_j).
double degrees_of_freedom(const SpectralFamily& family, std::size_t j);

/// Dense n x n matrix of member j. Intended for validation and small problems.
Eigen::MatrixXd materialize_member(const SpectralFamily& family, std::size_t j);

/// w_tilde = sum_j theta_j w_hat(K, lambda_j) for the response y.
/// Throws InputError when the family has no coefficient map.
Eigen::VectorXd recover_coefficients(const SpectralFamily& family, const Eigen::VectorXd& theta,
                                     const Eigen::VectorXd& y);

/// K^{-1/2} for a symmetric positive-definite K. Symmetrizes first; throws
/// InputError naming the smallest eigenvalue if K is not positive definite.
Eigen::MatrixXd inverse_sqrt_spd(const Eigen::MatrixXd& penalty);

}  // namespace qagg
