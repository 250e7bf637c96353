#pragma once

#include "qagg/spectral.hpp"

#include <Eigen/Dense>

#include <cstddef>
#include <memory>
#include <string>
#include <utility>
#include <vector>

namespace qagg {

/// Gaussian mean model y = mu + eps, eps ~ N(0, sigma^2 I_n).
struct GroundTruth {
    Eigen::VectorXd mu;
    double sigma = 1.0;

    [[nodiscard]] std::size_t n() const { return static_cast<std::size_t>(mu.size()); }
    /// Throws InputError unless sigma > 0 and mu is finite.
    void validate() const;
};

/**
 * Candidate set F_1 u ... u F_q made of several ordered families, each
 * with its own eigenbasis. Members are addressed by a global index that
 * runs over the families in insertion order.
 */
class FamilyUnion {
public:
    using FamilyPtr = std::shared_ptr<const SpectralFamily>;

    explicit FamilyUnion(std::vector<FamilyPtr> families);
    explicit FamilyUnion(SpectralFamily family);

    [[nodiscard]] const std::vector<FamilyPtr>& families() const { return families_; }
    /// Total number of members M.
    [[nodiscard]] std::size_t size() const { return offsets_.back(); }
    [[nodiscard]] std::size_t dim() const { return families_.front()->dim(); }
    /// Number of distinct family ids.
    [[nodiscard]] std::size_t q() const { return q_; }

    /// (family position, member index within that family) for global index j.
    [[nodiscard]] std::pair<std::size_t, std::size_t> locate(std::size_t j) const;
    [[nodiscard]] std::size_t offset(std::size_t family_pos) const { return offsets_[family_pos]; }

private:
    std::vector<FamilyPtr> families_;
    std::vector<std::size_t> offsets_;
    std::size_t q_ = 0;
};

struct AxiomResult {
    bool pass = true;
    double worst = 0.0;  // worst observed violation measure
    std::string detail;
};

/// Outcome of checking the three ordered-smoother axioms on explicit matrices.
struct OrderedReport {
    AxiomResult symmetric_unit_spectrum;  // (i)
    AxiomResult commuting;                // (ii)
    AxiomResult totally_ordered;          // (iii)
    double tol = 0.0;

    [[nodiscard]] bool pass() const {
        return symmetric_unit_spectrum.pass && commuting.pass && totally_ordered.pass;
    }
};

/// 1e-8 times the largest absolute eigenvalue over the list (at least 1e-8).
double default_ordered_tolerance(const std::vector<Eigen::MatrixXd>& matrices);

/// Checks (i) symmetry and spectrum in [0,1], (ii) pairwise commutation in
/// Frobenius norm and (iii) pairwise PSD comparability, all within tol.
/// Throws InputError for an empty list, non-square or mismatched matrices, or tol <= 0.
OrderedReport check_ordered(const std::vector<Eigen::MatrixXd>& matrices, double tol);

struct RiskParts {
    double variance = 0.0;  // sigma^2 ||A||_F^2
    double bias = 0.0;      // ||(A - I) mu||^2, including the part of mu outside the basis
    [[nodiscard]] double total() const { return variance + bias; }
};

RiskParts risk_decomposition(const SpectralFamily& family, std::size_t j, const GroundTruth& truth);

/// E ||A_j y - mu||^2.
double exact_risk(const SpectralFamily& family, std::size_t j, const GroundTruth& truth);
double exact_risk(const FamilyUnion& candidates, std::size_t j, const GroundTruth& truth);

/// d(A_j, A_k) = sqrt(sigma^2 ||A_j - A_k||_F^2 + ||(A_j - A_k) mu||^2).
double pair_distance(const SpectralFamily& family, std::size_t j, std::size_t k,
                     const GroundTruth& truth);

struct OracleChoice {
    std::size_t index = 0;
    double risk = 0.0;
};

/// Member of smallest exact risk; ties go to the smallest index.
OracleChoice oracle_index(const SpectralFamily& family, const GroundTruth& truth);
OracleChoice oracle_index(const FamilyUnion& candidates, const GroundTruth& truth);

}  // namespace qagg
