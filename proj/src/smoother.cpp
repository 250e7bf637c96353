#include "qagg/smoother.hpp"

#include "qagg/error.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>

namespace qagg {

void GroundTruth::validate() const {
    if (!(sigma > 0.0) || !std::isfinite(sigma)) throw InputError("sigma must be positive");
    if (mu.size() == 0) throw InputError("mean vector is empty");
    if (!mu.allFinite()) throw InputError("mean vector has non-finite entries");
}

FamilyUnion::FamilyUnion(std::vector<FamilyPtr> families) : families_(std::move(families)) {
    if (families_.empty()) throw InputError("family union is empty");
    std::set<int> ids;
    offsets_.push_back(0);
    for (const auto& f : families_) {
        if (!f) throw InputError("null family in union");
        if (f->dim() != families_.front()->dim()) {
            throw InputError("families in a union must share the dimension n");
        }
        ids.insert(f->family_id());
        offsets_.push_back(offsets_.back() + f->size());
    }
    q_ = ids.size();
}

FamilyUnion::FamilyUnion(SpectralFamily family)
    : FamilyUnion(std::vector<FamilyPtr>{std::make_shared<const SpectralFamily>(std::move(family))}) {}

std::pair<std::size_t, std::size_t> FamilyUnion::locate(std::size_t j) const {
    if (j >= size()) {
        std::ostringstream os;
        os << "member index " << j << " out of range (union has " << size() << " members)";
        throw InputError(os.str());
    }
    auto it = std::upper_bound(offsets_.begin(), offsets_.end(), j);
    const auto pos = static_cast<std::size_t>(std::distance(offsets_.begin(), it) - 1);
    return {pos, j - offsets_[pos]};
}

double default_ordered_tolerance(const std::vector<Eigen::MatrixXd>& matrices) {
    double scale = 1.0;
    for (const auto& a : matrices) {
        if (a.size() == 0 || a.rows() != a.cols()) continue;
        const Eigen::MatrixXd sym = 0.5 * (a + a.transpose());
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(sym, Eigen::EigenvaluesOnly);
        scale = std::max(scale, eig.eigenvalues().cwiseAbs().maxCoeff());
    }
    return 1e-8 * scale;
}

namespace {

double min_eigenvalue(const Eigen::MatrixXd& sym) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(sym, Eigen::EigenvaluesOnly);
    return eig.eigenvalues().minCoeff();
}

}  // namespace

OrderedReport check_ordered(const std::vector<Eigen::MatrixXd>& matrices, double tol) {
    if (matrices.empty()) throw InputError("no matrices to check");
    if (!(tol > 0.0)) throw InputError("tolerance must be positive");
    const Eigen::Index n = matrices.front().rows();
    for (std::size_t j = 0; j < matrices.size(); ++j) {
        const auto& a = matrices[j];
        if (a.rows() != a.cols() || a.rows() != n || n == 0) {
            std::ostringstream os;
            os << "matrix " << j << " is " << a.rows() << "x" << a.cols() << ", expected " << n
               << "x" << n;
            throw InputError(os.str());
        }
    }

    OrderedReport report;
    report.tol = tol;
    std::vector<Eigen::MatrixXd> sym;
    sym.reserve(matrices.size());

    for (std::size_t j = 0; j < matrices.size(); ++j) {
        const auto& a = matrices[j];
        const double asym = (a - a.transpose()).cwiseAbs().maxCoeff();
        sym.emplace_back(0.5 * (a + a.transpose()));
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(sym.back(), Eigen::EigenvaluesOnly);
        const double lo = eig.eigenvalues().minCoeff();
        const double hi = eig.eigenvalues().maxCoeff();
        const double violation = std::max({asym, -lo, hi - 1.0, 0.0});
        report.symmetric_unit_spectrum.worst =
            std::max(report.symmetric_unit_spectrum.worst, violation);
        if (violation > tol && report.symmetric_unit_spectrum.pass) {
            report.symmetric_unit_spectrum.pass = false;
            std::ostringstream os;
            os << "matrix " << j << ": asymmetry " << asym << ", spectrum [" << lo << ", " << hi << "]";
            report.symmetric_unit_spectrum.detail = os.str();
        }
    }

    for (std::size_t j = 0; j < matrices.size(); ++j) {
        for (std::size_t k = j + 1; k < matrices.size(); ++k) {
            const auto& a = matrices[j];
            const auto& b = matrices[k];
            const double comm = (a * b - b * a).norm();
            report.commuting.worst = std::max(report.commuting.worst, comm);
            if (comm > tol && report.commuting.pass) {
                report.commuting.pass = false;
                std::ostringstream os;
                os << "matrices " << j << " and " << k << " do not commute (" << comm << ")";
                report.commuting.detail = os.str();
            }

            const Eigen::MatrixXd diff = sym[j] - sym[k];
            const double forward = min_eigenvalue(diff);
            const double backward = min_eigenvalue(-diff);
            const double gap = -std::max(forward, backward);
            report.totally_ordered.worst = std::max(report.totally_ordered.worst, std::max(gap, 0.0));
            if (gap > tol && report.totally_ordered.pass) {
                report.totally_ordered.pass = false;
                std::ostringstream os;
                os << "matrices " << j << " and " << k << " are not comparable in the PSD order";
                report.totally_ordered.detail = os.str();
            }
        }
    }
    return report;
}

namespace {

void check_truth(const SpectralFamily& family, const GroundTruth& truth) {
    truth.validate();
    if (truth.n() != family.dim()) {
        std::ostringstream os;
        os << "mean has length " << truth.n() << ", family dimension is " << family.dim();
        throw InputError(os.str());
    }
}

}  // namespace

RiskParts risk_decomposition(const SpectralFamily& family, std::size_t j, const GroundTruth& truth) {
    family.check_index(j);
    check_truth(family, truth);
    const Eigen::VectorXd m = family.project(truth.mu);
    const Eigen::VectorXd a = family.alphas().row(static_cast<Eigen::Index>(j)).transpose();
    RiskParts parts;
    parts.variance = truth.sigma * truth.sigma * a.squaredNorm();
    parts.bias = (a.array() - 1.0).square().matrix().dot(m.cwiseAbs2()) +
                 family.perp_norm_sq(truth.mu, m);
    return parts;
}

double exact_risk(const SpectralFamily& family, std::size_t j, const GroundTruth& truth) {
    return risk_decomposition(family, j, truth).total();
}

double exact_risk(const FamilyUnion& candidates, std::size_t j, const GroundTruth& truth) {
    const auto [pos, local] = candidates.locate(j);
    return exact_risk(*candidates.families()[pos], local, truth);
}

double pair_distance(const SpectralFamily& family, std::size_t j, std::size_t k,
                     const GroundTruth& truth) {
    family.check_index(j);
    family.check_index(k);
    check_truth(family, truth);
    const Eigen::VectorXd m = family.project(truth.mu);
    const Eigen::VectorXd d = (family.alphas().row(static_cast<Eigen::Index>(j)) -
                               family.alphas().row(static_cast<Eigen::Index>(k)))
                                  .transpose();
    const double frob = d.squaredNorm();
    const double shift = d.cwiseProduct(m).squaredNorm();
    return std::sqrt(truth.sigma * truth.sigma * frob + shift);
}

OracleChoice oracle_index(const SpectralFamily& family, const GroundTruth& truth) {
    check_truth(family, truth);
    const Eigen::VectorXd m = family.project(truth.mu);
    const double perp = family.perp_norm_sq(truth.mu, m);
    const double s2 = truth.sigma * truth.sigma;
    const Eigen::ArrayXd m2 = m.cwiseAbs2().array();
    OracleChoice best{0, 0.0};
    for (std::size_t j = 0; j < family.size(); ++j) {
        const Eigen::ArrayXd a = family.alphas().row(static_cast<Eigen::Index>(j)).transpose().array();
        const double risk = s2 * a.square().sum() + ((a - 1.0).square() * m2).sum() + perp;
        if (j == 0 || risk < best.risk) best = {j, risk};
    }
    return best;
}

OracleChoice oracle_index(const FamilyUnion& candidates, const GroundTruth& truth) {
    OracleChoice best{0, 0.0};
    for (std::size_t f = 0; f < candidates.families().size(); ++f) {
        const OracleChoice local = oracle_index(*candidates.families()[f], truth);
        const std::size_t global = candidates.offset(f) + local.index;
        if (f == 0 || local.risk < best.risk) best = {global, local.risk};
    }
    return best;
}

}  // namespace qagg
