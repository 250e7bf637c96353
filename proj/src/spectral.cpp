#include "qagg/spectral.hpp"

#include "qagg/error.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <string>

namespace qagg {

namespace {

constexpr double kRankCutoff = 1e-12;
constexpr double kOrthoTol = 1e-8;
constexpr double kAlphaTol = 1e-12;

std::string shape(const Eigen::MatrixXd& m) {
    std::ostringstream os;
    os << m.rows() << "x" << m.cols();
    return os.str();
}

// Members must be totally ordered: for every pair, one eigenvalue vector
// dominates the other coordinatewise.
void check_total_order(const Eigen::MatrixXd& alphas) {
    const Eigen::Index m = alphas.rows();
    for (Eigen::Index j = 0; j < m; ++j) {
        for (Eigen::Index k = j + 1; k < m; ++k) {
            const Eigen::RowVectorXd diff = alphas.row(j) - alphas.row(k);
            if (diff.size() == 0) continue;
            if (diff.minCoeff() < -kAlphaTol && diff.maxCoeff() > kAlphaTol) {
                std::ostringstream os;
                os << "members " << j << " and " << k << " are not ordered";
                throw InputError(os.str());
            }
        }
    }
}

}  // namespace

SpectralFamily::SpectralFamily(Eigen::MatrixXd basis, Eigen::MatrixXd alphas, int family_id)
    : basis_(std::move(basis)), alphas_(std::move(alphas)), family_id_(family_id) {
    if (alphas_.rows() == 0) throw InputError("family must have at least one member");
    if (alphas_.cols() != basis_.cols()) {
        throw InputError("alphas " + shape(alphas_) + " do not match basis " + shape(basis_));
    }
    if (basis_.cols() > basis_.rows()) throw InputError("basis has more columns than rows");
    const Eigen::MatrixXd gram = basis_.transpose() * basis_;
    const double ortho_err =
        (gram - Eigen::MatrixXd::Identity(gram.rows(), gram.cols())).cwiseAbs().maxCoeff();
    if (gram.size() > 0 && ortho_err > kOrthoTol) {
        throw InputError("basis columns are not orthonormal");
    }
    if (alphas_.size() > 0 &&
        (alphas_.minCoeff() < -kAlphaTol || alphas_.maxCoeff() > 1.0 + kAlphaTol ||
         !alphas_.allFinite())) {
        throw InputError("member eigenvalues must lie in [0, 1]");
    }
    check_total_order(alphas_);
    sing_vals_.resize(0);
}

Eigen::VectorXd SpectralFamily::project(const Eigen::VectorXd& v) const {
    if (static_cast<std::size_t>(v.size()) != dim()) {
        std::ostringstream os;
        os << "vector has length " << v.size() << ", family dimension is " << dim();
        throw InputError(os.str());
    }
    return basis_.transpose() * v;
}

double SpectralFamily::perp_norm_sq(const Eigen::VectorXd& v, const Eigen::VectorXd& coords) const {
    if (rank() == dim()) return 0.0;
    return (v - basis_ * coords).squaredNorm();
}

void SpectralFamily::check_index(std::size_t j) const {
    if (j >= size()) {
        std::ostringstream os;
        os << "member index " << j << " out of range (family has " << size() << " members)";
        throw InputError(os.str());
    }
}

std::vector<double> canonicalize_lambdas(std::vector<double> lambdas) {
    if (lambdas.empty()) throw InputError("lambda grid is empty");
    for (double l : lambdas) {
        if (!std::isfinite(l) || l < 0.0) {
            std::ostringstream os;
            os << "lambda must be finite and nonnegative, got " << l;
            throw InputError(os.str());
        }
    }
    std::sort(lambdas.begin(), lambdas.end());
    auto dup = std::adjacent_find(lambdas.begin(), lambdas.end());
    if (dup != lambdas.end()) {
        std::ostringstream os;
        os << "duplicate lambda " << *dup;
        throw InputError(os.str());
    }
    return lambdas;
}

Eigen::MatrixXd inverse_sqrt_spd(const Eigen::MatrixXd& penalty) {
    if (penalty.rows() != penalty.cols() || penalty.rows() == 0) {
        throw InputError("penalty must be a nonempty square matrix, got " + shape(penalty));
    }
    if (!penalty.allFinite()) throw InputError("penalty has non-finite entries");
    const Eigen::MatrixXd sym = 0.5 * (penalty + penalty.transpose());
    const double asym = (penalty - penalty.transpose()).cwiseAbs().maxCoeff();
    const double scale = std::max(1.0, penalty.cwiseAbs().maxCoeff());
    if (asym > 1e-8 * scale) {
        std::ostringstream os;
        os << "penalty is not symmetric (max asymmetry " << asym << ")";
        throw InputError(os.str());
    }
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(sym);
    if (eig.info() != Eigen::Success) throw NumericalError("eigendecomposition of penalty failed");
    const double smallest = eig.eigenvalues().minCoeff();
    if (!(smallest > 0.0)) {
        std::ostringstream os;
        os << "penalty is not positive definite (smallest eigenvalue " << smallest << ")";
        throw InputError(os.str());
    }
    const Eigen::VectorXd inv_sqrt = eig.eigenvalues().cwiseSqrt().cwiseInverse();
    return eig.eigenvectors() * inv_sqrt.asDiagonal() * eig.eigenvectors().transpose();
}

SpectralFamily build_tikhonov_family(const DesignProblem& problem, int family_id) {
    const Eigen::MatrixXd& x = problem.design;
    if (x.rows() == 0 || x.cols() == 0) throw InputError("design matrix is empty");
    if (!x.allFinite()) throw InputError("design has non-finite entries");
    if (problem.penalty.rows() != x.cols()) {
        throw InputError("penalty " + shape(problem.penalty) + " does not match design " + shape(x));
    }
    std::vector<double> grid = canonicalize_lambdas(problem.lambdas);
    const Eigen::MatrixXd k_inv_sqrt = inverse_sqrt_spd(problem.penalty);
    const Eigen::MatrixXd b = x * k_inv_sqrt;

    Eigen::BDCSVD<Eigen::MatrixXd> svd(b, Eigen::ComputeThinU | Eigen::ComputeThinV);
    if (svd.info() != Eigen::Success) throw NumericalError("SVD of X K^{-1/2} failed");
    const Eigen::VectorXd& s = svd.singularValues();
    const double s_max = s.size() > 0 ? s(0) : 0.0;
    Eigen::Index r = 0;
    while (r < s.size() && s(r) > kRankCutoff * s_max && s(r) > 0.0) ++r;

    SpectralFamily fam;
    fam.family_id_ = family_id;
    fam.basis_ = svd.matrixU().leftCols(r);
    fam.sing_vals_ = s.head(r);
    fam.lambdas_ = std::move(grid);
    const auto m = static_cast<Eigen::Index>(fam.lambdas_.size());
    fam.alphas_.resize(m, r);
    for (Eigen::Index j = 0; j < m; ++j) {
        const double lam = fam.lambdas_[static_cast<std::size_t>(j)];
        for (Eigen::Index i = 0; i < r; ++i) {
            const double s2 = s(i) * s(i);
            fam.alphas_(j, i) = lam == 0.0 ? 1.0 : s2 / (s2 + lam);
        }
    }
    fam.right_factor_ =
        k_inv_sqrt * svd.matrixV().leftCols(r) * fam.sing_vals_.cwiseInverse().asDiagonal();
    return fam;
}

Eigen::VectorXd apply_member(const SpectralFamily& family, std::size_t j, const Eigen::VectorXd& y) {
    family.check_index(j);
    const Eigen::VectorXd z = family.project(y);
    const Eigen::VectorXd a = family.alphas().row(static_cast<Eigen::Index>(j)).transpose();
    return family.basis() * a.cwiseProduct(z);
}

double degrees_of_freedom(const SpectralFamily& family, std::size_t j) {
    family.check_index(j);
    return family.alphas().row(static_cast<Eigen::Index>(j)).sum();
}

Eigen::MatrixXd materialize_member(const SpectralFamily& family, std::size_t j) {
    family.check_index(j);
    const Eigen::VectorXd a = family.alphas().row(static_cast<Eigen::Index>(j)).transpose();
    return family.basis() * a.asDiagonal() * family.basis().transpose();
}

Eigen::VectorXd recover_coefficients(const SpectralFamily& family, const Eigen::VectorXd& theta,
                                     const Eigen::VectorXd& y) {
    if (!family.right_factor()) {
        throw InputError("family has no coefficient-space factor (synthetic family)");
    }
    if (static_cast<std::size_t>(theta.size()) != family.size()) {
        throw InputError("weight vector length does not match family size");
    }
    const Eigen::VectorXd z = family.project(y);
    const Eigen::VectorXd mixed = family.alphas().transpose() * theta;
    return *family.right_factor() * mixed.cwiseProduct(z);
}

}  // namespace qagg
