#include "qagg/aggregate.hpp"

#include "qagg/error.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <sstream>

namespace qagg {

namespace {

void check_sigma(double sigma) {
    if (!(sigma > 0.0) || !std::isfinite(sigma)) {
        std::ostringstream os;
        os << "sigma must be positive, got " << sigma;
        throw InputError(os.str());
    }
}

void check_theta(const CandidateFits& fits, const Eigen::VectorXd& theta) {
    if (static_cast<std::size_t>(theta.size()) != fits.size()) {
        std::ostringstream os;
        os << "weight vector has length " << theta.size() << ", expected " << fits.size();
        throw InputError(os.str());
    }
}

}  // namespace

// ---------------------------------------------------------------------------
// CandidateFits

CandidateFits::CandidateFits(const SpectralFamily& family, const Eigen::VectorXd& y) : n_(family.dim()) {
    target_ = family.project(y);
    target_perp_sq_ = family.perp_norm_sq(y, target_);
    basis_ = family.basis();
    fits_ = target_.asDiagonal() * family.alphas().transpose();
    df_ = family.alphas().rowwise().sum();
    finish();
}

CandidateFits::CandidateFits(const FamilyUnion& candidates, const Eigen::VectorXd& y) {
    if (candidates.families().size() == 1) {
        *this = CandidateFits(*candidates.families().front(), y);
        return;
    }
    n_ = candidates.dim();
    if (static_cast<std::size_t>(y.size()) != n_) {
        std::ostringstream os;
        os << "response has length " << y.size() << ", expected " << n_;
        throw InputError(os.str());
    }
    target_ = y;
    target_perp_sq_ = 0.0;
    const auto m = static_cast<Eigen::Index>(candidates.size());
    fits_.resize(static_cast<Eigen::Index>(n_), m);
    df_.resize(m);
    for (std::size_t f = 0; f < candidates.families().size(); ++f) {
        const SpectralFamily& fam = *candidates.families()[f];
        const Eigen::VectorXd z = fam.project(y);
        const auto off = static_cast<Eigen::Index>(candidates.offset(f));
        const auto mf = static_cast<Eigen::Index>(fam.size());
        fits_.middleCols(off, mf) = fam.basis() * (z.asDiagonal() * fam.alphas().transpose());
        df_.segment(off, mf) = fam.alphas().rowwise().sum();
    }
    finish();
}

void CandidateFits::finish() {
    residual_sq_ = (fits_.colwise() - target_).colwise().squaredNorm().transpose();
    residual_sq_.array() += target_perp_sq_;
}

Eigen::VectorXd CandidateFits::coords(const Eigen::VectorXd& v) const {
    if (static_cast<std::size_t>(v.size()) != n_) {
        std::ostringstream os;
        os << "vector has length " << v.size() << ", expected " << n_;
        throw InputError(os.str());
    }
    return basis_ ? Eigen::VectorXd(basis_->transpose() * v) : v;
}

double CandidateFits::perp_sq(const Eigen::VectorXd& v, const Eigen::VectorXd& c) const {
    if (!basis_ || static_cast<std::size_t>(basis_->cols()) == n_) return 0.0;
    return (v - *basis_ * c).squaredNorm();
}

Eigen::VectorXd CandidateFits::lift(const Eigen::VectorXd& c) const {
    return basis_ ? Eigen::VectorXd(*basis_ * c) : c;
}

// ---------------------------------------------------------------------------
// Simplex helpers

Eigen::VectorXd project_to_simplex(const Eigen::VectorXd& v) {
    const Eigen::Index m = v.size();
    if (m == 0) throw InputError("cannot project an empty vector");
    std::vector<double> sorted(v.data(), v.data() + m);
    std::sort(sorted.begin(), sorted.end(), std::greater<>());
    double cumsum = 0.0;
    double shift = 0.0;
    for (Eigen::Index i = 0; i < m; ++i) {
        cumsum += sorted[static_cast<std::size_t>(i)];
        const double candidate = (cumsum - 1.0) / static_cast<double>(i + 1);
        if (sorted[static_cast<std::size_t>(i)] - candidate > 0.0) shift = candidate;
    }
    return (v.array() - shift).max(0.0).matrix();
}

Eigen::VectorXd normalize_simplex(const Eigen::VectorXd& theta) {
    if (theta.size() == 0) throw InputError("weight vector is empty");
    if (!theta.allFinite()) throw InputError("weight vector has non-finite entries");
    if (theta.minCoeff() < -1e-9) throw InputError("weights must be nonnegative");
    Eigen::VectorXd out = theta.cwiseMax(0.0);
    const double total = out.sum();
    if (std::abs(total - 1.0) > 1e-6) {
        std::ostringstream os;
        os << "weights must sum to 1, got " << total;
        throw InputError(os.str());
    }
    return out / total;
}

// ---------------------------------------------------------------------------
// Criteria and objective

Eigen::VectorXd cp_values(const CandidateFits& fits, double sigma) {
    check_sigma(sigma);
    return fits.residual_sq() + 2.0 * sigma * sigma * fits.df();
}

double cp_criterion(const SpectralFamily& family, std::size_t j, const Eigen::VectorXd& y, double sigma) {
    check_sigma(sigma);
    family.check_index(j);
    const Eigen::VectorXd z = family.project(y);
    const Eigen::ArrayXd a = family.alphas().row(static_cast<Eigen::Index>(j)).transpose().array();
    const double residual = ((a - 1.0).square() * z.array().square()).sum() + family.perp_norm_sq(y, z);
    return residual + 2.0 * sigma * sigma * a.sum();
}

double q_objective(const CandidateFits& fits, const Eigen::VectorXd& theta, double sigma) {
    check_sigma(sigma);
    check_theta(fits, theta);
    const double misfit = (fits.fits() * theta - fits.target()).squaredNorm() + fits.target_perp_sq();
    return 0.5 * misfit + 2.0 * sigma * sigma * fits.df().dot(theta) + 0.5 * fits.residual_sq().dot(theta);
}

double q_objective(const SpectralFamily& family, const Eigen::VectorXd& theta, const Eigen::VectorXd& y,
                   double sigma) {
    return q_objective(CandidateFits(family, y), theta, sigma);
}

double q_objective_penalized(const CandidateFits& fits, const Eigen::VectorXd& theta, double sigma) {
    check_sigma(sigma);
    check_theta(fits, theta);
    const Eigen::VectorXd mixed = fits.fits() * theta;
    const double cp = (mixed - fits.target()).squaredNorm() + fits.target_perp_sq() +
                      2.0 * sigma * sigma * fits.df().dot(theta);
    double penalty = 0.0;
    for (Eigen::Index j = 0; j < theta.size(); ++j) {
        if (theta(j) == 0.0) continue;
        penalty += theta(j) * (mixed - fits.fits().col(j)).squaredNorm();
    }
    return cp + 0.5 * penalty;
}

double q_objective_penalized(const SpectralFamily& family, const Eigen::VectorXd& theta,
                             const Eigen::VectorXd& y, double sigma) {
    return q_objective_penalized(CandidateFits(family, y), theta, sigma);
}

namespace {

// H(theta) = 1/2 ||G theta - t||^2 + 1/2 c0 + lin^T theta
struct QuadraticModel {
    const Eigen::MatrixXd& g;
    const Eigen::VectorXd& t;
    double c0;
    Eigen::VectorXd lin;

    QuadraticModel(const CandidateFits& fits, double sigma)
        : g(fits.fits()),
          t(fits.target()),
          c0(fits.target_perp_sq()),
          lin(2.0 * sigma * sigma * fits.df() + 0.5 * fits.residual_sq()) {}

    [[nodiscard]] double value_from_fit(const Eigen::VectorXd& g_theta, const Eigen::VectorXd& theta) const {
        return 0.5 * ((g_theta - t).squaredNorm() + c0) + lin.dot(theta);
    }
    [[nodiscard]] Eigen::VectorXd gradient_from_fit(const Eigen::VectorXd& g_theta) const {
        return g.transpose() * (g_theta - t) + lin;
    }
};

double kkt_from_gradient(const Eigen::VectorXd& grad, const Eigen::VectorXd& theta) {
    return grad.minCoeff() - grad.dot(theta);
}

double largest_eigenvalue_gram(const Eigen::MatrixXd& g) {
    const Eigen::Index m = g.cols();
    Eigen::VectorXd v = Eigen::VectorXd::Constant(m, 1.0 / std::sqrt(static_cast<double>(m)));
    double estimate = 0.0;
    for (int it = 0; it < 60; ++it) {
        const Eigen::VectorXd gv = g * v;
        estimate = gv.squaredNorm();
        Eigen::VectorXd next = g.transpose() * gv;
        const double norm = next.norm();
        if (norm == 0.0) break;
        next /= norm;
        if ((next - v).norm() < 1e-10) {
            v = next;
            estimate = (g * v).squaredNorm();
            break;
        }
        v = next;
    }
    return estimate;
}

struct Iterate {
    Eigen::VectorXd theta;
    Eigen::VectorXd g_theta;
    double objective = 0.0;
    double kkt = -std::numeric_limits<double>::infinity();
};

bool certified(double kkt, double objective, double tol) {
    return kkt >= -tol * (1.0 + std::abs(objective));
}

// Accelerated projected gradient with gradient-based restart and
// backtracking on the step size.
int run_gradient_phase(const QuadraticModel& model, Iterate& best, int budget, double tol) {
    double lipschitz = std::max(1.01 * largest_eigenvalue_gram(model.g), 1e-300);
    Eigen::VectorXd x = best.theta;
    Eigen::VectorXd gx = best.g_theta;
    Eigen::VectorXd x_prev = x;
    Eigen::VectorXd gx_prev = gx;
    double momentum = 1.0;
    double beta = 0.0;
    int it = 0;
    for (; it < budget; ++it) {
        const Eigen::VectorXd yv = x + beta * (x - x_prev);
        const Eigen::VectorXd gy = gx + beta * (gx - gx_prev);
        const Eigen::VectorXd grad = model.gradient_from_fit(gy);

        Eigen::VectorXd x_new;
        Eigen::VectorXd gx_new;
        for (;;) {
            x_new = project_to_simplex(yv - grad / lipschitz);
            const Eigen::VectorXd step = x_new - yv;
            const Eigen::VectorXd g_step = model.g * step;
            gx_new = gy + g_step;
            if (g_step.squaredNorm() <= lipschitz * step.squaredNorm() * (1.0 + 1e-10) + 1e-300) break;
            lipschitz *= 2.0;
        }

        const bool restart = (yv - x_new).dot(x_new - x) > 0.0;
        x_prev = std::move(x);
        gx_prev = std::move(gx);
        x = std::move(x_new);
        gx = std::move(gx_new);
        if (restart) {
            momentum = 1.0;
            beta = 0.0;
        } else {
            const double next = 0.5 * (1.0 + std::sqrt(1.0 + 4.0 * momentum * momentum));
            beta = (momentum - 1.0) / next;
            momentum = next;
        }

        if ((it + 1) % 10 == 0 || it + 1 == budget) {
            const double obj = model.value_from_fit(gx, x);
            if (obj <= best.objective) {
                const double kkt = kkt_from_gradient(model.gradient_from_fit(gx), x);
                best = {x, gx, obj, kkt};
                if (certified(kkt, obj, tol)) return it + 1;
            }
        }
    }
    return it;
}

// Active-set finish: Newton steps on the current face of the simplex, and
// Frank-Wolfe steps toward the most promising vertex once the face is
// stationary. Every step uses an exact line search, so the objective is
// monotone.
int run_active_set_phase(const QuadraticModel& model, Iterate& cur, int budget, double tol) {
    const Eigen::Index m = cur.theta.size();
    int it = 0;
    for (; it < budget; ++it) {
        const Eigen::VectorXd grad = model.gradient_from_fit(cur.g_theta);
        cur.objective = model.value_from_fit(cur.g_theta, cur.theta);
        cur.kkt = kkt_from_gradient(grad, cur.theta);
        if (certified(cur.kkt, cur.objective, tol)) return it;

        std::vector<Eigen::Index> support;
        for (Eigen::Index j = 0; j < m; ++j) {
            if (cur.theta(j) > 0.0) support.push_back(j);
        }
        const double slope_floor = 1e-14 * (1.0 + std::abs(cur.objective));

        // Exact line search along dir, clipped at the first coordinate that
        // hits zero. Accepts the step only if the objective does not rise.
        auto try_step = [&](const Eigen::VectorXd& dir, double slope, double max_step) {
            const Eigen::VectorXd g_dir = model.g * dir;
            const double curvature = g_dir.squaredNorm();
            double step = curvature > 0.0 ? -slope / curvature : std::numeric_limits<double>::infinity();
            Eigen::Index blocking = -1;
            for (Eigen::Index j = 0; j < m; ++j) {
                if (dir(j) < 0.0) {
                    const double limit = cur.theta(j) / -dir(j);
                    if (limit < max_step) {
                        max_step = limit;
                        blocking = j;
                    }
                }
            }
            if (step >= max_step) step = max_step;
            else blocking = -1;
            if (!std::isfinite(step)) return false;
            Eigen::VectorXd next = cur.theta + step * dir;
            if (blocking >= 0) next(blocking) = 0.0;
            next = next.cwiseMax(0.0);
            next /= next.sum();
            Eigen::VectorXd g_next = model.g * next;
            const double obj_next = model.value_from_fit(g_next, next);
            if (obj_next > cur.objective + 1e-15 * (1.0 + std::abs(cur.objective))) return false;
            cur.theta = std::move(next);
            cur.g_theta = std::move(g_next);
            return true;
        };

        bool moved = false;
        if (support.size() >= 2) {
            const auto s = static_cast<Eigen::Index>(support.size());
            Eigen::MatrixXd gs(model.g.rows(), s);
            Eigen::VectorXd grad_s(s);
            for (Eigen::Index a = 0; a < s; ++a) {
                gs.col(a) = model.g.col(support[static_cast<std::size_t>(a)]);
                grad_s(a) = grad(support[static_cast<std::size_t>(a)]);
            }
            Eigen::MatrixXd kkt_mat = Eigen::MatrixXd::Zero(s + 1, s + 1);
            kkt_mat.topLeftCorner(s, s) = gs.transpose() * gs;
            kkt_mat.block(0, s, s, 1).setOnes();
            kkt_mat.block(s, 0, 1, s).setOnes();
            Eigen::VectorXd rhs = Eigen::VectorXd::Zero(s + 1);
            rhs.head(s) = -grad_s;
            const Eigen::VectorXd sol = kkt_mat.completeOrthogonalDecomposition().solve(rhs);
            Eigen::VectorXd step_s = sol.head(s);
            step_s.array() -= step_s.mean();  // stay on the face exactly
            if (grad_s.dot(step_s) >= -slope_floor) {
                // Singular face: fall back to the projected gradient on the face.
                step_s = -(grad_s.array() - grad_s.mean()).matrix();
            }
            Eigen::VectorXd dir = Eigen::VectorXd::Zero(m);
            for (Eigen::Index a = 0; a < s; ++a) dir(support[static_cast<std::size_t>(a)]) = step_s(a);
            const double slope = grad.dot(dir);
            // A face step whose slope is roundoff gets rejected by the line
            // search; the Frank-Wolfe step below then takes over.
            if (slope < -slope_floor) {
                moved = try_step(dir, slope, std::numeric_limits<double>::infinity());
            }
        }

        if (!moved) {
            Eigen::Index k = 0;
            grad.minCoeff(&k);
            Eigen::VectorXd dir = -cur.theta;
            dir(k) += 1.0;
            const double slope = grad.dot(dir);
            if (!(slope < 0.0) || !try_step(dir, slope, 1.0)) return it;  // no descent direction left
        }
    }
    const Eigen::VectorXd grad = model.gradient_from_fit(cur.g_theta);
    cur.objective = model.value_from_fit(cur.g_theta, cur.theta);
    cur.kkt = kkt_from_gradient(grad, cur.theta);
    return it;
}

}  // namespace

Eigen::VectorXd q_gradient(const CandidateFits& fits, const Eigen::VectorXd& theta, double sigma) {
    check_sigma(sigma);
    check_theta(fits, theta);
    const QuadraticModel model(fits, sigma);
    return model.gradient_from_fit(fits.fits() * theta);
}

double certify_kkt(const CandidateFits& fits, const Eigen::VectorXd& theta, double sigma) {
    return kkt_from_gradient(q_gradient(fits, theta, sigma), theta);
}

double certify_kkt(const SpectralFamily& family, const Eigen::VectorXd& theta, const Eigen::VectorXd& y,
                   double sigma) {
    return certify_kkt(CandidateFits(family, y), theta, sigma);
}

Eigen::VectorXd aggregate_fit(const CandidateFits& fits, const Eigen::VectorXd& theta) {
    check_theta(fits, theta);
    return fits.lift(fits.fits() * theta);
}

SolveReport solve_q_aggregation(const CandidateFits& fits, double sigma, const SolverOptions& opts) {
    check_sigma(sigma);
    const auto m = static_cast<Eigen::Index>(fits.size());
    if (m == 0) throw InputError("no candidates to aggregate");
    const QuadraticModel model(fits, sigma);

    // Start from the vertex with the smallest objective, i.e. the Cp winner.
    const Eigen::VectorXd vertex_values = cp_values(fits, sigma);
    Eigen::Index start = 0;
    vertex_values.minCoeff(&start);
    Iterate best;
    best.theta = Eigen::VectorXd::Zero(m);
    best.theta(start) = 1.0;
    best.g_theta = fits.fits().col(start);
    best.objective = model.value_from_fit(best.g_theta, best.theta);
    best.kkt = kkt_from_gradient(model.gradient_from_fit(best.g_theta), best.theta);

    SolveReport report;
    const int budget = std::max(opts.max_iters, 0);
    if (!certified(best.kkt, best.objective, opts.kkt_tol) && m > 1) {
        const int grad_budget = std::min(opts.gradient_budget, budget);
        report.gradient_iterations = run_gradient_phase(model, best, grad_budget, opts.kkt_tol);
        report.iterations = report.gradient_iterations;
        if (!certified(best.kkt, best.objective, opts.kkt_tol)) {
            report.iterations += run_active_set_phase(model, best, budget - report.iterations, opts.kkt_tol);
        }
    }
    report.weights.theta = best.theta;
    report.weights.fitted = fits.lift(best.g_theta);
    report.objective = best.objective;
    report.kkt_residual = best.kkt;
    report.converged = certified(best.kkt, best.objective, opts.kkt_tol);
    return report;
}

SolveReport solve_q_aggregation(const SpectralFamily& family, const Eigen::VectorXd& y, double sigma,
                                const SolverOptions& opts) {
    return solve_q_aggregation(CandidateFits(family, y), sigma, opts);
}

SolveReport solve_q_aggregation(const FamilyUnion& candidates, const Eigen::VectorXd& y, double sigma,
                                const SolverOptions& opts) {
    return solve_q_aggregation(CandidateFits(candidates, y), sigma, opts);
}

// ---------------------------------------------------------------------------
// Baselines

std::size_t select_cp(const CandidateFits& fits, double sigma) {
    const Eigen::VectorXd cp = cp_values(fits, sigma);
    Eigen::Index best = 0;
    cp.minCoeff(&best);  // first minimum
    return static_cast<std::size_t>(best);
}

std::size_t select_cp(const SpectralFamily& family, const Eigen::VectorXd& y, double sigma) {
    return select_cp(CandidateFits(family, y), sigma);
}

GcvChoice select_gcv(const CandidateFits& fits) {
    const double n = static_cast<double>(fits.dim());
    const double tol = 1e-8 * std::max(1.0, n);
    GcvChoice choice;
    double best = std::numeric_limits<double>::infinity();
    bool found = false;
    for (std::size_t j = 0; j < fits.size(); ++j) {
        const double denom = n - fits.df()(static_cast<Eigen::Index>(j));
        if (denom <= tol) {
            choice.excluded.push_back(j);
            continue;
        }
        const double ratio = fits.residual_sq()(static_cast<Eigen::Index>(j)) / (denom * denom);
        if (!found || ratio < best) {
            best = ratio;
            choice.index = j;
            found = true;
        }
    }
    if (!found) throw InputError("GCV undefined: every member has trace(A) >= n");
    return choice;
}

GcvChoice select_gcv(const SpectralFamily& family, const Eigen::VectorXd& y) {
    return select_gcv(CandidateFits(family, y));
}

SimplexWeights exponential_weights(const CandidateFits& fits, double sigma, double temperature) {
    if (!(temperature > 0.0) || !std::isfinite(temperature)) {
        throw InputError("temperature must be positive");
    }
    const Eigen::VectorXd cp = cp_values(fits, sigma);
    const Eigen::ArrayXd w = (-(cp.array() - cp.minCoeff()) / temperature).exp();
    SimplexWeights out;
    out.theta = (w / w.sum()).matrix();
    out.fitted = aggregate_fit(fits, out.theta);
    return out;
}

SimplexWeights exponential_weights(const SpectralFamily& family, const Eigen::VectorXd& y, double sigma,
                                   std::optional<double> temperature) {
    return exponential_weights(CandidateFits(family, y), sigma, temperature.value_or(4.0 * sigma * sigma));
}

// ---------------------------------------------------------------------------

LemmaCheck lemma_check(const CandidateFits& fits, const Eigen::VectorXd& theta, double sigma,
                       const Eigen::VectorXd& mu, const Eigen::VectorXd& eps, std::size_t k) {
    check_sigma(sigma);
    check_theta(fits, theta);
    if (k >= fits.size()) throw InputError("vertex index out of range");
    const auto kk = static_cast<Eigen::Index>(k);
    const Eigen::VectorXd m = fits.coords(mu);
    const Eigen::VectorXd e = fits.coords(eps);
    const Eigen::VectorXd mixed = fits.fits() * theta;
    const Eigen::VectorXd ref = fits.fits().col(kk);

    LemmaCheck out;
    out.lhs = (mixed - m).squaredNorm() - (ref - m).squaredNorm();

    const Eigen::MatrixXd diff = fits.fits().colwise() - ref;
    const Eigen::VectorXd cross = 2.0 * (diff.transpose() * e);
    const Eigen::VectorXd trace_term = 2.0 * sigma * sigma * (fits.df().array() - fits.df()(kk)).matrix();
    const Eigen::VectorXd spread = 0.5 * diff.colwise().squaredNorm().transpose();
    out.rhs = (cross - trace_term - spread).maxCoeff();

    const Eigen::VectorXd grad = q_gradient(fits, theta, sigma);
    out.slack = std::max(0.0, -(grad(kk) - grad.dot(theta)));
    return out;
}

}  // namespace qagg
