#include "oracles/dense_oracle.hpp"
#include "qagg/aggregate.hpp"
#include "qagg/error.hpp"

#include <doctest.h>

#include <cmath>
#include <random>

using namespace qagg;
using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

struct Case {
    DesignProblem problem;
    SpectralFamily family;
    std::vector<MatrixXd> dense;
    VectorXd mu;
    VectorXd y;
    double sigma;
};

Case random_case(std::mt19937_64& gen, Eigen::Index n, Eigen::Index p, std::size_t m, double sigma = 1.0) {
    DesignProblem prob{oracle::gaussian_matrix(gen, n, p), oracle::random_spd(gen, p), oracle::random_grid(gen, m)};
    SpectralFamily f = build_tikhonov_family(prob);
    std::vector<MatrixXd> dense;
    for (double l : prob.lambdas) dense.push_back(oracle::tikhonov_matrix(prob.design, prob.penalty, l));
    const VectorXd mu = prob.design * oracle::gaussian_vector(gen, p, 0.8);
    const VectorXd y = mu + oracle::gaussian_vector(gen, n, sigma);
    return Case{std::move(prob), std::move(f), std::move(dense), mu, y, sigma};
}

}  // namespace

TEST_CASE("simplex projection") {
    VectorXd v(3);
    v << 0.2, 0.2, 0.6;
    CHECK((project_to_simplex(v) - v).norm() < 1e-15);
    v << 5.0, 0.0, 0.0;
    CHECK((project_to_simplex(v) - VectorXd::Unit(3, 0)).norm() < 1e-15);
    v << 1.0, 1.0, -3.0;
    const VectorXd p = project_to_simplex(v);
    CHECK(p(0) == doctest::Approx(0.5));
    CHECK(p(1) == doctest::Approx(0.5));
    CHECK(p(2) == 0.0);

    std::mt19937_64 gen(2);
    for (int t = 0; t < 50; ++t) {
        const VectorXd w = oracle::gaussian_vector(gen, 7, 3.0);
        const VectorXd q = project_to_simplex(w);
        CHECK(q.minCoeff() >= 0.0);
        CHECK(std::abs(q.sum() - 1.0) < 1e-12);
        // Variational inequality of the projection: (w - q) . (z - q) <= 0 for every vertex z.
        for (Eigen::Index k = 0; k < 7; ++k) CHECK((w - q).dot(VectorXd::Unit(7, k) - q) <= 1e-12);
    }
}

TEST_CASE("Cp closed forms and the dense oracle") {
    SUBCASE("zero smoother") {
        const SpectralFamily f(MatrixXd::Identity(4, 4), MatrixXd::Zero(1, 4));
        const VectorXd y = VectorXd::LinSpaced(4, 1.0, 4.0);
        CHECK(cp_criterion(f, 0, y, 1.7) == doctest::Approx(y.squaredNorm()));
    }
    SUBCASE("saturated smoother") {
        const SpectralFamily f(MatrixXd::Identity(4, 4), MatrixXd::Ones(1, 4));
        CHECK(cp_criterion(f, 0, VectorXd::LinSpaced(4, 1.0, 4.0), 1.5) == doctest::Approx(2.0 * 2.25 * 4));
    }
    SUBCASE("random 6x4") {
        std::mt19937_64 gen(3);
        const Case c = random_case(gen, 6, 4, 4, 0.9);
        for (std::size_t j = 0; j < c.family.size(); ++j) {
            CHECK(std::abs(cp_criterion(c.family, j, c.y, c.sigma) - oracle::cp(c.dense[j], c.y, c.sigma)) < 1e-10);
        }
    }
}

TEST_CASE("objective forms coincide") {
    std::mt19937_64 gen(4);
    SUBCASE("vertices give Cp") {
        const Case c = random_case(gen, 8, 3, 4);
        for (std::size_t k = 0; k < c.family.size(); ++k) {
            const VectorXd e = VectorXd::Unit(4, static_cast<Eigen::Index>(k));
            CHECK(q_objective(c.family, e, c.y, c.sigma) == doctest::Approx(cp_criterion(c.family, k, c.y, c.sigma)));
        }
    }
    SUBCASE("single member") {
        const Case c = random_case(gen, 8, 3, 1);
        CHECK(q_objective(c.family, VectorXd::Ones(1), c.y, c.sigma) ==
              doctest::Approx(cp_criterion(c.family, 0, c.y, c.sigma)));
    }
    SUBCASE("M=2 with weights (0.4, 0.6) against the dense penalized form") {
        const Case c = random_case(gen, 7, 3, 2);
        VectorXd theta(2);
        theta << 0.4, 0.6;
        const double dense = oracle::q_penalized(c.dense, theta, c.y, c.sigma);
        CHECK(std::abs(q_objective(c.family, theta, c.y, c.sigma) - dense) < 1e-9 * (1.0 + std::abs(dense)));
        CHECK(std::abs(q_objective_penalized(c.family, theta, c.y, c.sigma) - dense) < 1e-9 * (1.0 + std::abs(dense)));
    }
}

TEST_CASE("objective is convex along random segments") {
    std::mt19937_64 gen(5);
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    for (int t = 0; t < 100; ++t) {
        const Case c = random_case(gen, 10, 4, 5);
        const CandidateFits fits(c.family, c.y);
        const VectorXd a = oracle::random_simplex(gen, 5);
        const VectorXd b = oracle::random_simplex(gen, 5);
        const double s = unif(gen);
        const double mid = q_objective(fits, s * a + (1 - s) * b, c.sigma);
        CHECK(mid <= s * q_objective(fits, a, c.sigma) + (1 - s) * q_objective(fits, b, c.sigma) + 1e-9);
    }
}

TEST_CASE("analytic gradient matches central differences") {
    std::mt19937_64 gen(6);
    const Case c = random_case(gen, 12, 5, 6);
    const CandidateFits fits(c.family, c.y);
    constexpr double h = 1e-6;
    for (int t = 0; t < 20; ++t) {
        const VectorXd theta = oracle::random_simplex(gen, 6);
        const VectorXd g = q_gradient(fits, theta, c.sigma);
        VectorXd fd(6);
        for (Eigen::Index k = 0; k < 6; ++k) {
            const VectorXd e = VectorXd::Unit(6, k);
            fd(k) = (q_objective(fits, theta + h * e, c.sigma) - q_objective(fits, theta - h * e, c.sigma)) / (2 * h);
        }
        CHECK((g - fd).norm() / std::max(1.0, g.norm()) < 1e-5);
    }
}

TEST_CASE("solver") {
    std::mt19937_64 gen(7);
    SUBCASE("single member") {
        const Case c = random_case(gen, 8, 3, 1);
        const SolveReport r = solve_q_aggregation(c.family, c.y, c.sigma);
        CHECK(r.converged);
        CHECK(r.weights.theta(0) == 1.0);
    }
    SUBCASE("duplicated members keep the single-member value") {
        const SpectralFamily one(MatrixXd::Identity(4, 4), MatrixXd::Constant(1, 4, 0.4));
        const SpectralFamily two(MatrixXd::Identity(4, 4), MatrixXd::Constant(2, 4, 0.4));
        const VectorXd y = VectorXd::LinSpaced(4, -1.0, 2.0);
        const SolveReport r1 = solve_q_aggregation(one, y, 1.0);
        const SolveReport r2 = solve_q_aggregation(two, y, 1.0);
        CHECK(r2.converged);
        CHECK(r2.objective == doctest::Approx(r1.objective).epsilon(1e-12));
        CHECK(std::abs(r2.weights.theta.sum() - 1.0) < 1e-12);
    }
    SUBCASE("M=3, n=8 matches grid brute force") {
        for (int t = 0; t < 5; ++t) {
            const Case c = random_case(gen, 8, 4, 3);
            const SolveReport r = solve_q_aggregation(c.family, c.y, c.sigma);
            CHECK(r.converged);
            CHECK(r.kkt_residual >= -1e-7 * (1.0 + std::abs(r.objective)));
            const double brute = oracle::brute_force_min(c.dense, c.y, c.sigma, 1e-3);
            CHECK(r.objective <= brute + 1e-5);
            CHECK(r.objective >= brute - 1e-3);
        }
    }
    SUBCASE("fitted values and simplex constraints") {
        const Case c = random_case(gen, 30, 8, 25);
        const SolveReport r = solve_q_aggregation(c.family, c.y, c.sigma);
        CHECK(r.converged);
        CHECK(r.weights.theta.minCoeff() >= 0.0);
        CHECK(std::abs(r.weights.theta.sum() - 1.0) < 1e-12);
        const MatrixXd at = oracle::combine(c.dense, r.weights.theta);
        CHECK((r.weights.fitted - at * c.y).cwiseAbs().maxCoeff() < 1e-8);
        CHECK(certify_kkt(c.family, r.weights.theta, c.y, c.sigma) >= -1e-7 * (1.0 + std::abs(r.objective)));
    }
    SUBCASE("a strictly worse vertex has a negative certificate") {
        const Case c = random_case(gen, 10, 4, 4);
        const CandidateFits fits(c.family, c.y);
        const VectorXd cp = cp_values(fits, c.sigma);
        Eigen::Index worst = 0;
        cp.maxCoeff(&worst);
        CHECK(certify_kkt(fits, VectorXd::Unit(4, worst), c.sigma) < 0.0);
    }
    SUBCASE("invalid sigma") {
        const Case c = random_case(gen, 8, 3, 2);
        CHECK_THROWS_AS(solve_q_aggregation(c.family, c.y, 0.0), InputError);
    }
}

TEST_CASE("solver on a union of families") {
    std::mt19937_64 gen(8);
    const MatrixXd x = oracle::gaussian_matrix(gen, 12, 4);
    std::vector<FamilyUnion::FamilyPtr> fams;
    std::vector<MatrixXd> dense;
    for (int f = 0; f < 3; ++f) {
        DesignProblem prob{x, oracle::random_spd(gen, 4), oracle::random_grid(gen, 3)};
        fams.push_back(std::make_shared<const SpectralFamily>(build_tikhonov_family(prob, f)));
        for (double l : prob.lambdas) dense.push_back(oracle::tikhonov_matrix(x, prob.penalty, l));
    }
    const FamilyUnion u(fams);
    const VectorXd y = x * oracle::gaussian_vector(gen, 4) + oracle::gaussian_vector(gen, 12);
    const SolveReport r = solve_q_aggregation(u, y, 1.0);
    CHECK(r.converged);
    const double dense_obj = oracle::q_penalized(dense, r.weights.theta, y, 1.0);
    CHECK(r.objective == doctest::Approx(dense_obj).epsilon(1e-9));
    // No vertex does better than the aggregate.
    for (std::size_t k = 0; k < dense.size(); ++k) {
        CHECK(r.objective <= oracle::cp(dense[k], y, 1.0) + 1e-9);
    }
}

TEST_CASE("Cp selection") {
    std::mt19937_64 gen(9);
    SUBCASE("single member") {
        const Case c = random_case(gen, 8, 3, 1);
        CHECK(select_cp(c.family, c.y, c.sigma) == 0);
    }
    SUBCASE("zero response picks the smallest df") {
        const Case c = random_case(gen, 8, 3, 5);
        CHECK(select_cp(c.family, VectorXd::Zero(8), c.sigma) == 4);
    }
    SUBCASE("matches dense argmin") {
        for (int t = 0; t < 10; ++t) {
            const Case c = random_case(gen, 9, 4, 6);
            std::size_t arg = 0;
            for (std::size_t j = 1; j < 6; ++j) {
                if (oracle::cp(c.dense[j], c.y, c.sigma) < oracle::cp(c.dense[arg], c.y, c.sigma)) arg = j;
            }
            CHECK(select_cp(c.family, c.y, c.sigma) == arg);
        }
    }
}

TEST_CASE("GCV selection") {
    std::mt19937_64 gen(10);
    SUBCASE("single member") {
        const Case c = random_case(gen, 8, 3, 1);
        CHECK(select_gcv(c.family, c.y).index == 0);
    }
    SUBCASE("interpolating members are excluded") {
        MatrixXd alphas(2, 4);
        alphas << 1, 1, 1, 1, 0.5, 0.4, 0.3, 0.2;
        const SpectralFamily f(MatrixXd::Identity(4, 4), alphas);
        const GcvChoice g = select_gcv(f, VectorXd::LinSpaced(4, 1.0, 2.0));
        CHECK(g.index == 1);
        CHECK(g.excluded == std::vector<std::size_t>{0});
    }
    SUBCASE("every member excluded") {
        const SpectralFamily f(MatrixXd::Identity(3, 3), MatrixXd::Ones(1, 3));
        CHECK_THROWS_AS(select_gcv(f, VectorXd::Ones(3)), InputError);
    }
    SUBCASE("matches dense argmin") {
        for (int t = 0; t < 10; ++t) {
            const Case c = random_case(gen, 9, 4, 6);
            std::size_t arg = 0;
            for (std::size_t j = 1; j < 6; ++j) {
                if (oracle::gcv(c.dense[j], c.y) < oracle::gcv(c.dense[arg], c.y)) arg = j;
            }
            CHECK(select_gcv(c.family, c.y).index == arg);
        }
    }
}

TEST_CASE("exponential weights") {
    SUBCASE("equal Cp gives uniform weights") {
        const SpectralFamily f(MatrixXd::Identity(3, 3), MatrixXd::Constant(4, 3, 0.3));
        const SimplexWeights w = exponential_weights(f, VectorXd::Ones(3), 1.0);
        CHECK((w.theta - VectorXd::Constant(4, 0.25)).norm() < 1e-15);
    }
    SUBCASE("closed-form softmax") {
        // n = 1, y = 0, sigma = 1: Cp_j = 2 alpha_j.
        const double t = 0.7;
        MatrixXd alphas(3, 1);
        alphas << 0.5 * t * std::log(4.0), 0.5 * t * std::log(2.0), 0.0;
        const SpectralFamily f(MatrixXd::Identity(1, 1), alphas);
        const SimplexWeights w = exponential_weights(f, VectorXd::Zero(1), 1.0, t);
        CHECK(w.theta(2) == doctest::Approx(4.0 / 7.0).epsilon(1e-13));
        CHECK(w.theta(1) == doctest::Approx(2.0 / 7.0).epsilon(1e-13));
        CHECK(w.theta(0) == doctest::Approx(1.0 / 7.0).epsilon(1e-13));
    }
    SUBCASE("vanishing temperature concentrates on the Cp winner") {
        std::mt19937_64 gen(12);
        const Case c = random_case(gen, 10, 4, 6);
        const SimplexWeights w = exponential_weights(c.family, c.y, c.sigma, 1e-9);
        CHECK(w.theta(static_cast<Eigen::Index>(select_cp(c.family, c.y, c.sigma))) == doctest::Approx(1.0));
    }
    SUBCASE("large Cp values do not overflow") {
        const SpectralFamily f(MatrixXd::Identity(2, 2), MatrixXd::Constant(1, 2, 0.0));
        const SimplexWeights w = exponential_weights(f, VectorXd::Constant(2, 1e6), 1.0);
        CHECK(w.theta(0) == 1.0);
    }
    SUBCASE("nonpositive temperature") {
        const SpectralFamily f(MatrixXd::Identity(2, 2), MatrixXd::Constant(1, 2, 0.5));
        CHECK_THROWS_AS(exponential_weights(f, VectorXd::Ones(2), 1.0, 0.0), InputError);
    }
}

TEST_CASE("deterministic inequality holds against every vertex") {
    std::mt19937_64 gen(13);
    for (int t = 0; t < 50; ++t) {
        const Case c = random_case(gen, 15, 5, 6, 1.2);
        const VectorXd eps = c.y - c.mu;
        const CandidateFits fits(c.family, c.y);
        const SolveReport r = solve_q_aggregation(fits, c.sigma);
        for (std::size_t k = 0; k < 6; ++k) {
            const LemmaCheck chk = lemma_check(fits, r.weights.theta, c.sigma, c.mu, eps, k);
            CHECK(chk.holds(1e-9 * (1.0 + c.y.squaredNorm())));
            // Dense evaluation of the left-hand side.
            const MatrixXd at = oracle::combine(c.dense, r.weights.theta);
            const double lhs = (at * c.y - c.mu).squaredNorm() - (c.dense[k] * c.y - c.mu).squaredNorm();
            CHECK(chk.lhs == doctest::Approx(lhs).epsilon(1e-9));
        }
    }
}

TEST_CASE("normalize_simplex") {
    VectorXd t(3);
    t << 0.5, 0.5 + 1e-14, -1e-15;
    const VectorXd n = normalize_simplex(t);
    CHECK(n.minCoeff() >= 0.0);
    CHECK(std::abs(n.sum() - 1.0) < 1e-15);
    t << 0.5, 0.7, 0.0;
    CHECK_THROWS_AS(normalize_simplex(t), InputError);
}
