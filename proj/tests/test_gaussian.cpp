#include <gtest/gtest.h>

#include "flowfilt/gaussian.hpp"
#include "flowfilt/random_instances.hpp"

#include <cmath>
#include <random>

using namespace flowfilt;

namespace {

// Joseph-form update in extended precision, independent of kalman_update's algebra.
GaussianBelief joseph_update(const GaussianBelief& prior, const LinearMeasurement& m) {
    using MatL = Eigen::Matrix<long double, Eigen::Dynamic, Eigen::Dynamic>;
    const MatL p = prior.cov.cast<long double>(), h = m.H.cast<long double>(), r = m.R.cast<long double>();
    const MatL k = p * h.transpose() * (h * p * h.transpose() + r).inverse();
    const MatL ikh = MatL::Identity(p.rows(), p.cols()) - k * h;
    const MatL mean = prior.mean.cast<long double>() + k * (m.z.cast<long double>() - h * prior.mean.cast<long double>());
    const MatL cov = ikh * p * ikh.transpose() + k * r * k.transpose();
    return {mean.cast<double>(), cov.cast<double>()};
}

GaussianBelief scalar_belief(double mean, double var) {
    return {Vector::Constant(1, mean), Matrix::Constant(1, 1, var)};
}

LinearMeasurement scalar_meas(double h, double r, double z) {
    return {Matrix::Constant(1, 1, h), Matrix::Constant(1, 1, r), Vector::Constant(1, z)};
}

}  // namespace

// ============================================================================
// symmetric_sqrt_inverse
// ============================================================================

TEST(SymmetricSqrtInverse, IdentityMapsToIdentity) {
    for (int n : {1, 3, 5}) {
        EXPECT_TRUE(symmetric_sqrt_inverse(Matrix::Identity(n, n)).isApprox(Matrix::Identity(n, n), 1e-15));
    }
}

TEST(SymmetricSqrtInverse, DiagonalCase) {
    Matrix m = Eigen::Vector2d(4.0, 9.0).asDiagonal();
    const Matrix s = symmetric_sqrt_inverse(m);
    EXPECT_NEAR(s(0, 0), 0.5, 1e-15);
    EXPECT_NEAR(s(1, 1), 1.0 / 3.0, 1e-15);
    EXPECT_NEAR(s(0, 1), 0.0, 1e-15);
}

TEST(SymmetricSqrtInverse, WhitensDenseMatrix) {
    Matrix m(2, 2);
    m << 2, 1, 1, 2;
    const Matrix s = symmetric_sqrt_inverse(m);
    EXPECT_LT((s - s.transpose()).norm(), 1e-15);
    EXPECT_LT((s * m * s - Matrix::Identity(2, 2)).norm(), 1e-10);
}

TEST(SymmetricSqrtInverse, CommutesWithInput) {
    std::mt19937_64 rng(11);
    for (int i = 0; i < 50; ++i) {
        const Matrix m = detail::random_spd(rng, 1 + i % 6, 1e-3, 1e3);
        const Matrix s = symmetric_sqrt_inverse(m);
        EXPECT_LE((s * m - m * s).norm(), 1e-10 * m.norm());
    }
}

TEST(SymmetricSqrtInverse, RejectsIndefiniteWithEigenvalue) {
    Matrix m(2, 2);
    m << 1, 0, 0, -2;
    try {
        symmetric_sqrt_inverse(m);
        FAIL() << "expected rejection";
    } catch (const std::invalid_argument& e) {
        EXPECT_NE(std::string(e.what()).find("-2"), std::string::npos) << e.what();
    }
}

// ============================================================================
// kalman_update
// ============================================================================

TEST(KalmanUpdate, ScalarHalfGain) {
    const auto post = kalman_update(scalar_belief(0.0, 1.0), scalar_meas(1.0, 1.0, 2.0));
    EXPECT_DOUBLE_EQ(post.mean(0), 1.0);
    EXPECT_DOUBLE_EQ(post.cov(0, 0), 0.5);
}

TEST(KalmanUpdate, UninformativeMeasurement) {
    const auto post = kalman_update(scalar_belief(0.3, 1.0), scalar_meas(1.0, 1e12, 5.0));
    EXPECT_NEAR(post.mean(0), 0.3, 1e-10);
    EXPECT_NEAR(post.cov(0, 0), 1.0, 1e-10);
}

TEST(KalmanUpdate, MatchesJosephFormOnRandomInstances) {
    std::mt19937_64 rng(5);
    // Eigenvalue spreads up to 1e6 cost a few digits in double precision.
    for (int i = 0; i < 100; ++i) {
        const LinearInstance inst = random_linear_instance(rng);
        const auto post = kalman_update(inst.prior, inst.meas);
        const auto ref = joseph_update(inst.prior, inst.meas);
        EXPECT_LE((post.mean - ref.mean).norm(), 1e-8 * std::max(1.0, ref.mean.norm()));
        EXPECT_LE((post.cov - ref.cov).norm(), 1e-8 * inst.prior.cov.norm());
    }
}

TEST(KalmanUpdate, FourStateTwoMeasurementJoseph) {
    std::mt19937_64 rng(99);
    const Matrix p = detail::random_spd(rng, 4, 0.5, 5.0);
    const Matrix r = detail::random_spd(rng, 2, 0.1, 1.0);
    const Matrix h = detail::gaussian_matrix(rng, 2, 4);
    const GaussianBelief prior{detail::gaussian_matrix(rng, 4, 1), p};
    const LinearMeasurement m{h, r, detail::gaussian_matrix(rng, 2, 1)};
    const auto post = kalman_update(prior, m);
    const auto ref = joseph_update(prior, m);
    EXPECT_LT((post.mean - ref.mean).norm(), 1e-10);
    EXPECT_LT((post.cov - ref.cov).norm(), 1e-10);
}

TEST(KalmanUpdate, PosteriorCovarianceIsSymmetricPsd) {
    std::mt19937_64 rng(17);
    std::uniform_int_distribution<int> nxd(1, 6);
    for (int i = 0; i < 200; ++i) {
        const int nx = nxd(rng);
        const int nz = std::uniform_int_distribution<int>(1, std::min(nx, 4))(rng);
        const GaussianBelief prior{detail::gaussian_matrix(rng, nx, 1), detail::random_spd(rng, nx, 1e-2, 1e2)};
        const LinearMeasurement m{detail::gaussian_matrix(rng, nz, nx), detail::random_spd(rng, nz, 1e-2, 1e2),
                                  detail::gaussian_matrix(rng, nz, 1)};
        const auto post = kalman_update(prior, m);
        EXPECT_EQ((post.cov - post.cov.transpose()).norm(), 0.0);
        const double min_eig = Eigen::SelfAdjointEigenSolver<Matrix>(post.cov).eigenvalues()(0);
        EXPECT_GE(min_eig, -1e-12 * prior.cov.norm());
    }
}

TEST(KalmanUpdate, RejectsRankDeficientH) {
    LinearMeasurement m{Matrix::Ones(2, 3), Matrix::Identity(2, 2), Vector::Zero(2)};
    const GaussianBelief prior{Vector::Zero(3), Matrix::Identity(3, 3)};
    EXPECT_THROW(kalman_update(prior, m), std::invalid_argument);
}

TEST(KalmanUpdate, RejectsDimensionMismatch) {
    const GaussianBelief prior{Vector::Zero(3), Matrix::Identity(3, 3)};
    EXPECT_THROW(kalman_update(prior, scalar_meas(1.0, 1.0, 0.0)), std::invalid_argument);
}

// ============================================================================
// sample_ensemble / ensemble_moments
// ============================================================================

TEST(SampleEnsemble, MeanWithinLawOfLargeNumbersBound) {
    const Eigen::Index n = 100'000;
    const GaussianBelief b{Eigen::Vector3d(1.0, -2.0, 0.5), Matrix::Identity(3, 3)};
    const auto e = sample_ensemble(b, n, 42);
    const Vector mean = ensemble_mean(e);
    for (int i = 0; i < 3; ++i) EXPECT_NEAR(mean(i), b.mean(i), 4.0 / std::sqrt(double(n)));
}

TEST(SampleEnsemble, DeterministicForSeed) {
    const GaussianBelief b{Vector::Zero(2), Matrix::Identity(2, 2)};
    EXPECT_EQ(sample_ensemble(b, 50, 7).particles, sample_ensemble(b, 50, 7).particles);
    EXPECT_NE(sample_ensemble(b, 50, 7).particles, sample_ensemble(b, 50, 8).particles);
}

TEST(SampleEnsemble, SingleSampleIsFinite) {
    const GaussianBelief b{Vector::Zero(4), Matrix::Identity(4, 4)};
    const auto e = sample_ensemble(b, 1, 3);
    EXPECT_EQ(e.size(), 1);
    EXPECT_TRUE(e.particles.allFinite());
}

TEST(SampleEnsemble, RejectsNonSpdAndEmpty) {
    Matrix bad(2, 2);
    bad << 1, 2, 2, 1;
    EXPECT_THROW(sample_ensemble({Vector::Zero(2), bad}, 10, 1), std::invalid_argument);
    EXPECT_THROW(sample_ensemble({Vector::Zero(2), Matrix::Identity(2, 2)}, 0, 1), std::invalid_argument);
}

TEST(EnsembleMoments, TwoParticleHandComputation) {
    ParticleEnsemble e{Matrix(1, 2)};
    e.particles << 0.0, 2.0;
    const auto [mean, cov] = ensemble_moments(e);
    EXPECT_DOUBLE_EQ(mean(0), 1.0);
    EXPECT_DOUBLE_EQ(cov(0, 0), 2.0);
}

TEST(EnsembleMoments, IdenticalParticlesHaveZeroCovariance) {
    ParticleEnsemble e{Eigen::Vector3d(1, 2, 3).replicate(1, 20)};
    const auto [mean, cov] = ensemble_moments(e);
    EXPECT_TRUE(mean.isApprox(Eigen::Vector3d(1, 2, 3)));
    EXPECT_EQ(cov.norm(), 0.0);
}

TEST(EnsembleMoments, ConvergeToSamplingDistribution) {
    const Eigen::Index n = 100'000;
    Matrix p(2, 2);
    p << 2.0, 0.6, 0.6, 1.0;
    const GaussianBelief b{Eigen::Vector2d(3.0, -1.0), p};
    const auto [mean, cov] = ensemble_moments(sample_ensemble(b, n, 2024));
    const double tol = 4.0 / std::sqrt(double(n));
    for (int i = 0; i < 2; ++i) EXPECT_NEAR(mean(i), b.mean(i), tol * std::sqrt(p(i, i)));
    for (int i = 0; i < 2; ++i) {
        for (int j = 0; j < 2; ++j) {
            // Var of a sample covariance entry is (p_ii p_jj + p_ij^2) / n.
            EXPECT_NEAR(cov(i, j), p(i, j), tol * std::sqrt(p(i, i) * p(j, j) + p(i, j) * p(i, j)));
        }
    }
}

TEST(EnsembleMoments, RejectsSingleParticle) {
    EXPECT_THROW(ensemble_moments(ParticleEnsemble{Matrix::Zero(2, 1)}), std::invalid_argument);
}
