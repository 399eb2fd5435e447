// Gaussian beliefs, linear measurements, the exact Kalman measurement update
// and ensemble sampling/moments.
#pragma once

#include <Eigen/Cholesky>
#include <Eigen/Dense>
#include <Eigen/Eigenvalues>

#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>

namespace flowfilt {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

/// Mean and covariance of a Gaussian state estimate.
struct GaussianBelief {
    Vector mean;
    Matrix cov;

    Eigen::Index dim() const { return mean.size(); }
};

/// Linear observation z = H x + v, v ~ N(0, R).
struct LinearMeasurement {
    Matrix H;
    Matrix R;
    Vector z;
};

/// N_p samples stored column-wise (n_x rows, one column per particle).
struct ParticleEnsemble {
    Matrix particles;

    Eigen::Index dim() const { return particles.rows(); }
    Eigen::Index size() const { return particles.cols(); }
    auto particle(Eigen::Index j) const { return particles.col(j); }
};

inline Matrix symmetrized(const Matrix& m) { return 0.5 * (m + m.transpose()); }

namespace detail {

inline std::string describe(const char* what, double value) {
    std::ostringstream os;
    os.precision(17);
    os << what << value;
    return os.str();
}

inline void require_square(const Matrix& m, const char* name) {
    if (m.rows() != m.cols() || m.rows() == 0) {
        throw std::invalid_argument(std::string(name) + " must be a non-empty square matrix");
    }
}

inline void require_symmetric(const Matrix& m, const char* name) {
    const double scale = m.cwiseAbs().maxCoeff();
    const double asym = (m - m.transpose()).cwiseAbs().maxCoeff();
    if (asym > 1e-12 * scale) {
        throw std::invalid_argument(describe((std::string(name) + " is not symmetric, max|M - M^T| = ").c_str(), asym));
    }
}

inline void require_spd(const Matrix& m, const char* name) {
    require_square(m, name);
    require_symmetric(m, name);
    Eigen::LLT<Matrix> llt(m);
    if (llt.info() != Eigen::Success) {
        const double min_eig = Eigen::SelfAdjointEigenSolver<Matrix>(m, Eigen::EigenvaluesOnly).eigenvalues()(0);
        throw std::invalid_argument(describe((std::string(name) + " is not positive definite, smallest eigenvalue ").c_str(), min_eig));
    }
}

}  // namespace detail

/// Throws std::invalid_argument unless the belief has consistent dimensions and
/// a symmetric positive definite covariance.
inline void validate(const GaussianBelief& b) {
    if (b.cov.rows() != b.mean.size()) {
        throw std::invalid_argument("belief covariance does not match mean dimension");
    }
    detail::require_spd(b.cov, "belief covariance");
}

/// Throws std::invalid_argument unless R is SPD and H has full row rank
/// (all singular values above 1e-10 * sigma_max).
inline void validate(const LinearMeasurement& m) {
    const auto nz = m.H.rows();
    if (nz == 0 || m.R.rows() != nz || m.z.size() != nz) {
        throw std::invalid_argument("measurement dimensions are inconsistent");
    }
    if (m.H.cols() < nz) {
        throw std::invalid_argument("measurement matrix has more rows than columns and cannot have full row rank");
    }
    detail::require_spd(m.R, "measurement noise R");
    const Vector sv = Eigen::JacobiSVD<Matrix>(m.H).singularValues();
    if (sv(0) <= 0.0 || sv(sv.size() - 1) <= 1e-10 * sv(0)) {
        throw std::invalid_argument(detail::describe("measurement matrix H is rank deficient, smallest singular value ",
                                                     sv(sv.size() - 1)));
    }
}

/// Unique symmetric positive definite inverse square root M^{-1/2}, computed
/// from the eigendecomposition of M.
inline Matrix symmetric_sqrt_inverse(const Matrix& m) {
    detail::require_square(m, "matrix");
    detail::require_symmetric(m, "matrix");
    Eigen::SelfAdjointEigenSolver<Matrix> es(m);
    if (es.info() != Eigen::Success) {
        throw std::runtime_error("eigendecomposition failed");
    }
    const Vector& ev = es.eigenvalues();
    if (ev(0) <= 0.0) {
        throw std::invalid_argument(detail::describe("matrix is not positive definite, eigenvalue ", ev(0)));
    }
    const Matrix& v = es.eigenvectors();
    return symmetrized(v * ev.cwiseSqrt().cwiseInverse().asDiagonal() * v.transpose());
}

/// Exact Kalman measurement update. The returned covariance is re-symmetrized.
inline GaussianBelief kalman_update(const GaussianBelief& prior, const LinearMeasurement& m) {
    if (m.H.cols() != prior.dim()) {
        throw std::invalid_argument("measurement matrix does not match state dimension");
    }
    validate(m);
    const Matrix pht = prior.cov * m.H.transpose();
    const Matrix s = symmetrized(m.H * pht + m.R);
    Eigen::LLT<Matrix> llt(s);
    if (llt.info() != Eigen::Success) {
        throw std::runtime_error("innovation covariance is not positive definite");
    }
    const Matrix gain = llt.solve(pht.transpose()).transpose();
    GaussianBelief post;
    post.mean = prior.mean + gain * (m.z - m.H * prior.mean);
    post.cov = symmetrized(prior.cov - gain * pht.transpose());
    return post;
}

/// Lower Cholesky factor of an SPD covariance; throws if the factorization fails.
inline Matrix cholesky_factor(const Matrix& cov) {
    Eigen::LLT<Matrix> llt(cov);
    if (llt.info() != Eigen::Success) {
        throw std::invalid_argument("covariance is not positive definite (Cholesky failed)");
    }
    return llt.matrixL();
}

/// Draws n_p samples from N(mean, cov) with a Cholesky factor; fills columns in
/// order from a 64-bit Mersenne twister seeded with `seed`.
inline ParticleEnsemble sample_ensemble(const GaussianBelief& belief, Eigen::Index n_p, std::uint64_t seed) {
    if (n_p < 1) {
        throw std::invalid_argument("ensemble needs at least one particle");
    }
    if (belief.cov.rows() != belief.dim() || belief.cov.cols() != belief.dim()) {
        throw std::invalid_argument("belief covariance does not match mean dimension");
    }
    const Matrix l = cholesky_factor(belief.cov);
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal;
    Matrix white(belief.dim(), n_p);
    for (Eigen::Index j = 0; j < n_p; ++j) {
        for (Eigen::Index i = 0; i < belief.dim(); ++i) white(i, j) = normal(rng);
    }
    ParticleEnsemble e;
    e.particles = (l * white).colwise() + belief.mean;
    return e;
}

inline Vector ensemble_mean(const ParticleEnsemble& e) {
    if (e.size() < 1) throw std::invalid_argument("empty ensemble");
    return e.particles.rowwise().mean();
}

/// Sample mean and unbiased (1/(N_p - 1)) sample covariance.
inline std::pair<Vector, Matrix> ensemble_moments(const ParticleEnsemble& e) {
    if (e.size() < 2) {
        throw std::invalid_argument("sample covariance needs at least two particles");
    }
    Vector mean = ensemble_mean(e);
    const Matrix centered = e.particles.colwise() - mean;
    Matrix cov = symmetrized(centered * centered.transpose() / static_cast<double>(e.size() - 1));
    return {std::move(mean), std::move(cov)};
}

}  // namespace flowfilt
