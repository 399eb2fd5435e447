// Random linear Gaussian measurement problems with a prescribed spectrum of D.
#pragma once

#include "flowfilt/gaussian.hpp"

#include <Eigen/QR>

#include <algorithm>
#include <cmath>
#include <random>

namespace flowfilt {

struct InstanceOptions {
    int max_state_dim = 6;
    int max_meas_dim = 4;
    /// Smallest eigenvalue of D drawn log-uniformly from this range.
    double alpha_min_lo = 1e-3;
    double alpha_min_hi = 1.0;
    /// Largest admissible ratio alpha_max / alpha_min.
    double max_spread = 1e6;
    Eigen::Index n_particles = 8;
};

struct LinearInstance {
    GaussianBelief prior;
    LinearMeasurement meas;
    ParticleEnsemble particles;
    Vector alphas;  // eigenvalues of D used in the construction
};

namespace detail {

inline double log_uniform(std::mt19937_64& rng, double lo, double hi) {
    std::uniform_real_distribution<double> u(std::log(lo), std::log(hi));
    return std::exp(u(rng));
}

inline Matrix gaussian_matrix(std::mt19937_64& rng, Eigen::Index rows, Eigen::Index cols) {
    std::normal_distribution<double> n;
    Matrix m(rows, cols);
    for (Eigen::Index j = 0; j < cols; ++j) {
        for (Eigen::Index i = 0; i < rows; ++i) m(i, j) = n(rng);
    }
    return m;
}

inline Matrix random_orthogonal(std::mt19937_64& rng, Eigen::Index n) {
    Eigen::HouseholderQR<Matrix> qr(gaussian_matrix(rng, n, n));
    return qr.householderQ() * Matrix::Identity(n, n);
}

inline Matrix random_spd(std::mt19937_64& rng, Eigen::Index n, double lo, double hi) {
    const Matrix q = random_orthogonal(rng, n);
    Vector ev(n);
    for (Eigen::Index i = 0; i < n; ++i) ev(i) = log_uniform(rng, lo, hi);
    return symmetrized(q * ev.asDiagonal() * q.transpose());
}

inline Matrix spd_power(const Matrix& m, double p) {
    Eigen::SelfAdjointEigenSolver<Matrix> es(m);
    const Vector ev = es.eigenvalues().array().pow(p);
    return symmetrized(es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose());
}

}  // namespace detail

/// H is built as R^{1/2} D^{1/2} U P^{-1/2} with U having orthonormal rows,
/// so R^{-1/2} H P H^T R^{-1/2} = D exactly (up to rounding) with the drawn
/// eigenvalues.
inline LinearInstance random_linear_instance(std::mt19937_64& rng, const InstanceOptions& opt = {}) {
    std::uniform_int_distribution<int> nx_dist(1, opt.max_state_dim);
    const int nx = nx_dist(rng);
    std::uniform_int_distribution<int> nz_dist(1, std::min(nx, opt.max_meas_dim));
    const int nz = nz_dist(rng);

    LinearInstance inst;
    const Matrix p = detail::random_spd(rng, nx, 0.1, 10.0);
    const Matrix r = detail::random_spd(rng, nz, 1e-2, 1e2);

    const double amin = detail::log_uniform(rng, opt.alpha_min_lo, opt.alpha_min_hi);
    const double spread = detail::log_uniform(rng, 1.0, opt.max_spread);
    inst.alphas.resize(nz);
    inst.alphas(0) = amin;
    if (nz > 1) inst.alphas(nz - 1) = amin * spread;
    for (int i = 1; i + 1 < nz; ++i) inst.alphas(i) = detail::log_uniform(rng, amin, amin * spread);

    const Matrix vd = detail::random_orthogonal(rng, nz);
    const Matrix d_sqrt = vd * inst.alphas.cwiseSqrt().asDiagonal() * vd.transpose();
    const Matrix u = detail::random_orthogonal(rng, nx).topRows(nz);
    const Matrix h = detail::spd_power(r, 0.5) * d_sqrt * u * detail::spd_power(p, -0.5);

    std::normal_distribution<double> n;
    inst.prior.cov = p;
    inst.prior.mean = 2.0 * detail::gaussian_matrix(rng, nx, 1);
    const Vector truth = inst.prior.mean + cholesky_factor(p) * detail::gaussian_matrix(rng, nx, 1);
    inst.meas.H = h;
    inst.meas.R = r;
    inst.meas.z = h * truth + cholesky_factor(r) * detail::gaussian_matrix(rng, nz, 1);
    inst.particles.particles = (cholesky_factor(p) * detail::gaussian_matrix(rng, nx, opt.n_particles)).colwise() +
                               inst.prior.mean;
    return inst;
}

}  // namespace flowfilt
