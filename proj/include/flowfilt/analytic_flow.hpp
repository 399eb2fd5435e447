// Closed-form exact Daum-Huang flow.
//
// For a linear Gaussian measurement the flow ODE dx/dλ = A(λ)x + b(λ) is
// diagonalised by the eigendecomposition D = V Λ V^T of the whitened
// measurement-space matrix D = R^{-1/2} H P H^T R^{-1/2}. With the projections
//
//   E   = P H^T R^{-1/2} V      (n_x x n_z)
//   F^T = V^T R^{-1/2} H        (n_z x n_x)
//
// the transition over [λa, λb] is Φ = I + E Ω F^T with diagonal Ω, and the
// forcing integral is E c. Both Ω and c are scalar algebraic functions of the
// eigenvalues, so no quadrature or ODE stepping is needed. Φ is never formed;
// particles are moved through the rank-n_z factors.
#pragma once

#include "flowfilt/gaussian.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace flowfilt {

/// Eigenspace of one linearization: D's eigenpairs (descending) and the
/// projections E, F together with the projected measurement and prior mean.
struct FlowBasis {
    Vector alphas;
    Matrix V;
    Matrix E;
    Matrix F;
    Vector z_tilde;
    Vector x_tilde;

    Eigen::Index state_dim() const { return E.rows(); }
    Eigen::Index meas_dim() const { return alphas.size(); }
    double alpha_max() const { return alphas(0); }
};

enum class ScheduleKind { linear, ccr };

inline const char* to_string(ScheduleKind k) { return k == ScheduleKind::linear ? "linear" : "ccr"; }

/// Pseudo-time grid 0 = λ_0 < ... < λ_N = 1.
struct Schedule {
    std::vector<double> lambdas;
    ScheduleKind kind = ScheduleKind::linear;

    std::size_t substeps() const { return lambdas.size() - 1; }
};

/// Diagonal transition entries and forcing over one pseudo-time interval.
struct SubstepOperator {
    Vector omega;
    Vector c;
    double lambda_begin = 0.0;
    double lambda_end = 1.0;
};

/// Raised when the local D has an eigenvalue at or below 1e-14 * alpha_max.
class RankDeficientError : public std::runtime_error {
public:
    explicit RankDeficientError(const std::string& what, int substep = 0)
        : std::runtime_error(what), substep_(substep) {}
    /// 1-based substep index in an N-step update, 0 outside of one.
    int substep() const { return substep_; }

private:
    int substep_;
};

namespace detail {

// Flip eigenvector signs so the first non-negligible component is positive.
inline void canonicalize_signs(Matrix& v) {
    for (Eigen::Index j = 0; j < v.cols(); ++j) {
        const double tol = 1e-12 * v.col(j).cwiseAbs().maxCoeff();
        for (Eigen::Index i = 0; i < v.rows(); ++i) {
            if (std::abs(v(i, j)) > tol) {
                if (v(i, j) < 0.0) v.col(j) *= -1.0;
                break;
            }
        }
    }
}

inline void check_interval(double alpha, double lambda_a, double lambda_b) {
    if (!(alpha > 0.0) || !std::isfinite(alpha)) {
        throw std::invalid_argument(describe("eigenvalue must be positive and finite, got ", alpha));
    }
    if (!(lambda_a >= 0.0) || !(lambda_b <= 1.0) || !(lambda_a < lambda_b)) {
        throw std::invalid_argument("pseudo-time interval must satisfy 0 <= lambda_a < lambda_b <= 1");
    }
}

}  // namespace detail

/// Builds the eigenspace basis from a prior and a whitening matrix R^{-1/2}
/// computed once by the caller.
inline FlowBasis build_flow_basis(const GaussianBelief& belief, const Matrix& H, const Matrix& r_inv_sqrt,
                                  const Vector& z) {
    if (H.cols() != belief.dim() || H.rows() != r_inv_sqrt.rows() || z.size() != H.rows()) {
        throw std::invalid_argument("flow basis: inconsistent dimensions");
    }
    const Matrix w = r_inv_sqrt * H;  // whitened measurement matrix
    const Matrix d = symmetrized(w * belief.cov * w.transpose());
    Eigen::SelfAdjointEigenSolver<Matrix> es(d);
    if (es.info() != Eigen::Success) {
        throw std::runtime_error("eigendecomposition of D failed");
    }
    const Eigen::Index nz = d.rows();
    FlowBasis basis;
    basis.alphas = es.eigenvalues().reverse();
    basis.V = es.eigenvectors().rowwise().reverse();
    detail::canonicalize_signs(basis.V);

    const double amax = basis.alphas(0);
    if (!(amax > 0.0) || basis.alphas(nz - 1) <= 1e-14 * amax) {
        throw RankDeficientError(detail::describe("D is rank deficient, smallest eigenvalue ", basis.alphas(nz - 1)));
    }
    basis.F = w.transpose() * basis.V;
    basis.E = belief.cov * basis.F;
    basis.z_tilde = basis.V.transpose() * (r_inv_sqrt * z);
    basis.x_tilde = basis.F.transpose() * belief.mean;
    return basis;
}

/// D = R^{-1/2} H P H^T R^{-1/2} eigendecomposed with descending eigenvalues.
inline FlowBasis build_flow_basis(const GaussianBelief& belief, const LinearMeasurement& m) {
    if (m.H.cols() != belief.dim()) {
        throw std::invalid_argument("measurement matrix does not match state dimension");
    }
    validate(belief);
    validate(m);
    return build_flow_basis(belief, m.H, symmetric_sqrt_inverse(m.R), m.z);
}

/// Ω_ii over [λa, λb]: (s_a / s_b - 1) / α with s = sqrt(1 + λα).
///
/// Evaluated in the rationalised form (λa - λb) / (s_b (s_a + s_b)), which is
/// algebraically identical and has no 0/0 as α -> 0.
inline double omega_step(double alpha, double lambda_a, double lambda_b) {
    detail::check_interval(alpha, lambda_a, lambda_b);
    const double sa = std::sqrt(1.0 + lambda_a * alpha);
    const double sb = std::sqrt(1.0 + lambda_b * alpha);
    return (lambda_a - lambda_b) / (sb * (sa + sb));
}

/// Forcing c_i over [λa, λb]:
///   [α z̃ (λb s_a - λa s_b) + x̃ (s_a - s_b)] / (α s_b² s_a),
/// with the x̃ term rationalised as (λa - λb) / (s_a + s_b) so α cancels exactly.
inline double forcing_step(double alpha, double z_t, double x_t, double lambda_a, double lambda_b) {
    detail::check_interval(alpha, lambda_a, lambda_b);
    const double sa = std::sqrt(1.0 + lambda_a * alpha);
    const double sb = std::sqrt(1.0 + lambda_b * alpha);
    const double numer = z_t * (lambda_b * sa - lambda_a * sb) + x_t * (lambda_a - lambda_b) / (sa + sb);
    return numer / (sb * sb * sa);
}

inline SubstepOperator make_substep_operator(const FlowBasis& basis, double lambda_a, double lambda_b) {
    const Eigen::Index nz = basis.meas_dim();
    SubstepOperator op;
    op.omega.resize(nz);
    op.c.resize(nz);
    op.lambda_begin = lambda_a;
    op.lambda_end = lambda_b;
    for (Eigen::Index i = 0; i < nz; ++i) {
        op.omega(i) = omega_step(basis.alphas(i), lambda_a, lambda_b);
        op.c(i) = forcing_step(basis.alphas(i), basis.z_tilde(i), basis.x_tilde(i), lambda_a, lambda_b);
    }
    return op;
}

/// x <- x + E (ω ⊙ F^T x + c) for every particle, in place.
inline void apply_substep_inplace(const SubstepOperator& op, const FlowBasis& basis, Matrix& particles) {
    if (particles.rows() != basis.state_dim() || op.omega.size() != basis.meas_dim() ||
        op.c.size() != basis.meas_dim()) {
        throw std::invalid_argument("substep operator, basis and ensemble dimensions do not match");
    }
    Matrix projected = op.omega.asDiagonal() * (basis.F.transpose() * particles);
    projected.colwise() += op.c;
    particles.noalias() += basis.E * projected;
}

inline ParticleEnsemble apply_substep(const SubstepOperator& op, const FlowBasis& basis, const ParticleEnsemble& e) {
    ParticleEnsemble out = e;
    apply_substep_inplace(op, basis, out.particles);
    return out;
}

/// Dense Φ = I + E Ω F^T. Only for diagnostics; the update path never forms it.
inline Matrix transition_matrix(const SubstepOperator& op, const FlowBasis& basis) {
    return Matrix::Identity(basis.state_dim(), basis.state_dim()) +
           basis.E * op.omega.asDiagonal() * basis.F.transpose();
}

inline Schedule linear_schedule(int n) {
    if (n < 1) throw std::invalid_argument("schedule needs at least one substep");
    Schedule s;
    s.kind = ScheduleKind::linear;
    s.lambdas.resize(static_cast<std::size_t>(n) + 1);
    for (int k = 0; k <= n; ++k) s.lambdas[static_cast<std::size_t>(k)] = static_cast<double>(k) / n;
    s.lambdas.back() = 1.0;
    return s;
}

/// Constant-contraction-rate grid λ_k = ((1 + α_max)^{k/n} - 1) / α_max.
/// The ratio sqrt(1 + λ_{k-1} α_max) / sqrt(1 + λ_k α_max) is the same for all k.
inline Schedule ccr_schedule(double alpha_max, int n) {
    if (n < 1) throw std::invalid_argument("schedule needs at least one substep");
    if (!(alpha_max > 0.0) || !std::isfinite(alpha_max)) {
        throw std::invalid_argument(detail::describe("ccr schedule needs a positive alpha_max, got ", alpha_max));
    }
    Schedule s;
    s.kind = ScheduleKind::ccr;
    s.lambdas.resize(static_cast<std::size_t>(n) + 1);
    const double log_growth = std::log1p(alpha_max);
    for (int k = 0; k <= n; ++k) {
        const double t = static_cast<double>(k) / n;
        s.lambdas[static_cast<std::size_t>(k)] = std::expm1(t * log_growth) / alpha_max;
    }
    s.lambdas.front() = 0.0;
    s.lambdas.back() = 1.0;
    return s;
}

inline Schedule make_schedule(ScheduleKind kind, double alpha_max, int n) {
    return kind == ScheduleKind::ccr ? ccr_schedule(alpha_max, n) : linear_schedule(n);
}

/// Single-shot λ: 0 -> 1 transport, x(1) = Φ(1,0) x(0) + E c(1).
inline ParticleEnsemble closed_form_update(const GaussianBelief& belief, const LinearMeasurement& m,
                                           const ParticleEnsemble& e) {
    const FlowBasis basis = build_flow_basis(belief, m);
    return apply_substep(make_substep_operator(basis, 0.0, 1.0), basis, e);
}

}  // namespace flowfilt
