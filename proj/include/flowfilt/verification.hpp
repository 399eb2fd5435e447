// Self-check suite run by `flowfilt verify`: Kalman equivalence of the closed
// form, agreement with direct ODE integration and quadrature, substep
// composition, and schedule properties. Each check reports its largest
// measured deviation.
#pragma once

#include "flowfilt/analytic_flow.hpp"
#include "flowfilt/flow_ode.hpp"
#include "flowfilt/random.hpp"
#include "flowfilt/random_instances.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

namespace flowfilt {

struct CheckResult {
    std::string name;
    double max_deviation = 0.0;
    double tolerance = 0.0;
    bool passed = false;
};

struct VerifyOptions {
    std::uint64_t seed = 2024;
    int kalman_instances = 200;
    int ode_instances = 100;
    int quadrature_tuples = 500;
    /// Test hook: negate every Ω before use. All Ω-dependent checks must fail.
    bool flip_omega_sign = false;
};

namespace detail {

inline SubstepOperator checked_operator(const FlowBasis& basis, double a, double b, const VerifyOptions& opt) {
    SubstepOperator op = make_substep_operator(basis, a, b);
    if (opt.flip_omega_sign) op.omega = -op.omega;
    return op;
}

inline CheckResult finish(std::string name, double dev, double tol) {
    return CheckResult{std::move(name), dev, tol, std::isfinite(dev) && dev <= tol};
}

}  // namespace detail

/// Flow mean x̄ + E(Ω x̃ + c) against the Kalman mean, relative to max(|x_kf|, |x̄|).
inline CheckResult check_kalman_mean(const VerifyOptions& opt) {
    std::mt19937_64 rng(derive_seed(opt.seed, 1));
    double worst = 0.0;
    for (int i = 0; i < opt.kalman_instances; ++i) {
        const LinearInstance inst = random_linear_instance(rng);
        const FlowBasis basis = build_flow_basis(inst.prior, inst.meas);
        const SubstepOperator op = detail::checked_operator(basis, 0.0, 1.0, opt);
        const Vector flow_mean =
            inst.prior.mean + basis.E * (op.omega.cwiseProduct(basis.x_tilde) + op.c);
        const Vector kf_mean = kalman_update(inst.prior, inst.meas).mean;
        const double scale = std::max(kf_mean.norm(), inst.prior.mean.norm());
        worst = std::max(worst, (flow_mean - kf_mean).norm() / scale);
    }
    return detail::finish("kalman_mean_equivalence", worst, 1e-9);
}

/// Φ P Φ^T against the Kalman covariance, relative to |P|.
inline CheckResult check_kalman_covariance(const VerifyOptions& opt) {
    std::mt19937_64 rng(derive_seed(opt.seed, 1));
    double worst = 0.0;
    for (int i = 0; i < opt.kalman_instances; ++i) {
        const LinearInstance inst = random_linear_instance(rng);
        const FlowBasis basis = build_flow_basis(inst.prior, inst.meas);
        const Matrix phi = transition_matrix(detail::checked_operator(basis, 0.0, 1.0, opt), basis);
        const Matrix flow_cov = phi * inst.prior.cov * phi.transpose();
        const Matrix kf_cov = kalman_update(inst.prior, inst.meas).cov;
        worst = std::max(worst, (flow_cov - kf_cov).norm() / inst.prior.cov.norm());
    }
    return detail::finish("kalman_covariance_equivalence", worst, 1e-9);
}

/// Closed-form particle update against Dormand-Prince integration at tol 1e-10.
inline CheckResult check_ode_oracle(const VerifyOptions& opt) {
    std::mt19937_64 rng(derive_seed(opt.seed, 2));
    InstanceOptions io;
    io.max_spread = 1e4;
    io.alpha_min_lo = 1e-3;
    io.alpha_min_hi = 1.0;
    io.n_particles = 3;
    double worst = 0.0;
    for (int i = 0; i < opt.ode_instances; ++i) {
        const LinearInstance inst = random_linear_instance(rng, io);
        const FlowBasis basis = build_flow_basis(inst.prior, inst.meas);
        ParticleEnsemble moved = inst.particles;
        apply_substep_inplace(detail::checked_operator(basis, 0.0, 1.0, opt), basis, moved.particles);
        const FlowField field(inst.prior, inst.meas);
        for (Eigen::Index j = 0; j < inst.particles.size(); ++j) {
            const Vector ref = integrate_flow(field, inst.particles.particle(j), 1e-10).state;
            const double dev = (moved.particle(j) - ref).cwiseAbs().maxCoeff() / std::max(1.0, ref.cwiseAbs().maxCoeff());
            worst = std::max(worst, dev);
        }
    }
    return detail::finish("ode_oracle_agreement", worst, 1e-7);
}

/// forcing_step against adaptive quadrature of the forcing integral.
inline CheckResult check_forcing_quadrature(const VerifyOptions& opt) {
    std::mt19937_64 rng(derive_seed(opt.seed, 3));
    std::normal_distribution<double> n;
    std::uniform_real_distribution<double> u(0.0, 1.0);
    double worst = 0.0;
    for (int i = 0; i < opt.quadrature_tuples; ++i) {
        const double alpha = detail::log_uniform(rng, 1e-8, 1e6);
        const double z = 3.0 * n(rng), x = 3.0 * n(rng);
        double a = u(rng), b = u(rng);
        if (a > b) std::swap(a, b);
        if (i % 4 == 0) a = 0.0;
        if (i % 5 == 0) b = 1.0;
        if (b - a < 1e-6) b = std::min(1.0, a + 1e-3);
        const double closed = forcing_step(alpha, z, x, a, b);
        const double quad = quadrature_ci(alpha, z, x, a, b, 1e-13);
        worst = std::max(worst, std::abs(closed - quad) / std::max(1.0, std::abs(quad)));
    }
    return detail::finish("forcing_quadrature_agreement", worst, 1e-9);
}

/// [0, λ1] followed by [λ1, 1] against the single [0, 1] step, per particle.
inline CheckResult check_composition(const VerifyOptions& opt) {
    std::mt19937_64 rng(derive_seed(opt.seed, 4));
    std::uniform_real_distribution<double> u(0.05, 0.95);
    double worst = 0.0;
    for (int i = 0; i < opt.kalman_instances; ++i) {
        const LinearInstance inst = random_linear_instance(rng);
        const FlowBasis basis = build_flow_basis(inst.prior, inst.meas);
        const double mid = u(rng);
        Matrix two = inst.particles.particles;
        apply_substep_inplace(detail::checked_operator(basis, 0.0, mid, opt), basis, two);
        apply_substep_inplace(detail::checked_operator(basis, mid, 1.0, opt), basis, two);
        Matrix one = inst.particles.particles;
        apply_substep_inplace(detail::checked_operator(basis, 0.0, 1.0, opt), basis, one);
        const double scale = std::max(1.0, one.cwiseAbs().maxCoeff());
        worst = std::max(worst, (two - one).cwiseAbs().maxCoeff() / scale);
    }
    return detail::finish("substep_composition", worst, 1e-9);
}

/// Endpoints, monotonicity and constant contraction along α_max.
inline CheckResult check_ccr_schedule(const VerifyOptions&) {
    double worst = 0.0;
    bool shape_ok = true;
    for (double amax : {1e-6, 1.0, 1e3, 1e8}) {
        for (int n : {2, 10, 50}) {
            const Schedule s = ccr_schedule(amax, n);
            shape_ok = shape_ok && s.lambdas.front() == 0.0 && s.lambdas.back() == 1.0;
            for (std::size_t k = 1; k < s.lambdas.size(); ++k) shape_ok = shape_ok && s.lambdas[k] > s.lambdas[k - 1];
            const double expected = std::pow(1.0 + amax, -0.5 / n);
            for (std::size_t k = 1; k < s.lambdas.size(); ++k) {
                const double ratio = std::sqrt((1.0 + s.lambdas[k - 1] * amax) / (1.0 + s.lambdas[k] * amax));
                worst = std::max(worst, std::abs(ratio - expected));
            }
        }
    }
    return detail::finish("ccr_schedule_properties", shape_ok ? worst : INFINITY, 1e-12);
}

inline std::vector<CheckResult> run_verification(const VerifyOptions& opt = {}) {
    return {check_kalman_mean(opt),        check_kalman_covariance(opt), check_ode_oracle(opt),
            check_forcing_quadrature(opt), check_composition(opt),       check_ccr_schedule(opt)};
}

}  // namespace flowfilt
