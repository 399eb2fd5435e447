// N-step analytic EDH update with per-substep re-linearization, and the
// predict/update loop that drives it.
#pragma once

#include "flowfilt/analytic_flow.hpp"
#include "flowfilt/gaussian.hpp"
#include "flowfilt/random.hpp"

#include <chrono>
#include <cmath>
#include <functional>
#include <numbers>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace flowfilt {

/// Wraps an angle to (-pi, pi].
inline double wrap_angle(double a) {
    constexpr double two_pi = 2.0 * std::numbers::pi;
    double w = std::remainder(a, two_pi);
    if (w <= -std::numbers::pi) w += two_pi;
    return w;
}

/// Nonlinear observation z = h(x) + v, v ~ N(0, R).
struct MeasurementModel {
    std::function<Vector(const Vector&)> h;
    std::function<Matrix(const Vector&)> jacobian;
    Matrix R;
    /// Per-component flag: innovation is an angle and gets wrapped. Empty means none.
    std::vector<bool> wrap;

    Eigen::Index meas_dim() const { return R.rows(); }
};

/// z - h(x) with angle components wrapped to (-pi, pi].
inline Vector innovation(const MeasurementModel& model, const Vector& z, const Vector& x) {
    Vector nu = z - model.h(x);
    for (std::size_t i = 0; i < model.wrap.size() && static_cast<Eigen::Index>(i) < nu.size(); ++i) {
        if (model.wrap[i]) nu(static_cast<Eigen::Index>(i)) = wrap_angle(nu(static_cast<Eigen::Index>(i)));
    }
    return nu;
}

/// Affine model around x_lin: H = ∇h(x_lin) and the effective observation
/// z_eff = (z - h(x_lin)) + H x_lin, so H x matches h to first order at x_lin.
inline LinearMeasurement linearize(const MeasurementModel& model, const Vector& z, const Vector& x_lin) {
    LinearMeasurement m;
    m.H = model.jacobian(x_lin);
    m.R = model.R;
    m.z = innovation(model, z, x_lin) + m.H * x_lin;
    return m;
}

struct DynamicsModel {
    Matrix transition;
    Matrix process_noise;
};

/// Particle cloud plus the Gaussian (x̄, P) that parameterizes the flow.
struct FilterState {
    ParticleEnsemble ensemble;
    GaussianBelief belief;
};

/// Called after every substep with (k, λ_k, particles).
using SubstepObserver = std::function<void(int, double, const Matrix&)>;

namespace detail {

inline FlowBasis basis_at_substep(const GaussianBelief& prior, const LinearMeasurement& lin, const Matrix& r_inv_sqrt,
                                  int k) {
    try {
        return build_flow_basis(prior, lin.H, r_inv_sqrt, lin.z);
    } catch (const RankDeficientError& e) {
        throw RankDeficientError("substep " + std::to_string(k) + ": " + e.what(), k);
    }
}

// Companion covariance: Kalman update of the prior with h linearized at the
// post-flow ensemble mean. The companion mean is the ensemble mean.
inline GaussianBelief refresh_companion(const GaussianBelief& prior, const MeasurementModel& model, const Vector& z,
                                        const Matrix& particles) {
    const Vector mean = particles.rowwise().mean();
    GaussianBelief post = kalman_update(prior, linearize(model, z, mean));
    post.mean = mean;
    return post;
}

}  // namespace detail

/// N-step analytic EDH measurement update.
///
/// The first linearization is at the prior mean; its largest eigenvalue fixes
/// the schedule. For k > 1 the model is re-linearized at the current ensemble
/// mean and the basis rebuilt. x̄ and P stay at their prior values throughout.
inline FilterState naedh_update(const FilterState& state, const MeasurementModel& model, const Vector& z, int n,
                                ScheduleKind kind, const SubstepObserver& observer = {}) {
    if (n < 1) throw std::invalid_argument("naedh_update needs at least one substep");
    const GaussianBelief& prior = state.belief;
    if (state.ensemble.dim() != prior.dim()) {
        throw std::invalid_argument("ensemble dimension does not match belief dimension");
    }
    if (z.size() != model.meas_dim()) throw std::invalid_argument("observation has wrong dimension");
    validate(prior);
    const Matrix r_inv_sqrt = symmetric_sqrt_inverse(model.R);

    FlowBasis basis = detail::basis_at_substep(prior, linearize(model, z, prior.mean), r_inv_sqrt, 1);
    const Schedule schedule = make_schedule(kind, basis.alpha_max(), n);

    Matrix x = state.ensemble.particles;
    for (int k = 1; k <= n; ++k) {
        if (k > 1) {
            const Vector x_lin = x.rowwise().mean();
            basis = detail::basis_at_substep(prior, linearize(model, z, x_lin), r_inv_sqrt, k);
        }
        const auto kk = static_cast<std::size_t>(k);
        apply_substep_inplace(make_substep_operator(basis, schedule.lambdas[kk - 1], schedule.lambdas[kk]), basis, x);
        if (!x.allFinite()) {
            throw std::runtime_error("non-finite particle after substep " + std::to_string(k));
        }
        if (observer) observer(k, schedule.lambdas[kk], x);
    }

    FilterState out;
    out.belief = detail::refresh_companion(prior, model, z, x);
    out.ensemble.particles = std::move(x);
    return out;
}

namespace detail {

// Factor L with L L^T = Q for symmetric PSD Q (eigenvalues clamped at zero).
inline Matrix psd_factor(const Matrix& q) {
    require_square(q, "process noise");
    require_symmetric(q, "process noise");
    Eigen::SelfAdjointEigenSolver<Matrix> es(q);
    const Vector& ev = es.eigenvalues();
    const double scale = std::max(1.0, ev.cwiseAbs().maxCoeff());
    if (ev(0) < -1e-12 * scale) {
        throw std::invalid_argument(describe("process noise is not positive semidefinite, eigenvalue ", ev(0)));
    }
    return es.eigenvectors() * ev.cwiseMax(0.0).cwiseSqrt().asDiagonal();
}

}  // namespace detail

/// x <- Φ x + w, w ~ N(0, Q) for every particle; columns of `particles` in place.
inline void propagate_particles(Matrix& particles, const DynamicsModel& dyn, std::uint64_t seed) {
    const Matrix l = detail::psd_factor(dyn.process_noise);
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal;
    Matrix w(particles.rows(), particles.cols());
    for (Eigen::Index j = 0; j < w.cols(); ++j) {
        for (Eigen::Index i = 0; i < w.rows(); ++i) w(i, j) = normal(rng);
    }
    particles = dyn.transition * particles + l * w;
}

inline FilterState predict(const FilterState& state, const DynamicsModel& dyn, std::uint64_t seed) {
    const auto n = state.belief.dim();
    if (dyn.transition.rows() != n || dyn.transition.cols() != n || dyn.process_noise.rows() != n) {
        throw std::invalid_argument("dynamics model does not match state dimension");
    }
    FilterState out = state;
    propagate_particles(out.ensemble.particles, dyn, seed);
    out.belief.mean = dyn.transition * state.belief.mean;
    out.belief.cov = symmetrized(dyn.transition * state.belief.cov * dyn.transition.transpose() + dyn.process_noise);
    return out;
}

/// Initial belief at t_0 and observations z_0 ... z_{K-1}. The first update
/// uses the initial belief directly; each later one is preceded by a predict.
struct TrackingScenario {
    GaussianBelief initial;
    std::vector<Vector> measurements;
    DynamicsModel dynamics;
    MeasurementModel model;
};

struct NaedhParams {
    Eigen::Index n_particles = 500;
    int n_substeps = 10;
    ScheduleKind schedule = ScheduleKind::ccr;
    std::uint64_t seed = 0;
};

/// A filter that failed at update `step` (0-based).
class FilterFailure : public std::runtime_error {
public:
    FilterFailure(std::size_t step, const std::string& what)
        : std::runtime_error("update " + std::to_string(step) + ": " + what), step_(step) {}
    std::size_t step() const { return step_; }

private:
    std::size_t step_;
};

/// Point estimates and per-update wall time of any filter run.
struct EstimateTrack {
    std::vector<Vector> means;
    std::vector<double> update_seconds;
};

struct FilterTrajectory : EstimateTrack {
    /// states[0] is the initial state; states[k + 1] follows update k.
    std::vector<FilterState> states;
};

namespace detail {

template <class Fn>
double timed(Fn&& fn) {
    const auto t0 = std::chrono::steady_clock::now();
    fn();
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace detail

inline FilterTrajectory run_filter(const TrackingScenario& scenario, const NaedhParams& params) {
    FilterTrajectory traj;
    FilterState state{sample_ensemble(scenario.initial, params.n_particles, derive_seed(params.seed, 0)),
                      scenario.initial};
    traj.states.push_back(state);
    for (std::size_t k = 0; k < scenario.measurements.size(); ++k) {
        try {
            if (k > 0) state = predict(state, scenario.dynamics, derive_seed(params.seed, k));
            const double secs = detail::timed([&] {
                state = naedh_update(state, scenario.model, scenario.measurements[k], params.n_substeps,
                                     params.schedule);
            });
            traj.update_seconds.push_back(secs);
        } catch (const std::exception& e) {
            throw FilterFailure(k, e.what());
        }
        traj.means.push_back(ensemble_mean(state.ensemble));
        traj.states.push_back(state);
    }
    return traj;
}

}  // namespace flowfilt
