// Comparison filters: EDH with displacement-limited explicit Euler, bootstrap
// particle filter with systematic resampling, and the EKF.
#pragma once

#include "flowfilt/flow_ode.hpp"
#include "flowfilt/gaussian.hpp"
#include "flowfilt/naedh.hpp"
#include "flowfilt/random.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>
#include <stdexcept>
#include <vector>

namespace flowfilt {

struct AdaptiveEulerConfig {
    /// Largest admissible particle displacement per Euler step.
    double delta_l = 1.0;
    int max_substeps = 10'000;
    double min_step = 1e-9;
};

inline void validate(const AdaptiveEulerConfig& cfg) {
    if (!(cfg.delta_l > 0.0)) throw std::invalid_argument("delta_l must be positive");
    if (cfg.max_substeps < 1) throw std::invalid_argument("max_substeps must be at least 1");
    if (!(cfg.min_step > 0.0 && cfg.min_step <= 1.0)) throw std::invalid_argument("min_step must lie in (0, 1]");
}

struct EdhAdaptiveResult {
    FilterState state;
    int substeps = 0;
};

/// Explicit Euler on dx/dλ = A(λ)x + b(λ), re-linearizing h at the ensemble
/// mean before each step. Step size Δλ = ΔL / max_j |A x_j + b|, clamped to
/// [min_step, 1 - λ]. Throws IntegrationError if λ = 1 is not reached within
/// max_substeps.
inline EdhAdaptiveResult edh_adaptive_update(const FilterState& state, const MeasurementModel& model, const Vector& z,
                                             const AdaptiveEulerConfig& cfg, const SubstepObserver& observer = {}) {
    validate(cfg);
    const GaussianBelief& prior = state.belief;
    if (state.ensemble.dim() != prior.dim()) {
        throw std::invalid_argument("ensemble dimension does not match belief dimension");
    }
    Matrix x = state.ensemble.particles;
    double lambda = 0.0;
    int steps = 0;
    while (lambda < 1.0) {
        if (steps >= cfg.max_substeps) {
            throw IntegrationError("adaptive Euler exhausted max_substeps", lambda);
        }
        const FlowField field(prior, linearize(model, z, x.rowwise().mean()));
        const auto [a, b] = field.eval(lambda);
        Matrix velocity = a * x;
        velocity.colwise() += b;
        const double vmax = velocity.colwise().norm().maxCoeff();
        const double remaining = 1.0 - lambda;
        double dl = vmax > 0.0 ? cfg.delta_l / vmax : remaining;
        dl = std::clamp(dl, std::min(cfg.min_step, remaining), remaining);
        x += dl * velocity;
        lambda = (dl == remaining) ? 1.0 : lambda + dl;
        ++steps;
        if (!x.allFinite()) throw std::runtime_error("non-finite particle in adaptive Euler step");
        if (observer) observer(steps, lambda, x);
    }
    EdhAdaptiveResult out;
    out.state.belief = detail::refresh_companion(prior, model, z, x);
    out.state.ensemble.particles = std::move(x);
    out.substeps = steps;
    return out;
}

/// One first-update problem used to calibrate ΔL.
struct CalibrationCase {
    FilterState state;
    const MeasurementModel* model = nullptr;
    Vector z;
};

inline double mean_euler_substeps(const std::vector<CalibrationCase>& sample, AdaptiveEulerConfig cfg) {
    double total = 0.0;
    for (const auto& c : sample) {
        try {
            total += edh_adaptive_update(c.state, *c.model, c.z, cfg).substeps;
        } catch (const IntegrationError&) {
            total += cfg.max_substeps;
        }
    }
    return total / static_cast<double>(sample.size());
}

/// Bisection (in log ΔL) until the mean substep count over `sample` is within
/// ±1 of `target`. `lo` must give at least, and `hi` at most, the target count.
inline double calibrate_delta_l(const std::vector<CalibrationCase>& sample, int target, double lo = 1e-8,
                                double hi = 1e8, AdaptiveEulerConfig base = {}) {
    if (target < 1) throw std::invalid_argument("target substep count must be at least 1");
    if (sample.empty()) throw std::invalid_argument("calibration sample is empty");
    base.max_substeps = std::max(base.max_substeps, 4 * target);
    auto count = [&](double dl) {
        base.delta_l = dl;
        return mean_euler_substeps(sample, base);
    };
    const double t = target;
    double c_hi = count(hi);
    if (std::abs(c_hi - t) <= 1.0) return hi;
    double c_lo = count(lo);
    if (std::abs(c_lo - t) <= 1.0) return lo;
    if (!(c_lo > t && c_hi < t)) {
        throw std::runtime_error("calibrate_delta_l: bracket [lo, hi] does not straddle the target substep count");
    }
    for (int it = 0; it < 200; ++it) {
        const double mid = std::sqrt(lo * hi);
        const double c = count(mid);
        if (std::abs(c - t) <= 1.0) return mid;
        (c > t ? lo : hi) = mid;
        if (hi / lo < 1.0 + 1e-12) break;
    }
    throw std::runtime_error("calibrate_delta_l: bisection did not reach the target substep count");
}

/// Particles with normalized importance weights.
struct WeightedEnsemble {
    Matrix particles;
    Vector weights;

    Eigen::Index size() const { return particles.cols(); }
    Vector mean() const { return particles * weights; }
};

inline WeightedEnsemble uniform_weights(ParticleEnsemble e) {
    WeightedEnsemble we;
    const auto n = e.size();
    we.particles = std::move(e.particles);
    we.weights = Vector::Constant(n, 1.0 / static_cast<double>(n));
    return we;
}

inline double effective_sample_size(const Vector& w) { return 1.0 / w.squaredNorm(); }

/// Systematic resampling: one uniform offset, N_p evenly spaced pointers.
inline WeightedEnsemble systematic_resample(const WeightedEnsemble& we, std::uint64_t seed) {
    const auto n = we.size();
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> uni(0.0, 1.0 / static_cast<double>(n));
    const double u0 = uni(rng);
    WeightedEnsemble out;
    out.particles.resize(we.particles.rows(), n);
    out.weights = Vector::Constant(n, 1.0 / static_cast<double>(n));
    double cumulative = we.weights(0);
    Eigen::Index i = 0;
    for (Eigen::Index j = 0; j < n; ++j) {
        const double u = u0 + static_cast<double>(j) / static_cast<double>(n);
        while (u > cumulative && i < n - 1) cumulative += we.weights(++i);
        out.particles.col(j) = we.particles.col(i);
    }
    return out;
}

/// Bootstrap PF update: reweight by the Gaussian likelihood of the wrapped
/// innovation (log-sum-exp normalized), resample when ESS < N_p / 2.
inline WeightedEnsemble bootstrap_pf_update(const WeightedEnsemble& we, const MeasurementModel& model, const Vector& z,
                                            std::uint64_t seed) {
    const auto n = we.size();
    if (n < 1 || we.weights.size() != n) throw std::invalid_argument("weighted ensemble is malformed");
    Eigen::LLT<Matrix> r_llt(model.R);
    if (r_llt.info() != Eigen::Success) throw std::invalid_argument("measurement noise R is not positive definite");

    Vector logw(n);
    for (Eigen::Index j = 0; j < n; ++j) {
        const Vector nu = innovation(model, z, we.particles.col(j));
        const Vector white = r_llt.matrixL().solve(nu);
        logw(j) = std::log(we.weights(j)) - 0.5 * white.squaredNorm();
    }
    const double top = logw.maxCoeff();
    if (!std::isfinite(top)) {
        throw std::runtime_error("bootstrap PF: all particle likelihoods vanished");
    }
    WeightedEnsemble out;
    out.particles = we.particles;
    out.weights = (logw.array() - top).exp().matrix();
    out.weights /= out.weights.sum();
    if (effective_sample_size(out.weights) < 0.5 * static_cast<double>(n)) {
        return systematic_resample(out, seed);
    }
    return out;
}

/// EKF measurement update with the wrapped innovation z - h(x̄).
inline GaussianBelief ekf_update(const GaussianBelief& belief, const MeasurementModel& model, const Vector& z) {
    return kalman_update(belief, linearize(model, z, belief.mean));
}

struct EdhTrack : EstimateTrack {
    std::vector<int> substeps;
};

/// EDH-adaptive over a scenario; predict and sampling streams match run_filter.
inline EdhTrack run_edh_adaptive(const TrackingScenario& scenario, Eigen::Index n_particles,
                                 const AdaptiveEulerConfig& cfg, std::uint64_t seed) {
    EdhTrack track;
    FilterState state{sample_ensemble(scenario.initial, n_particles, derive_seed(seed, 0)), scenario.initial};
    for (std::size_t k = 0; k < scenario.measurements.size(); ++k) {
        try {
            if (k > 0) state = predict(state, scenario.dynamics, derive_seed(seed, k));
            int steps = 0;
            const double secs = detail::timed([&] {
                auto r = edh_adaptive_update(state, scenario.model, scenario.measurements[k], cfg);
                state = std::move(r.state);
                steps = r.substeps;
            });
            track.update_seconds.push_back(secs);
            track.substeps.push_back(steps);
        } catch (const std::exception& e) {
            throw FilterFailure(k, e.what());
        }
        track.means.push_back(ensemble_mean(state.ensemble));
    }
    return track;
}

inline EstimateTrack run_bootstrap_pf(const TrackingScenario& scenario, Eigen::Index n_particles, std::uint64_t seed) {
    EstimateTrack track;
    WeightedEnsemble we = uniform_weights(sample_ensemble(scenario.initial, n_particles, derive_seed(seed, 0)));
    for (std::size_t k = 0; k < scenario.measurements.size(); ++k) {
        try {
            if (k > 0) propagate_particles(we.particles, scenario.dynamics, derive_seed(seed, k));
            const double secs = detail::timed([&] {
                we = bootstrap_pf_update(we, scenario.model, scenario.measurements[k],
                                         derive_seed(seed, 1'000'000 + k));
            });
            track.update_seconds.push_back(secs);
        } catch (const std::exception& e) {
            throw FilterFailure(k, e.what());
        }
        track.means.push_back(we.mean());
    }
    return track;
}

inline EstimateTrack run_ekf(const TrackingScenario& scenario) {
    EstimateTrack track;
    GaussianBelief belief = scenario.initial;
    const DynamicsModel& dyn = scenario.dynamics;
    for (std::size_t k = 0; k < scenario.measurements.size(); ++k) {
        try {
            if (k > 0) {
                belief.mean = dyn.transition * belief.mean;
                belief.cov = symmetrized(dyn.transition * belief.cov * dyn.transition.transpose() + dyn.process_noise);
            }
            const double secs =
                detail::timed([&] { belief = ekf_update(belief, scenario.model, scenario.measurements[k]); });
            track.update_seconds.push_back(secs);
        } catch (const std::exception& e) {
            throw FilterFailure(k, e.what());
        }
        track.means.push_back(belief.mean);
    }
    return track;
}

}  // namespace flowfilt
