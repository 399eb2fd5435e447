// Bearings-only tracking benchmark: 6-D constant-acceleration target with a
// sinusoidal y-perturbation, two static bearing sensors, a biased prior, and a
// Monte Carlo harness with common random numbers across filters.
//
// State layout: [x, y, vx, vy, ax, ay].
#pragma once

#include "flowfilt/baselines.hpp"
#include "flowfilt/flow_ode.hpp"
#include "flowfilt/naedh.hpp"
#include "flowfilt/random.hpp"

#include <algorithm>
#include <array>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <numbers>
#include <optional>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace flowfilt {

struct ScenarioConfig {
    std::array<Eigen::Vector2d, 2> sensor_positions{Eigen::Vector2d(0.0, 0.0), Eigen::Vector2d(50.0, 0.0)};
    double sigma_theta_deg = 0.05;
    double dt = 1.0;
    int n_steps = 15;
    double sine_amplitude = 2.0;
    double sine_period = 6.0;
    Eigen::Vector2d prior_bias{-10.0, 15.0};
    /// Diagonal of P_0 in state order.
    std::array<double, 6> p0_diag{200.0, 200.0, 10.0, 10.0, 1.0, 1.0};
    /// Spectral density of the white-jerk process noise used by the filters.
    double process_noise_intensity = 0.1;
    std::array<double, 6> initial_state{40.0, 40.0, 2.0, 1.0, 0.05, 0.05};

    bool operator==(const ScenarioConfig&) const = default;
};

inline void validate(const ScenarioConfig& cfg) {
    if ((cfg.sensor_positions[0] - cfg.sensor_positions[1]).norm() == 0.0) {
        throw std::invalid_argument("sensor positions must be distinct");
    }
    if (!(cfg.sigma_theta_deg > 0.0)) throw std::invalid_argument("sigma_theta must be positive");
    if (cfg.n_steps < 1) throw std::invalid_argument("n_steps must be at least 1");
    if (!(cfg.dt > 0.0)) throw std::invalid_argument("dt must be positive");
    if (!(cfg.sine_period > 0.0)) throw std::invalid_argument("sine_period must be positive");
    for (double p : cfg.p0_diag) {
        if (!(p > 0.0)) throw std::invalid_argument("prior covariance diagonal must be positive");
    }
}

/// Discrete constant-acceleration transition for one step of length dt.
inline Matrix ca_transition(double dt) {
    Matrix f = Matrix::Identity(6, 6);
    for (int axis = 0; axis < 2; ++axis) {
        f(axis, 2 + axis) = dt;
        f(axis, 4 + axis) = 0.5 * dt * dt;
        f(2 + axis, 4 + axis) = dt;
    }
    return f;
}

/// Discrete white-jerk process noise with spectral density q.
inline Matrix white_jerk_noise(double dt, double q) {
    const double dt2 = dt * dt, dt3 = dt2 * dt, dt4 = dt3 * dt, dt5 = dt4 * dt;
    const double block[3][3] = {{dt5 / 20, dt4 / 8, dt3 / 6}, {dt4 / 8, dt3 / 3, dt2 / 2}, {dt3 / 6, dt2 / 2, dt}};
    Matrix qm = Matrix::Zero(6, 6);
    for (int axis = 0; axis < 2; ++axis) {
        for (int i = 0; i < 3; ++i) {
            for (int j = 0; j < 3; ++j) qm(2 * i + axis, 2 * j + axis) = q * block[i][j];
        }
    }
    return qm;
}

inline DynamicsModel filter_dynamics(const ScenarioConfig& cfg) {
    return {ca_transition(cfg.dt), white_jerk_noise(cfg.dt, cfg.process_noise_intensity)};
}

/// Ground truth at t_k = k dt, k = 0 ... n_steps - 1: noiseless constant
/// acceleration with y displaced by A sin(2π t / T). Velocity and
/// acceleration components are the unperturbed ones.
inline std::vector<Vector> generate_truth(const ScenarioConfig& cfg) {
    validate(cfg);
    const Matrix f = ca_transition(cfg.dt);
    Vector x = Eigen::Map<const Vector>(cfg.initial_state.data(), 6);
    std::vector<Vector> truth;
    truth.reserve(static_cast<std::size_t>(cfg.n_steps));
    for (int k = 0; k < cfg.n_steps; ++k) {
        const double t = k * cfg.dt;
        Vector shown = x;
        shown(1) += cfg.sine_amplitude * std::sin(2.0 * std::numbers::pi * t / cfg.sine_period);
        truth.push_back(std::move(shown));
        x = f * x;
    }
    return truth;
}

/// Two bearings atan2(y - s_y, x - s_x) in radians with R = σθ² I.
inline MeasurementModel bearing_model(const std::array<Eigen::Vector2d, 2>& sensors, double sigma_theta_deg) {
    if ((sensors[0] - sensors[1]).norm() == 0.0) throw std::invalid_argument("sensor positions must be distinct");
    if (!(sigma_theta_deg > 0.0)) throw std::invalid_argument("sigma_theta must be positive");
    const double sigma = sigma_theta_deg * std::numbers::pi / 180.0;
    auto offset = [sensors](const Vector& x, std::size_t s) {
        const Eigen::Vector2d d(x(0) - sensors[s].x(), x(1) - sensors[s].y());
        if (d.norm() < 1e-9) throw std::domain_error("target coincides with a bearing sensor");
        return d;
    };
    MeasurementModel m;
    m.h = [offset](const Vector& x) {
        Vector z(2);
        for (std::size_t s = 0; s < 2; ++s) {
            const Eigen::Vector2d d = offset(x, s);
            z(static_cast<Eigen::Index>(s)) = std::atan2(d.y(), d.x());
        }
        return z;
    };
    m.jacobian = [offset](const Vector& x) {
        Matrix j = Matrix::Zero(2, x.size());
        for (std::size_t s = 0; s < 2; ++s) {
            const Eigen::Vector2d d = offset(x, s);
            const double r2 = d.squaredNorm();
            j(static_cast<Eigen::Index>(s), 0) = -d.y() / r2;
            j(static_cast<Eigen::Index>(s), 1) = d.x() / r2;
        }
        return j;
    };
    m.R = Matrix::Identity(2, 2) * sigma * sigma;
    m.wrap = {true, true};
    return m;
}

/// z_k = h(truth_k) + v_k with bearings wrapped to (-pi, pi].
inline std::vector<Vector> simulate_measurements(const MeasurementModel& model, const std::vector<Vector>& truth,
                                                 std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal;
    const Matrix l = cholesky_factor(model.R);
    std::vector<Vector> zs;
    zs.reserve(truth.size());
    for (const auto& x : truth) {
        Vector w(model.meas_dim());
        for (Eigen::Index i = 0; i < w.size(); ++i) w(i) = normal(rng);
        Vector z = model.h(x) + l * w;
        for (Eigen::Index i = 0; i < z.size(); ++i) z(i) = wrap_angle(z(i));
        zs.push_back(std::move(z));
    }
    return zs;
}

/// Prior at t_0: truth position offset by the bias, velocity and acceleration
/// unbiased, covariance diag(p0_diag).
inline GaussianBelief biased_prior(const ScenarioConfig& cfg, const Vector& truth0) {
    GaussianBelief prior;
    prior.mean = truth0;
    prior.mean(0) = truth0(0) + cfg.prior_bias.x();
    prior.mean(1) = truth0(1) + cfg.prior_bias.y();
    prior.cov = Eigen::Map<const Vector>(cfg.p0_diag.data(), 6).asDiagonal();
    return prior;
}

/// FNV-1a over the raw bytes of a measurement sequence.
inline std::uint64_t hash_measurements(const std::vector<Vector>& zs) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const auto& z : zs) {
        for (Eigen::Index i = 0; i < z.size(); ++i) {
            unsigned char bytes[sizeof(double)];
            const double v = z(i);
            std::memcpy(bytes, &v, sizeof v);
            for (unsigned char b : bytes) {
                h ^= b;
                h *= 0x100000001b3ULL;
            }
        }
    }
    return h;
}

enum class FilterKind { naedh_lin, naedh_ccr, edh_adaptive, bootstrap_pf, ekf };

inline constexpr std::array<std::pair<FilterKind, const char*>, 5> filter_names{{
    {FilterKind::naedh_lin, "naedh-lin"},
    {FilterKind::naedh_ccr, "naedh-ccr"},
    {FilterKind::edh_adaptive, "edh-adapt"},
    {FilterKind::bootstrap_pf, "bootstrap-pf"},
    {FilterKind::ekf, "ekf"},
}};

inline const char* filter_name(FilterKind k) {
    for (const auto& [kind, name] : filter_names) {
        if (kind == k) return name;
    }
    return "?";
}

inline std::string valid_filter_names() {
    std::string out;
    for (const auto& [kind, name] : filter_names) {
        if (!out.empty()) out += ", ";
        out += name;
    }
    return out;
}

inline FilterKind parse_filter_kind(const std::string& name) {
    for (const auto& [kind, n] : filter_names) {
        if (name == n) return kind;
    }
    throw std::invalid_argument("unknown filter '" + name + "'; valid names: " + valid_filter_names());
}

struct FilterSpec {
    FilterKind kind = FilterKind::naedh_ccr;
    /// Substep count N; the ΔL calibration target for edh-adapt.
    int substeps = 10;
    int particles = 500;
    /// Fixed ΔL for edh-adapt; calibrated when unset.
    std::optional<double> delta_l;

    std::string name() const { return filter_name(kind); }
    bool uses_substeps() const {
        return kind == FilterKind::naedh_lin || kind == FilterKind::naedh_ccr || kind == FilterKind::edh_adaptive;
    }
    bool uses_particles() const { return kind != FilterKind::ekf; }
    bool operator==(const FilterSpec&) const = default;
};

struct TrialResult {
    std::vector<double> position_errors;
    std::vector<double> update_seconds;
    bool diverged = false;
    std::string failure;
    std::uint64_t measurement_hash = 0;

    /// sqrt(mean of squared per-step position errors).
    double rmse() const {
        double s = 0.0;
        for (double e : position_errors) s += e * e;
        return std::sqrt(s / static_cast<double>(position_errors.size()));
    }
};

/// A trial whose final position error exceeds this is counted as diverged.
inline constexpr double divergence_threshold_m = 1e3;

/// Everything one trial needs: identical for all filters given the trial seed.
struct TrialInputs {
    std::vector<Vector> truth;
    TrackingScenario scenario;
    std::uint64_t filter_seed = 0;
};

inline TrialInputs make_trial_inputs(const ScenarioConfig& cfg, std::uint64_t trial_seed) {
    TrialInputs in;
    in.truth = generate_truth(cfg);
    in.scenario.model = bearing_model(cfg.sensor_positions, cfg.sigma_theta_deg);
    in.scenario.measurements = simulate_measurements(in.scenario.model, in.truth, derive_seed(trial_seed, 1));
    in.scenario.initial = biased_prior(cfg, in.truth.front());
    in.scenario.dynamics = filter_dynamics(cfg);
    in.filter_seed = derive_seed(trial_seed, 2);
    return in;
}

inline double position_error(const Vector& estimate, const Vector& truth) {
    return std::hypot(estimate(0) - truth(0), estimate(1) - truth(1));
}

/// Runs one filter on one trial. Failures mark the trial diverged instead of
/// propagating.
inline TrialResult run_trial(const TrialInputs& in, const FilterSpec& spec, double delta_l = 1.0) {
    TrialResult r;
    r.measurement_hash = hash_measurements(in.scenario.measurements);
    EstimateTrack track;
    try {
        switch (spec.kind) {
        case FilterKind::naedh_lin:
        case FilterKind::naedh_ccr: {
            const NaedhParams p{spec.particles, spec.substeps,
                                spec.kind == FilterKind::naedh_ccr ? ScheduleKind::ccr : ScheduleKind::linear,
                                in.filter_seed};
            track = run_filter(in.scenario, p);
            break;
        }
        case FilterKind::edh_adaptive: {
            AdaptiveEulerConfig cfg;
            cfg.delta_l = spec.delta_l.value_or(delta_l);
            cfg.max_substeps = std::max(1000, 100 * spec.substeps);
            track = run_edh_adaptive(in.scenario, spec.particles, cfg, in.filter_seed);
            break;
        }
        case FilterKind::bootstrap_pf:
            track = run_bootstrap_pf(in.scenario, spec.particles, in.filter_seed);
            break;
        case FilterKind::ekf:
            track = run_ekf(in.scenario);
            break;
        }
    } catch (const std::exception& e) {
        r.diverged = true;
        r.failure = e.what();
    }
    r.update_seconds = track.update_seconds;
    const double nan = std::numeric_limits<double>::quiet_NaN();
    r.position_errors.assign(in.truth.size(), nan);
    for (std::size_t k = 0; k < track.means.size(); ++k) r.position_errors[k] = position_error(track.means[k], in.truth[k]);
    const double final_err = r.position_errors.back();
    if (!std::isfinite(final_err) || final_err > divergence_threshold_m) r.diverged = true;
    return r;
}

struct MonteCarloSummary {
    FilterSpec spec;
    double sigma_theta_deg = 0.0;
    int n_trials = 0;
    std::uint64_t base_seed = 0;
    /// Over non-diverged trials; NaN when every trial diverged.
    double rmse_mean = 0.0;
    double rmse_std = 0.0;
    double ms_per_update = 0.0;
    int diverged_trials = 0;
    /// ΔL actually used (edh-adapt only).
    double delta_l = 0.0;
    std::vector<TrialResult> trials;
};

inline std::uint64_t trial_seed(std::uint64_t base_seed, int trial) {
    return derive_seed(base_seed, static_cast<std::uint64_t>(trial));
}

/// Calibrates ΔL on the first update of `n_cases` trials drawn from a seed
/// stream disjoint from the evaluation trials.
inline double calibrate_for_scenario(const ScenarioConfig& cfg, const FilterSpec& spec, std::uint64_t base_seed,
                                     int n_cases = 5) {
    std::vector<TrialInputs> inputs;
    for (int i = 0; i < n_cases; ++i) inputs.push_back(make_trial_inputs(cfg, derive_seed(base_seed ^ 0xCA11B8A7EULL, i)));
    std::vector<CalibrationCase> cases;
    for (const auto& in : inputs) {
        CalibrationCase c;
        c.state = FilterState{sample_ensemble(in.scenario.initial, spec.particles, derive_seed(in.filter_seed, 0)),
                              in.scenario.initial};
        c.model = &in.scenario.model;
        c.z = in.scenario.measurements.front();
        cases.push_back(std::move(c));
    }
    return calibrate_delta_l(cases, spec.substeps, 1e-6, 1e6);
}

/// Aggregates from per-trial results (deterministic, order independent of
/// which worker ran which trial).
inline void aggregate(MonteCarloSummary& s) {
    std::vector<double> rmses;
    double time_sum = 0.0;
    std::size_t time_count = 0;
    s.diverged_trials = 0;
    for (const auto& t : s.trials) {
        if (t.diverged) {
            ++s.diverged_trials;
        } else {
            rmses.push_back(t.rmse());
        }
        for (double secs : t.update_seconds) time_sum += secs;
        time_count += t.update_seconds.size();
    }
    const double nan = std::numeric_limits<double>::quiet_NaN();
    if (rmses.empty()) {
        s.rmse_mean = s.rmse_std = nan;
    } else {
        double sum = 0.0;
        for (double r : rmses) sum += r;
        s.rmse_mean = sum / static_cast<double>(rmses.size());
        double ss = 0.0;
        for (double r : rmses) ss += (r - s.rmse_mean) * (r - s.rmse_mean);
        s.rmse_std = rmses.size() > 1 ? std::sqrt(ss / static_cast<double>(rmses.size() - 1)) : 0.0;
    }
    s.ms_per_update = time_count ? 1e3 * time_sum / static_cast<double>(time_count) : nan;
}

inline unsigned resolve_threads(unsigned requested) {
    if (requested > 0) return requested;
    return std::max(1u, std::thread::hardware_concurrency());
}

/// Runs `n_trials` trials of one filter. Trial i always uses
/// trial_seed(base_seed, i), so different filters see identical truths and
/// measurement noise. `threads` = 0 picks the hardware concurrency.
inline MonteCarloSummary run_monte_carlo(const ScenarioConfig& cfg, const FilterSpec& spec, int n_trials,
                                         std::uint64_t base_seed, unsigned threads = 1) {
    if (n_trials < 1) throw std::invalid_argument("n_trials must be at least 1");
    validate(cfg);
    MonteCarloSummary s;
    s.spec = spec;
    s.sigma_theta_deg = cfg.sigma_theta_deg;
    s.n_trials = n_trials;
    s.base_seed = base_seed;
    if (spec.kind == FilterKind::edh_adaptive) {
        s.delta_l = spec.delta_l ? *spec.delta_l : calibrate_for_scenario(cfg, spec, base_seed);
    }
    s.trials.resize(static_cast<std::size_t>(n_trials));
    std::atomic<int> next{0};
    auto worker = [&] {
        for (int i = next++; i < n_trials; i = next++) {
            s.trials[static_cast<std::size_t>(i)] = run_trial(make_trial_inputs(cfg, trial_seed(base_seed, i)), spec, s.delta_l);
        }
    };
    const unsigned n_workers = std::min<unsigned>(resolve_threads(threads), static_cast<unsigned>(n_trials));
    if (n_workers <= 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (unsigned w = 0; w < n_workers; ++w) pool.emplace_back(worker);
        for (auto& t : pool) t.join();
    }
    aggregate(s);
    return s;
}

/// Ensemble-mean position error along λ for the first measurement update.
struct LambdaTrace {
    std::vector<double> lambdas;
    std::vector<double> errors;
    Vector reference_mean;
};

/// Reference posterior for the first update: the EDH flow with h
/// re-linearized continuously at the running ensemble mean, integrated for the
/// whole ensemble by Dormand-Prince at tolerance `tol`. Integration runs in
/// the warped time u with λ(u) = ((1 + α)^u - 1) / α, α the largest eigenvalue
/// of D at the prior mean; this removes the stiffness along that direction.
inline Vector continuous_flow_reference(const FilterState& state, const MeasurementModel& model, const Vector& z,
                                        double tol = 1e-12) {
    const GaussianBelief& prior = state.belief;
    const Matrix r_inv_sqrt = symmetric_sqrt_inverse(model.R);
    const double amax = build_flow_basis(prior, linearize(model, z, prior.mean).H, r_inv_sqrt, z).alpha_max();
    const double log_growth = std::log1p(amax);
    const Eigen::Index nx = state.ensemble.dim(), np = state.ensemble.size();

    auto rhs = [&](double u, const Vector& flat) -> Vector {
        const Eigen::Map<const Matrix> x(flat.data(), nx, np);
        const double lambda = std::min(1.0, std::expm1(u * log_growth) / amax);
        const double dlambda_du = log_growth * (1.0 + lambda * amax) / amax;
        const FlowField field(prior, linearize(model, z, x.rowwise().mean()));
        const auto [a, b] = field.eval(lambda);
        Matrix v = a * x;
        v.colwise() += b;
        v *= dlambda_du;
        return Eigen::Map<const Vector>(v.data(), v.size());
    };
    const Vector flat0 = Eigen::Map<const Vector>(state.ensemble.particles.data(), nx * np);
    const IntegrationResult res = integrate_dopri45(rhs, flat0, 0.0, 1.0, IntegratorOptions{tol, tol, 5'000'000});
    const Eigen::Map<const Matrix> x1(res.state.data(), nx, np);
    return x1.rowwise().mean();
}

/// λ-trace of the first update for a flow filter (naedh-lin, naedh-ccr or
/// edh-adapt). Errors are distances to the reference posterior mean.
inline LambdaTrace convergence_trace(const ScenarioConfig& cfg, const FilterSpec& spec, std::uint64_t seed,
                                     double delta_l = 1.0) {
    if (!spec.uses_substeps()) throw std::invalid_argument("convergence trace needs a flow filter");
    const TrialInputs in = make_trial_inputs(cfg, seed);
    const FilterState state{sample_ensemble(in.scenario.initial, spec.particles, derive_seed(in.filter_seed, 0)),
                            in.scenario.initial};
    const Vector& z = in.scenario.measurements.front();

    LambdaTrace trace;
    trace.reference_mean = continuous_flow_reference(state, in.scenario.model, z);
    auto record = [&](double lambda, const Matrix& x) {
        trace.lambdas.push_back(lambda);
        trace.errors.push_back(position_error(x.rowwise().mean(), trace.reference_mean));
    };
    record(0.0, state.ensemble.particles);
    const SubstepObserver observer = [&](int, double lambda, const Matrix& x) { record(lambda, x); };
    if (spec.kind == FilterKind::edh_adaptive) {
        AdaptiveEulerConfig ecfg;
        ecfg.delta_l = spec.delta_l.value_or(delta_l);
        ecfg.max_substeps = std::max(1000, 100 * spec.substeps);
        edh_adaptive_update(state, in.scenario.model, z, ecfg, observer);
    } else {
        naedh_update(state, in.scenario.model, z, spec.substeps,
                     spec.kind == FilterKind::naedh_ccr ? ScheduleKind::ccr : ScheduleKind::linear, observer);
    }
    return trace;
}

}  // namespace flowfilt
