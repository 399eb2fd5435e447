#include <gtest/gtest.h>

#include "flowfilt/baselines.hpp"
#include "flowfilt/bearings.hpp"
#include "flowfilt/random_instances.hpp"

#include <cmath>
#include <limits>
#include <numbers>
#include <random>

using namespace flowfilt;

namespace {

MeasurementModel linear_model(const LinearMeasurement& m) {
    MeasurementModel model;
    const Matrix h = m.H;
    model.h = [h](const Vector& x) -> Vector { return h * x; };
    model.jacobian = [h](const Vector&) -> Matrix { return h; };
    model.R = m.R;
    return model;
}

GaussianBelief scalar_belief(double mean, double var) {
    return {Vector::Constant(1, mean), Matrix::Constant(1, 1, var)};
}

// Worst particle deviation of adaptive Euler from the exact flow on a linear model.
double euler_error(const GaussianBelief& prior, const LinearMeasurement& m, const ParticleEnsemble& e, double dl) {
    AdaptiveEulerConfig cfg;
    cfg.delta_l = dl;
    cfg.max_substeps = 1'000'000;
    const auto r = edh_adaptive_update({e, prior}, linear_model(m), m.z, cfg);
    const Matrix exact = closed_form_update(prior, m, e).particles;
    return (r.state.ensemble.particles - exact).cwiseAbs().maxCoeff();
}

}  // namespace

// ============================================================================
// edh_adaptive_update
// ============================================================================

TEST(EdhAdaptive, UnboundedDisplacementTakesOneFullStep) {
    const LinearMeasurement m{Matrix::Ones(1, 1), Matrix::Ones(1, 1), Vector::Constant(1, 2.0)};
    AdaptiveEulerConfig cfg;
    cfg.delta_l = std::numeric_limits<double>::infinity();
    const auto r = edh_adaptive_update({ParticleEnsemble{Matrix::Zero(1, 1)}, scalar_belief(0.0, 1.0)},
                                       linear_model(m), m.z, cfg);
    EXPECT_EQ(r.substeps, 1);
    // Euler from λ = 0 lands at b(0) = 2; the exact flow ends at 1.
    EXPECT_DOUBLE_EQ(r.state.ensemble.particles(0, 0), 2.0);
}

TEST(EdhAdaptive, FirstOrderConvergence) {
    std::mt19937_64 rng(17);
    InstanceOptions opt;
    opt.max_spread = 10.0;
    opt.alpha_min_lo = 0.5;
    for (int i = 0; i < 5; ++i) {
        const LinearInstance inst = random_linear_instance(rng, opt);
        double prev = euler_error(inst.prior, inst.meas, inst.particles, 1e-2);
        for (double dl : {5e-3, 2.5e-3, 1.25e-3}) {
            const double err = euler_error(inst.prior, inst.meas, inst.particles, dl);
            EXPECT_GE(err / prev, 0.3) << i << " dl=" << dl;
            EXPECT_LE(err / prev, 0.7) << i << " dl=" << dl;
            prev = err;
        }
    }
}

TEST(EdhAdaptive, StepBudgetExhaustionThrows) {
    const LinearMeasurement m{Matrix::Ones(1, 1), Matrix::Ones(1, 1), Vector::Constant(1, 2.0)};
    AdaptiveEulerConfig cfg;
    cfg.delta_l = 1e-4;
    cfg.max_substeps = 5;
    EXPECT_THROW(edh_adaptive_update({ParticleEnsemble{Matrix::Zero(1, 1)}, scalar_belief(0.0, 1.0)},
                                     linear_model(m), m.z, cfg),
                 IntegrationError);
}

TEST(EdhAdaptive, FiniteOnBearingsFirstUpdate) {
    ScenarioConfig cfg;
    const TrialInputs in = make_trial_inputs(cfg, 3);
    const FilterState s{sample_ensemble(in.scenario.initial, 200, 1), in.scenario.initial};
    AdaptiveEulerConfig ecfg;
    ecfg.delta_l = 1.0;
    const auto r = edh_adaptive_update(s, in.scenario.model, in.scenario.measurements[0], ecfg);
    EXPECT_TRUE(r.state.ensemble.particles.allFinite());
    EXPECT_GT(r.substeps, 0);
}

TEST(EdhAdaptive, ParticlesAtPriorMeanWithMatchingObservation) {
    const LinearMeasurement m{Matrix(Eigen::RowVector2d(1.0, 2.0)), Matrix::Ones(1, 1), Vector::Constant(1, 3.0)};
    const GaussianBelief prior{Eigen::Vector2d(1.0, 1.0), Matrix::Identity(2, 2)};
    const ParticleEnsemble e{prior.mean.replicate(1, 4)};
    AdaptiveEulerConfig cfg;
    cfg.delta_l = 0.05;
    const auto r = edh_adaptive_update({e, prior}, linear_model(m), m.z, cfg);
    EXPECT_TRUE(r.state.ensemble.particles.allFinite());
    // z = H x̄: the Kalman mean is x̄, so the flow should barely move the particles.
    EXPECT_LE((r.state.ensemble.particles.colwise() - prior.mean).cwiseAbs().maxCoeff(), 0.05);
}

TEST(EdhAdaptive, RejectsBadConfig) {
    AdaptiveEulerConfig cfg;
    cfg.delta_l = 0.0;
    EXPECT_THROW(validate(cfg), std::invalid_argument);
    cfg = {};
    cfg.min_step = 2.0;
    EXPECT_THROW(validate(cfg), std::invalid_argument);
}

// ============================================================================
// ΔL calibration
// ============================================================================

namespace {

struct BearingsSample {
    std::vector<TrialInputs> inputs;
    std::vector<CalibrationCase> cases;
};

BearingsSample bearings_sample(std::uint64_t base, int n, Eigen::Index n_p) {
    BearingsSample s;
    ScenarioConfig cfg;
    for (int i = 0; i < n; ++i) s.inputs.push_back(make_trial_inputs(cfg, derive_seed(base, i)));
    for (const auto& in : s.inputs) {
        s.cases.push_back({FilterState{sample_ensemble(in.scenario.initial, n_p, derive_seed(in.filter_seed, 0)),
                                       in.scenario.initial},
                           &in.scenario.model, in.scenario.measurements.front()});
    }
    return s;
}

}  // namespace

TEST(CalibrateDeltaL, SingleStepTarget) {
    const BearingsSample s = bearings_sample(1, 3, 50);
    const double dl = calibrate_delta_l(s.cases, 1);
    AdaptiveEulerConfig cfg;
    cfg.delta_l = dl;
    EXPECT_NEAR(mean_euler_substeps(s.cases, cfg), 1.0, 1.0);
}

TEST(CalibrateDeltaL, HalvingReturnedBoundAddsSubsteps) {
    const BearingsSample s = bearings_sample(2, 3, 50);
    const double dl = calibrate_delta_l(s.cases, 10, 1e-6, 1e6);
    AdaptiveEulerConfig cfg;
    cfg.max_substeps = 1000;
    cfg.delta_l = dl;
    const double at_dl = mean_euler_substeps(s.cases, cfg);
    cfg.delta_l = dl / 2;
    EXPECT_GE(mean_euler_substeps(s.cases, cfg), at_dl);
}

TEST(CalibrateDeltaL, HitsTargetAndGeneralizes) {
    const BearingsSample train = bearings_sample(3, 5, 100);
    const double dl = calibrate_delta_l(train.cases, 10, 1e-6, 1e6);
    AdaptiveEulerConfig cfg;
    cfg.delta_l = dl;
    cfg.max_substeps = 1000;
    EXPECT_NEAR(mean_euler_substeps(train.cases, cfg), 10.0, 1.0);
    const BearingsSample held_out = bearings_sample(4, 5, 100);
    EXPECT_NEAR(mean_euler_substeps(held_out.cases, cfg), 10.0, 1.0);
}

TEST(CalibrateDeltaL, RejectsBadBracket) {
    const BearingsSample s = bearings_sample(5, 2, 20);
    EXPECT_THROW(calibrate_delta_l(s.cases, 10, 1e-8, 1e-6), std::runtime_error);
    EXPECT_THROW(calibrate_delta_l(s.cases, 0), std::invalid_argument);
    EXPECT_THROW(calibrate_delta_l({}, 10), std::invalid_argument);
}

// ============================================================================
// Bootstrap PF
// ============================================================================

TEST(BootstrapPf, ConstantLikelihoodKeepsWeights) {
    MeasurementModel m;
    m.h = [](const Vector&) -> Vector { return Vector::Zero(1); };
    m.jacobian = [](const Vector&) -> Matrix { return Matrix::Zero(1, 1); };
    m.R = Matrix::Identity(1, 1);
    const auto we = uniform_weights(sample_ensemble(scalar_belief(0.0, 1.0), 100, 3));
    const auto out = bootstrap_pf_update(we, m, Vector::Constant(1, 0.3), 4);
    EXPECT_LE((out.weights - we.weights).cwiseAbs().maxCoeff(), 1e-15);
    EXPECT_EQ(out.particles, we.particles);
}

TEST(BootstrapPf, DominantParticleTakesOver) {
    const LinearMeasurement lin{Matrix::Ones(1, 1), Matrix::Constant(1, 1, 1e-4), Vector::Constant(1, 5.0)};
    WeightedEnsemble we;
    we.particles = Eigen::RowVector4d(0.0, 1.0, 5.0, -2.0);
    we.weights = Vector::Constant(4, 0.25);
    const auto out = bootstrap_pf_update(we, linear_model(lin), lin.z, 6);
    for (Eigen::Index j = 0; j < 4; ++j) EXPECT_EQ(out.particles(0, j), 5.0);
    EXPECT_NEAR(out.weights.sum(), 1.0, 1e-15);
}

TEST(BootstrapPf, ScalarPosteriorMean) {
    const LinearMeasurement lin{Matrix::Ones(1, 1), Matrix::Ones(1, 1), Vector::Constant(1, 2.0)};
    const auto we = uniform_weights(sample_ensemble(scalar_belief(0.0, 1.0), 1'000'000, 8));
    const auto out = bootstrap_pf_update(we, linear_model(lin), lin.z, 9);
    EXPECT_NEAR(out.weights.sum(), 1.0, 1e-12);
    EXPECT_NEAR(out.mean()(0), 1.0, 5e-3);
}

TEST(BootstrapPf, ExtremeLikelihoodsStayNormalized) {
    const LinearMeasurement lin{Matrix::Ones(1, 1), Matrix::Constant(1, 1, 1e-12), Vector::Constant(1, 50.0)};
    const auto we = uniform_weights(sample_ensemble(scalar_belief(0.0, 1.0), 1000, 1));
    const auto out = bootstrap_pf_update(we, linear_model(lin), lin.z, 2);
    EXPECT_TRUE(out.weights.allFinite());
    EXPECT_NEAR(out.weights.sum(), 1.0, 1e-12);
}

TEST(SystematicResample, UnbiasedOverSeeds) {
    WeightedEnsemble we;
    we.particles = Eigen::RowVector4d(0.0, 1.0, 2.0, 3.0);
    we.weights = Eigen::Vector4d(0.1, 0.2, 0.3, 0.4);
    double avg = 0.0;
    const int seeds = 200;
    for (int s = 0; s < seeds; ++s) avg += systematic_resample(we, static_cast<std::uint64_t>(s)).mean()(0);
    avg /= seeds;
    // Weighted mean 2.0; systematic resampling of 4 particles has sd below 0.25 per draw.
    EXPECT_NEAR(avg, 2.0, 0.06);
}

TEST(SystematicResample, CopyCountsBoundedByExpectation) {
    WeightedEnsemble we;
    we.particles = Eigen::RowVector4d(0.0, 1.0, 2.0, 3.0);
    we.weights = Eigen::Vector4d(0.1, 0.2, 0.3, 0.4);
    const auto out = systematic_resample(we, 5);
    for (int i = 0; i < 4; ++i) {
        const double copies = (out.particles.array() == double(i)).count();
        EXPECT_GE(copies, std::floor(4 * we.weights(i)));
        EXPECT_LE(copies, std::ceil(4 * we.weights(i)));
    }
}

// ============================================================================
// EKF
// ============================================================================

TEST(Ekf, EqualsKalmanOnAffineModel) {
    std::mt19937_64 rng(44);
    const LinearInstance inst = random_linear_instance(rng);
    const auto ekf = ekf_update(inst.prior, linear_model(inst.meas), inst.meas.z);
    const auto kf = kalman_update(inst.prior, inst.meas);
    EXPECT_LE((ekf.mean - kf.mean).norm(), 1e-12 * std::max(1.0, kf.mean.norm()));
    EXPECT_LE((ekf.cov - kf.cov).norm(), 1e-12 * inst.prior.cov.norm());
}

TEST(Ekf, DueEastBearing) {
    MeasurementModel m;
    m.h = [](const Vector& x) -> Vector { return Vector::Constant(1, std::atan2(x(1), x(0))); };
    m.jacobian = [](const Vector& x) -> Matrix {
        const double r2 = x(0) * x(0) + x(1) * x(1);
        Matrix j(1, 2);
        j << -x(1) / r2, x(0) / r2;
        return j;
    };
    m.R = Matrix::Constant(1, 1, 0.01);
    m.wrap = {true};
    const GaussianBelief prior{Eigen::Vector2d(10.0, 0.0), Matrix::Identity(2, 2)};
    const auto post = ekf_update(prior, m, Vector::Constant(1, 0.01));
    // H = [0, 0.1], S = 0.02, K = [0, 5].
    EXPECT_NEAR(post.mean(0), 10.0, 1e-15);
    EXPECT_NEAR(post.mean(1), 0.05, 1e-15);
    EXPECT_NEAR(post.cov(1, 1), 0.5, 1e-15);
    EXPECT_NEAR(post.cov(0, 0), 1.0, 1e-15);
    const auto same = ekf_update(prior, m, Vector::Zero(1));
    EXPECT_EQ(same.mean, prior.mean);
}

TEST(Ekf, RunOnBearingsScenarioIsFinite) {
    const TrialInputs in = make_trial_inputs(ScenarioConfig{}, 7);
    const auto track = run_ekf(in.scenario);
    ASSERT_EQ(track.means.size(), in.truth.size());
    for (const auto& m : track.means) EXPECT_TRUE(m.allFinite());
}
