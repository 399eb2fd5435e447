// Numerical reference for the exact Daum-Huang flow: direct evaluation of
// A(λ), b(λ), an adaptive Dormand-Prince 5(4) integrator, and adaptive
// Gauss-Kronrod quadrature of the per-eigendimension forcing integral.
//
// Nothing here uses the closed-form machinery in analytic_flow.hpp; the two
// paths are meant to check each other.
#pragma once

#include "flowfilt/gaussian.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <utility>

namespace flowfilt {

/// Step-size underflow or step budget exhaustion in the adaptive integrator.
class IntegrationError : public std::runtime_error {
public:
    IntegrationError(const std::string& what, double reached)
        : std::runtime_error(what + " (reached t = " + std::to_string(reached) + ")"), reached_(reached) {}
    double reached() const { return reached_; }

private:
    double reached_;
};

/// Flow field of a linear Gaussian measurement:
///   A(λ) = -1/2 P H^T (λ H P H^T + R)^{-1} H
///   b(λ) = (I + 2λA) [(I + λA) P H^T R^{-1} z + A x̄]
class FlowField {
public:
    FlowField(GaussianBelief prior, LinearMeasurement m) : prior_(std::move(prior)), m_(std::move(m)) {
        if (m_.H.cols() != prior_.dim()) {
            throw std::invalid_argument("measurement matrix does not match state dimension");
        }
        validate(prior_);
        validate(m_);
        pht_ = prior_.cov * m_.H.transpose();
        hpht_ = symmetrized(m_.H * pht_);
        Eigen::LLT<Matrix> r_llt(m_.R);
        pht_rinv_z_ = pht_ * r_llt.solve(m_.z);
    }

    Eigen::Index dim() const { return prior_.dim(); }
    const GaussianBelief& prior() const { return prior_; }
    const LinearMeasurement& measurement() const { return m_; }

    Matrix A(double lambda) const {
        const Matrix s = lambda * hpht_ + m_.R;
        Eigen::LLT<Matrix> llt(s);
        return -0.5 * pht_ * llt.solve(m_.H);
    }

    std::pair<Matrix, Vector> eval(double lambda) const {
        const Eigen::Index n = dim();
        Matrix a = A(lambda);
        const Matrix id = Matrix::Identity(n, n);
        Vector b = (id + 2.0 * lambda * a) * ((id + lambda * a) * pht_rinv_z_ + a * prior_.mean);
        return {std::move(a), std::move(b)};
    }

private:
    GaussianBelief prior_;
    LinearMeasurement m_;
    Matrix pht_;
    Matrix hpht_;
    Vector pht_rinv_z_;
};

/// (A(λ), b(λ)) at a pseudo-time in [0, 1].
inline std::pair<Matrix, Vector> eval_field(const FlowField& f, double lambda) {
    if (!(lambda >= 0.0 && lambda <= 1.0)) {
        throw std::invalid_argument("pseudo-time must lie in [0, 1]");
    }
    return f.eval(lambda);
}

struct IntegrationResult {
    Vector state;
    std::size_t accepted_steps = 0;
    std::size_t rejected_steps = 0;
};

struct IntegratorOptions {
    double rtol = 1e-10;
    double atol = 1e-10;
    std::size_t max_steps = 5'000'000;
};

/// Dormand-Prince 5(4) with FSAL and PI step-size control from t0 to t1 for
/// dy/dt = rhs(t, y). Error norm is the RMS of err_i / (atol + rtol max(|y_i|, |y'_i|)).
template <class Rhs>
IntegrationResult integrate_dopri45(Rhs&& rhs, Vector y, double t0, double t1, const IntegratorOptions& opt) {
    static constexpr double c2 = 1.0 / 5, c3 = 3.0 / 10, c4 = 4.0 / 5, c5 = 8.0 / 9;
    static constexpr double a21 = 1.0 / 5;
    static constexpr double a31 = 3.0 / 40, a32 = 9.0 / 40;
    static constexpr double a41 = 44.0 / 45, a42 = -56.0 / 15, a43 = 32.0 / 9;
    static constexpr double a51 = 19372.0 / 6561, a52 = -25360.0 / 2187, a53 = 64448.0 / 6561, a54 = -212.0 / 729;
    static constexpr double a61 = 9017.0 / 3168, a62 = -355.0 / 33, a63 = 46732.0 / 5247, a64 = 49.0 / 176,
                            a65 = -5103.0 / 18656;
    static constexpr double b1 = 35.0 / 384, b3 = 500.0 / 1113, b4 = 125.0 / 192, b5 = -2187.0 / 6784,
                            b6 = 11.0 / 84;
    static constexpr double e1 = 71.0 / 57600, e3 = -71.0 / 16695, e4 = 71.0 / 1920, e5 = -17253.0 / 339200,
                            e6 = 22.0 / 525, e7 = -1.0 / 40;
    // PI controller exponents (Hairer & Wanner, dopri5 defaults).
    static constexpr double beta = 0.04, expo = 0.2 - beta * 0.75;

    IntegrationResult res;
    const double span = t1 - t0;
    if (!(span > 0.0)) throw std::invalid_argument("integration interval must be increasing");

    const auto n = y.size();
    Vector k1 = rhs(t0, y), k2(n), k3(n), k4(n), k5(n), k6(n), k7(n), ytmp(n), ynew(n), err(n);

    auto scale_norm = [&](const Vector& e, const Vector& ya, const Vector& yb) {
        const Vector sc = (ya.cwiseAbs().cwiseMax(yb.cwiseAbs()) * opt.rtol).array() + opt.atol;
        return std::sqrt((e.cwiseQuotient(sc)).squaredNorm() / static_cast<double>(std::max<Eigen::Index>(n, 1)));
    };

    double h;
    {
        const Vector sc = (y.cwiseAbs() * opt.rtol).array() + opt.atol;
        const double d0 = y.cwiseQuotient(sc).norm();
        const double d1 = k1.cwiseQuotient(sc).norm();
        h = (d0 < 1e-5 || d1 < 1e-5) ? 1e-6 * span : 0.01 * d0 / d1;
        h = std::min(h, span);
    }

    double t = t0;
    double err_old = 1e-4;
    while (t < t1) {
        if (res.accepted_steps + res.rejected_steps >= opt.max_steps) {
            throw IntegrationError("adaptive integrator exceeded its step budget", t);
        }
        if (h < 1e-15 * std::max(1.0, std::abs(t)) * 16.0) {
            throw IntegrationError("adaptive integrator step size underflow", t);
        }
        const bool last = t + h >= t1;
        if (last) h = t1 - t;

        ytmp = y + h * a21 * k1;
        k2 = rhs(t + c2 * h, ytmp);
        ytmp = y + h * (a31 * k1 + a32 * k2);
        k3 = rhs(t + c3 * h, ytmp);
        ytmp = y + h * (a41 * k1 + a42 * k2 + a43 * k3);
        k4 = rhs(t + c4 * h, ytmp);
        ytmp = y + h * (a51 * k1 + a52 * k2 + a53 * k3 + a54 * k4);
        k5 = rhs(t + c5 * h, ytmp);
        ytmp = y + h * (a61 * k1 + a62 * k2 + a63 * k3 + a64 * k4 + a65 * k5);
        k6 = rhs(t + h, ytmp);
        ynew = y + h * (b1 * k1 + b3 * k3 + b4 * k4 + b5 * k5 + b6 * k6);
        k7 = rhs(t + h, ynew);
        err = h * (e1 * k1 + e3 * k3 + e4 * k4 + e5 * k5 + e6 * k6 + e7 * k7);

        const double en = scale_norm(err, y, ynew);
        if (!std::isfinite(en)) {
            h *= 0.1;
            ++res.rejected_steps;
            continue;
        }
        if (en <= 1.0) {
            t = last ? t1 : t + h;
            y.swap(ynew);
            k1.swap(k7);
            ++res.accepted_steps;
            const double fac = (en == 0.0) ? 10.0 : 0.9 * std::pow(en, -expo) * std::pow(err_old, beta);
            h *= std::clamp(fac, 0.2, 10.0);
            err_old = std::max(en, 1e-4);
        } else {
            h *= std::max(0.2, 0.9 * std::pow(en, -0.2));
            ++res.rejected_steps;
        }
    }
    res.state = std::move(y);
    return res;
}

/// Integrates the flow ODE for one particle from λ = 0 to λ = 1 at relative
/// (and absolute) tolerance `tol`.
inline IntegrationResult integrate_flow(const FlowField& f, const Vector& x0, double tol,
                                        std::size_t max_steps = 5'000'000) {
    if (!(tol >= 1e-13 && tol <= 1e-3)) {
        throw std::invalid_argument("integration tolerance must lie in [1e-13, 1e-3]");
    }
    if (x0.size() != f.dim()) throw std::invalid_argument("initial state has wrong dimension");
    auto rhs = [&f](double lambda, const Vector& x) -> Vector {
        auto [a, b] = f.eval(lambda);
        return a * x + b;
    };
    return integrate_dopri45(rhs, x0, 0.0, 1.0, IntegratorOptions{tol, tol, max_steps});
}

namespace detail {

// Gauss-Kronrod 7/15 nodes and weights on [-1, 1].
inline constexpr std::array<double, 8> kronrod_nodes = {
    0.991455371120812639206854697526329, 0.949107912342758524526189684047851, 0.864864423359769072789712788640926,
    0.741531185599394439863864773280788, 0.586087235467691130294144845693013, 0.405845151377397166906606412076961,
    0.207784955007898467600689403773245, 0.000000000000000000000000000000000};
inline constexpr std::array<double, 8> kronrod_weights = {
    0.022935322010529224963732008058970, 0.063092092629978553290700663189204, 0.104790010322250183839876322541518,
    0.140653259715525918745189590510238, 0.169004726639267902826583426598550, 0.190350578064785409913256402421014,
    0.204432940075298892414161999234649, 0.209482141084727828012999174891714};
inline constexpr std::array<double, 4> gauss_weights = {
    0.129484966168869693270611432679082, 0.279705391489276667901467771423780, 0.381830050505118944950369775488975,
    0.417959183673469387755102040816327};

template <class Fn>
std::pair<double, double> gauss_kronrod_15(Fn&& fn, double a, double b) {
    const double mid = 0.5 * (a + b), half = 0.5 * (b - a);
    const double fc = fn(mid);
    double kronrod = kronrod_weights[7] * fc;
    double gauss = gauss_weights[3] * fc;
    for (int i = 0; i < 7; ++i) {
        const double dx = half * kronrod_nodes[static_cast<std::size_t>(i)];
        const double f_sum = fn(mid - dx) + fn(mid + dx);
        kronrod += kronrod_weights[static_cast<std::size_t>(i)] * f_sum;
        if (i % 2 == 1) gauss += gauss_weights[static_cast<std::size_t>(i / 2)] * f_sum;
    }
    return {kronrod * half, std::abs((kronrod - gauss) * half)};
}

template <class Fn>
double adaptive_gk(Fn& fn, double a, double b, double whole, double abs_tol, double total_width, int depth) {
    const auto [value, err] = gauss_kronrod_15(fn, a, b);
    if (err <= abs_tol * (b - a) / total_width || err <= 1e-15 * std::abs(whole) * (b - a) / total_width) {
        return value;
    }
    if (depth >= 64) throw std::runtime_error("quadrature did not reach the requested tolerance");
    const double m = 0.5 * (a + b);
    return adaptive_gk(fn, a, m, whole, abs_tol, total_width, depth + 1) +
           adaptive_gk(fn, m, b, whole, abs_tol, total_width, depth + 1);
}

}  // namespace detail

/// Adaptive Gauss-Kronrod quadrature of f over [a, b]; tolerance is absolute,
/// scaled by max(1, |first estimate|).
template <class Fn>
double integrate_adaptive(Fn fn, double a, double b, double tol) {
    const double whole = detail::gauss_kronrod_15(fn, a, b).first;
    return detail::adaptive_gk(fn, a, b, whole, tol * std::max(1.0, std::abs(whole)), b - a, 0);
}

/// Forcing integral for one eigendimension computed by quadrature:
///   ∫_{λa}^{λb} Ψ(λb, μ) β(μ) dμ,
///   Ψ(λ, μ) = sqrt((1 + μα) / (1 + λα)),
///   β(μ) = (z̃ (1 + μα/2) - x̃/2) / (1 + μα)².
inline double quadrature_ci(double alpha, double z_t, double x_t, double lambda_a, double lambda_b, double tol) {
    if (!(alpha > 0.0) || !(lambda_a >= 0.0) || !(lambda_a < lambda_b) || !(lambda_b <= 1.0)) {
        throw std::invalid_argument("quadrature_ci: need alpha > 0 and 0 <= lambda_a < lambda_b <= 1");
    }
    const double end_scale = 1.0 + lambda_b * alpha;
    auto integrand = [=](double mu) {
        const double g = 1.0 + mu * alpha;
        return std::sqrt(g / end_scale) * (z_t * (1.0 + 0.5 * mu * alpha) - 0.5 * x_t) / (g * g);
    };
    return integrate_adaptive(integrand, lambda_a, lambda_b, tol);
}

}  // namespace flowfilt
