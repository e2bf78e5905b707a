#pragma once

#include <cmath>
#include <limits>
#include <stdexcept>

#include <Eigen/Dense>

#include "lossnet/statespace.hpp"

namespace lossnet {

// All Gibbs-family computations run in log space: the unnormalized log
// weight of state n is <theta, n> - log n!, summed with log-sum-exp.

inline double log_partition_theta(const StateSpace& ss, const Vec& theta) {
    if (theta.size() != ss.num_classes()) throw std::invalid_argument("log_partition: theta dimension mismatch");
    Vec logs(ss.size());
    for (std::size_t i = 0; i < ss.size(); ++i) {
        double w = -ss.log_factorial(i);
        const auto& n = ss.state(i);
        for (std::size_t k = 0; k < theta.size(); ++k) w += theta[k] * n[k];
        logs[i] = w;
    }
    return log_sum_exp(logs);
}

inline double log_partition(const StateSpace& ss, const LoadVector& rho) {
    return log_partition_theta(ss, rho.theta());
}

// Z(rho) = sum_n rho^n / n!
inline double partition_function(const StateSpace& ss, const LoadVector& rho) {
    return std::exp(log_partition(ss, rho));
}

// Erlang measure nu_rho(n) = rho^n / (n! Z(rho)); strictly positive.
inline Simplex erlang_measure(const StateSpace& ss, const LoadVector& rho) {
    const Vec theta = rho.theta();
    const double logZ = log_partition_theta(ss, theta);
    Vec v(ss.size());
    for (std::size_t i = 0; i < ss.size(); ++i) {
        double w = -ss.log_factorial(i) - logZ;
        const auto& n = ss.state(i);
        for (std::size_t k = 0; k < theta.size(); ++k) w += theta[k] * n[k];
        v[i] = std::exp(w);
    }
    return Simplex::normalized(std::move(v));
}

// B_k(rho): stationary probability that a class-k arrival does not fit.
inline double blocking_probability(const StateSpace& ss, const LoadVector& rho, std::size_t k) {
    if (k >= ss.num_classes()) throw std::invalid_argument("blocking_probability: invalid class index");
    const Simplex nu = erlang_measure(ss, rho);
    double b = 0.0;
    for (std::size_t i = 0; i < ss.size(); ++i)
        if (ss.up(i, k) == StateSpace::npos) b += nu[i];
    return b;
}

// [I_k, y] = sum_n n_k y_n for every class k.
inline Vec marginal_mean(const StateSpace& ss, const Simplex& y) {
    Vec m(ss.num_classes(), 0.0);
    for (std::size_t i = 0; i < ss.size(); ++i) {
        const auto& n = ss.state(i);
        for (std::size_t k = 0; k < m.size(); ++k) m[k] += n[k] * y[i];
    }
    return m;
}

// h(y|y') with 0 log 0 = 0; +infinity when support(y) is not inside support(y').
inline double relative_entropy(const Simplex& y, const Simplex& yp) {
    if (y.size() != yp.size()) throw std::invalid_argument("relative_entropy: dimension mismatch");
    double h = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) {
        if (y[i] == 0.0) continue;
        if (yp[i] == 0.0) return std::numeric_limits<double>::infinity();
        h += y[i] * std::log(y[i] / yp[i]);
    }
    return std::max(h, 0.0);
}

// h(nu_theta | nu_theta') = log(Z(theta')/Z(theta)) - <[I,nu_theta], theta'-theta>,
// the Bregman gap of log Z between theta' and its tangent at theta.
inline double gibbs_entropy_identity(const StateSpace& ss, const Vec& theta, const Vec& theta_p) {
    const double logZ = log_partition_theta(ss, theta);
    const double logZp = log_partition_theta(ss, theta_p);
    const Vec mean = marginal_mean(ss, erlang_measure(ss, LoadVector::from_theta(theta)));
    double s = logZp - logZ;
    for (std::size_t k = 0; k < theta.size(); ++k) s -= mean[k] * (theta_p[k] - theta[k]);
    return s;
}

struct GibbsMoments {
    double log_z = 0.0;
    Vec mean;                 // [I, nu_theta]
    Eigen::MatrixXd cov;      // covariance of n under nu_theta
};

inline GibbsMoments gibbs_moments(const StateSpace& ss, const Vec& theta) {
    const std::size_t K = ss.num_classes();
    GibbsMoments g;
    g.log_z = log_partition_theta(ss, theta);
    g.mean.assign(K, 0.0);
    Eigen::MatrixXd second = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(K), static_cast<Eigen::Index>(K));
    for (std::size_t i = 0; i < ss.size(); ++i) {
        double w = -ss.log_factorial(i) - g.log_z;
        const auto& n = ss.state(i);
        for (std::size_t k = 0; k < K; ++k) w += theta[k] * n[k];
        const double p = std::exp(w);
        for (std::size_t k = 0; k < K; ++k) {
            g.mean[k] += n[k] * p;
            for (std::size_t l = 0; l < K; ++l) second(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(l)) += n[k] * n[l] * p;
        }
    }
    g.cov = second;
    for (std::size_t k = 0; k < K; ++k)
        for (std::size_t l = 0; l < K; ++l)
            g.cov(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(l)) -= g.mean[k] * g.mean[l];
    return g;
}

struct ThetaBarOptions {
    double tolerance = 1e-10;   // on ||[I,nu_theta] - m||_inf
    int max_iterations = 200;
    int max_halvings = 60;
};

/**
 * theta_bar(m): the unique theta with [I, nu_theta] = m, found by damped
 * Newton on the strictly convex map theta -> log Z(theta) - <m, theta>.
 * Non-convergence signals that m is outside (or on the boundary of) the
 * attainable mean set; no a-priori membership test is attempted.
 */
inline Vec solve_theta_bar(const StateSpace& ss, const Vec& m, const ThetaBarOptions& opt = {}) {
    const std::size_t K = ss.num_classes();
    if (m.size() != K) throw std::invalid_argument("solve_theta_bar: mean dimension mismatch");
    Vec theta(K, 0.0);
    auto objective = [&](const Vec& t) {
        double f = log_partition_theta(ss, t);
        for (std::size_t k = 0; k < K; ++k) f -= m[k] * t[k];
        return f;
    };
    double f = objective(theta);
    for (int it = 0; it < opt.max_iterations; ++it) {
        const GibbsMoments g = gibbs_moments(ss, theta);
        double err = 0.0;
        for (std::size_t k = 0; k < K; ++k) err = std::max(err, std::abs(g.mean[k] - m[k]));
        if (err <= opt.tolerance) return theta;

        Eigen::VectorXd grad(static_cast<Eigen::Index>(K));
        for (std::size_t k = 0; k < K; ++k) grad(static_cast<Eigen::Index>(k)) = g.mean[k] - m[k];
        Eigen::VectorXd step = g.cov.ldlt().solve(grad);
        if (!step.allFinite()) throw std::runtime_error("solve_theta_bar: singular Hessian");

        double scale = 1.0;
        Vec trial(K);
        // halve while the objective fails to decrease; the additive slack
        // keeps the search from stalling on round-off once |f - f*| is at
        // machine resolution while the gradient is still above tolerance
        const double slack = 1e-14 * (1.0 + std::abs(f));
        for (int h = 0; h <= opt.max_halvings; ++h) {
            for (std::size_t k = 0; k < K; ++k) trial[k] = theta[k] - scale * step(static_cast<Eigen::Index>(k));
            const double ft = objective(trial);
            if (ft < f + slack) {
                theta = trial;
                f = std::min(ft, f);
                break;
            }
            scale *= 0.5;
            if (h == opt.max_halvings)
                throw std::runtime_error("solve_theta_bar: no decrease; m likely not an attainable interior mean");
        }
    }
    throw std::runtime_error("solve_theta_bar: did not converge; m likely not an attainable interior mean");
}

inline LoadVector solve_rho_bar(const StateSpace& ss, const Vec& m, const ThetaBarOptions& opt = {}) {
    return LoadVector::from_theta(solve_theta_bar(ss, m, opt));
}

// K = 1 specialization: the unique rho with [I, nu_rho] = lambda, 0 < lambda < C.
inline double solve_rho_lambda(const StateSpace& ss, double lambda, const ThetaBarOptions& opt = {}) {
    if (ss.num_classes() != 1) throw std::invalid_argument("solve_rho_lambda: single-class spaces only");
    const double cap = static_cast<double>(ss.capacity()) / static_cast<double>(ss.requirements()[0]);
    if (!(lambda > 0.0) || !(lambda < cap)) throw std::invalid_argument("solve_rho_lambda: lambda must lie in (0, C)");
    return solve_rho_bar(ss, Vec{lambda}, opt).rho[0];
}

} // namespace lossnet
