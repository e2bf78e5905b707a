#pragma once

#include <cmath>
#include <complex>
#include <functional>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/Eigenvalues>

#include "lossnet/models.hpp"

namespace lossnet {

struct Trajectory {
    Vec times;                    // strictly increasing
    std::vector<Vec> points;      // on the simplex to integrator tolerance
    Vec steps;                    // accepted step sizes
    double min_before_renorm = 0.0;  // most negative component seen pre-renormalization
};

struct IntegrationError : std::runtime_error {
    double time;
    explicit IntegrationError(double t)
        : std::runtime_error("integrate: step size underflow at t = " + std::to_string(t)), time(t) {}
};

namespace detail {

inline void renormalize_onto_simplex(Vec& y, double& min_seen) {
    double s = 0.0;
    for (double& x : y) {
        min_seen = std::min(min_seen, x);
        if (x < 0.0) x = 0.0;
        s += x;
    }
    for (double& x : y) x /= s;
}

} // namespace detail

/**
 * Adaptive Dormand-Prince 5(4) on an arbitrary field, with clamping
 * renormalization onto the simplex after each accepted step. The field is
 * evaluated on raw vectors since embedded stages leave the simplex by
 * O(local error).
 */
template <typename Field>
Trajectory integrate_field(Field&& f, const Vec& y0, double T, double tol) {
    if (!(T > 0.0)) throw std::invalid_argument("integrate: horizon must be positive");
    if (!(tol > 0.0)) throw std::invalid_argument("integrate: tolerance must be positive");

    static const double A[6][6] = {
        {},
        {1.0 / 5},
        {3.0 / 40, 9.0 / 40},
        {44.0 / 45, -56.0 / 15, 32.0 / 9},
        {19372.0 / 6561, -25360.0 / 2187, 64448.0 / 6561, -212.0 / 729},
        {9017.0 / 3168, -355.0 / 33, 46732.0 / 5247, 49.0 / 176, -5103.0 / 18656}};
    static const double B5[7] = {35.0 / 384, 0.0, 500.0 / 1113, 125.0 / 192, -2187.0 / 6784, 11.0 / 84, 0.0};
    static const double B4[7] = {5179.0 / 57600, 0.0,       7571.0 / 16695, 393.0 / 640,
                                 -92097.0 / 339200, 187.0 / 2100, 1.0 / 40};

    const std::size_t d = y0.size();
    Trajectory traj;
    traj.times.push_back(0.0);
    traj.points.push_back(y0);
    traj.min_before_renorm = 0.0;

    Vec y = y0;
    double t = 0.0;
    double h = std::min(1e-3, T);
    std::vector<Vec> k(7, Vec(d, 0.0));
    k[0] = f(y);

    Vec stage(d), y5(d), y4(d);
    while (t < T) {
        if (T - t <= 1e-12 * std::max(1.0, T)) break;  // horizon reached to round-off
        h = std::min(h, T - t);
        if (h < 1e-14 * std::max(1.0, std::abs(t))) throw IntegrationError(t);

        for (int s = 1; s < 6; ++s) {
            for (std::size_t i = 0; i < d; ++i) {
                double acc = y[i];
                for (int j = 0; j < s; ++j) acc += h * A[s][j] * k[j][i];
                stage[i] = acc;
            }
            k[s] = f(stage);
        }
        for (std::size_t i = 0; i < d; ++i) {
            double acc = y[i];
            for (int j = 0; j < 6; ++j) acc += h * B5[j] * k[j][i];
            y5[i] = acc;
        }
        k[6] = f(y5);
        double err = 0.0;
        for (std::size_t i = 0; i < d; ++i) {
            double acc = y[i];
            for (int j = 0; j < 7; ++j) acc += h * B4[j] * k[j][i];
            y4[i] = acc;
            const double sc = tol * (1.0 + std::abs(y5[i]));
            const double e = std::abs(y5[i] - acc) / sc;
            if (!std::isfinite(e) || !std::isfinite(y5[i])) err = std::numeric_limits<double>::infinity();
            err = std::max(err, e);
        }

        if (err <= 1.0) {
            t += h;
            y = y5;
            detail::renormalize_onto_simplex(y, traj.min_before_renorm);
            traj.times.push_back(t);
            traj.points.push_back(y);
            traj.steps.push_back(h);
            k[0] = f(y);  // renormalization invalidates the FSAL stage
        }
        const double factor = err > 0.0 ? 0.9 * std::pow(err, -0.2) : 5.0;
        h *= std::min(5.0, std::max(0.2, factor));
    }
    return traj;
}

inline Trajectory integrate(const ModelSpec& model, const Simplex& y0, double T, double tol = 1e-8) {
    if (model.family() == Family::Closed || model.family() == Family::Open) {
        if (!(y0[y0.size() - 1] < 1.0)) throw std::invalid_argument("integrate: family requires y0_C < 1");
    }
    return integrate_field([&](const Vec& y) { return flow_field_raw(model, y); }, y0.values(), T, tol);
}

// Cubic Hermite evaluation between stored nodes, with derivatives from the field.
template <typename Field>
Vec trajectory_eval_field(const Trajectory& traj, Field&& f, double t) {
    if (traj.times.empty()) throw std::invalid_argument("trajectory_eval: empty trajectory");
    if (t <= traj.times.front()) return traj.points.front();
    if (t >= traj.times.back()) return traj.points.back();
    std::size_t hi = 1;
    while (traj.times[hi] < t) ++hi;
    const std::size_t lo = hi - 1;
    const double h = traj.times[hi] - traj.times[lo];
    const double s = (t - traj.times[lo]) / h;
    const Vec f0 = f(traj.points[lo]), f1 = f(traj.points[hi]);
    const double h00 = (1 + 2 * s) * (1 - s) * (1 - s), h10 = s * (1 - s) * (1 - s);
    const double h01 = s * s * (3 - 2 * s), h11 = s * s * (s - 1);
    Vec out(traj.points[lo].size());
    for (std::size_t i = 0; i < out.size(); ++i)
        out[i] = h00 * traj.points[lo][i] + h10 * h * f0[i] + h01 * traj.points[hi][i] + h11 * h * f1[i];
    return out;
}

inline Vec trajectory_eval(const Trajectory& traj, const ModelSpec& model, double t) {
    return trajectory_eval_field(traj, [&](const Vec& y) { return flow_field_raw(model, y); }, t);
}

// ---------------------------------------------------------------------------
// stability

struct Stability {
    std::string tag;  // "stable" | "unstable" | "marginal"
    std::vector<std::complex<double>> eigenvalues;  // spectrum on the zero-sum subspace
    double max_real = 0.0;
};

/**
 * Linear stability of an equilibrium: central-difference Jacobian of the
 * vector field restricted to the zero-sum subspace (dimension |X| - 1).
 * Real parts within +-1e-8 of zero are reported as marginal.
 */
inline Stability classify_stability(const ModelSpec& model, const Simplex& y_star,
                                    double fd_step = 1e-6, double band = 1e-8) {
    const Vec m = mean_field(model, y_star);
    if (sup_norm(m) > 1e-9) throw std::invalid_argument("classify_stability: point is not an equilibrium");

    const std::size_t n = y_star.size();
    Eigen::MatrixXd J(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n));
    Vec yp = y_star.values(), ym = y_star.values();
    for (std::size_t j = 0; j < n; ++j) {
        yp[j] += fd_step;
        ym[j] -= fd_step;
        const Vec fp = flow_field_raw(model, yp);
        const Vec fm = flow_field_raw(model, ym);
        for (std::size_t i = 0; i < n; ++i)
            J(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = (fp[i] - fm[i]) / (2.0 * fd_step);
        yp[j] = y_star[j];
        ym[j] = y_star[j];
    }

    const Eigen::MatrixXd V = zero_sum_basis(n);
    const Eigen::MatrixXd Jr = V.transpose() * J * V;
    Eigen::EigenSolver<Eigen::MatrixXd> solver(Jr);

    Stability st;
    st.max_real = -std::numeric_limits<double>::infinity();
    for (Eigen::Index i = 0; i < solver.eigenvalues().size(); ++i) {
        st.eigenvalues.push_back(solver.eigenvalues()(i));
        st.max_real = std::max(st.max_real, solver.eigenvalues()(i).real());
    }
    bool any_pos = false, all_neg = true;
    for (const auto& ev : st.eigenvalues) {
        if (ev.real() > band) any_pos = true;
        if (!(ev.real() < -band)) all_neg = false;
    }
    st.tag = any_pos ? "unstable" : (all_neg ? "stable" : "marginal");
    return st;
}

// ---------------------------------------------------------------------------
// equilibria

struct Equilibrium {
    LoadVector rho;
    Simplex y;
    Stability stability;
    double residual = 0.0;   // ||m_y||_inf
    double g_value = std::numeric_limits<double>::quiet_NaN();
};

struct EquilibriumReport {
    std::vector<Equilibrium> equilibria;
    std::size_t scan_points = 0;
    double merge_radius = 0.0;
};

struct ScanOptions {
    int rerouting_grid = 4000;       // rho samples over the bracket [0.98 l, 1.52 l]
    int multistart_per_class = 64;   // log-uniform grid per class, capped at 4096 total
    double rho_min = 1e-3;
    double rho_max = 1e3;
    double merge_radius = 1e-6;
    double residual_tol = 1e-9;
    int max_iterations = 2000;
    double damping = 0.5;
};

double lyapunov_g(const ModelSpec& model, const Simplex& y);  // defined below

namespace detail {

inline Vec fixed_point_map(const ModelSpec& model, const Vec& rho) {
    const Simplex nu = erlang_measure(model.space(), LoadVector(rho));
    return rho_of_y(model, nu).rho;
}

inline bool newton_polish(const ModelSpec& model, Vec& rho, int iters, double tol) {
    const std::size_t K = rho.size();
    for (int it = 0; it < iters; ++it) {
        const Vec g = fixed_point_map(model, rho);
        double err = 0.0;
        for (std::size_t k = 0; k < K; ++k) err = std::max(err, std::abs(g[k] - rho[k]));
        if (err < 1e-13) return true;
        Eigen::MatrixXd J(static_cast<Eigen::Index>(K), static_cast<Eigen::Index>(K));
        Eigen::VectorXd F(static_cast<Eigen::Index>(K));
        for (std::size_t k = 0; k < K; ++k) F(static_cast<Eigen::Index>(k)) = g[k] - rho[k];
        const double h = 1e-7;
        for (std::size_t j = 0; j < K; ++j) {
            Vec rp = rho;
            rp[j] += h * std::max(1.0, std::abs(rho[j]));
            const Vec gp = fixed_point_map(model, rp);
            for (std::size_t i = 0; i < K; ++i)
                J(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) =
                    (gp[i] - g[i]) / (rp[j] - rho[j]) - (i == j ? 1.0 : 0.0);
        }
        Eigen::VectorXd step = J.fullPivLu().solve(-F);
        if (!step.allFinite()) return false;
        for (std::size_t k = 0; k < K; ++k) rho[k] = std::max(1e-12, rho[k] + step(static_cast<Eigen::Index>(k)));
    }
    (void)tol;
    return false;
}

} // namespace detail

/**
 * Equilibria via the Erlang fixed point rho = rho(nu_rho), reduced to K
 * dimensions. Rerouting uses a scalar bracket scan with bisection; Mobile
 * uses damped iteration plus Newton polish from a multistart grid;
 * Closed/Open reduce to the unique rho_lambda.
 */
inline EquilibriumReport find_equilibria(const ModelSpec& model, const ScanOptions& opt = {}) {
    EquilibriumReport report;
    report.merge_radius = opt.merge_radius;
    std::vector<Vec> roots;

    auto add_root = [&](Vec rho) {
        for (const auto& r : roots) {
            double d = 0.0;
            for (std::size_t k = 0; k < rho.size(); ++k) d = std::max(d, std::abs(r[k] - rho[k]));
            if (d <= opt.merge_radius) return;
        }
        roots.push_back(std::move(rho));
    };

    switch (model.family()) {
        case Family::Rerouting: {
            if (opt.rerouting_grid < 2) throw std::invalid_argument("find_equilibria: empty scan grid");
            const double lambda = model.lambda()[0];
            // the multiplier lies in [1, 1.5], so every root lies in [l, 1.5 l]
            const double lo = 0.98 * lambda, hi = 1.52 * lambda;
            auto F = [&](double rho) {
                const double B = blocking_probability(model.space(), LoadVector(rho), 0);
                return lambda * (1.0 + 2.0 * B * (1.0 - B)) - rho;
            };
            report.scan_points = static_cast<std::size_t>(opt.rerouting_grid) + 1;
            double xp = lo, fp = F(lo);
            for (int i = 1; i <= opt.rerouting_grid; ++i) {
                const double x = lo + (hi - lo) * i / opt.rerouting_grid;
                const double fx = F(x);
                if ((fp > 0.0 && fx < 0.0) || (fp < 0.0 && fx > 0.0)) {
                    double a = xp, b = x, fa = fp;
                    for (int it = 0; it < 200; ++it) {
                        const double mid = 0.5 * (a + b);
                        const double fm = F(mid);
                        if ((fa > 0.0) == (fm > 0.0)) {
                            a = mid;
                            fa = fm;
                        } else {
                            b = mid;
                        }
                    }
                    add_root({0.5 * (a + b)});
                }
                xp = x;
                fp = fx;
            }
            break;
        }
        case Family::Mobile:
        case Family::MobileSplit: {
            const std::size_t K = model.num_classes();
            int per_class = opt.multistart_per_class;
            while (std::pow(static_cast<double>(per_class), static_cast<double>(K)) > 4096.0 && per_class > 2)
                per_class /= 2;
            if (per_class < 1) throw std::invalid_argument("find_equilibria: empty scan grid");
            std::vector<Vec> starts;
            Vec start(K, 0.0);
            std::function<void(std::size_t)> fill = [&](std::size_t k) {
                if (k == K) {
                    starts.push_back(start);
                    return;
                }
                for (int i = 0; i < per_class; ++i) {
                    const double f = per_class == 1 ? 0.5 : static_cast<double>(i) / (per_class - 1);
                    start[k] = opt.rho_min * std::pow(opt.rho_max / opt.rho_min, f);
                    fill(k + 1);
                }
            };
            fill(0);
            report.scan_points = starts.size();

            for (const auto& s0 : starts) {
                Vec rho = s0;
                bool converged = false;
                for (int it = 0; it < opt.max_iterations; ++it) {
                    const Vec g = detail::fixed_point_map(model, rho);
                    double err = 0.0;
                    for (std::size_t k = 0; k < K; ++k) err = std::max(err, std::abs(g[k] - rho[k]));
                    for (std::size_t k = 0; k < K; ++k)
                        rho[k] = (1.0 - opt.damping) * rho[k] + opt.damping * g[k];
                    if (err < 1e-13) {
                        converged = true;
                        break;
                    }
                }
                if (!converged) converged = detail::newton_polish(model, rho, 100, 1e-13);
                if (converged) add_root(rho);
                // Newton from the raw start catches repelling fixed points
                Vec rho_n = s0;
                if (detail::newton_polish(model, rho_n, 100, 1e-13)) add_root(rho_n);
            }
            break;
        }
        case Family::Closed:
        case Family::Open: {
            add_root({solve_rho_lambda(model.space(), model.lambda()[0])});
            report.scan_points = 1;
            break;
        }
    }

    for (auto& rho : roots) {
        Equilibrium eq;
        eq.rho = LoadVector(rho);
        eq.y = erlang_measure(model.space(), eq.rho);
        eq.residual = sup_norm(mean_field(model, eq.y));
        if (eq.residual > opt.residual_tol) continue;  // scan artifact, not a verified equilibrium
        eq.stability = classify_stability(model, eq.y);
        if (model.family() == Family::Mobile || model.family() == Family::MobileSplit)
            eq.g_value = lyapunov_g(model, eq.y);
        else if (model.family() == Family::Closed || model.family() == Family::Open)
            eq.g_value = 0.0;  // h(y|nu_rho_lambda) at its own minimum
        report.equilibria.push_back(std::move(eq));
    }
    return report;
}

// ---------------------------------------------------------------------------
// Lyapunov layer

namespace detail {

// int_0^m log(a + b x) dx
inline double integral_log_affine(double a, double b, double m) {
    if (b == 0.0) return m * std::log(a);
    const double am = a + b * m;
    return (am * std::log(am) - am - (a * std::log(a) - a)) / b;
}

} // namespace detail

/**
 * g(y) = sum_n y_n log(n! y_n) - sum_k int_0^{[I_k,y]} log((l_k + g_k x)/(m_k + g_k)) dx
 * for the Mobile and MobileSplit families; finite on the whole simplex with
 * 0 log 0 = 0.
 */
inline double lyapunov_g(const ModelSpec& model, const Simplex& y) {
    if (model.family() != Family::Mobile && model.family() != Family::MobileSplit)
        throw std::invalid_argument("lyapunov_g: defined for Mobile and MobileSplit families");
    const StateSpace& ss = model.space();
    double g = 0.0;
    for (std::size_t i = 0; i < ss.size(); ++i)
        if (y[i] > 0.0) g += y[i] * (ss.log_factorial(i) + std::log(y[i]));
    const Vec totals = marginal_mean(ss, y);
    for (std::size_t k = 0; k < ss.num_classes(); ++k) {
        g -= detail::integral_log_affine(model.lambda()[k], model.gamma()[k], totals[k]);
        g += totals[k] * std::log(model.mu()[k] + model.gamma()[k]);
    }
    return g;
}

// entropy reformulation h(y|nu_rho(y)) - log Z(rho(y)) + sum_k psi_k([I_k,y]),
// psi_k the primitive of x -> gamma_k x / (lambda_k + gamma_k x)
inline double lyapunov_g_entropy_form(const ModelSpec& model, const Simplex& y) {
    if (model.family() != Family::Mobile && model.family() != Family::MobileSplit)
        throw std::invalid_argument("lyapunov_g_entropy_form: defined for Mobile and MobileSplit families");
    const LoadVector rho = rho_of_y(model, y);
    const Simplex nu = erlang_measure(model.space(), rho);
    double g = relative_entropy(y, nu) - log_partition(model.space(), rho);
    const Vec totals = marginal_mean(model.space(), y);
    for (std::size_t k = 0; k < model.num_classes(); ++k) {
        const double l = model.lambda()[k], ga = model.gamma()[k];
        g += ga == 0.0 ? 0.0 : totals[k] - (l / ga) * std::log1p(ga * totals[k] / l);
    }
    return g;
}

// gradient of g: d g / d y_n = log(n! y_n / rho(y)^n) + 1
inline Vec lyapunov_g_gradient(const ModelSpec& model, const Simplex& y) {
    if (model.family() != Family::Mobile && model.family() != Family::MobileSplit)
        throw std::invalid_argument("lyapunov_g_gradient: defined for Mobile and MobileSplit families");
    const StateSpace& ss = model.space();
    const Vec theta = rho_of_y(model, y).theta();
    Vec grad(ss.size());
    for (std::size_t i = 0; i < ss.size(); ++i) {
        double v = ss.log_factorial(i) + std::log(y[i]) + 1.0;
        for (std::size_t k = 0; k < theta.size(); ++k) v -= theta[k] * ss.state(i)[k];
        grad[i] = v;
    }
    return grad;
}

/** h(y | nu_rho_lambda) for the Closed and Open families. */
inline double lyapunov_entropy(const ModelSpec& model, const Simplex& y) {
    if (model.family() != Family::Closed && model.family() != Family::Open)
        throw std::invalid_argument("lyapunov_entropy: defined for Closed and Open families");
    const double rho_l = solve_rho_lambda(model.space(), model.lambda()[0]);
    return relative_entropy(y, erlang_measure(model.space(), LoadVector(rho_l)));
}

struct LyapunovDerivative {
    double direct = 0.0;     // m_y . grad
    double dirichlet = 0.0;  // Dirichlet-form route
};

/**
 * y L_y grad(g), computed two independent ways: the direct pairing of the
 * mean field with the Lyapunov gradient, and the Dirichlet form of L_y with
 * respect to its reversible measure nu_rho(y). Both are <= 0 on the domain
 * where the family's Lyapunov function applies (Closed/Open: the shell
 * [I,y] = lambda).
 */
inline LyapunovDerivative lyapunov_derivative(const ModelSpec& model, const Simplex& y) {
    const StateSpace& ss = model.space();
    if (!y.interior()) throw std::invalid_argument("lyapunov_derivative: y must be interior");

    Vec grad;
    switch (model.family()) {
        case Family::Mobile:
        case Family::MobileSplit:
            grad = lyapunov_g_gradient(model, y);
            break;
        case Family::Closed:
        case Family::Open: {
            const double rho_l = solve_rho_lambda(model.space(), model.lambda()[0]);
            const Simplex nu_l = erlang_measure(ss, LoadVector(rho_l));
            grad.resize(ss.size());
            for (std::size_t i = 0; i < ss.size(); ++i) grad[i] = std::log(y[i] / nu_l[i]) + 1.0;
            break;
        }
        default:
            throw std::invalid_argument("lyapunov_derivative: no Lyapunov function for this family");
    }

    LyapunovDerivative out;
    out.direct = dot(flow_field(model, y), grad);

    Vec a, s;
    queue_rates(model, y.values(), a, s);
    const Simplex nu = erlang_measure(ss, rho_of_y(model, y));
    double acc = 0.0;
    for (std::size_t i = 0; i < ss.size(); ++i) {
        for (std::size_t k = 0; k < ss.num_classes(); ++k) {
            const std::size_t j = ss.up(i, k);
            if (j == StateSpace::npos) continue;
            const double q = nu[i] * a[k];  // = nu[j] * s_k * n_k(j): reversibility
            const double du = y[j] / nu[j] - y[i] / nu[i];
            const double dl = std::log(y[j] / nu[j]) - std::log(y[i] / nu[i]);
            acc += q * du * dl;
        }
    }
    out.dirichlet = -acc;
    return out;
}

/** Open family: d/dt ([I,y] - lambda)^2 = -2 (lambda - [I,y])^2 along the flow. */
inline double l_decrease(const ModelSpec& model, const Simplex& y) {
    if (model.family() != Family::Open) throw std::invalid_argument("l_decrease: Open family only");
    const double gap = model.lambda()[0] - marginal_mean(model.space(), y)[0];
    return -2.0 * gap * gap;
}

/**
 * Loss-queue dynamics whose load is an arbitrary positive C^1 function of
 * the marginal means, rho_k(y) = phi_k([I_k, y]). The Lyapunov construction
 * only uses this structure; the Mobile family is the affine special case.
 * psi_k must be a primitive of x -> x phi_k'(x) / phi_k(x).
 */
struct MarginalDrivenDynamics {
    const StateSpace* space = nullptr;
    std::vector<std::function<double(double)>> phi;
    std::vector<std::function<double(double)>> psi;
    Vec service;  // s_k; arrivals are phi_k * s_k

    Vec rho_at(const Vec& y) const {
        const Vec totals = marginal_mean_raw(*space, y);
        Vec rho(phi.size());
        for (std::size_t k = 0; k < phi.size(); ++k) rho[k] = phi[k](totals[k]);
        return rho;
    }

    Vec flow(const Vec& y) const {
        const Vec rho = rho_at(y);
        Vec a(rho.size());
        for (std::size_t k = 0; k < rho.size(); ++k) a[k] = rho[k] * service[k];
        Vec out(space->size(), 0.0);
        for (std::size_t i = 0; i < space->size(); ++i) {
            for (std::size_t k = 0; k < rho.size(); ++k) {
                const std::size_t u = space->up(i, k);
                if (u != StateSpace::npos) {
                    const double r = a[k] * y[i];
                    out[u] += r;
                    out[i] -= r;
                }
                const std::size_t d = space->down(i, k);
                if (d != StateSpace::npos) {
                    const double r = service[k] * space->state(i)[k] * y[i];
                    out[d] += r;
                    out[i] -= r;
                }
            }
        }
        return out;
    }

    double g(const Simplex& y) const {
        const LoadVector rho(rho_at(y.values()));
        double v = relative_entropy(y, erlang_measure(*space, rho)) - log_partition(*space, rho);
        const Vec totals = marginal_mean(*space, y);
        for (std::size_t k = 0; k < psi.size(); ++k) v += psi[k](totals[k]);
        return v;
    }

    Vec g_gradient(const Simplex& y) const {
        const Vec rho = rho_at(y.values());
        Vec grad(space->size());
        for (std::size_t i = 0; i < space->size(); ++i) {
            double v = space->log_factorial(i) + std::log(y[i]) + 1.0;
            for (std::size_t k = 0; k < rho.size(); ++k) v -= std::log(rho[k]) * space->state(i)[k];
            grad[i] = v;
        }
        return grad;
    }

    LyapunovDerivative derivative(const Simplex& y) const {
        LyapunovDerivative out;
        out.direct = dot(flow(y.values()), g_gradient(y));
        const Vec rho = rho_at(y.values());
        const Simplex nu = erlang_measure(*space, LoadVector(rho));
        double acc = 0.0;
        for (std::size_t i = 0; i < space->size(); ++i) {
            for (std::size_t k = 0; k < rho.size(); ++k) {
                const std::size_t j = space->up(i, k);
                if (j == StateSpace::npos) continue;
                const double q = nu[i] * rho[k] * service[k];
                const double du = y[j] / nu[j] - y[i] / nu[i];
                const double dl = std::log(y[j] / nu[j]) - std::log(y[i] / nu[i]);
                acc += q * du * dl;
            }
        }
        out.dirichlet = -acc;
        return out;
    }
};

} // namespace lossnet
