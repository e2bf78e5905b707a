#pragma once

#include <cmath>
#include <limits>
#include <stdexcept>
#include <vector>

#include <Eigen/Dense>

#include "lossnet/meanfield.hpp"
#include "lossnet/models.hpp"

namespace lossnet {

inline constexpr double kExponentCap = 700.0;

struct HamiltonianValue {
    double value = 0.0;
    bool saturated = false;  // some pairing <alpha, z> hit the exponent cap
};

/** H(y, alpha) = sum_z mu_y(z) (e^{<alpha,z>} - 1). Constant shifts of alpha are invisible. */
inline HamiltonianValue hamiltonian_full(const ModelSpec& model, const Vec& y, const Vec& alpha) {
    HamiltonianValue out;
    const auto table = limit_rates_raw(model, y);
    for (const auto& e : table) {
        double pairing = 0.0;
        for (const auto& [i, c] : model.jumps()[e.jump].delta) pairing += c * alpha[i];
        if (pairing > kExponentCap) {
            pairing = kExponentCap;
            out.saturated = true;
        }
        out.value += e.rate * (std::exp(pairing) - 1.0);
    }
    return out;
}

inline double hamiltonian(const ModelSpec& model, const Simplex& y, const Vec& alpha) {
    return hamiltonian_full(model, y.values(), alpha).value;
}

struct LegendreOptions {
    double grad_tol = 1e-10;
    int max_iterations = 500;
    double divergence_threshold = 1e6;
};

struct LegendreResult {
    double value = 0.0;                  // L(y, beta); +inf when beta is unattainable
    Vec argmax;                          // canonical zero-mean maximizer (empty when infinite)
    bool finite = true;
    int iterations = 0;
    double grad_norm = std::numeric_limits<double>::quiet_NaN();
};

/**
 * L(y, beta) = sup_alpha <alpha, beta> - H(y, alpha), a damped Newton
 * maximization of a strictly concave function on the zero-mean subspace.
 * Divergence (objective past the threshold, or no convergence within the
 * iteration cap) reports +infinity.
 */
inline LegendreResult legendre_transform(const ModelSpec& model, const Vec& y, const Vec& beta,
                                         const LegendreOptions& opt = {}) {
    const std::size_t n = y.size();
    if (beta.size() != n) throw std::invalid_argument("legendre: beta dimension mismatch");
    if (std::abs(sum(beta)) > 1e-9 * (1.0 + sup_norm(beta)))
        throw std::invalid_argument("legendre: beta must sum to zero");

    const auto table = limit_rates_raw(model, y);
    const Eigen::MatrixXd V = zero_sum_basis(n);
    const auto d = static_cast<Eigen::Index>(n - 1);

    // dense jump columns in reduced coordinates
    const std::size_t m = table.size();
    Eigen::MatrixXd Zr(d, static_cast<Eigen::Index>(m));
    Eigen::VectorXd rates(static_cast<Eigen::Index>(m));
    for (std::size_t j = 0; j < m; ++j) {
        Eigen::VectorXd z = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(n));
        for (const auto& [i, c] : model.jumps()[table[j].jump].delta) z(static_cast<Eigen::Index>(i)) = c;
        Zr.col(static_cast<Eigen::Index>(j)) = V.transpose() * z;
        rates(static_cast<Eigen::Index>(j)) = table[j].rate;
    }
    Eigen::VectorXd beta_r = Eigen::VectorXd::Zero(d);
    {
        Eigen::VectorXd b(static_cast<Eigen::Index>(n));
        for (std::size_t i = 0; i < n; ++i) b(static_cast<Eigen::Index>(i)) = beta[i];
        beta_r = V.transpose() * b;
    }

    auto objective = [&](const Eigen::VectorXd& a) {
        double H = 0.0;
        const Eigen::VectorXd pair = Zr.transpose() * a;
        for (Eigen::Index j = 0; j < pair.size(); ++j)
            H += rates(j) * (std::exp(std::min(pair(j), kExponentCap)) - 1.0);
        return a.dot(beta_r) - H;
    };

    Eigen::VectorXd a = Eigen::VectorXd::Zero(d);
    double f = 0.0;
    LegendreResult res;
    for (int it = 0; it < opt.max_iterations; ++it) {
        res.iterations = it;
        const Eigen::VectorXd pair = Zr.transpose() * a;
        Eigen::VectorXd w(pair.size());
        for (Eigen::Index j = 0; j < pair.size(); ++j) w(j) = rates(j) * std::exp(std::min(pair(j), kExponentCap));
        const Eigen::VectorXd grad = beta_r - Zr * w;
        res.grad_norm = grad.norm();
        if (res.grad_norm <= opt.grad_tol) {
            res.value = std::max(f, 0.0);
            res.argmax = Vec(n, 0.0);
            const Eigen::VectorXd alpha = V * a;
            for (std::size_t i = 0; i < n; ++i) res.argmax[i] = alpha(static_cast<Eigen::Index>(i));
            return res;
        }
        if (f > opt.divergence_threshold) break;

        const Eigen::MatrixXd hess = Zr * w.asDiagonal() * Zr.transpose();  // -d2(objective)
        Eigen::VectorXd dir = hess.ldlt().solve(grad);
        if (!dir.allFinite() || dir.dot(grad) <= 0.0) dir = grad;  // singular curvature: ascend the gradient

        double t = 1.0;
        double ft = objective(a + t * dir);
        const double slack = 1e-14 * (1.0 + std::abs(f));
        if (ft > f + slack) {
            // expanding search speeds up escape along recession directions
            while (t < 1e12) {
                const double f2 = objective(a + 2.0 * t * dir);
                if (f2 <= ft) break;
                t *= 2.0;
                ft = f2;
            }
        } else {
            while (t > 1e-14 && !(ft > f - slack)) {
                t *= 0.5;
                ft = objective(a + t * dir);
            }
            if (t <= 1e-14) break;  // no ascent possible at round-off scale
        }
        a += t * dir;
        f = ft;
    }
    res.value = std::numeric_limits<double>::infinity();
    res.finite = false;
    return res;
}

inline LegendreResult legendre_transform(const ModelSpec& model, const Simplex& y, const Vec& beta,
                                         const LegendreOptions& opt = {}) {
    return legendre_transform(model, y.values(), beta, opt);
}

// ---------------------------------------------------------------------------
// paths and action

struct DiscretePath {
    std::vector<Vec> points;  // M+1 simplex points
    Vec durations;            // M positive segment lengths

    std::size_t segments() const { return durations.size(); }

    void validate() const {
        if (points.size() != durations.size() + 1 || points.size() < 2)
            throw std::invalid_argument("DiscretePath: need M+1 points and M durations");
        for (double d : durations)
            if (!(d > 0.0)) throw std::invalid_argument("DiscretePath: durations must be positive");
    }
};

/** Midpoint-rule action: sum_i dur_i L(midpoint_i, (p_{i+1} - p_i)/dur_i); +inf propagates. */
inline double path_action(const ModelSpec& model, const DiscretePath& path, const LegendreOptions& opt = {}) {
    path.validate();
    double action = 0.0;
    const std::size_t n = path.points.front().size();
    Vec mid(n), vel(n);
    for (std::size_t s = 0; s < path.segments(); ++s) {
        const double dur = path.durations[s];
        for (std::size_t i = 0; i < n; ++i) {
            mid[i] = 0.5 * (path.points[s][i] + path.points[s + 1][i]);
            vel[i] = (path.points[s + 1][i] - path.points[s][i]) / dur;
        }
        const LegendreResult L = legendre_transform(model, mid, vel, opt);
        if (!L.finite) return std::numeric_limits<double>::infinity();
        action += dur * L.value;
    }
    return action;
}

// straight-line path from y0 to y1 with uniform durations totaling T
inline DiscretePath straight_line_path(const Vec& y0, const Vec& y1, std::size_t segments, double T,
                                       double interior_floor = 1e-8) {
    DiscretePath p;
    p.durations.assign(segments, T / static_cast<double>(segments));
    for (std::size_t s = 0; s <= segments; ++s) {
        const double t = static_cast<double>(s) / static_cast<double>(segments);
        Vec pt(y0.size());
        double total = 0.0;
        for (std::size_t i = 0; i < y0.size(); ++i) {
            pt[i] = std::max((1.0 - t) * y0[i] + t * y1[i], interior_floor);
            total += pt[i];
        }
        for (double& x : pt) x /= total;
        p.points.push_back(std::move(pt));
    }
    return p;
}

struct QuasipotentialOptions {
    int max_iterations = 600;
    double grad_tol = 1e-7;
    double interior_floor = 1e-8;
    double fd_step = 1e-7;       // for dH/dy along segments
    LegendreOptions legendre;
    double initial_horizon = 0.0;  // 0: set from the relaxation time at y0
};

struct QuasipotentialEstimate {
    DiscretePath path;
    double action = 0.0;           // upper bound on V(y0, y1) by construction
    int iterations = 0;
    double gradient_norm = 0.0;
    std::size_t segments = 0;
    bool converged = false;
};

namespace detail {

struct SegmentEval {
    double action;
    Vec alpha;        // maximizer
    Vec dL_dy;        // envelope derivative of L in the midpoint
    double H_at_alpha;
    bool finite;
};

inline SegmentEval eval_segment(const ModelSpec& model, const Vec& a, const Vec& b, double dur,
                                const QuasipotentialOptions& opt) {
    const std::size_t n = a.size();
    Vec mid(n), vel(n);
    for (std::size_t i = 0; i < n; ++i) {
        mid[i] = 0.5 * (a[i] + b[i]);
        vel[i] = (b[i] - a[i]) / dur;
    }
    SegmentEval ev;
    const LegendreResult L = legendre_transform(model, mid, vel, opt.legendre);
    ev.finite = L.finite;
    if (!L.finite) {
        ev.action = std::numeric_limits<double>::infinity();
        return ev;
    }
    ev.action = dur * L.value;
    ev.alpha = L.argmax;
    ev.H_at_alpha = hamiltonian_full(model, mid, L.argmax).value;

    // dL/dy = -dH/dy at the fixed maximizer (envelope theorem)
    ev.dL_dy.assign(n, 0.0);
    Vec yp = mid, ym = mid;
    for (std::size_t i = 0; i < n; ++i) {
        yp[i] += opt.fd_step;
        ym[i] = std::max(mid[i] - opt.fd_step, 0.0);
        const double hp = hamiltonian_full(model, yp, L.argmax).value;
        const double hm = hamiltonian_full(model, ym, L.argmax).value;
        ev.dL_dy[i] = -(hp - hm) / (yp[i] - ym[i]);
        yp[i] = mid[i];
        ym[i] = mid[i];
    }
    return ev;
}

} // namespace detail

/**
 * Estimate V(y0, y1) by minimizing the discretized action over interior
 * points and log-durations (projected gradient descent with backtracking
 * from the straight-line initialization). The result is an upper bound on
 * the quasipotential by construction.
 */
inline QuasipotentialEstimate quasipotential(const ModelSpec& model, const Simplex& y0, const Simplex& y1,
                                             std::size_t segments, const QuasipotentialOptions& opt = {}) {
    if (segments < 2) throw std::invalid_argument("quasipotential: need at least 2 segments");
    {
        const Stability st = classify_stability(model, y0);  // also rejects non-equilibria
        if (st.tag != "stable") throw std::invalid_argument("quasipotential: y0 must be a stable equilibrium");
    }

    const std::size_t n = y0.size();
    QuasipotentialEstimate est;
    est.segments = segments;

    if (sup_dist(y0.values(), y1.values()) < 1e-14) {  // degenerate request
        est.path.points = {y0.values(), y1.values()};
        est.path.durations = {1.0};
        est.converged = true;
        return est;
    }

    double T0 = opt.initial_horizon;
    if (T0 <= 0.0) {
        const Stability st = classify_stability(model, y0);
        double slowest = std::numeric_limits<double>::infinity();
        for (const auto& ev : st.eigenvalues) slowest = std::min(slowest, std::abs(ev.real()));
        T0 = slowest > 0.0 ? 2.0 / slowest : 2.0;
    }

    DiscretePath path = straight_line_path(y0.values(), y1.values(), segments, T0, opt.interior_floor);

    const Eigen::MatrixXd V = zero_sum_basis(n);
    const auto d = static_cast<Eigen::Index>(n - 1);
    const std::size_t M = segments;
    const std::size_t dim = (M - 1) * static_cast<std::size_t>(d) + M;

    // pack interior points (reduced coordinates) and log durations
    Eigen::VectorXd x(static_cast<Eigen::Index>(dim));
    auto pack = [&](const DiscretePath& p) {
        for (std::size_t j = 1; j < M; ++j) {
            Eigen::VectorXd pt(static_cast<Eigen::Index>(n));
            for (std::size_t i = 0; i < n; ++i) pt(static_cast<Eigen::Index>(i)) = p.points[j][i] - 1.0 / n;
            x.segment(static_cast<Eigen::Index>((j - 1) * static_cast<std::size_t>(d)), d) = V.transpose() * pt;
        }
        for (std::size_t s = 0; s < M; ++s) x(static_cast<Eigen::Index>((M - 1) * static_cast<std::size_t>(d) + s)) = std::log(p.durations[s]);
    };
    auto unpack = [&](const Eigen::VectorXd& xv, DiscretePath& p, bool& clamped) {
        clamped = false;
        for (std::size_t j = 1; j < M; ++j) {
            const Eigen::VectorXd pt =
                V * xv.segment(static_cast<Eigen::Index>((j - 1) * static_cast<std::size_t>(d)), d);
            double total = 0.0;
            for (std::size_t i = 0; i < n; ++i) {
                double v = pt(static_cast<Eigen::Index>(i)) + 1.0 / n;
                if (v < opt.interior_floor) {
                    v = opt.interior_floor;
                    clamped = true;
                }
                p.points[j][i] = v;
                total += v;
            }
            for (std::size_t i = 0; i < n; ++i) p.points[j][i] /= total;
        }
        for (std::size_t s = 0; s < M; ++s)
            p.durations[s] = std::exp(std::min(xv(static_cast<Eigen::Index>((M - 1) * static_cast<std::size_t>(d) + s)), 20.0));
    };

    pack(path);

    std::vector<detail::SegmentEval> evals(M);
    auto evaluate = [&](const DiscretePath& p, std::vector<detail::SegmentEval>& out) {
        double total = 0.0;
        for (std::size_t s = 0; s < M; ++s) {
            out[s] = detail::eval_segment(model, p.points[s], p.points[s + 1], p.durations[s], opt);
            if (!out[s].finite) return std::numeric_limits<double>::infinity();
            total += out[s].action;
        }
        return total;
    };

    double f = evaluate(path, evals);
    if (!std::isfinite(f)) throw std::runtime_error("quasipotential: infinite action at initialization");

    Eigen::VectorXd grad(static_cast<Eigen::Index>(dim));
    auto gradient = [&](const DiscretePath& p, const std::vector<detail::SegmentEval>& ev) {
        grad.setZero();
        for (std::size_t j = 1; j < M; ++j) {
            Eigen::VectorXd gp = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(n));
            const auto& left = ev[j - 1];
            const auto& right = ev[j];
            for (std::size_t i = 0; i < n; ++i) {
                double v = 0.5 * p.durations[j - 1] * left.dL_dy[i] + 0.5 * p.durations[j] * right.dL_dy[i];
                v += left.alpha[i] - right.alpha[i];
                gp(static_cast<Eigen::Index>(i)) = v;
            }
            grad.segment(static_cast<Eigen::Index>((j - 1) * static_cast<std::size_t>(d)), d) = V.transpose() * gp;
        }
        for (std::size_t s = 0; s < M; ++s)
            grad(static_cast<Eigen::Index>((M - 1) * static_cast<std::size_t>(d) + s)) =
                -p.durations[s] * ev[s].H_at_alpha;
    };

    DiscretePath trial = path;
    std::vector<detail::SegmentEval> trial_evals(M);
    double step = 0.1;
    for (int it = 0; it < opt.max_iterations; ++it) {
        est.iterations = it;
        gradient(path, evals);
        est.gradient_norm = grad.cwiseAbs().maxCoeff();
        if (est.gradient_norm <= opt.grad_tol) {
            est.converged = true;
            break;
        }
        bool accepted = false;
        for (int bt = 0; bt < 40; ++bt) {
            const Eigen::VectorXd xt = x - step * grad;
            bool clamped = false;
            unpack(xt, trial, clamped);
            const double ft = evaluate(trial, trial_evals);
            if (ft < f - 1e-16) {
                x = xt;
                pack(trial);  // keep x consistent with the clamped geometry
                std::swap(path.points, trial.points);
                std::swap(path.durations, trial.durations);
                std::swap(evals, trial_evals);
                f = ft;
                accepted = true;
                step *= 1.3;
                break;
            }
            step *= 0.4;
        }
        if (!accepted) {
            est.converged = est.gradient_norm <= 1e2 * opt.grad_tol;
            break;
        }
    }

    est.path = path;
    est.action = std::max(f, 0.0);
    return est;
}

// ---------------------------------------------------------------------------
// Hamilton-Jacobi and reversibility checks for the split family

/** |H(y, grad g(y))| for the MobileSplit family; zero on the interior in exact arithmetic. */
inline double verify_hjb(const ModelSpec& model, const Simplex& y) {
    if (model.family() != Family::MobileSplit)
        throw std::invalid_argument("verify_hjb: defined for the MobileSplit family");
    if (!y.interior()) throw std::invalid_argument("verify_hjb: y must be interior");
    return std::abs(hamiltonian(model, y, lyapunov_g_gradient(model, y)));
}

// H evaluated at grad g for the unsplit Mobile family (generically nonzero;
// composite move jumps break the Hamilton-Jacobi identity)
inline double hjb_residual_unsplit(const ModelSpec& model, const Simplex& y) {
    if (model.family() != Family::Mobile)
        throw std::invalid_argument("hjb_residual_unsplit: Mobile family only");
    return std::abs(hamiltonian(model, y, lyapunov_g_gradient(model, y)));
}

/** mu_y(z) - mu_y(-z) e^{-<grad g(y), z>}: the asymptotic detailed-balance residual. */
inline double reversibility_residual(const ModelSpec& model, const Simplex& y, const Jump& z) {
    if (model.family() != Family::MobileSplit)
        throw std::invalid_argument("reversibility_residual: defined for the MobileSplit family (no g elsewhere)");
    if (!y.interior()) throw std::invalid_argument("reversibility_residual: y must be interior");

    const Jump rev = z.negated();
    std::size_t iz = StateSpace::npos, ir = StateSpace::npos;
    for (std::size_t j = 0; j < model.jumps().size(); ++j) {
        if (model.jumps()[j] == z) iz = j;
        if (model.jumps()[j] == rev) ir = j;
    }
    if (iz == StateSpace::npos || ir == StateSpace::npos)
        throw std::invalid_argument("reversibility_residual: jump or its reverse not in the jump set");

    double mu_z = 0.0, mu_rev = 0.0;
    for (const auto& e : limit_rates(model, y)) {
        if (e.jump == iz) mu_z = e.rate;
        if (e.jump == ir) mu_rev = e.rate;
    }
    const Vec grad = lyapunov_g_gradient(model, y);
    double pairing = 0.0;
    for (const auto& [i, c] : z.delta) pairing += c * grad[i];
    return mu_z - mu_rev * std::exp(-pairing);
}

} // namespace lossnet
