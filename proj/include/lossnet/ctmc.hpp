#pragma once

#include <cstdint>
#include <cstring>
#include <functional>
#include <map>
#include <optional>
#include <stdexcept>
#include <vector>

#include "lossnet/meanfield.hpp"
#include "lossnet/models.hpp"
#include "lossnet/parallel.hpp"
#include "lossnet/rng.hpp"

namespace lossnet {

// integer-weighted prefix tree for O(log n) categorical sampling
class FenwickTree {
public:
    explicit FenwickTree(std::size_t n) : tree_(n + 1, 0), n_(n) {}

    void add(std::size_t i, long delta) {
        for (std::size_t j = i + 1; j <= n_; j += j & (~j + 1)) tree_[j] += delta;
    }

    long total() const { return prefix(n_); }

    // largest index with prefix sum <= u; u in [0, total)
    std::size_t sample(double u) const {
        std::size_t pos = 0;
        std::size_t mask = 1;
        while ((mask << 1) <= n_) mask <<= 1;
        double rest = u;
        for (; mask > 0; mask >>= 1) {
            const std::size_t next = pos + mask;
            if (next <= n_ && static_cast<double>(tree_[next]) <= rest) {
                rest -= static_cast<double>(tree_[next]);
                pos = next;
            }
        }
        return pos;  // 0-based index
    }

private:
    long prefix(std::size_t i) const {
        long s = 0;
        for (std::size_t j = i; j > 0; j -= j & (~j + 1)) s += tree_[j];
        return s;
    }
    std::vector<long> tree_;
    std::size_t n_;
};

/** Event record of one finite-N realization: start state plus (time, jump) pairs. */
struct SamplePath {
    EmpiricalVector initial;
    double horizon = 0.0;
    std::uint64_t seed = 0;
    std::vector<double> times;          // strictly increasing event times
    std::vector<std::uint32_t> jumps;   // index into model.jumps() per event
    bool absorbed = false;              // total rate hit zero before the horizon

    std::size_t event_count() const { return times.size(); }

    std::uint64_t content_hash() const {
        std::uint64_t h = 0xcbf29ce484222325ULL;
        auto mix = [&h](std::uint64_t v) {
            for (int b = 0; b < 8; ++b) {
                h ^= (v >> (8 * b)) & 0xff;
                h *= 0x100000001b3ULL;
            }
        };
        for (long c : initial.counts) mix(static_cast<std::uint64_t>(c));
        for (std::size_t i = 0; i < times.size(); ++i) {
            std::uint64_t bits;
            static_assert(sizeof(double) == sizeof(std::uint64_t));
            std::memcpy(&bits, &times[i], 8);
            mix(bits);
            mix(jumps[i]);
        }
        return h;
    }
};

namespace detail {

inline void apply_jump(const Jump& j, std::vector<long>& counts) {
    for (const auto& [i, c] : j.delta) counts[i] += c;
}

/** Exact SSA over the full finite-N rate table, recomputed per event. */
class TableEngine {
public:
    TableEngine(const ModelSpec& model, EmpiricalVector y0, std::uint64_t seed)
        : model_(model), counts_(std::move(y0.counts)), N_(y0.N), rng_(Rng::stream(seed, 0)),
          rates_(model.events().size(), 0.0) {
        detail::validate_finite_state(model, EmpiricalVector(counts_, N_));
    }

    double time() const { return time_; }
    const std::vector<long>& counts() const { return counts_; }
    long nodes() const { return N_; }

    // one SSA step; returns the applied jump id or nullopt when absorbed
    std::optional<std::uint32_t> step() {
        const Vec totals = detail::class_totals(model_.space(), counts_);
        const double dN = static_cast<double>(N_);
        double total = 0.0;
        const auto& events = model_.events();
        std::size_t last_positive = 0;
        for (std::size_t e = 0; e < events.size(); ++e) {
            const double r = detail::finite_event_rate(model_, events[e], counts_, dN, totals);
            rates_[e] = r > 0.0 ? r : 0.0;
            if (rates_[e] > 0.0) last_positive = e;
            total += rates_[e];
        }
        if (!(total > 0.0)) return std::nullopt;
        time_ += rng_.exponential(total);
        double u = rng_.uniform() * total;
        std::size_t pick = last_positive;  // rounding may push u past the cumulative sum
        for (std::size_t e = 0; e < events.size(); ++e) {
            if (u < rates_[e]) {
                pick = e;
                break;
            }
            u -= rates_[e];
        }
        const std::uint32_t jump = static_cast<std::uint32_t>(events[pick].jump);
        apply_jump(model_.jumps()[jump], counts_);
        return jump;
    }

private:
    const ModelSpec& model_;
    std::vector<long> counts_;
    long N_;
    Rng rng_;
    double time_ = 0.0;
    Vec rates_;
};

/**
 * SSA specialization for the Rerouting family. The pair-rerouting block has
 * O(C^2) entries but closed-form total rate lambda c_C A (A-1) / ((N-1)(N-2))
 * with A available nodes, and pair targets are two distinct available nodes
 * drawn uniformly, so each event costs O(log C).
 */
class ReroutingEngine {
public:
    ReroutingEngine(const ModelSpec& model, EmpiricalVector y0, std::uint64_t seed)
        : model_(model), counts_(std::move(y0.counts)), N_(y0.N), C_(model.space().size() - 1),
          rng_(Rng::stream(seed, 0)), avail_(C_), dep_(C_ + 1) {
        detail::validate_finite_state(model, EmpiricalVector(counts_, N_));
        for (std::size_t n = 0; n < C_; ++n) avail_.add(n, counts_[n]);
        for (std::size_t n = 1; n <= C_; ++n) dep_.add(n, static_cast<long>(n) * counts_[n]);
        arr_jump_.assign(C_, 0);
        pair_jump_.assign(C_ * C_, 0);
        dep_jump_.assign(C_ + 1, 0);
        for (const auto& ev : model.events()) {
            switch (ev.kind) {
                case EventKind::Arrival: arr_jump_[ev.n] = static_cast<std::uint32_t>(ev.jump); break;
                case EventKind::Departure: dep_jump_[ev.n] = static_cast<std::uint32_t>(ev.jump); break;
                case EventKind::PairReroute:
                    pair_jump_[ev.n * C_ + ev.m] = static_cast<std::uint32_t>(ev.jump);
                    pair_jump_[ev.m * C_ + ev.n] = static_cast<std::uint32_t>(ev.jump);
                    break;
                case EventKind::SameReroute: pair_jump_[ev.n * C_ + ev.n] = static_cast<std::uint32_t>(ev.jump); break;
                default: break;
            }
        }
    }

    double time() const { return time_; }
    const std::vector<long>& counts() const { return counts_; }
    long nodes() const { return N_; }

    std::optional<std::uint32_t> step() {
        const double lambda = model_.lambda()[0];
        const double dN = static_cast<double>(N_);
        const double avail = static_cast<double>(N_ - counts_[C_]);
        const double r_arr = lambda * avail;
        const double r_dep = static_cast<double>(dep_.total());
        const double r_pair = lambda * static_cast<double>(counts_[C_]) * avail * (avail - 1.0) /
                              ((dN - 1.0) * (dN - 2.0));
        const double total = r_arr + r_dep + r_pair;
        if (!(total > 0.0)) return std::nullopt;
        time_ += rng_.exponential(total);

        const double u = rng_.uniform() * total;
        std::uint32_t jump;
        if (u < r_arr) {
            const std::size_t n = avail_.sample(rng_.uniform() * static_cast<double>(avail_.total()));
            jump = arr_jump_[n];
            move_up(n);
        } else if (u < r_arr + r_dep) {
            const std::size_t n = dep_.sample(rng_.uniform() * static_cast<double>(dep_.total()));
            move_down(n);
            jump = dep_jump_[n];
        } else {
            const std::size_t m = avail_.sample(rng_.uniform() * static_cast<double>(avail_.total()));
            avail_.add(m, -1);
            const std::size_t n = avail_.sample(rng_.uniform() * static_cast<double>(avail_.total()));
            avail_.add(m, +1);
            jump = pair_jump_[m * C_ + n];
            move_up(m);
            move_up(n);
        }
        return jump;
    }

private:
    void move_up(std::size_t n) {
        counts_[n] -= 1;
        counts_[n + 1] += 1;
        avail_.add(n, -1);
        if (n + 1 < C_) avail_.add(n + 1, +1);
        dep_.add(n + 1, static_cast<long>(n + 1));
        if (n > 0) dep_.add(n, -static_cast<long>(n));
    }
    void move_down(std::size_t n) {
        counts_[n] -= 1;
        counts_[n - 1] += 1;
        if (n < C_) avail_.add(n, -1);
        avail_.add(n - 1, +1);
        dep_.add(n, -static_cast<long>(n));
        if (n >= 2) dep_.add(n - 1, static_cast<long>(n - 1));
    }

    const ModelSpec& model_;
    std::vector<long> counts_;
    long N_;
    std::size_t C_;
    Rng rng_;
    FenwickTree avail_, dep_;
    std::vector<std::uint32_t> arr_jump_, dep_jump_, pair_jump_;
    double time_ = 0.0;
};

// runs fn(time, jump, counts) after every applied event until the horizon
// or until fn returns false; returns true when the horizon was reached
template <typename Engine, typename Fn>
bool drive(Engine& engine, double T, Fn&& fn, bool* absorbed = nullptr) {
    while (true) {
        const auto jump = engine.step();
        if (!jump) {
            if (absorbed) *absorbed = true;
            return false;
        }
        if (engine.time() > T) return true;
        if (!fn(engine.time(), *jump, engine.counts())) return false;
    }
}

} // namespace detail

/**
 * Gillespie realization of the empirical-measure process on [0, T]:
 * exponential holding time at the total rate, jump drawn proportionally.
 * Identical (seed, inputs) reproduce the path bit-for-bit.
 */
inline SamplePath simulate(const ModelSpec& model, long N, const EmpiricalVector& y0, double T,
                           std::uint64_t seed) {
    if (y0.N != N) throw std::invalid_argument("simulate: y0 must be a state of N nodes");
    SamplePath path;
    path.initial = y0;
    path.horizon = T;
    path.seed = seed;

    auto record = [&](double t, std::uint32_t j, const std::vector<long>&) {
        path.times.push_back(t);
        path.jumps.push_back(j);
        return true;
    };
    bool absorbed = false;
    if (model.family() == Family::Rerouting) {
        detail::ReroutingEngine engine(model, y0, seed);
        detail::drive(engine, T, record, &absorbed);
    } else {
        detail::TableEngine engine(model, y0, seed);
        detail::drive(engine, T, record, &absorbed);
    }
    path.absorbed = absorbed;
    return path;
}

/** Walks the recorded path, calling visit(t_event, counts_after). */
template <typename Fn>
void replay(const ModelSpec& model, const SamplePath& path, Fn&& visit) {
    std::vector<long> counts = path.initial.counts;
    for (std::size_t e = 0; e < path.times.size(); ++e) {
        detail::apply_jump(model.jumps()[path.jumps[e]], counts);
        visit(path.times[e], counts);
    }
}

/**
 * sup over sampled times of || Y^N(t) - y(t) ||_inf between a finite-N path
 * and an ODE trajectory from the matching initial condition.
 */
inline double path_vs_ode(const ModelSpec& model, const SamplePath& path, const Trajectory& traj,
                          std::size_t time_samples = 1000) {
    if (traj.times.empty() || traj.times.back() < path.horizon - 1e-9)
        throw std::invalid_argument("path_vs_ode: trajectory does not cover the path horizon");

    const double dN = static_cast<double>(path.initial.N);
    std::vector<long> counts = path.initial.counts;
    std::size_t e = 0;
    double worst = 0.0;
    for (std::size_t s = 0; s <= time_samples; ++s) {
        const double t = path.horizon * static_cast<double>(s) / static_cast<double>(time_samples);
        while (e < path.times.size() && path.times[e] <= t) {
            detail::apply_jump(model.jumps()[path.jumps[e]], counts);
            ++e;
        }
        const Vec ode = trajectory_eval(traj, model, t);
        for (std::size_t i = 0; i < counts.size(); ++i)
            worst = std::max(worst, std::abs(static_cast<double>(counts[i]) / dN - ode[i]));
    }
    return worst;
}

// ---------------------------------------------------------------------------
// exit times

struct ExitRegion {
    enum class Kind { Ball, GSublevel };
    Kind kind = Kind::Ball;
    double size = 0.1;  // Euclidean radius, or the sublevel offset delta
};

struct ExitSamples {
    long N = 0;
    Vec exit_times;                 // uncensored replicas
    std::size_t censored = 0;
    double mean = 0.0;
    double median = 0.0;
};

struct ExitExperiment {
    ExitRegion region;
    std::size_t replicas_per_n = 0;
    std::vector<ExitSamples> by_n;
    LinearFit fit;        // log(mean exit time) against N
    bool fit_valid = false;
    std::size_t attraction_samples = 0;
};

struct ExitOptions {
    std::size_t attraction_checks = 100;
    double ode_tol = 1e-8;
    std::uint64_t event_cap = 1000000000ULL;
    unsigned threads = 1;
};

namespace detail {

// the region's Lyapunov function, with family constants resolved once
inline std::function<double(const Simplex&)> make_region_g(const ModelSpec& model) {
    switch (model.family()) {
        case Family::Mobile:
        case Family::MobileSplit:
            return [&model](const Simplex& y) { return lyapunov_g(model, y); };
        case Family::Closed:
        case Family::Open: {
            const Simplex nu = erlang_measure(model.space(), LoadVector(solve_rho_lambda(model.space(), model.lambda()[0])));
            return [nu](const Simplex& y) { return relative_entropy(y, nu); };
        }
        default:
            throw std::invalid_argument("exit region: no Lyapunov function available for a g-sublevel region");
    }
}

// fluctuation-shaped random zero-sum direction, normalized in Euclidean norm
inline Vec boundary_direction(Rng& rng, const Vec& center) {
    Vec u(center.size());
    double mean = 0.0;
    for (std::size_t i = 0; i < u.size(); ++i) {
        u[i] = std::sqrt(std::max(center[i], 1e-12)) * rng.normal();
        mean += u[i];
    }
    mean /= static_cast<double>(u.size());
    double norm = 0.0;
    for (double& x : u) {
        x -= mean;
        norm += x * x;
    }
    norm = std::sqrt(norm);
    for (double& x : u) x /= norm;
    return u;
}

inline Simplex clamp_to_simplex(Vec w) {
    for (double& x : w) x = std::max(x, 0.0);
    return Simplex::normalized(std::move(w));
}

} // namespace detail

/**
 * Verifies that the region around a stable equilibrium is attracted: ODE
 * trajectories from boundary samples must converge to y_star without
 * leaving the region. Throws when the check fails.
 */
inline void verify_region_attracted(const ModelSpec& model, const Simplex& y_star, const ExitRegion& region,
                                    std::size_t samples, std::uint64_t seed, double ode_tol = 1e-8) {
    const Stability st = classify_stability(model, y_star);
    if (st.tag != "stable")
        throw std::invalid_argument("run_exit_times: the reference point must be a stable equilibrium");

    std::function<double(const Simplex&)> g_fn;
    double g_star = 0.0;
    if (region.kind == ExitRegion::Kind::GSublevel) {
        g_fn = detail::make_region_g(model);
        g_star = g_fn(y_star);
    }
    Rng rng = Rng::stream(seed, 0x5eed);

    const double slack = 1.0 + 1e-6;
    for (std::size_t s = 0; s < samples; ++s) {
        const Vec u = detail::boundary_direction(rng, y_star.values());
        Simplex start = y_star;
        if (region.kind == ExitRegion::Kind::Ball) {
            Vec w = y_star.values();
            for (std::size_t i = 0; i < w.size(); ++i) w[i] += region.size * u[i];
            start = detail::clamp_to_simplex(std::move(w));
            // clamping can push the sample slightly past the radius; shrink
            // back along the chord, which stays inside the simplex
            const double d0 = euclidean_dist(start.values(), y_star.values());
            if (d0 > region.size) {
                const double shrink = region.size / d0 * (1.0 - 1e-12);
                Vec v = y_star.values();
                for (std::size_t i = 0; i < v.size(); ++i) v[i] += shrink * (start[i] - y_star[i]);
                start = Simplex::normalized(std::move(v));
            }
        } else {
            // bisect along the ray for g(y_star + r u) = g_star + delta
            auto g_at = [&](double r) {
                Vec w = y_star.values();
                for (std::size_t i = 0; i < w.size(); ++i) w[i] += r * u[i];
                return g_fn(detail::clamp_to_simplex(std::move(w))) - g_star;
            };
            double lo = 0.0, hi = 1e-3;
            while (g_at(hi) < region.size && hi < 10.0) hi *= 2.0;
            if (g_at(hi) < region.size)
                throw std::invalid_argument("run_exit_times: sublevel offset exceeds the reachable range");
            for (int it = 0; it < 80; ++it) {
                const double mid = 0.5 * (lo + hi);
                (g_at(mid) < region.size ? lo : hi) = mid;
            }
            Vec w = y_star.values();
            for (std::size_t i = 0; i < w.size(); ++i) w[i] += lo * u[i];
            start = detail::clamp_to_simplex(std::move(w));
        }

        // follow the flow until it lands well inside, watching for excursions
        Vec y = start.values();
        bool converged = false;
        for (int leg = 0; leg < 400 && !converged; ++leg) {
            Trajectory traj = integrate_field([&](const Vec& v) { return flow_field_raw(model, v); }, y, 1.0, ode_tol);
            for (const auto& p : traj.points) {
                const bool inside = region.kind == ExitRegion::Kind::Ball
                                        ? euclidean_dist(p, y_star.values()) <= region.size * slack
                                        : g_fn(Simplex::normalized(p)) <= g_star + region.size * slack;
                if (!inside) throw std::runtime_error("run_exit_times: region is not attracted to the equilibrium");
            }
            y = traj.points.back();
            converged = region.kind == ExitRegion::Kind::Ball
                            ? euclidean_dist(y, y_star.values()) <= 0.05 * region.size
                            : g_fn(Simplex::normalized(y)) <= g_star + 0.05 * region.size;
        }
        if (!converged) throw std::runtime_error("run_exit_times: boundary sample failed to converge to the equilibrium");
    }
}

/**
 * Exit-time Monte Carlo: per replica, simulate from the lattice point
 * nearest y_star until the empirical measure first leaves the region;
 * aggregate per N and fit log(mean exit time) against N.
 */
inline ExitExperiment run_exit_times(const ModelSpec& model, const Simplex& y_star, const ExitRegion& region,
                                     const std::vector<long>& Ns, std::size_t replicas, std::uint64_t seed,
                                     const ExitOptions& opt = {}) {
    if (Ns.empty() || replicas == 0) throw std::invalid_argument("run_exit_times: empty experiment");
    verify_region_attracted(model, y_star, region, opt.attraction_checks, seed, opt.ode_tol);

    ExitExperiment exp;
    exp.region = region;
    exp.replicas_per_n = replicas;
    exp.attraction_samples = opt.attraction_checks;
    std::function<double(const Simplex&)> g_fn;
    double g_star = 0.0;
    if (region.kind == ExitRegion::Kind::GSublevel) {
        g_fn = detail::make_region_g(model);
        g_star = g_fn(y_star);
    }

    std::uint64_t stream = 1;
    for (long N : Ns) {
        const EmpiricalVector start = EmpiricalVector::nearest(y_star, N);
        ExitSamples samples;
        samples.N = N;
        Vec taus(replicas, -1.0);
        const std::uint64_t base = stream;
        stream += replicas;

        parallel_for(replicas, opt.threads, [&](std::size_t r) {
            const std::uint64_t s = seed ^ (base + r);
            double tau = -1.0;
            std::uint64_t events = 0;
            const double dN = static_cast<double>(N);

            auto run_engine = [&](auto&& engine) {
                if (region.kind == ExitRegion::Kind::Ball) {
                    // squared distance to y_star maintained incrementally per event
                    double dist2 = 0.0;
                    for (std::size_t i = 0; i < start.counts.size(); ++i) {
                        const double d = static_cast<double>(start.counts[i]) / dN - y_star[i];
                        dist2 += d * d;
                    }
                    const double r2 = region.size * region.size;
                    while (events < opt.event_cap) {
                        const auto jump = engine.step();
                        if (!jump) break;
                        ++events;
                        for (const auto& [i, c] : model.jumps()[*jump].delta) {
                            const double after = static_cast<double>(engine.counts()[i]) / dN - y_star[i];
                            const double before = after - static_cast<double>(c) / dN;
                            dist2 += after * after - before * before;
                        }
                        if (dist2 > r2) {
                            tau = engine.time();
                            break;
                        }
                    }
                } else {
                    Vec w(start.counts.size());
                    while (events < opt.event_cap) {
                        const auto jump = engine.step();
                        if (!jump) break;
                        ++events;
                        for (std::size_t i = 0; i < w.size(); ++i)
                            w[i] = static_cast<double>(engine.counts()[i]) / dN;
                        if (g_fn(Simplex::normalized(w)) > g_star + region.size) {
                            tau = engine.time();
                            break;
                        }
                    }
                }
            };

            if (model.family() == Family::Rerouting) {
                detail::ReroutingEngine engine(model, start, s);
                run_engine(engine);
            } else {
                detail::TableEngine engine(model, start, s);
                run_engine(engine);
            }
            taus[r] = tau;
        });

        for (double t : taus) {
            if (t >= 0.0)
                samples.exit_times.push_back(t);
            else
                ++samples.censored;
        }
        if (!samples.exit_times.empty()) {
            samples.mean = mean_of(samples.exit_times);
            samples.median = median_of(samples.exit_times);
        }
        exp.by_n.push_back(std::move(samples));
    }

    Vec xs, ys;
    for (const auto& s : exp.by_n) {
        if (!s.exit_times.empty()) {
            xs.push_back(static_cast<double>(s.N));
            ys.push_back(std::log(s.mean));
        }
    }
    if (xs.size() >= 3) {
        exp.fit = linear_fit(xs, ys);
        exp.fit_valid = true;
    }
    return exp;
}

// ---------------------------------------------------------------------------
// stationary occupation

struct OccupationSummary {
    double burnin = 0.0;
    double horizon = 0.0;
    double cell_width = 0.05;
    std::map<std::vector<int>, double> occupation;  // rounded cell -> time fraction
    std::vector<int> modal_cell;
    double modal_mass = 0.0;
    double ref_mass = std::numeric_limits<double>::quiet_NaN();  // time fraction near the reference
};

/**
 * Time-averaged occupation of a coarse partition of the simplex after
 * burn-in; optionally also the fraction of time spent within sup-distance
 * ref_radius of a reference point.
 */
inline OccupationSummary stationary_occupation(const ModelSpec& model, long N, double burnin, double T,
                                               std::uint64_t seed, double cell_width = 0.05,
                                               const Simplex* reference = nullptr, double ref_radius = 0.1,
                                               const EmpiricalVector* start = nullptr) {
    if (!(T > burnin)) throw std::invalid_argument("stationary_occupation: need T > burnin");
    OccupationSummary out;
    out.burnin = burnin;
    out.horizon = T;
    out.cell_width = cell_width;

    const EmpiricalVector y0 = start ? *start
                                     : EmpiricalVector::nearest(Simplex::dirac(0, model.space().size()), N);
    const double dN = static_cast<double>(N);

    std::vector<long> counts = y0.counts;
    double prev_t = 0.0;
    double ref_time = 0.0;
    double measured = 0.0;

    auto account = [&](double from, double to, const std::vector<long>& c) {
        const double lo = std::max(from, burnin);
        const double hi = std::min(to, T);
        if (hi <= lo) return;
        std::vector<int> cell(c.size());
        bool near_ref = reference != nullptr;
        for (std::size_t i = 0; i < c.size(); ++i) {
            const double yi = static_cast<double>(c[i]) / dN;
            cell[i] = static_cast<int>(std::floor(yi / cell_width));
            if (reference && std::abs(yi - (*reference)[i]) > ref_radius) near_ref = false;
        }
        out.occupation[cell] += hi - lo;
        if (near_ref) ref_time += hi - lo;
        measured += hi - lo;
    };

    auto visit = [&](double t, std::uint32_t, const std::vector<long>& c) {
        account(prev_t, t, counts);
        counts = c;
        prev_t = t;
        return t < T;
    };
    if (model.family() == Family::Rerouting) {
        detail::ReroutingEngine engine(model, y0, seed);
        detail::drive(engine, T, visit);
    } else {
        detail::TableEngine engine(model, y0, seed);
        detail::drive(engine, T, visit);
    }
    account(prev_t, T, counts);

    for (auto& [cell, mass] : out.occupation) {
        mass /= measured;
        if (mass > out.modal_mass) {
            out.modal_mass = mass;
            out.modal_cell = cell;
        }
    }
    if (reference) out.ref_mass = ref_time / measured;
    return out;
}

} // namespace lossnet
