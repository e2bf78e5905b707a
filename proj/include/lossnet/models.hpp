#pragma once

#include <map>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "lossnet/measures.hpp"
#include "lossnet/statespace.hpp"

namespace lossnet {

enum class Family { Rerouting, Mobile, MobileSplit, Closed, Open };

inline const char* family_name(Family f) {
    switch (f) {
        case Family::Rerouting: return "rerouting";
        case Family::Mobile: return "mobile";
        case Family::MobileSplit: return "mobile_split";
        case Family::Closed: return "closed";
        case Family::Open: return "open";
    }
    return "?";
}

/** Change of N*y along one transition; sparse, integer, zero-sum, nonzero. */
struct Jump {
    std::vector<std::pair<std::size_t, int>> delta;  // (state index, increment), sorted by index

    bool operator==(const Jump& o) const { return delta == o.delta; }
    bool operator<(const Jump& o) const { return delta < o.delta; }

    Jump negated() const {
        Jump m;
        m.delta.reserve(delta.size());
        for (auto& [i, c] : delta) m.delta.push_back({i, -c});
        return m;
    }
};

struct RateEntry {
    std::size_t jump;  // index into jump_set()
    double rate;       // > 0; zero-rate entries are omitted
};

inline double total_rate(const std::vector<RateEntry>& table) {
    double s = 0.0;
    for (const auto& e : table) s += e.rate;
    return s;
}

namespace detail {

enum class EventKind {
    Arrival,       // class k at state n
    Departure,     // class k from state n
    Move,          // Mobile: class k from state n to a node at state m
    PairReroute,   // Rerouting: blocked call lands on states {m, n}, m != n
    SameReroute,   // Rerouting: blocked call lands on two state-n nodes
    ClosedMove     // Closed: move from state n to a node at state m (m = n allowed)
};

struct Event {
    EventKind kind;
    std::size_t k = 0;   // class
    std::size_t n = 0;   // source state index
    std::size_t m = 0;   // target state index (moves / reroutes)
    std::size_t jump = 0;
};

} // namespace detail

/**
 * One of the five model families over a knapsack state space, with its
 * parameters, enumerated transition events, and the deduplicated jump set.
 *
 * Immutable after construction; every rate/generator evaluation is pure.
 */
class ModelSpec {
public:
    static ModelSpec rerouting(int capacity, double lambda) {
        require(lambda > 0.0, "rerouting: lambda must be positive");
        ModelSpec m(Family::Rerouting, StateSpace(capacity, {1}));
        m.lambda_ = {lambda};
        m.mu_ = {1.0};
        m.gamma_ = {0.0};
        m.build_events();
        return m;
    }

    static ModelSpec mobile(int capacity, std::vector<int> requirements, Vec lambda, Vec mu, Vec gamma) {
        StateSpace ss(capacity, std::move(requirements));
        const std::size_t K = ss.num_classes();
        require(lambda.size() == K && mu.size() == K && gamma.size() == K, "mobile: parameter vectors must have K entries");
        for (std::size_t k = 0; k < K; ++k) {
            require(lambda[k] > 0.0, "mobile: lambda_k must be positive");
            require(mu[k] > 0.0, "mobile: mu_k must be positive");
            require(gamma[k] >= 0.0, "mobile: gamma_k must be nonnegative");
        }
        ModelSpec m(Family::Mobile, std::move(ss));
        m.lambda_ = std::move(lambda);
        m.mu_ = std::move(mu);
        m.gamma_ = std::move(gamma);
        m.build_events();
        return m;
    }

    static ModelSpec mobile_split(int capacity, std::vector<int> requirements, Vec lambda, Vec mu, Vec gamma) {
        ModelSpec m = mobile(capacity, std::move(requirements), std::move(lambda), std::move(mu), std::move(gamma));
        m.family_ = Family::MobileSplit;
        m.build_events();
        return m;
    }

    static ModelSpec closed(int capacity, double lambda) {
        require(lambda > 0.0 && lambda < static_cast<double>(capacity), "closed: lambda must lie in (0, C)");
        ModelSpec m(Family::Closed, StateSpace(capacity, {1}));
        m.lambda_ = {lambda};
        m.mu_ = {1.0};
        m.gamma_ = {0.0};
        m.build_events();
        return m;
    }

    static ModelSpec open(int capacity, double lambda) {
        require(lambda > 0.0 && lambda < static_cast<double>(capacity), "open: lambda must lie in (0, C)");
        ModelSpec m(Family::Open, StateSpace(capacity, {1}));
        m.lambda_ = {lambda};
        m.mu_ = {1.0};
        m.gamma_ = {0.0};
        m.build_events();
        return m;
    }

    Family family() const { return family_; }
    const StateSpace& space() const { return space_; }
    const Vec& lambda() const { return lambda_; }
    const Vec& mu() const { return mu_; }
    const Vec& gamma() const { return gamma_; }
    std::size_t num_classes() const { return space_.num_classes(); }

    const std::vector<Jump>& jumps() const { return jumps_; }
    const std::vector<detail::Event>& events() const { return events_; }

    long min_nodes() const {
        switch (family_) {
            case Family::Rerouting: return 3;
            case Family::Mobile: return 2;
            case Family::Closed: return 2;
            default: return 1;
        }
    }

private:
    ModelSpec(Family f, StateSpace ss) : family_(f), space_(std::move(ss)) {}

    static void require(bool ok, const char* msg) {
        if (!ok) throw std::invalid_argument(msg);
    }

    std::size_t intern(std::vector<std::pair<std::size_t, int>> parts) {
        std::map<std::size_t, int> acc;
        for (auto& [i, c] : parts) acc[i] += c;
        Jump j;
        for (auto& [i, c] : acc)
            if (c != 0) j.delta.push_back({i, c});
        if (j.delta.empty()) return StateSpace::npos;  // null transition, invisible to the process
        auto it = jump_index_.find(j);
        if (it != jump_index_.end()) return it->second;
        const std::size_t id = jumps_.size();
        jump_index_[j] = id;
        jumps_.push_back(std::move(j));
        return id;
    }

    void add_event(detail::EventKind kind, std::size_t k, std::size_t n, std::size_t m,
                   std::vector<std::pair<std::size_t, int>> parts) {
        const std::size_t id = intern(std::move(parts));
        if (id == StateSpace::npos) return;
        events_.push_back({kind, k, n, m, id});
    }

    void build_events() {
        using detail::EventKind;
        events_.clear();
        jumps_.clear();
        jump_index_.clear();
        const StateSpace& ss = space_;
        const std::size_t K = ss.num_classes();

        // arrivals and departures are common to every family
        const bool closed = family_ == Family::Closed;
        for (std::size_t i = 0; i < ss.size(); ++i) {
            for (std::size_t k = 0; k < K; ++k) {
                const std::size_t u = ss.up(i, k);
                if (!closed && u != StateSpace::npos)
                    add_event(EventKind::Arrival, k, i, i, {{u, 1}, {i, -1}});
                const std::size_t d = ss.down(i, k);
                if (!closed && d != StateSpace::npos)
                    add_event(EventKind::Departure, k, i, i, {{d, 1}, {i, -1}});
            }
        }

        switch (family_) {
            case Family::Rerouting: {
                // states are occupancy levels 0..C; level C is saturated
                const std::size_t C = ss.size() - 1;
                for (std::size_t n = 0; n < C; ++n) {
                    for (std::size_t m = n + 1; m < C; ++m)
                        add_event(EventKind::PairReroute, 0, n, m, {{n + 1, 1}, {n, -1}, {m + 1, 1}, {m, -1}});
                    add_event(EventKind::SameReroute, 0, n, n, {{n + 1, 2}, {n, -2}});
                }
                break;
            }
            case Family::Mobile: {
                for (std::size_t i = 0; i < ss.size(); ++i) {
                    for (std::size_t k = 0; k < K; ++k) {
                        if (ss.down(i, k) == StateSpace::npos || gamma_[k] == 0.0) continue;
                        for (std::size_t m = 0; m < ss.size(); ++m) {
                            std::vector<std::pair<std::size_t, int>> parts = {{ss.down(i, k), 1}, {i, -1}};
                            const std::size_t u = ss.up(m, k);
                            if (u != StateSpace::npos) {
                                parts.push_back({u, 1});
                                parts.push_back({m, -1});
                            }
                            add_event(EventKind::Move, k, i, m, std::move(parts));
                        }
                    }
                }
                break;
            }
            case Family::MobileSplit:
                break;  // move halves fold into the arrival/departure events
            case Family::Closed: {
                const std::size_t C = ss.size() - 1;
                for (std::size_t n = 1; n <= C; ++n) {
                    for (std::size_t m = 0; m < C; ++m) {
                        // m = n - 1 shifts a customer between equivalent nodes: null jump
                        add_event(EventKind::ClosedMove, 0, n, m, {{m + 1, 1}, {m, -1}, {n - 1, 1}, {n, -1}});
                    }
                }
                break;
            }
            case Family::Open:
                break;
        }
    }

    Family family_;
    StateSpace space_;
    Vec lambda_, mu_, gamma_;
    std::vector<detail::Event> events_;
    std::vector<Jump> jumps_;
    std::map<Jump, std::size_t> jump_index_;
};

inline ModelSpec make_split(const ModelSpec& model) {
    if (model.family() != Family::Mobile) throw std::invalid_argument("make_split: family must be Mobile");
    return ModelSpec::mobile_split(model.space().capacity(), model.space().requirements(),
                                   model.lambda(), model.mu(), model.gamma());
}

inline const std::vector<Jump>& jump_set(const ModelSpec& model) { return model.jumps(); }

namespace detail {

// shared accumulation of per-event rates into per-jump entries
template <typename RateFn>
std::vector<RateEntry> collect_rates(const ModelSpec& model, RateFn&& rate_of) {
    Vec acc(model.jumps().size(), 0.0);
    for (const auto& ev : model.events()) {
        const double r = rate_of(ev);
        if (r > 0.0) acc[ev.jump] += r;
    }
    std::vector<RateEntry> out;
    out.reserve(acc.size());
    for (std::size_t j = 0; j < acc.size(); ++j)
        if (acc[j] > 0.0) out.push_back({j, acc[j]});
    return out;
}

} // namespace detail

/** Per-class marginal totals sum_n n_k y_n for a raw (not necessarily normalized) vector. */
inline Vec marginal_mean_raw(const StateSpace& ss, const Vec& y) {
    Vec m(ss.num_classes(), 0.0);
    for (std::size_t i = 0; i < ss.size(); ++i) {
        const auto& n = ss.state(i);
        for (std::size_t k = 0; k < m.size(); ++k) m[k] += n[k] * y[i];
    }
    return m;
}

namespace detail {

// exact per-event transition rate at a finite-N empirical state; totals are
// the per-class customer counts sum_i n_k(i) c_i (used by the split family)
inline double finite_event_rate(const ModelSpec& model, const Event& ev, const std::vector<long>& c,
                                double dN, const Vec& totals) {
    using detail::EventKind;
    const StateSpace& ss = model.space();
    const std::size_t sat = ss.size() - 1;
    const double cn = static_cast<double>(c[ev.n]);
    switch (ev.kind) {
        case EventKind::Arrival: {
            if (model.family() == Family::Open) {
                if (static_cast<double>(c[sat]) == dN) return 0.0;  // no free unit anywhere
                return model.lambda()[0] * dN * cn / (dN - static_cast<double>(c[sat]));
            }
            double r = model.lambda()[ev.k] * cn;
            if (model.family() == Family::MobileSplit && dN > 1.0) {
                const double mk = static_cast<double>(ss.state(ev.n)[ev.k]);
                r += model.gamma()[ev.k] * cn * (totals[ev.k] - mk) / (dN - 1.0);
            }
            return r;
        }
        case EventKind::Departure: {
            const double nk = static_cast<double>(ss.state(ev.n)[ev.k]);
            double s = model.mu()[ev.k];
            if (model.family() == Family::MobileSplit) s += model.gamma()[ev.k];
            return s * nk * cn;
        }
        case EventKind::Move: {
            const double nk = static_cast<double>(ss.state(ev.n)[ev.k]);
            const double cm = static_cast<double>(c[ev.m]) - (ev.m == ev.n ? 1.0 : 0.0);
            return model.gamma()[ev.k] * nk * cn * cm / (dN - 1.0);
        }
        case EventKind::PairReroute:
            return 2.0 * model.lambda()[0] * static_cast<double>(c[sat]) * cn * static_cast<double>(c[ev.m]) /
                   ((dN - 1.0) * (dN - 2.0));
        case EventKind::SameReroute:
            return model.lambda()[0] * static_cast<double>(c[sat]) * cn * (cn - 1.0) / ((dN - 1.0) * (dN - 2.0));
        case EventKind::ClosedMove: {
            const double lvl = static_cast<double>(ev.n);
            const double cm = static_cast<double>(c[ev.m]) - (ev.m == ev.n ? 1.0 : 0.0);
            return lvl * cn * cm / (dN - static_cast<double>(c[sat]));
        }
    }
    return 0.0;
}

inline void validate_finite_state(const ModelSpec& model, const EmpiricalVector& y) {
    if (y.counts.size() != model.space().size()) throw std::invalid_argument("finite_rates: state dimension mismatch");
    if (y.N < model.min_nodes()) throw std::invalid_argument("finite_rates: N below the family floor");
    if (model.family() == Family::Closed && y.counts[model.space().size() - 1] == y.N)
        throw std::invalid_argument("finite_rates: closed family requires y_C < 1");
}

inline Vec class_totals(const StateSpace& ss, const std::vector<long>& c) {
    Vec totals(ss.num_classes(), 0.0);
    for (std::size_t i = 0; i < ss.size(); ++i)
        for (std::size_t k = 0; k < ss.num_classes(); ++k) totals[k] += static_cast<double>(ss.state(i)[k]) * c[i];
    return totals;
}

} // namespace detail

/** Exact finite-N transition rates at an empirical state, as printed per family. */
inline std::vector<RateEntry> finite_rates(const ModelSpec& model, const EmpiricalVector& y) {
    detail::validate_finite_state(model, y);
    const Vec totals = detail::class_totals(model.space(), y.counts);
    const double dN = static_cast<double>(y.N);
    return detail::collect_rates(
        model, [&](const detail::Event& ev) { return detail::finite_event_rate(model, ev, y.counts, dN, totals); });
}

/** Limiting jump measure mu_y(z) = lim Q^N(y, y + z/N) / N, on a raw vector. */
inline std::vector<RateEntry> limit_rates_raw(const ModelSpec& model, const Vec& y) {
    using detail::EventKind;
    const StateSpace& ss = model.space();
    if (y.size() != ss.size()) throw std::invalid_argument("limit_rates: state dimension mismatch");
    const std::size_t sat = ss.size() - 1;
    if ((model.family() == Family::Closed || model.family() == Family::Open) && !(y[sat] < 1.0))
        throw std::invalid_argument("limit_rates: family requires y_C < 1");

    const Vec totals = marginal_mean_raw(ss, y);

    return detail::collect_rates(model, [&](const detail::Event& ev) -> double {
        const double yn = y[ev.n];
        switch (ev.kind) {
            case EventKind::Arrival: {
                if (model.family() == Family::Open) return model.lambda()[0] * yn / (1.0 - y[sat]);
                double r = model.lambda()[ev.k];
                if (model.family() == Family::MobileSplit) r += model.gamma()[ev.k] * totals[ev.k];
                return r * yn;
            }
            case EventKind::Departure: {
                const double nk = static_cast<double>(ss.state(ev.n)[ev.k]);
                double s = model.mu()[ev.k];
                if (model.family() == Family::MobileSplit) s += model.gamma()[ev.k];
                return s * nk * yn;
            }
            case EventKind::Move: {
                const double nk = static_cast<double>(ss.state(ev.n)[ev.k]);
                return model.gamma()[ev.k] * nk * yn * y[ev.m];
            }
            case EventKind::PairReroute:
                return 2.0 * model.lambda()[0] * y[sat] * yn * y[ev.m];
            case EventKind::SameReroute:
                return model.lambda()[0] * y[sat] * yn * yn;
            case EventKind::ClosedMove:
                return static_cast<double>(ev.n) * yn * y[ev.m] / (1.0 - y[sat]);
        }
        return 0.0;
    });
}

inline std::vector<RateEntry> limit_rates(const ModelSpec& model, const Simplex& y) {
    return limit_rates_raw(model, y.values());
}

/** Family dispatch of the load map rho(y). */
inline LoadVector rho_of_y_raw(const ModelSpec& model, const Vec& y) {
    const std::size_t sat = model.space().size() - 1;
    switch (model.family()) {
        case Family::Rerouting: {
            const double yc = y[sat];
            return LoadVector(model.lambda()[0] * (1.0 + 2.0 * yc * (1.0 - yc)));
        }
        case Family::Mobile:
        case Family::MobileSplit: {
            const Vec totals = marginal_mean_raw(model.space(), y);
            Vec rho(model.num_classes());
            for (std::size_t k = 0; k < rho.size(); ++k)
                rho[k] = (model.lambda()[k] + model.gamma()[k] * totals[k]) / (model.mu()[k] + model.gamma()[k]);
            return LoadVector(std::move(rho));
        }
        case Family::Closed:
        case Family::Open: {
            if (!(y[sat] < 1.0)) throw std::invalid_argument("rho_of_y: y_C = 1 has no finite load");
            return LoadVector(model.lambda()[0] / (1.0 - y[sat]));
        }
    }
    throw std::logic_error("rho_of_y: unreachable");
}

inline LoadVector rho_of_y(const ModelSpec& model, const Simplex& y) { return rho_of_y_raw(model, y.values()); }

/** Per-class arrival rates a_k(y) and service rates s_k of the driven loss queue L_y. */
inline void queue_rates(const ModelSpec& model, const Vec& y, Vec& arrivals, Vec& services) {
    const std::size_t K = model.num_classes();
    arrivals.assign(K, 0.0);
    services.assign(K, 0.0);
    switch (model.family()) {
        case Family::Rerouting:
        case Family::Closed:
        case Family::Open: {
            arrivals[0] = rho_of_y_raw(model, y).rho[0];
            services[0] = 1.0;
            break;
        }
        case Family::Mobile:
        case Family::MobileSplit: {
            const Vec totals = marginal_mean_raw(model.space(), y);
            for (std::size_t k = 0; k < K; ++k) {
                arrivals[k] = model.lambda()[k] + model.gamma()[k] * totals[k];
                services[k] = model.mu()[k] + model.gamma()[k];
            }
            break;
        }
    }
}

/** Generator of a K-class loss queue with the given per-class arrival/service rates. */
inline Eigen::MatrixXd loss_queue_generator(const StateSpace& ss, const Vec& arrivals, const Vec& services) {
    const auto n = static_cast<Eigen::Index>(ss.size());
    Eigen::MatrixXd L = Eigen::MatrixXd::Zero(n, n);
    for (std::size_t i = 0; i < ss.size(); ++i) {
        for (std::size_t k = 0; k < ss.num_classes(); ++k) {
            const std::size_t u = ss.up(i, k);
            if (u != StateSpace::npos) {
                L(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(u)) += arrivals[k];
                L(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(i)) -= arrivals[k];
            }
            const std::size_t d = ss.down(i, k);
            if (d != StateSpace::npos) {
                const double r = services[k] * ss.state(i)[k];
                L(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(d)) += r;
                L(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(i)) -= r;
            }
        }
    }
    return L;
}

/** L_y: the one-node generator whose arrival rates are driven by the mean field y. */
inline Eigen::MatrixXd generator(const ModelSpec& model, const Simplex& y) {
    Vec a, s;
    queue_rates(model, y.values(), a, s);
    return loss_queue_generator(model.space(), a, s);
}

/** m_y = sum_z z mu_y(z): mean displacement of the limiting jump measure. */
inline Vec mean_field_raw(const ModelSpec& model, const Vec& y) {
    const auto table = limit_rates_raw(model, y);
    Vec out(model.space().size(), 0.0);
    for (const auto& e : table)
        for (const auto& [i, c] : model.jumps()[e.jump].delta) out[i] += c * e.rate;
    return out;
}

inline Vec mean_field(const ModelSpec& model, const Simplex& y) { return mean_field_raw(model, y.values()); }

/**
 * y L_y evaluated through the birth-death structure of L_y; algebraically
 * equal to mean_field (for Closed: on the invariant shell [I,y] = lambda)
 * and O(|X| K) per call, which is what the ODE and Jacobian paths want.
 */
inline Vec flow_field_raw(const ModelSpec& model, const Vec& y) {
    const StateSpace& ss = model.space();
    Vec a, s;
    queue_rates(model, y, a, s);
    Vec out(ss.size(), 0.0);
    for (std::size_t i = 0; i < ss.size(); ++i) {
        for (std::size_t k = 0; k < ss.num_classes(); ++k) {
            const std::size_t u = ss.up(i, k);
            if (u != StateSpace::npos) {
                const double r = a[k] * y[i];
                out[u] += r;
                out[i] -= r;
            }
            const std::size_t d = ss.down(i, k);
            if (d != StateSpace::npos) {
                const double r = s[k] * ss.state(i)[k] * y[i];
                out[d] += r;
                out[i] -= r;
            }
        }
    }
    return out;
}

inline Vec flow_field(const ModelSpec& model, const Simplex& y) { return flow_field_raw(model, y.values()); }

} // namespace lossnet
