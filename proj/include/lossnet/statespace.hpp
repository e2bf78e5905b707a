#pragma once

#include <cmath>
#include <cstddef>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "lossnet/numerics.hpp"

namespace lossnet {

/**
 * Knapsack state space: all occupancy vectors n in N^K with
 * sum_k n_k * A_k <= C, together with index maps.
 *
 * The enumeration order is fixed (n_1 varies fastest, n_K slowest) so
 * vector layouts are identical across runs and serialized outputs.
 */
class StateSpace {
public:
    static constexpr std::size_t npos = static_cast<std::size_t>(-1);

    StateSpace(int capacity, std::vector<int> requirements)
        : capacity_(capacity), requirements_(std::move(requirements)) {
        if (capacity_ < 1) throw std::invalid_argument("StateSpace: capacity must be >= 1");
        if (requirements_.empty()) throw std::invalid_argument("StateSpace: need at least one class");
        for (int a : requirements_) {
            if (a < 1) throw std::invalid_argument("StateSpace: requirement A_k must be >= 1");
            if (a > capacity_) throw std::invalid_argument("StateSpace: requirement A_k must be <= capacity");
        }
        std::vector<int> n(requirements_.size(), 0);
        enumerate(n, static_cast<int>(requirements_.size()) - 1, capacity_);
        for (std::size_t i = 0; i < states_.size(); ++i) index_[states_[i]] = i;

        log_factorial_.resize(states_.size());
        for (std::size_t i = 0; i < states_.size(); ++i) {
            double s = 0.0;
            for (int nk : states_[i]) s += std::lgamma(static_cast<double>(nk) + 1.0);
            log_factorial_[i] = s;
        }

        const std::size_t K = num_classes();
        up_.assign(states_.size() * K, npos);
        down_.assign(states_.size() * K, npos);
        for (std::size_t i = 0; i < states_.size(); ++i) {
            for (std::size_t k = 0; k < K; ++k) {
                std::vector<int> m = states_[i];
                m[k] += 1;
                auto it = index_.find(m);
                if (it != index_.end()) up_[i * K + k] = it->second;
                m[k] -= 2;
                if (m[k] >= 0) {
                    it = index_.find(m);
                    if (it != index_.end()) down_[i * K + k] = it->second;
                }
            }
        }
    }

    int capacity() const { return capacity_; }
    std::size_t num_classes() const { return requirements_.size(); }
    const std::vector<int>& requirements() const { return requirements_; }
    std::size_t size() const { return states_.size(); }
    const std::vector<int>& state(std::size_t i) const { return states_[i]; }
    const std::vector<std::vector<int>>& states() const { return states_; }

    // log(n!) for state i, with n! = prod_k n_k!
    double log_factorial(std::size_t i) const { return log_factorial_[i]; }

    std::size_t index_of(const std::vector<int>& n) const {
        auto it = index_.find(n);
        if (it == index_.end()) throw std::out_of_range("StateSpace: state not in space");
        return it->second;
    }

    bool contains(const std::vector<int>& n) const { return index_.count(n) > 0; }

    int used_capacity(std::size_t i) const {
        int u = 0;
        for (std::size_t k = 0; k < requirements_.size(); ++k) u += states_[i][k] * requirements_[k];
        return u;
    }

    // index of state n + f_k, or npos when the arrival does not fit
    std::size_t up(std::size_t i, std::size_t k) const { return up_[i * num_classes() + k]; }
    // index of state n - f_k, or npos when n_k = 0
    std::size_t down(std::size_t i, std::size_t k) const { return down_[i * num_classes() + k]; }

private:
    void enumerate(std::vector<int>& n, int k, int remaining) {
        const int a = requirements_[static_cast<std::size_t>(k)];
        for (int v = 0; v * a <= remaining; ++v) {
            n[static_cast<std::size_t>(k)] = v;
            if (k == 0)
                states_.push_back(n);
            else
                enumerate(n, k - 1, remaining - v * a);
        }
        n[static_cast<std::size_t>(k)] = 0;
    }

    int capacity_;
    std::vector<int> requirements_;
    std::vector<std::vector<int>> states_;
    std::map<std::vector<int>, std::size_t> index_;
    std::vector<double> log_factorial_;
    std::vector<std::size_t> up_, down_;
};

/** Probability vector over a StateSpace (mean-field state / empirical measure). */
class Simplex {
public:
    Simplex() = default;

    // Normalizes a nonnegative weight vector; rejects invalid input.
    static Simplex normalized(Vec w) {
        double s = 0.0;
        for (double& x : w) {
            if (x < 0.0) {
                if (x < -1e-9) throw std::invalid_argument("Simplex: negative component");
                x = 0.0;
            }
            s += x;
        }
        if (!(s > 0.0) || !std::isfinite(s)) throw std::invalid_argument("Simplex: weights must have positive finite sum");
        for (double& x : w) x /= s;
        Simplex y;
        y.v_ = std::move(w);
        return y;
    }

    // Accepts a vector already summing to one (tolerance 1e-12).
    static Simplex checked(Vec w) {
        const double s = sum(w);
        if (std::abs(s - 1.0) > 1e-12) throw std::invalid_argument("Simplex: sum differs from 1 beyond 1e-12");
        return normalized(std::move(w));
    }

    static Simplex dirac(std::size_t i, std::size_t n) {
        Vec w(n, 0.0);
        w[i] = 1.0;
        return checked(std::move(w));
    }

    static Simplex uniform(std::size_t n) { return normalized(Vec(n, 1.0)); }

    const Vec& values() const { return v_; }
    double operator[](std::size_t i) const { return v_[i]; }
    std::size_t size() const { return v_.size(); }

    bool interior(double eps = 0.0) const {
        for (double x : v_) {
            if (!(x > eps)) return false;
        }
        return true;
    }

private:
    Vec v_;
};

/** Integer node counts at finite N; counts/N is the empirical measure. */
struct EmpiricalVector {
    std::vector<long> counts;
    long N = 0;

    EmpiricalVector() = default;
    EmpiricalVector(std::vector<long> c, long n) : counts(std::move(c)), N(n) {
        long s = 0;
        for (long x : counts) {
            if (x < 0) throw std::invalid_argument("EmpiricalVector: negative count");
            s += x;
        }
        if (s != N) throw std::invalid_argument("EmpiricalVector: counts must sum to N");
    }

    Simplex to_simplex() const {
        Vec w(counts.size());
        for (std::size_t i = 0; i < counts.size(); ++i) w[i] = static_cast<double>(counts[i]) / static_cast<double>(N);
        return Simplex::normalized(std::move(w));
    }

    // nearest lattice point to a target distribution, largest-remainder rounding
    static EmpiricalVector nearest(const Simplex& y, long N) {
        std::vector<long> c(y.size());
        std::vector<std::pair<double, std::size_t>> rem(y.size());
        long total = 0;
        for (std::size_t i = 0; i < y.size(); ++i) {
            const double t = y[i] * static_cast<double>(N);
            c[i] = static_cast<long>(std::floor(t));
            rem[i] = {t - std::floor(t), i};
            total += c[i];
        }
        std::sort(rem.begin(), rem.end(), [](auto& a, auto& b) { return a.first > b.first; });
        for (std::size_t j = 0; total < N; ++j, ++total) c[rem[j % rem.size()].second] += 1;
        return EmpiricalVector(std::move(c), N);
    }
};

/** Per-class offered load rho_k > 0 with theta_k = log rho_k on demand. */
struct LoadVector {
    Vec rho;

    LoadVector() = default;
    explicit LoadVector(Vec r) : rho(std::move(r)) {
        for (double x : rho)
            if (!(x > 0.0)) throw std::invalid_argument("LoadVector: rho_k must be positive");
    }
    explicit LoadVector(double r) : LoadVector(Vec{r}) {}
    static LoadVector from_theta(const Vec& theta) {
        Vec r(theta.size());
        for (std::size_t k = 0; k < theta.size(); ++k) r[k] = std::exp(theta[k]);
        return LoadVector(std::move(r));
    }
    Vec theta() const {
        Vec t(rho.size());
        for (std::size_t k = 0; k < rho.size(); ++k) t[k] = std::log(rho[k]);
        return t;
    }
    std::size_t size() const { return rho.size(); }
};

} // namespace lossnet
