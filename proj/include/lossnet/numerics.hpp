#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <vector>

#include <Eigen/Dense>

namespace lossnet {

using Vec = std::vector<double>;

inline double log_sum_exp(const Vec& logs) {
    double m = -std::numeric_limits<double>::infinity();
    for (double x : logs) m = std::max(m, x);
    if (!std::isfinite(m)) return m;
    double s = 0.0;
    for (double x : logs) s += std::exp(x - m);
    return m + std::log(s);
}

inline double dot(const Vec& a, const Vec& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

inline double sup_norm(const Vec& a) {
    double m = 0.0;
    for (double x : a) m = std::max(m, std::abs(x));
    return m;
}

inline double sup_dist(const Vec& a, const Vec& b) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

inline double euclidean_dist(const Vec& a, const Vec& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = a[i] - b[i];
        s += d * d;
    }
    return std::sqrt(s);
}

inline double sum(const Vec& a) { return std::accumulate(a.begin(), a.end(), 0.0); }

// Orthonormal basis of the zero-sum subspace of R^n (Helmert rows).
// Column k of the returned matrix is the k-th basis vector, k = 0..n-2.
inline Eigen::MatrixXd zero_sum_basis(std::size_t n) {
    Eigen::MatrixXd V = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(n),
                                              static_cast<Eigen::Index>(n - 1));
    for (std::size_t k = 1; k < n; ++k) {
        const double norm = std::sqrt(static_cast<double>(k) * (k + 1));
        for (std::size_t i = 0; i < k; ++i) V(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k - 1)) = 1.0 / norm;
        V(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(k - 1)) = -static_cast<double>(k) / norm;
    }
    return V;
}

// Shift a vector so its mean is zero (canonical covector representative).
inline Vec zero_mean(Vec v) {
    const double m = sum(v) / static_cast<double>(v.size());
    for (double& x : v) x -= m;
    return v;
}

struct LinearFit {
    double slope = 0.0;
    double intercept = 0.0;
    double r_squared = 0.0;
    std::size_t n = 0;
};

inline LinearFit linear_fit(const Vec& x, const Vec& y) {
    if (x.size() != y.size() || x.size() < 2) throw std::invalid_argument("linear_fit: need >= 2 points");
    const double n = static_cast<double>(x.size());
    const double mx = sum(x) / n, my = sum(y) / n;
    double sxx = 0.0, sxy = 0.0, syy = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        sxx += (x[i] - mx) * (x[i] - mx);
        sxy += (x[i] - mx) * (y[i] - my);
        syy += (y[i] - my) * (y[i] - my);
    }
    LinearFit f;
    f.n = x.size();
    f.slope = sxy / sxx;
    f.intercept = my - f.slope * mx;
    double ss_res = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double r = y[i] - (f.intercept + f.slope * x[i]);
        ss_res += r * r;
    }
    f.r_squared = syy > 0.0 ? 1.0 - ss_res / syy : 1.0;
    return f;
}

inline double mean_of(const Vec& v) { return sum(v) / static_cast<double>(v.size()); }

inline double variance_of(const Vec& v) {
    const double m = mean_of(v);
    double s = 0.0;
    for (double x : v) s += (x - m) * (x - m);
    return v.size() > 1 ? s / static_cast<double>(v.size() - 1) : 0.0;
}

inline double median_of(Vec v) {
    if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

} // namespace lossnet
