#pragma once
// Noisy-OR anchor coverage and its exact machinery.
//
//   v_m(pi)    = 1 - prod_i (1 - pi_i r_im)
//   U_c(pi)    = sum_m alpha_cm v_m(pi)
//   dU_c/dpi_i = sum_m alpha_cm r_im prod_{j != i} (1 - pi_j r_jm)
//
// Products run in log1p space with an exact-zero short circuit so bags with
// thousands of patches neither underflow nor lose the v_m = 1 saturation
// case. Leave-one-out products use prefix/suffix scans, which handle zero
// factors without dividing. U_c(S) over discrete sets is coverage at the
// indicator vector and is monotone submodular; greedy maximization therefore
// carries the (1 - 1/e) guarantee, sharpened by total curvature
//   kappa = 1 - min_{i : U({i}) > 0} [U(V) - U(V \ {i})] / U({i})
// to (1 - e^-kappa) / kappa. Greedy ties break toward the lowest index so
// test vectors are portable.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "evsel/errors.hpp"
#include "evsel/linalg.hpp"

namespace evsel {

struct ClassAnchorWeights {
    MatD raw;  // C x M free weights; effective alpha = softplus(raw) >= 0

    std::uint32_t classes() const { return static_cast<std::uint32_t>(raw.rows); }
    std::uint32_t anchors() const { return static_cast<std::uint32_t>(raw.cols); }

    static ClassAnchorWeights init(std::uint32_t classes, std::uint32_t anchors) {
        ClassAnchorWeights w;
        w.raw = MatD(classes, anchors, kSoftplusInvOne);
        return w;
    }

    std::vector<double> alpha_row(std::uint32_t c) const {
        std::vector<double> a(raw.cols);
        for (std::size_t m = 0; m < raw.cols; ++m) a[m] = softplus(raw(c, m));
        return a;
    }

    // softplus(x) = 1 at this raw value, so every (class, anchor) pair starts equal.
    static constexpr double kSoftplusInvOne = 0.5413248546129181;
};

inline std::vector<double> coverage(std::span<const double> pi, const MatD& r) {
    const std::size_t n = r.rows;
    const std::size_t m = r.cols;
    std::vector<double> v(m);
    for (std::size_t a = 0; a < m; ++a) {
        double acc = 0.0;
        bool saturated = false;
        for (std::size_t i = 0; i < n; ++i) {
            const double x = pi[i] * r(i, a);
            if (x >= 1.0) {
                saturated = true;
                break;
            }
            acc += std::log1p(-x);
        }
        v[a] = saturated ? 1.0 : -std::expm1(acc);
    }
    return v;
}

inline double class_utility(std::span<const double> pi, const MatD& r,
                            std::span<const double> alpha) {
    const std::vector<double> v = coverage(pi, r);
    double u = 0.0;
    for (std::size_t a = 0; a < v.size(); ++a) u += alpha[a] * v[a];
    return u;
}

// Exact closed-form gradient of class_utility in pi.
inline std::vector<double> marginal(std::span<const double> pi, const MatD& r,
                                    std::span<const double> alpha) {
    const std::size_t n = r.rows;
    const std::size_t m = r.cols;
    std::vector<double> grad(n, 0.0);
    std::vector<double> prefix(n);
    for (std::size_t a = 0; a < m; ++a) {
        // prefix[i] = prod_{j < i} (1 - pi_j r_ja), then a suffix sweep.
        double run = 1.0;
        for (std::size_t i = 0; i < n; ++i) {
            prefix[i] = run;
            run *= 1.0 - pi[i] * r(i, a);
        }
        double suffix = 1.0;
        for (std::size_t i = n; i-- > 0;) {
            grad[i] += alpha[a] * r(i, a) * prefix[i] * suffix;
            suffix *= 1.0 - pi[i] * r(i, a);
        }
    }
    return grad;
}

inline double subset_utility(std::span<const std::uint32_t> subset, const MatD& r,
                             std::span<const double> alpha) {
    const std::size_t m = r.cols;
    double u = 0.0;
    for (std::size_t a = 0; a < m; ++a) {
        double keep = 1.0;
        for (std::uint32_t i : subset) keep *= 1.0 - r(i, a);
        u += alpha[a] * (1.0 - keep);
    }
    return u;
}

namespace covdetail {

// Marginal gain of adding item i given per-anchor remaining mass Q.
inline double gain(const MatD& r, std::span<const double> alpha, std::span<const double> q,
                   std::size_t i) {
    double g = 0.0;
    for (std::size_t a = 0; a < r.cols; ++a) g += alpha[a] * r(i, a) * q[a];
    return g;
}

}  // namespace covdetail

// Greedy maximization of U(S) under |S| <= k; returns picks in selection
// order. Ties break toward the lowest index.
inline std::vector<std::uint32_t> greedy_max(const MatD& r, std::span<const double> alpha,
                                             std::uint32_t k) {
    const std::size_t n = r.rows;
    if (k > n) throw ContractError("greedy_max: budget exceeds item count");
    std::vector<double> q(r.cols, 1.0);
    std::vector<char> taken(n, 0);
    std::vector<std::uint32_t> order;
    order.reserve(k);
    for (std::uint32_t step = 0; step < k; ++step) {
        std::size_t best = n;
        double best_gain = -1.0;
        for (std::size_t i = 0; i < n; ++i) {
            if (taken[i]) continue;
            const double g = covdetail::gain(r, alpha, q, i);
            if (g > best_gain) {
                best_gain = g;
                best = i;
            }
        }
        taken[best] = 1;
        order.push_back(static_cast<std::uint32_t>(best));
        for (std::size_t a = 0; a < r.cols; ++a) q[a] *= 1.0 - r(best, a);
    }
    return order;
}

// Total curvature of the discrete utility; nullopt when every singleton has
// zero utility (the definition excludes such items and becomes vacuous).
inline std::optional<double> curvature(const MatD& r, std::span<const double> alpha) {
    const std::size_t n = r.rows;
    const std::size_t m = r.cols;

    // Leave-one-out full-set products per anchor.
    std::vector<double> prefix(n), loo(n * m);
    std::vector<double> full(m);
    for (std::size_t a = 0; a < m; ++a) {
        double run = 1.0;
        for (std::size_t i = 0; i < n; ++i) {
            prefix[i] = run;
            run *= 1.0 - r(i, a);
        }
        full[a] = run;
        double suffix = 1.0;
        for (std::size_t i = n; i-- > 0;) {
            loo[i * m + a] = prefix[i] * suffix;
            suffix *= 1.0 - r(i, a);
        }
    }

    double u_full = 0.0;
    for (std::size_t a = 0; a < m; ++a) u_full += alpha[a] * (1.0 - full[a]);

    bool any = false;
    double min_ratio = 1.0;
    for (std::size_t i = 0; i < n; ++i) {
        double singleton = 0.0;
        double u_without = 0.0;
        for (std::size_t a = 0; a < m; ++a) {
            singleton += alpha[a] * r(i, a);
            u_without += alpha[a] * (1.0 - loo[i * m + a]);
        }
        if (singleton <= 0.0) continue;
        any = true;
        min_ratio = std::min(min_ratio, (u_full - u_without) / singleton);
    }
    if (!any) return std::nullopt;
    return std::clamp(1.0 - min_ratio, 0.0, 1.0);
}

// Guarantee factor (1 - e^-kappa) / kappa, with the kappa -> 0 limit of 1.
inline double curvature_guarantee(double kappa) {
    if (kappa <= 1e-12) return 1.0;
    return (1.0 - std::exp(-kappa)) / kappa;
}

}  // namespace evsel
