#pragma once
// Continuous inclusion gates.
//
// A two-layer scorer maps (e_i ++ c_i) to a scalar s_i; the gate is the
// tempered sigmoid pi_i = sigmoid((s_i - nu) / T) with nu = 0. The
// temperature anneals linearly from 1.0 at epoch 0 to 0.4 at the final epoch.
// Coordinates are min-max normalized per bag before entering the scorer.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "evsel/errors.hpp"
#include "evsel/linalg.hpp"
#include "evsel/prng.hpp"

namespace evsel {

inline constexpr double kTStart = 1.0;
inline constexpr double kTEnd = 0.4;
inline constexpr double kCentering = 0.0;  // nu

struct SelectorParams {
    MatD W1;                 // hidden x (d + 2)
    std::vector<double> b1;  // hidden
    std::vector<double> w2;  // hidden
    double b2 = 0.0;

    std::uint32_t hidden() const { return static_cast<std::uint32_t>(W1.rows); }
    std::uint32_t in_dim() const { return static_cast<std::uint32_t>(W1.cols); }

    static SelectorParams init(std::uint32_t d, std::uint32_t hidden, Rng& rng) {
        SelectorParams p;
        p.W1 = MatD(hidden, d + 2);
        p.b1.assign(hidden, 0.0);
        p.w2.assign(hidden, 0.0);
        const double s1 = 1.0 / std::sqrt(static_cast<double>(d + 2));
        const double s2 = 1.0 / std::sqrt(static_cast<double>(hidden));
        for (auto& v : p.W1.data) v = s1 * rng.normal();
        for (auto& v : p.w2) v = s2 * rng.normal();
        return p;
    }
};

struct GateVector {
    std::vector<double> pi;
    double temperature = kTStart;

    std::size_t size() const { return pi.size(); }
};

// Linear annealing schedule; a single-epoch run sits at the end temperature.
inline double anneal(int epoch, int total_epochs, double t_start = kTStart,
                     double t_end = kTEnd) {
    if (epoch < 0 || epoch >= total_epochs) throw ContractError("anneal: epoch out of range");
    if (total_epochs <= 1) return t_end;
    const double frac = static_cast<double>(epoch) / static_cast<double>(total_epochs - 1);
    return t_start + (t_end - t_start) * frac;
}

// Per-bag min-max normalization; a degenerate axis maps to 0.5.
inline MatD normalize_coords(const MatF& coords) {
    const std::size_t n = coords.rows;
    MatD out(n, 2);
    for (std::size_t axis = 0; axis < 2; ++axis) {
        float lo = coords(0, axis), hi = coords(0, axis);
        for (std::size_t i = 1; i < n; ++i) {
            lo = std::min(lo, coords(i, axis));
            hi = std::max(hi, coords(i, axis));
        }
        const double range = static_cast<double>(hi) - static_cast<double>(lo);
        for (std::size_t i = 0; i < n; ++i) {
            out(i, axis) = range > 0.0
                               ? (static_cast<double>(coords(i, axis)) - lo) / range
                               : 0.5;
        }
    }
    return out;
}

struct SelectorCache {
    MatD X;     // N x (d+2) scorer inputs
    MatD tanh;  // N x hidden
    std::vector<double> s;
};

inline GateVector gates(const SelectorParams& sp, const MatD& E, const MatF& coords, double T,
                        SelectorCache* cache = nullptr) {
    if (T <= 0.0) throw ContractError("gates: temperature must be positive");
    const std::size_t n = E.rows;
    const std::size_t d = E.cols;
    if (d + 2 != sp.in_dim()) throw ContractError("gates: selector input dim mismatch");
    const std::uint32_t hidden = sp.hidden();

    const MatD cn = normalize_coords(coords);
    MatD X(n, d + 2);
    for (std::size_t i = 0; i < n; ++i) {
        double* x = X.row(i);
        std::copy(E.row(i), E.row(i) + d, x);
        x[d] = cn(i, 0);
        x[d + 1] = cn(i, 1);
    }

    MatD th(n, hidden);
    std::vector<double> s(n);
    GateVector gv;
    gv.pi.resize(n);
    gv.temperature = T;
    for (std::size_t i = 0; i < n; ++i) {
        double* ti = th.row(i);
        for (std::uint32_t k = 0; k < hidden; ++k)
            ti[k] = std::tanh(dot(sp.W1.row(k), X.row(i), d + 2) + sp.b1[k]);
        s[i] = dot(sp.w2.data(), ti, hidden) + sp.b2;
        gv.pi[i] = sigmoid((s[i] - kCentering) / T);
    }

    if (cache) {
        cache->X = std::move(X);
        cache->tanh = std::move(th);
        cache->s = std::move(s);
    }
    return gv;
}

struct SelectorGrads {
    MatD dW1;
    std::vector<double> db1;
    std::vector<double> dw2;
    double db2 = 0.0;

    void init_like(const SelectorParams& p) {
        dW1 = MatD(p.W1.rows, p.W1.cols);
        db1.assign(p.b1.size(), 0.0);
        dw2.assign(p.w2.size(), 0.0);
        db2 = 0.0;
    }
};

// Backpropagates dpi through the tempered sigmoid and the scorer; accumulates
// selector gradients and the cotangent of the adapted features (first d
// columns of the scorer input).
inline void gates_backward(const SelectorParams& sp, const GateVector& gv,
                           const SelectorCache& cache, std::span<const double> dpi,
                           SelectorGrads& grads, MatD* dE) {
    const std::size_t n = gv.pi.size();
    const std::size_t in_dim = sp.in_dim();
    const std::size_t d = in_dim - 2;
    const std::uint32_t hidden = sp.hidden();
    const double T = gv.temperature;

    std::vector<double> dpre(hidden);
    for (std::size_t i = 0; i < n; ++i) {
        const double pi = gv.pi[i];
        const double ds = dpi[i] * pi * (1.0 - pi) / T;
        if (ds == 0.0) continue;
        const double* ti = cache.tanh.row(i);
        grads.db2 += ds;
        for (std::uint32_t k = 0; k < hidden; ++k) {
            grads.dw2[k] += ds * ti[k];
            dpre[k] = ds * sp.w2[k] * (1.0 - ti[k] * ti[k]);
            grads.db1[k] += dpre[k];
        }
        for (std::uint32_t k = 0; k < hidden; ++k) {
            if (dpre[k] == 0.0) continue;
            axpy(dpre[k], cache.X.row(i), grads.dW1.row(k), in_dim);
            if (dE) axpy(dpre[k], sp.W1.row(k), dE->row(i), d);
        }
    }
}

}  // namespace evsel
