#pragma once
// Low-rank residual adapter and anchor bridge.
//
// adapt:   e_i = normalize((I + U V') h_i); zero-norm rows become zero vectors
//          and are flagged as degenerate.
// respond: r_im = sigmoid(gamma * (cos(B x_i, a_m) - delta)) with x = raw h by
//          default (a flag routes the adapted features through the bridge
//          instead). The cosine of a zero vector is defined as 0.
// The "constrained" bridge variant renormalizes the rows of B after every
// optimizer step; see training.hpp.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "evsel/errors.hpp"
#include "evsel/linalg.hpp"
#include "evsel/prng.hpp"
#include "evsel/synthbag.hpp"

namespace evsel {

struct GroundingConfig {
    double gamma = 8.0;             // response sharpness
    double delta = 0.15;            // weak-match margin
    std::uint32_t rank = 8;         // adapter rank
    bool bridge_on_adapted = false; // feed e_i instead of h_i through the bridge
    bool constrained_bridge = true; // row-normalize B after each update
};

struct GroundingParams {
    MatD U;  // d x r
    MatD V;  // d x r
    MatD B;  // bridge_dim x d

    std::uint32_t dim() const { return static_cast<std::uint32_t>(U.rows); }
    std::uint32_t rank() const { return static_cast<std::uint32_t>(U.cols); }
    std::uint32_t bridge_dim() const { return static_cast<std::uint32_t>(B.rows); }

    // Adapter starts near zero; bridge starts at (truncated/padded) identity.
    static GroundingParams init(std::uint32_t d, std::uint32_t bridge_dim, std::uint32_t rank,
                                Rng& rng) {
        GroundingParams g;
        g.U = MatD(d, rank);
        g.V = MatD(d, rank);
        for (auto& v : g.U.data) v = 0.01 * rng.normal();
        for (auto& v : g.V.data) v = 0.01 * rng.normal();
        g.B = MatD(bridge_dim, d);
        for (std::uint32_t i = 0; i < std::min(bridge_dim, d); ++i) g.B(i, i) = 1.0;
        return g;
    }
};

inline void row_normalize(MatD& m) {
    for (std::size_t i = 0; i < m.rows; ++i) {
        const double nrm = l2norm(m.row(i), m.cols);
        if (nrm > 0.0) {
            for (std::size_t j = 0; j < m.cols; ++j) m(i, j) /= nrm;
        }
    }
}

struct AdaptCache {
    MatD E;                           // N x d normalized rows
    MatD W;                           // N x r adapter intermediates V'h
    std::vector<double> pre_norm;     // |t_i| before normalization
    std::vector<std::uint8_t> degenerate;
};

inline MatD adapt(const GroundingParams& gp, const MatF& H, AdaptCache* cache = nullptr) {
    const std::size_t n = H.rows;
    const std::size_t d = H.cols;
    const std::uint32_t r = gp.rank();
    if (d != gp.dim()) throw ContractError("adapt: feature dim mismatch");

    MatD E(n, d);
    MatD W(n, r);
    std::vector<double> pre_norm(n, 0.0);
    std::vector<std::uint8_t> degen(n, 0);
    std::vector<double> t(d);

    for (std::size_t i = 0; i < n; ++i) {
        const float* h = H.row(i);
        double* w = W.row(i);
        for (std::uint32_t k = 0; k < r; ++k) {
            double s = 0.0;
            for (std::size_t f = 0; f < d; ++f) s += gp.V(f, k) * static_cast<double>(h[f]);
            w[k] = s;
        }
        for (std::size_t f = 0; f < d; ++f) {
            t[f] = static_cast<double>(h[f]) + dot(gp.U.row(f), w, r);
        }
        const double nrm = l2norm(t.data(), d);
        pre_norm[i] = nrm;
        if (nrm > 0.0) {
            for (std::size_t f = 0; f < d; ++f) E(i, f) = t[f] / nrm;
        } else {
            degen[i] = 1;  // degenerate patch: keep the zero vector
        }
    }

    if (cache) {
        cache->E = E;
        cache->W = std::move(W);
        cache->pre_norm = std::move(pre_norm);
        cache->degenerate = std::move(degen);
    }
    return E;
}

struct ResponseCache {
    MatD G;                       // N x bridge_dim bridged vectors
    std::vector<double> g_norm;   // row norms of G
    MatD cosines;                 // N x M
    MatD r;                       // N x M responses
};

// X is whatever the bridge consumes (raw H by default, adapted E behind the flag).
inline MatD anchor_responses_from(const GroundingParams& gp, const GroundingConfig& gc,
                                  const MatD& X, const AnchorBank& bank,
                                  ResponseCache* cache = nullptr) {
    const std::size_t n = X.rows;
    const std::size_t d = X.cols;
    const std::uint32_t m = bank.count();
    const std::uint32_t bd = gp.bridge_dim();
    if (bank.dim() != bd) throw ContractError("anchor dim != bridge dim");

    MatD G(n, bd);
    std::vector<double> g_norm(n);
    MatD cosines(n, m);
    MatD r(n, m);

    for (std::size_t i = 0; i < n; ++i) {
        double* g = G.row(i);
        for (std::uint32_t k = 0; k < bd; ++k) g[k] = dot(gp.B.row(k), X.row(i), d);
        const double nrm = l2norm(g, bd);
        g_norm[i] = nrm;
        for (std::uint32_t a = 0; a < m; ++a) {
            const double c = nrm > 0.0 ? dot(g, bank.anchors.row(a), bd) / nrm : 0.0;
            cosines(i, a) = c;
            r(i, a) = sigmoid(gc.gamma * (c - gc.delta));
        }
    }

    if (cache) {
        cache->G = std::move(G);
        cache->g_norm = std::move(g_norm);
        cache->cosines = std::move(cosines);
        cache->r = r;
    }
    return r;
}

inline MatD to_matd(const MatF& H) {
    MatD X(H.rows, H.cols);
    for (std::size_t i = 0; i < H.data.size(); ++i) X.data[i] = static_cast<double>(H.data[i]);
    return X;
}

inline MatD anchor_responses(const GroundingParams& gp, const GroundingConfig& gc, const MatF& H,
                             const MatD& E, const AnchorBank& bank,
                             ResponseCache* cache = nullptr) {
    if (gc.bridge_on_adapted) return anchor_responses_from(gp, gc, E, bank, cache);
    return anchor_responses_from(gp, gc, to_matd(H), bank, cache);
}

// Backward helpers ----------------------------------------------------------

// Given dE (cotangent of the normalized rows), accumulate adapter gradients
// and optionally the cotangent of the pre-adapter features.
inline void adapt_backward(const GroundingParams& gp, const MatF& H, const AdaptCache& cache,
                           const MatD& dE, MatD& dU, MatD& dV) {
    const std::size_t n = H.rows;
    const std::size_t d = H.cols;
    const std::uint32_t r = gp.rank();
    std::vector<double> dt(d);
    std::vector<double> dw(r);

    for (std::size_t i = 0; i < n; ++i) {
        if (cache.degenerate[i]) continue;
        const double nrm = cache.pre_norm[i];
        const double* e = cache.E.row(i);
        const double* de = dE.row(i);
        // t = e * nrm; d t = (de - (de . e) e) / nrm
        const double proj = dot(de, e, d);
        for (std::size_t f = 0; f < d; ++f) dt[f] = (de[f] - proj * e[f]) / nrm;

        const double* w = cache.W.row(i);
        const float* h = H.row(i);
        std::fill(dw.begin(), dw.end(), 0.0);
        for (std::size_t f = 0; f < d; ++f) {
            if (dt[f] == 0.0) continue;
            axpy(dt[f], w, dU.row(f), r);
            axpy(dt[f], gp.U.row(f), dw.data(), r);
        }
        for (std::size_t f = 0; f < d; ++f) {
            axpy(static_cast<double>(h[f]), dw.data(), dV.row(f), r);
        }
    }
}

// Given dr (cotangent of responses), accumulate bridge gradients and, when the
// bridge consumed adapted features, the cotangent dX of its input rows.
inline void responses_backward(const GroundingParams& gp, const GroundingConfig& gc,
                               const MatD& X, const AnchorBank& bank, const ResponseCache& cache,
                               const MatD& dr, MatD& dB, MatD* dX) {
    const std::size_t n = X.rows;
    const std::size_t d = X.cols;
    const std::uint32_t m = bank.count();
    const std::uint32_t bd = gp.bridge_dim();
    std::vector<double> dg(bd);

    for (std::size_t i = 0; i < n; ++i) {
        const double nrm = cache.g_norm[i];
        if (nrm <= 0.0) continue;  // cosine pinned to 0, no gradient
        const double* g = cache.G.row(i);
        std::fill(dg.begin(), dg.end(), 0.0);
        for (std::uint32_t a = 0; a < m; ++a) {
            const double rv = cache.r(i, a);
            const double dcos = dr(i, a) * gc.gamma * rv * (1.0 - rv);
            if (dcos == 0.0) continue;
            const double c = cache.cosines(i, a);
            const double* anchor = bank.anchors.row(a);
            for (std::uint32_t k = 0; k < bd; ++k)
                dg[k] += dcos * (anchor[k] / nrm - c * g[k] / (nrm * nrm));
        }
        for (std::uint32_t k = 0; k < bd; ++k) {
            if (dg[k] == 0.0) continue;
            axpy(dg[k], X.row(i), dB.row(k), d);
            if (dX) axpy(dg[k], gp.B.row(k), dX->row(i), d);
        }
    }
}

}  // namespace evsel
