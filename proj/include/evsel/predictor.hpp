#pragma once
// Attention-pooling bag predictor.
//
// Scorer z_i = w2' tanh(W1 u_i), attention alpha = softmax(z), bag
// representation = sum_i alpha_i u_i, logits = Wc * repr + b. The evidence
// gate pi enters without touching the architecture:
//   attention_bias    z_i += log(max(pi_i, kGateFloor)), u_i = h_i
//   feature_reweight  u_i = pi_i * h_i
//   hybrid            both, with the same pi
// With pi = 1 every mode reproduces the ungated forward bit for bit
// (multiplying by 1.0 and adding log(1) = 0 are exact).
//
// The backward pass is hand-derived; finite-difference tests pin it down.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "evsel/errors.hpp"
#include "evsel/linalg.hpp"
#include "evsel/prng.hpp"

namespace evsel {

inline constexpr double kGateFloor = 1e-6;  // floor inside log pi; the bias is undefined at 0

enum class InjectionMode : std::uint8_t { attention_bias = 0, feature_reweight = 1, hybrid = 2 };

inline const char* injection_mode_name(InjectionMode m) {
    switch (m) {
        case InjectionMode::attention_bias: return "attention_bias";
        case InjectionMode::feature_reweight: return "feature_reweight";
        default: return "hybrid";
    }
}

inline InjectionMode injection_mode_from_name(const std::string& s) {
    if (s == "attention_bias") return InjectionMode::attention_bias;
    if (s == "feature_reweight") return InjectionMode::feature_reweight;
    if (s == "hybrid") return InjectionMode::hybrid;
    throw ConfigError("unknown injection mode: " + s);
}

struct PredictorParams {
    MatD W1;                 // h_dim x d
    std::vector<double> w2;  // h_dim
    MatD Wc;                 // C x d
    std::vector<double> b;   // C

    std::uint32_t hidden() const { return static_cast<std::uint32_t>(W1.rows); }
    std::uint32_t dim() const { return static_cast<std::uint32_t>(W1.cols); }
    std::uint32_t classes() const { return static_cast<std::uint32_t>(Wc.rows); }

    static PredictorParams init(std::uint32_t d, std::uint32_t classes, std::uint32_t h_dim,
                                Rng& rng) {
        PredictorParams p;
        p.W1 = MatD(h_dim, d);
        p.w2.assign(h_dim, 0.0);
        p.Wc = MatD(classes, d);
        p.b.assign(classes, 0.0);
        const double s1 = 1.0 / std::sqrt(static_cast<double>(d));
        for (auto& v : p.W1.data) v = s1 * rng.normal();
        for (auto& v : p.Wc.data) v = s1 * rng.normal();
        // Scorer head starts at zero: attention is exactly mean pooling until
        // the task gradient asks for concentration.
        return p;
    }
};

// View over a subset of a feature matrix; idx == nullptr means all rows.
struct BagRows {
    const MatF* H = nullptr;
    const std::uint32_t* idx = nullptr;
    std::size_t count = 0;

    static BagRows all(const MatF& H) { return {&H, nullptr, H.rows}; }
    static BagRows subset(const MatF& H, std::span<const std::uint32_t> rows) {
        return {&H, rows.data(), rows.size()};
    }
    const float* row(std::size_t i) const { return H->row(idx ? idx[i] : i); }
    std::size_t size() const { return count; }
    std::size_t dim() const { return H->cols; }
};

struct ForwardResult {
    std::vector<double> logits;     // C
    std::vector<double> probs;      // C
    std::vector<double> attention;  // N, sums to 1
    std::vector<double> bag_repr;   // d
};

struct ForwardCache {
    MatD u;       // N x d gated inputs (empty when u == raw rows)
    MatD t;       // N x h_dim tanh activations
    std::vector<double> z;
    ForwardResult out;
    bool u_is_raw = false;
};

namespace hostdetail {

inline void check_gates(std::span<const double> gates, std::size_t n) {
    if (gates.size() != n)
        throw ContractError("gate vector length " + std::to_string(gates.size()) +
                            " != bag size " + std::to_string(n));
    for (double g : gates) {
        if (!(g >= 0.0 && g <= 1.0)) throw ContractError("gate outside [0,1]");
    }
}

}  // namespace hostdetail

inline ForwardResult forward(const PredictorParams& params, const BagRows& rows,
                             std::span<const double> gates, InjectionMode mode,
                             ForwardCache* cache = nullptr) {
    const std::size_t n = rows.size();
    const std::size_t d = rows.dim();
    const std::uint32_t h_dim = params.hidden();
    const std::uint32_t classes = params.classes();
    if (n == 0) throw ContractError("empty bag");
    if (d != params.dim())
        throw ContractError("feature dim " + std::to_string(d) + " != predictor dim " +
                            std::to_string(params.dim()));

    const bool gated = !gates.empty();
    if (gated) hostdetail::check_gates(gates, n);
    const bool reweight = gated && (mode == InjectionMode::feature_reweight ||
                                    mode == InjectionMode::hybrid);
    const bool bias = gated && (mode == InjectionMode::attention_bias ||
                                mode == InjectionMode::hybrid);

    MatD u_local;
    MatD& u = cache ? cache->u : u_local;
    if (reweight) {
        u = MatD(n, d);
        for (std::size_t i = 0; i < n; ++i) {
            const float* h = rows.row(i);
            double* ui = u.row(i);
            for (std::size_t f = 0; f < d; ++f) ui[f] = gates[i] * static_cast<double>(h[f]);
        }
    } else {
        u = MatD();
    }
    if (cache) cache->u_is_raw = !reweight;
    auto u_row = [&](std::size_t i) -> const double* { return reweight ? u.row(i) : nullptr; };

    MatD t_local;
    MatD& t = cache ? cache->t : t_local;
    t = MatD(n, h_dim);
    std::vector<double> z(n);
    for (std::size_t i = 0; i < n; ++i) {
        double* ti = t.row(i);
        if (reweight) {
            const double* ui = u_row(i);
            for (std::uint32_t k = 0; k < h_dim; ++k)
                ti[k] = std::tanh(dot(params.W1.row(k), ui, d));
        } else {
            const float* hi = rows.row(i);
            for (std::uint32_t k = 0; k < h_dim; ++k)
                ti[k] = std::tanh(dot_fd(hi, params.W1.row(k), d));
        }
        z[i] = dot(params.w2.data(), ti, h_dim);
        if (bias) z[i] += std::log(std::max(gates[i], kGateFloor));
    }

    ForwardResult out;
    out.attention.resize(n);
    softmax_inplace(z, out.attention);

    out.bag_repr.assign(d, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        if (reweight) {
            axpy(out.attention[i], u_row(i), out.bag_repr.data(), d);
        } else {
            axpy_fd(out.attention[i], rows.row(i), out.bag_repr.data(), d);
        }
    }

    out.logits.resize(classes);
    for (std::uint32_t c = 0; c < classes; ++c)
        out.logits[c] = dot(params.Wc.row(c), out.bag_repr.data(), d) + params.b[c];
    out.probs = softmax(out.logits);

    if (cache) {
        cache->z = std::move(z);
        cache->out = out;
    }
    return out;
}

inline ForwardResult forward(const PredictorParams& params, const MatF& H,
                             std::span<const double> gates, InjectionMode mode,
                             ForwardCache* cache = nullptr) {
    return forward(params, BagRows::all(H), gates, mode, cache);
}

struct PredictorGrads {
    MatD dW1;
    std::vector<double> dw2;
    MatD dWc;
    std::vector<double> db;

    void init_like(const PredictorParams& p) {
        dW1 = MatD(p.W1.rows, p.W1.cols);
        dw2.assign(p.w2.size(), 0.0);
        dWc = MatD(p.Wc.rows, p.Wc.cols);
        db.assign(p.b.size(), 0.0);
    }
};

struct HostBackwardResult {
    PredictorGrads params;
    std::vector<double> dgates;  // N; zeros when ungated
    MatD dfeatures;              // N x d when requested, else empty
};

// Backpropagates an arbitrary logit cotangent through the gated forward.
// `cache` must come from a forward() call with identical inputs.
inline HostBackwardResult host_backward(const PredictorParams& params, const BagRows& rows,
                                        std::span<const double> gates, InjectionMode mode,
                                        const ForwardCache& cache,
                                        std::span<const double> dlogits,
                                        bool want_feature_grads = false) {
    const std::size_t n = rows.size();
    const std::size_t d = rows.dim();
    const std::uint32_t h_dim = params.hidden();
    const std::uint32_t classes = params.classes();
    const bool gated = !gates.empty();
    const bool reweight = gated && (mode == InjectionMode::feature_reweight ||
                                    mode == InjectionMode::hybrid);
    const bool bias = gated && (mode == InjectionMode::attention_bias ||
                                mode == InjectionMode::hybrid);

    HostBackwardResult res;
    res.params.init_like(params);
    res.dgates.assign(n, 0.0);
    if (want_feature_grads) res.dfeatures = MatD(n, d);

    const auto& att = cache.out.attention;
    const auto& repr = cache.out.bag_repr;

    // Classifier head.
    std::vector<double> drepr(d, 0.0);
    for (std::uint32_t c = 0; c < classes; ++c) {
        const double g = dlogits[c];
        res.params.db[c] += g;
        axpy(g, repr.data(), res.params.dWc.row(c), d);
        axpy(g, params.Wc.row(c), drepr.data(), d);
    }

    // Pooling: repr = sum_i att_i u_i.
    std::vector<double> datt(n);
    MatD du(n, d);
    for (std::size_t i = 0; i < n; ++i) {
        if (reweight) {
            datt[i] = dot(drepr.data(), cache.u.row(i), d);
        } else {
            datt[i] = dot_fd(rows.row(i), drepr.data(), d);
        }
        axpy(att[i], drepr.data(), du.row(i), d);
    }

    // Softmax over attention logits.
    double inner = 0.0;
    for (std::size_t i = 0; i < n; ++i) inner += att[i] * datt[i];
    std::vector<double> dz(n);
    for (std::size_t i = 0; i < n; ++i) dz[i] = att[i] * (datt[i] - inner);

    // Scorer and gate paths.
    std::vector<double> dpre(h_dim);
    for (std::size_t i = 0; i < n; ++i) {
        const double* ti = cache.t.row(i);
        for (std::uint32_t k = 0; k < h_dim; ++k) {
            res.params.dw2[k] += dz[i] * ti[k];
            dpre[k] = dz[i] * params.w2[k] * (1.0 - ti[k] * ti[k]);
        }
        double* dui = du.row(i);
        for (std::uint32_t k = 0; k < h_dim; ++k) {
            if (dpre[k] == 0.0) continue;
            if (reweight) {
                axpy(dpre[k], cache.u.row(i), res.params.dW1.row(k), d);
            } else {
                axpy_fd(dpre[k], rows.row(i), res.params.dW1.row(k), d);
            }
            axpy(dpre[k], params.W1.row(k), dui, d);
        }
        if (bias && gates[i] >= kGateFloor) res.dgates[i] += dz[i] / gates[i];
        if (reweight) {
            res.dgates[i] += dot_fd(rows.row(i), dui, d);
            if (want_feature_grads) {
                double* df = res.dfeatures.row(i);
                for (std::size_t f = 0; f < d; ++f) df[f] = gates[i] * dui[f];
            }
        } else if (want_feature_grads) {
            std::copy(dui, dui + d, res.dfeatures.row(i));
        }
    }
    return res;
}

inline double cross_entropy(std::span<const double> probs, int label) {
    return -std::log(std::max(probs[static_cast<std::size_t>(label)], 1e-300));
}

struct LossAndGrad {
    double loss = 0.0;
    PredictorGrads params;
    std::vector<double> dgates;
};

inline LossAndGrad loss_and_grad(const PredictorParams& params, const BagRows& rows,
                                 std::span<const double> gates, InjectionMode mode, int label) {
    if (label < 0 || static_cast<std::uint32_t>(label) >= params.classes())
        throw ContractError("label out of range");
    ForwardCache cache;
    forward(params, rows, gates, mode, &cache);
    std::vector<double> dlogits = cache.out.probs;
    dlogits[static_cast<std::size_t>(label)] -= 1.0;
    HostBackwardResult back = host_backward(params, rows, gates, mode, cache, dlogits);
    LossAndGrad out;
    out.loss = cross_entropy(cache.out.probs, label);
    out.params = std::move(back.params);
    out.dgates = std::move(back.dgates);
    return out;
}

inline LossAndGrad loss_and_grad(const PredictorParams& params, const MatF& H,
                                 std::span<const double> gates, InjectionMode mode, int label) {
    return loss_and_grad(params, BagRows::all(H), gates, mode, label);
}

struct SubsetPrediction {
    std::vector<double> probs;
    int predicted = 0;
};

// Prediction after restricting the bag to `subset` rows (no gates).
inline SubsetPrediction predict_subset(const PredictorParams& params, const MatF& H,
                                       std::span<const std::uint32_t> subset) {
    if (subset.empty()) throw ContractError("predict_subset: empty subset");
    for (std::uint32_t i : subset) {
        if (i >= H.rows) throw ContractError("predict_subset: index out of range");
    }
    ForwardResult fr = forward(params, BagRows::subset(H, subset), {}, InjectionMode::attention_bias);
    SubsetPrediction out;
    out.predicted = static_cast<int>(
        std::max_element(fr.probs.begin(), fr.probs.end()) - fr.probs.begin());
    out.probs = std::move(fr.probs);
    return out;
}

}  // namespace evsel
