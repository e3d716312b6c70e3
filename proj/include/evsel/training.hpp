#pragma once
// Joint training of host, adapter/bridge, selector, and class-anchor weights.
//
// Per-bag objective:
//   L = CE(host(bag, pi)) + lambda_b * relu(mean(pi) - rho)^2
//       + lambda_g * sum_m alpha_ym (1 - v_m(pi)) / max(sum_m alpha_ym, eps)
// The grounding term is the normalized uncovered true-class anchor mass, so
// minimizing it minimizes the coverage-residual bound directly.
//
// Optimizer: AdamW (decoupled weight decay), beta = (0.9, 0.999), eps = 1e-8,
// global-norm gradient clipping, optional per-epoch cosine learning rate.
// Bags above the training patch cap are subsampled once per step; the task
// and evidence paths see the same sampled bag. Single-threaded and
// deterministic: two runs with one seed produce bit-identical parameters.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "evsel/coverage.hpp"
#include "evsel/errors.hpp"
#include "evsel/grounding.hpp"
#include "evsel/linalg.hpp"
#include "evsel/metrics.hpp"
#include "evsel/predictor.hpp"
#include "evsel/prng.hpp"
#include "evsel/selector.hpp"
#include "evsel/synthbag.hpp"

namespace evsel {

struct TrainConfig {
    int epochs = 15;
    double learning_rate = 2e-4;
    double weight_decay = 1e-5;
    double grad_clip = 5.0;
    bool cosine_lr = true;
    double lambda_budget = 0.1;
    double lambda_ground = 0.5;
    double rho = 0.05;  // evidence budget
    InjectionMode mode = InjectionMode::attention_bias;
    std::uint32_t max_train_patches = 512;
    std::uint64_t seed = 42;
    bool anneal = true;  // false pins T at t_start throughout (control runs)
    double t_start = kTStart;
    double t_end = kTEnd;
    bool use_selector = true;  // false trains the bare backbone
    std::uint32_t hidden_dim = 32;
    std::uint32_t selector_hidden = 32;
    GroundingConfig grounding;

    void validate() const {
        if (epochs < 0) throw ConfigError("epochs must be >= 0");
        if (lambda_budget < 0 || lambda_ground < 0) throw ConfigError("loss weights must be >= 0");
        if (rho < 0) throw ConfigError("rho must be >= 0");
        if (learning_rate <= 0) throw ConfigError("learning_rate must be > 0");
        if (max_train_patches < 1) throw ConfigError("max_train_patches must be >= 1");
        if (grounding.gamma <= 0) throw ConfigError("gamma must be > 0");
        if (grounding.rank < 1) throw ConfigError("adapter rank must be >= 1");
    }

    double temperature_at(int epoch) const {
        if (!anneal || epochs <= 0) return t_start;
        return evsel::anneal(epoch, epochs, t_start, t_end);
    }

    double inference_temperature() const { return anneal ? t_end : t_start; }
};

struct ModelState {
    PredictorParams host;
    GroundingParams ground;
    SelectorParams sel;
    ClassAnchorWeights caw;
    GroundingConfig gcfg;
    InjectionMode mode = InjectionMode::attention_bias;
    double t_inference = kTEnd;
    bool use_selector = true;

    std::uint32_t dim() const { return host.dim(); }
    std::uint32_t classes() const { return host.classes(); }
    std::uint32_t anchors() const { return caw.anchors(); }
};

inline ModelState init_model(const Dataset& ds, const TrainConfig& cfg) {
    cfg.validate();
    const std::uint32_t d = ds.cfg.feature_dim;
    const std::uint32_t classes = ds.cfg.num_classes;
    const std::uint32_t anchors = ds.bank.count();
    const std::uint32_t bridge_dim = ds.bank.dim();

    ModelState s;
    Rng host_rng = make_stream(cfg.seed, stream_tag::init_host);
    s.host = PredictorParams::init(d, classes, cfg.hidden_dim, host_rng);
    Rng ground_rng = make_stream(cfg.seed, stream_tag::init_grounding);
    s.ground = GroundingParams::init(d, bridge_dim, cfg.grounding.rank, ground_rng);
    Rng sel_rng = make_stream(cfg.seed, stream_tag::init_selector);
    s.sel = SelectorParams::init(d, cfg.selector_hidden, sel_rng);
    s.caw = ClassAnchorWeights::init(classes, anchors);
    s.gcfg = cfg.grounding;
    s.mode = cfg.mode;
    s.t_inference = cfg.inference_temperature();
    s.use_selector = cfg.use_selector;
    return s;
}

// Loss terms -----------------------------------------------------------------

// Hinge-squared sparsity penalty on the mean gate.
inline double budget_loss(std::span<const double> pi, double rho) {
    double mean = 0.0;
    for (double p : pi) mean += p;
    mean /= static_cast<double>(pi.size());
    const double over = std::max(mean - rho, 0.0);
    return over * over;
}

inline void budget_loss_grad(std::span<const double> pi, double rho, double scale,
                             std::span<double> dpi) {
    double mean = 0.0;
    for (double p : pi) mean += p;
    mean /= static_cast<double>(pi.size());
    const double over = mean - rho;
    if (over <= 0.0) return;
    const double g = scale * 2.0 * over / static_cast<double>(pi.size());
    for (std::size_t i = 0; i < pi.size(); ++i) dpi[i] += g;
}

inline constexpr double kGroundDenomFloor = 1e-12;

// Normalized uncovered true-class anchor mass, in [0, 1].
inline double grounding_loss(std::span<const double> pi, const MatD& r,
                             std::span<const double> alpha_y) {
    const std::vector<double> v = coverage(pi, r);
    double num = 0.0, den = 0.0;
    for (std::size_t m = 0; m < v.size(); ++m) {
        num += alpha_y[m] * (1.0 - v[m]);
        den += alpha_y[m];
    }
    return num / std::max(den, kGroundDenomFloor);
}

struct LossComponents {
    double total = 0.0;
    double task = 0.0;
    double budget = 0.0;
    double ground = 0.0;
};

struct ModelGrads {
    PredictorGrads host;
    MatD dU, dV, dB;
    SelectorGrads sel;
    MatD draw;

    void init_like(const ModelState& s) {
        host.init_like(s.host);
        dU = MatD(s.ground.U.rows, s.ground.U.cols);
        dV = MatD(s.ground.V.rows, s.ground.V.cols);
        dB = MatD(s.ground.B.rows, s.ground.B.cols);
        sel.init_like(s.sel);
        draw = MatD(s.caw.raw.rows, s.caw.raw.cols);
    }
};

namespace traindetail {

// dpi/dr contributions of sum_m dv[m] * v_m(pi), using prefix/suffix
// leave-one-out products so zero factors need no division.
inline void coverage_backward(std::span<const double> pi, const MatD& r,
                              std::span<const double> dv, std::span<double> dpi, MatD& dr) {
    const std::size_t n = r.rows;
    const std::size_t m = r.cols;
    std::vector<double> prefix(n);
    for (std::size_t a = 0; a < m; ++a) {
        if (dv[a] == 0.0) continue;
        double run = 1.0;
        for (std::size_t i = 0; i < n; ++i) {
            prefix[i] = run;
            run *= 1.0 - pi[i] * r(i, a);
        }
        double suffix = 1.0;
        for (std::size_t i = n; i-- > 0;) {
            const double loo = prefix[i] * suffix;
            dpi[i] += dv[a] * r(i, a) * loo;
            dr(i, a) += dv[a] * pi[i] * loo;
            suffix *= 1.0 - pi[i] * r(i, a);
        }
    }
}

}  // namespace traindetail

// Composite loss with gradients for every parameter group. The bag is used
// as-is (subsampling happens in the training loop).
inline LossComponents composite_loss_and_grad(const ModelState& s, const Bag& bag,
                                              const AnchorBank& bank, const TrainConfig& cfg,
                                              double T, ModelGrads* grads) {
    LossComponents out;

    if (!s.use_selector) {
        ForwardCache fc;
        forward(s.host, bag.features, {}, s.mode, &fc);
        out.task = cross_entropy(fc.out.probs, bag.label);
        out.total = out.task;
        if (grads) {
            std::vector<double> dlogits = fc.out.probs;
            dlogits[static_cast<std::size_t>(bag.label)] -= 1.0;
            HostBackwardResult hb = host_backward(s.host, BagRows::all(bag.features), {}, s.mode,
                                                  fc, dlogits);
            grads->host = std::move(hb.params);
        }
        return out;
    }

    const std::size_t n = bag.n();

    // Forward pipeline.
    AdaptCache ac;
    adapt(s.ground, bag.features, &ac);
    ResponseCache rc;
    const MatD bridge_input = s.gcfg.bridge_on_adapted ? ac.E : to_matd(bag.features);
    anchor_responses_from(s.ground, s.gcfg, bridge_input, bank, &rc);
    SelectorCache sc;
    const GateVector gv = gates(s.sel, ac.E, bag.coords, T, &sc);
    ForwardCache fc;
    forward(s.host, bag.features, gv.pi, s.mode, &fc);

    out.task = cross_entropy(fc.out.probs, bag.label);
    out.budget = budget_loss(gv.pi, cfg.rho);

    const std::vector<double> alpha_y = s.caw.alpha_row(static_cast<std::uint32_t>(bag.label));
    const std::vector<double> v = coverage(gv.pi, rc.r);
    double uncovered = 0.0, alpha_sum = 0.0;
    for (std::size_t m = 0; m < v.size(); ++m) {
        uncovered += alpha_y[m] * (1.0 - v[m]);
        alpha_sum += alpha_y[m];
    }
    const double denom = std::max(alpha_sum, kGroundDenomFloor);
    out.ground = uncovered / denom;
    out.total = out.task + cfg.lambda_budget * out.budget + cfg.lambda_ground * out.ground;

    if (!grads) return out;

    // Task path.
    std::vector<double> dlogits = fc.out.probs;
    dlogits[static_cast<std::size_t>(bag.label)] -= 1.0;
    HostBackwardResult hb =
        host_backward(s.host, BagRows::all(bag.features), gv.pi, s.mode, fc, dlogits);
    grads->host = std::move(hb.params);
    std::vector<double> dpi = std::move(hb.dgates);

    // Budget path.
    budget_loss_grad(gv.pi, cfg.rho, cfg.lambda_budget, dpi);

    // Grounding path: d/dv, d/dalpha, then through coverage into pi and r.
    std::vector<double> dv(v.size());
    MatD dr(n, v.size());
    for (std::size_t m = 0; m < v.size(); ++m) {
        dv[m] = -cfg.lambda_ground * alpha_y[m] / denom;
        double dalpha = (1.0 - v[m]) / denom;
        if (alpha_sum > kGroundDenomFloor) dalpha -= out.ground / denom;
        const double raw = s.caw.raw(static_cast<std::size_t>(bag.label), m);
        grads->draw(static_cast<std::size_t>(bag.label), m) +=
            cfg.lambda_ground * dalpha * sigmoid(raw);
    }
    traindetail::coverage_backward(gv.pi, rc.r, dv, dpi, dr);

    // Responses into bridge (and adapted features when the flag routes them).
    MatD dE(n, ac.E.cols);
    responses_backward(s.ground, s.gcfg, bridge_input, bank, rc, dr, grads->dB,
                       s.gcfg.bridge_on_adapted ? &dE : nullptr);

    // Gates into selector weights and adapted features.
    gates_backward(s.sel, gv, sc, dpi, grads->sel, &dE);

    // Adapted features into the low-rank adapter.
    adapt_backward(s.ground, bag.features, ac, dE, grads->dU, grads->dV);

    return out;
}

inline LossComponents composite_loss(const ModelState& s, const Bag& bag, const AnchorBank& bank,
                                     const TrainConfig& cfg, double T) {
    return composite_loss_and_grad(s, bag, bank, cfg, T, nullptr);
}

// Parameter walking ----------------------------------------------------------

enum class ParamGroup : std::uint8_t { host = 0, grounding = 1, selector = 2, class_anchor = 3 };

template <typename Fn>
void for_each_tensor(ModelState& s, ModelGrads& g, Fn&& fn) {
    fn(std::span<double>(s.host.W1.data), std::span<double>(g.host.dW1.data), ParamGroup::host);
    fn(std::span<double>(s.host.w2), std::span<double>(g.host.dw2), ParamGroup::host);
    fn(std::span<double>(s.host.Wc.data), std::span<double>(g.host.dWc.data), ParamGroup::host);
    fn(std::span<double>(s.host.b), std::span<double>(g.host.db), ParamGroup::host);
    fn(std::span<double>(s.ground.U.data), std::span<double>(g.dU.data), ParamGroup::grounding);
    fn(std::span<double>(s.ground.V.data), std::span<double>(g.dV.data), ParamGroup::grounding);
    fn(std::span<double>(s.ground.B.data), std::span<double>(g.dB.data), ParamGroup::grounding);
    fn(std::span<double>(s.sel.W1.data), std::span<double>(g.sel.dW1.data), ParamGroup::selector);
    fn(std::span<double>(s.sel.b1), std::span<double>(g.sel.db1), ParamGroup::selector);
    fn(std::span<double>(s.sel.w2), std::span<double>(g.sel.dw2), ParamGroup::selector);
    fn(std::span<double>(&s.sel.b2, 1), std::span<double>(&g.sel.db2, 1), ParamGroup::selector);
    fn(std::span<double>(s.caw.raw.data), std::span<double>(g.draw.data),
       ParamGroup::class_anchor);
}

struct AdamW {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    std::vector<std::vector<double>> m;
    std::vector<std::vector<double>> v;
    std::int64_t step = 0;

    void ensure(std::size_t tensor_idx, std::size_t size) {
        if (m.size() <= tensor_idx) {
            m.resize(tensor_idx + 1);
            v.resize(tensor_idx + 1);
        }
        if (m[tensor_idx].size() != size) {
            m[tensor_idx].assign(size, 0.0);
            v[tensor_idx].assign(size, 0.0);
        }
    }

    void update(ModelState& s, ModelGrads& g, double lr, double weight_decay,
                bool selector_stack_active) {
        ++step;
        const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(step));
        const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(step));
        std::size_t idx = 0;
        for_each_tensor(s, g, [&](std::span<double> p, std::span<double> grad, ParamGroup group) {
            ensure(idx, p.size());
            const bool active = group == ParamGroup::host || selector_stack_active;
            if (active) {
                auto& mi = m[idx];
                auto& vi = v[idx];
                for (std::size_t i = 0; i < p.size(); ++i) {
                    mi[i] = beta1 * mi[i] + (1.0 - beta1) * grad[i];
                    vi[i] = beta2 * vi[i] + (1.0 - beta2) * grad[i] * grad[i];
                    const double mhat = mi[i] / bc1;
                    const double vhat = vi[i] / bc2;
                    p[i] -= lr * (mhat / (std::sqrt(vhat) + eps) + weight_decay * p[i]);
                }
            }
            ++idx;
        });
    }
};

inline double clip_global_norm(ModelState& s, ModelGrads& g, double max_norm) {
    double sq = 0.0;
    for_each_tensor(s, g, [&](std::span<double>, std::span<double> grad, ParamGroup) {
        for (double x : grad) sq += x * x;
    });
    const double norm = std::sqrt(sq);
    if (norm > max_norm && norm > 0.0) {
        const double scale = max_norm / norm;
        for_each_tensor(s, g, [&](std::span<double>, std::span<double> grad, ParamGroup) {
            for (double& x : grad) x *= scale;
        });
    }
    return norm;
}

// Deployment-path prediction: gates injected when the selector is in use.
struct BagPrediction {
    ForwardResult fr;
    GateVector gv;
    int predicted = 0;
};

inline BagPrediction predict_bag(const ModelState& s, const AnchorBank& /*bank*/, const Bag& bag,
                                 double temperature) {
    BagPrediction out;
    if (s.use_selector) {
        const MatD E = adapt(s.ground, bag.features, nullptr);
        out.gv = gates(s.sel, E, bag.coords, temperature, nullptr);
        out.fr = forward(s.host, bag.features, out.gv.pi, s.mode);
    } else {
        out.fr = forward(s.host, bag.features, {}, s.mode);
    }
    out.predicted = static_cast<int>(
        std::max_element(out.fr.probs.begin(), out.fr.probs.end()) - out.fr.probs.begin());
    return out;
}

inline BagPrediction predict_bag(const ModelState& s, const AnchorBank& bank, const Bag& bag) {
    return predict_bag(s, bank, bag, s.t_inference);
}

// Training loop ---------------------------------------------------------------

struct EpochLog {
    int epoch = 0;
    double temperature = kTStart;
    double lr = 0.0;
    double train_loss = 0.0;
    double task = 0.0;
    double budget = 0.0;
    double ground = 0.0;
    double max_budget_component = 0.0;
    double val_accuracy = 0.0;
    double val_macro_f1 = 0.0;
    double val_mean_gate = 0.0;
};

struct TrainResult {
    ModelState state;
    std::vector<EpochLog> epochs;
    double first_window_loss = 0.0;  // mean of the first 5 steps
    double last_window_loss = 0.0;   // mean of the last 5 steps
};

inline Bag subsample_bag(const Bag& bag, std::uint32_t max_patches, Rng& rng) {
    if (bag.n() <= max_patches) return bag;
    const std::vector<std::uint32_t> keep = rng.sample_indices(bag.n(), max_patches);
    Bag out;
    out.id = bag.id;
    out.label = bag.label;
    out.split = bag.split;
    out.features = MatF(keep.size(), bag.features.cols);
    out.coords = MatF(keep.size(), 2);
    for (std::size_t i = 0; i < keep.size(); ++i) {
        const std::uint32_t src = keep[i];
        std::copy(bag.features.row(src), bag.features.row(src) + bag.features.cols,
                  out.features.row(i));
        out.coords(i, 0) = bag.coords(src, 0);
        out.coords(i, 1) = bag.coords(src, 1);
    }
    return out;
}

inline TrainResult train(const Dataset& ds, const TrainConfig& cfg) {
    cfg.validate();
    TrainResult result;
    result.state = init_model(ds, cfg);
    ModelState& s = result.state;

    std::vector<std::size_t> train_idx, val_idx;
    for (std::size_t i = 0; i < ds.bags.size(); ++i) {
        if (ds.bags[i].split == Split::train) train_idx.push_back(i);
        if (ds.bags[i].split == Split::val) val_idx.push_back(i);
    }
    if (cfg.epochs == 0 || train_idx.empty()) return result;

    AdamW opt;
    ModelGrads grads;
    std::vector<double> recent_losses;

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        const double T = cfg.temperature_at(epoch);
        const double lr =
            cfg.cosine_lr
                ? cfg.learning_rate * 0.5 *
                      (1.0 + std::cos(std::numbers::pi * static_cast<double>(epoch) /
                                      static_cast<double>(cfg.epochs)))
                : cfg.learning_rate;

        std::vector<std::size_t> order = train_idx;
        Rng order_rng = make_stream(cfg.seed, stream_tag::epoch_order, static_cast<std::uint64_t>(epoch));
        order_rng.shuffle(order);

        EpochLog log;
        log.epoch = epoch;
        log.temperature = T;
        log.lr = lr;

        for (std::size_t bag_i : order) {
            const Bag& full_bag = ds.bags[bag_i];
            Rng sub_rng = make_stream(cfg.seed, stream_tag::subsample,
                                      static_cast<std::uint64_t>(epoch), bag_i);
            const Bag bag = subsample_bag(full_bag, cfg.max_train_patches, sub_rng);

            grads.init_like(s);
            const LossComponents lc = composite_loss_and_grad(s, bag, ds.bank, cfg, T, &grads);
            if (!std::isfinite(lc.total))
                throw TrainError("non-finite loss at epoch " + std::to_string(epoch) + " bag " +
                                 full_bag.id);

            clip_global_norm(s, grads, cfg.grad_clip);
            opt.update(s, grads, lr, cfg.weight_decay, cfg.use_selector);
            if (cfg.use_selector && s.gcfg.constrained_bridge) row_normalize(s.ground.B);

            log.train_loss += lc.total;
            log.task += lc.task;
            log.budget += lc.budget;
            log.ground += lc.ground;
            log.max_budget_component = std::max(log.max_budget_component, lc.budget);

            recent_losses.push_back(lc.total);
            if (recent_losses.size() == 5 && result.first_window_loss == 0.0) {
                double sum = 0.0;
                for (double x : recent_losses) sum += x;
                result.first_window_loss = sum / 5.0;
            }
            if (recent_losses.size() > 5) recent_losses.erase(recent_losses.begin());
        }
        const auto steps = static_cast<double>(order.size());
        log.train_loss /= steps;
        log.task /= steps;
        log.budget /= steps;
        log.ground /= steps;

        // Validation under the deployment path at the current temperature.
        if (!val_idx.empty()) {
            std::vector<int> y_true, y_pred;
            double gate_sum = 0.0;
            for (std::size_t vi : val_idx) {
                const Bag& vb = ds.bags[vi];
                const BagPrediction bp = predict_bag(s, ds.bank, vb, T);
                y_true.push_back(vb.label);
                y_pred.push_back(bp.predicted);
                if (s.use_selector) {
                    double mg = 0.0;
                    for (double p : bp.gv.pi) mg += p;
                    gate_sum += mg / static_cast<double>(bp.gv.pi.size());
                }
            }
            log.val_accuracy = accuracy(y_true, y_pred);
            log.val_macro_f1 = macro_f1(y_true, y_pred, static_cast<int>(s.classes()));
            log.val_mean_gate = gate_sum / static_cast<double>(val_idx.size());
        }

        result.epochs.push_back(log);
    }

    if (!recent_losses.empty()) {
        double sum = 0.0;
        for (double x : recent_losses) sum += x;
        result.last_window_loss = sum / static_cast<double>(recent_losses.size());
    }
    return result;
}

}  // namespace evsel
