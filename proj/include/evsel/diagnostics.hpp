#pragma once
// Intervention diagnostics for evidence subsets.
//
// Conventions shared by every diagnostic:
//  - The reference prediction of a bag is the deployed model on the full bag
//    (gates injected when the model trains a selector).
//  - Phi is the probability of that reference class, frozen rather than
//    re-argmaxed when the bag is perturbed.
//  - Subset evaluations restrict the bag to the subset rows (no gates).
//  - The task metric M is Macro-F1; keep-only drop is M(X) - M(X_S),
//    complement degradation is M(X) - M(X_notS) with empty complements
//    skipped and counted.
//  - Every budget-matched rule returns exactly k = max(1, round(frac*N))
//    patches; ties break by lowest index.
//  - Per-bag work may fan out across EVSEL_THREADS threads; results land in
//    index-ordered slots, so any thread count gives bitwise-identical output.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "evsel/coverage.hpp"
#include "evsel/errors.hpp"
#include "evsel/grounding.hpp"
#include "evsel/linalg.hpp"
#include "evsel/metrics.hpp"
#include "evsel/predictor.hpp"
#include "evsel/prng.hpp"
#include "evsel/recovery.hpp"
#include "evsel/selector.hpp"
#include "evsel/synthbag.hpp"
#include "evsel/training.hpp"

namespace evsel {

inline int eval_threads() {
    const char* e = std::getenv("EVSEL_THREADS");
    if (!e) return 1;
    const int v = std::atoi(e);
    return std::clamp(v, 1, 64);
}

template <typename Fn>
void parallel_for(std::size_t n, Fn&& fn) {
    const int threads = eval_threads();
    if (threads <= 1 || n <= 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::vector<std::thread> pool;
    std::size_t chunk = (n + threads - 1) / static_cast<std::size_t>(threads);
    for (int t = 0; t < threads; ++t) {
        const std::size_t lo = static_cast<std::size_t>(t) * chunk;
        const std::size_t hi = std::min(n, lo + chunk);
        if (lo >= hi) break;
        pool.emplace_back([lo, hi, &fn]() {
            for (std::size_t i = lo; i < hi; ++i) fn(i);
        });
    }
    for (auto& th : pool) th.join();
}

// Evidence attached to one bag: a continuous signal in [0,1]^N plus the
// discrete subset derived from it (sorted ascending).
struct RuleEvidence {
    std::vector<double> gates;
    std::vector<std::uint32_t> subset;
};

enum class BaselineRule : std::uint8_t {
    random_k = 0,
    attention_topk = 1,
    gradient_topk = 2,
    occlusion_topk = 3,
    gce_discrete = 4,
    gce_soft_threshold = 5,
};

inline const char* baseline_rule_name(BaselineRule r) {
    switch (r) {
        case BaselineRule::random_k: return "random_k";
        case BaselineRule::attention_topk: return "attention_topk";
        case BaselineRule::gradient_topk: return "gradient_topk";
        case BaselineRule::occlusion_topk: return "occlusion_topk";
        case BaselineRule::gce_discrete: return "gce_discrete";
        default: return "gce_soft_threshold";
    }
}

inline std::uint32_t budget_k(double budget_frac, std::uint32_t n) {
    const auto k = static_cast<std::uint32_t>(
        std::lround(budget_frac * static_cast<double>(n)));
    return std::max<std::uint32_t>(1, std::min(k, n));
}

namespace diagdetail {

inline std::vector<std::uint32_t> top_k(std::span<const double> scores, std::uint32_t k) {
    std::vector<std::uint32_t> idx(scores.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<std::uint32_t>(i);
    std::stable_sort(idx.begin(), idx.end(), [&](std::uint32_t a, std::uint32_t b) {
        if (scores[a] != scores[b]) return scores[a] > scores[b];
        return a < b;
    });
    idx.resize(k);
    std::sort(idx.begin(), idx.end());
    return idx;
}

inline std::vector<double> minmax_unit(std::span<const double> scores) {
    double lo = scores[0], hi = scores[0];
    for (double s : scores) {
        lo = std::min(lo, s);
        hi = std::max(hi, s);
    }
    std::vector<double> out(scores.size(), 0.5);
    if (hi > lo) {
        for (std::size_t i = 0; i < scores.size(); ++i) out[i] = (scores[i] - lo) / (hi - lo);
    }
    return out;
}

inline std::vector<std::uint32_t> complement_of(std::span<const std::uint32_t> sorted_subset,
                                                std::uint32_t n) {
    std::vector<std::uint32_t> out;
    out.reserve(n - sorted_subset.size());
    std::size_t j = 0;
    for (std::uint32_t i = 0; i < n; ++i) {
        if (j < sorted_subset.size() && sorted_subset[j] == i) {
            ++j;
        } else {
            out.push_back(i);
        }
    }
    return out;
}

inline double median(std::vector<double> v) {
    if (v.empty()) return 0.0;
    std::sort(v.begin(), v.end());
    const std::size_t m = v.size() / 2;
    if (v.size() % 2 == 1) return v[m];
    return 0.5 * (v[m - 1] + v[m]);
}

}  // namespace diagdetail

// The model's own evidence for one bag: gates at the inference temperature,
// anchor responses, and the recovered subset for the deployed prediction.
struct ModelEvidence {
    GateVector gv;
    MatD r;
    int reference_class = 0;            // deployed full-bag prediction
    double reference_prob = 0.0;
    EvidenceSubset recovered;
};

inline ModelEvidence model_evidence(const ModelState& s, const AnchorBank& bank, const Bag& bag,
                                    const RecoveryConfig& rcfg) {
    if (!s.use_selector) throw ContractError("model_evidence: model has no selector");
    ModelEvidence ev;
    AdaptCache ac;
    adapt(s.ground, bag.features, &ac);
    ev.gv = gates(s.sel, ac.E, bag.coords, s.t_inference, nullptr);
    ev.r = anchor_responses(s.ground, s.gcfg, bag.features, ac.E, bank);
    const ForwardResult fr = forward(s.host, bag.features, ev.gv.pi, s.mode);
    ev.reference_class = static_cast<int>(
        std::max_element(fr.probs.begin(), fr.probs.end()) - fr.probs.begin());
    ev.reference_prob = fr.probs[static_cast<std::size_t>(ev.reference_class)];
    const std::vector<double> alpha =
        s.caw.alpha_row(static_cast<std::uint32_t>(ev.reference_class));
    ev.recovered = recover(ev.gv.pi, ev.r, alpha, rcfg);
    return ev;
}

// Budget-matched subset selection. All rules return exactly k indices.
inline RuleEvidence baseline_subset(BaselineRule rule, const ModelState& s,
                                    const AnchorBank& bank, const Bag& bag, double budget_frac,
                                    std::uint64_t seed,
                                    const RecoveryConfig& rcfg = RecoveryConfig{}) {
    const std::uint32_t n = bag.n();
    const std::uint32_t k = budget_k(budget_frac, n);
    RuleEvidence out;

    if (rule == BaselineRule::gce_discrete || rule == BaselineRule::gce_soft_threshold) {
        const ModelEvidence ev = model_evidence(s, bank, bag, rcfg);
        out.gates = ev.gv.pi;
        if (rule == BaselineRule::gce_soft_threshold) {
            out.subset = diagdetail::top_k(out.gates, k);
            return out;
        }
        // Truncate or extend the recovered subset to the budget by marginal gain.
        const std::vector<double> alpha =
            s.caw.alpha_row(static_cast<std::uint32_t>(ev.reference_class));
        std::vector<std::uint32_t> sel = ev.recovered.sorted();
        if (sel.size() > k) {
            MatD sub(sel.size(), ev.r.cols);
            for (std::size_t i = 0; i < sel.size(); ++i)
                std::copy(ev.r.row(sel[i]), ev.r.row(sel[i]) + ev.r.cols, sub.row(i));
            const std::vector<std::uint32_t> picked = greedy_max(sub, alpha, k);
            std::vector<std::uint32_t> mapped;
            mapped.reserve(k);
            for (std::uint32_t p : picked) mapped.push_back(sel[p]);
            std::sort(mapped.begin(), mapped.end());
            out.subset = std::move(mapped);
        } else {
            std::vector<char> taken(n, 0);
            std::vector<double> q(ev.r.cols, 1.0);
            for (std::uint32_t i : sel) {
                taken[i] = 1;
                for (std::size_t a = 0; a < ev.r.cols; ++a) q[a] *= 1.0 - ev.r(i, a);
            }
            while (sel.size() < k) {
                std::size_t best = n;
                double best_gain = -1.0;
                for (std::size_t i = 0; i < n; ++i) {
                    if (taken[i]) continue;
                    const double g = covdetail::gain(ev.r, alpha, q, i);
                    if (g > best_gain) {
                        best_gain = g;
                        best = i;
                    }
                }
                taken[best] = 1;
                sel.push_back(static_cast<std::uint32_t>(best));
                for (std::size_t a = 0; a < ev.r.cols; ++a) q[a] *= 1.0 - ev.r(best, a);
            }
            std::sort(sel.begin(), sel.end());
            out.subset = std::move(sel);
        }
        return out;
    }

    // Post-hoc rules score the ungated host forward.
    std::vector<double> scores(n, 0.0);
    switch (rule) {
        case BaselineRule::random_k: {
            Rng rng = make_stream(seed, stream_tag::baseline, fnv1a64(bag.id),
                                  static_cast<std::uint64_t>(rule));
            for (auto& v : scores) v = rng.uniform();
            break;
        }
        case BaselineRule::attention_topk: {
            const ForwardResult fr = forward(s.host, bag.features, {}, s.mode);
            scores.assign(fr.attention.begin(), fr.attention.end());
            break;
        }
        case BaselineRule::gradient_topk: {
            ForwardCache fc;
            forward(s.host, bag.features, {}, s.mode, &fc);
            const int cstar = static_cast<int>(
                std::max_element(fc.out.probs.begin(), fc.out.probs.end()) -
                fc.out.probs.begin());
            std::vector<double> dlogits(s.classes(), 0.0);
            dlogits[static_cast<std::size_t>(cstar)] = 1.0;
            const HostBackwardResult hb = host_backward(
                s.host, BagRows::all(bag.features), {}, s.mode, fc, dlogits, true);
            for (std::uint32_t i = 0; i < n; ++i)
                scores[i] = l2norm(hb.dfeatures.row(i), hb.dfeatures.cols);
            break;
        }
        case BaselineRule::occlusion_topk: {
            if (n == 1) {
                scores[0] = 1.0;
                break;
            }
            const ForwardResult fr = forward(s.host, bag.features, {}, s.mode);
            const int cstar = static_cast<int>(
                std::max_element(fr.probs.begin(), fr.probs.end()) - fr.probs.begin());
            const double p_full = fr.probs[static_cast<std::size_t>(cstar)];
            std::vector<std::uint32_t> rest(n - 1);
            for (std::uint32_t i = 0; i < n; ++i) {
                std::uint32_t w = 0;
                for (std::uint32_t j = 0; j < n; ++j) {
                    if (j != i) rest[w++] = j;
                }
                const SubsetPrediction sp = predict_subset(s.host, bag.features, rest);
                scores[i] = p_full - sp.probs[static_cast<std::size_t>(cstar)];
            }
            break;
        }
        default: break;
    }

    out.gates = diagdetail::minmax_unit(scores);
    out.subset = diagdetail::top_k(scores, k);
    return out;
}

// Aggregate S/N/R record over one split for one evidence rule.
struct SnrAggregate {
    int bags = 0;
    double full_macro_f1 = 0.0;
    double full_accuracy = 0.0;
    double evidence_macro_f1 = 0.0;   // evidence sufficiency, M(X_S)
    double keep_only_drop = 0.0;      // M(X) - M(X_S)
    bool necessity_available = false;
    double complement_macro_f1 = 0.0;
    double complement_base_f1 = 0.0;  // full-bag metric on the same bags
    double complement_degradation = 0.0;
    int empty_complements = 0;
    double mean_cd_gap = 0.0;
    double median_cd_gap = 0.0;
    double mean_evidence_fraction = 0.0;
};

inline SnrAggregate snr_evaluate(const ModelState& s, const AnchorBank& bank,
                                 std::span<const Bag* const> bags,
                                 std::span<const RuleEvidence> evidence) {
    if (bags.size() != evidence.size())
        throw ContractError("snr_evaluate: evidence/bag count mismatch");
    SnrAggregate agg;
    agg.bags = static_cast<int>(bags.size());
    if (bags.empty()) return agg;

    for (const RuleEvidence& ev : evidence) {
        if (ev.subset.empty()) throw ContractError("snr_evaluate: empty evidence subset");
    }

    struct PerBag {
        int label = 0;
        int full_pred = 0;
        int evidence_pred = 0;
        int complement_pred = -1;  // -1 when the complement is empty
        double cd_gap = 0.0;
        double evidence_fraction = 0.0;
    };
    std::vector<PerBag> rows(bags.size());

    parallel_for(bags.size(), [&](std::size_t i) {
        const Bag& bag = *bags[i];
        const RuleEvidence& ev = evidence[i];
        PerBag row;
        row.label = bag.label;

        const BagPrediction full = predict_bag(s, bank, bag);
        row.full_pred = full.predicted;
        const double p_ref = full.fr.probs[static_cast<std::size_t>(full.predicted)];

        const SubsetPrediction keep = predict_subset(s.host, bag.features, ev.subset);
        row.evidence_pred = keep.predicted;

        const std::vector<std::uint32_t> rest = diagdetail::complement_of(ev.subset, bag.n());
        if (!rest.empty()) {
            row.complement_pred = predict_subset(s.host, bag.features, rest).predicted;
        }

        double phi_cont = p_ref;
        if (!ev.gates.empty()) {
            const ForwardResult cont = forward(s.host, bag.features, ev.gates, s.mode);
            phi_cont = cont.probs[static_cast<std::size_t>(full.predicted)];
        }
        row.cd_gap = std::abs(phi_cont - keep.probs[static_cast<std::size_t>(full.predicted)]);
        row.evidence_fraction =
            static_cast<double>(ev.subset.size()) / static_cast<double>(bag.n());
        rows[i] = row;
    });

    const int classes = static_cast<int>(s.classes());
    std::vector<int> y_true, full_pred, ev_pred;
    std::vector<int> comp_true, comp_pred, comp_full_pred;
    std::vector<double> gaps;
    double frac_sum = 0.0;
    for (const PerBag& row : rows) {
        y_true.push_back(row.label);
        full_pred.push_back(row.full_pred);
        ev_pred.push_back(row.evidence_pred);
        if (row.complement_pred >= 0) {
            comp_true.push_back(row.label);
            comp_pred.push_back(row.complement_pred);
            comp_full_pred.push_back(row.full_pred);
        } else {
            ++agg.empty_complements;
        }
        gaps.push_back(row.cd_gap);
        frac_sum += row.evidence_fraction;
    }

    agg.full_macro_f1 = macro_f1(y_true, full_pred, classes);
    agg.full_accuracy = accuracy(y_true, full_pred);
    agg.evidence_macro_f1 = macro_f1(y_true, ev_pred, classes);
    agg.keep_only_drop = agg.full_macro_f1 - agg.evidence_macro_f1;
    if (!comp_true.empty()) {
        agg.necessity_available = true;
        agg.complement_macro_f1 = macro_f1(comp_true, comp_pred, classes);
        agg.complement_base_f1 = macro_f1(comp_true, comp_full_pred, classes);
        agg.complement_degradation = agg.complement_base_f1 - agg.complement_macro_f1;
    }
    double gap_sum = 0.0;
    for (double g : gaps) gap_sum += g;
    agg.mean_cd_gap = gap_sum / static_cast<double>(gaps.size());
    agg.median_cd_gap = diagdetail::median(gaps);
    agg.mean_evidence_fraction = frac_sum / static_cast<double>(rows.size());
    return agg;
}

// Localization against planted ground truth.
struct LocalizationResult {
    bool available = false;
    int bags = 0;
    double dice = 0.0;
    double precision = 0.0;
    double recall = 0.0;
};

inline LocalizationResult localization(std::span<const Bag* const> bags,
                                       std::span<const RuleEvidence> evidence) {
    LocalizationResult res;
    double dice = 0.0, prec = 0.0, rec = 0.0;
    for (std::size_t i = 0; i < bags.size(); ++i) {
        const Bag& bag = *bags[i];
        if (bag.planted.empty()) continue;
        const OverlapStats st = overlap(evidence[i].subset, bag.planted);
        dice += st.dice;
        prec += st.precision;
        rec += st.recall;
        ++res.bags;
    }
    if (res.bags == 0) return res;
    res.available = true;
    res.dice = dice / res.bags;
    res.precision = prec / res.bags;
    res.recall = rec / res.bags;
    return res;
}

// Minimal-sufficient-subset search -------------------------------------------
//
// Host-level diagnostic: the reference is the ungated full-bag forward, and a
// candidate prefix is accepted when the restricted bag keeps the predicted
// class with probability drop at most drop_tol. Drops are probability drops
// of the reference class.

enum class SubsetPolicy : std::uint8_t { sufficient_prefix = 0, attention_topk = 1, random_topk = 2 };

inline const char* subset_policy_name(SubsetPolicy p) {
    switch (p) {
        case SubsetPolicy::sufficient_prefix: return "sufficient_prefix";
        case SubsetPolicy::attention_topk: return "attention_topk";
        default: return "random_topk";
    }
}

struct MinimalSubsetBagResult {
    std::vector<std::vector<std::uint32_t>> subsets;  // disjoint, in discovery order
    std::optional<double> keep_only_drop;             // first subset
    std::array<std::optional<double>, 3> remove_union_drop;
};

inline MinimalSubsetBagResult minimal_subset_search(const ModelState& s, const AnchorBank& bank,
                                                    const Bag& bag, std::uint32_t k,
                                                    SubsetPolicy policy, double drop_tol,
                                                    std::uint64_t seed) {
    MinimalSubsetBagResult res;
    const std::uint32_t n = bag.n();
    if (k == 0 || k > n) return res;

    const ForwardResult full = forward(s.host, bag.features, {}, s.mode);
    const int cstar = static_cast<int>(
        std::max_element(full.probs.begin(), full.probs.end()) - full.probs.begin());
    const double p_full = full.probs[static_cast<std::size_t>(cstar)];

    std::vector<double> scores(n, 0.0);
    switch (policy) {
        case SubsetPolicy::sufficient_prefix: {
            const MatD E = adapt(s.ground, bag.features, nullptr);
            const MatD r = anchor_responses(s.ground, s.gcfg, bag.features, E, bank);
            const std::vector<double> alpha = s.caw.alpha_row(static_cast<std::uint32_t>(cstar));
            for (std::uint32_t i = 0; i < n; ++i) {
                double g = 0.0;
                for (std::size_t a = 0; a < r.cols; ++a) g += alpha[a] * r(i, a);
                scores[i] = g;
            }
            break;
        }
        case SubsetPolicy::attention_topk:
            scores.assign(full.attention.begin(), full.attention.end());
            break;
        case SubsetPolicy::random_topk: {
            Rng rng = make_stream(seed, stream_tag::baseline, fnv1a64(bag.id),
                                  100 + static_cast<std::uint64_t>(policy));
            for (auto& v : scores) v = rng.uniform();
            break;
        }
    }

    std::vector<std::uint32_t> pool(n);
    for (std::uint32_t i = 0; i < n; ++i) pool[i] = i;

    while (pool.size() >= k) {
        std::stable_sort(pool.begin(), pool.end(), [&](std::uint32_t a, std::uint32_t b) {
            if (scores[a] != scores[b]) return scores[a] > scores[b];
            return a < b;
        });
        std::vector<std::uint32_t> candidate(pool.begin(), pool.begin() + k);
        std::sort(candidate.begin(), candidate.end());
        const SubsetPrediction sp = predict_subset(s.host, bag.features, candidate);
        const double drop = p_full - sp.probs[static_cast<std::size_t>(cstar)];
        if (sp.predicted != cstar || drop > drop_tol) break;
        res.subsets.push_back(candidate);
        std::vector<std::uint32_t> next_pool;
        next_pool.reserve(pool.size() - k);
        for (std::uint32_t i : pool) {
            if (!std::binary_search(candidate.begin(), candidate.end(), i)) next_pool.push_back(i);
        }
        pool = std::move(next_pool);
    }

    if (!res.subsets.empty()) {
        const SubsetPrediction sp = predict_subset(s.host, bag.features, res.subsets.front());
        res.keep_only_drop = p_full - sp.probs[static_cast<std::size_t>(cstar)];
        std::vector<std::uint32_t> uni;
        for (std::size_t j = 0; j < res.subsets.size() && j < 3; ++j) {
            uni.insert(uni.end(), res.subsets[j].begin(), res.subsets[j].end());
            std::sort(uni.begin(), uni.end());
            const std::vector<std::uint32_t> rest = diagdetail::complement_of(uni, n);
            if (rest.empty()) break;
            const SubsetPrediction rp = predict_subset(s.host, bag.features, rest);
            res.remove_union_drop[j] = p_full - rp.probs[static_cast<std::size_t>(cstar)];
        }
    }
    return res;
}

struct MinimalSubsetRow {
    SubsetPolicy policy = SubsetPolicy::sufficient_prefix;
    std::uint32_t k = 8;
    int bags = 0;
    double subsets_per_bag = 0.0;
    double frac_ge2 = 0.0;
    double frac_ge3 = 0.0;
    double keep_only_drop = 0.0;                 // mean over bags with >= 1 subset
    std::array<double, 3> remove_union{0, 0, 0};  // mean over bags where defined
    std::array<int, 3> remove_union_count{0, 0, 0};
};

inline MinimalSubsetRow minimal_subset_aggregate(const ModelState& s, const AnchorBank& bank,
                                                 std::span<const Bag* const> bags,
                                                 std::uint32_t k, SubsetPolicy policy,
                                                 double drop_tol, std::uint64_t seed) {
    MinimalSubsetRow row;
    row.policy = policy;
    row.k = k;
    row.bags = static_cast<int>(bags.size());
    std::vector<MinimalSubsetBagResult> results(bags.size());
    parallel_for(bags.size(), [&](std::size_t i) {
        results[i] = minimal_subset_search(s, bank, *bags[i], k, policy, drop_tol, seed);
    });

    int with_any = 0;
    double keep_sum = 0.0;
    for (const auto& r : results) {
        row.subsets_per_bag += static_cast<double>(r.subsets.size());
        row.frac_ge2 += r.subsets.size() >= 2 ? 1.0 : 0.0;
        row.frac_ge3 += r.subsets.size() >= 3 ? 1.0 : 0.0;
        if (r.keep_only_drop) {
            keep_sum += *r.keep_only_drop;
            ++with_any;
        }
        for (std::size_t j = 0; j < 3; ++j) {
            if (r.remove_union_drop[j]) {
                row.remove_union[j] += *r.remove_union_drop[j];
                ++row.remove_union_count[j];
            }
        }
    }
    if (row.bags > 0) {
        row.subsets_per_bag /= row.bags;
        row.frac_ge2 /= row.bags;
        row.frac_ge3 /= row.bags;
    }
    row.keep_only_drop = with_any > 0 ? keep_sum / with_any : 0.0;
    for (std::size_t j = 0; j < 3; ++j) {
        if (row.remove_union_count[j] > 0) row.remove_union[j] /= row.remove_union_count[j];
    }
    return row;
}

// Bound audits ----------------------------------------------------------------

// Self-contained additive-model instance for the coverage-residual bound:
// f(X) = q . sum_i w_i h_i with w_i >= 0, features in the anchor span, and
// eta chosen constructively as the smallest value satisfying the anchor
// completeness inequality over every subset. The audit then checks the full
// chain |f(X) - f(X_S)| <= L_q * eta * sum_m alpha_m (1 - v_m(1_S)) for all
// 2^N subsets.
struct InterventionalAuditReport {
    int instances = 0;
    std::uint64_t subsets_checked = 0;
    int violations = 0;
    double max_lhs_over_rhs = 0.0;
    double min_empty_lhs = 0.0;  // lhs at S = empty, minimized over instances
    double mean_eta = 0.0;
};

inline InterventionalAuditReport interventional_bound_audit(int instances, std::uint64_t seed) {
    constexpr std::uint32_t d = 16;
    constexpr std::uint32_t m = 4;
    constexpr double gamma = 8.0, delta = 0.15;

    InterventionalAuditReport rep;
    rep.instances = instances;
    rep.min_empty_lhs = std::numeric_limits<double>::infinity();

    for (int inst = 0; inst < instances; ++inst) {
        Rng rng = make_stream(seed, stream_tag::oracle, 7000 + static_cast<std::uint64_t>(inst));
        const std::uint32_t n = static_cast<std::uint32_t>(rng.range(4, 10));

        const MatD anchors = detail::orthonormal_prototypes(m, d, rng);
        MatD h(n, d);
        std::vector<double> w(n);
        for (std::uint32_t i = 0; i < n; ++i) {
            for (std::uint32_t a = 0; a < m; ++a) {
                const double c = rng.uniform(-1.0, 1.0);
                axpy(c, anchors.row(a), h.row(i), d);
            }
            w[i] = rng.uniform(0.0, 1.0);
        }
        std::vector<double> q(d);
        for (auto& v : q) v = rng.normal();
        const double lq = l2norm(q.data(), d);

        MatD r(n, m);
        for (std::uint32_t i = 0; i < n; ++i) {
            const double nrm = l2norm(h.row(i), d);
            for (std::uint32_t a = 0; a < m; ++a) {
                const double c = nrm > 0 ? dot(h.row(i), anchors.row(a), d) / nrm : 0.0;
                r(i, a) = sigmoid(gamma * (c - delta));
            }
        }
        std::vector<double> alpha(m);
        for (auto& v : alpha) v = rng.uniform(0.1, 1.0);

        // Residual vector and coverage complement per subset.
        const std::uint64_t total = 1ULL << n;
        std::vector<double> residual(d);
        auto eval_subset = [&](std::uint64_t mask, double& lhs, double& uncovered) {
            std::fill(residual.begin(), residual.end(), 0.0);
            for (std::uint32_t i = 0; i < n; ++i) {
                if (!(mask & (1ULL << i))) axpy(w[i], h.row(i), residual.data(), d);
            }
            lhs = std::abs(dot(q.data(), residual.data(), d));
            uncovered = 0.0;
            for (std::uint32_t a = 0; a < m; ++a) {
                double keep = 1.0;
                for (std::uint32_t i = 0; i < n; ++i) {
                    if (mask & (1ULL << i)) keep *= 1.0 - r(i, a);
                }
                uncovered += alpha[a] * keep;
            }
        };

        double eta = 0.0;
        for (std::uint64_t mask = 0; mask < total; ++mask) {
            double lhs, uncovered;
            eval_subset(mask, lhs, uncovered);
            const double residual_norm = l2norm(residual.data(), d);
            eta = std::max(eta, residual_norm / uncovered);
        }
        rep.mean_eta += eta;

        for (std::uint64_t mask = 0; mask < total; ++mask) {
            double lhs, uncovered;
            eval_subset(mask, lhs, uncovered);
            const double rhs = lq * eta * uncovered;
            ++rep.subsets_checked;
            if (lhs > rhs * (1.0 + 1e-9) + 1e-12) ++rep.violations;
            if (rhs > 0) rep.max_lhs_over_rhs = std::max(rep.max_lhs_over_rhs, lhs / rhs);
            if (mask == 0) rep.min_empty_lhs = std::min(rep.min_empty_lhs, lhs);
        }
    }
    if (instances > 0) rep.mean_eta /= instances;
    return rep;
}

// Gate-margin recoverability audit in feature_reweight mode, where the
// prediction is differentiable in the gates everywhere. L_hat is the largest
// gradient norm over random gate points plus the segment between pi and the
// thresholded indicator.
struct RecoverabilityAuditResult {
    double lhs = 0.0;
    double rhs = 0.0;
    double l_hat = 0.0;
    double gate_distance = 0.0;
    double min_margin = 0.0;
    bool holds = false;
};

inline RecoverabilityAuditResult recoverability_bound_audit(const ModelState& s,
                                                            const AnchorBank& bank,
                                                            const Bag& bag,
                                                            const RecoveryConfig& rcfg,
                                                            std::uint64_t seed,
                                                            int probes = 100) {
    const std::uint32_t n = bag.n();
    const ModelEvidence ev = model_evidence(s, bank, bag, rcfg);

    std::vector<double> indicator(n, 0.0);
    for (std::uint32_t i : ev.recovered.indices) indicator[i] = 1.0;

    const InjectionMode mode = InjectionMode::feature_reweight;
    const ForwardResult at_pi = forward(s.host, bag.features, ev.gv.pi, mode);
    const int cref = static_cast<int>(
        std::max_element(at_pi.probs.begin(), at_pi.probs.end()) - at_pi.probs.begin());

    auto phi = [&](std::span<const double> g) {
        return forward(s.host, bag.features, g, mode).probs[static_cast<std::size_t>(cref)];
    };
    auto grad_norm = [&](std::span<const double> g) {
        ForwardCache fc;
        forward(s.host, bag.features, g, mode, &fc);
        const auto& p = fc.out.probs;
        std::vector<double> dlogits(p.size());
        const double pc = p[static_cast<std::size_t>(cref)];
        for (std::size_t c = 0; c < p.size(); ++c)
            dlogits[c] = pc * ((static_cast<int>(c) == cref ? 1.0 : 0.0) - p[c]);
        const HostBackwardResult hb =
            host_backward(s.host, BagRows::all(bag.features), g, mode, fc, dlogits);
        return l2norm(hb.dgates.data(), hb.dgates.size());
    };

    RecoverabilityAuditResult res;
    res.l_hat = std::max(grad_norm(ev.gv.pi), grad_norm(indicator));
    Rng rng = make_stream(seed, stream_tag::oracle, 8000, fnv1a64(bag.id));
    std::vector<double> probe(n);
    for (int p = 0; p < probes; ++p) {
        if (p % 2 == 0) {
            for (auto& v : probe) v = rng.uniform();
        } else {
            const double t = rng.uniform();
            for (std::uint32_t i = 0; i < n; ++i)
                probe[i] = t * ev.gv.pi[i] + (1.0 - t) * indicator[i];
        }
        res.l_hat = std::max(res.l_hat, grad_norm(probe));
    }

    res.lhs = std::abs(phi(ev.gv.pi) - phi(indicator));
    double dist_sq = 0.0;
    double min_margin = 1.0;
    for (std::uint32_t i = 0; i < n; ++i) {
        const double diff = ev.gv.pi[i] - indicator[i];
        dist_sq += diff * diff;
        min_margin = std::min(min_margin, std::abs(ev.gv.pi[i] - rcfg.tau));
    }
    res.gate_distance = std::sqrt(dist_sq);
    res.min_margin = min_margin;
    res.rhs = res.l_hat * res.gate_distance;
    res.holds = res.lhs <= res.rhs * (1.0 + 1e-6) + 1e-12;
    return res;
}

// Stability under retraining -------------------------------------------------
//
// Perturbation = full retraining with a different seed. (Re-initializing only
// the selector on a frozen host would leave attention-based rules literally
// seed-invariant and the comparison vacuous.) Jaccard averages over bags and
// unordered seed pairs; a bag flips when its evidence-only predictions are
// not identical across seeds.
struct StabilityResult {
    int seeds = 0;
    double jaccard = 0.0;
    double flip_rate = 0.0;
};

inline StabilityResult stability(const Dataset& ds, const TrainConfig& base_cfg,
                                 BaselineRule rule, std::span<const std::uint64_t> seeds,
                                 double budget_frac, const RecoveryConfig& rcfg,
                                 std::uint64_t baseline_seed) {
    if (seeds.size() < 2) throw ContractError("stability: need at least two seeds");
    const std::vector<const Bag*> bags = ds.split_bags(Split::test);

    std::vector<std::vector<std::vector<std::uint32_t>>> subsets(seeds.size());
    std::vector<std::vector<int>> preds(seeds.size());
    for (std::size_t si = 0; si < seeds.size(); ++si) {
        TrainConfig cfg = base_cfg;
        cfg.seed = seeds[si];
        const TrainResult tr = train(ds, cfg);
        subsets[si].resize(bags.size());
        preds[si].resize(bags.size());
        parallel_for(bags.size(), [&](std::size_t bi) {
            const RuleEvidence ev =
                baseline_subset(rule, tr.state, ds.bank, *bags[bi], budget_frac, baseline_seed, rcfg);
            subsets[si][bi] = ev.subset;
            preds[si][bi] = predict_subset(tr.state.host, bags[bi]->features, ev.subset).predicted;
        });
    }

    StabilityResult res;
    res.seeds = static_cast<int>(seeds.size());
    double jac_sum = 0.0;
    std::size_t jac_count = 0;
    int flips = 0;
    for (std::size_t bi = 0; bi < bags.size(); ++bi) {
        bool flipped = false;
        for (std::size_t a = 0; a < seeds.size(); ++a) {
            for (std::size_t b = a + 1; b < seeds.size(); ++b) {
                jac_sum += jaccard(subsets[a][bi], subsets[b][bi]);
                ++jac_count;
                if (preds[a][bi] != preds[b][bi]) flipped = true;
            }
        }
        if (flipped) ++flips;
    }
    res.jaccard = jac_count > 0 ? jac_sum / static_cast<double>(jac_count) : 1.0;
    res.flip_rate = bags.empty() ? 0.0 : static_cast<double>(flips) / static_cast<double>(bags.size());
    return res;
}

}  // namespace evsel
