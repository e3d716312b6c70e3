#pragma once
// Brute-force certification suites.
//
// Each check pits an implementation path against an independent route:
// exhaustive enumeration for greedy and recovery, central finite differences
// for closed-form gradients, constructed instances for the bound audits.
// The relative-error convention is |a - b| / max(1, |a|, |b|).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "evsel/coverage.hpp"
#include "evsel/diagnostics.hpp"
#include "evsel/prng.hpp"
#include "evsel/recovery.hpp"
#include "evsel/synthbag.hpp"
#include "evsel/training.hpp"

namespace evsel {

struct OracleCheck {
    std::string name;
    std::uint64_t cases = 0;
    std::uint64_t violations = 0;
    double worst = 0.0;  // check-specific: max error or min slack

    bool passed() const { return violations == 0; }
};

inline double rel_err(double a, double b) {
    return std::abs(a - b) / std::max({1.0, std::abs(a), std::abs(b)});
}

namespace oracledetail {

inline MatD random_responses(Rng& rng, std::uint32_t n, std::uint32_t m) {
    MatD r(n, m);
    for (auto& v : r.data) v = rng.uniform(0.01, 0.99);
    return r;
}

inline std::vector<double> random_alpha(Rng& rng, std::uint32_t m) {
    std::vector<double> a(m);
    for (auto& v : a) v = rng.uniform(0.0, 2.0);
    return a;
}

// Best utility over all subsets of size exactly k, by full enumeration.
inline double exhaustive_best(const MatD& r, std::span<const double> alpha, std::uint32_t k) {
    const std::uint32_t n = static_cast<std::uint32_t>(r.rows);
    std::vector<std::uint32_t> comb(k);
    for (std::uint32_t i = 0; i < k; ++i) comb[i] = i;
    double best = 0.0;
    for (;;) {
        best = std::max(best, subset_utility(comb, r, alpha));
        // next combination
        std::int64_t pos = static_cast<std::int64_t>(k) - 1;
        while (pos >= 0 && comb[static_cast<std::size_t>(pos)] ==
                               n - k + static_cast<std::uint32_t>(pos)) {
            --pos;
        }
        if (pos < 0) break;
        ++comb[static_cast<std::size_t>(pos)];
        for (std::uint32_t j = static_cast<std::uint32_t>(pos) + 1; j < k; ++j)
            comb[j] = comb[j - 1] + 1;
    }
    return best;
}

}  // namespace oracledetail

// Monotonicity and diminishing returns of the noisy-OR utility over random
// nested pairs S subset T and items i outside T.
inline OracleCheck submodularity_check(std::uint64_t triples, std::uint64_t seed) {
    OracleCheck check{"submodularity"};
    Rng rng = make_stream(seed, stream_tag::oracle, 1);
    for (std::uint64_t t = 0; t < triples; ++t) {
        const auto n = static_cast<std::uint32_t>(rng.range(3, 14));
        const auto m = static_cast<std::uint32_t>(rng.range(1, 6));
        const MatD r = oracledetail::random_responses(rng, n, m);
        const std::vector<double> alpha = oracledetail::random_alpha(rng, m);

        // Random S subset T subset V, i outside T.
        std::vector<std::uint32_t> s_set, t_set;
        std::uint32_t item = 0;
        bool have_item = false;
        for (std::uint32_t i = 0; i < n; ++i) {
            const double u = rng.uniform();
            if (!have_item && u < 0.2) {
                item = i;
                have_item = true;
            } else if (u < 0.5) {
                s_set.push_back(i);
                t_set.push_back(i);
            } else if (u < 0.8) {
                t_set.push_back(i);
            }
        }
        if (!have_item) {
            ++check.cases;
            continue;
        }

        const double u_s = subset_utility(s_set, r, alpha);
        const double u_t = subset_utility(t_set, r, alpha);
        std::vector<std::uint32_t> s_plus = s_set, t_plus = t_set;
        s_plus.push_back(item);
        t_plus.push_back(item);
        const double gain_s = subset_utility(s_plus, r, alpha) - u_s;
        const double gain_t = subset_utility(t_plus, r, alpha) - u_t;

        ++check.cases;
        if (gain_s < gain_t - 1e-12) ++check.violations;  // diminishing returns
        if (u_s > u_t + 1e-12) ++check.violations;        // monotone in S
        check.worst = std::max(check.worst, gain_t - gain_s);
    }
    return check;
}

// Closed-form marginal against central finite differences of the utility.
inline OracleCheck marginal_fd_check(std::uint64_t instances, std::uint64_t seed,
                                     double tol = 1e-6) {
    OracleCheck check{"marginal_vs_fd"};
    Rng rng = make_stream(seed, stream_tag::oracle, 2);
    const double h = 1e-6;
    for (std::uint64_t t = 0; t < instances; ++t) {
        const auto n = static_cast<std::uint32_t>(rng.range(2, 50));
        const auto m = static_cast<std::uint32_t>(rng.range(1, 8));
        const MatD r = oracledetail::random_responses(rng, n, m);
        const std::vector<double> alpha = oracledetail::random_alpha(rng, m);
        std::vector<double> pi(n);
        for (auto& v : pi) v = rng.uniform(0.02, 0.98);

        const std::vector<double> grad = marginal(pi, r, alpha);
        for (std::uint32_t i = 0; i < n; ++i) {
            std::vector<double> lo = pi, hi = pi;
            lo[i] -= h;
            hi[i] += h;
            const double fd =
                (class_utility(hi, r, alpha) - class_utility(lo, r, alpha)) / (2.0 * h);
            const double err = rel_err(grad[i], fd);
            ++check.cases;
            check.worst = std::max(check.worst, err);
            if (err > tol) ++check.violations;
        }
    }
    return check;
}

// subset_utility(S) must equal class_utility at the indicator of S.
inline OracleCheck indicator_consistency_check(std::uint64_t instances, std::uint64_t seed) {
    OracleCheck check{"subset_vs_indicator"};
    Rng rng = make_stream(seed, stream_tag::oracle, 3);
    for (std::uint64_t t = 0; t < instances; ++t) {
        const auto n = static_cast<std::uint32_t>(rng.range(1, 24));
        const auto m = static_cast<std::uint32_t>(rng.range(1, 8));
        const MatD r = oracledetail::random_responses(rng, n, m);
        const std::vector<double> alpha = oracledetail::random_alpha(rng, m);
        std::vector<std::uint32_t> subset;
        std::vector<double> indicator(n, 0.0);
        for (std::uint32_t i = 0; i < n; ++i) {
            if (rng.uniform() < 0.4) {
                subset.push_back(i);
                indicator[i] = 1.0;
            }
        }
        const double a = subset_utility(subset, r, alpha);
        const double b = class_utility(indicator, r, alpha);
        ++check.cases;
        const double err = rel_err(a, b);
        check.worst = std::max(check.worst, err);
        if (err > 1e-12) ++check.violations;
    }
    return check;
}

// Greedy against exhaustive optimum: the (1 - 1/e) guarantee and the
// curvature-sharpened (1 - e^-kappa)/kappa guarantee. worst = min slack.
inline OracleCheck greedy_certification_check(std::uint64_t instances, std::uint64_t seed,
                                              std::uint32_t max_n = 12, std::uint32_t max_k = 4) {
    OracleCheck check{"greedy_certification"};
    check.worst = std::numeric_limits<double>::infinity();
    Rng rng = make_stream(seed, stream_tag::oracle, 4);
    const double base_factor = 1.0 - std::exp(-1.0);
    for (std::uint64_t t = 0; t < instances; ++t) {
        const auto n = static_cast<std::uint32_t>(
            rng.range(2, static_cast<std::int64_t>(max_n)));
        const auto k = static_cast<std::uint32_t>(
            rng.range(1, static_cast<std::int64_t>(std::min(n, max_k))));
        const auto m = static_cast<std::uint32_t>(rng.range(1, 6));
        const MatD r = oracledetail::random_responses(rng, n, m);
        const std::vector<double> alpha = oracledetail::random_alpha(rng, m);

        const std::vector<std::uint32_t> picks = greedy_max(r, alpha, k);
        const double u_greedy = subset_utility(picks, r, alpha);
        const double u_opt = oracledetail::exhaustive_best(r, alpha, k);

        ++check.cases;
        if (u_greedy < base_factor * u_opt - 1e-9) ++check.violations;
        check.worst = std::min(check.worst, u_greedy - base_factor * u_opt);

        const auto kappa = curvature(r, alpha);
        if (kappa) {
            const double factor = curvature_guarantee(*kappa);
            ++check.cases;
            if (u_greedy < factor * u_opt - 1e-9) ++check.violations;
            check.worst = std::min(check.worst, u_greedy - factor * u_opt);
        }
    }
    return check;
}

// Recovery contract: coverage target or saturation flag, repair maximality
// against independently recomputed marginals, determinism across reruns.
inline OracleCheck recovery_contract_check(std::uint64_t instances, std::uint64_t seed) {
    OracleCheck check{"recovery_contract"};
    Rng rng = make_stream(seed, stream_tag::oracle, 5);
    RecoveryConfig rcfg;
    for (std::uint64_t t = 0; t < instances; ++t) {
        const auto n = static_cast<std::uint32_t>(rng.range(1, 30));
        const auto m = static_cast<std::uint32_t>(rng.range(1, 8));
        const MatD r = oracledetail::random_responses(rng, n, m);
        const std::vector<double> alpha = oracledetail::random_alpha(rng, m);
        std::vector<double> pi(n);
        for (auto& v : pi) v = rng.uniform();

        const EvidenceSubset out = recover(pi, r, alpha, rcfg);
        ++check.cases;

        bool bad = false;
        if (out.indices.empty()) bad = true;
        if (!out.saturated && out.achieved_coverage < rcfg.coverage_target - 1e-12) bad = true;
        if (out.saturated && out.indices.size() < n) bad = true;  // cap is N here

        // Replay: every repaired pick must maximize the exact marginal at the
        // set selected so far, recomputed through the closed-form gradient.
        std::vector<double> indicator(n, 0.0);
        std::vector<char> member(n, 0);
        for (std::size_t step = 0; step < out.indices.size(); ++step) {
            const std::uint32_t pick = out.indices[step];
            if (out.provenance[step] == Provenance::repaired) {
                const std::vector<double> gains = marginal(indicator, r, alpha);
                double best_gain = -1.0;
                std::uint32_t best = n;
                for (std::uint32_t i = 0; i < n; ++i) {
                    if (member[i]) continue;
                    if (gains[i] > best_gain) {
                        best_gain = gains[i];
                        best = i;
                    }
                }
                if (best != pick && std::abs(gains[pick] - best_gain) > 1e-12) bad = true;
            }
            indicator[pick] = 1.0;
            member[pick] = 1;
        }

        const EvidenceSubset again = recover(pi, r, alpha, rcfg);
        if (again.indices != out.indices || again.saturated != out.saturated) bad = true;

        if (bad) ++check.violations;
        check.worst = std::max(check.worst, rcfg.coverage_target - out.achieved_coverage);
    }
    return check;
}

// Composite-loss gradient for every parameter group against central finite
// differences on 3-patch bags.
inline OracleCheck composite_fd_check(std::uint64_t draws, std::uint64_t seed,
                                      double tol = 1e-4) {
    OracleCheck check{"composite_grad_vs_fd"};
    const double h = 1e-5;

    for (std::uint64_t t = 0; t < draws; ++t) {
        Rng rng = make_stream(seed, stream_tag::oracle, 6, t);

        GenConfig gcfg;
        gcfg.num_bags = 0;
        gcfg.feature_dim = 6;
        gcfg.num_classes = 3;
        gcfg.num_concepts = 3;
        gcfg.seed = seed + t;
        Dataset ds = generate_dataset(gcfg);

        TrainConfig tcfg;
        tcfg.hidden_dim = 4;
        tcfg.selector_hidden = 4;
        tcfg.grounding.rank = 2;
        tcfg.rho = 0.03;
        tcfg.seed = seed + t;
        tcfg.mode = static_cast<InjectionMode>(t % 3);
        ModelState state = init_model(ds, tcfg);
        // Perturb parameters away from the structured init.
        ModelGrads scratch;
        scratch.init_like(state);
        for_each_tensor(state, scratch, [&](std::span<double> p, std::span<double>, ParamGroup) {
            for (double& v : p) v += 0.3 * rng.normal();
        });

        Bag bag;
        bag.id = "fd";
        bag.label = static_cast<int>(rng.below(gcfg.num_classes));
        bag.features = MatF(3, gcfg.feature_dim);
        for (auto& v : bag.features.data) v = static_cast<float>(rng.normal());
        bag.coords = MatF(3, 2);
        for (auto& v : bag.coords.data) v = static_cast<float>(rng.uniform());

        const double T = 0.7;
        ModelGrads grads;
        grads.init_like(state);
        composite_loss_and_grad(state, bag, ds.bank, tcfg, T, &grads);

        for_each_tensor(state, grads, [&](std::span<double> p, std::span<double> g, ParamGroup) {
            for (std::size_t i = 0; i < p.size(); ++i) {
                const double keep = p[i];
                p[i] = keep + h;
                const double up = composite_loss(state, bag, ds.bank, tcfg, T).total;
                p[i] = keep - h;
                const double down = composite_loss(state, bag, ds.bank, tcfg, T).total;
                p[i] = keep;
                const double fd = (up - down) / (2.0 * h);
                const double err = rel_err(g[i], fd);
                ++check.cases;
                check.worst = std::max(check.worst, err);
                if (err > tol) ++check.violations;
            }
        });
    }
    return check;
}

// Identity gates must reproduce the ungated forward bitwise in all modes.
inline OracleCheck identity_gate_check(std::uint64_t bags, std::uint64_t seed) {
    OracleCheck check{"identity_gate_bitwise"};
    Rng rng = make_stream(seed, stream_tag::oracle, 10);
    for (std::uint64_t t = 0; t < bags; ++t) {
        const auto n = static_cast<std::uint32_t>(rng.range(1, 40));
        const std::uint32_t d = 12;
        Rng init_rng(rng.next_u64());
        const PredictorParams params = PredictorParams::init(d, 4, 8, init_rng);
        MatF H(n, d);
        for (auto& v : H.data) v = static_cast<float>(rng.normal());

        const ForwardResult base = forward(params, H, {}, InjectionMode::attention_bias);
        const std::vector<double> ones(n, 1.0);
        for (const InjectionMode mode :
             {InjectionMode::attention_bias, InjectionMode::feature_reweight,
              InjectionMode::hybrid}) {
            const ForwardResult gated = forward(params, H, ones, mode);
            ++check.cases;
            bool same = true;
            auto eq = [](const std::vector<double>& a, const std::vector<double>& b) {
                if (a.size() != b.size()) return false;
                return std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0;
            };
            same = same && eq(base.logits, gated.logits) && eq(base.probs, gated.probs) &&
                   eq(base.attention, gated.attention) && eq(base.bag_repr, gated.bag_repr);
            if (!same) ++check.violations;
        }
    }
    return check;
}

struct OracleSuiteResult {
    std::vector<OracleCheck> checks;

    bool all_passed() const {
        for (const auto& c : checks) {
            if (!c.passed()) return false;
        }
        return true;
    }
};

inline OracleSuiteResult run_oracle_suite(bool quick, std::uint64_t seed) {
    OracleSuiteResult res;
    const std::uint64_t scale = quick ? 1 : 5;
    res.checks.push_back(submodularity_check(quick ? 2000 : 10000, seed));
    res.checks.push_back(marginal_fd_check(quick ? 30 : 100, seed));
    res.checks.push_back(indicator_consistency_check(200 * scale, seed));
    res.checks.push_back(greedy_certification_check(quick ? 60 : 220, seed,
                                                    quick ? 10 : 12, 4));
    res.checks.push_back(recovery_contract_check(quick ? 120 : 500, seed));
    res.checks.push_back(composite_fd_check(quick ? 4 : 20, seed));
    res.checks.push_back(identity_gate_check(quick ? 30 : 100, seed));
    {
        const InterventionalAuditReport rep = interventional_bound_audit(quick ? 4 : 10, seed);
        OracleCheck c{"interventional_bound"};
        c.cases = rep.subsets_checked;
        c.violations = static_cast<std::uint64_t>(rep.violations);
        c.worst = rep.max_lhs_over_rhs;
        res.checks.push_back(c);
    }
    return res;
}

}  // namespace evsel
