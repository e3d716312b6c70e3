#pragma once
// Experiment configuration and the drivers behind the CLI subcommands.
//
// Config files are JSON with an explicit schema_version; unknown keys are
// rejected so a typo cannot silently fall back to a default. Every driver
// echoes the resolved configuration into its output for provenance, and no
// output contains wall-clock data, so double runs are byte-identical.

#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "evsel/checkpoint.hpp"
#include "evsel/dataset_io.hpp"
#include "evsel/diagnostics.hpp"
#include "evsel/errors.hpp"
#include "evsel/oracles.hpp"
#include "evsel/recovery.hpp"
#include "evsel/synthbag.hpp"
#include "evsel/training.hpp"
#include "evsel/version.hpp"

namespace evsel {

using nlohmann::json;

namespace cfgdetail {

inline void reject_unknown_keys(const json& j, const std::vector<std::string>& allowed,
                                const std::string& where) {
    for (auto it = j.begin(); it != j.end(); ++it) {
        bool ok = false;
        for (const auto& k : allowed) {
            if (it.key() == k) {
                ok = true;
                break;
            }
        }
        if (!ok) throw ConfigError("unknown key '" + it.key() + "' in " + where);
    }
}

template <typename T>
void maybe(const json& j, const char* key, T& out) {
    if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace cfgdetail

struct DiagnoseOptions {
    double budget_fraction = 0.05;
    double drop_tol = 0.05;
    std::vector<std::uint32_t> minimal_subset_ks = {8, 16, 32};
    std::vector<std::uint64_t> stability_seeds;  // empty = skip (needs retraining)
    std::uint64_t baseline_seed = 9001;
    Split split = Split::test;
    int audit_bags = 24;  // recoverability audit sample size
};

struct ExperimentConfig {
    GenConfig generate;
    TrainConfig train;
    RecoveryConfig recovery;
    DiagnoseOptions diagnose;
    std::vector<double> sweep_rhos = {0.01, 0.02, 0.05, 0.10, 0.20, 1.00};
};

inline TrainConfig train_config_from_json(const json& j) {
    cfgdetail::reject_unknown_keys(
        j,
        {"epochs", "learning_rate", "weight_decay", "grad_clip", "cosine_lr", "lambda_budget",
         "lambda_ground", "rho", "injection_mode", "max_train_patches", "seed", "anneal",
         "t_start", "t_end", "use_selector", "hidden_dim", "selector_hidden", "adapter_rank",
         "gamma", "delta", "bridge_on_adapted", "constrained_bridge"},
        "train");
    TrainConfig c;
    cfgdetail::maybe(j, "epochs", c.epochs);
    cfgdetail::maybe(j, "learning_rate", c.learning_rate);
    cfgdetail::maybe(j, "weight_decay", c.weight_decay);
    cfgdetail::maybe(j, "grad_clip", c.grad_clip);
    cfgdetail::maybe(j, "cosine_lr", c.cosine_lr);
    cfgdetail::maybe(j, "lambda_budget", c.lambda_budget);
    cfgdetail::maybe(j, "lambda_ground", c.lambda_ground);
    cfgdetail::maybe(j, "rho", c.rho);
    if (j.contains("injection_mode"))
        c.mode = injection_mode_from_name(j.at("injection_mode").get<std::string>());
    cfgdetail::maybe(j, "max_train_patches", c.max_train_patches);
    cfgdetail::maybe(j, "seed", c.seed);
    cfgdetail::maybe(j, "anneal", c.anneal);
    cfgdetail::maybe(j, "t_start", c.t_start);
    cfgdetail::maybe(j, "t_end", c.t_end);
    cfgdetail::maybe(j, "use_selector", c.use_selector);
    cfgdetail::maybe(j, "hidden_dim", c.hidden_dim);
    cfgdetail::maybe(j, "selector_hidden", c.selector_hidden);
    cfgdetail::maybe(j, "adapter_rank", c.grounding.rank);
    cfgdetail::maybe(j, "gamma", c.grounding.gamma);
    cfgdetail::maybe(j, "delta", c.grounding.delta);
    cfgdetail::maybe(j, "bridge_on_adapted", c.grounding.bridge_on_adapted);
    cfgdetail::maybe(j, "constrained_bridge", c.grounding.constrained_bridge);
    return c;
}

inline json train_config_to_json(const TrainConfig& c) {
    return {{"epochs", c.epochs},
            {"learning_rate", c.learning_rate},
            {"weight_decay", c.weight_decay},
            {"grad_clip", c.grad_clip},
            {"cosine_lr", c.cosine_lr},
            {"lambda_budget", c.lambda_budget},
            {"lambda_ground", c.lambda_ground},
            {"rho", c.rho},
            {"injection_mode", injection_mode_name(c.mode)},
            {"max_train_patches", c.max_train_patches},
            {"seed", c.seed},
            {"anneal", c.anneal},
            {"t_start", c.t_start},
            {"t_end", c.t_end},
            {"use_selector", c.use_selector},
            {"hidden_dim", c.hidden_dim},
            {"selector_hidden", c.selector_hidden},
            {"adapter_rank", c.grounding.rank},
            {"gamma", c.grounding.gamma},
            {"delta", c.grounding.delta},
            {"bridge_on_adapted", c.grounding.bridge_on_adapted},
            {"constrained_bridge", c.grounding.constrained_bridge}};
}

inline GenConfig gen_config_from_user_json(const json& j) {
    cfgdetail::reject_unknown_keys(
        j,
        {"num_bags", "patches_min", "patches_max", "feature_dim", "num_classes", "num_concepts",
         "evidence_min", "evidence_max", "noise_sigma", "distractor_rate", "seed"},
        "generate");
    GenConfig c;
    cfgdetail::maybe(j, "num_bags", c.num_bags);
    cfgdetail::maybe(j, "patches_min", c.patches_min);
    cfgdetail::maybe(j, "patches_max", c.patches_max);
    cfgdetail::maybe(j, "feature_dim", c.feature_dim);
    cfgdetail::maybe(j, "num_classes", c.num_classes);
    cfgdetail::maybe(j, "num_concepts", c.num_concepts);
    cfgdetail::maybe(j, "evidence_min", c.evidence_min);
    cfgdetail::maybe(j, "evidence_max", c.evidence_max);
    cfgdetail::maybe(j, "noise_sigma", c.noise_sigma);
    cfgdetail::maybe(j, "distractor_rate", c.distractor_rate);
    cfgdetail::maybe(j, "seed", c.seed);
    return c;
}

inline RecoveryConfig recovery_config_from_json(const json& j) {
    cfgdetail::reject_unknown_keys(j, {"tau", "coverage_target", "max_add"}, "recovery");
    RecoveryConfig c;
    cfgdetail::maybe(j, "tau", c.tau);
    cfgdetail::maybe(j, "coverage_target", c.coverage_target);
    cfgdetail::maybe(j, "max_add", c.max_add);
    return c;
}

inline json recovery_config_to_json(const RecoveryConfig& c) {
    return {{"tau", c.tau}, {"coverage_target", c.coverage_target}, {"max_add", c.max_add}};
}

inline DiagnoseOptions diagnose_options_from_json(const json& j) {
    cfgdetail::reject_unknown_keys(j,
                                   {"budget_fraction", "drop_tol", "minimal_subset_ks",
                                    "stability_seeds", "baseline_seed", "split", "audit_bags"},
                                   "diagnose");
    DiagnoseOptions o;
    cfgdetail::maybe(j, "budget_fraction", o.budget_fraction);
    cfgdetail::maybe(j, "drop_tol", o.drop_tol);
    cfgdetail::maybe(j, "minimal_subset_ks", o.minimal_subset_ks);
    cfgdetail::maybe(j, "stability_seeds", o.stability_seeds);
    cfgdetail::maybe(j, "baseline_seed", o.baseline_seed);
    cfgdetail::maybe(j, "audit_bags", o.audit_bags);
    if (j.contains("split")) {
        const std::string s = j.at("split").get<std::string>();
        if (s == "train") {
            o.split = Split::train;
        } else if (s == "val") {
            o.split = Split::val;
        } else if (s == "test") {
            o.split = Split::test;
        } else {
            throw ConfigError("unknown split '" + s + "'");
        }
    }
    return o;
}

inline json diagnose_options_to_json(const DiagnoseOptions& o) {
    return {{"budget_fraction", o.budget_fraction},
            {"drop_tol", o.drop_tol},
            {"minimal_subset_ks", o.minimal_subset_ks},
            {"stability_seeds", o.stability_seeds},
            {"baseline_seed", o.baseline_seed},
            {"split", split_name(o.split)},
            {"audit_bags", o.audit_bags}};
}

inline ExperimentConfig experiment_config_from_json(const json& j) {
    cfgdetail::reject_unknown_keys(
        j, {"schema_version", "generate", "train", "recovery", "diagnose", "sweep_rhos"},
        "config root");
    if (!j.contains("schema_version") || j.at("schema_version").get<int>() != 1)
        throw ConfigError("config requires schema_version 1");
    ExperimentConfig c;
    if (j.contains("generate")) c.generate = gen_config_from_user_json(j.at("generate"));
    if (j.contains("train")) c.train = train_config_from_json(j.at("train"));
    if (j.contains("recovery")) c.recovery = recovery_config_from_json(j.at("recovery"));
    if (j.contains("diagnose")) c.diagnose = diagnose_options_from_json(j.at("diagnose"));
    if (j.contains("sweep_rhos")) c.sweep_rhos = j.at("sweep_rhos").get<std::vector<double>>();
    return c;
}

inline ExperimentConfig load_experiment_config(const std::filesystem::path& path) {
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot open config file " + path.string());
    json j;
    try {
        f >> j;
    } catch (const json::exception& e) {
        throw ConfigError(path.string() + ": " + e.what());
    }
    return experiment_config_from_json(j);
}

inline json experiment_config_to_json(const ExperimentConfig& c) {
    return {{"schema_version", 1},
            {"generate", gen_config_to_json(c.generate)},
            {"train", train_config_to_json(c.train)},
            {"recovery", recovery_config_to_json(c.recovery)},
            {"diagnose", diagnose_options_to_json(c.diagnose)},
            {"sweep_rhos", c.sweep_rhos}};
}

// Model evaluation drivers ----------------------------------------------------

struct RuleTableRow {
    std::string rule;
    SnrAggregate snr;
    LocalizationResult loc;
};

// Same-budget comparison across all rules, plus native (unmatched) GCE
// evidence with recovery statistics and gate margins.
struct ModelEvaluation {
    std::vector<RuleTableRow> same_budget;
    SnrAggregate native;               // recovered evidence at its natural size
    LocalizationResult native_loc;
    double median_gate_margin = 0.0;   // median over bags of min_i |pi_i - tau|
    double mean_achieved_coverage = 0.0;
    double saturation_rate = 0.0;
    int bags = 0;
};

inline std::vector<BaselineRule> all_rules() {
    return {BaselineRule::random_k,     BaselineRule::attention_topk,
            BaselineRule::gradient_topk, BaselineRule::occlusion_topk,
            BaselineRule::gce_discrete,  BaselineRule::gce_soft_threshold};
}

inline ModelEvaluation evaluate_model(const ModelState& s, const Dataset& ds, Split split,
                                      const RecoveryConfig& rcfg, const DiagnoseOptions& opts) {
    ModelEvaluation ev;
    const std::vector<const Bag*> bags = ds.split_bags(split);
    ev.bags = static_cast<int>(bags.size());
    if (bags.empty()) return ev;

    // Native model evidence (only when a selector exists).
    std::vector<RuleEvidence> native(bags.size());
    std::vector<double> margins(bags.size(), 0.0);
    std::vector<double> coverages(bags.size(), 0.0);
    std::vector<int> saturated(bags.size(), 0);
    if (s.use_selector) {
        parallel_for(bags.size(), [&](std::size_t i) {
            const ModelEvidence me = model_evidence(s, ds.bank, *bags[i], rcfg);
            native[i].gates = me.gv.pi;
            native[i].subset = me.recovered.sorted();
            double margin = 1.0;
            for (double p : me.gv.pi) margin = std::min(margin, std::abs(p - rcfg.tau));
            margins[i] = margin;
            coverages[i] = me.recovered.achieved_coverage;
            saturated[i] = me.recovered.saturated ? 1 : 0;
        });
        ev.native = snr_evaluate(s, ds.bank, bags, native);
        ev.native_loc = localization(bags, native);
        ev.median_gate_margin = diagdetail::median(margins);
        double cov = 0.0;
        int sat = 0;
        for (std::size_t i = 0; i < bags.size(); ++i) {
            cov += coverages[i];
            sat += saturated[i];
        }
        ev.mean_achieved_coverage = cov / static_cast<double>(bags.size());
        ev.saturation_rate = static_cast<double>(sat) / static_cast<double>(bags.size());
    }

    for (const BaselineRule rule : all_rules()) {
        if (!s.use_selector && (rule == BaselineRule::gce_discrete ||
                                rule == BaselineRule::gce_soft_threshold)) {
            continue;
        }
        std::vector<RuleEvidence> evidence(bags.size());
        parallel_for(bags.size(), [&](std::size_t i) {
            evidence[i] = baseline_subset(rule, s, ds.bank, *bags[i], opts.budget_fraction,
                                          opts.baseline_seed, rcfg);
        });
        RuleTableRow row;
        row.rule = baseline_rule_name(rule);
        row.snr = snr_evaluate(s, ds.bank, bags, evidence);
        row.loc = localization(bags, evidence);
        ev.same_budget.push_back(std::move(row));
    }
    return ev;
}

inline json snr_to_json(const SnrAggregate& a) {
    json j{{"bags", a.bags},
           {"macro_f1", a.full_macro_f1},
           {"accuracy", a.full_accuracy},
           {"evidence_sufficiency", a.evidence_macro_f1},
           {"keep_only_drop", a.keep_only_drop},
           {"cd_gap_mean", a.mean_cd_gap},
           {"cd_gap_median", a.median_cd_gap},
           {"evidence_fraction", a.mean_evidence_fraction},
           {"empty_complements", a.empty_complements}};
    if (a.necessity_available) {
        j["complement_degradation"] = a.complement_degradation;
        j["complement_macro_f1"] = a.complement_macro_f1;
        j["complement_base_f1"] = a.complement_base_f1;
    } else {
        j["complement_degradation"] = "unavailable";
    }
    return j;
}

inline json localization_to_json(const LocalizationResult& l) {
    if (!l.available) return "unavailable";
    return json{{"bags", l.bags}, {"dice", l.dice}, {"precision", l.precision},
                {"recall", l.recall}};
}

inline json evaluation_to_json(const ModelEvaluation& ev, bool with_native) {
    json rules = json::object();
    for (const auto& row : ev.same_budget) {
        json r = snr_to_json(row.snr);
        r["localization"] = localization_to_json(row.loc);
        rules[row.rule] = std::move(r);
    }
    json j{{"bags", ev.bags}, {"same_budget", std::move(rules)}};
    if (with_native) {
        json nat = snr_to_json(ev.native);
        nat["localization"] = localization_to_json(ev.native_loc);
        nat["median_gate_margin"] = ev.median_gate_margin;
        nat["mean_achieved_coverage"] = ev.mean_achieved_coverage;
        nat["saturation_rate"] = ev.saturation_rate;
        j["native_evidence"] = std::move(nat);
    }
    return j;
}

// Budget sweep ---------------------------------------------------------------

struct SweepRow {
    double rho = 0.0;
    bool operating_point = false;
    double macro_f1 = 0.0;
    double evidence_fraction = 0.0;
    double cd_gap = 0.0;
    std::optional<double> complement_degradation;
    double evidence_sufficiency = 0.0;
    double max_budget_component = 0.0;  // max budget loss seen during training
};

inline std::vector<SweepRow> budget_sweep(const Dataset& ds, const TrainConfig& base_cfg,
                                          std::span<const double> rhos,
                                          const RecoveryConfig& rcfg,
                                          const DiagnoseOptions& opts) {
    std::vector<SweepRow> rows;
    for (const double rho : rhos) {
        TrainConfig cfg = base_cfg;
        cfg.rho = rho;
        const TrainResult tr = train(ds, cfg);

        SweepRow row;
        row.rho = rho;
        row.operating_point = std::abs(rho - 0.05) < 1e-12;
        for (const EpochLog& log : tr.epochs)
            row.max_budget_component = std::max(row.max_budget_component, log.max_budget_component);

        const std::vector<const Bag*> bags = ds.split_bags(opts.split);
        std::vector<RuleEvidence> native(bags.size());
        parallel_for(bags.size(), [&](std::size_t i) {
            const ModelEvidence me = model_evidence(tr.state, ds.bank, *bags[i], rcfg);
            native[i].gates = me.gv.pi;
            native[i].subset = me.recovered.sorted();
        });
        const SnrAggregate agg = snr_evaluate(tr.state, ds.bank, bags, native);
        row.macro_f1 = agg.full_macro_f1;
        row.evidence_fraction = agg.mean_evidence_fraction;
        row.cd_gap = agg.mean_cd_gap;
        if (agg.necessity_available) row.complement_degradation = agg.complement_degradation;
        row.evidence_sufficiency = agg.evidence_macro_f1;
        rows.push_back(row);
    }
    return rows;
}

inline json sweep_to_json(std::span<const SweepRow> rows) {
    json arr = json::array();
    for (const auto& r : rows) {
        json j{{"rho", r.rho},
               {"operating_point", r.operating_point},
               {"macro_f1", r.macro_f1},
               {"evidence_fraction", r.evidence_fraction},
               {"cd_gap", r.cd_gap},
               {"evidence_sufficiency", r.evidence_sufficiency},
               {"max_budget_component", r.max_budget_component}};
        if (r.complement_degradation) {
            j["complement_degradation"] = *r.complement_degradation;
        } else {
            j["complement_degradation"] = "unavailable";
        }
        arr.push_back(std::move(j));
    }
    return arr;
}

// Component ablation ladder ----------------------------------------------------

struct AblationRow {
    std::string name;
    double macro_f1 = 0.0;
    std::optional<double> cd_gap;
    std::optional<double> complement_degradation;
    std::optional<double> evidence_sufficiency;
    std::optional<double> evidence_fraction;
};

inline std::vector<AblationRow> ablation_suite(const Dataset& ds, const TrainConfig& base_cfg,
                                               const RecoveryConfig& base_rcfg,
                                               const DiagnoseOptions& opts) {
    struct Rung {
        const char* name;
        bool use_selector;
        double lambda_b;
        double lambda_g;
        bool repair;
        bool constrained;
    };
    const Rung rungs[] = {
        {"backbone_only", false, 0.0, 0.0, false, false},
        {"naive_selector", true, 0.0, 0.0, false, false},
        {"plus_budget", true, base_cfg.lambda_budget, 0.0, false, false},
        {"plus_recovery", true, base_cfg.lambda_budget, 0.0, true, false},
        {"plus_grounding", true, base_cfg.lambda_budget, base_cfg.lambda_ground, true, false},
        {"full", true, base_cfg.lambda_budget, base_cfg.lambda_ground, true, true},
    };

    std::vector<AblationRow> rows;
    for (const Rung& rung : rungs) {
        TrainConfig cfg = base_cfg;
        cfg.use_selector = rung.use_selector;
        cfg.lambda_budget = rung.lambda_b;
        cfg.lambda_ground = rung.lambda_g;
        cfg.grounding.constrained_bridge = rung.constrained;
        const TrainResult tr = train(ds, cfg);

        RecoveryConfig rcfg = base_rcfg;
        if (!rung.repair) rcfg.max_add = 0;  // threshold + fallback only

        AblationRow row;
        row.name = rung.name;
        const std::vector<const Bag*> bags = ds.split_bags(opts.split);
        if (!rung.use_selector) {
            std::vector<int> y_true, y_pred;
            for (const Bag* bag : bags) {
                y_true.push_back(bag->label);
                y_pred.push_back(predict_bag(tr.state, ds.bank, *bag).predicted);
            }
            row.macro_f1 = macro_f1(y_true, y_pred, static_cast<int>(tr.state.classes()));
        } else {
            std::vector<RuleEvidence> native(bags.size());
            parallel_for(bags.size(), [&](std::size_t i) {
                const ModelEvidence me = model_evidence(tr.state, ds.bank, *bags[i], rcfg);
                native[i].gates = me.gv.pi;
                native[i].subset = me.recovered.sorted();
            });
            const SnrAggregate agg = snr_evaluate(tr.state, ds.bank, bags, native);
            row.macro_f1 = agg.full_macro_f1;
            row.cd_gap = agg.mean_cd_gap;
            if (agg.necessity_available) row.complement_degradation = agg.complement_degradation;
            row.evidence_sufficiency = agg.evidence_macro_f1;
            row.evidence_fraction = agg.mean_evidence_fraction;
        }
        rows.push_back(std::move(row));
    }
    return rows;
}

inline json ablation_to_json(std::span<const AblationRow> rows) {
    json arr = json::array();
    for (const auto& r : rows) {
        json j{{"variant", r.name}, {"macro_f1", r.macro_f1}};
        auto put = [&](const char* key, const std::optional<double>& v) {
            if (v) {
                j[key] = *v;
            } else {
                j[key] = "unavailable";
            }
        };
        put("cd_gap", r.cd_gap);
        put("complement_degradation", r.complement_degradation);
        put("evidence_sufficiency", r.evidence_sufficiency);
        put("evidence_fraction", r.evidence_fraction);
        arr.push_back(std::move(j));
    }
    return arr;
}

// Full diagnose report ----------------------------------------------------------

inline json run_diagnose(const ModelState& state, const Dataset& ds, const RecoveryConfig& rcfg,
                         const DiagnoseOptions& opts, const TrainConfig* stability_base = nullptr) {
    json report;
    report["tool_version"] = kVersion;
    report["recovery"] = recovery_config_to_json(rcfg);
    report["options"] = diagnose_options_to_json(opts);

    const ModelEvaluation ev = evaluate_model(state, ds, opts.split, rcfg, opts);
    report["evaluation"] = evaluation_to_json(ev, state.use_selector);

    const std::vector<const Bag*> bags = ds.split_bags(opts.split);

    // Minimal-sufficient-subset table.
    json minimal = json::array();
    for (const std::uint32_t k : opts.minimal_subset_ks) {
        for (const SubsetPolicy policy :
             {SubsetPolicy::sufficient_prefix, SubsetPolicy::attention_topk,
              SubsetPolicy::random_topk}) {
            const MinimalSubsetRow row = minimal_subset_aggregate(
                state, ds.bank, bags, k, policy, opts.drop_tol, opts.baseline_seed);
            json j{{"k", k},
                   {"policy", subset_policy_name(policy)},
                   {"subsets_per_bag", row.subsets_per_bag},
                   {"frac_ge2", row.frac_ge2},
                   {"frac_ge3", row.frac_ge3},
                   {"keep_only_drop", row.keep_only_drop}};
            for (std::size_t u = 0; u < 3; ++u) {
                const std::string key = "remove_union_" + std::to_string(u + 1);
                if (row.remove_union_count[u] > 0) {
                    j[key] = row.remove_union[u];
                } else {
                    j[key] = "unavailable";
                }
            }
            minimal.push_back(std::move(j));
        }
    }
    report["minimal_subsets"] = std::move(minimal);
    report["minimal_subset_note"] = "drops are probability drops of the reference class";

    // Bound audits.
    {
        const InterventionalAuditReport rep =
            interventional_bound_audit(10, opts.baseline_seed);
        report["interventional_bound_audit"] = {{"instances", rep.instances},
                                                {"subsets_checked", rep.subsets_checked},
                                                {"violations", rep.violations},
                                                {"max_lhs_over_rhs", rep.max_lhs_over_rhs},
                                                {"min_empty_lhs", rep.min_empty_lhs},
                                                {"mean_eta", rep.mean_eta}};
    }
    if (state.use_selector) {
        int holds = 0, total = 0;
        double worst_slack = std::numeric_limits<double>::infinity();
        std::vector<double> margins;
        const int count = std::min<int>(opts.audit_bags, static_cast<int>(bags.size()));
        for (int i = 0; i < count; ++i) {
            const RecoverabilityAuditResult res = recoverability_bound_audit(
                state, ds.bank, *bags[static_cast<std::size_t>(i)], rcfg, opts.baseline_seed);
            ++total;
            holds += res.holds ? 1 : 0;
            worst_slack = std::min(worst_slack, res.rhs - res.lhs);
            margins.push_back(res.min_margin);
        }
        report["recoverability_bound_audit"] = {{"bags", total},
                                                {"holds", holds},
                                                {"violations", total - holds},
                                                {"min_slack", worst_slack},
                                                {"median_min_margin", diagdetail::median(margins)}};
    }

    // Stability (optional; retrains per seed).
    if (!opts.stability_seeds.empty() && stability_base != nullptr) {
        json stab = json::object();
        for (const BaselineRule rule :
             {BaselineRule::attention_topk, BaselineRule::gce_discrete,
              BaselineRule::gce_soft_threshold}) {
            const StabilityResult sr = stability(ds, *stability_base, rule, opts.stability_seeds,
                                                 opts.budget_fraction, rcfg, opts.baseline_seed);
            stab[baseline_rule_name(rule)] = {{"jaccard", sr.jaccard},
                                              {"prediction_flip", sr.flip_rate},
                                              {"seeds", sr.seeds}};
        }
        report["stability"] = std::move(stab);
    } else {
        report["stability"] = "unavailable";
    }

    return report;
}

// CSV emission -------------------------------------------------------------------

inline void write_csv(const std::filesystem::path& path, const std::string& header,
                      const std::vector<std::string>& rows) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw ParseError("cannot write " + path.string());
    f << header << "\n";
    for (const auto& r : rows) f << r << "\n";
}

inline std::string csv_num(const json& v) {
    if (v.is_number()) return v.dump();
    return "";  // "unavailable" and friends become empty cells
}

inline void emit_report_csvs(const json& report, const std::filesystem::path& report_path) {
    const std::string stem = report_path.string();
    if (report.contains("evaluation") && report["evaluation"].contains("same_budget")) {
        std::vector<std::string> rows;
        for (auto it = report["evaluation"]["same_budget"].begin();
             it != report["evaluation"]["same_budget"].end(); ++it) {
            const json& r = it.value();
            std::string line = it.key();
            for (const char* key : {"macro_f1", "evidence_sufficiency", "keep_only_drop",
                                    "complement_degradation", "cd_gap_mean",
                                    "evidence_fraction"}) {
                line += "," + csv_num(r.at(key));
            }
            rows.push_back(std::move(line));
        }
        write_csv(stem + ".same_budget.csv",
                  "rule,macro_f1,evidence_sufficiency,keep_only_drop,complement_degradation,"
                  "cd_gap_mean,evidence_fraction",
                  rows);
    }
    if (report.contains("minimal_subsets")) {
        std::vector<std::string> rows;
        for (const json& r : report["minimal_subsets"]) {
            std::string line = r.at("policy").get<std::string>() + "," +
                               std::to_string(r.at("k").get<int>());
            for (const char* key : {"subsets_per_bag", "frac_ge2", "frac_ge3", "keep_only_drop",
                                    "remove_union_1", "remove_union_2", "remove_union_3"}) {
                line += "," + csv_num(r.at(key));
            }
            rows.push_back(std::move(line));
        }
        write_csv(stem + ".minimal_subsets.csv",
                  "policy,k,subsets_per_bag,frac_ge2,frac_ge3,keep_only_drop,remove_union_1,"
                  "remove_union_2,remove_union_3",
                  rows);
    }
}

inline void emit_sweep_csv(std::span<const SweepRow> rows, const std::filesystem::path& path) {
    std::vector<std::string> lines;
    for (const auto& r : rows) {
        std::string line = std::to_string(r.rho);
        const json j = sweep_to_json(std::span(&r, 1))[0];
        for (const char* key : {"macro_f1", "evidence_fraction", "cd_gap",
                                "complement_degradation", "evidence_sufficiency"}) {
            line += "," + csv_num(j.at(key));
        }
        line += r.operating_point ? ",operating_point" : ",";
        lines.push_back(std::move(line));
    }
    write_csv(path,
              "rho,macro_f1,evidence_fraction,cd_gap,complement_degradation,"
              "evidence_sufficiency,note",
              lines);
}

}  // namespace evsel
