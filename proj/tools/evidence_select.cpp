// evidence-select: generate / train / diagnose / sweep / ablate / oracle.
//
// Every subcommand is deterministic given its seed (EVSEL_THREADS=1 is the
// default); outputs carry the resolved configuration and no wall-clock data,
// so double runs are byte-identical.

#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "evsel/checkpoint.hpp"
#include "evsel/dataset_io.hpp"
#include "evsel/experiment.hpp"
#include "evsel/oracles.hpp"
#include "evsel/version.hpp"

namespace {

using evsel::json;

struct CommonOverrides {
    std::optional<std::uint64_t> seed;
    std::optional<int> epochs;
    std::optional<double> rho;
    std::optional<std::string> mode;
    std::optional<bool> anneal;

    void apply(evsel::TrainConfig& cfg) const {
        if (seed) cfg.seed = *seed;
        if (epochs) cfg.epochs = *epochs;
        if (rho) cfg.rho = *rho;
        if (mode) cfg.mode = evsel::injection_mode_from_name(*mode);
        if (anneal) cfg.anneal = *anneal;
    }
};

evsel::ExperimentConfig load_config_or_default(const std::string& path) {
    if (path.empty()) return evsel::ExperimentConfig{};
    return evsel::load_experiment_config(path);
}

void write_json(const std::filesystem::path& path, const json& j) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw evsel::ParseError("cannot write " + path.string());
    f << j.dump(2) << "\n";
}

int cmd_generate(const std::string& config_path, const std::string& out_dir,
                 const CommonOverrides& ov) {
    evsel::ExperimentConfig cfg = load_config_or_default(config_path);
    if (ov.seed) cfg.generate.seed = *ov.seed;
    const evsel::Dataset ds = evsel::generate_dataset(cfg.generate);
    evsel::write_dataset(ds, out_dir);
    std::cout << "wrote " << ds.bags.size() << " bags to " << out_dir << "\n";
    return 0;
}

int cmd_train(const std::string& config_path, const std::string& data_dir,
              const std::string& out_path, std::string log_path, const CommonOverrides& ov) {
    evsel::ExperimentConfig cfg = load_config_or_default(config_path);
    ov.apply(cfg.train);
    if (log_path.empty()) log_path = out_path + ".log.jsonl";

    const evsel::Dataset ds = evsel::read_dataset(data_dir);
    const evsel::TrainResult result = evsel::train(ds, cfg.train);
    evsel::save_checkpoint(result.state, out_path);

    std::ofstream log(log_path, std::ios::binary);
    if (!log) throw evsel::ParseError("cannot write " + log_path);
    log << json{{"config", evsel::train_config_to_json(cfg.train)}}.dump() << "\n";
    for (const evsel::EpochLog& e : result.epochs) {
        log << json{{"epoch", e.epoch},
                    {"temperature", e.temperature},
                    {"lr", e.lr},
                    {"train_loss", e.train_loss},
                    {"task", e.task},
                    {"budget", e.budget},
                    {"ground", e.ground},
                    {"val_accuracy", e.val_accuracy},
                    {"val_macro_f1", e.val_macro_f1},
                    {"val_mean_gate", e.val_mean_gate}}
                   .dump()
            << "\n";
    }
    if (!result.epochs.empty()) {
        std::cout << "trained " << result.epochs.size() << " epochs, final val_macro_f1="
                  << result.epochs.back().val_macro_f1 << "\n";
    } else {
        std::cout << "trained 0 epochs (initialized state saved)\n";
    }
    return 0;
}

int cmd_diagnose(const std::string& ckpt_path, const std::string& data_dir,
                 const std::string& report_path, const std::string& config_path, bool emit_csv,
                 const std::string& split, const std::vector<std::uint64_t>& stability_seeds) {
    evsel::ExperimentConfig cfg = load_config_or_default(config_path);
    if (!split.empty()) {
        json j{{"split", split}};
        cfg.diagnose.split = evsel::diagnose_options_from_json(j).split;
    }
    if (!stability_seeds.empty()) cfg.diagnose.stability_seeds = stability_seeds;

    const evsel::Dataset ds = evsel::read_dataset(data_dir);
    const evsel::ModelState state = evsel::load_checkpoint(ckpt_path);

    json report = evsel::run_diagnose(state, ds, cfg.recovery, cfg.diagnose,
                                      cfg.diagnose.stability_seeds.empty() ? nullptr
                                                                           : &cfg.train);
    report["config_echo"] = evsel::experiment_config_to_json(cfg);
    write_json(report_path, report);
    if (emit_csv) evsel::emit_report_csvs(report, report_path);
    std::cout << "wrote report " << report_path << "\n";
    return 0;
}

int cmd_sweep(const std::string& config_path, const std::string& data_dir,
              const std::string& out_path, bool emit_csv, const CommonOverrides& ov) {
    evsel::ExperimentConfig cfg = load_config_or_default(config_path);
    ov.apply(cfg.train);
    const evsel::Dataset ds = evsel::read_dataset(data_dir);
    const std::vector<evsel::SweepRow> rows =
        evsel::budget_sweep(ds, cfg.train, cfg.sweep_rhos, cfg.recovery, cfg.diagnose);
    json out{{"config_echo", evsel::experiment_config_to_json(cfg)},
             {"rows", evsel::sweep_to_json(rows)}};
    write_json(out_path, out);
    if (emit_csv) evsel::emit_sweep_csv(rows, out_path + ".csv");
    std::cout << "wrote sweep " << out_path << "\n";
    return 0;
}

int cmd_ablate(const std::string& config_path, const std::string& data_dir,
               const std::string& out_path, bool emit_csv, const CommonOverrides& ov) {
    evsel::ExperimentConfig cfg = load_config_or_default(config_path);
    ov.apply(cfg.train);
    const evsel::Dataset ds = evsel::read_dataset(data_dir);
    const std::vector<evsel::AblationRow> rows =
        evsel::ablation_suite(ds, cfg.train, cfg.recovery, cfg.diagnose);
    json out{{"config_echo", evsel::experiment_config_to_json(cfg)},
             {"rows", evsel::ablation_to_json(rows)}};
    write_json(out_path, out);
    if (emit_csv) {
        std::vector<std::string> lines;
        for (const json& r : out["rows"]) {
            std::string line = r.at("variant").get<std::string>();
            for (const char* key : {"macro_f1", "cd_gap", "complement_degradation",
                                    "evidence_sufficiency", "evidence_fraction"}) {
                line += "," + evsel::csv_num(r.at(key));
            }
            lines.push_back(std::move(line));
        }
        evsel::write_csv(out_path + ".csv",
                         "variant,macro_f1,cd_gap,complement_degradation,evidence_sufficiency,"
                         "evidence_fraction",
                         lines);
    }
    std::cout << "wrote ablation " << out_path << "\n";
    return 0;
}

int cmd_oracle(bool quick, std::uint64_t seed, const std::string& report_path) {
    const evsel::OracleSuiteResult res = evsel::run_oracle_suite(quick, seed);
    json checks = json::array();
    int passed = 0;
    for (const evsel::OracleCheck& c : res.checks) {
        std::printf("%-24s %s  cases=%llu violations=%llu\n", c.name.c_str(),
                    c.passed() ? "PASS" : "FAIL", static_cast<unsigned long long>(c.cases),
                    static_cast<unsigned long long>(c.violations));
        passed += c.passed() ? 1 : 0;
        checks.push_back({{"name", c.name},
                          {"cases", c.cases},
                          {"violations", c.violations},
                          {"worst", c.worst},
                          {"passed", c.passed()}});
    }
    std::printf("oracle: %d/%zu checks passed\n", passed, res.checks.size());
    if (!report_path.empty()) {
        write_json(report_path, json{{"quick", quick}, {"seed", seed}, {"checks", checks}});
    }
    return res.all_passed() ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"grounded continuous evidence selection for multiple-instance bags"};
    app.require_subcommand(1);

    CommonOverrides ov;
    std::string config_path, data_dir, out_path, log_path, ckpt_path, report_path, split;
    std::vector<std::uint64_t> stability_seeds;
    bool emit_csv = false;
    bool quick = false;
    std::uint64_t oracle_seed = 42;

    auto add_overrides = [&](CLI::App* sub, bool with_train_knobs) {
        sub->add_option("--seed", [&](const CLI::results_t& r) {
            ov.seed = std::stoull(r[0]);
            return true;
        }, "override the config seed");
        if (with_train_knobs) {
            sub->add_option("--epochs", [&](const CLI::results_t& r) {
                ov.epochs = std::stoi(r[0]);
                return true;
            }, "override training epochs");
            sub->add_option("--rho", [&](const CLI::results_t& r) {
                ov.rho = std::stod(r[0]);
                return true;
            }, "override the evidence budget");
            sub->add_option("--mode", [&](const CLI::results_t& r) {
                ov.mode = r[0];
                return true;
            }, "override the injection mode");
            sub->add_flag("--no-anneal", [&](std::int64_t) { ov.anneal = false; },
                          "pin the selector temperature at t_start");
        }
    };

    CLI::App* gen = app.add_subcommand("generate", "generate a synthetic dataset");
    gen->add_option("--config", config_path, "experiment config (JSON)");
    gen->add_option("--out", out_path, "output dataset directory")->required();
    add_overrides(gen, false);

    CLI::App* tr = app.add_subcommand("train", "train a model on a dataset");
    tr->add_option("--config", config_path, "experiment config (JSON)");
    tr->add_option("--data", data_dir, "dataset directory")->required();
    tr->add_option("--out", out_path, "checkpoint output path")->required();
    tr->add_option("--log", log_path, "metric log path (default: <out>.log.jsonl)");
    add_overrides(tr, true);

    CLI::App* di = app.add_subcommand("diagnose", "evaluate evidence diagnostics");
    di->add_option("--ckpt", ckpt_path, "checkpoint path")->required();
    di->add_option("--data", data_dir, "dataset directory")->required();
    di->add_option("--report", report_path, "report output path")->required();
    di->add_option("--config", config_path, "experiment config (JSON)");
    di->add_option("--split", split, "split to evaluate (train|val|test)");
    di->add_option("--stability-seeds", stability_seeds,
                   "seeds for the retraining stability probe");
    di->add_flag("--emit-csv", emit_csv, "emit CSV files next to the report");

    CLI::App* sw = app.add_subcommand("sweep", "retrain across the evidence-budget grid");
    sw->add_option("--config", config_path, "experiment config (JSON)");
    sw->add_option("--data", data_dir, "dataset directory")->required();
    sw->add_option("--out", out_path, "sweep output path")->required();
    sw->add_flag("--emit-csv", emit_csv, "emit a CSV next to the output");
    add_overrides(sw, true);

    CLI::App* ab = app.add_subcommand("ablate", "train the component ablation ladder");
    ab->add_option("--config", config_path, "experiment config (JSON)");
    ab->add_option("--data", data_dir, "dataset directory")->required();
    ab->add_option("--out", out_path, "ablation output path")->required();
    ab->add_flag("--emit-csv", emit_csv, "emit a CSV next to the output");
    add_overrides(ab, true);

    CLI::App* orc = app.add_subcommand("oracle", "run the brute-force certification suites");
    orc->add_flag("--quick", quick, "reduced instance counts (< 60 s)");
    orc->add_option("--seed", oracle_seed, "oracle suite seed");
    orc->add_option("--report", report_path, "optional JSON report path");

    CLI::App* ver = app.add_subcommand("version", "print the version");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << "error: usage: " << e.what() << "\n";
        std::cerr << app.help() << "\n";
        return 2;
    }

    try {
        if (ver->parsed()) {
            std::cout << "evidence-select " << evsel::kVersion << "\n";
            return 0;
        }
        if (gen->parsed()) return cmd_generate(config_path, out_path, ov);
        if (tr->parsed()) return cmd_train(config_path, data_dir, out_path, log_path, ov);
        if (di->parsed())
            return cmd_diagnose(ckpt_path, data_dir, report_path, config_path, emit_csv, split,
                                stability_seeds);
        if (sw->parsed()) return cmd_sweep(config_path, data_dir, out_path, emit_csv, ov);
        if (ab->parsed()) return cmd_ablate(config_path, data_dir, out_path, emit_csv, ov);
        if (orc->parsed()) return cmd_oracle(quick, oracle_seed, report_path);
    } catch (const evsel::ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
