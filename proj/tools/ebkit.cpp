// SPDX-License-Identifier: Apache-2.0
//
// Experiment front door: run one pipeline, sweep a grid, recompute a heatmap
// from stored masks, or pretty-print a finished run.

#include <atomic>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>

#include "ebkit/config.hpp"
#include "ebkit/io.hpp"
#include "ebkit/report.hpp"

namespace fs = std::filesystem;
using namespace ebkit;

namespace {

constexpr int kExitFailure = 1;
constexpr int kExitConfig = 2;
constexpr int kExitData = 3;
constexpr int kExitDiverged = 4;

struct CommonFlags {
    std::string output_dir;
    bool force = false;
    std::optional<std::uint64_t> seed;
    std::optional<double> p;
    std::optional<double> epsilon;
    std::optional<std::size_t> window;
};

void add_common_flags(CLI::App* cmd, CommonFlags& flags, bool scalar_overrides) {
    cmd->add_option("--output-dir", flags.output_dir, "Output root (default: EBKIT_OUTPUT_DIR)");
    cmd->add_flag("--force", flags.force, "Replace an existing run directory");
    cmd->add_option("--epsilon", flags.epsilon, "Shorthand for train.detector.epsilon");
    cmd->add_option("--window", flags.window, "Shorthand for train.detector.window");
    if (scalar_overrides) {
        cmd->add_option("--seed", flags.seed, "Shorthand for train.seed");
        cmd->add_option("--p", flags.p, "Shorthand for train.p");
    }
}

ExperimentConfig assemble_config(const std::string& config_path,
                                 const std::vector<std::string>& overrides,
                                 const CommonFlags& flags) {
    ExperimentConfig cfg = load_config(config_path);
    for (const auto& o : overrides) apply_override(cfg, o);
    if (flags.seed) cfg.train.seed = *flags.seed;
    if (flags.p) cfg.train.p = *flags.p;
    if (flags.epsilon) cfg.train.detector.epsilon = *flags.epsilon;
    if (flags.window) cfg.train.detector.window = *flags.window;
    if (!flags.output_dir.empty()) cfg.output_dir = flags.output_dir;
    if (cfg.output_dir.empty()) {
        const char* env = std::getenv("EBKIT_OUTPUT_DIR");
        cfg.output_dir = env && *env ? env : "ebkit-out";
    }
    return cfg;
}

fs::path prepare_run_dir(const ExperimentConfig& cfg, bool force) {
    fs::path dir = fs::path(cfg.output_dir) / cfg.run_id;
    if (fs::exists(dir)) {
        if (!force)
            throw ConfigError("run directory '" + dir.string() +
                              "' already exists (pass --force to replace it)");
        fs::remove_all(dir);
    }
    fs::create_directories(dir / "masks");
    fs::create_directories(dir / "checkpoints");
    return dir;
}

// Runs one experiment and writes the full artifact set. Returns the report.
RunReport execute_run(const ExperimentConfig& cfg, const fs::path& run_dir) {
    validate_experiment(cfg);
    Dataset data = make_dataset(cfg.data);
    std::optional<Dataset> warmup;
    if (cfg.warmup.source != "none") warmup = make_dataset(cfg.warmup);

    auto result = run_pipeline<float>(cfg.model, cfg.train, data,
                                      warmup ? &*warmup : nullptr);
    const RunReport& rep = result.report;

    write_file_atomic(run_dir / "report.json", report_to_json(rep, cfg).dump(2) + "\n");
    write_file_atomic(run_dir / "curves.csv", curves_csv(rep));
    write_file_atomic(run_dir / "distance.csv", distance_csv(rep));
    write_file_atomic(run_dir / "heatmap.csv", heatmap_csv(rep.heatmap_matrix));

    for (const auto& mask : result.mask_history) {
        char name[32];
        std::snprintf(name, sizeof(name), "epoch_%04zu.ebkt", mask.epoch);
        save_mask_file(run_dir / "masks" / name, mask);
    }
    save_checkpoint(run_dir / "checkpoints" / "theta_start.ebkt", result.theta_start);
    save_checkpoint(run_dir / "checkpoints" / "pruned.ebkt", result.pruned,
                    rep.retrain_epochs);
    save_checkpoint(run_dir / "checkpoints" / "baseline.ebkt", result.baseline,
                    rep.baseline_epochs);
    return rep;
}

int cmd_run(const std::string& config_path, const std::vector<std::string>& overrides,
            const CommonFlags& flags) {
    ExperimentConfig cfg = assemble_config(config_path, overrides, flags);
    validate_experiment(cfg);
    fs::path run_dir = prepare_run_dir(cfg, flags.force);
    RunReport rep = execute_run(cfg, run_dir);
    if (rep.status != "ok") {
        std::cerr << "run " << cfg.run_id << " diverged at epoch " << rep.diverged_epoch
                  << ": " << rep.divergence_message << "\n";
        return kExitDiverged;
    }
    std::cout << "run " << cfg.run_id << ": ";
    if (rep.ticket_epoch)
        std::cout << "ticket at epoch " << *rep.ticket_epoch;
    else
        std::cout << "no early ticket";
    std::printf(", baseline %.4f, pruned %.4f\n", rep.baseline_accuracy, rep.pruned_accuracy);
    std::cout << "artifacts in " << run_dir.string() << "\n";
    return 0;
}

std::string run_id_for(double p, std::uint64_t seed) {
    return "p" + detail::format_value(p) + "-s" + std::to_string(seed);
}

int cmd_sweep(const std::string& config_path, const std::vector<std::string>& overrides,
              const CommonFlags& flags, const std::vector<double>& p_list,
              const std::vector<std::uint64_t>& seed_list, std::size_t threads,
              bool keep_going) {
    if (p_list.empty() || seed_list.empty())
        throw ConfigError("sweep: --p and --seed must be nonempty lists");
    ExperimentConfig base = assemble_config(config_path, overrides, flags);
    validate_experiment(base);

    struct Child {
        ExperimentConfig cfg;
        fs::path run_dir;
        SweepRow row;
    };
    std::vector<Child> children;
    for (auto seed : seed_list)
        for (auto p : p_list) {
            Child c;
            c.cfg = base;
            c.cfg.train.seed = seed;
            c.cfg.train.p = p;
            c.cfg.run_id = run_id_for(p, seed);
            c.row.p = p;
            c.row.seed = seed;
            children.push_back(std::move(c));
        }

    // shared-nothing children; each builds its own dataset
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
        for (;;) {
            std::size_t i = next.fetch_add(1);
            if (i >= children.size()) return;
            Child& c = children[i];
            try {
                c.run_dir = prepare_run_dir(c.cfg, flags.force);
                execute_run(c.cfg, c.run_dir);
            } catch (const Error& e) {
                c.row.error = e.what();
            }
        }
    };
    if (threads <= 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(worker);
        for (auto& t : pool) t.join();
    }

    // the summary is recomputed from the child reports on disk
    bool all_ok = true;
    std::vector<SweepRow> rows;
    for (auto& c : children) {
        if (c.row.error.empty()) {
            c.row.report = json::parse(read_text_file(c.run_dir / "report.json"));
            if (c.row.report["status"] != "ok") all_ok = false;
        } else {
            all_ok = false;
        }
        rows.push_back(c.row);
        std::cout << "sweep " << c.cfg.run_id << ": "
                  << (c.row.error.empty() ? c.row.report["status"].get<std::string>()
                                          : "error")
                  << "\n";
    }
    write_file_atomic(fs::path(base.output_dir) / "summary.csv", sweep_summary_csv(rows));
    std::cout << "summary in " << (fs::path(base.output_dir) / "summary.csv").string() << "\n";
    if (all_ok || keep_going) return 0;
    return kExitDiverged;
}

int cmd_heatmap(const std::string& masks_dir, const std::string& out_path) {
    std::vector<fs::path> files;
    if (!fs::is_directory(masks_dir))
        throw DataError("heatmap: '" + masks_dir + "' is not a directory");
    for (const auto& entry : fs::directory_iterator(masks_dir))
        if (entry.path().extension() == ".ebkt") files.push_back(entry.path());
    if (files.empty()) throw ConfigError("heatmap: no mask files in '" + masks_dir + "'");
    std::sort(files.begin(), files.end());

    std::vector<PruneMask> masks;
    for (const auto& f : files) masks.push_back(load_mask_file(f));
    std::sort(masks.begin(), masks.end(),
              [](const PruneMask& a, const PruneMask& b) { return a.epoch < b.epoch; });
    for (const auto& m : masks)
        if (m.p != masks.front().p)
            throw ConfigError("heatmap: masks mix pruning ratios " +
                              detail::format_value(masks.front().p) + " and " +
                              detail::format_value(m.p));

    std::string csv = heatmap_csv(heatmap(masks));
    if (out_path.empty())
        std::cout << csv;
    else
        write_file_atomic(out_path, csv);
    return 0;
}

int cmd_report(const std::string& run_dir) {
    static const char* kArtifacts[] = {"report.json", "curves.csv",   "distance.csv",
                                       "heatmap.csv", "masks",        "checkpoints"};
    std::string missing;
    for (const char* a : kArtifacts)
        if (!fs::exists(fs::path(run_dir) / a)) missing += missing.empty() ? a : std::string(", ") + a;
    if (!missing.empty())
        throw DataError("report: run directory '" + run_dir + "' is missing: " + missing);

    json rep = json::parse(read_text_file(fs::path(run_dir) / "report.json"));
    const json& cfg = rep["config"];
    std::printf("run id:             %s\n", cfg["run_id"].get<std::string>().c_str());
    std::printf("status:             %s\n", rep["status"].get<std::string>().c_str());
    std::printf("mode:               %s\n", cfg["train.mode"].get<std::string>().c_str());
    std::printf("pruning ratio p:    %s\n", cfg["train.p"].get<std::string>().c_str());
    if (rep["status"] != "ok") {
        std::printf("diverged at epoch:  %d\n", rep["diverged_epoch"].get<int>());
        std::printf("message:            %s\n",
                    rep["divergence_message"].get<std::string>().c_str());
        return 0;
    }
    if (rep["ticket_epoch"].is_null())
        std::printf("ticket epoch:       no early ticket (used final mask)\n");
    else
        std::printf("ticket epoch:       %zu (searched %zu of %s)\n",
                    rep["ticket_epoch"].get<std::size_t>(),
                    rep["search_epochs"].get<std::size_t>(),
                    cfg["train.detector.max_epochs"].get<std::string>().c_str());
    std::printf("baseline accuracy:  %.4f\n", rep["baseline_accuracy"].get<double>());
    std::printf("ticket accuracy:    %.4f\n", rep["pruned_accuracy"].get<double>());
    std::printf("accuracy delta:     %+.4f\n", rep["accuracy_delta"].get<double>());
    const json& mem = rep["memory"];
    std::printf("memory\n");
    std::printf("  dense payload:    %zu bytes\n", mem["dense_bytes"].get<std::size_t>());
    std::printf("  ticket payload:   %zu bytes (%+.1f%%)\n",
                mem["kept_payload_bytes"].get<std::size_t>(),
                mem["percent_change"].get<double>());
    std::printf("  index overhead:   %zu bytes\n",
                mem["index_overhead_bytes"].get<std::size_t>());
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"ebkit: early-bird lottery-ticket experiments on tiny transformers"};
    app.require_subcommand(1);

    CommonFlags run_flags;
    std::string run_config;
    auto* run = app.add_subcommand("run", "Run one experiment end to end");
    run->add_option("config", run_config, "Experiment config file")->required();
    add_common_flags(run, run_flags, true);
    run->allow_extras();  // --key=value config overrides

    CommonFlags sweep_flags;
    std::string sweep_config;
    std::vector<double> sweep_p;
    std::vector<std::uint64_t> sweep_seeds;
    std::size_t sweep_threads = 1;
    bool keep_going = false;
    auto* sweep = app.add_subcommand("sweep", "Run a p x seed grid and summarize");
    sweep->add_option("config", sweep_config, "Experiment config file")->required();
    add_common_flags(sweep, sweep_flags, false);
    sweep->add_option("--p", sweep_p, "Pruning ratios")->delimiter(',')->required();
    sweep->add_option("--seed", sweep_seeds, "Seeds")->delimiter(',')->required();
    sweep->add_option("--threads", sweep_threads, "Parallel children");
    sweep->add_flag("--keep-going", keep_going, "Exit 0 even if a child fails");
    sweep->allow_extras();

    std::string masks_dir, heatmap_out;
    auto* hm = app.add_subcommand("heatmap", "Recompute a mask-distance heatmap");
    hm->add_option("masks_dir", masks_dir, "Directory of stored mask files")->required();
    hm->add_option("--out", heatmap_out, "Write CSV here instead of stdout");

    std::string report_dir;
    auto* rp = app.add_subcommand("report", "Print a finished run as a table");
    rp->add_option("run_dir", report_dir, "Run directory")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int rc = app.exit(e);
        return rc == 0 ? 0 : kExitConfig;
    }

    try {
        if (*run) return cmd_run(run_config, run->remaining(), run_flags);
        if (*sweep)
            return cmd_sweep(sweep_config, sweep->remaining(), sweep_flags, sweep_p,
                             sweep_seeds, sweep_threads, keep_going);
        if (*hm) return cmd_heatmap(masks_dir, heatmap_out);
        if (*rp) return cmd_report(report_dir);
    } catch (const ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const DomainError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const DataError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitData;
    } catch (const FormatError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitData;
    } catch (const IoError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitData;
    } catch (const DivergenceError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitDiverged;
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitFailure;
    }
    return kExitFailure;
}
