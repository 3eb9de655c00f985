// SPDX-License-Identifier: Apache-2.0
#include <catch2/catch_amalgamated.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include "ebkit/io.hpp"
#include "ebkit/report.hpp"
#include "support/golden.hpp"

namespace fs = std::filesystem;
using namespace ebkit;

namespace {

struct CliResult {
    int exit_code = -1;
    std::string out;
    std::string err;
};

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream buf;
    buf << in.rdbuf();
    return buf.str();
}

CliResult run_cli(const std::vector<std::string>& args, const std::string& env = "") {
    static int counter = 0;
    fs::path dir = fs::path(EBKIT_BINARY_DIR) / "cli_tmp";
    fs::create_directories(dir);
    fs::path out = dir / ("stdout_" + std::to_string(counter) + ".txt");
    fs::path err = dir / ("stderr_" + std::to_string(counter) + ".txt");
    ++counter;

    std::string cmd = env.empty() ? "" : env + " ";
    cmd += std::string("'") + EBKIT_CLI_BIN + "'";
    for (const auto& a : args) cmd += " '" + a + "'";
    cmd += " >'" + out.string() + "' 2>'" + err.string() + "'";

    int status = std::system(cmd.c_str());
    CliResult r;
    r.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    r.out = slurp(out);
    r.err = slurp(err);
    return r;
}

// Fresh scratch directory per test case.
fs::path scratch_dir(const std::string& name) {
    fs::path dir = fs::path(EBKIT_BINARY_DIR) / "cli_tmp" / name;
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

fs::path write_toy_config(const fs::path& dir) {
    fs::path cfg = dir / "toy.cfg";
    std::ofstream out(cfg);
    out << "# toy vision experiment\n"
        << "model.kind = encoder_vision\n"
        << "model.depth = 1\n"
        << "model.d_model = 16\n"
        << "model.n_heads = 2\n"
        << "model.d_ff = 32\n"
        << "model.n_classes = 4\n"
        << "data.source = vision_gen\n"
        << "data.seed = 1001\n"
        << "data.n_train = 48\n"
        << "data.n_val = 16\n"
        << "train.mode = vision_full_train\n"
        << "train.epochs = 2\n"
        << "train.batch_size = 16\n"
        << "train.seed = 5\n"
        << "train.p = 0.3\n"
        << "train.optimizer.kind = sgd\n"
        << "train.optimizer.lr = 0.1\n"
        << "train.optimizer.momentum = 0.9\n"
        << "train.detector.epsilon = 0.5\n"
        << "train.detector.max_epochs = 4\n"
        << "run_id = toy\n";
    return cfg;
}

std::set<std::string> dir_entries(const fs::path& dir) {
    std::set<std::string> names;
    for (const auto& e : fs::directory_iterator(dir)) names.insert(e.path().filename());
    return names;
}

void check_text_golden(const std::string& name, const std::string& text) {
    fs::path path = fs::path(EBKIT_SOURCE_DIR) / "tests" / "golden" / name;
    if (!fs::exists(path) || ebkit::testing::regen_goldens()) {
        write_file_atomic(path, text);
        WARN("recorded golden " << path.string());
        return;
    }
    REQUIRE(text == slurp(path));
}

}  // namespace

TEST_CASE("missing config file exits 2 with a diagnostic") {
    auto dir = scratch_dir("missing_cfg");
    auto r = run_cli({"run", (dir / "nope.cfg").string()});
    REQUIRE(r.exit_code == 2);
    REQUIRE(r.err.find("error:") != std::string::npos);
    REQUIRE(r.err.find("nope.cfg") != std::string::npos);
}

TEST_CASE("toy run writes exactly the declared artifacts") {
    auto dir = scratch_dir("toy_run");
    auto cfg = write_toy_config(dir);
    auto r = run_cli({"run", cfg.string(), "--output-dir", (dir / "out").string()});
    INFO(r.err);
    REQUIRE(r.exit_code == 0);

    fs::path run_dir = dir / "out" / "toy";
    std::set<std::string> expected = {"report.json", "curves.csv",  "distance.csv",
                                      "heatmap.csv", "masks",       "checkpoints"};
    REQUIRE(dir_entries(run_dir) == expected);

    json rep = json::parse(slurp(run_dir / "report.json"));
    REQUIRE(rep["status"] == "ok");
    std::size_t search_epochs = rep["search_epochs"].get<std::size_t>();
    std::size_t mask_files = 0;
    for (const auto& e : fs::directory_iterator(run_dir / "masks"))
        if (e.path().extension() == ".ebkt") ++mask_files;
    REQUIRE(mask_files == search_epochs);
    REQUIRE(fs::exists(run_dir / "checkpoints" / "theta_start.ebkt"));
    REQUIRE(fs::exists(run_dir / "checkpoints" / "pruned.ebkt"));
    REQUIRE(fs::exists(run_dir / "checkpoints" / "baseline.ebkt"));

    // stored checkpoints load back into usable models
    ExperimentConfig echo = config_from_echo(rep["config"]);
    auto m = load_checkpoint<float>(run_dir / "checkpoints" / "pruned.ebkt", echo.model);
    REQUIRE(num_parameters(m) > 0);
}

TEST_CASE("config echo round-trips and reflects overrides") {
    auto dir = scratch_dir("echo");
    auto cfg_path = write_toy_config(dir);
    auto r = run_cli({"run", cfg_path.string(), "--output-dir", (dir / "out").string(),
                      "--train.p=0.25", "--seed", "9"});
    INFO(r.err);
    REQUIRE(r.exit_code == 0);

    json rep = json::parse(slurp(dir / "out" / "toy" / "report.json"));
    REQUIRE(rep["config"]["train.p"] == "0.25");
    REQUIRE(rep["config"]["train.seed"] == "9");

    ExperimentConfig expected = load_config(cfg_path);
    apply_override(expected, "train.p=0.25");
    expected.train.seed = 9;
    expected.output_dir = (dir / "out").string();
    REQUIRE(config_from_echo(rep["config"]) == expected);
}

TEST_CASE("unknown override key is a config error") {
    auto dir = scratch_dir("bad_override");
    auto cfg = write_toy_config(dir);
    auto r = run_cli({"run", cfg.string(), "--output-dir", (dir / "out").string(),
                      "--train.nonsense=1"});
    REQUIRE(r.exit_code == 2);
    REQUIRE(r.err.find("unknown key") != std::string::npos);
}

TEST_CASE("rerunning an existing run id requires force") {
    auto dir = scratch_dir("force");
    auto cfg = write_toy_config(dir);
    std::string out = (dir / "out").string();
    REQUIRE(run_cli({"run", cfg.string(), "--output-dir", out}).exit_code == 0);
    auto again = run_cli({"run", cfg.string(), "--output-dir", out});
    REQUIRE(again.exit_code == 2);
    REQUIRE(again.err.find("--force") != std::string::npos);
    REQUIRE(run_cli({"run", cfg.string(), "--output-dir", out, "--force"}).exit_code == 0);
}

TEST_CASE("identical configs produce byte-identical reports") {
    auto dir = scratch_dir("determinism");
    auto cfg = write_toy_config(dir);
    REQUIRE(run_cli({"run", cfg.string(), "--output-dir", (dir / "a").string()}).exit_code == 0);
    REQUIRE(run_cli({"run", cfg.string(), "--output-dir", (dir / "b").string()}).exit_code == 0);

    // the config echo differs only in output_dir, which is part of the config;
    // pin it so the reports are comparable end to end
    json ra = json::parse(slurp(dir / "a" / "toy" / "report.json"));
    json rb = json::parse(slurp(dir / "b" / "toy" / "report.json"));
    ra["config"].erase("output_dir");
    rb["config"].erase("output_dir");
    REQUIRE(ra.dump() == rb.dump());

    REQUIRE(slurp(dir / "a" / "toy" / "curves.csv") == slurp(dir / "b" / "toy" / "curves.csv"));
    REQUIRE(slurp(dir / "a" / "toy" / "distance.csv") ==
            slurp(dir / "b" / "toy" / "distance.csv"));
    REQUIRE(slurp(dir / "a" / "toy" / "heatmap.csv") ==
            slurp(dir / "b" / "toy" / "heatmap.csv"));
}

TEST_CASE("run honors the output dir environment default") {
    auto dir = scratch_dir("env_default");
    auto cfg = write_toy_config(dir);
    auto r = run_cli({"run", cfg.string()},
                     "EBKIT_OUTPUT_DIR='" + (dir / "from_env").string() + "'");
    INFO(r.err);
    REQUIRE(r.exit_code == 0);
    REQUIRE(fs::exists(dir / "from_env" / "toy" / "report.json"));
}

TEST_CASE("divergent run exits 4 and reports diverged status") {
    auto dir = scratch_dir("diverged");
    auto cfg = write_toy_config(dir);
    auto r = run_cli({"run", cfg.string(), "--output-dir", (dir / "out").string(),
                      "--train.optimizer.lr=1e18", "--train.optimizer.momentum=0"});
    REQUIRE(r.exit_code == 4);
    json rep = json::parse(slurp(dir / "out" / "toy" / "report.json"));
    REQUIRE(rep["status"] == "diverged");
    REQUIRE(rep["divergence_message"].get<std::string>().size() > 0);
}

TEST_CASE("sweep emits per-run reports and a recomputable summary") {
    auto dir = scratch_dir("sweep");
    auto cfg = write_toy_config(dir);
    std::string out = (dir / "out").string();
    auto r = run_cli({"sweep", cfg.string(), "--output-dir", out, "--p", "0.1,0.3",
                      "--seed", "5,6"});
    INFO(r.err);
    REQUIRE(r.exit_code == 0);

    std::string summary = slurp(dir / "out" / "summary.csv");
    std::size_t lines = 0;
    for (char c : summary) lines += c == '\n';
    REQUIRE(lines == 7);  // header + 4 runs + 1 baseline per seed

    // summary is a pure function of the child reports
    std::vector<SweepRow> rows;
    for (auto seed : {5, 6})
        for (double p : {0.1, 0.3}) {
            SweepRow row;
            row.p = p;
            row.seed = static_cast<std::uint64_t>(seed);
            std::string id = "p" + detail::format_value(p) + "-s" + std::to_string(seed);
            row.report = json::parse(slurp(dir / "out" / id / "report.json"));
            rows.push_back(row);
        }
    REQUIRE(sweep_summary_csv(rows) == summary);

    // within a seed, the dense baseline is independent of p
    REQUIRE(rows[0].report["baseline_accuracy"] == rows[1].report["baseline_accuracy"]);
    REQUIRE(rows[2].report["baseline_accuracy"] == rows[3].report["baseline_accuracy"]);
    REQUIRE(json::parse(slurp(dir / "out" / "p0.1-s5" / "report.json"))["config"]["train.p"] ==
            "0.1");
}

TEST_CASE("sweep records child divergence and keep-going controls the exit code") {
    auto dir = scratch_dir("sweep_div");
    auto cfg = write_toy_config(dir);
    std::string out = (dir / "out").string();
    std::vector<std::string> args = {"sweep",  cfg.string(), "--output-dir",
                                     out,      "--p",        "0.1",
                                     "--seed", "5",          "--train.optimizer.lr=1e18",
                                     "--train.optimizer.momentum=0"};
    auto r = run_cli(args);
    REQUIRE(r.exit_code == 4);
    std::string summary = slurp(dir / "out" / "summary.csv");
    REQUIRE(summary.find("diverged") != std::string::npos);

    args.push_back("--keep-going");
    args.push_back("--force");
    REQUIRE(run_cli(args).exit_code == 0);
}

TEST_CASE("heatmap recompute matches the stored artifact byte for byte") {
    auto dir = scratch_dir("heatmap");
    auto cfg = write_toy_config(dir);
    REQUIRE(run_cli({"run", cfg.string(), "--output-dir", (dir / "out").string()}).exit_code ==
            0);
    fs::path run_dir = dir / "out" / "toy";
    fs::path recomputed = dir / "recomputed.csv";
    auto r = run_cli({"heatmap", (run_dir / "masks").string(), "--out", recomputed.string()});
    INFO(r.err);
    REQUIRE(r.exit_code == 0);
    REQUIRE(slurp(recomputed) == slurp(run_dir / "heatmap.csv"));

    // without --out the CSV goes to stdout
    auto piped = run_cli({"heatmap", (run_dir / "masks").string()});
    REQUIRE(piped.out == slurp(run_dir / "heatmap.csv"));
}

TEST_CASE("heatmap handles single masks and rejects mixed ratios") {
    auto dir = scratch_dir("heatmap_edge");

    PruneMask a;
    a.p = 0.5;
    a.epoch = 1;
    a.entries["w"] = {1, 0, 1, 0};
    fs::create_directories(dir / "single");
    save_mask_file(dir / "single" / "epoch_0001.ebkt", a);
    auto single = run_cli({"heatmap", (dir / "single").string()});
    REQUIRE(single.exit_code == 0);
    REQUIRE(single.out == "0\n");

    PruneMask b = a;
    b.p = 0.25;
    b.epoch = 2;
    b.entries["w"] = {1, 1, 1, 0};
    fs::create_directories(dir / "mixed");
    save_mask_file(dir / "mixed" / "epoch_0001.ebkt", a);
    save_mask_file(dir / "mixed" / "epoch_0002.ebkt", b);
    auto mixed = run_cli({"heatmap", (dir / "mixed").string()});
    REQUIRE(mixed.exit_code == 2);
    REQUIRE(mixed.err.find("mix") != std::string::npos);
}

TEST_CASE("report prints the run table") {
    auto dir = scratch_dir("report");
    auto cfg = write_toy_config(dir);
    REQUIRE(run_cli({"run", cfg.string(), "--output-dir", (dir / "out").string()}).exit_code ==
            0);
    auto r = run_cli({"report", (dir / "out" / "toy").string()});
    REQUIRE(r.exit_code == 0);
    REQUIRE(r.out.find("ticket epoch:") != std::string::npos);
    REQUIRE(r.out.find("%") != std::string::npos);
    check_text_golden("report_stdout.txt", r.out);
}

TEST_CASE("report names each missing artifact") {
    auto dir = scratch_dir("report_missing");
    auto cfg = write_toy_config(dir);
    REQUIRE(run_cli({"run", cfg.string(), "--output-dir", (dir / "out").string()}).exit_code ==
            0);
    fs::remove(dir / "out" / "toy" / "curves.csv");
    fs::remove(dir / "out" / "toy" / "distance.csv");
    auto r = run_cli({"report", (dir / "out" / "toy").string()});
    REQUIRE(r.exit_code == 3);
    REQUIRE(r.err.find("curves.csv") != std::string::npos);
    REQUIRE(r.err.find("distance.csv") != std::string::npos);
}

TEST_CASE("report marks runs that never found an early ticket") {
    auto dir = scratch_dir("report_no_ticket");
    auto cfg = write_toy_config(dir);
    auto r = run_cli({"run", cfg.string(), "--output-dir", (dir / "out").string(),
                      "--epsilon", "0.000001", "--train.detector.max_epochs=2"});
    INFO(r.err);
    REQUIRE(r.exit_code == 0);
    auto rep = run_cli({"report", (dir / "out" / "toy").string()});
    REQUIRE(rep.out.find("no early ticket (used final mask)") != std::string::npos);
}
