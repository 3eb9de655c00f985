// SPDX-License-Identifier: Apache-2.0
//
// Acceptance gate. Each criterion prints exactly one PASS/FAIL line; the
// process exits nonzero if any criterion fails. Tolerances and budgets are
// pinned here, next to the checks that use them.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "ebkit/config.hpp"
#include "ebkit/earlybird.hpp"
#include "ebkit/io.hpp"
#include "ebkit/report.hpp"
#include "ebkit/trainer.hpp"
#include "support/gradcheck.hpp"
#include "support/op_gradchecks.hpp"

namespace fs = std::filesystem;
using namespace ebkit;

namespace {

int g_failures = 0;

// Runs one criterion: body returns "" on success, a reason otherwise.
void criterion(const std::string& name, double budget_seconds,
               const std::function<std::string()>& body) {
    auto t0 = std::chrono::steady_clock::now();
    std::string reason;
    try {
        reason = body();
    } catch (const std::exception& e) {
        reason = std::string("unexpected exception: ") + e.what();
    }
    double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (reason.empty() && secs > budget_seconds) {
        char buf[96];
        std::snprintf(buf, sizeof(buf), "took %.1fs, budget %.0fs", secs, budget_seconds);
        reason = buf;
    }
    if (reason.empty()) {
        std::printf("PASS  %s (%.1fs)\n", name.c_str(), secs);
    } else {
        std::printf("FAIL  %s (%.1fs): %s\n", name.c_str(), secs, reason.c_str());
        ++g_failures;
    }
    std::fflush(stdout);
}

std::string fmt(double v) { return detail::format_value(v); }

// --- tiny text goldens ------------------------------------------------------------------

fs::path golden_dir() { return fs::path(EBKIT_SOURCE_DIR) / "tests" / "golden"; }

bool regen_goldens() { return std::getenv("EBKIT_REGEN_GOLDEN") != nullptr; }

// Records key=value lines on the first run; afterwards compares them verbatim.
// Returns "" when recorded or equal, a mismatch description otherwise.
std::string check_text_golden(const std::string& name,
                              const std::vector<std::pair<std::string, std::string>>& kv) {
    fs::path path = golden_dir() / name;
    std::string text;
    for (const auto& [k, v] : kv) text += k + " = " + v + "\n";
    if (regen_goldens() || !fs::exists(path)) {
        fs::create_directories(path.parent_path());
        write_file_atomic(path, text);
        std::fprintf(stderr, "note: recorded golden %s\n", path.string().c_str());
        return "";
    }
    std::string expect = read_text_file(path);
    if (expect == text) return "";
    return "differs from golden " + name + " (got:\n" + text + "expected:\n" + expect + ")";
}

// --- random masks with a fixed coverage ------------------------------------------------

PruneMask random_mask(std::uint64_t key, double p) {
    CounterRng rng(key);
    PruneMask m;
    m.p = p;
    m.entries["a"] = std::vector<std::uint8_t>(16);
    m.entries["b"] = std::vector<std::uint8_t>(9);
    for (auto& [name, bits] : m.entries)
        for (auto& bit : bits) bit = rng.next_u64() & 1 ? 1 : 0;
    return m;
}

std::string check_metric_space() {
    const double ps[] = {0.1, 0.25, 0.5, 0.75};
    for (std::uint64_t i = 0; i < 1000; ++i) {
        double p = ps[i % 4];
        PruneMask a = random_mask(stream_key(2024, "metric.a", i), p);
        PruneMask b = random_mask(stream_key(2024, "metric.b", i), p);
        PruneMask c = random_mask(stream_key(2024, "metric.c", i), p);
        if (mask_distance(a, a) != 0.0) return "identity failed on triple " + std::to_string(i);
        if (mask_distance(a, b) != mask_distance(b, a))
            return "symmetry failed on triple " + std::to_string(i);
        double ab = mask_distance(a, b), bc = mask_distance(b, c), ac = mask_distance(a, c);
        if (ac > ab + bc) return "triangle inequality failed on triple " + std::to_string(i);
    }
    return "";
}

// --- mask oracle -------------------------------------------------------------------------

std::string check_mask_oracle() {
    const double ps[] = {0.0, 0.1, 0.25, 1.0 / 3.0, 0.5, 0.75, 1.0};
    for (std::uint64_t t = 0; t < 200; ++t) {
        CounterRng rng(stream_key(7000, "oracle", t));
        std::size_t n = 1 + rng.next_u64() % (t % 3 == 0 ? 10000 : 64);
        bool tie_heavy = t % 2 == 0;
        std::vector<float> w(n);
        for (auto& v : w) {
            double u = rng.next_unit() * 2.0 - 1.0;
            v = static_cast<float>(tie_heavy ? std::round(u * 4.0) / 4.0 : u);
        }
        double p = ps[t % 7];

        std::vector<std::size_t> order(n);
        for (std::size_t i = 0; i < n; ++i) order[i] = i;
        std::sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) {
            float ax = std::fabs(w[x]), ay = std::fabs(w[y]);
            return ax != ay ? ax < ay : x < y;
        });
        std::vector<std::uint8_t> expect(n, 1);
        std::size_t cut = static_cast<std::size_t>(std::floor(p * static_cast<double>(n)));
        for (std::size_t i = 0; i < cut; ++i) expect[order[i]] = 0;

        Model<float> m;
        std::vector<float> copy = w;
        m.add_param("w", Tensor<float>::from_data({n}, std::move(copy)), true);
        auto mask = compute_mask(m, p);
        if (mask.entries.at("w") != expect)
            return "mismatch on tensor " + std::to_string(t) + " (n=" + std::to_string(n) +
                   ", p=" + fmt(p) + ")";
    }
    return "";
}

// --- gradients ----------------------------------------------------------------------------

std::string check_gradients() {
    for (const auto& op_case : ebkit_test::all_op_grad_cases())
        for (std::uint64_t trial = 0; trial < 50; ++trial) {
            auto rep = op_case.run(trial);
            if (!rep.ok)
                return "op " + op_case.name + " trial " + std::to_string(trial) + " at " +
                       rep.worst_where + ": gap " + fmt(rep.worst_gap) + " > allowed " +
                       fmt(rep.worst_allowed);
            if (rep.checked == 0) return "op " + op_case.name + " checked nothing";
        }
    return "";
}

// --- frozen at zero ------------------------------------------------------------------------

std::string check_frozen_at_zero() {
    ModelConfig mc;
    mc.kind = ModelKind::EncoderVision;
    mc.depth = 1;
    mc.d_model = 16;
    mc.n_heads = 2;
    mc.d_ff = 32;
    mc.n_classes = 4;

    VisionGenConfig vg;
    vg.seed = 1001;
    vg.n_train = 48;
    vg.n_val = 16;
    Dataset ds = gen_vision(vg);

    auto m = build<float>(mc, 3);
    auto mask = compute_mask(m, 0.5);
    apply_mask(m, mask);

    TrainConfig tc;
    tc.batch_size = 16;
    tc.optimizer.kind = OptimizerKind::Sgd;
    tc.optimizer.lr = 0.1;
    tc.optimizer.momentum = 0.9;
    tc.seed = 11;
    OptimizerState<float> opt(tc.optimizer);
    for (std::size_t epoch = 1; epoch <= 20; ++epoch) {
        train_epoch(m, ds, opt, tc, epoch);
        for (const auto& param : m.parameters) {
            if (!param.prunable) continue;
            const auto& bits = mask.entries.at(param.name);
            auto w = param.tensor.data();
            for (std::size_t i = 0; i < w.size(); ++i)
                if (bits[i] == 0 && w[i] != 0.0f)
                    return param.name + "[" + std::to_string(i) + "] drifted to " +
                           fmt(w[i]) + " at epoch " + std::to_string(epoch);
        }
    }

    // forward with the mask applied vs forward with weights zeroed by hand
    auto manual = m.clone();
    manual.active_mask.reset();
    for (auto& param : manual.parameters) {
        auto it = mask.entries.find(param.name);
        if (it == mask.entries.end()) continue;
        auto w = param.tensor.mutable_data();
        for (std::size_t i = 0; i < w.size(); ++i)
            if (it->second[i] == 0) w[i] = 0.0f;
    }
    std::vector<std::size_t> idx(ds.split_size(Split::Val));
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = ds.train_count + i;
    auto images = make_image_batch<float>(ds, idx);
    NoGradGuard guard;
    auto a = forward(m, images);
    auto b = forward(manual, images);
    if (a.size() != b.size()) return "forward outputs differ in size";
    if (std::memcmp(a.data().data(), b.data().data(), a.size() * sizeof(float)) != 0)
        return "masked forward is not bitwise equal to manually zeroed forward";
    return "";
}

// --- desk-scale analogs -----------------------------------------------------------------

std::string check_vision_analog() {
    ModelConfig mc;
    mc.kind = ModelKind::EncoderVision;
    mc.depth = 2;
    mc.d_model = 32;
    mc.n_heads = 2;
    mc.d_ff = 64;
    mc.n_classes = 4;

    VisionGenConfig vg;
    vg.seed = 0;
    vg.n_train = 2000;
    vg.n_val = 500;
    vg.n_classes = 4;
    Dataset ds = gen_vision(vg);

    TrainConfig tc;
    tc.mode = TrainMode::VisionFullTrain;
    tc.epochs = 10;
    tc.batch_size = 64;
    tc.optimizer.kind = OptimizerKind::AdamW;
    tc.optimizer.lr = 0.001;
    tc.seed = 0;
    tc.p = 0.3;
    tc.detector.epsilon = 0.1;
    tc.detector.window = 1;
    tc.detector.max_epochs = 30;

    auto res = run_pipeline<float>(mc, tc, ds);
    const RunReport& r = res.report;
    if (r.status != "ok") return "run diverged: " + r.divergence_message;
    if (!r.ticket_epoch) return "detector never fired within 30 epochs";
    std::size_t e = *r.ticket_epoch;
    if (e >= 30) return "detector fired at epoch " + std::to_string(e) + ", expected < 30";
    if (r.distance_series.size() < 2 && e > 2)
        return "distance series too short to compare against epoch 2";
    double d_fire = r.distance_series[e - 2];
    double d_two = r.distance_series[0];
    if (!(d_fire < d_two))
        return "distance at firing " + fmt(d_fire) + " is not below epoch-2 distance " +
               fmt(d_two);
    if (r.pruned_accuracy < r.baseline_accuracy - 0.03)
        return "ticket accuracy " + fmt(r.pruned_accuracy) + " below baseline " +
               fmt(r.baseline_accuracy) + " - 0.03";
    return check_text_golden("accept_vision.txt",
                             {{"ticket_epoch", std::to_string(e)},
                              {"baseline_accuracy", fmt(r.baseline_accuracy)},
                              {"pruned_accuracy", fmt(r.pruned_accuracy)}});
}

std::string check_language_analog() {
    ModelConfig mc;
    mc.kind = ModelKind::CausalText;
    mc.depth = 2;
    mc.d_model = 32;
    mc.n_heads = 2;
    mc.d_ff = 64;
    mc.n_classes = 2;
    mc.vocab = 32;
    mc.max_len = 12;

    TextGenConfig tg;
    tg.seed = 0;
    tg.n_train = 2000;
    tg.n_val = 500;
    Dataset ds = gen_text(tg);
    TextGenConfig wg = tg;
    wg.seed = 1;
    wg.marker_base = 9;  // disjoint marker block: a different warm-up task
    Dataset warm = gen_text(wg);

    TrainConfig tc;
    tc.mode = TrainMode::LanguageFinetune;
    tc.epochs = 8;
    tc.batch_size = 64;
    tc.optimizer.kind = OptimizerKind::AdamW;
    tc.optimizer.lr = 0.0001;
    tc.seed = 0;
    tc.p = 0.3;
    tc.warmup_epochs = 3;
    tc.detector.epsilon = 0.01;
    tc.detector.window = 1;
    tc.detector.max_epochs = 15;

    auto res = run_pipeline<float>(mc, tc, ds, &warm);
    const RunReport& r = res.report;
    if (r.status != "ok") return "run diverged: " + r.divergence_message;
    if (!r.ticket_epoch) return "detector never fired within 15 epochs";
    std::size_t e = *r.ticket_epoch;
    if (e > 7)
        return "detector fired at epoch " + std::to_string(e) +
               ", expected within the first half of the 15-epoch budget";
    return check_text_golden("accept_text.txt",
                             {{"ticket_epoch", std::to_string(e)},
                              {"baseline_accuracy", fmt(r.baseline_accuracy)},
                              {"pruned_accuracy", fmt(r.pruned_accuracy)}});
}

// --- memory accounting -----------------------------------------------------------------

std::string check_memory_accounting() {
    double pct = memory_percent_change(157.26, 83.61);
    double one_decimal = std::round(pct * 10.0) / 10.0;
    if (one_decimal != -46.8)
        return "157.26 -> 83.61 gave " + fmt(one_decimal) + ", expected -46.8";

    std::vector<float> w(1000);
    for (std::size_t i = 0; i < w.size(); ++i) w[i] = static_cast<float>(i + 1);
    Model<float> m;
    m.add_param("w", Tensor<float>::from_data({1000}, std::move(w)), true);
    auto rep = memory_report(m, compute_mask(m, 0.3));
    if (rep.dense_bytes != 4000) return "dense bytes " + std::to_string(rep.dense_bytes);
    if (rep.kept_payload_bytes != 2800)
        return "kept payload bytes " + std::to_string(rep.kept_payload_bytes);
    if (rep.percent_change != -30.0)
        return "payload change " + fmt(rep.percent_change) + ", expected exactly -30";
    return "";
}

// --- CLI determinism ------------------------------------------------------------------------

int run_shell(const std::string& cmd) {
    int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string check_cli_determinism() {
    fs::path dir = fs::path(EBKIT_BINARY_DIR) / "accept_tmp";
    fs::remove_all(dir);
    fs::create_directories(dir);
    fs::path cfg = dir / "toy.cfg";
    {
        std::ofstream out(cfg);
        out << "model.kind = encoder_vision\nmodel.depth = 1\nmodel.d_model = 16\n"
            << "model.n_heads = 2\nmodel.d_ff = 32\nmodel.n_classes = 4\n"
            << "data.source = vision_gen\ndata.seed = 1001\ndata.n_train = 48\n"
            << "data.n_val = 16\ntrain.mode = vision_full_train\ntrain.epochs = 2\n"
            << "train.batch_size = 16\ntrain.seed = 5\ntrain.p = 0.3\n"
            << "train.optimizer.kind = sgd\ntrain.optimizer.lr = 0.1\n"
            << "train.optimizer.momentum = 0.9\ntrain.detector.epsilon = 0.5\n"
            << "train.detector.max_epochs = 4\nrun_id = toy\n";
    }
    std::string base = std::string("'") + EBKIT_CLI_BIN + "' run '" + cfg.string() +
                       "' --output-dir '" + (dir / "out").string() + "' >/dev/null 2>&1";
    if (run_shell(base) != 0) return "first run failed";
    std::string report1 = read_text_file(dir / "out" / "toy" / "report.json");
    std::string curves1 = read_text_file(dir / "out" / "toy" / "curves.csv");
    if (run_shell(base + " --force") != 0) return "second run failed";
    std::string report2 = read_text_file(dir / "out" / "toy" / "report.json");
    std::string curves2 = read_text_file(dir / "out" / "toy" / "curves.csv");
    if (report1 != report2) return "report.json differs between identical runs";
    if (curves1 != curves2) return "curves.csv differs between identical runs";
    return "";
}

// --- cifar reader --------------------------------------------------------------------------

std::string check_cifar_reader() {
    fs::path dir = fs::path(EBKIT_BINARY_DIR) / "accept_tmp";
    fs::create_directories(dir);

    std::string bytes(2 * kCifarRecordBytes, '\0');
    bytes[0] = 3;
    for (std::size_t i = 0; i < 1024; ++i) bytes[1 + i] = static_cast<char>(255);
    bytes[1 + 1024 + 51] = 51;
    for (std::size_t i = 0; i < 1024; ++i) bytes[1 + 2048 + i] = static_cast<char>(128);
    bytes[kCifarRecordBytes] = 9;
    bytes[kCifarRecordBytes + 1 + 7] = 19;

    fs::path good = dir / "fixture.bin";
    write_file_atomic(good, bytes);
    Dataset ds = read_cifar10_binary(good);
    if (ds.size() != 2) return "expected 2 records, got " + std::to_string(ds.size());
    if (ds.labels[0] != 3 || ds.labels[1] != 9) return "labels did not parse";
    if (ds.image_shape != std::vector<std::size_t>{3, 32, 32}) return "wrong image shape";
    const auto& img0 = ds.images[0];
    if (img0[0] != 1.0f) return "red plane value is not exactly 255/255";
    if (img0[1024 + 51] != 51.0f / 255.0f) return "green plane value is not exactly 51/255";
    if (img0[2048] != 128.0f / 255.0f) return "blue plane value is not exactly 128/255";
    const auto& img1 = ds.images[1];
    if (img1[7] != 19.0f / 255.0f || img1[8] != 0.0f) return "second record bytes misplaced";

    auto expect_format_error = [&](const std::string& name, const std::string& data) {
        fs::path p = dir / name;
        write_file_atomic(p, data);
        try {
            read_cifar10_binary(p);
        } catch (const FormatError&) {
            return true;
        }
        return false;
    };
    if (!expect_format_error("truncated.bin", bytes.substr(0, bytes.size() - 1)))
        return "truncated file did not raise a format error";
    if (!expect_format_error("empty.bin", ""))
        return "empty file did not raise a format error";
    std::string bad_label = bytes;
    bad_label[0] = 10;
    if (!expect_format_error("badlabel.bin", bad_label))
        return "label 10 did not raise a format error";
    return "";
}

// --- detector online/offline equivalence ---------------------------------------------------

struct MaskChain {
    std::size_t n;
    PruneMask current;
    CounterRng rng;

    MaskChain(std::size_t n_in, std::uint64_t key) : n(n_in), rng(key) {
        current.p = 0.5;
        current.epoch = 1;
        current.entries["w"] = std::vector<std::uint8_t>(n);
        for (std::size_t i = 0; i < n / 2; ++i) current.entries["w"][i] = 1;
    }

    // Swaps `swaps` kept/pruned pairs: the distance to the previous mask is 2*swaps/n.
    PruneMask step(std::size_t swaps) {
        auto& bits = current.entries["w"];
        for (std::size_t s = 0; s < swaps; ++s) {
            std::size_t kept, pruned;
            do kept = rng.next_u64() % n;
            while (bits[kept] != 1);
            do pruned = rng.next_u64() % n;
            while (bits[pruned] != 0);
            bits[kept] = 0;
            bits[pruned] = 1;
        }
        current.epoch += 1;
        return current;
    }
};

std::string check_detector_equivalence() {
    for (std::uint64_t trial = 0; trial < 500; ++trial) {
        CounterRng rng(stream_key(9000, "detector", trial));
        DetectorConfig cfg;
        cfg.epsilon = 0.01 + rng.next_unit() * 0.15;
        cfg.window = 1 + rng.next_u64() % 4;
        std::size_t epochs = 3 + rng.next_u64() % 28;
        cfg.max_epochs = epochs;

        MaskChain chain(500, stream_key(9000, "detector.chain", trial));
        DetectorState online(cfg);
        observe(online, 1, chain.current);
        for (std::size_t e = 2; e <= epochs; ++e)
            observe(online, e, chain.step(rng.next_u64() % 26));

        auto offline = detect_offline(online.distances, cfg);
        std::optional<std::size_t> online_fire;
        if (online.found) online_fire = online.ticket_epoch;
        if (online_fire != offline)
            return "trial " + std::to_string(trial) + ": online/offline disagree";

        // a looser threshold never fires later; a longer window never fires earlier
        DetectorConfig looser = cfg;
        looser.epsilon = std::min(0.99, cfg.epsilon * 1.5);
        auto fired_loose = detect_offline(online.distances, looser);
        if (offline && (!fired_loose || *fired_loose > *offline))
            return "trial " + std::to_string(trial) + ": raising epsilon delayed detection";

        DetectorConfig wider = cfg;
        wider.window = cfg.window + 1;
        auto fired_wide = detect_offline(online.distances, wider);
        if (fired_wide && offline && *fired_wide < *offline)
            return "trial " + std::to_string(trial) + ": raising the window hastened detection";
        if (fired_wide && !offline)
            return "trial " + std::to_string(trial) + ": wider window fired where base did not";
    }
    return "";
}

}  // namespace

int main() {
    std::printf("acceptance gate\n");
    criterion("mask distance satisfies the metric axioms on 1000 triples", 5.0,
              check_metric_space);
    criterion("magnitude masks match a full-sort oracle on 200 tensors", 60.0,
              check_mask_oracle);
    criterion("autodiff gradients match central differences (rel 1e-6, 50 trials/op)", 60.0,
              check_gradients);
    criterion("masked weights stay exactly zero through 20 epochs", 60.0,
              check_frozen_at_zero);
    criterion("vision run finds an early ticket that recovers the baseline", 300.0,
              check_vision_analog);
    criterion("language fine-tune finds a ticket in the first half of the budget", 300.0,
              check_language_analog);
    criterion("memory accounting reproduces the reference arithmetic", 5.0,
              check_memory_accounting);
    criterion("identical CLI runs produce byte-identical artifacts", 120.0,
              check_cli_determinism);
    criterion("cifar10 reader is bit-exact on a hand-built fixture", 5.0, check_cifar_reader);
    criterion("online detection agrees with offline replay on 500 series", 5.0,
              check_detector_equivalence);

    if (g_failures == 0) {
        std::printf("acceptance: all 10 criteria passed\n");
        return 0;
    }
    std::printf("acceptance: %d criteria failed\n", g_failures);
    return 1;
}
