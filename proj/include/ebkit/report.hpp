// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "ebkit/archive.hpp"
#include "ebkit/config.hpp"
#include "ebkit/trainer.hpp"

namespace ebkit {

using json = nlohmann::ordered_json;

inline std::string read_text_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot read '" + path.string() + "'");
    std::ostringstream buf;
    buf << in.rdbuf();
    return buf.str();
}

// --- report JSON ------------------------------------------------------------------------

inline json config_echo_json(const ExperimentConfig& cfg) {
    json echo = json::object();
    for (const auto& f : config_schema()) echo[f.key] = f.get(cfg);
    return echo;
}

inline ExperimentConfig config_from_echo(const json& echo) {
    ExperimentConfig cfg;
    for (const auto& [key, value] : echo.items())
        config_field(key).set(cfg, value.get<std::string>());
    return cfg;
}

inline json report_to_json(const RunReport& rep, const ExperimentConfig& cfg) {
    json j;
    j["status"] = rep.status;
    j["ticket_found"] = rep.ticket_found;
    if (rep.ticket_epoch)
        j["ticket_epoch"] = *rep.ticket_epoch;
    else
        j["ticket_epoch"] = nullptr;
    j["search_epochs"] = rep.search_epochs;
    j["retrain_epochs"] = rep.retrain_epochs;
    j["baseline_epochs"] = rep.baseline_epochs;
    j["baseline_accuracy"] = rep.baseline_accuracy;
    j["pruned_accuracy"] = rep.pruned_accuracy;
    j["accuracy_delta"] = rep.accuracy_delta;
    j["memory"] = {{"dense_bytes", rep.memory.dense_bytes},
                   {"kept_payload_bytes", rep.memory.kept_payload_bytes},
                   {"index_overhead_bytes", rep.memory.index_overhead_bytes},
                   {"percent_change", rep.memory.percent_change}};
    j["divergence_message"] = rep.divergence_message;
    j["diverged_epoch"] = rep.diverged_epoch;
    j["config"] = config_echo_json(cfg);
    return j;
}

// --- CSV emitters -------------------------------------------------------------------------

namespace detail {

inline void append_csv_double(std::string& out, double v) { out += format_value(v); }

inline void append_curve_rows(std::string& out, const std::string& stage,
                              const std::vector<EpochMetrics>& curve) {
    for (std::size_t i = 0; i < curve.size(); ++i) {
        out += stage;
        out += ',';
        out += std::to_string(i + 1);
        out += ',';
        append_csv_double(out, curve[i].train_loss);
        out += ',';
        append_csv_double(out, curve[i].train_accuracy);
        out += ',';
        append_csv_double(out, curve[i].val_loss);
        out += ',';
        append_csv_double(out, curve[i].val_accuracy);
        out += ',';
        if (curve[i].mask_distance) append_csv_double(out, *curve[i].mask_distance);
        out += '\n';
    }
}

}  // namespace detail

inline std::string curves_csv(const RunReport& rep) {
    std::string out = "stage,epoch,train_loss,train_accuracy,val_loss,val_accuracy,mask_distance\n";
    detail::append_curve_rows(out, "search", rep.search_curve);
    detail::append_curve_rows(out, "retrain", rep.retrain_curve);
    detail::append_curve_rows(out, "baseline", rep.baseline_curve);
    return out;
}

inline std::string distance_csv(const RunReport& rep) {
    std::string out = "epoch,distance\n";
    for (std::size_t i = 0; i < rep.distance_series.size(); ++i) {
        out += std::to_string(i + 2);
        out += ',';
        detail::append_csv_double(out, rep.distance_series[i]);
        out += '\n';
    }
    return out;
}

inline std::string heatmap_csv(const std::vector<std::vector<double>>& matrix) {
    std::string out;
    for (const auto& row : matrix) {
        for (std::size_t j = 0; j < row.size(); ++j) {
            if (j) out += ',';
            detail::append_csv_double(out, row[j]);
        }
        out += '\n';
    }
    return out;
}

// --- sweep summary ---------------------------------------------------------------------------

// One summary row per finished child, straight from its report JSON.
struct SweepRow {
    double p = 0.0;
    std::uint64_t seed = 0;
    json report;  // empty object when the child did not produce one
    std::string error;
};

inline std::string sweep_summary_csv(const std::vector<SweepRow>& rows) {
    std::string out =
        "p,seed,ticket_epoch,baseline_accuracy,pruned_accuracy,accuracy_delta,"
        "memory_percent_change,status\n";
    auto num = [](const json& v) {
        std::string s;
        detail::append_csv_double(s, v.get<double>());
        return s;
    };
    std::set<std::uint64_t> seeds_done;
    for (const auto& r : rows) {
        if (!seeds_done.count(r.seed) && r.error.empty() && !r.report.empty() &&
            r.report["status"] == "ok") {
            // the in-run dense baseline, reported once per seed
            seeds_done.insert(r.seed);
            out += "0,";
            out += std::to_string(r.seed);
            out += ",,";
            out += num(r.report["baseline_accuracy"]);
            out += ',';
            out += num(r.report["baseline_accuracy"]);
            out += ",0,0,baseline\n";
        }
        out += detail::format_value(r.p);
        out += ',';
        out += std::to_string(r.seed);
        out += ',';
        if (!r.error.empty()) {
            out += ",,,,,error\n";
            continue;
        }
        if (!r.report["ticket_epoch"].is_null())
            out += std::to_string(r.report["ticket_epoch"].get<std::size_t>());
        out += ',';
        if (r.report["status"] == "ok") {
            out += num(r.report["baseline_accuracy"]);
            out += ',';
            out += num(r.report["pruned_accuracy"]);
            out += ',';
            out += num(r.report["accuracy_delta"]);
            out += ',';
            out += num(r.report["memory"]["percent_change"]);
            out += ',';
        } else {
            out += ",,,,";
        }
        out += r.report["status"].get<std::string>();
        out += '\n';
    }
    return out;
}

}  // namespace ebkit
