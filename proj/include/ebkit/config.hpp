// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <charconv>
#include <cstdint>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>
#include <string>
#include <type_traits>
#include <vector>

#include "ebkit/data.hpp"
#include "ebkit/model.hpp"
#include "ebkit/trainer.hpp"

namespace ebkit {

// Where a run's samples come from. "none" marks an absent warm-up section.
struct DataSpec {
    std::string source = "vision_gen";  // vision_gen | text_gen | cifar10 | none
    std::uint64_t seed = 0;
    std::size_t n_train = 256;
    std::size_t n_val = 64;
    std::size_t side = 8;
    std::size_t channels = 1;
    std::size_t n_classes = 4;
    double sigma = 0.3;
    std::size_t vocab = 32;
    std::size_t max_len = 12;
    std::size_t marker_count = 3;
    double marker_rate = 0.4;
    std::int32_t marker_base = 1;
    std::string train_path;
    std::string val_path;

    bool operator==(const DataSpec&) const = default;
};

struct ExperimentConfig {
    ModelConfig model;
    DataSpec data;
    DataSpec warmup = DataSpec{.source = "none"};
    TrainConfig train;
    std::string output_dir;
    std::string run_id = "run";

    bool operator==(const ExperimentConfig&) const = default;
};

namespace detail {

inline std::string format_value(const std::string& v) { return v; }

inline std::string format_value(bool v) { return v ? "true" : "false"; }

inline std::string format_value(double v) {
    char buf[32];
    auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), v);
    if (ec != std::errc()) throw ContractError("config: cannot format a double");
    return std::string(buf, end);
}

template <typename T>
    requires std::is_integral_v<T>
std::string format_value(T v) {
    return std::to_string(v);
}

template <typename T>
T parse_value(const std::string& key, const std::string& text) {
    auto fail = [&](const char* want) {
        throw ConfigError("config: key '" + key + "' expects " + want + ", got '" + text + "'");
    };
    if constexpr (std::is_same_v<T, std::string>) {
        return text;
    } else if constexpr (std::is_same_v<T, bool>) {
        if (text == "true") return true;
        if (text == "false") return false;
        fail("true or false");
        return false;
    } else {
        T v{};
        auto [end, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
        if (ec != std::errc() || end != text.data() + text.size())
            fail(std::is_floating_point_v<T> ? "a number" : "an integer");
        return v;
    }
}

inline std::string trim(const std::string& s) {
    auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

}  // namespace detail

struct ConfigField {
    std::string key;
    std::function<std::string(const ExperimentConfig&)> get;
    std::function<void(ExperimentConfig&, const std::string&)> set;
};

// Flat key schema, in serialization order. Every field of ExperimentConfig is listed.
inline const std::vector<ConfigField>& config_schema() {
    static const std::vector<ConfigField> schema = [] {
        std::vector<ConfigField> f;
        auto plain = [&f](const std::string& key, auto accessor) {
            using T = std::remove_reference_t<decltype(accessor(
                std::declval<ExperimentConfig&>()))>;
            f.push_back(
                {key,
                 [accessor](const ExperimentConfig& c) {
                     return detail::format_value(accessor(const_cast<ExperimentConfig&>(c)));
                 },
                 [key, accessor](ExperimentConfig& c, const std::string& v) {
                     accessor(c) = detail::parse_value<T>(key, v);
                 }});
        };
        auto named = [&f](const std::string& key, auto accessor, auto to_name, auto from_name) {
            f.push_back(
                {key,
                 [accessor, to_name](const ExperimentConfig& c) {
                     return to_name(accessor(const_cast<ExperimentConfig&>(c)));
                 },
                 [accessor, from_name](ExperimentConfig& c, const std::string& v) {
                     accessor(c) = from_name(v);
                 }});
        };
        auto data_section = [&](const std::string& prefix, auto section) {
            plain(prefix + ".source", [section](ExperimentConfig& c) -> auto& {
                return section(c).source;
            });
            plain(prefix + ".seed", [section](ExperimentConfig& c) -> auto& {
                return section(c).seed;
            });
            plain(prefix + ".n_train", [section](ExperimentConfig& c) -> auto& {
                return section(c).n_train;
            });
            plain(prefix + ".n_val", [section](ExperimentConfig& c) -> auto& {
                return section(c).n_val;
            });
            plain(prefix + ".side", [section](ExperimentConfig& c) -> auto& {
                return section(c).side;
            });
            plain(prefix + ".channels", [section](ExperimentConfig& c) -> auto& {
                return section(c).channels;
            });
            plain(prefix + ".n_classes", [section](ExperimentConfig& c) -> auto& {
                return section(c).n_classes;
            });
            plain(prefix + ".sigma", [section](ExperimentConfig& c) -> auto& {
                return section(c).sigma;
            });
            plain(prefix + ".vocab", [section](ExperimentConfig& c) -> auto& {
                return section(c).vocab;
            });
            plain(prefix + ".max_len", [section](ExperimentConfig& c) -> auto& {
                return section(c).max_len;
            });
            plain(prefix + ".marker_count", [section](ExperimentConfig& c) -> auto& {
                return section(c).marker_count;
            });
            plain(prefix + ".marker_rate", [section](ExperimentConfig& c) -> auto& {
                return section(c).marker_rate;
            });
            plain(prefix + ".marker_base", [section](ExperimentConfig& c) -> auto& {
                return section(c).marker_base;
            });
            plain(prefix + ".train_path", [section](ExperimentConfig& c) -> auto& {
                return section(c).train_path;
            });
            plain(prefix + ".val_path", [section](ExperimentConfig& c) -> auto& {
                return section(c).val_path;
            });
        };

        named(
            "model.kind", [](ExperimentConfig& c) -> auto& { return c.model.kind; },
            kind_name, kind_from_name);
        plain("model.depth", [](ExperimentConfig& c) -> auto& { return c.model.depth; });
        plain("model.d_model", [](ExperimentConfig& c) -> auto& { return c.model.d_model; });
        plain("model.n_heads", [](ExperimentConfig& c) -> auto& { return c.model.n_heads; });
        plain("model.d_ff", [](ExperimentConfig& c) -> auto& { return c.model.d_ff; });
        plain("model.n_classes", [](ExperimentConfig& c) -> auto& { return c.model.n_classes; });
        plain("model.side", [](ExperimentConfig& c) -> auto& { return c.model.side; });
        plain("model.channels", [](ExperimentConfig& c) -> auto& { return c.model.channels; });
        plain("model.patch", [](ExperimentConfig& c) -> auto& { return c.model.patch; });
        plain("model.vocab", [](ExperimentConfig& c) -> auto& { return c.model.vocab; });
        plain("model.max_len", [](ExperimentConfig& c) -> auto& { return c.model.max_len; });
        plain("model.dropout_rate",
              [](ExperimentConfig& c) -> auto& { return c.model.dropout_rate; });

        data_section("data", [](ExperimentConfig& c) -> DataSpec& { return c.data; });
        data_section("warmup", [](ExperimentConfig& c) -> DataSpec& { return c.warmup; });

        named(
            "train.mode", [](ExperimentConfig& c) -> auto& { return c.train.mode; },
            mode_name, mode_from_name);
        plain("train.epochs", [](ExperimentConfig& c) -> auto& { return c.train.epochs; });
        plain("train.batch_size",
              [](ExperimentConfig& c) -> auto& { return c.train.batch_size; });
        plain("train.seed", [](ExperimentConfig& c) -> auto& { return c.train.seed; });
        plain("train.p", [](ExperimentConfig& c) -> auto& { return c.train.p; });
        named(
            "train.scope", [](ExperimentConfig& c) -> auto& { return c.train.scope; },
            scope_name, scope_from_name);
        named(
            "train.optimizer.kind",
            [](ExperimentConfig& c) -> auto& { return c.train.optimizer.kind; },
            optimizer_name, optimizer_from_name);
        plain("train.optimizer.lr",
              [](ExperimentConfig& c) -> auto& { return c.train.optimizer.lr; });
        plain("train.optimizer.momentum",
              [](ExperimentConfig& c) -> auto& { return c.train.optimizer.momentum; });
        plain("train.optimizer.beta1",
              [](ExperimentConfig& c) -> auto& { return c.train.optimizer.beta1; });
        plain("train.optimizer.beta2",
              [](ExperimentConfig& c) -> auto& { return c.train.optimizer.beta2; });
        plain("train.optimizer.eps",
              [](ExperimentConfig& c) -> auto& { return c.train.optimizer.eps; });
        plain("train.optimizer.weight_decay",
              [](ExperimentConfig& c) -> auto& { return c.train.optimizer.weight_decay; });
        plain("train.detector.epsilon",
              [](ExperimentConfig& c) -> auto& { return c.train.detector.epsilon; });
        plain("train.detector.window",
              [](ExperimentConfig& c) -> auto& { return c.train.detector.window; });
        plain("train.detector.max_epochs",
              [](ExperimentConfig& c) -> auto& { return c.train.detector.max_epochs; });
        plain("train.warmup_epochs",
              [](ExperimentConfig& c) -> auto& { return c.train.warmup_epochs; });
        plain("train.eval_batch_size",
              [](ExperimentConfig& c) -> auto& { return c.train.eval_batch_size; });
        plain("train.rewind_to_start",
              [](ExperimentConfig& c) -> auto& { return c.train.rewind_to_start; });

        plain("output_dir", [](ExperimentConfig& c) -> auto& { return c.output_dir; });
        plain("run_id", [](ExperimentConfig& c) -> auto& { return c.run_id; });
        return f;
    }();
    return schema;
}

inline const ConfigField& config_field(const std::string& key) {
    for (const auto& f : config_schema())
        if (f.key == key) return f;
    throw ConfigError("config: unknown key '" + key + "'");
}

inline std::string serialize_config(const ExperimentConfig& cfg) {
    std::string out;
    for (const auto& f : config_schema()) {
        out += f.key;
        out += " = ";
        out += f.get(cfg);
        out += "\n";
    }
    return out;
}

inline ExperimentConfig parse_config_text(const std::string& text) {
    ExperimentConfig cfg;
    std::set<std::string> seen;
    std::istringstream in(text);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        std::string t = detail::trim(line);
        if (t.empty() || t[0] == '#') continue;
        auto eq = t.find('=');
        if (eq == std::string::npos)
            throw ConfigError("config: line " + std::to_string(lineno) +
                              " is not of the form 'key = value'");
        std::string key = detail::trim(t.substr(0, eq));
        std::string value = detail::trim(t.substr(eq + 1));
        if (!seen.insert(key).second)
            throw ConfigError("config: duplicate key '" + key + "'");
        config_field(key).set(cfg, value);
    }
    return cfg;
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("config: cannot read '" + path.string() + "'");
    std::ostringstream buf;
    buf << in.rdbuf();
    return parse_config_text(buf.str());
}

// Accepts "key=value" with an optional leading "--".
inline void apply_override(ExperimentConfig& cfg, const std::string& arg) {
    std::string t = arg;
    if (t.rfind("--", 0) == 0) t = t.substr(2);
    auto eq = t.find('=');
    if (eq == std::string::npos)
        throw ConfigError("config: override '" + arg + "' is not of the form key=value");
    config_field(detail::trim(t.substr(0, eq))).set(cfg, detail::trim(t.substr(eq + 1)));
}

inline void validate_experiment(const ExperimentConfig& cfg) {
    cfg.model.validate();
    cfg.train.validate();
    if (cfg.run_id.empty() || cfg.run_id.find('/') != std::string::npos)
        throw ConfigError("config: run_id must be a nonempty path component");
}

inline Dataset make_dataset(const DataSpec& d) {
    if (d.source == "vision_gen") {
        VisionGenConfig g;
        g.seed = d.seed;
        g.n_train = d.n_train;
        g.n_val = d.n_val;
        g.side = d.side;
        g.channels = d.channels;
        g.n_classes = d.n_classes;
        g.sigma = d.sigma;
        return gen_vision(g);
    }
    if (d.source == "text_gen") {
        TextGenConfig g;
        g.seed = d.seed;
        g.n_train = d.n_train;
        g.n_val = d.n_val;
        g.vocab = d.vocab;
        g.max_len = d.max_len;
        g.n_classes = d.n_classes;
        g.marker_count = d.marker_count;
        g.marker_rate = d.marker_rate;
        g.marker_base = d.marker_base;
        return gen_text(g);
    }
    if (d.source == "cifar10") {
        if (d.train_path.empty() || d.val_path.empty())
            throw ConfigError("data: cifar10 needs data.train_path and data.val_path");
        return load_cifar10(d.train_path, d.val_path);
    }
    throw ConfigError("data: unknown source '" + d.source + "'");
}

}  // namespace ebkit
