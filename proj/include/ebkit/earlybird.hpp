// SPDX-License-Identifier: Apache-2.0
//
// Early-bird detection over the per-epoch mask sequence: a state machine
// that fires at the first run of sub-threshold consecutive mask distances,
// plus the pairwise-distance heatmap.
#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "ebkit/errors.hpp"
#include "ebkit/model.hpp"
#include "ebkit/pruning.hpp"

namespace ebkit {

struct DetectorConfig {
    double epsilon = 0.1;
    std::size_t window = 1;  // consecutive sub-epsilon distances required
    std::size_t max_epochs = 30;

    void validate() const {
        if (!(epsilon > 0.0 && epsilon < 1.0))
            throw ConfigError("detector: epsilon must lie in (0,1), got " +
                              std::to_string(epsilon));
        if (window == 0) throw ConfigError("detector: window must be at least 1");
        if (max_epochs == 0) throw ConfigError("detector: max_epochs must be at least 1");
    }

    bool operator==(const DetectorConfig&) const = default;
};

// Threshold defaults per modality.
inline double default_epsilon(ModelKind kind) {
    return kind == ModelKind::EncoderVision ? 0.1 : 0.01;
}

enum class Outcome { Searching, Found };

struct DetectorState {
    DetectorConfig config;
    std::vector<PruneMask> masks;    // masks[i] observed at epoch i+1
    std::vector<double> distances;   // distances[i] = d(mask at i+2, mask at i+1)
    bool found = false;
    std::size_t ticket_epoch = 0;
    PruneMask ticket;

    explicit DetectorState(DetectorConfig cfg) : config(cfg) { config.validate(); }

    Outcome outcome() const { return found ? Outcome::Found : Outcome::Searching; }
};

// Feeds one epoch's mask. Epochs must arrive as 1, 2, 3, ...; the distance
// at epoch t compares against epoch t-1. Once found, the outcome and ticket
// are frozen while observation continues (history still accumulates).
inline Outcome observe(DetectorState& st, std::size_t epoch, const PruneMask& mask) {
    std::size_t expected = st.masks.size() + 1;
    if (epoch != expected)
        throw SequencingError("detector: expected epoch " + std::to_string(expected) +
                              ", got " + std::to_string(epoch));
    if (!st.masks.empty()) st.distances.push_back(mask_distance(st.masks.back(), mask));
    st.masks.push_back(mask);

    if (!st.found && st.distances.size() >= st.config.window) {
        bool fire = true;
        for (std::size_t i = st.distances.size() - st.config.window; i < st.distances.size();
             ++i)
            if (st.distances[i] >= st.config.epsilon) fire = false;
        if (fire) {
            st.found = true;
            st.ticket_epoch = epoch;
            st.ticket = mask;
        }
    }
    return st.outcome();
}

// Batch form of the firing rule; series[i] is the distance at epoch i+2.
// Returns the firing epoch, or nullopt if the rule never fires.
inline std::optional<std::size_t> detect_offline(const std::vector<double>& series,
                                                 const DetectorConfig& config) {
    config.validate();
    for (std::size_t i = 0; i < series.size(); ++i) {
        if (i + 1 < config.window) continue;
        bool fire = true;
        for (std::size_t j = i + 1 - config.window; j <= i; ++j)
            if (series[j] >= config.epsilon) fire = false;
        if (fire) return i + 2;
    }
    return std::nullopt;
}

// Pairwise mask-distance matrix; symmetric with a zero diagonal.
inline std::vector<std::vector<double>> heatmap(const std::vector<PruneMask>& masks) {
    if (masks.empty()) throw ContractError("heatmap: need at least one mask");
    std::size_t n = masks.size();
    std::vector<std::vector<double>> d(n, std::vector<double>(n, 0.0));
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j) {
            double v = mask_distance(masks[i], masks[j]);
            d[i][j] = v;
            d[j][i] = v;
        }
    return d;
}

}  // namespace ebkit
