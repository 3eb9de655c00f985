// SPDX-License-Identifier: Apache-2.0
//
// Magnitude pruning: mask computation over the prunable parameters, mask
// application with a frozen-at-zero contract, and the normalized Hamming
// distance between masks.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "ebkit/errors.hpp"
#include "ebkit/model.hpp"

namespace ebkit {

enum class PruneScope { PerLayer, Global };

inline std::string scope_name(PruneScope s) {
    return s == PruneScope::PerLayer ? "per_layer" : "global";
}

inline PruneScope scope_from_name(const std::string& s) {
    if (s == "per_layer") return PruneScope::PerLayer;
    if (s == "global") return PruneScope::Global;
    throw ConfigError("unknown prune scope '" + s + "'");
}

struct PruneMask {
    double p = 0.0;
    std::size_t epoch = 0;
    PruneScope scope = PruneScope::PerLayer;
    std::map<std::string, std::vector<std::uint8_t>> entries;  // 1 kept, 0 pruned

    std::size_t total_elements() const {
        std::size_t n = 0;
        for (const auto& [name, bits] : entries) n += bits.size();
        return n;
    }
    std::size_t total_pruned() const {
        std::size_t n = 0;
        for (const auto& [name, bits] : entries)
            n += static_cast<std::size_t>(std::count(bits.begin(), bits.end(), 0));
        return n;
    }
};

namespace detail {

inline std::size_t prune_count(double p, std::size_t n) {
    double k = std::floor(p * static_cast<double>(n));
    return std::min(n, static_cast<std::size_t>(k));
}

}  // namespace detail

// Smallest-magnitude selection; ties break toward the lower flat index
// (and, under global scope, toward the earlier parameter). The model is
// not modified.
template <typename S>
PruneMask compute_mask(const Model<S>& m, double p, PruneScope scope = PruneScope::PerLayer,
                       std::size_t epoch = 0) {
    if (!(p >= 0.0 && p <= 1.0))
        throw DomainError("compute_mask: p must lie in [0,1], got " + std::to_string(p));
    PruneMask mask;
    mask.p = p;
    mask.epoch = epoch;
    mask.scope = scope;
    for (const auto& param : m.parameters)
        if (param.prunable)
            mask.entries.emplace(param.name,
                                 std::vector<std::uint8_t>(param.tensor.size(), 1));

    if (scope == PruneScope::PerLayer) {
        for (const auto& param : m.parameters) {
            if (!param.prunable) continue;
            auto w = param.tensor.data();
            std::size_t n = w.size();
            std::size_t k = detail::prune_count(p, n);
            if (k == 0) continue;
            std::vector<std::size_t> order(n);
            for (std::size_t i = 0; i < n; ++i) order[i] = i;
            std::nth_element(order.begin(), order.begin() + (k - 1), order.end(),
                             [&](std::size_t a, std::size_t b) {
                                 double ma = std::abs(static_cast<double>(w[a]));
                                 double mb = std::abs(static_cast<double>(w[b]));
                                 return ma != mb ? ma < mb : a < b;
                             });
            auto& bits = mask.entries.at(param.name);
            for (std::size_t i = 0; i < k; ++i) bits[order[i]] = 0;
        }
        return mask;
    }

    // global: joint ranking across all prunable elements
    std::vector<std::pair<double, std::pair<std::size_t, std::size_t>>> pool;
    std::vector<const std::string*> names;
    std::size_t param_order = 0;
    for (const auto& param : m.parameters) {
        if (!param.prunable) continue;
        auto w = param.tensor.data();
        names.push_back(&param.name);
        for (std::size_t i = 0; i < w.size(); ++i)
            pool.push_back({std::abs(static_cast<double>(w[i])), {param_order, i}});
        ++param_order;
    }
    std::size_t k = detail::prune_count(p, pool.size());
    if (k > 0) {
        std::nth_element(pool.begin(), pool.begin() + (k - 1), pool.end());
        for (std::size_t i = 0; i < k; ++i) {
            auto [ord, idx] = pool[i].second;
            mask.entries.at(*names[ord])[idx] = 0;
        }
    }
    return mask;
}

namespace detail {

template <typename S>
void check_mask_coverage(const Model<S>& m, const PruneMask& mask) {
    std::size_t prunable = 0;
    for (const auto& param : m.parameters) {
        if (!param.prunable) continue;
        ++prunable;
        auto it = mask.entries.find(param.name);
        if (it == mask.entries.end())
            throw MaskError("mask missing entry for '" + param.name + "'");
        if (it->second.size() != param.tensor.size())
            throw MaskError("mask entry '" + param.name + "' has " +
                            std::to_string(it->second.size()) + " elements, parameter has " +
                            std::to_string(param.tensor.size()));
    }
    if (mask.entries.size() != prunable)
        throw MaskError("mask covers " + std::to_string(mask.entries.size()) +
                        " parameters, model has " + std::to_string(prunable) + " prunable");
}

}  // namespace detail

// Zeroes masked weights and tags the model so the trainer can keep them at
// zero after every optimizer step. Idempotent.
template <typename S>
void apply_mask(Model<S>& m, const PruneMask& mask) {
    detail::check_mask_coverage(m, mask);
    for (auto& param : m.parameters) {
        if (!param.prunable) continue;
        const auto& bits = mask.entries.at(param.name);
        auto w = param.tensor.mutable_data();
        for (std::size_t i = 0; i < w.size(); ++i)
            if (bits[i] == 0) w[i] = S(0);
    }
    m.active_mask = std::make_shared<const PruneMask>(mask);
}

// Frozen-at-zero upkeep; both are no-ops without an active mask.
template <typename S>
void zero_masked_weights(Model<S>& m) {
    if (!m.active_mask) return;
    for (auto& param : m.parameters) {
        if (!param.prunable) continue;
        const auto& bits = m.active_mask->entries.at(param.name);
        auto w = param.tensor.mutable_data();
        for (std::size_t i = 0; i < w.size(); ++i)
            if (bits[i] == 0) w[i] = S(0);
    }
}

template <typename S>
void zero_masked_grads(Model<S>& m) {
    if (!m.active_mask) return;
    for (auto& param : m.parameters) {
        if (!param.prunable || !param.tensor.has_grad()) continue;
        const auto& bits = m.active_mask->entries.at(param.name);
        auto g = param.tensor.grad();
        for (std::size_t i = 0; i < g.size(); ++i)
            if (bits[i] == 0) g[i] = S(0);
    }
}

// Normalized Hamming distance between two masks of identical coverage.
inline double mask_distance(const PruneMask& a, const PruneMask& b) {
    if (a.p != b.p)
        throw MaskError("mask_distance: ratios differ (" + std::to_string(a.p) + " vs " +
                        std::to_string(b.p) + ")");
    if (a.entries.size() != b.entries.size())
        throw MaskError("mask_distance: parameter coverage differs");
    std::size_t total = 0;
    std::size_t differ = 0;
    auto ia = a.entries.begin();
    auto ib = b.entries.begin();
    for (; ia != a.entries.end(); ++ia, ++ib) {
        if (ia->first != ib->first || ia->second.size() != ib->second.size())
            throw MaskError("mask_distance: parameter coverage differs at '" + ia->first + "'");
        total += ia->second.size();
        for (std::size_t i = 0; i < ia->second.size(); ++i)
            if (ia->second[i] != ib->second[i]) ++differ;
    }
    return total == 0 ? 0.0 : static_cast<double>(differ) / static_cast<double>(total);
}

struct SparsityEntry {
    std::string name;
    std::size_t kept = 0;
    std::size_t pruned = 0;
};

struct SparsityReport {
    std::vector<SparsityEntry> per_tensor;
    std::size_t total_kept = 0;
    std::size_t total_pruned = 0;
};

inline SparsityReport sparsity_report(const PruneMask& mask) {
    SparsityReport r;
    for (const auto& [name, bits] : mask.entries) {
        SparsityEntry e;
        e.name = name;
        for (std::uint8_t b : bits)
            b ? ++e.kept : ++e.pruned;
        r.total_kept += e.kept;
        r.total_pruned += e.pruned;
        r.per_tensor.push_back(std::move(e));
    }
    return r;
}

}  // namespace ebkit
