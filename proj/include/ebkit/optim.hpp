// SPDX-License-Identifier: Apache-2.0
//
// SGD with momentum and AdamW (bias-corrected, decoupled weight decay).
// Per-element math runs in double regardless of the parameter type, and
// beta powers are tracked by running products, so updates are reproducible
// across platforms.
#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "ebkit/errors.hpp"
#include "ebkit/model.hpp"

namespace ebkit {

enum class OptimizerKind { Sgd, AdamW };

inline std::string optimizer_name(OptimizerKind k) {
    return k == OptimizerKind::Sgd ? "sgd" : "adamw";
}

inline OptimizerKind optimizer_from_name(const std::string& s) {
    if (s == "sgd") return OptimizerKind::Sgd;
    if (s == "adamw") return OptimizerKind::AdamW;
    throw ConfigError("unknown optimizer '" + s + "'");
}

struct OptimizerConfig {
    OptimizerKind kind = OptimizerKind::Sgd;
    double lr = 0.1;
    double momentum = 0.0;  // sgd only
    double beta1 = 0.9;     // adamw
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;

    bool operator==(const OptimizerConfig&) const = default;
};

template <typename S>
struct OptimizerState {
    OptimizerConfig config;
    std::size_t step_count = 0;

    explicit OptimizerState(OptimizerConfig cfg = {}) : config(cfg) {}

    // lazily sized on the first step; one slot pair per parameter
    std::vector<std::vector<double>> moment1;
    std::vector<std::vector<double>> moment2;
    double beta1_pow = 1.0;
    double beta2_pow = 1.0;
};

// One update over every model parameter from its gradient buffer.
template <typename S>
void optimizer_step(OptimizerState<S>& st, Model<S>& m) {
    const OptimizerConfig& cfg = st.config;
    if (st.moment1.empty()) {
        st.moment1.resize(m.parameters.size());
        st.moment2.resize(m.parameters.size());
        for (std::size_t i = 0; i < m.parameters.size(); ++i) {
            st.moment1[i].assign(m.parameters[i].tensor.size(), 0.0);
            if (cfg.kind == OptimizerKind::AdamW)
                st.moment2[i].assign(m.parameters[i].tensor.size(), 0.0);
        }
    }
    if (st.moment1.size() != m.parameters.size())
        throw ContractError("optimizer_step: state was built for a different model");

    ++st.step_count;
    if (cfg.kind == OptimizerKind::AdamW) {
        st.beta1_pow *= cfg.beta1;
        st.beta2_pow *= cfg.beta2;
    }
    double corr1 = 1.0 - st.beta1_pow;
    double corr2 = 1.0 - st.beta2_pow;

    for (std::size_t i = 0; i < m.parameters.size(); ++i) {
        auto w = m.parameters[i].tensor.mutable_data();
        auto g = m.parameters[i].tensor.grad();
        if (st.moment1[i].size() != w.size())
            throw ContractError("optimizer_step: parameter '" + m.parameters[i].name +
                                "' changed size");
        if (cfg.kind == OptimizerKind::Sgd) {
            auto& vel = st.moment1[i];
            for (std::size_t j = 0; j < w.size(); ++j) {
                vel[j] = cfg.momentum * vel[j] + static_cast<double>(g[j]);
                w[j] = static_cast<S>(static_cast<double>(w[j]) - cfg.lr * vel[j]);
            }
        } else {
            auto& m1 = st.moment1[i];
            auto& m2 = st.moment2[i];
            for (std::size_t j = 0; j < w.size(); ++j) {
                double grad = static_cast<double>(g[j]);
                m1[j] = cfg.beta1 * m1[j] + (1.0 - cfg.beta1) * grad;
                m2[j] = cfg.beta2 * m2[j] + (1.0 - cfg.beta2) * grad * grad;
                double mhat = m1[j] / corr1;
                double vhat = m2[j] / corr2;
                double next = static_cast<double>(w[j]) * (1.0 - cfg.lr * cfg.weight_decay) -
                              cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
                w[j] = static_cast<S>(next);
            }
        }
    }
}

}  // namespace ebkit
