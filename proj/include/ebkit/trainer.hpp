// SPDX-License-Identifier: Apache-2.0
//
// Seeded training/evaluation loops and the two-stage pipeline: search for
// an early-bird ticket while tracking per-epoch masks, rewind, retrain
// under the frozen mask, and train an unpruned baseline for comparison.
#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "ebkit/data.hpp"
#include "ebkit/earlybird.hpp"
#include "ebkit/errors.hpp"
#include "ebkit/model.hpp"
#include "ebkit/optim.hpp"
#include "ebkit/pruning.hpp"
#include "ebkit/rng.hpp"
#include "ebkit/tensor.hpp"

namespace ebkit {

enum class TrainMode { VisionFullTrain, LanguageFinetune };

inline std::string mode_name(TrainMode m) {
    return m == TrainMode::VisionFullTrain ? "vision_full_train" : "language_finetune";
}

inline TrainMode mode_from_name(const std::string& s) {
    if (s == "vision_full_train") return TrainMode::VisionFullTrain;
    if (s == "language_finetune") return TrainMode::LanguageFinetune;
    throw ConfigError("unknown train mode '" + s + "'");
}

struct TrainConfig {
    TrainMode mode = TrainMode::VisionFullTrain;
    std::size_t epochs = 10;  // retrain and baseline budget
    std::size_t batch_size = 16;
    OptimizerConfig optimizer;
    std::uint64_t seed = 0;
    double p = 0.1;
    PruneScope scope = PruneScope::PerLayer;
    DetectorConfig detector;
    std::size_t warmup_epochs = 3;  // language mode pretraining stand-in
    std::size_t eval_batch_size = 64;
    bool rewind_to_start = true;  // false: retrain from a fresh init instead

    void validate() const {
        if (epochs < 1) throw ConfigError("train: epochs must be at least 1");
        if (batch_size < 1 || eval_batch_size < 1)
            throw ConfigError("train: batch sizes must be at least 1");
        if (!(optimizer.lr > 0.0)) throw ConfigError("train: lr must be positive");
        if (!(p >= 0.0 && p <= 1.0)) throw ConfigError("train: p must lie in [0,1]");
        detector.validate();
    }

    bool operator==(const TrainConfig&) const = default;
};

struct EpochMetrics {
    std::size_t epoch = 0;
    double train_loss = 0.0;
    double train_accuracy = 0.0;
    double val_loss = 0.0;
    double val_accuracy = 0.0;
    std::optional<double> mask_distance;  // search stage, epochs >= 2

    bool operator==(const EpochMetrics&) const = default;
};

struct MemoryReport {
    std::size_t dense_bytes = 0;
    std::size_t kept_payload_bytes = 0;
    std::size_t index_overhead_bytes = 0;
    double percent_change = 0.0;
};

inline double memory_percent_change(double dense_bytes, double kept_payload_bytes) {
    if (dense_bytes == 0.0) return 0.0;
    return (kept_payload_bytes - dense_bytes) / dense_bytes * 100.0;
}

// Payload accounting for a mask: masked tensors store their kept elements
// (plus one 4-byte index per kept element, reported separately); tensors
// outside the mask stay dense.
template <typename S>
MemoryReport memory_report(const Model<S>& m, const PruneMask& mask) {
    detail::check_mask_coverage(m, mask);
    MemoryReport r;
    std::size_t width = sizeof(S);
    for (const auto& param : m.parameters) {
        std::size_t n = param.tensor.size();
        r.dense_bytes += n * width;
        auto it = mask.entries.find(param.name);
        if (it == mask.entries.end()) {
            r.kept_payload_bytes += n * width;
            continue;
        }
        std::size_t kept = 0;
        for (std::uint8_t b : it->second)
            if (b) ++kept;
        r.kept_payload_bytes += kept * width;
        if (kept < n) r.index_overhead_bytes += 4 * kept;
    }
    r.percent_change = memory_percent_change(static_cast<double>(r.dense_bytes),
                                             static_cast<double>(r.kept_payload_bytes));
    return r;
}

// --- evaluation ------------------------------------------------------------------

// First index wins ties, matching a left-to-right max scan.
template <typename S>
std::size_t argmax_row(std::span<const S> row) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < row.size(); ++i)
        if (row[i] > row[best]) best = i;
    return best;
}

// Accumulates summed negative log-likelihood and correct predictions from
// one batch of logits.
template <typename S>
void accumulate_eval(const Tensor<S>& logits, const std::vector<std::int32_t>& labels,
                     double& nll_sum, std::size_t& correct) {
    NoGradGuard guard;
    auto loss = cross_entropy(logits, labels);
    nll_sum += static_cast<double>(loss.item()) * static_cast<double>(labels.size());
    auto span = logits.data();
    std::size_t classes = logits.shape().back();
    for (std::size_t i = 0; i < labels.size(); ++i) {
        auto row = span.subspan(i * classes, classes);
        if (argmax_row(row) == static_cast<std::size_t>(labels[i])) ++correct;
    }
}

// Mean loss and argmax accuracy over a split. Does not mutate parameters.
template <typename S>
std::pair<double, double> evaluate(Model<S>& m, const Dataset& ds, Split split,
                                   std::size_t batch_size = 64) {
    if (ds.split_size(split) == 0) throw DomainError("evaluate: empty dataset split");
    NoGradGuard guard;
    double nll_sum = 0.0;
    std::size_t correct = 0;
    for (const auto& idx : sequential_batches(ds, split, batch_size)) {
        Tensor<S> logits = ds.kind == DataKind::Vision
                               ? forward(m, make_image_batch<S>(ds, idx))
                               : forward(m, make_token_batch(ds, idx));
        accumulate_eval(logits, batch_labels(ds, idx), nll_sum, correct);
    }
    double n = static_cast<double>(ds.split_size(split));
    return {nll_sum / n, static_cast<double>(correct) / n};
}

// --- training --------------------------------------------------------------------

// One seeded-shuffled pass over the train split: forward, cross-entropy,
// backward, optimizer step per batch, with masked weights and gradients
// re-zeroed around every step while a mask is active. Train metrics use
// each batch's pre-step logits; val metrics come from a full eval pass.
template <typename S>
EpochMetrics train_epoch(Model<S>& m, const Dataset& ds, OptimizerState<S>& opt,
                         const TrainConfig& cfg, std::size_t epoch) {
    auto order = batches(ds, Split::Train, cfg.batch_size, cfg.seed, epoch);
    if (order.empty()) throw DomainError("train_epoch: empty training split");

    double nll_sum = 0.0;
    std::size_t correct = 0;
    std::size_t seen = 0;
    std::size_t batch_idx = 0;
    try {
        for (const auto& idx : order) {
            ForwardOptions fo;
            fo.train = true;
            fo.dropout_key = stream_key(cfg.seed, "dropout", epoch * 1000000 + batch_idx);
            Tensor<S> logits = ds.kind == DataKind::Vision
                                   ? forward(m, make_image_batch<S>(ds, idx), fo)
                                   : forward(m, make_token_batch(ds, idx), fo);
            auto labels = batch_labels(ds, idx);
            auto loss = cross_entropy(logits, labels);
            double lv = static_cast<double>(loss.item());
            if (!std::isfinite(lv))
                throw DivergenceError("non-finite loss at epoch " + std::to_string(epoch),
                                      static_cast<int>(epoch));
            accumulate_eval(logits, labels, nll_sum, correct);
            seen += labels.size();

            backward(loss);
            zero_masked_grads(m);
            optimizer_step(opt, m);
            zero_masked_weights(m);
            for (auto& param : m.parameters) param.tensor.clear_grad();
            ++batch_idx;
        }
    } catch (const NumericsError& e) {
        Tape<S>::current().clear();
        throw DivergenceError(std::string(e.what()) + " at epoch " + std::to_string(epoch),
                              static_cast<int>(epoch));
    }

    EpochMetrics em;
    em.epoch = epoch;
    em.train_loss = nll_sum / static_cast<double>(seen);
    em.train_accuracy = static_cast<double>(correct) / static_cast<double>(seen);
    std::tie(em.val_loss, em.val_accuracy) = evaluate(m, ds, Split::Val, cfg.eval_batch_size);
    return em;
}

// --- pipeline --------------------------------------------------------------------

struct RunReport {
    std::string status = "ok";  // "ok" or "diverged"
    bool ticket_found = false;
    std::optional<std::size_t> ticket_epoch;  // empty: fallback to the final mask
    std::size_t search_epochs = 0;
    std::size_t retrain_epochs = 0;
    std::size_t baseline_epochs = 0;
    std::vector<EpochMetrics> search_curve;
    std::vector<EpochMetrics> retrain_curve;
    std::vector<EpochMetrics> baseline_curve;
    std::vector<double> distance_series;  // index i is the distance at epoch i+2
    std::vector<std::vector<double>> heatmap_matrix;
    MemoryReport memory;
    double baseline_accuracy = 0.0;
    double pruned_accuracy = 0.0;
    double accuracy_delta = 0.0;
    std::string divergence_message;
    int diverged_epoch = 0;
};

template <typename S>
struct PipelineResult {
    RunReport report;
    Model<S> theta_start;
    Model<S> pruned;
    Model<S> baseline;
    PruneMask ticket;
    std::vector<PruneMask> mask_history;
};

// Stage B starting point: rewound start weights under the ticket mask.
template <typename S>
Model<S> rewind_with_mask(const Model<S>& theta_start, const PruneMask& ticket) {
    Model<S> m = theta_start.clone();
    apply_mask(m, ticket);
    return m;
}

namespace detail {

inline void check_pipeline_data(const ModelConfig& mc, const TrainConfig& tc,
                                const Dataset& data, const Dataset* warmup) {
    bool vision = tc.mode == TrainMode::VisionFullTrain;
    if (vision != (mc.kind == ModelKind::EncoderVision))
        throw ConfigError("pipeline: train mode does not match model kind");
    if (vision != (data.kind == DataKind::Vision))
        throw ConfigError("pipeline: dataset kind does not match train mode");
    if (data.n_classes != mc.n_classes)
        throw ConfigError("pipeline: dataset has " + std::to_string(data.n_classes) +
                          " classes, model expects " + std::to_string(mc.n_classes));
    if (vision && warmup)
        throw ConfigError("pipeline: warmup dataset is only valid in language_finetune mode");
    if (!vision) {
        if (!warmup)
            throw ConfigError("pipeline: language_finetune requires a warmup dataset");
        if (warmup->kind != DataKind::Text)
            throw ConfigError("pipeline: warmup dataset must be text");
    }
    if (data.split_size(Split::Train) == 0 || data.split_size(Split::Val) == 0)
        throw ConfigError("pipeline: dataset needs non-empty train and val splits");
}

}  // namespace detail

// The full two-stage run: search with per-epoch masks and the detector,
// rewind + masked retrain, and an unpruned baseline from the same start.
// Divergence in any stage yields a report with status "diverged" instead
// of an exception.
template <typename S = float>
PipelineResult<S> run_pipeline(const ModelConfig& mc, const TrainConfig& tc, const Dataset& data,
                               const Dataset* warmup = nullptr) {
    mc.validate();
    tc.validate();
    detail::check_pipeline_data(mc, tc, data, warmup);

    PipelineResult<S> res;
    RunReport& rep = res.report;

    auto diverged = [&](const DivergenceError& e) -> PipelineResult<S> {
        rep.status = "diverged";
        rep.divergence_message = e.what();
        rep.diverged_epoch = e.epoch;
        return std::move(res);
    };

    // theta_start: fresh init, plus a warm-up phase in language mode
    Model<S> start = build<S>(mc, tc.seed);
    if (tc.mode == TrainMode::LanguageFinetune && tc.warmup_epochs > 0) {
        TrainConfig wcfg = tc;
        wcfg.seed = stream_key(tc.seed, "warmup");
        OptimizerState<S> wopt(tc.optimizer);
        try {
            for (std::size_t e = 1; e <= tc.warmup_epochs; ++e)
                train_epoch(start, *warmup, wopt, wcfg, e);
        } catch (const DivergenceError& e) {
            return diverged(e);
        }
    }
    res.theta_start = start.clone();

    // Stage A: search
    Model<S> search_model = start.clone();
    OptimizerState<S> search_opt(tc.optimizer);
    DetectorState det(tc.detector);
    try {
        for (std::size_t e = 1; e <= tc.detector.max_epochs; ++e) {
            EpochMetrics em = train_epoch(search_model, data, search_opt, tc, e);
            PruneMask mask = compute_mask(search_model, tc.p, tc.scope, e);
            observe(det, e, mask);
            if (!det.distances.empty() && e >= 2) em.mask_distance = det.distances.back();
            rep.search_curve.push_back(em);
            if (det.found) break;
        }
    } catch (const DivergenceError& e) {
        return diverged(e);
    }
    rep.search_epochs = det.masks.size();
    rep.distance_series = det.distances;
    if (!det.masks.empty()) rep.heatmap_matrix = heatmap(det.masks);
    res.mask_history = det.masks;
    rep.ticket_found = det.found;
    if (det.found) {
        rep.ticket_epoch = det.ticket_epoch;
        res.ticket = det.ticket;
    } else {
        res.ticket = det.masks.back();  // fallback: final-epoch mask, not early
    }

    // Stage B: rewind (or fresh init) and retrain under the frozen mask
    Model<S> pruned = tc.rewind_to_start
                          ? rewind_with_mask(res.theta_start, res.ticket)
                          : [&] {
                                Model<S> f = build<S>(mc, stream_key(tc.seed, "fresh_init"));
                                apply_mask(f, res.ticket);
                                return f;
                            }();
    OptimizerState<S> retrain_opt(tc.optimizer);
    try {
        for (std::size_t e = 1; e <= tc.epochs; ++e)
            rep.retrain_curve.push_back(train_epoch(pruned, data, retrain_opt, tc, e));
    } catch (const DivergenceError& e) {
        return diverged(e);
    }
    rep.retrain_epochs = rep.retrain_curve.size();

    // Stage C: unpruned baseline from the same start
    Model<S> baseline = res.theta_start.clone();
    OptimizerState<S> base_opt(tc.optimizer);
    try {
        for (std::size_t e = 1; e <= tc.epochs; ++e)
            rep.baseline_curve.push_back(train_epoch(baseline, data, base_opt, tc, e));
    } catch (const DivergenceError& e) {
        return diverged(e);
    }
    rep.baseline_epochs = rep.baseline_curve.size();

    auto [base_loss, base_acc] = evaluate(baseline, data, Split::Val, tc.eval_batch_size);
    auto [pruned_loss, pruned_acc] = evaluate(pruned, data, Split::Val, tc.eval_batch_size);
    rep.baseline_accuracy = base_acc;
    rep.pruned_accuracy = pruned_acc;
    rep.accuracy_delta = pruned_acc - base_acc;
    rep.memory = memory_report(pruned, res.ticket);

    res.pruned = std::move(pruned);
    res.baseline = std::move(baseline);
    return res;
}

}  // namespace ebkit
