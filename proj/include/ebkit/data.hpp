// SPDX-License-Identifier: Apache-2.0
//
// Deterministic dataset construction: synthetic vision/text generators and
// a reader for the CIFAR-10 binary layout. All randomness flows through the
// counter RNG (rng.hpp), so a (seed, parameters) pair pins every byte.
#pragma once

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include "ebkit/archive.hpp"
#include "ebkit/errors.hpp"
#include "ebkit/fsio.hpp"
#include "ebkit/rng.hpp"
#include "ebkit/tensor.hpp"

namespace ebkit {

enum class DataKind { Vision, Text };

enum class Split { Train, Val };

struct Dataset {
    DataKind kind = DataKind::Vision;
    std::size_t n_classes = 0;

    // vision samples: flat pixel rows of shape image_shape, values in [0,1]
    Shape image_shape;  // {channels, side, side}
    std::vector<std::vector<float>> images;

    // text samples: fixed-length id rows, padded with kPadId
    std::size_t max_len = 0;
    std::vector<std::vector<std::int32_t>> tokens;

    std::vector<std::int32_t> labels;
    std::size_t train_count = 0;  // [0, train_count) train, rest val

    std::size_t size() const { return labels.size(); }
    std::size_t split_begin(Split s) const { return s == Split::Train ? 0 : train_count; }
    std::size_t split_end(Split s) const { return s == Split::Train ? train_count : size(); }
    std::size_t split_size(Split s) const { return split_end(s) - split_begin(s); }
};

inline constexpr std::int32_t kPadId = 0;

// --- synthetic vision ------------------------------------------------------------
//
// Each class has a fixed uniform-[0,1) template image; samples add
// Irwin-Hall noise (sigma) and clamp back to [0,1]. Labels cycle through
// the classes, so every split is balanced up to rounding.

struct VisionGenConfig {
    std::uint64_t seed = 0;
    std::size_t n_train = 0;
    std::size_t n_val = 0;
    std::size_t side = 8;
    std::size_t channels = 1;
    std::size_t n_classes = 4;
    double sigma = 0.3;
};

inline std::vector<std::vector<float>> vision_class_templates(const VisionGenConfig& cfg) {
    std::size_t dim = cfg.channels * cfg.side * cfg.side;
    std::vector<std::vector<float>> templates(cfg.n_classes);
    for (std::size_t c = 0; c < cfg.n_classes; ++c) {
        CounterRng rng(stream_key(cfg.seed, "vision.template", c));
        templates[c].resize(dim);
        for (float& v : templates[c]) v = static_cast<float>(rng.next_unit());
    }
    return templates;
}

inline Dataset gen_vision(const VisionGenConfig& cfg) {
    if (cfg.side == 0 || cfg.channels == 0 || cfg.n_classes < 2)
        throw DataError("gen_vision: need side > 0, channels > 0 and at least two classes");
    if (cfg.sigma < 0) throw DataError("gen_vision: sigma must be non-negative");

    Dataset ds;
    ds.kind = DataKind::Vision;
    ds.n_classes = cfg.n_classes;
    ds.image_shape = {cfg.channels, cfg.side, cfg.side};
    ds.train_count = cfg.n_train;

    auto templates = vision_class_templates(cfg);
    std::size_t total = cfg.n_train + cfg.n_val;
    std::size_t dim = numel(ds.image_shape);
    ds.images.reserve(total);
    ds.labels.reserve(total);
    for (std::size_t i = 0; i < total; ++i) {
        std::int32_t label = static_cast<std::int32_t>(i % cfg.n_classes);
        CounterRng rng(stream_key(cfg.seed, "vision.noise", i));
        std::vector<float> pixels(dim);
        const std::vector<float>& base = templates[static_cast<std::size_t>(label)];
        for (std::size_t j = 0; j < dim; ++j) {
            double v = static_cast<double>(base[j]) + cfg.sigma * rng.next_normal();
            pixels[j] = static_cast<float>(std::clamp(v, 0.0, 1.0));
        }
        ds.images.push_back(std::move(pixels));
        ds.labels.push_back(label);
    }
    return ds;
}

// --- synthetic text -------------------------------------------------------------
//
// Class-conditional unigram sequences. Each class owns marker_count token
// ids starting at marker_base; a content position is a class marker with
// probability marker_rate, otherwise a background token drawn uniformly
// from the non-pad, non-marker ids. Sequence length varies in
// [ceil(max_len/2), max_len]; the tail is padded with id 0.

struct TextGenConfig {
    std::uint64_t seed = 0;
    std::size_t n_train = 0;
    std::size_t n_val = 0;
    std::size_t vocab = 32;
    std::size_t max_len = 12;
    std::size_t n_classes = 2;
    std::size_t marker_count = 3;
    double marker_rate = 0.4;
    std::int32_t marker_base = 1;
};

inline Dataset gen_text(const TextGenConfig& cfg) {
    if (cfg.n_classes < 2 || cfg.max_len == 0 || cfg.marker_count == 0)
        throw DataError("gen_text: need at least two classes, max_len > 0, marker_count > 0");
    std::size_t marker_span = cfg.n_classes * cfg.marker_count;
    if (cfg.vocab <= marker_span)
        throw DataError("gen_text: vocab must exceed n_classes * marker_count");
    std::size_t marker_lo = static_cast<std::size_t>(cfg.marker_base);
    std::size_t marker_hi = marker_lo + marker_span;  // exclusive
    if (cfg.marker_base < 1 || marker_hi > cfg.vocab)
        throw DataError("gen_text: marker block [" + std::to_string(marker_lo) + "," +
                        std::to_string(marker_hi) + ") does not fit vocab " +
                        std::to_string(cfg.vocab));
    std::size_t background = cfg.vocab - 1 - marker_span;  // non-pad, non-marker
    if (background == 0) throw DataError("gen_text: no background tokens left");

    // k-th background id, skipping pad and the marker block
    auto background_id = [&](std::uint64_t k) -> std::int32_t {
        std::size_t id = 1 + static_cast<std::size_t>(k);
        if (id >= marker_lo) id += marker_span;
        return static_cast<std::int32_t>(id);
    };

    Dataset ds;
    ds.kind = DataKind::Text;
    ds.n_classes = cfg.n_classes;
    ds.max_len = cfg.max_len;
    ds.train_count = cfg.n_train;

    std::size_t total = cfg.n_train + cfg.n_val;
    std::size_t min_len = (cfg.max_len + 1) / 2;
    ds.tokens.reserve(total);
    ds.labels.reserve(total);
    for (std::size_t i = 0; i < total; ++i) {
        std::int32_t label = static_cast<std::int32_t>(i % cfg.n_classes);
        CounterRng rng(stream_key(cfg.seed, "text.sample", i));
        std::size_t len = min_len + rng.next_below(cfg.max_len - min_len + 1);
        std::vector<std::int32_t> row(cfg.max_len, kPadId);
        for (std::size_t j = 0; j < len; ++j) {
            if (rng.next_unit() < cfg.marker_rate) {
                std::size_t pick = rng.next_below(cfg.marker_count);
                row[j] = cfg.marker_base +
                         static_cast<std::int32_t>(label * cfg.marker_count + pick);
            } else {
                row[j] = background_id(rng.next_below(background));
            }
        }
        ds.tokens.push_back(std::move(row));
        ds.labels.push_back(label);
    }
    return ds;
}

// --- CIFAR-10 binary reader --------------------------------------------------------
//
// Record layout: 1 label byte (0-9) + 3072 pixel bytes (1024 R, 1024 G,
// 1024 B; each plane row-major 32x32). Pixels are scaled to [0,1]. The
// returned dataset holds every record as training data; combine files with
// load_cifar10 for a train/val pair.

inline constexpr std::size_t kCifarRecordBytes = 3073;

inline Dataset read_cifar10_binary(const std::filesystem::path& path) {
    std::string bytes = read_file(path);
    if (bytes.empty() || bytes.size() % kCifarRecordBytes != 0)
        throw FormatError("cifar10: file length " + std::to_string(bytes.size()) +
                          " is not a positive multiple of 3073");
    std::size_t records = bytes.size() / kCifarRecordBytes;

    Dataset ds;
    ds.kind = DataKind::Vision;
    ds.n_classes = 10;
    ds.image_shape = {3, 32, 32};
    ds.images.reserve(records);
    ds.labels.reserve(records);
    for (std::size_t r = 0; r < records; ++r) {
        const unsigned char* rec =
            reinterpret_cast<const unsigned char*>(bytes.data()) + r * kCifarRecordBytes;
        if (rec[0] > 9)
            throw FormatError("cifar10: record " + std::to_string(r) + " has label byte " +
                              std::to_string(rec[0]));
        ds.labels.push_back(static_cast<std::int32_t>(rec[0]));
        std::vector<float> pixels(3072);
        for (std::size_t j = 0; j < 3072; ++j)
            pixels[j] = static_cast<float>(rec[1 + j]) / 255.0f;
        ds.images.push_back(std::move(pixels));
    }
    ds.train_count = records;
    return ds;
}

inline Dataset load_cifar10(const std::filesystem::path& train_path,
                            const std::filesystem::path& val_path) {
    Dataset train = read_cifar10_binary(train_path);
    Dataset val = read_cifar10_binary(val_path);
    train.train_count = train.size();
    train.images.insert(train.images.end(), val.images.begin(), val.images.end());
    train.labels.insert(train.labels.end(), val.labels.begin(), val.labels.end());
    return train;
}

// --- batch stream -------------------------------------------------------------------

// Seeded permutation of a split, chunked into batches; the last partial
// batch is kept. The order depends only on (seed, epoch).
inline std::vector<std::vector<std::size_t>> batches(const Dataset& ds, Split split,
                                                     std::size_t batch_size, std::uint64_t seed,
                                                     std::size_t epoch) {
    if (batch_size == 0) throw DomainError("batches: batch_size must be positive");
    std::size_t begin = ds.split_begin(split);
    std::size_t count = ds.split_size(split);
    CounterRng rng(stream_key(seed, "batch.order", epoch));
    std::vector<std::size_t> order = random_permutation(count, rng);
    std::vector<std::vector<std::size_t>> out;
    for (std::size_t start = 0; start < count; start += batch_size) {
        std::size_t stop = std::min(count, start + batch_size);
        std::vector<std::size_t> batch;
        batch.reserve(stop - start);
        for (std::size_t i = start; i < stop; ++i) batch.push_back(begin + order[i]);
        out.push_back(std::move(batch));
    }
    return out;
}

// Sequential (unshuffled) batches, used for evaluation.
inline std::vector<std::vector<std::size_t>> sequential_batches(const Dataset& ds, Split split,
                                                                std::size_t batch_size) {
    if (batch_size == 0) throw DomainError("batches: batch_size must be positive");
    std::vector<std::vector<std::size_t>> out;
    for (std::size_t i = ds.split_begin(split); i < ds.split_end(split); i += batch_size) {
        std::size_t stop = std::min(ds.split_end(split), i + batch_size);
        std::vector<std::size_t> batch;
        for (std::size_t j = i; j < stop; ++j) batch.push_back(j);
        out.push_back(std::move(batch));
    }
    return out;
}

// --- batch materialization ------------------------------------------------------------

template <typename S>
Tensor<S> make_image_batch(const Dataset& ds, const std::vector<std::size_t>& indices) {
    if (ds.kind != DataKind::Vision) throw DataError("make_image_batch: not a vision dataset");
    Shape shape = {indices.size()};
    shape.insert(shape.end(), ds.image_shape.begin(), ds.image_shape.end());
    std::size_t dim = numel(ds.image_shape);
    std::vector<S> values(indices.size() * dim);
    for (std::size_t i = 0; i < indices.size(); ++i) {
        const std::vector<float>& px = ds.images.at(indices[i]);
        for (std::size_t j = 0; j < dim; ++j) values[i * dim + j] = static_cast<S>(px[j]);
    }
    return Tensor<S>::from_data(std::move(shape), std::move(values));
}

inline IdArray make_token_batch(const Dataset& ds, const std::vector<std::size_t>& indices) {
    if (ds.kind != DataKind::Text) throw DataError("make_token_batch: not a text dataset");
    IdArray out;
    out.shape = {indices.size(), ds.max_len};
    out.ids.reserve(indices.size() * ds.max_len);
    for (std::size_t idx : indices) {
        const auto& row = ds.tokens.at(idx);
        out.ids.insert(out.ids.end(), row.begin(), row.end());
    }
    return out;
}

inline std::vector<std::int32_t> batch_labels(const Dataset& ds,
                                              const std::vector<std::size_t>& indices) {
    std::vector<std::int32_t> out;
    out.reserve(indices.size());
    for (std::size_t idx : indices) out.push_back(ds.labels.at(idx));
    return out;
}

// Order-sensitive FNV-1a over the dataset's content; determinism probe.
inline std::uint64_t dataset_checksum(const Dataset& ds) {
    std::uint64_t h = 0xCBF29CE484222325ULL;
    auto mix_bytes = [&h](const void* p, std::size_t n) {
        const unsigned char* b = static_cast<const unsigned char*>(p);
        for (std::size_t i = 0; i < n; ++i) {
            h ^= b[i];
            h *= 0x100000001B3ULL;
        }
    };
    for (const auto& img : ds.images) mix_bytes(img.data(), img.size() * sizeof(float));
    for (const auto& row : ds.tokens) mix_bytes(row.data(), row.size() * sizeof(std::int32_t));
    mix_bytes(ds.labels.data(), ds.labels.size() * sizeof(std::int32_t));
    return h;
}

// Fixture export: samples and labels in the tensor archive container.
inline void export_dataset(const Dataset& ds, const std::filesystem::path& path) {
    std::vector<ArchiveEntry> entries;
    char name[32];
    for (std::size_t i = 0; i < ds.size(); ++i) {
        std::snprintf(name, sizeof(name), "sample/%06zu", i);
        if (ds.kind == DataKind::Vision) {
            auto t = Tensor<float>::from_data(ds.image_shape,
                                              std::vector<float>(ds.images[i].begin(),
                                                                 ds.images[i].end()));
            entries.push_back(make_entry(name, t));
        } else {
            std::vector<float> as_float(ds.tokens[i].begin(), ds.tokens[i].end());
            auto t = Tensor<float>::from_data({ds.max_len}, std::move(as_float));
            entries.push_back(make_entry(name, t));
        }
    }
    std::vector<float> labels_f(ds.labels.begin(), ds.labels.end());
    entries.push_back(
        make_entry("labels", Tensor<float>::from_data({ds.size()}, std::move(labels_f))));
    save_archive(path, entries);
}

}  // namespace ebkit
