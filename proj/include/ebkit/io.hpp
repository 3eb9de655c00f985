// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "ebkit/archive.hpp"
#include "ebkit/model.hpp"
#include "ebkit/pruning.hpp"
#include "ebkit/report.hpp"

namespace ebkit {

// Checkpoint: one archive holding every parameter tensor, plus a JSON sidecar
// describing what the weights are.

template <typename S>
void save_checkpoint(const std::filesystem::path& path, const Model<S>& m,
                     std::size_t epoch = 0) {
    std::vector<ArchiveEntry> entries;
    entries.reserve(m.parameters.size());
    for (const auto& p : m.parameters) entries.push_back(make_entry(p.name, p.tensor));
    save_archive(path, entries);

    json side;
    side["kind"] = kind_name(m.config.kind);
    side["seed"] = m.seed;
    side["epoch"] = epoch;
    side["parameters"] = m.parameters.size();
    write_file_atomic(path.string() + ".json", side.dump(2) + "\n");
}

template <typename S>
Model<S> load_checkpoint(const std::filesystem::path& path, const ModelConfig& mc) {
    Model<S> m = build<S>(mc, 0);
    auto entries = load_archive(path);
    if (entries.size() != m.parameters.size())
        throw FormatError("checkpoint '" + path.string() + "' holds " +
                          std::to_string(entries.size()) + " tensors, model expects " +
                          std::to_string(m.parameters.size()));
    for (std::size_t i = 0; i < entries.size(); ++i) {
        auto& param = m.parameters[i];
        if (entries[i].name != param.name)
            throw FormatError("checkpoint entry '" + entries[i].name + "', model expects '" +
                              param.name + "'");
        auto t = entry_to_tensor<S>(entries[i]);
        if (t.shape() != param.tensor.shape())
            throw FormatError("checkpoint entry '" + entries[i].name + "' has the wrong shape");
        auto src = t.data();
        auto dst = param.tensor.mutable_data();
        std::copy(src.begin(), src.end(), dst.begin());
    }
    return m;
}

// Mask file: u8 archive of per-parameter keep bits, sidecar with p, epoch and scope.

inline void save_mask_file(const std::filesystem::path& path, const PruneMask& mask) {
    std::vector<ArchiveEntry> entries;
    entries.reserve(mask.entries.size());
    for (const auto& [name, bits] : mask.entries) entries.push_back(make_mask_entry(name, bits));
    save_archive(path, entries);

    json side;
    side["p"] = mask.p;
    side["epoch"] = mask.epoch;
    side["scope"] = scope_name(mask.scope);
    write_file_atomic(path.string() + ".json", side.dump(2) + "\n");
}

inline PruneMask load_mask_file(const std::filesystem::path& path) {
    PruneMask mask;
    json side = json::parse(read_text_file(path.string() + ".json"));
    mask.p = side.at("p").get<double>();
    mask.epoch = side.at("epoch").get<std::size_t>();
    mask.scope = scope_from_name(side.at("scope").get<std::string>());
    for (const auto& e : load_archive(path)) mask.entries[e.name] = entry_to_mask(e);
    return mask;
}

}  // namespace ebkit
