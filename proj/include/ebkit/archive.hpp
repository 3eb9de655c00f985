// SPDX-License-Identifier: Apache-2.0
//
// Tensor archive: the on-disk container for checkpoints, masks and golden
// fixtures.
//
// Layout (all integers little-endian):
//   magic "EBKT1" (5 bytes)
//   then per tensor:
//     name length  u32
//     name bytes   UTF-8
//     dtype tag    u8   (0 = f32, 1 = f64, 2 = u8)
//     rank         u8
//     extents      u64 per axis
//     payload      raw little-endian element bytes
#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <string>
#include <vector>

#include "ebkit/errors.hpp"
#include "ebkit/fsio.hpp"
#include "ebkit/tensor.hpp"

namespace ebkit {

static_assert(std::endian::native == std::endian::little,
              "archive payloads are written by memcpy and require a little-endian host");

enum class Dtype : std::uint8_t { F32 = 0, F64 = 1, U8 = 2 };

inline std::size_t dtype_width(Dtype d) {
    switch (d) {
        case Dtype::F32: return 4;
        case Dtype::F64: return 8;
        case Dtype::U8: return 1;
    }
    throw FormatError("unknown dtype tag");
}

struct ArchiveEntry {
    std::string name;
    Dtype dtype = Dtype::F32;
    Shape shape;
    std::string payload;  // raw little-endian bytes

    std::size_t count() const { return numel(shape); }
};

namespace detail {

template <typename T>
void append_le(std::string& out, T value) {
    char buf[sizeof(T)];
    std::memcpy(buf, &value, sizeof(T));
    out.append(buf, sizeof(T));
}

template <typename T>
T read_le(const std::string& bytes, std::size_t& pos) {
    if (pos + sizeof(T) > bytes.size()) throw FormatError("archive truncated");
    T value;
    std::memcpy(&value, bytes.data() + pos, sizeof(T));
    pos += sizeof(T);
    return value;
}

template <typename S>
constexpr Dtype dtype_of() {
    if constexpr (std::is_same_v<S, float>) return Dtype::F32;
    else if constexpr (std::is_same_v<S, double>) return Dtype::F64;
    else return Dtype::U8;
}

}  // namespace detail

inline constexpr char kArchiveMagic[] = "EBKT1";

inline std::string serialize_archive(const std::vector<ArchiveEntry>& entries) {
    std::string out;
    out.append(kArchiveMagic, 5);
    for (const ArchiveEntry& e : entries) {
        if (e.shape.size() > 255) throw FormatError("archive: rank exceeds 255");
        detail::append_le<std::uint32_t>(out, static_cast<std::uint32_t>(e.name.size()));
        out.append(e.name);
        out.push_back(static_cast<char>(e.dtype));
        out.push_back(static_cast<char>(e.shape.size()));
        for (std::size_t extent : e.shape)
            detail::append_le<std::uint64_t>(out, static_cast<std::uint64_t>(extent));
        if (e.payload.size() != e.count() * dtype_width(e.dtype))
            throw FormatError("archive: payload size does not match extents for '" + e.name + "'");
        out.append(e.payload);
    }
    return out;
}

inline std::vector<ArchiveEntry> parse_archive(const std::string& bytes) {
    if (bytes.size() < 5 || bytes.compare(0, 5, kArchiveMagic) != 0)
        throw FormatError("archive: bad magic");
    std::vector<ArchiveEntry> entries;
    std::size_t pos = 5;
    while (pos < bytes.size()) {
        ArchiveEntry e;
        std::uint32_t name_len = detail::read_le<std::uint32_t>(bytes, pos);
        if (pos + name_len > bytes.size()) throw FormatError("archive truncated in name");
        e.name = bytes.substr(pos, name_len);
        pos += name_len;
        std::uint8_t tag = detail::read_le<std::uint8_t>(bytes, pos);
        if (tag > 2) throw FormatError("archive: unknown dtype tag " + std::to_string(tag));
        e.dtype = static_cast<Dtype>(tag);
        std::uint8_t rank = detail::read_le<std::uint8_t>(bytes, pos);
        e.shape.resize(rank);
        for (std::uint8_t i = 0; i < rank; ++i)
            e.shape[i] = static_cast<std::size_t>(detail::read_le<std::uint64_t>(bytes, pos));
        std::size_t payload_len = e.count() * dtype_width(e.dtype);
        if (pos + payload_len > bytes.size()) throw FormatError("archive truncated in payload");
        e.payload = bytes.substr(pos, payload_len);
        pos += payload_len;
        entries.push_back(std::move(e));
    }
    return entries;
}

inline void save_archive(const std::filesystem::path& path,
                         const std::vector<ArchiveEntry>& entries) {
    write_file_atomic(path, serialize_archive(entries));
}

inline std::vector<ArchiveEntry> load_archive(const std::filesystem::path& path) {
    return parse_archive(read_file(path));
}

// --- typed bridges -------------------------------------------------------------

template <typename S>
ArchiveEntry make_entry(std::string name, const Tensor<S>& t) {
    ArchiveEntry e;
    e.name = std::move(name);
    e.dtype = detail::dtype_of<S>();
    e.shape = t.shape();
    e.payload.resize(t.size() * sizeof(S));
    std::memcpy(e.payload.data(), t.data().data(), e.payload.size());
    return e;
}

inline ArchiveEntry make_mask_entry(std::string name, const std::vector<std::uint8_t>& bits) {
    ArchiveEntry e;
    e.name = std::move(name);
    e.dtype = Dtype::U8;
    e.shape = {bits.size()};
    e.payload.assign(reinterpret_cast<const char*>(bits.data()), bits.size());
    return e;
}

template <typename S>
Tensor<S> entry_to_tensor(const ArchiveEntry& e) {
    if (e.dtype != detail::dtype_of<S>())
        throw FormatError("archive entry '" + e.name + "' has a different dtype than requested");
    std::vector<S> values(e.count());
    std::memcpy(values.data(), e.payload.data(), e.payload.size());
    return Tensor<S>::from_data(e.shape, std::move(values));
}

inline std::vector<std::uint8_t> entry_to_mask(const ArchiveEntry& e) {
    if (e.dtype != Dtype::U8)
        throw FormatError("archive entry '" + e.name + "' is not a u8 mask");
    const auto* p = reinterpret_cast<const std::uint8_t*>(e.payload.data());
    return std::vector<std::uint8_t>(p, p + e.payload.size());
}

}  // namespace ebkit
