// SPDX-License-Identifier: Apache-2.0
//
// Two tiny transformer classifiers sharing one parameter layout: a
// bidirectional encoder over image patches with a class-token readout, and
// a causal-attention model over token ids read out at the last position.
#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "ebkit/errors.hpp"
#include "ebkit/rng.hpp"
#include "ebkit/tensor.hpp"

namespace ebkit {

enum class ModelKind { EncoderVision, CausalText };

inline std::string kind_name(ModelKind k) {
    return k == ModelKind::EncoderVision ? "encoder_vision" : "causal_text";
}

inline ModelKind kind_from_name(const std::string& s) {
    if (s == "encoder_vision") return ModelKind::EncoderVision;
    if (s == "causal_text") return ModelKind::CausalText;
    throw ConfigError("unknown model kind '" + s + "'");
}

struct ModelConfig {
    ModelKind kind = ModelKind::EncoderVision;
    std::size_t depth = 2;
    std::size_t d_model = 32;
    std::size_t n_heads = 4;
    std::size_t d_ff = 64;
    std::size_t n_classes = 4;
    // vision input spec
    std::size_t side = 8;
    std::size_t channels = 1;
    std::size_t patch = 4;
    // text input spec
    std::size_t vocab = 32;
    std::size_t max_len = 12;
    double dropout_rate = 0.0;

    void validate() const {
        if (depth == 0 || d_model == 0 || n_heads == 0 || d_ff == 0)
            throw ConfigError("model: depth, d_model, n_heads and d_ff must be positive");
        if (n_classes < 2) throw ConfigError("model: need at least two classes");
        if (d_model % n_heads != 0)
            throw ConfigError("model: d_model " + std::to_string(d_model) +
                              " not divisible by n_heads " + std::to_string(n_heads));
        if (dropout_rate < 0.0 || dropout_rate >= 1.0)
            throw ConfigError("model: dropout_rate must lie in [0, 1)");
        if (kind == ModelKind::EncoderVision) {
            if (side == 0 || channels == 0 || patch == 0)
                throw ConfigError("model: side, channels and patch must be positive");
            if (side % patch != 0)
                throw ConfigError("model: patch " + std::to_string(patch) +
                                  " does not divide side " + std::to_string(side));
        } else {
            if (vocab < 2 || max_len == 0)
                throw ConfigError("model: need vocab >= 2 and max_len > 0");
        }
    }

    std::size_t patches_per_side() const { return side / patch; }
    std::size_t n_patches() const { return patches_per_side() * patches_per_side(); }
    std::size_t patch_dim() const { return channels * patch * patch; }
    std::size_t seq_len() const {
        return kind == ModelKind::EncoderVision ? n_patches() + 1 : max_len;
    }

    bool operator==(const ModelConfig&) const = default;
};

template <typename S>
struct Param {
    std::string name;
    Tensor<S> tensor;
    bool prunable = false;
};

struct PruneMask;

template <typename S>
struct Model {
    ModelConfig config;
    std::uint64_t seed = 0;
    std::vector<Param<S>> parameters;
    // set by apply_mask; the trainer re-zeros masked weights after each step
    std::shared_ptr<const PruneMask> active_mask;

    Tensor<S>& at(const std::string& name) {
        auto it = index_.find(name);
        if (it == index_.end()) throw IndexError("model: no parameter named '" + name + "'");
        return parameters[it->second].tensor;
    }
    const Tensor<S>& at(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw IndexError("model: no parameter named '" + name + "'");
        return parameters[it->second].tensor;
    }
    bool has(const std::string& name) const { return index_.count(name) != 0; }

    void add_param(const std::string& name, Tensor<S> t, bool prunable) {
        if (!index_.emplace(name, parameters.size()).second)
            throw ContractError("model: duplicate parameter name '" + name + "'");
        parameters.push_back({name, std::move(t), prunable});
    }

    Model clone() const {
        Model out;
        out.config = config;
        out.seed = seed;
        out.active_mask = active_mask;
        for (const auto& p : parameters) {
            auto t = p.tensor.clone();
            t.set_requires_grad(p.tensor.requires_grad());
            out.add_param(p.name, std::move(t), p.prunable);
        }
        return out;
    }

   private:
    std::map<std::string, std::size_t> index_;
};

// --- construction -----------------------------------------------------------------

namespace detail {

template <typename S>
Tensor<S> init_weight(const Shape& shape, std::uint64_t seed, const std::string& name) {
    CounterRng rng(stream_key(seed, "init/" + name));
    std::vector<S> values(numel(shape));
    for (S& v : values) v = static_cast<S>(rng.next_trunc_normal(0.02));
    auto t = Tensor<S>::from_data(shape, std::move(values));
    t.set_requires_grad(true);
    return t;
}

template <typename S>
Tensor<S> init_const(const Shape& shape, S value) {
    auto t = Tensor<S>::full(shape, value);
    t.set_requires_grad(true);
    return t;
}

}  // namespace detail

// Parameters appear in a fixed order with path-like names; weights draw
// from truncated normal (std 0.02) streams keyed by (seed, name), biases
// start at zero and norm gains at one. Prunable covers exactly the weight
// matrices of the attention projections, the feed-forward pair and the
// classifier head.
template <typename S = float>
Model<S> build(const ModelConfig& config, std::uint64_t seed) {
    config.validate();
    Model<S> m;
    m.config = config;
    m.seed = seed;
    std::size_t d = config.d_model;

    auto weight = [&](const std::string& name, Shape shape, bool prunable) {
        m.add_param(name, detail::init_weight<S>(shape, seed, name), prunable);
    };
    auto zeros = [&](const std::string& name, Shape shape) {
        m.add_param(name, detail::init_const<S>(shape, S(0)), false);
    };
    auto ones = [&](const std::string& name, Shape shape) {
        m.add_param(name, detail::init_const<S>(shape, S(1)), false);
    };

    if (config.kind == ModelKind::EncoderVision) {
        weight("embed/patch/w", {config.patch_dim(), d}, false);
        zeros("embed/patch/b", {d});
        weight("embed/cls", {d}, false);
        weight("embed/pos", {config.seq_len(), d}, false);
    } else {
        weight("embed/tok", {config.vocab, d}, false);
        weight("embed/pos", {config.max_len, d}, false);
    }
    for (std::size_t i = 0; i < config.depth; ++i) {
        std::string b = "block" + std::to_string(i) + "/";
        ones(b + "norm1/g", {d});
        zeros(b + "norm1/b", {d});
        weight(b + "attn/wq", {d, d}, true);
        zeros(b + "attn/bq", {d});
        weight(b + "attn/wk", {d, d}, true);
        zeros(b + "attn/bk", {d});
        weight(b + "attn/wv", {d, d}, true);
        zeros(b + "attn/bv", {d});
        weight(b + "attn/wo", {d, d}, true);
        zeros(b + "attn/bo", {d});
        ones(b + "norm2/g", {d});
        zeros(b + "norm2/b", {d});
        weight(b + "ff/w1", {d, config.d_ff}, true);
        zeros(b + "ff/b1", {config.d_ff});
        weight(b + "ff/w2", {config.d_ff, d}, true);
        zeros(b + "ff/b2", {d});
    }
    ones("final_norm/g", {d});
    zeros("final_norm/b", {d});
    weight("head/w", {d, config.n_classes}, true);
    zeros("head/b", {config.n_classes});
    return m;
}

// --- bookkeeping -------------------------------------------------------------------

template <typename S>
std::size_t num_parameters(const Model<S>& m) {
    std::size_t n = 0;
    for (const auto& p : m.parameters) n += p.tensor.size();
    return n;
}

// Order-sensitive FNV-1a over parameter names and little-endian payloads.
template <typename S>
std::uint64_t checksum(const Model<S>& m) {
    std::uint64_t h = 0xCBF29CE484222325ULL;
    auto mix = [&h](const void* p, std::size_t n) {
        const unsigned char* b = static_cast<const unsigned char*>(p);
        for (std::size_t i = 0; i < n; ++i) {
            h ^= b[i];
            h *= 0x100000001B3ULL;
        }
    };
    for (const auto& p : m.parameters) {
        mix(p.name.data(), p.name.size());
        auto span = p.tensor.data();
        mix(span.data(), span.size() * sizeof(S));
    }
    return h;
}

// --- forward pieces ---------------------------------------------------------------

// (B, C, side, side) -> (B, P, C*patch*patch); patches scan row-major and
// each patch flattens channel-major. Pure data rearrangement, so gradients
// never flow through it (inputs are constants).
template <typename S>
Tensor<S> patchify(const Tensor<S>& images, std::size_t patch) {
    if (images.rank() != 4) throw ShapeError("patchify: expected rank-4 input, got " +
                                             shape_str(images.shape()));
    const Shape& s = images.shape();
    std::size_t bsz = s[0], ch = s[1], side = s[2];
    if (s[3] != side || side % patch != 0)
        throw ShapeError("patchify: image " + shape_str(s) + " incompatible with patch " +
                         std::to_string(patch));
    std::size_t per_side = side / patch;
    std::size_t n_patches = per_side * per_side;
    std::size_t dim = ch * patch * patch;
    std::vector<S> out(bsz * n_patches * dim);
    auto in = images.data();
    for (std::size_t b = 0; b < bsz; ++b)
        for (std::size_t py = 0; py < per_side; ++py)
            for (std::size_t px = 0; px < per_side; ++px) {
                std::size_t p = py * per_side + px;
                for (std::size_t c = 0; c < ch; ++c)
                    for (std::size_t dy = 0; dy < patch; ++dy)
                        for (std::size_t dx = 0; dx < patch; ++dx) {
                            std::size_t src = ((b * ch + c) * side + py * patch + dy) * side +
                                              px * patch + dx;
                            std::size_t dst = (b * n_patches + p) * dim +
                                              (c * patch + dy) * patch + dx;
                            out[dst] = in[src];
                        }
            }
    return Tensor<S>::from_data({bsz, n_patches, dim}, std::move(out));
}

template <typename S>
struct AttnParams {
    Tensor<S> wq, bq, wk, bk, wv, bv, wo, bo;
};

// Standard scaled dot-product multi-head self-attention over (B, T, D).
template <typename S>
Tensor<S> multi_head_attention(const Tensor<S>& x, const AttnParams<S>& p, std::size_t n_heads,
                               bool causal) {
    std::size_t d = x.shape().back();
    std::size_t dh = d / n_heads;
    auto q = split_heads(add(matmul(x, p.wq), p.bq), n_heads);
    auto k = split_heads(add(matmul(x, p.wk), p.bk), n_heads);
    auto v = split_heads(add(matmul(x, p.wv), p.bv), n_heads);
    S inv_sqrt = static_cast<S>(1.0 / std::sqrt(static_cast<double>(dh)));
    auto scores = scale(matmul(q, transpose_last2(k)), inv_sqrt);
    auto weights = causal ? causal_masked_softmax(scores) : softmax(scores, scores.rank() - 1);
    auto ctx = merge_heads(matmul(weights, v));
    return add(matmul(ctx, p.wo), p.bo);
}

inline constexpr std::size_t kLastPosition = static_cast<std::size_t>(-1);

struct ForwardOptions {
    bool train = false;               // enables dropout when the config rate is positive
    std::uint64_t dropout_key = 0;    // stream key for dropout masks
    std::size_t readout_pos = kLastPosition;  // causal probe override
};

namespace detail {

template <typename S>
AttnParams<S> block_attn(Model<S>& m, const std::string& b) {
    return {m.at(b + "attn/wq"), m.at(b + "attn/bq"), m.at(b + "attn/wk"), m.at(b + "attn/bk"),
            m.at(b + "attn/wv"), m.at(b + "attn/bv"), m.at(b + "attn/wo"), m.at(b + "attn/bo")};
}

// Pre-norm block stack, final norm, readout position, classifier head.
template <typename S>
Tensor<S> trunk(Model<S>& m, Tensor<S> x, bool causal, std::size_t readout,
                const ForwardOptions& opts) {
    double rate = m.config.dropout_rate;
    bool drop = opts.train && rate > 0.0;
    CounterRng drop_rng(stream_key(opts.dropout_key, "dropout"));
    for (std::size_t i = 0; i < m.config.depth; ++i) {
        std::string b = "block" + std::to_string(i) + "/";
        auto h = layer_norm(x, m.at(b + "norm1/g"), m.at(b + "norm1/b"));
        auto a = multi_head_attention(h, block_attn(m, b), m.config.n_heads, causal);
        if (drop) a = dropout(a, rate, drop_rng);
        x = add(x, a);
        auto h2 = layer_norm(x, m.at(b + "norm2/g"), m.at(b + "norm2/b"));
        auto f = matmul(gelu(add(matmul(h2, m.at(b + "ff/w1")), m.at(b + "ff/b1"))),
                        m.at(b + "ff/w2"));
        f = add(f, m.at(b + "ff/b2"));
        if (drop) f = dropout(f, rate, drop_rng);
        x = add(x, f);
    }
    x = layer_norm(x, m.at("final_norm/g"), m.at("final_norm/b"));
    auto pooled = take_position(x, readout);
    return add(matmul(pooled, m.at("head/w")), m.at("head/b"));
}

}  // namespace detail

// Vision forward: (B, C, side, side) images -> (B, n_classes) logits.
template <typename S>
Tensor<S> forward(Model<S>& m, const Tensor<S>& images, const ForwardOptions& opts = {}) {
    if (m.config.kind != ModelKind::EncoderVision)
        throw ContractError("forward: image batch passed to a text model");
    const Shape& s = images.shape();
    Shape want = {s.empty() ? 0 : s[0], m.config.channels, m.config.side, m.config.side};
    if (s.size() != 4 || s != want)
        throw ShapeError("forward: image batch " + shape_str(s) + " does not match input spec " +
                         shape_str(want));
    auto patches = patchify(images, m.config.patch);
    auto x = add(matmul(patches, m.at("embed/patch/w")), m.at("embed/patch/b"));
    x = prepend_token(x, m.at("embed/cls"));
    x = add(x, m.at("embed/pos"));
    return detail::trunk(m, x, /*causal=*/false, /*readout=*/0, opts);
}

// Text forward: (B, max_len) token ids -> (B, n_classes) logits.
template <typename S>
Tensor<S> forward(Model<S>& m, const IdArray& ids, const ForwardOptions& opts = {}) {
    if (m.config.kind != ModelKind::CausalText)
        throw ContractError("forward: token batch passed to a vision model");
    if (ids.shape.size() != 2 || ids.shape[1] != m.config.max_len)
        throw ShapeError("forward: token batch " + shape_str(ids.shape) +
                         " does not match (batch, " + std::to_string(m.config.max_len) + ")");
    auto x = add(embedding_lookup(m.at("embed/tok"), ids), m.at("embed/pos"));
    std::size_t readout =
        opts.readout_pos == kLastPosition ? m.config.max_len - 1 : opts.readout_pos;
    if (readout >= m.config.max_len)
        throw IndexError("forward: readout position " + std::to_string(readout) +
                         " out of range");
    return detail::trunk(m, x, /*causal=*/true, readout, opts);
}

}  // namespace ebkit
