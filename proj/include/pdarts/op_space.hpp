#pragma once

#include <array>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "pdarts/nn.hpp"
#include "pdarts/rng.hpp"
#include "pdarts/tensor.hpp"

namespace pdarts {

// The eight-operation search space. Enumeration order is the canonical
// tie-break order everywhere (pruning, derivation, refinement).
enum class OpKind {
    zero,
    skip_connect,
    max_pool_3x3,
    avg_pool_3x3,
    sep_conv_3x3,
    sep_conv_5x5,
    dil_conv_3x3,
    dil_conv_5x5,
};

inline constexpr std::array<OpKind, 8> kAllOps = {
    OpKind::zero,         OpKind::skip_connect, OpKind::max_pool_3x3, OpKind::avg_pool_3x3,
    OpKind::sep_conv_3x3, OpKind::sep_conv_5x5, OpKind::dil_conv_3x3, OpKind::dil_conv_5x5,
};

inline const char* op_name(OpKind k) {
    switch (k) {
        case OpKind::zero: return "zero";
        case OpKind::skip_connect: return "skip_connect";
        case OpKind::max_pool_3x3: return "max_pool_3x3";
        case OpKind::avg_pool_3x3: return "avg_pool_3x3";
        case OpKind::sep_conv_3x3: return "sep_conv_3x3";
        case OpKind::sep_conv_5x5: return "sep_conv_5x5";
        case OpKind::dil_conv_3x3: return "dil_conv_3x3";
        case OpKind::dil_conv_5x5: return "dil_conv_5x5";
    }
    return "?";
}

inline std::optional<OpKind> op_from_name(const std::string& s) {
    for (OpKind k : kAllOps)
        if (s == op_name(k)) return k;
    return std::nullopt;
}

// Learnable element count of one candidate; a pure function of (kind, channels).
inline std::int64_t op_param_count(OpKind k, int channels, int stride) {
    const std::int64_t c = channels;
    switch (k) {
        case OpKind::zero:
            return 0;
        case OpKind::skip_connect:
            // Factorized reduce at stride 2: two strided 1x1 convs plus BN.
            return stride == 1 ? 0 : (c / 2) * c + (c - c / 2) * c + 2 * c;
        case OpKind::max_pool_3x3:
        case OpKind::avg_pool_3x3:
            return 2 * c;
        case OpKind::sep_conv_3x3:
            return 2 * (3 * 3 * c + c * c + 2 * c);
        case OpKind::sep_conv_5x5:
            return 2 * (5 * 5 * c + c * c + 2 * c);
        case OpKind::dil_conv_3x3:
            return 3 * 3 * c + c * c + 2 * c;
        case OpKind::dil_conv_5x5:
            return 5 * 5 * c + c * c + 2 * c;
    }
    return 0;
}

// Activation elements one candidate materializes per batch element, counting
// every intermediate map it produces. Used by the stage accounting report.
inline std::int64_t op_activation_count(OpKind k, int channels, int h, int w, int stride) {
    const std::int64_t in_plane = static_cast<std::int64_t>(channels) * h * w;
    const std::int64_t out_plane = static_cast<std::int64_t>(channels) * (h / stride) * (w / stride);
    switch (k) {
        case OpKind::zero:
            return out_plane;
        case OpKind::skip_connect:
            return stride == 1 ? 0 : in_plane + 3 * out_plane;  // relu, two halves + bn output
        case OpKind::max_pool_3x3:
        case OpKind::avg_pool_3x3:
            return 2 * out_plane;  // pool + bn
        case OpKind::sep_conv_3x3:
        case OpKind::sep_conv_5x5:
            return in_plane + 7 * out_plane;  // relu, (dw,pw,bn) + relu,(dw,pw,bn)
        case OpKind::dil_conv_3x3:
        case OpKind::dil_conv_5x5:
            return in_plane + 3 * out_plane;
    }
    return 0;
}

// A constructed candidate: a differentiable sub-module mapping
// (B,C,H,W) -> (B,C,H/stride,W/stride).
class CandidateOp {
public:
    CandidateOp(OpKind kind, int channels, int stride, Rng& rng) : kind_(kind), stride_(stride) {
        if (stride != 1 && stride != 2)
            throw ShapeError("build_candidate: unsupported stride " + std::to_string(stride));
        if (channels < 1)
            throw ShapeError("build_candidate: channels must be >= 1");
        switch (kind) {
            case OpKind::zero:
                break;
            case OpKind::skip_connect:
                if (stride == 2) impl_ = FactorizedReduce(channels, channels, rng);
                break;
            case OpKind::max_pool_3x3:
                impl_ = PoolBN(PoolMode::max, channels, stride);
                break;
            case OpKind::avg_pool_3x3:
                impl_ = PoolBN(PoolMode::avg, channels, stride);
                break;
            case OpKind::sep_conv_3x3:
                impl_ = SepConv(channels, 3, stride, rng);
                break;
            case OpKind::sep_conv_5x5:
                impl_ = SepConv(channels, 5, stride, rng);
                break;
            case OpKind::dil_conv_3x3:
                impl_ = DilConv(channels, 3, stride, rng);
                break;
            case OpKind::dil_conv_5x5:
                impl_ = DilConv(channels, 5, stride, rng);
                break;
        }
    }

    OpKind kind() const { return kind_; }
    int stride() const { return stride_; }

    Tensor forward(Tape& tape, const Tensor& x, bool training) {
        switch (kind_) {
            case OpKind::zero: {
                // Emits zeros (spatially subsampled at stride 2); no gradient
                // flows back to x.
                return zeros({x.shape[0], x.shape[1], x.shape[2] / stride_, x.shape[3] / stride_});
            }
            case OpKind::skip_connect:
                if (stride_ == 1) return x;
                return std::get<FactorizedReduce>(impl_).forward(tape, x, training);
            case OpKind::max_pool_3x3:
            case OpKind::avg_pool_3x3:
                return std::get<PoolBN>(impl_).forward(tape, x, training);
            case OpKind::sep_conv_3x3:
            case OpKind::sep_conv_5x5:
                return std::get<SepConv>(impl_).forward(tape, x, training);
            case OpKind::dil_conv_3x3:
            case OpKind::dil_conv_5x5:
                return std::get<DilConv>(impl_).forward(tape, x, training);
        }
        throw ShapeError("build_candidate: unknown op kind");
    }

    void collect_params(std::vector<Tensor*>& out) {
        std::visit([&out](auto& m) {
            using T = std::decay_t<decltype(m)>;
            if constexpr (!std::is_same_v<T, std::monostate>) m.collect_params(out);
        }, impl_);
    }

    std::int64_t param_count() const {
        return std::visit([](const auto& m) -> std::int64_t {
            using T = std::decay_t<decltype(m)>;
            if constexpr (std::is_same_v<T, std::monostate>) return 0;
            else return m.param_count();
        }, impl_);
    }

private:
    OpKind kind_;
    int stride_;
    std::variant<std::monostate, FactorizedReduce, PoolBN, SepConv, DilConv> impl_;
};

// One mixed edge: its surviving candidate set, its architecture parameters
// (shared storage across cells of the same type), the per-cell candidate
// modules, and the current skip-connect dropout rate.
struct MixedEdge {
    int from_node = 0;
    int to_node = 0;
    std::vector<CandidateOp> ops;
    Tensor alpha;  // one entry per candidate; aliases the shared table
    double skip_dropout_rate = 0.0;

    MixedEdge(int from, int to, const std::vector<OpKind>& candidates, int channels, int stride,
              Tensor shared_alpha, Rng& rng)
        : from_node(from), to_node(to), alpha(std::move(shared_alpha)) {
        if (from >= to) throw ShapeError("mixed edge: from_node must precede to_node");
        if (candidates.empty()) throw ShapeError("mixed edge: empty candidate set");
        if (alpha.size() != static_cast<std::int64_t>(candidates.size()))
            throw ShapeError("mixed edge: alpha size " + std::to_string(alpha.size()) + " for " +
                             std::to_string(candidates.size()) + " candidates");
        ops.reserve(candidates.size());
        for (OpKind k : candidates) ops.emplace_back(k, channels, stride, rng);
    }

    std::vector<OpKind> candidates() const {
        std::vector<OpKind> ks;
        ks.reserve(ops.size());
        for (const auto& o : ops) ks.push_back(o.kind());
        return ks;
    }
};

// Softmax of the edge's architecture parameters, outside the tape.
inline std::vector<double> mixture_weights(const MixedEdge& edge) {
    if (edge.ops.empty()) throw ShapeError("mixture_weights: empty candidate set");
    const auto& a = *edge.alpha.data;
    double mx = a[0];
    for (double v : a) {
        if (std::isnan(v)) throw NonFiniteError("mixture_weights: NaN architecture parameter");
        mx = std::max(mx, v);
    }
    double z = 0.0;
    std::vector<double> w(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) z += (w[i] = std::exp(a[i] - mx));
    for (auto& v : w) v /= z;
    return w;
}

// Mixed output: sum over candidates of softmax(alpha) * op(x), with
// operation-level dropout on the skip-connect branch in train mode.
inline Tensor mixed_forward(Tape& tape, MixedEdge& edge, const Tensor& x, bool training,
                            Rng& rng) {
    if (edge.ops.empty()) throw ShapeError("mixed_forward: empty candidate set");
    for (double v : *edge.alpha.data)
        if (std::isnan(v)) throw NonFiniteError("mixed_forward: NaN architecture parameter");
    Tensor w = softmax(tape, edge.alpha);
    std::vector<Tensor> branches;
    branches.reserve(edge.ops.size());
    for (auto& op : edge.ops) {
        Tensor y = op.forward(tape, x, training);
        if (op.kind() == OpKind::skip_connect && training && edge.skip_dropout_rate > 0.0)
            y = dropout(tape, y, edge.skip_dropout_rate, rng, training);
        branches.push_back(std::move(y));
    }
    return weighted_sum(tape, branches, w);
}

}  // namespace pdarts
