#pragma once

#include <memory>
#include <string>
#include <variant>
#include <vector>

#include "pdarts/nn.hpp"
#include "pdarts/op_space.hpp"
#include "pdarts/rng.hpp"
#include "pdarts/tensor.hpp"

namespace pdarts {

struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Per cell type, one candidate list per edge. Edges are enumerated in the
// fixed order: for each intermediate node j, inputs i = 0..j+1, where 0 and 1
// are the two cell inputs and 2+t is intermediate node t.
struct CandidateSets {
    std::vector<std::vector<OpKind>> normal;
    std::vector<std::vector<OpKind>> reduce;
};

inline int edge_count(int n_intermediate) {
    int n = 0;
    for (int j = 0; j < n_intermediate; ++j) n += j + 2;
    return n;
}

inline CandidateSets full_candidate_sets(int n_intermediate = 4) {
    CandidateSets s;
    const std::vector<OpKind> all(kAllOps.begin(), kAllOps.end());
    s.normal.assign(edge_count(n_intermediate), all);
    s.reduce.assign(edge_count(n_intermediate), all);
    return s;
}

// Shared architecture parameter tables: one tensor per edge per cell type.
// All cells of a type alias the same tensors.
struct AlphaTables {
    std::vector<Tensor> normal;
    std::vector<Tensor> reduce;

    void zero_grad() {
        for (auto& t : normal) t.zero_grad();
        for (auto& t : reduce) t.zero_grad();
    }
};

// One cell: two input adapters plus a DAG of mixed edges over intermediate
// nodes; the output concatenates all intermediate nodes channel-wise.
class Cell {
public:
    Cell(int n_intermediate, int c_prev_prev, int c_prev, int channels, bool reduction,
         bool reduction_prev, const std::vector<std::vector<OpKind>>& candidates,
         const std::vector<Tensor>& alpha, Rng& rng)
        : n_intermediate_(n_intermediate), reduction_(reduction) {
        if (reduction_prev)
            pre0_ = FactorizedReduce(c_prev_prev, channels, rng);
        else
            pre0_ = ReLUConvBN(c_prev_prev, channels, 1, 1, 0, rng);
        pre1_ = ReLUConvBN(c_prev, channels, 1, 1, 0, rng);
        int e = 0;
        for (int j = 0; j < n_intermediate; ++j)
            for (int i = 0; i < j + 2; ++i, ++e) {
                const int stride = (reduction && i < 2) ? 2 : 1;
                edges_.emplace_back(i, j + 2, candidates[e], channels, stride, alpha[e], rng);
            }
    }

    bool is_reduction() const { return reduction_; }
    std::vector<MixedEdge>& edges() { return edges_; }

    Tensor preprocess0(Tape& tape, const Tensor& in0, bool training) {
        return std::visit([&](auto& m) { return m.forward(tape, in0, training); }, pre0_);
    }
    Tensor preprocess1(Tape& tape, const Tensor& in1, bool training) {
        return pre1_.forward(tape, in1, training);
    }

    void set_skip_dropout(double rate) {
        for (auto& e : edges_) e.skip_dropout_rate = rate;
    }

    // x_j = sum over incoming mixed edges of f_{i,j}(x_i).
    Tensor forward(Tape& tape, const Tensor& in0, const Tensor& in1, bool training, Rng& rng) {
        std::vector<Tensor> states;
        states.push_back(std::visit([&](auto& m) { return m.forward(tape, in0, training); }, pre0_));
        states.push_back(pre1_.forward(tape, in1, training));
        int e = 0;
        for (int j = 0; j < n_intermediate_; ++j) {
            Tensor acc;
            for (int i = 0; i < j + 2; ++i, ++e) {
                Tensor y = mixed_forward(tape, edges_[e], states[i], training, rng);
                if (i == 0) {
                    acc = y;
                } else {
                    if (acc.shape != y.shape)
                        throw ShapeError("node_aggregate: edge (" + std::to_string(i) + "," +
                                         std::to_string(j + 2) + ") shape " + shape_str(y.shape) +
                                         " vs " + shape_str(acc.shape));
                    acc = add(tape, acc, y);
                }
            }
            states.push_back(acc);
        }
        return concat_channels(tape, {states.begin() + 2, states.end()});
    }

    void collect_params(std::vector<Tensor*>& out) {
        std::visit([&](auto& m) { m.collect_params(out); }, pre0_);
        pre1_.collect_params(out);
        for (auto& e : edges_)
            for (auto& op : e.ops) op.collect_params(out);
    }

private:
    int n_intermediate_;
    bool reduction_;
    std::variant<ReLUConvBN, FactorizedReduce> pre0_;
    ReLUConvBN pre1_;
    std::vector<MixedEdge> edges_;
};

struct NetworkConfig {
    int init_channels = 8;
    int in_channels = 1;
    int num_classes = 4;
    int input_size = 16;
    int n_intermediate = 4;
    int stem_multiplier = 3;
};

inline std::vector<int> reduction_positions(int depth) {
    return {depth / 3, 2 * depth / 3};
}

// The stage-k search network: stem, a stack of cells with reduction cells at
// depth/3 and 2*depth/3, and a global-average-pool classifier. Architecture
// parameters are initialized to zero (uniform mixtures) and shared across
// cells of the same type.
class SearchNetwork {
public:
    SearchNetwork(int depth, const CandidateSets& candidates, const NetworkConfig& cfg,
                  std::uint64_t seed)
        : depth_(depth),
          cfg_(cfg),
          candidates_(candidates),
          dropout_rng_(derive_seed(seed, "supernet/dropout")) {
        if (depth < 3) throw ConfigError("supernet: depth must be >= 3, got " + std::to_string(depth));
        if (cfg.input_size / 4 < 1)
            throw ConfigError("supernet: input size " + std::to_string(cfg.input_size) +
                              " collapses below 1 after two reductions");
        const int n_edges = edge_count(cfg.n_intermediate);
        if (static_cast<int>(candidates.normal.size()) != n_edges ||
            static_cast<int>(candidates.reduce.size()) != n_edges)
            throw ConfigError("supernet: candidate sets must cover all " + std::to_string(n_edges) +
                              " edges");
        for (const auto& c : candidates.normal)
            if (c.empty()) throw ConfigError("supernet: empty candidate set on a normal edge");
        for (const auto& c : candidates.reduce)
            if (c.empty()) throw ConfigError("supernet: empty candidate set on a reduction edge");

        for (int e = 0; e < n_edges; ++e) {
            alphas_.normal.push_back(param({static_cast<int>(candidates.normal[e].size())}));
            alphas_.reduce.push_back(param({static_cast<int>(candidates.reduce[e].size())}));
        }

        Rng init_rng(derive_seed(seed, "supernet/init"));
        const int c_stem = cfg.init_channels * cfg.stem_multiplier;
        stem_conv_ = Conv2d(cfg.in_channels, c_stem, 3, {1, 1, 1, 1}, init_rng);
        stem_bn_ = BatchNorm2d(c_stem);

        const auto red_pos = reduction_positions(depth);
        int c_pp = c_stem, c_p = c_stem, c_curr = cfg.init_channels;
        bool reduction_prev = false;
        for (int i = 0; i < depth; ++i) {
            bool reduction = (i == red_pos[0] || i == red_pos[1]);
            if (reduction) c_curr *= 2;
            cells_.push_back(std::make_unique<Cell>(
                cfg.n_intermediate, c_pp, c_p, c_curr, reduction, reduction_prev,
                reduction ? candidates.reduce : candidates.normal,
                reduction ? alphas_.reduce : alphas_.normal, init_rng));
            reduction_prev = reduction;
            c_pp = c_p;
            c_p = cfg.n_intermediate * c_curr;
        }
        classifier_ = Linear(c_p, cfg.num_classes, init_rng);
    }

    Tensor forward(Tape& tape, const Tensor& batch, bool training) {
        Tensor s = stem_bn_.forward(tape, stem_conv_.forward(tape, batch), training);
        Tensor s0 = s, s1 = s;
        for (auto& cell : cells_) {
            Tensor next = cell->forward(tape, s0, s1, training, dropout_rng_);
            s0 = s1;
            s1 = next;
        }
        return classifier_.forward(tape, global_avg_pool(tape, s1));
    }

    std::vector<Tensor*> weight_params() {
        std::vector<Tensor*> out;
        stem_conv_.collect_params(out);
        stem_bn_.collect_params(out);
        for (auto& cell : cells_) cell->collect_params(out);
        classifier_.collect_params(out);
        return out;
    }

    std::vector<Tensor*> alpha_params() {
        std::vector<Tensor*> out;
        for (auto& t : alphas_.normal) out.push_back(&t);
        for (auto& t : alphas_.reduce) out.push_back(&t);
        return out;
    }

    void set_skip_dropout(double rate) {
        for (auto& cell : cells_) cell->set_skip_dropout(rate);
    }

    std::int64_t weight_param_count() {
        std::int64_t n = 0;
        for (auto* t : weight_params()) n += t->size();
        return n;
    }

    // Analytic activation accounting per batch element: candidate internals
    // plus node sums, adapters, stem and classifier inputs.
    std::int64_t activation_estimate() const {
        const auto red_pos = reduction_positions(depth_);
        std::int64_t total = 0;
        int hw = cfg_.input_size;
        const int c_stem = cfg_.init_channels * cfg_.stem_multiplier;
        total += 2LL * c_stem * hw * hw;  // stem conv + bn
        int c_curr = cfg_.init_channels;
        for (int i = 0; i < depth_; ++i) {
            const bool reduction = (i == red_pos[0] || i == red_pos[1]);
            if (reduction) c_curr *= 2;
            const int out_hw = reduction ? hw / 2 : hw;
            total += 2LL * 2 * c_curr * out_hw * out_hw;  // two adapters (conv + bn maps)
            const auto& sets = reduction ? candidates_.reduce : candidates_.normal;
            int e = 0;
            for (int j = 0; j < cfg_.n_intermediate; ++j) {
                for (int iin = 0; iin < j + 2; ++iin, ++e) {
                    const int stride = (reduction && iin < 2) ? 2 : 1;
                    const int in_hw = stride == 2 ? hw : out_hw;
                    for (OpKind k : sets[e])
                        total += op_activation_count(k, c_curr, in_hw, in_hw, stride);
                    total += static_cast<std::int64_t>(c_curr) * out_hw * out_hw;  // mixture output
                }
                total += static_cast<std::int64_t>(c_curr) * out_hw * out_hw;  // node sum
            }
            total += static_cast<std::int64_t>(cfg_.n_intermediate) * c_curr * out_hw * out_hw;
            hw = out_hw;
        }
        total += static_cast<std::int64_t>(cfg_.n_intermediate) * c_curr + cfg_.num_classes;
        return total;
    }

    int depth() const { return depth_; }
    const NetworkConfig& config() const { return cfg_; }
    const CandidateSets& candidate_sets() const { return candidates_; }
    AlphaTables& alphas() { return alphas_; }
    const AlphaTables& alphas() const { return alphas_; }
    std::vector<std::unique_ptr<Cell>>& cells() { return cells_; }

private:
    int depth_;
    NetworkConfig cfg_;
    CandidateSets candidates_;
    AlphaTables alphas_;
    Conv2d stem_conv_;
    BatchNorm2d stem_bn_;
    std::vector<std::unique_ptr<Cell>> cells_;
    Linear classifier_;
    Rng dropout_rng_;
};

// Fresh network for a stage: new weights, zero-initialized alphas, only the
// surviving candidates on every edge.
inline SearchNetwork rebuild_for_stage(int depth, const CandidateSets& surviving,
                                       const NetworkConfig& cfg, std::uint64_t seed) {
    return SearchNetwork(depth, surviving, cfg, seed);
}

}  // namespace pdarts
