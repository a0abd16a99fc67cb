#pragma once

#include <algorithm>
#include <fstream>
#include <string>
#include <vector>

#include "pdarts/config.hpp"
#include "pdarts/genotype.hpp"
#include "pdarts/search.hpp"

namespace pdarts {

// ---------------------------------------------------------------------------
// Discrete evaluation network
// ---------------------------------------------------------------------------

inline void validate_eval_config(const EvalConfig& cfg) {
    if (cfg.depth < 3)
        throw ConfigError("eval: depth must be >= 3, got " + std::to_string(cfg.depth));
    if (cfg.drop_path_prob < 0.0 || cfg.drop_path_prob >= 1.0)
        throw ConfigError("eval: drop_path_prob " + format_float(cfg.drop_path_prob) +
                          " outside [0,1)");
}

inline void validate_genotype(const Genotype& g) {
    if (g.normal.empty() || g.normal.size() != g.reduce.size())
        throw ParseError("eval: genotype cell sizes invalid");
    for (const auto* cell : {&g.normal, &g.reduce})
        for (std::size_t j = 0; j < cell->size(); ++j)
            for (const auto& p : (*cell)[j]) {
                if (p.op == OpKind::zero) throw ParseError("eval: zero op in genotype");
                if (p.from < 0 || p.from >= static_cast<int>(j) + 2)
                    throw ParseError("eval: pair source " + std::to_string(p.from) +
                                     " out of range for node " + std::to_string(j + 2));
            }
}

// One discrete cell: exactly the genotype's two operations per node, no
// mixtures and no architecture parameters.
class DiscreteCell {
public:
    DiscreteCell(const std::vector<std::vector<GenotypePair>>& nodes, int c_prev_prev, int c_prev,
                 int channels, bool reduction, bool reduction_prev, Rng& rng)
        : nodes_(nodes), reduction_(reduction) {
        if (reduction_prev)
            pre0_ = FactorizedReduce(c_prev_prev, channels, rng);
        else
            pre0_ = ReLUConvBN(c_prev_prev, channels, 1, 1, 0, rng);
        pre1_ = ReLUConvBN(c_prev, channels, 1, 1, 0, rng);
        for (const auto& node : nodes_)
            for (const auto& p : node) {
                const int stride = (reduction && p.from < 2) ? 2 : 1;
                ops_.emplace_back(p.op, channels, stride, rng);
            }
    }

    // Drop-path: one Bernoulli(1 - p) keep decision per sample per pair with
    // 1/(1-p) rescaling; if both pairs of a node drop for the same sample,
    // one of the two is re-drawn to keep, so every node always receives signal.
    Tensor forward(Tape& tape, const Tensor& in0, const Tensor& in1, bool training,
                   double drop_path_p, Rng& rng) {
        const int batch = in0.shape[0];
        std::vector<Tensor> states;
        states.push_back(std::visit([&](auto& m) { return m.forward(tape, in0, training); }, pre0_));
        states.push_back(pre1_.forward(tape, in1, training));
        int op_idx = 0;
        for (const auto& node : nodes_) {
            std::vector<Tensor> ys;
            for (const auto& p : node) ys.push_back(ops_[op_idx++].forward(tape, states[p.from], training));
            if (training && drop_path_p > 0.0) {
                const double keep_scale = 1.0 / (1.0 - drop_path_p);
                std::vector<std::vector<double>> masks(2, std::vector<double>(batch));
                for (int b = 0; b < batch; ++b) {
                    bool keep0 = !rng.bernoulli(drop_path_p);
                    bool keep1 = !rng.bernoulli(drop_path_p);
                    if (!keep0 && !keep1) {
                        if (rng.bernoulli(0.5))
                            keep0 = true;
                        else
                            keep1 = true;
                    }
                    masks[0][b] = keep0 ? keep_scale : 0.0;
                    masks[1][b] = keep1 ? keep_scale : 0.0;
                }
                ys[0] = scale_rows(tape, ys[0], masks[0]);
                ys[1] = scale_rows(tape, ys[1], masks[1]);
            }
            states.push_back(add(tape, ys[0], ys[1]));
        }
        return concat_channels(tape, {states.begin() + 2, states.end()});
    }

    void collect_params(std::vector<Tensor*>& out) {
        std::visit([&](auto& m) { m.collect_params(out); }, pre0_);
        pre1_.collect_params(out);
        for (auto& op : ops_) op.collect_params(out);
    }

private:
    std::vector<std::vector<GenotypePair>> nodes_;
    bool reduction_;
    std::variant<ReLUConvBN, FactorizedReduce> pre0_;
    ReLUConvBN pre1_;
    std::vector<CandidateOp> ops_;
};

class EvalNetwork {
public:
    EvalNetwork(const Genotype& g, const EvalConfig& cfg, const NetworkConfig& io,
                std::uint64_t seed)
        : io_(io), drop_rng_(derive_seed(seed, "eval/droppath")) {
        validate_eval_config(cfg);
        validate_genotype(g);
        Rng rng(derive_seed(seed, "eval/init"));
        const int c_stem = cfg.init_channels * io.stem_multiplier;
        stem_conv_ = Conv2d(io.in_channels, c_stem, 3, {1, 1, 1, 1}, rng);
        stem_bn_ = BatchNorm2d(c_stem);
        const auto red = reduction_positions(cfg.depth);
        int c_pp = c_stem, c_p = c_stem, c_curr = cfg.init_channels;
        bool red_prev = false;
        const int n_inter = static_cast<int>(g.normal.size());
        for (int i = 0; i < cfg.depth; ++i) {
            const bool reduction = (i == red[0] || i == red[1]);
            if (reduction) c_curr *= 2;
            cells_.push_back(std::make_unique<DiscreteCell>(reduction ? g.reduce : g.normal, c_pp,
                                                            c_p, c_curr, reduction, red_prev, rng));
            red_prev = reduction;
            c_pp = c_p;
            c_p = n_inter * c_curr;
        }
        classifier_ = Linear(c_p, io.num_classes, rng);
    }

    Tensor forward(Tape& tape, const Tensor& batch, bool training, double drop_path_p) {
        Tensor s = stem_bn_.forward(tape, stem_conv_.forward(tape, batch), training);
        Tensor s0 = s, s1 = s;
        for (auto& cell : cells_) {
            Tensor next = cell->forward(tape, s0, s1, training, drop_path_p, drop_rng_);
            s0 = s1;
            s1 = next;
        }
        return classifier_.forward(tape, global_avg_pool(tape, s1));
    }

    std::vector<Tensor*> params() {
        std::vector<Tensor*> out;
        stem_conv_.collect_params(out);
        stem_bn_.collect_params(out);
        for (auto& cell : cells_) cell->collect_params(out);
        classifier_.collect_params(out);
        return out;
    }

    std::int64_t param_count() {
        std::int64_t n = 0;
        for (auto* t : params()) n += t->size();
        return n;
    }

private:
    NetworkConfig io_;
    Conv2d stem_conv_;
    BatchNorm2d stem_bn_;
    std::vector<std::unique_ptr<DiscreteCell>> cells_;
    Linear classifier_;
    Rng drop_rng_;
};

inline EvalNetwork build_eval_network(const Genotype& g, const EvalConfig& cfg,
                                      const NetworkConfig& io, std::uint64_t seed) {
    EvalNetwork net(g, cfg, io, seed);
    const EvalGeometry geo{cfg.depth, cfg.init_channels, io.in_channels, io.num_classes,
                           io.stem_multiplier};
    const std::int64_t expect = count_parameters(g, geo);
    if (net.param_count() != expect)
        throw ConfigError("eval: parameter census " + std::to_string(net.param_count()) +
                          " does not match the analytic count " + std::to_string(expect));
    return net;
}

// ---------------------------------------------------------------------------
// Augmentation and training
// ---------------------------------------------------------------------------

// Cutout: one square mask per image at a uniform random center (clipped at the
// borders), filled with a constant. With fill = dataset mean the expected
// image mean is unchanged.
inline void apply_cutout(Tensor& batch, int length, double fill, Rng& rng) {
    if (length <= 0) return;
    const int B = batch.shape[0], C = batch.shape[1], H = batch.shape[2], W = batch.shape[3];
    for (int b = 0; b < B; ++b) {
        const int cy = static_cast<int>(rng.index(H));
        const int cx = static_cast<int>(rng.index(W));
        const int y0 = std::max(0, cy - length / 2), y1 = std::min(H, cy + (length + 1) / 2);
        const int x0 = std::max(0, cx - length / 2), x1 = std::min(W, cx + (length + 1) / 2);
        for (int c = 0; c < C; ++c)
            for (int y = y0; y < y1; ++y)
                for (int x = x0; x < x1; ++x)
                    (*batch.data)[((static_cast<std::int64_t>(b) * C + c) * H + y) * W + x] = fill;
    }
}

struct EvalEpochMetrics {
    int epoch = 0;
    double train_loss = 0.0;
    double train_acc = 0.0;
    double test_loss = 0.0;
    double test_acc = 0.0;
    double lr = 0.0;
    double drop_path_p = 0.0;
};

inline std::string eval_metrics_csv_header() {
    return "epoch,train_loss,train_acc,test_loss,test_acc,lr,drop_path_p";
}

inline std::string eval_metrics_csv_row(const EvalEpochMetrics& m) {
    std::ostringstream os;
    os << m.epoch << ',' << format_float(m.train_loss) << ',' << format_float(m.train_acc) << ','
       << format_float(m.test_loss) << ',' << format_float(m.test_acc) << ','
       << format_float(m.lr) << ',' << format_float(m.drop_path_p);
    return os.str();
}

struct EvalResult {
    std::vector<EvalEpochMetrics> history;
    double final_test_error = 1.0;
    double final_train_loss = 0.0;
};

namespace detail_eval {

inline std::pair<double, double> measure(EvalNetwork& net, const Dataset& ds, int batch_size) {
    double loss_acc = 0.0;
    std::int64_t correct = 0, seen = 0;
    int batches = 0;
    for (int start = 0; start < ds.count(); start += batch_size) {
        std::vector<int> idx;
        for (int i = start; i < std::min<std::int64_t>(ds.count(), start + batch_size); ++i)
            idx.push_back(i);
        if (idx.empty()) break;
        Tape tape;
        Tensor logits = net.forward(tape, ds.batch(idx), false, 0.0);
        auto labels = ds.batch_labels(idx);
        Tensor loss = cross_entropy(tape, logits, labels);
        loss_acc += (*loss.data)[0];
        ++batches;
        const int k = logits.shape[1];
        for (std::size_t i = 0; i < idx.size(); ++i) {
            int best = 0;
            for (int c = 1; c < k; ++c)
                if ((*logits.data)[i * k + c] > (*logits.data)[i * k + best]) best = c;
            correct += best == labels[i];
            ++seen;
        }
    }
    return {batches ? loss_acc / batches : 0.0,
            seen ? static_cast<double>(correct) / seen : 0.0};
}

}  // namespace detail_eval

// Trains the discrete network from scratch. Deterministic given the seed;
// drop-path probability ramps linearly from 0 to its configured value.
inline EvalResult train_eval(EvalNetwork& net, const Dataset& train, const Dataset& test,
                             const EvalConfig& cfg, std::uint64_t seed) {
    validate_eval_config(cfg);
    SgdMomentum sgd({cfg.lr, cfg.momentum, cfg.weight_decay});
    auto params = net.params();
    std::vector<int> all(train.count());
    for (int i = 0; i < train.count(); ++i) all[i] = i;
    const double fill = train.pixel_mean();
    EvalResult result;
    if (cfg.epochs == 0) {
        auto [tl, ta] = detail_eval::measure(net, test, cfg.batch_size);
        result.history.push_back({0, 0.0, 0.0, tl, ta, 0.0, 0.0});
        result.final_test_error = 1.0 - ta;
        return result;
    }
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        const double lr = cosine_lr(cfg.lr, epoch, cfg.epochs);
        const double p = cfg.epochs > 1
                             ? cfg.drop_path_prob * epoch / (cfg.epochs - 1)
                             : cfg.drop_path_prob;
        Rng erng(derive_seed(seed, "eval/epoch/" + std::to_string(epoch)));
        auto batches = make_batches(all, cfg.batch_size, erng);
        double loss_acc = 0.0;
        std::int64_t correct = 0, seen = 0;
        for (std::size_t bi = 0; bi < batches.size(); ++bi) {
            Tensor x = train.batch(batches[bi]);
            apply_cutout(x, cfg.cutout_length, fill, erng);
            auto labels = train.batch_labels(batches[bi]);
            for (auto* t : params) t->zero_grad();
            Tape tape;
            try {
                Tensor logits = net.forward(tape, x, true, p);
                Tensor loss = cross_entropy(tape, logits, labels);
                tape.backward(loss);
                sgd.step(params, lr);
                loss_acc += (*loss.data)[0];
                const int k = logits.shape[1];
                for (std::size_t i = 0; i < labels.size(); ++i) {
                    int best = 0;
                    for (int c = 1; c < k; ++c)
                        if ((*logits.data)[i * k + c] > (*logits.data)[i * k + best]) best = c;
                    correct += best == labels[i];
                    ++seen;
                }
            } catch (const NonFiniteError& e) {
                throw NonFiniteError("eval epoch " + std::to_string(epoch) + " batch " +
                                     std::to_string(bi) + " (lr=" + format_float(lr) +
                                     "): " + e.what());
            }
        }
        auto [tl, ta] = detail_eval::measure(net, test, cfg.batch_size);
        EvalEpochMetrics m{epoch,
                           batches.empty() ? 0.0 : loss_acc / batches.size(),
                           seen ? static_cast<double>(correct) / seen : 0.0,
                           tl,
                           ta,
                           lr,
                           p};
        result.history.push_back(m);
        result.final_test_error = 1.0 - ta;
        result.final_train_loss = m.train_loss;
    }
    return result;
}

// ---------------------------------------------------------------------------
// Diagnostics
// ---------------------------------------------------------------------------

struct DepthGapRow {
    int stage = 0;
    int longest_path = 0;
    int intermediate_sources = 0;
};

// Longest path in operations from a cell input to the output of the normal
// cell, plus the number of pairs reading from intermediate nodes.
inline DepthGapRow probe_genotype(const Genotype& g, int stage) {
    DepthGapRow row;
    row.stage = stage;
    std::vector<int> depth(g.normal.size() + 2, 0);
    for (std::size_t j = 0; j < g.normal.size(); ++j) {
        int d = 0;
        for (const auto& p : g.normal[j]) {
            d = std::max(d, depth[p.from] + 1);
            if (p.from >= 2) ++row.intermediate_sources;
        }
        depth[j + 2] = d;
        row.longest_path = std::max(row.longest_path, d);
    }
    return row;
}

inline std::string depth_gap_csv_header() { return "stage,longest_path,intermediate_sources"; }

inline std::vector<DepthGapRow> depth_gap_probe(const std::vector<AlphaSnapshot>& snapshots) {
    std::vector<DepthGapRow> rows;
    for (const auto& snap : snapshots) rows.push_back(probe_genotype(derive(snap), snap.meta.stage));
    return rows;
}

struct SkipSweepRow {
    int m = 0;
    int skip_count = 0;
    std::int64_t param_count = 0;
    double test_error = 1.0;
};

inline std::string skip_sweep_csv_header() { return "m,skip_count,param_count,test_error"; }

// Refines one snapshot at each M and trains the result briefly.
inline std::vector<SkipSweepRow> experiment_skip_sweep(const AlphaSnapshot& snap,
                                                       const std::vector<int>& ms,
                                                       const Dataset& train, const Dataset& test,
                                                       const EvalConfig& cfg,
                                                       const NetworkConfig& io,
                                                       std::uint64_t seed) {
    std::vector<SkipSweepRow> rows;
    for (int m : ms) {
        RefineResult res = refine_skip_count(snap, m);
        const EvalGeometry geo{cfg.depth, cfg.init_channels, io.in_channels, io.num_classes,
                               io.stem_multiplier};
        SkipSweepRow row;
        row.m = m;
        row.skip_count = skip_count(res.genotype.normal);
        row.param_count = count_parameters(res.genotype, geo);
        EvalNetwork net = build_eval_network(res.genotype, cfg, io, derive_seed(seed, "sweep"));
        row.test_error = train_eval(net, train, test, cfg, derive_seed(seed, "sweep/train"))
                             .final_test_error;
        rows.push_back(row);
    }
    return rows;
}

// Uniform equal-size candidate sampling for the random-space baseline. Every
// edge keeps `keep` distinct kinds drawn uniformly, in canonical order.
inline CandidateSets sample_random_sets(int n_intermediate, int keep, std::uint64_t seed) {
    Rng rng(derive_seed(seed, "random_space"));
    auto draw = [&]() {
        std::vector<OpKind> pool(kAllOps.begin(), kAllOps.end());
        rng.shuffle(pool);
        pool.resize(keep);
        std::sort(pool.begin(), pool.end());
        return pool;
    };
    CandidateSets sets;
    for (int e = 0; e < edge_count(n_intermediate); ++e) {
        sets.normal.push_back(draw());
        sets.reduce.push_back(draw());
    }
    return sets;
}

struct RandomSpaceRow {
    std::uint64_t seed = 0;
    std::string arm;  // approximated | random
    double test_error = 1.0;
};

inline std::string random_space_csv_header() { return "seed,arm,test_error"; }

// Final-stage comparison: the approximation-pruned candidate sets versus
// equal-size uniformly sampled sets (best of 3 draws, mirroring the baseline's
// "repeat 3 times and pick the best" protocol).
inline std::vector<RandomSpaceRow> experiment_random_space(
    const StagePlan& plan, const Dataset& train, const std::vector<int>& weight_half,
    const std::vector<int>& alpha_half, const Dataset& test, const NetworkConfig& netcfg,
    const OptimizerConfig& opt, const EvalConfig& ecfg, const std::vector<std::uint64_t>& seeds) {
    plan.validate();
    std::vector<RandomSpaceRow> rows;
    const auto& last = plan.stages.back();
    for (std::uint64_t seed : seeds) {
        SearchResult full = run_progressive_search(plan, train, weight_half, alpha_half, netcfg,
                                                   opt, seed);
        auto run_final = [&](const CandidateSets& sets, std::uint64_t stage_seed) {
            SearchNetwork net = rebuild_for_stage(last.depth, sets, netcfg,
                                                  derive_seed(stage_seed, "final/rebuild"));
            AlphaSnapshot snap =
                run_stage(net, last, static_cast<int>(plan.stages.size()), train, weight_half,
                          alpha_half, opt, stage_seed, plan.digest());
            Genotype g = derive(snap);
            EvalNetwork enet = build_eval_network(g, ecfg, netcfg, derive_seed(stage_seed, "eval"));
            return train_eval(enet, train, test, ecfg, derive_seed(stage_seed, "eval/train"))
                .final_test_error;
        };
        // The approximated arm reuses the pruned sets entering the last stage.
        CandidateSets approx_sets =
            approximate_space(full.snapshots[full.snapshots.size() - 2], last.op_budget);
        rows.push_back({seed, "approximated", run_final(approx_sets, derive_seed(seed, "approx"))});
        double best_random = 2.0;
        for (int rep = 0; rep < 3; ++rep) {
            CandidateSets rand_sets = sample_random_sets(
                netcfg.n_intermediate, last.op_budget, derive_seed(seed, "draw/" + std::to_string(rep)));
            best_random = std::min(best_random,
                                   run_final(rand_sets, derive_seed(seed, "rand/" + std::to_string(rep))));
        }
        rows.push_back({seed, "random", best_random});
    }
    return rows;
}

struct DropoutAblationRow {
    std::uint64_t seed = 0;
    std::string arm;  // regularized | unregularized
    int skip_count = 0;
};

inline std::string dropout_ablation_csv_header() { return "seed,arm,skip_count"; }

// Pre-refinement normal-cell skip counts with and without the decaying
// skip-connect dropout schedule, on the same data and seeds.
inline std::vector<DropoutAblationRow> experiment_dropout_ablation(
    StagePlan plan, const std::vector<double>& dropout_arm, const Dataset& train,
    const std::vector<int>& weight_half, const std::vector<int>& alpha_half,
    const NetworkConfig& netcfg, const OptimizerConfig& opt,
    const std::vector<std::uint64_t>& seeds) {
    if (dropout_arm.size() != plan.stages.size())
        throw ConfigError("dropout ablation: schedule length must match the stage count");
    std::vector<DropoutAblationRow> rows;
    for (std::uint64_t seed : seeds) {
        for (int arm = 0; arm < 2; ++arm) {
            StagePlan p = plan;
            for (std::size_t k = 0; k < p.stages.size(); ++k)
                p.stages[k].init_skip_dropout = arm == 0 ? dropout_arm[k] : 0.0;
            SearchResult res =
                run_progressive_search(p, train, weight_half, alpha_half, netcfg, opt, seed);
            Genotype g = derive(res.snapshots.back());
            rows.push_back({seed, arm == 0 ? "regularized" : "unregularized",
                            skip_count(g.normal)});
        }
    }
    return rows;
}

}  // namespace pdarts
