#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "pdarts/data.hpp"
#include "pdarts/genotype.hpp"
#include "pdarts/supernet.hpp"

namespace pdarts {

// ---------------------------------------------------------------------------
// Plans and optimizers
// ---------------------------------------------------------------------------

struct StageEntry {
    int depth = 5;
    int op_budget = 8;  // candidates per edge entering this stage
    int epochs = 12;
    int warm_epochs = 4;
    double init_skip_dropout = 0.0;
};

struct StagePlan {
    std::vector<StageEntry> stages;

    void validate() const {
        if (stages.empty()) throw ConfigError("plan: no stages");
        if (stages.front().op_budget != 8)
            throw ConfigError("plan: stage 1 must start from the full 8-operation space");
        for (std::size_t k = 0; k < stages.size(); ++k) {
            const auto& s = stages[k];
            if (s.warm_epochs >= s.epochs)
                throw ConfigError("plan: warm_epochs must be < epochs in stage " + std::to_string(k + 1));
            if (s.init_skip_dropout < 0.0 || s.init_skip_dropout > 1.0)
                throw ConfigError("plan: init_skip_dropout outside [0,1] in stage " + std::to_string(k + 1));
            if (k > 0) {
                if (s.depth <= stages[k - 1].depth)
                    throw ConfigError("plan: depths must strictly increase");
                if (s.op_budget >= stages[k - 1].op_budget)
                    throw ConfigError("plan: op budgets must strictly decrease");
            }
        }
    }

    std::string digest() const {
        std::string repr;
        for (const auto& s : stages)
            repr += std::to_string(s.depth) + "/" + std::to_string(s.op_budget) + "/" +
                    std::to_string(s.epochs) + "/" + std::to_string(s.warm_epochs) + "/" +
                    format_float(s.init_skip_dropout) + ";";
        char buf[20];
        std::snprintf(buf, sizeof(buf), "%016llx",
                      static_cast<unsigned long long>(fnv1a64(repr)));
        return buf;
    }
};

// Depths 5/8/11 with budgets 8/5/3 keep an end-to-end run in minutes on a CPU.
inline StagePlan desk_plan() {
    return {{{5, 8, 12, 4, 0.0}, {8, 5, 12, 4, 0.4}, {11, 3, 12, 4, 0.7}}};
}

// The full-size schedule: depths 5/11/17, 25 epochs with 10 warm, batch 96.
inline StagePlan paper_plan() {
    return {{{5, 8, 25, 10, 0.0}, {11, 5, 25, 10, 0.4}, {17, 3, 25, 10, 0.7}}};
}

struct AdamConfig {
    double lr = 0.0006;
    double weight_decay = 0.001;
    double beta1 = 0.5;
    double beta2 = 0.999;
    double eps = 1e-8;
};

struct SgdConfig {
    double lr = 0.025;
    double momentum = 0.9;
    double weight_decay = 3e-4;
};

struct OptimizerConfig {
    AdamConfig alpha;
    SgdConfig weight;
    int batch_size = 32;
};

// Cosine annealing that reaches its floor (0) exactly at the last epoch.
inline double cosine_lr(double lr0, int epoch, int total_epochs) {
    if (total_epochs <= 1) return lr0;
    return 0.5 * lr0 * (1.0 + std::cos(M_PI * epoch / (total_epochs - 1)));
}

class SgdMomentum {
public:
    explicit SgdMomentum(SgdConfig cfg) : cfg_(cfg) {}

    void step(const std::vector<Tensor*>& params, double lr) {
        if (velocity_.empty()) {
            for (auto* p : params) velocity_.emplace_back(p->size(), 0.0);
        }
        for (std::size_t i = 0; i < params.size(); ++i) {
            auto& p = *params[i];
            auto& v = velocity_[i];
            for (std::int64_t j = 0; j < p.size(); ++j) {
                const double g = (*p.grad)[j] + cfg_.weight_decay * (*p.data)[j];
                v[j] = cfg_.momentum * v[j] + g;
                (*p.data)[j] -= lr * v[j];
            }
        }
    }

private:
    SgdConfig cfg_;
    std::vector<std::vector<double>> velocity_;
};

class Adam {
public:
    explicit Adam(AdamConfig cfg) : cfg_(cfg) {}

    void step(const std::vector<Tensor*>& params, double lr) {
        if (m_.empty()) {
            for (auto* p : params) {
                m_.emplace_back(p->size(), 0.0);
                v_.emplace_back(p->size(), 0.0);
            }
        }
        ++t_;
        const double bc1 = 1.0 - std::pow(cfg_.beta1, t_);
        const double bc2 = 1.0 - std::pow(cfg_.beta2, t_);
        for (std::size_t i = 0; i < params.size(); ++i) {
            auto& p = *params[i];
            for (std::int64_t j = 0; j < p.size(); ++j) {
                const double g = (*p.grad)[j] + cfg_.weight_decay * (*p.data)[j];
                m_[i][j] = cfg_.beta1 * m_[i][j] + (1.0 - cfg_.beta1) * g;
                v_[i][j] = cfg_.beta2 * v_[i][j] + (1.0 - cfg_.beta2) * g * g;
                (*p.data)[j] -= lr * (m_[i][j] / bc1) / (std::sqrt(v_[i][j] / bc2) + cfg_.eps);
            }
        }
    }

private:
    AdamConfig cfg_;
    std::vector<std::vector<double>> m_, v_;
    std::int64_t t_ = 0;
};

// Linear decay of the skip-connect dropout rate; positive until stage end.
inline double dropout_schedule(double init_rate, int epoch, int total_epochs) {
    if (init_rate < 0.0 || init_rate > 1.0)
        throw ConfigError("dropout_schedule: init rate " + format_float(init_rate) +
                          " outside [0,1]");
    if (epoch < 0 || epoch >= total_epochs)
        throw ConfigError("dropout_schedule: epoch " + std::to_string(epoch) + " outside [0," +
                          std::to_string(total_epochs) + ")");
    return init_rate * (1.0 - static_cast<double>(epoch) / total_epochs);
}

// ---------------------------------------------------------------------------
// Stage training
// ---------------------------------------------------------------------------

struct EpochMetrics {
    int stage = 0;
    int epoch = 0;
    std::string phase;  // warm | joint
    double train_loss = 0.0;
    double val_loss = 0.0;
    double skip_dropout_rate = 0.0;
    double lr_w = 0.0;
    double lr_alpha = 0.0;
};

inline std::string metrics_csv_header() {
    return "stage,epoch,phase,train_loss,val_loss,skip_dropout_rate,lr_w,lr_alpha";
}

inline std::string metrics_csv_row(const EpochMetrics& m) {
    std::ostringstream os;
    os << m.stage << ',' << m.epoch << ',' << m.phase << ',' << format_float(m.train_loss) << ','
       << format_float(m.val_loss) << ',' << format_float(m.skip_dropout_rate) << ','
       << format_float(m.lr_w) << ',' << format_float(m.lr_alpha);
    return os.str();
}

// One progressive stage: warm epochs update only operation weights on the
// weight half; joint epochs alternate one architecture step (Adam, alpha
// half) with one weight step (SGD, weight half) per mini-batch, first order.
inline AlphaSnapshot run_stage(SearchNetwork& net, const StageEntry& stage, int stage_index,
                               const Dataset& train, const std::vector<int>& weight_half,
                               const std::vector<int>& alpha_half, const OptimizerConfig& opt,
                               std::uint64_t run_seed, const std::string& plan_digest,
                               std::vector<EpochMetrics>* metrics = nullptr) {
    SgdMomentum sgd(opt.weight);
    Adam adam(opt.alpha);
    auto weights = net.weight_params();
    auto alphas = net.alpha_params();
    auto zero_all = [&] {
        for (auto* p : weights) p->zero_grad();
        for (auto* p : alphas) p->zero_grad();
    };
    const std::uint64_t stage_seed = derive_seed(run_seed, "stage/" + std::to_string(stage_index));
    for (int epoch = 0; epoch < stage.epochs; ++epoch) {
        const double rate = dropout_schedule(stage.init_skip_dropout, epoch, stage.epochs);
        net.set_skip_dropout(rate);
        const double lr_w = cosine_lr(opt.weight.lr, epoch, stage.epochs);
        const bool warm = epoch < stage.warm_epochs;
        Rng shuffle_rng(derive_seed(stage_seed, "shuffle/" + std::to_string(epoch)));
        auto batches_w = make_batches(weight_half, opt.batch_size, shuffle_rng);
        auto batches_a = make_batches(alpha_half, opt.batch_size, shuffle_rng);
        double train_loss_acc = 0.0, val_loss_acc = 0.0;
        int val_steps = 0;
        for (std::size_t bi = 0; bi < batches_w.size(); ++bi) {
            try {
                if (!warm && !batches_a.empty()) {
                    const auto& vb = batches_a[bi % batches_a.size()];
                    zero_all();
                    Tape tape;
                    Tensor loss = cross_entropy(tape, net.forward(tape, train.batch(vb), true),
                                                train.batch_labels(vb));
                    tape.backward(loss);
                    adam.step(alphas, opt.alpha.lr);
                    val_loss_acc += (*loss.data)[0];
                    ++val_steps;
                }
                const auto& wb = batches_w[bi];
                zero_all();
                Tape tape;
                Tensor loss = cross_entropy(tape, net.forward(tape, train.batch(wb), true),
                                            train.batch_labels(wb));
                tape.backward(loss);
                sgd.step(weights, lr_w);
                train_loss_acc += (*loss.data)[0];
            } catch (const NonFiniteError& e) {
                throw NonFiniteError("stage " + std::to_string(stage_index) + " epoch " +
                                     std::to_string(epoch) + " batch " + std::to_string(bi) +
                                     " (lr_w=" + format_float(lr_w) +
                                     ", lr_alpha=" + format_float(opt.alpha.lr) + "): " + e.what());
            }
        }
        if (metrics) {
            EpochMetrics m;
            m.stage = stage_index;
            m.epoch = epoch;
            m.phase = warm ? "warm" : "joint";
            m.train_loss = batches_w.empty() ? 0.0 : train_loss_acc / batches_w.size();
            m.val_loss = val_steps ? val_loss_acc / val_steps : 0.0;
            m.skip_dropout_rate = rate;
            m.lr_w = lr_w;
            m.lr_alpha = warm ? 0.0 : opt.alpha.lr;
            metrics->push_back(m);
        }
    }
    return make_snapshot(net, stage_index, run_seed, plan_digest);
}

// ---------------------------------------------------------------------------
// Search space approximation
// ---------------------------------------------------------------------------

// Per edge independently, keep the `keep` candidates with the largest softmax
// weights; ties break toward the lower OpKind enumeration value. Candidate
// lists stay in enumeration order.
inline CandidateSets approximate_space(const AlphaSnapshot& snap, int keep) {
    auto prune = [&](const std::vector<SnapshotEdge>& edges) {
        std::vector<std::vector<OpKind>> out;
        for (const auto& edge : edges) {
            if (keep > static_cast<int>(edge.entries.size()))
                throw ConfigError("approximate_space: keep " + std::to_string(keep) +
                                  " exceeds candidate count " + std::to_string(edge.entries.size()) +
                                  " on edge (" + std::to_string(edge.from) + "," +
                                  std::to_string(edge.to) + ")");
            std::vector<int> order(edge.entries.size());
            for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
            // Entries are in enumeration order, so a stable sort by weight
            // implements the fixed tie-break.
            std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
                return edge.entries[a].weight > edge.entries[b].weight;
            });
            order.resize(keep);
            std::sort(order.begin(), order.end());
            std::vector<OpKind> kept;
            for (int i : order) kept.push_back(edge.entries[i].op);
            out.push_back(std::move(kept));
        }
        return out;
    };
    CandidateSets sets;
    sets.normal = prune(snap.normal);
    sets.reduce = prune(snap.reduce);
    return sets;
}

// ---------------------------------------------------------------------------
// Progressive search driver
// ---------------------------------------------------------------------------

struct StageAccounting {
    int stage = 0;
    int depth = 0;
    int op_budget = 0;
    std::int64_t weight_params = 0;
    std::int64_t activation_estimate = 0;
};

struct SearchResult {
    std::vector<AlphaSnapshot> snapshots;
    std::vector<EpochMetrics> metrics;
    std::vector<StageAccounting> accounting;
    CandidateSets final_sets;
};

// Runs every stage: rebuild with fresh weights and surviving candidates,
// train, snapshot, prune (except after the last stage). When out_dir is
// non-empty, persists per-stage snapshots, the metrics CSV and an accounting
// report there.
inline SearchResult run_progressive_search(const StagePlan& plan, const Dataset& train,
                                           const std::vector<int>& weight_half,
                                           const std::vector<int>& alpha_half,
                                           const NetworkConfig& netcfg, const OptimizerConfig& opt,
                                           std::uint64_t seed, const std::string& out_dir = "") {
    plan.validate();
    const std::string digest = plan.digest();
    SearchResult result;
    CandidateSets sets = full_candidate_sets(netcfg.n_intermediate);
    for (std::size_t k = 0; k < plan.stages.size(); ++k) {
        const auto& stage = plan.stages[k];
        SearchNetwork net = rebuild_for_stage(
            stage.depth, sets, netcfg, derive_seed(seed, "rebuild/" + std::to_string(k + 1)));
        AlphaSnapshot snap =
            run_stage(net, stage, static_cast<int>(k + 1), train, weight_half, alpha_half, opt,
                      seed, digest, &result.metrics);
        result.accounting.push_back({static_cast<int>(k + 1), stage.depth, stage.op_budget,
                                     net.weight_param_count(), net.activation_estimate()});
        result.snapshots.push_back(snap);
        if (!out_dir.empty())
            save_snapshot(out_dir + "/snapshot_stage" + std::to_string(k + 1) + ".json", snap);
        if (k + 1 < plan.stages.size())
            sets = approximate_space(snap, plan.stages[k + 1].op_budget);
    }
    result.final_sets = sets;
    if (!out_dir.empty()) {
        std::ofstream mf(out_dir + "/metrics.csv");
        mf << metrics_csv_header() << '\n';
        for (const auto& m : result.metrics) mf << metrics_csv_row(m) << '\n';
        std::ofstream af(out_dir + "/accounting.csv");
        af << "stage,depth,op_budget,weight_params,activation_estimate\n";
        for (const auto& a : result.accounting)
            af << a.stage << ',' << a.depth << ',' << a.op_budget << ',' << a.weight_params << ','
               << a.activation_estimate << '\n';
    }
    return result;
}

}  // namespace pdarts
