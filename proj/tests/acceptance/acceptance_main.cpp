// Acceptance gate: ten numbered checks, one pass/fail line each.
// Exit code 0 only if every check passes.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "pdarts/config.hpp"
#include "pdarts/eval.hpp"
#include "pdarts/genotype.hpp"
#include "pdarts/gradcheck.hpp"
#include "pdarts/search.hpp"

using namespace pdarts;
namespace fs = std::filesystem;

namespace {

int g_failures = 0;

void report(int idx, const char* name, bool pass, const std::string& detail = "") {
    std::printf("[%2d] %-34s %s%s%s\n", idx, name, pass ? "PASS" : "FAIL",
                detail.empty() ? "" : "  -- ", detail.c_str());
    std::fflush(stdout);
    if (!pass) ++g_failures;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

AlphaSnapshot random_snapshot(std::uint64_t seed, int n_intermediate = 4) {
    Rng rng(seed);
    AlphaSnapshot snap;
    snap.n_intermediate = n_intermediate;
    auto make_edges = [&]() {
        std::vector<SnapshotEdge> edges;
        for (int j = 0; j < n_intermediate; ++j)
            for (int i = 0; i < j + 2; ++i) {
                SnapshotEdge e{i, j + 2, {}};
                std::vector<double> a(kAllOps.size());
                for (auto& v : a) v = rng.normal(0.0, 1.0);
                double mx = *std::max_element(a.begin(), a.end());
                double z = 0.0;
                for (double v : a) z += std::exp(v - mx);
                for (std::size_t c = 0; c < kAllOps.size(); ++c)
                    e.entries.push_back({kAllOps[c], a[c], std::exp(a[c] - mx) / z});
                edges.push_back(std::move(e));
            }
        return edges;
    };
    snap.normal = make_edges();
    snap.reduce = make_edges();
    snap.meta = {1, seed, "acceptance"};
    return snap;
}

AlphaSnapshot skip_biased_snapshot(std::uint64_t seed) {
    AlphaSnapshot snap = random_snapshot(seed);
    Rng rng(derive_seed(seed, "bias"));
    for (auto& edge : snap.normal)
        if (rng.uniform(0.0, 1.0) < 0.75) {
            for (auto& ent : edge.entries)
                if (ent.op == OpKind::skip_connect) ent.weight += 1.0;
            double z = 0.0;
            for (auto& ent : edge.entries) z += ent.weight;
            for (auto& ent : edge.entries) ent.weight /= z;
        }
    return snap;
}

std::vector<std::vector<GenotypePair>> exhaustive_derive(const std::vector<SnapshotEdge>& edges,
                                                         int n_intermediate) {
    std::vector<std::vector<GenotypePair>> nodes;
    for (int j = 0; j < n_intermediate; ++j) {
        std::vector<const SnapshotEdge*> in;
        for (const auto& e : edges)
            if (e.to == j + 2) in.push_back(&e);
        double best_sum = -1.0;
        std::vector<GenotypePair> best;
        for (std::size_t a = 0; a < in.size(); ++a)
            for (std::size_t b = 0; b < in.size(); ++b) {
                if (a == b) continue;
                for (const auto& ea : in[a]->entries)
                    for (const auto& eb : in[b]->entries) {
                        if (ea.op == OpKind::zero || eb.op == OpKind::zero) continue;
                        if (ea.weight + eb.weight > best_sum) {
                            best_sum = ea.weight + eb.weight;
                            best = {{ea.op, in[a]->from}, {eb.op, in[b]->from}};
                        }
                    }
            }
        std::sort(best.begin(), best.end(),
                  [](const GenotypePair& x, const GenotypePair& y) { return x.from < y.from; });
        nodes.push_back(best);
    }
    return nodes;
}

bool cells_equal(const std::vector<std::vector<GenotypePair>>& a,
                 const std::vector<std::vector<GenotypePair>>& b) {
    if (a.size() != b.size()) return false;
    for (std::size_t j = 0; j < a.size(); ++j) {
        if (a[j].size() != b[j].size()) return false;
        for (std::size_t p = 0; p < a[j].size(); ++p)
            if (a[j][p].op != b[j][p].op || a[j][p].from != b[j][p].from) return false;
    }
    return true;
}

// -------------------------------------------------------------------------

void check1_gradients() {
    const auto t0 = std::chrono::steady_clock::now();
    bool pass = true;
    double worst = 0.0;
    for (std::uint64_t seed = 1; seed <= 20; ++seed)
        for (const auto& r : gradcheck::run_suite(seed)) {
            pass = pass && r.pass;
            worst = std::max(worst, r.max_rel_err);
        }
    const double secs = seconds_since(t0);
    pass = pass && secs < 120.0;
    char buf[128];
    std::snprintf(buf, sizeof(buf), "worst rel err %.2e, %.1fs over 20 seeds", worst, secs);
    report(1, "gradient correctness", pass, buf);
}

void check2_mixture_oracle() {
    Rng rng(2024);
    double worst_abs = 0.0, worst_sum = 0.0;
    for (int trial = 0; trial < 50; ++trial) {
        const int channels = 2 + static_cast<int>(rng.index(4));
        const int stride = rng.bernoulli(0.5) ? 2 : 1;
        const int n_ops = 2 + static_cast<int>(rng.index(7));
        std::vector<OpKind> kinds;
        {
            std::vector<OpKind> pool(kAllOps.begin(), kAllOps.end());
            rng.shuffle(pool);
            kinds.assign(pool.begin(), pool.begin() + n_ops);
        }
        Tensor alpha = param({n_ops});
        for (auto& v : *alpha.data) v = rng.normal(0.0, 1.0);
        Rng build_rng(derive_seed(2024, "edge/" + std::to_string(trial)));
        MixedEdge edge(0, 2, kinds, channels, stride, alpha, build_rng);
        Tensor x({2, channels, 8, 8}, true);
        for (auto& v : *x.data) v = rng.normal(0.0, 1.0);

        auto w = mixture_weights(edge);
        double s = 0.0;
        for (double v : w) s += v;
        worst_sum = std::max(worst_sum, std::abs(s - 1.0));

        Tape tape;
        Rng drng(1);
        Tensor mixed = mixed_forward(tape, edge, x, false, drng);
        std::vector<double> expect(mixed.size(), 0.0);
        for (std::size_t i = 0; i < edge.ops.size(); ++i) {
            Tape t2;
            Tensor y = edge.ops[i].forward(t2, x, false);
            for (std::int64_t p = 0; p < y.size(); ++p) expect[p] += w[i] * (*y.data)[p];
        }
        for (std::int64_t p = 0; p < mixed.size(); ++p)
            worst_abs = std::max(worst_abs, std::abs((*mixed.data)[p] - expect[p]));
    }
    char buf[128];
    std::snprintf(buf, sizeof(buf), "max abs dev %.2e, max weight-sum dev %.2e", worst_abs,
                  worst_sum);
    report(2, "mixture oracle equivalence", worst_abs <= 1e-10 && worst_sum <= 1e-12, buf);
}

void check3_approximation() {
    bool pass = true;
    for (std::uint64_t seed = 0; seed < 100 && pass; ++seed) {
        AlphaSnapshot snap = random_snapshot(seed);
        for (int keep : {1, 3, 5, 8}) {
            CandidateSets sets = approximate_space(snap, keep);
            auto oracle = [&](const SnapshotEdge& edge) {
                std::vector<SnapshotEntry> ents = edge.entries;
                std::sort(ents.begin(), ents.end(),
                          [](const SnapshotEntry& a, const SnapshotEntry& b) {
                              if (a.weight != b.weight) return a.weight > b.weight;
                              return static_cast<int>(a.op) < static_cast<int>(b.op);
                          });
                ents.resize(keep);
                std::vector<OpKind> kept;
                for (const auto& e : ents) kept.push_back(e.op);
                std::sort(kept.begin(), kept.end());
                return kept;
            };
            for (std::size_t e = 0; e < snap.normal.size(); ++e) {
                pass = pass && sets.normal[e] == oracle(snap.normal[e]);
                pass = pass && sets.reduce[e] == oracle(snap.reduce[e]);
            }
        }
    }
    // Stage budgets are pinned to 8/5/3 and pruning hits them exactly.
    for (const StagePlan& plan : {desk_plan(), paper_plan()}) {
        pass = pass && plan.stages[0].op_budget == 8 && plan.stages[1].op_budget == 5 &&
               plan.stages[2].op_budget == 3;
        AlphaSnapshot snap = random_snapshot(7);
        for (std::size_t k = 1; k < plan.stages.size(); ++k) {
            CandidateSets sets = approximate_space(snap, plan.stages[k].op_budget);
            for (const auto& c : sets.normal)
                pass = pass && static_cast<int>(c.size()) == plan.stages[k].op_budget;
        }
    }
    report(3, "search space approximation", pass, "100 snapshots, budgets 8/5/3");
}

void check4_derivation() {
    int mismatches = 0;
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
        AlphaSnapshot snap = random_snapshot(seed);
        Genotype g = derive(snap);
        if (!cells_equal(g.normal, exhaustive_derive(snap.normal, 4))) ++mismatches;
        if (!cells_equal(g.reduce, exhaustive_derive(snap.reduce, 4))) ++mismatches;
    }
    report(4, "derivation oracle", mismatches == 0,
           std::to_string(mismatches) + " mismatches over 100 snapshots");
}

void check5_refinement() {
    bool pass = true;
    for (std::uint64_t seed = 0; seed < 100 && pass; ++seed) {
        AlphaSnapshot snap = skip_biased_snapshot(seed);
        int skip_candidates = 0;
        for (const auto& e : snap.normal)
            for (const auto& ent : e.entries)
                if (ent.op == OpKind::skip_connect) ++skip_candidates;
        for (int m = 0; m <= 4 && pass; ++m) {
            RefineResult res = refine_skip_count(snap, m);
            pass = pass && skip_count(res.genotype.normal) <= m;
            pass = pass && static_cast<int>(res.trace.size()) <= skip_candidates + 1;
            // Procedure simulation with the independent derivation oracle.
            AlphaSnapshot work = snap;
            std::vector<std::vector<GenotypePair>> cell;
            while (true) {
                cell = exhaustive_derive(work.normal, 4);
                struct Occ {
                    int node, from;
                    double weight;
                };
                std::vector<Occ> occs;
                int skips = 0;
                for (int j = 0; j < static_cast<int>(cell.size()); ++j)
                    for (const auto& p : cell[j])
                        if (p.op == OpKind::skip_connect) {
                            ++skips;
                            for (const auto& e : work.normal)
                                if (e.from == p.from && e.to == j + 2)
                                    for (const auto& ent : e.entries)
                                        if (ent.op == OpKind::skip_connect)
                                            occs.push_back({j, p.from, ent.weight});
                        }
                if (skips <= m) break;
                std::stable_sort(occs.begin(), occs.end(),
                                 [](const Occ& a, const Occ& b) { return a.weight > b.weight; });
                for (std::size_t i = m; i < occs.size(); ++i)
                    for (auto& e : work.normal)
                        if (e.from == occs[i].from && e.to == occs[i].node + 2)
                            for (auto& ent : e.entries)
                                if (ent.op == OpKind::skip_connect) ent.weight = 0.0;
            }
            pass = pass && cells_equal(res.genotype.normal, cell);
        }
    }
    report(5, "refinement contract", pass, "100 snapshots x M in {0..4}");
}

void check6_parameter_monotonicity() {
    // Genotypes differing only in how many normal-cell pairs are identity.
    EvalGeometry geo{8, 16, 1, 4, 3};
    bool pass = true;
    std::int64_t prev = -1;
    for (int skips = 0; skips <= 8; ++skips) {
        Genotype g;
        int placed = 0;
        for (int j = 0; j < 4; ++j) {
            std::vector<GenotypePair> node;
            for (int p = 0; p < 2; ++p) {
                node.push_back({placed < skips ? OpKind::skip_connect : OpKind::sep_conv_3x3,
                                p == 0 ? 0 : 1});
                ++placed;
            }
            g.normal.push_back(node);
            g.reduce.push_back({{OpKind::max_pool_3x3, 0}, {OpKind::max_pool_3x3, 1}});
        }
        g.concat = {2, 3, 4, 5};
        const std::int64_t n = count_parameters(g, geo);
        if (prev >= 0 && n >= prev) pass = false;
        prev = n;
        // Builder census must equal the analytic count exactly (the builder
        // throws on divergence; an explicit compare keeps the check honest).
        NetworkConfig io;
        io.in_channels = 1;
        io.num_classes = 4;
        io.input_size = 16;
        EvalConfig cfg;
        cfg.depth = 8;
        cfg.init_channels = 16;
        EvalNetwork net = build_eval_network(g, cfg, io, 5);
        pass = pass && net.param_count() == n;
    }
    report(6, "parameter monotonicity", pass, "census == oracle, strictly decreasing in skips");
}

std::string digest_artifacts(const SearchResult& res, const Genotype& final_g) {
    std::string blob;
    for (const auto& s : res.snapshots) blob += snapshot_to_json(s).dump();
    for (const auto& m : res.metrics) blob += metrics_csv_row(m) + "\n";
    blob += genotype_to_json(final_g).dump();
    char buf[20];
    std::snprintf(buf, sizeof(buf), "%016llx",
                  static_cast<unsigned long long>(fnv1a64(blob.data(), blob.size())));
    return buf;
}

void check7_end_to_end() {
    const auto t0 = std::chrono::steady_clock::now();
    DatasetSpec spec;
    spec.generator = "shapes";
    spec.classes = 4;
    spec.image_size = 16;
    spec.train_count = 256;
    spec.test_count = 64;
    spec.seed = 9;
    Dataset train = make_dataset(spec, true);
    auto [wa, ab] = split_search(train, 9);
    NetworkConfig net;
    net.init_channels = 8;
    net.in_channels = 1;
    net.num_classes = 4;
    net.input_size = 16;
    OptimizerConfig opt;
    opt.batch_size = 32;
    StagePlan plan = desk_plan();

    auto run_once = [&]() {
        SearchResult res = run_progressive_search(plan, train, wa, ab, net, opt, 42);
        Genotype g = refine_skip_count(res.snapshots.back(), 2).genotype;
        return std::make_pair(digest_artifacts(res, g), res);
    };
    auto [d1, res1] = run_once();
    auto [d2, res2] = run_once();
    const double secs = seconds_since(t0);

    bool pass = d1 == d2;
    pass = pass && res1.snapshots.size() == 3;
    for (const auto& s : res1.snapshots) {
        // Every snapshot must survive a serialize -> parse round trip.
        AlphaSnapshot back = snapshot_from_json(snapshot_to_json(s));
        pass = pass && back.normal.size() == s.normal.size();
    }
    // Depth-normalized compute accounting: the stage-3 estimate must grow
    // slower than depth alone would suggest, i.e. pruning pays for growth.
    const double ratio = static_cast<double>(res1.accounting[2].activation_estimate) /
                         res1.accounting[0].activation_estimate;
    const double depth_ratio = static_cast<double>(plan.stages[2].depth) / plan.stages[0].depth;
    pass = pass && ratio < depth_ratio;
    pass = pass && secs <= 1800.0;
    char buf[160];
    std::snprintf(buf, sizeof(buf),
                  "digests %s, estimate ratio %.3f < %.3f, %.0fs for two runs",
                  d1 == d2 ? "identical" : "DIFFER", ratio, depth_ratio, secs);
    report(7, "end-to-end determinism", pass, buf);
}

void check8_regularization_effect() {
    const auto t0 = std::chrono::steady_clock::now();
    DatasetSpec spec;
    spec.generator = "shortcut";
    spec.classes = 4;
    spec.image_size = 12;
    spec.train_count = 128;
    spec.test_count = 32;
    spec.seed = 4;
    Dataset train = make_dataset(spec, true);
    auto [wa, ab] = split_search(train, 4);
    NetworkConfig net;
    net.init_channels = 6;
    net.in_channels = 1;
    net.num_classes = 4;
    net.input_size = 12;
    OptimizerConfig opt;
    opt.batch_size = 16;
    StagePlan plan;
    plan.stages = {{3, 8, 6, 2, 0.0}, {4, 5, 6, 2, 0.3}, {5, 3, 6, 2, 0.6}};

    std::vector<std::uint64_t> seeds = {11, 12, 13, 14, 15};
    auto rows = experiment_dropout_ablation(plan, {0.0, 0.3, 0.6}, train, wa, ab, net, opt, seeds);
    std::vector<int> with, without;
    for (const auto& r : rows)
        (r.arm == "regularized" ? with : without).push_back(r.skip_count);
    std::sort(with.begin(), with.end());
    std::sort(without.begin(), without.end());
    const double med_with = with[with.size() / 2];
    const double med_without = without[without.size() / 2];
    const double secs = seconds_since(t0);
    const bool pass = med_with < med_without && secs <= 10800.0;
    char buf[160];
    std::snprintf(buf, sizeof(buf),
                  "median skips: with dropout %.1f vs without %.1f over %zu seeds, %.0fs",
                  med_with, med_without, seeds.size(), secs);
    report(8, "regularization effect", pass, buf);
}

void check9_warm_phase() {
    DatasetSpec spec;
    spec.generator = "shapes";
    spec.classes = 4;
    spec.image_size = 12;
    spec.train_count = 96;
    spec.test_count = 16;
    spec.seed = 8;
    Dataset train = make_dataset(spec, true);
    auto [wa, ab] = split_search(train, 8);
    NetworkConfig netcfg;
    netcfg.init_channels = 6;
    netcfg.in_channels = 1;
    netcfg.num_classes = 4;
    netcfg.input_size = 12;
    OptimizerConfig opt;
    opt.batch_size = 16;
    const StagePlan plan = desk_plan();

    bool pass = true;
    CandidateSets sets = full_candidate_sets();
    for (std::size_t k = 0; k < plan.stages.size(); ++k) {
        StageEntry stage = plan.stages[k];
        stage.epochs = stage.warm_epochs;  // truncate at the end of the warm phase
        SearchNetwork net = rebuild_for_stage(stage.depth, sets, netcfg,
                                              derive_seed(31, "rebuild/" + std::to_string(k + 1)));
        std::vector<std::vector<double>> before;
        for (auto* a : net.alpha_params()) before.push_back(*a->data);
        run_stage(net, stage, static_cast<int>(k + 1), train, wa, ab, opt, 31, "d");
        auto alphas = net.alpha_params();
        for (std::size_t i = 0; i < alphas.size(); ++i)
            pass = pass && *alphas[i]->data == before[i];
        if (k + 1 < plan.stages.size()) {
            // Keep the progressive structure honest: prune before the next stage.
            AlphaSnapshot snap = make_snapshot(net, static_cast<int>(k + 1), 31, "d");
            sets = approximate_space(snap, plan.stages[k + 1].op_budget);
        }
    }
    report(9, "warm-phase alpha invariance", pass, "bit-identical through every stage's warm phase");
}

void check10_round_trips() {
    bool pass = true;
    // Snapshot and genotype byte-level round trips.
    AlphaSnapshot snap = random_snapshot(77);
    const std::string s1 = snapshot_to_json(snap).dump(2) + "\n";
    const std::string s2 = snapshot_to_json(snapshot_from_json(Json::parse(s1))).dump(2) + "\n";
    pass = pass && s1 == s2;
    Genotype g = derive(snap);
    const std::string g1 = genotype_to_json(g).dump(2) + "\n";
    const std::string g2 = genotype_to_json(genotype_from_json(Json::parse(g1))).dump(2) + "\n";
    pass = pass && g1 == g2;
    // Dataset byte round trip.
    DatasetSpec spec;
    spec.generator = "shapes";
    spec.classes = 3;
    spec.image_size = 8;
    spec.train_count = 24;
    spec.seed = 2;
    Dataset ds = make_dataset(spec, true);
    const auto dir = fs::temp_directory_path();
    const std::string p1 = (dir / "acc1.pdts").string(), p2 = (dir / "acc2.pdts").string();
    save_pdts(p1, ds);
    save_pdts(p2, load_pdts(p1));
    pass = pass && read_text_file(p1) == read_text_file(p2);
    fs::remove(p1);
    fs::remove(p2);
    // DOT goldens.
    Genotype sample;
    sample.normal = {{{OpKind::sep_conv_3x3, 0}, {OpKind::skip_connect, 1}},
                     {{OpKind::max_pool_3x3, 0}, {OpKind::dil_conv_5x5, 2}}};
    sample.reduce = {{{OpKind::avg_pool_3x3, 0}, {OpKind::sep_conv_5x5, 1}},
                     {{OpKind::skip_connect, 1}, {OpKind::dil_conv_3x3, 3}}};
    sample.concat = {2, 3};
    sample.provenance = {3, 17, "abc123"};
    const std::string golden = PDARTS_GOLDEN_DIR;
    pass = pass && export_graph(sample, "normal") == read_text_file(golden + "/sample_normal.dot");
    pass = pass && export_graph(sample, "reduce") == read_text_file(golden + "/sample_reduce.dot");
    report(10, "format round trips", pass, "snapshot/genotype/dataset/DOT");
}

}  // namespace

int main() {
    check1_gradients();
    check2_mixture_oracle();
    check3_approximation();
    check4_derivation();
    check5_refinement();
    check6_parameter_monotonicity();
    check7_end_to_end();
    check8_regularization_effect();
    check9_warm_phase();
    check10_round_trips();
    std::printf("%s (%d/10)\n", g_failures == 0 ? "ACCEPTANCE PASS" : "ACCEPTANCE FAIL",
                10 - g_failures);
    return g_failures == 0 ? 0 : 1;
}
