#pragma once

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "pdarts/data.hpp"
#include "pdarts/op_space.hpp"
#include "pdarts/supernet.hpp"

namespace pdarts {

using Json = nlohmann::ordered_json;

inline constexpr int kGenotypeSchemaVersion = 1;
inline constexpr int kSnapshotSchemaVersion = 1;

// Floats in artifact files are serialized as 17-significant-digit strings so
// that write -> read -> write is byte-identical.
inline std::string format_float(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

inline double parse_float(const Json& j, const std::string& field) {
    if (!j.is_string()) throw ParseError("expected float string in field '" + field + "'");
    const std::string s = j.get<std::string>();
    std::size_t pos = 0;
    double v;
    try {
        v = std::stod(s, &pos);
    } catch (const std::exception&) {
        throw ParseError("malformed float '" + s + "' in field '" + field + "'");
    }
    if (pos != s.size()) throw ParseError("malformed float '" + s + "' in field '" + field + "'");
    return v;
}

// ---------------------------------------------------------------------------
// AlphaSnapshot
// ---------------------------------------------------------------------------

struct SnapshotEntry {
    OpKind op;
    double alpha = 0.0;
    double weight = 0.0;
};

struct SnapshotEdge {
    int from = 0;  // 0,1 = cell inputs; 2+t = intermediate node t
    int to = 0;    // 2..(n_intermediate+1)
    std::vector<SnapshotEntry> entries;
};

struct SnapshotMeta {
    int stage = 0;
    std::uint64_t seed = 0;
    std::string plan_digest;
};

// Serialized architecture parameters per edge per cell type, the input to
// derivation and refinement.
struct AlphaSnapshot {
    std::vector<SnapshotEdge> normal;
    std::vector<SnapshotEdge> reduce;
    SnapshotMeta meta;
    int n_intermediate = 4;
};

inline AlphaSnapshot make_snapshot(const SearchNetwork& net, int stage, std::uint64_t seed,
                                   const std::string& plan_digest) {
    AlphaSnapshot snap;
    snap.n_intermediate = net.config().n_intermediate;
    snap.meta = {stage, seed, plan_digest};
    auto build = [&](const std::vector<std::vector<OpKind>>& sets,
                     const std::vector<Tensor>& alphas) {
        std::vector<SnapshotEdge> edges;
        int e = 0;
        for (int j = 0; j < snap.n_intermediate; ++j)
            for (int i = 0; i < j + 2; ++i, ++e) {
                SnapshotEdge edge{i, j + 2, {}};
                const auto& a = *alphas[e].data;
                double mx = *std::max_element(a.begin(), a.end());
                double z = 0.0;
                for (double v : a) z += std::exp(v - mx);
                for (std::size_t c = 0; c < sets[e].size(); ++c)
                    edge.entries.push_back({sets[e][c], a[c], std::exp(a[c] - mx) / z});
                edges.push_back(std::move(edge));
            }
        return edges;
    };
    snap.normal = build(net.candidate_sets().normal, net.alphas().normal);
    snap.reduce = build(net.candidate_sets().reduce, net.alphas().reduce);
    return snap;
}

// ---------------------------------------------------------------------------
// Genotype
// ---------------------------------------------------------------------------

struct GenotypePair {
    OpKind op;
    int from;
};

struct Genotype {
    std::vector<std::vector<GenotypePair>> normal;  // one list of 2 pairs per node
    std::vector<std::vector<GenotypePair>> reduce;
    std::vector<int> concat;  // intermediate node ids concatenated at output
    SnapshotMeta provenance;
};

inline int skip_count(const std::vector<std::vector<GenotypePair>>& cell) {
    int n = 0;
    for (const auto& node : cell)
        for (const auto& p : node)
            if (p.op == OpKind::skip_connect) ++n;
    return n;
}

namespace detail_geno {

// Best non-zero candidate of one edge by weight; ties break toward the lower
// OpKind enumeration value. Edges whose only candidate is zero are ineligible.
inline std::optional<SnapshotEntry> best_non_zero(const SnapshotEdge& edge) {
    std::optional<SnapshotEntry> best;
    for (const auto& ent : edge.entries) {
        if (ent.op == OpKind::zero) continue;
        if (!best || ent.weight > best->weight ||
            (ent.weight == best->weight && static_cast<int>(ent.op) < static_cast<int>(best->op)))
            best = ent;
    }
    return best;
}

inline std::vector<std::vector<GenotypePair>> derive_cell(const std::vector<SnapshotEdge>& edges,
                                                          int n_intermediate) {
    std::vector<std::vector<GenotypePair>> nodes;
    for (int j = 0; j < n_intermediate; ++j) {
        struct Pick {
            int from;
            OpKind op;
            double weight;
        };
        std::vector<Pick> picks;
        for (const auto& edge : edges) {
            if (edge.to != j + 2) continue;
            if (auto best = best_non_zero(edge))
                picks.push_back({edge.from, best->op, best->weight});
        }
        if (picks.size() < 2)
            throw ParseError("derive: node " + std::to_string(j + 2) +
                             " has fewer than two eligible incoming edges");
        // Two top-weighted edges; ties break toward the lower input index.
        std::stable_sort(picks.begin(), picks.end(),
                         [](const Pick& a, const Pick& b) { return a.weight > b.weight; });
        std::vector<GenotypePair> chosen{{picks[0].op, picks[0].from}, {picks[1].op, picks[1].from}};
        std::sort(chosen.begin(), chosen.end(),
                  [](const GenotypePair& a, const GenotypePair& b) { return a.from < b.from; });
        nodes.push_back(std::move(chosen));
    }
    return nodes;
}

}  // namespace detail_geno

// Keep the two top-weighted non-zero operations (at most one per edge) for
// each intermediate node, in both cell types.
inline Genotype derive(const AlphaSnapshot& snap) {
    Genotype g;
    g.normal = detail_geno::derive_cell(snap.normal, snap.n_intermediate);
    g.reduce = detail_geno::derive_cell(snap.reduce, snap.n_intermediate);
    for (int j = 0; j < snap.n_intermediate; ++j) g.concat.push_back(j + 2);
    g.provenance = snap.meta;
    return g;
}

struct RefineTraceStep {
    int iteration;
    int skip_count;
};

struct RefineResult {
    Genotype genotype;
    std::vector<RefineTraceStep> trace;
};

// Iteratively cap the number of skip-connects in the normal cell at M: keep
// the M largest-weight skips in the current topology, zero the weight of every
// other skip in the topology, and re-derive until at most M remain.
inline RefineResult refine_skip_count(const AlphaSnapshot& snapshot, int m) {
    if (m < 0) throw ConfigError("refine_skip_count: M must be >= 0");
    AlphaSnapshot work = snapshot;
    int skip_candidates = 0;
    for (const auto& edge : work.normal)
        for (const auto& ent : edge.entries)
            if (ent.op == OpKind::skip_connect) ++skip_candidates;
    RefineResult result;
    for (int iter = 0; iter <= skip_candidates; ++iter) {
        Genotype g = derive(work);
        const int count = skip_count(g.normal);
        result.trace.push_back({iter, count});
        if (count <= m) {
            result.genotype = std::move(g);
            return result;
        }
        // Weights of the skip occurrences currently in the topology.
        struct Occ {
            int node;
            int from;
            double weight;
        };
        std::vector<Occ> occs;
        for (int j = 0; j < static_cast<int>(g.normal.size()); ++j)
            for (const auto& pair : g.normal[j])
                if (pair.op == OpKind::skip_connect) {
                    for (const auto& edge : work.normal)
                        if (edge.from == pair.from && edge.to == j + 2)
                            for (const auto& ent : edge.entries)
                                if (ent.op == OpKind::skip_connect)
                                    occs.push_back({j, pair.from, ent.weight});
                }
        std::stable_sort(occs.begin(), occs.end(),
                         [](const Occ& a, const Occ& b) { return a.weight > b.weight; });
        for (std::size_t i = m; i < occs.size(); ++i) {
            for (auto& edge : work.normal)
                if (edge.from == occs[i].from && edge.to == occs[i].node + 2)
                    for (auto& ent : edge.entries)
                        if (ent.op == OpKind::skip_connect) ent.weight = 0.0;
        }
    }
    throw TapeError("refine_skip_count: exceeded the skip-candidate iteration bound of " +
                    std::to_string(skip_candidates));
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

inline Json genotype_to_json(const Genotype& g) {
    auto cell = [](const std::vector<std::vector<GenotypePair>>& nodes) {
        Json out = Json::array();
        for (const auto& node : nodes) {
            Json jn = Json::array();
            for (const auto& p : node) jn.push_back(Json::array({op_name(p.op), p.from}));
            out.push_back(jn);
        }
        return out;
    };
    Json j;
    j["schema_version"] = kGenotypeSchemaVersion;
    j["normal"] = cell(g.normal);
    j["reduce"] = cell(g.reduce);
    j["concat"] = g.concat;
    j["provenance"] = {{"seed", g.provenance.seed},
                       {"plan_digest", g.provenance.plan_digest},
                       {"stage", g.provenance.stage}};
    return j;
}

inline Genotype genotype_from_json(const Json& j) {
    if (!j.contains("schema_version") || j["schema_version"].get<int>() != kGenotypeSchemaVersion)
        throw ParseError("genotype: missing or mismatched schema_version");
    auto cell = [](const Json& nodes, const std::string& field) {
        std::vector<std::vector<GenotypePair>> out;
        for (const auto& jn : nodes) {
            std::vector<GenotypePair> node;
            for (const auto& jp : jn) {
                const std::string name = jp.at(0).get<std::string>();
                auto op = op_from_name(name);
                if (!op) throw ParseError("genotype: unknown op name '" + name + "' in field '" + field + "'");
                if (*op == OpKind::zero)
                    throw ParseError("genotype: zero operation not allowed in field '" + field + "'");
                node.push_back({*op, jp.at(1).get<int>()});
            }
            if (node.size() != 2)
                throw ParseError("genotype: node in '" + field + "' must have exactly two pairs");
            if (node[0].from == node[1].from)
                throw ParseError("genotype: duplicate input node in '" + field + "'");
            out.push_back(std::move(node));
        }
        return out;
    };
    Genotype g;
    g.normal = cell(j.at("normal"), "normal");
    g.reduce = cell(j.at("reduce"), "reduce");
    g.concat = j.at("concat").get<std::vector<int>>();
    const auto& prov = j.at("provenance");
    g.provenance.seed = prov.at("seed").get<std::uint64_t>();
    g.provenance.plan_digest = prov.at("plan_digest").get<std::string>();
    g.provenance.stage = prov.at("stage").get<int>();
    return g;
}

inline Json snapshot_to_json(const AlphaSnapshot& snap) {
    auto cell = [](const std::vector<SnapshotEdge>& edges) {
        Json out = Json::array();
        for (const auto& e : edges) {
            Json je;
            je["from"] = e.from;
            je["to"] = e.to;
            Json ops = Json::array();
            for (const auto& ent : e.entries)
                ops.push_back(Json::array(
                    {op_name(ent.op), format_float(ent.alpha), format_float(ent.weight)}));
            je["ops"] = ops;
            out.push_back(je);
        }
        return out;
    };
    Json j;
    j["schema_version"] = kSnapshotSchemaVersion;
    j["n_intermediate"] = snap.n_intermediate;
    j["normal"] = cell(snap.normal);
    j["reduce"] = cell(snap.reduce);
    j["metadata"] = {{"stage", snap.meta.stage},
                     {"seed", snap.meta.seed},
                     {"plan_digest", snap.meta.plan_digest}};
    return j;
}

inline AlphaSnapshot snapshot_from_json(const Json& j) {
    if (!j.contains("schema_version") || j["schema_version"].get<int>() != kSnapshotSchemaVersion)
        throw ParseError("snapshot: missing or mismatched schema_version");
    auto cell = [](const Json& edges, const std::string& field) {
        std::vector<SnapshotEdge> out;
        for (const auto& je : edges) {
            SnapshotEdge e;
            e.from = je.at("from").get<int>();
            e.to = je.at("to").get<int>();
            double wsum = 0.0;
            for (const auto& jo : je.at("ops")) {
                const std::string name = jo.at(0).get<std::string>();
                auto op = op_from_name(name);
                if (!op) throw ParseError("snapshot: unknown op name '" + name + "' in field '" + field + "'");
                SnapshotEntry ent{*op, parse_float(jo.at(1), field + ".alpha"),
                                  parse_float(jo.at(2), field + ".weight")};
                wsum += ent.weight;
                e.entries.push_back(ent);
            }
            if (std::abs(wsum - 1.0) > 1e-9)
                throw ParseError("snapshot: edge (" + std::to_string(e.from) + "," +
                                 std::to_string(e.to) + ") in '" + field + "' weights sum to " +
                                 format_float(wsum) + ", expected 1");
            out.push_back(std::move(e));
        }
        return out;
    };
    AlphaSnapshot snap;
    snap.n_intermediate = j.at("n_intermediate").get<int>();
    snap.normal = cell(j.at("normal"), "normal");
    snap.reduce = cell(j.at("reduce"), "reduce");
    const auto& meta = j.at("metadata");
    snap.meta.stage = meta.at("stage").get<int>();
    snap.meta.seed = meta.at("seed").get<std::uint64_t>();
    snap.meta.plan_digest = meta.at("plan_digest").get<std::string>();
    return snap;
}

inline void write_text_file(const std::string& path, const std::string& text) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw ParseError("cannot open " + path + " for writing");
    f << text;
}

inline std::string read_text_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw ParseError("cannot open " + path);
    std::ostringstream os;
    os << f.rdbuf();
    return os.str();
}

inline void save_genotype(const std::string& path, const Genotype& g) {
    write_text_file(path, genotype_to_json(g).dump(2) + "\n");
}

inline Genotype load_genotype(const std::string& path) {
    try {
        return genotype_from_json(Json::parse(read_text_file(path)));
    } catch (const nlohmann::json::exception& e) {
        throw ParseError("genotype: " + std::string(e.what()));
    }
}

inline void save_snapshot(const std::string& path, const AlphaSnapshot& snap) {
    write_text_file(path, snapshot_to_json(snap).dump(2) + "\n");
}

inline AlphaSnapshot load_snapshot(const std::string& path) {
    try {
        return snapshot_from_json(Json::parse(read_text_file(path)));
    } catch (const nlohmann::json::exception& e) {
        throw ParseError("snapshot: " + std::string(e.what()));
    }
}

// ---------------------------------------------------------------------------
// Graph export (DOT)
// ---------------------------------------------------------------------------

inline std::string export_graph(const Genotype& g, const std::string& cell_name = "normal") {
    const auto& nodes = cell_name == "reduce" ? g.reduce : g.normal;
    std::ostringstream os;
    os << "digraph " << cell_name << " {\n";
    os << "  rankdir=LR;\n";
    os << "  \"c_{k-2}\" [shape=box];\n";
    os << "  \"c_{k-1}\" [shape=box];\n";
    for (std::size_t j = 0; j < nodes.size(); ++j)
        os << "  \"" << j << "\" [shape=ellipse];\n";
    os << "  \"output\" [shape=box];\n";
    auto node_label = [&](int idx) -> std::string {
        if (idx == 0) return "c_{k-2}";
        if (idx == 1) return "c_{k-1}";
        return std::to_string(idx - 2);
    };
    for (std::size_t j = 0; j < nodes.size(); ++j)
        for (const auto& p : nodes[j])
            os << "  \"" << node_label(p.from) << "\" -> \"" << j << "\" [label=\"" << op_name(p.op)
               << "\"];\n";
    for (int c : g.concat) os << "  \"" << (c - 2) << "\" -> \"output\";\n";
    os << "}\n";
    return os.str();
}

// ---------------------------------------------------------------------------
// Parameter accounting for the discrete evaluation network
// ---------------------------------------------------------------------------

struct EvalGeometry {
    int depth = 8;
    int init_channels = 16;
    int in_channels = 1;
    int num_classes = 4;
    int stem_multiplier = 3;
};

// Analytic learnable-parameter count of the evaluation network built from a
// genotype; the builder's census must match this exactly.
inline std::int64_t count_parameters(const Genotype& g, const EvalGeometry& geo) {
    const auto red_pos = reduction_positions(geo.depth);
    const int n_inter = static_cast<int>(g.normal.size());
    const int c_stem = geo.init_channels * geo.stem_multiplier;
    std::int64_t total = 9LL * geo.in_channels * c_stem + 2LL * c_stem;  // stem conv + BN
    auto relu_conv_bn = [](std::int64_t cin, std::int64_t cout) { return cin * cout + 2 * cout; };
    auto factorized_reduce = [](std::int64_t cin, std::int64_t cout) {
        return cin * (cout / 2) + cin * (cout - cout / 2) + 2 * cout;
    };
    int c_pp = c_stem, c_p = c_stem, c_curr = geo.init_channels;
    bool reduction_prev = false;
    for (int i = 0; i < geo.depth; ++i) {
        const bool reduction = (i == red_pos[0] || i == red_pos[1]);
        if (reduction) c_curr *= 2;
        total += reduction_prev ? factorized_reduce(c_pp, c_curr) : relu_conv_bn(c_pp, c_curr);
        total += relu_conv_bn(c_p, c_curr);
        const auto& cell = reduction ? g.reduce : g.normal;
        for (std::size_t j = 0; j < cell.size(); ++j)
            for (const auto& pair : cell[j]) {
                const int stride = (reduction && pair.from < 2) ? 2 : 1;
                total += op_param_count(pair.op, c_curr, stride);
            }
        reduction_prev = reduction;
        c_pp = c_p;
        c_p = n_inter * c_curr;
    }
    total += static_cast<std::int64_t>(c_p) * geo.num_classes + geo.num_classes;  // classifier
    return total;
}

}  // namespace pdarts
