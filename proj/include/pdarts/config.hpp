#pragma once

#include <fstream>
#include <set>
#include <string>

#include "pdarts/genotype.hpp"
#include "pdarts/search.hpp"

namespace pdarts {

// ---------------------------------------------------------------------------
// Run configuration (JSON, schema_version 1, unknown keys rejected)
// ---------------------------------------------------------------------------

struct EvalConfig {
    int depth = 8;
    int init_channels = 8;
    int epochs = 12;
    int batch_size = 32;
    double lr = 0.025;
    double momentum = 0.9;
    double weight_decay = 3e-4;
    double drop_path_prob = 0.2;  // final value of the linear ramp
    int cutout_length = 0;        // 0 disables cutout
    std::uint64_t seed = 1;
};

struct RunConfig {
    DatasetSpec dataset;
    NetworkConfig network;
    StagePlan plan = desk_plan();
    OptimizerConfig optimizer;
    int m_skip = 2;
    EvalConfig eval;
    std::uint64_t seed = 1;
};

namespace detail_cfg {

inline void check_keys(const Json& j, const std::string& section,
                       const std::set<std::string>& allowed) {
    if (!j.is_object()) throw ParseError("config: section '" + section + "' is not an object");
    for (const auto& [key, _] : j.items())
        if (!allowed.count(key))
            throw ParseError("config: unknown key '" + key + "' in section '" + section + "'");
}

template <typename T>
inline void get_if(const Json& j, const char* key, T& out) {
    if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace detail_cfg

inline RunConfig config_from_json(const Json& j) {
    using detail_cfg::check_keys;
    using detail_cfg::get_if;
    check_keys(j, "<root>",
               {"schema_version", "seed", "dataset", "network", "search", "eval"});
    if (!j.contains("schema_version") || j.at("schema_version").get<int>() != 1)
        throw ParseError("config: missing or unsupported schema_version (expected 1)");
    RunConfig cfg;
    get_if(j, "seed", cfg.seed);
    if (j.contains("dataset")) {
        const auto& d = j.at("dataset");
        check_keys(d, "dataset",
                   {"source", "generator", "path", "classes", "image_size", "channels",
                    "train_count", "test_count", "seed", "split_seed"});
        get_if(d, "source", cfg.dataset.source);
        get_if(d, "generator", cfg.dataset.generator);
        get_if(d, "path", cfg.dataset.path);
        get_if(d, "classes", cfg.dataset.classes);
        get_if(d, "image_size", cfg.dataset.image_size);
        get_if(d, "channels", cfg.dataset.channels);
        get_if(d, "train_count", cfg.dataset.train_count);
        get_if(d, "test_count", cfg.dataset.test_count);
        get_if(d, "seed", cfg.dataset.seed);
        get_if(d, "split_seed", cfg.dataset.split_seed);
    }
    cfg.network.in_channels = cfg.dataset.channels;
    cfg.network.num_classes = cfg.dataset.classes;
    cfg.network.input_size = cfg.dataset.image_size;
    if (j.contains("network")) {
        const auto& n = j.at("network");
        check_keys(n, "network", {"init_channels", "stem_multiplier", "n_intermediate"});
        get_if(n, "init_channels", cfg.network.init_channels);
        get_if(n, "stem_multiplier", cfg.network.stem_multiplier);
        get_if(n, "n_intermediate", cfg.network.n_intermediate);
    }
    if (j.contains("search")) {
        const auto& s = j.at("search");
        check_keys(s, "search", {"plan", "stages", "batch_size", "m_skip", "alpha", "weight"});
        if (s.contains("plan")) {
            const std::string name = s.at("plan").get<std::string>();
            if (name == "desk")
                cfg.plan = desk_plan();
            else if (name == "paper")
                cfg.plan = paper_plan();
            else
                throw ParseError("config: unknown plan '" + name + "' (expected desk or paper)");
        }
        if (s.contains("stages")) {
            cfg.plan.stages.clear();
            for (const auto& st : s.at("stages")) {
                check_keys(st, "search.stages[]",
                           {"depth", "op_budget", "epochs", "warm_epochs", "init_skip_dropout"});
                StageEntry e;
                get_if(st, "depth", e.depth);
                get_if(st, "op_budget", e.op_budget);
                get_if(st, "epochs", e.epochs);
                get_if(st, "warm_epochs", e.warm_epochs);
                get_if(st, "init_skip_dropout", e.init_skip_dropout);
                cfg.plan.stages.push_back(e);
            }
        }
        get_if(s, "batch_size", cfg.optimizer.batch_size);
        get_if(s, "m_skip", cfg.m_skip);
        if (s.contains("alpha")) {
            const auto& a = s.at("alpha");
            check_keys(a, "search.alpha", {"lr", "weight_decay", "beta1", "beta2"});
            get_if(a, "lr", cfg.optimizer.alpha.lr);
            get_if(a, "weight_decay", cfg.optimizer.alpha.weight_decay);
            get_if(a, "beta1", cfg.optimizer.alpha.beta1);
            get_if(a, "beta2", cfg.optimizer.alpha.beta2);
        }
        if (s.contains("weight")) {
            const auto& w = s.at("weight");
            check_keys(w, "search.weight", {"lr", "momentum", "weight_decay"});
            get_if(w, "lr", cfg.optimizer.weight.lr);
            get_if(w, "momentum", cfg.optimizer.weight.momentum);
            get_if(w, "weight_decay", cfg.optimizer.weight.weight_decay);
        }
        cfg.plan.validate();
    }
    if (j.contains("eval")) {
        const auto& e = j.at("eval");
        check_keys(e, "eval",
                   {"depth", "init_channels", "epochs", "batch_size", "lr", "momentum",
                    "weight_decay", "drop_path_prob", "cutout_length", "seed"});
        get_if(e, "depth", cfg.eval.depth);
        get_if(e, "init_channels", cfg.eval.init_channels);
        get_if(e, "epochs", cfg.eval.epochs);
        get_if(e, "batch_size", cfg.eval.batch_size);
        get_if(e, "lr", cfg.eval.lr);
        get_if(e, "momentum", cfg.eval.momentum);
        get_if(e, "weight_decay", cfg.eval.weight_decay);
        get_if(e, "drop_path_prob", cfg.eval.drop_path_prob);
        get_if(e, "cutout_length", cfg.eval.cutout_length);
        get_if(e, "seed", cfg.eval.seed);
    }
    return cfg;
}

// Serializes the fully resolved configuration (defaults plus file plus flag
// overrides); re-parsing this JSON reproduces the same RunConfig.
inline Json config_to_json(const RunConfig& cfg) {
    Json j;
    j["schema_version"] = 1;
    j["seed"] = cfg.seed;
    j["dataset"] = {{"source", cfg.dataset.source},     {"generator", cfg.dataset.generator},
                    {"path", cfg.dataset.path},         {"classes", cfg.dataset.classes},
                    {"image_size", cfg.dataset.image_size}, {"channels", cfg.dataset.channels},
                    {"train_count", cfg.dataset.train_count}, {"test_count", cfg.dataset.test_count},
                    {"seed", cfg.dataset.seed},         {"split_seed", cfg.dataset.split_seed}};
    j["network"] = {{"init_channels", cfg.network.init_channels},
                    {"stem_multiplier", cfg.network.stem_multiplier},
                    {"n_intermediate", cfg.network.n_intermediate}};
    Json stages = Json::array();
    for (const auto& s : cfg.plan.stages)
        stages.push_back({{"depth", s.depth},
                          {"op_budget", s.op_budget},
                          {"epochs", s.epochs},
                          {"warm_epochs", s.warm_epochs},
                          {"init_skip_dropout", s.init_skip_dropout}});
    j["search"] = {{"stages", stages},
                   {"batch_size", cfg.optimizer.batch_size},
                   {"m_skip", cfg.m_skip},
                   {"alpha",
                    {{"lr", cfg.optimizer.alpha.lr},
                     {"weight_decay", cfg.optimizer.alpha.weight_decay},
                     {"beta1", cfg.optimizer.alpha.beta1},
                     {"beta2", cfg.optimizer.alpha.beta2}}},
                   {"weight",
                    {{"lr", cfg.optimizer.weight.lr},
                     {"momentum", cfg.optimizer.weight.momentum},
                     {"weight_decay", cfg.optimizer.weight.weight_decay}}}};
    j["eval"] = {{"depth", cfg.eval.depth},
                 {"init_channels", cfg.eval.init_channels},
                 {"epochs", cfg.eval.epochs},
                 {"batch_size", cfg.eval.batch_size},
                 {"lr", cfg.eval.lr},
                 {"momentum", cfg.eval.momentum},
                 {"weight_decay", cfg.eval.weight_decay},
                 {"drop_path_prob", cfg.eval.drop_path_prob},
                 {"cutout_length", cfg.eval.cutout_length},
                 {"seed", cfg.eval.seed}};
    return j;
}

inline RunConfig load_config(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ParseError("config: cannot open " + path);
    Json j;
    try {
        j = Json::parse(f);
    } catch (const std::exception& e) {
        throw ParseError("config: invalid JSON in " + path + ": " + e.what());
    }
    return config_from_json(j);
}

}  // namespace pdarts
