// Command-line front end: progressive cell search, genotype derivation and
// refinement, discrete evaluation, diagnostic experiments, graph export and
// the finite-difference gradient checker.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "pdarts/config.hpp"
#include "pdarts/eval.hpp"
#include "pdarts/genotype.hpp"
#include "pdarts/gradcheck.hpp"
#include "pdarts/search.hpp"

namespace fs = std::filesystem;
using namespace pdarts;

namespace {

struct CommonFlags {
    std::string config_path;
    std::string out_dir = "run";
    std::string dataset_override;  // generator name or .pdts path
    std::string plan_name;
    std::uint64_t seed = 0;
    bool seed_set = false;
    int m_skip = -1;
};

void add_common(CLI::App* cmd, CommonFlags& f) {
    cmd->add_option("--config", f.config_path, "run configuration file (JSON)");
    cmd->add_option("--out", f.out_dir, "output directory");
    cmd->add_option("--dataset", f.dataset_override,
                    "dataset override: generator name or path to a .pdts file");
    cmd->add_option("--plan", f.plan_name, "stage plan preset: desk | paper");
    cmd->add_option_function<std::uint64_t>(
        "--seed", [&f](std::uint64_t v) { f.seed = v; f.seed_set = true; }, "run seed override");
}

RunConfig resolve_config(const CommonFlags& f) {
    RunConfig cfg;
    if (!f.config_path.empty()) cfg = load_config(f.config_path);
    if (f.seed_set) cfg.seed = f.seed;
    if (f.m_skip >= 0) cfg.m_skip = f.m_skip;
    if (!f.plan_name.empty()) {
        if (f.plan_name == "desk")
            cfg.plan = desk_plan();
        else if (f.plan_name == "paper")
            cfg.plan = paper_plan();
        else
            throw ParseError("unknown plan '" + f.plan_name + "' (expected desk or paper)");
    }
    if (!f.dataset_override.empty()) {
        if (f.dataset_override.size() > 5 &&
            f.dataset_override.substr(f.dataset_override.size() - 5) == ".pdts") {
            cfg.dataset.source = "file";
            cfg.dataset.path = f.dataset_override;
        } else {
            cfg.dataset.source = "synthetic";
            cfg.dataset.generator = f.dataset_override;
        }
    }
    return cfg;
}

// Exclusive ownership of a run directory for the process lifetime.
class RunDirLock {
public:
    explicit RunDirLock(const fs::path& dir) : lock_(dir / "lock") {
        fs::create_directories(dir);
        if (fs::exists(lock_))
            throw ParseError("run directory " + dir.string() +
                             " is locked by another process (remove 'lock' if stale)");
        std::ofstream(lock_.string()) << "locked\n";
    }
    ~RunDirLock() {
        std::error_code ec;
        fs::remove(lock_, ec);
    }

private:
    fs::path lock_;
};

// Manifest: every artifact in the run directory with a content digest.
// No timestamps, so identical runs produce identical manifests.
void write_manifest(const fs::path& dir, const Dataset* train = nullptr) {
    Json files = Json::object();
    std::vector<std::string> names;
    for (const auto& entry : fs::directory_iterator(dir)) {
        const std::string name = entry.path().filename().string();
        if (name == "manifest.json" || name == "lock") continue;
        names.push_back(name);
    }
    std::sort(names.begin(), names.end());
    for (const auto& name : names) {
        const std::string content = read_text_file((dir / name).string());
        char buf[20];
        std::snprintf(buf, sizeof(buf), "%016llx",
                      static_cast<unsigned long long>(fnv1a64(content)));
        files[name] = buf;
    }
    Json j;
    j["schema_version"] = 1;
    j["artifacts"] = files;
    if (train) {
        j["dataset_stats"] = {{"pixel_mean", format_float(train->pixel_mean())},
                              {"pixel_std", format_float(train->pixel_std())}};
    }
    write_text_file((dir / "manifest.json").string(), j.dump(2) + "\n");
}

void write_csv(const fs::path& path, const std::string& header,
               const std::vector<std::string>& rows) {
    std::ofstream f(path);
    f << header << '\n';
    for (const auto& r : rows) f << r << '\n';
}

int cmd_search(const CommonFlags& f) {
    RunConfig cfg = resolve_config(f);
    cfg.plan.validate();
    RunDirLock lock(f.out_dir);
    write_text_file((fs::path(f.out_dir) / "config.json").string(),
                    config_to_json(cfg).dump(2) + "\n");
    Dataset train = make_dataset(cfg.dataset, true);
    auto [weight_half, alpha_half] = split_search(train, cfg.dataset.split_seed);
    SearchResult res = run_progressive_search(cfg.plan, train, weight_half, alpha_half,
                                              cfg.network, cfg.optimizer, cfg.seed, f.out_dir);
    Genotype raw = derive(res.snapshots.back());
    save_genotype((fs::path(f.out_dir) / "genotype_raw.json").string(), raw);
    RefineResult refined = refine_skip_count(res.snapshots.back(), cfg.m_skip);
    save_genotype((fs::path(f.out_dir) / "genotype.json").string(), refined.genotype);
    write_text_file((fs::path(f.out_dir) / "normal.dot").string(),
                    export_graph(refined.genotype, "normal"));
    write_text_file((fs::path(f.out_dir) / "reduce.dot").string(),
                    export_graph(refined.genotype, "reduce"));
    write_manifest(f.out_dir, &train);
    std::cout << "search complete: " << res.snapshots.size() << " stages, "
              << skip_count(refined.genotype.normal) << " normal-cell skip connections (M="
              << cfg.m_skip << "), artifacts in " << f.out_dir << "\n";
    return 0;
}

int cmd_derive(const CommonFlags& f, const std::string& snapshot_path, const std::string& out) {
    AlphaSnapshot snap = load_snapshot(snapshot_path);
    (void)f;
    save_genotype(out, derive(snap));
    std::cout << "derived genotype written to " << out << "\n";
    return 0;
}

int cmd_refine(const CommonFlags& f, const std::string& snapshot_path, const std::string& out) {
    RunConfig cfg = resolve_config(f);
    AlphaSnapshot snap = load_snapshot(snapshot_path);
    RefineResult res = refine_skip_count(snap, cfg.m_skip);
    save_genotype(out, res.genotype);
    std::cout << "refined genotype (" << skip_count(res.genotype.normal) << " skips, M="
              << cfg.m_skip << ") written to " << out << "\n";
    return 0;
}

int cmd_eval(const CommonFlags& f, const std::string& genotype_path) {
    RunConfig cfg = resolve_config(f);
    RunDirLock lock(f.out_dir);
    write_text_file((fs::path(f.out_dir) / "config.json").string(),
                    config_to_json(cfg).dump(2) + "\n");
    Genotype g = load_genotype(genotype_path);
    Dataset train = make_dataset(cfg.dataset, true);
    Dataset test = make_dataset(cfg.dataset, false);
    NetworkConfig io = cfg.network;
    EvalNetwork net = build_eval_network(g, cfg.eval, io, cfg.eval.seed);
    EvalResult res = train_eval(net, train, test, cfg.eval, cfg.eval.seed);
    std::vector<std::string> rows;
    for (const auto& m : res.history) rows.push_back(eval_metrics_csv_row(m));
    write_csv(fs::path(f.out_dir) / "eval_metrics.csv", eval_metrics_csv_header(), rows);
    save_genotype((fs::path(f.out_dir) / "genotype.json").string(), g);
    write_manifest(f.out_dir, &train);
    std::cout << "eval complete: final test error " << format_float(res.final_test_error)
              << ", params " << net.param_count() << "\n";
    return 0;
}

int cmd_experiment(const CommonFlags& f, const std::string& name, int n_seeds) {
    RunConfig cfg = resolve_config(f);
    RunDirLock lock(f.out_dir);
    write_text_file((fs::path(f.out_dir) / "config.json").string(),
                    config_to_json(cfg).dump(2) + "\n");
    Dataset train = make_dataset(cfg.dataset, true);
    Dataset test = make_dataset(cfg.dataset, false);
    auto [weight_half, alpha_half] = split_search(train, cfg.dataset.split_seed);
    std::vector<std::uint64_t> seeds;
    for (int i = 0; i < n_seeds; ++i) seeds.push_back(cfg.seed + i);

    if (name == "dropout-ablation") {
        auto rows = experiment_dropout_ablation(cfg.plan, {0.0, 0.3, 0.6}, train, weight_half,
                                                alpha_half, cfg.network, cfg.optimizer, seeds);
        std::vector<std::string> out;
        for (const auto& r : rows)
            out.push_back(std::to_string(r.seed) + "," + r.arm + "," + std::to_string(r.skip_count));
        write_csv(fs::path(f.out_dir) / "report.csv", dropout_ablation_csv_header(), out);
    } else if (name == "random-space") {
        auto rows = experiment_random_space(cfg.plan, train, weight_half, alpha_half, test,
                                            cfg.network, cfg.optimizer, cfg.eval, seeds);
        std::vector<std::string> out;
        for (const auto& r : rows)
            out.push_back(std::to_string(r.seed) + "," + r.arm + "," + format_float(r.test_error));
        write_csv(fs::path(f.out_dir) / "report.csv", random_space_csv_header(), out);
    } else if (name == "skip-sweep") {
        SearchResult res = run_progressive_search(cfg.plan, train, weight_half, alpha_half,
                                                  cfg.network, cfg.optimizer, cfg.seed);
        save_snapshot((fs::path(f.out_dir) / "snapshot.json").string(), res.snapshots.back());
        auto rows = experiment_skip_sweep(res.snapshots.back(), {0, 1, 2, 3, 4}, train, test,
                                          cfg.eval, cfg.network, cfg.seed);
        std::vector<std::string> out;
        for (const auto& r : rows)
            out.push_back(std::to_string(r.m) + "," + std::to_string(r.skip_count) + "," +
                          std::to_string(r.param_count) + "," + format_float(r.test_error));
        write_csv(fs::path(f.out_dir) / "report.csv", skip_sweep_csv_header(), out);
    } else if (name == "depth-gap") {
        SearchResult res = run_progressive_search(cfg.plan, train, weight_half, alpha_half,
                                                  cfg.network, cfg.optimizer, cfg.seed);
        auto rows = depth_gap_probe(res.snapshots);
        std::vector<std::string> out;
        for (const auto& r : rows)
            out.push_back(std::to_string(r.stage) + "," + std::to_string(r.longest_path) + "," +
                          std::to_string(r.intermediate_sources));
        write_csv(fs::path(f.out_dir) / "report.csv", depth_gap_csv_header(), out);
    } else {
        throw ParseError("unknown experiment '" + name +
                         "' (expected dropout-ablation | random-space | skip-sweep | depth-gap)");
    }
    write_manifest(f.out_dir, &train);
    std::cout << "experiment '" << name << "' complete, report in " << f.out_dir << "/report.csv\n";
    return 0;
}

int cmd_export_dot(const std::string& genotype_path, const std::string& cell,
                   const std::string& out) {
    if (cell != "normal" && cell != "reduce")
        throw ParseError("unknown cell '" + cell + "' (expected normal | reduce)");
    Genotype g = load_genotype(genotype_path);
    const std::string dot = export_graph(g, cell);
    if (out.empty())
        std::cout << dot;
    else {
        write_text_file(out, dot);
        std::cout << "wrote " << out << "\n";
    }
    return 0;
}

int cmd_gradcheck(std::uint64_t seed, int n_seeds) {
    bool all_pass = true;
    std::map<std::string, double> worst;
    for (int s = 0; s < n_seeds; ++s) {
        for (const auto& r : gradcheck::run_suite(seed + s)) {
            all_pass = all_pass && r.pass;
            worst[r.name] = std::max(worst[r.name], r.max_rel_err);
            if (!r.pass)
                std::printf("%-40s FAIL  max_rel_err=%.3e (seed %llu)\n", r.name.c_str(),
                            r.max_rel_err, static_cast<unsigned long long>(seed + s));
        }
    }
    for (const auto& [name, err] : worst)
        std::printf("%-40s %s  max_rel_err=%.3e\n", name.c_str(),
                    err < 1e-4 ? "PASS" : "FAIL", err);
    std::printf("gradcheck: %s over %d seed(s)\n", all_pass ? "ALL PASS" : "FAILURES", n_seeds);
    return all_pass ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"progressive differentiable cell search"};
    app.require_subcommand(1);

    CommonFlags f;
    std::string snapshot_path, genotype_path, experiment_name = "dropout-ablation";
    std::string cell = "normal", dot_out, artifact_out = "genotype.json";
    int n_seeds = 1;

    auto* search = app.add_subcommand("search", "run the progressive architecture search");
    add_common(search, f);
    search->add_option("--m-skip", f.m_skip, "skip-connect cap for the final refinement");

    auto* derive_cmd = app.add_subcommand("derive", "derive a genotype from a snapshot");
    derive_cmd->add_option("--snapshot", snapshot_path, "snapshot JSON")->required();
    derive_cmd->add_option("--out", artifact_out, "output genotype path");

    auto* refine_cmd = app.add_subcommand("refine", "derive with a skip-connect cap");
    refine_cmd->add_option("--snapshot", snapshot_path, "snapshot JSON")->required();
    refine_cmd->add_option("--m-skip", f.m_skip, "maximum normal-cell skip connections")
        ->required();
    refine_cmd->add_option("--out", artifact_out, "output genotype path");
    refine_cmd->add_option("--config", f.config_path, "run configuration file (JSON)");

    auto* eval_cmd = app.add_subcommand("eval", "train a discrete network from a genotype");
    add_common(eval_cmd, f);
    eval_cmd->add_option("--genotype", genotype_path, "genotype JSON")->required();

    auto* exp_cmd = app.add_subcommand("experiment", "run a diagnostic experiment");
    add_common(exp_cmd, f);
    exp_cmd->add_option("--name", experiment_name,
                        "dropout-ablation | random-space | skip-sweep | depth-gap");
    exp_cmd->add_option("--seeds", n_seeds, "number of consecutive seeds");

    auto* dot_cmd = app.add_subcommand("export-dot", "render a genotype cell as DOT");
    dot_cmd->add_option("--genotype", genotype_path, "genotype JSON")->required();
    dot_cmd->add_option("--cell", cell, "normal | reduce");
    dot_cmd->add_option("--out", dot_out, "output path (stdout if omitted)");

    auto* gc_cmd = app.add_subcommand("gradcheck", "finite-difference gradient check suite");
    gc_cmd->add_option("--seed", f.seed, "base seed");
    gc_cmd->add_option("--seeds", n_seeds, "number of consecutive seeds");

    CLI11_PARSE(app, argc, argv);

    try {
        if (search->parsed()) return cmd_search(f);
        if (derive_cmd->parsed()) return cmd_derive(f, snapshot_path, artifact_out);
        if (refine_cmd->parsed()) return cmd_refine(f, snapshot_path, artifact_out);
        if (eval_cmd->parsed()) return cmd_eval(f, genotype_path);
        if (exp_cmd->parsed()) return cmd_experiment(f, experiment_name, n_seeds);
        if (dot_cmd->parsed()) return cmd_export_dot(genotype_path, cell, dot_out);
        if (gc_cmd->parsed()) return cmd_gradcheck(f.seed, n_seeds);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
