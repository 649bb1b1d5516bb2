#include <CLI11.hpp>

#include <iostream>

#include "hopflow/hopflow.hpp"

HOPFLOW_DEFINE_COUNTING_ALLOCATOR()

namespace fs = std::filesystem;
using namespace hopflow;

namespace {

constexpr int kExitUsage = 2;
constexpr int kExitData = 3;
constexpr int kExitNumeric = 4;

struct Common {
    std::string data;
    std::string cache;
    std::string config;
    std::vector<std::string> overrides;
    std::string out;
    bool parallel = false;
    bool verbose = false;
};

void add_config_options(CLI::App* cmd, Common& c)
{
    cmd->add_option("--config", c.config, "JSON config file")->check(CLI::ExistingFile);
    cmd->add_option("--override", c.overrides, "dotted-path override key=value (repeatable)");
}

TrainConfig resolve_config(const Common& c)
{
    TrainConfig cfg = c.config.empty() ? TrainConfig{} : load_config(c.config);
    cfg = apply_overrides(cfg, c.overrides);
    cfg.validate();
    return cfg;
}

void write_text(const fs::path& path, const std::string& text)
{
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream os(path, std::ios::binary);
    os << text;
    if (!os) throw DataError("write failed: " + path.string());
}

std::string dump(const nlohmann::json& j) { return j.dump(2) + "\n"; }

/// Files are written into a sibling staging directory that replaces `dir` once complete.
class OutputDir {
public:
    explicit OutputDir(fs::path dir) : final_(std::move(dir))
    {
        if (final_.empty()) throw ConfigError("--out is required");
        staging_ = final_;
        staging_ += ".partial";
        fs::remove_all(staging_);
        fs::create_directories(staging_);
    }
    ~OutputDir()
    {
        std::error_code ec;
        if (!committed_) fs::remove_all(staging_, ec);
    }
    fs::path operator/(const std::string& name) const { return staging_ / name; }
    void commit()
    {
        fs::remove_all(final_);
        fs::rename(staging_, final_);
        committed_ = true;
    }

private:
    fs::path final_, staging_;
    bool committed_ = false;
};

/// Hop tensor from --cache when given (checked against the model), else computed from --data.
HopTensor obtain_hops(const Common& c, const Dataset& ds, const TrainConfig& cfg, std::size_t hops_needed)
{
    if (!c.cache.empty()) {
        HopTensor h = load_hops(c.cache);
        if (h.num_nodes != ds.features.rows || h.dim != ds.features.cols)
            throw ConfigError("cache/model dimension mismatch: cache is " + std::to_string(h.num_nodes) + " x " + std::to_string(h.dim) +
                              ", dataset is " + std::to_string(ds.features.rows) + " x " + std::to_string(ds.features.cols));
        if (h.num_hops < hops_needed + 1)
            throw ConfigError("cache/model dimension mismatch: cache holds L=" + std::to_string(h.num_hops - 1) + ", config needs L=" +
                              std::to_string(hops_needed));
        return h;
    }
    return precompute_for(ds, cfg.data, hops_needed);
}

void log_split(const Common& c, std::size_t i, const RunReport& r)
{
    std::cerr << "split " << i << ": test " << std::fixed << std::setprecision(4) << r.test_accuracy << " (best epoch " << r.best_epoch
              << ", val " << r.best_val_accuracy << ", " << std::setprecision(1) << r.timing.total_s << "s)\n";
    if (c.verbose)
        for (const auto& e : r.epochs)
            std::cerr << "  epoch " << e.epoch << " loss " << e.train_loss << " val " << e.val_accuracy << "\n";
}

int cmd_precompute(const Common& c, std::size_t hops, const std::string& norm, bool self_loops, std::uint64_t max_bytes)
{
    Dataset ds = load_dataset(c.data);
    auto t0 = Clock::now();
    auto h = precompute_hops(normalize(ds.graph, parse_norm_mode(norm), self_loops), ds.features, hops, max_bytes);
    const double secs = seconds_since(t0);
    save_hops(h, c.out);
    std::cout << "wrote " << c.out << ": " << h.num_nodes << " x " << h.num_hops << " x " << h.dim << ", " << fs::file_size(c.out)
              << " bytes, " << std::fixed << std::setprecision(3) << secs << " s\n";
    return 0;
}

int cmd_train(const Common& c)
{
    TrainConfig cfg = resolve_config(c);
    Dataset ds = load_dataset(c.data);
    OutputDir out(c.out);
    auto t0 = Clock::now();
    HopTensor hops = obtain_hops(c, ds, cfg, cfg.model.hops);
    const double pre_s = seconds_since(t0);
    auto splits = protocol_splits(c.data, ds.labels, cfg.data);
    auto rep = run_splits(hops, ds.labels, splits, cfg, fs::path(c.data).filename().string(),
                          [&](std::size_t i, const RunReport& r) { log_split(c, i, r); });
    nlohmann::json report = protocol_json(rep);
    report["config"] = cfg;
    write_text(out / "report.json", dump(report));
    nlohmann::json profile = nlohmann::json::array();
    for (const auto& r : rep.runs) profile.push_back(profile_json(r));
    write_text(out / "profile.json", dump({{"precompute_s", c.cache.empty() ? pre_s : 0.0}, {"runs", profile}}));
    for (std::size_t i = 0; i < rep.checkpoints.size(); ++i) save_checkpoint(rep.checkpoints[i], out / ("checkpoint_" + std::to_string(i) + ".hgm"));
    out.commit();
    std::cout << rep.name << ": " << std::fixed << std::setprecision(2) << 100 * rep.mean << " +- " << 100 * rep.std << " over "
              << rep.split_accuracies.size() << " splits\n";
    return 0;
}

int cmd_eval(const Common& c, const std::string& checkpoint, std::size_t split_index)
{
    TrainConfig cfg = resolve_config(c);
    Dataset ds = load_dataset(c.data);
    Model<float> model = load_checkpoint(checkpoint);
    HopTensor hops = obtain_hops(c, ds, cfg, model.config().hops);
    if (model.config().num_tokens() < hops.num_hops) hops = hops.prefix(model.config().num_tokens());
    if (hops.dim != model.config().input_dim)
        throw ConfigError("cache/model dimension mismatch: features have dim " + std::to_string(hops.dim) + ", checkpoint expects " +
                          std::to_string(model.config().input_dim));
    auto splits = protocol_splits(c.data, ds.labels, cfg.data);
    if (split_index >= splits.size()) throw ConfigError("--split " + std::to_string(split_index) + " out of range");
    nlohmann::json j;
    for (auto [name, ids] : {std::pair{"val", &splits[split_index].val}, std::pair{"test", &splits[split_index].test}}) {
        auto r = evaluate(model, hops, *ids, ds.labels, cfg.eval_batch_size);
        j[name] = {{"accuracy", r.accuracy}, {"mean_ce", r.mean_ce}, {"per_class_accuracy", r.per_class_accuracy}};
        std::cout << name << " accuracy " << std::fixed << std::setprecision(4) << r.accuracy << "  mean CE " << r.mean_ce << "\n";
    }
    if (!c.out.empty()) write_text(c.out, dump(j));
    return 0;
}

void emit_table(const Common& c, const SuiteResult& res, const TrainConfig& cfg)
{
    std::cout << res.table.to_text();
    if (c.out.empty()) return;
    OutputDir out(c.out);
    nlohmann::json j = res.table.to_json();
    j["config"] = cfg;
    nlohmann::json runs = nlohmann::json::array();
    for (const auto& r : res.reports) runs.push_back(protocol_json(r));
    j["reports"] = runs;
    write_text(out / "table.json", dump(j));
    write_text(out / "table.txt", res.table.to_text());
    out.commit();
}

int cmd_ablate(const Common& c, const std::string& suite)
{
    TrainConfig cfg = resolve_config(c);
    Dataset ds = load_dataset(c.data);
    HopTensor hops = obtain_hops(c, ds, cfg, cfg.model.hops);
    auto splits = protocol_splits(c.data, ds.labels, cfg.data);
    emit_table(c, run_ablation(hops, ds.labels, splits, cfg, suite, c.parallel), cfg);
    return 0;
}

int cmd_sweep(const Common& c, std::size_t max_hops, std::vector<std::size_t> hop_list)
{
    TrainConfig cfg = resolve_config(c);
    if (hop_list.empty()) hop_list = {2, 6, 16, 32};
    for (auto l : hop_list)
        if (l > max_hops) throw ConfigError("--layers-list entry " + std::to_string(l) + " exceeds --max-hops " + std::to_string(max_hops));
    Dataset ds = load_dataset(c.data);
    HopTensor hops = obtain_hops(c, ds, cfg, max_hops);
    if (hops.num_hops > max_hops + 1) hops = hops.prefix(max_hops + 1);
    auto splits = protocol_splits(c.data, ds.labels, cfg.data);
    emit_table(c, run_hop_sweep(hops, ds.labels, splits, cfg, hop_list, c.parallel), cfg);
    return 0;
}

int cmd_bench(const Common& c, std::size_t batch, std::size_t steps, std::size_t warmup)
{
    TrainConfig cfg = resolve_config(c);
    Dataset ds = load_dataset(c.data);
    auto t0 = Clock::now();
    HopTensor hops = obtain_hops(c, ds, cfg, cfg.model.hops);
    const double pre_s = c.cache.empty() ? seconds_since(t0) : 0.0;
    auto rep = run_bench(hops, ds.labels, cfg, batch, steps, warmup);
    nlohmann::json j = bench_json(rep);
    j["precompute_s"] = pre_s;
    j["nodes"] = ds.features.rows;
    j["edges"] = ds.graph.nnz() / 2;
    std::cout << std::fixed << std::setprecision(4) << "steps/sec " << rep.steps_per_sec << "  median step " << rep.median_step_s
              << " s  (gather " << rep.phases.gather_s << ", forward " << rep.phases.forward_s << ", backward " << rep.phases.backward_s
              << ", step " << rep.phases.step_s << ")  peak heap " << rep.peak_heap_bytes << " B  tape " << rep.peak_tape_bytes << " B\n";
    if (!c.out.empty()) write_text(c.out, dump(j));
    return 0;
}

int cmd_export(const Common& c, const std::string& checkpoint, const std::string& layer)
{
    Model<float> model = load_checkpoint(checkpoint);
    HopTensor hops;
    if (!c.cache.empty()) {
        hops = load_hops(c.cache);
    } else if (!c.data.empty()) {
        TrainConfig cfg = resolve_config(c);
        hops = precompute_for(load_dataset(c.data), cfg.data, model.config().hops);
    } else {
        throw ConfigError("export-embeddings needs --cache or --data");
    }
    auto emb = export_embeddings(model, hops, parse_embedding_layer(layer));
    save_features(emb, c.out);
    std::cout << "wrote " << c.out << ": " << emb.rows << " x " << emb.cols << "\n";
    return 0;
}

int cmd_gen_toy(const std::string& kind, std::uint64_t seed, const std::string& out)
{
    Dataset ds;
    if (kind == "parity") ds = toy::make_parity(seed);
    else if (kind == "homophily") ds = toy::make_homophily(seed);
    else if (kind == "heterophily") ds = toy::make_homophily(seed, toy::heterophily_options());
    else throw ConfigError("unknown toy kind '" + kind + "' (expected parity, homophily or heterophily)");
    save_dataset(ds, out);
    std::cout << "wrote " << out << ": " << ds.features.rows << " nodes, " << ds.graph.nnz() / 2 << " edges\n";
    return 0;
}

int cmd_stats(const Common& c)
{
    Dataset ds = load_dataset(c.data);
    auto labeled = ds.labels.labeled_ids();
    bool all_labeled = labeled.size() == ds.labels.labels.size();
    nlohmann::json j = {{"nodes", ds.features.rows},
                        {"edges", ds.graph.nnz() / 2},
                        {"features", ds.features.cols},
                        {"classes", ds.labels.num_classes},
                        {"labeled", labeled.size()}};
    if (all_labeled) j["edge_homophily"] = edge_homophily(ds.graph, ds.labels);
    std::cout << j.dump(2) << "\n";
    return 0;
}

} // namespace

int main(int argc, char** argv)
{
    CLI::App app{"hopflow: hop-interaction node classification"};
    app.require_subcommand(1);
    Common c;

    auto* pre = app.add_subcommand("precompute", "write an HGH1 hop-feature cache");
    std::size_t hops = 6;
    std::string norm = "sym";
    bool self_loops = true;
    std::uint64_t max_bytes = 0;
    pre->add_option("--data", c.data, "dataset directory")->required()->check(CLI::ExistingDirectory);
    pre->add_option("--hops", hops, "number of propagation steps L")->capture_default_str();
    pre->add_option("--norm", norm, "sym or row")->capture_default_str();
    pre->add_flag("--self-loops,!--no-self-loops", self_loops, "add self-loops before normalizing (default on)");
    pre->add_option("--max-bytes", max_bytes, "refuse caches larger than this (0 = no limit)");
    pre->add_option("--out", c.out, "cache file")->required();

    auto* train = app.add_subcommand("train", "train on every split and write report + checkpoints");
    auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on one split");
    auto* ablate = app.add_subcommand("ablate", "run an ablation suite");
    auto* sweep = app.add_subcommand("sweep-hops", "accuracy vs number of hops");
    auto* bench = app.add_subcommand("bench", "training throughput and memory");
    for (auto* cmd : {train, eval, ablate, sweep, bench}) {
        cmd->add_option("--data", c.data, "dataset directory")->required()->check(CLI::ExistingDirectory);
        cmd->add_option("--cache", c.cache, "HGH1 hop cache")->check(CLI::ExistingFile);
        add_config_options(cmd, c);
    }
    train->add_option("--out", c.out, "output directory")->required();
    train->add_flag("--verbose", c.verbose, "print per-epoch records");

    std::string checkpoint;
    std::size_t split_index = 0;
    eval->add_option("--checkpoint", checkpoint, "HGM1 checkpoint")->required()->check(CLI::ExistingFile);
    eval->add_option("--split", split_index, "split index")->capture_default_str();
    eval->add_option("--out", c.out, "JSON result file");

    std::string suite;
    ablate->add_option("--suite", suite, "order, fusion or interaction")->required();
    ablate->add_option("--out", c.out, "output directory");
    ablate->add_flag("--parallel", c.parallel, "run variants on parallel workers");

    std::size_t max_hops = 32;
    std::vector<std::size_t> hop_list;
    sweep->add_option("--max-hops", max_hops, "hops to precompute")->capture_default_str();
    sweep->add_option("--layers-list", hop_list, "hop counts to train")->delimiter(',');
    sweep->add_option("--out", c.out, "output directory");
    sweep->add_flag("--parallel", c.parallel, "run hop counts on parallel workers");

    std::size_t batch = 3000, steps = 100, warmup = 3;
    bench->add_option("--batch", batch, "batch size")->capture_default_str();
    bench->add_option("--steps", steps, "timed steps")->capture_default_str();
    bench->add_option("--warmup", warmup, "untimed steps")->capture_default_str();
    bench->add_option("--out", c.out, "JSON result file");

    auto* exp = app.add_subcommand("export-embeddings", "write HK or Z for every node as HGF1");
    std::string layer = "Z";
    exp->add_option("--checkpoint", checkpoint, "HGM1 checkpoint")->required()->check(CLI::ExistingFile);
    exp->add_option("--cache", c.cache, "HGH1 hop cache")->check(CLI::ExistingFile);
    exp->add_option("--data", c.data, "dataset directory (used when no cache is given)")->check(CLI::ExistingDirectory);
    add_config_options(exp, c);
    exp->add_option("--layer", layer, "HK or Z")->capture_default_str();
    exp->add_option("--out", c.out, "HGF1 output file")->required();

    auto* gen = app.add_subcommand("gen-toy", "write a synthetic dataset");
    std::string kind;
    std::uint64_t seed = 0;
    std::string gen_out;
    gen->add_option("--kind", kind, "parity, homophily or heterophily")->required();
    gen->add_option("--seed", seed, "generator seed")->capture_default_str();
    gen->add_option("--out", gen_out, "dataset directory")->required();

    auto* stats = app.add_subcommand("stats", "dataset summary");
    stats->add_option("--data", c.data, "dataset directory")->required()->check(CLI::ExistingDirectory);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : kExitUsage;
    }

    try {
        if (*pre) return cmd_precompute(c, hops, norm, self_loops, max_bytes);
        if (*train) return cmd_train(c);
        if (*eval) return cmd_eval(c, checkpoint, split_index);
        if (*ablate) return cmd_ablate(c, suite);
        if (*sweep) return cmd_sweep(c, max_hops, hop_list);
        if (*bench) return cmd_bench(c, batch, steps, warmup);
        if (*exp) return cmd_export(c, checkpoint, layer);
        if (*gen) return cmd_gen_toy(kind, seed, gen_out);
        if (*stats) return cmd_stats(c);
    } catch (const ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return kExitData;
    } catch (const NumericError& e) {
        std::cerr << "numeric error: " << e.what() << "\n";
        return kExitNumeric;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return kExitUsage;
}
