#ifndef HOPFLOW_EXPERIMENTS_HPP
#define HOPFLOW_EXPERIMENTS_HPP

// Experiment drivers behind the CLI: the multi-split protocol, ablation suites,
// hop sweeps, throughput benchmarks, and embedding export.

#include <algorithm>
#include <iomanip>
#include <sstream>
#include <thread>

#include "config.hpp"

namespace hopflow {

/// Splits for a dataset: shipped split files when allowed and present, else seeded
/// 48/32/20 permutations of the labeled nodes.
inline std::vector<Split> protocol_splits(const std::filesystem::path& data_dir, const LabeledNodes& labels, const DataConfig& dc)
{
    if (dc.use_split_files) {
        auto files = find_split_files(data_dir);
        if (!files.empty()) {
            if (files.size() > dc.num_splits) files.resize(dc.num_splits);
            for (const auto& s : files) s.validate(labels.labels.size());
            return files;
        }
    }
    return make_labeled_splits(labels, SplitRatios{}, dc.split_seed, dc.num_splits);
}

inline HopTensor precompute_for(const Dataset& ds, const DataConfig& dc, std::size_t hops)
{
    return precompute_hops(normalize(ds.graph, dc.norm, dc.self_loops), ds.features, hops);
}

/// Loads the dataset, pre-computes hops once, and trains on every split.
inline ProtocolReport run_protocol(const std::filesystem::path& data_dir, const TrainConfig& cfg,
                                   const std::function<void(std::size_t, const RunReport&)>& on_split = {})
{
    cfg.validate();
    Dataset ds = load_dataset(data_dir);
    auto t0 = Clock::now();
    HopTensor hops = precompute_for(ds, cfg.data, cfg.model.hops);
    const double pre_s = seconds_since(t0);
    auto splits = protocol_splits(data_dir, ds.labels, cfg.data);
    auto rep = run_splits(hops, ds.labels, splits, cfg, data_dir.filename().string(), on_split);
    rep.precompute_s = pre_s;
    return rep;
}

/// A result table rendered both as JSON and as aligned text.
struct Table {
    std::string title;
    std::vector<std::string> columns;
    std::vector<std::vector<nlohmann::json>> rows;

    nlohmann::json to_json() const
    {
        nlohmann::json out = nlohmann::json::array();
        for (const auto& row : rows) {
            nlohmann::json obj = nlohmann::json::object();
            for (std::size_t i = 0; i < columns.size(); ++i) obj[columns[i]] = row[i];
            out.push_back(obj);
        }
        return {{"title", title}, {"rows", out}};
    }

    std::string to_text() const
    {
        auto cell = [](const nlohmann::json& v) {
            if (v.is_string()) return v.get<std::string>();
            if (v.is_number_float()) {
                std::ostringstream os;
                os << std::fixed << std::setprecision(4) << v.get<double>();
                return os.str();
            }
            return v.dump();
        };
        std::vector<std::size_t> width(columns.size());
        for (std::size_t i = 0; i < columns.size(); ++i) width[i] = columns[i].size();
        for (const auto& row : rows)
            for (std::size_t i = 0; i < columns.size(); ++i) width[i] = std::max(width[i], cell(row[i]).size());
        std::ostringstream os;
        if (!title.empty()) os << title << '\n';
        for (std::size_t i = 0; i < columns.size(); ++i) os << (i ? "  " : "") << std::setw(static_cast<int>(width[i])) << columns[i];
        os << '\n';
        for (const auto& row : rows) {
            for (std::size_t i = 0; i < columns.size(); ++i)
                os << (i ? "  " : "") << std::setw(static_cast<int>(width[i])) << cell(row[i]);
            os << '\n';
        }
        return os.str();
    }
};

/// Runs `jobs` either in order or on up to worker_count() threads. Each job is independent
/// and seeded on its own, so results do not depend on the mode.
inline void run_jobs(std::size_t jobs, const std::function<void(std::size_t)>& job, bool parallel)
{
    if (!parallel || jobs < 2 || worker_count() < 2) {
        for (std::size_t i = 0; i < jobs; ++i) job(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::vector<std::exception_ptr> errors(jobs);
    std::vector<std::thread> pool;
    for (unsigned w = 0; w < std::min<std::size_t>(worker_count(), jobs); ++w)
        pool.emplace_back([&] {
            for (std::size_t i; (i = next.fetch_add(1)) < jobs;) {
                try {
                    job(i);
                } catch (...) {
                    errors[i] = std::current_exception();
                }
            }
        });
    for (auto& t : pool) t.join();
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
}

struct Variant {
    std::string name;
    std::vector<std::string> overrides;
};

inline std::vector<Variant> ablation_variants(std::string_view suite)
{
    if (suite == "order") return {{"with_order", {"model.use_order_embedding=true"}}, {"without_order", {"model.use_order_embedding=false"}}};
    if (suite == "fusion")
        return {{"mean", {"model.fusion_kind=mean"}}, {"max", {"model.fusion_kind=max"}}, {"attention", {"model.fusion_kind=attention"}}};
    if (suite == "interaction")
        return {{"none", {"model.interaction_kind=none"}},
                {"mlp", {"model.interaction_kind=mlp"}},
                {"gcn_mean", {"model.interaction_kind=gcn_mean"}},
                {"sage", {"model.interaction_kind=sage"}},
                {"attention", {"model.interaction_kind=attention"}}};
    throw ConfigError("unknown ablation suite '" + std::string(suite) + "' (expected order, fusion or interaction)");
}

struct SuiteResult {
    Table table;
    std::vector<ProtocolReport> reports;
};

/// Trains every variant of `suite` on the shared hop tensor. Deltas are relative to the
/// variant matching `cfg` (the baseline).
inline SuiteResult run_ablation(const HopTensor& hops, const LabeledNodes& labels, const std::vector<Split>& splits,
                                const TrainConfig& cfg, std::string_view suite, bool parallel = false)
{
    auto variants = ablation_variants(suite);
    SuiteResult out;
    out.reports.resize(variants.size());
    std::vector<TrainConfig> cfgs;
    for (const auto& v : variants) cfgs.push_back(apply_overrides(cfg, v.overrides));
    run_jobs(
        variants.size(), [&](std::size_t i) { out.reports[i] = run_splits(hops, labels, splits, cfgs[i], variants[i].name); }, parallel);
    std::size_t base = 0;
    const nlohmann::json base_json = cfg;
    for (std::size_t i = 0; i < variants.size(); ++i)
        if (nlohmann::json(cfgs[i]) == base_json) base = i;
    out.table.title = "ablation: " + std::string(suite) + " (baseline " + variants[base].name + ")";
    out.table.columns = {"variant", "mean", "std", "delta"};
    for (std::size_t i = 0; i < variants.size(); ++i)
        out.table.rows.push_back({variants[i].name, out.reports[i].mean, out.reports[i].std, out.reports[i].mean - out.reports[base].mean});
    return out;
}

/// Trains one model per hop count, each on a prefix of the same cache.
inline SuiteResult run_hop_sweep(const HopTensor& hops, const LabeledNodes& labels, const std::vector<Split>& splits,
                                 const TrainConfig& cfg, const std::vector<std::size_t>& hop_list, bool parallel = false)
{
    for (auto l : hop_list)
        if (l + 1 > hops.num_hops)
            throw ConfigError("sweep: L=" + std::to_string(l) + " exceeds the cache (" + std::to_string(hops.num_hops - 1) + " hops)");
    SuiteResult out;
    out.reports.resize(hop_list.size());
    run_jobs(
        hop_list.size(),
        [&](std::size_t i) {
            TrainConfig c = cfg;
            c.model.hops = hop_list[i];
            out.reports[i] = run_splits(hops, labels, splits, c, "L=" + std::to_string(hop_list[i]));
        },
        parallel);
    out.table.title = "accuracy vs hops";
    out.table.columns = {"hops", "mean", "std"};
    for (std::size_t i = 0; i < hop_list.size(); ++i) out.table.rows.push_back({hop_list[i], out.reports[i].mean, out.reports[i].std});
    return out;
}

struct BenchReport {
    std::size_t steps = 0;
    std::size_t batch = 0;
    double steps_per_sec = 0;
    double median_step_s = 0;
    double mean_step_s = 0;
    PhaseTimes phases; // summed over measured steps
    std::size_t peak_tape_bytes = 0;
    std::int64_t peak_heap_bytes = 0; // 0 when the counting allocator is not installed
};

inline nlohmann::json bench_json(const BenchReport& b)
{
    return {{"steps", b.steps},
            {"batch", b.batch},
            {"steps_per_sec", b.steps_per_sec},
            {"median_step_s", b.median_step_s},
            {"mean_step_s", b.mean_step_s},
            {"gather_s", b.phases.gather_s},
            {"forward_s", b.phases.forward_s},
            {"backward_s", b.phases.backward_s},
            {"step_s", b.phases.step_s},
            {"peak_tape_bytes", b.peak_tape_bytes},
            {"peak_heap_bytes", b.peak_heap_bytes}};
}

/// Times `steps` training steps on batches of `batch` labeled nodes taken cyclically from a
/// seeded permutation, after `warmup` untimed steps.
inline BenchReport run_bench(const HopTensor& hops_in, const LabeledNodes& labels, TrainConfig cfg, std::size_t batch,
                             std::size_t steps, std::size_t warmup = 3)
{
    if (steps == 0) throw ConfigError("bench: steps must be >= 1");
    cfg.batch_size = batch;
    cfg.validate();
    const ModelConfig mc = resolve_model_config(cfg.model, hops_in, labels);
    const HopTensor hops = mc.num_tokens() < hops_in.num_hops ? hops_in.prefix(mc.num_tokens()) : hops_in;
    auto ids = labels.labeled_ids();
    if (ids.empty()) throw DataError("bench: no labeled nodes");
    auto shuffle_rng = make_rng(cfg.seed, RngPurpose::shuffle);
    shuffle_in_place(ids, shuffle_rng);
    const std::size_t b = std::min(batch, ids.size());

    Model<float> model = Model<float>::init(mc, cfg.seed);
    AdamState<float> adam;
    const AdamOptions opt{cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay, cfg.decoupled_weight_decay};
    auto drop_rng = make_rng(cfg.seed, RngPurpose::dropout);
    ad::Tape<float> tape;
    std::size_t cursor = 0;
    auto next_batch = [&] {
        std::vector<std::uint32_t> out(b);
        for (auto& id : out) {
            id = ids[cursor];
            cursor = (cursor + 1) % ids.size();
        }
        return out;
    };

    BenchReport rep;
    rep.steps = steps;
    rep.batch = b;
    std::vector<double> step_times;
    if (memory::installed()) memory::reset_peak();
    const auto heap_base = memory::current_bytes();
    for (std::size_t s = 0; s < warmup + steps; ++s) {
        const bool timed = s >= warmup;
        auto t0 = Clock::now();
        auto batch_ids = next_batch();
        std::vector<std::int32_t> y(b);
        for (std::size_t i = 0; i < b; ++i) y[i] = labels.labels[batch_ids[i]];
        auto x = gather_batch(hops, batch_ids);
        const double g = seconds_since(t0);
        PhaseTimes pt;
        auto out = train_step(model, adam, opt, cfg.loss, tape, std::move(x), y, drop_rng, &pt);
        if (!std::isfinite(out.loss)) throw NumericError("bench: non-finite loss at step " + std::to_string(s));
        const double total = seconds_since(t0);
        rep.peak_tape_bytes = std::max(rep.peak_tape_bytes, tape.bytes());
        if (!timed) continue;
        step_times.push_back(total);
        rep.phases.gather_s += g;
        rep.phases.forward_s += pt.forward_s;
        rep.phases.backward_s += pt.backward_s;
        rep.phases.step_s += pt.step_s;
    }
    double sum = 0;
    for (double t : step_times) sum += t;
    rep.mean_step_s = sum / static_cast<double>(steps);
    rep.steps_per_sec = static_cast<double>(steps) / sum;
    std::sort(step_times.begin(), step_times.end());
    rep.median_step_s = step_times.size() % 2 ? step_times[step_times.size() / 2]
                                              : 0.5 * (step_times[step_times.size() / 2 - 1] + step_times[step_times.size() / 2]);
    rep.phases.total_s = sum;
    rep.peak_heap_bytes = memory::installed() ? memory::peak_bytes() - heap_base : 0;
    return rep;
}

enum class EmbeddingLayer { hk, z };

inline EmbeddingLayer parse_embedding_layer(std::string_view s)
{
    if (s == "HK" || s == "hk") return EmbeddingLayer::hk;
    if (s == "Z" || s == "z") return EmbeddingLayer::z;
    throw ConfigError("unknown embedding layer '" + std::string(s) + "' (expected HK or Z)");
}

/// Eval-mode representations of every node: N x (L+1)d for HK (flattened), N x d for Z.
inline FeatureMatrix export_embeddings(Model<float>& model, const HopTensor& hops_in, EmbeddingLayer layer, std::size_t batch = 3000)
{
    const auto& mc = model.config();
    if (hops_in.dim != mc.input_dim || hops_in.num_hops < mc.num_tokens())
        throw ConfigError("cache/model dimension mismatch: cache has " + std::to_string(hops_in.num_hops) + " hop slices of dim " +
                          std::to_string(hops_in.dim) + ", checkpoint expects " + std::to_string(mc.num_tokens()) + " of dim " +
                          std::to_string(mc.input_dim));
    const HopTensor hops = mc.num_tokens() < hops_in.num_hops ? hops_in.prefix(mc.num_tokens()) : hops_in;
    const std::size_t cols = layer == EmbeddingLayer::z ? mc.hidden : mc.num_tokens() * mc.hidden;
    FeatureMatrix out(hops.num_nodes, cols);
    std::mt19937_64 unused(0);
    ad::Tape<float> tape;
    std::vector<std::uint32_t> ids;
    for (std::size_t start = 0; start < hops.num_nodes; start += batch) {
        const std::size_t end = std::min(hops.num_nodes, start + batch);
        ids.resize(end - start);
        for (std::size_t i = start; i < end; ++i) ids[i - start] = static_cast<std::uint32_t>(i);
        tape.reset();
        auto fwd = model.forward(tape, tape.constant(gather_batch(hops, ids)), unused, false);
        const auto& v = tape.value(layer == EmbeddingLayer::z ? fwd.z : fwd.hk);
        std::copy(v.begin(), v.end(), out.data.begin() + static_cast<std::ptrdiff_t>(start * cols));
    }
    return out;
}

} // namespace hopflow

#endif
