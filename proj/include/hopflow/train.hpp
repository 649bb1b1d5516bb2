#ifndef HOPFLOW_TRAIN_HPP
#define HOPFLOW_TRAIN_HPP

// Mini-batch training with Adam and validation-accuracy early stopping,
// evaluation, and the multi-split protocol. Consumes hop tensors only.

#include <chrono>
#include <cmath>
#include <functional>
#include <map>
#include <optional>

#include <json.hpp>

#include "graph.hpp"
#include "hops.hpp"
#include "memory.hpp"
#include "model.hpp"
#include "objectives.hpp"

namespace hopflow {

/// Graph preprocessing and split settings used by the protocol runner.
struct DataConfig {
    NormMode norm = NormMode::sym;
    bool self_loops = true;
    std::size_t num_splits = 10;
    std::uint64_t split_seed = 0;
    bool use_split_files = true; // prefer splits.json / splits_<i>.json when the dataset ships them
};

struct TrainConfig {
    double lr = 0.005;
    double weight_decay = 5e-4;
    bool decoupled_weight_decay = false;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    std::size_t batch_size = 3000;
    std::size_t eval_batch_size = 3000;
    std::size_t max_epochs = 500;
    std::size_t patience = 100;
    std::uint64_t seed = 0;
    bool determinism = true;
    LossConfig loss;
    ModelConfig model;
    DataConfig data;

    void validate() const
    {
        if (!(lr > 0)) throw ConfigError("lr must be > 0");
        if (weight_decay < 0) throw ConfigError("weight_decay must be >= 0");
        if (batch_size == 0 || eval_batch_size == 0) throw ConfigError("batch sizes must be >= 1");
        if (max_epochs == 0) throw ConfigError("max_epochs must be >= 1");
        if (patience > max_epochs) throw ConfigError("patience must be <= max_epochs");
        if (loss.ssl_kind == SslKind::barlow && batch_size < 2) throw ConfigError("barlow loss needs batch_size >= 2");
        loss.validate();
    }
};

template <class Real>
struct AdamState {
    std::map<std::string, std::vector<Real>> m;
    std::map<std::string, std::vector<Real>> v;
    std::uint64_t step = 0;
};

struct AdamOptions {
    double lr = 0.005;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
    bool decoupled = false;
};

/// Bias-corrected Adam. Coupled weight decay adds wd * param to the gradient;
/// decoupled decay shrinks the parameter by lr * wd directly.
template <class Real>
void adam_step(ParamStore<Real>& params, AdamState<Real>& state, const AdamOptions& opt)
{
    for (auto& [name, e] : params)
        for (auto g : e.grad)
            if (!std::isfinite(static_cast<double>(g))) throw NumericError("non-finite gradient in parameter " + name);
    ++state.step;
    const double bc1 = 1.0 - std::pow(opt.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(opt.beta2, static_cast<double>(state.step));
    for (auto& [name, e] : params) {
        auto& m = state.m[name];
        auto& v = state.v[name];
        if (m.empty()) {
            m.assign(e.grad.size(), Real(0));
            v.assign(e.grad.size(), Real(0));
        }
        auto& w = e.value.data;
        for (std::size_t i = 0; i < w.size(); ++i) {
            double g = static_cast<double>(e.grad[i]);
            if (!opt.decoupled) g += opt.weight_decay * static_cast<double>(w[i]);
            const double mi = opt.beta1 * static_cast<double>(m[i]) + (1.0 - opt.beta1) * g;
            const double vi = opt.beta2 * static_cast<double>(v[i]) + (1.0 - opt.beta2) * g * g;
            m[i] = static_cast<Real>(mi);
            v[i] = static_cast<Real>(vi);
            double update = opt.lr * (mi / bc1) / (std::sqrt(vi / bc2) + opt.eps);
            if (opt.decoupled) update += opt.lr * opt.weight_decay * static_cast<double>(w[i]);
            w[i] = static_cast<Real>(static_cast<double>(w[i]) - update);
        }
    }
}

struct EvalResult {
    double accuracy = 0;
    double mean_ce = 0;
    std::vector<double> per_class_accuracy; // NaN for classes absent from the node set
    std::vector<std::int32_t> predictions;
};

/// Eval-mode forward over `ids` in chunks of `batch_size`. Results do not depend on the chunking.
inline EvalResult evaluate(Model<float>& model, const HopTensor& hops, std::span<const std::uint32_t> ids,
                           const LabeledNodes& labels, std::size_t batch_size = 3000)
{
    if (ids.empty()) throw DataError("evaluate: empty node set");
    const std::size_t c = model.config().num_classes;
    EvalResult res;
    std::vector<std::size_t> hits(c, 0), counts(c, 0);
    double ce_sum = 0;
    std::mt19937_64 unused(0);
    ad::Tape<float> tape;
    for (std::size_t start = 0; start < ids.size(); start += batch_size) {
        auto chunk = ids.subspan(start, std::min(batch_size, ids.size() - start));
        std::vector<std::int32_t> y(chunk.size());
        for (std::size_t i = 0; i < chunk.size(); ++i) {
            if (chunk[i] >= labels.labels.size()) throw DataError("evaluate: node id " + std::to_string(chunk[i]) + " out of range");
            y[i] = labels.labels[chunk[i]];
            if (y[i] == kUnlabeled) throw DataError("evaluate: node " + std::to_string(chunk[i]) + " is unlabeled");
        }
        tape.reset();
        auto out = model.forward(tape, tape.constant(gather_batch(hops, chunk)), unused, false);
        const auto& logits = tape.value(out.logits);
        for (std::size_t i = 0; i < chunk.size(); ++i) {
            const float* row = &logits[i * c];
            auto pred = static_cast<std::int32_t>(std::max_element(row, row + c) - row);
            res.predictions.push_back(pred);
            ++counts[static_cast<std::size_t>(y[i])];
            if (pred == y[i]) ++hits[static_cast<std::size_t>(y[i])];
            const float mx = *std::max_element(row, row + c);
            double z = 0;
            for (std::size_t k = 0; k < c; ++k) z += std::exp(static_cast<double>(row[k] - mx));
            ce_sum += static_cast<double>(mx) + std::log(z) - static_cast<double>(row[y[i]]);
        }
    }
    std::size_t total_hits = 0;
    res.per_class_accuracy.resize(c);
    for (std::size_t k = 0; k < c; ++k) {
        total_hits += hits[k];
        res.per_class_accuracy[k] = counts[k] ? static_cast<double>(hits[k]) / static_cast<double>(counts[k]) : std::nan("");
    }
    res.accuracy = static_cast<double>(total_hits) / static_cast<double>(ids.size());
    res.mean_ce = ce_sum / static_cast<double>(ids.size());
    return res;
}

struct EpochRecord {
    std::size_t epoch = 0;
    double train_loss = 0;
    double val_accuracy = 0;
    double val_ce = 0;
};

struct PhaseTimes {
    double gather_s = 0, forward_s = 0, backward_s = 0, step_s = 0, eval_s = 0, total_s = 0;
};

struct RunReport {
    std::vector<EpochRecord> epochs;
    std::size_t best_epoch = 0;
    double best_val_accuracy = 0;
    double best_val_ce = 0;
    double test_accuracy = 0;
    double test_ce = 0;
    std::vector<double> test_per_class_accuracy;
    bool stopped_early = false;
    std::size_t num_parameters = 0;
    // wall clock and memory; excluded from the deterministic JSON document
    PhaseTimes timing;
    std::size_t peak_tape_bytes = 0;
    std::int64_t peak_heap_bytes = 0;
};

/// Deterministic part of a RunReport.
inline nlohmann::json report_json(const RunReport& r)
{
    nlohmann::json epochs = nlohmann::json::array();
    for (const auto& e : r.epochs)
        epochs.push_back({{"epoch", e.epoch}, {"train_loss", e.train_loss}, {"val_accuracy", e.val_accuracy}, {"val_ce", e.val_ce}});
    return {{"epochs", epochs},
            {"best_epoch", r.best_epoch},
            {"best_val_accuracy", r.best_val_accuracy},
            {"best_val_ce", r.best_val_ce},
            {"test_accuracy", r.test_accuracy},
            {"test_ce", r.test_ce},
            {"test_per_class_accuracy", r.test_per_class_accuracy},
            {"stopped_early", r.stopped_early},
            {"num_parameters", r.num_parameters}};
}

/// Wall-clock and memory part of a RunReport.
inline nlohmann::json profile_json(const RunReport& r)
{
    return {{"gather_s", r.timing.gather_s},   {"forward_s", r.timing.forward_s}, {"backward_s", r.timing.backward_s},
            {"step_s", r.timing.step_s},       {"eval_s", r.timing.eval_s},       {"total_s", r.timing.total_s},
            {"peak_tape_bytes", r.peak_tape_bytes}, {"peak_heap_bytes", r.peak_heap_bytes}};
}

struct TrainResult {
    Model<float> model; // parameters at the best validation epoch
    RunReport report;
};

using Clock = std::chrono::steady_clock;

inline double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

/// Fills model.input_dim / num_classes from the data and checks the hop count.
inline ModelConfig resolve_model_config(ModelConfig mc, const HopTensor& hops, const LabeledNodes& labels)
{
    mc.input_dim = hops.dim;
    mc.num_classes = static_cast<std::size_t>(labels.num_classes);
    if (mc.num_tokens() > hops.num_hops)
        throw ConfigError("cache/model dimension mismatch: model wants " + std::to_string(mc.num_tokens()) +
                          " hop slices but the cache holds " + std::to_string(hops.num_hops));
    return mc;
}

/// Batch boundaries over n items; the tail is merged into the previous batch when it
/// would be smaller than `min_size`.
inline std::vector<std::pair<std::size_t, std::size_t>> batch_ranges(std::size_t n, std::size_t batch, std::size_t min_size)
{
    std::vector<std::pair<std::size_t, std::size_t>> out;
    for (std::size_t s = 0; s < n; s += batch) out.emplace_back(s, std::min(n, s + batch));
    if (out.size() > 1 && out.back().second - out.back().first < min_size) {
        auto last = out.back();
        out.pop_back();
        out.back().second = last.second;
    }
    return out;
}

struct StepOutput {
    double loss = 0;
    double ce = 0;
    double ssl = 0;
};

/// One optimization step on a gathered batch: one forward (plain CE) or two
/// independently-masked forwards (CE averaged over both views + lambda * SSL).
inline StepOutput train_step(Model<float>& model, AdamState<float>& adam, const AdamOptions& opt, const LossConfig& loss_cfg,
                             ad::Tape<float>& tape, Tensor<float> batch, std::span<const std::int32_t> y, std::mt19937_64& drop_rng,
                             PhaseTimes* times = nullptr)
{
    auto t0 = Clock::now();
    tape.reset();
    ad::Var x = tape.constant(std::move(batch));
    ad::Var loss, ce, ssl;
    if (loss_cfg.ssl_kind == SslKind::none) {
        auto out = model.forward(tape, x, drop_rng, true);
        loss = ce = ad::cross_entropy(tape, out.logits, y);
    } else {
        auto a = model.forward(tape, x, drop_rng, true);
        auto b = model.forward(tape, x, drop_rng, true);
        ce = ad::scale(tape, ad::add(tape, ad::cross_entropy(tape, a.logits, y), ad::cross_entropy(tape, b.logits, y)), 0.5f);
        if (loss_cfg.ssl_kind == SslKind::barlow) {
            ssl = ad::barlow_loss(tape, ad::flatten(tape, a.hk), ad::flatten(tape, b.hk), loss_cfg.alpha, loss_cfg.barlow_eps);
        } else {
            std::vector<std::int32_t> both(y.begin(), y.end());
            both.insert(both.end(), y.begin(), y.end());
            ssl = ad::supcon_loss(tape, ad::concat_rows(tape, a.z, b.z), both, loss_cfg.tau, loss_cfg.scl_normalize);
        }
        loss = ad::total_loss(tape, ce, ssl, loss_cfg.lambda);
    }
    StepOutput res{tape.scalar(loss), tape.scalar(ce), ssl.valid() ? tape.scalar(ssl) : 0.0};
    auto t1 = Clock::now();
    if (!std::isfinite(res.loss)) return res;
    tape.backward(loss);
    auto t2 = Clock::now();
    adam_step(model.params(), adam, opt);
    model.params().zero_grad();
    auto t3 = Clock::now();
    if (times) {
        times->forward_s += std::chrono::duration<double>(t1 - t0).count();
        times->backward_s += std::chrono::duration<double>(t2 - t1).count();
        times->step_s += std::chrono::duration<double>(t3 - t2).count();
    }
    return res;
}

struct TrainCallbacks {
    std::function<void(const EpochRecord&)> on_epoch;
    std::function<void(std::size_t epoch, std::size_t batch, const StepOutput&)> on_step;
};

/// Trains on split.train, early-stops on split.val accuracy (ties: lower val CE),
/// reports split.test accuracy once from the best-validation parameters.
inline TrainResult train(const HopTensor& hops_in, const LabeledNodes& labels, const Split& split, const TrainConfig& cfg,
                         const TrainCallbacks& callbacks = {})
{
    cfg.validate();
    const auto t_start = Clock::now();
    const ModelConfig mc = resolve_model_config(cfg.model, hops_in, labels);
    const HopTensor* hops = &hops_in;
    HopTensor truncated;
    if (mc.num_tokens() < hops_in.num_hops) {
        truncated = hops_in.prefix(mc.num_tokens());
        hops = &truncated;
    }

    std::vector<std::uint32_t> train_ids;
    for (auto id : split.train) {
        if (id >= labels.labels.size()) throw DataError("train split: node id " + std::to_string(id) + " out of range");
        if (labels.labels[id] != kUnlabeled) train_ids.push_back(id);
    }
    if (train_ids.empty()) throw DataError("train split has no labeled nodes");
    if (split.val.empty() || split.test.empty()) throw DataError("validation and test splits must be non-empty");
    if (cfg.loss.ssl_kind == SslKind::barlow && train_ids.size() < 2) throw DataError("barlow loss needs at least 2 training nodes");

    Model<float> model = Model<float>::init(mc, cfg.seed);
    AdamState<float> adam;
    const AdamOptions opt{cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay, cfg.decoupled_weight_decay};
    auto shuffle_rng = make_rng(cfg.seed, RngPurpose::shuffle);
    auto drop_rng = make_rng(cfg.seed, RngPurpose::dropout);

    TrainResult result{model, {}};
    RunReport& rep = result.report;
    rep.num_parameters = model.params().num_scalars();
    if (memory::installed()) memory::reset_peak();
    const auto heap_base = memory::current_bytes();

    double best_acc = -1, best_ce = std::numeric_limits<double>::infinity();
    std::size_t since_best = 0;
    ad::Tape<float> tape;
    const std::size_t min_batch = cfg.loss.ssl_kind == SslKind::barlow ? 2 : 1;
    for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
        std::vector<std::uint32_t> order = train_ids;
        shuffle_in_place(order, shuffle_rng);
        double loss_sum = 0;
        std::size_t bi = 0;
        for (auto [lo, hi] : batch_ranges(order.size(), cfg.batch_size, min_batch)) {
            auto t0 = Clock::now();
            std::span<const std::uint32_t> ids(order.data() + lo, hi - lo);
            std::vector<std::int32_t> y(ids.size());
            for (std::size_t i = 0; i < ids.size(); ++i) y[i] = labels.labels[ids[i]];
            Tensor<float> batch = gather_batch(*hops, ids);
            rep.timing.gather_s += seconds_since(t0);
            auto step = train_step(model, adam, opt, cfg.loss, tape, std::move(batch), y, drop_rng, &rep.timing);
            if (!std::isfinite(step.loss))
                throw NumericError("non-finite loss at epoch " + std::to_string(epoch) + ", batch " + std::to_string(bi));
            rep.peak_tape_bytes = std::max(rep.peak_tape_bytes, tape.bytes());
            if (callbacks.on_step) callbacks.on_step(epoch, bi, step);
            loss_sum += step.loss * static_cast<double>(ids.size());
            ++bi;
        }
        auto te = Clock::now();
        auto val = evaluate(model, *hops, split.val, labels, cfg.eval_batch_size);
        rep.timing.eval_s += seconds_since(te);
        EpochRecord rec{epoch, loss_sum / static_cast<double>(train_ids.size()), val.accuracy, val.mean_ce};
        rep.epochs.push_back(rec);
        if (callbacks.on_epoch) callbacks.on_epoch(rec);
        if (val.accuracy > best_acc || (val.accuracy == best_acc && val.mean_ce < best_ce)) {
            best_acc = val.accuracy;
            best_ce = val.mean_ce;
            rep.best_epoch = epoch;
            result.model = model;
            since_best = 0;
        } else if (++since_best >= cfg.patience) {
            rep.stopped_early = epoch < cfg.max_epochs;
            break;
        }
    }
    rep.best_val_accuracy = best_acc;
    rep.best_val_ce = best_ce;
    auto te = Clock::now();
    auto test = evaluate(result.model, *hops, split.test, labels, cfg.eval_batch_size);
    rep.timing.eval_s += seconds_since(te);
    rep.test_accuracy = test.accuracy;
    rep.test_ce = test.mean_ce;
    rep.test_per_class_accuracy = test.per_class_accuracy;
    rep.timing.total_s = seconds_since(t_start);
    rep.peak_heap_bytes = memory::installed() ? memory::peak_bytes() - heap_base : 0;
    return result;
}

struct ProtocolReport {
    std::string name;
    double mean = 0;
    double std = 0; // population standard deviation over splits
    std::vector<double> split_accuracies;
    std::vector<RunReport> runs;
    std::vector<Model<float>> checkpoints;
    double precompute_s = 0;
};

inline nlohmann::json protocol_json(const ProtocolReport& p)
{
    nlohmann::json runs = nlohmann::json::array();
    for (const auto& r : p.runs) runs.push_back(report_json(r));
    return {{"name", p.name}, {"mean", p.mean}, {"std", p.std}, {"split_accuracies", p.split_accuracies}, {"runs", runs}};
}

inline std::pair<double, double> mean_std(const std::vector<double>& xs)
{
    if (xs.empty()) return {0.0, 0.0};
    double m = 0;
    for (double x : xs) m += x;
    m /= static_cast<double>(xs.size());
    double v = 0;
    for (double x : xs) v += (x - m) * (x - m);
    return {m, std::sqrt(v / static_cast<double>(xs.size()))};
}

/// Trains one model per split on a shared hop tensor. Split i uses seed cfg.seed + i.
inline ProtocolReport run_splits(const HopTensor& hops, const LabeledNodes& labels, const std::vector<Split>& splits,
                                 const TrainConfig& cfg, std::string name,
                                 const std::function<void(std::size_t, const RunReport&)>& on_split = {})
{
    ProtocolReport rep;
    rep.name = std::move(name);
    for (std::size_t i = 0; i < splits.size(); ++i) {
        TrainConfig c = cfg;
        c.seed = cfg.seed + i;
        auto res = train(hops, labels, splits[i], c);
        rep.split_accuracies.push_back(res.report.test_accuracy);
        if (on_split) on_split(i, res.report);
        rep.runs.push_back(std::move(res.report));
        rep.checkpoints.push_back(std::move(res.model));
    }
    std::tie(rep.mean, rep.std) = mean_std(rep.split_accuracies);
    return rep;
}

} // namespace hopflow

#endif
