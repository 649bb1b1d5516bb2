#ifndef HOPFLOW_TOY_HPP
#define HOPFLOW_TOY_HPP

// Seeded synthetic datasets: the two-hop parity set, a small homophilous SBM,
// and random graphs for throughput measurements.

#include <cmath>

#include "graph.hpp"
#include "hops.hpp"

namespace hopflow::toy {

namespace detail {

inline double normal01(std::mt19937_64& rng)
{
    // Box-Muller on the portable uniform draw so every platform produces the same stream.
    const double u1 = 1.0 - uniform01(rng);
    const double u2 = uniform01(rng);
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
}

inline std::size_t below(std::mt19937_64& rng, std::size_t n) { return static_cast<std::size_t>(uniform01(rng) * static_cast<double>(n)); }

} // namespace detail

struct ParityOptions {
    std::size_t targets = 300;
    std::size_t middle = 3;    // neighbors of each target
    std::size_t outer = 2;     // extra neighbors of each middle node
    std::size_t noise_dims = 2;
    double on_lo = 0.6, on_hi = 1.0, off_hi = 0.3;
};

/// Two-hop parity set. Target nodes carry all-zero features and are the only labeled
/// nodes. Target v of class y has `middle` neighbors whose features are strong on channel y,
/// and each middle node has `outer` leaf neighbors strong on channel 1 - y. Under row
/// normalization without self-loops, hop 1 of v is strong on channel y and hop 2 on
/// channel 1 - y, with identical distributions, so the class is readable only from
/// which hop position holds which channel. Use with hops = 2.
inline Dataset make_parity(std::uint64_t seed, const ParityOptions& o = {})
{
    auto rng = make_rng(seed, RngPurpose::data);
    const std::size_t d = 2 + o.noise_dims;
    const std::size_t n = o.targets * (1 + o.middle + o.middle * o.outer);
    Dataset ds;
    ds.features = FeatureMatrix(n, d);
    ds.labels.labels.assign(n, kUnlabeled);
    ds.labels.num_classes = 2;
    auto carrier = [&](std::size_t node, std::size_t channel, float scale) {
        for (std::size_t k = 0; k < d; ++k) {
            double v;
            if (k == channel) v = o.on_lo + (o.on_hi - o.on_lo) * uniform01(rng);
            else if (k < 2) v = o.off_hi * uniform01(rng);
            else v = uniform01(rng);
            ds.features.at(node, k) = static_cast<float>(v) * scale;
        }
    };
    std::vector<std::pair<std::uint32_t, std::uint32_t>> edges;
    std::size_t next = o.targets;
    const float outer_scale = static_cast<float>(o.outer + 1) / static_cast<float>(o.outer);
    for (std::size_t t = 0; t < o.targets; ++t) {
        const auto y = static_cast<std::int32_t>(t % 2);
        ds.labels.labels[t] = y;
        for (std::size_t m = 0; m < o.middle; ++m) {
            const std::size_t u = next++;
            edges.emplace_back(static_cast<std::uint32_t>(t), static_cast<std::uint32_t>(u));
            carrier(u, static_cast<std::size_t>(y), 1.0f);
            // the leaves of one middle node share a feature vector; scaled so their
            // contribution to hop 2 of the target matches a middle node's contribution to hop 1
            const std::size_t first = next;
            carrier(first, static_cast<std::size_t>(1 - y), outer_scale);
            for (std::size_t w = 0; w < o.outer; ++w) {
                const std::size_t leaf = next++;
                for (std::size_t k = 0; k < d; ++k) ds.features.at(leaf, k) = ds.features.at(first, k);
                edges.emplace_back(static_cast<std::uint32_t>(u), static_cast<std::uint32_t>(leaf));
            }
        }
    }
    ds.graph = SparseGraph::from_undirected_edges(n, std::move(edges));
    return ds;
}

/// Hand-built classifier for the parity set: class 0 iff the hop-1 token is stronger on
/// channel 0 than on channel 1. Returns its accuracy over the labeled nodes.
inline double parity_rule_accuracy(const HopTensor& h, const LabeledNodes& labels, std::size_t hop = 1)
{
    std::size_t hits = 0, total = 0;
    for (auto id : labels.labeled_ids()) {
        const std::int32_t pred = h.at(id, hop, 0) > h.at(id, hop, 1) ? 0 : 1;
        hits += pred == labels.labels[id];
        ++total;
    }
    return total ? static_cast<double>(hits) / static_cast<double>(total) : 0.0;
}

struct HomophilyOptions {
    std::size_t nodes = 50;
    std::size_t classes = 2;
    std::size_t dim = 8;
    double p_in = 0.3;
    double p_out = 0.02;
    double noise = 1.0;
};

/// Stochastic block model with class-prototype features plus Gaussian noise.
inline Dataset make_homophily(std::uint64_t seed, const HomophilyOptions& o = {})
{
    auto rng = make_rng(seed, RngPurpose::data);
    Dataset ds;
    ds.labels.labels.resize(o.nodes);
    ds.labels.num_classes = static_cast<std::int32_t>(o.classes);
    for (std::size_t i = 0; i < o.nodes; ++i) ds.labels.labels[i] = static_cast<std::int32_t>(i % o.classes);
    std::vector<std::pair<std::uint32_t, std::uint32_t>> edges;
    std::vector<std::size_t> degree(o.nodes, 0);
    for (std::size_t i = 0; i < o.nodes; ++i)
        for (std::size_t j = i + 1; j < o.nodes; ++j) {
            const double p = ds.labels.labels[i] == ds.labels.labels[j] ? o.p_in : o.p_out;
            if (uniform01(rng) < p) {
                edges.emplace_back(static_cast<std::uint32_t>(i), static_cast<std::uint32_t>(j));
                ++degree[i];
                ++degree[j];
            }
        }
    for (std::size_t i = 0; i < o.nodes; ++i)
        if (degree[i] == 0) {
            std::size_t j = (i + o.classes) % o.nodes;
            edges.emplace_back(static_cast<std::uint32_t>(i), static_cast<std::uint32_t>(j));
            ++degree[i];
            ++degree[j];
        }
    ds.graph = SparseGraph::from_undirected_edges(o.nodes, std::move(edges));
    ds.features = FeatureMatrix(o.nodes, o.dim);
    for (std::size_t i = 0; i < o.nodes; ++i)
        for (std::size_t k = 0; k < o.dim; ++k) {
            const double proto = (k % o.classes) == static_cast<std::size_t>(ds.labels.labels[i]) ? 1.0 : 0.0;
            ds.features.at(i, k) = static_cast<float>(proto + o.noise * detail::normal01(rng));
        }
    return ds;
}

/// Mostly cross-class edges: the same block model with the edge probabilities swapped.
inline HomophilyOptions heterophily_options()
{
    HomophilyOptions o;
    o.nodes = 200;
    o.p_in = 0.005;
    o.p_out = 0.06;
    return o;
}

struct RandomGraphOptions {
    std::size_t nodes = 2000;
    std::size_t edges = 10000;
    std::size_t dim = 64;
    std::size_t classes = 4;
};

/// Uniform random graph with random features and labels. The same seed with a larger
/// edge count yields identical features and labels.
inline Dataset make_random(std::uint64_t seed, const RandomGraphOptions& o = {})
{
    Dataset ds;
    auto feat_rng = make_rng(seed, RngPurpose::data, 0);
    ds.features = FeatureMatrix(o.nodes, o.dim);
    for (auto& v : ds.features.data) v = static_cast<float>(detail::normal01(feat_rng));
    ds.labels.labels.resize(o.nodes);
    ds.labels.num_classes = static_cast<std::int32_t>(o.classes);
    for (std::size_t i = 0; i < o.nodes; ++i) ds.labels.labels[i] = static_cast<std::int32_t>(detail::below(feat_rng, o.classes));
    auto edge_rng = make_rng(seed, RngPurpose::data, 1);
    std::vector<std::pair<std::uint32_t, std::uint32_t>> edges;
    edges.reserve(o.edges);
    for (std::size_t e = 0; e < o.edges; ++e)
        edges.emplace_back(static_cast<std::uint32_t>(detail::below(edge_rng, o.nodes)),
                           static_cast<std::uint32_t>(detail::below(edge_rng, o.nodes)));
    ds.graph = SparseGraph::from_undirected_edges(o.nodes, std::move(edges));
    return ds;
}

} // namespace hopflow::toy

#endif
