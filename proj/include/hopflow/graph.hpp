#ifndef HOPFLOW_GRAPH_HPP
#define HOPFLOW_GRAPH_HPP

// Graph ingestion: CSR adjacency, dataset files, normalization, homophily, splits.

#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "common.hpp"
#include "io.hpp"

namespace hopflow {

/// CSR adjacency. Column indices are strictly increasing inside each row.
struct SparseGraph {
    std::size_t num_nodes = 0;
    std::vector<std::size_t> row_offsets{0};
    std::vector<std::uint32_t> col_indices;
    std::vector<double> values;

    std::size_t nnz() const { return col_indices.size(); }
    std::size_t degree(std::size_t u) const { return row_offsets[u + 1] - row_offsets[u]; }

    /// Throws ConfigError when the CSR invariants do not hold.
    void validate() const
    {
        if (row_offsets.size() != num_nodes + 1 || row_offsets.front() != 0 || row_offsets.back() != nnz() ||
            values.size() != nnz())
            throw ConfigError("csr: inconsistent array sizes");
        for (std::size_t u = 0; u < num_nodes; ++u) {
            if (row_offsets[u] > row_offsets[u + 1]) throw ConfigError("csr: row_offsets decreasing at row " + std::to_string(u));
            for (std::size_t e = row_offsets[u]; e < row_offsets[u + 1]; ++e) {
                if (col_indices[e] >= num_nodes) throw ConfigError("csr: column out of range in row " + std::to_string(u));
                if (e > row_offsets[u] && col_indices[e] <= col_indices[e - 1])
                    throw ConfigError("csr: columns not strictly increasing in row " + std::to_string(u));
            }
        }
    }

    bool is_structurally_symmetric() const
    {
        for (std::size_t u = 0; u < num_nodes; ++u)
            for (std::size_t e = row_offsets[u]; e < row_offsets[u + 1]; ++e)
                if (find(col_indices[e], u) < 0) return false;
        return true;
    }

    /// Index of entry (u, v) in the CSR arrays, or -1.
    std::ptrdiff_t find(std::size_t u, std::size_t v) const
    {
        auto first = col_indices.begin() + static_cast<std::ptrdiff_t>(row_offsets[u]);
        auto last = col_indices.begin() + static_cast<std::ptrdiff_t>(row_offsets[u + 1]);
        auto it = std::lower_bound(first, last, static_cast<std::uint32_t>(v));
        if (it == last || *it != v) return -1;
        return it - col_indices.begin();
    }

    /// Row-major N x N copy; only for small graphs in tests and tools.
    std::vector<double> to_dense() const
    {
        std::vector<double> dense(num_nodes * num_nodes, 0.0);
        for (std::size_t u = 0; u < num_nodes; ++u)
            for (std::size_t e = row_offsets[u]; e < row_offsets[u + 1]; ++e)
                dense[u * num_nodes + col_indices[e]] = values[e];
        return dense;
    }

    /// Canonical symmetric, deduplicated, self-loop-free graph with unit weights.
    static SparseGraph from_undirected_edges(std::size_t n, std::vector<std::pair<std::uint32_t, std::uint32_t>> edges)
    {
        std::vector<std::pair<std::uint32_t, std::uint32_t>> both;
        both.reserve(edges.size() * 2);
        for (auto [u, v] : edges) {
            if (u >= n || v >= n) throw DataError("edge (" + std::to_string(u) + "," + std::to_string(v) + ") out of range");
            if (u == v) continue;
            both.emplace_back(u, v);
            both.emplace_back(v, u);
        }
        std::sort(both.begin(), both.end());
        both.erase(std::unique(both.begin(), both.end()), both.end());
        SparseGraph g;
        g.num_nodes = n;
        g.row_offsets.assign(n + 1, 0);
        g.col_indices.reserve(both.size());
        for (auto [u, v] : both) {
            ++g.row_offsets[u + 1];
            g.col_indices.push_back(v);
        }
        for (std::size_t u = 0; u < n; ++u) g.row_offsets[u + 1] += g.row_offsets[u];
        g.values.assign(g.col_indices.size(), 1.0);
        return g;
    }

    /// Undirected edge list (u < v), one entry per symmetric pair.
    std::vector<std::pair<std::uint32_t, std::uint32_t>> undirected_edges() const
    {
        std::vector<std::pair<std::uint32_t, std::uint32_t>> out;
        for (std::size_t u = 0; u < num_nodes; ++u)
            for (std::size_t e = row_offsets[u]; e < row_offsets[u + 1]; ++e)
                if (u < col_indices[e]) out.emplace_back(static_cast<std::uint32_t>(u), col_indices[e]);
        return out;
    }
};

/// Node features, N x d, float32 row-major.
struct FeatureMatrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<float> data;

    FeatureMatrix() = default;
    FeatureMatrix(std::size_t r, std::size_t c) : rows(r), cols(c), data(r * c, 0.0f) {}

    float& at(std::size_t r, std::size_t c) { return data[r * cols + c]; }
    float at(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
};

struct LabeledNodes {
    std::vector<std::int32_t> labels; // kUnlabeled for missing
    std::int32_t num_classes = 0;

    std::vector<std::uint32_t> labeled_ids() const
    {
        std::vector<std::uint32_t> ids;
        for (std::size_t i = 0; i < labels.size(); ++i)
            if (labels[i] != kUnlabeled) ids.push_back(static_cast<std::uint32_t>(i));
        return ids;
    }
};

struct Split {
    std::vector<std::uint32_t> train;
    std::vector<std::uint32_t> val;
    std::vector<std::uint32_t> test;

    void validate(std::size_t n) const
    {
        if (train.empty() || val.empty() || test.empty()) throw DataError("split: train/val/test must all be non-empty");
        std::vector<char> seen(n, 0);
        for (const auto* part : {&train, &val, &test})
            for (auto id : *part) {
                if (id >= n) throw DataError("split: node id " + std::to_string(id) + " out of range");
                if (seen[id]) throw DataError("split: node " + std::to_string(id) + " appears in more than one part");
                seen[id] = 1;
            }
    }
};

struct Dataset {
    SparseGraph graph;
    FeatureMatrix features;
    LabeledNodes labels;
};

namespace detail {

inline std::vector<std::string_view> split_fields(std::string_view line)
{
    std::vector<std::string_view> out;
    std::size_t i = 0;
    while (i < line.size()) {
        while (i < line.size() && (line[i] == '\t' || line[i] == ' ' || line[i] == '\r')) ++i;
        std::size_t j = i;
        while (j < line.size() && line[j] != '\t' && line[j] != ' ' && line[j] != '\r') ++j;
        if (j > i) out.push_back(line.substr(i, j - i));
        i = j;
    }
    return out;
}

template <class Int>
bool parse_int(std::string_view s, Int& out)
{
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
    return ec == std::errc() && p == s.data() + s.size();
}

/// Calls fn(line_number, fields) for every non-empty, non-comment line.
template <class Fn>
void for_each_record(const std::filesystem::path& path, Fn&& fn)
{
    std::ifstream is(path);
    if (!is) throw DataError("missing file " + path.string());
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        auto fields = split_fields(line);
        if (fields.empty() || fields.front().front() == '#') continue;
        fn(lineno, fields);
    }
}

} // namespace detail

/// Reads an HGF1 feature file.
inline FeatureMatrix load_features(const std::filesystem::path& path)
{
    if (!std::filesystem::exists(path)) throw DataError("missing file " + path.string());
    auto is = io::open_in(path);
    io::expect_magic(is, "HGF1", path.string());
    std::uint64_t n = io::read_u64(is, "N");
    std::uint64_t d = io::read_u64(is, "d");
    if (d == 0) throw FormatError(path.string() + ": feature dimension is 0");
    std::uint64_t expected = 4 + 16 + n * d * 4;
    if (io::file_size(path) != expected)
        throw FormatError(path.string() + ": header says " + std::to_string(n) + "x" + std::to_string(d) +
                          " but file size is " + std::to_string(io::file_size(path)) + " (expected " +
                          std::to_string(expected) + ")");
    FeatureMatrix x(n, d);
    is.read(reinterpret_cast<char*>(x.data.data()), static_cast<std::streamsize>(x.data.size() * sizeof(float)));
    for (std::size_t i = 0; i < x.data.size(); ++i)
        if (!std::isfinite(x.data[i])) throw DataError(path.string() + ": non-finite feature at row " + std::to_string(i / d));
    return x;
}

inline void save_features(const FeatureMatrix& x, const std::filesystem::path& path)
{
    auto os = io::open_out(path);
    os.write("HGF1", 4);
    io::write_u64(os, x.rows);
    io::write_u64(os, x.cols);
    os.write(reinterpret_cast<const char*>(x.data.data()), static_cast<std::streamsize>(x.data.size() * sizeof(float)));
    if (!os) throw DataError("write failed: " + path.string());
}

/// Loads edges.tsv + features.bin + labels.tsv. N comes from the feature header;
/// the number of classes is derived from the labels present.
inline Dataset load_dataset(const std::filesystem::path& dir)
{
    Dataset ds;
    ds.features = load_features(dir / "features.bin");
    const std::size_t n = ds.features.rows;

    std::vector<std::pair<std::uint32_t, std::uint32_t>> edges;
    auto edge_path = dir / "edges.tsv";
    detail::for_each_record(edge_path, [&](std::size_t lineno, const auto& f) {
        std::uint64_t u = 0, v = 0;
        if (f.size() != 2 || !detail::parse_int(f[0], u) || !detail::parse_int(f[1], v))
            throw DataError(edge_path.string() + ":" + std::to_string(lineno) + ": malformed edge line");
        if (u >= n || v >= n)
            throw DataError(edge_path.string() + ":" + std::to_string(lineno) + ": node id " + std::to_string(std::max(u, v)) +
                            " >= N=" + std::to_string(n));
        edges.emplace_back(static_cast<std::uint32_t>(u), static_cast<std::uint32_t>(v));
    });
    ds.graph = SparseGraph::from_undirected_edges(n, std::move(edges));

    ds.labels.labels.assign(n, kUnlabeled);
    auto label_path = dir / "labels.tsv";
    std::int32_t max_label = -1;
    detail::for_each_record(label_path, [&](std::size_t lineno, const auto& f) {
        std::uint64_t node = 0;
        std::int32_t cls = 0;
        if (f.size() != 2 || !detail::parse_int(f[0], node) || !detail::parse_int(f[1], cls) || cls < 0)
            throw DataError(label_path.string() + ":" + std::to_string(lineno) + ": malformed label line");
        if (node >= n)
            throw DataError(label_path.string() + ":" + std::to_string(lineno) + ": node id " + std::to_string(node) +
                            " >= N=" + std::to_string(n));
        ds.labels.labels[node] = cls;
        max_label = std::max(max_label, cls);
    });
    ds.labels.num_classes = max_label + 1;
    if (ds.labels.num_classes < 2) throw DataError(label_path.string() + ": need at least 2 classes");
    return ds;
}

inline void save_dataset(const Dataset& ds, const std::filesystem::path& dir)
{
    std::filesystem::create_directories(dir);
    save_features(ds.features, dir / "features.bin");
    {
        std::ofstream os(dir / "edges.tsv");
        os << "# src\tdst\n";
        for (auto [u, v] : ds.graph.undirected_edges()) os << u << '\t' << v << '\n';
    }
    {
        std::ofstream os(dir / "labels.tsv");
        os << "# node\tclass\n";
        for (std::size_t i = 0; i < ds.labels.labels.size(); ++i)
            if (ds.labels.labels[i] != kUnlabeled) os << i << '\t' << ds.labels.labels[i] << '\n';
    }
}

enum class NormMode { sym, row };

inline NormMode parse_norm_mode(std::string_view s)
{
    if (s == "sym") return NormMode::sym;
    if (s == "row") return NormMode::row;
    throw ConfigError("unknown normalization mode '" + std::string(s) + "' (expected sym or row)");
}

inline std::string to_string(NormMode m) { return m == NormMode::sym ? "sym" : "row"; }

/// sym: D^-1/2 (A+I) D^-1/2, row: D^-1 (A+I); the identity term only when add_self_loops.
/// Nodes with zero degree keep an empty row.
inline SparseGraph normalize(const SparseGraph& g, NormMode mode, bool add_self_loops)
{
    SparseGraph out;
    out.num_nodes = g.num_nodes;
    out.row_offsets.assign(g.num_nodes + 1, 0);
    out.col_indices.reserve(g.nnz() + (add_self_loops ? g.num_nodes : 0));
    out.values.reserve(out.col_indices.capacity());
    for (std::size_t u = 0; u < g.num_nodes; ++u) {
        bool placed = !add_self_loops;
        for (std::size_t e = g.row_offsets[u]; e < g.row_offsets[u + 1]; ++e) {
            auto v = g.col_indices[e];
            if (!placed && v >= u) {
                if (v == u) {
                    out.col_indices.push_back(v);
                    out.values.push_back(g.values[e] + 1.0);
                    placed = true;
                    continue;
                }
                out.col_indices.push_back(static_cast<std::uint32_t>(u));
                out.values.push_back(1.0);
                placed = true;
            }
            out.col_indices.push_back(v);
            out.values.push_back(g.values[e]);
        }
        if (!placed) {
            out.col_indices.push_back(static_cast<std::uint32_t>(u));
            out.values.push_back(1.0);
        }
        out.row_offsets[u + 1] = out.col_indices.size();
    }

    std::vector<double> degree(g.num_nodes, 0.0);
    std::size_t isolated = 0;
    for (std::size_t u = 0; u < g.num_nodes; ++u) {
        for (std::size_t e = out.row_offsets[u]; e < out.row_offsets[u + 1]; ++e) degree[u] += out.values[e];
        if (degree[u] == 0.0) ++isolated;
    }
    if (isolated) warn(std::to_string(isolated) + " node(s) have zero degree; their normalized rows stay empty");

    if (mode == NormMode::sym) {
        std::vector<double> inv_sqrt(g.num_nodes, 0.0);
        for (std::size_t u = 0; u < g.num_nodes; ++u)
            if (degree[u] > 0.0) inv_sqrt[u] = 1.0 / std::sqrt(degree[u]);
        for (std::size_t u = 0; u < g.num_nodes; ++u)
            for (std::size_t e = out.row_offsets[u]; e < out.row_offsets[u + 1]; ++e) {
                std::size_t v = out.col_indices[e];
                // order the factors by node id so (u,v) and (v,u) are bit-identical
                double a = inv_sqrt[std::min(u, v)], b = inv_sqrt[std::max(u, v)];
                out.values[e] = (a * b) * out.values[e];
            }
    } else {
        for (std::size_t u = 0; u < g.num_nodes; ++u) {
            if (degree[u] == 0.0) continue;
            double inv = 1.0 / degree[u];
            for (std::size_t e = out.row_offsets[u]; e < out.row_offsets[u + 1]; ++e) out.values[e] *= inv;
        }
    }
    return out;
}

/// Fraction of edges whose endpoints share a label. Diagonal entries are ignored.
inline double edge_homophily(const SparseGraph& g, const LabeledNodes& labels)
{
    std::size_t same = 0, total = 0;
    for (std::size_t u = 0; u < g.num_nodes; ++u)
        for (std::size_t e = g.row_offsets[u]; e < g.row_offsets[u + 1]; ++e) {
            std::size_t v = g.col_indices[e];
            if (u == v) continue;
            for (auto node : {u, v})
                if (labels.labels.at(node) == kUnlabeled)
                    throw DataError("edge_homophily: node " + std::to_string(node) + " is unlabeled");
            ++total;
            if (labels.labels[u] == labels.labels[v]) ++same;
        }
    if (total == 0) throw DataError("edge_homophily: graph has no edges");
    return static_cast<double>(same) / static_cast<double>(total);
}

struct SplitRatios {
    double train = 0.48;
    double val = 0.32;
    double test = 0.20;
};

/// k seeded permutation splits of [0, n). Train and val sizes are floored; test takes the rest.
inline std::vector<Split> make_splits(std::size_t n, SplitRatios ratios, std::uint64_t seed, std::size_t k)
{
    if (std::abs(ratios.train + ratios.val + ratios.test - 1.0) > 1e-9) throw ConfigError("split ratios must sum to 1");
    auto n_train = static_cast<std::size_t>(std::floor(ratios.train * static_cast<double>(n)));
    auto n_val = static_cast<std::size_t>(std::floor(ratios.val * static_cast<double>(n)));
    if (n_train == 0 || n_val == 0 || n_train + n_val >= n)
        throw DataError("make_splits: n=" + std::to_string(n) + " too small for non-empty train/val/test");
    std::vector<Split> out;
    out.reserve(k);
    for (std::size_t i = 0; i < k; ++i) {
        std::vector<std::uint32_t> perm(n);
        std::iota(perm.begin(), perm.end(), 0u);
        auto rng = make_rng(seed, RngPurpose::split, i);
        shuffle_in_place(perm, rng);
        Split s;
        s.train.assign(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(n_train));
        s.val.assign(perm.begin() + static_cast<std::ptrdiff_t>(n_train), perm.begin() + static_cast<std::ptrdiff_t>(n_train + n_val));
        s.test.assign(perm.begin() + static_cast<std::ptrdiff_t>(n_train + n_val), perm.end());
        out.push_back(std::move(s));
    }
    return out;
}

/// make_splits over the labeled nodes only, mapped back to node ids.
inline std::vector<Split> make_labeled_splits(const LabeledNodes& labels, SplitRatios ratios, std::uint64_t seed, std::size_t k)
{
    auto ids = labels.labeled_ids();
    auto splits = make_splits(ids.size(), ratios, seed, k);
    for (auto& s : splits)
        for (auto* part : {&s.train, &s.val, &s.test})
            for (auto& i : *part) i = ids[i];
    return splits;
}

inline Split load_split(const std::filesystem::path& path)
{
    std::ifstream is(path);
    if (!is) throw DataError("missing split file " + path.string());
    nlohmann::json j;
    try {
        is >> j;
        Split s;
        s.train = j.at("train").get<std::vector<std::uint32_t>>();
        s.val = j.at("val").get<std::vector<std::uint32_t>>();
        s.test = j.at("test").get<std::vector<std::uint32_t>>();
        return s;
    } catch (const nlohmann::json::exception& e) {
        throw DataError(path.string() + ": " + e.what());
    }
}

inline void save_split(const Split& s, const std::filesystem::path& path)
{
    nlohmann::json j{{"train", s.train}, {"val", s.val}, {"test", s.test}};
    std::ofstream os(path);
    os << j.dump() << '\n';
}

/// Explicit split files in a dataset directory: splits.json, or splits_0.json, splits_1.json, ...
inline std::vector<Split> find_split_files(const std::filesystem::path& dir)
{
    std::vector<Split> out;
    if (std::filesystem::exists(dir / "splits.json")) {
        out.push_back(load_split(dir / "splits.json"));
        return out;
    }
    for (std::size_t i = 0;; ++i) {
        auto p = dir / ("splits_" + std::to_string(i) + ".json");
        if (!std::filesystem::exists(p)) break;
        out.push_back(load_split(p));
    }
    return out;
}

} // namespace hopflow

#endif
