#ifndef HOPFLOW_HOPS_HPP
#define HOPFLOW_HOPS_HPP

// Multi-hop feature pre-computation and the HGH1 hop cache.
//
// The cache holds, for every node, the stack [X, AX, A^2 X, ..., A^L X] laid out
// [node][hop][dim]. Everything downstream of this header (model, objectives,
// training) consumes HopTensor / gathered batches only and never sees a graph.

#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <span>

#include "common.hpp"
#include "graph.hpp"
#include "io.hpp"

namespace hopflow {

struct HopTensor {
    std::size_t num_nodes = 0;
    std::size_t num_hops = 0; // L + 1
    std::size_t dim = 0;
    std::vector<float> data;

    std::size_t row_size() const { return num_hops * dim; }
    float at(std::size_t node, std::size_t hop, std::size_t d) const { return data[(node * num_hops + hop) * dim + d]; }
    std::span<const float> node_row(std::size_t node) const { return {data.data() + node * row_size(), row_size()}; }

    FeatureMatrix slice(std::size_t hop) const
    {
        if (hop >= num_hops) throw ConfigError("hop index " + std::to_string(hop) + " out of range");
        FeatureMatrix out(num_nodes, dim);
        for (std::size_t n = 0; n < num_nodes; ++n)
            std::memcpy(&out.data[n * dim], &data[(n * num_hops + hop) * dim], dim * sizeof(float));
        return out;
    }

    /// First `hops` slices (hop 0 .. hops-1). Truncation never recomputes propagation.
    HopTensor prefix(std::size_t hops) const
    {
        if (hops == 0 || hops > num_hops)
            throw ConfigError("cannot take " + std::to_string(hops) + " hop slices from a cache with " + std::to_string(num_hops));
        if (hops == num_hops) return *this;
        HopTensor out{num_nodes, hops, dim, std::vector<float>(num_nodes * hops * dim)};
        for (std::size_t n = 0; n < num_nodes; ++n)
            std::memcpy(&out.data[n * hops * dim], &data[n * num_hops * dim], hops * dim * sizeof(float));
        return out;
    }
};

/// Sparse-dense product g * x with per-row 64-bit accumulation in CSR column order.
/// Rows are distributed across workers; the result does not depend on the worker count.
inline FeatureMatrix spmm(const SparseGraph& g, const FeatureMatrix& x)
{
    if (g.num_nodes != x.rows)
        throw ConfigError("spmm: graph has " + std::to_string(g.num_nodes) + " nodes but features have " +
                          std::to_string(x.rows) + " rows");
    FeatureMatrix out(x.rows, x.cols);
    const std::size_t d = x.cols;
    parallel_blocks(g.num_nodes, [&](std::size_t lo, std::size_t hi) {
        std::vector<double> acc(d);
        for (std::size_t u = lo; u < hi; ++u) {
            std::fill(acc.begin(), acc.end(), 0.0);
            for (std::size_t e = g.row_offsets[u]; e < g.row_offsets[u + 1]; ++e) {
                const double w = g.values[e];
                const float* src = &x.data[static_cast<std::size_t>(g.col_indices[e]) * d];
                for (std::size_t k = 0; k < d; ++k) acc[k] += w * static_cast<double>(src[k]);
            }
            float* dst = &out.data[u * d];
            for (std::size_t k = 0; k < d; ++k) dst[k] = static_cast<float>(acc[k]);
        }
    });
    return out;
}

/// Bytes needed for an N x hops x d float32 tensor; throws when the product overflows.
inline std::uint64_t hop_tensor_bytes(std::uint64_t n, std::uint64_t hops, std::uint64_t d)
{
    std::uint64_t elems = 0, bytes = 0;
    if (__builtin_mul_overflow(n, hops, &elems) || __builtin_mul_overflow(elems, d, &elems) ||
        __builtin_mul_overflow(elems, std::uint64_t{sizeof(float)}, &bytes))
        throw DataError("hop tensor size overflows 64 bits (N=" + std::to_string(n) + ", hops=" + std::to_string(hops) +
                        ", d=" + std::to_string(d) + ")");
    return bytes;
}

/// Stack of [X, gX, g^2 X, ..., g^L X] via iterated spmm. `max_bytes` (0 = unlimited)
/// caps the planned allocation; the check happens before anything is allocated.
inline HopTensor precompute_hops(const SparseGraph& g, const FeatureMatrix& x, std::size_t num_steps,
                                 std::uint64_t max_bytes = 0)
{
    const std::uint64_t bytes = hop_tensor_bytes(x.rows, num_steps + 1, x.cols);
    if ((max_bytes && bytes > max_bytes) || bytes / sizeof(float) > std::vector<float>().max_size())
        throw DataError("hop tensor needs " + std::to_string(bytes) + " bytes, above the allowed " +
                        std::to_string(max_bytes ? max_bytes : std::vector<float>().max_size() * sizeof(float)));
    if (g.num_nodes != x.rows) throw ConfigError("precompute_hops: graph/feature row mismatch");

    HopTensor h{x.rows, num_steps + 1, x.cols, std::vector<float>(bytes / sizeof(float))};
    auto scatter = [&h](const FeatureMatrix& m, std::size_t hop) {
        for (std::size_t n = 0; n < m.rows; ++n)
            std::memcpy(&h.data[(n * h.num_hops + hop) * h.dim], &m.data[n * m.cols], m.cols * sizeof(float));
    };
    scatter(x, 0);
    FeatureMatrix cur = x;
    for (std::size_t l = 1; l <= num_steps; ++l) {
        cur = spmm(g, cur);
        scatter(cur, l);
    }
    return h;
}

inline constexpr std::size_t kHopHeaderBytes = 4 + 3 * 8;
inline constexpr std::size_t kChecksumBytes = 16;

inline void save_hops(const HopTensor& h, const std::filesystem::path& path)
{
    auto os = io::open_out(path);
    os.write("HGH1", 4);
    io::write_u64(os, h.num_nodes);
    io::write_u64(os, h.num_hops);
    io::write_u64(os, h.dim);
    const auto nbytes = h.data.size() * sizeof(float);
    os.write(reinterpret_cast<const char*>(h.data.data()), static_cast<std::streamsize>(nbytes));
    io::Fnv1a128 sum;
    sum.update(h.data.data(), nbytes);
    auto digest = sum.digest();
    os.write(reinterpret_cast<const char*>(digest.data()), kChecksumBytes);
    if (!os) throw DataError("write failed: " + path.string());
}

struct HopHeader {
    std::uint64_t num_nodes = 0, num_hops = 0, dim = 0;
    std::uint64_t payload_bytes = 0;
};

inline HopHeader read_hop_header(std::istream& is, const std::filesystem::path& path)
{
    io::expect_magic(is, "HGH1", path.string());
    HopHeader hdr;
    hdr.num_nodes = io::read_u64(is, "N");
    hdr.num_hops = io::read_u64(is, "hops");
    hdr.dim = io::read_u64(is, "d");
    if (hdr.num_hops == 0 || hdr.dim == 0) throw FormatError(path.string() + ": hops and d must be positive");
    hdr.payload_bytes = hop_tensor_bytes(hdr.num_nodes, hdr.num_hops, hdr.dim);
    const auto expected = kHopHeaderBytes + hdr.payload_bytes + kChecksumBytes;
    const auto actual = io::file_size(path);
    if (actual < expected)
        throw FormatError(path.string() + ": truncated, header claims " + std::to_string(expected) + " bytes but file has " +
                          std::to_string(actual));
    if (actual > expected)
        throw FormatError(path.string() + ": header/payload size disagreement (" + std::to_string(actual) + " bytes, expected " +
                          std::to_string(expected) + ")");
    return hdr;
}

inline HopTensor load_hops(const std::filesystem::path& path)
{
    auto is = io::open_in(path);
    auto hdr = read_hop_header(is, path);
    HopTensor h{hdr.num_nodes, hdr.num_hops, hdr.dim, std::vector<float>(hdr.payload_bytes / sizeof(float))};
    if (!is.read(reinterpret_cast<char*>(h.data.data()), static_cast<std::streamsize>(hdr.payload_bytes)))
        throw FormatError(path.string() + ": truncated payload");
    std::array<unsigned char, 16> stored{};
    if (!is.read(reinterpret_cast<char*>(stored.data()), kChecksumBytes)) throw FormatError(path.string() + ": missing checksum");
    io::Fnv1a128 sum;
    sum.update(h.data.data(), hdr.payload_bytes);
    if (sum.digest() != stored) throw FormatError(path.string() + ": checksum mismatch");
    for (float v : h.data)
        if (!std::isfinite(v)) throw FormatError(path.string() + ": non-finite value in payload");
    return h;
}

/// b x hops x d copy of the requested node rows, in the given order (duplicates allowed).
inline Tensor<float> gather_batch(const HopTensor& h, std::span<const std::uint32_t> ids)
{
    Tensor<float> out({ids.size(), h.num_hops, h.dim});
    const std::size_t row = h.row_size();
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] >= h.num_nodes)
            throw DataError("gather_batch: node id " + std::to_string(ids[i]) + " >= N=" + std::to_string(h.num_nodes));
        std::memcpy(&out.data[i * row], &h.data[static_cast<std::size_t>(ids[i]) * row], row * sizeof(float));
    }
    return out;
}

/// Reads node rows straight from an HGH1 file without loading the payload,
/// so training batches can be drawn from caches larger than memory.
class HopCacheReader {
public:
    explicit HopCacheReader(std::filesystem::path path) : path_(std::move(path)), is_(io::open_in(path_))
    {
        header_ = read_hop_header(is_, path_);
    }

    const HopHeader& header() const { return header_; }

    Tensor<float> gather(std::span<const std::uint32_t> ids)
    {
        const std::size_t row = header_.num_hops * header_.dim;
        Tensor<float> out({ids.size(), header_.num_hops, header_.dim});
        for (std::size_t i = 0; i < ids.size(); ++i) {
            if (ids[i] >= header_.num_nodes)
                throw DataError("gather: node id " + std::to_string(ids[i]) + " >= N=" + std::to_string(header_.num_nodes));
            is_.seekg(static_cast<std::streamoff>(kHopHeaderBytes + static_cast<std::uint64_t>(ids[i]) * row * sizeof(float)));
            if (!is_.read(reinterpret_cast<char*>(&out.data[i * row]), static_cast<std::streamsize>(row * sizeof(float))))
                throw FormatError(path_.string() + ": short read at node " + std::to_string(ids[i]));
        }
        return out;
    }

    /// Streams the payload in fixed-size chunks and checks the trailing checksum.
    bool verify(std::size_t chunk_bytes = std::size_t{1} << 20)
    {
        is_.clear();
        is_.seekg(static_cast<std::streamoff>(kHopHeaderBytes));
        std::vector<char> buf(chunk_bytes);
        io::Fnv1a128 sum;
        std::uint64_t left = header_.payload_bytes;
        while (left) {
            auto n = static_cast<std::size_t>(std::min<std::uint64_t>(left, chunk_bytes));
            if (!is_.read(buf.data(), static_cast<std::streamsize>(n))) return false;
            sum.update(buf.data(), n);
            left -= n;
        }
        std::array<unsigned char, 16> stored{};
        if (!is_.read(reinterpret_cast<char*>(stored.data()), kChecksumBytes)) return false;
        return sum.digest() == stored;
    }

private:
    std::filesystem::path path_;
    std::ifstream is_;
    HopHeader header_;
};

/// Writes an HGH1 file one node row at a time.
class HopCacheWriter {
public:
    HopCacheWriter(const std::filesystem::path& path, std::uint64_t num_nodes, std::uint64_t num_hops, std::uint64_t dim)
        : os_(io::open_out(path)), num_nodes_(num_nodes), row_(num_hops * dim)
    {
        hop_tensor_bytes(num_nodes, num_hops, dim);
        os_.write("HGH1", 4);
        io::write_u64(os_, num_nodes);
        io::write_u64(os_, num_hops);
        io::write_u64(os_, dim);
    }

    void append(std::span<const float> node_row)
    {
        if (node_row.size() != row_) throw ConfigError("HopCacheWriter: row has wrong length");
        if (written_ == num_nodes_) throw ConfigError("HopCacheWriter: too many rows");
        os_.write(reinterpret_cast<const char*>(node_row.data()), static_cast<std::streamsize>(row_ * sizeof(float)));
        sum_.update(node_row.data(), row_ * sizeof(float));
        ++written_;
    }

    void finish()
    {
        if (written_ != num_nodes_) throw ConfigError("HopCacheWriter: finished after " + std::to_string(written_) + " rows");
        auto digest = sum_.digest();
        os_.write(reinterpret_cast<const char*>(digest.data()), kChecksumBytes);
        os_.flush();
        if (!os_) throw DataError("HopCacheWriter: write failed");
    }

private:
    std::ofstream os_;
    std::uint64_t num_nodes_;
    std::uint64_t row_;
    std::uint64_t written_ = 0;
    io::Fnv1a128 sum_;
};

} // namespace hopflow

#endif
