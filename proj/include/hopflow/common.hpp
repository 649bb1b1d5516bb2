#ifndef HOPFLOW_COMMON_HPP
#define HOPFLOW_COMMON_HPP

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <cstdlib>
#include <functional>
#include <iostream>
#include <numeric>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

namespace hopflow {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Bad input data: missing files, malformed lines, out-of-range ids.
class DataError : public Error {
public:
    using Error::Error;
};

/// Binary file whose layout does not match the expected format.
class FormatError : public DataError {
public:
    using DataError::DataError;
};

/// Invalid configuration or shape contract (caller error).
class ConfigError : public Error {
public:
    using Error::Error;
};

/// NaN / inf detected during training or in gradients.
class NumericError : public Error {
public:
    using Error::Error;
};

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape)
{
    std::size_t n = 1;
    for (auto s : shape) n *= s;
    return n;
}

inline std::string shape_str(const Shape& shape)
{
    std::string out = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(shape[i]);
    }
    return out + "]";
}

/// Dense row-major array with an explicit shape.
template <class Real>
struct Tensor {
    Shape shape;
    std::vector<Real> data;

    Tensor() = default;
    explicit Tensor(Shape s, Real fill = Real(0)) : shape(std::move(s)), data(shape_numel(shape), fill) {}
    Tensor(Shape s, std::vector<Real> d) : shape(std::move(s)), data(std::move(d))
    {
        if (data.size() != shape_numel(shape))
            throw ConfigError("tensor data size " + std::to_string(data.size()) + " does not match shape " + shape_str(shape));
    }

    std::size_t numel() const { return data.size(); }
    std::size_t dim(std::size_t i) const { return shape.at(i); }
    Real& operator[](std::size_t i) { return data[i]; }
    const Real& operator[](std::size_t i) const { return data[i]; }

    template <class Other>
    Tensor<Other> cast() const
    {
        Tensor<Other> out;
        out.shape = shape;
        out.data.assign(data.begin(), data.end());
        return out;
    }
};

/// Sentinel label for unlabeled nodes.
inline constexpr std::int32_t kUnlabeled = -1;

/// Worker cap from HOPFLOW_THREADS, else hardware concurrency (at least 1).
inline unsigned worker_count()
{
    unsigned hw = std::max(1u, std::thread::hardware_concurrency());
    if (const char* env = std::getenv("HOPFLOW_THREADS")) {
        try {
            long v = std::stol(env);
            if (v >= 1) return static_cast<unsigned>(std::min<long>(v, 1024));
        } catch (const std::exception&) {
        }
    }
    return hw;
}

/// Runs fn(begin, end) over [0, n) split into contiguous blocks, one block per worker.
/// Each index is visited by exactly one worker, so per-index outputs are deterministic.
inline void parallel_blocks(std::size_t n, const std::function<void(std::size_t, std::size_t)>& fn,
                            std::size_t min_block = 256)
{
    unsigned workers = worker_count();
    std::size_t blocks = std::min<std::size_t>(workers, (n + min_block - 1) / std::max<std::size_t>(min_block, 1));
    if (blocks <= 1) {
        if (n) fn(0, n);
        return;
    }
    std::vector<std::thread> pool;
    pool.reserve(blocks);
    std::size_t step = (n + blocks - 1) / blocks;
    for (std::size_t b = 0; b < blocks; ++b) {
        std::size_t lo = b * step;
        std::size_t hi = std::min(n, lo + step);
        if (lo >= hi) break;
        pool.emplace_back([&fn, lo, hi] { fn(lo, hi); });
    }
    for (auto& t : pool) t.join();
}

enum class RngPurpose : std::uint64_t { split = 1, shuffle = 2, dropout = 3, init = 4, data = 5 };

/// Independent generator for one purpose, derived from the master seed.
inline std::mt19937_64 make_rng(std::uint64_t master_seed, RngPurpose purpose, std::uint64_t stream = 0)
{
    std::seed_seq seq{static_cast<std::uint32_t>(master_seed), static_cast<std::uint32_t>(master_seed >> 32),
                      static_cast<std::uint32_t>(purpose), static_cast<std::uint32_t>(stream),
                      static_cast<std::uint32_t>(stream >> 32)};
    return std::mt19937_64(seq);
}

/// Uniform real in [0, 1) built directly from engine bits (distribution objects are
/// implementation-defined, engines are not).
inline double uniform01(std::mt19937_64& rng)
{
    return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

/// Fisher-Yates with uniform01-derived indices, reproducible across standard libraries.
template <class T>
void shuffle_in_place(std::vector<T>& v, std::mt19937_64& rng)
{
    for (std::size_t i = v.size(); i > 1; --i) {
        auto j = static_cast<std::size_t>(uniform01(rng) * static_cast<double>(i));
        if (j >= i) j = i - 1;
        std::swap(v[i - 1], v[j]);
    }
}

inline void warn(std::string_view msg)
{
    std::cerr << "hopflow: warning: " << msg << '\n';
}

} // namespace hopflow

#endif
