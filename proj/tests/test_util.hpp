#pragma once

#include <filesystem>
#include <fstream>
#include <random>
#include <string>
#include <unistd.h>

#include "hopflow/hopflow.hpp"

namespace testutil {

namespace fs = std::filesystem;

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
public:
    explicit TempDir(const std::string& tag = "t")
    {
        static int counter = 0;
        path_ = fs::temp_directory_path() / ("hopflow_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
        fs::remove_all(path_);
        fs::create_directories(path_);
    }
    ~TempDir()
    {
        std::error_code ec;
        fs::remove_all(path_, ec);
    }
    const fs::path& path() const { return path_; }
    fs::path operator/(const std::string& name) const { return path_ / name; }

private:
    fs::path path_;
};

inline void write_file(const fs::path& p, const std::string& text)
{
    std::ofstream os(p, std::ios::binary);
    os << text;
}

inline std::string read_file(const fs::path& p)
{
    std::ifstream is(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

/// Random undirected graph on n nodes; each pair present with probability p.
inline hopflow::SparseGraph random_graph(std::size_t n, double p, std::mt19937_64& rng)
{
    std::vector<std::pair<std::uint32_t, std::uint32_t>> edges;
    std::uniform_real_distribution<double> u(0, 1);
    for (std::uint32_t i = 0; i < n; ++i)
        for (std::uint32_t j = i + 1; j < n; ++j)
            if (u(rng) < p) edges.emplace_back(i, j);
    return hopflow::SparseGraph::from_undirected_edges(n, edges);
}

inline hopflow::FeatureMatrix random_features(std::size_t n, std::size_t d, std::mt19937_64& rng)
{
    hopflow::FeatureMatrix x(n, d);
    std::uniform_real_distribution<float> u(-1, 1);
    for (auto& v : x.data) v = u(rng);
    return x;
}

template <class Real = double>
hopflow::Tensor<Real> random_tensor(hopflow::Shape shape, std::mt19937_64& rng, double scale = 1.0)
{
    hopflow::Tensor<Real> t(std::move(shape));
    std::uniform_real_distribution<double> u(-scale, scale);
    for (auto& v : t.data) v = static_cast<Real>(u(rng));
    return t;
}

/// Dense row-major (n x n) * (n x d) with plain loops.
inline std::vector<double> dense_matmul(const std::vector<double>& a, const std::vector<double>& b, std::size_t n, std::size_t d)
{
    std::vector<double> out(n * d, 0.0);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t k = 0; k < n; ++k)
            for (std::size_t j = 0; j < d; ++j) out[i * d + j] += a[i * n + k] * b[k * d + j];
    return out;
}

inline std::vector<double> to_double(const std::vector<float>& v) { return {v.begin(), v.end()}; }

inline double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b)
{
    double m = 0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

/// Single-sample nested-loop attention: x is T x d, weights d x d, heads split columns.
inline std::vector<double> attention_oracle(const std::vector<double>& x, const std::vector<double>& wq, const std::vector<double>& wk,
                                     const std::vector<double>& wv, std::size_t T, std::size_t d, std::size_t heads)
{
    auto proj = [&](const std::vector<double>& w) {
        std::vector<double> o(T * d, 0.0);
        for (std::size_t i = 0; i < T; ++i)
            for (std::size_t j = 0; j < d; ++j)
                for (std::size_t k = 0; k < d; ++k) o[i * d + j] += x[i * d + k] * w[k * d + j];
        return o;
    };
    auto q = proj(wq), k = proj(wk), v = proj(wv);
    const std::size_t dh = d / heads;
    std::vector<double> out(T * d, 0.0);
    for (std::size_t h = 0; h < heads; ++h)
        for (std::size_t i = 0; i < T; ++i) {
            std::vector<double> s(T);
            for (std::size_t j = 0; j < T; ++j) {
                double dot = 0;
                for (std::size_t c = 0; c < dh; ++c) dot += q[i * d + h * dh + c] * k[j * d + h * dh + c];
                s[j] = dot / std::sqrt(static_cast<double>(dh));
            }
            double z = 0;
            for (auto& e : s) z += (e = std::exp(e));
            for (std::size_t j = 0; j < T; ++j)
                for (std::size_t c = 0; c < dh; ++c) out[i * d + h * dh + c] += s[j] / z * v[j * d + h * dh + c];
        }
    return out;
}

/// Scalar double-loop Barlow objective on b x D views.
inline double barlow_oracle(const std::vector<double>& a, const std::vector<double>& b, std::size_t n, std::size_t D, double alpha,
                     double eps = 1e-5)
{
    auto standardize = [&](const std::vector<double>& x) {
        std::vector<double> z(n * D);
        for (std::size_t j = 0; j < D; ++j) {
            double m = 0, v = 0;
            for (std::size_t i = 0; i < n; ++i) m += x[i * D + j];
            m /= static_cast<double>(n);
            for (std::size_t i = 0; i < n; ++i) v += (x[i * D + j] - m) * (x[i * D + j] - m);
            v /= static_cast<double>(n);
            for (std::size_t i = 0; i < n; ++i) z[i * D + j] = (x[i * D + j] - m) / std::sqrt(v + eps);
        }
        return z;
    };
    auto za = standardize(a), zb = standardize(b);
    double loss = 0;
    for (std::size_t i = 0; i < D; ++i)
        for (std::size_t j = 0; j < D; ++j) {
            double c = 0;
            for (std::size_t k = 0; k < n; ++k) c += za[k * D + i] * zb[k * D + j];
            c /= static_cast<double>(n);
            loss += i == j ? (1 - c) * (1 - c) : alpha * c * c;
        }
    return loss;
}

} // namespace testutil
