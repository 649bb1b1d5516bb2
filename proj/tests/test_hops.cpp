#include <gtest/gtest.h>

#include "test_util.hpp"

HOPFLOW_DEFINE_COUNTING_ALLOCATOR()

using namespace hopflow;
using testutil::TempDir;

namespace {

FeatureMatrix identity(std::size_t n)
{
    FeatureMatrix x(n, n);
    for (std::size_t i = 0; i < n; ++i) x.at(i, i) = 1.0f;
    return x;
}

/// Dense oracle for g^l x.
std::vector<double> dense_power(const SparseGraph& g, const FeatureMatrix& x, std::size_t l)
{
    auto a = g.to_dense();
    auto cur = testutil::to_double(x.data);
    for (std::size_t i = 0; i < l; ++i) cur = testutil::dense_matmul(a, cur, g.num_nodes, x.cols);
    return cur;
}

std::vector<double> hop_slice(const HopTensor& h, std::size_t hop) { return testutil::to_double(h.slice(hop).data); }

} // namespace

TEST(Spmm, IdentityAndZero)
{
    std::mt19937_64 rng(1);
    auto x = testutil::random_features(6, 3, rng);
    auto eye = normalize(SparseGraph::from_undirected_edges(6, {}), NormMode::sym, true);
    EXPECT_EQ(spmm(eye, x).data, x.data);
    auto zero = SparseGraph::from_undirected_edges(6, {});
    for (float v : spmm(zero, x).data) EXPECT_EQ(v, 0.0f);
}

TEST(Spmm, MatchesDenseOracle)
{
    std::mt19937_64 rng(2);
    auto g = normalize(testutil::random_graph(5, 0.5, rng), NormMode::sym, true);
    auto x = testutil::random_features(5, 3, rng);
    EXPECT_LT(testutil::max_abs_diff(testutil::to_double(spmm(g, x).data), dense_power(g, x, 1)), 1e-6);
}

TEST(Spmm, DimensionMismatch)
{
    auto g = SparseGraph::from_undirected_edges(3, {{0, 1}});
    EXPECT_THROW(spmm(g, FeatureMatrix(4, 2)), ConfigError);
}

TEST(Spmm, IndependentOfWorkerCount)
{
    std::mt19937_64 rng(9);
    auto g = normalize(testutil::random_graph(700, 0.02, rng), NormMode::sym, true);
    auto x = testutil::random_features(700, 8, rng);
    setenv("HOPFLOW_THREADS", "1", 1);
    auto one = spmm(g, x);
    setenv("HOPFLOW_THREADS", "4", 1);
    auto four = spmm(g, x);
    unsetenv("HOPFLOW_THREADS");
    EXPECT_EQ(one.data, four.data);
}

TEST(Precompute, ZeroHopsIsFeatures)
{
    std::mt19937_64 rng(3);
    auto x = testutil::random_features(4, 2, rng);
    auto h = precompute_hops(normalize(testutil::random_graph(4, 0.5, rng), NormMode::sym, true), x, 0);
    EXPECT_EQ(h.num_hops, 1u);
    EXPECT_EQ(h.data, x.data);
}

TEST(Precompute, TwoNodeHandProduct)
{
    auto g = normalize(SparseGraph::from_undirected_edges(2, {{0, 1}}), NormMode::sym, true);
    auto h = precompute_hops(g, identity(2), 1);
    for (std::size_t i = 0; i < 2; ++i)
        for (std::size_t j = 0; j < 2; ++j) {
            EXPECT_FLOAT_EQ(h.at(i, 0, j), i == j ? 1.0f : 0.0f);
            EXPECT_FLOAT_EQ(h.at(i, 1, j), 0.5f);
        }
}

TEST(Precompute, SlicesMatchDensePowersAndIteratedSpmm)
{
    std::mt19937_64 rng(4);
    for (int trial = 0; trial < 10; ++trial) {
        auto g = normalize(testutil::random_graph(7, 0.4, rng), trial % 2 ? NormMode::row : NormMode::sym, true);
        auto x = testutil::random_features(7, 3, rng);
        auto h = precompute_hops(g, x, 3);
        FeatureMatrix cur = x;
        for (std::size_t l = 0; l <= 3; ++l) {
            EXPECT_LT(testutil::max_abs_diff(hop_slice(h, l), dense_power(g, x, l)), 1e-5);
            EXPECT_EQ(h.slice(l).data, cur.data);
            cur = spmm(g, cur);
        }
    }
}

TEST(Precompute, PlannedSizeCheckedBeforeAllocation)
{
    auto g = SparseGraph::from_undirected_edges(2, {});
    try {
        precompute_hops(g, FeatureMatrix(2, 4), 10, 64);
        FAIL();
    } catch (const DataError& e) {
        EXPECT_NE(std::string(e.what()).find("352"), std::string::npos) << e.what();
    }
    EXPECT_THROW(hop_tensor_bytes(std::uint64_t{1} << 40, std::uint64_t{1} << 20, 1 << 10), DataError);
}

TEST(Precompute, RowModePreservesConstantFeatures)
{
    std::mt19937_64 rng(6);
    auto g = normalize(testutil::random_graph(8, 0.5, rng), NormMode::row, true);
    FeatureMatrix ones(8, 1);
    std::fill(ones.data.begin(), ones.data.end(), 1.0f);
    auto h = precompute_hops(g, ones, 4);
    for (std::size_t n = 0; n < 8; ++n)
        for (std::size_t l = 0; l <= 4; ++l) EXPECT_NEAR(h.at(n, l, 0), 1.0f, 1e-6);
}

TEST(HopCache, RoundTripBitIdentical)
{
    std::mt19937_64 rng(7);
    auto h = precompute_hops(normalize(testutil::random_graph(9, 0.4, rng), NormMode::sym, true), testutil::random_features(9, 3, rng), 2);
    TempDir dir;
    save_hops(h, dir / "a.hgh");
    auto back = load_hops(dir / "a.hgh");
    EXPECT_EQ(back.num_nodes, 9u);
    EXPECT_EQ(back.num_hops, 3u);
    EXPECT_EQ(back.dim, 3u);
    EXPECT_EQ(std::memcmp(back.data.data(), h.data.data(), h.data.size() * sizeof(float)), 0);
    save_hops(back, dir / "b.hgh");
    EXPECT_EQ(testutil::read_file(dir / "a.hgh"), testutil::read_file(dir / "b.hgh"));
    EXPECT_EQ(std::filesystem::file_size(dir / "a.hgh"), kHopHeaderBytes + 9 * 3 * 3 * 4 + kChecksumBytes);
}

TEST(HopCache, FormatErrors)
{
    std::mt19937_64 rng(8);
    auto h = precompute_hops(normalize(testutil::random_graph(5, 0.5, rng), NormMode::sym, true), testutil::random_features(5, 2, rng), 1);
    TempDir dir;
    save_hops(h, dir / "ok.hgh");
    auto bytes = testutil::read_file(dir / "ok.hgh");

    auto bad_magic = bytes;
    bad_magic[3] = '2';
    testutil::write_file(dir / "magic.hgh", bad_magic);
    EXPECT_THROW(load_hops(dir / "magic.hgh"), FormatError);

    testutil::write_file(dir / "short.hgh", bytes.substr(0, bytes.size() - 20));
    try {
        load_hops(dir / "short.hgh");
        FAIL();
    } catch (const FormatError& e) {
        EXPECT_NE(std::string(e.what()).find("truncated"), std::string::npos);
    }

    testutil::write_file(dir / "long.hgh", bytes + "xxxx");
    try {
        load_hops(dir / "long.hgh");
        FAIL();
    } catch (const FormatError& e) {
        EXPECT_NE(std::string(e.what()).find("disagreement"), std::string::npos);
    }

    auto flipped = bytes;
    flipped[kHopHeaderBytes + 5] ^= 0x01;
    testutil::write_file(dir / "flip.hgh", flipped);
    EXPECT_THROW(load_hops(dir / "flip.hgh"), FormatError);
}

TEST(Gather, OrderAndDuplicates)
{
    std::mt19937_64 rng(10);
    auto h = precompute_hops(normalize(testutil::random_graph(4, 0.6, rng), NormMode::sym, true), testutil::random_features(4, 2, rng), 2);
    std::vector<std::uint32_t> one{0};
    auto b0 = gather_batch(h, one);
    EXPECT_EQ(b0.shape, (Shape{1, 3, 2}));
    EXPECT_TRUE(std::equal(b0.data.begin(), b0.data.end(), h.node_row(0).begin()));

    std::vector<std::uint32_t> dup{2, 2};
    auto b1 = gather_batch(h, dup);
    EXPECT_TRUE(std::equal(b1.data.begin(), b1.data.begin() + 6, b1.data.begin() + 6));

    std::vector<std::uint32_t> rev{3, 2, 1, 0};
    auto b2 = gather_batch(h, rev);
    for (std::size_t i = 0; i < 4; ++i)
        EXPECT_TRUE(std::equal(b2.data.begin() + static_cast<std::ptrdiff_t>(i * 6), b2.data.begin() + static_cast<std::ptrdiff_t>(i * 6 + 6),
                               h.node_row(3 - i).begin()));

    std::vector<std::uint32_t> bad{4};
    EXPECT_THROW(gather_batch(h, bad), DataError);
}

TEST(Gather, PrefixTruncationMatchesSmallerPrecompute)
{
    std::mt19937_64 rng(12);
    auto g = normalize(testutil::random_graph(6, 0.5, rng), NormMode::sym, true);
    auto x = testutil::random_features(6, 3, rng);
    EXPECT_EQ(precompute_hops(g, x, 5).prefix(3).data, precompute_hops(g, x, 2).data);
}

TEST(HopCache, StreamingGatherOnMillionNodeCache)
{
    const std::uint64_t n = 1'000'000, hops = 3, dim = 4;
    TempDir dir("stream");
    const auto path = dir / "big.hgh";
    const auto row = hops * dim;
    auto value = [](std::uint64_t node, std::uint64_t k) { return static_cast<float>((node * 31 + k * 7) % 1009) * 0.5f; };
    {
        HopCacheWriter w(path, n, hops, dim);
        std::vector<float> r(row);
        for (std::uint64_t node = 0; node < n; ++node) {
            for (std::uint64_t k = 0; k < row; ++k) r[k] = value(node, k);
            w.append(r);
        }
        w.finish();
    }
    const auto file_bytes = std::filesystem::file_size(path);
    ASSERT_EQ(file_bytes, kHopHeaderBytes + n * row * 4 + kChecksumBytes);

    ASSERT_TRUE(memory::installed());
    memory::reset_peak();
    const auto base = memory::current_bytes();
    HopCacheReader reader(path);
    EXPECT_TRUE(reader.verify());
    std::mt19937_64 rng(13);
    for (int b = 0; b < 50; ++b) {
        std::vector<std::uint32_t> ids(3000);
        for (auto& id : ids) id = static_cast<std::uint32_t>(rng() % n);
        auto batch = reader.gather(ids);
        ASSERT_EQ(batch.shape, (Shape{3000, hops, dim}));
        for (std::size_t i = 0; i < ids.size(); i += 997)
            for (std::uint64_t k = 0; k < row; ++k) ASSERT_EQ(batch.data[i * row + k], value(ids[i], k));
    }
    const auto peak = memory::peak_bytes() - base;
    EXPECT_LT(static_cast<std::uint64_t>(peak), file_bytes / 16) << "peak heap " << peak << " vs cache " << file_bytes;
}
