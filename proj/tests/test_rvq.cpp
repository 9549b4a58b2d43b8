#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>

#include "resynlab/rng.hpp"
#include "resynlab/rvq.hpp"

using namespace resynlab;

namespace {

EmbeddingSequence seq_from(const std::vector<std::vector<double>>& rows) {
    EmbeddingSequence e;
    e.values = Mat(rows.size(), rows[0].size());
    for (std::size_t r = 0; r < rows.size(); ++r)
        std::copy(rows[r].begin(), rows[r].end(), e.values.row(r));
    return e;
}

EmbeddingSequence random_seq(std::size_t n, std::size_t d, Rng& rng, double scale = 1.0) {
    EmbeddingSequence e;
    e.values = Mat(n, d);
    for (double& v : e.values.data) v = scale * rng.normal();
    return e;
}

// independent per-layer nearest-code scan used as the oracle
int nearest_code(const Mat& codes, const double* point, std::size_t d) {
    int best = 0;
    double bd = std::numeric_limits<double>::infinity();
    for (std::size_t v = 0; v < codes.rows; ++v) {
        double acc = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            const double t = point[j] - codes(v, j);
            acc += t * t;
        }
        if (acc < bd) {
            bd = acc;
            best = static_cast<int>(v);
        }
    }
    return best;
}

} // namespace

TEST_CASE("two repeated points are clustered exactly", "[rvq]") {
    const auto e = seq_from({{1.0, 2.0}, {1.0, 2.0}, {-3.0, 0.5}, {-3.0, 0.5}});
    const RvqModel m = train_rvq({e}, 1, 2, 25, 9);
    const QuantizeResult q = quantize(m, e);
    REQUIRE(q.mean_residual_norm[0] == Catch::Approx(0.0).margin(1e-12));
    // the codebook holds exactly the two points, in some order
    std::vector<std::vector<double>> got = {{m.codebooks[0].codes(0, 0), m.codebooks[0].codes(0, 1)},
                                            {m.codebooks[0].codes(1, 0), m.codebooks[0].codes(1, 1)}};
    std::sort(got.begin(), got.end());
    REQUIRE(got[0][0] == Catch::Approx(-3.0));
    REQUIRE(got[1][0] == Catch::Approx(1.0));
}

TEST_CASE("hand-computed 1-D Lloyd result", "[rvq]") {
    const auto e = seq_from({{-1.0}, {-1.0}, {1.0}, {1.0}});
    const RvqModel m1 = train_rvq({e}, 1, 2, 25, 1);
    std::vector<double> cb = {m1.codebooks[0].codes(0, 0), m1.codebooks[0].codes(1, 0)};
    std::sort(cb.begin(), cb.end());
    REQUIRE(cb[0] == Catch::Approx(-1.0));
    REQUIRE(cb[1] == Catch::Approx(1.0));

    // with a second layer all residuals are zero, so every row of the
    // second codebook collapses to zero under the re-seeding policy
    const RvqModel m2 = train_rvq({e}, 2, 2, 25, 1);
    for (double v : m2.codebooks[1].codes.data) REQUIRE(v == Catch::Approx(0.0).margin(1e-12));
}

TEST_CASE("training is deterministic and order invariant", "[rvq]") {
    Rng rng(21);
    const auto a = random_seq(40, 3, rng);
    const auto b = random_seq(30, 3, rng);
    const auto c = random_seq(50, 3, rng);
    const RvqModel m1 = train_rvq({a, b, c}, 2, 8, 25, 77);
    const RvqModel m2 = train_rvq({a, b, c}, 2, 8, 25, 77);
    REQUIRE(m1.codebooks[0].codes.data == m2.codebooks[0].codes.data);
    REQUIRE(m1.codebooks[1].codes.data == m2.codebooks[1].codes.data);

    const RvqModel m3 = train_rvq({c, a, b}, 2, 8, 25, 77);
    REQUIRE(m1.codebooks[0].codes.data == m3.codebooks[0].codes.data);
    REQUIRE(m1.codebooks[1].codes.data == m3.codebooks[1].codes.data);

    const RvqModel m4 = train_rvq({a, b, c}, 2, 8, 25, 78);
    REQUIRE(m1.codebooks[0].codes.data != m4.codebooks[0].codes.data);
}

TEST_CASE("quantize matches the exhaustive per-layer oracle", "[rvq]") {
    Rng rng(33);
    for (int trial = 0; trial < 20; ++trial) {
        const std::size_t d = 2 + rng.below(7);
        const int V = 4 + static_cast<int>(rng.below(13));
        const int N = 2 + static_cast<int>(rng.below(3));
        const auto train = random_seq(80, d, rng);
        const RvqModel m = train_rvq({train}, N, V, 10, 1000 + static_cast<std::uint64_t>(trial));
        const auto probe = random_seq(12, d, rng);
        const QuantizeResult q = quantize(m, probe);
        for (std::size_t l = 0; l < probe.values.rows; ++l) {
            std::vector<double> res(probe.values.row(l), probe.values.row(l) + d);
            for (int i = 0; i < N; ++i) {
                const int expect = nearest_code(m.codebooks[static_cast<std::size_t>(i)].codes,
                                                res.data(), d);
                REQUIRE(q.codes.at(l, static_cast<std::size_t>(i)) == expect);
                for (std::size_t j = 0; j < d; ++j)
                    res[j] -= m.codebooks[static_cast<std::size_t>(i)].codes(
                        static_cast<std::size_t>(expect), j);
            }
        }
    }
}

TEST_CASE("equidistant ties pick the lowest index", "[rvq]") {
    RvqModel m;
    Codebook cb;
    cb.layer_index = 1;
    cb.codes = Mat(4, 1);
    cb.codes(0, 0) = 5.0;  // far
    cb.codes(1, 0) = 1.0;  // tie candidate
    cb.codes(2, 0) = 9.0;  // far
    cb.codes(3, 0) = -1.0; // tie candidate, same distance to 0
    m.codebooks.push_back(cb);
    EmbeddingSequence e;
    e.values = Mat(1, 1);
    e.values(0, 0) = 0.0;
    const QuantizeResult q = quantize(m, e);
    REQUIRE(q.codes.at(0, 0) == 1);
}

TEST_CASE("zero residual selects the zero row in the next layer", "[rvq]") {
    RvqModel m;
    Codebook l1;
    l1.layer_index = 1;
    l1.codes = Mat(3, 2);
    l1.codes(0, 0) = 1.0;
    l1.codes(1, 0) = -2.0;
    l1.codes(1, 1) = 4.0;
    l1.codes(2, 1) = 7.0;
    Codebook l2;
    l2.layer_index = 2;
    l2.codes = Mat(3, 2);
    l2.codes(0, 0) = 3.0; // nonzero
    // row 1 is the zero row
    l2.codes(2, 1) = -1.0;
    m.codebooks = {l1, l2};

    EmbeddingSequence e;
    e.values = Mat(1, 2);
    e.values(0, 0) = -2.0;
    e.values(0, 1) = 4.0; // exactly layer-1 row 1
    const QuantizeResult q = quantize(m, e);
    REQUIRE(q.codes.at(0, 0) == 1);
    REQUIRE(q.codes.at(0, 1) == 1);
}

TEST_CASE("permuting codebook rows permutes returned indices", "[rvq]") {
    Rng rng(55);
    const auto train = random_seq(60, 3, rng);
    RvqModel m = train_rvq({train}, 2, 8, 15, 5);
    const auto probe = random_seq(10, 3, rng);
    const QuantizeResult q1 = quantize(m, probe);

    // reverse the rows of each codebook
    RvqModel rev = m;
    for (auto& cb : rev.codebooks) {
        Mat flipped(cb.codes.rows, cb.codes.cols);
        for (std::size_t v = 0; v < cb.codes.rows; ++v)
            std::copy_n(cb.codes.row(v), cb.codes.cols, flipped.row(cb.codes.rows - 1 - v));
        cb.codes = std::move(flipped);
    }
    const QuantizeResult q2 = quantize(rev, probe);
    for (std::size_t l = 0; l < probe.values.rows; ++l)
        for (std::size_t i = 0; i < 2; ++i)
            REQUIRE(q2.codes.at(l, i) == 7 - q1.codes.at(l, i));
}

TEST_CASE("dequantize layers add up and diagnostics match an oracle", "[rvq]") {
    Rng rng(66);
    const auto train = random_seq(100, 4, rng);
    const RvqModel m = train_rvq({train}, 3, 8, 15, 6);
    const auto probe = random_seq(20, 4, rng);
    const QuantizeResult q = quantize(m, probe);
    FrameConfig cfg; // geometry irrelevant here

    const EmbeddingSequence d1 = dequantize(m, q.codes, 1, cfg);
    for (std::size_t l = 0; l < 20; ++l)
        for (std::size_t j = 0; j < 4; ++j)
            REQUIRE(d1.values(l, j) ==
                    m.codebooks[0].codes(static_cast<std::size_t>(q.codes.at(l, 0)), j));

    for (int i = 1; i < 3; ++i) {
        const EmbeddingSequence lo = dequantize(m, q.codes, i, cfg);
        const EmbeddingSequence hi = dequantize(m, q.codes, i + 1, cfg);
        for (std::size_t l = 0; l < 20; ++l)
            for (std::size_t j = 0; j < 4; ++j)
                REQUIRE(hi.values(l, j) - lo.values(l, j) ==
                        Catch::Approx(m.codebooks[static_cast<std::size_t>(i)].codes(
                            static_cast<std::size_t>(q.codes.at(l, static_cast<std::size_t>(i))), j))
                            .margin(1e-12));
    }

    // mean residual norms recomputed by direct summation
    for (int i = 1; i <= 3; ++i) {
        const EmbeddingSequence up = dequantize(m, q.codes, i, cfg);
        double mean_norm = 0.0;
        for (std::size_t l = 0; l < 20; ++l) {
            double acc = 0.0;
            for (std::size_t j = 0; j < 4; ++j) {
                const double t = probe.values(l, j) - up.values(l, j);
                acc += t * t;
            }
            mean_norm += std::sqrt(acc);
        }
        mean_norm /= 20.0;
        REQUIRE(q.mean_residual_norm[static_cast<std::size_t>(i - 1)] ==
                Catch::Approx(mean_norm).margin(1e-9));
    }
}

TEST_CASE("bitrate accounting", "[rvq]") {
    const auto make = [](int N, int V) {
        RvqModel m;
        for (int i = 0; i < N; ++i) {
            Codebook cb;
            cb.layer_index = i + 1;
            cb.codes = Mat(static_cast<std::size_t>(V), 2);
            m.codebooks.push_back(cb);
        }
        return m;
    };
    REQUIRE(bitrate(make(8, 1024), 75.0) == 6000.0);
    REQUIRE(bitrate(make(1, 2), 1.0) == 1.0);
    REQUIRE(bitrate(make(8, 256), 125.0) == 8000.0);
    REQUIRE(bitrate(make(1, 3), 1.0) == 2.0); // ceil(log2 3)
}

TEST_CASE("rvq rejects bad inputs", "[rvq]") {
    Rng rng(8);
    const auto small = random_seq(3, 2, rng);
    REQUIRE_THROWS_AS(train_rvq({small}, 1, 8, 10, 1), std::invalid_argument);

    auto bad = random_seq(10, 2, rng);
    bad.values(0, 0) = std::numeric_limits<double>::quiet_NaN();
    REQUIRE_THROWS_AS(train_rvq({bad}, 1, 4, 10, 1), std::invalid_argument);

    const auto train = random_seq(20, 2, rng);
    const RvqModel m = train_rvq({train}, 2, 4, 10, 1);
    const auto wrong_dim = random_seq(5, 3, rng);
    REQUIRE_THROWS_AS(quantize(m, wrong_dim), std::invalid_argument);

    const auto probe = random_seq(5, 2, rng);
    const QuantizeResult q = quantize(m, probe);
    FrameConfig cfg;
    REQUIRE_THROWS_AS(dequantize(m, q.codes, 0, cfg), std::out_of_range);
    REQUIRE_THROWS_AS(dequantize(m, q.codes, 3, cfg), std::out_of_range);

    CodeSequence corrupt = q.codes;
    corrupt.at(0, 0) = 99;
    REQUIRE_THROWS_AS(dequantize(m, corrupt, 2, cfg), std::out_of_range);
}

TEST_CASE("rvq model and code files round trip", "[rvq]") {
    Rng rng(12);
    const auto train = random_seq(50, 3, rng);
    RvqModel m = train_rvq({train}, 2, 8, 10, 4);
    m.config_hash = 0xdeadbeef12345678ULL;
    const auto dir = std::filesystem::temp_directory_path() / "resynlab_tests";
    std::filesystem::create_directories(dir);
    const auto mpath = dir / "rvq.bin";
    save_rvq(m, mpath.string());
    const RvqModel r = load_rvq(mpath.string());
    REQUIRE(r.config_hash == m.config_hash);
    REQUIRE(r.num_layers() == 2);
    REQUIRE(r.codebook_size() == 8);
    for (int i = 0; i < 2; ++i)
        for (std::size_t k = 0; k < m.codebooks[static_cast<std::size_t>(i)].codes.size(); ++k)
            REQUIRE(r.codebooks[static_cast<std::size_t>(i)].codes.data[k] ==
                    Catch::Approx(m.codebooks[static_cast<std::size_t>(i)].codes.data[k]).margin(1e-6));

    const auto probe = random_seq(6, 3, rng);
    const QuantizeResult q = quantize(m, probe);
    const auto cpath = dir / "codes.bin";
    save_codes(q.codes, 42, cpath.string());
    std::uint64_t h = 0;
    const CodeSequence c = load_codes(cpath.string(), &h);
    REQUIRE(h == 42);
    REQUIRE(c.indices == q.codes.indices);
    REQUIRE(c.num_frames == q.codes.num_frames);
    REQUIRE(c.num_layers == q.codes.num_layers);
}
