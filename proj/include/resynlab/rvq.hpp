#pragma once

#include <algorithm>
#include <bit>
#include <cstdint>
#include <fstream>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "resynlab/mat.hpp"
#include "resynlab/rng.hpp"
#include "resynlab/serialize.hpp"
#include "resynlab/transform.hpp"

namespace resynlab {

struct Codebook {
    Mat codes;       // [V, d]
    int layer_index; // 1-based
};

struct RvqModel {
    std::vector<Codebook> codebooks;
    std::uint64_t config_hash = 0;

    int num_layers() const { return static_cast<int>(codebooks.size()); }
    int codebook_size() const { return static_cast<int>(codebooks.front().codes.rows); }
    int dim() const { return static_cast<int>(codebooks.front().codes.cols); }
};

// L x N matrix of codebook indices.
struct CodeSequence {
    std::size_t num_frames = 0;
    std::size_t num_layers = 0;
    std::vector<int> indices; // row-major [L, N]

    int& at(std::size_t frame, std::size_t layer) { return indices[frame * num_layers + layer]; }
    int at(std::size_t frame, std::size_t layer) const { return indices[frame * num_layers + layer]; }
};

struct QuantizeResult {
    CodeSequence codes;
    // mean over frames of ||z - dequantize(upto = i+1)||, one entry per layer
    std::vector<double> mean_residual_norm;
};

namespace detail {

inline double dist2(const double* a, const double* b, std::size_t d) {
    double acc = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
        const double t = a[i] - b[i];
        acc += t * t;
    }
    return acc;
}

// One k-means run over `points` [n, d]: k-means++ init, fixed Lloyd
// iteration count, empty clusters re-seeded at the farthest point of the
// largest cluster. Deterministic given rng seed; ties break to the lowest
// index throughout.
inline Mat kmeans(const Mat& points, int k, int iters, Rng& rng) {
    const std::size_t n = points.rows, d = points.cols;
    const auto kk = static_cast<std::size_t>(k);
    Mat centers(kk, d);

    // k-means++ seeding
    std::vector<double> best_d2(n, std::numeric_limits<double>::infinity());
    {
        const std::size_t first = static_cast<std::size_t>(rng.below(n));
        std::copy_n(points.row(first), d, centers.row(0));
    }
    for (std::size_t c = 1; c < kk; ++c) {
        const double* prev = centers.row(c - 1);
        double total = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            best_d2[i] = std::min(best_d2[i], dist2(points.row(i), prev, d));
            total += best_d2[i];
        }
        std::size_t pick = 0;
        if (total > 0.0) {
            const double u = rng.u01() * total;
            double acc = 0.0;
            pick = n - 1;
            for (std::size_t i = 0; i < n; ++i) {
                acc += best_d2[i];
                if (u < acc) { pick = i; break; }
            }
        } else {
            pick = static_cast<std::size_t>(rng.below(n));
        }
        std::copy_n(points.row(pick), d, centers.row(c));
    }

    std::vector<std::size_t> assign(n, 0);
    std::vector<std::size_t> count(kk, 0);
    const auto assign_all = [&] {
        std::fill(count.begin(), count.end(), 0);
        for (std::size_t i = 0; i < n; ++i) {
            const double* p = points.row(i);
            std::size_t best = 0;
            double bd = dist2(p, centers.row(0), d);
            for (std::size_t c = 1; c < kk; ++c) {
                const double dd = dist2(p, centers.row(c), d);
                if (dd < bd) { bd = dd; best = c; }
            }
            assign[i] = best;
            ++count[best];
        }
    };

    for (int it = 0; it < iters; ++it) {
        assign_all();
        Mat sums(kk, d);
        for (std::size_t i = 0; i < n; ++i) {
            const double* p = points.row(i);
            double* s = sums.row(assign[i]);
            for (std::size_t j = 0; j < d; ++j) s[j] += p[j];
        }
        for (std::size_t c = 0; c < kk; ++c)
            if (count[c] > 0) {
                const double inv = 1.0 / static_cast<double>(count[c]);
                for (std::size_t j = 0; j < d; ++j) centers(c, j) = sums(c, j) * inv;
            }
        // re-seed empty clusters, lowest cluster index first
        for (std::size_t c = 0; c < kk; ++c) {
            if (count[c] > 0) continue;
            std::size_t big = static_cast<std::size_t>(
                std::max_element(count.begin(), count.end()) - count.begin());
            if (count[big] == 0) continue; // all points already claimed
            std::size_t far_i = n;
            double far_d = -1.0;
            for (std::size_t i = 0; i < n; ++i) {
                if (assign[i] != big) continue;
                const double dd = dist2(points.row(i), centers.row(big), d);
                if (dd > far_d) { far_d = dd; far_i = i; }
            }
            std::copy_n(points.row(far_i), d, centers.row(c));
            assign[far_i] = c;
            --count[big];
            ++count[c];
        }
    }
    return centers;
}

} // namespace detail

// Trains N codebooks layerwise on the pooled frame set. The pool is put
// into a canonical (lexicographic) order first, so the result does not
// depend on the order of the input utterances.
inline RvqModel train_rvq(const std::vector<EmbeddingSequence>& embeddings,
                          int num_layers, int codebook_size, int iters,
                          std::uint64_t seed) {
    if (num_layers <= 0 || codebook_size < 2 || iters <= 0)
        throw std::invalid_argument("train_rvq: need N >= 1, V >= 2, iters >= 1");
    std::size_t total = 0, d = 0;
    for (const auto& e : embeddings) {
        if (!e.values.all_finite())
            throw std::invalid_argument("train_rvq: non-finite input");
        if (d == 0) d = e.values.cols;
        else if (d != e.values.cols)
            throw std::invalid_argument("train_rvq: inconsistent embedding dims");
        total += e.values.rows;
    }
    if (total < static_cast<std::size_t>(codebook_size))
        throw std::invalid_argument("train_rvq: fewer frames than codebook size");

    Mat pool(total, d);
    std::size_t r = 0;
    for (const auto& e : embeddings)
        for (std::size_t i = 0; i < e.values.rows; ++i, ++r)
            std::copy_n(e.values.row(i), d, pool.row(r));

    std::vector<std::size_t> order(total);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return std::lexicographical_compare(pool.row(a), pool.row(a) + d,
                                            pool.row(b), pool.row(b) + d);
    });
    Mat residual(total, d);
    for (std::size_t i = 0; i < total; ++i)
        std::copy_n(pool.row(order[i]), d, residual.row(i));

    RvqModel model;
    for (int layer = 0; layer < num_layers; ++layer) {
        Rng rng(seed_combine(seed, 0x72767160ULL + static_cast<std::uint64_t>(layer)));
        Codebook cb;
        cb.layer_index = layer + 1;
        cb.codes = detail::kmeans(residual, codebook_size, iters, rng);
        // subtract assigned codes to form the next layer's residuals
        for (std::size_t i = 0; i < total; ++i) {
            double* p = residual.row(i);
            std::size_t best = 0;
            double bd = detail::dist2(p, cb.codes.row(0), d);
            for (std::size_t c = 1; c < static_cast<std::size_t>(codebook_size); ++c) {
                const double dd = detail::dist2(p, cb.codes.row(c), d);
                if (dd < bd) { bd = dd; best = c; }
            }
            const double* code = cb.codes.row(best);
            for (std::size_t j = 0; j < d; ++j) p[j] -= code[j];
        }
        model.codebooks.push_back(std::move(cb));
    }
    return model;
}

// Greedy layerwise nearest-code quantization (Euclidean, ties to the
// lowest index), with per-layer mean residual norms as diagnostics.
inline QuantizeResult quantize(const RvqModel& model, const EmbeddingSequence& emb) {
    const std::size_t d = emb.values.cols;
    if (d != static_cast<std::size_t>(model.dim()))
        throw std::invalid_argument("quantize: embedding dimension mismatch");
    const std::size_t L = emb.values.rows;
    const auto N = static_cast<std::size_t>(model.num_layers());
    const auto V = static_cast<std::size_t>(model.codebook_size());

    QuantizeResult out;
    out.codes.num_frames = L;
    out.codes.num_layers = N;
    out.codes.indices.assign(L * N, 0);
    out.mean_residual_norm.assign(N, 0.0);

    std::vector<double> res(d);
    for (std::size_t l = 0; l < L; ++l) {
        std::copy_n(emb.values.row(l), d, res.begin());
        for (std::size_t i = 0; i < N; ++i) {
            const Mat& codes = model.codebooks[i].codes;
            std::size_t best = 0;
            double bd = detail::dist2(res.data(), codes.row(0), d);
            for (std::size_t v = 1; v < V; ++v) {
                const double dd = detail::dist2(res.data(), codes.row(v), d);
                if (dd < bd) { bd = dd; best = v; }
            }
            out.codes.at(l, i) = static_cast<int>(best);
            const double* code = codes.row(best);
            double norm2 = 0.0;
            for (std::size_t j = 0; j < d; ++j) {
                res[j] -= code[j];
                norm2 += res[j] * res[j];
            }
            out.mean_residual_norm[i] += std::sqrt(norm2);
        }
    }
    for (double& v : out.mean_residual_norm) v /= static_cast<double>(L);
    return out;
}

// Per frame, sum of code vectors of layers 1..upto_layer.
inline EmbeddingSequence dequantize(const RvqModel& model, const CodeSequence& codes,
                                    int upto_layer, const FrameConfig& cfg) {
    if (upto_layer < 1 || upto_layer > model.num_layers())
        throw std::out_of_range("dequantize: layer out of range");
    if (codes.num_layers < static_cast<std::size_t>(upto_layer))
        throw std::invalid_argument("dequantize: code sequence has too few layers");
    const auto d = static_cast<std::size_t>(model.dim());
    const auto V = static_cast<std::size_t>(model.codebook_size());

    EmbeddingSequence e;
    e.frame_config = cfg;
    e.values = Mat(codes.num_frames, d);
    for (std::size_t l = 0; l < codes.num_frames; ++l) {
        double* out = e.values.row(l);
        for (int i = 0; i < upto_layer; ++i) {
            const int idx = codes.at(l, static_cast<std::size_t>(i));
            if (idx < 0 || static_cast<std::size_t>(idx) >= V)
                throw std::out_of_range("dequantize: index out of codebook");
            const double* code = model.codebooks[static_cast<std::size_t>(i)].codes.row(static_cast<std::size_t>(idx));
            for (std::size_t j = 0; j < d; ++j) out[j] += code[j];
        }
    }
    return e;
}

// frame_rate * N * ceil(log2 V) bits per second.
inline double bitrate(const RvqModel& model, double frame_rate_hz) {
    const auto V = static_cast<unsigned>(model.codebook_size());
    const int bits = std::bit_width(V - 1u);
    return frame_rate_hz * model.num_layers() * bits;
}

// Model file: "RLRVQ001", config hash, N, V, d, codebooks row-major f32.
inline void save_rvq(const RvqModel& model, const std::string& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("save_rvq: cannot open " + path);
    f.write("RLRVQ001", 8);
    put_u64(f, model.config_hash);
    put_u32(f, static_cast<std::uint32_t>(model.num_layers()));
    put_u32(f, static_cast<std::uint32_t>(model.codebook_size()));
    put_u32(f, static_cast<std::uint32_t>(model.dim()));
    for (const auto& cb : model.codebooks)
        for (double v : cb.codes.data) put_f32(f, static_cast<float>(v));
    if (!f) throw std::runtime_error("save_rvq: write failed");
}

inline RvqModel load_rvq(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("load_rvq: cannot open " + path);
    expect_magic(f, "RLRVQ001");
    RvqModel model;
    model.config_hash = get_u64(f);
    const std::uint32_t N = get_u32(f);
    const std::uint32_t V = get_u32(f);
    const std::uint32_t d = get_u32(f);
    for (std::uint32_t i = 0; i < N; ++i) {
        Codebook cb;
        cb.layer_index = static_cast<int>(i) + 1;
        cb.codes = Mat(V, d);
        for (double& v : cb.codes.data) v = static_cast<double>(get_f32(f));
        model.codebooks.push_back(std::move(cb));
    }
    return model;
}

// Code file: "RLCOD001", config hash, L, N, u16 indices row-major.
inline void save_codes(const CodeSequence& codes, std::uint64_t config_hash, const std::string& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("save_codes: cannot open " + path);
    f.write("RLCOD001", 8);
    put_u64(f, config_hash);
    put_u32(f, static_cast<std::uint32_t>(codes.num_frames));
    put_u32(f, static_cast<std::uint32_t>(codes.num_layers));
    for (int idx : codes.indices) {
        if (idx < 0 || idx > 0xffff) throw std::runtime_error("save_codes: index out of u16 range");
        put_u16(f, static_cast<std::uint16_t>(idx));
    }
    if (!f) throw std::runtime_error("save_codes: write failed");
}

inline CodeSequence load_codes(const std::string& path, std::uint64_t* config_hash = nullptr) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("load_codes: cannot open " + path);
    expect_magic(f, "RLCOD001");
    const std::uint64_t h = get_u64(f);
    if (config_hash) *config_hash = h;
    CodeSequence codes;
    codes.num_frames = get_u32(f);
    codes.num_layers = get_u32(f);
    codes.indices.resize(codes.num_frames * codes.num_layers);
    for (int& idx : codes.indices) idx = static_cast<int>(get_u16(f));
    return codes;
}

} // namespace resynlab
