#pragma once

#include <cmath>
#include <fstream>
#include <stdexcept>
#include <string>

#include "resynlab/mat.hpp"
#include "resynlab/serialize.hpp"
#include "resynlab/waveform.hpp"

namespace resynlab {

// Non-overlapping orthonormal frame transform geometry. d = F = H so the
// analysis/synthesis pair is exactly invertible and decoding the
// pre-quantized embedding is a true quality ceiling.
struct FrameConfig {
    int frame_size = 64;
    int hop = 64;
    int dim = 64;
    int sample_rate_hz = 8000;

    double frame_rate_hz() const {
        return static_cast<double>(sample_rate_hz) / static_cast<double>(hop);
    }

    void validate() const {
        if (frame_size <= 0 || hop <= 0 || dim <= 0 || sample_rate_hz <= 0)
            throw std::invalid_argument("frame config: all fields must be positive");
        if (hop != frame_size || dim != frame_size)
            throw std::invalid_argument("frame config: requires H = F and d = F (orthonormal non-overlapping transform)");
    }

    bool operator==(const FrameConfig&) const = default;
};

// L x d matrix of per-frame embeddings.
struct EmbeddingSequence {
    Mat values; // [L, d]
    FrameConfig frame_config;

    std::size_t num_frames() const { return values.rows; }
    std::size_t dim() const { return values.cols; }
};

namespace detail {

// Orthonormal DCT-II basis as a [F, F] matrix; row k is the k-th basis
// vector, so analysis is basis * frame and synthesis is basis^T * coeffs.
inline Mat dct2_basis(int F) {
    Mat b(static_cast<std::size_t>(F), static_cast<std::size_t>(F));
    const double scale = std::sqrt(2.0 / F);
    for (int k = 0; k < F; ++k) {
        const double ck = (k == 0) ? std::sqrt(0.5) : 1.0;
        for (int n = 0; n < F; ++n)
            b(static_cast<std::size_t>(k), static_cast<std::size_t>(n)) =
                ck * scale * std::cos(M_PI * (n + 0.5) * k / F);
    }
    return b;
}

} // namespace detail

inline EmbeddingSequence encode_frames(const Waveform& w, const FrameConfig& cfg) {
    cfg.validate();
    if (w.sample_rate_hz != cfg.sample_rate_hz)
        throw std::invalid_argument("encode_frames: sample rate mismatch");
    const auto F = static_cast<std::size_t>(cfg.frame_size);
    const auto H = static_cast<std::size_t>(cfg.hop);
    if (w.size() < F)
        throw std::invalid_argument("encode_frames: waveform shorter than one frame");

    const std::size_t L = (w.size() - F) / H + 1;
    const Mat basis = detail::dct2_basis(cfg.frame_size);

    EmbeddingSequence e;
    e.frame_config = cfg;
    e.values = Mat(L, F);
    for (std::size_t l = 0; l < L; ++l) {
        const double* frame = w.samples.data() + l * H;
        double* out = e.values.row(l);
        for (std::size_t k = 0; k < F; ++k) {
            const double* bk = basis.row(k);
            double acc = 0.0;
            for (std::size_t n = 0; n < F; ++n) acc += bk[n] * frame[n];
            out[k] = acc;
        }
    }
    return e;
}

inline Waveform decode_frames(const EmbeddingSequence& e, const FrameConfig& cfg) {
    cfg.validate();
    if (e.values.cols != static_cast<std::size_t>(cfg.dim))
        throw std::invalid_argument("decode_frames: embedding dimension mismatch");
    const auto F = static_cast<std::size_t>(cfg.frame_size);
    const auto H = static_cast<std::size_t>(cfg.hop);
    const std::size_t L = e.values.rows;
    const Mat basis = detail::dct2_basis(cfg.frame_size);

    Waveform w;
    w.sample_rate_hz = cfg.sample_rate_hz;
    w.samples.assign((L - 1) * H + F, 0.0);
    for (std::size_t l = 0; l < L; ++l) {
        const double* coeff = e.values.row(l);
        double* frame = w.samples.data() + l * H;
        for (std::size_t n = 0; n < F; ++n) {
            double acc = 0.0;
            for (std::size_t k = 0; k < F; ++k) acc += basis(k, n) * coeff[k];
            frame[n] = acc;
        }
    }
    return w;
}

// Embedding file: "RLEMB001", L, d, frame config, row-major f32, little-endian.
inline void write_embeddings(const EmbeddingSequence& e, const std::string& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("write_embeddings: cannot open " + path);
    f.write("RLEMB001", 8);
    put_u32(f, static_cast<std::uint32_t>(e.values.rows));
    put_u32(f, static_cast<std::uint32_t>(e.values.cols));
    put_u32(f, static_cast<std::uint32_t>(e.frame_config.frame_size));
    put_u32(f, static_cast<std::uint32_t>(e.frame_config.hop));
    put_u32(f, static_cast<std::uint32_t>(e.frame_config.dim));
    put_u32(f, static_cast<std::uint32_t>(e.frame_config.sample_rate_hz));
    for (double v : e.values.data) put_f32(f, static_cast<float>(v));
    if (!f) throw std::runtime_error("write_embeddings: write failed");
}

inline EmbeddingSequence read_embeddings(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("read_embeddings: cannot open " + path);
    expect_magic(f, "RLEMB001");
    const std::uint32_t L = get_u32(f);
    const std::uint32_t d = get_u32(f);
    EmbeddingSequence e;
    e.frame_config.frame_size = static_cast<int>(get_u32(f));
    e.frame_config.hop = static_cast<int>(get_u32(f));
    e.frame_config.dim = static_cast<int>(get_u32(f));
    e.frame_config.sample_rate_hz = static_cast<int>(get_u32(f));
    e.values = Mat(L, d);
    for (double& v : e.values.data) v = static_cast<double>(get_f32(f));
    return e;
}

} // namespace resynlab
