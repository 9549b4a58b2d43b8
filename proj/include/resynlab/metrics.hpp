#pragma once

#include <cmath>
#include <complex>
#include <stdexcept>
#include <vector>

#include "resynlab/mat.hpp"
#include "resynlab/rvq.hpp"
#include "resynlab/transform.hpp"
#include "resynlab/waveform.hpp"

namespace resynlab {

namespace detail {

// In-place iterative radix-2 FFT; n must be a power of two.
inline void fft_pow2(std::vector<std::complex<double>>& a) {
    const std::size_t n = a.size();
    if (n == 0 || (n & (n - 1)) != 0)
        throw std::invalid_argument("fft_pow2: size must be a power of two");
    for (std::size_t i = 1, j = 0; i < n; ++i) {
        std::size_t bit = n >> 1;
        for (; j & bit; bit >>= 1) j ^= bit;
        j ^= bit;
        if (i < j) std::swap(a[i], a[j]);
    }
    for (std::size_t len = 2; len <= n; len <<= 1) {
        const double ang = -2.0 * M_PI / static_cast<double>(len);
        const std::complex<double> wl(std::cos(ang), std::sin(ang));
        for (std::size_t i = 0; i < n; i += len) {
            std::complex<double> w(1.0, 0.0);
            for (std::size_t k = 0; k < len / 2; ++k) {
                const std::complex<double> u = a[i + k];
                const std::complex<double> v = a[i + k + len / 2] * w;
                a[i + k] = u + v;
                a[i + k + len / 2] = u - v;
                w *= wl;
            }
        }
    }
}

} // namespace detail

// Scale-invariant SNR in dB with mean removal, capped at +100 dB when the
// error energy underflows relative to the projected target.
inline double si_snr(const Waveform& estimate, const Waveform& reference) {
    const std::size_t n = estimate.size();
    if (n != reference.size()) throw std::invalid_argument("si_snr: length mismatch");
    if (n < 2) throw std::invalid_argument("si_snr: signals too short");

    double me = 0.0, mr = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        me += estimate.samples[i];
        mr += reference.samples[i];
    }
    me /= static_cast<double>(n);
    mr /= static_cast<double>(n);

    double dot = 0.0, ref_e = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double e = estimate.samples[i] - me;
        const double r = reference.samples[i] - mr;
        dot += e * r;
        ref_e += r * r;
    }
    if (ref_e <= 0.0) throw std::invalid_argument("si_snr: reference is zero after mean removal");

    const double alpha = dot / ref_e;
    double tgt_e = 0.0, err_e = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double e = estimate.samples[i] - me;
        const double r = reference.samples[i] - mr;
        const double t = alpha * r;
        tgt_e += t * t;
        const double d = e - t;
        err_e += d * d;
    }
    if (err_e <= 1e-10 * tgt_e || err_e == 0.0) return 100.0;
    const double db = 10.0 * std::log10(tgt_e / err_e);
    return std::min(db, 100.0);
}

struct EstoiParams {
    int frame_size = 256; // power of two
    int hop = 128;
    int num_bands = 15;
    double lowest_center_hz = 150.0;
    int segment_frames = 30;
};

// Extended short-time objective intelligibility, adapted to the corpus
// rate: 15 one-third-octave bands from 150 Hz (the reference design uses
// 10 kHz signals; the top band is clipped at Nyquist here), Hann frames
// of 256 samples at 50% overlap, non-overlapping 30-frame segments.
// Per segment the band-by-frame patches of both signals are row- and then
// column-normalized to zero mean and unit norm; the score is the mean
// column correlation, averaged over segments.
inline double estoi(const Waveform& estimate, const Waveform& reference,
                    const EstoiParams& params = {}) {
    if (estimate.size() != reference.size()) throw std::invalid_argument("estoi: length mismatch");
    if (estimate.sample_rate_hz != reference.sample_rate_hz)
        throw std::invalid_argument("estoi: sample rate mismatch");

    const int F = params.frame_size;
    const int H = params.hop;
    const double sr = reference.sample_rate_hz;
    const std::size_t n = reference.size();
    if (n < static_cast<std::size_t>(F)) throw std::invalid_argument("estoi: signal too short");
    const std::size_t num_frames = (n - static_cast<std::size_t>(F)) / static_cast<std::size_t>(H) + 1;
    const std::size_t num_segments = num_frames / static_cast<std::size_t>(params.segment_frames);
    if (num_segments == 0)
        throw std::invalid_argument("estoi: signal too short for one analysis segment");

    // one-third octave band edges; bins assigned by center frequency
    const int half = F / 2;
    std::vector<int> band_of(static_cast<std::size_t>(half + 1), -1);
    for (int b = 0; b < params.num_bands; ++b) {
        const double fc = params.lowest_center_hz * std::pow(2.0, b / 3.0);
        const double lo = fc * std::pow(2.0, -1.0 / 6.0);
        double hi = fc * std::pow(2.0, 1.0 / 6.0);
        hi = std::min(hi, sr / 2.0);
        bool nonempty = false;
        for (int i = 0; i <= half; ++i) {
            const double f = i * sr / F;
            if (f >= lo && f < hi) {
                band_of[static_cast<std::size_t>(i)] = b;
                nonempty = true;
            }
        }
        if (!nonempty)
            throw std::invalid_argument("estoi: sample rate too low for the band layout");
    }

    std::vector<double> window(static_cast<std::size_t>(F));
    for (int i = 0; i < F; ++i)
        window[static_cast<std::size_t>(i)] = 0.5 * (1.0 - std::cos(2.0 * M_PI * i / F));

    const auto band_spectrogram = [&](const Waveform& w) {
        Mat bands(num_frames, static_cast<std::size_t>(params.num_bands));
        std::vector<std::complex<double>> buf(static_cast<std::size_t>(F));
        std::vector<double> acc(static_cast<std::size_t>(params.num_bands));
        for (std::size_t fr = 0; fr < num_frames; ++fr) {
            const double* x = w.samples.data() + fr * static_cast<std::size_t>(H);
            for (int i = 0; i < F; ++i)
                buf[static_cast<std::size_t>(i)] = x[i] * window[static_cast<std::size_t>(i)];
            detail::fft_pow2(buf);
            std::fill(acc.begin(), acc.end(), 0.0);
            for (int i = 0; i <= half; ++i) {
                const int b = band_of[static_cast<std::size_t>(i)];
                if (b >= 0) acc[static_cast<std::size_t>(b)] += std::norm(buf[static_cast<std::size_t>(i)]);
            }
            for (int b = 0; b < params.num_bands; ++b)
                bands(fr, static_cast<std::size_t>(b)) = std::sqrt(acc[static_cast<std::size_t>(b)]);
        }
        return bands;
    };

    const Mat be = band_spectrogram(estimate);
    const Mat br = band_spectrogram(reference);

    // normalize a [bands, frames] patch: rows then columns, each to zero
    // mean and unit norm (silent rows/columns are left at zero)
    const auto normalize_patch = [&](Mat& p) {
        for (std::size_t r = 0; r < p.rows; ++r) {
            double mean = 0.0;
            for (std::size_t c = 0; c < p.cols; ++c) mean += p(r, c);
            mean /= static_cast<double>(p.cols);
            double nrm = 0.0;
            for (std::size_t c = 0; c < p.cols; ++c) {
                p(r, c) -= mean;
                nrm += p(r, c) * p(r, c);
            }
            nrm = std::sqrt(nrm);
            if (nrm > 0.0)
                for (std::size_t c = 0; c < p.cols; ++c) p(r, c) /= nrm;
        }
        for (std::size_t c = 0; c < p.cols; ++c) {
            double mean = 0.0;
            for (std::size_t r = 0; r < p.rows; ++r) mean += p(r, c);
            mean /= static_cast<double>(p.rows);
            double nrm = 0.0;
            for (std::size_t r = 0; r < p.rows; ++r) {
                p(r, c) -= mean;
                nrm += p(r, c) * p(r, c);
            }
            nrm = std::sqrt(nrm);
            if (nrm > 0.0)
                for (std::size_t r = 0; r < p.rows; ++r) p(r, c) /= nrm;
        }
    };

    double total = 0.0;
    const auto S = static_cast<std::size_t>(params.segment_frames);
    const auto Bn = static_cast<std::size_t>(params.num_bands);
    for (std::size_t seg = 0; seg < num_segments; ++seg) {
        Mat pe(Bn, S), pr(Bn, S);
        for (std::size_t b = 0; b < Bn; ++b)
            for (std::size_t c = 0; c < S; ++c) {
                pe(b, c) = be(seg * S + c, b);
                pr(b, c) = br(seg * S + c, b);
            }
        normalize_patch(pe);
        normalize_patch(pr);
        double seg_score = 0.0;
        for (std::size_t c = 0; c < S; ++c) {
            double dot = 0.0;
            for (std::size_t b = 0; b < Bn; ++b) dot += pe(b, c) * pr(b, c);
            seg_score += dot;
        }
        total += seg_score / static_cast<double>(S);
    }
    return total / static_cast<double>(num_segments);
}

// Per-layer fraction of frames with matching indices.
inline std::vector<double> code_accuracy(const CodeSequence& predicted, const CodeSequence& truth) {
    if (predicted.num_frames != truth.num_frames || predicted.num_layers != truth.num_layers)
        throw std::invalid_argument("code_accuracy: shape mismatch");
    std::vector<double> acc(predicted.num_layers, 0.0);
    for (std::size_t l = 0; l < predicted.num_frames; ++l)
        for (std::size_t i = 0; i < predicted.num_layers; ++i)
            if (predicted.at(l, i) == truth.at(l, i)) acc[i] += 1.0;
    for (double& a : acc) a /= static_cast<double>(predicted.num_frames);
    return acc;
}

// Mean over all entries of the squared difference.
inline double embed_mse(const Mat& estimate, const Mat& truth) {
    check_same_shape(estimate, truth, "embed_mse");
    double acc = 0.0;
    for (std::size_t i = 0; i < estimate.size(); ++i) {
        const double t = estimate.data[i] - truth.data[i];
        acc += t * t;
    }
    return acc / static_cast<double>(estimate.size());
}

inline double embed_mse(const EmbeddingSequence& estimate, const EmbeddingSequence& truth) {
    return embed_mse(estimate.values, truth.values);
}

} // namespace resynlab
