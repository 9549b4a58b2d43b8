#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "resynlab/rng.hpp"
#include "resynlab/waveform.hpp"

namespace resynlab {

// Parameters of the synthetic harmonic-plus-noise corpus.
struct CorpusSpec {
    int num_utterances = 48;
    double duration_s_min = 1.0;
    double duration_s_max = 3.0;
    double f0_hz_min = 100.0;
    double f0_hz_max = 300.0;
    int num_harmonics = 10;
    double noise_level = 0.003;
    int sample_rate_hz = 8000;
    std::uint64_t seed = 1;

    void validate() const {
        if (num_utterances <= 0) throw std::invalid_argument("corpus: num_utterances must be positive");
        if (duration_s_min <= 0 || duration_s_max <= 0 || duration_s_min > duration_s_max)
            throw std::invalid_argument("corpus: bad duration range");
        if (f0_hz_min <= 0 || f0_hz_max <= 0 || f0_hz_min > f0_hz_max)
            throw std::invalid_argument("corpus: bad f0 range");
        if (num_harmonics < 0) throw std::invalid_argument("corpus: num_harmonics must be non-negative");
        if (noise_level < 0) throw std::invalid_argument("corpus: noise_level must be non-negative");
        if (sample_rate_hz <= 0) throw std::invalid_argument("corpus: sample rate must be positive");
        if (num_harmonics > 0 &&
            static_cast<double>(num_harmonics) * f0_hz_max >= sample_rate_hz / 2.0)
            throw std::invalid_argument("corpus: harmonics exceed Nyquist");
    }
};

struct UtteranceInfo {
    Waveform wav;
    double duration_s = 0.0;
    double f0_hz = 0.0;
};

// Deterministic speech-like utterance: amplitude-modulated harmonic stack
// with slow vibrato, plus white noise, peak-normalized to 0.9. Pure
// function of (spec.seed, index).
inline UtteranceInfo synth_utterance_info(const CorpusSpec& spec, int index) {
    spec.validate();
    if (index < 0 || index >= spec.num_utterances)
        throw std::out_of_range("synth_utterance: index out of range");

    Rng rng(seed_combine(spec.seed, 0x636f7270ULL ^ static_cast<std::uint64_t>(index)));

    const double dur = rng.uniform(spec.duration_s_min, spec.duration_s_max);
    const auto n = static_cast<std::size_t>(std::llround(dur * spec.sample_rate_hz));
    const double f0 = rng.uniform(spec.f0_hz_min, spec.f0_hz_max);

    // slow modulators; vibrato depth is kept small so the fundamental's
    // spectral line stays inside one DFT bin of f0
    const double vib_rate = rng.uniform(3.0, 6.0);
    const double vib_depth = 0.003;
    const double vib_phase = rng.uniform(0.0, 2.0 * M_PI);

    struct Harmonic {
        double amp, am_rate, am_phase, phase0;
    };
    std::vector<Harmonic> hs(static_cast<std::size_t>(spec.num_harmonics));
    for (std::size_t h = 0; h < hs.size(); ++h) {
        hs[h].amp = 1.0 / static_cast<double>(h + 1);
        hs[h].am_rate = rng.uniform(0.5, 4.0);
        hs[h].am_phase = rng.uniform(0.0, 2.0 * M_PI);
        hs[h].phase0 = rng.uniform(0.0, 2.0 * M_PI);
    }

    Waveform w;
    w.sample_rate_hz = spec.sample_rate_hz;
    w.samples.assign(n, 0.0);

    const double dt = 1.0 / spec.sample_rate_hz;
    double theta = 0.0; // integrated fundamental phase / 2pi
    for (std::size_t i = 0; i < n; ++i) {
        const double t = static_cast<double>(i) * dt;
        const double inst_f0 = f0 * (1.0 + vib_depth * std::sin(2.0 * M_PI * vib_rate * t + vib_phase));
        double v = 0.0;
        for (std::size_t h = 0; h < hs.size(); ++h) {
            const double am = 0.8 + 0.2 * std::sin(2.0 * M_PI * hs[h].am_rate * t + hs[h].am_phase);
            v += hs[h].amp * am * std::sin(2.0 * M_PI * static_cast<double>(h + 1) * theta + hs[h].phase0);
        }
        w.samples[i] = v;
        theta += inst_f0 * dt;
    }
    if (spec.noise_level > 0.0)
        for (std::size_t i = 0; i < n; ++i)
            w.samples[i] += spec.noise_level * rng.normal();

    double peak = 0.0;
    for (double s : w.samples) peak = std::max(peak, std::fabs(s));
    if (peak > 0.0) {
        const double g = 0.9 / peak;
        for (double& s : w.samples) s *= g;
    }
    return UtteranceInfo{std::move(w), dur, f0};
}

inline Waveform synth_utterance(const CorpusSpec& spec, int index) {
    return synth_utterance_info(spec, index).wav;
}

// Contiguous slice of exactly length_samples; start offset uniform over
// the valid positions.
inline Waveform crop_random(const Waveform& w, std::size_t length_samples, Rng& rng) {
    if (length_samples == 0 || length_samples > w.size())
        throw std::invalid_argument("crop_random: bad crop length");
    const std::size_t span = w.size() - length_samples + 1;
    const std::size_t start = static_cast<std::size_t>(rng.below(span));
    Waveform out;
    out.sample_rate_hz = w.sample_rate_hz;
    out.samples.assign(w.samples.begin() + static_cast<std::ptrdiff_t>(start),
                       w.samples.begin() + static_cast<std::ptrdiff_t>(start + length_samples));
    return out;
}

} // namespace resynlab
