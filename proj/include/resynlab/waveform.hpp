#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "resynlab/serialize.hpp"

namespace resynlab {

// Mono sampled signal, nominal amplitude range [-1, 1].
struct Waveform {
    std::vector<double> samples;
    int sample_rate_hz = 0;

    std::size_t size() const { return samples.size(); }

    void validate() const {
        if (samples.empty()) throw std::invalid_argument("waveform: empty");
        if (sample_rate_hz <= 0) throw std::invalid_argument("waveform: sample rate must be positive");
        for (double s : samples)
            if (!std::isfinite(s)) throw std::invalid_argument("waveform: non-finite sample");
    }
};

// Reads a mono 16-bit linear PCM RIFF/WAVE file. Samples are scaled to
// [-1, 1) by dividing by 32768.
inline Waveform read_wav(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("read_wav: cannot open " + path);

    expect_magic(f, "RIFF");
    get_u32(f); // riff size, unused
    expect_magic(f, "WAVE");

    int channels = 0, bits = 0, rate = 0, format = 0;
    bool have_fmt = false;
    Waveform w;

    while (true) {
        char id[4];
        f.read(id, 4);
        if (!f) break;
        const std::uint32_t chunk_size = get_u32(f);
        const std::string cid(id, 4);
        if (cid == "fmt ") {
            if (chunk_size < 16) throw std::runtime_error("read_wav: malformed fmt chunk");
            format = get_u16(f);
            channels = get_u16(f);
            rate = static_cast<int>(get_u32(f));
            get_u32(f); // byte rate
            get_u16(f); // block align
            bits = get_u16(f);
            if (chunk_size > 16) f.seekg(chunk_size - 16, std::ios::cur);
            have_fmt = true;
        } else if (cid == "data") {
            if (!have_fmt) throw std::runtime_error("read_wav: data chunk before fmt");
            if (format != 1) throw std::runtime_error("read_wav: unsupported format (not linear PCM)");
            if (channels != 1) throw std::runtime_error("read_wav: unsupported format (not mono)");
            if (bits != 16) throw std::runtime_error("read_wav: unsupported format (not 16-bit)");
            const std::size_t n = chunk_size / 2;
            w.samples.resize(n);
            for (std::size_t i = 0; i < n; ++i) {
                const std::int16_t v = static_cast<std::int16_t>(get_u16(f));
                w.samples[i] = static_cast<double>(v) / 32768.0;
            }
            w.sample_rate_hz = rate;
            return w;
        } else {
            // skip unknown chunk (word aligned)
            f.seekg(chunk_size + (chunk_size & 1), std::ios::cur);
            if (!f) throw std::runtime_error("read_wav: truncated file");
        }
    }
    throw std::runtime_error("read_wav: missing data chunk");
}

// Rounds half away from zero, then clamps to int16 range.
inline std::int16_t pcm16_from_sample(double x) {
    const double lo = -1.0, hi = 1.0 - 0x1.0p-15;
    if (x < lo) x = lo;
    if (x > hi) x = hi;
    const double scaled = x * 32768.0;
    const double r = (scaled >= 0.0) ? std::floor(scaled + 0.5) : std::ceil(scaled - 0.5);
    return static_cast<std::int16_t>(r);
}

// Writes mono 16-bit linear PCM.
inline void write_wav(const Waveform& w, const std::string& path) {
    for (double s : w.samples)
        if (!std::isfinite(s)) throw std::invalid_argument("write_wav: non-finite sample");
    if (w.sample_rate_hz <= 0) throw std::invalid_argument("write_wav: bad sample rate");

    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("write_wav: cannot open " + path);

    const std::uint32_t data_bytes = static_cast<std::uint32_t>(w.samples.size() * 2);
    f.write("RIFF", 4);
    put_u32(f, 36 + data_bytes);
    f.write("WAVE", 4);
    f.write("fmt ", 4);
    put_u32(f, 16);
    put_u16(f, 1); // PCM
    put_u16(f, 1); // mono
    put_u32(f, static_cast<std::uint32_t>(w.sample_rate_hz));
    put_u32(f, static_cast<std::uint32_t>(w.sample_rate_hz * 2));
    put_u16(f, 2);
    put_u16(f, 16);
    f.write("data", 4);
    put_u32(f, data_bytes);
    for (double s : w.samples)
        put_u16(f, static_cast<std::uint16_t>(pcm16_from_sample(s)));
    if (!f) throw std::runtime_error("write_wav: write failed: " + path);
}

} // namespace resynlab
