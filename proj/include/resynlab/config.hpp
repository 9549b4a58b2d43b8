#pragma once

#include <cstdint>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "resynlab/corpus.hpp"
#include "resynlab/serialize.hpp"
#include "resynlab/transform.hpp"

namespace resynlab {

// Reference values from the full-scale recipe, recorded alongside the
// desk-scale defaults.
namespace reference_scale {
constexpr double frame_rate_hz = 75.0;
constexpr int embed_dim = 128;
constexpr int rvq_layers = 8;
constexpr int codebook_size = 1024;
constexpr int schedule_T = 1000;
constexpr int warmup_steps = 32000;
constexpr double peak_lr_c2f = 1e-4;
constexpr double peak_lr_onestep = 5e-4;
constexpr double peak_lr_bridge = 5e-4;
constexpr double weight_decay = 0.01;
constexpr double beta_peak = 0.3;
} // namespace reference_scale

struct CodecConfig {
    FrameConfig frame;
    int rvq_layers = 8;
    int codebook_size = 256;
    int kmeans_iters = 25;
    std::uint64_t seed = 2;

    void validate() const {
        frame.validate();
        if (rvq_layers < 1 || codebook_size < 2 || kmeans_iters < 1)
            throw std::invalid_argument("codec config: bad RVQ parameters");
    }
};

struct ScheduleConfig {
    int T = 1000;
    double beta_peak = 0.3;
    double beta_min = 1e-4;

    void validate() const {
        if (T < 2) throw std::invalid_argument("schedule config: T must be >= 2");
        if (beta_min < 0 || beta_min > beta_peak)
            throw std::invalid_argument("schedule config: need 0 <= beta_min <= beta_peak");
    }
};

struct TrainConfig {
    int steps = 1500;
    int batch_utterances = 32;
    int crop_frames = 8;
    int warmup_steps = 150;
    double peak_lr_c2f = reference_scale::peak_lr_c2f;
    double peak_lr_onestep = reference_scale::peak_lr_onestep;
    double peak_lr_bridge = reference_scale::peak_lr_bridge;
    double weight_decay = reference_scale::weight_decay;
    std::vector<int> hidden_dims = {256, 256, 256, 256};
    int cond_dim = 64;
    std::uint64_t seed = 3;

    void validate() const {
        if (steps < 1 || batch_utterances < 1 || crop_frames < 1)
            throw std::invalid_argument("train config: bad batch geometry");
        if (warmup_steps < 1 || warmup_steps >= steps)
            throw std::invalid_argument("train config: need 0 < warmup_steps < steps");
        if (peak_lr_c2f <= 0 || peak_lr_onestep <= 0 || peak_lr_bridge <= 0)
            throw std::invalid_argument("train config: peak lrs must be positive");
        if (hidden_dims.empty()) throw std::invalid_argument("train config: no hidden layers");
        if (cond_dim <= 0 || cond_dim % 2 != 0)
            throw std::invalid_argument("train config: cond_dim must be positive and even");
    }
};

struct EvalConfig {
    std::vector<int> nfe_list = {1, 4, 7, 16, 32};
    int eval_utterances = 8;
    std::uint64_t seed = 4;

    void validate() const {
        if (nfe_list.empty()) throw std::invalid_argument("eval config: empty nfe list");
        for (int n : nfe_list)
            if (n < 1) throw std::invalid_argument("eval config: nfe must be >= 1");
        if (eval_utterances < 1) throw std::invalid_argument("eval config: need eval utterances");
    }
};

struct RunConfig {
    CorpusSpec corpus;
    CodecConfig codec;
    ScheduleConfig schedule;
    TrainConfig train;
    EvalConfig eval;
    std::string out_dir = "runs/default";

    int train_utterances() const { return corpus.num_utterances - eval.eval_utterances; }

    void validate() const {
        corpus.validate();
        codec.validate();
        schedule.validate();
        train.validate();
        eval.validate();
        if (codec.frame.sample_rate_hz != corpus.sample_rate_hz)
            throw std::invalid_argument("config: codec and corpus sample rates differ");
        if (eval.eval_utterances >= corpus.num_utterances)
            throw std::invalid_argument("config: eval split leaves no training utterances");
        if (out_dir.empty()) throw std::invalid_argument("config: empty output directory");
    }
};

using ojson = nlohmann::ordered_json;

inline ojson to_json(const RunConfig& c) {
    ojson j;
    j["corpus"] = {{"num_utterances", c.corpus.num_utterances},
                   {"duration_s_min", c.corpus.duration_s_min},
                   {"duration_s_max", c.corpus.duration_s_max},
                   {"f0_hz_min", c.corpus.f0_hz_min},
                   {"f0_hz_max", c.corpus.f0_hz_max},
                   {"num_harmonics", c.corpus.num_harmonics},
                   {"noise_level", c.corpus.noise_level},
                   {"sample_rate_hz", c.corpus.sample_rate_hz},
                   {"seed", c.corpus.seed}};
    j["codec"] = {{"frame_size", c.codec.frame.frame_size},
                  {"hop", c.codec.frame.hop},
                  {"dim", c.codec.frame.dim},
                  {"rvq_layers", c.codec.rvq_layers},
                  {"codebook_size", c.codec.codebook_size},
                  {"kmeans_iters", c.codec.kmeans_iters},
                  {"seed", c.codec.seed}};
    j["schedule"] = {{"T", c.schedule.T},
                     {"beta_peak", c.schedule.beta_peak},
                     {"beta_min", c.schedule.beta_min}};
    j["train"] = {{"steps", c.train.steps},
                  {"batch_utterances", c.train.batch_utterances},
                  {"crop_frames", c.train.crop_frames},
                  {"warmup_steps", c.train.warmup_steps},
                  {"peak_lr_c2f", c.train.peak_lr_c2f},
                  {"peak_lr_onestep", c.train.peak_lr_onestep},
                  {"peak_lr_bridge", c.train.peak_lr_bridge},
                  {"weight_decay", c.train.weight_decay},
                  {"hidden_dims", c.train.hidden_dims},
                  {"cond_dim", c.train.cond_dim},
                  {"seed", c.train.seed}};
    j["eval"] = {{"nfe_list", c.eval.nfe_list},
                 {"eval_utterances", c.eval.eval_utterances},
                 {"seed", c.eval.seed}};
    j["out_dir"] = c.out_dir;
    return j;
}

namespace detail {

template <typename T>
void get_if_present(const ojson& j, const char* key, T& out) {
    if (j.contains(key)) out = j.at(key).get<T>();
}

} // namespace detail

// Missing keys fall back to the desk-scale defaults; the caller is
// expected to materialize the result back to disk so every run records
// its complete effective configuration.
inline RunConfig config_from_json(const ojson& j) {
    RunConfig c;
    if (j.contains("corpus")) {
        const auto& s = j.at("corpus");
        detail::get_if_present(s, "num_utterances", c.corpus.num_utterances);
        detail::get_if_present(s, "duration_s_min", c.corpus.duration_s_min);
        detail::get_if_present(s, "duration_s_max", c.corpus.duration_s_max);
        detail::get_if_present(s, "f0_hz_min", c.corpus.f0_hz_min);
        detail::get_if_present(s, "f0_hz_max", c.corpus.f0_hz_max);
        detail::get_if_present(s, "num_harmonics", c.corpus.num_harmonics);
        detail::get_if_present(s, "noise_level", c.corpus.noise_level);
        detail::get_if_present(s, "sample_rate_hz", c.corpus.sample_rate_hz);
        detail::get_if_present(s, "seed", c.corpus.seed);
    }
    if (j.contains("codec")) {
        const auto& s = j.at("codec");
        detail::get_if_present(s, "frame_size", c.codec.frame.frame_size);
        detail::get_if_present(s, "hop", c.codec.frame.hop);
        detail::get_if_present(s, "dim", c.codec.frame.dim);
        detail::get_if_present(s, "rvq_layers", c.codec.rvq_layers);
        detail::get_if_present(s, "codebook_size", c.codec.codebook_size);
        detail::get_if_present(s, "kmeans_iters", c.codec.kmeans_iters);
        detail::get_if_present(s, "seed", c.codec.seed);
        c.codec.frame.sample_rate_hz = c.corpus.sample_rate_hz;
    }
    if (j.contains("schedule")) {
        const auto& s = j.at("schedule");
        detail::get_if_present(s, "T", c.schedule.T);
        detail::get_if_present(s, "beta_peak", c.schedule.beta_peak);
        detail::get_if_present(s, "beta_min", c.schedule.beta_min);
    }
    if (j.contains("train")) {
        const auto& s = j.at("train");
        detail::get_if_present(s, "steps", c.train.steps);
        detail::get_if_present(s, "batch_utterances", c.train.batch_utterances);
        detail::get_if_present(s, "crop_frames", c.train.crop_frames);
        detail::get_if_present(s, "warmup_steps", c.train.warmup_steps);
        detail::get_if_present(s, "peak_lr_c2f", c.train.peak_lr_c2f);
        detail::get_if_present(s, "peak_lr_onestep", c.train.peak_lr_onestep);
        detail::get_if_present(s, "peak_lr_bridge", c.train.peak_lr_bridge);
        detail::get_if_present(s, "weight_decay", c.train.weight_decay);
        detail::get_if_present(s, "hidden_dims", c.train.hidden_dims);
        detail::get_if_present(s, "cond_dim", c.train.cond_dim);
        detail::get_if_present(s, "seed", c.train.seed);
    }
    if (j.contains("eval")) {
        const auto& s = j.at("eval");
        detail::get_if_present(s, "nfe_list", c.eval.nfe_list);
        detail::get_if_present(s, "eval_utterances", c.eval.eval_utterances);
        detail::get_if_present(s, "seed", c.eval.seed);
    }
    detail::get_if_present(j, "out_dir", c.out_dir);
    c.codec.frame.sample_rate_hz = c.corpus.sample_rate_hz;
    c.validate();
    return c;
}

inline RunConfig load_config(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("cannot open config: " + path);
    ojson j;
    try {
        f >> j;
    } catch (const std::exception& e) {
        throw std::runtime_error("config parse error in " + path + ": " + e.what());
    }
    return config_from_json(j);
}

inline void save_config(const RunConfig& c, const std::string& path) {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("cannot write config: " + path);
    f << to_json(c).dump(2) << "\n";
}

// Fingerprint of the effective configuration (output location excluded,
// so artifacts stay valid when a run directory is moved).
inline std::uint64_t config_hash(const RunConfig& c) {
    ojson j = to_json(c);
    j.erase("out_dir");
    return fnv1a(j.dump());
}

// Fingerprint of the sections a trained codec/model depends on.
inline std::uint64_t codec_hash(const RunConfig& c) {
    const ojson j = to_json(c);
    ojson sub;
    sub["corpus"] = j.at("corpus");
    sub["codec"] = j.at("codec");
    return fnv1a(sub.dump());
}

} // namespace resynlab
