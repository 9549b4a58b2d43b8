#pragma once

#include <atomic>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "resynlab/metrics.hpp"
#include "resynlab/resynth.hpp"
#include "resynlab/serialize.hpp"

namespace resynlab {

constexpr const char* kEstoiNote =
    "estoi adapted to 8 kHz: 15 one-third-octave bands from 150 Hz, top band clipped at Nyquist "
    "(reference design assumes 10 kHz signals)";

struct EvalRow {
    std::string method;
    int nfe = 0;
    double si_snr_mean = 0.0, si_snr_std = 0.0;
    double estoi_mean = 0.0, estoi_std = 0.0;
    double embed_mse = 0.0;
    std::vector<double> code_acc; // per layer, only for code-predicting methods
    int utterances = 0;
};

struct EvalReport {
    std::vector<EvalRow> rows;        // baseline, methods, toplines, ground truth
    std::vector<EvalRow> layer_sweep; // decode(sum of layers 1..i), i = 1..N, then z
    std::string note = kEstoiNote;
};

namespace detail {

struct RowPlan {
    enum class Kind { ground_truth, layers, c2f, onestep, bridge, topline_z } kind;
    std::string name;
    int nfe = 0;
    int upto_layer = 0; // for Kind::layers
};

struct UttMetrics {
    double si = 0.0, st = 0.0, emse = 0.0;
    std::vector<double> code_acc;
};

inline void aggregate(const std::vector<std::vector<UttMetrics>>& per_utt, std::size_t row,
                      EvalRow& out) {
    const std::size_t n = per_utt.size();
    double si_m = 0.0, st_m = 0.0, mse_m = 0.0;
    for (std::size_t u = 0; u < n; ++u) {
        si_m += per_utt[u][row].si;
        st_m += per_utt[u][row].st;
        mse_m += per_utt[u][row].emse;
    }
    si_m /= static_cast<double>(n);
    st_m /= static_cast<double>(n);
    mse_m /= static_cast<double>(n);
    double si_v = 0.0, st_v = 0.0;
    for (std::size_t u = 0; u < n; ++u) {
        si_v += (per_utt[u][row].si - si_m) * (per_utt[u][row].si - si_m);
        st_v += (per_utt[u][row].st - st_m) * (per_utt[u][row].st - st_m);
    }
    out.si_snr_mean = si_m;
    out.si_snr_std = std::sqrt(si_v / static_cast<double>(n));
    out.estoi_mean = st_m;
    out.estoi_std = std::sqrt(st_v / static_cast<double>(n));
    out.embed_mse = mse_m;
    out.utterances = static_cast<int>(n);
    if (!per_utt[0][row].code_acc.empty()) {
        out.code_acc.assign(per_utt[0][row].code_acc.size(), 0.0);
        for (std::size_t u = 0; u < n; ++u)
            for (std::size_t i = 0; i < out.code_acc.size(); ++i)
                out.code_acc[i] += per_utt[u][row].code_acc[i];
        for (double& a : out.code_acc) a /= static_cast<double>(n);
    }
}

} // namespace detail

inline int eval_thread_count() {
    if (const char* env = std::getenv("RESYNLAB_THREADS")) {
        const int n = std::atoi(env);
        if (n >= 1) return n;
    }
    return 1;
}

// Runs every configured decoder input over the test set: ground truth,
// layer-1 baseline, the three resynthesis methods (bridge once per NFE),
// the code-stack and pre-quantized toplines, plus a per-layer sweep.
// Utterances may be processed in parallel; per-utterance seeds and an
// ordered reduction keep the report identical for any thread count.
inline EvalReport eval_suite(const ModelBundle& models, const std::vector<Waveform>& test_set,
                             const FrameConfig& cfg, const RvqModel& rvq,
                             const std::vector<int>& nfe_list, std::uint64_t seed,
                             int threads = 1) {
    if (test_set.empty()) throw std::invalid_argument("eval_suite: empty test set");
    const int N = rvq.num_layers();

    std::vector<detail::RowPlan> plan;
    plan.push_back({detail::RowPlan::Kind::layers, "baseline", 0, 1});
    if (models.c2f) plan.push_back({detail::RowPlan::Kind::c2f, "c2f", N - 1, 0});
    if (models.onestep) plan.push_back({detail::RowPlan::Kind::onestep, "onestep", 1, 0});
    if (models.bridge)
        for (int nfe : nfe_list)
            plan.push_back({detail::RowPlan::Kind::bridge, "bridge", nfe, 0});
    plan.push_back({detail::RowPlan::Kind::layers, "topline_codes", 0, N});
    plan.push_back({detail::RowPlan::Kind::topline_z, "topline_z", 0, 0});
    plan.push_back({detail::RowPlan::Kind::ground_truth, "ground_truth", 0, 0});

    std::vector<detail::RowPlan> layer_plan;
    for (int i = 1; i <= N; ++i)
        layer_plan.push_back({detail::RowPlan::Kind::layers, "layer_" + std::to_string(i), 0, i});
    layer_plan.push_back({detail::RowPlan::Kind::topline_z, "z", 0, 0});

    const std::size_t U = test_set.size();
    std::vector<std::vector<detail::UttMetrics>> main_utt(U), sweep_utt(U);

    const auto run_utterance = [&](std::size_t u) {
        const Waveform& wav = test_set[u];
        const EmbeddingSequence z = encode_frames(wav, cfg);
        const QuantizeResult q = quantize(rvq, z);
        std::vector<int> layer1(q.codes.num_frames);
        for (std::size_t l = 0; l < q.codes.num_frames; ++l) layer1[l] = q.codes.at(l, 0);

        Waveform ref;
        ref.sample_rate_hz = wav.sample_rate_hz;
        const std::size_t covered = (z.values.rows - 1) * static_cast<std::size_t>(cfg.hop) +
                                    static_cast<std::size_t>(cfg.frame_size);
        ref.samples.assign(wav.samples.begin(), wav.samples.begin() + static_cast<std::ptrdiff_t>(covered));

        const auto measure = [&](const detail::RowPlan& row) {
            detail::UttMetrics met;
            EmbeddingSequence z_hat;
            switch (row.kind) {
                case detail::RowPlan::Kind::ground_truth: {
                    met.si = si_snr(ref, ref);
                    met.st = estoi(ref, ref);
                    met.emse = 0.0;
                    return met;
                }
                case detail::RowPlan::Kind::layers:
                    z_hat = dequantize(rvq, q.codes, row.upto_layer, cfg);
                    break;
                case detail::RowPlan::Kind::topline_z:
                    z_hat = z;
                    break;
                case detail::RowPlan::Kind::c2f: {
                    Rng rng(seed_combine(seed, fnv1a("c2f") ^ (0x9001 + u)));
                    CodeSequence predicted;
                    z_hat = infer_coarse_to_fine(*models.c2f, layer1, rvq, cfg, DecodeMode::greedy,
                                                 1.0, rng, nullptr, &predicted);
                    met.code_acc = code_accuracy(predicted, q.codes);
                    break;
                }
                case detail::RowPlan::Kind::onestep:
                    z_hat = infer_one_step(*models.onestep, layer1, rvq, cfg);
                    break;
                case detail::RowPlan::Kind::bridge: {
                    Rng rng(seed_combine(seed, fnv1a("bridge") ^
                                                   (0xb000 + u * 1000 + static_cast<std::size_t>(row.nfe))));
                    z_hat = infer_bridge(*models.bridge, layer1, rvq, cfg, row.nfe, rng);
                    break;
                }
            }
            const Waveform est = decode_frames(z_hat, cfg);
            met.si = si_snr(est, ref);
            met.st = estoi(est, ref);
            met.emse = embed_mse(z_hat.values, z.values);
            return met;
        };

        main_utt[u].reserve(plan.size());
        for (const auto& row : plan) main_utt[u].push_back(measure(row));
        sweep_utt[u].reserve(layer_plan.size());
        for (const auto& row : layer_plan) sweep_utt[u].push_back(measure(row));
    };

    if (threads <= 1 || U <= 1) {
        for (std::size_t u = 0; u < U; ++u) run_utterance(u);
    } else {
        std::atomic<std::size_t> next{0};
        std::vector<std::thread> pool;
        const int nt = std::min<int>(threads, static_cast<int>(U));
        pool.reserve(static_cast<std::size_t>(nt));
        for (int t = 0; t < nt; ++t)
            pool.emplace_back([&] {
                for (std::size_t u = next.fetch_add(1); u < U; u = next.fetch_add(1))
                    run_utterance(u);
            });
        for (auto& th : pool) th.join();
    }

    EvalReport report;
    for (std::size_t r = 0; r < plan.size(); ++r) {
        EvalRow row;
        row.method = plan[r].name;
        row.nfe = plan[r].nfe;
        detail::aggregate(main_utt, r, row);
        report.rows.push_back(std::move(row));
    }
    for (std::size_t r = 0; r < layer_plan.size(); ++r) {
        EvalRow row;
        row.method = layer_plan[r].name;
        row.nfe = 0;
        detail::aggregate(sweep_utt, r, row);
        report.layer_sweep.push_back(std::move(row));
    }
    return report;
}

namespace detail {

inline std::string fmt6(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.6f", v);
    return buf;
}

inline double code_acc_mean_tail(const EvalRow& row) {
    // mean over predicted layers 2..N (layer 1 is given)
    if (row.code_acc.size() < 2) return -1.0;
    double acc = 0.0;
    for (std::size_t i = 1; i < row.code_acc.size(); ++i) acc += row.code_acc[i];
    return acc / static_cast<double>(row.code_acc.size() - 1);
}

} // namespace detail

inline void write_report_csv(const EvalReport& report, std::uint64_t cfg_hash,
                             const std::string& path) {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("write_report_csv: cannot open " + path);
    f << "# config_hash=" << hash_hex(cfg_hash) << "\n";
    f << "# " << report.note << "\n";
    f << "method,nfe,si_snr_mean,si_snr_std,estoi_mean,estoi_std,embed_mse,code_acc_mean,utterances\n";
    for (const auto& r : report.rows) {
        const double cam = detail::code_acc_mean_tail(r);
        f << r.method << ',' << r.nfe << ',' << detail::fmt6(r.si_snr_mean) << ','
          << detail::fmt6(r.si_snr_std) << ',' << detail::fmt6(r.estoi_mean) << ','
          << detail::fmt6(r.estoi_std) << ',' << detail::fmt6(r.embed_mse) << ','
          << (cam < 0 ? std::string() : detail::fmt6(cam)) << ',' << r.utterances << "\n";
    }
}

inline void write_layer_sweep_csv(const EvalReport& report, std::uint64_t cfg_hash,
                                  const std::string& path) {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("write_layer_sweep_csv: cannot open " + path);
    f << "# config_hash=" << hash_hex(cfg_hash) << "\n";
    f << "decoder_input,si_snr_mean,si_snr_std,estoi_mean,estoi_std,embed_mse,utterances\n";
    for (const auto& r : report.layer_sweep)
        f << r.method << ',' << detail::fmt6(r.si_snr_mean) << ',' << detail::fmt6(r.si_snr_std)
          << ',' << detail::fmt6(r.estoi_mean) << ',' << detail::fmt6(r.estoi_std) << ','
          << detail::fmt6(r.embed_mse) << ',' << r.utterances << "\n";
}

inline void write_report_json(const EvalReport& report, std::uint64_t cfg_hash,
                              const std::string& path) {
    nlohmann::ordered_json j;
    j["config_hash"] = hash_hex(cfg_hash);
    j["note"] = report.note;
    const auto row_json = [](const EvalRow& r) {
        nlohmann::ordered_json o;
        o["method"] = r.method;
        o["nfe"] = r.nfe;
        o["si_snr_mean"] = r.si_snr_mean;
        o["si_snr_std"] = r.si_snr_std;
        o["estoi_mean"] = r.estoi_mean;
        o["estoi_std"] = r.estoi_std;
        o["embed_mse"] = r.embed_mse;
        if (!r.code_acc.empty()) o["code_accuracy_per_layer"] = r.code_acc;
        o["utterances"] = r.utterances;
        return o;
    };
    j["rows"] = nlohmann::ordered_json::array();
    for (const auto& r : report.rows) j["rows"].push_back(row_json(r));
    j["layer_sweep"] = nlohmann::ordered_json::array();
    for (const auto& r : report.layer_sweep) j["layer_sweep"].push_back(row_json(r));
    std::ofstream f(path);
    if (!f) throw std::runtime_error("write_report_json: cannot open " + path);
    f << j.dump(2) << "\n";
}

} // namespace resynlab
