// Batch experiment driver: corpus generation, codec training, model
// training, resynthesis and evaluation as reproducible pipelines.

#include <fcntl.h>
#include <unistd.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "resynlab/bridge.hpp"
#include "resynlab/config.hpp"
#include "resynlab/corpus.hpp"
#include "resynlab/eval.hpp"
#include "resynlab/resynth.hpp"

namespace fs = std::filesystem;
using namespace resynlab;

namespace {

// exit code 1; anything else that escapes is an internal error (2)
struct UserError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// One writer per output directory.
class DirLock {
public:
    explicit DirLock(const fs::path& dir) : path_(dir / ".lock") {
        fs::create_directories(dir);
        fd_ = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
        if (fd_ < 0)
            throw UserError("output directory is locked by another run: " + path_.string());
    }
    ~DirLock() {
        if (fd_ >= 0) {
            ::close(fd_);
            std::error_code ec;
            fs::remove(path_, ec);
        }
    }
    DirLock(const DirLock&) = delete;
    DirLock& operator=(const DirLock&) = delete;

private:
    fs::path path_;
    int fd_ = -1;
};

struct Context {
    RunConfig cfg;
    fs::path out;
    std::uint64_t cfg_hash = 0;
    std::uint64_t codec_h = 0;
};

Context make_context(const std::string& config_path, const std::string& out_override) {
    Context ctx;
    try {
        ctx.cfg = load_config(config_path);
    } catch (const std::exception& e) {
        throw UserError(e.what());
    }
    if (!out_override.empty()) ctx.cfg.out_dir = out_override;
    ctx.out = ctx.cfg.out_dir;
    ctx.cfg_hash = config_hash(ctx.cfg);
    ctx.codec_h = codec_hash(ctx.cfg);
    return ctx;
}

// Materialize the effective configuration next to the artifacts.
void write_effective_config(const Context& ctx) {
    fs::create_directories(ctx.out);
    save_config(ctx.cfg, (ctx.out / "config.json").string());
}

std::string utt_filename(int index) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "utt_%05d.wav", index);
    return buf;
}

std::vector<Waveform> load_corpus_range(const Context& ctx, int begin, int end) {
    const fs::path dir = ctx.out / "corpus";
    if (!fs::exists(dir / "manifest.jsonl"))
        throw UserError("corpus missing; run gen-corpus first: " + dir.string());
    std::vector<Waveform> out;
    out.reserve(static_cast<std::size_t>(end - begin));
    for (int i = begin; i < end; ++i) {
        const fs::path p = dir / utt_filename(i);
        if (!fs::exists(p)) throw UserError("corpus file missing: " + p.string());
        out.push_back(read_wav(p.string()));
    }
    return out;
}

int cmd_gen_corpus(const Context& ctx) {
    DirLock lock(ctx.out);
    write_effective_config(ctx);
    const fs::path dir = ctx.out / "corpus";
    fs::create_directories(dir);
    std::ofstream manifest(dir / "manifest.jsonl");
    if (!manifest) throw std::runtime_error("cannot write corpus manifest");
    for (int i = 0; i < ctx.cfg.corpus.num_utterances; ++i) {
        const UtteranceInfo info = synth_utterance_info(ctx.cfg.corpus, i);
        const std::string name = utt_filename(i);
        write_wav(info.wav, (dir / name).string());
        nlohmann::ordered_json rec;
        rec["index"] = i;
        rec["duration_s"] = info.duration_s;
        rec["f0_hz"] = info.f0_hz;
        rec["path"] = name;
        manifest << rec.dump() << "\n";
    }
    std::cout << "wrote " << ctx.cfg.corpus.num_utterances << " utterances to " << dir << "\n";
    return 0;
}

int cmd_train_codec(const Context& ctx) {
    DirLock lock(ctx.out);
    write_effective_config(ctx);
    const auto wavs = load_corpus_range(ctx, 0, ctx.cfg.train_utterances());
    std::vector<EmbeddingSequence> embeddings;
    embeddings.reserve(wavs.size());
    for (const auto& w : wavs) embeddings.push_back(encode_frames(w, ctx.cfg.codec.frame));

    RvqModel rvq = train_rvq(embeddings, ctx.cfg.codec.rvq_layers, ctx.cfg.codec.codebook_size,
                             ctx.cfg.codec.kmeans_iters, ctx.cfg.codec.seed);
    rvq.config_hash = ctx.codec_h;
    fs::create_directories(ctx.out / "codec");
    save_rvq(rvq, (ctx.out / "codec" / "rvq.bin").string());

    // training-residual log: mean residual norm after each layer on the
    // training frames, recomputed with the saved model
    std::vector<double> norms(static_cast<std::size_t>(rvq.num_layers()), 0.0);
    std::size_t frames = 0;
    for (const auto& e : embeddings) {
        const QuantizeResult q = quantize(rvq, e);
        for (std::size_t i = 0; i < norms.size(); ++i)
            norms[i] += q.mean_residual_norm[i] * static_cast<double>(e.values.rows);
        frames += e.values.rows;
    }
    std::ofstream log(ctx.out / "codec" / "train_codec_log.csv");
    log << "# config_hash=" << hash_hex(ctx.cfg_hash) << "\n";
    log << "layer,mean_residual_norm\n";
    char buf[64];
    for (std::size_t i = 0; i < norms.size(); ++i) {
        std::snprintf(buf, sizeof buf, "%zu,%.9f\n", i + 1, norms[i] / static_cast<double>(frames));
        log << buf;
    }
    std::cout << "trained RVQ: N=" << rvq.num_layers() << " V=" << rvq.codebook_size()
              << " d=" << rvq.dim() << " bitrate=" << bitrate(rvq, ctx.cfg.codec.frame.frame_rate_hz())
              << " bits/s\n";
    return 0;
}

RvqModel load_codec_checked(const Context& ctx) {
    const fs::path p = ctx.out / "codec" / "rvq.bin";
    if (!fs::exists(p)) throw UserError("codec missing; run train-codec first: " + p.string());
    RvqModel rvq = load_rvq(p.string());
    if (rvq.config_hash != ctx.codec_h)
        throw UserError("codec/config hash mismatch; retrain the codec for this config");
    return rvq;
}

TrainHyper hyper_for(const Context& ctx, Method method) {
    TrainHyper h;
    h.steps = ctx.cfg.train.steps;
    h.batch_utterances = ctx.cfg.train.batch_utterances;
    h.crop_frames = ctx.cfg.train.crop_frames;
    h.warmup_steps = ctx.cfg.train.warmup_steps;
    h.weight_decay = ctx.cfg.train.weight_decay;
    h.hidden_dims = ctx.cfg.train.hidden_dims;
    h.cond_dim = ctx.cfg.train.cond_dim;
    h.seed = seed_combine(ctx.cfg.train.seed, fnv1a(to_string(method)));
    switch (method) {
        case Method::c2f: h.peak_lr = ctx.cfg.train.peak_lr_c2f; break;
        case Method::onestep: h.peak_lr = ctx.cfg.train.peak_lr_onestep; break;
        case Method::bridge: h.peak_lr = ctx.cfg.train.peak_lr_bridge; break;
        default: throw UserError("train: method must be c2f, onestep or bridge");
    }
    return h;
}

int cmd_train(const Context& ctx, const std::string& method_name) {
    Method method;
    try {
        method = method_from_string(method_name);
    } catch (const std::exception& e) {
        throw UserError(e.what());
    }
    if (method == Method::baseline) throw UserError("train: baseline has no trainable model");

    DirLock lock(ctx.out);
    write_effective_config(ctx);
    const RvqModel rvq = load_codec_checked(ctx);
    const auto wavs = load_corpus_range(ctx, 0, ctx.cfg.train_utterances());
    const auto items = prepare_dataset(wavs, ctx.cfg.codec.frame, rvq);

    fs::create_directories(ctx.out / "models");
    const fs::path loss_path = ctx.out / "models" / ("loss_" + method_name + ".csv");
    std::ofstream loss_csv(loss_path);
    loss_csv << "# config_hash=" << hash_hex(ctx.cfg_hash) << "\n";
    loss_csv << "step,lr,loss\n";
    char buf[96];
    TrainHyper h = hyper_for(ctx, method);
    h.on_step = [&](int step, double lr, double loss) {
        std::snprintf(buf, sizeof buf, "%d,%.9g,%.9g\n", step, lr, loss);
        loss_csv << buf;
    };

    const fs::path ckpt = ctx.out / "models" / (method_name + ".ckpt");
    if (method == Method::c2f) {
        CoarseToFineModel m = train_coarse_to_fine(items, rvq, h);
        m.codec_hash = ctx.codec_h;
        save_checkpoint(m, ckpt.string());
    } else if (method == Method::onestep) {
        OneStepModel m = train_one_step(items, h);
        m.codec_hash = ctx.codec_h;
        save_checkpoint(m, ckpt.string());
    } else {
        const NoiseSchedule sched = make_symmetric_schedule(
            ctx.cfg.schedule.T, ctx.cfg.schedule.beta_peak, ctx.cfg.schedule.beta_min);
        BridgeModel m = train_bridge(items, sched, ctx.cfg.schedule.beta_peak,
                                     ctx.cfg.schedule.beta_min, h);
        m.codec_hash = ctx.codec_h;
        save_checkpoint(m, ckpt.string());
    }
    std::cout << "trained " << method_name << " -> " << ckpt << "\n";
    return 0;
}

struct LoadedModels {
    std::optional<CoarseToFineModel> c2f;
    std::optional<OneStepModel> onestep;
    std::optional<BridgeModel> bridge;

    ModelBundle bundle() const {
        ModelBundle b;
        if (c2f) b.c2f = &*c2f;
        if (onestep) b.onestep = &*onestep;
        if (bridge) b.bridge = &*bridge;
        return b;
    }
};

void check_model_hash(std::uint64_t model_hash, const Context& ctx, const std::string& what) {
    if (model_hash != ctx.codec_h)
        throw UserError(what + ": checkpoint was trained against a different corpus/codec config");
}

LoadedModels load_models(const Context& ctx, bool need_c2f, bool need_onestep, bool need_bridge) {
    LoadedModels lm;
    const fs::path dir = ctx.out / "models";
    const auto require = [&](const char* name) {
        const fs::path p = dir / (std::string(name) + ".ckpt");
        if (!fs::exists(p)) throw UserError(std::string("model missing; run train --method ") + name);
        return p.string();
    };
    if (need_c2f) {
        lm.c2f = load_c2f(require("c2f"));
        check_model_hash(lm.c2f->codec_hash, ctx, "c2f");
    }
    if (need_onestep) {
        lm.onestep = load_one_step(require("onestep"));
        check_model_hash(lm.onestep->codec_hash, ctx, "onestep");
    }
    if (need_bridge) {
        lm.bridge = load_bridge(require("bridge"));
        check_model_hash(lm.bridge->codec_hash, ctx, "bridge");
    }
    return lm;
}

int cmd_resynth(const Context& ctx, const std::string& method_name, int nfe,
                std::uint64_t seed, const std::string& input_wav) {
    Method method;
    try {
        method = method_from_string(method_name);
    } catch (const std::exception& e) {
        throw UserError(e.what());
    }
    DirLock lock(ctx.out);
    write_effective_config(ctx);
    const RvqModel rvq = load_codec_checked(ctx);
    const LoadedModels lm = load_models(ctx, method == Method::c2f, method == Method::onestep,
                                        method == Method::bridge);

    std::vector<Waveform> inputs;
    std::vector<std::string> names;
    if (!input_wav.empty()) {
        if (!fs::exists(input_wav)) throw UserError("input wav not found: " + input_wav);
        Waveform w = read_wav(input_wav);
        if (w.sample_rate_hz != ctx.cfg.codec.frame.sample_rate_hz)
            throw UserError("input sample rate does not match the codec config");
        inputs.push_back(std::move(w));
        names.push_back(fs::path(input_wav).stem().string());
    } else {
        const int begin = ctx.cfg.train_utterances();
        const int end = ctx.cfg.corpus.num_utterances;
        inputs = load_corpus_range(ctx, begin, end);
        for (int i = begin; i < end; ++i)
            names.push_back(fs::path(utt_filename(i)).stem().string());
    }

    // onestep and c2f force their NFE; the directory is named accordingly
    const int effective_nfe = method == Method::baseline ? 0
                              : method == Method::onestep ? 1
                              : method == Method::c2f ? rvq.num_layers() - 1
                                                      : nfe;
    const fs::path dir = ctx.out / "resynth" / (method_name + "_nfe" + std::to_string(effective_nfe));
    fs::create_directories(dir);
    nlohmann::ordered_json meta;
    meta["method"] = method_name;
    meta["nfe_requested"] = effective_nfe;
    meta["seed"] = seed;
    meta["config_hash"] = hash_hex(ctx.cfg_hash);
    meta["codec_hash"] = hash_hex(ctx.codec_h);
    if (method != Method::baseline) {
        const fs::path ckpt = ctx.out / "models" / (method_name + ".ckpt");
        meta["checkpoint_hash"] = hash_hex(hash_file(ckpt.string()));
    }
    int nfe_used = -1;
    nlohmann::ordered_json outs = nlohmann::ordered_json::array();
    for (std::size_t i = 0; i < inputs.size(); ++i) {
        const ResynthResult r = resynthesize(method, inputs[i], ctx.cfg.codec.frame, rvq,
                                             lm.bundle(), nfe, seed_combine(seed, i));
        if (nfe_used < 0) nfe_used = r.nfe_used;
        if (nfe_used != r.nfe_used)
            throw std::runtime_error("resynth: inconsistent NFE audit across utterances");
        const std::string name = names[i] + "_" + method_name + ".wav";
        write_wav(r.wav, (dir / name).string());
        outs.push_back(name);
    }
    meta["nfe_used"] = nfe_used;
    meta["outputs"] = outs;
    std::ofstream mf(dir / "metadata.json");
    mf << meta.dump(2) << "\n";
    std::cout << "resynthesized " << inputs.size() << " utterance(s), method=" << method_name
              << " nfe_used=" << nfe_used << " -> " << dir << "\n";
    return 0;
}

int cmd_eval(const Context& ctx) {
    DirLock lock(ctx.out);
    write_effective_config(ctx);
    const RvqModel rvq = load_codec_checked(ctx);
    const LoadedModels lm = load_models(ctx, true, true, true);
    const auto test_set =
        load_corpus_range(ctx, ctx.cfg.train_utterances(), ctx.cfg.corpus.num_utterances);

    const EvalReport report = eval_suite(lm.bundle(), test_set, ctx.cfg.codec.frame, rvq,
                                         ctx.cfg.eval.nfe_list, ctx.cfg.eval.seed,
                                         eval_thread_count());
    fs::create_directories(ctx.out / "report");
    write_report_csv(report, ctx.cfg_hash, (ctx.out / "report" / "report.csv").string());
    write_layer_sweep_csv(report, ctx.cfg_hash, (ctx.out / "report" / "layer_sweep.csv").string());
    write_report_json(report, ctx.cfg_hash, (ctx.out / "report" / "report.json").string());
    std::cout << "wrote report to " << (ctx.out / "report") << "\n";
    return 0;
}

int cmd_dump_schedule(const Context& ctx) {
    DirLock lock(ctx.out);
    write_effective_config(ctx);
    const NoiseSchedule sched = make_symmetric_schedule(ctx.cfg.schedule.T, ctx.cfg.schedule.beta_peak,
                                                        ctx.cfg.schedule.beta_min);
    write_schedule_csv(sched, (ctx.out / "schedule.csv").string());
    std::cout << "wrote " << (ctx.out / "schedule.csv") << "\n";
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"resynlab: neural-codec resynthesis laboratory"};
    app.require_subcommand(1);

    std::string config_path;
    std::string out_override;
    std::string method = "bridge";
    std::string input_wav;
    int nfe = 7;
    std::uint64_t seed = 0;
    bool have_seed = false;

    const auto add_common = [&](CLI::App* sub) {
        sub->add_option("--config", config_path, "config file (JSON)")->required();
        sub->add_option("--out", out_override, "output directory (overrides config)");
    };

    CLI::App* gen = app.add_subcommand("gen-corpus", "generate the synthetic corpus");
    add_common(gen);
    CLI::App* tc = app.add_subcommand("train-codec", "train the RVQ codec");
    add_common(tc);
    CLI::App* tr = app.add_subcommand("train", "train a resynthesis model");
    add_common(tr);
    tr->add_option("--method", method, "c2f | onestep | bridge")->required();
    CLI::App* rs = app.add_subcommand("resynth", "resynthesize audio from layer-1 codes");
    add_common(rs);
    rs->add_option("--method", method, "baseline | c2f | onestep | bridge")->required();
    rs->add_option("--nfe", nfe, "backward steps (bridge only)");
    rs->add_option("--seed", seed, "sampling seed")->each([&](const std::string&) { have_seed = true; });
    rs->add_option("--in", input_wav, "input wav (defaults to the eval split)");
    CLI::App* ev = app.add_subcommand("eval", "run the evaluation suite");
    add_common(ev);
    CLI::App* ds = app.add_subcommand("dump-schedule", "dump the noise schedule as CSV");
    add_common(ds);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? 0 : 1;
    }

    try {
        const Context ctx = make_context(config_path, out_override);
        if (!have_seed) seed = ctx.cfg.eval.seed;
        if (gen->parsed()) return cmd_gen_corpus(ctx);
        if (tc->parsed()) return cmd_train_codec(ctx);
        if (tr->parsed()) return cmd_train(ctx, method);
        if (rs->parsed()) return cmd_resynth(ctx, method, nfe, seed, input_wav);
        if (ev->parsed()) return cmd_eval(ctx);
        if (ds->parsed()) return cmd_dump_schedule(ctx);
        return 1;
    } catch (const UserError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::invalid_argument& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "internal error: " << e.what() << "\n";
        return 2;
    }
}
