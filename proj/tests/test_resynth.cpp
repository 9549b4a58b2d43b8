#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "resynlab/corpus.hpp"
#include "resynlab/eval.hpp"
#include "resynlab/metrics.hpp"
#include "resynlab/resynth.hpp"

using namespace resynlab;

namespace {

// Tiny end-to-end fixture shared across the resynthesis tests: a short
// corpus, a small codec, and quickly trained models.
struct TinyLab {
    CorpusSpec corpus;
    FrameConfig frame;
    RvqModel rvq;
    NoiseSchedule sched;
    std::vector<Waveform> train_wavs, eval_wavs;
    std::vector<TrainItem> items;
    CoarseToFineModel c2f;
    OneStepModel onestep;
    BridgeModel bridge;

    ModelBundle bundle() const {
        ModelBundle b;
        b.c2f = &c2f;
        b.onestep = &onestep;
        b.bridge = &bridge;
        return b;
    }
};

TrainHyper tiny_hyper(double lr, int steps, std::uint64_t seed) {
    TrainHyper h;
    h.steps = steps;
    h.batch_utterances = 8;
    h.crop_frames = 8;
    h.warmup_steps = std::max(1, steps / 10);
    h.peak_lr = lr;
    h.hidden_dims = {48, 48};
    h.cond_dim = 16;
    h.seed = seed;
    return h;
}

const TinyLab& tiny_lab() {
    static const TinyLab lab = [] {
        TinyLab t;
        t.corpus.num_utterances = 8;
        t.corpus.duration_s_min = 0.5;
        t.corpus.duration_s_max = 0.8;
        t.corpus.num_harmonics = 6;
        t.corpus.noise_level = 0.002;
        t.corpus.seed = 99;
        t.frame.frame_size = t.frame.hop = t.frame.dim = 16;
        t.frame.sample_rate_hz = t.corpus.sample_rate_hz;
        for (int i = 0; i < 6; ++i) t.train_wavs.push_back(synth_utterance(t.corpus, i));
        for (int i = 6; i < 8; ++i) t.eval_wavs.push_back(synth_utterance(t.corpus, i));

        std::vector<EmbeddingSequence> embs;
        for (const auto& w : t.train_wavs) embs.push_back(encode_frames(w, t.frame));
        t.rvq = train_rvq(embs, 3, 8, 15, 5);
        t.sched = make_symmetric_schedule(200, 0.3, 1e-4);
        t.items = prepare_dataset(t.train_wavs, t.frame, t.rvq);
        t.c2f = train_coarse_to_fine(t.items, t.rvq, tiny_hyper(1e-3, 300, 10));
        t.onestep = train_one_step(t.items, tiny_hyper(2e-3, 300, 11));
        t.bridge = train_bridge(t.items, t.sched, 0.3, 1e-4, tiny_hyper(2e-3, 300, 12));
        return t;
    }();
    return lab;
}

} // namespace

TEST_CASE("uniform logits give cross entropy ln V", "[resynth]") {
    Graph g;
    const int logits = g.constant(Mat(5, 8)); // all-zero logits
    const int loss = g.xent_loss(logits, {0, 3, 7, 1, 2});
    REQUIRE(g.value(loss) == Catch::Approx(std::log(8.0)).margin(1e-12));
}

TEST_CASE("bias-only stub heads reproduce dequantize over all layers", "[resynth]") {
    // RVQ with hand-built codebooks; the stub's head biases always pick
    // the single true index per layer, so inference must reproduce
    // dequantize(truth, upto = N) exactly.
    RvqModel rvq;
    Rng rng(17);
    for (int i = 0; i < 3; ++i) {
        Codebook cb;
        cb.layer_index = i + 1;
        cb.codes = Mat(4, 2);
        for (double& v : cb.codes.data) v = rng.normal();
        rvq.codebooks.push_back(cb);
    }
    const int true_l2 = 3, true_l3 = 1;

    CoarseToFineModel stub;
    stub.num_layers = 3;
    stub.codebook_size = 4;
    stub.dim = 2;
    stub.stage_embed_dim = 4;
    stub.spec.input_dim = (2 * stub.context_radius + 1) * 2;
    stub.spec.hidden_dims = {6};
    stub.spec.output_dim = 4;
    stub.spec.cond_dim = 4;
    Rng init(3);
    stub.trunk = init_mlp(stub.params, stub.spec, "trunk", init, false);
    for (int i = 2; i <= 3; ++i) {
        ParamRef w = stub.params.add("head" + std::to_string(i) + ".W", 4, 6);
        ParamRef b = stub.params.add("head" + std::to_string(i) + ".b", 1, 4);
        stub.params.at(b)[i == 2 ? true_l2 : true_l3] = 100.0; // head W stays zero
        stub.heads.emplace_back(w, b);
    }
    stub.stage_table = stub.params.add("stage.table", 2, 4);

    const std::vector<int> layer1 = {0, 3, 2, 1, 1, 0};
    Rng run(1);
    NfeCounter nfe;
    CodeSequence predicted;
    FrameConfig cfg;
    cfg.frame_size = cfg.hop = cfg.dim = 2;
    const EmbeddingSequence out = infer_coarse_to_fine(stub, layer1, rvq, cfg, DecodeMode::greedy,
                                                       1.0, run, &nfe, &predicted);
    REQUIRE(nfe.count == 2); // N - 1 batched forwards

    CodeSequence truth;
    truth.num_frames = 6;
    truth.num_layers = 3;
    truth.indices.assign(18, 0);
    for (std::size_t l = 0; l < 6; ++l) {
        truth.at(l, 0) = layer1[l];
        truth.at(l, 1) = true_l2;
        truth.at(l, 2) = true_l3;
    }
    REQUIRE(predicted.indices == truth.indices);
    const EmbeddingSequence expect = dequantize(rvq, truth, 3, cfg);
    REQUIRE(out.values.data == expect.values.data);
}

TEST_CASE("greedy decoding is deterministic; tiny temperature matches greedy", "[resynth]") {
    const TinyLab& t = tiny_lab();
    const EmbeddingSequence z = encode_frames(t.eval_wavs[0], t.frame);
    const QuantizeResult q = quantize(t.rvq, z);
    std::vector<int> layer1(q.codes.num_frames);
    for (std::size_t l = 0; l < layer1.size(); ++l) layer1[l] = q.codes.at(l, 0);

    Rng r1(1), r2(2), r3(3);
    CodeSequence g1, g2, s1;
    const EmbeddingSequence a =
        infer_coarse_to_fine(t.c2f, layer1, t.rvq, t.frame, DecodeMode::greedy, 1.0, r1, nullptr, &g1);
    const EmbeddingSequence b =
        infer_coarse_to_fine(t.c2f, layer1, t.rvq, t.frame, DecodeMode::greedy, 1.0, r2, nullptr, &g2);
    REQUIRE(a.values.data == b.values.data);
    REQUIRE(g1.indices == g2.indices);

    infer_coarse_to_fine(t.c2f, layer1, t.rvq, t.frame, DecodeMode::sample, 1e-9, r3, nullptr, &s1);
    REQUIRE(s1.indices == g1.indices);

    Rng r4(4);
    REQUIRE_THROWS_AS(
        infer_coarse_to_fine(t.c2f, layer1, t.rvq, t.frame, DecodeMode::sample, 0.0, r4),
        std::invalid_argument);
}

TEST_CASE("zero-weight one-step model maps to zero in standardized space", "[resynth]") {
    OneStepModel m;
    m.dim = 4;
    m.spec.input_dim = (2 * m.context_radius + 1) * 4;
    m.spec.hidden_dims = {8};
    m.spec.output_dim = 4;
    m.spec.cond_dim = 0;
    Rng init(5);
    m.mlp = init_mlp(m.params, m.spec, "net", init);
    std::fill(m.params.values.begin(), m.params.values.end(), 0.0);
    m.stats.mean.assign(4, 0.0);
    m.stats.std.assign(4, 1.0);

    RvqModel rvq;
    Codebook cb;
    cb.layer_index = 1;
    cb.codes = Mat(3, 4);
    for (std::size_t i = 0; i < cb.codes.size(); ++i) cb.codes.data[i] = 0.1 * static_cast<double>(i);
    rvq.codebooks.push_back(cb);

    FrameConfig cfg;
    cfg.frame_size = cfg.hop = cfg.dim = 4;
    NfeCounter nfe;
    const EmbeddingSequence out = infer_one_step(m, {0, 1, 2, 2}, rvq, cfg, &nfe);
    REQUIRE(nfe.count == 1);
    for (double v : out.values.data) REQUIRE(v == 0.0);
}

TEST_CASE("one-step learns the identity task", "[resynth]") {
    // z == x1 exactly: the loss must approach zero and inference must
    // reproduce the input embeddings
    Rng rng(31);
    std::vector<TrainItem> items;
    for (int u = 0; u < 4; ++u) {
        TrainItem it;
        it.z = Mat(40, 4);
        for (double& v : it.z.data) v = rng.normal();
        it.x1emb = it.z;
        it.codes.num_frames = 40;
        it.codes.num_layers = 1;
        it.codes.indices.assign(40, 0);
        items.push_back(std::move(it));
    }
    double last_loss = 1e9;
    TrainHyper h = tiny_hyper(3e-3, 600, 21);
    h.on_step = [&](int, double, double loss) { last_loss = loss; };
    const OneStepModel m = train_one_step(items, h);
    REQUIRE(last_loss < 0.05);

    const Mat inputs = context_all(m.stats.apply(items[0].x1emb), m.context_radius);
    const Mat pred = m.stats.invert(mlp_eval(m.params, m.spec, m.mlp, inputs, Mat()));
    double rms = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const double d = pred.data[i] - items[0].z.data[i];
        rms += d * d;
    }
    rms = std::sqrt(rms / static_cast<double>(pred.size()));
    REQUIRE(rms < 0.25);
}

TEST_CASE("one-step recovers a linear map (least-squares oracle)", "[resynth]") {
    // z = A x1 with a fixed matrix A: the least-squares fit is exact, so
    // the trained predictor must match the oracle's predictions closely
    // on held-out inputs
    Rng rng(37);
    const std::size_t d = 2;
    Mat A(d, d);
    A(0, 0) = 1.0;
    A(1, 1) = 1.0;
    A(0, 1) = 0.5;

    std::vector<TrainItem> items;
    for (int u = 0; u < 24; ++u) {
        TrainItem it;
        it.x1emb = Mat(128, d);
        for (double& v : it.x1emb.data) v = rng.normal();
        it.z = matmul_nt(it.x1emb, A); // z = x1 * A^T, i.e. z_row = A x1_row
        it.codes.num_frames = 128;
        it.codes.num_layers = 1;
        it.codes.indices.assign(128, 0);
        items.push_back(std::move(it));
    }
    TrainHyper h = tiny_hyper(3e-3, 8000, 23);
    h.batch_utterances = 12;
    h.crop_frames = 16;
    h.hidden_dims = {48, 48};
    h.weight_decay = 0.0;
    const OneStepModel m = train_one_step(items, h);

    Mat probe(256, d);
    for (double& v : probe.data) v = rng.normal();
    const Mat oracle = matmul_nt(probe, A);
    const Mat pred =
        m.stats.invert(mlp_eval(m.params, m.spec, m.mlp, context_all(m.stats.apply(probe), m.context_radius), Mat()));
    double rms = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const double diff = pred.data[i] - oracle.data[i];
        rms += diff * diff;
    }
    rms = std::sqrt(rms / static_cast<double>(pred.size()));
    REQUIRE(rms < 1e-2);
}

TEST_CASE("coarse-to-fine memorizes a single frame", "[resynth]") {
    const TinyLab& t = tiny_lab();
    std::vector<TrainItem> one;
    TrainItem it;
    it.z = detail::slice_rows(t.items[0].z, 0, 1);
    it.x1emb = detail::slice_rows(t.items[0].x1emb, 0, 1);
    it.codes.num_frames = 1;
    it.codes.num_layers = t.items[0].codes.num_layers;
    it.codes.indices.assign(it.codes.num_layers, 0);
    for (std::size_t i = 0; i < it.codes.num_layers; ++i) it.codes.at(0, i) = t.items[0].codes.at(0, i);
    one.push_back(std::move(it));

    TrainHyper h = tiny_hyper(3e-3, 400, 29);
    h.batch_utterances = 2;
    h.crop_frames = 1;
    const CoarseToFineModel m = train_coarse_to_fine(one, t.rvq, h);
    Rng rng(1);
    CodeSequence predicted;
    infer_coarse_to_fine(m, {one[0].codes.at(0, 0)}, t.rvq, t.frame, DecodeMode::greedy, 1.0, rng,
                         nullptr, &predicted);
    const auto acc = code_accuracy(predicted, one[0].codes);
    for (double a : acc) REQUIRE(a == 1.0);
}

TEST_CASE("bridge trained on degenerate pairs returns its input", "[resynth]") {
    Rng rng(41);
    std::vector<TrainItem> items;
    for (int u = 0; u < 4; ++u) {
        TrainItem it;
        it.z = Mat(40, 3);
        for (double& v : it.z.data) v = rng.normal();
        it.x1emb = it.z; // x0 == x1
        it.codes.num_frames = 40;
        it.codes.num_layers = 1;
        it.codes.indices.assign(40, 0);
        items.push_back(std::move(it));
    }
    const NoiseSchedule sched = make_symmetric_schedule(100, 0.3, 1e-4);
    const BridgeModel m = train_bridge(items, sched, 0.3, 1e-4, tiny_hyper(2e-3, 800, 43));

    // backward sampling from a held-out "x1" should come back near it; the
    // analytic optimum for degenerate pairs is the conditional mean x1
    Mat probe(40, 3);
    for (double& v : probe.data) v = rng.normal();
    const Mat probe_std = m.stats.apply(probe);
    Rng run(7);
    const DenoiserFn den = [&](const Mat& x, int k) {
        return bridge_eval(m, x, probe_std, k, sched);
    };
    const Mat est = m.stats.invert(ddpm_backward(den, probe_std, 8, sched, run));
    double err = 0.0, scale = 0.0;
    for (std::size_t i = 0; i < est.size(); ++i) {
        err += (est.data[i] - probe.data[i]) * (est.data[i] - probe.data[i]);
        scale += probe.data[i] * probe.data[i];
    }
    REQUIRE(std::sqrt(err / scale) < 0.35);
}

TEST_CASE("bridge recovers the mean of a shifted Gaussian toy", "[resynth]") {
    // x0 ~ N(mu0, 0.3 I) in 2-D, x1 = x0 + (1.5, -0.5) + noise; the
    // backward sampler must come within 10% of the true x0 mean, which a
    // model that merely echoes x1 would miss by far
    Rng rng(47);
    const double mu0[2] = {2.0, -1.0};
    const double shift[2] = {1.5, -0.5};
    std::vector<TrainItem> items;
    for (int u = 0; u < 6; ++u) {
        TrainItem it;
        it.z = Mat(60, 2);
        it.x1emb = Mat(60, 2);
        for (std::size_t r = 0; r < 60; ++r)
            for (std::size_t c = 0; c < 2; ++c) {
                const double x0v = mu0[c] + 0.3 * rng.normal();
                it.z(r, c) = x0v;
                it.x1emb(r, c) = x0v + shift[c] + 0.1 * rng.normal();
            }
        it.codes.num_frames = 60;
        it.codes.num_layers = 1;
        it.codes.indices.assign(60, 0);
        items.push_back(std::move(it));
    }
    const NoiseSchedule sched = make_symmetric_schedule(100, 0.3, 1e-4);
    const BridgeModel m = train_bridge(items, sched, 0.3, 1e-4, tiny_hyper(2e-3, 1200, 53));

    // held-out pairs from the same joint law
    Mat x1h(200, 2);
    for (std::size_t r = 0; r < 200; ++r)
        for (std::size_t c = 0; c < 2; ++c)
            x1h(r, c) = mu0[c] + 0.3 * rng.normal() + shift[c] + 0.1 * rng.normal();
    const Mat x1s = m.stats.apply(x1h);
    Rng run(3);
    const DenoiserFn den = [&](const Mat& x, int k) { return bridge_eval(m, x, x1s, k, sched); };
    const Mat est = m.stats.invert(ddpm_backward(den, x1s, 8, sched, run));
    double mean[2] = {0, 0};
    for (std::size_t r = 0; r < 200; ++r)
        for (std::size_t c = 0; c < 2; ++c) mean[c] += est(r, c);
    mean[0] /= 200.0;
    mean[1] /= 200.0;
    const double dist = std::hypot(mean[0] - mu0[0], mean[1] - mu0[1]);
    const double norm = std::hypot(mu0[0], mu0[1]);
    REQUIRE(dist <= 0.10 * norm);
}

TEST_CASE("bridge loss decreases over a fixed-seed toy run", "[resynth]") {
    const TinyLab& t = tiny_lab();
    std::vector<double> losses;
    TrainHyper h = tiny_hyper(2e-3, 120, 61);
    h.on_step = [&](int, double, double loss) { losses.push_back(loss); };
    train_bridge(t.items, t.sched, 0.3, 1e-4, h);
    const auto avg = [&](std::size_t from, std::size_t to) {
        double a = 0.0;
        for (std::size_t i = from; i < to; ++i) a += losses[i];
        return a / static_cast<double>(to - from);
    };
    REQUIRE(avg(losses.size() - 20, losses.size()) < avg(0, 20));
}

TEST_CASE("resynthesize audits NFE per method", "[resynth]") {
    const TinyLab& t = tiny_lab();
    const Waveform& w = t.eval_wavs[0];
    const auto base = resynthesize(Method::baseline, w, t.frame, t.rvq, t.bundle(), 0, 1);
    REQUIRE(base.nfe_used == 0);
    const auto c2f = resynthesize(Method::c2f, w, t.frame, t.rvq, t.bundle(), 99, 1);
    REQUIRE(c2f.nfe_used == t.rvq.num_layers() - 1);
    const auto one = resynthesize(Method::onestep, w, t.frame, t.rvq, t.bundle(), 99, 1);
    REQUIRE(one.nfe_used == 1);
    for (int nfe : {1, 5, 16}) {
        const auto br = resynthesize(Method::bridge, w, t.frame, t.rvq, t.bundle(), nfe, 1);
        REQUIRE(br.nfe_used == nfe);
    }
    REQUIRE_THROWS_AS(resynthesize(Method::bridge, w, t.frame, t.rvq, ModelBundle{}, 4, 1),
                      std::invalid_argument);
}

TEST_CASE("resynthesis is deterministic under a fixed seed", "[resynth]") {
    const TinyLab& t = tiny_lab();
    const Waveform& w = t.eval_wavs[1];
    const auto a = resynthesize(Method::bridge, w, t.frame, t.rvq, t.bundle(), 7, 5);
    const auto b = resynthesize(Method::bridge, w, t.frame, t.rvq, t.bundle(), 7, 5);
    REQUIRE(a.wav.samples == b.wav.samples);
    const auto c = resynthesize(Method::bridge, w, t.frame, t.rvq, t.bundle(), 7, 6);
    REQUIRE(a.wav.samples != c.wav.samples);
}

TEST_CASE("baseline resynthesis equals decode of the first layer", "[resynth]") {
    const TinyLab& t = tiny_lab();
    const Waveform& w = t.eval_wavs[0];
    const auto base = resynthesize(Method::baseline, w, t.frame, t.rvq, t.bundle(), 0, 1);
    const EmbeddingSequence z = encode_frames(w, t.frame);
    const QuantizeResult q = quantize(t.rvq, z);
    const Waveform expect = decode_frames(dequantize(t.rvq, q.codes, 1, t.frame), t.frame);
    REQUIRE(base.wav.samples == expect.samples);
}

TEST_CASE("oracle bridge resynthesis reproduces the original waveform", "[resynth]") {
    const TinyLab& t = tiny_lab();
    const Waveform& w = t.eval_wavs[1];
    const EmbeddingSequence z = encode_frames(w, t.frame);
    const QuantizeResult q = quantize(t.rvq, z);
    const EmbeddingSequence x1 = dequantize(t.rvq, q.codes, 1, t.frame);
    const DenoiserFn oracle = [&](const Mat& x, int k) { return sb_target(x, z.values, k, t.sched); };
    for (int nfe : {1, 4, 7}) {
        Rng run(11);
        const Mat est = ddpm_backward(oracle, x1.values, nfe, t.sched, run);
        EmbeddingSequence e;
        e.frame_config = t.frame;
        e.values = est;
        const Waveform out = decode_frames(e, t.frame);
        for (std::size_t i = 0; i < out.samples.size(); ++i)
            REQUIRE(std::fabs(out.samples[i] - w.samples[i]) < 1e-6);
    }
}

TEST_CASE("checkpoints replay to identical inference results", "[resynth]") {
    const TinyLab& t = tiny_lab();
    const auto dir = std::filesystem::temp_directory_path() / "resynlab_tests";
    std::filesystem::create_directories(dir);

    const auto c2f_path = (dir / "c2f.ckpt").string();
    const auto one_path = (dir / "onestep.ckpt").string();
    const auto bridge_path = (dir / "bridge.ckpt").string();
    save_checkpoint(t.c2f, c2f_path);
    save_checkpoint(t.onestep, one_path);
    save_checkpoint(t.bridge, bridge_path);
    REQUIRE(checkpoint_method(c2f_path) == "c2f");
    REQUIRE(checkpoint_method(bridge_path) == "bridge");

    const CoarseToFineModel c1 = load_c2f(c2f_path);
    const OneStepModel o1 = load_one_step(one_path);
    const BridgeModel b1 = load_bridge(bridge_path);
    ModelBundle loaded;
    loaded.c2f = &c1;
    loaded.onestep = &o1;
    loaded.bridge = &b1;

    const Waveform& w = t.eval_wavs[0];
    for (int round = 0; round < 2; ++round) {
        const auto r1 = resynthesize(Method::c2f, w, t.frame, t.rvq, loaded, 0, 9);
        const auto r2 = resynthesize(Method::c2f, w, t.frame, t.rvq, loaded, 0, 9);
        REQUIRE(r1.wav.samples == r2.wav.samples);
        const auto s1 = resynthesize(Method::bridge, w, t.frame, t.rvq, loaded, 4, 9);
        const auto s2 = resynthesize(Method::bridge, w, t.frame, t.rvq, loaded, 4, 9);
        REQUIRE(s1.wav.samples == s2.wav.samples);
        const auto u1 = resynthesize(Method::onestep, w, t.frame, t.rvq, loaded, 0, 9);
        const auto u2 = resynthesize(Method::onestep, w, t.frame, t.rvq, loaded, 0, 9);
        REQUIRE(u1.wav.samples == u2.wav.samples);
    }

    // serialization is idempotent: saving the loaded model reproduces the file
    const auto c2f_path2 = (dir / "c2f_2.ckpt").string();
    save_checkpoint(c1, c2f_path2);
    std::ifstream f1(c2f_path, std::ios::binary), f2(c2f_path2, std::ios::binary);
    const std::string b1s((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
    const std::string b2s((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
    REQUIRE(b1s == b2s);
}

TEST_CASE("training rejects empty or inconsistent datasets", "[resynth]") {
    const TinyLab& t = tiny_lab();
    REQUIRE_THROWS_AS(train_one_step({}, tiny_hyper(1e-3, 10, 1)), std::invalid_argument);
    REQUIRE_THROWS_AS(train_coarse_to_fine({}, t.rvq, tiny_hyper(1e-3, 10, 1)),
                      std::invalid_argument);
    REQUIRE_THROWS_AS(train_bridge({}, t.sched, 0.3, 1e-4, tiny_hyper(1e-3, 10, 1)),
                      std::invalid_argument);
    std::vector<TrainItem> bad = {TrainItem{}};
    bad[0].z = Mat(4, 3);
    bad[0].x1emb = Mat(4, 2);
    REQUIRE_THROWS_AS(train_one_step(bad, tiny_hyper(1e-3, 10, 1)), std::invalid_argument);
}
