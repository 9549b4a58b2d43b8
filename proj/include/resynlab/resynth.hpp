#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "resynlab/bridge.hpp"
#include "resynlab/nnet.hpp"
#include "resynlab/rvq.hpp"
#include "resynlab/transform.hpp"

namespace resynlab {

enum class Method { baseline, c2f, onestep, bridge };

inline Method method_from_string(const std::string& s) {
    if (s == "baseline") return Method::baseline;
    if (s == "c2f") return Method::c2f;
    if (s == "onestep") return Method::onestep;
    if (s == "bridge") return Method::bridge;
    throw std::invalid_argument("unknown method: " + s);
}

inline std::string to_string(Method m) {
    switch (m) {
        case Method::baseline: return "baseline";
        case Method::c2f: return "c2f";
        case Method::onestep: return "onestep";
        default: return "bridge";
    }
}

// Counts batched network forwards; incremented at the evaluation sites so
// reported NFE is audited rather than assumed.
struct NfeCounter {
    long count = 0;
};

// Frames get local context: the row itself plus `radius` neighbors on
// each side, zero-padded at sequence edges.
constexpr int kContextRadius = 2;

inline Mat context_rows(const Mat& seq, const std::vector<std::size_t>& rows, int radius) {
    const std::size_t d = seq.cols;
    const std::size_t w = static_cast<std::size_t>(2 * radius + 1);
    Mat out(rows.size(), w * d);
    for (std::size_t i = 0; i < rows.size(); ++i) {
        double* dst = out.row(i);
        for (int off = -radius; off <= radius; ++off) {
            const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(rows[i]) + off;
            double* slot = dst + static_cast<std::size_t>(off + radius) * d;
            if (src >= 0 && src < static_cast<std::ptrdiff_t>(seq.rows))
                std::copy_n(seq.row(static_cast<std::size_t>(src)), d, slot);
        }
    }
    return out;
}

inline Mat context_all(const Mat& seq, int radius) {
    std::vector<std::size_t> rows(seq.rows);
    for (std::size_t i = 0; i < seq.rows; ++i) rows[i] = i;
    return context_rows(seq, rows, radius);
}

// Per-feature standardization statistics (mean/std over training frames).
struct FeatureStats {
    std::vector<double> mean, std;

    static FeatureStats from_frames(const std::vector<const Mat*>& mats) {
        FeatureStats st;
        if (mats.empty() || mats[0]->cols == 0)
            throw std::invalid_argument("feature stats: empty input");
        const std::size_t d = mats[0]->cols;
        st.mean.assign(d, 0.0);
        st.std.assign(d, 0.0);
        std::size_t n = 0;
        for (const Mat* m : mats) {
            for (std::size_t r = 0; r < m->rows; ++r) {
                const double* p = m->row(r);
                for (std::size_t c = 0; c < d; ++c) st.mean[c] += p[c];
            }
            n += m->rows;
        }
        for (double& v : st.mean) v /= static_cast<double>(n);
        for (const Mat* m : mats)
            for (std::size_t r = 0; r < m->rows; ++r) {
                const double* p = m->row(r);
                for (std::size_t c = 0; c < d; ++c) {
                    const double t = p[c] - st.mean[c];
                    st.std[c] += t * t;
                }
            }
        for (double& v : st.std) v = std::max(std::sqrt(v / static_cast<double>(n)), 1e-6);
        return st;
    }

    Mat apply(const Mat& m) const {
        Mat out = m;
        for (std::size_t r = 0; r < out.rows; ++r) {
            double* p = out.row(r);
            for (std::size_t c = 0; c < out.cols; ++c) p[c] = (p[c] - mean[c]) / std[c];
        }
        return out;
    }

    Mat invert(const Mat& m) const {
        Mat out = m;
        for (std::size_t r = 0; r < out.rows; ++r) {
            double* p = out.row(r);
            for (std::size_t c = 0; c < out.cols; ++c) p[c] = p[c] * std[c] + mean[c];
        }
        return out;
    }
};

// One utterance of paired training material.
struct TrainItem {
    Mat z;       // pre-quantized embeddings [L, d]
    CodeSequence codes;
    Mat x1emb;   // dequantize(upto = 1) [L, d]
};

inline std::vector<TrainItem> prepare_dataset(const std::vector<Waveform>& utterances,
                                              const FrameConfig& cfg, const RvqModel& rvq) {
    std::vector<TrainItem> items;
    items.reserve(utterances.size());
    for (const auto& w : utterances) {
        TrainItem item;
        EmbeddingSequence z = encode_frames(w, cfg);
        QuantizeResult q = quantize(rvq, z);
        item.codes = std::move(q.codes);
        item.x1emb = dequantize(rvq, item.codes, 1, cfg).values;
        item.z = std::move(z.values);
        items.push_back(std::move(item));
    }
    return items;
}

struct TrainHyper {
    int steps = 2000;
    int batch_utterances = 32;
    int crop_frames = 8;
    int warmup_steps = 200;
    double peak_lr = 5e-4;
    double weight_decay = 0.01;
    std::vector<int> hidden_dims = {256, 256, 256, 256};
    int cond_dim = 64; // stage/time embedding width
    std::uint64_t seed = 3;
    // optional per-step observer (step, lr, loss)
    std::function<void(int, double, double)> on_step;
};

namespace detail {

// One random crop: utterance index and frame range.
struct Crop {
    std::size_t item;
    std::size_t start;
    std::size_t len;
};

inline Crop draw_crop(const std::vector<TrainItem>& items, int crop_frames, Rng& rng) {
    Crop c;
    c.item = static_cast<std::size_t>(rng.below(items.size()));
    const std::size_t L = items[c.item].z.rows;
    c.len = std::min<std::size_t>(static_cast<std::size_t>(crop_frames), L);
    c.start = static_cast<std::size_t>(rng.below(L - c.len + 1));
    return c;
}

inline Mat slice_rows(const Mat& m, std::size_t start, std::size_t len) {
    Mat out(len, m.cols);
    for (std::size_t r = 0; r < len; ++r) std::copy_n(m.row(start + r), m.cols, out.row(r));
    return out;
}

inline Mat replicate_row(const std::vector<double>& v, std::size_t rows) {
    Mat out(rows, v.size());
    for (std::size_t r = 0; r < rows; ++r) std::copy(v.begin(), v.end(), out.row(r));
    return out;
}

} // namespace detail

// ---------------------------------------------------------------------------
// Coarse-to-fine: shared conditioned trunk + one logit head per layer 2..N,
// stage identified by a learnable embedding fed through adaptive layer norm.
// ---------------------------------------------------------------------------

struct CoarseToFineModel {
    NetSpec spec;         // trunk; output_dim records the head width V
    int num_layers = 0;   // N
    int codebook_size = 0;
    int dim = 0;
    int context_radius = kContextRadius;
    int stage_embed_dim = 0;
    ParameterSet params;
    MlpLayout trunk;
    std::vector<std::pair<ParamRef, ParamRef>> heads; // (W, b) for layers 2..N
    ParamRef stage_table;                             // [N-1, stage_embed_dim]
    AdamState opt;
    std::uint64_t codec_hash = 0;
};

inline Mat mlp_trunk_eval(const ParameterSet& ps, const NetSpec& spec, const MlpLayout& layout,
                          const Mat& inputs, const Mat& conds) {
    Graph g;
    const int x = g.constant(inputs);
    int cond = -1;
    if (spec.cond_dim > 0) cond = g.constant(conds);
    return g.val(mlp_trunk(g, ps, spec, layout, x, cond));
}

inline CoarseToFineModel train_coarse_to_fine(const std::vector<TrainItem>& items,
                                              const RvqModel& rvq, const TrainHyper& hyper) {
    if (items.empty()) throw std::invalid_argument("train_coarse_to_fine: empty dataset");
    const int N = rvq.num_layers();
    const int V = rvq.codebook_size();
    const int d = rvq.dim();
    if (N < 2) throw std::invalid_argument("train_coarse_to_fine: need at least 2 RVQ layers");
    for (const auto& it : items)
        if (it.z.cols != static_cast<std::size_t>(d) ||
            it.codes.num_layers != static_cast<std::size_t>(N))
            throw std::invalid_argument("train_coarse_to_fine: dataset inconsistent with codec");

    CoarseToFineModel m;
    m.num_layers = N;
    m.codebook_size = V;
    m.dim = d;
    m.stage_embed_dim = hyper.cond_dim;
    m.spec.input_dim = (2 * m.context_radius + 1) * d;
    m.spec.hidden_dims = hyper.hidden_dims;
    m.spec.output_dim = V;
    m.spec.cond_dim = hyper.cond_dim;
    m.spec.activation = Activation::gelu;

    Rng init_rng(seed_combine(hyper.seed, 0xc2f0));
    m.trunk = init_mlp(m.params, m.spec, "trunk", init_rng, /*with_out=*/false);
    const int h_last = m.spec.hidden_dims.back();
    for (int i = 2; i <= N; ++i) {
        ParamRef w = m.params.add("head" + std::to_string(i) + ".W",
                                  static_cast<std::size_t>(V), static_cast<std::size_t>(h_last));
        ParamRef b = m.params.add("head" + std::to_string(i) + ".b", 1, static_cast<std::size_t>(V));
        const double bound = 1.0 / std::sqrt(static_cast<double>(h_last));
        double* p = m.params.at(w);
        for (std::size_t k = 0; k < w.count(); ++k) p[k] = init_rng.uniform(-bound, bound);
        m.heads.emplace_back(w, b);
    }
    m.stage_table = m.params.add("stage.table", static_cast<std::size_t>(N - 1),
                                 static_cast<std::size_t>(hyper.cond_dim));
    {
        double* p = m.params.at(m.stage_table);
        for (std::size_t k = 0; k < m.stage_table.count(); ++k)
            p[k] = init_rng.uniform(-0.5, 0.5);
    }

    m.opt.init(m.params.size());
    AdamHyper ah;
    ah.weight_decay = hyper.weight_decay;
    Rng rng(seed_combine(hyper.seed, 0xc2f1));
    std::vector<double> grads(m.params.size());

    for (int step = 1; step <= hyper.steps; ++step) {
        // assemble one batch of frames with per-frame stages
        std::vector<Mat> input_rows;
        std::vector<int> stages;
        std::vector<int> labels;
        for (int bu = 0; bu < hyper.batch_utterances; ++bu) {
            const auto crop = detail::draw_crop(items, hyper.crop_frames, rng);
            const TrainItem& it = items[crop.item];
            // cumulative code-vector sums for stages 1..N-1 within the crop
            std::vector<Mat> cums(static_cast<std::size_t>(N - 1));
            cums[0] = Mat(crop.len, static_cast<std::size_t>(d));
            for (std::size_t r = 0; r < crop.len; ++r) {
                const int idx = it.codes.at(crop.start + r, 0);
                std::copy_n(rvq.codebooks[0].codes.row(static_cast<std::size_t>(idx)),
                            static_cast<std::size_t>(d), cums[0].row(r));
            }
            for (int i = 1; i < N - 1; ++i) {
                cums[static_cast<std::size_t>(i)] = cums[static_cast<std::size_t>(i - 1)];
                for (std::size_t r = 0; r < crop.len; ++r) {
                    const int idx = it.codes.at(crop.start + r, static_cast<std::size_t>(i));
                    const double* code = rvq.codebooks[static_cast<std::size_t>(i)].codes.row(static_cast<std::size_t>(idx));
                    double* dst = cums[static_cast<std::size_t>(i)].row(r);
                    for (int c = 0; c < d; ++c) dst[static_cast<std::size_t>(c)] += code[c];
                }
            }
            for (std::size_t r = 0; r < crop.len; ++r) {
                const int stage = 2 + static_cast<int>(rng.below(static_cast<std::uint64_t>(N - 1)));
                input_rows.push_back(context_rows(cums[static_cast<std::size_t>(stage - 2)], {r},
                                                  m.context_radius));
                stages.push_back(stage);
                labels.push_back(it.codes.at(crop.start + r, static_cast<std::size_t>(stage - 1)));
            }
        }
        const std::size_t B = input_rows.size();
        Mat inputs(B, static_cast<std::size_t>(m.spec.input_dim));
        for (std::size_t r = 0; r < B; ++r)
            std::copy_n(input_rows[r].row(0), inputs.cols, inputs.row(r));

        Graph g;
        const int in_node = g.constant(std::move(inputs));
        std::vector<std::size_t> stage_rows(B);
        for (std::size_t r = 0; r < B; ++r)
            stage_rows[r] = static_cast<std::size_t>(stages[r] - 2);
        const int cond_node = g.gather_rows(g.param(m.params, m.stage_table), stage_rows);
        const int trunk_out = mlp_trunk(g, m.params, m.spec, m.trunk, in_node, cond_node);

        std::vector<int> loss_nodes;
        std::vector<double> loss_weights;
        for (int i = 2; i <= N; ++i) {
            std::vector<std::size_t> rows;
            std::vector<int> labs;
            for (std::size_t r = 0; r < B; ++r)
                if (stages[r] == i) {
                    rows.push_back(r);
                    labs.push_back(labels[r]);
                }
            if (rows.empty()) continue;
            const auto& [w, b] = m.heads[static_cast<std::size_t>(i - 2)];
            const int sub = g.gather_rows(trunk_out, rows);
            const int logits = g.add_row(g.matmul_nt_node(sub, g.param(m.params, w)),
                                         g.param(m.params, b));
            loss_nodes.push_back(g.xent_loss(logits, std::move(labs)));
            loss_weights.push_back(static_cast<double>(rows.size()) / static_cast<double>(B));
        }
        const int loss = g.weighted_sum(std::move(loss_nodes), std::move(loss_weights));

        std::fill(grads.begin(), grads.end(), 0.0);
        g.backward(loss, grads);
        ah.lr = lr_at(step, hyper.peak_lr, hyper.warmup_steps, hyper.steps);
        adam_step(m.params, grads, m.opt, ah);
        if (hyper.on_step) hyper.on_step(step, ah.lr, g.value(loss));
    }
    return m;
}

enum class DecodeMode { greedy, sample };

// Iterative stage-by-stage prediction of layers 2..N from the layer-1
// codes; returns the dequantized sum over all N layers. One batched trunk
// forward per stage, so NFE = N - 1.
inline EmbeddingSequence infer_coarse_to_fine(const CoarseToFineModel& m,
                                              const std::vector<int>& codes_layer1,
                                              const RvqModel& rvq, const FrameConfig& cfg,
                                              DecodeMode mode, double temperature, Rng& rng,
                                              NfeCounter* nfe = nullptr,
                                              CodeSequence* predicted = nullptr) {
    if (mode == DecodeMode::sample && temperature <= 0.0)
        throw std::invalid_argument("infer_coarse_to_fine: temperature must be positive");
    const int N = m.num_layers;
    const int V = m.codebook_size;
    const std::size_t L = codes_layer1.size();
    const auto d = static_cast<std::size_t>(m.dim);

    CodeSequence codes;
    codes.num_frames = L;
    codes.num_layers = static_cast<std::size_t>(N);
    codes.indices.assign(L * static_cast<std::size_t>(N), 0);

    Mat cum(L, d);
    for (std::size_t l = 0; l < L; ++l) {
        const int idx = codes_layer1[l];
        if (idx < 0 || idx >= V) throw std::out_of_range("infer_coarse_to_fine: invalid layer-1 index");
        codes.at(l, 0) = idx;
        std::copy_n(rvq.codebooks[0].codes.row(static_cast<std::size_t>(idx)), d, cum.row(l));
    }

    std::vector<double> stage_vec(static_cast<std::size_t>(m.stage_embed_dim));
    for (int i = 2; i <= N; ++i) {
        const Mat inputs = context_all(cum, m.context_radius);
        const double* srow = m.params.at(m.stage_table) +
                             static_cast<std::size_t>(i - 2) * stage_vec.size();
        std::copy_n(srow, stage_vec.size(), stage_vec.begin());
        const Mat conds = detail::replicate_row(stage_vec, L);
        const Mat h = mlp_trunk_eval(m.params, m.spec, m.trunk, inputs, conds);
        if (nfe) nfe->count += 1;

        const auto& [wref, bref] = m.heads[static_cast<std::size_t>(i - 2)];
        Mat w(wref.rows, wref.cols);
        std::copy_n(m.params.at(wref), wref.count(), w.data.begin());
        Mat logits = matmul_nt(h, w);
        const double* b = m.params.at(bref);
        for (std::size_t l = 0; l < L; ++l) {
            double* lr = logits.row(l);
            for (int v = 0; v < V; ++v) lr[static_cast<std::size_t>(v)] += b[v];
        }

        for (std::size_t l = 0; l < L; ++l) {
            const double* lr = logits.row(l);
            int choice = 0;
            if (mode == DecodeMode::greedy) {
                for (int v = 1; v < V; ++v)
                    if (lr[static_cast<std::size_t>(v)] > lr[static_cast<std::size_t>(choice)]) choice = v;
            } else {
                double mx = lr[0];
                for (int v = 1; v < V; ++v) mx = std::max(mx, lr[static_cast<std::size_t>(v)]);
                double z = 0.0;
                std::vector<double> p(static_cast<std::size_t>(V));
                for (int v = 0; v < V; ++v) {
                    p[static_cast<std::size_t>(v)] = std::exp((lr[static_cast<std::size_t>(v)] - mx) / temperature);
                    z += p[static_cast<std::size_t>(v)];
                }
                const double u = rng.u01() * z;
                double acc = 0.0;
                choice = V - 1;
                for (int v = 0; v < V; ++v) {
                    acc += p[static_cast<std::size_t>(v)];
                    if (u < acc) { choice = v; break; }
                }
            }
            codes.at(l, static_cast<std::size_t>(i - 1)) = choice;
            const double* code = rvq.codebooks[static_cast<std::size_t>(i - 1)].codes.row(static_cast<std::size_t>(choice));
            double* dst = cum.row(l);
            for (std::size_t c = 0; c < d; ++c) dst[c] += code[c];
        }
    }
    if (predicted) *predicted = codes;
    EmbeddingSequence out;
    out.frame_config = cfg;
    out.values = std::move(cum);
    return out;
}

// ---------------------------------------------------------------------------
// One-step regression x1 -> z in standardized transform space.
// ---------------------------------------------------------------------------

struct OneStepModel {
    NetSpec spec;
    int dim = 0;
    int context_radius = kContextRadius;
    ParameterSet params;
    MlpLayout mlp;
    FeatureStats stats;
    AdamState opt;
    std::uint64_t codec_hash = 0;
};

inline OneStepModel train_one_step(const std::vector<TrainItem>& items, const TrainHyper& hyper) {
    if (items.empty()) throw std::invalid_argument("train_one_step: empty dataset");
    const auto d = items[0].z.cols;
    for (const auto& it : items)
        if (it.z.cols != d || it.x1emb.cols != d || !it.z.same_shape(it.x1emb))
            throw std::invalid_argument("train_one_step: inconsistent pair shapes");

    OneStepModel m;
    m.dim = static_cast<int>(d);
    m.spec.input_dim = (2 * m.context_radius + 1) * static_cast<int>(d);
    m.spec.hidden_dims = hyper.hidden_dims;
    m.spec.output_dim = static_cast<int>(d);
    m.spec.cond_dim = 0;
    m.spec.activation = Activation::gelu;

    std::vector<const Mat*> zs;
    for (const auto& it : items) zs.push_back(&it.z);
    m.stats = FeatureStats::from_frames(zs);

    Rng init_rng(seed_combine(hyper.seed, 0x15e0));
    m.mlp = init_mlp(m.params, m.spec, "net", init_rng);
    m.opt.init(m.params.size());
    AdamHyper ah;
    ah.weight_decay = hyper.weight_decay;
    Rng rng(seed_combine(hyper.seed, 0x15e1));
    std::vector<double> grads(m.params.size());

    for (int step = 1; step <= hyper.steps; ++step) {
        std::vector<Mat> in_blocks, tgt_blocks;
        for (int bu = 0; bu < hyper.batch_utterances; ++bu) {
            const auto crop = detail::draw_crop(items, hyper.crop_frames, rng);
            const TrainItem& it = items[crop.item];
            const Mat x1c = m.stats.apply(detail::slice_rows(it.x1emb, crop.start, crop.len));
            const Mat zc = m.stats.apply(detail::slice_rows(it.z, crop.start, crop.len));
            in_blocks.push_back(context_all(x1c, m.context_radius));
            tgt_blocks.push_back(zc);
        }
        std::size_t B = 0;
        for (const auto& blk : in_blocks) B += blk.rows;
        Mat inputs(B, static_cast<std::size_t>(m.spec.input_dim));
        Mat targets(B, d);
        std::size_t r = 0;
        for (std::size_t blk = 0; blk < in_blocks.size(); ++blk)
            for (std::size_t i = 0; i < in_blocks[blk].rows; ++i, ++r) {
                std::copy_n(in_blocks[blk].row(i), inputs.cols, inputs.row(r));
                std::copy_n(tgt_blocks[blk].row(i), d, targets.row(r));
            }

        Graph g;
        const int pred = mlp_forward_node(g, m.params, m.spec, m.mlp, g.constant(std::move(inputs)), -1);
        const int loss = g.mse_loss(pred, std::move(targets));
        std::fill(grads.begin(), grads.end(), 0.0);
        g.backward(loss, grads);
        ah.lr = lr_at(step, hyper.peak_lr, hyper.warmup_steps, hyper.steps);
        adam_step(m.params, grads, m.opt, ah);
        if (hyper.on_step) hyper.on_step(step, ah.lr, g.value(loss));
    }
    return m;
}

// Single forward pass over the whole sequence; NFE = 1.
inline EmbeddingSequence infer_one_step(const OneStepModel& m, const std::vector<int>& codes_layer1,
                                        const RvqModel& rvq, const FrameConfig& cfg,
                                        NfeCounter* nfe = nullptr) {
    const auto d = static_cast<std::size_t>(m.dim);
    Mat x1(codes_layer1.size(), d);
    for (std::size_t l = 0; l < codes_layer1.size(); ++l) {
        const int idx = codes_layer1[l];
        if (idx < 0 || idx >= rvq.codebook_size())
            throw std::out_of_range("infer_one_step: invalid layer-1 index");
        std::copy_n(rvq.codebooks[0].codes.row(static_cast<std::size_t>(idx)), d, x1.row(l));
    }
    const Mat inputs = context_all(m.stats.apply(x1), m.context_radius);
    const Mat pred = mlp_eval(m.params, m.spec, m.mlp, inputs, Mat());
    if (nfe) nfe->count += 1;
    EmbeddingSequence out;
    out.frame_config = cfg;
    out.values = m.stats.invert(pred);
    return out;
}

// ---------------------------------------------------------------------------
// Bridge denoiser: predicts the scaled noise at (x_t, t) conditioned on x1
// (projected and added to the input) with a sinusoidal time embedding fed
// through adaptive layer norm. Operates in standardized transform space.
// ---------------------------------------------------------------------------

struct BridgeModel {
    NetSpec spec;
    int dim = 0;
    int context_radius = kContextRadius;
    int time_embed_dim = 0;
    ParameterSet params;
    MlpLayout mlp;
    ParamRef cond_w, cond_b; // x1-context projection added to the input
    FeatureStats stats;
    int schedule_T = 0;
    double beta_peak = 0.3;
    double beta_min = 1e-4;
    AdamState opt;
    std::uint64_t codec_hash = 0;

    NoiseSchedule schedule() const { return make_symmetric_schedule(schedule_T, beta_peak, beta_min); }
};

// Builds the denoiser prediction node for standardized inputs; the x1
// projection participates in the graph so its weights receive gradients.
inline int bridge_forward_node(Graph& g, const BridgeModel& m, const Mat& x_t_std,
                               const Mat& x1_std, int k, const NoiseSchedule& sched) {
    const int in = g.constant(context_all(x_t_std, m.context_radius));
    const int x1n = g.constant(context_all(x1_std, m.context_radius));
    const int proj = g.add_row(g.matmul_nt_node(x1n, g.param(m.params, m.cond_w)),
                               g.param(m.params, m.cond_b));
    const int x = g.add(in, proj);
    const Mat cond = detail::replicate_row(time_embedding(sched.t_of(k), m.time_embed_dim), x_t_std.rows);
    return mlp_forward_node(g, m.params, m.spec, m.mlp, x, g.constant(cond));
}

// Projected x1 context; constant across backward steps, so inference
// computes it once.
inline Mat bridge_x1_projection(const BridgeModel& m, const Mat& x1_std) {
    Mat w(m.cond_w.rows, m.cond_w.cols);
    std::copy_n(m.params.at(m.cond_w), m.cond_w.count(), w.data.begin());
    Mat proj = matmul_nt(context_all(x1_std, m.context_radius), w);
    const double* b = m.params.at(m.cond_b);
    for (std::size_t r = 0; r < proj.rows; ++r) {
        double* pr = proj.row(r);
        for (std::size_t c = 0; c < proj.cols; ++c) pr[c] += b[c];
    }
    return proj;
}

inline Mat bridge_eval(const BridgeModel& m, const Mat& x_t_std, const Mat& x1_std, int k,
                       const NoiseSchedule& sched, NfeCounter* nfe = nullptr) {
    Graph g;
    const int pred = bridge_forward_node(g, m, x_t_std, x1_std, k, sched);
    if (nfe) nfe->count += 1;
    return g.val(pred);
}

inline Mat bridge_eval_preprojected(const BridgeModel& m, const Mat& x_t_std, const Mat& x1_proj,
                                    int k, const NoiseSchedule& sched, NfeCounter* nfe = nullptr) {
    Graph g;
    const int x = g.add(g.constant(context_all(x_t_std, m.context_radius)), g.constant(x1_proj));
    const Mat cond = detail::replicate_row(time_embedding(sched.t_of(k), m.time_embed_dim), x_t_std.rows);
    const int pred = mlp_forward_node(g, m.params, m.spec, m.mlp, x, g.constant(cond));
    if (nfe) nfe->count += 1;
    return g.val(pred);
}

inline BridgeModel train_bridge(const std::vector<TrainItem>& items, const NoiseSchedule& sched,
                                double beta_peak, double beta_min, const TrainHyper& hyper) {
    if (items.empty()) throw std::invalid_argument("train_bridge: empty dataset");
    const auto d = items[0].z.cols;
    for (const auto& it : items)
        if (it.z.cols != d || !it.z.same_shape(it.x1emb))
            throw std::invalid_argument("train_bridge: inconsistent pair shapes");

    BridgeModel m;
    m.dim = static_cast<int>(d);
    m.time_embed_dim = hyper.cond_dim;
    m.spec.input_dim = (2 * m.context_radius + 1) * static_cast<int>(d);
    m.spec.hidden_dims = hyper.hidden_dims;
    m.spec.output_dim = static_cast<int>(d);
    m.spec.cond_dim = hyper.cond_dim;
    m.spec.activation = Activation::gelu;
    m.schedule_T = sched.T;
    m.beta_peak = beta_peak;
    m.beta_min = beta_min;

    std::vector<const Mat*> zs;
    for (const auto& it : items) zs.push_back(&it.z);
    m.stats = FeatureStats::from_frames(zs);

    Rng init_rng(seed_combine(hyper.seed, 0xb51d0));
    m.mlp = init_mlp(m.params, m.spec, "net", init_rng);
    m.cond_w = m.params.add("cond.W", static_cast<std::size_t>(m.spec.input_dim),
                            static_cast<std::size_t>(m.spec.input_dim));
    m.cond_b = m.params.add("cond.b", 1, static_cast<std::size_t>(m.spec.input_dim));
    {
        const double bound = 1.0 / std::sqrt(static_cast<double>(m.spec.input_dim));
        double* p = m.params.at(m.cond_w);
        for (std::size_t i = 0; i < m.cond_w.count(); ++i) p[i] = init_rng.uniform(-bound, bound);
    }

    m.opt.init(m.params.size());
    AdamHyper ah;
    ah.weight_decay = hyper.weight_decay;
    Rng rng(seed_combine(hyper.seed, 0xb51d1));
    std::vector<double> grads(m.params.size());

    for (int step = 1; step <= hyper.steps; ++step) {
        // one graph per step: the batch of per-pair sb_loss draws (one t
        // per pair, bridge-marginal x_t, scaled-noise target) is stacked
        // row-wise, which evaluates the same batch-mean objective
        std::vector<Mat> xt_blocks, x1_blocks, tgt_blocks;
        std::vector<int> ks;
        std::vector<std::size_t> block_rows;
        const int B = hyper.batch_utterances;
        for (int bu = 0; bu < B; ++bu) {
            const auto crop = detail::draw_crop(items, hyper.crop_frames, rng);
            const TrainItem& it = items[crop.item];
            const Mat x0 = m.stats.apply(detail::slice_rows(it.z, crop.start, crop.len));
            const Mat x1 = m.stats.apply(detail::slice_rows(it.x1emb, crop.start, crop.len));
            const int k = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(sched.T)));
            const Mat x_t = sample_xt(x0, x1, k, sched, rng);
            tgt_blocks.push_back(sb_target(x_t, x0, k, sched));
            xt_blocks.push_back(context_all(x_t, m.context_radius));
            x1_blocks.push_back(context_all(x1, m.context_radius));
            ks.push_back(k);
            block_rows.push_back(crop.len);
        }
        std::size_t rows = 0;
        for (std::size_t r : block_rows) rows += r;
        Mat xt_in(rows, static_cast<std::size_t>(m.spec.input_dim));
        Mat x1_in(rows, static_cast<std::size_t>(m.spec.input_dim));
        Mat targets(rows, d);
        Mat conds(rows, static_cast<std::size_t>(m.time_embed_dim));
        std::size_t at = 0;
        for (std::size_t p = 0; p < block_rows.size(); ++p) {
            const auto emb = time_embedding(sched.t_of(ks[p]), m.time_embed_dim);
            for (std::size_t r = 0; r < block_rows[p]; ++r, ++at) {
                std::copy_n(xt_blocks[p].row(r), xt_in.cols, xt_in.row(at));
                std::copy_n(x1_blocks[p].row(r), x1_in.cols, x1_in.row(at));
                std::copy_n(tgt_blocks[p].row(r), d, targets.row(at));
                std::copy(emb.begin(), emb.end(), conds.row(at));
            }
        }

        Graph g;
        const int proj = g.add_row(g.matmul_nt_node(g.constant(std::move(x1_in)),
                                                    g.param(m.params, m.cond_w)),
                                   g.param(m.params, m.cond_b));
        const int x = g.add(g.constant(std::move(xt_in)), proj);
        const int pred = mlp_forward_node(g, m.params, m.spec, m.mlp, x, g.constant(std::move(conds)));
        const int loss = g.mse_loss(pred, std::move(targets));
        std::fill(grads.begin(), grads.end(), 0.0);
        g.backward(loss, grads);
        ah.lr = lr_at(step, hyper.peak_lr, hyper.warmup_steps, hyper.steps);
        adam_step(m.params, grads, m.opt, ah);
        if (hyper.on_step) hyper.on_step(step, ah.lr, g.value(loss));
    }
    return m;
}

// DDPM backward traversal from the layer-1 embedding toward z; NFE equals
// the requested step count.
inline EmbeddingSequence infer_bridge(const BridgeModel& m, const std::vector<int>& codes_layer1,
                                      const RvqModel& rvq, const FrameConfig& cfg, int nfe_steps,
                                      Rng& rng, NfeCounter* nfe = nullptr) {
    const auto d = static_cast<std::size_t>(m.dim);
    Mat x1(codes_layer1.size(), d);
    for (std::size_t l = 0; l < codes_layer1.size(); ++l) {
        const int idx = codes_layer1[l];
        if (idx < 0 || idx >= rvq.codebook_size())
            throw std::out_of_range("infer_bridge: invalid layer-1 index");
        std::copy_n(rvq.codebooks[0].codes.row(static_cast<std::size_t>(idx)), d, x1.row(l));
    }
    const NoiseSchedule sched = m.schedule();
    const Mat x1s = m.stats.apply(x1);
    const Mat x1_proj = bridge_x1_projection(m, x1s);
    const DenoiserFn denoiser = [&](const Mat& x, int k) {
        return bridge_eval_preprojected(m, x, x1_proj, k, sched, nfe);
    };
    const Mat x0s = ddpm_backward(denoiser, x1s, nfe_steps, sched, rng);
    EmbeddingSequence out;
    out.frame_config = cfg;
    out.values = m.stats.invert(x0s);
    return out;
}

// ---------------------------------------------------------------------------
// Full resynthesis pipeline: encode -> quantize -> keep layer-1 codes ->
// method-specific embedding estimate -> decode.
// ---------------------------------------------------------------------------

struct ModelBundle {
    const CoarseToFineModel* c2f = nullptr;
    const OneStepModel* onestep = nullptr;
    const BridgeModel* bridge = nullptr;
};

struct ResynthResult {
    Waveform wav;
    EmbeddingSequence z_hat;
    int nfe_used = 0;
    Method method = Method::baseline;
};

inline ResynthResult resynthesize(Method method, const Waveform& wav, const FrameConfig& cfg,
                                  const RvqModel& rvq, const ModelBundle& models, int nfe_steps,
                                  std::uint64_t seed) {
    const EmbeddingSequence z = encode_frames(wav, cfg);
    const QuantizeResult q = quantize(rvq, z);
    std::vector<int> layer1(q.codes.num_frames);
    for (std::size_t l = 0; l < q.codes.num_frames; ++l) layer1[l] = q.codes.at(l, 0);

    ResynthResult res;
    res.method = method;
    NfeCounter counter;
    Rng rng(seed_combine(seed, 0x7e5f));
    switch (method) {
        case Method::baseline: {
            CodeSequence c1;
            c1.num_frames = q.codes.num_frames;
            c1.num_layers = 1;
            c1.indices = layer1;
            res.z_hat = dequantize(rvq, c1, 1, cfg);
            break;
        }
        case Method::c2f: {
            if (!models.c2f) throw std::invalid_argument("resynthesize: c2f model missing");
            res.z_hat = infer_coarse_to_fine(*models.c2f, layer1, rvq, cfg, DecodeMode::greedy,
                                             1.0, rng, &counter);
            break;
        }
        case Method::onestep: {
            if (!models.onestep) throw std::invalid_argument("resynthesize: onestep model missing");
            res.z_hat = infer_one_step(*models.onestep, layer1, rvq, cfg, &counter);
            break;
        }
        case Method::bridge: {
            if (!models.bridge) throw std::invalid_argument("resynthesize: bridge model missing");
            if (nfe_steps < 1) throw std::invalid_argument("resynthesize: bridge needs nfe >= 1");
            res.z_hat = infer_bridge(*models.bridge, layer1, rvq, cfg, nfe_steps, rng, &counter);
            break;
        }
    }
    res.nfe_used = static_cast<int>(counter.count);
    res.wav = decode_frames(res.z_hat, cfg);
    return res;
}

// ---------------------------------------------------------------------------
// Checkpoints: "RLCKP001", method, codec hash, net spec, method extras,
// parameter block with optimizer moments.
// ---------------------------------------------------------------------------

namespace detail {

inline void write_netspec(std::ostream& os, const NetSpec& s) {
    put_u32(os, static_cast<std::uint32_t>(s.input_dim));
    put_u32(os, static_cast<std::uint32_t>(s.hidden_dims.size()));
    for (int h : s.hidden_dims) put_u32(os, static_cast<std::uint32_t>(h));
    put_u32(os, static_cast<std::uint32_t>(s.output_dim));
    put_u32(os, static_cast<std::uint32_t>(s.cond_dim));
    put_string(os, to_string(s.activation));
}

inline NetSpec read_netspec(std::istream& is) {
    NetSpec s;
    s.input_dim = static_cast<int>(get_u32(is));
    const std::uint32_t nh = get_u32(is);
    for (std::uint32_t i = 0; i < nh; ++i) s.hidden_dims.push_back(static_cast<int>(get_u32(is)));
    s.output_dim = static_cast<int>(get_u32(is));
    s.cond_dim = static_cast<int>(get_u32(is));
    s.activation = activation_from_string(get_string(is));
    return s;
}

inline void write_stats(std::ostream& os, const FeatureStats& st) {
    put_u32(os, static_cast<std::uint32_t>(st.mean.size()));
    for (double v : st.mean) put_f64(os, v);
    for (double v : st.std) put_f64(os, v);
}

inline FeatureStats read_stats(std::istream& is) {
    FeatureStats st;
    const std::uint32_t n = get_u32(is);
    st.mean.resize(n);
    st.std.resize(n);
    for (double& v : st.mean) v = get_f64(is);
    for (double& v : st.std) v = get_f64(is);
    return st;
}

} // namespace detail

inline std::string checkpoint_method(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("checkpoint: cannot open " + path);
    expect_magic(f, "RLCKP001");
    return get_string(f);
}

inline void save_checkpoint(const CoarseToFineModel& m, const std::string& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("save_checkpoint: cannot open " + path);
    f.write("RLCKP001", 8);
    put_string(f, "c2f");
    put_u64(f, m.codec_hash);
    detail::write_netspec(f, m.spec);
    put_u32(f, static_cast<std::uint32_t>(m.num_layers));
    put_u32(f, static_cast<std::uint32_t>(m.codebook_size));
    put_u32(f, static_cast<std::uint32_t>(m.dim));
    put_u32(f, static_cast<std::uint32_t>(m.context_radius));
    put_u32(f, static_cast<std::uint32_t>(m.stage_embed_dim));
    write_params(f, m.params, m.opt);
    if (!f) throw std::runtime_error("save_checkpoint: write failed");
}

inline CoarseToFineModel load_c2f(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("load_c2f: cannot open " + path);
    expect_magic(f, "RLCKP001");
    if (get_string(f) != "c2f") throw std::runtime_error("load_c2f: wrong method tag");
    CoarseToFineModel m;
    m.codec_hash = get_u64(f);
    m.spec = detail::read_netspec(f);
    m.num_layers = static_cast<int>(get_u32(f));
    m.codebook_size = static_cast<int>(get_u32(f));
    m.dim = static_cast<int>(get_u32(f));
    m.context_radius = static_cast<int>(get_u32(f));
    m.stage_embed_dim = static_cast<int>(get_u32(f));
    read_params(f, m.params, m.opt);
    m.trunk = find_mlp(m.params, m.spec, "trunk", /*with_out=*/false);
    for (int i = 2; i <= m.num_layers; ++i)
        m.heads.emplace_back(m.params.find("head" + std::to_string(i) + ".W"),
                             m.params.find("head" + std::to_string(i) + ".b"));
    m.stage_table = m.params.find("stage.table");
    return m;
}

inline void save_checkpoint(const OneStepModel& m, const std::string& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("save_checkpoint: cannot open " + path);
    f.write("RLCKP001", 8);
    put_string(f, "onestep");
    put_u64(f, m.codec_hash);
    detail::write_netspec(f, m.spec);
    put_u32(f, static_cast<std::uint32_t>(m.dim));
    put_u32(f, static_cast<std::uint32_t>(m.context_radius));
    detail::write_stats(f, m.stats);
    write_params(f, m.params, m.opt);
    if (!f) throw std::runtime_error("save_checkpoint: write failed");
}

inline OneStepModel load_one_step(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("load_one_step: cannot open " + path);
    expect_magic(f, "RLCKP001");
    if (get_string(f) != "onestep") throw std::runtime_error("load_one_step: wrong method tag");
    OneStepModel m;
    m.codec_hash = get_u64(f);
    m.spec = detail::read_netspec(f);
    m.dim = static_cast<int>(get_u32(f));
    m.context_radius = static_cast<int>(get_u32(f));
    m.stats = detail::read_stats(f);
    read_params(f, m.params, m.opt);
    m.mlp = find_mlp(m.params, m.spec, "net");
    return m;
}

inline void save_checkpoint(const BridgeModel& m, const std::string& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("save_checkpoint: cannot open " + path);
    f.write("RLCKP001", 8);
    put_string(f, "bridge");
    put_u64(f, m.codec_hash);
    detail::write_netspec(f, m.spec);
    put_u32(f, static_cast<std::uint32_t>(m.dim));
    put_u32(f, static_cast<std::uint32_t>(m.context_radius));
    put_u32(f, static_cast<std::uint32_t>(m.time_embed_dim));
    detail::write_stats(f, m.stats);
    put_u32(f, static_cast<std::uint32_t>(m.schedule_T));
    put_f64(f, m.beta_peak);
    put_f64(f, m.beta_min);
    write_params(f, m.params, m.opt);
    if (!f) throw std::runtime_error("save_checkpoint: write failed");
}

inline BridgeModel load_bridge(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("load_bridge: cannot open " + path);
    expect_magic(f, "RLCKP001");
    if (get_string(f) != "bridge") throw std::runtime_error("load_bridge: wrong method tag");
    BridgeModel m;
    m.codec_hash = get_u64(f);
    m.spec = detail::read_netspec(f);
    m.dim = static_cast<int>(get_u32(f));
    m.context_radius = static_cast<int>(get_u32(f));
    m.time_embed_dim = static_cast<int>(get_u32(f));
    m.stats = detail::read_stats(f);
    m.schedule_T = static_cast<int>(get_u32(f));
    m.beta_peak = get_f64(f);
    m.beta_min = get_f64(f);
    read_params(f, m.params, m.opt);
    m.mlp = find_mlp(m.params, m.spec, "net");
    m.cond_w = m.params.find("cond.W");
    m.cond_b = m.params.find("cond.b");
    return m;
}

} // namespace resynlab
