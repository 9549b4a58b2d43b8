#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "resynlab/mat.hpp"

namespace resynlab {

// Flat parameter vector plus a layout map (name -> offset/shape). The
// layout covers the vector exactly and in order.
struct ParamRef {
    std::string name;
    std::size_t offset = 0;
    std::size_t rows = 0;
    std::size_t cols = 0;

    std::size_t count() const { return rows * cols; }
};

struct ParameterSet {
    std::vector<double> values;
    std::vector<ParamRef> layout;

    ParamRef add(const std::string& name, std::size_t rows, std::size_t cols) {
        ParamRef ref{name, values.size(), rows, cols};
        values.resize(values.size() + rows * cols, 0.0);
        layout.push_back(ref);
        return ref;
    }

    const ParamRef& find(const std::string& name) const {
        for (const auto& r : layout)
            if (r.name == name) return r;
        throw std::out_of_range("parameter not found: " + name);
    }

    double* at(const ParamRef& ref) { return values.data() + ref.offset; }
    const double* at(const ParamRef& ref) const { return values.data() + ref.offset; }
    std::size_t size() const { return values.size(); }
};

enum class Activation { gelu, tanh, identity };

inline Activation activation_from_string(const std::string& s) {
    if (s == "gelu") return Activation::gelu;
    if (s == "tanh") return Activation::tanh;
    if (s == "identity") return Activation::identity;
    throw std::invalid_argument("unknown activation: " + s);
}

inline std::string to_string(Activation a) {
    switch (a) {
        case Activation::gelu: return "gelu";
        case Activation::tanh: return "tanh";
        default: return "identity";
    }
}

// Reverse-mode tape over matrix-valued nodes. Values are computed eagerly
// as nodes are created; backward() walks the tape in reverse and
// accumulates parameter gradients into a flat vector aligned with the
// ParameterSet.
class Graph {
    enum class Op {
        constant, param, matmul_nt, add_row, add, mul,
        act_gelu, act_tanh, layer_norm, gather_rows, mse_loss, xent_loss,
        weighted_sum
    };

    struct Node {
        Op op;
        std::vector<int> in;
        Mat val;
        Mat grad;
        // op-specific payloads
        ParamRef pref;
        std::vector<std::size_t> rows_idx;
        std::vector<int> labels;
        std::vector<double> weights;
        Mat aux; // softmax probs / layer-norm cache
        double eps = 0.0;
    };

public:
    int constant(Mat m) { return push(Op::constant, {}, std::move(m)); }

    int param(const ParameterSet& ps, const ParamRef& ref) {
        Mat m(ref.rows, ref.cols);
        std::copy_n(ps.at(ref), ref.count(), m.data.begin());
        const int id = push(Op::param, {}, std::move(m));
        nodes_[static_cast<std::size_t>(id)].pref = ref;
        return id;
    }

    // x [B,in] * w [out,in]^T -> [B,out]
    int matmul_nt_node(int x, int w) {
        Mat y = matmul_nt(val(x), val(w));
        return push(Op::matmul_nt, {x, w}, std::move(y));
    }

    // broadcast row bias: x [B,n] + b [1,n]
    int add_row(int x, int b) {
        const Mat& xv = val(x);
        const Mat& bv = val(b);
        if (bv.rows != 1 || bv.cols != xv.cols)
            throw std::invalid_argument("add_row: bias shape mismatch");
        Mat y = xv;
        for (std::size_t r = 0; r < y.rows; ++r) {
            double* yr = y.row(r);
            for (std::size_t c = 0; c < y.cols; ++c) yr[c] += bv.data[c];
        }
        return push(Op::add_row, {x, b}, std::move(y));
    }

    int add(int a, int b) {
        const Mat& av = val(a);
        const Mat& bv = val(b);
        check_same_shape(av, bv, "graph add");
        Mat y = av;
        for (std::size_t i = 0; i < y.size(); ++i) y.data[i] += bv.data[i];
        return push(Op::add, {a, b}, std::move(y));
    }

    int mul(int a, int b) {
        const Mat& av = val(a);
        const Mat& bv = val(b);
        check_same_shape(av, bv, "graph mul");
        Mat y = av;
        for (std::size_t i = 0; i < y.size(); ++i) y.data[i] *= bv.data[i];
        return push(Op::mul, {a, b}, std::move(y));
    }

    int activation(int x, Activation a) {
        if (a == Activation::identity) return x;
        const Mat& xv = val(x);
        Mat y = xv;
        if (a == Activation::gelu) {
            for (double& v : y.data) v = gelu(v);
            return push(Op::act_gelu, {x}, std::move(y));
        }
        for (double& v : y.data) v = std::tanh(v);
        return push(Op::act_tanh, {x}, std::move(y));
    }

    // per-row zero mean, unit variance over features
    int layer_norm(int x, double eps) {
        const Mat& xv = val(x);
        Mat y(xv.rows, xv.cols);
        Mat cache(xv.rows, 1); // 1/sqrt(var+eps) per row
        for (std::size_t r = 0; r < xv.rows; ++r) {
            const double* xr = xv.row(r);
            double mean = 0.0;
            for (std::size_t c = 0; c < xv.cols; ++c) mean += xr[c];
            mean /= static_cast<double>(xv.cols);
            double var = 0.0;
            for (std::size_t c = 0; c < xv.cols; ++c) {
                const double t = xr[c] - mean;
                var += t * t;
            }
            var /= static_cast<double>(xv.cols);
            const double istd = 1.0 / std::sqrt(var + eps);
            cache(r, 0) = istd;
            double* yr = y.row(r);
            for (std::size_t c = 0; c < xv.cols; ++c) yr[c] = (xr[c] - mean) * istd;
        }
        const int id = push(Op::layer_norm, {x}, std::move(y));
        nodes_[static_cast<std::size_t>(id)].aux = std::move(cache);
        nodes_[static_cast<std::size_t>(id)].eps = eps;
        return id;
    }

    int gather_rows(int x, std::vector<std::size_t> idx) {
        const Mat& xv = val(x);
        Mat y(idx.size(), xv.cols);
        for (std::size_t i = 0; i < idx.size(); ++i) {
            if (idx[i] >= xv.rows) throw std::out_of_range("gather_rows: row index out of range");
            std::copy_n(xv.row(idx[i]), xv.cols, y.row(i));
        }
        const int id = push(Op::gather_rows, {x}, std::move(y));
        nodes_[static_cast<std::size_t>(id)].rows_idx = std::move(idx);
        return id;
    }

    // mean over all entries of (pred - target)^2
    int mse_loss(int pred, Mat target) {
        const Mat& pv = val(pred);
        check_same_shape(pv, target, "mse_loss");
        double acc = 0.0;
        for (std::size_t i = 0; i < pv.size(); ++i) {
            const double t = pv.data[i] - target.data[i];
            acc += t * t;
        }
        Mat s(1, 1);
        s(0, 0) = acc / static_cast<double>(pv.size());
        const int id = push(Op::mse_loss, {pred}, std::move(s));
        nodes_[static_cast<std::size_t>(id)].aux = std::move(target);
        return id;
    }

    // mean over rows of -log softmax(logits)[label]
    int xent_loss(int logits, std::vector<int> labels) {
        const Mat& lv = val(logits);
        if (labels.size() != lv.rows) throw std::invalid_argument("xent_loss: label count mismatch");
        Mat probs(lv.rows, lv.cols);
        double loss = 0.0;
        for (std::size_t r = 0; r < lv.rows; ++r) {
            const double* xr = lv.row(r);
            double m = xr[0];
            for (std::size_t c = 1; c < lv.cols; ++c) m = std::max(m, xr[c]);
            double z = 0.0;
            for (std::size_t c = 0; c < lv.cols; ++c) z += std::exp(xr[c] - m);
            const double logz = std::log(z) + m;
            double* pr = probs.row(r);
            for (std::size_t c = 0; c < lv.cols; ++c) pr[c] = std::exp(xr[c] - logz);
            const int lab = labels[r];
            if (lab < 0 || static_cast<std::size_t>(lab) >= lv.cols)
                throw std::out_of_range("xent_loss: label out of range");
            loss -= xr[static_cast<std::size_t>(lab)] - logz;
        }
        Mat s(1, 1);
        s(0, 0) = loss / static_cast<double>(lv.rows);
        const int id = push(Op::xent_loss, {logits}, std::move(s));
        nodes_[static_cast<std::size_t>(id)].labels = std::move(labels);
        nodes_[static_cast<std::size_t>(id)].aux = std::move(probs);
        return id;
    }

    int weighted_sum(std::vector<int> scalars, std::vector<double> weights) {
        if (scalars.size() != weights.size() || scalars.empty())
            throw std::invalid_argument("weighted_sum: bad arity");
        double acc = 0.0;
        for (std::size_t i = 0; i < scalars.size(); ++i) acc += weights[i] * value(scalars[i]);
        Mat s(1, 1);
        s(0, 0) = acc;
        const int id = push(Op::weighted_sum, std::move(scalars), std::move(s));
        nodes_[static_cast<std::size_t>(id)].weights = std::move(weights);
        return id;
    }

    const Mat& val(int id) const { return nodes_[check(id)].val; }
    double value(int id) const {
        const Mat& m = val(id);
        if (m.size() != 1) throw std::logic_error("value(): not a scalar node");
        return m.data[0];
    }

    // Reverse pass from a scalar loss node; parameter gradients are
    // accumulated into grad_out (sized like the ParameterSet).
    void backward(int loss, std::vector<double>& grad_out) {
        for (auto& n : nodes_) {
            n.grad = Mat(n.val.rows, n.val.cols);
        }
        Node& ln = nodes_[check(loss)];
        if (ln.val.size() != 1) throw std::logic_error("backward: loss must be scalar");
        ln.grad(0, 0) = 1.0;

        for (int id = static_cast<int>(nodes_.size()) - 1; id >= 0; --id) {
            Node& n = nodes_[static_cast<std::size_t>(id)];
            switch (n.op) {
                case Op::constant:
                    break;
                case Op::param: {
                    if (grad_out.size() < n.pref.offset + n.pref.count())
                        throw std::logic_error("backward: gradient vector too small");
                    double* g = grad_out.data() + n.pref.offset;
                    for (std::size_t i = 0; i < n.grad.size(); ++i) g[i] += n.grad.data[i];
                    break;
                }
                case Op::matmul_nt: {
                    Node& x = nodes_[static_cast<std::size_t>(n.in[0])];
                    Node& w = nodes_[static_cast<std::size_t>(n.in[1])];
                    accumulate(x.grad, matmul(n.grad, w.val));    // [B,out]*[out,in]
                    accumulate(w.grad, matmul_tn(n.grad, x.val)); // [out,B]*[B,in]
                    break;
                }
                case Op::add_row: {
                    Node& x = nodes_[static_cast<std::size_t>(n.in[0])];
                    Node& b = nodes_[static_cast<std::size_t>(n.in[1])];
                    accumulate(x.grad, n.grad);
                    for (std::size_t r = 0; r < n.grad.rows; ++r) {
                        const double* gr = n.grad.row(r);
                        for (std::size_t c = 0; c < n.grad.cols; ++c) b.grad.data[c] += gr[c];
                    }
                    break;
                }
                case Op::add: {
                    accumulate(nodes_[static_cast<std::size_t>(n.in[0])].grad, n.grad);
                    accumulate(nodes_[static_cast<std::size_t>(n.in[1])].grad, n.grad);
                    break;
                }
                case Op::mul: {
                    Node& a = nodes_[static_cast<std::size_t>(n.in[0])];
                    Node& b = nodes_[static_cast<std::size_t>(n.in[1])];
                    for (std::size_t i = 0; i < n.grad.size(); ++i) {
                        a.grad.data[i] += n.grad.data[i] * b.val.data[i];
                        b.grad.data[i] += n.grad.data[i] * a.val.data[i];
                    }
                    break;
                }
                case Op::act_gelu: {
                    Node& x = nodes_[static_cast<std::size_t>(n.in[0])];
                    for (std::size_t i = 0; i < n.grad.size(); ++i)
                        x.grad.data[i] += n.grad.data[i] * gelu_grad(x.val.data[i]);
                    break;
                }
                case Op::act_tanh: {
                    Node& x = nodes_[static_cast<std::size_t>(n.in[0])];
                    for (std::size_t i = 0; i < n.grad.size(); ++i)
                        x.grad.data[i] += n.grad.data[i] * (1.0 - n.val.data[i] * n.val.data[i]);
                    break;
                }
                case Op::layer_norm: {
                    Node& x = nodes_[static_cast<std::size_t>(n.in[0])];
                    const std::size_t C = n.val.cols;
                    for (std::size_t r = 0; r < n.val.rows; ++r) {
                        const double istd = n.aux(r, 0);
                        const double* y = n.val.row(r);
                        const double* dy = n.grad.row(r);
                        double mdy = 0.0, mdyy = 0.0;
                        for (std::size_t c = 0; c < C; ++c) {
                            mdy += dy[c];
                            mdyy += dy[c] * y[c];
                        }
                        mdy /= static_cast<double>(C);
                        mdyy /= static_cast<double>(C);
                        double* dx = x.grad.row(r);
                        for (std::size_t c = 0; c < C; ++c)
                            dx[c] += istd * (dy[c] - mdy - y[c] * mdyy);
                    }
                    break;
                }
                case Op::gather_rows: {
                    Node& x = nodes_[static_cast<std::size_t>(n.in[0])];
                    for (std::size_t i = 0; i < n.rows_idx.size(); ++i) {
                        double* dst = x.grad.row(n.rows_idx[i]);
                        const double* src = n.grad.row(i);
                        for (std::size_t c = 0; c < n.grad.cols; ++c) dst[c] += src[c];
                    }
                    break;
                }
                case Op::mse_loss: {
                    Node& p = nodes_[static_cast<std::size_t>(n.in[0])];
                    const double scale = 2.0 * n.grad(0, 0) / static_cast<double>(p.val.size());
                    for (std::size_t i = 0; i < p.val.size(); ++i)
                        p.grad.data[i] += scale * (p.val.data[i] - n.aux.data[i]);
                    break;
                }
                case Op::xent_loss: {
                    Node& l = nodes_[static_cast<std::size_t>(n.in[0])];
                    const double scale = n.grad(0, 0) / static_cast<double>(l.val.rows);
                    for (std::size_t r = 0; r < l.val.rows; ++r) {
                        const double* pr = n.aux.row(r);
                        double* gr = l.grad.row(r);
                        for (std::size_t c = 0; c < l.val.cols; ++c) gr[c] += scale * pr[c];
                        gr[static_cast<std::size_t>(n.labels[r])] -= scale;
                    }
                    break;
                }
                case Op::weighted_sum: {
                    for (std::size_t i = 0; i < n.in.size(); ++i)
                        nodes_[static_cast<std::size_t>(n.in[i])].grad(0, 0) +=
                            n.grad(0, 0) * n.weights[i];
                    break;
                }
            }
        }
    }

    static double gelu(double x) {
        const double c = 0.7978845608028653558798921198687; // sqrt(2/pi)
        const double u = c * (x + 0.044715 * x * x * x);
        return 0.5 * x * (1.0 + std::tanh(u));
    }

    static double gelu_grad(double x) {
        const double c = 0.7978845608028653558798921198687;
        const double u = c * (x + 0.044715 * x * x * x);
        const double th = std::tanh(u);
        const double du = c * (1.0 + 3.0 * 0.044715 * x * x);
        return 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du;
    }

private:
    std::size_t check(int id) const {
        if (id < 0 || static_cast<std::size_t>(id) >= nodes_.size())
            throw std::out_of_range("graph: bad node id");
        return static_cast<std::size_t>(id);
    }

    static void accumulate(Mat& dst, const Mat& src) {
        for (std::size_t i = 0; i < dst.size(); ++i) dst.data[i] += src.data[i];
    }

    int push(Op op, std::vector<int> in, Mat val) {
        Node n;
        n.op = op;
        n.in = std::move(in);
        n.val = std::move(val);
        nodes_.push_back(std::move(n));
        return static_cast<int>(nodes_.size()) - 1;
    }

    std::vector<Node> nodes_;
};

} // namespace resynlab
