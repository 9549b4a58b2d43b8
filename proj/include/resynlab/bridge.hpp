#pragma once

#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "resynlab/autodiff.hpp"
#include "resynlab/mat.hpp"
#include "resynlab/rng.hpp"

namespace resynlab {

// Discretized diffusion schedule on the grid t in {0, 1/T, ..., 1}.
// beta[k-1] is the rate on ((k-1)/T, k/T]; sigma2[k] accumulates beta/T
// so sigma2[k] + sigma2_bar[k] == sigma2[T] holds exactly by construction.
struct NoiseSchedule {
    int T = 0;
    std::vector<double> beta;       // T entries, interval rates
    std::vector<double> sigma2;     // T+1 entries, sigma^2(k/T)
    std::vector<double> sigma2_bar; // T+1 entries, sigma^2(1) - sigma^2(k/T)

    double t_of(int k) const { return static_cast<double>(k) / T; }

    void check_grid(int k) const {
        if (k < 0 || k > T) throw std::out_of_range("schedule: grid index out of range");
    }
};

// Triangular beta: beta_min at the ends, beta_peak at t = 1/2, evaluated
// at interval midpoints and mirrored so beta[k] == beta[T+1-k] bitwise.
inline NoiseSchedule make_symmetric_schedule(int T, double beta_peak = 0.3, double beta_min = 1e-4) {
    if (T < 2) throw std::invalid_argument("make_symmetric_schedule: T must be >= 2");
    if (beta_min < 0 || beta_min > beta_peak)
        throw std::invalid_argument("make_symmetric_schedule: need 0 <= beta_min <= beta_peak");

    NoiseSchedule s;
    s.T = T;
    s.beta.resize(static_cast<std::size_t>(T));
    for (int k = 1; k <= (T + 1) / 2; ++k) {
        const double m = (static_cast<double>(k) - 0.5) / T; // interval midpoint, <= 1/2
        const double b = beta_min + (beta_peak - beta_min) * (2.0 * m);
        s.beta[static_cast<std::size_t>(k - 1)] = b;
        s.beta[static_cast<std::size_t>(T - k)] = b;
    }
    s.sigma2.resize(static_cast<std::size_t>(T) + 1);
    s.sigma2[0] = 0.0;
    for (int k = 1; k <= T; ++k)
        s.sigma2[static_cast<std::size_t>(k)] =
            s.sigma2[static_cast<std::size_t>(k - 1)] + s.beta[static_cast<std::size_t>(k - 1)] / T;
    s.sigma2_bar.resize(static_cast<std::size_t>(T) + 1);
    const double total = s.sigma2[static_cast<std::size_t>(T)];
    for (int k = 0; k <= T; ++k)
        s.sigma2_bar[static_cast<std::size_t>(k)] = total - s.sigma2[static_cast<std::size_t>(k)];
    return s;
}

// Constant-rate variant, mostly for tests and closed-form checks.
inline NoiseSchedule make_constant_schedule(int T, double beta) {
    return make_symmetric_schedule(T, beta, beta);
}

// Draw from the analytic bridge marginal
//   x_t ~ N( (sb/(sb+st)) x0 + (st/(sb+st)) x1, (st*sb/(sb+st)) I )
// with st = sigma^2(t), sb = sigma_bar^2(t). Endpoints are returned
// bitwise (the variance coefficient is exactly zero there).
inline Mat sample_xt(const Mat& x0, const Mat& x1, int k, const NoiseSchedule& sched, Rng& rng) {
    check_same_shape(x0, x1, "sample_xt");
    sched.check_grid(k);
    const double st = sched.sigma2[static_cast<std::size_t>(k)];
    const double sb = sched.sigma2_bar[static_cast<std::size_t>(k)];
    const double denom = st + sb;
    if (denom <= 0.0) {
        // degenerate all-zero schedule; the bridge is pinned to x0 = x1
        return x0;
    }
    const double w0 = sb / denom;
    const double w1 = st / denom;
    const double var = st * sb / denom;
    if (var == 0.0 && w1 == 0.0) return x0;
    if (var == 0.0 && w0 == 0.0) return x1;
    Mat out(x0.rows, x0.cols);
    const double sd = std::sqrt(var);
    for (std::size_t i = 0; i < out.size(); ++i)
        out.data[i] = w0 * x0.data[i] + w1 * x1.data[i] + sd * rng.normal();
    return out;
}

// Regression target (x_t - x0) / sigma_t of the tractable bridge loss.
inline Mat sb_target(const Mat& x_t, const Mat& x0, int k, const NoiseSchedule& sched) {
    check_same_shape(x_t, x0, "sb_target");
    sched.check_grid(k);
    if (k == 0) throw std::invalid_argument("sb_target: undefined at t = 0");
    const double st = sched.sigma2[static_cast<std::size_t>(k)];
    if (st <= 0.0) throw std::invalid_argument("sb_target: sigma_t is zero, target undefined");
    const double inv = 1.0 / std::sqrt(st);
    Mat out(x_t.rows, x_t.cols);
    for (std::size_t i = 0; i < out.size(); ++i)
        out.data[i] = (x_t.data[i] - x0.data[i]) * inv;
    return out;
}

// One stochastic evaluation of the bridge training loss. The denoiser is
// supplied as a graph builder (x_t, grid index) -> prediction node, so
// the caller controls the network and its conditioning on x1.
struct SbLossEval {
    Graph graph;
    int loss_node = -1;
    double value = 0.0;
    int k = 0;
    Mat x_t;
};

template <typename BuildDenoiser>
SbLossEval sb_loss(BuildDenoiser&& build, const Mat& x0, const Mat& x1,
                   const NoiseSchedule& sched, Rng& rng) {
    check_same_shape(x0, x1, "sb_loss");
    SbLossEval ev;
    ev.k = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(sched.T)));
    ev.x_t = sample_xt(x0, x1, ev.k, sched, rng);
    Mat target = sb_target(ev.x_t, x0, ev.k, sched);
    const int pred = build(ev.graph, ev.x_t, ev.k);
    ev.loss_node = ev.graph.mse_loss(pred, std::move(target));
    ev.value = ev.graph.value(ev.loss_node);
    return ev;
}

// Denoiser for inference: predicts the scaled noise at (x, grid time k).
using DenoiserFn = std::function<Mat(const Mat& x, int k)>;

// DDPM-style backward traversal of the bridge from x1 toward x0 with
// `nfe` uniformly subsampled grid steps. For each step t -> s:
//   x0_hat = x - sigma(t) * eps(x, t)
//   x ~ N( (a2 * x0_hat + sigma^2(s) * x) / sigma^2(t),
//          sigma^2(s) * a2 / sigma^2(t) * I ),  a2 = sigma^2(t) - sigma^2(s)
// The final step (s = 0) has zero variance and returns the last x0_hat.
// If `trace` is given, the state after each step is appended as (k, x).
inline Mat ddpm_backward(const DenoiserFn& denoiser, const Mat& x1, int nfe,
                         const NoiseSchedule& sched, Rng& rng,
                         std::vector<std::pair<int, Mat>>* trace = nullptr) {
    if (nfe < 1 || nfe > sched.T)
        throw std::invalid_argument("ddpm_backward: nfe must be in [1, T]");
    Mat x = x1;
    if (trace) trace->push_back({sched.T, x});
    for (int j = nfe; j >= 1; --j) {
        const int t = static_cast<int>((static_cast<std::int64_t>(j) * sched.T) / nfe);
        const int s = static_cast<int>((static_cast<std::int64_t>(j - 1) * sched.T) / nfe);
        const double st2 = sched.sigma2[static_cast<std::size_t>(t)];
        const double ss2 = sched.sigma2[static_cast<std::size_t>(s)];
        const double a2 = st2 - ss2;
        const Mat eps = denoiser(x, t);
        check_same_shape(eps, x, "ddpm_backward denoiser output");
        if (a2 <= 0.0) {
            // beta vanished on this span; the state is unchanged
            if (trace) trace->push_back({s, x});
            continue;
        }
        const double sigma_t = std::sqrt(st2);
        Mat x0_hat(x.rows, x.cols);
        for (std::size_t i = 0; i < x.size(); ++i)
            x0_hat.data[i] = x.data[i] - sigma_t * eps.data[i];
        if (s == 0) {
            x = std::move(x0_hat);
        } else {
            const double ca = a2 / st2;
            const double cx = ss2 / st2;
            const double sd = std::sqrt(ss2 * a2 / st2);
            for (std::size_t i = 0; i < x.size(); ++i)
                x.data[i] = ca * x0_hat.data[i] + cx * x.data[i] + sd * rng.normal();
        }
        if (trace) trace->push_back({s, x});
    }
    return x;
}

// CSV dump for inspection: k, t, beta (interval ending at k), sigma2,
// sigma2_bar. Row k = 0 reports beta 0.
inline void write_schedule_csv(const NoiseSchedule& sched, const std::string& path) {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("write_schedule_csv: cannot open " + path);
    f << "k,t,beta,sigma2,sigma2_bar\n";
    char buf[160];
    for (int k = 0; k <= sched.T; ++k) {
        const double b = (k == 0) ? 0.0 : sched.beta[static_cast<std::size_t>(k - 1)];
        std::snprintf(buf, sizeof buf, "%d,%.12g,%.12g,%.12g,%.12g\n", k, sched.t_of(k), b,
                      sched.sigma2[static_cast<std::size_t>(k)],
                      sched.sigma2_bar[static_cast<std::size_t>(k)]);
        f << buf;
    }
}

} // namespace resynlab
