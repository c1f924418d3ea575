#pragma once

// Small deterministic neural-net engine on Eigen. Single-threaded, explicit
// backprop, templated on scalar so tests can instantiate double-precision
// networks for finite-difference checks while runs use float.

#include <Eigen/Dense>
#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "cldl/rng.hpp"

namespace cldl {

template <class T>
using MatX = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using VecX = Eigen::Matrix<T, Eigen::Dynamic, 1>;

// ---------------------------------------------------------------------------
// Parameter storage: one flat array, named segments, matching gradient array.

template <class T>
class ParamStore {
  public:
    struct Segment {
        std::string name;
        std::size_t offset;
        int rows, cols;
        double init_std;  // 0 -> zeros; < 0 -> constant(-init_std)
    };

    // Segments start on 64-byte boundaries and the backing store is aligned,
    // so Eigen kernel peeling (and therefore rounding) cannot depend on where
    // the allocator happened to place the buffer.
    std::size_t add(const std::string& name, int rows, int cols, double init_std) {
        constexpr std::size_t align = 64 / sizeof(T);
        total_ = (total_ + align - 1) / align * align;
        Segment s{name, total_, rows, cols, init_std};
        segs_.push_back(s);
        total_ += std::size_t(rows) * cols;
        return s.offset;
    }

    void allocate() {
        values.assign(total_, T(0));
        grads.assign(total_, T(0));
    }

    void init(Rng& rng) {
        for (const auto& s : segs_) {
            T* p = values.data() + s.offset;
            std::size_t n = std::size_t(s.rows) * s.cols;
            if (s.init_std > 0.0) {
                for (std::size_t i = 0; i < n; ++i) p[i] = T(rng.normal() * s.init_std);
            } else if (s.init_std < 0.0) {
                for (std::size_t i = 0; i < n; ++i) p[i] = T(-s.init_std);
            }  // else zeros
        }
    }

    Eigen::Map<MatX<T>> mat(std::size_t off, int r, int c) {
        return Eigen::Map<MatX<T>>(values.data() + off, r, c);
    }
    Eigen::Map<const MatX<T>> mat(std::size_t off, int r, int c) const {
        return Eigen::Map<const MatX<T>>(values.data() + off, r, c);
    }
    Eigen::Map<MatX<T>> gmat(std::size_t off, int r, int c) {
        return Eigen::Map<MatX<T>>(grads.data() + off, r, c);
    }

    void zero_grad() { std::fill(grads.begin(), grads.end(), T(0)); }
    std::size_t size() const { return total_; }
    std::size_t logical_size() const {
        std::size_t n = 0;
        for (const auto& s : segs_) n += std::size_t(s.rows) * s.cols;
        return n;
    }
    const std::vector<Segment>& segments() const { return segs_; }

    std::vector<T, Eigen::aligned_allocator<T>> values, grads;

  private:
    std::vector<Segment> segs_;
    std::size_t total_ = 0;
};

// ---------------------------------------------------------------------------
// Layer primitives. Activations are row-major matrices; spatial tensors use
// rows = n*h*w (example-major) and cols = channels.

namespace nnops {

template <class T>
T sigmoid(T x) {
    return T(1) / (T(1) + std::exp(-x));
}

template <class T>
void silu_forward(const MatX<T>& x, MatX<T>& y) {
    y = x.unaryExpr([](T v) { return v * sigmoid(v); });
}

template <class T>
void silu_backward(const MatX<T>& x, const MatX<T>& dy, MatX<T>& dx) {
    dx = dy.binaryExpr(x, [](T g, T v) {
        T s = sigmoid(v);
        return g * s * (T(1) + v * (T(1) - s));
    });
}

// im2col for a 3x3 kernel with zero padding 1, one batch of examples.
// x: [n*h*w, c] -> cols: [n*h*w, 9c], column block k holds neighbor k.
template <class T>
void im2col3x3(const MatX<T>& x, int n, int h, int w, MatX<T>& cols) {
    const int c = int(x.cols());
    cols.resize(std::int64_t(n) * h * w, 9 * c);
    for (int ex = 0; ex < n; ++ex) {
        const std::int64_t base = std::int64_t(ex) * h * w;
        for (int k = 0; k < 9; ++k) {
            const int dh = k / 3 - 1, dw = k % 3 - 1;
            auto block = cols.middleCols(k * c, c);
            for (int i = 0; i < h; ++i) {
                const int si = i + dh;
                if (si < 0 || si >= h) {
                    block.middleRows(base + std::int64_t(i) * w, w).setZero();
                    continue;
                }
                const int j0 = std::max(0, -dw), j1 = std::min(w, w - dw);
                if (j0 > 0) block.middleRows(base + std::int64_t(i) * w, j0).setZero();
                if (j1 < w) block.middleRows(base + std::int64_t(i) * w + j1, w - j1).setZero();
                if (j1 > j0)
                    block.middleRows(base + std::int64_t(i) * w + j0, j1 - j0) =
                        x.middleRows(base + std::int64_t(si) * w + j0 + dw, j1 - j0);
            }
        }
    }
}

// Scatter of column gradients back to input positions (transpose of im2col).
template <class T>
void col2im3x3(const MatX<T>& dcols, int n, int h, int w, int c, MatX<T>& dx) {
    dx.setZero(std::int64_t(n) * h * w, c);
    for (int ex = 0; ex < n; ++ex) {
        const std::int64_t base = std::int64_t(ex) * h * w;
        for (int k = 0; k < 9; ++k) {
            const int dh = k / 3 - 1, dw = k % 3 - 1;
            auto block = dcols.middleCols(k * c, c);
            // output pixel (i,j) read input (i+dh, j+dw); gather per input row
            for (int i = 0; i < h; ++i) {
                const int oi = i - dh;
                if (oi < 0 || oi >= h) continue;
                const int j0 = std::max(0, dw), j1 = std::min(w, w + dw);
                if (j1 > j0)
                    dx.middleRows(base + std::int64_t(i) * w + j0, j1 - j0) +=
                        block.middleRows(base + std::int64_t(oi) * w + j0 - dw, j1 - j0);
            }
        }
    }
}

template <class T>
struct Conv3x3 {
    int cin = 0, cout = 0;
    std::size_t w_off = 0, b_off = 0;

    void reg(ParamStore<T>& ps, const std::string& name, int cin_, int cout_,
             bool zero_init = false) {
        cin = cin_;
        cout = cout_;
        double std = zero_init ? 0.0 : 1.0 / std::sqrt(9.0 * cin_);
        w_off = ps.add(name + ".w", 9 * cin_, cout_, std);
        b_off = ps.add(name + ".b", 1, cout_, 0.0);
    }

    void forward(ParamStore<T>& ps, const MatX<T>& x, int n, int h, int w, MatX<T>& y,
                 MatX<T>& scratch) const {
        im2col3x3(x, n, h, w, scratch);
        y.noalias() = scratch * ps.mat(w_off, 9 * cin, cout);
        y.rowwise() += ps.mat(b_off, 1, cout).row(0);
    }

    // dx may be null when input gradient is not needed (first layer).
    void backward(ParamStore<T>& ps, const MatX<T>& x, const MatX<T>& dy, int n, int h, int w,
                  MatX<T>* dx, MatX<T>& scratch) const {
        im2col3x3(x, n, h, w, scratch);
        ps.gmat(w_off, 9 * cin, cout).noalias() += scratch.transpose() * dy;
        ps.gmat(b_off, 1, cout).row(0) += dy.colwise().sum();
        if (dx) {
            scratch.noalias() = dy * ps.mat(w_off, 9 * cin, cout).transpose();
            col2im3x3(scratch, n, h, w, cin, *dx);
        }
    }
};

template <class T>
struct Dense {
    int din = 0, dout = 0;
    std::size_t w_off = 0, b_off = 0;

    void reg(ParamStore<T>& ps, const std::string& name, int din_, int dout_) {
        din = din_;
        dout = dout_;
        w_off = ps.add(name + ".w", din_, dout_, 1.0 / std::sqrt(double(din_)));
        b_off = ps.add(name + ".b", 1, dout_, 0.0);
    }

    void forward(ParamStore<T>& ps, const MatX<T>& x, MatX<T>& y) const {
        y.noalias() = x * ps.mat(w_off, din, dout);
        y.rowwise() += ps.mat(b_off, 1, dout).row(0);
    }

    void backward(ParamStore<T>& ps, const MatX<T>& x, const MatX<T>& dy, MatX<T>* dx) const {
        ps.gmat(w_off, din, dout).noalias() += x.transpose() * dy;
        ps.gmat(b_off, 1, dout).row(0) += dy.colwise().sum();
        if (dx) dx->noalias() = dy * ps.mat(w_off, din, dout).transpose();
    }
};

// Group normalization with a single group per example (whole-layer stats),
// per-channel affine. rows_per_example = h*w for spatial maps, 1 for vectors.
template <class T>
struct GroupNorm {
    int channels = 0;
    std::size_t g_off = 0, b_off = 0;
    static constexpr double kEps = 1e-5;

    void reg(ParamStore<T>& ps, const std::string& name, int channels_) {
        channels = channels_;
        g_off = ps.add(name + ".gamma", 1, channels_, -1.0);  // constant 1
        b_off = ps.add(name + ".beta", 1, channels_, 0.0);
    }

    void forward(ParamStore<T>& ps, const MatX<T>& x, int n, int rpe, MatX<T>& y,
                 std::vector<T>& mu, std::vector<T>& inv) const {
        mu.resize(n);
        inv.resize(n);
        y.resize(x.rows(), x.cols());
        auto gamma = ps.mat(g_off, 1, channels).row(0);
        auto beta = ps.mat(b_off, 1, channels).row(0);
        const double m = double(rpe) * channels;
        for (int ex = 0; ex < n; ++ex) {
            auto xb = x.middleRows(std::int64_t(ex) * rpe, rpe);
            double mean = xb.template cast<double>().sum() / m;
            double var = (xb.template cast<double>().array() - mean).square().sum() / m;
            T iv = T(1.0 / std::sqrt(var + kEps));
            mu[ex] = T(mean);
            inv[ex] = iv;
            auto yb = y.middleRows(std::int64_t(ex) * rpe, rpe);
            yb = ((xb.array() - T(mean)) * iv).matrix();
            yb.array().rowwise() *= gamma.array();
            yb.rowwise() += beta;
        }
    }

    void backward(ParamStore<T>& ps, const MatX<T>& x, const MatX<T>& dy, int n, int rpe,
                  const std::vector<T>& mu, const std::vector<T>& inv, MatX<T>& dx) const {
        dx.resize(x.rows(), x.cols());
        auto gamma = ps.mat(g_off, 1, channels).row(0);
        auto dgamma = ps.gmat(g_off, 1, channels).row(0);
        auto dbeta = ps.gmat(b_off, 1, channels).row(0);
        const double m = double(rpe) * channels;
        MatX<T> xhat, gy;
        for (int ex = 0; ex < n; ++ex) {
            auto xb = x.middleRows(std::int64_t(ex) * rpe, rpe);
            auto dyb = dy.middleRows(std::int64_t(ex) * rpe, rpe);
            xhat = ((xb.array() - mu[ex]) * inv[ex]).matrix();
            dbeta += dyb.colwise().sum();
            dgamma += (dyb.array() * xhat.array()).matrix().colwise().sum();
            gy = dyb;
            gy.array().rowwise() *= gamma.array();
            double m1 = gy.template cast<double>().sum() / m;
            double m2 = (gy.array() * xhat.array()).template cast<double>().sum() / m;
            dx.middleRows(std::int64_t(ex) * rpe, rpe) =
                ((gy.array() - T(m1) - xhat.array() * T(m2)) * inv[ex]).matrix();
        }
    }
};

template <class T>
void avgpool2_forward(const MatX<T>& x, int n, int h, int w, MatX<T>& y) {
    const int c = int(x.cols()), h2 = h / 2, w2 = w / 2;
    y.resize(std::int64_t(n) * h2 * w2, c);
    for (int ex = 0; ex < n; ++ex)
        for (int i = 0; i < h2; ++i)
            for (int j = 0; j < w2; ++j) {
                std::int64_t src = std::int64_t(ex) * h * w + std::int64_t(2 * i) * w + 2 * j;
                y.row(std::int64_t(ex) * h2 * w2 + std::int64_t(i) * w2 + j) =
                    T(0.25) * (x.row(src) + x.row(src + 1) + x.row(src + w) + x.row(src + w + 1));
            }
}

template <class T>
void avgpool2_backward(const MatX<T>& dy, int n, int h, int w, int c, MatX<T>& dx) {
    const int h2 = h / 2, w2 = w / 2;
    dx.resize(std::int64_t(n) * h * w, c);
    for (int ex = 0; ex < n; ++ex)
        for (int i = 0; i < h; ++i)
            for (int j = 0; j < w; ++j)
                dx.row(std::int64_t(ex) * h * w + std::int64_t(i) * w + j) =
                    T(0.25) * dy.row(std::int64_t(ex) * h2 * w2 + std::int64_t(i / 2) * w2 + j / 2);
}

template <class T>
void upsample2_forward(const MatX<T>& x, int n, int h, int w, MatX<T>& y) {
    const int c = int(x.cols()), h2 = h * 2, w2 = w * 2;
    y.resize(std::int64_t(n) * h2 * w2, c);
    for (int ex = 0; ex < n; ++ex)
        for (int i = 0; i < h2; ++i)
            for (int j = 0; j < w2; ++j)
                y.row(std::int64_t(ex) * h2 * w2 + std::int64_t(i) * w2 + j) =
                    x.row(std::int64_t(ex) * h * w + std::int64_t(i / 2) * w + j / 2);
}

template <class T>
void upsample2_backward(const MatX<T>& dy, int n, int h, int w, int c, MatX<T>& dx) {
    const int h2 = h * 2, w2 = w * 2;
    dx.setZero(std::int64_t(n) * h * w, c);
    for (int ex = 0; ex < n; ++ex)
        for (int i = 0; i < h2; ++i)
            for (int j = 0; j < w2; ++j)
                dx.row(std::int64_t(ex) * h * w + std::int64_t(i / 2) * w + j / 2) +=
                    dy.row(std::int64_t(ex) * h2 * w2 + std::int64_t(i) * w2 + j);
}

// Per-example embedding injection: y = x + broadcast(e * W + b) over the
// example's spatial rows.
template <class T>
struct Inject {
    Dense<T> proj;

    void reg(ParamStore<T>& ps, const std::string& name, int emb, int channels) {
        proj.reg(ps, name, emb, channels);
    }

    void forward(ParamStore<T>& ps, MatX<T>& x, const MatX<T>& e, int n, int rpe,
                 MatX<T>& proj_out) const {
        proj.forward(ps, e, proj_out);
        for (int ex = 0; ex < n; ++ex)
            x.middleRows(std::int64_t(ex) * rpe, rpe).rowwise() += proj_out.row(ex);
    }

    // accumulates embedding gradient into de; dy flows through x unchanged
    void backward(ParamStore<T>& ps, const MatX<T>& e, const MatX<T>& dy, int n, int rpe,
                  MatX<T>& de) const {
        MatX<T> dproj(n, proj.dout);
        for (int ex = 0; ex < n; ++ex)
            dproj.row(ex) = dy.middleRows(std::int64_t(ex) * rpe, rpe).colwise().sum();
        MatX<T> de_local;
        proj.backward(ps, e, dproj, &de_local);
        de += de_local;
    }
};

}  // namespace nnops

// ---------------------------------------------------------------------------
// Noise-predictor interface consumed by the diffusion math.

template <class T>
class NoisePredictor {
  public:
    virtual ~NoisePredictor() = default;

    virtual int input_dim() const = 0;     // flattened image size
    virtual int n_conditions() const = 0;  // one-hot length

    // x: [n, input_dim], ts: 1-based timestep per example, cond: [n, n_conditions]
    virtual void forward(const MatX<T>& x, const std::vector<int>& ts, const MatX<T>& cond,
                         MatX<T>& eps_out) = 0;
    // Accumulates parameter gradients for the most recent forward pass.
    virtual void backward(const MatX<T>& grad_eps) = 0;

    virtual std::span<T> parameters() = 0;
    virtual std::span<const T> parameters() const = 0;
    virtual std::span<T> gradients() = 0;
    virtual void zero_grad() = 0;
    virtual std::string architecture_id() const = 0;
};

// Immutable copy of a predictor's parameters.
template <class T>
struct ParameterSnapshot {
    std::vector<T> values;
    std::string architecture_id;
    std::int64_t step_index = 0;
    int task_index = 0;
};

template <class T>
ParameterSnapshot<T> snapshot(const NoisePredictor<T>& model, std::int64_t step = 0, int task = 0) {
    auto p = model.parameters();
    return ParameterSnapshot<T>{std::vector<T>(p.begin(), p.end()), model.architecture_id(), step,
                                task};
}

template <class T>
void restore(NoisePredictor<T>& model, const ParameterSnapshot<T>& snap) {
    if (snap.architecture_id != model.architecture_id())
        throw std::runtime_error("restore: architecture mismatch");
    auto p = model.parameters();
    if (p.size() != snap.values.size()) throw std::runtime_error("restore: size mismatch");
    std::copy(snap.values.begin(), snap.values.end(), p.begin());
}

template <class T>
double l2_distance_sq(const NoisePredictor<T>& model, const ParameterSnapshot<T>& snap) {
    if (snap.architecture_id != model.architecture_id())
        throw std::runtime_error("l2_distance_sq: architecture mismatch");
    auto p = model.parameters();
    if (p.size() != snap.values.size()) throw std::runtime_error("l2_distance_sq: size mismatch");
    double acc = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        double d = double(p[i]) - double(snap.values[i]);
        acc += d * d;
    }
    return acc;
}

// ---------------------------------------------------------------------------
// Conditional U-Net style noise predictor: two conv levels around a dense
// bottleneck, sinusoidal timestep embedding plus learned task embedding
// injected per block.

struct ArchConfig {
    int height = 28, width = 28;
    int base_width = 32;
    int emb_dim = 64;
    int mlp_hidden = 256;
    int n_conditions = 5;
    int time_freqs = 16;  // sinusoidal dims = 2*time_freqs

    bool operator==(const ArchConfig&) const = default;

    std::string id() const {
        return "unet2(h=" + std::to_string(height) + ",w=" + std::to_string(width) +
               ",base=" + std::to_string(base_width) + ",emb=" + std::to_string(emb_dim) +
               ",mlp=" + std::to_string(mlp_hidden) + ",cond=" + std::to_string(n_conditions) +
               ",tf=" + std::to_string(time_freqs) + ")";
    }
};

template <class T>
class UNet : public NoisePredictor<T> {
  public:
    explicit UNet(const ArchConfig& cfg) : cfg_(cfg) {
        if (cfg.height % 4 != 0 || cfg.width % 4 != 0)
            throw std::runtime_error("UNet: height/width must be divisible by 4");
        if (cfg.base_width < 1 || cfg.emb_dim < 1 || cfg.mlp_hidden < 1 || cfg.n_conditions < 1 ||
            cfg.time_freqs < 1)
            throw std::runtime_error("UNet: invalid architecture descriptor");
        const int w = cfg.base_width, e = cfg.emb_dim;
        h1_ = cfg.height;
        w1_ = cfg.width;
        h2_ = h1_ / 2;
        w2_ = w1_ / 2;
        h3_ = h2_ / 2;
        w3_ = w2_ / 2;
        zdim_ = 2 * w * h3_ * w3_;

        temb0_.reg(ps_, "temb0", 2 * cfg.time_freqs, e);
        temb1_.reg(ps_, "temb1", e, e);
        cemb_.reg(ps_, "cemb", cfg.n_conditions, e);

        enc1_.reg(ps_, "enc1", 1, w);
        gn1_.reg(ps_, "gn1", w);
        inj1_.reg(ps_, "inj1", e, w);
        enc2_.reg(ps_, "enc2", w, 2 * w);
        gn2_.reg(ps_, "gn2", 2 * w);
        inj2_.reg(ps_, "inj2", e, 2 * w);
        fc1_.reg(ps_, "fc1", zdim_, cfg.mlp_hidden);
        ln1_.reg(ps_, "ln1", cfg.mlp_hidden);
        injm_.reg(ps_, "injm", e, cfg.mlp_hidden);
        fc2_.reg(ps_, "fc2", cfg.mlp_hidden, zdim_);
        ln2_.reg(ps_, "ln2", zdim_);
        dec2_.reg(ps_, "dec2", 4 * w, w);
        gn3_.reg(ps_, "gn3", w);
        inj3_.reg(ps_, "inj3", e, w);
        dec1_.reg(ps_, "dec1", 2 * w, w);
        gn4_.reg(ps_, "gn4", w);
        inj4_.reg(ps_, "inj4", e, w);
        out_.reg(ps_, "out", w, 1, /*zero_init=*/true);

        ps_.allocate();
    }

    void init_params(Rng& rng) { ps_.init(rng); }

    int input_dim() const override { return h1_ * w1_; }
    int n_conditions() const override { return cfg_.n_conditions; }
    std::size_t param_count() const { return ps_.logical_size(); }
    const std::vector<typename ParamStore<T>::Segment>& param_segments() const {
        return ps_.segments();
    }
    const ArchConfig& config() const { return cfg_; }
    std::string architecture_id() const override { return cfg_.id(); }

    std::span<T> parameters() override { return {ps_.values.data(), ps_.values.size()}; }
    std::span<const T> parameters() const override {
        return {ps_.values.data(), ps_.values.size()};
    }
    std::span<T> gradients() override { return {ps_.grads.data(), ps_.grads.size()}; }
    void zero_grad() override { ps_.zero_grad(); }

    void forward(const MatX<T>& x, const std::vector<int>& ts, const MatX<T>& cond,
                 MatX<T>& eps_out) override {
        const int n = int(x.rows());
        if (x.cols() != input_dim()) throw std::runtime_error("UNet: bad input shape");
        if (int(ts.size()) != n || cond.rows() != n || cond.cols() != cfg_.n_conditions)
            throw std::runtime_error("UNet: bad timestep/condition shape");
        auto& W = ws_;
        W.n = n;

        // embedding
        W.sin.resize(n, 2 * cfg_.time_freqs);
        for (int ex = 0; ex < n; ++ex) {
            for (int f = 0; f < cfg_.time_freqs; ++f) {
                double omega = std::exp(-std::log(10000.0) * f /
                                        std::max(1, cfg_.time_freqs - 1));
                W.sin(ex, f) = T(std::sin(ts[ex] * omega));
                W.sin(ex, cfg_.time_freqs + f) = T(std::cos(ts[ex] * omega));
            }
        }
        temb0_.forward(ps_, W.sin, W.t0);
        nnops::silu_forward(W.t0, W.t0a);
        temb1_.forward(ps_, W.t0a, W.t1);
        cemb_.forward(ps_, cond, W.c0);
        W.cond = cond;
        W.e_pre = W.t1 + W.c0;
        nnops::silu_forward(W.e_pre, W.e);

        // encoder
        W.x_in = Eigen::Map<const MatX<T>>(x.data(), std::int64_t(n) * h1_ * w1_, 1);
        enc1_.forward(ps_, W.x_in, n, h1_, w1_, W.h1, W.scratch);
        gn1_.forward(ps_, W.h1, n, h1_ * w1_, W.n1, W.mu1, W.iv1);
        inj1_.forward(ps_, W.n1, W.e, n, h1_ * w1_, W.p1);
        nnops::silu_forward(W.n1, W.a1);
        nnops::avgpool2_forward(W.a1, n, h1_, w1_, W.d1);

        enc2_.forward(ps_, W.d1, n, h2_, w2_, W.h2, W.scratch);
        gn2_.forward(ps_, W.h2, n, h2_ * w2_, W.n2, W.mu2, W.iv2);
        inj2_.forward(ps_, W.n2, W.e, n, h2_ * w2_, W.p2);
        nnops::silu_forward(W.n2, W.a2);
        nnops::avgpool2_forward(W.a2, n, h2_, w2_, W.d2);

        // bottleneck (flatten is a free reinterpret: rows are example-major)
        Eigen::Map<const MatX<T>> z(W.d2.data(), n, zdim_);
        fc1_.forward(ps_, z, W.m1);
        ln1_.forward(ps_, W.m1, n, 1, W.mn1, W.mmu1, W.miv1);
        injm_.forward(ps_, W.mn1, W.e, n, 1, W.pm);
        nnops::silu_forward(W.mn1, W.ma1);
        fc2_.forward(ps_, W.ma1, W.m2);
        ln2_.forward(ps_, W.m2, n, 1, W.mn2, W.mmu2, W.miv2);
        nnops::silu_forward(W.mn2, W.ma2);

        // decoder
        Eigen::Map<const MatX<T>> bspat(W.ma2.data(), std::int64_t(n) * h3_ * w3_,
                                        2 * cfg_.base_width);
        nnops::upsample2_forward(MatX<T>(bspat), n, h3_, w3_, W.u2);
        W.cat2.resize(W.u2.rows(), W.u2.cols() + W.a2.cols());
        W.cat2 << W.u2, W.a2;
        dec2_.forward(ps_, W.cat2, n, h2_, w2_, W.h3, W.scratch);
        gn3_.forward(ps_, W.h3, n, h2_ * w2_, W.n3, W.mu3, W.iv3);
        inj3_.forward(ps_, W.n3, W.e, n, h2_ * w2_, W.p3);
        nnops::silu_forward(W.n3, W.a3);

        nnops::upsample2_forward(W.a3, n, h2_, w2_, W.u1);
        W.cat1.resize(W.u1.rows(), W.u1.cols() + W.a1.cols());
        W.cat1 << W.u1, W.a1;
        dec1_.forward(ps_, W.cat1, n, h1_, w1_, W.h4, W.scratch);
        gn4_.forward(ps_, W.h4, n, h1_ * w1_, W.n4, W.mu4, W.iv4);
        inj4_.forward(ps_, W.n4, W.e, n, h1_ * w1_, W.p4);
        nnops::silu_forward(W.n4, W.a4);

        out_.forward(ps_, W.a4, n, h1_, w1_, W.y, W.scratch);
        eps_out = Eigen::Map<const MatX<T>>(W.y.data(), n, h1_ * w1_);
    }

    void backward(const MatX<T>& grad_eps) override {
        auto& W = ws_;
        const int n = W.n;
        if (grad_eps.rows() != n || grad_eps.cols() != input_dim())
            throw std::runtime_error("UNet: bad gradient shape");
        MatX<T> de = MatX<T>::Zero(n, cfg_.emb_dim);
        MatX<T> dy = Eigen::Map<const MatX<T>>(grad_eps.data(), std::int64_t(n) * h1_ * w1_, 1);

        MatX<T> da4, dn4, dh4, dcat1, du1, da3, dn3, dh3, dcat2, du2, dma2, dmn2, dm2, dma1,
            dmn1, dm1, dz, da2, dn2, dh2, dd1, da1, dn1, dh1;

        out_.backward(ps_, W.a4, dy, n, h1_, w1_, &da4, W.scratch);
        nnops::silu_backward(W.n4, da4, dn4);
        inj4_.backward(ps_, W.e, dn4, n, h1_ * w1_, de);
        gn4_.backward(ps_, W.h4, dn4, n, h1_ * w1_, W.mu4, W.iv4, dh4);
        dec1_.backward(ps_, W.cat1, dh4, n, h1_, w1_, &dcat1, W.scratch);

        du1 = dcat1.leftCols(W.u1.cols());
        da1 = dcat1.rightCols(W.a1.cols());
        nnops::upsample2_backward(du1, n, h2_, w2_, int(W.a3.cols()), da3);
        nnops::silu_backward(W.n3, da3, dn3);
        inj3_.backward(ps_, W.e, dn3, n, h2_ * w2_, de);
        gn3_.backward(ps_, W.h3, dn3, n, h2_ * w2_, W.mu3, W.iv3, dh3);
        dec2_.backward(ps_, W.cat2, dh3, n, h2_, w2_, &dcat2, W.scratch);

        du2 = dcat2.leftCols(W.u2.cols());
        da2 = dcat2.rightCols(W.a2.cols());
        nnops::upsample2_backward(du2, n, h3_, w3_, 2 * cfg_.base_width, dma2);
        Eigen::Map<const MatX<T>> dma2v(dma2.data(), n, zdim_);
        nnops::silu_backward(W.mn2, MatX<T>(dma2v), dmn2);
        ln2_.backward(ps_, W.m2, dmn2, n, 1, W.mmu2, W.miv2, dm2);
        fc2_.backward(ps_, W.ma1, dm2, &dma1);
        nnops::silu_backward(W.mn1, dma1, dmn1);
        injm_.backward(ps_, W.e, dmn1, n, 1, de);
        ln1_.backward(ps_, W.m1, dmn1, n, 1, W.mmu1, W.miv1, dm1);
        Eigen::Map<const MatX<T>> z(W.d2.data(), n, zdim_);
        fc1_.backward(ps_, z, dm1, &dz);

        MatX<T> dd2 = Eigen::Map<const MatX<T>>(dz.data(), std::int64_t(n) * h3_ * w3_,
                                                2 * cfg_.base_width);
        MatX<T> da2b;
        nnops::avgpool2_backward(dd2, n, h2_, w2_, 2 * cfg_.base_width, da2b);
        da2 += da2b;
        nnops::silu_backward(W.n2, da2, dn2);
        inj2_.backward(ps_, W.e, dn2, n, h2_ * w2_, de);
        gn2_.backward(ps_, W.h2, dn2, n, h2_ * w2_, W.mu2, W.iv2, dh2);
        enc2_.backward(ps_, W.d1, dh2, n, h2_, w2_, &dd1, W.scratch);

        MatX<T> da1b;
        nnops::avgpool2_backward(dd1, n, h1_, w1_, cfg_.base_width, da1b);
        da1 += da1b;
        nnops::silu_backward(W.n1, da1, dn1);
        inj1_.backward(ps_, W.e, dn1, n, h1_ * w1_, de);
        gn1_.backward(ps_, W.h1, dn1, n, h1_ * w1_, W.mu1, W.iv1, dh1);
        enc1_.backward(ps_, W.x_in, dh1, n, h1_, w1_, nullptr, W.scratch);

        // embedding backward
        MatX<T> de_pre, dt1, dt0a, dt0;
        nnops::silu_backward(W.e_pre, de, de_pre);
        cemb_.backward(ps_, W.cond, de_pre, nullptr);
        temb1_.backward(ps_, W.t0a, de_pre, &dt0a);
        nnops::silu_backward(W.t0, dt0a, dt0);
        temb0_.backward(ps_, W.sin, dt0, nullptr);
    }

  private:
    struct Workspace {
        int n = 0;
        MatX<T> sin, t0, t0a, t1, c0, cond, e_pre, e;
        MatX<T> x_in, h1, n1, p1, a1, d1;
        MatX<T> h2, n2, p2, a2, d2;
        MatX<T> m1, mn1, pm, ma1, m2, mn2, ma2;
        MatX<T> u2, cat2, h3, n3, p3, a3;
        MatX<T> u1, cat1, h4, n4, p4, a4, y;
        MatX<T> scratch;
        std::vector<T> mu1, iv1, mu2, iv2, mu3, iv3, mu4, iv4;
        std::vector<T> mmu1, miv1, mmu2, miv2;
    };

    ArchConfig cfg_;
    ParamStore<T> ps_;
    Workspace ws_;
    nnops::Conv3x3<T> enc1_, enc2_, dec2_, dec1_, out_;
    nnops::Dense<T> temb0_, temb1_, cemb_, fc1_, fc2_;
    nnops::GroupNorm<T> gn1_, gn2_, gn3_, gn4_, ln1_, ln2_;
    nnops::Inject<T> inj1_, inj2_, injm_, inj3_, inj4_;
    int h1_, w1_, h2_, w2_, h3_, w3_, zdim_;
};

// ---------------------------------------------------------------------------
// Adam with bias correction; state serializes for exact resume.

template <class T>
class Adam {
  public:
    Adam(std::size_t n, double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
        : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps), m_(n, T(0)), v_(n, T(0)) {}

    void step(std::span<T> params, std::span<const T> grads) {
        ++t_;
        const double c1 = 1.0 - std::pow(beta1_, double(t_));
        const double c2 = 1.0 - std::pow(beta2_, double(t_));
        for (std::size_t i = 0; i < params.size(); ++i) {
            double g = double(grads[i]);
            double m = beta1_ * double(m_[i]) + (1.0 - beta1_) * g;
            double v = beta2_ * double(v_[i]) + (1.0 - beta2_) * g * g;
            m_[i] = T(m);
            v_[i] = T(v);
            params[i] -= T(lr_ * (m / c1) / (std::sqrt(v / c2) + eps_));
        }
    }

    std::int64_t step_count() const { return t_; }
    void set_step_count(std::int64_t t) { t_ = t; }
    std::vector<T>& m() { return m_; }
    std::vector<T>& v() { return v_; }
    double learning_rate() const { return lr_; }

  private:
    double lr_, beta1_, beta2_, eps_;
    std::int64_t t_ = 0;
    std::vector<T> m_, v_;
};

// ---------------------------------------------------------------------------
// Small convolutional classifier used as the frozen FID feature extractor.

struct ClassifierConfig {
    int height = 28, width = 28;
    int c1 = 16, c2 = 32;
    int feature_dim = 64;
    int n_classes = 10;

    std::string id() const {
        return "convnet(h=" + std::to_string(height) + ",w=" + std::to_string(width) +
               ",c1=" + std::to_string(c1) + ",c2=" + std::to_string(c2) +
               ",d=" + std::to_string(feature_dim) + ",k=" + std::to_string(n_classes) + ")";
    }
};

template <class T>
class Classifier {
  public:
    explicit Classifier(const ClassifierConfig& cfg) : cfg_(cfg) {
        h1_ = cfg.height;
        w1_ = cfg.width;
        h2_ = h1_ / 2;
        w2_ = w1_ / 2;
        h3_ = h2_ / 2;
        w3_ = w2_ / 2;
        flat_ = cfg.c2 * h3_ * w3_;
        conv1_.reg(ps_, "conv1", 1, cfg.c1);
        gn1_.reg(ps_, "gn1", cfg.c1);
        conv2_.reg(ps_, "conv2", cfg.c1, cfg.c2);
        gn2_.reg(ps_, "gn2", cfg.c2);
        fc1_.reg(ps_, "fc1", flat_, cfg.feature_dim);
        fc2_.reg(ps_, "fc2", cfg.feature_dim, cfg.n_classes);
        ps_.allocate();
    }

    void init_params(Rng& rng) { ps_.init(rng); }
    const ClassifierConfig& config() const { return cfg_; }
    std::size_t param_count() const { return ps_.logical_size(); }
    std::span<T> parameters() { return {ps_.values.data(), ps_.values.size()}; }
    std::span<const T> parameters() const { return {ps_.values.data(), ps_.values.size()}; }
    std::span<T> gradients() { return {ps_.grads.data(), ps_.grads.size()}; }
    void zero_grad() { ps_.zero_grad(); }

    // x: [n, h*w] in [-1,1]; returns features [n, feature_dim]
    void forward_features(const MatX<T>& x, MatX<T>& feat) {
        const int n = int(x.rows());
        auto& W = ws_;
        W.n = n;
        W.x_in = Eigen::Map<const MatX<T>>(x.data(), std::int64_t(n) * h1_ * w1_, 1);
        conv1_.forward(ps_, W.x_in, n, h1_, w1_, W.h1, W.scratch);
        gn1_.forward(ps_, W.h1, n, h1_ * w1_, W.n1, W.mu1, W.iv1);
        nnops::silu_forward(W.n1, W.a1);
        nnops::avgpool2_forward(W.a1, n, h1_, w1_, W.d1);
        conv2_.forward(ps_, W.d1, n, h2_, w2_, W.h2, W.scratch);
        gn2_.forward(ps_, W.h2, n, h2_ * w2_, W.n2, W.mu2, W.iv2);
        nnops::silu_forward(W.n2, W.a2);
        nnops::avgpool2_forward(W.a2, n, h2_, w2_, W.d2);
        Eigen::Map<const MatX<T>> z(W.d2.data(), n, flat_);
        fc1_.forward(ps_, z, W.f1);
        nnops::silu_forward(W.f1, W.fa);
        feat = W.fa;
    }

    void forward_logits(const MatX<T>& x, MatX<T>& logits) {
        MatX<T> feat;
        forward_features(x, feat);
        fc2_.forward(ps_, ws_.fa, logits);
    }

    // expects dlogits from softmax cross-entropy
    void backward(const MatX<T>& dlogits) {
        auto& W = ws_;
        const int n = W.n;
        MatX<T> dfa, df1, dz, da2, dn2, dh2, dd1, da1, dn1, dh1;
        fc2_.backward(ps_, W.fa, dlogits, &dfa);
        nnops::silu_backward(W.f1, dfa, df1);
        Eigen::Map<const MatX<T>> z(W.d2.data(), n, flat_);
        fc1_.backward(ps_, z, df1, &dz);
        MatX<T> dd2 = Eigen::Map<const MatX<T>>(dz.data(), std::int64_t(n) * h3_ * w3_, cfg_.c2);
        nnops::avgpool2_backward(dd2, n, h2_, w2_, cfg_.c2, da2);
        nnops::silu_backward(W.n2, da2, dn2);
        gn2_.backward(ps_, W.h2, dn2, n, h2_ * w2_, W.mu2, W.iv2, dh2);
        conv2_.backward(ps_, W.d1, dh2, n, h2_, w2_, &dd1, W.scratch);
        nnops::avgpool2_backward(dd1, n, h1_, w1_, cfg_.c1, da1);
        nnops::silu_backward(W.n1, da1, dn1);
        gn1_.backward(ps_, W.h1, dn1, n, h1_ * w1_, W.mu1, W.iv1, dh1);
        conv1_.backward(ps_, W.x_in, dh1, n, h1_, w1_, nullptr, W.scratch);
    }

  private:
    struct Workspace {
        int n = 0;
        MatX<T> x_in, h1, n1, a1, d1, h2, n2, a2, d2, f1, fa, scratch;
        std::vector<T> mu1, iv1, mu2, iv2;
    };

    ClassifierConfig cfg_;
    ParamStore<T> ps_;
    Workspace ws_;
    nnops::Conv3x3<T> conv1_, conv2_;
    nnops::GroupNorm<T> gn1_, gn2_;
    nnops::Dense<T> fc1_, fc2_;
    int h1_, w1_, h2_, w2_, h3_, w3_, flat_;
};

}  // namespace cldl
