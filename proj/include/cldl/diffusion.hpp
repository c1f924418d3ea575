#pragma once

// Diffusion-process math: forward/posterior Gaussians, the variational bound
// terms, BPD, per-timestep diagnostics and ancestral sampling. Loss and KL
// arithmetic is double precision regardless of the model scalar.

#include <Eigen/Dense>
#include <cmath>
#include <stdexcept>
#include <vector>

#include "cldl/nn.hpp"
#include "cldl/rng.hpp"
#include "cldl/schedule.hpp"

namespace cldl {

struct GaussianParams {
    Eigen::VectorXd mean;
    double variance = 0.0;
};

struct LossBreakdown {
    double total_nats = 0.0;
    double term_L0 = 0.0;
    double term_Ltau = 0.0;
    std::vector<double> terms_Lt;  // index k holds the t = k+2 term
};

enum class DiagLossForm { vlb, simple };

// KL(N(mu1, s1 I) || N(mu2, s2 I)) summed over dimensions.
inline double gaussian_kl(const Eigen::VectorXd& mu1, double s1, const Eigen::VectorXd& mu2,
                          double s2) {
    if (mu1.size() != mu2.size()) throw std::invalid_argument("gaussian_kl: shape mismatch");
    if (!(s1 > 0.0) || !(s2 > 0.0)) throw std::invalid_argument("gaussian_kl: variance <= 0");
    const double d = double(mu1.size());
    return 0.5 * (d * (std::log(s2 / s1) + s1 / s2 - 1.0) + (mu1 - mu2).squaredNorm() / s2);
}

inline double normal_cdf(double z) { return 0.5 * std::erfc(-z * 0.7071067811865475244); }

// Probability mass of the discretized-decoder bin with index k (0..255) under
// N(mu, var). Interior bins have width 2/255; the end bins are open tails.
inline double gaussian_bin_mass(int k, double mu, double var) {
    if (k < 0 || k > 255) throw std::domain_error("gaussian_bin_mass: bin index outside 0..255");
    const double sigma = std::sqrt(var);
    const double center = 2.0 * k / 255.0 - 1.0;
    const double lo = center - 1.0 / 255.0, hi = center + 1.0 / 255.0;
    const double zl = (lo - mu) / sigma, zh = (hi - mu) / sigma;
    if (k == 0) return normal_cdf(zh);
    if (k == 255) return normal_cdf(-zl);
    // difference through the nearer tail for accuracy far from the mean
    if (zl > 0.0)
        return 0.5 * (std::erfc(zl * 0.7071067811865475244) -
                      std::erfc(zh * 0.7071067811865475244));
    if (zh < 0.0)
        return 0.5 * (std::erfc(-zh * 0.7071067811865475244) -
                      std::erfc(-zl * 0.7071067811865475244));
    return normal_cdf(zh) - normal_cdf(zl);
}

inline double discretized_gaussian_nll(double v, double mu, double var) {
    int k = int(std::lround((v + 1.0) * 127.5));
    if (k < 0 || k > 255) throw std::domain_error("discretized decoder: value outside [-1, 1]");
    double mass = gaussian_bin_mass(k, mu, var);
    return -std::log(std::max(mass, 1e-300));
}

// --------------------------------------------------------------------------
// Forward process and reverse-process parameters (single example).

template <class T>
VecX<T> q_sample(const VecX<T>& x0, int t, const VecX<T>& eps, const NoiseSchedule& sched) {
    sched.check(t);
    if (x0.size() != eps.size()) throw std::invalid_argument("q_sample: shape mismatch");
    const T a = T(std::sqrt(sched.alpha_bar(t)));
    const T b = T(std::sqrt(1.0 - sched.alpha_bar(t)));
    return a * x0 + b * eps;
}

inline GaussianParams posterior_params(const Eigen::VectorXd& x0, const Eigen::VectorXd& xt,
                                       int t, const NoiseSchedule& sched) {
    sched.check(t);
    if (t < 2) throw std::domain_error("posterior_params: t must be >= 2 (t=1 uses the decoder)");
    if (x0.size() != xt.size()) throw std::invalid_argument("posterior_params: shape mismatch");
    const double ab = sched.alpha_bar(t), ab_prev = sched.alpha_bar(t - 1);
    const double c0 = std::sqrt(ab_prev) * sched.beta(t) / (1.0 - ab);
    const double ct = std::sqrt(sched.alpha(t)) * (1.0 - ab_prev) / (1.0 - ab);
    GaussianParams g;
    g.mean = c0 * x0 + ct * xt;
    g.variance = sched.posterior_variance(t);
    return g;
}

template <class T>
void model_forward_single(NoisePredictor<T>& model, const VecX<T>& xt, int t, const VecX<T>& cond,
                          VecX<T>& eps_hat) {
    MatX<T> x(1, xt.size()), c(1, cond.size()), out;
    x.row(0) = xt.transpose();
    c.row(0) = cond.transpose();
    std::vector<int> ts{t};
    model.forward(x, ts, c, out);
    eps_hat = out.row(0).transpose();
}

template <class T>
GaussianParams model_reverse_params(NoisePredictor<T>& model, const VecX<T>& xt, int t,
                                    const VecX<T>& cond, const NoiseSchedule& sched) {
    sched.check(t);
    VecX<T> eps_hat;
    model_forward_single(model, xt, t, cond, eps_hat);
    if (eps_hat.size() != xt.size())
        throw std::logic_error("model_reverse_params: model output shape mismatch");
    const double ab = sched.alpha_bar(t);
    const double coef = sched.beta(t) / std::sqrt(1.0 - ab);
    const double inv_sqrt_alpha = 1.0 / std::sqrt(sched.alpha(t));
    GaussianParams g;
    g.mean = inv_sqrt_alpha *
             (xt.template cast<double>() - coef * eps_hat.template cast<double>());
    g.variance = sched.sigma2(t);
    return g;
}

// --------------------------------------------------------------------------
// Losses.

// Sum-of-squares noise-matching loss for one example; optionally accumulates
// parameter gradients scaled by grad_weight.
template <class T>
double loss_simple(NoisePredictor<T>& model, const VecX<T>& x0, int t, const VecX<T>& cond,
                   const VecX<T>& eps, const NoiseSchedule& sched, double grad_weight = 0.0) {
    VecX<T> xt = q_sample(x0, t, eps, sched);
    MatX<T> x(1, xt.size()), c(1, cond.size()), out;
    x.row(0) = xt.transpose();
    c.row(0) = cond.transpose();
    std::vector<int> ts{t};
    model.forward(x, ts, c, out);
    Eigen::VectorXd r =
        out.row(0).transpose().template cast<double>() - eps.template cast<double>();
    if (grad_weight != 0.0) {
        MatX<T> g = (2.0 * grad_weight * r).template cast<T>().transpose();
        model.backward(g);
    }
    return r.squaredNorm();
}

// Eq-weighted per-timestep term for one sampled noise draw.
template <class T>
double loss_vlb_term(NoisePredictor<T>& model, const VecX<T>& x0, int t, const VecX<T>& cond,
                     const NoiseSchedule& sched, Rng& rng) {
    sched.check(t);
    if (t < 2) throw std::domain_error("loss_vlb_term: t must be in 2..tau");
    VecX<T> eps(x0.size());
    rng.fill_normal(eps.data(), eps.size());
    return sched.vlb_weight(t) * loss_simple(model, x0, t, cond, eps, sched);
}

// Discretized-decoder negative log-likelihood at t=1.
template <class T>
double loss_L0(NoisePredictor<T>& model, const VecX<T>& x0, const VecX<T>& cond,
               const NoiseSchedule& sched, Rng& rng) {
    for (Eigen::Index i = 0; i < x0.size(); ++i)
        if (x0[i] < T(-1) || x0[i] > T(1))
            throw std::domain_error("loss_L0: x0 outside [-1, 1]");
    VecX<T> eps(x0.size());
    rng.fill_normal(eps.data(), eps.size());
    VecX<T> x1 = q_sample(x0, 1, eps, sched);
    GaussianParams g = model_reverse_params(model, x1, 1, cond, sched);
    double nll = 0.0;
    for (Eigen::Index i = 0; i < x0.size(); ++i)
        nll += discretized_gaussian_nll(double(x0[i]), g.mean[i], g.variance);
    return nll;
}

// Closed-form KL to the standard-normal prior at t = tau.
template <class T>
double loss_Ltau(const VecX<T>& x0, const NoiseSchedule& sched) {
    const double ab = sched.alpha_bar(sched.tau);
    if (ab == 0.0) return 0.0;
    const double v = 1.0 - ab;
    const double per_dim = v - 1.0 - std::log(v);
    return 0.5 * (ab * x0.template cast<double>().squaredNorm() + double(x0.size()) * per_dim);
}

// Full Eq-sum bound. Noise for every term derives from one root draw keyed by
// t, so the breakdown is invariant to the order the terms are evaluated in.
template <class T>
LossBreakdown full_bound(NoisePredictor<T>& model, const VecX<T>& x0, const VecX<T>& cond,
                         const NoiseSchedule& sched, Rng& rng, int n_noise_samples = 1,
                         const std::vector<int>* eval_order = nullptr) {
    if (n_noise_samples < 1) throw std::invalid_argument("full_bound: n_noise_samples >= 1");
    const std::uint64_t root = rng.next_u64();
    LossBreakdown b;
    b.terms_Lt.assign(std::size_t(std::max(0, sched.tau - 1)), 0.0);

    std::vector<int> order;
    if (eval_order) {
        order = *eval_order;
    } else {
        order.resize(std::size_t(sched.tau));
        for (int t = 1; t <= sched.tau; ++t) order[std::size_t(t - 1)] = t;
    }
    for (int t : order) {
        Rng sub = Rng::stream(root, "full_bound_t", std::uint64_t(t));
        double acc = 0.0;
        for (int k = 0; k < n_noise_samples; ++k)
            acc += t == 1 ? loss_L0(model, x0, cond, sched, sub)
                          : loss_vlb_term(model, x0, t, cond, sched, sub);
        if (t == 1)
            b.term_L0 = acc / n_noise_samples;
        else
            b.terms_Lt[std::size_t(t - 2)] = acc / n_noise_samples;
    }
    b.term_Ltau = loss_Ltau(x0, sched);
    b.total_nats = b.term_L0 + b.term_Ltau;
    for (double v : b.terms_Lt) b.total_nats += v;
    return b;
}

inline double bpd(const LossBreakdown& b, int n_pixels) {
    if (n_pixels < 1) throw std::invalid_argument("bpd: n_pixels >= 1");
    return b.total_nats / (double(n_pixels) * std::log(2.0));
}

// --------------------------------------------------------------------------
// Batched paths used by training and evaluation.

// Mean over the batch of per-example pixel-sum squared error; when
// grad_weight > 0 accumulates d(grad_weight * loss)/d(theta).
template <class T>
double loss_simple_batch(NoisePredictor<T>& model, const MatX<T>& x0, const std::vector<int>& ts,
                         const MatX<T>& cond, const MatX<T>& eps, const NoiseSchedule& sched,
                         double grad_weight = 0.0) {
    const int n = int(x0.rows());
    if (n == 0) throw std::domain_error("loss_simple_batch: empty batch");
    MatX<T> xt(n, x0.cols());
    for (int i = 0; i < n; ++i) {
        const int t = ts[std::size_t(i)];
        sched.check(t);
        xt.row(i) = T(std::sqrt(sched.alpha_bar(t))) * x0.row(i) +
                    T(std::sqrt(1.0 - sched.alpha_bar(t))) * eps.row(i);
    }
    MatX<T> out;
    model.forward(xt, ts, cond, out);
    MatX<T> r = out - eps;
    double loss = r.template cast<double>().array().square().sum() / n;
    if (grad_weight != 0.0) {
        MatX<T> g = r * T(2.0 * grad_weight / n);
        model.backward(g);
    }
    return loss;
}

// Mean per-timestep diagnostic over a slice at one fixed t. Each noise round
// draws a single eps image shared by every slice element (common random
// numbers), so a slice of copies of one example reduces to that example's
// term exactly.
template <class T>
double per_timestep_loss(NoisePredictor<T>& model, const MatX<T>& slice, int t,
                         const VecX<T>& cond, const NoiseSchedule& sched, int n_noise_samples,
                         DiagLossForm form, Rng& rng) {
    const int n = int(slice.rows());
    if (n == 0) throw std::domain_error("per_timestep_loss: empty slice");
    if (n_noise_samples < 1)
        throw std::invalid_argument("per_timestep_loss: n_noise_samples >= 1");
    sched.check(t);
    MatX<T> cm(n, cond.size());
    cm.rowwise() = cond.transpose();
    std::vector<int> ts(static_cast<std::size_t>(n), t);
    MatX<T> eps(n, slice.cols());
    VecX<T> eps_row(slice.cols());
    double acc = 0.0;
    for (int k = 0; k < n_noise_samples; ++k) {
        rng.fill_normal(eps_row.data(), std::size_t(eps_row.size()));
        eps.rowwise() = eps_row.transpose();
        acc += loss_simple_batch(model, slice, ts, cm, eps, sched);
    }
    acc /= n_noise_samples;
    return form == DiagLossForm::vlb ? sched.vlb_weight(t) * acc : acc;
}

// Batched variational bound; one forward per (t, noise draw) over the whole
// slice. Noise streams are keyed by t from a single root draw.
template <class T>
std::vector<LossBreakdown> full_bound_batch(NoisePredictor<T>& model, const MatX<T>& x0,
                                            const MatX<T>& cond, const NoiseSchedule& sched,
                                            Rng& rng, int n_noise_samples = 1) {
    const int n = int(x0.rows());
    const int d = int(x0.cols());
    if (n == 0) throw std::domain_error("full_bound_batch: empty batch");
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < d; ++j)
            if (x0(i, j) < T(-1) || x0(i, j) > T(1))
                throw std::domain_error("full_bound_batch: x0 outside [-1, 1]");
    const std::uint64_t root = rng.next_u64();
    std::vector<LossBreakdown> out(static_cast<std::size_t>(n));
    for (auto& b : out) b.terms_Lt.assign(std::size_t(std::max(0, sched.tau - 1)), 0.0);

    MatX<T> eps(n, d), xt(n, d), pred;
    for (int t = 1; t <= sched.tau; ++t) {
        Rng sub = Rng::stream(root, "full_bound_t", std::uint64_t(t));
        std::vector<int> ts(std::size_t(n), t);
        const double sa = std::sqrt(sched.alpha_bar(t));
        const double sb = std::sqrt(1.0 - sched.alpha_bar(t));
        const double w = t >= 2 ? sched.vlb_weight(t) : 0.0;
        for (int k = 0; k < n_noise_samples; ++k) {
            sub.fill_normal(eps.data(), std::size_t(eps.size()));
            xt = T(sa) * x0 + T(sb) * eps;
            model.forward(xt, ts, cond, pred);
            if (t == 1) {
                const double var = sched.sigma2(1);
                const double coef = sched.beta(1) / std::sqrt(1.0 - sched.alpha_bar(1));
                const double inv_sqrt_alpha = 1.0 / std::sqrt(sched.alpha(1));
                for (int i = 0; i < n; ++i) {
                    double nll = 0.0;
                    for (int j = 0; j < d; ++j) {
                        double mu = inv_sqrt_alpha * (double(xt(i, j)) - coef * double(pred(i, j)));
                        nll += discretized_gaussian_nll(double(x0(i, j)), mu, var);
                    }
                    out[std::size_t(i)].term_L0 += nll / n_noise_samples;
                }
            } else {
                for (int i = 0; i < n; ++i) {
                    double q = (pred.row(i) - eps.row(i))
                                   .template cast<double>()
                                   .squaredNorm();
                    out[std::size_t(i)].terms_Lt[std::size_t(t - 2)] +=
                        w * q / n_noise_samples;
                }
            }
        }
    }
    for (int i = 0; i < n; ++i) {
        auto& b = out[std::size_t(i)];
        b.term_Ltau = loss_Ltau<T>(x0.row(i).transpose(), sched);
        b.total_nats = b.term_L0 + b.term_Ltau;
        for (double v : b.terms_Lt) b.total_nats += v;
    }
    return out;
}

// Reverse-chain sampling from the prior; output clamped to [-1, 1].
template <class T>
MatX<T> ancestral_sample(NoisePredictor<T>& model, const VecX<T>& cond, int n,
                         const NoiseSchedule& sched, Rng& rng) {
    if (n < 1) throw std::invalid_argument("ancestral_sample: n >= 1");
    const int d = model.input_dim();
    MatX<T> x(n, d), z(n, d), pred;
    rng.fill_normal(x.data(), std::size_t(x.size()));
    MatX<T> cm(n, cond.size());
    cm.rowwise() = cond.transpose();
    for (int t = sched.tau; t >= 1; --t) {
        std::vector<int> ts(std::size_t(n), t);
        model.forward(x, ts, cm, pred);
        const T coef = T(sched.beta(t) / std::sqrt(1.0 - sched.alpha_bar(t)));
        const T inv_sqrt_alpha = T(1.0 / std::sqrt(sched.alpha(t)));
        x = inv_sqrt_alpha * (x - coef * pred);
        if (t > 1) {
            rng.fill_normal(z.data(), std::size_t(z.size()));
            x += T(std::sqrt(sched.sigma2(t))) * z;
        }
    }
    return x.cwiseMax(T(-1)).cwiseMin(T(1));
}

}  // namespace cldl
