#pragma once

#include <vector>

namespace cldl {

enum class SigmaMode {
    posterior,  // sigma_t^2 = beta-tilde_t (beta_1 at t=1, where beta-tilde is 0)
    beta,       // sigma_t^2 = beta_t
};

// Precomputed diffusion variance schedule. All arrays are double precision
// and indexed by t-1 for t in 1..tau.
struct NoiseSchedule {
    int tau = 0;
    std::vector<double> betas;
    std::vector<double> alphas;               // alpha_t = 1 - beta_t
    std::vector<double> alpha_bars;           // running product of alpha
    std::vector<double> posterior_variances;  // beta-tilde_t, 0 at t=1
    SigmaMode sigma_mode = SigmaMode::posterior;

    // single-precision lookups for the training/sampling hot path
    std::vector<float> sqrt_alpha_bars_f;
    std::vector<float> sqrt_one_minus_alpha_bars_f;

    double beta(int t) const { return betas[check(t)]; }
    double alpha(int t) const { return alphas[t - 1]; }
    double alpha_bar(int t) const { return alpha_bars[t - 1]; }
    double posterior_variance(int t) const { return posterior_variances[t - 1]; }

    // Reverse-process variance. beta-tilde_1 = 0 degenerates the t=1 decoder,
    // so t=1 uses beta_1 in posterior mode.
    double sigma2(int t) const {
        if (sigma_mode == SigmaMode::beta) return betas[check(t)];
        return t == 1 ? betas[0] : posterior_variances[t - 1];
    }

    // Eq-style VLB weight beta_t^2 / (2 sigma_t^2 alpha_t (1 - alpha_bar_t)).
    double vlb_weight(int t) const;

    int check(int t) const;  // throws std::domain_error when t outside 1..tau
};

// Linear beta schedule from beta_start to beta_end over tau steps.
NoiseSchedule make_linear_schedule(int tau, double beta_start, double beta_end);

}  // namespace cldl
