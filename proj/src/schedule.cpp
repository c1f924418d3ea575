#include "cldl/schedule.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

#include "cldl/errors.hpp"

namespace cldl {

int NoiseSchedule::check(int t) const {
    if (t < 1 || t > tau)
        throw std::domain_error("timestep t=" + std::to_string(t) + " outside 1.." +
                                std::to_string(tau));
    return t - 1;
}

double NoiseSchedule::vlb_weight(int t) const {
    check(t);
    double b = betas[t - 1];
    return b * b / (2.0 * sigma2(t) * alphas[t - 1] * (1.0 - alpha_bars[t - 1]));
}

NoiseSchedule make_linear_schedule(int tau, double beta_start, double beta_end) {
    if (tau < 1) throw ConfigError("schedule: tau must be >= 1");
    if (!(beta_start > 0.0) || !(beta_start <= beta_end) || !(beta_end < 1.0))
        throw ConfigError("schedule: need 0 < beta_start <= beta_end < 1");

    NoiseSchedule s;
    s.tau = tau;
    s.betas.resize(tau);
    s.alphas.resize(tau);
    s.alpha_bars.resize(tau);
    s.posterior_variances.resize(tau);
    s.sqrt_alpha_bars_f.resize(tau);
    s.sqrt_one_minus_alpha_bars_f.resize(tau);

    double bar = 1.0;
    for (int i = 0; i < tau; ++i) {
        double frac = tau > 1 ? double(i) / double(tau - 1) : 0.0;
        s.betas[i] = beta_start + frac * (beta_end - beta_start);
        s.alphas[i] = 1.0 - s.betas[i];
        double prev_bar = bar;
        bar *= s.alphas[i];
        s.alpha_bars[i] = bar;
        s.posterior_variances[i] = i == 0 ? 0.0 : s.betas[i] * (1.0 - prev_bar) / (1.0 - bar);
        s.sqrt_alpha_bars_f[i] = float(std::sqrt(bar));
        s.sqrt_one_minus_alpha_bars_f[i] = float(std::sqrt(1.0 - bar));
    }
    return s;
}

}  // namespace cldl
