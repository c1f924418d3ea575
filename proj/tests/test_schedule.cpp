#include <cmath>

#include "cldl/errors.hpp"
#include "cldl/schedule.hpp"
#include "doctest.h"

using namespace cldl;

TEST_CASE("linear schedule endpoints") {
    auto s = make_linear_schedule(1000, 1e-4, 0.02);
    CHECK(s.beta(1) == doctest::Approx(1e-4).epsilon(1e-15));
    CHECK(s.beta(1000) == doctest::Approx(0.02).epsilon(1e-15));
    CHECK(s.tau == 1000);
}

TEST_CASE("single-step schedule") {
    auto s = make_linear_schedule(1, 0.5, 0.5);
    CHECK(s.betas.size() == 1);
    CHECK(s.beta(1) == 0.5);
    CHECK(s.alpha_bar(1) == 0.5);
    CHECK(s.posterior_variance(1) == 0.0);
}

TEST_CASE("alpha_bar matches an extended-precision product oracle") {
    auto s = make_linear_schedule(1000, 1e-4, 0.02);
    long double prod = 1.0L;
    for (int t = 1; t <= 1000; ++t) {
        long double beta = 1e-4L + (t - 1) / 999.0L * (0.02L - 1e-4L);
        prod *= 1.0L - beta;
        if (t == 50 || t == 700 || t == 1000)
            CHECK(s.alpha_bar(t) == doctest::Approx(double(prod)).epsilon(1e-12));
    }
    // tail of the default schedule: indistinguishable from the prior
    CHECK(s.alpha_bar(1000) < 1e-4);
    CHECK(s.alpha_bar(1000) > 1e-5);
}

TEST_CASE("schedule identities hold for every t") {
    auto s = make_linear_schedule(777, 3e-4, 0.015);
    double prev_bar = 1.0;
    for (int t = 1; t <= s.tau; ++t) {
        CHECK(s.alpha(t) == 1.0 - s.beta(t));
        CHECK(s.alpha_bar(t) == doctest::Approx(prev_bar * s.alpha(t)).epsilon(1e-15));
        if (t >= 2) {
            CHECK(s.beta(t) >= s.beta(t - 1));
            CHECK(s.alpha_bar(t) < s.alpha_bar(t - 1));
            double want = s.beta(t) * (1.0 - prev_bar) / (1.0 - s.alpha_bar(t));
            CHECK(s.posterior_variance(t) == doctest::Approx(want).epsilon(1e-12));
        }
        CHECK(s.beta(t) > 0.0);
        CHECK(s.beta(t) < 1.0);
        prev_bar = s.alpha_bar(t);
    }
    CHECK(s.posterior_variance(1) == 0.0);
}

TEST_CASE("sigma2 modes") {
    auto s = make_linear_schedule(10, 0.01, 0.2);
    CHECK(s.sigma2(1) == s.beta(1));  // beta-tilde_1 is degenerate
    for (int t = 2; t <= 10; ++t) CHECK(s.sigma2(t) == s.posterior_variance(t));
    s.sigma_mode = SigmaMode::beta;
    for (int t = 1; t <= 10; ++t) CHECK(s.sigma2(t) == s.beta(t));
}

TEST_CASE("vlb weight matches hand evaluation") {
    auto s = make_linear_schedule(10, 0.01, 0.2);
    for (int t : {2, 5, 10}) {
        long double b = s.beta(t), a = s.alpha(t), ab = s.alpha_bar(t), s2 = s.sigma2(t);
        long double want = b * b / (2.0L * s2 * a * (1.0L - ab));
        CHECK(s.vlb_weight(t) == doctest::Approx(double(want)).epsilon(1e-12));
    }
}

TEST_CASE("schedule configuration errors") {
    CHECK_THROWS_AS(make_linear_schedule(0, 1e-4, 0.02), ConfigError);
    CHECK_THROWS_AS(make_linear_schedule(10, 0.0, 0.02), ConfigError);
    CHECK_THROWS_AS(make_linear_schedule(10, 0.3, 0.2), ConfigError);
    CHECK_THROWS_AS(make_linear_schedule(10, 0.1, 1.0), ConfigError);
    auto s = make_linear_schedule(10, 0.01, 0.2);
    CHECK_THROWS_AS(s.beta(0), std::domain_error);
    CHECK_THROWS_AS(s.beta(11), std::domain_error);
    CHECK_THROWS_AS(s.vlb_weight(0), std::domain_error);
}
