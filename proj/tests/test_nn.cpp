#include <cmath>
#include <set>

#include "cldl/diffusion.hpp"
#include "cldl/nn.hpp"
#include "doctest.h"

using namespace cldl;

namespace {

ArchConfig tiny_arch() {
    ArchConfig cfg;
    cfg.height = 8;
    cfg.width = 8;
    cfg.base_width = 3;
    cfg.emb_dim = 10;
    cfg.mlp_hidden = 12;
    cfg.n_conditions = 3;
    cfg.time_freqs = 4;
    return cfg;
}

template <class T>
MatX<T> random_mat(int r, int c, Rng& rng) {
    MatX<T> m(r, c);
    rng.fill_normal(m.data(), std::size_t(m.size()));
    return m;
}

}  // namespace

TEST_CASE("architecture is deterministic: same count, same seed -> same params") {
    ArchConfig cfg;  // default desk config
    UNet<float> a(cfg), b(cfg), c(cfg);
    Rng r1(1), r2(2), r1b(1);
    a.init_params(r1);
    b.init_params(r2);
    c.init_params(r1b);
    CHECK(a.param_count() == b.param_count());
    CHECK(a.parameters().size() == b.parameters().size());
    bool identical_and_seeded = true, differs_across_seeds = false;
    for (std::size_t i = 0; i < a.parameters().size(); ++i) {
        identical_and_seeded &= a.parameters()[i] == c.parameters()[i];
        differs_across_seeds |= a.parameters()[i] != b.parameters()[i];
    }
    CHECK(identical_and_seeded);
    CHECK(differs_across_seeds);
}

TEST_CASE("forward on a zero image is finite with the right shape; output starts at zero") {
    UNet<float> net(tiny_arch());
    Rng r(7);
    net.init_params(r);
    MatX<float> x = MatX<float>::Zero(2, 64), out;
    MatX<float> cond = MatX<float>::Zero(2, 3);
    cond(0, 0) = cond(1, 2) = 1.0f;
    net.forward(x, {1, 5}, cond, out);
    CHECK(out.rows() == 2);
    CHECK(out.cols() == 64);
    CHECK(out.allFinite());
    // zero-initialized output layer
    CHECK(out.cwiseAbs().maxCoeff() == 0.0f);
}

TEST_CASE("forward determinism") {
    UNet<float> net(tiny_arch());
    Rng r(11);
    net.init_params(r);
    Rng d(3);
    MatX<float> x = random_mat<float>(4, 64, d);
    MatX<float> cond = MatX<float>::Zero(4, 3);
    for (int i = 0; i < 4; ++i) cond(i, i % 3) = 1.0f;
    MatX<float> o1, o2;
    net.forward(x, {1, 2, 3, 4}, cond, o1);
    net.forward(x, {1, 2, 3, 4}, cond, o2);
    CHECK((o1 - o2).cwiseAbs().maxCoeff() == 0.0f);
}

TEST_CASE("gradients match central finite differences on a double-precision net") {
    UNet<double> net(tiny_arch());
    Rng r(1);
    net.init_params(r);
    {  // non-zero output layer so every path is generic
        Rng rr(9);
        auto p = net.parameters();
        for (std::size_t i = p.size() - 40; i < p.size(); ++i) p[i] = 0.1 * rr.normal();
    }
    auto sched = make_linear_schedule(20, 0.05, 0.3);
    Rng d(5);
    VecX<double> x0(64), eps(64), cond = VecX<double>::Unit(3, 1);
    d.fill_normal(x0.data(), 64);
    x0 = x0.cwiseMax(-1.0).cwiseMin(1.0);
    d.fill_normal(eps.data(), 64);

    net.zero_grad();
    loss_simple(net, x0, 7, cond, eps, sched, 1.0);
    auto g = net.gradients();
    auto p = net.parameters();
    Rng pick(77);
    int checked = 0;
    for (int k = 0; k < 150; ++k) {
        std::size_t i = pick.uniform_index(p.size());
        const double h = 1e-4;
        const double save = p[i];
        p[i] = save + h;
        double lp = loss_simple(net, x0, 7, cond, eps, sched);
        p[i] = save - h;
        double lm = loss_simple(net, x0, 7, cond, eps, sched);
        p[i] = save;
        double fd = (lp - lm) / (2 * h);
        if (std::abs(fd) < 1e-10 && std::abs(g[i]) < 1e-10) continue;
        ++checked;
        CHECK(std::abs(fd - g[i]) / std::max({std::abs(fd), std::abs(g[i]), 1e-8}) < 1e-3);
    }
    CHECK(checked > 50);
}

TEST_CASE("every parameter segment receives gradient on random batches") {
    UNet<double> net(tiny_arch());
    Rng r(2);
    net.init_params(r);
    {
        Rng rr(4);
        auto p = net.parameters();
        for (std::size_t i = p.size() - 40; i < p.size(); ++i) p[i] = 0.1 * rr.normal();
    }
    auto sched = make_linear_schedule(20, 0.05, 0.3);
    net.zero_grad();
    Rng d(8);
    for (int b = 0; b < 3; ++b) {
        MatX<double> x0 = random_mat<double>(6, 64, d).cwiseMax(-1.0).cwiseMin(1.0);
        MatX<double> eps = random_mat<double>(6, 64, d);
        MatX<double> cond = MatX<double>::Zero(6, 3);
        std::vector<int> ts;
        for (int i = 0; i < 6; ++i) {
            cond(i, i % 3) = 1.0;
            ts.push_back(1 + int(d.uniform_index(20)));
        }
        loss_simple_batch(net, x0, ts, cond, eps, sched, 1.0);
    }
    auto g = net.gradients();
    for (const auto& seg : net.param_segments()) {
        bool any = false;
        for (std::size_t i = 0; i < std::size_t(seg.rows) * seg.cols; ++i)
            any |= g[seg.offset + i] != 0.0;
        INFO("segment ", seg.name);
        CHECK(any);
    }
}

TEST_CASE("snapshot/restore round-trips bit-exactly") {
    UNet<float> net(tiny_arch());
    Rng r(3);
    net.init_params(r);
    Rng d(6);
    MatX<float> x = random_mat<float>(2, 64, d);
    MatX<float> cond = MatX<float>::Zero(2, 3);
    cond.col(1).setOnes();
    MatX<float> before, after;
    net.forward(x, {4, 9}, cond, before);

    auto snap = snapshot(net, 123, 1);
    CHECK(l2_distance_sq(net, snap) == 0.0);

    // mutate
    for (auto& v : net.parameters()) v += 0.01f;
    CHECK(l2_distance_sq(net, snap) > 0.0);
    // snapshot is unaffected by the mutation
    std::uint64_t h = 0;
    for (float v : snap.values) {
        std::uint32_t bits;
        std::memcpy(&bits, &v, 4);
        h = h * 1099511628211ull + bits;
    }
    restore(net, snap);
    net.forward(x, {4, 9}, cond, after);
    CHECK((before - after).cwiseAbs().maxCoeff() == 0.0f);
    std::uint64_t h2 = 0;
    for (float v : snap.values) {
        std::uint32_t bits;
        std::memcpy(&bits, &v, 4);
        h2 = h2 * 1099511628211ull + bits;
    }
    CHECK(h == h2);
}

TEST_CASE("restore rejects architecture mismatch") {
    UNet<float> a(tiny_arch());
    ArchConfig other = tiny_arch();
    other.base_width = 4;
    UNet<float> b(other);
    Rng r(1);
    a.init_params(r);
    auto snap = snapshot(a);
    CHECK_THROWS(restore(b, snap));
    CHECK_THROWS(l2_distance_sq(b, snap));
}

TEST_CASE("l2 distance: single perturbation and extended-precision oracle") {
    UNet<float> net(tiny_arch());
    Rng r(5);
    net.init_params(r);
    auto snap = snapshot(net);
    auto p = net.parameters();

    p[17] += 0.25f;
    double d2 = l2_distance_sq(net, snap);
    double delta = double(p[17]) - double(snap.values[17]);
    CHECK(d2 == doctest::Approx(delta * delta).epsilon(1e-12));
    p[17] = snap.values[17];

    Rng d(14);
    long double oracle = 0.0L;
    for (std::size_t i = 0; i < p.size(); ++i) {
        float v = float(0.01 * d.normal());
        p[i] += v;
        long double diff = (long double)(p[i]) - (long double)(snap.values[i]);
        oracle += diff * diff;
    }
    CHECK(l2_distance_sq(net, snap) == doctest::Approx(double(oracle)).epsilon(1e-6));
}

TEST_CASE("parameters move after training steps") {
    UNet<float> net(tiny_arch());
    Rng r(6);
    net.init_params(r);
    auto snap = snapshot(net);
    auto sched = make_linear_schedule(20, 0.05, 0.3);
    Adam<float> opt(net.parameters().size(), 2e-4);
    Rng d(21);
    for (int step = 0; step < 10; ++step) {
        MatX<float> x0 = random_mat<float>(8, 64, d).cwiseMax(-1.0f).cwiseMin(1.0f);
        MatX<float> eps = random_mat<float>(8, 64, d);
        MatX<float> cond = MatX<float>::Zero(8, 3);
        std::vector<int> ts;
        for (int i = 0; i < 8; ++i) {
            cond(i, 0) = 1.0f;
            ts.push_back(1 + int(d.uniform_index(20)));
        }
        net.zero_grad();
        loss_simple_batch(net, x0, ts, cond, eps, sched, 1.0);
        opt.step(net.parameters(), net.gradients());
    }
    CHECK(l2_distance_sq(net, snap) > 0.0);
}

TEST_CASE("adam first step moves by ~lr in the gradient sign direction") {
    std::vector<float> p{1.0f}, g{0.5f};
    Adam<float> opt(1, 1e-3);
    opt.step(std::span<float>(p), std::span<const float>(g.data(), 1));
    CHECK(p[0] == doctest::Approx(1.0 - 1e-3).epsilon(1e-4));
}

TEST_CASE("conditioning is consumed by a trained two-task model") {
    ArchConfig cfg = tiny_arch();
    cfg.n_conditions = 2;
    UNet<float> net(cfg);
    Rng r(9);
    net.init_params(r);
    auto sched = make_linear_schedule(20, 0.05, 0.3);
    Adam<float> opt(net.parameters().size(), 3e-3);
    Rng d(33);
    // condition 0 sees constant +0.6 images, condition 1 constant -0.6: the
    // optimal eps prediction differs by condition
    for (int step = 0; step < 120; ++step) {
        const int n = 16;
        MatX<float> x0(n, 64), eps(n, 64), cond = MatX<float>::Zero(n, 2);
        std::vector<int> ts;
        for (int i = 0; i < n; ++i) {
            int c = i % 2;
            cond(i, c) = 1.0f;
            x0.row(i).setConstant(c == 0 ? 0.6f : -0.6f);
            ts.push_back(1 + int(d.uniform_index(20)));
        }
        eps.setZero();
        d.fill_normal(eps.data(), std::size_t(eps.size()));
        net.zero_grad();
        loss_simple_batch(net, x0, ts, cond, eps, sched, 1.0);
        opt.step(net.parameters(), net.gradients());
    }
    MatX<float> x = random_mat<float>(1, 64, d), o0, o1, oz;
    MatX<float> c0 = MatX<float>::Zero(1, 2), c1 = MatX<float>::Zero(1, 2),
                cz = MatX<float>::Zero(1, 2);
    c0(0, 0) = 1.0f;
    c1(0, 1) = 1.0f;
    net.forward(x, {10}, c0, o0);
    net.forward(x, {10}, c1, o1);
    net.forward(x, {10}, cz, oz);
    CHECK((o0 - o1).norm() > 0.0f);
    CHECK((o0 - oz).norm() > 0.0f);  // zeroing the condition changes output
}
