#include <cmath>
#include <vector>

#include "cldl/rng.hpp"
#include "doctest.h"

using namespace cldl;

TEST_CASE("streams are deterministic and name-separated") {
    Rng a = Rng::stream(42, "noise");
    Rng b = Rng::stream(42, "noise");
    Rng c = Rng::stream(42, "batch");
    for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());
    bool any_diff = false;
    Rng a2 = Rng::stream(42, "noise");
    for (int i = 0; i < 100; ++i) any_diff |= (a2.next_u64() != c.next_u64());
    CHECK(any_diff);
}

TEST_CASE("indexed stream derivation separates cells") {
    Rng a = Rng::stream(7, "fid_path", 0);
    Rng b = Rng::stream(7, "fid_path", 1);
    CHECK(a.next_u64() != b.next_u64());
    Rng a2 = Rng::stream(7, "fid_path", 0);
    a2.next_u64();
    CHECK(Rng::stream(7, "fid_path", 0).next_u64() == Rng::stream(7, "fid_path", 0).next_u64());
}

TEST_CASE("serialize round-trips mid-stream") {
    Rng a(9);
    std::vector<double> burn(37);
    a.fill_normal(burn.data(), burn.size());
    std::string state = a.serialize();
    Rng b;
    b.deserialize(state);
    for (int i = 0; i < 50; ++i) CHECK(a.uniform() == b.uniform());
    std::vector<float> x(11), y(11);
    a.fill_normal(x.data(), x.size());
    b.fill_normal(y.data(), y.size());
    for (int i = 0; i < 11; ++i) CHECK(x[std::size_t(i)] == y[std::size_t(i)]);
}

TEST_CASE("normal moments over 1e5 draws") {
    Rng r(1234);
    const int n = 100000;
    double sum = 0, sq = 0;
    std::vector<double> xs(n);
    r.fill_normal(xs.data(), xs.size());
    for (double v : xs) {
        sum += v;
        sq += v * v;
    }
    double mean = sum / n, var = sq / n - mean * mean;
    CHECK(std::abs(mean) < 3.0 / std::sqrt(double(n)));
    CHECK(std::abs(var - 1.0) < 3.0 * std::sqrt(2.0 / n));
}

TEST_CASE("uniform_index stays in range and covers") {
    Rng r(5);
    std::vector<int> hits(7, 0);
    for (int i = 0; i < 7000; ++i) ++hits[std::size_t(r.uniform_index(7))];
    for (int h : hits) CHECK(h > 800);
}

TEST_CASE("shuffle is a permutation") {
    Rng r(3);
    std::vector<int> v(100);
    for (int i = 0; i < 100; ++i) v[std::size_t(i)] = i;
    r.shuffle(v.begin(), v.end());
    std::vector<int> sorted = v;
    std::sort(sorted.begin(), sorted.end());
    for (int i = 0; i < 100; ++i) CHECK(sorted[std::size_t(i)] == i);
}
