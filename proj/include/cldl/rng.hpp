#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <string>
#include <string_view>

namespace cldl {

// 64-bit FNV-1a, used to derive per-purpose stream seeds from names.
inline std::uint64_t fnv1a64(std::string_view s) {
    std::uint64_t h = 1469598103934665603ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

// Deterministic random stream. Wraps mt19937_64; normal variates use
// Box-Muller on raw uniforms so the stream is stateless between calls and
// serializes exactly (std::normal_distribution caches a spare value and its
// text representation is not portable across calls).
class Rng {
  public:
    Rng() : engine_(0) {}
    explicit Rng(std::uint64_t seed) : engine_(splitmix64(seed)) {}

    // Independent named stream derived from a root seed.
    static Rng stream(std::uint64_t root, std::string_view name) {
        return Rng(splitmix64(root ^ fnv1a64(name)));
    }
    static Rng stream(std::uint64_t root, std::string_view name, std::uint64_t a,
                      std::uint64_t b = 0) {
        std::uint64_t h = splitmix64(root ^ fnv1a64(name));
        h = splitmix64(h ^ (a * 0x9e3779b97f4a7c15ull));
        h = splitmix64(h ^ (b * 0xd1b54a32d192ed03ull));
        return Rng(h);
    }

    std::uint64_t next_u64() { return engine_(); }

    // Uniform in [0, 1), 53 usable bits.
    double uniform() { return double(engine_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Uniform integer in [0, n).
    std::uint64_t uniform_index(std::uint64_t n) {
        // modulo bias is negligible for n << 2^64 but reject anyway
        std::uint64_t limit = ~std::uint64_t(0) - (~std::uint64_t(0) % n);
        std::uint64_t v;
        do {
            v = engine_();
        } while (v >= limit);
        return v % n;
    }

    double normal() {
        double u1 = uniform(), u2 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586477 * u2);
    }

    // Fills a span with N(0,1) draws, consuming two uniforms per pair.
    template <class T>
    void fill_normal(T* out, std::size_t n) {
        std::size_t i = 0;
        while (i + 1 < n) {
            double u1 = uniform(), u2 = uniform();
            while (u1 <= 0.0) u1 = uniform();
            double r = std::sqrt(-2.0 * std::log(u1));
            double a = 6.283185307179586477 * u2;
            out[i] = static_cast<T>(r * std::cos(a));
            out[i + 1] = static_cast<T>(r * std::sin(a));
            i += 2;
        }
        if (i < n) out[i] = static_cast<T>(normal());
    }

    template <class It>
    void shuffle(It first, It last) {
        auto n = static_cast<std::uint64_t>(last - first);
        for (std::uint64_t i = n; i > 1; --i) {
            std::uint64_t j = uniform_index(i);
            std::swap(first[i - 1], first[j]);
        }
    }

    std::string serialize() const {
        std::ostringstream os;
        os << engine_;
        return os.str();
    }
    void deserialize(const std::string& s) {
        std::istringstream is(s);
        is >> engine_;
    }

    bool operator==(const Rng& o) const { return engine_ == o.engine_; }

  private:
    std::mt19937_64 engine_;
};

}  // namespace cldl
