#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

namespace af {

// Stream derivation. All randomness in the project flows through named
// streams derived from a run seed, so adding or removing one consumer never
// shifts the draws seen by another. std::mt19937_64 is bit-exact by the
// standard; the value transforms below are our own, so outputs are
// reproducible across platforms.

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

inline std::uint64_t hash_str(std::string_view s) {
    std::uint64_t h = 0xcbf29ce484222325ull;  // FNV-1a
    for (char c : s) {
        h ^= static_cast<unsigned char>(c);
        h *= 0x100000001b3ull;
    }
    return h;
}

inline std::uint64_t derive_seed(std::uint64_t seed, std::string_view stream) {
    return splitmix64(seed ^ hash_str(stream));
}

inline std::uint64_t derive_seed(std::uint64_t seed, std::string_view stream, std::uint64_t a) {
    return splitmix64(derive_seed(seed, stream) ^ splitmix64(a));
}

inline std::uint64_t derive_seed(std::uint64_t seed, std::string_view stream, std::uint64_t a,
                                 std::uint64_t b) {
    return splitmix64(derive_seed(seed, stream, a) ^ splitmix64(b + 0x9e3779b9ull));
}

class RandomSource {
public:
    explicit RandomSource(std::uint64_t seed) : eng_(seed) {}

    double uniform01() {
        // 53-bit mantissa construction; never returns 1.0.
        return static_cast<double>(eng_() >> 11) * 0x1.0p-53;
    }

    double gauss() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        // Box-Muller; 1-u keeps the log argument strictly positive.
        const double u = 1.0 - uniform01();
        const double v = uniform01();
        const double r = std::sqrt(-2.0 * std::log(u));
        const double a = 6.283185307179586 * v;
        spare_ = r * std::sin(a);
        has_spare_ = true;
        return r * std::cos(a);
    }

    double gauss(double mu, double sigma) { return mu + sigma * gauss(); }

    // Truncated at two standard deviations, the usual transformer init.
    double trunc_normal(double sigma) {
        double v = gauss();
        while (v < -2.0 || v > 2.0) {
            v = gauss();
        }
        return v * sigma;
    }

    // Uniform integer in [0, n) via rejection.
    std::uint64_t below(std::uint64_t n) {
        const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                                    std::numeric_limits<std::uint64_t>::max() % n;
        std::uint64_t x = eng_();
        while (x >= limit) {
            x = eng_();
        }
        return x % n;
    }

    int uniform_int(int n) { return static_cast<int>(below(static_cast<std::uint64_t>(n))); }

    template <class T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::swap(v[i - 1], v[below(i)]);
        }
    }

private:
    std::mt19937_64 eng_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace af
