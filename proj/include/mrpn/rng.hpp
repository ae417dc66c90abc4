#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <string_view>

namespace mrpn {

// splitmix64; used to derive per-stream seeds from (master seed, stream name).
inline std::uint64_t splitmix64(std::uint64_t& state) {
    std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

inline std::uint64_t hash_combine(std::uint64_t seed, std::string_view name) {
    std::uint64_t h = seed ^ 0x51afd7ed558ccd6dULL;
    for (unsigned char c : name) {
        h ^= c;
        h *= 0x100000001b3ULL;
        std::uint64_t s = h;
        h = splitmix64(s);
    }
    return h;
}

// Counter-free xoshiro256** generator. Distribution sampling is hand-rolled
// (not std::uniform_real_distribution) so output is bit-stable across
// standard libraries and compilers.
class RngStream {
public:
    RngStream() : RngStream(0) {}

    explicit RngStream(std::uint64_t seed) {
        std::uint64_t sm = seed;
        for (auto& word : state_) word = splitmix64(sm);
    }

    std::uint64_t next_u64() {
        ++draws_;
        const std::uint64_t result = rotl(state_[1] * 5, 7) * 9;
        const std::uint64_t t = state_[1] << 17;
        state_[2] ^= state_[0];
        state_[3] ^= state_[1];
        state_[1] ^= state_[2];
        state_[0] ^= state_[3];
        state_[2] ^= t;
        state_[3] = rotl(state_[3], 45);
        return result;
    }

    // Uniform on [0, 1) with 53 significant bits.
    double u01() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * u01(); }

    // Uniform integer in [0, n).
    std::uint64_t uniform_int(std::uint64_t n) { return next_u64() % n; }

    // Uniform integer in [lo, hi] inclusive.
    long long uniform_int(long long lo, long long hi) {
        return lo + static_cast<long long>(uniform_int(static_cast<std::uint64_t>(hi - lo + 1)));
    }

    double normal(double mean = 0.0, double stddev = 1.0) {
        if (have_spare_) {
            have_spare_ = false;
            return mean + stddev * spare_;
        }
        double u, v, s;
        do {
            u = 2.0 * u01() - 1.0;
            v = 2.0 * u01() - 1.0;
            s = u * u + v * v;
        } while (s >= 1.0 || s == 0.0);
        const double f = std::sqrt(-2.0 * std::log(s) / s);
        spare_ = v * f;
        have_spare_ = true;
        return mean + stddev * (u * f);
    }

    // Number of raw generator invocations so far. Lets tests assert that a
    // code path consumed no randomness.
    std::uint64_t draw_count() const { return draws_; }

private:
    static std::uint64_t rotl(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

    std::uint64_t state_[4] = {};
    std::uint64_t draws_ = 0;
    bool have_spare_ = false;
    double spare_ = 0.0;
};

// One master seed per run; every consumer (init, dropout, data, shuffle, ...)
// gets an independent stream derived from its name, so adding a consumer
// does not perturb the draws seen by the others.
class RngHub {
public:
    explicit RngHub(std::uint64_t master_seed = 0) : master_(master_seed) {}

    std::uint64_t master_seed() const { return master_; }

    RngStream stream(std::string_view name) const {
        return RngStream(hash_combine(master_, name));
    }

    RngHub fork(std::string_view name) const { return RngHub(hash_combine(master_, name)); }

private:
    std::uint64_t master_;
};

} // namespace mrpn
