#pragma once

#include <cstdint>
#include <cmath>
#include <numbers>
#include <stdexcept>

namespace cfgen {

// Counter-based 64-bit generator. Output i is the splitmix64 finalizer applied
// to key + i*gamma, so a stream is fully determined by (seed, substream path)
// and independent of call interleaving across streams. substream(i) derives a
// child stream by remixing the key with i; trainers give each novel target its
// own substream (index = class/sample id) so results do not depend on
// evaluation order.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : key_(mix64(seed ^ 0x9E3779B97F4A7C15ull)) {}

    std::uint64_t next_u64() {
        counter_ += 0x9E3779B97F4A7C15ull;
        return mix64(key_ + counter_);
    }

    // uniform in [0, 1) with 53 random bits
    double next_double() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    // unbiased uniform integer in [0, n)
    std::size_t next_below(std::size_t n) {
        if (n == 0) throw std::invalid_argument("Rng::next_below: n == 0");
        const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        std::uint64_t x;
        do {
            x = next_u64();
        } while (x >= limit);
        return static_cast<std::size_t>(x % n);
    }

    // standard normal via Box-Muller, one spare cached
    double next_gaussian() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = next_double();
        double u2 = next_double();
        while (u1 == 0.0) u1 = next_double();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double t = 2.0 * std::numbers::pi * u2;
        spare_ = r * std::sin(t);
        have_spare_ = true;
        return r * std::cos(t);
    }

    Rng substream(std::uint64_t index) const {
        Rng child(0);
        child.key_ = mix64(key_ ^ mix64(index + 0xD1B54A32D192ED03ull));
        child.counter_ = 0;
        return child;
    }

private:
    static std::uint64_t mix64(std::uint64_t z) {
        z += 0x9E3779B97F4A7C15ull;
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
        return z ^ (z >> 31);
    }

    std::uint64_t key_ = 0;
    std::uint64_t counter_ = 0;
    double spare_ = 0.0;
    bool have_spare_ = false;
};

} // namespace cfgen
