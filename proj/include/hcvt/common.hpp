#pragma once

// Shared infrastructure: error types, logging, seeded RNG streams, hashing.

#include <cstdarg>
#include <cstdint>
#include <cstdio>
#include <cmath>
#include <stdexcept>
#include <string>

namespace hcvt {

// -----------------------------------------------------------------------------
// Errors. contract_error -> caller violated a documented precondition,
// config_error -> bad configuration, io_error -> filesystem/format trouble,
// validation_error -> bad input data (CSV rows etc).
// -----------------------------------------------------------------------------
struct contract_error : std::runtime_error {
    explicit contract_error(const std::string& m) : std::runtime_error(m) {}
};
struct config_error : std::runtime_error {
    explicit config_error(const std::string& m) : std::runtime_error(m) {}
};
struct io_error : std::runtime_error {
    explicit io_error(const std::string& m) : std::runtime_error(m) {}
};
struct validation_error : std::runtime_error {
    explicit validation_error(const std::string& m) : std::runtime_error(m) {}
};

inline std::string strfmt(const char* fmt, ...) {
    va_list ap;
    va_start(ap, fmt);
    char buf[1024];
    std::vsnprintf(buf, sizeof(buf), fmt, ap);
    va_end(ap);
    return std::string(buf);
}

// -----------------------------------------------------------------------------
// Logging: stderr, level filtered by HCVT_LOG (debug|info|warn|error).
// -----------------------------------------------------------------------------
namespace logging {

enum class Level { debug = 0, info = 1, warn = 2, error = 3 };

Level threshold();
void emit(Level lv, const std::string& msg);

}  // namespace logging

inline void log_debug(const std::string& m) { logging::emit(logging::Level::debug, m); }
inline void log_info(const std::string& m) { logging::emit(logging::Level::info, m); }
inline void log_warn(const std::string& m) { logging::emit(logging::Level::warn, m); }
inline void log_error(const std::string& m) { logging::emit(logging::Level::error, m); }

// -----------------------------------------------------------------------------
// Hashing. FNV-1a 64 over bytes; splitmix64 for stream derivation.
// -----------------------------------------------------------------------------
inline std::uint64_t fnv1a64(const void* data, std::size_t n, std::uint64_t h = 0xcbf29ce484222325ULL) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline std::uint64_t fnv1a64(const std::string& s, std::uint64_t h = 0xcbf29ce484222325ULL) {
    return fnv1a64(s.data(), s.size(), h);
}

inline std::uint64_t fnv1a64(const char* s, std::uint64_t h = 0xcbf29ce484222325ULL) {
    return fnv1a64(std::string(s), h);
}

std::string hex64(std::uint64_t v);

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
    return splitmix64(a ^ splitmix64(b + 0x632be59bd9b4e019ULL));
}

inline std::uint64_t mix_seed(std::uint64_t a, const std::string& s) {
    return mix_seed(a, fnv1a64(s));
}

// -----------------------------------------------------------------------------
// Rng: xoshiro256++ behind hand-rolled samplers so that streams are
// bit-reproducible across standard libraries (std:: distributions are not).
// -----------------------------------------------------------------------------
class Rng {
public:
    explicit Rng(std::uint64_t seed = 0) {
        std::uint64_t x = seed;
        for (auto& w : s_) {
            x = splitmix64(x);
            w = x;
        }
        has_spare_ = false;
    }

    std::uint64_t next_u64() {
        const std::uint64_t result = rotl(s_[0] + s_[3], 23) + s_[0];
        const std::uint64_t t = s_[1] << 17;
        s_[2] ^= s_[0];
        s_[3] ^= s_[1];
        s_[1] ^= s_[2];
        s_[0] ^= s_[3];
        s_[2] ^= t;
        s_[3] = rotl(s_[3], 45);
        return result;
    }

    // Uniform in [0, 1).
    double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Uniform integer in [lo, hi] inclusive.
    std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
        const std::uint64_t span = std::uint64_t(hi - lo) + 1;
        const std::uint64_t limit = UINT64_MAX - UINT64_MAX % span;
        std::uint64_t x;
        do {
            x = next_u64();
        } while (x >= limit);
        return lo + std::int64_t(x % span);
    }

    bool bernoulli(double p) { return uniform() < p; }

    // Standard normal, Box-Muller with cached spare.
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double a = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(a);
        has_spare_ = true;
        return r * std::cos(a);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    // Beta(a, a) via Johnk's method (intended for a <= 1, e.g. mixup alpha).
    double beta_symmetric(double a) {
        for (;;) {
            const double x = std::pow(uniform(), 1.0 / a);
            const double y = std::pow(uniform(), 1.0 / a);
            if (x + y <= 1.0 && x + y > 0.0) return x / (x + y);
        }
    }

private:
    static std::uint64_t rotl(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }
    std::uint64_t s_[4];
    double spare_ = 0.0;
    bool has_spare_;
};

// Worker parallelism cap: HCVT_THREADS, default = hardware concurrency.
int worker_threads();

}  // namespace hcvt
