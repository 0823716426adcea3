#pragma once

#include <algorithm>
#include <cstdint>
#include <cmath>
#include <cstdio>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

namespace s2scast {

// ---------------------------------------------------------------------------
// Error taxonomy. Every load/validation failure surfaces as one of these so
// callers (and the CLI exit-code mapping) can tell malformed bytes from bad
// arguments from numeric trouble.
// ---------------------------------------------------------------------------

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct FormatError : Error { using Error::Error; };       // bad magic / wrong file type
struct CorruptionError : Error { using Error::Error; };   // dimension/payload mismatch
struct ValidationError : Error { using Error::Error; };   // violated type invariant
struct ParseError : Error { using Error::Error; };        // unparseable text, carries line info
struct ArgumentError : Error { using Error::Error; };     // bad call arguments
struct ShapeError : ArgumentError { using ArgumentError::ArgumentError; };
struct DomainError : Error { using Error::Error; };       // target outside source domain
struct CoverageError : Error { using Error::Error; };     // date/day-of-year not covered by data
struct ConfigError : Error { using Error::Error; };       // invalid configuration
struct IoError : Error { using Error::Error; };
struct NumericError : Error { using Error::Error; };      // NaN loss, degenerate variance, ...
struct EvaluationError : Error { using Error::Error; };

// ---------------------------------------------------------------------------
// Calendar. Time axis unit across the library: integer days since 1900-01-01.
// ---------------------------------------------------------------------------

struct CivilDate {
    int year = 1900;
    int month = 1;  // 1..12
    int day = 1;    // 1..31
};

constexpr bool is_leap_year(int y) {
    return (y % 4 == 0 && y % 100 != 0) || y % 400 == 0;
}

constexpr int days_in_month(int y, int m) {
    constexpr int len[12] = {31, 28, 31, 30, 31, 30, 31, 31, 30, 31, 30, 31};
    if (m == 2 && is_leap_year(y)) return 29;
    return len[m - 1];
}

// days_from_civil / civil_from_days follow the standard proleptic-Gregorian
// arithmetic, shifted so day 0 is 1900-01-01.
constexpr std::int64_t days_from_civil(int y, int m, int d) {
    y -= m <= 2;
    const std::int64_t era = (y >= 0 ? y : y - 399) / 400;
    const unsigned yoe = static_cast<unsigned>(y - era * 400);
    const unsigned doy = (153u * (m + (m > 2 ? -3 : 9)) + 2u) / 5u + d - 1;
    const unsigned doe = yoe * 365 + yoe / 4 - yoe / 100 + doy;
    return era * 146097 + static_cast<std::int64_t>(doe) - 693901;  // 693901 = civil(1900,1,1) from 0000-03-01
}

constexpr std::int64_t to_epoch_days(const CivilDate& c) {
    return days_from_civil(c.year, c.month, c.day);
}

constexpr CivilDate civil_from_days(std::int64_t z) {
    z += 693901;
    const std::int64_t era = (z >= 0 ? z : z - 146096) / 146097;
    const unsigned doe = static_cast<unsigned>(z - era * 146097);
    const unsigned yoe = (doe - doe / 1460 + doe / 36524 - doe / 146096) / 365;
    const std::int64_t y = static_cast<std::int64_t>(yoe) + era * 400;
    const unsigned doy = doe - (365 * yoe + yoe / 4 - yoe / 100);
    const unsigned mp = (5 * doy + 2) / 153;
    const unsigned d = doy - (153 * mp + 2) / 5 + 1;
    const unsigned m = mp + (mp < 10 ? 3 : -9);
    return CivilDate{static_cast<int>(y + (m <= 2)), static_cast<int>(m), static_cast<int>(d)};
}

inline std::string format_iso_date(std::int64_t epoch_days) {
    const CivilDate c = civil_from_days(epoch_days);
    char buf[16];
    std::snprintf(buf, sizeof(buf), "%04d-%02d-%02d", c.year, c.month, c.day);
    return std::string(buf);
}

inline std::int64_t parse_iso_date(const std::string& s) {
    // strict YYYY-MM-DD, nothing shorter or longer
    const bool shaped = s.size() == 10 && s[4] == '-' && s[7] == '-' &&
                        std::all_of(s.begin(), s.end(), [](char c) {
                            return c == '-' || (c >= '0' && c <= '9');
                        });
    if (!shaped) throw ParseError("not an ISO-8601 date: '" + s + "'");
    const int y = std::stoi(s.substr(0, 4));
    const int m = std::stoi(s.substr(5, 2));
    const int d = std::stoi(s.substr(8, 2));
    if (m < 1 || m > 12 || d < 1 || d > days_in_month(y, m))
        throw ParseError("invalid calendar date: '" + s + "'");
    return days_from_civil(y, m, d);
}

// ---------------------------------------------------------------------------
// Deterministic RNG. splitmix64 streams plus a stateless counter hash used
// wherever masks must be reproducible independent of evaluation order.
// ---------------------------------------------------------------------------

constexpr std::uint64_t splitmix64_step(std::uint64_t& state) {
    state += 0x9e3779b97f4a7c15ULL;
    std::uint64_t z = state;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

// Order-free hash of a key tuple; the basis of dropout masks and derived seeds.
constexpr std::uint64_t mix_u64(std::uint64_t a, std::uint64_t b) {
    std::uint64_t s = a * 0x9e3779b97f4a7c15ULL + b;
    return splitmix64_step(s);
}

constexpr std::uint64_t counter_hash(std::uint64_t seed, std::uint64_t a,
                                     std::uint64_t b, std::uint64_t c) {
    return mix_u64(mix_u64(mix_u64(seed, a), b), c);
}

inline double u64_to_unit_double(std::uint64_t x) {
    return static_cast<double>(x >> 11) * 0x1.0p-53;  // [0, 1)
}

class Rng {
public:
    explicit Rng(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next_u64() { return splitmix64_step(state_); }

    double uniform() { return u64_to_unit_double(next_u64()); }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Box-Muller; avoids std::normal_distribution's unspecified algorithm.
    double gaussian() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = 0.0;
        do { u1 = uniform(); } while (u1 <= 0.0);
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double a = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(a);
        have_spare_ = true;
        return r * std::cos(a);
    }

    std::uint64_t uniform_index(std::uint64_t n) {
        // modulo bias negligible for n << 2^64
        return next_u64() % n;
    }

    Rng split(std::uint64_t stream) const { return Rng(mix_u64(state_, stream)); }

private:
    std::uint64_t state_;
    double spare_ = 0.0;
    bool have_spare_ = false;
};

// ---------------------------------------------------------------------------
// FNV-1a digests for manifests and determinism checks.
// ---------------------------------------------------------------------------

constexpr std::uint64_t kFnvOffset = 14695981039346656037ULL;
constexpr std::uint64_t kFnvPrime = 1099511628211ULL;

inline std::uint64_t fnv1a64(const void* data, std::size_t n, std::uint64_t h = kFnvOffset) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= kFnvPrime;
    }
    return h;
}

inline std::uint64_t fnv1a64(const std::string& s) { return fnv1a64(s.data(), s.size()); }

inline std::string hex_digest(std::uint64_t h) {
    char buf[24];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return std::string(buf);
}

// ---------------------------------------------------------------------------
// Small shared helpers.
// ---------------------------------------------------------------------------

inline bool all_finite(const std::vector<double>& v) {
    for (double x : v)
        if (!std::isfinite(x)) return false;
    return true;
}

inline bool all_finite(const std::vector<float>& v) {
    for (float x : v)
        if (!std::isfinite(x)) return false;
    return true;
}

template <typename T>
bool strictly_increasing(const std::vector<T>& v) {
    for (std::size_t i = 1; i < v.size(); ++i)
        if (!(v[i - 1] < v[i])) return false;
    return true;
}

template <typename T>
bool strictly_monotone(const std::vector<T>& v) {
    if (v.size() < 2) return true;
    bool inc = true, dec = true;
    for (std::size_t i = 1; i < v.size(); ++i) {
        if (!(v[i - 1] < v[i])) inc = false;
        if (!(v[i - 1] > v[i])) dec = false;
    }
    return inc || dec;
}

}  // namespace s2scast
