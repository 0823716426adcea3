#pragma once

// Synthetic climate world: a weekly regime Markov chain whose transitions are
// modulated by lagged driver states (a weak stratospheric vortex, an active
// MJO phase window), rendered into daily gridded fields and index series that
// the rest of the pipeline can consume. Every quantity the generator draws is
// also recorded in a weekly ledger so tests can audit the planted links by
// direct counting.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "s2scast/common.hpp"
#include "s2scast/drivers.hpp"
#include "s2scast/gridstore.hpp"
#include "s2scast/preprocess.hpp"
#include "s2scast/regimes.hpp"
#include "s2scast/training.hpp"

namespace s2scast {

// ---------------------------------------------------------------------------
// Configuration.
// ---------------------------------------------------------------------------

using TransitionMatrix = std::array<std::array<double, kNumRegimes>, kNumRegimes>;

// one planted teleconnection: when the driver condition held `lag_weeks`
// before a transition, the column of `boost_regime` is scaled by
// (1 + strength) and the row re-normalized
struct DriverLink {
    double strength = 0.0;  // 0 disables the link
    int lag_weeks = 0;
    int boost_regime = 1;  // NAO- by default
};

struct WorldConfig {
    TransitionMatrix transitions{};  // base weekly chain; rows must sum to 1

    // weekly AR(1) vortex index; weeks below the threshold count as weak
    double spv_ar_coeff = 0.85;
    double spv_noise_sigma = 1.0;
    double spv_weak_threshold = 0.0;
    DriverLink spv_link;

    // RMM vector rotating counterclockwise with a mean-reverting amplitude;
    // weeks whose (7-day trailing mean) phase class is flagged below trigger
    // the MJO link
    double mjo_angular_velocity = 45.0 / 7.0;  // degrees per day
    double mjo_amp_mean = 1.3;
    double mjo_amp_ar_coeff = 0.7;
    double mjo_amp_noise_sigma = 0.25;
    std::array<bool, kNumMjoClasses> mjo_boost_phases{};
    DriverLink mjo_link;

    // field rendering
    std::size_t n_lat = 8, n_lon = 32;
    std::vector<std::vector<double>> patterns;  // 4 maps of n_lat*n_lon; empty = defaults
    double pattern_scale = 1.0;
    double field_noise_sigma = 0.2;

    int first_winter_year = 1980;
    std::uint64_t seed = 0;

    void validate() const {
        for (const auto& row : transitions) {
            double sum = 0.0;
            for (double v : row) {
                if (!(v >= 0.0)) throw ConfigError("world: negative transition probability");
                sum += v;
            }
            if (std::fabs(sum - 1.0) > 1e-9)
                throw ConfigError("world: transition row sums to " + std::to_string(sum));
        }
        if (std::fabs(spv_ar_coeff) >= 1.0 || std::fabs(mjo_amp_ar_coeff) >= 1.0)
            throw ConfigError("world: AR coefficients must lie in (-1, 1)");
        if (spv_noise_sigma < 0.0 || mjo_amp_noise_sigma < 0.0 || field_noise_sigma < 0.0)
            throw ConfigError("world: noise scales must be non-negative");
        for (const DriverLink* link : {&spv_link, &mjo_link}) {
            if (link->lag_weeks < 0) throw ConfigError("world: link lag must be >= 0");
            if (link->strength <= -1.0)
                throw ConfigError("world: link strength must exceed -1");
            if (link->boost_regime < 0 || link->boost_regime >= kNumRegimes)
                throw ConfigError("world: link regime out of range");
        }
        if (n_lat < 2 || n_lon < 2) throw ConfigError("world: grid needs at least 2x2 cells");
        if (pattern_scale <= 0.0) throw ConfigError("world: pattern scale must be positive");
        if (!patterns.empty()) {
            if (patterns.size() != kNumRegimes)
                throw ConfigError("world: need one pattern per regime");
            for (const auto& p : patterns)
                if (p.size() != n_lat * n_lon)
                    throw ConfigError("world: pattern size does not match the grid");
            for (std::size_t a = 0; a < patterns.size(); ++a)
                for (std::size_t b = a + 1; b < patterns.size(); ++b) {
                    double dot = 0.0, na = 0.0, nb = 0.0;
                    for (std::size_t g = 0; g < patterns[a].size(); ++g) {
                        dot += patterns[a][g] * patterns[b][g];
                        na += patterns[a][g] * patterns[a][g];
                        nb += patterns[b][g] * patterns[b][g];
                    }
                    if (na == 0.0 || nb == 0.0 ||
                        std::fabs(dot) / std::sqrt(na * nb) > 0.999)
                        throw ConfigError("world: patterns " + std::to_string(a) + " and " +
                                          std::to_string(b) + " are collinear");
                }
        }
    }
};

// default latitude axis: evenly spaced from 20N with the row nearest 60N
// snapped onto it exactly, so the vortex ring always has a home
inline std::vector<double> default_lats(std::size_t n_lat) {
    const double step = 70.0 / static_cast<double>(n_lat);
    std::vector<double> lats(n_lat);
    for (std::size_t i = 0; i < n_lat; ++i) lats[i] = 20.0 + static_cast<double>(i) * step;
    std::size_t ring = 0;
    for (std::size_t i = 1; i < n_lat; ++i)
        if (std::fabs(lats[i] - 60.0) < std::fabs(lats[ring] - 60.0)) ring = i;
    lats[ring] = 60.0;
    return lats;
}

inline std::vector<double> default_lons(std::size_t n_lon) {
    std::vector<double> lons(n_lon);
    for (std::size_t j = 0; j < n_lon; ++j)
        lons[j] = static_cast<double>(j) * 360.0 / static_cast<double>(n_lon);
    return lons;
}

// four mutually orthogonal cosine-product maps (distinct 2-d DCT modes),
// normalized to unit RMS
inline std::vector<std::vector<double>> default_patterns(std::size_t n_lat, std::size_t n_lon) {
    const std::array<std::array<int, 2>, kNumRegimes> modes{{{0, 1}, {1, 0}, {0, 2}, {1, 1}}};
    std::vector<std::vector<double>> out;
    for (const auto& m : modes) {
        std::vector<double> p(n_lat * n_lon);
        double ss = 0.0;
        for (std::size_t i = 0; i < n_lat; ++i)
            for (std::size_t j = 0; j < n_lon; ++j) {
                const double fy = std::cos(M_PI * m[0] * (static_cast<double>(i) + 0.5) /
                                           static_cast<double>(n_lat));
                const double fx = std::cos(M_PI * m[1] * (static_cast<double>(j) + 0.5) /
                                           static_cast<double>(n_lon));
                p[i * n_lon + j] = fy * fx;
                ss += fy * fx * fy * fx;
            }
        const double rms = std::sqrt(ss / static_cast<double>(p.size()));
        for (double& v : p) v /= rms;
        out.push_back(std::move(p));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Markov arithmetic shared by the generator and its audit oracles.
// ---------------------------------------------------------------------------

// transition row out of `prev` with the active driver boosts applied
inline std::array<double, kNumRegimes> modulated_row(const WorldConfig& cfg, int prev,
                                                     bool spv_weak, bool mjo_boost) {
    if (prev < 0 || prev >= kNumRegimes) throw ArgumentError("modulated_row: regime out of range");
    auto row = cfg.transitions[static_cast<std::size_t>(prev)];
    if (spv_weak && cfg.spv_link.strength != 0.0)
        row[static_cast<std::size_t>(cfg.spv_link.boost_regime)] *= 1.0 + cfg.spv_link.strength;
    if (mjo_boost && cfg.mjo_link.strength != 0.0)
        row[static_cast<std::size_t>(cfg.mjo_link.boost_regime)] *= 1.0 + cfg.mjo_link.strength;
    double sum = 0.0;
    for (double v : row) sum += v;
    for (double& v : row) v /= sum;
    return row;
}

inline TransitionMatrix matrix_multiply(const TransitionMatrix& a, const TransitionMatrix& b) {
    TransitionMatrix out{};
    for (std::size_t i = 0; i < kNumRegimes; ++i)
        for (std::size_t k = 0; k < kNumRegimes; ++k)
            for (std::size_t j = 0; j < kNumRegimes; ++j) out[i][j] += a[i][k] * b[k][j];
    return out;
}

inline TransitionMatrix matrix_power(const TransitionMatrix& m, int k) {
    if (k < 0) throw ArgumentError("matrix_power: negative exponent");
    TransitionMatrix out{};
    for (std::size_t i = 0; i < kNumRegimes; ++i) out[i][i] = 1.0;
    for (int step = 0; step < k; ++step) out = matrix_multiply(out, m);
    return out;
}

inline std::array<double, kNumRegimes> stationary_distribution(const TransitionMatrix& m) {
    std::array<double, kNumRegimes> pi;
    pi.fill(1.0 / kNumRegimes);
    for (int it = 0; it < 500; ++it) {
        std::array<double, kNumRegimes> next{};
        for (std::size_t i = 0; i < kNumRegimes; ++i)
            for (std::size_t j = 0; j < kNumRegimes; ++j) next[j] += pi[i] * m[i][j];
        pi = next;
    }
    return pi;
}

// Bayes accuracies for predicting the regime `lead` weeks out, with and
// without sight of the vortex indicator history. Treats weak-week indicators
// as independent Bernoulli draws with the stationary weak probability, which
// is exact when spv_ar_coeff is 0; requires the MJO link to be off and
// lead <= spv lag so every modulating indicator is observable at forecast
// time.
struct BayesRates {
    double aware = 0.0;
    double blind = 0.0;
};

inline BayesRates bayes_rates(const WorldConfig& cfg, int lead) {
    cfg.validate();
    if (cfg.mjo_link.strength != 0.0)
        throw ArgumentError("bayes_rates: closed form covers the vortex-only configuration");
    if (lead < 1 || lead > cfg.spv_link.lag_weeks)
        throw ArgumentError("bayes_rates: lead must lie in [1, spv lag]");
    const double sigma_stat =
        cfg.spv_noise_sigma / std::sqrt(1.0 - cfg.spv_ar_coeff * cfg.spv_ar_coeff);
    if (sigma_stat <= 0.0) throw DomainError("bayes_rates: vortex process is degenerate");
    const double q = normal_cdf((cfg.spv_weak_threshold - 0.0) / sigma_stat);

    TransitionMatrix plain{}, boosted{};
    for (int r = 0; r < kNumRegimes; ++r) {
        plain[static_cast<std::size_t>(r)] = modulated_row(cfg, r, false, false);
        boosted[static_cast<std::size_t>(r)] = modulated_row(cfg, r, true, false);
    }
    TransitionMatrix mixed{};
    for (std::size_t i = 0; i < kNumRegimes; ++i)
        for (std::size_t j = 0; j < kNumRegimes; ++j)
            mixed[i][j] = (1.0 - q) * plain[i][j] + q * boosted[i][j];
    const auto pi = stationary_distribution(mixed);

    BayesRates out;
    const auto blind_k = matrix_power(mixed, lead);
    for (std::size_t r = 0; r < kNumRegimes; ++r)
        out.blind += pi[r] * *std::max_element(blind_k[r].begin(), blind_k[r].end());

    // enumerate the 2^lead indicator paths the informed predictor can see
    for (int mask = 0; mask < (1 << lead); ++mask) {
        TransitionMatrix prod{};
        for (std::size_t i = 0; i < kNumRegimes; ++i) prod[i][i] = 1.0;
        double weight = 1.0;
        for (int step = 0; step < lead; ++step) {
            const bool weak = (mask >> step) & 1;
            prod = matrix_multiply(prod, weak ? boosted : plain);
            weight *= weak ? q : 1.0 - q;
        }
        for (std::size_t r = 0; r < kNumRegimes; ++r)
            out.aware += weight * pi[r] * *std::max_element(prod[r].begin(), prod[r].end());
    }
    return out;
}

// ---------------------------------------------------------------------------
// Generation.
// ---------------------------------------------------------------------------

// everything the generator decided for one 7-day block, for audit oracles
struct WeekState {
    int winter = 0;
    int week = 0;                  // block index within the winter
    std::int64_t anchor_time = 0;  // last day of the block
    int regime = 0;
    double spv = 0.0;          // weekly vortex level, held through the block
    double rmm1 = 0.0;         // trailing 7-day RMM mean at the anchor day
    double rmm2 = 0.0;
    int mjo_class = 0;         // phase class of that trailing mean
    bool spv_weak = false;
    bool mjo_boosting = false;
};

struct SynthWorld {
    GriddedField z500;
    GriddedField u10;
    GriddedField olr;  // tropical wave stream for the second encoder
    DatedSeries rmm1, rmm2;
    RegimeSeries truth;             // daily ground-truth labels
    std::vector<WeekState> weekly;  // generator ledger, winter-major order
};

namespace detail {

// separable [1,2,1]/4 smoothing with clamped edges, applied in place
inline void smooth2d(std::vector<double>& v, std::size_t h, std::size_t w) {
    std::vector<double> tmp(v.size());
    for (std::size_t i = 0; i < h; ++i)
        for (std::size_t j = 0; j < w; ++j) {
            const std::size_t jl = j == 0 ? 0 : j - 1;
            const std::size_t jr = j + 1 == w ? j : j + 1;
            tmp[i * w + j] =
                0.25 * v[i * w + jl] + 0.5 * v[i * w + j] + 0.25 * v[i * w + jr];
        }
    for (std::size_t i = 0; i < h; ++i)
        for (std::size_t j = 0; j < w; ++j) {
            const std::size_t iu = i == 0 ? 0 : i - 1;
            const std::size_t id = i + 1 == h ? i : i + 1;
            v[i * w + j] =
                0.25 * tmp[iu * w + j] + 0.5 * tmp[i * w + j] + 0.25 * tmp[id * w + j];
        }
}

inline int sample_categorical(const std::array<double, kNumRegimes>& probs, Rng& rng) {
    const double u = rng.uniform();
    double acc = 0.0;
    for (int c = 0; c < kNumRegimes; ++c) {
        acc += probs[static_cast<std::size_t>(c)];
        if (u < acc) return c;
    }
    return kNumRegimes - 1;
}

}  // namespace detail

inline SynthWorld generate(const WorldConfig& cfg, int n_winters) {
    cfg.validate();
    if (n_winters < 1) throw ArgumentError("generate: need at least one winter");

    const auto patterns =
        cfg.patterns.empty() ? default_patterns(cfg.n_lat, cfg.n_lon) : cfg.patterns;
    const auto lats = default_lats(cfg.n_lat);
    const auto lons = default_lons(cfg.n_lon);
    const std::size_t grid = cfg.n_lat * cfg.n_lon;

    SynthWorld world;
    world.z500.variable_name = "z500";
    world.z500.units = "m";
    world.u10.variable_name = "u10";
    world.u10.units = "m s-1";
    world.olr.variable_name = "olr";
    world.olr.units = "W m-2";
    for (GriddedField* f : {&world.z500, &world.u10, &world.olr}) {
        f->lats = lats;
        f->lons = lons;
    }

    // ring and tropics profiles for the driver fields
    std::vector<double> ring(cfg.n_lat), tropics(cfg.n_lat);
    for (std::size_t i = 0; i < cfg.n_lat; ++i) {
        ring[i] = std::exp(-std::pow((lats[i] - 60.0) / 8.0, 2.0));
        tropics[i] = std::exp(-std::pow((lats[i] - 25.0) / 15.0, 2.0));
    }

    const int burn = std::max(cfg.spv_link.lag_weeks, cfg.mjo_link.lag_weeks);
    const double spv_stat_sd =
        cfg.spv_noise_sigma / std::sqrt(1.0 - cfg.spv_ar_coeff * cfg.spv_ar_coeff);
    const auto pi0 = stationary_distribution(cfg.transitions);

    for (int winter = 0; winter < n_winters; ++winter) {
        const int year = cfg.first_winter_year + winter;
        const std::int64_t first_day = to_epoch_days(CivilDate{year, 11, 10});
        const std::int64_t last_day = to_epoch_days(CivilDate{year + 1, 3, 31});
        const int n_days = static_cast<int>(last_day - first_day) + 1;
        const int n_blocks = n_days / 7;

        Rng rng_chain(counter_hash(cfg.seed, 101, static_cast<std::uint64_t>(winter), 0));
        Rng rng_spv(counter_hash(cfg.seed, 102, static_cast<std::uint64_t>(winter), 0));
        Rng rng_mjo(counter_hash(cfg.seed, 103, static_cast<std::uint64_t>(winter), 0));
        Rng rng_noise(counter_hash(cfg.seed, 104, static_cast<std::uint64_t>(winter), 0));

        // vortex level per block, with a burn-in prefix for the lag lookups
        std::vector<double> spv(static_cast<std::size_t>(burn + n_blocks));
        spv[0] = spv_stat_sd * rng_spv.gaussian();
        for (std::size_t w = 1; w < spv.size(); ++w)
            spv[w] = cfg.spv_ar_coeff * spv[w - 1] + cfg.spv_noise_sigma * rng_spv.gaussian();

        // daily RMM over the burn-in plus the emitted days
        const int pre_days = burn * 7;
        const int total_days = pre_days + n_days;
        std::vector<double> rmm1(static_cast<std::size_t>(total_days));
        std::vector<double> rmm2(static_cast<std::size_t>(total_days));
        double theta = rng_mjo.uniform(0.0, 360.0);
        double amp = cfg.mjo_amp_mean;
        for (int d = 0; d < total_days; ++d) {
            if (d % 7 == 0) {
                amp = cfg.mjo_amp_mean +
                      cfg.mjo_amp_ar_coeff * (amp - cfg.mjo_amp_mean) +
                      cfg.mjo_amp_noise_sigma * rng_mjo.gaussian();
                amp = std::max(amp, 0.0);
            }
            const double rad = theta * M_PI / 180.0;
            rmm1[static_cast<std::size_t>(d)] = amp * std::cos(rad);
            rmm2[static_cast<std::size_t>(d)] = amp * std::sin(rad);
            theta += cfg.mjo_angular_velocity;
        }

        // trailing-week RMM mean and phase class per block, matching what the
        // index pipeline observes at each block's last day
        std::vector<double> wk_rmm1(spv.size()), wk_rmm2(spv.size());
        std::vector<int> wk_class(spv.size());
        for (std::size_t w = 0; w < spv.size(); ++w) {
            const int anchor = static_cast<int>(w) * 7 + 6;
            double m1 = 0.0, m2 = 0.0;
            for (int d = anchor - 6; d <= anchor; ++d) {
                m1 += rmm1[static_cast<std::size_t>(d)];
                m2 += rmm2[static_cast<std::size_t>(d)];
            }
            wk_rmm1[w] = m1 / 7.0;
            wk_rmm2[w] = m2 / 7.0;
            const double a = std::hypot(wk_rmm1[w], wk_rmm2[w]);
            wk_class[w] = a < 1.0 ? 0 : mjo_octant(wk_rmm1[w], wk_rmm2[w]);
        }

        // regime chain over the emitted blocks
        std::vector<int> regime(static_cast<std::size_t>(n_blocks));
        regime[0] = detail::sample_categorical(pi0, rng_chain);
        for (int w = 1; w < n_blocks; ++w) {
            const std::size_t spv_at =
                static_cast<std::size_t>(burn + w - cfg.spv_link.lag_weeks);
            const std::size_t mjo_at =
                static_cast<std::size_t>(burn + w - cfg.mjo_link.lag_weeks);
            const bool weak = spv[spv_at] < cfg.spv_weak_threshold;
            const bool boosting =
                cfg.mjo_boost_phases[static_cast<std::size_t>(wk_class[mjo_at])];
            const auto row =
                modulated_row(cfg, regime[static_cast<std::size_t>(w - 1)], weak, boosting);
            regime[static_cast<std::size_t>(w)] = detail::sample_categorical(row, rng_chain);
        }

        for (int w = 0; w < n_blocks; ++w) {
            WeekState ws;
            ws.winter = winter;
            ws.week = w;
            ws.anchor_time = first_day + 7 * w + 6;
            ws.regime = regime[static_cast<std::size_t>(w)];
            ws.spv = spv[static_cast<std::size_t>(burn + w)];
            ws.rmm1 = wk_rmm1[static_cast<std::size_t>(burn + w)];
            ws.rmm2 = wk_rmm2[static_cast<std::size_t>(burn + w)];
            ws.mjo_class = wk_class[static_cast<std::size_t>(burn + w)];
            ws.spv_weak = ws.spv < cfg.spv_weak_threshold;
            ws.mjo_boosting = cfg.mjo_boost_phases[static_cast<std::size_t>(ws.mjo_class)];
            world.weekly.push_back(ws);
        }

        // daily rendering; tail days past the last full block keep its state
        for (int d = 0; d < n_days; ++d) {
            const std::int64_t day = first_day + d;
            const int block = std::min(d / 7, n_blocks - 1);
            const int reg = regime[static_cast<std::size_t>(block)];
            const double s = spv[static_cast<std::size_t>(burn + block)];

            world.truth.times.push_back(day);
            world.truth.labels.push_back(reg);
            for (GriddedField* f : {&world.z500, &world.u10, &world.olr})
                f->times.push_back(day);
            world.rmm1.times.push_back(day);
            world.rmm1.values.push_back(rmm1[static_cast<std::size_t>(pre_days + d)]);
            world.rmm2.times.push_back(day);
            world.rmm2.values.push_back(rmm2[static_cast<std::size_t>(pre_days + d)]);

            auto noise = [&](std::vector<double>& buf) {
                for (double& v : buf) v = rng_noise.gaussian();
                detail::smooth2d(buf, cfg.n_lat, cfg.n_lon);
            };
            std::vector<double> nz(grid), nu(grid), no(grid);
            noise(nz);
            noise(nu);
            noise(no);

            const auto& pat = patterns[static_cast<std::size_t>(reg)];
            const double r1 = rmm1[static_cast<std::size_t>(pre_days + d)];
            const double r2 = rmm2[static_cast<std::size_t>(pre_days + d)];
            for (std::size_t i = 0; i < cfg.n_lat; ++i)
                for (std::size_t j = 0; j < cfg.n_lon; ++j) {
                    const std::size_t g = i * cfg.n_lon + j;
                    const double lon_rad =
                        2.0 * M_PI * static_cast<double>(j) / static_cast<double>(cfg.n_lon);
                    world.z500.values.push_back(static_cast<float>(
                        cfg.pattern_scale * pat[g] + cfg.field_noise_sigma * nz[g]));
                    world.u10.values.push_back(
                        static_cast<float>(s * ring[i] + cfg.field_noise_sigma * nu[g]));
                    world.olr.values.push_back(static_cast<float>(
                        tropics[i] * (r1 * std::cos(lon_rad) + r2 * std::sin(lon_rad)) +
                        cfg.field_noise_sigma * no[g]));
                }
        }
    }

    world.z500.validate();
    world.u10.validate();
    world.olr.validate();
    world.rmm1.validate();
    world.rmm2.validate();
    world.truth.validate();
    return world;
}

}  // namespace s2scast
