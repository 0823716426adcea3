#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "s2scast/common.hpp"
#include "s2scast/gridstore.hpp"

// Field preprocessing: bilinear regridding, trailing rolling means,
// day-of-year climatology anomalies, and standardization against a
// reference split. All functions are pure; inputs are never mutated.

namespace s2scast {

// ---------------------------------------------------------------------------
// Bilinear regridding.
// ---------------------------------------------------------------------------

namespace detail {

struct AxisBracket {
    std::size_t i0, i1;
    double t;  // blend weight toward i1
};

// Bracket a coordinate on a strictly monotone axis (either orientation).
inline AxisBracket bracket_coord(const std::vector<double>& axis, double x, const char* name) {
    const double lo = std::min(axis.front(), axis.back());
    const double hi = std::max(axis.front(), axis.back());
    if (x < lo || x > hi)
        throw DomainError(std::string(name) + " " + std::to_string(x) +
                          " outside source hull [" + std::to_string(lo) + ", " +
                          std::to_string(hi) + "]");
    if (axis.size() == 1) return {0, 0, 0.0};
    const bool increasing = axis.back() > axis.front();
    std::size_t i;
    if (increasing) {
        const auto it = std::upper_bound(axis.begin(), axis.end(), x);
        i = it == axis.begin() ? 0 : static_cast<std::size_t>(it - axis.begin()) - 1;
    } else {
        const auto it = std::upper_bound(axis.begin(), axis.end(), x, std::greater<double>());
        i = it == axis.begin() ? 0 : static_cast<std::size_t>(it - axis.begin()) - 1;
    }
    if (i > axis.size() - 2) i = axis.size() - 2;
    const double span = axis[i + 1] - axis[i];
    return {i, i + 1, (x - axis[i]) / span};
}

}  // namespace detail

inline GriddedField regrid(const GriddedField& field, const std::vector<double>& target_lats,
                           const std::vector<double>& target_lons) {
    field.validate();
    if (target_lats.empty() || target_lons.empty())
        throw ArgumentError("regrid: empty target axis");
    if (!strictly_monotone(target_lats) || !strictly_monotone(target_lons))
        throw ArgumentError("regrid: target axes must be strictly monotone");

    std::vector<detail::AxisBracket> lat_br, lon_br;
    lat_br.reserve(target_lats.size());
    lon_br.reserve(target_lons.size());
    for (double y : target_lats) lat_br.push_back(detail::bracket_coord(field.lats, y, "lat"));
    for (double x : target_lons) lon_br.push_back(detail::bracket_coord(field.lons, x, "lon"));

    GriddedField out;
    out.variable_name = field.variable_name;
    out.units = field.units;
    out.times = field.times;
    out.lats = target_lats;
    out.lons = target_lons;
    out.values.resize(field.n_time() * target_lats.size() * target_lons.size());

    const std::size_t src_nx = field.n_lon();
    for (std::size_t t = 0; t < field.n_time(); ++t) {
        const float* src = field.time_slice(t);
        float* dst = out.time_slice(t);
        for (std::size_t i = 0; i < target_lats.size(); ++i) {
            const auto& by = lat_br[i];
            for (std::size_t j = 0; j < target_lons.size(); ++j) {
                const auto& bx = lon_br[j];
                const double v00 = src[by.i0 * src_nx + bx.i0];
                const double v01 = src[by.i0 * src_nx + bx.i1];
                const double v10 = src[by.i1 * src_nx + bx.i0];
                const double v11 = src[by.i1 * src_nx + bx.i1];
                const double top = (1.0 - bx.t) * v00 + bx.t * v01;
                const double bot = (1.0 - bx.t) * v10 + bx.t * v11;
                dst[i * target_lons.size() + j] =
                    static_cast<float>((1.0 - by.t) * top + by.t * bot);
            }
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Trailing rolling mean. Output at step t averages steps t-window+1..t, so
// the first window-1 steps are dropped and no future information leaks in.
// Windows are positional; the pipeline always feeds daily-contiguous data.
// ---------------------------------------------------------------------------

inline DatedSeries rolling_mean(const DatedSeries& series, int window_days) {
    series.validate();
    if (window_days < 1) throw ArgumentError("rolling_mean: window must be >= 1");
    if (static_cast<std::size_t>(window_days) > series.size())
        throw ArgumentError("rolling_mean: window " + std::to_string(window_days) +
                            " exceeds series length " + std::to_string(series.size()));
    const auto w = static_cast<std::size_t>(window_days);
    DatedSeries out;
    out.times.assign(series.times.begin() + static_cast<std::ptrdiff_t>(w) - 1,
                     series.times.end());
    out.values.reserve(series.size() - w + 1);
    double acc = 0.0;
    for (std::size_t t = 0; t < series.size(); ++t) {
        acc += series.values[t];
        if (t + 1 >= w) {
            out.values.push_back(acc / static_cast<double>(w));
            acc -= series.values[t + 1 - w];
        }
    }
    return out;
}

inline GriddedField rolling_mean(const GriddedField& field, int window_days) {
    field.validate();
    if (window_days < 1) throw ArgumentError("rolling_mean: window must be >= 1");
    if (static_cast<std::size_t>(window_days) > field.n_time())
        throw ArgumentError("rolling_mean: window " + std::to_string(window_days) +
                            " exceeds field length " + std::to_string(field.n_time()));
    const auto w = static_cast<std::size_t>(window_days);
    const std::size_t grid = field.grid_size();

    GriddedField out;
    out.variable_name = field.variable_name;
    out.units = field.units;
    out.times.assign(field.times.begin() + static_cast<std::ptrdiff_t>(w) - 1,
                     field.times.end());
    out.lats = field.lats;
    out.lons = field.lons;
    out.values.resize((field.n_time() - w + 1) * grid);

    std::vector<double> acc(grid, 0.0);
    std::size_t emitted = 0;
    for (std::size_t t = 0; t < field.n_time(); ++t) {
        const float* cur = field.time_slice(t);
        for (std::size_t g = 0; g < grid; ++g) acc[g] += cur[g];
        if (t + 1 >= w) {
            float* dst = out.values.data() + emitted * grid;
            const float* old = field.time_slice(t + 1 - w);
            for (std::size_t g = 0; g < grid; ++g) {
                dst[g] = static_cast<float>(acc[g] / static_cast<double>(w));
                acc[g] -= old[g];
            }
            ++emitted;
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Day-of-year climatology. Feb 29 is folded into the Feb 28 bin both when
// accumulating and when looking up, so leap days never get their own sparse
// climatology.
// ---------------------------------------------------------------------------

namespace detail {

// key = month*100 + day, with the leap-day fold applied
inline int doy_key(int month, int day) {
    if (month == 2 && day == 29) return 228;
    return month * 100 + day;
}

}  // namespace detail

struct Climatology {
    std::vector<double> lats, lons;
    int year_lo = 0, year_hi = 0;  // reference window the means were taken over
    std::map<int, std::vector<double>> mean_by_key;

    const std::vector<double>& mean_map(int month, int day) const {
        const auto it = mean_by_key.find(detail::doy_key(month, day));
        if (it == mean_by_key.end())
            throw CoverageError("no climatology for day-of-year " + std::to_string(month) +
                                "-" + std::to_string(day));
        return it->second;
    }

    void validate() const {
        if (year_lo > year_hi) throw ValidationError("climatology: empty year range");
        const std::size_t grid = lats.size() * lons.size();
        for (const auto& [key, map] : mean_by_key) {
            if (map.size() != grid)
                throw ValidationError("climatology: map size mismatch at key " +
                                      std::to_string(key));
            if (!all_finite(map))
                throw ValidationError("climatology: non-finite mean at key " +
                                      std::to_string(key));
        }
    }
};

inline Climatology build_climatology(const GriddedField& field, int year_lo, int year_hi) {
    field.validate();
    if (year_lo > year_hi) throw CoverageError("climatology: empty reference range");
    const int first_year = civil_from_days(field.times.front()).year;
    const int last_year = civil_from_days(field.times.back()).year;
    if (year_lo < first_year || year_hi > last_year)
        throw CoverageError("climatology: reference years " + std::to_string(year_lo) + "-" +
                            std::to_string(year_hi) + " not covered by data " +
                            std::to_string(first_year) + "-" + std::to_string(last_year));

    const std::size_t grid = field.grid_size();
    std::map<int, std::vector<double>> sums;
    std::map<int, std::size_t> counts;
    std::map<int, bool> present_anywhere;

    for (std::size_t t = 0; t < field.n_time(); ++t) {
        const CivilDate c = civil_from_days(field.times[t]);
        const int key = detail::doy_key(c.month, c.day);
        present_anywhere[key] = true;
        if (c.year < year_lo || c.year > year_hi) continue;
        auto& s = sums[key];
        if (s.empty()) s.assign(grid, 0.0);
        const float* slice = field.time_slice(t);
        for (std::size_t g = 0; g < grid; ++g) s[g] += slice[g];
        counts[key] += 1;
    }

    Climatology clim;
    clim.lats = field.lats;
    clim.lons = field.lons;
    clim.year_lo = year_lo;
    clim.year_hi = year_hi;
    for (const auto& [key, _] : present_anywhere) {
        const auto it = counts.find(key);
        if (it == counts.end() || it->second == 0)
            throw CoverageError("climatology: day-of-year key " + std::to_string(key) +
                                " has no samples in " + std::to_string(year_lo) + "-" +
                                std::to_string(year_hi));
        auto map = sums[key];
        for (auto& v : map) v /= static_cast<double>(it->second);
        clim.mean_by_key[key] = std::move(map);
    }
    clim.validate();
    return clim;
}

// ---------------------------------------------------------------------------
// Anomalies under a rolling-window climatology policy. For a date in year Y
// the climatology is the mean over the preceding window_years years; when
// that window reaches before the data, a fixed early window is used instead
// (its own year then contributes to its climatology).
// ---------------------------------------------------------------------------

struct ClimatologyPolicy {
    int window_years = 30;
    // First year of the fixed early window; -1 means the first year in the data.
    int early_window_start = -1;
};

inline GriddedField anomalies(const GriddedField& field, const ClimatologyPolicy& policy) {
    field.validate();
    if (policy.window_years < 1) throw ArgumentError("anomalies: window_years must be >= 1");
    const int first_year = civil_from_days(field.times.front()).year;
    const int early_start =
        policy.early_window_start < 0 ? first_year : policy.early_window_start;
    const int early_end = early_start + policy.window_years - 1;

    const std::size_t grid = field.grid_size();

    // group samples per day-of-year key, sorted by year, with prefix sums so
    // any year window reduces to two lookups
    struct KeyGroup {
        std::vector<int> years;
        std::vector<std::size_t> time_index;
    };
    std::map<int, KeyGroup> groups;
    std::vector<int> key_of(field.n_time());
    std::vector<int> year_of(field.n_time());
    for (std::size_t t = 0; t < field.n_time(); ++t) {
        const CivilDate c = civil_from_days(field.times[t]);
        const int key = detail::doy_key(c.month, c.day);
        key_of[t] = key;
        year_of[t] = c.year;
        groups[key].years.push_back(c.year);
        groups[key].time_index.push_back(t);
    }

    GriddedField out;
    out.variable_name = field.variable_name;
    out.units = field.units;
    out.times = field.times;
    out.lats = field.lats;
    out.lons = field.lons;
    out.values.resize(field.values.size());

    std::vector<double> prefix;  // (n_samples+1) x grid, rebuilt per key
    for (auto& [key, grp] : groups) {
        const std::size_t n = grp.years.size();
        prefix.assign((n + 1) * grid, 0.0);
        for (std::size_t s = 0; s < n; ++s) {
            const float* slice = field.time_slice(grp.time_index[s]);
            const double* prev = prefix.data() + s * grid;
            double* cur = prefix.data() + (s + 1) * grid;
            for (std::size_t g = 0; g < grid; ++g) cur[g] = prev[g] + slice[g];
        }
        for (std::size_t s = 0; s < n; ++s) {
            const std::size_t t = grp.time_index[s];
            const int y = year_of[t];
            int win_lo, win_hi;
            if (y - policy.window_years >= early_start) {
                win_lo = y - policy.window_years;
                win_hi = y - 1;
            } else {
                win_lo = early_start;
                win_hi = early_end;
            }
            // grp.years is sorted because the time axis is
            const auto lo_it = std::lower_bound(grp.years.begin(), grp.years.end(), win_lo);
            const auto hi_it = std::upper_bound(grp.years.begin(), grp.years.end(), win_hi);
            const auto a = static_cast<std::size_t>(lo_it - grp.years.begin());
            const auto b = static_cast<std::size_t>(hi_it - grp.years.begin());
            if (b <= a)
                throw CoverageError("anomalies: no climatology samples for " +
                                    format_iso_date(field.times[t]) + " in years " +
                                    std::to_string(win_lo) + "-" + std::to_string(win_hi));
            const double inv = 1.0 / static_cast<double>(b - a);
            const double* pa = prefix.data() + a * grid;
            const double* pb = prefix.data() + b * grid;
            const float* src = field.time_slice(t);
            float* dst = out.time_slice(t);
            for (std::size_t g = 0; g < grid; ++g)
                dst[g] = static_cast<float>(src[g] - (pb[g] - pa[g]) * inv);
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Standardization. Default pools the mean and standard deviation over space
// and time per variable; the per-gridpoint variant keeps one (mu, sigma) per
// cell. Statistics always come from stats_source (the training split), never
// from the field being transformed.
// ---------------------------------------------------------------------------

struct PooledStats {
    double mean = 0.0;
    double sd = 0.0;
};

inline PooledStats pooled_stats(const std::vector<double>& values) {
    if (values.empty()) throw ArgumentError("pooled_stats: empty input");
    double mean = 0.0;
    for (double v : values) mean += v;
    mean /= static_cast<double>(values.size());
    double var = 0.0;
    for (double v : values) var += (v - mean) * (v - mean);
    var /= static_cast<double>(values.size());
    return {mean, std::sqrt(var)};
}

inline PooledStats pooled_stats(const std::vector<float>& values) {
    std::vector<double> tmp(values.begin(), values.end());
    return pooled_stats(tmp);
}

inline GriddedField standardize(const GriddedField& field, const GriddedField& stats_source,
                                bool per_gridpoint = false) {
    field.validate();
    stats_source.validate();
    if (field.lats != stats_source.lats || field.lons != stats_source.lons)
        throw ArgumentError("standardize: field and stats source have different spatial axes");

    GriddedField out = field;
    const std::size_t grid = field.grid_size();
    if (!per_gridpoint) {
        const PooledStats st = pooled_stats(stats_source.values);
        if (st.sd == 0.0)
            throw NumericError("standardize: degenerate variance in stats source");
        for (auto& v : out.values)
            v = static_cast<float>((v - st.mean) / st.sd);
        return out;
    }
    // per-gridpoint: one (mu, sigma) per cell over the stats source's time axis
    const std::size_t nt = stats_source.n_time();
    std::vector<double> mu(grid, 0.0), var(grid, 0.0);
    for (std::size_t t = 0; t < nt; ++t) {
        const float* slice = stats_source.time_slice(t);
        for (std::size_t g = 0; g < grid; ++g) mu[g] += slice[g];
    }
    for (auto& m : mu) m /= static_cast<double>(nt);
    for (std::size_t t = 0; t < nt; ++t) {
        const float* slice = stats_source.time_slice(t);
        for (std::size_t g = 0; g < grid; ++g) {
            const double d = slice[g] - mu[g];
            var[g] += d * d;
        }
    }
    for (std::size_t g = 0; g < grid; ++g) {
        var[g] /= static_cast<double>(nt);
        if (var[g] == 0.0)
            throw NumericError("standardize: degenerate variance at grid cell " +
                               std::to_string(g));
    }
    for (std::size_t t = 0; t < field.n_time(); ++t) {
        float* dst = out.time_slice(t);
        for (std::size_t g = 0; g < grid; ++g)
            dst[g] = static_cast<float>((dst[g] - mu[g]) / std::sqrt(var[g]));
    }
    return out;
}

inline DatedSeries standardize(const DatedSeries& series, const DatedSeries& stats_source) {
    series.validate();
    stats_source.validate();
    const PooledStats st = pooled_stats(stats_source.values);
    if (st.sd == 0.0) throw NumericError("standardize: degenerate variance in stats source");
    DatedSeries out = series;
    for (auto& v : out.values) v = (v - st.mean) / st.sd;
    return out;
}

// ---------------------------------------------------------------------------
// Calendar selection helpers used by the seasonal pipeline.
// ---------------------------------------------------------------------------

// True for dates in the extended winter (Nov 16 through Mar 31).
inline bool in_extended_winter(std::int64_t day) {
    const CivilDate c = civil_from_days(day);
    if (c.month >= 4 && c.month <= 10) return false;
    if (c.month == 11) return c.day >= 16;
    return true;  // Dec, Jan, Feb, Mar
}

// Winter label year: the year the winter started in (Nov/Dec keep their own
// year, Jan-Mar belong to the previous year's winter).
inline int winter_start_year(std::int64_t day) {
    const CivilDate c = civil_from_days(day);
    return c.month >= 11 ? c.year : c.year - 1;
}

inline GriddedField select_times(const GriddedField& field,
                                 const std::function<bool(std::int64_t)>& keep) {
    GriddedField out;
    out.variable_name = field.variable_name;
    out.units = field.units;
    out.lats = field.lats;
    out.lons = field.lons;
    const std::size_t grid = field.grid_size();
    for (std::size_t t = 0; t < field.n_time(); ++t) {
        if (!keep(field.times[t])) continue;
        out.times.push_back(field.times[t]);
        const float* slice = field.time_slice(t);
        out.values.insert(out.values.end(), slice, slice + grid);
    }
    return out;
}

inline DatedSeries select_times(const DatedSeries& series,
                                const std::function<bool(std::int64_t)>& keep) {
    DatedSeries out;
    for (std::size_t i = 0; i < series.size(); ++i) {
        if (!keep(series.times[i])) continue;
        out.times.push_back(series.times[i]);
        out.values.push_back(series.values[i]);
    }
    return out;
}

}  // namespace s2scast
