#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "s2scast/common.hpp"
#include "s2scast/gridstore.hpp"
#include "s2scast/preprocess.hpp"

// Teleconnection driver indices: the stratospheric polar vortex (SPV) index
// from u10 winds and the MJO phase/amplitude classification from RMM
// component series.

namespace s2scast {

// ---------------------------------------------------------------------------
// SPV index: zonal mean of u10 along the grid latitude nearest 60N.
// ---------------------------------------------------------------------------

inline DatedSeries spv_index(const GriddedField& u10) {
    u10.validate();
    std::size_t ring = 0;
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < u10.n_lat(); ++i) {
        const double d = std::abs(u10.lats[i] - 60.0);
        if (d < best) {
            best = d;
            ring = i;
        }
    }
    if (best > 2.0)
        throw DomainError("spv_index: no latitude within 2 degrees of 60N (nearest " +
                          std::to_string(u10.lats[ring]) + ")");
    DatedSeries out;
    out.times = u10.times;
    out.values.resize(u10.n_time());
    const std::size_t nx = u10.n_lon();
    for (std::size_t t = 0; t < u10.n_time(); ++t) {
        const float* row = u10.time_slice(t) + ring * nx;
        double sum = 0.0;
        for (std::size_t j = 0; j < nx; ++j) sum += row[j];
        out.values[t] = sum / static_cast<double>(nx);
    }
    return out;
}

// ---------------------------------------------------------------------------
// MJO phase classification. Sector convention: phase 1 spans [180, 225)
// degrees of theta = atan2(rmm2, rmm1), advancing counterclockwise by 45
// degrees per phase (so phase 5 spans [0, 45)); class 0 marks inactive
// records with amplitude below the threshold.
// ---------------------------------------------------------------------------

constexpr int kNumMjoClasses = 9;

struct MjoRecord {
    std::int64_t time = 0;
    double rmm1 = 0.0, rmm2 = 0.0;
    double amplitude = 0.0;
    int phase_class = 0;  // 0 inactive, 1-8 active octants
};

inline int mjo_octant(double rmm1, double rmm2) {
    const double theta_deg = std::atan2(rmm2, rmm1) * 180.0 / M_PI;
    double shifted = std::fmod(theta_deg + 180.0, 360.0);
    if (shifted < 0.0) shifted += 360.0;
    int phase = static_cast<int>(std::floor(shifted / 45.0)) + 1;
    if (phase > 8) phase = 8;  // guards shifted == 360 - epsilon rounding up
    return phase;
}

inline std::vector<MjoRecord> mjo_phase(const DatedSeries& rmm1, const DatedSeries& rmm2,
                                        int smoothing_days = 7,
                                        double amplitude_threshold = 1.0) {
    rmm1.validate();
    rmm2.validate();
    if (rmm1.times != rmm2.times)
        throw ArgumentError("mjo_phase: rmm1 and rmm2 time axes are not aligned");
    if (amplitude_threshold < 0.0)
        throw ArgumentError("mjo_phase: amplitude threshold must be non-negative");
    const auto s1 = rolling_mean(rmm1, smoothing_days);
    const auto s2 = rolling_mean(rmm2, smoothing_days);

    std::vector<MjoRecord> out(s1.size());
    for (std::size_t i = 0; i < s1.size(); ++i) {
        MjoRecord& r = out[i];
        r.time = s1.times[i];
        r.rmm1 = s1.values[i];
        r.rmm2 = s2.values[i];
        r.amplitude = std::sqrt(r.rmm1 * r.rmm1 + r.rmm2 * r.rmm2);
        r.phase_class = r.amplitude < amplitude_threshold ? 0 : mjo_octant(r.rmm1, r.rmm2);
    }
    return out;
}

inline std::array<double, kNumMjoClasses> one_hot_mjo(const MjoRecord& record) {
    if (record.phase_class < 0 || record.phase_class >= kNumMjoClasses)
        throw ArgumentError("one_hot_mjo: phase class out of range");
    std::array<double, kNumMjoClasses> v{};
    v[static_cast<std::size_t>(record.phase_class)] = 1.0;
    return v;
}

// ---------------------------------------------------------------------------
// CSV I/O. Records: date,rmm1,rmm2,amplitude,phase. Raw RMM inputs:
// date,rmm1,rmm2.
// ---------------------------------------------------------------------------

inline void write_mjo_records(const std::vector<MjoRecord>& records, const std::string& path) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw IoError("cannot open for writing: " + path);
    os << "date,rmm1,rmm2,amplitude,phase\n";
    char buf[128];
    for (const auto& r : records) {
        std::snprintf(buf, sizeof(buf), "%.17g,%.17g,%.17g,%d", r.rmm1, r.rmm2, r.amplitude,
                      r.phase_class);
        os << format_iso_date(r.time) << ',' << buf << '\n';
    }
    os.flush();
    if (!os) throw IoError("write failed: " + path);
}

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> parts;
    std::size_t start = 0;
    while (true) {
        const auto comma = line.find(',', start);
        if (comma == std::string::npos) {
            parts.push_back(line.substr(start));
            break;
        }
        parts.push_back(line.substr(start, comma - start));
        start = comma + 1;
    }
    return parts;
}

inline double parse_double_field(const std::string& text, const std::string& where) {
    char* end = nullptr;
    const double v = std::strtod(text.c_str(), &end);
    if (end == text.c_str() || *end != '\0')
        throw ParseError(where + ": bad number '" + text + "'");
    return v;
}

}  // namespace detail

inline std::vector<MjoRecord> read_mjo_records(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open: " + path);
    std::string line;
    if (!std::getline(is, line)) throw FormatError("empty MJO file: " + path);
    if (line.size() && line.back() == '\r') line.pop_back();
    if (line != "date,rmm1,rmm2,amplitude,phase")
        throw FormatError("bad MJO header '" + line + "' in " + path);
    std::vector<MjoRecord> out;
    std::size_t line_no = 1;
    while (std::getline(is, line)) {
        ++line_no;
        if (line.size() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        const std::string where = path + ":" + std::to_string(line_no);
        const auto parts = detail::split_csv_line(line);
        if (parts.size() != 5) throw ParseError(where + ": expected 5 columns");
        MjoRecord r;
        try {
            r.time = parse_iso_date(parts[0]);
        } catch (const ParseError& e) {
            throw ParseError(where + ": " + e.what());
        }
        r.rmm1 = detail::parse_double_field(parts[1], where);
        r.rmm2 = detail::parse_double_field(parts[2], where);
        r.amplitude = detail::parse_double_field(parts[3], where);
        const double phase = detail::parse_double_field(parts[4], where);
        r.phase_class = static_cast<int>(phase);
        if (r.phase_class < 0 || r.phase_class >= kNumMjoClasses ||
            phase != static_cast<double>(r.phase_class))
            throw ParseError(where + ": bad phase '" + parts[4] + "'");
        if (r.amplitude < 0.0) throw ValidationError(where + ": negative amplitude");
        out.push_back(r);
    }
    for (std::size_t i = 1; i < out.size(); ++i)
        if (out[i].time <= out[i - 1].time)
            throw ValidationError(path + ": dates not strictly increasing");
    return out;
}

// raw (unsmoothed) RMM component inputs as one combined CSV
inline void write_rmm_csv(const DatedSeries& rmm1, const DatedSeries& rmm2,
                          const std::string& path) {
    rmm1.validate();
    rmm2.validate();
    if (rmm1.times != rmm2.times)
        throw ArgumentError("write_rmm_csv: rmm1 and rmm2 time axes are not aligned");
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw IoError("cannot open for writing: " + path);
    os << "date,rmm1,rmm2\n";
    char buf[96];
    for (std::size_t i = 0; i < rmm1.size(); ++i) {
        std::snprintf(buf, sizeof(buf), "%.17g,%.17g", rmm1.values[i], rmm2.values[i]);
        os << format_iso_date(rmm1.times[i]) << ',' << buf << '\n';
    }
    os.flush();
    if (!os) throw IoError("write failed: " + path);
}

inline std::pair<DatedSeries, DatedSeries> read_rmm_csv(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open: " + path);
    std::string line;
    if (!std::getline(is, line)) throw FormatError("empty RMM file: " + path);
    if (line.size() && line.back() == '\r') line.pop_back();
    if (line != "date,rmm1,rmm2")
        throw FormatError("bad RMM header '" + line + "' in " + path);
    DatedSeries r1, r2;
    std::size_t line_no = 1;
    while (std::getline(is, line)) {
        ++line_no;
        if (line.size() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        const std::string where = path + ":" + std::to_string(line_no);
        const auto parts = detail::split_csv_line(line);
        if (parts.size() != 3) throw ParseError(where + ": expected 3 columns");
        std::int64_t day = 0;
        try {
            day = parse_iso_date(parts[0]);
        } catch (const ParseError& e) {
            throw ParseError(where + ": " + e.what());
        }
        r1.times.push_back(day);
        r1.values.push_back(detail::parse_double_field(parts[1], where));
        r2.times.push_back(day);
        r2.values.push_back(detail::parse_double_field(parts[2], where));
    }
    r1.validate();
    r2.validate();
    return {std::move(r1), std::move(r2)};
}

}  // namespace s2scast
