#pragma once

#include <algorithm>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "s2scast/common.hpp"

// Gridded climate fields and dated 1-D series, with their on-disk formats:
//   GRD1  little-endian binary for (time, lat, lon) float32 fields
//   CSV   "date,value" with ISO-8601 dates
// Loaded objects are immutable value types; readers may run concurrently.

namespace s2scast {

// ---------------------------------------------------------------------------
// GriddedField: (time, lat, lon) array of one climate variable.
// ---------------------------------------------------------------------------

struct GriddedField {
    std::string variable_name;
    std::string units;
    std::vector<std::int64_t> times;  // days since 1900-01-01, strictly increasing
    std::vector<double> lats;         // degrees, strictly monotone
    std::vector<double> lons;         // degrees, strictly monotone
    std::vector<float> values;        // row-major (time, lat, lon)

    std::size_t n_time() const { return times.size(); }
    std::size_t n_lat() const { return lats.size(); }
    std::size_t n_lon() const { return lons.size(); }
    std::size_t grid_size() const { return n_lat() * n_lon(); }

    float at(std::size_t t, std::size_t i, std::size_t j) const {
        return values[(t * n_lat() + i) * n_lon() + j];
    }
    float& at(std::size_t t, std::size_t i, std::size_t j) {
        return values[(t * n_lat() + i) * n_lon() + j];
    }
    const float* time_slice(std::size_t t) const { return values.data() + t * grid_size(); }
    float* time_slice(std::size_t t) { return values.data() + t * grid_size(); }

    void validate() const {
        if (times.empty()) throw ValidationError("field '" + variable_name + "': no time steps");
        if (lats.empty() || lons.empty())
            throw ValidationError("field '" + variable_name + "': empty spatial axis");
        if (!strictly_increasing(times))
            throw ValidationError("field '" + variable_name + "': times not strictly increasing");
        if (!strictly_monotone(lats))
            throw ValidationError("field '" + variable_name + "': lat axis not strictly monotone");
        if (!strictly_monotone(lons))
            throw ValidationError("field '" + variable_name + "': lon axis not strictly monotone");
        if (values.size() != times.size() * lats.size() * lons.size())
            throw ValidationError("field '" + variable_name + "': payload size " +
                                  std::to_string(values.size()) + " != t*lat*lon");
        if (!all_finite(values))
            throw ValidationError("field '" + variable_name + "': NaN/Inf in payload");
    }
};

// ---------------------------------------------------------------------------
// DatedSeries: values (or integer class labels) on a strictly increasing
// daily time axis.
// ---------------------------------------------------------------------------

struct DatedSeries {
    std::vector<std::int64_t> times;
    std::vector<double> values;

    std::size_t size() const { return times.size(); }

    void validate() const {
        if (times.size() != values.size())
            throw ValidationError("series: times/values length mismatch");
        if (!strictly_increasing(times))
            throw ValidationError("series: dates not strictly increasing");
    }
};

// ---------------------------------------------------------------------------
// GRD1 binary layout:
//   magic "GRD1" | version u32 | name u16+bytes | units u16+bytes
//   | ntime,nlat,nlon u64 | times i64[] | lats,lons f64[] | payload f32[]
// All little-endian.
// ---------------------------------------------------------------------------

namespace detail {

constexpr std::uint32_t kGrdVersion = 1;

template <typename T>
void write_pod(std::ostream& os, T v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& is, const char* what) {
    T v{};
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!is) throw CorruptionError(std::string("truncated file while reading ") + what);
    return v;
}

inline void write_str16(std::ostream& os, const std::string& s) {
    if (s.size() > 0xffff) throw ValidationError("string too long for format");
    write_pod<std::uint16_t>(os, static_cast<std::uint16_t>(s.size()));
    os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string read_str16(std::istream& is, const char* what) {
    const auto n = read_pod<std::uint16_t>(is, what);
    std::string s(n, '\0');
    is.read(s.data(), n);
    if (!is) throw CorruptionError(std::string("truncated file while reading ") + what);
    return s;
}

template <typename T>
void write_array(std::ostream& os, const std::vector<T>& v) {
    os.write(reinterpret_cast<const char*>(v.data()),
             static_cast<std::streamsize>(v.size() * sizeof(T)));
}

template <typename T>
void read_array(std::istream& is, std::vector<T>& v, std::size_t n, const char* what) {
    v.resize(n);
    is.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(n * sizeof(T)));
    if (static_cast<std::size_t>(is.gcount()) != n * sizeof(T))
        throw CorruptionError(std::string("truncated payload while reading ") + what);
}

}  // namespace detail

inline void write_grid(const GriddedField& field, const std::string& path) {
    field.validate();
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot open for writing: " + path);
    os.write("GRD1", 4);
    detail::write_pod<std::uint32_t>(os, detail::kGrdVersion);
    detail::write_str16(os, field.variable_name);
    detail::write_str16(os, field.units);
    detail::write_pod<std::uint64_t>(os, field.n_time());
    detail::write_pod<std::uint64_t>(os, field.n_lat());
    detail::write_pod<std::uint64_t>(os, field.n_lon());
    detail::write_array(os, field.times);
    detail::write_array(os, field.lats);
    detail::write_array(os, field.lons);
    detail::write_array(os, field.values);
    os.flush();
    if (!os) throw IoError("write failed: " + path);
}

inline GriddedField read_grid(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open: " + path);
    char magic[4] = {};
    is.read(magic, 4);
    if (!is || std::memcmp(magic, "GRD1", 4) != 0)
        throw FormatError("not a GRD1 file: " + path);
    const auto version = detail::read_pod<std::uint32_t>(is, "version");
    if (version != detail::kGrdVersion)
        throw FormatError("unsupported GRD1 version " + std::to_string(version));
    GriddedField f;
    f.variable_name = detail::read_str16(is, "variable name");
    f.units = detail::read_str16(is, "units");
    const auto nt = detail::read_pod<std::uint64_t>(is, "ntime");
    const auto ny = detail::read_pod<std::uint64_t>(is, "nlat");
    const auto nx = detail::read_pod<std::uint64_t>(is, "nlon");
    detail::read_array(is, f.times, nt, "time axis");
    detail::read_array(is, f.lats, ny, "lat axis");
    detail::read_array(is, f.lons, nx, "lon axis");
    detail::read_array(is, f.values, nt * ny * nx, "payload");
    // trailing bytes mean the header lied about dimensions
    is.peek();
    if (!is.eof()) throw CorruptionError("trailing bytes after payload: " + path);
    f.validate();
    return f;
}

// ---------------------------------------------------------------------------
// CSV series: header "date,value", ISO-8601 dates, round-trip stable.
// ---------------------------------------------------------------------------

inline void write_series(const DatedSeries& series, const std::string& path) {
    series.validate();
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw IoError("cannot open for writing: " + path);
    os << "date,value\n";
    char buf[40];
    for (std::size_t i = 0; i < series.size(); ++i) {
        std::snprintf(buf, sizeof(buf), "%.17g", series.values[i]);
        os << format_iso_date(series.times[i]) << ',' << buf << '\n';
    }
    os.flush();
    if (!os) throw IoError("write failed: " + path);
}

inline DatedSeries read_series(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open: " + path);
    std::string line;
    if (!std::getline(is, line)) throw FormatError("empty series file: " + path);
    if (line.size() && line.back() == '\r') line.pop_back();
    if (line != "date,value")
        throw FormatError("bad series header '" + line + "' in " + path);
    DatedSeries s;
    std::size_t line_no = 1;
    while (std::getline(is, line)) {
        ++line_no;
        if (line.size() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        const auto comma = line.find(',');
        if (comma == std::string::npos)
            throw ParseError(path + ":" + std::to_string(line_no) + ": missing comma");
        const std::string date_part = line.substr(0, comma);
        const std::string value_part = line.substr(comma + 1);
        std::int64_t day = 0;
        try {
            day = parse_iso_date(date_part);
        } catch (const ParseError& e) {
            throw ParseError(path + ":" + std::to_string(line_no) + ": " + e.what());
        }
        char* end = nullptr;
        const double v = std::strtod(value_part.c_str(), &end);
        if (end == value_part.c_str() || *end != '\0')
            throw ParseError(path + ":" + std::to_string(line_no) + ": bad value '" +
                             value_part + "'");
        s.times.push_back(day);
        s.values.push_back(v);
    }
    if (!strictly_increasing(s.times)) {
        // distinguish duplicates from disorder for a clearer message
        for (std::size_t i = 1; i < s.times.size(); ++i) {
            if (s.times[i] == s.times[i - 1])
                throw ValidationError(path + ": duplicated date " +
                                      format_iso_date(s.times[i]));
        }
        throw ValidationError(path + ": dates not sorted");
    }
    return s;
}

}  // namespace s2scast
