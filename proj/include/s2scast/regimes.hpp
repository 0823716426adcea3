#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include "s2scast/common.hpp"
#include "s2scast/gridstore.hpp"
#include "s2scast/linalg.hpp"

// Weather-regime derivation: EOF reduction of anomaly fields, k-means
// clustering of the leading coefficients, nearest-centroid assignment, and
// regime composites. Canonical regime order everywhere: 0 NAO+, 1 NAO-,
// 2 SB (Scandinavian blocking), 3 AR (Atlantic ridge).

namespace s2scast {

constexpr int kNumRegimes = 4;
inline const char* const kRegimeNames[kNumRegimes] = {"NAO+", "NAO-", "SB", "AR"};

inline int regime_from_name(const std::string& name) {
    for (int r = 0; r < kNumRegimes; ++r)
        if (name == kRegimeNames[r]) return r;
    throw ArgumentError("unknown regime name '" + name + "'");
}

// ---------------------------------------------------------------------------
// EOF basis.
// ---------------------------------------------------------------------------

struct EofBasis {
    std::size_t n_eof = 0;
    std::vector<double> lats, lons;
    std::vector<double> components;  // (n_eof x grid) row-major, orthonormal rows
    std::vector<double> explained_variance_ratio;
    std::vector<double> weights;  // optional per-cell weights; empty = unweighted

    std::size_t grid_size() const { return lats.size() * lons.size(); }

    void validate() const {
        const std::size_t grid = grid_size();
        if (n_eof == 0 || components.size() != n_eof * grid)
            throw ValidationError("eof basis: component size mismatch");
        if (explained_variance_ratio.size() != n_eof)
            throw ValidationError("eof basis: ratio count mismatch");
        double sum = 0.0;
        for (std::size_t k = 0; k < n_eof; ++k) {
            const double r = explained_variance_ratio[k];
            if (r < 0.0 || r > 1.0) throw ValidationError("eof basis: ratio out of [0,1]");
            if (k > 0 && r > explained_variance_ratio[k - 1] + 1e-12)
                throw ValidationError("eof basis: ratios not non-increasing");
            sum += r;
        }
        if (sum > 1.0 + 1e-9) throw ValidationError("eof basis: ratios sum above 1");
        for (std::size_t a = 0; a < n_eof; ++a)
            for (std::size_t b = a; b < n_eof; ++b) {
                double dot = 0.0;
                for (std::size_t g = 0; g < grid; ++g)
                    dot += components[a * grid + g] * components[b * grid + g];
                const double want = a == b ? 1.0 : 0.0;
                if (std::abs(dot - want) > 1e-8)
                    throw ValidationError("eof basis: rows not orthonormal");
            }
    }
};

inline EofBasis fit_eof(const GriddedField& field, std::size_t n_eof,
                        bool cos_lat_weighting = false) {
    field.validate();
    const std::size_t T = field.n_time();
    const std::size_t G = field.grid_size();
    if (n_eof < 1 || n_eof > std::min(T, G))
        throw ArgumentError("fit_eof: n_eof " + std::to_string(n_eof) +
                            " exceeds min(time, grid) = " + std::to_string(std::min(T, G)));

    EofBasis basis;
    basis.n_eof = n_eof;
    basis.lats = field.lats;
    basis.lons = field.lons;
    if (cos_lat_weighting) {
        basis.weights.resize(G);
        for (std::size_t i = 0; i < field.n_lat(); ++i) {
            const double w = std::sqrt(std::max(0.0, std::cos(field.lats[i] * M_PI / 180.0)));
            for (std::size_t j = 0; j < field.n_lon(); ++j)
                basis.weights[i * field.n_lon() + j] = w;
        }
    }

    // centered (and optionally weighted) data matrix in double
    std::vector<double> x(T * G);
    std::vector<double> mean(G, 0.0);
    for (std::size_t t = 0; t < T; ++t) {
        const float* slice = field.time_slice(t);
        for (std::size_t g = 0; g < G; ++g) mean[g] += slice[g];
    }
    for (auto& m : mean) m /= static_cast<double>(T);
    for (std::size_t t = 0; t < T; ++t) {
        const float* slice = field.time_slice(t);
        for (std::size_t g = 0; g < G; ++g) {
            double v = slice[g] - mean[g];
            if (!basis.weights.empty()) v *= basis.weights[g];
            x[t * G + g] = v;
        }
    }

    double total = 0.0;
    for (double v : x) total += v * v;
    if (total <= 0.0) throw NumericError("fit_eof: field has zero variance");

    basis.components.resize(n_eof * G);
    basis.explained_variance_ratio.resize(n_eof);

    if (G <= T) {
        // eigenvectors of the grid-space Gram matrix are the EOFs directly
        std::vector<double> c(G * G, 0.0);
        for (std::size_t t = 0; t < T; ++t)
            for (std::size_t g = 0; g < G; ++g) {
                const double xv = x[t * G + g];
                for (std::size_t h = g; h < G; ++h) c[g * G + h] += xv * x[t * G + h];
            }
        for (std::size_t g = 0; g < G; ++g)
            for (std::size_t h = 0; h < g; ++h) c[g * G + h] = c[h * G + g];
        const auto eig = symmetric_eigen(std::move(c), G);
        for (std::size_t k = 0; k < n_eof; ++k) {
            std::copy(eig.vectors.begin() + static_cast<std::ptrdiff_t>(k * G),
                      eig.vectors.begin() + static_cast<std::ptrdiff_t>((k + 1) * G),
                      basis.components.begin() + static_cast<std::ptrdiff_t>(k * G));
            basis.explained_variance_ratio[k] =
                std::min(1.0, std::max(0.0, eig.values[k]) / total);
        }
    } else {
        // time-space Gram matrix is smaller; map its eigenvectors back
        std::vector<double> kmat(T * T, 0.0);
        for (std::size_t s = 0; s < T; ++s)
            for (std::size_t t = s; t < T; ++t) {
                double dot = 0.0;
                for (std::size_t g = 0; g < G; ++g) dot += x[s * G + g] * x[t * G + g];
                kmat[s * T + t] = dot;
                kmat[t * T + s] = dot;
            }
        const auto eig = symmetric_eigen(std::move(kmat), T);
        for (std::size_t k = 0; k < n_eof; ++k) {
            double* comp = basis.components.data() + k * G;
            std::fill(comp, comp + G, 0.0);
            for (std::size_t t = 0; t < T; ++t) {
                const double u = eig.vectors[k * T + t];
                for (std::size_t g = 0; g < G; ++g) comp[g] += u * x[t * G + g];
            }
            double nrm = 0.0;
            for (std::size_t g = 0; g < G; ++g) nrm += comp[g] * comp[g];
            nrm = std::sqrt(nrm);
            if (nrm <= 0.0)
                throw NumericError("fit_eof: requested component " + std::to_string(k) +
                                   " has zero energy; lower n_eof");
            for (std::size_t g = 0; g < G; ++g) comp[g] /= nrm;
            basis.explained_variance_ratio[k] =
                std::min(1.0, std::max(0.0, eig.values[k]) / total);
        }
    }

    // deterministic sign: largest-magnitude entry of each component positive
    for (std::size_t k = 0; k < n_eof; ++k) {
        double* comp = basis.components.data() + k * G;
        std::size_t arg = 0;
        for (std::size_t g = 1; g < G; ++g)
            if (std::abs(comp[g]) > std::abs(comp[arg])) arg = g;
        if (comp[arg] < 0.0)
            for (std::size_t g = 0; g < G; ++g) comp[g] = -comp[g];
    }
    basis.validate();
    return basis;
}

// ---------------------------------------------------------------------------
// Projection onto a basis.
// ---------------------------------------------------------------------------

struct CoeffSeries {
    std::vector<std::int64_t> times;
    std::size_t dim = 0;
    std::vector<double> coeffs;  // (time x dim) row-major

    std::size_t size() const { return times.size(); }
    const double* row(std::size_t t) const { return coeffs.data() + t * dim; }
};

inline CoeffSeries project(const GriddedField& field, const EofBasis& basis) {
    field.validate();
    if (field.lats != basis.lats || field.lons != basis.lons)
        throw ShapeError("project: field axes do not match basis axes");
    const std::size_t G = basis.grid_size();
    CoeffSeries out;
    out.times = field.times;
    out.dim = basis.n_eof;
    out.coeffs.resize(field.n_time() * basis.n_eof);
    for (std::size_t t = 0; t < field.n_time(); ++t) {
        const float* slice = field.time_slice(t);
        for (std::size_t k = 0; k < basis.n_eof; ++k) {
            const double* comp = basis.components.data() + k * G;
            double dot = 0.0;
            if (basis.weights.empty()) {
                for (std::size_t g = 0; g < G; ++g) dot += slice[g] * comp[g];
            } else {
                for (std::size_t g = 0; g < G; ++g) dot += slice[g] * basis.weights[g] * comp[g];
            }
            out.coeffs[t * basis.n_eof + k] = dot;
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// k-means with k-means++ seeding and Lloyd iterations.
// ---------------------------------------------------------------------------

struct RegimeModel {
    std::size_t k = 0;
    std::size_t dim = 0;
    std::vector<double> centroids;  // (k x dim) row-major
    std::vector<int> label_map;     // cluster id -> canonical regime id
    double inertia = 0.0;
    EofBasis basis;  // optional; empty when fit on raw coefficients

    const double* centroid(std::size_t c) const { return centroids.data() + c * dim; }

    void validate() const {
        if (k < 2 || centroids.size() != k * dim)
            throw ValidationError("regime model: centroid size mismatch");
        if (label_map.size() != k) throw ValidationError("regime model: label map size");
        std::vector<int> seen(k, 0);
        for (int m : label_map) {
            if (m < 0 || static_cast<std::size_t>(m) >= k)
                throw ValidationError("regime model: label map out of range");
            if (seen[m]++) throw ValidationError("regime model: label map not a bijection");
        }
        for (std::size_t a = 0; a < k; ++a)
            for (std::size_t b = a + 1; b < k; ++b) {
                double d = 0.0;
                for (std::size_t j = 0; j < dim; ++j) {
                    const double diff = centroid(a)[j] - centroid(b)[j];
                    d += diff * diff;
                }
                if (d == 0.0) throw ValidationError("regime model: duplicate centroids");
            }
    }
};

struct KmeansTrace {
    std::vector<double> inertia_per_iteration;  // winning restart
};

namespace detail {

inline double sq_dist(const double* a, const double* b, std::size_t dim) {
    double s = 0.0;
    for (std::size_t j = 0; j < dim; ++j) {
        const double d = a[j] - b[j];
        s += d * d;
    }
    return s;
}

inline std::size_t nearest_centroid(const double* p, const std::vector<double>& centroids,
                                    std::size_t k, std::size_t dim) {
    std::size_t best = 0;
    double best_d = sq_dist(p, centroids.data(), dim);
    for (std::size_t c = 1; c < k; ++c) {
        const double d = sq_dist(p, centroids.data() + c * dim, dim);
        if (d < best_d) {
            best_d = d;
            best = c;
        }
    }
    return best;
}

}  // namespace detail

inline RegimeModel fit_kmeans(const CoeffSeries& coeffs, std::size_t k, int n_restarts = 20,
                              std::uint64_t seed = 0, KmeansTrace* trace = nullptr) {
    const std::size_t n = coeffs.size();
    const std::size_t dim = coeffs.dim;
    if (k < 2) throw ArgumentError("fit_kmeans: k must be >= 2");
    if (n < k) throw ArgumentError("fit_kmeans: fewer points than clusters");
    if (n_restarts < 1) throw ArgumentError("fit_kmeans: need at least one restart");

    // count distinct points; clustering k of them requires at least k
    {
        std::vector<std::vector<double>> rows(n);
        for (std::size_t i = 0; i < n; ++i)
            rows[i].assign(coeffs.row(i), coeffs.row(i) + dim);
        std::sort(rows.begin(), rows.end());
        const auto distinct =
            static_cast<std::size_t>(std::unique(rows.begin(), rows.end()) - rows.begin());
        if (distinct < k)
            throw DomainError("fit_kmeans: only " + std::to_string(distinct) +
                              " distinct points for k = " + std::to_string(k));
    }

    std::vector<double> best_centroids;
    double best_inertia = std::numeric_limits<double>::infinity();
    std::vector<double> best_history;

    Rng master(seed);
    for (int restart = 0; restart < n_restarts; ++restart) {
        Rng rng = master.split(static_cast<std::uint64_t>(restart));

        // k-means++ seeding
        std::vector<double> centroids(k * dim);
        std::vector<double> min_d(n, std::numeric_limits<double>::infinity());
        {
            const std::size_t first = rng.uniform_index(n);
            std::copy(coeffs.row(first), coeffs.row(first) + dim, centroids.begin());
        }
        for (std::size_t c = 1; c < k; ++c) {
            double total = 0.0;
            for (std::size_t i = 0; i < n; ++i) {
                const double d =
                    detail::sq_dist(coeffs.row(i), centroids.data() + (c - 1) * dim, dim);
                min_d[i] = std::min(min_d[i], d);
                total += min_d[i];
            }
            double target = rng.uniform() * total;
            std::size_t pick = n;
            for (std::size_t i = 0; i < n; ++i) {
                if (min_d[i] <= 0.0) continue;  // already a centroid
                pick = i;
                target -= min_d[i];
                if (target <= 0.0) break;
            }
            if (pick == n) throw NumericError("fit_kmeans: seeding ran out of candidates");
            std::copy(coeffs.row(pick), coeffs.row(pick) + dim,
                      centroids.begin() + static_cast<std::ptrdiff_t>(c * dim));
        }

        // Lloyd iterations to an assignment fixpoint
        std::vector<std::size_t> assign_v(n, k);
        std::vector<double> history;
        double inertia = 0.0;
        for (int iter = 0; iter < 300; ++iter) {
            bool changed = false;
            inertia = 0.0;
            for (std::size_t i = 0; i < n; ++i) {
                const std::size_t c = detail::nearest_centroid(coeffs.row(i), centroids, k, dim);
                inertia += detail::sq_dist(coeffs.row(i), centroids.data() + c * dim, dim);
                if (c != assign_v[i]) {
                    assign_v[i] = c;
                    changed = true;
                }
            }
            history.push_back(inertia);
            if (!changed) break;

            std::vector<double> sums(k * dim, 0.0);
            std::vector<std::size_t> counts(k, 0);
            for (std::size_t i = 0; i < n; ++i) {
                const double* p = coeffs.row(i);
                double* s = sums.data() + assign_v[i] * dim;
                for (std::size_t j = 0; j < dim; ++j) s[j] += p[j];
                counts[assign_v[i]] += 1;
            }
            for (std::size_t c = 0; c < k; ++c) {
                if (counts[c] == 0) {
                    // restart an empty cluster at the worst-fit point
                    std::size_t worst = 0;
                    double worst_d = -1.0;
                    for (std::size_t i = 0; i < n; ++i) {
                        const double d = detail::sq_dist(
                            coeffs.row(i), centroids.data() + assign_v[i] * dim, dim);
                        if (d > worst_d) {
                            worst_d = d;
                            worst = i;
                        }
                    }
                    std::copy(coeffs.row(worst), coeffs.row(worst) + dim,
                              centroids.begin() + static_cast<std::ptrdiff_t>(c * dim));
                } else {
                    for (std::size_t j = 0; j < dim; ++j)
                        centroids[c * dim + j] =
                            sums[c * dim + j] / static_cast<double>(counts[c]);
                }
            }
        }

        if (inertia < best_inertia) {
            best_inertia = inertia;
            best_centroids = centroids;
            best_history = history;
        }
    }

    RegimeModel model;
    model.k = k;
    model.dim = dim;
    model.centroids = std::move(best_centroids);
    model.inertia = best_inertia;
    model.label_map.resize(k);
    std::iota(model.label_map.begin(), model.label_map.end(), 0);
    if (trace) trace->inertia_per_iteration = std::move(best_history);
    model.validate();
    return model;
}

// ---------------------------------------------------------------------------
// Assignment and composites.
// ---------------------------------------------------------------------------

struct RegimeSeries {
    std::vector<std::int64_t> times;
    std::vector<int> labels;  // canonical regime ids

    std::size_t size() const { return times.size(); }

    void validate() const {
        if (times.size() != labels.size())
            throw ValidationError("regime series: length mismatch");
        if (!strictly_increasing(times))
            throw ValidationError("regime series: times not strictly increasing");
        for (int l : labels)
            if (l < 0 || l >= kNumRegimes)
                throw ValidationError("regime series: label out of range");
    }
};

inline RegimeSeries assign(const CoeffSeries& coeffs, const RegimeModel& model) {
    if (coeffs.dim != model.dim)
        throw ShapeError("assign: coefficient dim " + std::to_string(coeffs.dim) +
                         " != centroid dim " + std::to_string(model.dim));
    RegimeSeries out;
    out.times = coeffs.times;
    out.labels.resize(coeffs.size());
    for (std::size_t i = 0; i < coeffs.size(); ++i) {
        const std::size_t c =
            detail::nearest_centroid(coeffs.row(i), model.centroids, model.k, model.dim);
        out.labels[i] = model.label_map[c];
    }
    return out;
}

struct RegimeComposites {
    std::size_t n_classes = 0;
    std::size_t grid = 0;
    std::vector<double> mean_maps;    // (n_classes x grid); NaN rows when absent
    std::vector<double> frequencies;  // occurrence fractions, sum to 1
    std::vector<bool> present;

    const double* map_for(std::size_t c) const { return mean_maps.data() + c * grid; }
};

inline RegimeComposites composite(const GriddedField& anomaly_field, const RegimeSeries& series,
                                  std::size_t n_classes = kNumRegimes) {
    anomaly_field.validate();
    series.validate();
    if (anomaly_field.times != series.times)
        throw ArgumentError("composite: field and series times do not align");
    const std::size_t grid = anomaly_field.grid_size();

    RegimeComposites out;
    out.n_classes = n_classes;
    out.grid = grid;
    out.mean_maps.assign(n_classes * grid, 0.0);
    out.frequencies.assign(n_classes, 0.0);
    out.present.assign(n_classes, false);

    std::vector<std::size_t> counts(n_classes, 0);
    for (std::size_t t = 0; t < series.size(); ++t) {
        const auto c = static_cast<std::size_t>(series.labels[t]);
        if (c >= n_classes) throw ArgumentError("composite: label exceeds n_classes");
        const float* slice = anomaly_field.time_slice(t);
        double* m = out.mean_maps.data() + c * grid;
        for (std::size_t g = 0; g < grid; ++g) m[g] += slice[g];
        counts[c] += 1;
    }
    const double total = static_cast<double>(series.size());
    for (std::size_t c = 0; c < n_classes; ++c) {
        if (counts[c] == 0) {
            double* m = out.mean_maps.data() + c * grid;
            std::fill(m, m + grid, std::numeric_limits<double>::quiet_NaN());
            continue;
        }
        out.present[c] = true;
        out.frequencies[c] = static_cast<double>(counts[c]) / total;
        double* m = out.mean_maps.data() + c * grid;
        for (std::size_t g = 0; g < grid; ++g) m[g] /= static_cast<double>(counts[c]);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Cluster-to-regime naming by spatial correlation against reference patterns.
// ---------------------------------------------------------------------------

inline double spatial_correlation(const double* a, const double* b, std::size_t n) {
    double ma = 0.0, mb = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        ma += a[i];
        mb += b[i];
    }
    ma /= static_cast<double>(n);
    mb /= static_cast<double>(n);
    double num = 0.0, va = 0.0, vb = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double da = a[i] - ma;
        const double db = b[i] - mb;
        num += da * db;
        va += da * da;
        vb += db * db;
    }
    if (va <= 0.0 || vb <= 0.0)
        throw NumericError("spatial_correlation: zero-variance map");
    return num / std::sqrt(va * vb);
}

// reference_patterns[r] is the canonical pattern for regime r; the returned
// map sends cluster id -> regime id, maximizing total correlation over all
// bijections
inline std::vector<int> match_patterns(const RegimeComposites& comps,
                                       const std::vector<std::vector<double>>& reference_patterns) {
    const std::size_t k = comps.n_classes;
    if (reference_patterns.size() != k)
        throw ArgumentError("match_patterns: need one reference pattern per cluster");
    for (std::size_t c = 0; c < k; ++c) {
        if (!comps.present[c])
            throw EvaluationError("match_patterns: cluster " + std::to_string(c) +
                                  " has no members");
        if (reference_patterns[c].size() != comps.grid)
            throw ShapeError("match_patterns: reference pattern size mismatch");
    }
    std::vector<std::vector<double>> corr(k, std::vector<double>(k));
    for (std::size_t c = 0; c < k; ++c)
        for (std::size_t r = 0; r < k; ++r)
            corr[c][r] =
                spatial_correlation(comps.map_for(c), reference_patterns[r].data(), comps.grid);

    std::vector<int> perm(k);
    std::iota(perm.begin(), perm.end(), 0);
    std::vector<int> best = perm;
    double best_score = -std::numeric_limits<double>::infinity();
    do {
        double score = 0.0;
        for (std::size_t c = 0; c < k; ++c) score += corr[c][static_cast<std::size_t>(perm[c])];
        if (score > best_score) {
            best_score = score;
            best = perm;
        }
    } while (std::next_permutation(perm.begin(), perm.end()));
    return best;
}

// ---------------------------------------------------------------------------
// Serialization: regime series as CSV, regime model as a versioned blob.
// ---------------------------------------------------------------------------

inline void write_regime_series(const RegimeSeries& series, const std::string& path) {
    series.validate();
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw IoError("cannot open for writing: " + path);
    os << "date,label\n";
    for (std::size_t i = 0; i < series.size(); ++i)
        os << format_iso_date(series.times[i]) << ',' << series.labels[i] << '\n';
    os.flush();
    if (!os) throw IoError("write failed: " + path);
}

inline RegimeSeries read_regime_series(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open: " + path);
    std::string line;
    if (!std::getline(is, line)) throw FormatError("empty regime series file: " + path);
    if (line.size() && line.back() == '\r') line.pop_back();
    if (line != "date,label")
        throw FormatError("bad regime series header '" + line + "' in " + path);
    RegimeSeries s;
    std::size_t line_no = 1;
    while (std::getline(is, line)) {
        ++line_no;
        if (line.size() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        const auto comma = line.find(',');
        if (comma == std::string::npos)
            throw ParseError(path + ":" + std::to_string(line_no) + ": missing comma");
        std::int64_t day = 0;
        try {
            day = parse_iso_date(line.substr(0, comma));
        } catch (const ParseError& e) {
            throw ParseError(path + ":" + std::to_string(line_no) + ": " + e.what());
        }
        const std::string label_part = line.substr(comma + 1);
        char* end = nullptr;
        const long label = std::strtol(label_part.c_str(), &end, 10);
        if (end == label_part.c_str() || *end != '\0' || label < 0 || label >= kNumRegimes)
            throw ParseError(path + ":" + std::to_string(line_no) + ": bad label '" +
                             label_part + "'");
        s.times.push_back(day);
        s.labels.push_back(static_cast<int>(label));
    }
    s.validate();
    return s;
}

namespace detail {

constexpr std::uint32_t kRegimeModelVersion = 1;

inline void write_f64_array(std::ostream& os, const std::vector<double>& v) {
    write_pod<std::uint64_t>(os, v.size());
    write_array(os, v);
}

inline std::vector<double> read_f64_array(std::istream& is, const char* what) {
    const auto n = read_pod<std::uint64_t>(is, what);
    std::vector<double> v;
    read_array(is, v, n, what);
    return v;
}

}  // namespace detail

inline void write_regime_model(const RegimeModel& model, const std::string& path) {
    model.validate();
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot open for writing: " + path);
    os.write("RGM1", 4);
    detail::write_pod<std::uint32_t>(os, detail::kRegimeModelVersion);
    detail::write_pod<std::uint64_t>(os, model.k);
    detail::write_pod<std::uint64_t>(os, model.dim);
    detail::write_array(os, model.centroids);
    for (int m : model.label_map) detail::write_pod<std::int32_t>(os, m);
    detail::write_pod<double>(os, model.inertia);
    const std::uint8_t has_basis = model.basis.n_eof > 0 ? 1 : 0;
    detail::write_pod<std::uint8_t>(os, has_basis);
    if (has_basis) {
        detail::write_pod<std::uint64_t>(os, model.basis.n_eof);
        detail::write_f64_array(os, model.basis.lats);
        detail::write_f64_array(os, model.basis.lons);
        detail::write_f64_array(os, model.basis.components);
        detail::write_f64_array(os, model.basis.explained_variance_ratio);
        detail::write_f64_array(os, model.basis.weights);
    }
    os.flush();
    if (!os) throw IoError("write failed: " + path);
}

inline RegimeModel read_regime_model(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open: " + path);
    char magic[4] = {};
    is.read(magic, 4);
    if (!is || std::memcmp(magic, "RGM1", 4) != 0)
        throw FormatError("not a regime model file: " + path);
    const auto version = detail::read_pod<std::uint32_t>(is, "version");
    if (version != detail::kRegimeModelVersion)
        throw FormatError("unsupported regime model version " + std::to_string(version));
    RegimeModel model;
    model.k = detail::read_pod<std::uint64_t>(is, "k");
    model.dim = detail::read_pod<std::uint64_t>(is, "dim");
    detail::read_array(is, model.centroids, model.k * model.dim, "centroids");
    model.label_map.resize(model.k);
    for (auto& m : model.label_map) m = detail::read_pod<std::int32_t>(is, "label map");
    model.inertia = detail::read_pod<double>(is, "inertia");
    const auto has_basis = detail::read_pod<std::uint8_t>(is, "basis flag");
    if (has_basis) {
        model.basis.n_eof = detail::read_pod<std::uint64_t>(is, "n_eof");
        model.basis.lats = detail::read_f64_array(is, "basis lats");
        model.basis.lons = detail::read_f64_array(is, "basis lons");
        model.basis.components = detail::read_f64_array(is, "basis components");
        model.basis.explained_variance_ratio = detail::read_f64_array(is, "basis ratios");
        model.basis.weights = detail::read_f64_array(is, "basis weights");
        model.basis.validate();
    }
    model.validate();
    return model;
}

}  // namespace s2scast
