#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "s2scast/common.hpp"
#include "s2scast/models.hpp"
#include "s2scast/training.hpp"

// Forecast skill metrics, forecasts of opportunity, regime precursor
// statistics, and driver composites over evaluated forecast records.

namespace s2scast {

// ---------------------------------------------------------------------------
// Confusion tensor: per lead week, true class x predicted class counts.
// ---------------------------------------------------------------------------

struct ConfusionTensor {
    std::array<std::array<std::array<std::size_t, kNumRegimes>, kNumRegimes>, kLeadWeeks> counts{};

    std::size_t week_total(std::size_t week) const {
        std::size_t n = 0;
        for (const auto& row : counts.at(week))
            for (std::size_t c : row) n += c;
        return n;
    }
};

inline int predicted_label(const ForecastRecord& rec, std::size_t week) {
    const auto& row = rec.probs.at(week);
    int arg = 0;
    for (int k = 1; k < static_cast<int>(kNumRegimes); ++k)
        if (row[static_cast<std::size_t>(k)] > row[static_cast<std::size_t>(arg)]) arg = k;
    return arg;
}

inline ConfusionTensor confusion_from_records(const std::vector<ForecastRecord>& records) {
    ConfusionTensor conf;
    for (const auto& rec : records) {
        rec.validate();
        for (std::size_t w = 0; w < kLeadWeeks; ++w) {
            const auto t = static_cast<std::size_t>(rec.targets[w]);
            const auto p = static_cast<std::size_t>(predicted_label(rec, w));
            ++conf.counts[w][t][p];
        }
    }
    return conf;
}

namespace detail {

struct OneVsAll {
    double tp = 0, fp = 0, fn = 0, tn = 0;
};

inline OneVsAll one_vs_all(const ConfusionTensor& conf, std::size_t week, std::size_t cls) {
    OneVsAll s;
    for (std::size_t t = 0; t < kNumRegimes; ++t)
        for (std::size_t p = 0; p < kNumRegimes; ++p) {
            const auto n = static_cast<double>(conf.counts.at(week)[t][p]);
            if (t == cls && p == cls)
                s.tp += n;
            else if (t == cls)
                s.fn += n;
            else if (p == cls)
                s.fp += n;
            else
                s.tn += n;
        }
    return s;
}

inline void require_samples(const ConfusionTensor& conf, std::size_t week, const char* what) {
    if (conf.week_total(week) == 0)
        throw EvaluationError(std::string(what) + ": no samples for lead week " +
                              std::to_string(week + 1));
}

}  // namespace detail

// mean per-class recall; classes never observed as the true label are
// excluded from the mean and flagged
inline double balanced_accuracy(const ConfusionTensor& conf, std::size_t week,
                                std::array<bool, kNumRegimes>* excluded = nullptr) {
    detail::require_samples(conf, week, "balanced accuracy");
    double acc = 0.0;
    int classes = 0;
    for (std::size_t c = 0; c < kNumRegimes; ++c) {
        const auto s = detail::one_vs_all(conf, week, c);
        const bool missing = s.tp + s.fn == 0.0;
        if (excluded) (*excluded)[c] = missing;
        if (missing) continue;
        acc += s.tp / (s.tp + s.fn);
        ++classes;
    }
    return acc / static_cast<double>(classes);
}

struct CsiResult {
    double weighted = 0.0;                          // support-weighted mean
    std::array<double, kNumRegimes> per_class{};    // TP / (TP + FP + FN)
    std::array<bool, kNumRegimes> defined{};        // false when TP+FP+FN = 0
};

inline CsiResult csi(const ConfusionTensor& conf, std::size_t week) {
    detail::require_samples(conf, week, "csi");
    CsiResult out;
    double weight_sum = 0.0;
    for (std::size_t c = 0; c < kNumRegimes; ++c) {
        const auto s = detail::one_vs_all(conf, week, c);
        const double denom = s.tp + s.fp + s.fn;
        out.defined[c] = denom > 0.0;
        if (!out.defined[c]) continue;
        out.per_class[c] = s.tp / denom;
        const double support = s.tp + s.fn;
        out.weighted += support * out.per_class[c];
        weight_sum += support;
    }
    out.weighted = weight_sum > 0.0 ? out.weighted / weight_sum : 0.0;
    return out;
}

// one-vs-all binary accuracy for a single class
inline double classwise_accuracy(const ConfusionTensor& conf, std::size_t week, std::size_t cls) {
    detail::require_samples(conf, week, "classwise accuracy");
    const auto s = detail::one_vs_all(conf, week, cls);
    return (s.tp + s.tn) / (s.tp + s.tn + s.fp + s.fn);
}

// top-label expected calibration error over all (record, week) pairs:
// equal-width confidence bins, sum of (bin mass) * |bin accuracy - bin
// confidence|
inline double expected_calibration_error(const std::vector<ForecastRecord>& records,
                                         std::size_t n_bins = 10) {
    if (records.empty()) throw EvaluationError("calibration error needs forecast records");
    if (n_bins < 1) throw ArgumentError("calibration error needs at least one bin");
    std::vector<std::size_t> count(n_bins, 0), hits(n_bins, 0);
    std::vector<double> conf_sum(n_bins, 0.0);
    for (const auto& rec : records) {
        rec.validate();
        for (std::size_t w = 0; w < kLeadWeeks; ++w) {
            const int label = predicted_label(rec, w);
            const double conf = rec.probs[w][static_cast<std::size_t>(label)];
            std::size_t bin = static_cast<std::size_t>(conf * static_cast<double>(n_bins));
            if (bin >= n_bins) bin = n_bins - 1;  // confidence exactly 1
            ++count[bin];
            conf_sum[bin] += conf;
            if (label == rec.targets[w]) ++hits[bin];
        }
    }
    const double total = static_cast<double>(records.size() * kLeadWeeks);
    double ece = 0.0;
    for (std::size_t b = 0; b < n_bins; ++b) {
        if (count[b] == 0) continue;
        const double n = static_cast<double>(count[b]);
        const double acc = static_cast<double>(hits[b]) / n;
        const double conf = conf_sum[b] / n;
        ece += n / total * std::fabs(acc - conf);
    }
    return ece;
}

// ---------------------------------------------------------------------------
// Forecasts of opportunity: correct predictions whose confidence reaches the
// chosen percentile of all (sample, week) confidences.
// ---------------------------------------------------------------------------

namespace detail {

// empirical percentile: value at rank floor(p/100 * N) of the sorted sample
inline double empirical_percentile(std::vector<double> values, double p) {
    if (values.empty()) throw ArgumentError("percentile of an empty sample");
    if (p < 0.0 || p > 100.0) throw ArgumentError("percentile must be in [0, 100]");
    std::sort(values.begin(), values.end());
    std::size_t rank = static_cast<std::size_t>(p * static_cast<double>(values.size()) / 100.0);
    if (rank >= values.size()) rank = values.size() - 1;
    return values[rank];
}

}  // namespace detail

struct OpportunityPick {
    std::size_t record = 0;  // index into the evaluated record vector
    std::size_t week = 0;    // lead week, 0-based
    int label = 0;           // predicted (and, by selection, true) regime
    double confidence = 0.0;
};

struct OpportunitySet {
    double percentile = 90.0;
    double threshold = 0.0;
    std::vector<OpportunityPick> picks;
    std::array<std::array<std::size_t, kLeadWeeks>, kNumRegimes> counts{};  // [regime][week]
};

inline OpportunitySet select_opportunities(const std::vector<ForecastRecord>& records,
                                           double percentile = 90.0) {
    if (records.size() < 10)
        throw EvaluationError("opportunity selection needs at least 10 records, got " +
                              std::to_string(records.size()));
    std::vector<double> confidences;
    confidences.reserve(records.size() * kLeadWeeks);
    for (const auto& rec : records)
        for (std::size_t w = 0; w < kLeadWeeks; ++w)
            confidences.push_back(rec.probs[w][static_cast<std::size_t>(predicted_label(rec, w))]);

    OpportunitySet out;
    out.percentile = percentile;
    out.threshold = detail::empirical_percentile(std::move(confidences), percentile);
    for (std::size_t r = 0; r < records.size(); ++r)
        for (std::size_t w = 0; w < kLeadWeeks; ++w) {
            const int pred = predicted_label(records[r], w);
            const double conf = records[r].probs[w][static_cast<std::size_t>(pred)];
            if (conf < out.threshold) continue;
            if (pred != records[r].targets[w]) continue;
            out.picks.push_back(OpportunityPick{r, w, pred, conf});
            ++out.counts[static_cast<std::size_t>(pred)][w];
        }
    return out;
}

// ---------------------------------------------------------------------------
// Labeled (record, week) pairs: the common currency of the composite and
// precursor statistics. Three standard selections are provided.
// ---------------------------------------------------------------------------

struct LabeledPair {
    std::size_t record = 0;
    std::size_t week = 0;  // lead week, 0-based
    int regime = 0;        // the label the pair is grouped under
};

inline std::vector<LabeledPair> pairs_from_opportunities(const OpportunitySet& opps) {
    std::vector<LabeledPair> out;
    out.reserve(opps.picks.size());
    for (const auto& p : opps.picks) out.push_back(LabeledPair{p.record, p.week, p.label});
    return out;
}

inline std::vector<LabeledPair> pairs_from_predictions(
    const std::vector<ForecastRecord>& records) {
    std::vector<LabeledPair> out;
    out.reserve(records.size() * kLeadWeeks);
    for (std::size_t r = 0; r < records.size(); ++r)
        for (std::size_t w = 0; w < kLeadWeeks; ++w)
            out.push_back(LabeledPair{r, w, predicted_label(records[r], w)});
    return out;
}

inline std::vector<LabeledPair> pairs_from_targets(const std::vector<ForecastRecord>& records) {
    std::vector<LabeledPair> out;
    out.reserve(records.size() * kLeadWeeks);
    for (std::size_t r = 0; r < records.size(); ++r)
        for (std::size_t w = 0; w < kLeadWeeks; ++w)
            out.push_back(LabeledPair{r, w, records[r].targets[w]});
    return out;
}

// window_id -> sample index, for joining records back to their input windows
inline std::unordered_map<std::int64_t, std::size_t> index_windows(const WindowDataset& data) {
    std::unordered_map<std::int64_t, std::size_t> out;
    out.reserve(data.samples.size());
    for (std::size_t i = 0; i < data.samples.size(); ++i)
        out.emplace(data.samples[i].window_id, i);
    return out;
}

namespace detail {

inline const WindowSample& window_of(const std::vector<ForecastRecord>& records, std::size_t r,
                                     const WindowDataset& windows,
                                     const std::unordered_map<std::int64_t, std::size_t>& index) {
    const auto it = index.find(records.at(r).window_id);
    if (it == index.end())
        throw CoverageError("forecast record references unknown window id " +
                            std::to_string(records.at(r).window_id));
    return windows.samples[it->second];
}

}  // namespace detail

// maximum lag in weeks between an input week (up to t-5) and a lead week
// (up to t+6)
constexpr std::size_t kMaxLagWeeks = kInputWeeks + kLeadWeeks - 1;  // 11

// ---------------------------------------------------------------------------
// Regime precursor table: conditional prediction probabilities given an input
// regime at lag dt, expressed as anomalies against the test-set target rates.
// ---------------------------------------------------------------------------

struct PrecursorTable {
    struct Group {
        std::array<double, kNumRegimes> conditional{};  // p(predicted = k | precursor)
        std::size_t support = 0;                        // pairs contributing to the cell
        bool valid = false;                             // support > 0 and lag reachable
    };
    // [precursor regime c][lead week i][lag dt-1]
    std::array<std::array<std::array<Group, kMaxLagWeeks>, kLeadWeeks>, kNumRegimes> groups{};
    // reference target rate p(y = k) per lead week, over all evaluated records
    std::array<std::array<double, kNumRegimes>, kLeadWeeks> target_rate{};

    // relative frequency anomaly for (precursor c, predicted k, lead i, lag dt)
    double anomaly(std::size_t c, std::size_t k, std::size_t week, std::size_t dt) const {
        const auto& g = groups.at(c).at(week).at(dt - 1);
        if (!g.valid) throw EvaluationError("precursor cell has no support");
        return g.conditional[k] - target_rate[week][k];
    }
};

inline PrecursorTable precursor_frequencies(
    const std::vector<ForecastRecord>& records, const std::vector<LabeledPair>& pairs,
    const WindowDataset& windows) {
    const auto index = index_windows(windows);
    PrecursorTable out;

    // reference rates from the targets of every evaluated record
    if (records.empty()) throw EvaluationError("precursor table needs evaluated records");
    for (std::size_t w = 0; w < kLeadWeeks; ++w) {
        for (const auto& rec : records)
            out.target_rate[w][static_cast<std::size_t>(rec.targets[w])] += 1.0;
        for (auto& v : out.target_rate[w]) v /= static_cast<double>(records.size());
    }

    // raw joint counts: [c][week][dt-1][k]
    std::array<std::array<std::array<std::array<std::size_t, kNumRegimes>, kMaxLagWeeks>,
                          kLeadWeeks>,
               kNumRegimes>
        joint{};
    for (const auto& pair : pairs) {
        const auto& sample = detail::window_of(records, pair.record, windows, index);
        for (std::size_t j = 0; j < kInputWeeks; ++j) {
            // input week t-j; lag dt = lead + j where lead = week + 1
            const std::size_t dt = pair.week + 1 + j;
            const auto c =
                static_cast<std::size_t>(sample.inputs[kInputWeeks - 1 - j]);
            ++joint[c][pair.week][dt - 1][static_cast<std::size_t>(pair.regime)];
        }
    }

    for (std::size_t c = 0; c < kNumRegimes; ++c)
        for (std::size_t w = 0; w < kLeadWeeks; ++w)
            for (std::size_t dt = 1; dt <= kMaxLagWeeks; ++dt) {
                auto& g = out.groups[c][w][dt - 1];
                std::size_t total = 0;
                for (std::size_t k = 0; k < kNumRegimes; ++k) total += joint[c][w][dt - 1][k];
                g.support = total;
                g.valid = total > 0;
                if (!g.valid) continue;
                for (std::size_t k = 0; k < kNumRegimes; ++k)
                    g.conditional[k] = static_cast<double>(joint[c][w][dt - 1][k]) /
                                       static_cast<double>(total);
            }
    return out;
}

// ---------------------------------------------------------------------------
// SPV composites: lag-resolved mean driver anomalies preceding predictions,
// relative to the per-class mean level.
// ---------------------------------------------------------------------------

struct SpvComposite {
    struct Cell {
        double mean = 0.0;  // anomaly against the class mean
        double sd = 0.0;
        std::size_t n = 0;
        bool valid = false;
    };
    // [regime][lead week][lag dt-1]
    std::array<std::array<std::array<Cell, kMaxLagWeeks>, kLeadWeeks>, kNumRegimes> cells{};
    std::array<double, kNumRegimes> class_mean{};
    std::array<bool, kNumRegimes> class_present{};
    double strong_threshold = 0.0;  // 80th percentile of the reference distribution
    double weak_threshold = 0.0;    // 30th percentile
};

inline SpvComposite spv_composites(const std::vector<ForecastRecord>& records,
                                   const std::vector<LabeledPair>& pairs,
                                   const WindowDataset& windows,
                                   const std::unordered_map<std::int64_t, double>& spv_by_time,
                                   const std::vector<double>& reference_distribution) {
    const auto index = index_windows(windows);
    SpvComposite out;
    out.strong_threshold = detail::empirical_percentile(reference_distribution, 80.0);
    out.weak_threshold = detail::empirical_percentile(reference_distribution, 30.0);

    const auto spv_at = [&](std::int64_t day) {
        const auto it = spv_by_time.find(day);
        if (it == spv_by_time.end())
            throw CoverageError("SPV series missing " + format_iso_date(day));
        return it->second;
    };

    // class reference level: mean over every input-week value of the class's pairs
    std::array<double, kNumRegimes> class_sum{};
    std::array<std::size_t, kNumRegimes> class_n{};
    for (const auto& pair : pairs) {
        const auto& sample = detail::window_of(records, pair.record, windows, index);
        for (std::size_t j = 0; j < kInputWeeks; ++j) {
            class_sum[static_cast<std::size_t>(pair.regime)] +=
                spv_at(sample.times[kInputWeeks - 1 - j]);
            ++class_n[static_cast<std::size_t>(pair.regime)];
        }
    }
    for (std::size_t c = 0; c < kNumRegimes; ++c) {
        out.class_present[c] = class_n[c] > 0;
        if (out.class_present[c])
            out.class_mean[c] = class_sum[c] / static_cast<double>(class_n[c]);
    }

    // per-cell accumulation
    std::array<std::array<std::array<std::pair<double, double>, kMaxLagWeeks>, kLeadWeeks>,
               kNumRegimes>
        acc{};  // (sum, sum of squares)
    std::array<std::array<std::array<std::size_t, kMaxLagWeeks>, kLeadWeeks>, kNumRegimes> n{};
    for (const auto& pair : pairs) {
        const auto& sample = detail::window_of(records, pair.record, windows, index);
        const auto c = static_cast<std::size_t>(pair.regime);
        for (std::size_t j = 0; j < kInputWeeks; ++j) {
            const double v = spv_at(sample.times[kInputWeeks - 1 - j]);
            const std::size_t dt = pair.week + 1 + j;
            acc[c][pair.week][dt - 1].first += v;
            acc[c][pair.week][dt - 1].second += v * v;
            ++n[c][pair.week][dt - 1];
        }
    }
    for (std::size_t c = 0; c < kNumRegimes; ++c)
        for (std::size_t w = 0; w < kLeadWeeks; ++w)
            for (std::size_t dt = 1; dt <= kMaxLagWeeks; ++dt) {
                auto& cell = out.cells[c][w][dt - 1];
                cell.n = n[c][w][dt - 1];
                cell.valid = cell.n > 0;
                if (!cell.valid) continue;
                const double m =
                    acc[c][w][dt - 1].first / static_cast<double>(cell.n);
                const double var = std::max(
                    0.0, acc[c][w][dt - 1].second / static_cast<double>(cell.n) - m * m);
                cell.mean = m - out.class_mean[c];
                cell.sd = std::sqrt(var);
            }
    return out;
}

// ---------------------------------------------------------------------------
// MJO composites: mean RMM trajectory over the input weeks preceding each
// predicted regime and lead week.
// ---------------------------------------------------------------------------

struct MjoComposite {
    struct Cell {
        double rmm1 = 0.0;
        double rmm2 = 0.0;
        std::size_t n = 0;
        bool valid = false;
        double amplitude() const { return std::hypot(rmm1, rmm2); }
        bool active() const { return amplitude() >= 1.0; }
    };
    // [regime][lead week][input week j], lag dt = lead + 1 + j
    std::array<std::array<std::array<Cell, kInputWeeks>, kLeadWeeks>, kNumRegimes> cells{};
};

inline MjoComposite mjo_composites(
    const std::vector<ForecastRecord>& records, const std::vector<LabeledPair>& pairs,
    const WindowDataset& windows,
    const std::unordered_map<std::int64_t, std::pair<double, double>>& rmm_by_time) {
    const auto index = index_windows(windows);
    MjoComposite out;
    std::array<std::array<std::array<std::pair<double, double>, kInputWeeks>, kLeadWeeks>,
               kNumRegimes>
        acc{};
    std::array<std::array<std::array<std::size_t, kInputWeeks>, kLeadWeeks>, kNumRegimes> n{};
    for (const auto& pair : pairs) {
        const auto& sample = detail::window_of(records, pair.record, windows, index);
        const auto c = static_cast<std::size_t>(pair.regime);
        for (std::size_t j = 0; j < kInputWeeks; ++j) {
            const std::int64_t day = sample.times[kInputWeeks - 1 - j];
            const auto it = rmm_by_time.find(day);
            if (it == rmm_by_time.end())
                throw CoverageError("RMM series missing " + format_iso_date(day));
            acc[c][pair.week][j].first += it->second.first;
            acc[c][pair.week][j].second += it->second.second;
            ++n[c][pair.week][j];
        }
    }
    for (std::size_t c = 0; c < kNumRegimes; ++c)
        for (std::size_t w = 0; w < kLeadWeeks; ++w)
            for (std::size_t j = 0; j < kInputWeeks; ++j) {
                auto& cell = out.cells[c][w][j];
                cell.n = n[c][w][j];
                cell.valid = cell.n > 0;
                if (!cell.valid) continue;
                cell.rmm1 = acc[c][w][j].first / static_cast<double>(cell.n);
                cell.rmm2 = acc[c][w][j].second / static_cast<double>(cell.n);
            }
    return out;
}

// ---------------------------------------------------------------------------
// Correctness vs MJO activity: 2x2 counts aggregated over ensemble members.
// ---------------------------------------------------------------------------

struct ActivePhaseConfusion {
    // [correct? 1 : 0][active? 1 : 0] mean and standard deviation over members
    std::array<std::array<double, 2>, 2> mean{};
    std::array<std::array<double, 2>, 2> sd{};
    std::size_t n_members = 0;
};

inline ActivePhaseConfusion active_phase_confusion(
    const std::vector<ForecastRecord>& records, const WindowDataset& windows,
    const std::unordered_map<std::int64_t, int>& mjo_class_by_time) {
    const auto index = index_windows(windows);
    // per-member 2x2 counts; the most recent input week sets the activity tag
    std::map<std::uint64_t, std::array<std::array<std::size_t, 2>, 2>> members;
    for (std::size_t r = 0; r < records.size(); ++r) {
        const auto& sample = detail::window_of(records, r, windows, index);
        const std::int64_t day = sample.times[kInputWeeks - 1];
        const auto it = mjo_class_by_time.find(day);
        if (it == mjo_class_by_time.end())
            throw CoverageError("MJO series missing " + format_iso_date(day));
        const std::size_t active = it->second != 0 ? 1 : 0;
        auto& table = members[records[r].member_seed];
        for (std::size_t w = 0; w < kLeadWeeks; ++w) {
            const std::size_t correct =
                predicted_label(records[r], w) == records[r].targets[w] ? 1 : 0;
            ++table[correct][active];
        }
    }
    ActivePhaseConfusion out;
    out.n_members = members.size();
    if (members.empty()) return out;
    for (std::size_t a = 0; a < 2; ++a)
        for (std::size_t b = 0; b < 2; ++b) {
            double sum = 0.0, sum2 = 0.0;
            for (const auto& [seed, table] : members) {
                const auto v = static_cast<double>(table[a][b]);
                sum += v;
                sum2 += v * v;
            }
            const double m = sum / static_cast<double>(members.size());
            out.mean[a][b] = m;
            out.sd[a][b] =
                std::sqrt(std::max(0.0, sum2 / static_cast<double>(members.size()) - m * m));
        }
    return out;
}

// ---------------------------------------------------------------------------
// Hindcast lead-week extraction from a daily forecast series.
// ---------------------------------------------------------------------------

constexpr std::array<std::size_t, kLeadWeeks> kHindcastLeadDays{6, 13, 20, 27, 34, 40};

// daily: forecast labels indexed by day since initialization (day 1 first)
inline std::array<int, kLeadWeeks> hindcast_leadmap(const std::vector<int>& daily) {
    if (daily.size() < kHindcastLeadDays.back())
        throw CoverageError("hindcast series has " + std::to_string(daily.size()) +
                            " days, needs " + std::to_string(kHindcastLeadDays.back()));
    std::array<int, kLeadWeeks> out{};
    for (std::size_t w = 0; w < kLeadWeeks; ++w) out[w] = daily[kHindcastLeadDays[w] - 1];
    return out;
}

}  // namespace s2scast
