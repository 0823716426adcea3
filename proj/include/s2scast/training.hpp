#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <future>
#include <limits>
#include <memory>
#include <string>
#include <thread>
#include <unordered_map>
#include <utility>
#include <vector>

#include "s2scast/common.hpp"
#include "s2scast/linalg.hpp"
#include "s2scast/models.hpp"
#include "s2scast/preprocess.hpp"
#include "s2scast/regimes.hpp"
#include "s2scast/tensorgrad.hpp"

// Dataset windowing, the calibration-oriented focal loss, the optimization
// loop (Adam + gradient clipping + stochastic weight averaging + early
// stopping), deep ensembles, and Gaussian-process Bayesian optimization for
// hyperparameters.

namespace s2scast {

// ---------------------------------------------------------------------------
// Window dataset. Each sample is 12 weekly steps taken from one winter's
// daily smoothed series: 6 input weeks ending at the anchor, 6 target weeks
// after it. Windows never cross a winter boundary.
// ---------------------------------------------------------------------------

enum class Split { train, val, test };

inline const char* split_name(Split s) {
    switch (s) {
        case Split::train: return "train";
        case Split::val: return "val";
        default: return "test";
    }
}

struct WindowSample {
    std::int64_t window_id = 0;
    int winter_id = 0;  // start year of the winter the window lives in
    Split split = Split::train;
    std::array<std::int64_t, kInputWeeks + kLeadWeeks> times{};
    std::array<int, kInputWeeks> inputs{};
    std::array<int, kLeadWeeks> targets{};

    std::int64_t anchor_time() const { return times[kInputWeeks - 1]; }
};

enum class SplitMode { chronological, random_winters };

struct SplitSpec {
    SplitMode mode = SplitMode::chronological;
    // winters are assigned by start year: <= train_last -> train,
    // <= val_last -> val, <= test_last -> test, later -> dropped
    int train_last_start_year = 2005;
    int val_last_start_year = 2011;
    int test_last_start_year = 2022;
    // random_winters mode reshuffles the train+val winters (test untouched)
    double random_val_fraction = 0.2;
    std::uint64_t split_seed = 0;
};

struct WindowDataset {
    std::vector<WindowSample> samples;
    std::vector<std::string> warnings;

    std::vector<std::size_t> indices_of(Split s) const {
        std::vector<std::size_t> out;
        for (std::size_t i = 0; i < samples.size(); ++i)
            if (samples[i].split == s) out.push_back(i);
        return out;
    }

    std::size_t count_of(Split s) const { return indices_of(s).size(); }
};

// a window needs 6+6 weekly steps spanning 77 days, so 78 daily points
constexpr std::size_t kMinWinterDays = 7 * (kInputWeeks + kLeadWeeks - 1) + 1;

inline WindowDataset build_windows(const RegimeSeries& series, const SplitSpec& spec,
                                   int stride_days = 7) {
    if (stride_days < 1) throw ArgumentError("build_windows: stride must be >= 1");
    series.validate();
    WindowDataset out;

    // contiguous daily runs are winters; the smoothed series has gaps between
    std::vector<std::pair<std::size_t, std::size_t>> runs;  // [begin, end)
    std::size_t begin = 0;
    for (std::size_t i = 1; i <= series.size(); ++i) {
        if (i == series.size() || series.times[i] != series.times[i - 1] + 1) {
            runs.emplace_back(begin, i);
            begin = i;
        }
    }

    struct WinterRun {
        std::size_t begin, end;
        int year;
        Split split;
        bool keep;
    };
    std::vector<WinterRun> winters;
    for (const auto& [b, e] : runs) {
        WinterRun w{b, e, winter_start_year(series.times[b]), Split::train, true};
        if (e - b < kMinWinterDays) {
            out.warnings.push_back("winter " + std::to_string(w.year) + " skipped: " +
                                   std::to_string(e - b) + " smoothed days < " +
                                   std::to_string(kMinWinterDays));
            continue;
        }
        if (w.year <= spec.train_last_start_year)
            w.split = Split::train;
        else if (w.year <= spec.val_last_start_year)
            w.split = Split::val;
        else if (w.year <= spec.test_last_start_year)
            w.split = Split::test;
        else {
            out.warnings.push_back("winter " + std::to_string(w.year) +
                                   " outside the configured split years, dropped");
            continue;
        }
        winters.push_back(w);
    }

    if (spec.mode == SplitMode::random_winters) {
        // keep the test winters fixed, reshuffle train+val membership
        std::vector<std::size_t> pool;
        for (std::size_t i = 0; i < winters.size(); ++i)
            if (winters[i].split != Split::test) pool.push_back(i);
        Rng rng(mix_u64(spec.split_seed, 0x77696e746572ULL));
        for (std::size_t i = pool.size(); i > 1; --i)
            std::swap(pool[i - 1], pool[rng.uniform_index(i)]);
        const std::size_t n_val = static_cast<std::size_t>(
            std::llround(spec.random_val_fraction * static_cast<double>(pool.size())));
        for (std::size_t i = 0; i < pool.size(); ++i)
            winters[pool[i]].split = i < n_val ? Split::val : Split::train;
    }

    for (const auto& w : winters) {
        const std::size_t len = w.end - w.begin;
        for (std::size_t a = 0; a + kMinWinterDays <= len;
             a += static_cast<std::size_t>(stride_days)) {
            WindowSample s;
            s.window_id = static_cast<std::int64_t>(out.samples.size());
            s.winter_id = w.year;
            s.split = w.split;
            for (std::size_t k = 0; k < kInputWeeks + kLeadWeeks; ++k) {
                const std::size_t idx = w.begin + a + 7 * k;
                s.times[k] = series.times[idx];
                if (k < kInputWeeks)
                    s.inputs[k] = series.labels[idx];
                else
                    s.targets[k - kInputWeeks] = series.labels[idx];
            }
            out.samples.push_back(s);
        }
    }
    return out;
}

// chronological-split invariant: all train times precede all val times, which
// precede all test times
inline void check_chronological(const WindowDataset& data) {
    std::int64_t max_train = std::numeric_limits<std::int64_t>::min();
    std::int64_t min_val = std::numeric_limits<std::int64_t>::max(), max_val = max_train;
    std::int64_t min_test = min_val;
    for (const auto& s : data.samples) {
        const std::int64_t lo = s.times.front(), hi = s.times.back();
        switch (s.split) {
            case Split::train: max_train = std::max(max_train, hi); break;
            case Split::val:
                min_val = std::min(min_val, lo);
                max_val = std::max(max_val, hi);
                break;
            case Split::test: min_test = std::min(min_test, lo); break;
        }
    }
    if (data.count_of(Split::train) && data.count_of(Split::val) && max_train >= min_val)
        throw ValidationError("window splits overlap: train reaches " +
                              format_iso_date(max_train) + ", val starts " +
                              format_iso_date(min_val));
    if (data.count_of(Split::val) && data.count_of(Split::test) && max_val >= min_test)
        throw ValidationError("window splits overlap: val reaches " + format_iso_date(max_val) +
                              ", test starts " + format_iso_date(min_test));
}

// ---------------------------------------------------------------------------
// Per-sample input features for the three forecasters. The regime model needs
// one-hot rows; the index model joins driver series by date; the combined
// model consumes precomputed map embeddings (its encoders are frozen, so each
// map's embedding is a constant of training).
// ---------------------------------------------------------------------------

inline std::vector<std::vector<double>> build_regime_features(const WindowDataset& data) {
    std::vector<std::vector<double>> rows(data.samples.size());
    for (std::size_t i = 0; i < data.samples.size(); ++i) {
        auto& r = rows[i];
        r.assign(kInputWeeks * kNumRegimes, 0.0);
        for (std::size_t t = 0; t < kInputWeeks; ++t)
            r[t * kNumRegimes + static_cast<std::size_t>(data.samples[i].inputs[t])] = 1.0;
    }
    return rows;
}

inline std::vector<std::vector<double>> build_index_features(
    const WindowDataset& data, const std::unordered_map<std::int64_t, double>& spv_by_time,
    const std::unordered_map<std::int64_t, int>& mjo_by_time) {
    std::vector<std::vector<double>> rows(data.samples.size());
    for (std::size_t i = 0; i < data.samples.size(); ++i) {
        auto& r = rows[i];
        r.reserve(kInputWeeks * kIndexFeatureWidth);
        for (std::size_t t = 0; t < kInputWeeks; ++t) {
            const std::int64_t day = data.samples[i].times[t];
            const auto sit = spv_by_time.find(day);
            const auto mit = mjo_by_time.find(day);
            if (sit == spv_by_time.end() || mit == mjo_by_time.end())
                throw CoverageError("driver series missing " + format_iso_date(day));
            std::array<double, kNumRegimes> oh{};
            oh[static_cast<std::size_t>(data.samples[i].inputs[t])] = 1.0;
            const auto row = make_index_row(oh, sit->second, mit->second);
            r.insert(r.end(), row.begin(), row.end());
        }
    }
    return rows;
}

inline std::vector<std::vector<double>> build_vit_features(
    const WindowDataset& data, const VitLstm& model,
    const std::unordered_map<std::int64_t, std::vector<double>>& u10_emb_by_time,
    const std::unordered_map<std::int64_t, std::vector<double>>& olr_emb_by_time) {
    std::vector<std::vector<double>> rows(data.samples.size());
    for (std::size_t i = 0; i < data.samples.size(); ++i) {
        auto& r = rows[i];
        r.reserve(kInputWeeks * model.feature_width());
        for (std::size_t t = 0; t < kInputWeeks; ++t) {
            const std::int64_t day = data.samples[i].times[t];
            const auto uit = u10_emb_by_time.find(day);
            const auto oit = olr_emb_by_time.find(day);
            if (uit == u10_emb_by_time.end() || oit == olr_emb_by_time.end())
                throw CoverageError("map embeddings missing " + format_iso_date(day));
            std::array<double, kNumRegimes> oh{};
            oh[static_cast<std::size_t>(data.samples[i].inputs[t])] = 1.0;
            const auto row = model.make_feature_row(oh, uit->second, oit->second);
            r.insert(r.end(), row.begin(), row.end());
        }
    }
    return rows;
}

// ---------------------------------------------------------------------------
// Adaptive focal loss. Hard samples (low predicted probability on the true
// class) get a stronger down-weighting exponent than easy ones, which keeps
// the trained probabilities better calibrated than plain cross-entropy.
// ---------------------------------------------------------------------------

struct FocalConfig {
    double low_threshold = 0.2;  // p_t below this uses the stronger exponent
    int gamma_low = 5;
    int gamma_high = 3;
    int gamma_override = -1;  // >= 0 forces a fixed exponent; 0 recovers cross-entropy
};

struct FocalStats {
    std::size_t clamped = 0;  // probability values rescued from log(0)
};

constexpr double kFocalClamp = 1e-12;

namespace detail {

inline Tensor int_pow_graph(const Tensor& base, int k) {
    if (k == 0)
        return Tensor::constant(base.shape(), std::vector<double>(base.numel(), 1.0));
    Tensor acc = base;
    for (int i = 1; i < k; ++i) acc = mul(acc, base);
    return acc;
}

}  // namespace detail

// batched graph version: week_probs[w] is (B x 4) row-stochastic, targets[b][w]
// the true class; returns the scalar mean over weeks of the per-sample mean
inline Tensor focal_loss_graph(const std::vector<Tensor>& week_probs,
                               const std::vector<std::array<int, kLeadWeeks>>& targets,
                               const FocalConfig& fc = {}, FocalStats* stats = nullptr) {
    if (week_probs.size() != kLeadWeeks)
        throw ShapeError("focal loss: expected " + std::to_string(kLeadWeeks) + " weekly blocks");
    const std::size_t B = week_probs[0].dim(0);
    if (targets.size() != B) throw ShapeError("focal loss: target rows do not match batch");
    if (fc.gamma_override < -1 || fc.gamma_low < 0 || fc.gamma_high < 0)
        throw ArgumentError("focal loss: exponents must be non-negative");

    Tensor total;
    for (std::size_t w = 0; w < kLeadWeeks; ++w) {
        std::vector<std::size_t> labels(B);
        for (std::size_t b = 0; b < B; ++b) {
            if (targets[b][w] < 0 || targets[b][w] >= static_cast<int>(kNumRegimes))
                throw ArgumentError("focal loss: target label out of range");
            labels[b] = static_cast<std::size_t>(targets[b][w]);
        }
        Tensor p_raw = gather_rows(week_probs[w], labels);
        if (stats)
            for (double v : p_raw.values())
                if (v < kFocalClamp) ++stats->clamped;
        Tensor p = clamp_min(p_raw, kFocalClamp);
        Tensor log_p = log(p);

        Tensor week_loss;
        if (fc.gamma_override == 0) {
            week_loss = neg(reduce_mean_all(log_p));
        } else {
            Tensor one_minus = add_const(neg(p), 1.0);
            Tensor weight;
            if (fc.gamma_override > 0) {
                weight = detail::int_pow_graph(one_minus, fc.gamma_override);
            } else {
                // exponent chosen per sample from the forward probability
                std::vector<double> m_low(B, 0.0), m_high(B, 0.0);
                for (std::size_t b = 0; b < B; ++b)
                    (p.values()[b] < fc.low_threshold ? m_low[b] : m_high[b]) = 1.0;
                weight = add(mul(detail::int_pow_graph(one_minus, fc.gamma_low),
                                 Tensor::constant({B}, std::move(m_low))),
                             mul(detail::int_pow_graph(one_minus, fc.gamma_high),
                                 Tensor::constant({B}, std::move(m_high))));
            }
            week_loss = neg(reduce_mean_all(mul(weight, log_p)));
        }
        total = total.defined() ? add(total, week_loss) : week_loss;
    }
    return scale(total, 1.0 / static_cast<double>(kLeadWeeks));
}

// plain-number version for a single forecast
inline double focal_loss(const ForecastProbs& probs, const std::array<int, kLeadWeeks>& targets,
                         const FocalConfig& fc = {}, FocalStats* stats = nullptr) {
    double total = 0.0;
    for (std::size_t w = 0; w < kLeadWeeks; ++w) {
        double sum = 0.0;
        for (double v : probs[w]) {
            if (v < 0.0) throw ArgumentError("focal loss: negative probability");
            sum += v;
        }
        if (std::fabs(sum - 1.0) > 1e-6)
            throw ArgumentError("focal loss: week " + std::to_string(w + 1) +
                                " probabilities sum to " + std::to_string(sum));
        if (targets[w] < 0 || targets[w] >= static_cast<int>(kNumRegimes))
            throw ArgumentError("focal loss: target label out of range");
        double p = probs[w][static_cast<std::size_t>(targets[w])];
        if (p < kFocalClamp) {
            if (stats) ++stats->clamped;
            p = kFocalClamp;
        }
        int gamma;
        if (fc.gamma_override >= 0)
            gamma = fc.gamma_override;
        else
            gamma = p < fc.low_threshold ? fc.gamma_low : fc.gamma_high;
        total += -std::pow(1.0 - p, static_cast<double>(gamma)) * std::log(p);
    }
    return total / static_cast<double>(kLeadWeeks);
}

// ---------------------------------------------------------------------------
// Training loop.
// ---------------------------------------------------------------------------

struct TrainConfig {
    double lr = 1e-4;
    std::size_t batch = 72;
    double weight_decay = 9e-4;
    double clip_norm = 0.827;
    double swa_lr = 2.5e-5;
    double dropout = 0.165;  // carried into model construction by the pipelines
    int max_epochs = 60;
    int patience = 10;
    double swa_fraction = 0.25;  // tail share of the epoch budget averaged by SWA
    std::uint64_t seed = 0;
    FocalConfig focal;
    bool use_focal = true;  // false trains the cross-entropy twin

    void validate() const {
        if (!(lr > 0.0) || !(swa_lr > 0.0)) throw ConfigError("train: learning rates must be > 0");
        if (batch < 1) throw ConfigError("train: batch must be >= 1");
        if (weight_decay < 0.0) throw ConfigError("train: weight decay must be >= 0");
        if (!(clip_norm > 0.0)) throw ConfigError("train: clip norm must be > 0");
        if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("train: dropout must be in [0, 1)");
        if (max_epochs < 1) throw ConfigError("train: max epochs must be >= 1");
        if (patience < 0) throw ConfigError("train: patience must be >= 0");
        if (!(swa_fraction > 0.0) || swa_fraction > 1.0)
            throw ConfigError("train: SWA fraction must be in (0, 1]");
    }
};

// the trainer sees a model only through these hooks, so the same loop drives
// every architecture
struct TrainableModel {
    std::vector<Tensor> params;
    // sample indices -> kLeadWeeks tensors of (batch x 4) probabilities
    std::function<std::vector<Tensor>(const std::vector<std::size_t>&, bool, std::uint64_t)>
        forward;
    std::function<Checkpoint()> snapshot;
    std::function<void(const Checkpoint&)> restore;
    std::function<void()> bn_reset;  // optional; models without batch norm leave it empty
};

struct TrainHistory {
    std::vector<double> train_loss;
    std::vector<double> val_loss;
    std::vector<double> val_balanced_accuracy;
    int best_epoch = -1;
    int epochs_run = 0;
    bool early_stopped = false;
    bool swa_applied = false;
    std::size_t clamp_warnings = 0;
};

struct TrainResult {
    Checkpoint checkpoint;
    TrainHistory history;
};

namespace detail {

// mean per-class recall over all (sample, lead week) pairs; classes absent
// from the targets are left out of the mean
inline double pooled_balanced_accuracy(const std::vector<std::array<int, kLeadWeeks>>& targets,
                                       const std::vector<std::array<int, kLeadWeeks>>& predicted) {
    std::array<double, kNumRegimes> hits{}, support{};
    for (std::size_t i = 0; i < targets.size(); ++i)
        for (std::size_t w = 0; w < kLeadWeeks; ++w) {
            const int t = targets[i][w];
            support[static_cast<std::size_t>(t)] += 1.0;
            if (predicted[i][w] == t) hits[static_cast<std::size_t>(t)] += 1.0;
        }
    double acc = 0.0;
    int classes = 0;
    for (std::size_t k = 0; k < kNumRegimes; ++k) {
        if (support[k] == 0.0) continue;
        acc += hits[k] / support[k];
        ++classes;
    }
    if (classes == 0) throw ArgumentError("balanced accuracy: no targets");
    return acc / static_cast<double>(classes);
}

inline std::vector<std::array<int, kLeadWeeks>> gather_targets(
    const WindowDataset& data, const std::vector<std::size_t>& idx) {
    std::vector<std::array<int, kLeadWeeks>> out(idx.size());
    for (std::size_t i = 0; i < idx.size(); ++i) out[i] = data.samples[idx[i]].targets;
    return out;
}

}  // namespace detail

// runs eval-mode forecasts for a set of samples; returns argmax labels
inline std::vector<std::array<int, kLeadWeeks>> predict_labels(
    const TrainableModel& model, const std::vector<std::size_t>& idx, std::size_t batch) {
    std::vector<std::array<int, kLeadWeeks>> out(idx.size());
    for (std::size_t b0 = 0; b0 < idx.size(); b0 += batch) {
        const std::size_t bn = std::min(batch, idx.size() - b0);
        const std::vector<std::size_t> chunk(idx.begin() + static_cast<std::ptrdiff_t>(b0),
                                             idx.begin() + static_cast<std::ptrdiff_t>(b0 + bn));
        const auto probs = model.forward(chunk, false, 0);
        for (std::size_t w = 0; w < kLeadWeeks; ++w) {
            const auto& v = probs[w].values();
            for (std::size_t i = 0; i < bn; ++i) {
                int arg = 0;
                for (int k = 1; k < static_cast<int>(kNumRegimes); ++k)
                    if (v[i * kNumRegimes + static_cast<std::size_t>(k)] >
                        v[i * kNumRegimes + static_cast<std::size_t>(arg)])
                        arg = k;
                out[b0 + i][w] = arg;
            }
        }
    }
    return out;
}

// eval-mode probability forecasts for a set of samples, joined with their
// targets and window ids so the evaluation module can consume them directly
inline std::vector<ForecastRecord> forecast_records(const TrainableModel& model,
                                                    const WindowDataset& data,
                                                    const std::vector<std::size_t>& idx,
                                                    std::size_t batch,
                                                    std::uint64_t member_seed = 0) {
    if (batch < 1) throw ArgumentError("forecast_records: batch must be >= 1");
    std::vector<ForecastRecord> out(idx.size());
    for (std::size_t b0 = 0; b0 < idx.size(); b0 += batch) {
        const std::size_t bn = std::min(batch, idx.size() - b0);
        const std::vector<std::size_t> chunk(idx.begin() + static_cast<std::ptrdiff_t>(b0),
                                             idx.begin() + static_cast<std::ptrdiff_t>(b0 + bn));
        const auto probs = model.forward(chunk, false, 0);
        for (std::size_t w = 0; w < kLeadWeeks; ++w) {
            const auto& v = probs[w].values();
            for (std::size_t i = 0; i < bn; ++i)
                for (std::size_t k = 0; k < kNumRegimes; ++k)
                    out[b0 + i].probs[w][k] = v[i * kNumRegimes + k];
        }
    }
    for (std::size_t i = 0; i < idx.size(); ++i) {
        const auto& s = data.samples[idx[i]];
        out[i].window_id = s.window_id;
        out[i].targets = s.targets;
        out[i].member_seed = member_seed;
        out[i].validate();
    }
    return out;
}

inline TrainResult train(TrainableModel& model, const WindowDataset& data,
                         const TrainConfig& cfg) {
    cfg.validate();
    const auto train_idx = data.indices_of(Split::train);
    const auto val_idx = data.indices_of(Split::val);
    if (train_idx.empty()) throw ArgumentError("train: no training samples");
    if (val_idx.empty()) throw ArgumentError("train: no validation samples");

    FocalConfig fc = cfg.focal;
    if (!cfg.use_focal) fc.gamma_override = 0;

    AdamConfig acfg;
    acfg.lr = cfg.lr;
    acfg.weight_decay = cfg.weight_decay;
    Adam opt(model.params, acfg);

    TrainHistory hist;
    double best_acc = -1.0;
    Checkpoint best_ck;

    const int swa_epochs =
        std::max(1, static_cast<int>(std::llround(cfg.swa_fraction * cfg.max_epochs)));
    const int swa_start = cfg.max_epochs - swa_epochs;

    std::vector<std::vector<double>> swa_sum;
    std::size_t swa_count = 0;
    std::uint64_t step_id = 0;

    const auto val_targets = detail::gather_targets(data, val_idx);

    for (int epoch = 0; epoch < cfg.max_epochs; ++epoch) {
        const bool in_swa = epoch >= swa_start;
        opt.set_lr(in_swa ? cfg.swa_lr : cfg.lr);

        std::vector<std::size_t> order = train_idx;
        Rng shuffle_rng(counter_hash(cfg.seed, 11, static_cast<std::uint64_t>(epoch), 0));
        for (std::size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1], order[shuffle_rng.uniform_index(i)]);

        double epoch_loss = 0.0;
        std::size_t n_batches = 0;
        for (std::size_t b0 = 0; b0 < order.size(); b0 += cfg.batch) {
            const std::size_t bn = std::min(cfg.batch, order.size() - b0);
            const std::vector<std::size_t> chunk(order.begin() + static_cast<std::ptrdiff_t>(b0),
                                                 order.begin() +
                                                     static_cast<std::ptrdiff_t>(b0 + bn));
            FocalStats fstats;
            const auto probs = model.forward(chunk, true, ++step_id);
            Tensor loss =
                focal_loss_graph(probs, detail::gather_targets(data, chunk), fc, &fstats);
            hist.clamp_warnings += fstats.clamped;
            const double lv = loss.values()[0];
            if (!std::isfinite(lv))
                throw NumericError("train: non-finite loss at epoch " + std::to_string(epoch) +
                                   ", step " + std::to_string(step_id) + ", batch " +
                                   std::to_string(n_batches));
            opt.zero_grad();
            loss.backward();
            clip_global_norm(model.params, cfg.clip_norm);
            opt.step();
            epoch_loss += lv;
            ++n_batches;
        }
        hist.train_loss.push_back(epoch_loss / static_cast<double>(n_batches));

        // validation in eval mode
        const auto predicted = predict_labels(model, val_idx, cfg.batch);
        double vloss = 0.0;
        {
            FocalStats fstats;
            for (std::size_t b0 = 0; b0 < val_idx.size(); b0 += cfg.batch) {
                const std::size_t bn = std::min(cfg.batch, val_idx.size() - b0);
                const std::vector<std::size_t> chunk(
                    val_idx.begin() + static_cast<std::ptrdiff_t>(b0),
                    val_idx.begin() + static_cast<std::ptrdiff_t>(b0 + bn));
                const auto probs = model.forward(chunk, false, 0);
                vloss += focal_loss_graph(probs, detail::gather_targets(data, chunk), fc, &fstats)
                             .values()[0] *
                         static_cast<double>(bn);
            }
            vloss /= static_cast<double>(val_idx.size());
        }
        const double vacc = detail::pooled_balanced_accuracy(val_targets, predicted);
        hist.val_loss.push_back(vloss);
        hist.val_balanced_accuracy.push_back(vacc);
        hist.epochs_run = epoch + 1;

        if (vacc > best_acc) {
            best_acc = vacc;
            hist.best_epoch = epoch;
            best_ck = model.snapshot();
        }

        if (in_swa) {
            if (swa_sum.empty()) {
                swa_sum.resize(model.params.size());
                for (std::size_t j = 0; j < model.params.size(); ++j)
                    swa_sum[j].assign(model.params[j].numel(), 0.0);
            }
            for (std::size_t j = 0; j < model.params.size(); ++j) {
                const auto& v = model.params[j].values();
                for (std::size_t e = 0; e < v.size(); ++e) swa_sum[j][e] += v[e];
            }
            ++swa_count;
        } else if (cfg.patience > 0 && epoch - hist.best_epoch >= cfg.patience) {
            hist.early_stopped = true;
            break;
        }
    }

    if (swa_count > 0) {
        for (std::size_t j = 0; j < model.params.size(); ++j) {
            auto& v = model.params[j].values();
            for (std::size_t e = 0; e < v.size(); ++e)
                v[e] = swa_sum[j][e] / static_cast<double>(swa_count);
        }
        hist.swa_applied = true;
        if (model.bn_reset) {
            // averaged weights need fresh batch-norm statistics: reset and
            // replay the training batches without taking optimizer steps
            model.bn_reset();
            for (std::size_t b0 = 0; b0 < train_idx.size(); b0 += cfg.batch) {
                const std::size_t bn = std::min(cfg.batch, train_idx.size() - b0);
                const std::vector<std::size_t> chunk(
                    train_idx.begin() + static_cast<std::ptrdiff_t>(b0),
                    train_idx.begin() + static_cast<std::ptrdiff_t>(b0 + bn));
                model.forward(chunk, true, ++step_id);
            }
        }
    } else if (best_ck.size() > 0) {
        model.restore(best_ck);
    }

    TrainResult out;
    out.history = hist;
    out.checkpoint = model.snapshot();
    return out;
}

// ---------------------------------------------------------------------------
// Adapter factories binding the concrete models to the trainer.
// ---------------------------------------------------------------------------

namespace detail {

inline std::vector<Tensor> assemble_steps(const std::vector<std::vector<double>>& rows,
                                          std::size_t width,
                                          const std::vector<std::size_t>& idx) {
    std::vector<Tensor> steps;
    steps.reserve(kInputWeeks);
    for (std::size_t t = 0; t < kInputWeeks; ++t) {
        std::vector<double> block(idx.size() * width);
        for (std::size_t i = 0; i < idx.size(); ++i) {
            const auto& r = rows[idx[i]];
            std::copy(r.begin() + static_cast<std::ptrdiff_t>(t * width),
                      r.begin() + static_cast<std::ptrdiff_t>((t + 1) * width),
                      block.begin() + static_cast<std::ptrdiff_t>(i * width));
        }
        steps.push_back(Tensor::constant({idx.size(), width}, std::move(block)));
    }
    return steps;
}

}  // namespace detail

// rows: per-sample flattened 6 x input_dim features (see build_*_features)
inline TrainableModel make_lstm_adapter(SeqLstm& model,
                                        std::shared_ptr<std::vector<std::vector<double>>> rows) {
    TrainableModel t;
    t.params = model.params();
    const std::size_t width = model.config().input_dim;
    t.forward = [&model, rows, width](const std::vector<std::size_t>& idx, bool train,
                                      std::uint64_t step) {
        return model.forward_probs(detail::assemble_steps(*rows, width, idx), train, step);
    };
    t.snapshot = [&model]() { return model.to_checkpoint(); };
    t.restore = [&model](const Checkpoint& ck) { model.load(ck); };
    return t;
}

inline TrainableModel make_vit_adapter(VitLstm& model,
                                       std::shared_ptr<std::vector<std::vector<double>>> rows) {
    TrainableModel t;
    t.params = model.params();
    const std::size_t width = model.feature_width();
    t.forward = [&model, rows, width](const std::vector<std::size_t>& idx, bool train,
                                      std::uint64_t step) {
        return model.forward_probs(detail::assemble_steps(*rows, width, idx), train, step);
    };
    t.snapshot = [&model]() { return model.to_checkpoint(); };
    t.restore = [&model](const Checkpoint& ck) { model.load(ck); };
    t.bn_reset = [&model]() { model.reset_bn(); };
    return t;
}

// owning variants for ensembles: the forward closure co-owns the model, so it
// stays alive as long as the adapter does
inline TrainableModel make_lstm_adapter(std::shared_ptr<SeqLstm> model,
                                        std::shared_ptr<std::vector<std::vector<double>>> rows) {
    TrainableModel t = make_lstm_adapter(*model, std::move(rows));
    t.forward = [inner = t.forward, model](const std::vector<std::size_t>& idx, bool train,
                                           std::uint64_t step) { return inner(idx, train, step); };
    return t;
}

inline TrainableModel make_vit_adapter(std::shared_ptr<VitLstm> model,
                                       std::shared_ptr<std::vector<std::vector<double>>> rows) {
    TrainableModel t = make_vit_adapter(*model, std::move(rows));
    t.forward = [inner = t.forward, model](const std::vector<std::size_t>& idx, bool train,
                                           std::uint64_t step) { return inner(idx, train, step); };
    return t;
}

// ---------------------------------------------------------------------------
// Deep ensembles: retrain the same architecture under different seeds.
// ---------------------------------------------------------------------------

struct EnsembleMember {
    std::uint64_t seed = 0;
    bool ok = false;
    std::string error;
    Checkpoint checkpoint;
    TrainHistory history;
};

struct EnsembleResult {
    std::vector<EnsembleMember> members;
    std::size_t n_failed = 0;
    double mean_val_accuracy = 0.0;
    double std_val_accuracy = 0.0;
};

// the factory builds a fresh model (and its adapter) for a member seed; the
// dataset is shared read-only, so members are independent
using MemberFactory = std::function<TrainableModel(std::uint64_t seed)>;

inline EnsembleResult train_ensemble(const MemberFactory& factory, const WindowDataset& data,
                                     const TrainConfig& base_cfg,
                                     const std::vector<std::uint64_t>& seeds,
                                     std::size_t max_parallel = 0) {
    if (seeds.empty()) throw ArgumentError("ensemble: need at least one member seed");
    if (max_parallel == 0) {
        const unsigned hc = std::thread::hardware_concurrency();
        max_parallel = hc == 0 ? 1 : hc;
    }

    EnsembleResult out;
    out.members.resize(seeds.size());

    const auto run_member = [&](std::size_t m) {
        EnsembleMember member;
        member.seed = seeds[m];
        try {
            TrainableModel model = factory(seeds[m]);
            TrainConfig cfg = base_cfg;
            cfg.seed = seeds[m];
            TrainResult r = train(model, data, cfg);
            member.ok = true;
            member.checkpoint = std::move(r.checkpoint);
            member.history = std::move(r.history);
        } catch (const std::exception& e) {
            member.ok = false;
            member.error = e.what();
        }
        return member;
    };

    for (std::size_t base = 0; base < seeds.size(); base += max_parallel) {
        const std::size_t n = std::min(max_parallel, seeds.size() - base);
        std::vector<std::future<EnsembleMember>> futs;
        futs.reserve(n);
        for (std::size_t k = 0; k < n; ++k)
            futs.push_back(std::async(std::launch::async, run_member, base + k));
        for (std::size_t k = 0; k < n; ++k) out.members[base + k] = futs[k].get();
    }

    double sum = 0.0, sum2 = 0.0;
    std::size_t n_ok = 0;
    for (const auto& m : out.members) {
        if (!m.ok) {
            ++out.n_failed;
            continue;
        }
        const double a = m.history.val_balanced_accuracy.empty()
                             ? 0.0
                             : m.history.val_balanced_accuracy[static_cast<std::size_t>(
                                   std::max(0, m.history.best_epoch))];
        sum += a;
        sum2 += a * a;
        ++n_ok;
    }
    if (n_ok > 0) {
        out.mean_val_accuracy = sum / static_cast<double>(n_ok);
        const double var = sum2 / static_cast<double>(n_ok) -
                           out.mean_val_accuracy * out.mean_val_accuracy;
        out.std_val_accuracy = std::sqrt(std::max(0.0, var));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Gaussian-process Bayesian optimization (maximization).
// ---------------------------------------------------------------------------

inline double normal_pdf(double z) {
    return std::exp(-0.5 * z * z) / std::sqrt(2.0 * 3.14159265358979323846);
}

inline double normal_cdf(double z) { return 0.5 * std::erfc(-z / std::sqrt(2.0)); }

// expected improvement of a Gaussian posterior over the incumbent best
inline double expected_improvement(double mu, double sigma, double best) {
    if (sigma < 1e-12) return std::max(0.0, mu - best) > 0.0 ? mu - best : 0.0;
    const double z = (mu - best) / sigma;
    return sigma * (z * normal_cdf(z) + normal_pdf(z));
}

// noise-free GP with an isotropic squared-exponential kernel; targets are
// standardized internally and the lengthscale picked from a small grid by
// marginal likelihood
class GpModel {
  public:
    GpModel(std::vector<std::vector<double>> x, const std::vector<double>& y,
            double jitter = 1e-8)
        : x_(std::move(x)), jitter_(jitter) {
        if (x_.empty() || x_.size() != y.size())
            throw ArgumentError("gp: need matching, non-empty inputs and targets");
        dim_ = x_[0].size();
        for (const auto& p : x_)
            if (p.size() != dim_) throw ShapeError("gp: inconsistent input dimensions");
        const std::size_t n = x_.size();

        y_mean_ = 0.0;
        for (double v : y) {
            if (!std::isfinite(v)) throw NumericError("gp: non-finite objective value");
            y_mean_ += v;
        }
        y_mean_ /= static_cast<double>(n);
        double var = 0.0;
        for (double v : y) var += (v - y_mean_) * (v - y_mean_);
        y_sd_ = std::sqrt(var / static_cast<double>(n));
        if (y_sd_ < 1e-12) throw DomainError("gp: all objective values equal");
        ys_.resize(n);
        for (std::size_t i = 0; i < n; ++i) ys_[i] = (y[i] - y_mean_) / y_sd_;

        double best_ll = -std::numeric_limits<double>::infinity();
        for (double ell : {0.1, 0.2, 0.5, 1.0, 2.0}) {
            const double ll = marginal_log_likelihood(ell);
            if (ll > best_ll) {
                best_ll = ll;
                lengthscale_ = ell;
            }
        }
        factorize(lengthscale_);
    }

    double lengthscale() const { return lengthscale_; }

    struct Posterior {
        double mean;
        double sd;
    };

    // posterior in the original objective units
    Posterior predict(const std::vector<double>& p) const {
        if (p.size() != dim_) throw ShapeError("gp: query dimension mismatch");
        const std::size_t n = x_.size();
        std::vector<double> k(n);
        for (std::size_t i = 0; i < n; ++i) k[i] = kernel(x_[i], p, lengthscale_);
        const std::vector<double> kinv_k = chol_.solve(k);
        double mean = 0.0;
        for (std::size_t i = 0; i < n; ++i) mean += k[i] * alpha_[i];
        double var = 1.0 + jitter_;
        for (std::size_t i = 0; i < n; ++i) var -= k[i] * kinv_k[i];
        var = std::max(var, 0.0);
        return Posterior{y_mean_ + y_sd_ * mean, y_sd_ * std::sqrt(var)};
    }

  private:
    static double kernel(const std::vector<double>& a, const std::vector<double>& b, double ell) {
        double d2 = 0.0;
        for (std::size_t i = 0; i < a.size(); ++i) d2 += (a[i] - b[i]) * (a[i] - b[i]);
        return std::exp(-0.5 * d2 / (ell * ell));
    }

    std::vector<double> gram(double ell) const {
        const std::size_t n = x_.size();
        std::vector<double> K(n * n);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j <= i; ++j) {
                const double v = kernel(x_[i], x_[j], ell) + (i == j ? jitter_ : 0.0);
                K[i * n + j] = v;
                K[j * n + i] = v;
            }
        return K;
    }

    double marginal_log_likelihood(double ell) const {
        const std::size_t n = x_.size();
        const CholeskyFactor ch = cholesky(gram(ell), n);
        const std::vector<double> a = ch.solve(ys_);
        double fit = 0.0;
        for (std::size_t i = 0; i < n; ++i) fit += ys_[i] * a[i];
        return -0.5 * fit - 0.5 * ch.log_det() -
               0.5 * static_cast<double>(n) * std::log(2.0 * 3.14159265358979323846);
    }

    void factorize(double ell) {
        chol_ = cholesky(gram(ell), x_.size());
        alpha_ = chol_.solve(ys_);
    }

    std::vector<std::vector<double>> x_;
    std::vector<double> ys_, alpha_;
    CholeskyFactor chol_;
    std::size_t dim_ = 0;
    double jitter_, y_mean_ = 0.0, y_sd_ = 1.0, lengthscale_ = 1.0;
};

struct BoConfig {
    int n_steps = 100;  // total objective evaluations, including the initial design
    int n_init = 8;
    int ei_candidates = 256;
    double jitter = 1e-8;
    std::uint64_t seed = 0;
};

struct BoResult {
    std::vector<std::vector<double>> points;  // in original bound units
    std::vector<double> values;
    std::vector<double> incumbent;  // running best value
    std::vector<double> best_point;
    double best_value = -std::numeric_limits<double>::infinity();
    bool random_fallback = false;
    std::vector<std::string> warnings;
};

inline BoResult bayes_opt(const std::function<double(const std::vector<double>&)>& objective,
                          const std::vector<std::pair<double, double>>& bounds,
                          const BoConfig& cfg = {}) {
    if (bounds.empty()) throw ArgumentError("bayes_opt: need at least one dimension");
    for (const auto& [lo, hi] : bounds)
        if (!(lo < hi)) throw ArgumentError("bayes_opt: bounds must satisfy lo < hi");
    if (cfg.n_steps < 1) throw ArgumentError("bayes_opt: step budget must be >= 1");
    const std::size_t dim = bounds.size();
    const int n_init = std::min(cfg.n_steps, std::max(1, cfg.n_init));

    BoResult out;
    std::vector<std::vector<double>> unit_points;  // evaluated, in the unit cube

    const auto to_real = [&](const std::vector<double>& u) {
        std::vector<double> p(dim);
        for (std::size_t d = 0; d < dim; ++d)
            p[d] = bounds[d].first + u[d] * (bounds[d].second - bounds[d].first);
        return p;
    };

    const auto is_duplicate = [&](const std::vector<double>& u) {
        for (const auto& q : unit_points) {
            double dist = 0.0;
            for (std::size_t d = 0; d < dim; ++d) dist = std::max(dist, std::fabs(u[d] - q[d]));
            if (dist < 1e-9) return true;
        }
        return false;
    };

    const auto evaluate = [&](const std::vector<double>& u) {
        const auto p = to_real(u);
        const double v = objective(p);
        if (!std::isfinite(v)) throw NumericError("bayes_opt: objective returned a non-finite value");
        unit_points.push_back(u);
        out.points.push_back(p);
        out.values.push_back(v);
        if (v > out.best_value) {
            out.best_value = v;
            out.best_point = p;
        }
        out.incumbent.push_back(out.best_value);
    };

    const auto random_unit = [&](Rng& rng) {
        std::vector<double> u(dim);
        for (auto& v : u) v = rng.uniform();
        return u;
    };

    // initial space-filling design
    for (int i = 0; i < n_init; ++i) {
        Rng rng(counter_hash(cfg.seed, 31, static_cast<std::uint64_t>(i), 0));
        auto u = random_unit(rng);
        while (is_duplicate(u)) u = random_unit(rng);
        evaluate(u);
    }

    for (int it = n_init; it < cfg.n_steps; ++it) {
        Rng rng(counter_hash(cfg.seed, 32, static_cast<std::uint64_t>(it), 0));

        double spread = 0.0;
        for (double v : out.values) spread = std::max(spread, std::fabs(v - out.values[0]));
        if (spread < 1e-12) {
            if (!out.random_fallback) {
                out.random_fallback = true;
                out.warnings.push_back(
                    "objective values are all equal; falling back to random search");
            }
            auto u = random_unit(rng);
            while (is_duplicate(u)) u = random_unit(rng);
            evaluate(u);
            continue;
        }

        GpModel gp(unit_points, out.values, cfg.jitter);
        const double best = out.best_value;
        double best_ei = -1.0;
        std::vector<double> best_u;
        for (int c = 0; c < cfg.ei_candidates; ++c) {
            auto u = random_unit(rng);
            if (is_duplicate(u)) continue;
            const auto post = gp.predict(u);
            const double ei = expected_improvement(post.mean, post.sd, best);
            if (ei > best_ei) {
                best_ei = ei;
                best_u = u;
            }
        }
        if (best_u.empty()) {
            auto u = random_unit(rng);
            while (is_duplicate(u)) u = random_unit(rng);
            best_u = u;
        }
        evaluate(best_u);
    }
    return out;
}

}  // namespace s2scast
