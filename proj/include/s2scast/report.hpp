#pragma once

// Artifact plumbing: a binary format for standalone EOF bases, CSV
// round-trips for forecast records and composite tables, JSON reports and
// run manifests. Every writer here is byte-deterministic given equal inputs;
// wall-clock timestamps live only in the manifest's timestamp block, which is
// excluded from its content digest.

#include <array>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <ctime>
#include <fstream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "s2scast/common.hpp"
#include "s2scast/eval.hpp"
#include "s2scast/gridstore.hpp"
#include "s2scast/regimes.hpp"
#include "s2scast/synth.hpp"
#include "s2scast/tensorgrad.hpp"
#include "s2scast/training.hpp"

namespace s2scast {

inline constexpr const char* kToolVersion = "0.1.0";

// nlohmann's default map keeps keys sorted, which is what makes the JSON
// artifacts reproducible byte for byte
using Json = nlohmann::json;

// ---------------------------------------------------------------------------
// Digests.
// ---------------------------------------------------------------------------

inline std::string file_digest(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open for digest: " + path);
    std::uint64_t h = kFnvOffset;
    char buf[1 << 16];
    while (is) {
        is.read(buf, sizeof(buf));
        h = fnv1a64(buf, static_cast<std::size_t>(is.gcount()), h);
    }
    return hex_digest(h);
}

// ---------------------------------------------------------------------------
// JSON file round trip.
// ---------------------------------------------------------------------------

inline void write_json(const Json& j, const std::string& path) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw IoError("cannot open for writing: " + path);
    os << j.dump(2) << '\n';
    os.flush();
    if (!os) throw IoError("write failed: " + path);
}

inline Json read_json(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open: " + path);
    Json j;
    try {
        is >> j;
    } catch (const Json::parse_error& e) {
        throw ParseError(path + ": " + e.what());
    }
    return j;
}

// ---------------------------------------------------------------------------
// Standalone EOF basis files (the regime model format embeds its own copy).
//   magic "EOF1" | n_eof u64 | lats | lons | components | ratios | weights
// ---------------------------------------------------------------------------

inline void write_eof_basis(const EofBasis& basis, const std::string& path) {
    basis.validate();
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot open for writing: " + path);
    os.write("EOF1", 4);
    detail::write_pod<std::uint64_t>(os, basis.n_eof);
    detail::write_f64_array(os, basis.lats);
    detail::write_f64_array(os, basis.lons);
    detail::write_f64_array(os, basis.components);
    detail::write_f64_array(os, basis.explained_variance_ratio);
    detail::write_f64_array(os, basis.weights);
    os.flush();
    if (!os) throw IoError("write failed: " + path);
}

inline EofBasis read_eof_basis(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open: " + path);
    char magic[4] = {};
    is.read(magic, 4);
    if (!is || std::memcmp(magic, "EOF1", 4) != 0)
        throw FormatError("not an EOF basis file: " + path);
    EofBasis b;
    b.n_eof = detail::read_pod<std::uint64_t>(is, "n_eof");
    b.lats = detail::read_f64_array(is, "lats");
    b.lons = detail::read_f64_array(is, "lons");
    b.components = detail::read_f64_array(is, "components");
    b.explained_variance_ratio = detail::read_f64_array(is, "ratios");
    b.weights = detail::read_f64_array(is, "weights");
    b.validate();
    return b;
}

// ---------------------------------------------------------------------------
// Forecast record CSV. One row per (record), columns: window id, member
// seed, six targets, then the 24 probabilities week-major.
// ---------------------------------------------------------------------------

inline void write_forecast_records(const std::vector<ForecastRecord>& records,
                                   const std::string& path) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw IoError("cannot open for writing: " + path);
    os << "window_id,member_seed";
    for (std::size_t w = 1; w <= kLeadWeeks; ++w) os << ",target_w" << w;
    for (std::size_t w = 1; w <= kLeadWeeks; ++w)
        for (int c = 0; c < kNumRegimes; ++c) os << ",p_w" << w << "_c" << c;
    os << '\n';
    char buf[32];
    for (const auto& rec : records) {
        rec.validate();
        os << rec.window_id << ',' << rec.member_seed;
        for (std::size_t w = 0; w < kLeadWeeks; ++w) os << ',' << rec.targets[w];
        for (std::size_t w = 0; w < kLeadWeeks; ++w)
            for (std::size_t c = 0; c < kNumRegimes; ++c) {
                std::snprintf(buf, sizeof(buf), "%.17g", rec.probs[w][c]);
                os << ',' << buf;
            }
        os << '\n';
    }
    os.flush();
    if (!os) throw IoError("write failed: " + path);
}

inline std::vector<ForecastRecord> read_forecast_records(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open: " + path);
    std::string line;
    if (!std::getline(is, line)) throw FormatError("empty forecast record file: " + path);
    std::vector<ForecastRecord> out;
    std::size_t line_no = 1;
    while (std::getline(is, line)) {
        ++line_no;
        if (line.size() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        std::vector<std::string> cells;
        std::size_t start = 0;
        while (true) {
            const auto comma = line.find(',', start);
            cells.push_back(line.substr(start, comma - start));
            if (comma == std::string::npos) break;
            start = comma + 1;
        }
        const std::size_t want = 2 + kLeadWeeks + kLeadWeeks * kNumRegimes;
        if (cells.size() != want)
            throw ParseError(path + ":" + std::to_string(line_no) + ": expected " +
                             std::to_string(want) + " columns, got " +
                             std::to_string(cells.size()));
        ForecastRecord rec;
        try {
            rec.window_id = std::stoll(cells[0]);
            rec.member_seed = std::stoull(cells[1]);
            for (std::size_t w = 0; w < kLeadWeeks; ++w) rec.targets[w] = std::stoi(cells[2 + w]);
            for (std::size_t w = 0; w < kLeadWeeks; ++w)
                for (std::size_t c = 0; c < kNumRegimes; ++c)
                    rec.probs[w][c] = std::stod(cells[2 + kLeadWeeks + w * kNumRegimes + c]);
        } catch (const std::exception&) {
            throw ParseError(path + ":" + std::to_string(line_no) + ": malformed number");
        }
        rec.validate();
        out.push_back(rec);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Window datasets as JSON, so the windowing step and the training steps can
// run as separate processes.
// ---------------------------------------------------------------------------

inline Json split_spec_json(const SplitSpec& spec) {
    return Json{{"mode", spec.mode == SplitMode::chronological ? "chronological"
                                                               : "random_winters"},
                {"train_last_start_year", spec.train_last_start_year},
                {"val_last_start_year", spec.val_last_start_year},
                {"test_last_start_year", spec.test_last_start_year},
                {"random_val_fraction", spec.random_val_fraction},
                {"split_seed", spec.split_seed}};
}

inline SplitSpec split_spec_from_json(const Json& j) {
    SplitSpec spec;
    try {
        const std::string mode = j.value("mode", "chronological");
        if (mode == "chronological")
            spec.mode = SplitMode::chronological;
        else if (mode == "random_winters")
            spec.mode = SplitMode::random_winters;
        else
            throw ConfigError("split spec: unknown mode '" + mode + "'");
        spec.train_last_start_year = j.value("train_last_start_year", spec.train_last_start_year);
        spec.val_last_start_year = j.value("val_last_start_year", spec.val_last_start_year);
        spec.test_last_start_year = j.value("test_last_start_year", spec.test_last_start_year);
        spec.random_val_fraction = j.value("random_val_fraction", spec.random_val_fraction);
        spec.split_seed = j.value("split_seed", spec.split_seed);
    } catch (const Json::exception& e) {
        throw ConfigError(std::string("split spec: ") + e.what());
    }
    return spec;
}

inline Json windows_json(const WindowDataset& data, const SplitSpec& spec, int stride_days) {
    Json samples = Json::array();
    for (const auto& s : data.samples) {
        samples.push_back(Json{{"id", s.window_id},
                               {"winter", s.winter_id},
                               {"split", split_name(s.split)},
                               {"times", s.times},
                               {"inputs", s.inputs},
                               {"targets", s.targets}});
    }
    return Json{{"split_spec", split_spec_json(spec)},
                {"stride_days", stride_days},
                {"warnings", data.warnings},
                {"windows", samples}};
}

inline WindowDataset windows_from_json(const Json& j) {
    WindowDataset out;
    try {
        for (const auto& s : j.at("windows")) {
            WindowSample w;
            w.window_id = s.at("id").get<std::int64_t>();
            w.winter_id = s.at("winter").get<int>();
            const std::string split = s.at("split").get<std::string>();
            if (split == "train")
                w.split = Split::train;
            else if (split == "val")
                w.split = Split::val;
            else if (split == "test")
                w.split = Split::test;
            else
                throw ValidationError("window dataset: unknown split '" + split + "'");
            const auto& times = s.at("times");
            const auto& inputs = s.at("inputs");
            const auto& targets = s.at("targets");
            if (times.size() != kInputWeeks + kLeadWeeks || inputs.size() != kInputWeeks ||
                targets.size() != kLeadWeeks)
                throw ValidationError("window dataset: sample arity mismatch");
            for (std::size_t k = 0; k < kInputWeeks + kLeadWeeks; ++k)
                w.times[k] = times[k].get<std::int64_t>();
            for (std::size_t k = 0; k < kInputWeeks; ++k) {
                w.inputs[k] = inputs[k].get<int>();
                if (w.inputs[k] < 0 || w.inputs[k] >= kNumRegimes)
                    throw ValidationError("window dataset: input label out of range");
            }
            for (std::size_t k = 0; k < kLeadWeeks; ++k) {
                w.targets[k] = targets[k].get<int>();
                if (w.targets[k] < 0 || w.targets[k] >= kNumRegimes)
                    throw ValidationError("window dataset: target label out of range");
            }
            out.samples.push_back(w);
        }
        if (j.contains("warnings"))
            out.warnings = j.at("warnings").get<std::vector<std::string>>();
    } catch (const Json::exception& e) {
        throw ValidationError(std::string("window dataset: ") + e.what());
    }
    return out;
}

// ---------------------------------------------------------------------------
// Metric and history reports.
// ---------------------------------------------------------------------------

// per-week skill metrics plus pooled calibration for one model's record set
inline Json metrics_report(const std::vector<ForecastRecord>& records,
                           const std::string& model_name) {
    if (records.empty()) throw EvaluationError("metrics report needs forecast records");
    const auto conf = confusion_from_records(records);
    Json weeks = Json::array();
    for (std::size_t w = 0; w < kLeadWeeks; ++w) {
        std::array<bool, kNumRegimes> excluded{};
        const double bacc = balanced_accuracy(conf, w, &excluded);
        const auto c = csi(conf, w);
        Json per_class = Json::array();
        Json class_acc = Json::array();
        Json support = Json::array();
        Json counts = Json::array();
        for (std::size_t k = 0; k < kNumRegimes; ++k) {
            per_class.push_back(c.defined[k] ? Json(c.per_class[k]) : Json(nullptr));
            class_acc.push_back(classwise_accuracy(conf, w, k));
            std::size_t sup = 0;
            Json row = Json::array();
            for (std::size_t p = 0; p < kNumRegimes; ++p) {
                sup += conf.counts[w][k][p];
                row.push_back(conf.counts[w][k][p]);
            }
            support.push_back(sup);
            counts.push_back(row);
        }
        Json excluded_json = Json::array();
        for (bool e : excluded) excluded_json.push_back(e);
        weeks.push_back(Json{{"lead_week", w + 1},
                             {"balanced_accuracy", bacc},
                             {"zero_support_classes", excluded_json},
                             {"csi_weighted", c.weighted},
                             {"csi_per_class", per_class},
                             {"classwise_accuracy", class_acc},
                             {"support", support},
                             {"confusion", counts}});
    }
    return Json{{"model", model_name},
                {"n_records", records.size()},
                {"ece_10bin", expected_calibration_error(records)},
                {"weeks", weeks}};
}

inline Json opportunities_json(const OpportunitySet& set) {
    Json counts = Json::array();
    for (std::size_t c = 0; c < kNumRegimes; ++c) {
        Json row = Json::array();
        for (std::size_t w = 0; w < kLeadWeeks; ++w) row.push_back(set.counts[c][w]);
        counts.push_back(row);
    }
    return Json{{"percentile", set.percentile},
                {"threshold", set.threshold},
                {"n_picks", set.picks.size()},
                {"counts_by_regime_week", counts}};
}

inline Json history_json(const TrainHistory& h) {
    return Json{{"train_loss", h.train_loss},
                {"val_loss", h.val_loss},
                {"val_balanced_accuracy", h.val_balanced_accuracy},
                {"best_epoch", h.best_epoch},
                {"epochs_run", h.epochs_run},
                {"early_stopped", h.early_stopped},
                {"swa_applied", h.swa_applied},
                {"clamp_warnings", h.clamp_warnings}};
}

// ---------------------------------------------------------------------------
// Composite CSVs for plots.
// ---------------------------------------------------------------------------

namespace detail {

inline void append_num(std::ostream& os, double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    os << buf;
}

}  // namespace detail

inline void write_spv_composite_csv(const SpvComposite& comp, const std::string& path) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw IoError("cannot open for writing: " + path);
    os << "regime,week,lag,mean,std,n\n";
    for (std::size_t c = 0; c < kNumRegimes; ++c)
        for (std::size_t w = 0; w < kLeadWeeks; ++w)
            for (std::size_t dt = 1; dt <= kMaxLagWeeks; ++dt) {
                const auto& cell = comp.cells[c][w][dt - 1];
                os << c << ',' << w + 1 << ',' << dt << ',';
                if (cell.valid) {
                    detail::append_num(os, cell.mean);
                    os << ',';
                    detail::append_num(os, cell.sd);
                } else {
                    os << ',';
                }
                os << ',' << cell.n << '\n';
            }
    os.flush();
    if (!os) throw IoError("write failed: " + path);
}

inline void write_mjo_composite_csv(const MjoComposite& comp, const std::string& path) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw IoError("cannot open for writing: " + path);
    os << "regime,week,lag,rmm1,rmm2,n\n";
    for (std::size_t c = 0; c < kNumRegimes; ++c)
        for (std::size_t w = 0; w < kLeadWeeks; ++w)
            for (std::size_t j = 0; j < kInputWeeks; ++j) {
                const auto& cell = comp.cells[c][w][j];
                os << c << ',' << w + 1 << ',' << w + 1 + j << ',';
                if (cell.valid) {
                    detail::append_num(os, cell.rmm1);
                    os << ',';
                    detail::append_num(os, cell.rmm2);
                } else {
                    os << ',';
                }
                os << ',' << cell.n << '\n';
            }
    os.flush();
    if (!os) throw IoError("write failed: " + path);
}

inline void write_precursor_csv(const PrecursorTable& table, const std::string& path) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw IoError("cannot open for writing: " + path);
    os << "precursor_regime,week,lag,target_regime,conditional,anomaly,support\n";
    for (std::size_t c = 0; c < kNumRegimes; ++c)
        for (std::size_t w = 0; w < kLeadWeeks; ++w)
            for (std::size_t dt = 1; dt <= kMaxLagWeeks; ++dt) {
                const auto& g = table.groups[c][w][dt - 1];
                for (std::size_t k = 0; k < kNumRegimes; ++k) {
                    os << c << ',' << w + 1 << ',' << dt << ',' << k << ',';
                    if (g.valid) {
                        detail::append_num(os, g.conditional[k]);
                        os << ',';
                        detail::append_num(os, g.conditional[k] - table.target_rate[w][k]);
                    } else {
                        os << ',';
                    }
                    os << ',' << g.support << '\n';
                }
            }
    os.flush();
    if (!os) throw IoError("write failed: " + path);
}

// ---------------------------------------------------------------------------
// Run manifests. The content digest covers everything except the timestamp
// block, so reruns with equal configs and inputs agree on it.
// ---------------------------------------------------------------------------

struct RunManifest {
    std::string command;
    Json config;  // resolved configuration as executed
    std::uint64_t seed = 0;
    std::vector<std::pair<std::string, std::string>> inputs;   // path, digest
    std::vector<std::pair<std::string, std::string>> outputs;  // path, digest
    std::string started_at, finished_at;

    void add_input(const std::string& path) { inputs.emplace_back(path, file_digest(path)); }
    void add_output(const std::string& path) { outputs.emplace_back(path, file_digest(path)); }
};

inline std::string iso_timestamp_now() {
    const auto now = std::chrono::system_clock::now();
    const std::time_t t = std::chrono::system_clock::to_time_t(now);
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

inline Json run_manifest_json(const RunManifest& m) {
    auto files = [](const std::vector<std::pair<std::string, std::string>>& v) {
        Json arr = Json::array();
        for (const auto& [path, digest] : v)
            arr.push_back(Json{{"path", path}, {"digest", digest}});
        return arr;
    };
    Json body{{"command", m.command},
              {"config", m.config},
              {"config_digest", hex_digest(fnv1a64(m.config.dump()))},
              {"seed", m.seed},
              {"tool_version", kToolVersion},
              {"inputs", files(m.inputs)},
              {"outputs", files(m.outputs)}};
    body["content_digest"] = hex_digest(fnv1a64(body.dump()));
    body["timestamps"] = Json{{"started", m.started_at}, {"finished", m.finished_at}};
    return body;
}

// ---------------------------------------------------------------------------
// WorldConfig as JSON.
// ---------------------------------------------------------------------------

inline Json world_config_json(const WorldConfig& cfg) {
    Json transitions = Json::array();
    for (const auto& row : cfg.transitions) {
        Json r = Json::array();
        for (double v : row) r.push_back(v);
        transitions.push_back(r);
    }
    Json boost_phases = Json::array();
    for (bool b : cfg.mjo_boost_phases) boost_phases.push_back(b);
    Json j{{"transitions", transitions},
           {"spv_ar_coeff", cfg.spv_ar_coeff},
           {"spv_noise_sigma", cfg.spv_noise_sigma},
           {"spv_weak_threshold", cfg.spv_weak_threshold},
           {"spv_link",
            Json{{"strength", cfg.spv_link.strength},
                 {"lag_weeks", cfg.spv_link.lag_weeks},
                 {"boost_regime", cfg.spv_link.boost_regime}}},
           {"mjo_angular_velocity", cfg.mjo_angular_velocity},
           {"mjo_amp_mean", cfg.mjo_amp_mean},
           {"mjo_amp_ar_coeff", cfg.mjo_amp_ar_coeff},
           {"mjo_amp_noise_sigma", cfg.mjo_amp_noise_sigma},
           {"mjo_boost_phases", boost_phases},
           {"mjo_link",
            Json{{"strength", cfg.mjo_link.strength},
                 {"lag_weeks", cfg.mjo_link.lag_weeks},
                 {"boost_regime", cfg.mjo_link.boost_regime}}},
           {"n_lat", cfg.n_lat},
           {"n_lon", cfg.n_lon},
           {"pattern_scale", cfg.pattern_scale},
           {"field_noise_sigma", cfg.field_noise_sigma},
           {"first_winter_year", cfg.first_winter_year},
           {"seed", cfg.seed}};
    if (!cfg.patterns.empty()) j["patterns"] = cfg.patterns;
    return j;
}

inline WorldConfig world_config_from_json(const Json& j) {
    WorldConfig cfg;
    try {
        if (j.contains("transitions")) {
            const auto& t = j.at("transitions");
            if (!t.is_array() || t.size() != kNumRegimes)
                throw ConfigError("world config: transitions must be a 4x4 matrix");
            for (std::size_t i = 0; i < kNumRegimes; ++i) {
                if (!t[i].is_array() || t[i].size() != kNumRegimes)
                    throw ConfigError("world config: transitions must be a 4x4 matrix");
                for (std::size_t k = 0; k < kNumRegimes; ++k)
                    cfg.transitions[i][k] = t[i][k].get<double>();
            }
        }
        auto link = [&](const char* key, DriverLink& out) {
            if (!j.contains(key)) return;
            const auto& l = j.at(key);
            out.strength = l.value("strength", out.strength);
            out.lag_weeks = l.value("lag_weeks", out.lag_weeks);
            out.boost_regime = l.value("boost_regime", out.boost_regime);
        };
        cfg.spv_ar_coeff = j.value("spv_ar_coeff", cfg.spv_ar_coeff);
        cfg.spv_noise_sigma = j.value("spv_noise_sigma", cfg.spv_noise_sigma);
        cfg.spv_weak_threshold = j.value("spv_weak_threshold", cfg.spv_weak_threshold);
        link("spv_link", cfg.spv_link);
        cfg.mjo_angular_velocity = j.value("mjo_angular_velocity", cfg.mjo_angular_velocity);
        cfg.mjo_amp_mean = j.value("mjo_amp_mean", cfg.mjo_amp_mean);
        cfg.mjo_amp_ar_coeff = j.value("mjo_amp_ar_coeff", cfg.mjo_amp_ar_coeff);
        cfg.mjo_amp_noise_sigma = j.value("mjo_amp_noise_sigma", cfg.mjo_amp_noise_sigma);
        if (j.contains("mjo_boost_phases")) {
            const auto& p = j.at("mjo_boost_phases");
            if (!p.is_array() || p.size() != kNumMjoClasses)
                throw ConfigError("world config: mjo_boost_phases needs 9 flags");
            for (std::size_t i = 0; i < kNumMjoClasses; ++i)
                cfg.mjo_boost_phases[i] = p[i].get<bool>();
        }
        link("mjo_link", cfg.mjo_link);
        cfg.n_lat = j.value("n_lat", cfg.n_lat);
        cfg.n_lon = j.value("n_lon", cfg.n_lon);
        cfg.pattern_scale = j.value("pattern_scale", cfg.pattern_scale);
        cfg.field_noise_sigma = j.value("field_noise_sigma", cfg.field_noise_sigma);
        cfg.first_winter_year = j.value("first_winter_year", cfg.first_winter_year);
        cfg.seed = j.value("seed", cfg.seed);
        if (j.contains("patterns"))
            cfg.patterns = j.at("patterns").get<std::vector<std::vector<double>>>();
    } catch (const Json::exception& e) {
        throw ConfigError(std::string("world config: ") + e.what());
    }
    cfg.validate();
    return cfg;
}

}  // namespace s2scast
