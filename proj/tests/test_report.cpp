#include <catch2/catch_amalgamated.hpp>

#include <cstring>
#include <filesystem>
#include <fstream>

#include "s2scast/report.hpp"

using namespace s2scast;
namespace fs = std::filesystem;

namespace {

fs::path temp_path(const std::string& name) {
    const auto dir = fs::temp_directory_path() / "s2scast_report_tests";
    fs::create_directories(dir);
    return dir / name;
}

ForecastRecord random_record(Rng& rng, std::int64_t id) {
    ForecastRecord rec;
    rec.window_id = id;
    rec.member_seed = rng.next_u64();
    for (std::size_t w = 0; w < kLeadWeeks; ++w) {
        double sum = 0.0;
        for (std::size_t c = 0; c < kNumRegimes; ++c) {
            rec.probs[w][c] = 0.05 + rng.uniform();
            sum += rec.probs[w][c];
        }
        for (auto& p : rec.probs[w]) p /= sum;
        rec.targets[w] = static_cast<int>(rng.next_u64() % kNumRegimes);
    }
    return rec;
}

// a record that always nails its target with high confidence
ForecastRecord perfect_record(std::int64_t id, int label) {
    ForecastRecord rec;
    rec.window_id = id;
    for (std::size_t w = 0; w < kLeadWeeks; ++w) {
        for (auto& p : rec.probs[w]) p = 0.1 / 3.0;
        rec.probs[w][static_cast<std::size_t>(label)] = 0.9;
        rec.targets[w] = label;
    }
    return rec;
}

std::string slurp(const fs::path& path) {
    std::ifstream is(path, std::ios::binary);
    REQUIRE(is);
    std::ostringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

WorldConfig sample_world() {
    WorldConfig cfg;
    for (auto& row : cfg.transitions)
        for (auto& v : row) v = 0.25;
    cfg.transitions[0] = {0.55, 0.15, 0.15, 0.15};
    cfg.transitions[1] = {0.15, 0.55, 0.15, 0.15};
    cfg.transitions[2] = {0.15, 0.15, 0.55, 0.15};
    cfg.transitions[3] = {0.15, 0.15, 0.15, 0.55};
    cfg.spv_ar_coeff = 0.8;
    cfg.spv_link = {0.5, 3, 1};
    cfg.mjo_boost_phases[3] = true;
    cfg.mjo_link = {0.4, 2, 2};
    cfg.n_lat = 4;
    cfg.n_lon = 8;
    cfg.field_noise_sigma = 0.1;
    cfg.first_winter_year = 1991;
    cfg.seed = 42;
    return cfg;
}

}  // namespace

// ---------------------------------------------------------------------------
// Digests and JSON files.
// ---------------------------------------------------------------------------

TEST_CASE("file digest matches in-memory hash and rejects missing files") {
    const auto path = temp_path("digest.bin");
    const std::string payload = "regime forecasts\n";
    std::ofstream(path, std::ios::binary) << payload;
    CHECK(file_digest(path.string()) == hex_digest(fnv1a64(payload)));
    CHECK_THROWS_AS(file_digest(temp_path("no_such_file.bin").string()), IoError);
}

TEST_CASE("json files round trip and serialize deterministically") {
    Json j{{"beta", 2}, {"alpha", Json::array({1, 2, 3})}, {"nested", Json{{"x", 0.5}}}};
    const auto a = temp_path("a.json");
    const auto b = temp_path("b.json");
    write_json(j, a.string());
    write_json(j, b.string());
    CHECK(read_json(a.string()) == j);
    CHECK(slurp(a) == slurp(b));
    CHECK(slurp(a).back() == '\n');

    std::ofstream(temp_path("bad.json")) << "{not json";
    CHECK_THROWS_AS(read_json(temp_path("bad.json").string()), ParseError);
    CHECK_THROWS_AS(read_json(temp_path("absent.json").string()), IoError);
}

// ---------------------------------------------------------------------------
// EOF basis files.
// ---------------------------------------------------------------------------

TEST_CASE("eof basis files round trip bitwise") {
    GriddedField f;
    f.variable_name = "z500";
    f.units = "m";
    Rng rng(33);
    for (int t = 0; t < 40; ++t) f.times.push_back(t);
    for (int i = 0; i < 5; ++i) f.lats.push_back(70.0 - 5.0 * i);
    for (int j = 0; j < 9; ++j) f.lons.push_back(-80.0 + 10.0 * j);
    f.values.resize(40 * 45);
    for (auto& v : f.values) v = static_cast<float>(rng.gaussian());

    const auto basis = fit_eof(f, 4);
    const auto path = temp_path("basis.eof");
    write_eof_basis(basis, path.string());
    const auto back = read_eof_basis(path.string());
    CHECK(back.n_eof == basis.n_eof);
    CHECK(back.lats == basis.lats);
    CHECK(back.lons == basis.lons);
    CHECK(back.components == basis.components);
    CHECK(back.explained_variance_ratio == basis.explained_variance_ratio);
    CHECK(back.weights == basis.weights);

    std::ofstream(temp_path("junk.eof"), std::ios::binary) << "NOPE";
    CHECK_THROWS_AS(read_eof_basis(temp_path("junk.eof").string()), FormatError);

    // truncating the payload must be caught, not silently zero-filled
    const auto whole = slurp(path);
    std::ofstream(temp_path("cut.eof"), std::ios::binary)
        << whole.substr(0, whole.size() - 16);
    CHECK_THROWS_AS(read_eof_basis(temp_path("cut.eof").string()), CorruptionError);
}

// ---------------------------------------------------------------------------
// Forecast record CSV.
// ---------------------------------------------------------------------------

TEST_CASE("forecast record csv round trips exactly") {
    Rng rng(91);
    std::vector<ForecastRecord> records;
    for (int i = 0; i < 25; ++i) records.push_back(random_record(rng, 1000 + i));

    const auto path = temp_path("records.csv");
    write_forecast_records(records, path.string());
    const auto back = read_forecast_records(path.string());
    REQUIRE(back.size() == records.size());
    for (std::size_t i = 0; i < records.size(); ++i) {
        CHECK(back[i].window_id == records[i].window_id);
        CHECK(back[i].member_seed == records[i].member_seed);
        CHECK(back[i].targets == records[i].targets);
        // %.17g preserves doubles exactly through the round trip
        for (std::size_t w = 0; w < kLeadWeeks; ++w)
            for (std::size_t c = 0; c < kNumRegimes; ++c)
                CHECK(back[i].probs[w][c] == records[i].probs[w][c]);
    }

    // two writes of the same records are byte-identical
    const auto again = temp_path("records2.csv");
    write_forecast_records(records, again.string());
    CHECK(slurp(path) == slurp(again));
}

TEST_CASE("forecast record csv rejects malformed rows") {
    const auto path = temp_path("bad_records.csv");
    std::ofstream(path) << "";
    CHECK_THROWS_AS(read_forecast_records(path.string()), FormatError);

    std::ofstream(path) << "header\n1,2,3\n";
    CHECK_THROWS_AS(read_forecast_records(path.string()), ParseError);

    // right column count but a non-numeric cell
    std::string row = "7,9";
    for (int i = 0; i < 6; ++i) row += ",0";
    row += ",oops";
    for (int i = 0; i < 23; ++i) row += ",0.25";
    std::ofstream(path) << "header\n" << row << "\n";
    CHECK_THROWS_AS(read_forecast_records(path.string()), ParseError);
}

// ---------------------------------------------------------------------------
// Metric reports.
// ---------------------------------------------------------------------------

TEST_CASE("metrics report scores a perfect forecaster at one") {
    std::vector<ForecastRecord> records;
    for (int i = 0; i < 12; ++i) records.push_back(perfect_record(i, i % 4));
    const auto report = metrics_report(records, "persistence");
    CHECK(report.at("model") == "persistence");
    CHECK(report.at("n_records") == 12);
    REQUIRE(report.at("weeks").size() == kLeadWeeks);
    for (const auto& week : report.at("weeks")) {
        CHECK(week.at("balanced_accuracy").get<double>() == 1.0);
        CHECK(week.at("csi_weighted").get<double>() == 1.0);
        for (const auto& acc : week.at("classwise_accuracy"))
            CHECK(acc.get<double>() == 1.0);
        // every record correct, 3 of 12 per class
        std::size_t diag = 0;
        for (std::size_t k = 0; k < kNumRegimes; ++k)
            diag += week.at("confusion")[k][k].get<std::size_t>();
        CHECK(diag == 12);
    }
    // every prediction confident at 0.9 and correct: |0.9 - 1.0| = 0.1
    CHECK(report.at("ece_10bin").get<double>() == Catch::Approx(0.1).margin(1e-12));
}

TEST_CASE("metrics report marks unpredicted classes rather than inventing skill") {
    std::vector<ForecastRecord> records;
    for (int i = 0; i < 10; ++i) records.push_back(perfect_record(i, 0));
    const auto report = metrics_report(records, "degenerate");
    const auto& week = report.at("weeks")[0];
    // only class 0 has support; the other three are flagged as excluded
    CHECK(week.at("zero_support_classes")[0] == false);
    for (int k = 1; k < 4; ++k) {
        CHECK(week.at("zero_support_classes")[k] == true);
        CHECK(week.at("support")[k] == 0);
        CHECK(week.at("csi_per_class")[k].is_null());
    }
    CHECK(week.at("balanced_accuracy").get<double>() == 1.0);
    CHECK_THROWS_AS(metrics_report({}, "empty"), EvaluationError);
}

TEST_CASE("history and opportunity json carry the training record") {
    TrainHistory h;
    h.train_loss = {1.0, 0.6};
    h.val_loss = {1.1, 0.8};
    h.val_balanced_accuracy = {0.4, 0.55};
    h.best_epoch = 1;
    h.epochs_run = 2;
    h.early_stopped = true;
    const auto hj = history_json(h);
    CHECK(hj.at("best_epoch") == 1);
    CHECK(hj.at("train_loss").size() == 2);
    CHECK(hj.at("early_stopped") == true);
    CHECK(hj.at("swa_applied") == false);

    Rng rng(5);
    std::vector<ForecastRecord> records;
    for (int i = 0; i < 40; ++i) records.push_back(random_record(rng, i));
    const auto set = select_opportunities(records, 90.0);
    const auto oj = opportunities_json(set);
    CHECK(oj.at("percentile") == 90.0);
    CHECK(oj.at("threshold").get<double>() == set.threshold);
    CHECK(oj.at("n_picks") == set.picks.size());
    std::size_t total = 0;
    for (const auto& row : oj.at("counts_by_regime_week"))
        for (const auto& v : row) total += v.get<std::size_t>();
    CHECK(total == set.picks.size());
}

// ---------------------------------------------------------------------------
// Composite CSVs.
// ---------------------------------------------------------------------------

TEST_CASE("composite csv writers emit one row per cell") {
    SpvComposite spv;
    spv.cells[1][2][3] = {-1.5, 0.25, 17, true};
    const auto spv_path = temp_path("spv.csv");
    write_spv_composite_csv(spv, spv_path.string());
    std::ifstream is(spv_path);
    std::string line;
    std::size_t rows = 0;
    std::string hit;
    while (std::getline(is, line)) {
        if (rows++ == 0) {
            CHECK(line == "regime,week,lag,mean,std,n");
            continue;
        }
        if (line.rfind("1,3,4,", 0) == 0) hit = line;
    }
    CHECK(rows == 1 + kNumRegimes * kLeadWeeks * kMaxLagWeeks);
    CHECK(hit == "1,3,4,-1.5,0.25,17");

    MjoComposite mjo;
    mjo.cells[0][0][0] = {0.5, -0.75, 9, true};
    const auto mjo_path = temp_path("mjo.csv");
    write_mjo_composite_csv(mjo, mjo_path.string());
    std::ifstream mis(mjo_path);
    rows = 0;
    hit.clear();
    while (std::getline(mis, line)) {
        if (rows++ == 0) continue;
        if (line.rfind("0,1,1,", 0) == 0) hit = line;
    }
    CHECK(rows == 1 + kNumRegimes * kLeadWeeks * kInputWeeks);
    CHECK(hit == "0,1,1,0.5,-0.75,9");

    PrecursorTable table;
    table.groups[2][0][0].conditional = {0.1, 0.2, 0.3, 0.4};
    table.groups[2][0][0].support = 10;
    table.groups[2][0][0].valid = true;
    table.target_rate[0] = {0.25, 0.25, 0.25, 0.25};
    const auto pre_path = temp_path("precursor.csv");
    write_precursor_csv(table, pre_path.string());
    std::ifstream pis(pre_path);
    rows = 0;
    hit.clear();
    while (std::getline(pis, line)) {
        if (rows++ == 0) {
            CHECK(line ==
                  "precursor_regime,week,lag,target_regime,conditional,anomaly,support");
            continue;
        }
        if (line.rfind("2,1,1,3,", 0) == 0) hit = line;
    }
    CHECK(rows == 1 + kNumRegimes * kLeadWeeks * kMaxLagWeeks * kNumRegimes);
    // conditional 0.4 against base rate 0.25, both at full double precision
    CHECK(hit == "2,1,1,3,0.40000000000000002,0.15000000000000002,10");

    // invalid cells leave the value columns empty but keep the row
    std::ifstream sis(spv_path);
    std::getline(sis, line);
    std::getline(sis, line);
    CHECK(line == "0,1,1,,,0");
}

// ---------------------------------------------------------------------------
// Window datasets.
// ---------------------------------------------------------------------------

TEST_CASE("window dataset json round trips through build_windows output") {
    // three synthetic winters of daily labels
    RegimeSeries series;
    Rng rng(17);
    for (int year : {1990, 1991, 1992}) {
        const std::int64_t start = to_epoch_days({year, 11, 16});
        const std::int64_t end = to_epoch_days({year + 1, 3, 31});
        for (std::int64_t d = start; d <= end; ++d) {
            series.times.push_back(d);
            series.labels.push_back(static_cast<int>(rng.next_u64() % 4));
        }
    }
    SplitSpec spec;
    spec.train_last_start_year = 1990;
    spec.val_last_start_year = 1991;
    spec.test_last_start_year = 1992;
    const auto data = build_windows(series, spec, 7);
    REQUIRE(!data.samples.empty());

    const auto j = windows_json(data, spec, 7);
    const auto back = windows_from_json(j);
    REQUIRE(back.samples.size() == data.samples.size());
    for (std::size_t i = 0; i < data.samples.size(); ++i) {
        CHECK(back.samples[i].window_id == data.samples[i].window_id);
        CHECK(back.samples[i].winter_id == data.samples[i].winter_id);
        CHECK(back.samples[i].split == data.samples[i].split);
        CHECK(back.samples[i].times == data.samples[i].times);
        CHECK(back.samples[i].inputs == data.samples[i].inputs);
        CHECK(back.samples[i].targets == data.samples[i].targets);
    }
    const auto spec_back = split_spec_from_json(j.at("split_spec"));
    CHECK(spec_back.mode == spec.mode);
    CHECK(spec_back.train_last_start_year == spec.train_last_start_year);
    CHECK(spec_back.val_last_start_year == spec.val_last_start_year);
    CHECK(spec_back.test_last_start_year == spec.test_last_start_year);

    // corrupted labels are rejected on the way back in
    Json bad = j;
    bad["windows"][0]["targets"][2] = 9;
    CHECK_THROWS_AS(windows_from_json(bad), ValidationError);
    CHECK_THROWS_AS(split_spec_from_json(Json{{"mode", "fancy"}}), ConfigError);
}

// ---------------------------------------------------------------------------
// Run manifests.
// ---------------------------------------------------------------------------

TEST_CASE("run manifest digest ignores timestamps but sees everything else") {
    const auto input = temp_path("manifest_input.bin");
    std::ofstream(input, std::ios::binary) << "input payload";

    RunManifest m;
    m.command = "cluster";
    m.config = Json{{"k", 4}, {"n_restarts", 20}};
    m.seed = 7;
    m.add_input(input.string());
    m.started_at = "2026-01-01T00:00:00Z";
    m.finished_at = "2026-01-01T00:00:05Z";

    RunManifest later = m;
    later.started_at = "2026-02-02T09:30:00Z";
    later.finished_at = "2026-02-02T09:30:04Z";

    const auto ja = run_manifest_json(m);
    const auto jb = run_manifest_json(later);
    CHECK(ja.at("content_digest") == jb.at("content_digest"));
    CHECK(ja.at("timestamps") != jb.at("timestamps"));
    CHECK(ja.at("tool_version") == kToolVersion);
    CHECK(ja.at("inputs")[0].at("digest") == file_digest(input.string()));

    RunManifest other = m;
    other.seed = 8;
    CHECK(run_manifest_json(other).at("content_digest") != ja.at("content_digest"));

    RunManifest reconfigured = m;
    reconfigured.config["k"] = 5;
    CHECK(run_manifest_json(reconfigured).at("content_digest") != ja.at("content_digest"));

    // timestamp helper emits parseable UTC instants
    const auto now = iso_timestamp_now();
    CHECK(now.size() == 20);
    CHECK(now.back() == 'Z');
    CHECK(now[4] == '-');
    CHECK(now[10] == 'T');
}

// ---------------------------------------------------------------------------
// World configs.
// ---------------------------------------------------------------------------

TEST_CASE("world config json round trips every field") {
    const auto cfg = sample_world();
    const auto j = world_config_json(cfg);
    const auto back = world_config_from_json(j);

    CHECK(back.transitions == cfg.transitions);
    CHECK(back.spv_ar_coeff == cfg.spv_ar_coeff);
    CHECK(back.spv_noise_sigma == cfg.spv_noise_sigma);
    CHECK(back.spv_weak_threshold == cfg.spv_weak_threshold);
    CHECK(back.spv_link.strength == cfg.spv_link.strength);
    CHECK(back.spv_link.lag_weeks == cfg.spv_link.lag_weeks);
    CHECK(back.spv_link.boost_regime == cfg.spv_link.boost_regime);
    CHECK(back.mjo_angular_velocity == cfg.mjo_angular_velocity);
    CHECK(back.mjo_amp_mean == cfg.mjo_amp_mean);
    CHECK(back.mjo_amp_ar_coeff == cfg.mjo_amp_ar_coeff);
    CHECK(back.mjo_amp_noise_sigma == cfg.mjo_amp_noise_sigma);
    CHECK(back.mjo_boost_phases == cfg.mjo_boost_phases);
    CHECK(back.mjo_link.strength == cfg.mjo_link.strength);
    CHECK(back.mjo_link.lag_weeks == cfg.mjo_link.lag_weeks);
    CHECK(back.n_lat == cfg.n_lat);
    CHECK(back.n_lon == cfg.n_lon);
    CHECK(back.pattern_scale == cfg.pattern_scale);
    CHECK(back.field_noise_sigma == cfg.field_noise_sigma);
    CHECK(back.first_winter_year == cfg.first_winter_year);
    CHECK(back.seed == cfg.seed);

    // serializing the round-tripped config reproduces the same json
    CHECK(world_config_json(back) == j);
}

TEST_CASE("world config json validates structure") {
    // no transitions at all: rows sum to zero, the chain is unusable
    CHECK_THROWS_AS(world_config_from_json(Json{{"seed", 1}}), ConfigError);

    auto j = world_config_json(sample_world());
    j["transitions"] = Json::array({1, 2, 3});
    CHECK_THROWS_AS(world_config_from_json(j), ConfigError);

    j = world_config_json(sample_world());
    j["mjo_boost_phases"] = Json::array({true, false});
    CHECK_THROWS_AS(world_config_from_json(j), ConfigError);

    j = world_config_json(sample_world());
    j["spv_ar_coeff"] = "fast";
    CHECK_THROWS_AS(world_config_from_json(j), ConfigError);

    // explicit pattern maps survive the trip (one spike per regime so they
    // stay linearly independent)
    auto cfg = sample_world();
    cfg.patterns.assign(4, std::vector<double>(cfg.n_lat * cfg.n_lon, 0.0));
    for (std::size_t k = 0; k < 4; ++k) cfg.patterns[k][3 * k + 1] = 2.0 + 0.5 * k;
    const auto back = world_config_from_json(world_config_json(cfg));
    CHECK(back.patterns == cfg.patterns);
}
