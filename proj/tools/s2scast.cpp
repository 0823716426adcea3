// s2scast: command line front end for the regime forecasting library.
//
// Every subcommand reads a JSON config plus positional artifact paths and
// writes its outputs into a target directory, together with a manifest.json
// that records the resolved config, the seeds, and a digest of every file
// consumed or produced. Equal configs and inputs give byte-identical reports;
// manifests differ only in their timestamps block, which is excluded from the
// manifest's content digest.
//
// Exit codes: 0 success, 1 unexpected failure, 2 usage errors (bad flags,
// unreadable inputs), 3 config/validation/parse failures, 4 numeric aborts.

#include <CLI11.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <memory>
#include <set>
#include <sstream>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "s2scast/common.hpp"
#include "s2scast/drivers.hpp"
#include "s2scast/eval.hpp"
#include "s2scast/gridstore.hpp"
#include "s2scast/models.hpp"
#include "s2scast/preprocess.hpp"
#include "s2scast/regimes.hpp"
#include "s2scast/report.hpp"
#include "s2scast/synth.hpp"
#include "s2scast/tensorgrad.hpp"
#include "s2scast/training.hpp"

namespace fs = std::filesystem;
using namespace s2scast;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitFailure = 1;
constexpr int kExitUsage = 2;
constexpr int kExitValidation = 3;
constexpr int kExitNumeric = 4;

// ---------------------------------------------------------------------------
// Shared option state. Flags override config values, which override the
// profile defaults; "desk" shrinks every dimension so a pipeline run finishes
// on a laptop, "paper" keeps the full-size settings.
// ---------------------------------------------------------------------------

struct Cli {
    std::string config_path;
    std::vector<std::string> inputs;  // positional input artifacts, subcommand specific
    std::string outdir;
    std::string profile = "desk";
    std::uint64_t seed = 0;
    bool has_seed = false;
    int stride_days = 0;  // 0 = config or default
    double percentile = -1.0;
    int members = 0;
    int jobs = 1;

    bool desk() const { return profile == "desk"; }
};

std::uint64_t resolve_seed(const Cli& cli, const Json& cfg) {
    if (cli.has_seed) return cli.seed;
    return cfg.value("seed", std::uint64_t{0});
}

// manifest whose config block reflects the options as executed, not just the
// file contents; flag overrides land here so reruns are reproducible from the
// manifest alone
RunManifest start_manifest(const std::string& command, const Cli& cli, const Json& resolved,
                           std::uint64_t seed) {
    RunManifest m;
    m.command = command;
    m.config = resolved;
    m.config["profile"] = cli.profile;
    m.seed = seed;
    m.started_at = iso_timestamp_now();
    m.add_input(cli.config_path);
    return m;
}

void finish_manifest(RunManifest& m, const fs::path& outdir) {
    m.finished_at = iso_timestamp_now();
    write_json(run_manifest_json(m), (outdir / "manifest.json").string());
}

fs::path prepare_outdir(const Cli& cli) {
    const fs::path out(cli.outdir);
    std::error_code ec;
    fs::create_directories(out, ec);
    if (ec) throw IoError("cannot create output directory " + cli.outdir + ": " + ec.message());
    return out;
}

void write_output(RunManifest& m, const Json& j, const fs::path& path) {
    write_json(j, path.string());
    m.add_output(path.string());
}

// ---------------------------------------------------------------------------
// Small conversions between on-disk artifacts and the lookup tables the
// feature builders expect.
// ---------------------------------------------------------------------------

std::unordered_map<std::int64_t, double> series_map(const DatedSeries& s) {
    std::unordered_map<std::int64_t, double> out;
    out.reserve(s.times.size());
    for (std::size_t i = 0; i < s.times.size(); ++i) out.emplace(s.times[i], s.values[i]);
    return out;
}

std::unordered_map<std::int64_t, int> mjo_class_map(const std::vector<MjoRecord>& records) {
    std::unordered_map<std::int64_t, int> out;
    out.reserve(records.size());
    for (const auto& r : records) out.emplace(r.time, r.phase_class);
    return out;
}

std::unordered_map<std::int64_t, std::pair<double, double>> rmm_map(
    const std::vector<MjoRecord>& records) {
    std::unordered_map<std::int64_t, std::pair<double, double>> out;
    out.reserve(records.size());
    for (const auto& r : records) out.emplace(r.time, std::make_pair(r.rmm1, r.rmm2));
    return out;
}

std::vector<double> slice_values(const GriddedField& f, std::size_t t) {
    const float* p = f.time_slice(t);
    return std::vector<double>(p, p + f.grid_size());
}

// days whose maps the sequence models consume: the anchor day of every input
// week across all windows
std::set<std::int64_t> input_days(const WindowDataset& data) {
    std::set<std::int64_t> days;
    for (const auto& s : data.samples)
        for (std::size_t t = 0; t < kInputWeeks; ++t) days.insert(s.times[t]);
    return days;
}

std::unordered_map<std::int64_t, std::vector<double>> embed_days(
    const VitEncoder& enc, const GriddedField& field, const std::set<std::int64_t>& days) {
    std::unordered_map<std::int64_t, std::size_t> by_time;
    by_time.reserve(field.times.size());
    for (std::size_t t = 0; t < field.times.size(); ++t) by_time.emplace(field.times[t], t);
    std::unordered_map<std::int64_t, std::vector<double>> out;
    out.reserve(days.size());
    for (const std::int64_t day : days) {
        const auto it = by_time.find(day);
        if (it == by_time.end())
            throw CoverageError("field " + field.variable_name + " has no map for day " +
                                format_date(day));
        out.emplace(day, enc.embed_map(slice_values(field, it->second)));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Training setup shared by the train, ensemble, and bo subcommands. The rows
// are built once; member models are constructed fresh per seed on top of them.
// For the map-encoding model the encoders come from a single masked-autoencoder
// pretraining pass and are shared frozen across members, so the per-member
// state is only the forecasting head.
// ---------------------------------------------------------------------------

struct ModelSetup {
    std::string kind;  // lstm | index | vit
    std::size_t hidden_dim = 32;
    std::size_t width = 0;  // per-step feature width
    std::shared_ptr<std::vector<std::vector<double>>> rows;
    std::vector<std::vector<double>> train_step_rows;  // feature-stat fitting (vit only)
    std::shared_ptr<VitEncoder> u10_enc, olr_enc;
    Json info = Json::object();
};

Json mae_history_json(const MaeHistory& h) {
    return Json{{"train_loss", h.train_loss}, {"val_error", h.val_error}};
}

ModelSetup build_model_setup(const Json& cfg, const WindowDataset& data, const Cli& cli,
                             std::uint64_t seed, RunManifest& manifest) {
    ModelSetup s;
    s.kind = cfg.value("model", "lstm");
    if (s.kind != "lstm" && s.kind != "index" && s.kind != "vit")
        throw ConfigError("train: unknown model '" + s.kind + "' (expected lstm, index, or vit)");
    s.hidden_dim = cfg.value("hidden_dim", std::size_t{cli.desk() ? 32u : 256u});

    if (s.kind == "lstm") {
        s.width = kNumRegimes;
        s.rows = std::make_shared<std::vector<std::vector<double>>>(build_regime_features(data));
        return s;
    }

    if (s.kind == "index") {
        if (!cfg.contains("drivers"))
            throw ConfigError("train: the index model needs a drivers block with spv/mjo paths");
        const auto& d = cfg.at("drivers");
        const std::string spv_path = d.at("spv").get<std::string>();
        const std::string mjo_path = d.at("mjo").get<std::string>();
        manifest.add_input(spv_path);
        manifest.add_input(mjo_path);
        const DatedSeries spv = read_series(spv_path);
        const auto mjo = read_mjo_records(mjo_path);
        s.width = kIndexFeatureWidth;
        s.rows = std::make_shared<std::vector<std::vector<double>>>(
            build_index_features(data, series_map(spv), mjo_class_map(mjo)));
        return s;
    }

    // vit: pretrain one masked autoencoder per map stream, freeze the encoders,
    // and precompute per-day embeddings so training never touches the encoders
    if (!cfg.contains("fields"))
        throw ConfigError("train: the vit model needs a fields block with u10/olr paths");
    const auto& f = cfg.at("fields");
    const std::string u10_path = f.at("u10").get<std::string>();
    const std::string olr_path = f.at("olr").get<std::string>();
    manifest.add_input(u10_path);
    manifest.add_input(olr_path);
    const GriddedField u10 = read_grid(u10_path);
    const GriddedField olr = read_grid(olr_path);

    MaePretrainConfig pc;
    pc.model = cli.desk() ? mae_desk_profile() : mae_full_profile();
    pc.epochs = cli.desk() ? 8 : 20;
    const Json mj = cfg.value("mae", Json::object());
    pc.model.masking_ratio = mj.value("masking_ratio", pc.model.masking_ratio);
    pc.epochs = mj.value("epochs", pc.epochs);
    pc.batch = mj.value("batch", pc.batch);
    pc.lr = mj.value("lr", pc.lr);
    pc.val_fraction = mj.value("val_fraction", pc.val_fraction);

    MaeHistory hist_u10, hist_olr;
    pc.seed = mix_u64(seed, 1001);
    const MaeModel mae_u10 = mae_pretrain(u10, pc, &hist_u10);
    pc.seed = mix_u64(seed, 1002);
    const MaeModel mae_olr = mae_pretrain(olr, pc, &hist_olr);
    s.u10_enc = std::make_shared<VitEncoder>(mae_u10.encoder());
    s.olr_enc = std::make_shared<VitEncoder>(mae_olr.encoder());
    s.info["mae_u10"] = mae_history_json(hist_u10);
    s.info["mae_olr"] = mae_history_json(hist_olr);

    const auto days = input_days(data);
    const auto u10_emb = embed_days(*s.u10_enc, u10, days);
    const auto olr_emb = embed_days(*s.olr_enc, olr, days);

    VitLstmConfig probe_cfg;
    probe_cfg.hidden_dim = s.hidden_dim;
    probe_cfg.seed = seed;
    const VitLstm probe(probe_cfg, *s.u10_enc, *s.olr_enc);
    s.rows = std::make_shared<std::vector<std::vector<double>>>(
        build_vit_features(data, probe, u10_emb, olr_emb));
    s.width = probe.feature_width();

    // feature standardization is fit on training windows only
    for (const std::size_t i : data.indices_of(Split::train)) {
        const auto& row = (*s.rows)[i];
        for (std::size_t t = 0; t < kInputWeeks; ++t)
            s.train_step_rows.emplace_back(row.begin() + static_cast<std::ptrdiff_t>(t * s.width),
                                           row.begin() +
                                               static_cast<std::ptrdiff_t>((t + 1) * s.width));
    }
    return s;
}

TrainableModel make_member(const ModelSetup& s, std::uint64_t seed, double dropout) {
    if (s.kind == "vit") {
        VitLstmConfig vc;
        vc.hidden_dim = s.hidden_dim;
        vc.dropout = dropout;
        vc.seed = seed;
        auto m = std::make_shared<VitLstm>(vc, *s.u10_enc, *s.olr_enc);
        m->fit_feature_stats(s.train_step_rows);
        return make_vit_adapter(m, s.rows);
    }
    SeqLstmConfig c;
    c.input_dim = s.width;
    c.hidden_dim = s.hidden_dim;
    c.dropout = dropout;
    c.seed = seed;
    return make_lstm_adapter(std::make_shared<SeqLstm>(c), s.rows);
}

TrainConfig parse_train_config(const Json& cfg, const Cli& cli, std::uint64_t seed) {
    TrainConfig tc;
    tc.max_epochs = cli.desk() ? 20 : 60;
    tc.patience = cli.desk() ? 5 : 10;
    if (cfg.contains("train")) {
        const auto& t = cfg.at("train");
        tc.lr = t.value("lr", tc.lr);
        tc.batch = t.value("batch", tc.batch);
        tc.weight_decay = t.value("weight_decay", tc.weight_decay);
        tc.clip_norm = t.value("clip_norm", tc.clip_norm);
        tc.swa_lr = t.value("swa_lr", tc.swa_lr);
        tc.dropout = t.value("dropout", tc.dropout);
        tc.max_epochs = t.value("max_epochs", tc.max_epochs);
        tc.patience = t.value("patience", tc.patience);
        tc.swa_fraction = t.value("swa_fraction", tc.swa_fraction);
    }
    tc.use_focal = cfg.value("use_focal", true);
    if (cfg.contains("focal")) {
        const auto& f = cfg.at("focal");
        tc.focal.low_threshold = f.value("low_threshold", tc.focal.low_threshold);
        tc.focal.gamma_low = f.value("gamma_low", tc.focal.gamma_low);
        tc.focal.gamma_high = f.value("gamma_high", tc.focal.gamma_high);
        tc.focal.gamma_override = f.value("gamma_override", tc.focal.gamma_override);
    }
    tc.seed = seed;
    tc.validate();
    return tc;
}

Split records_split(const Json& cfg) {
    const std::string name = cfg.value("records_split", "test");
    if (name == "train") return Split::train;
    if (name == "val") return Split::val;
    if (name == "test") return Split::test;
    throw ConfigError("train: unknown records_split '" + name + "'");
}

WindowDataset load_windows(const std::string& path, RunManifest& manifest) {
    manifest.add_input(path);
    return windows_from_json(read_json(path));
}

// ---------------------------------------------------------------------------
// Subcommands.
// ---------------------------------------------------------------------------

int run_synth(const Cli& cli) {
    const Json cfg = read_json(cli.config_path);
    WorldConfig wc = world_config_from_json(cfg);
    if (cli.has_seed) wc.seed = cli.seed;
    const int n_winters = cfg.value("n_winters", 30);
    if (n_winters < 1) throw ConfigError("synth: n_winters must be >= 1");

    Json resolved = world_config_json(wc);
    resolved["n_winters"] = n_winters;
    RunManifest m = start_manifest("synth", cli, resolved, wc.seed);
    const fs::path out = prepare_outdir(cli);

    const SynthWorld world = generate(wc, n_winters);
    write_grid(world.z500, (out / "z500.grd").string());
    m.add_output((out / "z500.grd").string());
    write_grid(world.u10, (out / "u10.grd").string());
    m.add_output((out / "u10.grd").string());
    write_grid(world.olr, (out / "olr.grd").string());
    m.add_output((out / "olr.grd").string());
    write_rmm_csv(world.rmm1, world.rmm2, (out / "rmm.csv").string());
    m.add_output((out / "rmm.csv").string());
    write_regime_series(world.truth, (out / "truth.csv").string());
    m.add_output((out / "truth.csv").string());
    write_output(m, resolved, out / "world.json");

    finish_manifest(m, out);
    return kExitOk;
}

int run_preprocess(const Cli& cli) {
    const Json cfg = read_json(cli.config_path);
    RunManifest m = start_manifest("preprocess", cli, cfg, resolve_seed(cli, cfg));
    const fs::path out = prepare_outdir(cli);

    m.add_input(cli.inputs[0]);
    GriddedField field = read_grid(cli.inputs[0]);

    if (cfg.contains("regrid")) {
        const auto& r = cfg.at("regrid");
        field = regrid(field, r.at("lats").get<std::vector<double>>(),
                       r.at("lons").get<std::vector<double>>());
    }
    const int window_days = cfg.value("rolling_mean_days", 7);
    if (window_days > 1) field = rolling_mean(field, window_days);
    if (cfg.value("anomalies", true)) {
        ClimatologyPolicy policy;
        policy.window_years = cfg.value("climatology_window_years", policy.window_years);
        policy.early_window_start = cfg.value("early_window_start", policy.early_window_start);
        field = anomalies(field, policy);
    }
    const std::string how = cfg.value("standardize", "pooled");
    if (how == "pooled")
        field = standardize(field, field, false);
    else if (how == "per_gridpoint")
        field = standardize(field, field, true);
    else if (how != "none")
        throw ConfigError("preprocess: unknown standardize mode '" + how + "'");
    if (cfg.value("winter_only", true)) field = select_times(field, in_extended_winter);

    const std::string name = cfg.value("output", "preprocessed.grd");
    write_grid(field, (out / name).string());
    m.add_output((out / name).string());

    finish_manifest(m, out);
    return kExitOk;
}

int run_eof(const Cli& cli) {
    const Json cfg = read_json(cli.config_path);
    Json resolved = cfg;
    const std::size_t n_eof = cfg.value("n_eof", std::size_t{cli.desk() ? 6u : 14u});
    resolved["n_eof"] = n_eof;
    RunManifest m = start_manifest("eof", cli, resolved, resolve_seed(cli, cfg));
    const fs::path out = prepare_outdir(cli);

    m.add_input(cli.inputs[0]);
    const GriddedField field = read_grid(cli.inputs[0]);
    const EofBasis basis = fit_eof(field, n_eof, cfg.value("cos_lat_weighting", true));

    write_eof_basis(basis, (out / "basis.eof").string());
    m.add_output((out / "basis.eof").string());
    double cumulative = 0.0;
    for (const double r : basis.explained_variance_ratio) cumulative += r;
    write_output(m,
                 Json{{"n_eof", basis.n_eof},
                      {"explained_variance_ratio", basis.explained_variance_ratio},
                      {"cumulative_explained_variance", cumulative}},
                 out / "eof.json");

    finish_manifest(m, out);
    return kExitOk;
}

int run_cluster(const Cli& cli) {
    const Json cfg = read_json(cli.config_path);
    const std::uint64_t seed = resolve_seed(cli, cfg);
    RunManifest m = start_manifest("cluster", cli, cfg, seed);
    const fs::path out = prepare_outdir(cli);

    m.add_input(cli.inputs[0]);
    m.add_input(cli.inputs[1]);
    const GriddedField field = read_grid(cli.inputs[0]);
    const EofBasis basis = read_eof_basis(cli.inputs[1]);
    const CoeffSeries coeffs = project(field, basis);

    const std::size_t k = cfg.value("k", std::size_t{kNumRegimes});
    const int n_restarts = cfg.value("n_restarts", 20);
    RegimeModel model = fit_kmeans(coeffs, k, n_restarts, static_cast<int>(seed));
    model.basis = basis;

    // optional relabeling: composite each raw cluster and match against
    // reference anomaly patterns so cluster ids land on canonical regime ids
    if (cfg.contains("reference_patterns")) {
        const auto refs = cfg.at("reference_patterns").get<std::vector<std::vector<double>>>();
        const RegimeSeries raw = assign(coeffs, model);  // label_map still identity
        const RegimeComposites comps = composite(field, raw, k);
        model.label_map = match_patterns(comps, refs);
    }
    const RegimeSeries labels = assign(coeffs, model);

    write_regime_model(model, (out / "regimes.rgm").string());
    m.add_output((out / "regimes.rgm").string());
    write_regime_series(labels, (out / "labels.csv").string());
    m.add_output((out / "labels.csv").string());

    std::array<std::size_t, kNumRegimes> counts{};
    for (const int lab : labels.labels) counts[static_cast<std::size_t>(lab)]++;
    Json frequencies = Json::array();
    for (std::size_t c = 0; c < k; ++c)
        frequencies.push_back(static_cast<double>(counts[c]) /
                              static_cast<double>(labels.labels.size()));
    write_output(m,
                 Json{{"k", model.k},
                      {"inertia", model.inertia},
                      {"label_map", model.label_map},
                      {"frequencies", frequencies},
                      {"n_days", labels.labels.size()}},
                 out / "cluster.json");

    finish_manifest(m, out);
    return kExitOk;
}

int run_indices(const Cli& cli) {
    const Json cfg = read_json(cli.config_path);
    RunManifest m = start_manifest("indices", cli, cfg, resolve_seed(cli, cfg));
    const fs::path out = prepare_outdir(cli);

    m.add_input(cli.inputs[0]);
    m.add_input(cli.inputs[1]);
    const GriddedField u10 = read_grid(cli.inputs[0]);
    const auto [rmm1, rmm2] = read_rmm_csv(cli.inputs[1]);

    DatedSeries spv = spv_index(u10);
    if (cfg.value("standardize_spv", true)) spv = standardize(spv, spv);
    write_series(spv, (out / "spv.csv").string());
    m.add_output((out / "spv.csv").string());

    const auto records = mjo_phase(rmm1, rmm2, cfg.value("mjo_smoothing_days", 7),
                                   cfg.value("mjo_amplitude_threshold", 1.0));
    write_mjo_records(records, (out / "mjo.csv").string());
    m.add_output((out / "mjo.csv").string());

    finish_manifest(m, out);
    return kExitOk;
}

int run_windows(const Cli& cli) {
    const Json cfg = read_json(cli.config_path);
    const std::uint64_t seed = resolve_seed(cli, cfg);
    SplitSpec spec = split_spec_from_json(cfg.value("split", Json::object()));
    if (cli.has_seed) spec.split_seed = seed;
    const int stride =
        cli.stride_days > 0 ? cli.stride_days : cfg.value("stride_days", 7);

    Json resolved = cfg;
    resolved["split"] = split_spec_json(spec);
    resolved["stride_days"] = stride;
    RunManifest m = start_manifest("windows", cli, resolved, seed);
    const fs::path out = prepare_outdir(cli);

    m.add_input(cli.inputs[0]);
    const RegimeSeries labels = read_regime_series(cli.inputs[0]);
    const WindowDataset data = build_windows(labels, spec, stride);
    for (const auto& w : data.warnings) std::cerr << "s2scast windows: " << w << "\n";

    write_output(m, windows_json(data, spec, stride), out / "windows.json");
    finish_manifest(m, out);
    return kExitOk;
}

int run_train(const Cli& cli) {
    const Json cfg = read_json(cli.config_path);
    const std::uint64_t seed = resolve_seed(cli, cfg);
    RunManifest m = start_manifest("train", cli, cfg, seed);
    const fs::path out = prepare_outdir(cli);

    const WindowDataset data = load_windows(cli.inputs[0], m);
    const ModelSetup setup = build_model_setup(cfg, data, cli, seed, m);
    const TrainConfig tc = parse_train_config(cfg, cli, seed);

    TrainableModel model = make_member(setup, seed, tc.dropout);
    const TrainResult res = train(model, data, tc);

    save_checkpoint(res.checkpoint, (out / "model.ckpt").string());
    m.add_output((out / "model.ckpt").string());

    const Split split = records_split(cfg);
    const auto records =
        forecast_records(model, data, data.indices_of(split), tc.batch, seed);
    write_forecast_records(records, (out / "records.csv").string());
    m.add_output((out / "records.csv").string());

    write_output(m, history_json(res.history), out / "history.json");
    write_output(m,
                 Json{{"model", setup.kind},
                      {"hidden_dim", setup.hidden_dim},
                      {"feature_width", setup.width},
                      {"seed", seed},
                      {"use_focal", tc.use_focal},
                      {"records_split", split_name(split)},
                      {"n_records", records.size()},
                      {"checkpoint_digest", hex_digest(checkpoint_digest(res.checkpoint))},
                      {"info", setup.info}},
                 out / "train.json");

    finish_manifest(m, out);
    return kExitOk;
}

int run_ensemble(const Cli& cli) {
    const Json cfg = read_json(cli.config_path);
    const std::uint64_t seed = resolve_seed(cli, cfg);
    const int members =
        cli.members > 0 ? cli.members : cfg.value("members", cli.desk() ? 4 : 10);
    if (members < 1) throw ConfigError("ensemble: members must be >= 1");

    Json resolved = cfg;
    resolved["members"] = members;
    RunManifest m = start_manifest("ensemble", cli, resolved, seed);
    const fs::path out = prepare_outdir(cli);

    const WindowDataset data = load_windows(cli.inputs[0], m);
    const ModelSetup setup = build_model_setup(cfg, data, cli, seed, m);
    const TrainConfig tc = parse_train_config(cfg, cli, seed);

    std::vector<std::uint64_t> seeds(static_cast<std::size_t>(members));
    for (std::size_t i = 0; i < seeds.size(); ++i)
        seeds[i] = counter_hash(seed, 808, static_cast<std::uint64_t>(i), 0);
    const MemberFactory factory = [&](std::uint64_t member_seed) {
        return make_member(setup, member_seed, tc.dropout);
    };
    const EnsembleResult res = train_ensemble(factory, data, tc, seeds,
                                              static_cast<std::size_t>(std::max(cli.jobs, 1)));
    if (res.n_failed > 0) {
        std::string first;
        for (const auto& mem : res.members)
            if (!mem.ok) { first = mem.error; break; }
        throw NumericError("ensemble: " + std::to_string(res.n_failed) +
                           " member(s) failed to train; first error: " + first);
    }

    const Split split = records_split(cfg);
    const auto idx = data.indices_of(split);
    std::vector<ForecastRecord> pooled;
    Json member_summaries = Json::array();
    for (std::size_t i = 0; i < res.members.size(); ++i) {
        const auto& mem = res.members[i];
        TrainableModel model = factory(mem.seed);
        model.restore(mem.checkpoint);

        const std::string stem = "member_" + std::to_string(i);
        save_checkpoint(mem.checkpoint, (out / (stem + ".ckpt")).string());
        m.add_output((out / (stem + ".ckpt")).string());
        const auto records = forecast_records(model, data, idx, tc.batch, mem.seed);
        write_forecast_records(records, (out / (stem + "_records.csv")).string());
        m.add_output((out / (stem + "_records.csv")).string());
        pooled.insert(pooled.end(), records.begin(), records.end());

        member_summaries.push_back(
            Json{{"seed", mem.seed},
                 {"checkpoint_digest", hex_digest(checkpoint_digest(mem.checkpoint))},
                 {"history", history_json(mem.history)}});
    }
    write_forecast_records(pooled, (out / "ensemble_records.csv").string());
    m.add_output((out / "ensemble_records.csv").string());

    write_output(m,
                 Json{{"model", setup.kind},
                      {"hidden_dim", setup.hidden_dim},
                      {"base_seed", seed},
                      {"members", member_summaries},
                      {"n_failed", res.n_failed},
                      {"mean_val_accuracy", res.mean_val_accuracy},
                      {"std_val_accuracy", res.std_val_accuracy},
                      {"records_split", split_name(split)},
                      {"info", setup.info}},
                 out / "ensemble.json");

    finish_manifest(m, out);
    return kExitOk;
}

// hyperparameter names the optimizer may move; everything else in the train
// block stays at its configured value
void apply_bo_dim(TrainConfig& tc, const std::string& name, double v) {
    if (name == "log10_lr")
        tc.lr = std::pow(10.0, v);
    else if (name == "log10_weight_decay")
        tc.weight_decay = std::pow(10.0, v);
    else if (name == "clip_norm")
        tc.clip_norm = v;
    else if (name == "dropout")
        tc.dropout = v;
    else if (name == "swa_fraction")
        tc.swa_fraction = v;
    else
        throw ConfigError("bo: unknown dimension '" + name + "'");
}

int run_bo(const Cli& cli) {
    const Json cfg = read_json(cli.config_path);
    const std::uint64_t seed = resolve_seed(cli, cfg);
    RunManifest m = start_manifest("bo", cli, cfg, seed);
    const fs::path out = prepare_outdir(cli);

    const WindowDataset data = load_windows(cli.inputs[0], m);
    const ModelSetup setup = build_model_setup(cfg, data, cli, seed, m);
    const TrainConfig base_tc = parse_train_config(cfg, cli, seed);

    if (!cfg.contains("bounds")) throw ConfigError("bo: config needs a bounds array");
    std::vector<std::string> names;
    std::vector<std::pair<double, double>> bounds;
    for (const auto& b : cfg.at("bounds")) {
        names.push_back(b.at("name").get<std::string>());
        bounds.emplace_back(b.at("lo").get<double>(), b.at("hi").get<double>());
    }

    BoConfig bc;
    const Json bj = cfg.value("bo", Json::object());
    bc.n_steps = bj.value("n_steps", cli.desk() ? 12 : 100);
    bc.n_init = bj.value("n_init", cli.desk() ? 4 : 8);
    bc.ei_candidates = bj.value("ei_candidates", bc.ei_candidates);
    bc.seed = mix_u64(seed, 7201);

    // the model seed stays fixed across trials so the objective isolates the
    // hyperparameters from initialization noise
    const auto objective = [&](const std::vector<double>& x) {
        TrainConfig tc = base_tc;
        for (std::size_t i = 0; i < names.size(); ++i) apply_bo_dim(tc, names[i], x[i]);
        tc.validate();
        TrainableModel model = make_member(setup, seed, tc.dropout);
        const TrainResult res = train(model, data, tc);
        const auto& acc = res.history.val_balanced_accuracy;
        if (acc.empty()) throw NumericError("bo: objective produced no validation history");
        return *std::max_element(acc.begin(), acc.end());
    };
    const BoResult res = bayes_opt(objective, bounds, bc);

    Json best = Json::object();
    for (std::size_t i = 0; i < names.size(); ++i) best[names[i]] = res.best_point[i];
    write_output(m,
                 Json{{"bounds", cfg.at("bounds")},
                      {"points", res.points},
                      {"values", res.values},
                      {"incumbent", res.incumbent},
                      {"best_point", best},
                      {"best_value", res.best_value},
                      {"random_fallback", res.random_fallback},
                      {"warnings", res.warnings}},
                 out / "bo.json");

    finish_manifest(m, out);
    return kExitOk;
}

int run_evaluate(const Cli& cli) {
    const Json cfg = read_json(cli.config_path);
    RunManifest m = start_manifest("evaluate", cli, cfg, resolve_seed(cli, cfg));
    const fs::path out = prepare_outdir(cli);

    m.add_input(cli.inputs[0]);
    const auto records = read_forecast_records(cli.inputs[0]);
    const std::string name = cfg.value("model_name", "model");
    write_output(m, metrics_report(records, name), out / "metrics.json");

    finish_manifest(m, out);
    return kExitOk;
}

int run_precursors(const Cli& cli) {
    const Json cfg = read_json(cli.config_path);
    const double percentile =
        cli.percentile >= 0.0 ? cli.percentile : cfg.value("percentile", 90.0);
    Json resolved = cfg;
    resolved["percentile"] = percentile;
    RunManifest m = start_manifest("precursors", cli, resolved, resolve_seed(cli, cfg));
    const fs::path out = prepare_outdir(cli);

    m.add_input(cli.inputs[0]);
    const auto records = read_forecast_records(cli.inputs[0]);
    const WindowDataset data = load_windows(cli.inputs[1], m);
    m.add_input(cli.inputs[2]);
    const DatedSeries spv = read_series(cli.inputs[2]);
    m.add_input(cli.inputs[3]);
    const auto mjo = read_mjo_records(cli.inputs[3]);

    const OpportunitySet opps = select_opportunities(records, percentile);
    const auto pairs = pairs_from_opportunities(opps);
    write_output(m, opportunities_json(opps), out / "opportunities.json");

    const PrecursorTable table = precursor_frequencies(records, pairs, data);
    write_precursor_csv(table, (out / "precursor.csv").string());
    m.add_output((out / "precursor.csv").string());

    const SpvComposite spv_comp =
        spv_composites(records, pairs, data, series_map(spv), spv.values);
    write_spv_composite_csv(spv_comp, (out / "spv_composite.csv").string());
    m.add_output((out / "spv_composite.csv").string());

    const MjoComposite mjo_comp = mjo_composites(records, pairs, data, rmm_map(mjo));
    write_mjo_composite_csv(mjo_comp, (out / "mjo_composite.csv").string());
    m.add_output((out / "mjo_composite.csv").string());

    const ActivePhaseConfusion conf = active_phase_confusion(records, data, mjo_class_map(mjo));
    const auto cell = [](const std::array<std::array<double, 2>, 2>& a) {
        return Json{{"incorrect_inactive", a[0][0]},
                    {"incorrect_active", a[0][1]},
                    {"correct_inactive", a[1][0]},
                    {"correct_active", a[1][1]}};
    };
    write_output(m,
                 Json{{"n_members", conf.n_members},
                      {"mean", cell(conf.mean)},
                      {"sd", cell(conf.sd)}},
                 out / "active_phase.json");

    finish_manifest(m, out);
    return kExitOk;
}

int run_report(const Cli& cli) {
    const Json cfg = read_json(cli.config_path);
    RunManifest m = start_manifest("report", cli, cfg, resolve_seed(cli, cfg));
    const fs::path out = prepare_outdir(cli);

    Json models = Json::object();
    Json skill = Json::array();
    std::string skill_csv = "model,lead_week,balanced_accuracy,csi_weighted\n";
    if (!cfg.contains("metrics") || !cfg.at("metrics").is_array() || cfg.at("metrics").empty())
        throw ConfigError("report: config needs a non-empty metrics array");
    for (const auto& entry : cfg.at("metrics")) {
        const std::string name = entry.at("name").get<std::string>();
        const std::string path = entry.at("path").get<std::string>();
        m.add_input(path);
        const Json metrics = read_json(path);
        models[name] = metrics;
        for (const auto& w : metrics.at("weeks")) {
            const int lead = w.at("lead_week").get<int>();
            const double bacc = w.at("balanced_accuracy").get<double>();
            const double csi_w = w.at("csi_weighted").get<double>();
            skill.push_back(Json{{"model", name},
                                 {"lead_week", lead},
                                 {"balanced_accuracy", bacc},
                                 {"csi_weighted", csi_w}});
            std::ostringstream row;
            row << name << ',' << lead << ',';
            detail::append_num(row, bacc);
            row << ',';
            detail::append_num(row, csi_w);
            skill_csv += row.str() + "\n";
        }
    }

    Json report{{"tool_version", kToolVersion}, {"models", models}, {"skill", skill}};
    for (const char* key : {"opportunities", "active_phase"}) {
        if (!cfg.contains(key)) continue;
        const std::string path = cfg.at(key).get<std::string>();
        m.add_input(path);
        report[key] = read_json(path);
    }

    // plot-data CSVs travel with the report unmodified
    if (cfg.contains("composites")) {
        for (const auto& [key, value] : cfg.at("composites").items()) {
            const std::string src = value.get<std::string>();
            m.add_input(src);
            const fs::path dst = out / (key + "_composite.csv");
            std::error_code ec;
            fs::copy_file(src, dst, fs::copy_options::overwrite_existing, ec);
            if (ec) throw IoError("cannot copy " + src + " to " + dst.string() + ": " +
                                  ec.message());
            m.add_output(dst.string());
        }
    }

    write_output(m, report, out / "report.json");
    {
        std::ofstream os(out / "skill.csv", std::ios::binary);
        if (!os) throw IoError("cannot open " + (out / "skill.csv").string() + " for writing");
        os << skill_csv;
        os.close();
        if (!os) throw IoError("failed writing " + (out / "skill.csv").string());
    }
    m.add_output((out / "skill.csv").string());

    finish_manifest(m, out);
    return kExitOk;
}

// ---------------------------------------------------------------------------
// Argument wiring.
// ---------------------------------------------------------------------------

void add_common_flags(CLI::App* sub, Cli& cli) {
    sub->add_option("--seed", cli.seed, "override the config seed")
        ->check(CLI::NonNegativeNumber);
    sub->add_option("--profile", cli.profile,
                    "size profile: desk shrinks dimensions, epochs, and ensembles")
        ->check(CLI::IsMember({"desk", "paper"}));
}

}  // namespace

int main(int argc, char** argv) {
    Cli cli;
    CLI::App app{"subseasonal regime forecasting pipeline"};
    app.require_subcommand(1);
    app.set_version_flag("--version", kToolVersion);

    std::function<int()> run;
    const auto positional = [&](CLI::App* sub, const char* name, const char* desc,
                                std::string& target) {
        sub->add_option(name, target, desc)->required();
    };
    const auto input = [&](CLI::App* sub, const char* name, const char* desc) {
        cli.inputs.reserve(4);
        sub->add_option(name, *cli.inputs.insert(cli.inputs.end(), std::string{}), desc)
            ->required();
    };

    auto* synth = app.add_subcommand(
        "synth", "generate a synthetic world: fields, RMM series, and true labels");
    positional(synth, "config", "world config JSON (transitions, driver links, grid)",
               cli.config_path);
    positional(synth, "outdir", "output directory", cli.outdir);
    add_common_flags(synth, cli);
    synth->callback([&] { run = [&] { return run_synth(cli); }; });

    auto* preprocess = app.add_subcommand(
        "preprocess", "regrid, smooth, deseasonalize, and standardize a gridded field");
    positional(preprocess, "config", "preprocess config JSON", cli.config_path);
    input(preprocess, "field", "input field (.grd)");
    positional(preprocess, "outdir", "output directory", cli.outdir);
    add_common_flags(preprocess, cli);
    preprocess->callback([&] { run = [&] { return run_preprocess(cli); }; });

    auto* eof = app.add_subcommand("eof", "fit an orthonormal EOF basis to an anomaly field");
    positional(eof, "config", "eof config JSON (n_eof, cos_lat_weighting)", cli.config_path);
    input(eof, "field", "preprocessed anomaly field (.grd)");
    positional(eof, "outdir", "output directory", cli.outdir);
    add_common_flags(eof, cli);
    eof->callback([&] { run = [&] { return run_eof(cli); }; });

    auto* cluster = app.add_subcommand(
        "cluster", "k-means regimes in EOF space, with optional pattern-matched relabeling");
    positional(cluster, "config", "cluster config JSON (k, n_restarts, reference_patterns)",
               cli.config_path);
    input(cluster, "field", "preprocessed anomaly field (.grd)");
    input(cluster, "basis", "EOF basis (.eof)");
    positional(cluster, "outdir", "output directory", cli.outdir);
    add_common_flags(cluster, cli);
    cluster->callback([&] { run = [&] { return run_cluster(cli); }; });

    auto* indices = app.add_subcommand(
        "indices", "derive teleconnection indices: polar vortex wind and MJO phase");
    positional(indices, "config", "indices config JSON (smoothing, amplitude threshold)",
               cli.config_path);
    input(indices, "u10", "zonal wind field (.grd)");
    input(indices, "rmm", "raw RMM components CSV (date,rmm1,rmm2)");
    positional(indices, "outdir", "output directory", cli.outdir);
    add_common_flags(indices, cli);
    indices->callback([&] { run = [&] { return run_indices(cli); }; });

    auto* windows = app.add_subcommand(
        "windows", "cut labeled regime days into 6-week-in / 6-week-out training windows");
    positional(windows, "config", "windows config JSON (split years, stride)", cli.config_path);
    input(windows, "labels", "daily regime labels CSV (date,label)");
    positional(windows, "outdir", "output directory", cli.outdir);
    add_common_flags(windows, cli);
    windows->add_option("--stride-days", cli.stride_days,
                        "spacing between window anchors in days")
        ->check(CLI::PositiveNumber);
    windows->callback([&] { run = [&] { return run_windows(cli); }; });

    const char* train_cfg_help =
        "train config JSON (model: lstm|index|vit, hidden_dim, train block, focal block; "
        "index needs drivers.spv/mjo paths, vit needs fields.u10/olr paths)";
    auto* train = app.add_subcommand("train", "train one forecasting model on a window set");
    positional(train, "config", train_cfg_help, cli.config_path);
    input(train, "windows", "window dataset JSON");
    positional(train, "outdir", "output directory", cli.outdir);
    add_common_flags(train, cli);
    train->callback([&] { run = [&] { return run_train(cli); }; });

    auto* ensemble = app.add_subcommand(
        "ensemble", "train a deep ensemble of one architecture under distinct member seeds");
    positional(ensemble, "config", train_cfg_help, cli.config_path);
    input(ensemble, "windows", "window dataset JSON");
    positional(ensemble, "outdir", "output directory", cli.outdir);
    add_common_flags(ensemble, cli);
    ensemble->add_option("--members", cli.members, "number of ensemble members")
        ->check(CLI::PositiveNumber);
    ensemble->add_option("--jobs", cli.jobs, "members trained in parallel")
        ->check(CLI::PositiveNumber);
    ensemble->callback([&] { run = [&] { return run_ensemble(cli); }; });

    auto* bo = app.add_subcommand(
        "bo", "Bayesian search over training hyperparameters against validation skill");
    positional(bo, "config",
               "train config JSON plus bounds array (log10_lr, log10_weight_decay, dropout, "
               "clip_norm, swa_fraction) and bo block (n_steps, n_init)",
               cli.config_path);
    input(bo, "windows", "window dataset JSON");
    positional(bo, "outdir", "output directory", cli.outdir);
    add_common_flags(bo, cli);
    bo->callback([&] { run = [&] { return run_bo(cli); }; });

    auto* evaluate = app.add_subcommand(
        "evaluate", "score forecast records: balanced accuracy, CSI, calibration");
    positional(evaluate, "config", "evaluate config JSON (model_name)", cli.config_path);
    input(evaluate, "records", "forecast records CSV");
    positional(evaluate, "outdir", "output directory", cli.outdir);
    add_common_flags(evaluate, cli);
    evaluate->callback([&] { run = [&] { return run_evaluate(cli); }; });

    auto* precursors = app.add_subcommand(
        "precursors", "condition driver states on high-confidence forecast opportunities");
    positional(precursors, "config", "precursors config JSON (percentile)", cli.config_path);
    input(precursors, "records", "forecast records CSV");
    input(precursors, "windows", "window dataset JSON");
    input(precursors, "spv", "vortex index series CSV (date,value)");
    input(precursors, "mjo", "MJO phase records CSV (date,rmm1,rmm2,amplitude,phase)");
    positional(precursors, "outdir", "output directory", cli.outdir);
    add_common_flags(precursors, cli);
    precursors->add_option("--percentile", cli.percentile,
                           "confidence percentile for opportunity selection")
        ->check(CLI::Range(0.0, 100.0));
    precursors->callback([&] { run = [&] { return run_precursors(cli); }; });

    auto* report = app.add_subcommand(
        "report", "merge metrics and composites into one report plus plot-data CSVs");
    positional(report, "config",
               "report config JSON (metrics array of {name,path}, optional opportunities, "
               "active_phase, composites)",
               cli.config_path);
    positional(report, "outdir", "output directory", cli.outdir);
    add_common_flags(report, cli);
    report->callback([&] { run = [&] { return run_report(cli); }; });

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForVersion& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kExitUsage;
    }
    cli.has_seed = app.get_subcommands().front()->count("--seed") > 0;

    try {
        return run();
    } catch (const IoError& e) {
        std::cerr << "s2scast: " << e.what() << "\n";
        return kExitUsage;
    } catch (const NumericError& e) {
        std::cerr << "s2scast: " << e.what() << "\n";
        return kExitNumeric;
    } catch (const Error& e) {
        std::cerr << "s2scast: " << e.what() << "\n";
        return kExitValidation;
    } catch (const Json::exception& e) {
        std::cerr << "s2scast: config error: " << e.what() << "\n";
        return kExitValidation;
    } catch (const std::exception& e) {
        std::cerr << "s2scast: unexpected error: " << e.what() << "\n";
        return kExitFailure;
    }
}
