#include <catch2/catch_amalgamated.hpp>

#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <vector>

#include "s2scast/eval.hpp"
#include "s2scast/models.hpp"
#include "s2scast/synth.hpp"

using namespace s2scast;

namespace {

// symmetric chain: self-transition p, remainder spread over the other regimes
TransitionMatrix symmetric_chain(double p) {
    TransitionMatrix m{};
    for (std::size_t i = 0; i < kNumRegimes; ++i)
        for (std::size_t j = 0; j < kNumRegimes; ++j) m[i][j] = i == j ? p : (1.0 - p) / 3.0;
    return m;
}

WorldConfig tiny_config(double self_p = 0.6) {
    WorldConfig cfg;
    cfg.transitions = symmetric_chain(self_p);
    cfg.n_lat = 2;
    cfg.n_lon = 4;
    cfg.field_noise_sigma = 0.0;
    return cfg;
}

}  // namespace

TEST_CASE("world configs are validated") {
    WorldConfig cfg = tiny_config();
    CHECK_NOTHROW(cfg.validate());

    WorldConfig bad = cfg;
    bad.transitions[2][0] += 0.1;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    CHECK_THROWS_AS(generate(bad, 1), ConfigError);

    bad = cfg;
    bad.transitions[0][1] = -0.1;
    bad.transitions[0][0] = 0.7 + 0.1 + 1.0 / 3.0 * 0.4 - 0.6;  // keep the sum at 1
    CHECK_THROWS_AS(bad.validate(), ConfigError);

    bad = cfg;
    bad.spv_ar_coeff = 1.0;
    CHECK_THROWS_AS(bad.validate(), ConfigError);

    bad = cfg;
    bad.spv_link.lag_weeks = -1;
    CHECK_THROWS_AS(bad.validate(), ConfigError);

    bad = cfg;
    bad.mjo_link.strength = -1.0;
    CHECK_THROWS_AS(bad.validate(), ConfigError);

    bad = cfg;
    bad.spv_link.boost_regime = 4;
    CHECK_THROWS_AS(bad.validate(), ConfigError);

    bad = cfg;
    bad.patterns = default_patterns(2, 4);
    bad.patterns[3] = bad.patterns[0];
    for (double& v : bad.patterns[3]) v *= 2.0;  // collinear with pattern 0
    CHECK_THROWS_AS(bad.validate(), ConfigError);

    bad = cfg;
    bad.patterns = {{1.0, 2.0}};  // wrong count
    CHECK_THROWS_AS(bad.validate(), ConfigError);

    CHECK_THROWS_AS(generate(cfg, 0), ArgumentError);
}

TEST_CASE("default patterns are orthogonal and unit RMS") {
    const auto pats = default_patterns(8, 32);
    REQUIRE(pats.size() == 4);
    for (std::size_t a = 0; a < 4; ++a) {
        double ss = 0.0;
        for (double v : pats[a]) ss += v * v;
        CHECK(std::sqrt(ss / 256.0) == Catch::Approx(1.0).margin(1e-12));
        for (std::size_t b = a + 1; b < 4; ++b) {
            double dot = 0.0;
            for (std::size_t g = 0; g < 256; ++g) dot += pats[a][g] * pats[b][g];
            CHECK(std::fabs(dot) < 1e-9);
        }
    }
}

TEST_CASE("generated worlds are deterministic in the seed") {
    WorldConfig cfg = tiny_config();
    cfg.spv_link = {0.5, 3, 1};
    cfg.field_noise_sigma = 0.2;
    cfg.seed = 77;
    const auto a = generate(cfg, 3);
    const auto b = generate(cfg, 3);
    CHECK(a.z500.values == b.z500.values);
    CHECK(a.u10.values == b.u10.values);
    CHECK(a.rmm1.values == b.rmm1.values);
    CHECK(a.truth.labels == b.truth.labels);
    REQUIRE(a.weekly.size() == b.weekly.size());
    for (std::size_t i = 0; i < a.weekly.size(); ++i) {
        CHECK(a.weekly[i].regime == b.weekly[i].regime);
        CHECK(a.weekly[i].spv == b.weekly[i].spv);
    }

    cfg.seed = 78;
    const auto c = generate(cfg, 3);
    CHECK(a.truth.labels != c.truth.labels);
}

TEST_CASE("world calendar and ledger line up") {
    WorldConfig cfg = tiny_config();
    cfg.first_winter_year = 1983;  // 1984 is a leap year
    const auto world = generate(cfg, 2);

    // winter 1983 runs Nov 10 1983 .. Mar 31 1984 (143 days, leap February)
    const std::int64_t first = to_epoch_days(CivilDate{1983, 11, 10});
    CHECK(world.truth.times.front() == first);
    CHECK(world.z500.times == world.truth.times);
    CHECK(world.truth.size() == 143 + 142);

    // 7-day blocks share one regime; the ledger's anchor is the block's last day
    const auto& ws = world.weekly;
    REQUIRE(ws.size() == 20 + 20);
    CHECK(ws[0].anchor_time == to_epoch_days(CivilDate{1983, 11, 16}));
    CHECK(ws[0].winter == 0);
    CHECK(ws[20].winter == 1);
    for (int w = 0; w < 20; ++w)
        for (int d = 0; d < 7; ++d)
            CHECK(world.truth.labels[static_cast<std::size_t>(7 * w + d)] == ws[static_cast<std::size_t>(w)].regime);

    // noise-free u10 reproduces the weekly vortex level on the 60N ring
    const auto spv = spv_index(world.u10);
    std::map<std::int64_t, double> spv_at;
    for (std::size_t i = 0; i < spv.size(); ++i) spv_at[spv.times[i]] = spv.values[i];
    for (const auto& w : ws)
        CHECK(spv_at.at(w.anchor_time) == Catch::Approx(w.spv).margin(1e-6));

    // the pipeline's trailing-mean MJO class matches the ledger
    const auto mjo = mjo_phase(world.rmm1, world.rmm2);
    std::map<std::int64_t, int> mjo_at;
    for (const auto& r : mjo) mjo_at[r.time] = r.phase_class;
    for (const auto& w : ws) CHECK(mjo_at.at(w.anchor_time) == w.mjo_class);
}

TEST_CASE("olr maps encode the RMM vector") {
    WorldConfig cfg = tiny_config();
    const auto world = generate(cfg, 1);
    const auto lats = default_lats(cfg.n_lat);
    const double tropics0 = std::exp(-std::pow((lats[0] - 25.0) / 15.0, 2.0));
    for (std::size_t t = 0; t < world.olr.n_time(); t += 13) {
        double proj = 0.0;
        for (std::size_t j = 0; j < cfg.n_lon; ++j)
            proj += world.olr.at(t, 0, j) *
                    std::cos(2.0 * M_PI * static_cast<double>(j) / static_cast<double>(cfg.n_lon));
        proj *= 2.0 / static_cast<double>(cfg.n_lon) / tropics0;
        CHECK(proj == Catch::Approx(world.rmm1.values[t]).margin(1e-5));
    }
}

TEST_CASE("unmodulated worlds match the stationary distribution") {
    WorldConfig cfg = tiny_config(0.6);
    cfg.seed = 5;
    const auto world = generate(cfg, 300);
    std::array<double, kNumRegimes> freq{};
    for (const auto& w : world.weekly) freq[static_cast<std::size_t>(w.regime)] += 1.0;
    const double total = static_cast<double>(world.weekly.size());
    const auto pi = stationary_distribution(cfg.transitions);
    for (std::size_t c = 0; c < kNumRegimes; ++c) {
        CHECK(pi[c] == Catch::Approx(0.25).margin(1e-9));  // symmetric chain
        CHECK(freq[c] / total == Catch::Approx(pi[c]).margin(0.02));
    }
}

TEST_CASE("noise-free fields let the regime pipeline recover the truth") {
    WorldConfig cfg = tiny_config(0.55);
    cfg.n_lat = 8;
    cfg.n_lon = 32;
    cfg.field_noise_sigma = 0.0;
    cfg.seed = 9;
    const auto world = generate(cfg, 8);

    // the standard chain: weekly smoothing, anomalies, winter subset, EOF, k-means
    const auto smoothed = rolling_mean(world.z500, 7);
    const auto anoms = anomalies(smoothed, ClimatologyPolicy{});
    const auto winter = select_times(anoms, in_extended_winter);
    const auto basis = fit_eof(winter, 6);
    const auto coeffs = project(winter, basis);
    auto model = fit_kmeans(coeffs, 4);
    const auto assigned = assign(coeffs, model);

    // recovery is scored at the weekly anchors, where the trailing mean sits
    // entirely inside one regime block; cluster ids are matched by majority
    std::map<std::int64_t, int> truth_at;
    for (const auto& w : world.weekly) truth_at[w.anchor_time] = w.regime;
    std::map<std::int64_t, int> got;
    for (std::size_t i = 0; i < assigned.size(); ++i) got[assigned.times[i]] = assigned.labels[i];

    std::array<std::array<int, 4>, 4> votes{};
    for (const auto& [t, r] : truth_at)
        votes[static_cast<std::size_t>(got.at(t))][static_cast<std::size_t>(r)] += 1;
    std::array<int, 4> remap{};
    std::array<bool, 4> used{};
    for (std::size_t c = 0; c < 4; ++c) {
        int best = -1, arg = -1;
        for (int r = 0; r < 4; ++r)
            if (votes[c][static_cast<std::size_t>(r)] > best) {
                best = votes[c][static_cast<std::size_t>(r)];
                arg = r;
            }
        remap[c] = arg;
        REQUIRE_FALSE(used[static_cast<std::size_t>(arg)]);  // majority map is a bijection
        used[static_cast<std::size_t>(arg)] = true;
    }

    std::size_t hits = 0, n = 0;
    for (const auto& [t, r] : truth_at) {
        ++n;
        if (remap[static_cast<std::size_t>(got.at(t))] == r) ++hits;
    }
    CHECK(hits == n);  // noiseless recovery is exact

    // regime-conditioned raw-field composites recover the planted patterns
    const auto pats = default_patterns(cfg.n_lat, cfg.n_lon);
    WorldConfig noisy = cfg;
    noisy.field_noise_sigma = 0.3;  // patterns are unit RMS
    const auto nw = generate(noisy, 8);
    std::array<std::vector<double>, 4> comp;
    std::array<std::size_t, 4> count{};
    for (auto& c : comp) c.assign(cfg.n_lat * cfg.n_lon, 0.0);
    for (std::size_t t = 0; t < nw.z500.n_time(); ++t) {
        const auto r = static_cast<std::size_t>(nw.truth.labels[t]);
        const float* slice = nw.z500.time_slice(t);
        for (std::size_t g = 0; g < comp[r].size(); ++g) comp[r][g] += slice[g];
        ++count[r];
    }
    for (std::size_t r = 0; r < 4; ++r) {
        REQUIRE(count[r] > 0);
        double dot = 0.0, nc = 0.0, np = 0.0;
        for (std::size_t g = 0; g < comp[r].size(); ++g) {
            const double c = comp[r][g] / static_cast<double>(count[r]);
            dot += c * pats[r][g];
            nc += c * c;
            np += pats[r][g] * pats[r][g];
        }
        CHECK(dot / std::sqrt(nc * np) >= 0.95);
    }
}

TEST_CASE("the planted vortex link boosts transitions at its lag") {
    WorldConfig cfg = tiny_config(0.55);
    cfg.spv_link = {0.5, 3, 1};  // weak vortex three weeks back favors NAO-
    cfg.spv_ar_coeff = 0.85;
    cfg.seed = 31;
    const auto world = generate(cfg, 2000);

    // count transitions grouped by previous regime and the lagged weak flag;
    // only weeks whose lag lookup stays inside the emitted ledger are counted
    std::array<std::array<std::array<double, 2>, kNumRegimes>, 2> into_boost{};
    std::array<std::array<double, kNumRegimes>, 2> totals{};
    for (std::size_t i = 1; i < world.weekly.size(); ++i) {
        const auto& cur = world.weekly[i];
        const auto& prev = world.weekly[i - 1];
        if (cur.winter != prev.winter || cur.week < cfg.spv_link.lag_weeks) continue;
        const auto& lagged = world.weekly[i - static_cast<std::size_t>(cfg.spv_link.lag_weeks)];
        const std::size_t weak = lagged.spv_weak ? 1 : 0;
        totals[weak][static_cast<std::size_t>(prev.regime)] += 1.0;
        if (cur.regime == cfg.spv_link.boost_regime)
            into_boost[weak][static_cast<std::size_t>(prev.regime)][0] += 1.0;
    }
    for (std::size_t weak = 0; weak < 2; ++weak)
        for (int r = 0; r < kNumRegimes; ++r) {
            const double n = totals[weak][static_cast<std::size_t>(r)];
            REQUIRE(n > 200);
            const double expect = modulated_row(cfg, r, weak == 1, false)[
                static_cast<std::size_t>(cfg.spv_link.boost_regime)];
            const double got = into_boost[weak][static_cast<std::size_t>(r)][0] / n;
            CHECK(got == Catch::Approx(expect).margin(0.02));
        }
}

TEST_CASE("driver-aware forecasts beat driver-blind ones by the computed margin") {
    WorldConfig cfg = tiny_config(0.5);
    cfg.spv_ar_coeff = 0.0;  // weak flags become independent draws
    cfg.spv_noise_sigma = 1.0;
    cfg.spv_weak_threshold = 0.0;
    // strong enough that a weak week flips the optimal call away from
    // persistence, which is what separates the informed predictor
    cfg.spv_link = {4.0, 3, 1};
    cfg.seed = 13;

    // closed-form rates: strictly separated at every lead the lag covers,
    // with a wide gap at lead 1 where the indicator decides the argmax
    std::array<BayesRates, 3> rates;
    for (int lead = 1; lead <= 3; ++lead) {
        rates[static_cast<std::size_t>(lead - 1)] = bayes_rates(cfg, lead);
        CHECK(rates[static_cast<std::size_t>(lead - 1)].aware >
              rates[static_cast<std::size_t>(lead - 1)].blind);
    }
    CHECK(rates[0].aware > rates[0].blind + 0.02);
    CHECK_THROWS_AS(bayes_rates(cfg, 4), ArgumentError);   // beyond the lag
    WorldConfig with_mjo = cfg;
    with_mjo.mjo_link.strength = 0.5;
    CHECK_THROWS_AS(bayes_rates(with_mjo, 1), ArgumentError);

    // empirical check: implement both predictors on generated data
    const auto world = generate(cfg, 1500);
    TransitionMatrix plain{}, boosted{};
    for (int r = 0; r < kNumRegimes; ++r) {
        plain[static_cast<std::size_t>(r)] = modulated_row(cfg, r, false, false);
        boosted[static_cast<std::size_t>(r)] = modulated_row(cfg, r, true, false);
    }
    const double q = 0.5;  // threshold at the process mean
    TransitionMatrix mixed{};
    for (std::size_t i = 0; i < kNumRegimes; ++i)
        for (std::size_t j = 0; j < kNumRegimes; ++j)
            mixed[i][j] = (1.0 - q) * plain[i][j] + q * boosted[i][j];

    for (int lead = 1; lead <= 3; ++lead) {
        double aware_hits = 0.0, blind_hits = 0.0, n = 0.0;
        const auto blind_k = matrix_power(mixed, lead);
        for (std::size_t i = 0; i + static_cast<std::size_t>(lead) < world.weekly.size(); ++i) {
            const auto& now = world.weekly[i];
            const auto& future = world.weekly[i + static_cast<std::size_t>(lead)];
            if (future.winter != now.winter) continue;
            if (now.week < cfg.spv_link.lag_weeks - lead) continue;  // flags inside ledger

            // informed: walk the actual weak flags for the steps ahead
            TransitionMatrix prod{};
            for (std::size_t d = 0; d < kNumRegimes; ++d) prod[d][d] = 1.0;
            for (int step = 1; step <= lead; ++step) {
                const auto& lagged =
                    world.weekly[i + static_cast<std::size_t>(step) -
                                 static_cast<std::size_t>(cfg.spv_link.lag_weeks)];
                prod = matrix_multiply(prod, lagged.spv_weak ? boosted : plain);
            }
            const auto& aware_row = prod[static_cast<std::size_t>(now.regime)];
            const auto& blind_row = blind_k[static_cast<std::size_t>(now.regime)];
            const int aware_pick = static_cast<int>(
                std::max_element(aware_row.begin(), aware_row.end()) - aware_row.begin());
            const int blind_pick = static_cast<int>(
                std::max_element(blind_row.begin(), blind_row.end()) - blind_row.begin());
            n += 1.0;
            if (aware_pick == future.regime) aware_hits += 1.0;
            if (blind_pick == future.regime) blind_hits += 1.0;
        }
        REQUIRE(n > 10000);
        const auto& want = rates[static_cast<std::size_t>(lead - 1)];
        CHECK(aware_hits / n == Catch::Approx(want.aware).margin(0.02));
        CHECK(blind_hits / n == Catch::Approx(want.blind).margin(0.02));
        // the strict empirical comparison is only meaningful where the
        // closed-form margin dwarfs sampling noise
        if (lead == 1) CHECK(aware_hits / n > blind_hits / n + 0.01);
    }
}

TEST_CASE("persistence accuracy follows the closed-form chain decay") {
    const double p = 0.6;
    WorldConfig cfg = tiny_config(p);
    cfg.seed = 21;
    const auto world = generate(cfg, 400);
    SplitSpec spec;
    spec.test_last_start_year = cfg.first_winter_year + 401;
    const auto data = build_windows(world.truth, spec);
    REQUIRE(data.samples.size() > 3000);

    std::array<double, kLeadWeeks> hits{};
    for (const auto& s : data.samples) {
        RegimeWindow window{};
        for (std::size_t t = 0; t < kInputWeeks; ++t)
            window[t][static_cast<std::size_t>(s.inputs[t])] = 1.0;
        const auto pred = persistence_forecast(window);
        for (std::size_t k = 0; k < kLeadWeeks; ++k)
            if (pred[k] == s.targets[k]) hits[k] += 1.0;
    }
    const double n = static_cast<double>(data.samples.size());
    for (std::size_t k = 0; k < kLeadWeeks; ++k) {
        const double decay = std::pow((4.0 * p - 1.0) / 3.0, static_cast<double>(k + 1));
        const double expect = 0.25 + 0.75 * decay;
        CHECK(hits[k] / n == Catch::Approx(expect).margin(0.02));
        // the closed form equals the k-step self-transition of the matrix
        const auto mk = matrix_power(cfg.transitions, static_cast<int>(k + 1));
        CHECK(mk[0][0] == Catch::Approx(expect).margin(1e-12));
    }
}
