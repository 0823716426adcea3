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
#include "s2scast/drivers.hpp"
#include "s2scast/gridstore.hpp"
#include "s2scast/preprocess.hpp"
#include "s2scast/regimes.hpp"
#include "s2scast/tensorgrad.hpp"

// Forecast architectures: a sequence-to-sequence LSTM over weekly regime
// windows, its index-augmented variant, a ViT encoder pretrained as a masked
// autoencoder feeding the same LSTM decoder, and the non-neural baselines
// (logistic regression, persistence, day-of-year climatology).
//
// All probabilistic models map a 6-week input window to a 6-week forecast of
// per-class probabilities over the four regimes.

namespace s2scast {

constexpr std::size_t kInputWeeks = 6;
constexpr std::size_t kLeadWeeks = 6;

using ForecastProbs = std::array<std::array<double, kNumRegimes>, kLeadWeeks>;
using RegimeWindow = std::array<std::array<double, kNumRegimes>, kInputWeeks>;

struct ForecastRecord {
    std::int64_t window_id = 0;
    ForecastProbs probs{};
    std::array<int, kLeadWeeks> targets{};
    std::uint64_t member_seed = 0;

    void validate() const {
        for (std::size_t w = 0; w < kLeadWeeks; ++w) {
            double s = 0.0;
            for (double p : probs[w]) {
                if (!(p >= 0.0)) throw ValidationError("forecast probabilities must be >= 0");
                s += p;
            }
            if (std::fabs(s - 1.0) > 1e-9)
                throw ValidationError("forecast week " + std::to_string(w + 1) +
                                      " probabilities sum to " + std::to_string(s));
            if (targets[w] < 0 || targets[w] >= static_cast<int>(kNumRegimes))
                throw ValidationError("forecast target out of range");
        }
    }
};

// ---------------------------------------------------------------------------
// Input validation helpers.
// ---------------------------------------------------------------------------

namespace detail {

inline void check_one_hot(const double* row, std::size_t width, const char* what) {
    int ones = 0;
    for (std::size_t i = 0; i < width; ++i) {
        if (row[i] == 1.0)
            ++ones;
        else if (row[i] != 0.0)
            throw ArgumentError(std::string(what) + ": entry " + std::to_string(row[i]) +
                                " is neither 0 nor 1");
    }
    if (ones != 1)
        throw ArgumentError(std::string(what) + ": expected exactly one active class, found " +
                            std::to_string(ones));
}

inline std::size_t one_hot_argmax(const double* row, std::size_t width) {
    for (std::size_t i = 0; i < width; ++i)
        if (row[i] == 1.0) return i;
    throw ArgumentError("row is not one-hot");
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Named parameter collections.
// ---------------------------------------------------------------------------

class ParamStore {
  public:
    Tensor add(const std::string& name, Shape shape, std::vector<double> init) {
        if (index_.count(name)) throw ArgumentError("duplicate parameter name '" + name + "'");
        Tensor t = Tensor::param(std::move(shape), std::move(init));
        index_[name] = entries_.size();
        entries_.emplace_back(name, t);
        return t;
    }

    Tensor find(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw ArgumentError("no parameter named '" + name + "'");
        return entries_[it->second].second;
    }

    std::vector<Tensor> tensors() const {
        std::vector<Tensor> out;
        out.reserve(entries_.size());
        for (const auto& [name, t] : entries_) out.push_back(t);
        return out;
    }

    const std::vector<std::pair<std::string, Tensor>>& entries() const { return entries_; }

    void append_to(Checkpoint& ck, const std::string& prefix = "") const {
        for (const auto& [name, t] : entries_) {
            const std::string key = prefix + name;
            if (ck.count(key)) throw ValidationError("duplicate checkpoint key '" + key + "'");
            ck[key] = CheckpointEntry{t.shape(), t.values()};
        }
    }

    void load_from(const Checkpoint& ck, const std::string& prefix = "") {
        for (auto& [name, t] : entries_) {
            auto it = ck.find(prefix + name);
            if (it == ck.end())
                throw ValidationError("checkpoint is missing parameter '" + prefix + name + "'");
            if (it->second.shape != t.shape())
                throw ShapeError("checkpoint parameter '" + prefix + name + "' has shape " +
                                 shape_str(it->second.shape) + ", model expects " +
                                 shape_str(t.shape()));
            t.values() = it->second.values;
        }
    }

    Checkpoint to_checkpoint() const {
        Checkpoint ck;
        append_to(ck);
        return ck;
    }

    std::uint64_t digest() const { return checkpoint_digest(to_checkpoint()); }

  private:
    std::vector<std::pair<std::string, Tensor>> entries_;
    std::unordered_map<std::string, std::size_t> index_;
};

namespace detail {

inline std::vector<double> uniform_vec(Rng& rng, std::size_t n, double limit) {
    std::vector<double> v(n);
    for (auto& x : v) x = (2.0 * rng.uniform() - 1.0) * limit;
    return v;
}

inline std::vector<double> glorot_vec(Rng& rng, std::size_t fan_in, std::size_t fan_out) {
    const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    return uniform_vec(rng, fan_in * fan_out, limit);
}

inline std::vector<double> gaussian_vec(Rng& rng, std::size_t n, double sd) {
    std::vector<double> v(n);
    for (auto& x : v) x = sd * rng.gaussian();
    return v;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Sequence-to-sequence LSTM core. One single-layer cell is unrolled over the
// six input weeks, then keeps stepping for six more weeks on a learned start
// token; each decoder hidden state feeds a shared (time-distributed) linear
// head. The head starts at zero, so an untrained model predicts the uniform
// distribution.
// ---------------------------------------------------------------------------

struct SeqLstmConfig {
    std::size_t input_dim = kNumRegimes;
    std::size_t hidden_dim = 256;
    double dropout = 0.165;
    std::uint64_t seed = 0;
};

class SeqLstm {
  public:
    explicit SeqLstm(SeqLstmConfig cfg) : cfg_(cfg) {
        if (cfg.input_dim == 0 || cfg.hidden_dim == 0)
            throw ConfigError("lstm: dimensions must be positive");
        if (cfg.dropout < 0.0 || cfg.dropout >= 1.0)
            throw ConfigError("lstm: dropout must be in [0, 1)");
        Rng rng(cfg.seed);
        const std::size_t H = cfg.hidden_dim, I = cfg.input_dim;
        const double k = 1.0 / std::sqrt(static_cast<double>(H));
        w_ih_ = store_.add("lstm.w_ih", {I, 4 * H}, detail::uniform_vec(rng, I * 4 * H, k));
        w_hh_ = store_.add("lstm.w_hh", {H, 4 * H}, detail::uniform_vec(rng, H * 4 * H, k));
        std::vector<double> bias = detail::uniform_vec(rng, 4 * H, k);
        for (std::size_t i = H; i < 2 * H; ++i) bias[i] += 1.0;  // open the forget gate
        bias_ = store_.add("lstm.bias", {4 * H}, std::move(bias));
        start_ = store_.add("lstm.start_token", {1, I}, detail::uniform_vec(rng, I, k));
        head_w_ = store_.add("head.weight", {H, kNumRegimes},
                             std::vector<double>(H * kNumRegimes, 0.0));
        head_b_ = store_.add("head.bias", {kNumRegimes},
                             std::vector<double>(kNumRegimes, 0.0));
    }

    const SeqLstmConfig& config() const { return cfg_; }
    ParamStore& store() { return store_; }
    const ParamStore& store() const { return store_; }
    std::vector<Tensor> params() const { return store_.tensors(); }

    // steps: kInputWeeks tensors of (batch x input_dim); returns kLeadWeeks
    // tensors of (batch x 4) row-stochastic probabilities
    std::vector<Tensor> forward_probs(const std::vector<Tensor>& steps, bool train,
                                      std::uint64_t step_id) const {
        if (steps.size() != kInputWeeks)
            throw ShapeError("lstm: expected " + std::to_string(kInputWeeks) + " input steps");
        const std::size_t B = steps[0].dim(0);
        for (const auto& s : steps)
            if (s.shape() != Shape{B, cfg_.input_dim})
                throw ShapeError("lstm: step shape " + shape_str(s.shape()) + ", expected (" +
                                 std::to_string(B) + ", " + std::to_string(cfg_.input_dim) + ")");
        const std::size_t H = cfg_.hidden_dim;
        Tensor h = Tensor::constant({B, H}, std::vector<double>(B * H, 0.0));
        Tensor c = h;
        for (std::size_t t = 0; t < kInputWeeks; ++t) cell_step(steps[t], h, c);
        Tensor start_b = expand(start_, 0, B);
        std::vector<Tensor> probs;
        probs.reserve(kLeadWeeks);
        for (std::size_t t = 0; t < kLeadWeeks; ++t) {
            cell_step(start_b, h, c);
            Tensor hd = dropout(h, cfg_.dropout, train, cfg_.seed, 100 + t, step_id);
            Tensor logits = add(matmul(hd, head_w_), head_b_);
            probs.push_back(softmax(logits, 1));
        }
        return probs;
    }

    // single-window eval path; row-major 6 x input_dim
    ForecastProbs forecast_rows(const std::vector<double>& window) const {
        if (window.size() != kInputWeeks * cfg_.input_dim)
            throw ShapeError("lstm: window must be 6 x " + std::to_string(cfg_.input_dim));
        std::vector<Tensor> steps;
        for (std::size_t t = 0; t < kInputWeeks; ++t)
            steps.push_back(Tensor::constant(
                {1, cfg_.input_dim},
                std::vector<double>(window.begin() + static_cast<std::ptrdiff_t>(t * cfg_.input_dim),
                                    window.begin() +
                                        static_cast<std::ptrdiff_t>((t + 1) * cfg_.input_dim))));
        const auto probs = forward_probs(steps, false, 0);
        ForecastProbs out{};
        for (std::size_t w = 0; w < kLeadWeeks; ++w)
            for (std::size_t k = 0; k < kNumRegimes; ++k) out[w][k] = probs[w].values()[k];
        return out;
    }

    Checkpoint to_checkpoint() const { return store_.to_checkpoint(); }
    void load(const Checkpoint& ck) { store_.load_from(ck); }
    std::uint64_t digest() const { return store_.digest(); }

  private:
    void cell_step(const Tensor& x, Tensor& h, Tensor& c) const {
        const std::size_t H = cfg_.hidden_dim;
        Tensor z = add(add(matmul(x, w_ih_), matmul(h, w_hh_)), bias_);
        Tensor i = sigmoid(slice(z, 1, 0, H));
        Tensor f = sigmoid(slice(z, 1, H, H));
        Tensor g = tanh(slice(z, 1, 2 * H, H));
        Tensor o = sigmoid(slice(z, 1, 3 * H, H));
        c = add(mul(f, c), mul(i, g));
        h = mul(o, tanh(c));
    }

    SeqLstmConfig cfg_;
    ParamStore store_;
    Tensor w_ih_, w_hh_, bias_, start_, head_w_, head_b_;
};

// ---------------------------------------------------------------------------
// Regime-only LSTM: input is the one-hot regime window.
// ---------------------------------------------------------------------------

class RegimeLstm {
  public:
    explicit RegimeLstm(SeqLstmConfig cfg = {}) : core_((cfg.input_dim = kNumRegimes, cfg)) {}

    ForecastProbs forecast(const RegimeWindow& window) const {
        std::vector<double> flat;
        flat.reserve(kInputWeeks * kNumRegimes);
        for (const auto& row : window) {
            detail::check_one_hot(row.data(), kNumRegimes, "regime window row");
            flat.insert(flat.end(), row.begin(), row.end());
        }
        return core_.forecast_rows(flat);
    }

    SeqLstm& core() { return core_; }
    const SeqLstm& core() const { return core_; }

  private:
    SeqLstm core_;
};

// ---------------------------------------------------------------------------
// Index-augmented LSTM. Each weekly input row is
//   [ 4 regime one-hot | 1 standardized SPV | 9 MJO class one-hot ]
// for a width of 4 + 1 + 9 = 14 features.
// ---------------------------------------------------------------------------

constexpr std::size_t kIndexFeatureWidth = kNumRegimes + 1 + kNumMjoClasses;  // 14

inline void validate_index_row(const double* row) {
    detail::check_one_hot(row, kNumRegimes, "index window regime block");
    if (!std::isfinite(row[kNumRegimes]))
        throw ArgumentError("index window: SPV value is not finite");
    detail::check_one_hot(row + kNumRegimes + 1, kNumMjoClasses, "index window MJO block");
}

class IndexLstm {
  public:
    explicit IndexLstm(SeqLstmConfig cfg = {}) : core_((cfg.input_dim = kIndexFeatureWidth, cfg)) {}

    // window: 6 rows of kIndexFeatureWidth features, row-major
    ForecastProbs forecast(const std::vector<double>& window) const {
        if (window.size() != kInputWeeks * kIndexFeatureWidth)
            throw ShapeError("index window must be 6 x " +
                             std::to_string(kIndexFeatureWidth) + ", got " +
                             std::to_string(window.size()) + " values");
        for (std::size_t t = 0; t < kInputWeeks; ++t)
            validate_index_row(window.data() + t * kIndexFeatureWidth);
        return core_.forecast_rows(window);
    }

    SeqLstm& core() { return core_; }
    const SeqLstm& core() const { return core_; }

  private:
    SeqLstm core_;
};

inline std::vector<double> make_index_row(const std::array<double, kNumRegimes>& regime_one_hot,
                                          double spv_standardized, int mjo_class) {
    if (mjo_class < 0 || mjo_class >= kNumMjoClasses)
        throw ArgumentError("make_index_row: MJO class out of range");
    std::vector<double> row(kIndexFeatureWidth, 0.0);
    std::copy(regime_one_hot.begin(), regime_one_hot.end(), row.begin());
    row[kNumRegimes] = spv_standardized;
    row[kNumRegimes + 1 + static_cast<std::size_t>(mjo_class)] = 1.0;
    return row;
}

// ---------------------------------------------------------------------------
// Baselines.
// ---------------------------------------------------------------------------

// the last observed regime, repeated for every lead week
inline std::array<int, kLeadWeeks> persistence_forecast(const RegimeWindow& window) {
    for (const auto& row : window)
        detail::check_one_hot(row.data(), kNumRegimes, "regime window row");
    const int last = static_cast<int>(
        detail::one_hot_argmax(window[kInputWeeks - 1].data(), kNumRegimes));
    std::array<int, kLeadWeeks> out;
    out.fill(last);
    return out;
}

// modal regime per day-of-year over a reference (training) regime series;
// ties resolve to the lowest class id
class ClimatologyForecaster {
  public:
    explicit ClimatologyForecaster(const RegimeSeries& reference) {
        reference.validate();
        if (reference.times.empty()) throw ArgumentError("climatology: empty reference series");
        for (std::size_t i = 0; i < reference.times.size(); ++i) {
            const CivilDate d = civil_from_days(reference.times[i]);
            counts_[detail::doy_key(d.month, d.day)][reference.labels[i]] += 1;
        }
    }

    int modal_label(std::int64_t day) const {
        const CivilDate d = civil_from_days(day);
        const auto it = counts_.find(detail::doy_key(d.month, d.day));
        if (it == counts_.end())
            throw CoverageError("climatology: no reference data for " + format_iso_date(day));
        int best = 0;
        for (int k = 1; k < static_cast<int>(kNumRegimes); ++k)
            if (it->second[k] > it->second[best]) best = k;
        return best;
    }

    // labels for the six weekly targets after the anchor day
    std::array<int, kLeadWeeks> forecast(std::int64_t anchor_day) const {
        std::array<int, kLeadWeeks> out{};
        for (std::size_t w = 0; w < kLeadWeeks; ++w)
            out[w] = modal_label(anchor_day + 7 * static_cast<std::int64_t>(w + 1));
        return out;
    }

  private:
    std::map<int, std::array<int, kNumRegimes>> counts_;
};

// ---------------------------------------------------------------------------
// ViT encoder, pretrained as a masked autoencoder.
// ---------------------------------------------------------------------------

struct VitConfig {
    std::size_t patch_h = 2, patch_w = 16;
    std::size_t depth = 6;
    std::size_t dim = 512;
    std::size_t heads = 16;
    std::size_t mlp_dim = 2048;
    std::size_t emb_dim = 32;  // per-map embedding width; also the MAE decoder width
    double dropout = 0.1;
    double embedding_dropout = 0.1;
};

// full-size configuration (the struct defaults)
inline VitConfig vit_full_profile() { return VitConfig{}; }

// small encoder for tests and synthetic-data runs
inline VitConfig vit_desk_profile() {
    VitConfig c;
    c.patch_h = 2;
    c.patch_w = 8;
    c.depth = 2;
    c.dim = 64;
    c.heads = 4;
    c.mlp_dim = 128;
    c.emb_dim = 16;
    return c;
}

// (H x W) row-major map -> (P x ph*pw) patch matrix; patches ordered row-major
// over the patch grid, pixels row-major within each patch
template <typename Scalar>
std::vector<double> patchify(const Scalar* map, std::size_t H, std::size_t W, std::size_t ph,
                             std::size_t pw) {
    if (ph == 0 || pw == 0 || H % ph != 0 || W % pw != 0)
        throw ShapeError("patchify: " + std::to_string(H) + "x" + std::to_string(W) +
                         " grid is not divisible into " + std::to_string(ph) + "x" +
                         std::to_string(pw) + " patches");
    const std::size_t rows = H / ph, cols = W / pw, pd = ph * pw;
    std::vector<double> out(rows * cols * pd);
    for (std::size_t pr = 0; pr < rows; ++pr)
        for (std::size_t pc = 0; pc < cols; ++pc) {
            double* dst = out.data() + (pr * cols + pc) * pd;
            for (std::size_t y = 0; y < ph; ++y)
                for (std::size_t x = 0; x < pw; ++x)
                    dst[y * pw + x] =
                        static_cast<double>(map[(pr * ph + y) * W + (pc * pw + x)]);
        }
    return out;
}

inline std::vector<double> patchify_time_slice(const GriddedField& field, std::size_t t,
                                               std::size_t ph, std::size_t pw) {
    return patchify(field.time_slice(t), field.n_lat(), field.n_lon(), ph, pw);
}

namespace detail {

// one pre-norm transformer block's parameters
struct VitBlockParams {
    Tensor ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo;
    Tensor ln2_g, ln2_b, w1, b1, w2, b2;
};

inline VitBlockParams add_vit_block(ParamStore& store, const std::string& prefix,
                                    std::size_t dim, std::size_t mlp_dim, Rng& rng) {
    VitBlockParams p;
    p.ln1_g = store.add(prefix + ".ln1.g", {dim}, std::vector<double>(dim, 1.0));
    p.ln1_b = store.add(prefix + ".ln1.b", {dim}, std::vector<double>(dim, 0.0));
    p.wq = store.add(prefix + ".attn.wq", {dim, dim}, glorot_vec(rng, dim, dim));
    p.bq = store.add(prefix + ".attn.bq", {dim}, std::vector<double>(dim, 0.0));
    p.wk = store.add(prefix + ".attn.wk", {dim, dim}, glorot_vec(rng, dim, dim));
    p.bk = store.add(prefix + ".attn.bk", {dim}, std::vector<double>(dim, 0.0));
    p.wv = store.add(prefix + ".attn.wv", {dim, dim}, glorot_vec(rng, dim, dim));
    p.bv = store.add(prefix + ".attn.bv", {dim}, std::vector<double>(dim, 0.0));
    p.wo = store.add(prefix + ".attn.wo", {dim, dim}, glorot_vec(rng, dim, dim));
    p.bo = store.add(prefix + ".attn.bo", {dim}, std::vector<double>(dim, 0.0));
    p.ln2_g = store.add(prefix + ".ln2.g", {dim}, std::vector<double>(dim, 1.0));
    p.ln2_b = store.add(prefix + ".ln2.b", {dim}, std::vector<double>(dim, 0.0));
    p.w1 = store.add(prefix + ".mlp.w1", {dim, mlp_dim}, glorot_vec(rng, dim, mlp_dim));
    p.b1 = store.add(prefix + ".mlp.b1", {mlp_dim}, std::vector<double>(mlp_dim, 0.0));
    p.w2 = store.add(prefix + ".mlp.w2", {mlp_dim, dim}, glorot_vec(rng, mlp_dim, dim));
    p.b2 = store.add(prefix + ".mlp.b2", {dim}, std::vector<double>(dim, 0.0));
    return p;
}

inline Tensor run_vit_block(const VitBlockParams& p, Tensor x, std::size_t heads,
                            double drop_rate, bool train, std::uint64_t seed,
                            std::uint64_t layer_base, std::uint64_t step_id) {
    Tensor n1 = layer_norm(x, p.ln1_g, p.ln1_b);
    Tensor q = add(matmul(n1, p.wq), p.bq);
    Tensor k = add(matmul(n1, p.wk), p.bk);
    Tensor v = add(matmul(n1, p.wv), p.bv);
    Tensor a = add(matmul(scaled_dot_product_attention(q, k, v, heads), p.wo), p.bo);
    a = dropout(a, drop_rate, train, seed, layer_base, step_id);
    x = add(x, a);
    Tensor n2 = layer_norm(x, p.ln2_g, p.ln2_b);
    Tensor m = add(matmul(gelu(add(matmul(n2, p.w1), p.b1)), p.w2), p.b2);
    m = dropout(m, drop_rate, train, seed, layer_base + 1, step_id);
    return add(x, m);
}

}  // namespace detail

class VitEncoder {
  public:
    VitEncoder(VitConfig cfg, std::size_t n_lat, std::size_t n_lon, std::uint64_t seed)
        : cfg_(cfg), n_lat_(n_lat), n_lon_(n_lon), seed_(seed) {
        if (cfg.heads == 0 || cfg.dim % cfg.heads != 0)
            throw ConfigError("vit: dim must be divisible by heads");
        if (n_lat % cfg.patch_h != 0 || n_lon % cfg.patch_w != 0)
            throw ShapeError("vit: " + std::to_string(n_lat) + "x" + std::to_string(n_lon) +
                             " grid is not divisible into " + std::to_string(cfg.patch_h) + "x" +
                             std::to_string(cfg.patch_w) + " patches");
        n_patches_ = (n_lat / cfg.patch_h) * (n_lon / cfg.patch_w);
        patch_dim_ = cfg.patch_h * cfg.patch_w;

        Rng rng(seed);
        patch_w_ = store_.add("enc.patch.w", {patch_dim_, cfg.dim},
                              detail::glorot_vec(rng, patch_dim_, cfg.dim));
        patch_b_ = store_.add("enc.patch.b", {cfg.dim}, std::vector<double>(cfg.dim, 0.0));
        pos_ = store_.add("enc.pos", {n_patches_, cfg.dim},
                          detail::gaussian_vec(rng, n_patches_ * cfg.dim, 0.02));
        for (std::size_t d = 0; d < cfg.depth; ++d)
            blocks_.push_back(detail::add_vit_block(store_, "enc.blk" + std::to_string(d),
                                                    cfg.dim, cfg.mlp_dim, rng));
        ln_g_ = store_.add("enc.ln.g", {cfg.dim}, std::vector<double>(cfg.dim, 1.0));
        ln_b_ = store_.add("enc.ln.b", {cfg.dim}, std::vector<double>(cfg.dim, 0.0));
        to_latent_w_ = store_.add("enc.latent.w", {cfg.dim, cfg.emb_dim},
                                  detail::glorot_vec(rng, cfg.dim, cfg.emb_dim));
        to_latent_b_ = store_.add("enc.latent.b", {cfg.emb_dim},
                                  std::vector<double>(cfg.emb_dim, 0.0));
    }

    const VitConfig& config() const { return cfg_; }
    std::size_t n_patches() const { return n_patches_; }
    std::size_t patch_dim() const { return patch_dim_; }
    std::size_t n_lat() const { return n_lat_; }
    std::size_t n_lon() const { return n_lon_; }

    // run the transformer over a subset of patch rows; returns (rows x dim)
    Tensor encode(const std::vector<double>& patch_matrix, const std::vector<std::size_t>& rows,
                  bool train, std::uint64_t step_id) const {
        if (patch_matrix.size() != n_patches_ * patch_dim_)
            throw ShapeError("vit: patch matrix has " + std::to_string(patch_matrix.size()) +
                             " values, expected " + std::to_string(n_patches_ * patch_dim_));
        std::vector<double> sel(rows.size() * patch_dim_);
        for (std::size_t m = 0; m < rows.size(); ++m) {
            if (rows[m] >= n_patches_) throw ArgumentError("vit: patch row out of range");
            std::copy(patch_matrix.begin() + static_cast<std::ptrdiff_t>(rows[m] * patch_dim_),
                      patch_matrix.begin() + static_cast<std::ptrdiff_t>((rows[m] + 1) * patch_dim_),
                      sel.begin() + static_cast<std::ptrdiff_t>(m * patch_dim_));
        }
        Tensor x = add(matmul(Tensor::constant({rows.size(), patch_dim_}, std::move(sel)),
                              patch_w_),
                       patch_b_);
        x = add(x, select_rows(pos_, rows));
        x = dropout(x, cfg_.embedding_dropout, train, seed_, 9, step_id);
        for (std::size_t d = 0; d < blocks_.size(); ++d)
            x = detail::run_vit_block(blocks_[d], x, cfg_.heads, cfg_.dropout, train, seed_,
                                      10 + 2 * d, step_id);
        return layer_norm(x, ln_g_, ln_b_);
    }

    // encoder output projected into the latent (decoder) space
    Tensor project_latent(const Tensor& encoded) const {
        return add(matmul(encoded, to_latent_w_), to_latent_b_);
    }

    // eval-mode per-map embedding: mean latent over all patches
    std::vector<double> embed_map(const std::vector<double>& map_values) const {
        if (map_values.size() != n_lat_ * n_lon_)
            throw ShapeError("vit: map has " + std::to_string(map_values.size()) +
                             " values, expected " + std::to_string(n_lat_ * n_lon_));
        const auto patches = patchify(map_values.data(), n_lat_, n_lon_, cfg_.patch_h,
                                      cfg_.patch_w);
        std::vector<std::size_t> all(n_patches_);
        for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
        Tensor lat = project_latent(encode(patches, all, false, 0));
        Tensor mean = reduce_mean(lat, 0);
        return mean.values();
    }

    ParamStore& store() { return store_; }
    const ParamStore& store() const { return store_; }
    std::uint64_t digest() const { return store_.digest(); }

  private:
    VitConfig cfg_;
    std::size_t n_lat_, n_lon_, n_patches_ = 0, patch_dim_ = 0;
    std::uint64_t seed_;
    ParamStore store_;
    Tensor patch_w_, patch_b_, pos_, ln_g_, ln_b_, to_latent_w_, to_latent_b_;
    std::vector<detail::VitBlockParams> blocks_;
};

// ---------------------------------------------------------------------------
// Masked autoencoder around the ViT encoder. The decoder works at the latent
// width (emb_dim), which is why the per-map embedding and the decoder share
// their dimension.
// ---------------------------------------------------------------------------

struct MaeConfig {
    VitConfig encoder;
    std::size_t decoder_depth = 6;
    std::size_t decoder_heads = 4;
    std::size_t decoder_mlp = 128;
    double masking_ratio = 0.75;
};

inline MaeConfig mae_full_profile() { return MaeConfig{}; }

inline MaeConfig mae_desk_profile() {
    MaeConfig c;
    c.encoder = vit_desk_profile();
    c.decoder_depth = 2;
    c.decoder_heads = 4;
    c.decoder_mlp = 64;
    return c;
}

// split patch indices into (masked, visible); n_masked = round(ratio * P).
// ratio 0 degenerates to plain autoencoding: everything visible, loss on all
// patches
struct MaskSplit {
    std::vector<std::size_t> masked;
    std::vector<std::size_t> visible;
    std::vector<std::size_t> loss_rows;
};

inline MaskSplit split_patches(std::size_t n_patches, double ratio, Rng& rng) {
    if (ratio < 0.0 || ratio >= 1.0)
        throw ArgumentError("masking ratio must be in [0, 1)");
    const std::size_t n_masked =
        static_cast<std::size_t>(std::llround(ratio * static_cast<double>(n_patches)));
    std::vector<std::size_t> perm(n_patches);
    for (std::size_t i = 0; i < n_patches; ++i) perm[i] = i;
    for (std::size_t i = n_patches; i > 1; --i) {
        const std::size_t j = rng.uniform_index(i);
        std::swap(perm[i - 1], perm[j]);
    }
    MaskSplit out;
    out.masked.assign(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(n_masked));
    out.visible.assign(perm.begin() + static_cast<std::ptrdiff_t>(n_masked), perm.end());
    std::sort(out.masked.begin(), out.masked.end());
    std::sort(out.visible.begin(), out.visible.end());
    out.loss_rows = out.masked.empty() ? out.visible : out.masked;
    return out;
}

class MaeModel {
  public:
    MaeModel(MaeConfig cfg, std::size_t n_lat, std::size_t n_lon, std::uint64_t seed)
        : cfg_(cfg), seed_(seed), encoder_(cfg.encoder, n_lat, n_lon, seed) {
        const std::size_t D = cfg.encoder.emb_dim;
        if (cfg.decoder_heads == 0 || D % cfg.decoder_heads != 0)
            throw ConfigError("mae: decoder width must be divisible by decoder heads");
        Rng rng(mix_u64(seed, 0x6d61652d64656332ULL));
        const std::size_t P = encoder_.n_patches(), pd = encoder_.patch_dim();
        mask_token_ = dec_store_.add("dec.mask_token", {1, D}, detail::gaussian_vec(rng, D, 0.02));
        dec_pos_ = dec_store_.add("dec.pos", {P, D}, detail::gaussian_vec(rng, P * D, 0.02));
        for (std::size_t d = 0; d < cfg.decoder_depth; ++d)
            dec_blocks_.push_back(detail::add_vit_block(dec_store_, "dec.blk" + std::to_string(d),
                                                        D, cfg.decoder_mlp, rng));
        dec_ln_g_ = dec_store_.add("dec.ln.g", {D}, std::vector<double>(D, 1.0));
        dec_ln_b_ = dec_store_.add("dec.ln.b", {D}, std::vector<double>(D, 0.0));
        head_w_ = dec_store_.add("dec.head.w", {D, pd}, detail::glorot_vec(rng, D, pd));
        head_b_ = dec_store_.add("dec.head.b", {pd}, std::vector<double>(pd, 0.0));
    }

    const MaeConfig& config() const { return cfg_; }
    VitEncoder& encoder() { return encoder_; }
    const VitEncoder& encoder() const { return encoder_; }

    // full-map reconstruction as a graph tensor (P x patch_dim)
    Tensor reconstruct(const std::vector<double>& patch_matrix, const MaskSplit& split,
                       bool train, std::uint64_t step_id) const {
        const std::size_t P = encoder_.n_patches();
        const std::size_t D = cfg_.encoder.emb_dim;
        Tensor enc = encoder_.encode(patch_matrix, split.visible, train, step_id);
        Tensor lat = encoder_.project_latent(enc);  // (V x D)
        Tensor canvas = scatter_rows(lat, split.visible, P);
        if (!split.masked.empty()) {
            std::vector<double> indicator(P * D, 0.0);
            for (std::size_t r : split.masked)
                std::fill(indicator.begin() + static_cast<std::ptrdiff_t>(r * D),
                          indicator.begin() + static_cast<std::ptrdiff_t>((r + 1) * D), 1.0);
            canvas = add(canvas, mul(expand(mask_token_, 0, P),
                                     Tensor::constant({P, D}, std::move(indicator))));
        }
        Tensor x = add(canvas, dec_pos_);
        for (std::size_t d = 0; d < dec_blocks_.size(); ++d)
            x = detail::run_vit_block(dec_blocks_[d], x, cfg_.decoder_heads,
                                      cfg_.encoder.dropout, train, seed_, 50 + 2 * d, step_id);
        x = layer_norm(x, dec_ln_g_, dec_ln_b_);
        return add(matmul(x, head_w_), head_b_);
    }

    // mean squared error over the loss rows only (masked patches, or all
    // patches when nothing is masked)
    Tensor reconstruction_loss(const std::vector<double>& patch_matrix,
                               const std::vector<double>& target_matrix, const MaskSplit& split,
                               bool train, std::uint64_t step_id) const {
        const std::size_t P = encoder_.n_patches(), pd = encoder_.patch_dim();
        if (target_matrix.size() != P * pd)
            throw ShapeError("mae: target matrix size mismatch");
        Tensor recon = reconstruct(patch_matrix, split, train, step_id);
        Tensor diff = sub(recon, Tensor::constant({P, pd}, target_matrix));
        return reduce_mean_all(select_rows(mul(diff, diff), split.loss_rows));
    }

    Tensor reconstruction_loss(const std::vector<double>& patch_matrix, const MaskSplit& split,
                               bool train, std::uint64_t step_id) const {
        return reconstruction_loss(patch_matrix, patch_matrix, split, train, step_id);
    }

    std::vector<Tensor> params() const {
        auto out = encoder_.store().tensors();
        const auto dec = dec_store_.tensors();
        out.insert(out.end(), dec.begin(), dec.end());
        return out;
    }

    Checkpoint to_checkpoint() const {
        Checkpoint ck = encoder_.store().to_checkpoint();
        dec_store_.append_to(ck);
        return ck;
    }

    void load(const Checkpoint& ck) {
        encoder_.store().load_from(ck);
        dec_store_.load_from(ck);
    }

  private:
    MaeConfig cfg_;
    std::uint64_t seed_;
    VitEncoder encoder_;
    ParamStore dec_store_;
    Tensor mask_token_, dec_pos_, dec_ln_g_, dec_ln_b_, head_w_, head_b_;
    std::vector<detail::VitBlockParams> dec_blocks_;
};

struct MaePretrainConfig {
    MaeConfig model;
    int epochs = 20;
    std::size_t batch = 8;
    double lr = 1e-3;
    double weight_decay = 0.0;
    double clip_norm = 0.0;  // 0 disables clipping
    double val_fraction = 0.2;
    std::uint64_t seed = 0;
};

struct MaeHistory {
    std::vector<double> train_loss;  // per epoch
    std::vector<double> val_error;   // per epoch; empty when no val split
};

// trains an MAE on the time steps of an anomaly field; the returned model's
// encoder is what downstream forecasters consume
inline MaeModel mae_pretrain(const GriddedField& field, const MaePretrainConfig& cfg,
                             MaeHistory* history = nullptr) {
    field.validate();
    if (cfg.epochs < 1) throw ConfigError("mae_pretrain: epochs must be >= 1");
    if (cfg.batch < 1) throw ConfigError("mae_pretrain: batch must be >= 1");
    MaeModel model(cfg.model, field.n_lat(), field.n_lon(), cfg.seed);
    const std::size_t T = field.n_time();
    if (T < 2) throw ArgumentError("mae_pretrain: need at least 2 time steps");

    std::vector<std::vector<double>> patches(T);
    for (std::size_t t = 0; t < T; ++t)
        patches[t] = patchify_time_slice(field, t, cfg.model.encoder.patch_h,
                                         cfg.model.encoder.patch_w);

    const std::size_t n_val =
        static_cast<std::size_t>(std::llround(cfg.val_fraction * static_cast<double>(T)));
    const std::size_t n_train = T - n_val;
    if (n_train == 0) throw ConfigError("mae_pretrain: validation fraction leaves no train data");

    AdamConfig acfg;
    acfg.lr = cfg.lr;
    acfg.weight_decay = cfg.weight_decay;
    auto params = model.params();
    Adam opt(params, acfg);

    const std::size_t P = model.encoder().n_patches();
    if (history) {
        history->train_loss.clear();
        history->val_error.clear();
    }

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::vector<std::size_t> order(n_train);
        for (std::size_t i = 0; i < n_train; ++i) order[i] = i;
        Rng shuffle_rng(counter_hash(cfg.seed, 2, static_cast<std::uint64_t>(epoch), 0));
        for (std::size_t i = n_train; i > 1; --i)
            std::swap(order[i - 1], order[shuffle_rng.uniform_index(i)]);

        double epoch_loss = 0.0;
        std::size_t n_batches = 0;
        for (std::size_t b0 = 0; b0 < n_train; b0 += cfg.batch) {
            const std::size_t bn = std::min(cfg.batch, n_train - b0);
            Tensor total;
            for (std::size_t k = 0; k < bn; ++k) {
                const std::size_t idx = order[b0 + k];
                Rng mask_rng(counter_hash(cfg.seed, 3, static_cast<std::uint64_t>(epoch), idx));
                const MaskSplit split = split_patches(P, cfg.model.masking_ratio, mask_rng);
                const std::uint64_t sid =
                    static_cast<std::uint64_t>(epoch) * T + idx;
                Tensor loss = model.reconstruction_loss(patches[idx], split, true, sid);
                total = total.defined() ? add(total, loss) : loss;
            }
            Tensor mean_loss = scale(total, 1.0 / static_cast<double>(bn));
            if (!std::isfinite(mean_loss.values()[0]))
                throw NumericError("mae_pretrain: loss is not finite at epoch " +
                                   std::to_string(epoch));
            opt.zero_grad();
            mean_loss.backward();
            if (cfg.clip_norm > 0.0) clip_global_norm(params, cfg.clip_norm);
            opt.step();
            epoch_loss += mean_loss.values()[0];
            ++n_batches;
        }

        if (history) {
            history->train_loss.push_back(epoch_loss / static_cast<double>(n_batches));
            if (n_val > 0) {
                double val = 0.0;
                for (std::size_t t = n_train; t < T; ++t) {
                    Rng mask_rng(counter_hash(cfg.seed, 4, t, 0));
                    const MaskSplit split = split_patches(P, cfg.model.masking_ratio, mask_rng);
                    val += model.reconstruction_loss(patches[t], split, false, 0).values()[0];
                }
                history->val_error.push_back(val / static_cast<double>(n_val));
            }
        }
    }
    return model;
}

// ---------------------------------------------------------------------------
// ViT-LSTM forecaster. Per week, the two frozen encoders turn the u10 and olr
// anomaly maps into latent embeddings; each embedding goes through batch
// norm, dropout, then per-vector min-max normalization; the concatenation
// with the regime one-hot is standardized with training-split statistics,
// batch-normed, dropped out, and fed to the sequence LSTM.
// ---------------------------------------------------------------------------

struct VitLstmConfig {
    std::size_t hidden_dim = 256;
    double dropout = 0.165;
    std::uint64_t seed = 0;
    bool train_encoders = false;
    bool allow_unfrozen_encoders = false;
    double minmax_eps = 1e-8;
};

class VitLstm {
  public:
    VitLstm(VitLstmConfig cfg, VitEncoder u10_encoder, VitEncoder olr_encoder)
        : cfg_(cfg),
          u10_enc_(std::move(u10_encoder)),
          olr_enc_(std::move(olr_encoder)),
          core_(make_core_config(cfg, u10_enc_, olr_enc_)) {
        if (cfg.train_encoders && !cfg.allow_unfrozen_encoders)
            throw ConfigError(
                "vit_lstm: encoders are frozen by design; set allow_unfrozen_encoders to "
                "override");
        const std::size_t d = emb_dim();
        const std::size_t F = feature_width();
        auto ones = [](std::size_t n) { return std::vector<double>(n, 1.0); };
        auto zeros = [](std::size_t n) { return std::vector<double>(n, 0.0); };
        bn_u10_g_ = store_.add("feat.bn_u10.g", {d}, ones(d));
        bn_u10_b_ = store_.add("feat.bn_u10.b", {d}, zeros(d));
        bn_olr_g_ = store_.add("feat.bn_olr.g", {d}, ones(d));
        bn_olr_b_ = store_.add("feat.bn_olr.b", {d}, zeros(d));
        bn_comb_g_ = store_.add("feat.bn_comb.g", {F}, ones(F));
        bn_comb_b_ = store_.add("feat.bn_comb.b", {F}, zeros(F));
        mu_.assign(F, 0.0);
        sigma_.assign(F, 1.0);
    }

    std::size_t emb_dim() const { return u10_enc_.config().emb_dim; }
    std::size_t feature_width() const { return kNumRegimes + 2 * emb_dim(); }
    const VitEncoder& u10_encoder() const { return u10_enc_; }
    const VitEncoder& olr_encoder() const { return olr_enc_; }
    SeqLstm& core() { return core_; }
    const SeqLstm& core() const { return core_; }

    std::uint64_t encoder_digest() const {
        return mix_u64(u10_enc_.digest(), olr_enc_.digest());
    }

    std::vector<double> embed_u10(const std::vector<double>& map) const {
        return u10_enc_.embed_map(map);
    }
    std::vector<double> embed_olr(const std::vector<double>& map) const {
        return olr_enc_.embed_map(map);
    }

    // raw feature row: [ one-hot(4) | u10 embedding | olr embedding ]
    std::vector<double> make_feature_row(const std::array<double, kNumRegimes>& one_hot,
                                         const std::vector<double>& u10_emb,
                                         const std::vector<double>& olr_emb) const {
        const std::size_t d = emb_dim();
        if (u10_emb.size() != d || olr_emb.size() != d)
            throw ShapeError("vit_lstm: embedding width mismatch");
        std::vector<double> row;
        row.reserve(feature_width());
        row.insert(row.end(), one_hot.begin(), one_hot.end());
        row.insert(row.end(), u10_emb.begin(), u10_emb.end());
        row.insert(row.end(), olr_emb.begin(), olr_emb.end());
        return row;
    }

    // per-dimension standardization statistics over training-split rows
    void fit_feature_stats(const std::vector<std::vector<double>>& rows) {
        const std::size_t F = feature_width();
        if (rows.empty()) throw ArgumentError("vit_lstm: no rows for feature statistics");
        mu_.assign(F, 0.0);
        sigma_.assign(F, 0.0);
        for (const auto& r : rows) {
            if (r.size() != F) throw ShapeError("vit_lstm: feature row width mismatch");
            for (std::size_t f = 0; f < F; ++f) mu_[f] += r[f];
        }
        for (std::size_t f = 0; f < F; ++f) mu_[f] /= static_cast<double>(rows.size());
        for (const auto& r : rows)
            for (std::size_t f = 0; f < F; ++f) {
                const double d = r[f] - mu_[f];
                sigma_[f] += d * d;
            }
        for (std::size_t f = 0; f < F; ++f) {
            sigma_[f] = std::sqrt(sigma_[f] / static_cast<double>(rows.size()));
            if (sigma_[f] < 1e-12) sigma_[f] = 1.0;
        }
    }

    // steps: 6 tensors of (batch x feature_width) raw features
    std::vector<Tensor> forward_probs(const std::vector<Tensor>& raw_steps, bool train,
                                      std::uint64_t step_id) {
        if (raw_steps.size() != kInputWeeks)
            throw ShapeError("vit_lstm: expected " + std::to_string(kInputWeeks) + " steps");
        std::vector<Tensor> transformed;
        transformed.reserve(kInputWeeks);
        for (std::size_t t = 0; t < kInputWeeks; ++t)
            transformed.push_back(transform_step(raw_steps[t], train, step_id, t));
        return core_.forward_probs(transformed, train, step_id);
    }

    ForecastProbs forecast(const RegimeWindow& window,
                           const std::vector<std::vector<double>>& u10_maps,
                           const std::vector<std::vector<double>>& olr_maps) {
        if (u10_maps.size() != kInputWeeks || olr_maps.size() != kInputWeeks)
            throw ShapeError("vit_lstm: need 6 u10 and 6 olr maps");
        std::vector<Tensor> steps;
        for (std::size_t t = 0; t < kInputWeeks; ++t) {
            detail::check_one_hot(window[t].data(), kNumRegimes, "regime window row");
            steps.push_back(Tensor::constant(
                {1, feature_width()},
                make_feature_row(window[t], embed_u10(u10_maps[t]), embed_olr(olr_maps[t]))));
        }
        const auto probs = forward_probs(steps, false, 0);
        ForecastProbs out{};
        for (std::size_t w = 0; w < kLeadWeeks; ++w)
            for (std::size_t k = 0; k < kNumRegimes; ++k) out[w][k] = probs[w].values()[k];
        return out;
    }

    // trainable parameters: feature-path affine terms + the LSTM; encoder
    // weights appear only under the explicit unfrozen override
    std::vector<Tensor> params() const {
        auto out = store_.tensors();
        const auto core = core_.params();
        out.insert(out.end(), core.begin(), core.end());
        if (cfg_.train_encoders) {
            const auto u = u10_enc_.store().tensors();
            const auto o = olr_enc_.store().tensors();
            out.insert(out.end(), u.begin(), u.end());
            out.insert(out.end(), o.begin(), o.end());
        }
        return out;
    }

    void reset_bn() {
        bn_u10_state_ = BatchNormState{};
        bn_olr_state_ = BatchNormState{};
        bn_comb_state_ = BatchNormState{};
    }

    Checkpoint to_checkpoint() const {
        Checkpoint ck;
        store_.append_to(ck);
        core_.store().append_to(ck, "core.");
        u10_enc_.store().append_to(ck, "u10.");
        olr_enc_.store().append_to(ck, "olr.");
        ck["stats.mu"] = CheckpointEntry{{mu_.size()}, mu_};
        ck["stats.sigma"] = CheckpointEntry{{sigma_.size()}, sigma_};
        append_bn(ck, "bn_u10", bn_u10_state_);
        append_bn(ck, "bn_olr", bn_olr_state_);
        append_bn(ck, "bn_comb", bn_comb_state_);
        return ck;
    }

    void load(const Checkpoint& ck) {
        store_.load_from(ck);
        core_.store().load_from(ck, "core.");
        u10_enc_.store().load_from(ck, "u10.");
        olr_enc_.store().load_from(ck, "olr.");
        mu_ = fetch(ck, "stats.mu", feature_width());
        sigma_ = fetch(ck, "stats.sigma", feature_width());
        load_bn(ck, "bn_u10", bn_u10_state_, emb_dim());
        load_bn(ck, "bn_olr", bn_olr_state_, emb_dim());
        load_bn(ck, "bn_comb", bn_comb_state_, feature_width());
    }

  private:
    static SeqLstmConfig make_core_config(const VitLstmConfig& cfg, const VitEncoder& u10,
                                          const VitEncoder& olr) {
        if (u10.config().emb_dim != olr.config().emb_dim)
            throw ConfigError("vit_lstm: encoder embedding widths disagree");
        SeqLstmConfig c;
        c.input_dim = kNumRegimes + 2 * u10.config().emb_dim;
        c.hidden_dim = cfg.hidden_dim;
        c.dropout = cfg.dropout;
        c.seed = cfg.seed;
        return c;
    }

    Tensor min_max_rows(const Tensor& x) const {
        const std::size_t w = x.dim(1);
        Tensor mn = expand(reduce_min(x, 1, true), 1, w);
        Tensor mx = expand(reduce_max(x, 1, true), 1, w);
        return div(sub(x, mn), add_const(sub(mx, mn), cfg_.minmax_eps));
    }

    Tensor transform_step(const Tensor& raw, bool train, std::uint64_t step_id,
                          std::size_t week) {
        const std::size_t d = emb_dim();
        const std::size_t B = raw.dim(0);
        if (raw.shape() != Shape{B, feature_width()})
            throw ShapeError("vit_lstm: raw step width mismatch");
        Tensor onehot = slice(raw, 1, 0, kNumRegimes);
        Tensor u = slice(raw, 1, kNumRegimes, d);
        Tensor o = slice(raw, 1, kNumRegimes + d, d);
        u = min_max_rows(dropout(batch_norm(u, bn_u10_g_, bn_u10_b_, bn_u10_state_, train),
                                 cfg_.dropout, train, cfg_.seed, 300 + week, step_id));
        o = min_max_rows(dropout(batch_norm(o, bn_olr_g_, bn_olr_b_, bn_olr_state_, train),
                                 cfg_.dropout, train, cfg_.seed, 320 + week, step_id));
        Tensor feat = concat({onehot, u, o}, 1);
        std::vector<double> inv(sigma_.size());
        for (std::size_t f = 0; f < inv.size(); ++f) inv[f] = 1.0 / sigma_[f];
        feat = mul(sub(feat, Tensor::constant({mu_.size()}, mu_)),
                   Tensor::constant({sigma_.size()}, std::move(inv)));
        feat = batch_norm(feat, bn_comb_g_, bn_comb_b_, bn_comb_state_, train);
        return dropout(feat, cfg_.dropout, train, cfg_.seed, 340 + week, step_id);
    }

    static void append_bn(Checkpoint& ck, const std::string& name, const BatchNormState& s) {
        ck[name + ".mean"] = CheckpointEntry{{s.running_mean.size()}, s.running_mean};
        ck[name + ".var"] = CheckpointEntry{{s.running_var.size()}, s.running_var};
        ck[name + ".init"] = CheckpointEntry{{1}, {s.initialized ? 1.0 : 0.0}};
    }

    static std::vector<double> fetch(const Checkpoint& ck, const std::string& key,
                                     std::size_t expected) {
        auto it = ck.find(key);
        if (it == ck.end()) throw ValidationError("checkpoint is missing '" + key + "'");
        if (it->second.values.size() != expected)
            throw ShapeError("checkpoint entry '" + key + "' has wrong length");
        return it->second.values;
    }

    static void load_bn(const Checkpoint& ck, const std::string& name, BatchNormState& s,
                        std::size_t width) {
        s.running_mean = fetch(ck, name + ".mean", width);
        s.running_var = fetch(ck, name + ".var", width);
        s.initialized = fetch(ck, name + ".init", 1)[0] != 0.0;
    }

    VitLstmConfig cfg_;
    VitEncoder u10_enc_, olr_enc_;
    SeqLstm core_;
    ParamStore store_;
    Tensor bn_u10_g_, bn_u10_b_, bn_olr_g_, bn_olr_b_, bn_comb_g_, bn_comb_b_;
    BatchNormState bn_u10_state_, bn_olr_state_, bn_comb_state_;
    std::vector<double> mu_, sigma_;
};

// ---------------------------------------------------------------------------
// Logistic regression baseline: one multinomial classifier per lead week,
// all six sharing the same flattened input window.
// ---------------------------------------------------------------------------

struct LogRegConfig {
    double l2 = 1e-4;  // values below 1e-6 are clamped up to keep the problem regularized
    double lr = 0.05;
    int epochs = 400;
};

class LogisticRegression {
  public:
    explicit LogisticRegression(std::size_t n_features, LogRegConfig cfg = {})
        : n_features_(n_features), cfg_(cfg) {
        if (n_features == 0) throw ConfigError("logreg: need at least one feature");
        if (cfg_.l2 < 1e-6) cfg_.l2 = 1e-6;
        for (std::size_t l = 0; l < kLeadWeeks; ++l) {
            w_[l] = store_.add("head" + std::to_string(l) + ".w", {n_features, kNumRegimes},
                               std::vector<double>(n_features * kNumRegimes, 0.0));
            b_[l] = store_.add("head" + std::to_string(l) + ".b", {kNumRegimes},
                               std::vector<double>(kNumRegimes, 0.0));
        }
    }

    std::size_t n_features() const { return n_features_; }
    double effective_l2() const { return cfg_.l2; }

    // mean NLL over all (sample, lead) pairs plus the L2 penalty
    Tensor build_loss(const Tensor& x, const std::vector<std::array<int, kLeadWeeks>>& targets) const {
        const std::size_t N = x.dim(0);
        if (targets.size() != N) throw ShapeError("logreg: target rows do not match inputs");
        Tensor total;
        for (std::size_t l = 0; l < kLeadWeeks; ++l) {
            std::vector<std::size_t> labels(N);
            for (std::size_t i = 0; i < N; ++i) {
                if (targets[i][l] < 0 || targets[i][l] >= static_cast<int>(kNumRegimes))
                    throw ArgumentError("logreg: target label out of range");
                labels[i] = static_cast<std::size_t>(targets[i][l]);
            }
            Tensor probs = softmax(add(matmul(x, w_[l]), b_[l]), 1);
            Tensor nll = neg(reduce_mean_all(log(clamp_min(gather_rows(probs, labels), 1e-12))));
            total = total.defined() ? add(total, nll) : nll;
        }
        total = scale(total, 1.0 / static_cast<double>(kLeadWeeks));
        for (std::size_t l = 0; l < kLeadWeeks; ++l)
            total = add(total, scale(reduce_sum_all(mul(w_[l], w_[l])), cfg_.l2));
        return total;
    }

    // full-batch training; zero initialization plus a convex objective makes
    // this deterministic without any seed
    std::vector<double> fit(const std::vector<std::vector<double>>& inputs,
                            const std::vector<std::array<int, kLeadWeeks>>& targets) {
        if (inputs.empty()) throw ArgumentError("logreg: empty training set");
        std::vector<double> flat;
        flat.reserve(inputs.size() * n_features_);
        for (const auto& row : inputs) {
            if (row.size() != n_features_) throw ShapeError("logreg: feature width mismatch");
            flat.insert(flat.end(), row.begin(), row.end());
        }
        Tensor x = Tensor::constant({inputs.size(), n_features_}, std::move(flat));
        AdamConfig acfg;
        acfg.lr = cfg_.lr;
        auto params = store_.tensors();
        Adam opt(params, acfg);
        std::vector<double> curve;
        curve.reserve(static_cast<std::size_t>(cfg_.epochs));
        for (int e = 0; e < cfg_.epochs; ++e) {
            opt.zero_grad();
            Tensor loss = build_loss(x, targets);
            loss.backward();
            opt.step();
            curve.push_back(loss.values()[0]);
        }
        return curve;
    }

    ForecastProbs predict(const std::vector<double>& features) const {
        if (features.size() != n_features_) throw ShapeError("logreg: feature width mismatch");
        Tensor x = Tensor::constant({1, n_features_}, features);
        ForecastProbs out{};
        for (std::size_t l = 0; l < kLeadWeeks; ++l) {
            Tensor probs = softmax(add(matmul(x, w_[l]), b_[l]), 1);
            for (std::size_t k = 0; k < kNumRegimes; ++k) out[l][k] = probs.values()[k];
        }
        return out;
    }

    ParamStore& store() { return store_; }
    const ParamStore& store() const { return store_; }

  private:
    std::size_t n_features_;
    LogRegConfig cfg_;
    ParamStore store_;
    std::array<Tensor, kLeadWeeks> w_, b_;
};

// flattened one-hot window as logistic-regression features
inline std::vector<double> flatten_window(const RegimeWindow& window) {
    std::vector<double> out;
    out.reserve(kInputWeeks * kNumRegimes);
    for (const auto& row : window) out.insert(out.end(), row.begin(), row.end());
    return out;
}

}  // namespace s2scast
