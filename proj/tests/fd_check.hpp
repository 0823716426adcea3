#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <utility>
#include <vector>

#include "s2scast/tensorgrad.hpp"

// Central-difference gradient checking shared by the unit tests and the
// acceptance suite. The op under test is wrapped as a function from leaf
// tensors to one output tensor; the harness scalarizes the output with fixed
// random weights, runs backward once, then perturbs every input element by
// +/- h and compares.

namespace fdcheck {

using s2scast::Rng;
using s2scast::Shape;
using s2scast::Tensor;

using TensorFn = std::function<Tensor(const std::vector<Tensor>&)>;

struct FdInput {
    Shape shape;
    std::vector<double> data;
};

inline FdInput random_input(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
    FdInput in;
    in.shape = std::move(shape);
    const std::size_t n = s2scast::shape_numel(in.shape);
    in.data.resize(n);
    for (auto& v : in.data) v = lo + (hi - lo) * rng.uniform();
    return in;
}

// strictly positive values, for log/sqrt/div denominators
inline FdInput random_positive_input(Shape shape, Rng& rng) {
    return random_input(std::move(shape), rng, 0.5, 2.0);
}

// values kept away from zero, for kinked ops (relu, clamp)
inline FdInput random_kink_free_input(Shape shape, Rng& rng, double margin = 0.05) {
    FdInput in = random_input(std::move(shape), rng);
    for (auto& v : in.data) {
        if (std::fabs(v) < margin) v = v < 0.0 ? v - margin : v + margin;
    }
    return in;
}

inline double scalarized_value(const Tensor& out, const std::vector<double>& weights) {
    double s = 0.0;
    for (std::size_t i = 0; i < out.numel(); ++i) s += weights[i] * out.values()[i];
    return s;
}

// Returns the worst relative error max|analytic - numeric| / max(1, |a|, |n|)
// over every element of every input.
inline double max_fd_rel_error(const TensorFn& fn, const std::vector<FdInput>& inputs,
                               std::uint64_t weight_seed = 42, double h = 1e-5) {
    // analytic pass
    std::vector<Tensor> leaves;
    leaves.reserve(inputs.size());
    for (const auto& in : inputs) leaves.push_back(Tensor::param(in.shape, in.data));
    Tensor out = fn(leaves);

    Rng wrng(weight_seed);
    std::vector<double> weights(out.numel());
    for (auto& w : weights) w = 2.0 * wrng.uniform() - 1.0;

    Tensor loss = s2scast::reduce_sum_all(s2scast::mul(out, Tensor::constant(out.shape(), weights)));
    loss.backward();

    // numeric pass, rebuilding the graph per perturbation
    const auto eval_at = [&](const std::vector<FdInput>& pts) {
        std::vector<Tensor> consts;
        consts.reserve(pts.size());
        for (const auto& in : pts) consts.push_back(Tensor::constant(in.shape, in.data));
        return scalarized_value(fn(consts), weights);
    };

    double worst = 0.0;
    std::vector<FdInput> probe = inputs;
    for (std::size_t j = 0; j < inputs.size(); ++j) {
        for (std::size_t e = 0; e < inputs[j].data.size(); ++e) {
            const double orig = probe[j].data[e];
            probe[j].data[e] = orig + h;
            const double fp = eval_at(probe);
            probe[j].data[e] = orig - h;
            const double fm = eval_at(probe);
            probe[j].data[e] = orig;
            const double numeric = (fp - fm) / (2.0 * h);
            const double analytic = leaves[j].grad()[e];
            const double denom = std::max({1.0, std::fabs(analytic), std::fabs(numeric)});
            worst = std::max(worst, std::fabs(analytic - numeric) / denom);
        }
    }
    return worst;
}

// Variant for models that own their parameters: the supplied builder must
// reconstruct the scalar loss graph from the CURRENT parameter values on
// every call. Gradients from one backward pass are compared against central
// differences taken by nudging the parameter storage in place.
inline double max_fd_rel_error_params(const std::function<Tensor()>& loss_fn,
                                      std::vector<Tensor> params, double h = 1e-5) {
    for (auto& p : params) p.zero_grad();
    Tensor loss = loss_fn();
    loss.backward();
    std::vector<std::vector<double>> grads;
    grads.reserve(params.size());
    for (const auto& p : params) grads.push_back(p.grad());

    double worst = 0.0;
    for (std::size_t j = 0; j < params.size(); ++j) {
        auto& vals = params[j].values();
        for (std::size_t e = 0; e < vals.size(); ++e) {
            const double orig = vals[e];
            vals[e] = orig + h;
            const double fp = loss_fn().values()[0];
            vals[e] = orig - h;
            const double fm = loss_fn().values()[0];
            vals[e] = orig;
            const double numeric = (fp - fm) / (2.0 * h);
            const double analytic = grads[j][e];
            const double denom = std::max({1.0, std::fabs(analytic), std::fabs(numeric)});
            worst = std::max(worst, std::fabs(analytic - numeric) / denom);
        }
    }
    return worst;
}

}  // namespace fdcheck
