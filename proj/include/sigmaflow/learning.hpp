/*
 * Copyright 2026 The sigmaflow Authors.
 * This file is licensed to you under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License. You may obtain a copy
 * of the License at http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software distributed under
 * the License is distributed on an "AS IS" BASIS, WITHOUT WARRANTIES OR REPRESENTATIONS
 * OF ANY KIND, either express or implied. See the License for the specific language
 * governing permissions and limitations under the License.
 */

#pragma once

#include "metric_operators.hpp"

#include <cmath>
#include <cstdint>
#include <limits>
#include <utility>
#include <algorithm>
#include <functional>
#include <numeric>
#include <numbers>
#include <optional>
#include <random>
#include <string>
#include <vector>

namespace sigmaflow {

// ---------------------------------------------------------------------------
// Scenes and corruption

/// Derives an independent stream seed from a base seed and a list of indices (splitmix64).
inline std::uint64_t derive_seed(std::uint64_t base, std::initializer_list<std::uint64_t> parts)
{
    auto mix = [](std::uint64_t z) {
        z += 0x9e3779b97f4a7c15ULL;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    };
    std::uint64_t h = mix(base);
    for (auto p : parts) h = mix(h ^ p);
    return h;
}

struct VoronoiSite
{
    double y, x;
    int label;
};

/// Sites drawn uniformly on [0, H) x [0, W) with uniform labels.
inline std::vector<VoronoiSite> voronoi_sites(Index H, Index W, int c, int sites, std::uint64_t seed)
{
    if (sites < 1) throw ValidationError("gen_voronoi: need at least one site");
    if (c < 1) throw ValidationError("gen_voronoi: need at least one label");
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> uy(0.0, double(H)), ux(0.0, double(W));
    std::uniform_int_distribution<int> ul(0, c - 1);
    std::vector<VoronoiSite> out;
    for (int k = 0; k < sites; ++k) {
        const double y = uy(rng), x = ux(rng);
        out.push_back({y, x, ul(rng)});
    }
    return out;
}

/// Every node takes the label of its nearest site in the periodic distance (ties: lowest site index).
inline LabelField voronoi_labels(const TorusGrid& grid, const std::vector<VoronoiSite>& sites, int c)
{
    const double H = double(grid.height()), W = double(grid.width());
    std::vector<int> labels(static_cast<std::size_t>(grid.size()));
    for (Index a = 0; a < grid.size(); ++a) {
        double best = std::numeric_limits<double>::infinity();
        int lab = 0;
        for (const auto& s : sites) {
            double dy = std::abs(double(grid.row(a)) - s.y), dx = std::abs(double(grid.col(a)) - s.x);
            dy = std::min(dy, H - dy);
            dx = std::min(dx, W - dx);
            const double d = dy * dy + dx * dx;
            if (d < best) {
                best = d;
                lab = s.label;
            }
        }
        labels[std::size_t(a)] = lab;
    }
    return LabelField(grid, std::move(labels), c);
}

inline LabelField gen_voronoi(Index H, Index W, int c, int sites, std::uint64_t seed)
{
    return voronoi_labels(TorusGrid(H, W), voronoi_sites(H, W, c, sites, seed), c);
}

/// Four rectangular regions (quadrants) with labels 0..3.
inline LabelField four_region_labels(Index H, Index W, int c)
{
    if (c < 4) throw ValidationError("four_region_labels: need c >= 4");
    const TorusGrid grid(H, W);
    std::vector<int> labels(static_cast<std::size_t>(grid.size()));
    for (Index a = 0; a < grid.size(); ++a)
        labels[std::size_t(a)] = (grid.row(a) < H / 2 ? 0 : 2) + (grid.col(a) < W / 2 ? 0 : 1);
    return LabelField(grid, std::move(labels), c);
}

struct CorruptionConfig
{
    double smoothing = 0.8;
    double noise_std = 0.2;
    std::uint64_t seed = 0;

    void validate() const
    {
        if (!(smoothing > 0.0 && smoothing <= 1.0)) throw ValidationError("CorruptionConfig: smoothing must lie in (0, 1]");
        if (!(noise_std >= 0.0)) throw ValidationError("CorruptionConfig: noise_std must be nonnegative");
    }
};

/// Label smoothing, log, unit-sphere projection, Gaussian noise, re-projection, softmax.
inline AssignmentField corrupt(const LabelField& L, const CorruptionConfig& cfg)
{
    cfg.validate();
    const int c = L.labels_count();
    const Index n = L.grid().size();
    std::mt19937_64 rng(cfg.seed);
    std::normal_distribution<double> noise(0.0, 1.0);
    Field X(n, c);
    for (Index a = 0; a < n; ++a) {
        Eigen::RowVectorXd p = Eigen::RowVectorXd::Constant(c, (1.0 - cfg.smoothing) / double(c));
        p[L[a]] += cfg.smoothing;
        Eigen::RowVectorXd x = p.array().max(1e-300).log();
        x.normalize();
        for (int i = 0; i < c; ++i) x[i] += cfg.noise_std * noise(rng);
        const double nrm = x.norm();
        if (nrm > 0.0) x /= nrm;
        X.row(a) = x;
    }
    return AssignmentField(L.grid(), softmax_rows(X));
}

/// Section 5.4 initial state: softmax of (x, y, z, x + y + z) over an embedded torus, c = 4.
inline AssignmentField torus_embedding_init(Index H, Index W)
{
    const TorusGrid grid(H, W);
    Field X(grid.size(), 4);
    for (Index a = 0; a < grid.size(); ++a) {
        const double x1 = 2.0 * std::numbers::pi * double(grid.row(a)) / double(H);
        const double x2 = 2.0 * std::numbers::pi * double(grid.col(a)) / double(W);
        const double x = 0.2 * (3.0 + std::cos(x1)) * std::cos(x2);
        const double y = 0.2 * (3.0 + std::cos(x1)) * std::sin(x2);
        const double z = 0.2 * std::sin(x1);
        X.row(a) << x, y, z, x + y + z;
    }
    return AssignmentField(grid, softmax_rows(X));
}

/// Random smooth state: per channel a few low Fourier modes with N(0, amplitude^2)
/// coefficients and random phases, plus a constant N(0, offset^2) shift, mapped through softmax.
inline AssignmentField smooth_random_state(const TorusGrid& grid, Index c, double amplitude, double offset,
                                           std::uint64_t seed)
{
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> nrm(0.0, 1.0);
    std::uniform_real_distribution<double> ph(0.0, 2.0 * std::numbers::pi);
    const Index H = grid.height(), W = grid.width();
    Field V = Field::Zero(grid.size(), c);
    constexpr int modes[4][2] = {{1, 0}, {0, 1}, {1, 1}, {2, 1}};
    for (Index k = 0; k < c; ++k) {
        const double shift = offset * nrm(rng);
        for (const auto& m : modes) {
            const double a = amplitude * nrm(rng), phase = ph(rng);
            for (Index i = 0; i < H; ++i)
                for (Index j = 0; j < W; ++j)
                    V(grid.index(i, j), k) +=
                        a * std::cos(2.0 * std::numbers::pi * (m[0] * double(i) / double(H) + m[1] * double(j) / double(W)) +
                                     phase);
        }
        V.col(k).array() += shift;
    }
    return AssignmentField(grid, softmax_rows(project_rows_T0(V)));
}

inline double pixel_error(const std::vector<int>& predicted, const LabelField& truth)
{
    std::size_t wrong = 0;
    for (std::size_t a = 0; a < predicted.size(); ++a) wrong += predicted[a] != truth.labels()[a];
    return double(wrong) / double(predicted.size());
}

/// Nodes with a 4-neighbour of a different label.
inline std::vector<bool> edge_mask(const LabelField& L)
{
    const TorusGrid& g = L.grid();
    std::vector<bool> out(static_cast<std::size_t>(g.size()), false);
    for (Index a = 0; a < g.size(); ++a)
        for (auto [di, dj] : {std::pair{0, 1}, {0, -1}, {1, 0}, {-1, 0}})
            if (L[g.shift(a, di, dj)] != L[a]) out[std::size_t(a)] = true;
    return out;
}

// ---------------------------------------------------------------------------
// Expressivity: fit a free metric field

struct FitConfig
{
    UnrolledSpec flow;
    int steps = 500;
    double lr = 0.01;
    OptimizerKind optimizer = OptimizerKind::adabelief;
    bool line_search = false; ///< backtracking on the proposed update; loss never increases
    int max_backtracks = 12;
    double target_error = 0.0; ///< stop early once the pixel error falls to this level
    std::optional<Field> init_params; ///< default: identity metric everywhere
};

struct FitReport
{
    std::vector<double> loss;        ///< loss before each step, plus the final loss
    std::vector<double> pixel_error; ///< matching pixel error
    int steps_taken = 0;
    MetricDiagnostics diagnostics;
};

struct FitResult
{
    Field params;
    MetricField metric;
    FitReport report;
};

inline Field identity_params(Index n)
{
    Field p(n, 3);
    p.col(0).setConstant(identity_param());
    p.col(1).setZero();
    p.col(2).setConstant(identity_param());
    return p;
}

/// Final labeling of the unrolled flow for a given metric model.
template <typename Model>
std::vector<int> unrolled_labels(const Model& model, const TorusGrid& grid, const Sample& s, const UnrolledSpec& us)
{
    return argmax_labels(record_forward(model, grid, s, us).V.back());
}

/// Gradient descent on per-node metric parameters through the unrolled flow. The metric is
/// static in time, so the time average equals the fitted field itself.
inline FitResult fit_metric(const LabelField& target, const AssignmentField& init, const FitConfig& cfg)
{
    const TorusGrid& grid = target.grid();
    if (init.size() != grid.size()) throw ValidationError("fit_metric: shape mismatch");
    Field P = cfg.init_params ? *cfg.init_params : identity_params(grid.size());
    const std::vector<Sample> batch{{init.S(), target.labels(), 0}};
    OptimizerState opt = make_optimizer(cfg.optimizer, P.size());
    FitReport rep;
    auto eval_error = [&](const Field& params) {
        return pixel_error(unrolled_labels(FreeParamsModel{params}, grid, batch[0], cfg.flow), target);
    };
    for (int k = 0; k < cfg.steps; ++k) {
        const LossGrad lg = loss_and_grad(P, grid, batch, cfg.flow);
        rep.loss.push_back(lg.loss);
        rep.pixel_error.push_back(eval_error(P));
        if (rep.pixel_error.back() <= cfg.target_error) break;
        Vector x = Eigen::Map<const Vector>(P.data(), P.size());
        if (!cfg.line_search) {
            optimizer_step(opt, x, lg.grad, cfg.lr);
            P = Eigen::Map<const Field>(x.data(), grid.size(), 3);
        } else {
            const OptimizerState saved = opt;
            Vector proposal = x;
            optimizer_step(opt, proposal, lg.grad, cfg.lr);
            const Vector dir = proposal - x;
            double scale = 1.0;
            bool accepted = false;
            for (int b = 0; b <= cfg.max_backtracks; ++b, scale *= 0.5) {
                const Vector trial = x + scale * dir;
                const Field Pt = Eigen::Map<const Field>(trial.data(), grid.size(), 3);
                double lt;
                try {
                    lt = batch_loss(FreeParamsModel{Pt}, grid, batch, cfg.flow);
                } catch (const NumericalError&) {
                    continue;
                }
                if (lt <= lg.loss) {
                    P = Pt;
                    accepted = true;
                    break;
                }
            }
            if (!accepted) opt = saved;
        }
        ++rep.steps_taken;
    }
    if (rep.steps_taken == cfg.steps || rep.loss.empty() || rep.pixel_error.back() > cfg.target_error) {
        rep.loss.push_back(batch_loss(FreeParamsModel{P}, grid, batch, cfg.flow));
        rep.pixel_error.push_back(eval_error(P));
    }
    MetricField metric = metric_from_params(grid, P);
    rep.diagnostics = metric_diagnostics(metric);
    return {std::move(P), std::move(metric), std::move(rep)};
}

// ---------------------------------------------------------------------------
// Datasets, training and evaluation

enum class Split { train, validation, test };

inline const char* to_string(Split s)
{
    switch (s) {
    case Split::train: return "train";
    case Split::validation: return "validation";
    case Split::test: return "test";
    }
    return "?";
}

struct Scene
{
    LabelField labels;
    std::uint64_t seed;
    Split split;
};

struct DatasetConfig
{
    Index height = 48;
    Index width = 48;
    int labels = 5;
    int train = 20;
    int test = 10;
    double validation_fraction = 0.1; ///< extra validation scenes, relative to the training count
    int min_sites = 4;
    int max_sites = 12;
    std::uint64_t seed = 0;
};

/// Scenes are drawn from per-scene seeds; the split is a partition of the seed sequence.
inline std::vector<Scene> gen_dataset(const DatasetConfig& cfg)
{
    if (cfg.train < 0 || cfg.test < 0 || cfg.min_sites < 1 || cfg.max_sites < cfg.min_sites)
        throw ValidationError("gen_dataset: invalid configuration");
    const int val = int(std::ceil(cfg.validation_fraction * double(cfg.train) - 1e-9));
    std::vector<Scene> out;
    const int total = cfg.train + val + cfg.test;
    for (int i = 0; i < total; ++i) {
        const std::uint64_t s = derive_seed(cfg.seed, {0x5ce9e, std::uint64_t(i)});
        std::mt19937_64 rng(s);
        const int sites = std::uniform_int_distribution<int>(cfg.min_sites, cfg.max_sites)(rng);
        const Split split = i < cfg.train ? Split::train : (i < cfg.train + val ? Split::validation : Split::test);
        out.push_back({gen_voronoi(cfg.height, cfg.width, cfg.labels, sites, rng()), s, split});
    }
    return out;
}

inline std::vector<Scene> select_split(const std::vector<Scene>& scenes, Split s)
{
    std::vector<Scene> out;
    for (const auto& sc : scenes)
        if (sc.split == s) out.push_back(sc);
    return out;
}

struct TrainConfig
{
    NetworkShape network;
    UnrolledSpec flow;
    CorruptionConfig corruption;
    OptimizerKind optimizer = OptimizerKind::adabelief;
    double lr = 0.01;
    int epochs = 30;
    int batch_size = 2;
    std::uint64_t seed = 0;
};

struct TrainReport
{
    std::vector<double> train_loss;      ///< per epoch (index 0: initialization) on a fixed corruption draw
    std::vector<double> validation_loss; ///< same, on the validation scenes (empty if none)
    int best_epoch = 0;
};

/// Network initialization used by train_operator.
inline OperatorParams initial_operator(const TrainConfig& cfg, int labels)
{
    NetworkShape shape = cfg.network;
    shape.labels = labels;
    return OperatorParams::initialized(shape, derive_seed(cfg.seed, {0x1417}));
}

namespace detail {
inline std::vector<Sample> corrupted_samples(const std::vector<Scene>& scenes, const CorruptionConfig& base,
                                             std::uint64_t stream)
{
    std::vector<Sample> out;
    for (std::size_t i = 0; i < scenes.size(); ++i) {
        CorruptionConfig cc = base;
        cc.seed = derive_seed(base.seed, {stream, scenes[i].seed});
        out.push_back({corrupt(scenes[i].labels, cc).S(), scenes[i].labels.labels(), scenes[i].seed});
    }
    return out;
}
} // namespace detail

/// Stochastic optimization with fresh corruption draws every epoch. Returns the checkpoint
/// with the lowest validation loss among epochs whose training loss does not exceed the
/// initial one (epoch 0 always qualifies).
inline std::pair<OperatorParams, TrainReport> train_operator(const std::vector<Scene>& train,
                                                             const std::vector<Scene>& validation,
                                                             const TrainConfig& cfg,
                                                             const std::function<void(int, const TrainReport&)>& progress = {})
{
    if (train.empty()) throw ValidationError("train_operator: empty training set");
    const TorusGrid grid = train.front().labels.grid();
    OperatorParams params = initial_operator(cfg, train.front().labels.labels_count());
    OperatorParams best = params;
    OptimizerState opt = make_optimizer(cfg.optimizer, params.size());
    TrainReport rep;

    const std::vector<Sample> train_eval = detail::corrupted_samples(train, cfg.corruption, 0xe7a1);
    const std::vector<Sample> val_eval = detail::corrupted_samples(validation, cfg.corruption, 0x7a1d);
    auto record = [&](const OperatorParams& p) {
        rep.train_loss.push_back(batch_loss(NetworkModel{p}, grid, train_eval, cfg.flow));
        if (!val_eval.empty()) rep.validation_loss.push_back(batch_loss(NetworkModel{p}, grid, val_eval, cfg.flow));
    };
    record(params);
    double best_score = rep.validation_loss.empty() ? rep.train_loss[0] : rep.validation_loss[0];
    if (progress) progress(0, rep);

    std::vector<std::size_t> order(train.size());
    for (int e = 1; e <= cfg.epochs; ++e) {
        std::vector<Sample> samples = detail::corrupted_samples(train, cfg.corruption, 0x100 + std::uint64_t(e));
        std::iota(order.begin(), order.end(), 0);
        std::shuffle(order.begin(), order.end(), std::mt19937_64(derive_seed(cfg.seed, {0x5f1e, std::uint64_t(e)})));
        const std::size_t bs = std::size_t(std::max(1, cfg.batch_size));
        for (std::size_t b = 0; b < order.size(); b += bs) {
            std::vector<Sample> batch;
            for (std::size_t k = b; k < std::min(order.size(), b + bs); ++k) batch.push_back(samples[order[k]]);
            const LossGrad lg = loss_and_grad(params, grid, batch, cfg.flow);
            optimizer_step(opt, params.values(), lg.grad, cfg.lr);
        }
        record(params);
        const double score = rep.validation_loss.empty() ? rep.train_loss.back() : rep.validation_loss.back();
        if (rep.train_loss.back() <= rep.train_loss.front() && score < best_score) {
            best_score = score;
            best = params;
            rep.best_epoch = e;
        }
        if (progress) progress(e, rep);
    }
    return {std::move(best), std::move(rep)};
}

struct EvalReport
{
    std::vector<double> accuracy; ///< per sample
    double mean = 0.0;
    double stddev = 0.0;
    std::vector<std::vector<bool>> error_masks; ///< true where the final label is wrong
    std::vector<std::vector<int>> predictions;
};

/// Corrupt, integrate, label, and score each scene. params = nullptr uses the flat metric.
inline EvalReport evaluate(const OperatorParams* params, const std::vector<Scene>& scenes, const UnrolledSpec& flow,
                           const CorruptionConfig& corruption)
{
    EvalReport rep;
    if (scenes.empty()) return rep;
    const TorusGrid grid = scenes.front().labels.grid();
    const std::vector<Sample> samples = detail::corrupted_samples(scenes, corruption, 0x7e57);
    const Field flat = identity_params(grid.size());
    rep.accuracy.resize(scenes.size());
    rep.error_masks.resize(scenes.size());
    rep.predictions.resize(scenes.size());
    parallel_for(0, std::ptrdiff_t(scenes.size()), [&](std::ptrdiff_t i) {
        const Sample& s = samples[std::size_t(i)];
        const std::vector<int> pred = params ? unrolled_labels(NetworkModel{*params}, grid, s, flow)
                                             : unrolled_labels(FreeParamsModel{flat}, grid, s, flow);
        std::vector<bool> mask(pred.size());
        for (std::size_t a = 0; a < pred.size(); ++a) mask[a] = pred[a] != scenes[std::size_t(i)].labels.labels()[a];
        rep.accuracy[std::size_t(i)] = 1.0 - pixel_error(pred, scenes[std::size_t(i)].labels);
        rep.error_masks[std::size_t(i)] = std::move(mask);
        rep.predictions[std::size_t(i)] = pred;
    });
    double sum = 0.0, sq = 0.0;
    for (double a : rep.accuracy) sum += a;
    rep.mean = sum / double(rep.accuracy.size());
    for (double a : rep.accuracy) sq += (a - rep.mean) * (a - rep.mean);
    rep.stddev = std::sqrt(sq / double(rep.accuracy.size()));
    return rep;
}

} // namespace sigmaflow
