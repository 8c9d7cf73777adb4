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

#include "test_util.hpp"

#include <sigmaflow/learning.hpp>

#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <set>

using namespace sigmaflow;

namespace {

// Independent oracle: explicit minimum over the nine periodic images of every site.
int brute_force_label(const std::vector<VoronoiSite>& sites, double i, double j, double H, double W)
{
    double best = std::numeric_limits<double>::infinity();
    int lab = -1;
    for (const auto& s : sites) {
        double d = std::numeric_limits<double>::infinity();
        for (int oy = -1; oy <= 1; ++oy)
            for (int ox = -1; ox <= 1; ++ox) {
                const double dy = i - (s.y + oy * H), dx = j - (s.x + ox * W);
                d = std::min(d, dy * dy + dx * dx);
            }
        if (d < best) {
            best = d;
            lab = s.label;
        }
    }
    return lab;
}

UnrolledSpec short_flow()
{
    UnrolledSpec us;
    us.T = 0.4;
    us.step = 0.2;
    return us;
}

} // namespace

TEST(Voronoi, MatchesBruteForceScan)
{
    for (std::uint64_t seed : {1u, 2u, 3u}) {
        const auto sites = voronoi_sites(20, 24, 5, 9, seed);
        const LabelField L = voronoi_labels(TorusGrid(20, 24), sites, 5);
        for (Index a = 0; a < L.grid().size(); ++a)
            ASSERT_EQ(L[a], brute_force_label(sites, double(L.grid().row(a)), double(L.grid().col(a)), 20, 24));
        EXPECT_EQ(L, gen_voronoi(20, 24, 5, 9, seed));
    }
}

TEST(Voronoi, DeterministicAndSingleSiteIsConstant)
{
    EXPECT_EQ(gen_voronoi(16, 16, 5, 7, 42), gen_voronoi(16, 16, 5, 7, 42));
    const LabelField one = gen_voronoi(10, 12, 5, 1, 3);
    EXPECT_EQ(std::set<int>(one.labels().begin(), one.labels().end()).size(), 1u);
    EXPECT_THROW(gen_voronoi(10, 10, 5, 0, 1), ValidationError);
}

TEST(Corrupt, ZeroNoisePreservesArgmax)
{
    const LabelField L = gen_voronoi(16, 16, 5, 6, 9);
    CorruptionConfig cc;
    cc.noise_std = 0.0;
    const AssignmentField S = corrupt(L, cc);
    EXPECT_EQ(argmax_labels(S.S()), L.labels());
}

TEST(Corrupt, ZeroNoiseClosedForm)
{
    // Smoothed one-hot (s + (1-s)/c, (1-s)/c, ...) through log and unit normalization.
    const LabelField L = four_region_labels(8, 8, 5);
    CorruptionConfig cc;
    cc.noise_std = 0.0;
    const Field S = corrupt(L, cc).S();
    const double hi = std::log(0.8 + 0.04), lo = std::log(0.04);
    const double nrm = std::sqrt(hi * hi + 4.0 * lo * lo);
    const double ehi = std::exp(hi / nrm), elo = std::exp(lo / nrm);
    EXPECT_NEAR(S(0, 0), ehi / (ehi + 4.0 * elo), 1e-14);
    EXPECT_NEAR(S(0, 3), elo / (ehi + 4.0 * elo), 1e-14);
}

TEST(Corrupt, RowsValidAndDeterministic)
{
    const LabelField L = gen_voronoi(12, 12, 5, 4, 2);
    CorruptionConfig cc;
    cc.seed = 77;
    const Field a = corrupt(L, cc).S(), b = corrupt(L, cc).S();
    EXPECT_TRUE(a == b);
    EXPECT_GT(a.minCoeff(), 0.0);
    EXPECT_LT((a.rowwise().sum().array() - 1.0).abs().maxCoeff(), 1e-12);
    cc.seed = 78;
    EXPECT_FALSE(corrupt(L, cc).S() == a);
}

TEST(Corrupt, RejectsInvalidConfig)
{
    const LabelField L = four_region_labels(8, 8, 4);
    CorruptionConfig cc;
    cc.smoothing = 0.0;
    EXPECT_THROW(corrupt(L, cc), ValidationError);
    cc.smoothing = 0.8;
    cc.noise_std = -1.0;
    EXPECT_THROW(corrupt(L, cc), ValidationError);
}

TEST(TorusInit, MatchesEmbedding)
{
    const AssignmentField S = torus_embedding_init(12, 16);
    ASSERT_EQ(S.labels(), 4);
    const TorusGrid& g = S.grid();
    for (Index a : {Index(0), Index(37), Index(150)}) {
        const double x1 = 2.0 * std::numbers::pi * double(g.row(a)) / 12.0;
        const double x2 = 2.0 * std::numbers::pi * double(g.col(a)) / 16.0;
        const double y = 0.2 * (3.0 + std::cos(x1)) * std::sin(x2), z = 0.2 * std::sin(x1);
        // log(S_4 / S_1) = (x + y + z) - x
        EXPECT_NEAR(std::log(S.S()(a, 3) / S.S()(a, 0)), y + z, 1e-12);
    }
}

TEST(EdgeMask, FourRegionCount)
{
    // Boundary rows and columns 0, H/2-1, H/2, H-1 on a 32 x 32 torus: 8 lines minus 16 crossings.
    const auto m = edge_mask(four_region_labels(32, 32, 5));
    EXPECT_EQ(std::count(m.begin(), m.end(), true), 8 * 32 - 16);
}

TEST(FitMetric, AlreadyOptimalTargetIsStationary)
{
    // Straight region boundaries and no pairing term: the flow only sharpens the labeling.
    const LabelField L = four_region_labels(16, 16, 4);
    Field V = Field::Constant(256, 4, -10.0);
    for (Index a = 0; a < 256; ++a) V(a, L[a]) = 20.0;
    const AssignmentField init(L.grid(), softmax_rows(project_rows_T0(V)));
    FitConfig fc;
    fc.flow = short_flow();
    fc.flow.alpha = 1.0;
    fc.steps = 20;
    const FitResult r = fit_metric(L, init, fc);
    EXPECT_LT(r.report.loss.front(), 1e-6);
    EXPECT_LT(r.report.loss.front() - r.report.loss.back(), 1e-6);
    EXPECT_EQ(r.report.pixel_error.back(), 0.0);
}

TEST(FitMetric, ConstantTargetConverges)
{
    const TorusGrid g(16, 16);
    const LabelField L(g, std::vector<int>(256, 2), 5);
    CorruptionConfig cc;
    cc.seed = 4;
    const AssignmentField init = corrupt(L, cc);
    FitConfig fc;
    fc.steps = 100;
    fc.target_error = 0.001;
    const FitResult r = fit_metric(L, init, fc);
    EXPECT_LE(r.report.pixel_error.back(), 0.001);
    EXPECT_LE(r.report.steps_taken, 100);
}

TEST(FitMetric, LineSearchIsMonotone)
{
    CorruptionConfig cc;
    cc.seed = 3;
    const LabelField L = four_region_labels(8, 8, 4);
    FitConfig fc;
    fc.flow = short_flow();
    fc.steps = 25;
    fc.lr = 0.2;
    fc.line_search = true;
    const FitResult r = fit_metric(L, corrupt(L, cc), fc);
    for (std::size_t k = 1; k < r.report.loss.size(); ++k) EXPECT_LE(r.report.loss[k], r.report.loss[k - 1]);
    EXPECT_LT(r.report.loss.back(), r.report.loss.front());
    EXPECT_EQ(r.report.diagnostics.anisotropy.size(), 64);
}

TEST(Dataset, SplitsAndDeterminism)
{
    DatasetConfig dc;
    dc.height = dc.width = 12;
    dc.train = 10;
    dc.test = 4;
    dc.seed = 5;
    const auto all = gen_dataset(dc);
    EXPECT_EQ(select_split(all, Split::train).size(), 10u);
    EXPECT_EQ(select_split(all, Split::validation).size(), 1u);
    EXPECT_EQ(select_split(all, Split::test).size(), 4u);
    const auto again = gen_dataset(dc);
    std::set<std::uint64_t> seeds;
    for (std::size_t i = 0; i < all.size(); ++i) {
        EXPECT_EQ(all[i].labels, again[i].labels);
        seeds.insert(all[i].seed);
    }
    EXPECT_EQ(seeds.size(), all.size());
}

namespace {
TrainConfig tiny_train_config()
{
    TrainConfig tc;
    tc.network.kernel = 3;
    tc.network.filters = 4;
    tc.network.hidden = {4};
    tc.flow = short_flow();
    tc.epochs = 3;
    tc.seed = 9;
    return tc;
}

std::vector<Scene> tiny_scenes(int n, std::uint64_t seed)
{
    DatasetConfig dc;
    dc.height = dc.width = 8;
    dc.train = n;
    dc.test = 0;
    dc.validation_fraction = 0.0;
    dc.seed = seed;
    return gen_dataset(dc);
}
} // namespace

TEST(TrainOperator, ZeroEpochsReturnsInitialization)
{
    TrainConfig tc = tiny_train_config();
    tc.epochs = 0;
    const auto train = tiny_scenes(3, 1);
    const auto [p, rep] = train_operator(train, {}, tc);
    EXPECT_TRUE(p.values() == initial_operator(tc, 5).values());
    EXPECT_EQ(rep.best_epoch, 0);
    EXPECT_EQ(rep.train_loss.size(), 1u);
}

TEST(TrainOperator, BestCheckpointContractAndDeterminism)
{
    const TrainConfig tc = tiny_train_config();
    const auto train = tiny_scenes(4, 2), val = tiny_scenes(2, 3);
    const auto [p, rep] = train_operator(train, val, tc);
    ASSERT_EQ(rep.train_loss.size(), 4u);
    EXPECT_LE(rep.train_loss[std::size_t(rep.best_epoch)], rep.train_loss[0]);
    for (std::size_t e = 0; e < rep.validation_loss.size(); ++e)
        if (rep.train_loss[e] <= rep.train_loss[0])
            EXPECT_GE(rep.validation_loss[e], rep.validation_loss[std::size_t(rep.best_epoch)]);
    const auto [p2, rep2] = train_operator(train, val, tc);
    EXPECT_TRUE(p.values() == p2.values());
    EXPECT_EQ(rep.train_loss, rep2.train_loss);
}

TEST(Evaluate, CleanInputsKeepLabelsUnderFlatMetric)
{
    DatasetConfig dc;
    dc.height = dc.width = 16;
    dc.train = 0;
    dc.test = 3;
    const auto scenes = gen_dataset(dc);
    CorruptionConfig clean;
    clean.smoothing = 1.0;
    clean.noise_std = 0.0;
    UnrolledSpec us;
    us.T = 0.2;
    const EvalReport rep = evaluate(nullptr, scenes, us, clean);
    for (double a : rep.accuracy) EXPECT_EQ(a, 1.0);
}

TEST(Evaluate, AccuracyRangeAndDeterminism)
{
    const auto scenes = tiny_scenes(3, 6);
    const TrainConfig tc = tiny_train_config();
    const OperatorParams p = initial_operator(tc, 5);
    const EvalReport a = evaluate(&p, scenes, tc.flow, tc.corruption);
    const EvalReport b = evaluate(&p, scenes, tc.flow, tc.corruption);
    EXPECT_EQ(a.accuracy, b.accuracy);
    EXPECT_EQ(a.predictions, b.predictions);
    for (double x : a.accuracy) {
        EXPECT_GE(x, 0.0);
        EXPECT_LE(x, 1.0);
    }
    EXPECT_EQ(a.error_masks.size(), 3u);
}
