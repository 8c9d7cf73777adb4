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

#include <sigmaflow/flow_engine.hpp>

#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <random>

using namespace sigmaflow;
using sigmaflow::testing::random_field;
using sigmaflow::testing::smooth_tangent_field;

namespace {

Field random_tangent(std::mt19937_64& rng, Index n, Index c, double scale = 2.0)
{
    return project_rows_T0(random_field(rng, n, c, -scale, scale));
}

MetricField random_metric(std::mt19937_64& rng, const TorusGrid& g)
{
    return metric_from_params(g, random_field(rng, g.size(), 3, -2, 2));
}

Field constant_rows(Index n, const Vector& row)
{
    Field f(n, row.size());
    for (Index a = 0; a < n; ++a) f.row(a) = row.transpose();
    return f;
}

} // namespace

TEST(SigmaRhs, ConstantStateIsStationary)
{
    const TorusGrid g(5, 6);
    const Vector p = (Vector(3) << 0.2, 0.5, 0.3).finished();
    const AssignmentField S(g, constant_rows(g.size(), p));
    const Field r = sigma_rhs_ambient(S, MetricField::identity(g), 0.0, 0.0);
    EXPECT_EQ(r.cwiseAbs().maxCoeff(), 0.0);
}

TEST(SigmaRhs, AmbientRowsSumToZero)
{
    std::mt19937_64 rng(1);
    const TorusGrid g(6, 5);
    for (int t = 0; t < 20; ++t) {
        const AssignmentField S(g, softmax_rows(random_tangent(rng, g.size(), 4)));
        const Field r = sigma_rhs_ambient(S, random_metric(rng, g), 0.3, 2.0);
        EXPECT_LT(r.rowwise().sum().cwiseAbs().maxCoeff(), 1e-12);
    }
}

TEST(SigmaRhs, AlphaOneDropsPairing)
{
    std::mt19937_64 rng(2);
    const TorusGrid g(5, 5);
    const AssignmentField S(g, softmax_rows(random_tangent(rng, g.size(), 3)));
    const MetricField h = random_metric(rng, g);
    const Field logS = S.S().array().log().matrix();
    const Field expected = apply_replicator_rows(S.S(), apply_laplace_beltrami(h, logS) + 1.5 * logS);
    EXPECT_EQ((sigma_rhs_ambient(S, h, 1.0, 1.5) - expected).cwiseAbs().maxCoeff(), 0.0);
}

TEST(SigmaRhs, BoundaryStateRejected)
{
    const TorusGrid g(3, 3);
    Field S = Field::Constant(g.size(), 2, 0.5);
    S(4, 0) = 1.0;
    S(4, 1) = 0.0;
    EXPECT_THROW(AssignmentField(g, S), ValidationError);
}

TEST(SigmaRhs, TangentOnConstantField)
{
    const TorusGrid g(4, 4);
    const Vector v = (Vector(3) << 0.5, -0.2, -0.3).finished();
    const TangentField V(g, constant_rows(g.size(), v));
    const Field r = sigma_rhs_tangent(V, MetricField::identity(g), 0.0, 3.0);
    EXPECT_LT((r - 3.0 * V.V()).cwiseAbs().maxCoeff(), 1e-14);
    EXPECT_LT(sigma_rhs_tangent(V, MetricField::identity(g), 0.0, 0.0).cwiseAbs().maxCoeff(), 1e-14);
}

TEST(SigmaRhs, AmbientEqualsReplicatorOfTangent)
{
    std::mt19937_64 rng(3);
    const TorusGrid g(6, 7);
    double worst = 0.0;
    for (int t = 0; t < 50; ++t) {
        const Field V = random_tangent(rng, g.size(), 4);
        const MetricField h = random_metric(rng, g);
        const double alpha = std::uniform_real_distribution<double>(-1, 1)(rng);
        const AssignmentField S(g, softmax_rows(V));
        const Field amb = sigma_rhs_ambient(S, h, alpha, 1.3);
        const Field tan = apply_replicator_rows(S.S(), sigma_rhs_tangent(TangentField(g, V), h, alpha, 1.3));
        worst = std::max(worst, (amb - tan).cwiseAbs().maxCoeff());
    }
    EXPECT_LT(worst, 1e-12);
}

TEST(RegularizedRhs, ConstantFieldClosedForm)
{
    const TorusGrid g(3, 4);
    const Vector v = (Vector(3) << 0.7, -0.1, -0.6).finished();
    const double eps = 0.3, m2 = 2.0;
    const Field r = sigma_rhs_regularized(TangentField(g, constant_rows(g.size(), v)), MetricField::identity(g), 0.0, m2, eps);
    const simplex::ThetaVector th = simplex::tangent_to_theta(simplex::TangentVector(v));
    const Matrix gm = simplex::fisher_metric(th).g;
    Matrix ge = gm;
    ge.diagonal().array() += eps;
    const Vector dth = ge.llt().solve(m2 * gm * th.theta());
    const Vector expected = simplex::theta_to_tangent(simplex::ThetaVector(dth)).v();
    for (Index a = 0; a < g.size(); ++a) EXPECT_LT((r.row(a).transpose() - expected).cwiseAbs().maxCoeff(), 1e-13);
}

TEST(RegularizedRhs, RowsInT0AndFinite)
{
    std::mt19937_64 rng(4);
    const TorusGrid g(5, 5);
    const Field r = sigma_rhs_regularized(TangentField(g, random_tangent(rng, g.size(), 4)), random_metric(rng, g), -0.5, 1.0, 0.1);
    EXPECT_TRUE(r.allFinite());
    EXPECT_LT(r.rowwise().sum().cwiseAbs().maxCoeff(), 1e-12);
}

TEST(RegularizedRhs, ZeroEpsilonAgreesWithTangentFormUnderRefinement)
{
    // Both discretize the same tension field; their difference is truncation error.
    std::vector<double> diffs;
    for (Index n : {16, 32, 64}) {
        const TorusGrid g(n, n);
        Field V(g.size(), 3);
        for (Index a = 0; a < g.size(); ++a) {
            const double x = 2 * std::numbers::pi * double(g.col(a)) / double(n);
            const double y = 2 * std::numbers::pi * double(g.row(a)) / double(n);
            V.row(a) << std::sin(x), std::cos(y), 0.5 * std::sin(x + y);
        }
        V = project_rows_T0(V);
        const TangentField tv(g, V);
        // Scale by n^2 to compare physical tension fields on the unit torus.
        const Field a = double(n * n) * sigma_rhs_tangent(tv, MetricField::identity(g), 0.0, 0.0);
        const Field b = double(n * n) * sigma_rhs_regularized(tv, MetricField::identity(g), 0.0, 0.0, 0.0);
        diffs.push_back((a - b).cwiseAbs().maxCoeff() / a.cwiseAbs().maxCoeff());
    }
    EXPECT_LT(diffs[1], 0.5 * diffs[0]);
    EXPECT_LT(diffs[2], 0.5 * diffs[1]);
    EXPECT_LT(diffs[2], 1e-2);
}

TEST(SFlow, UniformStateIsStationary)
{
    const TorusGrid g(4, 4);
    const AssignmentField S = AssignmentField::barycenter(g, 3);
    EXPECT_LT(sflow_rhs(S, box_weights(g)).cwiseAbs().maxCoeff(), 1e-16);
}

TEST(SFlow, IdentityWeightsTwoLabels)
{
    const TorusGrid g(3, 3);
    SparseOperator I(g.size(), g.size());
    I.setIdentity();
    const AssignmentField S(g, constant_rows(g.size(), (Vector(2) << 0.6, 0.4).finished()));
    const Field r = sflow_rhs(S, I);
    for (Index a = 0; a < g.size(); ++a) {
        EXPECT_NEAR(r(a, 0), 0.048, 1e-15);
        EXPECT_NEAR(r(a, 1), -0.048, 1e-15);
    }
}

TEST(SFlow, ObjectiveAtUniform)
{
    const TorusGrid g(5, 4);
    for (Index c : {2, 3, 7}) {
        const AssignmentField S = AssignmentField::barycenter(g, c);
        EXPECT_NEAR(sflow_objective(S, box_weights(g)), 0.5 * double(g.size()) / double(c), 1e-12);
    }
}

TEST(SFlow, RhsIsFisherRaoGradientOfObjective)
{
    std::mt19937_64 rng(5);
    const TorusGrid g(5, 5);
    const SparseOperator omega = box_weights(g);
    for (int t = 0; t < 10; ++t) {
        const AssignmentField S(g, softmax_rows(random_tangent(rng, g.size(), 3)));
        const Field rhs = sflow_rhs(S, omega);
        const Field u = apply_replicator_rows(S.S(), random_field(rng, g.size(), 3));
        const double h = 1e-6;
        const double fd = (sflow_objective(AssignmentField(g, S.S() + h * u), omega) -
                           sflow_objective(AssignmentField(g, S.S() - h * u), omega)) /
                          (2 * h);
        const double inner = (rhs.array() * u.array() / S.S().array()).sum();
        EXPECT_LT(sigmaflow::testing::rel_err(fd, inner), 1e-6);
    }
}

TEST(SFlow, AsymmetricWeightsRejected)
{
    const TorusGrid g(3, 3);
    SparseOperator w = box_weights(g);
    w.coeffRef(0, 1) += 0.1;
    EXPECT_THROW(sflow_rhs(AssignmentField::barycenter(g, 2), w), ValidationError);
}

TEST(Spherical, TensionOrthogonalAndNormPreserving)
{
    std::mt19937_64 rng(6);
    const TorusGrid g(6, 6);
    const SparseOperator omega = box_weights(g);
    const Vector mu = Vector::Ones(g.size());
    for (int t = 0; t < 10; ++t) {
        Field s = softmax_rows(random_tangent(rng, g.size(), 4)).array().sqrt().matrix();
        const Field ups = spherical_tension(s, omega, mu);
        EXPECT_LT((ups.array() * s.array()).rowwise().sum().abs().maxCoeff(), 1e-12);
        const Field next = spherical_euler_step(s, omega, mu, 0.3);
        EXPECT_LT((next.rowwise().norm().array() - 1.0).abs().maxCoeff(), 1e-12);
    }
}

TEST(Spherical, ConstantFieldHasZeroTension)
{
    const TorusGrid g(4, 4);
    Field s = constant_rows(g.size(), (Vector(3) << 0.6, 0.8, 0.0).finished());
    EXPECT_EQ(spherical_tension(s, box_weights(g), Vector::Ones(g.size())).cwiseAbs().maxCoeff(), 0.0);
}

TEST(Spherical, OrthogonalNeighbourCoefficient)
{
    const TorusGrid g(3, 3);
    Field s = constant_rows(g.size(), (Vector(2) << 1.0, 0.0).finished());
    s.row(1) << 0.0, 1.0;
    std::vector<Eigen::Triplet<double>> trip{{0, 1, 0.5}, {1, 0, 0.5}};
    SparseOperator w(g.size(), g.size());
    w.setFromTriplets(trip.begin(), trip.end());
    Vector mu = Vector::Ones(g.size());
    mu[0] = 2.0;
    const Field ups = spherical_tension(s, w, mu);
    EXPECT_NEAR(ups(0, 0), 0.0, 1e-16);
    EXPECT_NEAR(ups(0, 1), 0.5 * std::numbers::pi / 2 / 2.0, 1e-15);
}

TEST(Spherical, RejectsNonUnitRows)
{
    const TorusGrid g(3, 3);
    const Field s = Field::Constant(g.size(), 2, 1.0);
    EXPECT_THROW(spherical_tension(s, box_weights(g), Vector::Ones(g.size())), ValidationError);
}

TEST(Integrate, ZeroRhsKeepsState)
{
    const TorusGrid g(4, 4);
    const AssignmentField S(g, constant_rows(g.size(), (Vector(3) << 0.2, 0.3, 0.5).finished()));
    FlowSpec spec;
    spec.T = 1.0;
    for (Integrator sch : {Integrator::geometric_euler, Integrator::rk4, Integrator::rk_adaptive}) {
        spec.integrator.scheme = sch;
        const IntegrationResult r = integrate(S, spec);
        EXPECT_LT((r.final_state.S() - S.S()).cwiseAbs().maxCoeff(), 1e-15);
    }
}

TEST(Integrate, ConstantInitGrowsExponentially)
{
    const TorusGrid g(3, 3);
    const Vector v0 = (Vector(3) << 0.3, -0.1, -0.2).finished();
    const AssignmentField init(g, softmax_rows(constant_rows(g.size(), v0)));
    FlowSpec spec;
    spec.m_squared = 0.5;
    spec.T = 2.0;
    auto error = [&](Integrator sch, double step) {
        spec.integrator.scheme = sch;
        spec.integrator.step = step;
        const Field V = integrate_tangent(tangent_from_assignment(init), g, spec);
        return (V.row(0).transpose() - std::exp(0.5 * 2.0) * v0).cwiseAbs().maxCoeff();
    };
    const double e1 = error(Integrator::geometric_euler, 0.02), e2 = error(Integrator::geometric_euler, 0.01);
    EXPECT_GE(e1 / e2, 1.8);
    EXPECT_LE(e1 / e2, 2.2);
    const double r1 = error(Integrator::rk4, 0.2), r2 = error(Integrator::rk4, 0.1);
    EXPECT_GT(r1 / r2, 14.0);
    EXPECT_LT(r2, 1e-5);

    spec.integrator.scheme = Integrator::rk_adaptive;
    spec.integrator.step = 0.1;
    spec.integrator.rtol = spec.integrator.atol = 1e-9;
    const IntegrationResult res = integrate(init, spec);
    const Field V = tangent_from_assignment(res.final_state);
    EXPECT_LT((V.row(0).transpose() - std::exp(1.0) * v0).cwiseAbs().maxCoeff(), 1e-7);
}

TEST(Integrate, RecordAndSimplexPreservation)
{
    std::mt19937_64 rng(7);
    const TorusGrid g(8, 8);
    const AssignmentField init(g, softmax_rows(smooth_tangent_field(rng, 8, 8, 3, 1.0)));
    FlowSpec spec;
    spec.T = 2.0;
    spec.m_squared = 1.0;
    spec.integrator.step = 0.1;
    SamplingPlan plan{0.5, true};
    const IntegrationResult r = integrate(init, spec, plan);
    ASSERT_EQ(r.record.times.size(), 5u);
    for (std::size_t k = 1; k < r.record.times.size(); ++k) EXPECT_GT(r.record.times[k], r.record.times[k - 1]);
    EXPECT_DOUBLE_EQ(r.record.times.back(), 2.0);
    for (const Field& S : r.record.snapshots) {
        EXPECT_GT(S.minCoeff(), 0.0);
        EXPECT_LT((S.rowwise().sum().array() - 1.0).abs().maxCoeff(), 1e-9);
    }
    EXPECT_EQ(r.record.steps, 20);
}

TEST(Integrate, DivergenceReportsLastValidTime)
{
    const TorusGrid g(3, 3);
    const AssignmentField init(g, constant_rows(g.size(), (Vector(2) << 0.6, 0.4).finished()));
    FlowSpec spec;
    spec.m_squared = 1e4;
    spec.T = 1000.0;
    spec.integrator.step = 1.0;
    try {
        integrate(init, spec);
        FAIL();
    } catch (const NumericalError& e) {
        EXPECT_GT(e.last_valid_time(), 0.0);
        EXPECT_LT(e.last_valid_time(), 1000.0);
    }
}

TEST(Integrate, InvalidSpecRejected)
{
    const TorusGrid g(3, 3);
    FlowSpec spec;
    spec.T = 0.05;
    spec.integrator.step = 0.1;
    EXPECT_THROW(integrate(AssignmentField::barycenter(g, 2), spec), ValidationError);
}

TEST(Integrate, PerStepRefreshIsFlagged)
{
    std::mt19937_64 rng(8);
    const TorusGrid g(6, 6);
    const AssignmentField init(g, softmax_rows(random_tangent(rng, g.size(), 3, 1.0)));
    FlowSpec spec;
    spec.T = 0.4;
    spec.integrator.scheme = Integrator::rk4;
    spec.metric = structure_tensor_source(g, 1.0, 1.0, EdgeFunction::rational);
    spec.refresh = MetricRefresh::per_step;
    const IntegrationResult a = integrate(init, spec);
    EXPECT_EQ(a.record.refresh, MetricRefresh::per_step);
    spec.refresh = MetricRefresh::per_stage;
    const IntegrationResult b = integrate(init, spec);
    EXPECT_EQ(b.record.refresh, MetricRefresh::per_stage);
    EXPECT_GT((a.final_state.S() - b.final_state.S()).cwiseAbs().maxCoeff(), 0.0);
}

TEST(Lyapunov, BarycenterAndVertex)
{
    const TorusGrid g(4, 5);
    for (Index c : {2, 4, 6})
        EXPECT_NEAR(lyapunov(AssignmentField::barycenter(g, c), 0.0), -double(g.size()) * std::log(double(c)), 1e-10);
    Vector v = Vector::Constant(3, -20.0);
    v[1] = 40.0;
    const AssignmentField S(g, softmax_rows(constant_rows(g.size(), v)));
    EXPECT_NEAR(lyapunov(S, 0.0), 0.0, 1e-20);
}

TEST(Lyapunov, EulerStepDecreases)
{
    std::mt19937_64 rng(9);
    const TorusGrid g(16, 16);
    for (int t = 0; t < 5; ++t) {
        const Field V = smooth_tangent_field(rng, 16, 16, 3, 1.0);
        const Field V1 = V + 0.1 * sigma_rhs_tangent(TangentField(g, V), MetricField::identity(g), 0.0, 0.0);
        EXPECT_LT(lyapunov_tangent(V1, 0.0), lyapunov_tangent(V, 0.0));
    }
}

TEST(EntropyStats, Values)
{
    const TorusGrid g(3, 3);
    const EntropyStats u = entropy_stats(AssignmentField::barycenter(g, 4));
    EXPECT_NEAR(u.mean, std::log(4.0), 1e-14);
    Vector p = Vector::Constant(5, 0.025);
    p[2] = 0.9;
    const EntropyStats s = entropy_stats(AssignmentField(g, constant_rows(g.size(), p)));
    const double oracle = -(0.9 * std::log(0.9) + 4 * 0.025 * std::log(0.025));
    EXPECT_NEAR(s.max, oracle, 1e-14);
    EXPECT_EQ(s.labeling[0], 2);
}

TEST(EntropyStats, ArgmaxTiesAndTemperature)
{
    std::mt19937_64 rng(10);
    const TorusGrid g(3, 3);
    const AssignmentField tie(g, constant_rows(g.size(), (Vector(3) << 0.4, 0.4, 0.2).finished()));
    EXPECT_EQ(entropy_stats(tie).labeling[0], 0);
    const Field V = random_tangent(rng, g.size(), 5);
    const auto l1 = entropy_stats(softmax_rows(V)).labeling;
    const auto l2 = entropy_stats(softmax_rows(3.7 * V)).labeling;
    EXPECT_EQ(l1, l2);
}

TEST(Spectrum, FlatMatchesFourier)
{
    const Index H = 6, W = 8;
    const TorusGrid g(H, W);
    const SpectralDecomposition sd = laplacian_spectrum(MetricField::identity(g));
    std::vector<double> analytic;
    for (Index k = 0; k < H; ++k)
        for (Index l = 0; l < W; ++l)
            analytic.push_back(2 * std::cos(2 * std::numbers::pi * k / H) + 2 * std::cos(2 * std::numbers::pi * l / W) - 4);
    std::sort(analytic.rbegin(), analytic.rend());
    for (std::size_t n = 0; n < analytic.size(); ++n) EXPECT_NEAR(sd.eigenvalues[Index(n)], analytic[n], 1e-8);
    EXPECT_NEAR(sd.eigenvalues[0], 0.0, 1e-8);
}

TEST(Spectrum, AlephContainsZeroAndGrowsWithMass)
{
    std::mt19937_64 rng(11);
    const TorusGrid g(6, 6);
    const MetricField h = random_metric(rng, g);
    std::size_t prev = 0;
    for (double m2 : {0.0, 0.1, 0.5, 1.0, 4.0, 100.0}) {
        const LowFrequencySet lf = low_frequency_set(h, 0.5, m2, 3);
        EXPECT_EQ(lf.aleph.front(), 0);
        EXPECT_GE(lf.aleph.size(), prev);
        prev = lf.aleph.size();
        for (Index n = 1; n < lf.spectrum.eigenvalues.size(); ++n) EXPECT_LT(lf.spectrum.eigenvalues[n], 0.0);
    }
    EXPECT_EQ(low_frequency_set(h, 0.0, 5.0, 3).aleph.size(), 1u);
}

TEST(Spectrum, GuardOnLargeGrids)
{
    const TorusGrid g(65, 64);
    EXPECT_THROW(laplacian_spectrum(MetricField::identity(g)), CapabilityError);
}

TEST(Parametrization, EulerTrajectoriesAgreeAtFirstOrder)
{
    std::mt19937_64 rng(12);
    const TorusGrid g(8, 8);
    const AssignmentField init(g, softmax_rows(smooth_tangent_field(rng, 8, 8, 3, 0.5)));
    const MetricField h = MetricField::identity(g);
    FlowSpec spec;
    spec.m_squared = 0.5;
    spec.T = 1.0;
    auto gap = [&](double step) {
        spec.integrator.step = step;
        const Field St = softmax_rows(integrate_tangent(tangent_from_assignment(init), g, spec));
        return (St - integrate_ambient_euler(init, h, 0.0, 0.5, 1.0, step)).cwiseAbs().maxCoeff();
    };
    const double ratio = gap(0.05) / gap(0.025);
    EXPECT_GE(ratio, 1.8);
    EXPECT_LE(ratio, 2.2);
}
