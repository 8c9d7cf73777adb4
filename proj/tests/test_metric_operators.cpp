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

#include <sigmaflow/metric_operators.hpp>

#include <gtest/gtest.h>

#include <cmath>
#include <random>

using namespace sigmaflow;
using sigmaflow::testing::random_field;
using sigmaflow::testing::rel_err;

namespace {

std::vector<int> random_labels(std::mt19937_64& rng, Index n, int c)
{
    std::uniform_int_distribution<int> u(0, c - 1);
    std::vector<int> out(static_cast<std::size_t>(n));
    for (auto& l : out) l = u(rng);
    return out;
}

Field random_state(std::mt19937_64& rng, Index n, Index c)
{
    return softmax_rows(project_rows_T0(random_field(rng, n, c, -1.5, 1.5)));
}

NetworkShape small_shape()
{
    NetworkShape sh;
    sh.labels = 3;
    sh.kernel = 3;
    sh.filters = 4;
    sh.hidden = {5, 4};
    return sh;
}

OperatorParams perturbed_params(std::mt19937_64& rng, const NetworkShape& sh)
{
    OperatorParams p = OperatorParams::initialized(sh, rng());
    // Move away from the identity head so every parameter group gets gradient signal.
    p.values() += 0.3 * sigmaflow::testing::random_vector(rng, p.size());
    return p;
}

// Central differences of the batch loss along selected coordinates.
template <typename Eval>
void check_gradient(Eval eval, Vector x, const Vector& grad, std::mt19937_64& rng, int probes)
{
    std::uniform_int_distribution<Index> pick(0, x.size() - 1);
    const double gmax = grad.cwiseAbs().maxCoeff();
    ASSERT_GT(gmax, 0.0);
    for (int k = 0; k < probes; ++k) {
        const Index i = k < 3 ? Index(k) * (x.size() - 1) / 2 : pick(rng);
        const double h = 1e-5 * std::max(1.0, std::abs(x[i]));
        Vector xp = x, xm = x;
        xp[i] += h;
        xm[i] -= h;
        const double fd = (eval(xp) - eval(xm)) / (2 * h);
        EXPECT_LT(std::abs(fd - grad[i]), 1e-4 * std::max({std::abs(fd), std::abs(grad[i]), 1e-3 * gmax}))
            << "coordinate " << i << " fd " << fd << " analytic " << grad[i];
    }
}

} // namespace

TEST(LabelLoss, Examples)
{
    std::mt19937_64 rng(1);
    const TorusGrid g(4, 4);
    const AssignmentField S(g, random_state(rng, g.size(), 3));
    EXPECT_NEAR(label_loss(S, S.S()), 0.0, 1e-13);
    EXPECT_NEAR(label_loss(S, S.S(), LossKind::kl_model_target), 0.0, 1e-13);

    const LabelField lab(g, random_labels(rng, g.size(), 4), 4);
    EXPECT_NEAR(label_loss(AssignmentField::barycenter(g, 4), lab), double(g.size()) * std::log(4.0), 1e-12);

    // Replacing any row by its target row lowers the soft loss.
    const Field target = random_state(rng, g.size(), 3);
    const double before = label_loss(S, target);
    for (Index a = 0; a < g.size(); ++a) {
        Field s2 = S.S();
        s2.row(a) = target.row(a);
        EXPECT_LT(label_loss(AssignmentField(g, s2), target), before);
    }
    EXPECT_GE(label_loss(S, target), 0.0);
    EXPECT_THROW(LabelField(g, std::vector<int>(std::size_t(g.size()), 5), 4), ValidationError);
}

TEST(LabelLoss, SoftTargetsWithZeros)
{
    const TorusGrid g(3, 3);
    Field t = Field::Zero(g.size(), 3);
    t.col(1).setOnes();
    const AssignmentField S = AssignmentField::barycenter(g, 3);
    EXPECT_NEAR(label_loss(S, t), double(g.size()) * std::log(3.0), 1e-12);
    EXPECT_THROW(label_loss(S, t, LossKind::kl_model_target), DomainError);
}

TEST(LabelLoss, SmoothedTargetsRaiseTheFloor)
{
    // The cross-entropy floor over S equals the target entropy, attained at S = T.
    const TorusGrid g(3, 3);
    double prev = -1.0;
    for (double s : {0.9, 0.8, 0.6}) {
        Field t = Field::Constant(g.size(), 4, (1.0 - s) / 4);
        t.col(0).array() += s;
        const double floor = -(t.array() * t.array().log()).sum();
        const double ce_at_target = label_loss(AssignmentField(g, t), t) + floor;
        EXPECT_NEAR(ce_at_target, floor, 1e-12);
        EXPECT_GT(floor, prev);
        prev = floor;
    }
}

TEST(OperatorForward, ZeroWeights)
{
    std::mt19937_64 rng(2);
    const TorusGrid g(5, 5);
    const OperatorParams p(small_shape());
    const MetricField m = operator_forward(p, AssignmentField(g, random_state(rng, g.size(), 3)), 0.5);
    const ParamMetric ref = metric_from_params_node(0, 0, 0);
    for (Index a = 0; a < g.size(); ++a)
        for (int k = 0; k < 3; ++k) EXPECT_EQ(m.components()(a, k), ref.hinv[std::size_t(k)]);
}

TEST(OperatorForward, IdentityInitialization)
{
    std::mt19937_64 rng(3);
    const TorusGrid g(6, 6);
    const OperatorParams p = OperatorParams::initialized(small_shape(), 7, 0.0);
    const MetricField m = operator_forward(p, AssignmentField(g, random_state(rng, g.size(), 3)), 0.0);
    EXPECT_LT((m.components() - MetricField::identity(g).components()).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(OperatorForward, TranslationEquivariant)
{
    std::mt19937_64 rng(4);
    const TorusGrid g(6, 7);
    const OperatorParams p = perturbed_params(rng, small_shape());
    const Field S = random_state(rng, g.size(), 3);
    Field shifted(S.rows(), S.cols());
    for (Index a = 0; a < g.size(); ++a) shifted.row(g.shift(a, 2, -3)) = S.row(a);
    const Field m0 = operator_forward(p, AssignmentField(g, S), 0.3).components();
    const Field m1 = operator_forward(p, AssignmentField(g, shifted), 0.3).components();
    for (Index a = 0; a < g.size(); ++a) EXPECT_EQ(m1.row(g.shift(a, 2, -3)), m0.row(a));
}

TEST(OperatorForward, UniformLowerBound)
{
    std::mt19937_64 rng(5);
    const TorusGrid g(8, 8);
    for (int t = 0; t < 5; ++t) {
        OperatorParams p(small_shape());
        p.values() = 5.0 * sigmaflow::testing::random_vector(rng, p.size());
        EXPECT_GT(operator_forward(p, AssignmentField(g, random_state(rng, g.size(), 3)), 1.0).lower_bound(), 0.0098);
    }
    EXPECT_THROW(operator_forward(OperatorParams(small_shape()), AssignmentField::barycenter(g, 4), 0.0), ValidationError);
    EXPECT_THROW(operator_forward(OperatorParams(small_shape()), AssignmentField::barycenter(g, 3), 1.5), ValidationError);
}

TEST(Unrolled, ForwardMatchesIntegrate)
{
    std::mt19937_64 rng(6);
    const TorusGrid g(6, 6);
    const OperatorParams p = perturbed_params(rng, small_shape());
    const Sample s{random_state(rng, g.size(), 3), random_labels(rng, g.size(), 3), 0};
    UnrolledSpec us;
    us.T = 0.6;
    us.step = 0.2;
    us.m_squared = 1.0;
    const Tape tape = record_forward(NetworkModel{p}, g, s, us);
    FlowSpec fs = us.flow_spec();
    fs.metric = learned_metric(g, p);
    const Field V = integrate_tangent(tape.V.front(), g, fs);
    EXPECT_LT((V - tape.V.back()).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Unrolled, ReplayIsBitwise)
{
    std::mt19937_64 rng(7);
    const TorusGrid g(5, 6);
    const OperatorParams p = perturbed_params(rng, small_shape());
    const Sample s{random_state(rng, g.size(), 3), random_labels(rng, g.size(), 3), 3};
    UnrolledSpec us;
    us.T = 0.4;
    const Tape a = record_forward(NetworkModel{p}, g, s, us);
    const Tape b = replay(NetworkModel{p}, g, a, s, us);
    ASSERT_EQ(a.V.size(), b.V.size());
    for (std::size_t k = 0; k < a.V.size(); ++k) EXPECT_TRUE(a.V[k] == b.V[k]);
    for (std::size_t k = 0; k < a.params.size(); ++k) EXPECT_TRUE(a.params[k] == b.params[k]);
    EXPECT_EQ(a.loss, b.loss);
}

TEST(Unrolled, ZeroStepFlow)
{
    std::mt19937_64 rng(8);
    const TorusGrid g(4, 4);
    const OperatorParams p = perturbed_params(rng, small_shape());
    const Sample s{random_state(rng, g.size(), 3), random_labels(rng, g.size(), 3), 0};
    UnrolledSpec us;
    us.T = 0.0;
    const LossGrad lg = loss_and_grad(p, g, {s}, us);
    EXPECT_NEAR(lg.loss, label_loss(AssignmentField(g, s.init), LabelField(g, std::get<std::vector<int>>(s.target), 3)), 1e-12);
    EXPECT_EQ(lg.grad.cwiseAbs().maxCoeff(), 0.0);
}

TEST(Unrolled, FitMetricGradientMatchesFiniteDifferences)
{
    std::mt19937_64 rng(9);
    const TorusGrid g(8, 8);
    const Field P = random_field(rng, g.size(), 3, -1.5, 1.5);
    std::vector<Sample> batch{{random_state(rng, g.size(), 3), random_labels(rng, g.size(), 3), 0},
                              {random_state(rng, g.size(), 3), Field(random_state(rng, g.size(), 3)), 1}};
    UnrolledSpec us;
    us.T = 0.4;
    us.step = 0.2;
    us.m_squared = 1.0;
    us.alpha = 0.2;
    // Mixed targets in one batch: the first sample uses cross-entropy, the second KL(T:S).
    us.loss = LossKind::kl_target_model;
    const LossGrad lg = loss_and_grad(P, g, batch, us);
    auto eval = [&](const Vector& x) {
        const Field Px = Eigen::Map<const Field>(x.data(), g.size(), 3);
        return loss_and_grad(Px, g, batch, us).loss;
    };
    check_gradient(eval, Eigen::Map<const Vector>(P.data(), P.size()), lg.grad, rng, 40);
}

TEST(Unrolled, LearnedOperatorGradientMatchesFiniteDifferences)
{
    std::mt19937_64 rng(10);
    const TorusGrid g(8, 8);
    const OperatorParams p = perturbed_params(rng, small_shape());
    std::vector<Sample> batch{{random_state(rng, g.size(), 3), random_labels(rng, g.size(), 3), 0}};
    UnrolledSpec us;
    us.T = 0.4;
    us.step = 0.2;
    us.m_squared = 2.0;
    const LossGrad lg = loss_and_grad(p, g, batch, us);
    auto eval = [&](const Vector& x) {
        OperatorParams q = p;
        q.values() = x;
        return loss_and_grad(q, g, batch, us).loss;
    };
    check_gradient(eval, p.values(), lg.grad, rng, 40);
}

TEST(Unrolled, KlModelTargetGradient)
{
    std::mt19937_64 rng(11);
    const TorusGrid g(5, 5);
    const Field P = random_field(rng, g.size(), 3, -1, 1);
    std::vector<Sample> batch{{random_state(rng, g.size(), 4), Field(random_state(rng, g.size(), 4)), 0}};
    UnrolledSpec us;
    us.T = 0.4;
    us.loss = LossKind::kl_model_target;
    const LossGrad lg = loss_and_grad(P, g, batch, us);
    auto eval = [&](const Vector& x) {
        return loss_and_grad(Field(Eigen::Map<const Field>(x.data(), g.size(), 3)), g, batch, us).loss;
    };
    check_gradient(eval, Eigen::Map<const Vector>(P.data(), P.size()), lg.grad, rng, 20);
}

TEST(Unrolled, DeterministicAcrossThreadCounts)
{
    std::mt19937_64 rng(12);
    const TorusGrid g(6, 6);
    const OperatorParams p = perturbed_params(rng, small_shape());
    std::vector<Sample> batch;
    for (int i = 0; i < 4; ++i) batch.push_back({random_state(rng, g.size(), 3), random_labels(rng, g.size(), 3), std::uint64_t(i)});
    UnrolledSpec us;
    us.T = 0.4;
    set_num_threads(1);
    const LossGrad a = loss_and_grad(p, g, batch, us);
    set_num_threads(3);
    const LossGrad b = loss_and_grad(p, g, batch, us);
    set_num_threads(1);
    EXPECT_EQ(a.loss, b.loss);
    EXPECT_TRUE(a.grad == b.grad);
}

TEST(Unrolled, NonFiniteLossNamesSample)
{
    const TorusGrid g(3, 3);
    Field P = Field::Zero(g.size(), 3);
    std::vector<Sample> batch{{AssignmentField::barycenter(g, 2).S(), std::vector<int>(9, 0), 17}};
    UnrolledSpec us;
    us.m_squared = 1e300;
    us.T = 1.0;
    batch[0].init(0, 0) = 0.7;
    batch[0].init(0, 1) = 0.3;
    try {
        loss_and_grad(P, g, batch, us);
        FAIL();
    } catch (const NumericalError& e) {
        EXPECT_NE(std::string(e.what()).find("17"), std::string::npos);
    }
}

TEST(Optimizer, ZeroGradientLeavesParameters)
{
    for (auto kind : {OptimizerKind::adabelief, OptimizerKind::adam}) {
        OptimizerState st = make_optimizer(kind, 4);
        Vector x = Vector::LinSpaced(4, -1, 1);
        const Vector x0 = x;
        for (int k = 0; k < 100; ++k) optimizer_step(st, x, Vector::Zero(4), 0.1);
        EXPECT_TRUE(x == x0);
    }
}

TEST(Optimizer, ConstantGradientFixedPoints)
{
    const Vector g = (Vector(3) << 2.0, -0.5, 1e-3).finished();
    const double lr = 1e-3;
    // Adam: m_hat -> g and v_hat -> g^2, so each step tends to lr * sign(g).
    OptimizerState adam = make_optimizer(OptimizerKind::adam, 3);
    Vector x = Vector::Zero(3);
    for (int k = 0; k < 3000; ++k) optimizer_step(adam, x, g, lr);
    Vector before = x;
    optimizer_step(adam, x, g, lr);
    for (Index i = 0; i < 3; ++i) EXPECT_NEAR((before - x)[i], lr * (g[i] > 0 ? 1 : -1), 1e-3 * lr);

    // AdaBelief: the belief term (g - m)^2 decays, leaving s at the eps accumulation
    // sum_k beta2^k eps = eps (1 - beta2^t) / (1 - beta2), so s_hat -> eps / (1 - beta2).
    OptimizerState ab = make_optimizer(OptimizerKind::adabelief, 3);
    ab.eps = 1e-8;
    x.setZero();
    for (int k = 0; k < 30000; ++k) optimizer_step(ab, x, g, lr);
    before = x;
    optimizer_step(ab, x, g, lr);
    const double shat = ab.eps / (1.0 - ab.beta2);
    for (Index i = 0; i < 3; ++i) {
        const double expected = lr * g[i] / (std::sqrt(shat) + ab.eps);
        EXPECT_LT(rel_err((before - x)[i], expected), 1e-3);
    }
}

TEST(Optimizer, Deterministic)
{
    std::mt19937_64 r1(13), r2(13);
    OptimizerState a = make_optimizer(OptimizerKind::adabelief, 5), b = make_optimizer(OptimizerKind::adabelief, 5);
    Vector xa = Vector::Zero(5), xb = Vector::Zero(5);
    for (int k = 0; k < 50; ++k) {
        optimizer_step(a, xa, sigmaflow::testing::random_vector(r1, 5), 0.01);
        optimizer_step(b, xb, sigmaflow::testing::random_vector(r2, 5), 0.01);
    }
    EXPECT_TRUE(xa == xb);
}

TEST(Checkpoint, RoundTripAndValidation)
{
    std::mt19937_64 rng(14);
    const OperatorParams p = perturbed_params(rng, small_shape());
    const std::string blob = serialize_params(p);
    const OperatorParams q = deserialize_params(blob);
    EXPECT_EQ(q.shape(), p.shape());
    EXPECT_TRUE(q.values() == p.values());
    EXPECT_EQ(blob.substr(0, 8), "SGFLOWCK");
    EXPECT_THROW(deserialize_params(blob.substr(0, blob.size() - 3)), ParseError);
    std::string bad = blob;
    bad[0] = 'X';
    EXPECT_THROW(deserialize_params(bad), ParseError);
}
