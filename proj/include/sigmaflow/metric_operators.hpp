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

#include "flow_engine.hpp"
#include "parallel.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <random>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

namespace sigmaflow {

/// Integer label per node.
class LabelField
{
public:
    LabelField(TorusGrid grid, std::vector<int> labels, int c)
        : m_grid(grid)
        , m_labels(std::move(labels))
        , m_c(c)
    {
        if (Index(m_labels.size()) != grid.size()) throw ValidationError("LabelField: expected one label per node");
        if (c < 1) throw ValidationError("LabelField: need at least one label");
        for (std::size_t a = 0; a < m_labels.size(); ++a) {
            if (m_labels[a] < 0 || m_labels[a] >= c) {
                throw ValidationError("LabelField: label out of range at node " + std::to_string(a));
            }
        }
    }

    const TorusGrid& grid() const { return m_grid; }
    const std::vector<int>& labels() const { return m_labels; }
    int labels_count() const { return m_c; }
    int operator[](Index a) const { return m_labels[std::size_t(a)]; }
    bool operator==(const LabelField&) const = default;

private:
    TorusGrid m_grid;
    std::vector<int> m_labels;
    int m_c;
};

// ---------------------------------------------------------------------------
// Losses

enum class LossKind
{
    cross_entropy,  ///< integer targets: sum_a -log S_a(l_a)
    kl_target_model, ///< soft targets: sum T (log T - log S)
    kl_model_target  ///< soft targets: sum S (log S - log T)
};

/// Target of a labeling run: integer labels or a soft assignment.
using Target = std::variant<std::vector<int>, Field>;

namespace detail {

inline double xlogy_row_sum(const Eigen::Ref<const Eigen::RowVectorXd>& t, const Eigen::Ref<const Eigen::RowVectorXd>& logs)
{
    double s = 0.0;
    for (Index i = 0; i < t.size(); ++i)
        if (t[i] > 0.0) s += t[i] * (std::log(t[i]) - logs[i]);
    return s;
}

// Loss and its gradient with respect to the tangent state V (S = softmax V).
inline double loss_from_tangent(const Field& V, const Target& target, LossKind kind, Field* vbar)
{
    const Field ls = log_softmax_rows(V);
    const Field S = ls.array().exp().matrix();
    const Index n = V.rows(), c = V.cols();
    double loss = 0.0;
    if (vbar) vbar->resize(n, c);
    if (const auto* lab = std::get_if<std::vector<int>>(&target)) {
        if (Index(lab->size()) != n) throw ValidationError("label_loss: shape mismatch");
        for (Index a = 0; a < n; ++a) {
            const int l = (*lab)[std::size_t(a)];
            if (l < 0 || l >= c) throw ValidationError("label_loss: label out of range at node " + std::to_string(a));
            loss -= ls(a, l);
            if (vbar) {
                vbar->row(a) = S.row(a);
                (*vbar)(a, l) -= 1.0;
            }
        }
        return loss;
    }
    const Field& T = std::get<Field>(target);
    if (T.rows() != n || T.cols() != c) throw ValidationError("label_loss: shape mismatch");
    if (kind == LossKind::kl_model_target) {
        if (!(T.minCoeff() > 0.0)) throw DomainError("label_loss: KL(S:T) needs a strictly positive target");
        const Field w = ls - T.array().log().matrix();
        loss = (S.array() * w.array()).sum();
        if (vbar) *vbar = apply_replicator_rows(S, w);
        return loss;
    }
    for (Index a = 0; a < n; ++a) {
        loss += xlogy_row_sum(T.row(a), ls.row(a));
        if (vbar) vbar->row(a) = S.row(a) * T.row(a).sum() - T.row(a);
    }
    return loss;
}

} // namespace detail

/// Cross-entropy against integer labels.
inline double label_loss(const AssignmentField& S, const LabelField& target)
{
    if (S.size() != target.grid().size()) throw ValidationError("label_loss: shape mismatch");
    if (S.labels() < target.labels_count()) throw ValidationError("label_loss: label out of range");
    return detail::loss_from_tangent(tangent_from_assignment(S), target.labels(), LossKind::cross_entropy, nullptr);
}

/// Soft-target divergence in either direction (0 log 0 = 0).
inline double label_loss(const AssignmentField& S, const Field& target, LossKind kind = LossKind::kl_target_model)
{
    return detail::loss_from_tangent(tangent_from_assignment(S), target, kind, nullptr);
}

// ---------------------------------------------------------------------------
// Learned operator: periodic convolution + per-node MLP + SPD head

struct NetworkShape
{
    Index labels = 5;
    Index kernel = 7;
    Index filters = 16;
    std::vector<Index> hidden{16, 8, 4};

    Index in_channels() const { return labels + 1; }
    bool operator==(const NetworkShape&) const = default;

    /// Widths after the convolution: filters, hidden..., 3.
    std::vector<Index> layer_sizes() const
    {
        std::vector<Index> s{filters};
        s.insert(s.end(), hidden.begin(), hidden.end());
        s.push_back(3);
        return s;
    }

    void validate() const
    {
        if (labels < 2 || kernel < 1 || kernel % 2 == 0 || filters < 1)
            throw ValidationError("NetworkShape: need c >= 2, odd kernel, filters >= 1");
        for (Index h : hidden)
            if (h < 1) throw ValidationError("NetworkShape: hidden widths must be positive");
    }
};

/// All weights in one flat vector, in declaration order: conv kernel (filter-major,
/// then channel, row, column), conv bias, then weight (row-major) and bias per layer.
class OperatorParams
{
public:
    explicit OperatorParams(NetworkShape shape)
        : m_shape(std::move(shape))
    {
        m_shape.validate();
        Index off = 0;
        m_conv_w = off;
        off += patch_size() * m_shape.filters;
        m_conv_b = off;
        off += m_shape.filters;
        const auto sizes = m_shape.layer_sizes();
        for (std::size_t l = 1; l < sizes.size(); ++l) {
            m_layer_w.push_back(off);
            off += sizes[l] * sizes[l - 1];
            m_layer_b.push_back(off);
            off += sizes[l];
        }
        m_values = Vector::Zero(off);
    }

    /// Uniform fan-in initialization with the output bias at the identity metric.
    static OperatorParams initialized(const NetworkShape& shape, std::uint64_t seed, double output_scale = 0.01)
    {
        OperatorParams p(shape);
        std::mt19937_64 rng(seed);
        auto fill = [&](Index off, Index count, double bound) {
            std::uniform_real_distribution<double> u(-bound, bound);
            for (Index i = 0; i < count; ++i) p.m_values[off + i] = u(rng);
        };
        fill(p.m_conv_w, p.patch_size() * shape.filters, 1.0 / std::sqrt(double(p.patch_size())));
        const auto sizes = shape.layer_sizes();
        for (std::size_t l = 1; l < sizes.size(); ++l) {
            const double bound = 1.0 / std::sqrt(double(sizes[l - 1]));
            const bool last = l + 1 == sizes.size();
            fill(p.m_layer_w[l - 1], sizes[l] * sizes[l - 1], last ? output_scale * bound : bound);
        }
        Index out_b = p.m_layer_b.back();
        p.m_values[out_b + 0] = identity_param();
        p.m_values[out_b + 1] = 0.0;
        p.m_values[out_b + 2] = identity_param();
        return p;
    }

    const NetworkShape& shape() const { return m_shape; }
    Vector& values() { return m_values; }
    const Vector& values() const { return m_values; }
    Index size() const { return m_values.size(); }
    Index patch_size() const { return m_shape.in_channels() * m_shape.kernel * m_shape.kernel; }
    std::size_t layers() const { return m_layer_w.size(); }

    Eigen::Map<const Matrix> conv_weights() const { return {m_values.data() + m_conv_w, patch_size(), m_shape.filters}; }
    Eigen::Map<const Vector> conv_bias() const { return {m_values.data() + m_conv_b, m_shape.filters}; }
    Eigen::Map<const Eigen::Matrix<double, -1, -1, Eigen::RowMajor>> layer_weights(std::size_t l) const
    {
        const auto s = m_shape.layer_sizes();
        return {m_values.data() + m_layer_w[l], s[l + 1], s[l]};
    }
    Eigen::Map<const Vector> layer_bias(std::size_t l) const
    {
        return {m_values.data() + m_layer_b[l], m_shape.layer_sizes()[l + 1]};
    }
    Index conv_weights_offset() const { return m_conv_w; }
    Index conv_bias_offset() const { return m_conv_b; }
    Index layer_weights_offset(std::size_t l) const { return m_layer_w[l]; }
    Index layer_bias_offset(std::size_t l) const { return m_layer_b[l]; }

private:
    NetworkShape m_shape;
    Vector m_values;
    Index m_conv_w = 0, m_conv_b = 0;
    std::vector<Index> m_layer_w, m_layer_b;
};

namespace detail {

struct NetworkCache
{
    Matrix patches;              ///< N x (cin K^2)
    std::vector<Matrix> acts;    ///< post-tanh activations: conv, hidden layers
    Matrix out;                  ///< N x 3 raw metric parameters
};

inline Matrix build_patches(const TorusGrid& grid, const Field& S, double t_norm, Index K)
{
    const Index n = grid.size(), c = S.cols(), cin = c + 1, r = K / 2;
    Matrix P(n, cin * K * K);
    for (Index a = 0; a < n; ++a) {
        for (Index di = 0; di < K; ++di)
            for (Index dj = 0; dj < K; ++dj) {
                const Index b = grid.shift(a, di - r, dj - r);
                for (Index ch = 0; ch < c; ++ch) P(a, (ch * K + di) * K + dj) = S(b, ch);
                P(a, (c * K + di) * K + dj) = t_norm;
            }
    }
    return P;
}

// out(a, o) = b_o + sum_i in(a, i) W(o, i), summed in a fixed order per row so that
// every node is computed by identical arithmetic (exact translation equivariance).
template <typename WMat>
Matrix rowwise_affine(const Matrix& in, const WMat& w_out_in, const Eigen::Ref<const Vector>& b)
{
    const Index n = in.rows(), ni = in.cols(), no = b.size();
    Matrix out(n, no);
    for (Index a = 0; a < n; ++a)
        for (Index o = 0; o < no; ++o) {
            double acc = b[o];
            for (Index i = 0; i < ni; ++i) acc += in(a, i) * w_out_in(o, i);
            out(a, o) = acc;
        }
    return out;
}

inline NetworkCache network_forward(const OperatorParams& p, const TorusGrid& grid, const Field& S, double t_norm)
{
    const NetworkShape& sh = p.shape();
    if (S.rows() != grid.size() || S.cols() != sh.labels) throw ValidationError("operator_forward: shape mismatch");
    if (!(t_norm >= 0.0 && t_norm <= 1.0)) throw ValidationError("operator_forward: t_norm must lie in [0, 1]");
    NetworkCache cache;
    cache.patches = build_patches(grid, S, t_norm, sh.kernel);
    const Matrix wt = p.conv_weights().transpose();
    cache.acts.push_back(rowwise_affine(cache.patches, wt, p.conv_bias()).array().tanh().matrix());
    for (std::size_t l = 0; l < p.layers(); ++l) {
        Matrix zl = rowwise_affine(cache.acts.back(), p.layer_weights(l), p.layer_bias(l));
        if (l + 1 == p.layers()) {
            cache.out = std::move(zl);
        } else {
            cache.acts.push_back(zl.array().tanh().matrix());
        }
    }
    return cache;
}

// Accumulates d loss / d weights into grad and returns d loss / d S.
inline Field network_backward(const OperatorParams& p, const TorusGrid& grid, const NetworkCache& cache,
                              const Matrix& out_bar, Vector& grad)
{
    const NetworkShape& sh = p.shape();
    Matrix gbar = out_bar;
    for (std::size_t l = p.layers(); l-- > 0;) {
        const Matrix& in = cache.acts[l];
        const auto sizes = sh.layer_sizes();
        Eigen::Map<Eigen::Matrix<double, -1, -1, Eigen::RowMajor>> gw(grad.data() + p.layer_weights_offset(l), sizes[l + 1],
                                                                       sizes[l]);
        gw += gbar.transpose() * in;
        grad.segment(p.layer_bias_offset(l), sizes[l + 1]) += gbar.colwise().sum().transpose();
        Matrix abar = gbar * p.layer_weights(l);
        gbar = (abar.array() * (1.0 - in.array().square())).matrix();
    }
    Eigen::Map<Matrix> gcw(grad.data() + p.conv_weights_offset(), p.patch_size(), sh.filters);
    gcw += cache.patches.transpose() * gbar;
    grad.segment(p.conv_bias_offset(), sh.filters) += gbar.colwise().sum().transpose();

    const Matrix pbar = gbar * p.conv_weights().transpose();
    const Index K = sh.kernel, r = K / 2, c = sh.labels;
    Field sbar = Field::Zero(grid.size(), c);
    for (Index a = 0; a < grid.size(); ++a)
        for (Index di = 0; di < K; ++di)
            for (Index dj = 0; dj < K; ++dj) {
                const Index b = grid.shift(a, di - r, dj - r);
                for (Index ch = 0; ch < c; ++ch) sbar(b, ch) += pbar(a, (ch * K + di) * K + dj);
            }
    return sbar;
}

} // namespace detail

/// Raw per-node metric parameters predicted by the network.
inline Field operator_params_field(const OperatorParams& params, const TorusGrid& grid, const Field& S, double t_norm)
{
    return Field(detail::network_forward(params, grid, S, t_norm).out);
}

/// O(S, t): learned inverse metric field.
inline MetricField operator_forward(const OperatorParams& params, const AssignmentField& S, double t_norm)
{
    return metric_from_params(S.grid(), operator_params_field(params, S.grid(), S.S(), t_norm));
}

inline MetricSource learned_metric(const TorusGrid& grid, OperatorParams params)
{
    return {MetricSource::Kind::learned, true, [grid, p = std::move(params)](const Field& S, double t_norm) {
                return metric_from_params(grid, operator_params_field(p, grid, S, t_norm));
            }};
}

// ---------------------------------------------------------------------------
// Unrolled Euler flow with reverse-mode gradients

/// Fixed-step geometric Euler flow used for differentiation.
struct UnrolledSpec
{
    double alpha = 0.0;
    double m_squared = 4.0;
    double T = 2.0;
    double step = 0.2;
    LossKind loss = LossKind::cross_entropy;

    long steps() const
    {
        if (T == 0.0) return 0;
        if (!(step > 0.0) || T < 0.0) throw ValidationError("UnrolledSpec: need step > 0 and T >= 0");
        const double n = T / step;
        const long k = std::lround(n);
        if (std::abs(n - double(k)) > 1e-9 * std::max(1.0, n)) throw ValidationError("UnrolledSpec: T must be a multiple of step");
        return k;
    }

    FlowSpec flow_spec() const
    {
        FlowSpec f;
        f.alpha = alpha;
        f.m_squared = m_squared;
        f.T = T;
        f.integrator.scheme = Integrator::geometric_euler;
        f.integrator.step = step;
        return f;
    }
};

struct Sample
{
    Field init; ///< S0, N x c
    Target target;
    std::uint64_t id = 0;
};

/// Forward intermediates of one unrolled run.
struct Tape
{
    std::vector<Field> V;       ///< tangent states V_0 .. V_n
    std::vector<Field> params;  ///< raw metric parameters used at each step
    std::vector<double> t_norm; ///< normalized time at each step
    double loss = 0.0;
};

/// Metric model for fit-metric mode: one free N x 3 parameter field.
struct FreeParamsModel
{
    const Field& P;
    Field params(const TorusGrid&, const Field&, double) const { return P; }
    Field backward(const TorusGrid&, const Field& S, double, const Field& pbar, Vector& grad) const
    {
        Eigen::Map<Field>(grad.data(), P.rows(), 3) += pbar;
        return Field::Zero(S.rows(), S.cols());
    }
    Index size() const { return P.size(); }
};

/// Metric model for the learned operator.
struct NetworkModel
{
    const OperatorParams& op;
    Field params(const TorusGrid& grid, const Field& S, double t) const { return operator_params_field(op, grid, S, t); }
    Field backward(const TorusGrid& grid, const Field& S, double t, const Field& pbar, Vector& grad) const
    {
        const detail::NetworkCache cache = detail::network_forward(op, grid, S, t);
        return detail::network_backward(op, grid, cache, Matrix(pbar), grad);
    }
    Index size() const { return op.size(); }
};

namespace detail {

inline Field hinv_from_params(const Field& P)
{
    Field h(P.rows(), 3);
    for (Index a = 0; a < P.rows(); ++a) {
        const ParamMetric pm = metric_from_params_node(P(a, 0), P(a, 1), P(a, 2));
        h.row(a) << pm.hinv[0], pm.hinv[1], pm.hinv[2];
    }
    return h;
}

inline Field euler_step(const TorusGrid& grid, const Field& V, const Field& P, const UnrolledSpec& us)
{
    const MetricField h = metric_from_params(grid, P);
    return project_rows_T0(V + us.step * tangent_rhs_raw(V, h, us.alpha, us.m_squared));
}

// Reverse pass through one Euler step. Returns d loss / d V_k and the gradient with
// respect to the step's raw metric parameters.
inline Field euler_step_adjoint(const TorusGrid& grid, const Field& V, const Field& P, const UnrolledSpec& us,
                                const Field& ubar, Field& pbar)
{
    const Index n = V.rows();
    const Field zb = project_rows_T0(ubar);
    Field vbar = zb;
    const Field yb = project_rows_T0(us.step * zb);
    if (us.m_squared != 0.0) vbar += us.m_squared * yb;

    Field hb = Field::Zero(n, 3);
    const Field hinv = hinv_from_params(P);
    // Laplace-Beltrami term q .* E(coef) V.
    Field coef(n, 3);
    Vector q(n);
    for (Index a = 0; a < n; ++a) {
        const double det = hinv(a, 0) * hinv(a, 2) - hinv(a, 1) * hinv(a, 1);
        q[a] = std::sqrt(det);
        coef.row(a) = hinv.row(a) / q[a];
    }
    const Field ev = apply_divergence(grid, coef, V);
    const Field evb = q.asDiagonal() * yb;
    const Vector qbar = (yb.array() * ev.array()).rowwise().sum();
    vbar += apply_divergence(grid, coef, evb);
    const Field coefb = divergence_coefficient_adjoint(grid, evb, V);

    if (us.alpha != 1.0) {
        const double kappa = 0.5 * (1.0 - us.alpha);
        const Field ls = log_softmax_rows(V);
        const auto [fx, fy] = apply_derivatives(grid, ls);
        const Field pb = kappa * yb;
        Field fxb(n, V.cols()), fyb(n, V.cols());
        for (Index a = 0; a < n; ++a) {
            const auto px = fx.row(a).array(), py = fy.row(a).array(), w = pb.row(a).array();
            hb(a, 0) += (w * px.square()).sum();
            hb(a, 1) += 2.0 * (w * px * py).sum();
            hb(a, 2) += (w * py.square()).sum();
            fxb.row(a) = 2.0 * w * (hinv(a, 0) * px + hinv(a, 1) * py);
            fyb.row(a) = 2.0 * w * (hinv(a, 1) * px + hinv(a, 2) * py);
        }
        const Field lsb = apply_derivatives_adjoint(grid, fxb, fyb);
        const Field S = ls.array().exp().matrix();
        for (Index a = 0; a < n; ++a) vbar.row(a) += lsb.row(a) - S.row(a) * lsb.row(a).sum();
    }

    for (Index a = 0; a < n; ++a) {
        const double d = q[a] * q[a];
        const double inv_s = 1.0 / q[a], inv_s3 = inv_s / d;
        const double dd[3] = {hinv(a, 2), -2.0 * hinv(a, 1), hinv(a, 0)};
        const double cb_dot_h = coefb.row(a).dot(hinv.row(a));
        for (int j = 0; j < 3; ++j) {
            hb(a, j) += coefb(a, j) * inv_s - 0.5 * cb_dot_h * dd[j] * inv_s3 + 0.5 * qbar[a] * dd[j] * inv_s;
        }
    }

    pbar.resize(n, 3);
    for (Index a = 0; a < n; ++a) {
        const ParamMetric pm = metric_from_params_node(P(a, 0), P(a, 1), P(a, 2));
        for (int s = 0; s < 3; ++s) {
            double acc = 0.0;
            for (int r = 0; r < 3; ++r) acc += hb(a, r) * pm.jacobian[std::size_t(r)][std::size_t(s)];
            pbar(a, s) = acc;
        }
    }
    return vbar;
}

} // namespace detail

/// Forward unrolled run, recording everything the reverse pass needs.
template <typename Model>
Tape record_forward(const Model& model, const TorusGrid& grid, const Sample& sample, const UnrolledSpec& us)
{
    const long n = us.steps();
    Tape tape;
    tape.V.push_back(tangent_from_assignment(AssignmentField(grid, sample.init)));
    for (long k = 0; k < n; ++k) {
        const double tn = n == 0 ? 0.0 : double(k) / double(n);
        const Field& V = tape.V.back();
        Field P = model.params(grid, softmax_rows(V), tn);
        Field Vn = detail::euler_step(grid, V, P, us);
        if (!Vn.allFinite()) throw NumericalError("unrolled flow diverged for sample " + std::to_string(sample.id), double(k) * us.step);
        tape.params.push_back(std::move(P));
        tape.t_norm.push_back(tn);
        tape.V.push_back(std::move(Vn));
    }
    tape.loss = detail::loss_from_tangent(tape.V.back(), sample.target, us.loss, nullptr);
    if (!std::isfinite(tape.loss)) throw NumericalError("non-finite loss for sample " + std::to_string(sample.id), us.T);
    return tape;
}

/// Replays the forward pass from the recorded initial state; outputs match the tape bitwise.
template <typename Model>
Tape replay(const Model& model, const TorusGrid& grid, const Tape& tape, const Sample& sample, const UnrolledSpec& us)
{
    Sample s = sample;
    s.init = softmax_rows(tape.V.front());
    Tape out;
    const long n = us.steps();
    out.V.push_back(tape.V.front());
    for (long k = 0; k < n; ++k) {
        const double tn = double(k) / double(n);
        Field P = model.params(grid, softmax_rows(out.V.back()), tn);
        Field Vn = detail::euler_step(grid, out.V.back(), P, us);
        out.params.push_back(std::move(P));
        out.t_norm.push_back(tn);
        out.V.push_back(std::move(Vn));
    }
    out.loss = detail::loss_from_tangent(out.V.back(), sample.target, us.loss, nullptr);
    return out;
}

/// Reverse pass over a recorded tape; accumulates into grad and returns d loss / d V_0.
template <typename Model>
Field backward(const Model& model, const TorusGrid& grid, const Tape& tape, const Sample& sample, const UnrolledSpec& us,
               Vector& grad)
{
    Field vbar;
    detail::loss_from_tangent(tape.V.back(), sample.target, us.loss, &vbar);
    for (std::size_t k = tape.params.size(); k-- > 0;) {
        const Field& V = tape.V[k];
        Field pbar;
        Field vprev = detail::euler_step_adjoint(grid, V, tape.params[k], us, vbar, pbar);
        const Field S = softmax_rows(V);
        const Field sbar = model.backward(grid, S, tape.t_norm[k], pbar, grad);
        vprev += apply_replicator_rows(S, sbar);
        vbar = std::move(vprev);
    }
    return vbar;
}

struct LossGrad
{
    double loss = 0.0;
    Vector grad;
};

/// Mean loss over the batch and its exact gradient. Per-sample work may run in
/// parallel; the reduction runs in sample order.
template <typename Model>
LossGrad loss_and_grad_model(const Model& model, const TorusGrid& grid, const std::vector<Sample>& batch,
                             const UnrolledSpec& us)
{
    if (batch.empty()) throw ValidationError("loss_and_grad: empty batch");
    std::vector<double> losses(batch.size());
    std::vector<Vector> grads(batch.size());
    parallel_for(0, std::ptrdiff_t(batch.size()), [&](std::ptrdiff_t i) {
        const Sample& s = batch[std::size_t(i)];
        const Tape tape = record_forward(model, grid, s, us);
        grads[std::size_t(i)] = Vector::Zero(model.size());
        backward(model, grid, tape, s, us, grads[std::size_t(i)]);
        losses[std::size_t(i)] = tape.loss;
    });
    LossGrad out{0.0, Vector::Zero(model.size())};
    for (std::size_t i = 0; i < batch.size(); ++i) {
        out.loss += losses[i];
        out.grad += grads[i];
    }
    const double inv = 1.0 / double(batch.size());
    out.loss *= inv;
    out.grad *= inv;
    return out;
}

/// Learned-operator mode: gradient with respect to the network weights.
inline LossGrad loss_and_grad(const OperatorParams& params, const TorusGrid& grid, const std::vector<Sample>& batch,
                              const UnrolledSpec& us)
{
    return loss_and_grad_model(NetworkModel{params}, grid, batch, us);
}

/// Fit-metric mode: gradient with respect to a free N x 3 parameter field (flattened row-major).
inline LossGrad loss_and_grad(const Field& raw_params, const TorusGrid& grid, const std::vector<Sample>& batch,
                              const UnrolledSpec& us)
{
    if (raw_params.rows() != grid.size() || raw_params.cols() != 3) throw ValidationError("loss_and_grad: expected N x 3 parameters");
    return loss_and_grad_model(FreeParamsModel{raw_params}, grid, batch, us);
}

/// Loss only (forward pass), averaged over the batch.
template <typename Model>
double batch_loss(const Model& model, const TorusGrid& grid, const std::vector<Sample>& batch, const UnrolledSpec& us)
{
    std::vector<double> losses(batch.size());
    parallel_for(0, std::ptrdiff_t(batch.size()), [&](std::ptrdiff_t i) {
        losses[std::size_t(i)] = record_forward(model, grid, batch[std::size_t(i)], us).loss;
    });
    double s = 0.0;
    for (double l : losses) s += l;
    return s / double(batch.size());
}

// ---------------------------------------------------------------------------
// Optimizers

enum class OptimizerKind { adabelief, adam };

struct OptimizerState
{
    OptimizerKind kind = OptimizerKind::adabelief;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-16;
    Vector m, s;
    long t = 0;
};

inline OptimizerState make_optimizer(OptimizerKind kind, Index n)
{
    OptimizerState st;
    st.kind = kind;
    st.eps = kind == OptimizerKind::adabelief ? 1e-16 : 1e-8;
    st.m = Vector::Zero(n);
    st.s = Vector::Zero(n);
    return st;
}

/// One bias-corrected update of x in place. AdaBelief tracks the spread of the gradient
/// around its running mean; Adam tracks the raw second moment.
inline void optimizer_step(OptimizerState& st, Vector& x, const Vector& g, double lr)
{
    if (g.size() != x.size() || st.m.size() != x.size()) throw ValidationError("optimizer_step: shape mismatch");
    ++st.t;
    st.m = st.beta1 * st.m + (1.0 - st.beta1) * g;
    if (st.kind == OptimizerKind::adabelief) {
        st.s = st.beta2 * st.s + (1.0 - st.beta2) * (g - st.m).array().square().matrix();
        st.s.array() += st.eps;
    } else {
        st.s = st.beta2 * st.s + (1.0 - st.beta2) * g.array().square().matrix();
    }
    const double bc1 = 1.0 - std::pow(st.beta1, double(st.t));
    const double bc2 = 1.0 - std::pow(st.beta2, double(st.t));
    const Vector mhat = st.m / bc1;
    const Vector shat = st.s / bc2;
    x.array() -= lr * mhat.array() / (shat.array().sqrt() + st.eps);
}

// ---------------------------------------------------------------------------
// Checkpoints: "SGFLOWCK", u32 version, u32 count of header integers, the integers
// (c, kernel, filters, hidden...), 8-byte element tag "f64le\0\0\0", u64 value count,
// then the values as little-endian IEEE-754 doubles.

inline constexpr char kCheckpointMagic[8] = {'S', 'G', 'F', 'L', 'O', 'W', 'C', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {
template <typename T>
void put_le(std::string& out, T v)
{
    static_assert(std::is_trivially_copyable_v<T>);
    unsigned char b[sizeof(T)];
    std::memcpy(b, &v, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(b, b + sizeof(T));
    out.append(reinterpret_cast<const char*>(b), sizeof(T));
}

template <typename T>
T get_le(std::string_view in, std::size_t& pos)
{
    if (pos + sizeof(T) > in.size()) throw ParseError("truncated binary data", pos);
    unsigned char b[sizeof(T)];
    std::memcpy(b, in.data() + pos, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(b, b + sizeof(T));
    pos += sizeof(T);
    T v;
    std::memcpy(&v, b, sizeof(T));
    return v;
}
} // namespace detail

inline std::string serialize_params(const OperatorParams& p)
{
    std::string out(kCheckpointMagic, 8);
    detail::put_le<std::uint32_t>(out, kCheckpointVersion);
    const auto& sh = p.shape();
    std::vector<std::uint32_t> ints{std::uint32_t(sh.labels), std::uint32_t(sh.kernel), std::uint32_t(sh.filters)};
    for (Index h : sh.hidden) ints.push_back(std::uint32_t(h));
    detail::put_le<std::uint32_t>(out, std::uint32_t(ints.size()));
    for (auto v : ints) detail::put_le(out, v);
    out.append("f64le\0\0\0", 8);
    detail::put_le<std::uint64_t>(out, std::uint64_t(p.size()));
    for (Index i = 0; i < p.size(); ++i) detail::put_le(out, p.values()[i]);
    return out;
}

inline OperatorParams deserialize_params(const std::string& in)
{
    if (in.size() < 8 || std::memcmp(in.data(), kCheckpointMagic, 8) != 0) throw ParseError("checkpoint: bad magic", 0);
    std::size_t pos = 8;
    const auto version = detail::get_le<std::uint32_t>(in, pos);
    if (version != kCheckpointVersion) throw ParseError("checkpoint: unsupported version " + std::to_string(version), 8);
    const auto count = detail::get_le<std::uint32_t>(in, pos);
    if (count < 3 || count > 64) throw ParseError("checkpoint: bad header length", pos - 4);
    std::vector<std::uint32_t> ints(count);
    for (auto& v : ints) v = detail::get_le<std::uint32_t>(in, pos);
    if (pos + 8 > in.size() || in.compare(pos, 8, std::string("f64le\0\0\0", 8)) != 0) throw ParseError("checkpoint: bad element tag", pos);
    pos += 8;
    NetworkShape sh;
    sh.labels = ints[0];
    sh.kernel = ints[1];
    sh.filters = ints[2];
    sh.hidden.assign(ints.begin() + 3, ints.end());
    OperatorParams p(sh);
    const auto n = detail::get_le<std::uint64_t>(in, pos);
    if (n != std::uint64_t(p.size())) throw ParseError("checkpoint: value count does not match the layer sizes", pos - 8);
    if (in.size() != pos + 8 * n) throw ParseError("checkpoint: file length does not match the declared size", in.size());
    for (Index i = 0; i < p.size(); ++i) p.values()[i] = detail::get_le<double>(in, pos);
    return p;
}

} // namespace sigmaflow
