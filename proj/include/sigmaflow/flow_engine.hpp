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

#include "grid_operators.hpp"
#include "simplex_geometry.hpp"

#include <Eigen/Eigenvalues>

#include <cmath>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace sigmaflow {

/// Assignment state: one simplex point per grid node.
class AssignmentField
{
public:
    AssignmentField(TorusGrid grid, Field S)
        : m_grid(grid)
        , m_S(std::move(S))
    {
        if (m_S.rows() != grid.size() || m_S.cols() < 2) {
            throw ValidationError("AssignmentField: expected N x c with c >= 2");
        }
        for (Index a = 0; a < m_S.rows(); ++a) {
            const auto row = m_S.row(a);
            if (!row.allFinite() || !(row.minCoeff() > 0.0) || std::abs(row.sum() - 1.0) > 1e-10) {
                throw ValidationError("AssignmentField: row " + std::to_string(a) + " is not an interior simplex point");
            }
        }
    }

    static AssignmentField barycenter(TorusGrid grid, Index c)
    {
        return AssignmentField(grid, Field::Constant(grid.size(), c, 1.0 / double(c)));
    }

    const TorusGrid& grid() const { return m_grid; }
    const Field& S() const { return m_S; }
    Index size() const { return m_S.rows(); }
    Index labels() const { return m_S.cols(); }

private:
    TorusGrid m_grid;
    Field m_S;
};

/// Tangent-space state: rows in T0.
class TangentField
{
public:
    TangentField(TorusGrid grid, Field V)
        : m_grid(grid)
        , m_V(std::move(V))
    {
        if (m_V.rows() != grid.size()) throw ValidationError("TangentField: expected one row per node");
        for (Index a = 0; a < m_V.rows(); ++a) {
            const double scale = std::max(1.0, m_V.row(a).cwiseAbs().maxCoeff());
            if (!m_V.row(a).allFinite() || std::abs(m_V.row(a).sum()) > 1e-10 * scale) {
                throw ValidationError("TangentField: row " + std::to_string(a) + " does not sum to zero");
            }
        }
    }

    const TorusGrid& grid() const { return m_grid; }
    const Field& V() const { return m_V; }

private:
    TorusGrid m_grid;
    Field m_V;
};

// Row-wise helpers on N x c fields.

inline Field project_rows_T0(Field X)
{
    for (Index a = 0; a < X.rows(); ++a) X.row(a).array() -= X.row(a).mean();
    return X;
}

inline Field log_softmax_rows(const Field& V)
{
    Field out(V.rows(), V.cols());
    for (Index a = 0; a < V.rows(); ++a) {
        const double mx = V.row(a).maxCoeff();
        const double lse = mx + std::log((V.row(a).array() - mx).exp().sum());
        out.row(a) = V.row(a).array() - lse;
    }
    return out;
}

inline Field softmax_rows(const Field& V)
{
    Field out = log_softmax_rows(V).array().exp().matrix();
    for (Index a = 0; a < out.rows(); ++a) out.row(a) /= out.row(a).sum();
    return out;
}

/// Pi0 log S row-wise.
inline Field tangent_from_assignment(const AssignmentField& S)
{
    return project_rows_T0(S.S().array().log().matrix());
}

inline AssignmentField assignment_from_tangent(const TorusGrid& grid, const Field& V)
{
    return AssignmentField(grid, softmax_rows(V));
}

/// Row-wise replicator action R_{S_a} x_a = S_a * x_a - S_a <S_a, x_a>.
inline Field apply_replicator_rows(const Field& S, const Field& X)
{
    Field out(S.rows(), S.cols());
    for (Index a = 0; a < S.rows(); ++a) {
        const double mean = S.row(a).dot(X.row(a));
        out.row(a) = S.row(a).array() * (X.row(a).array() - mean);
    }
    return out;
}

/// theta rows (log S_i / S_0 for i >= 1) from a tangent field.
inline Field theta_rows(const Field& V)
{
    Field th(V.rows(), V.cols() - 1);
    for (Index a = 0; a < V.rows(); ++a) th.row(a) = V.row(a).tail(V.cols() - 1).array() - V(a, 0);
    return th;
}

namespace detail {

inline void require_interior_state(const Field& S)
{
    if (!S.allFinite()) throw DomainError("state contains non-finite entries");
    if (S.minCoeff() < 1e-300) throw DomainError("state row reached the simplex boundary");
}

inline Field tangent_rhs_raw(const Field& V, const MetricField& h, double alpha, double m_squared)
{
    const MetricField hinv = h.as_inverse();
    Field Y = apply_laplace_beltrami(hinv, V);
    if (alpha != 1.0) Y += (0.5 * (1.0 - alpha)) * pairing(hinv, log_softmax_rows(V));
    if (m_squared != 0.0) Y += m_squared * V;
    return project_rows_T0(std::move(Y));
}

// Regularized flow evaluated in theta coordinates and mapped back through Pi0(0, .).
inline Field regularized_rhs_raw(const Field& V, const MetricField& h, double alpha, double m_squared, double epsilon)
{
    const MetricField hinv = h.as_inverse();
    const TorusGrid& grid = hinv.grid();
    const Index n = V.rows(), C = V.cols() - 1;
    const Field th = theta_rows(V);
    const Field lth = apply_laplace_beltrami(hinv, th);
    const auto [dx, dy] = apply_derivatives(grid, th);
    const Field& m = hinv.components();
    Field out(n, C + 1);
    for (Index a = 0; a < n; ++a) {
        const Vector p = simplex::detail::tail_probabilities(th.row(a).transpose());
        const Vector gx = dx.row(a).transpose(), gy = dy.row(a).transpose();
        // P_jk = <D theta^j, D theta^k>_h
        const Matrix P = m(a, 0) * gx * gx.transpose() + m(a, 1) * (gx * gy.transpose() + gy * gx.transpose()) +
                         m(a, 2) * gy * gy.transpose();
        const Vector Pp = P * p;
        const double pPp = p.dot(Pp);
        const double trace_p = p.dot(P.diagonal());
        Vector gamma(C);
        for (Index l = 0; l < C; ++l) {
            gamma[l] = 0.5 * p[l] * (P(l, l) - trace_p - 2.0 * Pp[l] + 2.0 * pPp);
        }
        Matrix g = -p * p.transpose();
        g.diagonal() += p;
        Matrix ge = g;
        ge.diagonal().array() += epsilon;
        const Vector rhs = (1.0 - alpha) * gamma + m_squared * (g * th.row(a).transpose());
        const Eigen::LLT<Matrix> llt(ge);
        if (llt.info() != Eigen::Success) throw LinalgError("regularized flow: metric factorization failed");
        const Vector dth = lth.row(a).transpose() + llt.solve(rhs);
        out(a, 0) = 0.0;
        out.row(a).tail(C) = dth.transpose();
    }
    return project_rows_T0(std::move(out));
}

} // namespace detail

/// Ambient right-hand side R_S(L log S + (1-alpha)/2 <D log S, D log S>_h + m^2 log S).
inline Field sigma_rhs_ambient(const AssignmentField& S, const MetricField& h_field, double alpha, double m_squared)
{
    detail::require_interior_state(S.S());
    const MetricField hinv = h_field.as_inverse();
    const Field logS = S.S().array().log().matrix();
    Field Y = apply_laplace_beltrami(hinv, logS);
    if (alpha != 1.0) Y += (0.5 * (1.0 - alpha)) * pairing(hinv, logS);
    if (m_squared != 0.0) Y += m_squared * logS;
    return apply_replicator_rows(S.S(), Y);
}

/// Tangent right-hand side Pi0(L V + (1-alpha)/2 <D log sm V, D log sm V>_h + m^2 V).
inline Field sigma_rhs_tangent(const TangentField& V, const MetricField& h_field, double alpha, double m_squared)
{
    if (!V.V().allFinite()) throw DomainError("sigma_rhs_tangent: non-finite state");
    return detail::tangent_rhs_raw(V.V(), h_field, alpha, m_squared);
}

/// Tangent right-hand side of the flow with the regularized Fisher-Rao metric g + epsilon I.
inline Field sigma_rhs_regularized(const TangentField& V, const MetricField& h_field, double alpha, double m_squared,
                                   double epsilon)
{
    if (!V.V().allFinite()) throw DomainError("sigma_rhs_regularized: non-finite state");
    if (epsilon < 0.0) throw DomainError("sigma_rhs_regularized: epsilon must be nonnegative");
    return detail::regularized_rhs_raw(V.V(), h_field, alpha, m_squared, epsilon);
}

namespace detail {
inline void require_symmetric(const SparseOperator& omega)
{
    const SparseOperator t = omega.transpose();
    const SparseOperator diff = omega - t;
    double worst = 0.0;
    for (Index k = 0; k < diff.outerSize(); ++k)
        for (SparseOperator::InnerIterator it(diff, k); it; ++it) worst = std::max(worst, std::abs(it.value()));
    if (worst > 1e-12) throw ValidationError("weight matrix is not symmetric");
}
} // namespace detail

/// Uniform (2r+1)^2 box weights on the torus: symmetric, row sums 1, positive diagonal.
inline SparseOperator box_weights(const TorusGrid& grid, int radius = 1)
{
    const double w = 1.0 / double((2 * radius + 1) * (2 * radius + 1));
    std::vector<Eigen::Triplet<double>> trip;
    for (Index a = 0; a < grid.size(); ++a)
        for (int di = -radius; di <= radius; ++di)
            for (int dj = -radius; dj <= radius; ++dj) trip.emplace_back(a, grid.shift(a, di, dj), w);
    SparseOperator out(grid.size(), grid.size());
    out.setFromTriplets(trip.begin(), trip.end());
    return out;
}

/// S-flow right-hand side R_S(L_Omega S + S) = R_S(Omega S).
inline Field sflow_rhs(const AssignmentField& S, const SparseOperator& omega)
{
    detail::require_symmetric(omega);
    const Field os = omega * S.S();
    return apply_replicator_rows(S.S(), os);
}

/// J(S) = -1/4 sum Omega_ab |S_a - S_b|^2 + 1/2 sum |S_a|^2.
inline double sflow_objective(const AssignmentField& S, const SparseOperator& omega)
{
    detail::require_symmetric(omega);
    const Field& s = S.S();
    double pair = 0.0;
    for (Index a = 0; a < omega.outerSize(); ++a)
        for (SparseOperator::InnerIterator it(omega, a); it; ++it)
            pair += it.value() * (s.row(a) - s.row(it.col())).squaredNorm();
    return -0.25 * pair + 0.5 * s.squaredNorm();
}

/// Discrete spherical tension field on unit rows.
inline Field spherical_tension(const Field& s, const SparseOperator& omega, const Vector& mu)
{
    if (mu.size() != s.rows() || omega.rows() != s.rows()) throw ValidationError("spherical_tension: size mismatch");
    Field out = Field::Zero(s.rows(), s.cols());
    for (Index a = 0; a < omega.outerSize(); ++a) {
        if (!(mu[a] > 0.0)) throw ValidationError("spherical_tension: weights must be positive");
        for (SparseOperator::InnerIterator it(omega, a); it; ++it) {
            const Index b = it.col();
            const double d = s.row(a).dot(s.row(b));
            if (d > 1.0 + 1e-9) throw ValidationError("spherical_tension: rows are not unit vectors");
            if (d > 1.0 - 1e-12) continue;
            const double coef = std::acos(std::max(-1.0, d)) / (1.0 - d);
            out.row(a) += it.value() * coef * (s.row(b) - d * s.row(a));
        }
        out.row(a) /= mu[a];
    }
    return out;
}

inline Field spherical_euler_step(const Field& s, const SparseOperator& omega, const Vector& mu, double step)
{
    Field next = s + step * spherical_tension(s, omega, mu);
    for (Index a = 0; a < next.rows(); ++a) next.row(a).normalize();
    return next;
}

// ---------------------------------------------------------------------------
// Diagnostics

/// Phi(S) = sum_a phi(S_a) + eps/2 |theta_a|^2, evaluated from a tangent field.
inline double lyapunov_tangent(const Field& V, double epsilon)
{
    const Field ls = log_softmax_rows(V);
    const double phi = (ls.array().exp() * ls.array()).sum();
    return epsilon == 0.0 ? phi : phi + 0.5 * epsilon * theta_rows(V).squaredNorm();
}

inline double lyapunov(const AssignmentField& S, double epsilon)
{
    return lyapunov_tangent(tangent_from_assignment(S), epsilon);
}

struct EntropyStats
{
    Vector entropy;
    double mean = 0.0;
    double max = 0.0;
    std::vector<int> labeling;
};

inline std::vector<int> argmax_labels(const Field& X)
{
    std::vector<int> out(static_cast<std::size_t>(X.rows()));
    for (Index a = 0; a < X.rows(); ++a) {
        Index best = 0;
        for (Index i = 1; i < X.cols(); ++i)
            if (X(a, i) > X(a, best)) best = i;
        out[std::size_t(a)] = int(best);
    }
    return out;
}

inline EntropyStats entropy_stats(const Field& S)
{
    EntropyStats st;
    st.entropy.resize(S.rows());
    for (Index a = 0; a < S.rows(); ++a) st.entropy[a] = -simplex::neg_entropy(Vector(S.row(a).transpose()));
    st.mean = st.entropy.mean();
    st.max = st.entropy.maxCoeff();
    st.labeling = argmax_labels(S);
    return st;
}

inline EntropyStats entropy_stats(const AssignmentField& S) { return entropy_stats(S.S()); }

struct SpectralDecomposition
{
    Vector eigenvalues;  ///< descending, eigenvalues[0] ~ 0
    Matrix eigenvectors; ///< columns, unit Euclidean norm
};

struct LowFrequencySet
{
    SpectralDecomposition spectrum;
    std::vector<Index> aleph;
};

inline constexpr Index kMaxDenseNodes = 4096;

inline SpectralDecomposition laplacian_spectrum(const MetricField& h_field)
{
    const Index n = h_field.size();
    if (n > kMaxDenseNodes) {
        throw CapabilityError("spectrum: " + std::to_string(n) + " nodes exceed the dense limit of " +
                              std::to_string(kMaxDenseNodes));
    }
    const LaplaceBeltrami lb = assemble_laplace_beltrami(h_field);
    // L = Q E is similar to the symmetric Q^{1/2} E Q^{1/2}.
    const Vector sq = lb.q.array().sqrt();
    Matrix sym = Matrix(lb.E);
    sym = sq.asDiagonal() * sym * sq.asDiagonal();
    sym = 0.5 * (sym + sym.transpose());
    const Eigen::SelfAdjointEigenSolver<Matrix> es(sym);
    if (es.info() != Eigen::Success) throw LinalgError("spectrum: eigensolver failed");
    SpectralDecomposition out;
    out.eigenvalues = es.eigenvalues().reverse();
    out.eigenvectors = sq.asDiagonal() * es.eigenvectors().rowwise().reverse();
    out.eigenvectors.colwise().normalize();
    return out;
}

/// Spectrum of L_h and the index set {n : c2 lambda_n + eps (lambda_n + m^2) > 0}, which always holds 0.
inline LowFrequencySet low_frequency_set(const MetricField& h_field, double epsilon, double m_squared, Index c)
{
    LowFrequencySet out;
    out.spectrum = laplacian_spectrum(h_field);
    const double c2 = simplex::b_matrix_bounds(c).second;
    out.aleph.push_back(0);
    for (Index k = 1; k < out.spectrum.eigenvalues.size(); ++k) {
        const double lam = out.spectrum.eigenvalues[k];
        if (c2 * lam + epsilon * (lam + m_squared) > 0.0) out.aleph.push_back(k);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Flow specification and integration

/// Source of the domain metric, evaluated as h_t = O(S_t, t / T).
struct MetricSource
{
    enum class Kind { fixed, params, structure_tensor, learned };
    Kind kind = Kind::fixed;
    bool state_dependent = false;
    std::function<MetricField(const Field& S, double t_norm)> eval;

    MetricField operator()(const Field& S, double t_norm) const { return eval(S, t_norm); }
};

inline MetricSource fixed_metric(MetricField h)
{
    return {MetricSource::Kind::fixed, false, [h = std::move(h)](const Field&, double) { return h; }};
}

inline MetricSource params_metric(const TorusGrid& grid, const Field& params)
{
    return fixed_metric(metric_from_params(grid, params));
}

inline MetricSource structure_tensor_source(const TorusGrid& grid, double rho, double sigma, EdgeFunction fn,
                                            double contrast = 1.0)
{
    return {MetricSource::Kind::structure_tensor, true, [=](const Field& S, double) {
                return structure_tensor_metric(grid, S, rho, sigma, fn, contrast);
            }};
}

enum class FlowFamily { sigma_alpha_entropic, s_flow, spherical };
enum class Integrator { geometric_euler, rk4, rk_adaptive };
enum class MetricRefresh { per_stage, per_step };

struct IntegratorSettings
{
    Integrator scheme = Integrator::geometric_euler;
    double step = 0.1; ///< fixed step, or the initial step of the adaptive scheme
    double rtol = 1e-6;
    double atol = 1e-6;
    double min_step = 1e-10;
    long max_steps = 50'000'000;
};

struct FlowSpec
{
    FlowFamily family = FlowFamily::sigma_alpha_entropic;
    double alpha = 0.0;
    double m_squared = 0.0;
    double epsilon = 0.0;
    std::optional<MetricSource> metric; ///< empty: flat metric
    double T = 1.0;
    IntegratorSettings integrator;
    MetricRefresh refresh = MetricRefresh::per_stage;
    std::optional<SparseOperator> omega; ///< S-flow and spherical weights; empty: 3x3 box weights
    Vector mu;                           ///< spherical node weights; empty: ones

    void validate() const
    {
        if (!(integrator.step > 0.0)) throw ValidationError("FlowSpec: step must be positive");
        if (!(T > 0.0) || T < integrator.step) throw ValidationError("FlowSpec: need T >= step > 0");
        if (m_squared < 0.0) throw ValidationError("FlowSpec: m_squared must be nonnegative");
        if (epsilon < 0.0) throw ValidationError("FlowSpec: epsilon must be nonnegative");
        if (integrator.scheme == Integrator::rk_adaptive && (!(integrator.rtol > 0.0) || !(integrator.atol > 0.0)))
            throw ValidationError("FlowSpec: tolerances must be positive");
    }
};

struct SamplingPlan
{
    double interval = 0.0; ///< sample spacing in time; <= 0 samples after every step
    bool snapshots = false;
};

struct TrajectoryRecord
{
    std::vector<double> times;
    std::vector<double> lyapunov;
    std::vector<double> mean_entropy;
    std::vector<double> max_entropy;
    std::vector<double> theta_l2;
    std::vector<Field> snapshots; ///< S at each sample when requested
    MetricRefresh refresh = MetricRefresh::per_stage;
    long steps = 0;
    long rejected = 0;
};

struct IntegrationResult
{
    AssignmentField final_state;
    TrajectoryRecord record;
};

namespace detail {

inline void record_sample(TrajectoryRecord& rec, double t, const Field& V, double epsilon, bool snapshot)
{
    const Field S = softmax_rows(V);
    const Field ls = log_softmax_rows(V);
    const Vector ent = -(S.array() * ls.array()).rowwise().sum().matrix();
    rec.times.push_back(t);
    rec.lyapunov.push_back(lyapunov_tangent(V, epsilon));
    rec.mean_entropy.push_back(ent.mean());
    rec.max_entropy.push_back(ent.maxCoeff());
    rec.theta_l2.push_back(theta_rows(V).norm());
    if (snapshot) rec.snapshots.push_back(S);
}

// Rows of a state obtained from the sphere, floored to stay interior.
inline Field interior_from_sphere(const Field& s)
{
    Field S = s.array().square().max(1e-300).matrix();
    for (Index a = 0; a < S.rows(); ++a) S.row(a) /= S.row(a).sum();
    return S;
}

struct StepperContext
{
    const FlowSpec& spec;
    const TorusGrid& grid;
    std::optional<MetricField> frozen; ///< metric held fixed for per-step refresh
    SparseOperator omega;

    MetricField metric_at(const Field& V, double t) const
    {
        if (frozen) return *frozen;
        if (!spec.metric) return MetricField::identity(grid);
        const Field S = spec.metric->state_dependent ? softmax_rows(V) : Field();
        return (*spec.metric)(S, std::clamp(t / spec.T, 0.0, 1.0));
    }

    Field rhs(const Field& V, double t) const
    {
        if (spec.family == FlowFamily::s_flow) return project_rows_T0(omega * softmax_rows(V));
        const MetricField h = metric_at(V, t);
        if (spec.epsilon > 0.0) return regularized_rhs_raw(V, h, spec.alpha, spec.m_squared, spec.epsilon);
        return tangent_rhs_raw(V, h, spec.alpha, spec.m_squared);
    }
};

} // namespace detail

/// Integrates a flow from init to spec.T. The state is advanced in tangent
/// coordinates and mapped to the simplex only at sample times and at the end.
inline IntegrationResult integrate(const AssignmentField& init, const FlowSpec& spec, const SamplingPlan& plan = {})
{
    spec.validate();
    const TorusGrid& grid = init.grid();
    TrajectoryRecord rec;
    rec.refresh = spec.refresh;
    const double T = spec.T;
    const double tiny = 1e-12 * std::max(1.0, T);
    auto next_sample_after = [&](double t) {
        if (plan.interval <= 0.0) return T;
        const double k = std::floor((t + tiny) / plan.interval) + 1.0;
        return std::min(T, k * plan.interval);
    };

    if (spec.family == FlowFamily::spherical) {
        const SparseOperator omega = spec.omega ? *spec.omega : box_weights(grid);
        const Vector mu = spec.mu.size() ? spec.mu : Vector::Ones(grid.size());
        Field s = init.S().array().sqrt().matrix();
        double t = 0.0;
        double next = next_sample_after(0.0);
        detail::record_sample(rec, 0.0, tangent_from_assignment(init), spec.epsilon, plan.snapshots);
        while (t < T - tiny) {
            const double h = std::min(spec.integrator.step, T - t);
            Field trial = spherical_euler_step(s, omega, mu, h);
            if (!trial.allFinite()) throw NumericalError("spherical flow diverged", t);
            s = std::move(trial);
            t += h;
            ++rec.steps;
            if (plan.interval <= 0.0 || t >= next - tiny || t >= T - tiny) {
                const Field S = detail::interior_from_sphere(s);
                detail::record_sample(rec, t, project_rows_T0(S.array().log().matrix()), spec.epsilon, plan.snapshots);
                next = next_sample_after(t);
            }
        }
        return {AssignmentField(grid, detail::interior_from_sphere(s)), std::move(rec)};
    }

    detail::StepperContext ctx{spec, grid, std::nullopt, SparseOperator()};
    if (spec.family == FlowFamily::s_flow) {
        ctx.omega = spec.omega ? *spec.omega : box_weights(grid);
        detail::require_symmetric(ctx.omega);
    }

    Field V = tangent_from_assignment(init);
    double t = 0.0;
    double next = next_sample_after(0.0);
    detail::record_sample(rec, 0.0, V, spec.epsilon, plan.snapshots);

    const auto& is = spec.integrator;
    double h = is.step;
    double err_prev = 1.0;
    while (t < T - tiny) {
        if (rec.steps + rec.rejected >= is.max_steps) throw NumericalError("integrate: step budget exhausted", t);
        double target = std::min(T, next);
        double dt = h;
        if (target - t < dt * (1.0 + 1e-9)) dt = target - t;
        if (spec.refresh == MetricRefresh::per_step && spec.family != FlowFamily::s_flow) {
            ctx.frozen.reset();
            ctx.frozen = ctx.metric_at(V, t);
        }

        Field Vn;
        if (is.scheme == Integrator::geometric_euler) {
            Vn = V + dt * ctx.rhs(V, t);
        } else if (is.scheme == Integrator::rk4) {
            const Field k1 = ctx.rhs(V, t);
            const Field k2 = ctx.rhs(V + 0.5 * dt * k1, t + 0.5 * dt);
            const Field k3 = ctx.rhs(V + 0.5 * dt * k2, t + 0.5 * dt);
            const Field k4 = ctx.rhs(V + dt * k3, t + dt);
            Vn = V + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        } else {
            // Dormand-Prince 5(4) with PI step control.
            const Field k1 = ctx.rhs(V, t);
            const Field k2 = ctx.rhs(V + dt * (1.0 / 5) * k1, t + dt / 5);
            const Field k3 = ctx.rhs(V + dt * ((3.0 / 40) * k1 + (9.0 / 40) * k2), t + 0.3 * dt);
            const Field k4 = ctx.rhs(V + dt * ((44.0 / 45) * k1 - (56.0 / 15) * k2 + (32.0 / 9) * k3), t + 0.8 * dt);
            const Field k5 = ctx.rhs(V + dt * ((19372.0 / 6561) * k1 - (25360.0 / 2187) * k2 + (64448.0 / 6561) * k3 -
                                               (212.0 / 729) * k4),
                                     t + (8.0 / 9) * dt);
            const Field k6 = ctx.rhs(V + dt * ((9017.0 / 3168) * k1 - (355.0 / 33) * k2 + (46732.0 / 5247) * k3 +
                                               (49.0 / 176) * k4 - (5103.0 / 18656) * k5),
                                     t + dt);
            const Field y5 = V + dt * ((35.0 / 384) * k1 + (500.0 / 1113) * k3 + (125.0 / 192) * k4 -
                                       (2187.0 / 6784) * k5 + (11.0 / 84) * k6);
            const Field k7 = ctx.rhs(y5, t + dt);
            const Field e = dt * ((71.0 / 57600) * k1 - (71.0 / 16695) * k3 + (71.0 / 1920) * k4 -
                                  (17253.0 / 339200) * k5 + (22.0 / 525) * k6 - (1.0 / 40) * k7);
            const Field scale = (is.atol + is.rtol * V.cwiseAbs().cwiseMax(y5.cwiseAbs()).array()).matrix();
            double err = std::sqrt((e.array() / scale.array()).square().mean());
            if (!std::isfinite(err)) err = 1e10;
            const double grow = err == 0.0 ? 5.0 : 0.9 * std::pow(err, -0.7 / 5) * std::pow(err_prev, 0.4 / 5);
            if (err > 1.0) {
                ++rec.rejected;
                h = dt * std::clamp(0.9 * std::pow(err, -0.2), 0.2, 1.0);
                if (h < is.min_step) throw NumericalError("integrate: adaptive step underflow", t);
                continue;
            }
            err_prev = std::max(err, 1e-4);
            // Only grow from the step actually tried, not from a clipped one.
            const bool clipped = dt < h;
            if (!clipped) h = dt * std::clamp(grow, 0.2, 5.0);
            Vn = y5;
        }

        if (!Vn.allFinite()) throw NumericalError("integrate: state became non-finite", t);
        V = project_rows_T0(std::move(Vn));
        t = (std::abs(target - (t + dt)) <= tiny) ? target : t + dt;
        ++rec.steps;
        if (plan.interval <= 0.0 || t >= next - tiny || t >= T - tiny) {
            detail::record_sample(rec, t, V, spec.epsilon, plan.snapshots);
            next = next_sample_after(t);
        }
    }
    if (rec.times.back() < t - tiny) detail::record_sample(rec, t, V, spec.epsilon, plan.snapshots);
    Field S = softmax_rows(V);
    // Saturated rows can underflow to exact zeros; keep the returned state interior.
    S = S.array().max(1e-300).matrix();
    for (Index a = 0; a < S.rows(); ++a) S.row(a) /= S.row(a).sum();
    return {AssignmentField(grid, std::move(S)), std::move(rec)};
}

/// Tangent-space integration result without the softmax round trip; used where the
/// final state is needed in tangent form (saturated rows lose precision as S).
inline Field integrate_tangent(const Field& V0, const TorusGrid& grid, const FlowSpec& spec)
{
    spec.validate();
    detail::StepperContext ctx{spec, grid, std::nullopt, SparseOperator()};
    if (spec.family == FlowFamily::s_flow) ctx.omega = spec.omega ? *spec.omega : box_weights(grid);
    if (spec.family == FlowFamily::spherical) throw ValidationError("integrate_tangent: spherical flow has no tangent form");
    if (spec.integrator.scheme == Integrator::rk_adaptive) throw ValidationError("integrate_tangent: fixed-step schemes only");
    Field V = V0;
    double t = 0.0;
    const double tiny = 1e-12 * std::max(1.0, spec.T);
    while (t < spec.T - tiny) {
        const double dt = std::min(spec.integrator.step, spec.T - t);
        if (spec.refresh == MetricRefresh::per_step) {
            ctx.frozen.reset();
            ctx.frozen = ctx.metric_at(V, t);
        }
        if (spec.integrator.scheme == Integrator::geometric_euler) {
            V = V + dt * ctx.rhs(V, t);
        } else {
            const Field k1 = ctx.rhs(V, t);
            const Field k2 = ctx.rhs(V + 0.5 * dt * k1, t + 0.5 * dt);
            const Field k3 = ctx.rhs(V + 0.5 * dt * k2, t + 0.5 * dt);
            const Field k4 = ctx.rhs(V + dt * k3, t + dt);
            V = V + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        }
        if (!V.allFinite()) throw NumericalError("integrate: state became non-finite", t);
        V = project_rows_T0(std::move(V));
        t += dt;
    }
    return V;
}

/// Ambient-coordinate Euler trajectory S_{k+1} = S_k + step * rhs(S_k), for comparison with
/// the tangent parametrization.
inline Field integrate_ambient_euler(const AssignmentField& init, const MetricField& h, double alpha, double m_squared,
                                     double T, double step)
{
    Field S = init.S();
    const long n = std::lround(T / step);
    for (long k = 0; k < n; ++k) {
        S += step * sigma_rhs_ambient(AssignmentField(init.grid(), S), h, alpha, m_squared);
        if (!S.allFinite() || S.minCoeff() <= 0.0) throw NumericalError("ambient Euler left the simplex", k * step);
    }
    return S;
}

} // namespace sigmaflow
