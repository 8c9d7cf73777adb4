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

// Closed-form information geometry of the open probability simplex with the
// Fisher-Rao metric. Probability vectors have length c and keep p_0 explicitly;
// theta (exponential-family) coordinates have length c - 1 and index p_1..p_{c-1}.

#include <sigmaflow/error.hpp>
#include <sigmaflow/types.hpp>

#include <Eigen/Cholesky>
#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>
#include <utility>
#include <vector>

namespace sigmaflow::simplex {

inline constexpr double kSumTolerance = 1e-12;

/// Point of the open simplex. Entries strictly positive and summing to one.
class SimplexPoint
{
public:
    explicit SimplexPoint(Vector p)
        : m_p(std::move(p))
    {
        if (m_p.size() < 2) {
            throw DomainError("SimplexPoint: need at least two labels");
        }
        for (Index i = 0; i < m_p.size(); ++i) {
            if (!std::isfinite(m_p[i]) || m_p[i] <= 0.0) {
                throw DomainError("SimplexPoint: entry " + std::to_string(i) +
                                  " is not strictly positive");
            }
        }
        if (std::abs(m_p.sum() - 1.0) > kSumTolerance) {
            throw DomainError("SimplexPoint: entries do not sum to one");
        }
    }

    const Vector& p() const { return m_p; }
    double operator[](Index i) const { return m_p[i]; }
    Index num_labels() const { return m_p.size(); }

    static SimplexPoint barycenter(Index c) { return SimplexPoint(Vector::Constant(c, 1.0 / double(c))); }

private:
    Vector m_p;
};

/// Exponential-family coordinates theta^i = log(p_i / p_0), i = 1..c-1.
class ThetaVector
{
public:
    explicit ThetaVector(Vector theta)
        : m_theta(std::move(theta))
    {
        if (!m_theta.allFinite()) {
            throw DomainError("ThetaVector: non-finite entry");
        }
    }

    const Vector& theta() const { return m_theta; }
    double operator[](Index i) const { return m_theta[i]; }
    Index dim() const { return m_theta.size(); }
    Index num_labels() const { return m_theta.size() + 1; }

private:
    Vector m_theta;
};

/// Vector of the tangent space T_0 = {v : sum v = 0}.
class TangentVector
{
public:
    explicit TangentVector(Vector v)
        : m_v(std::move(v))
    {
        if (!m_v.allFinite()) {
            throw DomainError("TangentVector: non-finite entry");
        }
        const double scale = std::max(1.0, m_v.cwiseAbs().maxCoeff());
        if (std::abs(m_v.sum()) > kSumTolerance * scale) {
            throw DomainError("TangentVector: entries do not sum to zero");
        }
    }

    const Vector& v() const { return m_v; }
    double operator[](Index i) const { return m_v[i]; }
    Index size() const { return m_v.size(); }

private:
    Vector m_v;
};

/// Fisher-Rao metric in theta coordinates, optionally regularized by epsilon * I.
struct MetricMatrix
{
    Matrix g;
    double epsilon = 0.0;
};

/// Christoffel symbols Gamma^i_{jk} of an alpha-connection, stored densely.
class ChristoffelTensor
{
public:
    ChristoffelTensor(Index dim, double alpha)
        : m_dim(dim)
        , m_alpha(alpha)
        , m_data(static_cast<std::size_t>(dim * dim * dim), 0.0)
    {}

    double& operator()(Index i, Index j, Index k) { return m_data[offset(i, j, k)]; }
    double operator()(Index i, Index j, Index k) const { return m_data[offset(i, j, k)]; }

    Index dim() const { return m_dim; }
    double alpha() const { return m_alpha; }

private:
    std::size_t offset(Index i, Index j, Index k) const
    {
        return static_cast<std::size_t>((i * m_dim + j) * m_dim + k);
    }

    Index m_dim;
    double m_alpha;
    std::vector<double> m_data;
};

/// Fully symmetric third-order tensor d_k g_ij = d_i d_j d_k psi.
using MetricDerivative = ChristoffelTensor;

namespace detail {

inline void require_finite(const Eigen::Ref<const Vector>& x, const char* who)
{
    if (!x.allFinite()) {
        throw DomainError(std::string(who) + ": non-finite input");
    }
}

/// log(sum exp(x)) without overflow.
inline double log_sum_exp(const Eigen::Ref<const Vector>& x)
{
    const double m = x.maxCoeff();
    return m + std::log((x.array() - m).exp().sum());
}

/// Probabilities p_1..p_{c-1} (without p_0) from theta.
inline Vector tail_probabilities(const Vector& theta)
{
    const double m = std::max(0.0, theta.size() > 0 ? theta.maxCoeff() : 0.0);
    const Vector e = (theta.array() - m).exp().matrix();
    const double z = std::exp(-m) + e.sum();
    return e / z;
}

} // namespace detail

/// sm(v)_i = exp(v_i) / sum_j exp(v_j).
inline SimplexPoint softmax(const Eigen::Ref<const Vector>& v)
{
    detail::require_finite(v, "softmax");
    const double m = v.maxCoeff();
    Vector e = (v.array() - m).exp().matrix();
    e /= e.sum();
    return SimplexPoint(std::move(e));
}

/// Projection onto T_0: x - mean(x) * 1.
inline TangentVector project_T0(const Eigen::Ref<const Vector>& x)
{
    detail::require_finite(x, "project_T0");
    return TangentVector(x.array() - x.mean());
}

/// Inverse of softmax restricted to T_0: p -> Pi_0 log p.
inline TangentVector softmax_inv(const SimplexPoint& p)
{
    return project_T0(p.p().array().log().matrix());
}

inline ThetaVector to_theta(const SimplexPoint& p)
{
    const Index c = p.num_labels();
    const double log_p0 = std::log(p[0]);
    Vector theta(c - 1);
    for (Index i = 1; i < c; ++i) {
        theta[i - 1] = std::log(p[i]) - log_p0;
    }
    return ThetaVector(std::move(theta));
}

inline SimplexPoint to_prob(const ThetaVector& theta)
{
    const Vector tail = detail::tail_probabilities(theta.theta());
    Vector p(theta.num_labels());
    const double m = std::max(0.0, theta.dim() > 0 ? theta.theta().maxCoeff() : 0.0);
    const double z = std::exp(-m) + (theta.theta().array() - m).exp().sum();
    p[0] = std::exp(-m) / z;
    p.tail(theta.dim()) = tail;
    return SimplexPoint(std::move(p));
}

/// Log-partition psi(theta) = log(1 + sum_i exp(theta^i)).
inline double log_partition(const ThetaVector& theta)
{
    Vector ext(theta.num_labels());
    ext[0] = 0.0;
    ext.tail(theta.dim()) = theta.theta();
    return detail::log_sum_exp(ext);
}

/// Negative entropy sum p log p with the convention 0 log 0 = 0.
///
/// Accepts raw probability rows so diagnostics can evaluate (near-)boundary
/// states; entries below 1e-300 count as zero.
inline double neg_entropy(const Eigen::Ref<const Vector>& p)
{
    double s = 0.0;
    for (Index i = 0; i < p.size(); ++i) {
        if (p[i] > 1e-300) {
            s += p[i] * std::log(p[i]);
        }
    }
    return s;
}

inline double neg_entropy(const SimplexPoint& p) { return neg_entropy(p.p()); }

/// Negative entropy through the Legendre relation phi = p_j theta^j - psi(theta).
inline double neg_entropy(const ThetaVector& theta)
{
    const Vector tail = detail::tail_probabilities(theta.theta());
    return tail.dot(theta.theta()) - log_partition(theta);
}

/// g_ij = delta_ij p_i - p_i p_j + epsilon delta_ij, i, j = 1..c-1.
inline MetricMatrix fisher_metric(const ThetaVector& theta, double epsilon = 0.0)
{
    if (!(epsilon >= 0.0)) {
        throw DomainError("fisher_metric: epsilon must be non-negative");
    }
    const Vector p = detail::tail_probabilities(theta.theta());
    Matrix g = -p * p.transpose();
    g.diagonal() += p;
    g.diagonal().array() += epsilon;
    return MetricMatrix{std::move(g), epsilon};
}

/// Third derivatives of the log-partition, d_k g_ij, in theta coordinates.
inline MetricDerivative metric_derivative(const ThetaVector& theta)
{
    const Vector p = detail::tail_probabilities(theta.theta());
    const Index n = theta.dim();
    MetricDerivative d(n, 0.0);
    for (Index i = 0; i < n; ++i) {
        for (Index j = 0; j < n; ++j) {
            for (Index k = 0; k < n; ++k) {
                double v = 2.0 * p[i] * p[j] * p[k];
                if (i == j) v -= p[i] * p[k];
                if (i == k) v -= p[i] * p[j];
                if (j == k) v -= p[j] * p[i];
                if (i == j && j == k) v += p[i];
                d(i, j, k) = v;
            }
        }
    }
    return d;
}

/// Symbols of the first kind Gamma_ijk = 1/2 d_i d_j d_k psi (independent of epsilon).
inline ChristoffelTensor christoffel_lowered(const ThetaVector& theta)
{
    MetricDerivative d = metric_derivative(theta);
    const Index n = theta.dim();
    ChristoffelTensor low(n, 0.0);
    for (Index i = 0; i < n; ++i)
        for (Index j = 0; j < n; ++j)
            for (Index k = 0; k < n; ++k)
                low(i, j, k) = 0.5 * d(i, j, k);
    return low;
}

/// Christoffel symbols of the alpha-connection of the (regularized) Fisher-Rao metric:
/// (1 - alpha) (g_eps)^{il} Gamma_ljk.
inline ChristoffelTensor christoffel(const ThetaVector& theta, double alpha, double epsilon = 0.0)
{
    const MetricMatrix g = fisher_metric(theta, epsilon);
    const Eigen::LLT<Matrix> llt(g.g);
    if (llt.info() != Eigen::Success) {
        throw LinalgError("christoffel: regularized Fisher-Rao metric is not positive definite");
    }
    const ChristoffelTensor low = christoffel_lowered(theta);
    const Index n = theta.dim();
    ChristoffelTensor out(n, alpha);
    Vector rhs(n);
    for (Index j = 0; j < n; ++j) {
        for (Index k = 0; k < n; ++k) {
            for (Index l = 0; l < n; ++l) rhs[l] = low(l, j, k);
            const Vector raised = llt.solve(rhs);
            for (Index i = 0; i < n; ++i) out(i, j, k) = (1.0 - alpha) * raised[i];
        }
    }
    return out;
}

/// Replicator matrix R_p = Diag(p) - p p^T; the Jacobian of softmax at sm^{-1}(p).
inline Matrix replicator(const Eigen::Ref<const Vector>& p)
{
    Matrix r = -p * p.transpose();
    r.diagonal() += p;
    return r;
}

inline Matrix replicator(const SimplexPoint& p) { return replicator(p.p()); }

/// Sphere map Lambda(p) = 2 sqrt(p), an isometry onto the radius-2 sphere orthant.
inline Vector sphere_map(const SimplexPoint& p) { return 2.0 * p.p().array().sqrt().matrix(); }

/// Jacobian (c x (c-1)) of theta -> Lambda(to_prob(theta)).
inline Matrix sphere_map_jacobian(const ThetaVector& theta)
{
    const SimplexPoint p = to_prob(theta);
    const Index c = p.num_labels();
    const Index n = theta.dim();
    Matrix dp(c, n);
    for (Index k = 0; k < n; ++k) {
        dp(0, k) = -p[0] * p[k + 1];
        for (Index i = 1; i < c; ++i) {
            dp(i, k) = (i == k + 1 ? p[i] : 0.0) - p[i] * p[k + 1];
        }
    }
    for (Index i = 0; i < c; ++i) {
        dp.row(i) /= std::sqrt(p[i]);
    }
    return dp;
}

/// B_ij = g_ij + 1/2 theta^k d_k g_ij.
inline Matrix b_matrix(const ThetaVector& theta)
{
    Matrix b = fisher_metric(theta).g;
    const MetricDerivative d = metric_derivative(theta);
    const Index n = theta.dim();
    for (Index i = 0; i < n; ++i)
        for (Index j = 0; j < n; ++j) {
            double s = 0.0;
            for (Index k = 0; k < n; ++k) s += theta[k] * d(i, j, k);
            b(i, j) += 0.5 * s;
        }
    return b;
}

/// Uniform spectral bounds (c1, c2) of the B matrix for c labels.
inline std::pair<double, double> b_matrix_bounds(Index c)
{
    const double q = (double(c) * double(c) - 1.0) / std::numbers::e;
    return {-0.5 * q, 0.5 * (1.0 + q)};
}

/// v = Pi_0 (0, theta).
inline TangentVector theta_to_tangent(const ThetaVector& theta)
{
    Vector ext(theta.num_labels());
    ext[0] = 0.0;
    ext.tail(theta.dim()) = theta.theta();
    return project_T0(ext);
}

/// (0, theta) = v - v^0 1.
inline ThetaVector tangent_to_theta(const TangentVector& v)
{
    return ThetaVector(v.v().tail(v.size() - 1).array() - v[0]);
}

} // namespace sigmaflow::simplex
