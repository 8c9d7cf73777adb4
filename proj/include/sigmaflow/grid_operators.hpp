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

// Finite-difference operators on the periodic grid: derivative stencils, the
// divergence-form Laplace-Beltrami operator, the metric-weighted gradient
// pairing and constructors / diagnostics for SPD metric fields.

#include <sigmaflow/error.hpp>
#include <sigmaflow/grid.hpp>
#include <sigmaflow/types.hpp>

#include <Eigen/Core>
#include <Eigen/SparseCore>

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <utility>
#include <vector>

namespace sigmaflow {

using SparseOperator = Eigen::SparseMatrix<double, Eigen::RowMajor>;

/// Pair of derivative operators (x direction, y direction).
struct DerivativeOperators
{
    SparseOperator dx;
    SparseOperator dy;
};

/// L = Q E with Q = diag(1 / sqrt|h|) and E the divergence-form part.
struct LaplaceBeltrami
{
    SparseOperator L;
    Vector q;
    SparseOperator E;
};

namespace detail {

// Sobel-type x-derivative mask, indexed [row offset + 1][column offset + 1].
inline constexpr std::array<std::array<double, 3>, 3> kDxMask = {{
    {-1.0 / 8.0, 0.0, 1.0 / 8.0},
    {-2.0 / 8.0, 0.0, 2.0 / 8.0},
    {-1.0 / 8.0, 0.0, 1.0 / 8.0},
}};

inline SparseOperator stencil_matrix(const TorusGrid& grid, const std::array<std::array<double, 3>, 3>& mask)
{
    std::vector<Eigen::Triplet<double>> trip;
    trip.reserve(static_cast<std::size_t>(grid.size() * 6));
    for (Index a = 0; a < grid.size(); ++a) {
        for (int di = -1; di <= 1; ++di) {
            for (int dj = -1; dj <= 1; ++dj) {
                const double w = mask[di + 1][dj + 1];
                if (w != 0.0) trip.emplace_back(a, grid.shift(a, di, dj), w);
            }
        }
    }
    SparseOperator m(grid.size(), grid.size());
    m.setFromTriplets(trip.begin(), trip.end());
    return m;
}

} // namespace detail

inline DerivativeOperators derivative_operators(const TorusGrid& grid)
{
    std::array<std::array<double, 3>, 3> dy_mask{};
    for (int r = 0; r < 3; ++r)
        for (int s = 0; s < 3; ++s) dy_mask[r][s] = detail::kDxMask[s][r];
    return {detail::stencil_matrix(grid, detail::kDxMask), detail::stencil_matrix(grid, dy_mask)};
}

/// Applies the x- and y-derivative stencils to every column of F.
inline std::pair<Field, Field> apply_derivatives(const TorusGrid& grid, const Field& f)
{
    const Index n = grid.size();
    const Index c = f.cols();
    Field fx = Field::Zero(n, c);
    Field fy = Field::Zero(n, c);
    const Index H = grid.height(), W = grid.width();
    for (Index i = 0; i < H; ++i) {
        const Index im = (i + H - 1) % H, ip = (i + 1) % H;
        for (Index j = 0; j < W; ++j) {
            const Index jm = (j + W - 1) % W, jp = (j + 1) % W;
            const Index a = i * W + j;
            fx.row(a) = 0.125 * ((f.row(im * W + jp) - f.row(im * W + jm)) +
                                 2.0 * (f.row(i * W + jp) - f.row(i * W + jm)) +
                                 (f.row(ip * W + jp) - f.row(ip * W + jm)));
            fy.row(a) = 0.125 * ((f.row(ip * W + jm) - f.row(im * W + jm)) +
                                 2.0 * (f.row(ip * W + j) - f.row(im * W + j)) +
                                 (f.row(ip * W + jp) - f.row(im * W + jp)));
        }
    }
    return {std::move(fx), std::move(fy)};
}

/// Adjoint of apply_derivatives: returns D_x^T gx + D_y^T gy.
inline Field apply_derivatives_adjoint(const TorusGrid& grid, const Field& gx, const Field& gy)
{
    const Index H = grid.height(), W = grid.width();
    Field out = Field::Zero(grid.size(), gx.cols());
    for (Index i = 0; i < H; ++i) {
        const Index im = (i + H - 1) % H, ip = (i + 1) % H;
        for (Index j = 0; j < W; ++j) {
            const Index jm = (j + W - 1) % W, jp = (j + 1) % W;
            const Index a = i * W + j;
            const auto x = 0.125 * gx.row(a);
            out.row(im * W + jp) += x;
            out.row(im * W + jm) -= x;
            out.row(i * W + jp) += 2.0 * x;
            out.row(i * W + jm) -= 2.0 * x;
            out.row(ip * W + jp) += x;
            out.row(ip * W + jm) -= x;
            const auto y = 0.125 * gy.row(a);
            out.row(ip * W + jm) += y;
            out.row(im * W + jm) -= y;
            out.row(ip * W + j) += 2.0 * y;
            out.row(im * W + j) -= 2.0 * y;
            out.row(ip * W + jp) += y;
            out.row(im * W + jp) -= y;
        }
    }
    return out;
}

/// Diffusion coefficients sqrt|h| h^{mu nu} (columns a = xx, b = xy, c = yy) and the
/// scale factor 1 / sqrt|h|, computed from a metric field of either interpretation.
struct DiffusionCoefficients
{
    Field coef;
    Vector q;
};

inline DiffusionCoefficients diffusion_coefficients(const MetricField& field)
{
    const MetricField hinv = field.as_inverse();
    const Field& m = hinv.components();
    DiffusionCoefficients out{Field(m.rows(), 3), Vector(m.rows())};
    for (Index a = 0; a < m.rows(); ++a) {
        const double det = m(a, 0) * m(a, 2) - m(a, 1) * m(a, 1);
        const double s = std::sqrt(det);
        out.q[a] = s;
        out.coef.row(a) = m.row(a) / s;
    }
    return out;
}

/// Sparse assembly of E U = d_x(a d_x U) + d_x(b d_y U) + d_y(b d_x U) + d_y(c d_y U)
/// with coefficients averaged at half-grid points and central mixed differences.
inline SparseOperator assemble_divergence_operator(const TorusGrid& grid, const Field& coef)
{
    std::vector<Eigen::Triplet<double>> trip;
    trip.reserve(static_cast<std::size_t>(grid.size() * 9));
    auto A = [&](Index n) { return coef(n, 0); };
    auto B = [&](Index n) { return coef(n, 1); };
    auto C = [&](Index n) { return coef(n, 2); };
    for (Index a = 0; a < grid.size(); ++a) {
        const Index xp = grid.shift(a, 0, 1), xm = grid.shift(a, 0, -1);
        const Index yp = grid.shift(a, 1, 0), ym = grid.shift(a, -1, 0);
        trip.emplace_back(a, a, -0.5 * (A(xp) + 2.0 * A(a) + A(xm)) - 0.5 * (C(yp) + 2.0 * C(a) + C(ym)));
        trip.emplace_back(a, xp, 0.5 * (A(xp) + A(a)));
        trip.emplace_back(a, xm, 0.5 * (A(xm) + A(a)));
        trip.emplace_back(a, yp, 0.5 * (C(yp) + C(a)));
        trip.emplace_back(a, ym, 0.5 * (C(ym) + C(a)));
        trip.emplace_back(a, grid.shift(a, 1, 1), 0.25 * (B(xp) + B(yp)));
        trip.emplace_back(a, grid.shift(a, -1, 1), -0.25 * (B(xp) + B(ym)));
        trip.emplace_back(a, grid.shift(a, 1, -1), -0.25 * (B(xm) + B(yp)));
        trip.emplace_back(a, grid.shift(a, -1, -1), 0.25 * (B(xm) + B(ym)));
    }
    SparseOperator e(grid.size(), grid.size());
    e.setFromTriplets(trip.begin(), trip.end());
    return e;
}

/// Matrix-free application of the divergence operator to every column of U.
inline Field apply_divergence(const TorusGrid& grid, const Field& coef, const Field& u)
{
    const Index H = grid.height(), W = grid.width();
    Field out(u.rows(), u.cols());
    for (Index i = 0; i < H; ++i) {
        const Index im = (i + H - 1) % H, ip = (i + 1) % H;
        for (Index j = 0; j < W; ++j) {
            const Index jm = (j + W - 1) % W, jp = (j + 1) % W;
            const Index a = i * W + j;
            const Index xp = i * W + jp, xm = i * W + jm, yp = ip * W + j, ym = im * W + j;
            const Index pp = ip * W + jp, mp = im * W + jp, pm = ip * W + jm, mm = im * W + jm;
            out.row(a) = 0.5 * (coef(xp, 0) + coef(a, 0)) * (u.row(xp) - u.row(a)) -
                         0.5 * (coef(a, 0) + coef(xm, 0)) * (u.row(a) - u.row(xm)) +
                         0.5 * (coef(yp, 2) + coef(a, 2)) * (u.row(yp) - u.row(a)) -
                         0.5 * (coef(a, 2) + coef(ym, 2)) * (u.row(a) - u.row(ym)) +
                         0.25 * (coef(xp, 1) * (u.row(pp) - u.row(mp)) - coef(xm, 1) * (u.row(pm) - u.row(mm))) +
                         0.25 * (coef(yp, 1) * (u.row(pp) - u.row(pm)) - coef(ym, 1) * (u.row(mp) - u.row(mm)));
        }
    }
    return out;
}

/// Gradient of sum(ybar .* apply_divergence(coef, U)) with respect to the coefficient field.
inline Field divergence_coefficient_adjoint(const TorusGrid& grid, const Field& ybar, const Field& u)
{
    const Index H = grid.height(), W = grid.width();
    Field g = Field::Zero(u.rows(), 3);
    for (Index i = 0; i < H; ++i) {
        const Index im = (i + H - 1) % H, ip = (i + 1) % H;
        for (Index j = 0; j < W; ++j) {
            const Index jm = (j + W - 1) % W, jp = (j + 1) % W;
            const Index a = i * W + j;
            const Index xp = i * W + jp, xm = i * W + jm, yp = ip * W + j, ym = im * W + j;
            const Index pp = ip * W + jp, mp = im * W + jp, pm = ip * W + jm, mm = im * W + jm;
            const auto y = ybar.row(a);
            const double fxp = 0.5 * y.dot(u.row(xp) - u.row(a));
            const double fxm = 0.5 * y.dot(u.row(a) - u.row(xm));
            const double fyp = 0.5 * y.dot(u.row(yp) - u.row(a));
            const double fym = 0.5 * y.dot(u.row(a) - u.row(ym));
            g(xp, 0) += fxp;
            g(a, 0) += fxp - fxm;
            g(xm, 0) -= fxm;
            g(yp, 2) += fyp;
            g(a, 2) += fyp - fym;
            g(ym, 2) -= fym;
            g(xp, 1) += 0.25 * y.dot(u.row(pp) - u.row(mp));
            g(xm, 1) -= 0.25 * y.dot(u.row(pm) - u.row(mm));
            g(yp, 1) += 0.25 * y.dot(u.row(pp) - u.row(pm));
            g(ym, 1) -= 0.25 * y.dot(u.row(mp) - u.row(mm));
        }
    }
    return g;
}

/// Discrete Laplace-Beltrami operator L_h = Q_h E_h.
inline LaplaceBeltrami assemble_laplace_beltrami(const MetricField& h_field)
{
    DiffusionCoefficients dc = diffusion_coefficients(h_field);
    SparseOperator e = assemble_divergence_operator(h_field.grid(), dc.coef);
    SparseOperator l = dc.q.asDiagonal() * e;
    l.makeCompressed();
    return {std::move(l), std::move(dc.q), std::move(e)};
}

/// Matrix-free L_h U.
inline Field apply_laplace_beltrami(const MetricField& h_field, const Field& u)
{
    const DiffusionCoefficients dc = diffusion_coefficients(h_field);
    return dc.q.asDiagonal() * apply_divergence(h_field.grid(), dc.coef, u);
}

/// Metric-weighted pairing: entry (a, i) = h_a^{mu nu} (D_mu F)_{a,i} (D_nu F)_{a,i}.
inline Field pairing(const MetricField& h_inv_field, const Field& f)
{
    if (h_inv_field.interpretation() != MetricInterpretation::inverse) {
        throw ValidationError("pairing: expected the inverse metric");
    }
    if (f.rows() != h_inv_field.size()) {
        throw ValidationError("pairing: field and metric sizes differ");
    }
    const auto [fx, fy] = apply_derivatives(h_inv_field.grid(), f);
    const Field& m = h_inv_field.components();
    Field out(f.rows(), f.cols());
    for (Index a = 0; a < f.rows(); ++a) {
        out.row(a) = m(a, 0) * fx.row(a).array().square() +
                     2.0 * m(a, 1) * fx.row(a).array() * fy.row(a).array() +
                     m(a, 2) * fy.row(a).array().square();
    }
    return out;
}

/// Inverse-metric components (xx, xy, yy) of one node from raw parameters (x, y, z):
/// lambda = sigmoid(x) + 0.01, angle = (pi/2) tanh(y), v = sigmoid(z) + 0.01,
/// h^{-1} = (1/v) R(angle) diag(lambda, 1/lambda) R(angle)^T.
struct ParamMetric
{
    std::array<double, 3> hinv;
    /// d hinv[r] / d param[s].
    std::array<std::array<double, 3>, 3> jacobian;
};

inline ParamMetric metric_from_params_node(double x, double y, double z)
{
    const double sx = 1.0 / (1.0 + std::exp(-x));
    const double sz = 1.0 / (1.0 + std::exp(-z));
    const double lam = sx + 0.01;
    const double th = std::tanh(y);
    const double ang = 0.5 * std::numbers::pi * th;
    const double v = sz + 0.01;
    const double s = std::sin(ang), c = std::cos(ang);
    const double inv_lam = 1.0 / lam;
    const double a = lam * c * c + inv_lam * s * s;
    const double b = (lam - inv_lam) * s * c;
    const double cc = lam * s * s + inv_lam * c * c;

    ParamMetric out{};
    out.hinv = {a / v, b / v, cc / v};

    const double dlam_dx = sx * (1.0 - sx);
    const double dang_dy = 0.5 * std::numbers::pi * (1.0 - th * th);
    const double dv_dz = sz * (1.0 - sz);
    const double dinv = -inv_lam * inv_lam;
    // d/dlambda
    const double da_dl = c * c + dinv * s * s;
    const double db_dl = (1.0 - dinv) * s * c;
    const double dc_dl = s * s + dinv * c * c;
    // d/dangle, using d(s^2) = 2sc, d(c^2) = -2sc, d(sc) = c^2 - s^2
    const double da_dt = (inv_lam - lam) * 2.0 * s * c;
    const double db_dt = (lam - inv_lam) * (c * c - s * s);
    const double dc_dt = (lam - inv_lam) * 2.0 * s * c;

    out.jacobian[0] = {da_dl * dlam_dx / v, da_dt * dang_dy / v, -a / (v * v) * dv_dz};
    out.jacobian[1] = {db_dl * dlam_dx / v, db_dt * dang_dy / v, -b / (v * v) * dv_dz};
    out.jacobian[2] = {dc_dl * dlam_dx / v, dc_dt * dang_dy / v, -cc / (v * v) * dv_dz};
    return out;
}

/// Inverse metric field from an N x 3 raw parameter field.
inline MetricField metric_from_params(const TorusGrid& grid, const Field& params)
{
    if (params.rows() != grid.size() || params.cols() != 3) {
        throw ValidationError("metric_from_params: expected N x 3 parameters");
    }
    if (!params.allFinite()) {
        throw DomainError("metric_from_params: non-finite parameters");
    }
    Field comp(params.rows(), 3);
    for (Index a = 0; a < params.rows(); ++a) {
        const ParamMetric pm = metric_from_params_node(params(a, 0), params(a, 1), params(a, 2));
        comp(a, 0) = pm.hinv[0];
        comp(a, 1) = pm.hinv[1];
        comp(a, 2) = pm.hinv[2];
    }
    return MetricField(grid, MetricInterpretation::inverse, std::move(comp));
}

/// Raw parameter value that maps to lambda = v = 1, i.e. the identity metric.
inline double identity_param() { return std::log(0.99 / 0.01); }

/// Periodic Gaussian smoothing of every column, truncated at radius ceil(3 sigma).
inline Field gaussian_smooth(const TorusGrid& grid, const Field& f, double sigma)
{
    if (sigma <= 0.0) return f;
    const int radius = static_cast<int>(std::ceil(3.0 * sigma));
    std::vector<double> w(static_cast<std::size_t>(2 * radius + 1));
    double total = 0.0;
    for (int k = -radius; k <= radius; ++k) {
        w[static_cast<std::size_t>(k + radius)] = std::exp(-0.5 * k * k / (sigma * sigma));
        total += w[static_cast<std::size_t>(k + radius)];
    }
    for (double& x : w) x /= total;

    Field tmp = Field::Zero(f.rows(), f.cols());
    for (Index a = 0; a < grid.size(); ++a)
        for (int k = -radius; k <= radius; ++k)
            tmp.row(a) += w[static_cast<std::size_t>(k + radius)] * f.row(grid.shift(a, 0, k));
    Field out = Field::Zero(f.rows(), f.cols());
    for (Index a = 0; a < grid.size(); ++a)
        for (int k = -radius; k <= radius; ++k)
            out.row(a) += w[static_cast<std::size_t>(k + radius)] * tmp.row(grid.shift(a, k, 0));
    return out;
}

enum class EdgeFunction { exponential, rational };

inline double apply_edge_function(EdgeFunction fn, double s)
{
    return fn == EdgeFunction::exponential ? std::exp(-s) : 1.0 / (1.0 + s);
}

/// Smoothed structure tensor J_rho = K_rho * (grad f_sigma (x) grad f_sigma), summed
/// over channels. Columns (xx, xy, yy).
inline Field structure_tensor(const TorusGrid& grid, const Field& f, double rho, double sigma)
{
    const Field fs = gaussian_smooth(grid, f, sigma);
    const auto [fx, fy] = apply_derivatives(grid, fs);
    Field j(grid.size(), 3);
    j.col(0) = fx.array().square().rowwise().sum();
    j.col(1) = (fx.array() * fy.array()).rowwise().sum();
    j.col(2) = fy.array().square().rowwise().sum();
    return gaussian_smooth(grid, j, rho);
}

/// Edge-stopping diffusion tensor D(J): eigenvectors of the structure tensor with
/// eigenvalues s mapped to edge_fn(s / contrast^2). Returned as an inverse metric.
inline MetricField structure_tensor_metric(const TorusGrid& grid,
                                           const Field& f,
                                           double rho,
                                           double sigma,
                                           EdgeFunction edge_fn,
                                           double contrast = 1.0)
{
    if (rho < 0.0 || sigma < 0.0 || !(contrast > 0.0)) {
        throw ValidationError("structure_tensor_metric: rho, sigma must be >= 0 and contrast > 0");
    }
    const Field j = structure_tensor(grid, f, rho, sigma);
    Field comp(grid.size(), 3);
    const double k2 = contrast * contrast;
    for (Index a = 0; a < grid.size(); ++a) {
        const double p = j(a, 0), q = j(a, 1), r = j(a, 2);
        const auto [lo, hi] = MetricField::eigenvalues(p, q, r);
        // Unit eigenvector of the larger eigenvalue.
        double ex = 1.0, ey = 0.0;
        if (std::abs(q) > 1e-300 || p < r) {
            ex = hi - r;
            ey = q;
            double nrm = std::hypot(ex, ey);
            if (nrm < 1e-300) {
                ex = q;
                ey = hi - p;
                nrm = std::hypot(ex, ey);
            }
            if (nrm < 1e-300) {
                ex = 1.0;
                ey = 0.0;
            } else {
                ex /= nrm;
                ey /= nrm;
            }
        }
        const double d_hi = apply_edge_function(edge_fn, std::max(hi, 0.0) / k2);
        const double d_lo = apply_edge_function(edge_fn, std::max(lo, 0.0) / k2);
        comp(a, 0) = d_hi * ex * ex + d_lo * ey * ey;
        comp(a, 1) = (d_hi - d_lo) * ex * ey;
        comp(a, 2) = d_hi * ey * ey + d_lo * ex * ex;
    }
    return MetricField(grid, MetricInterpretation::inverse, std::move(comp));
}

/// Per-node anisotropy index of the unit-determinant part h^{-1} sqrt|h| and the
/// scale factor 1 / sqrt|h|.
struct MetricDiagnostics
{
    Vector anisotropy;
    Vector scale;
};

inline MetricDiagnostics metric_diagnostics(const MetricField& h_field)
{
    const MetricField hinv = h_field.as_inverse();
    const Field& m = hinv.components();
    MetricDiagnostics out{Vector(m.rows()), Vector(m.rows())};
    for (Index a = 0; a < m.rows(); ++a) {
        const auto [lo, hi] = MetricField::eigenvalues(m(a, 0), m(a, 1), m(a, 2));
        out.anisotropy[a] = std::numbers::sqrt2 * 0.5 * std::abs(std::log(hi / lo));
        out.scale[a] = std::sqrt(m(a, 0) * m(a, 2) - m(a, 1) * m(a, 1));
    }
    return out;
}

} // namespace sigmaflow
