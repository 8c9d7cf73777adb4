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

#include <sigmaflow/error.hpp>
#include <sigmaflow/types.hpp>

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <utility>

namespace sigmaflow {

/// Doubly periodic H x W grid with unit spacing. Node a = i * W + j; i is the row
/// (y direction), j the column (x direction).
class TorusGrid
{
public:
    TorusGrid(Index height, Index width)
        : m_height(height)
        , m_width(width)
    {
        if (height < 3 || width < 3) {
            throw ValidationError("TorusGrid: height and width must be at least 3");
        }
    }

    Index height() const { return m_height; }
    Index width() const { return m_width; }
    Index size() const { return m_height * m_width; }

    Index index(Index i, Index j) const { return wrap_row(i) * m_width + wrap_col(j); }
    Index row(Index a) const { return a / m_width; }
    Index col(Index a) const { return a % m_width; }

    /// Index of the node displaced by (di, dj) from node a.
    Index shift(Index a, Index di, Index dj) const { return index(row(a) + di, col(a) + dj); }

    bool operator==(const TorusGrid& o) const = default;

private:
    Index wrap_row(Index i) const { return ((i % m_height) + m_height) % m_height; }
    Index wrap_col(Index j) const { return ((j % m_width) + m_width) % m_width; }

    Index m_height;
    Index m_width;
};

/// Whether a MetricField stores the metric h or its inverse h^{-1}.
enum class MetricInterpretation { metric, inverse };

inline const char* to_string(MetricInterpretation m)
{
    return m == MetricInterpretation::metric ? "h" : "hinv";
}

/// Per-node symmetric positive-definite 2x2 tensor field. Components are stored
/// as an N x 3 matrix with columns (xx, xy, yy).
class MetricField
{
public:
    MetricField(TorusGrid grid, MetricInterpretation interp, Field components)
        : m_grid(grid)
        , m_interp(interp)
        , m_comp(std::move(components))
    {
        if (m_comp.rows() != grid.size() || m_comp.cols() != 3) {
            throw ValidationError("MetricField: expected N x 3 components");
        }
        m_lower_bound = validate();
    }

    static MetricField identity(TorusGrid grid, MetricInterpretation interp = MetricInterpretation::inverse)
    {
        Field comp(grid.size(), 3);
        comp.col(0).setOnes();
        comp.col(1).setZero();
        comp.col(2).setOnes();
        return MetricField(grid, interp, std::move(comp));
    }

    const TorusGrid& grid() const { return m_grid; }
    MetricInterpretation interpretation() const { return m_interp; }
    const Field& components() const { return m_comp; }
    Index size() const { return m_comp.rows(); }

    /// Smallest eigenvalue over all nodes (the uniform positive-definiteness constant).
    double lower_bound() const { return m_lower_bound; }

    Eigen::Matrix2d at(Index a) const
    {
        Eigen::Matrix2d m;
        m << m_comp(a, 0), m_comp(a, 1), m_comp(a, 1), m_comp(a, 2);
        return m;
    }

    /// Same field with the other interpretation (pointwise matrix inverse).
    MetricField inverted() const
    {
        Field out(m_comp.rows(), 3);
        for (Index a = 0; a < m_comp.rows(); ++a) {
            const double det = m_comp(a, 0) * m_comp(a, 2) - m_comp(a, 1) * m_comp(a, 1);
            out(a, 0) = m_comp(a, 2) / det;
            out(a, 1) = -m_comp(a, 1) / det;
            out(a, 2) = m_comp(a, 0) / det;
        }
        const auto other = m_interp == MetricInterpretation::metric ? MetricInterpretation::inverse
                                                                    : MetricInterpretation::metric;
        return MetricField(m_grid, other, std::move(out));
    }

    MetricField as_inverse() const
    {
        return m_interp == MetricInterpretation::inverse ? *this : inverted();
    }

    MetricField as_metric() const
    {
        return m_interp == MetricInterpretation::metric ? *this : inverted();
    }

    /// Eigenvalues (ascending) of a symmetric 2x2 matrix [[p, q], [q, r]].
    static std::pair<double, double> eigenvalues(double p, double q, double r)
    {
        const double mean = 0.5 * (p + r);
        const double rad = std::hypot(0.5 * (p - r), q);
        return {mean - rad, mean + rad};
    }

private:
    double validate() const
    {
        double lb = std::numeric_limits<double>::infinity();
        for (Index a = 0; a < m_comp.rows(); ++a) {
            const double p = m_comp(a, 0), q = m_comp(a, 1), r = m_comp(a, 2);
            if (!std::isfinite(p) || !std::isfinite(q) || !std::isfinite(r)) {
                throw ValidationError("MetricField: non-finite entry at node " + std::to_string(a));
            }
            const double lo = eigenvalues(p, q, r).first;
            if (!(lo > 0.0) || p * r - q * q <= 0.0) {
                throw ValidationError("MetricField: node " + std::to_string(a) +
                                      " is not positive definite");
            }
            lb = std::min(lb, lo);
        }
        return lb;
    }

    TorusGrid m_grid;
    MetricInterpretation m_interp;
    Field m_comp;
    double m_lower_bound = 0.0;
};

} // namespace sigmaflow
