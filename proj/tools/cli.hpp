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

#include <sigmaflow/config.hpp>

#include <iosfwd>
#include <string>
#include <vector>

namespace sigmaflow::cli {

enum ExitCode : int { exit_ok = 0, exit_usage = 1, exit_validation = 2, exit_numerical = 3 };

/// Parses argv (without the program name) and runs one subcommand.
int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

/// Largest Euclidean distance between any two node states.
double max_pairwise_distance(const Field& S);

struct TorusDemoResult
{
    std::vector<double> times;
    std::vector<double> max_pairwise;       ///< per sample
    std::vector<double> low_entropy_share;  ///< share of nodes with entropy below 0.05
    double convergence_time = -1.0;         ///< first sample meeting the criterion, -1 if none
    IntegrationResult run;
};

/// Integrates the embedded-torus initial state. Convergence means collapse to one
/// point (max pairwise distance < 1e-3) when m^2 = 0 and near-vertex nodes
/// (99% of nodes below 0.05 nats) otherwise.
TorusDemoResult torus_demo(Index height, Index width, const FlowSpec& spec, double sample_interval);

} // namespace sigmaflow::cli
