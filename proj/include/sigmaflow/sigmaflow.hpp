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

// Convenience header pulling in the whole library.

#pragma once

#include "config.hpp"
#include "error.hpp"
#include "flow_engine.hpp"
#include "grid.hpp"
#include "grid_operators.hpp"
#include "io.hpp"
#include "learning.hpp"
#include "metric_operators.hpp"
#include "parallel.hpp"
#include "simplex_geometry.hpp"
#include "types.hpp"
