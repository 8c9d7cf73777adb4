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

#include "io.hpp"
#include "learning.hpp"

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include <cstdint>
#include <sstream>
#include <string>
#include <vector>

namespace sigmaflow {

/// Complete description of one invocation. Stored as INI text: one section per
/// group, keys as in the member names.
struct RunConfig
{
    std::string command = "run";
    std::uint64_t seed = 0;
    int threads = 1;
    std::string out = "out";

    struct Input
    {
        std::string init;       ///< AMF1 initial state
        std::string labels;     ///< PGM label map (target or scene)
        std::string metric;     ///< MTF1 metric field
        std::string checkpoint; ///< learned operator parameters
        std::string dataset;    ///< dataset directory with manifest.csv
        bool validate = true;
        bool operator==(const Input&) const = default;
    } input;

    struct Grid
    {
        Index height = 32;
        Index width = 32;
        int labels = 3;
        std::string init = "random"; ///< random | constant | torus | corrupted | file
        double amplitude = 1.0;
        double offset = 0.0;
        bool operator==(const Grid&) const = default;
    } grid;

    struct Flow
    {
        std::string family = "sigma"; ///< sigma | sflow | spherical
        double alpha = 0.0;
        double m2 = 0.0;
        double epsilon = 0.0;
        double T = 1.0;
        std::string integrator = "euler"; ///< euler | rk4 | adaptive
        double step = 0.1;
        double rtol = 1e-6;
        double atol = 1e-6;
        std::string refresh = "per_stage";
        std::string metric = "flat"; ///< flat | file | structure_tensor | learned
        double rho = 1.0;
        double sigma = 1.0;
        std::string edge = "exp"; ///< exp | rational
        double contrast = 1.0;
        double sample_interval = 0.0;
        bool operator==(const Flow&) const = default;
    } flow;

    struct Unrolled
    {
        double alpha = 0.0;
        double m2 = 4.0;
        double T = 2.0;
        double step = 0.2;
        std::string loss = "ce"; ///< ce | kl_target_model | kl_model_target
        bool operator==(const Unrolled&) const = default;
    } unrolled;

    struct Corruption
    {
        double smoothing = 0.8;
        double noise_std = 0.2;
        bool operator==(const Corruption&) const = default;
    } corruption;

    struct Fit
    {
        int steps = 500;
        double lr = 0.01;
        std::string optimizer = "adabelief";
        bool line_search = false;
        double target_error = 0.0;
        bool operator==(const Fit&) const = default;
    } fit;

    struct Train
    {
        int epochs = 30;
        double lr = 0.01;
        int batch_size = 2;
        std::string optimizer = "adabelief";
        int kernel = 7;
        int filters = 16;
        std::vector<int> hidden{16, 8, 4};
        bool operator==(const Train&) const = default;
    } train;

    struct Data
    {
        Index height = 48;
        Index width = 48;
        int labels = 5;
        int train = 20;
        int test = 10;
        double validation_fraction = 0.1;
        int min_sites = 4;
        int max_sites = 12;
        bool operator==(const Data&) const = default;
    } data;

    bool operator==(const RunConfig&) const = default;
};

namespace detail {

inline std::string join_ints(const std::vector<int>& v)
{
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
    return s;
}

inline std::vector<int> split_ints(const std::string& s)
{
    std::vector<int> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ','))
        if (!item.empty()) out.push_back(std::stoi(item));
    return out;
}

/// Binds every RunConfig key to a section/name pair; shared by reading and writing.
template <typename Visitor>
void visit_config(RunConfig& c, Visitor&& v)
{
    v("run.command", c.command);
    v("run.seed", c.seed);
    v("run.threads", c.threads);
    v("run.out", c.out);
    v("input.init", c.input.init);
    v("input.labels", c.input.labels);
    v("input.metric", c.input.metric);
    v("input.checkpoint", c.input.checkpoint);
    v("input.dataset", c.input.dataset);
    v("input.validate", c.input.validate);
    v("grid.height", c.grid.height);
    v("grid.width", c.grid.width);
    v("grid.labels", c.grid.labels);
    v("grid.init", c.grid.init);
    v("grid.amplitude", c.grid.amplitude);
    v("grid.offset", c.grid.offset);
    v("flow.family", c.flow.family);
    v("flow.alpha", c.flow.alpha);
    v("flow.m2", c.flow.m2);
    v("flow.epsilon", c.flow.epsilon);
    v("flow.T", c.flow.T);
    v("flow.integrator", c.flow.integrator);
    v("flow.step", c.flow.step);
    v("flow.rtol", c.flow.rtol);
    v("flow.atol", c.flow.atol);
    v("flow.refresh", c.flow.refresh);
    v("flow.metric", c.flow.metric);
    v("flow.rho", c.flow.rho);
    v("flow.sigma", c.flow.sigma);
    v("flow.edge", c.flow.edge);
    v("flow.contrast", c.flow.contrast);
    v("flow.sample_interval", c.flow.sample_interval);
    v("unrolled.alpha", c.unrolled.alpha);
    v("unrolled.m2", c.unrolled.m2);
    v("unrolled.T", c.unrolled.T);
    v("unrolled.step", c.unrolled.step);
    v("unrolled.loss", c.unrolled.loss);
    v("corruption.smoothing", c.corruption.smoothing);
    v("corruption.noise_std", c.corruption.noise_std);
    v("fit.steps", c.fit.steps);
    v("fit.lr", c.fit.lr);
    v("fit.optimizer", c.fit.optimizer);
    v("fit.line_search", c.fit.line_search);
    v("fit.target_error", c.fit.target_error);
    v("train.epochs", c.train.epochs);
    v("train.lr", c.train.lr);
    v("train.batch_size", c.train.batch_size);
    v("train.optimizer", c.train.optimizer);
    v("train.kernel", c.train.kernel);
    v("train.filters", c.train.filters);
    v("train.hidden", c.train.hidden);
    v("data.height", c.data.height);
    v("data.width", c.data.width);
    v("data.labels", c.data.labels);
    v("data.train", c.data.train);
    v("data.test", c.data.test);
    v("data.validation_fraction", c.data.validation_fraction);
    v("data.min_sites", c.data.min_sites);
    v("data.max_sites", c.data.max_sites);
}

template <typename T>
std::string to_text(const T& x)
{
    if constexpr (std::is_same_v<T, std::string>) return x;
    else if constexpr (std::is_same_v<T, bool>) return x ? "true" : "false";
    else if constexpr (std::is_same_v<T, double>) return io::format_double(x);
    else if constexpr (std::is_same_v<T, std::vector<int>>) return join_ints(x);
    else return std::to_string(x);
}

template <typename T>
void from_text(const std::string& key, const std::string& s, T& x)
{
    try {
        if constexpr (std::is_same_v<T, std::string>) x = s;
        else if constexpr (std::is_same_v<T, bool>) {
            if (s == "true" || s == "1") x = true;
            else if (s == "false" || s == "0") x = false;
            else throw std::invalid_argument(s);
        } else if constexpr (std::is_same_v<T, double>) x = io::parse_double(s);
        else if constexpr (std::is_same_v<T, std::vector<int>>) x = split_ints(s);
        else if constexpr (std::is_same_v<T, std::uint64_t>) {
            std::size_t used = 0;
            x = std::stoull(s, &used);
            if (used != s.size()) throw std::invalid_argument(s);
        } else {
            std::size_t used = 0;
            x = T(std::stoll(s, &used));
            if (used != s.size()) throw std::invalid_argument(s);
        }
    } catch (const std::exception&) {
        throw ValidationError("config: invalid value '" + s + "' for " + key);
    }
}

} // namespace detail

inline std::string to_ini(RunConfig c)
{
    boost::property_tree::ptree pt;
    detail::visit_config(c, [&](const char* key, auto& x) { pt.put(key, detail::to_text(x)); });
    std::ostringstream out;
    boost::property_tree::write_ini(out, pt);
    return out.str();
}

/// Parses INI text over the defaults. Unknown keys are rejected.
inline RunConfig parse_ini(const std::string& text, RunConfig base = {})
{
    boost::property_tree::ptree pt;
    std::istringstream in(text);
    try {
        boost::property_tree::read_ini(in, pt);
    } catch (const boost::property_tree::ini_parser_error& e) {
        throw ValidationError(std::string("config: ") + e.message() + " at line " + std::to_string(e.line()));
    }
    std::vector<std::string> known;
    detail::visit_config(base, [&](const char* key, auto& x) {
        known.emplace_back(key);
        if (auto v = pt.get_optional<std::string>(key)) detail::from_text(key, *v, x);
    });
    for (const auto& [section, body] : pt) {
        if (body.empty()) throw ValidationError("config: key '" + section + "' outside a section");
        for (const auto& [name, _] : body) {
            const std::string key = section + "." + name;
            if (std::find(known.begin(), known.end(), key) == known.end())
                throw ValidationError("config: unknown key " + key);
        }
    }
    return base;
}

/// Sets a single key given as "section.name".
inline void set_config_value(RunConfig& c, const std::string& key, const std::string& value)
{
    bool found = false;
    detail::visit_config(c, [&](const char* k, auto& x) {
        if (key == k) {
            detail::from_text(key, value, x);
            found = true;
        }
    });
    if (!found) throw ValidationError("config: unknown key " + key);
}

// ---------------------------------------------------------------------------
// Conversions to library settings

inline OptimizerKind parse_optimizer(const std::string& s)
{
    if (s == "adabelief") return OptimizerKind::adabelief;
    if (s == "adam") return OptimizerKind::adam;
    throw ValidationError("config: unknown optimizer " + s);
}

inline LossKind parse_loss(const std::string& s)
{
    if (s == "ce") return LossKind::cross_entropy;
    if (s == "kl_target_model") return LossKind::kl_target_model;
    if (s == "kl_model_target") return LossKind::kl_model_target;
    throw ValidationError("config: unknown loss " + s);
}

inline EdgeFunction parse_edge(const std::string& s)
{
    if (s == "exp") return EdgeFunction::exponential;
    if (s == "rational") return EdgeFunction::rational;
    throw ValidationError("config: unknown edge function " + s);
}

/// Flow settings without the metric source, which needs file access.
inline FlowSpec flow_spec(const RunConfig& c)
{
    FlowSpec s;
    const auto& f = c.flow;
    if (f.family == "sigma") s.family = FlowFamily::sigma_alpha_entropic;
    else if (f.family == "sflow") s.family = FlowFamily::s_flow;
    else if (f.family == "spherical") s.family = FlowFamily::spherical;
    else throw ValidationError("config: unknown flow family " + f.family);
    if (f.integrator == "euler") s.integrator.scheme = Integrator::geometric_euler;
    else if (f.integrator == "rk4") s.integrator.scheme = Integrator::rk4;
    else if (f.integrator == "adaptive") s.integrator.scheme = Integrator::rk_adaptive;
    else throw ValidationError("config: unknown integrator " + f.integrator);
    if (f.refresh == "per_stage") s.refresh = MetricRefresh::per_stage;
    else if (f.refresh == "per_step") s.refresh = MetricRefresh::per_step;
    else throw ValidationError("config: unknown refresh mode " + f.refresh);
    s.alpha = f.alpha;
    s.m_squared = f.m2;
    s.epsilon = f.epsilon;
    s.T = f.T;
    s.integrator.step = f.step;
    s.integrator.rtol = f.rtol;
    s.integrator.atol = f.atol;
    s.validate();
    return s;
}

inline UnrolledSpec unrolled_spec(const RunConfig& c)
{
    UnrolledSpec u;
    u.alpha = c.unrolled.alpha;
    u.m_squared = c.unrolled.m2;
    u.T = c.unrolled.T;
    u.step = c.unrolled.step;
    u.loss = parse_loss(c.unrolled.loss);
    (void)u.steps();
    return u;
}

inline CorruptionConfig corruption_config(const RunConfig& c, std::uint64_t seed)
{
    CorruptionConfig cc{c.corruption.smoothing, c.corruption.noise_std, seed};
    cc.validate();
    return cc;
}

inline FitConfig fit_config(const RunConfig& c)
{
    FitConfig f;
    f.flow = unrolled_spec(c);
    f.steps = c.fit.steps;
    f.lr = c.fit.lr;
    f.optimizer = parse_optimizer(c.fit.optimizer);
    f.line_search = c.fit.line_search;
    f.target_error = c.fit.target_error;
    if (f.steps < 0) throw ValidationError("config: fit.steps must be nonnegative");
    return f;
}

inline TrainConfig train_config(const RunConfig& c)
{
    TrainConfig t;
    t.network.kernel = c.train.kernel;
    t.network.filters = c.train.filters;
    t.network.hidden.assign(c.train.hidden.begin(), c.train.hidden.end());
    t.flow = unrolled_spec(c);
    t.corruption = corruption_config(c, derive_seed(c.seed, {0xc0}));
    t.optimizer = parse_optimizer(c.train.optimizer);
    t.lr = c.train.lr;
    t.epochs = c.train.epochs;
    t.batch_size = c.train.batch_size;
    t.seed = c.seed;
    if (t.epochs < 0 || t.batch_size < 1) throw ValidationError("config: invalid epochs or batch size");
    return t;
}

inline DatasetConfig dataset_config(const RunConfig& c)
{
    DatasetConfig d;
    d.height = c.data.height;
    d.width = c.data.width;
    d.labels = c.data.labels;
    d.train = c.data.train;
    d.test = c.data.test;
    d.validation_fraction = c.data.validation_fraction;
    d.min_sites = c.data.min_sites;
    d.max_sites = c.data.max_sites;
    d.seed = c.seed;
    return d;
}

} // namespace sigmaflow
