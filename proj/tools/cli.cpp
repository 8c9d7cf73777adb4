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

#include "cli.hpp"

#include <CLI11.hpp>

#include <sigmaflow/io.hpp>
#include <sigmaflow/parallel.hpp>

#include <iostream>
#include <optional>
#include <ostream>

namespace sigmaflow::cli {

namespace fs = std::filesystem;

double max_pairwise_distance(const Field& S)
{
    double best = 0.0;
    for (Index a = 0; a < S.rows(); ++a)
        for (Index b = a + 1; b < S.rows(); ++b) best = std::max(best, (S.row(a) - S.row(b)).squaredNorm());
    return std::sqrt(best);
}

TorusDemoResult torus_demo(Index height, Index width, const FlowSpec& spec, double sample_interval)
{
    IntegrationResult run = integrate(torus_embedding_init(height, width), spec, SamplingPlan{sample_interval, true});
    std::vector<double> times, spread, share;
    double converged_at = -1.0;
    const auto& rec = run.record;
    for (std::size_t k = 0; k < rec.times.size(); ++k) {
        const Field& S = rec.snapshots[k];
        const EntropyStats st = entropy_stats(S);
        times.push_back(rec.times[k]);
        spread.push_back(max_pairwise_distance(S));
        share.push_back(double((st.entropy.array() < 0.05).count()) / double(S.rows()));
        const bool converged = spec.m_squared == 0.0 ? spread.back() < 1e-3 : share.back() >= 0.99;
        if (converged && converged_at < 0.0) converged_at = rec.times[k];
    }
    return {std::move(times), std::move(spread), std::move(share), converged_at, std::move(run)};
}

namespace {

struct Overrides
{
    std::optional<std::string> config;
    std::optional<std::uint64_t> seed;
    std::optional<std::string> out;
    std::optional<int> threads;
    std::vector<std::string> set;
    std::optional<double> m2, alpha, epsilon, T, step;
    std::optional<std::string> family, integrator, metric, init, labels_file, init_file, metric_file, checkpoint, dataset;
    std::optional<Index> height, width;
    std::optional<int> labels, epochs, steps;
    bool no_validate = false;
};

RunConfig resolve(const std::string& command, const Overrides& o)
{
    RunConfig c;
    if (o.config) c = parse_ini(io::read_file(*o.config), c);
    c.command = command;
    for (const auto& kv : o.set) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos) throw ValidationError("--set expects key=value, got '" + kv + "'");
        set_config_value(c, kv.substr(0, eq), kv.substr(eq + 1));
    }
    if (o.seed) c.seed = *o.seed;
    if (o.out) c.out = *o.out;
    if (o.threads) c.threads = *o.threads;
    if (o.m2) c.flow.m2 = *o.m2;
    if (o.alpha) c.flow.alpha = *o.alpha;
    if (o.epsilon) c.flow.epsilon = *o.epsilon;
    if (o.T) c.flow.T = *o.T;
    if (o.step) c.flow.step = *o.step;
    if (o.family) c.flow.family = *o.family;
    if (o.integrator) c.flow.integrator = *o.integrator;
    if (o.metric) c.flow.metric = *o.metric;
    if (o.init) c.grid.init = *o.init;
    if (o.labels_file) c.input.labels = *o.labels_file;
    if (o.init_file) c.input.init = *o.init_file;
    if (o.metric_file) c.input.metric = *o.metric_file;
    if (o.checkpoint) c.input.checkpoint = *o.checkpoint;
    if (o.dataset) c.input.dataset = *o.dataset;
    if (o.height) c.grid.height = c.data.height = *o.height;
    if (o.width) c.grid.width = c.data.width = *o.width;
    if (o.labels) c.grid.labels = c.data.labels = *o.labels;
    if (o.epochs) c.train.epochs = *o.epochs;
    if (o.steps) c.fit.steps = *o.steps;
    if (o.no_validate) c.input.validate = false;
    if (c.threads < 1) throw ValidationError("--threads must be positive");
    return c;
}

AssignmentField load_state(const RunConfig& c)
{
    if (c.input.validate) return io::read_assignment(c.input.init);
    io::RawField raw = io::read_assignment_raw(c.input.init);
    // Unchecked input is repaired to the nearest usable interior state.
    Field S = raw.values.cwiseMax(1e-300);
    for (Index a = 0; a < S.rows(); ++a) S.row(a) /= S.row(a).sum();
    return AssignmentField(TorusGrid(raw.height, raw.width), std::move(S));
}

LabelField load_or_make_labels(const RunConfig& c)
{
    if (!c.input.labels.empty()) return io::read_label_map(c.input.labels, c.grid.labels);
    return gen_voronoi(c.grid.height, c.grid.width, c.grid.labels, 8, derive_seed(c.seed, {0x1ab}));
}

AssignmentField make_init(const RunConfig& c)
{
    const TorusGrid grid(c.grid.height, c.grid.width);
    const std::string& kind = c.grid.init;
    if (kind == "file") return load_state(c);
    if (kind == "random") return smooth_random_state(grid, c.grid.labels, c.grid.amplitude, c.grid.offset, derive_seed(c.seed, {1}));
    if (kind == "torus") return torus_embedding_init(c.grid.height, c.grid.width);
    if (kind == "constant") {
        std::mt19937_64 rng(derive_seed(c.seed, {2}));
        std::normal_distribution<double> nrm(0.0, 1.0);
        Eigen::RowVectorXd x(c.grid.labels);
        for (Index k = 0; k < x.size(); ++k) x[k] = c.grid.amplitude * nrm(rng);
        return AssignmentField(grid, softmax_rows(Field(x.replicate(grid.size(), 1))));
    }
    if (kind == "corrupted") return corrupt(load_or_make_labels(c), corruption_config(c, derive_seed(c.seed, {3})));
    throw ValidationError("unknown init kind " + kind);
}

std::optional<MetricSource> make_metric(const RunConfig& c, const TorusGrid& grid)
{
    const std::string& kind = c.flow.metric;
    if (kind == "flat") return std::nullopt;
    if (kind == "file") {
        MetricField h = io::read_metric(c.input.metric);
        if (!(h.grid() == grid)) throw ValidationError("metric file grid does not match the state");
        return fixed_metric(std::move(h));
    }
    if (kind == "structure_tensor")
        return structure_tensor_source(grid, c.flow.rho, c.flow.sigma, parse_edge(c.flow.edge), c.flow.contrast);
    if (kind == "learned") return learned_metric(grid, deserialize_params(io::read_file(c.input.checkpoint)));
    throw ValidationError("unknown metric kind " + kind);
}

MetricField static_metric(const RunConfig& c, const TorusGrid& grid)
{
    if (c.flow.metric == "flat") return MetricField::identity(grid);
    if (c.flow.metric == "file") return io::read_metric(c.input.metric);
    throw ValidationError("spectrum needs a flat or file metric");
}

void write_text(const fs::path& p, const std::string& s) { io::write_file_atomic(p, s); }

std::string padded(std::size_t i)
{
    std::string s = std::to_string(i);
    return std::string(s.size() < 4 ? 4 - s.size() : 0, '0') + s;
}

int cmd_run(const RunConfig& c, std::ostream& out)
{
    const AssignmentField init = make_init(c);
    FlowSpec spec = flow_spec(c);
    spec.metric = make_metric(c, init.grid());
    const IntegrationResult res = integrate(init, spec, SamplingPlan{c.flow.sample_interval, false});
    const fs::path dir = c.out;
    io::trajectory_table(res.record).write(dir / "trajectory.csv");
    io::write_assignment(res.final_state, dir / "final_state.amf");
    const std::vector<int> labels = argmax_labels(res.final_state.S());
    io::write_label_map(LabelField(init.grid(), labels, int(init.labels())), dir / "labels.pgm");
    write_text(dir / "labels.ppm", io::render_labels(init.grid(), labels));
    const auto& r = res.record;
    out << "steps " << r.steps << " rejected " << r.rejected << " final_time " << r.times.back()
        << " mean_entropy " << r.mean_entropy.back() << " lyapunov " << r.lyapunov.back() << "\n";
    return exit_ok;
}

int cmd_fit(const RunConfig& c, std::ostream& out)
{
    const LabelField target = c.input.labels.empty() ? four_region_labels(c.grid.height, c.grid.width, c.grid.labels)
                                                     : io::read_label_map(c.input.labels, c.grid.labels);
    const AssignmentField init = c.input.init.empty() ? corrupt(target, corruption_config(c, derive_seed(c.seed, {3})))
                                                      : load_state(c);
    const FitConfig fc = fit_config(c);
    const FitResult fit = fit_metric(target, init, fc);
    const fs::path dir = c.out;
    const TorusGrid& g = target.grid();
    io::write_metric(fit.metric.as_inverse(), dir / "metric.mtf");
    io::CsvTable curve({"step", "loss", "pixel_error"});
    for (std::size_t k = 0; k < fit.report.loss.size(); ++k)
        curve.add_row({double(k), fit.report.loss[k], fit.report.pixel_error[k]});
    curve.write(dir / "fit.csv");
    write_text(dir / "anisotropy.ppm", io::render_scalar(g, fit.report.diagnostics.anisotropy, true));
    write_text(dir / "scale.ppm", io::render_scalar(g, fit.report.diagnostics.scale, true));
    const std::vector<int> pred = unrolled_labels(FreeParamsModel{fit.params}, g, Sample{init.S(), target.labels(), 0}, fc.flow);
    std::vector<bool> wrong(pred.size());
    for (std::size_t a = 0; a < pred.size(); ++a) wrong[a] = pred[a] != target.labels()[a];
    write_text(dir / "prediction.ppm", io::render_labels(g, pred, &wrong));
    write_text(dir / "target.ppm", io::render_labels(g, target.labels()));
    out << "steps " << fit.report.steps_taken << " loss " << fit.report.loss.back() << " pixel_error "
        << fit.report.pixel_error.back() << "\n";
    return exit_ok;
}

std::vector<Scene> load_scenes(const RunConfig& c)
{
    if (!c.input.dataset.empty()) return io::read_dataset(c.input.dataset, c.data.labels);
    return gen_dataset(dataset_config(c));
}

int cmd_gen_data(const RunConfig& c, std::ostream& out)
{
    const auto scenes = gen_dataset(dataset_config(c));
    io::write_dataset(scenes, c.out);
    out << "scenes " << scenes.size() << " train " << select_split(scenes, Split::train).size() << " validation "
        << select_split(scenes, Split::validation).size() << " test " << select_split(scenes, Split::test).size() << "\n";
    return exit_ok;
}

int cmd_train(const RunConfig& c, std::ostream& out)
{
    const auto scenes = load_scenes(c);
    const TrainConfig tc = train_config(c);
    const auto [params, rep] = train_operator(select_split(scenes, Split::train), select_split(scenes, Split::validation), tc,
                                              [&](int e, const TrainReport& r) {
                                                  out << "epoch " << e << " train_loss " << r.train_loss.back();
                                                  if (!r.validation_loss.empty()) out << " validation_loss " << r.validation_loss.back();
                                                  out << "\n" << std::flush;
                                              });
    const fs::path dir = c.out;
    write_text(dir / "operator.ckpt", serialize_params(params));
    io::CsvTable t({"epoch", "train_loss", "validation_loss"});
    for (std::size_t e = 0; e < rep.train_loss.size(); ++e)
        t.add_row({double(e), rep.train_loss[e], rep.validation_loss.empty() ? std::nan("") : rep.validation_loss[e]});
    t.write(dir / "training.csv");
    out << "best_epoch " << rep.best_epoch << "\n";
    return exit_ok;
}

int cmd_eval(const RunConfig& c, std::ostream& out)
{
    const auto test = select_split(load_scenes(c), Split::test);
    if (test.empty()) throw ValidationError("eval: no test scenes");
    std::optional<OperatorParams> params;
    if (!c.input.checkpoint.empty()) params = deserialize_params(io::read_file(c.input.checkpoint));
    const EvalReport rep =
        evaluate(params ? &*params : nullptr, test, unrolled_spec(c), corruption_config(c, derive_seed(c.seed, {4})));
    const fs::path dir = c.out;
    io::CsvTable t({"sample", "seed", "accuracy"});
    for (std::size_t i = 0; i < test.size(); ++i) {
        t.add_row({double(i), double(test[i].seed), rep.accuracy[i]});
        write_text(dir / ("errors_" + padded(i) + ".ppm"),
                   io::render_labels(test[i].labels.grid(), rep.predictions[i], &rep.error_masks[i]));
    }
    t.write(dir / "eval.csv");
    out << "metric " << (params ? "learned" : "flat") << " mean_accuracy " << rep.mean << " std " << rep.stddev << "\n";
    return exit_ok;
}

int cmd_spectrum(const RunConfig& c, std::ostream& out)
{
    const TorusGrid grid(c.grid.height, c.grid.width);
    const MetricField h = static_metric(c, grid);
    const LowFrequencySet lf = low_frequency_set(h, c.flow.epsilon, c.flow.m2, c.grid.labels);
    std::vector<bool> in(std::size_t(lf.spectrum.eigenvalues.size()), false);
    for (Index k : lf.aleph) in[std::size_t(k)] = true;
    io::CsvTable t({"index", "eigenvalue", "in_aleph"});
    for (Index k = 0; k < lf.spectrum.eigenvalues.size(); ++k)
        t.add_row({double(k), lf.spectrum.eigenvalues[k], in[std::size_t(k)] ? 1.0 : 0.0});
    t.write(fs::path(c.out) / "spectrum.csv");
    out << "eigenvalues " << lf.spectrum.eigenvalues.size() << " aleph " << lf.aleph.size() << "\n";
    return exit_ok;
}

int cmd_torus(const RunConfig& c, std::ostream& out)
{
    FlowSpec spec = flow_spec(c);
    const TorusDemoResult r = torus_demo(c.grid.height, c.grid.width, spec, c.flow.sample_interval);
    const fs::path dir = c.out;
    io::CsvTable conv({"time", "max_pairwise_distance", "low_entropy_share"});
    io::CsvTable traj({"time", "node", "p0", "p1", "p2", "p3"});
    for (std::size_t k = 0; k < r.times.size(); ++k) {
        conv.add_row({r.times[k], r.max_pairwise[k], r.low_entropy_share[k]});
        const Field& S = r.run.record.snapshots[k];
        for (Index a = 0; a < S.rows(); ++a) traj.add_row({r.times[k], double(a), S(a, 0), S(a, 1), S(a, 2), S(a, 3)});
    }
    conv.write(dir / "convergence.csv");
    traj.write(dir / "trajectory.csv");
    out << "final_max_pairwise_distance " << r.max_pairwise.back() << " final_low_entropy_share "
        << r.low_entropy_share.back() << " convergence_time " << r.convergence_time << "\n";
    return exit_ok;
}

} // namespace

int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err)
{
    CLI::App app{"Sigma flow label assignment on the torus", "flow"};
    app.require_subcommand(1);
    Overrides o;
    app.add_option("--config", o.config, "INI configuration file");
    app.add_option("--seed", o.seed, "Base random seed");
    app.add_option("--out", o.out, "Output directory");
    app.add_option("--threads", o.threads, "Worker threads");
    app.add_option("--set", o.set, "Override a config key: section.name=value");
    app.add_option("--m2", o.m2, "Mass parameter m^2");
    app.add_option("--alpha", o.alpha, "Entropic exponent alpha");
    app.add_option("--epsilon", o.epsilon, "Regularization epsilon");
    app.add_option("--T", o.T, "End time");
    app.add_option("--step", o.step, "Step size");
    app.add_option("--family", o.family, "sigma | sflow | spherical");
    app.add_option("--integrator", o.integrator, "euler | rk4 | adaptive");
    app.add_option("--metric", o.metric, "flat | file | structure_tensor | learned");
    app.add_option("--init", o.init, "random | constant | torus | corrupted | file");
    app.add_option("--labels-file", o.labels_file, "PGM label map");
    app.add_option("--init-file", o.init_file, "AMF1 initial state");
    app.add_option("--metric-file", o.metric_file, "MTF1 metric field");
    app.add_option("--checkpoint", o.checkpoint, "Learned operator checkpoint");
    app.add_option("--dataset", o.dataset, "Dataset directory");
    app.add_option("--height", o.height, "Grid height");
    app.add_option("--width", o.width, "Grid width");
    app.add_option("--labels", o.labels, "Number of labels c");
    app.add_option("--epochs", o.epochs, "Training epochs");
    app.add_option("--steps", o.steps, "Metric fit optimizer steps");
    app.add_flag("--no-validate", o.no_validate, "Skip invariant checks on state files");

    using Handler = int (*)(const RunConfig&, std::ostream&);
    const std::vector<std::tuple<std::string, std::string, Handler>> commands{
        {"run", "Integrate a flow and write diagnostics", cmd_run},
        {"fit-metric", "Fit a per-node metric field to a target labeling", cmd_fit},
        {"train", "Train the learned metric operator", cmd_train},
        {"eval", "Evaluate flat or learned metrics on test scenes", cmd_eval},
        {"gen-data", "Generate a Voronoi scene dataset", cmd_gen_data},
        {"spectrum", "Dump the Laplacian spectrum and the low-frequency set", cmd_spectrum},
        {"torus-demo", "Flow from the embedded-torus initial state", cmd_torus},
    };
    for (const auto& [name, help, fn] : commands) app.add_subcommand(name, help)->fallthrough();

    std::vector<std::string> rev(args.rbegin(), args.rend());
    try {
        app.parse(rev);
    } catch (const CLI::CallForHelp& e) {
        out << app.help();
        return exit_ok;
    } catch (const CLI::CallForAllHelp& e) {
        out << app.help("", CLI::AppFormatMode::All);
        return exit_ok;
    } catch (const CLI::ParseError& e) {
        err << "error: " << e.what() << "\n" << app.help();
        return exit_usage;
    }

    const CLI::App* sub = app.get_subcommands().front();
    Handler fn = nullptr;
    for (const auto& [name, help, f] : commands)
        if (sub->get_name() == name) fn = f;
    try {
        const RunConfig cfg = resolve(sub->get_name(), o);
        set_num_threads(cfg.threads);
        io::write_file_atomic(fs::path(cfg.out) / "config.ini", to_ini(cfg));
        return fn(cfg, out);
    } catch (const NumericalError& e) {
        err << "numerical failure: " << e.what() << " (last valid time " << e.last_valid_time() << ")\n";
        return exit_numerical;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return exit_validation;
    }
}

} // namespace sigmaflow::cli
