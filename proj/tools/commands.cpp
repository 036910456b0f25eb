#include "commands.hpp"

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <sstream>

#include <CLI11.hpp>

#include "fimode/checkpoint.hpp"
#include "fimode/config.hpp"
#include "fimode/dataset_io.hpp"
#include "fimode/errors.hpp"
#include "fimode/evaluation.hpp"
#include "fimode/parallel.hpp"
#include "fimode/quiver.hpp"
#include "fimode/training.hpp"

namespace fimode::cli {

namespace {

namespace fs = std::filesystem;

/// Bad flags, missing inputs or records: exit code 2.
class UsageError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

struct CommonFlags {
    std::optional<std::string> config_path;
    std::optional<std::uint64_t> seed;
    std::optional<int> workers;
};

struct GeneratorFlags {
    std::optional<int> k, l, h, max_terms;
    std::optional<double> dt, horizon, noise, coeff_scale, init_state_std;
    std::optional<std::string> grid_mode;
};

struct ModelFlags {
    std::optional<int> embed_width, encoder_layers, combiner_layers, heads, ff_width;
};

struct TrainFlags {
    std::optional<long> steps, warmup, checkpoint_every;
    std::optional<int> batch, queries;
    std::optional<double> lr, jitter, clip;
};

struct EvalFlags {
    std::optional<int> context_trajectories;
    std::optional<std::string> score_against;
};

void add_common(CLI::App* app, CommonFlags& f) {
    app->add_option("--config", f.config_path, "JSON run configuration");
    app->add_option("--seed", f.seed, "Seed for generation and training (fallback: FIM_ODE_SEED)");
    app->add_option("--workers", f.workers, "Worker threads (default: all cores)");
}

void add_generator(CLI::App* app, GeneratorFlags& f) {
    app->add_option("--k,--context-series", f.k, "Context trajectories per system");
    app->add_option("--l,--observations-per-series", f.l, "Observations per trajectory");
    app->add_option("--h,--holdout-series", f.h, "Held-out trajectories per system");
    app->add_option("--dt", f.dt, "Regular observation spacing; sets horizon = dt (L - 1)");
    app->add_option("--horizon", f.horizon, "Observation window length");
    app->add_option("--noise-level", f.noise, "Relative observation noise");
    app->add_option("--coeff-scale", f.coeff_scale, "Std of sampled coefficients");
    app->add_option("--init-state-std", f.init_state_std, "Std of initial states");
    app->add_option("--max-terms-per-component", f.max_terms, "Monomials per component, at most");
    app->add_option("--grid-mode", f.grid_mode, "regular or irregular")->check(CLI::IsMember({"regular", "irregular"}));
}

void add_model(CLI::App* app, ModelFlags& f) {
    app->add_option("--embed-width", f.embed_width, "Embedding width E");
    app->add_option("--encoder-layers", f.encoder_layers, "Branch encoder layers");
    app->add_option("--combiner-layers", f.combiner_layers, "Cross-attention layers");
    app->add_option("--heads", f.heads, "Attention heads");
    app->add_option("--ff-width", f.ff_width, "Feed-forward width");
}

void add_train(CLI::App* app, TrainFlags& f) {
    app->add_option("--steps,--total-steps", f.steps, "Optimizer steps");
    app->add_option("--batch-systems", f.batch, "Systems per step");
    app->add_option("--queries-per-system", f.queries, "Query points per system");
    app->add_option("--learning-rate", f.lr, "Peak learning rate");
    app->add_option("--warmup-steps", f.warmup, "Linear warmup steps");
    app->add_option("--jitter-scale", f.jitter, "Query jitter in normalized units");
    app->add_option("--gradient-clip-norm", f.clip, "Global gradient norm bound");
    app->add_option("--checkpoint-every", f.checkpoint_every, "Checkpoint period in steps (0: final only)");
}

void add_eval(CLI::App* app, EvalFlags& f) {
    app->add_option("--context-trajectories", f.context_trajectories, "Context series handed to the estimator");
    app->add_option("--score-against", f.score_against, "clean or observed")
        ->check(CLI::IsMember({"clean", "observed"}));
}

template <class T, class U>
void set_if(const std::optional<T>& flag, U& target) {
    if (flag) {
        target = static_cast<U>(*flag);
    }
}

bool has_key(const Json& j, const char* section, const char* key) {
    return j.is_object() && j.contains(section) && j[section].is_object() && j[section].contains(key);
}

RunConfig resolve(const CommonFlags& c) {
    RunConfig cfg;
    Json raw = Json::object();
    if (c.config_path) {
        std::ifstream in(*c.config_path);
        if (!in) {
            throw UsageError("cannot open config file " + *c.config_path);
        }
        try {
            raw = Json::parse(in);
        } catch (const Json::parse_error& e) {
            throw UsageError(*c.config_path + ": " + e.what());
        }
        cfg = run_config_from_json(raw);
    }

    std::optional<std::uint64_t> seed = c.seed;
    if (!seed) {
        if (const char* env = std::getenv("FIM_ODE_SEED"); env && *env) {
            try {
                std::size_t used = 0;
                seed = std::stoull(env, &used);
                if (used != std::string(env).size()) {
                    throw std::invalid_argument(env);
                }
            } catch (const std::exception&) {
                throw UsageError(std::string("FIM_ODE_SEED is not an unsigned integer: ") + env);
            }
        }
    }
    if (seed) {
        // An explicit flag wins over the file; the environment only fills
        // seeds the file leaves unset.
        if (c.seed || !has_key(raw, "generator", "seed")) {
            cfg.generator.seed = *seed;
        }
        if (c.seed || !has_key(raw, "train", "seed")) {
            cfg.train.seed = *seed;
        }
    }
    const int workers = resolve_workers(c.workers.value_or(0));
    cfg.train.workers = workers;
    cfg.eval.workers = workers;
    return cfg;
}

void apply(const GeneratorFlags& f, GeneratorConfig& g) {
    set_if(f.k, g.context_series);
    set_if(f.l, g.observations_per_series);
    set_if(f.h, g.holdout_series);
    set_if(f.max_terms, g.max_terms_per_component);
    set_if(f.horizon, g.horizon);
    if (f.dt) {
        g.horizon = *f.dt * (g.observations_per_series - 1);
    }
    set_if(f.noise, g.noise_level);
    set_if(f.coeff_scale, g.coeff_scale);
    set_if(f.init_state_std, g.init_state_std);
    if (f.grid_mode) {
        g.grid_mode = *f.grid_mode == "irregular" ? GridMode::Irregular : GridMode::Regular;
    }
}

void apply(const ModelFlags& f, ModelConfig& m) {
    set_if(f.embed_width, m.embed_width);
    set_if(f.encoder_layers, m.n_encoder_layers);
    set_if(f.combiner_layers, m.n_combiner_layers);
    set_if(f.heads, m.n_heads);
    set_if(f.ff_width, m.ff_width);
}

void apply(const TrainFlags& f, TrainConfig& t) {
    set_if(f.steps, t.total_steps);
    set_if(f.batch, t.batch_systems);
    set_if(f.queries, t.queries_per_system);
    set_if(f.lr, t.learning_rate);
    set_if(f.warmup, t.warmup_steps);
    set_if(f.jitter, t.jitter_scale);
    set_if(f.clip, t.gradient_clip_norm);
    set_if(f.checkpoint_every, t.checkpoint_every);
}

void apply(const EvalFlags& f, EvalOptions& e) {
    set_if(f.context_trajectories, e.context_trajectories);
    if (f.score_against) {
        e.score_against = *f.score_against == "observed" ? ScoreTarget::Observed : ScoreTarget::Clean;
    }
}

void require_file(const std::string& path, const std::string& what) {
    if (!fs::is_regular_file(path)) {
        throw UsageError(what + " not found: " + path);
    }
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out || !(out << text) || !out.flush()) {
        throw std::runtime_error("cannot write " + path.string());
    }
}

fs::path prepare_run_dir(const std::string& dir, const RunConfig& cfg) {
    const fs::path root(dir);
    fs::create_directories(root);
    write_text(root / "config.json", to_json(cfg).dump(2) + "\n");
    return root;
}

std::vector<DatasetRecord> load_dataset(const std::string& path) {
    require_file(path, "dataset");
    return read_dataset(path);
}

const DatasetRecord& find_record(const std::vector<DatasetRecord>& records, std::uint64_t id) {
    const auto it = std::find_if(records.begin(), records.end(), [&](const auto& r) { return r.id == id; });
    if (it == records.end()) {
        throw UsageError("no record with id " + std::to_string(id));
    }
    return *it;
}

std::unique_ptr<Estimator> make_estimator(const std::string& name, const std::optional<std::string>& checkpoint) {
    if (name == "oracle") {
        return std::make_unique<OracleEstimator>();
    }
    if (name == "polyfit") {
        return std::make_unique<PolyfitEstimator>();
    }
    if (name == "nearest") {
        return std::make_unique<NearestNeighborEstimator>();
    }
    if (!checkpoint) {
        throw UsageError("--checkpoint is required for the fim estimator");
    }
    require_file(*checkpoint, "checkpoint");
    return std::make_unique<FimEstimator>(std::make_shared<const FimModel>(load_model(*checkpoint)));
}

StateVec parse_point(const std::string& text, int dim) {
    std::vector<double> v;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        try {
            std::size_t used = 0;
            v.push_back(std::stod(item, &used));
            if (used != item.size()) {
                throw std::invalid_argument(item);
            }
        } catch (const std::exception&) {
            throw UsageError("bad query point '" + text + "'");
        }
    }
    if (static_cast<int>(v.size()) != dim) {
        throw UsageError("query point '" + text + "' must have " + std::to_string(dim) + " coordinates");
    }
    StateVec x(dim);
    for (int d = 0; d < dim; ++d) {
        x[d] = v[static_cast<std::size_t>(d)];
    }
    return x;
}

std::string format_double(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

} // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Zero-shot vector field inference for polynomial ODEs", "fim-ode"};
    app.require_subcommand(1);
    // -h is reserved for the holdout count.
    app.set_help_flag("--help", "Print this help message and exit");

    // gen
    CommonFlags gen_common;
    GeneratorFlags gen_flags;
    std::size_t gen_systems = 100;
    std::string gen_out;
    auto* gen = app.add_subcommand("gen", "Generate a synthetic dataset");
    add_common(gen, gen_common);
    add_generator(gen, gen_flags);
    gen->add_option("--systems", gen_systems, "Number of systems")->capture_default_str();
    gen->add_option("--out-dir", gen_out, "Run directory")->required();

    // train
    CommonFlags train_common;
    GeneratorFlags train_gen;
    ModelFlags train_model;
    TrainFlags train_flags;
    std::optional<std::string> train_dataset, train_resume;
    std::optional<std::size_t> train_systems;
    std::string train_out;
    auto* train = app.add_subcommand("train", "Train the model");
    add_common(train, train_common);
    add_generator(train, train_gen);
    add_model(train, train_model);
    add_train(train, train_flags);
    train->add_option("--dataset", train_dataset, "Train on a fixed pool read from this file");
    train->add_option("--systems", train_systems, "Train on a fixed pool of this many generated systems");
    train->add_option("--resume", train_resume, "Continue from a checkpoint");
    train->add_option("--out-dir", train_out, "Run directory")->required();

    // eval
    CommonFlags eval_common;
    EvalFlags eval_flags;
    std::string eval_dataset, eval_estimator = "fim", eval_out;
    std::optional<std::string> eval_checkpoint;
    auto* eval = app.add_subcommand("eval", "Score an estimator on a dataset");
    add_common(eval, eval_common);
    add_eval(eval, eval_flags);
    eval->add_option("--dataset", eval_dataset, "Dataset file")->required();
    eval->add_option("--estimator", eval_estimator, "fim, oracle, polyfit or nearest")
        ->check(CLI::IsMember({"fim", "oracle", "polyfit", "nearest"}))
        ->capture_default_str();
    eval->add_option("--checkpoint", eval_checkpoint, "Model checkpoint (fim estimator)");
    eval->add_option("--out-dir", eval_out, "Run directory")->required();

    // infer
    CommonFlags infer_common;
    std::string infer_checkpoint, infer_dataset;
    std::uint64_t infer_record = 0;
    int infer_context = 0;
    std::vector<std::string> infer_points;
    std::optional<std::string> infer_out;
    auto* infer = app.add_subcommand("infer", "Evaluate the estimated field at query points");
    add_common(infer, infer_common);
    infer->add_option("--checkpoint", infer_checkpoint, "Model checkpoint")->required();
    infer->add_option("--dataset", infer_dataset, "Dataset file")->required();
    infer->add_option("--record", infer_record, "Record id")->required();
    infer->add_option("--context-trajectories", infer_context, "Context series to use (0: all)");
    infer->add_option("--query", infer_points, "Query point x1,x2,... (repeatable; default: initial states)");
    infer->add_option("--out-dir", infer_out, "Also write infer.csv here");

    // plot
    CommonFlags plot_common;
    std::string plot_dataset, plot_estimator = "fim", plot_out;
    std::optional<std::string> plot_checkpoint;
    std::uint64_t plot_record = 0;
    std::vector<int> plot_contexts{9};
    int plot_grid = 20;
    std::optional<double> plot_third;
    auto* plot = app.add_subcommand("plot", "Export quiver plots of estimated and true fields");
    add_common(plot, plot_common);
    plot->add_option("--dataset", plot_dataset, "Dataset file")->required();
    plot->add_option("--record", plot_record, "Record id")->required();
    plot->add_option("--estimator", plot_estimator, "fim, oracle, polyfit or nearest")
        ->check(CLI::IsMember({"fim", "oracle", "polyfit", "nearest"}))
        ->capture_default_str();
    plot->add_option("--checkpoint", plot_checkpoint, "Model checkpoint (fim estimator)");
    plot->add_option("--num-context", plot_contexts, "Context counts, one plot each")->delimiter(',');
    plot->add_option("--grid-n", plot_grid, "Arrows per axis")->capture_default_str();
    plot->add_option("--third-coord", plot_third, "Fixed x3 for D=3 (default: context mean)");
    plot->add_option("--out-dir", plot_out, "Run directory")->required();

    try {
        std::vector<std::string> reversed(args.rbegin(), args.rend());
        app.parse(reversed);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? kExitOk : kExitUsage;
    }

    try {
        if (gen->parsed()) {
            RunConfig cfg = resolve(gen_common);
            apply(gen_flags, cfg.generator);
            cfg.generator.validate();
            GenerationSummary summary;
            const auto records = generate_dataset(cfg.generator, gen_systems, cfg.train.workers, &summary);
            const fs::path dir = prepare_run_dir(gen_out, cfg);
            write_dataset(dir / "dataset.jsonl", records);
            out << "accepted " << summary.accepted << " systems, rejected " << summary.rejected << " draws\n"
                << "wrote " << (dir / "dataset.jsonl").string() << '\n';
            return kExitOk;
        }

        if (train->parsed()) {
            if (train_dataset && train_systems) {
                throw UsageError("--dataset and --systems are mutually exclusive");
            }
            RunConfig cfg = resolve(train_common);
            apply(train_gen, cfg.generator);
            apply(train_model, cfg.model);
            apply(train_flags, cfg.train);
            cfg.generator.validate();
            cfg.model.validate();
            cfg.train.validate();

            std::optional<TrainingState> state;
            if (train_resume) {
                require_file(*train_resume, "checkpoint");
                state = load_checkpoint(*train_resume);
                // The stored optimizer settings govern the resumed run; only
                // the step budget and parallelism may change.
                set_if(train_flags.steps, state->config.total_steps);
                state->config.workers = cfg.train.workers;
                cfg.model = state->model.config();
                cfg.train = state->config;
            } else {
                state.emplace(cfg.model, cfg.train);
            }

            BatchSource source;
            if (train_dataset) {
                auto pool = std::make_shared<const std::vector<DatasetRecord>>(load_dataset(*train_dataset));
                if (pool->empty()) {
                    throw UsageError("dataset " + *train_dataset + " is empty");
                }
                source = fixed_pool_source(pool, cfg.train.batch_systems, cfg.train.seed);
            } else if (train_systems) {
                if (*train_systems == 0) {
                    throw UsageError("--systems must be positive");
                }
                auto pool = std::make_shared<const std::vector<DatasetRecord>>(
                    generate_dataset(cfg.generator, *train_systems, cfg.train.workers));
                source = fixed_pool_source(pool, cfg.train.batch_systems, cfg.train.seed);
            } else {
                source = generator_source(cfg.generator, cfg.train.batch_systems);
            }

            const fs::path dir = prepare_run_dir(train_out, cfg);
            const long total = cfg.train.total_steps;
            const long report_every = std::max<long>(1, total / 20);
            TrainLoopOptions options;
            options.out_dir = dir;
            options.on_step = [&](const StepMetrics& m) {
                if ((m.step + 1) % report_every == 0 || m.step + 1 == total) {
                    out << "step " << m.step + 1 << "/" << total << " loss " << m.loss << " grad_norm " << m.grad_norm
                        << " lr " << m.lr << '\n';
                }
            };
            const TrainingState final_state = train_loop(std::move(*state), source, options);
            out << "initial loss " << final_state.stats.initial << ", final loss (ema) " << final_state.stats.ema
                << "\nwrote " << (dir / "final.bin").string() << '\n';
            return kExitOk;
        }

        if (eval->parsed()) {
            RunConfig cfg = resolve(eval_common);
            apply(eval_flags, cfg.eval);
            const auto estimator = make_estimator(eval_estimator, eval_checkpoint);
            const auto records = load_dataset(eval_dataset);
            const EvalReport report = evaluate(records, *estimator, cfg.eval);
            const fs::path dir = prepare_run_dir(eval_out, cfg);
            write_text(dir / "report.json", report_to_json(report).dump(2) + "\n");
            out << summary_table(report);
            return kExitOk;
        }

        if (infer->parsed()) {
            RunConfig cfg = resolve(infer_common);
            require_file(infer_checkpoint, "checkpoint");
            const FimModel model = load_model(infer_checkpoint);
            const auto records = load_dataset(infer_dataset);
            const DatasetRecord& rec = find_record(records, infer_record);
            EvalOptions opts;
            opts.context_trajectories = infer_context;
            const ObservationSet context = select_context(rec, opts);
            const int dim = context.dim;
            std::vector<StateVec> queries;
            for (const auto& p : infer_points) {
                queries.push_back(parse_point(p, dim));
            }
            if (queries.empty()) {
                for (const auto& s : context.series) {
                    queries.push_back(s.value(0));
                }
            }
            const auto values = model.estimate_field(context, queries);
            std::ostringstream csv;
            for (int d = 0; d < dim; ++d) {
                csv << "x" << d + 1 << ',';
            }
            for (int d = 0; d < dim; ++d) {
                csv << "f" << d + 1 << (d + 1 < dim ? "," : "\n");
            }
            for (std::size_t q = 0; q < queries.size(); ++q) {
                for (int d = 0; d < dim; ++d) {
                    csv << format_double(queries[q][d]) << ',';
                }
                for (int d = 0; d < dim; ++d) {
                    csv << format_double(values[q][d]) << (d + 1 < dim ? "," : "\n");
                }
            }
            out << csv.str();
            if (infer_out) {
                const fs::path dir = prepare_run_dir(*infer_out, cfg);
                write_text(dir / "infer.csv", csv.str());
            }
            return kExitOk;
        }

        if (plot->parsed()) {
            RunConfig cfg = resolve(plot_common);
            const auto records = load_dataset(plot_dataset);
            const DatasetRecord& rec = find_record(records, plot_record);
            if (rec.observations.dim < 2) {
                throw UsageError("quiver requires D≥2");
            }
            if (plot_grid < 2) {
                throw UsageError("--grid-n must be at least 2");
            }
            for (int k : plot_contexts) {
                if (k < 1) {
                    throw UsageError("--num-context entries must be positive");
                }
            }
            const auto estimator = make_estimator(plot_estimator, plot_checkpoint);
            const fs::path dir = prepare_run_dir(plot_out, cfg);
            for (int k : plot_contexts) {
                EvalOptions opts;
                opts.context_trajectories = k;
                const ObservationSet context = select_context(rec, opts);
                QuiverOptions q;
                q.grid_n = plot_grid;
                q.dim = context.dim;
                for (const auto& s : context.series) {
                    q.overlays.push_back(s.values);
                }
                if (q.dim == 3) {
                    if (plot_third) {
                        q.third_coord = *plot_third;
                    } else {
                        double sum = 0.0;
                        std::size_t n = 0;
                        for (const auto& s : context.series) {
                            sum += s.values.col(2).sum();
                            n += static_cast<std::size_t>(s.values.rows());
                        }
                        q.third_coord = sum / static_cast<double>(n);
                    }
                }
                q.title = "record " + std::to_string(rec.id) + ", " + std::to_string(context.series.size()) +
                          " context trajectories";
                q.label_a = estimator->name();
                q.label_b = "true field";
                const fs::path base = dir / ("quiver_k" + std::to_string(context.series.size()));
                export_quiver(estimator->fit(context, rec), rec.field.as_function(), region_around(q.overlays), q,
                              base);
                out << "wrote " << base.string() << ".svg\n";
            }
            return kExitOk;
        }
    } catch (const UsageError& e) {
        err << "error: " << e.what() << '\n';
        return kExitUsage;
    } catch (const ConfigError& e) {
        err << "error: config key " << e.what() << '\n';
        return kExitUsage;
    } catch (const ParseError& e) {
        err << "error: " << e.what() << '\n';
        return kExitUsage;
    } catch (const std::invalid_argument& e) {
        err << "error: " << e.what() << '\n';
        return kExitUsage;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << '\n';
        return kExitFailure;
    }
    return kExitUsage;
}

} // namespace fimode::cli
