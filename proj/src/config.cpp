#include "fimode/config.hpp"

#include <cmath>
#include <fstream>
#include <limits>
#include <optional>
#include <set>
#include <string>
#include <type_traits>

#include "fimode/errors.hpp"

namespace fimode {

namespace {

class Reader {
  public:
    Reader(const Json& j, std::string path) : j_(j), path_(std::move(path)) {
        if (!j_.is_object()) {
            throw ConfigError(path_, "expected an object");
        }
    }

    const Json* find(const char* key) {
        seen_.insert(key);
        const auto it = j_.find(key);
        return it == j_.end() ? nullptr : &*it;
    }

    std::string key_path(const char* key) const { return path_ + "." + key; }

    void number(const char* key, double& out) {
        if (const Json* v = find(key)) {
            if (!v->is_number()) {
                throw ConfigError(key_path(key), "expected a number");
            }
            out = v->get<double>();
        }
    }

    /// null stands for +infinity.
    void number_or_inf(const char* key, double& out) {
        if (const Json* v = find(key)) {
            if (v->is_null()) {
                out = std::numeric_limits<double>::infinity();
            } else if (v->is_number()) {
                out = v->get<double>();
            } else {
                throw ConfigError(key_path(key), "expected a number or null");
            }
        }
    }

    template <class Int>
    void integer(const char* key, Int& out) {
        if (const Json* v = find(key)) {
            if (!v->is_number_integer()) {
                throw ConfigError(key_path(key), "expected an integer");
            }
            if constexpr (std::is_unsigned_v<Int>) {
                if (!v->is_number_unsigned()) {
                    throw ConfigError(key_path(key), "expected a non-negative integer");
                }
            }
            out = v->get<Int>();
        }
    }

    void boolean(const char* key, bool& out) {
        if (const Json* v = find(key)) {
            if (!v->is_boolean()) {
                throw ConfigError(key_path(key), "expected true or false");
            }
            out = v->get<bool>();
        }
    }

    std::optional<std::string> string(const char* key) {
        if (const Json* v = find(key)) {
            if (!v->is_string()) {
                throw ConfigError(key_path(key), "expected a string");
            }
            return v->get<std::string>();
        }
        return std::nullopt;
    }

    void finish() const {
        for (const auto& [key, value] : j_.items()) {
            if (!seen_.contains(key)) {
                throw ConfigError(path_ + "." + key, "unknown key");
            }
        }
    }

  private:
    const Json& j_;
    std::string path_;
    std::set<std::string> seen_;
};

Json number_or_null(double v) {
    return std::isfinite(v) ? Json(v) : Json(nullptr);
}

} // namespace

Json to_json(const SolverConfig& cfg) {
    return {{"rel_tol", cfg.rel_tol},
            {"abs_tol", cfg.abs_tol},
            {"max_step", number_or_null(cfg.max_step)},
            {"divergence_threshold", cfg.divergence_threshold},
            {"max_steps", cfg.max_steps},
            {"method", cfg.method == StepMethod::FixedRK4 ? "rk4" : "dopri5"},
            {"fixed_step", cfg.fixed_step}};
}

SolverConfig solver_from_json(const Json& j, const std::string& path) {
    SolverConfig cfg;
    Reader r(j, path);
    r.number("rel_tol", cfg.rel_tol);
    r.number("abs_tol", cfg.abs_tol);
    r.number_or_inf("max_step", cfg.max_step);
    r.number("divergence_threshold", cfg.divergence_threshold);
    r.integer("max_steps", cfg.max_steps);
    if (const auto m = r.string("method")) {
        if (*m == "dopri5") {
            cfg.method = StepMethod::DormandPrince45;
        } else if (*m == "rk4") {
            cfg.method = StepMethod::FixedRK4;
        } else {
            throw ConfigError(r.key_path("method"), "expected \"dopri5\" or \"rk4\"");
        }
    }
    r.number("fixed_step", cfg.fixed_step);
    r.finish();
    return cfg;
}

Json to_json(const GeneratorConfig& cfg) {
    return {{"dim_weights", cfg.dim_weights},
            {"max_terms_per_component", cfg.max_terms_per_component},
            {"coeff_scale", cfg.coeff_scale},
            {"grid_mode", cfg.grid_mode == GridMode::Irregular ? "irregular" : "regular"},
            {"observations_per_series", cfg.observations_per_series},
            {"context_series", cfg.context_series},
            {"holdout_series", cfg.holdout_series},
            {"horizon", cfg.horizon},
            {"noise_level", cfg.noise_level},
            {"init_state_std", cfg.init_state_std},
            {"seed", cfg.seed},
            {"max_rejections", cfg.max_rejections},
            {"solver", to_json(cfg.solver)}};
}

GeneratorConfig generator_from_json(const Json& j, const std::string& path) {
    GeneratorConfig cfg;
    Reader r(j, path);
    if (const Json* w = r.find("dim_weights")) {
        if (!w->is_array() || w->size() != 3) {
            throw ConfigError(r.key_path("dim_weights"), "expected an array of 3 numbers");
        }
        for (std::size_t i = 0; i < 3; ++i) {
            if (!(*w)[i].is_number()) {
                throw ConfigError(r.key_path("dim_weights"), "expected an array of 3 numbers");
            }
            cfg.dim_weights[i] = (*w)[i].get<double>();
        }
    }
    r.integer("max_terms_per_component", cfg.max_terms_per_component);
    r.number("coeff_scale", cfg.coeff_scale);
    if (const auto g = r.string("grid_mode")) {
        if (*g == "regular") {
            cfg.grid_mode = GridMode::Regular;
        } else if (*g == "irregular") {
            cfg.grid_mode = GridMode::Irregular;
        } else {
            throw ConfigError(r.key_path("grid_mode"), "expected \"regular\" or \"irregular\"");
        }
    }
    r.integer("observations_per_series", cfg.observations_per_series);
    r.integer("context_series", cfg.context_series);
    r.integer("holdout_series", cfg.holdout_series);
    r.number("horizon", cfg.horizon);
    r.number("noise_level", cfg.noise_level);
    r.number("init_state_std", cfg.init_state_std);
    r.integer("seed", cfg.seed);
    r.integer("max_rejections", cfg.max_rejections);
    if (const Json* s = r.find("solver")) {
        cfg.solver = solver_from_json(*s, r.key_path("solver"));
    }
    r.finish();
    return cfg;
}

Json to_json(const ModelConfig& cfg) {
    return {{"embed_width", cfg.embed_width},   {"n_encoder_layers", cfg.n_encoder_layers},
            {"n_combiner_layers", cfg.n_combiner_layers}, {"n_heads", cfg.n_heads},
            {"ff_width", cfg.ff_width},         {"dropout_rate", cfg.dropout_rate},
            {"init_seed", cfg.init_seed}};
}

ModelConfig model_from_json(const Json& j, const std::string& path) {
    ModelConfig cfg;
    Reader r(j, path);
    r.integer("embed_width", cfg.embed_width);
    r.integer("n_encoder_layers", cfg.n_encoder_layers);
    r.integer("n_combiner_layers", cfg.n_combiner_layers);
    r.integer("n_heads", cfg.n_heads);
    r.integer("ff_width", cfg.ff_width);
    r.number("dropout_rate", cfg.dropout_rate);
    r.integer("init_seed", cfg.init_seed);
    r.finish();
    return cfg;
}

Json to_json(const TrainConfig& cfg) {
    return {{"batch_systems", cfg.batch_systems},
            {"queries_per_system", cfg.queries_per_system},
            {"jitter_scale", cfg.jitter_scale},
            {"learning_rate", cfg.learning_rate},
            {"warmup_steps", cfg.warmup_steps},
            {"total_steps", cfg.total_steps},
            {"gradient_clip_norm", cfg.gradient_clip_norm},
            {"checkpoint_every", cfg.checkpoint_every},
            {"seed", cfg.seed},
            {"random_context_count", cfg.random_context_count},
            {"workers", cfg.workers},
            {"adam_beta1", cfg.adam_beta1},
            {"adam_beta2", cfg.adam_beta2},
            {"adam_eps", cfg.adam_eps}};
}

TrainConfig train_from_json(const Json& j, const std::string& path) {
    TrainConfig cfg;
    Reader r(j, path);
    r.integer("batch_systems", cfg.batch_systems);
    r.integer("queries_per_system", cfg.queries_per_system);
    r.number("jitter_scale", cfg.jitter_scale);
    r.number("learning_rate", cfg.learning_rate);
    r.integer("warmup_steps", cfg.warmup_steps);
    r.integer("total_steps", cfg.total_steps);
    r.number("gradient_clip_norm", cfg.gradient_clip_norm);
    r.integer("checkpoint_every", cfg.checkpoint_every);
    r.integer("seed", cfg.seed);
    r.boolean("random_context_count", cfg.random_context_count);
    r.integer("workers", cfg.workers);
    r.number("adam_beta1", cfg.adam_beta1);
    r.number("adam_beta2", cfg.adam_beta2);
    r.number("adam_eps", cfg.adam_eps);
    r.finish();
    return cfg;
}

Json to_json(const EvalOptions& cfg) {
    return {{"context_trajectories", cfg.context_trajectories},
            {"score_against", cfg.score_against == ScoreTarget::Observed ? "observed" : "clean"},
            {"workers", cfg.workers}};
}

EvalOptions eval_from_json(const Json& j, const std::string& path) {
    EvalOptions cfg;
    Reader r(j, path);
    r.integer("context_trajectories", cfg.context_trajectories);
    if (const auto s = r.string("score_against")) {
        if (*s == "clean") {
            cfg.score_against = ScoreTarget::Clean;
        } else if (*s == "observed") {
            cfg.score_against = ScoreTarget::Observed;
        } else {
            throw ConfigError(r.key_path("score_against"), "expected \"clean\" or \"observed\"");
        }
    }
    r.integer("workers", cfg.workers);
    r.finish();
    return cfg;
}

Json to_json(const RunConfig& cfg) {
    return {{"generator", to_json(cfg.generator)},
            {"model", to_json(cfg.model)},
            {"train", to_json(cfg.train)},
            {"eval", to_json(cfg.eval)}};
}

RunConfig run_config_from_json(const Json& j) {
    RunConfig cfg;
    Reader r(j, "config");
    if (const Json* v = r.find("generator")) {
        cfg.generator = generator_from_json(*v);
    }
    if (const Json* v = r.find("model")) {
        cfg.model = model_from_json(*v);
    }
    if (const Json* v = r.find("train")) {
        cfg.train = train_from_json(*v);
    }
    if (const Json* v = r.find("eval")) {
        cfg.eval = eval_from_json(*v);
    }
    r.finish();
    return cfg;
}

RunConfig load_run_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw std::runtime_error("cannot open config " + path.string());
    }
    Json j;
    try {
        j = Json::parse(in);
    } catch (const Json::parse_error& e) {
        throw ParseError(0, path.string() + ": " + e.what());
    }
    return run_config_from_json(j);
}

} // namespace fimode
