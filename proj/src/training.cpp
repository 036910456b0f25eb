#include "fimode/training.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>
#include <stdexcept>
#include <string>

#include "fimode/checkpoint.hpp"
#include "fimode/errors.hpp"
#include "fimode/parallel.hpp"

namespace fimode {

void TrainConfig::validate() const {
    if (batch_systems < 1 || queries_per_system < 1) {
        throw std::invalid_argument("batch_systems and queries_per_system must be positive");
    }
    if (!(jitter_scale >= 0.0) || !std::isfinite(jitter_scale)) {
        throw std::invalid_argument("jitter_scale must be finite and >= 0");
    }
    if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) {
        throw std::invalid_argument("learning_rate must be finite and >= 0");
    }
    if (warmup_steps < 0 || total_steps < 0 || checkpoint_every < 0) {
        throw std::invalid_argument("step counts must be >= 0");
    }
    if (!(gradient_clip_norm > 0.0)) {
        throw std::invalid_argument("gradient_clip_norm must be positive");
    }
    if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0) || !(adam_beta2 >= 0.0 && adam_beta2 < 1.0) ||
        !(adam_eps > 0.0)) {
        throw std::invalid_argument("invalid Adam hyperparameters");
    }
}

TrainingState::TrainingState(const ModelConfig& model_cfg, const TrainConfig& train_cfg)
    : model(model_cfg), config(train_cfg) {
    const auto& p = model.parameters();
    for (std::size_t i = 0; i < p.size(); ++i) {
        const auto& v = p.value(static_cast<nn::ParamId>(i));
        optimizer.first_moment.push_back(Eigen::MatrixXd::Zero(v.rows(), v.cols()));
        optimizer.second_moment.push_back(Eigen::MatrixXd::Zero(v.rows(), v.cols()));
    }
}

Eigen::MatrixXd sample_queries(const ObservationSet& normalized, int count, double jitter, Rng& rng) {
    if (count < 1) {
        throw std::invalid_argument("sample_queries: count must be >= 1");
    }
    std::vector<std::pair<std::size_t, Eigen::Index>> index;
    for (std::size_t k = 0; k < normalized.series.size(); ++k) {
        for (Eigen::Index l = 0; l < normalized.series[k].values.rows(); ++l) {
            index.emplace_back(k, l);
        }
    }
    if (index.empty()) {
        throw std::invalid_argument("sample_queries: no observations");
    }
    std::uniform_int_distribution<std::size_t> pick(0, index.size() - 1);
    std::normal_distribution<double> unit(0.0, 1.0);
    Eigen::MatrixXd q(count, normalized.dim);
    for (int m = 0; m < count; ++m) {
        const auto [k, l] = index[pick(rng)];
        for (int d = 0; d < normalized.dim; ++d) {
            q(m, d) = normalized.series[k].values(l, d) + jitter * unit(rng);
        }
    }
    return q;
}

double loss(const Eigen::MatrixXd& pred, const Eigen::MatrixXd& truth, int dim) {
    if (pred.rows() != truth.rows() || pred.cols() < dim || truth.cols() < dim || pred.rows() == 0) {
        throw std::invalid_argument("loss: shape mismatch");
    }
    const auto diff = pred.leftCols(dim) - truth.leftCols(dim);
    if (!diff.allFinite()) {
        throw NumericFailure("loss: non-finite input");
    }
    return diff.squaredNorm() / static_cast<double>(pred.rows());
}

double loss(const Eigen::MatrixXd& pred, const Eigen::MatrixXd& truth) {
    if (pred.cols() != truth.cols()) {
        throw std::invalid_argument("loss: shape mismatch");
    }
    return loss(pred, truth, static_cast<int>(pred.cols()));
}

Eigen::MatrixXd loss_gradient(const Eigen::MatrixXd& pred, const Eigen::MatrixXd& truth, int dim) {
    Eigen::MatrixXd g = Eigen::MatrixXd::Zero(pred.rows(), pred.cols());
    g.leftCols(dim) = (2.0 / static_cast<double>(pred.rows())) * (pred.leftCols(dim) - truth.leftCols(dim));
    return g;
}

double learning_rate_at(const TrainConfig& cfg, long step) {
    if (cfg.warmup_steps > 0 && step < cfg.warmup_steps) {
        return cfg.learning_rate * static_cast<double>(step + 1) / static_cast<double>(cfg.warmup_steps);
    }
    const long decay_steps = cfg.total_steps - cfg.warmup_steps;
    if (decay_steps <= 0) {
        return cfg.learning_rate;
    }
    const double progress =
        std::clamp(static_cast<double>(step - cfg.warmup_steps) / static_cast<double>(decay_steps), 0.0, 1.0);
    return 0.5 * cfg.learning_rate * (1.0 + std::cos(std::numbers::pi * progress));
}

TrainingExample make_example(const DatasetRecord& record, const TrainConfig& cfg, Rng& rng) {
    const ObservationSet& all = record.observations;
    ObservationSet context{all.dim, {}};
    if (cfg.random_context_count && all.series.size() > 1) {
        std::vector<std::size_t> order(all.series.size());
        std::iota(order.begin(), order.end(), std::size_t{0});
        std::shuffle(order.begin(), order.end(), rng);
        std::uniform_int_distribution<std::size_t> count(1, order.size());
        order.resize(count(rng));
        std::sort(order.begin(), order.end());
        for (std::size_t k : order) {
            context.series.push_back(all.series[k]);
        }
    } else {
        context = all;
    }

    const auto [tf, normalized] = fit_normalization(context);
    TrainingExample ex;
    ex.dim = all.dim;
    ex.tokens = tokenize(normalized);
    const Eigen::MatrixXd q = sample_queries(normalized, cfg.queries_per_system, cfg.jitter_scale, rng);
    ex.queries = Eigen::MatrixXd::Zero(q.rows(), 3);
    ex.truth = Eigen::MatrixXd::Zero(q.rows(), 3);
    ex.queries.leftCols(ex.dim) = q;
    for (Eigen::Index m = 0; m < q.rows(); ++m) {
        const StateVec u = q.row(m).transpose();
        const StateVec f = record.field(tf.denormalize_state(u));
        ex.truth.row(m).head(ex.dim) = tf.normalize_field_output(f).transpose();
    }
    return ex;
}

double dataset_loss(const FimModel& model, const std::vector<DatasetRecord>& records, const TrainConfig& cfg,
                    std::uint64_t seed) {
    if (records.empty()) {
        throw std::invalid_argument("dataset_loss needs at least one record");
    }
    TrainConfig full = cfg;
    full.random_context_count = false;
    std::vector<double> losses(records.size());
    parallel_for(records.size(), cfg.workers, [&](std::size_t i) {
        Rng rng = make_stream(seed, i);
        const TrainingExample ex = make_example(records[i], full, rng);
        ForwardRecord rec;
        const Eigen::MatrixXd& pred = model.forward(ex.tokens, ex.queries, rec);
        losses[i] = loss(pred, ex.truth, ex.dim);
    });
    return std::accumulate(losses.begin(), losses.end(), 0.0) / static_cast<double>(losses.size());
}

namespace {

struct BatchResult {
    double loss = 0.0;
    nn::Gradients grads;
};

BatchResult batch_gradients(const std::vector<DatasetRecord>& batch, const TrainingState& state, long step) {
    const auto& cfg = state.config;
    const std::size_t n = batch.size();
    // One seed per system, drawn in order, so results do not depend on the
    // number of workers.
    Rng step_rng = make_stream(cfg.seed, static_cast<std::uint64_t>(step));
    std::vector<std::uint64_t> seeds(n);
    for (auto& s : seeds) {
        s = step_rng();
    }

    std::vector<double> losses(n, 0.0);
    std::vector<nn::Gradients> grads(n);
    parallel_for(n, cfg.workers, [&](std::size_t i) {
        Rng rng(seeds[i]);
        const TrainingExample ex = make_example(batch[i], cfg, rng);
        ForwardRecord rec;
        const Eigen::MatrixXd& pred = state.model.forward(ex.tokens, ex.queries, rec, &rng);
        losses[i] = loss(pred, ex.truth, ex.dim);
        grads[i] = state.model.parameters().zero_gradients();
        state.model.backward(rec, loss_gradient(pred, ex.truth, ex.dim), grads[i]);
    });

    BatchResult out;
    out.grads = state.model.parameters().zero_gradients();
    for (std::size_t i = 0; i < n; ++i) {
        out.loss += losses[i];
        out.grads.add(grads[i]);
    }
    const double inv = 1.0 / static_cast<double>(n);
    out.loss *= inv;
    out.grads.scale(inv);
    return out;
}

} // namespace

StepMetrics train_step(const std::vector<DatasetRecord>& batch, TrainingState& state) {
    if (batch.empty()) {
        throw std::invalid_argument("train_step: empty batch");
    }
    const auto& cfg = state.config;
    auto& params = state.model.parameters();

    StepMetrics metrics;
    metrics.step = state.step;
    for (int attempt = 0; attempt < 2; ++attempt) {
        if (attempt == 1) {
            state.lr_scale *= 0.5;
            metrics.retried = true;
        }
        BatchResult r;
        try {
            r = batch_gradients(batch, state, state.step);
        } catch (const NumericFailure&) {
            continue;
        } catch (const NumericOverflow&) {
            continue;
        }
        const double norm = std::sqrt(r.grads.squared_norm());
        if (!std::isfinite(r.loss) || !std::isfinite(norm)) {
            continue;
        }
        const double clip = norm > cfg.gradient_clip_norm ? cfg.gradient_clip_norm / norm : 1.0;
        if (clip < 1.0) {
            r.grads.scale(clip);
        }
        const double lr = learning_rate_at(cfg, state.step) * state.lr_scale;

        // Adam with bias correction; t counts from 1.
        const double t = static_cast<double>(state.step + 1);
        const double c1 = 1.0 - std::pow(cfg.adam_beta1, t);
        const double c2 = 1.0 - std::pow(cfg.adam_beta2, t);
        std::vector<Eigen::MatrixXd> values(params.size()), m1(params.size()), m2(params.size());
        bool finite = true;
        for (std::size_t i = 0; i < params.size(); ++i) {
            const auto id = static_cast<nn::ParamId>(i);
            const Eigen::MatrixXd& g = r.grads.tensors[i];
            m1[i] = cfg.adam_beta1 * state.optimizer.first_moment[i] + (1.0 - cfg.adam_beta1) * g;
            m2[i] = cfg.adam_beta2 * state.optimizer.second_moment[i] +
                    (1.0 - cfg.adam_beta2) * g.cwiseProduct(g);
            values[i] = params.value(id).array() -
                        lr * (m1[i].array() / c1) / ((m2[i].array() / c2).sqrt() + cfg.adam_eps);
            finite = finite && values[i].allFinite();
        }
        if (!finite) {
            continue;
        }
        for (std::size_t i = 0; i < params.size(); ++i) {
            params.value(static_cast<nn::ParamId>(i)) = std::move(values[i]);
            state.optimizer.first_moment[i] = std::move(m1[i]);
            state.optimizer.second_moment[i] = std::move(m2[i]);
        }

        metrics.loss = r.loss;
        metrics.grad_norm = norm;
        metrics.clipped_norm = norm * clip;
        metrics.lr = lr;
        auto& s = state.stats;
        if (s.count == 0) {
            s.initial = r.loss;
            s.ema = r.loss;
        } else {
            s.ema = 0.98 * s.ema + 0.02 * r.loss;
        }
        s.last = r.loss;
        ++s.count;
        ++state.step;
        return metrics;
    }
    throw TrainingFailure("non-finite loss at step " + std::to_string(state.step) + " after learning-rate halving");
}

BatchSource fixed_pool_source(std::shared_ptr<const std::vector<DatasetRecord>> pool, int batch_systems,
                              std::uint64_t seed) {
    if (!pool || pool->empty()) {
        throw std::invalid_argument("fixed_pool_source: empty pool");
    }
    if (batch_systems < 1) {
        throw std::invalid_argument("fixed_pool_source: batch_systems must be positive");
    }
    return [pool = std::move(pool), batch_systems, seed](long step) {
        // Offset keeps batch selection independent of the per-step stream
        // used for queries.
        Rng rng = make_stream(seed ^ 0x706f6f6cULL, static_cast<std::uint64_t>(step));
        std::uniform_int_distribution<std::size_t> pick(0, pool->size() - 1);
        std::vector<DatasetRecord> batch;
        batch.reserve(static_cast<std::size_t>(batch_systems));
        for (int i = 0; i < batch_systems; ++i) {
            batch.push_back((*pool)[pick(rng)]);
        }
        return batch;
    };
}

BatchSource generator_source(const GeneratorConfig& gen, int batch_systems) {
    gen.validate();
    if (batch_systems < 1) {
        throw std::invalid_argument("generator_source: batch_systems must be positive");
    }
    return [gen, batch_systems](long step) {
        std::vector<DatasetRecord> batch;
        batch.reserve(static_cast<std::size_t>(batch_systems));
        for (int i = 0; i < batch_systems; ++i) {
            const auto id = static_cast<std::uint64_t>(step) * static_cast<std::uint64_t>(batch_systems) +
                            static_cast<std::uint64_t>(i);
            Rng rng = make_stream(gen.seed, id);
            batch.push_back(generate_record(rng, gen, id));
        }
        return batch;
    };
}

namespace {

void write_checkpoint_or_abort(const TrainingState& state, const std::filesystem::path& path) {
    try {
        save_checkpoint(state, path);
    } catch (const std::exception& e) {
        throw TrainingFailure("checkpoint write failed at step " + std::to_string(state.step) + ": " + e.what());
    }
}

} // namespace

TrainingState train_loop(TrainingState state, const BatchSource& source, const TrainLoopOptions& options) {
    state.config.validate();
    std::ofstream csv;
    if (options.out_dir) {
        std::filesystem::create_directories(*options.out_dir);
        const auto path = *options.out_dir / "loss.csv";
        csv.open(path, std::ios::trunc);
        if (!csv) {
            throw std::runtime_error("cannot open " + path.string());
        }
        csv << "step,loss,grad_norm,lr\n";
        csv.precision(17);
    }

    while (state.step < state.config.total_steps) {
        const StepMetrics m = train_step(source(state.step), state);
        if (csv.is_open()) {
            csv << m.step << ',' << m.loss << ',' << m.grad_norm << ',' << m.lr << '\n';
            csv.flush();
        }
        if (options.on_step) {
            options.on_step(m);
        }
        if (options.out_dir && state.config.checkpoint_every > 0 && state.step % state.config.checkpoint_every == 0 &&
            state.step < state.config.total_steps) {
            write_checkpoint_or_abort(state,
                                      *options.out_dir / ("checkpoint_" + std::to_string(state.step) + ".bin"));
        }
    }
    if (options.out_dir) {
        write_checkpoint_or_abort(state, *options.out_dir / "final.bin");
    }
    return state;
}

} // namespace fimode
