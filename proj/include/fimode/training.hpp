#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <vector>

#include <Eigen/Core>

#include "fimode/datagen.hpp"
#include "fimode/model.hpp"

namespace fimode {

struct TrainConfig {
    int batch_systems = 8;
    int queries_per_system = 64; // M
    double jitter_scale = 0.1;   // alpha, in normalized coordinates
    double learning_rate = 3e-4;
    long warmup_steps = 500;
    long total_steps = 2000;
    double gradient_clip_norm = 1.0;
    long checkpoint_every = 500; // 0 disables periodic checkpoints
    std::uint64_t seed = 0;
    /// Condition each system on a uniformly drawn number 1..K of its context
    /// series instead of all K.
    bool random_context_count = true;
    int workers = 1;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;

    void validate() const;
};

struct AdamState {
    std::vector<Eigen::MatrixXd> first_moment;
    std::vector<Eigen::MatrixXd> second_moment;
};

struct LossStatistics {
    double last = 0.0;
    double ema = 0.0;  // exponential moving average, factor 0.98
    double initial = 0.0;
    long count = 0;
};

/// Everything needed to continue training bit-identically.
struct TrainingState {
    long step = 0;
    FimModel model;
    AdamState optimizer;
    LossStatistics stats;
    TrainConfig config;
    double lr_scale = 1.0; // halved after a non-finite step

    explicit TrainingState(const ModelConfig& model_cfg = {}, const TrainConfig& train_cfg = {});
};

using Checkpoint = TrainingState;

struct StepMetrics {
    long step = 0;
    double loss = 0.0;
    double grad_norm = 0.0; // before clipping
    double clipped_norm = 0.0;
    double lr = 0.0;
    bool retried = false;
};

/// M query points: uniformly chosen observed states plus Normal(0, alpha^2 I)
/// jitter. Returns M x dim.
Eigen::MatrixXd sample_queries(const ObservationSet& normalized, int count, double jitter, Rng& rng);

/// Mean over rows of the squared Euclidean error over the first `dim`
/// columns. Throws NumericFailure on non-finite input.
double loss(const Eigen::MatrixXd& pred, const Eigen::MatrixXd& truth, int dim);
double loss(const Eigen::MatrixXd& pred, const Eigen::MatrixXd& truth);

/// d(loss)/d(pred); columns >= dim are zero.
Eigen::MatrixXd loss_gradient(const Eigen::MatrixXd& pred, const Eigen::MatrixXd& truth, int dim);

/// Linear warmup to cfg.learning_rate, then cosine decay to zero at
/// total_steps. `step` is zero-based.
double learning_rate_at(const TrainConfig& cfg, long step);

/// Training example for one system: normalized tokens, padded queries (M x 3)
/// and ground-truth normalized field values (M x 3, zero padded).
struct TrainingExample {
    TokenBatch tokens;
    Eigen::MatrixXd queries;
    Eigen::MatrixXd truth;
    int dim = 0;
};

/// Normalizes the chosen context, samples queries near it and evaluates the
/// stored field at the denormalized queries, mapped to normalized
/// coordinates by the chain rule.
TrainingExample make_example(const DatasetRecord& record, const TrainConfig& cfg, Rng& rng);

/// Mean training loss of `model` over every record with all context series,
/// using queries drawn from make_stream(seed, record index). The same seed
/// gives the same queries, so values before and after training compare.
double dataset_loss(const FimModel& model, const std::vector<DatasetRecord>& records, const TrainConfig& cfg,
                    std::uint64_t seed);

/// Forward, backward, global-norm clip and one Adam update over the batch.
/// A non-finite loss, gradient or update rolls the step back, halves the
/// learning rate and retries once; a second failure throws TrainingFailure.
StepMetrics train_step(const std::vector<DatasetRecord>& batch, TrainingState& state);

/// Supplies the batch for a given step; must be a pure function of the step.
using BatchSource = std::function<std::vector<DatasetRecord>(long step)>;

/// Batches drawn uniformly (with replacement) from a fixed pool.
BatchSource fixed_pool_source(std::shared_ptr<const std::vector<DatasetRecord>> pool, int batch_systems,
                              std::uint64_t seed);

/// Fresh systems generated per step from the generator configuration.
BatchSource generator_source(const GeneratorConfig& gen, int batch_systems);

struct TrainLoopOptions {
    std::optional<std::filesystem::path> out_dir; // checkpoints and loss.csv
    std::function<void(const StepMetrics&)> on_step;
};

/// Runs state.step .. config.total_steps - 1 and returns the final state.
/// Checkpoints go to out_dir/checkpoint_<step>.bin and out_dir/final.bin;
/// the loss log goes to out_dir/loss.csv with columns step,loss,grad_norm,lr.
TrainingState train_loop(TrainingState state, const BatchSource& source, const TrainLoopOptions& options = {});

} // namespace fimode
