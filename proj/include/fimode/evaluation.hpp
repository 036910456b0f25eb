#pragma once

#include <memory>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "fimode/datagen.hpp"
#include "fimode/model.hpp"

namespace fimode {

enum class ScoreTarget { Clean, Observed };

struct EvalOptions {
    /// Number of context series handed to the estimator; 0 means all.
    int context_trajectories = 0;
    ScoreTarget score_against = ScoreTarget::Clean;
    int workers = 1;
};

/// Pooled R^2 over all time points and dimensions, each dimension centred on
/// its own mean. A diverged or non-finite prediction scores -infinity.
/// Throws std::invalid_argument when grids or dims differ.
double r2_score(const Trajectory& truth, const Trajectory& pred);

/// Fraction of scores strictly greater than 0.9. Throws on an empty list.
double r2_accuracy(std::span<const double> scores);

/// Builds a vector field from context observations.
class Estimator {
  public:
    virtual ~Estimator() = default;
    virtual std::string name() const = 0;
    /// `record` is available for the oracle only; data-driven estimators
    /// must use `context` alone.
    virtual VectorFieldFn fit(const ObservationSet& context, const DatasetRecord& record) const = 0;
};

/// Returns the record's true field.
class OracleEstimator final : public Estimator {
  public:
    std::string name() const override { return "oracle"; }
    VectorFieldFn fit(const ObservationSet& context, const DatasetRecord& record) const override;
};

/// Ridge least squares of finite-difference slopes on the degree <= 3
/// monomial basis.
class PolyfitEstimator final : public Estimator {
  public:
    explicit PolyfitEstimator(double ridge = 1e-6) : ridge_(ridge) {}
    std::string name() const override { return "polyfit"; }
    VectorFieldFn fit(const ObservationSet& context, const DatasetRecord& record) const override;

  private:
    double ridge_;
};

/// Gaussian-kernel average of finite-difference slopes at nearby
/// observations. Reproduces the context well and extrapolates poorly.
class NearestNeighborEstimator final : public Estimator {
  public:
    explicit NearestNeighborEstimator(int neighbors = 8) : neighbors_(neighbors) {}
    std::string name() const override { return "nearest"; }
    VectorFieldFn fit(const ObservationSet& context, const DatasetRecord& record) const override;

  private:
    int neighbors_;
};

class FimEstimator final : public Estimator {
  public:
    explicit FimEstimator(std::shared_ptr<const FimModel> model) : model_(std::move(model)) {}
    std::string name() const override { return "fim"; }
    VectorFieldFn fit(const ObservationSet& context, const DatasetRecord& record) const override;

  private:
    std::shared_ptr<const FimModel> model_;
};

/// The polynomial fitted by PolyfitEstimator. Throws std::invalid_argument
/// when there are fewer slope samples than basis functions.
PolynomialVectorField polyfit(const ObservationSet& obs, double ridge = 1e-6);

/// Context series passed to estimators under `opts`.
ObservationSet select_context(const DatasetRecord& record, const EvalOptions& opts);

/// Integrates the estimate from each context trajectory's first state over
/// its grid and scores it against that trajectory.
std::vector<double> run_reconstruction(const DatasetRecord& record, const Estimator& estimator,
                                       const EvalOptions& opts = {});

/// Same for the held-out trajectories. Throws when the record has none.
std::vector<double> run_generalization(const DatasetRecord& record, const Estimator& estimator,
                                       const EvalOptions& opts = {});

struct SystemResult {
    std::uint64_t id = 0;
    int dim = 0;
    std::vector<double> reconstruction;
    std::vector<double> generalization;
};

struct EvalReport {
    std::string estimator;
    EvalOptions options;
    std::vector<SystemResult> systems;
    double r2_accuracy_reconstruction = 0.0;
    double r2_accuracy_generalization = 0.0;
    std::size_t reconstruction_count = 0;
    std::size_t generalization_count = 0;
    std::size_t failures = 0;
};

EvalReport evaluate(const std::vector<DatasetRecord>& records, const Estimator& estimator,
                    const EvalOptions& opts = {});

/// -infinity scores are written as null.
nlohmann::json report_to_json(const EvalReport& report);
std::string summary_table(const EvalReport& report);

} // namespace fimode
