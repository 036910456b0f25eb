#include "fimode/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <sstream>
#include <stdexcept>

#include <Eigen/QR>

#include "fimode/errors.hpp"
#include "fimode/parallel.hpp"

namespace fimode {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();
constexpr double kSstGuard = 1e-12;

struct Slopes {
    Eigen::MatrixXd points; // P x D midpoints
    Eigen::MatrixXd values; // P x D finite-difference slopes
};

Slopes finite_difference_slopes(const ObservationSet& obs) {
    Eigen::Index count = 0;
    for (const auto& s : obs.series) {
        count += std::max<Eigen::Index>(0, s.values.rows() - 1);
    }
    Slopes out{Eigen::MatrixXd(count, obs.dim), Eigen::MatrixXd(count, obs.dim)};
    Eigen::Index p = 0;
    for (const auto& s : obs.series) {
        for (Eigen::Index l = 0; l + 1 < s.values.rows(); ++l) {
            const double dt = s.grid[static_cast<std::size_t>(l + 1)] - s.grid[static_cast<std::size_t>(l)];
            out.points.row(p) = 0.5 * (s.values.row(l) + s.values.row(l + 1));
            out.values.row(p) = (s.values.row(l + 1) - s.values.row(l)) / dt;
            ++p;
        }
    }
    return out;
}

Trajectory as_trajectory(const Series& s) {
    Trajectory t;
    t.grid = s.grid;
    t.states = s.values;
    return t;
}

double score_one(const VectorFieldFn& field, const Trajectory& truth, const StateVec& x0, const SolverConfig& solver) {
    try {
        const Trajectory pred = integrate(field, x0, truth.grid, solver);
        return r2_score(truth, pred);
    } catch (const std::exception&) {
        return kNegInf;
    }
}

} // namespace

double r2_score(const Trajectory& truth, const Trajectory& pred) {
    if (!(truth.grid == pred.grid)) {
        throw std::invalid_argument("r2_score: grids differ");
    }
    if (truth.dim() != pred.dim()) {
        throw std::invalid_argument("r2_score: dimensions differ");
    }
    if (!truth.complete()) {
        throw std::invalid_argument("r2_score: truth trajectory is incomplete");
    }
    if (!pred.complete() || !pred.states.allFinite()) {
        return kNegInf;
    }
    const Eigen::RowVectorXd mean = truth.states.colwise().mean();
    const double sst = (truth.states.rowwise() - mean).squaredNorm();
    const double sse = (truth.states - pred.states).squaredNorm();
    return 1.0 - sse / std::max(sst, kSstGuard);
}

double r2_accuracy(std::span<const double> scores) {
    if (scores.empty()) {
        throw std::invalid_argument("r2_accuracy: empty score list");
    }
    const auto hits = std::count_if(scores.begin(), scores.end(), [](double s) { return s > 0.9; });
    return static_cast<double>(hits) / static_cast<double>(scores.size());
}

VectorFieldFn OracleEstimator::fit(const ObservationSet&, const DatasetRecord& record) const {
    return record.field.as_function();
}

PolynomialVectorField polyfit(const ObservationSet& obs, double ridge) {
    obs.validate();
    const Slopes s = finite_difference_slopes(obs);
    const auto basis = enumerate_monomials(obs.dim, kMaxDegree);
    const auto n_basis = static_cast<Eigen::Index>(basis.size());
    if (s.points.rows() < n_basis) {
        throw std::invalid_argument("polyfit: " + std::to_string(s.points.rows()) + " slope samples for " +
                                    std::to_string(n_basis) + " basis functions");
    }
    Eigen::MatrixXd design(s.points.rows(), n_basis);
    for (Eigen::Index p = 0; p < s.points.rows(); ++p) {
        const StateVec x = s.points.row(p).transpose();
        for (Eigen::Index j = 0; j < n_basis; ++j) {
            design(p, j) = eval_monomial(basis[static_cast<std::size_t>(j)], x);
        }
    }
    // Ridge as an augmented least-squares problem; QR avoids squaring the
    // condition number of the monomial design.
    const Eigen::Index n_points = s.points.rows();
    Eigen::MatrixXd aug = Eigen::MatrixXd::Zero(n_points + n_basis, n_basis);
    aug.topRows(n_points) = design;
    aug.bottomRows(n_basis).diagonal().setConstant(std::sqrt(ridge));
    Eigen::MatrixXd rhs = Eigen::MatrixXd::Zero(n_points + n_basis, obs.dim);
    rhs.topRows(n_points) = s.values;
    const Eigen::MatrixXd coeffs = aug.colPivHouseholderQr().solve(rhs);
    if (!coeffs.allFinite()) {
        throw NumericFailure("polyfit: non-finite coefficients");
    }
    std::vector<MonomialSum> comps(static_cast<std::size_t>(obs.dim));
    for (int d = 0; d < obs.dim; ++d) {
        for (Eigen::Index j = 0; j < n_basis; ++j) {
            comps[static_cast<std::size_t>(d)].push_back({coeffs(j, d), basis[static_cast<std::size_t>(j)]});
        }
    }
    return PolynomialVectorField(obs.dim, std::move(comps));
}

VectorFieldFn PolyfitEstimator::fit(const ObservationSet& context, const DatasetRecord&) const {
    return polyfit(context, ridge_).as_function();
}

VectorFieldFn NearestNeighborEstimator::fit(const ObservationSet& context, const DatasetRecord&) const {
    context.validate();
    auto slopes = std::make_shared<const Slopes>(finite_difference_slopes(context));
    if (slopes->points.rows() == 0) {
        throw std::invalid_argument("nearest-neighbor estimator needs at least one slope sample");
    }
    const auto k = static_cast<std::size_t>(std::min<Eigen::Index>(neighbors_, slopes->points.rows()));
    return [slopes, k](const StateVec& x) -> StateVec {
        const Eigen::Index n = slopes->points.rows();
        std::vector<std::pair<double, Eigen::Index>> dist(static_cast<std::size_t>(n));
        for (Eigen::Index p = 0; p < n; ++p) {
            dist[static_cast<std::size_t>(p)] = {(slopes->points.row(p) - x.transpose()).squaredNorm(), p};
        }
        std::nth_element(dist.begin(), dist.begin() + static_cast<std::ptrdiff_t>(k - 1), dist.end());
        std::sort(dist.begin(), dist.begin() + static_cast<std::ptrdiff_t>(k));
        const double bandwidth2 = std::max(dist[k - 1].first, 1e-24);
        StateVec out = StateVec::Zero(x.size());
        double total = 0.0;
        for (std::size_t i = 0; i < k; ++i) {
            const double w = std::exp(-0.5 * dist[i].first / bandwidth2);
            out += w * slopes->values.row(dist[i].second).transpose();
            total += w;
        }
        return out / total;
    };
}

VectorFieldFn FimEstimator::fit(const ObservationSet& context, const DatasetRecord&) const {
    return model_->make_field(context);
}

ObservationSet select_context(const DatasetRecord& record, const EvalOptions& opts) {
    const std::size_t available = record.observations.series.size();
    const std::size_t n = opts.context_trajectories > 0
                              ? std::min(available, static_cast<std::size_t>(opts.context_trajectories))
                              : available;
    return record.observations.first(n);
}

std::vector<double> run_reconstruction(const DatasetRecord& record, const Estimator& estimator,
                                       const EvalOptions& opts) {
    const ObservationSet context = select_context(record, opts);
    const std::size_t n = context.series.size();
    if (opts.score_against == ScoreTarget::Clean && record.clean.size() < n) {
        throw std::invalid_argument("run_reconstruction: record lacks clean context trajectories");
    }
    VectorFieldFn field;
    try {
        field = estimator.fit(context, record);
    } catch (const std::exception&) {
        return std::vector<double>(n, kNegInf);
    }
    std::vector<double> scores;
    scores.reserve(n);
    for (std::size_t k = 0; k < n; ++k) {
        // The run starts from the first state of the series it is scored
        // against, so the oracle reproduces its target exactly.
        const Trajectory truth =
            opts.score_against == ScoreTarget::Clean ? record.clean[k] : as_trajectory(context.series[k]);
        scores.push_back(score_one(field, truth, truth.state(0), record.config.solver));
    }
    return scores;
}

std::vector<double> run_generalization(const DatasetRecord& record, const Estimator& estimator,
                                       const EvalOptions& opts) {
    if (record.holdout.empty()) {
        throw std::invalid_argument("run_generalization: record has no held-out trajectories");
    }
    const ObservationSet context = select_context(record, opts);
    VectorFieldFn field;
    try {
        field = estimator.fit(context, record);
    } catch (const std::exception&) {
        return std::vector<double>(record.holdout.size(), kNegInf);
    }
    std::vector<double> scores;
    scores.reserve(record.holdout.size());
    for (const auto& truth : record.holdout) {
        scores.push_back(score_one(field, truth, truth.state(0), record.config.solver));
    }
    return scores;
}

EvalReport evaluate(const std::vector<DatasetRecord>& records, const Estimator& estimator, const EvalOptions& opts) {
    EvalReport report;
    report.estimator = estimator.name();
    report.options = opts;
    report.systems.resize(records.size());
    parallel_for(records.size(), opts.workers, [&](std::size_t i) {
        const auto& rec = records[i];
        auto& out = report.systems[i];
        out.id = rec.id;
        out.dim = rec.observations.dim;
        out.reconstruction = run_reconstruction(rec, estimator, opts);
        if (!rec.holdout.empty()) {
            out.generalization = run_generalization(rec, estimator, opts);
        }
    });

    std::vector<double> recon, gen;
    for (const auto& s : report.systems) {
        recon.insert(recon.end(), s.reconstruction.begin(), s.reconstruction.end());
        gen.insert(gen.end(), s.generalization.begin(), s.generalization.end());
    }
    const auto failed = [](double v) { return !std::isfinite(v); };
    report.failures = static_cast<std::size_t>(std::count_if(recon.begin(), recon.end(), failed) +
                                               std::count_if(gen.begin(), gen.end(), failed));
    report.reconstruction_count = recon.size();
    report.generalization_count = gen.size();
    const double nan = std::numeric_limits<double>::quiet_NaN();
    report.r2_accuracy_reconstruction = recon.empty() ? nan : r2_accuracy(recon);
    report.r2_accuracy_generalization = gen.empty() ? nan : r2_accuracy(gen);
    return report;
}

namespace {

nlohmann::json score_list(const std::vector<double>& v) {
    nlohmann::json out = nlohmann::json::array();
    for (double s : v) {
        out.push_back(std::isfinite(s) ? nlohmann::json(s) : nlohmann::json(nullptr));
    }
    return out;
}

nlohmann::json finite_or_null(double v) {
    return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr);
}

std::string format_accuracy(double v) {
    if (!std::isfinite(v)) {
        return "n/a";
    }
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.3f", v);
    return buf;
}

} // namespace

nlohmann::json report_to_json(const EvalReport& report) {
    nlohmann::json systems = nlohmann::json::array();
    for (const auto& s : report.systems) {
        systems.push_back({{"id", s.id},
                           {"D", s.dim},
                           {"reconstruction", score_list(s.reconstruction)},
                           {"generalization", score_list(s.generalization)}});
    }
    // Worker count is left out so reports do not depend on parallelism.
    return {{"estimator", report.estimator},
            {"options",
             {{"context_trajectories", report.options.context_trajectories},
              {"score_against", report.options.score_against == ScoreTarget::Observed ? "observed" : "clean"}}},
            {"systems", std::move(systems)},
            {"aggregate",
             {{"r2_accuracy_reconstruction", finite_or_null(report.r2_accuracy_reconstruction)},
              {"r2_accuracy_generalization", finite_or_null(report.r2_accuracy_generalization)},
              {"reconstruction_count", report.reconstruction_count},
              {"generalization_count", report.generalization_count},
              {"failures", report.failures}}}};
}

std::string summary_table(const EvalReport& report) {
    std::ostringstream out;
    char line[128];
    std::snprintf(line, sizeof line, "%-16s %10s %10s %8s\n", "task", "R2-acc", "scores", "failed");
    out << "estimator: " << report.estimator << " (" << report.systems.size() << " systems)\n" << line;
    std::size_t recon_failed = 0, gen_failed = 0;
    for (const auto& s : report.systems) {
        recon_failed += static_cast<std::size_t>(
            std::count_if(s.reconstruction.begin(), s.reconstruction.end(), [](double v) { return !std::isfinite(v); }));
        gen_failed += static_cast<std::size_t>(
            std::count_if(s.generalization.begin(), s.generalization.end(), [](double v) { return !std::isfinite(v); }));
    }
    std::snprintf(line, sizeof line, "%-16s %10s %10zu %8zu\n", "reconstruction",
                  format_accuracy(report.r2_accuracy_reconstruction).c_str(), report.reconstruction_count,
                  recon_failed);
    out << line;
    std::snprintf(line, sizeof line, "%-16s %10s %10zu %8zu\n", "generalization",
                  format_accuracy(report.r2_accuracy_generalization).c_str(), report.generalization_count,
                  gen_failed);
    out << line;
    return out.str();
}

} // namespace fimode
