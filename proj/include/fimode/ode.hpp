#pragma once

#include <limits>
#include <optional>
#include <vector>

#include <Eigen/Core>

#include "fimode/polynomial.hpp"

namespace fimode {

/// Strictly increasing, finite observation times with times[0] >= 0 and at
/// least two entries.
class TimeGrid {
  public:
    TimeGrid() = default;
    explicit TimeGrid(std::vector<double> times);

    /// times i * horizon / (count - 1), i = 0..count-1.
    static TimeGrid regular(int count, double horizon);

    const std::vector<double>& times() const noexcept { return times_; }
    std::size_t size() const noexcept { return times_.size(); }
    double operator[](std::size_t i) const { return times_[i]; }
    double front() const { return times_.front(); }
    double back() const { return times_.back(); }

    TimeGrid shifted(double offset) const;

    friend bool operator==(const TimeGrid&, const TimeGrid&) = default;

  private:
    std::vector<double> times_;
};

/// Solver output sampled on a grid. When `diverged` is set, `states` holds
/// only the rows reached before the divergence point.
struct Trajectory {
    TimeGrid grid;
    Eigen::MatrixXd states; // rows = grid points, cols = dimension
    bool diverged = false;

    int dim() const noexcept { return static_cast<int>(states.cols()); }
    StateVec state(Eigen::Index row) const { return states.row(row).transpose(); }
    bool complete() const noexcept {
        return !diverged && states.rows() == static_cast<Eigen::Index>(grid.size());
    }
};

enum class StepMethod {
    DormandPrince45, // adaptive, cubic-Hermite dense output
    FixedRK4,        // classical RK4 with step <= fixed_step, landing on every grid time
};

struct SolverConfig {
    double rel_tol = 1e-7;
    double abs_tol = 1e-9;
    double max_step = std::numeric_limits<double>::infinity();
    double divergence_threshold = 1e4; // bound on the max-norm of the state
    long max_steps = 200000;
    StepMethod method = StepMethod::DormandPrince45;
    double fixed_step = 1e-2; // FixedRK4 only

    void validate() const;
};

/// Integrates dx/dt = f(x) from x0 at grid.front() and reports the state at
/// every grid time.
///
/// Throws SolverFailure when max_steps is exhausted. A state whose max-norm
/// exceeds divergence_threshold, or a field evaluation throwing
/// NumericOverflow/NumericFailure, ends the integration with diverged=true.
Trajectory integrate(const VectorFieldFn& field, const StateVec& x0, const TimeGrid& grid, const SolverConfig& cfg = {});

/// Observed order of the fixed-step RK4 mode on [0, horizon], from three
/// step sizes h, h/2, h/4 (Richardson, no exact solution needed). Returns
/// nullopt when the differences vanish (e.g. the zero field). Throws
/// SolverFailure on divergence.
std::optional<double> convergence_order(const VectorFieldFn& field, const StateVec& x0, double horizon,
                                        double coarse_step = 0.1);

} // namespace fimode
