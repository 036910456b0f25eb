#include "fimode/ode.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

#include "fimode/errors.hpp"

namespace fimode {

TimeGrid::TimeGrid(std::vector<double> times)
  : times_(std::move(times)) {
    if (times_.size() < 2) {
        throw std::invalid_argument("time grid needs at least two points");
    }
    if (!std::isfinite(times_.front()) || times_.front() < 0.0) {
        throw std::invalid_argument("time grid must start at a finite time >= 0");
    }
    for (std::size_t i = 1; i < times_.size(); ++i) {
        if (!std::isfinite(times_[i]) || !(times_[i] > times_[i - 1])) {
            throw std::invalid_argument("time grid must be finite and strictly increasing (index " +
                                        std::to_string(i) + ")");
        }
    }
}

TimeGrid TimeGrid::regular(int count, double horizon) {
    if (count < 2 || !(horizon > 0.0)) {
        throw std::invalid_argument("regular grid needs count >= 2 and horizon > 0");
    }
    std::vector<double> t(static_cast<std::size_t>(count));
    for (int i = 0; i < count; ++i) {
        t[static_cast<std::size_t>(i)] = horizon * i / (count - 1);
    }
    return TimeGrid(std::move(t));
}

TimeGrid TimeGrid::shifted(double offset) const {
    std::vector<double> t = times_;
    for (auto& v : t) {
        v += offset;
    }
    return TimeGrid(std::move(t));
}

void SolverConfig::validate() const {
    if (!(rel_tol > 0) || !(abs_tol > 0) || !(max_step > 0) || !(divergence_threshold > 0) || max_steps <= 0 ||
        !(fixed_step > 0)) {
        throw std::invalid_argument("solver configuration values must be positive");
    }
}

namespace {

// Dormand-Prince 5(4) tableau.
constexpr double a21 = 1.0 / 5;
constexpr double a31 = 3.0 / 40, a32 = 9.0 / 40;
constexpr double a41 = 44.0 / 45, a42 = -56.0 / 15, a43 = 32.0 / 9;
constexpr double a51 = 19372.0 / 6561, a52 = -25360.0 / 2187, a53 = 64448.0 / 6561, a54 = -212.0 / 729;
constexpr double a61 = 9017.0 / 3168, a62 = -355.0 / 33, a63 = 46732.0 / 5247, a64 = 49.0 / 176,
                 a65 = -5103.0 / 18656;
constexpr double b1 = 35.0 / 384, b3 = 500.0 / 1113, b4 = 125.0 / 192, b5 = -2187.0 / 6784, b6 = 11.0 / 84;
constexpr double e1 = 71.0 / 57600, e3 = -71.0 / 16695, e4 = 71.0 / 1920, e5 = -17253.0 / 339200, e6 = 22.0 / 525,
                 e7 = -1.0 / 40;

bool diverged_state(const StateVec& x, double threshold) {
    return !x.allFinite() || x.cwiseAbs().maxCoeff() > threshold;
}

double error_norm(const StateVec& err, const StateVec& y0, const StateVec& y1, const SolverConfig& cfg) {
    double acc = 0.0;
    for (int i = 0; i < err.size(); ++i) {
        const double sc = cfg.abs_tol + cfg.rel_tol * std::max(std::abs(y0[i]), std::abs(y1[i]));
        const double r = err[i] / sc;
        acc += r * r;
    }
    return std::sqrt(acc / static_cast<double>(err.size()));
}

StateVec hermite(const StateVec& y0, const StateVec& f0, const StateVec& y1, const StateVec& f1, double h,
                 double theta) {
    const double t2 = theta * theta;
    const double t3 = t2 * theta;
    const double h00 = 2 * t3 - 3 * t2 + 1;
    const double h10 = t3 - 2 * t2 + theta;
    const double h01 = -2 * t3 + 3 * t2;
    const double h11 = t3 - t2;
    return h00 * y0 + (h10 * h) * f0 + h01 * y1 + (h11 * h) * f1;
}

class Integration {
  public:
    Integration(const VectorFieldFn& field, const StateVec& x0, const TimeGrid& grid, const SolverConfig& cfg)
      : field_(field)
      , grid_(grid)
      , cfg_(cfg)
      , t0_(grid.front())
      , dim_(static_cast<int>(x0.size())) {
        out_.grid = grid;
        out_.states.resize(static_cast<Eigen::Index>(grid.size()), dim_);
        out_.states.row(0) = x0.transpose();
        next_ = 1;
    }

    Trajectory run(const StateVec& x0) {
        if (diverged_state(x0, cfg_.divergence_threshold)) {
            return finish_diverged();
        }
        try {
            if (cfg_.method == StepMethod::FixedRK4) {
                run_rk4(x0);
            } else {
                run_dopri(x0);
            }
        } catch (const NumericOverflow&) {
            return finish_diverged();
        } catch (const NumericFailure&) {
            return finish_diverged();
        }
        return std::move(out_);
    }

  private:
    double local_time(std::size_t i) const { return grid_[i] - t0_; }

    StateVec eval(const StateVec& x) {
        StateVec f = field_(x);
        if (f.size() != dim_) {
            throw std::invalid_argument("vector field returned a value of the wrong dimension");
        }
        if (!f.allFinite()) {
            throw NumericOverflow("vector field returned a non-finite value");
        }
        return f;
    }

    void count_step() {
        if (++steps_ > cfg_.max_steps) {
            throw SolverFailure("step budget of " + std::to_string(cfg_.max_steps) + " exhausted");
        }
    }

    Trajectory finish_diverged() {
        out_.states.conservativeResize(static_cast<Eigen::Index>(next_), dim_);
        out_.diverged = true;
        return std::move(out_);
    }

    void run_rk4(StateVec y) {
        for (std::size_t i = 1; i < grid_.size(); ++i) {
            const double span = local_time(i) - local_time(i - 1);
            const long n = std::max(1L, static_cast<long>(std::ceil(span / cfg_.fixed_step - 1e-12)));
            const double h = span / static_cast<double>(n);
            for (long s = 0; s < n; ++s) {
                count_step();
                const StateVec k1 = eval(y);
                const StateVec k2 = eval(y + 0.5 * h * k1);
                const StateVec k3 = eval(y + 0.5 * h * k2);
                const StateVec k4 = eval(y + h * k3);
                y += (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
                if (diverged_state(y, cfg_.divergence_threshold)) {
                    throw NumericOverflow("diverged");
                }
            }
            out_.states.row(static_cast<Eigen::Index>(i)) = y.transpose();
            next_ = i + 1;
        }
    }

    double initial_step(const StateVec& y0, const StateVec& f0, double span) {
        StateVec sc(dim_);
        for (int i = 0; i < dim_; ++i) {
            sc[i] = cfg_.abs_tol + cfg_.rel_tol * std::abs(y0[i]);
        }
        const double d0 = (y0.cwiseQuotient(sc)).norm() / std::sqrt(double(dim_));
        const double d1 = (f0.cwiseQuotient(sc)).norm() / std::sqrt(double(dim_));
        double h0 = (d0 < 1e-5 || d1 < 1e-5) ? 1e-6 : 0.01 * d0 / d1;
        h0 = std::min(h0, span);
        const StateVec f1 = eval(y0 + h0 * f0);
        const double d2 = ((f1 - f0).cwiseQuotient(sc)).norm() / std::sqrt(double(dim_)) / h0;
        const double dmax = std::max(d1, d2);
        const double h1 = dmax <= 1e-15 ? std::max(1e-6, h0 * 1e-3) : std::pow(0.01 / dmax, 1.0 / 5.0);
        return std::min({100 * h0, h1, cfg_.max_step, span});
    }

    void run_dopri(StateVec y) {
        const double span = local_time(grid_.size() - 1);
        StateVec f = eval(y);
        double h = initial_step(y, f, span);
        double t = 0.0;
        while (next_ < grid_.size()) {
            count_step();
            const bool last = t + h >= span;
            if (last) {
                h = span - t;
            }
            const StateVec k1 = f;
            const StateVec k2 = eval(y + h * (a21 * k1));
            const StateVec k3 = eval(y + h * (a31 * k1 + a32 * k2));
            const StateVec k4 = eval(y + h * (a41 * k1 + a42 * k2 + a43 * k3));
            const StateVec k5 = eval(y + h * (a51 * k1 + a52 * k2 + a53 * k3 + a54 * k4));
            const StateVec k6 = eval(y + h * (a61 * k1 + a62 * k2 + a63 * k3 + a64 * k4 + a65 * k5));
            const StateVec y1 = y + h * (b1 * k1 + b3 * k3 + b4 * k4 + b5 * k5 + b6 * k6);
            if (!y1.allFinite()) {
                if (h > 1e-10 * std::max(1.0, span)) {
                    h *= 0.25;
                    continue;
                }
                throw NumericOverflow("diverged");
            }
            const StateVec k7 = eval(y1);
            const StateVec err = h * (e1 * k1 + e3 * k3 + e4 * k4 + e5 * k5 + e6 * k6 + e7 * k7);
            const double en = error_norm(err, y, y1, cfg_);
            if (en <= 1.0) {
                if (diverged_state(y1, cfg_.divergence_threshold)) {
                    throw NumericOverflow("diverged");
                }
                const double t1 = last ? span : t + h;
                while (next_ < grid_.size()) {
                    const double tg = local_time(next_);
                    if (tg > t1) {
                        break;
                    }
                    const StateVec yg = tg == t1 ? y1 : hermite(y, f, y1, k7, h, (tg - t) / h);
                    out_.states.row(static_cast<Eigen::Index>(next_)) = yg.transpose();
                    ++next_;
                }
                t = t1;
                y = y1;
                f = k7;
                const double fac = en == 0.0 ? 5.0 : std::clamp(0.9 * std::pow(en, -0.2), 0.2, 5.0);
                h = std::min(h * fac, cfg_.max_step);
            } else {
                h *= std::clamp(0.9 * std::pow(en, -0.2), 0.1, 1.0);
            }
            if (h < 1e-14 * std::max(1.0, span)) {
                throw SolverFailure("step size underflow");
            }
        }
    }

    const VectorFieldFn& field_;
    const TimeGrid& grid_;
    const SolverConfig& cfg_;
    double t0_;
    int dim_;
    Trajectory out_;
    std::size_t next_ = 1;
    long steps_ = 0;
};

} // namespace

Trajectory integrate(const VectorFieldFn& field, const StateVec& x0, const TimeGrid& grid, const SolverConfig& cfg) {
    cfg.validate();
    if (grid.size() < 2) {
        throw std::invalid_argument("time grid needs at least two points");
    }
    if (x0.size() < 1 || x0.size() > kMaxDim) {
        throw std::invalid_argument("initial state must have 1..3 components");
    }
    if (!x0.allFinite()) {
        throw std::invalid_argument("initial state must be finite");
    }
    Integration run(field, x0, grid, cfg);
    return run.run(x0);
}

std::optional<double> convergence_order(const VectorFieldFn& field, const StateVec& x0, double horizon,
                                        double coarse_step) {
    if (!(horizon > 0) || !(coarse_step > 0)) {
        throw std::invalid_argument("horizon and step must be positive");
    }
    const TimeGrid grid({0.0, horizon});
    StateVec finals[3];
    double h = coarse_step;
    for (auto& out : finals) {
        SolverConfig cfg;
        cfg.method = StepMethod::FixedRK4;
        cfg.fixed_step = h;
        cfg.max_steps = 100000000;
        const Trajectory tr = integrate(field, x0, grid, cfg);
        if (!tr.complete()) {
            throw SolverFailure("trajectory diverged during order estimate");
        }
        out = tr.state(1);
        h *= 0.5;
    }
    const double d1 = (finals[0] - finals[1]).norm();
    const double d2 = (finals[1] - finals[2]).norm();
    if (d1 < 1e-300 || d2 < 1e-300) {
        return std::nullopt;
    }
    return std::log2(d1 / d2);
}

} // namespace fimode
