#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "fimode/errors.hpp"
#include "fimode/ode.hpp"

using namespace fimode;

namespace {

StateVec vec(std::initializer_list<double> v) {
    StateVec x(static_cast<Eigen::Index>(v.size()));
    Eigen::Index i = 0;
    for (double e : v) {
        x[i++] = e;
    }
    return x;
}

const VectorFieldFn decay = [](const StateVec& x) { return StateVec(-x); };
const VectorFieldFn rotation = [](const StateVec& x) { return vec({x[1], -x[0]}); };

double rk4_error(const VectorFieldFn& f, const StateVec& x0, double horizon, double h,
                 const std::function<StateVec(double)>& exact) {
    SolverConfig cfg;
    cfg.method = StepMethod::FixedRK4;
    cfg.fixed_step = h;
    const Trajectory tr = integrate(f, x0, TimeGrid({0.0, horizon}), cfg);
    return (tr.state(1) - exact(horizon)).norm();
}

} // namespace

TEST(TimeGrid, Validation) {
    EXPECT_THROW(TimeGrid({0.0}), std::invalid_argument);
    EXPECT_THROW(TimeGrid({0.0, 0.0}), std::invalid_argument);
    EXPECT_THROW(TimeGrid({-1.0, 1.0}), std::invalid_argument);
    EXPECT_THROW(TimeGrid({0.0, NAN}), std::invalid_argument);
    const auto g = TimeGrid::regular(200, 9.95);
    EXPECT_NEAR(g[1] - g[0], 0.05, 1e-12);
    EXPECT_DOUBLE_EQ(g.back(), 9.95);
}

TEST(Integrate, ExponentialDecay) {
    const Trajectory tr = integrate(decay, vec({1.0}), TimeGrid({0.0, 0.5, 1.0}));
    ASSERT_TRUE(tr.complete());
    EXPECT_EQ(tr.states(0, 0), 1.0);
    EXPECT_NEAR(tr.states(1, 0), std::exp(-0.5), 1e-6);
    EXPECT_NEAR(tr.states(2, 0), 0.3678794, 1e-6);
}

TEST(Integrate, ZeroFieldIsConstant) {
    const VectorFieldFn zero = [](const StateVec& x) { return StateVec(StateVec::Zero(x.size())); };
    const Trajectory tr = integrate(zero, vec({0.3, -2.0, 5.0}), TimeGrid::regular(17, 3.0));
    ASSERT_TRUE(tr.complete());
    for (Eigen::Index r = 0; r < tr.states.rows(); ++r) {
        EXPECT_EQ(tr.state(r), vec({0.3, -2.0, 5.0}));
    }
}

TEST(Integrate, HarmonicOscillatorFullPeriod) {
    const double two_pi = 2.0 * std::numbers::pi;
    const Trajectory tr = integrate(rotation, vec({1.0, 0.0}), TimeGrid::regular(50, two_pi));
    ASSERT_TRUE(tr.complete());
    EXPECT_NEAR(tr.states(49, 0), 1.0, 1e-5);
    EXPECT_NEAR(tr.states(49, 1), 0.0, 1e-5);
    // Dense output between steps tracks (cos t, -sin t).
    for (Eigen::Index r = 0; r < 50; ++r) {
        const double t = tr.grid[static_cast<std::size_t>(r)];
        EXPECT_NEAR(tr.states(r, 0), std::cos(t), 1e-5);
        EXPECT_NEAR(tr.states(r, 1), -std::sin(t), 1e-5);
    }
}

TEST(Integrate, LotkaVolterraFixedPointStays) {
    const VectorFieldFn lv = [](const StateVec& x) {
        return vec({x[0] - x[0] * x[1], x[0] * x[1] - x[1]});
    };
    const Trajectory tr = integrate(lv, vec({1.0, 1.0}), TimeGrid::regular(11, 10.0));
    ASSERT_TRUE(tr.complete());
    EXPECT_LT((tr.states.array() - 1.0).abs().maxCoeff(), 1e-12);
}

TEST(Integrate, DivergenceTruncatesStates) {
    // x' = x^2 blows up at t = 1 from x0 = 1.
    const VectorFieldFn blowup = [](const StateVec& x) { return StateVec(x.cwiseProduct(x)); };
    const Trajectory tr = integrate(blowup, vec({1.0}), TimeGrid::regular(21, 2.0));
    EXPECT_TRUE(tr.diverged);
    EXPECT_FALSE(tr.complete());
    ASSERT_GE(tr.states.rows(), 1);
    EXPECT_LE(tr.states.rows(), 11); // t = 1.0 is grid index 10
    EXPECT_TRUE(tr.states.allFinite());
    for (Eigen::Index r = 0; r < tr.states.rows(); ++r) {
        const double t = tr.grid[static_cast<std::size_t>(r)];
        EXPECT_LT(t, 1.0);
        EXPECT_NEAR(tr.states(r, 0), 1.0 / (1.0 - t), 1e-5 / (1.0 - t) / (1.0 - t));
    }
}

TEST(Integrate, StepBudgetExhaustion) {
    SolverConfig cfg;
    cfg.max_steps = 3;
    EXPECT_THROW(integrate(rotation, vec({1.0, 0.0}), TimeGrid::regular(5, 100.0), cfg), SolverFailure);
}

TEST(Integrate, FieldOverflowMarksDivergence) {
    const VectorFieldFn bad = [](const StateVec& x) -> StateVec {
        if (x[0] > 1.5) {
            throw NumericOverflow("boom");
        }
        return StateVec::Ones(1);
    };
    const Trajectory tr = integrate(bad, vec({1.0}), TimeGrid::regular(11, 1.0));
    EXPECT_TRUE(tr.diverged);
    EXPECT_GE(tr.states.rows(), 1);
    EXPECT_LE(tr.states.rows(), 6);
}

TEST(Integrate, GridRefinementConsistency) {
    const VectorFieldFn vdp = [](const StateVec& x) { return vec({x[1], (1 - x[0] * x[0]) * x[1] - x[0]}); };
    SolverConfig cfg;
    const Trajectory coarse = integrate(vdp, vec({2.0, 0.0}), TimeGrid::regular(21, 5.0), cfg);
    const Trajectory fine = integrate(vdp, vec({2.0, 0.0}), TimeGrid::regular(41, 5.0), cfg);
    for (Eigen::Index r = 0; r < 21; ++r) {
        for (int d = 0; d < 2; ++d) {
            const double a = coarse.states(r, d);
            const double b = fine.states(2 * r, d);
            EXPECT_NEAR(a, b, 10 * cfg.rel_tol * std::max(1.0, std::abs(b)));
        }
    }
}

TEST(Integrate, TimeTranslationInvariance) {
    const VectorFieldFn cubic = [](const StateVec& x) { return vec({-x[0] * x[0] * x[0] + x[1], -x[0]}); };
    const TimeGrid grid = TimeGrid::regular(30, 4.0);
    const Trajectory a = integrate(cubic, vec({0.7, -0.2}), grid);
    const Trajectory b = integrate(cubic, vec({0.7, -0.2}), grid.shifted(3.0));
    ASSERT_TRUE(a.complete() && b.complete());
    EXPECT_LT((a.states - b.states).cwiseAbs().maxCoeff(), 1e-10);
}

TEST(ConvergenceOrder, DecayErrorRatioIsSixteen) {
    // Oracle: analytic solution e^{-t}.
    const auto exact = [](double t) { return vec({std::exp(-t)}); };
    const double e1 = rk4_error(decay, vec({1.0}), 1.0, 0.05, exact);
    const double e2 = rk4_error(decay, vec({1.0}), 1.0, 0.025, exact);
    EXPECT_NEAR(e1 / e2, 16.0, 0.5);
}

TEST(ConvergenceOrder, RotationAnalyticOrderFour) {
    const auto exact = [](double t) { return vec({std::cos(t), -std::sin(t)}); };
    const double e1 = rk4_error(rotation, vec({1.0, 0.0}), 2.0, 0.1, exact);
    const double e2 = rk4_error(rotation, vec({1.0, 0.0}), 2.0, 0.05, exact);
    const double p = std::log2(e1 / e2);
    EXPECT_GE(p, 3.5);
    EXPECT_LE(p, 4.5);

    const auto estimated = convergence_order(rotation, vec({1.0, 0.0}), 2.0);
    ASSERT_TRUE(estimated.has_value());
    EXPECT_GE(*estimated, 3.5);
    EXPECT_LE(*estimated, 4.5);
}

TEST(ConvergenceOrder, ZeroFieldSkipped) {
    const VectorFieldFn zero = [](const StateVec& x) { return StateVec(StateVec::Zero(x.size())); };
    EXPECT_EQ(rk4_error(zero, vec({2.0}), 1.0, 0.1, [](double) { return vec({2.0}); }), 0.0);
    EXPECT_FALSE(convergence_order(zero, vec({2.0}), 1.0).has_value());
}

TEST(ConvergenceOrder, DivergenceIsSolverFailure) {
    const VectorFieldFn blowup = [](const StateVec& x) { return StateVec(x.cwiseProduct(x)); };
    EXPECT_THROW(convergence_order(blowup, vec({1.0}), 2.0), SolverFailure);
}
