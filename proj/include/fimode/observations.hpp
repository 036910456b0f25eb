#pragma once

#include <utility>
#include <vector>

#include <Eigen/Core>

#include "fimode/ode.hpp"
#include "fimode/polynomial.hpp"

namespace fimode {

/// One observed time series: values row l is y(t_l).
struct Series {
    TimeGrid grid;
    Eigen::MatrixXd values;

    std::size_t length() const noexcept { return grid.size(); }
    StateVec value(Eigen::Index row) const { return values.row(row).transpose(); }
};

/// The context set of K series observed from one system.
struct ObservationSet {
    int dim = 0;
    std::vector<Series> series;

    /// Throws std::invalid_argument when shapes, dims or values are inconsistent.
    void validate() const;

    std::size_t total_observations() const noexcept;

    /// The first `count` series (count clamped to [1, size]).
    ObservationSet first(std::size_t count) const;
};

/// Affine map between raw and normalized coordinates:
/// t = time_scale * tau and x = scale (*) u + shift.
struct NormalizationTransform {
    double time_scale = 1.0;
    StateVec shift;
    StateVec scale;

    static NormalizationTransform identity(int dim);

    StateVec normalize_state(const StateVec& x) const;
    StateVec denormalize_state(const StateVec& u) const;
    double normalize_time(double t) const { return t / time_scale; }
    double denormalize_time(double tau) const { return tau * time_scale; }

    /// du/dtau from dx/dt: (time_scale / scale_d) * f_d.
    StateVec normalize_field_output(const StateVec& f) const;
    /// dx/dt from du/dtau: f_norm_d * scale_d / time_scale.
    StateVec denormalize_field_output(const StateVec& f_norm) const;

    ObservationSet apply(const ObservationSet& raw) const;
    ObservationSet invert(const ObservationSet& normalized) const;
};

/// Fits the transform that maps the largest time to 1 and each state
/// dimension onto [-1, 1] around its mean (zero-spread dimensions keep scale
/// 1). Returns the transform and the normalized observations.
std::pair<NormalizationTransform, ObservationSet> fit_normalization(const ObservationSet& obs);

StateVec denormalize_field_output(const StateVec& f_norm, const NormalizationTransform& tf);

} // namespace fimode
