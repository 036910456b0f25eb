#include "fimode/observations.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace fimode {

void ObservationSet::validate() const {
    if (dim < 1 || dim > kMaxDim) {
        throw std::invalid_argument("observation dimension must be in [1, 3]");
    }
    if (series.empty()) {
        throw std::invalid_argument("observation set is empty");
    }
    for (const auto& s : series) {
        if (s.values.rows() != static_cast<Eigen::Index>(s.grid.size()) || s.values.cols() != dim) {
            throw std::invalid_argument("series value matrix does not match its grid and dimension");
        }
        if (!s.values.allFinite()) {
            throw std::invalid_argument("series contains non-finite values");
        }
    }
}

std::size_t ObservationSet::total_observations() const noexcept {
    std::size_t n = 0;
    for (const auto& s : series) {
        n += s.length();
    }
    return n;
}

ObservationSet ObservationSet::first(std::size_t count) const {
    ObservationSet out;
    out.dim = dim;
    count = std::clamp<std::size_t>(count, 1, series.size());
    out.series.assign(series.begin(), series.begin() + static_cast<std::ptrdiff_t>(count));
    return out;
}

NormalizationTransform NormalizationTransform::identity(int dim) {
    NormalizationTransform tf;
    tf.shift = StateVec::Zero(dim);
    tf.scale = StateVec::Ones(dim);
    return tf;
}

StateVec NormalizationTransform::normalize_state(const StateVec& x) const {
    return (x - shift).cwiseQuotient(scale);
}

StateVec NormalizationTransform::denormalize_state(const StateVec& u) const {
    return u.cwiseProduct(scale) + shift;
}

StateVec NormalizationTransform::normalize_field_output(const StateVec& f) const {
    return f.cwiseQuotient(scale) * time_scale;
}

StateVec NormalizationTransform::denormalize_field_output(const StateVec& f_norm) const {
    return f_norm.cwiseProduct(scale) / time_scale;
}

ObservationSet NormalizationTransform::apply(const ObservationSet& raw) const {
    ObservationSet out;
    out.dim = raw.dim;
    out.series.reserve(raw.series.size());
    for (const auto& s : raw.series) {
        std::vector<double> t = s.grid.times();
        for (auto& v : t) {
            v = normalize_time(v);
        }
        Eigen::MatrixXd vals = s.values;
        for (Eigen::Index r = 0; r < vals.rows(); ++r) {
            vals.row(r) = normalize_state(s.value(r)).transpose();
        }
        out.series.push_back({TimeGrid(std::move(t)), std::move(vals)});
    }
    return out;
}

ObservationSet NormalizationTransform::invert(const ObservationSet& normalized) const {
    ObservationSet out;
    out.dim = normalized.dim;
    out.series.reserve(normalized.series.size());
    for (const auto& s : normalized.series) {
        std::vector<double> t = s.grid.times();
        for (auto& v : t) {
            v = denormalize_time(v);
        }
        Eigen::MatrixXd vals = s.values;
        for (Eigen::Index r = 0; r < vals.rows(); ++r) {
            vals.row(r) = denormalize_state(s.value(r)).transpose();
        }
        out.series.push_back({TimeGrid(std::move(t)), std::move(vals)});
    }
    return out;
}

std::pair<NormalizationTransform, ObservationSet> fit_normalization(const ObservationSet& obs) {
    obs.validate();
    NormalizationTransform tf;
    double tmax = 0.0;
    StateVec sum = StateVec::Zero(obs.dim);
    double count = 0.0;
    for (const auto& s : obs.series) {
        tmax = std::max(tmax, s.grid.back());
        sum += s.values.colwise().sum().transpose();
        count += static_cast<double>(s.values.rows());
    }
    tf.time_scale = tmax > 0.0 ? tmax : 1.0;
    tf.shift = sum / count;
    tf.scale = StateVec::Zero(obs.dim);
    for (const auto& s : obs.series) {
        for (Eigen::Index r = 0; r < s.values.rows(); ++r) {
            tf.scale = tf.scale.cwiseMax((s.value(r) - tf.shift).cwiseAbs());
        }
    }
    for (int d = 0; d < obs.dim; ++d) {
        if (!(tf.scale[d] > 0.0)) {
            tf.scale[d] = 1.0;
        }
    }
    ObservationSet normalized = tf.apply(obs);
    return {std::move(tf), std::move(normalized)};
}

StateVec denormalize_field_output(const StateVec& f_norm, const NormalizationTransform& tf) {
    return tf.denormalize_field_output(f_norm);
}

} // namespace fimode
