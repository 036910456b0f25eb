#pragma once

#include <array>
#include <cstdint>
#include <random>
#include <vector>

#include "fimode/observations.hpp"
#include "fimode/ode.hpp"
#include "fimode/polynomial.hpp"

namespace fimode {

using Rng = std::mt19937_64;

/// Independent generator stream for one record (or one training step).
Rng make_stream(std::uint64_t seed, std::uint64_t index);

enum class GridMode { Regular, Irregular };

/// Distribution over systems, initial states, grids and noise.
struct GeneratorConfig {
    std::array<double, 3> dim_weights{1.0 / 3, 1.0 / 3, 1.0 / 3};
    int max_terms_per_component = 4;
    double coeff_scale = 1.0;
    GridMode grid_mode = GridMode::Regular;
    int observations_per_series = 200; // L
    int context_series = 9;            // K
    int holdout_series = 4;            // H
    double horizon = 9.95;             // T
    double noise_level = 0.05;         // relative to per-dimension trajectory std
    double init_state_std = 1.0;
    std::uint64_t seed = 0;
    int max_rejections = 100;
    SolverConfig solver;

    void validate() const;
};

struct DatasetRecord {
    std::uint64_t id = 0;
    PolynomialVectorField field;
    ObservationSet observations;           // noisy context series
    std::vector<Trajectory> clean;         // noise-free context trajectories
    std::vector<Trajectory> holdout;       // noise-free held-out trajectories
    GeneratorConfig config;
};

PolynomialVectorField sample_field(Rng& rng, const GeneratorConfig& cfg);

/// Regular: i * T / (L - 1). Irregular: L sorted Uniform(0, T) draws with
/// pairwise separation >= T / (10 L); offending points are redrawn. Throws
/// GenerationFailure when the redraw budget runs out.
TimeGrid sample_grid(Rng& rng, const GeneratorConfig& cfg);

/// Adds i.i.d. Normal(0, (noise_level * std_d)^2) to dimension d, where
/// std_d is the population std of that dimension over the trajectory.
Series corrupt(const Trajectory& traj, double noise_level, Rng& rng);

/// Samples a system with K context and H holdout trajectories; the whole
/// system is redrawn when any trajectory diverges or fails to integrate.
/// `rejections` (optional) receives the number of discarded draws.
DatasetRecord generate_record(Rng& rng, const GeneratorConfig& cfg, std::uint64_t id, int* rejections = nullptr);

struct GenerationSummary {
    std::size_t accepted = 0;
    std::size_t rejected = 0;
};

/// Records 0..count-1, each from make_stream(cfg.seed, id). Output order and
/// content do not depend on `workers`.
std::vector<DatasetRecord> generate_dataset(const GeneratorConfig& cfg, std::size_t count, int workers = 1,
                                            GenerationSummary* summary = nullptr);

} // namespace fimode
