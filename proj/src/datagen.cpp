#include "fimode/datagen.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>

#include "fimode/errors.hpp"
#include "fimode/parallel.hpp"

namespace fimode {

Rng make_stream(std::uint64_t seed, std::uint64_t index) {
    const std::uint64_t mixed = seed ^ index;
    std::seed_seq seq{static_cast<std::uint32_t>(mixed), static_cast<std::uint32_t>(mixed >> 32),
                      static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(index >> 32)};
    return Rng(seq);
}

void GeneratorConfig::validate() const {
    double total = 0.0;
    for (double w : dim_weights) {
        if (!(w >= 0.0)) {
            throw std::invalid_argument("dim_weights must be non-negative");
        }
        total += w;
    }
    if (std::abs(total - 1.0) > 1e-9) {
        throw std::invalid_argument("dim_weights must sum to 1");
    }
    if (max_terms_per_component < 1) {
        throw std::invalid_argument("max_terms_per_component must be >= 1");
    }
    if (!(coeff_scale > 0.0)) {
        throw std::invalid_argument("coeff_scale must be positive");
    }
    if (observations_per_series < 2) {
        throw std::invalid_argument("L must be >= 2");
    }
    if (context_series < 1) {
        throw std::invalid_argument("K must be >= 1");
    }
    if (holdout_series < 0) {
        throw std::invalid_argument("H must be >= 0");
    }
    if (!(horizon > 0.0)) {
        throw std::invalid_argument("horizon must be positive");
    }
    if (!(noise_level >= 0.0)) {
        throw std::invalid_argument("noise_level must be >= 0");
    }
    if (!(init_state_std >= 0.0)) {
        throw std::invalid_argument("init_state_std must be >= 0");
    }
    if (max_rejections < 1) {
        throw std::invalid_argument("max_rejections must be >= 1");
    }
    solver.validate();
}

PolynomialVectorField sample_field(Rng& rng, const GeneratorConfig& cfg) {
    std::discrete_distribution<int> pick_dim(cfg.dim_weights.begin(), cfg.dim_weights.end());
    const int dim = pick_dim(rng) + 1;
    std::vector<Exponents> basis = enumerate_monomials(dim, kMaxDegree);
    const int max_terms = std::min<int>(cfg.max_terms_per_component, static_cast<int>(basis.size()));
    std::uniform_int_distribution<int> pick_count(1, max_terms);
    std::normal_distribution<double> unit(0.0, 1.0);

    std::vector<MonomialSum> components(static_cast<std::size_t>(dim));
    for (auto& comp : components) {
        const int n = pick_count(rng);
        // Partial Fisher-Yates: the first n entries become a uniform subset.
        std::vector<Exponents> pool = basis;
        for (int j = 0; j < n; ++j) {
            std::uniform_int_distribution<std::size_t> pick(static_cast<std::size_t>(j), pool.size() - 1);
            std::swap(pool[static_cast<std::size_t>(j)], pool[pick(rng)]);
            comp.push_back({cfg.coeff_scale * unit(rng), pool[static_cast<std::size_t>(j)]});
        }
    }
    return PolynomialVectorField(dim, std::move(components));
}

TimeGrid sample_grid(Rng& rng, const GeneratorConfig& cfg) {
    const int count = cfg.observations_per_series;
    const double horizon = cfg.horizon;
    if (count < 2 || !(horizon > 0.0)) {
        throw std::invalid_argument("grid needs L >= 2 and T > 0");
    }
    if (cfg.grid_mode == GridMode::Regular) {
        return TimeGrid::regular(count, horizon);
    }
    const double min_gap = horizon / (10.0 * count);
    std::uniform_real_distribution<double> uniform(0.0, horizon);
    std::vector<double> t(static_cast<std::size_t>(count));
    for (auto& v : t) {
        v = uniform(rng);
    }
    constexpr int kRedrawBudget = 10000;
    for (int round = 0; round < kRedrawBudget; ++round) {
        std::sort(t.begin(), t.end());
        bool ok = true;
        for (std::size_t i = 1; i < t.size(); ++i) {
            if (t[i] - t[i - 1] < min_gap) {
                t[i] = uniform(rng);
                ok = false;
            }
        }
        if (ok) {
            return TimeGrid(std::move(t));
        }
    }
    throw GenerationFailure("irregular grid: minimum separation not reached within the redraw budget");
}

Series corrupt(const Trajectory& traj, double noise_level, Rng& rng) {
    if (!traj.complete()) {
        throw std::invalid_argument("cannot corrupt a diverged trajectory");
    }
    Series out{traj.grid, traj.states};
    if (noise_level == 0.0) {
        return out;
    }
    std::normal_distribution<double> unit(0.0, 1.0);
    const Eigen::Index n = traj.states.rows();
    for (Eigen::Index d = 0; d < traj.states.cols(); ++d) {
        const auto col = traj.states.col(d);
        const double mean = col.mean();
        const double sd = std::sqrt((col.array() - mean).square().sum() / static_cast<double>(n));
        if (sd == 0.0) {
            continue;
        }
        for (Eigen::Index r = 0; r < n; ++r) {
            out.values(r, d) += noise_level * sd * unit(rng);
        }
    }
    return out;
}

namespace {

bool acceptable(const Trajectory& tr, double threshold) {
    return tr.complete() && tr.states.allFinite() && tr.states.cwiseAbs().maxCoeff() <= threshold;
}

} // namespace

DatasetRecord generate_record(Rng& rng, const GeneratorConfig& cfg, std::uint64_t id, int* rejections) {
    cfg.validate();
    std::normal_distribution<double> unit(0.0, 1.0);
    const int total = cfg.context_series + cfg.holdout_series;
    for (int attempt = 0; attempt < cfg.max_rejections; ++attempt) {
        PolynomialVectorField field = sample_field(rng, cfg);
        const VectorFieldFn fn = field.as_function();
        std::vector<StateVec> starts;
        for (int k = 0; k < total; ++k) {
            StateVec x0(field.dim());
            for (int d = 0; d < field.dim(); ++d) {
                x0[d] = cfg.init_state_std * unit(rng);
            }
            starts.push_back(x0);
        }
        std::vector<Trajectory> trajs;
        bool ok = true;
        for (int k = 0; k < total && ok; ++k) {
            const TimeGrid grid = sample_grid(rng, cfg);
            try {
                trajs.push_back(integrate(fn, starts[static_cast<std::size_t>(k)], grid, cfg.solver));
            } catch (const SolverFailure&) {
                ok = false;
                break;
            }
            ok = acceptable(trajs.back(), cfg.solver.divergence_threshold);
        }
        if (!ok) {
            continue;
        }
        DatasetRecord rec;
        rec.id = id;
        rec.field = std::move(field);
        rec.config = cfg;
        rec.observations.dim = rec.field.dim();
        for (int k = 0; k < total; ++k) {
            auto& tr = trajs[static_cast<std::size_t>(k)];
            if (k < cfg.context_series) {
                rec.observations.series.push_back(corrupt(tr, cfg.noise_level, rng));
                rec.clean.push_back(std::move(tr));
            } else {
                rec.holdout.push_back(std::move(tr));
            }
        }
        if (rejections) {
            *rejections = attempt;
        }
        return rec;
    }
    throw GenerationFailure("record " + std::to_string(id) + ": no acceptable system within " +
                            std::to_string(cfg.max_rejections) + " draws");
}

std::vector<DatasetRecord> generate_dataset(const GeneratorConfig& cfg, std::size_t count, int workers,
                                            GenerationSummary* summary) {
    cfg.validate();
    std::vector<DatasetRecord> records(count);
    std::vector<int> rejected(count, 0);
    parallel_for(count, workers, [&](std::size_t i) {
        Rng rng = make_stream(cfg.seed, i);
        records[i] = generate_record(rng, cfg, i, &rejected[i]);
    });
    if (summary) {
        summary->accepted = count;
        summary->rejected = static_cast<std::size_t>(std::accumulate(rejected.begin(), rejected.end(), 0L));
    }
    return records;
}

} // namespace fimode
