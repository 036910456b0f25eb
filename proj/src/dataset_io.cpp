#include "fimode/dataset_io.hpp"

#include <fstream>
#include <istream>
#include <ostream>
#include <string>

#include "fimode/config.hpp"
#include "fimode/errors.hpp"

namespace fimode {

namespace {

Json field_json(const PolynomialVectorField& f) {
    Json comps = Json::array();
    for (int d = 0; d < f.dim(); ++d) {
        Json terms = Json::array();
        for (const auto& m : f.component(d)) {
            terms.push_back({m.coeff, {m.exponents[0], m.exponents[1], m.exponents[2]}});
        }
        comps.push_back(std::move(terms));
    }
    return comps;
}

Json series_json(const TimeGrid& grid, const Eigen::MatrixXd& values) {
    Json states = Json::array();
    for (Eigen::Index r = 0; r < values.rows(); ++r) {
        Json row = Json::array();
        for (Eigen::Index c = 0; c < values.cols(); ++c) {
            row.push_back(values(r, c));
        }
        states.push_back(std::move(row));
    }
    return {{"times", grid.times()}, {"states", std::move(states)}};
}

Json record_json(const DatasetRecord& rec) {
    Json context = Json::array();
    for (const auto& s : rec.observations.series) {
        context.push_back(series_json(s.grid, s.values));
    }
    Json clean = Json::array();
    for (const auto& t : rec.clean) {
        clean.push_back(series_json(t.grid, t.states));
    }
    Json holdout = Json::array();
    for (const auto& t : rec.holdout) {
        holdout.push_back(series_json(t.grid, t.states));
    }
    return {{"id", rec.id},
            {"dim", rec.field.dim()},
            {"field", field_json(rec.field)},
            {"context", std::move(context)},
            {"clean", std::move(clean)},
            {"holdout", std::move(holdout)},
            {"config", to_json(rec.config)}};
}

PolynomialVectorField parse_field(const Json& j, int dim) {
    if (!j.is_array() || static_cast<int>(j.size()) != dim) {
        throw std::invalid_argument("field must list one term array per dimension");
    }
    std::vector<MonomialSum> comps;
    for (const auto& terms : j) {
        MonomialSum sum;
        for (const auto& t : terms) {
            const auto exps = t.at(1).get<std::vector<int>>();
            if (exps.size() != 3) {
                throw std::invalid_argument("exponent vectors must have 3 entries");
            }
            Exponents e{};
            for (std::size_t i = 0; i < 3; ++i) {
                if (exps[i] < 0 || exps[i] > kMaxDegree) {
                    throw std::invalid_argument("exponent out of range");
                }
                e[i] = static_cast<std::uint8_t>(exps[i]);
            }
            sum.push_back({t.at(0).get<double>(), e});
        }
        comps.push_back(std::move(sum));
    }
    return PolynomialVectorField(dim, std::move(comps));
}

std::pair<TimeGrid, Eigen::MatrixXd> parse_series(const Json& j, int dim) {
    TimeGrid grid(j.at("times").get<std::vector<double>>());
    const Json& states = j.at("states");
    if (!states.is_array() || states.size() > grid.size() || states.empty()) {
        throw std::invalid_argument("states do not match times");
    }
    Eigen::MatrixXd values(static_cast<Eigen::Index>(states.size()), dim);
    for (std::size_t r = 0; r < states.size(); ++r) {
        const auto row = states[r].get<std::vector<double>>();
        if (static_cast<int>(row.size()) != dim) {
            throw std::invalid_argument("state row has the wrong dimension");
        }
        for (int c = 0; c < dim; ++c) {
            values(static_cast<Eigen::Index>(r), c) = row[static_cast<std::size_t>(c)];
        }
    }
    return {std::move(grid), std::move(values)};
}

std::vector<Trajectory> parse_trajectories(const Json& j, int dim) {
    std::vector<Trajectory> out;
    for (const auto& s : j) {
        auto [grid, values] = parse_series(s, dim);
        Trajectory t;
        t.diverged = values.rows() != static_cast<Eigen::Index>(grid.size());
        t.grid = std::move(grid);
        t.states = std::move(values);
        out.push_back(std::move(t));
    }
    return out;
}

DatasetRecord parse_record(const Json& j) {
    DatasetRecord rec;
    rec.id = j.at("id").get<std::uint64_t>();
    const int dim = j.at("dim").get<int>();
    if (dim < 1 || dim > kMaxDim) {
        throw std::invalid_argument("dim must be in [1, 3]");
    }
    rec.field = parse_field(j.at("field"), dim);
    rec.observations.dim = dim;
    for (const auto& s : j.at("context")) {
        auto [grid, values] = parse_series(s, dim);
        if (values.rows() != static_cast<Eigen::Index>(grid.size())) {
            throw std::invalid_argument("context series must have one state per time");
        }
        rec.observations.series.push_back({std::move(grid), std::move(values)});
    }
    rec.observations.validate();
    rec.clean = parse_trajectories(j.at("clean"), dim);
    rec.holdout = parse_trajectories(j.at("holdout"), dim);
    rec.config = generator_from_json(j.at("config"), "config");
    return rec;
}

} // namespace

void write_records(std::ostream& out, const std::vector<DatasetRecord>& records) {
    for (const auto& rec : records) {
        out << record_json(rec).dump() << '\n';
    }
}

void write_dataset(const std::filesystem::path& path, const std::vector<DatasetRecord>& records) {
    if (path.has_parent_path()) {
        std::filesystem::create_directories(path.parent_path());
    }
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw std::runtime_error("cannot open " + path.string() + " for writing");
    }
    write_records(out, records);
    if (!out.flush()) {
        throw std::runtime_error("write to " + path.string() + " failed");
    }
}

std::vector<DatasetRecord> read_records(std::istream& in) {
    std::vector<DatasetRecord> out;
    std::string line;
    std::size_t number = 0;
    while (std::getline(in, line)) {
        ++number;
        if (line.find_first_not_of(" \t\r") == std::string::npos) {
            continue;
        }
        try {
            out.push_back(parse_record(Json::parse(line)));
        } catch (const Json::exception& e) {
            throw ParseError(number, e.what());
        } catch (const std::invalid_argument& e) {
            throw ParseError(number, e.what());
        }
    }
    return out;
}

std::vector<DatasetRecord> read_dataset(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw std::runtime_error("cannot open dataset " + path.string());
    }
    return read_records(in);
}

} // namespace fimode
