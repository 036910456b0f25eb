#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "fimode/polynomial.hpp"

namespace fimode {

struct QuiverRegion {
    double x_min = -1.0;
    double x_max = 1.0;
    double y_min = -1.0;
    double y_max = 1.0;
};

struct QuiverOptions {
    int grid_n = 20;
    int dim = 2;               // 2, or 3 with the third coordinate fixed
    double third_coord = 0.0;
    std::vector<Eigen::MatrixXd> overlays; // polylines, columns 0 and 1 are used
    std::string title;
    std::string label_a = "estimate";
    std::string label_b = "truth";
};

/// Smallest box around the overlays with a 10% margin.
QuiverRegion region_around(const std::vector<Eigen::MatrixXd>& overlays);

/// Writes `base`.csv with columns x,y,u_a,v_a,u_b,v_b (grid_n^2 rows, x
/// varying fastest) and `base`.svg drawing both fields as arrows with the
/// overlays on top. Throws std::invalid_argument for dim < 2.
void export_quiver(const VectorFieldFn& field_a, const VectorFieldFn& field_b, const QuiverRegion& region,
                   const QuiverOptions& options, const std::filesystem::path& base);

} // namespace fimode
