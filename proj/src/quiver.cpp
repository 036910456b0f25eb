#include "fimode/quiver.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>

namespace fimode {

namespace {

struct Sample {
    double x, y, ua, va, ub, vb;
};

std::string number(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

std::string short_number(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2f", v);
    return buf;
}

std::string escape(const std::string& s) {
    std::string out;
    for (char c : s) {
        switch (c) {
        case '<': out += "&lt;"; break;
        case '>': out += "&gt;"; break;
        case '&': out += "&amp;"; break;
        default: out += c;
        }
    }
    return out;
}

std::ofstream open_or_throw(const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw std::runtime_error("cannot open " + path.string() + " for writing");
    }
    return out;
}

} // namespace

QuiverRegion region_around(const std::vector<Eigen::MatrixXd>& overlays) {
    double x0 = INFINITY, x1 = -INFINITY, y0 = INFINITY, y1 = -INFINITY;
    for (const auto& m : overlays) {
        if (m.rows() == 0 || m.cols() < 2) {
            continue;
        }
        x0 = std::min(x0, m.col(0).minCoeff());
        x1 = std::max(x1, m.col(0).maxCoeff());
        y0 = std::min(y0, m.col(1).minCoeff());
        y1 = std::max(y1, m.col(1).maxCoeff());
    }
    if (!std::isfinite(x0)) {
        return {};
    }
    const double mx = std::max(0.1 * (x1 - x0), 1e-3);
    const double my = std::max(0.1 * (y1 - y0), 1e-3);
    return {x0 - mx, x1 + mx, y0 - my, y1 + my};
}

void export_quiver(const VectorFieldFn& field_a, const VectorFieldFn& field_b, const QuiverRegion& region,
                   const QuiverOptions& options, const std::filesystem::path& base) {
    if (options.dim < 2 || options.dim > 3) {
        throw std::invalid_argument("quiver requires D≥2");
    }
    if (options.grid_n < 2) {
        throw std::invalid_argument("grid_n must be at least 2");
    }
    if (!(region.x_max > region.x_min) || !(region.y_max > region.y_min)) {
        throw std::invalid_argument("empty quiver region");
    }

    const int n = options.grid_n;
    std::vector<Sample> samples;
    samples.reserve(static_cast<std::size_t>(n * n));
    double longest = 0.0;
    for (int j = 0; j < n; ++j) {
        for (int i = 0; i < n; ++i) {
            StateVec x(options.dim);
            x[0] = region.x_min + (region.x_max - region.x_min) * i / (n - 1);
            x[1] = region.y_min + (region.y_max - region.y_min) * j / (n - 1);
            if (options.dim == 3) {
                x[2] = options.third_coord;
            }
            const StateVec a = field_a(x);
            const StateVec b = field_b(x);
            samples.push_back({x[0], x[1], a[0], a[1], b[0], b[1]});
            for (double len : {std::hypot(a[0], a[1]), std::hypot(b[0], b[1])}) {
                if (std::isfinite(len)) {
                    longest = std::max(longest, len);
                }
            }
        }
    }

    if (base.has_parent_path()) {
        std::filesystem::create_directories(base.parent_path());
    }
    auto csv_path = base;
    csv_path += ".csv";
    auto csv = open_or_throw(csv_path);
    csv << "x,y,u_a,v_a,u_b,v_b\n";
    for (const auto& s : samples) {
        csv << number(s.x) << ',' << number(s.y) << ',' << number(s.ua) << ',' << number(s.va) << ','
            << number(s.ub) << ',' << number(s.vb) << '\n';
    }
    if (!csv.flush()) {
        throw std::runtime_error("write to " + csv_path.string() + " failed");
    }

    // Plot coordinates: 600 x 600 drawing area with a 40 px margin.
    constexpr double size = 600.0, margin = 40.0;
    const auto px = [&](double x) { return margin + (x - region.x_min) / (region.x_max - region.x_min) * size; };
    const auto py = [&](double y) { return margin + (region.y_max - y) / (region.y_max - region.y_min) * size; };
    const double cell = size / (n - 1);
    const double arrow_scale = longest > 0.0 ? 0.9 * cell / longest : 0.0;

    auto svg_path = base;
    svg_path += ".svg";
    auto svg = open_or_throw(svg_path);
    const double total = size + 2 * margin;
    svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << total << "\" height=\"" << total + 20
        << "\" viewBox=\"0 0 " << total << ' ' << total + 20 << "\">\n";
    svg << "<defs>\n";
    for (const auto& [id, color] : {std::pair{"a", "#d62728"}, std::pair{"b", "#1f77b4"}}) {
        svg << "<marker id=\"head_" << id << "\" markerWidth=\"6\" markerHeight=\"6\" refX=\"5\" refY=\"3\" "
            << "orient=\"auto\"><path d=\"M0,0 L6,3 L0,6 z\" fill=\"" << color << "\"/></marker>\n";
    }
    svg << "</defs>\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    svg << "<rect x=\"" << margin << "\" y=\"" << margin << "\" width=\"" << size << "\" height=\"" << size
        << "\" fill=\"none\" stroke=\"#888\"/>\n";
    if (!options.title.empty()) {
        svg << "<text x=\"" << margin << "\" y=\"24\" font-family=\"sans-serif\" font-size=\"16\">"
            << escape(options.title) << "</text>\n";
    }
    svg << "<text x=\"" << margin << "\" y=\"" << total - 12 << "\" font-family=\"sans-serif\" font-size=\"12\">x: "
        << short_number(region.x_min) << " .. " << short_number(region.x_max) << ", y: " << short_number(region.y_min)
        << " .. " << short_number(region.y_max) << "</text>\n";
    svg << "<text x=\"" << margin << "\" y=\"" << total + 8
        << "\" font-family=\"sans-serif\" font-size=\"12\"><tspan fill=\"#d62728\">" << escape(options.label_a)
        << "</tspan>  <tspan fill=\"#1f77b4\">" << escape(options.label_b) << "</tspan></text>\n";

    const auto arrows = [&](bool first, const char* id, const char* color) {
        svg << "<g stroke=\"" << color << "\" stroke-width=\"1.2\">\n";
        for (const auto& s : samples) {
            const double u = first ? s.ua : s.ub;
            const double v = first ? s.va : s.vb;
            if (!std::isfinite(u) || !std::isfinite(v) || (u == 0.0 && v == 0.0)) {
                continue;
            }
            const double x0 = px(s.x), y0 = py(s.y);
            svg << "<line x1=\"" << short_number(x0) << "\" y1=\"" << short_number(y0) << "\" x2=\""
                << short_number(x0 + u * arrow_scale) << "\" y2=\"" << short_number(y0 - v * arrow_scale)
                << "\" marker-end=\"url(#head_" << id << ")\"/>\n";
        }
        svg << "</g>\n";
    };
    arrows(false, "b", "#1f77b4");
    arrows(true, "a", "#d62728");

    for (const auto& m : options.overlays) {
        if (m.rows() < 2 || m.cols() < 2) {
            continue;
        }
        svg << "<polyline fill=\"none\" stroke=\"black\" stroke-width=\"1.5\" points=\"";
        for (Eigen::Index r = 0; r < m.rows(); ++r) {
            svg << short_number(px(m(r, 0))) << ',' << short_number(py(m(r, 1))) << ' ';
        }
        svg << "\"/>\n";
    }
    svg << "</svg>\n";
    if (!svg.flush()) {
        throw std::runtime_error("write to " + svg_path.string() + " failed");
    }
}

} // namespace fimode
