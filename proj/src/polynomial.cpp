#include "fimode/polynomial.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

#include "fimode/errors.hpp"

namespace fimode {

namespace {

void check_dim(int dim) {
    if (dim < 1 || dim > kMaxDim) {
        throw std::invalid_argument("field dimension must be in [1, 3], got " + std::to_string(dim));
    }
}

std::string format_double(double v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
}

MonomialSum canonical_sum(MonomialSum terms, int dim) {
    for (const auto& t : terms) {
        if (total_degree(t.exponents) > kMaxDegree) {
            throw std::invalid_argument("monomial degree exceeds 3");
        }
        for (int i = dim; i < kMaxDim; ++i) {
            if (t.exponents[static_cast<std::size_t>(i)] != 0) {
                throw std::invalid_argument("monomial uses a variable beyond the field dimension");
            }
        }
        if (!std::isfinite(t.coeff)) {
            throw std::invalid_argument("non-finite coefficient");
        }
    }
    std::stable_sort(terms.begin(), terms.end(), [](const Monomial& a, const Monomial& b) {
        return graded_lex_less(a.exponents, b.exponents);
    });
    MonomialSum merged;
    merged.reserve(terms.size());
    for (const auto& t : terms) {
        if (!merged.empty() && merged.back().exponents == t.exponents) {
            merged.back().coeff += t.coeff;
        } else {
            merged.push_back(t);
        }
    }
    std::erase_if(merged, [](const Monomial& m) { return m.coeff == 0.0; });
    return merged;
}

} // namespace

int total_degree(const Exponents& e) noexcept {
    return int(e[0]) + int(e[1]) + int(e[2]);
}

bool graded_lex_less(const Exponents& a, const Exponents& b) noexcept {
    const int da = total_degree(a);
    const int db = total_degree(b);
    if (da != db) {
        return da < db;
    }
    // Within a degree, x1^3 precedes x1^2 x2 precedes ... precedes x3^3.
    return a > b;
}

std::vector<Exponents> enumerate_monomials(int dim, int max_degree) {
    check_dim(dim);
    if (max_degree < 0 || max_degree > kMaxDegree) {
        throw std::invalid_argument("max_degree must be in [0, 3], got " + std::to_string(max_degree));
    }
    std::vector<Exponents> out;
    const int e1max = max_degree;
    const int e2max = dim >= 2 ? max_degree : 0;
    const int e3max = dim >= 3 ? max_degree : 0;
    for (int a = 0; a <= e1max; ++a) {
        for (int b = 0; b <= e2max; ++b) {
            for (int c = 0; c <= e3max; ++c) {
                if (a + b + c <= max_degree) {
                    out.push_back({std::uint8_t(a), std::uint8_t(b), std::uint8_t(c)});
                }
            }
        }
    }
    std::sort(out.begin(), out.end(), graded_lex_less);
    return out;
}

double eval_monomial(const Exponents& e, const StateVec& x) noexcept {
    double v = 1.0;
    for (int i = 0; i < x.size(); ++i) {
        for (int k = 0; k < e[static_cast<std::size_t>(i)]; ++k) {
            v *= x[i];
        }
    }
    return v;
}

PolynomialVectorField::PolynomialVectorField(int dim)
  : dim_(dim)
  , components_(static_cast<std::size_t>(dim)) {
    check_dim(dim);
}

PolynomialVectorField::PolynomialVectorField(int dim, std::vector<MonomialSum> components)
  : dim_(dim) {
    check_dim(dim);
    if (components.size() != static_cast<std::size_t>(dim)) {
        throw std::invalid_argument("component count must equal the field dimension");
    }
    components_.reserve(components.size());
    for (auto& c : components) {
        components_.push_back(canonical_sum(std::move(c), dim));
    }
}

int PolynomialVectorField::degree() const noexcept {
    int deg = 0;
    for (const auto& c : components_) {
        for (const auto& m : c) {
            deg = std::max(deg, total_degree(m.exponents));
        }
    }
    return deg;
}

bool PolynomialVectorField::is_zero() const noexcept {
    return std::all_of(components_.begin(), components_.end(), [](const MonomialSum& c) { return c.empty(); });
}

StateVec PolynomialVectorField::operator()(const StateVec& x) const {
    if (x.size() != dim_) {
        throw std::invalid_argument("state dimension " + std::to_string(x.size()) + " does not match field dimension " +
                                    std::to_string(dim_));
    }
    // Powers x_i^0..x_i^3.
    double pw[kMaxDim][kMaxDegree + 1];
    for (int i = 0; i < dim_; ++i) {
        pw[i][0] = 1.0;
        for (int k = 1; k <= kMaxDegree; ++k) {
            pw[i][k] = pw[i][k - 1] * x[i];
        }
    }
    StateVec out(dim_);
    for (int d = 0; d < dim_; ++d) {
        double acc = 0.0;
        for (const auto& m : components_[static_cast<std::size_t>(d)]) {
            double term = m.coeff;
            for (int i = 0; i < dim_; ++i) {
                term *= pw[i][m.exponents[static_cast<std::size_t>(i)]];
            }
            acc += term;
        }
        out[d] = acc;
    }
    if (!out.allFinite()) {
        throw NumericOverflow("vector field evaluation is not finite");
    }
    return out;
}

VectorFieldFn PolynomialVectorField::as_function() const {
    return [field = *this](const StateVec& x) { return field(x); };
}

std::string PolynomialVectorField::component_text(int d) const {
    const auto& terms = component(d);
    if (terms.empty()) {
        return "0";
    }
    std::string out;
    for (std::size_t j = 0; j < terms.size(); ++j) {
        if (j) {
            out += " + ";
        }
        out += format_double(terms[j].coeff);
        bool first = true;
        for (int i = 0; i < dim_; ++i) {
            const int e = terms[j].exponents[static_cast<std::size_t>(i)];
            if (e == 0) {
                continue;
            }
            out += first ? " * " : " ";
            first = false;
            out += "x" + std::to_string(i + 1) + "^" + std::to_string(e);
        }
    }
    return out;
}

std::string PolynomialVectorField::to_string() const {
    std::string out;
    for (int d = 0; d < dim_; ++d) {
        out += "dx" + std::to_string(d + 1) + "/dt = " + component_text(d);
        if (d + 1 < dim_) {
            out += "\n";
        }
    }
    return out;
}

PolynomialVectorField& PolynomialVectorField::operator+=(const PolynomialVectorField& other) {
    if (other.dim_ != dim_) {
        throw std::invalid_argument("cannot add fields of different dimension");
    }
    for (std::size_t d = 0; d < components_.size(); ++d) {
        MonomialSum sum = components_[d];
        sum.insert(sum.end(), other.components_[d].begin(), other.components_[d].end());
        components_[d] = canonical_sum(std::move(sum), dim_);
    }
    return *this;
}

PolynomialVectorField& PolynomialVectorField::operator*=(double scale) {
    for (auto& c : components_) {
        for (auto& m : c) {
            m.coeff *= scale;
        }
        std::erase_if(c, [](const Monomial& m) { return m.coeff == 0.0; });
    }
    return *this;
}

PolynomialVectorField operator+(PolynomialVectorField a, const PolynomialVectorField& b) {
    a += b;
    return a;
}

PolynomialVectorField operator*(double scale, PolynomialVectorField f) {
    f *= scale;
    return f;
}

PolynomialVectorField canonicalize(const PolynomialVectorField& field) {
    return PolynomialVectorField(field.dim(), field.components());
}

StateVec eval_field(const PolynomialVectorField& field, const StateVec& x) {
    return field(x);
}

} // namespace fimode
