#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include <Eigen/Core>

namespace fimode {

inline constexpr int kMaxDim = 3;
inline constexpr int kMaxDegree = 3;

/// State vector of a system with at most kMaxDim components. Stack allocated.
using StateVec = Eigen::Matrix<double, Eigen::Dynamic, 1, Eigen::ColMajor, kMaxDim, 1>;

/// Autonomous vector field x -> f(x) as used by the integrator and estimators.
using VectorFieldFn = std::function<StateVec(const StateVec&)>;

/// Exponent tuple of a monomial. Entries beyond the field dimension are zero.
using Exponents = std::array<std::uint8_t, kMaxDim>;

int total_degree(const Exponents& e) noexcept;

/// Graded-lexicographic comparison: lower total degree first, then
/// descending exponent of x1, x2, x3.
bool graded_lex_less(const Exponents& a, const Exponents& b) noexcept;

/// All exponent tuples of total degree <= max_degree in `dim` variables, in
/// graded-lex order. Size is C(dim + max_degree, max_degree).
std::vector<Exponents> enumerate_monomials(int dim, int max_degree);

struct Monomial {
    double coeff = 0.0;
    Exponents exponents{};

    friend bool operator==(const Monomial&, const Monomial&) = default;
};

using MonomialSum = std::vector<Monomial>;

/// Polynomial vector field f: R^D -> R^D with D <= 3 and degree <= 3.
///
/// Construction validates degrees and dimensions and stores the canonical
/// form: duplicate exponent tuples merged, zero coefficients dropped, terms
/// in graded-lex order. Two fields describing the same polynomial compare
/// equal.
class PolynomialVectorField {
  public:
    PolynomialVectorField() = default;

    /// Zero field of the given dimension.
    explicit PolynomialVectorField(int dim);

    PolynomialVectorField(int dim, std::vector<MonomialSum> components);

    int dim() const noexcept { return dim_; }
    const std::vector<MonomialSum>& components() const noexcept { return components_; }
    const MonomialSum& component(int d) const { return components_.at(static_cast<std::size_t>(d)); }

    /// Highest total degree over all terms (0 for the zero field).
    int degree() const noexcept;

    bool is_zero() const noexcept;

    /// Throws std::invalid_argument on dimension mismatch and NumericOverflow
    /// when the result is not finite.
    StateVec operator()(const StateVec& x) const;

    VectorFieldFn as_function() const;

    /// Canonical text form, one string per component, e.g.
    /// "-1 * x1^1 + 0.5 * x1^1 x2^2".
    std::string component_text(int d) const;
    std::string to_string() const;

    PolynomialVectorField& operator+=(const PolynomialVectorField& other);
    PolynomialVectorField& operator*=(double scale);

    friend bool operator==(const PolynomialVectorField&, const PolynomialVectorField&) = default;

  private:
    int dim_ = 0;
    std::vector<MonomialSum> components_;
};

PolynomialVectorField operator+(PolynomialVectorField a, const PolynomialVectorField& b);
PolynomialVectorField operator*(double scale, PolynomialVectorField f);

/// Returns the canonical form of `field`. Idempotent.
PolynomialVectorField canonicalize(const PolynomialVectorField& field);

/// Free-function spelling of field(x).
StateVec eval_field(const PolynomialVectorField& field, const StateVec& x);

/// Value of the monomial at x (x may be shorter than 3; missing entries must
/// carry zero exponents).
double eval_monomial(const Exponents& e, const StateVec& x) noexcept;

} // namespace fimode
