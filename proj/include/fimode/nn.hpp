#pragma once

#include <string>
#include <vector>

#include <Eigen/Core>

#include "fimode/datagen.hpp"

// Layer primitives with explicit forward caches and hand-derived adjoints.
// Activations are row-major in the logical sense: one row per token/query.

namespace fimode::nn {

using Mat = Eigen::MatrixXd;
using ParamId = int;

/// Gradient buffers shaped like a ModelParameters instance.
struct Gradients {
    std::vector<Mat> tensors;

    void zero();
    void add(const Gradients& other);
    void scale(double factor);
    double squared_norm() const;
    bool all_finite() const;
};

/// Named parameter tensors with paired gradient accumulators.
class ParameterStore {
  public:
    ParamId add(std::string name, Eigen::Index rows, Eigen::Index cols);

    std::size_t size() const noexcept { return values_.size(); }
    std::size_t scalar_count() const noexcept;
    const std::string& name(ParamId id) const { return names_.at(static_cast<std::size_t>(id)); }
    Mat& value(ParamId id) { return values_[static_cast<std::size_t>(id)]; }
    const Mat& value(ParamId id) const { return values_[static_cast<std::size_t>(id)]; }
    /// -1 when absent.
    ParamId find(const std::string& name) const;

    Gradients& grad() noexcept { return grads_; }
    const Gradients& grad() const noexcept { return grads_; }
    Gradients zero_gradients() const;

  private:
    std::vector<std::string> names_;
    std::vector<Mat> values_;
    Gradients grads_;
};

struct LinearParams {
    ParamId weight = -1; // in x out
    ParamId bias = -1;   // 1 x out
};

struct NormParams {
    ParamId gain = -1;
    ParamId bias = -1;
};

struct AttentionParams {
    LinearParams query, key, value, output;
};

void linear_forward(const ParameterStore& p, const LinearParams& lin, const Mat& x, Mat& y);
void linear_backward(const ParameterStore& p, const LinearParams& lin, const Mat& x, const Mat& dy, Gradients& g,
                     Mat* dx);

struct LayerNormCache {
    Mat normalized;
    Eigen::VectorXd inv_std;
};

inline constexpr double kLayerNormEps = 1e-5;

void layer_norm_forward(const ParameterStore& p, const NormParams& ln, const Mat& x, Mat& y, LayerNormCache& cache);
void layer_norm_backward(const ParameterStore& p, const NormParams& ln, const LayerNormCache& cache, const Mat& dy,
                         Gradients& g, Mat& dx);

/// tanh approximation of GELU.
double gelu(double x) noexcept;
double gelu_grad(double x) noexcept;
void gelu_forward(const Mat& z, Mat& a);
void gelu_backward(const Mat& z, const Mat& da, Mat& dz);

struct AttentionCache {
    Mat q, k, v;              // projected inputs
    std::vector<Mat> weights; // per head: queries x keys softmax weights
    Mat heads;                // concatenated head outputs, queries x E
};

/// Multi-head attention of `xq` (queries) over `xkv` (keys and values).
/// Keys with key_valid[j] == 0 receive zero weight; an empty key_valid
/// means all keys are valid.
void attention_forward(const ParameterStore& p, const AttentionParams& att, int n_heads, const Mat& xq,
                       const Mat& xkv, const std::vector<char>& key_valid, Mat& y, AttentionCache& cache);

/// Accumulates parameter gradients and writes input gradients. For
/// self-attention pass the same matrix as xq and xkv and add dxq + dxkv.
void attention_backward(const ParameterStore& p, const AttentionParams& att, int n_heads, const Mat& xq,
                        const Mat& xkv, const AttentionCache& cache, const Mat& dy, Gradients& g, Mat& dxq,
                        Mat& dxkv);

/// Inverted dropout mask (entries 0 or 1/(1-rate)).
Mat dropout_mask(Eigen::Index rows, Eigen::Index cols, double rate, Rng& rng);

} // namespace fimode::nn
