#include "fimode/nn.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>

namespace fimode::nn {

void Gradients::zero() {
    for (auto& t : tensors) {
        t.setZero();
    }
}

void Gradients::add(const Gradients& other) {
    if (other.tensors.size() != tensors.size()) {
        throw std::invalid_argument("gradient buffers have different layouts");
    }
    for (std::size_t i = 0; i < tensors.size(); ++i) {
        tensors[i] += other.tensors[i];
    }
}

void Gradients::scale(double factor) {
    for (auto& t : tensors) {
        t *= factor;
    }
}

double Gradients::squared_norm() const {
    double s = 0.0;
    for (const auto& t : tensors) {
        s += t.squaredNorm();
    }
    return s;
}

bool Gradients::all_finite() const {
    for (const auto& t : tensors) {
        if (!t.allFinite()) {
            return false;
        }
    }
    return true;
}

ParamId ParameterStore::add(std::string name, Eigen::Index rows, Eigen::Index cols) {
    if (find(name) >= 0) {
        throw std::invalid_argument("duplicate parameter name " + name);
    }
    names_.push_back(std::move(name));
    values_.push_back(Mat::Zero(rows, cols));
    grads_.tensors.push_back(Mat::Zero(rows, cols));
    return static_cast<ParamId>(values_.size() - 1);
}

std::size_t ParameterStore::scalar_count() const noexcept {
    std::size_t n = 0;
    for (const auto& v : values_) {
        n += static_cast<std::size_t>(v.size());
    }
    return n;
}

ParamId ParameterStore::find(const std::string& name) const {
    for (std::size_t i = 0; i < names_.size(); ++i) {
        if (names_[i] == name) {
            return static_cast<ParamId>(i);
        }
    }
    return -1;
}

Gradients ParameterStore::zero_gradients() const {
    Gradients g;
    g.tensors.reserve(values_.size());
    for (const auto& v : values_) {
        g.tensors.push_back(Mat::Zero(v.rows(), v.cols()));
    }
    return g;
}

void linear_forward(const ParameterStore& p, const LinearParams& lin, const Mat& x, Mat& y) {
    const Mat& w = p.value(lin.weight);
    y.noalias() = x * w;
    y.rowwise() += p.value(lin.bias).row(0);
}

void linear_backward(const ParameterStore& p, const LinearParams& lin, const Mat& x, const Mat& dy, Gradients& g,
                     Mat* dx) {
    g.tensors[static_cast<std::size_t>(lin.weight)].noalias() += x.transpose() * dy;
    g.tensors[static_cast<std::size_t>(lin.bias)] += dy.colwise().sum();
    if (dx) {
        dx->noalias() = dy * p.value(lin.weight).transpose();
    }
}

void layer_norm_forward(const ParameterStore& p, const NormParams& ln, const Mat& x, Mat& y, LayerNormCache& cache) {
    const Eigen::Index n = x.rows();
    const double width = static_cast<double>(x.cols());
    cache.normalized.resize(n, x.cols());
    cache.inv_std.resize(n);
    for (Eigen::Index r = 0; r < n; ++r) {
        const double mean = x.row(r).sum() / width;
        const double var = (x.row(r).array() - mean).square().sum() / width;
        const double inv = 1.0 / std::sqrt(var + kLayerNormEps);
        cache.inv_std[r] = inv;
        cache.normalized.row(r) = (x.row(r).array() - mean) * inv;
    }
    const auto gain = p.value(ln.gain).row(0).array();
    const auto bias = p.value(ln.bias).row(0).array();
    y.resize(n, x.cols());
    for (Eigen::Index r = 0; r < n; ++r) {
        y.row(r) = cache.normalized.row(r).array() * gain + bias;
    }
}

void layer_norm_backward(const ParameterStore& p, const NormParams& ln, const LayerNormCache& cache, const Mat& dy,
                         Gradients& g, Mat& dx) {
    const Eigen::Index n = dy.rows();
    const double width = static_cast<double>(dy.cols());
    g.tensors[static_cast<std::size_t>(ln.gain)] += (dy.array() * cache.normalized.array()).colwise().sum().matrix();
    g.tensors[static_cast<std::size_t>(ln.bias)] += dy.colwise().sum();
    const auto gain = p.value(ln.gain).row(0).array();
    dx.resize(n, dy.cols());
    for (Eigen::Index r = 0; r < n; ++r) {
        const Eigen::ArrayXXd dxhat = dy.row(r).array() * gain;
        const double mean_d = dxhat.sum() / width;
        const double mean_dx = (dxhat * cache.normalized.row(r).array()).sum() / width;
        dx.row(r) = cache.inv_std[r] * (dxhat - mean_d - cache.normalized.row(r).array() * mean_dx);
    }
}

namespace {
constexpr double kGeluK = 0.7978845608028654; // sqrt(2/pi)
constexpr double kGeluC = 0.044715;
} // namespace

double gelu(double x) noexcept {
    return 0.5 * x * (1.0 + std::tanh(kGeluK * (x + kGeluC * x * x * x)));
}

double gelu_grad(double x) noexcept {
    const double t = std::tanh(kGeluK * (x + kGeluC * x * x * x));
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * kGeluK * (1.0 + 3.0 * kGeluC * x * x);
}

void gelu_forward(const Mat& z, Mat& a) {
    a = z.unaryExpr([](double v) { return gelu(v); });
}

void gelu_backward(const Mat& z, const Mat& da, Mat& dz) {
    dz = da.cwiseProduct(z.unaryExpr([](double v) { return gelu_grad(v); }));
}

namespace {

void masked_softmax_rows(Mat& s, const std::vector<char>& key_valid) {
    const bool all_valid = key_valid.empty();
    for (Eigen::Index r = 0; r < s.rows(); ++r) {
        double mx = -std::numeric_limits<double>::infinity();
        for (Eigen::Index c = 0; c < s.cols(); ++c) {
            if (all_valid || key_valid[static_cast<std::size_t>(c)]) {
                mx = std::max(mx, s(r, c));
            }
        }
        double sum = 0.0;
        for (Eigen::Index c = 0; c < s.cols(); ++c) {
            if (all_valid || key_valid[static_cast<std::size_t>(c)]) {
                const double e = std::exp(s(r, c) - mx);
                s(r, c) = e;
                sum += e;
            } else {
                s(r, c) = 0.0;
            }
        }
        s.row(r) /= sum;
    }
}

} // namespace

void attention_forward(const ParameterStore& p, const AttentionParams& att, int n_heads, const Mat& xq,
                       const Mat& xkv, const std::vector<char>& key_valid, Mat& y, AttentionCache& cache) {
    if (!key_valid.empty()) {
        if (key_valid.size() != static_cast<std::size_t>(xkv.rows())) {
            throw std::invalid_argument("key mask length does not match key count");
        }
        bool any = false;
        for (char v : key_valid) {
            any = any || v;
        }
        if (!any) {
            throw std::invalid_argument("attention needs at least one valid key");
        }
    }
    linear_forward(p, att.query, xq, cache.q);
    linear_forward(p, att.key, xkv, cache.k);
    linear_forward(p, att.value, xkv, cache.v);
    const Eigen::Index width = cache.q.cols();
    const Eigen::Index dh = width / n_heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    cache.weights.resize(static_cast<std::size_t>(n_heads));
    cache.heads.resize(xq.rows(), width);
    for (int h = 0; h < n_heads; ++h) {
        Mat& w = cache.weights[static_cast<std::size_t>(h)];
        w.noalias() = cache.q.middleCols(h * dh, dh) * cache.k.middleCols(h * dh, dh).transpose();
        w *= scale;
        masked_softmax_rows(w, key_valid);
        cache.heads.middleCols(h * dh, dh).noalias() = w * cache.v.middleCols(h * dh, dh);
    }
    linear_forward(p, att.output, cache.heads, y);
}

void attention_backward(const ParameterStore& p, const AttentionParams& att, int n_heads, const Mat& xq,
                        const Mat& xkv, const AttentionCache& cache, const Mat& dy, Gradients& g, Mat& dxq,
                        Mat& dxkv) {
    Mat dheads;
    linear_backward(p, att.output, cache.heads, dy, g, &dheads);
    const Eigen::Index width = cache.q.cols();
    const Eigen::Index dh = width / n_heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    Mat dq(cache.q.rows(), width);
    Mat dk(cache.k.rows(), width);
    Mat dv(cache.v.rows(), width);
    Mat da;
    for (int h = 0; h < n_heads; ++h) {
        const Mat& w = cache.weights[static_cast<std::size_t>(h)];
        const auto dhead = dheads.middleCols(h * dh, dh);
        da.noalias() = dhead * cache.v.middleCols(h * dh, dh).transpose();
        dv.middleCols(h * dh, dh).noalias() = w.transpose() * dhead;
        // Softmax adjoint: dS = W .* (dA - rowsum(W .* dA)).
        const Eigen::VectorXd inner = (w.array() * da.array()).rowwise().sum();
        Mat ds = w.array() * (da.array().colwise() - inner.array());
        ds *= scale;
        dq.middleCols(h * dh, dh).noalias() = ds * cache.k.middleCols(h * dh, dh);
        dk.middleCols(h * dh, dh).noalias() = ds.transpose() * cache.q.middleCols(h * dh, dh);
    }
    linear_backward(p, att.query, xq, dq, g, &dxq);
    Mat dx_value;
    linear_backward(p, att.key, xkv, dk, g, &dxkv);
    linear_backward(p, att.value, xkv, dv, g, &dx_value);
    dxkv += dx_value;
}

Mat dropout_mask(Eigen::Index rows, Eigen::Index cols, double rate, Rng& rng) {
    Mat m(rows, cols);
    std::bernoulli_distribution keep(1.0 - rate);
    const double fill = 1.0 / (1.0 - rate);
    for (Eigen::Index c = 0; c < cols; ++c) {
        for (Eigen::Index r = 0; r < rows; ++r) {
            m(r, c) = keep(rng) ? fill : 0.0;
        }
    }
    return m;
}

} // namespace fimode::nn
