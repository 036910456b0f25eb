#include "fimode/model.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>

#include "fimode/errors.hpp"

namespace fimode {

using nn::Mat;

void ModelConfig::validate() const {
    if (embed_width < 1 || n_encoder_layers < 1 || n_combiner_layers < 1 || n_heads < 1 || ff_width < 1) {
        throw std::invalid_argument("model sizes must be >= 1");
    }
    if (embed_width % n_heads != 0) {
        throw std::invalid_argument("embed_width must be divisible by n_heads");
    }
    if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) {
        throw std::invalid_argument("dropout_rate must be in [0, 1)");
    }
}

TokenBatch tokenize(const ObservationSet& normalized) {
    normalized.validate();
    Eigen::Index count = 0;
    for (const auto& s : normalized.series) {
        if (s.length() < 2) {
            throw std::invalid_argument("every series needs at least two observations");
        }
        count += static_cast<Eigen::Index>(s.length()) - 1;
    }
    TokenBatch out;
    out.dim = normalized.dim;
    out.features = Mat::Zero(count, kTokenFeatures);
    out.valid.assign(static_cast<std::size_t>(count), 1);
    Eigen::Index row = 0;
    for (const auto& s : normalized.series) {
        for (Eigen::Index l = 0; l + 1 < static_cast<Eigen::Index>(s.length()); ++l, ++row) {
            out.features(row, token::kTime) = s.grid[static_cast<std::size_t>(l)];
            out.features(row, token::kStep) =
                s.grid[static_cast<std::size_t>(l + 1)] - s.grid[static_cast<std::size_t>(l)];
            for (int d = 0; d < normalized.dim; ++d) {
                out.features(row, token::kState + d) = s.values(l, d);
                out.features(row, token::kDelta + d) = s.values(l + 1, d) - s.values(l, d);
                out.features(row, token::kMask + d) = 1.0;
            }
        }
    }
    return out;
}

FimModel::FimModel(const ModelConfig& cfg)
  : cfg_(cfg) {
    cfg_.validate();
    build();
    initialize(cfg_.init_seed);
}

FimModel::BlockParams FimModel::add_block(const std::string& prefix) {
    const Eigen::Index e = cfg_.embed_width;
    const Eigen::Index f = cfg_.ff_width;
    auto linear = [&](const std::string& name, Eigen::Index in, Eigen::Index out) {
        return nn::LinearParams{params_.add(prefix + name + ".weight", in, out),
                                params_.add(prefix + name + ".bias", 1, out)};
    };
    auto norm = [&](const std::string& name) {
        return nn::NormParams{params_.add(prefix + name + ".gain", 1, e), params_.add(prefix + name + ".bias", 1, e)};
    };
    BlockParams bp;
    bp.ln1 = norm("norm1");
    bp.attn.query = linear("attn.query", e, e);
    bp.attn.key = linear("attn.key", e, e);
    bp.attn.value = linear("attn.value", e, e);
    bp.attn.output = linear("attn.output", e, e);
    bp.ln2 = norm("norm2");
    bp.ff1 = linear("ff1", e, f);
    bp.ff2 = linear("ff2", f, e);
    return bp;
}

void FimModel::build() {
    const Eigen::Index e = cfg_.embed_width;
    embed1_ = {params_.add("embed.0.weight", kTokenFeatures, e), params_.add("embed.0.bias", 1, e)};
    embed2_ = {params_.add("embed.1.weight", e, e), params_.add("embed.1.bias", 1, e)};
    for (int l = 0; l < cfg_.n_encoder_layers; ++l) {
        encoder_.push_back(add_block("encoder." + std::to_string(l) + "."));
    }
    encoder_norm_ = {params_.add("encoder.norm.gain", 1, e), params_.add("encoder.norm.bias", 1, e)};
    trunk_ = {params_.add("trunk.weight", kMaxDim, e), params_.add("trunk.bias", 1, e)};
    for (int l = 0; l < cfg_.n_combiner_layers; ++l) {
        combiner_.push_back(add_block("combiner." + std::to_string(l) + "."));
    }
    head_ = {params_.add("head.weight", e, kMaxDim), params_.add("head.bias", 1, kMaxDim)};
}

void FimModel::initialize(std::uint64_t seed) {
    Rng rng = make_stream(seed, 0x6d6f64656cULL);
    std::normal_distribution<double> unit(0.0, 1.0);
    for (std::size_t i = 0; i < params_.size(); ++i) {
        const auto id = static_cast<nn::ParamId>(i);
        const std::string& name = params_.name(id);
        Mat& v = params_.value(id);
        const bool is_gain = name.ends_with(".gain");
        const bool is_weight = name.ends_with(".weight");
        if (is_gain) {
            v.setOnes();
        } else if (is_weight && !name.starts_with("head.")) {
            const double sd = 1.0 / std::sqrt(static_cast<double>(v.rows()));
            for (Eigen::Index c = 0; c < v.cols(); ++c) {
                for (Eigen::Index r = 0; r < v.rows(); ++r) {
                    v(r, c) = sd * unit(rng);
                }
            }
        } else {
            v.setZero();
        }
    }
    params_.grad().zero();
}

Mat FimModel::scaled_features(const TokenBatch& tokens) const {
    // Step and increment columns are divided by the mean step of the context,
    // turning increments into finite-difference slopes of order one.
    Mat f = tokens.features;
    double sum = 0.0;
    double n = 0.0;
    for (Eigen::Index r = 0; r < f.rows(); ++r) {
        if (tokens.valid.empty() || tokens.valid[static_cast<std::size_t>(r)]) {
            sum += f(r, token::kStep);
            n += 1.0;
        }
    }
    const double mean_step = n > 0.0 && sum > 0.0 ? sum / n : 1.0;
    f.col(token::kStep) /= mean_step;
    f.middleCols(token::kDelta, kMaxDim) /= mean_step;
    return f;
}

void FimModel::block_forward(const BlockParams& bp, const Mat& x, const Mat& kv, const std::vector<char>& key_valid,
                             bool self_attention, ForwardRecord::Block& c, Mat& out, Rng* rng) const {
    const bool drop = rng && cfg_.dropout_rate > 0.0;
    c.input = x;
    nn::layer_norm_forward(params_, bp.ln1, x, c.normed1, c.ln1);
    nn::attention_forward(params_, bp.attn, cfg_.n_heads, c.normed1, self_attention ? c.normed1 : kv, key_valid,
                          c.attn_out, c.attn);
    if (drop) {
        c.drop1 = nn::dropout_mask(c.attn_out.rows(), c.attn_out.cols(), cfg_.dropout_rate, *rng);
        c.attn_out = c.attn_out.cwiseProduct(c.drop1);
    } else {
        c.drop1.resize(0, 0);
    }
    c.mid = x + c.attn_out;
    nn::layer_norm_forward(params_, bp.ln2, c.mid, c.normed2, c.ln2);
    nn::linear_forward(params_, bp.ff1, c.normed2, c.ff_pre);
    nn::gelu_forward(c.ff_pre, c.ff_act);
    nn::linear_forward(params_, bp.ff2, c.ff_act, c.ff_out);
    if (drop) {
        c.drop2 = nn::dropout_mask(c.ff_out.rows(), c.ff_out.cols(), cfg_.dropout_rate, *rng);
        c.ff_out = c.ff_out.cwiseProduct(c.drop2);
    } else {
        c.drop2.resize(0, 0);
    }
    out = c.mid + c.ff_out;
}

void FimModel::block_backward(const BlockParams& bp, const ForwardRecord::Block& c, const Mat& kv,
                              bool self_attention, const Mat& dout, nn::Gradients& g, Mat& dx, Mat& dkv) const {
    Mat dmid = dout;
    Mat dff_out = c.drop2.size() ? Mat(dout.cwiseProduct(c.drop2)) : dout;
    Mat dact, dpre, dnormed2, dtmp;
    nn::linear_backward(params_, bp.ff2, c.ff_act, dff_out, g, &dact);
    nn::gelu_backward(c.ff_pre, dact, dpre);
    nn::linear_backward(params_, bp.ff1, c.normed2, dpre, g, &dnormed2);
    nn::layer_norm_backward(params_, bp.ln2, c.ln2, dnormed2, g, dtmp);
    dmid += dtmp;
    const Mat dattn = c.drop1.size() ? Mat(dmid.cwiseProduct(c.drop1)) : dmid;
    Mat dq, dkv_local;
    nn::attention_backward(params_, bp.attn, cfg_.n_heads, c.normed1, self_attention ? c.normed1 : kv, c.attn, dattn,
                           g, dq, dkv_local);
    if (self_attention) {
        dq += dkv_local;
    } else {
        dkv += dkv_local;
    }
    nn::layer_norm_backward(params_, bp.ln1, c.ln1, dq, g, dtmp);
    dx = dmid + dtmp;
}

const Mat& FimModel::forward(const TokenBatch& tokens, const Mat& queries, ForwardRecord& rec, Rng* rng) const {
    if (tokens.size() < 1) {
        throw std::invalid_argument("forward needs at least one token");
    }
    if (queries.cols() != kMaxDim || queries.rows() < 1) {
        throw std::invalid_argument("queries must be an M x 3 matrix with M >= 1");
    }
    rec.valid = false;
    rec.tokens = tokens;
    if (rec.tokens.valid.empty()) {
        rec.tokens.valid.assign(static_cast<std::size_t>(tokens.size()), 1);
    }
    rec.features = scaled_features(rec.tokens);
    nn::linear_forward(params_, embed1_, rec.features, rec.embed_pre);
    nn::gelu_forward(rec.embed_pre, rec.embed_act);
    nn::linear_forward(params_, embed2_, rec.embed_act, rec.embedded);

    rec.encoder.resize(encoder_.size());
    Mat x = rec.embedded;
    Mat next;
    for (std::size_t l = 0; l < encoder_.size(); ++l) {
        block_forward(encoder_[l], x, x, rec.tokens.valid, true, rec.encoder[l], next, rng);
        x.swap(next);
    }
    rec.encoder_out = x;
    nn::layer_norm_forward(params_, encoder_norm_, rec.encoder_out, rec.context, rec.encoder_norm);

    rec.queries = queries;
    nn::linear_forward(params_, trunk_, queries, rec.trunk);
    rec.combiner.resize(combiner_.size());
    Mat h = rec.trunk;
    for (std::size_t l = 0; l < combiner_.size(); ++l) {
        block_forward(combiner_[l], h, rec.context, rec.tokens.valid, false, rec.combiner[l], next, rng);
        h.swap(next);
    }
    rec.combiner_out = h;
    // The head reads the residual stream directly, so output magnitude is not
    // tied to a normalized activation.
    nn::linear_forward(params_, head_, rec.combiner_out, rec.output);
    if (!rec.output.allFinite()) {
        throw NumericFailure("non-finite activations in forward pass");
    }
    rec.valid = true;
    return rec.output;
}

void FimModel::backward(const ForwardRecord& rec, const Mat& d_output, nn::Gradients& g) const {
    if (!rec.valid) {
        throw InvalidState("backward called without a recorded forward pass");
    }
    if (d_output.rows() != rec.output.rows() || d_output.cols() != rec.output.cols()) {
        throw std::invalid_argument("output gradient shape does not match the forward output");
    }
    if (g.tensors.size() != params_.size()) {
        throw std::invalid_argument("gradient buffer layout does not match the model");
    }
    Mat dh, dtmp;
    nn::linear_backward(params_, head_, rec.combiner_out, d_output, g, &dh);

    Mat dcontext = Mat::Zero(rec.context.rows(), rec.context.cols());
    for (std::size_t l = combiner_.size(); l-- > 0;) {
        block_backward(combiner_[l], rec.combiner[l], rec.context, false, dh, g, dtmp, dcontext);
        dh.swap(dtmp);
    }
    nn::linear_backward(params_, trunk_, rec.queries, dh, g, nullptr);

    Mat dx;
    nn::layer_norm_backward(params_, encoder_norm_, rec.encoder_norm, dcontext, g, dx);
    Mat unused;
    for (std::size_t l = encoder_.size(); l-- > 0;) {
        const auto& c = rec.encoder[l];
        block_backward(encoder_[l], c, c.input, true, dx, g, dtmp, unused);
        dx.swap(dtmp);
    }
    Mat dact, dpre;
    nn::linear_backward(params_, embed2_, rec.embed_act, dx, g, &dact);
    nn::gelu_backward(rec.embed_pre, dact, dpre);
    nn::linear_backward(params_, embed1_, rec.features, dpre, g, nullptr);
}

void FimModel::backward(const ForwardRecord& rec, const Mat& d_output) {
    nn::Gradients& g = params_.grad();
    backward(rec, d_output, g);
}

ContextEncoding FimModel::branch_encode(const TokenBatch& tokens) const {
    if (tokens.size() < 1) {
        throw std::invalid_argument("branch encoder needs at least one token");
    }
    ContextEncoding enc;
    enc.dim = tokens.dim;
    enc.valid = tokens.valid;
    if (enc.valid.empty()) {
        enc.valid.assign(static_cast<std::size_t>(tokens.size()), 1);
    }
    TokenBatch t = tokens;
    t.valid = enc.valid;
    const Mat features = scaled_features(t);
    Mat pre, act, x, next;
    nn::linear_forward(params_, embed1_, features, pre);
    nn::gelu_forward(pre, act);
    nn::linear_forward(params_, embed2_, act, x);
    ForwardRecord::Block scratch;
    for (const auto& bp : encoder_) {
        block_forward(bp, x, x, enc.valid, true, scratch, next, nullptr);
        x.swap(next);
    }
    nn::LayerNormCache ln;
    nn::layer_norm_forward(params_, encoder_norm_, x, enc.columns, ln);
    if (!enc.columns.allFinite()) {
        throw NumericFailure("non-finite activations in branch encoder");
    }
    for (const auto& bp : combiner_) {
        Mat k, v;
        nn::linear_forward(params_, bp.attn.key, enc.columns, k);
        nn::linear_forward(params_, bp.attn.value, enc.columns, v);
        enc.keys.push_back(std::move(k));
        enc.values.push_back(std::move(v));
    }
    return enc;
}

Eigen::RowVectorXd FimModel::trunk_encode(const Eigen::Vector3d& x) const {
    return x.transpose() * params_.value(trunk_.weight) + params_.value(trunk_.bias);
}

namespace {

Eigen::RowVectorXd layer_norm_row(const Eigen::RowVectorXd& x, const Mat& gain, const Mat& bias) {
    const double width = static_cast<double>(x.size());
    const double mean = x.sum() / width;
    const double var = (x.array() - mean).square().sum() / width;
    const double inv = 1.0 / std::sqrt(var + nn::kLayerNormEps);
    return ((x.array() - mean) * inv * gain.row(0).array() + bias.row(0).array()).matrix();
}

Eigen::RowVectorXd affine_row(const Eigen::RowVectorXd& x, const Mat& w, const Mat& b) {
    return x * w + b;
}

} // namespace

Mat FimModel::combine(const ContextEncoding& enc, const Mat& h) const {
    if (h.cols() != cfg_.embed_width) {
        throw std::invalid_argument("query embeddings must have embed_width columns");
    }
    if (enc.keys.size() != combiner_.size()) {
        throw std::invalid_argument("context encoding was not produced by this model");
    }
    const Eigen::Index n = enc.size();
    const Eigen::Index dh = cfg_.embed_width / cfg_.n_heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    Mat out(h.rows(), kMaxDim);
    Eigen::VectorXd scores(n);
    for (Eigen::Index m = 0; m < h.rows(); ++m) {
        Eigen::RowVectorXd hq = h.row(m);
        for (std::size_t l = 0; l < combiner_.size(); ++l) {
            const BlockParams& bp = combiner_[l];
            const Eigen::RowVectorXd n1 = layer_norm_row(hq, params_.value(bp.ln1.gain), params_.value(bp.ln1.bias));
            const Eigen::RowVectorXd q =
                affine_row(n1, params_.value(bp.attn.query.weight), params_.value(bp.attn.query.bias));
            Eigen::RowVectorXd heads(cfg_.embed_width);
            for (int hd = 0; hd < cfg_.n_heads; ++hd) {
                scores.noalias() = enc.keys[l].middleCols(hd * dh, dh) * q.segment(hd * dh, dh).transpose();
                double mx = -std::numeric_limits<double>::infinity();
                for (Eigen::Index j = 0; j < n; ++j) {
                    if (enc.valid[static_cast<std::size_t>(j)]) {
                        mx = std::max(mx, scores[j] * scale);
                    }
                }
                double sum = 0.0;
                for (Eigen::Index j = 0; j < n; ++j) {
                    const double e = enc.valid[static_cast<std::size_t>(j)] ? std::exp(scores[j] * scale - mx) : 0.0;
                    scores[j] = e;
                    sum += e;
                }
                scores /= sum;
                heads.segment(hd * dh, dh).noalias() = scores.transpose() * enc.values[l].middleCols(hd * dh, dh);
            }
            hq += affine_row(heads, params_.value(bp.attn.output.weight), params_.value(bp.attn.output.bias));
            const Eigen::RowVectorXd n2 = layer_norm_row(hq, params_.value(bp.ln2.gain), params_.value(bp.ln2.bias));
            Eigen::RowVectorXd a = affine_row(n2, params_.value(bp.ff1.weight), params_.value(bp.ff1.bias));
            a = a.unaryExpr([](double v) { return nn::gelu(v); });
            hq += affine_row(a, params_.value(bp.ff2.weight), params_.value(bp.ff2.bias));
        }
        out.row(m) = affine_row(hq, params_.value(head_.weight), params_.value(head_.bias));
    }
    if (!out.allFinite()) {
        throw NumericFailure("non-finite activations in combination network");
    }
    return out;
}

Eigen::Vector3d FimModel::predict_normalized(const ContextEncoding& enc, const Eigen::Vector3d& x) const {
    const Mat h = trunk_encode(x);
    return combine(enc, h).row(0).transpose();
}

namespace {

Eigen::Vector3d pad(const StateVec& u) {
    Eigen::Vector3d out = Eigen::Vector3d::Zero();
    out.head(u.size()) = u;
    return out;
}

struct BoundField {
    std::shared_ptr<const FimModel> model;
    NormalizationTransform transform;
    ContextEncoding encoding;

    StateVec operator()(const StateVec& x) const {
        if (x.size() != encoding.dim) {
            throw std::invalid_argument("query dimension does not match the observations");
        }
        const Eigen::Vector3d f = model->predict_normalized(encoding, pad(transform.normalize_state(x)));
        return transform.denormalize_field_output(f.head(encoding.dim));
    }
};

} // namespace

std::vector<StateVec> FimModel::estimate_field(const ObservationSet& raw, const std::vector<StateVec>& queries) const {
    const auto [tf, normalized] = fit_normalization(raw);
    const ContextEncoding enc = branch_encode(tokenize(normalized));
    std::vector<StateVec> out;
    out.reserve(queries.size());
    for (const auto& x : queries) {
        if (x.size() != raw.dim) {
            throw std::invalid_argument("query dimension does not match the observations");
        }
        const Eigen::Vector3d f = predict_normalized(enc, pad(tf.normalize_state(x)));
        out.push_back(tf.denormalize_field_output(f.head(raw.dim)));
    }
    return out;
}

VectorFieldFn FimModel::make_field(const ObservationSet& raw) const {
    auto [tf, normalized] = fit_normalization(raw);
    auto bound = std::make_shared<BoundField>();
    bound->model = std::make_shared<const FimModel>(*this);
    bound->transform = std::move(tf);
    bound->encoding = branch_encode(tokenize(normalized));
    return [bound](const StateVec& x) { return (*bound)(x); };
}

} // namespace fimode
