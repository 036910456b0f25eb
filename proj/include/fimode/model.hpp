#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "fimode/datagen.hpp"
#include "fimode/nn.hpp"
#include "fimode/observations.hpp"
#include "fimode/polynomial.hpp"

namespace fimode {

struct ModelConfig {
    int embed_width = 64; // E
    int n_encoder_layers = 3;
    int n_combiner_layers = 3;
    int n_heads = 4;
    int ff_width = 128;
    double dropout_rate = 0.0; // training only
    std::uint64_t init_seed = 0;

    void validate() const;
    friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

/// Columns of one observation token: t, dt, y (3, zero padded), dy (3, zero
/// padded), dimension mask (3).
inline constexpr int kTokenFeatures = 11;

namespace token {
inline constexpr int kTime = 0;
inline constexpr int kStep = 1;
inline constexpr int kState = 2;
inline constexpr int kDelta = 5;
inline constexpr int kMask = 8;
} // namespace token

/// Tokens of a context set, one row per consecutive observation pair. Rows
/// with valid[r] == 0 are padding and never attended to.
struct TokenBatch {
    Eigen::MatrixXd features; // N x kTokenFeatures
    std::vector<char> valid;
    int dim = 0;

    Eigen::Index size() const noexcept { return features.rows(); }
};

/// Emits sum_k (L_k - 1) tokens from normalized observations. Tokens carry no
/// series or position index. Throws std::invalid_argument for a series
/// shorter than 2.
TokenBatch tokenize(const ObservationSet& normalized);

/// Branch-net output: one E-dimensional column of D per token (stored here
/// as rows), plus the key projections the combiner layers need.
struct ContextEncoding {
    Eigen::MatrixXd columns; // N x E
    std::vector<char> valid;
    int dim = 0;
    std::vector<Eigen::MatrixXd> keys;   // per combiner layer, N x E
    std::vector<Eigen::MatrixXd> values; // per combiner layer, N x E

    Eigen::Index size() const noexcept { return columns.rows(); }
};

/// Intermediate values of one training forward pass, consumed by backward().
struct ForwardRecord {
    struct Block {
        Eigen::MatrixXd input, normed1, attn_out, mid, normed2, ff_pre, ff_act, ff_out;
        nn::LayerNormCache ln1, ln2;
        nn::AttentionCache attn;
        Eigen::MatrixXd drop1, drop2; // empty when dropout is off
    };

    bool valid = false;
    TokenBatch tokens;
    Eigen::MatrixXd features; // scaled token features fed to the embedder
    Eigen::MatrixXd embed_pre, embed_act, embedded;
    std::vector<Block> encoder;
    Eigen::MatrixXd encoder_out;
    nn::LayerNormCache encoder_norm;
    Eigen::MatrixXd context; // D, N x E
    Eigen::MatrixXd queries; // M x 3
    Eigen::MatrixXd trunk;   // M x E
    std::vector<Block> combiner;
    Eigen::MatrixXd combiner_out;
    Eigen::MatrixXd output; // M x 3
};

/// DeepONet-style vector-field estimator: a Transformer encoder over
/// observation tokens (branch), an affine embedding of the query location
/// (trunk) and residual cross-attention layers reading the branch encodings
/// (combination), followed by a linear head with three outputs.
///
/// All computations happen in normalized coordinates; estimate_field() and
/// make_field() wrap the normalization round trip. The output head starts at
/// zero, so a fresh model predicts the zero field.
class FimModel {
  public:
    explicit FimModel(const ModelConfig& cfg = {});

    const ModelConfig& config() const noexcept { return cfg_; }
    nn::ParameterStore& parameters() noexcept { return params_; }
    const nn::ParameterStore& parameters() const noexcept { return params_; }

    /// Re-draws all weights from `seed` (output head and biases start at zero).
    void initialize(std::uint64_t seed);

    ContextEncoding branch_encode(const TokenBatch& tokens) const;

    /// h(x) for a padded normalized location x in R^3.
    Eigen::RowVectorXd trunk_encode(const Eigen::Vector3d& x) const;

    /// f_hat for each row of h (M x E). Each query is processed on its own so
    /// results never depend on the other rows. Returns M x 3.
    Eigen::MatrixXd combine(const ContextEncoding& encoding, const Eigen::MatrixXd& h) const;

    /// f_hat at one padded normalized location.
    Eigen::Vector3d predict_normalized(const ContextEncoding& encoding, const Eigen::Vector3d& x) const;

    /// Full in-context pipeline on raw observations and raw query states.
    std::vector<StateVec> estimate_field(const ObservationSet& raw, const std::vector<StateVec>& queries) const;

    /// The estimated field as a callable on raw states, bound to `raw`.
    VectorFieldFn make_field(const ObservationSet& raw) const;

    /// Batched training forward over normalized tokens and queries (M x 3,
    /// padded). `rng` drives dropout and may be null when dropout is off.
    const Eigen::MatrixXd& forward(const TokenBatch& tokens, const Eigen::MatrixXd& queries, ForwardRecord& rec,
                                   Rng* rng = nullptr) const;

    /// Accumulates d(loss)/d(parameter) into `grads` given d(loss)/d(output).
    /// Throws InvalidState when `rec` does not hold a forward pass.
    void backward(const ForwardRecord& rec, const Eigen::MatrixXd& d_output, nn::Gradients& grads) const;

    /// Accumulates into the parameters' own gradient buffers.
    void backward(const ForwardRecord& rec, const Eigen::MatrixXd& d_output);

  private:
    struct BlockParams {
        nn::NormParams ln1, ln2;
        nn::AttentionParams attn;
        nn::LinearParams ff1, ff2;
    };

    void build();
    BlockParams add_block(const std::string& prefix);
    Eigen::MatrixXd scaled_features(const TokenBatch& tokens) const;
    void block_forward(const BlockParams& bp, const Eigen::MatrixXd& x, const Eigen::MatrixXd& kv,
                       const std::vector<char>& key_valid, bool self_attention, ForwardRecord::Block& cache,
                       Eigen::MatrixXd& out, Rng* rng) const;
    void block_backward(const BlockParams& bp, const ForwardRecord::Block& cache, const Eigen::MatrixXd& kv,
                        bool self_attention, const Eigen::MatrixXd& dout, nn::Gradients& g, Eigen::MatrixXd& dx,
                        Eigen::MatrixXd& dkv) const;

    ModelConfig cfg_;
    nn::ParameterStore params_;
    nn::LinearParams embed1_, embed2_;
    std::vector<BlockParams> encoder_;
    nn::NormParams encoder_norm_;
    nn::LinearParams trunk_;
    std::vector<BlockParams> combiner_;
    nn::LinearParams head_;
};

} // namespace fimode
