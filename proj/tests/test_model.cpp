#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "fimode/errors.hpp"
#include "fimode/model.hpp"

using namespace fimode;
using nn::Mat;

namespace {

ObservationSet random_observations(Rng& rng, int k, int l, int dim, double time_scale = 1.0) {
    std::normal_distribution<double> n(0.0, 1.0);
    ObservationSet obs;
    obs.dim = dim;
    for (int s = 0; s < k; ++s) {
        Series series{TimeGrid::regular(l, time_scale), Mat(l, dim)};
        StateVec x(dim);
        for (int d = 0; d < dim; ++d) {
            x[d] = n(rng);
        }
        for (int r = 0; r < l; ++r) {
            series.values.row(r) = x.transpose();
            for (int d = 0; d < dim; ++d) {
                x[d] += 0.1 * n(rng) + 0.05 * std::sin(x[(d + 1) % dim]);
            }
        }
        obs.series.push_back(std::move(series));
    }
    return obs;
}

ModelConfig tiny_config() {
    ModelConfig cfg;
    cfg.embed_width = 8;
    cfg.n_encoder_layers = 1;
    cfg.n_combiner_layers = 1;
    cfg.n_heads = 2;
    cfg.ff_width = 16;
    cfg.init_seed = 3;
    return cfg;
}

// Randomizes every tensor so that no gradient path is trivially zero.
void randomize(FimModel& model, std::uint64_t seed, double scale = 0.5) {
    Rng rng(seed);
    std::normal_distribution<double> n(0.0, 1.0);
    auto& p = model.parameters();
    for (std::size_t i = 0; i < p.size(); ++i) {
        Mat& v = p.value(static_cast<nn::ParamId>(i));
        const bool gain = p.name(static_cast<nn::ParamId>(i)).ends_with(".gain");
        for (Eigen::Index j = 0; j < v.size(); ++j) {
            v.data()[j] = (gain ? 1.0 : 0.0) + scale * n(rng);
        }
    }
}

Mat random_queries(Rng& rng, int m, int dim) {
    std::uniform_real_distribution<double> u(-1.2, 1.2);
    Mat q = Mat::Zero(m, 3);
    for (int r = 0; r < m; ++r) {
        for (int d = 0; d < dim; ++d) {
            q(r, d) = u(rng);
        }
    }
    return q;
}

} // namespace

TEST(Tokenize, CountMatchesPairs) {
    Rng rng(1);
    const auto obs = random_observations(rng, 9, 200, 3);
    EXPECT_EQ(tokenize(fit_normalization(obs).second).size(), 1791);

    const auto single = random_observations(rng, 1, 2, 2);
    EXPECT_EQ(tokenize(single).size(), 1);

    ObservationSet uneven = random_observations(rng, 2, 5, 1);
    uneven.series.push_back(random_observations(rng, 1, 7, 1).series[0]);
    EXPECT_EQ(tokenize(uneven).size(), 4 + 4 + 6);
}

TEST(Tokenize, FeatureLayoutAndPadding) {
    Rng rng(2);
    const auto obs = random_observations(rng, 1, 4, 1);
    const TokenBatch t = tokenize(obs);
    ASSERT_EQ(t.features.cols(), kTokenFeatures);
    for (Eigen::Index r = 0; r < t.size(); ++r) {
        EXPECT_DOUBLE_EQ(t.features(r, token::kTime), obs.series[0].grid[static_cast<std::size_t>(r)]);
        EXPECT_DOUBLE_EQ(t.features(r, token::kStep),
                         obs.series[0].grid[static_cast<std::size_t>(r + 1)] -
                             obs.series[0].grid[static_cast<std::size_t>(r)]);
        EXPECT_DOUBLE_EQ(t.features(r, token::kState), obs.series[0].values(r, 0));
        EXPECT_DOUBLE_EQ(t.features(r, token::kDelta), obs.series[0].values(r + 1, 0) - obs.series[0].values(r, 0));
        EXPECT_EQ(t.features(r, token::kMask), 1.0);
        EXPECT_EQ(t.features(r, token::kMask + 1), 0.0);
        EXPECT_EQ(t.features(r, token::kMask + 2), 0.0);
        EXPECT_EQ(t.features(r, token::kState + 1), 0.0);
        EXPECT_EQ(t.features(r, token::kDelta + 2), 0.0);
    }
}

TEST(Tokenize, RejectsShortSeries) {
    ObservationSet obs;
    obs.dim = 1;
    EXPECT_THROW(tokenize(obs), std::invalid_argument);
}

TEST(ModelConfig, Validation) {
    ModelConfig cfg;
    cfg.n_heads = 3;
    EXPECT_THROW(FimModel{cfg}, std::invalid_argument);
    cfg = ModelConfig{};
    cfg.n_encoder_layers = 0;
    EXPECT_THROW(FimModel{cfg}, std::invalid_argument);
}

TEST(ModelConfig, DeskScaleParameterCount) {
    const FimModel model;
    const auto n = model.parameters().scalar_count();
    EXPECT_GT(n, 200000u);
    EXPECT_LT(n, 600000u);
}

TEST(BranchEncode, ShapesAndPermutationEquivariance) {
    Rng rng(4);
    FimModel model(tiny_config());
    randomize(model, 5);
    const auto obs = fit_normalization(random_observations(rng, 2, 6, 2)).second;
    const TokenBatch tokens = tokenize(obs);
    const ContextEncoding enc = model.branch_encode(tokens);
    EXPECT_EQ(enc.size(), 10);
    EXPECT_EQ(enc.columns.cols(), 8);

    TokenBatch one = tokens;
    one.features = tokens.features.topRows(1);
    one.valid = {1};
    EXPECT_EQ(model.branch_encode(one).size(), 1);

    std::vector<int> perm(static_cast<std::size_t>(tokens.size()));
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    TokenBatch permuted = tokens;
    for (std::size_t i = 0; i < perm.size(); ++i) {
        permuted.features.row(static_cast<Eigen::Index>(i)) = tokens.features.row(perm[i]);
    }
    const ContextEncoding penc = model.branch_encode(permuted);
    for (std::size_t i = 0; i < perm.size(); ++i) {
        EXPECT_LT((penc.columns.row(static_cast<Eigen::Index>(i)) - enc.columns.row(perm[i])).cwiseAbs().maxCoeff(),
                  1e-12);
    }
}

TEST(BranchEncode, ZeroTokensGiveFiniteDeterministicOutput) {
    FimModel model(tiny_config());
    randomize(model, 6);
    TokenBatch zeros;
    zeros.dim = 1;
    zeros.features = Mat::Zero(3, kTokenFeatures);
    zeros.valid.assign(3, 1);
    const auto a = model.branch_encode(zeros);
    const auto b = model.branch_encode(zeros);
    EXPECT_TRUE(a.columns.allFinite());
    EXPECT_EQ(a.columns, b.columns);
}

TEST(BranchEncode, PaddedSlotsAreIgnored) {
    Rng rng(7);
    FimModel model(tiny_config());
    randomize(model, 8);
    const auto obs = fit_normalization(random_observations(rng, 1, 6, 3)).second;
    const TokenBatch tokens = tokenize(obs);
    TokenBatch padded = tokens;
    padded.features.conservativeResize(tokens.size() + 3, kTokenFeatures);
    padded.features.bottomRows(3).setConstant(4.0);
    padded.valid.resize(static_cast<std::size_t>(tokens.size()) + 3, 0);
    const auto a = model.branch_encode(tokens);
    const auto b = model.branch_encode(padded);
    EXPECT_LT((a.columns - b.columns.topRows(tokens.size())).cwiseAbs().maxCoeff(), 1e-12);
    const Mat q = random_queries(rng, 4, 3);
    Mat h(4, 8);
    for (int r = 0; r < 4; ++r) {
        h.row(r) = model.trunk_encode(q.row(r).transpose());
    }
    EXPECT_LT((model.combine(a, h) - model.combine(b, h)).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(TrunkEncode, AffineMap) {
    FimModel model(tiny_config());
    randomize(model, 9);
    const Eigen::RowVectorXd bias = model.trunk_encode(Eigen::Vector3d::Zero());
    EXPECT_EQ(bias, model.parameters().value(model.parameters().find("trunk.bias")).row(0));
    EXPECT_EQ(bias.size(), 8);
    const Eigen::Vector3d x1(0.3, -1.0, 2.0), x2(-0.7, 0.1, 0.5);
    const double a = 1.7, b = -0.4;
    const Eigen::RowVectorXd lhs = model.trunk_encode(a * x1 + b * x2) - bias;
    const Eigen::RowVectorXd rhs = a * (model.trunk_encode(x1) - bias) + b * (model.trunk_encode(x2) - bias);
    EXPECT_LT((lhs - rhs).cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_EQ(FimModel{}.trunk_encode(x1).size(), 64);
}

TEST(Combine, QueryBatchIndependenceIsExact) {
    Rng rng(10);
    FimModel model(tiny_config());
    randomize(model, 11);
    const auto obs = fit_normalization(random_observations(rng, 3, 8, 3)).second;
    const auto enc = model.branch_encode(tokenize(obs));
    const Mat q = random_queries(rng, 64, 3);
    Mat h(64, 8);
    for (int r = 0; r < 64; ++r) {
        h.row(r) = model.trunk_encode(q.row(r).transpose());
    }
    const Mat batched = model.combine(enc, h);
    for (int r = 0; r < 64; ++r) {
        const Mat single = model.combine(enc, h.row(r));
        EXPECT_EQ(single.row(0), batched.row(r));
    }
}

TEST(Combine, ColumnPermutationInvariance) {
    Rng rng(12);
    FimModel model(tiny_config());
    randomize(model, 13);
    const auto obs = fit_normalization(random_observations(rng, 3, 8, 2)).second;
    const auto enc = model.branch_encode(tokenize(obs));
    ContextEncoding shuffled = enc;
    std::vector<Eigen::Index> perm(static_cast<std::size_t>(enc.size()));
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    for (std::size_t i = 0; i < perm.size(); ++i) {
        const auto src = perm[i];
        const auto dst = static_cast<Eigen::Index>(i);
        shuffled.columns.row(dst) = enc.columns.row(src);
        for (std::size_t l = 0; l < enc.keys.size(); ++l) {
            shuffled.keys[l].row(dst) = enc.keys[l].row(src);
            shuffled.values[l].row(dst) = enc.values[l].row(src);
        }
    }
    const Mat h = model.trunk_encode(Eigen::Vector3d(0.2, -0.4, 0.0));
    EXPECT_LT((model.combine(enc, h) - model.combine(shuffled, h)).cwiseAbs().maxCoeff(), 1e-9);
}

TEST(Forward, MatchesInferencePath) {
    Rng rng(14);
    FimModel model(tiny_config());
    randomize(model, 15);
    const auto obs = fit_normalization(random_observations(rng, 2, 9, 3)).second;
    const TokenBatch tokens = tokenize(obs);
    const Mat q = random_queries(rng, 5, 3);
    ForwardRecord rec;
    const Mat out = model.forward(tokens, q, rec);
    const auto enc = model.branch_encode(tokens);
    for (int r = 0; r < 5; ++r) {
        const Eigen::Vector3d f = model.predict_normalized(enc, q.row(r).transpose());
        EXPECT_LT((out.row(r).transpose() - f).cwiseAbs().maxCoeff(), 1e-10);
    }
}

TEST(EstimateField, FreshModelPredictsZero) {
    Rng rng(16);
    const FimModel model;
    const auto obs = random_observations(rng, 2, 20, 2, 5.0);
    const auto out = model.estimate_field(obs, {obs.series[0].value(0), obs.series[1].value(7)});
    ASSERT_EQ(out.size(), 2u);
    for (const auto& f : out) {
        EXPECT_EQ(f.size(), 2);
        EXPECT_EQ(f, StateVec::Zero(2));
    }
}

TEST(EstimateField, TrajectoryPermutationInvariance) {
    Rng rng(17);
    FimModel model(tiny_config());
    randomize(model, 18);
    const auto obs = random_observations(rng, 5, 12, 3, 3.0);
    ObservationSet reversed = obs;
    std::reverse(reversed.series.begin(), reversed.series.end());
    const std::vector<StateVec> queries{obs.series[2].value(3), obs.series[4].value(11)};
    const auto a = model.estimate_field(obs, queries);
    const auto b = model.estimate_field(reversed, queries);
    for (std::size_t i = 0; i < a.size(); ++i) {
        EXPECT_LT((a[i] - b[i]).cwiseAbs().maxCoeff(), 1e-9);
    }
}

TEST(EstimateField, NormalizationConsistency) {
    Rng rng(19);
    FimModel model(tiny_config());
    randomize(model, 20);
    const auto obs = random_observations(rng, 3, 10, 3, 2.0);
    const Eigen::Vector3d a(2.5, 0.1, 7.0), b(-3.0, 4.0, 0.5);
    const double c = 6.0;
    ObservationSet mapped = obs;
    for (auto& s : mapped.series) {
        std::vector<double> t = s.grid.times();
        for (auto& v : t) {
            v *= c;
        }
        s.grid = TimeGrid(t);
        for (Eigen::Index r = 0; r < s.values.rows(); ++r) {
            s.values.row(r) = (s.values.row(r).transpose().cwiseProduct(a) + b).transpose();
        }
    }
    const std::vector<StateVec> q{obs.series[0].value(4), StateVec(Eigen::Vector3d(0.1, 0.2, -0.3))};
    std::vector<StateVec> q_mapped;
    for (const auto& x : q) {
        q_mapped.push_back(x.cwiseProduct(StateVec(a)) + StateVec(b));
    }
    const auto f = model.estimate_field(obs, q);
    const auto g = model.estimate_field(mapped, q_mapped);
    for (std::size_t i = 0; i < q.size(); ++i) {
        const StateVec expected = f[i].cwiseProduct(StateVec(a)) / c;
        EXPECT_LT((g[i] - expected).cwiseAbs().maxCoeff(), 1e-9 * std::max(1.0, expected.cwiseAbs().maxCoeff()));
    }
}

TEST(EstimateField, DuplicatedContextGivesSameEstimate) {
    // Softmax over a key set where every key appears twice assigns each copy
    // half the weight, so every attention output (and hence f_hat) is
    // unchanged.
    Rng rng(21);
    FimModel model(tiny_config());
    randomize(model, 22);
    const auto obs = random_observations(rng, 1, 15, 2, 4.0);
    ObservationSet twice = obs;
    twice.series.push_back(obs.series[0]);
    const std::vector<StateVec> q{obs.series[0].value(5), StateVec(Eigen::Vector2d(0.3, -0.1))};
    const auto a = model.estimate_field(obs, q);
    const auto b = model.estimate_field(twice, q);
    for (std::size_t i = 0; i < q.size(); ++i) {
        EXPECT_LT((a[i] - b[i]).cwiseAbs().maxCoeff(), 1e-9 * std::max(1.0, a[i].cwiseAbs().maxCoeff()));
    }

    // Direct check on one attention evaluation: duplicated keys/values.
    nn::ParameterStore p;
    nn::AttentionParams att;
    for (auto* lin : {&att.query, &att.key, &att.value, &att.output}) {
        const auto id = static_cast<int>(p.size());
        lin->weight = p.add("w" + std::to_string(id), 4, 4);
        lin->bias = p.add("b" + std::to_string(id), 1, 4);
        p.value(lin->weight) = Mat::Random(4, 4);
        p.value(lin->bias) = Mat::Random(1, 4);
    }
    const Mat xq = Mat::Random(3, 4);
    const Mat kv = Mat::Random(5, 4);
    Mat kv2(10, 4);
    kv2 << kv, kv;
    Mat y1, y2;
    nn::AttentionCache c1, c2;
    nn::attention_forward(p, att, 2, xq, kv, {}, y1, c1);
    nn::attention_forward(p, att, 2, xq, kv2, {}, y2, c2);
    EXPECT_LT((y1 - y2).cwiseAbs().maxCoeff(), 1e-14);
}

TEST(EstimateField, MoreContextChangesTheEstimate) {
    Rng rng(23);
    FimModel model(tiny_config());
    randomize(model, 24);
    const auto obs = random_observations(rng, 9, 20, 2, 2.0);
    std::vector<StateVec> grid;
    for (int i = 0; i < 20; ++i) {
        for (int j = 0; j < 20; ++j) {
            grid.push_back(StateVec(Eigen::Vector2d(-2.0 + 0.2 * i, -2.0 + 0.2 * j)));
        }
    }
    const auto one = model.estimate_field(obs.first(1), grid);
    const auto nine = model.estimate_field(obs, grid);
    double diff = 0.0;
    for (std::size_t i = 0; i < grid.size(); ++i) {
        diff = std::max(diff, (one[i] - nine[i]).cwiseAbs().maxCoeff());
    }
    EXPECT_GT(diff, 1e-6);
}

TEST(EstimateField, TruncatesToDataDimension) {
    Rng rng(25);
    FimModel model(tiny_config());
    randomize(model, 26);
    const auto obs = random_observations(rng, 2, 10, 2, 1.0);
    const auto out = model.estimate_field(obs, {obs.series[0].value(0)});
    EXPECT_EQ(out[0].size(), 2);
    EXPECT_THROW(model.estimate_field(obs, {StateVec(Eigen::Vector3d::Zero())}), std::invalid_argument);
}

TEST(Backward, RequiresForwardRecord) {
    FimModel model(tiny_config());
    ForwardRecord rec;
    EXPECT_THROW(model.backward(rec, Mat::Zero(1, 3)), InvalidState);
}

TEST(Backward, ZeroOutputGradientGivesZeroGradients) {
    Rng rng(27);
    FimModel model(tiny_config());
    randomize(model, 28);
    const auto tokens = tokenize(fit_normalization(random_observations(rng, 1, 6, 2)).second);
    ForwardRecord rec;
    model.forward(tokens, random_queries(rng, 3, 2), rec);
    nn::Gradients g = model.parameters().zero_gradients();
    model.backward(rec, Mat::Zero(3, 3), g);
    EXPECT_EQ(g.squared_norm(), 0.0);
}

TEST(Backward, MaskedOutputDimensionHasZeroHeadGradient) {
    Rng rng(29);
    FimModel model(tiny_config());
    randomize(model, 30);
    const auto tokens = tokenize(fit_normalization(random_observations(rng, 1, 6, 2)).second);
    ForwardRecord rec;
    model.forward(tokens, random_queries(rng, 4, 2), rec);
    Mat dout = Mat::Random(4, 3);
    dout.col(2).setZero(); // third output dimension unused for D = 2
    nn::Gradients g = model.parameters().zero_gradients();
    model.backward(rec, dout, g);
    const auto& p = model.parameters();
    EXPECT_EQ(g.tensors[static_cast<std::size_t>(p.find("head.weight"))].col(2).cwiseAbs().maxCoeff(), 0.0);
    EXPECT_EQ(g.tensors[static_cast<std::size_t>(p.find("head.bias"))](0, 2), 0.0);
    EXPECT_GT(g.tensors[static_cast<std::size_t>(p.find("head.weight"))].col(0).cwiseAbs().maxCoeff(), 0.0);
}

TEST(Backward, MatchesCentralFiniteDifferences) {
    // Loss = sum(W .* output) with fixed random W, so d(loss)/d(output) = W.
    Rng rng(31);
    FimModel model(tiny_config());
    randomize(model, 32, 0.4);
    auto obs = fit_normalization(random_observations(rng, 1, 6, 3)).second; // 5 tokens
    const TokenBatch tokens = tokenize(obs);
    ASSERT_EQ(tokens.size(), 5);
    const Mat q = random_queries(rng, 3, 3);
    const Mat w = Mat::Random(3, 3);

    ForwardRecord rec;
    model.forward(tokens, q, rec);
    nn::Gradients analytic = model.parameters().zero_gradients();
    model.backward(rec, w, analytic);

    auto loss = [&] {
        ForwardRecord r;
        return (model.forward(tokens, q, r).array() * w.array()).sum();
    };
    const double eps = 1e-4;
    std::size_t total = 0, passed = 0;
    auto& p = model.parameters();
    for (std::size_t i = 0; i < p.size(); ++i) {
        Mat& v = p.value(static_cast<nn::ParamId>(i));
        for (Eigen::Index j = 0; j < v.size(); ++j) {
            const double saved = v.data()[j];
            v.data()[j] = saved + eps;
            const double up = loss();
            v.data()[j] = saved - eps;
            const double down = loss();
            v.data()[j] = saved;
            const double numeric = (up - down) / (2 * eps);
            const double exact = analytic.tensors[i].data()[j];
            ++total;
            if (std::abs(numeric - exact) <= 1e-3 * std::max(std::abs(numeric), std::abs(exact)) + 1e-8) {
                ++passed;
            }
        }
    }
    EXPECT_GE(static_cast<double>(passed), 0.99 * static_cast<double>(total)) << passed << " / " << total;
}
