#include "mygram/fusion.hpp"
#include "test_support.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <random>

using namespace mygram;
using mygram::testing::check_gradients;
using mygram::testing::random_matrix;

namespace {

FusionParams random_params(Index d, Index heads, Index ffn, std::mt19937_64& rng)
{
    FusionConfig cfg;
    cfg.heads = heads;
    cfg.ffn_dim = ffn;
    FusionParams p = init_fusion(d, cfg, rng);
    // Non-trivial norms and biases so every parameter matters.
    for (Tensor* t : {&p.ffn_in_bias, &p.ffn_out_bias, &p.norm1_bias, &p.norm2_bias})
        t->mutable_value() = random_matrix(t->rows(), t->cols(), rng, -0.3, 0.3);
    for (Tensor* t : {&p.norm1_gain, &p.norm2_gain})
        t->mutable_value() = random_matrix(t->rows(), t->cols(), rng, 0.5, 1.5);
    return p;
}

FusionParams identity_params(Index d, Index heads)
{
    FusionParams p;
    p.heads = heads;
    p.type_embedding = Tensor::zeros(modality_count, d, true);
    p.query = Tensor(Matrix::Identity(d, d), true);
    p.key = Tensor(Matrix::Identity(d, d), true);
    p.value = Tensor(Matrix::Identity(d, d), true);
    p.output = Tensor(Matrix::Identity(d, d), true);
    return p;
}

// Head h of entity e as a 4x4 matrix.
Matrix head_block(const Matrix& probs, Index e, Index h)
{
    return probs.block(modality_count * e, modality_count * h, modality_count, modality_count);
}

} // namespace

TEST(Attention, ZeroQueryGivesUniformWeightsAndMeanValues)
{
    std::mt19937_64 rng(1);
    FusionParams p = identity_params(6, 2);
    p.query.mutable_value().setZero();
    p.value.mutable_value() = random_matrix(6, 6, rng);
    const Matrix tokens = random_matrix(12, 6, rng);
    const auto out = cross_modal_attention(constant(tokens), p);
    EXPECT_LT((out.probs.value().array() - 0.25).abs().maxCoeff(), 1e-15);
    const Matrix v = tokens * p.value.value();
    for (Index e = 0; e < 3; ++e)
        for (Index m = 0; m < modality_count; ++m)
            EXPECT_LT((out.output.value().row(4 * e + m) - v.middleRows(4 * e, 4).colwise().mean()).cwiseAbs().maxCoeff(),
                      1e-14);
}

TEST(Attention, SaturatedScoreCopiesThatValueRow)
{
    FusionParams p = identity_params(4, 1);
    p.query.mutable_value() = Matrix::Zero(4, 4);
    p.query.mutable_value().col(0).setOnes();
    p.key.mutable_value() = Matrix::Zero(4, 4);
    p.key.mutable_value()(2, 0) = 2e6; // scaled by 1/sqrt(4): logit 1e6 toward token 2
    const auto out = cross_modal_attention(constant(Matrix::Identity(4, 4)), p);
    for (Index m = 0; m < 4; ++m) {
        EXPECT_NEAR(out.probs.value()(m, 2), 1.0, 1e-15);
        EXPECT_LT((out.output.value().row(m) - Matrix::Identity(4, 4).row(2)).cwiseAbs().maxCoeff(), 1e-15);
    }
}

TEST(Attention, MatchesHandRolledTwoHeadOracle)
{
    std::mt19937_64 rng(2);
    const Index d = 4, heads = 2, dh = 2;
    FusionParams p = identity_params(d, heads);
    for (Tensor* t : {&p.query, &p.key, &p.value, &p.output})
        t->mutable_value() = random_matrix(d, d, rng);
    const Matrix tokens = random_matrix(4, d, rng);
    const auto out = cross_modal_attention(constant(tokens), p);

    Matrix concat(4, d);
    for (Index h = 0; h < heads; ++h) {
        const Matrix q = tokens * p.query.value().middleCols(h * dh, dh);
        const Matrix k = tokens * p.key.value().middleCols(h * dh, dh);
        const Matrix v = tokens * p.value.value().middleCols(h * dh, dh);
        Matrix beta(4, 4);
        for (Index i = 0; i < 4; ++i) {
            double z = 0.0;
            for (Index j = 0; j < 4; ++j) {
                double s = 0.0;
                for (Index c = 0; c < dh; ++c)
                    s += q(i, c) * k(j, c);
                beta(i, j) = std::exp(s / std::sqrt(2.0));
                z += beta(i, j);
            }
            beta.row(i) /= z;
        }
        EXPECT_LT((head_block(out.probs.value(), 0, h) - beta).cwiseAbs().maxCoeff(), 1e-14);
        concat.middleCols(h * dh, dh) = beta * v;
    }
    EXPECT_LT((out.output.value() - concat * p.output.value()).cwiseAbs().maxCoeff(), 1e-13);
}

TEST(Attention, RowStochasticForArbitraryInputs)
{
    std::mt19937_64 rng(3);
    for (int trial = 0; trial < 10; ++trial) {
        const FusionParams p = random_params(10, 5, 7, rng);
        const Matrix tokens = random_matrix(4 * 6, 10, rng, -20.0, 20.0);
        const Matrix probs = cross_modal_attention(constant(tokens), p).probs.value();
        EXPECT_GE(probs.minCoeff(), 0.0);
        for (Index e = 0; e < 6; ++e)
            for (Index h = 0; h < 5; ++h)
                EXPECT_LT((head_block(probs, e, h).rowwise().sum().array() - 1.0).abs().maxCoeff(), 1e-12);
    }
}

TEST(Attention, RejectsBadShapes)
{
    std::mt19937_64 rng(4);
    const FusionParams p = random_params(6, 2, 5, rng);
    EXPECT_THROW(cross_modal_attention(constant(Matrix::Ones(8, 5)), p), Error);
    EXPECT_THROW(cross_modal_attention(constant(Matrix::Ones(7, 6)), p), Error);
    FusionConfig cfg;
    cfg.heads = 4;
    EXPECT_THROW(init_fusion(6, cfg, rng), Error);
}

TEST(TransformerBlock, ZeroWeightsStandardizeRows)
{
    std::mt19937_64 rng(5);
    const Index d = 8;
    FusionParams p = random_params(d, 2, 6, rng);
    for (Tensor* t : {&p.query, &p.key, &p.value, &p.output, &p.ffn_in, &p.ffn_in_bias, &p.ffn_out, &p.ffn_out_bias,
                      &p.norm1_bias, &p.norm2_bias})
        t->mutable_value().setZero();
    p.norm1_gain.mutable_value().setOnes();
    p.norm2_gain.mutable_value().setOnes();
    const Matrix tokens = random_matrix(12, d, rng, -3.0, 3.0);
    const Matrix out = transformer_block(constant(tokens), p).output.value();
    ASSERT_EQ(out.rows(), tokens.rows());
    ASSERT_EQ(out.cols(), tokens.cols());
    for (Index i = 0; i < tokens.rows(); ++i) {
        const Eigen::RowVectorXd centered = tokens.row(i).array() - tokens.row(i).mean();
        const Eigen::RowVectorXd standard = centered / std::sqrt(centered.squaredNorm() / static_cast<double>(d));
        EXPECT_LT((out.row(i) - standard).cwiseAbs().maxCoeff(), 1e-5);
    }
}

TEST(TransformerBlock, ShapeAndPermutationEquivariance)
{
    std::mt19937_64 rng(6);
    const FusionParams p = random_params(10, 5, 9, rng);
    for (Index n : {1, 3, 7})
        EXPECT_EQ(transformer_block(constant(random_matrix(4 * n, 10, rng)), p).output.rows(), 4 * n);

    const Matrix tokens = random_matrix(4, 10, rng);
    const std::vector<Index> perm{2, 0, 3, 1};
    Matrix permuted(4, 10);
    for (Index i = 0; i < 4; ++i)
        permuted.row(i) = tokens.row(perm[static_cast<std::size_t>(i)]);
    const Matrix a = transformer_block(constant(tokens), p).output.value();
    const Matrix b = transformer_block(constant(permuted), p).output.value();
    for (Index i = 0; i < 4; ++i)
        EXPECT_LT((b.row(i) - a.row(perm[static_cast<std::size_t>(i)])).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(ModalityWeights, SpecExamples)
{
    const std::vector<Matrix> uniform(5, Matrix::Constant(4, 4, 0.25));
    for (double w : modality_weights(uniform))
        EXPECT_NEAR(w, 0.25, 1e-15);

    Matrix onehot = Matrix::Zero(4, 4);
    onehot.col(0).setOnes();
    const auto w = modality_weights(std::vector<Matrix>(5, onehot));
    const double e = std::exp(20.0 / std::sqrt(20.0));
    EXPECT_NEAR(w[0], e / (e + 3.0), 1e-12);
    EXPECT_NEAR(w[0], 0.967, 5e-4);
    EXPECT_NEAR(w[1], 1.0 / (e + 3.0), 1e-12);

    // Outgoing sums of row-stochastic matrices are all N_h.
    for (double v : modality_weights(std::vector<Matrix>(5, onehot), WeightMode::outgoing))
        EXPECT_NEAR(v, 0.25, 1e-15);
    EXPECT_THROW(modality_weights(std::vector<Matrix>{Matrix::Ones(3, 4)}), Error);
}

TEST(ModalityWeights, SumToOneAndShiftInvariant)
{
    std::mt19937_64 rng(7);
    for (int trial = 0; trial < 20; ++trial) {
        std::vector<Matrix> heads;
        for (int h = 0; h < 5; ++h) {
            Matrix b = random_matrix(4, 4, rng, 0.0, 1.0);
            heads.push_back(b.array().colwise() / b.rowwise().sum().array());
        }
        const auto w = modality_weights(heads);
        double total = 0.0;
        for (double v : w) {
            EXPECT_GE(v, 0.0);
            total += v;
        }
        EXPECT_NEAR(total, 1.0, 1e-12);

        const Matrix s = random_matrix(1, 4, rng, -3.0, 3.0);
        const Matrix a = modality_weights(constant(s), 5).value();
        const Matrix b = modality_weights(constant(s.array() + 17.5), 5).value();
        EXPECT_LT((a - b).cwiseAbs().maxCoeff(), 1e-12);
    }
}

TEST(ModalityWeights, TensorPathMatchesPlainForm)
{
    std::mt19937_64 rng(8);
    const FusionParams p = random_params(10, 5, 8, rng);
    const Index n = 6;
    const Matrix probs = cross_modal_attention(constant(random_matrix(4 * n, 10, rng, -2.0, 2.0)), p).probs.value();
    std::vector<Matrix> mean_heads(5, Matrix::Zero(4, 4));
    for (Index e = 0; e < n; ++e)
        for (Index h = 0; h < 5; ++h)
            mean_heads[static_cast<std::size_t>(h)] += head_block(probs, e, h) / static_cast<double>(n);
    for (auto mode : {WeightMode::incoming, WeightMode::outgoing}) {
        const Matrix w = modality_weights(modality_scores(constant(probs), 5, mode, WeightScope::global), 5).value();
        const auto plain = modality_weights(mean_heads, mode);
        for (Index m = 0; m < 4; ++m)
            EXPECT_NEAR(w(0, m), plain[static_cast<std::size_t>(m)], 1e-13);
    }
    const Matrix per_entity = modality_scores(constant(probs), 5, WeightMode::incoming, WeightScope::entity).value();
    EXPECT_EQ(per_entity.rows(), n);
    EXPECT_LT((per_entity.rowwise().sum().array() - 20.0).abs().maxCoeff(), 1e-12);
}

TEST(FuseJoint, BlocksWidthAndNormalization)
{
    std::mt19937_64 rng(9);
    const Index n = 5, d = 6;
    std::array<Tensor, modality_count> hidden;
    for (auto& h : hidden)
        h = constant(random_matrix(n, d, rng));
    const Tensor g = constant(random_matrix(n, d, rng));
    const Matrix joint = fuse_joint(g, hidden, constant((Matrix(1, 4) << 0.4, 0.3, 0.0, 0.3).finished())).value();
    EXPECT_EQ(joint.cols(), 4 * d);
    EXPECT_EQ(joint.middleCols(2 * d, d).cwiseAbs().maxCoeff(), 0.0);
    for (Index i = 0; i < n; ++i)
        EXPECT_NEAR(joint.row(i).dot(joint.row(i)), 1.0, 1e-14);
    // Row i before normalization is [g | 0.3 r | 0 | 0.3 v].
    Eigen::RowVectorXd raw(4 * d);
    raw << g.value().row(1), 0.3 * hidden[1].value().row(1), Eigen::RowVectorXd::Zero(d), 0.3 * hidden[3].value().row(1);
    EXPECT_LT((joint.row(1) - raw / raw.norm()).cwiseAbs().maxCoeff(), 1e-14);
}

TEST(Fuse, DisabledModalityHasZeroWeightAndBlock)
{
    std::mt19937_64 rng(10);
    const FusionParams p = random_params(10, 5, 8, rng);
    std::array<Tensor, modality_count> in;
    for (auto& t : in)
        t = constant(random_matrix(4, 10, rng));
    const auto out = fuse(in, p, FusionConfig{}, {true, true, false, true});
    EXPECT_EQ(out.weights.value()(0, 2), 0.0);
    EXPECT_NEAR(out.weights.value().sum(), 1.0, 1e-12);
    EXPECT_EQ(out.joint.value().middleCols(20, 10).cwiseAbs().maxCoeff(), 0.0);
}

TEST(Fuse, GradientMatchesFiniteDifferences)
{
    std::mt19937_64 rng(11);
    const Index n = 3, d = 10;
    const FusionParams p = random_params(d, 2, 7, rng);
    std::array<Tensor, modality_count> in;
    for (auto& t : in)
        t = Tensor(random_matrix(n, d, rng), true);
    const Tensor wj = constant(random_matrix(n, 4 * d, rng));
    const Tensor ww = constant(random_matrix(1, 4, rng));
    const Tensor ww_entity = constant(random_matrix(n, 4, rng));
    for (auto scope : {WeightScope::global, WeightScope::entity}) {
        FusionConfig cfg;
        cfg.heads = 2;
        cfg.weight_scope = scope;
        auto loss = [&] {
            const auto out = fuse(in, p, cfg);
            const Tensor& w = scope == WeightScope::global ? ww : ww_entity;
            return add(sum(hadamard(out.joint, wj)), sum(hadamard(out.weights, w)));
        };
        std::vector<Tensor> params{in.begin(), in.end()};
        for (const Tensor* t : {&p.type_embedding, &p.query, &p.key, &p.value, &p.output, &p.ffn_in, &p.ffn_in_bias,
                                &p.ffn_out, &p.ffn_out_bias, &p.norm1_gain, &p.norm1_bias, &p.norm2_gain, &p.norm2_bias})
            params.push_back(*t);
        EXPECT_LT(check_gradients(loss, params, 4, 1e-5, rng, 1e-7).max_relative_error, 1e-5);
    }
}
