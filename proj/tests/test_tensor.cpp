#include "mygram/checkpoint.hpp"
#include "mygram/ops.hpp"
#include "test_support.hpp"

#include <gtest/gtest.h>

#include <Eigen/LU>

#include <cmath>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

using namespace mygram;
using mygram::testing::check_gradients;
using mygram::testing::random_matrix;

namespace {

// Entries in [0.1, 1] with random sign, away from the kinks of relu/abs.
Matrix away_from_zero(Index rows, Index cols, std::mt19937_64& rng)
{
    Matrix m = random_matrix(rows, cols, rng, 0.1, 1.0);
    std::bernoulli_distribution flip(0.5);
    for (Index i = 0; i < m.size(); ++i)
        if (flip(rng))
            m.data()[i] = -m.data()[i];
    return m;
}

struct PrimitiveCase {
    std::string name;
    std::vector<Matrix> inputs;
    std::function<Tensor(const std::vector<Tensor>&)> op;
};

std::vector<PrimitiveCase> primitive_cases()
{
    std::mt19937_64 rng(11);
    auto r = [&](Index a, Index b) { return random_matrix(a, b, rng); };
    auto pos = [&](Index a, Index b) { return random_matrix(a, b, rng, 0.5, 2.0); };
    auto nz = [&](Index a, Index b) { return away_from_zero(a, b, rng); };
    SparseMatrix* adj = new SparseMatrix(5, 5); // lives for the whole test binary
    {
        std::vector<Eigen::Triplet<double>> t{{0, 0, 0.5}, {0, 1, 0.3}, {1, 0, 0.3}, {2, 3, -0.7}, {3, 2, -0.7}, {4, 4, 1.1}};
        adj->setFromTriplets(t.begin(), t.end());
    }
    Matrix probs_q = r(8, 6), probs_k = r(8, 6);
    return {
        {"matmul", {r(3, 4), r(4, 2)}, [](auto& x) { return matmul(x[0], x[1]); }},
        {"add", {r(3, 4), r(3, 4)}, [](auto& x) { return add(x[0], x[1]); }},
        {"subtract", {r(3, 4), r(3, 4)}, [](auto& x) { return subtract(x[0], x[1]); }},
        {"add_row", {r(3, 4), r(1, 4)}, [](auto& x) { return add_row(x[0], x[1]); }},
        {"hadamard", {r(3, 4), r(3, 4)}, [](auto& x) { return hadamard(x[0], x[1]); }},
        {"scale", {r(3, 4)}, [](auto& x) { return scale(x[0], -1.7); }},
        {"scale_by_scalar", {r(3, 4), r(1, 1)}, [](auto& x) { return scale_by(x[0], x[1]); }},
        {"scale_by_rows", {r(3, 4), r(3, 1)}, [](auto& x) { return scale_by(x[0], x[1]); }},
        {"concat_cols", {r(3, 2), r(3, 3)}, [](auto& x) { return concat_cols({x[0], x[1]}); }},
        {"concat_rows", {r(2, 3), r(1, 3)}, [](auto& x) { return concat_rows({x[0], x[1]}); }},
        {"slice_cols", {r(3, 5)}, [](auto& x) { return slice_cols(x[0], 1, 3); }},
        {"transpose", {r(3, 4)}, [](auto& x) { return transpose(x[0]); }},
        {"reshape", {r(3, 4)}, [](auto& x) { return reshape(x[0], 2, 6); }},
        {"relu", {nz(3, 4)}, [](auto& x) { return relu(x[0]); }},
        {"leaky_relu", {nz(3, 4)}, [](auto& x) { return leaky_relu(x[0], 0.2); }},
        {"tanh", {r(3, 4)}, [](auto& x) { return mygram::tanh(x[0]); }},
        {"exp", {r(3, 4)}, [](auto& x) { return mygram::exp(x[0]); }},
        {"log", {pos(3, 4)}, [](auto& x) { return mygram::log(x[0]); }},
        {"sqrt", {pos(3, 4)}, [](auto& x) { return mygram::sqrt(x[0]); }},
        {"abs", {nz(3, 4)}, [](auto& x) { return mygram::abs(x[0]); }},
        {"sum", {r(3, 4)}, [](auto& x) { return sum(x[0]); }},
        {"mean", {r(3, 4)}, [](auto& x) { return mean(x[0]); }},
        {"row_sum", {r(3, 4)}, [](auto& x) { return row_sum(x[0]); }},
        {"gather_rows", {r(4, 3)}, [](auto& x) { return gather_rows(x[0], {2, 0, 2, 3}); }},
        {"l2_normalize_rows", {r(4, 3)}, [](auto& x) { return l2_normalize_rows(x[0]); }},
        {"row_softmax", {r(3, 5)}, [](auto& x) { return row_softmax(x[0], 1.3); }},
        {"row_logsumexp", {r(3, 5)}, [](auto& x) { return row_logsumexp(x[0]); }},
        {"row_logsumexp_masked", {r(3, 3)},
         [](auto& x) {
             static const Matrix keep = Matrix::Ones(3, 3) - Matrix::Identity(3, 3);
             return row_logsumexp(x[0], &keep);
         }},
        {"layer_norm", {r(3, 6), r(1, 6), r(1, 6)}, [](auto& x) { return layer_norm(x[0], x[1], x[2], 1e-6); }},
        {"det4", {r(4, 4)}, [](auto& x) { return det4(x[0]); }},
        {"det4_rows", {r(3, 16)}, [](auto& x) { return det4_rows(x[0]); }},
        {"spmm", {r(5, 3)}, [adj](auto& x) { return spmm(*adj, x[0]); }},
        {"segment_sum", {r(5, 3)}, [](auto& x) { return segment_sum(x[0], {0, 2, 0, 1, 2}, 3); }},
        {"segment_softmax", {r(5, 1)}, [](auto& x) { return segment_softmax(x[0], {0, 2, 0, 1, 2}, 3); }},
        {"block_attention_probs", {probs_q, probs_k},
         [](auto& x) { return block_attention_probs(x[0], x[1], 2, 4, 0.7); }},
        {"block_attention_apply", {random_matrix(8, 8, rng, 0.0, 1.0), r(8, 6)},
         [](auto& x) { return block_attention_apply(x[0], x[1], 2, 4); }},
    };
}

} // namespace

TEST(Primitives, AnalyticGradientsMatchCentralDifferences)
{
    std::mt19937_64 rng(2024);
    for (auto& c : primitive_cases()) {
        std::vector<Tensor> inputs;
        for (const auto& m : c.inputs)
            inputs.emplace_back(m, true);
        // Contract the output with a fixed random weight so every output entry matters.
        const Tensor probe_out = c.op(inputs);
        const Tensor weight = constant(random_matrix(probe_out.rows(), probe_out.cols(), rng));
        auto loss = [&] { return sum(hadamard(c.op(inputs), weight)); };
        const auto report = check_gradients(loss, inputs, 25, 1e-5, rng);
        EXPECT_LT(report.max_relative_error, 1e-5) << c.name;
    }
}

TEST(Matmul, IdentityAndHandComputedProduct)
{
    std::mt19937_64 rng(1);
    const Matrix x = random_matrix(3, 3, rng);
    EXPECT_EQ(matmul(constant(Matrix::Identity(3, 3)), constant(x)).value(), x);

    Matrix a(2, 2), b(2, 2), expected(2, 2);
    a << 1, 2, 3, 4;
    b << 5, 6, 7, 8;
    // Triple-loop oracle.
    for (int i = 0; i < 2; ++i)
        for (int j = 0; j < 2; ++j) {
            double s = 0;
            for (int k = 0; k < 2; ++k)
                s += a(i, k) * b(k, j);
            expected(i, j) = s;
        }
    EXPECT_EQ(matmul(constant(a), constant(b)).value(), expected);
    EXPECT_THROW(matmul(constant(a), constant(Matrix::Ones(3, 1))), Error);
}

TEST(RowSoftmax, ClosedForms)
{
    const auto uniform = row_softmax(constant(Matrix::Constant(1, 4, 2.5)), 1.0).value();
    for (Index j = 0; j < 4; ++j)
        EXPECT_DOUBLE_EQ(uniform(0, j), 0.25);

    Matrix row(1, 2);
    row << 0.0, std::log(3.0);
    const auto p = row_softmax(constant(row), 1.0).value();
    EXPECT_NEAR(p(0, 0), 0.25, 1e-15);
    EXPECT_NEAR(p(0, 1), 0.75, 1e-15);

    std::mt19937_64 rng(3);
    const auto q = row_softmax(constant(random_matrix(20, 7, rng, -30, 30)), 0.4).value();
    for (Index i = 0; i < q.rows(); ++i)
        EXPECT_NEAR(q.row(i).sum(), 1.0, 1e-12);
    EXPECT_THROW(row_softmax(constant(row), 0.0), Error);
}

TEST(Det4, IdentityDiagonalAndLuOracle)
{
    EXPECT_DOUBLE_EQ(det4(constant(Matrix::Identity(4, 4))).item(), 1.0);
    Matrix d = Matrix::Zero(4, 4);
    d.diagonal() << 2, 3, 4, 5;
    EXPECT_DOUBLE_EQ(det4(constant(d)).item(), 120.0);

    std::mt19937_64 rng(5);
    for (int trial = 0; trial < 200; ++trial) {
        const Matrix g = random_matrix(4, 4, rng, -3, 3);
        const double lu = Eigen::PartialPivLU<Eigen::Matrix4d>(Eigen::Matrix4d(g)).determinant();
        EXPECT_LT(mygram::testing::relative_error(det4(constant(g)).item(), lu, 1e-300), 1e-10);
    }
}

TEST(Det4, GradientIsCofactorMatrixEvenWhenSingular)
{
    std::mt19937_64 rng(6);
    Matrix g = random_matrix(4, 4, rng);
    g.col(3) = g.col(1); // rank 3
    Tensor t(g, true);
    {
        Recording rec;
        backward(det4(t));
    }
    EXPECT_GT(t.grad().norm(), 0.0);
    // adj(g)^T for rank-3 g is non-zero; compare against finite differences.
    auto report = check_gradients([&] { return det4(t); }, {t}, 25, 1e-5, rng);
    EXPECT_LT(report.max_relative_error, 1e-6);
}

TEST(LayerNorm, ClosedForms)
{
    const Tensor gain(Matrix::Ones(1, 2)), bias(Matrix::Zero(1, 2));
    const auto zero = layer_norm(constant(Matrix::Constant(1, 2, 4.0)), gain, bias, 1e-6).value();
    EXPECT_EQ(zero, Matrix::Zero(1, 2));

    Matrix row(1, 2);
    row << 1.0, 3.0;
    const auto y = layer_norm(constant(row), gain, bias, 1e-6).value();
    EXPECT_NEAR(y(0, 0), -1.0, 1e-6);
    EXPECT_NEAR(y(0, 1), 1.0, 1e-6);

    std::mt19937_64 rng(8);
    const Tensor g1(Matrix::Ones(1, 9)), b1(random_matrix(1, 9, rng));
    const auto out = layer_norm(constant(random_matrix(6, 9, rng, -5, 5)), g1, b1, 1e-6).value();
    for (Index i = 0; i < out.rows(); ++i)
        EXPECT_NEAR(out.row(i).mean(), b1.value().mean(), 1e-12);
}

TEST(Dropout, IdentityCasesAndExpectation)
{
    std::mt19937_64 rng(9);
    const Tensor x(random_matrix(4, 5, rng));
    EXPECT_EQ(dropout(x, 0.0, Mode::train, rng).value(), x.value());
    EXPECT_EQ(dropout(x, 0.0, Mode::eval, rng).value(), x.value());
    EXPECT_EQ(dropout(x, 0.5, Mode::eval, rng).value(), x.value());

    Matrix acc = Matrix::Zero(4, 5);
    const int draws = 10000;
    std::mt19937_64 mc(10);
    for (int i = 0; i < draws; ++i)
        acc += dropout(x, 0.3, Mode::train, mc).value();
    acc /= draws;
    EXPECT_LT((acc - x.value()).norm() / x.value().norm(), 0.02);

    std::mt19937_64 a(77), b(77);
    EXPECT_EQ(dropout(x, 0.4, Mode::train, a).value(), dropout(x, 0.4, Mode::train, b).value());
    EXPECT_THROW(dropout(x, 1.0, Mode::train, rng), Error);
}

TEST(Backward, SimpleLossesAndAccumulation)
{
    std::mt19937_64 rng(12);
    Tensor w(random_matrix(3, 2, rng), true);
    {
        Recording rec;
        backward(sum(w));
    }
    EXPECT_EQ(w.grad(), Matrix::Ones(3, 2));
    w.zero_grad();
    {
        Recording rec;
        const Tensor loss = sum(hadamard(w, w));
        backward(loss);
        EXPECT_TRUE(w.grad().isApprox(2.0 * w.value(), 1e-15));
        backward(loss); // accumulates
        EXPECT_TRUE(w.grad().isApprox(4.0 * w.value(), 1e-15));
    }
}

TEST(Backward, Errors)
{
    Tensor w(Matrix::Ones(2, 2), true);
    {
        Recording rec;
        EXPECT_THROW(backward(scale(w, 2.0)), Error);
    }
    const Tensor outside = sum(w);
    EXPECT_THROW(backward(outside), Error); // no active recording
    {
        Recording rec;
        Tensor z(Matrix::Zero(1, 1), true);
        EXPECT_THROW(backward(sum(mygram::sqrt(z))), Error);
    }
}

TEST(Backward, ChainVisitsEveryRecordOnce)
{
    Tensor x(Matrix::Constant(2, 2, 0.3), true);
    Recording rec;
    Tensor y = x;
    const int n = 50;
    for (int i = 0; i < n; ++i)
        y = mygram::tanh(y);
    const Tensor loss = sum(y);
    ASSERT_EQ(rec.size(), static_cast<std::size_t>(n + 1));
    backward(loss);
    EXPECT_EQ(rec.last_visit_count(), static_cast<std::size_t>(n + 1));
}

TEST(Backward, ConstantsProduceNoRecords)
{
    Recording rec;
    const Tensor a(Matrix::Ones(2, 2));
    const Tensor b = matmul(a, a);
    EXPECT_EQ(rec.size(), 0u);
    EXPECT_FALSE(b.requires_grad());
}

TEST(Checkpoint, RoundTripIsBitExact)
{
    std::mt19937_64 rng(13);
    NamedMatrices params{{"alpha", random_matrix(3, 4, rng)}, {"é.unicode", random_matrix(1, 7, rng)},
                         {"empty", Matrix(0, 3)}};
    const auto path = std::filesystem::temp_directory_path() / "mygram_ckpt_test.bin";
    save_checkpoint(path, params);
    const auto loaded = load_checkpoint(path);
    ASSERT_EQ(loaded.size(), params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
        EXPECT_EQ(loaded[i].first, params[i].first);
        EXPECT_EQ(loaded[i].second, params[i].second);
    }
    // 4 + per param (4 + name + 8 + 8*entries)
    std::uintmax_t expected = 4;
    for (const auto& [name, m] : params)
        expected += 4 + name.size() + 8 + 8 * static_cast<std::uintmax_t>(m.size());
    EXPECT_EQ(std::filesystem::file_size(path), expected);
    std::filesystem::remove(path);
    EXPECT_THROW(load_checkpoint(path), Error);
}
