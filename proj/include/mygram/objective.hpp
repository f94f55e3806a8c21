#ifndef MYGRAM_OBJECTIVE_HPP
#define MYGRAM_OBJECTIVE_HPP

// Training objective: Gram-volume contrastive loss over top-K candidates plus
// an in-batch InfoNCE alignment loss.

#include "mygram/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <vector>

namespace mygram {

struct LossConfig {
    double tau = 0.1;         // Gram temperature
    double temperature = 0.1; // InfoNCE temperature
    double lambda = 0.1;      // Gram weight
    Index topk = 16;
    double epsilon = 1e-8;    // volume regularizer
    bool normalize_columns = true;
    bool include_positive = true; // InfoNCE denominator convention

    void validate() const
    {
        if (!(tau > 0.0) || !(temperature > 0.0))
            throw Error("loss: temperatures must be positive");
        if (!(lambda >= 0.0))
            throw Error("loss: lambda must be non-negative");
        if (topk < 2)
            throw Error("loss: topk must be at least 2");
        if (!(epsilon > 0.0))
            throw Error("loss: epsilon must be positive");
    }
};

/// Cosine similarity between rows of a and rows of b; zero rows score 0.
inline Matrix similarity_matrix(const Matrix& a, const Matrix& b)
{
    if (a.cols() != b.cols())
        throw Error("similarity_matrix: width mismatch");
    auto normalized = [](const Matrix& m) {
        Matrix out = m;
        for (Index i = 0; i < out.rows(); ++i) {
            const double nrm = out.row(i).norm();
            if (nrm > 0.0)
                out.row(i) /= nrm;
        }
        return out;
    };
    return normalized(a) * normalized(b).transpose();
}

struct TopK {
    Index rows = 0;
    Index k = 0;
    std::vector<Index> index; // rows x k, row-major

    Index at(Index i, Index j) const { return index[static_cast<std::size_t>(i * k + j)]; }
};

/// Indices of the K largest entries per row, descending; ties go to the lower index.
inline TopK topk_candidates(const Matrix& sim, Index k)
{
    if (k < 1 || k > sim.cols())
        throw Error("topk_candidates: K=" + std::to_string(k) + " outside [1, " + std::to_string(sim.cols()) + "]");
    TopK out{sim.rows(), k, std::vector<Index>(static_cast<std::size_t>(sim.rows() * k))};
    std::vector<Index> order(static_cast<std::size_t>(sim.cols()));
    for (Index i = 0; i < sim.rows(); ++i) {
        std::iota(order.begin(), order.end(), Index{0});
        std::partial_sort(order.begin(), order.begin() + k, order.end(), [&](Index a, Index b) {
            const double x = sim(i, a), y = sim(i, b);
            return x > y || (x == y && a < b);
        });
        std::copy(order.begin(), order.begin() + k, out.index.begin() + i * k);
    }
    return out;
}

/// Vol = sqrt(|det(m^T m)| + eps) for a d x 4 matrix.
inline Tensor gram_volume(const Tensor& m, double epsilon)
{
    if (m.cols() != 4)
        throw Error("gram_volume: expected d x 4, got " + std::to_string(m.rows()) + "x" + std::to_string(m.cols()));
    const Tensor g = matmul(transpose(m), m);
    return sqrt(add(abs(det4(g)), constant(Matrix::Constant(1, 1, epsilon))));
}

/// Source structural rows against candidate target rows.
///
/// source_struct holds one row per sample; the target tensors hold every target
/// entity. mask(i,k) = 1 iff topk(i,k) == target[i].
struct GramBatch {
    Tensor source_struct; // M x d
    Tensor target_visual; // n2 x d
    Tensor target_attr;   // n2 x d
    Tensor target_rel;    // n2 x d
    TopK topk;
    std::vector<Index> target;
    Matrix mask; // M x K

    Index samples() const { return source_struct.rows(); }
};

/// Selects candidates by structural-visual cosine similarity and builds the mask.
inline GramBatch make_gram_batch(Tensor source_struct, Tensor target_visual, Tensor target_attr, Tensor target_rel,
                                 std::vector<Index> target, Index k)
{
    if (static_cast<Index>(target.size()) != source_struct.rows())
        throw Error("make_gram_batch: one target per source row required");
    GramBatch b{std::move(source_struct), std::move(target_visual), std::move(target_attr), std::move(target_rel), {},
                std::move(target), {}};
    b.topk = topk_candidates(similarity_matrix(b.source_struct.value(), b.target_visual.value()), k);
    b.mask = Matrix::Zero(b.samples(), k);
    for (Index i = 0; i < b.samples(); ++i)
        for (Index j = 0; j < k; ++j)
            if (b.topk.at(i, j) == b.target[static_cast<std::size_t>(i)])
                b.mask(i, j) = 1.0;
    return b;
}

/// Columns [H_g^s(i), H_v^t(c), H_a^t(c), H_r^t(c)] with c = topk(i,k).
inline Tensor build_parallelotope(const GramBatch& batch, Index i, Index k, bool normalize = true)
{
    const Index c = batch.topk.at(i, k);
    std::vector<Tensor> cols{gather_rows(batch.source_struct, {i}), gather_rows(batch.target_visual, {c}),
                             gather_rows(batch.target_attr, {c}), gather_rows(batch.target_rel, {c})};
    if (normalize)
        for (auto& col : cols)
            col = l2_normalize_rows(col);
    return transpose(concat_rows(cols));
}

/// Volumes for the given samples, |samples| x K.
inline Tensor gram_volumes(const GramBatch& batch, const std::vector<Index>& samples, const LossConfig& cfg)
{
    const Index k = batch.topk.k;
    std::vector<Index> src_rows, cand_rows;
    for (Index i : samples)
        for (Index j = 0; j < k; ++j) {
            src_rows.push_back(i);
            cand_rows.push_back(batch.topk.at(i, j));
        }
    auto prep = [&](const Tensor& t) { return cfg.normalize_columns ? l2_normalize_rows(t) : t; };
    const std::array<Tensor, 4> cols{gather_rows(prep(batch.source_struct), std::move(src_rows)),
                                     gather_rows(prep(batch.target_visual), cand_rows),
                                     gather_rows(prep(batch.target_attr), cand_rows),
                                     gather_rows(prep(batch.target_rel), cand_rows)};
    std::array<std::array<Tensor, 4>, 4> entries;
    for (std::size_t a = 0; a < 4; ++a)
        for (std::size_t b = a; b < 4; ++b) {
            entries[a][b] = row_sum(hadamard(cols[a], cols[b]));
            entries[b][a] = entries[a][b];
        }
    std::vector<Tensor> flat;
    for (std::size_t a = 0; a < 4; ++a)
        for (std::size_t b = 0; b < 4; ++b)
            flat.push_back(entries[a][b]);
    const Tensor det = det4_rows(concat_cols(flat));
    const auto count = static_cast<Index>(samples.size());
    const Tensor vol = sqrt(add(abs(det), constant(Matrix::Constant(det.rows(), 1, cfg.epsilon))));
    return reshape(vol, count, k);
}

/// Mean over samples whose target is among their top-K of
///   -log softmax(-Vol/tau)[p];
/// 0 when no sample qualifies.
inline Tensor gram_loss(const GramBatch& batch, const LossConfig& cfg)
{
    cfg.validate();
    std::vector<Index> present;
    for (Index i = 0; i < batch.samples(); ++i)
        if (batch.mask.row(i).sum() > 0.0)
            present.push_back(i);
    if (present.empty())
        return Tensor::scalar(0.0);
    Matrix mask(static_cast<Index>(present.size()), batch.topk.k);
    for (std::size_t r = 0; r < present.size(); ++r)
        mask.row(static_cast<Index>(r)) = batch.mask.row(present[r]);
    const Tensor logits = scale(gram_volumes(batch, present, cfg), -1.0 / cfg.tau);
    const Tensor positive = row_sum(hadamard(logits, constant(std::move(mask))));
    return mean(subtract(row_logsumexp(logits), positive));
}

/// Symmetrized in-batch InfoNCE over aligned rows: row i of source and row i of
/// target form a positive pair, every other target row is a negative.
inline Tensor infonce_loss(const Tensor& source_joint, const Tensor& target_joint, const LossConfig& cfg)
{
    cfg.validate();
    if (source_joint.rows() != target_joint.rows() || source_joint.cols() != target_joint.cols())
        throw Error("infonce_loss: source and target batches differ in shape");
    const Index b = source_joint.rows();
    if (b < 2)
        throw Error("infonce_loss: need at least 2 pairs per batch");
    const Tensor logits = scale(matmul(l2_normalize_rows(source_joint), transpose(l2_normalize_rows(target_joint))),
                                1.0 / cfg.temperature);
    const Matrix identity = Matrix::Identity(b, b);
    Matrix keep = Matrix::Ones(b, b);
    if (!cfg.include_positive)
        keep -= identity;
    auto direction = [&](const Tensor& s) {
        const Tensor positive = row_sum(hadamard(s, constant(identity)));
        return mean(subtract(row_logsumexp(s, &keep), positive));
    };
    return scale(add(direction(logits), direction(transpose(logits))), 0.5);
}

inline Tensor total_loss(const Tensor& infonce, const Tensor& gram, double lambda)
{
    return add(infonce, scale(gram, lambda));
}

} // namespace mygram

#endif // MYGRAM_OBJECTIVE_HPP
