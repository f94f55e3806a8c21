#ifndef MYGRAM_FUSION_HPP
#define MYGRAM_FUSION_HPP

// Cross-modal fusion. Each entity contributes four tokens (graph, relation,
// attribute, visual) that attend to one another through a single multi-head
// transformer block. Attention mass received by each modality yields the
// modality weights that scale the blocks of the joint embedding.
//
// Token matrices are entity-major: row 4*e + m holds modality m of entity e.

#include "mygram/encoders.hpp"
#include "mygram/ops.hpp"

#include <array>
#include <cmath>
#include <limits>
#include <random>
#include <string>
#include <vector>

namespace mygram {

enum class WeightMode { incoming, outgoing };
enum class WeightScope { global, entity };

struct FusionConfig {
    Index heads = 5;
    Index ffn_dim = 400;
    WeightMode weight_mode = WeightMode::incoming;
    WeightScope weight_scope = WeightScope::global;
};

struct FusionParams {
    Index heads = 5;
    Tensor type_embedding; // 4 x d
    Tensor query, key, value; // d x d, head i uses columns [i*dh, (i+1)*dh)
    Tensor output;            // d x d
    Tensor ffn_in, ffn_in_bias;   // d x f, 1 x f
    Tensor ffn_out, ffn_out_bias; // f x d, 1 x d
    Tensor norm1_gain, norm1_bias, norm2_gain, norm2_bias;

    Index hidden() const { return query.rows(); }
    Index head_dim() const { return hidden() / heads; }
};

namespace detail {

inline Tensor glorot(Index rows, Index cols, std::mt19937_64& rng)
{
    const double limit = std::sqrt(6.0 / static_cast<double>(rows + cols));
    std::uniform_real_distribution<double> u(-limit, limit);
    Matrix m(rows, cols);
    for (Index i = 0; i < m.size(); ++i)
        m.data()[i] = u(rng);
    return Tensor(std::move(m), true);
}

} // namespace detail

inline FusionParams init_fusion(Index hidden, const FusionConfig& cfg, std::mt19937_64& rng)
{
    if (cfg.heads < 1 || hidden % cfg.heads != 0)
        throw Error("fusion: hidden size " + std::to_string(hidden) + " is not divisible by " +
                    std::to_string(cfg.heads) + " heads");
    FusionParams p;
    p.heads = cfg.heads;
    std::uniform_real_distribution<double> u(-1.0 / std::sqrt(static_cast<double>(hidden)),
                                             1.0 / std::sqrt(static_cast<double>(hidden)));
    Matrix type(modality_count, hidden);
    for (Index i = 0; i < type.size(); ++i)
        type.data()[i] = u(rng);
    p.type_embedding = Tensor(std::move(type), true);
    p.query = detail::glorot(hidden, hidden, rng);
    p.key = detail::glorot(hidden, hidden, rng);
    p.value = detail::glorot(hidden, hidden, rng);
    p.output = detail::glorot(hidden, hidden, rng);
    p.ffn_in = detail::glorot(hidden, cfg.ffn_dim, rng);
    p.ffn_in_bias = Tensor::zeros(1, cfg.ffn_dim, true);
    p.ffn_out = detail::glorot(cfg.ffn_dim, hidden, rng);
    p.ffn_out_bias = Tensor::zeros(1, hidden, true);
    p.norm1_gain = Tensor(Matrix::Ones(1, hidden), true);
    p.norm1_bias = Tensor::zeros(1, hidden, true);
    p.norm2_gain = Tensor(Matrix::Ones(1, hidden), true);
    p.norm2_bias = Tensor::zeros(1, hidden, true);
    return p;
}

/// Interleaves per-modality n x d matrices into a 4n x d token matrix.
inline Tensor stack_tokens(const std::array<Tensor, modality_count>& per_modality)
{
    const Index n = per_modality[0].rows();
    std::vector<Index> order(static_cast<std::size_t>(modality_count * n));
    for (Index e = 0; e < n; ++e)
        for (Index m = 0; m < modality_count; ++m)
            order[static_cast<std::size_t>(modality_count * e + m)] = m * n + e;
    return gather_rows(concat_rows({per_modality.begin(), per_modality.end()}), std::move(order));
}

/// Rows of one modality from a 4n x d token matrix.
inline Tensor modality_rows(const Tensor& tokens, Modality m)
{
    const Index n = tokens.rows() / modality_count;
    std::vector<Index> idx(static_cast<std::size_t>(n));
    for (Index e = 0; e < n; ++e)
        idx[static_cast<std::size_t>(e)] = modality_count * e + static_cast<Index>(m);
    return gather_rows(tokens, std::move(idx));
}

struct AttentionResult {
    Tensor output; // 4n x d
    Tensor probs;  // 4n x (heads*4); probs(4e+m, 4h+j) = attention of token m on token j, head h
};

/// Multi-head attention over each entity's four tokens:
/// head_i = softmax((T Q_i)(T K_i)^T / sqrt(dh)) (T V_i), heads concatenated then
/// projected by W_o.
inline AttentionResult cross_modal_attention(const Tensor& tokens, const FusionParams& params)
{
    if (tokens.cols() != params.hidden() || tokens.rows() % modality_count != 0)
        throw Error("cross_modal_attention: expected 4n x " + std::to_string(params.hidden()) + " tokens");
    const Tensor q = matmul(tokens, params.query);
    const Tensor k = matmul(tokens, params.key);
    const Tensor v = matmul(tokens, params.value);
    const double scale = 1.0 / std::sqrt(static_cast<double>(params.head_dim()));
    AttentionResult r;
    r.probs = block_attention_probs(q, k, params.heads, modality_count, scale);
    r.output = matmul(block_attention_apply(r.probs, v, params.heads, modality_count), params.output);
    return r;
}

/// x1 = LN(T + MA(T)); out = LN(x1 + FFN(x1)), FFN = relu affine then affine.
inline AttentionResult transformer_block(const Tensor& tokens, const FusionParams& params)
{
    AttentionResult att = cross_modal_attention(tokens, params);
    const Tensor x1 = layer_norm(add(tokens, att.output), params.norm1_gain, params.norm1_bias, 1e-6);
    const Tensor ffn = add_row(matmul(relu(add_row(matmul(x1, params.ffn_in), params.ffn_in_bias)), params.ffn_out),
                               params.ffn_out_bias);
    att.output = layer_norm(add(x1, ffn), params.norm2_gain, params.norm2_bias, 1e-6);
    return att;
}

/// Per-modality attention scores from block attention probabilities.
/// incoming: s_m = sum_h sum_j beta^(h)_{j,m}; outgoing: s_m = sum_h sum_j beta^(h)_{m,j}.
/// Result is n x 4 (per entity) or 1 x 4 (mean over entities).
inline Tensor modality_scores(const Tensor& probs, Index heads, WeightMode mode, WeightScope scope)
{
    const Index n = probs.rows() / modality_count;
    Tensor per_entity;
    if (mode == WeightMode::incoming) {
        std::vector<Index> entity(static_cast<std::size_t>(probs.rows()));
        for (Index r = 0; r < probs.rows(); ++r)
            entity[static_cast<std::size_t>(r)] = r / modality_count;
        Matrix head_sum = Matrix::Zero(heads * modality_count, modality_count);
        for (Index h = 0; h < heads; ++h)
            for (Index m = 0; m < modality_count; ++m)
                head_sum(h * modality_count + m, m) = 1.0;
        per_entity = matmul(segment_sum(probs, std::move(entity), n), constant(std::move(head_sum)));
    } else {
        per_entity = reshape(row_sum(probs), n, modality_count);
    }
    if (scope == WeightScope::entity)
        return per_entity;
    return matmul(constant(Matrix::Constant(1, n, 1.0 / static_cast<double>(n))), per_entity);
}

/// omega = softmax(s / sqrt(|M| * heads)) along each row. Disabled modalities
/// receive weight exactly 0.
inline Tensor modality_weights(const Tensor& scores, Index heads, const std::array<bool, modality_count>& enabled = {true, true, true, true})
{
    Tensor s = scores;
    bool any_disabled = false;
    for (bool e : enabled)
        any_disabled = any_disabled || !e;
    if (any_disabled) {
        Matrix mask = Matrix::Zero(scores.rows(), scores.cols());
        for (Index m = 0; m < modality_count; ++m)
            if (!enabled[static_cast<std::size_t>(m)])
                mask.col(m).setConstant(-std::numeric_limits<double>::infinity());
        s = add(s, constant(std::move(mask)));
    }
    return row_softmax(s, 1.0 / std::sqrt(static_cast<double>(modality_count * heads)));
}

/// Plain-value form of modality_weights for a set of per-head 4x4
/// row-stochastic matrices (already averaged over entities).
inline std::array<double, modality_count> modality_weights(const std::vector<Matrix>& per_head_attention,
                                                           WeightMode mode = WeightMode::incoming)
{
    const auto heads = static_cast<double>(per_head_attention.size());
    std::array<double, modality_count> s{};
    for (const auto& beta : per_head_attention) {
        if (beta.rows() != modality_count || beta.cols() != modality_count)
            throw Error("modality_weights: attention matrices must be 4x4");
        for (Index m = 0; m < modality_count; ++m)
            s[static_cast<std::size_t>(m)] += (mode == WeightMode::incoming) ? beta.col(m).sum() : beta.row(m).sum();
    }
    const double scale = 1.0 / std::sqrt(static_cast<double>(modality_count) * heads);
    double mx = s[0];
    for (double v : s)
        mx = std::max(mx, v);
    std::array<double, modality_count> w{};
    double total = 0.0;
    for (std::size_t m = 0; m < w.size(); ++m) {
        w[m] = std::exp((s[m] - mx) * scale);
        total += w[m];
    }
    for (double& v : w)
        v /= total;
    return w;
}

/// [H_g | w_r * H~_r | w_a * H~_a | w_v * H~_v], rows L2-normalized.
/// weights is 1x4 (global) or nx4 (per entity).
inline Tensor fuse_joint(const Tensor& structure, const std::array<Tensor, modality_count>& hidden,
                         const Tensor& weights)
{
    std::vector<Tensor> blocks{structure};
    for (Index m = 1; m < modality_count; ++m)
        blocks.push_back(scale_by(hidden[static_cast<std::size_t>(m)], slice_cols(weights, m, 1)));
    return l2_normalize_rows(concat_cols(blocks));
}

struct FusionOutput {
    std::array<Tensor, modality_count> hidden; // H~_m, n x d each
    Tensor weights;                            // 1x4 or nx4
    Tensor joint;                              // n x 4d, unit rows
    Tensor probs;                              // 4n x (heads*4)
};

/// Full fusion pass. inputs[0] is the structure embedding H_g; disabled
/// modalities enter as zero tokens and get zero weight.
inline FusionOutput fuse(const std::array<Tensor, modality_count>& inputs, const FusionParams& params,
                         const FusionConfig& cfg, const std::array<bool, modality_count>& enabled = {true, true, true, true})
{
    const Index n = inputs[0].rows();
    std::vector<Index> type_rows(static_cast<std::size_t>(modality_count * n));
    for (Index r = 0; r < modality_count * n; ++r)
        type_rows[static_cast<std::size_t>(r)] = r % modality_count;
    std::array<Tensor, modality_count> tokens_in = inputs;
    for (std::size_t m = 0; m < tokens_in.size(); ++m)
        if (!enabled[m])
            tokens_in[m] = constant(Matrix::Zero(n, params.hidden()));
    const Tensor tokens = add(stack_tokens(tokens_in), gather_rows(params.type_embedding, std::move(type_rows)));
    const AttentionResult block = transformer_block(tokens, params);

    FusionOutput out;
    for (Index m = 0; m < modality_count; ++m)
        out.hidden[static_cast<std::size_t>(m)] = modality_rows(block.output, static_cast<Modality>(m));
    out.probs = block.probs;
    out.weights = modality_weights(modality_scores(block.probs, params.heads, cfg.weight_mode, cfg.weight_scope),
                                   params.heads, enabled);
    out.joint = fuse_joint(tokens_in[0], out.hidden, out.weights);
    return out;
}

} // namespace mygram

#endif // MYGRAM_FUSION_HPP
