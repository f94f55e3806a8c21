#ifndef MYGRAM_ENCODERS_HPP
#define MYGRAM_ENCODERS_HPP

// Per-modality entity encoders: a relational-reflection graph attention network
// for structure, and affine projections for relation, attribute and visual
// features.

#include "mygram/kgdata.hpp"
#include "mygram/ops.hpp"

#include <cmath>
#include <limits>
#include <memory>
#include <random>
#include <string>
#include <vector>

namespace mygram {

enum class Modality : int { graph = 0, relation = 1, attribute = 2, visual = 3 };
inline constexpr int modality_count = 4;

inline const char* modality_name(Modality m)
{
    switch (m) {
    case Modality::graph: return "graph";
    case Modality::relation: return "relation";
    case Modality::attribute: return "attribute";
    case Modality::visual: return "visual";
    }
    return "?";
}

/// Affine map from d_m raw features to the hidden size. Stored input-major
/// (d_m x d) so rows of the feature matrix multiply directly.
struct ModalityProjection {
    Modality modality = Modality::relation;
    Tensor weight; // d_m x d
    Tensor bias;   // 1 x d
};

inline Tensor project_modality(const ModalityProjection& proj, const Matrix& features)
{
    if (features.cols() != proj.weight.rows())
        throw Error(std::string("project_modality(") + modality_name(proj.modality) + "): feature width " +
                    std::to_string(features.cols()) + " does not match " + std::to_string(proj.weight.rows()));
    return add_row(matmul(constant(features), proj.weight), proj.bias);
}

/// Householder reflection I - 2 r r^T for a unit vector r.
inline Matrix reflection_matrix(const Eigen::VectorXd& r)
{
    if (std::abs(r.norm() - 1.0) > 1e-8)
        throw Error("reflection_matrix: relation vector must have unit norm");
    Matrix m = Matrix::Identity(r.size(), r.size());
    m.noalias() -= 2.0 * r * r.transpose();
    return m;
}

/// Directed message edges for the structure encoder. Each triple yields a
/// message in both directions; every entity also receives a self message
/// (relation index == relation_count, the identity reflection).
struct RelationalEdges {
    Index entity_count = 0;
    Index relation_count = 0;
    std::vector<Index> target; // receiving entity i
    std::vector<Index> source; // neighbor j
    std::vector<Index> relation;
};

inline RelationalEdges relational_edges(const MultiModalKG& kg)
{
    RelationalEdges e;
    e.entity_count = kg.entity_count;
    e.relation_count = kg.relation_count;
    auto push = [&e](Index i, Index j, Index r) {
        e.target.push_back(i);
        e.source.push_back(j);
        e.relation.push_back(r);
    };
    for (Index i = 0; i < kg.entity_count; ++i)
        push(i, i, kg.relation_count);
    for (const auto& t : kg.triples) {
        push(t.head, t.tail, t.relation);
        if (t.head != t.tail)
            push(t.tail, t.head, t.relation);
    }
    return e;
}

struct RRGATParams {
    Tensor entity_embeddings; // n x d, learnable base embeddings
    Tensor attention;         // 1 x 2d
    Tensor relation_vectors;  // relation_count x d, unit rows
    Tensor output_projection; // (layers*d) x d
    int layers = 2;

    /// Restores unit norm on every relation vector (zero rows are left alone).
    void renormalize_relations()
    {
        Matrix& r = relation_vectors.mutable_value();
        for (Index i = 0; i < r.rows(); ++i) {
            const double nrm = r.row(i).norm();
            if (nrm > 0.0)
                r.row(i) /= nrm;
        }
    }
};

inline RRGATParams init_rrgat(Index entities, Index relations, Index hidden, int layers, std::mt19937_64& rng)
{
    RRGATParams p;
    p.layers = layers;
    const double d = static_cast<double>(hidden);
    std::uniform_real_distribution<double> emb(-1.0 / std::sqrt(d), 1.0 / std::sqrt(d));
    Matrix x(entities, hidden);
    for (Index i = 0; i < x.size(); ++i)
        x.data()[i] = emb(rng);
    p.entity_embeddings = Tensor(std::move(x), true);

    std::uniform_real_distribution<double> att(-1.0 / std::sqrt(2.0 * d), 1.0 / std::sqrt(2.0 * d));
    Matrix a(1, 2 * hidden);
    for (Index i = 0; i < a.size(); ++i)
        a.data()[i] = att(rng);
    p.attention = Tensor(std::move(a), true);

    std::normal_distribution<double> normal(0.0, 1.0);
    Matrix r(relations, hidden);
    for (Index i = 0; i < r.size(); ++i)
        r.data()[i] = normal(rng);
    p.relation_vectors = Tensor(std::move(r), true);
    p.renormalize_relations();

    const double limit = std::sqrt(6.0 / (static_cast<double>(layers) * d + d));
    std::uniform_real_distribution<double> glorot(-limit, limit);
    Matrix w(layers * hidden, hidden);
    for (Index i = 0; i < w.size(); ++i)
        w.data()[i] = glorot(rng);
    p.output_projection = Tensor(std::move(w), true);
    return p;
}

namespace detail {

struct RRGATForward {
    Matrix reflected;            // E x d, M_r h_j per message
    Eigen::VectorXd projection;  // E, r . h_j
    Eigen::VectorXd logits;      // E, before leaky relu
    Eigen::VectorXd weights;     // E, attention
};

inline RRGATForward rrgat_messages(const Matrix& h, const Matrix& omega, const Matrix& rel, const RelationalEdges& edges)
{
    const Index d = h.cols();
    const auto count = static_cast<Index>(edges.target.size());
    if (omega.cols() != 2 * d || rel.cols() != d || rel.rows() != edges.relation_count)
        throw Error("rrgat: parameter shapes do not match the hidden size");
    RRGATForward f;
    f.reflected.resize(count, d);
    f.projection.setZero(count);
    f.logits.resize(count);
    const auto w_self = omega.row(0).head(d);
    const auto w_msg = omega.row(0).tail(d);
    const Eigen::VectorXd self_score = h * w_self.transpose();
    for (Index e = 0; e < count; ++e) {
        const auto j = edges.source[static_cast<std::size_t>(e)];
        const auto r = edges.relation[static_cast<std::size_t>(e)];
        f.reflected.row(e) = h.row(j);
        if (r < edges.relation_count) {
            f.projection(e) = rel.row(r).dot(h.row(j));
            f.reflected.row(e) -= 2.0 * f.projection(e) * rel.row(r);
        }
        f.logits(e) = self_score(edges.target[static_cast<std::size_t>(e)]) + w_msg.dot(f.reflected.row(e));
    }
    std::vector<double> mx(static_cast<std::size_t>(edges.entity_count), -std::numeric_limits<double>::infinity());
    f.weights.resize(count);
    for (Index e = 0; e < count; ++e) {
        const double z = f.logits(e);
        f.weights(e) = z > 0.0 ? z : 0.2 * z;
        auto& m = mx[static_cast<std::size_t>(edges.target[static_cast<std::size_t>(e)])];
        m = std::max(m, f.weights(e));
    }
    std::vector<double> total(mx.size(), 0.0);
    for (Index e = 0; e < count; ++e) {
        const auto i = static_cast<std::size_t>(edges.target[static_cast<std::size_t>(e)]);
        f.weights(e) = std::exp(f.weights(e) - mx[i]);
        total[i] += f.weights(e);
    }
    for (Index e = 0; e < count; ++e)
        f.weights(e) /= total[static_cast<std::size_t>(edges.target[static_cast<std::size_t>(e)])];
    return f;
}

} // namespace detail

/// One attention layer:
///   h_i' = tanh( sum_{(j,r) in N(i) + self} a_ij^r * M_r h_j )
///   a_ij^r = softmax over i's messages of leaky_relu(omega . [h_i ; M_r h_j])
/// with M_r h = h - 2 (r.h) r. Messages are evaluated edge by edge and the
/// reverse pass is written out by hand; `edges` must outlive the Recording.
inline Tensor rrgat_layer(const Tensor& h, const RRGATParams& params, const RelationalEdges& edges)
{
    if (h.rows() != edges.entity_count)
        throw Error("rrgat_layer: embedding rows do not match the graph");
    auto f = std::make_shared<detail::RRGATForward>(
        detail::rrgat_messages(h.value(), params.attention.value(), params.relation_vectors.value(), edges));
    const Index d = h.cols();
    Matrix agg = Matrix::Zero(edges.entity_count, d);
    for (Index e = 0; e < f->reflected.rows(); ++e)
        agg.row(edges.target[static_cast<std::size_t>(e)]) += f->weights(e) * f->reflected.row(e);
    Matrix out = agg.array().tanh().matrix();
    return make_result(std::move(out), {h, params.attention, params.relation_vectors}, [f, &edges](detail::Node& n) {
        auto& hn = detail::input(n, 0);
        auto& an = detail::input(n, 1);
        auto& rn = detail::input(n, 2);
        const Matrix& hv = hn.value;
        const Matrix& rel = rn.value;
        const Index d = hv.cols();
        const auto w_self = an.value.row(0).head(d);
        const auto w_msg = an.value.row(0).tail(d);
        const Matrix pre = n.grad.cwiseProduct((1.0 - n.value.array().square()).matrix());
        const auto count = f->reflected.rows();

        Eigen::VectorXd da(count);
        for (Index e = 0; e < count; ++e)
            da(e) = pre.row(edges.target[static_cast<std::size_t>(e)]).dot(f->reflected.row(e));
        Eigen::VectorXd seg = Eigen::VectorXd::Zero(edges.entity_count);
        for (Index e = 0; e < count; ++e)
            seg(edges.target[static_cast<std::size_t>(e)]) += f->weights(e) * da(e);
        Eigen::VectorXd dz(count);
        for (Index e = 0; e < count; ++e) {
            const double dl = f->weights(e) * (da(e) - seg(edges.target[static_cast<std::size_t>(e)]));
            dz(e) = f->logits(e) > 0.0 ? dl : 0.2 * dl;
        }
        Eigen::VectorXd dz_self = Eigen::VectorXd::Zero(edges.entity_count);
        for (Index e = 0; e < count; ++e)
            dz_self(edges.target[static_cast<std::size_t>(e)]) += dz(e);

        Matrix dh = Matrix::Zero(hv.rows(), d);
        Matrix dr = Matrix::Zero(rel.rows(), d);
        Matrix domega = Matrix::Zero(1, 2 * d);
        domega.leftCols(d) = dz_self.transpose() * hv;
        dh.noalias() += dz_self * w_self;
        Eigen::RowVectorXd dm(d);
        for (Index e = 0; e < count; ++e) {
            const auto i = edges.target[static_cast<std::size_t>(e)];
            const auto j = edges.source[static_cast<std::size_t>(e)];
            const auto r = edges.relation[static_cast<std::size_t>(e)];
            dm = f->weights(e) * pre.row(i) + dz(e) * w_msg;
            domega.rightCols(d) += dz(e) * f->reflected.row(e);
            if (r < edges.relation_count) {
                const double rd = rel.row(r).dot(dm);
                dh.row(j) += dm - 2.0 * rd * rel.row(r);
                dr.row(r) -= 2.0 * (rd * hv.row(j) + f->projection(e) * dm);
            } else {
                dh.row(j) += dm;
            }
        }
        if (hn.requires_grad)
            hn.accumulate(dh);
        if (an.requires_grad)
            an.accumulate(domega);
        if (rn.requires_grad)
            rn.accumulate(dr);
    });
}

/// Attention weights of the first layer, exposed for inspection.
inline Matrix rrgat_attention_weights(const RRGATParams& params, const RelationalEdges& edges)
{
    const auto f = detail::rrgat_messages(params.entity_embeddings.value(), params.attention.value(),
                                          params.relation_vectors.value(), edges);
    return f.weights;
}

/// Stacked layers; the concatenated layer outputs are projected back to d.
inline Tensor rrgat_encode(const RRGATParams& params, const RelationalEdges& edges)
{
    if (params.entity_embeddings.rows() != edges.entity_count)
        throw Error("rrgat_encode: embedding rows do not match the graph");
    if (params.relation_vectors.rows() != edges.relation_count)
        throw Error("rrgat_encode: relation vectors do not match the graph");
    std::vector<Tensor> outputs;
    Tensor h = params.entity_embeddings;
    for (int l = 0; l < params.layers; ++l) {
        h = rrgat_layer(h, params, edges);
        outputs.push_back(h);
    }
    return matmul(concat_cols(outputs), params.output_projection);
}

} // namespace mygram

#endif // MYGRAM_ENCODERS_HPP
