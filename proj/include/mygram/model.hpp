#ifndef MYGRAM_MODEL_HPP
#define MYGRAM_MODEL_HPP

// The full encoder -> diffusion -> fusion network over the disjoint union of
// the source and target graphs. Source entities occupy rows [0, n1), target
// entities rows [n1, n1 + n2).

#include "mygram/checkpoint.hpp"
#include "mygram/config.hpp"
#include "mygram/diffusion.hpp"
#include "mygram/encoders.hpp"
#include "mygram/fusion.hpp"

#include <array>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

namespace mygram {

struct ModelInputs {
    Index source_count = 0;
    Index target_count = 0;
    NormalizedAdjacency adjacency; // shared by every diffused modality
    RelationalEdges edges;
    Matrix relation_features;
    Matrix attribute_features;
    Matrix visual_features;

    Index entity_count() const { return source_count + target_count; }
};

/// Merges both graphs into one entity space; relations with equal original ids
/// share an index.
inline MultiModalKG merge_graphs(const MultiModalKG& a, const MultiModalKG& b)
{
    if (a.attr_features.cols() != b.attr_features.cols() || a.rel_features.cols() != b.rel_features.cols() ||
        a.visual_features.cols() != b.visual_features.cols())
        throw Error("merge_graphs: feature widths differ between the two graphs");
    MultiModalKG m;
    m.entity_count = a.entity_count + b.entity_count;
    m.entity_ids = a.entity_ids;
    m.entity_ids.insert(m.entity_ids.end(), b.entity_ids.begin(), b.entity_ids.end());
    m.entity_names = a.entity_names;
    m.entity_names.insert(m.entity_names.end(), b.entity_names.begin(), b.entity_names.end());
    std::map<std::int64_t, Index> rel;
    for (auto id : a.relation_ids)
        rel.emplace(id, 0);
    for (auto id : b.relation_ids)
        rel.emplace(id, 0);
    for (auto& [id, idx] : rel) {
        idx = static_cast<Index>(m.relation_ids.size());
        m.relation_ids.push_back(id);
    }
    m.relation_count = static_cast<Index>(m.relation_ids.size());
    for (const auto& t : a.triples)
        m.triples.push_back({t.head, rel.at(a.relation_ids[static_cast<std::size_t>(t.relation)]), t.tail});
    for (const auto& t : b.triples)
        m.triples.push_back({t.head + a.entity_count, rel.at(b.relation_ids[static_cast<std::size_t>(t.relation)]),
                             t.tail + a.entity_count});
    m.attr_tokens = a.attr_tokens;
    m.attr_tokens.insert(m.attr_tokens.end(), b.attr_tokens.begin(), b.attr_tokens.end());
    auto stack = [](const Matrix& x, const Matrix& y) {
        Matrix out(x.rows() + y.rows(), x.cols());
        out.topRows(x.rows()) = x;
        out.bottomRows(y.rows()) = y;
        return out;
    };
    m.attr_features = stack(a.attr_features, b.attr_features);
    m.rel_features = stack(a.rel_features, b.rel_features);
    m.visual_features = stack(a.visual_features, b.visual_features);
    m.visual_present = a.visual_present;
    m.visual_present.insert(m.visual_present.end(), b.visual_present.begin(), b.visual_present.end());
    return m;
}

inline ModelInputs prepare_inputs(const AlignmentDataset& data)
{
    const MultiModalKG merged = merge_graphs(data.source, data.target);
    ModelInputs in;
    in.source_count = data.source.entity_count;
    in.target_count = data.target.entity_count;
    in.adjacency = build_adjacency(merged);
    in.edges = relational_edges(merged);
    in.relation_features = merged.rel_features;
    in.attribute_features = merged.attr_features;
    in.visual_features = merged.visual_features;
    return in;
}

struct ModelParams {
    RRGATParams structure;
    std::array<ModalityProjection, 3> projections; // relation, attribute, visual
    FusionParams fusion;

    const ModalityProjection& projection(Modality m) const
    {
        return projections[static_cast<std::size_t>(m) - 1];
    }

    /// Every learnable tensor, in checkpoint order.
    std::vector<std::pair<std::string, Tensor>> named() const
    {
        std::vector<std::pair<std::string, Tensor>> out{
            {"structure.entity_embeddings", structure.entity_embeddings},
            {"structure.attention", structure.attention},
            {"structure.relation_vectors", structure.relation_vectors},
            {"structure.output_projection", structure.output_projection},
        };
        for (const auto& p : projections) {
            const std::string base = std::string("projection.") + modality_name(p.modality);
            out.emplace_back(base + ".weight", p.weight);
            out.emplace_back(base + ".bias", p.bias);
        }
        const auto& f = fusion;
        for (auto& [name, t] : std::vector<std::pair<std::string, Tensor>>{
                 {"fusion.type_embedding", f.type_embedding},
                 {"fusion.query", f.query},
                 {"fusion.key", f.key},
                 {"fusion.value", f.value},
                 {"fusion.output", f.output},
                 {"fusion.ffn_in", f.ffn_in},
                 {"fusion.ffn_in_bias", f.ffn_in_bias},
                 {"fusion.ffn_out", f.ffn_out},
                 {"fusion.ffn_out_bias", f.ffn_out_bias},
                 {"fusion.norm1_gain", f.norm1_gain},
                 {"fusion.norm1_bias", f.norm1_bias},
                 {"fusion.norm2_gain", f.norm2_gain},
                 {"fusion.norm2_bias", f.norm2_bias}})
            out.emplace_back(std::move(name), std::move(t));
        return out;
    }

    NamedMatrices snapshot() const
    {
        NamedMatrices out;
        for (const auto& [name, t] : named())
            out.emplace_back(name, t.value());
        return out;
    }

    /// Copies values from a checkpoint; names and shapes must match exactly.
    void restore(const NamedMatrices& saved)
    {
        auto params = named();
        if (saved.size() != params.size())
            throw Error("checkpoint holds " + std::to_string(saved.size()) + " parameters, model expects " +
                        std::to_string(params.size()));
        for (std::size_t i = 0; i < params.size(); ++i) {
            auto& [name, t] = params[i];
            const auto& [sname, value] = saved[i];
            if (name != sname)
                throw Error("checkpoint parameter '" + sname + "' where '" + name + "' was expected");
            if (value.rows() != t.rows() || value.cols() != t.cols())
                throw Error("checkpoint parameter '" + name + "' has the wrong shape");
            t.mutable_value() = value;
        }
    }

    void zero_grad()
    {
        for (auto& [name, t] : named())
            t.zero_grad();
    }
};

inline ModelParams init_params(const ModelInputs& in, const TrainConfig& cfg, std::mt19937_64& rng)
{
    cfg.validate();
    ModelParams p;
    const Index d = cfg.hidden_dim;
    p.structure = init_rrgat(in.entity_count(), in.edges.relation_count, d, cfg.encoder_layers, rng);
    const std::array<std::pair<Modality, Index>, 3> widths{{{Modality::relation, in.relation_features.cols()},
                                                            {Modality::attribute, in.attribute_features.cols()},
                                                            {Modality::visual, in.visual_features.cols()}}};
    for (std::size_t i = 0; i < widths.size(); ++i) {
        auto& proj = p.projections[i];
        proj.modality = widths[i].first;
        proj.weight = detail::glorot(widths[i].second, d, rng);
        proj.bias = Tensor::zeros(1, d, true);
    }
    p.fusion = init_fusion(d, cfg.fusion, rng);
    return p;
}

struct ForwardResult {
    Tensor structure; // H_g, every entity
    std::array<Tensor, modality_count> modal; // inputs to fusion (H_g, then diffused H_r, H_a, H_v), every entity
    std::vector<Index> rows;                  // entities fed to fusion, in fusion row order
    FusionOutput fusion;

    /// Fusion row of a union entity index, or -1 when it was not fused.
    std::vector<Index> local_index(Index entity_count) const
    {
        std::vector<Index> local(static_cast<std::size_t>(entity_count), -1);
        for (std::size_t i = 0; i < rows.size(); ++i)
            local[static_cast<std::size_t>(rows[i])] = static_cast<Index>(i);
        return local;
    }
};

/// Encoders and diffusion run over the whole union graph; fusion (and hence the
/// modality weights) only over `rows`, or every entity when none are given.
inline ForwardResult forward(const ModelParams& params, const ModelInputs& in, const TrainConfig& cfg, Mode mode,
                             std::mt19937_64& rng, std::optional<std::vector<Index>> rows = std::nullopt)
{
    ForwardResult out;
    out.structure = rrgat_encode(params.structure, in.edges);
    out.modal[0] = out.structure;
    const std::array<const Matrix*, 3> features{&in.relation_features, &in.attribute_features, &in.visual_features};
    for (Index m = 1; m < modality_count; ++m) {
        const auto mod = static_cast<Modality>(m);
        Tensor h = project_modality(params.projection(mod), *features[static_cast<std::size_t>(m) - 1]);
        // Without MGD the diffusion step is an identity pass-through; the input
        // dropout that defines H^(0) still applies.
        if (cfg.use_diffusion)
            h = diffuse(h, in.adjacency, cfg.diffusion_for(mod), mode, rng);
        else
            h = dropout(h, cfg.diffusion_for(mod).dropout, mode, rng);
        out.modal[static_cast<std::size_t>(m)] = h;
    }
    if (rows) {
        out.rows = std::move(*rows);
        std::array<Tensor, modality_count> picked;
        for (std::size_t m = 0; m < picked.size(); ++m)
            picked[m] = gather_rows(out.modal[m], out.rows);
        out.fusion = fuse(picked, params.fusion, cfg.fusion, cfg.modality_enabled);
    } else {
        out.rows.resize(static_cast<std::size_t>(in.entity_count()));
        std::iota(out.rows.begin(), out.rows.end(), Index{0});
        out.fusion = fuse(out.modal, params.fusion, cfg.fusion, cfg.modality_enabled);
    }
    return out;
}

/// Joint embeddings split into source and target rows (evaluation mode).
inline std::pair<Matrix, Matrix> joint_embeddings(const ModelParams& params, const ModelInputs& in,
                                                  const TrainConfig& cfg)
{
    std::mt19937_64 rng(cfg.seed);
    const auto fwd = forward(params, in, cfg, Mode::eval, rng);
    const Matrix& joint = fwd.fusion.joint.value();
    return {joint.topRows(in.source_count), joint.bottomRows(in.target_count)};
}

} // namespace mygram

#endif // MYGRAM_MODEL_HPP
