#ifndef MYGRAM_EXPERIMENTS_HPP
#define MYGRAM_EXPERIMENTS_HPP

// Ablation variants and low-resource seed sweeps, each a full train + evaluate.

#include "mygram/evaluation.hpp"
#include "mygram/training.hpp"

#include <optional>
#include <string>
#include <vector>

namespace mygram {

enum class Variant { full, no_relation, no_attribute, no_image, no_mgd, no_gram };

inline std::optional<Variant> parse_variant(const std::string& name)
{
    if (name == "full")
        return Variant::full;
    if (name == "no_relation")
        return Variant::no_relation;
    if (name == "no_attribute")
        return Variant::no_attribute;
    if (name == "no_image")
        return Variant::no_image;
    if (name == "no_mgd")
        return Variant::no_mgd;
    if (name == "no_gram")
        return Variant::no_gram;
    return std::nullopt;
}

inline const char* variant_name(Variant v)
{
    switch (v) {
    case Variant::full: return "full";
    case Variant::no_relation: return "no_relation";
    case Variant::no_attribute: return "no_attribute";
    case Variant::no_image: return "no_image";
    case Variant::no_mgd: return "no_mgd";
    case Variant::no_gram: return "no_gram";
    }
    return "?";
}

inline TrainConfig apply_variant(TrainConfig cfg, Variant v)
{
    switch (v) {
    case Variant::full: break;
    case Variant::no_relation: cfg.modality_enabled[static_cast<std::size_t>(Modality::relation)] = false; break;
    case Variant::no_attribute: cfg.modality_enabled[static_cast<std::size_t>(Modality::attribute)] = false; break;
    case Variant::no_image: cfg.modality_enabled[static_cast<std::size_t>(Modality::visual)] = false; break;
    case Variant::no_mgd: cfg.use_diffusion = false; break;
    case Variant::no_gram: cfg.loss.lambda = 0.0; break;
    }
    return cfg;
}

struct RunResult {
    TrainResult trained;
    RankingReport report;
};

inline RunResult train_and_evaluate(const AlignmentDataset& data, const TrainConfig& cfg)
{
    const ModelInputs in = prepare_inputs(data);
    RunResult r{train(in, data.seeds.train_pairs(), cfg), {}};
    r.report = evaluate(r.trained.params, in, data.seeds.test_pairs(), cfg);
    return r;
}

inline RunResult ablate(const AlignmentDataset& data, const TrainConfig& cfg, Variant variant)
{
    return train_and_evaluate(data, apply_variant(cfg, variant));
}

inline RunResult ablate(const AlignmentDataset& data, const TrainConfig& cfg, const std::string& variant)
{
    const auto v = parse_variant(variant);
    if (!v)
        throw Error("unknown ablation variant '" + variant + "'");
    return ablate(data, cfg, *v);
}

/// Re-splits the seeds at each ratio (same split seed) and retrains from scratch.
inline std::vector<RankingReport> seed_sweep(const AlignmentDataset& data, const TrainConfig& cfg,
                                             const std::vector<double>& ratios)
{
    for (double r : ratios)
        if (!(r > 0.0 && r < 1.0))
            throw Error("seed_sweep: ratios must lie in (0,1)");
    std::vector<RankingReport> out;
    for (double r : ratios) {
        AlignmentDataset split = data;
        split.seeds = split_seeds(data.seeds.pairs, r, cfg.data.seed);
        out.push_back(train_and_evaluate(split, cfg).report);
    }
    return out;
}

} // namespace mygram

#endif // MYGRAM_EXPERIMENTS_HPP
