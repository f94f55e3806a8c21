#ifndef MYGRAM_CONFIG_HPP
#define MYGRAM_CONFIG_HPP

// Training configuration and its flat JSON form (dotted keys), plus the
// synthetic generator spec.

#include "mygram/diffusion.hpp"
#include "mygram/fusion.hpp"
#include "mygram/kgdata.hpp"
#include "mygram/objective.hpp"

#include <nlohmann/json.hpp>

#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>

namespace mygram {

struct TrainConfig {
    Index hidden_dim = 300;
    Index epochs = 1000;
    double learning_rate = 5e-3;
    Index batch_size = 512;
    std::uint64_t seed = 0;
    int encoder_layers = 2;

    IngestOptions data{};
    DiffusionConfig diffusion{};
    // Per-modality overrides for relation, attribute, visual (index 1..3).
    std::array<std::optional<DiffusionConfig>, modality_count> diffusion_override{};
    FusionConfig fusion{};
    LossConfig loss{};

    bool use_diffusion = true;
    std::array<bool, modality_count> modality_enabled{true, true, true, true};

    const DiffusionConfig& diffusion_for(Modality m) const
    {
        const auto& o = diffusion_override[static_cast<std::size_t>(m)];
        return o ? *o : diffusion;
    }

    void validate() const
    {
        if (hidden_dim < 1 || epochs < 0 || batch_size < 2)
            throw Error("config: hidden_dim >= 1, epochs >= 0 and batch_size >= 2 required");
        if (!(learning_rate > 0.0))
            throw Error("config: learning_rate must be positive");
        if (encoder_layers < 1)
            throw Error("config: encoder.layers must be at least 1");
        if (fusion.heads < 1 || hidden_dim % fusion.heads != 0)
            throw Error("config: hidden_dim must be divisible by fusion.heads");
        if (fusion.ffn_dim < 1)
            throw Error("config: fusion.ffn_dim must be positive");
        diffusion.validate();
        for (const auto& o : diffusion_override)
            if (o)
                o->validate();
        loss.validate();
    }
};

namespace detail {

template <class T>
T json_as(const nlohmann::json& v, const std::string& key)
{
    try {
        return v.get<T>();
    } catch (const nlohmann::json::exception&) {
        throw Error("config: key '" + key + "' has the wrong type");
    }
}

inline bool apply_diffusion_key(DiffusionConfig& d, const std::string& field, const nlohmann::json& v,
                                const std::string& key)
{
    if (field == "alpha")
        d.alpha = json_as<double>(v, key);
    else if (field == "beta")
        d.beta = json_as<double>(v, key);
    else if (field == "k")
        d.k = json_as<int>(v, key);
    else if (field == "dropout")
        d.dropout = json_as<double>(v, key);
    else
        return false;
    return true;
}

} // namespace detail

/// Applies flat dotted keys on top of `base`. Unknown keys are rejected.
inline TrainConfig config_from_json(const nlohmann::json& j, TrainConfig base = {})
{
    if (!j.is_object())
        throw Error("config: expected a flat JSON object");
    TrainConfig c = std::move(base);
    // Shared diffusion keys first so per-modality keys override them regardless of order.
    for (const auto& [key, v] : j.items())
        if (key.rfind("diffusion.", 0) == 0 && key.find('.', 10) == std::string::npos)
            if (!detail::apply_diffusion_key(c.diffusion, key.substr(10), v, key))
                throw Error("config: unknown key '" + key + "'");
    for (const auto& [key, v] : j.items()) {
        using detail::json_as;
        if (key == "hidden_dim")
            c.hidden_dim = json_as<Index>(v, key);
        else if (key == "epochs")
            c.epochs = json_as<Index>(v, key);
        else if (key == "learning_rate")
            c.learning_rate = json_as<double>(v, key);
        else if (key == "batch_size")
            c.batch_size = json_as<Index>(v, key);
        else if (key == "seed")
            c.seed = json_as<std::uint64_t>(v, key);
        else if (key == "encoder.layers")
            c.encoder_layers = json_as<int>(v, key);
        else if (key == "data.attr_vocab")
            c.data.attr_vocab = json_as<Index>(v, key);
        else if (key == "data.rel_vocab")
            c.data.rel_vocab = json_as<Index>(v, key);
        else if (key == "data.visual_dim")
            c.data.visual_dim = json_as<Index>(v, key);
        else if (key == "data.train_ratio")
            c.data.train_ratio = json_as<double>(v, key);
        else if (key == "data.seed")
            c.data.seed = json_as<std::uint64_t>(v, key);
        else if (key.rfind("diffusion.", 0) == 0) {
            const auto rest = key.substr(10);
            const auto dot = rest.find('.');
            if (dot == std::string::npos)
                continue; // handled above
            const auto name = rest.substr(0, dot);
            int m = -1;
            if (name == "relation")
                m = 1;
            else if (name == "attribute")
                m = 2;
            else if (name == "visual")
                m = 3;
            if (m < 0)
                throw Error("config: unknown key '" + key + "'");
            auto& o = c.diffusion_override[static_cast<std::size_t>(m)];
            if (!o)
                o = c.diffusion;
            if (!detail::apply_diffusion_key(*o, rest.substr(dot + 1), v, key))
                throw Error("config: unknown key '" + key + "'");
        } else if (key == "fusion.heads")
            c.fusion.heads = json_as<Index>(v, key);
        else if (key == "fusion.ffn_dim")
            c.fusion.ffn_dim = json_as<Index>(v, key);
        else if (key == "fusion.weight_mode") {
            const auto s = json_as<std::string>(v, key);
            if (s == "incoming")
                c.fusion.weight_mode = WeightMode::incoming;
            else if (s == "outgoing")
                c.fusion.weight_mode = WeightMode::outgoing;
            else
                throw Error("config: fusion.weight_mode must be 'incoming' or 'outgoing'");
        } else if (key == "fusion.weight_scope") {
            const auto s = json_as<std::string>(v, key);
            if (s == "global")
                c.fusion.weight_scope = WeightScope::global;
            else if (s == "entity")
                c.fusion.weight_scope = WeightScope::entity;
            else
                throw Error("config: fusion.weight_scope must be 'global' or 'entity'");
        } else if (key == "loss.tau")
            c.loss.tau = json_as<double>(v, key);
        else if (key == "loss.T")
            c.loss.temperature = json_as<double>(v, key);
        else if (key == "loss.lambda")
            c.loss.lambda = json_as<double>(v, key);
        else if (key == "loss.topk")
            c.loss.topk = json_as<Index>(v, key);
        else if (key == "loss.epsilon")
            c.loss.epsilon = json_as<double>(v, key);
        else if (key == "gram.normalize")
            c.loss.normalize_columns = json_as<bool>(v, key);
        else if (key == "infonce.include_positive_in_denominator")
            c.loss.include_positive = json_as<bool>(v, key);
        else if (key == "ablation.mgd")
            c.use_diffusion = json_as<bool>(v, key);
        else if (key == "ablation.relation")
            c.modality_enabled[1] = json_as<bool>(v, key);
        else if (key == "ablation.attribute")
            c.modality_enabled[2] = json_as<bool>(v, key);
        else if (key == "ablation.visual")
            c.modality_enabled[3] = json_as<bool>(v, key);
        else
            throw Error("config: unknown key '" + key + "'");
    }
    c.validate();
    return c;
}

inline nlohmann::json read_json_file(const std::filesystem::path& path)
{
    std::ifstream is(path);
    if (!is)
        throw Error("cannot open config file: " + path.string());
    try {
        return nlohmann::json::parse(is);
    } catch (const nlohmann::json::parse_error& e) {
        throw Error("config file " + path.string() + ": " + e.what());
    }
}

inline TrainConfig load_config(const std::filesystem::path& path) { return config_from_json(read_json_file(path)); }

inline nlohmann::json config_to_json(const TrainConfig& c)
{
    nlohmann::json j;
    j["hidden_dim"] = c.hidden_dim;
    j["epochs"] = c.epochs;
    j["learning_rate"] = c.learning_rate;
    j["batch_size"] = c.batch_size;
    j["seed"] = c.seed;
    j["encoder.layers"] = c.encoder_layers;
    j["data.attr_vocab"] = c.data.attr_vocab;
    j["data.rel_vocab"] = c.data.rel_vocab;
    j["data.visual_dim"] = c.data.visual_dim;
    j["data.train_ratio"] = c.data.train_ratio;
    j["data.seed"] = c.data.seed;
    j["diffusion.alpha"] = c.diffusion.alpha;
    j["diffusion.beta"] = c.diffusion.beta;
    j["diffusion.k"] = c.diffusion.k;
    j["diffusion.dropout"] = c.diffusion.dropout;
    for (Index m = 1; m < modality_count; ++m)
        if (const auto& o = c.diffusion_override[static_cast<std::size_t>(m)]) {
            const std::string p = std::string("diffusion.") + modality_name(static_cast<Modality>(m)) + ".";
            j[p + "alpha"] = o->alpha;
            j[p + "beta"] = o->beta;
            j[p + "k"] = o->k;
            j[p + "dropout"] = o->dropout;
        }
    j["fusion.heads"] = c.fusion.heads;
    j["fusion.ffn_dim"] = c.fusion.ffn_dim;
    j["fusion.weight_mode"] = c.fusion.weight_mode == WeightMode::incoming ? "incoming" : "outgoing";
    j["fusion.weight_scope"] = c.fusion.weight_scope == WeightScope::global ? "global" : "entity";
    j["loss.tau"] = c.loss.tau;
    j["loss.T"] = c.loss.temperature;
    j["loss.lambda"] = c.loss.lambda;
    j["loss.topk"] = c.loss.topk;
    j["loss.epsilon"] = c.loss.epsilon;
    j["gram.normalize"] = c.loss.normalize_columns;
    j["infonce.include_positive_in_denominator"] = c.loss.include_positive;
    j["ablation.mgd"] = c.use_diffusion;
    j["ablation.relation"] = c.modality_enabled[1];
    j["ablation.attribute"] = c.modality_enabled[2];
    j["ablation.visual"] = c.modality_enabled[3];
    return j;
}

/// Synthetic spec keys match SyntheticSpec field names; "seed" selects the RNG seed.
struct SyntheticRequest {
    SyntheticSpec spec{};
    std::uint64_t seed = 0;
};

inline SyntheticRequest synthetic_from_json(const nlohmann::json& j)
{
    if (!j.is_object())
        throw Error("synthetic spec: expected a flat JSON object");
    SyntheticRequest r;
    auto& s = r.spec;
    for (const auto& [key, v] : j.items()) {
        using detail::json_as;
        if (key == "entities")
            s.entities = json_as<Index>(v, key);
        else if (key == "relations")
            s.relations = json_as<Index>(v, key);
        else if (key == "triples_per_entity")
            s.triples_per_entity = json_as<double>(v, key);
        else if (key == "attr_vocab")
            s.attr_vocab = json_as<Index>(v, key);
        else if (key == "tokens_per_entity")
            s.tokens_per_entity = json_as<Index>(v, key);
        else if (key == "visual_dim")
            s.visual_dim = json_as<Index>(v, key);
        else if (key == "edge_drop")
            s.edge_drop = json_as<double>(v, key);
        else if (key == "feature_noise")
            s.feature_noise = json_as<double>(v, key);
        else if (key == "token_drop")
            s.token_drop = json_as<double>(v, key);
        else if (key == "duplicate_fraction")
            s.duplicate_fraction = json_as<double>(v, key);
        else if (key == "duplicate_noise")
            s.duplicate_noise = json_as<double>(v, key);
        else if (key == "duplicate_attributes")
            s.duplicate_attributes = json_as<bool>(v, key);
        else if (key == "visual_missing")
            s.visual_missing = json_as<double>(v, key);
        else if (key == "train_ratio")
            s.train_ratio = json_as<double>(v, key);
        else if (key == "seed")
            r.seed = json_as<std::uint64_t>(v, key);
        else
            throw Error("synthetic spec: unknown key '" + key + "'");
    }
    return r;
}

} // namespace mygram

#endif // MYGRAM_CONFIG_HPP
