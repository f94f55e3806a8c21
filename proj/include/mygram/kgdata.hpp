#ifndef MYGRAM_KGDATA_HPP
#define MYGRAM_KGDATA_HPP

// Multi-modal knowledge graphs, seed alignments and their on-disk format.
//
// Dataset directory (UTF-8, tab separated):
//   ent_ids_1, ent_ids_2   id<TAB>uri
//   triples_1, triples_2   head<TAB>relation<TAB>tail   (integer ids)
//   ill_ent_ids            left<TAB>right
//   attrs_1, attrs_2       uri<TAB>token<TAB>token...   (optional)
//   visual_1.bin, visual_2.bin (optional)
//       u32 count, u32 dim, count x { u32 entity id, dim x f32 }

#include "mygram/checkpoint.hpp"
#include "mygram/tensor.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

namespace mygram {

using Index = Eigen::Index;

struct Triple {
    Index head = 0;
    Index relation = 0;
    Index tail = 0;

    friend bool operator==(const Triple&, const Triple&) = default;
};

struct MultiModalKG {
    Index entity_count = 0;
    Index relation_count = 0;
    std::vector<std::int64_t> entity_ids;   // original id per dense index
    std::vector<std::string> entity_names;  // uri per dense index
    std::vector<std::int64_t> relation_ids; // original id per dense relation index
    std::vector<Triple> triples;
    std::vector<std::vector<std::string>> attr_tokens;
    Matrix attr_features;   // entity_count x d_a, {0,1}
    Matrix rel_features;    // entity_count x d_r, {0,1}
    Matrix visual_features; // entity_count x d_v
    std::vector<bool> visual_present;

    /// Relation tokens of an entity: one per incident triple, named by original relation id.
    std::vector<std::vector<std::string>> relation_tokens() const
    {
        std::vector<std::vector<std::string>> out(static_cast<std::size_t>(entity_count));
        for (const auto& t : triples) {
            const std::string tok = std::to_string(relation_ids[static_cast<std::size_t>(t.relation)]);
            out[static_cast<std::size_t>(t.head)].push_back(tok);
            if (t.tail != t.head)
                out[static_cast<std::size_t>(t.tail)].push_back(tok);
        }
        return out;
    }

    void validate() const
    {
        const auto n = static_cast<std::size_t>(entity_count);
        if (entity_ids.size() != n || entity_names.size() != n)
            throw Error("kg: entity id/name tables do not match entity_count");
        if (relation_ids.size() != static_cast<std::size_t>(relation_count))
            throw Error("kg: relation table does not match relation_count");
        for (const auto& t : triples) {
            if (t.head < 0 || t.head >= entity_count || t.tail < 0 || t.tail >= entity_count)
                throw Error("kg: triple references an entity out of range");
            if (t.relation < 0 || t.relation >= relation_count)
                throw Error("kg: triple references a relation out of range");
        }
        auto binary = [](const Matrix& m) { return ((m.array() == 0.0) || (m.array() == 1.0)).all(); };
        if (attr_features.rows() != entity_count || !binary(attr_features))
            throw Error("kg: attribute features must be an entity_count-row {0,1} matrix");
        if (rel_features.rows() != entity_count || !binary(rel_features))
            throw Error("kg: relation features must be an entity_count-row {0,1} matrix");
        if (visual_features.rows() != entity_count || visual_present.size() != n)
            throw Error("kg: visual features must have entity_count rows");
        if (!visual_features.allFinite())
            throw Error("kg: visual features must be finite");
    }
};

enum class Split : std::uint8_t { train, test };

struct SeedAlignments {
    std::vector<std::pair<Index, Index>> pairs;
    std::vector<Split> split;

    std::vector<std::pair<Index, Index>> select(Split which) const
    {
        std::vector<std::pair<Index, Index>> out;
        for (std::size_t i = 0; i < pairs.size(); ++i)
            if (split[i] == which)
                out.push_back(pairs[i]);
        return out;
    }
    std::vector<std::pair<Index, Index>> train_pairs() const { return select(Split::train); }
    std::vector<std::pair<Index, Index>> test_pairs() const { return select(Split::test); }
};

struct AlignmentDataset {
    MultiModalKG source;
    MultiModalKG target;
    SeedAlignments seeds;
};

/// Symmetric D^{-1/2}(A+I)D^{-1/2} over the undirected, unweighted entity graph.
struct NormalizedAdjacency {
    Index dimension = 0;
    SparseMatrix entries;

    Matrix dense() const { return Matrix(entries); }
};

/// Rejects pair lists that reuse an entity on either side.
inline void check_partial_bijection(const std::vector<std::pair<Index, Index>>& pairs)
{
    std::set<Index> left, right;
    for (const auto& [l, r] : pairs) {
        if (!left.insert(l).second)
            throw Error("alignment: entity " + std::to_string(l) + " appears twice on the left side");
        if (!right.insert(r).second)
            throw Error("alignment: entity " + std::to_string(r) + " appears twice on the right side");
    }
}

inline NormalizedAdjacency build_adjacency(const MultiModalKG& kg)
{
    const Index n = kg.entity_count;
    std::set<std::pair<Index, Index>> edges;
    for (const auto& t : kg.triples) {
        // A self-referencing triple adds nothing beyond the self-loop of A+I.
        if (t.head == t.tail)
            continue;
        edges.emplace(t.head, t.tail);
        edges.emplace(t.tail, t.head);
    }
    std::vector<double> degree(static_cast<std::size_t>(n), 1.0);
    for (const auto& e : edges)
        degree[static_cast<std::size_t>(e.first)] += 1.0;

    std::vector<Eigen::Triplet<double>> entries;
    entries.reserve(edges.size() + static_cast<std::size_t>(n));
    for (Index i = 0; i < n; ++i)
        entries.emplace_back(i, i, 1.0 / degree[static_cast<std::size_t>(i)]);
    for (const auto& [i, j] : edges)
        entries.emplace_back(i, j,
                             1.0 / std::sqrt(degree[static_cast<std::size_t>(i)] * degree[static_cast<std::size_t>(j)]));
    NormalizedAdjacency adj;
    adj.dimension = n;
    adj.entries.resize(n, n);
    adj.entries.setFromTriplets(entries.begin(), entries.end());
    adj.entries.makeCompressed();
    return adj;
}

struct BagOfWords {
    std::vector<std::string> vocabulary; // descending global frequency, ties lexicographic
    Matrix features;                     // entities x vocabulary.size(), {0,1}
};

inline BagOfWords build_bow_features(const std::vector<std::vector<std::string>>& tokens, Index vocabulary_cap)
{
    if (vocabulary_cap < 1)
        throw Error("bag-of-words: vocabulary_cap must be at least 1");
    std::map<std::string, std::int64_t> freq;
    for (const auto& row : tokens)
        for (const auto& tok : row)
            ++freq[tok];
    std::vector<std::pair<std::string, std::int64_t>> ranked(freq.begin(), freq.end());
    std::stable_sort(ranked.begin(), ranked.end(),
                     [](const auto& a, const auto& b) { return a.second > b.second; });
    if (static_cast<Index>(ranked.size()) > vocabulary_cap)
        ranked.resize(static_cast<std::size_t>(vocabulary_cap));

    BagOfWords bow;
    std::unordered_map<std::string, Index> column;
    for (const auto& [tok, count] : ranked) {
        column.emplace(tok, static_cast<Index>(bow.vocabulary.size()));
        bow.vocabulary.push_back(tok);
    }
    bow.features = Matrix::Zero(static_cast<Index>(tokens.size()), static_cast<Index>(bow.vocabulary.size()));
    for (std::size_t e = 0; e < tokens.size(); ++e)
        for (const auto& tok : tokens[e])
            if (auto it = column.find(tok); it != column.end())
                bow.features(static_cast<Index>(e), it->second) = 1.0;
    return bow;
}

/// Per-entity visual vectors keyed by original entity id.
struct VisualRecords {
    Index dim = 0;
    std::vector<std::pair<std::int64_t, std::vector<float>>> records;
};

inline VisualRecords read_visual_file(const std::filesystem::path& path)
{
    std::ifstream is(path, std::ios::binary);
    if (!is)
        throw Error("cannot open visual feature file: " + path.string());
    VisualRecords out;
    const auto count = io::read_pod<std::uint32_t>(is, "visual header");
    out.dim = io::read_pod<std::uint32_t>(is, "visual header");
    out.records.reserve(count);
    for (std::uint32_t r = 0; r < count; ++r) {
        const auto id = io::read_pod<std::uint32_t>(is, "visual record id");
        std::vector<float> v(static_cast<std::size_t>(out.dim));
        is.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(float)));
        if (!is)
            throw Error("truncated visual record in " + path.string());
        out.records.emplace_back(id, std::move(v));
    }
    return out;
}

inline void write_visual_file(const std::filesystem::path& path, const MultiModalKG& kg)
{
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os)
        throw Error("cannot open visual feature file for writing: " + path.string());
    const auto present = std::count(kg.visual_present.begin(), kg.visual_present.end(), true);
    io::write_u32(os, static_cast<std::uint32_t>(present));
    io::write_u32(os, static_cast<std::uint32_t>(kg.visual_features.cols()));
    for (Index e = 0; e < kg.entity_count; ++e) {
        if (!kg.visual_present[static_cast<std::size_t>(e)])
            continue;
        io::write_u32(os, static_cast<std::uint32_t>(kg.entity_ids[static_cast<std::size_t>(e)]));
        for (Index j = 0; j < kg.visual_features.cols(); ++j)
            io::write_f32(os, static_cast<float>(kg.visual_features(e, j)));
    }
}

/// Entities listed in the records take their vectors verbatim; all others are
/// drawn uniformly from [-1/sqrt(dim), 1/sqrt(dim)] with the given seed.
inline void apply_visual_records(MultiModalKG& kg, const VisualRecords& records, Index dim, std::uint64_t rng_seed)
{
    if (!records.records.empty() && records.dim != dim)
        throw Error("visual features: dimension " + std::to_string(records.dim) + " does not match " +
                    std::to_string(dim));
    std::unordered_map<std::int64_t, Index> by_id;
    for (Index e = 0; e < kg.entity_count; ++e)
        by_id.emplace(kg.entity_ids[static_cast<std::size_t>(e)], e);

    kg.visual_features = Matrix::Zero(kg.entity_count, dim);
    kg.visual_present.assign(static_cast<std::size_t>(kg.entity_count), false);
    for (const auto& [id, vec] : records.records) {
        if (static_cast<Index>(vec.size()) != dim)
            throw Error("visual features: record for entity " + std::to_string(id) + " has wrong dimension");
        auto it = by_id.find(id);
        if (it == by_id.end())
            throw Error("visual features: unknown entity id " + std::to_string(id));
        for (Index j = 0; j < dim; ++j)
            kg.visual_features(it->second, j) = static_cast<double>(vec[static_cast<std::size_t>(j)]);
        kg.visual_present[static_cast<std::size_t>(it->second)] = true;
    }
    std::mt19937_64 rng(rng_seed);
    const double bound = dim > 0 ? 1.0 / std::sqrt(static_cast<double>(dim)) : 0.0;
    std::uniform_real_distribution<double> init(-bound, bound);
    for (Index e = 0; e < kg.entity_count; ++e)
        if (!kg.visual_present[static_cast<std::size_t>(e)])
            for (Index j = 0; j < dim; ++j)
                kg.visual_features(e, j) = init(rng);
}

inline MultiModalKG load_visual_features(MultiModalKG kg, const std::optional<std::filesystem::path>& feature_file,
                                         std::uint64_t rng_seed, Index default_dim)
{
    VisualRecords records;
    Index dim = default_dim;
    if (feature_file) {
        records = read_visual_file(*feature_file);
        dim = records.dim;
    }
    apply_visual_records(kg, records, dim, rng_seed);
    return kg;
}

/// Tags round(train_ratio * |pairs|) pairs as train, clamped so both sides stay
/// non-empty. Pairs keep their input order.
inline SeedAlignments split_seeds(std::vector<std::pair<Index, Index>> pairs, double train_ratio, std::uint64_t rng_seed)
{
    if (!(train_ratio > 0.0 && train_ratio < 1.0))
        throw Error("split_seeds: train_ratio must lie in (0,1)");
    if (pairs.size() < 2)
        throw Error("split_seeds: need at least 2 pairs");
    check_partial_bijection(pairs);
    const auto n = static_cast<std::int64_t>(pairs.size());
    auto train = static_cast<std::int64_t>(std::llround(train_ratio * static_cast<double>(n)));
    train = std::clamp<std::int64_t>(train, 1, n - 1);

    std::vector<std::size_t> order(pairs.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::mt19937_64 rng(rng_seed);
    std::shuffle(order.begin(), order.end(), rng);

    SeedAlignments seeds;
    seeds.split.assign(pairs.size(), Split::test);
    for (std::int64_t i = 0; i < train; ++i)
        seeds.split[order[static_cast<std::size_t>(i)]] = Split::train;
    seeds.pairs = std::move(pairs);
    return seeds;
}

struct IngestOptions {
    Index attr_vocab = 1000;
    Index rel_vocab = 1000;
    Index visual_dim = 4096; // used when no visual file exists
    double train_ratio = 0.3;
    std::uint64_t seed = 0;
};

/// Fills attribute and relation bag-of-words features over a vocabulary shared
/// by both graphs.
inline void build_modal_features(MultiModalKG& a, MultiModalKG& b, const IngestOptions& opt)
{
    auto joined = [](std::vector<std::vector<std::string>> x, const std::vector<std::vector<std::string>>& y) {
        x.insert(x.end(), y.begin(), y.end());
        return x;
    };
    const auto attrs = build_bow_features(joined(a.attr_tokens, b.attr_tokens), opt.attr_vocab);
    const auto rels = build_bow_features(joined(a.relation_tokens(), b.relation_tokens()), opt.rel_vocab);
    a.attr_features = attrs.features.topRows(a.entity_count);
    b.attr_features = attrs.features.bottomRows(b.entity_count);
    a.rel_features = rels.features.topRows(a.entity_count);
    b.rel_features = rels.features.bottomRows(b.entity_count);
}

namespace detail {

inline std::vector<std::string> split_tabs(const std::string& line)
{
    std::vector<std::string> out;
    std::string cur;
    std::istringstream is(line);
    while (std::getline(is, cur, '\t'))
        out.push_back(cur);
    return out;
}

inline std::int64_t parse_id(const std::string& s, const std::filesystem::path& file, std::size_t line)
{
    try {
        std::size_t used = 0;
        const long long v = std::stoll(s, &used);
        if (used != s.size())
            throw std::invalid_argument(s);
        return v;
    } catch (const std::exception&) {
        throw Error(file.string() + ":" + std::to_string(line) + ": expected an integer id, got '" + s + "'");
    }
}

template <class Fn>
void for_each_line(const std::filesystem::path& path, Fn&& fn)
{
    std::ifstream is(path);
    if (!is)
        throw Error("missing dataset file: " + path.string());
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r')
            line.pop_back();
        if (line.empty())
            continue;
        fn(split_tabs(line), lineno);
    }
}

inline MultiModalKG read_graph(const std::filesystem::path& root, int side)
{
    const auto suffix = "_" + std::to_string(side);
    MultiModalKG kg;
    std::unordered_map<std::int64_t, Index> by_id;
    const auto ent_file = root / ("ent_ids" + suffix);
    for_each_line(ent_file, [&](const std::vector<std::string>& f, std::size_t ln) {
        if (f.empty())
            return;
        const auto id = parse_id(f[0], ent_file, ln);
        if (!by_id.emplace(id, static_cast<Index>(kg.entity_ids.size())).second)
            throw Error(ent_file.string() + ":" + std::to_string(ln) + ": duplicate entity id " + std::to_string(id));
        kg.entity_ids.push_back(id);
        kg.entity_names.push_back(f.size() > 1 ? f[1] : std::string{});
    });
    kg.entity_count = static_cast<Index>(kg.entity_ids.size());

    const auto triple_file = root / ("triples" + suffix);
    std::vector<std::array<std::int64_t, 3>> raw;
    for_each_line(triple_file, [&](const std::vector<std::string>& f, std::size_t ln) {
        if (f.size() < 3)
            throw Error(triple_file.string() + ":" + std::to_string(ln) + ": expected head, relation, tail");
        raw.push_back({parse_id(f[0], triple_file, ln), parse_id(f[1], triple_file, ln),
                       parse_id(f[2], triple_file, ln)});
    });
    std::set<std::int64_t> rel_set;
    for (const auto& r : raw)
        rel_set.insert(r[1]);
    kg.relation_ids.assign(rel_set.begin(), rel_set.end());
    kg.relation_count = static_cast<Index>(kg.relation_ids.size());
    std::unordered_map<std::int64_t, Index> rel_index;
    for (std::size_t i = 0; i < kg.relation_ids.size(); ++i)
        rel_index.emplace(kg.relation_ids[i], static_cast<Index>(i));
    for (const auto& r : raw) {
        auto h = by_id.find(r[0]);
        auto t = by_id.find(r[2]);
        if (h == by_id.end() || t == by_id.end())
            throw Error(triple_file.string() + ": dangling entity id " +
                        std::to_string(h == by_id.end() ? r[0] : r[2]));
        kg.triples.push_back({h->second, rel_index.at(r[1]), t->second});
    }

    kg.attr_tokens.assign(static_cast<std::size_t>(kg.entity_count), {});
    const auto attr_file = root / ("attrs" + suffix);
    if (std::filesystem::exists(attr_file)) {
        std::unordered_map<std::string, Index> by_name;
        for (Index e = 0; e < kg.entity_count; ++e)
            by_name.emplace(kg.entity_names[static_cast<std::size_t>(e)], e);
        for_each_line(attr_file, [&](const std::vector<std::string>& f, std::size_t ln) {
            auto it = by_name.find(f[0]);
            if (it == by_name.end())
                throw Error(attr_file.string() + ":" + std::to_string(ln) + ": dangling entity uri '" + f[0] + "'");
            auto& toks = kg.attr_tokens[static_cast<std::size_t>(it->second)];
            for (std::size_t i = 1; i < f.size(); ++i)
                if (!f[i].empty())
                    toks.push_back(f[i]);
        });
    }
    return kg;
}

} // namespace detail

inline AlignmentDataset load_dataset(const std::filesystem::path& root, const IngestOptions& opt = {})
{
    AlignmentDataset data;
    data.source = detail::read_graph(root, 1);
    data.target = detail::read_graph(root, 2);

    std::unordered_map<std::int64_t, Index> left_ids, right_ids;
    for (Index e = 0; e < data.source.entity_count; ++e)
        left_ids.emplace(data.source.entity_ids[static_cast<std::size_t>(e)], e);
    for (Index e = 0; e < data.target.entity_count; ++e)
        right_ids.emplace(data.target.entity_ids[static_cast<std::size_t>(e)], e);

    std::vector<std::pair<Index, Index>> pairs;
    const auto ill = root / "ill_ent_ids";
    detail::for_each_line(ill, [&](const std::vector<std::string>& f, std::size_t ln) {
        if (f.size() < 2)
            throw Error(ill.string() + ":" + std::to_string(ln) + ": expected left<TAB>right");
        const auto l = detail::parse_id(f[0], ill, ln);
        const auto r = detail::parse_id(f[1], ill, ln);
        auto li = left_ids.find(l);
        auto ri = right_ids.find(r);
        if (li == left_ids.end() || ri == right_ids.end())
            throw Error(ill.string() + ":" + std::to_string(ln) + ": dangling entity id " +
                        std::to_string(li == left_ids.end() ? l : r));
        pairs.emplace_back(li->second, ri->second);
    });
    check_partial_bijection(pairs);

    build_modal_features(data.source, data.target, opt);
    auto visual_path = [&](int side) -> std::optional<std::filesystem::path> {
        auto p = root / ("visual_" + std::to_string(side) + ".bin");
        if (std::filesystem::exists(p))
            return p;
        return std::nullopt;
    };
    const auto vis1 = visual_path(1);
    const auto vis2 = visual_path(2);
    VisualRecords r1 = vis1 ? read_visual_file(*vis1) : VisualRecords{};
    VisualRecords r2 = vis2 ? read_visual_file(*vis2) : VisualRecords{};
    Index dim = opt.visual_dim;
    if (vis1)
        dim = r1.dim;
    else if (vis2)
        dim = r2.dim;
    if (vis1 && vis2 && r1.dim != r2.dim)
        throw Error("visual features: the two graphs use different dimensions");
    apply_visual_records(data.source, r1, dim, opt.seed * 2 + 1);
    apply_visual_records(data.target, r2, dim, opt.seed * 2 + 2);

    data.seeds = split_seeds(std::move(pairs), opt.train_ratio, opt.seed);
    data.source.validate();
    data.target.validate();
    return data;
}

inline void save_dataset(const std::filesystem::path& root, const AlignmentDataset& data)
{
    std::filesystem::create_directories(root);
    auto open = [&](const std::string& name) {
        std::ofstream os(root / name, std::ios::trunc);
        if (!os)
            throw Error("cannot write dataset file: " + (root / name).string());
        return os;
    };
    auto write_graph = [&](const MultiModalKG& kg, int side) {
        const auto suffix = "_" + std::to_string(side);
        {
            auto os = open("ent_ids" + suffix);
            for (Index e = 0; e < kg.entity_count; ++e)
                os << kg.entity_ids[static_cast<std::size_t>(e)] << '\t' << kg.entity_names[static_cast<std::size_t>(e)]
                   << '\n';
        }
        {
            auto os = open("triples" + suffix);
            for (const auto& t : kg.triples)
                os << kg.entity_ids[static_cast<std::size_t>(t.head)] << '\t'
                   << kg.relation_ids[static_cast<std::size_t>(t.relation)] << '\t'
                   << kg.entity_ids[static_cast<std::size_t>(t.tail)] << '\n';
        }
        {
            auto os = open("attrs" + suffix);
            for (Index e = 0; e < kg.entity_count; ++e) {
                os << kg.entity_names[static_cast<std::size_t>(e)];
                for (const auto& tok : kg.attr_tokens[static_cast<std::size_t>(e)])
                    os << '\t' << tok;
                os << '\n';
            }
        }
        if (std::find(kg.visual_present.begin(), kg.visual_present.end(), true) != kg.visual_present.end())
            write_visual_file(root / ("visual" + suffix + ".bin"), kg);
    };
    write_graph(data.source, 1);
    write_graph(data.target, 2);
    auto os = open("ill_ent_ids");
    for (const auto& [l, r] : data.seeds.pairs)
        os << data.source.entity_ids[static_cast<std::size_t>(l)] << '\t'
           << data.target.entity_ids[static_cast<std::size_t>(r)] << '\n';
}

/// Parameters for a synthetic aligned pair of graphs.
struct SyntheticSpec {
    Index entities = 200;
    Index relations = 12;
    double triples_per_entity = 24.0;
    Index attr_vocab = 120;
    Index tokens_per_entity = 6;
    Index visual_dim = 64;
    double edge_drop = 0.1;
    double feature_noise = 0.05;
    double token_drop = 0.1;
    double duplicate_fraction = 0.2;
    double duplicate_noise = 0.01; // std of the perturbation between near-duplicate visual vectors
    bool duplicate_attributes = true; // near-duplicates also share attribute tokens
    double visual_missing = 0.0;
    double train_ratio = 0.3;
};

/// The target graph is a perturbed copy of the source under a random
/// permutation; every entity is aligned.
inline AlignmentDataset generate_synthetic(const SyntheticSpec& spec, std::uint64_t rng_seed)
{
    const Index n = spec.entities;
    if (n < 4)
        throw Error("generate_synthetic: need at least 4 entities");
    if (spec.relations < 1 || spec.visual_dim < 1 || spec.attr_vocab < 1)
        throw Error("generate_synthetic: relations, visual_dim and attr_vocab must be positive");
    auto probability = [](double p, const char* what) {
        if (!(p >= 0.0 && p <= 1.0))
            throw Error(std::string("generate_synthetic: ") + what + " must lie in [0,1]");
    };
    probability(spec.edge_drop, "edge_drop");
    probability(spec.token_drop, "token_drop");
    probability(spec.duplicate_fraction, "duplicate_fraction");
    probability(spec.visual_missing, "visual_missing");
    if (!(spec.feature_noise >= 0.0) || !(spec.duplicate_noise >= 0.0))
        throw Error("generate_synthetic: noise levels must be non-negative");
    if (spec.duplicate_fraction > 0.5)
        throw Error("generate_synthetic: duplicate_fraction cannot exceed 0.5");

    std::mt19937_64 rng(rng_seed);
    std::uniform_int_distribution<Index> pick_entity(0, n - 1);
    std::uniform_int_distribution<Index> pick_relation(0, spec.relations - 1);
    std::uniform_int_distribution<Index> pick_token(0, spec.attr_vocab - 1);
    std::normal_distribution<double> normal(0.0, 1.0);
    std::uniform_real_distribution<double> unit(0.0, 1.0);

    AlignmentDataset data;
    MultiModalKG& g1 = data.source;
    g1.entity_count = n;
    g1.relation_count = spec.relations;
    for (Index e = 0; e < n; ++e) {
        g1.entity_ids.push_back(e);
        g1.entity_names.push_back("kg1/e" + std::to_string(e));
    }
    for (Index r = 0; r < spec.relations; ++r)
        g1.relation_ids.push_back(r);

    // Every entity appears in at least one triple (a ring), then random extras.
    // At most one triple per unordered entity pair.
    const auto triple_count = std::min<Index>(
        n * (n - 1) / 2, std::max<Index>(n, static_cast<Index>(std::llround(spec.triples_per_entity * n))));
    std::vector<Index> ring(static_cast<std::size_t>(n));
    std::iota(ring.begin(), ring.end(), Index{0});
    std::shuffle(ring.begin(), ring.end(), rng);
    std::set<std::pair<Index, Index>> seen;
    for (Index i = 0; i < n; ++i) {
        const Index h = ring[static_cast<std::size_t>(i)], t = ring[static_cast<std::size_t>((i + 1) % n)];
        g1.triples.push_back({h, pick_relation(rng), t});
        seen.emplace(std::min(h, t), std::max(h, t));
    }
    while (static_cast<Index>(g1.triples.size()) < triple_count) {
        const Index h = pick_entity(rng), t = pick_entity(rng);
        if (h == t || !seen.emplace(std::min(h, t), std::max(h, t)).second)
            continue;
        g1.triples.push_back({h, pick_relation(rng), t});
    }

    g1.attr_tokens.resize(static_cast<std::size_t>(n));
    for (auto& toks : g1.attr_tokens) {
        std::set<Index> chosen;
        while (static_cast<Index>(chosen.size()) < std::min(spec.tokens_per_entity, spec.attr_vocab))
            chosen.insert(pick_token(rng));
        for (Index t : chosen)
            toks.push_back("attr" + std::to_string(t));
    }

    Matrix visual(n, spec.visual_dim);
    for (Index i = 0; i < visual.size(); ++i)
        visual.data()[i] = normal(rng);
    // Near-duplicates: disjoint (copy, original) pairs with nearly equal visual
    // vectors and, optionally, the same attribute tokens.
    const auto dup = static_cast<Index>(std::ceil(spec.duplicate_fraction * static_cast<double>(n) - 1e-9));
    std::vector<Index> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), Index{0});
    std::shuffle(order.begin(), order.end(), rng);
    for (Index k = 0; k < dup; ++k) {
        const Index copy = order[static_cast<std::size_t>(2 * k)], original = order[static_cast<std::size_t>(2 * k + 1)];
        for (Index j = 0; j < spec.visual_dim; ++j)
            visual(copy, j) = visual(original, j) + spec.duplicate_noise * normal(rng);
        if (spec.duplicate_attributes)
            g1.attr_tokens[static_cast<std::size_t>(copy)] = g1.attr_tokens[static_cast<std::size_t>(original)];
    }

    // Target graph under a random permutation.
    std::vector<Index> perm(static_cast<std::size_t>(n));
    std::iota(perm.begin(), perm.end(), Index{0});
    std::shuffle(perm.begin(), perm.end(), rng);
    MultiModalKG& g2 = data.target;
    g2.entity_count = n;
    g2.relation_count = spec.relations;
    g2.relation_ids = g1.relation_ids;
    g2.entity_ids.resize(static_cast<std::size_t>(n));
    g2.entity_names.resize(static_cast<std::size_t>(n));
    for (Index j = 0; j < n; ++j) {
        g2.entity_ids[static_cast<std::size_t>(j)] = n + j;
        g2.entity_names[static_cast<std::size_t>(j)] = "kg2/e" + std::to_string(j);
    }
    for (const auto& t : g1.triples)
        if (unit(rng) >= spec.edge_drop)
            g2.triples.push_back({perm[static_cast<std::size_t>(t.head)], t.relation, perm[static_cast<std::size_t>(t.tail)]});
    g2.attr_tokens.resize(static_cast<std::size_t>(n));
    for (Index i = 0; i < n; ++i)
        for (const auto& tok : g1.attr_tokens[static_cast<std::size_t>(i)])
            if (unit(rng) >= spec.token_drop)
                g2.attr_tokens[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])].push_back(tok);
    Matrix visual2(n, spec.visual_dim);
    for (Index i = 0; i < n; ++i)
        for (Index j = 0; j < spec.visual_dim; ++j)
            visual2(perm[static_cast<std::size_t>(i)], j) = visual(i, j) + spec.feature_noise * normal(rng);

    // Visual vectors are stored at f32 precision, matching the on-disk format.
    auto to_records = [&](const MultiModalKG& kg, const Matrix& v) {
        VisualRecords rec;
        rec.dim = spec.visual_dim;
        for (Index e = 0; e < n; ++e) {
            if (unit(rng) < spec.visual_missing)
                continue;
            std::vector<float> row(static_cast<std::size_t>(spec.visual_dim));
            for (Index j = 0; j < spec.visual_dim; ++j)
                row[static_cast<std::size_t>(j)] = static_cast<float>(v(e, j));
            rec.records.emplace_back(kg.entity_ids[static_cast<std::size_t>(e)], std::move(row));
        }
        return rec;
    };
    const auto rec1 = to_records(g1, visual);
    const auto rec2 = to_records(g2, visual2);

    IngestOptions opt;
    opt.attr_vocab = spec.attr_vocab;
    opt.rel_vocab = spec.relations;
    opt.seed = rng_seed;
    build_modal_features(g1, g2, opt);
    apply_visual_records(g1, rec1, spec.visual_dim, opt.seed * 2 + 1);
    apply_visual_records(g2, rec2, spec.visual_dim, opt.seed * 2 + 2);

    std::vector<std::pair<Index, Index>> pairs;
    pairs.reserve(static_cast<std::size_t>(n));
    for (Index i = 0; i < n; ++i)
        pairs.emplace_back(i, perm[static_cast<std::size_t>(i)]);
    data.seeds = split_seeds(std::move(pairs), spec.train_ratio, rng_seed);
    g1.validate();
    g2.validate();
    return data;
}

} // namespace mygram

#endif // MYGRAM_KGDATA_HPP
