#include "mygram/kgdata.hpp"
#include "test_support.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>
#include <string>

using namespace mygram;
namespace fs = std::filesystem;

namespace {

MultiModalKG graph(Index n, std::vector<Triple> triples, Index relations = 1)
{
    MultiModalKG kg;
    kg.entity_count = n;
    kg.relation_count = relations;
    for (Index e = 0; e < n; ++e) {
        kg.entity_ids.push_back(e);
        kg.entity_names.push_back("e" + std::to_string(e));
    }
    for (Index r = 0; r < relations; ++r)
        kg.relation_ids.push_back(r);
    kg.triples = std::move(triples);
    return kg;
}

Matrix dense_oracle(const MultiModalKG& kg)
{
    const Index n = kg.entity_count;
    Matrix a = Matrix::Identity(n, n);
    for (const auto& t : kg.triples) {
        a(t.head, t.tail) = 1.0;
        a(t.tail, t.head) = 1.0;
    }
    const Eigen::VectorXd inv_sqrt = a.rowwise().sum().cwiseSqrt().cwiseInverse();
    return inv_sqrt.asDiagonal() * a * inv_sqrt.asDiagonal();
}

class TempDir {
public:
    explicit TempDir(const std::string& tag)
        : path_(fs::temp_directory_path() / ("mygram_" + tag + "_" + std::to_string(::testing::UnitTest::GetInstance()->random_seed())))
    {
        fs::remove_all(path_);
        fs::create_directories(path_);
    }
    ~TempDir() { fs::remove_all(path_); }
    const fs::path& path() const { return path_; }

private:
    fs::path path_;
};

void write_file(const fs::path& p, const std::string& body)
{
    std::ofstream(p) << body;
}

void write_minimal_fixture(const fs::path& root)
{
    write_file(root / "ent_ids_1", "10\thttp://a/x\n11\thttp://a/y\n12\thttp://a/z\n");
    write_file(root / "ent_ids_2", "20\thttp://b/x\n21\thttp://b/y\n22\thttp://b/z\n");
    write_file(root / "triples_1", "10\t5\t11\n11\t6\t12\n");
    write_file(root / "triples_2", "20\t5\t21\n21\t6\t22\n");
    write_file(root / "ill_ent_ids", "10\t20\n12\t21\n");
    write_file(root / "attrs_1", "http://a/x\tcolor\tsize\nhttp://a/z\tsize\n");
    write_file(root / "attrs_2", "http://b/x\tcolor\n");
}

} // namespace

TEST(Adjacency, ClosedForms)
{
    EXPECT_EQ(build_adjacency(graph(1, {})).dense(), Matrix::Ones(1, 1));
    EXPECT_EQ(build_adjacency(graph(2, {{0, 0, 1}})).dense(), Matrix::Constant(2, 2, 0.5));
    const Matrix path = build_adjacency(graph(3, {{0, 0, 1}, {1, 0, 2}})).dense();
    EXPECT_NEAR(path(0, 1), 1.0 / std::sqrt(6.0), 1e-15);
    EXPECT_NEAR(path(0, 1), 0.408248, 1e-6);
}

TEST(Adjacency, DirectionAndMultiplicityAreDiscarded)
{
    const Matrix a = build_adjacency(graph(3, {{0, 0, 1}, {1, 1, 0}, {0, 0, 1}, {1, 0, 2}}, 2)).dense();
    const Matrix b = build_adjacency(graph(3, {{0, 0, 1}, {2, 0, 1}})).dense();
    EXPECT_EQ(a, b);
}

TEST(Adjacency, MatchesDenseFormulaOnRandomGraphs)
{
    std::mt19937_64 rng(21);
    for (int trial = 0; trial < 20; ++trial) {
        const Index n = std::uniform_int_distribution<Index>(1, 100)(rng);
        std::uniform_int_distribution<Index> pick(0, n - 1);
        std::vector<Triple> triples;
        const Index m = std::uniform_int_distribution<Index>(0, 3 * n)(rng);
        for (Index i = 0; i < m; ++i) {
            const Index h = pick(rng), t = pick(rng);
            if (h != t)
                triples.push_back({h, 0, t});
        }
        const MultiModalKG kg = graph(n, triples);
        const Matrix sparse = build_adjacency(kg).dense();
        EXPECT_LT((sparse - dense_oracle(kg)).cwiseAbs().maxCoeff(), 1e-12);
        EXPECT_LT((sparse - sparse.transpose()).cwiseAbs().maxCoeff(), 1e-15);
        EXPECT_GT(sparse.diagonal().minCoeff(), 0.0);
    }
}

TEST(Adjacency, RegularGraphPreservesConstants)
{
    // Circulant 4-regular graph on 12 nodes.
    std::vector<Triple> triples;
    const Index n = 12;
    for (Index i = 0; i < n; ++i) {
        triples.push_back({i, 0, (i + 1) % n});
        triples.push_back({i, 0, (i + 2) % n});
    }
    const auto adj = build_adjacency(graph(n, triples));
    const Eigen::VectorXd ones = Eigen::VectorXd::Ones(n);
    EXPECT_LT((adj.entries * ones - ones).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(BagOfWords, IndicatorsAndFrequencyOrder)
{
    const auto bow = build_bow_features({{"a", "b"}, {"c", "a"}, {"b"}}, 3);
    EXPECT_EQ(bow.vocabulary, (std::vector<std::string>{"a", "b", "c"}));
    EXPECT_EQ(bow.features.row(0), (Matrix(1, 3) << 1, 1, 0).finished());

    const auto capped = build_bow_features({{"a"}, {"a", "b"}, {"a"}}, 1);
    EXPECT_EQ(capped.vocabulary, (std::vector<std::string>{"a"}));
    EXPECT_EQ(capped.features.cols(), 1);

    const auto empty = build_bow_features({{}, {}}, 5);
    EXPECT_EQ(empty.features.rows(), 2);
    EXPECT_EQ(empty.features.cols(), 0);
    EXPECT_THROW(build_bow_features({{"a"}}, 0), Error);
}

TEST(BagOfWords, MatchesBruteForceCount)
{
    std::mt19937_64 rng(4);
    std::uniform_int_distribution<int> pick(0, 9);
    std::vector<std::vector<std::string>> tokens(5);
    for (auto& row : tokens)
        for (int i = 0; i < 4; ++i)
            row.push_back("t" + std::to_string(pick(rng)));
    const auto bow = build_bow_features(tokens, 4);

    std::map<std::string, int> freq;
    for (const auto& row : tokens)
        for (const auto& t : row)
            ++freq[t];
    std::vector<std::pair<std::string, int>> all(freq.begin(), freq.end());
    std::sort(all.begin(), all.end(),
              [](const auto& x, const auto& y) { return x.second != y.second ? x.second > y.second : x.first < y.first; });
    all.resize(std::min<std::size_t>(4, all.size()));
    ASSERT_EQ(bow.vocabulary.size(), all.size());
    for (std::size_t c = 0; c < all.size(); ++c) {
        EXPECT_EQ(bow.vocabulary[c], all[c].first);
        for (std::size_t e = 0; e < tokens.size(); ++e) {
            const bool has = std::find(tokens[e].begin(), tokens[e].end(), all[c].first) != tokens[e].end();
            EXPECT_EQ(bow.features(static_cast<Index>(e), static_cast<Index>(c)), has ? 1.0 : 0.0);
        }
    }
}

TEST(SplitSeeds, CountsAndDeterminism)
{
    std::vector<std::pair<Index, Index>> pairs;
    for (Index i = 0; i < 10; ++i)
        pairs.emplace_back(i, 9 - i);
    EXPECT_EQ(split_seeds(pairs, 0.2, 1).train_pairs().size(), 2u);
    EXPECT_EQ(split_seeds(pairs, 0.2, 1).test_pairs().size(), 8u);
    EXPECT_EQ(split_seeds(pairs, 0.8, 1).train_pairs().size(), 8u);
    EXPECT_EQ(split_seeds(pairs, 0.3, 5).split, split_seeds(pairs, 0.3, 5).split);
    EXPECT_NE(split_seeds(pairs, 0.5, 5).split, split_seeds(pairs, 0.5, 6).split);
    EXPECT_THROW(split_seeds(pairs, 0.0, 1), Error);
    EXPECT_THROW(split_seeds(pairs, 1.0, 1), Error);
    EXPECT_THROW(split_seeds({{0, 0}}, 0.5, 1), Error);
    EXPECT_THROW(split_seeds({{0, 0}, {0, 1}}, 0.5, 1), Error);
    // Both sides stay non-empty.
    EXPECT_EQ(split_seeds({{0, 0}, {1, 1}, {2, 2}}, 0.01, 1).train_pairs().size(), 1u);
}

TEST(VisualFeatures, FileAndRandomFill)
{
    MultiModalKG kg = graph(3, {});
    TempDir dir("visual");
    VisualRecords rec;
    rec.dim = 4;
    for (std::int64_t id = 0; id < 3; ++id)
        rec.records.push_back({id, {0.5f * static_cast<float>(id), -1.0f, 2.0f, 0.25f}});
    apply_visual_records(kg, rec, 4, 0);
    write_visual_file(dir.path() / "v.bin", kg);

    const MultiModalKG full = load_visual_features(graph(3, {}), dir.path() / "v.bin", 9, 4096);
    EXPECT_TRUE(std::all_of(full.visual_present.begin(), full.visual_present.end(), [](bool b) { return b; }));
    EXPECT_EQ(full.visual_features, kg.visual_features);

    const MultiModalKG a = load_visual_features(graph(3, {}), std::nullopt, 3, 16);
    const MultiModalKG b = load_visual_features(graph(3, {}), std::nullopt, 3, 16);
    const MultiModalKG c = load_visual_features(graph(3, {}), std::nullopt, 4, 16);
    EXPECT_EQ(a.visual_features, b.visual_features);
    EXPECT_NE(a.visual_features, c.visual_features);
    EXPECT_LE(a.visual_features.cwiseAbs().maxCoeff(), 0.25);
    EXPECT_TRUE(std::none_of(a.visual_present.begin(), a.visual_present.end(), [](bool x) { return x; }));

    VisualRecords wrong = rec;
    wrong.records[0].second.pop_back();
    MultiModalKG target = graph(3, {});
    EXPECT_THROW(apply_visual_records(target, wrong, 4, 0), Error);
    EXPECT_THROW(apply_visual_records(target, rec, 5, 0), Error);
}

TEST(LoadDataset, MinimalFixture)
{
    TempDir dir("minimal");
    write_minimal_fixture(dir.path());
    IngestOptions opt;
    opt.visual_dim = 8;
    const auto data = load_dataset(dir.path(), opt);
    EXPECT_EQ(data.source.entity_count, 3);
    EXPECT_EQ(data.target.entity_count, 3);
    EXPECT_EQ(data.source.triples.size(), 2u);
    ASSERT_EQ(data.seeds.pairs.size(), 2u);
    EXPECT_EQ(data.seeds.pairs[0], (std::pair<Index, Index>{0, 0}));
    EXPECT_EQ(data.seeds.pairs[1], (std::pair<Index, Index>{2, 1}));
    EXPECT_EQ(data.seeds.train_pairs().size(), 1u);
    EXPECT_EQ(data.source.visual_features.cols(), 8);
    EXPECT_EQ(data.source.attr_features.rows(), 3);
    data.source.validate();
    data.target.validate();
}

TEST(LoadDataset, Errors)
{
    {
        TempDir dir("dangling_ill");
        write_minimal_fixture(dir.path());
        write_file(dir.path() / "ill_ent_ids", "99\t20\n");
        EXPECT_THROW(load_dataset(dir.path()), Error);
    }
    {
        TempDir dir("dangling_triple");
        write_minimal_fixture(dir.path());
        write_file(dir.path() / "triples_1", "10\t5\t77\n");
        EXPECT_THROW(load_dataset(dir.path()), Error);
    }
    {
        TempDir dir("duplicate");
        write_minimal_fixture(dir.path());
        write_file(dir.path() / "ill_ent_ids", "10\t20\n10\t21\n");
        EXPECT_THROW(load_dataset(dir.path()), Error);
    }
    {
        TempDir dir("missing");
        write_minimal_fixture(dir.path());
        fs::remove(dir.path() / "triples_2");
        EXPECT_THROW(load_dataset(dir.path()), Error);
    }
}

TEST(LoadDataset, SaveReloadRoundTrip)
{
    SyntheticSpec spec;
    spec.entities = 30;
    spec.visual_dim = 8;
    spec.visual_missing = 0.2;
    const auto original = generate_synthetic(spec, 3);
    TempDir a("roundtrip_a"), b("roundtrip_b");
    save_dataset(a.path(), original);
    IngestOptions opt;
    opt.attr_vocab = spec.attr_vocab;
    opt.rel_vocab = spec.relations;
    opt.seed = 3;
    const auto first = load_dataset(a.path(), opt);
    save_dataset(b.path(), first);
    const auto second = load_dataset(b.path(), opt);
    for (const auto* pair : {&first, &second}) {
        EXPECT_EQ(pair->source.triples, original.source.triples);
        EXPECT_EQ(pair->target.triples, original.target.triples);
        EXPECT_EQ(pair->seeds.pairs, original.seeds.pairs);
        EXPECT_EQ(pair->source.visual_present, original.source.visual_present);
    }
    for (const auto& [x, y] : {std::pair{&first.source, &second.source}, std::pair{&first.target, &second.target}}) {
        EXPECT_EQ(x->entity_ids, y->entity_ids);
        EXPECT_EQ(x->entity_names, y->entity_names);
        EXPECT_EQ(x->attr_features, y->attr_features);
        EXPECT_EQ(x->rel_features, y->rel_features);
        EXPECT_EQ(x->visual_features, y->visual_features);
    }
    // Visual rows present in the file survive the round trip exactly.
    for (Index e = 0; e < original.source.entity_count; ++e)
        if (original.source.visual_present[static_cast<std::size_t>(e)])
            EXPECT_EQ(first.source.visual_features.row(e), original.source.visual_features.row(e));
}

TEST(Synthetic, InvariantsAtDefaults)
{
    const auto data = generate_synthetic(SyntheticSpec{}, 7);
    data.source.validate();
    data.target.validate();
    EXPECT_EQ(data.source.entity_count, 200);
    EXPECT_EQ(data.seeds.pairs.size(), 200u);
    EXPECT_EQ(data.seeds.train_pairs().size(), 60u);
    check_partial_bijection(data.seeds.pairs);
    std::vector<Index> right;
    for (const auto& [l, r] : data.seeds.pairs)
        right.push_back(r);
    std::sort(right.begin(), right.end());
    for (Index i = 0; i < 200; ++i)
        EXPECT_EQ(right[static_cast<std::size_t>(i)], i);
}

TEST(Synthetic, ZeroPerturbationIsIsomorphicAndNearestNeighborRecoversPairs)
{
    SyntheticSpec spec;
    spec.entities = 60;
    spec.edge_drop = 0.0;
    spec.feature_noise = 0.0;
    spec.token_drop = 0.0;
    spec.duplicate_fraction = 0.0;
    const auto data = generate_synthetic(spec, 1);
    std::map<Index, Index> map;
    for (const auto& [l, r] : data.seeds.pairs)
        map[l] = r;
    ASSERT_EQ(data.source.triples.size(), data.target.triples.size());
    for (std::size_t i = 0; i < data.source.triples.size(); ++i) {
        const auto& t = data.source.triples[i];
        EXPECT_EQ(data.target.triples[i], (Triple{map[t.head], t.relation, map[t.tail]}));
    }
    Matrix left(60, 0), right(60, 0);
    auto features = [](const MultiModalKG& kg) {
        Matrix m(kg.entity_count, kg.visual_features.cols() + kg.attr_features.cols());
        m << kg.visual_features, kg.attr_features;
        return m;
    };
    left = features(data.source);
    right = features(data.target);
    for (const auto& [l, r] : data.seeds.pairs) {
        Index best = 0;
        (right.rowwise() - left.row(l)).rowwise().squaredNorm().minCoeff(&best);
        EXPECT_EQ(best, r);
    }
}

TEST(Synthetic, DuplicateFractionProducesNearDuplicatePairs)
{
    const auto data = generate_synthetic(SyntheticSpec{}, 7);
    const Matrix& v = data.source.visual_features;
    const Eigen::VectorXd norms = v.rowwise().norm();
    const Matrix cos = (norms.cwiseInverse().asDiagonal() * v) * (norms.cwiseInverse().asDiagonal() * v).transpose();
    int count = 0;
    for (Index i = 0; i < v.rows(); ++i)
        for (Index j = i + 1; j < v.rows(); ++j)
            if (cos(i, j) > 0.95) {
                ++count;
                EXPECT_EQ(data.source.attr_tokens[static_cast<std::size_t>(i)],
                          data.source.attr_tokens[static_cast<std::size_t>(j)]);
            }
    EXPECT_GE(count, static_cast<int>(0.2 * 200));

    SyntheticSpec visual_only;
    visual_only.duplicate_attributes = false;
    const auto other = generate_synthetic(visual_only, 7);
    EXPECT_EQ(other.source.visual_features, v);
    int shared = 0;
    for (Index i = 0; i < v.rows(); ++i)
        for (Index j = i + 1; j < v.rows(); ++j)
            if (cos(i, j) > 0.95 && other.source.attr_tokens[static_cast<std::size_t>(i)] ==
                                        other.source.attr_tokens[static_cast<std::size_t>(j)])
                ++shared;
    EXPECT_EQ(shared, 0);
}

TEST(Synthetic, DeterministicAndValidated)
{
    SyntheticSpec spec;
    spec.entities = 40;
    const auto a = generate_synthetic(spec, 5);
    const auto b = generate_synthetic(spec, 5);
    EXPECT_EQ(a.target.triples, b.target.triples);
    EXPECT_EQ(a.target.visual_features, b.target.visual_features);
    EXPECT_EQ(a.seeds.split, b.seeds.split);
    spec.entities = 3;
    EXPECT_THROW(generate_synthetic(spec, 1), Error);
    spec.entities = 40;
    spec.edge_drop = 1.5;
    EXPECT_THROW(generate_synthetic(spec, 1), Error);
}
