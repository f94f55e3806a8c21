#ifndef MYGRAM_EVALUATION_HPP
#define MYGRAM_EVALUATION_HPP

// Ranking metrics: each test source entity ranks every target entity by cosine
// similarity of joint embeddings. Ties are pessimistic: the true target takes
// the worst position among equal scores.

#include "mygram/model.hpp"
#include "mygram/objective.hpp"
#include "mygram/parallel.hpp"

#include <nlohmann/json.hpp>

#include <string>
#include <utility>
#include <vector>

namespace mygram {

struct RankingReport {
    double hits1 = 0.0;
    double hits10 = 0.0;
    double mrr = 0.0;
    std::vector<Index> ranks; // 1-based, one per query
};

inline RankingReport report_from_ranks(std::vector<Index> ranks)
{
    RankingReport r;
    if (ranks.empty())
        return r;
    double h1 = 0.0, h10 = 0.0, rr = 0.0;
    for (Index k : ranks) {
        if (k < 1)
            throw Error("report_from_ranks: ranks are 1-based");
        h1 += (k <= 1) ? 1.0 : 0.0;
        h10 += (k <= 10) ? 1.0 : 0.0;
        rr += 1.0 / static_cast<double>(k);
    }
    const auto n = static_cast<double>(ranks.size());
    r.hits1 = h1 / n;
    r.hits10 = h10 / n;
    r.mrr = rr / n;
    r.ranks = std::move(ranks);
    return r;
}

/// Ranks every target row for each (source, target) query pair.
inline RankingReport rank_alignment(const Matrix& source, const Matrix& target,
                                    const std::vector<std::pair<Index, Index>>& queries)
{
    if (queries.empty())
        throw Error("evaluate: no test pairs");
    std::vector<Index> ranks(queries.size());
    parallel_for(queries.size(), [&](std::size_t q) {
        const auto [s, t] = queries[q];
        const Matrix sim = similarity_matrix(source.row(s), target);
        const double truth = sim(0, t);
        Index rank = 0;
        for (Index j = 0; j < sim.cols(); ++j)
            if (sim(0, j) >= truth)
                ++rank;
        ranks[q] = rank;
    });
    return report_from_ranks(std::move(ranks));
}

inline RankingReport evaluate(const ModelParams& params, const ModelInputs& in,
                              const std::vector<std::pair<Index, Index>>& test_pairs, const TrainConfig& cfg)
{
    const auto [source, target] = joint_embeddings(params, in, cfg);
    return rank_alignment(source, target, test_pairs);
}

inline nlohmann::json report_to_json(const RankingReport& r)
{
    return {{"hits1", r.hits1}, {"hits10", r.hits10}, {"mrr", r.mrr}, {"ranks", r.ranks}};
}

} // namespace mygram

#endif // MYGRAM_EVALUATION_HPP
