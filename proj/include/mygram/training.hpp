#ifndef MYGRAM_TRAINING_HPP
#define MYGRAM_TRAINING_HPP

// Training loop: per epoch, shuffled mini-batches of train pairs, one forward
// pass per batch, InfoNCE + lambda * Gram loss, reverse pass and an Adam step.

#include "mygram/model.hpp"
#include "mygram/objective.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <utility>
#include <vector>

namespace mygram {

class Adam {
public:
    explicit Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
        : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps)
    {
    }

    void step(std::vector<std::pair<std::string, Tensor>>& params)
    {
        if (first_.empty()) {
            for (const auto& [name, t] : params) {
                first_.push_back(Matrix::Zero(t.rows(), t.cols()));
                second_.push_back(Matrix::Zero(t.rows(), t.cols()));
            }
        }
        ++t_;
        const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
        const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
        for (std::size_t i = 0; i < params.size(); ++i) {
            Tensor& p = params[i].second;
            if (!p.has_grad())
                continue;
            const Matrix g = p.grad();
            first_[i] = beta1_ * first_[i] + (1.0 - beta1_) * g;
            second_[i] = beta2_ * second_[i] + (1.0 - beta2_) * g.cwiseProduct(g);
            p.mutable_value().array() -=
                lr_ * (first_[i].array() / c1) / ((second_[i].array() / c2).sqrt() + eps_);
        }
    }

private:
    double lr_, beta1_, beta2_, eps_;
    long t_ = 0;
    std::vector<Matrix> first_, second_;
};

struct LossTerms {
    Tensor total;
    Tensor infonce;
    Tensor gram;
    bool gram_computed = false;
};

/// Entities a batch needs fused: its source entities, then every target
/// entity (the Gram candidates range over all targets).
inline std::vector<Index> batch_rows(const ModelInputs& in, const std::vector<std::pair<Index, Index>>& batch)
{
    std::vector<Index> rows;
    rows.reserve(batch.size() + static_cast<std::size_t>(in.target_count));
    for (const auto& [l, r] : batch)
        rows.push_back(l);
    for (Index t = 0; t < in.target_count; ++t)
        rows.push_back(in.source_count + t);
    return rows;
}

/// Loss for one batch of (source, target) pairs given a forward result whose
/// fused rows cover the batch sources and every target. The Gram term is only
/// built when lambda > 0 unless forced.
inline LossTerms batch_loss(const ForwardResult& fwd, const ModelInputs& in,
                            const std::vector<std::pair<Index, Index>>& batch, const LossConfig& loss,
                            bool force_gram = false)
{
    const auto local = fwd.local_index(in.entity_count());
    auto at = [&](Index entity) {
        const Index i = local[static_cast<std::size_t>(entity)];
        if (i < 0)
            throw Error("batch_loss: entity " + std::to_string(entity) + " was not fused");
        return i;
    };
    std::vector<Index> left, right, target_rows;
    for (const auto& [l, r] : batch) {
        left.push_back(at(l));
        right.push_back(at(in.source_count + r));
    }
    LossTerms terms;
    const Tensor& joint = fwd.fusion.joint;
    terms.infonce = infonce_loss(gather_rows(joint, left), gather_rows(joint, right), loss);
    if (loss.lambda > 0.0 || force_gram) {
        for (Index t = 0; t < in.target_count; ++t)
            target_rows.push_back(at(in.source_count + t));
        const auto& h = fwd.fusion.hidden;
        std::vector<Index> targets;
        for (const auto& [l, r] : batch)
            targets.push_back(r);
        const Index k = std::min(loss.topk, in.target_count);
        GramBatch gb = make_gram_batch(gather_rows(h[0], left),
                                       gather_rows(h[static_cast<std::size_t>(Modality::visual)], target_rows),
                                       gather_rows(h[static_cast<std::size_t>(Modality::attribute)], target_rows),
                                       gather_rows(h[static_cast<std::size_t>(Modality::relation)], target_rows),
                                       std::move(targets), k);
        terms.gram = gram_loss(gb, loss);
        terms.gram_computed = true;
        terms.total = total_loss(terms.infonce, terms.gram, loss.lambda);
    } else {
        terms.gram = Tensor::scalar(0.0);
        terms.total = terms.infonce;
    }
    return terms;
}

struct EpochLoss {
    double total = 0.0;
    double infonce = 0.0;
    double gram = 0.0;
};

class TrainingDiverged : public Error {
public:
    using Error::Error;
};

struct TrainOptions {
    bool force_gram = false; // build the Gram term even when lambda == 0
    std::function<void(Index epoch, const EpochLoss&, const ModelParams&)> on_epoch;
};

struct TrainResult {
    ModelParams params;
    std::vector<EpochLoss> history;
};

inline std::vector<std::vector<std::pair<Index, Index>>> make_batches(std::vector<std::pair<Index, Index>> pairs,
                                                                      Index batch_size, std::mt19937_64& rng)
{
    std::shuffle(pairs.begin(), pairs.end(), rng);
    std::vector<std::vector<std::pair<Index, Index>>> out;
    for (std::size_t i = 0; i < pairs.size(); i += static_cast<std::size_t>(batch_size))
        out.emplace_back(pairs.begin() + static_cast<std::ptrdiff_t>(i),
                         pairs.begin() + static_cast<std::ptrdiff_t>(
                                             std::min(pairs.size(), i + static_cast<std::size_t>(batch_size))));
    // A trailing singleton cannot form in-batch negatives; fold it into the previous batch.
    if (out.size() > 1 && out.back().size() < 2) {
        out[out.size() - 2].insert(out[out.size() - 2].end(), out.back().begin(), out.back().end());
        out.pop_back();
    }
    return out;
}

inline TrainResult train(const ModelInputs& in, const std::vector<std::pair<Index, Index>>& train_pairs,
                         const TrainConfig& cfg, const TrainOptions& opt = {})
{
    cfg.validate();
    if (train_pairs.size() < 2)
        throw Error("train: at least 2 training pairs are required");
    std::mt19937_64 init_rng(cfg.seed);
    TrainResult result{init_params(in, cfg, init_rng), {}};
    std::mt19937_64 shuffle_rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);
    std::mt19937_64 dropout_rng(cfg.seed ^ 0xc2b2ae3d27d4eb4fULL);
    Adam optimizer(cfg.learning_rate);
    auto params = result.params.named();

    for (Index epoch = 0; epoch < cfg.epochs; ++epoch) {
        EpochLoss acc;
        const auto batches = make_batches(train_pairs, cfg.batch_size, shuffle_rng);
        for (std::size_t b = 0; b < batches.size(); ++b) {
            result.params.zero_grad();
            Recording rec;
            const auto fwd = forward(result.params, in, cfg, Mode::train, dropout_rng, batch_rows(in, batches[b]));
            const auto terms = batch_loss(fwd, in, batches[b], cfg.loss, opt.force_gram);
            auto check = [&](const Tensor& t, const char* what) {
                if (!std::isfinite(t.item()))
                    throw TrainingDiverged("non-finite " + std::string(what) + " loss at epoch " +
                                           std::to_string(epoch) + ", batch " + std::to_string(b));
            };
            check(terms.infonce, "InfoNCE");
            check(terms.gram, "Gram");
            check(terms.total, "total");
            backward(terms.total);
            optimizer.step(params);
            result.params.structure.renormalize_relations();
            acc.total += terms.total.item();
            acc.infonce += terms.infonce.item();
            acc.gram += terms.gram.item();
        }
        const auto nb = static_cast<double>(batches.size());
        result.history.push_back({acc.total / nb, acc.infonce / nb, acc.gram / nb});
        if (opt.on_epoch)
            opt.on_epoch(epoch, result.history.back(), result.params);
    }
    result.params.zero_grad();
    return result;
}

} // namespace mygram

#endif // MYGRAM_TRAINING_HPP
