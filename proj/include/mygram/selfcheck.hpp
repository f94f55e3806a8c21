#ifndef MYGRAM_SELFCHECK_HPP
#define MYGRAM_SELFCHECK_HPP

// Built-in invariant and gradient checks, run by `mygram check`. Each check
// compares the library against an independent oracle (SVD, dense matrices,
// finite differences, closed forms).

#include "mygram/training.hpp"

#include <Eigen/Dense>

#include <chrono>
#include <cmath>
#include <functional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

namespace mygram::selfcheck {

struct CheckResult {
    int id = 0;
    std::string name;
    bool passed = false;
    std::string detail;
};

struct GradientReport {
    double max_relative_error = 0.0;
    int probes = 0;
    std::string worst; // label of the worst parameter, when labels were given
};

inline double relative_error(double a, double b, double floor = 1e-8)
{
    return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

/// Compares <grad, v> from the reverse pass against the central difference
/// (L(p + h v) - L(p - h v)) / 2h along random unit directions v, one
/// parameter at a time. `loss` must be a deterministic function of the values.
inline GradientReport check_gradients(const std::function<Tensor()>& loss, std::vector<Tensor> params, int probes,
                                      double h, std::mt19937_64& rng, double floor = 1e-8,
                                      const std::vector<std::string>& labels = {})
{
    for (auto& p : params)
        p.zero_grad();
    {
        Recording rec;
        backward(loss());
    }
    std::vector<Matrix> grads;
    for (auto& p : params)
        grads.push_back(p.has_grad() ? p.grad() : Matrix::Zero(p.rows(), p.cols()));

    GradientReport report;
    std::normal_distribution<double> normal(0.0, 1.0);
    for (std::size_t i = 0; i < params.size(); ++i) {
        Tensor& p = params[i];
        for (int k = 0; k < probes; ++k) {
            Matrix v(p.rows(), p.cols());
            for (Index j = 0; j < v.size(); ++j)
                v.data()[j] = normal(rng);
            v /= v.norm();
            const Matrix base = p.value();
            p.mutable_value() = base + h * v;
            const double up = loss().item();
            p.mutable_value() = base - h * v;
            const double down = loss().item();
            p.mutable_value() = base;
            const double numeric = (up - down) / (2.0 * h);
            const double analytic = grads[i].cwiseProduct(v).sum();
            const double err = relative_error(numeric, analytic, floor);
            if (err > report.max_relative_error) {
                report.max_relative_error = err;
                if (i < labels.size())
                    report.worst = labels[i];
            }
            ++report.probes;
        }
    }
    for (auto& p : params)
        p.zero_grad();
    return report;
}

namespace detail {

inline std::string fmt(double v)
{
    std::ostringstream os;
    os.precision(3);
    os << v;
    return os.str();
}

inline Matrix normal_matrix(Index rows, Index cols, std::mt19937_64& rng)
{
    std::normal_distribution<double> n(0.0, 1.0);
    Matrix m(rows, cols);
    for (Index i = 0; i < m.size(); ++i)
        m.data()[i] = n(rng);
    return m;
}

inline MultiModalKG graph(Index n, const std::vector<std::pair<Index, Index>>& edges)
{
    MultiModalKG kg;
    kg.entity_count = n;
    kg.relation_count = 1;
    for (const auto& [a, b] : edges)
        kg.triples.push_back({a, 0, b});
    return kg;
}

} // namespace detail

/// The small two-graph fixture shared by the gradient and lambda checks:
/// 6 + 6 entities with edge drop and feature noise.
inline AlignmentDataset tiny_dataset()
{
    SyntheticSpec s;
    s.entities = 6;
    s.relations = 3;
    s.triples_per_entity = 2.0;
    s.attr_vocab = 10;
    s.tokens_per_entity = 3;
    s.visual_dim = 8;
    s.edge_drop = 0.1;
    s.feature_noise = 0.05;
    s.train_ratio = 0.5;
    return generate_synthetic(s, 11);
}

inline TrainConfig tiny_config()
{
    TrainConfig c;
    c.hidden_dim = 10;
    c.fusion.heads = 2;
    c.fusion.ffn_dim = 12;
    c.loss.topk = 4;
    c.loss.lambda = 0.5;
    c.epochs = 5;
    c.seed = 3;
    return c;
}

inline CheckResult gram_volume_oracle(int trials = 1000)
{
    CheckResult r{1, "Gram-volume SVD oracle", false, ""};
    std::mt19937_64 rng(101);
    const auto start = std::chrono::steady_clock::now();
    double worst = 0.0;
    for (int t = 0; t < trials; ++t) {
        const Matrix m = detail::normal_matrix(16, 4, rng);
        const double vol = gram_volume(constant(m), 0.0).item();
        const Eigen::JacobiSVD<Matrix> svd(m);
        const double oracle = svd.singularValues().prod();
        worst = std::max(worst, std::abs(vol - oracle) / oracle);
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    r.passed = worst < 1e-8 && secs < 10.0;
    r.detail = std::to_string(trials) + " matrices, max rel err " + detail::fmt(worst) + ", " + detail::fmt(secs) + " s";
    return r;
}

inline CheckResult hadamard_bound(int trials = 10000)
{
    CheckResult r{2, "Hadamard volume bound", false, ""};
    std::mt19937_64 rng(202);
    std::uniform_int_distribution<Index> dim(4, 32);
    const double eps = 1e-8;
    const double lo = std::sqrt(eps), hi = std::sqrt(1.0 + eps);
    int violations = 0;
    for (int t = 0; t < trials; ++t) {
        Matrix m = detail::normal_matrix(dim(rng), 4, rng);
        m.colwise().normalize();
        const double vol = gram_volume(constant(m), eps).item();
        if (!(vol >= lo && vol <= hi))
            ++violations;
    }
    r.passed = violations == 0;
    r.detail = std::to_string(trials) + " stacks, " + std::to_string(violations) + " violations";
    return r;
}

inline CheckResult gradient_suite()
{
    CheckResult r{3, "Total-loss gradient vs finite differences", false, ""};
    const AlignmentDataset data = tiny_dataset();
    const TrainConfig cfg = tiny_config();
    const ModelInputs in = prepare_inputs(data);
    std::mt19937_64 init(cfg.seed);
    const ModelParams params = init_params(in, cfg, init);
    const auto pairs = data.seeds.train_pairs();
    auto loss = [&] {
        // Fixed dropout masks keep the loss a deterministic function of the parameters.
        std::mt19937_64 drop(5);
        const auto fwd = forward(params, in, cfg, Mode::train, drop, batch_rows(in, pairs));
        return batch_loss(fwd, in, pairs, cfg.loss, true).total;
    };
    std::vector<Tensor> tensors;
    std::vector<std::string> labels;
    for (const auto& [name, t] : params.named()) {
        tensors.push_back(t);
        labels.push_back(name);
    }
    std::mt19937_64 rng(303);
    const auto report = check_gradients(loss, tensors, 3, 1e-5, rng, 1e-6, labels);
    r.passed = report.max_relative_error < 1e-4;
    r.detail = std::to_string(tensors.size()) + " parameters, " + std::to_string(report.probes) +
               " probes, max rel err " + detail::fmt(report.max_relative_error) +
               (report.worst.empty() ? "" : " (" + report.worst + ")");
    return r;
}

inline CheckResult diffusion_identities()
{
    CheckResult r{4, "Diffusion identities", false, ""};
    std::mt19937_64 rng(404);
    std::uniform_real_distribution<double> coef(0.0, 2.0);
    std::uniform_int_distribution<int> steps(1, 8);
    std::uniform_int_distribution<Index> size(1, 30);
    double identity_err = 0.0;
    for (int t = 0; t < 20; ++t) {
        DiffusionConfig c;
        c.alpha = coef(rng);
        c.beta = coef(rng) + 0.05;
        c.k = steps(rng);
        const Index n = size(rng);
        const Matrix h = detail::normal_matrix(n, size(rng), rng);
        const auto adj = build_adjacency(detail::graph(n, {}));
        identity_err = std::max(identity_err, (diffuse(constant(h), adj, c, Mode::eval, rng).value() - h).cwiseAbs().maxCoeff());
    }

    double path_err = 0.0;
    const auto path = build_adjacency(detail::graph(3, {{0, 1}, {1, 2}}));
    const Matrix a = path.dense();
    for (int t = 0; t < 5; ++t) {
        DiffusionConfig c;
        c.alpha = coef(rng);
        c.beta = coef(rng) + 0.05;
        c.k = 2;
        const Matrix h = detail::normal_matrix(3, 4, rng);
        const Matrix poly = c.beta * c.beta * a * a + c.alpha * c.beta * a + c.alpha * Matrix::Identity(3, 3);
        const Matrix oracle = poly * h / (c.beta * c.beta + c.alpha * (1.0 + c.beta));
        path_err = std::max(path_err, (diffuse(constant(h), path, c, Mode::eval, rng).value() - oracle).cwiseAbs().maxCoeff());
    }

    // Direct sum in the order written: 0.9^4 + 0.1 * (1 + 0.9 + 0.81 + 0.729).
    DiffusionConfig d;
    const double direct = 0.9 * 0.9 * 0.9 * 0.9 + 0.1 * (((1.0 + 0.9) + 0.9 * 0.9) + 0.9 * 0.9 * 0.9);
    const double g = gamma(d);
    const bool gamma_ok = std::abs(g - direct) <= 1e-15;

    r.passed = identity_err < 1e-12 && path_err < 1e-10 && gamma_ok;
    std::ostringstream os;
    os.precision(17);
    os << "identity max err " << detail::fmt(identity_err) << ", path max err " << detail::fmt(path_err)
       << ", gamma(0.1,0.9,4) = " << g << " (direct sum " << direct << ")";
    r.detail = os.str();
    return r;
}

inline CheckResult adjacency_correctness(int graphs = 50)
{
    CheckResult r{5, "Sparse normalized adjacency vs dense oracle", false, ""};
    std::mt19937_64 rng(505);
    std::uniform_int_distribution<Index> size(1, 100);
    double worst = 0.0;
    for (int t = 0; t < graphs; ++t) {
        const Index n = size(rng);
        std::uniform_int_distribution<Index> node(0, n - 1);
        std::uniform_int_distribution<Index> count(0, 3 * n);
        std::vector<std::pair<Index, Index>> edges;
        for (Index e = count(rng); e > 0; --e)
            edges.emplace_back(node(rng), node(rng));
        Matrix a = Matrix::Identity(n, n);
        for (const auto& [i, j] : edges) {
            a(i, j) = 1.0;
            a(j, i) = 1.0;
        }
        const Eigen::VectorXd inv_sqrt = a.rowwise().sum().array().rsqrt();
        const Matrix oracle = inv_sqrt.asDiagonal() * a * inv_sqrt.asDiagonal();
        worst = std::max(worst, (build_adjacency(detail::graph(n, edges)).dense() - oracle).cwiseAbs().maxCoeff());
    }
    r.passed = worst < 1e-12;
    r.detail = std::to_string(graphs) + " graphs, max abs err " + detail::fmt(worst);
    return r;
}

inline CheckResult loss_sanity()
{
    CheckResult r{6, "Loss sanity fixtures", false, ""};
    std::mt19937_64 rng(606);

    // Every candidate carries the same rows, so all K volumes coincide.
    LossConfig lc;
    const Index k = 5, d = 8;
    const Matrix row = detail::normal_matrix(1, d, rng);
    auto rows = [&](Index n) { return constant(row.replicate(n, 1) + detail::normal_matrix(1, d, rng).replicate(n, 1)); };
    const GramBatch gb = make_gram_batch(constant(detail::normal_matrix(3, d, rng)), rows(k), rows(k), rows(k), {0, 1, 2}, k);
    const double gram = gram_loss(gb, lc).item();
    const double gram_err = std::abs(gram - std::log(static_cast<double>(k)));

    // Identical joint rows: every similarity equals 1.
    const Index b = 4;
    const Tensor same = constant(row.replicate(b, 1));
    const double expected = lc.include_positive ? std::log(static_cast<double>(b)) : std::log(static_cast<double>(b - 1));
    const double infonce_err = std::abs(infonce_loss(same, same, lc).item() - expected);

    // lambda = 0 with the Gram term built and discarded vs never built.
    const AlignmentDataset data = tiny_dataset();
    TrainConfig cfg = tiny_config();
    cfg.loss.lambda = 0.0;
    const ModelInputs in = prepare_inputs(data);
    TrainOptions forced;
    forced.force_gram = true;
    const auto with = train(in, data.seeds.train_pairs(), cfg, forced);
    const auto without = train(in, data.seeds.train_pairs(), cfg);
    bool identical = with.history.size() == without.history.size();
    for (std::size_t e = 0; identical && e < with.history.size(); ++e)
        identical = with.history[e].total == without.history[e].total &&
                    with.history[e].infonce == without.history[e].infonce &&
                    without.history[e].total == without.history[e].infonce;
    const auto sa = with.params.snapshot(), sb = without.params.snapshot();
    for (std::size_t i = 0; identical && i < sa.size(); ++i)
        identical = sa[i].second == sb[i].second;

    r.passed = gram_err < 1e-12 && infonce_err < 1e-12 && identical;
    r.detail = "Gram |loss - ln K| " + detail::fmt(gram_err) + ", InfoNCE |loss - closed form| " +
               detail::fmt(infonce_err) + ", lambda=0 training " + (identical ? "bit-identical" : "differs");
    return r;
}

inline std::vector<CheckResult> run_all()
{
    return {gram_volume_oracle(), hadamard_bound(), gradient_suite(), diffusion_identities(), adjacency_correctness(),
            loss_sanity()};
}

} // namespace mygram::selfcheck

#endif // MYGRAM_SELFCHECK_HPP
