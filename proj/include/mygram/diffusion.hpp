#ifndef MYGRAM_DIFFUSION_HPP
#define MYGRAM_DIFFUSION_HPP

// Modality-aware graph diffusion:
//   H(l) = beta * A_hat * H(l-1) + alpha * H(0),  l = 1..k
//   out  = Dropout(H(k) / gamma),  gamma = beta^k + alpha * sum_{c<k} beta^c
// where H(0) is the dropped-out input.

#include "mygram/kgdata.hpp"
#include "mygram/ops.hpp"

#include <random>

namespace mygram {

struct DiffusionConfig {
    double alpha = 0.1;  // residual retention
    double beta = 0.9;   // neighborhood propagation
    int k = 4;           // propagation steps
    double dropout = 0.3;

    void validate() const
    {
        if (!(alpha >= 0.0) || !(beta >= 0.0))
            throw Error("diffusion: alpha and beta must be non-negative");
        if (k < 1)
            throw Error("diffusion: k must be at least 1");
        if (!(dropout >= 0.0 && dropout < 1.0))
            throw Error("diffusion: dropout must lie in [0,1)");
    }
};

/// Direct summation, so beta = 1 needs no special case.
inline double gamma(const DiffusionConfig& cfg)
{
    double power = 1.0; // beta^c
    double residual = 0.0;
    for (int c = 0; c < cfg.k; ++c) {
        residual += power;
        power *= cfg.beta;
    }
    const double g = power + cfg.alpha * residual;
    if (!(g > 0.0))
        throw Error("diffusion: gamma must be positive (alpha = beta = 0?)");
    return g;
}

inline Tensor diffuse(const Tensor& h0, const NormalizedAdjacency& adj, const DiffusionConfig& cfg, Mode mode,
                      std::mt19937_64& rng)
{
    cfg.validate();
    if (adj.dimension != h0.rows())
        throw Error("diffuse: adjacency dimension " + std::to_string(adj.dimension) + " does not match " +
                    std::to_string(h0.rows()) + " rows");
    const double g = gamma(cfg);
    const Tensor start = dropout(h0, cfg.dropout, mode, rng);
    const Tensor retained = scale(start, cfg.alpha);
    Tensor h = start;
    for (int l = 0; l < cfg.k; ++l)
        h = add(scale(spmm(adj.entries, h), cfg.beta), retained);
    return dropout(scale(h, 1.0 / g), cfg.dropout, mode, rng);
}

} // namespace mygram

#endif // MYGRAM_DIFFUSION_HPP
