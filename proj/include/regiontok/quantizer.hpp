#pragma once

// Vector quantizer with an EMA-maintained codebook.
//
// Each code k keeps a running cluster sum S_k and count N_k; its embedding is
// the centroid S_k / N_k. After an update step, codes whose count dropped
// below one are re-seeded from the current batch of latents (the restart runs
// after the EMA update within a step).

#include "regiontok/autograd.hpp"
#include "regiontok/rng.hpp"

#include <span>
#include <vector>

namespace regiontok::quantizer {

struct Codebook {
    int size = 0; // K
    int dim = 0;  // d
    double mu = 0.01;
    Tensor embeddings;                 // [K, d]
    Tensor cluster_sum;                // [K, d]
    std::vector<double> cluster_count; // [K]

    // Gaussian embeddings with N_k = 1 and S_k = e_k.
    static Codebook random(int size, int dim, double mu, Rng& rng, double std_dev = 1.0);
    static Codebook from_embeddings(Tensor embeddings, double mu);

    std::span<const double> embedding(int k) const {
        return {embeddings.data.data() + static_cast<std::size_t>(k) * dim, static_cast<std::size_t>(dim)};
    }
};

struct QuantizationResult {
    std::vector<int> indices;
    Tensor quantized; // [M, d], rows copied from the codebook
    double commitment = 0.0;
};

// Nearest code per latent row (latents is [M, d]); ties go to the lowest index.
QuantizationResult assign(const Codebook& codebook, const Tensor& latents);

// S_k <- (1-mu) S_k + mu * sum(z in C_k); N_k <- (1-mu) N_k + mu |C_k|;
// e_k <- S_k / N_k for N_k > 0.
void ema_update(Codebook& codebook, const Tensor& latents, std::span<const int> assignments);

// Re-seeds every code with N_k < 1 from a uniformly drawn latent row and
// resets S_k = e_k, N_k = 1. Returns the number of restarted codes.
int restart_dead_codes(Codebook& codebook, const Tensor& latents, Rng& rng);

// mean((z - sg(zq))^2) over all elements; gradient reaches z only.
ad::Var commitment_loss(const ad::Var& z, const Tensor& quantized);

// Forward value zq, identity Jacobian to z.
ad::Var straight_through(const ad::Var& z, const Tensor& quantized);

// Fraction of the K codes that appear at least once in the window.
double utilization(const Codebook& codebook, std::span<const int> window_assignments);

} // namespace regiontok::quantizer
