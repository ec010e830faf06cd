#include "regiontok/quantizer.hpp"

#include "regiontok/errors.hpp"
#include "regiontok/ops.hpp"

#include <Eigen/Core>

#include <algorithm>

namespace regiontok::quantizer {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using CMapMat = Eigen::Map<const RowMat>;

Codebook Codebook::random(int size, int dim, double mu, Rng& rng, double std_dev) {
    Tensor e({size, dim});
    for (double& v : e.data) v = std_dev * normal(rng);
    return from_embeddings(std::move(e), mu);
}

Codebook Codebook::from_embeddings(Tensor embeddings, double mu) {
    if (embeddings.rank() != 2) throw ShapeError("codebook embeddings must be [K, d]");
    if (!(mu > 0.0 && mu <= 1.0)) throw ValueError("codebook EMA ratio must lie in (0, 1]");
    Codebook cb;
    cb.size = embeddings.dim(0);
    cb.dim = embeddings.dim(1);
    cb.mu = mu;
    cb.cluster_sum = embeddings;
    cb.embeddings = std::move(embeddings);
    cb.cluster_count.assign(static_cast<std::size_t>(cb.size), 1.0);
    return cb;
}

QuantizationResult assign(const Codebook& codebook, const Tensor& latents) {
    if (latents.rank() != 2 || latents.dim(1) != codebook.dim)
        throw ShapeError("assign: latents " + shape_string(latents.shape) + " do not match codebook dim " +
                         std::to_string(codebook.dim));
    const int m = latents.dim(0), k = codebook.size, d = codebook.dim;
    if (m == 0) throw ShapeError("assign: empty latent batch");

    // Owned copies keep Eigen's vectorized sums independent of heap alignment.
    const RowMat z = CMapMat(latents.data.data(), m, d);
    const RowMat e = CMapMat(codebook.embeddings.data.data(), k, d);
    const Eigen::VectorXd e_norm = e.rowwise().squaredNorm();
    const RowMat dots = z * e.transpose();

    QuantizationResult r;
    r.indices.resize(static_cast<std::size_t>(m));
    r.quantized = Tensor({m, d});
    double commit = 0.0;
    for (int i = 0; i < m; ++i) {
        const double zn = z.row(i).squaredNorm();
        int best = 0;
        double best_d = std::max(0.0, zn - 2.0 * dots(i, 0) + e_norm(0));
        for (int c = 1; c < k; ++c) {
            const double dist = std::max(0.0, zn - 2.0 * dots(i, c) + e_norm(c));
            if (dist < best_d) {
                best_d = dist;
                best = c;
            }
        }
        r.indices[static_cast<std::size_t>(i)] = best;
        const auto row = codebook.embedding(best);
        std::copy(row.begin(), row.end(), r.quantized.data.begin() + static_cast<std::ptrdiff_t>(i) * d);
        for (int j = 0; j < d; ++j) {
            const double diff = z(i, j) - row[static_cast<std::size_t>(j)];
            commit += diff * diff;
        }
    }
    r.commitment = commit / (static_cast<double>(m) * d);
    return r;
}

void ema_update(Codebook& codebook, const Tensor& latents, std::span<const int> assignments) {
    const int k = codebook.size, d = codebook.dim;
    if (latents.rank() != 2 || latents.dim(1) != d) throw ShapeError("ema_update: latent dim mismatch");
    if (assignments.size() != static_cast<std::size_t>(latents.dim(0)))
        throw ShapeError("ema_update: one assignment per latent row is required");

    Tensor batch_sum({k, d}, 0.0);
    std::vector<double> batch_count(static_cast<std::size_t>(k), 0.0);
    for (std::size_t i = 0; i < assignments.size(); ++i) {
        const int c = assignments[i];
        if (c < 0 || c >= k) throw ValueError("ema_update: assignment outside codebook");
        batch_count[static_cast<std::size_t>(c)] += 1.0;
        for (int j = 0; j < d; ++j)
            batch_sum.data[static_cast<std::size_t>(c) * d + j] += latents.data[i * d + j];
    }
    const double mu = codebook.mu;
    for (int c = 0; c < k; ++c) {
        auto& n = codebook.cluster_count[static_cast<std::size_t>(c)];
        n = (1.0 - mu) * n + mu * batch_count[static_cast<std::size_t>(c)];
        for (int j = 0; j < d; ++j) {
            const std::size_t idx = static_cast<std::size_t>(c) * d + j;
            codebook.cluster_sum.data[idx] = (1.0 - mu) * codebook.cluster_sum.data[idx] + mu * batch_sum.data[idx];
        }
        if (n > 0.0)
            for (int j = 0; j < d; ++j) {
                const std::size_t idx = static_cast<std::size_t>(c) * d + j;
                codebook.embeddings.data[idx] = codebook.cluster_sum.data[idx] / n;
            }
    }
}

int restart_dead_codes(Codebook& codebook, const Tensor& latents, Rng& rng) {
    const int d = codebook.dim;
    if (latents.rank() != 2 || latents.dim(1) != d) throw ShapeError("restart_dead_codes: latent dim mismatch");
    const int m = latents.dim(0);
    if (m == 0) throw ShapeError("restart_dead_codes: empty latent batch");
    int restarted = 0;
    for (int c = 0; c < codebook.size; ++c) {
        if (codebook.cluster_count[static_cast<std::size_t>(c)] >= 1.0) continue;
        const auto src = static_cast<std::size_t>(uniform_index(rng, static_cast<std::uint64_t>(m)));
        for (int j = 0; j < d; ++j) {
            const std::size_t idx = static_cast<std::size_t>(c) * d + j;
            codebook.embeddings.data[idx] = latents.data[src * d + j];
            codebook.cluster_sum.data[idx] = codebook.embeddings.data[idx];
        }
        codebook.cluster_count[static_cast<std::size_t>(c)] = 1.0;
        ++restarted;
    }
    return restarted;
}

ad::Var commitment_loss(const ad::Var& z, const Tensor& quantized) {
    require_same_shape(z.value(), quantized, "commitment_loss");
    return ops::mean(ops::square(ops::sub(z, ad::constant(quantized))));
}

ad::Var straight_through(const ad::Var& z, const Tensor& quantized) { return ops::straight_through(z, quantized); }

double utilization(const Codebook& codebook, std::span<const int> window_assignments) {
    if (codebook.size == 0) return 0.0;
    std::vector<bool> used(static_cast<std::size_t>(codebook.size), false);
    for (int a : window_assignments)
        if (a >= 0 && a < codebook.size) used[static_cast<std::size_t>(a)] = true;
    return static_cast<double>(std::count(used.begin(), used.end(), true)) / codebook.size;
}

} // namespace regiontok::quantizer
