#pragma once

// Heterogeneity-aware aggregation weights from the 2-Wasserstein distance
// between Gaussian approximations of each client's update and the global one.
//
// Client u's update over K local steps is modelled as N(K*eta_L*mu_u, K^2*eta_L^2*Sigma_u/B)
// and the global reference as N(eta*mu_g, eta^2*Sigma_g/B). Minimizing
// sum_u p_u^2 * c_u on the simplex, with c_u the squared distance between the
// two, gives p_u proportional to 1 / c_u.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "fedrec/core_mf.hpp"
#include "fedrec/error.hpp"

namespace fedrec {

using ClientId = std::int32_t;

// What a client sends to the server after a round. `delta` holds one
// dim-length block per entry of `items` (ascending item index), i.e. the sparse
// form of the flattened update K*eta_L*mu_u; untouched items are zero blocks.
// `sigma_diag` is the per-coordinate variance of the client's per-step item
// gradients (same layout as delta) or empty when not reported.
struct ClientUpdateStats {
    ClientId client_id = 0;
    std::size_t dim = 0;
    std::vector<ItemIndex> items;
    std::vector<double> delta;
    std::vector<double> sigma_diag;

    std::span<const double> block(std::size_t k) const { return {delta.data() + k * dim, dim}; }
    std::span<const double> sigma_block(std::size_t k) const { return {sigma_diag.data() + k * dim, dim}; }
    bool has_sigma() const noexcept { return !sigma_diag.empty(); }
};

struct AggregationWeights {
    std::vector<ClientId> clients;
    std::vector<double> p;

    std::size_t size() const noexcept { return p.size(); }
};

enum class AggregationMode { uniform, wasserstein_simplified, wasserstein_full };

struct WeightScales {
    double global_lr = 1.0;
    double local_lr = 1.0;
    int local_epochs = 1;
    double batch_size = 1.0;
};

inline constexpr double kDefaultWeightEpsilon = 1e-8;

// Dense flattening in ascending item order (num_items * dim entries).
inline std::vector<double> flatten(const ClientUpdateStats& s, std::size_t num_items) {
    std::vector<double> out(num_items * s.dim, 0.0);
    for (std::size_t k = 0; k < s.items.size(); ++k) {
        auto b = s.block(k);
        std::copy(b.begin(), b.end(), out.begin() + static_cast<std::ptrdiff_t>(s.items[k] * s.dim));
    }
    return out;
}

inline std::vector<double> flatten_sigma(const ClientUpdateStats& s, std::size_t num_items) {
    std::vector<double> out(num_items * s.dim, 0.0);
    if (!s.has_sigma()) return out;
    for (std::size_t k = 0; k < s.items.size(); ++k) {
        auto b = s.sigma_block(k);
        std::copy(b.begin(), b.end(), out.begin() + static_cast<std::ptrdiff_t>(s.items[k] * s.dim));
    }
    return out;
}

// Closed form for diagonal covariances:
//   |mu1 - mu2|^2 + sum_i (sqrt(s1_i) - sqrt(s2_i))^2
inline double gaussian_wasserstein_sq(std::span<const double> mu1, std::span<const double> mu2,
                                      std::span<const double> s1, std::span<const double> s2) {
    if (mu1.size() != mu2.size() || s1.size() != s2.size() || s1.size() != mu1.size()) {
        throw ContractViolation("gaussian_wasserstein_sq: dimension mismatch");
    }
    double d2 = 0.0;
    for (std::size_t i = 0; i < mu1.size(); ++i) {
        if (s1[i] < 0.0 || s2[i] < 0.0) throw ValidationError("gaussian_wasserstein_sq: negative variance");
        double dm = mu1[i] - mu2[i];
        double ds = std::sqrt(s1[i]) - std::sqrt(s2[i]);
        d2 += dm * dm + ds * ds;
    }
    return d2;
}

// Server-side stand-in for the unobservable global reference: eta*mu_g is the
// round mean of the client updates, and eta^2*Sigma_g the round mean of the
// scaled client variances, so identical clients sit at distance 0.
struct GlobalReference {
    std::size_t dim = 0;
    std::vector<double> mu;    // mu_g, num_items * dim
    std::vector<double> sigma; // Sigma_g diagonal, empty if no client reported one
};

inline GlobalReference estimate_global_reference(std::span<const ClientUpdateStats> stats, std::size_t num_items,
                                                 std::size_t dim, const WeightScales& sc) {
    GlobalReference ref;
    ref.dim = dim;
    ref.mu.assign(num_items * dim, 0.0);
    bool any_sigma = false;
    for (const auto& s : stats) any_sigma = any_sigma || s.has_sigma();
    if (any_sigma) ref.sigma.assign(num_items * dim, 0.0);
    if (stats.empty()) return ref;

    const double m = static_cast<double>(stats.size());
    for (const auto& s : stats) {
        for (std::size_t k = 0; k < s.items.size(); ++k) {
            const std::size_t off = static_cast<std::size_t>(s.items[k]) * dim;
            auto b = s.block(k);
            for (std::size_t c = 0; c < dim; ++c) ref.mu[off + c] += b[c];
            if (s.has_sigma()) {
                auto sb = s.sigma_block(k);
                for (std::size_t c = 0; c < dim; ++c) ref.sigma[off + c] += sb[c];
            }
        }
    }
    const double mu_scale = 1.0 / (m * sc.global_lr);
    for (double& x : ref.mu) x *= mu_scale;
    const double ratio = sc.local_epochs * sc.local_lr / sc.global_lr;
    for (double& x : ref.sigma) x *= ratio * ratio / m;
    return ref;
}

// c_u = |K*eta_L*mu_u - eta*mu_g|^2 (+ tr(M^2) when with_covariance), evaluated
// sparsely: coordinates the client never touched contribute the reference term
// alone.
inline std::vector<double> distance_terms(std::span<const ClientUpdateStats> stats, const GlobalReference& ref,
                                          const WeightScales& sc, bool with_covariance) {
    const std::size_t dim = ref.dim;
    const double eta = sc.global_lr;
    double ref_mean_sq = 0.0; // |eta*mu_g|^2
    for (double x : ref.mu) ref_mean_sq += (eta * x) * (eta * x);

    const bool cov = with_covariance && !ref.sigma.empty();
    const double g_scale = eta * eta / sc.batch_size;
    const double u_scale = static_cast<double>(sc.local_epochs) * sc.local_epochs * sc.local_lr * sc.local_lr /
                           sc.batch_size;
    double ref_cov_sq = 0.0; // sum_i eta^2 sigma_g,i / B
    if (cov) {
        for (double s : ref.sigma) {
            if (s < 0.0) throw ValidationError("global variance must be nonnegative");
            ref_cov_sq += g_scale * s;
        }
    }

    std::vector<double> terms;
    terms.reserve(stats.size());
    for (const auto& s : stats) {
        if (s.dim != dim) throw ContractViolation("distance_terms: client dimension mismatch");
        double c = ref_mean_sq;
        double t = ref_cov_sq;
        for (std::size_t k = 0; k < s.items.size(); ++k) {
            const std::size_t off = static_cast<std::size_t>(s.items[k]) * dim;
            if (off + dim > ref.mu.size()) throw ContractViolation("distance_terms: item outside reference");
            auto b = s.block(k);
            for (std::size_t i = 0; i < dim; ++i) {
                double g = eta * ref.mu[off + i];
                double d = b[i] - g;
                c += d * d - g * g;
            }
            if (cov) {
                for (std::size_t i = 0; i < dim; ++i) {
                    double su = s.has_sigma() ? s.sigma_block(k)[i] : 0.0;
                    if (su < 0.0) throw ValidationError("client variance must be nonnegative");
                    double a = std::sqrt(g_scale * ref.sigma[off + i]);
                    double bb = std::sqrt(u_scale * su);
                    t += (a - bb) * (a - bb) - a * a;
                }
            }
        }
        // Sparse accumulation can leave tiny negative round-off.
        terms.push_back(std::max(c, 0.0) + (cov ? std::max(t, 0.0) : 0.0));
    }
    return terms;
}

// p_u = (1/c_u) / sum_v (1/c_v) with each c_u floored at eps; all-zero terms
// therefore give uniform weights.
inline std::vector<double> inverse_distance_weights(std::span<const double> terms, double eps) {
    if (terms.empty()) throw ContractViolation("aggregation needs at least one client");
    std::vector<double> inv(terms.size());
    double sum = 0.0;
    for (std::size_t u = 0; u < terms.size(); ++u) {
        if (!(terms[u] >= 0.0)) throw ValidationError("distance term must be a nonnegative number");
        inv[u] = 1.0 / std::max(terms[u], eps);
        sum += inv[u];
    }
    for (double& x : inv) x /= sum;
    return inv;
}

namespace detail {
inline AggregationWeights with_ids(std::span<const ClientUpdateStats> stats, std::vector<double> p) {
    AggregationWeights w;
    w.clients.reserve(stats.size());
    for (const auto& s : stats) w.clients.push_back(s.client_id);
    w.p = std::move(p);
    return w;
}
} // namespace detail

inline AggregationWeights uniform_weights(std::span<const ClientUpdateStats> stats) {
    if (stats.empty()) throw ContractViolation("aggregation needs at least one client");
    return detail::with_ids(stats, std::vector<double>(stats.size(), 1.0 / static_cast<double>(stats.size())));
}

// KKT solution of min sum_u p_u^2 c_u s.t. sum p = 1, p >= 0, with c_u including
// the covariance mismatch tr(M^2).
inline AggregationWeights optimal_weights_full(std::span<const ClientUpdateStats> stats,
                                               const GlobalReference& ref, const WeightScales& sc,
                                               double eps = kDefaultWeightEpsilon) {
    return detail::with_ids(stats, inverse_distance_weights(distance_terms(stats, ref, sc, true), eps));
}

// Large-batch limit: tr(M^2) -> 0, p_u proportional to 1 / (|K*eta_L*mu_u - eta*mu_g|^2 + eps).
inline AggregationWeights optimal_weights_simplified(std::span<const ClientUpdateStats> stats,
                                                     const GlobalReference& ref, const WeightScales& sc,
                                                     double eps = kDefaultWeightEpsilon) {
    auto terms = distance_terms(stats, ref, sc, false);
    if (terms.empty()) throw ContractViolation("aggregation needs at least one client");
    std::vector<double> p(terms.size());
    double sum = 0.0;
    for (std::size_t u = 0; u < terms.size(); ++u) {
        p[u] = 1.0 / (terms[u] + eps);
        sum += p[u];
    }
    for (double& x : p) x /= sum;
    return detail::with_ids(stats, std::move(p));
}

// sum_u p_u^2 c_u
inline double aggregation_objective(std::span<const double> terms, std::span<const double> p) {
    if (terms.size() != p.size()) throw ContractViolation("aggregation_objective: length mismatch");
    double d = 0.0;
    for (std::size_t u = 0; u < p.size(); ++u) d += p[u] * p[u] * terms[u];
    return d;
}

// sum_i (w_i - p_i)^2 / p_i with w uniform.
inline double chi_square_divergence(std::span<const double> p) {
    if (p.empty()) throw ContractViolation("chi_square_divergence: empty weights");
    const double w = 1.0 / static_cast<double>(p.size());
    double chi = 0.0;
    for (double pi : p) {
        if (!(pi > 0.0)) throw ValidationError("chi_square_divergence: weights must be positive");
        chi += (w - pi) * (w - pi) / pi;
    }
    return chi;
}

inline double chi_square_divergence(const AggregationWeights& w) { return chi_square_divergence(w.p); }

} // namespace fedrec
