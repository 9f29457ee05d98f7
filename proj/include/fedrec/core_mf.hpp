#pragma once

// Probabilistic matrix factorization backbone: r_hat = U_u . V_i, the per-pair
// squared loss with L2 regularization, and its SGD update rules.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "fedrec/error.hpp"
#include "fedrec/random.hpp"

namespace fedrec {

using UserIndex = std::int32_t;
using ItemIndex = std::int32_t;

struct Rating {
    UserIndex user;
    ItemIndex item;
    double value;
};

struct Hyperparams {
    int latent_dim = 16;
    double reg_lambda = 0.01;
    double local_lr = 0.05;
    double global_lr = 1.0;
    int local_epochs = 1;
    // 0 means one batch holding the client's whole (filled) profile.
    int batch_size = 0;
    int rounds = 100;
    std::uint64_t rng_seed = 42;

    void validate() const {
        if (latent_dim < 1) throw ValidationError("latent_dim must be >= 1");
        if (!(reg_lambda >= 0.0)) throw ValidationError("reg_lambda must be >= 0");
        if (!(local_lr > 0.0)) throw ValidationError("local_lr must be > 0");
        if (!(global_lr > 0.0)) throw ValidationError("global_lr must be > 0");
        if (local_epochs < 1) throw ValidationError("local_epochs must be >= 1");
        if (batch_size < 0) throw ValidationError("batch_size must be >= 0");
        if (rounds < 0) throw ValidationError("rounds must be >= 0");
    }
};

// ---------------------------------------------------------------------------
// Small dense vector kernels.

inline double dot(std::span<const double> a, std::span<const double> b) {
    double sum = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        sum += a[i] * b[i];
    }
    return sum;
}

inline double squared_norm(std::span<const double> a) { return dot(a, a); }

// y += alpha * x
inline void axpy(double alpha, std::span<const double> x, std::span<double> y) {
    for (std::size_t i = 0; i < x.size(); ++i) {
        y[i] += alpha * x[i];
    }
}

inline bool all_finite(std::span<const double> a) {
    for (double v : a) {
        if (!std::isfinite(v)) return false;
    }
    return true;
}

// Row-major rows x dim block of latent vectors.
class FactorMatrix {
public:
    FactorMatrix() = default;
    FactorMatrix(std::size_t rows, std::size_t dim) : rows_(rows), dim_(dim), data_(rows * dim, 0.0) {}

    std::size_t rows() const noexcept { return rows_; }
    std::size_t dim() const noexcept { return dim_; }

    std::span<const double> row(std::size_t i) const { return {data_.data() + i * dim_, dim_}; }
    std::span<double> row(std::size_t i) { return {data_.data() + i * dim_, dim_}; }

    std::span<const double> data() const noexcept { return data_; }
    std::span<double> data() noexcept { return data_; }

    bool operator==(const FactorMatrix&) const = default;

private:
    std::size_t rows_ = 0;
    std::size_t dim_ = 0;
    std::vector<double> data_;
};

// Entries i.i.d. uniform on [-0.5/sqrt(d), 0.5/sqrt(d)].
inline void fill_uniform_init(FactorMatrix& m, Rng& rng) {
    const double half = 0.5 / std::sqrt(static_cast<double>(m.dim()));
    for (double& v : m.data()) {
        v = uniform(rng, -half, half);
    }
}

struct LatentFactors {
    FactorMatrix users;
    FactorMatrix items;

    static LatentFactors random(std::size_t num_users, std::size_t num_items, std::size_t dim,
                                std::uint64_t seed) {
        LatentFactors f{FactorMatrix(num_users, dim), FactorMatrix(num_items, dim)};
        auto user_rng = make_stream(seed, {stream::kInit, 0});
        auto item_rng = make_stream(seed, {stream::kInit, 1});
        fill_uniform_init(f.users, user_rng);
        fill_uniform_init(f.items, item_rng);
        return f;
    }
};

// ---------------------------------------------------------------------------
// Model, loss, gradients.

inline double predict(std::span<const double> u, std::span<const double> v) {
    if (u.size() != v.size()) {
        throw ContractViolation("predict: latent vectors differ in length");
    }
    return dot(u, v);
}

// 1/2 (r - U.V)^2 + lambda/2 (|V|^2 + |U|^2) for one rated pair. The halved
// regularizer is the one whose derivative is the lambda * V decay used by the
// SGD steps below.
inline double pair_loss(std::span<const double> u, std::span<const double> v, double r, double lambda) {
    double e = r - predict(u, v);
    return 0.5 * e * e + 0.5 * lambda * (squared_norm(v) + squared_norm(u));
}

// Sum of pair_loss over the rated pairs; the regularizer is charged once per
// pair, consistent with the per-sample gradients below.
inline double regularized_loss(const LatentFactors& f, std::span<const Rating> ratings, double lambda) {
    double total = 0.0;
    for (const auto& r : ratings) {
        if (r.user < 0 || static_cast<std::size_t>(r.user) >= f.users.rows() || r.item < 0 ||
            static_cast<std::size_t>(r.item) >= f.items.rows()) {
            throw ContractViolation("regularized_loss: rating references a missing latent vector");
        }
        total += pair_loss(f.users.row(r.user), f.items.row(r.item), r.value, lambda);
    }
    return total;
}

// g = lambda * V - e * U with e = r - U.V.
inline void item_gradient_into(std::span<const double> u, std::span<const double> v, double r, double lambda,
                               std::span<double> out) {
    const double e = r - predict(u, v);
    for (std::size_t k = 0; k < v.size(); ++k) {
        out[k] = lambda * v[k] - e * u[k];
    }
}

inline std::vector<double> item_gradient(std::span<const double> u, std::span<const double> v, double r,
                                         double lambda) {
    std::vector<double> g(v.size());
    item_gradient_into(u, v, r, lambda, g);
    return g;
}

// lambda * U - e * V.
inline std::vector<double> user_gradient(std::span<const double> u, std::span<const double> v, double r,
                                         double lambda) {
    const double e = r - predict(u, v);
    std::vector<double> g(u.size());
    for (std::size_t k = 0; k < u.size(); ++k) {
        g[k] = lambda * u[k] - e * v[k];
    }
    return g;
}

inline std::vector<double> user_update(std::span<const double> u, std::span<const double> v, double r,
                                       double lambda, double lr) {
    auto g = user_gradient(u, v, r, lambda);
    std::vector<double> out(u.begin(), u.end());
    axpy(-lr, g, out);
    return out;
}

} // namespace fedrec
