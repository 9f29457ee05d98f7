#pragma once

// Honest-but-curious server attack on federated MF with one local step (K = 1).
//
// With a full-batch local step the upload is delta_i = -eta_L * g_i, so the
// server recovers each item gradient g_i = lambda*V_i - e_i*U from what it
// received. Two consecutive rounds give, per uploaded item,
//
//   round t-1:  g_i  = lambda*V_i  - (r_i - U.V_i) U
//   round t:    g'_i = lambda*V'_i - (r_i - U'.V'_i) U'
//   with        U'   = U - eta_L/n * sum_j (lambda*U - (r_j - U.V'_j) V'_j)
//
// where V, V' are the broadcast item vectors (known to the server) and the
// unknowns are U and every r_i. The system is solved by Levenberg-Marquardt
// from several seeded starts.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "fedrec/aggregation.hpp"
#include "fedrec/core_mf.hpp"
#include "fedrec/error.hpp"
#include "fedrec/federation.hpp"
#include "fedrec/random.hpp"

namespace fedrec {

class AmbiguousObservation : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

inline constexpr double kSupportThreshold = 1e-12;

// Server-side view of one client over rounds t-1 and t. Rows of the matrices
// are aligned with the corresponding item lists.
struct AttackObservation {
    ClientId client = 0;
    std::size_t dim = 0;
    double lambda = 0.0;
    double local_lr = 0.0;
    std::vector<ItemIndex> prev_items;
    FactorMatrix prev_vectors;
    FactorMatrix prev_grads;
    std::vector<ItemIndex> curr_items;
    FactorMatrix curr_vectors;
    FactorMatrix curr_grads;
};

// Builds the observation from the two uploads and the two broadcast models.
inline AttackObservation make_observation(const ClientUpdateStats& prev_upload, const FactorMatrix& prev_broadcast,
                                          const ClientUpdateStats& curr_upload, const FactorMatrix& curr_broadcast,
                                          double lambda, double local_lr) {
    if (prev_upload.client_id != curr_upload.client_id) {
        throw ContractViolation("make_observation: uploads belong to different clients");
    }
    AttackObservation obs;
    obs.client = prev_upload.client_id;
    obs.dim = prev_broadcast.dim();
    obs.lambda = lambda;
    obs.local_lr = local_lr;
    auto fill = [&](const ClientUpdateStats& up, const FactorMatrix& v, std::vector<ItemIndex>& items,
                    FactorMatrix& vecs, FactorMatrix& grads) {
        items = up.items;
        vecs = FactorMatrix(items.size(), obs.dim);
        grads = FactorMatrix(items.size(), obs.dim);
        for (std::size_t k = 0; k < items.size(); ++k) {
            auto src = v.row(static_cast<std::size_t>(items[k]));
            std::copy(src.begin(), src.end(), vecs.row(k).begin());
            auto delta = up.block(k);
            for (std::size_t c = 0; c < obs.dim; ++c) grads.row(k)[c] = -delta[c] / local_lr;
        }
    };
    fill(prev_upload, prev_broadcast, obs.prev_items, obs.prev_vectors, obs.prev_grads);
    fill(curr_upload, curr_broadcast, obs.curr_items, obs.curr_vectors, obs.curr_grads);
    return obs;
}

// Items whose uploaded gradient is nonzero in either round.
inline std::vector<ItemIndex> infer_interactions(const AttackObservation& obs) {
    std::set<ItemIndex> out;
    for (std::size_t k = 0; k < obs.prev_items.size(); ++k) {
        if (std::sqrt(squared_norm(obs.prev_grads.row(k))) > kSupportThreshold) out.insert(obs.prev_items[k]);
    }
    for (std::size_t k = 0; k < obs.curr_items.size(); ++k) {
        if (std::sqrt(squared_norm(obs.curr_grads.row(k))) > kSupportThreshold) out.insert(obs.curr_items[k]);
    }
    return {out.begin(), out.end()};
}

struct AttackOptions {
    int restarts = 8;
    int max_iters = 500;
    double tolerance = 1e-3;
    std::uint64_t seed = 0;
};

struct AttackResult {
    std::vector<ItemIndex> inferred_rated;
    // Filled only when converged.
    std::map<ItemIndex, double> reconstructed_ratings;
    std::vector<double> user_vector;
    double residual = std::numeric_limits<double>::infinity();
    bool converged = false;
    // Every round-(t-1) gradient equals lambda*V: the user direction is
    // unobservable and the ratings are only pinned relative to the fitted U.
    bool degenerate_scale = false;
    int best_restart = -1;
};

namespace detail {

// Unknown layout: x = [U (dim), r_j for j in `items`].
class AttackSystem {
public:
    explicit AttackSystem(const AttackObservation& obs) : obs_(obs), d_(obs.dim) {
        std::set<ItemIndex> all(obs.prev_items.begin(), obs.prev_items.end());
        all.insert(obs.curr_items.begin(), obs.curr_items.end());
        items_.assign(all.begin(), all.end());
        for (auto it : obs.prev_items) prev_slot_.push_back(slot(it));
        for (auto it : obs.curr_items) curr_slot_.push_back(slot(it));
    }

    const std::vector<ItemIndex>& items() const { return items_; }
    std::size_t num_unknowns() const { return d_ + items_.size(); }
    std::size_t num_residuals() const { return d_ * (obs_.prev_items.size() + obs_.curr_items.size()); }

    // Residual vector and (optionally) its Jacobian.
    void evaluate(const Eigen::VectorXd& x, Eigen::VectorXd& res, Eigen::MatrixXd* jac) const {
        const std::size_t d = d_;
        const std::size_t P = num_unknowns();
        res.resize(static_cast<Eigen::Index>(num_residuals()));
        if (jac) jac->setZero(static_cast<Eigen::Index>(num_residuals()), static_cast<Eigen::Index>(P));
        Eigen::Map<const Eigen::VectorXd> U(x.data(), static_cast<Eigen::Index>(d));
        const double lambda = obs_.lambda;
        const double lr = obs_.local_lr;
        const auto di = static_cast<Eigen::Index>(d);
        Eigen::MatrixXd I = Eigen::MatrixXd::Identity(di, di);

        Eigen::Index row = 0;
        for (std::size_t k = 0; k < obs_.prev_items.size(); ++k, row += di) {
            auto V = vec(obs_.prev_vectors.row(k));
            auto g = vec(obs_.prev_grads.row(k));
            const auto j = static_cast<Eigen::Index>(d + prev_slot_[k]);
            const double e = x[j] - U.dot(V);
            res.segment(row, di) = lambda * V - e * U - g;
            if (jac) {
                jac->block(row, 0, di, di) = -e * I + U * V.transpose();
                jac->block(row, j, di, 1) = -U;
            }
        }

        // Propagated user vector for round t.
        const double step = lr / static_cast<double>(obs_.curr_items.size());
        Eigen::VectorXd Up = U;
        Eigen::MatrixXd dUp_dU = I;
        Eigen::MatrixXd dUp_dr = Eigen::MatrixXd::Zero(di, static_cast<Eigen::Index>(items_.size()));
        for (std::size_t k = 0; k < obs_.curr_items.size(); ++k) {
            auto V = vec(obs_.curr_vectors.row(k));
            const auto j = static_cast<Eigen::Index>(curr_slot_[k]);
            const double e = x[static_cast<Eigen::Index>(d) + j] - U.dot(V);
            Up -= step * (lambda * U - e * V);
            dUp_dU -= step * (lambda * I + V * V.transpose());
            dUp_dr.col(j) += step * V;
        }
        for (std::size_t k = 0; k < obs_.curr_items.size(); ++k, row += di) {
            auto V = vec(obs_.curr_vectors.row(k));
            auto g = vec(obs_.curr_grads.row(k));
            const auto j = static_cast<Eigen::Index>(curr_slot_[k]);
            const double f = x[static_cast<Eigen::Index>(d) + j] - Up.dot(V);
            res.segment(row, di) = lambda * V - f * Up - g;
            if (jac) {
                Eigen::MatrixXd dR_dUp = -f * I + Up * V.transpose();
                jac->block(row, 0, di, di) = dR_dUp * dUp_dU;
                jac->block(row, di, di, static_cast<Eigen::Index>(items_.size())) = dR_dUp * dUp_dr;
                jac->block(row, di + j, di, 1) += -Up;
            }
        }
    }

    double residual_norm(const Eigen::VectorXd& x) const {
        Eigen::VectorXd r;
        evaluate(x, r, nullptr);
        return r.norm();
    }

    // a_i = lambda*V_i - g_i = e_i * U for round t-1 items.
    std::vector<Eigen::VectorXd> prev_directions() const {
        std::vector<Eigen::VectorXd> out;
        for (std::size_t k = 0; k < obs_.prev_items.size(); ++k) {
            out.push_back(obs_.lambda * vec(obs_.prev_vectors.row(k)) - vec(obs_.prev_grads.row(k)));
        }
        return out;
    }

    const AttackObservation& observation() const { return obs_; }
    std::size_t prev_slot(std::size_t k) const { return prev_slot_[k]; }
    std::size_t curr_slot(std::size_t k) const { return curr_slot_[k]; }

    static Eigen::VectorXd vec(std::span<const double> s) {
        return Eigen::Map<const Eigen::VectorXd>(s.data(), static_cast<Eigen::Index>(s.size()));
    }

private:
    std::size_t slot(ItemIndex it) const {
        return static_cast<std::size_t>(std::lower_bound(items_.begin(), items_.end(), it) - items_.begin());
    }

    const AttackObservation& obs_;
    std::size_t d_;
    std::vector<ItemIndex> items_;
    std::vector<std::size_t> prev_slot_;
    std::vector<std::size_t> curr_slot_;
};

// Levenberg-Marquardt (damped Gauss-Newton) on 1/2 |res(x)|^2.
inline double levenberg_marquardt(const AttackSystem& sys, Eigen::VectorXd& x, int max_iters) {
    Eigen::VectorXd r, r_try;
    Eigen::MatrixXd J;
    sys.evaluate(x, r, &J);
    double cost = r.squaredNorm();
    double mu = 1e-3;
    const auto P = static_cast<Eigen::Index>(sys.num_unknowns());
    for (int it = 0; it < max_iters && cost > 1e-28; ++it) {
        Eigen::MatrixXd A = J.transpose() * J;
        Eigen::VectorXd b = -J.transpose() * r;
        bool improved = false;
        for (int tries = 0; tries < 30 && !improved; ++tries) {
            Eigen::MatrixXd damped = A;
            for (Eigen::Index i = 0; i < P; ++i) damped(i, i) += mu * std::max(A(i, i), 1e-12);
            Eigen::VectorXd dx = damped.ldlt().solve(b);
            if (!dx.allFinite()) {
                mu *= 10.0;
                continue;
            }
            Eigen::VectorXd x_try = x + dx;
            sys.evaluate(x_try, r_try, nullptr);
            const double c_try = r_try.squaredNorm();
            if (c_try < cost) {
                x = std::move(x_try);
                cost = c_try;
                mu = std::max(mu / 3.0, 1e-15);
                improved = true;
            } else {
                mu *= 4.0;
            }
        }
        if (!improved) break;
        sys.evaluate(x, r, &J);
    }
    return std::sqrt(cost);
}

} // namespace detail

inline AttackResult reconstruct_ratings(const AttackObservation& obs, const AttackOptions& opt = {}) {
    if (obs.prev_items.empty() || obs.curr_items.empty()) {
        throw ContractViolation("reconstruct_ratings: both rounds need at least one uploaded item");
    }
    if (!(obs.local_lr > 0.0)) throw ContractViolation("reconstruct_ratings: local_lr must be > 0");
    detail::AttackSystem sys(obs);
    if (sys.items().size() < 2) {
        throw AmbiguousObservation("reconstruct_ratings: a single uploaded item leaves the rating scale unidentified");
    }

    AttackResult result;
    result.inferred_rated = infer_interactions(obs);
    const std::size_t d = obs.dim;
    const auto n = sys.items().size();

    auto dirs = sys.prev_directions();
    std::size_t lead = 0;
    double lead_norm = 0.0;
    for (std::size_t k = 0; k < dirs.size(); ++k) {
        if (dirs[k].norm() > lead_norm) {
            lead_norm = dirs[k].norm();
            lead = k;
        }
    }
    double scale_ref = 0.0;
    for (std::size_t k = 0; k < obs.prev_items.size(); ++k) {
        scale_ref = std::max(scale_ref, std::sqrt(squared_norm(obs.prev_grads.row(k))));
        scale_ref = std::max(scale_ref, obs.lambda * std::sqrt(squared_norm(obs.prev_vectors.row(k))));
    }
    result.degenerate_scale = lead_norm <= 1e-12 * std::max(scale_ref, 1.0);

    Eigen::VectorXd best;
    for (int restart = 0; restart < opt.restarts; ++restart) {
        auto rng = make_stream(opt.seed, {stream::kAttack, static_cast<std::uint64_t>(restart)});
        Eigen::VectorXd x(static_cast<Eigen::Index>(d + n));
        Eigen::VectorXd U(static_cast<Eigen::Index>(d));
        if (!result.degenerate_scale) {
            // Every a_i is parallel to U; only the signed scale is unknown.
            Eigen::VectorXd dir = dirs[lead] / lead_norm;
            const double sign = uniform(rng, 0.0, 1.0) < 0.5 ? -1.0 : 1.0;
            const double s = sign * std::exp(uniform(rng, std::log(0.05), std::log(5.0)));
            U = s * dir;
        } else {
            for (std::size_t c = 0; c < d; ++c) U[static_cast<Eigen::Index>(c)] = 0.5 * standard_normal(rng);
        }
        x.head(static_cast<Eigen::Index>(d)) = U;
        std::vector<char> set(n, 0);
        for (std::size_t k = 0; k < obs.prev_items.size(); ++k) {
            auto V = detail::AttackSystem::vec(obs.prev_vectors.row(k));
            const double e = result.degenerate_scale ? 0.0 : dirs[k].dot(U) / U.squaredNorm();
            x[static_cast<Eigen::Index>(d + sys.prev_slot(k))] = e + U.dot(V);
            set[sys.prev_slot(k)] = 1;
        }
        for (std::size_t k = 0; k < obs.curr_items.size(); ++k) {
            if (set[sys.curr_slot(k)]) continue;
            auto V = detail::AttackSystem::vec(obs.curr_vectors.row(k));
            x[static_cast<Eigen::Index>(d + sys.curr_slot(k))] = U.dot(V) + uniform(rng, -1.0, 1.0);
        }

        const double res = detail::levenberg_marquardt(sys, x, opt.max_iters);
        // Strict '<' keeps the lowest restart index on ties.
        if (res < result.residual) {
            result.residual = res;
            result.best_restart = restart;
            best = x;
        }
    }

    result.converged = result.residual < opt.tolerance;
    // (U, r) and (-U, -r) produce identical uploads; ratings live on a positive
    // scale, so keep the mirror image with the positive rating sum.
    if (best.size() > 0 && best.tail(static_cast<Eigen::Index>(n)).sum() < 0.0) best = -best;
    if (best.size() > 0) {
        result.user_vector.assign(best.data(), best.data() + d);
        if (result.converged) {
            for (std::size_t j = 0; j < n; ++j) {
                result.reconstructed_ratings[sys.items()[j]] = best[static_cast<Eigen::Index>(d + j)];
            }
        }
    }
    return result;
}

// ---------------------------------------------------------------------------
// Forward simulation: run a small synthetic federation, capture one client's
// uploads in two consecutive rounds, and attack them.

struct AttackScenario {
    std::size_t num_users = 6;
    std::size_t num_items = 20;
    std::size_t target_rated = 3; // |I_u| for the attacked client (client 0)
    std::size_t other_rated = 6;
    int latent_dim = 2;
    double reg_lambda = 0.01;
    double local_lr = 0.05;
    double global_lr = 1.0;
    Strategy strategy = Strategy::vanilla;
    double ratio_q = 1.0;
    int warmup_rounds = 0; // rounds run before the observed pair
    std::uint64_t seed = 1;
};

struct AttackTrial {
    std::vector<ItemIndex> rated;    // ground truth
    std::vector<ItemIndex> inferred; // support read off the uploads
    double precision = 0.0;
    double recall = 0.0;
    AttackResult result;
    // max |r_hat - r| over truly rated items; +inf unless converged.
    double max_rating_error = std::numeric_limits<double>::infinity();
    // Fraction of inferred items whose reconstructed value equals a true
    // rating of an item the user actually rated (within 1e-3).
    double exact_recovery_rate = 0.0;
    std::map<ItemIndex, double> true_ratings;
};

inline AttackTrial run_attack_trial(const AttackScenario& sc, const AttackOptions& opt = {}) {
    auto rng = make_stream(sc.seed, {stream::kSynthetic});
    std::vector<Rating> train;
    for (std::size_t u = 0; u < sc.num_users; ++u) {
        const std::size_t k = std::min(sc.num_items, u == 0 ? sc.target_rated : sc.other_rated);
        std::vector<ItemIndex> items(sc.num_items);
        for (std::size_t i = 0; i < sc.num_items; ++i) items[i] = static_cast<ItemIndex>(i);
        shuffle(items.begin(), items.end(), rng);
        for (std::size_t i = 0; i < k; ++i) {
            train.push_back({static_cast<UserIndex>(u), items[i], static_cast<double>(1 + uniform_index(rng, 5))});
        }
    }

    FederationConfig cfg;
    cfg.hp.latent_dim = sc.latent_dim;
    cfg.hp.reg_lambda = sc.reg_lambda;
    cfg.hp.local_lr = sc.local_lr;
    cfg.hp.global_lr = sc.global_lr;
    cfg.hp.local_epochs = 1;
    cfg.hp.batch_size = 0;
    cfg.hp.rng_seed = sc.seed;
    cfg.strategy = sc.strategy;
    cfg.aggregation = AggregationMode::uniform;
    cfg.pseudo.ratio_q = sc.strategy == Strategy::vanilla ? 0.0 : sc.ratio_q;
    Federation fed(sc.num_users, sc.num_items, train, {}, cfg);

    struct Capture {
        FactorMatrix broadcast;
        ClientUpdateStats upload;
    };
    std::vector<Capture> seen;
    fed.set_observer([&](const RoundView& view) {
        for (const auto& up : view.uploads) {
            if (up.client_id == 0) seen.push_back({view.broadcast, up});
        }
    });
    for (int t = 0; t < sc.warmup_rounds + 2; ++t) fed.step();
    if (seen.size() < 2) throw ContractViolation("run_attack_trial: target client produced no uploads");
    const auto& a = seen[seen.size() - 2];
    const auto& b = seen.back();

    AttackTrial trial;
    for (const auto& r : fed.clients()[0].ratings) {
        trial.rated.push_back(r.item);
        trial.true_ratings[r.item] = r.rating;
    }
    auto obs = make_observation(a.upload, a.broadcast, b.upload, b.broadcast, sc.reg_lambda, sc.local_lr);
    trial.inferred = infer_interactions(obs);
    std::size_t hits = 0;
    for (auto it : trial.inferred) hits += trial.true_ratings.count(it);
    trial.precision = trial.inferred.empty() ? 0.0 : static_cast<double>(hits) / trial.inferred.size();
    trial.recall = trial.rated.empty() ? 0.0 : static_cast<double>(hits) / trial.rated.size();

    AttackOptions o = opt;
    if (o.seed == 0) o.seed = sc.seed;
    trial.result = reconstruct_ratings(obs, o);
    if (trial.result.converged) {
        double worst = 0.0;
        for (const auto& [item, r] : trial.true_ratings) {
            auto f = trial.result.reconstructed_ratings.find(item);
            worst = std::max(worst, f == trial.result.reconstructed_ratings.end()
                                        ? std::numeric_limits<double>::infinity()
                                        : std::abs(f->second - r));
        }
        trial.max_rating_error = worst;
        std::size_t exact = 0;
        for (const auto& [item, rhat] : trial.result.reconstructed_ratings) {
            auto t = trial.true_ratings.find(item);
            if (t != trial.true_ratings.end() && std::abs(rhat - t->second) < 1e-3) ++exact;
        }
        trial.exact_recovery_rate =
            trial.result.reconstructed_ratings.empty()
                ? 0.0
                : static_cast<double>(exact) / static_cast<double>(trial.result.reconstructed_ratings.size());
    }
    return trial;
}

} // namespace fedrec
