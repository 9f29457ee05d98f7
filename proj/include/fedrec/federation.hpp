#pragma once

// Round-based federated matrix factorization. Clients keep their user vector
// and ratings; each round they download the item matrix, train locally on
// rated (and optionally pseudo) items for K epochs, and upload only the item
// deltas. The server folds the deltas in with per-client aggregation weights.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "fedrec/aggregation.hpp"
#include "fedrec/core_mf.hpp"
#include "fedrec/datasets.hpp"
#include "fedrec/error.hpp"
#include "fedrec/pseudo_items.hpp"
#include "fedrec/random.hpp"

namespace fedrec {

enum class Strategy { vanilla, fedrec, fedrecplus };

inline PseudoStrategy pseudo_strategy_for(Strategy s) {
    switch (s) {
    case Strategy::vanilla: return PseudoStrategy::none;
    case Strategy::fedrec: return PseudoStrategy::random;
    case Strategy::fedrecplus: return PseudoStrategy::similarity;
    }
    return PseudoStrategy::none;
}

inline AggregationMode default_aggregation(Strategy s) {
    return s == Strategy::fedrecplus ? AggregationMode::wasserstein_simplified : AggregationMode::uniform;
}

struct FederationConfig {
    Hyperparams hp;
    Strategy strategy = Strategy::fedrecplus;
    PseudoConfig pseudo;
    AggregationMode aggregation = AggregationMode::wasserstein_simplified;
    double weight_epsilon = kDefaultWeightEpsilon;
    int eval_interval = 10;
    // Worker threads for the client phase; <= 1 runs inline.
    int threads = 1;
    // Clients also report per-coordinate gradient variances (needed by
    // wasserstein_full; always on in that mode).
    bool report_sigma = false;

    void validate() const {
        hp.validate();
        pseudo.validate();
        if (eval_interval < 1) throw ValidationError("eval_interval must be >= 1");
        if (!(weight_epsilon > 0.0)) throw ValidationError("weight_epsilon must be > 0");
    }
};

// Local party. `user_vector` and `ratings` never leave the client: the only
// thing client_round returns is a ClientUpdateStats.
struct ClientState {
    ClientId id = 0;
    std::vector<double> user_vector;
    std::vector<ProfileEntry> ratings;
};

struct ClientRoundInput {
    const FactorMatrix& items;
    const Hyperparams& hp;
    const PseudoConfig& pseudo;
    PseudoStrategy strategy = PseudoStrategy::none;
    const SimilarityIndex* similarity = nullptr; // required for PseudoStrategy::similarity
    int round = 0;
    bool report_sigma = false;
};

inline FilledProfile fill_profile(const ClientState& client, const ClientRoundInput& in) {
    switch (in.strategy) {
    case PseudoStrategy::none: return FilledProfile{client.ratings, {}};
    case PseudoStrategy::random: {
        auto rng = make_stream(in.hp.rng_seed,
                               {stream::kPseudo, static_cast<std::uint64_t>(client.id),
                                static_cast<std::uint64_t>(in.round)});
        return select_pseudo_random(client.ratings, in.items.rows(), in.pseudo, rng);
    }
    case PseudoStrategy::similarity:
        if (in.similarity == nullptr) throw ContractViolation("similarity strategy needs a SimilarityIndex");
        return select_pseudo_similarity(client.ratings, *in.similarity, in.pseudo);
    }
    return {};
}

// K local epochs over the filled profile in mini-batches of B (0 = whole
// profile). Per batch: the user vector takes one step on the batch-mean user
// gradient, then every item in the batch takes one step using the updated user
// vector. Returns delta = V_local - V_broadcast for every touched item.
inline ClientUpdateStats client_round(ClientState& client, const ClientRoundInput& in) {
    ClientUpdateStats out;
    out.client_id = client.id;
    out.dim = in.items.dim();
    if (client.ratings.empty()) return out;

    const FilledProfile filled = fill_profile(client, in);
    std::vector<ProfileEntry> profile;
    profile.reserve(filled.size());
    profile.insert(profile.end(), filled.rated.begin(), filled.rated.end());
    profile.insert(profile.end(), filled.pseudo.begin(), filled.pseudo.end());
    // Ascending item order: position in the upload carries no rated/pseudo signal.
    std::sort(profile.begin(), profile.end(), [](const auto& a, const auto& b) { return a.item < b.item; });

    const std::size_t n = profile.size();
    const std::size_t d = in.items.dim();
    const double lambda = in.hp.reg_lambda;
    const double lr = in.hp.local_lr;

    FactorMatrix local(n, d);
    for (std::size_t k = 0; k < n; ++k) {
        auto src = in.items.row(static_cast<std::size_t>(profile[k].item));
        std::copy(src.begin(), src.end(), local.row(k).begin());
    }
    const FactorMatrix start = local;

    const bool track_sigma = in.report_sigma;
    std::vector<double> g_sum, g_sq;
    if (track_sigma) {
        g_sum.assign(n * d, 0.0);
        g_sq.assign(n * d, 0.0);
    }

    const std::size_t batch = (in.hp.batch_size <= 0 || static_cast<std::size_t>(in.hp.batch_size) >= n)
                                  ? n
                                  : static_cast<std::size_t>(in.hp.batch_size);
    Rng batch_rng = make_stream(in.hp.rng_seed, {stream::kBatch, static_cast<std::uint64_t>(client.id),
                                                 static_cast<std::uint64_t>(in.round)});
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});

    auto& u = client.user_vector;
    std::vector<double> gu(d), g(d);
    for (int epoch = 0; epoch < in.hp.local_epochs; ++epoch) {
        if (batch < n) shuffle(order.begin(), order.end(), batch_rng);
        for (std::size_t b0 = 0; b0 < n; b0 += batch) {
            const std::size_t b1 = std::min(n, b0 + batch);
            std::fill(gu.begin(), gu.end(), 0.0);
            for (std::size_t t = b0; t < b1; ++t) {
                const auto k = order[t];
                auto v = local.row(k);
                const double e = profile[k].rating - dot(u, v);
                for (std::size_t c = 0; c < d; ++c) gu[c] += lambda * u[c] - e * v[c];
            }
            const double scale = lr / static_cast<double>(b1 - b0);
            for (std::size_t c = 0; c < d; ++c) u[c] -= scale * gu[c];

            for (std::size_t t = b0; t < b1; ++t) {
                const auto k = order[t];
                auto v = local.row(k);
                item_gradient_into(u, v, profile[k].rating, lambda, g);
                axpy(-lr, g, v);
                if (track_sigma) {
                    for (std::size_t c = 0; c < d; ++c) {
                        g_sum[k * d + c] += g[c];
                        g_sq[k * d + c] += g[c] * g[c];
                    }
                }
            }
        }
    }

    out.items.reserve(n);
    out.delta.resize(n * d);
    for (std::size_t k = 0; k < n; ++k) {
        out.items.push_back(profile[k].item);
        auto a = local.row(k);
        auto s = start.row(k);
        for (std::size_t c = 0; c < d; ++c) out.delta[k * d + c] = a[c] - s[c];
    }
    if (track_sigma) {
        const double inv_k = 1.0 / static_cast<double>(in.hp.local_epochs);
        out.sigma_diag.resize(n * d);
        for (std::size_t i = 0; i < n * d; ++i) {
            const double mean = g_sum[i] * inv_k;
            out.sigma_diag[i] = std::max(0.0, g_sq[i] * inv_k - mean * mean);
        }
    }
    return out;
}

struct ServerState {
    FactorMatrix items;
    int round = 0;
};

struct RoundRecord {
    int round = 0;
    AggregationWeights weights;
    double chi_square = 0.0;
    double train_loss = 0.0;
};

// V <- V + eta * sum_u p_u * delta_u, reduced in ascending client-id order.
inline RoundRecord server_round(ServerState& server, std::vector<ClientUpdateStats> updates,
                                const FederationConfig& cfg) {
    if (updates.empty()) throw ContractViolation("server_round: no client updates");
    std::sort(updates.begin(), updates.end(),
              [](const auto& a, const auto& b) { return a.client_id < b.client_id; });
    const std::size_t d = server.items.dim();
    const std::size_t num_items = server.items.rows();
    for (const auto& u : updates) {
        if (u.dim != d || u.delta.size() != u.items.size() * d) {
            throw ContractViolation("server_round: malformed client update");
        }
        if (!all_finite(u.delta) || !all_finite(u.sigma_diag)) {
            throw RoundAborted("round " + std::to_string(server.round) + ": non-finite update from client " +
                               std::to_string(u.client_id));
        }
        for (auto it : u.items) {
            if (it < 0 || static_cast<std::size_t>(it) >= num_items) {
                throw ContractViolation("server_round: update references unknown item");
            }
        }
    }

    const WeightScales scales{cfg.hp.global_lr, cfg.hp.local_lr, cfg.hp.local_epochs,
                              cfg.hp.batch_size > 0 ? static_cast<double>(cfg.hp.batch_size) : 1.0};
    RoundRecord rec;
    rec.round = server.round;
    switch (cfg.aggregation) {
    case AggregationMode::uniform: rec.weights = uniform_weights(updates); break;
    case AggregationMode::wasserstein_simplified: {
        auto ref = estimate_global_reference(updates, num_items, d, scales);
        rec.weights = optimal_weights_simplified(updates, ref, scales, cfg.weight_epsilon);
        break;
    }
    case AggregationMode::wasserstein_full: {
        auto ref = estimate_global_reference(updates, num_items, d, scales);
        rec.weights = optimal_weights_full(updates, ref, scales, cfg.weight_epsilon);
        break;
    }
    }
    rec.chi_square = chi_square_divergence(rec.weights);

    std::vector<double> acc(num_items * d, 0.0);
    for (std::size_t c = 0; c < updates.size(); ++c) {
        const double p = rec.weights.p[c];
        const auto& u = updates[c];
        for (std::size_t k = 0; k < u.items.size(); ++k) {
            const std::size_t off = static_cast<std::size_t>(u.items[k]) * d;
            for (std::size_t j = 0; j < d; ++j) acc[off + j] += p * u.delta[k * d + j];
        }
    }
    auto v = server.items.data();
    for (std::size_t i = 0; i < v.size(); ++i) v[i] += cfg.hp.global_lr * acc[i];
    if (!all_finite(server.items.data())) {
        throw RoundAborted("round " + std::to_string(server.round) + ": item vectors diverged");
    }
    ++server.round;
    return rec;
}

// What the server sees in one round: the model it broadcast and the uploads it
// received. This is the attacker's entire view.
struct RoundView {
    int round = 0;
    const FactorMatrix& broadcast;
    std::span<const ClientUpdateStats> uploads;
};

using RoundObserver = std::function<void(const RoundView&)>;

class Federation {
public:
    Federation(std::size_t num_users, std::size_t num_items, std::vector<Rating> train, std::vector<Rating> test,
               FederationConfig cfg)
        : cfg_(std::move(cfg)), train_(std::move(train)), test_(std::move(test)) {
        cfg_.validate();
        if (cfg_.aggregation == AggregationMode::wasserstein_full) cfg_.report_sigma = true;
        const auto d = static_cast<std::size_t>(cfg_.hp.latent_dim);
        auto init = LatentFactors::random(num_users, num_items, d, cfg_.hp.rng_seed);
        server_.items = std::move(init.items);
        clients_.resize(num_users);
        for (std::size_t u = 0; u < num_users; ++u) {
            clients_[u].id = static_cast<ClientId>(u);
            auto row = init.users.row(u);
            clients_[u].user_vector.assign(row.begin(), row.end());
        }
        for (const auto& r : train_) {
            if (r.user < 0 || static_cast<std::size_t>(r.user) >= num_users || r.item < 0 ||
                static_cast<std::size_t>(r.item) >= num_items) {
                throw ContractViolation("Federation: training rating out of range");
            }
            clients_[static_cast<std::size_t>(r.user)].ratings.push_back({r.item, r.value});
        }
        for (auto& c : clients_) {
            std::sort(c.ratings.begin(), c.ratings.end(),
                      [](const auto& a, const auto& b) { return a.item < b.item; });
        }
        if (cfg_.strategy == Strategy::fedrecplus) {
            encoder_ = make_encoder(cfg_.pseudo, d, cfg_.hp.rng_seed);
        }
    }

    const FederationConfig& config() const noexcept { return cfg_; }
    const ServerState& server() const noexcept { return server_; }
    ServerState& server() noexcept { return server_; }
    const std::vector<ClientState>& clients() const noexcept { return clients_; }
    std::vector<ClientState>& clients() noexcept { return clients_; }
    const std::vector<RoundRecord>& history() const noexcept { return history_; }

    void set_observer(RoundObserver obs) { observer_ = std::move(obs); }

    LatentFactors factors() const {
        LatentFactors f{FactorMatrix(clients_.size(), server_.items.dim()), server_.items};
        for (std::size_t u = 0; u < clients_.size(); ++u) {
            std::copy(clients_[u].user_vector.begin(), clients_[u].user_vector.end(), f.users.row(u).begin());
        }
        return f;
    }

    double training_loss() const { return regularized_loss(factors(), train_, cfg_.hp.reg_lambda); }

    MetricsReport evaluate(int fold = 0) const {
        auto m = fedrec::evaluate(factors(), test_, cfg_.pseudo.min_rating, cfg_.pseudo.max_rating);
        m.fold = fold;
        m.round = server_.round;
        return m;
    }

    const RoundRecord& step() {
        auto strategy = pseudo_strategy_for(cfg_.strategy);
        // q = 0 means k = 0 for everyone.
        if (cfg_.pseudo.ratio_q == 0.0) strategy = PseudoStrategy::none;
        SimilarityIndex sim;
        if (strategy == PseudoStrategy::similarity) sim = SimilarityIndex(server_.items, encoder_);
        const ClientRoundInput in{server_.items,
                                  cfg_.hp,
                                  cfg_.pseudo,
                                  strategy,
                                  strategy == PseudoStrategy::similarity ? &sim : nullptr,
                                  server_.round,
                                  cfg_.report_sigma};

        std::vector<ClientUpdateStats> slots(clients_.size());
        run_clients([&](std::size_t u) { slots[u] = client_round(clients_[u], in); });

        std::vector<ClientUpdateStats> uploads;
        uploads.reserve(slots.size());
        for (auto& s : slots) {
            if (!s.items.empty()) uploads.push_back(std::move(s));
        }
        if (observer_) observer_(RoundView{server_.round, server_.items, uploads});

        auto rec = server_round(server_, std::move(uploads), cfg_);
        rec.train_loss = training_loss();
        history_.push_back(std::move(rec));
        return history_.back();
    }

    // Runs hp.rounds rounds; evaluates at round 0, every eval_interval rounds,
    // and after the last round.
    std::vector<MetricsReport> train(int fold = 0) {
        std::vector<MetricsReport> out;
        out.push_back(evaluate(fold));
        for (int t = 0; t < cfg_.hp.rounds; ++t) {
            step();
            if (server_.round % cfg_.eval_interval == 0 || t + 1 == cfg_.hp.rounds) out.push_back(evaluate(fold));
        }
        return out;
    }

private:
    template <typename F>
    void run_clients(F&& work) {
        const std::size_t n = clients_.size();
        const std::size_t threads =
            std::min<std::size_t>(n, cfg_.threads > 1 ? static_cast<std::size_t>(cfg_.threads) : 1);
        if (threads <= 1) {
            for (std::size_t u = 0; u < n; ++u) work(u);
            return;
        }
        std::vector<std::thread> pool;
        std::vector<std::exception_ptr> errors(threads);
        for (std::size_t t = 0; t < threads; ++t) {
            pool.emplace_back([&, t] {
                try {
                    for (std::size_t u = t; u < n; u += threads) work(u);
                } catch (...) {
                    errors[t] = std::current_exception();
                }
            });
        }
        for (auto& th : pool) th.join();
        for (auto& e : errors) {
            if (e) std::rethrow_exception(e);
        }
    }

    FederationConfig cfg_;
    std::vector<Rating> train_;
    std::vector<Rating> test_;
    ServerState server_;
    std::vector<ClientState> clients_;
    std::vector<RoundRecord> history_;
    ItemEncoder encoder_;
    RoundObserver observer_;
};

} // namespace fedrec
