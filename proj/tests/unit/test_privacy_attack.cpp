#include <cmath>
#include <set>
#include <vector>

#include <gtest/gtest.h>

#include "fedrec/privacy_attack.hpp"

using namespace fedrec;

namespace {

struct TwoRounds {
    AttackObservation obs;
    std::vector<ProfileEntry> ratings;
};

// One client observed in two consecutive rounds. Between the rounds the server
// model moves by a random perturbation standing in for the other clients.
TwoRounds simulate(std::vector<ProfileEntry> ratings, std::size_t num_items, std::size_t d, std::uint64_t seed,
                   PseudoStrategy strategy = PseudoStrategy::none, double q = 0.0) {
    auto rng = make_stream(seed, {stream::kSynthetic, 1});
    auto init = LatentFactors::random(1, num_items, d, seed);
    ClientState c{0, {}, ratings};
    for (std::size_t k = 0; k < d; ++k) c.user_vector.push_back(uniform(rng, -0.5, 0.5));
    Hyperparams hp;
    hp.latent_dim = static_cast<int>(d);
    hp.reg_lambda = 0.01;
    hp.local_lr = 0.05;
    hp.rng_seed = seed;
    PseudoConfig pc;
    pc.ratio_q = q;
    FactorMatrix v1 = init.items;
    SimilarityIndex s1(v1, ItemEncoder::identity());
    auto up1 = client_round(c, {v1, hp, pc, strategy, &s1, 0, false});
    FactorMatrix v2 = v1;
    for (double& x : v2.data()) x += uniform(rng, -0.05, 0.05);
    SimilarityIndex s2(v2, ItemEncoder::identity());
    auto up2 = client_round(c, {v2, hp, pc, strategy, &s2, 1, false});
    return {make_observation(up1, v1, up2, v2, hp.reg_lambda, hp.local_lr), ratings};
}

std::vector<ProfileEntry> random_profile(std::size_t k, std::size_t num_items, Rng& rng) {
    std::vector<ItemIndex> all(num_items);
    for (std::size_t i = 0; i < num_items; ++i) all[i] = static_cast<ItemIndex>(i);
    shuffle(all.begin(), all.end(), rng);
    std::vector<ProfileEntry> out;
    for (std::size_t i = 0; i < k; ++i) out.push_back({all[i], 1.0 + static_cast<double>(uniform_index(rng, 5))});
    std::sort(out.begin(), out.end(), [](auto& a, auto& b) { return a.item < b.item; });
    return out;
}

} // namespace

TEST(InferInteractions, VanillaSupportIsRatedSet) {
    auto t = simulate({{3, 4.0}, {7, 2.0}}, 10, 2, 1);
    EXPECT_EQ(infer_interactions(t.obs), (std::vector<ItemIndex>{3, 7}));
}

TEST(InferInteractions, PseudoItemsDiluteSupport) {
    auto t = simulate({{3, 4.0}, {7, 2.0}}, 10, 2, 1, PseudoStrategy::similarity, 1.0);
    auto inferred = infer_interactions(t.obs);
    EXPECT_GE(inferred.size(), 4u);
    std::set<ItemIndex> s(inferred.begin(), inferred.end());
    EXPECT_TRUE(s.count(3) && s.count(7));
    EXPECT_LE(2.0 / static_cast<double>(inferred.size()), 0.5);
}

TEST(InferInteractions, EmptyUpload) {
    AttackObservation obs;
    obs.dim = 2;
    EXPECT_TRUE(infer_interactions(obs).empty());
}

TEST(Reconstruct, RecoversThreeRatingsInTwoDimensions) {
    auto t = simulate({{1, 5.0}, {4, 2.0}, {8, 3.0}}, 10, 2, 3);
    auto res = reconstruct_ratings(t.obs);
    ASSERT_TRUE(res.converged) << "residual " << res.residual;
    EXPECT_FALSE(res.degenerate_scale);
    for (const auto& e : t.ratings) EXPECT_NEAR(res.reconstructed_ratings.at(e.item), e.rating, 1e-3);
    EXPECT_LT(res.residual, 1e-3);
}

TEST(Reconstruct, SoundOnVanillaAcrossSeeds) {
    int ok = 0;
    const int n = 60;
    for (int seed = 0; seed < n; ++seed) {
        auto rng = make_stream(static_cast<std::uint64_t>(seed), {42});
        const std::size_t d = 1 + uniform_index(rng, 4);
        const std::size_t k = 2 + uniform_index(rng, 9);
        auto t = simulate(random_profile(k, 20, rng), 20, d, static_cast<std::uint64_t>(seed) + 100);
        if (infer_interactions(t.obs).size() != k) continue;
        auto res = reconstruct_ratings(t.obs);
        if (!res.converged) continue;
        double worst = 0.0;
        for (const auto& e : t.ratings) worst = std::max(worst, std::abs(res.reconstructed_ratings.at(e.item) - e.rating));
        ok += worst < 1e-3;
    }
    EXPECT_GE(ok, static_cast<int>(0.95 * n));
}

TEST(Reconstruct, PseudoItemsBreakExactRecovery) {
    double rate = 0.0;
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        AttackScenario sc;
        sc.strategy = Strategy::fedrecplus;
        sc.ratio_q = 1.0;
        sc.seed = seed + 1;
        rate += run_attack_trial(sc).exact_recovery_rate;
    }
    EXPECT_LT(rate / 20.0, 1.0);
}

TEST(Reconstruct, ZeroErrorFixedPointIsDegenerate) {
    // g = lambda*V exactly in both rounds: every rating equals its prediction.
    const double lambda = 0.01, lr = 0.05;
    std::vector<double> u{0.4, -0.3};
    AttackObservation obs;
    obs.dim = 2;
    obs.lambda = lambda;
    obs.local_lr = lr;
    obs.prev_items = obs.curr_items = {0, 1, 2};
    obs.prev_vectors = obs.curr_vectors = obs.prev_grads = obs.curr_grads = FactorMatrix(3, 2);
    const double shrink = 1.0 - lr * lambda;
    auto rng = make_stream(5, {0});
    for (std::size_t k = 0; k < 3; ++k) {
        for (std::size_t c = 0; c < 2; ++c) {
            const double v = uniform(rng, -1, 1);
            obs.prev_vectors.row(k)[c] = v;
            obs.prev_grads.row(k)[c] = lambda * v;
            obs.curr_vectors.row(k)[c] = v / shrink;
            obs.curr_grads.row(k)[c] = lambda * v / shrink;
        }
    }
    auto res = reconstruct_ratings(obs);
    EXPECT_TRUE(res.degenerate_scale);
    ASSERT_TRUE(res.converged);
    for (std::size_t k = 0; k < 3; ++k) {
        EXPECT_NEAR(res.reconstructed_ratings.at(static_cast<ItemIndex>(k)), predict(res.user_vector, obs.prev_vectors.row(k)), 1e-6);
    }
}

TEST(Reconstruct, SingleItemIsAmbiguous) {
    auto t = simulate({{2, 4.0}}, 5, 2, 7);
    EXPECT_THROW(reconstruct_ratings(t.obs), AmbiguousObservation);
}

TEST(Reconstruct, DeterministicUnderSeed) {
    auto t = simulate({{0, 1.0}, {3, 5.0}, {4, 4.0}, {6, 2.0}}, 8, 3, 12);
    AttackOptions o;
    o.seed = 99;
    auto a = reconstruct_ratings(t.obs, o);
    auto b = reconstruct_ratings(t.obs, o);
    EXPECT_EQ(a.residual, b.residual);
    EXPECT_EQ(a.reconstructed_ratings, b.reconstructed_ratings);
    EXPECT_EQ(a.best_restart, b.best_restart);
}

TEST(Reconstruct, ParallelismCertificate) {
    auto rng = make_stream(3, {0});
    auto t = simulate(random_profile(6, 15, rng), 15, 3, 4);
    std::vector<std::vector<double>> a;
    for (std::size_t k = 0; k < t.obs.prev_items.size(); ++k) {
        std::vector<double> x(3);
        for (int c = 0; c < 3; ++c) x[c] = t.obs.lambda * t.obs.prev_vectors.row(k)[c] - t.obs.prev_grads.row(k)[c];
        a.push_back(x);
    }
    for (std::size_t i = 0; i < a.size(); ++i)
        for (std::size_t j = i + 1; j < a.size(); ++j) EXPECT_GE(std::abs(cosine_similarity(a[i], a[j])), 1 - 1e-9);
}

TEST(AttackSystem, JacobianMatchesFiniteDifferences) {
    auto t = simulate({{0, 1.0}, {2, 5.0}, {5, 3.0}}, 8, 3, 5, PseudoStrategy::random, 1.0);
    detail::AttackSystem sys(t.obs);
    auto rng = make_stream(8, {0});
    Eigen::VectorXd x(static_cast<Eigen::Index>(sys.num_unknowns()));
    for (Eigen::Index i = 0; i < x.size(); ++i) x[i] = uniform(rng, -2, 2);
    Eigen::VectorXd r;
    Eigen::MatrixXd J;
    sys.evaluate(x, r, &J);
    const double h = 1e-6;
    for (Eigen::Index p = 0; p < x.size(); ++p) {
        Eigen::VectorXd xp = x, xm = x, rp, rm;
        xp[p] += h;
        xm[p] -= h;
        sys.evaluate(xp, rp, nullptr);
        sys.evaluate(xm, rm, nullptr);
        Eigen::VectorXd fd = (rp - rm) / (2 * h);
        EXPECT_LE((fd - J.col(p)).norm(), 1e-6 * std::max(1.0, fd.norm()));
    }
}

TEST(AttackTrial, DefensePrecisionBound) {
    for (std::uint64_t seed = 1; seed <= 20; ++seed) {
        AttackScenario sc;
        sc.strategy = Strategy::fedrecplus;
        sc.ratio_q = 1.0;
        sc.target_rated = 4;
        sc.seed = seed;
        auto t = run_attack_trial(sc);
        EXPECT_DOUBLE_EQ(t.recall, 1.0);
        EXPECT_LE(t.precision, 4.0 / 8.0 + 0.05);
    }
}

TEST(AttackTrial, VanillaExact) {
    AttackScenario sc;
    sc.seed = 3;
    auto t = run_attack_trial(sc);
    EXPECT_DOUBLE_EQ(t.precision, 1.0);
    EXPECT_DOUBLE_EQ(t.recall, 1.0);
    EXPECT_LT(t.max_rating_error, 1e-3);
}
