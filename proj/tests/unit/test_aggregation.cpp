#include <cmath>
#include <numeric>
#include <vector>

#include <gtest/gtest.h>

#include "fedrec/aggregation.hpp"
#include "fedrec/random.hpp"
#include "oracles.hpp"

using namespace fedrec;

namespace {

ClientUpdateStats random_client(ClientId id, std::size_t num_items, std::size_t dim, Rng& rng, bool sigma) {
    ClientUpdateStats s;
    s.client_id = id;
    s.dim = dim;
    for (std::size_t i = 0; i < num_items; ++i) {
        if (uniform(rng, 0, 1) < 0.6) s.items.push_back(static_cast<ItemIndex>(i));
    }
    if (s.items.empty()) s.items.push_back(0);
    for (std::size_t k = 0; k < s.items.size() * dim; ++k) {
        s.delta.push_back(uniform(rng, -1, 1) * uniform(rng, 0.1, 2.0));
        if (sigma) s.sigma_diag.push_back(uniform(rng, 0, 2));
    }
    return s;
}

std::vector<double> one_d(double x) { return {x}; }

} // namespace

TEST(GaussianW2, HandValues) {
    auto z = one_d(0), three = one_d(3), one = one_d(1), four = one_d(4);
    EXPECT_DOUBLE_EQ(gaussian_wasserstein_sq(one, one, four, four), 0.0);
    EXPECT_DOUBLE_EQ(gaussian_wasserstein_sq(z, three, one, one), 9.0);
    EXPECT_DOUBLE_EQ(gaussian_wasserstein_sq(z, z, four, one), 1.0);
}

TEST(GaussianW2, SymmetricAndRejectsNegativeVariance) {
    std::vector<double> a{1, 2}, b{-1, 0.5}, sa{0.3, 2}, sb{1, 0};
    EXPECT_DOUBLE_EQ(gaussian_wasserstein_sq(a, b, sa, sb), gaussian_wasserstein_sq(b, a, sb, sa));
    EXPECT_GT(gaussian_wasserstein_sq(a, b, sa, sb), 0.0);
    std::vector<double> neg{-0.1, 1};
    EXPECT_THROW(gaussian_wasserstein_sq(a, b, neg, sb), ValidationError);
}

TEST(InverseDistance, HandValues) {
    std::vector<double> eq{2, 2};
    auto p = inverse_distance_weights(eq, kDefaultWeightEpsilon);
    EXPECT_DOUBLE_EQ(p[0], 0.5);
    auto q = inverse_distance_weights(std::vector<double>{1, 3}, kDefaultWeightEpsilon);
    EXPECT_NEAR(q[0], 0.75, 1e-15);
    EXPECT_NEAR(q[1], 0.25, 1e-15);
    auto zero = inverse_distance_weights(std::vector<double>{0, 0, 0}, kDefaultWeightEpsilon);
    for (double x : zero) EXPECT_NEAR(x, 1.0 / 3.0, 1e-15);
}

TEST(InverseDistance, ScaleCoherence) {
    std::vector<double> c{0.2, 1.5, 3.0, 7.0};
    auto p = inverse_distance_weights(c, 0.0 + 1e-300);
    for (double k : {0.01, 3.0, 1e4}) {
        std::vector<double> ck = c;
        for (double& x : ck) x *= k;
        auto pk = inverse_distance_weights(ck, 1e-300);
        for (std::size_t i = 0; i < c.size(); ++i) EXPECT_NEAR(pk[i], p[i], 1e-14);
    }
}

TEST(Simplified, SingleClientAndNearMass) {
    Rng rng = make_stream(3, {0});
    std::vector<ClientUpdateStats> one{random_client(0, 5, 2, rng, false)};
    WeightScales sc{1.0, 0.1, 1, 1.0};
    auto ref = estimate_global_reference(one, 5, 2, sc);
    EXPECT_DOUBLE_EQ(optimal_weights_simplified(one, ref, sc).p[0], 1.0);

    // Three clients: two symmetric around the mean, one exactly at it.
    ClientUpdateStats a{0, 1, {0}, {1.0}, {}}, b{1, 1, {0}, {-1.0}, {}}, c{2, 1, {0}, {0.0}, {}};
    std::vector<ClientUpdateStats> three{a, b, c};
    auto r3 = estimate_global_reference(three, 1, 1, sc);
    auto w = optimal_weights_simplified(three, r3, sc);
    EXPECT_GT(w.p[2], 1.0 - 1e-7);
    EXPECT_LT(w.p[2], 1.0);
    EXPECT_GT(w.p[0], 0.0);
}

TEST(Simplified, InverseProportionality) {
    Rng rng = make_stream(4, {0});
    std::vector<ClientUpdateStats> s;
    for (int u = 0; u < 5; ++u) s.push_back(random_client(u, 6, 3, rng, false));
    WeightScales sc{2.0, 0.05, 1, 1.0};
    auto ref = estimate_global_reference(s, 6, 3, sc);
    auto c = oracle::distance_terms(s, 6, sc, false);
    auto w = optimal_weights_simplified(s, ref, sc, 0.0 + 1e-300);
    for (int a = 0; a < 5; ++a)
        for (int b = 0; b < 5; ++b) EXPECT_NEAR(w.p[a] / w.p[b], c[b] / c[a], 1e-9 * c[b] / c[a]);
}

TEST(Full, EqualsSimplifiedWithoutVariance) {
    Rng rng = make_stream(5, {0});
    std::vector<ClientUpdateStats> s;
    for (int u = 0; u < 4; ++u) {
        auto c = random_client(u, 5, 2, rng, false);
        c.sigma_diag.assign(c.delta.size(), 0.0);
        s.push_back(c);
    }
    WeightScales sc{1.0, 0.1, 2, 4.0};
    auto ref = estimate_global_reference(s, 5, 2, sc);
    auto f = optimal_weights_full(s, ref, sc, 0.0);
    auto g = optimal_weights_simplified(s, ref, sc, 0.0);
    for (int u = 0; u < 4; ++u) EXPECT_NEAR(f.p[u], g.p[u], 1e-15);
}

TEST(Full, DistanceTermsMatchDenseRecomputation) {
    Rng rng = make_stream(6, {0});
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<ClientUpdateStats> s;
        const int m = 2 + static_cast<int>(uniform_index(rng, 6));
        for (int u = 0; u < m; ++u) s.push_back(random_client(u, 7, 2, rng, true));
        WeightScales sc{uniform(rng, 0.5, 3), uniform(rng, 0.01, 0.2), 1 + static_cast<int>(uniform_index(rng, 3)),
                        static_cast<double>(1 + uniform_index(rng, 8))};
        auto ref = estimate_global_reference(s, 7, 2, sc);
        auto got = distance_terms(s, ref, sc, true);
        auto want = oracle::distance_terms(s, 7, sc, true);
        for (int u = 0; u < m; ++u) EXPECT_NEAR(got[u], want[u], 1e-12 * std::max(1.0, want[u]));
    }
}

TEST(Full, MatchesProjectedGradientOracleAndBeatsRandomPoints) {
    Rng rng = make_stream(7, {0});
    for (int trial = 0; trial < 30; ++trial) {
        const int m = 2 + static_cast<int>(uniform_index(rng, 7));
        std::vector<ClientUpdateStats> s;
        for (int u = 0; u < m; ++u) s.push_back(random_client(u, 6, 2, rng, true));
        WeightScales sc{1.0, 0.1, 1, 2.0};
        auto ref = estimate_global_reference(s, 6, 2, sc);
        auto w = optimal_weights_full(s, ref, sc);
        auto c = oracle::distance_terms(s, 6, sc, true);
        auto qp = oracle::simplex_qp(c);
        double sum = 0.0;
        for (int u = 0; u < m; ++u) {
            EXPECT_NEAR(w.p[u], qp[u], 1e-6);
            EXPECT_GT(w.p[u], 0.0);
            sum += w.p[u];
        }
        EXPECT_NEAR(sum, 1.0, 1e-12);
        const double best = aggregation_objective(c, w.p);
        for (int k = 0; k < 500; ++k) {
            std::vector<double> e(m);
            double t = 0.0;
            for (double& x : e) t += (x = -std::log(uniform(rng, 1e-300, 1.0)));
            for (double& x : e) x /= t;
            EXPECT_LE(best, oracle::objective(c, e) + 1e-15);
        }
    }
}

TEST(Full, NegativeVarianceRejected) {
    ClientUpdateStats a{0, 1, {0}, {1.0}, {-1.0}}, b{1, 1, {0}, {0.5}, {0.1}};
    std::vector<ClientUpdateStats> s{a, b};
    WeightScales sc;
    auto ref = estimate_global_reference(s, 1, 1, sc);
    EXPECT_THROW(optimal_weights_full(s, ref, sc), ValidationError);
}

TEST(ChiSquare, HandValuesAndMonotoneAlongLine) {
    std::vector<double> u{0.25, 0.25, 0.25, 0.25};
    EXPECT_DOUBLE_EQ(chi_square_divergence(u), 0.0);
    EXPECT_NEAR(chi_square_divergence(std::vector<double>{0.75, 0.25}), 1.0 / 3.0, 1e-15);
    std::vector<double> target{0.7, 0.1, 0.1, 0.1};
    double prev = -1.0;
    for (int k = 0; k <= 20; ++k) {
        const double t = k / 20.0;
        std::vector<double> p(4);
        for (int i = 0; i < 4; ++i) p[i] = (1 - t) * u[i] + t * target[i];
        const double chi = chi_square_divergence(p);
        EXPECT_GT(chi, prev);
        prev = chi;
    }
    EXPECT_THROW(chi_square_divergence(std::vector<double>{1.0, 0.0}), ValidationError);
}

TEST(Flatten, AscendingItemBlocksWithZeros) {
    ClientUpdateStats s{3, 2, {1, 3}, {1, 2, 3, 4}, {}};
    EXPECT_EQ(flatten(s, 4), (std::vector<double>{0, 0, 1, 2, 0, 0, 3, 4}));
}
