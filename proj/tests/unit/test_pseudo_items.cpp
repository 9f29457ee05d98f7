#include <algorithm>
#include <cmath>
#include <set>
#include <vector>

#include <gtest/gtest.h>

#include "fedrec/pseudo_items.hpp"

using namespace fedrec;

namespace {

FactorMatrix random_items(std::size_t n, std::size_t d, std::uint64_t seed) {
    FactorMatrix m(n, d);
    auto rng = make_stream(seed, {1234});
    for (double& x : m.data()) x = uniform(rng, -1, 1);
    return m;
}

std::set<ItemIndex> items_of(const std::vector<ProfileEntry>& es) {
    std::set<ItemIndex> s;
    for (const auto& e : es) s.insert(e.item);
    return s;
}

PseudoConfig with_q(double q) {
    PseudoConfig c;
    c.ratio_q = q;
    return c;
}

} // namespace

TEST(Cosine, HandValues) {
    std::vector<double> v{0.3, -1.2, 2.0};
    EXPECT_NEAR(cosine_similarity(v, v), 1.0, 1e-15);
    EXPECT_DOUBLE_EQ(cosine_similarity(std::vector<double>{1, 0}, std::vector<double>{0, 1}), 0.0);
    EXPECT_NEAR(cosine_similarity(std::vector<double>{1, 2}, std::vector<double>{2, 1}), 0.8, 1e-15);
    EXPECT_DOUBLE_EQ(cosine_similarity(std::vector<double>{0, 0}, std::vector<double>{2, 1}), 0.0);
}

TEST(Encoder, IdentityAndFixedLinear) {
    std::vector<double> v{1, 2, 3};
    EXPECT_EQ(ItemEncoder::identity().encode(v), v);
    auto eye = ItemEncoder::from_matrix(3, 3, {1, 0, 0, 0, 1, 0, 0, 0, 1});
    EXPECT_EQ(eye.encode(v), v);
    auto a = ItemEncoder::fixed_linear(3, 2, 5);
    auto b = ItemEncoder::fixed_linear(3, 2, 5);
    EXPECT_EQ(a.encode(v), b.encode(v));
    EXPECT_EQ(a.encode(v).size(), 2u);
}

TEST(PseudoCount, CeilOfRatio) {
    EXPECT_EQ(pseudo_count(0.0, 7), 0u);
    EXPECT_EQ(pseudo_count(0.5, 3), 2u);
    EXPECT_EQ(pseudo_count(1.0, 3), 3u);
    EXPECT_EQ(pseudo_count(0.1, 30), 3u); // 0.1 * 30 is 3.0000000000000004 in binary
}

TEST(SelectSimilarity, KZeroLeavesProfile) {
    auto items = random_items(6, 3, 1);
    std::vector<ProfileEntry> rated{{0, 4.0}, {2, 1.0}};
    auto p = select_pseudo_similarity(rated, items, with_q(0.0), ItemEncoder::identity());
    EXPECT_TRUE(p.pseudo.empty());
    EXPECT_EQ(p.rated, rated);
}

TEST(SelectSimilarity, ForcedMaxSimilarity) {
    FactorMatrix items(3, 2);
    items.row(0)[0] = 1.0; // rated, 5 stars
    items.row(1)[0] = 1.0; // A: same vector
    items.row(2)[1] = 1.0; // B: orthogonal
    std::vector<ProfileEntry> rated{{0, 5.0}};
    auto p = select_pseudo_similarity(rated, items, with_q(1.0), ItemEncoder::identity());
    ASSERT_EQ(p.pseudo.size(), 1u);
    EXPECT_EQ(p.pseudo[0].item, 1);
    EXPECT_DOUBLE_EQ(p.pseudo[0].rating, 5.0);
}

TEST(SelectSimilarity, MatchesBruteForceTopK) {
    for (std::uint64_t seed = 0; seed < 50; ++seed) {
        auto items = random_items(15, 4, seed);
        std::vector<ProfileEntry> rated;
        for (int i = 0; i < 5; ++i) rated.push_back({i, 1.0 + i});
        PseudoConfig cfg = with_q(0.6); // k = 3
        auto p = select_pseudo_similarity(rated, items, cfg, ItemEncoder::identity());
        ASSERT_EQ(p.pseudo.size(), 3u);

        // Exhaustive oracle over every 3-subset of the 10 unrated items.
        auto score = [&](int j) {
            double s = -2.0;
            for (const auto& r : rated) s = std::max(s, cosine_similarity(items.row(r.item), items.row(j)));
            return s;
        };
        double best_total = -1e9;
        for (int a = 5; a < 15; ++a)
            for (int b = a + 1; b < 15; ++b)
                for (int c = b + 1; c < 15; ++c) best_total = std::max(best_total, score(a) + score(b) + score(c));
        double got = 0.0;
        for (const auto& e : p.pseudo) {
            EXPECT_GE(e.item, 5);
            got += score(e.item);
            // nearest_item: the rating of the argmax rated item.
            int arg = 0;
            for (int i = 1; i < 5; ++i) {
                if (cosine_similarity(items.row(i), items.row(e.item)) >
                    cosine_similarity(items.row(arg), items.row(e.item)))
                    arg = i;
            }
            EXPECT_DOUBLE_EQ(e.rating, 1.0 + arg);
        }
        EXPECT_NEAR(got, best_total, 1e-12);
    }
}

TEST(SelectSimilarity, SimilarityWeightedRule) {
    FactorMatrix items(4, 2);
    items.row(0)[0] = 1.0;                       // rated 5
    items.row(1)[1] = 1.0;                       // rated 1
    items.row(2)[0] = 1.0, items.row(2)[1] = 1.0; // unrated, 45 degrees from both
    items.row(3)[0] = -1.0;                      // unrated, opposite of item 0
    std::vector<ProfileEntry> rated{{0, 5.0}, {1, 1.0}};
    PseudoConfig cfg = with_q(0.5);
    cfg.rule = VirtualRatingRule::similarity_weighted;
    cfg.top_s = 2;
    auto p = select_pseudo_similarity(rated, items, cfg, ItemEncoder::identity());
    ASSERT_EQ(p.pseudo.size(), 1u);
    EXPECT_EQ(p.pseudo[0].item, 2);
    EXPECT_NEAR(p.pseudo[0].rating, 3.0, 1e-12);
}

TEST(SelectSimilarity, TakesAllWhenKExceedsUnrated) {
    auto items = random_items(5, 3, 3);
    std::vector<ProfileEntry> rated{{0, 3.0}, {1, 2.0}, {2, 5.0}};
    auto p = select_pseudo_similarity(rated, items, with_q(3.0), ItemEncoder::identity());
    EXPECT_EQ(items_of(p.pseudo), (std::set<ItemIndex>{3, 4}));
}

TEST(SelectSimilarity, VirtualRatingsInRangeAndDisjoint) {
    auto items = random_items(40, 5, 8);
    std::vector<ProfileEntry> rated{{3, 1.0}, {9, 5.0}, {17, 2.0}, {30, 4.0}};
    for (auto rule : {VirtualRatingRule::nearest_item, VirtualRatingRule::similarity_weighted}) {
        PseudoConfig cfg = with_q(2.0);
        cfg.rule = rule;
        auto p = select_pseudo_similarity(rated, items, cfg, ItemEncoder::identity());
        EXPECT_EQ(p.pseudo.size(), 8u);
        auto r = items_of(p.rated);
        for (const auto& e : p.pseudo) {
            EXPECT_FALSE(r.count(e.item));
            EXPECT_GE(e.rating, 1.0);
            EXPECT_LE(e.rating, 5.0);
        }
    }
}

TEST(SelectRandom, MeanRuleAndDeterminism) {
    std::vector<ProfileEntry> rated{{0, 2.0}, {5, 4.0}};
    auto rng1 = make_stream(3, {stream::kPseudo});
    auto rng2 = make_stream(3, {stream::kPseudo});
    auto a = select_pseudo_random(rated, 20, with_q(2.0), rng1);
    auto b = select_pseudo_random(rated, 20, with_q(2.0), rng2);
    ASSERT_EQ(a.pseudo.size(), 4u);
    EXPECT_EQ(a.pseudo, b.pseudo);
    for (const auto& e : a.pseudo) {
        EXPECT_DOUBLE_EQ(e.rating, 3.0);
        EXPECT_NE(e.item, 0);
        EXPECT_NE(e.item, 5);
    }
}

TEST(SelectRandom, AllUnratedWhenKCoversThem) {
    std::vector<ProfileEntry> rated{{1, 5.0}, {2, 5.0}};
    auto rng = make_stream(1, {stream::kPseudo});
    auto p = select_pseudo_random(rated, 4, with_q(1.0), rng);
    EXPECT_EQ(items_of(p.pseudo), (std::set<ItemIndex>{0, 3}));
}

TEST(SelectRandom, UniformOverUnrated) {
    // Each of 8 unrated items should be drawn with probability 2/8.
    std::vector<ProfileEntry> rated{{0, 3.0}, {1, 3.0}};
    std::vector<int> hits(10, 0);
    auto rng = make_stream(77, {stream::kPseudo});
    const int n = 20000;
    for (int t = 0; t < n; ++t) {
        for (const auto& e : select_pseudo_random(rated, 10, with_q(1.0), rng).pseudo) ++hits[e.item];
    }
    EXPECT_EQ(hits[0] + hits[1], 0);
    for (int j = 2; j < 10; ++j) EXPECT_NEAR(hits[j] / double(n), 0.25, 0.015);
}

TEST(SelectRandom, RandomScoreRuleDrawsIntegerLevels) {
    std::vector<ProfileEntry> rated{{0, 3.0}};
    PseudoConfig cfg = with_q(50.0);
    cfg.random_fill = RandomFillRule::random_score;
    auto rng = make_stream(2, {stream::kPseudo});
    auto p = select_pseudo_random(rated, 60, cfg, rng);
    std::set<double> levels;
    for (const auto& e : p.pseudo) levels.insert(e.rating);
    EXPECT_EQ(levels, (std::set<double>{1, 2, 3, 4, 5}));
}

TEST(FilledGradient, ReducesToVanillaAndMatchesBranches) {
    auto items = random_items(10, 3, 4);
    std::vector<double> u{0.2, -0.4, 0.9};
    FilledProfile vanilla{{{1, 4.0}, {6, 2.0}}, {}};
    auto gv = filled_gradient(vanilla, u, items, 0.05);
    ASSERT_EQ(gv.size(), 2u);
    EXPECT_EQ(gv[0].second, item_gradient(u, items.row(1), 4.0, 0.05));

    FilledProfile mixed{{{6, 2.0}, {1, 4.0}}, {{3, 5.0}, {0, 1.5}}};
    auto gm = filled_gradient(mixed, u, items, 0.05);
    ASSERT_EQ(gm.size(), 4u);
    std::vector<ItemIndex> order;
    for (const auto& [it, g] : gm) order.push_back(it);
    EXPECT_EQ(order, (std::vector<ItemIndex>{0, 1, 3, 6}));
    // Re-evaluate each entry directly from 1/2 e^2 + lambda |V|^2.
    const std::vector<double> ratings{1.5, 4.0, 5.0, 2.0};
    for (std::size_t k = 0; k < 4; ++k) {
        auto v = items.row(static_cast<std::size_t>(order[k]));
        double e = ratings[k] - (u[0] * v[0] + u[1] * v[1] + u[2] * v[2]);
        for (int c = 0; c < 3; ++c) EXPECT_NEAR(gm[k].second[c], 0.05 * v[c] - e * u[c], 1e-15);
    }
}

TEST(FilledGradient, PseudoAtPredictionIsZero) {
    auto items = random_items(3, 2, 9);
    std::vector<double> u{0.5, 0.5};
    const double pred = predict(u, items.row(2));
    FilledProfile p{{{0, 3.0}}, {{2, pred}}};
    auto g = filled_gradient(p, u, items, 0.0);
    EXPECT_NEAR(g[1].second[0], 0.0, 1e-15);
    EXPECT_NEAR(g[1].second[1], 0.0, 1e-15);
}

TEST(NoiseOrdering, SimilarityBeatsRandomFilling) {
    // Planted low-rank users: true ratings of unrated items are known, so the
    // virtual-rating noise |r_true - r'| of both strategies can be measured.
    const std::size_t n = 200, d = 4;
    double sim_err = 0.0, rnd_err = 0.0;
    int count_sim = 0, count_rnd = 0;
    for (std::uint64_t seed = 0; seed < 30; ++seed) {
        auto rng = make_stream(seed, {stream::kSynthetic});
        FactorMatrix items(n, d);
        for (double& x : items.data()) x = standard_normal(rng);
        std::vector<double> u(d);
        for (double& x : u) x = standard_normal(rng) * 0.8;
        auto truth = [&](std::size_t j) { return std::clamp(std::round(3.0 + predict(u, items.row(j))), 1.0, 5.0); };
        std::vector<ProfileEntry> rated;
        for (std::size_t j = 0; j < 20; ++j) rated.push_back({static_cast<ItemIndex>(j * 10), truth(j * 10)});
        auto sim = select_pseudo_similarity(rated, items, with_q(1.0), ItemEncoder::identity());
        auto r2 = make_stream(seed, {stream::kPseudo});
        auto rnd = select_pseudo_random(rated, n, with_q(1.0), r2);
        for (const auto& e : sim.pseudo) sim_err += std::abs(truth(e.item) - e.rating), ++count_sim;
        for (const auto& e : rnd.pseudo) rnd_err += std::abs(truth(e.item) - e.rating), ++count_rnd;
    }
    EXPECT_LE(sim_err / count_sim, rnd_err / count_rnd);
}
