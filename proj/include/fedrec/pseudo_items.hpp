#pragma once

// Pseudo-item defenses. Each client uploads gradients for its rated items mixed
// with gradients for unrated "pseudo" items that carry a virtual rating, so the
// upload support no longer equals the rated set.
//
//   random      hybrid filling: k unrated items sampled uniformly, virtual
//               rating = the user's mean observed rating.
//   similarity  the k unrated items whose encoded latent vector is most
//               cosine-similar to some rated item; the virtual rating comes
//               from the most similar rated item(s).

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <span>
#include <utility>
#include <vector>

#include "fedrec/core_mf.hpp"
#include "fedrec/error.hpp"
#include "fedrec/random.hpp"

namespace fedrec {

enum class PseudoStrategy { none, random, similarity };
enum class EncoderKind { identity, fixed_linear };
enum class VirtualRatingRule { nearest_item, similarity_weighted };
// Virtual rating for randomly sampled pseudo items.
enum class RandomFillRule { user_mean, random_score };

struct PseudoConfig {
    double ratio_q = 1.0;
    PseudoStrategy strategy = PseudoStrategy::similarity;
    EncoderKind encoder = EncoderKind::identity;
    int encoder_out_dim = 0; // 0: same as latent_dim
    VirtualRatingRule rule = VirtualRatingRule::nearest_item;
    int top_s = 3;
    RandomFillRule random_fill = RandomFillRule::user_mean;
    double min_rating = 1.0;
    double max_rating = 5.0;

    void validate() const {
        if (!(ratio_q >= 0.0)) throw ValidationError("ratio_q must be >= 0");
        if (top_s < 1) throw ValidationError("top_s must be >= 1");
        if (encoder_out_dim < 0) throw ValidationError("encoder_out_dim must be >= 0");
    }
};

struct ProfileEntry {
    ItemIndex item;
    double rating;

    bool operator==(const ProfileEntry&) const = default;
};

struct FilledProfile {
    std::vector<ProfileEntry> rated;
    std::vector<ProfileEntry> pseudo; // virtual ratings

    std::size_t size() const noexcept { return rated.size() + pseudo.size(); }
};

// ceil(q * |I_u|)
inline std::size_t pseudo_count(double ratio_q, std::size_t num_rated) {
    return static_cast<std::size_t>(std::ceil(ratio_q * static_cast<double>(num_rated) - 1e-9));
}

// Zero vectors have similarity 0 with everything.
inline double cosine_similarity(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) throw ContractViolation("cosine_similarity: length mismatch");
    double ab = 0.0, aa = 0.0, bb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        ab += a[i] * b[i];
        aa += a[i] * a[i];
        bb += b[i] * b[i];
    }
    if (aa == 0.0 || bb == 0.0) return 0.0;
    return std::clamp(ab / std::sqrt(aa * bb), -1.0, 1.0);
}

// Maps an item latent vector to the feature space used for similarity. The
// projection matrix is fixed at construction and shared read-only.
class ItemEncoder {
public:
    static ItemEncoder identity() { return ItemEncoder{}; }

    static ItemEncoder fixed_linear(std::size_t in_dim, std::size_t out_dim, std::uint64_t seed) {
        ItemEncoder e;
        e.in_dim_ = in_dim;
        e.out_dim_ = out_dim;
        e.matrix_.resize(in_dim * out_dim);
        auto rng = make_stream(seed, {stream::kEncoder});
        const double scale = 1.0 / std::sqrt(static_cast<double>(out_dim));
        for (double& w : e.matrix_) w = scale * standard_normal(rng);
        return e;
    }

    // out_dim x in_dim, row-major.
    static ItemEncoder from_matrix(std::size_t in_dim, std::size_t out_dim, std::vector<double> matrix) {
        if (matrix.size() != in_dim * out_dim) throw ContractViolation("ItemEncoder: matrix shape mismatch");
        ItemEncoder e;
        e.in_dim_ = in_dim;
        e.out_dim_ = out_dim;
        e.matrix_ = std::move(matrix);
        return e;
    }

    bool is_identity() const noexcept { return matrix_.empty(); }

    std::vector<double> encode(std::span<const double> v) const {
        if (is_identity()) return {v.begin(), v.end()};
        if (v.size() != in_dim_) throw ContractViolation("ItemEncoder: input dimension mismatch");
        std::vector<double> out(out_dim_, 0.0);
        for (std::size_t r = 0; r < out_dim_; ++r) {
            out[r] = dot(std::span<const double>(matrix_.data() + r * in_dim_, in_dim_), v);
        }
        return out;
    }

private:
    std::size_t in_dim_ = 0;
    std::size_t out_dim_ = 0;
    std::vector<double> matrix_;
};

inline ItemEncoder make_encoder(const PseudoConfig& cfg, std::size_t latent_dim, std::uint64_t seed) {
    if (cfg.encoder == EncoderKind::identity) return ItemEncoder::identity();
    std::size_t out = cfg.encoder_out_dim > 0 ? static_cast<std::size_t>(cfg.encoder_out_dim) : latent_dim;
    return ItemEncoder::fixed_linear(latent_dim, out, seed);
}

// Item-item cosine similarity over encoded item vectors, computed once per
// round from the broadcast model and then shared by all clients.
class SimilarityIndex {
public:
    SimilarityIndex() = default;

    SimilarityIndex(const FactorMatrix& items, const ItemEncoder& encoder) : n_(items.rows()) {
        std::vector<std::vector<double>> unit(n_);
        for (std::size_t i = 0; i < n_; ++i) {
            unit[i] = encoder.encode(items.row(i));
            double norm = std::sqrt(squared_norm(unit[i]));
            if (norm > 0.0) {
                for (double& x : unit[i]) x /= norm;
            } else {
                std::fill(unit[i].begin(), unit[i].end(), 0.0);
            }
        }
        sim_.assign(n_ * n_, 0.0);
        for (std::size_t i = 0; i < n_; ++i) {
            sim_[i * n_ + i] = squared_norm(unit[i]) > 0.0 ? 1.0 : 0.0;
            for (std::size_t j = i + 1; j < n_; ++j) {
                double s = std::clamp(dot(unit[i], unit[j]), -1.0, 1.0);
                sim_[i * n_ + j] = s;
                sim_[j * n_ + i] = s;
            }
        }
    }

    std::size_t num_items() const noexcept { return n_; }
    double operator()(std::size_t a, std::size_t b) const { return sim_[a * n_ + b]; }
    std::span<const double> row(std::size_t a) const { return {sim_.data() + a * n_, n_}; }

private:
    std::size_t n_ = 0;
    std::vector<double> sim_;
};

namespace detail {

inline std::vector<char> rated_mask(std::span<const ProfileEntry> rated, std::size_t num_items) {
    std::vector<char> mask(num_items, 0);
    for (const auto& e : rated) {
        if (e.item < 0 || static_cast<std::size_t>(e.item) >= num_items) {
            throw ContractViolation("profile references an unknown item");
        }
        mask[static_cast<std::size_t>(e.item)] = 1;
    }
    return mask;
}

inline double mean_rating(std::span<const ProfileEntry> rated) {
    double s = 0.0;
    for (const auto& e : rated) s += e.rating;
    return s / static_cast<double>(rated.size());
}

} // namespace detail

// score(j) = max over rated i of sim(i, j); picks the k best unrated items
// (ties broken by lower item index).
inline FilledProfile select_pseudo_similarity(std::span<const ProfileEntry> rated, const SimilarityIndex& sim,
                                              const PseudoConfig& cfg) {
    FilledProfile out;
    out.rated.assign(rated.begin(), rated.end());
    if (rated.empty()) return out;

    const std::size_t n = sim.num_items();
    auto mask = detail::rated_mask(rated, n);
    std::size_t unrated = n - static_cast<std::size_t>(std::count(mask.begin(), mask.end(), 1));
    std::size_t k = std::min(pseudo_count(cfg.ratio_q, rated.size()), unrated);
    if (k == 0) return out;

    // best[j] = (max similarity, position in `rated` of the argmax)
    std::vector<double> best(n, -2.0);
    std::vector<std::size_t> arg(n, 0);
    for (std::size_t r = 0; r < rated.size(); ++r) {
        auto row = sim.row(static_cast<std::size_t>(rated[r].item));
        for (std::size_t j = 0; j < n; ++j) {
            if (row[j] > best[j]) {
                best[j] = row[j];
                arg[j] = r;
            }
        }
    }

    std::vector<ItemIndex> candidates;
    candidates.reserve(unrated);
    for (std::size_t j = 0; j < n; ++j) {
        if (!mask[j]) candidates.push_back(static_cast<ItemIndex>(j));
    }
    auto better = [&](ItemIndex a, ItemIndex b) {
        if (best[a] != best[b]) return best[a] > best[b];
        return a < b;
    };
    std::partial_sort(candidates.begin(), candidates.begin() + static_cast<std::ptrdiff_t>(k), candidates.end(),
                      better);
    candidates.resize(k);

    out.pseudo.reserve(k);
    std::vector<std::pair<double, std::size_t>> ranked(rated.size());
    for (ItemIndex j : candidates) {
        double virtual_rating = rated[arg[j]].rating;
        if (cfg.rule == VirtualRatingRule::similarity_weighted) {
            for (std::size_t r = 0; r < rated.size(); ++r) {
                ranked[r] = {sim(static_cast<std::size_t>(rated[r].item), static_cast<std::size_t>(j)), r};
            }
            std::size_t s = std::min(static_cast<std::size_t>(cfg.top_s), rated.size());
            std::partial_sort(ranked.begin(), ranked.begin() + static_cast<std::ptrdiff_t>(s), ranked.end(),
                              [](const auto& a, const auto& b) {
                                  return a.first != b.first ? a.first > b.first : a.second < b.second;
                              });
            double wsum = 0.0, acc = 0.0, plain = 0.0;
            for (std::size_t t = 0; t < s; ++t) {
                double w = std::max(ranked[t].first, 0.0);
                wsum += w;
                acc += w * rated[ranked[t].second].rating;
                plain += rated[ranked[t].second].rating;
            }
            virtual_rating = wsum > 0.0 ? acc / wsum : plain / static_cast<double>(s);
        }
        out.pseudo.push_back({j, std::clamp(virtual_rating, cfg.min_rating, cfg.max_rating)});
    }
    return out;
}

// Convenience overload that builds the similarity table on the fly.
inline FilledProfile select_pseudo_similarity(std::span<const ProfileEntry> rated, const FactorMatrix& items,
                                              const PseudoConfig& cfg, const ItemEncoder& encoder) {
    return select_pseudo_similarity(rated, SimilarityIndex(items, encoder), cfg);
}

inline FilledProfile select_pseudo_random(std::span<const ProfileEntry> rated, std::size_t num_items,
                                          const PseudoConfig& cfg, Rng& rng) {
    FilledProfile out;
    out.rated.assign(rated.begin(), rated.end());
    if (rated.empty()) return out;

    auto mask = detail::rated_mask(rated, num_items);
    std::vector<ItemIndex> unrated;
    unrated.reserve(num_items);
    for (std::size_t j = 0; j < num_items; ++j) {
        if (!mask[j]) unrated.push_back(static_cast<ItemIndex>(j));
    }
    std::size_t k = std::min(pseudo_count(cfg.ratio_q, rated.size()), unrated.size());
    if (k == 0) return out;

    // Partial Fisher-Yates: the first k slots are a uniform k-subset.
    for (std::size_t i = 0; i < k; ++i) {
        auto j = i + static_cast<std::size_t>(uniform_index(rng, unrated.size() - i));
        std::swap(unrated[i], unrated[j]);
    }
    std::sort(unrated.begin(), unrated.begin() + static_cast<std::ptrdiff_t>(k));
    const double mean = std::clamp(detail::mean_rating(rated), cfg.min_rating, cfg.max_rating);
    // random_score draws an integer level on the rating scale.
    const auto levels = static_cast<std::uint64_t>(std::floor(cfg.max_rating - cfg.min_rating)) + 1;
    out.pseudo.reserve(k);
    for (std::size_t i = 0; i < k; ++i) {
        const double r = cfg.random_fill == RandomFillRule::user_mean
                             ? mean
                             : cfg.min_rating + static_cast<double>(uniform_index(rng, levels));
        out.pseudo.push_back({unrated[i], r});
    }
    return out;
}

// Per-item gradient over the filled profile: true rating for rated items,
// virtual rating for pseudo items. Keyed by item index in ascending order, with
// no marker telling the two kinds apart.
inline std::vector<std::pair<ItemIndex, std::vector<double>>> filled_gradient(const FilledProfile& profile,
                                                                             std::span<const double> user_vector,
                                                                             const FactorMatrix& items,
                                                                             double lambda) {
    std::vector<std::pair<ItemIndex, std::vector<double>>> out;
    out.reserve(profile.size());
    auto add = [&](const ProfileEntry& e) {
        out.emplace_back(e.item, item_gradient(user_vector, items.row(static_cast<std::size_t>(e.item)), e.rating,
                                               lambda));
    };
    for (const auto& e : profile.rated) add(e);
    for (const auto& e : profile.pseudo) add(e);
    std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
    return out;
}

} // namespace fedrec
