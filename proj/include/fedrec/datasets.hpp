#pragma once

// MovieLens ingestion, seeded five-fold splitting, and MAE / RMSE / NMSE.

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <istream>
#include <map>
#include <numeric>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "fedrec/core_mf.hpp"
#include "fedrec/error.hpp"
#include "fedrec/random.hpp"

namespace fedrec {

inline constexpr int kNumFolds = 5;

struct RatingsDataset {
    // user / item fields are dense indices; raw ids live in user_ids / item_ids
    // (ascending, so dense order equals raw-id order).
    std::vector<Rating> triples;
    std::vector<std::int64_t> user_ids;
    std::vector<std::int64_t> item_ids;
    double min_rating = 1.0;
    double max_rating = 5.0;
    // Empty until assign_folds() runs.
    std::vector<int> fold_of;

    std::size_t size() const noexcept { return triples.size(); }
    std::size_t num_users() const noexcept { return user_ids.size(); }
    std::size_t num_items() const noexcept { return item_ids.size(); }
};

struct RawTriple {
    std::int64_t user;
    std::int64_t item;
    double rating;
};

// Builds the dense-index dataset, rejecting duplicate (user, item) pairs and
// out-of-range ratings.
inline RatingsDataset build_dataset(const std::vector<RawTriple>& raw, double lo = 1.0, double hi = 5.0) {
    RatingsDataset ds;
    ds.min_rating = lo;
    ds.max_rating = hi;
    std::set<std::int64_t> users, items;
    for (const auto& t : raw) {
        if (!(t.rating >= lo && t.rating <= hi)) {
            throw ValidationError("rating " + std::to_string(t.rating) + " outside [" + std::to_string(lo) + ", " +
                                  std::to_string(hi) + "]");
        }
        users.insert(t.user);
        items.insert(t.item);
    }
    ds.user_ids.assign(users.begin(), users.end());
    ds.item_ids.assign(items.begin(), items.end());
    std::unordered_map<std::int64_t, UserIndex> uidx;
    std::unordered_map<std::int64_t, ItemIndex> iidx;
    for (std::size_t i = 0; i < ds.user_ids.size(); ++i) uidx.emplace(ds.user_ids[i], static_cast<UserIndex>(i));
    for (std::size_t i = 0; i < ds.item_ids.size(); ++i) iidx.emplace(ds.item_ids[i], static_cast<ItemIndex>(i));

    ds.triples.reserve(raw.size());
    std::set<std::pair<UserIndex, ItemIndex>> seen;
    for (const auto& t : raw) {
        Rating r{uidx.at(t.user), iidx.at(t.item), t.rating};
        if (!seen.emplace(r.user, r.item).second) {
            throw ValidationError("duplicate rating for user " + std::to_string(t.user) + ", item " +
                                  std::to_string(t.item));
        }
        ds.triples.push_back(r);
    }
    return ds;
}

namespace detail {

template <typename T>
bool parse_number(std::string_view s, T& out) {
    while (!s.empty() && (s.front() == ' ' || s.front() == '\r')) s.remove_prefix(1);
    while (!s.empty() && (s.back() == ' ' || s.back() == '\r')) s.remove_suffix(1);
    if (s.empty()) return false;
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
    return ec == std::errc() && p == s.data() + s.size();
}

inline std::vector<std::string_view> split(std::string_view line, std::string_view sep) {
    std::vector<std::string_view> out;
    std::size_t pos = 0;
    while (true) {
        auto next = line.find(sep, pos);
        if (next == std::string_view::npos) {
            out.push_back(line.substr(pos));
            return out;
        }
        out.push_back(line.substr(pos, next - pos));
        pos = next + sep.size();
    }
}

inline RatingsDataset parse_separated(std::istream& in, std::string_view sep) {
    std::vector<RawTriple> raw;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty() || line == "\r") continue;
        auto fields = split(line, sep);
        if (fields.size() != 4) {
            throw ParseError(lineno, "expected 4 fields separated by '" + std::string(sep) + "'");
        }
        RawTriple t{};
        std::int64_t ts = 0;
        if (!parse_number(fields[0], t.user) || !parse_number(fields[1], t.item) ||
            !parse_number(fields[2], t.rating) || !parse_number(fields[3], ts)) {
            throw ParseError(lineno, "malformed numeric field");
        }
        raw.push_back(t);
    }
    return build_dataset(raw);
}

inline std::ifstream open_or_throw(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open " + path);
    return in;
}

} // namespace detail

// `user \t item \t rating \t timestamp` (MovieLens 100K u.data).
inline RatingsDataset parse_ml100k(std::istream& in) { return detail::parse_separated(in, "\t"); }
inline RatingsDataset parse_ml100k(const std::string& path) {
    auto in = detail::open_or_throw(path);
    return parse_ml100k(in);
}

// `user::item::rating::timestamp` (MovieLens 1M ratings.dat).
inline RatingsDataset parse_ml1m(std::istream& in) { return detail::parse_separated(in, "::"); }
inline RatingsDataset parse_ml1m(const std::string& path) {
    auto in = detail::open_or_throw(path);
    return parse_ml1m(in);
}

// ---------------------------------------------------------------------------
// Five-fold cross validation.

struct FoldSplit {
    int fold = 0;
    std::vector<std::size_t> train; // indices into RatingsDataset::triples
    std::vector<std::size_t> test;
};

// Seeded uniform shuffle, then contiguous chunks; chunk sizes differ by <= 1.
inline std::vector<int> assign_folds(std::size_t n, std::uint64_t seed, int folds = kNumFolds) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    auto rng = make_stream(seed, {stream::kSplit});
    shuffle(order.begin(), order.end(), rng);
    std::vector<int> fold_of(n);
    for (std::size_t pos = 0; pos < n; ++pos) {
        fold_of[order[pos]] = static_cast<int>(pos * static_cast<std::size_t>(folds) / n);
    }
    return fold_of;
}

inline std::array<FoldSplit, kNumFolds> five_fold_split(RatingsDataset& ds, std::uint64_t seed) {
    if (ds.size() < static_cast<std::size_t>(kNumFolds)) {
        throw ValidationError("five_fold_split needs at least 5 ratings, got " + std::to_string(ds.size()));
    }
    ds.fold_of = assign_folds(ds.size(), seed);
    std::array<FoldSplit, kNumFolds> splits;
    for (int f = 0; f < kNumFolds; ++f) splits[f].fold = f;
    for (std::size_t i = 0; i < ds.size(); ++i) {
        for (int f = 0; f < kNumFolds; ++f) {
            (ds.fold_of[i] == f ? splits[f].test : splits[f].train).push_back(i);
        }
    }
    return splits;
}

inline std::vector<Rating> select(const RatingsDataset& ds, const std::vector<std::size_t>& idx) {
    std::vector<Rating> out;
    out.reserve(idx.size());
    for (auto i : idx) out.push_back(ds.triples[i]);
    return out;
}

// ---------------------------------------------------------------------------
// Metrics.

struct MetricsReport {
    double mae = 0.0;
    double rmse = 0.0;
    double nmse = 0.0;
    int fold = 0;
    int round = 0;
};

inline double clamp_rating(double x, double lo = 1.0, double hi = 5.0) { return std::clamp(x, lo, hi); }

// Predictions are clamped to [lo, hi] before scoring. NMSE = sum e^2 / sum r^2.
inline MetricsReport metrics(std::span<const double> predictions, std::span<const double> truths, double lo = 1.0,
                             double hi = 5.0) {
    if (predictions.size() != truths.size()) throw ContractViolation("metrics: length mismatch");
    if (predictions.empty()) throw ContractViolation("metrics: empty input");
    double abs_sum = 0.0, sq_sum = 0.0, truth_sq = 0.0;
    for (std::size_t i = 0; i < predictions.size(); ++i) {
        double e = truths[i] - clamp_rating(predictions[i], lo, hi);
        abs_sum += std::abs(e);
        sq_sum += e * e;
        truth_sq += truths[i] * truths[i];
    }
    const auto n = static_cast<double>(predictions.size());
    MetricsReport m;
    m.mae = abs_sum / n;
    m.rmse = std::sqrt(sq_sum / n);
    m.nmse = truth_sq > 0.0 ? sq_sum / truth_sq : 0.0;
    return m;
}

inline MetricsReport evaluate(const LatentFactors& f, std::span<const Rating> test, double lo = 1.0,
                              double hi = 5.0) {
    std::vector<double> pred, truth;
    pred.reserve(test.size());
    truth.reserve(test.size());
    for (const auto& r : test) {
        pred.push_back(predict(f.users.row(r.user), f.items.row(r.item)));
        truth.push_back(r.value);
    }
    return metrics(pred, truth, lo, hi);
}

// ---------------------------------------------------------------------------
// CSV report: `fold,round,algo,mae,rmse,nmse`.

struct MetricsRow {
    int fold = 0;
    int round = 0;
    std::string algo;
    double mae = 0.0;
    double rmse = 0.0;
    double nmse = 0.0;

    bool operator==(const MetricsRow&) const = default;
};

inline constexpr const char* kMetricsHeader = "fold,round,algo,mae,rmse,nmse";

inline MetricsRow to_row(const MetricsReport& m, std::string algo) {
    return {m.fold, m.round, std::move(algo), m.mae, m.rmse, m.nmse};
}

// %.17g keeps every double exact through a write/parse round trip.
inline std::string format_double(double x) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", x);
    return buf;
}

inline void write_metrics_csv(std::ostream& out, std::span<const MetricsRow> rows) {
    out << kMetricsHeader << '\n';
    for (const auto& r : rows) {
        out << r.fold << ',' << r.round << ',' << r.algo << ',' << format_double(r.mae) << ','
            << format_double(r.rmse) << ',' << format_double(r.nmse) << '\n';
    }
}

inline std::vector<MetricsRow> parse_metrics_csv(std::istream& in) {
    std::string line;
    std::size_t lineno = 1;
    if (!std::getline(in, line) || line != kMetricsHeader) {
        throw ParseError(1, std::string("expected header '") + kMetricsHeader + "'");
    }
    std::vector<MetricsRow> rows;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        auto f = detail::split(line, ",");
        MetricsRow r;
        if (f.size() != 6 || !detail::parse_number(f[0], r.fold) || !detail::parse_number(f[1], r.round) ||
            !detail::parse_number(f[3], r.mae) || !detail::parse_number(f[4], r.rmse) ||
            !detail::parse_number(f[5], r.nmse) || f[2].empty()) {
            throw ParseError(lineno, "malformed metrics row");
        }
        r.algo = std::string(f[2]);
        rows.push_back(std::move(r));
    }
    return rows;
}

} // namespace fedrec
