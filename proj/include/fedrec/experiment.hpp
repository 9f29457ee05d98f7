#pragma once

// Experiment runner: five-fold comparison of strategies, the pseudo-count
// sweep, and the attack report. Every run is described by a flat key=value
// configuration that is written to manifest.json, so a run can be replayed
// from its manifest alone.

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <cstdlib>
#include <limits>
#include <span>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "fedrec/datasets.hpp"
#include "fedrec/error.hpp"
#include "fedrec/federation.hpp"
#include "fedrec/privacy_attack.hpp"

#ifndef FEDREC_VERSION
#define FEDREC_VERSION "unknown"
#endif

namespace fedrec {

inline constexpr const char* kVersion = FEDREC_VERSION;

class DatasetMissing : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

enum class DatasetKind { ml100k, ml1m };

struct ExperimentPlan {
    DatasetKind dataset = DatasetKind::ml100k;
    std::filesystem::path data_path; // empty: <data_dir>/ml-100k/u.data or ml-1m/ratings.dat
    std::filesystem::path data_dir = "data";
    std::filesystem::path out_dir = "out";
    std::vector<Strategy> strategies{Strategy::fedrec, Strategy::fedrecplus};
    // Empty: the strategy's default.
    std::optional<AggregationMode> aggregation;
    std::vector<double> q_sweep{0.5, 1.0, 2.0, 3.0};
    std::vector<int> folds{0, 1, 2, 3, 4};
    std::uint64_t split_seed = 42;
    FederationConfig fed;
    bool record_rounds = false;
    bool record_weights = false;

    // attack
    int attack_trials = 20;
    AttackScenario attack;

    void validate() const {
        if (strategies.empty()) throw ValidationError("strategies must be nonempty");
        if (q_sweep.empty()) throw ValidationError("q_sweep must be nonempty");
        if (folds.empty()) throw ValidationError("folds must be nonempty");
        for (int f : folds) {
            if (f < 0 || f > 4) throw ValidationError("fold index must be in 0..4");
        }
        for (double q : q_sweep) {
            if (!(q >= 0.0)) throw ValidationError("q_sweep values must be >= 0");
        }
        if (attack_trials < 1) throw ValidationError("attack_trials must be >= 1");
        fed.validate();
    }
};

// Tuned for ML-100K; see README.
inline ExperimentPlan default_plan() {
    ExperimentPlan plan;
    auto& hp = plan.fed.hp;
    hp.latent_dim = 16;
    hp.reg_lambda = 0.01;
    hp.local_lr = 0.05;
    hp.global_lr = 10.0;
    hp.local_epochs = 1;
    hp.batch_size = 0;
    hp.rounds = 100;
    hp.rng_seed = 42;
    plan.fed.eval_interval = 10;
    return plan;
}

// ---------------------------------------------------------------------------
// key=value configuration

namespace detail {

inline std::string trim(std::string_view s) {
    auto b = s.find_first_not_of(" \t\r");
    if (b == std::string_view::npos) return {};
    auto e = s.find_last_not_of(" \t\r");
    return std::string(s.substr(b, e - b + 1));
}

template <typename T>
T parse_value(const std::string& key, const std::string& v) {
    T out{};
    auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || p != v.data() + v.size()) {
        throw ValidationError("config '" + key + "': cannot parse '" + v + "'");
    }
    return out;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw ValidationError("config '" + key + "': expected true/false, got '" + v + "'");
}

template <typename T>
std::vector<T> parse_list(const std::string& key, const std::string& v, const std::function<T(const std::string&)>& one) {
    std::vector<T> out;
    for (const auto& part : detail::split(v, ",")) {
        auto t = trim(part);
        if (t.empty()) throw ValidationError("config '" + key + "': empty list element");
        out.push_back(one(t));
    }
    return out;
}

template <typename T>
std::string join(const std::vector<T>& xs, const std::function<std::string(const T&)>& one) {
    std::string s;
    for (std::size_t i = 0; i < xs.size(); ++i) {
        if (i) s += ',';
        s += one(xs[i]);
    }
    return s;
}

// Shortest text that parses back to the same double.
inline std::string short_double(double x) {
    char buf[32];
    for (int prec = 1; prec <= 17; ++prec) {
        std::snprintf(buf, sizeof buf, "%.*g", prec, x);
        if (std::strtod(buf, nullptr) == x) break;
    }
    return buf;
}

} // namespace detail

inline const char* to_string(Strategy s) {
    switch (s) {
    case Strategy::vanilla: return "vanilla";
    case Strategy::fedrec: return "fedrec";
    case Strategy::fedrecplus: return "fedrecplus";
    }
    return "?";
}

inline Strategy parse_strategy(const std::string& s) {
    if (s == "vanilla") return Strategy::vanilla;
    if (s == "fedrec") return Strategy::fedrec;
    if (s == "fedrecplus") return Strategy::fedrecplus;
    throw ValidationError("unknown strategy '" + s + "' (vanilla, fedrec, fedrecplus)");
}

inline const char* to_string(AggregationMode m) {
    switch (m) {
    case AggregationMode::uniform: return "uniform";
    case AggregationMode::wasserstein_simplified: return "wasserstein_simplified";
    case AggregationMode::wasserstein_full: return "wasserstein_full";
    }
    return "?";
}

inline AggregationMode parse_aggregation(const std::string& s) {
    if (s == "uniform") return AggregationMode::uniform;
    if (s == "wasserstein_simplified") return AggregationMode::wasserstein_simplified;
    if (s == "wasserstein_full") return AggregationMode::wasserstein_full;
    throw ValidationError("unknown aggregation '" + s + "'");
}

struct ConfigKey {
    std::string name;
    std::string help;
    std::function<void(ExperimentPlan&, const std::string&)> set;
    std::function<std::string(const ExperimentPlan&)> get;
};

// The single list of configuration keys; CLI flags and manifests use it.
inline const std::vector<ConfigKey>& config_keys() {
    using namespace detail;
    static const std::vector<ConfigKey> keys = [] {
        std::vector<ConfigKey> k;
        auto add = [&](std::string name, std::string help, auto set, auto get) {
            k.push_back({std::move(name), std::move(help), set, get});
        };
        auto dbl = [](const std::string& key, const std::string& v) { return parse_value<double>(key, v); };
        auto int_ = [](const std::string& key, const std::string& v) { return parse_value<int>(key, v); };

        add("dataset", "ml-100k or ml-1m",
            [](ExperimentPlan& p, const std::string& v) {
                if (v == "ml-100k") p.dataset = DatasetKind::ml100k;
                else if (v == "ml-1m") p.dataset = DatasetKind::ml1m;
                else throw ValidationError("unknown dataset '" + v + "'");
            },
            [](const ExperimentPlan& p) { return std::string(p.dataset == DatasetKind::ml100k ? "ml-100k" : "ml-1m"); });
        add("data", "ratings file (overrides data_dir)",
            [](ExperimentPlan& p, const std::string& v) { p.data_path = v; },
            [](const ExperimentPlan& p) { return p.data_path.string(); });
        add("data_dir", "directory holding ml-100k/u.data or ml-1m/ratings.dat",
            [](ExperimentPlan& p, const std::string& v) { p.data_dir = v; },
            [](const ExperimentPlan& p) { return p.data_dir.string(); });
        add("out", "output directory",
            [](ExperimentPlan& p, const std::string& v) { p.out_dir = v; },
            [](const ExperimentPlan& p) { return p.out_dir.string(); });
        add("strategies", "comma list of vanilla, fedrec, fedrecplus",
            [](ExperimentPlan& p, const std::string& v) {
                p.strategies = parse_list<Strategy>("strategies", v, [](const std::string& s) { return parse_strategy(s); });
            },
            [](const ExperimentPlan& p) {
                return join<Strategy>(p.strategies, [](const Strategy& s) { return std::string(to_string(s)); });
            });
        add("aggregation", "auto, uniform, wasserstein_simplified or wasserstein_full",
            [](ExperimentPlan& p, const std::string& v) {
                if (v == "auto") p.aggregation.reset();
                else p.aggregation = parse_aggregation(v);
            },
            [](const ExperimentPlan& p) { return std::string(p.aggregation ? to_string(*p.aggregation) : "auto"); });
        add("q_sweep", "comma list of pseudo ratios for the ablation",
            [dbl](ExperimentPlan& p, const std::string& v) {
                p.q_sweep = parse_list<double>("q_sweep", v, [dbl](const std::string& s) { return dbl("q_sweep", s); });
            },
            [](const ExperimentPlan& p) { return join<double>(p.q_sweep, [](const double& q) { return short_double(q); }); });
        add("folds", "comma list of fold indices (0..4)",
            [int_](ExperimentPlan& p, const std::string& v) {
                p.folds = parse_list<int>("folds", v, [int_](const std::string& s) { return int_("folds", s); });
            },
            [](const ExperimentPlan& p) { return join<int>(p.folds, [](const int& f) { return std::to_string(f); }); });
        add("split_seed", "seed of the five-fold split",
            [](ExperimentPlan& p, const std::string& v) { p.split_seed = parse_value<std::uint64_t>("split_seed", v); },
            [](const ExperimentPlan& p) { return std::to_string(p.split_seed); });
        add("seed", "training seed",
            [](ExperimentPlan& p, const std::string& v) { p.fed.hp.rng_seed = parse_value<std::uint64_t>("seed", v); },
            [](const ExperimentPlan& p) { return std::to_string(p.fed.hp.rng_seed); });
        add("latent_dim", "latent dimension d",
            [int_](ExperimentPlan& p, const std::string& v) { p.fed.hp.latent_dim = int_("latent_dim", v); },
            [](const ExperimentPlan& p) { return std::to_string(p.fed.hp.latent_dim); });
        add("reg_lambda", "L2 regularization",
            [dbl](ExperimentPlan& p, const std::string& v) { p.fed.hp.reg_lambda = dbl("reg_lambda", v); },
            [](const ExperimentPlan& p) { return short_double(p.fed.hp.reg_lambda); });
        add("local_lr", "client learning rate",
            [dbl](ExperimentPlan& p, const std::string& v) { p.fed.hp.local_lr = dbl("local_lr", v); },
            [](const ExperimentPlan& p) { return short_double(p.fed.hp.local_lr); });
        add("global_lr", "server learning rate",
            [dbl](ExperimentPlan& p, const std::string& v) { p.fed.hp.global_lr = dbl("global_lr", v); },
            [](const ExperimentPlan& p) { return short_double(p.fed.hp.global_lr); });
        add("local_epochs", "local epochs K",
            [int_](ExperimentPlan& p, const std::string& v) { p.fed.hp.local_epochs = int_("local_epochs", v); },
            [](const ExperimentPlan& p) { return std::to_string(p.fed.hp.local_epochs); });
        add("batch_size", "local batch size (0: full profile)",
            [int_](ExperimentPlan& p, const std::string& v) { p.fed.hp.batch_size = int_("batch_size", v); },
            [](const ExperimentPlan& p) { return std::to_string(p.fed.hp.batch_size); });
        add("rounds", "communication rounds T",
            [int_](ExperimentPlan& p, const std::string& v) { p.fed.hp.rounds = int_("rounds", v); },
            [](const ExperimentPlan& p) { return std::to_string(p.fed.hp.rounds); });
        add("eval_interval", "rounds between evaluations",
            [int_](ExperimentPlan& p, const std::string& v) { p.fed.eval_interval = int_("eval_interval", v); },
            [](const ExperimentPlan& p) { return std::to_string(p.fed.eval_interval); });
        add("threads", "client worker threads",
            [int_](ExperimentPlan& p, const std::string& v) { p.fed.threads = int_("threads", v); },
            [](const ExperimentPlan& p) { return std::to_string(p.fed.threads); });
        add("weight_epsilon", "floor added to aggregation distances",
            [dbl](ExperimentPlan& p, const std::string& v) { p.fed.weight_epsilon = dbl("weight_epsilon", v); },
            [](const ExperimentPlan& p) { return short_double(p.fed.weight_epsilon); });
        add("ratio_q", "pseudo items per rated item",
            [dbl](ExperimentPlan& p, const std::string& v) { p.fed.pseudo.ratio_q = dbl("ratio_q", v); },
            [](const ExperimentPlan& p) { return short_double(p.fed.pseudo.ratio_q); });
        add("encoder", "identity or fixed_linear",
            [](ExperimentPlan& p, const std::string& v) {
                if (v == "identity") p.fed.pseudo.encoder = EncoderKind::identity;
                else if (v == "fixed_linear") p.fed.pseudo.encoder = EncoderKind::fixed_linear;
                else throw ValidationError("unknown encoder '" + v + "'");
            },
            [](const ExperimentPlan& p) {
                return std::string(p.fed.pseudo.encoder == EncoderKind::identity ? "identity" : "fixed_linear");
            });
        add("encoder_out_dim", "fixed_linear output dimension (0: latent_dim)",
            [int_](ExperimentPlan& p, const std::string& v) { p.fed.pseudo.encoder_out_dim = int_("encoder_out_dim", v); },
            [](const ExperimentPlan& p) { return std::to_string(p.fed.pseudo.encoder_out_dim); });
        add("virtual_rating_rule", "nearest_item or similarity_weighted",
            [](ExperimentPlan& p, const std::string& v) {
                if (v == "nearest_item") p.fed.pseudo.rule = VirtualRatingRule::nearest_item;
                else if (v == "similarity_weighted") p.fed.pseudo.rule = VirtualRatingRule::similarity_weighted;
                else throw ValidationError("unknown virtual_rating_rule '" + v + "'");
            },
            [](const ExperimentPlan& p) {
                return std::string(p.fed.pseudo.rule == VirtualRatingRule::nearest_item ? "nearest_item"
                                                                                        : "similarity_weighted");
            });
        add("top_s", "rated items averaged by similarity_weighted",
            [int_](ExperimentPlan& p, const std::string& v) { p.fed.pseudo.top_s = int_("top_s", v); },
            [](const ExperimentPlan& p) { return std::to_string(p.fed.pseudo.top_s); });
        add("random_fill", "virtual rating of random pseudo items: user_mean or random_score",
            [](ExperimentPlan& p, const std::string& v) {
                if (v == "user_mean") p.fed.pseudo.random_fill = RandomFillRule::user_mean;
                else if (v == "random_score") p.fed.pseudo.random_fill = RandomFillRule::random_score;
                else throw ValidationError("unknown random_fill '" + v + "'");
            },
            [](const ExperimentPlan& p) {
                return std::string(p.fed.pseudo.random_fill == RandomFillRule::user_mean ? "user_mean" : "random_score");
            });
        add("record_rounds", "write rounds.csv (training loss and chi-square per round)",
            [](ExperimentPlan& p, const std::string& v) { p.record_rounds = parse_bool("record_rounds", v); },
            [](const ExperimentPlan& p) { return std::string(p.record_rounds ? "true" : "false"); });
        add("record_weights", "write weights.csv (per-client aggregation weights)",
            [](ExperimentPlan& p, const std::string& v) { p.record_weights = parse_bool("record_weights", v); },
            [](const ExperimentPlan& p) { return std::string(p.record_weights ? "true" : "false"); });
        add("attack_trials", "synthetic seeds per attack arm",
            [int_](ExperimentPlan& p, const std::string& v) { p.attack_trials = int_("attack_trials", v); },
            [](const ExperimentPlan& p) { return std::to_string(p.attack_trials); });
        add("attack_dim", "latent dimension of the attack simulation",
            [int_](ExperimentPlan& p, const std::string& v) { p.attack.latent_dim = int_("attack_dim", v); },
            [](const ExperimentPlan& p) { return std::to_string(p.attack.latent_dim); });
        add("attack_rated", "ratings held by the attacked client",
            [](ExperimentPlan& p, const std::string& v) {
                p.attack.target_rated = parse_value<std::size_t>("attack_rated", v);
            },
            [](const ExperimentPlan& p) { return std::to_string(p.attack.target_rated); });
        add("attack_items", "items in the attack simulation",
            [](ExperimentPlan& p, const std::string& v) { p.attack.num_items = parse_value<std::size_t>("attack_items", v); },
            [](const ExperimentPlan& p) { return std::to_string(p.attack.num_items); });
        add("attack_users", "clients in the attack simulation",
            [](ExperimentPlan& p, const std::string& v) { p.attack.num_users = parse_value<std::size_t>("attack_users", v); },
            [](const ExperimentPlan& p) { return std::to_string(p.attack.num_users); });
        return k;
    }();
    return keys;
}

inline const ConfigKey& find_key(const std::string& name) {
    for (const auto& k : config_keys()) {
        if (k.name == name) return k;
    }
    throw ValidationError("unknown config key '" + name + "'");
}

inline void apply_setting(ExperimentPlan& plan, const std::string& key, const std::string& value) {
    find_key(key).set(plan, value);
}

// One "key=value" per line; '#' starts a comment.
inline void apply_config(ExperimentPlan& plan, std::istream& in) {
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (auto h = line.find('#'); h != std::string::npos) line.erase(h);
        auto t = detail::trim(line);
        if (t.empty()) continue;
        auto eq = t.find('=');
        if (eq == std::string::npos) throw ParseError(lineno, "expected key=value");
        try {
            apply_setting(plan, detail::trim(t.substr(0, eq)), detail::trim(t.substr(eq + 1)));
        } catch (const ValidationError& e) {
            throw ParseError(lineno, e.what());
        }
    }
}

inline std::map<std::string, std::string> settings_of(const ExperimentPlan& plan) {
    std::map<std::string, std::string> out;
    for (const auto& k : config_keys()) out[k.name] = k.get(plan);
    return out;
}

// ---------------------------------------------------------------------------
// Data

inline std::filesystem::path resolve_data_path(const ExperimentPlan& plan) {
    if (!plan.data_path.empty()) return plan.data_path;
    return plan.data_dir / (plan.dataset == DatasetKind::ml100k ? "ml-100k/u.data" : "ml-1m/ratings.dat");
}

inline RatingsDataset load_dataset(const ExperimentPlan& plan) {
    const auto path = resolve_data_path(plan);
    if (!std::filesystem::exists(path)) {
        throw DatasetMissing("dataset not found at '" + path.string() +
                             "'. Download it from https://grouplens.org/datasets/movielens/ (" +
                             (plan.dataset == DatasetKind::ml100k ? "ml-100k.zip, file u.data" : "ml-1m.zip, file ratings.dat") +
                             ") and pass data=<file> or data_dir=<dir>.");
    }
    return plan.dataset == DatasetKind::ml100k ? parse_ml100k(path) : parse_ml1m(path);
}

// ---------------------------------------------------------------------------
// Runs

struct RoundLog {
    int fold = 0;
    std::string algo;
    int round = 0;
    double train_loss = 0.0;
    double chi_square = 0.0;
};

struct WeightLog {
    int fold = 0;
    std::string algo;
    int round = 0;
    ClientId client = 0;
    double p = 0.0;
};

struct SummaryRow {
    std::string algo;
    double ratio_q = 0.0;
    int folds = 0;
    double mae_mean = 0.0, mae_std = 0.0;
    double rmse_mean = 0.0, rmse_std = 0.0;
    double nmse_mean = 0.0, nmse_std = 0.0;
};

inline constexpr const char* kSummaryHeader = "algo,ratio_q,folds,mae_mean,mae_std,rmse_mean,rmse_std,nmse_mean,nmse_std";

struct ExperimentResult {
    std::vector<MetricsRow> metrics;   // every evaluation point
    std::vector<MetricsReport> finals; // last evaluation per run, aligned with final_algo
    std::vector<std::string> final_algo;
    std::vector<SummaryRow> summary;
    std::vector<RoundLog> rounds;
    std::vector<WeightLog> weights;
};

// Mean and sample standard deviation (0 for a single value).
inline std::pair<double, double> mean_std(std::span<const double> xs) {
    if (xs.empty()) throw ContractViolation("mean_std: no values");
    const double n = static_cast<double>(xs.size());
    const double mean = std::accumulate(xs.begin(), xs.end(), 0.0) / n;
    if (xs.size() == 1) return {mean, 0.0};
    double ss = 0.0;
    for (double x : xs) ss += (x - mean) * (x - mean);
    return {mean, std::sqrt(ss / (n - 1.0))};
}

inline SummaryRow summarize(std::string algo, double q, std::span<const MetricsReport> finals) {
    std::vector<double> mae, rmse, nmse;
    for (const auto& m : finals) {
        mae.push_back(m.mae);
        rmse.push_back(m.rmse);
        nmse.push_back(m.nmse);
    }
    SummaryRow s;
    s.algo = std::move(algo);
    s.ratio_q = q;
    s.folds = static_cast<int>(finals.size());
    std::tie(s.mae_mean, s.mae_std) = mean_std(mae);
    std::tie(s.rmse_mean, s.rmse_std) = mean_std(rmse);
    std::tie(s.nmse_mean, s.nmse_std) = mean_std(nmse);
    return s;
}

// Trains one (fold, strategy) configuration and appends its logs.
inline MetricsReport run_single(const RatingsDataset& ds, const FoldSplit& split, const FederationConfig& cfg,
                                const std::string& algo, const ExperimentPlan& plan, ExperimentResult& out) {
    const auto train = select(ds, split.train);
    const auto test = select(ds, split.test);
    Federation fed(ds.num_users(), ds.num_items(), train, test, cfg);
    auto evals = fed.train(split.fold);
    for (const auto& m : evals) out.metrics.push_back(to_row(m, algo));
    for (const auto& rec : fed.history()) {
        if (plan.record_rounds) out.rounds.push_back({split.fold, algo, rec.round + 1, rec.train_loss, rec.chi_square});
        if (plan.record_weights) {
            for (std::size_t c = 0; c < rec.weights.size(); ++c) {
                out.weights.push_back({split.fold, algo, rec.round + 1, rec.weights.clients[c], rec.weights.p[c]});
            }
        }
    }
    return evals.back();
}

inline FederationConfig config_for(const ExperimentPlan& plan, Strategy s) {
    FederationConfig cfg = plan.fed;
    cfg.strategy = s;
    cfg.aggregation = plan.aggregation ? *plan.aggregation : default_aggregation(s);
    return cfg;
}

using ProgressFn = std::function<void(const std::string&)>;

inline ExperimentResult run_table1(const ExperimentPlan& plan, RatingsDataset& ds, const ProgressFn& progress = {}) {
    plan.validate();
    ExperimentResult out;
    const auto splits = five_fold_split(ds, plan.split_seed);
    for (Strategy s : plan.strategies) {
        const auto cfg = config_for(plan, s);
        std::vector<MetricsReport> finals;
        for (int f : plan.folds) {
            if (progress) progress(std::string(to_string(s)) + " fold " + std::to_string(f));
            finals.push_back(run_single(ds, splits[static_cast<std::size_t>(f)], cfg, to_string(s), plan, out));
            out.final_algo.emplace_back(to_string(s));
        }
        out.finals.insert(out.finals.end(), finals.begin(), finals.end());
        const double q = s == Strategy::vanilla ? 0.0 : cfg.pseudo.ratio_q;
        out.summary.push_back(summarize(to_string(s), q, finals));
    }
    return out;
}

inline std::string ablation_algo(double q) { return "fedrecplus_q" + detail::short_double(q); }

inline ExperimentResult run_pseudo_ablation(const ExperimentPlan& plan, RatingsDataset& ds,
                                            const ProgressFn& progress = {}) {
    plan.validate();
    ExperimentResult out;
    const auto splits = five_fold_split(ds, plan.split_seed);
    for (double q : plan.q_sweep) {
        auto cfg = config_for(plan, Strategy::fedrecplus);
        cfg.pseudo.ratio_q = q;
        const auto algo = ablation_algo(q);
        std::vector<MetricsReport> finals;
        for (int f : plan.folds) {
            if (progress) progress(algo + " fold " + std::to_string(f));
            finals.push_back(run_single(ds, splits[static_cast<std::size_t>(f)], cfg, algo, plan, out));
            out.final_algo.push_back(algo);
        }
        out.finals.insert(out.finals.end(), finals.begin(), finals.end());
        out.summary.push_back(summarize(algo, q, finals));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Attack report

struct AttackArmReport {
    std::string algo;
    double ratio_q = 0.0;
    int trials = 0;
    double precision_mean = 0.0;
    double recall_mean = 0.0;
    double converged_rate = 0.0;
    double exact_recovery_rate = 0.0; // trials with every rated item recovered to < 1e-3
    // Counts of |r_hat - r| over rated items, bucketed by kErrorBins upper edges;
    // the last bucket also holds items left unrecovered.
    std::vector<int> error_histogram;
    std::vector<AttackTrial> per_trial;
};

inline const std::vector<double>& attack_error_bins() {
    static const std::vector<double> bins{1e-6, 1e-3, 1e-1, 0.5, 1.0, std::numeric_limits<double>::infinity()};
    return bins;
}

inline AttackArmReport run_attack_arm(const ExperimentPlan& plan, Strategy s) {
    AttackArmReport rep;
    rep.algo = to_string(s);
    rep.ratio_q = s == Strategy::vanilla ? 0.0 : plan.fed.pseudo.ratio_q;
    rep.error_histogram.assign(attack_error_bins().size(), 0);
    int converged = 0, exact = 0;
    double prec = 0.0, rec = 0.0;
    for (int t = 0; t < plan.attack_trials; ++t) {
        AttackScenario sc = plan.attack;
        sc.strategy = s;
        sc.ratio_q = rep.ratio_q;
        sc.reg_lambda = plan.fed.hp.reg_lambda;
        sc.local_lr = plan.fed.hp.local_lr;
        sc.seed = plan.fed.hp.rng_seed + static_cast<std::uint64_t>(t);
        auto trial = run_attack_trial(sc);
        // Clients without ratings upload nothing and are left out of the report.
        if (trial.rated.empty()) continue;
        prec += trial.precision;
        rec += trial.recall;
        converged += trial.result.converged ? 1 : 0;
        exact += trial.max_rating_error < 1e-3 ? 1 : 0;
        for (const auto& [item, r] : trial.true_ratings) {
            double err = std::numeric_limits<double>::infinity();
            if (auto f = trial.result.reconstructed_ratings.find(item); f != trial.result.reconstructed_ratings.end()) {
                err = std::abs(f->second - r);
            }
            const auto& bins = attack_error_bins();
            auto b = static_cast<std::size_t>(std::lower_bound(bins.begin(), bins.end(), err) - bins.begin());
            ++rep.error_histogram[std::min(b, bins.size() - 1)];
        }
        rep.per_trial.push_back(std::move(trial));
        ++rep.trials;
    }
    if (rep.trials > 0) {
        const double n = rep.trials;
        rep.precision_mean = prec / n;
        rep.recall_mean = rec / n;
        rep.converged_rate = converged / n;
        rep.exact_recovery_rate = exact / n;
    }
    return rep;
}

inline std::vector<AttackArmReport> run_attack_demo(const ExperimentPlan& plan) {
    plan.validate();
    return {run_attack_arm(plan, Strategy::vanilla), run_attack_arm(plan, Strategy::fedrecplus)};
}

inline nlohmann::ordered_json attack_report_json(const std::vector<AttackArmReport>& arms) {
    nlohmann::ordered_json j;
    j["error_bins_upper"] = nlohmann::ordered_json::array();
    for (double b : attack_error_bins()) {
        j["error_bins_upper"].push_back(std::isinf(b) ? nlohmann::ordered_json("inf") : nlohmann::ordered_json(b));
    }
    j["arms"] = nlohmann::ordered_json::array();
    for (const auto& a : arms) {
        nlohmann::ordered_json arm;
        arm["algo"] = a.algo;
        arm["ratio_q"] = a.ratio_q;
        arm["trials"] = a.trials;
        arm["precision_mean"] = a.precision_mean;
        arm["recall_mean"] = a.recall_mean;
        arm["converged_rate"] = a.converged_rate;
        arm["exact_recovery_rate"] = a.exact_recovery_rate;
        arm["error_histogram"] = a.error_histogram;
        arm["per_user"] = nlohmann::ordered_json::array();
        for (const auto& t : a.per_trial) {
            nlohmann::ordered_json u;
            u["seed_offset"] = arm["per_user"].size();
            u["rated"] = t.rated;
            u["inferred"] = t.inferred;
            u["precision"] = t.precision;
            u["recall"] = t.recall;
            u["residual"] = t.result.residual;
            u["converged"] = t.result.converged;
            u["max_rating_error"] = std::isinf(t.max_rating_error) ? nlohmann::ordered_json(nullptr)
                                                                    : nlohmann::ordered_json(t.max_rating_error);
            arm["per_user"].push_back(std::move(u));
        }
        j["arms"].push_back(std::move(arm));
    }
    return j;
}

// ---------------------------------------------------------------------------
// Output files

inline void write_summary_csv(std::ostream& out, std::span<const SummaryRow> rows) {
    out << kSummaryHeader << '\n';
    for (const auto& r : rows) {
        out << r.algo << ',' << format_double(r.ratio_q) << ',' << r.folds << ',' << format_double(r.mae_mean) << ','
            << format_double(r.mae_std) << ',' << format_double(r.rmse_mean) << ',' << format_double(r.rmse_std)
            << ',' << format_double(r.nmse_mean) << ',' << format_double(r.nmse_std) << '\n';
    }
}

inline std::vector<SummaryRow> parse_summary_csv(std::istream& in) {
    std::string line;
    if (!std::getline(in, line) || line != kSummaryHeader) {
        throw ParseError(1, std::string("expected header '") + kSummaryHeader + "'");
    }
    std::vector<SummaryRow> rows;
    std::size_t lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        auto f = detail::split(line, ",");
        if (f.size() != 9) throw ParseError(lineno, "expected 9 fields");
        SummaryRow r;
        r.algo = std::string(f[0]);
        try {
            r.ratio_q = std::stod(std::string(f[1]));
            r.folds = std::stoi(std::string(f[2]));
            r.mae_mean = std::stod(std::string(f[3]));
            r.mae_std = std::stod(std::string(f[4]));
            r.rmse_mean = std::stod(std::string(f[5]));
            r.rmse_std = std::stod(std::string(f[6]));
            r.nmse_mean = std::stod(std::string(f[7]));
            r.nmse_std = std::stod(std::string(f[8]));
        } catch (const std::exception&) {
            throw ParseError(lineno, "malformed number");
        }
        rows.push_back(std::move(r));
    }
    return rows;
}

inline void write_rounds_csv(std::ostream& out, std::span<const RoundLog> rows) {
    out << "fold,algo,round,train_loss,chi_square\n";
    for (const auto& r : rows) {
        out << r.fold << ',' << r.algo << ',' << r.round << ',' << format_double(r.train_loss) << ','
            << format_double(r.chi_square) << '\n';
    }
}

inline void write_weights_csv(std::ostream& out, std::span<const WeightLog> rows) {
    out << "fold,algo,round,client,p\n";
    for (const auto& r : rows) {
        out << r.fold << ',' << r.algo << ',' << r.round << ',' << r.client << ',' << format_double(r.p) << '\n';
    }
}

inline std::ofstream open_output(const std::filesystem::path& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot write '" + path.string() + "'");
    return f;
}

// Writes metrics.csv and summary.csv (plus rounds.csv / weights.csv when
// recorded) into dir; returns the file names written.
inline std::vector<std::string> write_experiment(const std::filesystem::path& dir, const ExperimentResult& r,
                                                 const ExperimentPlan& plan) {
    std::filesystem::create_directories(dir);
    std::vector<std::string> files;
    {
        auto f = open_output(dir / "metrics.csv");
        write_metrics_csv(f, r.metrics);
        files.emplace_back("metrics.csv");
    }
    {
        auto f = open_output(dir / "summary.csv");
        write_summary_csv(f, r.summary);
        files.emplace_back("summary.csv");
    }
    if (plan.record_rounds) {
        auto f = open_output(dir / "rounds.csv");
        write_rounds_csv(f, r.rounds);
        files.emplace_back("rounds.csv");
    }
    if (plan.record_weights) {
        auto f = open_output(dir / "weights.csv");
        write_weights_csv(f, r.weights);
        files.emplace_back("weights.csv");
    }
    return files;
}

// ---------------------------------------------------------------------------
// Manifest

struct Manifest {
    std::string command;
    std::string version = kVersion;
    std::map<std::string, std::string> config;
    std::vector<std::string> outputs;
};

inline nlohmann::ordered_json to_json(const Manifest& m) {
    nlohmann::ordered_json j;
    j["tool"] = "fedrec_cli";
    j["version"] = m.version;
    j["command"] = m.command;
    j["config"] = nlohmann::ordered_json::object();
    for (const auto& [k, v] : m.config) j["config"][k] = v;
    j["outputs"] = m.outputs;
    return j;
}

inline Manifest parse_manifest(std::istream& in) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError(std::string("manifest is not valid JSON: ") + e.what());
    }
    Manifest m;
    try {
        m.command = j.at("command").get<std::string>();
        m.version = j.value("version", std::string("unknown"));
        for (const auto& [k, v] : j.at("config").items()) m.config[k] = v.get<std::string>();
        if (j.contains("outputs")) m.outputs = j.at("outputs").get<std::vector<std::string>>();
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError(std::string("malformed manifest: ") + e.what());
    }
    return m;
}

inline ExperimentPlan plan_from_manifest(const Manifest& m) {
    ExperimentPlan plan = default_plan();
    for (const auto& [k, v] : m.config) apply_setting(plan, k, v);
    return plan;
}

// Runs `command` under `plan` and writes every output plus manifest.json into
// plan.out_dir. Returns the manifest.
inline Manifest execute(const std::string& command, const ExperimentPlan& plan, const ProgressFn& progress = {}) {
    plan.validate();
    Manifest m;
    m.command = command;
    m.config = settings_of(plan);
    std::filesystem::create_directories(plan.out_dir);

    if (command == "table1" || command == "train" || command == "ablation") {
        auto ds = load_dataset(plan);
        ExperimentResult r;
        if (command == "ablation") {
            r = run_pseudo_ablation(plan, ds, progress);
        } else {
            r = run_table1(plan, ds, progress);
        }
        m.outputs = write_experiment(plan.out_dir, r, plan);
    } else if (command == "attack") {
        auto arms = run_attack_demo(plan);
        auto f = open_output(plan.out_dir / "attack.json");
        f << attack_report_json(arms).dump(2) << '\n';
        m.outputs.emplace_back("attack.json");
    } else {
        throw ValidationError("unknown command '" + command + "'");
    }
    auto f = open_output(plan.out_dir / "manifest.json");
    f << to_json(m).dump(2) << '\n';
    return m;
}

} // namespace fedrec
