#pragma once

// Experiment orchestration: a RunConfig names one algorithm, one instance, a
// K list and a seed list. Every (seed, K) cell explores, plans for each reward
// family of the suite, and reports the family's worst gap on the true model.
//
// mode "exact" re-runs exploration for every K so beta sees its own budget.
// mode "prefix" explores once per seed at the largest K and reads the model
// off at each listed K; beta then uses the largest K, so rows carry the
// "prefix-approx" flag.
//
// Each job draws from Rng(derive_seed(seed, K)) with K the job's exploration
// budget and shares nothing mutable, so results do not depend on --jobs.

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <ctime>
#include <filesystem>
#include <functional>
#include <iomanip>
#include <limits>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <variant>
#include <vector>

#include "rfx/bernstein.hpp"
#include "rfx/core.hpp"
#include "rfx/hoeffding.hpp"
#include "rfx/instances.hpp"
#include "rfx/linear_mdp.hpp"
#include "rfx/model.hpp"
#include "rfx/planner.hpp"
#include "rfx/rewards.hpp"
#include "rfx/serialize.hpp"
#include "rfx/version.hpp"

namespace rfx {

inline constexpr int kConfigVersion = 1;

struct RunConfig {
    std::string algorithm = "hoeffding";  // hoeffding | bernstein | linear-mdp | uniform-baseline
    InstanceSpec instance{5, 2, 4, 3, 1, "needle"};
    std::vector<int> K{64, 128, 256};
    std::vector<std::uint64_t> seeds{0, 1, 2};
    double delta = 0.1;
    double epsilon = 0.1;
    double beta_scale = 1.0;  // hoeffding, bernstein, uniform-baseline
    double c_beta = 1.0;      // linear-mdp
    std::string planner = "exact";  // exact | inexact
    double eps_opt = 0.0;           // used by the inexact planner
    std::string reward_suite = "tie-sweep";
    std::uint64_t reward_seed = 0;  // for the "random" suite
    std::string mode = "exact";     // exact | prefix
    std::string timing = "sidecar"; // sidecar: seconds column is 0; inline: measured seconds
    std::string csv = "results.csv";
    std::string manifest = "manifest.json";
};

inline bool is_mixture_algorithm(const std::string& a) {
    return a == "hoeffding" || a == "bernstein" || a == "uniform-baseline";
}

inline void validate(const RunConfig& c) {
    if (!is_mixture_algorithm(c.algorithm) && c.algorithm != "linear-mdp")
        throw UsageError("config: unknown algorithm '" + c.algorithm + "'");
    if (c.algorithm == "linear-mdp" && c.instance.family != "anchor")
        throw UsageError("config: linear-mdp needs the 'anchor' instance family");
    if (c.algorithm != "linear-mdp" && c.instance.family == "anchor")
        throw UsageError("config: the 'anchor' family is only for linear-mdp");
    if (c.K.empty()) throw UsageError("config: K list is empty");
    for (int k : c.K)
        if (k < 0) throw UsageError("config: K must be nonnegative");
    if (!std::is_sorted(c.K.begin(), c.K.end()) || std::adjacent_find(c.K.begin(), c.K.end()) != c.K.end())
        throw UsageError("config: K list must be strictly ascending");
    if (c.seeds.empty()) throw UsageError("config: seed list is empty");
    if (std::set<std::uint64_t>(c.seeds.begin(), c.seeds.end()).size() != c.seeds.size())
        throw UsageError("config: seeds must be distinct");
    if (!(c.delta > 0.0 && c.delta < 1.0)) throw UsageError("config: delta must be in (0,1)");
    if (!(c.epsilon > 0.0)) throw UsageError("config: epsilon must be positive");
    if (!(c.beta_scale > 0.0) || !(c.c_beta > 0.0)) throw UsageError("config: scales must be positive");
    if (c.planner != "exact" && c.planner != "inexact") throw UsageError("config: planner must be exact or inexact");
    if (!(c.eps_opt >= 0.0)) throw UsageError("config: eps_opt must be nonnegative");
    if (c.planner == "inexact" && c.algorithm == "linear-mdp")
        throw UsageError("config: linear-mdp plans by LSVI; the inexact planner does not apply");
    if (c.mode != "exact" && c.mode != "prefix") throw UsageError("config: mode must be exact or prefix");
    if (c.timing != "sidecar" && c.timing != "inline") throw UsageError("config: timing must be sidecar or inline");
    static const std::set<std::string> suites{"empty", "goals", "tie-sweep", "random"};
    if (!suites.count(c.reward_suite)) throw UsageError("config: unknown reward suite '" + c.reward_suite + "'");
}

inline json to_json(const RunConfig& c) {
    std::vector<std::string> seeds;
    for (auto s : c.seeds) seeds.push_back(std::to_string(s));
    return json{{"version", kConfigVersion},
                {"algorithm", c.algorithm},
                {"instance",
                 {{"S", c.instance.S},
                  {"A", c.instance.A},
                  {"H", c.instance.H},
                  {"d", c.instance.d},
                  {"seed", std::to_string(c.instance.seed)},
                  {"family", c.instance.family}}},
                {"K", c.K},
                {"seeds", seeds},
                {"delta", c.delta},
                {"epsilon", c.epsilon},
                {"beta_scale", c.beta_scale},
                {"c_beta", c.c_beta},
                {"planner", c.planner},
                {"eps_opt", c.eps_opt},
                {"reward_suite", c.reward_suite},
                {"reward_seed", std::to_string(c.reward_seed)},
                {"mode", c.mode},
                {"timing", c.timing},
                {"csv", c.csv},
                {"manifest", c.manifest}};
}

/// Strict: unknown keys and a missing or different "version" are errors.
inline RunConfig config_from_json(const json& j) {
    if (!j.is_object()) throw UsageError("config: expected an object");
    if (!j.contains("version")) throw SchemaError("config: missing version");
    if (j["version"] != kConfigVersion)
        throw SchemaError("config: version " + j["version"].dump() + " is not supported");
    static const std::set<std::string> keys{"version", "algorithm", "instance", "K", "seeds", "delta", "epsilon",
                                            "beta_scale", "c_beta", "planner", "eps_opt", "reward_suite",
                                            "reward_seed", "mode", "timing", "csv", "manifest"};
    for (const auto& [k, v] : j.items())
        if (!keys.count(k)) throw UsageError("config: unknown key '" + k + "'");
    RunConfig c;
    try {
        if (j.contains("algorithm")) c.algorithm = j["algorithm"].get<std::string>();
        if (j.contains("instance")) {
            const auto& in = j["instance"];
            static const std::set<std::string> ikeys{"S", "A", "H", "d", "seed", "family"};
            for (const auto& [k, v] : in.items())
                if (!ikeys.count(k)) throw UsageError("config: unknown instance key '" + k + "'");
            if (in.contains("S")) c.instance.S = in["S"].get<int>();
            if (in.contains("A")) c.instance.A = in["A"].get<int>();
            if (in.contains("H")) c.instance.H = in["H"].get<int>();
            if (in.contains("d")) c.instance.d = in["d"].get<int>();
            if (in.contains("seed")) c.instance.seed = seed_from_json(in["seed"]);
            if (in.contains("family")) c.instance.family = in["family"].get<std::string>();
        }
        if (j.contains("K")) c.K = j["K"].get<std::vector<int>>();
        if (j.contains("seeds")) {
            c.seeds.clear();
            for (const auto& s : j["seeds"]) c.seeds.push_back(seed_from_json(s));
        }
        if (j.contains("delta")) c.delta = j["delta"].get<double>();
        if (j.contains("epsilon")) c.epsilon = j["epsilon"].get<double>();
        if (j.contains("beta_scale")) c.beta_scale = j["beta_scale"].get<double>();
        if (j.contains("c_beta")) c.c_beta = j["c_beta"].get<double>();
        if (j.contains("planner")) c.planner = j["planner"].get<std::string>();
        if (j.contains("eps_opt")) c.eps_opt = j["eps_opt"].get<double>();
        if (j.contains("reward_suite")) c.reward_suite = j["reward_suite"].get<std::string>();
        if (j.contains("reward_seed")) c.reward_seed = seed_from_json(j["reward_seed"]);
        if (j.contains("mode")) c.mode = j["mode"].get<std::string>();
        if (j.contains("timing")) c.timing = j["timing"].get<std::string>();
        if (j.contains("csv")) c.csv = j["csv"].get<std::string>();
        if (j.contains("manifest")) c.manifest = j["manifest"].get<std::string>();
    } catch (const json::exception& e) {
        throw UsageError(std::string("config: ") + e.what());
    }
    validate(c);
    return c;
}

inline RunConfig load_config(const std::filesystem::path& path) {
    json j;
    try {
        j = json::parse(read_file(path));
    } catch (const json::parse_error& e) {
        throw UsageError("config: " + std::string(e.what()));
    }
    return config_from_json(j);
}

inline void save_config(const RunConfig& c, const std::filesystem::path& path) {
    write_file(path, to_json(c).dump(2) + "\n");
}

/// Digest of everything that changes results; output paths and timing are excluded.
inline std::string config_digest(const RunConfig& c) {
    json j = to_json(c);
    j.erase("csv");
    j.erase("manifest");
    j.erase("timing");
    return hex64(fnv1a(j.dump()));
}

// ---------------------------------------------------------------------------
// Results

struct ResultRecord {
    std::string algorithm;
    std::string instance;  // digest
    std::uint64_t seed = 0;
    int K = 0;
    std::string reward;
    double gap = 0.0;
    double seconds = 0.0;  // exploration + planning wall-clock of the cell
    std::vector<std::string> flags;
    double final_slack = 0.0;  // max over steps of the emitted model's slack
    std::string trace_digest;  // solver trace digest for bernstein, "-" otherwise
    bool error = false;

    bool operator==(const ResultRecord&) const = default;
};

struct CellTiming {
    std::uint64_t seed = 0;
    int K = 0;
    double seconds = 0.0;
    std::string started_at;
};

struct SweepResult {
    RunConfig config;
    std::string config_digest;
    std::string instance_digest;
    bool approximate = false;
    std::vector<ResultRecord> rows;
    std::vector<CellTiming> timing;
};

/// Instance family "anchor" is the linear MDP; the rest are mixtures.
using AnyInstance = std::variant<MixtureInstance, LinearMDPInstance>;

inline AnyInstance make_instance(const InstanceSpec& sp) {
    if (sp.family == "anchor") return generate_linear_instance({sp.S, sp.A, sp.H, sp.d, sp.seed, sp.family});
    return generate_instance(sp);
}

inline const TabularModel& truth_of(const AnyInstance& inst, TabularModel& storage) {
    if (const auto* m = std::get_if<MixtureInstance>(&inst)) return m->true_model();
    storage = std::get<LinearMDPInstance>(inst).true_model();
    return storage;
}

inline std::string instance_digest(const AnyInstance& inst) {
    if (const auto* m = std::get_if<MixtureInstance>(&inst)) return hex64(fnv1a(instance_payload(*m).dump()));
    return hex64(fnv1a(linear_instance_payload(std::get<LinearMDPInstance>(inst)).dump()));
}

namespace detail {

inline std::string utc_now() {
    const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&t, &tm);
    std::ostringstream ss;
    ss << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
    return ss.str();
}

inline double max_slack(const EstimatedModel& m) {
    double s = 0.0;
    for (double x : m.slack) s = std::max(s, x);
    return s;
}

inline std::string bernstein_trace_digest(const std::vector<BernsteinEpisode>& eps, int upto) {
    std::string s;
    for (int k = 0; k < upto && k < static_cast<int>(eps.size()); ++k) {
        const auto& e = eps[k];
        s += std::to_string(e.reward_index) + (e.saturated ? "s" : "u") + (e.fallback ? "f" : "") + ",";
    }
    return hex64(fnv1a(s));
}

/// What planning needs from one exploration outcome at one K.
struct Checkpoint {
    int K = 0;
    EstimatedModel model;                 // mixture algorithms
    std::optional<LsviStatistics> stats;  // linear-mdp
    ExplorationDataset dataset;           // linear-mdp
    double plan_beta = 0.0;               // linear-mdp
    std::string trace_digest = "-";
    std::vector<std::string> flags;
};

class Job {
public:
    Job(const RunConfig& cfg, const AnyInstance& inst, const RewardSuite& suite, const TabularModel& truth,
        std::string inst_digest)
        : cfg_(cfg), inst_(inst), suite_(suite), truth_(truth), digest_(std::move(inst_digest)) {}

    /// Explores at `budget` and returns one checkpoint per entry of `Ks`.
    std::vector<Checkpoint> explore(std::uint64_t seed, int budget, const std::vector<int>& Ks) const {
        Rng rng(derive_seed(seed, static_cast<std::uint64_t>(budget)));
        if (cfg_.algorithm == "linear-mdp") return explore_linear(rng, budget, Ks);
        const auto& inst = std::get<MixtureInstance>(inst_);
        if (cfg_.algorithm == "bernstein") return explore_bernstein(inst, rng, budget, Ks);
        return explore_hoeffding(inst, rng, budget, Ks);
    }

    std::vector<ResultRecord> plan(std::uint64_t seed, const Checkpoint& cp) const {
        std::vector<ResultRecord> rows;
        auto base = [&] {
            ResultRecord r;
            r.algorithm = cfg_.algorithm;
            r.instance = digest_;
            r.seed = seed;
            r.K = cp.K;
            r.flags = cp.flags;
            r.final_slack = max_slack(cp.model);
            r.trace_digest = cp.trace_digest;
            return r;
        };
        if (suite_.empty()) {
            ResultRecord r = base();
            r.reward = "none";
            r.flags.push_back("exploration-only");
            rows.push_back(std::move(r));
            return rows;
        }
        std::optional<TabularModel> model;
        if (cfg_.algorithm != "linear-mdp") model = std::get<MixtureInstance>(inst_).model_from(cp.model.theta);
        for (const auto& fam : suite_) {
            double gap = -std::numeric_limits<double>::infinity();
            for (const auto& R : fam.members) {
                Policy pi;
                if (model) {
                    pi = plugin_plan(*model, R, cfg_.planner == "inexact" ? cfg_.eps_opt : 0.0).policy;
                } else {
                    pi = plan_linear_mdp(std::get<LinearMDPInstance>(inst_), *cp.stats, R, cp.plan_beta);
                }
                gap = std::max(gap, suboptimality_gap(truth_, R, pi));
            }
            if (gap < -1e-12)
                throw ExplorationError("negative gap " + format_double(gap) + " for reward " + fam.name);
            ResultRecord r = base();
            r.reward = fam.name;
            r.gap = std::max(gap, 0.0);
            rows.push_back(std::move(r));
        }
        return rows;
    }

private:
    const RunConfig& cfg_;
    const AnyInstance& inst_;
    const RewardSuite& suite_;
    const TabularModel& truth_;
    std::string digest_;

    std::vector<std::string> base_flags(bool approximate) const {
        std::vector<std::string> f;
        if (approximate) f.push_back("prefix-approx");
        return f;
    }

    static void merge_flags(std::vector<std::string>& into, const std::vector<std::string>& from) {
        for (const auto& x : from)
            if (std::find(into.begin(), into.end(), x) == into.end()) into.push_back(x);
    }

    std::vector<Checkpoint> explore_hoeffding(const MixtureInstance& inst, Rng& rng, int budget,
                                              const std::vector<int>& Ks) const {
        HoeffdingConfig hc;
        hc.delta = cfg_.delta;
        hc.epsilon = cfg_.epsilon;
        hc.K = budget;
        hc.beta_scale = cfg_.beta_scale;
        hc.explorer = cfg_.algorithm == "uniform-baseline" ? Explorer::Uniform : Explorer::Optimistic;
        const double beta = hc.beta_for(inst);
        const bool approx = Ks.size() > 1 || (Ks.size() == 1 && Ks[0] != budget);
        std::vector<Checkpoint> out;
        auto checkpoint = [&](int K, const HoeffdingState& st) {
            Checkpoint cp;
            cp.K = K;
            cp.model = project_to_valid_model(inst, st.theta_hat, st.acc, beta, hc.param, hc.projection);
            cp.model.algorithm = cfg_.algorithm;
            cp.model.K = K;
            cp.model.config_digest = hc.digest();
            if (hc.beta_scale != 1.0) cp.model.add_flag("beta-scaled");
            cp.flags = base_flags(approx && K != budget);
            merge_flags(cp.flags, cp.model.flags);
            out.push_back(std::move(cp));
        };
        std::size_t next = 0;
        while (next < Ks.size() && Ks[next] == 0) {
            checkpoint(0, HoeffdingState(inst.H, inst.d, HoeffdingConfig::lambda_for(inst)));
            ++next;
        }
        run_hoeffding(hc, inst, rng, [&](int k, const OptimisticPass&, const HoeffdingState& st, const Trajectory&) {
            while (next < Ks.size() && Ks[next] == k + 1) {
                checkpoint(k + 1, st);
                ++next;
            }
        });
        return out;
    }

    std::vector<Checkpoint> explore_bernstein(const MixtureInstance& inst, Rng& rng, int budget,
                                              const std::vector<int>& Ks) const {
        BernsteinConfig bc;
        bc.delta = cfg_.delta;
        bc.epsilon = cfg_.epsilon;
        bc.K = budget;
        bc.beta_scale = cfg_.beta_scale;
        const bool approx = Ks.size() > 1 || (Ks.size() == 1 && Ks[0] != budget);
        std::vector<Checkpoint> out;
        std::vector<BernsteinEpisode> trace;
        std::size_t next = 0;
        auto finish = [&](int K, EstimatedModel m) {
            Checkpoint cp;
            cp.K = K;
            cp.model = std::move(m);
            cp.model.K = K;
            cp.trace_digest = bernstein_trace_digest(trace, K);
            cp.flags = base_flags(approx && K != budget);
            merge_flags(cp.flags, cp.model.flags);
            out.push_back(std::move(cp));
        };
        if (!Ks.empty() && Ks[0] == 0) {
            BernsteinConfig zero = bc;
            zero.K = 0;
            Rng unused(0);
            finish(0, run_bernstein(zero, inst, unused).model);
            ++next;
        }
        const BernsteinBetas b = bc.betas_for(inst);
        run_bernstein(bc, inst, rng, {}, [&](const BernsteinStep& step) {
            BernsteinEpisode e;
            e.reward_index = step.solution->reward_index;
            e.saturated = step.solution->trace.saturated;
            e.fallback = step.solution->trace.fallback;
            trace.push_back(e);
            while (next < Ks.size() && Ks[next] == step.k + 1) {
                EstimatedModel m;
                m.algorithm = "bernstein";
                m.config_digest = bc.digest();
                m.beta = b.hat;
                m.theta = step.solution->theta;
                m.slack = step.solution->trace.center_distance;
                if (step.solution->trace.fallback) m.add_flag("solver-fallback");
                for (double s : m.slack)
                    if (s > m.beta) m.add_flag("slack-exceeds-beta");
                if (bc.beta_scale != 1.0) m.add_flag("beta-scaled");
                finish(step.k + 1, std::move(m));
                ++next;
            }
        });
        return out;
    }

    std::vector<Checkpoint> explore_linear(Rng& rng, int budget, const std::vector<int>& Ks) const {
        const auto& inst = std::get<LinearMDPInstance>(inst_);
        LinearConfig lc;
        lc.c_beta = cfg_.c_beta;
        lc.delta = cfg_.delta;
        lc.epsilon = cfg_.epsilon;
        lc.K = budget;
        const bool approx = Ks.size() > 1 || (Ks.size() == 1 && Ks[0] != budget);
        std::vector<Checkpoint> out;
        ExplorationDataset ds;
        if (budget > 0) {
            ds = explore_linear_mdp(inst, lc, rng);
        } else {
            ds.S = inst.S;
            ds.A = inst.A;
            ds.H = inst.H;
            ds.beta = beta_linear(inst.d, inst.H, lc.delta, lc.epsilon, lc.c_beta);
        }
        for (int K : Ks) {
            ExplorationDataset prefix = ds;
            prefix.K = K;
            prefix.records.resize(static_cast<std::size_t>(K) * inst.H);
            Checkpoint cp;
            cp.K = K;
            cp.stats = dataset_statistics(inst, prefix);
            cp.plan_beta = ds.beta;
            cp.dataset = std::move(prefix);
            cp.flags = base_flags(approx && K != budget);
            out.push_back(std::move(cp));
        }
        return out;
    }
};

}  // namespace detail

/// Shared read-only context for single-cell entry points.
struct SweepContext {
    RunConfig config;
    AnyInstance instance;
    TabularModel storage;
    RewardSuite suite;
    std::string digest;

    explicit SweepContext(const RunConfig& cfg) : config(cfg), instance(make_instance(cfg.instance)) {
        validate(cfg);
        suite = make_reward_suite(cfg.reward_suite, truth(), cfg.reward_seed);
        digest = instance_digest(instance);
    }
    SweepContext(const SweepContext&) = delete;
    SweepContext& operator=(const SweepContext&) = delete;

    const TabularModel& truth() {
        if (const auto* m = std::get_if<MixtureInstance>(&instance)) return m->true_model();
        if (storage.H == 0 && std::get<LinearMDPInstance>(instance).H > 0)
            storage = std::get<LinearMDPInstance>(instance).true_model();
        return storage;
    }
};

/// Exploration for one (seed, K) cell, exactly as run_sweep's exact mode does it.
inline detail::Checkpoint explore_cell(SweepContext& ctx, std::uint64_t seed, int K) {
    const detail::Job job(ctx.config, ctx.instance, ctx.suite, ctx.truth(), ctx.digest);
    auto cps = job.explore(seed, K, {K});
    return std::move(cps.at(0));
}

/// Gap rows for a persisted mixture model.
inline std::vector<ResultRecord> evaluate_model(SweepContext& ctx, std::uint64_t seed, const EstimatedModel& m) {
    if (ctx.config.algorithm == "linear-mdp") throw UsageError("evaluate_model: config is for linear-mdp");
    const auto& inst = std::get<MixtureInstance>(ctx.instance);
    if (!validate_model(inst, m.theta).pass) throw UsageError("evaluate_model: model is invalid for this instance");
    detail::Checkpoint cp;
    cp.K = m.K;
    cp.model = m;
    cp.flags = m.flags;
    const detail::Job job(ctx.config, ctx.instance, ctx.suite, ctx.truth(), ctx.digest);
    return job.plan(seed, cp);
}

/// Gap rows for a persisted linear-MDP dataset.
inline std::vector<ResultRecord> evaluate_dataset(SweepContext& ctx, std::uint64_t seed, const ExplorationDataset& ds) {
    if (ctx.config.algorithm != "linear-mdp") throw UsageError("evaluate_dataset: config is not for linear-mdp");
    const auto& inst = std::get<LinearMDPInstance>(ctx.instance);
    detail::Checkpoint cp;
    cp.K = ds.K;
    cp.stats = dataset_statistics(inst, ds);
    cp.plan_beta = ds.beta;
    const detail::Job job(ctx.config, ctx.instance, ctx.suite, ctx.truth(), ctx.digest);
    return job.plan(seed, cp);
}

using ProgressFn = std::function<void(std::size_t done, std::size_t total)>;

/// Runs every cell of `cfg` on `jobs` worker threads. Rows come out sorted by
/// (seed order, K, reward suite order) regardless of scheduling.
inline SweepResult run_sweep(const RunConfig& cfg, int jobs = 1, const ProgressFn& progress = {}) {
    validate(cfg);
    SweepResult out;
    out.config = cfg;
    out.config_digest = config_digest(cfg);
    out.approximate = cfg.mode == "prefix" && cfg.K.size() > 1;
    const AnyInstance inst = make_instance(cfg.instance);
    TabularModel storage;
    const TabularModel& truth = truth_of(inst, storage);
    out.instance_digest = instance_digest(inst);
    const RewardSuite suite = make_reward_suite(cfg.reward_suite, truth, cfg.reward_seed);
    const detail::Job job(cfg, inst, suite, truth, out.instance_digest);

    struct Task {
        std::size_t seed_index;
        int budget;
        std::vector<int> Ks;
    };
    std::vector<Task> tasks;
    for (std::size_t i = 0; i < cfg.seeds.size(); ++i) {
        if (cfg.mode == "prefix") {
            tasks.push_back({i, cfg.K.back(), cfg.K});
        } else {
            for (int K : cfg.K) tasks.push_back({i, K, {K}});
        }
    }

    struct Slot {
        std::vector<std::vector<ResultRecord>> rows;  // one entry per K of the task
        std::vector<CellTiming> timing;
    };
    std::vector<Slot> slots(tasks.size());
    std::atomic<std::size_t> cursor{0}, done{0};

    auto work = [&] {
        for (;;) {
            const std::size_t t = cursor.fetch_add(1);
            if (t >= tasks.size()) return;
            const Task& task = tasks[t];
            const std::uint64_t seed = cfg.seeds[task.seed_index];
            Slot& slot = slots[t];
            const std::string started = detail::utc_now();
            const auto t0 = std::chrono::steady_clock::now();
            try {
                const auto cps = job.explore(seed, task.budget, task.Ks);
                const double explore_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
                for (const auto& cp : cps) {
                    const auto p0 = std::chrono::steady_clock::now();
                    auto rows = job.plan(seed, cp);
                    const double secs =
                        explore_s + std::chrono::duration<double>(std::chrono::steady_clock::now() - p0).count();
                    for (auto& r : rows) r.seconds = secs;
                    slot.rows.push_back(std::move(rows));
                    slot.timing.push_back({seed, cp.K, secs, started});
                }
            } catch (const std::exception& e) {
                slot.rows.clear();
                slot.timing.clear();
                const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
                std::string msg = e.what();
                std::replace_if(msg.begin(), msg.end(), [](char c) { return c == ',' || c == '\n' || c == '"'; }, ' ');
                for (int K : task.Ks) {
                    ResultRecord r;
                    r.algorithm = cfg.algorithm;
                    r.instance = out.instance_digest;
                    r.seed = seed;
                    r.K = K;
                    r.reward = "error";
                    r.gap = std::numeric_limits<double>::quiet_NaN();
                    r.seconds = secs;
                    r.flags = {"error: " + msg};
                    r.trace_digest = "-";
                    r.error = true;
                    slot.rows.push_back({r});
                    slot.timing.push_back({seed, K, secs, started});
                }
            }
            const std::size_t n = done.fetch_add(1) + 1;
            if (progress) progress(n, tasks.size());
        }
    };

    const int workers = std::max(1, std::min<int>(jobs, static_cast<int>(tasks.size())));
    if (workers == 1) {
        work();
    } else {
        std::vector<std::thread> pool;
        for (int i = 0; i < workers; ++i) pool.emplace_back(work);
        for (auto& th : pool) th.join();
    }

    // Tasks are already in (seed, K) order; prefix tasks hold their Ks ascending.
    for (std::size_t t = 0; t < tasks.size(); ++t) {
        for (auto& rows : slots[t].rows)
            for (auto& r : rows) out.rows.push_back(std::move(r));
        for (auto& tm : slots[t].timing) out.timing.push_back(tm);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Output

inline std::string csv_field(const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string q = "\"";
    for (char c : s) q += c == '"' ? std::string("\"\"") : std::string(1, c);
    return q + "\"";
}

inline std::string join_flags(const std::vector<std::string>& flags) {
    std::string s;
    for (const auto& f : flags) s += (s.empty() ? "" : ";") + f;
    return s;
}

inline std::string results_csv(const SweepResult& res) {
    const bool inline_timing = res.config.timing == "inline";
    std::string out = "algorithm,instance,seed,K,reward,gap,seconds,flags\n";
    for (const auto& r : res.rows) {
        out += csv_field(r.algorithm) + "," + r.instance + "," + std::to_string(r.seed) + "," + std::to_string(r.K) +
               "," + csv_field(r.reward) + "," + (r.error ? std::string("nan") : format_double(r.gap)) + "," +
               (inline_timing ? format_double(r.seconds) : std::string("0")) + "," + csv_field(join_flags(r.flags)) +
               "\n";
    }
    return out;
}

inline std::string timing_csv(const SweepResult& res) {
    std::string out = "seed,K,seconds,started_at\n";
    for (const auto& t : res.timing)
        out += std::to_string(t.seed) + "," + std::to_string(t.K) + "," + format_double(t.seconds) + "," +
               t.started_at + "\n";
    return out;
}

inline json manifest_json(const SweepResult& res) {
    json cells = json::array();
    for (const auto& r : res.rows)
        cells.push_back({{"seed", std::to_string(r.seed)},
                         {"K", r.K},
                         {"reward", r.reward},
                         {"status", r.error ? "error" : "ok"},
                         {"final_slack", r.final_slack},
                         {"trace_digest", r.trace_digest}});
    int errors = 0;
    for (const auto& r : res.rows) errors += r.error ? 1 : 0;
    return json{{"library", "rfx"},
                {"library_version", kLibraryVersion},
                {"config_digest", res.config_digest},
                {"instance_digest", res.instance_digest},
                {"mode", res.config.mode},
                {"approximate", res.approximate},
                {"rows", res.rows.size()},
                {"errors", errors},
                {"config", to_json(res.config)},
                {"results_checksum", hex64(fnv1a(results_csv(res)))},
                {"cells", cells}};
}

inline std::filesystem::path timing_path(const std::filesystem::path& csv) {
    return std::filesystem::path(csv.string() + ".timing.csv");
}

/// Writes the CSV, its timing sidecar and the manifest. Paths are taken from
/// the config unless overridden.
inline void write_outputs(const SweepResult& res, const std::filesystem::path& csv,
                          const std::filesystem::path& manifest) {
    write_file(csv, results_csv(res));
    write_file(timing_path(csv), timing_csv(res));
    write_file(manifest, manifest_json(res).dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// Analysis helpers

inline double median(std::vector<double> v) {
    if (v.empty()) throw UsageError("median of an empty sample");
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

/// Least-squares slope of log y on log x.
inline double loglog_slope(const std::vector<double>& x, const std::vector<double>& y) {
    if (x.size() != y.size() || x.size() < 2) throw UsageError("loglog_slope: need two or more matched points");
    double mx = 0.0, my = 0.0;
    const double n = static_cast<double>(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        if (!(x[i] > 0.0) || !(y[i] > 0.0)) throw UsageError("loglog_slope: values must be positive");
        mx += std::log(x[i]) / n;
        my += std::log(y[i]) / n;
    }
    double sxy = 0.0, sxx = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double dx = std::log(x[i]) - mx;
        sxy += dx * (std::log(y[i]) - my);
        sxx += dx * dx;
    }
    return sxy / sxx;
}

struct GapCurve {
    std::vector<double> K;
    std::vector<double> median_gap;  // per K: median over seeds of the worst family gap
    double slope = 0.0;
};

/// Per-seed cell gap = max over reward families; medians over seeds per K.
inline GapCurve gap_curve(const SweepResult& res) {
    GapCurve c;
    for (int K : res.config.K) {
        std::vector<double> per_seed;
        for (auto seed : res.config.seeds) {
            double g = -1.0;
            for (const auto& r : res.rows)
                if (r.seed == seed && r.K == K) {
                    if (r.error) throw ExplorationError("gap_curve: cell (" + std::to_string(seed) + ", " +
                                                        std::to_string(K) + ") failed: " + join_flags(r.flags));
                    g = std::max(g, r.gap);
                }
            if (g >= 0.0) per_seed.push_back(g);
        }
        if (per_seed.empty()) continue;
        c.K.push_back(K);
        c.median_gap.push_back(median(per_seed));
    }
    std::vector<double> k, g;
    for (std::size_t i = 0; i < c.K.size(); ++i)
        if (c.K[i] > 0) {
            k.push_back(c.K[i]);
            g.push_back(std::max(c.median_gap[i], 1e-12));
        }
    c.slope = k.size() >= 2 ? loglog_slope(k, g) : std::numeric_limits<double>::quiet_NaN();
    return c;
}

}  // namespace rfx
