// rfx: command-line front end for instance generation, exploration,
// planning, gap evaluation, sweeps and the invariant suite.

#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "rfx/harness.hpp"
#include "rfx/serialize.hpp"
#include "rfx/verify.hpp"

namespace fs = std::filesystem;
using namespace rfx;

namespace {

struct Common {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string out;
    int jobs = 1;
    std::string mode;
};

RunConfig resolve(const Common& c) {
    RunConfig cfg = c.config.empty() ? RunConfig{} : load_config(c.config);
    if (!c.mode.empty()) cfg.mode = c.mode;
    validate(cfg);
    return cfg;
}

std::uint64_t seed_or(const Common& c, const RunConfig& cfg) { return c.seed ? *c.seed : cfg.seeds.front(); }

GapCurve gap_curve_or_empty(const SweepResult& res) {
    try {
        return gap_curve(res);
    } catch (const ExplorationError&) {
        return {};  // some cells failed; the CSV has the error rows
    }
}

json policy_json(const Policy& pi) { return json{{"H", pi.H}, {"S", pi.S}, {"actions", pi.act}}; }

void print_rows(const std::vector<ResultRecord>& rows) {
    for (const auto& r : rows)
        std::cout << r.reward << " gap=" << format_double(r.gap) << (r.flags.empty() ? "" : " flags=" + join_flags(r.flags))
                  << "\n";
}

int cmd_generate(const Common& c) {
    RunConfig cfg = resolve(c);
    if (c.seed) cfg.instance.seed = *c.seed;
    const fs::path out = c.out.empty() ? fs::path("instance.json") : fs::path(c.out);
    const AnyInstance inst = make_instance(cfg.instance);
    if (const auto* m = std::get_if<MixtureInstance>(&inst))
        persist_instance(*m, out);
    else
        persist_linear_instance(std::get<LinearMDPInstance>(inst), out);
    std::cout << "wrote " << out.string() << " (digest " << instance_digest(inst) << ")\n";
    return 0;
}

int cmd_explore(const Common& c, std::optional<int> K_opt) {
    const RunConfig cfg = resolve(c);
    const int K = K_opt ? *K_opt : cfg.K.back();
    SweepContext ctx(cfg);
    const std::uint64_t seed = seed_or(c, cfg);
    auto cp = explore_cell(ctx, seed, K);
    if (cfg.algorithm == "linear-mdp") {
        const fs::path out = c.out.empty() ? fs::path("dataset.txt") : fs::path(c.out);
        persist_dataset(cp.dataset, out);
        std::cout << "wrote " << out.string() << " (" << cp.dataset.records.size() << " records)\n";
    } else {
        const fs::path out = c.out.empty() ? fs::path("model.json") : fs::path(c.out);
        persist_model(cp.model, out);
        std::cout << "wrote " << out.string() << " (K=" << K << ", max slack " << format_double(detail::max_slack(cp.model))
                  << ", beta " << format_double(cp.model.beta)
                  << (cp.model.flags.empty() ? "" : ", flags " + join_flags(cp.model.flags)) << ")\n";
    }
    return 0;
}

int cmd_plan(const Common& c, const std::string& in) {
    const RunConfig cfg = resolve(c);
    SweepContext ctx(cfg);
    json plans = json::array();
    for (const auto& fam : ctx.suite) {
        const Reward& R = fam.members.front();
        Policy pi;
        if (cfg.algorithm == "linear-mdp") {
            const auto ds = load_dataset(in);
            pi = plan_linear_mdp(std::get<LinearMDPInstance>(ctx.instance), ds, R, ds.beta);
        } else {
            const auto m = load_model(in);
            const auto model = std::get<MixtureInstance>(ctx.instance).model_from(m.theta);
            pi = plugin_plan(model, R, cfg.planner == "inexact" ? cfg.eps_opt : 0.0).policy;
        }
        plans.push_back({{"reward", fam.name}, {"policy", policy_json(pi)}});
    }
    const fs::path out = c.out.empty() ? fs::path("plans.json") : fs::path(c.out);
    write_file(out, plans.dump(2) + "\n");
    std::cout << "wrote " << out.string() << " (" << plans.size() << " policies)\n";
    return 0;
}

int cmd_evaluate(const Common& c, const std::string& in) {
    const RunConfig cfg = resolve(c);
    SweepContext ctx(cfg);
    const std::uint64_t seed = seed_or(c, cfg);
    const auto rows = cfg.algorithm == "linear-mdp" ? evaluate_dataset(ctx, seed, load_dataset(in))
                                                    : evaluate_model(ctx, seed, load_model(in));
    print_rows(rows);
    if (!c.out.empty()) {
        SweepResult res;
        res.config = cfg;
        res.rows = rows;
        write_file(c.out, results_csv(res));
        std::cout << "wrote " << c.out << "\n";
    }
    return 0;
}

int cmd_sweep(const Common& c) {
    RunConfig cfg = resolve(c);
    if (c.seed) cfg.seeds = {*c.seed};
    fs::path csv = cfg.csv, manifest = cfg.manifest;
    if (!c.out.empty()) {
        csv = fs::path(c.out);
        manifest = csv.parent_path() / (csv.stem().string() + ".manifest.json");
    }
    const auto res = run_sweep(cfg, c.jobs, [](std::size_t done, std::size_t total) {
        std::cerr << "\r" << done << "/" << total << " jobs" << std::flush;
    });
    std::cerr << "\n";
    write_outputs(res, csv, manifest);
    int errors = 0;
    for (const auto& r : res.rows) errors += r.error;
    const auto curve = gap_curve_or_empty(res);
    for (std::size_t i = 0; i < curve.K.size(); ++i)
        std::cout << "K=" << curve.K[i] << " median gap " << format_double(curve.median_gap[i]) << "\n";
    if (curve.K.size() >= 2) std::cout << "log-log slope " << format_double(curve.slope) << "\n";
    std::cout << "wrote " << csv.string() << ", " << timing_path(csv).string() << ", " << manifest.string()
              << (res.approximate ? " [prefix mode: approximate]" : "") << "\n";
    return errors ? 3 : 0;
}

int cmd_verify(const Common& c) {
    const auto checks = run_invariant_suite(c.seed ? *c.seed : 0);
    bool ok = true;
    json report = json::array();
    for (const auto& ch : checks) {
        std::cout << (ch.pass ? "PASS " : "FAIL ") << ch.name << " (" << ch.detail << ")\n";
        ok = ok && ch.pass;
        report.push_back({{"name", ch.name}, {"pass", ch.pass}, {"detail", ch.detail}});
    }
    if (!c.out.empty()) write_file(c.out, report.dump(2) + "\n");
    return ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Reward-free exploration laboratory for linear mixture MDPs"};
    app.require_subcommand(1);
    Common common;
    std::optional<int> K;
    std::string in;

    auto add_common = [&](CLI::App* sub, bool jobs) {
        sub->add_option("--config", common.config, "run configuration (JSON)")->check(CLI::ExistingFile);
        sub->add_option("--seed", common.seed, "seed override");
        sub->add_option("--out", common.out, "output path");
        sub->add_option("--mode", common.mode, "exact | prefix")->check(CLI::IsMember({"exact", "prefix"}));
        if (jobs) sub->add_option("--jobs", common.jobs, "worker threads")->check(CLI::PositiveNumber);
    };

    auto* gen = app.add_subcommand("generate", "generate an instance from the config's instance spec");
    add_common(gen, false);
    auto* exp = app.add_subcommand("explore", "run one exploration and persist its model or dataset");
    add_common(exp, false);
    exp->add_option("--K", K, "episode budget (default: largest K in the config)");
    auto* plan = app.add_subcommand("plan", "plan on a persisted model or dataset for each suite family");
    add_common(plan, false);
    plan->add_option("--in", in, "model.json or dataset file")->required()->check(CLI::ExistingFile);
    auto* eval = app.add_subcommand("evaluate", "gap of a persisted model or dataset on the true instance");
    add_common(eval, false);
    eval->add_option("--in", in, "model.json or dataset file")->required()->check(CLI::ExistingFile);
    auto* sweep = app.add_subcommand("sweep", "run every (seed, K) cell and write CSV plus manifest");
    add_common(sweep, true);
    auto* ver = app.add_subcommand("verify", "run the invariant suite");
    add_common(ver, false);

    CLI11_PARSE(app, argc, argv);
    try {
        if (*gen) return cmd_generate(common);
        if (*exp) return cmd_explore(common, K);
        if (*plan) return cmd_plan(common, in);
        if (*eval) return cmd_evaluate(common, in);
        if (*sweep) return cmd_sweep(common);
        if (*ver) return cmd_verify(common);
    } catch (const SchemaError& e) {
        std::cerr << "schema error: " << e.what() << "\n";
        return 4;
    } catch (const CorruptionError& e) {
        std::cerr << "corrupt input: " << e.what() << "\n";
        return 4;
    } catch (const UsageError& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
