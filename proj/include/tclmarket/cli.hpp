#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>

#include <json.hpp>

#include "tclmarket/scenario.hpp"

namespace tclmarket::cli {

using nlohmann::json;

inline constexpr const char* kVersion = "tclmarket 0.1.0";

inline bool verbose() {
    const char* v = std::getenv("TCLMARKET_VERBOSE");
    return v != nullptr && v[0] != '\0' && v[0] != '0';
}

inline void note(const std::string& msg) {
    if (verbose()) std::cerr << "[tclmarket] " << msg << "\n";
}

// FNV-1a over the raw file bytes; manifests record input digests before the
// run starts so outputs are attributable.
inline std::string fnv1a_digest(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataGap("cannot open file: " + path);
    std::uint64_t h = 1469598103934665603ull;
    char buf[4096];
    while (in.read(buf, sizeof buf) || in.gcount() > 0) {
        for (std::streamsize i = 0; i < in.gcount(); ++i) {
            h ^= static_cast<unsigned char>(buf[i]);
            h *= 1099511628211ull;
        }
    }
    char hex[20];
    std::snprintf(hex, sizeof hex, "%016llx", static_cast<unsigned long long>(h));
    return hex;
}

// ---------------------------------------------------------------------------
// json (de)serialization

inline json to_json(const Mat2& m) { return json::array({m.a, m.b, m.c, m.d}); }
inline json to_json(const Vec2& v) { return json::array({v.v0, v.v1}); }
inline Mat2 mat2_from(const json& j) { return {j.at(0), j.at(1), j.at(2), j.at(3)}; }
inline Vec2 vec2_from(const json& j) { return {j.at(0), j.at(1)}; }

inline json model_to_json(const estimation::UncertainModel& m) {
    return json{{"a_bar", to_json(m.a_bar)},   {"b_bar", to_json(m.b_bar)},
                {"c_on", to_json(m.c_on)},     {"c_off", to_json(m.c_off)},
                {"q_cov", to_json(m.q_cov)},   {"r_var", m.r_var},
                {"m0", to_json(m.m0)},         {"p0", to_json(m.p0)}};
}

inline estimation::UncertainModel model_from_json(const json& j) {
    estimation::UncertainModel m;
    m.a_bar = mat2_from(j.at("a_bar"));
    m.b_bar = mat2_from(j.at("b_bar"));
    m.c_on = vec2_from(j.at("c_on"));
    m.c_off = vec2_from(j.at("c_off"));
    m.q_cov = mat2_from(j.at("q_cov"));
    m.r_var = j.at("r_var");
    m.m0 = vec2_from(j.at("m0"));
    m.p0 = mat2_from(j.at("p0"));
    m.validate();
    return m;
}

inline scenario::ScenarioConfig config_from_json(const json& j) {
    scenario::ScenarioConfig c;
    c.n_households = j.value("n_households", c.n_households);
    c.feeder_capacity_kw = j.value("feeder_capacity_kw", c.feeder_capacity_kw);
    c.unresponsive_kw = j.value("unresponsive_kw", c.unresponsive_kw);
    c.period_minutes = j.value("period_minutes", c.period_minutes);
    c.horizon_hours = j.value("horizon_hours", c.horizon_hours);
    c.weather_path = j.value("weather_path", std::string{});
    c.price_path = j.value("price_path", std::string{});
    c.population_path = j.value("population_path", std::string{});
    c.seed = j.value("seed", static_cast<std::uint64_t>(c.seed));
    c.perturb_pct = j.value("perturb_pct", c.perturb_pct);
    c.gamma = j.value("gamma", c.gamma);
    c.obs_noise_f = j.value("obs_noise_f", c.obs_noise_f);
    const std::string bidding = j.value("bidding_mode", std::string{"known-params"});
    if (bidding == "known-params")
        c.bidding = scenario::ScenarioConfig::Bidding::known_params;
    else if (bidding == "output-based")
        c.bidding = scenario::ScenarioConfig::Bidding::output_based;
    else if (bidding == "perturbed")
        c.bidding = scenario::ScenarioConfig::Bidding::perturbed;
    else
        throw ConfigError("unknown bidding_mode: " + bidding);
    const std::string pricing = j.value("pricing_mode", std::string{"mechanism"});
    if (pricing == "mechanism")
        c.pricing = scenario::ScenarioConfig::Pricing::mechanism;
    else if (pricing == "rtp")
        c.pricing = scenario::ScenarioConfig::Pricing::rtp;
    else if (pricing == "fixed-ratio")
        c.pricing = scenario::ScenarioConfig::Pricing::fixed_ratio;
    else
        throw ConfigError("unknown pricing_mode: " + pricing);
    return c;
}

inline json config_to_json(const scenario::ScenarioConfig& c) {
    const char* bidding = c.bidding == scenario::ScenarioConfig::Bidding::known_params
                              ? "known-params"
                              : (c.bidding == scenario::ScenarioConfig::Bidding::output_based
                                     ? "output-based"
                                     : "perturbed");
    const char* pricing = c.pricing == scenario::ScenarioConfig::Pricing::mechanism
                              ? "mechanism"
                              : (c.pricing == scenario::ScenarioConfig::Pricing::rtp ? "rtp"
                                                                                     : "fixed-ratio");
    return json{{"n_households", c.n_households},
                {"feeder_capacity_kw", c.feeder_capacity_kw},
                {"unresponsive_kw", c.unresponsive_kw},
                {"period_minutes", c.period_minutes},
                {"horizon_hours", c.horizon_hours},
                {"weather_path", c.weather_path},
                {"price_path", c.price_path},
                {"population_path", c.population_path},
                {"seed", c.seed},
                {"bidding_mode", bidding},
                {"perturb_pct", c.perturb_pct},
                {"pricing_mode", pricing},
                {"gamma", c.gamma},
                {"obs_noise_f", c.obs_noise_f}};
}

// ---------------------------------------------------------------------------
// subcommands

struct SimulateOverrides {
    std::optional<std::uint64_t> seed;
    std::optional<std::string> bidding_mode;
    std::optional<std::string> pricing_mode;
    std::optional<double> gamma;
    std::optional<double> perturb_pct;
};

inline int cmd_simulate(const std::string& config_path, const std::string& out_dir,
                        const SimulateOverrides& ov = {}) {
    try {
        std::ifstream cf(config_path);
        if (!cf) {
            std::cerr << "error: cannot open config file: " << config_path << "\n";
            return 2;
        }
        json j = json::parse(cf);
        if (ov.seed) j["seed"] = *ov.seed;
        if (ov.bidding_mode) j["bidding_mode"] = *ov.bidding_mode;
        if (ov.pricing_mode) j["pricing_mode"] = *ov.pricing_mode;
        if (ov.gamma) j["gamma"] = *ov.gamma;
        if (ov.perturb_pct) j["perturb_pct"] = *ov.perturb_pct;
        scenario::ScenarioConfig cfg = config_from_json(j);
        cfg.validate();

        for (const std::string& p : {cfg.weather_path, cfg.price_path}) {
            if (!std::filesystem::exists(p)) {
                std::cerr << "error: input file not found: " << p << "\n";
                return 2;
            }
        }
        if (!cfg.population_path.empty() && !std::filesystem::exists(cfg.population_path)) {
            std::cerr << "error: input file not found: " << cfg.population_path << "\n";
            return 2;
        }

        std::filesystem::create_directories(out_dir);
        const std::string period_csv = out_dir + "/periods.csv";
        const std::string long_csv = out_dir + "/trajectories_long.csv";
        const std::string summary_path = out_dir + "/summary.json";

        json manifest{{"version", kVersion},
                      {"config", config_to_json(cfg)},
                      {"seed", cfg.seed},
                      {"inputs",
                       {{"weather", {{"path", cfg.weather_path}, {"fnv1a64", fnv1a_digest(cfg.weather_path)}}},
                        {"prices", {{"path", cfg.price_path}, {"fnv1a64", fnv1a_digest(cfg.price_path)}}}}},
                      {"outputs", {period_csv, long_csv, summary_path}}};
        if (!cfg.population_path.empty())
            manifest["inputs"]["population"] = {{"path", cfg.population_path},
                                                {"fnv1a64", fnv1a_digest(cfg.population_path)}};
        {
            std::ofstream mf(out_dir + "/manifest.json");
            mf << manifest.dump(2) << "\n";
        }

        note("running scenario: " + std::to_string(cfg.n_households) + " households");
        const scenario::ScenarioResult r = scenario::run_scenario(cfg);
        scenario::write_period_csv(period_csv, r);

        {
            std::ofstream lf(long_csv);
            lf << "period,series,value\n";
            char buf[160];
            for (const auto& p : r.periods) {
                const auto row = [&](const char* series, double v) {
                    std::snprintf(buf, sizeof buf, "%d,%s,%.10g\n", p.index, series, v);
                    lf << buf;
                };
                row("clearing_price", p.clearing.price);
                row("base_price", p.base_price);
                row("cleared_kw", p.cleared_kw);
                row("realized_kw", p.realized_kw);
                row("capacity_kw", r.capacity_kw);
            }
        }

        int congested = 0;
        double welfare_total = 0.0, energy_total = 0.0;
        for (const auto& p : r.periods) {
            congested += p.clearing.congested ? 1 : 0;
            welfare_total += p.welfare;
            energy_total += (p.realized_kw - r.unresponsive_kw) * (cfg.period_minutes / 60.0);
        }
        json summary{{"periods", r.periods.size()},
                     {"capacity_kw", r.capacity_kw},
                     {"unresponsive_kw", r.unresponsive_kw},
                     {"congested_periods", congested},
                     {"capped_fraction", r.capped_fraction()},
                     {"max_overshoot_pct", r.max_overshoot_pct()},
                     {"responsive_energy_kwh", energy_total},
                     {"welfare_total", welfare_total}};
        {
            std::ofstream sf(summary_path);
            sf << summary.dump(2) << "\n";
        }
        std::cout << "simulate: " << r.periods.size() << " periods, " << congested
                  << " congested, capped fraction " << r.capped_fraction() << "\n";
        return 0;
    } catch (const DataGap& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}

inline int cmd_estimate(const std::string& log_path, const std::string& init_path,
                        const std::string& out_path) {
    try {
        if (!std::filesystem::exists(log_path)) {
            std::cerr << "error: input file not found: " << log_path << "\n";
            return 2;
        }
        if (!std::filesystem::exists(init_path)) {
            std::cerr << "error: input file not found: " << init_path << "\n";
            return 2;
        }
        const estimation::MeasurementLog log = scenario::read_measurement_csv(log_path);
        std::ifstream inf(init_path);
        const json j = json::parse(inf);
        const estimation::UncertainModel init = model_from_json(j.at("init"));

        agent::UserPrefs prefs{70.0, 73.0, 78.0, 1.0};
        agent::PriceStats stats{0.05, 0.015, 288};
        if (j.contains("prefs")) {
            const auto& p = j["prefs"];
            prefs = {p.at("t_min"), p.at("t_desired"), p.at("t_max"), p.value("k_slider", 1.0)};
        }
        if (j.contains("stats")) {
            const auto& s = j["stats"];
            stats = {s.at("p_avg"), s.at("p_sigma"), s.value("window", 288)};
        }
        const double deadband = j.value("deadband", 1.0);
        const double q_measured = j.value("q_measured", 0.0);
        const int period_steps = j.value("period_steps", 5);
        const int max_iters = j.value("max_iters", 200);
        const double tol = j.value("tol", 1e-8);
        const int restarts = j.value("restarts", 5);
        const std::uint64_t restart_seed = j.value("restart_seed", 1u);

        const auto em =
            estimation::em_fit_multistart(log, init, restarts, restart_seed, max_iters, tol);
        const agent::Bid bid = estimation::bid_from_estimate(em.model, log, prefs, stats, deadband,
                                                             q_measured, "estimated", period_steps);

        json out{{"fitted", model_to_json(em.model)},
                 {"loglik_trace", em.loglik_trace},
                 {"converged", em.converged},
                 {"iterations", em.iterations},
                 {"max_loglik_drop", em.max_loglik_drop},
                 {"bid", {{"price", bid.price}, {"quantity", bid.quantity}}}};

        if (j.contains("truth")) {
            const estimation::UncertainModel truth = model_from_json(j.at("truth"));
            const agent::Bid true_bid = estimation::bid_from_estimate(
                truth, log, prefs, stats, deadband, q_measured, "truth", period_steps);
            const double err_pct = std::fabs(bid.price - true_bid.price) /
                                   std::max(1e-12, std::fabs(true_bid.price)) * 100.0;
            out["true_bid_price"] = true_bid.price;
            out["bid_error_pct"] = err_pct;
        }
        {
            std::ofstream of(out_path);
            if (!of) throw DataGap("cannot write file: " + out_path);
            of << out.dump(2) << "\n";
        }
        std::cout << "estimate: " << em.iterations << " iterations, converged="
                  << (em.converged ? "yes" : "no") << ", bid price " << bid.price << "\n";
        if (!em.converged && em.max_loglik_drop > 1e-9) {
            std::cerr << "error: EM log-likelihood decreased by " << em.max_loglik_drop
                      << " without converging\n";
            return 3;
        }
        return 0;
    } catch (const SchemaError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const DataGap& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}

inline int cmd_verify(const std::string& config_path) {
    int failures = 0;
    const auto report = [&](bool ok, const std::string& line) {
        std::cout << (ok ? "[PASS] " : "[FAIL] ") << line << "\n";
        if (!ok) ++failures;
    };
    try {
        // 100-agent quadratic fixture: capacity price 50, marginal cost 20
        {
            std::vector<market::ValuedAgent> agents;
            for (int i = 1; i <= 100; ++i)
                agents.push_back({"a" + std::to_string(i), {-1.0, static_cast<double>(i), 1.0}});
            const auto cost = market::CostModel::linear(20.0);
            const auto res = market::clear_functional(agents, cost, 50.0);
            const bool ok = res.p_bar && *res.p_bar == 50.0 && res.price == 50.0;
            char line[160];
            std::snprintf(line, sizeof line,
                          "quadratic fixture: P_bar=%g P_c*=%g (want 50, 50)",
                          res.p_bar ? *res.p_bar : -1.0, res.price);
            report(ok, line);
        }
        // two-agent linear fixture: team optimum exists, no price realizes it
        {
            std::vector<market::ValuedAgent> agents{{"a1", {0.0, 1.0, 2.0}},
                                                    {"a2", {0.0, 3.0, 2.0}}};
            const auto cost = market::CostModel::linear(2.0);
            const auto team = market::solve_team_problem(agents, cost, 1.0);
            const auto res = market::clear_functional(agents, cost, 1.0);
            const auto rep = market::verify_realization(team, res, agents, cost);
            const bool ok = std::fabs(team.allocations.at("a1")) < 1e-9 &&
                            std::fabs(team.allocations.at("a2") - 1.0) < 1e-9 &&
                            std::fabs(team.welfare - 1.0) < 1e-9 && !rep.realizable;
            char line[200];
            std::snprintf(line, sizeof line,
                          "linear fixture: team=(%g, %g) welfare=%g -> %s",
                          team.allocations.at("a1"), team.allocations.at("a2"), team.welfare,
                          rep.realizable ? "realizable (unexpected)" : "not price-realizable");
            report(ok, line);
        }
        // random strictly concave fixture: mechanism matches the team oracle
        {
            Rng rng(20240816u);
            std::vector<market::ValuedAgent> agents;
            double amax_sum = 0.0;
            for (int i = 0; i < 25; ++i) {
                const double curv = -rng.uniform(0.1, 2.0);
                const double slope = rng.uniform(0.5, 3.0);
                const double amax = rng.uniform(0.5, 2.0);
                amax_sum += amax;
                agents.push_back({"r" + std::to_string(i), {curv, slope, amax}});
            }
            const auto cost = market::CostModel::quadratic(0.2, 0.05);
            const double cap = 0.5 * amax_sum;
            const auto team = market::solve_team_problem(agents, cost, cap);
            const auto res = market::clear_functional(agents, cost, cap);
            const auto rep = market::verify_realization(team, res, agents, cost);
            const bool ok = rep.realizable && std::fabs(rep.welfare_gap) <
                                                  1e-6 * std::max(1.0, std::fabs(team.welfare));
            char line[160];
            std::snprintf(line, sizeof line, "random concave fixture: welfare gap %.3g",
                          rep.welfare_gap);
            report(ok, line);
        }
        // one congested period of the configured scenario population
        {
            std::ifstream cf(config_path);
            if (!cf) {
                std::cerr << "error: cannot open config file: " << config_path << "\n";
                return 2;
            }
            const json j = json::parse(cf);
            scenario::ScenarioConfig cfg = config_from_json(j);
            auto houses = scenario::synthesize_population(cfg.n_households, cfg.seed,
                                                          cfg.period_minutes);
            std::vector<market::ValuedAgent> agents;
            double amax_sum = 0.0;
            for (const auto& h : houses) {
                agents.push_back({h.id, h.valuation});
                amax_sum += h.valuation.a_max;
            }
            const auto cost = market::CostModel::linear(0.02);
            const double cap = 0.6 * amax_sum;
            const auto team = market::solve_team_problem(agents, cost, cap);
            const auto res = market::clear_functional(agents, cost, cap);
            const auto rep = market::verify_realization(team, res, agents, cost);
            const bool ok = rep.realizable && res.congested &&
                            std::fabs(rep.welfare_gap) <
                                1e-6 * std::max(1.0, std::fabs(team.welfare));
            char line[200];
            std::snprintf(line, sizeof line,
                          "scenario population, congested period: price %.5g, welfare gap %.3g",
                          res.price, rep.welfare_gap);
            report(ok, line);
        }
        return failures == 0 ? 0 : 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}

} // namespace tclmarket::cli
