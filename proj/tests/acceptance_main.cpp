// Acceptance suite: one check per release criterion, each printed as a
// single PASS/FAIL line with the measured numbers. The process exits
// non-zero if any criterion fails.

#include <chrono>
#include <cstdio>
#include <string>
#include <vector>

#include "oracles.hpp"
#include "tclmarket/scenario.hpp"

using namespace tclmarket;
using Clock = std::chrono::steady_clock;

namespace {

int g_failures = 0;

double seconds_since(Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

void report(bool ok, const std::string& name, const std::string& detail) {
    std::printf("[%s] %-28s %s\n", ok ? "PASS" : "FAIL", name.c_str(), detail.c_str());
    std::fflush(stdout);
    if (!ok) ++g_failures;
}

const std::string kData = std::string(TCLMARKET_SOURCE_DIR) + "/data";

scenario::ScenarioConfig desk_config() {
    scenario::ScenarioConfig cfg;
    cfg.n_households = 100;
    cfg.weather_path = kData + "/weather_hot_day.csv";
    cfg.price_path = kData + "/prices_day.csv";
    cfg.seed = 42;
    return cfg;
}

// ---------------------------------------------------------------------------

void criterion_integer_fixture() {
    const auto t0 = Clock::now();
    std::vector<market::ValuedAgent> agents;
    for (int i = 1; i <= 100; ++i)
        agents.push_back({"a" + std::to_string(i), {-1.0, static_cast<double>(i), 1.0}});
    const auto res = market::clear_functional(agents, market::CostModel::linear(20.0), 50.0);
    const double dt = seconds_since(t0);
    char buf[160];
    const bool ok = res.p_bar && *res.p_bar == 50.0 && res.price == 50.0 && dt < 1.0;
    std::snprintf(buf, sizeof buf, "P_bar=%.17g P_c*=%.17g (want exactly 50, 50), %.3fs",
                  res.p_bar ? *res.p_bar : -1.0, res.price, dt);
    report(ok, "hundred-agent clearing", buf);
}

void criterion_linear_fixture() {
    const auto t0 = Clock::now();
    std::vector<market::ValuedAgent> agents{{"a1", {0.0, 1.0, 2.0}}, {"a2", {0.0, 3.0, 2.0}}};
    const auto cost = market::CostModel::linear(2.0);
    const auto team = market::solve_team_problem(agents, cost, 1.0);
    const auto res = market::clear_functional(agents, cost, 1.0);
    const auto rep = market::verify_realization(team, res, agents, cost);
    const double dt = seconds_since(t0);
    const bool ok = std::fabs(team.allocations.at("a1")) < 1e-9 &&
                    std::fabs(team.allocations.at("a2") - 1.0) < 1e-9 &&
                    std::fabs(team.welfare - 1.0) < 1e-9 && !rep.realizable && dt < 1.0;
    char buf[200];
    std::snprintf(buf, sizeof buf,
                  "team=(%.3g, %.3g) welfare=%.6g, %s, %.3fs", team.allocations.at("a1"),
                  team.allocations.at("a2"), team.welfare,
                  rep.realizable ? "realizable (unexpected)" : "not price-realizable", dt);
    report(ok, "two-agent team fixture", buf);
}

void criterion_team_optimality() {
    const auto t0 = Clock::now();
    Rng rng(1234);
    double worst_rel = 0.0, worst_alloc = 0.0;
    int pops = 0;
    for (int rep = 0; rep < 500; ++rep) {
        const int n = 5 + static_cast<int>(rng.uniform_int(0, 45));
        std::vector<market::ValuedAgent> agents;
        double amax_sum = 0.0;
        for (int i = 0; i < n; ++i) {
            const double amax = rng.uniform(0.3, 2.0);
            amax_sum += amax;
            agents.push_back({"g" + std::to_string(i),
                              {-rng.uniform(0.1, 2.0), rng.uniform(0.5, 3.0), amax}});
        }
        const auto cost = rng.bernoulli(0.5)
                              ? market::CostModel::linear(rng.uniform(0.1, 1.0))
                              : market::CostModel::quadratic(rng.uniform(0.1, 0.6),
                                                             rng.uniform(0.02, 0.4));
        const double cap = rng.uniform(0.2, 0.9) * amax_sum;
        const auto team = market::solve_team_problem(agents, cost, cap);
        const auto res = market::clear_functional(agents, cost, cap);
        const double w_mech = market::welfare(res.allocations, agents, cost);
        worst_rel = std::max(worst_rel, std::fabs(team.welfare - w_mech) /
                                            std::max(1.0, std::fabs(team.welfare)));
        for (const auto& a : agents) {
            const double dev = std::fabs(team.allocations.at(a.id) - res.allocations.at(a.id));
            worst_alloc = std::max(worst_alloc, dev / a.v.a_max);
        }
        ++pops;
    }
    const double dt = seconds_since(t0);
    const bool ok = worst_rel < 1e-6 && worst_alloc < 1e-6 && dt < 60.0;
    char buf[200];
    std::snprintf(buf, sizeof buf,
                  "%d populations, worst welfare gap %.2e rel, worst allocation dev %.2e of a_max, %.1fs",
                  pops, worst_rel, worst_alloc, dt);
    report(ok, "team-optimal equivalence", buf);
}

void criterion_capacity_capping() {
    const auto t0 = Clock::now();
    const auto r = scenario::run_scenario(desk_config());
    int congested = 0, capped = 0;
    double worst_gap = 0.0;
    for (const auto& p : r.periods) {
        congested += p.clearing.congested ? 1 : 0;
        if (p.realized_kw <= r.capacity_kw + 1e-6) ++capped;
        worst_gap = std::max(worst_gap, std::fabs(p.cleared_kw - p.realized_kw));
    }
    const bool ok = capped == static_cast<int>(r.periods.size()) && congested > 0 &&
                    worst_gap <= r.max_rated_kw + 1e-6;
    char buf[220];
    std::snprintf(buf, sizeof buf,
                  "capped %d/%zu periods (%d congested), |cleared-realized| max %.3g kW vs max rated %.3g kW, %.1fs",
                  capped, r.periods.size(), congested, worst_gap, r.max_rated_kw,
                  seconds_since(t0));
    report(ok, "capacity capping", buf);
}

void criterion_perturbed_bids() {
    const auto t0 = Clock::now();
    auto cfg = desk_config();
    cfg.bidding = scenario::ScenarioConfig::Bidding::perturbed;
    cfg.perturb_pct = 2.0;
    const auto r = scenario::run_scenario(cfg);
    const double capped = r.capped_fraction();
    const double overshoot = r.max_overshoot_pct();
    const bool ok = overshoot <= 5.0;
    char buf[200];
    std::snprintf(buf, sizeof buf,
                  "2%% bid error: capped %.1f%% of periods, max overshoot %.2f%% of capacity, %.1fs",
                  capped * 100.0, overshoot, seconds_since(t0));
    report(ok, "perturbed-bid robustness", buf);
}

struct EmScore {
    double mean10 = 0.0, mean50 = 0.0, mean_unif = 0.0;
};

EmScore em_accuracy_run() {
    Rng rng(20090816);
    const int N = 50;
    EmScore score;
    const agent::PriceStats stats{0.05, 0.015, 288};
    for (int trial = 0; trial < N; ++trial) {
        auto houses = scenario::synthesize_population(1, 5000 + trial);
        auto& h = houses[0];
        scenario::refresh_drives(h, 92.0, 1.5);
        const Mat2 G{h.coupling.ua_over_ca, h.coupling.fs_over_ca, 0.0,
                     h.coupling.mass_solar_over_cm};
        const Vec2 g_on{h.coupling.qint_over_ca - h.coupling.qhvac_over_ca, 0.0};
        const Vec2 g_off{h.coupling.qint_over_ca, 0.0};
        const auto truth = estimation::exact_discretization(
            h.params.a_matrix, G, g_on, g_off, 1.0 / 60.0, Mat2::diag(4e-4, 1e-4), 2.5e-3,
            h.state.eta, Mat2::diag(0.04, 0.04));
        const double setp = h.prefs.t_desired, half = 0.5;
        const auto exog_at = [&](int k) {
            const double hh = k / 60.0;
            return Vec2{88.0 + 6.0 * std::sin(2 * M_PI * (hh - 10) / 24.0) +
                            0.8 * std::sin(2 * M_PI * k / 83.0),
                        std::max(0.0, 1.6 + 0.9 * std::sin(M_PI * hh / 12.0 + 0.7) +
                                          0.25 * std::sin(2 * M_PI * k / 37.0))};
        };
        bool relay = h.state.on;
        const auto mode_at = [&](int, const Vec2& eta) {
            if (eta.v0 >= setp + half) relay = true;
            else if (eta.v0 <= setp - half) relay = false;
            return relay;
        };
        auto sim = oracles::simulate_model(truth, 360, rng, exog_at, mode_at);
        // matched-variance uniform noise variant
        auto simu = [&]() {
            oracles::SimulatedLog s2;
            Vec2 eta = truth.m0;
            bool on = h.state.on;
            const double a1 = std::sqrt(3 * 4e-4), a2 = std::sqrt(3 * 1e-4),
                         av = std::sqrt(3 * 2.5e-3);
            for (int k = 0; k < 360; ++k) {
                const Vec2 z = exog_at(k);
                s2.log.temps.push_back(eta.v0 + rng.uniform(-av, av));
                s2.log.modes.push_back(on ? 1 : 0);
                s2.log.exog.push_back(z);
                eta = truth.a_bar * eta + truth.drive(z, on) +
                      Vec2{rng.uniform(-a1, a1), rng.uniform(-a2, a2)};
                if (eta.v0 >= setp + half) on = true;
                else if (eta.v0 <= setp - half) on = false;
            }
            return s2;
        }();
        const auto tb =
            estimation::bid_from_estimate(truth, sim.log, h.prefs, stats, 1.0, 1.0);
        const auto tbu =
            estimation::bid_from_estimate(truth, simu.log, h.prefs, stats, 1.0, 1.0);
        const auto perturb = [&](double pct) {
            auto cand = truth;
            const auto pm = [&](double x) { return x * rng.uniform(1.0 - pct, 1.0 + pct); };
            cand.a_bar = {pm(truth.a_bar.a), pm(truth.a_bar.b), pm(truth.a_bar.c),
                          pm(truth.a_bar.d)};
            cand.b_bar = {pm(truth.b_bar.a), pm(truth.b_bar.b), pm(truth.b_bar.c),
                          pm(truth.b_bar.d)};
            cand.c_on = {pm(truth.c_on.v0), pm(truth.c_on.v1)};
            cand.c_off = {pm(truth.c_off.v0), pm(truth.c_off.v1)};
            cand.q_cov = truth.q_cov * rng.uniform(1.0 - pct, 1.0 + pct);
            cand.r_var = pm(truth.r_var);
            cand.m0 = {pm(truth.m0.v0), pm(truth.m0.v1)};
            cand.p0 = truth.p0 * rng.uniform(1.0 - pct, 1.0 + pct);
            return cand;
        };
        const auto err_of = [&](const estimation::MeasurementLog& log, double pct, double tp,
                                int salt) {
            const auto em = estimation::em_fit_multistart(log, perturb(pct), 8,
                                                          1234567u * trial + salt, 2000, 1e-11);
            const auto bid = estimation::bid_from_estimate(em.model, log, h.prefs, stats, 1.0, 1.0);
            return std::fabs(bid.price - tp) / tp * 100.0;
        };
        score.mean10 += err_of(sim.log, 0.10, tb.price, 1) / N;
        score.mean50 += err_of(sim.log, 0.50, tb.price, 2) / N;
        score.mean_unif += err_of(simu.log, 0.10, tbu.price, 3) / N;
    }
    return score;
}

void criterion_em_accuracy() {
    const auto t0 = Clock::now();
    const EmScore s = em_accuracy_run();
    const double dt = seconds_since(t0);
    const bool ok = s.mean10 < 1.0 && s.mean50 < 1.0 && s.mean_unif < 2.0 && dt < 600.0;
    char buf[220];
    std::snprintf(buf, sizeof buf,
                  "mean |bid error|: %.3f%% (10%% init), %.3f%% (50%% init), %.3f%% (uniform noise); %.0fs",
                  s.mean10, s.mean50, s.mean_unif, dt);
    report(ok, "estimation accuracy", buf);
}

void criterion_em_internals() {
    const auto t0 = Clock::now();
    Rng rng(24601);
    // monotone log-likelihood over 100 random fits
    double worst_drop = 0.0;
    for (int trial = 0; trial < 100; ++trial) {
        estimation::UncertainModel gen;
        const double th = rng.uniform(0.0, 6.28);
        const Mat2 R{std::cos(th), -std::sin(th), std::sin(th), std::cos(th)};
        gen.a_bar = R * Mat2::diag(rng.uniform(0.5, 0.92), rng.uniform(0.5, 0.92)) * R.transpose();
        gen.b_bar = {rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)};
        gen.c_on = {rng.uniform(-2, 2), rng.uniform(-2, 2)};
        gen.c_off = {rng.uniform(-2, 2), rng.uniform(-2, 2)};
        const double q12 = rng.uniform(-0.1, 0.1);
        gen.q_cov = {rng.uniform(0.2, 0.8), q12, q12, rng.uniform(0.2, 0.8)};
        gen.r_var = rng.uniform(0.1, 0.5);
        gen.m0 = {rng.uniform(-2, 2), rng.uniform(-2, 2)};
        gen.p0 = Mat2::diag(rng.uniform(0.3, 1.0), rng.uniform(0.3, 1.0));
        auto sim = oracles::simulate_model(
            gen, 60, rng, [&](int) { return Vec2{rng.uniform(-1, 1), rng.uniform(-1, 1)}; },
            [&](int, const Vec2&) { return rng.bernoulli(0.5); });
        auto init = gen;
        const auto pm = [&](double x) { return x * rng.uniform(0.9, 1.1); };
        init.a_bar = {pm(gen.a_bar.a), pm(gen.a_bar.b), pm(gen.a_bar.c), pm(gen.a_bar.d)};
        init.c_on = {pm(gen.c_on.v0), pm(gen.c_on.v1)};
        init.c_off = {pm(gen.c_off.v0), pm(gen.c_off.v1)};
        const auto em = estimation::em_fit(sim.log, init, 80, 1e-12);
        worst_drop = std::max(worst_drop, em.max_loglik_drop);
    }
    // filter/smoother versus dense conditioning at M <= 5
    double worst_post = 0.0;
    for (int trial = 0; trial < 40; ++trial) {
        estimation::UncertainModel m;
        const double th = rng.uniform(0.0, 6.28);
        const Mat2 R{std::cos(th), -std::sin(th), std::sin(th), std::cos(th)};
        m.a_bar = R * Mat2::diag(rng.uniform(0.5, 0.95), rng.uniform(0.5, 0.95)) * R.transpose();
        m.b_bar = {rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)};
        m.c_on = {rng.uniform(-2, 2), rng.uniform(-2, 2)};
        m.c_off = {rng.uniform(-2, 2), rng.uniform(-2, 2)};
        m.q_cov = Mat2::diag(rng.uniform(0.1, 1.0), rng.uniform(0.1, 1.0));
        m.r_var = rng.uniform(0.05, 0.5);
        m.m0 = {rng.uniform(-3, 3), rng.uniform(-3, 3)};
        m.p0 = Mat2::diag(rng.uniform(0.2, 1.0), rng.uniform(0.2, 1.0));
        estimation::MeasurementLog log;
        const int n = 3 + static_cast<int>(rng.uniform_int(0, 2));
        for (int k = 0; k < n; ++k) {
            log.temps.push_back(rng.uniform(-3, 3));
            log.modes.push_back(rng.bernoulli(0.5) ? 1 : 0);
            log.exog.push_back({rng.uniform(-1, 1), rng.uniform(-1, 1)});
        }
        const auto f = estimation::kalman_filter(m, log);
        const auto s = estimation::kalman_smoother(f, m, log);
        const auto o = oracles::joint_gaussian_condition(m, log);
        worst_post = std::max(worst_post, std::fabs(f.loglik - o.loglik));
        for (int k = 0; k < n; ++k) {
            worst_post = std::max(worst_post, (s.means[k] - o.means[k]).norm());
            worst_post = std::max(worst_post, (s.covs[k] - o.covs[k]).max_abs());
            if (k > 0)
                worst_post = std::max(worst_post, (s.pairwise[k] - o.pairwise[k]).max_abs());
        }
    }
    const bool ok = worst_drop <= 1e-9 && worst_post < 1e-9;
    char buf[200];
    std::snprintf(buf, sizeof buf,
                  "100 fits: worst log-lik drop %.2e; brute-force posterior gap %.2e; %.1fs",
                  worst_drop, worst_post, seconds_since(t0));
    report(ok, "estimation internals", buf);
}

void criterion_influence_index() {
    const auto t0 = Clock::now();
    const auto idx = scenario::influence_index({200, 500}, 7, 20);
    const double at200 = idx[0].second;
    const double at500 = idx[1].second;
    const double dt = seconds_since(t0);
    const bool ok = at200 < 1.0 && at500 < 0.4 && dt < 300.0;
    char buf[160];
    std::snprintf(buf, sizeof buf, "index(n=200)=%.3f%% (<1%%), index(n=500)=%.3f%% (<0.4%%), %.1fs",
                  at200, at500, dt);
    report(ok, "influence index", buf);
}

void criterion_welfare_dominance() {
    const auto t0 = Clock::now();
    auto cfg = desk_config();
    const double gamma = scenario::find_min_capping_gamma(cfg);
    // compare per period against the fixed-ratio counterfactual on the same
    // bids, escalating gamma until the counterfactual respects capacity
    double g = gamma;
    int congested = 0, violations = 0;
    double worst = 1e18;
    for (;; g += 0.05) {
        auto c2 = cfg;
        c2.counterfactual_gamma = g;
        const auto r = scenario::run_scenario(c2);
        int cf_over = 0;
        congested = 0;
        violations = 0;
        worst = 1e18;
        for (const auto& p : r.periods) {
            if (p.fixed_gamma_served_kw + r.unresponsive_kw > r.capacity_kw + 1e-9) ++cf_over;
            if (!p.clearing.congested) continue;
            ++congested;
            const double gap = p.welfare - p.welfare_fixed_gamma;
            worst = std::min(worst, gap);
            if (gap < -1e-9) ++violations;
        }
        if (cf_over == 0 || g > 4.0) break;
    }
    const bool ok = violations == 0 && congested > 0;
    char buf[220];
    std::snprintf(buf, sizeof buf,
                  "gamma=%.2f: mechanism >= baseline in %d/%d congested periods, min gap %.3g, %.1fs",
                  g, congested - violations, congested, worst, seconds_since(t0));
    report(ok, "welfare dominance", buf);
}

void criterion_thermal_oracle() {
    const auto t0 = Clock::now();
    Rng rng(5555);
    double worst = 0.0;
    for (int i = 0; i < 1000; ++i) {
        const auto p = oracles::random_etp(rng);
        const auto s = oracles::random_state(rng);
        const double u = rng.uniform(70.0, 76.0);
        const auto closed = thermal::simulate_period(s, u, p);
        const auto fine = oracles::hybrid_fine(s, u, p);
        const double e_max = p.rated_power * p.period;
        worst = std::max(worst, std::fabs(closed.energy_kwh - fine.energy_kwh) / e_max);
    }
    const bool ok = worst < 0.005;
    char buf[160];
    std::snprintf(buf, sizeof buf, "1000 instances, worst energy gap %.4f%% of E_max, %.1fs",
                  worst * 100.0, seconds_since(t0));
    report(ok, "thermal closed form", buf);
}

} // namespace

int main() {
    const auto t0 = Clock::now();
    criterion_integer_fixture();
    criterion_linear_fixture();
    criterion_team_optimality();
    criterion_capacity_capping();
    criterion_perturbed_bids();
    criterion_em_accuracy();
    criterion_em_internals();
    criterion_influence_index();
    criterion_welfare_dominance();
    criterion_thermal_oracle();
    std::printf("%s: %d failure(s), %.0fs total\n", g_failures == 0 ? "ACCEPTED" : "REJECTED",
                g_failures, seconds_since(t0));
    return g_failures == 0 ? 0 : 1;
}
