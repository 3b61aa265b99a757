#pragma once

#include <algorithm>
#include <cstdio>
#include <deque>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "tclmarket/estimation.hpp"
#include "tclmarket/market.hpp"

namespace tclmarket::scenario {

// ---------------------------------------------------------------------------
// timestamps and csv plumbing

namespace detail {

// days since 1970-01-01 (Gregorian), Hinnant's algorithm
inline std::int64_t days_from_civil(int y, int m, int d) {
    y -= m <= 2;
    const std::int64_t era = (y >= 0 ? y : y - 399) / 400;
    const unsigned yoe = static_cast<unsigned>(y - era * 400);
    const unsigned doy = (153u * (m + (m > 2 ? -3 : 9)) + 2u) / 5u + d - 1u;
    const unsigned doe = yoe * 365 + yoe / 4 - yoe / 100 + doy;
    return era * 146097 + static_cast<std::int64_t>(doe) - 719468;
}

inline std::int64_t parse_iso_minutes(const std::string& ts) {
    int y, mo, d, h, mi, s = 0;
    const int got = std::sscanf(ts.c_str(), "%d-%d-%dT%d:%d:%d", &y, &mo, &d, &h, &mi, &s);
    if (got < 5)
        throw SchemaError("bad timestamp '" + ts + "', expected ISO like 2009-08-16T00:00:00");
    return days_from_civil(y, mo, d) * 1440 + h * 60 + mi;
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : line) {
        if (c == ',') {
            out.push_back(cur);
            cur.clear();
        } else if (c != '\r') {
            cur += c;
        }
    }
    out.push_back(cur);
    return out;
}

inline double to_double(const std::string& s, const std::string& what) {
    try {
        std::size_t pos = 0;
        const double v = std::stod(s, &pos);
        if (pos != s.size()) throw std::invalid_argument(s);
        return v;
    } catch (const std::exception&) {
        throw SchemaError("cannot parse " + what + " from '" + s + "'");
    }
}

inline std::ifstream open_or_throw(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataGap("cannot open file: " + path);
    return in;
}

} // namespace detail

// ---------------------------------------------------------------------------
// ingested series

constexpr double kBtuPerKwh = 3412.14;

// 1-minute cadence outdoor temperature and solar gain, linearly interpolated
// between samples.
struct WeatherSeries {
    std::int64_t start_minute = 0;
    std::vector<double> outdoor_f;
    std::vector<double> solar_kw;

    std::size_t size() const { return outdoor_f.size(); }

    double interp(const std::vector<double>& v, double minute) const {
        if (v.empty()) throw DataGap("weather series is empty");
        if (minute <= 0.0) return v.front();
        const double last = static_cast<double>(v.size() - 1);
        if (minute >= last) return v.back();
        const std::size_t i = static_cast<std::size_t>(minute);
        const double f = minute - static_cast<double>(i);
        return v[i] * (1.0 - f) + v[i + 1] * f;
    }
    double outdoor_at(double minute) const { return interp(outdoor_f, minute); }
    double solar_at(double minute) const { return interp(solar_kw, minute); }
};

// base price at the market cadence, step-held within a period
struct PriceSeries {
    std::int64_t start_minute = 0;
    int period_minutes = 5;
    std::vector<double> base_price;

    std::size_t size() const { return base_price.size(); }
    double at(std::size_t k) const {
        if (k >= base_price.size())
            throw DataGap("price series ends before period " + std::to_string(k));
        return base_price[k];
    }
};

// schema: timestamp_iso,outdoor_F,solar_gain_btu_per_h at 1-minute cadence
inline WeatherSeries ingest_weather(const std::string& path) {
    auto in = detail::open_or_throw(path);
    std::string line;
    if (!std::getline(in, line)) throw SchemaError("weather file has no header: " + path);
    const auto hdr = detail::split_csv_line(line);
    if (hdr.size() != 3 || hdr[0] != "timestamp_iso" || hdr[1] != "outdoor_F" ||
        hdr[2] != "solar_gain_btu_per_h")
        throw SchemaError("weather header mismatch in " + path +
                          ", expected timestamp_iso,outdoor_F,solar_gain_btu_per_h");
    WeatherSeries ws;
    std::int64_t expect = 0;
    bool first = true;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const auto cols = detail::split_csv_line(line);
        if (cols.size() != 3) throw SchemaError("weather row with wrong column count: " + line);
        const std::int64_t t = detail::parse_iso_minutes(cols[0]);
        if (first) {
            ws.start_minute = t;
            expect = t;
            first = false;
        }
        if (t != expect)
            throw DataGap("weather gap: expected minute entry at " + cols[0] + " offset " +
                          std::to_string(expect - ws.start_minute) + ", got offset " +
                          std::to_string(t - ws.start_minute));
        ws.outdoor_f.push_back(detail::to_double(cols[1], "outdoor_F"));
        ws.solar_kw.push_back(detail::to_double(cols[2], "solar_gain_btu_per_h") / kBtuPerKwh);
        ++expect;
    }
    if (ws.outdoor_f.empty()) throw SchemaError("weather file has no rows: " + path);
    return ws;
}

// schema: timestamp_iso,base_price_usd_per_kwh at the market cadence
inline PriceSeries ingest_prices(const std::string& path, int period_minutes = 5) {
    auto in = detail::open_or_throw(path);
    std::string line;
    if (!std::getline(in, line)) throw SchemaError("price file has no header: " + path);
    const auto hdr = detail::split_csv_line(line);
    if (hdr.size() != 2 || hdr[0] != "timestamp_iso" || hdr[1] != "base_price_usd_per_kwh")
        throw SchemaError("price header mismatch in " + path +
                          ", expected timestamp_iso,base_price_usd_per_kwh");
    PriceSeries ps;
    ps.period_minutes = period_minutes;
    std::int64_t expect = 0;
    bool first = true;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const auto cols = detail::split_csv_line(line);
        if (cols.size() != 2) throw SchemaError("price row with wrong column count: " + line);
        const std::int64_t t = detail::parse_iso_minutes(cols[0]);
        if (first) {
            ps.start_minute = t;
            expect = t;
            first = false;
        }
        if (t != expect)
            throw DataGap("price gap: expected period entry at offset " +
                          std::to_string(expect - ps.start_minute) + " min, got " + cols[0]);
        ps.base_price.push_back(detail::to_double(cols[1], "base_price_usd_per_kwh"));
        expect += period_minutes;
    }
    if (ps.base_price.empty()) throw SchemaError("price file has no rows: " + path);
    return ps;
}

// ---------------------------------------------------------------------------
// households

// Linear weather coupling of the affine drives: the air node sees outdoor
// temperature through ua/ca, solar through fs/ca and the compressor through
// qhvac/ca; the mass node sees the remaining solar fraction.
struct WeatherCoupling {
    double ua_over_ca = 0.0;
    double fs_over_ca = 0.0;
    double mass_solar_over_cm = 0.0;
    double qint_over_ca = 0.0;
    double qhvac_over_ca = 0.0;
};

struct Household {
    std::string id;
    thermal::EtpParams params;
    WeatherCoupling coupling;
    agent::UserPrefs prefs;
    agent::QuadraticValuation valuation;
    thermal::HybridState state;
    double q_measured = 0.0;  // kW, most recent on-cycle average power
};

inline void refresh_drives(Household& h, double outdoor_f, double solar_kw) {
    const auto& c = h.coupling;
    const double air_common = c.ua_over_ca * outdoor_f + c.fs_over_ca * solar_kw + c.qint_over_ca;
    const double mass = c.mass_solar_over_cm * solar_kw;
    h.params.b_on = {air_common - c.qhvac_over_ca, mass};
    h.params.b_off = {air_common, mass};
}

struct ScenarioConfig {
    int n_households = 100;
    double feeder_capacity_kw = -1.0;  // <= 0: unresponsive + 60% of aggregate rated power
    double unresponsive_kw = -1.0;     // < 0: 12 kW per household
    int period_minutes = 5;
    double horizon_hours = 24.0;
    std::string weather_path;
    std::string price_path;
    std::string population_path;  // optional; synthesized when empty
    std::uint64_t seed = 1;

    enum class Bidding { known_params, output_based, perturbed };
    Bidding bidding = Bidding::known_params;
    double perturb_pct = 2.0;

    enum class Pricing { mechanism, rtp, fixed_ratio };
    Pricing pricing = Pricing::mechanism;
    double gamma = 2.6;

    double obs_noise_f = 0.05;  // measurement noise for output-based logs
    bool capture_states = false;

    // > 0: record, for each period, the welfare a fixed-ratio price would
    // have produced on the same bids and states
    double counterfactual_gamma = 0.0;

    void validate() const {
        if (n_households < 1) throw ConfigError("ScenarioConfig: n_households must be >= 1");
        if (period_minutes < 1) throw ConfigError("ScenarioConfig: period_minutes must be >= 1");
        if (horizon_hours <= 0.0) throw ConfigError("ScenarioConfig: horizon_hours must be > 0");
        if (pricing == Pricing::fixed_ratio && gamma < 1.0)
            throw ConfigError("ScenarioConfig: gamma must be >= 1");
        if (feeder_capacity_kw > 0.0 && unresponsive_kw >= 0.0 &&
            feeder_capacity_kw <= unresponsive_kw)
            throw ConfigError("ScenarioConfig: feeder capacity must exceed unresponsive power");
    }
};

// Population draw. All ranges are uniform; the ETP matrix built from the
// structural parameters is Hurwitz by construction but every draw is still
// validated and resampled on violation.
inline std::vector<Household> synthesize_population(int n, std::uint64_t seed,
                                                    int period_minutes = 5) {
    if (n < 1) throw ConfigError("synthesize_population: n must be >= 1");
    Rng rng(seed);
    std::vector<Household> out;
    out.reserve(n);
    const double period_h = period_minutes / 60.0;
    for (int i = 0; i < n; ++i) {
        for (int attempt = 0;; ++attempt) {
            if (attempt >= 1000)
                throw NonConvergence("synthesize_population: household " + std::to_string(i) +
                                     " failed invariants after 1000 attempts");
            const double ua = rng.uniform(0.18, 0.30);   // kW/degF
            const double hm = rng.uniform(1.2, 2.4);     // kW/degF
            const double ca = rng.uniform(0.13, 0.22);   // kWh/degF
            const double cm = rng.uniform(2.0, 3.5);     // kWh/degF
            const double rated = rng.uniform(3.0, 4.5);  // kW electric
            const double cop = rng.uniform(2.6, 3.2);
            const double fsolar = rng.uniform(0.4, 0.6);
            const double qint = rng.uniform(0.2, 0.5);  // kW
            const double t_desired = rng.uniform(70.0, 76.0);
            const double t_min = t_desired - rng.uniform(1.5, 3.5);
            const double t_max = t_desired + rng.uniform(2.0, 5.0);
            const double k_slider = rng.uniform(0.6, 2.0);
            const double v_curv = -rng.uniform(0.01, 0.05);
            const double v_slope = rng.uniform(0.04, 0.09);
            const double air0 = t_desired + rng.uniform(-0.5, 0.5);
            const double mass0 = air0 + rng.uniform(0.0, 2.0);
            const bool on0 = rng.bernoulli(0.5);

            Household h;
            char idbuf[16];
            std::snprintf(idbuf, sizeof idbuf, "h%04d", i);
            h.id = idbuf;
            h.params.a_matrix = {-(ua + hm) / ca, hm / ca, hm / cm, -hm / cm};
            h.params.deadband = 1.0;
            h.params.rated_power = rated;
            h.params.period = period_h;
            h.coupling = {ua / ca, fsolar / ca, (1.0 - fsolar) / cm, qint / ca,
                          cop * rated / ca};
            refresh_drives(h, 95.0, 1.0);
            h.prefs = {t_min, t_desired, t_max, std::min(k_slider, 3.0)};
            h.valuation = {v_curv, v_slope, rated * period_h};
            h.state = {{air0, mass0}, on0};
            h.q_measured = rated;
            try {
                h.params.validate();
                h.prefs.validate();
                h.valuation.validate();
            } catch (const Error&) {
                continue;
            }
            out.push_back(std::move(h));
            break;
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// price history statistics

// Devices see the coordinator's rolling clearing-price statistics. Until a
// full window has accumulated, the seeded base-price statistics stand in.
class PriceTracker {
  public:
    PriceTracker(double seed_avg, double seed_sigma, int window = 288)
        : seed_avg_(seed_avg), seed_sigma_(seed_sigma), window_(window) {}

    static PriceTracker seeded_from(const PriceSeries& prices, int window = 288) {
        const std::size_t n = std::min<std::size_t>(prices.size(), static_cast<std::size_t>(window));
        double mean = 0.0;
        for (std::size_t i = 0; i < n; ++i) mean += prices.base_price[i];
        mean /= static_cast<double>(n);
        double var = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            const double d = prices.base_price[i] - mean;
            var += d * d;
        }
        var /= static_cast<double>(n);
        return PriceTracker(mean, std::sqrt(var), window);
    }

    agent::PriceStats current() const {
        if (static_cast<int>(history_.size()) < window_)
            return {seed_avg_, seed_sigma_, window_};
        double mean = 0.0;
        for (double p : history_) mean += p;
        mean /= static_cast<double>(history_.size());
        double var = 0.0;
        for (double p : history_) {
            const double d = p - mean;
            var += d * d;
        }
        var /= static_cast<double>(history_.size());
        return {mean, std::sqrt(var), window_};
    }

    void push(double clearing_price) {
        history_.push_back(clearing_price);
        while (static_cast<int>(history_.size()) > window_) history_.pop_front();
    }

  private:
    double seed_avg_;
    double seed_sigma_;
    int window_;
    std::deque<double> history_;
};

// ---------------------------------------------------------------------------
// the market loop

struct PeriodRecord {
    int index = 0;
    market::ClearingResult clearing;
    double base_price = 0.0;
    double cleared_kw = 0.0;   // unresponsive + served bid power
    double realized_kw = 0.0;  // unresponsive + simulated consumption
    double welfare = 0.0;      // bid-revealed surplus minus procurement cost

    // counterfactual fixed-ratio pricing on the same bids (when enabled)
    double welfare_fixed_gamma = 0.0;
    double fixed_gamma_served_kw = 0.0;
};

struct LoadSnapshot {
    double air_f = 0.0;
    double mass_f = 0.0;
    bool on = false;
};

struct ScenarioResult {
    std::vector<PeriodRecord> periods;
    double capacity_kw = 0.0;
    double unresponsive_kw = 0.0;
    double max_rated_kw = 0.0;
    std::vector<std::vector<LoadSnapshot>> snapshots;  // per period when captured

    double capped_fraction() const {
        if (periods.empty()) return 1.0;
        std::size_t ok = 0;
        for (const auto& p : periods)
            if (p.realized_kw <= capacity_kw + 1e-9) ++ok;
        return static_cast<double>(ok) / static_cast<double>(periods.size());
    }
    double max_overshoot_pct() const {
        double worst = 0.0;
        for (const auto& p : periods)
            worst = std::max(worst, (p.realized_kw - capacity_kw) / capacity_kw * 100.0);
        return std::max(0.0, worst);
    }
};

namespace detail {

// Device-side response to the broadcast price: follow the cleared
// allocation. A served device pins its setpoint low enough to run the whole
// period; an unserved one pins it high enough to stay off, including margin
// for the off-mode rebound. The response curve decides where inside those
// branches the setpoint lands.
inline double response_setpoint(const Household& h, double clearing_price, double own_bid_price,
                                const agent::PriceStats& stats) {
    const double curve = agent::setpoint_from_price(clearing_price, h.prefs, stats);
    const auto sp = agent::allocation_setpoints(h.state, h.params);
    const bool served = own_bid_price > clearing_price;
    return served ? std::min(curve, sp.full_threshold) : std::max(curve, sp.zero_threshold);
}

} // namespace detail

// Core loop over pre-built inputs; run_scenario wraps it with file loading.
inline ScenarioResult run_scenario_with(const ScenarioConfig& cfg, std::vector<Household> houses,
                                        const WeatherSeries& weather, const PriceSeries& prices) {
    cfg.validate();
    const int n = static_cast<int>(houses.size());
    const double period_h = cfg.period_minutes / 60.0;
    const int n_periods = static_cast<int>(std::llround(cfg.horizon_hours * 60.0)) /
                          cfg.period_minutes;
    const int horizon_minutes = n_periods * cfg.period_minutes;
    if (static_cast<int>(weather.size()) < horizon_minutes)
        throw DataGap("weather series covers " + std::to_string(weather.size()) +
                      " min, horizon needs " + std::to_string(horizon_minutes));
    if (static_cast<int>(prices.size()) < n_periods)
        throw DataGap("price series covers " + std::to_string(prices.size()) +
                      " periods, horizon needs " + std::to_string(n_periods));

    ScenarioResult out;
    out.unresponsive_kw = cfg.unresponsive_kw < 0.0 ? 12.0 * n : cfg.unresponsive_kw;
    double rated_sum = 0.0;
    for (const auto& h : houses) {
        rated_sum += h.params.rated_power;
        out.max_rated_kw = std::max(out.max_rated_kw, h.params.rated_power);
    }
    out.capacity_kw = cfg.feeder_capacity_kw > 0.0 ? cfg.feeder_capacity_kw
                                                   : out.unresponsive_kw + 0.6 * rated_sum;
    if (out.capacity_kw <= out.unresponsive_kw)
        throw ConfigError("run_scenario: capacity does not exceed unresponsive power");

    PriceTracker tracker = PriceTracker::seeded_from(prices);
    Rng perturb_rng(cfg.seed ^ 0x9e3779b97f4a7c15ull);
    Rng obs_rng(cfg.seed ^ 0x2545f4914f6cdd1dull);

    // rolling minute logs for output-based bidding
    const int em_window = 360;
    std::vector<estimation::MeasurementLog> logs(cfg.bidding == ScenarioConfig::Bidding::output_based ? n : 0);
    std::vector<estimation::UncertainModel> fitted(logs.size());
    std::vector<bool> has_fit(logs.size(), false);

    out.periods.reserve(n_periods);
    for (int k = 0; k < n_periods; ++k) {
        const double minute = static_cast<double>(k) * cfg.period_minutes;
        const double tout = weather.outdoor_at(minute);
        const double solar = weather.solar_at(minute);
        const double base = prices.at(k);
        const agent::PriceStats stats = tracker.current();

        for (auto& h : houses) refresh_drives(h, tout, solar);

        // bids
        std::vector<agent::Bid> true_bids(n), submitted(n);
        for (int i = 0; i < n; ++i) {
            auto& h = houses[i];
            true_bids[i] =
                agent::realistic_bid(h.state, h.params, h.prefs, stats, h.q_measured, h.id);
            submitted[i] = true_bids[i];
            if (cfg.bidding == ScenarioConfig::Bidding::perturbed) {
                const double eps = perturb_rng.uniform(-cfg.perturb_pct, cfg.perturb_pct) / 100.0;
                submitted[i].price = true_bids[i].price * (1.0 + eps);
            } else if (cfg.bidding == ScenarioConfig::Bidding::output_based &&
                       static_cast<int>(logs[i].size()) >= em_window) {
                // refit only when the exogenous signals carry enough
                // excitation to identify the weather coupling (solar is
                // identically zero at night, which makes the regression
                // singular); otherwise reuse the last fitted model
                Mat2 zz = Mat2::zero();
                for (const Vec2& z : logs[i].exog) zz = zz + Mat2::outer(z, z);
                const bool excited =
                    std::fabs(zz.det()) > 1e-9 * zz.max_abs() * zz.max_abs();
                if (excited) {
                    estimation::UncertainModel init =
                        has_fit[i] ? fitted[i]
                                   : estimation::exact_discretization(
                                         h.params.a_matrix,
                                         {h.coupling.ua_over_ca, h.coupling.fs_over_ca, 0.0,
                                          h.coupling.mass_solar_over_cm},
                                         {h.coupling.qint_over_ca - h.coupling.qhvac_over_ca, 0.0},
                                         {h.coupling.qint_over_ca, 0.0}, 1.0 / 60.0,
                                         Mat2::diag(1e-4, 1e-4),
                                         cfg.obs_noise_f * cfg.obs_noise_f, h.state.eta,
                                         Mat2::diag(0.25, 0.25));
                    const auto em = estimation::em_fit(logs[i], init, 50, 1e-7);
                    fitted[i] = em.model;
                    has_fit[i] = true;
                }
                if (has_fit[i])
                    submitted[i] = estimation::bid_from_estimate(
                        fitted[i], logs[i], h.prefs, stats, h.params.deadband, h.q_measured,
                        h.id, cfg.period_minutes);
            }
        }

        // clearing
        const market::DemandCurve curve = market::build_demand_curve(submitted, out.unresponsive_kw);
        market::ClearingResult res;
        const market::CostModel cost = market::CostModel::linear(base);
        if (cfg.pricing == ScenarioConfig::Pricing::mechanism) {
            res = market::clear(curve, base, cost, out.capacity_kw, period_h);
        } else {
            const bool over = curve.demand_at(base) > out.capacity_kw;
            res.p_star = base;
            res.congested = over;
            res.price = (cfg.pricing == ScenarioConfig::Pricing::fixed_ratio && over)
                            ? cfg.gamma * base
                            : base;
            for (const auto& s : curve.steps) {
                const bool served = s.price > res.price;
                res.allocations[s.load_id] = served ? s.quantity_kw * period_h : 0.0;
                if (served) res.cleared_responsive_kw += s.quantity_kw;
            }
        }

        // device responses and thermal advance
        double realized_resp_kw = 0.0;
        double welfare = 0.0;
        double total_energy = 0.0;
        std::vector<LoadSnapshot> snap;
        if (cfg.capture_states) snap.resize(n);
        for (int i = 0; i < n; ++i) {
            auto& h = houses[i];
            const double setpoint = detail::response_setpoint(h, res.price, true_bids[i].price, stats);
            thermal::PeriodResult pr;
            if (cfg.bidding == ScenarioConfig::Bidding::output_based) {
                // advance minute-by-minute, logging measurements
                pr.state = h.state;
                double energy = 0.0, on_time = 0.0;
                for (int m = 0; m < cfg.period_minutes; ++m) {
                    const double wmin = minute + m;
                    refresh_drives(h, weather.outdoor_at(wmin), weather.solar_at(wmin));
                    const auto step = thermal::simulate_for(pr.state, setpoint, h.params, 1.0 / 60.0);
                    energy += step.energy_kwh;
                    on_time += step.on_fraction / 60.0;
                    pr.state = step.state;
                    auto& lg = logs[i];
                    lg.temps.push_back(pr.state.air() + cfg.obs_noise_f * obs_rng.normal());
                    lg.modes.push_back(pr.state.on ? 1 : 0);
                    lg.exog.push_back({weather.outdoor_at(wmin), weather.solar_at(wmin)});
                    if (static_cast<int>(lg.size()) > em_window) {
                        lg.temps.erase(lg.temps.begin());
                        lg.modes.erase(lg.modes.begin());
                        lg.exog.erase(lg.exog.begin());
                    }
                }
                pr.energy_kwh = energy;
                pr.on_fraction = on_time / period_h;
            } else {
                pr = thermal::simulate_period(h.state, setpoint, h.params);
            }
            h.state = pr.state;
            if (pr.on_fraction > 0.0) h.q_measured = h.params.rated_power;
            realized_resp_kw += pr.energy_kwh / period_h;
            total_energy += pr.energy_kwh;
            welfare += true_bids[i].price * pr.energy_kwh;
            if (cfg.capture_states) snap[i] = {h.state.air(), h.state.eta.v1, h.state.on};
        }
        welfare -= cost.cost(total_energy);

        PeriodRecord rec;
        rec.index = k;
        rec.clearing = res;
        rec.base_price = base;
        rec.cleared_kw = out.unresponsive_kw + res.cleared_responsive_kw;
        rec.realized_kw = out.unresponsive_kw + realized_resp_kw;
        rec.welfare = welfare;
        if (cfg.counterfactual_gamma > 0.0) {
            const bool over = curve.demand_at(base) > out.capacity_kw;
            const double p_cf = over ? cfg.counterfactual_gamma * base : base;
            double w_cf = 0.0, served_cf = 0.0, energy_cf = 0.0;
            for (int i = 0; i < n; ++i) {
                if (true_bids[i].price > p_cf) {
                    const double e = houses[i].params.rated_power * period_h;
                    w_cf += true_bids[i].price * e;
                    energy_cf += e;
                    served_cf += houses[i].params.rated_power;
                }
            }
            rec.welfare_fixed_gamma = w_cf - cost.cost(energy_cf);
            rec.fixed_gamma_served_kw = served_cf;
        }
        out.periods.push_back(std::move(rec));
        if (cfg.capture_states) out.snapshots.push_back(std::move(snap));

        tracker.push(res.price);
    }
    return out;
}

inline std::vector<Household> read_population_csv(const std::string& path);

inline ScenarioResult run_scenario(const ScenarioConfig& cfg) {
    cfg.validate();
    const WeatherSeries weather = ingest_weather(cfg.weather_path);
    const PriceSeries prices = ingest_prices(cfg.price_path, cfg.period_minutes);
    std::vector<Household> houses =
        cfg.population_path.empty()
            ? synthesize_population(cfg.n_households, cfg.seed, cfg.period_minutes)
            : read_population_csv(cfg.population_path);
    return run_scenario_with(cfg, std::move(houses), weather, prices);
}

// Fixed-ratio pricing baseline: base price normally, gamma * base whenever
// the uncapped demand would exceed capacity.
inline ScenarioResult fixed_ratio_baseline(const ScenarioConfig& cfg, double gamma) {
    if (gamma < 1.0) throw ConfigError("fixed_ratio_baseline: gamma must be >= 1");
    ScenarioConfig c = cfg;
    c.pricing = ScenarioConfig::Pricing::fixed_ratio;
    c.gamma = gamma;
    return run_scenario(c);
}

// Smallest gamma on a grid that keeps realized power within capacity in
// every period.
inline double find_min_capping_gamma(const ScenarioConfig& cfg, double lo = 1.0, double hi = 4.0,
                                     double step = 0.05) {
    for (double g = lo; g <= hi + 1e-9; g += step) {
        const ScenarioResult r = fixed_ratio_baseline(cfg, g);
        if (r.capped_fraction() >= 1.0) return g;
    }
    throw NonConvergence("find_min_capping_gamma: no gamma in [" + std::to_string(lo) + ", " +
                         std::to_string(hi) + "] caps every period");
}

// ---------------------------------------------------------------------------
// influence index

// Maximum percentage change of the clearing price a single agent can cause
// by moving its bid across its whole feasible range, in a synthetic congested
// period with capacity at 60% of aggregate rated power.
inline double influence_index_once(int n, std::uint64_t seed) {
    std::vector<Household> houses = synthesize_population(n, seed);
    Rng rng(seed * 1000003ull + 17ull);
    const agent::PriceStats stats{0.05, 0.015, 288};
    const double period_h = houses.front().params.period;

    double rated_sum = 0.0;
    std::vector<agent::Bid> bids(houses.size());
    for (std::size_t i = 0; i < houses.size(); ++i) {
        auto& h = houses[i];
        refresh_drives(h, 95.0, 2.0);
        h.state.on = true;
        h.state.eta = {h.prefs.t_desired + rng.uniform(0.0, 0.5 * h.params.deadband),
                       h.prefs.t_desired + rng.uniform(0.5, 2.0)};
        rated_sum += h.params.rated_power;
        bids[i] = agent::realistic_bid(h.state, h.params, h.prefs, stats, h.q_measured, h.id);
    }
    const double capacity = 0.6 * rated_sum;
    const market::CostModel cost = market::CostModel::linear(0.05);
    const auto clear_at = [&](const std::vector<agent::Bid>& bs) {
        return market::clear(market::build_demand_curve(bs, 0.0), 0.05, cost, capacity, period_h);
    };
    const double p0 = clear_at(bids).price;

    const std::size_t idx = static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(houses.size()) - 1));
    const auto& prefs = houses[idx].prefs;
    const double lo = stats.p_avg - prefs.k_slider * stats.p_sigma;
    const double hi = stats.p_avg + prefs.k_slider * stats.p_sigma;
    double worst = 0.0;
    std::vector<agent::Bid> mod = bids;
    for (int g = 0; g <= 100; ++g) {
        mod[idx].price = lo + (hi - lo) * g / 100.0;
        const double p = clear_at(mod).price;
        worst = std::max(worst, std::fabs(p - p0) / p0 * 100.0);
    }
    return worst;
}

inline std::vector<std::pair<int, double>> influence_index(const std::vector<int>& sizes,
                                                           std::uint64_t base_seed,
                                                           int n_seeds = 20) {
    std::vector<std::pair<int, double>> out;
    out.reserve(sizes.size());
    for (int n : sizes) {
        double sum = 0.0;
        for (int s = 0; s < n_seeds; ++s) sum += influence_index_once(n, base_seed + s);
        out.emplace_back(n, sum / n_seeds);
    }
    return out;
}

// ---------------------------------------------------------------------------
// file formats

inline void write_period_csv(const std::string& path, const ScenarioResult& r) {
    std::ofstream outf(path);
    if (!outf) throw DataGap("cannot write file: " + path);
    outf << "period,price,p_bar,p_star,congested,cleared_kw,realized_kw,welfare\n";
    char buf[320];
    for (const auto& p : r.periods) {
        char pbar[40] = "";
        if (p.clearing.p_bar) std::snprintf(pbar, sizeof pbar, "%.10g", *p.clearing.p_bar);
        std::snprintf(buf, sizeof buf, "%d,%.10g,%s,%.10g,%d,%.10g,%.10g,%.10g\n", p.index,
                      p.clearing.price, pbar, p.clearing.p_star, p.clearing.congested ? 1 : 0,
                      p.cleared_kw, p.realized_kw, p.welfare);
        outf << buf;
    }
}

inline void write_population_csv(const std::string& path, const std::vector<Household>& houses) {
    std::ofstream outf(path);
    if (!outf) throw DataGap("cannot write file: " + path);
    outf << "load_id,a00,a01,a10,a11,b_on0,b_on1,b_off0,b_off1,deadband_F,rated_kw,period_h,"
            "t_min,t_desired,t_max,k_slider,v_curvature,v_slope,init_air_F,init_mass_F,init_on,"
            "ua_over_ca,fs_over_ca,mass_solar_over_cm,qint_over_ca\n";
    char buf[768];
    for (const auto& h : houses) {
        std::snprintf(buf, sizeof buf,
                      "%s,%.12g,%.12g,%.12g,%.12g,%.12g,%.12g,%.12g,%.12g,%.12g,%.12g,%.12g,"
                      "%.12g,%.12g,%.12g,%.12g,%.12g,%.12g,%.12g,%.12g,%d,%.12g,%.12g,%.12g,%.12g\n",
                      h.id.c_str(), h.params.a_matrix.a, h.params.a_matrix.b, h.params.a_matrix.c,
                      h.params.a_matrix.d, h.params.b_on.v0, h.params.b_on.v1, h.params.b_off.v0,
                      h.params.b_off.v1, h.params.deadband, h.params.rated_power, h.params.period,
                      h.prefs.t_min, h.prefs.t_desired, h.prefs.t_max, h.prefs.k_slider,
                      h.valuation.curvature, h.valuation.slope, h.state.eta.v0, h.state.eta.v1,
                      h.state.on ? 1 : 0, h.coupling.ua_over_ca, h.coupling.fs_over_ca,
                      h.coupling.mass_solar_over_cm, h.coupling.qint_over_ca);
        outf << buf;
    }
}

inline std::vector<Household> read_population_csv(const std::string& path) {
    auto in = detail::open_or_throw(path);
    std::string line;
    if (!std::getline(in, line)) throw SchemaError("population file has no header: " + path);
    std::vector<Household> out;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const auto c = detail::split_csv_line(line);
        if (c.size() != 21 && c.size() != 25)
            throw SchemaError("population row needs 21 or 25 columns, got " +
                              std::to_string(c.size()));
        Household h;
        h.id = c[0];
        const auto num = [&](std::size_t i) { return detail::to_double(c[i], "population col " + std::to_string(i)); };
        h.params.a_matrix = {num(1), num(2), num(3), num(4)};
        h.params.b_on = {num(5), num(6)};
        h.params.b_off = {num(7), num(8)};
        h.params.deadband = num(9);
        h.params.rated_power = num(10);
        h.params.period = num(11);
        h.prefs = {num(12), num(13), num(14), num(15)};
        h.valuation = {num(16), num(17), h.params.rated_power * h.params.period};
        h.state = {{num(18), num(19)}, num(20) != 0.0};
        h.q_measured = h.params.rated_power;
        if (c.size() == 25) {
            h.coupling.ua_over_ca = num(21);
            h.coupling.fs_over_ca = num(22);
            h.coupling.mass_solar_over_cm = num(23);
            h.coupling.qint_over_ca = num(24);
        } else {
            // reconstruct what the matrix pins down; nominal solar pathways
            h.coupling.ua_over_ca = -(h.params.a_matrix.a + h.params.a_matrix.b);
            h.coupling.fs_over_ca = 0.5 / 0.17;
            h.coupling.mass_solar_over_cm = 0.5 / 2.7;
            h.coupling.qint_over_ca = 0.35 / 0.17;
        }
        h.coupling.qhvac_over_ca = h.params.b_off.v0 - h.params.b_on.v0;
        h.params.validate();
        h.prefs.validate();
        h.valuation.validate();
        out.push_back(std::move(h));
    }
    if (out.empty()) throw SchemaError("population file has no rows: " + path);
    return out;
}

// measurement log schema: minute_index,temp_F,mode_on,outdoor_F,solar_gain_kw
inline void write_measurement_csv(const std::string& path, const estimation::MeasurementLog& log) {
    std::ofstream outf(path);
    if (!outf) throw DataGap("cannot write file: " + path);
    outf << "minute_index,temp_F,mode_on,outdoor_F,solar_gain_kw\n";
    char buf[200];
    for (std::size_t k = 0; k < log.size(); ++k) {
        std::snprintf(buf, sizeof buf, "%zu,%.12g,%d,%.12g,%.12g\n", k, log.temps[k],
                      log.modes[k] ? 1 : 0, log.exog[k].v0, log.exog[k].v1);
        outf << buf;
    }
}

inline estimation::MeasurementLog read_measurement_csv(const std::string& path) {
    auto in = detail::open_or_throw(path);
    std::string line;
    if (!std::getline(in, line)) throw SchemaError("measurement log has no header: " + path);
    const auto hdr = detail::split_csv_line(line);
    if (hdr.size() != 5 || hdr[1] != "temp_F" || hdr[2] != "mode_on")
        throw SchemaError("measurement log header mismatch in " + path);
    estimation::MeasurementLog log;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const auto c = detail::split_csv_line(line);
        if (c.size() != 5) throw SchemaError("measurement row needs 5 columns: " + line);
        log.temps.push_back(detail::to_double(c[1], "temp_F"));
        log.modes.push_back(detail::to_double(c[2], "mode_on") != 0.0 ? 1 : 0);
        log.exog.push_back({detail::to_double(c[3], "outdoor_F"), detail::to_double(c[4], "solar_gain_kw")});
    }
    log.validate();
    return log;
}

} // namespace tclmarket::scenario
