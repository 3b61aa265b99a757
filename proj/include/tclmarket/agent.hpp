#pragma once

#include <algorithm>
#include <string>
#include <utility>

#include "tclmarket/thermal.hpp"

namespace tclmarket::agent {

// Comfort band and slider setting from the thermostat interface.
struct UserPrefs {
    double t_min = 0.0;
    double t_desired = 0.0;
    double t_max = 0.0;
    double k_slider = 1.0;  // in [0, 3]

    void validate() const {
        if (!(t_min <= t_desired && t_desired <= t_max))
            throw ConfigError("UserPrefs: need t_min <= t_desired <= t_max");
        if (k_slider < 0.0 || k_slider > 3.0)
            throw ConfigError("UserPrefs: k_slider outside [0, 3]");
    }
};

// Rolling statistics of past clearing prices, shared by all devices.
struct PriceStats {
    double p_avg = 0.0;    // $/kWh
    double p_sigma = 0.0;  // $/kWh
    int window = 288;

    void validate() const {
        if (p_sigma < 0.0) throw ConfigError("PriceStats: p_sigma < 0");
        if (window < 1) throw ConfigError("PriceStats: window < 1");
    }
};

// The two-scalar message each device sends before a clearing.
struct Bid {
    double price = 0.0;     // $/kWh
    double quantity = 0.0;  // kW, average power of the most recent on cycle
    std::string load_id;
};

// V(a) = 0.5*curvature*a^2 + slope*a on [0, a_max]. curvature < 0 gives the
// strictly concave case; curvature == 0 is the linear case used by the
// team-problem corner examples.
struct QuadraticValuation {
    double curvature = -1.0;  // $/kWh^2
    double slope = 0.0;       // $/kWh
    double a_max = 0.0;       // kWh

    double value(double a) const { return 0.5 * curvature * a * a + slope * a; }
    double deriv(double a) const { return curvature * a + slope; }

    void validate() const {
        if (curvature > 0.0) throw ConfigError("QuadraticValuation: curvature must be <= 0");
        if (!(slope > 0.0)) throw ConfigError("QuadraticValuation: V'(0) must be > 0");
        if (!(a_max > 0.0)) throw ConfigError("QuadraticValuation: a_max must be > 0");
    }
};

// Bidding curve (temperature -> price): P_avg at t_desired, P_avg - k*sigma
// at t_min, P_avg + k*sigma at t_max, linear between, flat outside the band.
inline double bid_price_from_curve(double t_c, const UserPrefs& prefs, const PriceStats& stats) {
    if (prefs.t_min == prefs.t_max)
        throw DegeneratePrefs("bid_price_from_curve: zero-width band at t=" +
                              std::to_string(prefs.t_min));
    const double k_sigma = prefs.k_slider * stats.p_sigma;
    if (t_c >= prefs.t_max) return stats.p_avg + k_sigma;
    if (t_c <= prefs.t_min) return stats.p_avg - k_sigma;
    if (t_c >= prefs.t_desired) {
        const double w = prefs.t_max - prefs.t_desired;
        return stats.p_avg + k_sigma * (t_c - prefs.t_desired) / w;
    }
    const double w = prefs.t_desired - prefs.t_min;
    return stats.p_avg - k_sigma * (prefs.t_desired - t_c) / w;
}

// Response curve (price -> setpoint): inverse of the bidding curve with
// saturation at the band edges. Total: degenerate slider/sigma collapses to
// a three-valued step.
inline double setpoint_from_price(double p_c, const UserPrefs& prefs, const PriceStats& stats) {
    const double k_sigma = prefs.k_slider * stats.p_sigma;
    if (k_sigma <= 0.0) {
        if (p_c > stats.p_avg) return prefs.t_max;
        if (p_c < stats.p_avg) return prefs.t_min;
        return prefs.t_desired;
    }
    if (p_c >= stats.p_avg + k_sigma) return prefs.t_max;
    if (p_c <= stats.p_avg - k_sigma) return prefs.t_min;
    if (p_c >= stats.p_avg)
        return prefs.t_desired + (p_c - stats.p_avg) / k_sigma * (prefs.t_max - prefs.t_desired);
    return prefs.t_desired - (stats.p_avg - p_c) / k_sigma * (prefs.t_desired - prefs.t_min);
}

// Setpoint thresholds of the step bid: energy is zero for setpoints at or
// above u1 and maximal at or below u2. For a load that is on, u1 = T_c +
// delta/2 and u2 = T_f + delta/2. For a load that is off, the on-trigger
// boundary gives u1 from the off-mode drift and u2 additionally requires an
// immediate turn-on.
inline std::pair<double, double> compute_u1_u2(const thermal::HybridState& state,
                                               const thermal::EtpParams& p) {
    const double half = 0.5 * p.deadband;
    const double t_c = state.air();
    const double t_f_on =
        thermal::detail::air_at(state.eta, p.a_matrix, p.b_on, p.period);
    if (state.on) {
        // t_f <= t_c whenever the unit can actually cool; the min covers the
        // underpowered corner so u2 <= u1 always holds
        const double u1 = t_c + half;
        return {u1, std::min(u1, t_f_on + half)};
    }
    const double t_f_off =
        thermal::detail::air_at(state.eta, p.a_matrix, p.b_off, p.period);
    const double u1 = t_f_off - half;
    const double u2 = std::min(t_c - half, t_f_on + half);
    return {u1, std::min(u1, u2)};
}

// Setpoints that guarantee a committed allocation over one period: at or
// above zero_threshold the load consumes nothing, at or below full_threshold
// it runs the whole period. Unlike the u1/u2 thresholds these account for
// the off-mode drift re-crossing the deadband within the period, so a device
// holding them realizes exactly 0 or exactly E_m.
struct AllocationSetpoints {
    double zero_threshold = 0.0;
    double full_threshold = 0.0;
};

inline AllocationSetpoints allocation_setpoints(const thermal::HybridState& state,
                                                const thermal::EtpParams& p) {
    const double half = 0.5 * p.deadband;
    const double t_c = state.air();
    const double t_f_on = thermal::detail::air_at(state.eta, p.a_matrix, p.b_on, p.period);
    const double t_f_off = thermal::detail::air_at(state.eta, p.a_matrix, p.b_off, p.period);
    AllocationSetpoints out;
    out.zero_threshold = std::max(t_c + half, t_f_off - half);
    if (state.on)
        out.full_threshold = std::min(t_f_on + half, t_c + half - 1e-9);
    else
        out.full_threshold = std::min(t_c - half, t_f_on + half);
    return out;
}

// Step approximation of the energy response: bid price is the midpoint of
// the curve prices mapping to u1 and u2, quantity is the measured on-cycle
// power.
inline Bid realistic_bid(const thermal::HybridState& state, const thermal::EtpParams& p,
                         const UserPrefs& prefs, const PriceStats& stats, double q_measured,
                         std::string load_id = {}) {
    const auto [u1, u2] = compute_u1_u2(state, p);
    const double p1 = bid_price_from_curve(u1, prefs, stats);
    const double p2 = bid_price_from_curve(u2, prefs, stats);
    Bid bid;
    bid.price = 0.5 * (p1 + p2);
    bid.quantity = q_measured;
    bid.load_id = std::move(load_id);
    return bid;
}

// h(p) = argmax over [0, a_max] of V(a) - p*a. For the linear case the
// argmax set at p == slope is {0, a_max}; this single-valued form returns 0
// there (a broadcast price cannot select an interior point).
inline double optimal_allocation(const QuadraticValuation& v, double p_c) {
    if (v.curvature == 0.0) return p_c < v.slope ? v.a_max : 0.0;
    const double stationary = (v.slope - p_c) / (-v.curvature);
    return std::clamp(stationary, 0.0, v.a_max);
}

} // namespace tclmarket::agent
