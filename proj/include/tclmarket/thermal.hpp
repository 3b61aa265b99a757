#pragma once

#include <utility>
#include <vector>

#include "tclmarket/matrix2.hpp"

namespace tclmarket::thermal {

// Second-order ETP load: eta' = A eta + B_mode, with eta = (air temp, mass
// temp) in degF and time in hours. The hysteretic relay switches B between
// the on and off drives.
struct EtpParams {
    Mat2 a_matrix;     // 1/h
    Vec2 b_on;         // degF/h drive while consuming
    Vec2 b_off;        // degF/h drive while idle
    double deadband = 1.0;         // degF, full width
    double rated_power = 0.0;      // kW while on
    double period = 1.0 / 12.0;    // market period, hours

    void validate() const {
        if (!(deadband > 0.0)) throw ConfigError("EtpParams: deadband must be > 0");
        if (!(rated_power > 0.0)) throw ConfigError("EtpParams: rated_power must be > 0");
        if (!(period > 0.0)) throw ConfigError("EtpParams: period must be > 0");
        if (!is_hurwitz(a_matrix))
            throw ConfigError("EtpParams: A matrix is not Hurwitz (trace " +
                              std::to_string(a_matrix.trace()) + ", det " +
                              std::to_string(a_matrix.det()) + ")");
        (void)a_matrix.inverse(); // throws SingularMatrix when not invertible
        if (!a_matrix.finite() || !b_on.finite() || !b_off.finite())
            throw ConfigError("EtpParams: non-finite entries");
    }
};

struct HybridState {
    Vec2 eta;  // (air, mass) degF
    bool on = false;

    double air() const { return eta.v0; }
};

// Energy-vs-setpoint curve for one market period from a fixed initial state.
struct EnergyFn {
    double e_max = 0.0;  // kWh when on the whole period
    double t_f = 0.0;    // end-of-period air temp when on the whole period
    std::vector<std::pair<double, double>> samples;  // (setpoint degF, energy kWh)
};

struct PeriodResult {
    HybridState state;
    double energy_kwh = 0.0;
    double on_fraction = 0.0;
};

namespace detail {

inline Vec2 propagate_mode(const Vec2& eta0, const Mat2& A, const Vec2& drive, double dt) {
    if (dt == 0.0) return eta0;
    const Mat2 E = expm(A, dt);
    return E * eta0 + exp_integral(A, dt) * drive;
}

// Air-temperature component of the closed-form trajectory.
inline double air_at(const Vec2& eta0, const Mat2& A, const Vec2& drive, double dt) {
    return propagate_mode(eta0, A, drive, dt).v0;
}

} // namespace detail

// Closed-form state propagation in the mode selected by state.on.
inline Vec2 propagate(const HybridState& state, const EtpParams& p, double dt) {
    if (dt < 0.0) throw ConfigError("propagate: dt must be >= 0");
    return detail::propagate_mode(state.eta, p.a_matrix, state.on ? p.b_on : p.b_off, dt);
}

// One application of the relay rule; temperatures are untouched.
inline HybridState hysteresis_step(const HybridState& state, double setpoint, const EtpParams& p) {
    HybridState next = state;
    const double half = 0.5 * p.deadband;
    if (state.air() >= setpoint + half)
        next.on = true;
    else if (state.air() <= setpoint - half)
        next.on = false;
    return next;
}

// Air temperature at the end of the period if the load runs the whole time.
inline double final_temp_if_on(const HybridState& state, const EtpParams& p) {
    return detail::air_at(state.eta, p.a_matrix, p.b_on, p.period);
}

// Advance the hybrid trajectory for a given duration. Deadband crossings are
// located on the closed-form air trajectory: a coarse scan at duration/256
// resolution brackets each crossing and bisection refines it to 1e-9 h.
// Several switches are allowed.
inline PeriodResult simulate_for(const HybridState& state0, double setpoint, const EtpParams& p,
                                 double duration) {
    const double T = duration;
    const double half = 0.5 * p.deadband;
    const double scan_step = T / 256.0;
    const double root_tol = 1e-9;

    HybridState cur = hysteresis_step(state0, setpoint, p);
    double t = 0.0;
    double on_time = 0.0;
    int switches = 0;

    while (t < T) {
        const bool on = cur.on;
        const Vec2 drive = on ? p.b_on : p.b_off;
        const double threshold = on ? setpoint - half : setpoint + half;
        // g(s) > 0 while the mode persists; the relay fires at g <= 0.
        const auto g = [&](double s) {
            const double air = detail::air_at(cur.eta, p.a_matrix, drive, s);
            return on ? air - threshold : threshold - air;
        };

        const double remaining = T - t;
        double lo = 0.0;
        double hi = -1.0;
        for (double s = scan_step; s < remaining + 0.5 * scan_step; s += scan_step) {
            const double sc = std::min(s, remaining);
            if (g(sc) <= 0.0) {
                hi = sc;
                break;
            }
            lo = sc;
        }

        if (hi < 0.0) {
            // no crossing before the period ends
            cur.eta = detail::propagate_mode(cur.eta, p.a_matrix, drive, remaining);
            if (on) on_time += remaining;
            t = T;
            break;
        }

        int iters = 0;
        while (hi - lo > root_tol) {
            const double mid = 0.5 * (lo + hi);
            if (g(mid) <= 0.0)
                hi = mid;
            else
                lo = mid;
            if (++iters > 200)
                throw NonConvergence("simulate_period: deadband crossing bisection stalled at t=" +
                                     std::to_string(t + lo));
        }
        const double s_cross = hi;
        cur.eta = detail::propagate_mode(cur.eta, p.a_matrix, drive, s_cross);
        if (on) on_time += s_cross;
        cur.on = !on;
        t += s_cross;
        if (++switches > 64)
            throw NonConvergence("simulate_period: more than 64 relay switches in one period");
    }

    PeriodResult out;
    out.state = cur;
    out.on_fraction = on_time / T;
    out.energy_kwh = p.rated_power * on_time;
    return out;
}

// One full market period.
inline PeriodResult simulate_period(const HybridState& state0, double setpoint,
                                    const EtpParams& p) {
    return simulate_for(state0, setpoint, p, p.period);
}

// Sample the setpoint -> energy map over a sorted grid.
inline EnergyFn energy_function(const HybridState& state, const EtpParams& p,
                                const std::vector<double>& setpoint_grid) {
    EnergyFn fn;
    fn.e_max = p.rated_power * p.period;
    fn.t_f = final_temp_if_on(state, p);
    fn.samples.reserve(setpoint_grid.size());
    for (double u : setpoint_grid)
        fn.samples.emplace_back(u, simulate_period(state, u, p).energy_kwh);
    return fn;
}

} // namespace tclmarket::thermal
