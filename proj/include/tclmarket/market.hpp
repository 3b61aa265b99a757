#pragma once

#include <algorithm>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "tclmarket/agent.hpp"

namespace tclmarket::market {

using agent::Bid;
using agent::QuadraticValuation;

// Aggregated step demand: bids sorted by price descending, cumulative power
// on top of the unresponsive floor.
struct DemandCurve {
    struct Step {
        double price = 0.0;          // $/kWh
        double quantity_kw = 0.0;    // this bid's power
        double cumulative_kw = 0.0;  // unresponsive + bids up to here
        std::string load_id;
    };
    std::vector<Step> steps;
    double unresponsive_kw = 0.0;

    // Power that runs at clearing price p: bids strictly above p. A device
    // whose bid equals the marginal price is unserved.
    double demand_at(double p) const {
        double q = unresponsive_kw;
        for (const auto& s : steps) {
            if (s.price > p)
                q = s.cumulative_kw;
            else
                break;
        }
        return q;
    }

    double max_demand() const {
        return steps.empty() ? unresponsive_kw : steps.back().cumulative_kw;
    }
};

// Procurement cost C(E) for energy E in kWh; convex and differentiable.
struct CostModel {
    enum class Kind { linear, quadratic };
    Kind kind = Kind::linear;
    double c1 = 0.0;  // $/kWh
    double c2 = 0.0;  // $/kWh^2, quadratic coefficient (>= 0)

    static CostModel linear(double slope) { return {Kind::linear, slope, 0.0}; }
    static CostModel quadratic(double slope, double quad) {
        return {Kind::quadratic, slope, quad};
    }

    double cost(double e) const { return c1 * e + 0.5 * c2 * e * e; }
    double marginal(double e) const { return c1 + c2 * e; }

    void validate() const {
        if (c1 < 0.0) throw ConfigError("CostModel: negative marginal cost at zero");
        if (c2 < 0.0) throw ConfigError("CostModel: quadratic coefficient must be >= 0");
        if (kind == Kind::linear && c2 != 0.0)
            throw ConfigError("CostModel: linear kind with quadratic coefficient");
    }
};

struct ClearingResult {
    double price = 0.0;                          // P_c*
    double p_star = 0.0;                         // marginal production cost
    std::optional<double> p_bar;                 // capacity-binding price, if demand can reach it
    bool congested = false;
    std::map<std::string, double> allocations;   // load_id -> kWh
    double cleared_responsive_kw = 0.0;          // power of served bids

    double total_cleared_energy() const {
        double e = 0.0;
        for (const auto& [id, a] : allocations) e += a;
        return e;
    }
};

struct TeamSolution {
    std::map<std::string, double> allocations;  // load_id -> kWh
    double welfare = 0.0;
    double multiplier = 0.0;  // capacity dual u
    std::map<std::string, std::pair<double, double>> per_load_duals;  // (u1, u2)
    double lambda_star = 0.0;
};

struct ValuedAgent {
    std::string id;
    QuadraticValuation v;
};

struct RealizationReport {
    double max_allocation_dev = 0.0;
    double welfare_gap = 0.0;
    bool realizable = false;
};

inline DemandCurve build_demand_curve(std::vector<Bid> bids, double q_uc) {
    std::sort(bids.begin(), bids.end(), [](const Bid& x, const Bid& y) {
        if (x.price != y.price) return x.price > y.price;
        return x.load_id < y.load_id;
    });
    DemandCurve curve;
    curve.unresponsive_kw = q_uc;
    double cum = q_uc;
    curve.steps.reserve(bids.size());
    for (const auto& b : bids) {
        cum += b.quantity;
        curve.steps.push_back({b.price, b.quantity, cum, b.load_id});
    }
    return curve;
}

namespace detail {

// Fixed point of p = C'(responsive energy served at p). Monotone, so plain
// bisection; exact for the linear cost model where C' is constant.
inline double marginal_cost_fixed_point(const DemandCurve& curve, const CostModel& cost,
                                        double period_h) {
    if (cost.c2 == 0.0) return cost.c1;
    const auto energy_at = [&](double p) {
        return (curve.demand_at(p) - curve.unresponsive_kw) * period_h;
    };
    double lo = 0.0;
    double hi = cost.marginal(energy_at(0.0)) + 1.0;
    if (!curve.steps.empty()) hi = std::max(hi, curve.steps.front().price + 1.0);
    for (int i = 0; i < 200; ++i) {
        const double mid = 0.5 * (lo + hi);
        if (cost.marginal(energy_at(mid)) > mid)
            lo = mid;
        else
            hi = mid;
    }
    return 0.5 * (lo + hi);
}

} // namespace detail

// Capacity-constrained clearing of a step demand curve. The clearing price
// is max(p_bar, p_star); p_bar is the price of the first unserved bid, so
// served demand is the largest cumulative value within capacity and a bid
// exactly at p_bar is unserved. serve_marginal_partial instead grants the
// marginal bid the remaining capacity, making served power meet the cap
// exactly.
inline ClearingResult clear(const DemandCurve& curve, double base_price, const CostModel& cost,
                            double capacity_kw, double period_h = 1.0 / 12.0,
                            bool serve_marginal_partial = false) {
    (void)base_price;  // the linear default cost model carries the base price as its slope
    if (curve.unresponsive_kw >= capacity_kw)
        throw Infeasible("clear: unresponsive power " + std::to_string(curve.unresponsive_kw) +
                         " kW meets or exceeds capacity " + std::to_string(capacity_kw) + " kW");

    ClearingResult out;
    out.p_star = detail::marginal_cost_fixed_point(curve, cost, period_h);

    // first bid that cannot be served within capacity
    std::size_t first_unserved = curve.steps.size();
    for (std::size_t j = 0; j < curve.steps.size(); ++j) {
        if (curve.steps[j].cumulative_kw > capacity_kw) {
            first_unserved = j;
            break;
        }
    }
    if (first_unserved < curve.steps.size())
        out.p_bar = curve.steps[first_unserved].price;

    out.congested = out.p_bar.has_value() && *out.p_bar > out.p_star;
    out.price = out.congested ? *out.p_bar : out.p_star;

    for (const auto& s : curve.steps) {
        const bool served = s.price > out.price;
        out.allocations[s.load_id] = served ? s.quantity_kw * period_h : 0.0;
        if (served) out.cleared_responsive_kw += s.quantity_kw;
    }
    if (serve_marginal_partial && out.congested) {
        const auto& marginal = curve.steps[first_unserved];
        const double room = capacity_kw - curve.unresponsive_kw - out.cleared_responsive_kw;
        const double partial = std::clamp(room, 0.0, marginal.quantity_kw);
        out.allocations[marginal.load_id] = partial * period_h;
        out.cleared_responsive_kw += partial;
    }
    if (out.congested && cost.c2 != 0.0)
        out.p_star = cost.marginal(out.cleared_responsive_kw * period_h);
    return out;
}

namespace detail {

// Sum of single-valued responses at price p.
inline double aggregate_response(const std::vector<ValuedAgent>& agents, double p) {
    double s = 0.0;
    for (const auto& a : agents) s += agent::optimal_allocation(a.v, p);
    return s;
}

// Solve b(p) = d for the piecewise-linear aggregate of clamped stationary
// responses. Walks the kink segments and solves the affine piece exactly, so
// integer fixtures clear at integer prices. Jump crossings (linear
// valuations) resolve to the jump price. Returns nullopt when demand never
// reaches d.
inline std::optional<double> demand_equals(const std::vector<ValuedAgent>& agents, double d) {
    double total_max = 0.0;
    for (const auto& a : agents) total_max += a.v.a_max;
    if (total_max <= d) return std::nullopt;

    std::vector<double> kinks;
    kinks.reserve(agents.size() * 2);
    for (const auto& a : agents) {
        kinks.push_back(a.v.slope);
        if (a.v.curvature < 0.0) kinks.push_back(a.v.slope + a.v.curvature * a.v.a_max);
    }
    std::sort(kinks.begin(), kinks.end());
    kinks.erase(std::unique(kinks.begin(), kinks.end()), kinks.end());

    // segments: (-inf, k0), (k0, k1), ..., (k_last, +inf)
    for (std::size_t j = 0; j <= kinks.size(); ++j) {
        const double left = (j == 0) ? -std::numeric_limits<double>::infinity() : kinks[j - 1];
        const double right =
            (j == kinks.size()) ? std::numeric_limits<double>::infinity() : kinks[j];
        // affine form b(p) = a0 - a1 * p on the open segment
        double a0 = 0.0, a1 = 0.0;
        const double probe = std::isfinite(left)
                                 ? (std::isfinite(right) ? 0.5 * (left + right) : left + 1.0)
                                 : (std::isfinite(right) ? right - 1.0 : 0.0);
        for (const auto& a : agents) {
            const double p_hi = a.v.slope;
            const double p_lo =
                a.v.curvature < 0.0 ? a.v.slope + a.v.curvature * a.v.a_max : a.v.slope;
            if (probe >= p_hi) continue;  // zero
            if (probe <= p_lo) {
                a0 += a.v.a_max;  // saturated
            } else {
                a0 += a.v.slope / (-a.v.curvature);
                a1 += 1.0 / (-a.v.curvature);
            }
        }
        const double b_left = std::isfinite(left) ? a0 - a1 * left : total_max;
        const double b_right = std::isfinite(right) ? a0 - a1 * right : 0.0;
        if (b_left >= d && d >= b_right) {
            if (a1 > 0.0) {
                double p = (a0 - d) / a1;
                if (std::isfinite(left)) p = std::max(p, left);
                if (std::isfinite(right)) p = std::min(p, right);
                return p;
            }
            // flat segment already at d: take the right kink (conservative)
            if (std::isfinite(right)) return right;
            return left;
        }
        // jump at the right kink (linear valuations drop to zero there)
        if (std::isfinite(right)) {
            const double after = aggregate_response(agents, right);
            if (b_right > d && d >= after) return right;
        }
    }
    return std::nullopt;  // not reached: b spans [0, total_max)
}

} // namespace detail

// Mechanism clearing with exact response-function bids (the full message
// space). Capacity is in energy units.
inline ClearingResult clear_functional(const std::vector<ValuedAgent>& agents,
                                       const CostModel& cost, double capacity_energy) {
    if (capacity_energy < 0.0)
        throw InfeasibleCapacity("clear_functional: negative capacity");

    ClearingResult out;
    out.p_bar = detail::demand_equals(agents, capacity_energy);

    // uncongested candidate: p = C'(b(p))
    double p0 = cost.c1;
    if (cost.c2 != 0.0) {
        double lo = 0.0;
        double hi = cost.marginal(detail::aggregate_response(agents, 0.0)) + 1.0;
        for (const auto& a : agents) hi = std::max(hi, a.v.slope + 1.0);
        for (int i = 0; i < 200; ++i) {
            const double mid = 0.5 * (lo + hi);
            if (cost.marginal(detail::aggregate_response(agents, mid)) > mid)
                lo = mid;
            else
                hi = mid;
        }
        p0 = 0.5 * (lo + hi);
    }

    out.congested = out.p_bar.has_value() && *out.p_bar > p0;
    out.price = out.congested ? *out.p_bar : p0;

    double total = 0.0;
    for (const auto& a : agents) {
        const double alloc = agent::optimal_allocation(a.v, out.price);
        out.allocations[a.id] = alloc;
        total += alloc;
    }
    out.p_star = cost.marginal(total);
    out.cleared_responsive_kw = total;  // energy units in this route
    return out;
}

inline double welfare(const std::map<std::string, double>& allocations,
                      const std::vector<ValuedAgent>& agents, const CostModel& cost) {
    double v_sum = 0.0;
    double total = 0.0;
    for (const auto& a : agents) {
        const auto it = allocations.find(a.id);
        const double alloc = it == allocations.end() ? 0.0 : it->second;
        v_sum += a.v.value(alloc);
        total += alloc;
    }
    return v_sum - cost.cost(total);
}

// Team problem: maximize sum V_i(a_i) - C(sum a_i) subject to the capacity
// and box constraints, by bisection on the scalar dual price. Marginal
// linear valuations are rationed explicitly; everything else is a clamped
// stationary point.
inline TeamSolution solve_team_problem(const std::vector<ValuedAgent>& agents,
                                       const CostModel& cost, double capacity_energy) {
    if (capacity_energy < 0.0)
        throw InfeasibleCapacity("solve_team_problem: negative capacity");

    const auto response_sum = [&](double lambda) {
        return detail::aggregate_response(agents, lambda);
    };

    double hi = cost.c1 + 1.0;
    for (const auto& a : agents) hi = std::max(hi, a.v.slope + 1.0);
    hi = std::max(hi, cost.marginal(response_sum(0.0)) + 1.0);

    // unconstrained optimum: lambda = C'(S(lambda))
    double lo = 0.0, up = hi;
    for (int i = 0; i < 200; ++i) {
        const double mid = 0.5 * (lo + up);
        if (cost.marginal(response_sum(mid)) > mid)
            lo = mid;
        else
            up = mid;
    }
    double lambda = 0.5 * (lo + up);
    double total_unconstrained = response_sum(lambda);

    bool binding = total_unconstrained > capacity_energy + 1e-9;
    if (binding) {
        // raise lambda until the aggregate response meets the cap
        lo = lambda;
        up = hi;
        for (int i = 0; i < 200; ++i) {
            const double mid = 0.5 * (lo + up);
            if (response_sum(mid) > capacity_energy)
                lo = mid;
            else
                up = mid;
        }
        lambda = 0.5 * (lo + up);
    }

    TeamSolution out;
    out.lambda_star = lambda;

    // allocations at lambda, rationing marginal linear valuations to land on
    // the target total exactly
    const double target = binding ? capacity_energy : std::min(total_unconstrained, capacity_energy);
    const double tie_tol = 1e-9 * std::max(1.0, std::fabs(lambda));
    double fixed_total = 0.0;
    std::vector<std::size_t> marginal;
    std::vector<double> alloc(agents.size(), 0.0);
    for (std::size_t i = 0; i < agents.size(); ++i) {
        const auto& v = agents[i].v;
        if (v.curvature == 0.0 && std::fabs(v.slope - lambda) <= tie_tol) {
            marginal.push_back(i);
            continue;
        }
        alloc[i] = agent::optimal_allocation(v, lambda);
        fixed_total += alloc[i];
    }
    double residual = std::max(0.0, target - fixed_total);
    for (std::size_t i : marginal) {
        const double take = std::min(residual, agents[i].v.a_max);
        alloc[i] = take;
        residual -= take;
    }

    double total = 0.0;
    for (std::size_t i = 0; i < agents.size(); ++i) total += alloc[i];
    out.multiplier = std::max(0.0, lambda - cost.marginal(total));

    double v_sum = 0.0;
    for (std::size_t i = 0; i < agents.size(); ++i) {
        const auto& a = agents[i];
        out.allocations[a.id] = alloc[i];
        v_sum += a.v.value(alloc[i]);
        // u1 active at the upper box bound, u2 at zero
        double u1 = 0.0, u2 = 0.0;
        if (alloc[i] >= a.v.a_max - 1e-12 * a.v.a_max)
            u1 = std::max(0.0, a.v.deriv(a.v.a_max) - lambda);
        else if (alloc[i] <= 1e-12 * a.v.a_max)
            u2 = std::max(0.0, lambda - a.v.deriv(0.0));
        out.per_load_duals[a.id] = {u1, u2};
    }
    out.welfare = v_sum - cost.cost(total);
    return out;
}

// Can the team allocation be realized by broadcasting the clearing price?
// For strictly concave valuations the best response is unique; a linear
// valuation at its tie price can hold either box corner but no interior
// point.
inline RealizationReport verify_realization(const TeamSolution& team,
                                            const ClearingResult& clearing,
                                            const std::vector<ValuedAgent>& agents,
                                            const CostModel& cost) {
    RealizationReport rep;
    double max_amax = 0.0;
    for (const auto& a : agents) {
        max_amax = std::max(max_amax, a.v.a_max);
        const auto it = team.allocations.find(a.id);
        const double want = it == team.allocations.end() ? 0.0 : it->second;
        double dev;
        if (a.v.curvature == 0.0 &&
            std::fabs(a.v.slope - clearing.price) <= 1e-9 * std::max(1.0, std::fabs(a.v.slope))) {
            dev = std::min(std::fabs(want), std::fabs(want - a.v.a_max));
        } else {
            dev = std::fabs(want - agent::optimal_allocation(a.v, clearing.price));
        }
        rep.max_allocation_dev = std::max(rep.max_allocation_dev, dev);
    }
    rep.welfare_gap = team.welfare - welfare(clearing.allocations, agents, cost);
    rep.realizable = agents.empty() || rep.max_allocation_dev <= 1e-6 * std::max(1.0, max_amax);
    return rep;
}

} // namespace tclmarket::market
