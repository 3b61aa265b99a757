#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "tclmarket/agent.hpp"
#include "tclmarket/matrix2.hpp"
#include "tclmarket/thermal.hpp"

namespace tclmarket::estimation {

// Discrete uncertain ETP model with Gaussian noise:
//   eta_k = A eta_{k-1} + B zeta_{k-1} + C(q_{k-1}) + w,   w ~ N(0, Q)
//   y_k   = L eta_k + v,                                   v ~ N(0, R)
// with L = [1, 0] and eta_1 ~ N(m0, P0). zeta = (outdoor temp degF, solar
// gain kW).
struct UncertainModel {
    Mat2 a_bar;
    Mat2 b_bar;
    Vec2 c_on;
    Vec2 c_off;
    Mat2 q_cov;
    double r_var = 0.0;
    Vec2 m0;
    Mat2 p0;

    void validate() const {
        if (r_var < 0.0) throw ConfigError("UncertainModel: measurement variance < 0");
        const auto psd = [](const Mat2& m, const char* name) {
            const Mat2 s = m.symmetrized();
            if (s.a < -1e-12 || s.d < -1e-12 || s.det() < -1e-9 * std::max(1.0, s.max_abs()))
                throw ConfigError(std::string("UncertainModel: ") + name + " not PSD");
        };
        psd(q_cov, "process covariance");
        psd(p0, "initial covariance");
        if (!a_bar.finite() || !b_bar.finite() || !c_on.finite() || !c_off.finite())
            throw ConfigError("UncertainModel: non-finite entries");
    }

    Vec2 drive(const Vec2& exog, bool on) const {
        return b_bar * exog + (on ? c_on : c_off);
    }
};

// Per-minute air-temperature measurements with the relay state and exogenous
// signals recorded alongside.
struct MeasurementLog {
    std::vector<double> temps;       // y_k, degF
    std::vector<std::uint8_t> modes; // q_k
    std::vector<Vec2> exog;          // zeta_k

    std::size_t size() const { return temps.size(); }

    void validate() const {
        if (temps.size() != modes.size() || temps.size() != exog.size())
            throw SchemaError("MeasurementLog: column lengths differ");
        if (temps.size() < 3)
            throw SchemaError("MeasurementLog: need at least 3 samples, got " +
                              std::to_string(temps.size()));
    }
};

struct FilterResult {
    std::vector<Vec2> means;      // mu_k
    std::vector<Mat2> covs;       // Phi_k
    std::vector<Mat2> pred_covs;  // P_k = A Phi_k A^T + Q (prediction k -> k+1)
    std::vector<Vec2> gains;      // K_k
    double loglik = 0.0;
};

struct SmoothedPosterior {
    std::vector<Vec2> means;     // mu_hat_k
    std::vector<Mat2> covs;      // Phi_hat_k
    std::vector<Mat2> pairwise;  // E[eta_k eta_{k-1}^T], index k (k >= 1)
    double loglik = 0.0;
};

// Forward recursion. The output matrix L = [1, 0] makes the innovation
// scalar, so gains are 2-vectors and no matrix inverse is needed.
inline FilterResult kalman_filter(const UncertainModel& m, const MeasurementLog& log) {
    m.validate();
    log.validate();
    const std::size_t n = log.size();
    FilterResult out;
    out.means.resize(n);
    out.covs.resize(n);
    out.pred_covs.resize(n);
    out.gains.resize(n);

    const double log2pi = 1.8378770664093454836;

    // A fully degenerate model (both noises zero) can drive the innovation
    // variance to exact zero once the state is pinned. A consistent exact
    // measurement then carries no correction; an inconsistent one is a
    // genuine breakdown.
    const auto update = [&](std::size_t k, const Vec2& mean_pred, const Mat2& cov_pred) {
        const double s = cov_pred.a + m.r_var;
        const double innov = log.temps[k] - mean_pred.v0;
        if (s < 1e-13) {
            // an exact-zero variance (up to rounding) only admits an exactly
            // consistent measurement
            if (std::fabs(innov) > 1e-6 * std::max(1.0, std::fabs(log.temps[k])))
                throw NumericalBreakdown("kalman_filter: innovation variance " +
                                         std::to_string(s) + " at k=" + std::to_string(k));
            out.means[k] = mean_pred;
            out.covs[k] = cov_pred;
            out.gains[k] = Vec2{};
            return;
        }
        const Vec2 gain{cov_pred.a / s, cov_pred.c / s};
        out.means[k] = mean_pred + gain * innov;
        const Mat2 ikl{1.0 - gain.v0, 0.0, -gain.v1, 1.0};  // I - K L
        out.covs[k] = (ikl * cov_pred).symmetrized();
        out.gains[k] = gain;
        out.loglik += -0.5 * (log2pi + std::log(s) + innov * innov / s);
    };

    update(0, m.m0, m.p0.symmetrized());
    for (std::size_t k = 1; k < n; ++k) {
        const Mat2 pred = (m.a_bar * out.covs[k - 1] * m.a_bar.transpose() + m.q_cov).symmetrized();
        out.pred_covs[k - 1] = pred;
        const Vec2 mean_pred = m.a_bar * out.means[k - 1] + m.drive(log.exog[k - 1], log.modes[k - 1]);
        update(k, mean_pred, pred);
    }
    // prediction covariance past the last step, used by the smoother anchor
    out.pred_covs[n - 1] =
        (m.a_bar * out.covs[n - 1] * m.a_bar.transpose() + m.q_cov).symmetrized();
    return out;
}

// Backward (RTS) recursion plus the pairwise second moments the M-step
// needs: E[eta_k eta_{k-1}^T] = Phi_hat_k J_{k-1}^T + mu_hat_k mu_hat_{k-1}^T.
inline SmoothedPosterior kalman_smoother(const FilterResult& f, const UncertainModel& m,
                                         const MeasurementLog& log) {
    const std::size_t n = log.size();
    SmoothedPosterior out;
    out.means.resize(n);
    out.covs.resize(n);
    out.pairwise.assign(n, Mat2::zero());
    out.loglik = f.loglik;

    out.means[n - 1] = f.means[n - 1];
    out.covs[n - 1] = f.covs[n - 1];

    std::vector<Mat2> smoother_gain(n, Mat2::zero());
    for (std::size_t k = n - 1; k-- > 0;) {
        const Mat2& pred = f.pred_covs[k];
        if (!pred.finite())
            throw SingularPrediction("kalman_smoother: prediction covariance diverged at k=" +
                                     std::to_string(k));
        const Vec2 mean_pred = m.a_bar * f.means[k] + m.drive(log.exog[k], log.modes[k]);
        // plain inverse in the regular case; pseudo-inverse once a noise-free
        // model collapses the prediction to reduced rank
        const double scale = std::max(1e-30, pred.max_abs());
        const Mat2 pred_inv = std::fabs(pred.det()) < 1e-13 * scale * scale ? pred.pinv_psd()
                                                                            : pred.inverse();
        const Mat2 J = f.covs[k] * m.a_bar.transpose() * pred_inv;
        smoother_gain[k] = J;
        out.means[k] = f.means[k] + J * (out.means[k + 1] - mean_pred);
        out.covs[k] =
            (f.covs[k] + J * (out.covs[k + 1] - pred) * J.transpose()).symmetrized();
    }
    for (std::size_t k = 1; k < n; ++k) {
        out.pairwise[k] = out.covs[k] * smoother_gain[k - 1].transpose() +
                          Mat2::outer(out.means[k], out.means[k - 1]);
    }
    return out;
}

namespace detail {

inline Mat2 second_moment(const SmoothedPosterior& s, std::size_t k) {
    return s.covs[k] + Mat2::outer(s.means[k], s.means[k]);
}

inline double spectral_radius(const Mat2& m) {
    const double disc = 0.25 * m.trace() * m.trace() - m.det();
    if (disc >= 0.0) {
        const double r = std::sqrt(disc);
        return std::max(std::fabs(0.5 * m.trace() + r), std::fabs(0.5 * m.trace() - r));
    }
    return std::sqrt(std::fabs(m.det()));  // complex pair: |lambda|^2 = det
}

// The plant is a stable thermal system; a transition matrix beyond the unit
// circle (a bad initial guess, or noise in an early M-step) makes the
// covariance recursion explode. Contract it just inside. The target must sit
// essentially at the circle: building mass poles live at 0.998+ per minute
// and pulling them lower distorts the slow dynamics.
inline Mat2 stabilized(const Mat2& m) {
    const double rho = spectral_radius(m);
    if (rho < 1.0) return m;
    return m * (0.99999 / rho);
}

// Eigenvalue floor for symmetric 2x2 covariance updates.
inline Mat2 floor_psd(const Mat2& m, double floor = 1e-12) {
    const Mat2 s = m.symmetrized();
    const double tr = s.trace();
    const double disc = std::sqrt(std::max(0.0, 0.25 * (s.a - s.d) * (s.a - s.d) + s.b * s.b));
    const double l1 = 0.5 * tr + disc;
    const double l2 = 0.5 * tr - disc;
    if (l2 >= floor) return s;
    // shift the low eigenvalue up to the floor along its eigenvector
    const double bump1 = std::max(0.0, floor - l1);
    const double bump2 = floor - l2;
    // eigenvector for l2
    Vec2 v;
    if (std::fabs(s.b) > 1e-300) {
        v = {l2 - s.d, s.b};
    } else {
        v = (s.a <= s.d) ? Vec2{1.0, 0.0} : Vec2{0.0, 1.0};
    }
    const double nrm = v.norm();
    if (nrm > 0.0) v = v * (1.0 / nrm);
    Mat2 fixed = s + Mat2::outer(v, v) * bump2;
    if (bump1 > 0.0) {
        const Vec2 w{-v.v1, v.v0};
        fixed = fixed + Mat2::outer(w, w) * bump1;
    }
    return fixed.symmetrized();
}

} // namespace detail

// Closed-form maximization of the expected complete-data log likelihood.
// Update order follows the printed equations: A uses the previous B and C on
// the right-hand side, B uses the new A, C uses both new values, then the
// noise covariances. joint_ls instead solves all linear coefficients in one
// least-squares block.
inline UncertainModel m_step(const SmoothedPosterior& s, const MeasurementLog& log,
                             const UncertainModel& prev, bool joint_ls = false) {
    const std::size_t n = log.size();
    UncertainModel next = prev;

    // initial state
    next.m0 = s.means[0];
    next.p0 = detail::floor_psd(s.covs[0]);

    const auto c_prev = [&](std::size_t k) { return log.modes[k - 1] ? prev.c_on : prev.c_off; };

    if (!joint_ls) {
        // A update, eq-by-eq order
        Mat2 num = Mat2::zero();
        Mat2 den = Mat2::zero();
        for (std::size_t k = 1; k < n; ++k) {
            const Vec2 mu_prev = s.means[k - 1];
            num = num + s.pairwise[k] - Mat2::outer(prev.b_bar * log.exog[k - 1], mu_prev) -
                  Mat2::outer(c_prev(k), mu_prev);
            den = den + detail::second_moment(s, k - 1);
        }
        if (std::fabs(den.det()) < 1e-12 * den.max_abs() * den.max_abs())
            throw RankDeficient("m_step: state second-moment sum is singular");
        next.a_bar = num * den.inverse();

        // B update with the new A
        Mat2 bnum = Mat2::zero();
        Mat2 bden = Mat2::zero();
        for (std::size_t k = 1; k < n; ++k) {
            const Vec2 resid = s.means[k] - next.a_bar * s.means[k - 1] - c_prev(k);
            bnum = bnum + Mat2::outer(resid, log.exog[k - 1]);
            bden = bden + Mat2::outer(log.exog[k - 1], log.exog[k - 1]);
        }
        if (std::fabs(bden.det()) < 1e-12 * bden.max_abs() * bden.max_abs())
            throw RankDeficient("m_step: exogenous second-moment sum is singular"
                                " (insufficient excitation)");
        next.b_bar = bnum * bden.inverse();

        // C updates partitioned over the on/off transitions
        Vec2 c_on_sum{}, c_off_sum{};
        int n_on = 0, n_off = 0;
        for (std::size_t k = 1; k < n; ++k) {
            const Vec2 resid =
                s.means[k] - next.a_bar * s.means[k - 1] - next.b_bar * log.exog[k - 1];
            if (log.modes[k - 1]) {
                c_on_sum = c_on_sum + resid;
                ++n_on;
            } else {
                c_off_sum = c_off_sum + resid;
                ++n_off;
            }
        }
        if (n_on > 0) next.c_on = c_on_sum * (1.0 / n_on);
        if (n_off > 0) next.c_off = c_off_sum * (1.0 / n_off);
    } else {
        // single least-squares block over (A, B, c_on, c_off): 6 regressors
        double G[6][6] = {};
        double H[2][6] = {};
        for (std::size_t k = 1; k < n; ++k) {
            const Mat2 mm = detail::second_moment(s, k - 1);
            const Vec2 mu_p = s.means[k - 1];
            const Vec2 z = log.exog[k - 1];
            const bool on = log.modes[k - 1];
            const double ind_on = on ? 1.0 : 0.0;
            const double ind_off = on ? 0.0 : 1.0;
            // regressor x = [eta_{k-1}; zeta; 1_on; 1_off]; E[x x^T] blocks
            const double exx[6][6] = {
                {mm.a, mm.b, mu_p.v0 * z.v0, mu_p.v0 * z.v1, mu_p.v0 * ind_on, mu_p.v0 * ind_off},
                {mm.c, mm.d, mu_p.v1 * z.v0, mu_p.v1 * z.v1, mu_p.v1 * ind_on, mu_p.v1 * ind_off},
                {z.v0 * mu_p.v0, z.v0 * mu_p.v1, z.v0 * z.v0, z.v0 * z.v1, z.v0 * ind_on,
                 z.v0 * ind_off},
                {z.v1 * mu_p.v0, z.v1 * mu_p.v1, z.v1 * z.v0, z.v1 * z.v1, z.v1 * ind_on,
                 z.v1 * ind_off},
                {ind_on * mu_p.v0, ind_on * mu_p.v1, ind_on * z.v0, ind_on * z.v1, ind_on, 0.0},
                {ind_off * mu_p.v0, ind_off * mu_p.v1, ind_off * z.v0, ind_off * z.v1, 0.0,
                 ind_off}};
            for (int r = 0; r < 6; ++r)
                for (int c = 0; c < 6; ++c) G[r][c] += exx[r][c];
            const Mat2 pw = s.pairwise[k];
            const Vec2 mu_k = s.means[k];
            const double eyx[2][6] = {
                {pw.a, pw.b, mu_k.v0 * z.v0, mu_k.v0 * z.v1, mu_k.v0 * ind_on, mu_k.v0 * ind_off},
                {pw.c, pw.d, mu_k.v1 * z.v0, mu_k.v1 * z.v1, mu_k.v1 * ind_on, mu_k.v1 * ind_off}};
            for (int r = 0; r < 2; ++r)
                for (int c = 0; c < 6; ++c) H[r][c] += eyx[r][c];
        }
        // Gaussian elimination on G^T theta^T = H^T, with empty-mode columns
        // pinned to the previous estimate.
        bool any_on = false, any_off = false;
        for (std::size_t k = 1; k < n; ++k) (log.modes[k - 1] ? any_on : any_off) = true;
        int dim = 6;
        if (!any_on || !any_off) dim = 5;  // drop the absent indicator column
        double M[6][8];
        const int on_col = 4, off_col = 5;
        const int drop = !any_on ? on_col : (!any_off ? off_col : -1);
        std::vector<int> cols;
        for (int c = 0; c < 6; ++c)
            if (c != drop) cols.push_back(c);
        for (int r = 0; r < dim; ++r) {
            for (int c = 0; c < dim; ++c) M[r][c] = G[cols[r]][cols[c]];
            M[r][dim] = H[0][cols[r]];
            M[r][dim + 1] = H[1][cols[r]];
        }
        for (int p = 0; p < dim; ++p) {
            int piv = p;
            for (int r = p + 1; r < dim; ++r)
                if (std::fabs(M[r][p]) > std::fabs(M[piv][p])) piv = r;
            if (std::fabs(M[piv][p]) < 1e-12)
                throw RankDeficient("m_step: joint regression matrix is singular");
            if (piv != p)
                for (int c = 0; c <= dim + 1; ++c) std::swap(M[p][c], M[piv][c]);
            for (int r = 0; r < dim; ++r) {
                if (r == p) continue;
                const double f = M[r][p] / M[p][p];
                for (int c = p; c <= dim + 1; ++c) M[r][c] -= f * M[p][c];
            }
        }
        double theta[2][6] = {};
        for (int r = 0; r < dim; ++r) {
            theta[0][cols[r]] = M[r][dim] / M[r][r];
            theta[1][cols[r]] = M[r][dim + 1] / M[r][r];
        }
        next.a_bar = {theta[0][0], theta[0][1], theta[1][0], theta[1][1]};
        next.b_bar = {theta[0][2], theta[0][3], theta[1][2], theta[1][3]};
        if (any_on) next.c_on = {theta[0][4], theta[1][4]};
        if (any_off) next.c_off = {theta[0][5], theta[1][5]};
    }

    // process covariance: expected residual second moment under the new
    // linear parameters
    Mat2 omega = Mat2::zero();
    for (std::size_t k = 1; k < n; ++k) {
        const Mat2 Anew = next.a_bar;
        const Vec2 d = next.b_bar * log.exog[k - 1] + (log.modes[k - 1] ? next.c_on : next.c_off);
        const Mat2 ekk = detail::second_moment(s, k);
        const Mat2 ekp = s.pairwise[k];
        const Mat2 epp = detail::second_moment(s, k - 1);
        const Vec2 mu_k = s.means[k];
        const Vec2 mu_p = s.means[k - 1];
        Mat2 term = ekk - ekp * Anew.transpose() - Anew * ekp.transpose() +
                    Anew * epp * Anew.transpose();
        term = term - Mat2::outer(d, mu_k) - Mat2::outer(mu_k, d) +
               Anew * Mat2::outer(mu_p, d) + Mat2::outer(d, mu_p) * Anew.transpose() +
               Mat2::outer(d, d);
        omega = omega + term;
    }
    next.q_cov = detail::floor_psd(omega * (1.0 / double(n - 1)));

    // measurement variance
    double sigma = 0.0;
    for (std::size_t k = 0; k < n; ++k) {
        const double y = log.temps[k];
        const Mat2 ekk = detail::second_moment(s, k);
        sigma += y * y - 2.0 * y * s.means[k].v0 + ekk.a;
    }
    next.r_var = std::max(sigma / double(n), 1e-12);

    return next;
}

struct EmResult {
    UncertainModel model;
    std::vector<double> loglik_trace;
    bool converged = false;
    double max_loglik_drop = 0.0;  // beyond-jitter decreases, if any
    int iterations = 0;            // M-steps performed
};

// Alternate E (filter + smoother) and M until the relative log-likelihood
// improvement falls below tol.
inline EmResult em_fit(const MeasurementLog& log, const UncertainModel& init, int max_iters = 200,
                       double tol = 1e-8, bool joint_ls = false) {
    log.validate();
    EmResult out;
    out.model = init;
    out.model.a_bar = detail::stabilized(init.a_bar);
    double prev_ll = -std::numeric_limits<double>::infinity();
    for (int it = 0; it < max_iters; ++it) {
        const FilterResult f = kalman_filter(out.model, log);
        const SmoothedPosterior s = kalman_smoother(f, out.model, log);
        out.loglik_trace.push_back(f.loglik);
        if (std::isfinite(prev_ll)) {
            const double drop = prev_ll - f.loglik;
            if (drop > 1e-9) out.max_loglik_drop = std::max(out.max_loglik_drop, drop);
            const double rel = (f.loglik - prev_ll) / std::max(1.0, std::fabs(prev_ll));
            if (std::fabs(rel) < tol) {
                out.converged = true;
                break;
            }
        }
        prev_ll = f.loglik;
        const UncertainModel prev = out.model;
        out.model = m_step(s, log, out.model, joint_ls);
        out.model.a_bar = detail::stabilized(out.model.a_bar);
        out.iterations = it + 1;
        // exact stationarity of the parameters (a noise-free fixed point
        // keeps the likelihood jittering at the covariance floor)
        double delta = std::max({(out.model.a_bar - prev.a_bar).max_abs(),
                                 (out.model.b_bar - prev.b_bar).max_abs(),
                                 (out.model.c_on - prev.c_on).norm(),
                                 (out.model.c_off - prev.c_off).norm(),
                                 (out.model.q_cov - prev.q_cov).max_abs(),
                                 std::fabs(out.model.r_var - prev.r_var),
                                 (out.model.m0 - prev.m0).norm(),
                                 (out.model.p0 - prev.p0).max_abs()});
        if (delta < 1e-10) {
            out.converged = true;
            break;
        }
    }
    return out;
}

// EM is prone to poor local optima when the initial guess badly misplaces
// the latent mass coordinate. Re-run from jittered copies of the initial
// guess and keep the best final likelihood.
inline EmResult em_fit_multistart(const MeasurementLog& log, const UncertainModel& init,
                                  int restarts, std::uint64_t seed, int max_iters = 200,
                                  double tol = 1e-8, bool joint_ls = false) {
    EmResult best = em_fit(log, init, max_iters, tol, joint_ls);
    Rng rng(seed);
    for (int r = 1; r < restarts; ++r) {
        UncertainModel cand = init;
        // widen the search as restarts accumulate; best-likelihood keeps it safe
        const double width = 0.15 * (1.0 + 0.5 * (r - 1));
        const auto jitter = [&](double x) { return x * rng.uniform(1.0 - width, 1.0 + width); };
        cand.a_bar = {jitter(init.a_bar.a), jitter(init.a_bar.b), jitter(init.a_bar.c),
                      jitter(init.a_bar.d)};
        cand.b_bar = {jitter(init.b_bar.a), jitter(init.b_bar.b), jitter(init.b_bar.c),
                      jitter(init.b_bar.d)};
        cand.c_on = {jitter(init.c_on.v0), jitter(init.c_on.v1)};
        cand.c_off = {jitter(init.c_off.v0), jitter(init.c_off.v1)};
        cand.m0 = {jitter(init.m0.v0), jitter(init.m0.v1)};
        EmResult res = em_fit(log, cand, max_iters, tol, joint_ls);
        if (res.loglik_trace.back() > best.loglik_trace.back()) best = res;
    }
    return best;
}

// Convert a continuous ETP model with structural weather coupling into the
// exact zero-order-hold discretization at step dt_h. The continuous drive is
// B_mode(zeta) = G zeta + g_mode.
inline UncertainModel exact_discretization(const Mat2& a_cont, const Mat2& coupling,
                                           const Vec2& g_on, const Vec2& g_off, double dt_h,
                                           const Mat2& q_cov, double r_var, const Vec2& m0,
                                           const Mat2& p0) {
    UncertainModel m;
    m.a_bar = expm(a_cont, dt_h);
    const Mat2 phi = exp_integral(a_cont, dt_h);
    m.b_bar = phi * coupling;
    m.c_on = phi * g_on;
    m.c_off = phi * g_off;
    m.q_cov = q_cov;
    m.r_var = r_var;
    m.m0 = m0;
    m.p0 = p0;
    return m;
}

// Output-based bid: smooth the state under the fitted model, roll the fitted
// on-mode recursion across one market period to get the discrete analogue of
// T_f, then price the two setpoint thresholds on the bidding curve.
inline agent::Bid bid_from_estimate(const UncertainModel& model, const MeasurementLog& log,
                                    const agent::UserPrefs& prefs, const agent::PriceStats& stats,
                                    double deadband, double q_measured, std::string load_id = {},
                                    int period_steps = 5) {
    const FilterResult f = kalman_filter(model, log);
    const SmoothedPosterior s = kalman_smoother(f, model, log);
    const Vec2 eta_hat = s.means.back();
    const Vec2 zeta = log.exog.back();
    const double half = 0.5 * deadband;
    const double t_c = eta_hat.v0;

    const auto roll = [&](bool on) {
        Vec2 eta = eta_hat;
        for (int i = 0; i < period_steps; ++i) eta = model.a_bar * eta + model.drive(zeta, on);
        return eta.v0;
    };

    double u1, u2;
    if (log.modes.back()) {
        u1 = t_c + half;
        u2 = roll(true) + half;
    } else {
        u1 = roll(false) - half;
        u2 = std::min(t_c - half, roll(true) + half);
        u2 = std::min(u1, u2);
    }
    const double p1 = agent::bid_price_from_curve(u1, prefs, stats);
    const double p2 = agent::bid_price_from_curve(u2, prefs, stats);
    agent::Bid bid;
    bid.price = 0.5 * (p1 + p2);
    bid.quantity = q_measured;
    bid.load_id = std::move(load_id);
    return bid;
}

} // namespace tclmarket::estimation
