#pragma once

#include <array>
#include <cmath>
#include <limits>

#include "tclmarket/common.hpp"

namespace tclmarket {

struct Vec2 {
    double v0 = 0.0;
    double v1 = 0.0;

    double operator[](int i) const { return i == 0 ? v0 : v1; }
    double& operator[](int i) { return i == 0 ? v0 : v1; }

    Vec2 operator+(const Vec2& o) const { return {v0 + o.v0, v1 + o.v1}; }
    Vec2 operator-(const Vec2& o) const { return {v0 - o.v0, v1 - o.v1}; }
    Vec2 operator*(double s) const { return {v0 * s, v1 * s}; }
    Vec2 operator-() const { return {-v0, -v1}; }

    double dot(const Vec2& o) const { return v0 * o.v0 + v1 * o.v1; }
    double norm() const { return std::sqrt(dot(*this)); }
    bool finite() const { return std::isfinite(v0) && std::isfinite(v1); }
};

// Row-major 2x2 matrix: [[a, b], [c, d]].
struct Mat2 {
    double a = 0.0, b = 0.0, c = 0.0, d = 0.0;

    static Mat2 identity() { return {1.0, 0.0, 0.0, 1.0}; }
    static Mat2 zero() { return {0.0, 0.0, 0.0, 0.0}; }
    static Mat2 diag(double x, double y) { return {x, 0.0, 0.0, y}; }
    static Mat2 outer(const Vec2& u, const Vec2& w) {
        return {u.v0 * w.v0, u.v0 * w.v1, u.v1 * w.v0, u.v1 * w.v1};
    }

    double at(int r, int col) const { return r == 0 ? (col == 0 ? a : b) : (col == 0 ? c : d); }
    double& at(int r, int col) { return r == 0 ? (col == 0 ? a : b) : (col == 0 ? c : d); }

    Mat2 operator+(const Mat2& o) const { return {a + o.a, b + o.b, c + o.c, d + o.d}; }
    Mat2 operator-(const Mat2& o) const { return {a - o.a, b - o.b, c - o.c, d - o.d}; }
    Mat2 operator*(double s) const { return {a * s, b * s, c * s, d * s}; }
    Mat2 operator*(const Mat2& o) const {
        return {a * o.a + b * o.c, a * o.b + b * o.d,
                c * o.a + d * o.c, c * o.b + d * o.d};
    }
    Vec2 operator*(const Vec2& x) const { return {a * x.v0 + b * x.v1, c * x.v0 + d * x.v1}; }

    Mat2 transpose() const { return {a, c, b, d}; }
    double trace() const { return a + d; }
    double det() const { return a * d - b * c; }
    double max_abs() const {
        return std::max(std::max(std::fabs(a), std::fabs(b)), std::max(std::fabs(c), std::fabs(d)));
    }
    bool finite() const {
        return std::isfinite(a) && std::isfinite(b) && std::isfinite(c) && std::isfinite(d);
    }

    Mat2 inverse() const {
        const double dt = det();
        const double scale = max_abs();
        if (dt == 0.0 || std::fabs(dt) < 1e-14 * scale * scale)
            throw SingularMatrix("2x2 inverse: determinant " + std::to_string(dt));
        const double r = 1.0 / dt;
        return {d * r, -b * r, -c * r, a * r};
    }

    Vec2 solve(const Vec2& rhs) const { return inverse() * rhs; }

    Mat2 symmetrized() const {
        const double off = 0.5 * (b + c);
        return {a, off, off, d};
    }

    // Moore-Penrose inverse of a symmetric PSD matrix, dropping eigenvalues
    // below rel_tol of the largest. Used where a noise-free model collapses
    // a covariance to reduced rank.
    Mat2 pinv_psd(double rel_tol = 1e-12) const {
        const Mat2 s = symmetrized();
        const double tr = s.trace();
        const double disc = std::sqrt(std::max(0.0, 0.25 * (s.a - s.d) * (s.a - s.d) + s.b * s.b));
        const double l1 = 0.5 * tr + disc;
        const double l2 = 0.5 * tr - disc;
        const double cut = rel_tol * std::max(std::fabs(l1), std::fabs(l2));
        Vec2 v1;
        if (std::fabs(s.b) > 1e-300)
            v1 = {s.b, l1 - s.a};
        else
            v1 = (s.a >= s.d) ? Vec2{1.0, 0.0} : Vec2{0.0, 1.0};
        const double n1 = v1.norm();
        if (n1 > 0.0) v1 = v1 * (1.0 / n1);
        const Vec2 v2{-v1.v1, v1.v0};
        Mat2 out = Mat2::zero();
        if (l1 > cut && l1 > 0.0) out = out + Mat2::outer(v1, v1) * (1.0 / l1);
        if (l2 > cut && l2 > 0.0) out = out + Mat2::outer(v2, v2) * (1.0 / l2);
        return out;
    }
};

// Both eigenvalues in the open left half-plane; for 2x2 this is
// trace < 0 and det > 0.
inline bool is_hurwitz(const Mat2& m) { return m.trace() < 0.0 && m.det() > 0.0; }

namespace detail {

// Taylor series with scaling and squaring; only used when the eigenvalue
// gap is too small for the spectral closed forms.
inline Mat2 expm_scaled_taylor(const Mat2& m) {
    int s = 0;
    double scale = m.max_abs();
    while (scale > 0.5) {
        scale *= 0.5;
        ++s;
    }
    const Mat2 x = m * std::ldexp(1.0, -s);
    Mat2 term = Mat2::identity();
    Mat2 sum = term;
    for (int k = 1; k <= 18; ++k) {
        term = (term * x) * (1.0 / k);
        sum = sum + term;
    }
    for (int k = 0; k < s; ++k) sum = sum * sum;
    return sum;
}

} // namespace detail

// e^{A t}, exact closed form from the 2x2 spectrum.
inline Mat2 expm(const Mat2& A, double t) {
    if (t == 0.0) return Mat2::identity();
    const double tr = A.trace();
    const double dt = A.det();
    const double disc = 0.25 * tr * tr - dt;
    const Mat2 I = Mat2::identity();
    const double gap_tol = 1e-8;

    if (disc > 0.0) {
        const double root = std::sqrt(disc);
        if (2.0 * root > gap_tol) {
            const double l1 = 0.5 * tr + root;
            const double l2 = 0.5 * tr - root;
            const double e1 = std::exp(l1 * t);
            const double e2 = std::exp(l2 * t);
            // e^{At} = [e1 (A - l2 I) - e2 (A - l1 I)] / (l1 - l2)
            return ((A - I * l2) * e1 - (A - I * l1) * e2) * (1.0 / (l1 - l2));
        }
    } else if (disc < 0.0) {
        const double w = std::sqrt(-disc);
        if (2.0 * w > gap_tol) {
            const double alpha = 0.5 * tr;
            const double ea = std::exp(alpha * t);
            const double cw = std::cos(w * t);
            const double sw = std::sin(w * t) / w;
            return (I * cw + (A - I * alpha) * sw) * ea;
        }
    }
    return detail::expm_scaled_taylor(A * t);
}

// Phi(t) = integral_0^t e^{A s} ds = A^{-1}(e^{A t} - I); requires invertible A.
inline Mat2 exp_integral(const Mat2& A, double t) {
    return A.inverse() * (expm(A, t) - Mat2::identity());
}

} // namespace tclmarket
