#pragma once

#include <cmath>

namespace fracphi4 {

// Smooth cutoff profile j: [0,inf) -> [0,1] with j = 1 on [0,1], j = 0 on
// [2,inf), monotone in between.  Built from the standard exp(-1/x) partition
// so every derivative vanishes at both glue points; the one-sided glue
// exp(1 - 1/(1-u^2)) is only C^1 at the inner edge and fails the smoothness
// requirement there.
namespace bump_detail {
inline double f(double x) { return x > 0.0 ? std::exp(-1.0 / x) : 0.0; }
// f'(x) = f(x)/x^2
inline double fp(double x) { return x > 0.0 ? std::exp(-1.0 / x) / (x * x) : 0.0; }
}  // namespace bump_detail

inline double bump_j(double eta) {
    double a = std::abs(eta);
    if (a <= 1.0) return 1.0;
    if (a >= 2.0) return 0.0;
    double f2 = bump_detail::f(2.0 - a);
    double f1 = bump_detail::f(a - 1.0);
    return f2 / (f2 + f1);
}

// dj/deta on eta >= 0 (profile is even).
inline double bump_j_prime(double eta) {
    double a = std::abs(eta);
    if (a <= 1.0 || a >= 2.0) return 0.0;
    double f2 = bump_detail::f(2.0 - a);
    double f1 = bump_detail::f(a - 1.0);
    double f2p = -bump_detail::fp(2.0 - a);
    double f1p = bump_detail::fp(a - 1.0);
    double den = (f2 + f1) * (f2 + f1);
    double s = (f2p * f1 - f2 * f1p) / den;
    return eta >= 0.0 ? s : -s;
}

// h(eta) := -eta * j'(eta) >= 0, supported on 1 < |eta| < 2.  Drives the
// analytic sigma-derivative of the cutoff multipliers.
inline double bump_h(double eta) { return -eta * bump_j_prime(eta); }

// Scaled profile of Definition-4 type: j(2^{-ell} * (1-sigma)/sigma * eta).
inline double j_profile(double eta, double sigma, int ell) {
    double tau = std::ldexp((1.0 - sigma) / sigma, -ell);
    return bump_j(tau * eta);
}

// Plateau bump for the continuum embedding: 1 on [0,1/2], 0 beyond 1.
inline double theta_bump(double eta) { return bump_j(2.0 * std::abs(eta)); }

// Dyadic Littlewood-Paley profiles on q >= 0: block -1 is a ball, block i>=0
// an annulus at radius ~2^i; consecutive blocks overlap, others are disjoint,
// and the family sums to one below the outermost plateau.
inline double lp_profile(int i, double q) {
    auto chi = [](double x) { return bump_j(2.0 * std::abs(x)); };  // 1 on |x|<=1/2
    if (i == -1) return chi(q);
    return chi(std::ldexp(q, -i - 1)) - chi(std::ldexp(q, -i));
}

// Smooth scalar plateau used by the v-type tree weights: 1 for r <= 1,
// 0 for r >= 2.
inline double plateau_cut(double r) { return bump_j(r); }

}  // namespace fracphi4
