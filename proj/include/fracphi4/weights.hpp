#pragma once

#include <array>
#include <cmath>
#include <stdexcept>
#include <vector>

#include "bump.hpp"
#include "lattice.hpp"
#include "scale_ops.hpp"

namespace fracphi4 {

struct ParabolicPoint {
    double t = 0.0;
    std::array<double, 3> x{};
    int d = 1;
};

// Fractional parabolic distance |z|_s = (|t|^{1/s} + |x|^2)^{1/2}.
inline double parabolic_norm(const ParabolicPoint& z, double s) {
    double r2 = 0.0;
    for (int a = 0; a < z.d; ++a) r2 += z.x[a] * z.x[a];
    return std::sqrt(std::pow(std::abs(z.t), 1.0 / s) + r2);
}

// Torus/window-reduced difference of two points.
inline ParabolicPoint periodic_diff(const ParabolicPoint& a, const ParabolicPoint& b,
                                    const LatticeSpec& lat) {
    ParabolicPoint r;
    r.d = a.d;
    double tw = 2.0 * lat.T;
    r.t = a.t - b.t;
    r.t -= tw * std::round(r.t / tw);
    double P = lat.period();
    for (int i = 0; i < a.d; ++i) {
        double dx = a.x[i] - b.x[i];
        dx -= P * std::round(dx / P);
        r.x[i] = dx;
    }
    return r;
}

inline double parabolic_dist(const ParabolicPoint& a, const ParabolicPoint& b,
                             const LatticeSpec& lat, double s) {
    return parabolic_norm(periodic_diff(a, b, lat), s);
}

// Weight parameter pack: rescaling exponent a, weight power v, polynomial
// exponent kappa0, tree-weight exponent flat_b.
struct WeightSpec {
    double a = 2.0;
    double v = 0.1;
    double kappa0 = 0.01;
    double flat_b = 1.2;
    double s = 0.8;

    void validate() const {
        if (!(a > 1.0)) throw std::invalid_argument("weights: a must exceed 1");
        if (!(v > 0.0 && v < 1.0 / 3.0))
            throw std::invalid_argument("weights: v must lie in (0,1/3)");
        if (!(kappa0 > 0.0)) throw std::invalid_argument("weights: kappa0 positive");
        if (!(flat_b > 0.0 && flat_b < 2.0 * s))
            throw std::invalid_argument("weights: flat_b must lie in (0,2s)");
    }
};

// zeta_mu(z) = (1 + ([[mu]]^a |z|_s)^2)^{-1/2}; rho_mu = zeta_mu^v.
inline double zeta_mu(const ParabolicPoint& z, double mu, const WeightSpec& w) {
    double r = std::pow(bracket(mu), w.a) * parabolic_norm(z, w.s);
    return 1.0 / std::sqrt(1.0 + r * r);
}
inline double rho_mu(const ParabolicPoint& z, double mu, const WeightSpec& w) {
    return std::pow(zeta_mu(z, mu, w), w.v);
}

// Polynomial space-time weight o(z) = <z>_s^{-kappa0}.
inline double o_weight(const ParabolicPoint& z, const WeightSpec& w) {
    double n = parabolic_norm(z, w.s);
    return std::pow(1.0 + n * n, -0.5 * w.kappa0);
}

// h_mu(z,z') = (1 + [[mu]]^{-2} |z-z'|_s^2)^{-1}, evaluated on a difference.
inline double h_mu(const ParabolicPoint& diff, double mu, double s) {
    double r = parabolic_norm(diff, s) / bracket(mu);
    return 1.0 / (1.0 + r * r);
}

// Minimum-spanning-tree length under the parabolic distance: the computable
// surrogate for the Steiner diameter (exact for n <= 2, within a factor two
// in general; every tested inequality is constant-tolerant).
inline double steiner_proxy(const std::vector<ParabolicPoint>& pts,
                            const LatticeSpec& lat, double s) {
    size_t n = pts.size();
    if (n == 0) throw std::invalid_argument("steiner_proxy: empty point set");
    if (n == 1) return 0.0;
    std::vector<double> mind(n, 1e300);
    std::vector<bool> used(n, false);
    used[0] = true;
    for (size_t j = 1; j < n; ++j) mind[j] = parabolic_dist(pts[0], pts[j], lat, s);
    double total = 0.0;
    for (size_t it = 1; it < n; ++it) {
        size_t best = 0;
        double bd = 1e300;
        for (size_t j = 0; j < n; ++j)
            if (!used[j] && mind[j] < bd) {
                bd = mind[j];
                best = j;
            }
        used[best] = true;
        total += bd;
        for (size_t j = 0; j < n; ++j)
            if (!used[j])
                mind[j] = std::min(mind[j], parabolic_dist(pts[best], pts[j], lat, s));
    }
    return total;
}

// Tree weight w_mu^{(1+m),omega} = (1 + [[mu]]^{-1} St)^omega on a point set.
inline double tree_weight(const std::vector<ParabolicPoint>& pts, double mu,
                          double omega, const LatticeSpec& lat, double s) {
    double st = steiner_proxy(pts, lat, s);
    return std::pow(1.0 + st / bracket(mu), omega);
}

// Smooth plateau weight v_mu^{(1+m)}: 1 when St <= [[mu]], 0 when St >= 2[[mu]].
inline double v_weight(const std::vector<ParabolicPoint>& pts, double mu,
                       const LatticeSpec& lat, double s) {
    double st = steiner_proxy(pts, lat, s);
    return plateau_cut(st / bracket(mu));
}

// ParabolicPoint of a space-time grid node in the fundamental window.
inline ParabolicPoint grid_point(const LatticeSpec& lat, int it, long site) {
    ParabolicPoint z;
    z.d = lat.d;
    z.t = lat.tcoord(it);
    std::array<int, 3> xv{};
    site_unpack(lat, site, xv);
    for (int a = 0; a < lat.d; ++a) z.x[a] = lat.coord(xv[a]);
    return z;
}

// Tables of zeta_mu / rho_mu / o over the space-time grid (origin at index 0).
inline std::vector<double> zeta_table(const LatticeSpec& lat, double mu,
                                      const WeightSpec& w, double power = 1.0) {
    std::vector<double> out(lat.n_spacetime());
    long ns = lat.n_sites();
    for (int t = 0; t < lat.Nt; ++t)
        for (long i = 0; i < ns; ++i)
            out[st_pack(lat, t, i)] =
                std::pow(zeta_mu(grid_point(lat, t, i), mu, w), power);
    return out;
}

inline std::vector<double> parabolic_norm_table(const LatticeSpec& lat, double s) {
    std::vector<double> out(lat.n_spacetime());
    long ns = lat.n_sites();
    for (int t = 0; t < lat.Nt; ++t)
        for (long i = 0; i < ns; ++i)
            out[st_pack(lat, t, i)] = parabolic_norm(grid_point(lat, t, i), s);
    return out;
}

}  // namespace fracphi4
