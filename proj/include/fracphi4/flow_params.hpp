#pragma once

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "weights.hpp"

namespace fracphi4 {

// Perturbative grade of a force kernel: order ell in the flow expansion and
// polynomial degree k in the field.
struct GradeIndex {
    int ell = 0;
    int k = 0;
    bool operator==(const GradeIndex&) const = default;
    bool operator<(const GradeIndex& o) const {
        return ell != o.ell ? ell < o.ell : k < o.k;
    }
};

// Multi-index of a joint cumulant, kept sorted for canonical identity.
struct MultiIndex {
    std::vector<GradeIndex> slots;

    static MultiIndex of(std::vector<GradeIndex> s) {
        MultiIndex m;
        m.slots = std::move(s);
        std::sort(m.slots.begin(), m.slots.end());
        return m;
    }
    int n() const { return static_cast<int>(slots.size()); }
    int L() const {
        int l = 0;
        for (auto& g : slots) l += g.ell;
        return l;
    }
    int K() const {
        int k = 0;
        for (auto& g : slots) k += g.k;
        return k;
    }
    bool operator==(const MultiIndex&) const = default;
    bool operator<(const MultiIndex& o) const { return slots < o.slots; }
};

enum class Relevance { relevant, marginal, irrelevant };

// Full parameter vector of the flow analysis.  ell_bar is the working
// truncation order of the computation; ell_star is the analytic order needed
// by the post-processing row [C], which at desk scale far exceeds ell_bar and
// is carried separately.
struct FlowParams {
    double s = 0.8;
    int d = 1;
    double kappa = 0.0;

    double delta_star = 0.0;
    double delta = 0.0;
    double beta = 0.0;
    double theta = 0.0;
    double rho_hom = 0.0;
    double alpha = 0.0;
    double zeta_exp = 0.0;
    double gamma = 0.0;

    double kappa_bar = 0.0;
    double kappa0 = 0.0;
    double flat_b = 0.0;
    double a = 0.0;
    double v = 0.0;

    int ell_bar = 1;
    int k_bar = 5;
    int ell_hat = 0;
    int ell_star = 0;

    double hom(const GradeIndex& g) const { return -alpha + delta * g.ell + beta * g.k; }
    double hom(const MultiIndex& m) const {
        return -rho_hom + theta * m.n() + delta * m.L() + beta * m.K();
    }

    static Relevance classify(double h, double tol = 1e-12) {
        if (h < -tol) return Relevance::relevant;
        if (h > tol) return Relevance::irrelevant;
        return Relevance::marginal;
    }

    // Maximal polynomial degree reachable at order ell from cubic seeds.
    static int k_max(int ell) { return 2 * ell + 3; }

    WeightSpec weight_spec() const {
        WeightSpec w;
        w.a = a;
        w.v = v;
        w.kappa0 = kappa0;
        w.flat_b = flat_b;
        w.s = s;
        return w;
    }
};

namespace params_detail {
inline void require(bool ok, const std::string& row) {
    if (!ok) throw std::invalid_argument("resolve_params: violated " + row);
}
}  // namespace params_detail

// Fixes every parameter from (s, d, kappa, ell_bar), saturating the paper's
// choices: beta = s - delta/2 - kappa/2, theta = 3 beta, rho = 2 theta,
// alpha = 3 beta + kappa, delta = delta*/2, zeta = delta*/16, gamma = beta - zeta.
// Throws naming the first violated table row.
inline FlowParams resolve_params(double s, int d, double kappa, int ell_bar) {
    using params_detail::require;
    FlowParams p;
    p.s = s;
    p.d = d;
    p.kappa = kappa;
    p.ell_bar = ell_bar;
    if (!(s > 0.0 && s <= 1.0))
        throw std::invalid_argument("resolve_params: s must lie in (0,1]");
    require(kappa >= 0.0, "kappa >= 0");
    require(ell_bar >= 0, "ell_bar >= 0");

    p.delta_star = (4.0 * s - d) / 3.0;
    require(p.delta_star > 0.0, "subcriticality (delta* = (4s-d)/3 must be positive)");

    p.delta = 0.5 * p.delta_star;
    p.zeta_exp = p.delta_star / 16.0;
    p.beta = s - 0.5 * p.delta - 0.5 * kappa;
    p.theta = 3.0 * p.beta;
    p.rho_hom = 2.0 * p.theta;
    p.alpha = 3.0 * p.beta + kappa;
    p.gamma = p.beta - p.zeta_exp;
    require(p.beta > 0.0, "beta > 0 (kappa too large)");
    require(p.gamma > 0.0, "gamma > 0");

    // table (85)
    require(p.theta + p.beta - p.delta - d >= -1e-12, "(85)[A] theta+beta-delta-d >= 0");
    require(-p.rho_hom + p.theta + p.beta - p.delta + 2.0 * s >= -1e-12,
            "(85)[B] -rho+theta+beta-delta+2s >= 0");
    require(-p.rho_hom + 2.0 * p.theta <= 1e-12, "(85)[Xi] -rho+2theta <= 0");
    require(-p.rho_hom + p.theta + 3.0 * p.beta <= 1e-12,
            "(85)[Phi3] -rho+theta+3beta <= 0");
    require(p.alpha - 0.5 * p.rho_hom + p.theta - 0.5 * (d + 2.0 * s) - kappa > 0.0,
            "(85)[K] Kolmogorov row");
    require(p.alpha - p.rho_hom + p.theta - kappa >= -1e-12, "(85)[Fbar] row");
    require(std::abs(2.0 * s - p.alpha + p.beta - p.delta) <= 1e-12,
            "(85)[B-kernels] 2s-alpha+beta-delta = 0");

    // post-processing: kappa_bar from [F], saturated
    p.kappa_bar = p.zeta_exp / (4.0 * (s + p.gamma) + p.zeta_exp);
    require(p.kappa_bar > 0.0 && p.kappa_bar < 1.0, "[F] kappa_bar window");

    p.k_bar = FlowParams::k_max(ell_bar);
    double a_raw = 2.0 * std::max(1.0, 2.0 * p.k_bar * p.gamma / p.kappa_bar);
    p.a = std::ceil(a_raw);
    require(p.a > 1.0, "a > 1");
    require(p.a >= 2.0 * p.k_bar * p.beta / p.kappa_bar - 1e-9, "a >= 2 kbar beta / kappabar");
    p.v = p.gamma / p.a;
    require(p.v > 0.0 && p.v < 1.0 / 3.0, "v in (0,1/3)");

    // kappa0 and the analytic order ell_star of row [C], fixed-point iteration
    double k0 = std::min(p.delta_star / (32.0 * p.a), p.delta_star / (8.0 * p.a));
    int lstar = 0;
    for (int it = 0; it < 8; ++it) {
        double den = p.delta - 2.0 * p.a * k0;
        require(den > 0.0, "[C] delta - 2 a kappa0 > 0");
        lstar = static_cast<int>(
            std::ceil((p.alpha + p.zeta_exp + p.a * k0) / den + 1e-12));
        double cap = k0;
        cap = std::min(cap, p.kappa_bar / (2.0 * (1 + lstar)));          // (107)
        if (p.delta_star / 4.0 - kappa > 0.0)
            cap = std::min(cap, (p.delta_star / 4.0 - kappa) / (p.a * (1 + lstar)));  // (108)
        if (p.delta_star / 2.0 - 3.5 * kappa > 0.0)
            cap = std::min(cap, (p.delta_star / 2.0 - 3.5 * kappa) / p.a);  // (109a)
        if (cap >= k0 * (1.0 - 1e-12)) break;
        k0 = cap;
    }
    p.kappa0 = k0;
    p.ell_star = lstar;
    require(p.kappa0 > 0.0, "kappa0 > 0 ((108)/(109): kappa too large)");

    // remaining rows, checked with the values just fixed
    require(p.a * p.kappa0 * (1 + p.ell_star) + kappa <= p.delta_star / 4.0 + 1e-12,
            "(108) a kappa0 (1+ell*) + kappa <= delta*/4");
    require(3.5 * kappa + p.a * p.kappa0 <= p.delta_star / 2.0 + 1e-12,
            "(109) 7/2 kappa + a kappa0 <= delta*/2");
    require(kappa <= 2.0 * s - 11.0 / 16.0 * p.delta_star + 1e-12,
            "(109) kappa <= 2s - 11 delta*/16");
    require(2.0 * p.a * p.kappa0 <= p.delta_star / 4.0 + 1e-12,
            "(110) 2 a kappa0 <= delta*/4");
    require(p.zeta_exp <= 0.5 * p.beta + 1e-12, "(111) zeta <= beta/2");
    require(p.beta <= 2.0 * s, "(111) beta <= 2s");
    require(p.delta * p.ell_star - p.alpha - p.a * p.kappa0 * (1 + 2 * p.ell_star) >=
                p.zeta_exp - 1e-12,
            "(121)/[C] truncation-order row");
    require(p.kappa_bar >=
                p.k_bar * p.v + (1 + p.ell_star) * p.kappa0 - 1e-12,
            "[D] kappa_bar >= kbar v + (1+ell) kappa0");
    require(p.zeta_exp <= std::min(p.gamma, 2.0 * s - p.gamma) + 1e-12,
            "[E] zeta <= gamma ^ (2s-gamma)");
    require(4.0 * (s + p.gamma) * p.kappa_bar / (1.0 - p.kappa_bar) <=
                p.zeta_exp + 1e-12,
            "[F] zeta >= 4(s+gamma)kappabar/(1-kappabar)");
    // [A]/[B] of the post-processing table
    require(p.zeta_exp <= 3.0 * (p.gamma - p.beta) + p.delta -
                              p.a * p.kappa0 * (1 + p.ell_star) - kappa + 1e-12,
            "[A] post-processing row");
    require(p.zeta_exp <=
                std::min(2.0 * p.gamma, 3.0 * p.gamma - 0.5 * (d + 2.0 * s) -
                                            2.0 * kappa - p.a * p.kappa0) +
                    1e-12,
            "[B] post-processing row");

    // smallest ell with delta (ell+1) - 2 beta > 0
    p.ell_hat = static_cast<int>(std::floor(2.0 * p.beta / p.delta + 1.0 - 1e-12));
    while (p.delta * (p.ell_hat + 1) - 2.0 * p.beta <= 0.0) ++p.ell_hat;
    while (p.ell_hat > 0 && p.delta * p.ell_hat - 2.0 * p.beta > 0.0) --p.ell_hat;

    p.flat_b = 2.0 * s - p.delta;  // midpoint of the Remark-36 window (2s-2delta, 2s)
    require(p.flat_b > 2.0 * s - 2.0 * p.delta && p.flat_b < 2.0 * s,
            "flat_b window (Remark 36)");

    return p;
}

struct GradeInfo {
    GradeIndex g;
    double hom = 0.0;
    Relevance rel = Relevance::irrelevant;
};

// Enumerates the truncated grade set with relevance classification.  Degrees
// above k_max(ell) cannot be generated from cubic seeds and are omitted.
inline std::vector<GradeInfo> grade_enumerate(const FlowParams& p) {
    std::vector<GradeInfo> out;
    for (int ell = 0; ell <= p.ell_bar; ++ell)
        for (int k = 0; k <= std::min(p.k_bar, FlowParams::k_max(ell)); ++k) {
            GradeInfo gi;
            gi.g = GradeIndex{ell, k};
            gi.hom = p.hom(gi.g);
            gi.rel = FlowParams::classify(gi.hom);
            out.push_back(gi);
        }
    return out;
}

// Classification of cumulants: with the saturated parameters the only
// relevant/marginal multi-indices are the noise covariance (n=2, L=K=0) and
// first cumulants with K <= 3.
inline Relevance classify_cumulant(const FlowParams& p, const MultiIndex& m) {
    return FlowParams::classify(p.hom(m));
}

}  // namespace fracphi4
