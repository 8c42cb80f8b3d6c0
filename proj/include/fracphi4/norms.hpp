#pragma once

#include <functional>
#include <string>
#include <vector>

#include "scale_ops.hpp"
#include "weights.hpp"

namespace fracphi4 {

struct NormReport {
    std::string kind;
    double value = 0.0;
    double sigma = 0.0;  // scale realising the supremum (when meaningful)
    double mu = 0.0;
    double gamma = 0.0;
    double weight_a = 0.0;
    double weight_v = 0.0;
    std::string note;
};

// Weighted sup norm ||w phi||_inf over the space-time grid.
inline double weighted_sup(const Field& phi, const std::vector<double>& w) {
    double m = 0.0;
    long n = phi.grid_size();
    for (int c = 0; c < phi.n_comp; ++c)
        for (long i = 0; i < n; ++i) m = std::max(m, std::abs(phi.at(c, i)) * w[i]);
    return m;
}

// Triple norm (27): sup_{sigma >= mubar} [[sigma]]^gamma ||zeta_sigma^{1/3} J_sigma phi||.
inline NormReport triple_norm_field(const Field& phi, double mubar, double gamma,
                                    const WeightSpec& w, const ScaleOps& ops,
                                    const std::vector<double>& grid) {
    if (grid.empty()) throw std::invalid_argument("triple_norm_field: empty sigma grid");
    NormReport rep;
    rep.kind = "triple_field";
    rep.gamma = gamma;
    rep.mu = mubar;
    rep.weight_a = w.a;
    rep.weight_v = w.v;
    for (double sigma : grid) {
        if (sigma < mubar) continue;
        Field ps = apply_multiplier(*ops.J(sigma), phi);
        auto zw = zeta_table(phi.lat, sigma, w, 1.0 / 3.0);
        double v = std::pow(bracket(sigma), gamma) * weighted_sup(ps, zw);
        if (v > rep.value) {
            rep.value = v;
            rep.sigma = sigma;
        }
    }
    return rep;
}

// Sharp norm (28) of a sigma-indexed family:
// sup_{sigma >= mubar} [[sigma]]^{3 gamma} ||zeta_sigma f_sigma||.
inline NormReport sharp_norm(const std::function<Field(double)>& family, double mubar,
                             double gamma, const WeightSpec& w, const LatticeSpec& lat,
                             const std::vector<double>& grid) {
    if (grid.empty()) throw std::invalid_argument("sharp_norm: empty sigma grid");
    NormReport rep;
    rep.kind = "sharp";
    rep.gamma = gamma;
    rep.mu = mubar;
    rep.weight_a = w.a;
    rep.weight_v = w.v;
    for (double sigma : grid) {
        if (sigma < mubar) continue;
        Field fs = family(sigma);
        auto zw = zeta_table(lat, sigma, w, 1.0);
        double v = std::pow(bracket(sigma), 3.0 * gamma) * weighted_sup(fs, zw);
        if (v > rep.value) {
            rep.value = v;
            rep.sigma = sigma;
        }
    }
    return rep;
}

}  // namespace fracphi4
