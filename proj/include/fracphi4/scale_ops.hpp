#pragma once

#include <cmath>
#include <complex>
#include <map>
#include <memory>
#include <mutex>
#include <stdexcept>
#include <vector>

#include "bump.hpp"
#include "fft.hpp"
#include "lattice.hpp"
#include "spectral.hpp"

namespace fracphi4 {

inline double bracket(double sigma) { return 1.0 - sigma; }

// Scale index restricted to [1/2, 1).
struct ScaleIndex {
    double sigma;
    explicit ScaleIndex(double s) : sigma(s) {
        if (!(s >= 0.5 && s < 1.0))
            throw std::invalid_argument("scale parameter must lie in [1/2,1)");
    }
    double br() const { return bracket(sigma); }
};

// mu_i ladder of Definition-9 type: [[mu_i]] = 2^{-i-2}, i >= -1.
inline double mu_ladder(int i) { return 1.0 - std::ldexp(1.0, -i - 2); }

// Geometric sigma grid, r points per octave in [[sigma]], descending from
// sigma = 1/2 + ... i.e. [[sigma]]_j = 2^{-1-j/r} down to bracket_min.
inline std::vector<double> sigma_grid(int per_octave, double bracket_min) {
    std::vector<double> g;
    for (int j = 0;; ++j) {
        double br = std::pow(2.0, -1.0 - static_cast<double>(j) / per_octave);
        g.push_back(1.0 - br);
        if (br <= bracket_min) break;
        if (j > 4000) throw std::runtime_error("sigma grid too fine");
    }
    return g;  // ascending in sigma
}

enum class MultKind { J, Jtilde, Jdot, Gdot, K, Keta, L, LPBlock, Identity };

// A precomputed Fourier multiplier over the space-time dual grid (or the
// spatial dual grid for LP blocks), with its construction metadata.
struct MultiplierOp {
    MultKind kind = MultKind::Identity;
    double sigma = 0.0;
    double eta = 0.0;
    int ell = 0;
    int lp_index = 0;
    LatticeSpec lat;
    bool spatial_only = false;
    std::vector<std::complex<double>> symbol;  // FFT-natural order

    bool is_real() const {
        for (const auto& v : symbol)
            if (v.imag() != 0.0) return false;
        return true;
    }
};

// Builds the full multiplier family for one (lattice, s, m2) triple, with a
// guarded cache keyed by construction parameters.
class ScaleOps {
  public:
    ScaleOps(const LatticeSpec& lat, double s, double m2) : lat_(lat), s_(s), m2_(m2) {
        q_ = symbol_q_table(lat);
    }

    const LatticeSpec& lattice() const { return lat_; }
    double s() const { return s_; }
    double m2() const { return m2_; }

    // j_{sigma,ell}(|omega|^{1/2s}) * j_{sigma,ell}(q_eps(k)); ell = 0 is
    // J_sigma, ell = 1 the fattened J-tilde.
    std::shared_ptr<const MultiplierOp> J(double sigma, int ell = 0) const {
        return cached(ell == 0 ? MultKind::J : MultKind::Jtilde, sigma, 0.0, ell, 0,
                      [&](MultiplierOp& op) {
                          build_spacetime(op, [&](double om, double qk) {
                              return std::complex<double>(
                                  j_profile(std::pow(std::abs(om), 0.5 / s_), sigma, ell) *
                                  j_profile(qk, sigma, ell));
                          });
                      });
    }

    // Analytic sigma-derivative of the J symbol via h(y) = -y j'(y).
    std::shared_ptr<const MultiplierOp> Jdot(double sigma) const {
        return cached(MultKind::Jdot, sigma, 0.0, 0, 0, [&](MultiplierOp& op) {
            double tau = bracket(sigma) / sigma;
            double pref = 1.0 / (sigma * bracket(sigma));
            build_spacetime(op, [&](double om, double qk) {
                double a = std::pow(std::abs(om), 0.5 / s_);
                return std::complex<double>(
                    pref * (bump_h(tau * a) * bump_j(tau * qk) +
                            bump_j(tau * a) * bump_h(tau * qk)));
            });
        });
    }

    // Gdot_sigma = L^{-1} Jdot_sigma with L = i omega + m^2 + q^{2s}.
    std::shared_ptr<const MultiplierOp> Gdot(double sigma) const {
        return cached(MultKind::Gdot, sigma, 0.0, 0, 0, [&](MultiplierOp& op) {
            auto jd = Jdot(sigma);
            op.symbol.resize(jd->symbol.size());
            long ns = lat_.n_sites();
            for (int t = 0; t < lat_.Nt; ++t) {
                double om = lat_.omega(t);
                for (long k = 0; k < ns; ++k) {
                    std::complex<double> L(m2_ + std::pow(q_[k], 2.0 * s_), om);
                    op.symbol[static_cast<long>(t) * ns + k] =
                        jd->symbol[static_cast<long>(t) * ns + k] / L;
                }
            }
        });
    }

    // Full propagator symbol 1/(i omega + m^2 + q^{2s}) on the time torus.
    std::shared_ptr<const MultiplierOp> Green() const {
        return cached(MultKind::Identity, -1.0, 0.0, 0, 0, [&](MultiplierOp& op) {
            long ns = lat_.n_sites();
            op.symbol.resize(lat_.n_spacetime());
            for (int t = 0; t < lat_.Nt; ++t) {
                double om = lat_.omega(t);
                for (long k = 0; k < ns; ++k) {
                    std::complex<double> L(m2_ + std::pow(q_[k], 2.0 * s_), om);
                    op.symbol[static_cast<long>(t) * ns + k] = 1.0 / L;
                }
            }
        });
    }

    // G_sigma = L^{-1} J_sigma.
    std::shared_ptr<const MultiplierOp> Gsigma(double sigma) const {
        return cached(MultKind::Gdot, sigma, -2.0, 0, 0, [&](MultiplierOp& op) {
            auto j = J(sigma, 0);
            auto g = Green();
            op.symbol.resize(j->symbol.size());
            for (size_t i = 0; i < op.symbol.size(); ++i)
                op.symbol[i] = j->symbol[i] * g->symbol[i];
        });
    }

    // K_sigma = (1 + [[sigma]]^{2s} i omega)^{-1} (1 + [[sigma]]^2 q^2)^{-2}.
    std::shared_ptr<const MultiplierOp> K(double sigma) const {
        return cached(MultKind::K, sigma, 0.0, 0, 0, [&](MultiplierOp& op) {
            double b = bracket(sigma);
            double b2s = std::pow(b, 2.0 * s_);
            long ns = lat_.n_sites();
            op.symbol.resize(lat_.n_spacetime());
            for (int t = 0; t < lat_.Nt; ++t) {
                double om = lat_.omega(t);
                for (long k = 0; k < ns; ++k) {
                    std::complex<double> tpart(1.0, b2s * om);
                    double spart = 1.0 + b * b * q_[k] * q_[k];
                    op.symbol[static_cast<long>(t) * ns + k] =
                        1.0 / (tpart * spart * spart);
                }
            }
        });
    }

    // L_sigma = K_sigma^{-1}.
    std::shared_ptr<const MultiplierOp> L(double sigma) const {
        return cached(MultKind::L, sigma, 0.0, 0, 0, [&](MultiplierOp& op) {
            auto k = K(sigma);
            op.symbol.resize(k->symbol.size());
            for (size_t i = 0; i < op.symbol.size(); ++i)
                op.symbol[i] = 1.0 / k->symbol[i];
        });
    }

    // K_{eta,sigma} = L_sigma K_eta, eta <= sigma.
    std::shared_ptr<const MultiplierOp> Keta(double eta, double sigma) const {
        if (eta > sigma) throw std::invalid_argument("Keta: requires eta <= sigma");
        return cached(MultKind::Keta, sigma, eta, 0, 0, [&](MultiplierOp& op) {
            auto l = L(sigma);
            auto k = K(eta);
            op.symbol.resize(k->symbol.size());
            for (size_t i = 0; i < op.symbol.size(); ++i)
                op.symbol[i] = l->symbol[i] * k->symbol[i];
        });
    }

    // Spatial Littlewood-Paley block i >= -1.
    std::shared_ptr<const MultiplierOp> lp_block(int i) const {
        if (i < -1) throw std::invalid_argument("lp_block: i >= -1");
        return cached(MultKind::LPBlock, 0.0, 0.0, 0, i, [&](MultiplierOp& op) {
            op.spatial_only = true;
            op.symbol.resize(lat_.n_sites());
            for (long k = 0; k < lat_.n_sites(); ++k)
                op.symbol[k] = lp_profile(i, q_[k]);
        });
    }

  private:
    template <typename F>
    std::shared_ptr<const MultiplierOp> cached(MultKind kind, double sigma, double eta,
                                               int ell, int lp, F&& fill) const {
        std::array<double, 5> key{static_cast<double>(static_cast<int>(kind)), sigma,
                                  eta, static_cast<double>(ell),
                                  static_cast<double>(lp)};
        {
            std::lock_guard<std::mutex> g(mu_);
            auto it = cache_.find(key);
            if (it != cache_.end()) return it->second;
        }
        auto op = std::make_shared<MultiplierOp>();
        op->kind = kind;
        op->sigma = sigma;
        op->eta = eta;
        op->ell = ell;
        op->lp_index = lp;
        op->lat = lat_;
        fill(*op);
        std::lock_guard<std::mutex> g(mu_);
        return cache_.emplace(key, std::move(op)).first->second;
    }

    template <typename F>
    void build_spacetime(MultiplierOp& op, F&& f) const {
        long ns = lat_.n_sites();
        op.symbol.resize(lat_.n_spacetime());
        for (int t = 0; t < lat_.Nt; ++t) {
            double om = lat_.omega(t);
            for (long k = 0; k < ns; ++k)
                op.symbol[static_cast<long>(t) * ns + k] = f(om, q_[k]);
        }
    }

    LatticeSpec lat_;
    double s_, m2_;
    std::vector<double> q_;
    mutable std::mutex mu_;
    mutable std::map<std::array<double, 5>, std::shared_ptr<const MultiplierOp>> cache_;
};

// Applies a multiplier to a real field (slice-wise for spatial-only symbols).
inline Field apply_multiplier(const MultiplierOp& op, const Field& f) {
    if (op.spatial_only) {
        Field out(f.lat, f.kind, f.n_comp);
        long ns = f.lat.n_sites();
        int slices = f.kind == FieldKind::slice ? 1 : f.lat.Nt;
        for (int c = 0; c < f.n_comp; ++c)
            for (int t = 0; t < slices; ++t) {
                const double* src = f.comp(c) + static_cast<long>(t) * ns;
                std::vector<double> buf(src, src + ns);
                auto coef = fft_forward(f.lat, FieldKind::slice, buf.data());
                for (long k = 0; k < ns; ++k) coef[k] *= op.symbol[k];
                auto r = fft_backward_real(f.lat, FieldKind::slice, std::move(coef));
                std::copy(r.begin(), r.end(), out.comp(c) + static_cast<long>(t) * ns);
            }
        return out;
    }
    if (f.kind != FieldKind::spacetime)
        throw std::invalid_argument("apply_multiplier: space-time symbol on slice field");
    Field out(f.lat, f.kind, f.n_comp);
    for (int c = 0; c < f.n_comp; ++c) {
        auto coef = fft_forward(f.lat, FieldKind::spacetime, f.comp(c));
        for (size_t k = 0; k < coef.size(); ++k) coef[k] *= op.symbol[k];
        auto r = fft_backward_real(f.lat, FieldKind::spacetime, std::move(coef));
        std::copy(r.begin(), r.end(), out.comp(c));
    }
    return out;
}

// Realises the continuum-normalised kernel of a space-time multiplier:
// (op f)(z) = sum_{z'} k(z - z') f(z') dt eps^d.
inline std::vector<double> kernel_realize(const MultiplierOp& op,
                                          size_t max_elems = size_t(1) << 26) {
    if (op.spatial_only)
        throw std::invalid_argument("kernel_realize: space-time symbols only");
    if (op.symbol.size() > max_elems)
        throw std::runtime_error("kernel_realize: memory budget exceeded");
    auto k = fft_backward_real(op.lat, FieldKind::spacetime,
                               std::vector<std::complex<double>>(op.symbol));
    double inv = 1.0 / op.lat.st_cell_volume();
    for (auto& v : k) v *= inv;
    return k;
}

struct DecayFit {
    double constant = 0.0;  // plateau amplitude
    double exponent = 0.0;  // fitted decay power p in C (1+|z|_s/scale)^{-p}
};

// Least-squares fit of log|kernel| against log(1 + |z|_s / scale) over grid
// points where the kernel is meaningfully above rounding noise.
inline DecayFit decay_fit(const std::vector<double>& kernel, const LatticeSpec& lat,
                          double s, double scale, double rel_floor = 1e-9) {
    double kmax = 0.0;
    for (double v : kernel) kmax = std::max(kmax, std::abs(v));
    if (kmax == 0.0) throw std::invalid_argument("decay_fit: all-zero kernel");
    long ns = lat.n_sites();
    double sx = 0.0, sy = 0.0, sxx = 0.0, sxy = 0.0;
    long n = 0;
    for (int t = 0; t < lat.Nt; ++t)
        for (long i = 0; i < ns; ++i) {
            double v = std::abs(kernel[st_pack(lat, t, i)]);
            if (v < rel_floor * kmax) continue;
            std::array<int, 3> xv{};
            site_unpack(lat, i, xv);
            double r2 = 0.0;
            for (int a = 0; a < lat.d; ++a) {
                double x = lat.coord(xv[a]);
                r2 += x * x;
            }
            double tt = lat.tcoord(t);
            double zs = std::sqrt(std::pow(std::abs(tt), 1.0 / s) + r2);
            double lx = std::log(1.0 + zs / scale);
            if (lx < 1e-12) continue;  // skip the origin plateau
            double ly = std::log(v);
            sx += lx;
            sy += ly;
            sxx += lx * lx;
            sxy += lx * ly;
            ++n;
        }
    if (n < 4) throw std::invalid_argument("decay_fit: degenerate kernel support");
    double denom = n * sxx - sx * sx;
    DecayFit fit;
    fit.exponent = -(n * sxy - sx * sy) / denom;
    fit.constant = std::exp((sy + fit.exponent * sx) / n);
    return fit;
}

}  // namespace fracphi4
