#pragma once

#include <array>
#include <cmath>
#include <complex>
#include <cstdint>
#include <numbers>
#include <stdexcept>
#include <string>
#include <vector>

namespace fracphi4 {

// Discretisation of the space-time cylinder: a spatial torus with M sites per
// axis at spacing eps, and a time window [-T, T) with Nt points at spacing dt.
struct LatticeSpec {
    int d = 1;          // spatial dimension, 1..3
    double eps = 1.0;   // lattice spacing
    int M = 16;         // sites per spatial axis
    double T = 4.0;     // half-width of the time window
    double dt = 0.125;  // time grid spacing
    int Nt = 64;        // time grid points, Nt*dt = 2T

    static LatticeSpec make(int d, double eps, int M, double T, int Nt) {
        LatticeSpec lat;
        lat.d = d;
        lat.eps = eps;
        lat.M = M;
        lat.T = T;
        lat.Nt = Nt;
        lat.dt = 2.0 * T / Nt;
        lat.validate();
        return lat;
    }

    void validate() const {
        if (d < 1 || d > 3) throw std::invalid_argument("lattice: d must be 1..3");
        if (eps <= 0.0) throw std::invalid_argument("lattice: eps must be positive");
        if (M < 2) throw std::invalid_argument("lattice: M must be >= 2");
        if (Nt < 2) throw std::invalid_argument("lattice: Nt must be >= 2");
        if (dt <= 0.0) throw std::invalid_argument("lattice: dt must be positive");
        if (std::abs(Nt * dt - 2.0 * T) > 1e-12 * (1.0 + 2.0 * T))
            throw std::invalid_argument("lattice: Nt*dt must equal 2T");
        if ((M & (M - 1)) != 0)
            throw std::invalid_argument("lattice: M must be a power of two");
    }

    long n_sites() const {
        long n = 1;
        for (int i = 0; i < d; ++i) n *= M;
        return n;
    }
    long n_spacetime() const { return n_sites() * Nt; }
    double period() const { return eps * M; }
    double cell_volume() const { return std::pow(eps, d); }       // spatial cell
    double st_cell_volume() const { return dt * cell_volume(); }  // space-time cell

    // Fundamental-domain coordinates: index -> signed position in (-P/2, P/2].
    double coord(int idx) const {
        double x = eps * idx;
        double P = period();
        if (x > 0.5 * P) x -= P;
        return x;
    }
    double tcoord(int it) const {
        double t = dt * it;
        if (t > T) t -= 2.0 * T;
        return t;
    }

    // Dual-lattice frequencies in FFT-natural order.
    double freq(int idx) const {
        int h = idx <= M / 2 ? idx : idx - M;
        return 2.0 * std::numbers::pi * h / period();
    }
    double omega(int it) const {
        int h = it <= Nt / 2 ? it : it - Nt;
        return 2.0 * std::numbers::pi * h / (2.0 * T);
    }
};

enum class FieldKind { slice, spacetime };

// Real field over a time slice or the full space-time grid, n components
// stored component-major.
struct Field {
    LatticeSpec lat;
    int n_comp = 1;
    FieldKind kind = FieldKind::slice;
    std::vector<double> data;

    Field() = default;
    Field(const LatticeSpec& l, FieldKind k, int n = 1) : lat(l), n_comp(n), kind(k) {
        data.assign(static_cast<size_t>(n) * grid_size(), 0.0);
    }

    long grid_size() const {
        return kind == FieldKind::slice ? lat.n_sites() : lat.n_spacetime();
    }
    double* comp(int c) { return data.data() + static_cast<size_t>(c) * grid_size(); }
    const double* comp(int c) const {
        return data.data() + static_cast<size_t>(c) * grid_size();
    }

    double& at(int c, long i) { return data[static_cast<size_t>(c) * grid_size() + i]; }
    double at(int c, long i) const {
        return data[static_cast<size_t>(c) * grid_size() + i];
    }

    bool finite() const {
        for (double v : data)
            if (!std::isfinite(v)) return false;
        return true;
    }
    double max_abs() const {
        double m = 0.0;
        for (double v : data) m = std::max(m, std::abs(v));
        return m;
    }
};

// Complex Fourier coefficients of a Field, same shape metadata.
struct SpectralField {
    LatticeSpec lat;
    int n_comp = 1;
    FieldKind kind = FieldKind::slice;
    std::vector<std::complex<double>> data;
};

// Multi-index helpers for the spatial grid (row-major over d axes) and the
// space-time grid (time index slowest).
inline void site_unpack(const LatticeSpec& lat, long idx, std::array<int, 3>& x) {
    for (int a = lat.d - 1; a >= 0; --a) {
        x[a] = static_cast<int>(idx % lat.M);
        idx /= lat.M;
    }
}
inline long site_pack(const LatticeSpec& lat, const std::array<int, 3>& x) {
    long idx = 0;
    for (int a = 0; a < lat.d; ++a) idx = idx * lat.M + ((x[a] % lat.M + lat.M) % lat.M);
    return idx;
}
inline long st_pack(const LatticeSpec& lat, int it, long site) {
    return static_cast<long>((it % lat.Nt + lat.Nt) % lat.Nt) * lat.n_sites() + site;
}

// Neighbour of a site along axis a, step +1 or -1 on the torus.
inline long site_shift(const LatticeSpec& lat, long idx, int axis, int step) {
    std::array<int, 3> x{};
    site_unpack(lat, idx, x);
    x[axis] += step;
    return site_pack(lat, x);
}

}  // namespace fracphi4
