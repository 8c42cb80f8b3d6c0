#pragma once

#include <complex>
#include <map>
#include <mutex>
#include <vector>

#include <fftw3.h>

#include "lattice.hpp"

namespace fracphi4 {

// Thin wrapper over FFTW c2c transforms with a guarded plan cache.
// Plans use FFTW_ESTIMATE so planning is deterministic.
namespace fft_detail {

struct PlanKey {
    std::vector<int> dims;
    int sign;
    bool operator<(const PlanKey& o) const {
        if (dims != o.dims) return dims < o.dims;
        return sign < o.sign;
    }
};

class PlanCache {
  public:
    static PlanCache& instance() {
        static PlanCache c;
        return c;
    }

    // Executes an out-of-place transform of the given rank/dims.
    void run(const std::vector<int>& dims, int sign, std::complex<double>* in,
             std::complex<double>* out) {
        fftw_plan p;
        {
            std::lock_guard<std::mutex> g(mu_);
            PlanKey key{dims, sign};
            auto it = cache_.find(key);
            if (it == cache_.end()) {
                std::vector<std::complex<double>> a(total(dims)), b(total(dims));
                fftw_plan np = fftw_plan_dft(
                    static_cast<int>(dims.size()), dims.data(),
                    reinterpret_cast<fftw_complex*>(a.data()),
                    reinterpret_cast<fftw_complex*>(b.data()), sign, FFTW_ESTIMATE);
                it = cache_.emplace(key, np).first;
            }
            p = it->second;
        }
        fftw_execute_dft(p, reinterpret_cast<fftw_complex*>(in),
                         reinterpret_cast<fftw_complex*>(out));
    }

  private:
    static size_t total(const std::vector<int>& dims) {
        size_t n = 1;
        for (int d : dims) n *= static_cast<size_t>(d);
        return n;
    }
    std::mutex mu_;
    std::map<PlanKey, fftw_plan> cache_;
};

inline std::vector<int> spatial_dims(const LatticeSpec& lat) {
    return std::vector<int>(static_cast<size_t>(lat.d), lat.M);
}
inline std::vector<int> st_dims(const LatticeSpec& lat) {
    std::vector<int> dims{lat.Nt};
    for (int i = 0; i < lat.d; ++i) dims.push_back(lat.M);
    return dims;
}

}  // namespace fft_detail

// Forward transform of one real component; unnormalised (plain DFT sums).
inline std::vector<std::complex<double>> fft_forward(const LatticeSpec& lat,
                                                     FieldKind kind,
                                                     const double* values) {
    auto dims = kind == FieldKind::slice ? fft_detail::spatial_dims(lat)
                                         : fft_detail::st_dims(lat);
    long n = kind == FieldKind::slice ? lat.n_sites() : lat.n_spacetime();
    std::vector<std::complex<double>> in(values, values + n), out(n);
    fft_detail::PlanCache::instance().run(dims, FFTW_FORWARD, in.data(), out.data());
    return out;
}

inline std::vector<std::complex<double>> fft_forward_c(
    const LatticeSpec& lat, FieldKind kind, std::vector<std::complex<double>> in) {
    auto dims = kind == FieldKind::slice ? fft_detail::spatial_dims(lat)
                                         : fft_detail::st_dims(lat);
    std::vector<std::complex<double>> out(in.size());
    fft_detail::PlanCache::instance().run(dims, FFTW_FORWARD, in.data(), out.data());
    return out;
}

// Inverse transform, normalised by 1/N; returns the real part.
inline std::vector<double> fft_backward_real(const LatticeSpec& lat, FieldKind kind,
                                             std::vector<std::complex<double>> coef) {
    auto dims = kind == FieldKind::slice ? fft_detail::spatial_dims(lat)
                                         : fft_detail::st_dims(lat);
    long n = static_cast<long>(coef.size());
    std::vector<std::complex<double>> out(n);
    fft_detail::PlanCache::instance().run(dims, FFTW_BACKWARD, coef.data(), out.data());
    std::vector<double> r(n);
    double inv = 1.0 / static_cast<double>(n);
    for (long i = 0; i < n; ++i) r[i] = out[i].real() * inv;
    return r;
}

inline std::vector<std::complex<double>> fft_backward_c(
    const LatticeSpec& lat, FieldKind kind, std::vector<std::complex<double>> coef) {
    auto dims = kind == FieldKind::slice ? fft_detail::spatial_dims(lat)
                                         : fft_detail::st_dims(lat);
    long n = static_cast<long>(coef.size());
    std::vector<std::complex<double>> out(n);
    fft_detail::PlanCache::instance().run(dims, FFTW_BACKWARD, coef.data(), out.data());
    double inv = 1.0 / static_cast<double>(n);
    for (auto& v : out) v *= inv;
    return out;
}

inline SpectralField to_spectral(const Field& f) {
    SpectralField s;
    s.lat = f.lat;
    s.n_comp = f.n_comp;
    s.kind = f.kind;
    s.data.resize(f.data.size());
    long g = f.grid_size();
    for (int c = 0; c < f.n_comp; ++c) {
        auto coef = fft_forward(f.lat, f.kind, f.comp(c));
        std::copy(coef.begin(), coef.end(), s.data.begin() + static_cast<size_t>(c) * g);
    }
    return s;
}

inline Field to_real(const SpectralField& s) {
    Field f(s.lat, s.kind, s.n_comp);
    long g = f.grid_size();
    for (int c = 0; c < s.n_comp; ++c) {
        std::vector<std::complex<double>> coef(s.data.begin() + static_cast<size_t>(c) * g,
                                               s.data.begin() +
                                                   static_cast<size_t>(c + 1) * g);
        auto r = fft_backward_real(s.lat, s.kind, std::move(coef));
        std::copy(r.begin(), r.end(), f.comp(c));
    }
    return f;
}

}  // namespace fracphi4
