#pragma once

#include <functional>
#include <map>
#include <numbers>
#include <set>
#include <stdexcept>
#include <vector>

#include "flow_kernels.hpp"
#include "flow_params.hpp"

namespace fracphi4 {

// ---------------------------------------------------------------------------
// Sign conventions.  The flow solved here is the physical one,
//   dF_sigma/dsigma = -DF_sigma . (Gdot_sigma F_sigma),
// i.e. dF^a/dsigma = -sum_{b,c} B^a_{b,c} with B the positive contraction of
// Eq.-(72) type.  The renormalisation condition for the relevant first
// cumulants is imposed with the sign that keeps the trajectory bounded as
// eps -> 0,
//   Fbar_1^{[l],(1)} = + L Int_{1/2}^1 [K_sigma^{1,1} dFbar_sigma] dsigma,
// which reproduces the positive one-loop mass counterterm.
// ---------------------------------------------------------------------------

// Contraction of slot `sb` of `b` with the output of slot `sc` of `c` through
// `link`, summed over the input positions of the receiving slot (the exact
// Leibniz rule on unsymmetrised storage; equal to the (k'+1)-weighted
// last-input form on symmetric kernels).
inline ClusterKernel contract_positions(const ClusterKernel& b, int sb,
                                        const ClusterKernel& c, int sc,
                                        const EdgePtr& link) {
    ClusterKernel out;
    out.lat = b.lat;
    if (b.terms.empty() || c.terms.empty()) return out;
    int k = static_cast<int>(b.terms[0].inputs[sb].size());
    for (int j = 0; j < k; ++j) {
        ClusterKernel bj = b;
        for (auto& t : bj.terms) std::swap(t.inputs[sb][j], t.inputs[sb].back());
        kernel_add(out, contract_through(bj, sb, c, sc, link));
    }
    kernel_prune(out);
    return out;
}

// Position-sum contraction of slot q's output into slot p's inputs inside one
// cumulant kernel.
inline ClusterKernel contract_positions_within(const ClusterKernel& k, int p, int q,
                                               const EdgePtr& link) {
    ClusterKernel out;
    out.lat = k.lat;
    if (k.terms.empty()) return out;
    int ni = static_cast<int>(k.terms[0].inputs[p].size());
    for (int j = 0; j < ni; ++j) {
        ClusterKernel kj = k;
        for (auto& t : kj.terms) std::swap(t.inputs[p][j], t.inputs[p].back());
        kernel_add(out, contract_within(kj, p, q, link));
    }
    kernel_prune(out);
    return out;
}

// Spec-facing flow operator: (k'+1) F^b with Gdot between its last input and
// the output of F^c, valid for input-symmetric kernels.
inline ClusterKernel flow_B(const ClusterKernel& b, const GradeIndex& gb,
                            const ClusterKernel& c, const GradeIndex&,
                            const EdgePtr& gdot) {
    ClusterKernel out;
    out.lat = b.lat;
    if (gb.k == 0 || b.terms.empty() || c.terms.empty()) return out;
    out = contract_through(b, 0, c, 0, gdot);
    kernel_scale(out, static_cast<double>(gb.k));
    return out;
}

// ---------------------------------------------------------------------------
// Term compaction and slot symmetrisation
// ---------------------------------------------------------------------------

namespace flow_detail {

inline bool same_structure(const ClusterTerm& a, const ClusterTerm& b) {
    return a.n_clusters == b.n_clusters && a.slot_out == b.slot_out &&
           a.inputs == b.inputs && a.noise == b.noise &&
           a.edges.size() == b.edges.size();
}

// Merge terms with identical combinatorics: equal edge sets add coefficients,
// a single differing edge is folded by edge addition.  Keeps trajectories
// from growing one term per integration step.
inline void compact(ClusterKernel& K) {
    std::vector<ClusterTerm> out;
    for (auto& t : K.terms) {
        bool merged = false;
        for (auto& o : out) {
            if (!same_structure(o, t)) continue;
            int freeSlot = -1;
            bool ok = true;
            for (size_t e = 0; e < t.edges.size() && ok; ++e) {
                if (t.edges[e].a != o.edges[e].a || t.edges[e].b != o.edges[e].b) {
                    ok = false;
                    break;
                }
                if (t.edges[e].k != o.edges[e].k) {
                    if (freeSlot >= 0)
                        ok = false;
                    else
                        freeSlot = static_cast<int>(e);
                }
            }
            if (!ok) continue;
            if (freeSlot < 0) {
                o.coef += t.coef;
            } else {
                std::vector<double> sum(o.edges[freeSlot].k->size());
                const auto& ea = *o.edges[freeSlot].k;
                const auto& eb = *t.edges[freeSlot].k;
                for (size_t i = 0; i < sum.size(); ++i)
                    sum[i] = o.coef * ea[i] + t.coef * eb[i];
                o.edges[freeSlot].k = edge_from(std::move(sum));
                o.coef = 1.0;
            }
            merged = true;
            break;
        }
        if (!merged) out.push_back(std::move(t));
    }
    K.terms.swap(out);
    kernel_prune(K);
}

// Symmetrise over slots of equal grade, so that slot lookup by grade is well
// defined on the stored cumulants.
inline ClusterKernel symmetrise_slots(const ClusterKernel& K,
                                      const std::vector<GradeIndex>& grades) {
    int n = static_cast<int>(grades.size());
    if (n <= 1 || K.terms.empty()) return K;
    std::map<std::pair<int, int>, std::vector<int>> groups;
    for (int i = 0; i < n; ++i) groups[{grades[i].ell, grades[i].k}].push_back(i);
    bool trivial = true;
    for (auto& [key, g] : groups)
        if (g.size() > 1) trivial = false;
    if (trivial) return K;
    std::vector<int> identity(n);
    for (int i = 0; i < n; ++i) identity[i] = i;
    std::vector<std::vector<int>> all{identity};
    for (auto& [key, idx] : groups) {
        if (idx.size() <= 1) continue;
        std::vector<int> p = idx;
        std::sort(p.begin(), p.end());
        std::vector<std::vector<int>> grown;
        do {
            for (auto base : all) {
                for (size_t j = 0; j < idx.size(); ++j) base[idx[j]] = p[j];
                grown.push_back(base);
            }
        } while (std::next_permutation(p.begin(), p.end()));
        all.swap(grown);
    }
    ClusterKernel out;
    out.lat = K.lat;
    double w = 1.0 / static_cast<double>(all.size());
    for (const auto& perm : all)
        for (const auto& t : K.terms) {
            ClusterTerm nt = t;
            for (int i = 0; i < n; ++i) {
                nt.slot_out[i] = t.slot_out[perm[i]];
                nt.inputs[i] = t.inputs[perm[i]];
            }
            nt.coef *= w;
            out.terms.push_back(std::move(nt));
        }
    compact(out);
    return out;
}

}  // namespace flow_detail

// ---------------------------------------------------------------------------
// Boundary data
// ---------------------------------------------------------------------------

// Force kernels at sigma = 1 with the +r psi convention of Lemma 37:
// F^{(0,3)} = -lambda delta^3, F^{(0,1)} = rbar delta, F^{(0,0)} = xi.
inline std::map<GradeIndex, ClusterKernel> boundary_force(const LatticeSpec& lat,
                                                          double lambda, double r_bar) {
    std::map<GradeIndex, ClusterKernel> F;
    F[GradeIndex{0, 3}] = local_kernel(lat, -lambda, 3);
    if (r_bar != 0.0) F[GradeIndex{0, 1}] = local_kernel(lat, r_bar, 1);
    F[GradeIndex{0, 0}] = noise_kernel(lat);
    return F;
}

// Cumulant seeds at L = 0.
inline std::map<MultiIndex, ClusterKernel> cumulant_seeds(const LatticeSpec& lat,
                                                          double lambda, double r_bar) {
    std::map<MultiIndex, ClusterKernel> S;
    S[MultiIndex::of({GradeIndex{0, 0}, GradeIndex{0, 0}})] = covariance_kernel(lat);
    if (lambda != 0.0)
        S[MultiIndex::of({GradeIndex{0, 3}})] = local_kernel(lat, -lambda, 3);
    if (r_bar != 0.0)
        S[MultiIndex::of({GradeIndex{0, 1}})] = local_kernel(lat, r_bar, 1);
    return S;
}

// ---------------------------------------------------------------------------
// sigma grid: the flow freezes above sigma*, where the cutoff plateau covers
// every lattice frequency and Gdot vanishes identically.
// ---------------------------------------------------------------------------

inline double sigma_freeze(const LatticeSpec& lat, double s) {
    auto q = symbol_q_table(lat);
    double eta = 0.0;
    for (double v : q) eta = std::max(eta, v);
    double om_max = std::numbers::pi / lat.dt;
    eta = std::max(eta, std::pow(om_max, 0.5 / s));
    return eta / (1.0 + eta);
}

struct FlowGrid {
    std::vector<double> nodes;  // descending: nodes[0] = sigma*, back() = 1/2
    std::vector<double> mids;
};

inline FlowGrid make_flow_grid(const LatticeSpec& lat, double s, int per_octave) {
    double sstar = sigma_freeze(lat, s);
    auto ladder = sigma_grid(per_octave, 1.0 - sstar);  // ascending sigma
    FlowGrid g;
    for (auto it = ladder.rbegin(); it != ladder.rend(); ++it)
        if (*it < sstar) g.nodes.push_back(*it);
    g.nodes.insert(g.nodes.begin(), sstar);
    for (size_t j = 0; j + 1 < g.nodes.size(); ++j)
        g.mids.push_back(0.5 * (g.nodes[j] + g.nodes[j + 1]));
    return g;
}

// ---------------------------------------------------------------------------
// Two-point kernels and the discrete Taylor localisation (L / R split)
// ---------------------------------------------------------------------------

// V(z, z1) = local_coef * delta(z1 - z) + v(z1 - z), v on the torus grid.
struct TwoPointKernel {
    LatticeSpec lat;
    double local_coef = 0.0;
    std::vector<double> v;

    bool has_tail() const { return !v.empty(); }
    void ensure_tail() {
        if (v.empty()) v.assign(lat.n_spacetime(), 0.0);
    }
};

inline TwoPointKernel to_two_point(const ClusterKernel& K) {
    TwoPointKernel V;
    V.lat = K.lat;
    for (const auto& t : K.terms) {
        if (t.slot_out.size() != 1 || t.inputs[0].size() != 1 || !t.noise.empty())
            throw std::invalid_argument("to_two_point: not a deterministic 2-point kernel");
        int co = t.slot_out[0], ci = t.inputs[0][0];
        if (co == ci) {
            V.local_coef += t.coef;
            continue;
        }
        if (t.edges.size() != 1)
            throw std::invalid_argument("to_two_point: unexpected edge structure");
        V.ensure_tail();
        const auto& e = t.edges[0];
        // stored factor is e(p_a - p_b); express as a function of r = z1 - z
        if (e.a == co && e.b == ci) {
            auto r = edge_reverse(K.lat, e.k);
            for (size_t i = 0; i < V.v.size(); ++i) V.v[i] += t.coef * (*r)[i];
        } else if (e.a == ci && e.b == co) {
            for (size_t i = 0; i < V.v.size(); ++i) V.v[i] += t.coef * (*e.k)[i];
        } else
            throw std::invalid_argument("to_two_point: stray edge");
    }
    return V;
}

// Smooths the input variable: (V K)(z,z1) = Int V(z,u) Kker(z1-u) du, i.e. as
// a difference kernel vtilde = local * Kker + v (*) Kker.
inline TwoPointKernel smooth_input(const TwoPointKernel& V,
                                   const std::vector<double>& Kker) {
    TwoPointKernel out;
    out.lat = V.lat;
    out.v.assign(V.lat.n_spacetime(), 0.0);
    for (size_t i = 0; i < out.v.size(); ++i) out.v[i] = V.local_coef * Kker[i];
    if (V.has_tail()) {
        auto Fv = fft_forward(V.lat, FieldKind::spacetime, V.v.data());
        auto Fk = fft_forward(V.lat, FieldKind::spacetime, Kker.data());
        double cell = V.lat.st_cell_volume();
        for (size_t i = 0; i < Fv.size(); ++i) Fv[i] *= Fk[i] * cell;
        auto conv = fft_backward_real(V.lat, FieldKind::spacetime, std::move(Fv));
        for (size_t i = 0; i < out.v.size(); ++i) out.v[i] += conv[i];
    }
    return out;
}

// Weighted (1 - h_mu) truncation applied pointwise to the tail.
inline TwoPointKernel apply_one_minus_h(const TwoPointKernel& V, double mu, double s) {
    TwoPointKernel out = V;
    out.local_coef = 0.0;  // h_mu = 1 on the diagonal
    if (!out.has_tail()) return out;
    auto zs = parabolic_norm_table(V.lat, s);
    double br = bracket(mu);
    for (size_t i = 0; i < out.v.size(); ++i) {
        double r = zs[i] / br;
        double h = 1.0 / (1.0 + r * r);
        out.v[i] *= (1.0 - h);
    }
    return out;
}

struct LocalKernel {
    double mass = 0.0;
    std::array<double, 3> first_moment{};  // spatial moments only
};

// L operator of the discrete Taylor split: zeroth moment plus symmetrised
// first spatial moments.
inline LocalKernel localize_L(const TwoPointKernel& V) {
    LocalKernel L;
    L.mass = V.local_coef;
    if (!V.has_tail()) return L;
    const LatticeSpec& lat = V.lat;
    double cell = lat.st_cell_volume();
    long ns = lat.n_sites();
    for (int t = 0; t < lat.Nt; ++t)
        for (long i = 0; i < ns; ++i) {
            double val = V.v[st_pack(lat, t, i)];
            if (val == 0.0) continue;
            if (!std::isfinite(val))
                throw std::invalid_argument("localize_L: non-summable kernel");
            L.mass += val * cell;
            std::array<int, 3> xv{};
            site_unpack(lat, i, xv);
            for (int a = 0; a < lat.d; ++a)
                L.first_moment[a] += lat.coord(xv[a]) * val * cell;
        }
    return L;
}

// V(psi)(z) = sum_r [local delta + v](r) psi(z + r) cell.
inline Field apply_two_point(const TwoPointKernel& V, const Field& psi) {
    const LatticeSpec& lat = V.lat;
    Field out(lat, FieldKind::spacetime, 1);
    for (long i = 0; i < lat.n_spacetime(); ++i)
        out.at(0, i) = V.local_coef * psi.at(0, i);
    if (V.has_tail()) {
        auto rev = std::vector<double>(V.v.size());
        {
            auto tmp = edge_reverse(lat, edge_from(std::vector<double>(V.v)));
            rev = *tmp;
        }
        auto A = fft_forward(lat, FieldKind::spacetime, rev.data());
        auto B = fft_forward(lat, FieldKind::spacetime, psi.comp(0));
        double cell = lat.st_cell_volume();
        for (size_t i = 0; i < A.size(); ++i) A[i] *= B[i] * cell;
        auto conv = fft_backward_real(lat, FieldKind::spacetime, std::move(A));
        for (long i = 0; i < lat.n_spacetime(); ++i) out.at(0, i) += conv[i];
    }
    return out;
}

// (L V)(psi)(z) = mass psi(z) + sum_a m_a (d^{a+} + d^{a-}) psi(z) / 2.
inline Field apply_local(const LocalKernel& L, const Field& psi) {
    const LatticeSpec& lat = psi.lat;
    Field out(lat, FieldKind::spacetime, 1);
    long ns = lat.n_sites();
    for (int t = 0; t < lat.Nt; ++t)
        for (long i = 0; i < ns; ++i) {
            long z = st_pack(lat, t, i);
            double val = L.mass * psi.at(0, z);
            for (int a = 0; a < lat.d; ++a) {
                if (L.first_moment[a] == 0.0) continue;
                double centred = (psi.at(0, st_pack(lat, t, site_shift(lat, i, a, 1))) -
                                  psi.at(0, st_pack(lat, t, site_shift(lat, i, a, -1)))) /
                                 (2.0 * lat.eps);
                val += L.first_moment[a] * centred;
            }
            out.at(0, z) = val;
        }
    return out;
}

struct RemainderPieces {
    Field R0;    // time-direction first-order remainder
    Field Rij;   // spatial second-order remainder
    Field Reps;  // symmetrisation correction, O(eps)
};

// Exact discrete Taylor remainder along the staircase path: spatial axes in
// order 1..d first, then the time segment.
inline RemainderPieces apply_remainder(const TwoPointKernel& V, const Field& psi) {
    const LatticeSpec& lat = V.lat;
    RemainderPieces R{Field(lat, FieldKind::spacetime, 1),
                      Field(lat, FieldKind::spacetime, 1),
                      Field(lat, FieldKind::spacetime, 1)};
    if (!V.has_tail()) return R;  // local kernels have zero remainder
    long ns = lat.n_sites();
    long n = lat.n_spacetime();
    const double cell = lat.st_cell_volume();

    struct Step {
        int axis;  // 0..d-1 spatial; -1 time
        int sign;
        std::array<int, 3> at;  // spatial offset (lattice units) before the step
        int t_at;               // time offset (grid units) before the step
    };

    std::vector<double> base(n);
    for (long i = 0; i < n; ++i) base[i] = psi.at(0, i);
    auto shifted = [&](long z, const std::array<int, 3>& dx, int dtn) {
        int t = static_cast<int>(z / ns);
        long site = z % ns;
        std::array<int, 3> xv{};
        site_unpack(lat, site, xv);
        for (int a = 0; a < lat.d; ++a) xv[a] += dx[a];
        return base[st_pack(lat, t + dtn, site_pack(lat, xv))];
    };

    for (int rt = 0; rt < lat.Nt; ++rt)
        for (long ri = 0; ri < ns; ++ri) {
            double vr = V.v[st_pack(lat, rt, ri)];
            if (vr == 0.0) continue;
            std::array<int, 3> rx{};
            site_unpack(lat, ri, rx);
            std::array<int, 3> steps{};
            for (int a = 0; a < lat.d; ++a) {
                int h = rx[a] <= lat.M / 2 ? rx[a] : rx[a] - lat.M;
                steps[a] = h;
            }
            int tsteps = rt <= lat.Nt / 2 ? rt : rt - lat.Nt;

            // build the staircase
            std::vector<Step> path;
            std::array<int, 3> pos{};
            for (int a = 0; a < lat.d; ++a) {
                int sgn = steps[a] >= 0 ? 1 : -1;
                for (int srep = 0; srep < std::abs(steps[a]); ++srep) {
                    path.push_back({a, sgn, pos, 0});
                    pos[a] += sgn;
                }
            }
            int spatial_len = static_cast<int>(path.size());
            int tsgn = tsteps >= 0 ? 1 : -1;
            for (int srep = 0; srep < std::abs(tsteps); ++srep)
                path.push_back({-1, tsgn, pos, tsgn * srep});

            double w = vr * cell;
            for (long z = 0; z < n; ++z) {
                // R0: time-segment telescoping
                double r0 = 0.0;
                for (size_t p = spatial_len; p < path.size(); ++p) {
                    const Step& st = path[p];
                    r0 += shifted(z, st.at, st.t_at + st.sign) -
                          shifted(z, st.at, st.t_at);
                }
                R.R0.at(0, z) += w * r0;
                // Rij: second-order spatial telescoping
                double rij = 0.0;
                for (int p = 0; p < spatial_len; ++p) {
                    const Step& sp = path[p];
                    for (int qq = 0; qq < p; ++qq) {
                        const Step& sq = path[qq];
                        std::array<int, 3> y = sq.at;
                        std::array<int, 3> yi = y, yj = y, yij = y;
                        yi[sp.axis] += sp.sign;
                        yj[sq.axis] += sq.sign;
                        yij[sp.axis] += sp.sign;
                        yij[sq.axis] += sq.sign;
                        rij += shifted(z, yij, 0) - shifted(z, yj, 0) -
                               shifted(z, yi, 0) + shifted(z, y, 0);
                    }
                }
                R.Rij.at(0, z) += w * rij;
                // Reps: symmetrisation correction per axis
                double re = 0.0;
                for (int a = 0; a < lat.d; ++a) {
                    if (steps[a] == 0) continue;
                    std::array<int, 3> zp{}, zm{};
                    zp[a] = 1;
                    zm[a] = -1;
                    double d2 = shifted(z, zp, 0) - 2.0 * shifted(z, {}, 0) +
                                shifted(z, zm, 0);
                    re += 0.5 * std::abs(static_cast<double>(steps[a])) * d2;
                }
                R.Reps.at(0, z) += w * re;
            }
        }
    return R;
}

// ---------------------------------------------------------------------------
// Cumulant flow
// ---------------------------------------------------------------------------

struct FlowAudit {
    long dropped_contributions = 0;  // grade-closure overflows, counted not silent
    double max_box_overflow = 0.0;   // worst edge-mass fraction outside the box
};

struct CumulantFlowOptions {
    int per_octave = 8;
    double r_bar = 0.0;
    double box_radius_factor = 8.0;
    bool keep_trajectory = false;
};

using CumulantState = std::map<MultiIndex, ClusterKernel>;

struct CumulantFlowResult {
    FlowGrid grid;
    CumulantState at_half;
    std::vector<CumulantState> at_nodes;  // populated when keep_trajectory
    std::map<int, double> counterterms;   // ell -> r1^{ell,eps}
    double r_eps = 0.0;
    FlowAudit audit;
    // per relevant (ell,1): the integrand trajectory at mids, for diagnostics
    std::map<int, std::vector<TwoPointKernel>> relevant_rhs;
};

namespace flow_detail {

struct SourceA {
    MultiIndex b;
    GradeIndex gb, gc;
};
struct SourceB {
    MultiIndex b, c;
    int pos_b = 0, pos_c = 0;
};
struct TargetPlan {
    MultiIndex a;
    std::vector<SourceA> srcA;
    std::vector<SourceB> srcB;
};

inline int slot_position(const MultiIndex& m, const GradeIndex& g, int avoid = -1) {
    for (int i = 0; i < m.n(); ++i)
        if (i != avoid && m.slots[i] == g) return i;
    return -1;
}

// Closure of multi-indices reachable from the seeds within the truncation
// caps, with target-centric source lists.
inline std::vector<TargetPlan> plan_closure(const FlowParams& p,
                                            const std::set<MultiIndex>& seeds,
                                            FlowAudit& audit) {
    const int Lcap = 2 * p.ell_bar;
    auto n_cap = [&](int L) { return std::min(1 << (L + 1), 8); };
    auto admissible = [&](const MultiIndex& m) {
        if (m.L() > Lcap) return false;
        if (m.n() > n_cap(m.L())) return false;
        if ((m.n() + m.K()) % 2 != 0) return false;  // parity-zero blocks
        for (auto& g : m.slots)
            if (g.k > FlowParams::k_max(g.ell)) return false;
        return true;
    };

    std::set<MultiIndex> known = seeds;
    bool grew = true;
    while (grew) {
        grew = false;
        std::set<MultiIndex> current = known;
        for (const auto& b : current) {
            for (int pi = 0; pi < b.n(); ++pi)
                for (int qi = 0; qi < b.n(); ++qi) {
                    if (pi == qi || b.slots[pi].k == 0) continue;
                    const GradeIndex gb = b.slots[pi], gc = b.slots[qi];
                    std::vector<GradeIndex> as;
                    for (int t = 0; t < b.n(); ++t)
                        if (t != pi && t != qi) as.push_back(b.slots[t]);
                    as.push_back(GradeIndex{gb.ell + gc.ell + 1, gb.k + gc.k - 1});
                    MultiIndex a = MultiIndex::of(as);
                    if (!admissible(a)) {
                        ++audit.dropped_contributions;
                        continue;
                    }
                    if (known.insert(a).second) grew = true;
                }
            for (const auto& c : current)
                for (int pi = 0; pi < b.n(); ++pi)
                    for (int qi = 0; qi < c.n(); ++qi) {
                        if (b.slots[pi].k == 0) continue;
                        const GradeIndex gb = b.slots[pi], gc = c.slots[qi];
                        std::vector<GradeIndex> as;
                        for (int t = 0; t < b.n(); ++t)
                            if (t != pi) as.push_back(b.slots[t]);
                        for (int t = 0; t < c.n(); ++t)
                            if (t != qi) as.push_back(c.slots[t]);
                        as.push_back(GradeIndex{gb.ell + gc.ell + 1, gb.k + gc.k - 1});
                        MultiIndex a = MultiIndex::of(as);
                        if (!admissible(a)) {
                            ++audit.dropped_contributions;
                            continue;
                        }
                        if (known.insert(a).second) grew = true;
                    }
        }
    }

    std::vector<TargetPlan> out;
    for (const auto& a : known) {
        if (a.L() == 0) continue;  // L = 0 cumulants do not flow
        TargetPlan tp;
        tp.a = a;
        for (int i = 0; i < a.n(); ++i) {
            const GradeIndex gi = a.slots[i];
            for (int lp = 0; lp <= gi.ell - 1; ++lp)
                for (int kp = 0; kp <= gi.k; ++kp) {
                    GradeIndex gb{gi.ell - 1 - lp, kp + 1};
                    GradeIndex gc{lp, gi.k - kp};
                    if (gb.k > FlowParams::k_max(gb.ell) ||
                        gc.k > FlowParams::k_max(gc.ell))
                        continue;
                    {
                        std::vector<GradeIndex> bs;
                        for (int t = 0; t < a.n(); ++t)
                            if (t != i) bs.push_back(a.slots[t]);
                        bs.push_back(gb);
                        bs.push_back(gc);
                        MultiIndex b = MultiIndex::of(bs);
                        if (known.count(b)) tp.srcA.push_back(SourceA{b, gb, gc});
                    }
                    std::vector<int> rest;
                    for (int t = 0; t < a.n(); ++t)
                        if (t != i) rest.push_back(t);
                    int nrest = static_cast<int>(rest.size());
                    for (int mask = 0; mask < (1 << nrest); ++mask) {
                        std::vector<GradeIndex> bs{gb}, cs{gc};
                        for (int t = 0; t < nrest; ++t)
                            ((mask >> t) & 1 ? bs : cs).push_back(a.slots[rest[t]]);
                        MultiIndex b = MultiIndex::of(bs), c = MultiIndex::of(cs);
                        if (!known.count(b) || !known.count(c)) continue;
                        SourceB s;
                        s.b = b;
                        s.c = c;
                        s.pos_b = slot_position(b, gb);
                        s.pos_c = slot_position(c, gc);
                        tp.srcB.push_back(s);
                    }
                }
        }
        if (!tp.srcA.empty() || !tp.srcB.empty()) out.push_back(std::move(tp));
    }
    return out;
}

// d F^a / d sigma = -(A + B) for the given targets.
inline ClusterKernel cumulant_rhs_one(const TargetPlan& tp, const CumulantState& state,
                                      const EdgePtr& gdot, const LatticeSpec& lat) {
    ClusterKernel acc;
    acc.lat = lat;
    for (const auto& s : tp.srcA) {
        auto it = state.find(s.b);
        if (it == state.end() || it->second.zero()) continue;
        int pb = slot_position(s.b, s.gb);
        int pc = slot_position(s.b, s.gc, pb);
        if (pb < 0 || pc < 0) continue;
        kernel_add(acc, contract_positions_within(it->second, pb, pc, gdot), -1.0);
    }
    for (const auto& s : tp.srcB) {
        auto itb = state.find(s.b);
        auto itc = state.find(s.c);
        if (itb == state.end() || itc == state.end()) continue;
        if (itb->second.zero() || itc->second.zero()) continue;
        kernel_add(acc,
                   contract_positions(itb->second, s.pos_b, itc->second, s.pos_c, gdot),
                   -1.0);
    }
    compact(acc);
    return acc;
}

}  // namespace flow_detail

// Solves the cumulant flow by the L-graded triangular structure: at each
// level the right-hand side depends only on strictly lower levels, so the
// trajectory is a composite-midpoint quadrature over the geometric sigma
// grid.  Relevant first cumulants ((ell,1), hom < 0) are fixed by the
// localisation condition; everything else integrates backward from zero.
inline CumulantFlowResult solve_cumulant_flow(const ScaleOps& ops, const FlowParams& p,
                                              double lambda,
                                              const CumulantFlowOptions& opt = {}) {
    const LatticeSpec& lat = ops.lattice();
    CumulantFlowResult res;
    res.grid = make_flow_grid(lat, p.s, opt.per_octave);
    const auto& nodes = res.grid.nodes;
    const auto& mids = res.grid.mids;
    size_t J = mids.size();

    auto seeds = cumulant_seeds(lat, lambda, opt.r_bar);
    std::set<MultiIndex> seed_keys;
    for (auto& [k, v] : seeds) seed_keys.insert(k);
    auto plans = flow_detail::plan_closure(p, seed_keys, res.audit);
    std::sort(plans.begin(), plans.end(),
              [](const auto& a, const auto& b) { return a.a.L() < b.a.L(); });

    // trajectory storage at nodes and midpoints
    std::vector<CumulantState> at_node(nodes.size()), at_mid(J);
    for (auto& st : at_node) st = seeds;
    for (auto& st : at_mid) st = seeds;

    // Gdot edges per grid point
    std::vector<EdgePtr> gdot_node(nodes.size()), gdot_mid(J);
    for (size_t j = 0; j < nodes.size(); ++j)
        gdot_node[j] = edge_from(kernel_realize(*ops.Gdot(nodes[j])));
    for (size_t j = 0; j < J; ++j)
        gdot_mid[j] = edge_from(kernel_realize(*ops.Gdot(mids[j])));

    std::vector<double> khalf_kernel;  // K_sigma kernels realised on demand
    auto K_kernel_at = [&](double sigma) { return kernel_realize(*ops.K(sigma)); };

    int Lcap = 2 * p.ell_bar;
    for (int L = 1; L <= Lcap; ++L) {
        for (const auto& tp : plans) {
            if (tp.a.L() != L) continue;
            // RHS at nodes and midpoints (depends on levels < L only)
            std::vector<ClusterKernel> rhs_node(nodes.size()), rhs_mid(J);
            for (size_t j = 0; j < nodes.size(); ++j)
                rhs_node[j] =
                    flow_detail::cumulant_rhs_one(tp, at_node[j], gdot_node[j], lat);
            for (size_t j = 0; j < J; ++j)
                rhs_mid[j] =
                    flow_detail::cumulant_rhs_one(tp, at_mid[j], gdot_mid[j], lat);

            // integrate downward from zero boundary data at sigma*
            std::vector<ClusterKernel> val_node(nodes.size()), val_mid(J);
            val_node[0].lat = lat;
            for (size_t j = 0; j < J; ++j) {
                double h = nodes[j] - nodes[j + 1];
                val_mid[j] = val_node[j];
                kernel_add(val_mid[j], rhs_node[j], -0.5 * h);
                flow_detail::compact(val_mid[j]);
                val_node[j + 1] = val_node[j];
                kernel_add(val_node[j + 1], rhs_mid[j], -h);
                flow_detail::compact(val_node[j + 1]);
            }

            // relevant (ell,1) first cumulants: localisation condition fixes
            // the boundary delta so the trajectory stays bounded
            bool is_rel_first = tp.a.n() == 1 && tp.a.slots[0].k == 1 &&
                                FlowParams::classify(p.hom(tp.a)) == Relevance::relevant;
            if (is_rel_first) {
                int ell = tp.a.slots[0].ell;
                double r1 = 0.0;
                std::vector<TwoPointKernel> rhs_tp;
                for (size_t j = 0; j < J; ++j) {
                    double h = nodes[j] - nodes[j + 1];
                    TwoPointKernel W = to_two_point(rhs_mid[j]);
                    TwoPointKernel smoothed = smooth_input(W, K_kernel_at(mids[j]));
                    r1 += h * localize_L(smoothed).mass;
                    rhs_tp.push_back(std::move(W));
                }
                res.counterterms[ell] = r1;
                res.relevant_rhs[ell] = std::move(rhs_tp);
                ClusterKernel shift = local_kernel(lat, r1, 1);
                for (auto& v : val_node) kernel_add(v, shift);
                for (auto& v : val_mid) kernel_add(v, shift);
                for (auto& v : val_node) flow_detail::compact(v);
                for (auto& v : val_mid) flow_detail::compact(v);
            }

            // store (slot-symmetrised) trajectory
            for (size_t j = 0; j < nodes.size(); ++j)
                at_node[j][tp.a] =
                    flow_detail::symmetrise_slots(val_node[j], tp.a.slots);
            for (size_t j = 0; j < J; ++j)
                at_mid[j][tp.a] = flow_detail::symmetrise_slots(val_mid[j], tp.a.slots);
        }
    }

    // overflow monitor on the final state
    double Rbox = opt.box_radius_factor * bracket(nodes.back());
    for (auto& [k, v] : at_node.back())
        for (auto& t : v.terms)
            for (auto& e : t.edges)
                res.audit.max_box_overflow = std::max(
                    res.audit.max_box_overflow, edge_box_overflow(lat, e.k, p.s, Rbox));

    res.at_half = at_node.back();
    if (opt.keep_trajectory) res.at_nodes = std::move(at_node);
    res.r_eps = opt.r_bar;
    for (auto& [l, r] : res.counterterms) res.r_eps += r;
    (void)khalf_kernel;
    return res;
}

// ---------------------------------------------------------------------------
// Pathwise kernel flow (noise kept symbolic through its legs)
// ---------------------------------------------------------------------------

struct KernelFlowOptions {
    int per_octave = 8;
    double r_bar = 0.0;
};

using KernelState = std::map<GradeIndex, ClusterKernel>;

struct KernelFlowResult {
    FlowGrid grid;
    std::vector<KernelState> at_nodes;
    std::vector<KernelState> at_mids;
    FlowAudit audit;
};

// dF^a/dsigma = -sum over admissible (b,c); triangular in ell.
inline KernelFlowResult solve_kernel_flow(const ScaleOps& ops, const FlowParams& p,
                                          double lambda,
                                          const std::map<int, double>& counterterms,
                                          const KernelFlowOptions& opt = {}) {
    const LatticeSpec& lat = ops.lattice();
    KernelFlowResult res;
    res.grid = make_flow_grid(lat, p.s, opt.per_octave);
    const auto& nodes = res.grid.nodes;
    const auto& mids = res.grid.mids;
    size_t J = mids.size();

    KernelState boundary = boundary_force(lat, lambda, opt.r_bar);
    for (auto& [ell, r1] : counterterms) {
        if (ell > p.ell_bar || r1 == 0.0) continue;
        GradeIndex g{ell, 1};
        auto it = boundary.find(g);
        if (it == boundary.end())
            boundary[g] = local_kernel(lat, r1, 1);
        else
            kernel_add(it->second, local_kernel(lat, r1, 1));
    }

    res.at_nodes.assign(nodes.size(), boundary);
    res.at_mids.assign(J, boundary);

    std::vector<EdgePtr> gdot_node(nodes.size()), gdot_mid(J);
    for (size_t j = 0; j < nodes.size(); ++j)
        gdot_node[j] = edge_from(kernel_realize(*ops.Gdot(nodes[j])));
    for (size_t j = 0; j < J; ++j)
        gdot_mid[j] = edge_from(kernel_realize(*ops.Gdot(mids[j])));

    auto rhs_for = [&](const GradeIndex& g, const KernelState& st,
                       const EdgePtr& gdot) {
        ClusterKernel acc;
        acc.lat = lat;
        for (int lp = 0; lp <= g.ell - 1; ++lp)
            for (int kp = 0; kp <= g.k; ++kp) {
                GradeIndex gb{g.ell - 1 - lp, kp + 1};
                GradeIndex gc{lp, g.k - kp};
                auto itb = st.find(gb);
                auto itc = st.find(gc);
                if (itb == st.end() || itc == st.end()) continue;
                if (itb->second.zero() || itc->second.zero()) continue;
                kernel_add(acc,
                           contract_positions(itb->second, 0, itc->second, 0, gdot),
                           -1.0);
            }
        flow_detail::compact(acc);
        return acc;
    };

    for (int ell = 1; ell <= p.ell_bar; ++ell) {
        for (int k = 0; k <= std::min(p.k_bar, FlowParams::k_max(ell)); ++k) {
            GradeIndex g{ell, k};
            ClusterKernel b0;
            b0.lat = lat;
            auto itb = boundary.find(g);
            if (itb != boundary.end()) b0 = itb->second;

            std::vector<ClusterKernel> val_node(nodes.size()), val_mid(J);
            val_node[0] = b0;
            for (size_t j = 0; j < J; ++j) {
                double h = nodes[j] - nodes[j + 1];
                ClusterKernel rn = rhs_for(g, res.at_nodes[j], gdot_node[j]);
                val_mid[j] = val_node[j];
                kernel_add(val_mid[j], rn, -0.5 * h);
                flow_detail::compact(val_mid[j]);
                res.at_mids[j][g] = val_mid[j];
                ClusterKernel rm = rhs_for(g, res.at_mids[j], gdot_mid[j]);
                val_node[j + 1] = val_node[j];
                kernel_add(val_node[j + 1], rm, -h);
                flow_detail::compact(val_node[j + 1]);
                res.at_nodes[j + 1][g] = val_node[j + 1];
            }
            res.at_nodes[0][g] = b0;
        }
    }
    return res;
}

// ---------------------------------------------------------------------------
// Evaluation helpers on kernel states
// ---------------------------------------------------------------------------

// Directional derivative DF(psi)[h] of the polynomial functional, exact via
// Lagrange differentiation at integer nodes (F has bounded degree).
inline Field directional_derivative(const ClusterKernel& K, const Field& psi,
                                    const Field& h, int max_degree,
                                    const Field* noise = nullptr) {
    int m = (max_degree + 1) / 2 + 1;
    int npts = 2 * m + 1;
    // solve for weights w: sum_i w_i t_i^p = [p == 1], p = 0..npts-1
    std::vector<double> t(npts);
    for (int i = 0; i < npts; ++i) t[i] = i - m;
    std::vector<std::vector<double>> A(npts, std::vector<double>(npts + 1, 0.0));
    for (int p2 = 0; p2 < npts; ++p2) {
        for (int i = 0; i < npts; ++i) A[p2][i] = std::pow(t[i], p2);
        A[p2][npts] = (p2 == 1) ? 1.0 : 0.0;
    }
    for (int c = 0; c < npts; ++c) {
        int piv = c;
        for (int r2 = c + 1; r2 < npts; ++r2)
            if (std::abs(A[r2][c]) > std::abs(A[piv][c])) piv = r2;
        std::swap(A[c], A[piv]);
        for (int r2 = 0; r2 < npts; ++r2) {
            if (r2 == c) continue;
            double f = A[r2][c] / A[c][c];
            for (int cc = c; cc <= npts; ++cc) A[r2][cc] -= f * A[c][cc];
        }
    }
    Field out(psi.lat, FieldKind::spacetime, 1);
    for (int i = 0; i < npts; ++i) {
        double w = A[i][npts] / A[i][i];
        if (w == 0.0) continue;
        Field shifted(psi.lat, FieldKind::spacetime, 1);
        for (size_t z = 0; z < psi.data.size(); ++z)
            shifted.data[z] = psi.data[z] + t[i] * h.data[z];
        Field val = kernel_evaluate(K, shifted, noise);
        for (size_t z = 0; z < out.data.size(); ++z) out.data[z] += w * val.data[z];
    }
    return out;
}

// Effective force at scale sigma: sum_a F^a(psi_sigma, ..., psi_sigma), with
// psi_sigma = J_sigma psi applied internally.
inline Field effective_force_eval(const KernelState& st, const ScaleOps& ops,
                                  double sigma, const Field& psi,
                                  const Field* noise = nullptr) {
    Field ps = apply_multiplier(*ops.J(sigma), psi);
    Field out(psi.lat, FieldKind::spacetime, 1);
    for (const auto& [g, K] : st) {
        Field v = kernel_evaluate(K, ps, noise);
        for (size_t i = 0; i < out.data.size(); ++i) out.data[i] += v.data[i];
    }
    return out;
}

// Truncation defect H_sigma(psi) = sum over overflow grades of the positive
// flow contraction, evaluated as DF^b(psi)[Gdot F^c(psi)].
inline Field H_sigma(const KernelState& st, const ScaleOps& ops, const FlowParams& p,
                     double sigma, const Field& psi, const Field* noise = nullptr) {
    Field ps = apply_multiplier(*ops.J(sigma), psi);
    Field out(psi.lat, FieldKind::spacetime, 1);
    auto gd = ops.Gdot(sigma);
    for (const auto& [gb, Kb] : st) {
        if (gb.k == 0) continue;
        for (const auto& [gc, Kc] : st) {
            if (gb.ell + gc.ell + 1 <= p.ell_bar) continue;  // inside the truncation
            if (Kb.zero() || Kc.zero()) continue;
            Field fc = kernel_evaluate(Kc, ps, noise);
            Field gfc = apply_multiplier(*gd, fc);
            Field term = directional_derivative(Kb, ps, gfc, gb.k, noise);
            for (size_t i = 0; i < out.data.size(); ++i) out.data[i] += term.data[i];
        }
    }
    return out;
}

struct CoerciveSplit {
    Field Q;            // J F(psi_s) + lambda psi_s^3
    Field higher;       // J_s F^{[>0]}
    Field linear;       // J_s (rbar psi_s)
    Field noise_part;   // J_s xi
    Field cube_defect;  // -(1 - J_s)(lambda psi_s^3)
};

// Extraction of the coercive term with its four-piece decomposition; the
// identity J_s F(psi_s) = -lambda psi_s^3 + Q holds exactly on the grid.
inline CoerciveSplit coercive_split_Q(const KernelState& st, const ScaleOps& ops,
                                      double sigma, double lambda, double r_bar,
                                      const Field& psi, const Field* noise = nullptr) {
    const LatticeSpec& lat = psi.lat;
    auto J = ops.J(sigma);
    Field ps = apply_multiplier(*J, psi);
    long n = lat.n_spacetime();

    Field cube(lat, FieldKind::spacetime, 1);
    for (long i = 0; i < n; ++i) {
        double v = ps.at(0, i);
        cube.at(0, i) = lambda * v * v * v;
    }
    Field Jcube = apply_multiplier(*J, cube);

    CoerciveSplit out{Field(lat, FieldKind::spacetime, 1),
                      Field(lat, FieldKind::spacetime, 1),
                      Field(lat, FieldKind::spacetime, 1),
                      Field(lat, FieldKind::spacetime, 1),
                      Field(lat, FieldKind::spacetime, 1)};

    for (const auto& [g, K] : st) {
        if (g.ell == 0) continue;
        Field v = kernel_evaluate(K, ps, noise);
        for (long i = 0; i < n; ++i) out.higher.at(0, i) += v.data[i];
    }
    out.higher = apply_multiplier(*J, out.higher);
    for (long i = 0; i < n; ++i) out.linear.at(0, i) = r_bar * ps.at(0, i);
    out.linear = apply_multiplier(*J, out.linear);
    if (noise != nullptr) out.noise_part = apply_multiplier(*J, *noise);
    for (long i = 0; i < n; ++i)
        out.cube_defect.at(0, i) = -(cube.at(0, i) - Jcube.at(0, i));
    for (long i = 0; i < n; ++i)
        out.Q.at(0, i) = out.higher.at(0, i) + out.linear.at(0, i) +
                         out.noise_part.at(0, i) + out.cube_defect.at(0, i);
    return out;
}

// ---------------------------------------------------------------------------
// Remainder evaluation: R_mu = Int_mu^1 [H_s(phi_s) + DF_s(phi_s) Gdot_s R_s] ds
// marched down the same grid; residual of L phi_mu = J_mu(F_mu + R_mu)
// reported over the window interior.
// ---------------------------------------------------------------------------

struct RemainderScan {
    std::vector<double> mu;
    std::vector<double> residual;  // sup of the first flow equation's defect
    std::vector<Field> R;
};

inline RemainderScan evaluate_remainder(const KernelFlowResult& traj,
                                        const ScaleOps& ops, const FlowParams& p,
                                        const Field& phi, const Field* noise,
                                        int interior_margin = 4) {
    const LatticeSpec& lat = ops.lattice();
    const auto& nodes = traj.grid.nodes;
    const auto& mids = traj.grid.mids;
    long ns = lat.n_sites();
    RemainderScan out;

    Field R(lat, FieldKind::spacetime, 1);
    auto q = symbol_q_table(lat);

    auto record = [&](double mu, const KernelState& st, const Field& Rmu) {
        Field pm = apply_multiplier(*ops.J(mu), phi);
        Field F = effective_force_eval(st, ops, mu, phi, noise);
        Field tot(lat, FieldKind::spacetime, 1);
        for (size_t i = 0; i < tot.data.size(); ++i)
            tot.data[i] = F.data[i] + Rmu.data[i];
        Field rhs = apply_multiplier(*ops.J(mu), tot);
        // L phi via the integrator-consistent one-sided time difference
        Field Lpm = apply_frac_laplacian(pm, MassFracParams{p.s, ops.m2()});
        double worst = 0.0;
        for (int t = interior_margin; t < lat.Nt - interior_margin; ++t)
            for (long i = 0; i < ns; ++i) {
                double dtphi = (pm.at(0, st_pack(lat, t, i)) -
                                pm.at(0, st_pack(lat, t - 1, i))) /
                               lat.dt;
                double L = dtphi + ops.m2() * pm.at(0, st_pack(lat, t - 1, i)) +
                           Lpm.at(0, st_pack(lat, t - 1, i));
                worst = std::max(worst, std::abs(L - rhs.at(0, st_pack(lat, t, i))));
            }
        out.mu.push_back(mu);
        out.residual.push_back(worst);
        out.R.push_back(Rmu);
    };

    record(nodes[0], traj.at_nodes[0], R);
    for (size_t j = 0; j < mids.size(); ++j) {
        double h = nodes[j] - nodes[j + 1];
        Field psm = apply_multiplier(*ops.J(mids[j]), phi);
        Field Hs = H_sigma(traj.at_mids[j], ops, p, mids[j], phi, noise);
        // DF(phi_s)[Gdot R]
        Field gR = apply_multiplier(*ops.Gdot(mids[j]), R);
        Field DFR(lat, FieldKind::spacetime, 1);
        for (const auto& [g, K] : traj.at_mids[j]) {
            if (g.k == 0 || K.zero()) continue;
            Field term = directional_derivative(K, psm, gR, g.k, noise);
            for (size_t i = 0; i < DFR.data.size(); ++i) DFR.data[i] += term.data[i];
        }
        for (size_t i = 0; i < R.data.size(); ++i)
            R.data[i] += h * (Hs.data[i] + DFR.data[i]);
        record(nodes[j + 1], traj.at_nodes[j + 1], R);
    }
    (void)q;
    return out;
}

// ---------------------------------------------------------------------------
// Family norms (Eq.-(70)/(74) style) over a solved trajectory
// ---------------------------------------------------------------------------

inline NormReport family_norm_kernels(const KernelFlowResult& traj,
                                      const KernelNorms& norms, const FlowParams& p) {
    NormReport rep;
    rep.kind = "family_kernel";
    for (size_t j = 0; j < traj.grid.nodes.size(); ++j) {
        double sigma = traj.grid.nodes[j];
        for (const auto& [g, K] : traj.at_nodes[j]) {
            if (g.ell == 0 && g.k == 0) continue;  // noise tag: random, not measured here
            if (K.zero()) continue;
            double v = std::pow(bracket(sigma), -p.hom(g)) * norms.kernel_norm(K, g, sigma);
            if (v > rep.value) {
                rep.value = v;
                rep.sigma = sigma;
            }
        }
    }
    return rep;
}

inline NormReport family_norm_cumulants(const std::vector<CumulantState>& at_nodes,
                                        const std::vector<double>& nodes,
                                        const KernelNorms& norms, const FlowParams& p) {
    NormReport rep;
    rep.kind = "family_cumulant";
    for (size_t j = 0; j < nodes.size(); ++j)
        for (const auto& [m, K] : at_nodes[j]) {
            if (K.zero()) continue;
            double v = std::pow(
                std::pow(bracket(nodes[j]), -p.hom(m)) * norms.cumulant_norm(K, nodes[j]),
                1.0 / m.n());
            if (v > rep.value) {
                rep.value = v;
                rep.sigma = nodes[j];
            }
        }
    return rep;
}

}  // namespace fracphi4
