#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <random>

#include "fracphi4/flow.hpp"

using namespace fracphi4;

namespace {

Field random_st(const LatticeSpec& lat, unsigned seed, double amp = 1.0) {
    Field f(lat, FieldKind::spacetime, 1);
    std::mt19937 rng(seed);
    std::normal_distribution<double> g(0.0, amp);
    for (auto& v : f.data) v = g(rng);
    return f;
}

Field smooth_st(const LatticeSpec& lat, unsigned seed) {
    Field f = random_st(lat, seed);
    ScaleOps ops(lat, 0.8, 1.0);
    return apply_multiplier(*ops.J(0.6), f);
}

// Independent one-loop contraction: the mass counterterm fixed by the same
// localisation condition, computed in closed form from the lattice symbols.
double tadpole_oracle(const LatticeSpec& lat, double s, double m2, double lambda) {
    auto q = symbol_q_table(lat);
    double acc = 0.0;
    for (int it = 0; it < lat.Nt; ++it) {
        double om = lat.omega(it);
        for (long k = 0; k < lat.n_sites(); ++k) {
            double a = m2 + std::pow(q[k], 2.0 * s);
            double jh = j_profile(std::pow(std::abs(om), 0.5 / s), 0.5, 0) *
                        j_profile(q[k], 0.5, 0);
            acc += (1.0 - jh) * (1.0 - jh) / (om * om + a * a);
        }
    }
    double vol = 2.0 * lat.T * std::pow(lat.eps * lat.M, lat.d);
    return 3.0 * lambda * acc / vol;
}

}  // namespace

TEST_CASE("resolver reproduces the reference parameter point") {
    auto p = resolve_params(1.0, 3, 0.0, 1);
    REQUIRE(p.delta_star == Catch::Approx(1.0 / 3.0));
    REQUIRE(p.delta == Catch::Approx(1.0 / 6.0));
    REQUIRE(p.beta == Catch::Approx(11.0 / 12.0));
    REQUIRE(p.theta == Catch::Approx(11.0 / 4.0));
    REQUIRE(p.rho_hom == Catch::Approx(11.0 / 2.0));
    REQUIRE(p.alpha == Catch::Approx(11.0 / 4.0));
    REQUIRE(p.zeta_exp == Catch::Approx(1.0 / 48.0));
    REQUIRE(p.gamma == Catch::Approx(43.0 / 48.0));
    REQUIRE(p.k_bar == 5);
    REQUIRE(p.flat_b > 2.0 * p.s - 2.0 * p.delta);
    REQUIRE(p.flat_b < 2.0 * p.s);
    REQUIRE(p.a * p.v == Catch::Approx(p.gamma));
}

TEST_CASE("resolver rejects the critical boundary") {
    REQUIRE_THROWS_WITH(resolve_params(0.75, 3, 0.0, 1),
                        Catch::Matchers::ContainsSubstring("subcriticality"));
    REQUIRE_THROWS_AS(resolve_params(0.7, 3, 0.0, 1), std::invalid_argument);
}

TEST_CASE("resolver admissible corners") {
    for (auto [s, d] : std::vector<std::pair<double, int>>{
             {1.0, 3}, {0.8, 3}, {0.9, 2}, {0.8, 1}}) {
        auto p = resolve_params(s, d, 1e-3, 1);
        REQUIRE(p.ell_hat >= 1);
        REQUIRE(p.ell_star > p.ell_bar);
        REQUIRE(p.v < 1.0 / 3.0);
    }
    // kappa too large: reports a named row
    REQUIRE_THROWS_AS(resolve_params(0.8, 3, 1.0, 1), std::invalid_argument);
}

TEST_CASE("grade enumeration and relevance") {
    auto p = resolve_params(0.8, 1, 1e-3, 1);
    REQUIRE(p.k_bar == 5);
    auto grades = grade_enumerate(p);
    bool found11 = false;
    for (auto& gi : grades) {
        if (gi.g.ell == 1 && gi.g.k == 1) {
            found11 = true;
            REQUIRE(gi.rel == Relevance::relevant);
        }
        if (gi.g.ell == 0 && gi.g.k == 3) REQUIRE(gi.rel == Relevance::marginal);
    }
    REQUIRE(found11);
    // n = 3 cumulants are never relevant or marginal
    for (int l1 = 0; l1 <= 1; ++l1)
        for (int k1 = 0; k1 <= 3; ++k1) {
            MultiIndex m = MultiIndex::of(
                {GradeIndex{l1, k1}, GradeIndex{0, 0}, GradeIndex{0, 0}});
            REQUIRE(p.hom(m) > 0.0);
        }
    MultiIndex cov = MultiIndex::of({GradeIndex{0, 0}, GradeIndex{0, 0}});
    REQUIRE(classify_cumulant(p, cov) == Relevance::marginal);
    REQUIRE(classify_cumulant(p, MultiIndex::of({GradeIndex{1, 1}})) ==
            Relevance::relevant);
    REQUIRE(classify_cumulant(p, MultiIndex::of({GradeIndex{1, 5}})) ==
            Relevance::irrelevant);
}

TEST_CASE("boundary force on a constant field") {
    auto lat = LatticeSpec::make(1, 1.0, 16, 2.0, 32);
    double lambda = 0.7, r_bar = 0.3, c = 1.4;
    auto F = boundary_force(lat, lambda, r_bar);
    Field psi(lat, FieldKind::spacetime, 1);
    for (auto& v : psi.data) v = c;
    double total = 0.0;
    for (auto& [g, K] : F) {
        Field val = kernel_evaluate(K, psi);  // mean mode: noise drops out
        total += val.at(0, 0);
        for (long i = 1; i < lat.n_spacetime(); ++i)
            REQUIRE(val.at(0, i) == Catch::Approx(val.at(0, 0)).margin(1e-12));
    }
    REQUIRE(total == Catch::Approx(-lambda * c * c * c + r_bar * c));
}

TEST_CASE("flow_B against a hand-assembled convolution") {
    auto lat = LatticeSpec::make(1, 1.0, 16, 2.0, 32);
    double s = 0.8, m2 = 1.0, lambda = 0.9;
    ScaleOps ops(lat, s, m2);
    double sigma = 0.7;
    auto gdot = edge_from(kernel_realize(*ops.Gdot(sigma)));

    ClusterKernel V = local_kernel(lat, -lambda, 3);
    ClusterKernel B = flow_B(V, GradeIndex{0, 3}, V, GradeIndex{0, 3}, gdot);

    Field psi = smooth_st(lat, 5);
    Field got = kernel_evaluate(B, psi);

    // direct assembly: 3 lambda^2 psi^2 (Gdot psi^3)
    Field cube(lat, FieldKind::spacetime, 1);
    for (long i = 0; i < lat.n_spacetime(); ++i)
        cube.at(0, i) = psi.at(0, i) * psi.at(0, i) * psi.at(0, i);
    Field gc = apply_multiplier(*ops.Gdot(sigma), cube);
    double worst = 0.0, scale = 0.0;
    for (long i = 0; i < lat.n_spacetime(); ++i) {
        double want = 3.0 * lambda * lambda * psi.at(0, i) * psi.at(0, i) * gc.at(0, i);
        worst = std::max(worst, std::abs(want - got.at(0, i)));
        scale = std::max(scale, std::abs(want));
    }
    REQUIRE(worst < 1e-10 * scale);
}

TEST_CASE("position-sum contraction equals (k'+1) last-input form") {
    auto lat = LatticeSpec::make(1, 1.0, 16, 2.0, 32);
    ScaleOps ops(lat, 0.8, 1.0);
    auto gdot = edge_from(kernel_realize(*ops.Gdot(0.75)));
    ClusterKernel V = local_kernel(lat, -0.4, 3);
    ClusterKernel C = local_kernel(lat, 0.9, 1);
    ClusterKernel a = contract_positions(V, 0, C, 0, gdot);
    ClusterKernel b = flow_B(V, GradeIndex{0, 3}, C, GradeIndex{0, 1}, gdot);
    Field psi = smooth_st(lat, 8);
    Field fa = kernel_evaluate(a, psi), fb = kernel_evaluate(b, psi);
    for (long i = 0; i < lat.n_spacetime(); ++i)
        REQUIRE(fa.at(0, i) == Catch::Approx(fb.at(0, i)).margin(1e-12));
}

TEST_CASE("localisation exactness V = LV + RV") {
    auto lat = LatticeSpec::make(1, 1.0, 32, 2.0, 32);
    std::mt19937 rng(17);
    std::normal_distribution<double> g;
    ScaleOps ops(lat, 0.8, 1.0);
    auto zs = parabolic_norm_table(lat, 0.8);
    for (int trial = 0; trial < 20; ++trial) {
        TwoPointKernel V;
        V.lat = lat;
        V.local_coef = g(rng);
        V.ensure_tail();
        Field noise = random_st(lat, 100 + trial);
        Field sm = apply_multiplier(*ops.K(0.6), noise);
        for (long i = 0; i < lat.n_spacetime(); ++i)
            V.v[i] = sm.at(0, i) * std::exp(-zs[i]);
        Field psi = smooth_st(lat, 200 + trial);

        Field direct = apply_two_point(V, psi);
        Field loc = apply_local(localize_L(V), psi);
        auto R = apply_remainder(V, psi);
        double worst = 0.0, scale = 1e-12;
        for (long i = 0; i < lat.n_spacetime(); ++i) {
            double rec = loc.at(0, i) + R.R0.at(0, i) + R.Rij.at(0, i) + R.Reps.at(0, i);
            worst = std::max(worst, std::abs(direct.at(0, i) - rec));
            scale = std::max(scale, std::abs(direct.at(0, i)));
        }
        REQUIRE(worst < 1e-10 * scale);
    }

    // local kernels reproduce exactly with zero remainder
    TwoPointKernel L0;
    L0.lat = lat;
    L0.local_coef = 2.5;
    Field psi = smooth_st(lat, 3);
    auto R = apply_remainder(L0, psi);
    REQUIRE(R.R0.max_abs() == 0.0);
    REQUIRE(R.Rij.max_abs() == 0.0);
    REQUIRE(R.Reps.max_abs() == 0.0);
    auto L = localize_L(L0);
    REQUIRE(L.mass == Catch::Approx(2.5));
    REQUIRE(L.first_moment[0] == 0.0);

    // spatially even kernels have vanishing first moments
    TwoPointKernel E;
    E.lat = lat;
    E.ensure_tail();
    for (long i = 0; i < lat.n_spacetime(); ++i) E.v[i] = std::exp(-2.0 * zs[i]);
    REQUIRE(std::abs(localize_L(E).first_moment[0]) < 1e-13);
}

TEST_CASE("cumulant flow: lambda = 0 is trivial") {
    auto lat = LatticeSpec::make(1, 1.0, 16, 2.0, 32);
    auto p = resolve_params(0.8, 1, 1e-3, 1);
    ScaleOps ops(lat, p.s, 1.0);
    CumulantFlowOptions opt;
    opt.per_octave = 4;
    auto res = solve_cumulant_flow(ops, p, 0.0, opt);
    REQUIRE(res.counterterms.empty());
    REQUIRE(res.r_eps == 0.0);
    for (auto& [m, K] : res.at_half) {
        if (m == MultiIndex::of({GradeIndex{0, 0}, GradeIndex{0, 0}})) continue;
        REQUIRE(K.zero());
    }
}

TEST_CASE("cumulant flow tadpole matches the one-loop oracle") {
    auto lat = LatticeSpec::make(1, 1.0, 32, 4.0, 64);
    auto p = resolve_params(0.8, 1, 1e-3, 1);
    double m2 = 1.0, lambda = 0.5;
    ScaleOps ops(lat, p.s, m2);
    double oracle = tadpole_oracle(lat, p.s, m2, lambda);
    REQUIRE(oracle > 0.0);

    std::vector<double> errs;
    for (int r : {4, 8, 16}) {
        CumulantFlowOptions opt;
        opt.per_octave = r;
        auto res = solve_cumulant_flow(ops, p, lambda, opt);
        REQUIRE(res.counterterms.count(2) == 1);
        double r1 = res.counterterms.at(2);
        REQUIRE(r1 > 0.0);
        errs.push_back(std::abs(r1 - oracle) / oracle);
        for (auto& [m, K] : res.at_half) REQUIRE((m.n() + m.K()) % 2 == 0);
        REQUIRE(res.audit.dropped_contributions > 0);  // closure overflow audited
    }
    REQUIRE(errs[1] < 0.02);
    REQUIRE(errs[1] < errs[0] / 2.0);
    REQUIRE(errs[2] < errs[1] / 2.0);
}

TEST_CASE("counterterm stable under box enlargement") {
    auto p = resolve_params(0.8, 1, 1e-3, 1);
    double m2 = 1.0, lambda = 0.5;
    CumulantFlowOptions opt;
    opt.per_octave = 8;
    auto latA = LatticeSpec::make(1, 1.0, 32, 4.0, 64);
    auto latB = LatticeSpec::make(1, 1.0, 64, 6.0, 96);
    ScaleOps opsA(latA, p.s, m2), opsB(latB, p.s, m2);
    double rA = solve_cumulant_flow(opsA, p, lambda, opt).counterterms.at(2);
    double rB = solve_cumulant_flow(opsB, p, lambda, opt).counterterms.at(2);
    REQUIRE(std::abs(rA - rB) / std::abs(rB) < 0.02);
}

TEST_CASE("counterterm divergence trend in eps at d = 2") {
    auto p = resolve_params(0.8, 2, 1e-3, 1);
    CumulantFlowOptions opt;
    opt.per_octave = 4;
    double lambda = 1.0;
    std::vector<double> r1s;
    for (auto [eps, M] :
         std::vector<std::pair<double, int>>{{0.5, 8}, {0.25, 16}, {0.125, 32}}) {
        auto lat = LatticeSpec::make(2, eps, M, 2.0, 32);
        ScaleOps ops(lat, p.s, 1.0);
        r1s.push_back(solve_cumulant_flow(ops, p, lambda, opt).counterterms.at(2));
    }
    REQUIRE(r1s[1] > r1s[0]);
    REQUIRE(r1s[2] > r1s[1]);
}

TEST_CASE("kernel flow: lambda = 0 constant; kappa_1 cross-check with cumulants") {
    auto lat = LatticeSpec::make(1, 1.0, 16, 2.0, 32);
    auto p = resolve_params(0.8, 1, 1e-3, 1);
    ScaleOps ops(lat, p.s, 1.0);

    KernelFlowOptions kopt;
    kopt.per_octave = 4;
    auto t0 = solve_kernel_flow(ops, p, 0.0, {}, kopt);
    Field psi = smooth_st(lat, 4);
    Field a = effective_force_eval(t0.at_nodes.front(), ops, t0.grid.nodes.front(), psi);
    Field b = effective_force_eval(t0.at_nodes.back(), ops, t0.grid.nodes.front(), psi);
    for (long i = 0; i < lat.n_spacetime(); ++i)
        REQUIRE(a.at(0, i) == Catch::Approx(b.at(0, i)).margin(1e-12));

    double lambda = 0.6, r_bar = 0.25;
    CumulantFlowOptions copt;
    copt.per_octave = 4;
    copt.r_bar = r_bar;
    copt.keep_trajectory = true;
    auto cum = solve_cumulant_flow(ops, p, lambda, copt);
    KernelFlowOptions kopt2;
    kopt2.per_octave = 4;
    kopt2.r_bar = r_bar;
    auto ker = solve_kernel_flow(ops, p, lambda, cum.counterterms, kopt2);

    Field phi = smooth_st(lat, 9);
    int compared = 0;
    for (auto g : {GradeIndex{1, 1}, GradeIndex{1, 3}, GradeIndex{1, 5}}) {
        auto itK = ker.at_nodes.back().find(g);
        if (itK == ker.at_nodes.back().end()) continue;
        ClusterKernel mean = gaussian_cumulant({&itK->second});
        MultiIndex m = MultiIndex::of({g});
        auto itC = cum.at_nodes.back().find(m);
        ClusterKernel cumk;
        cumk.lat = lat;
        if (itC != cum.at_nodes.back().end()) cumk = itC->second;
        // the counterterm delta sits in both routes via the boundary injection
        Field fa = kernel_evaluate(mean, phi);
        Field fb = kernel_evaluate(cumk, phi);
        double worst = 0.0, scale = 1e-12;
        for (long i = 0; i < lat.n_spacetime(); ++i) {
            worst = std::max(worst, std::abs(fa.at(0, i) - fb.at(0, i)));
            scale = std::max(scale, std::abs(fb.at(0, i)));
        }
        REQUIRE(worst < 1e-8 * std::max(scale, 1.0));
        ++compared;
    }
    REQUIRE(compared >= 2);
}

TEST_CASE("effective force at sigma* reproduces the boundary closed form") {
    auto lat = LatticeSpec::make(1, 1.0, 16, 2.0, 32);
    auto p = resolve_params(0.8, 1, 1e-3, 1);
    ScaleOps ops(lat, p.s, 1.0);
    double lambda = 0.8, r_bar = 0.2;
    KernelFlowOptions kopt;
    kopt.per_octave = 4;
    kopt.r_bar = r_bar;
    auto traj = solve_kernel_flow(ops, p, lambda, {}, kopt);
    double sstar = traj.grid.nodes.front();

    Field c(lat, FieldKind::spacetime, 1);
    for (auto& v : c.data) v = 0.9;
    Field F = effective_force_eval(traj.at_nodes.front(), ops, sstar, c);
    double want = -lambda * std::pow(0.9, 3) + r_bar * 0.9;
    for (long i = 0; i < lat.n_spacetime(); ++i)
        REQUIRE(F.at(0, i) == Catch::Approx(want).margin(1e-9));
}

TEST_CASE("H_sigma: zero cases and finite-difference cross-check") {
    auto lat = LatticeSpec::make(1, 1.0, 16, 2.0, 32);
    auto p = resolve_params(0.8, 1, 1e-3, 1);
    ScaleOps ops(lat, p.s, 1.0);
    KernelFlowOptions kopt;
    kopt.per_octave = 8;

    auto t0 = solve_kernel_flow(ops, p, 0.0, {}, kopt);
    Field psi = smooth_st(lat, 12);
    Field h0 = H_sigma(t0.at_nodes[3], ops, p, t0.grid.nodes[3], psi);
    REQUIRE(h0.max_abs() < 1e-14);

    double lambda = 0.5;
    auto tr = solve_kernel_flow(ops, p, lambda, {}, kopt);
    size_t j = tr.grid.mids.size() / 2;
    double smid = tr.grid.mids[j];
    Field Hmid = H_sigma(tr.at_mids[j], ops, p, smid, psi);
    REQUIRE(Hmid.max_abs() > 0.0);

    Field Fhi = effective_force_eval(tr.at_nodes[j], ops, smid, psi);
    Field Flo = effective_force_eval(tr.at_nodes[j + 1], ops, smid, psi);
    double h = tr.grid.nodes[j] - tr.grid.nodes[j + 1];
    Field ps = apply_multiplier(*ops.J(smid), psi);
    Field Fmid = effective_force_eval(tr.at_mids[j], ops, smid, psi);
    Field gF = apply_multiplier(*ops.Gdot(smid), Fmid);
    Field DFgF(lat, FieldKind::spacetime, 1);
    for (const auto& [g, K] : tr.at_mids[j]) {
        if (g.k == 0 || K.zero()) continue;
        Field term = directional_derivative(K, ps, gF, g.k);
        for (size_t i = 0; i < DFgF.data.size(); ++i) DFgF.data[i] += term.data[i];
    }
    double worst = 0.0, scale = 1e-12;
    for (long i = 0; i < lat.n_spacetime(); ++i) {
        double dF = (Fhi.at(0, i) - Flo.at(0, i)) / h;
        double want = dF + DFgF.at(0, i);
        worst = std::max(worst, std::abs(want - Hmid.at(0, i)));
        scale = std::max(scale, std::abs(Hmid.at(0, i)) + std::abs(dF));
    }
    REQUIRE(worst < 0.05 * scale);
}

TEST_CASE("coercive split: exact reassembly and Fourier-support vanishing") {
    auto lat = LatticeSpec::make(1, 0.5, 32, 2.0, 64);
    auto p = resolve_params(0.8, 1, 1e-3, 1);
    ScaleOps ops(lat, p.s, 1.0);
    double lambda = 0.7, r_bar = 0.15;
    KernelFlowOptions kopt;
    kopt.per_octave = 4;
    kopt.r_bar = r_bar;
    auto tr = solve_kernel_flow(ops, p, lambda, {}, kopt);

    size_t jn = tr.grid.nodes.size() / 2;
    double sigma = tr.grid.nodes[jn];
    Field psi = random_st(lat, 21);
    auto split = coercive_split_Q(tr.at_nodes[jn], ops, sigma, lambda, r_bar, psi);
    Field ps = apply_multiplier(*ops.J(sigma), psi);
    Field F = effective_force_eval(tr.at_nodes[jn], ops, sigma, psi);
    Field JF = apply_multiplier(*ops.J(sigma), F);
    double worst = 0.0, scale = 1e-12;
    for (long i = 0; i < lat.n_spacetime(); ++i) {
        double v = ps.at(0, i);
        double want = JF.at(0, i);
        double got = -lambda * v * v * v + split.Q.at(0, i);
        worst = std::max(worst, std::abs(want - got));
        scale = std::max(scale, std::abs(want));
    }
    REQUIRE(worst < 1e-10 * scale);

    double eta = sigma / (6.0 - 5.0 * sigma);
    Field pe = apply_multiplier(*ops.J(eta), ps);
    Field cube(lat, FieldKind::spacetime, 1);
    for (long i = 0; i < lat.n_spacetime(); ++i) {
        double v = pe.at(0, i);
        cube.at(0, i) = v * v * v;
    }
    Field Jc = apply_multiplier(*ops.J(sigma), cube);
    double defect = 0.0;
    for (long i = 0; i < lat.n_spacetime(); ++i)
        defect = std::max(defect, std::abs(cube.at(0, i) - Jc.at(0, i)));
    REQUIRE(defect < 1e-11 * std::max(1.0, cube.max_abs()));
}
