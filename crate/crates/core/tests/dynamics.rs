use std::f64::consts::PI;

use fisherqm::dynamics::{
    classical_lagrangian, evolve_hydro, evolve_schrodinger, fisher_information_edge, functional_derivatives,
    hamiltonian, hydro_rhs, poisson_bracket, quantum_lagrangian, stationary_trajectory, Chart, EvolveOptions,
    Functional, Mode,
};
use fisherqm::fields::{gaussian_density, madelung_forward, normalize, DensityFloor, HydroState, PhysParams, WaveFunction};
use fisherqm::grid::{Boundary, ComplexField, Grid, RealField};
use fisherqm::potential::PotentialExpr;
use fisherqm::variation::eigensolve_ground_state;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const FLOOR: DensityFloor = DensityFloor::Absolute(1e-300);

fn params(v: &str) -> PhysParams {
    PhysParams::paper(1.0, 1.0, PotentialExpr::parse(v).unwrap()).unwrap()
}

fn state(p: RealField, s: RealField) -> HydroState {
    let p = normalize(&p, FLOOR).unwrap();
    HydroState::with_checks(p, s, FLOOR, 1e-10).unwrap()
}

fn gaussian_state(g: &Grid, c: f64, sigma: f64) -> HydroState {
    state(gaussian_density(g, c, sigma).unwrap(), RealField::constant(g, 0.0).unwrap())
}

fn moments(p: &RealField) -> (f64, f64) {
    let xs = p.grid().xs();
    let w = p.grid().weights();
    let m1: f64 = (0..xs.len()).map(|k| w[k] * xs[k] * p.values()[k]).sum();
    let m2: f64 = (0..xs.len()).map(|k| w[k] * xs[k] * xs[k] * p.values()[k]).sum();
    (m1, m2 - m1 * m1)
}

fn dot(a: &RealField, b: &RealField) -> f64 {
    a.zip_map(b, |x, y| x * y).unwrap().integrate().unwrap()
}

#[test]
fn coherent_state_follows_the_classical_orbit() {
    // h²-level dispersion shifts E₁ − E₀ by about −h²/8; [−8, 8] keeps the
    // accumulated phase lag of one period under the tolerance
    let g = Grid::new_1d(-8.0, 8.0, 512, Boundary::Dirichlet).unwrap();
    let st = gaussian_state(&g, 1.0, 0.5f64.sqrt());
    let dt = 1e-3;
    let steps = (2.0 * PI / dt).round() as usize;
    let opts = EvolveOptions { floor: FLOOR, sample_every: 100, ..Default::default() };
    let traj = evolve_hydro(&st, &params("0.5*x^2"), dt, steps, Mode::Quantum, opts).unwrap();
    let worst = traj
        .times()
        .iter()
        .zip(traj.states())
        .map(|(t, s)| (moments(s.p()).0 - t.cos()).abs())
        .fold(0.0, f64::max);
    assert!(worst <= 1e-3, "{worst}");
}

#[test]
fn free_gaussian_spreads() {
    let g = Grid::new_1d(-15.0, 15.0, 1024, Boundary::Dirichlet).unwrap();
    let st = gaussian_state(&g, 0.0, 0.5f64.sqrt());
    let par = params("0");
    let (dt, steps) = (5e-4, 2000);
    let opts = EvolveOptions { floor: FLOOR, sample_every: steps, ..Default::default() };
    let hydro = evolve_hydro(&st, &par, dt, steps, Mode::Quantum, opts).unwrap();
    let var_h = moments(hydro.last().unwrap().p()).1;
    let cn = evolve_schrodinger(&madelung_forward(&st, 1.0), &par, dt, steps, steps).unwrap();
    let var_c = moments(&cn.last().unwrap().density()).1;
    assert!((var_h - 1.0).abs() <= 1e-3, "hydro {var_h}");
    assert!((var_c - 1.0).abs() <= 1e-3, "schrodinger {var_c}");
}

#[test]
fn classical_ensemble_at_rest_stays_frozen() {
    let g = Grid::new_1d(-10.0, 10.0, 256, Boundary::Dirichlet).unwrap();
    let st = gaussian_state(&g, 0.3, 1.0);
    let opts = EvolveOptions { floor: FLOOR, sample_every: 500, ..Default::default() };
    let traj = evolve_hydro(&st, &params("0"), 1e-3, 1000, Mode::Classical, opts).unwrap();
    for s in traj.states() {
        assert!(s.p().max_abs_diff(st.p()).unwrap() <= 1e-10);
    }
}

#[test]
fn crank_nicolson_is_unitary() {
    let g = Grid::new_1d(-10.0, 10.0, 256, Boundary::Dirichlet).unwrap();
    let st = state(gaussian_density(&g, 1.0, 0.8).unwrap(), RealField::from_fn(&g, |x, _| 0.7 * x).unwrap());
    let traj = evolve_schrodinger(&madelung_forward(&st, 1.0), &params("0.5*x^2"), 1e-3, 10_000, 1000).unwrap();
    let drift = traj.norms().iter().map(|n| (n - 1.0).abs()).fold(0.0, f64::max);
    assert!(drift <= 1e-10, "{drift}");
}

#[test]
fn stationary_state_rotates_at_its_energy() {
    let g = Grid::new_1d(-8.0, 8.0, 512, Boundary::Dirichlet).unwrap();
    let par = params("0.5*x^2");
    let (e0, p0) = eigensolve_ground_state(&par, &g).unwrap();
    let psi0 = WaveFunction::normalized(p0.map(|p| Complex64::new(p.sqrt(), 0.0)).unwrap()).unwrap();
    let (dt, steps) = (1e-3, 2000);
    let traj = evolve_schrodinger(&psi0, &par, dt, steps, 500).unwrap();
    let c = g.center_index();
    for (t, w) in traj.times().iter().zip(traj.states()) {
        let amp: f64 = w
            .psi()
            .values()
            .iter()
            .zip(psi0.psi().values())
            .map(|(a, b)| (a.norm() - b.norm()).abs())
            .fold(0.0, f64::max);
        assert!(amp <= 1e-6, "t = {t}: {amp}");
        if *t > 0.0 {
            let phase = w.psi().values()[c].arg();
            let mut rate = -phase / t;
            while rate < e0 - PI / t {
                rate += 2.0 * PI / t;
            }
            assert!((rate - 0.5).abs() <= 1e-4, "t = {t}: rate {rate}");
            assert!((rate - e0).abs() <= 1e-6, "t = {t}: rate {rate} vs {e0}");
        }
    }
}

fn random_smooth_state(g: &Grid, rng: &mut ChaCha8Rng) -> HydroState {
    let (c1, c2) = (rng.random_range(-1.5..0.0), rng.random_range(0.0..1.5));
    let w = rng.random_range(0.2..0.8);
    let p = RealField::from_fn(g, |x, _| {
        w * (-(x - c1).powi(2) / 1.2).exp() + (1.0 - w) * (-(x - c2).powi(2) / 0.8).exp()
    })
    .unwrap();
    let (k, a, b) = (rng.random_range(-1.0..1.0), rng.random_range(-0.5..0.5), rng.random_range(0.3..1.2));
    state(p, RealField::from_fn(g, |x, _| k * x + a * (b * x).sin()).unwrap())
}

fn bump(g: &Grid, rng: &mut ChaCha8Rng) -> RealField {
    let (c, s, amp) = (rng.random_range(-3.0..3.0), rng.random_range(0.3..1.5), rng.random_range(-1.0..1.0));
    RealField::from_fn(g, |x, _| amp * (-(x - c).powi(2) / (2.0 * s * s)).exp()).unwrap()
}

#[test]
fn functional_derivatives_match_finite_differences() {
    let g = Grid::new_1d(-10.0, 10.0, 400, Boundary::Dirichlet).unwrap();
    let par = params("0.5*x^2 + 0.1*x^4");
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let eps = 1e-5;
    for _ in 0..20 {
        let st = random_smooth_state(&g, &mut rng);
        let grad = functional_derivatives(&st, &par).unwrap();
        let phi = bump(&g, &mut rng);
        // scale the P direction with P itself so P ± εφ stays positive in the tails
        let phi_p = phi.zip_map(st.p(), |f, p| f * p).unwrap();
        let shifted = |sign: f64, dp: bool| {
            let (p, s) = if dp {
                (st.p().zip_map(&phi_p, |p, f| p + sign * eps * f).unwrap(), st.s().clone())
            } else {
                (st.p().clone(), st.s().zip_map(&phi, |s, f| s + sign * eps * f).unwrap())
            };
            hamiltonian(&HydroState::with_checks(p, s, DensityFloor::Absolute(0.0), 1.0).unwrap(), &par).unwrap()
        };
        let fd_p = (shifted(1.0, true) - shifted(-1.0, true)) / (2.0 * eps);
        let fd_s = (shifted(1.0, false) - shifted(-1.0, false)) / (2.0 * eps);
        let an_p = dot(&grad.dh_dp, &phi_p);
        let an_s = dot(&grad.dh_ds, &phi);
        assert!((fd_p - an_p).abs() <= 1e-6 * an_p.abs().max(1e-3), "P: {fd_p} vs {an_p}");
        assert!((fd_s - an_s).abs() <= 1e-6 * an_s.abs().max(1e-3), "S: {fd_s} vs {an_s}");
    }
}

#[test]
fn hamilton_equations_share_the_gradient() {
    let g = Grid::new_1d(-10.0, 10.0, 300, Boundary::Dirichlet).unwrap();
    let par = params("0.5*x^2");
    let st = random_smooth_state(&g, &mut ChaCha8Rng::seed_from_u64(9));
    let grad = functional_derivatives(&st, &par).unwrap();
    let (dp, ds) = hydro_rhs(&st, &par, Mode::Quantum).unwrap();
    assert!(dp.max_abs_diff(&grad.dh_ds).unwrap() <= 1e-12);
    assert!(ds.max_abs_diff(&grad.dh_dp.map(|v| -v).unwrap()).unwrap() <= 1e-12);
    assert!(grad.dh_ds.integrate().unwrap().abs() <= 1e-8);
}

#[test]
fn poisson_bracket_suite() {
    let g = Grid::new_1d(-10.0, 10.0, 16001, Boundary::Dirichlet).unwrap();
    let par = params("0.5*x^2");
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..5 {
        let (c, w) = (rng.random_range(-1.0..1.0), rng.random_range(0.6..1.4));
        let (k, a, b) = (rng.random_range(-1.0..1.0), rng.random_range(-0.5..0.5), rng.random_range(0.3..1.2));
        let st = state(
            RealField::from_fn(&g, |x, _| (-(x - c).powi(2) / (2.0 * w * w)).exp() * (1.0 + 0.3 * (x - c).sin().powi(2))).unwrap(),
            RealField::from_fn(&g, |x, _| k * x + a * (b * x).sin()).unwrap(),
        );
        let h = Functional::Hamiltonian;
        assert!(poisson_bracket(h, h, &st, &par).unwrap().abs() <= 1e-12);
        assert!(poisson_bracket(Functional::Norm, h, &st, &par).unwrap().abs() <= 1e-8);

        let xh = poisson_bracket(Functional::Position, h, &st, &par).unwrap();
        let pi = Functional::Momentum.value(&st, &par).unwrap();
        assert!((xh - pi / par.mass).abs() <= 1e-12 * pi.abs().max(1.0));
        let flux = RealField::from_fn(&g, |x, _| (k + a * b * (b * x).cos()) / par.mass).unwrap();
        let ehrenfest = dot(st.p(), &flux);
        assert!((xh - ehrenfest).abs() <= 1e-6 * ehrenfest.abs().max(1.0), "{xh} vs {ehrenfest}");
        let swapped = poisson_bracket(h, Functional::Position, &st, &par).unwrap();
        assert_eq!(swapped, -xh);
    }
}

#[test]
fn density_chart_agrees_on_smooth_periodic_data() {
    let g = Grid::new_1d(0.0, 2.0 * PI, 128, Boundary::Periodic).unwrap();
    let par = params("0.3*cos(x)");
    let st = state(
        RealField::from_fn(&g, |x, _| 1.0 + 0.5 * x.cos()).unwrap(),
        RealField::from_fn(&g, |x, _| 0.3 * x.sin()).unwrap(),
    );
    let (dt, steps) = (1e-3, 2000);
    let run = |chart| {
        let opts = EvolveOptions { floor: FLOOR, sample_every: steps, chart };
        evolve_hydro(&st, &par, dt, steps, Mode::Quantum, opts).unwrap()
    };
    let dens = run(Chart::Density);
    let mad = run(Chart::Madelung);
    let cn = evolve_schrodinger(&madelung_forward(&st, 1.0), &par, dt, steps, steps).unwrap();
    let pd = dens.last().unwrap().p();
    assert!(pd.max_abs_diff(mad.last().unwrap().p()).unwrap() <= 1e-10);
    assert!(pd.max_abs_diff(&cn.last().unwrap().density()).unwrap() <= 1e-6);
}

#[test]
fn lagrangians_of_the_stationary_ground_state() {
    let g = Grid::new_1d(-8.0, 8.0, 256, Boundary::Dirichlet).unwrap();
    let par = params("0.5*x^2");
    let (e0, p0) = eigensolve_ground_state(&par, &g).unwrap();
    let st = HydroState::with_checks(p0.clone(), RealField::constant(&g, 0.0).unwrap(), DensityFloor::Absolute(0.0), 1e-9)
        .unwrap();
    let window = 2.0;
    let traj = stationary_trajectory(&st, e0, window).unwrap();
    let lcl = classical_lagrangian(&traj, &par).unwrap();
    let lqm = quantum_lagrangian(&traj, &par).unwrap();
    let info = fisher_information_edge(&p0, &par).unwrap();
    assert!((lqm - lcl - par.lambda * window * info).abs() <= 1e-8);
    assert!((lcl + par.lambda * info * window).abs() <= 1e-8, "{lcl}");
    assert!(lqm.abs() <= 1e-8, "{lqm}");
    let classical = par.with_lambda(0.0).unwrap();
    assert_eq!(quantum_lagrangian(&traj, &classical).unwrap(), classical_lagrangian(&traj, &classical).unwrap());

    // S = const, uniform P: only the potential contributes
    let flat = state(RealField::constant(&g, 1.0).unwrap(), RealField::constant(&g, 0.7).unwrap());
    let t = stationary_trajectory(&flat, 0.0, 1.0).unwrap();
    let pv = dot(flat.p(), &par.potential_on(&g).unwrap());
    assert!((classical_lagrangian(&t, &par).unwrap() - pv).abs() <= 1e-10);
}

#[test]
fn plane_wave_energy_on_a_ring() {
    let g = Grid::new_1d(0.0, 2.0 * PI, 256, Boundary::Periodic).unwrap();
    let k = 3.0;
    let psi = ComplexField::from_fn(&g, |x, _| Complex64::from_polar(1.0, k * x)).unwrap();
    let psi = WaveFunction::normalized(psi).unwrap();
    let traj = evolve_schrodinger(&psi, &params("0"), 1e-3, 100, 100).unwrap();
    let h = g.dx();
    let discrete = (1.0 - (k * h).cos()) / (h * h);
    assert!((traj.energies()[0] - discrete).abs() <= 1e-10);
    assert!((discrete - k * k / 2.0).abs() <= 1e-2);
}
