use fisherqm::dynamics::hamiltonian;
use fisherqm::fields::{gaussian_density, madelung_forward, normalize, DensityFloor, HydroState, PhysParams, WaveFunction};
use fisherqm::grid::{Boundary, ComplexField, Grid, RealField};
use fisherqm::info::fisher_matrix;
use fisherqm::kahler::{
    canonical_constants, canonical_transform, check_kahler_conditions, dirac_product, fisher_ds2,
    fisher_metric_density, hamiltonian_canonical, kahler_family, AField, KahlerError, KahlerPoint,
};
use fisherqm::potential::PotentialExpr;
use num_complex::Complex64;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn line(n: usize) -> Grid {
    Grid::new_1d(-10.0, 10.0, n, Boundary::Dirichlet).unwrap()
}

fn hydro(p: RealField, s: RealField) -> HydroState {
    let floor = DensityFloor::Absolute(1e-300);
    HydroState::with_checks(normalize(&p, floor).unwrap(), s, floor, 1e-10).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn kahler_conditions_hold_pointwise(
        log_p in -1.0f64..1.0,
        a in -2.0f64..2.0,
        hbar in 0.5f64..2.0,
    ) {
        let pt = KahlerPoint::new(10f64.powf(log_p), a, hbar).unwrap();
        let r = pt.residuals();
        prop_assert!(r.r1 <= 1e-12 && r.r2 <= 1e-12 && r.r3 <= 1e-12, "{r:?}");
        prop_assert_eq!(pt.g[0][1], pt.g[1][0]);
        prop_assert!(pt.min_metric_eigenvalue() > 0.0);
        let det = pt.g[0][0] * pt.g[1][1] - pt.g[0][1] * pt.g[1][0];
        prop_assert!((det - 1.0).abs() <= 1e-12 * (1.0 + a * a) * pt.g[1][1].max(1.0));
    }
}

#[test]
fn metric_density_and_line_element() {
    let g = line(1001);
    let p = gaussian_density(&g, 0.0, 1.0).unwrap();
    let gp = fisher_metric_density(&p).unwrap();
    assert_eq!(fisher_metric_density(&RealField::constant(&g, 0.5).unwrap()).unwrap().values()[3], 1.0);
    assert_eq!(gp.values()[500], 0.5 / p.values()[500]);

    // δP = ∂P/∂θ for the shift family P(x + θ)
    let dp = p.derivative(0, 1).unwrap();
    let ds2 = fisher_ds2(&p, &dp, &dp).unwrap();
    assert!((ds2 - 0.5).abs() <= 1e-4);
    assert!((ds2 - fisher_matrix(&p).unwrap().get(0, 0)).abs() <= 1e-10);

    let left = RealField::from_fn(&g, |x, _| if x < -1.0 { 1.0 } else { 0.0 }).unwrap();
    let right = RealField::from_fn(&g, |x, _| if x > 1.0 { 1.0 } else { 0.0 }).unwrap();
    assert_eq!(fisher_ds2(&p, &left, &right).unwrap(), 0.0);

    let mut bad = p.values().to_vec();
    bad[10] = 0.0;
    let bad = RealField::new(g.clone(), bad).unwrap();
    assert!(matches!(fisher_metric_density(&bad), Err(KahlerError::NonPositive { index: 10, .. })));
}

#[test]
fn family_over_a_field_of_a() {
    let g = line(256);
    // absolute residuals scale with the block entries ~ ℏ/2P, so keep P away from 0
    let p = RealField::from_fn(&g, |x, _| 1.0 + 0.8 * (0.3 * x).cos()).unwrap();
    let a = RealField::from_fn(&g, |x, _| 1.5 * (0.7 * x).sin()).unwrap();
    for hbar in [0.5, 1.0, 2.0] {
        let blocks = kahler_family(&p, &AField::Field(a.clone()), hbar).unwrap();
        for (k, pt) in blocks.points().iter().enumerate() {
            assert_eq!(pt.a, a.values()[k]);
        }
        assert!(check_kahler_conditions(&blocks).max() <= 1e-12);
    }
    let mut bad = a.values().to_vec();
    bad[7] = f64::INFINITY;
    assert!(RealField::new(g.clone(), bad).is_err());
    assert!(matches!(kahler_family(&p, &AField::Constant(f64::NAN), 1.0), Err(KahlerError::NonFiniteA(0))));
}

#[test]
fn canonical_coordinates_are_flat() {
    let g = Grid::new_1d(0.0, 2.0 * std::f64::consts::PI, 200, Boundary::Periodic).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..20 {
        let hbar = rng.random_range(0.5..2.0);
        let (d, k) = (rng.random_range(0.0..0.9), rng.random_range(-3.0..3.0));
        let st = hydro(
            RealField::from_fn(&g, |x, _| 1.0 + d * (x + k).cos()).unwrap(),
            RealField::from_fn(&g, |x, _| k * (2.0 * x).sin() + 3.0 * x).unwrap(),
        );
        let blocks = kahler_family(st.p(), &AField::Constant(0.0), hbar).unwrap();
        let canon = canonical_transform(&blocks, &st, hbar, DensityFloor::Absolute(1e-12)).unwrap();
        let report = canon.report(hbar);
        assert!(report.max_deviation <= 1e-10, "{report:?}");
        assert!(report.max_spread <= 1e-10, "{report:?}");
    }
    let (o, gm, j) = canonical_constants(1.0);
    let i = Complex64::i();
    assert_eq!(o[0][1], i);
    assert_eq!(gm[1][0], Complex64::new(1.0, 0.0));
    assert_eq!(j[0][0], -i);
}

#[test]
fn canonical_transform_preconditions() {
    let g = line(64);
    let st = hydro(gaussian_density(&g, 0.0, 1.0).unwrap(), RealField::constant(&g, 0.0).unwrap());
    let tilted = kahler_family(st.p(), &AField::Constant(0.3), 1.0).unwrap();
    assert!(matches!(
        canonical_transform(&tilted, &st, 1.0, DensityFloor::Absolute(0.0)),
        Err(KahlerError::NonZeroA { index: 0, .. })
    ));
    let flat = kahler_family(st.p(), &AField::Constant(0.0), 1.0).unwrap();
    assert!(matches!(
        canonical_transform(&flat, &st, 1.0, DensityFloor::Absolute(1e-6)),
        Err(KahlerError::SingularJacobian { index: 0, .. })
    ));
}

fn random_wave(g: &Grid, rng: &mut ChaCha8Rng) -> WaveFunction {
    let (c, s, k) = (rng.random_range(-3.0..3.0), rng.random_range(0.5..2.0), rng.random_range(-2.0..2.0));
    let noise: Vec<Complex64> = (0..g.len()).map(|_| Complex64::new(rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1))).collect();
    let psi = ComplexField::from_fn(g, |x, _| Complex64::from_polar((-(x - c).powi(2) / (2.0 * s * s)).exp(), k * x)).unwrap();
    let psi = psi.zip_map(&ComplexField::new(g.clone(), noise).unwrap(), |a, b| a + b * a.norm()).unwrap();
    WaveFunction::normalized(psi).unwrap()
}

#[test]
fn dirac_product_is_the_l2_overlap() {
    let g = line(512);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..100 {
        let hbar = rng.random_range(0.5..2.0);
        let phi = random_wave(&g, &mut rng);
        let chi = random_wave(&g, &mut rng);
        let d = dirac_product(&phi, &chi, hbar).unwrap();
        let w = g.weights();
        let overlap: Complex64 = (0..g.len()).map(|k| phi.psi().values()[k].conj() * chi.psi().values()[k] * w[k]).sum();
        let scale = overlap.norm().max(1e-3);
        assert!((d - overlap).norm() <= 1e-12 * scale, "{d} vs {overlap}");
        let nn = dirac_product(&phi, &phi, hbar).unwrap();
        assert!((nn - 1.0).norm() <= 1e-12);
        assert!((dirac_product(&chi, &phi, hbar).unwrap() - d.conj()).norm() <= 1e-15);
    }
}

#[test]
fn canonical_hamiltonian_equals_hydrodynamic() {
    let g = line(400);
    let par = PhysParams::paper(1.0, 1.0, PotentialExpr::parse("0.5*x^2").unwrap()).unwrap();
    let st = hydro(gaussian_density(&g, 0.7, 0.9).unwrap(), RealField::from_fn(&g, |x, _| 0.4 * x + 0.1 * x * x).unwrap());
    let h_hydro = hamiltonian(&st, &par).unwrap();
    let h_wave = hamiltonian_canonical(&madelung_forward(&st, 1.0), &par).unwrap();
    assert!((h_hydro - h_wave).abs() <= 1e-10 * h_hydro.abs());
}
