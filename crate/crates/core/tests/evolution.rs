use nsbohm::evolve::{
    evolve_graded, free_propagator_eval, split_step, time_reverse, FreeEvolution, PhysicsParams,
    Potential,
};
use nsbohm::hyperreal::{Exponent, HyperReal};
use nsbohm::perturb::{perturb, PerturbationSpec};
use nsbohm::wavefield::{bump, gaussian, l2_distance, Component, GradedWaveFunction, Grid, WaveFunction};
use num_complex::Complex64;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn grid() -> Grid {
    Grid::new(-40.0, 40.0, 4096).unwrap()
}

/// Standard deviation of |ψ|².
fn width(wf: &WaveFunction) -> f64 {
    let g = wf.grid();
    let rho: Vec<f64> = wf.samples().iter().map(|s| s.norm_sqr()).collect();
    let m: f64 = rho.iter().sum();
    let mean: f64 = (0..g.n()).map(|j| g.x(j) * rho[j]).sum::<f64>() / m;
    let var: f64 = (0..g.n()).map(|j| (g.x(j) - mean).powi(2) * rho[j]).sum::<f64>() / m;
    var.sqrt()
}

/// Closed-form free Gaussian of initial width `s0` centred at `c`, at rest.
fn gaussian_exact(x: f64, t: f64, c: f64, s0: f64, p: &PhysicsParams) -> Complex64 {
    let a = Complex64::new(1.0, p.hbar * t / (2.0 * p.mass * s0 * s0));
    let pre = (2.0 * std::f64::consts::PI * s0 * s0).powf(-0.25);
    let z = -(x - c) * (x - c) / (4.0 * s0 * s0);
    (z / a).exp() / a.sqrt() * pre
}

fn random_potential(rng: &mut ChaCha8Rng, g: &Grid) -> Potential {
    Potential::Sampled {
        values: (0..g.n()).map(|_| rng.gen_range(-2.0..2.0)).collect(),
    }
}

fn random_state(rng: &mut ChaCha8Rng, g: Grid) -> WaveFunction {
    let a = gaussian(g, rng.gen_range(-5.0..5.0), rng.gen_range(0.5..2.0), rng.gen_range(-2.0..2.0)).unwrap();
    let b = gaussian(g, rng.gen_range(-5.0..5.0), rng.gen_range(0.5..2.0), rng.gen_range(-2.0..2.0)).unwrap();
    a.add(&b.scale(Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))))
        .unwrap()
}

#[test]
fn free_gaussian_width_matches_closed_form() {
    let p = PhysicsParams::default();
    for s0 in [0.7, 1.0, 1.5] {
        let wf = gaussian(grid(), 0.0, s0, 0.0).unwrap();
        let w0 = width(&wf);
        for (steps, t) in [(500, 0.5), (1000, 1.0), (2000, 2.0)] {
            let out = split_step(&wf, &Potential::Free, &p, t / steps as f64, steps).unwrap();
            let exact = w0 * (1.0 + (p.hbar * t / (2.0 * p.mass * s0 * s0)).powi(2)).sqrt();
            assert!((width(&out) / exact - 1.0).abs() < 1e-4, "s0 = {s0}, t = {t}");
        }
    }
}

#[test]
fn harmonic_ground_state_density_is_stationary() {
    let p = PhysicsParams { mass: 1.3, hbar: 0.9 };
    let omega = 1.7;
    let g = Grid::new(-10.0, 10.0, 512).unwrap();
    let wf = gaussian(g, 0.0, (p.hbar / (2.0 * p.mass * omega)).sqrt(), 0.0).unwrap();
    let out = split_step(&wf, &Potential::Harmonic { omega }, &p, 1e-3, 2000).unwrap();
    let worst = wf
        .samples()
        .iter()
        .zip(out.samples())
        .map(|(a, b)| (a.norm_sqr() - b.norm_sqr()).abs())
        .fold(0.0, f64::max);
    assert!(worst < 1e-6, "{worst}");
}

#[test]
fn unitarity_over_a_thousand_steps() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let g = Grid::new(-20.0, 20.0, 1024).unwrap();
    let p = PhysicsParams::default();
    let potentials = [
        Potential::Free,
        Potential::Harmonic { omega: 1.0 },
        random_potential(&mut rng, &g),
    ];
    for v in &potentials {
        let wf = random_state(&mut rng, g);
        let out = split_step(&wf, v, &p, 1e-3, 1000).unwrap();
        assert!((out.norm2() - wf.norm2()).abs() < 1e-10, "{v:?}");
    }
}

#[test]
fn tiny_step_leaves_input_unchanged() {
    let g = grid();
    let wf = gaussian(g, 1.0, 1.0, 0.5).unwrap();
    let out = split_step(&wf, &Potential::Harmonic { omega: 1.0 }, &PhysicsParams::default(), 1e-9, 1).unwrap();
    assert!(out.max_diff(&wf) < 1e-8);
}

#[test]
fn time_reversal_symmetry() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let g = Grid::new(-20.0, 20.0, 512).unwrap();
    let p = PhysicsParams::default();
    let v = random_potential(&mut rng, &g);
    let psi = random_state(&mut rng, g);
    let fwd = split_step(&psi, &v, &p, 1e-3, 300).unwrap();
    let back = split_step(&time_reverse(&fwd), &v, &p, 1e-3, 300).unwrap();
    assert!(back.max_diff(&psi.conj()) < 1e-8);
    let real = gaussian(g, 0.0, 1.0, 0.0).unwrap();
    assert_eq!(time_reverse(&real), real);
    assert_eq!(time_reverse(&time_reverse(&psi)), psi);
}

#[test]
fn forward_then_backward_returns() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let g = Grid::new(-20.0, 20.0, 512).unwrap();
    let p = PhysicsParams::default();
    let v = random_potential(&mut rng, &g);
    let psi = random_state(&mut rng, g);
    let fwd = split_step(&psi, &v, &p, 2e-3, 400).unwrap();
    let back = split_step(&fwd, &v, &p, -2e-3, 400).unwrap();
    assert!(back.max_diff(&psi) < 1e-8);
}

#[test]
fn graded_evolution_commutes_with_instantiation() {
    let g = Grid::new(-20.0, 20.0, 1024).unwrap();
    let p = PhysicsParams::default();
    let v = Potential::Harmonic { omega: 0.8 };
    let state = GradedWaveFunction::new(vec![
        Component {
            exponent: Exponent::from_integer(0),
            scalar: HyperReal::one() - HyperReal::eps(),
            part: gaussian(g, -1.0, 1.0, 0.5).unwrap(),
        },
        Component {
            exponent: Exponent::new(1, 2),
            scalar: HyperReal::from_real(2.0),
            part: gaussian(g, 3.0, 0.7, -1.0).unwrap(),
        },
    ])
    .unwrap();
    let evolved = evolve_graded(&state, &v, &p, 1e-3, 500).unwrap();
    for e in [1e-2, 1e-3] {
        let direct = split_step(&state.instantiate(e), &v, &p, 1e-3, 500).unwrap();
        assert!(evolved.instantiate(e).max_diff(&direct) < 1e-8, "e = {e}");
    }
    let single = GradedWaveFunction::standard(state.parts()[0].clone());
    let a = evolve_graded(&single, &v, &p, 1e-3, 50).unwrap();
    let b = split_step(state.parts()[0], &v, &p, 1e-3, 50).unwrap();
    assert_eq!(a.parts()[0], &b);
}

#[test]
fn perturbation_distance_is_conserved() {
    let g = Grid::new(-20.0, 120.0, 4096).unwrap();
    let p = PhysicsParams::default();
    let psi = bump(g, 0.0, 1.0).unwrap();
    let spec = PerturbationSpec { grade: Exponent::from_integer(1), envelope_center: 2.0, envelope_width: 20.0 };
    let pert = perturb(&psi, &spec, 0.0).unwrap();
    let base = GradedWaveFunction::standard(psi);
    let d0 = l2_distance(&base, &pert.state).unwrap();
    let b1 = evolve_graded(&base, &Potential::Free, &p, 1e-3, 200).unwrap();
    let s1 = evolve_graded(&pert.state, &Potential::Free, &p, 1e-3, 200).unwrap();
    let d1 = l2_distance(&b1, &s1).unwrap();
    assert!(d1.approx_agrees_to(&d0, Exponent::from_integer(3), 1e-9), "{d0} vs {d1}");
}

#[test]
fn free_evolution_jump_matches_stepping() {
    let g = grid();
    let p = PhysicsParams { mass: 0.8, hbar: 1.1 };
    let wf = gaussian(g, -2.0, 0.9, 1.3).unwrap();
    let stepped = split_step(&wf, &Potential::Free, &p, 1e-3, 1500).unwrap();
    let jumped = FreeEvolution::new(&wf, p).unwrap().at(1.5);
    assert!(stepped.max_diff(&jumped) < 1e-10);
}

#[test]
fn propagator_matches_closed_form_gaussian() {
    let g = grid();
    let p = PhysicsParams::default();
    let wf = gaussian(g, 0.0, 1.0, 0.0).unwrap();
    for t in [0.3, 1.0, 2.0] {
        for x in [-3.0, 0.0, 1.7, 4.2, 60.0, -75.0] {
            let v = free_propagator_eval(&wf, x, t, &p).unwrap();
            let exact = gaussian_exact(x, t, 0.0, 1.0, &p);
            assert!((v - exact).norm() < 1e-4, "x = {x}, t = {t}: {v} vs {exact}");
        }
    }
}

#[test]
fn propagator_matches_split_step_on_grid() {
    let g = grid();
    let p = PhysicsParams::default();
    let wf = bump(g, -1.0, 1.5).unwrap();
    let t = 0.8;
    let spectral = split_step(&wf, &Potential::Free, &p, 1e-3, 800).unwrap();
    for j in (1800..2300).step_by(37) {
        let v = free_propagator_eval(&wf, g.x(j), t, &p).unwrap();
        assert!((v - spectral.samples()[j]).norm() < 1e-3, "x = {}", g.x(j));
    }
}

#[test]
fn propagator_edge_cases() {
    let g = grid();
    let p = PhysicsParams::default();
    assert_eq!(free_propagator_eval(&WaveFunction::zeros(g), 1.0, 1.0, &p).unwrap(), Complex64::new(0.0, 0.0));
    assert!(free_propagator_eval(&gaussian(g, 0.0, 1.0, 0.0).unwrap(), 1.0, 0.0, &p).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn evolution_is_linear(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = Grid::new(-20.0, 20.0, 256).unwrap();
        let p = PhysicsParams::default();
        let v = random_potential(&mut rng, &g);
        let (psi, phi) = (random_state(&mut rng, g), random_state(&mut rng, g));
        let a = Complex64::new(rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0));
        let b = Complex64::new(rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0));
        let lhs = split_step(&psi.scale(a).add(&phi.scale(b)).unwrap(), &v, &p, 1e-3, 100).unwrap();
        let rhs = split_step(&psi, &v, &p, 1e-3, 100).unwrap().scale(a)
            .add(&split_step(&phi, &v, &p, 1e-3, 100).unwrap().scale(b)).unwrap();
        prop_assert!(lhs.max_diff(&rhs) < 1e-10);
    }

    #[test]
    fn norm_is_preserved(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = Grid::new(-20.0, 20.0, 256).unwrap();
        let p = PhysicsParams { mass: rng.gen_range(0.5..2.0), hbar: rng.gen_range(0.5..2.0) };
        let v = random_potential(&mut rng, &g);
        let psi = random_state(&mut rng, g);
        let out = split_step(&psi, &v, &p, rng.gen_range(-1e-2..1e-2), 1000).unwrap();
        prop_assert!((out.norm2() - psi.norm2()).abs() < 1e-10);
    }
}
