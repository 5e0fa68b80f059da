use nsbohm::dynamics::{
    cdf_trajectory, equivariance_residual, integrate_guidance, integrate_guidance_many, linspace,
    support_monitor, closeness_check, velocity, DynamicsConfig, Integrator, Position, Trajectory,
    TrajectoryMode,
};
use nsbohm::evolve::{FreeEvolution, PhysicsParams, Potential};
use nsbohm::hyperreal::Exponent;
use nsbohm::perturb::{perturb, PerturbationSpec};
use nsbohm::wavefield::{bump, gaussian, truncated_gaussian, GradedWaveFunction, Grid};
use nsbohm::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ContinuousCDF, Normal};

fn free_setup() -> (GradedWaveFunction, Potential, PhysicsParams) {
    let g = Grid::new(-40.0, 40.0, 4096).unwrap();
    (
        GradedWaveFunction::standard(gaussian(g, 0.0, 1.0, 0.0).unwrap()),
        Potential::Free,
        PhysicsParams::default(),
    )
}

fn harmonic_setup() -> (GradedWaveFunction, Potential, PhysicsParams) {
    let g = Grid::new(-20.0, 20.0, 2048).unwrap();
    (
        GradedWaveFunction::standard(gaussian(g, 1.0, 0.5, 0.0).unwrap()),
        Potential::Harmonic { omega: 1.0 },
        PhysicsParams::default(),
    )
}

fn max_gap(a: &Trajectory, b: &Trajectory) -> f64 {
    assert_eq!(a.times, b.times);
    a.standard_positions()
        .iter()
        .zip(b.standard_positions())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

#[test]
fn spreading_gaussian_trajectory_matches_closed_form() {
    let (s, v, p) = free_setup();
    let times = linspace(0.0, 2.0, 41);
    let cfg = DynamicsConfig::default();
    let ode = integrate_guidance(&s, &v, &p, 1.0, &times, None, &cfg).unwrap();
    let cdf = cdf_trajectory(&s, &v, &p, 1.0, &times, None, &cfg).unwrap();
    assert!(ode.is_complete() && cdf.is_complete());
    assert_eq!(ode.mode, TrajectoryMode::Standard);
    for tr in [&ode, &cdf] {
        for (t, x) in tr.times.iter().zip(tr.standard_positions()) {
            let exact = (1.0 + t * t / 4.0).sqrt();
            assert!((x - exact).abs() < 1e-3, "t = {t}: {x} vs {exact}");
        }
    }
}

#[test]
fn spreading_gaussian_velocity_field() {
    let (s, _, p) = free_setup();
    let ev = FreeEvolution::new(s.parts()[0], p).unwrap();
    for t in [0.5, 1.0, 2.0] {
        let st = GradedWaveFunction::standard(ev.at(t));
        let rate = (t / 4.0) / (1.0 + t * t / 4.0);
        for x in [-2.0, -0.3, 0.8, 2.5] {
            let v = velocity(&st, x, &p).unwrap().standard_part().unwrap();
            assert!((v - x * rate).abs() < 1e-3, "t = {t}, x = {x}");
        }
    }
}

#[test]
fn moving_median_is_tracked() {
    let g = Grid::new(-40.0, 40.0, 4096).unwrap();
    let p = PhysicsParams { mass: 2.0, hbar: 1.0 };
    let s = GradedWaveFunction::standard(gaussian(g, -1.0, 1.0, 3.0).unwrap());
    let times = linspace(0.0, 2.0, 11);
    let tr = cdf_trajectory(&s, &Potential::Free, &p, -1.0, &times, None, &DynamicsConfig::default()).unwrap();
    for (t, x) in tr.times.iter().zip(tr.standard_positions()) {
        assert!((x - (-1.0 + 1.5 * t)).abs() < 1e-6, "t = {t}");
    }
}

#[test]
fn integrators_agree_on_free_and_harmonic() {
    let times = linspace(0.0, 2.0, 41);
    let cfg = DynamicsConfig::default();
    for ((s, v, p), x0s) in [(free_setup(), [-1.5, 0.2, 2.0]), (harmonic_setup(), [0.6, 1.0, 1.4])] {
        for x0 in x0s {
            let ode = integrate_guidance(&s, &v, &p, x0, &times, None, &cfg).unwrap();
            let cdf = cdf_trajectory(&s, &v, &p, x0, &times, None, &cfg).unwrap();
            assert!(max_gap(&ode, &cdf) < 1e-3, "{v:?}, x0 = {x0}");
            assert!(equivariance_residual(&s, &v, &p, &ode, &cfg).unwrap() < 1e-3);
            assert!(equivariance_residual(&s, &v, &p, &cdf, &cfg).unwrap() < 1e-6);
        }
    }
}

#[test]
fn corrupted_trajectory_is_detected() {
    let (s, v, p) = free_setup();
    let cfg = DynamicsConfig::default();
    let mut tr = integrate_guidance(&s, &v, &p, 0.4, &linspace(0.0, 2.0, 21), None, &cfg).unwrap();
    for x in tr.positions.iter_mut().skip(1) {
        *x = Position::Real(x.standard() + 0.1);
    }
    assert!(equivariance_residual(&s, &v, &p, &tr, &cfg).unwrap() > 1e-2);
}

#[test]
fn reversed_velocity_is_detected() {
    let (s, v, p) = harmonic_setup();
    let times = linspace(0.0, 2.0, 21);
    let bad = DynamicsConfig { velocity_scale: -1.0, ..Default::default() };
    let ode = integrate_guidance(&s, &v, &p, 1.3, &times, None, &bad).unwrap();
    let cdf = cdf_trajectory(&s, &v, &p, 1.3, &times, None, &bad).unwrap();
    assert!(equivariance_residual(&s, &v, &p, &ode, &bad).unwrap() > 1e-3);
    assert!(max_gap(&ode, &cdf) > 1e-3);
}

#[test]
fn trajectories_never_cross() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let times = linspace(0.0, 2.0, 21);
    let cfg = DynamicsConfig::default();
    for (s, v, p) in [free_setup(), harmonic_setup()] {
        let pairs: Vec<(f64, f64)> = (0..25)
            .map(|_| {
                let a = s.parts()[0].sample_initial_position(rng.gen_range(0.02..0.98)).unwrap();
                let b = s.parts()[0].sample_initial_position(rng.gen_range(0.02..0.98)).unwrap();
                (a.min(b), a.max(b) + 1e-3)
            })
            .collect();
        let x0s: Vec<f64> = pairs.iter().flat_map(|(a, b)| [*a, *b]).collect();
        let trs = integrate_guidance_many(&s, &v, &p, &x0s, &times, None, &cfg).unwrap();
        for pair in trs.chunks(2) {
            let (lo, hi) = (pair[0].standard_positions(), pair[1].standard_positions());
            assert!(lo.iter().zip(&hi).all(|(a, b)| a < b));
        }
        for (a, b) in &pairs {
            let lo = cdf_trajectory(&s, &v, &p, *a, &times, None, &cfg).unwrap().standard_positions();
            let hi = cdf_trajectory(&s, &v, &p, *b, &times, None, &cfg).unwrap().standard_positions();
            assert!(lo.iter().zip(&hi).all(|(x, y)| x < y));
        }
    }
}

#[test]
fn many_matches_single() {
    let (s, v, p) = harmonic_setup();
    let times = linspace(0.0, 1.0, 11);
    let cfg = DynamicsConfig::default();
    let many = integrate_guidance_many(&s, &v, &p, &[0.8, 1.2], &times, None, &cfg).unwrap();
    let one = integrate_guidance(&s, &v, &p, 1.2, &times, None, &cfg).unwrap();
    assert!(max_gap(&many[1], &one) < 1e-9);
}

#[test]
fn support_is_preserved_under_reasonable_dynamics() {
    let cfg = DynamicsConfig::default();
    for (s, v, p) in [free_setup(), harmonic_setup()] {
        let tr = integrate_guidance(&s, &v, &p, 0.9, &linspace(0.0, 2.0, 21), None, &cfg).unwrap();
        let r = support_monitor(&s, &v, &p, &tr, 1e-12, &cfg).unwrap();
        assert!(r.violations.is_empty() && r.min_density > 1e-3);
    }
}

#[test]
fn tail_search_follows_a_packet_off_the_grid() {
    let g = Grid::new(-10.0, 10.0, 512).unwrap();
    let p = PhysicsParams::default();
    let s = GradedWaveFunction::standard(gaussian(g, 0.0, 1.0, 6.0).unwrap());
    let times = [0.0, 0.5, 1.0, 2.0];
    let tr = cdf_trajectory(&s, &Potential::Free, &p, 0.5, &times, None, &DynamicsConfig::default()).unwrap();
    assert!(tr.is_complete(), "{:?}", tr.status);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let z = normal.inverse_cdf(normal.cdf(0.5));
    for (t, x) in tr.times.iter().zip(tr.standard_positions()) {
        let exact = 6.0 * t + z * (1.0 + t * t / 4.0).sqrt();
        assert!((x - exact).abs() < 1e-2, "t = {t}: {x} vs {exact}");
    }
    assert!(tr.last().unwrap() > g.x_max());
}

fn closeness_psi() -> (nsbohm::wavefield::WaveFunction, PerturbationSpec) {
    let g = Grid::new(-40.0, 40.0, 4096).unwrap();
    (
        truncated_gaussian(g, 0.0, 1.0, 5.0).unwrap(),
        PerturbationSpec { grade: Exponent::from_integer(1), envelope_center: 0.0, envelope_width: 8.0 },
    )
}

#[test]
fn closeness_distances_shrink() {
    let (psi, spec) = closeness_psi();
    let times = linspace(0.0, 2.0, 11);
    let cfg = DynamicsConfig::default();
    for integrator in [Integrator::Cdf, Integrator::Guidance] {
        let r = closeness_check(&psi, &spec, &Potential::Free, &PhysicsParams::default(), 0.5, &times, &[1e-2, 1e-3, 1e-4], integrator, &cfg).unwrap();
        assert!(r.monotone_nonincreasing(), "{:?}", r.rows);
        assert!(r.smallest_eps_distance().unwrap() < 1e-3);
    }
}

#[test]
fn closeness_refuses_start_outside_support() {
    let (psi, spec) = closeness_psi();
    let r = closeness_check(&psi, &spec, &Potential::Free, &PhysicsParams::default(), 7.0, &[0.0, 1.0], &[1e-2], Integrator::Cdf, &DynamicsConfig::default());
    assert!(matches!(r, Err(Error::OutsideSupport { .. })));
}

#[test]
fn graded_mode_matches_baseline_exactly() {
    let (psi, spec) = closeness_psi();
    let pert = perturb(&psi, &PerturbationSpec { grade: Exponent::from_integer(2), ..spec }, 0.0).unwrap();
    let base = GradedWaveFunction::standard(psi);
    let times = linspace(0.0, 1.0, 11);
    let cfg = DynamicsConfig::default();
    let a = integrate_guidance(&base, &Potential::Free, &PhysicsParams::default(), 0.5, &times, None, &cfg).unwrap();
    let b = integrate_guidance(&pert.state, &Potential::Free, &PhysicsParams::default(), 0.5, &times, None, &cfg).unwrap();
    assert_eq!(b.mode, TrajectoryMode::Graded);
    assert_eq!(a.standard_positions(), b.standard_positions());
}

#[test]
fn graded_quantile_trajectory_is_near_baseline() {
    let (psi, spec) = closeness_psi();
    let pert = perturb(&psi, &spec, 0.0).unwrap();
    let base = GradedWaveFunction::standard(psi);
    let times = linspace(0.0, 1.0, 6);
    let cfg = DynamicsConfig::default();
    let p = PhysicsParams::default();
    let a = cdf_trajectory(&base, &Potential::Free, &p, 0.5, &times, None, &cfg).unwrap();
    let b = cdf_trajectory(&pert.state, &Potential::Free, &p, 0.5, &times, None, &cfg).unwrap();
    assert!(b.is_complete());
    assert!(matches!(b.positions[3], Position::Graded(_)));
    assert!(max_gap(&a, &b) < 1e-9);
}

#[test]
fn invader_moves_right_under_guidance() {
    let g = Grid::new(-100.0, 200.0, 16384).unwrap();
    let psi = bump(g, 0.0, 1.0).unwrap();
    let spec = PerturbationSpec { grade: Exponent::from_integer(1), envelope_center: 2.0, envelope_width: 20.0 };
    let pert = perturb(&psi, &spec, 0.0).unwrap();
    let times = linspace(0.0, 0.3, 31);
    let tr = integrate_guidance(&pert.state, &Potential::Free, &PhysicsParams::default(), 2.0, &times, Some(1e-3), &DynamicsConfig::default()).unwrap();
    assert!(tr.is_complete(), "{:?}", tr.status);
    let xs = tr.standard_positions();
    assert!(xs.windows(2).all(|w| w[1] > w[0]), "{xs:?}");
}
