mod common;

use common::*;
use dnls_core::disorder::DisorderRealization;
use dnls_core::field::{eval_F, CoeffField};
use dnls_core::lattice::Dims;
use dnls_core::solver::*;
use proptest::prelude::*;

fn desk_potential(seed: u64) -> DisorderRealization {
    potential(1, 20, seed)
}

#[test]
fn unperturbed_converges_at_stage_zero() {
    let pot = desk_potential(3);
    let cfg = SolverConfig::desk(0.0, 0.0);
    let out = solve(&cfg, &pot).unwrap();
    assert_eq!(out.status, SolveStatus::Converged);
    assert_eq!(out.table.len(), 1);
    assert_eq!(out.state.kappa, 0.0);
    assert_eq!(out.state.omega, vec![pot.at(&[0])]);
    let d = out.diagnostics.unwrap();
    assert!(d.omega_ok && d.weighted_ok);
    assert_eq!(d.weighted_sum, 0.0);
}

#[test]
fn single_site_breather_is_exact() {
    let pot = desk_potential(4);
    for delta in [1e-3, 1e-2, 0.1] {
        let cfg = SolverConfig::desk(0.0, delta);
        let out = solve(&cfg, &pot).unwrap();
        assert_eq!(out.status, SolveStatus::Converged);
        assert_eq!(out.table.len(), 1);
        let want = pot.at(&[0]) + delta * 0.1 * 0.1;
        assert!((out.state.omega[0] - want).abs() < 1e-15);
        assert!(out.state.kappa < 1e-15);
    }
}

#[test]
fn scalar_newton_doubles_digits() {
    let xs = newton_scalar(|x| x * x - 2.0, |x| 2.0 * x, 1.0, 4);
    let digits: Vec<f64> = xs
        .iter()
        .map(|x| -(x - 2f64.sqrt()).abs().log10())
        .collect();
    // 1 → 1.5 → 1.41667 → 1.4142157 → 1.41421356237469
    for w in digits[1..].windows(2) {
        let ratio = w[1] / w[0];
        assert!(ratio > 1.8 && ratio < 2.6, "{digits:?}");
    }
}

#[test]
fn q_update_matches_residual_oracle() {
    for (dims, p) in [(Dims { d: 1, nu: 1 }, 1), (Dims { d: 1, nu: 2 }, 1), (Dims { d: 2, nu: 1 }, 2)] {
        let pot = potential(dims.d, 6, 11);
        let y = random_field(dims, p, 2, 2, 0.05, true, 5);
        let (eps, delta) = (0.03, 0.02);
        let zero = vec![0.0; dims.nu];
        let f0 = eval_F(&y, &zero, eps, delta, &pot).unwrap();
        let omega = q_update(&y, eps, delta, &pot).unwrap();
        let s = y.pinning.s_points(dims);
        for (k, sk) in s.iter().enumerate() {
            let want = f0.u.get(sk) / y.pinning.amplitudes[k];
            assert!((omega[k] - want).abs() <= 1e-14 * want.abs().max(1.0));
        }
        let f = eval_F(&y, &omega, eps, delta, &pot).unwrap();
        for sk in &s {
            assert!(f.u.get(sk).abs() < 1e-15);
        }
    }
}

#[test]
fn q_update_rejects_zero_amplitude() {
    let pot = desk_potential(1);
    let mut y = random_field(Dims { d: 1, nu: 1 }, 1, 2, 2, 0.05, true, 1);
    y.pinning.amplitudes[0] = 0.0;
    assert_eq!(q_update(&y, 0.1, 0.1, &pot), Err(SolverError::ZeroAmplitude(0)));
}

#[test]
fn invalid_configs_rejected() {
    let pot = desk_potential(1);
    let mut cfg = SolverConfig::desk(1e-3, 1e-3);
    cfg.m = 2;
    assert!(matches!(solve(&cfg, &pot), Err(SolverError::InvalidConfig { key: "M", .. })));
    let mut cfg = SolverConfig::desk(1e-3, 1e-3);
    cfg.amplitudes = vec![1.2];
    assert!(matches!(solve(&cfg, &pot), Err(SolverError::InvalidConfig { key: "amplitudes", .. })));
    let mut cfg = SolverConfig::desk(1e-3, 1e-3);
    cfg.eps = -1.0;
    assert!(solve(&cfg, &pot).is_err());
}

fn check_converged(out: &SolveOutcome, growing_only: bool) {
    assert_eq!(out.status, SolveStatus::Converged, "{}", out.stage_table());
    assert!(out.table.len() <= 9);
    assert!(out.state.kappa <= 1e-11);
    let d = out.diagnostics.as_ref().unwrap();
    assert_eq!(d.pinning_error, 0.0);
    assert!(d.symmetry_error <= 1e-13, "{}", d.symmetry_error);
    assert!(d.omega_ok);
    for w in out.table.windows(2) {
        let grew = w[1].radius > w[0].radius;
        if w[0].kappa <= 1e-3 && w[1].kappa > 1e-14 && (grew || !growing_only) {
            assert!(w[1].kappa <= w[0].kappa.powf(1.3), "{}", out.stage_table());
        }
    }
}

#[test]
fn desk_instance_converges() {
    let pot = desk_potential(1);
    let cfg = SolverConfig::desk(1e-3, 1e-3);
    let out = solve(&cfg, &pot).unwrap();
    check_converged(&out, false);
    let d = out.diagnostics.unwrap();
    assert!(d.alpha_final > 1.0);
    assert!(d.decay_stable);
}

#[test]
fn two_frequency_instance_converges() {
    let pot = potential(1, 12, 2);
    let mut cfg = SolverConfig::desk(1e-4, 1e-4);
    cfg.dims = Dims { d: 1, nu: 2 };
    cfg.amplitudes = vec![0.1, 0.08];
    cfg.resonant = vec![vec![0], vec![2]];
    // Capped box: the last stage sits on the truncation floor.
    cfg.max_radius = Some(4);
    let out = solve(&cfg, &pot).unwrap();
    check_converged(&out, true);
}

#[test]
fn delta_zero_frequency_shift_is_linear_in_eps() {
    let pot = desk_potential(7);
    for eps in [1e-4, 1e-3, 1e-2] {
        let mut cfg = SolverConfig::desk(eps, 0.0);
        cfg.max_radius = Some(8);
        let out = solve(&cfg, &pot).unwrap();
        assert_eq!(out.status, SolveStatus::Converged);
        let shift = (out.state.omega[0] - out.vcal[0]).abs();
        assert!(shift <= 10.0 * eps, "eps {eps}: shift {shift}");
    }
}

#[test]
fn warm_start_reproduces_cold_solution() {
    let pot = desk_potential(1);
    let mut cfg = SolverConfig::desk(1e-3, 1e-3);
    cfg.max_radius = Some(8);
    let cold = solve(&cfg, &pot).unwrap();
    let warm = solve_from(&cfg, &pot, Some(&cold.state.y)).unwrap();
    assert_eq!(warm.status, SolveStatus::Converged);
    assert!(warm.table.len() <= 2);
    assert!((warm.state.omega[0] - cold.state.omega[0]).abs() < 1e-12);
}

#[test]
fn constructed_resonance_is_flagged() {
    let pot = desk_potential(5);
    let mut cfg = SolverConfig::desk(1e-3, 1e-3);
    cfg.max_radius = Some(4);
    cfg.condition_cap = 1e4;
    let target = pot.at(&[2]);
    // Sweep the resonant site value through v_2.
    let grid: Vec<Vec<f64>> = (-20..=20).map(|i| vec![target + i as f64 * 1e-5]).collect();
    let pts = continuation_sweep(&cfg, &pot, &grid, false).unwrap();
    let flagged: Vec<f64> = pts
        .iter()
        .filter(|p| matches!(p.status, SolveStatus::Resonant { .. }))
        .map(|p| p.vcal[0])
        .collect();
    assert!(!flagged.is_empty());
    assert!(flagged.iter().all(|v| (v - target).abs() < 2e-4), "{flagged:?}");
    let far = continuation_sweep(&cfg, &pot, &[vec![target + 0.2]], false).unwrap();
    assert_ne!(far[0].status.name(), "Resonant");
}

fn small_cfg(eps: f64, delta: f64) -> SolverConfig {
    let mut cfg = SolverConfig::desk(eps, delta);
    cfg.max_radius = Some(4);
    cfg.max_stage = 4;
    cfg
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn stages_keep_pinning_and_symmetry(seed in 0u64..1000, eps in 0.0f64..3e-3, delta in 0.0f64..3e-3) {
        let pot = potential(1, 8, seed);
        let cfg = small_cfg(eps, delta);
        let mut state = initial_state(&cfg, &pot).unwrap();
        for i in 1..=3 {
            match newton_step(&state, &pot, &cfg, cfg.stage_radius(i)) {
                Ok(next) => state = next,
                Err(_) => break,
            }
            prop_assert_eq!(state.y.pinning_error(), 0.0);
            prop_assert!(state.y.conjugate_symmetry_error() <= 1e-13);
        }
    }

    #[test]
    fn solve_is_deterministic(seed in 0u64..1000) {
        let pot = potential(1, 8, seed);
        let cfg = small_cfg(1e-3, 1e-3);
        let a = solve(&cfg, &pot).unwrap();
        let b = solve(&cfg, &pot).unwrap();
        prop_assert_eq!(a.state.omega, b.state.omega);
        prop_assert_eq!(a.state.y, b.state.y);
    }
}

#[test]
fn field_is_exposed_on_final_box() {
    let pot = desk_potential(1);
    let cfg = small_cfg(1e-3, 1e-3);
    let out = solve(&cfg, &pot).unwrap();
    let y: &CoeffField = &out.state.y;
    assert_eq!(y.bx().max_radius(), 4);
    assert!(out.stage_table().starts_with("stage,N,kappa"));
}
