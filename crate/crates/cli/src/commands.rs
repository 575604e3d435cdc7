//! One function per subcommand. Each validates its blocks, computes, and
//! hands files and summary values to `Outputs`.

use std::fmt::Write as _;

use dnls_core::disorder::{derive_seed, DisorderRealization};
use dnls_core::evolve::{
    compare_quasiperiodic, integrate, localization_profile, required_radius, EvolutionConfig, EvolutionReport,
    EvolveError,
};
use dnls_core::lattice::{ElementaryRegion, LatticeBox};
use dnls_core::linop::{
    assemble_T, factor, invert_covering, m0_schedule, schur_reduce_rows, CoveringPlan, LinopError,
};
use dnls_core::measure::{check_diophantine, default_half_width, fit_sigma, theta_scan, DiophantineParams, MeasureError, ScanParams, ThetaGrid};
use dnls_core::solver::{continuation_sweep, solve, SolveOutcome, SolveStatus, SolverConfig, SolverError};
use dnls_core::spectral::{check_regular, eig_region, green_rate, wegner_stat, SpectralError};
use nalgebra::DMatrix;

use crate::config::ExperimentConfig;
use crate::output::{csv_with_meta, float, floats, Outputs};
use crate::RunError;

fn config_err(key: &str, msg: impl Into<String>) -> RunError {
    RunError::Config { key: key.to_string(), msg: msg.into() }
}

fn numerical(kind: &str, detail: impl Into<String>) -> RunError {
    RunError::Numerical { kind: kind.into(), detail: detail.into(), stage: None, condition: None }
}

fn solver_err(e: SolverError) -> RunError {
    match e {
        SolverError::InvalidConfig { key, msg } => config_err(&crate::config::solver_key(key), msg),
        SolverError::ZeroAmplitude(_) => config_err("solver.amplitudes", e.to_string()),
        SolverError::Linop(LinopError::PotentialTooSmall(_)) => config_err("disorder.radius", e.to_string()),
        other => numerical("Singular", other.to_string()),
    }
}

fn linop_err(e: LinopError) -> RunError {
    match e {
        LinopError::PotentialTooSmall(_) => config_err("disorder.radius", e.to_string()),
        LinopError::TooLarge { .. } => config_err("solver.dense_cap", e.to_string()),
        other => numerical("Singular", other.to_string()),
    }
}

fn measure_err(e: MeasureError) -> RunError {
    match e {
        MeasureError::Invalid { key, msg } => config_err(&format!("measure.{key}"), msg),
        MeasureError::Linop(l) => linop_err(l),
        other => numerical("Singular", other.to_string()),
    }
}

fn spectral_err(block: &str, e: SpectralError) -> RunError {
    match e {
        SpectralError::TooLarge { .. } => config_err(&format!("{block}.radius"), e.to_string()),
        SpectralError::TooFewTrials(_) => config_err(&format!("{block}.trials"), e.to_string()),
        SpectralError::NotResolvent { .. } => numerical("Singular", e.to_string()),
        other => config_err(block, other.to_string()),
    }
}

fn evolve_err(e: EvolveError) -> RunError {
    match e {
        EvolveError::Unstable { .. } => numerical("Unstable", e.to_string()),
        EvolveError::BoxTooSmall { .. } => config_err("evolve.radius", e.to_string()),
        EvolveError::Disorder(_) => config_err("disorder.radius", e.to_string()),
        other => config_err("evolve", other.to_string()),
    }
}

/// Disorder on the cube of radius `radius` in dimension `d`, with overrides.
pub fn potential(cfg: &ExperimentConfig, d: usize, radius: u32) -> Result<DisorderRealization, RunError> {
    let mut pot = DisorderRealization::sample(
        cfg.distribution()?,
        LatticeBox::centered_cube(d, radius),
        derive_seed(cfg.seed, "disorder"),
    );
    for o in &cfg.disorder.overrides {
        pot.set_override(&o.site, o.value)
            .map_err(|e| config_err("disorder.override", e.to_string()))?;
    }
    Ok(pot)
}

fn meta(cfg: &ExperimentConfig, command: &str) -> Vec<(&'static str, String)> {
    vec![("command", command.to_string()), ("seed", cfg.seed.to_string())]
}

fn solver_meta(cfg: &ExperimentConfig, command: &str) -> Vec<(&'static str, String)> {
    let mut m = meta(cfg, command);
    m.push(("eps", format!("{:e}", cfg.solver.eps)));
    m.push(("delta", format!("{:e}", cfg.solver.delta)));
    m
}

fn status_failure(status: &SolveStatus) -> Option<RunError> {
    match status {
        SolveStatus::Converged => None,
        SolveStatus::Resonant { stage, condition, detail } => Some(RunError::Numerical {
            kind: "Resonant".into(),
            detail: detail.clone(),
            stage: Some(*stage),
            condition: Some(*condition),
        }),
        other => Some(numerical(other.name(), format!("solver stopped with status {}", other.name()))),
    }
}

fn record_solution(out: &mut Outputs, cfg: &ExperimentConfig, command: &str, res: &SolveOutcome) -> Result<(), RunError> {
    let mut m = solver_meta(cfg, command);
    m.push(("status", res.status.name().to_string()));
    out.write("stages.csv", &csv_with_meta(&m, &res.stage_table()))?;
    out.write("coefficients.txt", &res.state.y.dump())?;
    out.note("solve_status", res.status.name());
    out.note("stages", res.state.stage as i64);
    out.note("kappa", float(res.state.kappa));
    out.note("omega", floats(&res.state.omega));
    out.note("vcal", floats(&res.vcal));
    if let Some(d) = &res.diagnostics {
        out.note("alpha_final", float(d.alpha_final));
        out.note("alpha_stage1", float(d.alpha_stage1));
        out.note("decay_stable", d.decay_stable);
        out.note("weighted_sum", float(d.weighted_sum));
        out.note("weighted_ok", d.weighted_ok);
        out.note("omega_error", float(d.omega_error));
        out.note("omega_ok", d.omega_ok);
        out.note("pinning_error", float(d.pinning_error));
        out.note("symmetry_error", float(d.symmetry_error));
    }
    Ok(())
}

fn solved(cfg: &ExperimentConfig, scfg: &SolverConfig, out: &mut Outputs, op: &str) -> Result<SolveOutcome, RunError> {
    let pot = potential(cfg, scfg.dims.d, cfg.disorder.radius)?;
    let res = out.timed(op, || solve(scfg, &pot)).map_err(solver_err)?;
    match status_failure(&res.status) {
        Some(e) => Err(e),
        None => Ok(res),
    }
}

/// Solution used only as the point operators are linearized at. A capped box
/// may stall on its truncation floor; only a resonance is fatal.
fn linearization_point(
    scfg: &SolverConfig,
    pot: &DisorderRealization,
    out: &mut Outputs,
    op: &str,
) -> Result<SolveOutcome, RunError> {
    let res = out.timed(op, || solve(scfg, pot)).map_err(solver_err)?;
    if matches!(res.status, SolveStatus::Resonant { .. }) {
        return Err(status_failure(&res.status).unwrap());
    }
    Ok(res)
}

pub fn solve_cmd(cfg: &ExperimentConfig, out: &mut Outputs) -> Result<(), RunError> {
    let scfg = cfg.solver_config()?;
    let pot = potential(cfg, scfg.dims.d, cfg.disorder.radius)?;
    let res = out.timed("solve", || solve(&scfg, &pot)).map_err(solver_err)?;
    out.write("potential.txt", &pot.to_table())?;
    record_solution(out, cfg, "solve", &res)?;
    status_failure(&res.status).map_or(Ok(()), Err)
}

pub fn sweep_cmd(cfg: &ExperimentConfig, out: &mut Outputs) -> Result<(), RunError> {
    let scfg = cfg.solver_config()?;
    cfg.validate_sweep()?;
    let pot = potential(cfg, scfg.dims.d, cfg.disorder.radius)?;
    let s = &cfg.sweep;
    let rest: Vec<f64> = scfg.resonant.iter().skip(1).map(|j| pot.at(j)).collect();
    let grid: Vec<Vec<f64>> = (0..s.count)
        .map(|i| {
            let x = if s.count == 1 { s.lo } else { s.lo + (s.hi - s.lo) * i as f64 / (s.count - 1) as f64 };
            std::iter::once(x).chain(rest.iter().copied()).collect()
        })
        .collect();
    let pts = out
        .timed("sweep", || continuation_sweep(&scfg, &pot, &grid, s.warm_start))
        .map_err(solver_err)?;
    let mut body = String::from("vcal,status,omega\n");
    let mut resonant = 0i64;
    for p in &pts {
        if matches!(p.status, SolveStatus::Resonant { .. }) {
            resonant += 1;
        }
        let join = |v: &[f64]| v.iter().map(|x| format!("{x:e}")).collect::<Vec<_>>().join(";");
        writeln!(body, "{},{},{}", join(&p.vcal), p.status.name(), join(&p.omega)).unwrap();
    }
    let mut m = solver_meta(cfg, "sweep");
    m.push(("warm_start", s.warm_start.to_string()));
    out.write("sweep.csv", &csv_with_meta(&m, &body))?;
    out.note("points", pts.len() as i64);
    out.note("resonant_points", resonant);
    Ok(())
}

pub fn spectral_cmd(cfg: &ExperimentConfig, out: &mut Outputs) -> Result<(), RunError> {
    cfg.validate_spectral()?;
    let s = &cfg.spectral;
    let pot = potential(cfg, s.d, s.radius)?;
    let region = ElementaryRegion::from_box(LatticeBox::centered_cube(s.d, s.radius));
    let eig = out.timed("eigen", || eig_region(s.eps, &pot, &region)).map_err(|e| spectral_err("spectral", e))?;
    let mut body = String::from("index,value,center\n");
    for (i, v) in eig.values.iter().enumerate() {
        let c: Vec<String> = eig.centers[i].iter().map(|x| x.to_string()).collect();
        writeln!(body, "{i},{v:e},{}", c.join(";")).unwrap();
    }
    let mut m = meta(cfg, "spectral");
    m.push(("eps", format!("{:e}", s.eps)));
    out.write("eigen.csv", &csv_with_meta(&m, &body))?;
    let rates = eig.decay_rates(s.margin, 1e-13);
    let mut body = String::from("vector,rate\n");
    for (i, r) in rates.iter().enumerate() {
        writeln!(body, "{i},{r:e}").unwrap();
    }
    out.write("decay.csv", &csv_with_meta(&m, &body))?;

    let rate_m = s.m.unwrap_or_else(|| 0.5 * (1.0 / s.eps.max(f64::MIN_POSITIVE)).ln());
    let reg = out
        .timed("regularity", || check_regular(s.eps, &pot, &region, s.energy, rate_m))
        .map_err(|e| spectral_err("spectral", e))?;
    let gr = green_rate(s.eps, &pot, &region, s.energy).map_err(|e| spectral_err("spectral", e))?;
    out.note("sites", eig.values.len() as i64);
    out.note("regular", reg.regular);
    out.note("regularity_rate", float(rate_m));
    out.note("green_rate", float(gr));
    if !rates.is_empty() {
        let mut sorted = rates.clone();
        sorted.sort_by(f64::total_cmp);
        out.note("median_decay_rate", float(sorted[sorted.len() / 2]));
    }
    Ok(())
}

pub fn wegner_cmd(cfg: &ExperimentConfig, out: &mut Outputs) -> Result<(), RunError> {
    cfg.validate_wegner()?;
    let w = &cfg.wegner;
    let region = ElementaryRegion::from_box(LatticeBox::centered_cube(w.d, w.radius));
    let dist = cfg.distribution()?;
    let stats = out
        .timed("wegner", || {
            wegner_stat(w.eps, &dist, &region, w.energy, &w.kappas, w.trials, derive_seed(cfg.seed, "wegner"))
        })
        .map_err(|e| spectral_err("wegner", e))?;
    let mut body = String::from("kappa,count,prob,sigma\n");
    for i in 0..stats.kappas.len() {
        writeln!(body, "{:e},{},{:e},{:e}", stats.kappas[i], stats.counts[i], stats.probs[i], stats.sigma(i)).unwrap();
    }
    let mut m = meta(cfg, "wegner");
    m.push(("sites", region.cardinality().to_string()));
    m.push(("trials", w.trials.to_string()));
    out.write("wegner.csv", &csv_with_meta(&m, &body))?;
    out.note("slope", float(stats.slope));
    out.note("bound_slope", float(stats.bound_slope));
    Ok(())
}

pub fn theta_scan_cmd(cfg: &ExperimentConfig, out: &mut Outputs) -> Result<(), RunError> {
    let scfg = cfg.solver_config()?;
    cfg.validate_measure()?;
    let mb = &cfg.measure;
    let pot = potential(cfg, scfg.dims.d, cfg.disorder.radius)?;
    let mut measures = Vec::new();
    let mut body = String::from("N,measure,bad_runs,grid_points,solve_status,kappa\n");
    for &n in &mb.scales {
        let mut c = scfg.clone();
        c.max_radius = Some((n / 4).max(1));
        let res = linearization_point(&c, &pot, out, &format!("solve N={n}"))?;
        let (y, omega) = (&res.state.y, &res.state.omega);
        let hw = match mb.half_width {
            Some(h) => h,
            None => default_half_width(y, omega, c.eps, c.delta, &pot, n).map_err(measure_err)?,
        };
        let params = ScanParams {
            n,
            beta: mb.beta,
            gamma: mb.gamma,
            grid: Some(ThetaGrid { half_width: hw, step: mb.step }),
            norm_cap: mb.norm_cap,
            dense_cap: c.dense_cap,
        };
        let scan = out
            .timed(&format!("scan N={n}"), || theta_scan(y, omega, c.eps, c.delta, &pot, &params))
            .map_err(measure_err)?;
        let mut m = solver_meta(cfg, "theta-scan");
        m.push(("N", n.to_string()));
        m.push(("beta", mb.beta.to_string()));
        m.push(("gamma", mb.gamma.to_string()));
        m.push(("norm_cap", format!("{:e}", params.cap())));
        out.write(&format!("theta_scan_N{n}.csv"), &csv_with_meta(&m, &scan.table()))?;
        writeln!(
            body,
            "{n},{:e},{},{},{},{:e}",
            scan.measure_estimate,
            scan.bad_runs(),
            scan.thetas.len(),
            res.status.name(),
            res.state.kappa
        )
        .unwrap();
        measures.push(scan.measure_estimate);
    }
    let fit = fit_sigma(&mb.scales, &measures);
    let mut m = solver_meta(cfg, "theta-scan");
    if let Some((sigma, ln_c)) = fit {
        m.push(("sigma", format!("{sigma}")));
        m.push(("ln_prefactor", format!("{ln_c}")));
        out.note("sigma", float(sigma));
    }
    out.write("measures.csv", &csv_with_meta(&m, &body))?;
    out.note("measures", floats(&measures));
    out.note("non_increasing", measures.windows(2).all(|w| w[1] <= w[0]));
    Ok(())
}

pub fn dioph_cmd(cfg: &ExperimentConfig, out: &mut Outputs) -> Result<(), RunError> {
    cfg.validate_dioph()?;
    let d = &cfg.dioph;
    let omega = match &d.omega {
        Some(o) => o.clone(),
        None => {
            let scfg = cfg.solver_config()?;
            solved(cfg, &scfg, out, "solve")?.state.omega
        }
    };
    let params = DiophantineParams { a: d.exponent, c: d.c, n: d.n };
    let check = out
        .timed("dioph", || check_diophantine(&omega, &params))
        .map_err(|e| match e {
            MeasureError::Invalid { key: "A", msg } => config_err("dioph.exponent", msg),
            MeasureError::Invalid { key, msg } => config_err(&format!("dioph.{key}"), msg),
            other => config_err("dioph", other.to_string()),
        })?;
    let mut body = String::from("omega,ok,worst_n,distance,bound\n");
    let om: Vec<String> = omega.iter().map(|x| format!("{x:e}")).collect();
    match &check.worst {
        Some((n, dist, bound)) => {
            let ns: Vec<String> = n.iter().map(|x| x.to_string()).collect();
            writeln!(body, "{},{},{},{dist:e},{bound:e}", om.join(";"), check.ok, ns.join(";")).unwrap();
        }
        None => writeln!(body, "{},{},,,", om.join(";"), check.ok).unwrap(),
    }
    let mut m = meta(cfg, "dioph");
    m.push(("exponent", d.exponent.to_string()));
    m.push(("c", format!("{:e}", d.c)));
    m.push(("N", d.n.to_string()));
    out.write("dioph.csv", &csv_with_meta(&m, &body))?;
    out.note("diophantine", check.ok);
    Ok(())
}

fn evolution_config(cfg: &ExperimentConfig, radius: u32) -> Result<EvolutionConfig, RunError> {
    let e = &cfg.evolve;
    let s = &cfg.solver;
    let mut ec = EvolutionConfig::new(LatticeBox::centered_cube(s.d, radius), s.eps, s.delta, s.p, e.t_end, e.dt);
    ec.integrator = cfg.integrator()?;
    ec.samples = e.samples;
    ec.checkpoints = e.checkpoints;
    if radius > cfg.disorder.radius {
        return Err(config_err("evolve.radius", format!("box radius {radius} exceeds disorder.radius")));
    }
    Ok(ec)
}

fn record_evolution(out: &mut Outputs, cfg: &ExperimentConfig, command: &str, rep: &EvolutionReport) -> Result<(), RunError> {
    let mut m = solver_meta(cfg, command);
    m.push(("dt", format!("{:e}", cfg.evolve.dt)));
    m.push(("integrator", cfg.evolve.integrator.clone()));
    out.write("evolution.csv", &csv_with_meta(&m, &rep.summary_table()))?;
    let mut body = String::from("R,max_tail_mass\n");
    for (r, mass) in localization_profile(rep, &cfg.evolve.profile_radii) {
        writeln!(body, "{r},{mass:e}").unwrap();
    }
    out.write("profile.csv", &csv_with_meta(&m, &body))?;
    out.note("norm_drift", float(rep.norm_drift));
    out.note("energy_drift", float(rep.energy_drift));
    Ok(())
}

pub fn evolve_cmd(cfg: &ExperimentConfig, out: &mut Outputs) -> Result<(), RunError> {
    cfg.validate_evolve()?;
    let radius = cfg.evolve.radius.unwrap_or(20);
    let ec = evolution_config(cfg, radius)?;
    let pot = potential(cfg, cfg.solver.d, cfg.disorder.radius)?;
    let site = &cfg.evolve.site;
    let idx = ec
        .bx
        .index_of(site)
        .ok_or_else(|| config_err("evolve.site", "site lies outside the evolution box"))?;
    let mut u0 = vec![num_complex::Complex64::new(0.0, 0.0); ec.bx.cardinality()];
    u0[idx] = num_complex::Complex64::new(cfg.evolve.amplitude, 0.0);
    let rep = out.timed("evolve", || integrate(&u0, &pot, &ec)).map_err(evolve_err)?;
    record_evolution(out, cfg, "evolve", &rep)
}

pub fn compare_cmd(cfg: &ExperimentConfig, out: &mut Outputs) -> Result<(), RunError> {
    let scfg = cfg.solver_config()?;
    cfg.validate_evolve()?;
    let res = solved(cfg, &scfg, out, "solve")?;
    record_solution(out, cfg, "compare", &res)?;
    let alpha = res.diagnostics.as_ref().map_or(f64::INFINITY, |d| d.alpha_final);
    let radius = cfg.evolve.radius.unwrap_or_else(|| required_radius(&res.state.y, alpha));
    let ec = evolution_config(cfg, radius)?;
    let pot = potential(cfg, scfg.dims.d, cfg.disorder.radius)?;
    let (err, rep) = out
        .timed("compare", || compare_quasiperiodic(&res.state.y, &res.state.omega, alpha, &pot, &ec))
        .map_err(evolve_err)?;
    record_evolution(out, cfg, "compare", &rep)?;
    out.note("box_radius", radius as i64);
    out.note("max_error", float(err));
    Ok(())
}

fn rel_err(x: &DMatrix<f64>, reference: &DMatrix<f64>) -> f64 {
    let scale = reference.amax();
    let diff = (x - reference).amax();
    if scale == 0.0 { diff } else { diff / scale }
}

pub fn bench_cmd(cfg: &ExperimentConfig, out: &mut Outputs) -> Result<(), RunError> {
    let mut scfg = cfg.solver_config()?;
    cfg.validate_bench()?;
    let b = &cfg.bench;
    scfg.max_radius = Some(b.solve_radius);
    let pot = potential(cfg, scfg.dims.d, cfg.disorder.radius)?;
    let res = linearization_point(&scfg, &pot, out, "solve")?;
    out.note("solve_status", res.status.name());
    let (y, omega) = (&res.state.y, &res.state.omega);
    let total = scfg.dims.total();
    let mut body = String::from("N,rows,strategy,seconds,rel_err,flag\n");
    for &n in &b.sizes {
        let region = ElementaryRegion::from_box(LatticeBox::centered_cube(total, n));
        let t = assemble_T(y, omega, 0.0, scfg.eps, scfg.delta, &pot, &region).map_err(linop_err)?;
        let rows = t.op.dim();
        let clock = std::time::Instant::now();
        let dense = factor(&t.op).map_err(linop_err)?.to_dense();
        writeln!(body, "{n},{rows},dense,{:e},0,", clock.elapsed().as_secs_f64()).unwrap();

        let m0 = m0_schedule(n, scfg.patch_exponent);
        let plan = CoveringPlan { inner: LatticeBox::centered_cube(total, n / 2), m0, patch_radius: m0 };
        let clock = std::time::Instant::now();
        match invert_covering(&t.op, &plan) {
            Ok((cov, _)) => {
                let x = cov.to_dense();
                let secs = clock.elapsed().as_secs_f64();
                writeln!(body, "{n},{rows},covering,{secs:e},{:e},", rel_err(&x, &dense)).unwrap();
            }
            Err(e @ (LinopError::NoContraction { .. } | LinopError::PatchMissing(_))) => {
                let flag = if matches!(e, LinopError::NoContraction { .. }) { "NoContraction" } else { "PatchMissing" };
                writeln!(body, "{n},{rows},covering,{:e},,{flag}", clock.elapsed().as_secs_f64()).unwrap();
            }
            Err(e) => return Err(linop_err(e)),
        }

        // Eliminate the rows with the smallest diagonal.
        let mut order: Vec<usize> = (0..rows).collect();
        order.sort_by(|&i, &j| t.op.get(i, i).abs().total_cmp(&t.op.get(j, j).abs()).then(i.cmp(&j)));
        let k = ((rows as f64) * b.schur_fraction).round() as usize;
        let bad: Vec<usize> = order[..k.min(rows)].to_vec();
        let clock = std::time::Instant::now();
        let s = schur_reduce_rows(&t.op, &bad).map_err(linop_err)?;
        let x = s.reconstruct_inverse().map_err(linop_err)?;
        writeln!(body, "{n},{rows},schur,{:e},{:e},", clock.elapsed().as_secs_f64(), rel_err(&x, &dense)).unwrap();
    }
    out.write("bench.csv", &csv_with_meta(&solver_meta(cfg, "bench"), &body))?;
    Ok(())
}
