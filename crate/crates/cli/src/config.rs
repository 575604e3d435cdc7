//! Experiment configuration: a TOML file with one table per module.

use std::path::PathBuf;

use dnls_core::disorder::Distribution;
use dnls_core::evolve::Integrator;
use dnls_core::lattice::Dims;
use dnls_core::solver::SolverConfig;
use serde::{Deserialize, Serialize};

use crate::RunError;

fn bad(key: &str, msg: impl Into<String>) -> RunError {
    RunError::Config { key: key.to_string(), msg: msg.into() }
}

#[derive(Clone, Debug, Default, Deserialize, Serialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out: Option<PathBuf>,
    /// 0 lets rayon decide.
    pub threads: usize,
    pub disorder: DisorderBlock,
    pub solver: SolverBlock,
    pub sweep: SweepBlock,
    pub spectral: SpectralBlock,
    pub wegner: WegnerBlock,
    pub measure: MeasureBlock,
    pub dioph: DiophBlock,
    pub evolve: EvolveBlock,
    pub bench: BenchBlock,
}

#[derive(Clone, Debug, Deserialize, Serialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SiteOverride {
    pub site: Vec<i32>,
    pub value: f64,
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(default, deny_unknown_fields)]
pub struct DisorderBlock {
    pub lo: f64,
    pub hi: f64,
    /// Radius of the sampled cube.
    pub radius: u32,
    #[serde(rename = "override")]
    pub overrides: Vec<SiteOverride>,
}

impl Default for DisorderBlock {
    fn default() -> Self {
        DisorderBlock { lo: 0.0, hi: 1.0, radius: 24, overrides: Vec::new() }
    }
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverBlock {
    pub eps: f64,
    pub delta: f64,
    pub d: usize,
    pub nu: usize,
    pub p: u32,
    pub m: u32,
    pub max_stage: u32,
    pub amplitudes: Vec<f64>,
    pub resonant: Vec<Vec<i32>>,
    pub residual_target: f64,
    pub condition_cap: f64,
    pub dense_cap: usize,
    pub max_radius: Option<u32>,
    pub patch_exponent: f64,
    pub freq_constant: f64,
}

impl Default for SolverBlock {
    fn default() -> Self {
        let c = SolverConfig::desk(1e-3, 1e-3);
        SolverBlock {
            eps: c.eps,
            delta: c.delta,
            d: c.dims.d,
            nu: c.dims.nu,
            p: c.p,
            m: c.m,
            max_stage: c.max_stage,
            amplitudes: c.amplitudes,
            resonant: c.resonant,
            residual_target: c.residual_target,
            condition_cap: c.condition_cap,
            dense_cap: c.dense_cap,
            max_radius: c.max_radius,
            patch_exponent: c.patch_exponent,
            freq_constant: c.freq_constant,
        }
    }
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepBlock {
    /// Range of the first resonant site value.
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    pub warm_start: bool,
}

impl Default for SweepBlock {
    fn default() -> Self {
        SweepBlock { lo: 0.0, hi: 1.0, count: 21, warm_start: false }
    }
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpectralBlock {
    pub eps: f64,
    pub d: usize,
    pub radius: u32,
    pub energy: f64,
    /// Regularity rate; default ½ ln(1/ε).
    pub m: Option<f64>,
    pub margin: u32,
}

impl Default for SpectralBlock {
    fn default() -> Self {
        SpectralBlock { eps: 1e-3, d: 1, radius: 10, energy: 0.5, m: None, margin: 5 }
    }
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(default, deny_unknown_fields)]
pub struct WegnerBlock {
    pub eps: f64,
    pub d: usize,
    pub radius: u32,
    pub energy: f64,
    pub kappas: Vec<f64>,
    pub trials: usize,
}

impl Default for WegnerBlock {
    fn default() -> Self {
        WegnerBlock {
            eps: 1e-3,
            d: 1,
            radius: 2,
            energy: 0.5,
            kappas: vec![5e-4, 1e-3, 2e-3, 4e-3],
            trials: 10_000,
        }
    }
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(default, deny_unknown_fields)]
pub struct MeasureBlock {
    pub scales: Vec<u32>,
    pub beta: f64,
    pub gamma: f64,
    pub step: f64,
    pub half_width: Option<f64>,
    pub norm_cap: Option<f64>,
}

impl Default for MeasureBlock {
    fn default() -> Self {
        MeasureBlock {
            scales: vec![4, 8],
            beta: 0.8,
            gamma: 0.5,
            step: 4e-3,
            half_width: None,
            norm_cap: None,
        }
    }
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiophBlock {
    /// Frequencies to test; the solver's ω when absent.
    pub omega: Option<Vec<f64>>,
    pub exponent: f64,
    pub c: f64,
    pub n: u32,
}

impl Default for DiophBlock {
    fn default() -> Self {
        DiophBlock { omega: None, exponent: 2.0, c: 1e-3, n: 50 }
    }
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvolveBlock {
    /// Box radius; for `compare` the smallest admissible radius when absent.
    pub radius: Option<u32>,
    pub t_end: f64,
    pub dt: f64,
    pub integrator: String,
    pub samples: usize,
    pub checkpoints: usize,
    /// Initial state a·δ_site for `evolve`.
    pub site: Vec<i32>,
    pub amplitude: f64,
    pub profile_radii: Vec<u32>,
}

impl Default for EvolveBlock {
    fn default() -> Self {
        EvolveBlock {
            radius: None,
            t_end: 1e4,
            dt: 1e-2,
            integrator: "split".into(),
            samples: 200,
            checkpoints: 10,
            site: vec![0],
            amplitude: 0.1,
            profile_radii: vec![0, 1, 2, 4, 8],
        }
    }
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchBlock {
    pub sizes: Vec<u32>,
    /// Box radius of the solution the operators are linearized at.
    pub solve_radius: u32,
    /// Fraction of sites eliminated in the Schur strategy.
    pub schur_fraction: f64,
}

impl Default for BenchBlock {
    fn default() -> Self {
        BenchBlock { sizes: vec![2, 4, 6, 8], solve_radius: 4, schur_fraction: 0.1 }
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, RunError> {
        toml::from_str(text).map_err(|e| {
            let msg = e.message().to_string();
            let key = offending_key(text, &e).unwrap_or_else(|| "<config>".into());
            bad(&key, msg)
        })
    }

    pub fn snapshot(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn distribution(&self) -> Result<Distribution, RunError> {
        Distribution::uniform(self.disorder.lo, self.disorder.hi)
            .map_err(|e| bad("disorder.lo", e.to_string()))
    }

    pub fn solver_config(&self) -> Result<SolverConfig, RunError> {
        let s = &self.solver;
        let dims = Dims::new(s.d, s.nu).map_err(|e| bad("solver.d", e.to_string()))?;
        let cfg = SolverConfig {
            dims,
            m: s.m,
            max_stage: s.max_stage,
            p: s.p,
            eps: s.eps,
            delta: s.delta,
            amplitudes: s.amplitudes.clone(),
            resonant: s.resonant.clone(),
            residual_target: s.residual_target,
            condition_cap: s.condition_cap,
            dense_cap: s.dense_cap,
            max_radius: s.max_radius,
            patch_exponent: s.patch_exponent,
            freq_constant: s.freq_constant,
        };
        cfg.validate().map_err(|e| match e {
            dnls_core::solver::SolverError::InvalidConfig { key, msg } => bad(&solver_key(key), msg),
            other => bad("solver", other.to_string()),
        })?;
        for o in &self.disorder.overrides {
            if o.site.len() != s.d {
                return Err(bad("disorder.override.site", format!("expected {} coordinates", s.d)));
            }
        }
        Ok(cfg)
    }

    pub fn integrator(&self) -> Result<Integrator, RunError> {
        match self.evolve.integrator.as_str() {
            "split" => Ok(Integrator::Split),
            "rk4" => Ok(Integrator::Rk4),
            other => Err(bad("evolve.integrator", format!("unknown integrator {other:?}; use split or rk4"))),
        }
    }

    /// Checks that do not depend on the command.
    pub fn validate_common(&self) -> Result<(), RunError> {
        self.distribution()?;
        Ok(())
    }

    pub fn validate_sweep(&self) -> Result<(), RunError> {
        let s = &self.sweep;
        if s.count == 0 {
            return Err(bad("sweep.count", "must be positive"));
        }
        if !(s.lo.is_finite() && s.hi.is_finite() && s.lo <= s.hi) {
            return Err(bad("sweep.lo", "need finite lo <= hi"));
        }
        Ok(())
    }

    pub fn validate_spectral(&self) -> Result<(), RunError> {
        let s = &self.spectral;
        if !(s.eps >= 0.0 && s.eps.is_finite()) {
            return Err(bad("spectral.eps", "must be nonnegative"));
        }
        if s.d == 0 {
            return Err(bad("spectral.d", "must be positive"));
        }
        if let Some(m) = s.m {
            if !(m > 0.0) {
                return Err(bad("spectral.m", "must be positive"));
            }
        }
        Ok(())
    }

    pub fn validate_wegner(&self) -> Result<(), RunError> {
        let w = &self.wegner;
        if w.d == 0 {
            return Err(bad("wegner.d", "must be positive"));
        }
        if w.kappas.is_empty() || w.kappas.iter().any(|k| !(*k >= 0.0)) {
            return Err(bad("wegner.kappas", "need a nonempty list of nonnegative values"));
        }
        if w.trials < 100 {
            return Err(bad("wegner.trials", "need at least 100 trials"));
        }
        Ok(())
    }

    pub fn validate_measure(&self) -> Result<(), RunError> {
        let m = &self.measure;
        if m.scales.is_empty() || m.scales.contains(&0) {
            return Err(bad("measure.scales", "need a nonempty list of positive scales"));
        }
        if !(m.step > 0.0) {
            return Err(bad("measure.step", "must be positive"));
        }
        if !(m.beta > 0.0 && m.beta < 1.0) {
            return Err(bad("measure.beta", "must lie in (0, 1)"));
        }
        if !(m.gamma > 0.0) {
            return Err(bad("measure.gamma", "must be positive"));
        }
        if let Some(h) = m.half_width {
            if !(h > 0.0) {
                return Err(bad("measure.half_width", "must be positive"));
            }
        }
        Ok(())
    }

    pub fn validate_dioph(&self) -> Result<(), RunError> {
        let d = &self.dioph;
        if !(d.exponent > 0.0) {
            return Err(bad("dioph.exponent", "must be positive"));
        }
        if !(d.c > 0.0) {
            return Err(bad("dioph.c", "must be positive"));
        }
        if d.omega.as_ref().is_some_and(|o| o.is_empty()) {
            return Err(bad("dioph.omega", "must be nonempty"));
        }
        Ok(())
    }

    pub fn validate_evolve(&self) -> Result<(), RunError> {
        let e = &self.evolve;
        self.integrator()?;
        if !(e.dt > 0.0 && e.dt.is_finite()) {
            return Err(bad("evolve.dt", "must be positive"));
        }
        if !(e.t_end >= 0.0 && e.t_end.is_finite()) {
            return Err(bad("evolve.t_end", "must be nonnegative"));
        }
        if e.samples == 0 {
            return Err(bad("evolve.samples", "must be positive"));
        }
        if e.site.len() != self.solver.d {
            return Err(bad("evolve.site", format!("expected {} coordinates", self.solver.d)));
        }
        Ok(())
    }

    pub fn validate_bench(&self) -> Result<(), RunError> {
        let b = &self.bench;
        if b.sizes.is_empty() {
            return Err(bad("bench.sizes", "must be nonempty"));
        }
        if !(b.schur_fraction >= 0.0 && b.schur_fraction <= 1.0) {
            return Err(bad("bench.schur_fraction", "must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Config key for a solver validation key.
pub fn solver_key(key: &str) -> String {
    let k = match key {
        "M" => "m",
        "dims" => "d",
        other => other,
    };
    format!("solver.{k}")
}

/// Best-effort name of the key a parse error points at.
fn offending_key(text: &str, e: &toml::de::Error) -> Option<String> {
    if let Some(rest) = e.message().strip_prefix("unknown field `") {
        return rest.split('`').next().map(str::to_string);
    }
    let span = e.span()?;
    let line_start = text[..span.start.min(text.len())].rfind('\n').map_or(0, |i| i + 1);
    let line = text[line_start..].lines().next()?;
    let key = line.split('=').next()?.trim();
    (!key.is_empty() && !key.starts_with('[')).then(|| key.to_string())
}
