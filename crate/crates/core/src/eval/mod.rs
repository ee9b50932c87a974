//! Cutoff curves, AUCOC, self-awareness score and the stratified views
//! built on them.

use std::collections::BTreeMap;
use std::time::Instant;

use crate::data::AgentType;
use crate::error::{Error, Result};
use crate::numerics::params::ParameterSet;

/// `{0, 0.05, ..., 0.95}`.
pub fn default_grid() -> Vec<f64> {
    (0..20).map(|k| k as f64 / 20.0).collect()
}

/// Grid must start at 0, increase strictly and stay below 1.
pub fn check_grid(grid: &[f64]) -> Result<()> {
    if grid.len() < 2 {
        return Err(Error::InvalidArgument(
            "cutoff grid needs at least two fractions".into(),
        ));
    }
    if grid[0] != 0.0 || grid.windows(2).any(|w| !(w[1] > w[0])) || grid.iter().any(|f| !(*f < 1.0)) {
        return Err(Error::InvalidArgument(
            "cutoff grid must start at 0, increase strictly and stay below 1".into(),
        ));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct CutoffCurve {
    pub fractions: Vec<f64>,
    pub remaining_mean: Vec<f64>,
}

impl CutoffCurve {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("fraction,remaining_mean_error_m\n");
        for (f, m) in self.fractions.iter().zip(&self.remaining_mean) {
            s.push_str(&format!("{f:?},{m:?}\n"));
        }
        s
    }
}

/// Order in which samples are removed: diagnostic descending, ties by index.
fn removal_order(diagnostics: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..diagnostics.len()).collect();
    order.sort_by(|&a, &b| diagnostics[b].total_cmp(&diagnostics[a]));
    order
}

pub fn cutoff_curve(errors: &[f64], diagnostics: &[f64], grid: &[f64]) -> Result<CutoffCurve> {
    if errors.len() != diagnostics.len() {
        return Err(Error::shape("cutoff_curve", &[errors.len()], &[diagnostics.len()]));
    }
    if errors.is_empty() {
        return Err(Error::InvalidArgument("cutoff_curve on empty input".into()));
    }
    check_grid(grid)?;
    let n = errors.len();
    let order = removal_order(diagnostics);
    // suffix sums of errors in removal order
    let mut suffix = vec![0.0; n + 1];
    for i in (0..n).rev() {
        suffix[i] = suffix[i + 1] + errors[order[i]];
    }
    let mut remaining_mean = Vec::with_capacity(grid.len());
    for &f in grid {
        let k = (f * n as f64).round() as usize;
        if k >= n {
            return Err(Error::InvalidArgument(format!("fraction {f} removes all {n} samples")));
        }
        remaining_mean.push(suffix[k] / (n - k) as f64);
    }
    Ok(CutoffCurve {
        fractions: grid.to_vec(),
        remaining_mean,
    })
}

/// Trapezoidal area under the curve.
pub fn aucoc(curve: &CutoffCurve) -> Result<f64> {
    if curve.fractions.len() < 2 || curve.fractions.len() != curve.remaining_mean.len() {
        return Err(Error::InvalidArgument("aucoc needs at least two curve points".into()));
    }
    Ok(curve
        .fractions
        .windows(2)
        .zip(curve.remaining_mean.windows(2))
        .map(|(f, m)| (f[1] - f[0]) * (m[0] + m[1]) / 2.0)
        .sum())
}

/// Expected area under uniformly random removal: the curve is flat at the
/// mean error.
pub fn aucoc_random(errors: &[f64], grid: &[f64]) -> Result<f64> {
    if errors.is_empty() {
        return Err(Error::InvalidArgument("aucoc_random on empty input".into()));
    }
    check_grid(grid)?;
    let mean = errors.iter().sum::<f64>() / errors.len() as f64;
    Ok(mean * (grid[grid.len() - 1] - grid[0]))
}

pub fn aucoc_optimal(errors: &[f64], grid: &[f64]) -> Result<f64> {
    aucoc(&cutoff_curve(errors, errors, grid)?)
}

/// Relative size below which the random/optimal gap counts as zero.
const DEGENERATE: f64 = 1e-12;

/// Random, diagnostic and optimal areas with the resulting score.
#[derive(Clone, Debug, PartialEq)]
pub struct SasReport {
    pub aucoc_random: f64,
    pub aucoc: f64,
    pub aucoc_optimal: f64,
    /// `None` when random and optimal areas coincide.
    pub sas: Option<f64>,
}

pub fn sas_report(errors: &[f64], diagnostics: &[f64], grid: &[f64]) -> Result<SasReport> {
    let random = aucoc_random(errors, grid)?;
    let diag = aucoc(&cutoff_curve(errors, diagnostics, grid)?)?;
    let optimal = aucoc_optimal(errors, grid)?;
    let denom = random - optimal;
    let sas = (denom > DEGENERATE * random.abs()).then(|| (random - diag) / denom);
    Ok(SasReport {
        aucoc_random: random,
        aucoc: diag,
        aucoc_optimal: optimal,
        sas,
    })
}

/// Self-awareness score; `None` when it is undefined.
pub fn sas(errors: &[f64], diagnostics: &[f64], grid: &[f64]) -> Result<Option<f64>> {
    Ok(sas_report(errors, diagnostics, grid)?.sas)
}

/// One evaluated agent prediction.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoredSample {
    pub record_id: String,
    pub start_frame: i64,
    pub track_id: u64,
    pub agent_type: AgentType,
    /// True per-step errors, meters.
    pub errors: Vec<f64>,
    /// Per-step diagnostics when the method provides them.
    pub step_diagnostics: Option<Vec<f64>>,
    pub diag_ade: f64,
    pub diag_fde: f64,
}

impl ScoredSample {
    pub fn ade(&self) -> f64 {
        self.errors.iter().sum::<f64>() / self.errors.len() as f64
    }

    pub fn fde(&self) -> f64 {
        *self.errors.last().expect("non-empty horizon")
    }
}

/// Metric-level summary of a set of scored samples.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricPair {
    pub ade: SasReport,
    pub fde: SasReport,
    pub ade_curve: CutoffCurve,
    pub fde_curve: CutoffCurve,
}

pub fn evaluate(samples: &[ScoredSample], grid: &[f64]) -> Result<MetricPair> {
    let ade: Vec<f64> = samples.iter().map(ScoredSample::ade).collect();
    let fde: Vec<f64> = samples.iter().map(ScoredSample::fde).collect();
    let da: Vec<f64> = samples.iter().map(|s| s.diag_ade).collect();
    let df: Vec<f64> = samples.iter().map(|s| s.diag_fde).collect();
    Ok(MetricPair {
        ade: sas_report(&ade, &da, grid)?,
        fde: sas_report(&fde, &df, grid)?,
        ade_curve: cutoff_curve(&ade, &da, grid)?,
        fde_curve: cutoff_curve(&fde, &df, grid)?,
    })
}

/// One row per future step, using that step's error and diagnostic.
pub fn per_moment_report(samples: &[ScoredSample], grid: &[f64]) -> Result<Vec<SasReport>> {
    let tf = samples
        .first()
        .ok_or_else(|| Error::InvalidArgument("per_moment_report on empty input".into()))?
        .errors
        .len();
    (0..tf)
        .map(|t| {
            let e: Vec<f64> = samples.iter().map(|s| s.errors[t]).collect();
            let d = samples
                .iter()
                .map(|s| {
                    s.step_diagnostics
                        .as_ref()
                        .map(|v| v[t])
                        .ok_or_else(|| Error::InvalidArgument("per-step diagnostics missing".into()))
                })
                .collect::<Result<Vec<f64>>>()?;
            sas_report(&e, &d, grid)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct TypeRow {
    pub count: usize,
    pub sas_ade: Option<f64>,
    pub sas_fde: Option<f64>,
}

/// Whether every grid fraction leaves at least one of `n` samples.
pub fn grid_fits(grid: &[f64], n: usize) -> bool {
    n >= 2 && grid.iter().all(|f| ((f * n as f64).round() as usize) < n)
}

/// SAS within each agent-type stratum; every type gets a row, strata that
/// are empty, too small for the grid or degenerate carry `None`.
pub fn per_type_report(samples: &[ScoredSample], grid: &[f64]) -> Result<BTreeMap<AgentType, TypeRow>> {
    let mut out = BTreeMap::new();
    for kind in AgentType::ALL {
        let group: Vec<&ScoredSample> = samples.iter().filter(|s| s.agent_type == kind).collect();
        let score = |err: &dyn Fn(&ScoredSample) -> f64, diag: &dyn Fn(&ScoredSample) -> f64| -> Result<Option<f64>> {
            if !grid_fits(grid, group.len()) {
                return Ok(None);
            }
            let e: Vec<f64> = group.iter().map(|s| err(s)).collect();
            let d: Vec<f64> = group.iter().map(|s| diag(s)).collect();
            sas(&e, &d, grid)
        };
        out.insert(
            kind,
            TypeRow {
                count: group.len(),
                sas_ade: score(&ScoredSample::ade, &|s| s.diag_ade)?,
                sas_fde: score(&ScoredSample::fde, &|s| s.diag_fde)?,
            },
        );
    }
    Ok(out)
}

/// Learnable elements over every set; ensembles pass each member.
pub fn count_parameters(sets: &[&ParameterSet]) -> usize {
    sets.iter().map(|s| s.count()).sum()
}

pub const MIN_TIMED_FRAMES: usize = 100;
pub const MIN_WARMUP_FRAMES: usize = 10;

/// Median wall-clock milliseconds of `frame(i)` over `frames` calls after
/// `warmup` untimed calls.
pub fn time_per_frame(mut frame: impl FnMut(usize) -> Result<()>, frames: usize, warmup: usize) -> Result<f64> {
    if frames < MIN_TIMED_FRAMES || warmup < MIN_WARMUP_FRAMES {
        return Err(Error::InvalidArgument(format!(
            "timing needs at least {MIN_TIMED_FRAMES} frames after {MIN_WARMUP_FRAMES} warmup frames"
        )));
    }
    for i in 0..warmup {
        frame(i)?;
    }
    let mut times = Vec::with_capacity(frames);
    for i in 0..frames {
        let start = Instant::now();
        frame(warmup + i)?;
        times.push(start.elapsed().as_secs_f64() * 1e3);
    }
    times.sort_by(f64::total_cmp);
    let mid = frames / 2;
    Ok(if frames % 2 == 1 {
        times[mid]
    } else {
        (times[mid - 1] + times[mid]) / 2.0
    })
}
