//! Registration quality: TRE, critic scores, iterative refinement, reports
//! and overlay images.

mod metrics;
mod overlay;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use metrics::{pearson, ranks, spearman, summarize, tre, tre_targets, Summary, TRE_GRID};
pub use overlay::{blend_pixel, emit_overlay, emit_triptych, render_overlay, Rgb, OVERLAY_SCALE};

use crate::geometry::{PerturbationRange, RigidParams2D};
use crate::nets::{estimate_rigid, forward_d, Network};
use crate::resampler::warp;
use crate::rng::{derive_seed, seeded, stream};
use crate::synthdata::ImagePair;
use crate::tensor::{Result, Tensor};

/// Anything that predicts a rigid correction for a fixed/moving pair.
pub trait Estimator {
    fn estimate(&self, fixed: &Tensor, moving: &Tensor) -> Result<RigidParams2D>;
}

/// Anything that scores the alignment of a fixed/moving pair.
pub trait Scorer {
    fn score(&self, fixed: &Tensor, moving: &Tensor) -> Result<f32>;
}

impl Estimator for Network {
    fn estimate(&self, fixed: &Tensor, moving: &Tensor) -> Result<RigidParams2D> {
        estimate_rigid(self, fixed, moving)
    }
}

impl Scorer for Network {
    fn score(&self, fixed: &Tensor, moving: &Tensor) -> Result<f32> {
        forward_d(self, fixed, moving)
    }
}

/// The correction that undoes `init` on `pair`: `warp(moving, init)` pulled
/// through it lands on `warp(moving, gt_transform)`.
pub fn target_correction(pair: &ImagePair, init: RigidParams2D) -> RigidParams2D {
    init.invert().compose(pair.gt_transform)
}

/// One generator pass on `(fixed, warp(moving, init_t))`.
pub fn register_once(
    g: &impl Estimator,
    pair: &ImagePair,
    init_t: RigidParams2D,
) -> Result<RigidParams2D> {
    g.estimate(&pair.fixed, &warp(&pair.moving, init_t)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    /// Accumulated correction after this iteration.
    pub t: RigidParams2D,
    pub dscore: f64,
    pub tre_mm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegistrationResult {
    pub id: String,
    pub initial_t: RigidParams2D,
    /// Best-scoring accumulated correction; the registered image is
    /// `warp(moving, compose(initial_t, estimated_t))`.
    pub estimated_t: RigidParams2D,
    pub tre_before_mm: f64,
    pub tre_after_mm: f64,
    pub dscore_before: f64,
    pub dscore_after: f64,
    pub iterations: usize,
    pub trace: Vec<TraceStep>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RefineOptions {
    pub max_iters: usize,
    pub eps: f64,
}

impl Default for RefineOptions {
    fn default() -> Self {
        Self {
            max_iters: 10,
            eps: 1e-3,
        }
    }
}

fn param_norm(t: RigidParams2D) -> f64 {
    t.to_array().iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Repeated generator passes on the progressively resampled moving image.
///
/// Each pass estimates a correction `c` on `warp(moving, compose(init, total))`
/// and accumulates `total = compose(total, c)`, so the registered image is
/// always one resampling of the original. The loop stops after `max_iters`
/// passes, when the critic score improves by less than `eps`, or when a pass
/// after the first proposes a correction smaller than `eps` (that pass is
/// not counted). The best-scoring iterate is returned.
pub fn iterative_register(
    g: &impl Estimator,
    d: &impl Scorer,
    pair: &ImagePair,
    init_t: RigidParams2D,
    opts: RefineOptions,
) -> Result<RegistrationResult> {
    assert!(opts.max_iters >= 1, "max_iters must be at least 1");
    let spacing = pair.pixel_spacing_mm;
    let size = pair.size();
    let gt = target_correction(pair, init_t);
    let dscore_before = d.score(&pair.fixed, &warp(&pair.moving, init_t)?)? as f64;
    let mut total = RigidParams2D::IDENTITY;
    let mut trace: Vec<TraceStep> = Vec::new();
    let mut previous = dscore_before;
    for it in 0..opts.max_iters {
        let current = warp(&pair.moving, init_t.compose(total))?;
        let corr = g.estimate(&pair.fixed, &current)?;
        if it > 0 && param_norm(corr) < opts.eps {
            break;
        }
        total = total.compose(corr);
        let registered = warp(&pair.moving, init_t.compose(total))?;
        let dscore = d.score(&pair.fixed, &registered)? as f64;
        trace.push(TraceStep {
            t: total,
            dscore,
            tre_mm: tre(total, gt, spacing, size),
        });
        let improvement = dscore - previous;
        previous = dscore;
        if improvement < opts.eps {
            break;
        }
    }
    let best = trace
        .iter()
        .copied()
        .reduce(|best, s| if s.dscore > best.dscore { s } else { best })
        .expect("at least one iteration");
    Ok(RegistrationResult {
        id: pair.id.clone(),
        initial_t: init_t,
        estimated_t: best.t,
        tre_before_mm: tre(RigidParams2D::IDENTITY, gt, spacing, size),
        tre_after_mm: best.tre_mm,
        dscore_before,
        dscore_after: best.dscore,
        iterations: trace.len(),
        trace,
    })
}

/// Seeded initial misalignment of the `index`-th evaluated pair.
pub fn initial_perturbation(range: &PerturbationRange, seed: u64, index: usize) -> RigidParams2D {
    let mut rng = seeded(derive_seed(
        derive_seed(seed, stream::EVAL_PERTURB),
        index as u64,
    ));
    range.sample(&mut rng)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub n: usize,
    pub mean_tre_before_mm: f64,
    pub mean_tre_after_mm: f64,
    pub tre_before_mm: Summary,
    pub tre_after_mm: Summary,
    pub mean_dscore_before: f64,
    pub mean_dscore_after: f64,
    /// Over the before and after points of every pair together.
    pub spearman_dscore_vs_neg_tre: f64,
    pub mean_iterations: f64,
    /// Wall time of the first generator pass per pair (not deterministic).
    pub latency_ms_mean: f64,
    pub latency_ms_max: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub results: Vec<RegistrationResult>,
    pub latencies_ms: Vec<f64>,
    pub summary: EvalSummary,
}

/// Registers every pair from a seeded initial misalignment and summarizes.
pub fn evaluate(
    g: &impl Estimator,
    d: &impl Scorer,
    pairs: &[ImagePair],
    perturb: &PerturbationRange,
    seed: u64,
    opts: RefineOptions,
) -> Result<EvalReport> {
    let mut results = Vec::with_capacity(pairs.len());
    let mut latencies_ms = Vec::with_capacity(pairs.len());
    for (i, pair) in pairs.iter().enumerate() {
        let init = initial_perturbation(perturb, seed, i);
        let start = Instant::now();
        register_once(g, pair, init)?;
        latencies_ms.push(start.elapsed().as_secs_f64() * 1e3);
        results.push(iterative_register(g, d, pair, init, opts)?);
    }
    let summary = summarize_results(&results, &latencies_ms);
    Ok(EvalReport {
        results,
        latencies_ms,
        summary,
    })
}

pub fn summarize_results(results: &[RegistrationResult], latencies_ms: &[f64]) -> EvalSummary {
    let col = |f: fn(&RegistrationResult) -> f64| results.iter().map(f).collect::<Vec<_>>();
    let before = col(|r| r.tre_before_mm);
    let after = col(|r| r.tre_after_mm);
    let ds_before = col(|r| r.dscore_before);
    let ds_after = col(|r| r.dscore_after);
    let scores: Vec<f64> = ds_before.iter().chain(&ds_after).copied().collect();
    let neg_tre: Vec<f64> = before.iter().chain(&after).map(|t| -t).collect();
    let mean = |v: &[f64]| summarize(v).mean;
    EvalSummary {
        n: results.len(),
        mean_tre_before_mm: mean(&before),
        mean_tre_after_mm: mean(&after),
        tre_before_mm: summarize(&before),
        tre_after_mm: summarize(&after),
        mean_dscore_before: mean(&ds_before),
        mean_dscore_after: mean(&ds_after),
        spearman_dscore_vs_neg_tre: spearman(&scores, &neg_tre),
        mean_iterations: mean(&col(|r| r.iterations as f64)),
        latency_ms_mean: mean(latencies_ms),
        latency_ms_max: latencies_ms.iter().copied().fold(f64::NAN, f64::max),
    }
}

pub const REPORT_HEADER: &str =
    "id,tre_before_mm,tre_after_mm,dscore_before,dscore_after,iterations";

pub fn report_csv(results: &[RegistrationResult]) -> String {
    let mut out = String::from(REPORT_HEADER);
    out.push('\n');
    for r in results {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.id, r.tre_before_mm, r.tre_after_mm, r.dscore_before, r.dscore_after, r.iterations
        ));
    }
    out
}

fn write_file(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(bytes)
}

/// Writes `report.csv` and `summary.json` into `dir`, returning their paths.
pub fn write_report(report: &EvalReport, dir: &Path) -> std::io::Result<(PathBuf, PathBuf)> {
    fs::create_dir_all(dir)?;
    let csv = dir.join("report.csv");
    write_file(&csv, report_csv(&report.results).as_bytes())?;
    let json = dir.join("summary.json");
    let text = serde_json::to_string_pretty(&report.summary).expect("summary serializes");
    write_file(&json, (text + "\n").as_bytes())?;
    Ok((csv, json))
}
