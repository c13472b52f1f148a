//! Regret curves, cold-start estimation and theory overlays.

use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{RunTrace, TraceRecord};
use crate::itemspace::Feedback;
use crate::rng::{derive_rng, stream};
use crate::similarity::TheoryConstants;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("need at least {need} curves, got {got}")]
    TooFewCurves { need: usize, got: usize },
    #[error("curve grids differ")]
    GridMismatch,
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = MetricsError> = std::result::Result<T, E>;

/// Per-user regret `R(T)` sampled every `stride` steps.
///
/// Grid point `k` is `T = k·stride/N`; point 0 is always `R(0) = 0`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegretCurve {
    pub n_users: usize,
    pub seed: u64,
    pub algo: String,
    pub stride: u64,
    /// Cumulative dislikes at each grid point.
    pub dislikes: Vec<u64>,
}

impl RegretCurve {
    pub fn len(&self) -> usize {
        self.dislikes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dislikes.is_empty()
    }

    pub fn t_at(&self, k: usize) -> f64 {
        (k as u64 * self.stride) as f64 / self.n_users as f64
    }

    pub fn r_at(&self, k: usize) -> f64 {
        self.dislikes[k] as f64 / self.n_users as f64
    }

    pub fn ts(&self) -> Vec<f64> {
        (0..self.len()).map(|k| self.t_at(k)).collect()
    }

    pub fn values(&self) -> Vec<f64> {
        (0..self.len()).map(|k| self.r_at(k)).collect()
    }

    /// Grid index of the largest grid point with `T ≤ t`.
    pub fn index_at(&self, t: f64) -> usize {
        let k = (t * self.n_users as f64 / self.stride as f64 + 1e-9).floor();
        (k.max(0.0) as usize).min(self.len().saturating_sub(1))
    }

    fn same_grid(&self, other: &RegretCurve) -> bool {
        self.n_users == other.n_users && self.stride == other.stride && self.len() == other.len()
    }
}

/// Builds a [`RegretCurve`] one feedback at a time, without keeping the trace.
#[derive(Clone, Debug)]
pub struct RegretRecorder {
    curve: RegretCurve,
    steps: u64,
    count: u64,
}

impl RegretRecorder {
    pub fn new(n_users: usize, stride: u64, seed: u64, algo: impl Into<String>) -> Self {
        assert!(n_users > 0 && stride > 0);
        RegretRecorder {
            curve: RegretCurve {
                n_users,
                seed,
                algo: algo.into(),
                stride,
                dislikes: vec![0],
            },
            steps: 0,
            count: 0,
        }
    }

    pub fn record(&mut self, feedback: Feedback) {
        self.steps += 1;
        if feedback == Feedback::Dislike {
            self.count += 1;
        }
        if self.steps.is_multiple_of(self.curve.stride) {
            self.curve.dislikes.push(self.count);
        }
    }

    pub fn dislikes(&self) -> u64 {
        self.count
    }

    /// Trailing steps that do not fill a whole grid cell are dropped.
    pub fn finish(self) -> RegretCurve {
        self.curve
    }
}

/// Regret at every step of a trace.
pub fn regret(trace: &RunTrace, algo: &str) -> RegretCurve {
    regret_strided(&trace.records, trace.n_users, 1, trace.seed, algo)
}

pub fn regret_strided(records: &[TraceRecord], n_users: usize, stride: u64, seed: u64, algo: &str) -> RegretCurve {
    let mut rec = RegretRecorder::new(n_users, stride, seed, algo);
    for r in records {
        rec.record(r.feedback);
    }
    rec.finish()
}

/// Seed-averaged regret with pointwise standard errors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanCurve {
    pub n_users: usize,
    pub algo: String,
    pub n_seeds: usize,
    pub ts: Vec<f64>,
    pub mean: Vec<f64>,
    pub stderr: Vec<f64>,
}

impl MeanCurve {
    pub const CSV_HEADER: &'static str = "T,R_mean,R_stderr,n_seeds";

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "{}", Self::CSV_HEADER)?;
        for k in 0..self.ts.len() {
            writeln!(out, "{},{},{},{}", self.ts[k], self.mean[k], self.stderr[k], self.n_seeds)?;
        }
        Ok(())
    }

    pub fn cold_start(&self, opts: &ColdStartOptions) -> ColdStartEstimate {
        cold_start_time(&self.ts, &self.mean, opts)
    }
}

fn mean_and_se(xs: impl ExactSizeIterator<Item = f64> + Clone) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.clone().sum::<f64>() / n;
    if n < 2.0 {
        return (mean, 0.0);
    }
    let var = xs.map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

pub fn mean_regret(curves: &[RegretCurve]) -> Result<MeanCurve> {
    if curves.len() < 2 {
        return Err(MetricsError::TooFewCurves { need: 2, got: curves.len() });
    }
    let first = &curves[0];
    if curves.iter().any(|c| !c.same_grid(first)) {
        return Err(MetricsError::GridMismatch);
    }
    let mut mean = Vec::with_capacity(first.len());
    let mut stderr = Vec::with_capacity(first.len());
    for k in 0..first.len() {
        let (m, se) = mean_and_se(curves.iter().map(|c| c.r_at(k)));
        mean.push(m);
        stderr.push(se);
    }
    Ok(MeanCurve {
        n_users: first.n_users,
        algo: first.algo.clone(),
        n_seeds: curves.len(),
        ts: first.ts(),
        mean,
        stderr,
    })
}

/// Mean and standard error across seeds of the slope `(R(b) − R(a))/(b − a)`.
pub fn window_slope(curves: &[RegretCurve], from: f64, to: f64) -> Result<(f64, f64)> {
    if curves.is_empty() {
        return Err(MetricsError::TooFewCurves { need: 1, got: 0 });
    }
    let first = &curves[0];
    if curves.iter().any(|c| !c.same_grid(first)) {
        return Err(MetricsError::GridMismatch);
    }
    let (a, b) = (first.index_at(from), first.index_at(to));
    if b <= a {
        return Err(MetricsError::Argument(format!("empty window [{from}, {to}]")));
    }
    let width = first.t_at(b) - first.t_at(a);
    Ok(mean_and_se(curves.iter().map(|c| (c.r_at(b) - c.r_at(a)) / width)))
}

/// `(1 − 2ν)/N`, the slope no algorithm can beat asymptotically.
pub fn linear_lower_bound(nu: f64, n_users: usize) -> f64 {
    (1.0 - 2.0 * nu) / n_users as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColdStartOptions {
    pub threshold: f64,
    /// Search every `resolution`-th grid point for `T` and `Γ`.
    pub resolution: usize,
    /// Fraction of the horizon that must remain after `T + Γ` so the slope
    /// condition is checked on a non-empty window.
    pub min_evidence: f64,
}

impl Default for ColdStartOptions {
    fn default() -> Self {
        ColdStartOptions {
            threshold: 0.1,
            resolution: 1,
            min_evidence: 0.2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColdStartEstimate {
    pub threshold: f64,
    pub found: bool,
    pub t: f64,
    pub gamma: f64,
    /// `T + Γ`, or `None` when no pair qualifies.
    pub cold_start: Option<f64>,
    /// Largest `(R(T+Δ) − R(T))/Δ` over the checked `Δ > Γ`.
    pub max_window_slope: f64,
    /// Width of the window on which the condition was verified.
    pub evidence: f64,
    /// Slope over the last `min_evidence` fraction of the horizon.
    pub trailing_slope: f64,
}

/// Least `T + Γ` on the grid with `R(T+Δ) − R(T) ≤ threshold·Δ` for every
/// grid `Δ > Γ` up to the horizon.
pub fn cold_start_time(ts: &[f64], rs: &[f64], opts: &ColdStartOptions) -> ColdStartEstimate {
    assert_eq!(ts.len(), rs.len());
    let step = opts.resolution.max(1);
    let n = ts.len();
    let horizon = ts.last().copied().unwrap_or(0.0);
    let t_tail = horizon * (1.0 - opts.min_evidence);
    let tail_start = ts.iter().position(|&t| t >= t_tail - 1e-12).unwrap_or(0);
    let trailing_slope = if n > 0 && ts[n - 1] > ts[tail_start] {
        (rs[n - 1] - rs[tail_start]) / (ts[n - 1] - ts[tail_start])
    } else {
        0.0
    };
    let mut best: Option<(f64, f64, f64)> = None;
    let idx: Vec<usize> = (0..n).step_by(step).collect();
    for (pos, &a) in idx.iter().enumerate() {
        let t = ts[a];
        if let Some((bt, bg, _)) = best {
            if t >= bt + bg {
                break;
            }
        }
        // largest violating Δ becomes Γ
        let mut gamma = 0.0;
        let mut worst = f64::NEG_INFINITY;
        for &b in idx[pos + 1..].iter().rev() {
            let delta = ts[b] - t;
            let rise = rs[b] - rs[a];
            if rise > opts.threshold * delta + 1e-12 {
                gamma = delta;
                break;
            }
            worst = worst.max(rise / delta);
        }
        let evidence = horizon - (t + gamma);
        if evidence + 1e-12 < opts.min_evidence * horizon || evidence <= 0.0 {
            continue;
        }
        if best.is_none_or(|(bt, bg, _)| t + gamma < bt + bg - 1e-12) {
            best = Some((t, gamma, worst));
        }
    }
    match best {
        Some((t, gamma, worst)) => ColdStartEstimate {
            threshold: opts.threshold,
            found: true,
            t,
            gamma,
            cold_start: Some(t + gamma),
            max_window_slope: worst.max(0.0),
            evidence: horizon - t - gamma,
            trailing_slope,
        },
        None => ColdStartEstimate {
            threshold: opts.threshold,
            found: false,
            t: f64::NAN,
            gamma: f64::NAN,
            cold_start: None,
            max_window_slope: f64::NAN,
            evidence: 0.0,
            trailing_slope,
        },
    }
}

/// Cold-start time of the mean curve with a bootstrap standard error over seeds.
///
/// Resamples whose mean curve has no cold-start time are counted in
/// `failed` and left out of the error estimate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BootstrapColdStart {
    pub estimate: ColdStartEstimate,
    pub stderr: f64,
    pub resamples: usize,
    pub failed: usize,
}

pub fn bootstrap_cold_start(
    curves: &[RegretCurve],
    opts: &ColdStartOptions,
    resamples: usize,
    seed: u64,
) -> Result<BootstrapColdStart> {
    let mean = mean_regret(curves)?;
    let estimate = mean.cold_start(opts);
    let mut rng = derive_rng(seed, stream::MEASURE);
    let n = curves.len();
    let len = mean.ts.len();
    let mut values = Vec::with_capacity(resamples);
    let mut failed = 0;
    let mut sums = vec![0.0; len];
    for _ in 0..resamples {
        sums.iter_mut().for_each(|s| *s = 0.0);
        for _ in 0..n {
            let c = &curves[rng.gen_range(0..n)];
            for (k, s) in sums.iter_mut().enumerate() {
                *s += c.r_at(k);
            }
        }
        let rs: Vec<f64> = sums.iter().map(|s| s / n as f64).collect();
        match cold_start_time(&mean.ts, &rs, opts).cold_start {
            Some(v) => values.push(v),
            None => failed += 1,
        }
    }
    let stderr = if values.len() >= 2 {
        let m = values.iter().sum::<f64>() / values.len() as f64;
        (values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (values.len() - 1) as f64).sqrt()
    } else {
        f64::NAN
    };
    Ok(BootstrapColdStart {
        estimate,
        stderr,
        resamples,
        failed,
    })
}

/// Theory quantities for a configuration; only meaningful at scale 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundsOverlay {
    pub d: f64,
    pub nu: f64,
    pub n_users: usize,
    pub eps_n: f64,
    pub t_min: f64,
    pub t_max: f64,
    pub alpha: f64,
    pub beta: f64,
    pub lower_slope: f64,
}

impl BoundsOverlay {
    pub fn new(consts: &TheoryConstants) -> Self {
        BoundsOverlay {
            d: consts.d,
            nu: consts.nu,
            n_users: consts.n_users,
            eps_n: consts.eps_n(),
            t_min: consts.t_min(),
            t_max: consts.t_max(),
            alpha: consts.alpha(),
            beta: consts.beta(),
            lower_slope: linear_lower_bound(consts.nu, consts.n_users),
        }
    }

    /// The stated upper bound on expected regret at `T`. Below `T_min` the
    /// trivial bound `T` is returned.
    pub fn upper_at(&self, t: f64) -> f64 {
        if t <= self.t_min {
            t
        } else if t <= self.t_max {
            let x = t - self.t_min;
            self.t_min + self.alpha * x.powf((self.d + 1.0) / (self.d + 2.0)) * x.log2()
        } else {
            self.beta + self.eps_n * (t - self.t_max)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn curve(n: usize, feedback: &[bool]) -> RegretCurve {
        let mut rec = RegretRecorder::new(n, 1, 0, "t");
        for &dislike in feedback {
            rec.record(if dislike { Feedback::Dislike } else { Feedback::Like });
        }
        rec.finish()
    }

    #[test]
    fn all_liked_and_all_disliked() {
        let good = curve(5, &[false; 50]);
        assert!(good.values().iter().all(|&r| r == 0.0));
        let bad = curve(5, &[true; 50]);
        for k in 0..bad.len() {
            assert!((bad.r_at(k) - bad.t_at(k)).abs() < 1e-12);
        }
    }

    #[test]
    fn dislikes_only_in_first_round() {
        let mut fb = vec![true; 10];
        fb.extend([false; 30]);
        let c = curve(10, &fb);
        assert_eq!(c.r_at(10), 1.0);
        assert_eq!(c.r_at(40), 1.0);
    }

    #[test]
    fn mean_of_identical_curves_has_zero_band() {
        let c = curve(4, &[true, false, true, true, false, false, true, false]);
        let m = mean_regret(&[c.clone(), c.clone(), c]).unwrap();
        assert!(m.stderr.iter().all(|&s| s == 0.0));
    }

    #[test]
    fn mean_rejects_mismatch_and_single_curve() {
        let a = curve(4, &[true; 8]);
        let b = curve(4, &[true; 12]);
        assert!(matches!(mean_regret(&[a.clone(), b]), Err(MetricsError::GridMismatch)));
        assert!(matches!(mean_regret(&[a]), Err(MetricsError::TooFewCurves { .. })));
    }

    #[test]
    fn cold_start_of_zero_curve_is_zero() {
        let ts: Vec<f64> = (0..=100).map(|k| k as f64 / 10.0).collect();
        let rs = vec![0.0; ts.len()];
        let est = cold_start_time(&ts, &rs, &ColdStartOptions::default());
        assert_eq!(est.cold_start, Some(0.0));
    }

    #[test]
    fn cold_start_of_slope_one_is_not_found() {
        let ts: Vec<f64> = (0..=100).map(|k| k as f64 / 10.0).collect();
        let est = cold_start_time(&ts, &ts, &ColdStartOptions::default());
        assert!(!est.found);
        assert!((est.trailing_slope - 1.0).abs() < 1e-12);
    }

    #[test]
    fn piecewise_curve_cold_start() {
        // slope 1 up to 5, 0.05 afterwards
        let ts: Vec<f64> = (0..=5000).map(|k| k as f64 / 100.0).collect();
        let rs: Vec<f64> = ts.iter().map(|&t| if t <= 5.0 { t } else { 5.0 + 0.05 * (t - 5.0) }).collect();
        let est = cold_start_time(&ts, &rs, &ColdStartOptions::default());
        assert!((est.cold_start.unwrap() - 5.0).abs() < 1e-9, "{est:?}");
        assert!((est.t - 5.0).abs() < 1e-9 && est.gamma == 0.0);
    }

    #[test]
    fn lower_bound_arithmetic() {
        assert!((linear_lower_bound(0.25, 10) - 0.05).abs() < 1e-15);
        assert_eq!(linear_lower_bound(0.5, 10), 0.0);
    }

    #[test]
    fn window_slope_of_linear_curves() {
        let a = curve(2, &[true; 40]);
        let (m, se) = window_slope(&[a.clone(), a], 5.0, 15.0).unwrap();
        assert!((m - 1.0).abs() < 1e-12 && se == 0.0);
    }

    #[test]
    fn csv_header() {
        let c = curve(2, &[true, false, true, false]);
        let m = mean_regret(&[c.clone(), c]).unwrap();
        let mut out = Vec::new();
        m.write_csv(&mut out).unwrap();
        let s = String::from_utf8(out).unwrap();
        assert!(s.starts_with("T,R_mean,R_stderr,n_seeds\n0,0,0,2\n"));
        assert_eq!(s.lines().count(), 6);
    }
}
