//! Closed-form expected magnitude change of an item row under one SGD step,
//! and a Monte-Carlo oracle that checks it by simulating the step.
//!
//! All calculators are mean-field: expectations on the right-hand side
//! (squared magnitude, squared cosine, dot products) are supplied as point
//! values.

use rand::Rng;
use rand_distr::{Binomial, Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::io::{fmt_f64, CsvTable};
use crate::linalg::{dot, norm};
use crate::seeded_rng;
use crate::stats;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TheoryParams {
    pub eta: f64,
    pub lambda: f64,
    pub batch_size: f64,
    pub total_edges: f64,
    /// Item degree; fractional values are allowed for plotting grids.
    pub degree: f64,
    pub n_items: f64,
    /// Negatives per positive.
    pub gamma: f64,
    /// `E[||i||^2]`.
    pub exp_sq_mag: f64,
    /// `E[cos^2(u, i)]`.
    pub cos_sq: f64,
}

impl Default for TheoryParams {
    /// The heatmap conventions: cos^2 = 0.81, unit squared magnitude.
    fn default() -> Self {
        TheoryParams {
            eta: 0.01,
            lambda: 1e-6,
            batch_size: 2.0,
            total_edges: 100.0,
            degree: 10.0,
            n_items: 1000.0,
            gamma: 0.0,
            exp_sq_mag: 1.0,
            cos_sq: 0.81,
        }
    }
}

impl TheoryParams {
    pub fn with_fraction(mut self, fraction: f64) -> Self {
        self.total_edges = 1e6;
        self.batch_size = fraction * 1e6;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidArgument(what.to_string()));
        if !(self.eta >= 0.0 && self.lambda >= 0.0) {
            return bad("eta and lambda must be >= 0");
        }
        if !(0.0..=1.0).contains(&self.cos_sq) {
            return bad("cos_sq must lie in [0, 1]");
        }
        if !(self.exp_sq_mag > 0.0) {
            return bad("exp_sq_mag must be > 0");
        }
        if !(self.total_edges > 0.0
            && self.batch_size >= 0.0
            && self.batch_size <= self.total_edges)
        {
            return bad("need 0 <= |B| <= |E| and |E| > 0");
        }
        if !(self.degree >= 0.0 && self.gamma >= 0.0) {
            return bad("degree and gamma must be >= 0");
        }
        if self.gamma > 0.0 && !(self.n_items > 0.0) {
            return bad("n_items must be > 0 with negative sampling");
        }
        Ok(())
    }

    pub fn batch_fraction(&self) -> f64 {
        self.batch_size / self.total_edges
    }

    /// `1 - (1 - |B|/|E|)^d`.
    pub fn inclusion_probability(&self) -> f64 {
        let f = self.batch_fraction();
        if self.degree == 0.0 || f <= 0.0 {
            return 0.0;
        }
        if f >= 1.0 {
            return 1.0;
        }
        -f64::exp_m1(self.degree * f64::ln_1p(-f))
    }

    /// `1 - (1 - |B|/|E|)^d (1 - gamma |B| / |I|)`, the negative factor clamped at 0.
    pub fn negsample_inclusion_probability(&self) -> f64 {
        if self.gamma == 0.0 {
            return self.inclusion_probability();
        }
        let miss_neg = (1.0 - self.gamma * self.batch_size / self.n_items).max(0.0);
        1.0 - (1.0 - self.inclusion_probability()) * miss_neg
    }

    /// `E[||i||^2] * eta lambda (eta lambda - 2)`, the decay contribution.
    pub fn decay_term(&self) -> f64 {
        let el = self.eta * self.lambda;
        self.exp_sq_mag * el * (el - 2.0)
    }

    /// `eta^2 / E[||i||^2] * (1 - cos^2)`, the ranking contribution when in batch.
    pub fn ranking_term(&self) -> f64 {
        self.eta * self.eta / self.exp_sq_mag * (1.0 - self.cos_sq)
    }
}

/// Expected change of `||i||^2` after one step with full weight decay.
pub fn theorem1_expected_change(p: &TheoryParams) -> Result<f64> {
    p.validate()?;
    Ok(p.decay_term() + p.inclusion_probability() * p.ranking_term())
}

/// Batched decay: both terms are gated by the inclusion probability.
pub fn corollary1_expected_change(p: &TheoryParams) -> Result<f64> {
    p.validate()?;
    Ok(p.inclusion_probability() * (p.decay_term() + p.ranking_term()))
}

/// Full decay with uniform negative sampling widening the inclusion event.
pub fn corollary2_expected_change(p: &TheoryParams) -> Result<f64> {
    p.validate()?;
    Ok(p.decay_term() + p.negsample_inclusion_probability() * p.ranking_term())
}

/// Dot-product scoring: `E||i||^2 (eta^2 lambda^2 - 2 eta lambda) +
/// P [2 (eta - eta^2 lambda) E[u.i] + eta^2 E||u||^2]`.
pub fn dot_update_expected_change(p: &TheoryParams, exp_dot: f64, exp_u_sq: f64) -> Result<f64> {
    p.validate()?;
    let (eta, lambda) = (p.eta, p.lambda);
    let decay = p.exp_sq_mag * (eta * eta * lambda * lambda - 2.0 * eta * lambda);
    let ranking = 2.0 * (eta - eta * eta * lambda) * exp_dot + eta * eta * exp_u_sq;
    Ok(decay + p.inclusion_probability() * ranking)
}

/// One step on the squared Euclidean distance: `i (1 - 2 eta - eta lambda) + 2 eta u`
/// in batch, `i (1 - eta lambda)` otherwise.
pub fn euclidean_step(i: &[f64], u: &[f64], eta: f64, lambda: f64, in_batch: bool) -> Vec<f64> {
    if in_batch {
        let c = 1.0 - 2.0 * eta - eta * lambda;
        i.iter()
            .zip(u)
            .map(|(a, b)| c * a + 2.0 * eta * b)
            .collect()
    } else {
        i.iter().map(|a| (1.0 - eta * lambda) * a).collect()
    }
}

/// One step of cosine-similarity ascent with weight decay:
/// `(1 - eta lambda) i + eta d cos(u, i) / d i` in batch, decay only otherwise.
pub fn cosine_step(i: &[f64], u: &[f64], eta: f64, lambda: f64, in_batch: bool) -> Vec<f64> {
    let decay = 1.0 - eta * lambda;
    let mut out: Vec<f64> = i.iter().map(|a| decay * a).collect();
    if in_batch {
        let (ni, nu) = (norm(i), norm(u));
        let c = dot(u, i) / (ni * nu);
        for (k, o) in out.iter_mut().enumerate() {
            *o += eta * (u[k] / (nu * ni) - c * i[k] / (ni * ni));
        }
    }
    out
}

/// Simulated squared magnitudes after one step, one per trial.
#[derive(Clone, Debug, PartialEq)]
pub struct MagnitudeTrace {
    pub sq_magnitudes: Vec<f64>,
    pub initial_sq_mag: f64,
    pub mean_change: f64,
    pub stderr: f64,
}

fn random_unit<R: Rng>(rng: &mut R, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let n = norm(&v);
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Unit vector orthogonal to the unit vector `u`.
fn random_orthogonal<R: Rng>(rng: &mut R, u: &[f64]) -> Vec<f64> {
    loop {
        let mut v: Vec<f64> = (0..u.len()).map(|_| rng.sample(StandardNormal)).collect();
        let p = dot(&v, u);
        v.iter_mut().zip(u).for_each(|(a, b)| *a -= p * b);
        let n = norm(&v);
        if n > 1e-9 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Simulates the one-step update `trials` times.
///
/// Each trial draws a unit user direction `u`, builds `i` at magnitude
/// `sqrt(exp_sq_mag)` with `cos(u, i) = +-sqrt(cos_sq)` exactly, decides batch
/// membership by drawing whether any of the item's `degree` interactions
/// lands in the batch, and applies [`cosine_step`]. Trial `t` uses its own
/// RNG stream, so results do not depend on the thread count.
pub fn monte_carlo_magnitude(
    p: &TheoryParams,
    dim: usize,
    trials: usize,
    seed: u64,
) -> Result<MagnitudeTrace> {
    p.validate()?;
    if trials < 1000 {
        return Err(Error::InvalidArgument(format!(
            "trials must be >= 1000, got {trials}"
        )));
    }
    if dim == 0 || (dim < 2 && p.cos_sq < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "cannot build cos^2 = {} in dimension {dim}",
            p.cos_sq
        )));
    }
    if p.degree.fract() != 0.0 {
        return Err(Error::InvalidArgument(
            "simulation needs an integer degree".into(),
        ));
    }
    let frac = p.batch_fraction();
    let inclusion = if p.degree == 0.0 || frac <= 0.0 {
        None
    } else {
        Some(
            Binomial::new(p.degree as u64, frac.min(1.0))
                .map_err(|e| Error::InvalidArgument(e.to_string()))?,
        )
    };
    let mag = p.exp_sq_mag.sqrt();
    let c_abs = p.cos_sq.sqrt();
    let s = (1.0 - p.cos_sq).max(0.0).sqrt();
    let sq_magnitudes: Vec<f64> = (0..trials as u64)
        .into_par_iter()
        .map(|t| {
            let mut rng = seeded_rng(seed, t);
            let u = random_unit(&mut rng, dim);
            let c = if rng.random_bool(0.5) { c_abs } else { -c_abs };
            let i: Vec<f64> = if dim >= 2 {
                let v = random_orthogonal(&mut rng, &u);
                u.iter()
                    .zip(&v)
                    .map(|(a, b)| mag * (c * a + s * b))
                    .collect()
            } else {
                u.iter().map(|a| mag * c * a).collect()
            };
            let in_batch = inclusion.is_some_and(|b| b.sample(&mut rng) > 0);
            let next = cosine_step(&i, &u, p.eta, p.lambda, in_batch);
            dot(&next, &next)
        })
        .collect();
    let changes: Vec<f64> = sq_magnitudes.iter().map(|m| m - p.exp_sq_mag).collect();
    let mean_change = stats::mean(&changes);
    let stderr = stats::sample_std(&changes) / (trials as f64).sqrt();
    Ok(MagnitudeTrace {
        sq_magnitudes,
        initial_sq_mag: p.exp_sq_mag,
        mean_change,
        stderr,
    })
}

/// `(mean - expected) / stderr`, with an absolute tolerance for cells where
/// the simulated change is deterministic and the standard error vanishes.
pub fn z_score(expected: f64, mean: f64, stderr: f64) -> f64 {
    let diff = mean - expected;
    let tol = 1e-15 + 1e-9 * expected.abs();
    if diff.abs() <= tol {
        0.0
    } else if stderr > 0.0 {
        diff / stderr
    } else {
        f64::INFINITY.copysign(diff)
    }
}

/// Full-decay expected changes on a degree x batch-fraction grid, row-major
/// by degree.
#[derive(Clone, Debug, PartialEq)]
pub struct HeatmapGrid {
    pub degrees: Vec<f64>,
    pub fractions: Vec<f64>,
    pub values: Vec<f64>,
}

pub const HEATMAP_HEADER: [&str; 3] = ["degree", "batch_fraction", "closed_form"];
pub const ORACLE_HEADER: [&str; 6] = [
    "degree",
    "batch_fraction",
    "closed_form",
    "mc_mean",
    "mc_stderr",
    "z_score",
];

impl HeatmapGrid {
    pub fn value(&self, d: usize, f: usize) -> f64 {
        self.values[d * self.fractions.len() + f]
    }

    pub fn to_csv(&self) -> CsvTable {
        let mut t = CsvTable::new(&HEATMAP_HEADER);
        for (a, &d) in self.degrees.iter().enumerate() {
            for (b, &f) in self.fractions.iter().enumerate() {
                t.push(vec![fmt_f64(d), fmt_f64(f), fmt_f64(self.value(a, b))]);
            }
        }
        t
    }
}

/// `n` integer degrees log-spaced over `[lo, hi]`, duplicates removed.
pub fn log_spaced_degrees(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    let mut out: Vec<f64> = (0..n)
        .map(|k| {
            let t = if n == 1 {
                0.0
            } else {
                k as f64 / (n - 1) as f64
            };
            (lo.ln() + t * (hi.ln() - lo.ln())).exp().round()
        })
        .collect();
    out.dedup();
    out
}

pub fn default_heatmap_degrees() -> Vec<f64> {
    log_spaced_degrees(1.0, 1000.0, 16)
}

pub fn default_heatmap_fractions() -> Vec<f64> {
    vec![
        0.0, 0.001, 0.002, 0.005, 0.01, 0.02, 0.03, 0.05, 0.1, 0.2, 0.5, 1.0,
    ]
}

/// Evaluates [`theorem1_expected_change`] at every `(degree, fraction)` cell, other parameters
/// taken from `base`.
pub fn heatmap_grid(
    base: &TheoryParams,
    degrees: &[f64],
    fractions: &[f64],
) -> Result<HeatmapGrid> {
    if degrees.is_empty() || fractions.is_empty() {
        return Err(Error::InvalidArgument(
            "heatmap ranges must be nonempty".into(),
        ));
    }
    let mut values = Vec::with_capacity(degrees.len() * fractions.len());
    for &d in degrees {
        for &f in fractions {
            let p = TheoryParams {
                degree: d,
                ..base.with_fraction(f)
            };
            values.push(theorem1_expected_change(&p)?);
        }
    }
    Ok(HeatmapGrid {
        degrees: degrees.to_vec(),
        fractions: fractions.to_vec(),
        values,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct OracleRow {
    pub degree: f64,
    pub batch_fraction: f64,
    pub closed_form: f64,
    pub mc_mean: f64,
    /// The larger of the sample standard error and [`null_stderr`].
    pub mc_stderr: f64,
    pub z_score: f64,
}

pub fn default_oracle_degrees() -> Vec<f64> {
    vec![1.0, 4.0, 16.0, 64.0, 256.0]
}

pub fn default_oracle_fractions() -> Vec<f64> {
    vec![0.001, 0.005, 0.01, 0.02, 0.05]
}

/// Standard error of the simulated mean if the closed form holds: the change
/// is the decay term plus the ranking term with probability `P`.
///
/// Floors the sample estimate, which collapses to rounding noise when `P` is
/// so close to 0 or 1 that no trial lands on the rare side.
pub fn null_stderr(p: &TheoryParams, trials: usize) -> f64 {
    let q = p.inclusion_probability();
    (q * (1.0 - q)).sqrt() * p.ranking_term().abs() / (trials as f64).sqrt()
}

/// Closed form against simulation on every grid cell. Cell `k` simulates
/// with seed `seed + k`.
pub fn oracle_grid(
    base: &TheoryParams,
    degrees: &[f64],
    fractions: &[f64],
    dim: usize,
    trials: usize,
    seed: u64,
) -> Result<Vec<OracleRow>> {
    let mut rows = Vec::with_capacity(degrees.len() * fractions.len());
    for &d in degrees {
        for &f in fractions {
            let p = TheoryParams {
                degree: d,
                ..base.with_fraction(f)
            };
            let closed = theorem1_expected_change(&p)?;
            let trace =
                monte_carlo_magnitude(&p, dim, trials, seed.wrapping_add(rows.len() as u64))?;
            let stderr = trace.stderr.max(null_stderr(&p, trials));
            rows.push(OracleRow {
                degree: d,
                batch_fraction: f,
                closed_form: closed,
                mc_mean: trace.mean_change,
                mc_stderr: stderr,
                z_score: z_score(closed, trace.mean_change, stderr),
            });
        }
    }
    Ok(rows)
}

pub fn oracle_csv(rows: &[OracleRow]) -> CsvTable {
    let mut t = CsvTable::new(&ORACLE_HEADER);
    for r in rows {
        t.push(
            [
                r.degree,
                r.batch_fraction,
                r.closed_form,
                r.mc_mean,
                r.mc_stderr,
                r.z_score,
            ]
            .iter()
            .map(|&v| fmt_f64(v))
            .collect(),
        );
    }
    t
}
