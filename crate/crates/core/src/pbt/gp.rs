//! Gaussian-process model over (configuration, training time) used by the
//! model-based explore step.
//!
//! The kernel is a product of squared exponentials over the unit-cube
//! configuration and over normalized time. Targets are lower-is-better, so
//! the acquisition is `-mean + kappa * std`.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::space::{ConfigSpace, Configuration, SpaceError};

pub const CANDIDATES: usize = 1000;
pub const MAX_POINTS: usize = 100;
const JITTERS: [f64; 5] = [1e-8, 1e-7, 1e-6, 1e-5, 1e-4];
const NOISE_RATIOS: [f64; 3] = [1e-6, 1e-3, 1e-1];
const NOISE_FLOOR: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GpError {
    #[error("the model needs at least {needed} points, got {got}")]
    TooFewPoints { needed: usize, got: usize },
    #[error("covariance matrix stayed singular up to jitter 1e-4")]
    Singular,
    #[error(transparent)]
    Space(#[from] SpaceError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct GpPoint {
    pub x: Vec<f64>,
    /// Normalized training time in [0, 1].
    pub t: f64,
    pub y: f64,
    /// Points from warmstart runs survive kernel restarts.
    pub warmstart: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelParams {
    pub config_length: f64,
    pub time_length: f64,
    pub signal_var: f64,
    pub noise_var: f64,
}

impl KernelParams {
    fn k(&self, a: &[f64], ta: f64, b: &[f64], tb: f64) -> f64 {
        let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
        let dt = ta - tb;
        self.signal_var
            * (-0.5 * d2 / (self.config_length * self.config_length)).exp()
            * (-0.5 * dt * dt / (self.time_length * self.time_length)).exp()
    }
}

#[derive(Debug, Clone)]
pub struct GpModel {
    xs: Vec<Vec<f64>>,
    ts: Vec<f64>,
    params: KernelParams,
    y_mean: f64,
    alpha: DVector<f64>,
    chol: Cholesky<f64, Dyn>,
    /// Jitter that was needed on top of the noise.
    pub jitter: f64,
    pub log_likelihood: f64,
}

impl GpModel {
    /// Fits with fixed kernel parameters, escalating jitter if the
    /// covariance is numerically singular.
    pub fn fit_with(points: &[GpPoint], params: KernelParams) -> Result<Self, GpError> {
        if points.is_empty() {
            return Err(GpError::TooFewPoints { needed: 1, got: 0 });
        }
        let n = points.len();
        let y_mean = points.iter().map(|p| p.y).sum::<f64>() / n as f64;
        let y = DVector::from_iterator(n, points.iter().map(|p| p.y - y_mean));
        let base = DMatrix::from_fn(n, n, |i, j| {
            params.k(&points[i].x, points[i].t, &points[j].x, points[j].t)
        });
        let noise = params.noise_var.max(NOISE_FLOOR);
        for jitter in JITTERS {
            let mut k = base.clone();
            for i in 0..n {
                k[(i, i)] += noise + jitter;
            }
            let Some(chol) = k.cholesky() else { continue };
            let alpha = chol.solve(&y);
            let log_det: f64 = chol.l_dirty().diagonal().iter().take(n).map(|d| d.ln()).sum::<f64>() * 2.0;
            let log_likelihood = -0.5 * y.dot(&alpha) - 0.5 * log_det - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln();
            if !log_likelihood.is_finite() {
                continue;
            }
            return Ok(Self {
                xs: points.iter().map(|p| p.x.clone()).collect(),
                ts: points.iter().map(|p| p.t).collect(),
                params,
                y_mean,
                alpha,
                chol,
                jitter,
                log_likelihood,
            });
        }
        Err(GpError::Singular)
    }

    pub fn params(&self) -> KernelParams {
        self.params
    }

    pub fn len(&self) -> usize {
        self.xs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xs.is_empty()
    }

    /// Posterior mean and variance of the latent function.
    pub fn predict(&self, x: &[f64], t: f64) -> (f64, f64) {
        let k = DVector::from_iterator(
            self.xs.len(),
            self.xs.iter().zip(&self.ts).map(|(xi, ti)| self.params.k(x, t, xi, *ti)),
        );
        let mean = self.y_mean + k.dot(&self.alpha);
        let v = self.chol.l().solve_lower_triangular(&k).expect("cholesky factor is triangular");
        let var = (self.params.signal_var - v.dot(&v)).max(0.0);
        (mean, var)
    }

    /// Upper confidence bound on improvement for a lower-is-better target.
    pub fn ucb(&self, x: &[f64], t: f64, kappa: f64) -> f64 {
        let (mean, var) = self.predict(x, t);
        -mean + kappa * var.sqrt()
    }
}

fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| (lo.ln() + (hi.ln() - lo.ln()) * i as f64 / (n - 1) as f64).exp())
        .collect()
}

/// Fits the kernel by maximizing the marginal likelihood over a grid of 5
/// configuration length scales, 5 time length scales (both log-spaced in
/// `[0.05, 2] * scale`) and 3 noise levels. The signal variance is the
/// sample variance of the targets. Uses at most the newest
/// [`MAX_POINTS`] points.
pub fn gp_fit(points: &[GpPoint], scale: f64) -> Result<GpModel, GpError> {
    if points.len() < 2 {
        return Err(GpError::TooFewPoints { needed: 2, got: points.len() });
    }
    let points = &points[points.len().saturating_sub(MAX_POINTS)..];
    let n = points.len() as f64;
    let mean = points.iter().map(|p| p.y).sum::<f64>() / n;
    let var = points.iter().map(|p| (p.y - mean).powi(2)).sum::<f64>() / n;
    let signal_var = if var > 1e-12 { var } else { 1.0 };
    let lengths = log_grid(0.05 * scale, 2.0 * scale, 5);
    let mut best: Option<GpModel> = None;
    for &config_length in &lengths {
        for &time_length in &lengths {
            for ratio in NOISE_RATIOS {
                let params = KernelParams { config_length, time_length, signal_var, noise_var: ratio * signal_var };
                let Ok(model) = GpModel::fit_with(points, params) else { continue };
                if best.as_ref().is_none_or(|b| model.log_likelihood > b.log_likelihood) {
                    best = Some(model);
                }
            }
        }
    }
    best.ok_or(GpError::Singular)
}

/// Uniform candidate vectors in the unit cube.
pub fn candidate_points(rng: &mut ChaCha8Rng, count: usize, dimension: usize) -> Vec<Vec<f64>> {
    (0..count)
        .map(|_| (0..dimension).map(|_| rng.random::<f64>()).collect())
        .collect()
}

/// Index of the candidate with the highest acquisition value (first on
/// ties).
pub fn best_candidate(model: &GpModel, t: f64, candidates: &[Vec<f64>], kappa: f64) -> usize {
    let mut best = 0;
    let mut best_score = f64::NEG_INFINITY;
    for (i, c) in candidates.iter().enumerate() {
        let score = model.ucb(c, t, kappa);
        if score > best_score {
            best = i;
            best_score = score;
        }
    }
    best
}

/// Scores [`CANDIDATES`] uniform candidates and decodes the best one.
pub fn gp_suggest(
    model: Option<&GpModel>,
    t: f64,
    space: &ConfigSpace,
    rng: &mut ChaCha8Rng,
    kappa: f64,
) -> Result<Configuration, GpError> {
    let model = model.ok_or(GpError::TooFewPoints { needed: 2, got: 0 })?;
    let candidates = candidate_points(rng, CANDIDATES, space.dimension());
    let i = best_candidate(model, t, &candidates, kappa);
    Ok(space.from_unit(&candidates[i])?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeding::rng_from;

    fn point(x: f64, y: f64) -> GpPoint {
        GpPoint { x: vec![x], t: 0.0, y, warmstart: false }
    }

    #[test]
    fn identical_points_interpolate() {
        let pts = vec![point(0.3, 2.5), point(0.3, 2.5)];
        let params = KernelParams { config_length: 0.2, time_length: 1.0, signal_var: 1.0, noise_var: 1e-8 };
        let m = GpModel::fit_with(&pts, params).unwrap();
        assert!((m.predict(&[0.3], 0.0).0 - 2.5).abs() < 1e-6);
        let m = gp_fit(&pts, 1.0).unwrap();
        assert!((m.predict(&[0.3], 0.0).0 - 2.5).abs() < 1e-6);
    }

    #[test]
    fn prior_reversion_far_from_data() {
        let pts: Vec<GpPoint> = (0..6).map(|i| point(i as f64 * 0.1, (i as f64).sin())).collect();
        let m = gp_fit(&pts, 1.0).unwrap();
        let (_, var) = m.predict(&[100.0], 0.0);
        let s = m.params().signal_var;
        assert!((var - s).abs() <= 0.01 * s);
    }

    #[test]
    fn duplicate_inputs_with_zero_noise_use_jitter() {
        let pts = vec![point(0.5, 1.0), point(0.5, 1.0), point(0.5, 1.0)];
        let params = KernelParams { config_length: 0.5, time_length: 1.0, signal_var: 1.0, noise_var: 0.0 };
        let m = GpModel::fit_with(&pts, params).unwrap();
        assert!(m.jitter >= 1e-8);
    }

    #[test]
    fn fit_needs_two_points() {
        assert_eq!(gp_fit(&[point(0.1, 0.0)], 1.0).unwrap_err(), GpError::TooFewPoints { needed: 2, got: 1 });
        let space: ConfigSpace = "x: (0, 1)".parse().unwrap();
        assert!(gp_suggest(None, 0.0, &space, &mut rng_from(&[0]), 1.0).is_err());
    }

    #[test]
    fn caps_history_length() {
        let pts: Vec<GpPoint> = (0..150).map(|i| point((i % 37) as f64 / 37.0, (i as f64 * 0.3).sin())).collect();
        let m = gp_fit(&pts, 1.0).unwrap();
        assert_eq!(m.len(), MAX_POINTS);
    }
}
