//! Least-squares rigid fitting and RANSAC over point correspondences.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
pub use crate::geometry::RigidTransform;
use crate::geometry::{dist, Point};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RansacConfig {
    /// Residual bound for inliers, in processing-resolution pixels.
    pub inlier_threshold: f64,
    pub max_iterations: usize,
    /// Correspondences drawn per hypothesis.
    pub sample_size: usize,
    pub seed: u64,
    /// Smallest consensus set accepted.
    pub min_inliers: usize,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self { inlier_threshold: 500.0, max_iterations: 1000, sample_size: 6, seed: 42, min_inliers: 6 }
    }
}

impl RansacConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sample_size < 2 {
            return Err(Error::Config("RANSAC sample size must be >= 2".into()));
        }
        if !(self.inlier_threshold > 0.0) {
            return Err(Error::Config("RANSAC inlier threshold must be > 0".into()));
        }
        Ok(())
    }
}

/// Closed-form 2D Procrustes without scaling or reflection: minimises
/// `Σ‖R·srcᵢ + t − dstᵢ‖²`.
pub fn fit_rigid(src: &[Point], dst: &[Point]) -> Result<RigidTransform> {
    if src.len() != dst.len() {
        return Err(Error::Config(format!("{} source points vs {} targets", src.len(), dst.len())));
    }
    if src.len() < 2 {
        return Err(Error::DegenerateSample);
    }
    let n = src.len() as f64;
    let mean = |pts: &[Point]| {
        let s = pts.iter().fold([0.0, 0.0], |a, p| [a[0] + p[0], a[1] + p[1]]);
        [s[0] / n, s[1] / n]
    };
    let (ms, md) = (mean(src), mean(dst));
    let (mut a, mut b, mut spread) = (0.0, 0.0, 0.0);
    for (s, d) in src.iter().zip(dst) {
        let (x, y) = (s[0] - ms[0], s[1] - ms[1]);
        let (u, v) = (d[0] - md[0], d[1] - md[1]);
        a += x * u + y * v;
        b += x * v - y * u;
        spread += x * x + y * y;
    }
    let scale = ms[0].abs().max(ms[1].abs()).max(1.0);
    if spread <= (1e-12 * scale).powi(2) * n {
        return Err(Error::DegenerateSample);
    }
    let theta = b.atan2(a);
    let r = RigidTransform::new(theta, [0.0, 0.0]);
    let rm = r.rotate(ms);
    Ok(RigidTransform::new(theta, [md[0] - rm[0], md[1] - rm[1]]))
}

pub fn residual(model: &RigidTransform, src: Point, dst: Point) -> f64 {
    dist(model.apply(src), dst)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RansacOutcome {
    /// Least-squares refit on the inliers of the best hypothesis.
    pub model: RigidTransform,
    pub inliers: Vec<bool>,
    pub inlier_count: usize,
    /// Iteration that produced the best hypothesis.
    pub best_iteration: usize,
    /// Inlier counts of every executed hypothesis (0 for degenerate draws).
    pub iteration_inliers: Vec<usize>,
}

/// Sample indices for iteration `i`. Each iteration owns its own ChaCha
/// stream, so the draw does not depend on evaluation order.
pub fn sample_indices(seed: u64, iteration: usize, n: usize, k: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(iteration as u64);
    rand::seq::index::sample(&mut rng, n, k).into_vec()
}

fn inlier_mask(model: &RigidTransform, src: &[Point], dst: &[Point], threshold: f64) -> Vec<bool> {
    src.iter().zip(dst).map(|(&s, &d)| residual(model, s, d) <= threshold).collect()
}

fn select<T: Copy>(v: &[T], mask: &[bool]) -> Vec<T> {
    v.iter().zip(mask).filter(|(_, &m)| m).map(|(&x, _)| x).collect()
}

/// RANSAC rigid estimation from `src[i] ↦ dst[i]` correspondences.
pub fn ransac_rigid(src: &[Point], dst: &[Point], cfg: &RansacConfig) -> Result<RansacOutcome> {
    cfg.validate()?;
    if src.len() != dst.len() {
        return Err(Error::Config("correspondence lists differ in length".into()));
    }
    let n = src.len();
    if n < cfg.sample_size {
        return Err(Error::NoConsensus { best: n, required: cfg.sample_size });
    }
    let mut best: Option<(usize, usize, Vec<bool>)> = None;
    let mut counts = Vec::with_capacity(cfg.max_iterations);
    for it in 0..cfg.max_iterations {
        let idx = sample_indices(cfg.seed, it, n, cfg.sample_size);
        let s: Vec<Point> = idx.iter().map(|&i| src[i]).collect();
        let d: Vec<Point> = idx.iter().map(|&i| dst[i]).collect();
        let Ok(model) = fit_rigid(&s, &d) else {
            counts.push(0);
            continue;
        };
        let mask = inlier_mask(&model, src, dst, cfg.inlier_threshold);
        let c = mask.iter().filter(|&&m| m).count();
        counts.push(c);
        if best.as_ref().is_none_or(|(bc, _, _)| c > *bc) {
            best = Some((c, it, mask));
        }
    }
    let Some((count, best_iteration, inliers)) = best else {
        return Err(Error::NoConsensus { best: 0, required: cfg.min_inliers.max(2) });
    };
    if count < cfg.min_inliers.max(2) {
        return Err(Error::NoConsensus { best: count, required: cfg.min_inliers.max(2) });
    }
    let model = fit_rigid(&select(src, &inliers), &select(dst, &inliers))?;
    Ok(RansacOutcome { model, inlier_count: count, inliers, best_iteration, iteration_inliers: counts })
}

/// Tighten a RANSAC solution: repeatedly refit on correspondences within a
/// threshold that halves from `start_threshold` down to `final_threshold`.
/// Stops early when fewer than `min_points` survive.
pub fn refine_rigid(
    src: &[Point],
    dst: &[Point],
    initial: &RigidTransform,
    start_threshold: f64,
    final_threshold: f64,
    min_points: usize,
) -> (RigidTransform, Vec<bool>) {
    let mut model = *initial;
    let mut mask = inlier_mask(&model, src, dst, start_threshold);
    let mut tau = start_threshold;
    let min_points = min_points.max(2);
    let mut settle = 0;
    loop {
        let next_tau = (tau / 2.0).max(final_threshold);
        let cand = inlier_mask(&model, src, dst, next_tau);
        if cand.iter().filter(|&&m| m).count() < min_points {
            break;
        }
        let Ok(m) = fit_rigid(&select(src, &cand), &select(dst, &cand)) else {
            break;
        };
        let stable = cand == mask && next_tau == tau;
        model = m;
        mask = cand;
        tau = next_tau;
        if tau <= final_threshold {
            settle += 1;
            if stable || settle >= 10 {
                break;
            }
        }
    }
    (model, mask)
}
