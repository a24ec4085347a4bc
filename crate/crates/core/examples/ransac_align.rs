//! Recover a rigid transform from correspondences contaminated with gross
//! outliers.
//!
//! ```text
//! cargo run --release --example ransac_align -- [outlier_fraction]
//! ```

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use semstitch::align::{ransac_rigid, RansacConfig};
use semstitch::geometry::{Point, RigidTransform};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let outliers: f64 = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(0.5);
    let truth = RigidTransform::new(37f64.to_radians(), [420.0, -135.0]);
    let mut rng = ChaCha8Rng::seed_from_u64(7);

    let (mut src, mut dst) = (Vec::<Point>::new(), Vec::<Point>::new());
    for _ in 0..200 {
        let p = [rng.random_range(0.0..2000.0), rng.random_range(0.0..2000.0)];
        let q = if rng.random_bool(outliers) {
            [rng.random_range(-3000.0..3000.0), rng.random_range(-3000.0..3000.0)]
        } else {
            let t = truth.apply(p);
            [t[0] + rng.random_range(-2.0..2.0), t[1] + rng.random_range(-2.0..2.0)]
        };
        src.push(p);
        dst.push(q);
    }

    let cfg = RansacConfig { inlier_threshold: 10.0, ..Default::default() };
    let fit = ransac_rigid(&src, &dst, &cfg)?;
    let (angle, shift) = fit.model.error_to(&truth);
    println!("inliers {}/{} (best hypothesis at iteration {})", fit.inlier_count, src.len(), fit.best_iteration);
    println!("estimated θ {:.3}°, t ({:.2}, {:.2})", fit.model.theta_degrees(), fit.model.translation[0], fit.model.translation[1]);
    println!("error vs truth: {angle:.4}° rotation, {shift:.3} px translation");
    Ok(())
}
