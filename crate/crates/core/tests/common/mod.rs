//! Helpers shared by the integration-test targets.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Exhaustive Otsu: try every split `<= t | > t` and keep the smallest `t`
/// with the largest between-class variance. Variances are compared exactly
/// as fractions `(s0·n1 − s1·n0)² / (n0·n1)` in 128-bit integers.
pub fn exhaustive_otsu(hist: &[u64; 256]) -> u8 {
    let n: u64 = hist.iter().sum();
    let s: u64 = hist.iter().enumerate().map(|(i, &c)| i as u64 * c).sum();
    let mut best: Option<(u128, u128, u8)> = None;
    for t in 0..256 {
        let n0: u64 = hist[..=t].iter().sum();
        let s0: u64 = hist[..=t].iter().enumerate().map(|(i, &c)| i as u64 * c).sum();
        let (n1, s1) = (n - n0, s - s0);
        if n0 == 0 || n1 == 0 {
            continue;
        }
        let diff = (s0 as i128 * n1 as i128 - s1 as i128 * n0 as i128).unsigned_abs();
        let (num, den) = (diff * diff, n0 as u128 * n1 as u128);
        // num/den > bnum/bden  <=>  num·bden > bnum·den
        if best.is_none_or(|(bn, bd, _)| num * bd > bn * den) {
            best = Some((num, den, t as u8));
        }
    }
    best.map(|b| b.2).unwrap_or_else(|| hist.iter().position(|&c| c > 0).unwrap_or(0) as u8)
}

/// Histograms of several shapes: dense uniform, sparse, bimodal and
/// single-spike.
pub fn random_histogram(rng: &mut ChaCha8Rng) -> [u64; 256] {
    let mut h = [0u64; 256];
    match rng.random_range(0..4) {
        0 => h.iter_mut().for_each(|c| *c = rng.random_range(0..1000)),
        1 => {
            for _ in 0..rng.random_range(1..8) {
                h[rng.random_range(0..256)] += rng.random_range(1..1000);
            }
        }
        2 => {
            let (a, b) = (rng.random_range(0..128), rng.random_range(128..256));
            for _ in 0..5000 {
                let centre: i32 = if rng.random_bool(0.4) { a } else { b };
                let v = (centre + rng.random_range(-30..=30)).clamp(0, 255);
                h[v as usize] += 1;
            }
        }
        _ => h[rng.random_range(0..256)] = rng.random_range(1..1000),
    }
    h
}

pub fn histograms(seed: u64, count: usize) -> Vec<[u64; 256]> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| random_histogram(&mut rng)).collect()
}

pub fn fixture(name: &str) -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}
