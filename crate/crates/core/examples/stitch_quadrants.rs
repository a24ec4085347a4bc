//! Cut a synthetic slide into four perturbed quadrants, stitch them back
//! with the positional oracle encoder and score the result.
//!
//! ```text
//! cargo run --release --example stitch_quadrants -- [seed] [gap_um]
//! ```

use semstitch::encoder::EncoderSpec;
use semstitch::harness::{covered_abs_diff, generate_synthetic_slide, run_trial, FragmentationSpec, Layout, PoseTolerance, SlideStyle};
use semstitch::mosaic::StitchConfig;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let seed: u64 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(1);
    let gap_um: f64 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(224.0);

    let slide = generate_synthetic_slide(seed, 2048, &SlideStyle::default())?;
    let spec = FragmentationSpec {
        layout: Layout::Quadrants,
        gap_um,
        edge_trim: (0.0, 0.2),
        rotation_deg: 180.0,
        translation_px: 40.0,
        seed,
        ..Default::default()
    };
    let cfg = StitchConfig { encoder: EncoderSpec::oracle(0.0, seed), output_mpp: 1.0, seed, ..Default::default() };

    let t0 = std::time::Instant::now();
    let trial = run_trial(&slide.image, &spec, &cfg, PoseTolerance::default())?;
    println!("stitched in {:.1?}", t0.elapsed());
    for m in &trial.outcome.manifest.merges {
        println!("merge {}: {:?} -> {:?}  inliers {}/{}", m.step, m.moving, m.fixed, m.inliers, m.candidates);
    }
    for s in &trial.seams {
        println!("seam {}-{}: matched={} error={:?}", s.a, s.b, s.matched, s.error);
    }
    println!("boundary-match rate: {:.1}%", trial.rate);
    if gap_um == 0.0 {
        println!("covered-pixel mean abs diff: {:.3}", covered_abs_diff(&trial.outcome, &trial.gt, &slide.image)?);
    }
    let out = std::env::temp_dir().join("semstitch_quadrants.png");
    trial.outcome.composite.save(&out)?;
    println!("composite written to {}", out.display());
    Ok(())
}
