//! Seam-match accuracy of several encoders as the removed strip between
//! two halves widens, before and after alignment.
//!
//! ```text
//! cargo run --release --example gap_sweep -- [seeds] [out.csv]
//! ```

use semstitch::encoder::EncoderSpec;
use semstitch::harness::{generate_synthetic_slide, match_accuracy_vs_gap, SlideStyle};
use semstitch::mosaic::StitchConfig;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let n_seeds: u64 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(3);
    let out = args.next();

    let slide = generate_synthetic_slide(7, 1536, &SlideStyle::default())?;
    let cfg = StitchConfig::default();
    let encoders = [EncoderSpec::oracle(0.0, 1), EncoderSpec::Baseline { grid: 8 }, EncoderSpec::ncc(cfg.patch_size)];
    let gaps = [0.0, 100.0, 250.0, 500.0, 900.0];
    let seeds: Vec<u64> = (1..=n_seeds).collect();

    let report = match_accuracy_vs_gap(&slide.image, &encoders, &gaps, &seeds, &cfg)?;
    for r in report.rows.iter().filter(|r| r.metric.contains("correct")) {
        println!("{:>8} um  {:<24} {:.3} ± {:.3} (n={})", r.value, r.metric, r.mean, r.std, r.n);
    }
    if let Some(path) = out {
        report.write_csv(path.as_ref())?;
        println!("report written to {path}");
    }
    Ok(())
}
