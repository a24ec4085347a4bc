//! Embed boundary patches with the built-in encoders and compare the
//! similarity of neighbouring patches against distant ones.
//!
//! ```text
//! cargo run --release --example encode_patches -- [seed]
//! ```

use semstitch::contour::trace_boundary;
use semstitch::encoder::{encode_patches, EncoderSpec};
use semstitch::harness::{generate_synthetic_slide, SlideStyle};
use semstitch::patchex::{extract, plan_frames, Patch};
use semstitch::raster::{segment_tissue, SegmentOptions};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let seed: u64 = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(1);

    let slide = generate_synthetic_slide(seed, 1024, &SlideStyle { mpp: 1.0, ..Default::default() })?;
    let mask = segment_tissue(&slide.image, &SegmentOptions::default())?;
    let chain = trace_boundary(&mask)?;
    let frames = plan_frames(&chain, &mask, 224, 56.0);
    let patches: Vec<Patch> = frames.iter().map(|f| extract(&slide.image, f)).collect();
    let n = patches.len();
    println!("{n} patches");

    for spec in [EncoderSpec::Baseline { grid: 8 }, EncoderSpec::ncc(224)] {
        let feats = encode_patches(&spec, &patches, None)?;
        let adjacent = (0..n).map(|i| feats[i].cosine(&feats[(i + 1) % n])).sum::<f64>() / n as f64;
        let opposite = (0..n).map(|i| feats[i].cosine(&feats[(i + n / 2) % n])).sum::<f64>() / n as f64;
        println!("{:<8} dim {:>5}  adjacent {adjacent:.3}  opposite {opposite:.3}", spec.name(), feats[0].dim());
    }
    Ok(())
}
