//! Trace a fragment's outer boundary and lay square patches along it,
//! each shifted into the tissue along the inward normal.
//!
//! ```text
//! cargo run --release --example plan_patches -- [seed] [stride]
//! ```

use semstitch::contour::trace_boundary;
use semstitch::harness::{generate_synthetic_slide, SlideStyle};
use semstitch::patchex::{anchor_spacing, extract, plan_frames};
use semstitch::raster::{segment_tissue, SegmentOptions};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let seed: u64 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(1);
    let stride: f64 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(112.0);

    let slide = generate_synthetic_slide(seed, 1024, &SlideStyle { mpp: 1.0, ..Default::default() })?;
    let mask = segment_tissue(&slide.image, &SegmentOptions::default())?;
    let chain = trace_boundary(&mask)?;
    println!(
        "boundary: {} points, perimeter {:.1} px, signed area {:.0} px²",
        chain.len(),
        chain.perimeter(),
        chain.signed_area()
    );

    let frames = plan_frames(&chain, &mask, 224, stride);
    let spacing = anchor_spacing(&chain, &frames);
    let mean = spacing.iter().sum::<f64>() / spacing.len().max(1) as f64;
    println!("{} frames, mean anchor spacing {mean:.1} px (target {stride})", frames.len());
    for f in frames.iter().take(5) {
        let p = extract(&slide.image, f);
        let tissue = p.gray().iter().filter(|&&g| g < 200.0).count() as f64 / (p.size() * p.size()) as f64;
        println!(
            "  anchor ({:7.1},{:7.1})  normal ({:+.2},{:+.2})  center ({:7.1},{:7.1})  tissue {:.0}%",
            f.anchor[0], f.anchor[1], f.normal[0], f.normal[1], f.center[0], f.center[1], 100.0 * tissue
        );
    }
    Ok(())
}
