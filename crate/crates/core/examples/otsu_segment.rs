//! Segment a synthetic slide with Otsu's threshold and compare the mask to
//! the silhouette the generator painted.
//!
//! ```text
//! cargo run --release --example otsu_segment -- [seed] [mask.png]
//! ```

use semstitch::harness::{generate_synthetic_slide, SlideStyle};
use semstitch::raster::{otsu_threshold, segment_tissue, Raster, SegmentOptions};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let seed: u64 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(1);
    let out = args.next();

    let slide = generate_synthetic_slide(seed, 1024, &SlideStyle::default())?;
    let t = otsu_threshold(&slide.image);
    let mask = segment_tissue(&slide.image, &SegmentOptions::default())?;
    let area = (mask.width * mask.height) as f64;
    println!("otsu threshold: {t}");
    println!("tissue fraction: {:.3} (painted {:.3})", mask.count() as f64 / area, slide.mask.count() as f64 / area);
    println!("IoU against painted silhouette: {:.4}", mask.iou(&slide.mask));

    if let Some(path) = out {
        let pixels = mask.bits.iter().map(|&m| if m { 255 } else { 0 }).collect();
        Raster::new(mask.width, mask.height, 1, pixels, slide.image.mpp)?.save(path.as_ref())?;
        println!("mask written to {path}");
    }
    Ok(())
}
