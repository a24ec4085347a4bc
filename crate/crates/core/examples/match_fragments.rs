//! Cut a slide into two halves, embed their boundary patches, and show the
//! strongest context-stack matches between them.
//!
//! ```text
//! cargo run --release --example match_fragments -- [seed] [neighborhood]
//! ```

use semstitch::encoder::EncoderSpec;
use semstitch::harness::{fragment_slide, generate_synthetic_slide, prepare_pool, FragmentationSpec, Layout, SlideStyle};
use semstitch::matching::{build_stacks, rank_fixed, FragmentStacks};
use semstitch::mosaic::StitchConfig;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let seed: u64 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(1);
    let radius: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(3);

    let slide = generate_synthetic_slide(seed, 1536, &SlideStyle::default())?;
    let spec = FragmentationSpec { layout: Layout::Halves, rotation_deg: 180.0, translation_px: 40.0, seed, ..Default::default() };
    let (images, gt) = fragment_slide(&slide.image, &spec)?;
    let cfg = StitchConfig { encoder: EncoderSpec::oracle(0.5, seed), neighborhood: radius, ..Default::default() };
    let pool = prepare_pool(&images, &gt, &cfg)?;

    let stacks = pool
        .iter()
        .enumerate()
        .map(|(id, f)| Ok(FragmentStacks { id, stacks: build_stacks(&f.features, radius)? }))
        .collect::<Result<Vec<_>, semstitch::error::Error>>()?;
    for f in &pool {
        println!("{}: {} frames", f.id, f.frames.len());
    }

    let best = &rank_fixed(0, &stacks)?[0];
    println!("fragment 0 pairs with {} (score {:.2})", pool[best.fixed_id].id, best.score);
    let mut top = best.matches.clone();
    top.sort_by(|a, b| b.similarity.total_cmp(&a.similarity));
    let (moving, fixed) = (&pool[0], &pool[best.fixed_id]);
    for m in top.iter().take(8) {
        let a = moving.frames[m.moving_index].anchor;
        let b = fixed.frames[m.fixed_index].anchor;
        println!(
            "  frame {:>3} ({:6.1},{:6.1}) -> frame {:>3} ({:6.1},{:6.1})  sim {:.3}{}",
            m.moving_index,
            a[0],
            a[1],
            m.fixed_index,
            b[0],
            b[1],
            m.similarity,
            if m.reversed { "  reversed" } else { "" }
        );
    }
    Ok(())
}
