//! Round-trip patches through the external-encoder file protocol: write an
//! SSPB request, answer it with the loopback encoder, read the SSFV reply.
//! With SEMSTITCH_BRIDGE set, the same patches also go through that command.
//!
//! ```text
//! cargo run --release --example loopback_bridge
//! SEMSTITCH_BRIDGE="semstitch encode --kind loopback --dim 16" cargo run --release --example loopback_bridge
//! ```

use semstitch::encoder::{
    encode_patches, loopback_features, read_features, read_request, write_features, write_request, EncoderSpec,
    PatchBatch, BRIDGE_ENV,
};
use semstitch::harness::{generate_synthetic_slide, SlideStyle};
use semstitch::patchex::{extract, PatchFrame};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let slide = generate_synthetic_slide(3, 512, &SlideStyle { mpp: 1.0, ..Default::default() })?;
    let patches: Vec<_> = (0..4)
        .map(|i| {
            let c = 128.0 + 80.0 * i as f64;
            let frame = PatchFrame {
                center: [c, c],
                tangent: [1.0, 0.0],
                normal: [0.0, 1.0],
                size: 32,
                boundary_index: 0,
                anchor: [c, c],
            };
            extract(&slide.image, &frame)
        })
        .collect();

    let dir = std::env::temp_dir().join("semstitch_loopback");
    std::fs::create_dir_all(&dir)?;
    let (req, resp) = (dir.join("patches.bin"), dir.join("features.bin"));
    write_request(&req, &PatchBatch::from_patches(&patches, (32, 32, 3))?)?;
    println!("request: {} bytes", std::fs::metadata(&req)?.len());

    let batch = read_request(&req)?;
    write_features(&resp, &loopback_features(&batch, 8))?;
    let features = read_features(&resp)?;
    for i in 0..features.count {
        println!("  patch {i}: mean byte {:.2}", features.row(i)[0]);
    }

    if std::env::var_os(BRIDGE_ENV).is_some() {
        let spec = EncoderSpec::External { command: String::new(), dim: 16, patch_size: 32 };
        let feats = encode_patches(&spec, &patches, Some(&dir))?;
        println!("bridge returned {} vectors of dim {}", feats.len(), feats[0].dim());
    }
    Ok(())
}
