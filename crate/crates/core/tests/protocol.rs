//! Golden SSPB/SSFV files written by `tests/fixtures/gen_fixtures.py`,
//! independently of this crate.

mod common;

use common::fixture;
use semstitch::cli::{cmd_encode, EncodeKind};
use semstitch::encoder::{FeatureBatch, PatchBatch};

fn read(name: &str) -> Vec<u8> {
    std::fs::read(fixture(name)).unwrap()
}

fn loopback(request: &str, dim: usize) -> Vec<u8> {
    let dir = tempfile::tempdir().unwrap();
    let resp = dir.path().join("features.bin");
    cmd_encode(&fixture(request), &resp, &EncodeKind::Loopback { dim }).unwrap();
    std::fs::read(resp).unwrap()
}

#[test]
fn small_request_decodes_and_re_encodes_bit_exact() {
    let bytes = read("sspb_small.bin");
    let batch = PatchBatch::from_bytes(&bytes).unwrap();
    assert_eq!((batch.count, batch.height, batch.width, batch.channels), (2, 4, 3, 3));
    assert_eq!(batch.data[..3], [11, 48, 85]);
    assert_eq!(batch.to_bytes().unwrap(), bytes);
}

#[test]
fn loopback_reply_matches_golden() {
    assert_eq!(loopback("sspb_small.bin", 4), read("ssfv_small_loopback.bin"));
}

#[test]
fn empty_batch_round_trips() {
    let req = read("sspb_empty.bin");
    let batch = PatchBatch::from_bytes(&req).unwrap();
    assert_eq!((batch.count, batch.height, batch.width, batch.channels), (0, 224, 224, 3));
    assert_eq!(batch.to_bytes().unwrap(), req);

    let reply = loopback("sspb_empty.bin", 1024);
    assert_eq!(reply, read("ssfv_empty.bin"));
    let f = FeatureBatch::from_bytes(&reply).unwrap();
    assert_eq!((f.count, f.dim), (0, 1024));
}

#[test]
fn max_header_round_trips() {
    let req = read("sspb_max_header.bin");
    let batch = PatchBatch::from_bytes(&req).unwrap();
    assert_eq!((batch.count, batch.height, batch.width, batch.channels), (u32::MAX as usize, 0, u32::MAX as usize, u32::MAX as usize));
    assert_eq!(batch.to_bytes().unwrap(), req);

    let golden = read("ssfv_max_header.bin");
    let f = FeatureBatch::from_bytes(&golden).unwrap();
    assert_eq!((f.count, f.dim), (u32::MAX as usize, 0));
    assert_eq!(f.to_bytes().unwrap(), golden);
    assert_eq!(loopback("sspb_max_header.bin", 0), golden);
}

#[test]
fn header_fields_beyond_u32_are_rejected() {
    let batch = PatchBatch { count: u32::MAX as usize + 1, height: 0, width: 1, channels: 1, data: Vec::new() };
    assert!(batch.to_bytes().is_err());
}

#[test]
fn malformed_files_are_rejected() {
    for name in ["bad_magic.bin", "truncated.bin", "ssfv_empty.bin"] {
        assert!(PatchBatch::from_bytes(&read(name)).is_err(), "{name}");
    }
    assert!(FeatureBatch::from_bytes(&read("sspb_small.bin")).is_err());
    let mut nan = read("ssfv_small_loopback.bin");
    nan[12..16].copy_from_slice(&f32::NAN.to_le_bytes());
    assert!(FeatureBatch::from_bytes(&nan).is_err());
}
