//! Byte-level format of bias-field array files, pinned by a checked-in
//! fixture and an independent encoder.

use std::path::Path;

use sha2::{Digest, Sha256};

use acelab::analysis::{BiasField, BiasKind};
use acelab::error::Error;
use acelab::io::{decode_array, encode_array, import_array};
use acelab::tensor::Tensor3;

const FIXTURE: &str = "tests/fixtures/eps_adv_2x1x2.acearr";

fn field() -> BiasField {
    BiasField {
        kind: BiasKind::EpsAdv,
        data: Tensor3::from_vec(2, 1, 2, vec![1.5, -0.25, 1e-300, f64::MAX]).unwrap(),
        timesteps: vec![100, 900],
        mc_samples: 64,
        sources: vec!["ab".into()],
    }
}

/// Little-endian layout written out by hand: magic, u16 version, dtype tag,
/// reserved byte, u32 metadata length, JSON metadata, f64 payload, SHA-256.
fn oracle_bytes() -> Vec<u8> {
    let meta = br#"{"shape":[2,1,2],"kind":"eps_adv","timesteps":[100,900],"mc_samples":64,"sources":["ab"]}"#;
    let mut b = b"ACEARR".to_vec();
    b.extend_from_slice(&[1, 0, 1, 0]);
    b.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    b.extend_from_slice(meta);
    for v in [1.5f64, -0.25, 1e-300, f64::MAX] {
        b.extend_from_slice(&v.to_bits().to_le_bytes());
    }
    let digest = Sha256::digest(&b);
    b.extend_from_slice(&digest);
    b
}

fn fixture() -> Vec<u8> {
    std::fs::read(Path::new(env!("CARGO_MANIFEST_DIR")).join(FIXTURE)).unwrap()
}

#[test]
fn fixture_matches_independent_encoding() {
    assert_eq!(fixture(), oracle_bytes());
}

#[test]
fn encoder_reproduces_fixture() {
    assert_eq!(encode_array(&field()).unwrap(), fixture());
}

#[test]
fn decoder_reads_fixture() {
    assert_eq!(decode_array(&fixture()).unwrap(), field());
    assert_eq!(import_array(&Path::new(env!("CARGO_MANIFEST_DIR")).join(FIXTURE)).unwrap(), field());
}

#[test]
fn corrupted_payload_fails_checksum() {
    let mut b = fixture();
    let n = b.len();
    b[n - 40] ^= 1;
    assert!(matches!(decode_array(&b), Err(Error::Checksum(_))));
}

#[test]
fn unknown_version_is_a_format_error() {
    let mut b = fixture();
    b.truncate(b.len() - 32);
    b[6] = 2;
    let digest = Sha256::digest(&b);
    b.extend_from_slice(&digest);
    assert!(matches!(decode_array(&b), Err(Error::Format(_))));
}
