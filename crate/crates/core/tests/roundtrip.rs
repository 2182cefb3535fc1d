mod common;

use std::sync::Arc;

use incalign::io::{decode_model, encode_model, load_model, save_model, FORMAT_VERSION};
use incalign::synth::generate_sequence;
use incalign::{AdaptMode, Error, InitBox, SharedModels, SynthConfig, Tracker, TrackerConfig};

#[test]
fn container_round_trip_is_lossless() {
    let m = common::small_models();
    let bytes = encode_model(m);
    let back = decode_model(&bytes).unwrap();
    assert_eq!(&back, m);
    assert_eq!(encode_model(&back), bytes);
}

#[test]
fn flipped_payload_byte_fails_the_checksum() {
    let mut bytes = encode_model(common::small_models());
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x40;
    assert!(matches!(decode_model(&bytes), Err(Error::Integrity(_))));
}

#[test]
fn truncated_container_is_rejected() {
    let bytes = encode_model(common::small_models());
    assert!(matches!(decode_model(&bytes[..bytes.len() - 3]), Err(Error::Integrity(_))));
}

#[test]
fn other_versions_and_formats_are_rejected() {
    let mut bytes = encode_model(common::small_models());
    bytes[8..12].copy_from_slice(&(FORMAT_VERSION + 1).to_le_bytes());
    assert!(matches!(decode_model(&bytes), Err(Error::Version { found, expected }) if found == FORMAT_VERSION + 1 && expected == FORMAT_VERSION));
    bytes[0] = b'X';
    assert!(matches!(decode_model(&bytes), Err(Error::UnsupportedFormat(_))));
}

#[test]
fn adapted_models_survive_save_and_load() {
    let seq = generate_sequence(&SynthConfig { frames: 8, drift_rate: 0.02, seed: 3, ..SynthConfig::default() }).unwrap();
    let shared = Arc::new(SharedModels::new(common::small_models().clone()));
    let mut t = Tracker::new(shared.clone(), TrackerConfig { adapt: AdaptMode::Both, buffer_size: 3, ..TrackerConfig::default() }).unwrap();
    for (img, truth) in &seq[..7] {
        t.process_frame(img.clone(), Some(InitBox::around(truth)), None).unwrap();
    }
    assert!(t.state().adaptations() > 0);
    let adapted = shared.snapshot();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("adapted.bin");
    save_model(&path, &adapted).unwrap();
    let loaded = load_model(&path).unwrap();
    assert_eq!(&loaded, adapted.as_ref());

    let (img, truth) = &seq[7];
    let cfg = TrackerConfig { adapt: AdaptMode::None, ..TrackerConfig::default() };
    let mut a = Tracker::new(Arc::new(SharedModels::new((*adapted).clone())), cfg.clone()).unwrap();
    let mut b = Tracker::new(Arc::new(SharedModels::new(loaded)), cfg).unwrap();
    let ra = a.process_frame(img.clone(), Some(InitBox::around(truth)), Some(truth)).unwrap();
    let rb = b.process_frame(img.clone(), Some(InitBox::around(truth)), Some(truth)).unwrap();
    assert_eq!(ra.shape, rb.shape);
    assert_eq!(ra.confidence.map(f64::to_bits), rb.confidence.map(f64::to_bits));
}
