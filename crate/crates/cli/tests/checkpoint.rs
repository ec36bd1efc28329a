use hmcseg::model::{build_architecture, init_weights, ModelConfig};
use hmcseg::protocol::config_hash_u64;
use hmcseg_cli::checkpoint::{
    decode, encode, load_checkpoint, load_weights, save_checkpoint, CheckpointError, CheckpointHeader, VERSION,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};

fn header(hash: u64) -> CheckpointHeader {
    CheckpointHeader {
        config_hash: hash,
        epoch: 41,
        cycle: 1,
        eta: 0.0123,
        temperature: 1e-5,
        lambda: 3e-5,
        seed: 7,
    }
}

fn bits(v: &[f32]) -> Vec<u32> {
    v.iter().map(|x| x.to_bits()).collect()
}

#[test]
fn random_vectors_roundtrip_bit_exact() {
    let mut rng = rand::rngs::StdRng::seed_from_u64(3);
    for i in 0..100 {
        let n = rng.random_range(0..2000);
        let w: Vec<f32> = (0..n).map(|_| f32::from_bits(rng.random())).collect();
        let h = CheckpointHeader {
            epoch: i,
            eta: rng.random(),
            ..header(rng.random())
        };
        let (h2, w2) = decode(&encode(&w, &h)).unwrap();
        assert_eq!(h2, h);
        assert_eq!(bits(&w2), bits(&w));
    }
}

#[test]
fn file_roundtrip_through_model_layout() {
    let cfg = ModelConfig {
        levels: 2,
        base_channels: 4,
        dropout_sites: [1].into(),
        ..ModelConfig::default()
    };
    let model = build_architecture(&cfg).unwrap();
    let w = init_weights(&model, 5);
    let hash = config_hash_u64(&cfg);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("w.sghc");
    save_checkpoint(&path, &w, &header(hash)).unwrap();
    let (h, back) = load_weights(&path, model.layout(), hash).unwrap();
    assert_eq!(h, header(hash));
    assert_eq!(bits(back.values()), bits(w.values()));

    let err = load_weights(&path, model.layout(), hash ^ 1).unwrap_err();
    assert!(matches!(err, CheckpointError::HashMismatch { .. }), "{err}");
    assert!(load_checkpoint(&path, None).is_ok());

    let other = build_architecture(&ModelConfig {
        levels: 2,
        base_channels: 2,
        dropout_sites: [1].into(),
        ..ModelConfig::default()
    })
    .unwrap();
    let err = load_weights(&path, other.layout(), hash).unwrap_err();
    assert!(matches!(err, CheckpointError::Length { .. }), "{err}");
}

#[test]
fn corrupt_files_are_rejected() {
    let good = encode(&[1.0, -2.5, 3.25], &header(9));
    assert!(decode(&good).is_ok());

    for cut in [0, 3, 10, good.len() - 5, good.len() - 1] {
        let err = decode(&good[..cut]).unwrap_err();
        assert!(matches!(err, CheckpointError::Truncated { .. }), "cut {cut}: {err}");
    }

    let mut v2 = good.clone();
    v2[4..6].copy_from_slice(&(VERSION + 1).to_le_bytes());
    assert!(matches!(
        decode(&v2).unwrap_err(),
        CheckpointError::UnsupportedVersion { found } if found == VERSION + 1
    ));

    let mut flipped = good.clone();
    let at = good.len() - 6;
    flipped[at] ^= 0x10;
    assert!(matches!(decode(&flipped).unwrap_err(), CheckpointError::Crc { .. }));

    let mut magic = good.clone();
    magic[0] = b'X';
    assert!(matches!(decode(&magic).unwrap_err(), CheckpointError::BadMagic));

    let mut long = good.clone();
    long.push(0);
    assert!(matches!(decode(&long).unwrap_err(), CheckpointError::Trailing(1)));

    // a huge declared length must not be trusted
    let mut huge = good;
    huge[66..74].copy_from_slice(&u64::MAX.to_le_bytes());
    assert!(matches!(decode(&huge).unwrap_err(), CheckpointError::Truncated { .. }));
}

proptest! {
    #[test]
    fn any_payload_roundtrips(raw in proptest::collection::vec(any::<u32>(), 0..300), epoch in any::<u64>(), eta in any::<f64>()) {
        let w: Vec<f32> = raw.iter().map(|&b| f32::from_bits(b)).collect();
        let h = CheckpointHeader { epoch, eta, ..header(1) };
        let (h2, w2) = decode(&encode(&w, &h)).unwrap();
        prop_assert_eq!(bits(&w2), raw);
        prop_assert_eq!(h2.epoch, epoch);
        prop_assert_eq!(h2.eta.to_bits(), eta.to_bits());
    }

    #[test]
    fn single_byte_damage_never_decodes_silently(pos in 0usize..86, bit in 0u8..8) {
        let w = [0.5f32, 1.5, -3.0, 8.0];
        let h = header(2);
        let good = encode(&w, &h);
        let mut bad = good.clone();
        bad[pos] ^= 1 << bit;
        match decode(&bad) {
            Err(_) => {}
            // header fields other than magic, version and length carry no checksum
            Ok((h2, w2)) => {
                prop_assert!((6..66).contains(&pos));
                prop_assert_eq!(bits(&w2), bits(&w));
                prop_assert_ne!(h2, h);
            }
        }
    }
}
