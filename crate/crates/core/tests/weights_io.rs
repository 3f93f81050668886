use rapidnet::weights_io::{from_bytes, load, peek_dtype, save, to_bytes};
use rapidnet::reparam::reparameterize_model;
use rapidnet::verify::jitter_params;
use rapidnet::{build_model, default_config, DType, Error, Parameterized, RapidNetModel, Rng, Scalar};

fn micro<T: Scalar>() -> RapidNetModel<T> {
    let mut m = build_model::<T>(&default_config("micro").unwrap()).unwrap();
    jitter_params(&mut m, &mut Rng::new(1));
    m
}

fn bits<T: Scalar>(m: &RapidNetModel<T>) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    m.visit_params("", &mut |n, t, _| {
        let mut b = Vec::new();
        for &v in t.data() {
            v.write_le(&mut b);
        }
        out.push((n.to_string(), b));
    });
    out
}

#[test]
fn file_round_trip_is_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let m32 = micro::<f32>();
    let p32 = dir.path().join("m32.rpdn");
    save(&m32, &p32).unwrap();
    let back32 = load::<f32>(&p32).unwrap();
    assert_eq!(bits(&m32), bits(&back32));
    assert_eq!(back32.config, m32.config);

    let m64 = micro::<f64>();
    let p64 = dir.path().join("m64.rpdn");
    save(&m64, &p64).unwrap();
    assert_eq!(bits(&m64), bits(&load::<f64>(&p64).unwrap()));
    assert_eq!(peek_dtype(&std::fs::read(&p64).unwrap()).unwrap(), DType::F64);
}

#[test]
fn fused_models_round_trip() {
    let (fused, _) = reparameterize_model(&micro::<f32>()).unwrap();
    let back = from_bytes::<f32>(&to_bytes(&fused).unwrap()).unwrap();
    assert_eq!(back, fused);
}

#[test]
fn header_layout() {
    let bytes = to_bytes(&micro::<f32>()).unwrap();
    assert_eq!(&bytes[0..4], b"RPDN");
    assert_eq!(u16::from_le_bytes([bytes[4], bytes[5]]), 1);
    let len = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
    let cfg: serde_json::Value = serde_json::from_slice(&bytes[10..10 + len]).unwrap();
    assert_eq!(cfg["name"], "micro");
}

#[test]
fn corrupt_inputs() {
    let bytes = to_bytes(&micro::<f32>()).unwrap();
    let mut magic = bytes.clone();
    magic[..4].copy_from_slice(b"XXXX");
    assert!(matches!(from_bytes::<f32>(&magic), Err(Error::Format(_))));
    for cut in [3, 9, 40, bytes.len() / 2, bytes.len() - 1] {
        let r = from_bytes::<f32>(&bytes[..cut]);
        assert!(matches!(r, Err(Error::CorruptFile(_)) | Err(Error::Format(_))), "cut {cut}: {r:?}");
    }
    assert!(matches!(from_bytes::<f32>(&bytes[..bytes.len() - 1]), Err(Error::CorruptFile(_))));
    let mut version = bytes.clone();
    version[4..6].copy_from_slice(&7u16.to_le_bytes());
    assert!(matches!(from_bytes::<f32>(&version), Err(Error::Version(7))));
}

#[test]
fn renamed_entry_fails_integrity() {
    let bytes = to_bytes(&micro::<f32>()).unwrap();
    let needle = b"stem.conv1.weight";
    let pos = bytes.windows(needle.len()).position(|w| w == needle).unwrap();
    let mut renamed = bytes.clone();
    renamed[pos] = b'X';
    assert!(matches!(from_bytes::<f32>(&renamed), Err(Error::Integrity(_))));
}

#[test]
fn config_disagreeing_with_entries_fails_integrity() {
    let m = micro::<f32>();
    let mut other = m.config.clone();
    other.num_classes = 5;
    let bytes = to_bytes(&m).unwrap();
    let old = serde_json::to_vec(&m.config).unwrap();
    let new = serde_json::to_vec(&other).unwrap();
    assert_eq!(old.len(), new.len());
    let mut swapped = bytes.clone();
    swapped[10..10 + new.len()].copy_from_slice(&new);
    assert!(matches!(from_bytes::<f32>(&swapped), Err(Error::Integrity(_))));
}
