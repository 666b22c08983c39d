use hide_core::checkpoint;
use hide_core::codec::{self, latent_dims, CompressedImage};
use hide_core::corpus::procedural_image;
use hide_core::image::Image;
use hide_core::{Error, Model, ModelConfig, Variant};

fn small_config(variant: Variant) -> ModelConfig {
    ModelConfig {
        variant,
        m: 16,
        s: 4,
        hyper_channels: 8,
        c_ctx: 16,
        c_d: 16,
        n_g: 8,
        n_d: 8,
        heads: 2,
        backbone_channels: 8,
        ..ModelConfig::default()
    }
}

fn model(variant: Variant) -> Model<f32> {
    Model::new(small_config(variant)).unwrap()
}

#[test]
fn latent_dims_follow_stride() {
    assert_eq!(latent_dims(64, 64), ((4, 4), (1, 1)));
    assert_eq!(latent_dims(65, 33), ((5, 3), (2, 1)));
    assert_eq!(latent_dims(256, 128), ((16, 8), (4, 2)));
}

#[test]
fn round_trip_reproduces_encoder_values_for_every_variant() {
    for variant in Variant::ALL {
        let m = model(variant);
        let img = procedural_image(7, 0, 40, 56);
        let enc = codec::encode(&m, &img).unwrap();
        let bytes = enc.compressed.to_bytes();
        let parsed = CompressedImage::from_bytes(&bytes).unwrap();
        assert_eq!(parsed, enc.compressed);
        let (decoded, trace) = codec::decode(&m, &parsed).unwrap();
        assert_eq!(trace, enc.trace, "{variant:?}");
        assert_eq!(decoded, enc.reconstruction);
        assert_eq!((decoded.width, decoded.height, decoded.channels), (56, 40, 3));
    }
}

#[test]
fn grayscale_round_trip() {
    let m = model(Variant::Hide);
    let rgb = procedural_image(3, 1, 32, 32);
    let gray: Vec<u8> = rgb.data.chunks_exact(3).map(|p| p[1]).collect();
    let img = Image::new(32, 32, 1, gray).unwrap();
    let enc = codec::encode(&m, &img).unwrap();
    let (decoded, trace) = codec::decode(&m, &enc.compressed).unwrap();
    assert_eq!(decoded.channels, 1);
    assert_eq!(decoded, enc.reconstruction);
    assert_eq!(trace, enc.trace);
}

#[test]
fn actual_bits_within_stream_overhead_of_estimate() {
    let m = model(Variant::Hide);
    for i in 0..3 {
        let img = procedural_image(11, i, 48, 48);
        let enc = codec::encode(&m, &img).unwrap();
        let actual = enc.compressed.stream_bits() as f64;
        let est = enc.estimated_bits();
        let slack = 64.0 * (m.config.s as f64 + 1.0);
        assert!(actual >= est - 1e-6, "actual {actual} < estimate {est}");
        assert!(actual <= est + slack, "actual {actual} > estimate {est} + {slack}");
    }
}

#[test]
fn hash_mismatch_is_refused() {
    let a = model(Variant::Hide);
    let mut cfg = small_config(Variant::Hide);
    cfg.seed = 1;
    let b = Model::<f32>::new(cfg).unwrap();
    let enc = codec::encode(&a, &procedural_image(1, 0, 16, 16)).unwrap();
    match codec::decode(&b, &enc.compressed) {
        Err(Error::ModelMismatch(msg)) => assert!(msg.contains(&codec::hex(&a.hash()))),
        other => panic!("expected a mismatch error, got {other:?}"),
    }
}

#[test]
fn truncated_and_corrupt_files_error() {
    let m = model(Variant::Hide);
    let enc = codec::encode(&m, &procedural_image(2, 0, 32, 32)).unwrap();
    let bytes = enc.compressed.to_bytes();
    for cut in [1, 5, bytes.len() / 2, bytes.len() - 1] {
        assert!(CompressedImage::from_bytes(&bytes[..cut]).is_err(), "prefix of {cut} bytes parsed");
    }
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(CompressedImage::from_bytes(&extra).is_err());
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(CompressedImage::from_bytes(&bad).is_err());

    // A stream cut short inside one slice fails in the range decoder.
    let mut short = enc.compressed.clone();
    let last = short.slice_streams.last_mut().unwrap();
    if last.len() > 1 {
        last.truncate(1);
        assert!(codec::decode(&m, &short).is_err());
    }
}

#[test]
fn header_layout_is_stable() {
    let c = CompressedImage {
        width: 0x0102,
        height: 0x0304,
        channels: 3,
        model_hash: [1, 2, 3, 4, 5, 6, 7, 8],
        lambda_index: 1,
        z_stream: vec![0xaa],
        slice_streams: vec![vec![0xbb, 0xcc], vec![]],
    };
    let expected: Vec<u8> = [
        &b"HIDB"[..],
        &[1, 0],
        &[0x02, 0x01, 0, 0],
        &[0x04, 0x03, 0, 0],
        &[3],
        &[1, 2, 3, 4, 5, 6, 7, 8],
        &[1],
        &[2],
        &[1, 0, 0, 0, 0xaa],
        &[2, 0, 0, 0, 0xbb, 0xcc],
        &[0, 0, 0, 0],
    ]
    .concat();
    assert_eq!(c.to_bytes(), expected);
    assert_eq!(CompressedImage::from_bytes(&expected).unwrap(), c);
}

#[test]
fn checkpoint_round_trip_preserves_hash_and_output() {
    let m = model(Variant::Cape);
    let bytes = checkpoint::to_bytes(&m);
    let back = checkpoint::from_bytes::<f32>(&bytes).unwrap();
    assert_eq!(back.hash(), m.hash());
    assert_eq!(back.config, m.config);
    assert_eq!(checkpoint::to_bytes(&back), bytes);
    let img = procedural_image(5, 0, 16, 16);
    let enc = codec::encode(&m, &img).unwrap();
    let (decoded, _) = codec::decode(&back, &enc.compressed).unwrap();
    assert_eq!(decoded, enc.reconstruction);
}

#[test]
fn checkpoint_rejects_wrong_precision_and_damage() {
    let m = model(Variant::Baseline);
    let bytes = checkpoint::to_bytes(&m);
    assert!(checkpoint::from_bytes::<f64>(&bytes).is_err());
    assert!(checkpoint::from_bytes::<f32>(&bytes[..bytes.len() - 1]).is_err());
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(checkpoint::from_bytes::<f32>(&extra).is_err());
    assert_eq!(checkpoint::read_config(&bytes).unwrap(), m.config);
}

#[test]
fn variants_differ_only_in_declared_modules() {
    let names = |v| {
        let m = model(v);
        let mut n: Vec<String> = m.store.iter().map(|(_, p)| p.name.clone()).collect();
        n.sort();
        n
    };
    let shared = |n: &String| n.starts_with("g_a.") || n.starts_with("g_s.") || n.starts_with("h_") || n.starts_with("prior.") || n.contains(".agg_");
    let base = names(Variant::Baseline);
    for v in [Variant::Hd, Variant::Cape, Variant::Hide] {
        let other = names(v);
        let common_base: Vec<_> = base.iter().filter(|n| shared(n)).collect();
        let common_other: Vec<_> = other.iter().filter(|n| shared(n)).collect();
        assert_eq!(common_base, common_other, "{v:?}");
    }
    let has = |v, pat: &str| names(v).iter().any(|n| n.contains(pat));
    assert!(has(Variant::Hd, ".hdca.") && !has(Variant::Hd, ".branch"));
    assert!(has(Variant::Cape, ".branch") && !has(Variant::Cape, ".hdca."));
    assert!(has(Variant::Hide, ".hdca.") && has(Variant::Hide, ".branch"));
    assert!(has(Variant::Baseline, ".dca.") && !has(Variant::Baseline, ".branch"));
}
