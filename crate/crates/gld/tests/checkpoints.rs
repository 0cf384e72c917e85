use std::collections::BTreeMap;

use candle_core::DType;
use gld::geoenc::{images_tensor, GeoEncoder, GeoEncoderConfig};
use gld::latent::{compute_latent_stats, load_stats, save_stats};
use gld::mvdiff::{DiffusionConfig, DiffusionModel};
use gld::rgbdec::{RgbDecoder, RgbDecoderConfig};
use gld::GldError;
use gld_core::scene::generate_scene;
use gld_core::{LevelMask, MultiViewSequence, SceneSpec};

fn small_geo(seed: u64) -> GeoEncoder {
    let cfg = GeoEncoderConfig {
        channels: 16,
        heads: 2,
        head_width: 8,
        ..GeoEncoderConfig::toy()
    };
    GeoEncoder::new(cfg, 16, 16, seed).unwrap()
}

fn scene(seed: u64) -> MultiViewSequence {
    generate_scene(&SceneSpec {
        seed,
        image_width: 16,
        image_height: 16,
        n_views: 4,
        ..SceneSpec::default()
    })
    .unwrap()
}

fn tiny_diffusion(level: usize) -> DiffusionConfig {
    DiffusionConfig {
        enc_width: 16,
        enc_blocks: 1,
        dec_width: 16,
        dec_blocks: 1,
        heads: 2,
        mlp_ratio: 2,
        ..DiffusionConfig::toy(level, false)
    }
}

fn assert_bitwise_eq(a: &candle_core::Tensor, b: &candle_core::Tensor) {
    let a: Vec<f32> = a.flatten_all().unwrap().to_vec1().unwrap();
    let b: Vec<f32> = b.flatten_all().unwrap().to_vec1().unwrap();
    assert_eq!(a.len(), b.len());
    assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn encoder_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("geo.safetensors");
    let geo = small_geo(3);
    let extra = BTreeMap::from([("config_hash".to_string(), "abc".to_string())]);
    let fp = geo.save(&path, extra).unwrap();
    assert_eq!(fp, geo.fingerprint().unwrap());

    let loaded = GeoEncoder::load(&path).unwrap();
    assert_eq!(loaded.fingerprint().unwrap(), fp);
    assert_eq!(loaded.config, geo.config);

    let seq = scene(1);
    let imgs = images_tensor(&seq, &[0, 1, 2], DType::F32).unwrap();
    let a = geo.encode_multiview(&imgs).unwrap();
    let b = loaded.encode_multiview(&imgs).unwrap();
    for (x, y) in a.levels.iter().zip(&b.levels) {
        assert_bitwise_eq(x, y);
    }
    let ck = gld::params::load_checkpoint(&path).unwrap();
    assert_eq!(ck.get_meta("config_hash").unwrap(), "abc");
}

#[test]
fn decoder_round_trip_and_parent_check() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("dec.safetensors");
    let geo = small_geo(0);
    let cfg = RgbDecoderConfig {
        width: 16,
        n_blocks: 1,
        heads: 2,
        mlp_ratio: 2,
        ..RgbDecoderConfig::toy()
    };
    let dec = RgbDecoder::new(cfg, &geo, 7).unwrap();
    dec.save(&path, BTreeMap::new()).unwrap();

    let loaded = RgbDecoder::load(&path, &geo).unwrap();
    let seq = scene(2);
    let feats = geo.encode_sequence(&seq, &[0, 1]).unwrap();
    let a = dec.forward(&feats.levels, LevelMask::ALL).unwrap();
    let b = loaded.forward(&feats.levels, LevelMask::ALL).unwrap();
    assert_bitwise_eq(&a, &b);

    let other = small_geo(1);
    assert!(matches!(
        RgbDecoder::load(&path, &other),
        Err(GldError::FingerprintMismatch { .. })
    ));
}

#[test]
fn diffusion_round_trip_checks_encoder_and_stats() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mvdiff.safetensors");
    let geo = small_geo(0);
    let seqs = vec![scene(4)];
    let stats = compute_latent_stats(&geo, &seqs, 4).unwrap();
    let model = DiffusionModel::new(tiny_diffusion(2), &geo, &stats.corpus_id, 5).unwrap();
    let fp = model.save(&path, BTreeMap::new()).unwrap();

    let loaded = DiffusionModel::load(&path, &geo, &stats).unwrap();
    assert_eq!(loaded.store.checksum().unwrap(), fp);
    assert_eq!(loaded.config, model.config);

    let other_geo = small_geo(9);
    assert!(matches!(
        DiffusionModel::load(&path, &other_geo, &stats),
        Err(GldError::FingerprintMismatch { .. })
    ));
    let other_stats = compute_latent_stats(&geo, &[scene(5)], 4).unwrap();
    assert!(matches!(
        DiffusionModel::load(&path, &geo, &other_stats),
        Err(GldError::FingerprintMismatch { .. })
    ));
}

#[test]
fn wrong_kind_and_missing_file_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("geo.safetensors");
    let geo = small_geo(0);
    geo.save(&path, BTreeMap::new()).unwrap();
    assert!(matches!(RgbDecoder::load(&path, &geo), Err(GldError::Format { .. })));
    assert!(GeoEncoder::load(&dir.path().join("absent.safetensors")).is_err());
}

#[test]
fn statistics_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("stats.json");
    let geo = small_geo(0);
    let stats = compute_latent_stats(&geo, &[scene(6)], 4).unwrap();
    save_stats(&path, &stats).unwrap();
    assert_eq!(load_stats(&path).unwrap(), stats);
    assert!(matches!(
        load_stats(&dir.path().join("none.json")),
        Err(GldError::MissingAsset(_))
    ));
}
