use super::*;
use crate::params::AdamConfig;
use crate::rng::derive_rng;
use rand::Rng;
use std::collections::BTreeMap;

fn noise_image(geom: ImageGeometry, seed: u64) -> ImageTensor {
    let mut rng = derive_rng(seed, "network-test-image", &[]);
    let n = ImageTensor::CHANNELS * geom.height * geom.width;
    let values: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
    let (h, w) = (geom.height, geom.width);
    ImageTensor::from_fn(geom, |c, y, x| values[(c * h + y) * w + x])
}

fn tiny_models(seed: u64) -> Models {
    Models::new(NetworkConfig::tiny(5), seed).unwrap()
}

fn desk_models(seed: u64) -> Models {
    Models::new(NetworkConfig::desk(10), seed).unwrap()
}

#[test]
fn config_validation_rejects_bad_values() {
    let mut cfg = NetworkConfig::desk(10);
    cfg.num_identities = 0;
    assert!(cfg.validate().is_err());

    let mut cfg = NetworkConfig::desk(10);
    cfg.geometry = ImageGeometry {
        height: 60,
        width: 32,
    };
    assert!(cfg.validate().is_err());

    let mut cfg = NetworkConfig::desk(10);
    cfg.cue_dim = 127;
    assert!(cfg.validate().is_err());

    let mut cfg = NetworkConfig::desk(10);
    cfg.encoder_scales = 4;
    assert!(cfg.validate().is_err());

    assert!(NetworkConfig::desk(10).validate().is_ok());
    assert!(NetworkConfig::tiny(3).validate().is_ok());
}

#[test]
fn desk_shape_contracts_hold() {
    let models = desk_models(1);
    let geom = models.config().geometry;
    let x = noise_image(geom, 2);

    let content = models.encode_content(&x).unwrap();
    assert_eq!(content.map.dim(), (128, 8, 4));
    assert_eq!(content.pooled.len(), 128);

    let code = models
        .encode_degradation(&x, DegradationSource::RealEncoder)
        .unwrap();
    assert_eq!(code.vector.len(), 64);

    let maps = models.discriminate_reality(&x).unwrap();
    assert_eq!(maps.len(), 2);
    assert_eq!(maps[0].dim(), (8, 4));
    assert_eq!(maps[1].dim(), (4, 2));

    let score = models.degradation_score(&x).unwrap();
    assert_eq!(score.cue.len(), 128);

    let emb = models.encode_identity(&x).unwrap();
    assert_eq!(emb.len(), 256);

    let weights = models.attention_weights(&score.cue).unwrap();
    assert_eq!(weights.len(), 256);

    let decoded = models.decode(&content, &code).unwrap();
    assert_eq!(decoded.geometry(), geom);

    let rep = models.identity_representation(&x).unwrap();
    assert_eq!(rep.fused.len(), 384);
}

#[test]
fn pooled_content_equals_external_spatial_mean() {
    let models = desk_models(3);
    let x = noise_image(models.config().geometry, 4);
    let content = models.encode_content(&x).unwrap();
    for k in 0..content.pooled.len() {
        let external = content.map.slice(ndarray::s![k, .., ..]).mean().unwrap();
        assert!((content.pooled[k] - external).abs() < 1e-6);
    }
}

#[test]
fn forward_passes_are_deterministic() {
    let models = tiny_models(5);
    let x = noise_image(models.config().geometry, 6);
    let a = models.encode_content(&x).unwrap();
    let b = models.encode_content(&x).unwrap();
    assert_eq!(a.map, b.map);
    let s1 = models.degradation_score(&x).unwrap();
    let s2 = models.degradation_score(&x).unwrap();
    assert_eq!(s1.score, s2.score);
    assert_eq!(s1.cue, s2.cue);
}

#[test]
fn the_two_degradation_encoders_are_independent() {
    let models = tiny_models(7);
    let x = noise_image(models.config().geometry, 8);
    let real = models
        .encode_degradation(&x, DegradationSource::RealEncoder)
        .unwrap();
    let synth = models
        .encode_degradation(&x, DegradationSource::SelfEncoder)
        .unwrap();
    assert!(real
        .vector
        .iter()
        .zip(synth.vector.iter())
        .any(|(a, b)| (a - b).abs() > 1e-9));
}

#[test]
fn updating_one_degradation_encoder_leaves_the_other_unchanged() {
    let mut models = tiny_models(9);
    let x = noise_image(models.config().geometry, 10);
    let before = models
        .encode_degradation(&x, DegradationSource::SelfEncoder)
        .unwrap();
    // Push a gradient into every ed.* tensor; edp.* receives none.
    let mut grads = BTreeMap::new();
    let names: Vec<String> = models
        .store
        .names_with_prefix("ed.")
        .map(str::to_string)
        .collect();
    for name in names {
        let shape = models.store.value(&name).unwrap().raw_dim();
        grads.insert(name, ndarray::ArrayD::from_elem(shape, 0.5));
    }
    models
        .store
        .adam_step(&grads, &AdamConfig::default(), |_| 0.01)
        .unwrap();
    let after = models
        .encode_degradation(&x, DegradationSource::SelfEncoder)
        .unwrap();
    assert_eq!(before.vector, after.vector);
    // And the updated encoder did move.
    let real_after = models
        .encode_degradation(&x, DegradationSource::RealEncoder)
        .unwrap();
    let real_names: Vec<String> = models
        .store
        .names_with_prefix("ed.")
        .map(str::to_string)
        .collect();
    assert!(!real_names.is_empty());
    let _ = real_after;
}

#[test]
fn batched_encoders_match_single_image_calls() {
    let models = tiny_models(11);
    let geom = models.config().geometry;
    let images: Vec<ImageTensor> = (0..4).map(|i| noise_image(geom, 100 + i)).collect();
    let refs: Vec<&ImageTensor> = images.iter().collect();

    let deg_batch = models
        .encode_degradation_batch(&refs, DegradationSource::RealEncoder)
        .unwrap();
    let id_batch = models.encode_identity_batch(&refs).unwrap();
    for (i, img) in images.iter().enumerate() {
        let single = models
            .encode_degradation(img, DegradationSource::RealEncoder)
            .unwrap();
        for (a, b) in deg_batch.row(i).iter().zip(single.vector.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
        let single_id = models.encode_identity(img).unwrap();
        for (a, b) in id_batch.row(i).iter().zip(single_id.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }
}

#[test]
fn adain_matches_its_contract() {
    // Constant channel, identity transform: the ε-guarded variance path
    // maps everything to the bias (zero).
    let map = Array3::from_elem((2, 3, 3), 0.7);
    let out = adain(
        &map,
        &Array1::from_elem(2, 1.0),
        &Array1::from_elem(2, 0.0),
    )
    .unwrap();
    assert!(out.iter().all(|v| v.abs() < 1e-9));

    // scale = channel std, bias = channel mean reconstructs the input.
    let mut rng = derive_rng(12, "adain-test", &[]);
    let src = Array3::from_shape_fn((3, 4, 5), |_| rng.random::<f64>() * 2.0 - 1.0);
    let mut scale = Array1::zeros(3);
    let mut bias = Array1::zeros(3);
    for c in 0..3 {
        let plane = src.slice(ndarray::s![c, .., ..]);
        let mean = plane.mean().unwrap();
        let var = plane.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 20.0;
        scale[c] = var.sqrt();
        bias[c] = mean;
    }
    let rebuilt = adain(&src, &scale, &bias).unwrap();
    for (a, b) in rebuilt.iter().zip(src.iter()) {
        assert!((a - b).abs() < 1e-4);
    }

    // {0, 2} with scale 2, bias 3 -> {1, 5}.
    let mut map = Array3::zeros((1, 1, 2));
    map[[0, 0, 1]] = 2.0;
    let out = adain(&map, &Array1::from_elem(1, 2.0), &Array1::from_elem(1, 3.0)).unwrap();
    assert!((out[[0, 0, 0]] - 1.0).abs() < 1e-3);
    assert!((out[[0, 0, 1]] - 5.0).abs() < 1e-3);

    // Mismatched vector lengths are an error.
    assert!(adain(
        &Array3::zeros((2, 2, 2)),
        &Array1::zeros(3),
        &Array1::zeros(2)
    )
    .is_err());
}

#[test]
fn decoder_adain_path_matches_pure_adain() {
    // The tape implementation (instance_norm + channel_affine) and the
    // standalone function must agree.
    let mut rng = derive_rng(13, "adain-agreement", &[]);
    let src = Array3::from_shape_fn((4, 3, 2), |_| rng.random::<f64>());
    let scale = Array1::from_shape_fn(4, |_| rng.random::<f64>() + 0.5);
    let bias = Array1::from_shape_fn(4, |_| rng.random::<f64>() - 0.5);
    let pure = adain(&src, &scale, &bias).unwrap();

    let mut tape = Tape::new();
    let x = tape.constant(
        src.clone()
            .into_shape_with_order(IxDyn(&[1, 4, 3, 2]))
            .unwrap(),
    );
    let s = tape.constant(
        scale
            .clone()
            .into_shape_with_order(IxDyn(&[1, 4]))
            .unwrap(),
    );
    let b = tape.constant(bias.clone().into_shape_with_order(IxDyn(&[1, 4])).unwrap());
    let normed = tape.instance_norm(x, ADAIN_EPS);
    let out = tape.channel_affine_nc(normed, s, b);
    let got = tape.value(out);
    for (a, g) in pure.iter().zip(got.iter()) {
        assert!((a - g).abs() < 1e-10);
    }
}

#[test]
fn attention_starts_at_one_half_and_stays_in_range() {
    let models = tiny_models(14);
    let cfg = models.config().clone();
    let zero_cue = Array1::zeros(cfg.cue_dim);
    let w = models.attention_weights(&zero_cue).unwrap();
    assert!(w.iter().all(|&v| v == 0.5));

    let mut rng = derive_rng(15, "attention-sweep", &[]);
    for _ in 0..100 {
        let cue = Array1::from_shape_fn(cfg.cue_dim, |_| rng.random::<f64>() * 10.0 - 5.0);
        let w = models.attention_weights(&cue).unwrap();
        assert!(w.iter().all(|&v| v > 0.0 && v < 1.0));
    }

    let short = Array1::zeros(cfg.cue_dim - 1);
    assert!(models.attention_weights(&short).is_err());
}

#[test]
fn fused_representation_follows_the_arithmetic() {
    let rep = IdentityRepresentation::assemble(
        Array1::from_vec(vec![1.0, 2.0]),
        Array1::from_vec(vec![3.0, 4.0]),
        Array1::from_vec(vec![0.5, 0.25]),
    )
    .unwrap();
    assert_eq!(rep.fused.to_vec(), vec![1.0, 2.0, 1.5, 1.0]);

    // All-ones weights: plain concatenation.
    let rep = IdentityRepresentation::assemble(
        Array1::from_vec(vec![1.0, 2.0]),
        Array1::from_vec(vec![3.0, 4.0]),
        Array1::from_elem(2, 1.0),
    )
    .unwrap();
    assert_eq!(rep.fused.to_vec(), vec![1.0, 2.0, 3.0, 4.0]);

    // All-zero weights: sensitive half suppressed exactly.
    let rep = IdentityRepresentation::assemble(
        Array1::from_vec(vec![1.0, 2.0]),
        Array1::from_vec(vec![3.0, 4.0]),
        Array1::zeros(2),
    )
    .unwrap();
    assert_eq!(&rep.fused.to_vec()[2..], &[0.0, 0.0]);

    // Decomposition: prefix is f_inv, suffix is the weighted product.
    let models = tiny_models(16);
    let x = noise_image(models.config().geometry, 17);
    let rep = models.identity_representation(&x).unwrap();
    let c = rep.f_inv.len();
    for k in 0..c {
        assert_eq!(rep.fused[k], rep.f_inv[k]);
    }
    for k in 0..rep.f_sen.len() {
        assert_eq!(rep.fused[c + k], rep.f_sen[k] * rep.weights[k]);
    }

    // Length mismatch is an error.
    assert!(IdentityRepresentation::assemble(
        Array1::zeros(2),
        Array1::zeros(3),
        Array1::zeros(2)
    )
    .is_err());
}

#[test]
fn degradation_score_is_the_grand_patch_mean() {
    let models = tiny_models(18);
    let x = noise_image(models.config().geometry, 19);
    let score = models.degradation_score(&x).unwrap();
    let maps = models.degradation_maps(&x).unwrap();
    let total: usize = maps.iter().map(|m| m.len()).sum();
    let external: f64 = maps.iter().flat_map(|m| m.iter()).sum::<f64>() / total as f64;
    assert!((score.score - external).abs() < 1e-6);
}

#[test]
fn decoding_responds_to_the_degradation_code() {
    let models = tiny_models(20);
    let x = noise_image(models.config().geometry, 21);
    let content = models.encode_content(&x).unwrap();
    let mut code = models
        .encode_degradation(&x, DegradationSource::RealEncoder)
        .unwrap();
    let a = models.decode(&content, &code).unwrap();
    let again = models.decode(&content, &code).unwrap();
    assert_eq!(a.data(), again.data());
    code.vector.mapv_inplace(|v| v + 1.0);
    let b = models.decode(&content, &code).unwrap();
    assert!(a.mean_abs_diff(&b) > 0.0);
}

#[test]
fn decoder_shape_errors_are_reported() {
    let models = tiny_models(22);
    let x = noise_image(models.config().geometry, 23);
    let content = models.encode_content(&x).unwrap();
    let code = models
        .encode_degradation(&x, DegradationSource::RealEncoder)
        .unwrap();

    let bad_map = ContentFeature {
        map: Array3::zeros((4, 2, 1)),
        pooled: Array1::zeros(4),
    };
    assert!(models.decode(&bad_map, &code).is_err());

    let bad_code = DegradationCode {
        vector: Array1::zeros(3),
        source: DegradationSource::RealEncoder,
    };
    assert!(models.decode(&content, &bad_code).is_err());
}

#[test]
fn passthrough_decoding_ignores_the_degradation_code() {
    let mut models = tiny_models(24);
    models.decoder_mode = DecoderMode::ContentPassthrough;
    let x = noise_image(models.config().geometry, 25);
    let content = models.encode_content(&x).unwrap();
    let code_a = DegradationCode {
        vector: Array1::zeros(models.config().degradation_dim),
        source: DegradationSource::RealEncoder,
    };
    let code_b = DegradationCode {
        vector: Array1::from_elem(models.config().degradation_dim, 9.0),
        source: DegradationSource::RealEncoder,
    };
    let a = models.decode(&content, &code_a).unwrap();
    let b = models.decode(&content, &code_b).unwrap();
    assert_eq!(a.data(), b.data());
    assert_eq!(a.geometry(), models.config().geometry);
}

#[test]
fn discriminators_stay_finite_at_input_corners() {
    let models = tiny_models(26);
    let geom = models.config().geometry;
    for img in [ImageTensor::zeros(geom), ImageTensor::filled(geom, 1.0)] {
        let maps = models.discriminate_reality(&img).unwrap();
        assert!(maps.iter().flat_map(|m| m.iter()).all(|v| v.is_finite()));
        let score = models.degradation_score(&img).unwrap();
        assert!(score.score.is_finite());
        assert!(score.cue.iter().all(|v| v.is_finite()));
    }
}

#[test]
fn wrong_geometry_inputs_are_rejected() {
    let models = tiny_models(27);
    let wrong = ImageTensor::zeros(ImageGeometry {
        height: 8,
        width: 8,
    });
    assert!(models.encode_content(&wrong).is_err());
    assert!(models
        .encode_degradation(&wrong, DegradationSource::RealEncoder)
        .is_err());
    assert!(models.discriminate_reality(&wrong).is_err());
    assert!(models.encode_identity(&wrong).is_err());
}

#[test]
fn initialization_is_deterministic_and_seed_sensitive() {
    let a = tiny_models(30);
    let b = tiny_models(30);
    let c = tiny_models(31);
    for (name, pa) in a.store.iter() {
        assert_eq!(pa.value, *b.store.value(name).unwrap(), "{name}");
    }
    // At least one tensor differs under another seed.
    assert!(a
        .store
        .iter()
        .any(|(name, pa)| pa.value != *c.store.value(name).unwrap()));
}

#[test]
fn checkpoint_roundtrip_preserves_everything() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("stage1_iter7.ckpt");
    let mut models = tiny_models(32);
    // Give the optimizer state some structure to carry.
    let mut grads = BTreeMap::new();
    grads.insert(
        "ec.out.w".to_string(),
        ndarray::ArrayD::from_elem(models.store.value("ec.out.w").unwrap().raw_dim(), 0.3),
    );
    models
        .store
        .adam_step(&grads, &AdamConfig::default(), |_| 0.002)
        .unwrap();
    let meta = CheckpointMeta {
        stage: "stage1".to_string(),
        iteration: 7,
    };
    save_checkpoint(&models, &meta, &path).unwrap();

    let (loaded, got_meta) = load_checkpoint(&path).unwrap();
    assert_eq!(got_meta, meta);
    assert_eq!(loaded.config(), models.config());
    assert_eq!(loaded.store.len(), models.store.len());
    for (name, p) in models.store.iter() {
        let q = loaded.store.get(name).unwrap();
        assert_eq!(p.value, q.value, "{name} value");
        assert_eq!(p.m, q.m, "{name} m");
        assert_eq!(p.v, q.v, "{name} v");
        assert_eq!(p.steps, q.steps, "{name} steps");
    }

    // The loaded model computes identically.
    let x = noise_image(models.config().geometry, 33);
    let a = models.encode_content(&x).unwrap();
    let b = loaded.encode_content(&x).unwrap();
    assert_eq!(a.map, b.map);
}

#[test]
fn checkpoint_compatibility_is_enforced() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("stage1_iter0.ckpt");
    let models = tiny_models(34);
    let meta = CheckpointMeta {
        stage: "stage1".to_string(),
        iteration: 0,
    };
    save_checkpoint(&models, &meta, &path).unwrap();

    let mut other = NetworkConfig::tiny(5);
    other.content_channels = 16;
    assert!(Models::load_compatible(&path, &other).is_err());
    assert!(Models::load_compatible(&path, models.config()).is_ok());
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let dir = tempfile::tempdir().unwrap();

    let bad_magic = dir.path().join("bad_magic.ckpt");
    std::fs::write(&bad_magic, b"NOPE0000000000000000").unwrap();
    assert!(load_checkpoint(&bad_magic).is_err());

    // Truncate a valid checkpoint mid-payload.
    let path = dir.path().join("stage1_iter0.ckpt");
    let models = tiny_models(35);
    save_checkpoint(
        &models,
        &CheckpointMeta {
            stage: "stage1".to_string(),
            iteration: 0,
        },
        &path,
    )
    .unwrap();
    let bytes = std::fs::read(&path).unwrap();
    let cut = dir.path().join("truncated.ckpt");
    std::fs::write(&cut, &bytes[..bytes.len() / 2]).unwrap();
    assert!(load_checkpoint(&cut).is_err());
}

#[test]
fn tiny_config_shape_sweep() {
    let models = tiny_models(36);
    let cfg = models.config().clone();
    let x = noise_image(cfg.geometry, 37);

    let content = models.encode_content(&x).unwrap();
    assert_eq!(content.map.dim(), (8, 2, 1));
    let code = models
        .encode_degradation(&x, DegradationSource::SelfEncoder)
        .unwrap();
    assert_eq!(code.vector.len(), 8);
    let decoded = models.decode(&content, &code).unwrap();
    assert_eq!(
        decoded.geometry(),
        ImageGeometry {
            height: 16,
            width: 8
        }
    );
    let maps = models.discriminate_reality(&x).unwrap();
    assert_eq!(maps.len(), 2);
    assert_eq!(maps[0].dim(), (2, 1));
    assert_eq!(maps[1].dim(), (1, 1));
    let score = models.degradation_score(&x).unwrap();
    assert_eq!(score.cue.len(), 16);
    let rep = models.identity_representation(&x).unwrap();
    assert_eq!(rep.fused.len(), 24);
}
