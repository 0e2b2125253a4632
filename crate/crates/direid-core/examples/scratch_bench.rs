//! Scratch timing probe (deleted before release).

use std::time::Instant;

use direid_core::data::DatasetManifest;
use direid_core::degrade::{
    apply_degradation, sample_degradation_param, Degradation, DegradationKind, SelfDegradedPair,
};
use direid_core::networks::{Models, NetworkConfig};
use direid_core::rng::{derive_rng, mix_seed};
use direid_core::synthetic::build_synthetic_dataset;
use direid_core::train::{
    sample_labeled_batch, sample_pair_batch, DdganTrainer, DfenTrainer, TrainConfig, TrainStage,
};
use direid_core::eval::AttentionMode;

fn cosine(a: &ndarray::Array1<f64>, b: &ndarray::Array1<f64>) -> f64 {
    let dot = a.dot(b);
    let na = a.dot(a).sqrt();
    let nb = b.dot(b).sqrt();
    dot / (na * nb)
}

fn init_cosine(models: &Models, data: &DatasetManifest, deg: &Degradation, seed: u64) -> f64 {
    let mut rng = derive_rng(seed, "probe.pairs", &[]);
    let mut total = 0.0;
    let mut n = 0usize;
    for idx in 0..data.len().min(40) {
        let clean = data.load_image(idx).unwrap();
        let param = sample_degradation_param(deg, &mut rng);
        let degraded = apply_degradation(deg.kind, &clean, param).unwrap();
        let fa = models.encode_content(&clean).unwrap().pooled;
        let fb = models.encode_content(&degraded).unwrap().pooled;
        total += cosine(&fa, &fb);
        n += 1;
    }
    total / n as f64
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let mode = args.get(1).map(|s| s.as_str()).unwrap_or("all");

    let dir = std::env::temp_dir().join("direid-bench-corpus");
    let geom = direid_core::image::ImageGeometry {
        height: 64,
        width: 32,
    };
    let t = Instant::now();
    let data = if dir.join("manifest.csv").exists() {
        direid_core::data::load_manifest(&dir.join("manifest.csv")).unwrap()
    } else {
        build_synthetic_dataset(100, 8, 2, 1, &dir, geom).unwrap()
    };
    println!("corpus ready in {:?} ({} images)", t.elapsed(), data.len());

    let net = NetworkConfig::desk(data.num_identities());
    let deg = Degradation::with_default_range(DegradationKind::Illumination);

    if mode == "all" || mode == "cosine" {
        let models = Models::new(net.clone(), mix_seed(7, "stage1.init", &[])).unwrap();
        let t = Instant::now();
        let c = init_cosine(&models, &data, &deg, 7);
        println!("init cosine (illumination): {c:.4} in {:?}", t.elapsed());
        let deg_r = Degradation::with_default_range(DegradationKind::Resolution);
        let cr = init_cosine(&models, &data, &deg_r, 7);
        println!("init cosine (resolution):   {cr:.4}");
    }

    if mode == "all" || mode == "ddgan" {
        for batch in [4usize, 8] {
            let mut cfg = TrainConfig::for_stage(TrainStage::Ddgan);
            cfg.batch_size = batch;
            cfg.seed = 7;
            let models = Models::new(net.clone(), mix_seed(7, "stage1.init", &[])).unwrap();
            let mut trainer = DdganTrainer::new(models, cfg.clone()).unwrap();
            let mut rng = derive_rng(7, "bench.batch", &[0]);
            let batch_data = sample_pair_batch(&data, &cfg, &mut rng).unwrap();
            let aux: Vec<&direid_core::image::ImageTensor> = batch_data.aux_reals();
            let t = Instant::now();
            let reps = 3;
            for _ in 0..reps {
                trainer.self_step(&batch_data.self_pairs, &aux).unwrap();
                trainer.cross_step(&batch_data.real_pairs).unwrap();
            }
            println!(
                "ddgan alternation, batch {batch}: {:?} per iteration",
                t.elapsed() / reps
            );
        }
    }

    if mode == "all" || mode == "stage02" {
        let mut cfg = TrainConfig::for_stage(TrainStage::PretrainId);
        cfg.batch_size = 8;
        let models = Models::new(net.clone(), mix_seed(7, "stage0.init", &[])).unwrap();
        let mut rng = derive_rng(7, "bench.stage0", &[0]);
        let batch = sample_labeled_batch(&data, 8, &mut rng).unwrap();
        // time a pretrain-like step via DfenTrainer? pretrain is internal;
        // approximate with identity-embedding forward/backward via dfen.
        let mut cfg2 = TrainConfig::for_stage(TrainStage::Dfen);
        cfg2.batch_size = 8;
        let mut trainer = DfenTrainer::new(models, cfg2, AttentionMode::Learned).unwrap();
        let t = Instant::now();
        let reps = 3;
        for _ in 0..reps {
            trainer.step(&batch).unwrap();
        }
        println!("dfen step, batch 8: {:?} per step", t.elapsed() / reps);
        drop(cfg);
    }

    if mode == "all" || mode == "extract" {
        let models = Models::new(net.clone(), mix_seed(7, "x", &[])).unwrap();
        let t = Instant::now();
        let f = direid_core::eval::extract_features(
            &models,
            &data,
            direid_core::eval::FeatureVariant::Fused,
            AttentionMode::Learned,
        )
        .unwrap();
        println!(
            "extract fused features for {} images: {:?}",
            f.rows(),
            t.elapsed()
        );
    }

    if mode == "all" || mode == "pair" {
        let mut rng = derive_rng(7, "bench.pair", &[0]);
        let img = data.load_image(0).unwrap();
        let param = sample_degradation_param(&deg, &mut rng);
        let t = Instant::now();
        let p = SelfDegradedPair::new(img, 0, deg.kind, param).unwrap();
        println!("one self pair build: {:?} ({})", t.elapsed(), p.param);
    }
}
