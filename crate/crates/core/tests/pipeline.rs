use made_core::attack::{pgd, AttackContext, AttackSpec};
use made_core::geometry::BBox;
use made_core::pipeline::{
    evaluate_detection_loss, mean_recon_loss, train_autoencoder, train_detector, Autoencoder, AutoencoderArch, Detector,
    DetectorArch, DetectorHyper, FeatureMap, TrainHyper, TrainingSample,
};
use made_core::scene::{generate_scene, render_observation, SceneConfig};
use made_tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_config() -> SceneConfig {
    SceneConfig {
        world_extent: 16.0,
        grid_size: 16,
        min_objects: 2,
        max_objects: 4,
        min_object_size: 1.5,
        max_object_size: 3.5,
        sensor_range: Some(10.0),
        ..SceneConfig::default()
    }
}

fn hyper(epochs: usize, seed: u64) -> DetectorHyper {
    DetectorHyper {
        train: TrainHyper {
            epochs,
            batch_size: 8,
            learning_rate: 3e-3,
            lr_decay_every: 0,
            lr_decay_factor: 1.0,
            seed,
        },
        keep_prob: 0.5,
        fg_weight: 2.0,
        box_weight: 1.0,
    }
}

fn samples(cfg: &SceneConfig, seeds: std::ops::Range<u64>) -> Vec<TrainingSample> {
    seeds.map(|s| TrainingSample::new(generate_scene(s, cfg).unwrap(), cfg).unwrap()).collect()
}

#[test]
fn five_hundred_default_scenes_pass_audit() {
    let cfg = SceneConfig::default();
    for seed in 0..500 {
        let scene = generate_scene(seed, &cfg).unwrap();
        assert!(scene.audit(&cfg).is_empty(), "seed {seed}: {:?}", scene.audit(&cfg));
    }
}

#[test]
fn converted_boxes_stay_in_grid() {
    let cfg = SceneConfig::default();
    let g = cfg.geometry();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..100 {
        let w = rng.random_range(0.1..10.0);
        let h = rng.random_range(0.1..10.0);
        let b = BBox::new(
            rng.random_range(w / 2.0..cfg.world_extent - w / 2.0),
            rng.random_range(h / 2.0..cfg.world_extent - h / 2.0),
            w,
            h,
        );
        let c = g.world_to_grid(&b);
        assert!(c.x1() >= -1e-9 && c.y1() >= -1e-9);
        assert!(c.x2() <= cfg.grid_size as f64 + 1e-9 && c.y2() <= cfg.grid_size as f64 + 1e-9);
    }
}

#[test]
fn different_grids_encode_differently() {
    let cfg = SceneConfig::default();
    let det = Detector::init(DetectorArch::for_scene(&cfg, 4, 6), 2).unwrap();
    let encode = |seed| {
        let scene = generate_scene(seed, &cfg).unwrap();
        det.encode(&render_observation(&scene, 0, &cfg).unwrap()).unwrap()
    };
    for seed in 0..10 {
        assert!(!encode(seed).tensor.bit_eq(&encode(seed + 100).tensor));
    }
}

#[test]
fn detector_training_lowers_loss_and_is_seeded() {
    let cfg = small_config();
    let data = samples(&cfg, 0..40);
    let held_out = samples(&cfg, 1000..1020);
    let arch = DetectorArch::for_scene(&cfg, 6, 8);
    let mut det = Detector::init(arch.clone(), 1).unwrap();
    let h = hyper(10, 4);
    let before = evaluate_detection_loss(&det, &held_out, &h).unwrap();
    let report = train_detector(&mut det, &data, &h).unwrap();
    let losses = &report.epoch_losses;
    assert_eq!(losses.len(), 10);
    assert!(losses.windows(2).all(|w| w[1] < w[0]), "{losses:?}");
    assert!(evaluate_detection_loss(&det, &held_out, &h).unwrap() < before);

    let mut again = Detector::init(arch, 1).unwrap();
    let report2 = train_detector(&mut again, &data, &h).unwrap();
    assert_eq!(report.epoch_losses, report2.epoch_losses);
    assert_eq!(det.to_checkpoint().to_bytes().unwrap(), again.to_checkpoint().to_bytes().unwrap());
}

#[test]
fn autoencoder_training_beats_initialization() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let residual = |rng: &mut ChaCha8Rng| {
        let a: f64 = rng.random_range(-1.0..1.0);
        let data = (0..8 * 8 * 3).map(|i| a * ((i % 7) as f64 * 0.3).sin()).collect();
        Tensor::new(vec![8, 8, 3], data).unwrap()
    };
    let train: Vec<Tensor> = (0..64).map(|_| residual(&mut rng)).collect();
    let held_out: Vec<Tensor> = (0..16).map(|_| residual(&mut rng)).collect();
    let arch = AutoencoderArch {
        height: 8,
        width: 8,
        channels: 3,
        hidden_channels: 6,
        bottleneck_channels: 3,
    };
    let hyper = TrainHyper {
        epochs: 15,
        batch_size: 8,
        learning_rate: 5e-3,
        lr_decay_every: 0,
        lr_decay_factor: 1.0,
        seed: 2,
    };
    let mut ae = Autoencoder::init(arch.clone(), 5).unwrap();
    let before = mean_recon_loss(&ae, &held_out).unwrap();
    let report = train_autoencoder(&mut ae, &train, &hyper).unwrap();
    assert!(report.epoch_losses.last() < report.epoch_losses.first());
    assert!(mean_recon_loss(&ae, &held_out).unwrap() < before);
    let mut twin = Autoencoder::init(arch, 5).unwrap();
    train_autoencoder(&mut twin, &train, &hyper).unwrap();
    assert_eq!(ae.to_checkpoint().to_bytes().unwrap(), twin.to_checkpoint().to_bytes().unwrap());
}

#[test]
fn attack_traces_mostly_descend() {
    let det = Detector::init(
        DetectorArch {
            height: 6,
            width: 6,
            in_channels: 2,
            feature_channels: 3,
            hidden_channels: 4,
            num_classes: 3,
            num_agents: 3,
            max_offset: 1.5,
            min_size: 0.5,
            max_size: 4.0,
        },
        8,
    )
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let trials = 40;
    let mut descending = 0;
    for _ in 0..trials {
        let maps: Vec<FeatureMap> = (0..3)
            .map(|agent| FeatureMap {
                agent,
                tensor: Tensor::new(vec![6, 6, 3], (0..108).map(|_| rng.random_range(0.0..2.0)).collect()).unwrap(),
            })
            .collect();
        let ctx = AttackContext { detector: &det, maps: &maps, conf_threshold: 0.3 };
        let clean = ctx.clean_output(0).unwrap();
        let (_, trace) = pgd(&ctx, &AttackSpec::standard(0, vec![1], 0.3, "independent"), &[1], &clean).unwrap();
        descending += (trace.last().unwrap() < &trace[0]) as usize;
    }
    assert!(descending as f64 >= 0.9 * trials as f64, "{descending}/{trials}");
}
