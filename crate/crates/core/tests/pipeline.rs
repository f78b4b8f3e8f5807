use std::path::Path;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sketchmesh::checkpoint::Checkpoint;
use sketchmesh::dataset::{build_dataset, Category, Dataset, DatasetConfig, Sample, Split};
use sketchmesh::geometry::CameraPose;
use sketchmesh::losses::{multiscale_iou, pose_embedding, regularizer_bundle, viewpoint_loss};
use sketchmesh::networks::{DiscriminatorConfig, NetworkConfig, Networks};
use sketchmesh::pipeline::*;
use sketchmesh::rasterizer::{silhouette_pyramid, soft_rasterize, SilhouetteMap, SoftSettings};
use sketchmesh::tensor::no_grad;

fn tiny_network() -> NetworkConfig {
    NetworkConfig {
        resolution: 32,
        encoder_channels: vec![2, 3, 3],
        code_dim: 6,
        view_dim: 5,
        head_hidden: 7,
        decoder_hidden: vec![8],
        template_subdivisions: 1,
        discriminator: DiscriminatorConfig { base_resolution: 8, max_resolution: 32, channels: vec![3, 2, 2], mlp_hidden: 5 },
        ..NetworkConfig::default()
    }
}

fn tiny_train(epochs: usize) -> TrainConfig {
    TrainConfig { epochs, batch_size: 2, network: tiny_network(), ..TrainConfig::default() }
}

fn tiny_dataset(dir: &Path) -> Dataset {
    let cfg = DatasetConfig {
        shapes: 4,
        poses_per_shape: 2,
        resolution: 32,
        seed: 3,
        test_fraction: 0.5,
        categories: vec![Category::BoxStack, Category::EllipsoidBlend],
        ..DatasetConfig::default()
    };
    build_dataset(&cfg, dir).unwrap();
    Dataset::load(dir).unwrap()
}

fn snapshot(params: Vec<(String, sketchmesh::Tensor)>) -> Vec<Vec<u64>> {
    params.iter().map(|(_, t)| t.to_vec().iter().map(|x| x.to_bits()).collect()).collect()
}

#[test]
fn sampled_poses_are_uniform_bounded_and_reproducible() {
    let dist = PoseDistribution::default();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let poses: Vec<CameraPose> = (0..10_000).map(|_| sample_pose(&dist, &mut rng)).collect();
    let mean = poses.iter().map(|p| p.azimuth).sum::<f64>() / poses.len() as f64;
    assert!((mean - 180.0).abs() < 5.0, "azimuth mean {mean}");
    let el_mean = poses.iter().map(|p| p.elevation).sum::<f64>() / poses.len() as f64;
    assert!((el_mean - 15.0).abs() < 0.5, "elevation mean {el_mean}");
    assert!(poses.iter().all(|p| dist.contains(p)));
    let mut again = ChaCha8Rng::seed_from_u64(17);
    assert!(poses.iter().take(100).all(|p| *p == sample_pose(&dist, &mut again)));
}

proptest! {
    #[test]
    fn poses_respect_configured_bounds(lo in -60.0f64..60.0, span in 0.0f64..29.0, seed in any::<u64>()) {
        let dist = PoseDistribution { min_elevation: lo, max_elevation: lo + span, ..PoseDistribution::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..50 {
            let p = sample_pose(&dist, &mut rng);
            prop_assert!(p.elevation >= lo && p.elevation <= lo + span);
            prop_assert!((0.0..360.0).contains(&p.azimuth));
        }
    }

    #[test]
    fn critic_schedule_is_monotone(total in 1u64..500, stages in 1usize..5, fade in 0.0f64..1.0) {
        let mut prev = critic_state_at(0, total, stages, fade);
        prop_assert_eq!(prev.stage, 0);
        for step in 1..total {
            let s = critic_state_at(step, total, stages, fade);
            prop_assert!(s.stage < stages && (0.0..=1.0).contains(&s.alpha));
            prop_assert!(s.stage > prev.stage || (s.stage == prev.stage && s.alpha >= prev.alpha));
            prev = s;
        }
    }
}

#[test]
fn learning_rate_schedule() {
    let cfg = TrainConfig::default();
    for (epoch, lr) in [(0, 1e-4), (799, 1e-4), (800, 3e-5), (1599, 3e-5), (1600, 9e-6), (1999, 9e-6)] {
        assert!((lr_at(&cfg, epoch) - lr).abs() < 1e-18, "epoch {epoch}");
    }
    let desk = TrainConfig::desk();
    assert!((lr_at(&desk, 80) - 3e-5).abs() < 1e-18);
    assert!((lr_at(&desk, 160) - 9e-6).abs() < 1e-18);
    assert_eq!(cfg.lr, 1e-4);
    assert_eq!(cfg.views, 3);
}

#[test]
fn invalid_configurations_are_rejected_before_training() {
    let dir = tempfile::tempdir().unwrap();
    let ds = tiny_dataset(dir.path());
    assert!(TrainConfig { rps: false, cd: true, ..tiny_train(1) }.validate().is_err());
    let wrong_res = TrainConfig { network: NetworkConfig { resolution: 64, ..tiny_network() }, ..tiny_train(1) };
    let out = dir.path().join("run");
    assert!(train(&wrong_res, &ds, &out, None).is_err());
    assert!(!out.join("final.skf").exists());
}

#[test]
fn untrained_generator_outputs_the_template() {
    let nets = Networks::new(&tiny_network(), sketchmesh::networks::CriticKind::Progressive, 5).unwrap();
    let template = nets.generator.decoder.template().positions();
    for seed in 0..3u64 {
        let img: Vec<f64> = (0..32 * 32).map(|k| ((k as u64 * 7 + seed) % 3 == 0) as u8 as f64).collect();
        let sketch = SilhouetteMap::from_values(img, 32).unwrap();
        let (mesh, _) = infer(&nets, &sketch).unwrap();
        assert_eq!(mesh.positions(), template);
    }
}

#[test]
fn updates_touch_only_their_own_parameters() {
    let dir = tempfile::tempdir().unwrap();
    let ds = tiny_dataset(dir.path());
    let train_set = ds.split(Split::Train);
    let batch: Vec<&Sample> = train_set[..2].to_vec();
    let mut t = Trainer::new(&tiny_train(1)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);

    let (g0, c0) = (snapshot(t.nets.generator.named_parameters()), snapshot(t.nets.critic.named_parameters()));
    t.discriminator_step(&batch, &mut rng).unwrap();
    let (g1, c1) = (snapshot(t.nets.generator.named_parameters()), snapshot(t.nets.critic.named_parameters()));
    assert_eq!(g0, g1);
    assert_ne!(c0, c1);

    t.generator_step(&batch, &mut rng).unwrap();
    let (g2, c2) = (snapshot(t.nets.generator.named_parameters()), snapshot(t.nets.critic.named_parameters()));
    assert_eq!(c1, c2);
    assert_ne!(g1, g2);
}

#[test]
fn without_random_poses_the_loss_is_the_supervised_subset() {
    let dir = tempfile::tempdir().unwrap();
    let ds = tiny_dataset(dir.path());
    let sample = ds.split(Split::Train)[0];
    let cfg = TrainConfig { rps: false, cd: false, supervision: Supervision::Gt, ..tiny_train(1) };
    let mut t = Trainer::new(&cfg).unwrap();
    let expected = no_grad(|| {
        let out = t.nets.generator.forward(sample.sketch.tensor()).unwrap();
        let proj = sketchmesh::geometry::Projection::default();
        let rendered = soft_rasterize(&out.mesh, &sample.pose, &proj, SoftSettings::new(32, cfg.sigma)).unwrap();
        let w = &cfg.weights;
        let sp = multiscale_iou(
            &silhouette_pyramid(&rendered, 3).unwrap(),
            &silhouette_pyramid(&sample.silhouette, 3).unwrap(),
            &w.lambda_si,
        )
        .unwrap()
        .item();
        let v = viewpoint_loss(&out.view.embedding, &pose_embedding(&sample.pose)).unwrap().item();
        let r = regularizer_bundle(&out.mesh).unwrap().item();
        sp + w.lambda_r * r + w.lambda_v * v
    });
    let critic = snapshot(t.nets.critic.named_parameters());
    let log = t.train_batch(&[sample], 10, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert!((log.loss.total - expected).abs() < 1e-12, "{} vs {expected}", log.loss.total);
    assert_eq!(log.loss.sd, 0.0);
    assert!(log.d_loss.is_none());
    assert_eq!(critic, snapshot(t.nets.critic.named_parameters()));
    assert!(t.discriminator_step(&[sample], &mut ChaCha8Rng::seed_from_u64(0)).is_err());
}

#[test]
fn training_is_bit_reproducible_and_resumable() {
    let dir = tempfile::tempdir().unwrap();
    let ds = tiny_dataset(&dir.path().join("data"));
    let cfg = TrainConfig { checkpoint_every: 1, ..tiny_train(2) };
    let a = train(&cfg, &ds, dir.path().join("a"), None).unwrap();
    let b = train(&cfg, &ds, dir.path().join("b"), None).unwrap();
    assert_eq!(a.digest, b.digest);
    assert_eq!(std::fs::read(&a.final_checkpoint).unwrap(), std::fs::read(&b.final_checkpoint).unwrap());

    let log = std::fs::read_to_string(&a.log).unwrap();
    let lines: Vec<serde_json::Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 2 * 2);
    for key in ["step", "epoch", "lr", "stage", "alpha", "loss"] {
        assert!(lines[0].get(key).is_some(), "missing {key}");
    }

    let mid = dir.path().join("a/epoch_0001.skf");
    let c = train(&cfg, &ds, dir.path().join("c"), Some(&mid)).unwrap();
    assert_eq!(a.digest, c.digest);

    let other = train(&TrainConfig { seed: 1, ..cfg.clone() }, &ds, dir.path().join("d"), None).unwrap();
    assert_ne!(a.digest, other.digest);
    assert!(train(&TrainConfig { lr: 2e-4, ..cfg }, &ds, dir.path().join("e"), Some(&mid)).is_err());
}

#[test]
fn inference_is_deterministic_and_checks_resolution() {
    let dir = tempfile::tempdir().unwrap();
    let ds = tiny_dataset(&dir.path().join("data"));
    let out = train(&tiny_train(1), &ds, dir.path().join("run"), None).unwrap();
    let nets = Checkpoint::load(&out.final_checkpoint).unwrap().0.restore().unwrap();
    let sketch = &ds.split(Split::Test)[0].sketch;
    let (m1, p1) = infer(&nets, sketch).unwrap();
    let (m2, p2) = infer(&nets, sketch).unwrap();
    assert_eq!(m1.positions(), m2.positions());
    assert_eq!(p1, p2);
    assert!(m1.is_watertight());
    let small = SilhouetteMap::from_values(vec![0.0; 16 * 16], 16).unwrap();
    assert!(infer(&nets, &small).is_err());
}
