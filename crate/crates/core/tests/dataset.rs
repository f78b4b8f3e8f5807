use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sketchmesh::dataset::*;
use sketchmesh::geometry::voxelize;
use sketchmesh::rasterizer::SilhouetteMap;

fn disc(res: usize, cy: f64, cx: f64, ry: f64, rx: f64) -> SilhouetteMap {
    let mask: Vec<bool> = (0..res * res)
        .map(|k| {
            let (i, j) = ((k / res) as f64 + 0.5, (k % res) as f64 + 0.5);
            ((i - cy) / ry).powi(2) + ((j - cx) / rx).powi(2) <= 1.0
        })
        .collect();
    SilhouetteMap::from_mask(&mask, res).unwrap()
}

fn small_config(seed: u64) -> DatasetConfig {
    DatasetConfig { shapes: 8, poses_per_shape: 2, resolution: 32, seed, ..DatasetConfig::default() }
}

#[test]
fn box_stack_without_jitter_is_two_boxes() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let m = gen_shape(Category::BoxStack, &mut rng, 0.0).unwrap();
    assert_eq!(m.num_vertices(), 16);
    assert_eq!(m.num_faces(), 24);
    assert!(m.is_watertight());
    let again = gen_shape(Category::BoxStack, &mut ChaCha8Rng::seed_from_u64(99), 0.0).unwrap();
    assert_eq!(m.positions(), again.positions());
}

#[test]
fn generated_shapes_are_watertight_and_normalized() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..5 {
        for c in Category::ALL {
            let m = gen_shape(c, &mut rng, 0.3).unwrap();
            assert!(m.is_watertight(), "{c} not watertight");
            let r = m.positions().iter().map(|p| p.iter().map(|x| x * x).sum::<f64>().sqrt()).fold(0.0, f64::max);
            assert!((r - 1.0).abs() < 1e-9, "{c} radius {r}");
        }
    }
}

#[test]
fn ellipsoid_blend_volume_matches_monte_carlo() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..4 {
        let parts = blend_ellipsoids(&mut rng, 0.2);
        let res = 64;
        let grid = voxelize(&ellipsoid_union_mesh(&parts, 4).unwrap(), res).unwrap();
        let voxel_volume = grid.count() as f64 * (2.0 / res as f64).powi(3);
        let n = 200_000;
        let hits = (0..n)
            .filter(|_| {
                let p = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
                parts.iter().any(|e| e.contains(p))
            })
            .count();
        let oracle = 8.0 * hits as f64 / n as f64;
        assert!((voxel_volume / oracle - 1.0).abs() < 0.1, "voxel {voxel_volume} oracle {oracle}");
    }
}

#[test]
fn sketch_of_disc_is_its_boundary_ring() {
    let sil = disc(32, 16.0, 16.0, 10.0, 10.0);
    let ring = sketchify(&sil, 0.0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap().mask();
    let m = sil.mask();
    let inside = |i: i64, j: i64| (0..32).contains(&i) && (0..32).contains(&j) && m[(i * 32 + j) as usize];
    for i in 0..32i64 {
        for j in 0..32i64 {
            let boundary = inside(i, j) && [(-1, 0), (1, 0), (0, -1), (0, 1)].iter().any(|(di, dj)| !inside(i + di, j + dj));
            assert_eq!(ring[(i * 32 + j) as usize], boundary, "pixel {i},{j}");
        }
    }
    let filled = fill_sketch(&SilhouetteMap::from_mask(&ring, 32).unwrap());
    assert_eq!(filled.mask(), m);
}

#[test]
fn noiseless_sketch_is_deterministic_and_empty_input_fails() {
    let sil = disc(32, 12.0, 18.0, 7.0, 11.0);
    let a = sketchify(&sil, 0.0, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let b = sketchify(&sil, 0.0, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    assert_eq!(a.mask(), b.mask());
    let empty = SilhouetteMap::from_mask(&vec![false; 32 * 32], 32).unwrap();
    assert!(sketchify(&empty, 0.0, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn sketch_edge_count_is_bounded_by_perimeter(
        res in prop::sample::select(vec![16usize, 32, 64]),
        cy in 0.2f64..0.8, cx in 0.2f64..0.8, ry in 0.05f64..0.7, rx in 0.05f64..0.7,
        noise in 0.0f64..1.0, seed in any::<u64>(),
    ) {
        let r = res as f64;
        let sil = disc(res, cy * r, cx * r, ry * r, rx * r);
        prop_assume!(sil.mask().iter().any(|&m| m));
        let sketch = sketchify(&sil, noise, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let count = sketch.mask().iter().filter(|&&m| m).count();
        prop_assert!(count <= 4 * (res + res));
        prop_assert!(sketch.to_vec().iter().all(|&v| v == 0.0 || v == 1.0));
    }
}

#[test]
fn default_counts_split_eighty_twenty() {
    let dir = tempfile::tempdir().unwrap();
    let m = build_dataset(&DatasetConfig::default(), dir.path()).unwrap();
    assert_eq!(m.samples.len(), 200);
    let train = m.samples.iter().filter(|s| s.split == Split::Train).count();
    assert_eq!((train, 200 - train), (160, 40));
    for c in Category::ALL {
        let n = |split| m.samples.iter().filter(|s| s.category == c && s.split == split).count() / 4;
        let shapes = n(Split::Train) + n(Split::Test);
        assert_eq!(n(Split::Test), (0.2 * shapes as f64).round() as usize, "{c}");
    }
}

#[test]
fn rebuild_with_same_seed_gives_identical_digests() {
    let (a, b, c) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ma = build_dataset(&small_config(4), a.path()).unwrap();
    let mb = build_dataset(&small_config(4), b.path()).unwrap();
    let mc = build_dataset(&small_config(5), c.path()).unwrap();
    assert_eq!(ma.digests, mb.digests);
    assert_eq!(ma.digest(), mb.digest());
    assert_ne!(ma.digest(), mc.digest());
}

#[test]
fn stored_samples_are_self_consistent() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = DatasetConfig { sketch_noise: 0.0, ..small_config(9) };
    build_dataset(&cfg, dir.path()).unwrap();
    let ds = Dataset::load(dir.path()).unwrap();
    ds.verify_silhouettes().unwrap();
    for s in &ds.samples {
        assert!(ds.mesh(s.shape).unwrap().is_watertight());
        let again = sketchify(&s.silhouette, 0.0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(again.mask(), s.sketch.mask(), "sample {}", s.id);
        assert_eq!(s.sketch.resolution(), 32);
    }
    let train_shapes: Vec<usize> = ds.split(Split::Train).iter().map(|s| s.shape).collect();
    assert!(ds.split(Split::Test).iter().all(|s| !train_shapes.contains(&s.shape)));
}

#[test]
fn tampered_files_fail_verification() {
    let dir = tempfile::tempdir().unwrap();
    build_dataset(&small_config(1), dir.path()).unwrap();
    let path = dir.path().join("silhouettes/000_0.png");
    let mut bytes = std::fs::read(&path).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 1;
    std::fs::write(&path, bytes).unwrap();
    let err = Dataset::load(dir.path()).unwrap_err().to_string();
    assert!(err.contains("digest mismatch"), "{err}");
}
