use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sketchmesh::geometry::{icosphere, CameraPose, Mesh, Projection};
use sketchmesh::rasterizer::{hard_rasterize, soft_rasterize, SoftSettings};
use sketchmesh::tensor::gradcheck::GradCheck;
use sketchmesh::tensor::grad;
use sketchmesh::Tensor;

fn jittered_icosahedron(seed: u64, amp: f64) -> Mesh {
    let m = icosphere(0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v: Vec<f64> = m.vertices().to_vec().iter().map(|x| x * 0.8 + rng.gen_range(-amp..amp)).collect();
    m.with_vertices(Tensor::new(v, &[12, 3]).unwrap()).unwrap()
}

fn random_pose(rng: &mut ChaCha8Rng) -> CameraPose {
    CameraPose::new(rng.gen_range(-30.0..30.0), rng.gen_range(0.0..360.0), CameraPose::DEFAULT_DISTANCE).unwrap()
}

/// Pixels whose 3×3 neighborhood in the hard mask is not uniform.
fn boundary_band(mask: &[bool], res: usize) -> Vec<bool> {
    let mut band = vec![false; res * res];
    for i in 0..res {
        for j in 0..res {
            let c = mask[i * res + j];
            for di in -1i64..=1 {
                for dj in -1i64..=1 {
                    let (y, x) = (i as i64 + di, j as i64 + dj);
                    if (0..res as i64).contains(&y) && (0..res as i64).contains(&x) && mask[y as usize * res + x as usize] != c {
                        band[i * res + j] = true;
                    }
                }
            }
        }
    }
    band
}

#[test]
fn vertex_gradients_match_finite_differences() {
    let proj = Projection::default();
    // Exact backward (no truncation); the truncation bias is bounded below.
    // The boundary distance is a minimum over edges, so it has creases; a
    // smaller step keeps the central difference from straddling one.
    let check = GradCheck { step: 1e-6, ..GradCheck::default() };
    let mut worst: f64 = 0.0;
    for seed in 0..100 {
        let m = jittered_icosahedron(seed, 0.15);
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let pose = random_pose(&mut rng);
        let report = check
            .run(&[m.vertices().to_vec()], &[&[12, 3]], |x| {
                let mesh = m.with_vertices(x[0].clone())?;
                Ok(soft_rasterize(&mesh, &pose, &proj, SoftSettings { grad_cutoff: 0.0, ..SoftSettings::new(32, 1e-2) })?.tensor().sum())
            })
            .unwrap();
        worst = worst.max(report.max_rel_error);
        assert!(report.max_rel_error < 1e-3, "seed {seed}: {report:?}");
    }
    eprintln!("worst relative error {worst:e}");
}

#[test]
fn gradient_truncation_bias_is_negligible() {
    let proj = Projection::default();
    for seed in 0..10 {
        let m = jittered_icosahedron(seed, 0.15);
        let pose = random_pose(&mut ChaCha8Rng::seed_from_u64(100 + seed));
        let grads = |settings: SoftSettings| {
            let v = Tensor::param(m.vertices().to_vec(), &[12, 3]).unwrap();
            let s = soft_rasterize(&m.with_vertices(v.clone()).unwrap(), &pose, &proj, settings).unwrap();
            grad(&s.tensor().sum(), &[&v], false).unwrap()[0].to_vec()
        };
        let exact = grads(SoftSettings { grad_cutoff: 0.0, ..SoftSettings::new(32, 1e-2) });
        let cut = grads(SoftSettings::new(32, 1e-2));
        let scale = exact.iter().fold(0.0f64, |a, g| a.max(g.abs()));
        let bias = exact.iter().zip(&cut).fold(0.0f64, |a, (x, y)| a.max((x - y).abs()));
        assert!(bias < 1e-5 * scale, "seed {seed}: bias {bias:e} vs scale {scale:e}");
    }
}

#[test]
fn soft_approaches_hard_as_sigma_vanishes() {
    let proj = Projection::default();
    let res = 64;
    for seed in 0..5 {
        let m = jittered_icosahedron(seed, 0.2);
        let pose = random_pose(&mut ChaCha8Rng::seed_from_u64(seed));
        let hard = hard_rasterize(&m, &pose, &proj, res).unwrap();
        let soft = soft_rasterize(&m, &pose, &proj, SoftSettings::new(res, 1e-5)).unwrap();
        let band = boundary_band(&hard.mask(), res);
        let (h, s) = (hard.to_vec(), soft.to_vec());
        let kept: Vec<f64> = (0..res * res).filter(|&k| !band[k]).map(|k| (h[k] - s[k]).abs()).collect();
        let mean = kept.iter().sum::<f64>() / kept.len() as f64;
        assert!(mean < 0.02, "seed {seed}: {mean}");
    }
}

#[test]
fn face_order_does_not_matter() {
    let m = jittered_icosahedron(3, 0.1);
    let mut faces = m.faces().to_vec();
    faces.reverse();
    faces.rotate_left(7);
    let shuffled = Mesh::new(m.vertices().clone(), faces).unwrap();
    let pose = CameraPose::new(20.0, 40.0, CameraPose::DEFAULT_DISTANCE).unwrap();
    let st = SoftSettings::new(32, 1e-3);
    let a = soft_rasterize(&m, &pose, &Projection::default(), st).unwrap().to_vec();
    let b = soft_rasterize(&shuffled, &pose, &Projection::default(), st).unwrap().to_vec();
    for (x, y) in a.iter().zip(&b) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn one_pixel_shift_in_image_plane_shifts_silhouette() {
    let res = 64;
    let d = CameraPose::DEFAULT_DISTANCE;
    let proj = Projection::default();
    let m = icosphere(2).unwrap().with_vertices(icosphere(2).unwrap().vertices().scale(0.5)).unwrap();
    // One pixel is 2/res in NDC, i.e. 2/res · d / scale at the object's depth.
    let dx = 2.0 / res as f64 * d / proj.scale();
    let shifted: Vec<f64> = m.vertices().to_vec().chunks(3).flat_map(|p| [p[0] + dx, p[1], p[2]]).collect();
    let moved = m.with_vertices(Tensor::new(shifted, &[m.num_vertices(), 3]).unwrap()).unwrap();
    let st = SoftSettings::new(res, 1e-4);
    let a = soft_rasterize(&m, &CameraPose::canonical(), &proj, st).unwrap().to_vec();
    let b = soft_rasterize(&moved, &CameraPose::canonical(), &proj, st).unwrap().to_vec();
    let mut diff = 0.0;
    let mut total = 0.0;
    for i in 0..res {
        for j in 1..res {
            diff += (b[i * res + j] - a[i * res + j - 1]).abs();
            total += a[i * res + j - 1];
        }
    }
    assert!(diff / total < 0.02, "{}", diff / total);
}

#[test]
fn values_in_unit_interval_and_monotone_in_sigma() {
    // One triangle facing the camera.
    let m = Mesh::from_positions(&[[-0.6, -0.5, 0.0], [0.6, -0.5, 0.0], [0.0, 0.6, 0.0]], vec![[0, 1, 2]]).unwrap();
    let pose = CameraPose::canonical();
    let inside = hard_rasterize(&m, &pose, &Projection::default(), 32).unwrap().mask();
    let mut prev = vec![0.0; 32 * 32];
    for sigma in [1e-1, 1e-2, 1e-3] {
        let s = soft_rasterize(&m, &pose, &Projection::default(), SoftSettings::new(32, sigma)).unwrap().to_vec();
        assert!(s.iter().all(|&v| (0.0..=1.0).contains(&v)));
        for k in (0..32 * 32).filter(|&k| inside[k]) {
            assert!(s[k] >= prev[k], "pixel {k} at sigma {sigma}");
        }
        assert!((0..32 * 32).any(|k| inside[k] && s[k] > prev[k]));
        prev = s;
    }
}
