//! Procedural sketch/silhouette/mesh dataset and its on-disk layout.
//!
//! ```text
//! manifest.json
//! meshes/NNN.obj
//! sketches/NNN_P.png
//! silhouettes/NNN_P.png
//! ```

mod shapes;

use std::collections::{BTreeMap, VecDeque};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use shapes::{blend_ellipsoids, ellipsoid_union_mesh, gen_shape, Category, Ellipsoid};

use crate::error::{Error, Result};
use crate::geometry::obj::to_obj_string;
use crate::geometry::{CameraPose, Mesh, Projection};
use crate::pipeline::{sample_pose, PoseDistribution};
use crate::rasterizer::{hard_rasterize, SilhouetteMap};

pub const MANIFEST_VERSION: u32 = 1;

/// Boundary pixels of a binary silhouette: foreground pixels with a
/// 4-neighbor in the background or on the image border. With probability
/// `noise` each boundary pixel is displaced by one pixel in a random
/// direction.
pub fn sketchify(silhouette: &SilhouetteMap, noise: f64, rng: &mut impl Rng) -> Result<SilhouetteMap> {
    let r = silhouette.resolution();
    let mask = silhouette.mask();
    if !mask.iter().any(|&m| m) {
        return Err(Error::Dataset("cannot sketch an empty silhouette".into()));
    }
    if !(0.0..=1.0).contains(&noise) {
        return Err(Error::Config(format!("sketch noise {noise} outside [0, 1]")));
    }
    let at = |i: isize, j: isize| i >= 0 && j >= 0 && i < r as isize && j < r as isize && mask[i as usize * r + j as usize];
    let mut out = vec![false; r * r];
    for i in 0..r as isize {
        for j in 0..r as isize {
            if !at(i, j) || (at(i - 1, j) && at(i + 1, j) && at(i, j - 1) && at(i, j + 1)) {
                continue;
            }
            let (mut y, mut x) = (i, j);
            if noise > 0.0 && rng.gen_bool(noise) {
                let dirs = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)];
                let (dy, dx) = dirs[rng.gen_range(0..8)];
                y = (y + dy).clamp(0, r as isize - 1);
                x = (x + dx).clamp(0, r as isize - 1);
            }
            out[y as usize * r + x as usize] = true;
        }
    }
    SilhouetteMap::from_mask(&out, r)
}

/// Fills a line drawing: every pixel not reachable from the border through
/// background pixels becomes foreground.
pub fn fill_sketch(sketch: &SilhouetteMap) -> SilhouetteMap {
    let r = sketch.resolution();
    let ink = sketch.mask();
    let mut outside = vec![false; r * r];
    let mut queue = VecDeque::new();
    for k in 0..r {
        for idx in [k, (r - 1) * r + k, k * r, k * r + r - 1] {
            if !ink[idx] && !outside[idx] {
                outside[idx] = true;
                queue.push_back(idx);
            }
        }
    }
    while let Some(idx) = queue.pop_front() {
        let (i, j) = (idx / r, idx % r);
        let mut visit = |n: usize| {
            if !ink[n] && !outside[n] {
                outside[n] = true;
                queue.push_back(n);
            }
        };
        if i > 0 {
            visit(idx - r);
        }
        if i + 1 < r {
            visit(idx + r);
        }
        if j > 0 {
            visit(idx - 1);
        }
        if j + 1 < r {
            visit(idx + 1);
        }
    }
    let filled: Vec<bool> = outside.iter().map(|&o| !o).collect();
    SilhouetteMap::from_mask(&filled, r).expect("same resolution")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub shapes: usize,
    pub poses_per_shape: usize,
    pub resolution: usize,
    pub seed: u64,
    /// Extent jitter of the shape generators.
    pub jitter: f64,
    /// Displacement probability of sketch pixels.
    pub sketch_noise: f64,
    pub test_fraction: f64,
    pub poses: PoseDistribution,
    pub categories: Vec<Category>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            shapes: 50,
            poses_per_shape: 4,
            resolution: 64,
            seed: 0,
            jitter: 0.3,
            sketch_noise: 0.2,
            test_fraction: 0.2,
            poses: PoseDistribution::default(),
            categories: Category::ALL.to_vec(),
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.shapes == 0 || self.poses_per_shape == 0 {
            return Err(Error::Config("dataset needs at least one shape and one pose".into()));
        }
        if self.resolution < 4 || !self.resolution.is_power_of_two() {
            return Err(Error::Config(format!("resolution {} must be a power of two ≥ 4", self.resolution)));
        }
        if self.categories.is_empty() {
            return Err(Error::Config("no categories selected".into()));
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return Err(Error::Config(format!("test fraction {} outside [0, 1)", self.test_fraction)));
        }
        self.poses.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub shape: usize,
    pub pose_index: usize,
    pub category: Category,
    pub split: Split,
    pub pose: CameraPose,
    pub mesh: String,
    pub sketch: String,
    pub silhouette: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub seed: u64,
    pub resolution: usize,
    pub categories: Vec<Category>,
    pub config: DatasetConfig,
    pub samples: Vec<SampleRecord>,
    /// SHA-256 of every data file, keyed by relative path.
    pub digests: BTreeMap<String, String>,
}

impl Manifest {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    /// SHA-256 of the manifest JSON, which covers every file digest.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_json().as_bytes()))
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn write(root: &Path, rel: &str, bytes: &[u8], digests: &mut BTreeMap<String, String>) -> Result<()> {
    let path = root.join(rel);
    std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    digests.insert(rel.to_string(), sha256_hex(bytes));
    Ok(())
}

/// Per-category split: the last `round(test_fraction · n)` shapes of each
/// category are test shapes, so all poses of a shape share a split.
fn shape_splits(categories: &[Category], test_fraction: f64) -> Vec<Split> {
    let mut splits = vec![Split::Train; categories.len()];
    let mut by_cat: BTreeMap<Category, Vec<usize>> = BTreeMap::new();
    for (i, c) in categories.iter().enumerate() {
        by_cat.entry(*c).or_default().push(i);
    }
    for ids in by_cat.values() {
        let n_test = (test_fraction * ids.len() as f64).round() as usize;
        for &i in &ids[ids.len() - n_test..] {
            splits[i] = Split::Test;
        }
    }
    splits
}

/// Generates the dataset under `out`, then reloads and verifies it.
pub fn build_dataset(config: &DatasetConfig, out: impl AsRef<Path>) -> Result<Manifest> {
    config.validate()?;
    let root = out.as_ref();
    for sub in ["meshes", "sketches", "silhouettes"] {
        let dir = root.join(sub);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let cats: Vec<Category> = (0..config.shapes).map(|i| config.categories[i % config.categories.len()]).collect();
    let splits = shape_splits(&cats, config.test_fraction);
    let proj = Projection::default();
    let mut digests = BTreeMap::new();
    let mut samples = Vec::new();
    for (s, &category) in cats.iter().enumerate() {
        let mesh = gen_shape(category, &mut rng, config.jitter)?;
        let mesh_rel = format!("meshes/{s:03}.obj");
        write(root, &mesh_rel, to_obj_string(&mesh).as_bytes(), &mut digests)?;
        for p in 0..config.poses_per_shape {
            let pose = sample_pose(&config.poses, &mut rng);
            let silhouette = hard_rasterize(&mesh, &pose, &proj, config.resolution)?;
            let sketch = sketchify(&silhouette, config.sketch_noise, &mut rng)?;
            let sketch_rel = format!("sketches/{s:03}_{p}.png");
            let sil_rel = format!("silhouettes/{s:03}_{p}.png");
            write(root, &sketch_rel, &sketch.to_png_bytes()?, &mut digests)?;
            write(root, &sil_rel, &silhouette.to_png_bytes()?, &mut digests)?;
            samples.push(SampleRecord {
                id: format!("{s:03}_{p}"),
                shape: s,
                pose_index: p,
                category,
                split: splits[s],
                pose,
                mesh: mesh_rel.clone(),
                sketch: sketch_rel,
                silhouette: sil_rel,
            });
        }
    }
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        seed: config.seed,
        resolution: config.resolution,
        categories: config.categories.clone(),
        config: config.clone(),
        samples,
        digests,
    };
    let path = root.join("manifest.json");
    std::fs::write(&path, manifest.to_json()).map_err(|e| Error::io(&path, e))?;
    let loaded = Dataset::load(root)?;
    loaded.verify_silhouettes()?;
    Ok(loaded.manifest)
}

/// One training or test example.
#[derive(Debug, Clone)]
pub struct Sample {
    pub id: String,
    pub shape: usize,
    pub category: Category,
    pub split: Split,
    pub pose: CameraPose,
    pub sketch: SilhouetteMap,
    pub silhouette: SilhouetteMap,
}

/// A loaded, digest-verified dataset.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Manifest,
    pub samples: Vec<Sample>,
    meshes: BTreeMap<usize, Mesh>,
}

impl Dataset {
    pub fn load(root: impl AsRef<Path>) -> Result<Dataset> {
        let root = root.as_ref().to_path_buf();
        let path = root.join("manifest.json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest =
            serde_json::from_str(&text).map_err(|e| Error::Dataset(format!("manifest.json: {e}")))?;
        if manifest.version != MANIFEST_VERSION {
            return Err(Error::Dataset(format!("unsupported manifest version {}", manifest.version)));
        }
        let read = |rel: &str| -> Result<Vec<u8>> {
            let p = root.join(rel);
            let bytes = std::fs::read(&p).map_err(|e| Error::io(&p, e))?;
            let expected = manifest
                .digests
                .get(rel)
                .ok_or_else(|| Error::Dataset(format!("no digest recorded for {rel}")))?;
            if &sha256_hex(&bytes) != expected {
                return Err(Error::Dataset(format!("digest mismatch for {rel}")));
            }
            Ok(bytes)
        };
        let mut meshes = BTreeMap::new();
        let mut samples = Vec::new();
        let mut shape_split: BTreeMap<usize, Split> = BTreeMap::new();
        for rec in &manifest.samples {
            if *shape_split.entry(rec.shape).or_insert(rec.split) != rec.split {
                return Err(Error::Dataset(format!("shape {} appears in both splits", rec.shape)));
            }
            if !meshes.contains_key(&rec.shape) {
                let text = String::from_utf8(read(&rec.mesh)?)
                    .map_err(|_| Error::Dataset(format!("{} is not UTF-8", rec.mesh)))?;
                meshes.insert(rec.shape, crate::geometry::obj::parse_obj(&text)?);
            }
            let sketch = SilhouetteMap::from_image_bytes(&read(&rec.sketch)?)?;
            let silhouette = SilhouetteMap::from_image_bytes(&read(&rec.silhouette)?)?;
            if sketch.resolution() != manifest.resolution || silhouette.resolution() != manifest.resolution {
                return Err(Error::Dataset(format!("sample {} has the wrong resolution", rec.id)));
            }
            rec.pose.validate()?;
            samples.push(Sample {
                id: rec.id.clone(),
                shape: rec.shape,
                category: rec.category,
                split: rec.split,
                pose: rec.pose,
                sketch,
                silhouette,
            });
        }
        let dataset = Dataset { root, manifest, samples, meshes };
        dataset.check_leakage()?;
        Ok(dataset)
    }

    /// Fails if a mesh file's content appears in both splits.
    fn check_leakage(&self) -> Result<()> {
        let mut seen: BTreeMap<&str, Split> = BTreeMap::new();
        for rec in &self.manifest.samples {
            let digest = self.manifest.digests.get(&rec.mesh).map(String::as_str).unwrap_or("");
            if *seen.entry(digest).or_insert(rec.split) != rec.split {
                return Err(Error::Dataset(format!("mesh {} is shared across splits", rec.mesh)));
            }
        }
        Ok(())
    }

    /// Re-renders every ground-truth silhouette from its mesh and pose.
    pub fn verify_silhouettes(&self) -> Result<()> {
        let proj = Projection::default();
        for s in &self.samples {
            let again = hard_rasterize(self.mesh(s.shape)?, &s.pose, &proj, self.manifest.resolution)?;
            if again.mask() != s.silhouette.mask() {
                return Err(Error::Dataset(format!("silhouette of sample {} does not match its mesh", s.id)));
            }
        }
        Ok(())
    }

    pub fn mesh(&self, shape: usize) -> Result<&Mesh> {
        self.meshes.get(&shape).ok_or_else(|| Error::Dataset(format!("missing mesh for shape {shape}")))
    }

    pub fn split(&self, split: Split) -> Vec<&Sample> {
        self.samples.iter().filter(|s| s.split == split).collect()
    }

    pub fn resolution(&self) -> usize {
        self.manifest.resolution
    }

    pub fn digest(&self) -> String {
        self.manifest.digest()
    }
}
