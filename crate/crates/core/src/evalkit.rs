//! Voxel-IoU evaluation on the test split and the training-component
//! ablation matrix.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dataset::{Category, Dataset, Sample, Split};
use crate::error::{Error, Result};
use crate::geometry::{voxel_iou, voxelize, CameraPose, Mesh};
use crate::networks::Networks;
use crate::pipeline::{train, TrainConfig};
use crate::tensor::no_grad;

/// Which viewpoint conditions the decoder during evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoseMode {
    Gt,
    Pred,
}

impl FromStr for PoseMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<PoseMode> {
        match s {
            "gt" => Ok(PoseMode::Gt),
            "pred" => Ok(PoseMode::Pred),
            _ => Err(Error::Config(format!("unknown pose mode `{s}`, expected gt or pred"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleScore {
    pub id: String,
    pub category: Category,
    pub iou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryScore {
    pub mean: f64,
    pub count: usize,
}

/// Per-category means and their unweighted mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: PoseMode,
    pub voxel_resolution: usize,
    pub categories: BTreeMap<Category, CategoryScore>,
    pub mean: f64,
    pub samples: Vec<SampleScore>,
}

impl EvalReport {
    fn from_scores(mode: PoseMode, voxel_resolution: usize, samples: Vec<SampleScore>) -> Result<EvalReport> {
        if samples.is_empty() {
            return Err(Error::Dataset("the test split is empty".into()));
        }
        let mut sums: BTreeMap<Category, (f64, usize)> = BTreeMap::new();
        for s in &samples {
            let e = sums.entry(s.category).or_default();
            e.0 += s.iou;
            e.1 += 1;
        }
        let categories: BTreeMap<Category, CategoryScore> = sums
            .into_iter()
            .map(|(c, (sum, n))| (c, CategoryScore { mean: sum / n as f64, count: n }))
            .collect();
        let mean = categories.values().map(|c| c.mean).sum::<f64>() / categories.len() as f64;
        Ok(EvalReport { mode, voxel_resolution, categories, mean, samples })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// One header line and one row labelled `label`.
    pub fn to_table(&self, label: &str) -> String {
        table(&[(label.to_string(), self)])
    }
}

/// Aligned text table with one column per category and a mean column.
pub fn table(rows: &[(String, &EvalReport)]) -> String {
    let mut cats: Vec<Category> = rows.iter().flat_map(|(_, r)| r.categories.keys().copied()).collect();
    cats.sort();
    cats.dedup();
    let label_w = rows.iter().map(|(l, _)| l.len()).max().unwrap_or(0).max(5);
    let widths: Vec<usize> = cats.iter().map(|c| c.name().len().max(5)).collect();
    let mut out = format!("{:<label_w$}", "model");
    for (c, w) in cats.iter().zip(&widths) {
        write!(out, "  {:>w$}", c.name()).expect("write to string");
    }
    out.push_str("   mean\n");
    for (label, report) in rows {
        write!(out, "{label:<label_w$}").expect("write to string");
        for (c, w) in cats.iter().zip(&widths) {
            match report.categories.get(c) {
                Some(s) => write!(out, "  {:>w$.3}", s.mean),
                None => write!(out, "  {:>w$}", "-"),
            }
            .expect("write to string");
        }
        writeln!(out, "  {:>5.3}", report.mean).expect("write to string");
    }
    out
}

/// Scores `predict(sample)` against the ground-truth mesh of every test
/// sample at `voxel_resolution`, spreading samples over `threads` workers.
pub fn evaluate_with(
    dataset: &Dataset,
    mode: PoseMode,
    voxel_resolution: usize,
    threads: usize,
    predict: impl Fn(&Sample) -> Result<Mesh> + Sync,
) -> Result<EvalReport> {
    let test = dataset.split(Split::Test);
    let mut gt_voxels = BTreeMap::new();
    for s in &test {
        if !gt_voxels.contains_key(&s.shape) {
            gt_voxels.insert(s.shape, voxelize(dataset.mesh(s.shape)?, voxel_resolution)?);
        }
    }
    let score = |s: &Sample| -> Result<SampleScore> {
        let pred = voxelize(&predict(s)?, voxel_resolution)?;
        let iou = voxel_iou(&pred, &gt_voxels[&s.shape])?;
        Ok(SampleScore { id: s.id.clone(), category: s.category, iou })
    };
    let threads = threads.clamp(1, test.len().max(1));
    let chunk = test.len().div_ceil(threads).max(1);
    let scores: Vec<Result<SampleScore>> = std::thread::scope(|scope| {
        let handles: Vec<_> = test
            .chunks(chunk)
            .map(|part| scope.spawn(|| part.iter().map(|s| score(s)).collect::<Vec<_>>()))
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("evaluation worker panicked")).collect()
    });
    EvalReport::from_scores(mode, voxel_resolution, scores.into_iter().collect::<Result<_>>()?)
}

/// Mesh for one sketch with the decoder conditioned on the predicted pose
/// or on the sample's ground-truth pose.
pub fn predict_mesh(nets: &Networks, sample: &Sample, mode: PoseMode) -> Result<(Mesh, CameraPose)> {
    no_grad(|| {
        let g = &nets.generator;
        let out = g.forward(sample.sketch.tensor())?;
        let pred = out.view.pose();
        let mesh = match mode {
            PoseMode::Pred => out.mesh,
            PoseMode::Gt => g.decode_at(&out.codes.z_s, &sample.pose)?,
        };
        Ok((mesh.detach(), pred))
    })
}

pub fn evaluate(nets: &Networks, dataset: &Dataset, mode: PoseMode, voxel_resolution: usize) -> Result<EvalReport> {
    evaluate_threads(nets, dataset, mode, voxel_resolution, 1)
}

pub fn evaluate_threads(
    nets: &Networks,
    dataset: &Dataset,
    mode: PoseMode,
    voxel_resolution: usize,
    threads: usize,
) -> Result<EvalReport> {
    if dataset.resolution() != nets.config.resolution {
        return Err(Error::Config(format!(
            "dataset resolution {} differs from model resolution {}",
            dataset.resolution(),
            nets.config.resolution
        )));
    }
    evaluate_with(dataset, mode, voxel_resolution, threads, |s| Ok(predict_mesh(nets, s, mode)?.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub rps: bool,
    pub cd: bool,
    pub checkpoint: PathBuf,
    pub checkpoint_digest: String,
    pub gt: EvalReport,
    pub pred: EvalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn to_table(&self, mode: PoseMode) -> String {
        let rows: Vec<(String, &EvalReport)> = self
            .rows
            .iter()
            .map(|r| (r.name.clone(), if mode == PoseMode::Gt { &r.gt } else { &r.pred }))
            .collect();
        table(&rows)
    }
}

/// The three ablation configurations in table order: supervised baseline,
/// random pose sampling with an MLP critic, and the full model.
pub fn ablation_configs(base: &TrainConfig) -> Vec<(&'static str, TrainConfig)> {
    [("baseline", false, false), ("+RPS", true, false), ("+RPS+CD", true, true)]
        .into_iter()
        .map(|(name, rps, cd)| (name, TrainConfig { rps, cd, ..base.clone() }))
        .collect()
}

/// Trains every ablation configuration from the same seed under
/// `out/<row>` and evaluates each in both pose modes.
pub fn ablation_matrix(
    base: &TrainConfig,
    dataset: &Dataset,
    out: impl AsRef<Path>,
    voxel_resolution: usize,
    threads: usize,
) -> Result<AblationReport> {
    let mut rows = Vec::new();
    for (name, cfg) in ablation_configs(base) {
        let dir = out.as_ref().join(name.trim_start_matches('+').replace('+', "_").to_lowercase());
        let outcome = train(&cfg, dataset, &dir, None)?;
        let (ck, _) = crate::checkpoint::Checkpoint::load(&outcome.final_checkpoint)?;
        let nets = ck.restore()?;
        rows.push(AblationRow {
            name: name.to_string(),
            rps: cfg.rps,
            cd: cfg.cd,
            checkpoint: outcome.final_checkpoint,
            checkpoint_digest: outcome.digest,
            gt: evaluate_threads(&nets, dataset, PoseMode::Gt, voxel_resolution, threads)?,
            pred: evaluate_threads(&nets, dataset, PoseMode::Pred, voxel_resolution, threads)?,
        });
    }
    Ok(AblationReport { rows })
}
