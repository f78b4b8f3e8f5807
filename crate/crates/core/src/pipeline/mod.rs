//! Training orchestration: random pose sampling, the random-view branch,
//! alternating critic and generator updates, schedules, checkpoints and
//! inference.

mod pose;

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use pose::{sample_pose, PoseDistribution};

use crate::checkpoint::Checkpoint;
use crate::dataset::{Dataset, Sample, Split};
use crate::error::{Error, Result};
use crate::geometry::{CameraPose, Mesh, Projection};
use crate::losses::{
    discriminator_loss, generator_adv_loss, multiscale_iou, pose_embedding, regularizer_bundle, total_loss,
    viewpoint_loss, LossReport, LossTerms, LossWeights,
};
use crate::networks::{Critic, CriticKind, DiscriminatorState, GeneratorOutput, NetworkConfig, Networks};
use crate::rasterizer::{hard_rasterize, silhouette_pyramid, soft_rasterize, soft_rasterize_trig, SilhouetteMap, SoftSettings};
use crate::tensor::{adam_step, AdamConfig, AdamState};
use crate::tensor::{grad, no_grad, Tensor};

/// Pose at which the supervision silhouette of `M` is rendered.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Supervision {
    Gt,
    Pred,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    /// Multiplier applied every `decay_every` epochs.
    pub lr_decay: f64,
    /// Defaults to 40% of `epochs` (800 of 2000).
    pub decay_every: Option<usize>,
    pub beta1: f64,
    pub beta2: f64,
    pub batch_size: usize,
    /// Random views rendered per mesh for the critic.
    pub views: usize,
    pub sigma: f64,
    pub poses: PoseDistribution,
    pub weights: LossWeights,
    /// Fraction of each critic stage spent fading in its new layers.
    pub fade_fraction: f64,
    pub seed: u64,
    pub supervision: Supervision,
    pub rps: bool,
    pub cd: bool,
    /// Write a checkpoint every this many epochs; 0 writes only the last.
    pub checkpoint_every: usize,
    pub network: NetworkConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 2000,
            lr: 1e-4,
            lr_decay: 0.3,
            decay_every: None,
            beta1: 0.9,
            beta2: 0.999,
            batch_size: 4,
            views: 3,
            sigma: 1e-4,
            poses: PoseDistribution::default(),
            weights: LossWeights::default(),
            fade_fraction: 0.3,
            seed: 0,
            supervision: Supervision::Pred,
            rps: true,
            cd: true,
            checkpoint_every: 0,
            network: NetworkConfig::default(),
        }
    }
}

impl TrainConfig {
    /// 200 epochs with the desk-scale network widths.
    pub fn desk() -> TrainConfig {
        TrainConfig { epochs: 200, network: NetworkConfig::desk(), ..TrainConfig::default() }
    }

    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.weights.validate()?;
        self.poses.validate()?;
        if self.epochs == 0 || self.batch_size == 0 || self.views == 0 {
            return Err(Error::Config("epochs, batch size and views must be positive".into()));
        }
        if !(self.lr > 0.0) || !(self.sigma > 0.0) || !(self.lr_decay > 0.0) {
            return Err(Error::Config("lr, lr_decay and sigma must be positive".into()));
        }
        if self.decay_every == Some(0) {
            return Err(Error::Config("decay_every must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.fade_fraction) {
            return Err(Error::Config(format!("fade fraction {} outside [0, 1]", self.fade_fraction)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        let r = self.network.resolution;
        if r % (1 << (self.weights.levels() - 1)) != 0 {
            return Err(Error::Config(format!("{} pyramid levels do not divide resolution {r}", self.weights.levels())));
        }
        if self.cd && !self.rps {
            return Err(Error::Config("the critic needs random pose sampling".into()));
        }
        Ok(())
    }

    pub fn critic_kind(&self) -> CriticKind {
        if self.cd {
            CriticKind::Progressive
        } else {
            CriticKind::Mlp
        }
    }

    fn decay_every(&self) -> usize {
        self.decay_every.unwrap_or_else(|| ((self.epochs as f64 * 0.4).round() as usize).max(1))
    }

    fn soft(&self) -> SoftSettings {
        SoftSettings::new(self.network.resolution, self.sigma)
    }
}

/// Learning rate used throughout `epoch` (0-based).
pub fn lr_at(config: &TrainConfig, epoch: usize) -> f64 {
    config.lr * config.lr_decay.powi((epoch / config.decay_every()) as i32)
}

/// Critic stage and fade-in weight at optimizer step `step` of `total`.
/// Training time is split evenly between stages; each stage above the first
/// fades in over the first `fade` fraction of its share.
pub fn critic_state_at(step: u64, total: u64, stages: usize, fade: f64) -> DiscriminatorState {
    let per = (total as f64 / stages as f64).max(1.0);
    let stage = ((step as f64 / per) as usize).min(stages - 1);
    if stage == 0 {
        return DiscriminatorState { stage, alpha: 1.0 };
    }
    let into = step as f64 - stage as f64 * per;
    let alpha = if fade <= 0.0 { 1.0 } else { (into / (fade * per)).clamp(0.0, 1.0) };
    DiscriminatorState { stage, alpha }
}

/// One optimizer step's log record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    pub stage: Option<usize>,
    pub alpha: Option<f64>,
    pub loss: LossReport,
    pub d_loss: Option<f64>,
}

/// Generator forward results for one sample, kept alive across the critic
/// and generator updates of a batch.
struct Forward {
    out: GeneratorOutput,
    random_mesh: Option<Mesh>,
}

pub struct Trainer {
    pub config: TrainConfig,
    pub nets: Networks,
    gen_params: Vec<Tensor>,
    critic_params: Vec<Tensor>,
    gen_opt: AdamState,
    critic_opt: AdamState,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed optimizer steps.
    pub step: u64,
    projection: Projection,
}

impl Trainer {
    pub fn new(config: &TrainConfig) -> Result<Trainer> {
        config.validate()?;
        let nets = Networks::new(&config.network, config.critic_kind(), config.seed)?;
        Ok(Trainer::with_networks(config, nets))
    }

    fn with_networks(config: &TrainConfig, nets: Networks) -> Trainer {
        let gen_params: Vec<Tensor> = nets.generator.named_parameters().into_iter().map(|(_, t)| t).collect();
        let critic_params: Vec<Tensor> = nets.critic.named_parameters().into_iter().map(|(_, t)| t).collect();
        Trainer {
            config: config.clone(),
            gen_opt: AdamState::new(&gen_params),
            critic_opt: AdamState::new(&critic_params),
            gen_params,
            critic_params,
            nets,
            epoch: 0,
            step: 0,
            projection: Projection::default(),
        }
    }

    fn adam(&self, epoch: usize) -> AdamConfig {
        AdamConfig { lr: lr_at(&self.config, epoch), beta1: self.config.beta1, beta2: self.config.beta2, ..AdamConfig::default() }
    }

    fn clear_grads(&self) {
        for p in self.gen_params.iter().chain(&self.critic_params) {
            p.zero_grad();
        }
    }

    fn forward(&self, batch: &[&Sample], rng: &mut ChaCha8Rng) -> Result<Vec<Forward>> {
        batch
            .iter()
            .map(|s| {
                let out = self.nets.generator.forward(s.sketch.tensor())?;
                let random_mesh = if self.config.rps {
                    let pose = sample_pose(&self.config.poses, rng);
                    Some(self.nets.generator.decode_at(&out.codes.z_s, &pose)?)
                } else {
                    None
                };
                Ok(Forward { out, random_mesh })
            })
            .collect()
    }

    fn render(&self, mesh: &Mesh, pose: &CameraPose) -> Result<SilhouetteMap> {
        soft_rasterize(mesh, pose, &self.projection, self.config.soft())
    }

    /// Critic update on detached renders of `M` (real) and `M_r` (fake)
    /// at shared random poses. Returns the mean critic loss.
    fn critic_update(&mut self, fwd: &[Forward], epoch: usize, rng: &mut ChaCha8Rng) -> Result<f64> {
        let n = (fwd.len() * self.config.views) as f64;
        let mut total = 0.0;
        for f in fwd {
            let real_mesh = f.out.mesh.detach();
            let fake_mesh = f.random_mesh.as_ref().expect("random branch enabled").detach();
            for _ in 0..self.config.views {
                let pose = sample_pose(&self.config.poses, rng);
                let (real, fake) = no_grad(|| -> Result<_> {
                    Ok((self.render(&real_mesh, &pose)?.to_vec(), self.render(&fake_mesh, &pose)?.tensor().clone()))
                })?;
                let r = self.config.network.resolution;
                let real = Tensor::param(real, &[r, r])?;
                let score_real = self.nets.critic.score(&real)?;
                let g = grad(&score_real, &[&real], true)?;
                let score_fake = self.nets.critic.score(&fake)?;
                let loss = discriminator_loss(&score_real, &score_fake, &g[0].square().sum(), self.config.weights.gamma)?;
                let value = loss.item();
                if !value.is_finite() {
                    return Err(Error::NonFinite { term: "critic".into(), value });
                }
                total += value;
                loss.scale(1.0 / n).backward(false)?;
            }
        }
        for p in &self.critic_params {
            p.ensure_grad();
        }
        let adam = self.adam(epoch);
        adam_step(&self.critic_params, &mut self.critic_opt, &adam)?;
        self.clear_grads();
        Ok(total / n)
    }

    /// Generator update from the batch's forward passes. Returns the mean
    /// loss report.
    fn generator_update(&mut self, batch: &[&Sample], fwd: &[Forward], epoch: usize, rng: &mut ChaCha8Rng) -> Result<LossReport> {
        let cfg = &self.config;
        let levels = cfg.weights.levels();
        let b = batch.len() as f64;
        let mut mean = LossReport::default();
        for (s, f) in batch.iter().zip(fwd) {
            let rendered = match cfg.supervision {
                Supervision::Pred => {
                    soft_rasterize_trig(&f.out.mesh, &f.out.view.trig, f.out.view.distance, &self.projection, cfg.soft())?
                }
                Supervision::Gt => self.render(&f.out.mesh, &s.pose)?,
            };
            let sp = multiscale_iou(
                &silhouette_pyramid(&rendered, levels)?,
                &silhouette_pyramid(&s.silhouette, levels)?,
                &cfg.weights.lambda_si,
            )?;
            let v = viewpoint_loss(&f.out.view.embedding, &pose_embedding(&s.pose))?;
            let r = regularizer_bundle(&f.out.mesh)?;
            let sd = match &f.random_mesh {
                Some(m) => {
                    let mut acc = Tensor::scalar(0.0);
                    for _ in 0..cfg.views {
                        let pose = sample_pose(&cfg.poses, rng);
                        let score = self.nets.critic.score(self.render(m, &pose)?.tensor())?;
                        acc = acc.add(&generator_adv_loss(&score))?;
                    }
                    Some(acc.scale(1.0 / cfg.views as f64))
                }
                None => None,
            };
            let (loss, report) = total_loss(&LossTerms { sp: Some(sp), r: Some(r), v: Some(v), sd }, &cfg.weights)?;
            loss.scale(1.0 / b).backward(false)?;
            for (acc, x) in [
                (&mut mean.sp, report.sp),
                (&mut mean.r, report.r),
                (&mut mean.v, report.v),
                (&mut mean.sd, report.sd),
                (&mut mean.dd, report.dd),
                (&mut mean.total, report.total),
            ] {
                *acc += x / b;
            }
        }
        for p in &self.gen_params {
            p.ensure_grad();
        }
        let adam = self.adam(epoch);
        adam_step(&self.gen_params, &mut self.gen_opt, &adam)?;
        self.clear_grads();
        Ok(mean)
    }

    /// One critic step on a fresh forward pass. Generator parameters are
    /// left untouched.
    pub fn discriminator_step(&mut self, batch: &[&Sample], rng: &mut ChaCha8Rng) -> Result<f64> {
        if !self.config.rps {
            return Err(Error::Config("critic steps need random pose sampling".into()));
        }
        let fwd = self.forward(batch, rng)?;
        self.critic_update(&fwd, self.epoch, rng)
    }

    /// One generator step. Critic parameters are left untouched.
    pub fn generator_step(&mut self, batch: &[&Sample], rng: &mut ChaCha8Rng) -> Result<LossReport> {
        let fwd = self.forward(batch, rng)?;
        self.generator_update(batch, &fwd, self.epoch, rng)
    }

    /// Critic step then generator step on one batch. The generator forward
    /// pass is shared: the critic step only sees detached meshes and does
    /// not change generator parameters.
    pub fn train_batch(&mut self, batch: &[&Sample], total_steps: u64, rng: &mut ChaCha8Rng) -> Result<StepLog> {
        let epoch = self.epoch;
        let (mut stage, mut alpha) = (None, None);
        if let Critic::Progressive(d) = &mut self.nets.critic {
            let st = critic_state_at(self.step, total_steps, d.num_stages(), self.config.fade_fraction);
            d.set_state(st)?;
            stage = Some(st.stage);
            alpha = Some(st.alpha);
        }
        let fwd = self.forward(batch, rng)?;
        let d_loss = if self.config.rps { Some(self.critic_update(&fwd, epoch, rng)?) } else { None };
        let loss = self.generator_update(batch, &fwd, epoch, rng)?;
        self.step += 1;
        Ok(StepLog { step: self.step, epoch, lr: lr_at(&self.config, epoch), stage, alpha, loss, d_loss })
    }

    fn steps_per_epoch(&self, train: usize) -> u64 {
        train.div_ceil(self.config.batch_size) as u64
    }

    /// Runs epoch `self.epoch` over `train` and advances the counter.
    pub fn run_epoch(&mut self, train: &[&Sample], log: &mut dyn FnMut(&StepLog) -> Result<()>) -> Result<()> {
        let total = self.steps_per_epoch(train.len()) * self.config.epochs as u64;
        let mut rng = epoch_rng(self.config.seed, self.epoch);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        for chunk in order.chunks(self.config.batch_size) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| train[i]).collect();
            let record = self.train_batch(&batch, total, &mut rng)?;
            log(&record)?;
        }
        self.epoch += 1;
        Ok(())
    }

    /// Parameters, optimizer moments and counters.
    pub fn checkpoint(&self, dataset_digest: &str) -> Checkpoint {
        let meta = serde_json::json!({
            "epoch": self.epoch,
            "step": self.step,
            "dataset_digest": dataset_digest,
            "train_config": self.config,
            "generator_adam_step": self.gen_opt.step,
            "critic_adam_step": self.critic_opt.step,
        });
        let mut ck = Checkpoint::from_networks(&self.nets, meta);
        let named = self.nets.named_parameters();
        let (gen_names, critic_names) = named.split_at(self.gen_params.len());
        for (prefix, names, st) in [("adam.generator", gen_names, &self.gen_opt), ("adam.critic", critic_names, &self.critic_opt)] {
            for (i, (name, t)) in names.iter().enumerate() {
                ck.push(format!("{prefix}.m/{name}"), t.shape().to_vec(), st.m[i].clone());
                ck.push(format!("{prefix}.v/{name}"), t.shape().to_vec(), st.v[i].clone());
            }
        }
        ck
    }

    /// Restores a trainer saved by [`Trainer::checkpoint`]. The stored
    /// training configuration must equal `config`, except for `epochs`.
    pub fn resume(config: &TrainConfig, ck: &Checkpoint) -> Result<Trainer> {
        config.validate()?;
        let stored: TrainConfig = serde_json::from_value(ck.metadata["train_config"].clone())
            .map_err(|e| Error::Checkpoint(format!("no training configuration: {e}")))?;
        if (TrainConfig { epochs: config.epochs, ..stored }) != *config {
            return Err(Error::Config("resume configuration differs from the checkpoint".into()));
        }
        let nets = ck.restore()?;
        let mut t = Trainer::with_networks(config, nets);
        let count = |key: &str| {
            ck.metadata[key].as_u64().ok_or_else(|| Error::Checkpoint(format!("metadata field `{key}` missing")))
        };
        t.epoch = count("epoch")? as usize;
        t.step = count("step")?;
        t.gen_opt.step = count("generator_adam_step")?;
        t.critic_opt.step = count("critic_adam_step")?;
        let named = t.nets.named_parameters();
        let (gen_names, critic_names) = named.split_at(t.gen_params.len());
        for (prefix, names, st) in
            [("adam.generator", gen_names, &mut t.gen_opt), ("adam.critic", critic_names, &mut t.critic_opt)]
        {
            for (i, (name, _)) in names.iter().enumerate() {
                for (kind, buf) in [("m", &mut st.m[i]), ("v", &mut st.v[i])] {
                    let key = format!("{prefix}.{kind}/{name}");
                    let stored = ck.tensor(&key).ok_or_else(|| Error::Checkpoint(format!("missing tensor `{key}`")))?;
                    if stored.data.len() != buf.len() {
                        return Err(Error::Checkpoint(format!("tensor `{key}` has the wrong size")));
                    }
                    buf.copy_from_slice(&stored.data);
                }
            }
        }
        Ok(t)
    }
}

/// Per-epoch random stream, so a resumed run replays the same draws.
fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    rng
}

/// Files written by [`train`].
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub final_checkpoint: PathBuf,
    pub digest: String,
    pub log: PathBuf,
    pub last: Option<StepLog>,
}

/// Trains on the train split of `dataset`, writing `train_log.jsonl`,
/// periodic `epoch_NNNN.skf` checkpoints and `final.skf` under `out`.
/// With `resume`, continues from that checkpoint and appends to the log.
pub fn train(config: &TrainConfig, dataset: &Dataset, out: impl AsRef<Path>, resume: Option<&Path>) -> Result<TrainOutcome> {
    config.validate()?;
    let out = out.as_ref();
    if dataset.resolution() != config.network.resolution {
        return Err(Error::Config(format!(
            "dataset resolution {} differs from model resolution {}",
            dataset.resolution(),
            config.network.resolution
        )));
    }
    let train_set = dataset.split(Split::Train);
    if train_set.is_empty() {
        return Err(Error::Dataset("the train split is empty".into()));
    }
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let digest = dataset.digest();
    let mut trainer = match resume {
        Some(path) => {
            let (ck, _) = Checkpoint::load(path)?;
            if ck.metadata["dataset_digest"].as_str() != Some(digest.as_str()) {
                return Err(Error::Config("checkpoint was trained on a different dataset".into()));
            }
            Trainer::resume(config, &ck)?
        }
        None => Trainer::new(config)?,
    };
    let log_path = out.join("train_log.jsonl");
    let file = std::fs::OpenOptions::new()
        .create(true)
        .append(resume.is_some())
        .write(true)
        .truncate(resume.is_none())
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;
    let mut writer = std::io::BufWriter::new(file);
    let mut last = None;
    while trainer.epoch < config.epochs {
        trainer.run_epoch(&train_set, &mut |rec| {
            let line = serde_json::to_string(rec)?;
            writeln!(writer, "{line}").map_err(|e| Error::io(&log_path, e))?;
            last = Some(rec.clone());
            Ok(())
        })?;
        writer.flush().map_err(|e| Error::io(&log_path, e))?;
        if let Some(r) = &last {
            log::info!("epoch {} step {} loss {:.4}", trainer.epoch, r.step, r.loss.total);
        }
        let every = config.checkpoint_every;
        if every > 0 && trainer.epoch % every == 0 {
            let path = out.join(format!("epoch_{:04}.skf", trainer.epoch));
            trainer.checkpoint(&digest).save(&path)?;
        }
    }
    let final_path = out.join("final.skf");
    let digest = trainer.checkpoint(&digest).save(&final_path)?;
    Ok(TrainOutcome { final_checkpoint: final_path, digest, log: log_path, last })
}

/// Mesh and predicted pose for one sketch.
pub fn infer(nets: &Networks, sketch: &SilhouetteMap) -> Result<(Mesh, CameraPose)> {
    let r = nets.config.resolution;
    if sketch.resolution() != r {
        return Err(Error::Shape(format!("sketch is {0}x{0}, the model expects {r}x{r}", sketch.resolution())));
    }
    nets.generator.infer(sketch)
}

/// Pixel IoU between `target` and the hard silhouette of `mesh` at `pose`.
pub fn round_trip_iou(mesh: &Mesh, pose: &CameraPose, target: &SilhouetteMap) -> Result<f64> {
    let rendered = hard_rasterize(mesh, pose, &Projection::default(), target.resolution())?;
    let (a, b) = (rendered.mask(), target.mask());
    let inter = a.iter().zip(&b).filter(|(x, y)| **x && **y).count();
    let union = a.iter().zip(&b).filter(|(x, y)| **x || **y).count();
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}
