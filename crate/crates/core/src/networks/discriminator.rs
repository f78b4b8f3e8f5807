//! Shape critics: a progressively grown convolutional discriminator and an
//! MLP variant.

use rand::Rng;

use super::layers::{replace_parameters, Conv, Linear};
use super::DiscriminatorConfig;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const SLOPE: f64 = 0.2;

/// Active stage and fade-in weight of a progressive discriminator.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DiscriminatorState {
    pub stage: usize,
    pub alpha: f64,
}

/// Stage `k` reads `base·2^k` images. Stage 0 owns the trunk (two conv +
/// pool blocks and a linear score); each higher stage adds a conv + pool
/// block in front and its own 1×1 input layer. All stages are allocated up
/// front; growing only changes which ones run.
#[derive(Debug, Clone)]
pub struct ProgressiveDiscriminator {
    base_resolution: usize,
    from_gray: Vec<Conv>,
    blocks: Vec<Conv>,
    trunk: [Conv; 2],
    score: Linear,
    state: DiscriminatorState,
}

impl ProgressiveDiscriminator {
    pub fn new(rng: &mut impl Rng, cfg: &DiscriminatorConfig) -> Result<ProgressiveDiscriminator> {
        let stages = cfg.stages()?;
        if cfg.channels.len() != stages {
            return Err(Error::Config(format!(
                "discriminator needs {stages} channel counts for {}..{}, got {}",
                cfg.base_resolution,
                cfg.max_resolution,
                cfg.channels.len()
            )));
        }
        let c0 = cfg.channels[0];
        let trunk = [Conv::new(rng, c0, c0, 3), Conv::new(rng, c0, c0, 3)];
        let side = cfg.base_resolution / 4;
        let score = Linear::new(rng, c0 * side * side, 1);
        let mut from_gray = Vec::new();
        let mut blocks = Vec::new();
        for k in 0..stages {
            from_gray.push(Conv::new(rng, 1, cfg.channels[k], 1));
            if k > 0 {
                blocks.push(Conv::new(rng, cfg.channels[k], cfg.channels[k - 1], 3));
            }
        }
        Ok(ProgressiveDiscriminator {
            base_resolution: cfg.base_resolution,
            from_gray,
            blocks,
            trunk,
            score,
            state: DiscriminatorState { stage: 0, alpha: 1.0 },
        })
    }

    pub fn state(&self) -> DiscriminatorState {
        self.state
    }

    pub fn set_state(&mut self, state: DiscriminatorState) -> Result<()> {
        if state.stage >= self.from_gray.len() {
            return Err(Error::Config(format!("discriminator has no stage {}", state.stage)));
        }
        if !(0.0..=1.0).contains(&state.alpha) {
            return Err(Error::Config(format!("fade-in alpha {} outside [0, 1]", state.alpha)));
        }
        self.state = state;
        Ok(())
    }

    pub fn set_alpha(&mut self, alpha: f64) -> Result<()> {
        self.set_state(DiscriminatorState { alpha, ..self.state })
    }

    /// Activates the next stage with alpha 0. Existing weights are untouched.
    pub fn grow(&mut self) -> Result<()> {
        if self.state.stage + 1 >= self.from_gray.len() {
            return Err(Error::Config(format!(
                "discriminator already at its maximum resolution {}",
                self.resolution()
            )));
        }
        self.state = DiscriminatorState { stage: self.state.stage + 1, alpha: 0.0 };
        Ok(())
    }

    pub fn num_stages(&self) -> usize {
        self.from_gray.len()
    }

    pub fn resolution(&self) -> usize {
        self.base_resolution << self.state.stage
    }

    /// Score of a `[R, R]` image at the current stage resolution.
    pub fn score(&self, image: &Tensor) -> Result<Tensor> {
        let r = self.resolution();
        if image.shape() != [r, r] {
            return Err(Error::Shape(format!(
                "discriminator stage {} expects {r}x{r}, got {:?}",
                self.state.stage,
                image.shape()
            )));
        }
        let x = image.reshape(&[1, r, r])?;
        let s = self.state.stage;
        let mut h = self.from_gray[s].forward(&x)?.leaky_relu(SLOPE);
        if s > 0 {
            h = self.blocks[s - 1].forward(&h)?.leaky_relu(SLOPE).downsample2x()?;
            let a = self.state.alpha;
            if a < 1.0 {
                let old = self.from_gray[s - 1].forward(&x.downsample2x()?)?.leaky_relu(SLOPE);
                h = if a == 0.0 { old } else { h.scale(a).add(&old.scale(1.0 - a))? };
            }
            for k in (1..s).rev() {
                h = self.blocks[k - 1].forward(&h)?.leaky_relu(SLOPE).downsample2x()?;
            }
        }
        for conv in &self.trunk {
            h = conv.forward(&h)?.leaky_relu(SLOPE).downsample2x()?;
        }
        let flat = h.reshape(&[1, h.numel()])?;
        self.score.forward(&flat)?.reshape(&[])
    }

    pub(crate) fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = self.trunk.iter_mut().flat_map(|c| c.params_mut()).collect();
        out.extend(self.score.params_mut());
        out.extend(self.from_gray.iter_mut().flat_map(|c| c.params_mut()));
        out.extend(self.blocks.iter_mut().flat_map(|c| c.params_mut()));
        out
    }

    pub(crate) fn collect(&self, out: &mut Vec<(String, Tensor)>) {
        self.trunk[0].collect("disc.trunk0", out);
        self.trunk[1].collect("disc.trunk1", out);
        self.score.collect("disc.score", out);
        for (k, c) in self.from_gray.iter().enumerate() {
            c.collect(&format!("disc.gray{k}"), out);
        }
        for (k, c) in self.blocks.iter().enumerate() {
            c.collect(&format!("disc.block{}", k + 1), out);
        }
    }
}

/// Flattened image through three fully-connected layers.
#[derive(Debug, Clone)]
pub struct MlpDiscriminator {
    resolution: usize,
    layers: [Linear; 3],
}

impl MlpDiscriminator {
    pub fn new(rng: &mut impl Rng, resolution: usize, hidden: usize) -> MlpDiscriminator {
        MlpDiscriminator {
            resolution,
            layers: [
                Linear::new(rng, resolution * resolution, hidden),
                Linear::new(rng, hidden, hidden),
                Linear::new(rng, hidden, 1),
            ],
        }
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn score(&self, image: &Tensor) -> Result<Tensor> {
        let r = self.resolution;
        if image.shape() != [r, r] {
            return Err(Error::Shape(format!("MLP discriminator expects {r}x{r}, got {:?}", image.shape())));
        }
        let mut h = image.reshape(&[1, r * r])?;
        h = self.layers[0].forward(&h)?.leaky_relu(SLOPE);
        h = self.layers[1].forward(&h)?.leaky_relu(SLOPE);
        self.layers[2].forward(&h)?.reshape(&[])
    }

    pub(crate) fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }

    pub(crate) fn collect(&self, out: &mut Vec<(String, Tensor)>) {
        for (j, l) in self.layers.iter().enumerate() {
            l.collect(&format!("mlp{j}"), out);
        }
    }
}

/// Whichever critic a configuration trains.
#[derive(Debug, Clone)]
pub enum Critic {
    Progressive(ProgressiveDiscriminator),
    Mlp(MlpDiscriminator),
}

impl Critic {
    /// Input resolution the critic currently expects.
    pub fn resolution(&self) -> usize {
        match self {
            Critic::Progressive(d) => d.resolution(),
            Critic::Mlp(d) => d.resolution(),
        }
    }

    /// Average-pools a square image down to the critic's resolution, then
    /// scores it.
    pub fn score(&self, image: &Tensor) -> Result<Tensor> {
        let x = downsample_to(image, self.resolution())?;
        match self {
            Critic::Progressive(d) => d.score(&x),
            Critic::Mlp(d) => d.score(&x),
        }
    }

    /// A copy whose parameters are `params`, in `named_parameters` order.
    pub fn with_parameters(&self, params: &[Tensor]) -> Result<Critic> {
        let mut c = self.clone();
        let slots = match &mut c {
            Critic::Progressive(d) => d.params_mut(),
            Critic::Mlp(d) => d.params_mut(),
        };
        replace_parameters(slots, params)?;
        Ok(c)
    }

    pub fn named_parameters(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        match self {
            Critic::Progressive(d) => d.collect(&mut out),
            Critic::Mlp(d) => d.collect(&mut out),
        }
        out
    }
}

/// Repeated 2× average pooling of an `[R, R]` image to `[target, target]`.
pub fn downsample_to(image: &Tensor, target: usize) -> Result<Tensor> {
    let mut r = match *image.shape() {
        [h, w] if h == w => h,
        _ => return Err(Error::Shape(format!("expected a square image, got {:?}", image.shape()))),
    };
    if r < target || r % target != 0 || !(r / target).is_power_of_two() {
        return Err(Error::Shape(format!("cannot pool {r}x{r} down to {target}x{target}")));
    }
    let mut x = image.clone();
    while r > target {
        x = x.reshape(&[1, r, r])?.downsample2x()?;
        r /= 2;
        x = x.reshape(&[r, r])?;
    }
    Ok(x)
}
