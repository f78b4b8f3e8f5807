//! Sketch encoder, viewpoint heads and template decoder.

use std::f64::consts::FRAC_PI_2;

use rand::Rng;

use super::layers::{l2_normalize, replace_parameters, Conv, Linear};
use super::NetworkConfig;
use crate::error::{Error, Result};
use crate::geometry::{apply_offsets, icosphere, CameraPose, Mesh, ViewTrig};
use crate::rasterizer::SilhouetteMap;
use crate::tensor::Tensor;

/// Unit-norm shape code `z_s` and view latent `z_l`, both `[1, code_dim]`.
#[derive(Debug, Clone)]
pub struct EncoderOutput {
    pub z_s: Tensor,
    pub z_l: Tensor,
}

/// Convolutional trunk with two normalized fully-connected heads.
#[derive(Debug, Clone)]
pub struct Encoder {
    resolution: usize,
    convs: Vec<Conv>,
    shape_head: [Linear; 2],
    view_head: [Linear; 2],
}

impl Encoder {
    pub fn new(rng: &mut impl Rng, cfg: &NetworkConfig) -> Encoder {
        let mut convs = Vec::new();
        let mut c_in = 1;
        for &c in &cfg.encoder_channels {
            convs.push(Conv::new(rng, c_in, c, 3));
            c_in = c;
        }
        let side = cfg.resolution >> cfg.encoder_channels.len();
        let flat = c_in * side * side;
        let head = |rng: &mut _| [Linear::new(rng, flat, cfg.head_hidden), Linear::new(rng, cfg.head_hidden, cfg.code_dim)];
        let shape_head = head(rng);
        let view_head = head(rng);
        Encoder { resolution: cfg.resolution, convs, shape_head, view_head }
    }

    /// `image` is `[R, R]` or `[1, R, R]` with values in `[0, 1]`.
    pub fn encode(&self, image: &Tensor) -> Result<EncoderOutput> {
        let r = self.resolution;
        let x = match *image.shape() {
            [h, w] if h == r && w == r => image.reshape(&[1, r, r])?,
            [1, h, w] if h == r && w == r => image.clone(),
            _ => {
                return Err(Error::Shape(format!(
                    "encoder expects a {r}x{r} image, got {:?}",
                    image.shape()
                )))
            }
        };
        let mut h = x;
        for conv in &self.convs {
            h = conv.forward(&h)?.relu().downsample2x()?;
        }
        let flat = h.reshape(&[1, h.numel()])?;
        let head = |layers: &[Linear; 2]| -> Result<Tensor> {
            l2_normalize(&layers[1].forward(&layers[0].forward(&flat)?.relu())?)
        };
        Ok(EncoderOutput { z_s: head(&self.shape_head)?, z_l: head(&self.view_head)? })
    }

    pub(crate) fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = self.convs.iter_mut().flat_map(|c| c.params_mut()).collect();
        out.extend(self.shape_head.iter_mut().flat_map(|l| l.params_mut()));
        out.extend(self.view_head.iter_mut().flat_map(|l| l.params_mut()));
        out
    }

    pub(crate) fn collect(&self, out: &mut Vec<(String, Tensor)>) {
        for (i, c) in self.convs.iter().enumerate() {
            c.collect(&format!("encoder.conv{i}"), out);
        }
        for (j, l) in self.shape_head.iter().enumerate() {
            l.collect(&format!("encoder.shape{j}"), out);
        }
        for (j, l) in self.view_head.iter().enumerate() {
            l.collect(&format!("encoder.view{j}"), out);
        }
    }
}

/// A predicted viewpoint. Elevation is `90°·tanh(e)`; azimuth comes from a
/// normalized `(sin, cos)` pair.
#[derive(Debug, Clone)]
pub struct ViewPrediction {
    pub trig: ViewTrig,
    /// `[sin az, cos az, sin el, cos el]`.
    pub embedding: Tensor,
    pub distance: f64,
}

impl ViewPrediction {
    /// Constant prediction for a known pose.
    pub fn from_pose(pose: &CameraPose) -> ViewPrediction {
        let e = pose.embedding();
        let s = Tensor::scalar;
        ViewPrediction {
            trig: ViewTrig { sin_az: s(e[0]), cos_az: s(e[1]), sin_el: s(e[2]), cos_el: s(e[3]) },
            embedding: Tensor::new(e.to_vec(), &[4]).expect("four entries"),
            distance: pose.distance,
        }
    }

    pub fn pose(&self) -> CameraPose {
        let e = self.embedding.to_vec();
        let azimuth = e[0].atan2(e[1]).to_degrees().rem_euclid(360.0);
        let elevation = e[2].atan2(e[3]).to_degrees();
        // rem_euclid can round up to exactly 360 for tiny negative angles.
        let azimuth = if azimuth >= 360.0 { 0.0 } else { azimuth };
        CameraPose { elevation, azimuth, distance: self.distance }
    }
}

/// Two fully-connected layers from `z_l` to `(e, s, c)`.
#[derive(Debug, Clone)]
pub struct ViewPredictor {
    layers: [Linear; 2],
    distance: f64,
}

impl ViewPredictor {
    pub fn new(rng: &mut impl Rng, cfg: &NetworkConfig) -> ViewPredictor {
        ViewPredictor {
            layers: [Linear::new(rng, cfg.code_dim, cfg.head_hidden), Linear::new(rng, cfg.head_hidden, 3)],
            distance: cfg.camera_distance,
        }
    }

    pub fn predict(&self, z_l: &Tensor) -> Result<ViewPrediction> {
        let out = self.layers[1].forward(&self.layers[0].forward(z_l)?.relu())?.flatten();
        let el = out.slice(0, 1)?.reshape(&[])?.tanh().scale(FRAC_PI_2);
        let sc = out.slice(1, 2)?;
        let sc = sc.div(&sc.square().sum().add_scalar(1e-12).sqrt()?)?;
        let (sin_az, cos_az) = (sc.slice(0, 1)?.reshape(&[])?, sc.slice(1, 1)?.reshape(&[])?);
        let (sin_el, cos_el) = (el.sin(), el.cos());
        let embedding = Tensor::concat(&[&sin_az, &cos_az, &sin_el, &cos_el])?;
        Ok(ViewPrediction { trig: ViewTrig { sin_el, cos_el, sin_az, cos_az }, embedding, distance: self.distance })
    }

    pub(crate) fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }

    pub(crate) fn collect(&self, out: &mut Vec<(String, Tensor)>) {
        for (j, l) in self.layers.iter().enumerate() {
            l.collect(&format!("view{j}"), out);
        }
    }
}

/// Two fully-connected layers from a pose embedding to `z_v`.
#[derive(Debug, Clone)]
pub struct ViewEmbedder {
    layers: [Linear; 2],
}

impl ViewEmbedder {
    pub fn new(rng: &mut impl Rng, cfg: &NetworkConfig) -> ViewEmbedder {
        ViewEmbedder { layers: [Linear::new(rng, 4, cfg.head_hidden), Linear::new(rng, cfg.head_hidden, cfg.view_dim)] }
    }

    /// `embedding` is `[sin az, cos az, sin el, cos el]`; returns `[1, view_dim]`.
    pub fn embed(&self, embedding: &Tensor) -> Result<Tensor> {
        let x = embedding.reshape(&[1, 4])?;
        self.layers[1].forward(&self.layers[0].forward(&x)?.relu())
    }

    pub(crate) fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }

    pub(crate) fn collect(&self, out: &mut Vec<(String, Tensor)>) {
        for (j, l) in self.layers.iter().enumerate() {
            l.collect(&format!("embed{j}"), out);
        }
    }
}

/// MLP from `concat(z_s, z_v)` to per-vertex offsets of the template. Each
/// coordinate is `tanh·max_offset/√3`, so an offset never exceeds
/// `max_offset` in length.
#[derive(Debug, Clone)]
pub struct Decoder {
    template: Mesh,
    layers: Vec<Linear>,
    max_offset: f64,
}

impl Decoder {
    pub fn new(rng: &mut impl Rng, cfg: &NetworkConfig) -> Result<Decoder> {
        let template = icosphere(cfg.template_subdivisions)?;
        let mut layers = Vec::new();
        let mut width = cfg.code_dim + cfg.view_dim;
        for &h in &cfg.decoder_hidden {
            layers.push(Linear::new(rng, width, h));
            width = h;
        }
        layers.push(Linear::zeros(width, template.num_vertices() * 3));
        Ok(Decoder { template, layers, max_offset: cfg.max_offset })
    }

    pub fn template(&self) -> &Mesh {
        &self.template
    }

    pub fn decode(&self, z_s: &Tensor, z_v: &Tensor) -> Result<Mesh> {
        let x = Tensor::concat(&[&z_s.flatten(), &z_v.flatten()])?;
        let mut h = x.reshape(&[1, x.numel()])?;
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            h = l.forward(&h)?;
            if i < last {
                h = h.relu();
            }
        }
        let offsets = h.tanh().scale(self.max_offset / 3f64.sqrt()).reshape(&[self.template.num_vertices(), 3])?;
        apply_offsets(&self.template, &offsets)
    }

    pub(crate) fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }

    pub(crate) fn collect(&self, out: &mut Vec<(String, Tensor)>) {
        for (j, l) in self.layers.iter().enumerate() {
            l.collect(&format!("decoder{j}"), out);
        }
    }
}

/// One forward pass of the generator.
#[derive(Debug, Clone)]
pub struct GeneratorOutput {
    pub codes: EncoderOutput,
    pub view: ViewPrediction,
    pub z_v: Tensor,
    pub mesh: Mesh,
}

#[derive(Debug, Clone)]
pub struct Generator {
    pub encoder: Encoder,
    pub view_predictor: ViewPredictor,
    pub view_embedder: ViewEmbedder,
    pub decoder: Decoder,
}

impl Generator {
    pub fn new(rng: &mut impl Rng, cfg: &NetworkConfig) -> Result<Generator> {
        Ok(Generator {
            encoder: Encoder::new(rng, cfg),
            view_predictor: ViewPredictor::new(rng, cfg),
            view_embedder: ViewEmbedder::new(rng, cfg),
            decoder: Decoder::new(rng, cfg)?,
        })
    }

    /// Encode, predict the view, embed it and decode the mesh.
    pub fn forward(&self, image: &Tensor) -> Result<GeneratorOutput> {
        let codes = self.encoder.encode(image)?;
        let view = self.view_predictor.predict(&codes.z_l)?;
        let z_v = self.view_embedder.embed(&view.embedding)?;
        let mesh = self.decoder.decode(&codes.z_s, &z_v)?;
        Ok(GeneratorOutput { codes, view, z_v, mesh })
    }

    /// Mesh conditioned on `z_s` and an arbitrary pose.
    pub fn decode_at(&self, z_s: &Tensor, pose: &CameraPose) -> Result<Mesh> {
        let z_v = self.view_embedder.embed(&ViewPrediction::from_pose(pose).embedding)?;
        self.decoder.decode(z_s, &z_v)
    }

    /// Gradient-free forward pass returning the mesh and predicted pose.
    pub fn infer(&self, sketch: &SilhouetteMap) -> Result<(Mesh, CameraPose)> {
        crate::tensor::no_grad(|| {
            let out = self.forward(sketch.tensor())?;
            Ok((out.mesh.detach(), out.view.pose()))
        })
    }

    /// A copy whose parameters are `params`, in `named_parameters` order.
    pub fn with_parameters(&self, params: &[Tensor]) -> Result<Generator> {
        let mut g = self.clone();
        replace_parameters(g.params_mut(), params)?;
        Ok(g)
    }

    pub(crate) fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.encoder.params_mut();
        out.extend(self.view_predictor.params_mut());
        out.extend(self.view_embedder.params_mut());
        out.extend(self.decoder.params_mut());
        out
    }

    pub fn named_parameters(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.encoder.collect(&mut out);
        self.view_predictor.collect(&mut out);
        self.view_embedder.collect(&mut out);
        self.decoder.collect(&mut out);
        out
    }
}
