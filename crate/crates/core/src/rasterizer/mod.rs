//! Silhouette rendering: a differentiable soft rasterizer, a binary
//! reference rasterizer, resolution pyramids and image export.

mod hard;
mod soft;

use std::path::Path;

use image::{GrayImage, Luma};

use crate::error::{Error, Result};
use crate::geometry::{
    project, view_transform, view_transform_angles, view_transform_trig, CameraPose, Mesh, Projection, ViewTrig,
};
use crate::tensor::Tensor;

pub use soft::{soft_rasterize_ndc, SoftSettings};

/// NDC center of pixel `(row, col)`; row 0 is the top of the image.
pub fn pixel_center(row: usize, col: usize, res: usize) -> [f64; 2] {
    let r = res as f64;
    [2.0 * (col as f64 + 0.5) / r - 1.0, 1.0 - 2.0 * (row as f64 + 0.5) / r]
}

/// Square occupancy image with values in `[0, 1]`, stored as an `[R, R]`
/// tensor.
#[derive(Debug, Clone)]
pub struct SilhouetteMap {
    values: Tensor,
}

impl SilhouetteMap {
    pub fn from_tensor(values: Tensor) -> Result<SilhouetteMap> {
        match *values.shape() {
            [h, w] if h == w => Ok(SilhouetteMap { values }),
            _ => Err(Error::Render(format!("silhouette must be square [R, R], got {:?}", values.shape()))),
        }
    }

    pub fn from_values(values: Vec<f64>, resolution: usize) -> Result<SilhouetteMap> {
        SilhouetteMap::from_tensor(Tensor::new(values, &[resolution, resolution])?)
    }

    pub fn from_mask(mask: &[bool], resolution: usize) -> Result<SilhouetteMap> {
        SilhouetteMap::from_values(mask.iter().map(|&b| b as u8 as f64).collect(), resolution)
    }

    pub fn resolution(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.values
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.values.to_vec()
    }

    /// Pixels with value ≥ 0.5.
    pub fn mask(&self) -> Vec<bool> {
        self.values.data().iter().map(|&v| v >= 0.5).collect()
    }

    pub fn mean(&self) -> f64 {
        let d = self.values.data();
        d.iter().sum::<f64>() / d.len() as f64
    }

    /// Same values cut from the computation graph.
    pub fn detach(&self) -> SilhouetteMap {
        SilhouetteMap { values: self.values.detach() }
    }

    /// 8-bit gray levels, `round_half_even(255 · clamp(v, 0, 1))`.
    pub fn to_gray8(&self) -> Vec<u8> {
        self.values.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round_ties_even() as u8).collect()
    }

    pub fn to_image(&self) -> GrayImage {
        let r = self.resolution() as u32;
        GrayImage::from_raw(r, r, self.to_gray8()).expect("buffer matches extent")
    }

    pub fn to_png_bytes(&self) -> Result<Vec<u8>> {
        let mut out = std::io::Cursor::new(Vec::new());
        self.to_image()
            .write_to(&mut out, image::ImageFormat::Png)
            .map_err(|e| Error::Image(e.to_string()))?;
        Ok(out.into_inner())
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(&path, self.to_png_bytes()?).map_err(|e| Error::io(&path, e))
    }

    /// Binary (P5) PGM with maxval 255.
    pub fn to_pgm_bytes(&self) -> Vec<u8> {
        let r = self.resolution();
        let mut out = format!("P5\n{r} {r}\n255\n").into_bytes();
        out.extend(self.to_gray8());
        out
    }

    pub fn save_pgm(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(&path, self.to_pgm_bytes()).map_err(|e| Error::io(&path, e))
    }

    /// Decodes any image the `image` crate reads, converting to gray levels
    /// scaled into `[0, 1]`. The image must be square.
    pub fn from_image_bytes(bytes: &[u8]) -> Result<SilhouetteMap> {
        let img = image::load_from_memory(bytes).map_err(|e| Error::Image(e.to_string()))?.to_luma8();
        SilhouetteMap::from_gray_image(&img)
    }

    pub fn from_gray_image(img: &GrayImage) -> Result<SilhouetteMap> {
        let (w, h) = img.dimensions();
        if w != h {
            return Err(Error::Image(format!("image must be square, got {w}x{h}")));
        }
        let values = img.pixels().map(|Luma([p])| *p as f64 / 255.0).collect();
        SilhouetteMap::from_values(values, w as usize)
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<SilhouetteMap> {
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        SilhouetteMap::from_image_bytes(&bytes)
    }

    /// Values thresholded at 0.5 to exactly 0 or 1.
    pub fn binarized(&self) -> SilhouetteMap {
        SilhouetteMap::from_mask(&self.mask(), self.resolution()).expect("same extent")
    }
}

/// Soft silhouette of `mesh` seen from `pose`; differentiable in the mesh
/// vertices.
pub fn soft_rasterize(
    mesh: &Mesh,
    pose: &CameraPose,
    projection: &Projection,
    settings: SoftSettings,
) -> Result<SilhouetteMap> {
    pose.validate()?;
    let ndc = project(&view_transform(mesh, pose)?, projection)?;
    render_ndc(mesh, &ndc, settings)
}

/// Soft silhouette with the view angles (radians) given as scalar tensors,
/// so gradients also reach the pose.
pub fn soft_rasterize_angles(
    mesh: &Mesh,
    elevation: &Tensor,
    azimuth: &Tensor,
    distance: f64,
    projection: &Projection,
    settings: SoftSettings,
) -> Result<SilhouetteMap> {
    let ndc = project(&view_transform_angles(mesh, elevation, azimuth, distance)?, projection)?;
    render_ndc(mesh, &ndc, settings)
}

/// Soft silhouette at a pose given by the sines and cosines of its angles,
/// as produced by the viewpoint head; gradients reach all four.
pub fn soft_rasterize_trig(
    mesh: &Mesh,
    trig: &ViewTrig,
    distance: f64,
    projection: &Projection,
    settings: SoftSettings,
) -> Result<SilhouetteMap> {
    let ndc = project(&view_transform_trig(mesh, trig, distance)?, projection)?;
    render_ndc(mesh, &ndc, settings)
}

fn render_ndc(mesh: &Mesh, ndc: &Tensor, settings: SoftSettings) -> Result<SilhouetteMap> {
    let faces = mesh.connectivity().faces_arc();
    SilhouetteMap::from_tensor(soft_rasterize_ndc(ndc, faces, settings)?)
}

/// Binary silhouette: a pixel is set iff its center lies inside a projected
/// triangle. Pixels exactly on a shared edge go to one face only.
pub fn hard_rasterize(
    mesh: &Mesh,
    pose: &CameraPose,
    projection: &Projection,
    resolution: usize,
) -> Result<SilhouetteMap> {
    pose.validate()?;
    let mut mask = vec![false; resolution * resolution];
    if mesh.num_faces() > 0 {
        let ndc = project(&view_transform(&mesh.detach(), pose)?, projection)?;
        hard::fill(&ndc.data(), mesh.faces(), resolution, &mut mask);
    }
    SilhouetteMap::from_mask(&mask, resolution)
}

/// `levels` maps, each a 2× average-downsample of the previous; level 0 is
/// the input.
pub fn silhouette_pyramid(s: &SilhouetteMap, levels: usize) -> Result<Vec<SilhouetteMap>> {
    if levels == 0 {
        return Err(Error::Render("pyramid needs at least one level".into()));
    }
    let r = s.resolution();
    if r % (1 << (levels - 1)) != 0 {
        return Err(Error::Render(format!("resolution {r} is not divisible by 2^{}", levels - 1)));
    }
    let mut out = vec![s.clone()];
    for _ in 1..levels {
        let prev = out.last().expect("non-empty").tensor();
        let half = prev.shape()[0] / 2;
        let down = prev.reshape(&[1, 2 * half, 2 * half])?.downsample2x()?.reshape(&[half, half])?;
        out.push(SilhouetteMap::from_tensor(down)?);
    }
    Ok(out)
}
