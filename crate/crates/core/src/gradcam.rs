//! Grad-CAM maps, heatmap overlays and image perturbations.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{BackwardOptions, ModelGraph, Source};
use crate::layers::{ForwardCtx, LayerConfig};
use crate::tensor::{bilinear_resize, Tensor};

/// Normalized class-activation map of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct CamMap {
    /// `[h, w]`, values in `[0, 1]`.
    pub grid: Tensor,
    pub target_layer: String,
    /// Sigmoid output of the model for the image.
    pub class_score: f32,
    pub class_index: usize,
}

impl CamMap {
    pub fn dims(&self) -> (usize, usize) {
        (self.grid.dims()[0], self.grid.dims()[1])
    }

    /// Rows of space-separated values with 8 decimals.
    pub fn to_text(&self) -> String {
        let (h, w) = self.dims();
        let mut s = String::new();
        for i in 0..h {
            let row: Vec<String> = (0..w).map(|j| format!("{:.8}", self.grid.data()[i * w + j])).collect();
            let _ = writeln!(s, "{}", row.join(" "));
        }
        s
    }
}

fn is_conv(cfg: &LayerConfig) -> bool {
    cfg.is_convolution()
}

/// Whether node `idx` may serve as a Grad-CAM target: a convolution, a
/// relu applied to a convolution, or a residual add.
pub fn is_valid_target(g: &ModelGraph, idx: usize) -> bool {
    let node = &g.nodes()[idx];
    match &node.config {
        LayerConfig::Conv2d { .. } | LayerConfig::SeparableConv2d { .. } | LayerConfig::ResidualAdd => true,
        LayerConfig::Relu => match node.inputs.as_slice() {
            [Source::Node(p)] => is_conv(&g.nodes()[*p].config),
            _ => false,
        },
        _ => false,
    }
}

/// The last convolution or residual add in execution order; a convolution
/// whose only consumer is a relu is replaced by that relu.
pub fn default_target(g: &ModelGraph) -> Result<usize> {
    let nodes = g.nodes();
    let last = (0..nodes.len())
        .rev()
        .find(|&i| is_conv(&nodes[i].config) || matches!(nodes[i].config, LayerConfig::ResidualAdd))
        .ok_or_else(|| Error::InvalidArgument("model has no convolutional layer".into()))?;
    if is_conv(&nodes[last].config) {
        let consumers: Vec<usize> = (0..nodes.len())
            .filter(|&j| nodes[j].inputs.contains(&Source::Node(last)))
            .collect();
        if let [c] = consumers[..] {
            if matches!(nodes[c].config, LayerConfig::Relu) {
                return Ok(c);
            }
        }
    }
    Ok(last)
}

/// `alpha_k = mean_ij dA[i,j,k]`, `M = relu(sum_k alpha_k A[:,:,k])`,
/// returned as `M / max(M)`, or all zeros when `M` is.
///
/// Sums run in ascending index order in float32.
pub fn cam_grid(activations: &Tensor, gradients: &Tensor) -> Result<Tensor> {
    if activations.shape() != gradients.shape() {
        return Err(Error::ShapeMismatch {
            left: activations.shape().clone(),
            right: gradients.shape().clone(),
        });
    }
    let [h, w, k] = *activations.dims() else {
        return Err(Error::InvalidArgument(format!(
            "Grad-CAM needs [h, w, channels] maps, got {}",
            activations.shape()
        )));
    };
    let mut alpha = vec![0.0f32; k];
    for px in gradients.data().chunks_exact(k) {
        for (a, &g) in alpha.iter_mut().zip(px) {
            *a += g;
        }
    }
    let count = (h * w) as f32;
    for a in &mut alpha {
        *a /= count;
    }
    let mut m: Vec<f32> = activations
        .data()
        .chunks_exact(k)
        .map(|px| {
            let mut s = 0.0f32;
            for (&a, &v) in alpha.iter().zip(px) {
                s += a * v;
            }
            s.max(0.0)
        })
        .collect();
    let max = m.iter().copied().fold(0.0f32, f32::max);
    if max > 0.0 {
        for v in &mut m {
            *v /= max;
        }
    } else {
        m.iter_mut().for_each(|v| *v = 0.0);
    }
    Tensor::new([h, w], m)
}

/// Grad-CAM of one `[H, W, C]` image at `target` (default: see
/// [`default_target`]). Class 1 differentiates `+p`, class 0 `-p`.
pub fn grad_cam(g: &ModelGraph, image: &Tensor, target: Option<&str>, class_index: usize) -> Result<CamMap> {
    if class_index > 1 {
        return Err(Error::InvalidArgument(format!(
            "class index {class_index} out of range for a binary model"
        )));
    }
    let t = match target {
        Some(id) => g.node_index(id)?,
        None => default_target(g)?,
    };
    if !is_valid_target(g, t) {
        return Err(Error::InvalidArgument(format!(
            "Grad-CAM target `{}` ({}) is not a convolutional layer",
            g.nodes()[t].id,
            g.nodes()[t].config.kind_name()
        )));
    }
    let mut dims = vec![1];
    dims.extend_from_slice(image.dims());
    let x = image.clone().reshape(dims)?;
    let (pred, cache) = g.forward(&x, &ForwardCtx::infer())?;
    if pred.len() != 1 {
        return Err(Error::InvalidArgument("Grad-CAM needs a single-output model".into()));
    }
    let Source::Node(out) = g.output() else {
        return Err(Error::InvalidGraph("model output is the raw input".into()));
    };
    let sign = if class_index == 1 { 1.0 } else { -1.0 };
    let seed = Tensor::new(pred.dims().to_vec(), vec![sign])?;
    let grads = g.backward(
        &cache,
        out,
        seed,
        BackwardOptions {
            params: false,
            input: false,
            target: Some(t),
        },
    )?;
    let acts = &cache.outputs[t];
    let per_sample = acts.dims()[1..].to_vec();
    let acts = acts.clone().reshape(per_sample.clone())?;
    let grad = match grads.target {
        Some(d) => d.reshape(per_sample)?,
        None => Tensor::from_shape(acts.shape().clone(), vec![0.0; acts.len()])?,
    };
    Ok(CamMap {
        grid: cam_grid(&acts, &grad)?,
        target_layer: g.nodes()[t].id.clone(),
        class_score: pred.data()[0],
        class_index,
    })
}

/// Colour ramp blue, cyan, green, yellow, red at 0, 1/4, 1/2, 3/4, 1,
/// linear between stops; RGB in `0..=255`.
pub fn colormap(v: f32) -> [f32; 3] {
    const STOPS: [[f32; 3]; 5] = [
        [0.0, 0.0, 255.0],
        [0.0, 255.0, 255.0],
        [0.0, 255.0, 0.0],
        [255.0, 255.0, 0.0],
        [255.0, 0.0, 0.0],
    ];
    let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
    let pos = v * 4.0;
    let i = (pos.floor() as usize).min(3);
    let f = pos - i as f32;
    let (a, b) = (STOPS[i], STOPS[i + 1]);
    [0, 1, 2].map(|c| a[c] + (b[c] - a[c]) * f)
}

/// `(1 - alpha) image + alpha colormap(cam)`, with the grid bilinearly
/// upsampled to the image size.
pub fn render_overlay(image: &Tensor, cam: &CamMap, alpha: f32) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidArgument(format!("alpha {alpha} outside [0, 1]")));
    }
    let [h, w, 3] = *image.dims() else {
        return Err(Error::InvalidArgument(format!(
            "overlay needs an [H, W, 3] image, got {}",
            image.shape()
        )));
    };
    let (gh, gw) = cam.dims();
    let up = bilinear_resize(&cam.grid.clone().reshape([gh, gw, 1])?, h, w)?;
    let mut out = Vec::with_capacity(image.len());
    for (px, &v) in image.data().chunks_exact(3).zip(up.data()) {
        let color = colormap(v);
        for c in 0..3 {
            out.push((1.0 - alpha) * px[c] + alpha * color[c]);
        }
    }
    Tensor::new([h, w, 3], out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum PerturbSpec {
    /// Remove the rows and/or columns spanned by `rect`, then resize back.
    CropRect { rect: [usize; 4] },
    /// Paint `rect` with an RGB colour.
    FillRect { rect: [usize; 4], fill: [f32; 3] },
}

impl PerturbSpec {
    /// `[x0, y0, x1, y1)`, half-open.
    pub fn rect(&self) -> [usize; 4] {
        match *self {
            PerturbSpec::CropRect { rect } | PerturbSpec::FillRect { rect, .. } => rect,
        }
    }

    pub fn validate(&self, h: usize, w: usize) -> Result<()> {
        let [x0, y0, x1, y1] = self.rect();
        if x0 >= x1 || y0 >= y1 {
            return Err(Error::InvalidArgument(format!(
                "rectangle {x0},{y0},{x1},{y1} is empty"
            )));
        }
        if x1 > w || y1 > h {
            return Err(Error::InvalidArgument(format!(
                "rectangle {x0},{y0},{x1},{y1} exceeds the {w}x{h} image"
            )));
        }
        Ok(())
    }
}

/// Apply `spec` to an `[H, W, C]` image.
///
/// A crop spanning the full width removes only its rows; one spanning the
/// full height removes only its columns; any other crop removes both. A crop
/// that would leave nothing is rejected.
pub fn perturb(image: &Tensor, spec: &PerturbSpec) -> Result<Tensor> {
    let [h, w, c] = *image.dims() else {
        return Err(Error::InvalidArgument(format!(
            "perturbation needs an [H, W, C] image, got {}",
            image.shape()
        )));
    };
    spec.validate(h, w)?;
    let [x0, y0, x1, y1] = spec.rect();
    match *spec {
        PerturbSpec::FillRect { fill, .. } => {
            if c != 3 {
                return Err(Error::InvalidArgument("fill needs a 3-channel image".into()));
            }
            let mut out = image.clone();
            let d = out.data_mut();
            for y in y0..y1 {
                for x in x0..x1 {
                    d[(y * w + x) * 3..(y * w + x) * 3 + 3].copy_from_slice(&fill);
                }
            }
            Ok(out)
        }
        PerturbSpec::CropRect { .. } => {
            let full_w = x0 == 0 && x1 == w;
            let full_h = y0 == 0 && y1 == h;
            let drop_rows = !full_h || full_w;
            let drop_cols = !full_w || full_h;
            let rows: Vec<usize> = (0..h).filter(|&y| !(drop_rows && (y0..y1).contains(&y))).collect();
            let cols: Vec<usize> = (0..w).filter(|&x| !(drop_cols && (x0..x1).contains(&x))).collect();
            if rows.is_empty() || cols.is_empty() {
                return Err(Error::InvalidArgument("crop removes the whole image".into()));
            }
            let mut kept = Vec::with_capacity(rows.len() * cols.len() * c);
            for &y in &rows {
                for &x in &cols {
                    kept.extend_from_slice(&image.data()[(y * w + x) * c..(y * w + x + 1) * c]);
                }
            }
            let kept = Tensor::new([rows.len(), cols.len(), c], kept)?;
            bilinear_resize(&kept, h, w)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_channel_all_ones_gradient() {
        let a = Tensor::new([2, 2, 1], vec![1.0, -2.0, 4.0, 2.0]).unwrap();
        let g = Tensor::full([2, 2, 1], 1.0).unwrap();
        let grid = cam_grid(&a, &g).unwrap();
        assert_eq!(grid.data(), &[0.25, 0.0, 1.0, 0.5]);
    }

    #[test]
    fn zero_gradient_gives_zero_grid() {
        let a = Tensor::full([3, 3, 2], 5.0).unwrap();
        let g = Tensor::zeros([3, 3, 2]).unwrap();
        let grid = cam_grid(&a, &g).unwrap();
        assert!(grid.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn colormap_endpoints() {
        assert_eq!(colormap(0.0), [0.0, 0.0, 255.0]);
        assert_eq!(colormap(0.5), [0.0, 255.0, 0.0]);
        assert_eq!(colormap(1.0), [255.0, 0.0, 0.0]);
        assert_eq!(colormap(0.125), [0.0, 127.5, 255.0]);
    }

    #[test]
    fn fill_and_crop() {
        let img = Tensor::new([2, 3, 3], (0..18).map(|v| v as f32).collect()).unwrap();
        let all = PerturbSpec::FillRect {
            rect: [0, 0, 3, 2],
            fill: [7.0, 7.0, 7.0],
        };
        assert!(perturb(&img, &all).unwrap().data().iter().all(|&v| v == 7.0));
        let empty = PerturbSpec::FillRect {
            rect: [1, 1, 1, 2],
            fill: [0.0; 3],
        };
        assert!(perturb(&img, &empty).is_err());
        let outside = PerturbSpec::CropRect { rect: [0, 0, 4, 1] };
        assert!(perturb(&img, &outside).is_err());
        // removing the middle column of a 2x3 image, then stretching back
        let col = PerturbSpec::CropRect { rect: [1, 0, 2, 2] };
        let out = perturb(&img, &col).unwrap();
        assert_eq!(out.dims(), &[2, 3, 3]);
        assert_eq!(&out.data()[..3], &[0.0, 1.0, 2.0]);
        assert_eq!(&out.data()[6..9], &[6.0, 7.0, 8.0]);
        let whole = PerturbSpec::CropRect { rect: [0, 0, 3, 2] };
        assert!(perturb(&img, &whole).is_err());
    }
}
