//! Forward-only orthographic splatting and photometric image metrics.

use crate::error::{Error, Result};
use crate::gaussian::GaussianRecord;
use crate::math::{Mat3, Vec3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Linear RGB image with channels in `[0, 1]`, row-major, row 0 at the top.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<[f64; 3]>,
}

impl Image {
    pub fn filled(width: usize, height: usize, color: [f64; 3]) -> Self {
        Image { width, height, data: vec![color; width * height] }
    }

    pub fn get(&self, x: usize, y: usize) -> [f64; 3] {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, c: [f64; 3]) {
        self.data[y * self.width + x] = c;
    }

    /// One channel as a flat row-major plane.
    pub fn channel(&self, c: usize) -> Vec<f64> {
        self.data.iter().map(|p| p[c]).collect()
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let mut buf = image::RgbImage::new(self.width as u32, self.height as u32);
        for (i, px) in self.data.iter().enumerate() {
            let q = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            buf.put_pixel((i % self.width) as u32, (i / self.width) as u32, image::Rgb([q(px[0]), q(px[1]), q(px[2])]));
        }
        buf.save(path).map_err(|e| Error::Image(e.to_string()))
    }

    pub fn load_png(path: &Path) -> Result<Image> {
        let img = image::open(path).map_err(|e| Error::Image(e.to_string()))?.to_rgb8();
        let (w, h) = img.dimensions();
        let data = img
            .pixels()
            .map(|p| [p[0] as f64 / 255.0, p[1] as f64 / 255.0, p[2] as f64 / 255.0])
            .collect();
        Ok(Image { width: w as usize, height: h as usize, data })
    }
}

/// Axis-aligned viewing direction (the direction the camera looks along).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViewAxis {
    PosX,
    NegX,
    PosY,
    NegY,
    PosZ,
    NegZ,
}

impl ViewAxis {
    /// Camera basis as rows `(right, up, forward)` with `right × up = -forward`.
    pub fn basis(self) -> Mat3 {
        let (r, u, f) = match self {
            ViewAxis::PosX => (-Vec3::y(), Vec3::z(), Vec3::x()),
            ViewAxis::NegX => (Vec3::y(), Vec3::z(), -Vec3::x()),
            ViewAxis::PosY => (Vec3::x(), Vec3::z(), Vec3::y()),
            ViewAxis::NegY => (-Vec3::x(), Vec3::z(), -Vec3::y()),
            ViewAxis::PosZ => (-Vec3::x(), Vec3::y(), Vec3::z()),
            ViewAxis::NegZ => (Vec3::x(), Vec3::y(), -Vec3::z()),
        };
        Mat3::from_rows(&[r.transpose(), u.transpose(), f.transpose()])
    }

    pub fn parse(s: &str) -> Option<ViewAxis> {
        Some(match s {
            "+x" | "x" | "pos_x" => ViewAxis::PosX,
            "-x" | "neg_x" => ViewAxis::NegX,
            "+y" | "y" | "pos_y" => ViewAxis::PosY,
            "-y" | "neg_y" => ViewAxis::NegY,
            "+z" | "z" | "pos_z" => ViewAxis::PosZ,
            "-z" | "neg_z" => ViewAxis::NegZ,
            _ => return None,
        })
    }
}

/// Orthographic view: direction, image-plane window and background.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct View {
    pub axis: ViewAxis,
    /// `[min, max]` of the horizontal image-plane coordinate.
    pub u_range: [f64; 2],
    /// `[min, max]` of the vertical image-plane coordinate.
    pub v_range: [f64; 2],
    pub background: [f64; 3],
}

impl View {
    /// Window covering `[-half, half]²` around `center` as seen along `axis`.
    pub fn centered(axis: ViewAxis, center: &Vec3, half: f64) -> View {
        let c = axis.basis() * center;
        View {
            axis,
            u_range: [c.x - half, c.x + half],
            v_range: [c.y - half, c.y + half],
            background: [0.0; 3],
        }
    }

    fn pixel_center(&self, col: usize, row: usize, w: usize, h: usize) -> (f64, f64) {
        let u = self.u_range[0] + (col as f64 + 0.5) / w as f64 * (self.u_range[1] - self.u_range[0]);
        let v = self.v_range[1] - (row as f64 + 0.5) / h as f64 * (self.v_range[1] - self.v_range[0]);
        (u, v)
    }
}

/// Image plus the per-pixel compositing weights.
#[derive(Debug, Clone)]
pub struct RenderOutput {
    pub image: Image,
    /// `Σ_i T_i α_i` per pixel.
    pub accumulated: Vec<f64>,
    /// Residual transmittance given to the background.
    pub transmittance: Vec<f64>,
}

struct Splat {
    u: f64,
    v: f64,
    depth: f64,
    index: usize,
    // inverse 2x2 covariance (a b; b c)
    ia: f64,
    ib: f64,
    ic: f64,
    radius: f64,
    opacity: f64,
    color: Vec3,
}

fn project(field: &[GaussianRecord], basis: &Mat3) -> Result<Vec<Splat>> {
    let mut splats = Vec::with_capacity(field.len());
    for (index, g) in field.iter().enumerate() {
        let cam = basis * g.center;
        let sigma = basis * g.covariance()? * basis.transpose();
        let (a, b, c) = (sigma[(0, 0)], sigma[(0, 1)], sigma[(1, 1)]);
        let det = a * c - b * b;
        if !(det > 0.0) {
            return Err(Error::Degenerate(format!("projected covariance of gaussian {index} is singular")));
        }
        // 4 standard deviations along the widest principal direction
        let lmax = 0.5 * (a + c) + (0.25 * (a - c) * (a - c) + b * b).sqrt();
        splats.push(Splat {
            u: cam.x,
            v: cam.y,
            depth: cam.z,
            index,
            ia: c / det,
            ib: -b / det,
            ic: a / det,
            radius: 4.0 * lmax.sqrt(),
            opacity: g.opacity,
            color: g.color,
        });
    }
    splats.sort_by(|p, q| p.depth.total_cmp(&q.depth).then(p.index.cmp(&q.index)));
    Ok(splats)
}

/// Front-to-back alpha compositing of the 2D marginals of `field`.
pub fn render_orthographic(field: &[GaussianRecord], view: &View, width: usize, height: usize) -> Result<Image> {
    Ok(render_orthographic_detailed(field, view, width, height)?.image)
}

pub fn render_orthographic_detailed(
    field: &[GaussianRecord],
    view: &View,
    width: usize,
    height: usize,
) -> Result<RenderOutput> {
    if width == 0 || height == 0 {
        return Err(Error::InvalidParameter(format!("resolution {width}x{height}")));
    }
    let splats = project(field, &view.axis.basis())?;
    let bg = Vec3::from(view.background);
    let pixels: Vec<(Vec3, f64, f64)> = (0..width * height)
        .into_par_iter()
        .map(|p| {
            let (u, v) = view.pixel_center(p % width, p / width, width, height);
            let mut color = Vec3::zeros();
            let mut t = 1.0f64;
            let mut acc = 0.0f64;
            for s in &splats {
                let du = u - s.u;
                let dv = v - s.v;
                if du.abs() > s.radius || dv.abs() > s.radius {
                    continue;
                }
                let m = s.ia * du * du + 2.0 * s.ib * du * dv + s.ic * dv * dv;
                let alpha = s.opacity * (-0.5 * m).exp();
                if alpha <= 0.0 {
                    continue;
                }
                let w = t * alpha;
                color += s.color * w;
                acc += w;
                t *= 1.0 - alpha;
            }
            (color + bg * t, acc, t)
        })
        .collect();
    let mut image = Image::filled(width, height, view.background);
    let mut accumulated = Vec::with_capacity(pixels.len());
    let mut transmittance = Vec::with_capacity(pixels.len());
    for (i, (c, a, t)) in pixels.into_iter().enumerate() {
        image.data[i] = [c.x, c.y, c.z];
        accumulated.push(a);
        transmittance.push(t);
    }
    Ok(RenderOutput { image, accumulated, transmittance })
}

/// Photometric loss breakdown.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImageLoss {
    pub l1: f64,
    pub dssim: f64,
    pub combined: f64,
}

/// `(1-λ)·L1 + λ·(1-SSIM)/2`.
pub fn image_loss(img: &Image, reference: &Image, lambda_render: f64) -> Result<ImageLoss> {
    check_same_size(img, reference)?;
    if !(0.0..=1.0).contains(&lambda_render) {
        return Err(Error::InvalidParameter(format!("lambda_render {lambda_render} outside [0,1]")));
    }
    let n = (img.data.len() * 3) as f64;
    let l1 = img
        .data
        .iter()
        .zip(&reference.data)
        .map(|(a, b)| (a[0] - b[0]).abs() + (a[1] - b[1]).abs() + (a[2] - b[2]).abs())
        .sum::<f64>()
        / n;
    let dssim = (1.0 - ssim(img, reference)?) / 2.0;
    Ok(ImageLoss { l1, dssim, combined: (1.0 - lambda_render) * l1 + lambda_render * dssim })
}

fn check_same_size(a: &Image, b: &Image) -> Result<()> {
    if a.width != b.width || a.height != b.height {
        return Err(Error::DimensionMismatch(format!(
            "{}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    if a.data.is_empty() {
        return Err(Error::EmptyInput("image"));
    }
    Ok(())
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

/// Normalized 1-D Gaussian taps of the SSIM window.
pub fn ssim_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let half = (SSIM_WINDOW / 2) as f64;
    for (i, v) in k.iter_mut().enumerate() {
        let x = i as f64 - half;
        *v = (-x * x / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable "same" convolution with zero padding.
fn blur(plane: &[f64], w: usize, h: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as isize;
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for (t, kv) in k.iter().enumerate() {
                let xx = x as isize + t as isize - r;
                if xx >= 0 && (xx as usize) < w {
                    s += kv * plane[y * w + xx as usize];
                }
            }
            tmp[y * w + x] = s;
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for (t, kv) in k.iter().enumerate() {
                let yy = y as isize + t as isize - r;
                if yy >= 0 && (yy as usize) < h {
                    s += kv * tmp[yy as usize * w + x];
                }
            }
            out[y * w + x] = s;
        }
    }
    out
}

/// Mean SSIM over all pixels and channels (11×11 Gaussian window, σ = 1.5,
/// zero-padded borders).
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    check_same_size(a, b)?;
    let (w, h) = (a.width, a.height);
    let k = ssim_kernel();
    let mut total = 0.0;
    for c in 0..3 {
        let x = a.channel(c);
        let y = b.channel(c);
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
        let mx = blur(&x, w, h, &k);
        let my = blur(&y, w, h, &k);
        let sxx = blur(&xx, w, h, &k);
        let syy = blur(&yy, w, h, &k);
        let sxy = blur(&xy, w, h, &k);
        for i in 0..w * h {
            let vx = sxx[i] - mx[i] * mx[i];
            let vy = syy[i] - my[i] * my[i];
            let cov = sxy[i] - mx[i] * my[i];
            let num = (2.0 * (mx[i] * my[i]) + SSIM_C1) * (2.0 * cov + SSIM_C2);
            let den = (mx[i] * mx[i] + my[i] * my[i] + SSIM_C1) * (vx + vy + SSIM_C2);
            total += num / den;
        }
    }
    Ok(total / (3 * w * h) as f64)
}
