//! Image-space objectives and their gradients with respect to the rendered
//! color and depth.

use thiserror::Error;

use crate::grad::PixelGrad;
use crate::image::{Image, Plane, ShapeError};
use crate::raster::{ColoredPoint, RenderOutput, NEAR_PLANE};
use crate::scene::CameraView;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error("image {0}x{1} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")]
    TooSmall(usize, usize),
    #[error("at least one source view is required")]
    NoSourceViews,
    #[error("invalid loss weights: {0}")]
    InvalidWeights(String),
}

/// Scalar loss with its gradient with respect to the predicted image.
#[derive(Clone, Debug, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub grad: Image,
}

/// Mean absolute error over all pixels and channels.
pub fn l_rgb(pred: &Image, target: &Image) -> Result<LossValue, LossError> {
    target.check_same_shape(pred)?;
    let n = pred.data.len().max(1) as f64;
    let mut grad = Image::new(pred.width, pred.height);
    let mut sum = 0.0;
    for ((g, p), t) in grad.data.iter_mut().zip(&pred.data).zip(&target.data) {
        let d = p - t;
        sum += d.abs();
        *g = if d > 0.0 {
            1.0 / n
        } else if d < 0.0 {
            -1.0 / n
        } else {
            0.0
        };
    }
    Ok(LossValue { value: sum / n, grad })
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-(d * d) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Separable "valid" filtering: output (w-10)×(h-10).
fn filter_valid(src: &[f64], w: usize, h: usize, win: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let ow = w - SSIM_WINDOW + 1;
    let oh = h - SSIM_WINDOW + 1;
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        let line = &src[y * w..(y + 1) * w];
        for x in 0..ow {
            rows[y * ow + x] = win.iter().zip(&line[x..x + SSIM_WINDOW]).map(|(a, b)| a * b).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            let mut s = 0.0;
            for (k, wk) in win.iter().enumerate() {
                s += wk * rows[(y + k) * ow + x];
            }
            out[y * ow + x] = s;
        }
    }
    out
}

/// Adjoint of [`filter_valid`]: scatters a (w-10)×(h-10) map back to w×h.
fn filter_adjoint(src: &[f64], w: usize, h: usize, win: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let ow = w - SSIM_WINDOW + 1;
    let oh = h - SSIM_WINDOW + 1;
    let mut cols = vec![0.0; ow * h];
    for y in 0..oh {
        for x in 0..ow {
            let v = src[y * ow + x];
            for (k, wk) in win.iter().enumerate() {
                cols[(y + k) * ow + x] += wk * v;
            }
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..ow {
            let v = cols[y * ow + x];
            for (k, wk) in win.iter().enumerate() {
                out[y * w + x + k] += wk * v;
            }
        }
    }
    out
}

struct SsimChannel {
    mean: f64,
    grad: Vec<f64>,
}

fn ssim_channel(x: &[f64], y: &[f64], w: usize, h: usize, with_grad: bool) -> SsimChannel {
    let win = gaussian_window();
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(y).map(|(a, b)| a * b).collect();
    let mx = filter_valid(x, w, h, &win);
    let my = filter_valid(y, w, h, &win);
    let exx = filter_valid(&xx, w, h, &win);
    let eyy = filter_valid(&yy, w, h, &win);
    let exy = filter_valid(&xy, w, h, &win);
    let n = mx.len();
    let mut total = 0.0;
    let (mut da, mut db, mut dc) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    for k in 0..n {
        let (ux, uy) = (mx[k], my[k]);
        let sxx = exx[k] - ux * ux;
        let syy = eyy[k] - uy * uy;
        let sxy = exy[k] - ux * uy;
        let a1 = 2.0 * ux * uy + SSIM_C1;
        let a2 = 2.0 * sxy + SSIM_C2;
        let b1 = ux * ux + uy * uy + SSIM_C1;
        let b2 = sxx + syy + SSIM_C2;
        let s = a1 * a2 / (b1 * b2);
        total += s;
        if with_grad {
            let den = b1 * b2;
            // Partials with respect to the local moments E[x], E[x²], E[xy].
            da[k] = (2.0 * uy * a2 + a1 * (-2.0 * uy)) / den - s * (2.0 * ux * b2 + b1 * (-2.0 * ux)) / den;
            db[k] = -s * b1 / den;
            dc[k] = a1 * 2.0 / den;
        }
    }
    let mut grad = Vec::new();
    if with_grad {
        let ga = filter_adjoint(&da, w, h, &win);
        let gb = filter_adjoint(&db, w, h, &win);
        let gc = filter_adjoint(&dc, w, h, &win);
        let inv_n = 1.0 / n as f64;
        grad = (0..w * h)
            .map(|p| inv_n * (ga[p] + 2.0 * x[p] * gb[p] + y[p] * gc[p]))
            .collect();
    }
    SsimChannel {
        mean: total / n as f64,
        grad,
    }
}

fn ssim_impl(pred: &Image, target: &Image, with_grad: bool) -> Result<(f64, Image), LossError> {
    target.check_same_shape(pred)?;
    let (w, h) = pred.shape();
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(LossError::TooSmall(w, h));
    }
    let mut grad = Image::new(w, h);
    let mut mean = 0.0;
    for c in 0..3 {
        let x = pred.channel(c).data;
        let y = target.channel(c).data;
        let r = ssim_channel(&x, &y, w, h, with_grad);
        mean += r.mean / 3.0;
        for (p, g) in r.grad.iter().enumerate() {
            grad.data[3 * p + c] = g / 3.0;
        }
    }
    Ok((mean, grad))
}

/// Mean SSIM over the valid interior of all three channels (11×11 Gaussian
/// window, σ = 1.5, K1 = 0.01, K2 = 0.03, dynamic range 1).
pub fn ssim(pred: &Image, target: &Image) -> Result<f64, LossError> {
    ssim_impl(pred, target, false).map(|(s, _)| s)
}

/// `1 − mean SSIM` with its analytic gradient.
pub fn l_ssim(pred: &Image, target: &Image) -> Result<LossValue, LossError> {
    let (s, mut grad) = ssim_impl(pred, target, true)?;
    grad.data.iter_mut().for_each(|g| *g = -*g);
    Ok(LossValue { value: 1.0 - s, grad })
}

/// Mean absolute depth error over masked pixels; zero when the mask is empty.
pub fn l_depth(pred: &Plane, target: &Plane, mask: &[bool]) -> Result<(f64, Plane), LossError> {
    if pred.shape() != target.shape() {
        return Err(ShapeError {
            expected: target.shape(),
            got: pred.shape(),
        }
        .into());
    }
    if mask.len() != pred.data.len() {
        return Err(ShapeError {
            expected: (pred.data.len(), 1),
            got: (mask.len(), 1),
        }
        .into());
    }
    let mut grad = Plane::new(pred.width, pred.height);
    let count = mask.iter().filter(|m| **m).count();
    if count == 0 {
        return Ok((0.0, grad));
    }
    let n = count as f64;
    let mut sum = 0.0;
    for i in 0..mask.len() {
        if !mask[i] {
            continue;
        }
        let d = pred.data[i] - target.data[i];
        sum += d.abs();
        grad.data[i] = if d > 0.0 {
            1.0 / n
        } else if d < 0.0 {
            -1.0 / n
        } else {
            0.0
        };
    }
    Ok((sum / n, grad))
}

/// Loss weights. `lpips_slot` only takes effect when a perceptual hook is
/// attached to [`CombinedLoss`].
#[derive(Clone, Copy, Debug, PartialEq, serde::Deserialize, serde::Serialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub rgb: f64,
    pub lpips_slot: f64,
    pub ssim: f64,
    pub depth: f64,
    pub novel: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            rgb: 0.8,
            lpips_slot: 0.2,
            ssim: 0.2,
            depth: 0.01,
            novel: 0.5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), LossError> {
        for (name, v) in [
            ("rgb", self.rgb),
            ("lpips_slot", self.lpips_slot),
            ("ssim", self.ssim),
            ("depth", self.depth),
            ("novel", self.novel),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(LossError::InvalidWeights(format!("{name} = {v}")));
            }
        }
        Ok(())
    }
}

/// Pluggable perceptual loss (LPIPS-style). None ships with the crate.
pub trait PerceptualLoss: Send + Sync {
    fn eval(&self, pred: &Image, target: &Image) -> LossValue;
}

/// Sparse depth supervision: target depth where `mask` is set.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseDepth {
    pub depth: Plane,
    pub mask: Vec<bool>,
}

impl SparseDepth {
    /// Projects points into `cam`, keeping the nearest depth per pixel.
    /// Points with `frame` set only supervise views of that frame.
    pub fn from_points(points: &[ColoredPoint], cam: &CameraView) -> Self {
        let (w, h) = (cam.width as usize, cam.height as usize);
        let mut depth = Plane::filled(w, h, f64::INFINITY);
        let mut mask = vec![false; w * h];
        let view = cam.pose.inverse();
        let k = &cam.intrinsics;
        for p in points {
            if p.frame.is_some_and(|f| f != cam.frame_index) {
                continue;
            }
            let c = view * nalgebra::Point3::from(p.position);
            if c.z < NEAR_PLANE {
                continue;
            }
            let u = k.fx * c.x / c.z + k.cx;
            let v = k.fy * c.y / c.z + k.cy;
            if !(u >= 0.0 && v >= 0.0 && u < w as f64 && v < h as f64) {
                continue;
            }
            let i = v as usize * w + u as usize;
            if c.z < depth.data[i] {
                depth.data[i] = c.z;
                mask[i] = true;
            }
        }
        for (d, m) in depth.data.iter_mut().zip(&mask) {
            if !m {
                *d = 0.0;
            }
        }
        Self { depth, mask }
    }
}

pub struct LossView<'a> {
    pub id: &'a str,
    pub render: &'a RenderOutput,
    pub target: &'a Image,
    pub depth: Option<&'a SparseDepth>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ViewKind {
    Source,
    Novel,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ViewLoss {
    pub id: String,
    pub kind: ViewKind,
    /// This view's weighted loss before per-view averaging.
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossReport {
    pub total: f64,
    /// Averaged, unweighted terms: `src_rgb`, `src_ssim`, `src_depth`,
    /// `novel_rgb`, `novel_ssim` (and `*_lpips` when a hook is attached),
    /// followed by the weighted aggregates `src` and `novel`.
    pub terms: Vec<(String, f64)>,
    pub views: Vec<ViewLoss>,
}

impl LossReport {
    pub fn term(&self, name: &str) -> Option<f64> {
        self.terms.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }
}

#[derive(Default)]
pub struct CombinedLoss {
    pub weights: LossWeights,
    pub perceptual: Option<Box<dyn PerceptualLoss>>,
}

pub struct CombinedOutput {
    pub report: LossReport,
    pub src_grads: Vec<PixelGrad>,
    pub novel_grads: Vec<PixelGrad>,
}

#[derive(Default)]
struct TermSums {
    rgb: f64,
    ssim: f64,
    depth: f64,
    lpips: f64,
}

impl CombinedLoss {
    pub fn new(weights: LossWeights) -> Self {
        Self { weights, perceptual: None }
    }

    /// `L = L_src + w_novel · L_novel`. Source views use rgb, ssim and depth
    /// terms; novel views only rgb and ssim. Each group is averaged over its
    /// views.
    pub fn evaluate(&self, src: &[LossView<'_>], novel: &[LossView<'_>]) -> Result<CombinedOutput, LossError> {
        self.weights.validate()?;
        if src.is_empty() {
            return Err(LossError::NoSourceViews);
        }
        let w = &self.weights;
        let mut views = Vec::new();

        let (src_sums, src_grads) = self.group(src, ViewKind::Source, 1.0, &mut views)?;
        let (novel_sums, novel_grads) = if novel.is_empty() {
            (TermSums::default(), Vec::new())
        } else {
            self.group(novel, ViewKind::Novel, w.novel, &mut views)?
        };

        let ns = src.len() as f64;
        let nn = novel.len().max(1) as f64;
        let lp = self.perceptual.is_some();
        let src_total = (w.rgb * src_sums.rgb + w.ssim * src_sums.ssim + w.depth * src_sums.depth + if lp { w.lpips_slot * src_sums.lpips } else { 0.0 }) / ns;
        let novel_total = (w.rgb * novel_sums.rgb + w.ssim * novel_sums.ssim + if lp { w.lpips_slot * novel_sums.lpips } else { 0.0 }) / nn;

        let mut terms = vec![
            ("src_rgb".to_string(), src_sums.rgb / ns),
            ("src_ssim".to_string(), src_sums.ssim / ns),
            ("src_depth".to_string(), src_sums.depth / ns),
            ("novel_rgb".to_string(), novel_sums.rgb / nn),
            ("novel_ssim".to_string(), novel_sums.ssim / nn),
        ];
        if lp {
            terms.push(("src_lpips".to_string(), src_sums.lpips / ns));
            terms.push(("novel_lpips".to_string(), novel_sums.lpips / nn));
        }
        terms.push(("src".to_string(), src_total));
        terms.push(("novel".to_string(), novel_total));
        Ok(CombinedOutput {
            report: LossReport {
                total: src_total + w.novel * novel_total,
                terms,
                views,
            },
            src_grads,
            novel_grads,
        })
    }

    fn group(
        &self,
        group: &[LossView<'_>],
        kind: ViewKind,
        group_weight: f64,
        views: &mut Vec<ViewLoss>,
    ) -> Result<(TermSums, Vec<PixelGrad>), LossError> {
        let w = &self.weights;
        let scale = group_weight / group.len() as f64;
        let mut sums = TermSums::default();
        let mut grads = Vec::with_capacity(group.len());
        for v in group {
            let pred = &v.render.color;
            let rgb = l_rgb(pred, v.target)?;
            let ss = l_ssim(pred, v.target)?;
            let mut pg = PixelGrad::zeros(pred.width, pred.height);
            for i in 0..pg.color.data.len() {
                pg.color.data[i] = scale * (w.rgb * rgb.grad.data[i] + w.ssim * ss.grad.data[i]);
            }
            let mut value = w.rgb * rgb.value + w.ssim * ss.value;
            if let Some(hook) = &self.perceptual {
                let p = hook.eval(pred, v.target);
                for i in 0..pg.color.data.len() {
                    pg.color.data[i] += scale * w.lpips_slot * p.grad.data[i];
                }
                value += w.lpips_slot * p.value;
                sums.lpips += p.value;
            }
            if kind == ViewKind::Source {
                if let Some(sd) = v.depth {
                    let (d, dg) = l_depth(&v.render.depth, &sd.depth, &sd.mask)?;
                    for i in 0..dg.data.len() {
                        pg.depth.data[i] = scale * w.depth * dg.data[i];
                    }
                    value += w.depth * d;
                    sums.depth += d;
                }
            }
            sums.rgb += rgb.value;
            sums.ssim += ss.value;
            views.push(ViewLoss {
                id: v.id.to_string(),
                kind,
                value,
            });
            grads.push(pg);
        }
        Ok((sums, grads))
    }
}
