//! Contour evaluation: NMS thinning, tolerance matching, ODS / OIS / AP.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Soft contour map with values clamped to `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ContourMap {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl ContourMap {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::shape(
                "ContourMap::new",
                format!("{} values for {height}x{width}", values.len()),
            ));
        }
        if values.iter().any(|v| v.is_nan()) {
            return Err(Error::invalid("contour map contains NaN"));
        }
        let values = values.into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
        Ok(ContourMap {
            height,
            width,
            values,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        ContourMap {
            height,
            width,
            values: vec![0.0; height * width],
        }
    }

    /// Takes the single channel of `t`.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        if t.channels() != 1 {
            return Err(Error::shape(
                "ContourMap::from_tensor",
                format!("{} channels", t.channels()),
            ));
        }
        Self::new(t.height(), t.width(), t.data().to_vec())
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(1, self.height, self.width, self.values.clone()).expect("consistent size")
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.width + x]
    }

    /// Applies `f` to every value, clamping the result.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self::new(self.height, self.width, self.values.iter().map(|&v| f(v)).collect())
            .expect("same size")
    }

    pub fn threshold(&self, t: f64) -> Mask {
        Mask {
            height: self.height,
            width: self.width,
            bits: self.values.iter().map(|&v| v >= t).collect(),
        }
    }
}

/// Binary mask, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl Mask {
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::shape(
                "Mask::new",
                format!("{} bits for {height}x{width}", bits.len()),
            ));
        }
        Ok(Mask {
            height,
            width,
            bits,
        })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Mask {
            height,
            width,
            bits: vec![false; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.bits[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn to_map(&self) -> ContourMap {
        ContourMap {
            height: self.height,
            width: self.width,
            values: self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        self.to_map().to_tensor()
    }

    /// Pixels with value `>= 0.5`.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        Ok(ContourMap::from_tensor(t)?.threshold(0.5))
    }
}

/// Separable `[1 2 1] / 4` blur with replicated borders.
fn smooth(m: &ContourMap) -> Vec<f64> {
    let (h, w) = (m.height, m.width);
    let at = |v: &[f64], y: isize, x: isize| {
        let y = y.clamp(0, h as isize - 1) as usize;
        let x = x.clamp(0, w as isize - 1) as usize;
        v[y * w + x]
    };
    let mut tmp = vec![0.0; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            tmp[y as usize * w + x as usize] =
                0.25 * at(&m.values, y, x - 1) + 0.5 * at(&m.values, y, x) + 0.25 * at(&m.values, y, x + 1);
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            out[y as usize * w + x as usize] =
                0.25 * at(&tmp, y - 1, x) + 0.5 * at(&tmp, y, x) + 0.25 * at(&tmp, y + 1, x);
        }
    }
    out
}

/// Sobel derivatives `(d/dx, d/dy)` with replicated borders.
fn sobel(v: &[f64], h: usize, w: usize) -> (Vec<f64>, Vec<f64>) {
    let at = |y: isize, x: isize| {
        let y = y.clamp(0, h as isize - 1) as usize;
        let x = x.clamp(0, w as isize - 1) as usize;
        v[y * w + x]
    };
    let mut gx = vec![0.0; h * w];
    let mut gy = vec![0.0; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let i = y as usize * w + x as usize;
            gx[i] = (at(y - 1, x + 1) + 2.0 * at(y, x + 1) + at(y + 1, x + 1)
                - at(y - 1, x - 1)
                - 2.0 * at(y, x - 1)
                - at(y + 1, x - 1))
                / 8.0;
            gy[i] = (at(y + 1, x - 1) + 2.0 * at(y + 1, x) + at(y + 1, x + 1)
                - at(y - 1, x - 1)
                - 2.0 * at(y - 1, x)
                - at(y - 1, x + 1))
                / 8.0;
        }
    }
    (gx, gy)
}

/// Unit step `(dy, dx)` across the ridge at every pixel, one of four directions.
fn ridge_normals(s: &[f64], h: usize, w: usize) -> Vec<(isize, isize)> {
    let (gx, gy) = sobel(s, h, w);
    let (gxx, gxy) = sobel(&gx, h, w);
    let (_, gyy) = sobel(&gy, h, w);
    (0..h * w)
        .map(|i| {
            let (a, b, c) = (gxx[i], gxy[i], gyy[i]);
            // eigenvector of [[a, b], [b, c]] for the smaller eigenvalue
            let lam = 0.5 * (a + c) - (0.25 * (a - c) * (a - c) + b * b).sqrt();
            let (vx, vy) = if b.abs() > 1e-12 {
                (b, lam - a)
            } else if a <= c {
                (1.0, 0.0)
            } else {
                (0.0, 1.0)
            };
            let mut ang = vy.atan2(vx).to_degrees();
            if ang < 0.0 {
                ang += 180.0;
            }
            match ((ang + 22.5) / 45.0) as usize % 4 {
                0 => (0, 1),
                1 => (1, 1),
                2 => (1, 0),
                _ => (1, -1),
            }
        })
        .collect()
}

/// Keeps a pixel only if it is not beaten by either neighbour across the
/// local ridge. Ties on the map are broken by a smoothed copy; neighbours
/// outside the image never suppress.
pub fn nms_thin(m: &ContourMap) -> ContourMap {
    let (h, w) = (m.height, m.width);
    if h == 0 || w == 0 {
        return m.clone();
    }
    let s = smooth(m);
    let normals = ridge_normals(&s, h, w);
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let v = m.values[i];
            if v == 0.0 {
                continue;
            }
            let (dy, dx) = normals[i];
            let beaten = [1isize, -1].iter().any(|&sgn| {
                let qy = y as isize + sgn * dy;
                let qx = x as isize + sgn * dx;
                if qy < 0 || qx < 0 || qy >= h as isize || qx >= w as isize {
                    return false;
                }
                let q = qy as usize * w + qx as usize;
                m.values[q] > v || (m.values[q] == v && s[q] > s[i])
            });
            if !beaten {
                out[i] = v;
            }
        }
    }
    ContourMap {
        height: h,
        width: w,
        values: out,
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl Counts {
    pub fn precision(&self) -> f64 {
        if self.tp + self.fp == 0 {
            1.0
        } else {
            self.tp as f64 / (self.tp + self.fp) as f64
        }
    }

    pub fn recall(&self) -> f64 {
        if self.tp + self.fn_ == 0 {
            1.0
        } else {
            self.tp as f64 / (self.tp + self.fn_) as f64
        }
    }

    pub fn f_measure(&self) -> f64 {
        f_measure(self.precision(), self.recall())
    }
}

impl std::ops::AddAssign for Counts {
    fn add_assign(&mut self, o: Counts) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
    }
}

pub fn f_measure(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Matching radius in pixels for a tolerance given as a fraction of the diagonal.
pub fn match_radius(h: usize, w: usize, tol_frac: f64) -> f64 {
    tol_frac * ((h * h + w * w) as f64).sqrt()
}

/// One-to-one greedy matching of predicted to ground-truth pixels in order
/// of increasing distance, ties by raster order of prediction then ground truth.
pub fn correspond(pred: &Mask, gt: &Mask, tol_frac: f64) -> Result<Counts> {
    if (pred.height, pred.width) != (gt.height, gt.width) {
        return Err(Error::shape(
            "correspond",
            format!(
                "{}x{} prediction vs {}x{} ground truth",
                pred.height, pred.width, gt.height, gt.width
            ),
        ));
    }
    if !(tol_frac >= 0.0) {
        return Err(Error::invalid(format!("tolerance must be >= 0, got {tol_frac}")));
    }
    let (h, w) = (pred.height, pred.width);
    let r = match_radius(h, w, tol_frac);
    let r2 = r * r;
    let ri = r.floor() as isize;
    let mut cand: Vec<(isize, usize, usize)> = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if !pred.get(y, x) {
                continue;
            }
            for dy in -ri..=ri {
                for dx in -ri..=ri {
                    let d2 = dy * dy + dx * dx;
                    if d2 as f64 > r2 {
                        continue;
                    }
                    let (gy, gx) = (y as isize + dy, x as isize + dx);
                    if gy < 0 || gx < 0 || gy >= h as isize || gx >= w as isize {
                        continue;
                    }
                    let g = gy as usize * w + gx as usize;
                    if gt.bits[g] {
                        cand.push((d2, y * w + x, g));
                    }
                }
            }
        }
    }
    cand.sort_unstable();
    let mut used_p = vec![false; h * w];
    let mut used_g = vec![false; h * w];
    let mut tp = 0;
    for (_, p, g) in cand {
        if !used_p[p] && !used_g[g] {
            used_p[p] = true;
            used_g[g] = true;
            tp += 1;
        }
    }
    Ok(Counts {
        tp,
        fp: pred.count() - tp,
        fn_: gt.count() - tp,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct PrPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
    pub f: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PrCurve {
    pub points: Vec<PrPoint>,
}

impl PrCurve {
    /// Area under the precision envelope (best precision at any recall at
    /// least as high), trapezoids over recall, held flat down to recall 0.
    pub fn average_precision(&self) -> f64 {
        let mut pts: Vec<(f64, f64)> = self.points.iter().map(|p| (p.recall, p.precision)).collect();
        if pts.is_empty() {
            return 0.0;
        }
        pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(b.1.total_cmp(&a.1)));
        let mut env = vec![0.0; pts.len()];
        let mut best: f64 = 0.0;
        for i in (0..pts.len()).rev() {
            best = best.max(pts[i].1);
            env[i] = best;
        }
        let mut area = pts[0].0 * env[0];
        for i in 1..pts.len() {
            area += (pts[i].0 - pts[i - 1].0) * 0.5 * (env[i] + env[i - 1]);
        }
        area
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalResult {
    pub ods: f64,
    pub ods_threshold: f64,
    pub ois: f64,
    /// Area under the curve restricted to thresholds with predictions.
    pub ap: f64,
    pub images: usize,
    pub curve: PrCurve,
}

impl EvalResult {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializes")
    }

    /// Plain-text summary plus the curve.
    pub fn table(&self) -> String {
        let mut s = format!(
            "images {}\nODS {:.4} (t={:.2})\nOIS {:.4}\nAP  {:.4}\n\nthreshold precision recall f\n",
            self.images, self.ods, self.ods_threshold, self.ois, self.ap
        );
        for p in &self.curve.points {
            s += &format!("{:.2} {:.4} {:.4} {:.4}\n", p.threshold, p.precision, p.recall, p.f);
        }
        s
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalOptions {
    pub tol_frac: f64,
    pub n_thresholds: usize,
    /// Thin predictions before thresholding.
    pub nms: bool,
}

pub const DEFAULT_TOLERANCE: f64 = 0.0075;

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            tol_frac: DEFAULT_TOLERANCE,
            n_thresholds: 99,
            nms: true,
        }
    }
}

/// `k / (n + 1)` for `k = 1..=n`.
pub fn thresholds(n: usize) -> Vec<f64> {
    (1..=n).map(|k| k as f64 / (n + 1) as f64).collect()
}

/// Counts per threshold for one image. With `opts.nms` the ground truth is
/// thinned by the same operator, so both sides are one pixel wide.
pub fn image_counts(pred: &ContourMap, gt: &Mask, opts: &EvalOptions) -> Result<Vec<Counts>> {
    let (thin, thin_gt);
    let (pred, gt) = if opts.nms {
        thin = nms_thin(pred);
        thin_gt = nms_thin(&gt.to_map()).threshold(0.5);
        (&thin, &thin_gt)
    } else {
        (pred, gt)
    };
    thresholds(opts.n_thresholds)
        .into_iter()
        .map(|t| correspond(&pred.threshold(t), gt, opts.tol_frac))
        .collect()
}

/// Evaluates a dataset of `(prediction, ground truth)` pairs.
pub fn evaluate(data: &[(ContourMap, Mask)], opts: &EvalOptions) -> Result<EvalResult> {
    if data.is_empty() {
        return Err(Error::invalid("evaluation needs at least one image"));
    }
    if opts.n_thresholds == 0 {
        return Err(Error::invalid("need at least one threshold"));
    }
    let ts = thresholds(opts.n_thresholds);
    let mut total = vec![Counts::default(); ts.len()];
    let mut ois_sum = 0.0;
    let per_image: Vec<Vec<Counts>> = data
        .par_iter()
        .map(|(pred, gt)| image_counts(pred, gt, opts))
        .collect::<Result<_>>()?;
    for per in per_image {
        let best = per.iter().map(Counts::f_measure).fold(0.0, f64::max);
        ois_sum += best;
        for (acc, c) in total.iter_mut().zip(per) {
            *acc += c;
        }
    }
    let points: Vec<PrPoint> = ts
        .iter()
        .zip(&total)
        .map(|(&threshold, c)| PrPoint {
            threshold,
            precision: c.precision(),
            recall: c.recall(),
            f: c.f_measure(),
        })
        .collect();
    let (ods_threshold, ods) = points
        .iter()
        .fold((ts[0], f64::NEG_INFINITY), |acc, p| if p.f > acc.1 { (p.threshold, p.f) } else { acc });
    // precision is undefined where nothing is predicted
    let defined = PrCurve {
        points: points
            .iter()
            .zip(&total)
            .filter(|(_, c)| c.tp + c.fp > 0)
            .map(|(p, _)| *p)
            .collect(),
    };
    let curve = PrCurve { points };
    Ok(EvalResult {
        ods,
        ods_threshold,
        ois: ois_sum / data.len() as f64,
        ap: defined.average_precision(),
        images: data.len(),
        curve,
    })
}
