//! Synthetic contour scenes with exact boundaries.
//!
//! Shapes are painted in list order over a uniform background. A pixel is a
//! boundary pixel when one of its 4-neighbours shows a different shape and
//! the pixel itself belongs to the shape painted later, so a boundary is one
//! pixel wide and lies on the upper shape's side.

pub mod pgm;

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub use pgm::{decode_pgm, encode_pgm, load_pgm, quantize, save_pgm, save_png_gray};

use crate::error::{Error, Result};
use crate::evalkit::Mask;
use crate::kv::KvMap;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub enum Geometry {
    /// Vertices in pixel coordinates, `(x, y)`, pixel centres at `+0.5`.
    Polygon(Vec<(f64, f64)>),
    Ellipse {
        cx: f64,
        cy: f64,
        rx: f64,
        ry: f64,
        /// Rotation in radians.
        angle: f64,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Shape {
    pub geometry: Geometry,
    pub intensity: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub background: f64,
    pub shapes: Vec<Shape>,
    pub noise_sigma: f64,
    pub blur_radius: f64,
    /// 1 for grayscale, 3 for a tinted colour rendering.
    pub channels: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Tensor,
    pub edges: Mask,
}

impl Geometry {
    fn contains(&self, px: f64, py: f64) -> bool {
        match self {
            Geometry::Polygon(v) => {
                let mut inside = false;
                let n = v.len();
                for i in 0..n {
                    let (xi, yi) = v[i];
                    let (xj, yj) = v[(i + n - 1) % n];
                    if (yi > py) != (yj > py) && px < (xj - xi) * (py - yi) / (yj - yi) + xi {
                        inside = !inside;
                    }
                }
                inside
            }
            Geometry::Ellipse {
                cx,
                cy,
                rx,
                ry,
                angle,
            } => {
                let (s, c) = angle.sin_cos();
                let (dx, dy) = (px - cx, py - cy);
                let u = c * dx + s * dy;
                let v = -s * dx + c * dy;
                (u / rx).powi(2) + (v / ry).powi(2) <= 1.0
            }
        }
    }

    fn area(&self) -> f64 {
        match self {
            Geometry::Polygon(v) => {
                let n = v.len();
                0.5 * (0..n)
                    .map(|i| {
                        let (x0, y0) = v[i];
                        let (x1, y1) = v[(i + 1) % n];
                        x0 * y1 - x1 * y0
                    })
                    .sum::<f64>()
                    .abs()
            }
            Geometry::Ellipse { rx, ry, .. } => std::f64::consts::PI * rx * ry,
        }
    }

    /// Axis-aligned bounds `(x0, y0, x1, y1)`.
    fn bounds(&self) -> (f64, f64, f64, f64) {
        match self {
            Geometry::Polygon(v) => v.iter().fold(
                (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY),
                |(a, b, c, d), &(x, y)| (a.min(x), b.min(y), c.max(x), d.max(y)),
            ),
            Geometry::Ellipse {
                cx,
                cy,
                rx,
                ry,
                angle,
            } => {
                let (s, c) = angle.sin_cos();
                let hx = ((rx * c).powi(2) + (ry * s).powi(2)).sqrt();
                let hy = ((rx * s).powi(2) + (ry * c).powi(2)).sqrt();
                (cx - hx, cy - hy, cx + hx, cy + hy)
            }
        }
    }

    /// Axis-aligned rectangle covering pixels `x0..x0+w`, `y0..y0+h`.
    pub fn rect(x0: usize, y0: usize, w: usize, h: usize) -> Self {
        let (x0, y0, x1, y1) = (x0 as f64, y0 as f64, (x0 + w) as f64, (y0 + h) as f64);
        Geometry::Polygon(vec![(x0, y0), (x1, y0), (x1, y1), (x0, y1)])
    }
}

impl SceneSpec {
    pub fn blank(height: usize, width: usize, seed: u64) -> Self {
        SceneSpec {
            height,
            width,
            background: 0.5,
            shapes: Vec::new(),
            noise_sigma: 0.0,
            blur_radius: 0.0,
            channels: 1,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::invalid("canvas must be non-empty"));
        }
        if self.channels != 1 && self.channels != 3 {
            return Err(Error::invalid(format!("channels must be 1 or 3, got {}", self.channels)));
        }
        if !(0.0..=1.0).contains(&self.background) {
            return Err(Error::invalid("background intensity outside [0, 1]"));
        }
        if !(self.noise_sigma >= 0.0 && self.blur_radius >= 0.0) {
            return Err(Error::invalid("noise and blur must be >= 0"));
        }
        for (i, s) in self.shapes.iter().enumerate() {
            if !(0.0..=1.0).contains(&s.intensity) {
                return Err(Error::invalid(format!("shape {i}: intensity outside [0, 1]")));
            }
            if let Geometry::Polygon(v) = &s.geometry {
                if v.len() < 3 {
                    return Err(Error::invalid(format!("shape {i}: polygon needs 3 vertices")));
                }
            }
            if let Geometry::Ellipse { rx, ry, .. } = s.geometry {
                if !(rx > 0.0 && ry > 0.0) {
                    return Err(Error::invalid(format!("shape {i}: degenerate ellipse")));
                }
            }
            let area = s.geometry.area();
            if !(area > 1e-9) {
                return Err(Error::invalid(format!("shape {i}: zero area")));
            }
            let (x0, y0, x1, y1) = s.geometry.bounds();
            let eps = 1e-9;
            if x0 < -eps || y0 < -eps || x1 > self.width as f64 + eps || y1 > self.height as f64 + eps {
                return Err(Error::invalid(format!("shape {i}: extends outside the canvas")));
            }
        }
        Ok(())
    }
}

/// Index of the topmost shape at every pixel, 0 for background.
fn label_map(spec: &SceneSpec) -> Result<Vec<usize>> {
    let (h, w) = (spec.height, spec.width);
    let mut labels = vec![0usize; h * w];
    for (i, s) in spec.shapes.iter().enumerate() {
        let mut covered = 0;
        for y in 0..h {
            for x in 0..w {
                if s.geometry.contains(x as f64 + 0.5, y as f64 + 0.5) {
                    labels[y * w + x] = i + 1;
                    covered += 1;
                }
            }
        }
        if covered == 0 {
            return Err(Error::invalid(format!("shape {i}: covers no pixel centre")));
        }
    }
    Ok(labels)
}

fn boundary(labels: &[usize], h: usize, w: usize) -> Mask {
    let mut m = Mask::empty(h, w);
    for y in 0..h {
        for x in 0..w {
            let l = labels[y * w + x];
            let n = [
                (y > 0).then(|| labels[(y - 1) * w + x]),
                (y + 1 < h).then(|| labels[(y + 1) * w + x]),
                (x > 0).then(|| labels[y * w + x - 1]),
                (x + 1 < w).then(|| labels[y * w + x + 1]),
            ];
            if n.iter().flatten().any(|&q| q < l) {
                m.set(y, x, true);
            }
        }
    }
    m
}

fn gaussian_blur(plane: &mut [f64], h: usize, w: usize, sigma: f64) {
    if sigma <= 0.0 {
        return;
    }
    let r = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = (-r..=r)
                .map(|d| k[(d + r) as usize] * plane[y * w + clamp(x as isize + d, w)])
                .sum();
        }
    }
    for y in 0..h {
        for x in 0..w {
            plane[y * w + x] = (-r..=r)
                .map(|d| k[(d + r) as usize] * tmp[clamp(y as isize + d, h) * w + x])
                .sum();
        }
    }
}

/// Renders a scene. Deterministic in `spec`, including its seed.
pub fn generate(spec: &SceneSpec) -> Result<Sample> {
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);
    let labels = label_map(spec)?;
    let edges = boundary(&labels, h, w);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let tints: Vec<[f64; 3]> = (0..=spec.shapes.len())
        .map(|_| {
            let a = rng.gen_range(-0.15..0.15);
            let b = rng.gen_range(-0.15..0.15);
            [a, b, -(a + b)]
        })
        .collect();
    let noise = Normal::new(0.0, spec.noise_sigma.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::invalid(e.to_string()))?;
    let mut data = Vec::with_capacity(spec.channels * h * w);
    for c in 0..spec.channels {
        let mut plane: Vec<f64> = labels
            .iter()
            .map(|&l| {
                let base = if l == 0 {
                    spec.background
                } else {
                    spec.shapes[l - 1].intensity
                };
                if spec.channels == 3 {
                    base + tints[l][c]
                } else {
                    base
                }
            })
            .collect();
        gaussian_blur(&mut plane, h, w, spec.blur_radius);
        if spec.noise_sigma > 0.0 {
            for v in &mut plane {
                *v += noise.sample(&mut rng);
            }
        }
        data.extend(plane.into_iter().map(|v| v.clamp(0.0, 1.0)));
    }
    Ok(Sample {
        image: Tensor::new(spec.channels, h, w, data)?,
        edges,
    })
}

/// Ranges for random scenes.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneRanges {
    pub height: usize,
    pub width: usize,
    pub min_shapes: usize,
    pub max_shapes: usize,
    pub noise: (f64, f64),
    pub blur: (f64, f64),
    pub channels: usize,
}

impl Default for SceneRanges {
    fn default() -> Self {
        SceneRanges {
            height: 64,
            width: 64,
            min_shapes: 2,
            max_shapes: 5,
            noise: (0.02, 0.08),
            blur: (0.5, 1.2),
            channels: 1,
        }
    }
}

fn random_shape<R: Rng + ?Sized>(rng: &mut R, h: f64, w: f64) -> Geometry {
    let m = w.min(h);
    match rng.gen_range(0..3) {
        0 => {
            let rx = rng.gen_range(0.1 * m..0.3 * m);
            let ry = rng.gen_range(0.1 * m..0.3 * m);
            let r = rx.max(ry);
            Geometry::Ellipse {
                cx: rng.gen_range(r..w - r),
                cy: rng.gen_range(r..h - r),
                rx,
                ry,
                angle: rng.gen_range(0.0..std::f64::consts::PI),
            }
        }
        kind => {
            let n = if kind == 1 { 4 } else { 3 };
            let r = rng.gen_range(0.15 * m..0.35 * m);
            let cx = rng.gen_range(r..w - r);
            let cy = rng.gen_range(r..h - r);
            let start = rng.gen_range(0.0..std::f64::consts::TAU);
            let verts = (0..n)
                .map(|i| {
                    let jitter = rng.gen_range(-0.3..0.3);
                    let a = start + (i as f64 + jitter) * std::f64::consts::TAU / n as f64;
                    let rr = r * rng.gen_range(0.7..1.0);
                    (cx + rr * a.cos(), cy + rr * a.sin())
                })
                .collect();
            Geometry::Polygon(verts)
        }
    }
}

/// Draws a random valid scene: shapes with intensities at least 0.15 away
/// from whatever they are painted over on average.
pub fn random_scene<R: Rng + ?Sized>(rng: &mut R, ranges: &SceneRanges) -> SceneSpec {
    let (h, w) = (ranges.height as f64, ranges.width as f64);
    loop {
        let background: f64 = rng.gen_range(0.1..0.9);
        let n = rng.gen_range(ranges.min_shapes..=ranges.max_shapes);
        let mut shapes = Vec::with_capacity(n);
        let mut last = background;
        for _ in 0..n {
            let mut intensity: f64 = rng.gen_range(0.0..1.0);
            while (intensity - last).abs() < 0.15 {
                intensity = rng.gen_range(0.0..1.0);
            }
            last = intensity;
            shapes.push(Shape {
                geometry: random_shape(rng, h, w),
                intensity,
            });
        }
        let spec = SceneSpec {
            height: ranges.height,
            width: ranges.width,
            background,
            shapes,
            noise_sigma: rng.gen_range(ranges.noise.0..=ranges.noise.1),
            blur_radius: rng.gen_range(ranges.blur.0..=ranges.blur.1),
            channels: ranges.channels,
            seed: rng.gen(),
        };
        if spec.validate().is_ok() && label_map(&spec).is_ok() {
            return spec;
        }
    }
}

/// `count` random samples from one seed.
pub fn random_dataset(seed: u64, count: usize, ranges: &SceneRanges) -> Result<Vec<Sample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| generate(&random_scene(&mut rng, ranges)))
        .collect()
}

/// One `image<TAB>mask` entry.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub image: PathBuf,
    pub mask: PathBuf,
}

/// Parses manifest text; relative paths resolve against `base`.
pub fn parse_manifest(text: &str, base: &Path) -> Result<Vec<ManifestEntry>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (a, b) = line.split_once('\t').ok_or_else(|| {
            Error::Config(format!("manifest line {}: expected image<TAB>mask", i + 1))
        })?;
        out.push(ManifestEntry {
            image: base.join(a.trim()),
            mask: base.join(b.trim()),
        });
    }
    Ok(out)
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let base = path.parent().unwrap_or(Path::new("."));
    parse_manifest(&fs::read_to_string(path)?, base)
}

/// Loads every image and mask of a manifest.
pub fn load_manifest(path: &Path) -> Result<Vec<Sample>> {
    read_manifest(path)?
        .into_iter()
        .map(|e| {
            Ok(Sample {
                image: load_pgm(&e.image)?,
                edges: Mask::from_tensor(&load_pgm(&e.mask)?)?,
            })
        })
        .collect()
}

/// Writes `prefix_NNNN.pgm` / `prefix_NNNN_gt.pgm` pairs and a manifest
/// `prefix.tsv` in `dir`. Returns the manifest path.
pub fn write_dataset(dir: &Path, prefix: &str, samples: &[Sample]) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let mut manifest = String::new();
    for (i, s) in samples.iter().enumerate() {
        if s.image.channels() != 1 {
            return Err(Error::Image("datasets are stored as grayscale PGM".into()));
        }
        let img = format!("{prefix}_{i:04}.pgm");
        let gt = format!("{prefix}_{i:04}_gt.pgm");
        save_pgm(&dir.join(&img), &s.image)?;
        save_pgm(&dir.join(&gt), &s.edges.to_tensor())?;
        manifest += &format!("{img}\t{gt}\n");
    }
    let path = dir.join(format!("{prefix}.tsv"));
    fs::write(&path, manifest)?;
    Ok(path)
}

/// Dataset generation settings read from a `key=value` file.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    pub seed: u64,
    pub train: usize,
    pub test: usize,
    pub ranges: SceneRanges,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            seed: 0,
            train: 200,
            test: 50,
            ranges: SceneRanges::default(),
        }
    }
}

impl DatasetSpec {
    pub const KEYS: &'static [&'static str] = &[
        "seed", "train", "test", "height", "width", "min_shapes", "max_shapes", "noise_min",
        "noise_max", "blur_min", "blur_max",
    ];

    pub fn from_kv(kv: &KvMap) -> Result<Self> {
        kv.check_keys(Self::KEYS)?;
        let d = SceneRanges::default();
        let ranges = SceneRanges {
            height: kv.get_or("height", d.height)?,
            width: kv.get_or("width", d.width)?,
            min_shapes: kv.get_or("min_shapes", d.min_shapes)?,
            max_shapes: kv.get_or("max_shapes", d.max_shapes)?,
            noise: (kv.get_or("noise_min", d.noise.0)?, kv.get_or("noise_max", d.noise.1)?),
            blur: (kv.get_or("blur_min", d.blur.0)?, kv.get_or("blur_max", d.blur.1)?),
            channels: 1,
        };
        if ranges.min_shapes > ranges.max_shapes || ranges.noise.0 > ranges.noise.1 || ranges.blur.0 > ranges.blur.1 {
            return Err(Error::Config("range minimum exceeds maximum".into()));
        }
        if ranges.height < 16 || ranges.width < 16 {
            return Err(Error::Config("canvas must be at least 16x16".into()));
        }
        Ok(DatasetSpec {
            seed: kv.get_or("seed", 0)?,
            train: kv.get_or("train", 200)?,
            test: kv.get_or("test", 50)?,
            ranges,
        })
    }

    /// Train and test splits drawn from independent streams.
    pub fn generate(&self) -> Result<(Vec<Sample>, Vec<Sample>)> {
        Ok((
            random_dataset(self.seed, self.train, &self.ranges)?,
            random_dataset(self.seed ^ 0x7e57_7e57_7e57_7e57, self.test, &self.ranges)?,
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_scene_is_uniform() {
        let s = generate(&SceneSpec::blank(6, 7, 1)).unwrap();
        assert!(s.image.data().iter().all(|&v| v == 0.5));
        assert_eq!(s.edges.count(), 0);
    }

    #[test]
    fn square_edge_count_is_perimeter() {
        for k in [2, 3, 5, 9] {
            let mut spec = SceneSpec::blank(16, 16, 0);
            spec.shapes.push(Shape {
                geometry: Geometry::rect(3, 4, k, k),
                intensity: 0.9,
            });
            let s = generate(&spec).unwrap();
            assert_eq!(s.edges.count(), 4 * k - 4, "k={k}");
            assert!(s.edges.get(4, 3) && !s.edges.get(4, 2));
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let spec = random_scene(&mut rng, &SceneRanges::default());
        assert_eq!(generate(&spec).unwrap(), generate(&spec).unwrap());
        let a = random_dataset(3, 4, &SceneRanges::default()).unwrap();
        let b = random_dataset(3, 4, &SceneRanges::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_bad_shapes() {
        let mut spec = SceneSpec::blank(8, 8, 0);
        spec.shapes.push(Shape {
            geometry: Geometry::Polygon(vec![(1.0, 1.0), (2.0, 2.0), (3.0, 3.0)]),
            intensity: 0.2,
        });
        assert!(generate(&spec).is_err());
        spec.shapes[0].geometry = Geometry::rect(5, 5, 4, 4);
        assert!(generate(&spec).is_err());
        spec.shapes[0].geometry = Geometry::Ellipse { cx: 4.0, cy: 4.0, rx: 0.0, ry: 2.0, angle: 0.0 };
        assert!(generate(&spec).is_err());
        spec.shapes[0].geometry = Geometry::rect(1, 1, 2, 2);
        spec.shapes[0].intensity = 1.5;
        assert!(generate(&spec).is_err());
    }

    #[test]
    fn random_scenes_are_imbalanced() {
        for s in random_dataset(9, 10, &SceneRanges::default()).unwrap() {
            let pos = s.edges.count();
            assert!(pos > 0);
            assert!(pos * 4 < 64 * 64 - pos);
            assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn colour_rendering_has_three_channels() {
        let mut spec = SceneSpec::blank(8, 8, 2);
        spec.channels = 3;
        spec.shapes.push(Shape { geometry: Geometry::rect(2, 2, 3, 3), intensity: 0.6 });
        let s = generate(&spec).unwrap();
        assert_eq!(s.image.channels(), 3);
    }

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let samples = random_dataset(4, 3, &SceneRanges { height: 20, width: 24, ..Default::default() }).unwrap();
        let manifest = write_dataset(dir.path(), "train", &samples).unwrap();
        let back = load_manifest(&manifest).unwrap();
        assert_eq!(back.len(), 3);
        for (a, b) in samples.iter().zip(&back) {
            assert_eq!(a.edges, b.edges);
            assert!(a.image.max_abs_diff(&b.image).unwrap() <= 0.5 / 255.0 + 1e-12);
        }
        assert!(parse_manifest("a.pgm b.pgm\n", dir.path()).is_err());
    }
}
