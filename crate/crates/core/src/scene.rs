//! Synthetic scenes, sliding-window frame streams and the color PSNR metric.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::vbgs::{spatial_responsibilities, Bounds, MixtureModel, Vec3};

pub const DEFAULT_EVAL_POINTS: usize = 2048;
pub const STRATA: usize = 20;
const EVAL_STREAM: u64 = 0x9e37_79b9_7f4a_7c15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SceneFamily {
    /// Inner faces of an axis-aligned box centered on the origin.
    BoxRoom,
    /// Spheres strung along the x axis.
    SphereCluster,
}

/// Smooth RGB field `c_i = 0.5 + 0.45·sin(f_i·(s_i + s_{i+1}/2) + φ_i)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ColorField {
    pub frequency: [f64; 3],
    pub phase: [f64; 3],
}

impl Default for ColorField {
    fn default() -> Self {
        ColorField {
            frequency: [0.9, 1.3, 0.7],
            phase: [0.0, 1.0, 2.0],
        }
    }
}

impl ColorField {
    pub fn color(&self, s: &Vec3) -> Vec3 {
        Vec3::from_fn(|i, _| {
            let arg = s[i] + 0.5 * s[(i + 1) % 3];
            0.5 + 0.45 * (self.frequency[i] * arg + self.phase[i]).sin()
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub family: SceneFamily,
    pub extent: [f64; 3],
    pub seed: u64,
    #[serde(default)]
    pub color: ColorField,
    /// Sphere count for the sphere cluster.
    #[serde(default = "default_spheres")]
    pub spheres: usize,
}

fn default_spheres() -> usize {
    5
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            family: SceneFamily::BoxRoom,
            extent: [8.0, 4.0, 3.0],
            seed: 7,
            color: ColorField::default(),
            spheres: default_spheres(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Sphere {
    center: Vec3,
    radius: f64,
}

impl SceneSpec {
    pub fn from_toml(text: &str) -> std::result::Result<Self, toml::de::Error> {
        toml::from_str(text)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let spec = Self::from_toml(&text).map_err(|e| Error::malformed(path, e))?;
        spec.validate().map_err(|e| Error::malformed(path, e))?;
        Ok(spec)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scene spec serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.extent.iter().any(|e| !(e.is_finite() && *e > 0.0)) {
            return Err(Error::InvalidArgument("scene extent must be positive".into()));
        }
        if self.family == SceneFamily::SphereCluster && self.spheres == 0 {
            return Err(Error::InvalidArgument("sphere cluster needs at least one sphere".into()));
        }
        Ok(())
    }

    fn spheres(&self) -> Vec<Sphere> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let [l, w, h] = self.extent;
        let k = self.spheres as f64;
        // Neighbouring spheres overlap in x so every window sees surface.
        let radius = (0.6 * l / k).min(0.5 * w.min(h));
        (0..self.spheres)
            .map(|i| {
                let jitter = |rng: &mut ChaCha8Rng, span: f64| (rng.gen::<f64>() - 0.5) * (span - 2.0 * radius).max(0.0);
                Sphere {
                    center: Vec3::new(l * ((i as f64 + 0.5) / k - 0.5), jitter(&mut rng, w), jitter(&mut rng, h)),
                    radius: radius * (0.85 + 0.15 * rng.gen::<f64>()),
                }
            })
            .collect()
    }

    pub fn bounds(&self) -> Bounds {
        match self.family {
            SceneFamily::BoxRoom => Bounds {
                min: -Vec3::from(self.extent) / 2.0,
                max: Vec3::from(self.extent) / 2.0,
            },
            SceneFamily::SphereCluster => {
                let spheres = self.spheres();
                let mut min = Vec3::repeat(f64::INFINITY);
                let mut max = Vec3::repeat(f64::NEG_INFINITY);
                for s in &spheres {
                    min = min.inf(&s.center.add_scalar(-s.radius));
                    max = max.sup(&s.center.add_scalar(s.radius));
                }
                Bounds { min, max }
            }
        }
    }

    /// A uniformly distributed surface point.
    fn sample_surface(&self, spheres: &[Sphere], rng: &mut impl Rng) -> Vec3 {
        match self.family {
            SceneFamily::BoxRoom => {
                let [l, w, h] = self.extent;
                let areas = [w * h, w * h, l * h, l * h, l * w, l * w];
                let total: f64 = areas.iter().sum();
                let mut u = rng.gen::<f64>() * total;
                let mut face = 5;
                for (i, a) in areas.iter().enumerate() {
                    if u < *a {
                        face = i;
                        break;
                    }
                    u -= a;
                }
                let (a, b) = (rng.gen::<f64>(), rng.gen::<f64>());
                let corner = Vec3::from(self.extent) / 2.0;
                let p = match face {
                    0 => Vec3::new(0.0, a * w, b * h),
                    1 => Vec3::new(l, a * w, b * h),
                    2 => Vec3::new(a * l, 0.0, b * h),
                    3 => Vec3::new(a * l, w, b * h),
                    4 => Vec3::new(a * l, b * w, 0.0),
                    _ => Vec3::new(a * l, b * w, h),
                };
                p - corner
            }
            SceneFamily::SphereCluster => {
                let total: f64 = spheres.iter().map(|s| s.radius * s.radius).sum();
                let mut u = rng.gen::<f64>() * total;
                let mut pick = &spheres[spheres.len() - 1];
                for s in spheres {
                    let a = s.radius * s.radius;
                    if u < a {
                        pick = s;
                        break;
                    }
                    u -= a;
                }
                let v = Vec3::from_fn(|_, _| StandardNormal.sample(rng)).normalize();
                pick.center + v * pick.radius
            }
        }
    }

    fn point_row(&self, s: &Vec3) -> [f64; 6] {
        let c = self.color.color(s);
        [s[0], s[1], s[2], c[0], c[1], c[2]]
    }
}

/// Sliding windows along x: `(start, end)` for each frame.
pub fn windows(bounds: &Bounds, n_frames: usize, overlap: f64) -> Vec<(f64, f64)> {
    let (x0, length) = (bounds.min[0], bounds.extent()[0]);
    let width = length / (1.0 + (n_frames as f64 - 1.0) * (1.0 - overlap));
    let stride = width * (1.0 - overlap);
    (0..n_frames)
        .map(|t| {
            let start = x0 + t as f64 * stride;
            let end = if t + 1 == n_frames { bounds.max[0] } else { start + width };
            (start, end)
        })
        .collect()
}

/// Single-pass iterator over `[P, 6]` frames.
pub struct FrameStream {
    spec: SceneSpec,
    spheres: Vec<Sphere>,
    windows: Vec<(f64, f64)>,
    points: usize,
    next: usize,
    rng: ChaCha8Rng,
}

impl Iterator for FrameStream {
    type Item = Tensor;

    fn next(&mut self) -> Option<Tensor> {
        let &(lo, hi) = self.windows.get(self.next)?;
        self.next += 1;
        let mut data = Vec::with_capacity(self.points * 6);
        while data.len() < self.points * 6 {
            let s = self.spec.sample_surface(&self.spheres, &mut self.rng);
            if s[0] >= lo && s[0] <= hi {
                data.extend(self.spec.point_row(&s));
            }
        }
        Some(Tensor::new(vec![self.points, 6], data).expect("frame shape"))
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let left = self.windows.len() - self.next;
        (left, Some(left))
    }
}

impl FrameStream {
    pub fn windows(&self) -> &[(f64, f64)] {
        &self.windows
    }
}

pub fn frame_stream(spec: &SceneSpec, n_frames: usize, points_per_frame: usize, overlap: f64) -> Result<FrameStream> {
    spec.validate()?;
    if n_frames == 0 || points_per_frame == 0 {
        return Err(Error::InvalidArgument("frame count and points per frame must be positive".into()));
    }
    if !(0.0..1.0).contains(&overlap) {
        return Err(Error::InvalidArgument("overlap must lie in [0, 1)".into()));
    }
    Ok(FrameStream {
        spheres: spec.spheres(),
        windows: windows(&spec.bounds(), n_frames, overlap),
        spec: spec.clone(),
        points: points_per_frame,
        next: 0,
        rng: ChaCha8Rng::seed_from_u64(spec.seed),
    })
}

/// Held-out query points over the whole scene, drawn from their own stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSet {
    pub points: Vec<Vec3>,
    pub colors: Vec<Vec3>,
    /// Stratum of each point: twenty equal-count slabs along x.
    pub strata: Vec<usize>,
}

impl EvalSet {
    pub fn new(spec: &SceneSpec, queries: usize) -> Result<Self> {
        spec.validate()?;
        if queries < STRATA {
            return Err(Error::InvalidArgument(format!("need at least {STRATA} evaluation points")));
        }
        let spheres = spec.spheres();
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ EVAL_STREAM);
        let points: Vec<Vec3> = (0..queries).map(|_| spec.sample_surface(&spheres, &mut rng)).collect();
        let colors = points.iter().map(|s| spec.color.color(s)).collect();
        let mut order: Vec<usize> = (0..queries).collect();
        order.sort_by(|&a, &b| points[a][0].total_cmp(&points[b][0]).then(a.cmp(&b)));
        let mut strata = vec![0; queries];
        for (rank, &i) in order.iter().enumerate() {
            strata[i] = rank * STRATA / queries;
        }
        Ok(EvalSet { points, colors, strata })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Color expected under the spatial responsibilities, clamped to the unit cube.
pub fn predict_color(model: &MixtureModel, points: &[Vec3]) -> Result<Vec<Vec3>> {
    let resp = spatial_responsibilities(model, points)?;
    Ok(resp
        .iter()
        .map(|w| {
            let c = w
                .iter()
                .zip(&model.color.mean)
                .fold(Vec3::zeros(), |acc, (wi, m)| acc + m * *wi);
            c.map(|v| v.clamp(0.0, 1.0))
        })
        .collect())
}

/// `10·log₁₀(255²/MSE)` with colors in [0,1] scaled to 0..255; `+inf` when exact.
pub fn psnr(pred: &[Vec3], truth: &[Vec3]) -> Result<f64> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(Error::DimensionMismatch(format!(
            "{} predictions for {} reference colors",
            pred.len(),
            truth.len()
        )));
    }
    let sq: f64 = pred
        .iter()
        .zip(truth)
        .map(|(p, t)| ((p - t) * 255.0).norm_squared())
        .sum();
    let mse = sq / (3 * pred.len()) as f64;
    Ok(if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (255.0f64 * 255.0 / mse).log10()
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    /// PSNR over all queries.
    pub psnr: f64,
    /// Mean of the per-stratum PSNRs.
    pub psnr_mean: f64,
    /// Half-width of the 95% interval of the stratum mean.
    pub psnr_ci95: f64,
    pub strata: Vec<f64>,
}

pub fn evaluate(model: &MixtureModel, eval: &EvalSet) -> Result<Evaluation> {
    let pred = predict_color(model, &eval.points)?;
    let overall = psnr(&pred, &eval.colors)?;
    let strata: Vec<f64> = (0..STRATA)
        .map(|k| {
            let (p, t): (Vec<Vec3>, Vec<Vec3>) = (0..eval.len())
                .filter(|&i| eval.strata[i] == k)
                .map(|i| (pred[i], eval.colors[i]))
                .unzip();
            psnr(&p, &t)
        })
        .collect::<Result<_>>()?;
    let n = strata.len() as f64;
    let mean = strata.iter().sum::<f64>() / n;
    let var = strata.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok(Evaluation {
        psnr: overall,
        psnr_mean: mean,
        psnr_ci95: 1.96 * var.sqrt() / n.sqrt(),
        strata,
    })
}

/// Evaluation hook for the trainer.
pub fn evaluator(eval: &EvalSet) -> impl Fn(&MixtureModel) -> Result<(f64, f64)> + '_ {
    move |m| evaluate(m, eval).map(|e| (e.psnr_mean, e.psnr_ci95))
}
