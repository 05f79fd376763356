//! Variational Bayes Gaussian splatting.
//!
//! A mixture of `N` Gaussians over points with a spatial and a color
//! modality, each component carrying a Normal–Inverse–Wishart posterior per
//! modality and the mixture weights a Dirichlet posterior. Training is
//! replay-free: every frame is seen once, its statistics are added to the
//! running sufficient statistics and the posterior is recomputed in closed
//! form.
//!
//! The two hot functions, responsibilities and statistic reduction, are
//! built as [`Graph`]s and run through the interpreter so their precision
//! can be searched and mapped.

use std::collections::BTreeMap;
use std::f64::consts::{LN_2, PI};
use std::fs;
use std::path::Path;
use std::time::Instant;

use nalgebra::{Matrix3, Vector3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::digamma;

use crate::error::{Error, Result};
use crate::graph::{uniform_config, Graph, GraphBuilder, NodeId, NodeKind, PrecisionConfig, UnaryOp};
use crate::interp::{container, execute, ExecMode, Execution, Inputs};
use crate::mpsearch::{PrecisionMap, SearchContext, SearchOptions, SearchReport};
use crate::numerics::{round_to_format, PrecisionFormat};
use crate::tensor::Tensor;

pub const DIM: usize = 3;
pub const ELBO_FUNCTION: &str = "compute_elbo_delta";
pub const STATS_FUNCTION: &str = "sum_stats_over_samples";
pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Axis-aligned box enclosing a scene.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub min: Vec3,
    pub max: Vec3,
}

impl Bounds {
    pub fn extent(&self) -> Vec3 {
        self.max - self.min
    }

    pub fn center(&self) -> Vec3 {
        (self.min + self.max) / 2.0
    }
}

/// NIW parameters of one modality for every component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Niw {
    pub mean: Vec<Vec3>,
    pub kappa: Vec<f64>,
    pub scale: Vec<Mat3>,
    pub dof: Vec<f64>,
}

impl Niw {
    fn round_to(&mut self, f: PrecisionFormat) {
        for m in &mut self.mean {
            m.apply(|v| *v = round_to_format(*v, f));
        }
        for v in &mut self.scale {
            v.apply(|x| *x = round_to_format(*x, f));
        }
        for k in self.kappa.iter_mut().chain(self.dof.iter_mut()) {
            *k = round_to_format(*k, f);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureModel {
    pub alpha: Vec<f64>,
    pub space: Niw,
    pub color: Niw,
}

impl MixtureModel {
    pub fn components(&self) -> usize {
        self.alpha.len()
    }

    /// Check positivity constraints and that every scale matrix factorizes.
    pub fn validate(&self) -> Result<()> {
        for n in 0..self.components() {
            let bad = self.alpha[n] <= 0.0
                || [&self.space, &self.color]
                    .iter()
                    .any(|m| m.kappa[n] <= 0.0 || m.dof[n] <= (DIM - 1) as f64);
            if bad {
                return Err(Error::NonFinite(format!("component {n} has an invalid concentration")));
            }
            for m in [&self.space, &self.color] {
                if m.scale[n].cholesky().is_none() {
                    return Err(Error::NotPositiveDefinite { component: n });
                }
            }
        }
        Ok(())
    }

    fn round_to(&mut self, f: PrecisionFormat) {
        for a in &mut self.alpha {
            *a = round_to_format(*a, f);
        }
        self.space.round_to(f);
        self.color.round_to(f);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorConfig {
    pub alpha0: f64,
    pub kappa0: f64,
    /// Spatial prior standard deviation; derived from the scene bounds and
    /// component count when absent.
    pub space_sigma: Option<f64>,
    pub color_sigma: f64,
}

impl Default for PriorConfig {
    fn default() -> Self {
        PriorConfig {
            alpha0: 1.0,
            kappa0: 1.0,
            space_sigma: None,
            color_sigma: 0.1,
        }
    }
}

/// Conjugate prior hyperparameters, with per-component prior means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prior {
    pub alpha0: f64,
    pub kappa0: f64,
    pub dof0: f64,
    pub space_scale: Mat3,
    pub color_scale: Mat3,
    pub space_mean: Vec<Vec3>,
    pub color_mean: Vec<Vec3>,
}

impl Prior {
    /// Prior for `components` components with all means at the scene center.
    pub fn new(config: &PriorConfig, components: usize, bounds: &Bounds) -> Result<Self> {
        if components == 0 {
            return Err(Error::InvalidArgument("component count must be positive".into()));
        }
        if !(config.alpha0 > 0.0 && config.kappa0 > 0.0 && config.color_sigma > 0.0) {
            return Err(Error::InvalidArgument("prior concentrations and scales must be positive".into()));
        }
        let sigma = config
            .space_sigma
            .unwrap_or_else(|| 0.5 * bounds.extent().max() / (components as f64).cbrt());
        if !(sigma > 0.0) {
            return Err(Error::InvalidArgument("spatial prior scale must be positive".into()));
        }
        Ok(Prior {
            alpha0: config.alpha0,
            kappa0: config.kappa0,
            dof0: DIM as f64 + 2.0,
            space_scale: Mat3::identity() * sigma * sigma,
            color_scale: Mat3::identity() * config.color_sigma * config.color_sigma,
            space_mean: vec![bounds.center(); components],
            color_mean: vec![Vec3::repeat(0.5); components],
        })
    }

    pub fn components(&self) -> usize {
        self.space_mean.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModalityStats {
    pub sum_x: Vec<Vec3>,
    pub sum_xxt: Vec<Mat3>,
}

/// Accumulated sufficient statistics per component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SufficientStats {
    pub count: Vec<f64>,
    pub space: ModalityStats,
    pub color: ModalityStats,
}

impl SufficientStats {
    pub fn zeros(components: usize) -> Self {
        let m = || ModalityStats {
            sum_x: vec![Vec3::zeros(); components],
            sum_xxt: vec![Mat3::zeros(); components],
        };
        SufficientStats {
            count: vec![0.0; components],
            space: m(),
            color: m(),
        }
    }

    pub fn add(&mut self, other: &SufficientStats) {
        for (a, b) in self.count.iter_mut().zip(&other.count) {
            *a += b;
        }
        for (mine, theirs) in [(&mut self.space, &other.space), (&mut self.color, &other.color)] {
            for (a, b) in mine.sum_x.iter_mut().zip(&theirs.sum_x) {
                *a += b;
            }
            for (a, b) in mine.sum_xxt.iter_mut().zip(&theirs.sum_xxt) {
                *a += b;
            }
        }
    }

    /// Zero component `k`.
    pub fn clear(&mut self, k: usize) {
        self.count[k] = 0.0;
        for m in [&mut self.space, &mut self.color] {
            m.sum_x[k] = Vec3::zeros();
            m.sum_xxt[k] = Mat3::zeros();
        }
    }

    pub fn max_abs_diff(&self, other: &SufficientStats) -> f64 {
        let mut d: f64 = 0.0;
        for (a, b) in self.count.iter().zip(&other.count) {
            d = d.max((a - b).abs());
        }
        for (x, y) in [(&self.space, &other.space), (&self.color, &other.color)] {
            for (a, b) in x.sum_x.iter().zip(&y.sum_x) {
                d = d.max((a - b).amax());
            }
            for (a, b) in x.sum_xxt.iter().zip(&y.sum_xxt) {
                d = d.max((a - b).amax());
            }
        }
        d
    }

    fn round_to(&mut self, f: PrecisionFormat) {
        for c in &mut self.count {
            *c = round_to_format(*c, f);
        }
        for m in [&mut self.space, &mut self.color] {
            for v in &mut m.sum_x {
                v.apply(|x| *x = round_to_format(*x, f));
            }
            for v in &mut m.sum_xxt {
                v.apply(|x| *x = round_to_format(*x, f));
            }
        }
    }
}

/// Per-sample statistics: count `[B,1]`, `x` `[B,3]` and flattened `x xᵀ` `[B,9]`
/// for each modality.
#[derive(Debug, Clone, PartialEq)]
pub struct UnsummedStats {
    pub count: Tensor,
    pub space: Tensor,
    pub space_outer: Tensor,
    pub color: Tensor,
    pub color_outer: Tensor,
}

fn check_batch(batch: &Tensor) -> Result<usize> {
    match batch.shape() {
        [b, 6] => {
            if !batch.is_finite() {
                return Err(Error::NonFinite("batch contains non-finite values".into()));
            }
            Ok(*b)
        }
        s => Err(Error::DimensionMismatch(format!("batch must be [B, 6], got {s:?}"))),
    }
}

fn columns(batch: &Tensor, offset: usize) -> Tensor {
    let b = batch.shape()[0];
    let data = (0..b).flat_map(|i| batch.row(i)[offset..offset + DIM].to_vec()).collect();
    Tensor::new(vec![b, DIM], data).expect("three columns")
}

fn outer_rows(x: &Tensor) -> Tensor {
    let b = x.shape()[0];
    let data = (0..b)
        .flat_map(|i| {
            let r = x.row(i);
            (0..DIM * DIM).map(move |k| r[k / DIM] * r[k % DIM])
        })
        .collect();
    Tensor::new(vec![b, DIM * DIM], data).expect("nine columns")
}

pub fn unsummed_stats(batch: &Tensor) -> Result<UnsummedStats> {
    let b = check_batch(batch)?;
    let space = columns(batch, 0);
    let color = columns(batch, DIM);
    Ok(UnsummedStats {
        count: Tensor::filled(vec![b, 1], 1.0),
        space_outer: outer_rows(&space),
        color_outer: outer_rows(&color),
        space,
        color,
    })
}

fn modality_term(g: &mut GraphBuilder, tag: &str, x: NodeId, b: usize, n: usize) -> NodeId {
    let m = g.input(&format!("m_{tag}"), &[n, DIM]);
    let vinv = g.input(&format!("vinv_{tag}"), &[n, DIM, DIM]);
    let logdet = g.input(&format!("logdet_{tag}"), &[n]);
    let kappa = g.input(&format!("kappa_{tag}"), &[n]);
    let dof = g.input(&format!("dof_{tag}"), &[n]);
    let half = g.scalar(0.5);

    let xr = g.reshape(x, &[b, 1, DIM]);
    let mr = g.reshape(m, &[1, n, DIM]);
    let diff = g.sub(xr, mr);
    let proj = g.contract("bni,nij->bnj", diff, vinv);
    let quad = g.contract("bnj,bnj->bn", proj, diff);
    let dof_row = g.reshape(dof, &[1, n]);
    let maha = g.mul(quad, dof_row);
    let inv_kappa = g.unary(UnaryOp::Reciprocal, kappa);
    let d = g.scalar(DIM as f64);
    let d_over_kappa = g.mul(inv_kappa, d);
    let dk_row = g.reshape(d_over_kappa, &[1, n]);
    let spread = g.add(maha, dk_row);

    // Σ_i ψ((dof + 1 − i)/2) for i = 1..3
    let half_dof = g.mul(dof, half);
    let half_dof_col = g.reshape(half_dof, &[n, 1]);
    let offsets = g.constant(Tensor::new(vec![1, DIM], vec![0.0, -0.5, -1.0]).expect("shape"));
    let args = g.add(half_dof_col, offsets);
    let psi = g.unary(UnaryOp::Digamma, args);
    let psi_sum = g.reduce_sum(psi, &[1]);
    let log_det_term = g.sub(psi_sum, logdet);
    let half_log_det = g.mul(log_det_term, half);
    // 0.5·3·ln 2 − 1.5·ln 2π = −1.5·ln π
    let constant = g.scalar(-1.5 * PI.ln());
    let base = g.add(half_log_det, constant);
    let base_row = g.reshape(base, &[1, n]);
    let half_spread = g.mul(spread, half);
    g.sub(base_row, half_spread)
}

/// Graph computing per-point ELBO contributions `[B]` and responsibilities `[B,N]`.
pub fn elbo_graph(batch: usize, components: usize) -> Result<Graph> {
    let (b, n) = (batch, components);
    let mut g = GraphBuilder::new();
    let x_s = g.input("x_s", &[b, DIM]);
    let x_c = g.input("x_c", &[b, DIM]);
    let alpha = g.input("alpha", &[n]);
    let space = modality_term(&mut g, "s", x_s, b, n);
    let color = modality_term(&mut g, "c", x_c, b, n);
    let psi_alpha = g.unary(UnaryOp::Digamma, alpha);
    let alpha_total = g.reduce_sum(alpha, &[0]);
    let psi_total = g.unary(UnaryOp::Digamma, alpha_total);
    let log_pi = g.sub(psi_alpha, psi_total);
    let log_pi_row = g.reshape(log_pi, &[1, n]);
    let both = g.add(space, color);
    let log_rho = g.add(both, log_pi_row);
    let peak = g.reduce_max(log_rho, &[1]);
    let peak_col = g.reshape(peak, &[b, 1]);
    let shifted = g.sub(log_rho, peak_col);
    let weights = g.unary(UnaryOp::Exp, shifted);
    let total = g.reduce_sum(weights, &[1]);
    let total_col = g.reshape(total, &[b, 1]);
    let resp = g.div(weights, total_col);
    let log_total = g.unary(UnaryOp::Log, total);
    let elbo = g.add(peak, log_total);
    g.output("elbo", elbo);
    g.output("r", resp);
    g.build()
}

/// Graph reducing responsibilities against per-sample statistics,
/// `ΔS[n,k] = Σ_b R[b,n]·S_u[b,k]` for each statistic.
pub fn stats_graph(batch: usize, components: usize) -> Result<Graph> {
    let mut g = GraphBuilder::new();
    let r = g.input("r", &[batch, components]);
    for (name, k) in [("count", 1), ("s", DIM), ("ss", DIM * DIM), ("c", DIM), ("cc", DIM * DIM)] {
        let su = g.input(name, &[batch, k]);
        let out = g.contract("bn,bk->nk", r, su);
        g.output(&format!("sum_{name}"), out);
    }
    g.build()
}

/// One-contraction `Rᵀ S_u` graph.
pub fn weighted_sum_graph(batch: usize, components: usize, k: usize) -> Result<Graph> {
    let mut g = GraphBuilder::new();
    let r = g.input("r", &[batch, components]);
    let su = g.input("su", &[batch, k]);
    let out = g.contract("bn,bk->nk", r, su);
    g.output("ds", out);
    g.build()
}

/// `Rᵀ S_u` for a single statistic, run through the interpreter in `mode`.
pub fn weighted_sum(r: &Tensor, su: &Tensor, mode: ExecMode, format: PrecisionFormat) -> Result<Execution> {
    let (&[b, n], &[b2, k]) = (r.shape(), su.shape()) else {
        return Err(Error::DimensionMismatch("R and S_u must both be matrices".into()));
    };
    if b != b2 {
        return Err(Error::DimensionMismatch(format!("R has {b} rows, S_u has {b2}")));
    }
    let g = weighted_sum_graph(b, n, k)?;
    let inputs: Inputs = [("r".to_string(), r.clone()), ("su".to_string(), su.clone())].into_iter().collect();
    execute(&g, &inputs, &uniform_config(&g, format), mode)
}

struct Factored {
    inverse: Mat3,
    log_det: f64,
}

fn factor(v: &Mat3, component: usize) -> Result<Factored> {
    let chol = v.cholesky().ok_or(Error::NotPositiveDefinite { component })?;
    let log_det = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    Ok(Factored {
        inverse: chol.inverse(),
        log_det,
    })
}

fn modality_inputs(inputs: &mut Inputs, tag: &str, niw: &Niw) -> Result<()> {
    let n = niw.mean.len();
    let mut m = Vec::with_capacity(n * DIM);
    let mut vinv = Vec::with_capacity(n * DIM * DIM);
    let mut logdet = Vec::with_capacity(n);
    for (i, (mean, scale)) in niw.mean.iter().zip(&niw.scale).enumerate() {
        let f = factor(scale, i)?;
        m.extend(mean.iter());
        vinv.extend(f.inverse.transpose().iter());
        logdet.push(f.log_det);
    }
    let mut put = |name: String, shape: Vec<usize>, data: Vec<f64>| {
        inputs.insert(name, Tensor::new(shape, data).expect("shape matches"));
    };
    put(format!("m_{tag}"), vec![n, DIM], m);
    put(format!("vinv_{tag}"), vec![n, DIM, DIM], vinv);
    put(format!("logdet_{tag}"), vec![n], logdet);
    put(format!("kappa_{tag}"), vec![n], niw.kappa.clone());
    put(format!("dof_{tag}"), vec![n], niw.dof.clone());
    Ok(())
}

/// Inputs of [`elbo_graph`] for `model` and `batch`.
pub fn elbo_inputs(model: &MixtureModel, batch: &Tensor) -> Result<Inputs> {
    check_batch(batch)?;
    let mut inputs = Inputs::new();
    inputs.insert("x_s".into(), columns(batch, 0));
    inputs.insert("x_c".into(), columns(batch, DIM));
    inputs.insert("alpha".into(), Tensor::new(vec![model.components()], model.alpha.clone())?);
    modality_inputs(&mut inputs, "s", &model.space)?;
    modality_inputs(&mut inputs, "c", &model.color)?;
    Ok(inputs)
}

/// Inputs of [`stats_graph`].
pub fn stats_inputs(r: &Tensor, su: &UnsummedStats) -> Inputs {
    [
        ("r", r),
        ("count", &su.count),
        ("s", &su.space),
        ("ss", &su.space_outer),
        ("c", &su.color),
        ("cc", &su.color_outer),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v.clone()))
    .collect()
}

fn stats_from_outputs(run: &Execution, components: usize) -> SufficientStats {
    let out = |name: &str| run.output(name).expect("stats output").data();
    let vecs = |d: &[f64]| (0..components).map(|n| Vec3::from_row_slice(&d[n * DIM..(n + 1) * DIM])).collect();
    let mats = |d: &[f64]| {
        (0..components)
            .map(|n| Mat3::from_row_slice(&d[n * DIM * DIM..(n + 1) * DIM * DIM]))
            .collect()
    };
    SufficientStats {
        count: out("sum_count").to_vec(),
        space: ModalityStats {
            sum_x: vecs(out("sum_s")),
            sum_xxt: mats(out("sum_ss")),
        },
        color: ModalityStats {
            sum_x: vecs(out("sum_c")),
            sum_xxt: mats(out("sum_cc")),
        },
    }
}

/// Point-independent part of the expected log-density of each component,
/// plus what the Mahalanobis term needs.
struct Terms {
    mean: Vec3,
    precision: Mat3,
    constant: f64,
}

fn modality_terms(niw: &Niw) -> Result<Vec<Terms>> {
    let d = DIM as f64;
    (0..niw.mean.len())
        .map(|n| {
            let f = factor(&niw.scale[n], n)?;
            let psi: f64 = (1..=DIM).map(|i| digamma((niw.dof[n] + 1.0 - i as f64) / 2.0)).sum();
            let e_log_det = psi + d * LN_2 - f.log_det;
            Ok(Terms {
                mean: niw.mean[n],
                precision: f.inverse * niw.dof[n],
                constant: 0.5 * e_log_det - 0.5 * d * (2.0 * PI).ln() - 0.5 * d / niw.kappa[n],
            })
        })
        .collect()
}

impl Terms {
    fn log_density(&self, x: &Vec3) -> f64 {
        let diff = x - self.mean;
        self.constant - 0.5 * diff.dot(&(self.precision * diff))
    }
}

fn softmax_rows(log_rho: Vec<Vec<f64>>) -> (Vec<f64>, Vec<Vec<f64>>) {
    let mut elbo = Vec::with_capacity(log_rho.len());
    let mut resp = Vec::with_capacity(log_rho.len());
    for row in log_rho {
        let peak = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = row.iter().map(|v| (v - peak).exp()).collect();
        let total: f64 = w.iter().sum();
        elbo.push(peak + total.ln());
        resp.push(w.into_iter().map(|v| v / total).collect());
    }
    (elbo, resp)
}

fn log_pi(model: &MixtureModel) -> Vec<f64> {
    let psi_total = digamma(model.alpha.iter().sum());
    model.alpha.iter().map(|&a| digamma(a) - psi_total).collect()
}

/// Direct double-width evaluation of the ELBO and responsibilities, without
/// the graph interpreter.
pub fn elbo_reference(model: &MixtureModel, batch: &Tensor) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let b = check_batch(batch)?;
    let ts = modality_terms(&model.space)?;
    let tc = modality_terms(&model.color)?;
    let lp = log_pi(model);
    let log_rho = (0..b)
        .map(|i| {
            let row = batch.row(i);
            let s = Vec3::from_row_slice(&row[..DIM]);
            let c = Vec3::from_row_slice(&row[DIM..]);
            (0..lp.len())
                .map(|k| lp[k] + ts[k].log_density(&s) + tc[k].log_density(&c))
                .collect()
        })
        .collect();
    Ok(softmax_rows(log_rho))
}

/// Spatial-only responsibilities of `points`.
pub fn spatial_responsibilities(model: &MixtureModel, points: &[Vec3]) -> Result<Vec<Vec<f64>>> {
    let ts = modality_terms(&model.space)?;
    let lp = log_pi(model);
    let log_rho = points
        .iter()
        .map(|s| (0..lp.len()).map(|k| lp[k] + ts[k].log_density(s)).collect())
        .collect();
    Ok(softmax_rows(log_rho).1)
}

/// Closed-form conjugate posterior from the prior and accumulated statistics.
pub fn update_from_statistics(prior: &Prior, stats: &SufficientStats) -> Result<MixtureModel> {
    let n = prior.components();
    if stats.count.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "statistics for {} components, prior has {n}",
            stats.count.len()
        )));
    }
    let modality = |m0: &[Vec3], v0: &Mat3, st: &ModalityStats| -> Result<Niw> {
        let mut niw = Niw {
            mean: Vec::with_capacity(n),
            kappa: Vec::with_capacity(n),
            scale: Vec::with_capacity(n),
            dof: Vec::with_capacity(n),
        };
        for i in 0..n {
            let count = stats.count[i];
            let kappa = prior.kappa0 + count;
            let mean = (prior.kappa0 * m0[i] + st.sum_x[i]) / kappa;
            let mut v = v0 + st.sum_xxt[i] + prior.kappa0 * m0[i] * m0[i].transpose() - kappa * mean * mean.transpose();
            v = (v + v.transpose()) / 2.0;
            if v.cholesky().is_none() {
                v += Mat3::identity() * (1e-9 * v.trace() / DIM as f64);
                if v.cholesky().is_none() {
                    return Err(Error::NotPositiveDefinite { component: i });
                }
            }
            niw.mean.push(mean);
            niw.kappa.push(kappa);
            niw.scale.push(v);
            niw.dof.push(prior.dof0 + count);
        }
        Ok(niw)
    };
    let model = MixtureModel {
        alpha: stats.count.iter().map(|c| prior.alpha0 + c).collect(),
        space: modality(&prior.space_mean, &prior.space_scale, &stats.space)?,
        color: modality(&prior.color_mean, &prior.color_scale, &stats.color)?,
    };
    if model.alpha.iter().any(|a| !(a.is_finite() && *a > 0.0)) {
        return Err(Error::NonFinite("mixture weights left the positive reals".into()));
    }
    Ok(model)
}

/// Format assignment for one hot function.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HotPrecision {
    Uniform(PrecisionFormat),
    /// Contractions at one format, every other node at another.
    Contractions {
        contraction: PrecisionFormat,
        other: PrecisionFormat,
    },
    /// Per-node formats; reused by node id for residual batch shapes.
    Mapped(BTreeMap<NodeId, PrecisionFormat>),
}

impl HotPrecision {
    fn config(&self, graph: &Graph) -> Result<PrecisionConfig> {
        match self {
            HotPrecision::Uniform(f) => Ok(uniform_config(graph, *f)),
            HotPrecision::Contractions { contraction, other } => {
                let mut c = uniform_config(graph, *other);
                for id in graph.compute_nodes() {
                    if matches!(graph.node(id).kind, NodeKind::Contraction(_)) {
                        c.set(id, *contraction);
                    }
                }
                Ok(c)
            }
            HotPrecision::Mapped(a) => PrecisionConfig::from_assignment(graph, a.clone()),
        }
    }

    /// Container of the values a homogeneous run stores.
    fn storage(&self) -> Option<PrecisionFormat> {
        match self {
            HotPrecision::Uniform(f) => Some(container(*f)),
            HotPrecision::Contractions { other, .. } => Some(container(*other)),
            HotPrecision::Mapped(_) => None,
        }
    }
}

/// Formats for both hot functions during training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainPrecision {
    pub elbo: HotPrecision,
    pub stats: HotPrecision,
}

impl TrainPrecision {
    pub fn uniform(format: PrecisionFormat) -> Self {
        TrainPrecision {
            elbo: HotPrecision::Uniform(format),
            stats: HotPrecision::Uniform(format),
        }
    }

    /// Homogeneous run at `format`. Tf32 follows tensor-core practice:
    /// contractions compute in tf32 while everything else stays fp32.
    pub fn homogeneous(format: PrecisionFormat) -> Self {
        let p = match format {
            PrecisionFormat::Tf32 => HotPrecision::Contractions {
                contraction: PrecisionFormat::Tf32,
                other: PrecisionFormat::Fp32,
            },
            f => HotPrecision::Uniform(f),
        };
        TrainPrecision {
            elbo: p.clone(),
            stats: p,
        }
    }

    /// Load searched maps, refusing maps built for other graph shapes.
    pub fn from_maps(elbo: &PrecisionMap, stats: &PrecisionMap, components: usize, batch: usize) -> Result<Self> {
        let e = elbo.config_for(&elbo_graph(batch, components)?)?;
        let s = stats.config_for(&stats_graph(batch, components)?)?;
        Ok(TrainPrecision {
            elbo: HotPrecision::Mapped(e.assignment().clone()),
            stats: HotPrecision::Mapped(s.assignment().clone()),
        })
    }

    /// Host-side container format for homogeneous reduced-precision runs.
    pub fn host_format(&self) -> Option<PrecisionFormat> {
        match (self.elbo.storage(), self.stats.storage()) {
            (Some(a), Some(b)) if a == b && a != PrecisionFormat::Fp64 => Some(a),
            _ => None,
        }
    }
}

/// Time and memory spent in the hot functions.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct HotTiming {
    pub elbo_seconds: f64,
    pub elbo_calls: usize,
    pub stats_seconds: f64,
    pub stats_calls: usize,
    pub peak_bytes: u64,
}

/// Compiled hot-function graphs per batch size, with their configs.
pub struct HotFunctions {
    components: usize,
    mode: ExecMode,
    precision: TrainPrecision,
    elbo: BTreeMap<usize, (Graph, PrecisionConfig)>,
    stats: BTreeMap<usize, (Graph, PrecisionConfig)>,
    pub timing: HotTiming,
    pub last_elbo_trace: Option<crate::interp::ExecutionProfile>,
    pub last_stats_trace: Option<crate::interp::ExecutionProfile>,
}

impl HotFunctions {
    pub fn new(components: usize, mode: ExecMode, precision: TrainPrecision) -> Self {
        HotFunctions {
            components,
            mode,
            precision,
            elbo: BTreeMap::new(),
            stats: BTreeMap::new(),
            timing: HotTiming::default(),
            last_elbo_trace: None,
            last_stats_trace: None,
        }
    }

    pub fn precision(&self) -> &TrainPrecision {
        &self.precision
    }

    pub fn set_precision(&mut self, precision: TrainPrecision) {
        if precision != self.precision {
            self.precision = precision;
            self.elbo.clear();
            self.stats.clear();
        }
    }

    pub fn mode(&self) -> ExecMode {
        self.mode
    }

    fn compiled<'a>(
        cache: &'a mut BTreeMap<usize, (Graph, PrecisionConfig)>,
        batch: usize,
        build: impl FnOnce() -> Result<Graph>,
        precision: &HotPrecision,
    ) -> Result<&'a (Graph, PrecisionConfig)> {
        if !cache.contains_key(&batch) {
            let g = build()?;
            let c = precision.config(&g)?;
            cache.insert(batch, (g, c));
        }
        Ok(&cache[&batch])
    }

    /// Per-point ELBO and responsibilities of `batch` under `model`.
    pub fn elbo(&mut self, model: &MixtureModel, batch: &Tensor) -> Result<(Vec<f64>, Tensor)> {
        let b = check_batch(batch)?;
        let n = self.components;
        let (g, cfg) = Self::compiled(&mut self.elbo, b, || elbo_graph(b, n), &self.precision.elbo)?;
        let inputs = elbo_inputs(model, batch)?;
        let t = Instant::now();
        let mut run = execute(g, &inputs, cfg, self.mode)?;
        self.timing.elbo_seconds += t.elapsed().as_secs_f64();
        self.timing.elbo_calls += 1;
        self.timing.peak_bytes = self.timing.peak_bytes.max(run.profile.peak_live_bytes);
        if run.profile.non_finite {
            return Err(Error::NonFinite("responsibilities are not finite".into()));
        }
        let r = run.outputs.pop().expect("r output").1;
        let elbo = run.outputs.pop().expect("elbo output").1.into_data();
        self.last_elbo_trace = Some(run.profile);
        Ok((elbo, r))
    }

    /// Reduce responsibilities against the batch's per-sample statistics.
    pub fn sum_stats(&mut self, r: &Tensor, batch: &Tensor) -> Result<SufficientStats> {
        let b = check_batch(batch)?;
        let n = self.components;
        if r.shape() != [b, n] {
            return Err(Error::DimensionMismatch(format!("R has shape {:?}, expected [{b}, {n}]", r.shape())));
        }
        let su = unsummed_stats(batch)?;
        let (g, cfg) = Self::compiled(&mut self.stats, b, || stats_graph(b, n), &self.precision.stats)?;
        let t = Instant::now();
        let run = execute(g, &stats_inputs(r, &su), cfg, self.mode)?;
        self.timing.stats_seconds += t.elapsed().as_secs_f64();
        self.timing.stats_calls += 1;
        self.timing.peak_bytes = self.timing.peak_bytes.max(run.profile.peak_live_bytes);
        if run.profile.non_finite {
            return Err(Error::NonFinite("statistics are not finite".into()));
        }
        let stats = stats_from_outputs(&run, n);
        self.last_stats_trace = Some(run.profile);
        Ok(stats)
    }
}

/// Split a frame into row batches of at most `batch` points.
pub fn batches(frame: &Tensor, batch: usize) -> Vec<Tensor> {
    let rows = frame.shape()[0];
    let cols = frame.shape()[1];
    (0..rows)
        .step_by(batch.max(1))
        .map(|start| {
            let end = (start + batch).min(rows);
            Tensor::new(vec![end - start, cols], frame.data()[start * cols..end * cols].to_vec()).expect("rows")
        })
        .collect()
}

/// Draw `count` distinct indices with probability proportional to `weights`.
fn sample_without_replacement(weights: &[f64], count: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut w = weights.to_vec();
    let mut chosen = Vec::with_capacity(count);
    for _ in 0..count.min(w.len()) {
        let total: f64 = w.iter().sum();
        let pick = if total > 0.0 && total.is_finite() {
            let mut u = rng.gen::<f64>() * total;
            let mut pick = None;
            for (i, &wi) in w.iter().enumerate() {
                if wi > 0.0 {
                    pick = Some(i);
                    if u < wi {
                        break;
                    }
                    u -= wi;
                }
            }
            pick.expect("positive weight present")
        } else {
            let remaining: Vec<usize> = (0..w.len()).filter(|i| !chosen.contains(i)).collect();
            *remaining.choose(rng).expect("remaining index")
        };
        chosen.push(pick);
        w[pick] = 0.0;
    }
    chosen
}

/// Selection weights `softmax(−elbo / temperature)`.
pub fn selection_probabilities(elbo: &[f64], temperature: f64) -> Vec<f64> {
    let lowest = elbo.iter().copied().fold(f64::INFINITY, f64::min);
    let w: Vec<f64> = elbo.iter().map(|e| (-(e - lowest) / temperature).exp()).collect();
    let total: f64 = w.iter().sum();
    w.into_iter().map(|v| v / total).collect()
}

/// Move the least-used components not yet touched this frame onto points
/// sampled preferentially where the ELBO is low.
///
/// Returns the reassigned component ids.
#[allow(clippy::too_many_arguments)]
pub fn reassign(
    hot: &mut HotFunctions,
    m0: &mut MixtureModel,
    prior: &mut Prior,
    frame: &Tensor,
    n_reassign: usize,
    temperature: f64,
    counts: &[f64],
    updated: &mut [bool],
    rng: &mut impl Rng,
    batch: usize,
) -> Result<Vec<usize>> {
    let p = check_batch(frame)?;
    if p == 0 {
        return Err(Error::EmptyFrame);
    }
    if n_reassign > m0.components() {
        return Err(Error::InvalidArgument(format!(
            "cannot reassign {n_reassign} of {} components",
            m0.components()
        )));
    }
    if n_reassign == 0 {
        return Ok(Vec::new());
    }
    let mut elbo = Vec::with_capacity(p);
    for chunk in batches(frame, batch) {
        elbo.extend(hot.elbo(m0, &chunk)?.0);
    }
    let probs = selection_probabilities(&elbo, temperature);
    let points = sample_without_replacement(&probs, n_reassign, rng);
    let mut candidates: Vec<usize> = (0..m0.components()).filter(|&k| !updated[k]).collect();
    candidates.sort_by(|&a, &b| counts[a].total_cmp(&counts[b]).then(a.cmp(&b)));
    let mut moved = Vec::new();
    for (&point, &k) in points.iter().zip(&candidates) {
        let row = frame.row(point);
        let s = Vec3::from_row_slice(&row[..DIM]);
        let c = Vec3::from_row_slice(&row[DIM..]);
        m0.space.mean[k] = s;
        m0.color.mean[k] = c;
        prior.space_mean[k] = s;
        prior.color_mean[k] = c;
        updated[k] = true;
        moved.push(k);
    }
    Ok(moved)
}

/// Accumulate one frame's statistics using responsibilities under `m0` and
/// recompute the posterior.
pub fn fit(
    hot: &mut HotFunctions,
    m0: &MixtureModel,
    prior: &Prior,
    frame: &Tensor,
    stats: &mut SufficientStats,
    batch: usize,
) -> Result<MixtureModel> {
    let host = hot.precision().host_format();
    for chunk in batches(frame, batch) {
        let (_, r) = hot.elbo(m0, &chunk)?;
        let delta = hot.sum_stats(&r, &chunk)?;
        stats.add(&delta);
        if let Some(f) = host {
            stats.round_to(f);
        }
    }
    let mut model = update_from_statistics(prior, stats)?;
    if let Some(f) = host {
        model.round_to(f);
        model.validate()?;
    }
    Ok(model)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub components: usize,
    pub batch: usize,
    pub n_reassign: usize,
    pub temperature: f64,
    pub prior: PriorConfig,
    pub seed: u64,
    pub mode: ExecMode,
    /// Drop the accumulated statistics of reassigned components.
    pub forget_reassigned: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            components: 512,
            batch: 64,
            n_reassign: 32,
            temperature: 1.0,
            prior: PriorConfig::default(),
            seed: 0,
            mode: ExecMode::FusedContraction,
            forget_reassigned: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.components == 0 || self.batch == 0 {
            return Err(Error::InvalidArgument("components and batch must be positive".into()));
        }
        if self.n_reassign > self.components {
            return Err(Error::InvalidArgument("n_reassign exceeds the component count".into()));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::InvalidArgument("temperature must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameMetrics {
    pub frame: usize,
    pub psnr_mean: Option<f64>,
    pub psnr_ci95: Option<f64>,
    pub seconds: f64,
    pub peak_bytes: u64,
    pub reassign_seconds: f64,
    pub elbo_seconds: f64,
    pub stats_seconds: f64,
}

pub fn metrics_csv(metrics: &[FrameMetrics]) -> String {
    let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
    let mut out = String::from("frame,psnr_mean,psnr_ci95,seconds,peak_bytes\n");
    for m in metrics {
        out.push_str(&format!(
            "{},{},{},{:.6},{}\n",
            m.frame,
            opt(m.psnr_mean),
            opt(m.psnr_ci95),
            m.seconds,
            m.peak_bytes
        ));
    }
    out
}

/// Evaluation hook returning (mean PSNR, 95% half-width).
pub type Evaluator<'a> = &'a dyn Fn(&MixtureModel) -> Result<(f64, f64)>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub schema_version: u32,
    pub frame: usize,
    pub prior: Prior,
    pub model: MixtureModel,
    pub stats: SufficientStats,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).expect("checkpoint serializes");
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let c: Checkpoint = serde_json::from_str(&text).map_err(|e| Error::malformed(path, e))?;
        if c.schema_version != CHECKPOINT_SCHEMA_VERSION {
            return Err(Error::malformed(path, format!("unsupported schema_version {}", c.schema_version)));
        }
        Ok(c)
    }
}

/// Replay-free trainer state.
pub struct Trainer {
    pub config: TrainConfig,
    pub prior: Prior,
    pub model: MixtureModel,
    pub stats: SufficientStats,
    pub frames_seen: usize,
    pub metrics: Vec<FrameMetrics>,
    pub hot: HotFunctions,
    precision: TrainPrecision,
    rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(config: TrainConfig, bounds: &Bounds, precision: TrainPrecision) -> Result<Self> {
        config.validate()?;
        let prior = Prior::new(&config.prior, config.components, bounds)?;
        let stats = SufficientStats::zeros(config.components);
        let model = update_from_statistics(&prior, &stats)?;
        // The first frame always runs at full precision.
        let hot = HotFunctions::new(config.components, config.mode, TrainPrecision::uniform(PrecisionFormat::Fp64));
        Ok(Trainer {
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            config,
            prior,
            model,
            stats,
            frames_seen: 0,
            metrics: Vec::new(),
            hot,
            precision,
        })
    }

    fn initialize_means(&mut self, frame: &Tensor) {
        let p = frame.shape()[0];
        let n = self.config.components;
        let mut order: Vec<usize> = (0..p).collect();
        order.shuffle(&mut self.rng);
        for k in 0..n {
            let row = frame.row(order[k % p]);
            self.prior.space_mean[k] = Vec3::from_row_slice(&row[..DIM]);
            self.prior.color_mean[k] = Vec3::from_row_slice(&row[DIM..]);
        }
    }

    /// Consume one frame: reassign, fit and optionally evaluate.
    pub fn step(&mut self, frame: &Tensor, evaluate: Option<Evaluator<'_>>) -> Result<&FrameMetrics> {
        let p = check_batch(frame)?;
        if p == 0 {
            return Err(Error::EmptyFrame);
        }
        if self.frames_seen == 1 {
            self.hot.set_precision(self.precision.clone());
        }
        let start = Instant::now();
        let before = self.hot.timing.clone();
        self.hot.timing.peak_bytes = 0;
        if self.frames_seen == 0 {
            self.initialize_means(frame);
            self.model = update_from_statistics(&self.prior, &self.stats)?;
        }
        let mut m0 = self.model.clone();
        let mut updated = vec![false; self.config.components];
        let counts = self.stats.count.clone();
        let t = Instant::now();
        let moved = reassign(
            &mut self.hot,
            &mut m0,
            &mut self.prior,
            frame,
            self.config.n_reassign,
            self.config.temperature,
            &counts,
            &mut updated,
            &mut self.rng,
            self.config.batch,
        )?;
        if self.config.forget_reassigned {
            for &k in &moved {
                self.stats.clear(k);
            }
        }
        let reassign_seconds = t.elapsed().as_secs_f64();
        let elbo_before_fit = self.hot.timing.elbo_seconds;
        self.model = fit(&mut self.hot, &m0, &self.prior, frame, &mut self.stats, self.config.batch)?;
        self.frames_seen += 1;
        let seconds = start.elapsed().as_secs_f64();
        let (psnr_mean, psnr_ci95) = match evaluate {
            Some(f) => {
                let (m, c) = f(&self.model)?;
                (Some(m), Some(c))
            }
            None => (None, None),
        };
        self.metrics.push(FrameMetrics {
            frame: self.frames_seen,
            psnr_mean,
            psnr_ci95,
            seconds,
            peak_bytes: self.hot.timing.peak_bytes,
            reassign_seconds,
            elbo_seconds: self.hot.timing.elbo_seconds - elbo_before_fit,
            stats_seconds: self.hot.timing.stats_seconds - before.stats_seconds,
        });
        self.hot.timing.peak_bytes = self.hot.timing.peak_bytes.max(before.peak_bytes);
        Ok(self.metrics.last().expect("just pushed"))
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            schema_version: CHECKPOINT_SCHEMA_VERSION,
            frame: self.frames_seen,
            prior: self.prior.clone(),
            model: self.model.clone(),
            stats: self.stats.clone(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: MixtureModel,
    pub prior: Prior,
    pub stats: SufficientStats,
    pub metrics: Vec<FrameMetrics>,
    pub timing: HotTiming,
}

/// Train over a single-pass stream of `[P, 6]` frames.
pub fn train<I>(
    frames: I,
    bounds: &Bounds,
    config: &TrainConfig,
    precision: TrainPrecision,
    evaluate: Option<Evaluator<'_>>,
) -> Result<TrainOutcome>
where
    I: IntoIterator<Item = Tensor>,
{
    let mut trainer = Trainer::new(config.clone(), bounds, precision)?;
    for frame in frames {
        trainer.step(&frame, evaluate)?;
    }
    Ok(TrainOutcome {
        model: trainer.model,
        prior: trainer.prior,
        stats: trainer.stats,
        metrics: trainer.metrics,
        timing: trainer.hot.timing,
    })
}

/// Probe inputs for a hot function: a frame of uniform noise over the scene
/// bounds scored against `model`.
pub fn probe_inputs(function: &str, model: &MixtureModel, bounds: &Bounds, batch: usize, seed: u64) -> Result<Inputs> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ext = bounds.extent();
    let data: Vec<f64> = (0..batch)
        .flat_map(|_| {
            let s: Vec<f64> = (0..DIM).map(|i| bounds.min[i] + ext[i] * rng.gen::<f64>()).collect();
            let c: Vec<f64> = (0..DIM).map(|_| rng.gen::<f64>()).collect();
            s.into_iter().chain(c)
        })
        .collect();
    let frame = Tensor::new(vec![batch, 2 * DIM], data)?;
    match function {
        ELBO_FUNCTION => elbo_inputs(model, &frame),
        STATS_FUNCTION => {
            let (_, r) = elbo_reference(model, &frame)?;
            let r = Tensor::new(vec![batch, model.components()], r.concat())?;
            Ok(stats_inputs(&r, &unsummed_stats(&frame)?))
        }
        other => Err(Error::InvalidArgument(format!("unknown hot function `{other}`"))),
    }
}

/// The named hot-function graph at the given shape.
pub fn hot_graph(function: &str, batch: usize, components: usize) -> Result<Graph> {
    match function {
        ELBO_FUNCTION => elbo_graph(batch, components),
        STATS_FUNCTION => stats_graph(batch, components),
        other => Err(Error::InvalidArgument(format!("unknown hot function `{other}`"))),
    }
}

/// Outcome of searching one hot function.
pub struct HotSearch {
    pub config: PrecisionConfig,
    pub report: SearchReport,
    pub map: PrecisionMap,
}

/// Search the named hot function at `(batch, model.components())`, probing
/// with noise frames scored against `model`.
pub fn search_hot_function(
    function: &str,
    model: &MixtureModel,
    bounds: &Bounds,
    batch: usize,
    probe_seeds: &[u64],
    epsilon: f64,
    options: SearchOptions,
) -> Result<HotSearch> {
    let graph = hot_graph(function, batch, model.components())?;
    let probes = probe_seeds
        .iter()
        .map(|&seed| probe_inputs(function, model, bounds, batch, seed))
        .collect::<Result<Vec<_>>>()?;
    let ctx = SearchContext::with_probes(&graph, probes, options.clone())?;
    let (config, report) = ctx.run(epsilon)?;
    let map = PrecisionMap::new(
        function,
        &graph,
        &config,
        epsilon,
        options.tau,
        ctx.formats(),
        probe_seeds.first().copied().unwrap_or(0),
    );
    Ok(HotSearch { config, report, map })
}
