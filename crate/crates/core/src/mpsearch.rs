//! Automatic mixed-precision search.
//!
//! Three passes refine a per-node format assignment under a bound on the
//! relative output error against the all-highest-precision run:
//!
//! 1. [`SearchContext::precision_pass`] starts with every node at the lowest
//!    format and promotes nodes to the highest format in decreasing order of
//!    their single-node sensitivity until the bound holds, then retries the
//!    promoted nodes at each intermediate format in turn.
//! 2. [`SearchContext::structure_pass`] grows downcasts outward from already
//!    downcast nodes, one neighbour and one format level at a time.
//! 3. [`SearchContext::latency_pass`] reverts same-format regions whose
//!    reduced precision does not pay for itself once conversions are counted.
//!
//! The resulting assignment is persisted as a [`PrecisionMap`] keyed by the
//! graph fingerprint.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{uniform_config, Graph, NodeId, NodeKind, PrecisionConfig};
use crate::interp::{
    cast_cost, cast_plan, execute, measure, modeled_cost, node_work, CostModel, ExecMode, Inputs,
};
use crate::numerics::PrecisionFormat;
use crate::tensor::Tensor;

pub const DEFAULT_TAU: f64 = 1e-12;
pub const MAP_SCHEMA_VERSION: u32 = 1;

/// `‖y_h − y‖₂ / max(‖y_h‖₂, τ)` over flattened values.
///
/// Entries that agree exactly (including matching infinities) contribute
/// nothing; any other disagreement involving a non-finite value makes the
/// error infinite.
pub fn relative_error(y_high: &[f64], y: &[f64], tau: f64) -> Result<f64> {
    if y_high.len() != y.len() {
        return Err(Error::DimensionMismatch(format!(
            "reference has {} values, candidate has {}",
            y_high.len(),
            y.len()
        )));
    }
    let mut diff = 0.0;
    let mut norm = 0.0;
    for (&h, &v) in y_high.iter().zip(y) {
        if h.is_finite() {
            norm += h * h;
        }
        if h == v || (h.is_nan() && v.is_nan()) {
            continue;
        }
        if !h.is_finite() || !v.is_finite() {
            return Ok(f64::INFINITY);
        }
        diff += (h - v) * (h - v);
    }
    Ok(diff.sqrt() / norm.sqrt().max(tau))
}

/// [`relative_error`] over lists of tensors, which must match shape by shape.
pub fn relative_error_tensors(y_high: &[Tensor], y: &[Tensor], tau: f64) -> Result<f64> {
    if y_high.len() != y.len() || y_high.iter().zip(y).any(|(a, b)| a.shape() != b.shape()) {
        return Err(Error::DimensionMismatch("output shapes differ".into()));
    }
    let flat = |ts: &[Tensor]| ts.iter().flat_map(|t| t.data().iter().copied()).collect::<Vec<_>>();
    relative_error(&flat(y_high), &flat(y), tau)
}

/// Deterministic standard-normal white noise for every graph input.
pub fn white_noise_inputs(graph: &Graph, seed: u64) -> Inputs {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut inputs = Inputs::new();
    for &id in graph.inputs() {
        if let NodeKind::Input { name, shape, .. } = &graph.node(id).kind {
            let len = shape.iter().product();
            let data = (0..len).map(|_| StandardNormal.sample(&mut rng)).collect();
            inputs.insert(name.clone(), Tensor::new(shape.clone(), data).expect("shape matches"));
        }
    }
    inputs
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CostSource {
    #[default]
    Model,
    Wallclock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchOptions {
    /// Candidate formats; sorted and deduplicated before use.
    pub formats: Vec<PrecisionFormat>,
    pub tau: f64,
    pub cost_source: CostSource,
    pub cost_model: CostModel,
    pub wallclock_repetitions: usize,
    /// Run sensitivity evaluations on the rayon pool.
    pub parallel: bool,
}

impl Default for SearchOptions {
    fn default() -> Self {
        SearchOptions {
            formats: PrecisionFormat::ALL.to_vec(),
            tau: DEFAULT_TAU,
            cost_source: CostSource::Model,
            cost_model: CostModel::default(),
            wallclock_repetitions: 5,
            parallel: true,
        }
    }
}

/// Single-node sensitivity scores `M_π[i]`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SensitivityTable {
    scores: BTreeMap<NodeId, BTreeMap<PrecisionFormat, f64>>,
}

impl SensitivityTable {
    pub fn score(&self, node: NodeId, format: PrecisionFormat) -> f64 {
        self.scores
            .get(&node)
            .and_then(|m| m.get(&format))
            .copied()
            .unwrap_or(0.0)
    }

    pub fn scores(&self) -> &BTreeMap<NodeId, BTreeMap<PrecisionFormat, f64>> {
        &self.scores
    }

    pub fn len(&self) -> usize {
        self.scores.values().map(BTreeMap::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A maximal connected set of compute nodes sharing one reduced format.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CastRegion {
    pub nodes: Vec<NodeId>,
    pub format: PrecisionFormat,
    pub boundary_cast_bytes: u64,
}

/// Partition the nodes below `highest` into maximal same-format regions,
/// ordered by (format, smallest node id).
pub fn cast_regions(graph: &Graph, config: &PrecisionConfig, highest: PrecisionFormat) -> Vec<CastRegion> {
    let plan = cast_plan(graph, config);
    let mut assigned: HashSet<NodeId> = HashSet::new();
    let mut regions = Vec::new();
    for (id, format) in config.iter() {
        if format >= highest || assigned.contains(&id) {
            continue;
        }
        let mut members = BTreeSet::new();
        let mut stack = vec![id];
        while let Some(n) = stack.pop() {
            if !members.insert(n) {
                continue;
            }
            for nb in graph.compute_neighbours(n) {
                if config.format(nb) == format && !members.contains(&nb) {
                    stack.push(nb);
                }
            }
        }
        assigned.extend(members.iter().copied());
        let boundary_cast_bytes = plan
            .iter()
            .filter(|e| {
                let inside = members.contains(&e.producer);
                let readers_inside = e.consumers.iter().any(|c| members.contains(c));
                inside || readers_inside
            })
            .map(|e| e.bytes())
            .sum();
        regions.push(CastRegion {
            nodes: members.into_iter().collect(),
            format,
            boundary_cast_bytes,
        });
    }
    regions.sort_by_key(|r| (r.format, r.nodes[0]));
    regions
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromotionStage {
    /// Format the stage's candidates were tried at.
    pub format: PrecisionFormat,
    pub candidates: Vec<NodeId>,
    pub err_before: f64,
    /// Nodes promoted to the highest format, in promotion order.
    pub promoted: Vec<NodeId>,
    pub err_after: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DowncastAttempt {
    pub seed: NodeId,
    pub node: NodeId,
    pub from: PrecisionFormat,
    pub to: PrecisionFormat,
    pub err: f64,
    pub accepted: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegionDecision {
    Kept,
    Reverted,
    /// Reverting would have broken the error bound, so the region stays.
    RevertRejected,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionEvaluation {
    pub nodes: Vec<NodeId>,
    pub format: PrecisionFormat,
    pub higher: PrecisionFormat,
    pub boundary_cast_bytes: u64,
    pub t_high: f64,
    pub t_low: f64,
    pub t_cast: f64,
    pub gain: f64,
    pub decision: RegionDecision,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeAssignment {
    pub id: NodeId,
    pub kind: String,
    pub shape: Vec<usize>,
    pub format: PrecisionFormat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchReport {
    pub epsilon: f64,
    pub tau: f64,
    pub formats: Vec<PrecisionFormat>,
    pub cost_source: CostSource,
    pub compute_nodes: usize,
    pub probes: usize,
    pub sensitivity: SensitivityTable,
    pub precision_stages: Vec<PromotionStage>,
    pub structure_attempts: Vec<DowncastAttempt>,
    pub latency_regions: Vec<RegionEvaluation>,
    pub err_precision_pass: f64,
    pub err_structure_pass: f64,
    pub err_final: f64,
    pub counts_precision_pass: BTreeMap<PrecisionFormat, usize>,
    pub counts_structure_pass: BTreeMap<PrecisionFormat, usize>,
    pub counts_final: BTreeMap<PrecisionFormat, usize>,
    pub modeled_cost_high: f64,
    pub modeled_cost_final: f64,
    pub measured_seconds_high: Option<f64>,
    pub measured_seconds_final: Option<f64>,
    pub evaluations: usize,
    pub assignment: Vec<NodeAssignment>,
}

impl SearchReport {
    pub fn cost_ratio(&self) -> f64 {
        self.modeled_cost_final / self.modeled_cost_high
    }

    /// Nodes left at the given format.
    pub fn nodes_at(&self, format: PrecisionFormat) -> Vec<&NodeAssignment> {
        self.assignment.iter().filter(|a| a.format == format).collect()
    }

    pub fn summary(&self) -> String {
        let mut out = String::new();
        let counts = |m: &BTreeMap<PrecisionFormat, usize>| {
            m.iter().map(|(f, n)| format!("{f}={n}")).collect::<Vec<_>>().join(" ")
        };
        let _ = writeln!(out, "epsilon {:e} tau {:e} over {} compute nodes", self.epsilon, self.tau, self.compute_nodes);
        let _ = writeln!(out, "precision pass:  err {:.3e}  {}", self.err_precision_pass, counts(&self.counts_precision_pass));
        let _ = writeln!(out, "structure pass:  err {:.3e}  {}", self.err_structure_pass, counts(&self.counts_structure_pass));
        let _ = writeln!(out, "latency pass:    err {:.3e}  {}", self.err_final, counts(&self.counts_final));
        let _ = writeln!(
            out,
            "modeled cost {} -> {} ({:.1}% of all-highest), {} evaluations",
            self.modeled_cost_high,
            self.modeled_cost_final,
            100.0 * self.cost_ratio(),
            self.evaluations
        );
        if let Some(highest) = self.formats.last() {
            let kept: Vec<String> = self
                .nodes_at(*highest)
                .iter()
                .map(|a| format!("{}:{}", a.id, a.kind))
                .collect();
            let _ = writeln!(out, "nodes at {highest}: {}", if kept.is_empty() { "none".into() } else { kept.join(" ") });
        }
        out
    }
}

/// Probe inputs, their reference outputs and the error evaluator shared by all passes.
pub struct SearchContext<'g> {
    graph: &'g Graph,
    probes: Vec<Inputs>,
    references: Vec<Vec<f64>>,
    formats: Vec<PrecisionFormat>,
    options: SearchOptions,
    evaluations: AtomicUsize,
}

impl<'g> SearchContext<'g> {
    pub fn new(graph: &'g Graph, inputs: Inputs, options: SearchOptions) -> Result<Self> {
        Self::with_probes(graph, vec![inputs], options)
    }

    /// Several probe inputs; the error of a configuration is their mean.
    pub fn with_probes(graph: &'g Graph, probes: Vec<Inputs>, options: SearchOptions) -> Result<Self> {
        if probes.is_empty() {
            return Err(Error::InvalidArgument("at least one probe input is required".into()));
        }
        if !(options.tau > 0.0) {
            return Err(Error::InvalidArgument("tau must be positive".into()));
        }
        options.cost_model.validate()?;
        let mut formats = options.formats.clone();
        formats.sort();
        formats.dedup();
        if formats.is_empty() {
            return Err(Error::InvalidArgument("no candidate formats".into()));
        }
        let high = uniform_config(graph, *formats.last().expect("non-empty"));
        let mut references = Vec::with_capacity(probes.len());
        for p in &probes {
            let run = execute(graph, p, &high, ExecMode::FusedContraction)?;
            references.push(run.flat_outputs());
        }
        Ok(SearchContext {
            graph,
            probes,
            references,
            formats,
            options,
            evaluations: AtomicUsize::new(0),
        })
    }

    pub fn graph(&self) -> &Graph {
        self.graph
    }

    pub fn formats(&self) -> &[PrecisionFormat] {
        &self.formats
    }

    pub fn highest(&self) -> PrecisionFormat {
        *self.formats.last().expect("non-empty")
    }

    pub fn lowest(&self) -> PrecisionFormat {
        self.formats[0]
    }

    pub fn high_config(&self) -> PrecisionConfig {
        uniform_config(self.graph, self.highest())
    }

    pub fn evaluations(&self) -> usize {
        self.evaluations.load(Ordering::Relaxed)
    }

    /// Mean relative error over the probes; failed runs score +inf.
    pub fn err(&self, config: &PrecisionConfig) -> f64 {
        self.evaluations.fetch_add(1, Ordering::Relaxed);
        let mut total = 0.0;
        for (probe, reference) in self.probes.iter().zip(&self.references) {
            let e = execute(self.graph, probe, config, ExecMode::FusedContraction)
                .and_then(|run| relative_error(reference, &run.flat_outputs(), self.options.tau))
                .unwrap_or(f64::INFINITY);
            total += e;
        }
        total / self.probes.len() as f64
    }

    fn next_lower(&self, f: PrecisionFormat) -> Option<PrecisionFormat> {
        self.formats.iter().rev().find(|&&g| g < f).copied()
    }

    fn next_higher(&self, f: PrecisionFormat) -> Option<PrecisionFormat> {
        self.formats.iter().find(|&&g| g > f).copied()
    }

    /// Downcast each compute node alone to each non-highest format.
    pub fn sensitivity_scan(&self) -> SensitivityTable {
        let high = self.high_config();
        let highest = self.highest();
        let jobs: Vec<(NodeId, PrecisionFormat)> = self
            .graph
            .compute_nodes()
            .into_iter()
            .flat_map(|id| self.formats.iter().filter(move |&&f| f < highest).map(move |&f| (id, f)))
            .collect();
        let eval = |&(id, f): &(NodeId, PrecisionFormat)| (id, f, self.err(&high.with(id, f)));
        let results: Vec<_> = if self.options.parallel {
            jobs.par_iter().map(eval).collect()
        } else {
            jobs.iter().map(eval).collect()
        };
        let mut table = SensitivityTable::default();
        for id in self.graph.compute_nodes() {
            table.scores.entry(id).or_default().insert(highest, 0.0);
        }
        for (id, f, e) in results {
            table.scores.entry(id).or_default().insert(f, e);
        }
        table
    }

    /// Promotion pass from the all-lowest configuration.
    pub fn precision_pass(&self, epsilon: f64, table: &SensitivityTable) -> Result<(PrecisionConfig, Vec<PromotionStage>)> {
        let highest = self.highest();
        let mut config = uniform_config(self.graph, self.lowest());
        let mut stages = Vec::new();
        let mut candidates = self.graph.compute_nodes();
        let mut level = 0;
        let mut err = self.err(&config);
        loop {
            let format = self.formats[level];
            let mut stage = PromotionStage {
                format,
                candidates: candidates.clone(),
                err_before: err,
                promoted: Vec::new(),
                err_after: err,
            };
            if err <= epsilon || format == highest {
                stages.push(stage);
                break;
            }
            let mut order = candidates.clone();
            order.sort_by(|&a, &b| {
                table
                    .score(b, format)
                    .total_cmp(&table.score(a, format))
                    .then(a.cmp(&b))
            });
            for id in order {
                config.set(id, highest);
                stage.promoted.push(id);
                err = self.err(&config);
                if err <= epsilon {
                    break;
                }
            }
            stage.err_after = err;
            candidates = stage.promoted.clone();
            stages.push(stage);
            level += 1;
            if level + 1 >= self.formats.len() || candidates.is_empty() {
                break;
            }
            for &id in &candidates {
                config.set(id, self.formats[level]);
            }
            err = self.err(&config);
        }
        if err > epsilon {
            return Err(Error::Infeasible { err, epsilon });
        }
        Ok((config, stages))
    }

    /// Local one-level downcasts of neighbours of downcast nodes.
    pub fn structure_pass(&self, epsilon: f64, start: &PrecisionConfig) -> (PrecisionConfig, Vec<DowncastAttempt>) {
        let highest = self.highest();
        let mut config = start.clone();
        let mut seeds: BTreeSet<NodeId> = config.iter().filter(|&(_, f)| f < highest).map(|(id, _)| id).collect();
        let mut attempts = Vec::new();
        while let Some(seed) = seeds.pop_first() {
            for nb in self.graph.compute_neighbours(seed) {
                let from = config.format(nb);
                let Some(to) = self.next_lower(from) else { continue };
                let candidate = config.with(nb, to);
                let err = self.err(&candidate);
                let accepted = err <= epsilon;
                attempts.push(DowncastAttempt {
                    seed,
                    node: nb,
                    from,
                    to,
                    err,
                    accepted,
                });
                if accepted {
                    config = candidate;
                    seeds.insert(nb);
                }
            }
        }
        (config, attempts)
    }

    fn cost(&self, config: &PrecisionConfig) -> Result<f64> {
        match self.options.cost_source {
            CostSource::Model => Ok(modeled_cost(self.graph, config, &self.options.cost_model)),
            CostSource::Wallclock => {
                measure(self.graph, &self.probes[0], config, self.options.wallclock_repetitions.max(3), &self.options.cost_model)
                    .map(|m| m.wall_seconds)
            }
        }
    }

    /// Revert regions whose reduced precision does not lower the cost.
    pub fn latency_pass(&self, epsilon: f64, start: &PrecisionConfig) -> Result<(PrecisionConfig, Vec<RegionEvaluation>)> {
        let highest = self.highest();
        let model = &self.options.cost_model;
        let mut config = start.clone();
        let mut examined: HashSet<(PrecisionFormat, Vec<NodeId>)> = HashSet::new();
        let mut log = Vec::new();
        loop {
            let regions = cast_regions(self.graph, &config, highest);
            let Some(region) = regions
                .into_iter()
                .find(|r| !examined.contains(&(r.format, r.nodes.clone())))
            else {
                break;
            };
            let higher = self.next_higher(region.format).unwrap_or(highest);
            let mut raised = config.clone();
            for &id in &region.nodes {
                raised.set(id, higher);
            }
            let (t_high, t_low, t_cast) = match self.options.cost_source {
                CostSource::Model => {
                    let work = |f: PrecisionFormat| -> f64 {
                        region
                            .nodes
                            .iter()
                            .map(|&id| node_work(self.graph, self.graph.node(id)) as f64 * model.weight(f))
                            .sum()
                    };
                    let cast_delta = cast_cost(self.graph, &config, model) - cast_cost(self.graph, &raised, model);
                    (work(higher), work(region.format), cast_delta)
                }
                CostSource::Wallclock => (self.cost(&raised)?, self.cost(&config)?, 0.0),
            };
            let gain = t_high - (t_low + t_cast);
            let decision = if gain > 0.0 {
                examined.insert((region.format, region.nodes.clone()));
                RegionDecision::Kept
            } else if self.err(&raised) <= epsilon {
                config = raised;
                RegionDecision::Reverted
            } else {
                examined.insert((region.format, region.nodes.clone()));
                RegionDecision::RevertRejected
            };
            log.push(RegionEvaluation {
                nodes: region.nodes,
                format: region.format,
                higher,
                boundary_cast_bytes: region.boundary_cast_bytes,
                t_high,
                t_low,
                t_cast,
                gain,
                decision,
            });
        }
        Ok((config, log))
    }

    /// All three passes.
    pub fn run(&self, epsilon: f64) -> Result<(PrecisionConfig, SearchReport)> {
        if !(epsilon > 0.0) {
            return Err(Error::InvalidArgument(format!("epsilon must be positive, got {epsilon}")));
        }
        let table = self.sensitivity_scan();
        let (pr, precision_stages) = self.precision_pass(epsilon, &table)?;
        let err_pr = self.err(&pr);
        let (st, structure_attempts) = self.structure_pass(epsilon, &pr);
        let err_st = self.err(&st);
        let (fin, latency_regions) = self.latency_pass(epsilon, &st)?;
        let err_fin = self.err(&fin);
        if err_fin > epsilon {
            return Err(Error::Infeasible { err: err_fin, epsilon });
        }
        let high = self.high_config();
        let (measured_high, measured_fin) = match self.options.cost_source {
            CostSource::Wallclock => (Some(self.cost(&high)?), Some(self.cost(&fin)?)),
            CostSource::Model => (None, None),
        };
        let assignment = fin
            .iter()
            .map(|(id, format)| {
                let node = self.graph.node(id);
                NodeAssignment {
                    id,
                    kind: node.kind.label(),
                    shape: node.out_shape.clone(),
                    format,
                }
            })
            .collect();
        let report = SearchReport {
            epsilon,
            tau: self.options.tau,
            formats: self.formats.clone(),
            cost_source: self.options.cost_source,
            compute_nodes: self.graph.compute_nodes().len(),
            probes: self.probes.len(),
            sensitivity: table,
            precision_stages,
            structure_attempts,
            latency_regions,
            err_precision_pass: err_pr,
            err_structure_pass: err_st,
            err_final: err_fin,
            counts_precision_pass: pr.histogram(),
            counts_structure_pass: st.histogram(),
            counts_final: fin.histogram(),
            modeled_cost_high: modeled_cost(self.graph, &high, &self.options.cost_model),
            modeled_cost_final: modeled_cost(self.graph, &fin, &self.options.cost_model),
            measured_seconds_high: measured_high,
            measured_seconds_final: measured_fin,
            evaluations: self.evaluations(),
            assignment,
        };
        Ok((fin, report))
    }
}

/// Run the full search on one probe input.
pub fn search(graph: &Graph, inputs: Inputs, epsilon: f64, options: SearchOptions) -> Result<(PrecisionConfig, SearchReport)> {
    SearchContext::new(graph, inputs, options)?.run(epsilon)
}

/// Persisted search result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrecisionMap {
    pub schema_version: u32,
    pub function: String,
    pub epsilon: f64,
    pub tau: f64,
    pub formats: Vec<PrecisionFormat>,
    pub graph_fingerprint: String,
    pub probe_seed: u64,
    pub assignment: BTreeMap<NodeId, PrecisionFormat>,
}

impl PrecisionMap {
    pub fn new(function: &str, graph: &Graph, config: &PrecisionConfig, epsilon: f64, tau: f64, formats: &[PrecisionFormat], probe_seed: u64) -> Self {
        PrecisionMap {
            schema_version: MAP_SCHEMA_VERSION,
            function: function.to_string(),
            epsilon,
            tau,
            formats: formats.to_vec(),
            graph_fingerprint: graph.fingerprint().to_string(),
            probe_seed,
            assignment: config.assignment().clone(),
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("map serializes");
        s.push('\n');
        s
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let map: PrecisionMap = serde_json::from_str(&text).map_err(|e| Error::malformed(path, e))?;
        if map.schema_version != MAP_SCHEMA_VERSION {
            return Err(Error::malformed(path, format!("unsupported schema_version {}", map.schema_version)));
        }
        Ok(map)
    }

    /// The assignment as a config for `graph`, refusing stale maps.
    pub fn config_for(&self, graph: &Graph) -> Result<PrecisionConfig> {
        if self.graph_fingerprint != graph.fingerprint() {
            return Err(Error::FingerprintMismatch {
                function: self.function.clone(),
                expected: graph.fingerprint().to_string(),
                found: self.graph_fingerprint.clone(),
            });
        }
        PrecisionConfig::from_assignment(graph, self.assignment.clone())
    }
}

pub fn save_map(map: &PrecisionMap, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, map.to_json()).map_err(|e| Error::io(path, e))
}

/// Load a map and check it against `graph`. The map's epsilon is carried
/// along as provenance only.
pub fn load_map(path: &Path, graph: &Graph) -> Result<(PrecisionConfig, PrecisionMap)> {
    let map = PrecisionMap::read(path)?;
    let config = map.config_for(graph)?;
    Ok((config, map))
}

/// Fraction of nodes on which two configs agree, and the disagreeing ids.
pub fn agreement(a: &PrecisionConfig, b: &PrecisionConfig) -> (f64, Vec<NodeId>) {
    let disagree: Vec<NodeId> = a
        .iter()
        .filter(|&(id, f)| b.get(id) != Some(f))
        .map(|(id, _)| id)
        .collect();
    let total = a.len().max(1);
    (1.0 - disagree.len() as f64 / total as f64, disagree)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{GraphBuilder, UnaryOp};
    use PrecisionFormat::*;

    fn one(name: &str, values: &[f64]) -> Inputs {
        let mut i = Inputs::new();
        i.insert(name.into(), Tensor::new(vec![values.len()], values.to_vec()).unwrap());
        i
    }

    #[test]
    fn relative_error_examples() {
        assert_eq!(relative_error(&[3.0, 4.0], &[3.0, 4.0], 1e-12).unwrap(), 0.0);
        assert_eq!(relative_error(&[3.0, 4.0], &[0.0, 0.0], 1e-12).unwrap(), 1.0);
        let e = relative_error(&[0.0, 0.0], &[1e-13, 0.0], 1e-12).unwrap();
        assert_eq!(e, 1e-13 / 1e-12);
        assert_eq!(relative_error(&[1.0], &[f64::INFINITY], 1e-12).unwrap(), f64::INFINITY);
        assert_eq!(relative_error(&[1.0], &[f64::NAN], 1e-12).unwrap(), f64::INFINITY);
        assert!(relative_error(&[1.0], &[1.0, 2.0], 1e-12).is_err());
        let a = [Tensor::scalar(1.0)];
        let b = [Tensor::new(vec![1], vec![1.0]).unwrap()];
        assert!(relative_error_tensors(&a, &b, 1e-12).is_err());
    }

    #[test]
    fn zero_multiplied_node_has_no_sensitivity() {
        let mut b = GraphBuilder::new();
        let x = b.input("x", &[3]);
        let e = b.unary(UnaryOp::Exp, x);
        let z = b.scalar(0.0);
        let m = b.mul(e, z);
        let s = b.add(m, x);
        b.output("s", s);
        let g = b.build().unwrap();
        let ctx = SearchContext::new(&g, one("x", &[0.1, 0.2, 0.5]), SearchOptions::default()).unwrap();
        let table = ctx.sensitivity_scan();
        for f in [Fp16, Tf32, Fp32, Fp64] {
            assert_eq!(table.score(e, f), 0.0);
        }
        assert_eq!(table.len(), 3 * 4);
        assert_eq!(ctx.evaluations(), 3 * 3);
    }

    #[test]
    fn single_node_sensitivity_matches_rounding() {
        let mut b = GraphBuilder::new();
        let x = b.input("x", &[1]);
        let y = b.reshape(x, &[1]);
        b.output("y", y);
        let g = b.build().unwrap();
        let ctx = SearchContext::new(&g, one("x", &[1.0 / 3.0]), SearchOptions::default()).unwrap();
        let table = ctx.sensitivity_scan();
        let third = 1.0 / 3.0;
        assert_eq!(table.score(y, Fp16), (third - 0.333251953125f64).abs() / third);
        assert_eq!(table.score(y, Fp64), 0.0);
    }

    #[test]
    fn infinite_epsilon_keeps_everything_low() {
        let mut b = GraphBuilder::new();
        let x = b.input("x", &[4]);
        let e = b.unary(UnaryOp::Exp, x);
        let l = b.unary(UnaryOp::Log, e);
        b.output("l", l);
        let g = b.build().unwrap();
        let ctx = SearchContext::new(&g, one("x", &[0.1, 0.2, 0.3, 0.4]), SearchOptions::default()).unwrap();
        let table = ctx.sensitivity_scan();
        let (cfg, stages) = ctx.precision_pass(f64::INFINITY, &table).unwrap();
        assert_eq!(cfg, uniform_config(&g, Fp16));
        assert_eq!(stages.len(), 1);
        assert!(stages[0].promoted.is_empty());
    }

    #[test]
    fn structure_pass_leaves_all_low_config_alone() {
        let mut b = GraphBuilder::new();
        let x = b.input("x", &[4]);
        let e = b.unary(UnaryOp::Exp, x);
        b.output("e", e);
        let g = b.build().unwrap();
        let ctx = SearchContext::new(&g, one("x", &[0.1, 0.2, 0.3, 0.4]), SearchOptions::default()).unwrap();
        let low = uniform_config(&g, Fp16);
        let (out, attempts) = ctx.structure_pass(1.0, &low);
        assert_eq!(out, low);
        assert!(attempts.is_empty());
    }

    #[test]
    fn regions_partition_downcast_nodes() {
        let mut b = GraphBuilder::new();
        let x = b.input("x", &[4]);
        let a = b.unary(UnaryOp::Neg, x);
        let c = b.unary(UnaryOp::Exp, a);
        let d = b.unary(UnaryOp::Neg, c);
        let e = b.unary(UnaryOp::Neg, d);
        b.output("e", e);
        let g = b.build().unwrap();
        let mut cfg = uniform_config(&g, Fp64);
        cfg.set(a, Fp16);
        cfg.set(c, Fp16);
        cfg.set(e, Tf32);
        let regions = cast_regions(&g, &cfg, Fp64);
        assert_eq!(regions.len(), 2);
        assert_eq!(regions[0].nodes, vec![a, c]);
        assert_eq!(regions[0].format, Fp16);
        assert_eq!(regions[1].nodes, vec![e]);
        // x -> fp16 (4×2) and c -> fp64 for d (4×8)
        assert_eq!(regions[0].boundary_cast_bytes, 8 + 32);
    }

    #[test]
    fn identity_graph_search_keeps_lowest() {
        let mut b = GraphBuilder::new();
        let x = b.input("x", &[4]);
        let r = b.reshape(x, &[2, 2]);
        let t = b.transpose(r, &[1, 0]);
        b.output("t", t);
        let g = b.build().unwrap();
        let (cfg, report) = search(&g, one("x", &[0.5, 1.0, -2.0, 0.25]), 1e-6, SearchOptions::default()).unwrap();
        assert_eq!(cfg, uniform_config(&g, Fp16));
        assert_eq!(report.err_final, 0.0);
        assert!(report.modeled_cost_final < report.modeled_cost_high);
    }

    #[test]
    fn latency_pass_reverts_unprofitable_region() {
        // A fp16 reduction reading a 1000-element tf32 tensor: raising it
        // to tf32 costs exactly what the removed conversion saved, and a
        // tie reverts.
        let mut b = GraphBuilder::new();
        let x = b.input("x", &[1000]);
        let a = b.unary(UnaryOp::Neg, x);
        let s = b.reduce_max(a, &[0]);
        b.output("s", s);
        let g = b.build().unwrap();
        let values: Vec<f64> = (0..1000).map(|i| i as f64 / 1024.0).collect();
        let ctx = SearchContext::new(&g, one("x", &values), SearchOptions::default()).unwrap();
        let mut cfg = uniform_config(&g, Tf32);
        cfg.set(s, Fp16);
        let (out, log) = ctx.latency_pass(1.0, &cfg).unwrap();
        assert_eq!(out.format(s), Tf32);
        assert_eq!(log[0].nodes, vec![s]);
        assert_eq!(log[0].decision, RegionDecision::Reverted);
        assert_eq!((log[0].t_high, log[0].t_low, log[0].t_cast), (1500.0, 1000.0, 500.0));
        assert_eq!(log[0].gain, 0.0);
    }

    #[test]
    fn latency_pass_keeps_large_contraction_region() {
        let mut b = GraphBuilder::new();
        let r = b.input("r", &[64, 32]);
        let s = b.input("s", &[64, 9]);
        let c = b.contract("bn,bk->nk", r, s);
        b.output("c", c);
        let g = b.build().unwrap();
        let probe = white_noise_inputs(&g, 3);
        let ctx = SearchContext::new(&g, probe, SearchOptions::default()).unwrap();
        let cfg = uniform_config(&g, Fp16);
        let (out, log) = ctx.latency_pass(f64::INFINITY, &cfg).unwrap();
        assert_eq!(out, cfg);
        // 64·32·9 products: tf32 1.5 vs fp16 1.0, conversions identical at both formats
        assert_eq!(log[0].t_high, 64.0 * 32.0 * 9.0 * 1.5);
        assert_eq!(log[0].t_low, 64.0 * 32.0 * 9.0);
        assert_eq!(log[0].t_cast, 0.0);
        assert_eq!(log[0].decision, RegionDecision::Kept);
    }

    #[test]
    fn latency_pass_without_downcasts_is_identity() {
        let mut b = GraphBuilder::new();
        let x = b.input("x", &[4]);
        let e = b.unary(UnaryOp::Exp, x);
        b.output("e", e);
        let g = b.build().unwrap();
        let ctx = SearchContext::new(&g, one("x", &[0.1, 0.2, 0.3, 0.4]), SearchOptions::default()).unwrap();
        let high = uniform_config(&g, Fp64);
        let (out, log) = ctx.latency_pass(1e-6, &high).unwrap();
        assert_eq!(out, high);
        assert!(log.is_empty());
    }

    #[test]
    fn map_round_trip_and_staleness() {
        let mut b = GraphBuilder::new();
        let x = b.input("x", &[4]);
        let e = b.unary(UnaryOp::Exp, x);
        b.output("e", e);
        let g = b.build().unwrap();
        let cfg = uniform_config(&g, Tf32);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("maps/exp.json");
        let map = PrecisionMap::new("exp", &g, &cfg, 1e-6, DEFAULT_TAU, &PrecisionFormat::ALL, 7);
        save_map(&map, &path).unwrap();
        let (loaded, meta) = load_map(&path, &g).unwrap();
        assert_eq!(loaded, cfg);
        assert_eq!(meta, map);

        let text = fs::read_to_string(&path).unwrap();
        let keys: Vec<usize> = [
            "schema_version", "function", "epsilon", "tau", "formats", "graph_fingerprint", "probe_seed", "assignment",
        ]
        .iter()
        .map(|k| text.find(&format!("\"{k}\"")).unwrap())
        .collect();
        assert!(keys.windows(2).all(|w| w[0] < w[1]));

        let edited = text.replace("\"epsilon\": 1e-6", "\"epsilon\": 0.5");
        assert_ne!(edited, text);
        fs::write(&path, edited).unwrap();
        let (_, meta) = load_map(&path, &g).unwrap();
        assert_eq!(meta.epsilon, 0.5);

        let mut b = GraphBuilder::new();
        let x = b.input("x", &[4]);
        let e = b.unary(UnaryOp::Exp, x);
        let n = b.unary(UnaryOp::Neg, e);
        b.output("e", n);
        let bigger = b.build().unwrap();
        assert!(matches!(load_map(&path, &bigger), Err(Error::FingerprintMismatch { .. })));

        assert!(matches!(load_map(&dir.path().join("missing.json"), &g), Err(Error::Io { .. })));
        fs::write(&path, "{ not json").unwrap();
        assert!(matches!(load_map(&path, &g), Err(Error::Malformed { .. })));
    }

    #[test]
    fn agreement_fraction() {
        let mut b = GraphBuilder::new();
        let x = b.input("x", &[4]);
        let e = b.unary(UnaryOp::Exp, x);
        let n = b.unary(UnaryOp::Neg, e);
        b.output("n", n);
        let g = b.build().unwrap();
        let a = uniform_config(&g, Fp32);
        let c = a.with(n, Fp16);
        assert_eq!(agreement(&a, &a), (1.0, vec![]));
        assert_eq!(agreement(&a, &c), (0.5, vec![n]));
    }
}
