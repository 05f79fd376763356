//! Graph execution under a precision configuration.
//!
//! Each compute node rounds its operands to its assigned format, computes in
//! double width and rounds the result. Reductions and contractions round
//! every elementary product to the node format and every running partial sum
//! to the accumulation format. Memory is tracked by liveness: a buffer is
//! counted from the moment it is produced until its last consumer has run.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{ContractionSpec, Graph, Node, NodeId, NodeKind, PrecisionConfig, ReduceOp};
use crate::numerics::{bytes_of, round_slice, round_to_format, PrecisionFormat};
use crate::tensor::{strides_of, Tensor};

pub type Inputs = BTreeMap<String, Tensor>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExecMode {
    /// Contractions accumulate directly into their output.
    #[default]
    FusedContraction,
    /// Contractions allocate the full broadcast product before reducing it.
    MaterializeThenReduce,
}

/// Deterministic per-element cost weights standing in for latency.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    pub per_element_weight: BTreeMap<PrecisionFormat, f64>,
    pub cast_weight: f64,
}

impl Default for CostModel {
    fn default() -> Self {
        use PrecisionFormat::*;
        CostModel {
            per_element_weight: [(Fp64, 4.0), (Fp32, 2.0), (Tf32, 1.5), (Fp16, 1.0)].into_iter().collect(),
            cast_weight: 0.5,
        }
    }
}

impl CostModel {
    pub fn weight(&self, format: PrecisionFormat) -> f64 {
        self.per_element_weight[&format]
    }

    /// Weights must be positive, cover every format and not increase as
    /// formats narrow (with fp64 strictly the most expensive).
    pub fn validate(&self) -> Result<()> {
        use PrecisionFormat::*;
        if PrecisionFormat::ALL
            .iter()
            .any(|f| !self.per_element_weight.get(f).is_some_and(|w| *w > 0.0 && w.is_finite()))
            || !(self.cast_weight > 0.0 && self.cast_weight.is_finite())
        {
            return Err(Error::InvalidArgument("cost weights must be positive and finite for every format".into()));
        }
        let w = |f| self.weight(f);
        if !(w(Fp64) > w(Fp32) && w(Fp32) >= w(Tf32) && w(Tf32) >= w(Fp16)) {
            return Err(Error::InvalidArgument(
                "cost weights must satisfy fp64 > fp32 >= tf32 >= fp16".into(),
            ));
        }
        Ok(())
    }
}

/// Whether moving a buffer from `from` to `to` needs an explicit conversion.
/// TF32 and FP32 share 32-bit containers, so no conversion pass is needed
/// between them; the TF32 rounding happens inside the consuming operation.
pub fn needs_cast(from: PrecisionFormat, to: PrecisionFormat) -> bool {
    use PrecisionFormat::*;
    from != to && !matches!((from, to), (Tf32, Fp32) | (Fp32, Tf32))
}

/// Container format values of `format` are held in.
pub fn container(format: PrecisionFormat) -> PrecisionFormat {
    match format {
        PrecisionFormat::Tf32 => PrecisionFormat::Fp32,
        f => f,
    }
}

/// Format in which a node's output buffer is stored.
pub fn storage_format(node: &Node, config: &PrecisionConfig) -> PrecisionFormat {
    match &node.kind {
        NodeKind::Input { format, .. } | NodeKind::Constant { format, .. } => *format,
        NodeKind::Cast { to } => *to,
        NodeKind::Contraction(_) | NodeKind::Reduce { op: ReduceOp::Sum, .. } => {
            config.format(node.id).accumulation()
        }
        _ => config.format(node.id),
    }
}

/// Number of elementary operations a node performs: the output size for
/// elementwise and data-movement nodes, the operand size for reductions and
/// the full product space for contractions.
pub fn node_work(graph: &Graph, node: &Node) -> u64 {
    match &node.kind {
        NodeKind::Reduce { .. } => graph.node(node.operands[0]).elements(),
        NodeKind::Contraction(spec) => {
            let extents = label_extents(spec, &graph.node(node.operands[0]).out_shape, &graph.node(node.operands[1]).out_shape);
            spec.all_labels().iter().map(|c| extents[c] as u64).product()
        }
        NodeKind::Input { .. } | NodeKind::Constant { .. } => 0,
        _ => node.elements(),
    }
}

/// One conversion buffer materialized at a format boundary.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CastEdge {
    pub producer: NodeId,
    pub from: PrecisionFormat,
    pub to: PrecisionFormat,
    pub elements: u64,
    /// Consumers served by this conversion; empty for a graph-output cast.
    pub consumers: Vec<NodeId>,
}

impl CastEdge {
    pub fn bytes(&self) -> u64 {
        self.elements * self.to.storage_bytes()
    }
}

/// Conversions implied by `config`: one per (producer, target container),
/// plus one per graph output not stored in fp64.
pub fn cast_plan(graph: &Graph, config: &PrecisionConfig) -> Vec<CastEdge> {
    let mut edges: BTreeMap<(NodeId, PrecisionFormat), CastEdge> = BTreeMap::new();
    for node in graph.nodes() {
        if !node.kind.is_compute() {
            continue;
        }
        let target = config.format(node.id);
        for &op in &node.operands {
            let producer = graph.node(op);
            let from = storage_format(producer, config);
            if needs_cast(from, target) {
                let edge = edges.entry((op, container(target))).or_insert_with(|| CastEdge {
                    producer: op,
                    from,
                    to: container(target),
                    elements: producer.elements(),
                    consumers: Vec::new(),
                });
                if !edge.consumers.contains(&node.id) {
                    edge.consumers.push(node.id);
                }
            }
        }
    }
    let mut plan: Vec<CastEdge> = edges.into_values().collect();
    let mut seen = Vec::new();
    for (_, id) in graph.outputs() {
        let node = graph.node(*id);
        let from = storage_format(node, config);
        if needs_cast(from, PrecisionFormat::Fp64) && !seen.contains(id) {
            seen.push(*id);
            plan.push(CastEdge {
                producer: *id,
                from,
                to: PrecisionFormat::Fp64,
                elements: node.elements(),
                consumers: Vec::new(),
            });
        }
    }
    plan
}

/// Modeled cost of one node (zero for inputs and constants).
pub fn node_modeled_cost(graph: &Graph, node: &Node, config: &PrecisionConfig, cost: &CostModel) -> f64 {
    match &node.kind {
        NodeKind::Input { .. } | NodeKind::Constant { .. } => 0.0,
        NodeKind::Cast { .. } => node.elements() as f64 * cost.cast_weight,
        _ => node_work(graph, node) as f64 * cost.weight(config.format(node.id)),
    }
}

/// Static modeled cost: Σ work × weight(format) + cast elements × cast weight.
pub fn modeled_cost(graph: &Graph, config: &PrecisionConfig, cost: &CostModel) -> f64 {
    let compute: f64 = graph
        .nodes()
        .iter()
        .map(|n| node_modeled_cost(graph, n, config, cost))
        .sum();
    compute + cast_cost(graph, config, cost)
}

pub fn cast_cost(graph: &Graph, config: &PrecisionConfig, cost: &CostModel) -> f64 {
    cast_plan(graph, config)
        .iter()
        .map(|e| e.elements as f64 * cost.cast_weight)
        .sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeProfile {
    pub id: NodeId,
    pub kind: String,
    pub format: Option<PrecisionFormat>,
    pub bytes: u64,
    pub elapsed_seconds: f64,
    pub modeled_cost: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub step: usize,
    pub seconds: f64,
    pub live_bytes: u64,
    pub event: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionProfile {
    pub mode: ExecMode,
    pub peak_live_bytes: u64,
    pub nodes: Vec<NodeProfile>,
    pub cast_count: usize,
    pub cast_bytes: u64,
    pub cast_elements: u64,
    pub modeled_cost: f64,
    pub total_seconds: f64,
    /// Set when any output contains inf or NaN.
    pub non_finite: bool,
    pub trace: Vec<TracePoint>,
}

impl ExecutionProfile {
    pub fn per_node_elapsed(&self) -> BTreeMap<NodeId, f64> {
        self.nodes.iter().map(|n| (n.id, n.elapsed_seconds)).collect()
    }

    pub fn per_node_modeled_cost(&self) -> BTreeMap<NodeId, f64> {
        self.nodes.iter().map(|n| (n.id, n.modeled_cost)).collect()
    }

    /// Line-oriented report: node id, kind, format, bytes, elapsed, modeled cost.
    pub fn report(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# id kind format bytes elapsed_s modeled_cost");
        for n in &self.nodes {
            let _ = writeln!(
                out,
                "{} {} {} {} {:.9} {}",
                n.id,
                n.kind,
                n.format.map_or("-", PrecisionFormat::name),
                n.bytes,
                n.elapsed_seconds,
                n.modeled_cost
            );
        }
        let _ = writeln!(
            out,
            "# peak_live_bytes={} casts={} cast_bytes={} modeled_cost={} total_s={:.9} non_finite={}",
            self.peak_live_bytes, self.cast_count, self.cast_bytes, self.modeled_cost, self.total_seconds, self.non_finite
        );
        out
    }

    /// Memory-over-time trace as CSV.
    pub fn trace_csv(&self) -> String {
        let mut out = String::from("step,seconds,live_bytes,event\n");
        for p in &self.trace {
            let _ = writeln!(out, "{},{:.9},{},{}", p.step, p.seconds, p.live_bytes, p.event);
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct Execution {
    pub outputs: Vec<(String, Tensor)>,
    pub profile: ExecutionProfile,
}

impl Execution {
    pub fn output(&self, name: &str) -> Option<&Tensor> {
        self.outputs.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// All outputs flattened and concatenated in output order.
    pub fn flat_outputs(&self) -> Vec<f64> {
        self.outputs.iter().flat_map(|(_, t)| t.data().iter().copied()).collect()
    }
}

struct LiveSet {
    start: Instant,
    live: u64,
    peak: u64,
    step: usize,
    trace: Vec<TracePoint>,
}

impl LiveSet {
    fn alloc(&mut self, bytes: u64, event: impl FnOnce() -> String) {
        self.live += bytes;
        self.peak = self.peak.max(self.live);
        self.record(event());
    }

    fn free(&mut self, bytes: u64, event: impl FnOnce() -> String) {
        self.live -= bytes;
        self.record(event());
    }

    fn record(&mut self, event: String) {
        self.trace.push(TracePoint {
            step: self.step,
            seconds: self.start.elapsed().as_secs_f64(),
            live_bytes: self.live,
            event,
        });
        self.step += 1;
    }
}

/// Execute `graph` on `inputs` under `config`.
pub fn execute(graph: &Graph, inputs: &Inputs, config: &PrecisionConfig, mode: ExecMode) -> Result<Execution> {
    execute_with_cost(graph, inputs, config, mode, &CostModel::default())
}

/// [`execute`] with an explicit cost model for the profile.
pub fn execute_with_cost(
    graph: &Graph,
    inputs: &Inputs,
    config: &PrecisionConfig,
    mode: ExecMode,
    cost: &CostModel,
) -> Result<Execution> {
    config.check(graph)?;
    for &id in graph.inputs() {
        if let NodeKind::Input { name, shape, .. } = &graph.node(id).kind {
            let t = inputs.get(name).ok_or_else(|| Error::MissingInput(name.clone()))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::InputShape {
                    name: name.clone(),
                    expected: shape.clone(),
                    actual: t.shape().to_vec(),
                });
            }
        }
    }
    let start = Instant::now();
    let nodes = graph.nodes();
    let outputs: Vec<NodeId> = graph.outputs().iter().map(|(_, id)| *id).collect();
    let plan = cast_plan(graph, config);

    // Last position at which each buffer is read.
    let mut last_use: HashMap<NodeId, usize> = HashMap::new();
    for (pos, node) in nodes.iter().enumerate() {
        for &op in &node.operands {
            last_use.insert(op, pos);
        }
    }
    for id in &outputs {
        last_use.insert(*id, usize::MAX);
    }
    let mut cast_for: HashMap<(NodeId, NodeId), usize> = HashMap::new();
    let mut cast_last: Vec<usize> = Vec::new();
    for (k, edge) in plan.iter().enumerate() {
        for &c in &edge.consumers {
            cast_for.insert((edge.producer, c), k);
        }
        cast_last.push(edge.consumers.iter().map(|&c| graph.position(c)).max().unwrap_or(usize::MAX));
    }
    let mut cast_live = vec![false; plan.len()];

    let mut live = LiveSet {
        start,
        live: 0,
        peak: 0,
        step: 0,
        trace: Vec::new(),
    };
    let mut values: Vec<Option<Tensor>> = vec![None; nodes.len()];
    let mut buffer_bytes: Vec<u64> = vec![0; nodes.len()];
    let mut profiles = Vec::with_capacity(nodes.len());

    for (pos, node) in nodes.iter().enumerate() {
        let node_start = Instant::now();
        let storage = storage_format(node, config);
        let out_bytes = bytes_of(&node.out_shape, storage)?;
        let value = match &node.kind {
            NodeKind::Input { name, format, .. } => {
                let mut t = inputs.get(name).ok_or_else(|| Error::MissingInput(name.clone()))?.clone();
                round_slice(t.data_mut(), *format);
                live.alloc(out_bytes, || format!("input {}", node.id));
                t
            }
            NodeKind::Constant { value, format } => {
                let mut t = value.clone();
                round_slice(t.data_mut(), *format);
                live.alloc(out_bytes, || format!("constant {}", node.id));
                t
            }
            kind => {
                for &op in &node.operands {
                    if let Some(&k) = cast_for.get(&(op, node.id)) {
                        if !cast_live[k] {
                            cast_live[k] = true;
                            live.alloc(plan[k].bytes(), || format!("cast {}->{} for {}", op, plan[k].to, node.id));
                        }
                    }
                }
                let operands: Vec<&Tensor> = node
                    .operands
                    .iter()
                    .map(|op| values[graph.position(*op)].as_ref().expect("operand computed before use"))
                    .collect();
                let operand_shapes: Vec<&[usize]> = operands.iter().map(|t| t.shape()).collect();
                let format = config.get(node.id);
                match kind {
                    NodeKind::Cast { to } => {
                        live.alloc(out_bytes, || format!("node {} cast", node.id));
                        let mut t = operands[0].clone();
                        round_slice(t.data_mut(), *to);
                        t
                    }
                    NodeKind::Contraction(spec) => {
                        let f = format.expect("compute node has a format");
                        let mut intermediate = 0;
                        if mode == ExecMode::MaterializeThenReduce {
                            let extents = label_extents(spec, operand_shapes[0], operand_shapes[1]);
                            let product_shape: Vec<usize> = spec.all_labels().iter().map(|c| extents[c]).collect();
                            intermediate = bytes_of(&product_shape, container(f))?;
                            live.alloc(intermediate, || format!("node {} broadcast product", node.id));
                        }
                        live.alloc(out_bytes, || format!("node {} contraction", node.id));
                        let t = contract(spec, operands[0], operands[1], f, mode);
                        if intermediate > 0 {
                            live.free(intermediate, || format!("node {} broadcast product", node.id));
                        }
                        t
                    }
                    _ => {
                        live.alloc(out_bytes, || format!("node {} {}", node.id, kind.label()));
                        let f = format.expect("compute node has a format");
                        eval_simple(kind, &operands, &node.out_shape, f)
                    }
                }
            }
        };
        values[pos] = Some(value);
        buffer_bytes[pos] = out_bytes;

        // Release operand buffers and conversions whose last reader just ran.
        for &op in &node.operands {
            let p = graph.position(op);
            if last_use.get(&op) == Some(&pos) && values[p].is_some() {
                values[p] = None;
                live.free(buffer_bytes[p], || format!("free {op}"));
            }
            if let Some(&k) = cast_for.get(&(op, node.id)) {
                if cast_live[k] && cast_last[k] == pos {
                    cast_live[k] = false;
                    live.free(plan[k].bytes(), || format!("free cast {}->{}", op, plan[k].to));
                }
            }
        }
        if !last_use.contains_key(&node.id) {
            // Inputs nobody reads.
            values[pos] = None;
            live.free(out_bytes, || format!("free {}", node.id));
        }

        profiles.push(NodeProfile {
            id: node.id,
            kind: node.kind.label(),
            format: config.get(node.id),
            bytes: out_bytes,
            elapsed_seconds: node_start.elapsed().as_secs_f64(),
            modeled_cost: node_modeled_cost(graph, node, config, cost),
        });
    }

    let mut result = Vec::with_capacity(outputs.len());
    for (name, id) in graph.outputs() {
        let t = values[graph.position(*id)].clone().expect("outputs stay live");
        result.push((name.clone(), t));
    }
    for edge in plan.iter().filter(|e| e.consumers.is_empty()) {
        live.alloc(edge.bytes(), || format!("output cast {}->fp64", edge.producer));
    }

    let non_finite = result.iter().any(|(_, t)| !t.is_finite());
    let cast_elements: u64 = plan.iter().map(|e| e.elements).sum::<u64>()
        + nodes
            .iter()
            .filter(|n| matches!(n.kind, NodeKind::Cast { .. }))
            .map(Node::elements)
            .sum::<u64>();
    let explicit_casts = nodes.iter().filter(|n| matches!(n.kind, NodeKind::Cast { .. })).count();
    let explicit_cast_bytes: u64 = nodes
        .iter()
        .filter(|n| matches!(n.kind, NodeKind::Cast { .. }))
        .map(|n| buffer_bytes[graph.position(n.id)])
        .sum();
    let compute_cost: f64 = profiles.iter().map(|p| p.modeled_cost).sum();
    let implicit_cast_cost: f64 = plan.iter().map(|e| e.elements as f64 * cost.cast_weight).sum();
    let profile = ExecutionProfile {
        mode,
        peak_live_bytes: live.peak,
        nodes: profiles,
        cast_count: plan.len() + explicit_casts,
        cast_bytes: plan.iter().map(CastEdge::bytes).sum::<u64>() + explicit_cast_bytes,
        cast_elements,
        modeled_cost: compute_cost + implicit_cast_cost,
        total_seconds: start.elapsed().as_secs_f64(),
        non_finite,
        trace: live.trace,
    };
    Ok(Execution {
        outputs: result,
        profile,
    })
}

fn label_extents(spec: &ContractionSpec, lhs: &[usize], rhs: &[usize]) -> HashMap<char, usize> {
    spec.lhs
        .iter()
        .zip(lhs)
        .chain(spec.rhs.iter().zip(rhs))
        .map(|(&c, &e)| (c, e))
        .collect()
}

/// Offsets into an operand of `shape` for every index of `out_shape` under
/// trailing-dimension broadcasting.
fn broadcast_offsets(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let strides = strides_of(shape);
    let mut eff = vec![0usize; rank];
    for i in 0..shape.len() {
        eff[rank - shape.len() + i] = if shape[i] == 1 { 0 } else { strides[i] };
    }
    walk_offsets(out_shape, &eff)
}

/// Offsets visited by a row-major walk over `extents` with the given strides.
fn walk_offsets(extents: &[usize], strides: &[usize]) -> Vec<usize> {
    let total: usize = extents.iter().product();
    let rank = extents.len();
    let mut offsets = Vec::with_capacity(total);
    let mut index = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..total {
        offsets.push(offset);
        for d in (0..rank).rev() {
            index[d] += 1;
            offset += strides[d];
            if index[d] < extents[d] {
                break;
            }
            offset -= strides[d] * index[d];
            index[d] = 0;
        }
    }
    offsets
}

fn eval_simple(kind: &NodeKind, operands: &[&Tensor], out_shape: &[usize], f: PrecisionFormat) -> Tensor {
    let r = |x: f64| round_to_format(x, f);
    match kind {
        NodeKind::Unary(op) => {
            let data = operands[0].data().iter().map(|&x| r(op.apply(r(x)))).collect();
            Tensor::new(out_shape.to_vec(), data).expect("shape inferred")
        }
        NodeKind::Binary(op) => {
            let (a, b) = (operands[0], operands[1]);
            let data = if a.shape() == out_shape && b.shape() == out_shape {
                a.data().iter().zip(b.data()).map(|(&x, &y)| r(op.apply(r(x), r(y)))).collect()
            } else {
                let oa = broadcast_offsets(a.shape(), out_shape);
                let ob = broadcast_offsets(b.shape(), out_shape);
                oa.iter()
                    .zip(&ob)
                    .map(|(&i, &j)| r(op.apply(r(a.data()[i]), r(b.data()[j]))))
                    .collect()
            };
            Tensor::new(out_shape.to_vec(), data).expect("shape inferred")
        }
        NodeKind::Reduce { op, axes } => reduce(*op, operands[0], axes, out_shape, f),
        NodeKind::Transpose { perm } => {
            let src = operands[0];
            let strides = strides_of(src.shape());
            let permuted: Vec<usize> = perm.iter().map(|&p| strides[p]).collect();
            let data = walk_offsets(out_shape, &permuted).into_iter().map(|o| r(src.data()[o])).collect();
            Tensor::new(out_shape.to_vec(), data).expect("shape inferred")
        }
        NodeKind::Reshape { .. } => {
            let data = operands[0].data().iter().map(|&x| r(x)).collect();
            Tensor::new(out_shape.to_vec(), data).expect("shape inferred")
        }
        NodeKind::Input { .. } | NodeKind::Constant { .. } | NodeKind::Cast { .. } | NodeKind::Contraction(_) => {
            unreachable!("handled by the caller")
        }
    }
}

fn reduce(op: ReduceOp, src: &Tensor, axes: &[usize], out_shape: &[usize], f: PrecisionFormat) -> Tensor {
    let strides = strides_of(src.shape());
    let (mut kept_extents, mut kept_strides, mut red_extents, mut red_strides) = (vec![], vec![], vec![], vec![]);
    for (d, (&e, &s)) in src.shape().iter().zip(&strides).enumerate() {
        if axes.contains(&d) {
            red_extents.push(e);
            red_strides.push(s);
        } else {
            kept_extents.push(e);
            kept_strides.push(s);
        }
    }
    let bases = walk_offsets(&kept_extents, &kept_strides);
    let inner = walk_offsets(&red_extents, &red_strides);
    let acc_format = f.accumulation();
    let data = bases
        .iter()
        .map(|&base| match op {
            ReduceOp::Sum => {
                let mut acc = 0.0;
                for &o in &inner {
                    acc = round_to_format(acc + round_to_format(src.data()[base + o], f), acc_format);
                }
                acc
            }
            ReduceOp::Max => inner
                .iter()
                .map(|&o| round_to_format(src.data()[base + o], f))
                .fold(f64::NEG_INFINITY, |m, v| if v.is_nan() || m.is_nan() { f64::NAN } else { m.max(v) }),
        })
        .collect();
    Tensor::new(out_shape.to_vec(), data).expect("shape inferred")
}

/// Contraction with per-product rounding to `f` and sequential accumulation
/// in index order over the summed labels.
fn contract(spec: &ContractionSpec, lhs: &Tensor, rhs: &Tensor, f: PrecisionFormat, mode: ExecMode) -> Tensor {
    let extents = label_extents(spec, lhs.shape(), rhs.shape());
    let ls = strides_of(lhs.shape());
    let rs = strides_of(rhs.shape());
    let stride_in = |labels: &[char], strides: &[usize], c: char| labels.iter().position(|&l| l == c).map_or(0, |i| strides[i]);
    let split = |labels: &[char]| -> (Vec<usize>, Vec<usize>, Vec<usize>) {
        let e = labels.iter().map(|c| extents[c]).collect();
        let l = labels.iter().map(|&c| stride_in(&spec.lhs, &ls, c)).collect();
        let r = labels.iter().map(|&c| stride_in(&spec.rhs, &rs, c)).collect();
        (e, l, r)
    };
    let summed = spec.summed_labels();
    let (out_e, out_l, out_r) = split(&spec.out);
    let (sum_e, sum_l, sum_r) = split(&summed);
    let out_lhs = walk_offsets(&out_e, &out_l);
    let out_rhs = walk_offsets(&out_e, &out_r);
    let sum_lhs = walk_offsets(&sum_e, &sum_l);
    let sum_rhs = walk_offsets(&sum_e, &sum_r);
    let acc_format = f.accumulation();
    let (a, b) = (lhs.data(), rhs.data());
    let product = |i: usize, j: usize| round_to_format(round_to_format(a[i], f) * round_to_format(b[j], f), f);
    let out_shape: Vec<usize> = out_e.clone();

    let data: Vec<f64> = match mode {
        ExecMode::FusedContraction => out_lhs
            .iter()
            .zip(&out_rhs)
            .map(|(&bl, &br)| {
                let mut acc = 0.0;
                for (&sl, &sr) in sum_lhs.iter().zip(&sum_rhs) {
                    acc = round_to_format(acc + product(bl + sl, br + sr), acc_format);
                }
                acc
            })
            .collect(),
        ExecMode::MaterializeThenReduce => {
            let inner = sum_lhs.len();
            let mut full = Vec::with_capacity(out_lhs.len() * inner);
            for (&bl, &br) in out_lhs.iter().zip(&out_rhs) {
                for (&sl, &sr) in sum_lhs.iter().zip(&sum_rhs) {
                    full.push(product(bl + sl, br + sr));
                }
            }
            full.chunks(inner)
                .map(|chunk| chunk.iter().fold(0.0, |acc, &p| round_to_format(acc + p, acc_format)))
                .collect()
        }
    };
    Tensor::new(out_shape, data).expect("shape inferred")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Measurement {
    pub wall_seconds: f64,
    pub modeled_cost: f64,
}

static MEASURE_LOCK: Mutex<()> = Mutex::new(());

/// Median wall-clock time over `repetitions` fused executions plus the
/// deterministic modeled cost. Only one measurement runs at a time.
pub fn measure(
    graph: &Graph,
    inputs: &Inputs,
    config: &PrecisionConfig,
    repetitions: usize,
    cost: &CostModel,
) -> Result<Measurement> {
    if repetitions < 3 {
        return Err(Error::InvalidArgument(format!("measure needs at least 3 repetitions, got {repetitions}")));
    }
    let _guard = MEASURE_LOCK.lock().unwrap_or_else(|e| e.into_inner());
    let mut times = Vec::with_capacity(repetitions);
    for _ in 0..repetitions {
        let t = Instant::now();
        execute_with_cost(graph, inputs, config, ExecMode::FusedContraction, cost)?;
        times.push(t.elapsed().as_secs_f64());
    }
    times.sort_by(f64::total_cmp);
    Ok(Measurement {
        wall_seconds: times[times.len() / 2],
        modeled_cost: modeled_cost(graph, config, cost),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{uniform_config, GraphBuilder, UnaryOp};
    use PrecisionFormat::*;

    fn inputs(pairs: &[(&str, Tensor)]) -> Inputs {
        pairs.iter().map(|(n, t)| (n.to_string(), t.clone())).collect()
    }

    #[test]
    fn identity_graph_is_bit_exact() {
        let mut b = GraphBuilder::new();
        let x = b.input("x", &[3]);
        b.output("y", x);
        let g = b.build().unwrap();
        let x = Tensor::new(vec![3], vec![1.0 / 3.0, -2.5e-300, 7.0e300]).unwrap();
        let run = execute(&g, &inputs(&[("x", x.clone())]), &uniform_config(&g, Fp64), ExecMode::FusedContraction).unwrap();
        assert_eq!(run.outputs[0].1, x);
        assert_eq!(run.profile.cast_count, 0);
        assert_eq!(run.profile.peak_live_bytes, 24);
    }

    fn stats_graph(b: usize, n: usize, k: usize) -> Graph {
        let mut g = GraphBuilder::new();
        let r = g.input("r", &[b, n]);
        let s = g.input("s", &[b, k]);
        let c = g.contract("bn,bk->nk", r, s);
        g.output("ds", c);
        g.build().unwrap()
    }

    #[test]
    fn identity_weights_contraction_in_both_modes() {
        let g = stats_graph(2, 2, 1);
        let ins = inputs(&[
            ("r", Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap()),
            ("s", Tensor::from_rows(&[vec![5.0], vec![7.0]]).unwrap()),
        ]);
        let cfg = uniform_config(&g, Fp64);
        let fused = execute(&g, &ins, &cfg, ExecMode::FusedContraction).unwrap();
        let mat = execute(&g, &ins, &cfg, ExecMode::MaterializeThenReduce).unwrap();
        assert_eq!(fused.outputs[0].1.data(), &[5.0, 7.0]);
        assert_eq!(mat.outputs[0].1.data(), &[5.0, 7.0]);
        // inputs 32 + 16 bytes, output 16 bytes, product [2,2,1] 32 bytes
        assert_eq!(fused.profile.peak_live_bytes, 64);
        assert_eq!(mat.profile.peak_live_bytes, 64 + bytes_of(&[2, 2, 1], Fp64).unwrap());
    }

    #[test]
    fn accumulation_error_is_observable() {
        let mut b = GraphBuilder::new();
        let x = b.input("x", &[2048]);
        let s = b.reduce_sum(x, &[0]);
        b.output("s", s);
        let g = b.build().unwrap();
        let ins = inputs(&[("x", Tensor::filled(vec![2048], 0.001))]);
        let lo = execute(&g, &ins, &uniform_config(&g, Fp16), ExecMode::FusedContraction).unwrap();
        let hi = execute(&g, &ins, &uniform_config(&g, Fp64), ExecMode::FusedContraction).unwrap();
        let lo_v = lo.outputs[0].1.data()[0];
        let hi_v = hi.outputs[0].1.data()[0];
        assert!(((hi_v - 2.048) / 2.048).abs() < 1e-12);
        assert!(((lo_v - 2.048) / 2.048).abs() > 2f64.powi(-11));

        // Independent oracle: sequential fp16 accumulation through the `half` crate.
        let term = half::f16::from_f64(0.001);
        let mut acc = half::f16::from_f64(0.0);
        for _ in 0..2048 {
            acc = half::f16::from_f64(acc.to_f64() + term.to_f64());
        }
        assert_eq!(lo_v, acc.to_f64());
    }

    #[test]
    fn tf32_contraction_accumulates_in_fp32() {
        let g = stats_graph(4, 1, 1);
        let ins = inputs(&[
            ("r", Tensor::filled(vec![4, 1], 1.0)),
            ("s", Tensor::filled(vec![4, 1], 1.0 + 2f64.powi(-12))),
        ]);
        let run = execute(&g, &ins, &uniform_config(&g, Tf32), ExecMode::FusedContraction).unwrap();
        // operands rounded to 10 mantissa bits, so each product is exactly 1
        assert_eq!(run.outputs[0].1.data(), &[4.0]);
        let run = execute(&g, &ins, &uniform_config(&g, Fp32), ExecMode::FusedContraction).unwrap();
        assert_eq!(run.outputs[0].1.data(), &[4.0 + 4.0 * 2f64.powi(-12)]);
    }

    #[test]
    fn modeled_cost_definition() {
        let mut b = GraphBuilder::new();
        let x = b.input("x", &[100]);
        let y = b.unary(UnaryOp::Neg, x);
        b.output("y", y);
        let g = b.build().unwrap();
        let cost = CostModel::default();
        assert_eq!(modeled_cost(&g, &uniform_config(&g, Fp64), &cost), 400.0);
        // fp16: 100 elements × 1 plus input and output conversions 200 × 0.5
        assert_eq!(modeled_cost(&g, &uniform_config(&g, Fp16), &cost), 200.0);
        let run = execute(&g, &inputs(&[("x", Tensor::filled(vec![100], 0.5))]), &uniform_config(&g, Fp16), ExecMode::FusedContraction).unwrap();
        assert_eq!(run.profile.modeled_cost, 200.0);
        assert_eq!(run.profile.cast_count, 2);
        assert_eq!(run.profile.cast_bytes, 200 + 800);
    }

    #[test]
    fn cost_model_validation() {
        assert!(CostModel::default().validate().is_ok());
        let mut bad = CostModel::default();
        bad.per_element_weight.insert(Fp16, 3.0);
        assert!(bad.validate().is_err());
        let mut bad = CostModel::default();
        bad.cast_weight = 0.0;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn tf32_and_fp32_share_containers() {
        assert!(!needs_cast(Tf32, Fp32));
        assert!(!needs_cast(Fp32, Tf32));
        assert!(needs_cast(Fp16, Fp32));
        assert!(needs_cast(Fp64, Tf32));
        assert!(!needs_cast(Fp16, Fp16));
    }

    #[test]
    fn casts_are_shared_between_consumers() {
        let mut b = GraphBuilder::new();
        let x = b.input("x", &[10]);
        let a = b.unary(UnaryOp::Neg, x);
        let c = b.unary(UnaryOp::Exp, x);
        let s = b.add(a, c);
        b.output("s", s);
        let g = b.build().unwrap();
        let plan = cast_plan(&g, &uniform_config(&g, Fp16));
        // one conversion of x shared by both readers, one output conversion
        assert_eq!(plan.len(), 2);
        assert_eq!(plan[0].consumers, vec![a, c]);
        assert!(plan[1].consumers.is_empty());
    }

    #[test]
    fn general_einsum_and_structural_ops() {
        let mut b = GraphBuilder::new();
        let x = b.input("x", &[2, 3]);
        let w = b.input("w", &[3, 2]);
        let mm = b.contract("ij,jk->ik", x, w);
        let t = b.transpose(x, &[1, 0]);
        let bat = b.contract("ij,ij->i", x, x);
        let mx = b.reduce_max(x, &[1]);
        let rs = b.reduce_sum(x, &[0]);
        b.output("mm", mm);
        b.output("t", t);
        b.output("bat", bat);
        b.output("mx", mx);
        b.output("rs", rs);
        let g = b.build().unwrap();
        let ins = inputs(&[
            ("x", Tensor::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]).unwrap()),
            ("w", Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]]).unwrap()),
        ]);
        for mode in [ExecMode::FusedContraction, ExecMode::MaterializeThenReduce] {
            let run = execute(&g, &ins, &uniform_config(&g, Fp64), mode).unwrap();
            assert_eq!(run.output("mm").unwrap().data(), &[4.0, 5.0, 10.0, 11.0]);
            assert_eq!(run.output("t").unwrap().data(), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
            assert_eq!(run.output("bat").unwrap().data(), &[14.0, 77.0]);
            assert_eq!(run.output("mx").unwrap().data(), &[3.0, 6.0]);
            assert_eq!(run.output("rs").unwrap().data(), &[5.0, 7.0, 9.0]);
        }
    }

    #[test]
    fn broadcasting_binary() {
        let mut b = GraphBuilder::new();
        let x = b.input("x", &[2, 1, 3]);
        let y = b.input("y", &[2, 1]);
        let s = b.sub(x, y);
        b.output("s", s);
        let g = b.build().unwrap();
        let ins = inputs(&[
            ("x", Tensor::new(vec![2, 1, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap()),
            ("y", Tensor::new(vec![2, 1], vec![10.0, 20.0]).unwrap()),
        ]);
        let run = execute(&g, &ins, &uniform_config(&g, Fp64), ExecMode::FusedContraction).unwrap();
        assert_eq!(run.outputs[0].1.shape(), &[2, 2, 3]);
        assert_eq!(
            run.outputs[0].1.data(),
            &[-9.0, -8.0, -7.0, -19.0, -18.0, -17.0, -6.0, -5.0, -4.0, -16.0, -15.0, -14.0]
        );
    }

    #[test]
    fn errors_and_flags() {
        let mut b = GraphBuilder::new();
        let x = b.input("x", &[2]);
        let e = b.unary(UnaryOp::Exp, x);
        b.output("e", e);
        let g = b.build().unwrap();
        let cfg = uniform_config(&g, Fp16);
        assert!(matches!(execute(&g, &Inputs::new(), &cfg, ExecMode::FusedContraction), Err(Error::MissingInput(_))));
        let bad = inputs(&[("x", Tensor::filled(vec![3], 1.0))]);
        assert!(matches!(execute(&g, &bad, &cfg, ExecMode::FusedContraction), Err(Error::InputShape { .. })));
        let big = inputs(&[("x", Tensor::filled(vec![2], 20.0))]);
        let run = execute(&g, &big, &cfg, ExecMode::FusedContraction).unwrap();
        assert!(run.profile.non_finite);
        assert_eq!(run.outputs[0].1.data()[0], f64::INFINITY);
        let other = {
            let mut b = GraphBuilder::new();
            let x = b.input("x", &[2]);
            let n = b.unary(UnaryOp::Neg, x);
            let m = b.unary(UnaryOp::Neg, n);
            b.output("m", m);
            b.build().unwrap()
        };
        assert!(matches!(
            execute(&g, &big, &uniform_config(&other, Fp64), ExecMode::FusedContraction),
            Err(Error::ConfigMismatch(_))
        ));
    }

    #[test]
    fn measure_requires_three_repetitions() {
        let g = stats_graph(4, 4, 2);
        let ins = inputs(&[("r", Tensor::filled(vec![4, 4], 0.25)), ("s", Tensor::filled(vec![4, 2], 1.0))]);
        let cfg = uniform_config(&g, Fp64);
        assert!(measure(&g, &ins, &cfg, 2, &CostModel::default()).is_err());
        let m = measure(&g, &ins, &cfg, 3, &CostModel::default()).unwrap();
        assert_eq!(m.modeled_cost, 4.0 * 4.0 * 2.0 * 4.0);
        assert!(m.wall_seconds >= 0.0);
    }

    #[test]
    fn profile_outputs() {
        let g = stats_graph(3, 2, 2);
        let ins = inputs(&[("r", Tensor::filled(vec![3, 2], 0.5)), ("s", Tensor::filled(vec![3, 2], 1.0))]);
        let run = execute(&g, &ins, &uniform_config(&g, Fp32), ExecMode::MaterializeThenReduce).unwrap();
        let report = run.profile.report();
        assert!(report.lines().any(|l| l.starts_with("2 contraction fp32 16 ")));
        let json = serde_json::to_value(&run.profile).unwrap();
        assert_eq!(json["peak_live_bytes"], run.profile.peak_live_bytes);
        let trace = run.profile.trace_csv();
        assert!(trace.contains("broadcast product"));
        let max_live = run.profile.trace.iter().map(|p| p.live_bytes).max().unwrap();
        assert_eq!(max_live, run.profile.peak_live_bytes);
        let sum: f64 = run.profile.per_node_modeled_cost().values().sum();
        assert_eq!(sum + cast_cost(&g, &uniform_config(&g, Fp32), &CostModel::default()), run.profile.modeled_cost);
    }
}
