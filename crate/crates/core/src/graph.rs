//! Shape-static computation graphs.
//!
//! A graph is built from a [`GraphDraft`] (or the [`GraphBuilder`]
//! convenience wrapper) and turned into an immutable [`Graph`] by
//! [`validate`], which orders the nodes topologically, infers every output
//! shape, prunes dead nodes and computes a renumbering-invariant fingerprint.

use std::collections::{BTreeMap, BTreeSet, BinaryHeap, HashMap};
use std::cmp::Reverse;
use std::fmt;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::PrecisionFormat;
use crate::tensor::Tensor;

pub type NodeId = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UnaryOp {
    Neg,
    Exp,
    Log,
    Sqrt,
    Digamma,
    Lgamma,
    Reciprocal,
}

impl UnaryOp {
    pub fn name(self) -> &'static str {
        match self {
            UnaryOp::Neg => "neg",
            UnaryOp::Exp => "exp",
            UnaryOp::Log => "log",
            UnaryOp::Sqrt => "sqrt",
            UnaryOp::Digamma => "digamma",
            UnaryOp::Lgamma => "lgamma",
            UnaryOp::Reciprocal => "reciprocal",
        }
    }

    pub fn apply(self, x: f64) -> f64 {
        match self {
            UnaryOp::Neg => -x,
            UnaryOp::Exp => x.exp(),
            UnaryOp::Log => x.ln(),
            UnaryOp::Sqrt => x.sqrt(),
            UnaryOp::Digamma => digamma(x),
            UnaryOp::Lgamma => statrs::function::gamma::ln_gamma(x),
            UnaryOp::Reciprocal => 1.0 / x,
        }
    }
}

fn digamma(x: f64) -> f64 {
    if x.is_nan() || x == f64::NEG_INFINITY {
        return f64::NAN;
    }
    if x == f64::INFINITY {
        return f64::INFINITY;
    }
    statrs::function::gamma::digamma(x)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
    Max,
}

impl BinaryOp {
    pub fn name(self) -> &'static str {
        match self {
            BinaryOp::Add => "add",
            BinaryOp::Sub => "sub",
            BinaryOp::Mul => "mul",
            BinaryOp::Div => "div",
            BinaryOp::Max => "max",
        }
    }

    pub fn apply(self, a: f64, b: f64) -> f64 {
        match self {
            BinaryOp::Add => a + b,
            BinaryOp::Sub => a - b,
            BinaryOp::Mul => a * b,
            BinaryOp::Div => a / b,
            BinaryOp::Max => {
                if a.is_nan() || b.is_nan() {
                    f64::NAN
                } else {
                    a.max(b)
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReduceOp {
    Sum,
    Max,
}

/// Two-operand einsum-style contraction, e.g. `bn,bk->nk`.
///
/// Each label names one axis. Labels absent from the output are summed
/// over; labels shared by both operands and the output act as batch axes.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ContractionSpec {
    pub lhs: Vec<char>,
    pub rhs: Vec<char>,
    pub out: Vec<char>,
}

impl ContractionSpec {
    pub fn parse(spec: &str) -> Result<Self> {
        let bad = || Error::InvalidArgument(format!("malformed contraction spec `{spec}`"));
        let (operands, out) = spec.split_once("->").ok_or_else(bad)?;
        let (lhs, rhs) = operands.split_once(',').ok_or_else(bad)?;
        let labels = |s: &str| -> Result<Vec<char>> {
            let v: Vec<char> = s.trim().chars().collect();
            if v.iter().any(|c| !c.is_ascii_alphabetic()) {
                return Err(bad());
            }
            let unique: BTreeSet<_> = v.iter().collect();
            if unique.len() != v.len() {
                return Err(Error::InvalidArgument(format!(
                    "repeated label in `{s}` of contraction `{spec}`"
                )));
            }
            Ok(v)
        };
        let parsed = ContractionSpec {
            lhs: labels(lhs)?,
            rhs: labels(rhs)?,
            out: labels(out)?,
        };
        if parsed
            .out
            .iter()
            .any(|c| !parsed.lhs.contains(c) && !parsed.rhs.contains(c))
        {
            return Err(bad());
        }
        Ok(parsed)
    }

    /// Every label in first-appearance order: output labels first, then the
    /// summed labels. This is the axis order of the materialized product.
    pub fn all_labels(&self) -> Vec<char> {
        let mut labels = self.out.clone();
        for &c in self.lhs.iter().chain(&self.rhs) {
            if !labels.contains(&c) {
                labels.push(c);
            }
        }
        labels
    }

    pub fn summed_labels(&self) -> Vec<char> {
        self.all_labels()
            .into_iter()
            .filter(|c| !self.out.contains(c))
            .collect()
    }
}

impl fmt::Display for ContractionSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = |v: &[char]| v.iter().collect::<String>();
        write!(f, "{},{}->{}", s(&self.lhs), s(&self.rhs), s(&self.out))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum NodeKind {
    Input {
        name: String,
        shape: Vec<usize>,
        format: PrecisionFormat,
    },
    Constant {
        value: Tensor,
        format: PrecisionFormat,
    },
    Unary(UnaryOp),
    Binary(BinaryOp),
    Reduce {
        op: ReduceOp,
        axes: Vec<usize>,
    },
    Contraction(ContractionSpec),
    Transpose {
        perm: Vec<usize>,
    },
    Reshape {
        shape: Vec<usize>,
    },
    Cast {
        to: PrecisionFormat,
    },
}

impl NodeKind {
    /// Whether the node is a search variable (has an entry in a precision config).
    pub fn is_compute(&self) -> bool {
        !matches!(
            self,
            NodeKind::Input { .. } | NodeKind::Constant { .. } | NodeKind::Cast { .. }
        )
    }

    pub fn label(&self) -> String {
        match self {
            NodeKind::Input { .. } => "input".into(),
            NodeKind::Constant { .. } => "constant".into(),
            NodeKind::Unary(op) => op.name().into(),
            NodeKind::Binary(op) => op.name().into(),
            NodeKind::Reduce { op: ReduceOp::Sum, .. } => "reduce_sum".into(),
            NodeKind::Reduce { op: ReduceOp::Max, .. } => "reduce_max".into(),
            NodeKind::Contraction(_) => "contraction".into(),
            NodeKind::Transpose { .. } => "transpose".into(),
            NodeKind::Reshape { .. } => "reshape".into(),
            NodeKind::Cast { .. } => "cast".into(),
        }
    }

    fn params(&self) -> String {
        let list = |v: &[usize]| {
            v.iter()
                .map(usize::to_string)
                .collect::<Vec<_>>()
                .join(",")
        };
        match self {
            NodeKind::Input { name, format, .. } => format!("name={name} format={format}"),
            NodeKind::Constant { value, format } => {
                let digest = Sha256::digest(
                    value
                        .data()
                        .iter()
                        .flat_map(|v| v.to_bits().to_le_bytes())
                        .collect::<Vec<_>>(),
                );
                format!("format={format} values={}", &hex::encode(digest)[..16])
            }
            NodeKind::Unary(_) | NodeKind::Binary(_) => String::new(),
            NodeKind::Reduce { axes, .. } => format!("axes={}", list(axes)),
            NodeKind::Contraction(spec) => format!("spec={spec}"),
            NodeKind::Transpose { perm } => format!("perm={}", list(perm)),
            NodeKind::Reshape { shape } => format!("shape={}", list(shape)),
            NodeKind::Cast { to } => format!("to={to}"),
        }
    }
}

/// A node before validation: no inferred shape yet.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DraftNode {
    pub id: NodeId,
    pub kind: NodeKind,
    pub operands: Vec<NodeId>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GraphDraft {
    pub nodes: Vec<DraftNode>,
    pub outputs: Vec<(String, NodeId)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub id: NodeId,
    pub kind: NodeKind,
    pub operands: Vec<NodeId>,
    pub out_shape: Vec<usize>,
}

impl Node {
    pub fn elements(&self) -> u64 {
        self.out_shape.iter().map(|&e| e as u64).product()
    }
}

/// A validated, immutable graph.
#[derive(Debug, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
    position: HashMap<NodeId, usize>,
    inputs: Vec<NodeId>,
    outputs: Vec<(String, NodeId)>,
    consumers: HashMap<NodeId, Vec<NodeId>>,
    fingerprint: String,
}

impl Graph {
    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[self.position[&id]]
    }

    pub fn get(&self, id: NodeId) -> Option<&Node> {
        self.position.get(&id).map(|&p| &self.nodes[p])
    }

    /// Position of a node in the topological order.
    pub fn position(&self, id: NodeId) -> usize {
        self.position[&id]
    }

    pub fn inputs(&self) -> &[NodeId] {
        &self.inputs
    }

    pub fn outputs(&self) -> &[(String, NodeId)] {
        &self.outputs
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn consumers(&self, id: NodeId) -> &[NodeId] {
        self.consumers.get(&id).map_or(&[], Vec::as_slice)
    }

    /// Compute nodes (the search variables) in ascending id order.
    pub fn compute_nodes(&self) -> Vec<NodeId> {
        let mut ids: Vec<_> = self
            .nodes
            .iter()
            .filter(|n| n.kind.is_compute())
            .map(|n| n.id)
            .collect();
        ids.sort_unstable();
        ids
    }

    /// Compute-node neighbours (producers and consumers) of a node, ascending.
    pub fn compute_neighbours(&self, id: NodeId) -> Vec<NodeId> {
        let node = self.node(id);
        let mut out: BTreeSet<NodeId> = node
            .operands
            .iter()
            .copied()
            .filter(|&o| self.node(o).kind.is_compute())
            .collect();
        out.extend(
            self.consumers(id)
                .iter()
                .copied()
                .filter(|&c| self.node(c).kind.is_compute()),
        );
        out.remove(&id);
        out.into_iter().collect()
    }

    pub fn input_by_name(&self, name: &str) -> Option<&Node> {
        self.inputs.iter().map(|&i| self.node(i)).find(
            |n| matches!(&n.kind, NodeKind::Input { name: input_name, .. } if input_name == name),
        )
    }

    /// One node per line: `id kind params operands shape`.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for node in &self.nodes {
            let operands = node
                .operands
                .iter()
                .map(NodeId::to_string)
                .collect::<Vec<_>>()
                .join(",");
            let shape = node
                .out_shape
                .iter()
                .map(usize::to_string)
                .collect::<Vec<_>>()
                .join(",");
            let params = node.kind.params();
            let sep = if params.is_empty() { "" } else { " " };
            let _ = writeln!(
                out,
                "{} {}{}{} [{}] [{}]",
                node.id,
                node.kind.label(),
                sep,
                params,
                operands,
                shape
            );
        }
        for (name, id) in &self.outputs {
            let _ = writeln!(out, "output {name} {id}");
        }
        out
    }
}

/// Incremental graph construction with sequential node ids.
#[derive(Debug, Default)]
pub struct GraphBuilder {
    draft: GraphDraft,
}

impl GraphBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, kind: NodeKind, operands: Vec<NodeId>) -> NodeId {
        let id = self.draft.nodes.len() as NodeId;
        self.draft.nodes.push(DraftNode { id, kind, operands });
        id
    }

    pub fn input(&mut self, name: &str, shape: &[usize]) -> NodeId {
        self.input_with_format(name, shape, PrecisionFormat::Fp64)
    }

    pub fn input_with_format(&mut self, name: &str, shape: &[usize], format: PrecisionFormat) -> NodeId {
        self.push(
            NodeKind::Input {
                name: name.to_string(),
                shape: shape.to_vec(),
                format,
            },
            vec![],
        )
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(
            NodeKind::Constant {
                value,
                format: PrecisionFormat::Fp64,
            },
            vec![],
        )
    }

    pub fn scalar(&mut self, value: f64) -> NodeId {
        self.constant(Tensor::scalar(value))
    }

    pub fn unary(&mut self, op: UnaryOp, a: NodeId) -> NodeId {
        self.push(NodeKind::Unary(op), vec![a])
    }

    pub fn binary(&mut self, op: BinaryOp, a: NodeId, b: NodeId) -> NodeId {
        self.push(NodeKind::Binary(op), vec![a, b])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary(BinaryOp::Mul, a, b)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary(BinaryOp::Div, a, b)
    }

    pub fn reduce_sum(&mut self, a: NodeId, axes: &[usize]) -> NodeId {
        self.push(
            NodeKind::Reduce {
                op: ReduceOp::Sum,
                axes: axes.to_vec(),
            },
            vec![a],
        )
    }

    pub fn reduce_max(&mut self, a: NodeId, axes: &[usize]) -> NodeId {
        self.push(
            NodeKind::Reduce {
                op: ReduceOp::Max,
                axes: axes.to_vec(),
            },
            vec![a],
        )
    }

    /// Panics on a malformed spec string; specs are compile-time literals.
    pub fn contract(&mut self, spec: &str, a: NodeId, b: NodeId) -> NodeId {
        let spec = ContractionSpec::parse(spec).expect("valid contraction spec");
        self.push(NodeKind::Contraction(spec), vec![a, b])
    }

    pub fn transpose(&mut self, a: NodeId, perm: &[usize]) -> NodeId {
        self.push(NodeKind::Transpose { perm: perm.to_vec() }, vec![a])
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> NodeId {
        self.push(NodeKind::Reshape { shape: shape.to_vec() }, vec![a])
    }

    pub fn cast(&mut self, a: NodeId, to: PrecisionFormat) -> NodeId {
        self.push(NodeKind::Cast { to }, vec![a])
    }

    pub fn output(&mut self, name: &str, id: NodeId) {
        self.draft.outputs.push((name.to_string(), id));
    }

    pub fn draft(&self) -> &GraphDraft {
        &self.draft
    }

    pub fn into_draft(self) -> GraphDraft {
        self.draft
    }

    pub fn build(self) -> Result<Graph> {
        validate(self.draft)
    }
}

/// Broadcast two shapes with trailing-dimension alignment.
pub fn broadcast_shapes(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

fn infer_shape(id: NodeId, kind: &NodeKind, operand_shapes: &[&[usize]]) -> Result<Vec<usize>> {
    let mismatch = |detail: String| Error::ShapeMismatch {
        node: id,
        detail,
        shapes: operand_shapes.iter().map(|s| s.to_vec()).collect(),
    };
    let invalid = |detail: String| Error::InvalidNode { node: id, detail };
    let arity = match kind {
        NodeKind::Input { .. } | NodeKind::Constant { .. } => 0,
        NodeKind::Binary(_) | NodeKind::Contraction(_) => 2,
        _ => 1,
    };
    if operand_shapes.len() != arity {
        return Err(invalid(format!(
            "{} expects {arity} operands, got {}",
            kind.label(),
            operand_shapes.len()
        )));
    }
    match kind {
        NodeKind::Input { shape, .. } => {
            if shape.contains(&0) {
                return Err(invalid(format!("input shape {shape:?} has a zero extent")));
            }
            Ok(shape.clone())
        }
        NodeKind::Constant { value, .. } => Ok(value.shape().to_vec()),
        NodeKind::Unary(_) | NodeKind::Cast { .. } => Ok(operand_shapes[0].to_vec()),
        NodeKind::Binary(_) => broadcast_shapes(operand_shapes[0], operand_shapes[1])
            .ok_or_else(|| mismatch("shapes are not broadcast-compatible".into())),
        NodeKind::Reduce { axes, .. } => {
            let shape = operand_shapes[0];
            let unique: BTreeSet<_> = axes.iter().copied().collect();
            if axes.is_empty() || unique.len() != axes.len() || axes.iter().any(|&a| a >= shape.len()) {
                return Err(mismatch(format!("invalid reduction axes {axes:?}")));
            }
            Ok(shape
                .iter()
                .enumerate()
                .filter(|(i, _)| !unique.contains(i))
                .map(|(_, &e)| e)
                .collect())
        }
        NodeKind::Contraction(spec) => {
            let (ls, rs) = (operand_shapes[0], operand_shapes[1]);
            if spec.lhs.len() != ls.len() || spec.rhs.len() != rs.len() {
                return Err(mismatch(format!("contraction `{spec}` rank does not match operands")));
            }
            let mut extent: HashMap<char, usize> = HashMap::new();
            for (&label, &e) in spec.lhs.iter().zip(ls).chain(spec.rhs.iter().zip(rs)) {
                match extent.insert(label, e) {
                    Some(prev) if prev != e => {
                        return Err(mismatch(format!(
                            "label `{label}` has extents {prev} and {e} in `{spec}`"
                        )))
                    }
                    _ => {}
                }
            }
            Ok(spec.out.iter().map(|c| extent[c]).collect())
        }
        NodeKind::Transpose { perm } => {
            let shape = operand_shapes[0];
            let mut sorted = perm.clone();
            sorted.sort_unstable();
            if sorted != (0..shape.len()).collect::<Vec<_>>() {
                return Err(mismatch(format!("{perm:?} is not a permutation of the operand axes")));
            }
            Ok(perm.iter().map(|&p| shape[p]).collect())
        }
        NodeKind::Reshape { shape } => {
            let from: usize = operand_shapes[0].iter().product();
            let to: usize = shape.iter().product();
            if from != to || shape.contains(&0) {
                return Err(mismatch(format!("cannot reshape {from} elements into {shape:?}")));
            }
            Ok(shape.clone())
        }
    }
}

/// Validate a draft: topological order, shape inference, dead-node pruning
/// and fingerprinting.
pub fn validate(draft: GraphDraft) -> Result<Graph> {
    if draft.outputs.is_empty() {
        return Err(Error::NoOutputs);
    }
    let mut slot: HashMap<NodeId, usize> = HashMap::new();
    for (i, node) in draft.nodes.iter().enumerate() {
        if slot.insert(node.id, i).is_some() {
            return Err(Error::DuplicateNode(node.id));
        }
    }
    for node in &draft.nodes {
        for &op in &node.operands {
            if !slot.contains_key(&op) {
                return Err(Error::UnknownOperand { node: node.id, operand: op });
            }
        }
    }
    for &(_, out) in &draft.outputs {
        if !slot.contains_key(&out) {
            return Err(Error::InvalidArgument(format!("output references unknown node {out}")));
        }
    }

    // Kahn's algorithm, preferring the draft order among ready nodes.
    let n = draft.nodes.len();
    let mut pending = vec![0usize; n];
    let mut users: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (i, node) in draft.nodes.iter().enumerate() {
        pending[i] = node.operands.len();
        for op in &node.operands {
            users[slot[op]].push(i);
        }
    }
    let mut ready: BinaryHeap<Reverse<usize>> = (0..n).filter(|&i| pending[i] == 0).map(Reverse).collect();
    let mut order = Vec::with_capacity(n);
    while let Some(Reverse(i)) = ready.pop() {
        order.push(i);
        for &u in &users[i] {
            pending[u] -= 1;
            if pending[u] == 0 {
                ready.push(Reverse(u));
            }
        }
    }
    if order.len() != n {
        let stuck = (0..n).find(|&i| pending[i] > 0).expect("some node is stuck");
        return Err(Error::Cycle(draft.nodes[stuck].id));
    }

    // Backward reachability from the outputs; inputs are always kept.
    let mut live = vec![false; n];
    let mut stack: Vec<usize> = draft.outputs.iter().map(|(_, id)| slot[id]).collect();
    while let Some(i) = stack.pop() {
        if !std::mem::replace(&mut live[i], true) {
            stack.extend(draft.nodes[i].operands.iter().map(|op| slot[op]));
        }
    }
    for (i, node) in draft.nodes.iter().enumerate() {
        if matches!(node.kind, NodeKind::Input { .. }) {
            live[i] = true;
        }
    }

    let mut shapes: HashMap<NodeId, Vec<usize>> = HashMap::new();
    let mut nodes = Vec::new();
    let mut input_names = BTreeSet::new();
    for &i in order.iter().filter(|&&i| live[i]) {
        let d = &draft.nodes[i];
        let operand_shapes: Vec<&[usize]> = d.operands.iter().map(|o| shapes[o].as_slice()).collect();
        let out_shape = infer_shape(d.id, &d.kind, &operand_shapes)?;
        if let NodeKind::Input { name, .. } = &d.kind {
            if !input_names.insert(name.clone()) {
                return Err(Error::InvalidNode {
                    node: d.id,
                    detail: format!("duplicate input name `{name}`"),
                });
            }
        }
        shapes.insert(d.id, out_shape.clone());
        nodes.push(Node {
            id: d.id,
            kind: d.kind.clone(),
            operands: d.operands.clone(),
            out_shape,
        });
    }
    Ok(Graph::assemble(nodes, draft.outputs))
}

impl Graph {
    fn assemble(nodes: Vec<Node>, outputs: Vec<(String, NodeId)>) -> Graph {
        let position: HashMap<NodeId, usize> = nodes.iter().enumerate().map(|(i, n)| (n.id, i)).collect();
        let inputs = nodes
            .iter()
            .filter(|n| matches!(n.kind, NodeKind::Input { .. }))
            .map(|n| n.id)
            .collect::<Vec<_>>();
        let mut consumers: HashMap<NodeId, Vec<NodeId>> = HashMap::new();
        for node in &nodes {
            for &op in &node.operands {
                let list = consumers.entry(op).or_default();
                if !list.contains(&node.id) {
                    list.push(node.id);
                }
            }
        }
        let mut graph = Graph {
            nodes,
            position,
            inputs,
            outputs,
            consumers,
            fingerprint: String::new(),
        };
        graph.fingerprint = graph.compute_fingerprint();
        graph
    }

    /// Structural hash: each node hashes its kind, parameters, shape and
    /// its operands' hashes; input names and node ids are not part of it.
    fn compute_fingerprint(&self) -> String {
        let input_index: HashMap<NodeId, usize> =
            self.inputs.iter().enumerate().map(|(i, &id)| (id, i)).collect();
        let mut hashes: HashMap<NodeId, [u8; 32]> = HashMap::new();
        for node in &self.nodes {
            let mut h = Sha256::new();
            let descriptor = match &node.kind {
                NodeKind::Input { format, .. } => format!("input#{} format={format}", input_index[&node.id]),
                other => format!("{} {}", other.label(), other.params()),
            };
            h.update(descriptor.as_bytes());
            h.update(format!("{:?}", node.out_shape).as_bytes());
            for op in &node.operands {
                h.update(hashes[op]);
            }
            hashes.insert(node.id, h.finalize().into());
        }
        let mut multiset: BTreeMap<[u8; 32], (usize, usize)> = BTreeMap::new();
        for node in &self.nodes {
            let e = multiset.entry(hashes[&node.id]).or_default();
            e.0 += 1;
            e.1 += self.consumers(node.id).len();
        }
        let mut h = Sha256::new();
        h.update(b"inputs");
        for id in &self.inputs {
            h.update(hashes[id]);
        }
        h.update(b"outputs");
        for (_, id) in &self.outputs {
            h.update(hashes[id]);
        }
        h.update(b"nodes");
        for (hash, (count, uses)) in &multiset {
            h.update(hash);
            h.update((*count as u64).to_le_bytes());
            h.update((*uses as u64).to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

/// Per-compute-node format assignment for one graph.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PrecisionConfig {
    assignment: BTreeMap<NodeId, PrecisionFormat>,
}

impl PrecisionConfig {
    pub fn from_assignment(graph: &Graph, assignment: BTreeMap<NodeId, PrecisionFormat>) -> Result<Self> {
        let config = PrecisionConfig { assignment };
        config.check(graph)?;
        Ok(config)
    }

    pub fn check(&self, graph: &Graph) -> Result<()> {
        let expected = graph.compute_nodes();
        if self.assignment.len() != expected.len() || !expected.iter().all(|id| self.assignment.contains_key(id)) {
            return Err(Error::ConfigMismatch(format!(
                "config covers {} nodes, graph has {} compute nodes",
                self.assignment.len(),
                expected.len()
            )));
        }
        Ok(())
    }

    pub fn get(&self, id: NodeId) -> Option<PrecisionFormat> {
        self.assignment.get(&id).copied()
    }

    pub fn format(&self, id: NodeId) -> PrecisionFormat {
        self.assignment[&id]
    }

    pub fn set(&mut self, id: NodeId, format: PrecisionFormat) {
        let slot = self
            .assignment
            .get_mut(&id)
            .unwrap_or_else(|| panic!("node {id} is not a compute node of this config"));
        *slot = format;
    }

    /// Copy with one node changed.
    pub fn with(&self, id: NodeId, format: PrecisionFormat) -> Self {
        let mut c = self.clone();
        c.set(id, format);
        c
    }

    pub fn assignment(&self) -> &BTreeMap<NodeId, PrecisionFormat> {
        &self.assignment
    }

    pub fn iter(&self) -> impl Iterator<Item = (NodeId, PrecisionFormat)> + '_ {
        self.assignment.iter().map(|(&k, &v)| (k, v))
    }

    pub fn len(&self) -> usize {
        self.assignment.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignment.is_empty()
    }

    /// Number of nodes per format.
    pub fn histogram(&self) -> BTreeMap<PrecisionFormat, usize> {
        let mut h = BTreeMap::new();
        for f in self.assignment.values() {
            *h.entry(*f).or_default() += 1;
        }
        h
    }

    /// `self ≤ other` nodewise in the width order.
    pub fn le_nodewise(&self, other: &PrecisionConfig) -> bool {
        self.assignment
            .iter()
            .all(|(id, f)| other.assignment.get(id).is_some_and(|g| f <= g))
    }
}

/// Every compute node mapped to `format`.
pub fn uniform_config(graph: &Graph, format: PrecisionFormat) -> PrecisionConfig {
    PrecisionConfig {
        assignment: graph.compute_nodes().into_iter().map(|id| (id, format)).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use PrecisionFormat::*;

    fn chain() -> Graph {
        let mut b = GraphBuilder::new();
        let x = b.input("x", &[4]);
        let e = b.unary(UnaryOp::Exp, x);
        let l = b.unary(UnaryOp::Log, e);
        let n = b.unary(UnaryOp::Neg, l);
        b.output("y", n);
        b.build().unwrap()
    }

    #[test]
    fn identity_graph_is_valid_and_stable() {
        let make = || {
            let mut b = GraphBuilder::new();
            let x = b.input("x", &[4]);
            b.output("y", x);
            b.build().unwrap()
        };
        let g = make();
        assert_eq!(g.nodes().len(), 1);
        assert!(g.compute_nodes().is_empty());
        assert_eq!(g.fingerprint(), make().fingerprint());
        assert_eq!(g.fingerprint().len(), 64);
    }

    #[test]
    fn broadcasting_add() {
        let mut b = GraphBuilder::new();
        let x = b.input("x", &[2, 3]);
        let y = b.input("y", &[3]);
        let s = b.add(x, y);
        b.output("s", s);
        let g = b.build().unwrap();
        assert_eq!(g.node(s).out_shape, vec![2, 3]);

        let mut b = GraphBuilder::new();
        let x = b.input("x", &[2, 3]);
        let y = b.input("y", &[4]);
        let s = b.add(x, y);
        b.output("s", s);
        match b.build() {
            Err(Error::ShapeMismatch { node, shapes, .. }) => {
                assert_eq!(node, s);
                assert_eq!(shapes, vec![vec![2, 3], vec![4]]);
            }
            other => panic!("expected shape mismatch, got {other:?}"),
        }
    }

    #[test]
    fn broadcast_rule() {
        assert_eq!(broadcast_shapes(&[4, 1, 3], &[2, 1]), Some(vec![4, 2, 3]));
        assert_eq!(broadcast_shapes(&[], &[5]), Some(vec![5]));
        assert_eq!(broadcast_shapes(&[2], &[3]), None);
    }

    #[test]
    fn shape_inference_for_structural_ops() {
        let mut b = GraphBuilder::new();
        let r = b.input("r", &[5, 7]);
        let s = b.input("s", &[5, 9]);
        let c = b.contract("bn,bk->nk", r, s);
        let t = b.transpose(c, &[1, 0]);
        let m = b.reshape(t, &[63]);
        let red = b.reduce_sum(r, &[0]);
        let mx = b.reduce_max(r, &[0, 1]);
        b.output("m", m);
        b.output("red", red);
        b.output("mx", mx);
        let g = b.build().unwrap();
        assert_eq!(g.node(c).out_shape, vec![7, 9]);
        assert_eq!(g.node(t).out_shape, vec![9, 7]);
        assert_eq!(g.node(m).out_shape, vec![63]);
        assert_eq!(g.node(red).out_shape, vec![7]);
        assert_eq!(g.node(mx).out_shape, Vec::<usize>::new());
    }

    #[test]
    fn contraction_label_mismatch() {
        let mut b = GraphBuilder::new();
        let r = b.input("r", &[5, 7]);
        let s = b.input("s", &[6, 9]);
        let c = b.contract("bn,bk->nk", r, s);
        b.output("c", c);
        assert!(matches!(b.build(), Err(Error::ShapeMismatch { .. })));
        assert!(ContractionSpec::parse("bn,bk").is_err());
        assert!(ContractionSpec::parse("bb,bk->k").is_err());
        assert!(ContractionSpec::parse("bn,bk->z").is_err());
        let spec = ContractionSpec::parse("bni,nij->bnj").unwrap();
        assert_eq!(spec.all_labels(), vec!['b', 'n', 'j', 'i']);
        assert_eq!(spec.summed_labels(), vec!['i']);
    }

    #[test]
    fn cycles_and_unknown_operands() {
        let input = NodeKind::Input {
            name: "x".into(),
            shape: vec![2],
            format: Fp64,
        };
        let draft = GraphDraft {
            nodes: vec![
                DraftNode { id: 0, kind: input.clone(), operands: vec![] },
                DraftNode { id: 1, kind: NodeKind::Unary(UnaryOp::Exp), operands: vec![2] },
                DraftNode { id: 2, kind: NodeKind::Unary(UnaryOp::Log), operands: vec![1] },
            ],
            outputs: vec![("y".into(), 2)],
        };
        assert!(matches!(validate(draft), Err(Error::Cycle(_))));

        let draft = GraphDraft {
            nodes: vec![
                DraftNode { id: 0, kind: input.clone(), operands: vec![] },
                DraftNode { id: 1, kind: NodeKind::Unary(UnaryOp::Exp), operands: vec![9] },
            ],
            outputs: vec![("y".into(), 1)],
        };
        assert!(matches!(validate(draft), Err(Error::UnknownOperand { node: 1, operand: 9 })));
    }

    #[test]
    fn out_of_order_drafts_are_sorted() {
        let draft = GraphDraft {
            nodes: vec![
                DraftNode { id: 7, kind: NodeKind::Unary(UnaryOp::Neg), operands: vec![3] },
                DraftNode {
                    id: 3,
                    kind: NodeKind::Input { name: "x".into(), shape: vec![2], format: Fp64 },
                    operands: vec![],
                },
            ],
            outputs: vec![("y".into(), 7)],
        };
        let g = validate(draft).unwrap();
        assert_eq!(g.nodes().iter().map(|n| n.id).collect::<Vec<_>>(), vec![3, 7]);
    }

    #[test]
    fn dead_nodes_are_pruned() {
        let mut b = GraphBuilder::new();
        let x = b.input("x", &[3]);
        let unused = b.input("unused", &[3]);
        let _dead = b.unary(UnaryOp::Exp, x);
        let y = b.unary(UnaryOp::Neg, x);
        b.output("y", y);
        let g = b.build().unwrap();
        assert_eq!(g.compute_nodes(), vec![y]);
        assert_eq!(g.inputs(), &[x, unused]);
    }

    #[test]
    fn fingerprint_ignores_ids_but_not_structure() {
        let g = chain();
        // Same structure, different ids and draft order.
        let mut draft = GraphBuilder::new();
        let x = draft.input("renamed", &[4]);
        let e = draft.unary(UnaryOp::Exp, x);
        let l = draft.unary(UnaryOp::Log, e);
        let n = draft.unary(UnaryOp::Neg, l);
        draft.output("y", n);
        let mut draft = draft.into_draft();
        for node in &mut draft.nodes {
            node.id += 100;
            for op in &mut node.operands {
                *op += 100;
            }
        }
        draft.outputs[0].1 += 100;
        draft.nodes.reverse();
        assert_eq!(validate(draft).unwrap().fingerprint(), g.fingerprint());

        let mut b = GraphBuilder::new();
        let x = b.input("x", &[5]);
        let e = b.unary(UnaryOp::Exp, x);
        let l = b.unary(UnaryOp::Log, e);
        let n = b.unary(UnaryOp::Neg, l);
        b.output("y", n);
        assert_ne!(b.build().unwrap().fingerprint(), g.fingerprint());

        let mut b = GraphBuilder::new();
        let x = b.input_with_format("x", &[4], Fp32);
        let e = b.unary(UnaryOp::Exp, x);
        let l = b.unary(UnaryOp::Log, e);
        let n = b.unary(UnaryOp::Neg, l);
        b.output("y", n);
        assert_ne!(b.build().unwrap().fingerprint(), g.fingerprint());
    }

    #[test]
    fn fingerprint_distinguishes_shared_from_duplicated_nodes() {
        let shared = {
            let mut b = GraphBuilder::new();
            let x = b.input("x", &[2]);
            let a = b.unary(UnaryOp::Neg, x);
            let s = b.add(a, a);
            b.output("s", s);
            b.build().unwrap()
        };
        let duplicated = {
            let mut b = GraphBuilder::new();
            let x = b.input("x", &[2]);
            let a = b.unary(UnaryOp::Neg, x);
            let a2 = b.unary(UnaryOp::Neg, x);
            let s = b.add(a, a2);
            b.output("s", s);
            b.build().unwrap()
        };
        assert_ne!(shared.fingerprint(), duplicated.fingerprint());
    }

    #[test]
    fn uniform_configs() {
        let g = chain();
        let hi = uniform_config(&g, Fp64);
        assert_eq!(hi.len(), 3);
        assert!(hi.iter().all(|(_, f)| f == Fp64));
        let lo = uniform_config(&g, Fp16);
        assert!(lo.iter().all(|(_, f)| f == Fp16));
        assert!(lo.le_nodewise(&hi));
        assert!(!hi.le_nodewise(&lo));
        for id in g.compute_nodes() {
            assert_eq!(lo.format(id), Fp16);
        }
        assert_eq!(hi.histogram()[&Fp64], 3);
    }

    #[test]
    fn cast_nodes_are_not_search_variables() {
        let mut b = GraphBuilder::new();
        let x = b.input("x", &[2]);
        let c = b.cast(x, Fp16);
        let n = b.unary(UnaryOp::Neg, c);
        b.output("n", n);
        let g = b.build().unwrap();
        assert_eq!(g.compute_nodes(), vec![n]);
        let mut bad = BTreeMap::new();
        bad.insert(c, Fp16);
        bad.insert(n, Fp16);
        assert!(PrecisionConfig::from_assignment(&g, bad).is_err());
    }

    #[test]
    fn dump_is_line_oriented() {
        let g = chain();
        let dump = g.dump();
        let lines: Vec<_> = dump.lines().collect();
        assert_eq!(lines.len(), 5);
        assert_eq!(lines[0], "0 input name=x format=fp64 [] [4]");
        assert_eq!(lines[1], "1 exp [0] [4]");
        assert_eq!(lines[4], "output y 3");
    }
}
