//! One unrolled separator block as an explicit DAG of (stage, phase) nodes.
//!
//! Builders produce a [`BlockGraph`] per scheme. [`tie_parameters`] maps each
//! edge to a chain of parameterized steps, and [`BlockPlan`] orders those
//! steps with shared prefixes computed once. The same plan drives
//! [`run_block`] and the MAC estimator in `analysis`.

use std::collections::{BTreeSet, HashMap, VecDeque};
use std::fmt::{self, Write as _};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nnops::kernels::{Conv1dAttrs, Padding};
use crate::nnops::tape::{Graph, Var};
use crate::params::{Dims, ParamKey, ParamStore};
use crate::tensor::Scalar;

pub const MIN_STAGES: usize = 2;
pub const MAX_STAGES: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SchemeId {
    AFrcnn,
    SFrcnn,
    SFrcnnLight,
    SFrcnnNoskip,
    Control1,
    Control2,
    Unet,
    UnetDelay,
}

impl SchemeId {
    pub const ALL: [SchemeId; 8] = [
        SchemeId::AFrcnn,
        SchemeId::SFrcnn,
        SchemeId::SFrcnnLight,
        SchemeId::SFrcnnNoskip,
        SchemeId::Control1,
        SchemeId::Control2,
        SchemeId::Unet,
        SchemeId::UnetDelay,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SchemeId::AFrcnn => "a-frcnn",
            SchemeId::SFrcnn => "s-frcnn",
            SchemeId::SFrcnnLight => "s-frcnn-light",
            SchemeId::SFrcnnNoskip => "s-frcnn-noskip",
            SchemeId::Control1 => "control1",
            SchemeId::Control2 => "control2",
            SchemeId::Unet => "unet",
            SchemeId::UnetDelay => "unet-delay",
        }
    }

    /// Synchronous schemes carry one feature map per stage between blocks.
    pub fn is_multi_scale(self) -> bool {
        matches!(self, SchemeId::SFrcnn | SchemeId::SFrcnnLight | SchemeId::SFrcnnNoskip)
    }

    /// Stage channel count actually used for a nominal `channels`.
    pub fn effective_channels(self, channels: usize) -> usize {
        match self {
            SchemeId::SFrcnnLight => (channels * 412).div_ceil(512),
            _ => channels,
        }
    }
}

impl fmt::Display for SchemeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SchemeId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SchemeId::ALL
            .into_iter()
            .find(|id| id.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown scheme '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ConnType {
    BottomUp(usize),
    TopDown(usize),
    Lateral,
}

impl ConnType {
    pub fn octaves(self) -> usize {
        match self {
            ConnType::BottomUp(o) | ConnType::TopDown(o) => o,
            ConnType::Lateral => 0,
        }
    }

    pub fn is_skip(self) -> bool {
        self.octaves() > 1
    }
}

impl fmt::Display for ConnType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConnType::BottomUp(o) => write!(f, "bottom-up({o})"),
            ConnType::TopDown(o) => write!(f, "top-down({o})"),
            ConnType::Lateral => write!(f, "lateral"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Node {
    pub stage: usize,
    pub phase: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Edge {
    pub src: usize,
    pub dst: usize,
    pub conn: ConnType,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockGraph {
    pub scheme: SchemeId,
    pub stages: usize,
    pub nodes: Vec<Node>,
    pub edges: Vec<Edge>,
    pub inputs: Vec<usize>,
    pub outputs: Vec<usize>,
}

impl BlockGraph {
    /// Edge indices ending at `node`, in insertion order.
    pub fn incoming(&self, node: usize) -> Vec<usize> {
        (0..self.edges.len()).filter(|&e| self.edges[e].dst == node).collect()
    }

    pub fn is_input(&self, node: usize) -> bool {
        self.inputs.contains(&node)
    }

    /// Human-readable listing used for golden files and `dump-graph`.
    pub fn dump(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "scheme {}", self.scheme);
        let _ = writeln!(s, "stages {}", self.stages);
        for (i, n) in self.nodes.iter().enumerate() {
            let tag = if self.is_input(i) {
                " input"
            } else if self.outputs.contains(&i) {
                " output"
            } else {
                ""
            };
            let _ = writeln!(s, "node n{i} stage={} phase={}{tag}", n.stage, n.phase);
        }
        for (i, e) in self.edges.iter().enumerate() {
            let _ = writeln!(s, "edge e{i} n{} -> n{} {}", e.src, e.dst, e.conn);
        }
        let list = |v: &[usize]| v.iter().map(|n| format!("n{n}")).collect::<Vec<_>>().join(" ");
        let _ = writeln!(s, "inputs {}", list(&self.inputs));
        let _ = writeln!(s, "outputs {}", list(&self.outputs));
        s
    }
}

/// Connection between two stages of the same block. `src_stage` and
/// `dst_stage` fix the edge type.
fn conn_between(src_stage: usize, dst_stage: usize) -> ConnType {
    use std::cmp::Ordering::*;
    match dst_stage.cmp(&src_stage) {
        Greater => ConnType::BottomUp(dst_stage - src_stage),
        Less => ConnType::TopDown(src_stage - dst_stage),
        Equal => ConnType::Lateral,
    }
}

struct Builder {
    nodes: Vec<Node>,
    edges: Vec<Edge>,
}

impl Builder {
    fn new() -> Self {
        Builder {
            nodes: Vec::new(),
            edges: Vec::new(),
        }
    }

    fn node(&mut self, stage: usize, phase: usize) -> usize {
        self.nodes.push(Node { stage, phase });
        self.nodes.len() - 1
    }

    fn link(&mut self, src: usize, dst: usize) {
        let conn = conn_between(self.nodes[src].stage, self.nodes[dst].stage);
        self.edges.push(Edge { src, dst, conn });
    }

    fn finish(self, scheme: SchemeId, stages: usize, inputs: Vec<usize>, outputs: Vec<usize>) -> BlockGraph {
        BlockGraph {
            scheme,
            stages,
            nodes: self.nodes,
            edges: self.edges,
            inputs,
            outputs,
        }
    }

    /// Stage-1 input followed by a stride chain up to stage `s`. Index `i - 1`
    /// holds the stage-`i` node.
    fn down_chain(&mut self, s: usize, phase: usize) -> Vec<usize> {
        let mut d = vec![self.node(1, phase)];
        for i in 2..=s {
            let n = self.node(i, phase);
            self.link(d[i - 2], n);
            d.push(n);
        }
        d
    }
}

pub fn build_block(scheme: SchemeId, stages: usize) -> Result<BlockGraph> {
    if !(MIN_STAGES..=MAX_STAGES).contains(&stages) {
        return Err(Error::Config(format!(
            "stage count {stages} outside {MIN_STAGES}..={MAX_STAGES}"
        )));
    }
    Ok(match scheme {
        SchemeId::AFrcnn => build_a_frcnn(stages),
        SchemeId::SFrcnn | SchemeId::SFrcnnLight => build_s_frcnn(scheme, stages, true),
        SchemeId::SFrcnnNoskip => build_s_frcnn(scheme, stages, false),
        SchemeId::Control1 => build_control(scheme, stages, true),
        SchemeId::Control2 => build_control(scheme, stages, false),
        SchemeId::Unet => build_unet(stages, false),
        SchemeId::UnetDelay => build_unet(stages, true),
    })
}

fn build_a_frcnn(s: usize) -> BlockGraph {
    let mut b = Builder::new();
    let p1 = b.down_chain(s, 1);
    let mut p2 = Vec::with_capacity(s);
    for i in 1..=s {
        let n = b.node(i, 2);
        if i > 1 {
            b.link(p1[i - 2], n);
        }
        b.link(p1[i - 1], n);
        if i < s {
            b.link(p1[i], n);
        }
        p2.push(n);
    }
    let out = b.node(1, 3);
    for &n in &p2 {
        b.link(n, out);
    }
    b.finish(SchemeId::AFrcnn, s, vec![p1[0]], vec![out])
}

fn build_s_frcnn(scheme: SchemeId, s: usize, skips: bool) -> BlockGraph {
    let mut b = Builder::new();
    let xs: Vec<usize> = (1..=s).map(|i| b.node(i, 0)).collect();
    let ys: Vec<usize> = (1..=s).map(|i| b.node(i, 1)).collect();
    for i in 1..=s {
        for j in 1..=s {
            if skips || i.abs_diff(j) <= 1 {
                b.link(xs[j - 1], ys[i - 1]);
            }
        }
    }
    b.finish(scheme, s, xs, ys)
}

fn build_control(scheme: SchemeId, s: usize, bottom_up_skips: bool) -> BlockGraph {
    let mut b = Builder::new();
    let d = b.down_chain(s, 1);
    let mut prev = d[s - 1];
    for i in (1..s).rev() {
        let u = b.node(i, 2);
        if i < s - 1 {
            b.link(prev, u);
        }
        for j in 1..=s {
            if j < i && !bottom_up_skips && i - j > 1 {
                continue;
            }
            b.link(d[j - 1], u);
        }
        prev = u;
    }
    b.finish(scheme, s, vec![d[0]], vec![prev])
}

fn build_unet(s: usize, delay: bool) -> BlockGraph {
    let mut b = Builder::new();
    let d = b.down_chain(s, 1);
    let mut ups = vec![0; s];
    let mut prev = d[s - 1];
    for i in (1..s).rev() {
        let u = b.node(i, 2);
        b.link(prev, u);
        b.link(d[i - 1], u);
        ups[i - 1] = u;
        prev = u;
    }
    if !delay {
        return b.finish(SchemeId::Unet, s, vec![d[0]], vec![prev]);
    }
    let g = b.node(1, 3);
    for &u in &ups[..s - 1] {
        b.link(u, g);
    }
    b.finish(SchemeId::UnetDelay, s, vec![d[0]], vec![g])
}

/// One invariant broken by a [`BlockGraph`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    EdgeEndpoint { edge: usize },
    StageRange { node: usize, stage: usize },
    Octaves { edge: usize, octaves: usize },
    Resolution { edge: usize, conn: ConnType, src_stage: usize, dst_stage: usize },
    Cycle { nodes: Vec<usize> },
    NoFanIn { node: usize },
    InputHasFanIn { node: usize },
    NoOutputs,
    SisoShape { inputs: Vec<usize>, outputs: Vec<usize> },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::EdgeEndpoint { edge } => write!(f, "edge e{edge} references a missing node"),
            Violation::StageRange { node, stage } => write!(f, "node n{node} has stage {stage} outside 1..=S"),
            Violation::Octaves { edge, octaves } => write!(f, "edge e{edge} spans {octaves} octaves"),
            Violation::Resolution {
                edge,
                conn,
                src_stage,
                dst_stage,
            } => write!(f, "edge e{edge} {conn} joins stage {src_stage} to stage {dst_stage}"),
            Violation::Cycle { nodes } => write!(f, "cycle through nodes {nodes:?}"),
            Violation::NoFanIn { node } => write!(f, "node n{node} has no incoming edge"),
            Violation::InputHasFanIn { node } => write!(f, "input node n{node} has an incoming edge"),
            Violation::NoOutputs => write!(f, "graph declares no outputs"),
            Violation::SisoShape { inputs, outputs } => {
                write!(f, "single-scale scheme needs one stage-1 input and output, got {inputs:?} / {outputs:?}")
            }
        }
    }
}

pub fn validate_block(g: &BlockGraph) -> std::result::Result<(), Vec<Violation>> {
    let mut v = Vec::new();
    let n = g.nodes.len();
    for (i, node) in g.nodes.iter().enumerate() {
        if node.stage < 1 || node.stage > g.stages {
            v.push(Violation::StageRange { node: i, stage: node.stage });
        }
    }
    let mut edges_ok = true;
    for (i, e) in g.edges.iter().enumerate() {
        if e.src >= n || e.dst >= n {
            v.push(Violation::EdgeEndpoint { edge: i });
            edges_ok = false;
            continue;
        }
        let (a, b) = (g.nodes[e.src].stage, g.nodes[e.dst].stage);
        let o = e.conn.octaves();
        if e.conn != ConnType::Lateral && (o < 1 || o + 1 > g.stages) {
            v.push(Violation::Octaves { edge: i, octaves: o });
        }
        let consistent = match e.conn {
            ConnType::BottomUp(o) => b == a + o,
            ConnType::TopDown(o) => a == b + o,
            ConnType::Lateral => a == b,
        };
        if !consistent {
            v.push(Violation::Resolution {
                edge: i,
                conn: e.conn,
                src_stage: a,
                dst_stage: b,
            });
        }
    }
    if edges_ok {
        if let Err(cycle) = topo_order(g) {
            v.push(Violation::Cycle { nodes: cycle });
        }
        for node in 0..n {
            let fan_in = g.edges.iter().filter(|e| e.dst == node).count();
            match (g.is_input(node), fan_in) {
                (false, 0) => v.push(Violation::NoFanIn { node }),
                (true, k) if k > 0 => v.push(Violation::InputHasFanIn { node }),
                _ => {}
            }
        }
    }
    if g.outputs.is_empty() {
        v.push(Violation::NoOutputs);
    }
    if !g.scheme.is_multi_scale() {
        let stage1 = |ids: &[usize]| ids.len() == 1 && ids[0] < n && g.nodes[ids[0]].stage == 1;
        if !stage1(&g.inputs) || !stage1(&g.outputs) {
            v.push(Violation::SisoShape {
                inputs: g.inputs.clone(),
                outputs: g.outputs.clone(),
            });
        }
    }
    if v.is_empty() {
        Ok(())
    } else {
        Err(v)
    }
}

/// Kahn ordering. On failure returns the nodes left on a cycle.
pub fn topo_order(g: &BlockGraph) -> std::result::Result<Vec<usize>, Vec<usize>> {
    let n = g.nodes.len();
    let mut indeg = vec![0usize; n];
    for e in &g.edges {
        indeg[e.dst] += 1;
    }
    let mut queue: VecDeque<usize> = (0..n).filter(|&i| indeg[i] == 0).collect();
    let mut order = Vec::with_capacity(n);
    while let Some(u) = queue.pop_front() {
        order.push(u);
        for e in g.edges.iter().filter(|e| e.src == u) {
            indeg[e.dst] -= 1;
            if indeg[e.dst] == 0 {
                queue.push_back(e.dst);
            }
        }
    }
    if order.len() == n {
        Ok(order)
    } else {
        Err((0..n).filter(|&i| indeg[i] > 0).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ConnMethod {
    A,
    B,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionKind {
    Concat,
    Sum,
}

/// Order of the two halves of the per-node stage transform.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TransformOrder {
    #[default]
    PreluThenNorm,
    NormThenPrelu,
}

/// Primitive step of a realized edge.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Step {
    /// Stride-2 separable conv, `stage` to `stage + 1`.
    Down { stage: usize },
    /// Separable conv to `2C` plus pixel shuffle, `stage + 1` to `stage`.
    Up { stage: usize },
    /// Nearest-neighbor replication by a power of two.
    Interp(usize),
    /// 1x1 conv within `stage`.
    Lateral { stage: usize },
}

impl Step {
    pub fn key(self) -> Option<ParamKey> {
        match self {
            Step::Down { stage } => Some(ParamKey::Down { stage }),
            Step::Up { stage } => Some(ParamKey::Up { stage }),
            Step::Lateral { stage } => Some(ParamKey::Lateral { stage }),
            Step::Interp(_) => None,
        }
    }
}

/// Tying map of one block: edge realizations and per-node fusion keys.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Ties {
    /// Empty list for parameter-free identity edges.
    pub edge_steps: Vec<Vec<Step>>,
    /// `None` for inputs, single-input nodes, and sum fusion.
    pub fusion: Vec<Option<ParamKey>>,
    /// `None` only for input nodes.
    pub transform: Vec<Option<ParamKey>>,
}

impl Ties {
    /// Weighted keys used by connections (down, up, lateral).
    pub fn connection_keys(&self) -> BTreeSet<ParamKey> {
        self.edge_steps.iter().flatten().filter_map(|s| s.key()).collect()
    }

    pub fn fusion_keys(&self) -> BTreeSet<ParamKey> {
        self.fusion.iter().flatten().copied().collect()
    }

    /// Every key touched by the block.
    pub fn keys(&self) -> BTreeSet<ParamKey> {
        let mut k = self.connection_keys();
        k.extend(self.fusion_keys());
        k.extend(self.transform.iter().flatten().copied());
        k
    }
}

pub fn edge_steps(e: &Edge, nodes: &[Node], method: ConnMethod) -> Vec<Step> {
    let src = nodes[e.src].stage;
    match (e.conn, method) {
        (ConnType::BottomUp(o), _) => (src..src + o).map(|stage| Step::Down { stage }).collect(),
        (ConnType::TopDown(o), ConnMethod::B) => vec![Step::Interp(1 << o)],
        (ConnType::TopDown(o), ConnMethod::A) => (src - o..src).rev().map(|stage| Step::Up { stage }).collect(),
        (ConnType::Lateral, ConnMethod::B) => Vec::new(),
        (ConnType::Lateral, ConnMethod::A) => vec![Step::Lateral { stage: src }],
    }
}

pub fn tie_parameters(g: &BlockGraph, method: ConnMethod, fusion: FusionKind) -> Ties {
    let edge_steps = g.edges.iter().map(|e| edge_steps(e, &g.nodes, method)).collect();
    let mut fus = vec![None; g.nodes.len()];
    let mut transform = vec![None; g.nodes.len()];
    for (i, node) in g.nodes.iter().enumerate() {
        if g.is_input(i) {
            continue;
        }
        let fan_in = g.incoming(i).len();
        if fusion == FusionKind::Concat && fan_in > 1 {
            fus[i] = Some(ParamKey::Fusion {
                stage: node.stage,
                fan_in,
                phase: node.phase,
            });
        }
        transform[i] = Some(ParamKey::StageTransform {
            stage: node.stage,
            phase: node.phase,
        });
    }
    Ties {
        edge_steps,
        fusion: fus,
        transform,
    }
}

/// One operation of a [`BlockPlan`]; its output is value `index in ops`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PlanOp {
    /// Block input number `index`.
    Input { index: usize },
    Apply { src: usize, step: Step },
    /// `srcs` pairs each operand value with the edge that produced it.
    Fuse { node: usize, srcs: Vec<(usize, usize)> },
}

/// Execution order of one block with edge-chain prefixes deduplicated.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockPlan {
    pub ops: Vec<PlanOp>,
    /// Stage of each value.
    pub stage: Vec<usize>,
    pub node_value: Vec<usize>,
    pub outputs: Vec<usize>,
}

impl BlockPlan {
    pub fn new(g: &BlockGraph, ties: &Ties) -> Result<Self> {
        let order = topo_order(g).map_err(|c| Error::Config(format!("block graph has a cycle through {c:?}")))?;
        let mut ops = Vec::new();
        let mut value_stage = Vec::new();
        let mut node_value = vec![usize::MAX; g.nodes.len()];
        let mut memo: HashMap<(usize, Step), usize> = HashMap::new();
        for (index, &n) in g.inputs.iter().enumerate() {
            ops.push(PlanOp::Input { index });
            value_stage.push(g.nodes[n].stage);
            node_value[n] = ops.len() - 1;
        }
        for n in order {
            if g.is_input(n) {
                continue;
            }
            let mut srcs = Vec::new();
            for e in g.incoming(n) {
                let mut v = node_value[g.edges[e].src];
                for &step in &ties.edge_steps[e] {
                    v = *memo.entry((v, step)).or_insert_with(|| {
                        let s = match step {
                            Step::Down { stage } => stage + 1,
                            Step::Up { stage } | Step::Lateral { stage } => stage,
                            Step::Interp(f) => value_stage[v] - f.trailing_zeros() as usize,
                        };
                        ops.push(PlanOp::Apply { src: v, step });
                        value_stage.push(s);
                        ops.len() - 1
                    });
                }
                srcs.push((v, e));
            }
            ops.push(PlanOp::Fuse { node: n, srcs });
            value_stage.push(g.nodes[n].stage);
            node_value[n] = ops.len() - 1;
        }
        let outputs = g.outputs.iter().map(|&n| node_value[n]).collect();
        Ok(BlockPlan {
            ops,
            stage: value_stage,
            node_value,
            outputs,
        })
    }
}

/// Everything needed to execute one block.
#[derive(Debug, Clone)]
pub struct BlockSpec {
    pub graph: BlockGraph,
    pub ties: Ties,
    pub plan: BlockPlan,
    pub method: ConnMethod,
    pub fusion: FusionKind,
    pub order: TransformOrder,
}

impl BlockSpec {
    pub fn new(
        scheme: SchemeId,
        stages: usize,
        method: ConnMethod,
        fusion: FusionKind,
        order: TransformOrder,
    ) -> Result<Self> {
        let graph = build_block(scheme, stages)?;
        validate_block(&graph).map_err(|v| {
            let list: Vec<String> = v.iter().map(|x| x.to_string()).collect();
            Error::Config(format!("invalid {scheme} block: {}", list.join("; ")))
        })?;
        let ties = tie_parameters(&graph, method, fusion);
        let plan = BlockPlan::new(&graph, &ties)?;
        Ok(BlockSpec {
            graph,
            ties,
            plan,
            method,
            fusion,
            order,
        })
    }
}

/// Tape handles of one stage transform.
#[derive(Debug, Clone, Copy)]
pub struct TransformVars {
    pub prelu: Var,
    pub gain: Var,
    pub bias: Var,
}

/// Tape handles for a fusion unit.
#[derive(Debug, Clone, Copy)]
pub struct FuseVars {
    /// 1x1 conv weight and bias, present for concat fusion with K >= 2.
    pub conv: Option<(Var, Var)>,
    pub transform: TransformVars,
}

pub fn stage_transform<T: Scalar>(g: &mut Graph<T>, x: Var, t: TransformVars, order: TransformOrder) -> Result<Var> {
    match order {
        TransformOrder::PreluThenNorm => {
            let y = g.prelu(x, t.prelu)?;
            g.global_layer_norm(y, t.gain, t.bias)
        }
        TransformOrder::NormThenPrelu => {
            let y = g.global_layer_norm(x, t.gain, t.bias)?;
            g.prelu(y, t.prelu)
        }
    }
}

pub fn fuse<T: Scalar>(
    g: &mut Graph<T>,
    inputs: &[Var],
    kind: FusionKind,
    p: FuseVars,
    order: TransformOrder,
) -> Result<Var> {
    let merged = match (kind, inputs.len()) {
        (_, 0) => return Err(Error::dim("fuse", "inputs", "fusion needs at least one input")),
        (_, 1) => inputs[0],
        (FusionKind::Sum, _) => g.add(inputs)?,
        (FusionKind::Concat, _) => {
            let cat = g.concat_channels(inputs)?;
            let (w, b) = p
                .conv
                .ok_or_else(|| Error::Usage("concat fusion of several inputs needs a 1x1 conv".into()))?;
            g.conv1d(cat, w, Some(b), Conv1dAttrs::POINTWISE)?
        }
    };
    stage_transform(g, merged, p.transform, order)
}

/// Registers the tensors of `key` on the tape, in spec order.
pub fn bind<T: Scalar>(g: &mut Graph<T>, store: &ParamStore<T>, key: ParamKey, dims: &Dims) -> Result<Vec<Var>> {
    key.specs(dims)
        .iter()
        .map(|s| Ok(g.param(&s.name, store.get(&s.name)?)))
        .collect()
}

pub fn bind_transform<T: Scalar>(g: &mut Graph<T>, store: &ParamStore<T>, key: ParamKey, dims: &Dims) -> Result<TransformVars> {
    let v = bind(g, store, key, dims)?;
    Ok(TransformVars {
        prelu: v[0],
        gain: v[1],
        bias: v[2],
    })
}

/// Separable conv with the four tensors of `key`.
pub fn separable<T: Scalar>(g: &mut Graph<T>, x: Var, p: &[Var], stride: usize) -> Result<Var> {
    let c = g.value(x).dims2()?.0;
    let h = g.conv1d(x, p[0], Some(p[1]), Conv1dAttrs::new(stride, c, Padding::Same))?;
    g.conv1d(h, p[2], Some(p[3]), Conv1dAttrs::POINTWISE)
}

pub fn apply_step<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    dims: &Dims,
    x: Var,
    step: Step,
) -> Result<Var> {
    match step {
        Step::Down { stage } => {
            let p = bind(g, store, ParamKey::Down { stage }, dims)?;
            separable(g, x, &p, 2)
        }
        Step::Up { stage } => {
            let p = bind(g, store, ParamKey::Up { stage }, dims)?;
            let h = separable(g, x, &p, 1)?;
            g.pixel_shuffle(h, 2)
        }
        Step::Lateral { stage } => {
            let p = bind(g, store, ParamKey::Lateral { stage }, dims)?;
            g.conv1d(x, p[0], Some(p[1]), Conv1dAttrs::POINTWISE)
        }
        Step::Interp(f) => g.interpolate(x, f),
    }
}

/// Runs one block on the tape. `inputs` holds one feature map per declared
/// graph input, each `C x F / 2^(stage-1)`.
pub fn run_block<T: Scalar>(
    g: &mut Graph<T>,
    spec: &BlockSpec,
    store: &ParamStore<T>,
    dims: &Dims,
    inputs: &[Var],
) -> Result<Vec<Var>> {
    let bg = &spec.graph;
    if inputs.len() != bg.inputs.len() {
        return Err(Error::Usage(format!(
            "{} block takes {} inputs, got {}",
            bg.scheme,
            bg.inputs.len(),
            inputs.len()
        )));
    }
    let base = g.value(inputs[0]).dims2()?.1;
    let unit = 1usize << (bg.stages - 1);
    if base % unit != 0 {
        return Err(Error::Padding(format!(
            "{base} frames not divisible by 2^(S-1) = {unit}"
        )));
    }
    for (k, &v) in inputs.iter().enumerate() {
        let stage = bg.nodes[bg.inputs[k]].stage;
        let want = base >> (stage - 1);
        let (c, f) = g.value(v).dims2()?;
        if f != want || c != dims.channels {
            return Err(Error::dim(
                "run_block",
                format!("input {k} (stage {stage})"),
                format!("expected {}x{want}, got {c}x{f}", dims.channels),
            ));
        }
    }
    let mut vals: Vec<Var> = Vec::with_capacity(spec.plan.ops.len());
    for op in &spec.plan.ops {
        let v = match op {
            PlanOp::Input { index } => inputs[*index],
            PlanOp::Apply { src, step } => apply_step(g, store, dims, vals[*src], *step)?,
            PlanOp::Fuse { node, srcs } => {
                let want = base >> (bg.nodes[*node].stage - 1);
                let mut xs = Vec::with_capacity(srcs.len());
                for &(v, e) in srcs {
                    let f = g.value(vals[v]).dims2()?.1;
                    if f != want {
                        let edge = bg.edges[e];
                        return Err(Error::dim(
                            "fuse",
                            format!("edge e{e} n{} -> n{} {}", edge.src, edge.dst, edge.conn),
                            format!("{f} frames, node expects {want}"),
                        ));
                    }
                    xs.push(vals[v]);
                }
                let conv = match spec.ties.fusion[*node] {
                    Some(key) => {
                        let p = bind(g, store, key, dims)?;
                        Some((p[0], p[1]))
                    }
                    None => None,
                };
                let tkey = spec.ties.transform[*node].expect("non-input node has a transform");
                let transform = bind_transform(g, store, tkey, dims)?;
                fuse(g, &xs, spec.fusion, FuseVars { conv, transform }, spec.order)?
            }
        };
        vals.push(v);
    }
    Ok(spec.plan.outputs.iter().map(|&v| vals[v]).collect())
}

/// Exact weight count inside one block.
pub fn count_block_params(
    scheme: SchemeId,
    stages: usize,
    channels: usize,
    method: ConnMethod,
    fusion: FusionKind,
) -> Result<usize> {
    let g = build_block(scheme, stages)?;
    let ties = tie_parameters(&g, method, fusion);
    let dims = Dims {
        channels,
        enc_channels: channels,
        kernel: 1,
        speakers: 1,
        stages,
        phi_concat: false,
    };
    Ok(ties.keys().iter().map(|k| k.param_count(&dims)).sum())
}
