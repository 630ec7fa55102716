//! Parameter, MAC and path-length accounting.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::graph::{topo_order, BlockGraph, FusionKind, PlanOp, Step};
use crate::model::{MacroMode, ModelConfig};
use crate::params::{ParamKey, CONN_KERNEL};

#[derive(Debug, Clone, PartialEq)]
pub struct CostRow {
    pub name: String,
    pub key: String,
    pub params: u64,
    pub macs: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostReport {
    pub rows: Vec<CostRow>,
    pub params: u64,
    pub macs: u64,
}

impl CostReport {
    fn from_rows(rows: Vec<CostRow>) -> Self {
        CostReport {
            params: rows.iter().map(|r| r.params).sum(),
            macs: rows.iter().map(|r| r.macs).sum(),
            rows,
        }
    }

    /// Two flops per multiply-accumulate, in units of 1e9.
    pub fn gflops(&self) -> f64 {
        2.0 * self.macs as f64 / 1e9
    }

    pub fn params_millions(&self) -> f64 {
        self.params as f64 / 1e6
    }
}

fn role(key: &ParamKey) -> &'static str {
    match key {
        ParamKey::Encoder => "encoder",
        ParamKey::Bottleneck => "bottleneck",
        ParamKey::Down { .. } => "down",
        ParamKey::Up { .. } => "up",
        ParamKey::Lateral { .. } => "lateral",
        ParamKey::Fusion { .. } => "fusion",
        ParamKey::StageTransform { .. } => "stage_transform",
        ParamKey::OutputFusion => "output_fusion",
        ParamKey::MacroPhi => "macro_phi",
        ParamKey::MaskHead => "mask_head",
        ParamKey::Decoder => "decoder",
    }
}

/// Closed-form parameter total.
pub fn count_parameters(cfg: &ModelConfig) -> Result<u64> {
    let d = cfg.dims();
    Ok(cfg.param_keys()?.iter().map(|k| k.param_count(&d) as u64).sum())
}

/// Parameters and forward-pass MACs for an input of `duration_s` seconds.
pub fn estimate_macs(cfg: &ModelConfig, duration_s: f64, sample_rate: u32) -> Result<CostReport> {
    if duration_s.is_nan() || duration_s <= 0.0 {
        return Err(Error::Config(format!("duration must be positive, got {duration_s}")));
    }
    let keys = cfg.param_keys()?;
    let d = cfg.dims();
    let (c, n, l) = (d.channels as u64, d.enc_channels as u64, d.kernel as u64);
    let k5 = CONN_KERNEL as u64;
    let spk = cfg.speakers as u64;
    let samples = ((duration_s * sample_rate as f64).round() as usize).max(cfg.kernel);
    let k = cfg.frames(samples) as u64;
    let f1 = cfg.padded_frames(k as usize) as u64;
    let frames = |stage: usize| f1 >> (stage - 1);

    let mut macs: BTreeMap<ParamKey, u64> = keys.iter().map(|&k| (k, 0)).collect();
    let mut add = |key: ParamKey, m: u64| *macs.get_mut(&key).expect("key listed by config") += m;

    add(ParamKey::Encoder, n * l * k);
    add(ParamKey::Decoder, spk * n * l * k);
    add(ParamKey::MaskHead, spk * n * c * k);
    if cfg.has_bottleneck() {
        add(ParamKey::Bottleneck, n * c * k);
    }
    let down = |stage: usize| {
        let fo = frames(stage + 1);
        c * k5 * fo + c * c * fo
    };
    if cfg.scheme.is_multi_scale() {
        for stage in 1..cfg.stages {
            add(ParamKey::Down { stage }, down(stage));
        }
        add(ParamKey::OutputFusion, c * cfg.stages as u64 * c * f1);
    }

    let spec = cfg.block_spec()?;
    let blocks = cfg.blocks as u64;
    for op in &spec.plan.ops {
        match op {
            PlanOp::Input { .. } => {}
            PlanOp::Apply { step, .. } => match *step {
                Step::Down { stage } => add(ParamKey::Down { stage }, blocks * down(stage)),
                Step::Up { stage } => {
                    let fi = frames(stage + 1);
                    add(ParamKey::Up { stage }, blocks * (c * k5 * fi + 2 * c * c * fi));
                }
                Step::Lateral { stage } => add(ParamKey::Lateral { stage }, blocks * c * c * frames(stage)),
                Step::Interp(_) => {}
            },
            PlanOp::Fuse { node, srcs } => {
                if let Some(key) = spec.ties.fusion[*node] {
                    debug_assert_eq!(cfg.fusion, FusionKind::Concat);
                    let fo = frames(spec.graph.nodes[*node].stage);
                    add(key, blocks * c * srcs.len() as u64 * c * fo);
                }
            }
        }
    }
    let phi_frames: u64 = spec.graph.inputs.iter().map(|&i| frames(spec.graph.nodes[i].stage)).sum();
    let phi_per_frame = match cfg.macro_mode {
        MacroMode::Cc => c * 2 * c,
        MacroMode::Dc | MacroMode::Sc => c,
    };
    add(ParamKey::MacroPhi, (blocks - 1) * phi_per_frame * phi_frames);

    let rows = keys
        .iter()
        .map(|key| CostRow {
            name: key.to_string(),
            key: role(key).to_string(),
            params: key.param_count(&d) as u64,
            macs: macs[key],
        })
        .collect();
    Ok(CostReport::from_rows(rows))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Table,
    Tsv,
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "table" => Ok(ReportFormat::Table),
            "tsv" => Ok(ReportFormat::Tsv),
            _ => Err(Error::Usage(format!("unknown report format '{s}' (table, tsv)"))),
        }
    }
}

pub fn report(cost: &CostReport, format: ReportFormat) -> Result<String> {
    if cost.rows.is_empty() {
        return Err(Error::Usage("cost report has no rows".into()));
    }
    let mut s = String::new();
    match format {
        ReportFormat::Tsv => {
            s.push_str("name\tkey\tparams\tmacs\n");
            for r in &cost.rows {
                let _ = writeln!(s, "{}\t{}\t{}\t{}", r.name, r.key, r.params, r.macs);
            }
            let _ = writeln!(s, "total\ttotal\t{}\t{}", cost.params, cost.macs);
        }
        ReportFormat::Table => {
            let w = cost.rows.iter().map(|r| r.name.len()).max().unwrap_or(0).max(5);
            let _ = writeln!(s, "{:<w$}  {:<16}  {:>12}  {:>16}", "name", "key", "params", "macs");
            for r in &cost.rows {
                let _ = writeln!(s, "{:<w$}  {:<16}  {:>12}  {:>16}", r.name, r.key, r.params, r.macs);
            }
            let _ = writeln!(s, "{:<w$}  {:<16}  {:>12}  {:>16}", "total", "", cost.params, cost.macs);
            let _ = writeln!(
                s,
                "params {:.3} M, {:.2} GFlops",
                cost.params_millions(),
                cost.gflops()
            );
        }
    }
    Ok(s)
}

/// Reads back the `tsv` format and checks the totals row.
pub fn parse_report(text: &str) -> Result<CostReport> {
    let mut lines = text.lines();
    if lines.next() != Some("name\tkey\tparams\tmacs") {
        return Err(Error::Usage("missing report header".into()));
    }
    let mut rows = Vec::new();
    let mut total = None;
    for (i, line) in lines.enumerate() {
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 4 {
            return Err(Error::Usage(format!("report line {} has {} fields", i + 2, f.len())));
        }
        let num = |s: &str| {
            s.parse::<u64>()
                .map_err(|_| Error::Usage(format!("report line {}: bad number '{s}'", i + 2)))
        };
        let row = CostRow {
            name: f[0].to_string(),
            key: f[1].to_string(),
            params: num(f[2])?,
            macs: num(f[3])?,
        };
        if row.name == "total" {
            total = Some(row);
        } else {
            rows.push(row);
        }
    }
    let cost = CostReport::from_rows(rows);
    match total {
        Some(t) if t.params == cost.params && t.macs == cost.macs && !cost.rows.is_empty() => Ok(cost),
        Some(_) => Err(Error::Usage("totals row disagrees with the layer rows".into())),
        None => Err(Error::Usage("report has no totals row".into())),
    }
}

/// Depth of the shortest route that leaves stage 1, touches stage `stage` and
/// returns to a stage-1 output.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RoundTrip {
    pub stage: usize,
    /// Chained blocks needed.
    pub blocks: usize,
    /// Processing nodes along the route.
    pub depth: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PathStats {
    /// Processing nodes on the longest input-to-output path.
    pub longest: usize,
    pub shortest: usize,
    pub round_trip: Vec<RoundTrip>,
}

impl PathStats {
    /// Longest path counted in nodes, the input node included.
    pub fn longest_nodes(&self) -> usize {
        self.longest + 1
    }
}

fn stage1(g: &BlockGraph, ids: &[usize]) -> Result<usize> {
    ids.iter()
        .copied()
        .find(|&n| g.nodes[n].stage == 1)
        .ok_or_else(|| Error::Config("graph has no stage-1 endpoint".into()))
}

pub fn path_stats(g: &BlockGraph) -> Result<PathStats> {
    let order = topo_order(g).map_err(|c| Error::Config(format!("cyclic graph {c:?}")))?;
    let src = stage1(g, &g.inputs)?;
    let dst = stage1(g, &g.outputs)?;
    let n = g.nodes.len();
    let mut lo = vec![usize::MAX; n];
    let mut hi = vec![0usize; n];
    let mut seen = vec![false; n];
    lo[src] = 0;
    seen[src] = true;
    for &u in &order {
        if !seen[u] {
            continue;
        }
        for e in g.edges.iter().filter(|e| e.src == u) {
            seen[e.dst] = true;
            lo[e.dst] = lo[e.dst].min(lo[u] + 1);
            hi[e.dst] = hi[e.dst].max(hi[u] + 1);
        }
    }
    if !seen[dst] {
        return Err(Error::Config("output is unreachable from the input".into()));
    }
    let round_trip = (1..=g.stages)
        .map(|stage| round_trip(g, &order, stage))
        .collect::<Result<Vec<_>>>()?;
    Ok(PathStats {
        longest: hi[dst],
        shortest: lo[dst],
        round_trip,
    })
}

/// Unrolls up to `2S` chained blocks; block `t + 1` reads each input from
/// the same-stage output of block `t`.
fn round_trip(g: &BlockGraph, order: &[usize], stage: usize) -> Result<RoundTrip> {
    const INF: usize = usize::MAX / 2;
    let n = g.nodes.len();
    let src = stage1(g, &g.inputs)?;
    let dst = stage1(g, &g.outputs)?;
    let feeds: Vec<Option<usize>> = (0..n)
        .map(|v| {
            g.inputs.iter().position(|&i| i == v).and_then(|_| {
                g.outputs
                    .iter()
                    .copied()
                    .find(|&o| g.nodes[o].stage == g.nodes[v].stage)
            })
        })
        .collect();
    // dist[flag][node]: flag = a processing node at `stage` was visited.
    let mut prev: Option<[Vec<usize>; 2]> = None;
    for t in 0..2 * g.stages {
        let mut dist = [vec![INF; n], vec![INF; n]];
        for &u in order {
            if g.is_input(u) {
                match (&prev, feeds[u]) {
                    (None, _) if u == src => dist[0][u] = 0,
                    (Some(p), Some(o)) => {
                        dist[0][u] = p[0][o];
                        dist[1][u] = p[1][o];
                    }
                    _ => {}
                }
            } else {
                for e in g.edges.iter().filter(|e| e.dst == u) {
                    for flag in 0..2 {
                        let d = dist[flag][e.src];
                        if d >= INF {
                            continue;
                        }
                        let nf = if g.nodes[u].stage == stage { 1 } else { flag };
                        dist[nf][u] = dist[nf][u].min(d + 1);
                    }
                }
            }
        }
        if dist[1][dst] < INF {
            return Ok(RoundTrip {
                stage,
                blocks: t + 1,
                depth: dist[1][dst],
            });
        }
        prev = Some(dist);
    }
    Err(Error::Config(format!("no round trip through stage {stage}")))
}
