//! Routing strategies, softmin splitting, induced flows and max-link-utilization.
//!
//! Ratios are stored edge-indexed: for a destination-based strategy,
//! `ratio(d, e)` is the fraction of `d`-bound traffic at `src(e)` sent over `e`.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::linalg::Lu;
use crate::net::{shortest_path_distances, EdgeId, EdgeWeights, Network, NodeId};
use crate::traffic::DemandMatrix;

const RATIO_TOL: f64 = 1e-9;

/// Splitting ratios that depend only on the destination: `n·|E|` values.
#[derive(Debug, Clone, PartialEq)]
pub struct DestStrategy {
    n: usize,
    m: usize,
    ratios: Vec<f64>,
}

impl DestStrategy {
    /// `ratios` is destination-major: index `d * |E| + e`.
    pub fn new(net: &Network, ratios: Vec<f64>) -> Result<Self> {
        let (n, m) = (net.node_count(), net.edge_count());
        if ratios.len() != n * m {
            return Err(Error::Dimension {
                expected: n * m,
                got: ratios.len(),
            });
        }
        let s = DestStrategy { n, m, ratios };
        for d in 0..n {
            check_split(net, d, |e| s.ratio(d, e)).map_err(|msg| Error::Strategy(format!("destination {d}: {msg}")))?;
        }
        Ok(s)
    }

    pub fn ratio(&self, dest: NodeId, e: EdgeId) -> f64 {
        self.ratios[dest * self.m + e]
    }

    pub fn node_count(&self) -> usize {
        self.n
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.ratios
    }

    /// One line per (node, destination, edge), sorted lexicographically:
    /// `v,d,src,dst,ratio`.
    pub fn dump(&self, net: &Network) -> String {
        let mut rows = Vec::new();
        for d in 0..self.n {
            for e in 0..self.m {
                let edge = net.edge(e);
                rows.push((edge.src, d, edge.dst, self.ratio(d, e)));
            }
        }
        rows.sort_by(|a, b| (a.0, a.1, a.2).cmp(&(b.0, b.1, b.2)));
        let mut out = String::new();
        for (v, d, u, r) in rows {
            writeln!(out, "{v},{d},{v},{u},{r}").unwrap();
        }
        out
    }

    pub fn induce_flow(&self, net: &Network, dm: &DemandMatrix) -> Result<FlowAssignment> {
        check_dm(net, dm)?;
        let (n, m) = (self.n, self.m);
        let mut per_dest = vec![0.0; n * m];
        for d in 0..n {
            let demand: Vec<f64> = (0..n).map(|v| dm.get(v, d)).collect();
            if demand.iter().all(|&x| x == 0.0) {
                continue;
            }
            let through = absorb(net, d, &demand, |e| self.ratio(d, e))?;
            for e in 0..m {
                per_dest[d * m + e] = through[net.edge(e).src] * self.ratio(d, e);
            }
        }
        Ok(FlowAssignment::from_per_dest(n, m, per_dest))
    }
}

/// Fully general per-(source, destination) splitting ratios: `n²·|E|` values.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneralStrategy {
    n: usize,
    m: usize,
    ratios: Vec<f64>,
}

impl GeneralStrategy {
    /// `ratios` is indexed `(s * n + t) * |E| + e`.
    pub fn new(net: &Network, ratios: Vec<f64>) -> Result<Self> {
        let (n, m) = (net.node_count(), net.edge_count());
        if ratios.len() != n * n * m {
            return Err(Error::Dimension {
                expected: n * n * m,
                got: ratios.len(),
            });
        }
        let g = GeneralStrategy { n, m, ratios };
        for s in 0..n {
            for t in 0..n {
                check_split(net, t, |e| g.ratio(s, t, e))
                    .map_err(|msg| Error::Strategy(format!("commodity ({s},{t}): {msg}")))?;
            }
        }
        Ok(g)
    }

    /// Lifts a destination-based strategy (same ratios for every source).
    pub fn from_dest(net: &Network, dest: &DestStrategy) -> Self {
        let (n, m) = (net.node_count(), net.edge_count());
        let mut ratios = Vec::with_capacity(n * n * m);
        for _s in 0..n {
            for t in 0..n {
                ratios.extend((0..m).map(|e| dest.ratio(t, e)));
            }
        }
        GeneralStrategy { n, m, ratios }
    }

    pub fn ratio(&self, src: NodeId, dest: NodeId, e: EdgeId) -> f64 {
        self.ratios[(src * self.n + dest) * self.m + e]
    }

    pub fn induce_flow(&self, net: &Network, dm: &DemandMatrix) -> Result<FlowAssignment> {
        check_dm(net, dm)?;
        let (n, m) = (self.n, self.m);
        let mut per_dest = vec![0.0; n * m];
        for t in 0..n {
            for s in 0..n {
                let vol = dm.get(s, t);
                if vol == 0.0 {
                    continue;
                }
                let mut demand = vec![0.0; n];
                demand[s] = vol;
                let through = absorb(net, t, &demand, |e| self.ratio(s, t, e))?;
                for e in 0..m {
                    per_dest[t * m + e] += through[net.edge(e).src] * self.ratio(s, t, e);
                }
            }
        }
        Ok(FlowAssignment::from_per_dest(n, m, per_dest))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Strategy {
    Dest(DestStrategy),
    General(GeneralStrategy),
}

impl Strategy {
    pub fn induce_flow(&self, net: &Network, dm: &DemandMatrix) -> Result<FlowAssignment> {
        induce_flow(net, self, dm)
    }
}

pub fn induce_flow(net: &Network, strat: &Strategy, dm: &DemandMatrix) -> Result<FlowAssignment> {
    match strat {
        Strategy::Dest(s) => s.induce_flow(net, dm),
        Strategy::General(s) => s.induce_flow(net, dm),
    }
}

fn check_dm(net: &Network, dm: &DemandMatrix) -> Result<()> {
    if dm.n() != net.node_count() {
        return Err(Error::Dimension {
            expected: net.node_count(),
            got: dm.n(),
        });
    }
    Ok(())
}

fn check_split(net: &Network, dest: NodeId, ratio: impl Fn(EdgeId) -> f64) -> std::result::Result<(), String> {
    for v in 0..net.node_count() {
        let mut sum = 0.0;
        for &e in net.out_edges(v) {
            let r = ratio(e);
            if !(r.is_finite() && (0.0..=1.0).contains(&r)) {
                return Err(format!("ratio {r} on edge {e} outside [0,1]"));
            }
            sum += r;
        }
        let want = if v == dest { 0.0 } else { 1.0 };
        if (sum - want).abs() > RATIO_TOL {
            return Err(format!("ratios at node {v} sum to {sum}, expected {want}"));
        }
    }
    Ok(())
}

/// Solves `x_v = demand_v + Σ_{(u,v)} x_u·ratio(u→v)` over `v ≠ dest` and
/// returns the throughput `x` (with `x_dest` = total absorbed).
fn absorb(net: &Network, dest: NodeId, demand: &[f64], ratio: impl Fn(EdgeId) -> f64) -> Result<Vec<f64>> {
    Ok(absorb_many(net, dest, &[demand], ratio)?.pop().unwrap())
}

/// `absorb` for several demand vectors sharing one factorization.
pub(crate) fn absorb_many(
    net: &Network,
    dest: NodeId,
    demands: &[&[f64]],
    ratio: impl Fn(EdgeId) -> f64,
) -> Result<Vec<Vec<f64>>> {
    let n = net.node_count();
    // map nodes except dest to rows 0..n-1
    let row = |v: NodeId| if v < dest { v } else { v - 1 };
    let k = n - 1;
    let mut a = vec![0.0; k * k];
    for i in 0..k {
        a[i * k + i] = 1.0;
    }
    for (e, edge) in net.edges().iter().enumerate() {
        if edge.src == dest || edge.dst == dest {
            continue;
        }
        a[row(edge.dst) * k + row(edge.src)] -= ratio(e);
    }
    let lu = Lu::factor(k, a).map_err(|_| Error::SingularFlow { dest })?;
    let mut out = Vec::with_capacity(demands.len());
    for demand in demands {
        let b: Vec<f64> = (0..n).filter(|&v| v != dest).map(|v| demand[v]).collect();
        let sol = lu.solve(&b);
        let mut x = vec![0.0; n];
        for v in (0..n).filter(|&v| v != dest) {
            // clip round-off below zero
            x[v] = sol[row(v)].max(0.0);
        }
        x[dest] = net
            .in_edges(dest)
            .iter()
            .map(|&e| x[net.edge(e).src] * ratio(e))
            .sum();
        out.push(x);
    }
    Ok(out)
}

/// Edge flows broken down by destination.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowAssignment {
    n: usize,
    m: usize,
    per_dest: Vec<f64>,
    edge_flow: Vec<f64>,
}

impl FlowAssignment {
    /// `per_dest` is destination-major: index `d * |E| + e`.
    pub fn from_per_dest(n: usize, m: usize, per_dest: Vec<f64>) -> Self {
        assert_eq!(per_dest.len(), n * m);
        let mut edge_flow = vec![0.0; m];
        for d in 0..n {
            for e in 0..m {
                edge_flow[e] += per_dest[d * m + e];
            }
        }
        FlowAssignment {
            n,
            m,
            per_dest,
            edge_flow,
        }
    }

    pub fn edge_flow(&self) -> &[f64] {
        &self.edge_flow
    }

    pub fn dest_flow(&self, dest: NodeId, e: EdgeId) -> f64 {
        self.per_dest[dest * self.m + e]
    }

    pub fn node_count(&self) -> usize {
        self.n
    }

    /// Largest per-destination conservation violation
    /// `|inflow(v,d) + D(v,d) − outflow(v,d)|` over all `v ≠ d`.
    pub fn conservation_residual(&self, net: &Network, dm: &DemandMatrix) -> f64 {
        let mut worst: f64 = 0.0;
        for d in 0..self.n {
            for v in (0..self.n).filter(|&v| v != d) {
                let inflow: f64 = net.in_edges(v).iter().map(|&e| self.dest_flow(d, e)).sum();
                let outflow: f64 = net.out_edges(v).iter().map(|&e| self.dest_flow(d, e)).sum();
                worst = worst.max((inflow + dm.get(v, d) - outflow).abs());
            }
        }
        worst
    }
}

/// max over edges of flow / capacity.
pub fn max_link_utilization(net: &Network, flow: &FlowAssignment) -> f64 {
    flow.edge_flow
        .iter()
        .zip(net.edges())
        .map(|(f, e)| f / e.capacity)
        .fold(0.0, f64::max)
}

/// Numerically stable softmin: `exp(-γ·xᵢ) / Σⱼ exp(-γ·xⱼ)`.
pub fn softmin(gamma: f64, xs: &[f64]) -> Vec<f64> {
    let scaled: Vec<f64> = xs.iter().map(|x| -gamma * x).collect();
    softmax(&scaled)
}

pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = xs.iter().map(|x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|v| v / sum).collect()
}

/// Softmin routing: at `u ≠ d` the split over out-edges `(u,v)` is
/// `softmin_γ(w(u,v) + dist_w(v,d))`.
pub fn softmin_ratios(net: &Network, w: &EdgeWeights, gamma: f64) -> DestStrategy {
    assert!(gamma > 0.0, "gamma must be positive");
    let (n, m) = (net.node_count(), net.edge_count());
    let mut ratios = vec![0.0; n * m];
    for d in 0..n {
        let dist = shortest_path_distances(net, w, d);
        for u in (0..n).filter(|&u| u != d) {
            let outs = net.out_edges(u);
            let lengths: Vec<f64> = outs.iter().map(|&e| w.get(e) + dist[net.edge(e).dst]).collect();
            for (&e, r) in outs.iter().zip(softmin(gamma, &lengths)) {
                ratios[d * m + e] = r;
            }
        }
    }
    DestStrategy { n, m, ratios }
}

/// Per-node softmax over out-edge logits. `logits` has the same
/// destination-major layout as `DestStrategy`; entries at `v = d` are ignored.
pub fn strategy_from_logits(net: &Network, logits: &[f64]) -> Result<DestStrategy> {
    let (n, m) = (net.node_count(), net.edge_count());
    if logits.len() != n * m {
        return Err(Error::Dimension {
            expected: n * m,
            got: logits.len(),
        });
    }
    let mut ratios = vec![0.0; n * m];
    for d in 0..n {
        for u in (0..n).filter(|&u| u != d) {
            let outs = net.out_edges(u);
            let xs: Vec<f64> = outs.iter().map(|&e| logits[d * m + e]).collect();
            for (&e, r) in outs.iter().zip(softmax(&xs)) {
                ratios[d * m + e] = r;
            }
        }
    }
    Ok(DestStrategy { n, m, ratios })
}
