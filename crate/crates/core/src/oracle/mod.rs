//! Optimality oracles: minimum-congestion multicommodity flow, optimal
//! oblivious routing, and softmin weight optimization.

mod oblivious;
mod softmin_opt;

pub use oblivious::{oblivious_strategy, ObliviousConfig, ObliviousScheme};
pub use softmin_opt::{optimize_softmin_weights, SoftminEvaluator, SoftminFit, SoftminOptimizer};

use crate::error::{Error, Result};
use crate::lp::{lp_solve, LpError, LpProblem, LpStatus, Sense};
use crate::net::Network;
use crate::routing::{DestStrategy, FlowAssignment};
use crate::traffic::DemandMatrix;

const INF: f64 = f64::INFINITY;

/// Minimum achievable max-link-utilization and a flow attaining it.
#[derive(Debug, Clone)]
pub struct OptimalCongestion {
    pub theta: f64,
    pub flow: FlowAssignment,
}

impl OptimalCongestion {
    /// Splitting ratios proportional to the optimal flow out of each node.
    /// Nodes that carry no traffic toward a destination split evenly.
    pub fn strategy(&self, net: &Network) -> Result<DestStrategy> {
        let (n, m) = (net.node_count(), net.edge_count());
        let mut ratios = vec![0.0; n * m];
        for d in 0..n {
            for v in (0..n).filter(|&v| v != d) {
                let outs = net.out_edges(v);
                let total: f64 = outs.iter().map(|&e| self.flow.dest_flow(d, e)).sum();
                for &e in outs {
                    ratios[d * m + e] = if total > 0.0 {
                        self.flow.dest_flow(d, e) / total
                    } else {
                        1.0 / outs.len() as f64
                    };
                }
            }
        }
        DestStrategy::new(net, ratios)
    }
}

/// Destination-aggregated min-congestion LP: `n·|E|` flow variables plus θ.
pub fn optimal_congestion(net: &Network, dm: &DemandMatrix) -> Result<OptimalCongestion> {
    let (n, m) = (net.node_count(), net.edge_count());
    if dm.n() != n {
        return Err(Error::Dimension {
            expected: n,
            got: dm.n(),
        });
    }
    if dm.is_zero() {
        return Ok(OptimalCongestion {
            theta: 0.0,
            flow: FlowAssignment::from_per_dest(n, m, vec![0.0; n * m]),
        });
    }
    let mut lp = LpProblem::default();
    let theta = lp.add_var(1.0, 0.0, INF);
    // var[d][e]; edges leaving d never carry d-bound traffic
    let mut var = vec![None; n * m];
    let dests: Vec<usize> = (0..n).filter(|&d| (0..n).any(|s| dm.get(s, d) > 0.0)).collect();
    for &d in &dests {
        for (e, edge) in net.edges().iter().enumerate() {
            if edge.src != d {
                var[d * m + e] = Some(lp.add_var(0.0, 0.0, INF));
            }
        }
    }
    for &d in &dests {
        for v in (0..n).filter(|&v| v != d) {
            let mut row = Vec::new();
            for &e in net.out_edges(v) {
                row.extend(var[d * m + e].map(|x| (x, 1.0)));
            }
            for &e in net.in_edges(v) {
                row.extend(var[d * m + e].map(|x| (x, -1.0)));
            }
            lp.add_constraint(row, Sense::Eq, dm.get(v, d));
        }
    }
    for e in 0..m {
        let mut row: Vec<(usize, f64)> = dests.iter().filter_map(|&d| var[d * m + e].map(|x| (x, 1.0))).collect();
        row.push((theta, -net.capacity(e)));
        lp.add_constraint(row, Sense::Le, 0.0);
    }
    let sol = solved(lp_solve(&lp)?)?;
    let per_dest = var.iter().map(|v| v.map_or(0.0, |x| sol.x[x].max(0.0))).collect();
    Ok(OptimalCongestion {
        theta: sol.x[theta],
        flow: FlowAssignment::from_per_dest(n, m, per_dest),
    })
}

/// Same optimum computed with one commodity per (source, destination) pair.
/// Quadratically larger; intended for cross-checking on small networks.
pub fn optimal_congestion_per_commodity(net: &Network, dm: &DemandMatrix) -> Result<f64> {
    let (n, m) = (net.node_count(), net.edge_count());
    let pairs: Vec<(usize, usize)> = (0..n)
        .flat_map(|s| (0..n).map(move |t| (s, t)))
        .filter(|&(s, t)| dm.get(s, t) > 0.0)
        .collect();
    if pairs.is_empty() {
        return Ok(0.0);
    }
    let mut lp = LpProblem::default();
    let theta = lp.add_var(1.0, 0.0, INF);
    let base = lp.num_vars();
    for _ in 0..pairs.len() * m {
        lp.add_var(0.0, 0.0, INF);
    }
    let var = |k: usize, e: usize| base + k * m + e;
    for (k, &(s, t)) in pairs.iter().enumerate() {
        for v in (0..n).filter(|&v| v != t) {
            let mut row: Vec<(usize, f64)> = net.out_edges(v).iter().map(|&e| (var(k, e), 1.0)).collect();
            row.extend(net.in_edges(v).iter().map(|&e| (var(k, e), -1.0)));
            lp.add_constraint(row, Sense::Eq, if v == s { dm.get(s, t) } else { 0.0 });
        }
    }
    for e in 0..m {
        let mut row: Vec<(usize, f64)> = (0..pairs.len()).map(|k| (var(k, e), 1.0)).collect();
        row.push((theta, -net.capacity(e)));
        lp.add_constraint(row, Sense::Le, 0.0);
    }
    Ok(solved(lp_solve(&lp)?)?.x[theta])
}

fn solved(sol: crate::lp::LpSolution) -> Result<crate::lp::LpSolution> {
    match sol.status {
        LpStatus::Optimal => Ok(sol),
        other => Err(Error::Lp(LpError::Malformed(format!("unexpected status {other:?}")))),
    }
}
