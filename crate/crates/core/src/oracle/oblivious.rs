//! Oblivious routing by cutting planes.
//!
//! The master LP chooses, per commodity, a convex combination of candidate
//! paths minimizing the worst ratio `r` over the adversarial demand matrices
//! found so far. The adversary, per edge `e`, solves
//! `max Σ D_st·φ_st(e)/c(e)` over demand matrices routable at congestion ≤ 1,
//! which both certifies the ratio of the current routing and yields new cuts.

use rayon::prelude::*;

use super::solved;
use crate::error::Result;
use crate::lp::{lp_solve, LpProblem, Sense};
use crate::net::{hop_distances, EdgeId, Network, NodeId};
use crate::routing::GeneralStrategy;

const INF: f64 = f64::INFINITY;
const FRACTION_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct ObliviousConfig {
    pub max_rounds: usize,
    /// Stop once certified bound minus master lower bound drops below this.
    pub gap: f64,
    /// Candidate paths may be this many hops longer than the shortest.
    pub path_slack: usize,
    pub max_paths: usize,
    /// Weight of the master solution in the next query point; 1 is plain Kelley.
    pub blend: f64,
}

impl Default for ObliviousConfig {
    fn default() -> Self {
        ObliviousConfig {
            max_rounds: 50,
            gap: 1e-3,
            path_slack: 2,
            max_paths: 12,
            blend: 0.5,
        }
    }
}

/// A demand-independent routing with a certified worst-case congestion ratio.
#[derive(Debug, Clone)]
pub struct ObliviousScheme {
    pub strategy: GeneralStrategy,
    /// max over demand matrices of u(strategy, D) / OPT(D), computed exactly
    /// for `strategy`.
    pub ratio_bound: f64,
    /// Master LP value at termination; a lower bound over the candidate paths.
    pub lower_bound: f64,
    pub rounds: usize,
}

pub fn oblivious_strategy(net: &Network) -> Result<ObliviousScheme> {
    ObliviousConfig::default().solve(net)
}

struct Commodity {
    src: NodeId,
    dst: NodeId,
    paths: Vec<Vec<EdgeId>>,
}

/// Per-commodity fraction of unit demand on every edge (commodity-major).
type Fractions = Vec<Vec<f64>>;

struct Cut {
    edge: EdgeId,
    /// demand per commodity index
    demand: Vec<f64>,
}

impl ObliviousConfig {
    pub fn solve(&self, net: &Network) -> Result<ObliviousScheme> {
        let commodities = self.candidate_paths(net);
        let m = net.edge_count();

        let mut lambda: Vec<Vec<f64>> = commodities
            .iter()
            .map(|c| {
                let mut l = vec![0.0; c.paths.len()];
                l[0] = 1.0;
                l
            })
            .collect();
        let mut cuts: Vec<Cut> = Vec::new();
        let mut lower = 0.0;
        let mut best: Option<(Vec<Vec<f64>>, f64)> = None;
        let mut rounds = 0;

        while rounds < self.max_rounds {
            rounds += 1;
            let phi = fractions(&commodities, &lambda, m);
            let worst: Vec<(f64, Vec<f64>)> = (0..m)
                .into_par_iter()
                .map(|e| adversary(net, &commodities, &phi, e))
                .collect::<Result<_>>()?;
            let upper = worst.iter().map(|w| w.0).fold(0.0, f64::max);
            if best.as_ref().is_none_or(|b| upper < b.1) {
                best = Some((lambda.clone(), upper));
            }
            let best_upper = best.as_ref().unwrap().1;
            if best_upper - lower < self.gap {
                break;
            }
            let before = cuts.len();
            for (e, (ratio, demand)) in worst.into_iter().enumerate() {
                if ratio > lower + 1e-9 {
                    cuts.push(Cut { edge: e, demand });
                }
            }
            if cuts.len() == before {
                break;
            }
            let (l, r) = master(net, &commodities, &cuts)?;
            lower = r;
            // query between the master optimum and the incumbent
            let incumbent = &best.as_ref().unwrap().0;
            lambda = l
                .iter()
                .zip(incumbent)
                .map(|(a, b)| a.iter().zip(b).map(|(x, y)| self.blend * x + (1.0 - self.blend) * y).collect())
                .collect();
        }

        let (lambda, ratio_bound) = best.unwrap();
        let phi = fractions(&commodities, &lambda, m);
        Ok(ObliviousScheme {
            strategy: to_strategy(net, &commodities, &phi),
            ratio_bound,
            lower_bound: lower,
            rounds,
        })
    }

    /// Simple paths within `path_slack` hops of the shortest, shortest first.
    fn candidate_paths(&self, net: &Network) -> Vec<Commodity> {
        let n = net.node_count();
        let mut out = Vec::new();
        for t in 0..n {
            let hops = hop_distances(net, t);
            for s in (0..n).filter(|&s| s != t) {
                let limit = hops[s] + self.path_slack;
                let mut paths = Vec::new();
                let mut on_path = vec![false; n];
                on_path[s] = true;
                dfs(net, s, t, limit, &hops, &mut on_path, &mut Vec::new(), &mut paths);
                paths.sort_by(|a, b| a.len().cmp(&b.len()).then_with(|| a.cmp(b)));
                paths.truncate(self.max_paths);
                out.push(Commodity { src: s, dst: t, paths });
            }
        }
        out
    }
}

#[allow(clippy::too_many_arguments)]
fn dfs(
    net: &Network,
    v: NodeId,
    t: NodeId,
    limit: usize,
    hops: &[usize],
    on_path: &mut [bool],
    stack: &mut Vec<EdgeId>,
    out: &mut Vec<Vec<EdgeId>>,
) {
    if v == t {
        out.push(stack.clone());
        return;
    }
    for &e in net.out_edges(v) {
        let u = net.edge(e).dst;
        if on_path[u] || stack.len() + 1 + hops[u] > limit {
            continue;
        }
        on_path[u] = true;
        stack.push(e);
        dfs(net, u, t, limit, hops, on_path, stack, out);
        stack.pop();
        on_path[u] = false;
    }
}

fn fractions(commodities: &[Commodity], lambda: &[Vec<f64>], m: usize) -> Fractions {
    commodities
        .iter()
        .zip(lambda)
        .map(|(c, l)| {
            let mut phi = vec![0.0; m];
            for (path, &w) in c.paths.iter().zip(l) {
                for &e in path {
                    phi[e] += w;
                }
            }
            phi
        })
        .collect()
}

/// Worst congestion ratio on edge `e` and the demand matrix attaining it.
fn adversary(net: &Network, commodities: &[Commodity], phi: &Fractions, e: EdgeId) -> Result<(f64, Vec<f64>)> {
    let (n, m) = (net.node_count(), net.edge_count());
    let active: Vec<usize> = (0..commodities.len()).filter(|&k| phi[k][e] > FRACTION_EPS).collect();
    let mut demand = vec![0.0; commodities.len()];
    if active.is_empty() {
        return Ok((0.0, demand));
    }
    let cap = net.capacity(e);
    let mut lp = LpProblem::default();
    let dvar: Vec<usize> = active.iter().map(|&k| lp.add_var(-phi[k][e] / cap, 0.0, INF)).collect();
    let mut dests: Vec<NodeId> = active.iter().map(|&k| commodities[k].dst).collect();
    dests.sort_unstable();
    dests.dedup();
    let mut gvar = vec![None; n * m];
    for &d in &dests {
        for (h, edge) in net.edges().iter().enumerate() {
            if edge.src != d {
                gvar[d * m + h] = Some(lp.add_var(0.0, 0.0, INF));
            }
        }
    }
    for &d in &dests {
        for v in (0..n).filter(|&v| v != d) {
            let mut row: Vec<(usize, f64)> = Vec::new();
            for &h in net.out_edges(v) {
                row.extend(gvar[d * m + h].map(|x| (x, 1.0)));
            }
            for &h in net.in_edges(v) {
                row.extend(gvar[d * m + h].map(|x| (x, -1.0)));
            }
            for (i, &k) in active.iter().enumerate() {
                if commodities[k].src == v && commodities[k].dst == d {
                    row.push((dvar[i], -1.0));
                }
            }
            lp.add_constraint(row, Sense::Eq, 0.0);
        }
    }
    for h in 0..m {
        let row: Vec<(usize, f64)> = dests.iter().filter_map(|&d| gvar[d * m + h].map(|x| (x, 1.0))).collect();
        lp.add_constraint(row, Sense::Le, net.capacity(h));
    }
    let sol = solved(lp_solve(&lp)?)?;
    for (i, &k) in active.iter().enumerate() {
        demand[k] = sol.x[dvar[i]].max(0.0);
    }
    let ratio: f64 = active.iter().map(|&k| demand[k] * phi[k][e]).sum::<f64>() / cap;
    Ok((ratio, demand))
}

fn master(net: &Network, commodities: &[Commodity], cuts: &[Cut]) -> Result<(Vec<Vec<f64>>, f64)> {
    let mut lp = LpProblem::default();
    let r = lp.add_var(1.0, 0.0, INF);
    let vars: Vec<Vec<usize>> = commodities
        .iter()
        .map(|c| c.paths.iter().map(|_| lp.add_var(0.0, 0.0, INF)).collect())
        .collect();
    for v in &vars {
        lp.add_constraint(v.iter().map(|&x| (x, 1.0)).collect(), Sense::Eq, 1.0);
    }
    for cut in cuts {
        let mut row = vec![(r, -net.capacity(cut.edge))];
        for (k, c) in commodities.iter().enumerate() {
            if cut.demand[k] <= 0.0 {
                continue;
            }
            for (p, path) in c.paths.iter().enumerate() {
                if path.contains(&cut.edge) {
                    row.push((vars[k][p], cut.demand[k]));
                }
            }
        }
        lp.add_constraint(row, Sense::Le, 0.0);
    }
    let sol = solved(lp_solve(&lp)?)?;
    let lambda = vars
        .iter()
        .map(|v| {
            let raw: Vec<f64> = v.iter().map(|&x| sol.x[x].max(0.0)).collect();
            let total: f64 = raw.iter().sum();
            raw.into_iter().map(|x| x / total).collect()
        })
        .collect();
    Ok((lambda, sol.x[r]))
}

/// Per-commodity edge fractions to splitting ratios. Nodes a commodity never
/// visits forward along a hop-shortest next hop.
fn to_strategy(net: &Network, commodities: &[Commodity], phi: &Fractions) -> GeneralStrategy {
    let (n, m) = (net.node_count(), net.edge_count());
    let fallback: Vec<Vec<f64>> = (0..n)
        .map(|t| {
            let hops = hop_distances(net, t);
            let mut r = vec![0.0; m];
            for v in (0..n).filter(|&v| v != t) {
                let e = *net
                    .out_edges(v)
                    .iter()
                    .find(|&&e| hops[net.edge(e).dst] + 1 == hops[v])
                    .expect("strongly connected");
                r[e] = 1.0;
            }
            r
        })
        .collect();
    let mut ratios = Vec::with_capacity(n * n * m);
    for _src in 0..n {
        for t in 0..n {
            ratios.extend_from_slice(&fallback[t]);
        }
    }
    for (c, phi) in commodities.iter().zip(phi) {
        let base = (c.src * n + c.dst) * m;
        for v in (0..n).filter(|&v| v != c.dst) {
            let out: f64 = net.out_edges(v).iter().map(|&e| phi[e]).sum();
            if out <= FRACTION_EPS {
                continue;
            }
            for &e in net.out_edges(v) {
                ratios[base + e] = phi[e] / out;
            }
        }
    }
    GeneralStrategy::new(net, ratios).expect("fractions form valid splits")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::tests::net_from;

    #[test]
    fn unique_paths_give_ratio_one() {
        // bidirectional path 0-1-2-3
        let net = net_from(
            4,
            &[(0, 1, 1.0), (1, 0, 1.0), (1, 2, 2.0), (2, 1, 2.0), (2, 3, 1.0), (3, 2, 1.0)],
        );
        let scheme = oblivious_strategy(&net).unwrap();
        assert!((scheme.ratio_bound - 1.0).abs() < 1e-6, "{}", scheme.ratio_bound);
    }

    #[test]
    fn ring_bound_at_least_one() {
        let net = net_from(
            4,
            &[(0, 1, 1.0), (1, 0, 1.0), (1, 2, 1.0), (2, 1, 1.0), (2, 3, 1.0), (3, 2, 1.0), (3, 0, 1.0), (0, 3, 1.0)],
        );
        let scheme = oblivious_strategy(&net).unwrap();
        assert!(scheme.ratio_bound >= 1.0 - 1e-9);
        assert!(scheme.ratio_bound >= scheme.lower_bound - 1e-9);
        assert!(scheme.ratio_bound - scheme.lower_bound < 1e-3 + 1e-9 || scheme.rounds == 50);
    }
}
