//! Independent reference computations for the acceptance suite. None of
//! these call into the routing or LP code they are compared against.

#![allow(dead_code)]

use rand::Rng;
use tealab_core::rng::rng;
use tealab_core::{DemandMatrix, DestStrategy, Network};

/// Edge loads estimated by walking `packets` unit packets per commodity
/// hop by hop according to the splitting ratios.
pub fn monte_carlo_flows(net: &Network, strat: &DestStrategy, dm: &DemandMatrix, packets: usize, seed: u64) -> Vec<f64> {
    let (n, m) = (net.node_count(), net.edge_count());
    let mut r = rng(seed);
    let mut load = vec![0.0; m];
    let mut counts = vec![0u64; m];
    for s in 0..n {
        for t in (0..n).filter(|&t| t != s) {
            let demand = dm.get(s, t);
            if demand == 0.0 {
                continue;
            }
            counts.iter_mut().for_each(|c| *c = 0);
            for _ in 0..packets {
                let mut v = s;
                let mut hops = 0;
                while v != t {
                    let x: f64 = r.random();
                    let mut acc = 0.0;
                    let outs = net.out_edges(v);
                    let mut chosen = *outs.last().unwrap();
                    for &e in outs {
                        acc += strat.ratio(t, e);
                        if x < acc {
                            chosen = e;
                            break;
                        }
                    }
                    counts[chosen] += 1;
                    v = net.edge(chosen).dst;
                    hops += 1;
                    assert!(hops < 1_000_000, "packet never absorbed");
                }
            }
            for (l, c) in load.iter_mut().zip(&counts) {
                *l += demand * *c as f64 / packets as f64;
            }
        }
    }
    load
}

/// All simple paths from `s` to `t`, as edge lists.
pub fn simple_paths(net: &Network, s: usize, t: usize) -> Vec<Vec<usize>> {
    fn dfs(net: &Network, v: usize, t: usize, seen: &mut Vec<bool>, path: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if v == t {
            out.push(path.clone());
            return;
        }
        for &e in net.out_edges(v) {
            let w = net.edge(e).dst;
            if !seen[w] {
                seen[w] = true;
                path.push(e);
                dfs(net, w, t, seen, path, out);
                path.pop();
                seen[w] = false;
            }
        }
    }
    let mut seen = vec![false; net.node_count()];
    seen[s] = true;
    let mut out = Vec::new();
    dfs(net, s, t, &mut seen, &mut Vec::new(), &mut out);
    out
}

/// Every way to split one unit over `k` parts in multiples of `1/steps`.
fn compositions(k: usize, steps: usize) -> Vec<Vec<usize>> {
    if k == 1 {
        return vec![vec![steps]];
    }
    let mut out = Vec::new();
    for first in 0..=steps {
        for mut rest in compositions(k - 1, steps - first) {
            rest.insert(0, first);
            out.push(rest);
        }
    }
    out
}

/// Minimum max-link-utilization over all path splits on a grid of `1/steps`.
pub fn grid_min_congestion(net: &Network, dm: &DemandMatrix, steps: usize) -> f64 {
    let n = net.node_count();
    let m = net.edge_count();
    // per commodity: the edge-load vector of each candidate split
    let mut options: Vec<Vec<Vec<f64>>> = Vec::new();
    for s in 0..n {
        for t in (0..n).filter(|&t| t != s) {
            let d = dm.get(s, t);
            if d == 0.0 {
                continue;
            }
            let paths = simple_paths(net, s, t);
            let splits = compositions(paths.len(), steps);
            options.push(
                splits
                    .iter()
                    .map(|split| {
                        let mut load = vec![0.0; m];
                        for (p, &units) in paths.iter().zip(split) {
                            for &e in p {
                                load[e] += d * units as f64 / steps as f64;
                            }
                        }
                        load
                    })
                    .collect(),
            );
        }
    }
    let mut best = f64::INFINITY;
    let mut acc = vec![vec![0.0; m]; options.len() + 1];
    search(net, &options, 0, &mut acc, &mut best);
    best
}

fn search(net: &Network, options: &[Vec<Vec<f64>>], depth: usize, acc: &mut Vec<Vec<f64>>, best: &mut f64) {
    let util = |load: &[f64]| (0..load.len()).map(|e| load[e] / net.capacity(e)).fold(0.0, f64::max);
    if depth == options.len() {
        *best = best.min(util(&acc[depth]));
        return;
    }
    for opt in &options[depth] {
        let next: Vec<f64> = acc[depth].iter().zip(opt).map(|(a, b)| a + b).collect();
        // loads only grow with more commodities
        if util(&next) >= *best {
            continue;
        }
        acc[depth + 1] = next;
        search(net, options, depth + 1, acc, best);
    }
}

/// Random destination-based strategy with every ratio at least `floor / outdeg`.
pub fn random_strategy(net: &Network, seed: u64, floor: f64) -> DestStrategy {
    let (n, m) = (net.node_count(), net.edge_count());
    let mut r = rng(seed);
    let mut ratios = vec![0.0; n * m];
    for d in 0..n {
        for v in (0..n).filter(|&v| v != d) {
            let outs = net.out_edges(v);
            let raw: Vec<f64> = outs.iter().map(|_| floor + r.random::<f64>()).collect();
            let sum: f64 = raw.iter().sum();
            for (&e, x) in outs.iter().zip(raw) {
                ratios[d * m + e] = x / sum;
            }
        }
    }
    DestStrategy::new(net, ratios).unwrap()
}

/// Random strongly connected digraph on `n` nodes: a directed ring plus
/// random extra edges with random capacities.
pub fn random_net(n: usize, seed: u64) -> Network {
    let mut r = rng(seed);
    let mut edges = Vec::new();
    let mut has = vec![vec![false; n]; n];
    for v in 0..n {
        let w = (v + 1) % n;
        has[v][w] = true;
        edges.push(tealab_core::Edge { src: v, dst: w, capacity: r.random_range(1.0..10.0) });
    }
    for a in 0..n {
        for b in 0..n {
            if a != b && !has[a][b] && r.random::<f64>() < 0.5 {
                has[a][b] = true;
                edges.push(tealab_core::Edge { src: a, dst: b, capacity: r.random_range(1.0..10.0) });
            }
        }
    }
    Network::new(n, edges).unwrap()
}

pub fn random_dm(n: usize, seed: u64, density: f64) -> DemandMatrix {
    let mut r = rng(seed);
    let mut raw = vec![0.0; n * n];
    for s in 0..n {
        for t in (0..n).filter(|&t| t != s) {
            if r.random::<f64>() < density {
                raw[s * n + t] = r.random_range(0.5..5.0);
            }
        }
    }
    DemandMatrix::from_vec(n, raw).unwrap()
}

/// Dense Gaussian elimination with partial pivoting.
pub fn solve_dense(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for c in 0..n {
        let p = (c..n).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs())).unwrap();
        a.swap(c, p);
        b.swap(c, p);
        for r in c + 1..n {
            let f = a[r][c] / a[c][c];
            for k in c..n {
                a[r][k] -= f * a[c][k];
            }
            b[r] -= f * b[c];
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|k| a[r][k] * x[k]).sum();
        x[r] = (b[r] - s) / a[r][r];
    }
    x
}

/// Prints one criterion line and returns whether it passed.
pub fn report(id: u32, passed: bool, what: &str, detail: impl std::fmt::Display) -> bool {
    println!("criterion {id:>2}: {} | {what} | {detail}", if passed { "PASS" } else { "FAIL" });
    passed
}
