//! Capacitated directed graphs and weighted shortest-path distances.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

/// Lower bound for every edge weight fed to shortest-path computations.
pub const MIN_WEIGHT: f64 = 1e-4;

pub type NodeId = usize;
pub type EdgeId = usize;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Edge {
    pub src: NodeId,
    pub dst: NodeId,
    pub capacity: f64,
}

/// A validated, strongly connected capacitated digraph with dense node ids.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    node_count: usize,
    edges: Vec<Edge>,
    out_edges: Vec<Vec<EdgeId>>,
    in_edges: Vec<Vec<EdgeId>>,
}

impl Network {
    pub fn new(node_count: usize, edges: Vec<Edge>) -> Result<Self> {
        if node_count == 0 {
            return Err(Error::Topology("network has no nodes".into()));
        }
        let mut seen = HashSet::new();
        for (i, e) in edges.iter().enumerate() {
            validate_edge(node_count, e).map_err(|m| Error::Topology(format!("edge {i}: {m}")))?;
            if !seen.insert((e.src, e.dst)) {
                return Err(Error::Topology(format!(
                    "edge {i}: duplicate edge {}->{}",
                    e.src, e.dst
                )));
            }
        }
        let net = Self::build(node_count, edges);
        net.check_strongly_connected()?;
        Ok(net)
    }

    fn build(node_count: usize, edges: Vec<Edge>) -> Self {
        let mut out_edges = vec![Vec::new(); node_count];
        let mut in_edges = vec![Vec::new(); node_count];
        for (i, e) in edges.iter().enumerate() {
            out_edges[e.src].push(i);
            in_edges[e.dst].push(i);
        }
        Network {
            node_count,
            edges,
            out_edges,
            in_edges,
        }
    }

    fn check_strongly_connected(&self) -> Result<()> {
        let fwd = self.reach(0, |v| &self.out_edges[v], |e| e.dst);
        let bwd = self.reach(0, |v| &self.in_edges[v], |e| e.src);
        if let Some(v) = (0..self.node_count).find(|&v| !fwd[v] || !bwd[v]) {
            return Err(Error::Topology(format!(
                "not strongly connected: node {v} is not mutually reachable with node 0"
            )));
        }
        Ok(())
    }

    fn reach<'a>(
        &'a self,
        start: NodeId,
        adj: impl Fn(NodeId) -> &'a Vec<EdgeId>,
        head: impl Fn(&Edge) -> NodeId,
    ) -> Vec<bool> {
        let mut seen = vec![false; self.node_count];
        let mut stack = vec![start];
        seen[start] = true;
        while let Some(v) = stack.pop() {
            for &e in adj(v) {
                let u = head(&self.edges[e]);
                if !seen[u] {
                    seen[u] = true;
                    stack.push(u);
                }
            }
        }
        seen
    }

    pub fn node_count(&self) -> usize {
        self.node_count
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn edge(&self, e: EdgeId) -> &Edge {
        &self.edges[e]
    }

    pub fn capacity(&self, e: EdgeId) -> f64 {
        self.edges[e].capacity
    }

    pub fn out_edges(&self, v: NodeId) -> &[EdgeId] {
        &self.out_edges[v]
    }

    pub fn in_edges(&self, v: NodeId) -> &[EdgeId] {
        &self.in_edges[v]
    }

    pub fn max_capacity(&self) -> f64 {
        self.edges.iter().map(|e| e.capacity).fold(0.0, f64::max)
    }

    pub fn find_edge(&self, src: NodeId, dst: NodeId) -> Option<EdgeId> {
        self.out_edges[src]
            .iter()
            .copied()
            .find(|&e| self.edges[e].dst == dst)
    }

    /// Parses the `src,dst,capacity` line format. Blank lines and lines
    /// starting with `#` are skipped. The node count is one past the largest id.
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut edges = Vec::new();
        let mut lines = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let parse_err = |msg: String| Error::Parse {
                path: origin.to_path_buf(),
                line: idx + 1,
                msg,
            };
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != 3 {
                return Err(parse_err(format!(
                    "expected `src,dst,capacity`, found {} fields",
                    fields.len()
                )));
            }
            let src = fields[0]
                .parse::<usize>()
                .map_err(|e| parse_err(format!("bad src `{}`: {e}", fields[0])))?;
            let dst = fields[1]
                .parse::<usize>()
                .map_err(|e| parse_err(format!("bad dst `{}`: {e}", fields[1])))?;
            let capacity = fields[2]
                .parse::<f64>()
                .map_err(|e| parse_err(format!("bad capacity `{}`: {e}", fields[2])))?;
            edges.push(Edge { src, dst, capacity });
            lines.push(idx + 1);
        }
        if edges.is_empty() {
            return Err(Error::Topology(format!("{}: no edges", origin.display())));
        }
        let node_count = edges.iter().map(|e| e.src.max(e.dst)).max().unwrap_or(0) + 1;
        let mut seen = HashSet::new();
        for (e, &line) in edges.iter().zip(&lines) {
            let at = |msg: String| Error::Parse {
                path: origin.to_path_buf(),
                line,
                msg,
            };
            validate_edge(node_count, e).map_err(at)?;
            if !seen.insert((e.src, e.dst)) {
                return Err(at(format!("duplicate edge {}->{}", e.src, e.dst)));
            }
        }
        let net = Self::build(node_count, edges);
        net.check_strongly_connected()?;
        Ok(net)
    }

    /// Serializes in the same line format `parse` accepts, preserving edge order.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for e in &self.edges {
            writeln!(out, "{},{},{}", e.src, e.dst, e.capacity).unwrap();
        }
        out
    }
}

fn validate_edge(n: usize, e: &Edge) -> std::result::Result<(), String> {
    if e.src >= n || e.dst >= n {
        return Err(format!("endpoint out of range in {}->{}", e.src, e.dst));
    }
    if e.src == e.dst {
        return Err(format!("self-loop at node {}", e.src));
    }
    if !(e.capacity.is_finite() && e.capacity > 0.0) {
        return Err(format!(
            "nonpositive or non-finite capacity {} on {}->{}",
            e.capacity, e.src, e.dst
        ));
    }
    Ok(())
}

pub fn load_topology(path: impl AsRef<Path>) -> Result<Network> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    Network::parse(&text, path)
}

pub fn save_topology(net: &Network, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, net.to_text())?;
    Ok(())
}

/// Per-edge positive weights, read as distances by softmin routing.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeWeights(Vec<f64>);

impl EdgeWeights {
    pub fn new(net: &Network, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != net.edge_count() {
            return Err(Error::Dimension {
                expected: net.edge_count(),
                got: weights.len(),
            });
        }
        if let Some((i, w)) = weights
            .iter()
            .enumerate()
            .find(|(_, w)| !(w.is_finite() && **w >= MIN_WEIGHT))
        {
            return Err(Error::Topology(format!(
                "weight {w} on edge {i} is below the floor {MIN_WEIGHT}"
            )));
        }
        Ok(EdgeWeights(weights))
    }

    /// Applies the `MIN_WEIGHT` floor instead of rejecting small values.
    /// Non-finite inputs are mapped to the floor as well.
    pub fn clamped(weights: Vec<f64>) -> Self {
        EdgeWeights(
            weights
                .into_iter()
                .map(|w| if w.is_finite() { w.max(MIN_WEIGHT) } else { MIN_WEIGHT })
                .collect(),
        )
    }

    pub fn uniform(net: &Network, w: f64) -> Self {
        Self::clamped(vec![w; net.edge_count()])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn get(&self, e: EdgeId) -> f64 {
        self.0[e]
    }
}

#[derive(PartialEq)]
struct Entry(f64, NodeId);

impl Eq for Entry {}

impl Ord for Entry {
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .0
            .total_cmp(&self.0)
            .then_with(|| other.1.cmp(&self.1))
    }
}

impl PartialOrd for Entry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Dijkstra on the reversed graph: distance from every node to `dest`.
pub fn shortest_path_distances(net: &Network, w: &EdgeWeights, dest: NodeId) -> Vec<f64> {
    let n = net.node_count();
    let mut dist = vec![f64::INFINITY; n];
    let mut done = vec![false; n];
    let mut heap = BinaryHeap::new();
    dist[dest] = 0.0;
    heap.push(Entry(0.0, dest));
    while let Some(Entry(d, v)) = heap.pop() {
        if done[v] {
            continue;
        }
        done[v] = true;
        for &e in net.in_edges(v) {
            let u = net.edge(e).src;
            let cand = d + w.get(e);
            if cand < dist[u] {
                dist[u] = cand;
                heap.push(Entry(cand, u));
            }
        }
    }
    dist
}

/// Hop-count distances to `dest`.
pub fn hop_distances(net: &Network, dest: NodeId) -> Vec<usize> {
    let n = net.node_count();
    let mut dist = vec![usize::MAX; n];
    let mut queue = std::collections::VecDeque::new();
    dist[dest] = 0;
    queue.push_back(dest);
    while let Some(v) = queue.pop_front() {
        for &e in net.in_edges(v) {
            let u = net.edge(e).src;
            if dist[u] == usize::MAX {
                dist[u] = dist[v] + 1;
                queue.push_back(u);
            }
        }
    }
    dist
}
