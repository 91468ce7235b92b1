use rand::Rng as _;
use rayon::prelude::*;

use crate::error::Result;
use crate::net::{EdgeWeights, Network, MIN_WEIGHT};
use crate::rng::{derive, rng};
use crate::routing::{absorb_many, softmin_ratios};
use crate::traffic::DemandMatrix;

const MAX_LOG_WEIGHT: f64 = 12.0;

/// Scores softmin weights against a fixed set of target demand matrices,
/// factoring each destination's flow system once for all targets.
#[derive(Debug, Clone)]
pub struct SoftminEvaluator<'a> {
    net: &'a Network,
    targets: Vec<&'a DemandMatrix>,
    gamma: f64,
    /// (dest, per-target demand column) for destinations with traffic
    columns: Vec<(usize, Vec<Vec<f64>>)>,
}

impl<'a> SoftminEvaluator<'a> {
    pub fn new(net: &'a Network, targets: &'a [DemandMatrix], gamma: f64) -> Self {
        let n = net.node_count();
        let columns = (0..n)
            .filter_map(|d| {
                let cols: Vec<Vec<f64>> = targets
                    .iter()
                    .map(|dm| (0..n).map(|v| dm.get(v, d)).collect())
                    .collect();
                cols.iter().any(|c| c.iter().any(|&x| x > 0.0)).then_some((d, cols))
            })
            .collect();
        SoftminEvaluator {
            net,
            targets: targets.iter().collect(),
            gamma,
            columns,
        }
    }

    /// Edge loads for every target under softmin routing with weights `w`.
    pub fn edge_loads(&self, w: &EdgeWeights) -> Result<Vec<Vec<f64>>> {
        let net = self.net;
        let m = net.edge_count();
        let strat = softmin_ratios(net, w, self.gamma);
        let mut loads = vec![vec![0.0; m]; self.targets.len()];
        for (d, cols) in &self.columns {
            let rhs: Vec<&[f64]> = cols.iter().map(Vec::as_slice).collect();
            let through = absorb_many(net, *d, &rhs, |e| strat.ratio(*d, e))?;
            for (load, x) in loads.iter_mut().zip(&through) {
                for (e, edge) in net.edges().iter().enumerate() {
                    load[e] += x[edge.src] * strat.ratio(*d, e);
                }
            }
        }
        Ok(loads)
    }

    /// Max-link-utilization per target.
    pub fn utilizations(&self, w: &EdgeWeights) -> Result<Vec<f64>> {
        Ok(self
            .edge_loads(w)?
            .iter()
            .map(|load| self.max_util(load))
            .collect())
    }

    pub fn mean_utilization(&self, w: &EdgeWeights) -> Result<f64> {
        let u = self.utilizations(w)?;
        Ok(u.iter().sum::<f64>() / u.len() as f64)
    }

    fn max_util(&self, load: &[f64]) -> f64 {
        load.iter()
            .zip(self.net.edges())
            .map(|(f, e)| f / e.capacity)
            .fold(0.0, f64::max)
    }

    /// Mean over targets of (hard max, smoothed max). The smoothed max is a
    /// log-sum-exp at `temperature` on utilizations divided by `scales[i]`.
    fn score(&self, w: &EdgeWeights, scales: &[f64], temperature: f64) -> Result<(f64, f64)> {
        let loads = self.edge_loads(w)?;
        let (mut hard, mut soft) = (0.0, 0.0);
        for (load, &scale) in loads.iter().zip(scales) {
            let utils: Vec<f64> = load
                .iter()
                .zip(self.net.edges())
                .map(|(f, e)| f / e.capacity)
                .collect();
            let max = utils.iter().copied().fold(0.0, f64::max);
            hard += max;
            if scale > 0.0 {
                let lse: f64 = utils
                    .iter()
                    .map(|u| (temperature * (u - max) / scale).exp())
                    .sum::<f64>()
                    .ln();
                soft += max + scale * lse / temperature;
            }
        }
        let k = loads.len() as f64;
        Ok((hard / k, soft / k))
    }
}

/// BFGS on log-weights with finite-difference gradients, temperature
/// continuation and random restarts.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftminOptimizer {
    pub gamma: f64,
    /// Gradient iterations per restart.
    pub budget: usize,
    pub restarts: usize,
    pub temperature: f64,
    /// Continuation stages; each rescales by the current max and multiplies
    /// the temperature by `temperature_growth`.
    pub stages: usize,
    pub temperature_growth: f64,
    pub fd_step: f64,
    pub seed: u64,
}

impl Default for SoftminOptimizer {
    fn default() -> Self {
        SoftminOptimizer {
            gamma: 2.0,
            budget: 150,
            restarts: 3,
            temperature: 50.0,
            stages: 3,
            temperature_growth: 2.0,
            fd_step: 1e-4,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SoftminFit {
    pub weights: EdgeWeights,
    /// Mean hard max-link-utilization over the targets at `weights`.
    pub utilization: f64,
    /// Surrogate objective at each accepted iterate, one trace per restart stage.
    pub traces: Vec<Vec<f64>>,
}

pub fn optimize_softmin_weights(
    net: &Network,
    targets: &[DemandMatrix],
    gamma: f64,
    budget: usize,
    seed: u64,
) -> Result<EdgeWeights> {
    let opt = SoftminOptimizer {
        gamma,
        budget,
        seed,
        ..SoftminOptimizer::default()
    };
    Ok(opt.fit(net, targets)?.weights)
}

fn to_weights(theta: &[f64]) -> EdgeWeights {
    EdgeWeights::clamped(theta.iter().map(|t| t.exp()).collect())
}

impl SoftminOptimizer {
    pub fn fit(&self, net: &Network, targets: &[DemandMatrix]) -> Result<SoftminFit> {
        assert!(!targets.is_empty(), "at least one target demand matrix is required");
        let eval = SoftminEvaluator::new(net, targets, self.gamma);
        let m = net.edge_count();
        let scales = eval.utilizations(&EdgeWeights::uniform(net, 1.0))?;

        let runs: Vec<Result<Restart>> = (0..self.restarts.max(1))
            .into_par_iter()
            .map(|r| {
                let theta = if r == 0 {
                    vec![0.0; m]
                } else {
                    let mut g = rng(derive(self.seed, r as u64));
                    (0..m).map(|_| g.random_range(-1.0..1.0)).collect()
                };
                self.descend(&eval, &scales, theta)
            })
            .collect();
        let mut best: Option<Restart> = None;
        let mut traces = Vec::new();
        for run in runs {
            let run = run?;
            traces.extend(run.trace.iter().cloned());
            if best.as_ref().is_none_or(|b| run.best_hard < b.best_hard) {
                best = Some(run);
            }
        }
        let best = best.unwrap();
        Ok(SoftminFit {
            weights: to_weights(&best.best_theta),
            utilization: best.best_hard,
            traces,
        })
    }

    fn descend(&self, eval: &SoftminEvaluator, scales: &[f64], theta: Vec<f64>) -> Result<Restart> {
        let stages = self.stages.max(1);
        let mut out = Restart {
            best_hard: f64::INFINITY,
            best_theta: theta.clone(),
            trace: Vec::new(),
        };
        let mut theta = theta;
        let mut scales = scales.to_vec();
        let mut temperature = self.temperature;
        for stage in 0..stages {
            let iters = self.budget / stages + usize::from(stage < self.budget % stages);
            theta = self.descend_stage(eval, &scales, temperature, theta, iters, &mut out)?;
            scales = eval.utilizations(&to_weights(&theta))?;
            temperature *= self.temperature_growth;
        }
        Ok(out)
    }

    fn descend_stage(
        &self,
        eval: &SoftminEvaluator,
        scales: &[f64],
        temperature: f64,
        mut theta: Vec<f64>,
        iters: usize,
        out: &mut Restart,
    ) -> Result<Vec<f64>> {
        let score = |th: &[f64]| eval.score(&to_weights(th), scales, temperature);
        let h = self.fd_step;
        let gradient = |th: &mut Vec<f64>| -> Result<Vec<f64>> {
            let mut grad = vec![0.0; th.len()];
            for i in 0..th.len() {
                let orig = th[i];
                th[i] = orig + h;
                let up = score(th)?.1;
                th[i] = orig - h;
                let down = score(th)?.1;
                th[i] = orig;
                grad[i] = (up - down) / (2.0 * h);
            }
            Ok(grad)
        };
        let dim = theta.len();
        let (mut hard, mut soft) = score(&theta)?;
        if hard < out.best_hard {
            out.best_hard = hard;
            out.best_theta = theta.clone();
        }
        let mut trace = vec![soft];
        let mut grad = gradient(&mut theta)?;
        // BFGS inverse-Hessian approximation, reset to identity on trouble
        let mut inv_h = identity(dim);
        let mut first = true;
        for _ in 0..iters {
            let gnorm = norm(&grad);
            if !(gnorm > 1e-12) {
                break;
            }
            let mut dir: Vec<f64> = (0..dim).map(|i| -dot(&inv_h[i], &grad)).collect();
            let mut slope = dot(&dir, &grad);
            if !(slope < 0.0) || first {
                inv_h = identity(dim);
                dir = grad.iter().map(|g| -g * INITIAL_STEP / gnorm).collect();
                slope = dot(&dir, &grad);
                first = false;
            }
            let mut t = 1.0;
            let mut next = None;
            for _ in 0..40 {
                let cand: Vec<f64> = theta
                    .iter()
                    .zip(&dir)
                    .map(|(x, d)| (x + t * d).clamp(MIN_WEIGHT.ln(), MAX_LOG_WEIGHT))
                    .collect();
                let (c_hard, c_soft) = score(&cand)?;
                if c_soft <= soft + 1e-4 * t * slope && c_soft < soft {
                    next = Some((cand, c_hard, c_soft));
                    break;
                }
                t *= 0.5;
            }
            let Some((mut cand, c_hard, c_soft)) = next else {
                break;
            };
            let new_grad = gradient(&mut cand)?;
            let step: Vec<f64> = cand.iter().zip(&theta).map(|(a, b)| a - b).collect();
            let dg: Vec<f64> = new_grad.iter().zip(&grad).map(|(a, b)| a - b).collect();
            let sy = dot(&step, &dg);
            if sy > 1e-12 {
                bfgs_update(&mut inv_h, &step, &dg, sy);
            } else {
                inv_h = identity(dim);
            }
            theta = cand;
            grad = new_grad;
            hard = c_hard;
            soft = c_soft;
            trace.push(soft);
            if hard < out.best_hard {
                out.best_hard = hard;
                out.best_theta = theta.clone();
            }
        }
        out.trace.push(trace);
        Ok(theta)
    }
}

const INITIAL_STEP: f64 = 0.5;

fn identity(n: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// H ← (I − ρ s yᵀ) H (I − ρ y sᵀ) + ρ s sᵀ with ρ = 1 / (sᵀy).
fn bfgs_update(h: &mut [Vec<f64>], s: &[f64], y: &[f64], sy: f64) {
    let n = s.len();
    let rho = 1.0 / sy;
    let hy: Vec<f64> = (0..n).map(|i| dot(&h[i], y)).collect();
    let yhy = dot(y, &hy);
    for i in 0..n {
        for j in 0..n {
            h[i][j] += -rho * (hy[i] * s[j] + s[i] * hy[j]) + (rho * rho * yhy + rho) * s[i] * s[j];
        }
    }
}

struct Restart {
    best_theta: Vec<f64>,
    best_hard: f64,
    /// one monotone trace per stage
    trace: Vec<Vec<f64>>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::tests::net_from;
    use crate::oracle::optimal_congestion;

    fn diamond() -> Network {
        net_from(
            4,
            &[(0, 1, 1.0), (0, 2, 1.0), (1, 3, 1.0), (2, 3, 1.0), (3, 0, 1.0), (1, 0, 1.0), (2, 0, 1.0)],
        )
    }

    #[test]
    fn symmetric_diamond_reaches_opt() {
        let net = diamond();
        let mut raw = vec![0.0; 16];
        raw[3] = 1.0;
        let dm = DemandMatrix::from_vec(4, raw).unwrap();
        let targets = vec![dm.clone()];
        let fit = SoftminOptimizer::default().fit(&net, &targets).unwrap();
        let opt = optimal_congestion(&net, &dm).unwrap().theta;
        assert!((opt - 0.5).abs() < 1e-9);
        assert!(fit.utilization <= 1.01 * opt, "{} vs {opt}", fit.utilization);
        for trace in &fit.traces {
            assert!(trace.windows(2).all(|w| w[1] <= w[0]));
        }
    }

    #[test]
    fn zero_target_is_trivial() {
        let net = diamond();
        let targets = vec![DemandMatrix::zeros(4)];
        let fit = SoftminOptimizer::default().fit(&net, &targets).unwrap();
        assert_eq!(fit.utilization, 0.0);
    }

    #[test]
    fn evaluator_matches_direct_flow() {
        let net = diamond();
        let w = EdgeWeights::new(&net, vec![1.0, 2.0, 0.5, 1.5, 1.0, 3.0, 0.2]).unwrap();
        let mut raw = vec![0.0; 16];
        raw[3] = 2.0;
        raw[4 + 3] = 1.0;
        raw[2 * 4 + 1] = 0.5;
        let dm = DemandMatrix::from_vec(4, raw).unwrap();
        let targets = vec![dm.clone(), dm.scaled(2.0)];
        let eval = SoftminEvaluator::new(&net, &targets, 2.0);
        let loads = eval.edge_loads(&w).unwrap();
        let direct = softmin_ratios(&net, &w, 2.0).induce_flow(&net, &dm).unwrap();
        for e in 0..net.edge_count() {
            assert!((loads[0][e] - direct.edge_flow()[e]).abs() < 1e-12);
            assert!((loads[1][e] - 2.0 * direct.edge_flow()[e]).abs() < 1e-12);
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let net = diamond();
        let mut raw = vec![0.0; 16];
        raw[3] = 1.0;
        raw[4 + 2] = 0.7;
        let targets = vec![DemandMatrix::from_vec(4, raw).unwrap()];
        let a = optimize_softmin_weights(&net, &targets, 2.0, 30, 9).unwrap();
        let b = optimize_softmin_weights(&net, &targets, 2.0, 30, 9).unwrap();
        assert_eq!(a, b);
    }
}
