//! Routing as a reinforcement-learning problem: the state is the recent
//! demand history, the action is a routing configuration, and the reward is
//! `-u/OPT` for the demand that is then revealed.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::{EdgeWeights, Network};
use crate::oracle::optimal_congestion;
use crate::rng::{derive, rng};
use crate::routing::{max_link_utilization, softmin_ratios, strategy_from_logits, DestStrategy};
use crate::traffic::{DemandMatrix, DmSequence};

/// Floor added to softplus outputs in softmin mode.
pub const WEIGHT_EPS: f64 = 1e-3;
/// Direct-mode logits are clipped to this magnitude so no ratio underflows to zero.
pub const LOGIT_BOUND: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActionMode {
    Direct,
    Softmin,
}

impl ActionMode {
    pub fn name(self) -> &'static str {
        match self {
            ActionMode::Direct => "direct",
            ActionMode::Softmin => "softmin",
        }
    }
}

pub fn action_dim(net: &Network, mode: ActionMode) -> usize {
    match mode {
        ActionMode::Softmin => net.edge_count(),
        ActionMode::Direct => net.edge_count() * net.node_count(),
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// Maps any finite action vector to a valid destination-based strategy.
pub fn decode_action(net: &Network, action: &[f64], mode: ActionMode, gamma: f64) -> Result<DestStrategy> {
    let dim = action_dim(net, mode);
    if action.len() != dim {
        return Err(Error::Dimension { expected: dim, got: action.len() });
    }
    if action.iter().any(|a| !a.is_finite()) {
        return Err(Error::Strategy("non-finite action".into()));
    }
    match mode {
        ActionMode::Direct => {
            let logits: Vec<f64> = action.iter().map(|a| a.clamp(-LOGIT_BOUND, LOGIT_BOUND)).collect();
            strategy_from_logits(net, &logits)
        }
        ActionMode::Softmin => {
            let w = action.iter().map(|&a| WEIGHT_EPS + softplus(a)).collect();
            Ok(softmin_ratios(net, &EdgeWeights::new(net, w)?, gamma))
        }
    }
}

/// `-u/opt`, with the all-zero demand (`u = opt = 0`) scored as `-1`.
pub fn reward(u: f64, opt: f64) -> Result<f64> {
    if opt > 0.0 {
        Ok(-u / opt)
    } else if u == 0.0 {
        Ok(-1.0)
    } else {
        Err(Error::Demand(format!("optimum is zero but utilization is {u}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvState {
    /// The `k` most recent matrices, oldest first, each divided by the
    /// largest link capacity and flattened.
    pub history: Vec<f64>,
    /// Index of the demand matrix the next action is scored against.
    pub epoch_index: usize,
    pub k: usize,
}

impl EnvState {
    pub fn at(net: &Network, seq: &DmSequence, k: usize, t: usize) -> Result<Self> {
        if k == 0 || t < k || t > seq.len() {
            return Err(Error::Spec(format!(
                "no {k}-long history ends before epoch {t} of a {}-epoch sequence",
                seq.len()
            )));
        }
        let scale = 1.0 / net.max_capacity();
        let history = seq.epochs[t - k..t]
            .iter()
            .flat_map(|d| d.as_slice().iter().map(move |v| v * scale))
            .collect();
        Ok(EnvState { history, epoch_index: t, k })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub state: EnvState,
    pub action: Vec<f64>,
    pub reward: f64,
    pub u: f64,
    pub opt: f64,
}

fn score(net: &Network, strat: &DestStrategy, dm: &DemandMatrix) -> Result<f64> {
    Ok(max_link_utilization(net, &strat.induce_flow(net, dm)?))
}

/// Routes the demand at `state.epoch_index` with the decoded action and
/// advances the history by one matrix.
pub fn env_step(
    net: &Network,
    seq: &DmSequence,
    state: &EnvState,
    action: &[f64],
    mode: ActionMode,
    gamma: f64,
) -> Result<(EnvState, StepRecord)> {
    let t = state.epoch_index;
    let dm = seq
        .epochs
        .get(t)
        .ok_or_else(|| Error::Spec(format!("epoch {t} is past the end of the sequence")))?;
    let opt = optimal_congestion(net, dm)?.theta;
    let rec = step_with_opt(net, dm, state, action, mode, gamma, opt)?;
    let next = EnvState::at(net, seq, state.k, t + 1)?;
    Ok((next, rec))
}

fn step_with_opt(
    net: &Network,
    dm: &DemandMatrix,
    state: &EnvState,
    action: &[f64],
    mode: ActionMode,
    gamma: f64,
    opt: f64,
) -> Result<StepRecord> {
    let strat = decode_action(net, action, mode, gamma)?;
    let u = score(net, &strat, dm)?;
    Ok(StepRecord {
        state: state.clone(),
        action: action.to_vec(),
        reward: reward(u, opt)?,
        u,
        opt,
    })
}

/// Optimal congestion for every epoch of every sequence.
pub fn opt_table(net: &Network, seqs: &[DmSequence]) -> Result<Vec<Vec<f64>>> {
    seqs.iter()
        .map(|s| {
            s.epochs
                .par_iter()
                .map(|d| optimal_congestion(net, d).map(|o| o.theta))
                .collect()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub inputs: usize,
    pub outputs: usize,
    /// outputs × inputs, row-major
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl Layer {
    fn apply(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend(self.w.chunks(self.inputs).zip(&self.b).map(|(row, b)| {
            b + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()
        }));
    }
}

/// Gaussian policy whose mean is a fully-connected tanh network.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    pub mode: ActionMode,
    pub k: usize,
    pub layers: Vec<Layer>,
    pub exploration_stddev: f64,
}

impl PolicyParams {
    /// Glorot-uniform hidden layers; the output layer starts near zero so the
    /// initial mean action is the (zero) bias.
    pub fn init(mode: ActionMode, k: usize, sizes: &[usize], exploration_stddev: f64, seed: u64) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::Spec(format!("bad layer sizes {sizes:?}")));
        }
        if !(exploration_stddev > 0.0 && exploration_stddev.is_finite()) {
            return Err(Error::Spec("exploration stddev must be positive".into()));
        }
        let mut r = rng(seed);
        let last = sizes.len() - 2;
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(i, io)| {
                let (inputs, outputs) = (io[0], io[1]);
                let mut limit = (6.0 / (inputs + outputs) as f64).sqrt();
                if i == last {
                    limit *= 0.01;
                }
                Layer {
                    inputs,
                    outputs,
                    w: (0..inputs * outputs).map(|_| r.random_range(-limit..=limit)).collect(),
                    b: vec![0.0; outputs],
                }
            })
            .collect();
        Ok(PolicyParams { mode, k, layers, exploration_stddev })
    }

    pub fn for_network(net: &Network, cfg: &TrainerConfig) -> Result<Self> {
        let n = net.node_count();
        let mut sizes = vec![cfg.k * n * n];
        sizes.extend(&cfg.hidden);
        sizes.push(action_dim(net, cfg.mode));
        Self::init(cfg.mode, cfg.k, &sizes, cfg.exploration_stddev, derive(cfg.seed, 0x1417))
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().outputs
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    /// Parameters in the flat order used by gradients.
    pub fn flat(&self) -> Vec<f64> {
        self.layers.iter().flat_map(|l| l.w.iter().chain(&l.b)).copied().collect()
    }

    fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers.iter_mut().flat_map(|l| l.w.iter_mut().chain(l.b.iter_mut()))
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| l.w.iter().chain(&l.b).all(|v| v.is_finite()))
    }

    /// Activations of every layer; the last entry is the mean action.
    fn activations(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let mut acts = vec![x.to_vec()];
        for (i, layer) in self.layers.iter().enumerate() {
            let mut out = Vec::with_capacity(layer.outputs);
            layer.apply(acts.last().unwrap(), &mut out);
            if i + 1 < self.layers.len() {
                out.iter_mut().for_each(|v| *v = v.tanh());
            }
            acts.push(out);
        }
        acts
    }

    pub fn mean_action(&self, state: &EnvState) -> Result<Vec<f64>> {
        self.check_input(state)?;
        Ok(self.activations(&state.history).pop().unwrap())
    }

    fn check_input(&self, state: &EnvState) -> Result<()> {
        if state.history.len() != self.input_dim() {
            return Err(Error::Dimension { expected: self.input_dim(), got: state.history.len() });
        }
        Ok(())
    }

    /// Accumulates `Σ dout·∂mean/∂θ` into `grad`.
    fn backward(&self, acts: &[Vec<f64>], dout: &[f64], grad: &mut [f64]) {
        let mut offsets = Vec::with_capacity(self.layers.len());
        let mut off = 0;
        for l in &self.layers {
            offsets.push(off);
            off += l.w.len() + l.b.len();
        }
        let mut delta = dout.to_vec();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let input = &acts[i];
            let (gw, gb) = grad[offsets[i]..offsets[i] + layer.w.len() + layer.b.len()].split_at_mut(layer.w.len());
            for (o, &d) in delta.iter().enumerate() {
                if d != 0.0 {
                    for (g, x) in gw[o * layer.inputs..(o + 1) * layer.inputs].iter_mut().zip(input) {
                        *g += d * x;
                    }
                }
                gb[o] += d;
            }
            if i > 0 {
                let mut prev = vec![0.0; layer.inputs];
                for (o, &d) in delta.iter().enumerate() {
                    for (p, w) in prev.iter_mut().zip(&layer.w[o * layer.inputs..(o + 1) * layer.inputs]) {
                        *p += d * w;
                    }
                }
                for (p, a) in prev.iter_mut().zip(input) {
                    *p *= 1.0 - a * a;
                }
                delta = prev;
            }
        }
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        writeln!(out, "policy").unwrap();
        writeln!(out, "mode {}", self.mode.name()).unwrap();
        writeln!(out, "k {}", self.k).unwrap();
        writeln!(out, "stddev {}", self.exploration_stddev).unwrap();
        writeln!(out, "layers {}", self.layers.len()).unwrap();
        for l in &self.layers {
            writeln!(out, "layer {} {}", l.outputs, l.inputs).unwrap();
            for row in l.w.chunks(l.inputs) {
                writeln!(out, "{}", join(row)).unwrap();
            }
            writeln!(out, "{}", join(&l.b)).unwrap();
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let bad = |m: String| Error::Checkpoint(m);
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let mut next = || lines.next().ok_or_else(|| bad("unexpected end of checkpoint".into()));
        if next()?.trim() != "policy" {
            return Err(bad("missing `policy` header".into()));
        }
        let field = |line: &str, name: &str| -> Result<String> {
            line.strip_prefix(name)
                .map(|s| s.trim().to_string())
                .ok_or_else(|| bad(format!("expected `{name}`, found `{line}`")))
        };
        let mode = match field(next()?, "mode")?.as_str() {
            "direct" => ActionMode::Direct,
            "softmin" => ActionMode::Softmin,
            other => return Err(bad(format!("unknown mode `{other}`"))),
        };
        let k: usize = field(next()?, "k")?.parse().map_err(|_| bad("bad k".into()))?;
        let exploration_stddev: f64 = field(next()?, "stddev")?.parse().map_err(|_| bad("bad stddev".into()))?;
        let count: usize = field(next()?, "layers")?.parse().map_err(|_| bad("bad layer count".into()))?;
        let mut layers = Vec::with_capacity(count);
        for _ in 0..count {
            let dims: Vec<usize> = field(next()?, "layer")?
                .split_whitespace()
                .map(|v| v.parse().map_err(|_| bad(format!("bad layer size `{v}`"))))
                .collect::<Result<_>>()?;
            let [outputs, inputs] = dims[..] else {
                return Err(bad("layer line needs two sizes".into()));
            };
            let mut w = Vec::with_capacity(outputs * inputs);
            for _ in 0..outputs {
                let row = parse_row(next()?)?;
                if row.len() != inputs {
                    return Err(bad(format!("row has {} values, expected {inputs}", row.len())));
                }
                w.extend(row);
            }
            let b = parse_row(next()?)?;
            if b.len() != outputs {
                return Err(bad(format!("bias has {} values, expected {outputs}", b.len())));
            }
            layers.push(Layer { inputs, outputs, w, b });
        }
        if layers.is_empty() || layers.windows(2).any(|p| p[0].outputs != p[1].inputs) {
            return Err(bad("layer sizes do not chain".into()));
        }
        Ok(PolicyParams { mode, k, layers, exploration_stddev })
    }
}

fn join(xs: &[f64]) -> String {
    xs.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

fn parse_row(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|f| f.trim().parse::<f64>().map_err(|_| Error::Checkpoint(format!("bad number `{f}`"))))
        .collect()
}

/// Mean action and a Gaussian sample around it drawn from `seed`.
pub fn policy_forward(params: &PolicyParams, state: &EnvState, seed: u64) -> Result<(Vec<f64>, Vec<f64>)> {
    let mean = params.mean_action(state)?;
    let sample = sample_action(&mean, params.exploration_stddev, seed);
    Ok((mean, sample))
}

fn sample_action(mean: &[f64], stddev: f64, seed: u64) -> Vec<f64> {
    let mut r = rng(seed);
    mean.iter()
        .map(|m| m + stddev * r.sample::<f64, _>(StandardNormal))
        .collect()
}

/// Gradient of `log π(action | state)` with respect to the flat parameters.
pub fn log_prob_gradient(params: &PolicyParams, state: &EnvState, action: &[f64]) -> Result<Vec<f64>> {
    params.check_input(state)?;
    let acts = params.activations(&state.history);
    let var = params.exploration_stddev * params.exploration_stddev;
    let dout: Vec<f64> = action.iter().zip(acts.last().unwrap()).map(|(a, m)| (a - m) / var).collect();
    let mut grad = vec![0.0; params.num_params()];
    params.backward(&acts, &dout, &mut grad);
    Ok(grad)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerConfig {
    pub mode: ActionMode,
    pub k: usize,
    /// Discount applied to rewards within an episode.
    pub discount: f64,
    pub learning_rate: f64,
    /// Sampled actions per window.
    pub rollouts: usize,
    pub epochs: usize,
    /// Consecutive windows per episode.
    pub horizon: usize,
    /// Episodes per parameter update.
    pub batch_episodes: usize,
    pub clip_norm: f64,
    pub hidden: Vec<usize>,
    pub exploration_stddev: f64,
    pub softmin_gamma: f64,
    pub parallel: bool,
    pub seed: u64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            mode: ActionMode::Softmin,
            k: 10,
            discount: 0.99,
            learning_rate: 1e-3,
            rollouts: 8,
            epochs: 50,
            horizon: 1,
            batch_episodes: 10,
            clip_norm: 1.0,
            hidden: vec![128, 64],
            exploration_stddev: 0.1,
            softmin_gamma: 2.0,
            parallel: true,
            seed: 0,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64| v > 0.0 && v.is_finite();
        if !(self.discount > 0.0 && self.discount <= 1.0) {
            return Err(Error::Spec(format!("discount {} outside (0, 1]", self.discount)));
        }
        // learning rate 0 is allowed: it freezes the parameters
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Spec("learning rate must be non-negative".into()));
        }
        if self.k == 0 || self.rollouts == 0 || self.horizon == 0 || self.batch_episodes == 0 {
            return Err(Error::Spec("k, rollouts, horizon and batch_episodes must be positive".into()));
        }
        if !positive(self.clip_norm) || !positive(self.exploration_stddev) || !positive(self.softmin_gamma) {
            return Err(Error::Spec("clip_norm, exploration_stddev and softmin_gamma must be positive".into()));
        }
        if self.hidden.contains(&0) {
            return Err(Error::Spec("hidden layer sizes must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurvePoint {
    pub epoch: usize,
    pub mean_reward: f64,
    pub mean_ratio: f64,
}

struct Episode {
    seq: usize,
    start: usize,
    len: usize,
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize) -> Self {
        Adam { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    /// Ascent step along `grad`.
    fn step(&mut self, params: &mut PolicyParams, grad: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        for (((p, g), m), v) in params.params_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *m = Self::B1 * *m + (1.0 - Self::B1) * g;
            *v = Self::B2 * *v + (1.0 - Self::B2) * g * g;
            *p += lr * (*m / c1) / ((*v / c2).sqrt() + Self::EPS);
        }
    }
}

struct Sampled {
    grad: Vec<f64>,
    reward_sum: f64,
    ratio_sum: f64,
    steps: usize,
}

/// Samples `cfg.rollouts` trajectories of one episode and returns the
/// REINFORCE gradient with a per-step mean-return baseline.
fn run_episode(
    net: &Network,
    seqs: &[DmSequence],
    opt: &[Vec<f64>],
    params: &PolicyParams,
    cfg: &TrainerConfig,
    ep: &Episode,
    seed: u64,
) -> Result<Sampled> {
    let seq = &seqs[ep.seq];
    let var = params.exploration_stddev * params.exploration_stddev;
    let mut acts = Vec::with_capacity(ep.len);
    // actions[j][r], rewards[j][r]
    let mut actions = Vec::with_capacity(ep.len);
    let mut rewards = Vec::with_capacity(ep.len);
    let mut out = Sampled { grad: vec![0.0; params.num_params()], reward_sum: 0.0, ratio_sum: 0.0, steps: 0 };
    for j in 0..ep.len {
        let t = ep.start + j;
        let state = EnvState::at(net, seq, cfg.k, t)?;
        let a = params.activations(&state.history);
        let mean = a.last().unwrap();
        let mut step_actions = Vec::with_capacity(cfg.rollouts);
        let mut step_rewards = Vec::with_capacity(cfg.rollouts);
        for r in 0..cfg.rollouts {
            let action = sample_action(mean, params.exploration_stddev, derive(derive(seed, r as u64), j as u64));
            let rec = step_with_opt(net, &seq.epochs[t], &state, &action, cfg.mode, cfg.softmin_gamma, opt[ep.seq][t])?;
            out.reward_sum += rec.reward;
            out.ratio_sum += -rec.reward;
            out.steps += 1;
            step_actions.push(action);
            step_rewards.push(rec.reward);
        }
        acts.push(a);
        actions.push(step_actions);
        rewards.push(step_rewards);
    }
    // discounted returns-to-go, per rollout
    let mut returns = rewards.clone();
    for j in (0..ep.len.saturating_sub(1)).rev() {
        for r in 0..cfg.rollouts {
            returns[j][r] += cfg.discount * returns[j + 1][r];
        }
    }
    for j in 0..ep.len {
        let baseline = returns[j].iter().sum::<f64>() / cfg.rollouts as f64;
        let mean = acts[j].last().unwrap();
        let mut dout = vec![0.0; mean.len()];
        for r in 0..cfg.rollouts {
            let adv = returns[j][r] - baseline;
            if adv != 0.0 {
                for ((d, a), m) in dout.iter_mut().zip(&actions[j][r]).zip(mean) {
                    *d += adv * (a - m) / var;
                }
            }
        }
        params.backward(&acts[j], &dout, &mut out.grad);
    }
    Ok(out)
}

/// Gaussian-policy REINFORCE with Adam and global-norm gradient clipping.
/// One learning epoch visits every episode once, in a seeded order.
pub fn train(net: &Network, seqs: &[DmSequence], cfg: &TrainerConfig) -> Result<(PolicyParams, Vec<CurvePoint>)> {
    let params = PolicyParams::for_network(net, cfg)?;
    train_from(net, seqs, cfg, params)
}

pub fn train_from(
    net: &Network,
    seqs: &[DmSequence],
    cfg: &TrainerConfig,
    mut params: PolicyParams,
) -> Result<(PolicyParams, Vec<CurvePoint>)> {
    cfg.validate()?;
    let n = net.node_count();
    if params.input_dim() != cfg.k * n * n || params.output_dim() != action_dim(net, cfg.mode) {
        return Err(Error::Dimension { expected: cfg.k * n * n, got: params.input_dim() });
    }
    let mut episodes = Vec::new();
    for (i, s) in seqs.iter().enumerate() {
        if s.n() != n {
            return Err(Error::Dimension { expected: n, got: s.n() });
        }
        let mut start = cfg.k;
        while start < s.len() {
            let len = cfg.horizon.min(s.len() - start);
            episodes.push(Episode { seq: i, start, len });
            start += len;
        }
    }
    if episodes.is_empty() {
        return Err(Error::Spec(format!("no sequence is longer than k = {}", cfg.k)));
    }
    let opt = opt_table(net, seqs)?;
    let mut adam = Adam::new(params.num_params());
    let mut order: Vec<usize> = (0..episodes.len()).collect();
    let mut curve = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let epoch_seed = derive(cfg.seed, epoch as u64);
        order.shuffle(&mut rng(epoch_seed));
        let (mut reward_sum, mut ratio_sum, mut steps) = (0.0, 0.0, 0usize);
        for batch in order.chunks(cfg.batch_episodes) {
            let job = |&i: &usize| {
                run_episode(net, seqs, &opt, &params, cfg, &episodes[i], derive(epoch_seed, i as u64))
            };
            let results: Vec<Result<Sampled>> = if cfg.parallel {
                batch.par_iter().map(job).collect()
            } else {
                batch.iter().map(job).collect()
            };
            let mut grad = vec![0.0; params.num_params()];
            let mut batch_steps = 0;
            for res in results {
                let s = res?;
                for (g, v) in grad.iter_mut().zip(&s.grad) {
                    *g += v;
                }
                reward_sum += s.reward_sum;
                ratio_sum += s.ratio_sum;
                batch_steps += s.steps;
            }
            steps += batch_steps;
            let scale = 1.0 / batch_steps as f64;
            grad.iter_mut().for_each(|g| *g *= scale);
            let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
            if !norm.is_finite() {
                return Err(Error::Diverged { epoch, msg: "non-finite policy gradient".into() });
            }
            if norm > cfg.clip_norm {
                let c = cfg.clip_norm / norm;
                grad.iter_mut().for_each(|g| *g *= c);
            }
            if cfg.learning_rate > 0.0 {
                adam.step(&mut params, &grad, cfg.learning_rate);
            }
            if !params.is_finite() {
                return Err(Error::Diverged { epoch, msg: "non-finite policy parameters".into() });
            }
        }
        curve.push(CurvePoint {
            epoch,
            mean_reward: reward_sum / steps as f64,
            mean_ratio: ratio_sum / steps as f64,
        });
    }
    Ok((params, curve))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub sequence: usize,
    pub epoch: usize,
    pub utilization: f64,
    pub opt: f64,
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub rows: Vec<EvalRow>,
    pub mean_ratio: f64,
}

/// Scores the noise-free mean action on every window of every sequence.
pub fn evaluate(net: &Network, params: &PolicyParams, seqs: &[DmSequence], gamma: f64) -> Result<Evaluation> {
    let opt = opt_table(net, seqs)?;
    evaluate_with_opt(net, params, seqs, gamma, &opt)
}

pub fn evaluate_with_opt(
    net: &Network,
    params: &PolicyParams,
    seqs: &[DmSequence],
    gamma: f64,
    opt: &[Vec<f64>],
) -> Result<Evaluation> {
    let k = params.k;
    let jobs: Vec<(usize, usize)> = seqs
        .iter()
        .enumerate()
        .flat_map(|(i, s)| (k..s.len()).map(move |t| (i, t)))
        .collect();
    let rows = jobs
        .par_iter()
        .map(|&(i, t)| {
            let state = EnvState::at(net, &seqs[i], k, t)?;
            let action = params.mean_action(&state)?;
            let rec = step_with_opt(net, &seqs[i].epochs[t], &state, &action, params.mode, gamma, opt[i][t])?;
            Ok(EvalRow { sequence: i, epoch: t, utilization: rec.u, opt: rec.opt, ratio: -rec.reward })
        })
        .collect::<Result<Vec<_>>>()?;
    let mean_ratio = if rows.is_empty() {
        0.0
    } else {
        rows.iter().map(|r| r.ratio).sum::<f64>() / rows.len() as f64
    };
    Ok(Evaluation { rows, mean_ratio })
}

/// CSV with header `epoch,mean_reward,mean_ratio`.
pub fn curve_csv(curve: &[CurvePoint]) -> String {
    let mut out = String::from("epoch,mean_reward,mean_ratio\n");
    for p in curve {
        writeln!(out, "{},{},{}", p.epoch, p.mean_reward, p.mean_ratio).unwrap();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::tests::net_from;

    fn diamond() -> Network {
        net_from(
            4,
            &[
                (0, 1, 1.0),
                (0, 2, 1.0),
                (1, 3, 1.0),
                (2, 3, 1.0),
                (1, 0, 1.0),
                (2, 0, 1.0),
                (3, 1, 1.0),
                (3, 2, 1.0),
            ],
        )
    }

    #[test]
    fn reward_formula() {
        assert_eq!(reward(1.0, 1.0).unwrap(), -1.0);
        assert_eq!(reward(2.0, 1.0).unwrap(), -2.0);
        assert_eq!(reward(0.0, 0.0).unwrap(), -1.0);
        assert!(reward(1.0, 0.0).is_err());
    }

    #[test]
    fn zero_weights_give_bias() {
        let mut p = PolicyParams::init(ActionMode::Softmin, 1, &[4, 3, 2, 2], 0.5, 1).unwrap();
        for l in &mut p.layers {
            l.w.iter_mut().for_each(|w| *w = 0.0);
        }
        p.layers[2].b = vec![0.25, -1.5];
        let state = EnvState { history: vec![1.0, 2.0, 3.0, 4.0], epoch_index: 1, k: 1 };
        assert_eq!(p.mean_action(&state).unwrap(), vec![0.25, -1.5]);
        let (m1, s1) = policy_forward(&p, &state, 9).unwrap();
        let (_, s2) = policy_forward(&p, &state, 9).unwrap();
        assert_eq!(s1, s2);
        assert_ne!(s1, m1);
        p.exploration_stddev = 1e-300;
        let (m, s) = policy_forward(&p, &state, 9).unwrap();
        assert_eq!(m, s);
    }

    #[test]
    fn backprop_matches_finite_differences() {
        let p = PolicyParams::init(ActionMode::Softmin, 1, &[3, 5, 4, 2], 0.7, 4).unwrap();
        // undo the small output init so every layer matters
        let mut p = p;
        p.layers[2].w.iter_mut().for_each(|w| *w *= 100.0);
        let state = EnvState { history: vec![0.3, -0.8, 0.5], epoch_index: 1, k: 1 };
        let action = [0.4, -0.2];
        let logp = |q: &PolicyParams| {
            let m = q.mean_action(&state).unwrap();
            let v = q.exploration_stddev * q.exploration_stddev;
            -action.iter().zip(&m).map(|(a, m)| (a - m) * (a - m)).sum::<f64>() / (2.0 * v)
        };
        let g = log_prob_gradient(&p, &state, &action).unwrap();
        let flat = p.flat();
        for i in 0..flat.len() {
            let mut plus = p.clone();
            let mut minus = p.clone();
            *plus.params_mut().nth(i).unwrap() += 1e-6;
            *minus.params_mut().nth(i).unwrap() -= 1e-6;
            let fd = (logp(&plus) - logp(&minus)) / 2e-6;
            assert!((fd - g[i]).abs() <= 1e-6 * g[i].abs().max(1.0), "param {i}: {fd} vs {}", g[i]);
        }
    }

    #[test]
    fn uniform_softmin_action_on_diamond() {
        let net = diamond();
        let mut raw = vec![0.0; 16];
        raw[3] = 2.0;
        let dm = DemandMatrix::from_vec(4, raw).unwrap();
        let mut seq = crate::traffic::gen_sequence(&crate::traffic::SequenceSpec {
            kind: crate::traffic::SequenceKind::Cyclic,
            n: 4,
            base: crate::traffic::BaseModel::bimodal_default(0.5),
            q: 1,
            p: 1.0,
            length: 3,
            seed: 0,
        })
        .unwrap();
        seq.epochs = vec![dm.clone(), dm.clone(), dm];
        let state = EnvState::at(&net, &seq, 1, 1).unwrap();
        let (next, rec) = env_step(&net, &seq, &state, &[0.0; 8], ActionMode::Softmin, 2.0).unwrap();
        assert_eq!(next.epoch_index, 2);
        // Node 1 forwards a share p = 1/(1+e^{-4w}) to 3 and returns the
        // rest to 0, so each of 0→1, 0→2 carries 1/p and OPT splits 1/1.
        let w = WEIGHT_EPS + std::f64::consts::LN_2;
        let u = 1.0 + (-4.0 * w).exp();
        assert!((rec.u - u).abs() < 1e-9, "{} vs {u}", rec.u);
        assert!((rec.opt - 1.0).abs() < 1e-9);
        assert!((rec.reward + u).abs() < 1e-9);
    }

    #[test]
    fn checkpoint_round_trip() {
        let p = PolicyParams::init(ActionMode::Direct, 2, &[8, 3, 2], 0.3, 5).unwrap();
        assert_eq!(PolicyParams::parse(&p.to_text()).unwrap(), p);
        assert!(PolicyParams::parse("policy\nmode other\n").is_err());
    }
}
