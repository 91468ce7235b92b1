//! Next-demand prediction with a nonlinear-autoregressive (NAR) model
//! `Σ αᵢ·D⁽ⁱ⁾ + β` over the `k` most recent demand matrices.

use std::fmt::Write as _;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::net::Network;
use crate::oracle::SoftminOptimizer;
use crate::rng::rng;
use crate::routing::{softmin_ratios, DestStrategy};
use crate::traffic::{DemandMatrix, DmSequence};

const DIVERGED: f64 = 1e12;

/// Common surface for next-demand predictors.
pub trait Predictor {
    fn history_len(&self) -> usize;

    /// Raw prediction; may contain negative entries.
    fn predict(&self, history: &[DemandMatrix]) -> Result<Vec<f64>>;

    fn fit(&mut self, data: &SlDataset, cfg: &NarTrainer) -> Result<LossCurve>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct NarModel {
    pub k: usize,
    pub n: usize,
    pub alpha: Vec<f64>,
    /// n×n, row-major
    pub beta: Vec<f64>,
}

impl NarModel {
    pub fn zeros(k: usize, n: usize) -> Self {
        assert!(k >= 1);
        NarModel {
            k,
            n,
            alpha: vec![0.0; k],
            beta: vec![0.0; n * n],
        }
    }

    /// Mean over `windows` of ‖prediction − truth‖²_F and its gradient with
    /// respect to `(alpha, beta)`.
    pub fn loss_and_grad(&self, windows: &[Window<'_>]) -> (f64, Vec<f64>, Vec<f64>) {
        let mut ga = vec![0.0; self.k];
        let mut gb = vec![0.0; self.n * self.n];
        let mut loss = 0.0;
        for w in windows {
            let resid = self.residual(&w.history, w.target);
            loss += resid.iter().map(|r| r * r).sum::<f64>();
            for (i, h) in w.history.iter().enumerate() {
                ga[i] += 2.0 * dot(&resid, h.as_slice());
            }
            for (g, r) in gb.iter_mut().zip(&resid) {
                *g += 2.0 * r;
            }
        }
        let c = 1.0 / windows.len() as f64;
        ga.iter_mut().for_each(|g| *g *= c);
        gb.iter_mut().for_each(|g| *g *= c);
        (loss * c, ga, gb)
    }

    fn residual(&self, history: &[&DemandMatrix], truth: &DemandMatrix) -> Vec<f64> {
        let mut out = self.beta.clone();
        for (a, h) in self.alpha.iter().zip(history) {
            for (o, v) in out.iter_mut().zip(h.as_slice()) {
                *o += a * v;
            }
        }
        for (o, t) in out.iter_mut().zip(truth.as_slice()) {
            *o -= t;
        }
        out
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        writeln!(out, "k {}", self.k).unwrap();
        writeln!(out, "n {}", self.n).unwrap();
        writeln!(out, "alpha {}", join(&self.alpha)).unwrap();
        writeln!(out, "beta").unwrap();
        for row in self.beta.chunks(self.n) {
            writeln!(out, "{}", join(row)).unwrap();
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        let mut lines = text.lines();
        let mut field = |name: &str| -> Result<String> {
            let line = lines.next().ok_or_else(|| bad(&format!("missing `{name}`")))?;
            line.strip_prefix(name)
                .map(|s| s.trim().to_string())
                .ok_or_else(|| bad(&format!("expected `{name}`, found `{line}`")))
        };
        let k: usize = field("k")?.parse().map_err(|_| bad("bad k"))?;
        let n: usize = field("n")?.parse().map_err(|_| bad("bad n"))?;
        let alpha = parse_row(&field("alpha")?)?;
        field("beta")?;
        let mut beta = Vec::with_capacity(n * n);
        for line in lines.filter(|l| !l.trim().is_empty()) {
            beta.extend(parse_row(line)?);
        }
        if k == 0 || alpha.len() != k || beta.len() != n * n {
            return Err(bad("dimensions do not match header"));
        }
        Ok(NarModel { k, n, alpha, beta })
    }
}

fn join(xs: &[f64]) -> String {
    xs.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

fn parse_row(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|f| {
            f.trim()
                .parse::<f64>()
                .map_err(|_| Error::Checkpoint(format!("bad number `{f}`")))
        })
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn nar_predict(model: &NarModel, history: &[DemandMatrix]) -> Result<Vec<f64>> {
    if history.len() != model.k {
        return Err(Error::Dimension {
            expected: model.k,
            got: history.len(),
        });
    }
    if let Some(h) = history.iter().find(|h| h.n() != model.n) {
        return Err(Error::Dimension {
            expected: model.n,
            got: h.n(),
        });
    }
    let mut out = model.beta.clone();
    for (a, h) in model.alpha.iter().zip(history) {
        for (o, v) in out.iter_mut().zip(h.as_slice()) {
            *o += a * v;
        }
    }
    Ok(out)
}

/// ‖pred − truth‖_F.
pub fn frobenius_loss(pred: &[f64], truth: &DemandMatrix) -> f64 {
    assert_eq!(pred.len(), truth.as_slice().len(), "shape mismatch");
    pred.iter()
        .zip(truth.as_slice())
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        .sqrt()
}

/// One supervised example: `k` consecutive matrices and the one that follows.
#[derive(Debug, Clone)]
pub struct Window<'a> {
    pub history: Vec<&'a DemandMatrix>,
    pub target: &'a DemandMatrix,
}

#[derive(Debug, Clone)]
pub struct SlDataset {
    pub train: Vec<DmSequence>,
    pub test: Vec<DmSequence>,
    pub k: usize,
}

impl SlDataset {
    pub fn new(train: Vec<DmSequence>, test: Vec<DmSequence>, k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::Spec("history length k must be at least 1".into()));
        }
        let n = train
            .first()
            .ok_or_else(|| Error::Spec("empty training set".into()))?
            .n();
        for s in train.iter().chain(&test) {
            if s.len() <= k {
                return Err(Error::Spec(format!(
                    "sequence of length {} is too short for k = {k}",
                    s.len()
                )));
            }
            if s.n() != n {
                return Err(Error::Dimension { expected: n, got: s.n() });
            }
        }
        Ok(SlDataset { train, test, k })
    }

    pub fn n(&self) -> usize {
        self.train[0].n()
    }

    pub fn train_windows(&self) -> Vec<Window<'_>> {
        windows(&self.train, self.k)
    }

    pub fn test_windows(&self) -> Vec<Window<'_>> {
        windows(&self.test, self.k)
    }
}

pub fn windows(seqs: &[DmSequence], k: usize) -> Vec<Window<'_>> {
    seqs.iter()
        .flat_map(|s| {
            (k..s.len()).map(move |t| Window {
                history: s.epochs[t - k..t].iter().collect(),
                target: &s.epochs[t],
            })
        })
        .collect()
}

/// Mean Frobenius distance between prediction and truth over `windows`.
pub fn mean_loss(model: &NarModel, windows: &[Window<'_>]) -> f64 {
    if windows.is_empty() {
        return 0.0;
    }
    windows
        .iter()
        .map(|w| {
            let r = model.residual(&w.history, w.target);
            dot(&r, &r).sqrt()
        })
        .sum::<f64>()
        / windows.len() as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct NarTrainer {
    pub epochs: usize,
    pub lr: f64,
    /// Windows per gradient step; `None` means full batch.
    pub batch_size: Option<usize>,
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for NarTrainer {
    fn default() -> Self {
        NarTrainer {
            epochs: 2000,
            lr: 1e-3,
            batch_size: Some(1),
            clip_norm: 10.0,
            seed: 0,
        }
    }
}

/// Per-learning-epoch mean Frobenius distance. Index 0 is the untrained model.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LossCurve {
    pub train: Vec<f64>,
    pub test: Vec<f64>,
}

impl Predictor for NarModel {
    fn history_len(&self) -> usize {
        self.k
    }

    fn predict(&self, history: &[DemandMatrix]) -> Result<Vec<f64>> {
        nar_predict(self, history)
    }

    /// Gradient descent on the mean squared Frobenius loss. Data are divided
    /// by their RMS entry during optimization; `beta` is stored in original units.
    fn fit(&mut self, data: &SlDataset, cfg: &NarTrainer) -> Result<LossCurve> {
        if self.k != data.k || self.n != data.n() {
            return Err(Error::Dimension {
                expected: self.k * self.n,
                got: data.k * data.n(),
            });
        }
        let train = data.train_windows();
        let test = data.test_windows();
        let sq: f64 = data
            .train
            .iter()
            .flat_map(|s| &s.epochs)
            .map(|d| dot(d.as_slice(), d.as_slice()))
            .sum();
        let count = data.train.iter().map(|s| s.len()).sum::<usize>() * self.n * self.n;
        let scale = (sq / count as f64).sqrt();
        let scale = if scale > 0.0 { scale } else { 1.0 };

        let mut curve = LossCurve::default();
        curve.train.push(mean_loss(self, &train));
        curve.test.push(mean_loss(self, &test));

        let mut order: Vec<usize> = (0..train.len()).collect();
        let batch = cfg.batch_size.unwrap_or(train.len()).max(1);
        let mut r = rng(cfg.seed);
        // work in normalized units: alpha unchanged, beta / scale, data / scale
        let mut scaled = self.clone();
        scaled.beta.iter_mut().for_each(|b| *b /= scale);
        let scaled_data: Vec<(Vec<DemandMatrix>, DemandMatrix)> = train
            .iter()
            .map(|w| {
                (
                    w.history.iter().map(|h| h.scaled(1.0 / scale)).collect(),
                    w.target.scaled(1.0 / scale),
                )
            })
            .collect();
        for epoch in 1..=cfg.epochs {
            if cfg.batch_size.is_some() {
                order.shuffle(&mut r);
            }
            for chunk in order.chunks(batch) {
                let ws: Vec<Window<'_>> = chunk
                    .iter()
                    .map(|&i| Window {
                        history: scaled_data[i].0.iter().collect(),
                        target: &scaled_data[i].1,
                    })
                    .collect();
                let (loss, mut ga, mut gb) = scaled.loss_and_grad(&ws);
                if !(loss.is_finite() && loss < DIVERGED) {
                    return Err(Error::Diverged {
                        epoch,
                        msg: format!("training loss {loss}"),
                    });
                }
                let gnorm = (dot(&ga, &ga) + dot(&gb, &gb)).sqrt();
                if gnorm > cfg.clip_norm {
                    let c = cfg.clip_norm / gnorm;
                    ga.iter_mut().for_each(|g| *g *= c);
                    gb.iter_mut().for_each(|g| *g *= c);
                }
                for (a, g) in scaled.alpha.iter_mut().zip(&ga) {
                    *a -= cfg.lr * g;
                }
                for (b, g) in scaled.beta.iter_mut().zip(&gb) {
                    *b -= cfg.lr * g;
                }
            }
            self.alpha.clone_from(&scaled.alpha);
            self.beta = scaled.beta.iter().map(|b| b * scale).collect();
            let train_loss = mean_loss(self, &train);
            if !(train_loss.is_finite() && train_loss < DIVERGED) {
                return Err(Error::Diverged {
                    epoch,
                    msg: format!("training loss {train_loss}"),
                });
            }
            curve.train.push(train_loss);
            curve.test.push(mean_loss(self, &test));
        }
        Ok(curve)
    }
}

/// Fits a fresh zero-initialized NAR model.
pub fn nar_fit(data: &SlDataset, epochs: usize, lr: f64, seed: u64) -> Result<(NarModel, LossCurve)> {
    let cfg = NarTrainer {
        epochs,
        lr,
        seed,
        ..NarTrainer::default()
    };
    let mut model = NarModel::zeros(data.k, data.n());
    let curve = model.fit(data, &cfg)?;
    Ok((model, curve))
}

/// Predicts the next demand matrix, projects it onto valid demands and
/// returns softmin routing optimized for it.
pub fn predict_then_route(
    net: &Network,
    model: &dyn Predictor,
    history: &[DemandMatrix],
    optimizer: &SoftminOptimizer,
) -> Result<DestStrategy> {
    let raw = model.predict(history)?;
    let n = net.node_count();
    if raw.len() != n * n {
        return Err(Error::Dimension {
            expected: n * n,
            got: raw.len(),
        });
    }
    let predicted = DemandMatrix::clamped(n, &raw);
    let fit = optimizer.fit(net, std::slice::from_ref(&predicted))?;
    Ok(softmin_ratios(net, &fit.weights, optimizer.gamma))
}
