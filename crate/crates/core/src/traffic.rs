//! Demand matrices and the three sequence classes: cyclic, averaged and i.i.d.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::index;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive, rng};

/// n×n nonnegative traffic volumes with a zero diagonal, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct DemandMatrix {
    n: usize,
    data: Vec<f64>,
}

impl DemandMatrix {
    pub fn zeros(n: usize) -> Self {
        DemandMatrix {
            n,
            data: vec![0.0; n * n],
        }
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let n = rows.len();
        let mut data = Vec::with_capacity(n * n);
        for (i, row) in rows.into_iter().enumerate() {
            if row.len() != n {
                return Err(Error::Demand(format!(
                    "row {i} has {} entries, expected {n}",
                    row.len()
                )));
            }
            data.extend(row);
        }
        Self::from_vec(n, data)
    }

    pub fn from_vec(n: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * n {
            return Err(Error::Dimension {
                expected: n * n,
                got: data.len(),
            });
        }
        for i in 0..n {
            for j in 0..n {
                let v = data[i * n + j];
                if !(v.is_finite() && v >= 0.0) {
                    return Err(Error::Demand(format!("entry ({i},{j}) = {v} is not a finite nonnegative value")));
                }
                if i == j && v != 0.0 {
                    return Err(Error::Demand(format!("diagonal entry ({i},{i}) = {v} is nonzero")));
                }
            }
        }
        Ok(DemandMatrix { n, data })
    }

    /// Projects an arbitrary real matrix onto valid demands: negatives and
    /// non-finite values become zero and the diagonal is cleared.
    pub fn clamped(n: usize, raw: &[f64]) -> Self {
        assert_eq!(raw.len(), n * n);
        let mut data: Vec<f64> = raw
            .iter()
            .map(|&v| if v.is_finite() && v > 0.0 { v } else { 0.0 })
            .collect();
        for i in 0..n {
            data[i * n + i] = 0.0;
        }
        DemandMatrix { n, data }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, src: usize, dst: usize) -> f64 {
        self.data[src * self.n + dst]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0)
    }

    pub fn nonzero_count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0.0).count()
    }

    pub fn total(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn scaled(&self, c: f64) -> Self {
        assert!(c >= 0.0 && c.is_finite());
        DemandMatrix {
            n: self.n,
            data: self.data.iter().map(|v| v * c).collect(),
        }
    }

    /// Entrywise mean of a nonempty slice of equally sized matrices.
    pub fn mean(ms: &[&DemandMatrix]) -> Self {
        let n = ms[0].n;
        let mut data = vec![0.0; n * n];
        for m in ms {
            for (acc, v) in data.iter_mut().zip(&m.data) {
                *acc += v;
            }
        }
        let k = ms.len() as f64;
        data.iter_mut().for_each(|v| *v /= k);
        DemandMatrix { n, data }
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for row in self.data.chunks(self.n) {
            let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            writeln!(out, "{}", line.join(",")).unwrap();
        }
        out
    }

    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut rows = Vec::new();
        for (idx, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let row = line
                .split(',')
                .map(|f| {
                    f.trim().parse::<f64>().map_err(|e| Error::Parse {
                        path: origin.to_path_buf(),
                        line: idx + 1,
                        msg: format!("bad value `{f}`: {e}"),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            rows.push(row);
        }
        Self::from_rows(rows)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::parse(&std::fs::read_to_string(path)?, path)
    }
}

/// D(i,j) = total · b_i·b_j / (Σ b)² off the diagonal.
pub fn gravity_dm(n: usize, out_bandwidths: &[f64], total_volume: f64) -> Result<DemandMatrix> {
    if out_bandwidths.len() != n {
        return Err(Error::Dimension {
            expected: n,
            got: out_bandwidths.len(),
        });
    }
    if let Some(b) = out_bandwidths.iter().find(|b| !(b.is_finite() && **b > 0.0)) {
        return Err(Error::Demand(format!("bandwidth {b} is not positive")));
    }
    if !(total_volume.is_finite() && total_volume >= 0.0) {
        return Err(Error::Demand(format!("total volume {total_volume} is negative")));
    }
    let sum: f64 = out_bandwidths.iter().sum();
    let norm = total_volume / (sum * sum);
    let mut data = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            if i != j {
                data[i * n + j] = norm * out_bandwidths[i] * out_bandwidths[j];
            }
        }
    }
    Ok(DemandMatrix { n, data })
}

/// Per-node bandwidths drawn log-uniformly over `decades` orders of magnitude starting at 1.
pub fn log_uniform_bandwidths(n: usize, decades: f64, seed: u64) -> Vec<f64> {
    let mut r = rng(seed);
    (0..n)
        .map(|_| 10f64.powf(r.random_range(0.0..=decades)))
        .collect()
}

fn check_range(name: &str, (lo, hi): (f64, f64)) -> Result<()> {
    if !(lo.is_finite() && hi.is_finite() && 0.0 <= lo && lo <= hi) {
        return Err(Error::Demand(format!("{name} range ({lo},{hi}) is invalid")));
    }
    Ok(())
}

/// Mice/elephant mixture; each ordered pair is an elephant with probability
/// `elephant_fraction` and its volume is uniform on the matching range.
pub fn bimodal_dm(
    n: usize,
    elephant_fraction: f64,
    mice_range: (f64, f64),
    elephant_range: (f64, f64),
    seed: u64,
) -> Result<DemandMatrix> {
    if !(0.0..=1.0).contains(&elephant_fraction) {
        return Err(Error::Demand(format!(
            "elephant fraction {elephant_fraction} outside [0,1]"
        )));
    }
    check_range("mice", mice_range)?;
    check_range("elephant", elephant_range)?;
    if elephant_range.0 < mice_range.1 {
        return Err(Error::Demand(format!(
            "elephant range {elephant_range:?} must dominate mice range {mice_range:?}"
        )));
    }
    let mut r = rng(seed);
    let mut data = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let (lo, hi) = if r.random_bool(elephant_fraction) {
                elephant_range
            } else {
                mice_range
            };
            data[i * n + j] = if lo == hi { lo } else { r.random_range(lo..hi) };
        }
    }
    Ok(DemandMatrix { n, data })
}

/// Keeps exactly `round(p·m)` of the `m` nonzero entries, chosen uniformly.
pub fn sparsify(d: &DemandMatrix, p: f64, seed: u64) -> Result<DemandMatrix> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Demand(format!("sparsity {p} outside [0,1]")));
    }
    let nonzero: Vec<usize> = (0..d.data.len()).filter(|&i| d.data[i] != 0.0).collect();
    let keep = (p * nonzero.len() as f64).round() as usize;
    let mut data = vec![0.0; d.data.len()];
    let mut r = rng(seed);
    for pick in index::sample(&mut r, nonzero.len(), keep) {
        let at = nonzero[pick];
        data[at] = d.data[at];
    }
    Ok(DemandMatrix { n: d.n, data })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SequenceKind {
    Cyclic,
    Averaged,
    Iid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "lowercase")]
pub enum BaseModel {
    Gravity {
        /// Fixed per-node bandwidths; drawn log-uniformly from the seed when absent.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        bandwidths: Option<Vec<f64>>,
        total_volume: f64,
    },
    Bimodal {
        elephant_fraction: f64,
        mice_range: (f64, f64),
        elephant_range: (f64, f64),
    },
}

impl BaseModel {
    pub fn bimodal_default(elephant_fraction: f64) -> Self {
        BaseModel::Bimodal {
            elephant_fraction,
            mice_range: (1.0, 5.0),
            elephant_range: (20.0, 60.0),
        }
    }
}

/// Full recipe for one demand sequence; regenerating from it is bit-identical.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceSpec {
    pub kind: SequenceKind,
    pub n: usize,
    pub base: BaseModel,
    /// Cycle length for `cyclic`, averaging window for `averaged`.
    pub q: usize,
    /// Sparsity: fraction of communicating pairs kept.
    pub p: f64,
    pub length: usize,
    pub seed: u64,
}

/// Orders of magnitude spanned by default gravity bandwidths.
pub const BANDWIDTH_DECADES: f64 = 3.0;

impl SequenceSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n < 2 {
            return Err(Error::Spec(format!("n = {} must be at least 2", self.n)));
        }
        if self.length == 0 {
            return Err(Error::Spec("length must be at least 1".into()));
        }
        if self.kind != SequenceKind::Iid && self.q == 0 {
            return Err(Error::Spec("q must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.p) {
            return Err(Error::Spec(format!("sparsity {} outside [0,1]", self.p)));
        }
        match &self.base {
            BaseModel::Gravity {
                bandwidths,
                total_volume,
            } => {
                if let Some(b) = bandwidths {
                    if b.len() != self.n {
                        return Err(Error::Spec(format!(
                            "{} bandwidths for n = {}",
                            b.len(),
                            self.n
                        )));
                    }
                }
                if !(total_volume.is_finite() && *total_volume >= 0.0) {
                    return Err(Error::Spec(format!("total volume {total_volume} is invalid")));
                }
            }
            BaseModel::Bimodal {
                elephant_fraction,
                mice_range,
                elephant_range,
            } => {
                // reuse the generator's own checks
                bimodal_dm(2, *elephant_fraction, *mice_range, *elephant_range, 0)
                    .map_err(|e| Error::Spec(e.to_string()))?;
            }
        }
        Ok(())
    }

    pub fn gravity_bandwidths(&self) -> Option<Vec<f64>> {
        match &self.base {
            BaseModel::Gravity { bandwidths, .. } => Some(
                bandwidths
                    .clone()
                    .unwrap_or_else(|| log_uniform_bandwidths(self.n, BANDWIDTH_DECADES, derive(self.seed, 0xBA5E))),
            ),
            BaseModel::Bimodal { .. } => None,
        }
    }

    /// The `index`-th independent draw from the base distribution (before any
    /// temporal structure is applied).
    pub fn draw(&self, index: u64) -> Result<DemandMatrix> {
        let stream = derive(self.seed, index.wrapping_add(1));
        let dense = match &self.base {
            BaseModel::Gravity { total_volume, .. } => {
                gravity_dm(self.n, &self.gravity_bandwidths().unwrap(), *total_volume)?
            }
            BaseModel::Bimodal {
                elephant_fraction,
                mice_range,
                elephant_range,
            } => bimodal_dm(
                self.n,
                *elephant_fraction,
                *mice_range,
                *elephant_range,
                derive(stream, 1),
            )?,
        };
        sparsify(&dense, self.p, derive(stream, 2))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DmSequence {
    pub spec: SequenceSpec,
    pub epochs: Vec<DemandMatrix>,
}

impl DmSequence {
    pub fn len(&self) -> usize {
        self.epochs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.epochs.is_empty()
    }

    pub fn n(&self) -> usize {
        self.epochs[0].n()
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        for (t, dm) in self.epochs.iter().enumerate() {
            std::fs::write(dir.join(format!("epoch_{t:04}.dm")), dm.to_text())?;
        }
        let manifest = serde_json::to_string_pretty(&self.spec)
            .map_err(|e| Error::Spec(e.to_string()))?;
        std::fs::write(dir.join(MANIFEST), manifest + "\n")?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let text = std::fs::read_to_string(dir.join(MANIFEST))?;
        let spec: SequenceSpec = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: dir.join(MANIFEST),
            line: e.line(),
            msg: e.to_string(),
        })?;
        let epochs = (0..spec.length)
            .map(|t| DemandMatrix::load(dir.join(format!("epoch_{t:04}.dm"))))
            .collect::<Result<Vec<_>>>()?;
        Ok(DmSequence { spec, epochs })
    }
}

pub const MANIFEST: &str = "spec.json";

pub fn gen_sequence(spec: &SequenceSpec) -> Result<DmSequence> {
    spec.validate()?;
    let epochs = match spec.kind {
        SequenceKind::Cyclic => {
            let bases = (0..spec.q as u64)
                .map(|i| spec.draw(i))
                .collect::<Result<Vec<_>>>()?;
            (0..spec.length).map(|t| bases[t % spec.q].clone()).collect()
        }
        SequenceKind::Averaged => {
            let mut epochs = Vec::with_capacity(spec.length);
            for t in 0..spec.length {
                if t < spec.q {
                    epochs.push(spec.draw(t as u64)?);
                } else {
                    let window: Vec<&DemandMatrix> = epochs[t - spec.q..t].iter().collect();
                    let next = DemandMatrix::mean(&window);
                    epochs.push(next);
                }
            }
            epochs
        }
        SequenceKind::Iid => (0..spec.length as u64)
            .map(|t| spec.draw(t))
            .collect::<Result<Vec<_>>>()?,
    };
    Ok(DmSequence {
        spec: spec.clone(),
        epochs,
    })
}
