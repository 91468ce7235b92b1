use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tealab_core::oracle::{oblivious_strategy, optimal_congestion};
use tealab_core::predictor::{NarModel, NarTrainer, Predictor, SlDataset};
use tealab_core::rl::{self, ActionMode, PolicyParams};
use tealab_core::rng::derive;
use tealab_core::{
    gen_sequence, load_topology, max_link_utilization, softmin_ratios, DemandMatrix, DmSequence, Error, Network,
};

use crate::config::{Baseline, LoadedConfig, SequenceTemplate};
use crate::results::{to_csv, ResultRow};

pub const DATASET_DIR: &str = "dataset";
pub const DATASET_MANIFEST: &str = "dataset.json";
pub const BASELINES_CSV: &str = "baselines.csv";
pub const RESULTS_CSV: &str = "results.csv";
pub const CURVE_CSV: &str = "curve.csv";
pub const POLICY_FILE: &str = "policy.txt";
pub const SL_CSV: &str = "sl_loss.csv";
pub const NAR_FILE: &str = "nar.txt";

const TRAIN_STREAM: u64 = 0x7A00;
const TEST_STREAM: u64 = 0x7E00;
const SL_TRAIN_STREAM: u64 = 0x5A00;
const SL_TEST_STREAM: u64 = 0x5E00;

/// Everything a command needs: the config, the seed and where to write.
pub struct Run {
    pub loaded: LoadedConfig,
    pub seed: u64,
    pub out: PathBuf,
    pub net: Network,
}

impl Run {
    pub fn new(config: impl AsRef<Path>, seed: u64, out: impl Into<PathBuf>) -> anyhow::Result<Self> {
        let loaded = LoadedConfig::load(config)?;
        let net = load_topology(&loaded.config.topology)?;
        let out = out.into();
        fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
        Ok(Run { loaded, seed, out, net })
    }

    pub fn run_id(&self) -> String {
        format!("{}-{}", &self.loaded.sha256[..12], self.seed)
    }

    fn write(&self, name: &str, contents: &str) -> anyhow::Result<PathBuf> {
        let path = self.out.join(name);
        fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }

    fn manifest(&self, command: &str, outputs: &[PathBuf], error: Option<String>) -> anyhow::Result<()> {
        let mut files = BTreeMap::new();
        for p in outputs {
            let bytes = fs::read(p)?;
            let rel = p.strip_prefix(&self.out).unwrap_or(p);
            files.insert(rel.display().to_string(), hex::encode(Sha256::digest(&bytes)));
        }
        let manifest = RunManifest {
            tool: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            seed: self.seed,
            config_path: self.loaded.path.display().to_string(),
            config_sha256: self.loaded.sha256.clone(),
            config: self.loaded.config.clone(),
            outputs: files,
            status: if error.is_some() { "failed" } else { "ok" }.to_string(),
            error,
        };
        self.write(&format!("manifest-{command}.json"), &serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }

    /// Runs `body`, recording its outputs or its failure in the manifest.
    fn recorded(&self, command: &str, body: impl FnOnce() -> anyhow::Result<Vec<PathBuf>>) -> anyhow::Result<Vec<PathBuf>> {
        match body() {
            Ok(outputs) => {
                self.manifest(command, &outputs, None)?;
                Ok(outputs)
            }
            Err(e) => {
                self.manifest(command, &[], Some(format!("{e:#}")))?;
                Err(e)
            }
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub seed: u64,
    pub config_path: String,
    pub config_sha256: String,
    pub config: crate::config::ExperimentConfig,
    pub outputs: BTreeMap<String, String>,
    pub status: String,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub key: String,
    pub seed: u64,
    pub volume_scale: f64,
    pub train: Vec<String>,
    pub test: Vec<String>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub train: Vec<DmSequence>,
    pub test: Vec<DmSequence>,
    pub manifest: DatasetManifest,
}

fn dataset_key(run: &Run) -> anyhow::Result<String> {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(&run.loaded.config.dataset)?);
    h.update(fs::read(&run.loaded.config.topology)?);
    h.update(run.seed.to_le_bytes());
    Ok(hex::encode(h.finalize()))
}

fn generate_sequences(
    template: &SequenceTemplate,
    n: usize,
    length: usize,
    count: usize,
    seed: u64,
    stream: u64,
) -> anyhow::Result<Vec<DmSequence>> {
    (0..count)
        .map(|i| Ok(gen_sequence(&template.spec(n, length, derive(seed, stream + i as u64)))?))
        .collect()
}

fn rescale(seqs: &mut [DmSequence], c: f64) {
    for s in seqs {
        for d in &mut s.epochs {
            *d = d.scaled(c);
        }
    }
}

pub fn cmd_generate(run: &Run) -> anyhow::Result<Dataset> {
    let mut data = None;
    run.recorded("generate", || {
        let (ds, outputs) = generate(run)?;
        data = Some(ds);
        Ok(outputs)
    })?;
    Ok(data.unwrap())
}

fn generate(run: &Run) -> anyhow::Result<(Dataset, Vec<PathBuf>)> {
    let cfg = &run.loaded.config.dataset;
    let n = run.net.node_count();
    let mut train = generate_sequences(&cfg.sequence, n, cfg.length, cfg.train_count, run.seed, TRAIN_STREAM)?;
    let mut test = generate_sequences(&cfg.sequence, n, cfg.length, cfg.test_count, run.seed, TEST_STREAM)?;
    let mut warnings = Vec::new();
    let mut volume_scale = 1.0;
    if train.iter().chain(&test).all(|s| s.epochs.iter().all(DemandMatrix::is_zero)) {
        warnings.push("every generated demand matrix is zero".to_string());
    } else if cfg.calibrate {
        let first = train.iter().flat_map(|s| &s.epochs).find(|d| !d.is_zero());
        match first {
            Some(d) => {
                volume_scale = 1.0 / optimal_congestion(&run.net, d)?.theta;
                rescale(&mut train, volume_scale);
                rescale(&mut test, volume_scale);
            }
            None => warnings.push("training matrices are all zero; calibration skipped".to_string()),
        }
    }
    for w in &warnings {
        eprintln!("warning: {w}");
    }
    let root = run.out.join(DATASET_DIR);
    if root.exists() {
        fs::remove_dir_all(&root)?;
    }
    let name = |split: &str, i: usize| format!("{split}/seq_{i:02}");
    for (i, s) in train.iter().enumerate() {
        s.save(root.join(name("train", i)))?;
    }
    for (i, s) in test.iter().enumerate() {
        s.save(root.join(name("test", i)))?;
    }
    let manifest = DatasetManifest {
        key: dataset_key(run)?,
        seed: run.seed,
        volume_scale,
        train: (0..train.len()).map(|i| name("train", i)).collect(),
        test: (0..test.len()).map(|i| name("test", i)).collect(),
        warnings,
    };
    let mpath = root.join(DATASET_MANIFEST);
    fs::write(&mpath, serde_json::to_string_pretty(&manifest)?)?;
    let mut outputs = vec![mpath];
    for rel in manifest.train.iter().chain(&manifest.test) {
        let mut files: Vec<PathBuf> = fs::read_dir(root.join(rel))?.map(|e| e.map(|e| e.path())).collect::<Result<_, _>>()?;
        files.sort();
        outputs.extend(files);
    }
    Ok((Dataset { train, test, manifest }, outputs))
}

/// Loads the dataset under `--out`, generating it first when it is absent
/// or was produced from a different dataset section, topology or seed.
pub fn ensure_dataset(run: &Run) -> anyhow::Result<Dataset> {
    let root = run.out.join(DATASET_DIR);
    let mpath = root.join(DATASET_MANIFEST);
    if mpath.exists() {
        let manifest: DatasetManifest = serde_json::from_str(&fs::read_to_string(&mpath)?)?;
        if manifest.key == dataset_key(run)? {
            let load = |names: &[String]| -> anyhow::Result<Vec<DmSequence>> {
                names.iter().map(|r| Ok(DmSequence::load(root.join(r))?)).collect()
            };
            let train = load(&manifest.train)?;
            let test = load(&manifest.test)?;
            return Ok(Dataset { train, test, manifest });
        }
        eprintln!("note: dataset in {} is stale; regenerating", root.display());
    }
    cmd_generate(run)
}

fn utilization(net: &Network, strat: &tealab_core::DestStrategy, dm: &DemandMatrix) -> anyhow::Result<f64> {
    Ok(max_link_utilization(net, &strat.induce_flow(net, dm)?))
}

pub fn cmd_baselines(run: &Run) -> anyhow::Result<Vec<ResultRow>> {
    let data = ensure_dataset(run)?;
    let mut rows = Vec::new();
    run.recorded("baselines", || {
        rows = baselines(run, &data)?;
        Ok(vec![run.write(BASELINES_CSV, &to_csv(&mut rows))?])
    })?;
    Ok(rows)
}

fn baselines(run: &Run, data: &Dataset) -> anyhow::Result<Vec<ResultRow>> {
    let cfg = &run.loaded.config;
    let net = &run.net;
    let k = cfg.k;
    let id = run.run_id();
    let oblivious = if cfg.baselines.contains(&Baseline::Oblivious) {
        Some(oblivious_strategy(net)?)
    } else {
        None
    };
    let opt = rl::opt_table(net, &data.test)?;
    let jobs: Vec<(usize, usize)> = data
        .test
        .iter()
        .enumerate()
        .flat_map(|(i, s)| (k..s.len()).map(move |t| (i, t)))
        .collect();
    let per_job = jobs
        .par_iter()
        .map(|&(i, t)| -> anyhow::Result<Vec<ResultRow>> {
            let seq = &data.test[i].epochs;
            let dm = &seq[t];
            let o = opt[i][t];
            let job_seed = derive(derive(run.seed, i as u64), t as u64);
            let mut out = vec![ResultRow::new(&id, run.seed, i, t, "opt", o, o)];
            for b in &cfg.baselines {
                let (name, u) = match b {
                    Baseline::Prev | Baseline::Avgk => {
                        let history = if *b == Baseline::Prev { &seq[t - 1..t] } else { &seq[t - k..t] };
                        let opt_seed = derive(job_seed, *b as u64);
                        let fit = cfg.softmin.optimizer(cfg.gamma, opt_seed).fit(net, history)?;
                        let strat = softmin_ratios(net, &fit.weights, cfg.gamma);
                        (if *b == Baseline::Prev { "prev" } else { "avgk" }, utilization(net, &strat, dm)?)
                    }
                    Baseline::Oblivious => {
                        let scheme = oblivious.as_ref().unwrap();
                        ("oblivious", max_link_utilization(net, &scheme.strategy.induce_flow(net, dm)?))
                    }
                };
                out.push(ResultRow::new(&id, run.seed, i, t, name, u, o));
            }
            Ok(out)
        })
        .collect::<anyhow::Result<Vec<_>>>()?;
    Ok(per_job.into_iter().flatten().collect())
}

fn mode_or_default(run: &Run, mode: Option<ActionMode>) -> ActionMode {
    mode.unwrap_or(run.loaded.config.trainer.mode)
}

fn eval_rows(run: &Run, params: &PolicyParams, data: &Dataset) -> anyhow::Result<Vec<ResultRow>> {
    let ev = rl::evaluate(&run.net, params, &data.test, run.loaded.config.gamma)?;
    let method = format!("rl-{}", params.mode.name());
    let id = run.run_id();
    Ok(ev
        .rows
        .iter()
        .map(|r| ResultRow::new(&id, run.seed, r.sequence, r.epoch, &method, r.utilization, r.opt))
        .collect())
}

/// Trains a policy, then scores it on the test split.
pub fn cmd_train(run: &Run, mode: Option<ActionMode>) -> anyhow::Result<Vec<ResultRow>> {
    let data = ensure_dataset(run)?;
    let mut rows = Vec::new();
    run.recorded("train", || {
        let mut cfg = run.loaded.config.trainer_config(derive(run.seed, 0x7121));
        cfg.mode = mode_or_default(run, mode);
        let (params, curve) = rl::train(&run.net, &data.train, &cfg).map_err(|e| match e {
            Error::Diverged { epoch, msg } => anyhow::anyhow!("training diverged at epoch {epoch}: {msg}"),
            other => other.into(),
        })?;
        let policy = run.write(POLICY_FILE, &params.to_text())?;
        let curve = run.write(CURVE_CSV, &rl::curve_csv(&curve))?;
        rows = eval_rows(run, &params, &data)?;
        let results = run.write(RESULTS_CSV, &to_csv(&mut rows))?;
        Ok(vec![policy, curve, results])
    })?;
    Ok(rows)
}

/// Scores an existing checkpoint (default `<out>/policy.txt`) on the test split.
pub fn cmd_eval(run: &Run, policy: Option<&Path>) -> anyhow::Result<Vec<ResultRow>> {
    let data = ensure_dataset(run)?;
    let path = policy.map(Path::to_path_buf).unwrap_or_else(|| run.out.join(POLICY_FILE));
    let text = fs::read_to_string(&path).with_context(|| format!("reading checkpoint {}", path.display()))?;
    let params = PolicyParams::parse(&text)?;
    if params.k != run.loaded.config.k {
        bail!("checkpoint uses k = {} but the config has k = {}", params.k, run.loaded.config.k);
    }
    let mut rows = Vec::new();
    run.recorded("eval", || {
        rows = eval_rows(run, &params, &data)?;
        Ok(vec![run.write(RESULTS_CSV, &to_csv(&mut rows))?])
    })?;
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SlOutcome {
    pub model: NarModel,
    pub train: Vec<f64>,
    pub test: Vec<f64>,
}

pub fn cmd_sl(run: &Run) -> anyhow::Result<SlOutcome> {
    let mut outcome = None;
    run.recorded("sl", || {
        let (o, outputs) = sl(run)?;
        outcome = Some(o);
        Ok(outputs)
    })?;
    Ok(outcome.unwrap())
}

fn sl(run: &Run) -> anyhow::Result<(SlOutcome, Vec<PathBuf>)> {
    let cfg = &run.loaded.config;
    let k = cfg.sl_k();
    let (train, test) = match &cfg.sl.sequence {
        Some(template) => {
            let n = cfg.sl.nodes.unwrap_or(run.net.node_count());
            let d = &cfg.dataset;
            (
                generate_sequences(template, n, d.length, d.train_count, run.seed, SL_TRAIN_STREAM)?,
                generate_sequences(template, n, d.length, d.test_count, run.seed, SL_TEST_STREAM)?,
            )
        }
        None => {
            let d = ensure_dataset(run)?;
            (d.train, d.test)
        }
    };
    let data = SlDataset::new(train, test, k)?;
    let mut model = NarModel::zeros(k, data.n());
    let trainer = NarTrainer {
        epochs: cfg.sl.epochs,
        lr: cfg.sl.learning_rate,
        seed: derive(run.seed, 0x51),
        ..NarTrainer::default()
    };
    let curve = model.fit(&data, &trainer)?;
    let mut csv = String::from("epoch,train_loss,test_loss\n");
    for (e, (a, b)) in curve.train.iter().zip(&curve.test).enumerate() {
        csv.push_str(&format!("{e},{a},{b}\n"));
    }
    let outputs = vec![run.write(SL_CSV, &csv)?, run.write(NAR_FILE, &model.to_text())?];
    Ok((SlOutcome { model, train: curve.train, test: curve.test }, outputs))
}

/// Full pipeline: dataset, baselines, both policy modes and the predictor.
/// Combined rows land in `<out>/results.csv`; per-mode runs in `<out>/rl-<mode>/`.
pub fn cmd_reproduce(run: &Run) -> anyhow::Result<Vec<ResultRow>> {
    cmd_generate(run)?;
    let mut rows = cmd_baselines(run)?;
    for mode in [ActionMode::Softmin, ActionMode::Direct] {
        let sub = Run {
            loaded: run.loaded.clone(),
            seed: run.seed,
            out: run.out.join(format!("rl-{}", mode.name())),
            net: run.net.clone(),
        };
        fs::create_dir_all(&sub.out)?;
        // share the already generated dataset
        copy_dir(&run.out.join(DATASET_DIR), &sub.out.join(DATASET_DIR))?;
        rows.extend(cmd_train(&sub, Some(mode))?);
    }
    cmd_sl(run)?;
    run.recorded("reproduce", || Ok(vec![run.write(RESULTS_CSV, &to_csv(&mut rows))?]))?;
    Ok(rows)
}

fn copy_dir(from: &Path, to: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(to)?;
    for entry in fs::read_dir(from)? {
        let entry = entry?;
        let target = to.join(entry.file_name());
        if entry.file_type()?.is_dir() {
            copy_dir(&entry.path(), &target)?;
        } else {
            fs::copy(entry.path(), target)?;
        }
    }
    Ok(())
}

/// Relative paths of every CSV under `dir`, sorted.
pub fn csv_files(dir: &Path) -> anyhow::Result<Vec<PathBuf>> {
    fn walk(root: &Path, dir: &Path, acc: &mut Vec<PathBuf>) -> anyhow::Result<()> {
        for entry in fs::read_dir(dir)? {
            let path = entry?.path();
            if path.is_dir() {
                walk(root, &path, acc)?;
            } else if path.extension().is_some_and(|e| e == "csv") {
                acc.push(path.strip_prefix(root)?.to_path_buf());
            }
        }
        Ok(())
    }
    let mut acc = Vec::new();
    walk(dir, dir, &mut acc)?;
    acc.sort();
    Ok(acc)
}

/// Byte-compares every CSV of two run directories; returns the mismatches.
pub fn diff_runs(a: &Path, b: &Path) -> anyhow::Result<Vec<String>> {
    let (fa, fb) = (csv_files(a)?, csv_files(b)?);
    let mut diffs = Vec::new();
    for f in fa.iter().filter(|f| !fb.contains(f)) {
        diffs.push(format!("{} missing from {}", f.display(), b.display()));
    }
    for f in fb.iter().filter(|f| !fa.contains(f)) {
        diffs.push(format!("{} missing from {}", f.display(), a.display()));
    }
    for f in fa.iter().filter(|f| fb.contains(f)) {
        if fs::read(a.join(f))? != fs::read(b.join(f))? {
            diffs.push(format!("{} differs", f.display()));
        }
    }
    Ok(diffs)
}
