//! Acceptance suite. Every criterion prints one `criterion N: PASS|FAIL` line;
//! the process fails if any criterion does. Extra arguments filter by name.
//! Run with `cargo test -p tealab-cli --test acceptance`.

mod support;

use std::fs;
use std::path::{Path, PathBuf};
use std::panic;
use std::process::{Command, ExitCode};
use std::time::Instant;

use support::*;
use tealab_cli::results::mean_ratios;
use tealab_cli::{cmd_baselines, cmd_sl, cmd_train, diff_runs, Run};
use tealab_core::oracle::{optimal_congestion, optimize_softmin_weights};
use tealab_core::predictor::{NarModel, NarTrainer, Predictor, SlDataset};
use tealab_core::rl::{self, ActionMode, EnvState};
use tealab_core::traffic::{gravity_dm, log_uniform_bandwidths, sparsify, BaseModel};
use tealab_core::{
    gen_sequence, load_topology, max_link_utilization, softmin_ratios, DemandMatrix, DmSequence, Edge, Network,
    SequenceKind, SequenceSpec,
};

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/topologies").join(name)
}

fn repo_config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let path = dir.join("config.toml");
    fs::write(&path, text).unwrap();
    path
}

fn mean_of(rows: &[tealab_cli::ResultRow], method: &str) -> f64 {
    mean_ratios(rows).into_iter().find(|(m, _)| m == method).map(|(_, v)| v).unwrap()
}

fn net_from(n: usize, edges: &[(usize, usize, f64)]) -> Network {
    Network::new(n, edges.iter().map(|&(src, dst, capacity)| Edge { src, dst, capacity }).collect()).unwrap()
}

fn dm_from(n: usize, entries: &[(usize, usize, f64)]) -> DemandMatrix {
    let mut raw = vec![0.0; n * n];
    for &(s, t, v) in entries {
        raw[s * n + t] = v;
    }
    DemandMatrix::from_vec(n, raw).unwrap()
}

fn c01_optimum_lower_bounds_every_strategy() {
    let start = Instant::now();
    let net = load_topology(fixture("six.txt")).unwrap();
    let n = net.node_count();
    let mut worst_gap = f64::INFINITY;
    for i in 0..200u64 {
        let strat = random_strategy(&net, 1000 + i, if i % 2 == 0 { 0.0 } else { 0.5 });
        let dm = if i % 3 == 0 {
            let bw = log_uniform_bandwidths(n, 3.0, i);
            sparsify(&gravity_dm(n, &bw, 50.0).unwrap(), 0.6, i).unwrap()
        } else {
            random_dm(n, i, 0.5)
        };
        let theta = optimal_congestion(&net, &dm).unwrap().theta;
        let u = max_link_utilization(&net, &strat.induce_flow(&net, &dm).unwrap());
        worst_gap = worst_gap.min(u + 1e-6 - theta);
    }
    let ok = worst_gap >= 0.0 && start.elapsed().as_secs() < 60;
    assert!(report(1, ok, "theta <= u + 1e-6 on 200 pairs", format!("min slack {worst_gap:.3e}, {:.1?}", start.elapsed())));
}

fn c02_flow_matches_packet_simulation() {
    let start = Instant::now();
    const PACKETS: usize = 400_000;
    let loopy = net_from(3, &[(0, 1, 1.0), (0, 2, 1.0), (1, 0, 1.0), (1, 2, 1.0), (2, 0, 1.0)]);
    let mut cases: Vec<(Network, tealab_core::DestStrategy, DemandMatrix)> = Vec::new();
    {
        let mut ratios = vec![0.0; 15];
        let at = |d: usize, e: usize| d * 5 + e;
        ratios[at(2, 0)] = 0.8;
        ratios[at(2, 1)] = 0.2;
        ratios[at(2, 2)] = 0.5;
        ratios[at(2, 3)] = 0.5;
        ratios[at(0, 2)] = 1.0;
        ratios[at(0, 4)] = 1.0;
        ratios[at(1, 0)] = 1.0;
        ratios[at(1, 4)] = 1.0;
        let s = tealab_core::DestStrategy::new(&loopy, ratios).unwrap();
        cases.push((loopy.clone(), s, dm_from(3, &[(0, 2, 1.0)])));
    }
    for i in 0..19u64 {
        let n = 3 + (i % 2) as usize;
        let net = random_net(n, 77 + i);
        let strat = random_strategy(&net, 500 + i, 0.3);
        cases.push((net, strat, random_dm(n, 900 + i, 0.7)));
    }
    let mut worst: f64 = 0.0;
    for (i, (net, strat, dm)) in cases.iter().enumerate() {
        let exact = strat.induce_flow(net, dm).unwrap();
        let mc = monte_carlo_flows(net, strat, dm, PACKETS, 31 + i as u64);
        for (x, y) in exact.edge_flow().iter().zip(&mc) {
            let rel = if *x == 0.0 { y.abs() } else { (x - y).abs() / x };
            worst = worst.max(rel);
        }
    }
    let ok = worst <= 0.01 && start.elapsed().as_secs() < 120;
    assert!(report(2, ok, "induced flow within 1% of packet simulation on 20 instances", format!("worst relative error {worst:.4}, {:.1?}", start.elapsed())));
}

fn c03_optimum_matches_path_enumeration() {
    let start = Instant::now();
    let bidir = |edges: &[(usize, usize, f64)]| -> Vec<(usize, usize, f64)> {
        edges.iter().flat_map(|&(a, b, c)| [(a, b, c), (b, a, c)]).collect()
    };
    let cases: Vec<(&str, Network, DemandMatrix, Option<f64>)> = vec![
        ("triangle", net_from(3, &bidir(&[(0, 1, 1.0), (0, 2, 1.0), (2, 1, 1.0)])), dm_from(3, &[(0, 1, 2.0)]), Some(1.0)),
        ("two-node", net_from(2, &[(0, 1, 10.0), (1, 0, 10.0)]), dm_from(2, &[(0, 1, 10.0)]), Some(1.0)),
        (
            "diamond",
            net_from(4, &bidir(&[(0, 1, 1.0), (0, 2, 1.0), (1, 3, 1.0), (2, 3, 1.0)])),
            dm_from(4, &[(0, 3, 2.0)]),
            None,
        ),
        (
            "triangle-two-commodities",
            net_from(3, &bidir(&[(0, 1, 2.0), (0, 2, 1.0), (2, 1, 1.0)])),
            dm_from(3, &[(0, 1, 3.5), (0, 2, 1.0)]),
            // 20% of each demand on its detour
            Some(1.5),
        ),
        (
            "square-with-chord",
            net_from(4, &bidir(&[(0, 1, 2.0), (1, 2, 2.0), (2, 3, 2.0), (3, 0, 2.0), (0, 2, 1.0)])),
            dm_from(4, &[(0, 2, 4.0), (1, 3, 2.0)]),
            None,
        ),
    ];
    let mut all = true;
    let mut details = Vec::new();
    for (name, net, dm, known) in &cases {
        let theta = optimal_congestion(net, dm).unwrap().theta;
        let grid = grid_min_congestion(net, dm, 100);
        let ok = (theta - grid).abs() <= 1e-3 && known.is_none_or(|k| (theta - k).abs() <= 1e-3);
        all &= ok;
        details.push(format!("{name} {theta:.4}/{grid:.4}"));
    }
    let ok = all && start.elapsed().as_secs() < 60;
    assert!(report(3, ok, "LP optimum within 1e-3 of grid search on 5 instances", format!("{}, {:.1?}", details.join(", "), start.elapsed())));
}

fn c04_softmin_weights_near_optimal() {
    let start = Instant::now();
    let net = load_topology(fixture("twelve.txt")).unwrap();
    let n = net.node_count();
    let mut ratios = Vec::new();
    for (i, &p) in [0.3, 0.6, 0.9].iter().cycle().take(30).enumerate() {
        let i = i as u64;
        let bw = log_uniform_bandwidths(n, 3.0, 40 + i);
        let dense = gravity_dm(n, &bw, 1.0).unwrap();
        let volume = 1.0 / optimal_congestion(&net, &dense).unwrap().theta;
        let dm = sparsify(&gravity_dm(n, &bw, volume).unwrap(), p, i).unwrap();
        let opt = optimal_congestion(&net, &dm).unwrap().theta;
        let w = optimize_softmin_weights(&net, std::slice::from_ref(&dm), 2.0, 150, i).unwrap();
        let u = max_link_utilization(&net, &softmin_ratios(&net, &w, 2.0).induce_flow(&net, &dm).unwrap());
        ratios.push(u / opt);
    }
    let within5 = ratios.iter().filter(|&&r| r <= 1.05).count();
    let worst = ratios.iter().copied().fold(0.0, f64::max);
    let ok = within5 * 10 >= 9 * ratios.len() && worst <= 1.10 && start.elapsed().as_secs() < 900;
    assert!(report(4, ok, ">=90% of DMs within 5% of OPT, all within 10%", format!("{within5}/30 within 5%, worst {worst:.4}, {:.1?}", start.elapsed())));
}

fn sl_config(kind: &str, q: usize, p: f64, base: &str) -> String {
    format!(
        r#"topology = "{}"
k = 10
[dataset]
train_count = 7
test_count = 3
length = 60
sequence = {{ kind = "{kind}", q = {q}, p = {p}, base = {base} }}
[sl]
epochs = 2000
learning_rate = 1e-3
nodes = 12
sequence = {{ kind = "{kind}", q = {q}, p = {p}, base = {base} }}
"#,
        fixture("twelve.txt").display()
    )
}

fn c05_predictor_learns_only_regular_sequences() {
    let start = Instant::now();
    let gravity = r#"{ model = "gravity", total_volume = 100.0 }"#;
    let bimodal = r#"{ model = "bimodal", elephant_fraction = 0.2, mice_range = [1.0, 5.0], elephant_range = [20.0, 60.0] }"#;
    let run = |text: String| {
        let dir = tempfile::tempdir().unwrap();
        let cfg = write_config(dir.path(), &text);
        let o = cmd_sl(&Run::new(cfg, 5, dir.path().join("out")).unwrap()).unwrap();
        o.test[0] / *o.test.last().unwrap()
    };
    let cyclic = run(sl_config("cyclic", 5, 0.3, gravity));
    let iid = run(sl_config("iid", 1, 0.3, gravity));
    let averaged = run(sl_config("averaged", 20, 1.0, bimodal));
    let ok = cyclic >= 10.0 && iid <= 2.0 && averaged >= 2.0 && start.elapsed().as_secs() < 600;
    assert!(report(
        5,
        ok,
        "cyclic test loss drops >=10x, iid stays >=50%, averaged drops >=2x",
        format!("cyclic final/initial {:.2e}, iid {:.3}, averaged {:.3}, {:.1?}", 1.0 / cyclic, 1.0 / iid, 1.0 / averaged, start.elapsed())
    ));
}

fn c06_softmin_actions_beat_direct_ratios() {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        &format!(
            r#"topology = "{}"
k = 10
[dataset]
train_count = 7
test_count = 3
length = 20
sequence = {{ kind = "iid", p = 0.9, base = {{ model = "gravity", total_volume = 1.0 }} }}
[trainer]
epochs = 50
"#,
            fixture("six.txt").display()
        ),
    );
    let mut means = Vec::new();
    for mode in [ActionMode::Softmin, ActionMode::Direct] {
        let run = Run::new(&cfg, 17, dir.path().join(mode.name())).unwrap();
        let rows = cmd_train(&run, Some(mode)).unwrap();
        means.push(mean_of(&rows, &format!("rl-{}", mode.name())));
    }
    let (soft, direct) = (means[0], means[1]);
    let ok = soft < direct && soft <= 3.0 && direct >= 1.5 * soft && start.elapsed().as_secs() < 1200;
    assert!(report(
        6,
        ok,
        "rl-softmin < rl-direct, softmin <= 3.0, direct >= 1.5x softmin",
        format!("softmin {soft:.4}, direct {direct:.4} ({:.2}x), {:.1?}", direct / soft, start.elapsed())
    ));
}

fn c07_oblivious_beats_history_baselines_on_gravity() {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let rows = cmd_baselines(&Run::new(repo_config("gravity.toml"), 23, dir.path()).unwrap()).unwrap();
    let (ob, prev, avgk) = (mean_of(&rows, "oblivious"), mean_of(&rows, "prev"), mean_of(&rows, "avgk"));
    let ok = ob <= prev && ob <= avgk && start.elapsed().as_secs() < 600;
    assert!(report(7, ok, "oblivious <= Prev and <= Avg_k on gravity", format!("oblivious {ob:.4}, prev {prev:.4}, avgk {avgk:.4}, {:.1?}", start.elapsed())));
}

fn c08_rl_beats_history_baselines_on_bimodal() {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let run = Run::new(repo_config("bimodal.toml"), 29, dir.path()).unwrap();
    let base = cmd_baselines(&run).unwrap();
    let rl_rows = cmd_train(&run, Some(ActionMode::Softmin)).unwrap();
    let (prev, avgk, ob) = (mean_of(&base, "prev"), mean_of(&base, "avgk"), mean_of(&base, "oblivious"));
    let rl = mean_of(&rl_rows, "rl-softmin");
    let ok = rl < prev.min(avgk) && start.elapsed().as_secs() < 1800;
    let stretch = if rl < ob { "beats" } else { "does not beat" };
    assert!(report(
        8,
        ok,
        "rl-softmin < min(Prev, Avg_k) on bimodal",
        format!("rl {rl:.4}, prev {prev:.4}, avgk {avgk:.4}; {stretch} oblivious {ob:.4}, {:.1?}", start.elapsed())
    ));
}

fn c09_reward_contract() {
    let start = Instant::now();
    let net = load_topology(fixture("six.txt")).unwrap();
    let n = net.node_count();
    let seqs: Vec<DmSequence> = (0..5u64)
        .map(|seed| {
            gen_sequence(&SequenceSpec {
                kind: SequenceKind::Iid,
                n,
                base: BaseModel::bimodal_default(0.3),
                q: 1,
                p: 0.7,
                length: 102,
                seed,
            })
            .unwrap()
        })
        .collect();
    let mut failures = Vec::new();
    let mut r = tealab_core::rng::rng(99);
    use rand::Rng;
    for step in 0..500usize {
        let seq = &seqs[step % seqs.len()];
        let t = 2 + step / seqs.len();
        let mode = if step % 2 == 0 { ActionMode::Softmin } else { ActionMode::Direct };
        let scale = [0.1, 1.0, 5.0][step % 3];
        let action: Vec<f64> = (0..rl::action_dim(&net, mode)).map(|_| scale * r.random_range(-1.0..1.0)).collect();
        let state = EnvState::at(&net, seq, 2, t).unwrap();
        let (next, rec) = rl::env_step(&net, seq, &state, &action, mode, 2.0).unwrap();
        let strat = rl::decode_action(&net, &action, mode, 2.0).unwrap();
        let u = max_link_utilization(&net, &strat.induce_flow(&net, &seq.epochs[t]).unwrap());
        let opt = optimal_congestion(&net, &seq.epochs[t]).unwrap().theta;
        if rec.reward != -u / opt || rec.u != u || rec.opt != opt {
            failures.push(format!("step {step}: reward {} vs {}", rec.reward, -u / opt));
        }
        if opt > 0.0 && rec.reward > -1.0 + 1e-9 {
            failures.push(format!("step {step}: reward {} above -1", rec.reward));
        }
        // reward is -1 exactly when the strategy is optimal
        let optimal = u <= opt * (1.0 + 1e-6);
        if optimal != (rec.reward >= -1.0 - 1e-6) {
            failures.push(format!("step {step}: optimality and reward disagree"));
        }
        if next.epoch_index != t + 1 {
            failures.push(format!("step {step}: state did not advance"));
        }
    }
    // optimal strategies hit -1
    for seq in &seqs {
        for dm in seq.epochs.iter().take(20) {
            let opt = optimal_congestion(&net, dm).unwrap();
            let u = max_link_utilization(&net, &opt.strategy(&net).unwrap().induce_flow(&net, dm).unwrap());
            let reward = rl::reward(u, opt.theta).unwrap();
            if (reward + 1.0).abs() > 1e-6 {
                failures.push(format!("optimal strategy scored {reward}"));
            }
        }
    }
    let ok = failures.is_empty() && start.elapsed().as_secs() < 60;
    assert!(report(9, ok, "reward = -u/OPT, <= -1, and -1 iff optimal over 500 steps", format!("{} violations {:?}, {:.1?}", failures.len(), failures.first(), start.elapsed())));
}

fn collect_files(root: &Path, ext: &str) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.extension().is_some_and(|x| x == ext) {
                out.push(p.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

fn c10_cli_outputs_are_deterministic() {
    let start = Instant::now();
    let bin = env!("CARGO_BIN_EXE_tealab");
    let config = repo_config("smoke.toml");
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let commands = ["generate", "baselines", "train", "eval", "sl", "reproduce"];
    let mut problems = Vec::new();
    for cmd in commands {
        for d in &dirs {
            let out = d.path().join(cmd);
            // eval scores the checkpoint that train leaves in the same directory
            let steps: &[&str] = if cmd == "eval" { &["train", "eval"] } else { &[cmd] };
            for step in steps {
                let status = Command::new(bin)
                    .args([step, "--config"])
                    .arg(&config)
                    .args(["--seed", "41", "--out"])
                    .arg(&out)
                    .output()
                    .unwrap();
                if !status.status.success() {
                    problems.push(format!("{step} failed: {}", String::from_utf8_lossy(&status.stderr)));
                }
            }
        }
    }
    for cmd in commands {
        let (a, b) = (dirs[0].path().join(cmd), dirs[1].path().join(cmd));
        for d in diff_runs(&a, &b).unwrap() {
            problems.push(format!("{cmd}: {d}"));
        }
        if cmd == "generate" {
            let files = collect_files(&a, "dm");
            if files.is_empty() || files != collect_files(&b, "dm") {
                problems.push("generate: dataset file lists differ".into());
            }
            for f in &files {
                if fs::read(a.join(f)).unwrap() != fs::read(b.join(f)).unwrap() {
                    problems.push(format!("generate: {} differs", f.display()));
                }
            }
        } else if collect_files(&a, "csv").is_empty() {
            problems.push(format!("{cmd}: no CSV written"));
        }
    }
    let ok = problems.is_empty() && start.elapsed().as_secs() < 300;
    assert!(report(10, ok, "every command reruns to byte-identical outputs", format!("{} problems {:?}, {:.1?}", problems.len(), problems.first(), start.elapsed())));
}

fn c11_predictor_numerics() {
    let start = Instant::now();
    let seqs: Vec<DmSequence> = (0..4u64)
        .map(|seed| {
            gen_sequence(&SequenceSpec {
                kind: SequenceKind::Averaged,
                n: 3,
                base: BaseModel::bimodal_default(0.3),
                q: 3,
                p: 0.8,
                length: 12,
                seed,
            })
            .unwrap()
        })
        .collect();
    let k = 2;
    let data = SlDataset::new(seqs[..3].to_vec(), seqs[3..].to_vec(), k).unwrap();
    let windows = data.train_windows();
    let n = data.n();

    // analytic gradient vs central differences
    let mut model = NarModel::zeros(k, n);
    model.alpha = vec![0.4, 0.3];
    model.beta = (0..n * n).map(|i| 0.5 * i as f64 - 1.0).collect();
    let (_, ga, gb) = model.loss_and_grad(&windows);
    let mut worst_grad: f64 = 0.0;
    for idx in 0..k + n * n {
        let h = 1e-5;
        let bump = |delta: f64| {
            let mut m = model.clone();
            if idx < k {
                m.alpha[idx] += delta;
            } else {
                m.beta[idx - k] += delta;
            }
            m.loss_and_grad(&windows).0
        };
        let fd = (bump(h) - bump(-h)) / (2.0 * h);
        let g = if idx < k { ga[idx] } else { gb[idx - k] };
        worst_grad = worst_grad.max((fd - g).abs() / g.abs().max(1.0));
    }

    // normal equations over features [history entries, one-hot(i,j)]
    let dim = k + n * n;
    let mut ata = vec![vec![0.0; dim]; dim];
    let mut atb = vec![0.0; dim];
    for w in &windows {
        for ij in 0..n * n {
            let mut f = vec![0.0; dim];
            for (i, h) in w.history.iter().enumerate() {
                f[i] = h.as_slice()[ij];
            }
            f[k + ij] = 1.0;
            let y = w.target.as_slice()[ij];
            for a in 0..dim {
                atb[a] += f[a] * y;
                for b in 0..dim {
                    ata[a][b] += f[a] * f[b];
                }
            }
        }
    }
    let theta = solve_dense(ata, atb);
    let ls = NarModel { k, n, alpha: theta[..k].to_vec(), beta: theta[k..].to_vec() };
    let ls_loss = ls.loss_and_grad(&windows).0;
    let mut gd = NarModel::zeros(k, n);
    let cfg = NarTrainer { epochs: 20_000, lr: 0.02, batch_size: None, clip_norm: f64::INFINITY, seed: 3 };
    gd.fit(&data, &cfg).unwrap();
    let gd_loss = gd.loss_and_grad(&windows).0;
    let excess = gd_loss / ls_loss - 1.0;
    let ok = worst_grad <= 1e-4 && excess <= 0.01 && start.elapsed().as_secs() < 60;
    assert!(report(
        11,
        ok,
        "gradient matches central differences to 1e-4; descent within 1% of least squares",
        format!("worst gradient error {worst_grad:.2e}, excess loss {:.4}%, {:.1?}", 100.0 * excess, start.elapsed())
    ));
}

fn main() -> ExitCode {
    let criteria: [(&str, fn()); 11] = [
        ("c01_optimum_lower_bounds_every_strategy", c01_optimum_lower_bounds_every_strategy),
        ("c02_flow_matches_packet_simulation", c02_flow_matches_packet_simulation),
        ("c03_optimum_matches_path_enumeration", c03_optimum_matches_path_enumeration),
        ("c04_softmin_weights_near_optimal", c04_softmin_weights_near_optimal),
        ("c05_predictor_learns_only_regular_sequences", c05_predictor_learns_only_regular_sequences),
        ("c06_softmin_actions_beat_direct_ratios", c06_softmin_actions_beat_direct_ratios),
        ("c07_oblivious_beats_history_baselines_on_gravity", c07_oblivious_beats_history_baselines_on_gravity),
        ("c08_rl_beats_history_baselines_on_bimodal", c08_rl_beats_history_baselines_on_bimodal),
        ("c09_reward_contract", c09_reward_contract),
        ("c10_cli_outputs_are_deterministic", c10_cli_outputs_are_deterministic),
        ("c11_predictor_numerics", c11_predictor_numerics),
    ];
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    panic::set_hook(Box::new(|info| eprintln!("  {info}")));
    let mut failed = Vec::new();
    for (name, check) in criteria {
        if !filters.is_empty() && !filters.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        if panic::catch_unwind(check).is_err() {
            failed.push(name);
        }
    }
    if failed.is_empty() {
        println!("acceptance: all selected criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: {} failed: {}", failed.len(), failed.join(", "));
        ExitCode::FAILURE
    }
}
