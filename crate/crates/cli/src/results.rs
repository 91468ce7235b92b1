use std::fmt::Write as _;

/// One scored routing decision.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub run_id: String,
    pub seed: u64,
    pub sequence: usize,
    pub epoch: usize,
    pub method: String,
    pub utilization: f64,
    pub opt: f64,
    pub ratio: f64,
}

pub const HEADER: &str = "run_id,seed,sequence,epoch,method,utilization,opt,ratio";

impl ResultRow {
    pub fn new(run_id: &str, seed: u64, sequence: usize, epoch: usize, method: &str, utilization: f64, opt: f64) -> Self {
        // all-zero demand: nothing to route, scored as optimal
        let ratio = if opt > 0.0 { utilization / opt } else { 1.0 };
        ResultRow { run_id: run_id.to_string(), seed, sequence, epoch, method: method.to_string(), utilization, opt, ratio }
    }
}

/// Sorts by (method, sequence, epoch) and renders with a header line.
pub fn to_csv(rows: &mut [ResultRow]) -> String {
    rows.sort_by(|a, b| (&a.method, a.sequence, a.epoch).cmp(&(&b.method, b.sequence, b.epoch)));
    let mut out = String::with_capacity(64 * (rows.len() + 1));
    out.push_str(HEADER);
    out.push('\n');
    for r in rows.iter() {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.run_id, r.seed, r.sequence, r.epoch, r.method, r.utilization, r.opt, r.ratio
        )
        .unwrap();
    }
    out
}

pub fn parse_csv(text: &str) -> anyhow::Result<Vec<ResultRow>> {
    let mut lines = text.lines();
    anyhow::ensure!(lines.next() == Some(HEADER), "unexpected results header");
    lines
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            anyhow::ensure!(f.len() == 8, "expected 8 fields in `{line}`");
            Ok(ResultRow {
                run_id: f[0].to_string(),
                seed: f[1].parse()?,
                sequence: f[2].parse()?,
                epoch: f[3].parse()?,
                method: f[4].to_string(),
                utilization: f[5].parse()?,
                opt: f[6].parse()?,
                ratio: f[7].parse()?,
            })
        })
        .collect()
}

/// Mean ratio per method, in method order.
pub fn mean_ratios(rows: &[ResultRow]) -> Vec<(String, f64)> {
    let mut methods: Vec<&str> = rows.iter().map(|r| r.method.as_str()).collect();
    methods.sort_unstable();
    methods.dedup();
    methods
        .into_iter()
        .map(|m| {
            let rs: Vec<f64> = rows.iter().filter(|r| r.method == m).map(|r| r.ratio).collect();
            (m.to_string(), rs.iter().sum::<f64>() / rs.len() as f64)
        })
        .collect()
}
