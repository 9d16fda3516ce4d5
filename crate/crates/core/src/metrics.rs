//! Monitoring records, flat export, training curves and comparison tables.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::env::MaterializedReward;
use crate::workload::fmt_f64;

pub const SCHEMA_VERSION: u32 = 1;
const SCHEMA_LINE: &str = "#netslice-metrics v1";
pub const CSV_COLUMNS: [&str; 13] = [
    "time_s", "node_id", "cpu_util", "power_w", "link_id", "tx_gbps", "rx_gbps", "slice_id", "L_s", "E_s", "reward",
    "episode", "step",
];

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("metrics io: {0}")]
    Io(#[from] std::io::Error),
    #[error("metrics line {line}: {message}")]
    Parse { line: usize, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NodeSample {
    pub node_id: usize,
    pub cpu_util: f64,
    pub power_w: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkSample {
    pub link_id: usize,
    pub tx_gbps: f64,
    pub rx_gbps: f64,
}

/// One monitoring interval, averaged over the interval ending at `time_s`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TickRecord {
    pub time_s: f64,
    pub episode: u64,
    pub nodes: Vec<NodeSample>,
    pub links: Vec<LinkSample>,
    /// Energy audit terms for the interval, joules.
    pub attributed_j: f64,
    pub unattributed_j: f64,
    pub exact_j: f64,
}

/// One exported row. A row carries either a node sample, a link sample or
/// a per-slice reward outcome; unused columns are empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub time_s: f64,
    pub node_id: Option<usize>,
    pub cpu_util: Option<f64>,
    pub power_w: Option<f64>,
    pub link_id: Option<usize>,
    pub tx_gbps: Option<f64>,
    pub rx_gbps: Option<f64>,
    pub slice_id: Option<usize>,
    #[serde(rename = "L_s")]
    pub l_s: Option<f64>,
    #[serde(rename = "E_s")]
    pub e_s: Option<f64>,
    pub reward: Option<f64>,
    pub episode: u64,
    pub step: Option<u64>,
}

impl MetricRecord {
    fn blank(time_s: f64, episode: u64) -> Self {
        Self {
            time_s,
            node_id: None,
            cpu_util: None,
            power_w: None,
            link_id: None,
            tx_gbps: None,
            rx_gbps: None,
            slice_id: None,
            l_s: None,
            e_s: None,
            reward: None,
            episode,
            step: None,
        }
    }
}

/// Everything recorded for one run, in recording order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricRun {
    pub records: Vec<MetricRecord>,
}

impl MetricRun {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record_tick(&mut self, tick: &TickRecord) {
        for n in &tick.nodes {
            let mut r = MetricRecord::blank(tick.time_s, tick.episode);
            r.node_id = Some(n.node_id);
            r.cpu_util = Some(n.cpu_util);
            r.power_w = Some(n.power_w);
            self.records.push(r);
        }
        for l in &tick.links {
            let mut r = MetricRecord::blank(tick.time_s, tick.episode);
            r.link_id = Some(l.link_id);
            r.tx_gbps = Some(l.tx_gbps);
            r.rx_gbps = Some(l.rx_gbps);
            self.records.push(r);
        }
    }

    pub fn record_reward(&mut self, episode: u64, m: &MaterializedReward) {
        for s in &m.slices {
            let mut r = MetricRecord::blank(m.materialized_at, episode);
            r.slice_id = Some(s.slice_id);
            r.l_s = s.l_s;
            r.e_s = s.e_s;
            r.reward = Some(m.reward);
            r.step = Some(m.step_id);
            self.records.push(r);
        }
    }

    pub fn export(&self, path: &Path, format: Format) -> Result<(), MetricsError> {
        let out = BufWriter::new(File::create(path)?);
        match format {
            Format::Csv => write_csv(&self.records, out),
            Format::JsonLines => write_jsonl(&self.records, out),
        }
    }

    pub fn import(path: &Path, format: Format) -> Result<Self, MetricsError> {
        let input = BufReader::new(File::open(path)?);
        let records = match format {
            Format::Csv => read_csv(input)?,
            Format::JsonLines => read_jsonl(input)?,
        };
        Ok(Self { records })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Format {
    Csv,
    JsonLines,
}

impl Format {
    pub fn extension(&self) -> &'static str {
        match self {
            Format::Csv => "csv",
            Format::JsonLines => "jsonl",
        }
    }
}

impl std::str::FromStr for Format {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "csv" => Ok(Format::Csv),
            "json-lines" | "jsonl" => Ok(Format::JsonLines),
            other => Err(format!("unknown format {other:?} (expected csv or json-lines)")),
        }
    }
}

fn opt_f(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

fn opt_u<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_csv<W: Write>(records: &[MetricRecord], mut out: W) -> Result<(), MetricsError> {
    writeln!(out, "{SCHEMA_LINE}")?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_COLUMNS).map_err(csv_err)?;
    for r in records {
        w.write_record([
            fmt_f64(r.time_s),
            opt_u(r.node_id),
            opt_f(r.cpu_util),
            opt_f(r.power_w),
            opt_u(r.link_id),
            opt_f(r.tx_gbps),
            opt_f(r.rx_gbps),
            opt_u(r.slice_id),
            opt_f(r.l_s),
            opt_f(r.e_s),
            opt_f(r.reward),
            r.episode.to_string(),
            opt_u(r.step),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> MetricsError {
    MetricsError::Io(std::io::Error::other(e))
}

pub fn read_csv<R: std::io::Read>(input: R) -> Result<Vec<MetricRecord>, MetricsError> {
    let mut rd = csv::ReaderBuilder::new().has_headers(false).comment(Some(b'#')).from_reader(input);
    let mut out = Vec::new();
    for (idx, row) in rd.records().enumerate() {
        let row = row.map_err(|e| MetricsError::Parse { line: idx + 2, message: e.to_string() })?;
        let line = row.position().map_or(idx + 2, |p| p.line() as usize);
        if idx == 0 {
            if row.iter().ne(CSV_COLUMNS) {
                return Err(MetricsError::Parse { line, message: "unexpected header".into() });
            }
            continue;
        }
        let bad = |col: usize| MetricsError::Parse { line, message: format!("bad value in {}", CSV_COLUMNS[col]) };
        let f = |col: usize| -> Result<Option<f64>, MetricsError> {
            let s = &row[col];
            if s.is_empty() {
                Ok(None)
            } else {
                s.parse().map(Some).map_err(|_| bad(col))
            }
        };
        let u = |col: usize| -> Result<Option<u64>, MetricsError> {
            let s = &row[col];
            if s.is_empty() {
                Ok(None)
            } else {
                s.parse().map(Some).map_err(|_| bad(col))
            }
        };
        out.push(MetricRecord {
            time_s: f(0)?.ok_or_else(|| bad(0))?,
            node_id: u(1)?.map(|v| v as usize),
            cpu_util: f(2)?,
            power_w: f(3)?,
            link_id: u(4)?.map(|v| v as usize),
            tx_gbps: f(5)?,
            rx_gbps: f(6)?,
            slice_id: u(7)?.map(|v| v as usize),
            l_s: f(8)?,
            e_s: f(9)?,
            reward: f(10)?,
            episode: u(11)?.ok_or_else(|| bad(11))?,
            step: u(12)?,
        });
    }
    Ok(out)
}

pub fn write_jsonl<W: Write>(records: &[MetricRecord], mut out: W) -> Result<(), MetricsError> {
    for r in records {
        serde_json::to_writer(&mut out, r).map_err(std::io::Error::other)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_jsonl<R: BufRead>(input: R) -> Result<Vec<MetricRecord>, MetricsError> {
    let mut out = Vec::new();
    for (idx, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line).map_err(|e| MetricsError::Parse { line: idx + 1, message: e.to_string() })?,
        );
    }
    Ok(out)
}

/// One point of a training or evaluation curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub episode: u64,
    pub kind: CurveKind,
    pub mean_reward: f64,
    pub rewards: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tag: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CurveKind {
    Train,
    Eval,
}

/// Append-only JSON-lines curve file; each point is flushed as written.
pub struct CurveWriter {
    out: File,
}

impl CurveWriter {
    pub fn create(path: &Path) -> Result<Self, MetricsError> {
        let out = OpenOptions::new().create(true).write(true).truncate(true).open(path)?;
        Ok(Self { out })
    }

    pub fn append(&mut self, point: &CurvePoint) -> Result<(), MetricsError> {
        let mut line = serde_json::to_vec(point).map_err(std::io::Error::other)?;
        line.push(b'\n');
        self.out.write_all(&line)?;
        self.out.flush()?;
        Ok(())
    }
}

pub fn read_curve(path: &Path) -> Result<Vec<CurvePoint>, MetricsError> {
    let input = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (idx, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| MetricsError::Parse { line: idx + 1, message: e.to_string() })?);
    }
    Ok(out)
}

/// Outcome of evaluating one policy under one seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyRun {
    pub policy: String,
    pub seed: u64,
    /// Mean materialized reward of each episode.
    pub episode_rewards: Vec<f64>,
    /// Mean per-task delay, seconds.
    pub mean_delay: f64,
    /// Mean per-task attributed energy, joules.
    pub mean_energy: f64,
}

impl PolicyRun {
    pub fn mean_reward(&self) -> f64 {
        mean(&self.episode_rewards)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub policy: String,
    pub seeds: usize,
    pub episodes: usize,
    pub mean_reward: f64,
    /// Sample standard deviation of the per-seed mean rewards (0 for one seed).
    pub std_reward: f64,
    /// Sample standard deviation over every episode's mean reward.
    pub episode_std: f64,
    pub mean_delay: f64,
    pub mean_energy: f64,
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

fn sample_std(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

/// Groups runs by policy (first-appearance order) and aggregates them.
pub fn summarize(runs: &[PolicyRun]) -> Vec<SummaryRow> {
    let mut order: Vec<&str> = Vec::new();
    for r in runs {
        if !order.contains(&r.policy.as_str()) {
            order.push(&r.policy);
        }
    }
    order
        .into_iter()
        .map(|policy| {
            let group: Vec<&PolicyRun> = runs.iter().filter(|r| r.policy == policy).collect();
            let per_seed: Vec<f64> = group.iter().map(|r| r.mean_reward()).collect();
            SummaryRow {
                policy: policy.to_string(),
                seeds: group.len(),
                episodes: group.iter().map(|r| r.episode_rewards.len()).sum(),
                mean_reward: mean(&per_seed),
                std_reward: sample_std(&per_seed),
                episode_std: sample_std(&group.iter().flat_map(|r| r.episode_rewards.iter().copied()).collect::<Vec<_>>()),
                mean_delay: mean(&group.iter().map(|r| r.mean_delay).collect::<Vec<_>>()),
                mean_energy: mean(&group.iter().map(|r| r.mean_energy).collect::<Vec<_>>()),
            }
        })
        .collect()
}

/// Fixed-width text table of summary rows.
pub fn format_table(rows: &[SummaryRow]) -> String {
    let mut s = format!(
        "{:<16} {:>5} {:>8} {:>10} {:>10} {:>12} {:>12} {:>12}\n",
        "policy", "seeds", "episodes", "reward", "seed_std", "episode_std", "delay_s", "energy_j"
    );
    for r in rows {
        s.push_str(&format!(
            "{:<16} {:>5} {:>8} {:>10.4} {:>10.4} {:>12.4} {:>12.4} {:>12.2}\n",
            r.policy, r.seeds, r.episodes, r.mean_reward, r.std_reward, r.episode_std, r.mean_delay, r.mean_energy
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::SliceOutcome;

    fn tick(t: f64) -> TickRecord {
        TickRecord {
            time_s: t,
            episode: 2,
            nodes: vec![NodeSample { node_id: 0, cpu_util: 0.1 + t / 7.0, power_w: 100.0 + t / 3.0 }],
            links: vec![LinkSample { link_id: 1, tx_gbps: 1.0 / 3.0, rx_gbps: 0.0 }],
            attributed_j: 0.0,
            unattributed_j: 0.0,
            exact_j: 0.0,
        }
    }

    fn sample_run() -> MetricRun {
        let mut run = MetricRun::new();
        for t in 1..=5 {
            run.record_tick(&tick(t as f64));
        }
        run.record_reward(
            2,
            &MaterializedReward {
                step_id: 4,
                reward: 0.123456789012345678,
                step_end: 5.0,
                materialized_at: 5.5,
                slices: vec![
                    SliceOutcome { slice_id: 0, tasks: 2, l_s: Some(1.0 / 3.0), e_s: Some(77.7), l_m: Some(0.1), e_m: Some(1.0) },
                    SliceOutcome { slice_id: 1, tasks: 0, l_s: None, e_s: None, l_m: None, e_m: None },
                ],
            },
        );
        run
    }

    #[test]
    fn round_trips_are_exact() {
        let dir = tempfile::tempdir().unwrap();
        let run = sample_run();
        for fmt in [Format::Csv, Format::JsonLines] {
            let path = dir.path().join(format!("m.{}", fmt.extension()));
            run.export(&path, fmt).unwrap();
            assert_eq!(MetricRun::import(&path, fmt).unwrap(), run);
        }
    }

    #[test]
    fn empty_run_is_header_only() {
        let mut buf = Vec::new();
        write_csv(&[], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text, format!("{SCHEMA_LINE}\n{}\n", CSV_COLUMNS.join(",")));
        assert!(read_csv(text.as_bytes()).unwrap().is_empty());
    }

    #[test]
    fn summary_oracle() {
        let run = |p: &str, seed, rs: Vec<f64>| PolicyRun {
            policy: p.into(),
            seed,
            episode_rewards: rs,
            mean_delay: seed as f64,
            mean_energy: 10.0 * seed as f64,
        };
        let runs = vec![run("a", 1, vec![0.5, 0.7]), run("b", 1, vec![0.2]), run("a", 2, vec![0.8]), run("a", 3, vec![0.9, 0.9])];
        let rows = summarize(&runs);
        assert_eq!(rows.len(), 2);
        let a = &rows[0];
        // Per-seed means 0.6, 0.8, 0.9: mean 0.7666.., sample variance 0.02333..
        assert_eq!((a.policy.as_str(), a.seeds, a.episodes), ("a", 3, 5));
        assert!((a.mean_reward - 2.3 / 3.0).abs() < 1e-12);
        assert!((a.std_reward - (0.07f64 / 3.0).sqrt()).abs() < 1e-12);
        // Episodes 0.5, 0.7, 0.8, 0.9, 0.9: squared deviations sum to 0.112.
        assert!((a.episode_std - 0.028f64.sqrt()).abs() < 1e-12);
        assert_eq!(a.mean_delay, 2.0);
        assert_eq!(rows[1].std_reward, 0.0);
        let dup = summarize(&[runs[1].clone(), runs[1].clone()]);
        assert_eq!((dup[0].mean_reward, dup[0].std_reward), (0.2, 0.0));
    }

    #[test]
    fn curve_appends() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("curve.jsonl");
        let mut w = CurveWriter::create(&path).unwrap();
        for e in 0..3 {
            w.append(&CurvePoint { episode: e, kind: CurveKind::Train, mean_reward: 0.5, rewards: 200, tag: None })
                .unwrap();
            assert_eq!(read_curve(&path).unwrap().len() as u64, e + 1);
        }
    }

    #[test]
    fn format_parsing() {
        assert_eq!("csv".parse::<Format>().unwrap(), Format::Csv);
        assert_eq!("json-lines".parse::<Format>().unwrap(), Format::JsonLines);
        assert!("xml".parse::<Format>().is_err());
    }
}
