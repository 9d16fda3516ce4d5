//! Per-slice task generation and trace replay.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use crate::model::{LinkId, NodeId, SliceId, Task};

#[derive(Debug, thiserror::Error)]
pub enum WorkloadError {
    #[error("invalid workload config: {field}: {message}")]
    Config { field: &'static str, message: String },
    #[error("trace line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("trace io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadConfig {
    /// Tasks per second, one entry per slice. A single entry applies to all.
    pub arrival_rate: Vec<f64>,
    #[serde(default = "default_low")]
    pub demand_low: f64,
    #[serde(default = "default_high")]
    pub demand_high: f64,
    /// Core-seconds of work per unit demand, per core of the node.
    #[serde(default = "default_scale")]
    pub work_scale: f64,
    /// Gigabits per unit demand, per Gb/s of link capacity.
    #[serde(default = "default_scale")]
    pub volume_scale: f64,
}

fn default_low() -> f64 {
    0.27
}
fn default_high() -> f64 {
    0.33
}
fn default_scale() -> f64 {
    1.0
}

impl Default for WorkloadConfig {
    fn default() -> Self {
        Self {
            arrival_rate: vec![1.0],
            demand_low: default_low(),
            demand_high: default_high(),
            work_scale: default_scale(),
            volume_scale: default_scale(),
        }
    }
}

impl WorkloadConfig {
    pub fn validate(&self) -> Result<(), WorkloadError> {
        let err = |field, message: String| Err(WorkloadError::Config { field, message });
        if self.arrival_rate.is_empty() {
            return err("arrival_rate", "needs at least one rate".into());
        }
        if self.arrival_rate.iter().any(|r| !(*r > 0.0 && r.is_finite())) {
            return err("arrival_rate", "rates must be positive".into());
        }
        if !(self.demand_low > 0.0 && self.demand_low <= self.demand_high && self.demand_high <= 1.0) {
            return err(
                "demand_low",
                format!("need 0 < low <= high <= 1, got [{}, {}]", self.demand_low, self.demand_high),
            );
        }
        if !(self.work_scale > 0.0) {
            return err("work_scale", "must be positive".into());
        }
        if !(self.volume_scale >= 0.0) {
            return err("volume_scale", "must be non-negative".into());
        }
        Ok(())
    }

    pub fn rate_for(&self, slice: SliceId) -> f64 {
        if self.arrival_rate.len() == 1 {
            self.arrival_rate[0]
        } else {
            self.arrival_rate[slice]
        }
    }
}

/// Where a slice's tasks run, and how big "maximum resources" are there.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SliceSite {
    pub slice: SliceId,
    pub node: NodeId,
    pub link: LinkId,
    pub node_cores: f64,
    pub link_capacity: f64,
}

/// Draws the next task for a slice: exponential inter-arrival, uniform
/// demand fraction, work and volume linear in demand.
pub fn next_task<R: Rng + ?Sized>(
    site: &SliceSite,
    rng: &mut R,
    cfg: &WorkloadConfig,
    now: f64,
    id: u64,
) -> Task {
    let rate = cfg.rate_for(site.slice);
    let gap = Exp::new(rate).expect("validated rate").sample(rng);
    let r = if cfg.demand_high > cfg.demand_low {
        rng.random_range(cfg.demand_low..=cfg.demand_high)
    } else {
        cfg.demand_low
    };
    Task {
        id,
        slice_id: site.slice,
        node_id: site.node,
        link_id: site.link,
        arrival: now + gap,
        cpu_work: r * site.node_cores * cfg.work_scale,
        data_volume: r * site.link_capacity * cfg.volume_scale,
        demand_fraction: r,
    }
}

/// One row of a trace file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub arrival_s: f64,
    pub slice_id: SliceId,
    pub demand_fraction: f64,
    pub cpu_work: f64,
    pub data_volume: f64,
}

impl From<&Task> for TraceRecord {
    fn from(t: &Task) -> Self {
        Self {
            arrival_s: t.arrival,
            slice_id: t.slice_id,
            demand_fraction: t.demand_fraction,
            cpu_work: t.cpu_work,
            data_volume: t.data_volume,
        }
    }
}

const TRACE_HEADER: [&str; 5] = ["arrival_s", "slice_id", "demand_fraction", "cpu_work", "data_volume"];

pub fn write_trace<W: Write>(records: &[TraceRecord], out: W) -> Result<(), WorkloadError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(TRACE_HEADER).map_err(csv_io)?;
    for r in records {
        w.write_record([
            fmt_f64(r.arrival_s),
            r.slice_id.to_string(),
            fmt_f64(r.demand_fraction),
            fmt_f64(r.cpu_work),
            fmt_f64(r.data_volume),
        ])
        .map_err(csv_io)?;
    }
    w.flush()?;
    Ok(())
}

/// Shortest representation that parses back to the same bits.
pub(crate) fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

fn csv_io(e: csv::Error) -> WorkloadError {
    WorkloadError::Io(std::io::Error::other(e))
}

pub fn read_trace<R: Read>(input: R) -> Result<Vec<TraceRecord>, WorkloadError> {
    let mut rd = csv::ReaderBuilder::new().has_headers(false).flexible(true).from_reader(input);
    let mut out = Vec::new();
    for (idx, row) in rd.records().enumerate() {
        let line = idx + 1;
        let row = row.map_err(|e| WorkloadError::Parse { line, message: e.to_string() })?;
        if idx == 0 && row.iter().zip(TRACE_HEADER).all(|(a, b)| a.trim() == b) {
            continue;
        }
        if row.len() != 5 {
            return Err(WorkloadError::Parse { line, message: format!("expected 5 columns, got {}", row.len()) });
        }
        let num = |i: usize| -> Result<f64, WorkloadError> {
            row[i].trim().parse::<f64>().map_err(|_| WorkloadError::Parse {
                line,
                message: format!("column {} is not a number: {:?}", TRACE_HEADER[i], &row[i]),
            })
        };
        let slice_id = row[1].trim().parse::<usize>().map_err(|_| WorkloadError::Parse {
            line,
            message: format!("slice_id is not an index: {:?}", &row[1]),
        })?;
        let rec = TraceRecord {
            arrival_s: num(0)?,
            slice_id,
            demand_fraction: num(2)?,
            cpu_work: num(3)?,
            data_volume: num(4)?,
        };
        if !(rec.arrival_s >= 0.0) || !(rec.cpu_work > 0.0) || !(rec.data_volume >= 0.0) {
            return Err(WorkloadError::Parse {
                line,
                message: "need arrival >= 0, cpu_work > 0, data_volume >= 0".into(),
            });
        }
        if let Some(prev) = out.last().map(|p: &TraceRecord| p.arrival_s) {
            if rec.arrival_s < prev {
                return Err(WorkloadError::Parse { line, message: "arrivals must be non-decreasing".into() });
            }
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn replay_trace(path: &Path) -> Result<Vec<TraceRecord>, WorkloadError> {
    read_trace(std::fs::File::open(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::SeededRng;

    fn site() -> SliceSite {
        SliceSite { slice: 0, node: 0, link: 0, node_cores: 4.0, link_capacity: 10.0 }
    }

    fn draw(n: usize, cfg: &WorkloadConfig, seed: u64) -> Vec<Task> {
        let mut rng = SeededRng::new(seed, 0).rng();
        let mut now = 0.0;
        (0..n)
            .map(|i| {
                let t = next_task(&site(), &mut rng, cfg, now, i as u64);
                now = t.arrival;
                t
            })
            .collect()
    }

    #[test]
    fn demand_stays_in_band_and_centres() {
        let cfg = WorkloadConfig::default();
        let tasks = draw(10_000, &cfg, 1);
        assert!(tasks.iter().all(|t| (0.27..=0.33).contains(&t.demand_fraction)));
        let mean = tasks.iter().map(|t| t.demand_fraction).sum::<f64>() / tasks.len() as f64;
        assert!((mean - 0.30).abs() <= 0.002, "mean {mean}");
    }

    #[test]
    fn degenerate_band() {
        let cfg = WorkloadConfig { demand_low: 0.3, demand_high: 0.3, ..Default::default() };
        assert!(draw(100, &cfg, 2).iter().all(|t| t.demand_fraction == 0.3));
    }

    #[test]
    fn work_and_volume_scale_with_demand() {
        let cfg = WorkloadConfig { work_scale: 5.0, volume_scale: 2.0, ..Default::default() };
        for t in draw(50, &cfg, 3) {
            assert!((t.cpu_work - t.demand_fraction * 4.0 * 5.0).abs() < 1e-12);
            assert!((t.data_volume - t.demand_fraction * 10.0 * 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn inter_arrival_mean_matches_rate() {
        let cfg = WorkloadConfig { arrival_rate: vec![0.25], ..Default::default() };
        let tasks = draw(10_000, &cfg, 4);
        let mean_gap = tasks.last().unwrap().arrival / tasks.len() as f64;
        assert!((mean_gap - 4.0).abs() / 4.0 < 0.05, "mean gap {mean_gap}");
    }

    #[test]
    fn streams_reproducible() {
        let cfg = WorkloadConfig::default();
        assert_eq!(draw(20, &cfg, 9), draw(20, &cfg, 9));
    }

    #[test]
    fn config_validation() {
        let mut cfg = WorkloadConfig::default();
        cfg.demand_low = 0.4;
        assert!(cfg.validate().is_err());
        let cfg = WorkloadConfig { arrival_rate: vec![0.0], ..Default::default() };
        assert!(cfg.validate().is_err());
        assert!(WorkloadConfig::default().validate().is_ok());
    }

    #[test]
    fn empty_trace() {
        assert!(read_trace("".as_bytes()).unwrap().is_empty());
        assert!(read_trace("arrival_s,slice_id,demand_fraction,cpu_work,data_volume\n".as_bytes())
            .unwrap()
            .is_empty());
    }

    #[test]
    fn trace_round_trip() {
        let tasks = draw(200, &WorkloadConfig::default(), 11);
        let recs: Vec<TraceRecord> = tasks.iter().map(TraceRecord::from).collect();
        let mut buf = Vec::new();
        write_trace(&recs, &mut buf).unwrap();
        assert_eq!(read_trace(buf.as_slice()).unwrap(), recs);
    }

    #[test]
    fn malformed_row_names_line() {
        let text = "arrival_s,slice_id,demand_fraction,cpu_work,data_volume\n0.5,0,0.3,1.2,3\n1.0,zero,0.3,1.2,3\n";
        match read_trace(text.as_bytes()) {
            Err(WorkloadError::Parse { line, message }) => {
                assert_eq!(line, 3);
                assert!(message.contains("slice_id"));
            }
            other => panic!("expected parse error, got {other:?}"),
        }
        assert!(matches!(read_trace("0.5,0,0.3\n".as_bytes()), Err(WorkloadError::Parse { line: 1, .. })));
    }
}
