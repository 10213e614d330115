//! Metrics CSV I/O and strategy comparison tables.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::simulator::{Aggregate, Metrics, Strategy};

pub fn write_metrics_csv(metrics: &[Metrics], out: impl Write) -> Result<()> {
    let mut writer = csv::Writer::from_writer(out);
    for m in metrics {
        writer.serialize(m)?;
    }
    writer.flush()?;
    Ok(())
}

pub fn save_metrics_csv(metrics: &[Metrics], path: impl AsRef<Path>) -> Result<()> {
    write_metrics_csv(metrics, std::fs::File::create(path)?)
}

pub fn read_metrics_csv(input: impl Read) -> Result<Vec<Metrics>> {
    let mut reader = csv::Reader::from_reader(input);
    let mut rows = Vec::new();
    for (i, row) in reader.deserialize().enumerate() {
        let m: Metrics = row.map_err(|e| Error::Parse {
            line: i + 2,
            message: e.to_string(),
        })?;
        rows.push(m);
    }
    Ok(rows)
}

pub fn load_metrics_csv(path: impl AsRef<Path>) -> Result<Vec<Metrics>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
        _ => Error::Io(e),
    })?;
    read_metrics_csv(file)
}

/// One line of the comparison table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub strategy: Strategy,
    pub experts: usize,
    pub capacity: usize,
    pub batches: usize,
    pub tokens: usize,
    /// `Σ busy / Σ (slots × makespan)`
    pub mean_utilization: f64,
    pub throughput: f64,
    /// Inference plus stall time over all batches.
    pub total_latency: f64,
    pub total_stall: f64,
    pub total_transfer: f64,
    pub mean_accuracy: f64,
}

/// Aggregates metric streams into one row per (strategy, configuration).
///
/// Each stream must come from a single model configuration (expert count and
/// batch size); streams may mix strategies.
pub fn summarize(streams: &[Vec<Metrics>]) -> Result<Vec<SummaryRow>> {
    let mut groups: BTreeMap<(Strategy, usize, usize), Vec<Metrics>> = BTreeMap::new();
    for (i, stream) in streams.iter().enumerate() {
        let Some(first) = stream.first() else {
            return Err(Error::Aggregation(format!("stream {i} has no batches")));
        };
        if let Some(odd) = stream
            .iter()
            .find(|m| m.experts != first.experts || m.tokens != first.tokens)
        {
            return Err(Error::Aggregation(format!(
                "stream {i} mixes configurations: {} experts x {} tokens and {} experts x {} tokens",
                first.experts, first.tokens, odd.experts, odd.tokens
            )));
        }
        for m in stream {
            groups
                .entry((m.strategy, m.experts, m.capacity))
                .or_default()
                .push(m.clone());
        }
    }

    groups
        .into_iter()
        .map(|((strategy, experts, capacity), mut rows)| {
            // fixed summation order regardless of input order
            rows.sort_by(|a, b| {
                a.batch
                    .cmp(&b.batch)
                    .then(a.latency.total_cmp(&b.latency))
                    .then(a.stall.total_cmp(&b.stall))
                    .then(a.busy_time.total_cmp(&b.busy_time))
                    .then(a.slot_time.total_cmp(&b.slot_time))
                    .then(a.prediction_accuracy.total_cmp(&b.prediction_accuracy))
            });
            let agg = Aggregate::from_metrics(&rows)?;
            Ok(SummaryRow {
                strategy,
                experts,
                capacity,
                batches: rows.len(),
                tokens: rows.iter().map(|m| m.tokens).sum(),
                mean_utilization: agg.utilization,
                throughput: agg.throughput,
                total_latency: agg.total_latency,
                total_stall: rows.iter().map(|m| m.stall).sum(),
                total_transfer: agg.transfer_time,
                mean_accuracy: agg.mean_accuracy,
            })
        })
        .collect()
}

pub fn write_summary_csv(rows: &[SummaryRow], out: impl Write) -> Result<()> {
    let mut writer = csv::Writer::from_writer(out);
    for r in rows {
        writer.serialize(r)?;
    }
    writer.flush()?;
    Ok(())
}

/// Plain-text table with right-aligned columns.
pub fn format_table(rows: &[SummaryRow]) -> String {
    let header = [
        "strategy",
        "experts",
        "capacity",
        "batches",
        "utilization",
        "throughput",
        "latency",
        "stall",
        "transfer",
        "accuracy",
    ];
    let mut cells: Vec<Vec<String>> = vec![header.iter().map(|s| s.to_string()).collect()];
    for r in rows {
        cells.push(vec![
            r.strategy.to_string(),
            r.experts.to_string(),
            r.capacity.to_string(),
            r.batches.to_string(),
            format!("{:.2}%", r.mean_utilization * 100.0),
            format!("{:.4}", r.throughput),
            format!("{:.2}", r.total_latency),
            format!("{:.2}", r.total_stall),
            format!("{:.2}", r.total_transfer),
            format!("{:.4}", r.mean_accuracy),
        ]);
    }
    let widths: Vec<usize> = (0..header.len())
        .map(|c| cells.iter().map(|row| row[c].len()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for row in &cells {
        let line: Vec<String> = row
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(c, (cell, &w))| {
                if c == 0 {
                    format!("{cell:<w$}")
                } else {
                    format!("{cell:>w$}")
                }
            })
            .collect();
        out.push_str(line.join("  ").trim_end());
        out.push('\n');
    }
    out
}

/// `(batch, value)` series per strategy for external plotting.
pub fn plot_series(
    metrics: &[Metrics],
    value: impl Fn(&Metrics) -> f64,
) -> BTreeMap<Strategy, Vec<(usize, f64)>> {
    let mut series: BTreeMap<Strategy, Vec<(usize, f64)>> = BTreeMap::new();
    for m in metrics {
        series.entry(m.strategy).or_default().push((m.batch, value(m)));
    }
    for points in series.values_mut() {
        points.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)));
    }
    series
}

pub fn write_xy_csv(points: &[(usize, f64)], out: impl Write) -> Result<()> {
    let mut writer = csv::Writer::from_writer(out);
    writer.write_record(["x", "y"])?;
    for (x, y) in points {
        writer.write_record([x.to_string(), y.to_string()])?;
    }
    writer.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(batch: usize, utilization: f64, latency: f64) -> Metrics {
        let slot_time = 10.0 * latency;
        Metrics {
            batch,
            strategy: Strategy::Replicated,
            latency,
            throughput: 64.0 / latency,
            utilization,
            stall: 0.0,
            transfer_time: 0.0,
            prediction_accuracy: 1.0,
            experts: 8,
            capacity: 64,
            tokens: 64,
            busy_time: utilization * slot_time,
            slot_time,
        }
    }

    #[test]
    fn single_batch_summary_matches_the_batch() {
        let m = row(0, 0.4, 16.0);
        let s = summarize(&[vec![m.clone()]]).unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].mean_utilization, m.utilization);
        assert_eq!(s[0].throughput, m.throughput);
        assert_eq!(s[0].total_latency, m.latency);
    }

    #[test]
    fn utilization_is_time_weighted() {
        let s = summarize(&[vec![row(0, 0.5, 10.0), row(1, 1.0, 10.0)]]).unwrap();
        assert_eq!(s[0].mean_utilization, 0.75);
        let s = summarize(&[vec![row(0, 0.5, 30.0), row(1, 1.0, 10.0)]]).unwrap();
        assert_eq!(s[0].mean_utilization, 0.625);
    }

    #[test]
    fn mixed_configurations_are_rejected() {
        let mut other = row(1, 0.5, 10.0);
        other.experts = 64;
        assert!(matches!(
            summarize(&[vec![row(0, 0.5, 10.0), other]]),
            Err(Error::Aggregation(_))
        ));
        assert!(summarize(&[vec![]]).is_err());
    }

    #[test]
    fn metrics_csv_round_trip() {
        let rows = vec![row(0, 0.5, 10.0), row(1, 0.25, 12.5)];
        let mut buf = Vec::new();
        write_metrics_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with(
            "batch,strategy,latency,throughput,utilization,stall,transfer_time,prediction_accuracy,"
        ));
        assert_eq!(read_metrics_csv(buf.as_slice()).unwrap(), rows);
    }

    #[test]
    fn table_has_a_line_per_row() {
        let s = summarize(&[vec![row(0, 0.5, 10.0)]]).unwrap();
        let text = format_table(&s);
        assert_eq!(text.lines().count(), 2);
        assert!(text.contains("replicated"));
        assert!(text.contains("50.00%"));
    }
}
