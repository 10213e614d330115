//! Hash building overlapped with inference.
//!
//! A producer predicts hash tables batch by batch and pushes them into a
//! bounded FIFO; the consumer pops them in order and places and times each
//! batch. In simulated-time mode both sides run on the caller's thread and the
//! overlap is computed from the per-batch costs. In concurrent mode the
//! producer is a real thread connected by a bounded channel. Both modes yield
//! the same tables, placements and metrics.

use std::fmt;
use std::str::FromStr;
use std::sync::mpsc;
use std::thread;
use std::time::{Duration, Instant};

use crate::error::{Error, Result};
use crate::predictor::{HashBuilder, HashTable};
use crate::simulator::{Aggregate, BatchOutcome, Engine, Metrics, SimConfig};
use crate::workload::RoutingTrace;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExecutionMode {
    SimulatedTime,
    Concurrent,
}

impl FromStr for ExecutionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sim" | "simulated" => Ok(ExecutionMode::SimulatedTime),
            "concurrent" => Ok(ExecutionMode::Concurrent),
            other => Err(Error::Config(format!("unknown mode {other:?}"))),
        }
    }
}

impl fmt::Display for ExecutionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ExecutionMode::SimulatedTime => "sim",
            ExecutionMode::Concurrent => "concurrent",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PipelineConfig {
    pub queue_capacity: usize,
    pub mode: ExecutionMode,
    /// Simulated time to build one hash table.
    pub hash_build_cost: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            queue_capacity: 2,
            mode: ExecutionMode::SimulatedTime,
            hash_build_cost: 1.0,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.queue_capacity < 1 {
            return Err(Error::Config("queue capacity must be at least 1".into()));
        }
        if !(self.hash_build_cost >= 0.0 && self.hash_build_cost.is_finite()) {
            return Err(Error::Config(format!(
                "hash build cost must be finite and >= 0, got {}",
                self.hash_build_cost
            )));
        }
        Ok(())
    }
}

/// Event times of the two actors, one entry per batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    /// When the table of each batch entered the queue.
    pub enqueue: Vec<f64>,
    /// When inference of each batch began (its table was dequeued).
    pub start: Vec<f64>,
    pub finish: Vec<f64>,
    /// Time the consumer waited on an empty queue before each batch.
    pub stall: Vec<f64>,
    pub total_time: f64,
}

/// Computes the producer/consumer schedule.
///
/// The producer builds table `i` right after enqueuing table `i − 1` and
/// blocks until table `i − q` has been dequeued; the consumer starts batch `i`
/// once batch `i − 1` is done and table `i` is available.
pub fn schedule(
    build_costs: &[f64],
    inference_times: &[f64],
    queue_capacity: usize,
) -> Result<Schedule> {
    if build_costs.len() != inference_times.len() {
        return Err(Error::Config(
            "build and inference cost lists differ in length".into(),
        ));
    }
    if queue_capacity < 1 {
        return Err(Error::Config("queue capacity must be at least 1".into()));
    }
    let n = build_costs.len();
    let mut enqueue = Vec::with_capacity(n);
    let mut start: Vec<f64> = Vec::with_capacity(n);
    let mut finish: Vec<f64> = Vec::with_capacity(n);
    let mut stall = Vec::with_capacity(n);
    for i in 0..n {
        let built = enqueue.last().copied().unwrap_or(0.0) + build_costs[i];
        let room = if i >= queue_capacity {
            start[i - queue_capacity]
        } else {
            0.0
        };
        let queued = built.max(room);
        let previous = finish.last().copied().unwrap_or(0.0);
        let begin = previous.max(queued);
        stall.push(begin - previous);
        enqueue.push(queued);
        start.push(begin);
        finish.push(begin + inference_times[i]);
    }
    Ok(Schedule {
        total_time: finish.last().copied().unwrap_or(0.0),
        enqueue,
        start,
        finish,
        stall,
    })
}

#[derive(Debug, Clone)]
pub struct PipelineRun {
    pub tables: Vec<HashTable>,
    pub outcomes: Vec<BatchOutcome>,
    pub schedule: Schedule,
    /// Per-batch metrics with stall time filled in.
    pub metrics: Vec<Metrics>,
    pub aggregate: Aggregate,
    /// Only recorded in concurrent mode; never part of logical outputs.
    pub wall_clock: Option<Duration>,
}

impl PipelineRun {
    /// True when tables, placements and metrics all match.
    pub fn same_logical_output(&self, other: &PipelineRun) -> bool {
        self.tables == other.tables
            && self.metrics == other.metrics
            && self.schedule == other.schedule
            && self
                .outcomes
                .iter()
                .zip(&other.outcomes)
                .all(|(a, b)| a.placement == b.placement && a.executed == b.executed && a.log == b.log)
            && self.outcomes.len() == other.outcomes.len()
    }
}

/// A pipeline that stopped early. Holds the metrics of every batch that
/// completed before `batch`.
#[derive(Debug)]
pub struct PipelineFailure {
    pub batch: usize,
    pub partial: Vec<Metrics>,
    pub error: Error,
}

impl fmt::Display for PipelineFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "pipeline failed at batch {} after {} completed batches: {}",
            self.batch,
            self.partial.len(),
            self.error
        )
    }
}

impl std::error::Error for PipelineFailure {}

impl From<PipelineFailure> for Error {
    fn from(f: PipelineFailure) -> Self {
        Error::Pipeline {
            batch: f.batch,
            source: Box::new(f.error),
        }
    }
}

struct Consumer {
    engine: Engine,
    tables: Vec<HashTable>,
    outcomes: Vec<BatchOutcome>,
}

impl Consumer {
    fn failure(self, batch: usize, error: Error) -> PipelineFailure {
        PipelineFailure {
            batch,
            partial: self.outcomes.into_iter().map(|o| o.metrics).collect(),
            error,
        }
    }

    fn consume(&mut self, trace: &RoutingTrace, index: usize, table: HashTable) -> Result<()> {
        if table.batch != trace.batches[index].index {
            return Err(Error::Config(format!(
                "expected table for batch {}, got batch {}",
                trace.batches[index].index, table.batch
            )));
        }
        let outcome = self.engine.step(&trace.batches[index], &table)?;
        self.tables.push(table);
        self.outcomes.push(outcome);
        Ok(())
    }
}

pub fn run_pipeline(
    trace: &RoutingTrace,
    predictor: &dyn HashBuilder,
    sim: SimConfig,
    config: &PipelineConfig,
) -> Result<PipelineRun, PipelineFailure> {
    let setup = |error| PipelineFailure {
        batch: 0,
        partial: Vec::new(),
        error,
    };
    config.validate().map_err(setup)?;
    trace.validate().map_err(setup)?;
    let mut consumer = Consumer {
        engine: Engine::new(trace.shape, sim).map_err(setup)?,
        tables: Vec::with_capacity(trace.batches.len()),
        outcomes: Vec::with_capacity(trace.batches.len()),
    };

    let wall_clock = match config.mode {
        ExecutionMode::SimulatedTime => {
            for (i, batch) in trace.batches.iter().enumerate() {
                let step = predictor
                    .build(batch)
                    .and_then(|table| consumer.consume(trace, i, table));
                if let Err(e) = step {
                    return Err(consumer.failure(i, e));
                }
            }
            None
        }
        ExecutionMode::Concurrent => {
            let began = Instant::now();
            let (tx, rx) = mpsc::sync_channel::<Result<HashTable>>(config.queue_capacity);
            let result = thread::scope(|scope| {
                scope.spawn(move || {
                    for batch in &trace.batches {
                        let table = predictor.build(batch);
                        let failed = table.is_err();
                        if tx.send(table).is_err() || failed {
                            break;
                        }
                    }
                });
                for i in 0..trace.batches.len() {
                    let step = match rx.recv() {
                        Ok(Ok(table)) => consumer.consume(trace, i, table),
                        Ok(Err(e)) => Err(e),
                        Err(_) => Err(Error::Config("hash builder stopped early".into())),
                    };
                    if let Err(e) = step {
                        // dropping the receiver unblocks the producer
                        drop(rx);
                        return Err((i, e));
                    }
                }
                Ok(())
            });
            if let Err((i, e)) = result {
                return Err(consumer.failure(i, e));
            }
            Some(began.elapsed())
        }
    };

    let n = consumer.outcomes.len();
    let inference: Vec<f64> = consumer.outcomes.iter().map(|o| o.metrics.latency).collect();
    let sched = schedule(&vec![config.hash_build_cost; n], &inference, config.queue_capacity)
        .map_err(|e| PipelineFailure {
            batch: n,
            partial: Vec::new(),
            error: e,
        })?;
    let metrics: Vec<Metrics> = consumer
        .outcomes
        .iter()
        .zip(&sched.stall)
        .map(|(o, &stall)| Metrics {
            stall,
            ..o.metrics.clone()
        })
        .collect();
    let aggregate = Aggregate::from_metrics(&metrics).map_err(|e| PipelineFailure {
        batch: n,
        partial: metrics.clone(),
        error: e,
    })?;
    Ok(PipelineRun {
        tables: consumer.tables,
        outcomes: consumer.outcomes,
        schedule: sched,
        metrics,
        aggregate,
        wall_clock,
    })
}

/// Runs both modes with the same inputs and compares their logical outputs.
pub fn mode_equivalence_check(
    trace: &RoutingTrace,
    predictor: &dyn HashBuilder,
    sim: SimConfig,
    config: &PipelineConfig,
) -> bool {
    let run = |mode| {
        run_pipeline(
            trace,
            predictor,
            sim,
            &PipelineConfig { mode, ..*config },
        )
    };
    match (run(ExecutionMode::SimulatedTime), run(ExecutionMode::Concurrent)) {
        (Ok(a), Ok(b)) => a.same_logical_output(&b),
        _ => false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::predictor::OracleHashBuilder;
    use crate::simulator::{CostModel, Strategy};
    use crate::workload::{generate_trace, Batch, ModelShape};

    #[test]
    fn cheap_builds_only_stall_the_first_batch() {
        let s = schedule(&[2.0; 3], &[5.0; 3], 1).unwrap();
        assert_eq!(s.total_time, 17.0);
        assert_eq!(s.stall, vec![2.0, 0.0, 0.0]);
    }

    #[test]
    fn slow_builds_stall_every_batch() {
        let s = schedule(&[8.0; 3], &[5.0; 3], 1).unwrap();
        assert_eq!(s.stall, vec![8.0, 3.0, 3.0]);
        // 8 build, then three 5-unit batches separated by two 3-unit stalls
        assert_eq!(s.total_time, 29.0);
    }

    #[test]
    fn free_builds_overlap_perfectly() {
        let inference = [3.0, 1.0, 4.0, 1.0, 5.0];
        let s = schedule(&[0.0; 5], &inference, 8).unwrap();
        assert_eq!(s.total_time, inference.iter().sum::<f64>());
    }

    #[test]
    fn rejects_bad_queue_capacity() {
        assert!(schedule(&[1.0], &[1.0], 0).is_err());
        assert!(PipelineConfig {
            queue_capacity: 0,
            ..PipelineConfig::default()
        }
        .validate()
        .is_err());
    }

    struct FailsAt(usize);

    impl HashBuilder for FailsAt {
        fn build(&self, batch: &Batch) -> Result<HashTable> {
            if batch.index == self.0 {
                Err(Error::Numeric("predictor blew up".into()))
            } else {
                HashTable::from_assignment(batch.index, 4, batch.oracle_routing.clone())
            }
        }
    }

    #[test]
    fn producer_failure_reports_partial_metrics() {
        let trace = generate_trace(ModelShape::new(1, 4, 4).with_batch_size(8), 6, 1.0, 2).unwrap();
        let sim = SimConfig {
            strategy: Strategy::Replicated,
            capacity: 8,
            cost: CostModel::default(),
        };
        for mode in [ExecutionMode::SimulatedTime, ExecutionMode::Concurrent] {
            let config = PipelineConfig {
                mode,
                queue_capacity: 1,
                ..PipelineConfig::default()
            };
            let failure = run_pipeline(&trace, &FailsAt(3), sim, &config).unwrap_err();
            assert_eq!(failure.batch, 3);
            assert_eq!(failure.partial.len(), 3);
            assert!(matches!(failure.error, Error::Numeric(_)));
        }
    }

    #[test]
    fn modes_agree_on_a_small_trace() {
        let trace = generate_trace(ModelShape::new(2, 8, 4).with_batch_size(16), 12, 1.2, 4).unwrap();
        let oracle = OracleHashBuilder { num_experts: 8 };
        let sim = SimConfig {
            strategy: Strategy::Replicated,
            capacity: 16,
            cost: CostModel::default(),
        };
        assert!(mode_equivalence_check(
            &trace,
            &oracle,
            sim,
            &PipelineConfig::default()
        ));
    }
}
