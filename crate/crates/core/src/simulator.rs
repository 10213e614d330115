//! Deterministic cost model for batch execution.
//!
//! A layer first performs all of its transfers one after another, then every
//! slot works through its queue of tokens in parallel with the other slots of
//! the same wave. Waves (only present in fallback layers) run back to back.
//!
//! Tokens the predictor sent to the wrong expert are moved to a replica of
//! their true expert when one is resident. Otherwise the true expert is loaded
//! into an extra slot for that layer, charged as one `t_load` per expert.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::placement::{
    apply_batch, DeviceState, LayerPlacement, Placement, Slot, TransferKind, TransferLog,
};
use crate::planner::{cap_replicas, demand_counts, ReplicaPlan};
use crate::predictor::{evaluate_accuracy, HashBuilder, HashTable};
use crate::workload::{Batch, ModelShape, RoutingTrace};

/// Abstract time units for compute and transfers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    /// One token through one expert.
    pub t_compute: f64,
    /// Host to device copy of an expert.
    pub t_load: f64,
    /// On-device copy of a resident expert.
    pub t_replicate: f64,
    /// Device to host eviction of one replica.
    pub t_offload: f64,
}

impl Default for CostModel {
    fn default() -> Self {
        Self {
            t_compute: 1.0,
            t_load: 10.0,
            t_replicate: 2.0,
            t_offload: 5.0,
        }
    }
}

impl CostModel {
    /// Compute only; every transfer is free.
    pub fn compute_only(t_compute: f64) -> Self {
        Self {
            t_compute,
            t_load: 0.0,
            t_replicate: 0.0,
            t_offload: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("t_load", self.t_load),
            ("t_replicate", self.t_replicate),
            ("t_offload", self.t_offload),
        ];
        for (name, v) in fields {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if !(self.t_compute > 0.0 && self.t_compute.is_finite()) {
            return Err(Error::Config(format!(
                "t_compute must be finite and > 0, got {}",
                self.t_compute
            )));
        }
        Ok(())
    }

    pub fn event_cost(&self, kind: TransferKind) -> f64 {
        match kind {
            TransferKind::Load => self.t_load,
            TransferKind::Replicate => self.t_replicate,
            TransferKind::Offload => self.t_offload,
            TransferKind::Fallback => 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Strategy {
    /// Every expert resident, one replica each.
    #[serde(rename = "resident-all")]
    ResidentAll,
    /// Only predicted experts resident, one replica each.
    #[serde(rename = "distinct")]
    DistinctOnly,
    /// Predicted experts replicated up to their capped demand.
    #[serde(rename = "replicated")]
    Replicated,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [
        Strategy::ResidentAll,
        Strategy::DistinctOnly,
        Strategy::Replicated,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::ResidentAll => "resident-all",
            Strategy::DistinctOnly => "distinct",
            Strategy::Replicated => "replicated",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "resident-all" => Ok(Strategy::ResidentAll),
            "distinct" | "distinct-only" => Ok(Strategy::DistinctOnly),
            "replicated" => Ok(Strategy::Replicated),
            other => Err(Error::Config(format!("unknown strategy {other:?}"))),
        }
    }
}

/// Timing of one layer of one batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerTiming {
    pub makespan: f64,
    pub busy: f64,
    pub transfer_time: f64,
    /// Slots the layer keeps occupied (the widest wave).
    pub slots: usize,
}

impl LayerTiming {
    /// Longest queue of the compute phase, in time units.
    pub fn compute_time(&self) -> f64 {
        self.makespan - self.transfer_time
    }
}

/// Times one layer given the slots each token runs on and the transfer time
/// spent before compute.
pub fn simulate_layer(
    layer: &LayerPlacement,
    transfer_time: f64,
    cost: &CostModel,
) -> Result<LayerTiming> {
    if layer.token_slots.is_empty() {
        return Err(Error::Config("cannot time a layer without tokens".into()));
    }
    let mut queues = vec![0usize; layer.slots.len()];
    for &slot in &layer.token_slots {
        *queues.get_mut(slot).ok_or_else(|| {
            Error::Placement(format!("token mapped to missing slot {slot}"))
        })? += 1;
    }
    let waves = layer.num_waves();
    let mut wave_queue = vec![0usize; waves];
    let mut wave_slots = vec![0usize; waves];
    for (slot, &q) in layer.slots.iter().zip(&queues) {
        wave_queue[slot.wave] = wave_queue[slot.wave].max(q);
        wave_slots[slot.wave] += 1;
    }
    let compute: f64 = wave_queue.iter().map(|&q| q as f64 * cost.t_compute).sum();
    Ok(LayerTiming {
        makespan: transfer_time + compute,
        busy: layer.token_slots.len() as f64 * cost.t_compute,
        transfer_time,
        slots: wave_slots.into_iter().max().unwrap_or(0),
    })
}

/// `busy / (slots × makespan)`, clamped to `[0, 1]`.
pub fn utilization(busy: f64, slots: usize, makespan: f64) -> Result<f64> {
    if makespan.is_nan() || makespan <= 0.0 {
        return Err(Error::UndefinedMetric(format!(
            "utilization needs a positive makespan, got {makespan}"
        )));
    }
    if slots == 0 {
        return Err(Error::UndefinedMetric(
            "utilization needs at least one slot".into(),
        ));
    }
    Ok((busy / (slots as f64 * makespan)).clamp(0.0, 1.0))
}

/// Per-batch measurements; one row of the metrics CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub batch: usize,
    pub strategy: Strategy,
    pub latency: f64,
    pub throughput: f64,
    pub utilization: f64,
    pub stall: f64,
    pub transfer_time: f64,
    pub prediction_accuracy: f64,
    pub experts: usize,
    pub capacity: usize,
    pub tokens: usize,
    pub busy_time: f64,
    pub slot_time: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimConfig {
    pub strategy: Strategy,
    /// Slots per layer for the distinct and replicated strategies.
    pub capacity: usize,
    pub cost: CostModel,
}

/// Everything produced for one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchOutcome {
    /// Placement derived from the predicted table.
    pub placement: Placement,
    /// Slots the tokens actually ran on after misprediction correction.
    pub executed: Placement,
    pub log: TransferLog,
    pub layers: Vec<LayerTiming>,
    pub metrics: Metrics,
}

/// Replica caps per layer; layers whose capacity is too small get no entry so
/// placement falls back for them.
pub fn plan_with_fallback(table: &HashTable, capacity: usize) -> Result<ReplicaPlan> {
    let mut layers = Vec::with_capacity(table.num_layers());
    for layer in 0..table.num_layers() {
        match cap_replicas(&demand_counts(table, layer)?, capacity, layer) {
            Ok(caps) => layers.push(caps),
            Err(Error::InfeasibleCapacity { .. }) => layers.push(BTreeMap::new()),
            Err(e) => return Err(e),
        }
    }
    Ok(ReplicaPlan { capacity, layers })
}

/// Maps every token onto a slot of its true expert.
///
/// Correctly predicted tokens keep their planned slot. Mispredicted tokens
/// take the least loaded resident replica of their true expert, or an extra
/// slot in the last wave when none is resident. Returns the executed layer
/// and the number of extra slots.
pub fn correct_layer(planned: &LayerPlacement, truth: &[usize]) -> Result<(LayerPlacement, usize)> {
    if planned.token_slots.len() != truth.len() {
        return Err(Error::Placement(format!(
            "placement maps {} tokens, batch has {}",
            planned.token_slots.len(),
            truth.len()
        )));
    }
    let mut slots = planned.slots.clone();
    let mut queues = vec![0usize; slots.len()];
    let mut token_slots = vec![usize::MAX; truth.len()];
    for (s, &expert) in truth.iter().enumerate() {
        let slot = planned.token_slots[s];
        if planned.slots[slot].expert == expert {
            token_slots[s] = slot;
            queues[slot] += 1;
        }
    }
    let last_wave = planned.num_waves().saturating_sub(1);
    let mut extra = 0;
    for (s, &expert) in truth.iter().enumerate() {
        if token_slots[s] != usize::MAX {
            continue;
        }
        let best = (0..slots.len())
            .filter(|&i| slots[i].expert == expert)
            .min_by_key(|&i| (queues[i], i));
        let slot = match best {
            Some(i) => i,
            None => {
                let ordinal = slots.iter().filter(|x| x.expert == expert).count();
                slots.push(Slot {
                    expert,
                    ordinal,
                    wave: last_wave,
                });
                queues.push(0);
                extra += 1;
                slots.len() - 1
            }
        };
        token_slots[s] = slot;
        queues[slot] += 1;
    }
    Ok((
        LayerPlacement {
            slots,
            token_slots,
            fallback: planned.fallback,
        },
        extra,
    ))
}

/// Consumer-side state: the device and the strategy it runs.
#[derive(Debug, Clone)]
pub struct Engine {
    config: SimConfig,
    shape: ModelShape,
    state: DeviceState,
}

impl Engine {
    pub fn new(shape: ModelShape, config: SimConfig) -> Result<Self> {
        shape.validate()?;
        config.cost.validate()?;
        if config.capacity < 1 {
            return Err(Error::Config("capacity must be at least 1".into()));
        }
        let state = match config.strategy {
            Strategy::ResidentAll => {
                DeviceState::all_resident(shape.num_layers, shape.experts_per_layer)
            }
            _ => DeviceState::empty(shape.num_layers, config.capacity),
        };
        Ok(Self {
            config,
            shape,
            state,
        })
    }

    pub fn device(&self) -> &DeviceState {
        &self.state
    }

    /// Places and times one batch given its predicted table.
    pub fn step(&mut self, batch: &Batch, table: &HashTable) -> Result<BatchOutcome> {
        let cost = &self.config.cost;
        let accuracy = evaluate_accuracy(table, &batch.oracle_routing)?;

        let (placement, log) = match self.config.strategy {
            Strategy::ResidentAll => {
                let slots: Vec<Slot> = (0..self.shape.experts_per_layer)
                    .map(|e| Slot::new(e, 0))
                    .collect();
                let layers = batch
                    .oracle_routing
                    .iter()
                    .map(|row| LayerPlacement {
                        slots: slots.clone(),
                        token_slots: row.clone(),
                        fallback: false,
                    })
                    .collect();
                (Placement { layers }, TransferLog::default())
            }
            Strategy::DistinctOnly => {
                let plan = ReplicaPlan::distinct_only(table, self.config.capacity);
                apply_batch(&mut self.state, table, &plan)?
            }
            Strategy::Replicated => {
                let plan = plan_with_fallback(table, self.config.capacity)?;
                apply_batch(&mut self.state, table, &plan)?
            }
        };

        let mut executed = Vec::with_capacity(placement.layers.len());
        let mut timings = Vec::with_capacity(placement.layers.len());
        for (layer, planned) in placement.layers.iter().enumerate() {
            let (run, extra) = correct_layer(planned, &batch.oracle_routing[layer])?;
            let transfers: f64 = log
                .layer_events(layer)
                .map(|e| cost.event_cost(e.kind))
                .sum::<f64>()
                + extra as f64 * cost.t_load;
            timings.push(simulate_layer(&run, transfers, cost)?);
            executed.push(run);
        }

        let latency: f64 = timings.iter().map(|t| t.makespan).sum();
        let busy: f64 = timings.iter().map(|t| t.busy).sum();
        let slot_time: f64 = timings.iter().map(|t| t.slots as f64 * t.makespan).sum();
        let tokens = batch.num_tokens();
        let capacity = match self.config.strategy {
            Strategy::ResidentAll => self.shape.experts_per_layer,
            _ => self.config.capacity,
        };
        let metrics = Metrics {
            batch: batch.index,
            strategy: self.config.strategy,
            latency,
            throughput: tokens as f64 / latency,
            utilization: if slot_time > 0.0 {
                (busy / slot_time).clamp(0.0, 1.0)
            } else {
                return Err(Error::UndefinedMetric(format!(
                    "batch {} has zero slot time",
                    batch.index
                )));
            },
            stall: 0.0,
            transfer_time: timings.iter().map(|t| t.transfer_time).sum(),
            prediction_accuracy: accuracy,
            experts: self.shape.experts_per_layer,
            capacity,
            tokens,
            busy_time: busy,
            slot_time,
        };
        Ok(BatchOutcome {
            placement,
            executed: Placement { layers: executed },
            log,
            layers: timings,
            metrics,
        })
    }
}

/// Totals over a run of batches.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aggregate {
    pub total_latency: f64,
    pub throughput: f64,
    /// `Σ busy / Σ (slots × makespan)`
    pub utilization: f64,
    pub transfer_time: f64,
    pub mean_accuracy: f64,
}

impl Aggregate {
    pub fn from_metrics(metrics: &[Metrics]) -> Result<Self> {
        if metrics.is_empty() {
            return Err(Error::Aggregation("no batches to aggregate".into()));
        }
        let total_latency: f64 = metrics.iter().map(|m| m.latency + m.stall).sum();
        let tokens: usize = metrics.iter().map(|m| m.tokens).sum();
        let busy: f64 = metrics.iter().map(|m| m.busy_time).sum();
        let slot_time: f64 = metrics.iter().map(|m| m.slot_time).sum();
        Ok(Self {
            total_latency,
            throughput: tokens as f64 / total_latency,
            utilization: if slot_time > 0.0 {
                (busy / slot_time).clamp(0.0, 1.0)
            } else {
                0.0
            },
            transfer_time: metrics.iter().map(|m| m.transfer_time).sum(),
            mean_accuracy: metrics.iter().map(|m| m.prediction_accuracy).sum::<f64>()
                / metrics.len() as f64,
        })
    }
}

#[derive(Debug, Clone)]
pub struct StrategyRun {
    pub outcomes: Vec<BatchOutcome>,
    pub aggregate: Aggregate,
}

impl StrategyRun {
    pub fn metrics(&self) -> Vec<Metrics> {
        self.outcomes.iter().map(|o| o.metrics.clone()).collect()
    }
}

/// Runs every batch of `trace` through one strategy, without overlap.
pub fn simulate_strategy(
    trace: &RoutingTrace,
    predictor: &dyn HashBuilder,
    config: SimConfig,
) -> Result<StrategyRun> {
    trace.validate()?;
    let mut engine = Engine::new(trace.shape, config)?;
    let outcomes = trace
        .batches
        .iter()
        .map(|batch| {
            let table = predictor.build(batch)?;
            engine.step(batch, &table)
        })
        .collect::<Result<Vec<_>>>()?;
    let aggregate = Aggregate::from_metrics(
        &outcomes.iter().map(|o| o.metrics.clone()).collect::<Vec<_>>(),
    )?;
    Ok(StrategyRun {
        outcomes,
        aggregate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::predictor::OracleHashBuilder;
    use crate::workload::{generate_trace, generate_two_hot_trace};

    fn layer(slot_experts: &[usize], token_slots: Vec<usize>) -> LayerPlacement {
        LayerPlacement {
            slots: slot_experts
                .iter()
                .enumerate()
                .map(|(i, &e)| Slot::new(e, i))
                .collect(),
            token_slots,
            fallback: false,
        }
    }

    #[test]
    fn two_queues_of_32() {
        let lp = layer(&[0, 1], (0..64).map(|s| s % 2).collect());
        let t = simulate_layer(&lp, 0.0, &CostModel::compute_only(1.0)).unwrap();
        assert_eq!(t.makespan, 32.0);
        assert_eq!(t.busy, 64.0);
    }

    #[test]
    fn one_slot_per_token() {
        let lp = layer(&[0; 64], (0..64).collect());
        let t = simulate_layer(&lp, 0.0, &CostModel::compute_only(1.0)).unwrap();
        assert_eq!(t.makespan, 1.0);
    }

    #[test]
    fn single_token_costs_one_compute() {
        let lp = layer(&[3], vec![0]);
        let cost = CostModel::default();
        let t = simulate_layer(&lp, 0.0, &cost).unwrap();
        assert_eq!(t.makespan, cost.t_compute);
        assert!(simulate_layer(&layer(&[3], vec![]), 0.0, &cost).is_err());
    }

    #[test]
    fn transfers_precede_compute() {
        let lp = layer(&[0, 1], vec![0, 0, 1]);
        let t = simulate_layer(&lp, 7.0, &CostModel::default()).unwrap();
        assert_eq!(t.makespan, 9.0);
        assert_eq!(t.compute_time(), 2.0);
    }

    #[test]
    fn utilization_examples() {
        assert_eq!(utilization(64.0, 64, 32.0).unwrap(), 0.03125);
        assert_eq!(utilization(64.0, 2, 32.0).unwrap(), 1.0);
        assert_eq!(utilization(64.0, 64, 1.0).unwrap(), 1.0);
        assert!(matches!(
            utilization(1.0, 1, 0.0),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn mispredicted_tokens_move_to_their_true_expert() {
        // tokens 0..3 predicted on expert 0, truth sends token 3 to expert 1
        // (not resident) and token 2 to expert 2 (resident)
        let planned = layer(&[0, 0, 2], vec![0, 1, 0, 1]);
        let (run, extra) = correct_layer(&planned, &[0, 0, 2, 1]).unwrap();
        assert_eq!(extra, 1);
        assert_eq!(run.slots.len(), 4);
        let experts: Vec<usize> = (0..4).map(|s| run.token_expert(s)).collect();
        assert_eq!(experts, vec![0, 0, 2, 1]);
    }

    #[test]
    fn replication_matches_distinct_on_all_distinct_traces() {
        // B = E with one token per expert: no replication is ever requested
        let shape = ModelShape::new(2, 8, 4).with_batch_size(8);
        let mut trace = generate_trace(shape, 3, 0.0, 1).unwrap();
        for batch in &mut trace.batches {
            for (l, row) in batch.oracle_routing.iter_mut().enumerate() {
                *row = (0..8).map(|s| (s + l) % 8).collect();
            }
        }
        let oracle = OracleHashBuilder { num_experts: 8 };
        let run = |strategy| {
            simulate_strategy(
                &trace,
                &oracle,
                SimConfig {
                    strategy,
                    capacity: 8,
                    cost: CostModel::default(),
                },
            )
            .unwrap()
        };
        let distinct = run(Strategy::DistinctOnly);
        let replicated = run(Strategy::Replicated);
        for (a, b) in distinct.outcomes.iter().zip(&replicated.outcomes) {
            let mut a = a.metrics.clone();
            a.strategy = Strategy::Replicated;
            assert_eq!(a, b.metrics);
        }
    }

    #[test]
    fn busy_time_is_the_same_for_every_strategy() {
        let shape = ModelShape::new(2, 16, 4).with_batch_size(32);
        let trace = generate_trace(shape, 4, 1.2, 5).unwrap();
        let oracle = OracleHashBuilder { num_experts: 16 };
        let busy: Vec<f64> = Strategy::ALL
            .iter()
            .map(|&strategy| {
                let run = simulate_strategy(
                    &trace,
                    &oracle,
                    SimConfig {
                        strategy,
                        capacity: 32,
                        cost: CostModel::default(),
                    },
                )
                .unwrap();
                run.outcomes.iter().map(|o| o.metrics.busy_time).sum()
            })
            .collect();
        assert!(busy.windows(2).all(|w| w[0] == w[1]), "{busy:?}");
    }

    #[test]
    fn two_hot_trace_replicated_beats_resident_all() {
        let shape = ModelShape::new(2, 64, 8);
        let trace = generate_two_hot_trace(shape, 10, 2).unwrap();
        let oracle = OracleHashBuilder { num_experts: 64 };
        let run = |strategy| {
            simulate_strategy(
                &trace,
                &oracle,
                SimConfig {
                    strategy,
                    capacity: 64,
                    cost: CostModel::compute_only(1.0),
                },
            )
            .unwrap()
        };
        let all = run(Strategy::ResidentAll);
        let replicated = run(Strategy::Replicated);
        assert_eq!(all.aggregate.total_latency, 10.0 * 2.0 * 32.0);
        assert_eq!(replicated.aggregate.total_latency, 10.0 * 2.0);
        assert_eq!(all.aggregate.utilization, 1.0 / 32.0);
        assert_eq!(replicated.aggregate.utilization, 1.0);
    }

    #[test]
    fn strategy_names_round_trip() {
        for s in Strategy::ALL {
            assert_eq!(s.name().parse::<Strategy>().unwrap(), s);
        }
        assert!("everything".parse::<Strategy>().is_err());
    }
}
