//! Per-layer expert placement for one batch.
//!
//! For every MoE layer the device first drops experts the batch does not use
//! and replicas above the plan cap. Tokens are then walked in position order:
//! a token whose expert is not resident loads it, a token that finds every
//! resident replica of its expert already taken appends a new replica while
//! the cap allows, and otherwise tokens share replicas round-robin.
//!
//! When a layer's plan is unusable the layer falls back to one replica per
//! expert. If even that does not fit, experts take turns in waves of at most
//! `capacity` slots.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::planner::ReplicaPlan;
use crate::predictor::HashTable;

/// One resident copy of an expert.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Slot {
    pub expert: usize,
    pub ordinal: usize,
    /// Fallback layers run in several waves; everything else is wave 0.
    pub wave: usize,
}

impl Slot {
    pub fn new(expert: usize, ordinal: usize) -> Self {
        Self {
            expert,
            ordinal,
            wave: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerPlacement {
    pub slots: Vec<Slot>,
    /// Index into `slots` for every token of the batch.
    pub token_slots: Vec<usize>,
    pub fallback: bool,
}

impl LayerPlacement {
    pub fn num_waves(&self) -> usize {
        self.slots.iter().map(|s| s.wave + 1).max().unwrap_or(0)
    }

    pub fn token_expert(&self, token: usize) -> usize {
        self.slots[self.token_slots[token]].expert
    }
}

/// Slot layout of every layer of a batch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Placement {
    pub layers: Vec<LayerPlacement>,
}

/// Resident replicas of every layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeviceState {
    pub capacity: usize,
    /// Per layer, `(expert, ordinal)` in residency order.
    pub layers: Vec<Vec<(usize, usize)>>,
}

impl DeviceState {
    pub fn empty(num_layers: usize, capacity: usize) -> Self {
        Self {
            capacity,
            layers: vec![Vec::new(); num_layers],
        }
    }

    /// Every expert resident once, capacity equal to the expert count.
    pub fn all_resident(num_layers: usize, num_experts: usize) -> Self {
        Self {
            capacity: num_experts,
            layers: vec![(0..num_experts).map(|e| (e, 0)).collect(); num_layers],
        }
    }

    pub fn resident(&self, layer: usize) -> &[(usize, usize)] {
        &self.layers[layer]
    }

    /// Experts of `layer` that have no resident replica.
    pub fn host_set(&self, layer: usize, num_experts: usize) -> BTreeSet<usize> {
        let on_device: BTreeSet<usize> = self.layers[layer].iter().map(|&(e, _)| e).collect();
        (0..num_experts).filter(|e| !on_device.contains(e)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum TransferKind {
    Load,
    Replicate,
    Offload,
    /// Marks a layer whose plan could not be applied.
    Fallback,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TransferEvent {
    pub seq: usize,
    pub kind: TransferKind,
    pub layer: usize,
    pub expert: Option<usize>,
    pub ordinal: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TransferLog {
    pub events: Vec<TransferEvent>,
}

#[derive(Serialize)]
struct EventRow {
    event: TransferKind,
    layer: usize,
    expert: Option<usize>,
    ordinal: Option<usize>,
    seq: usize,
}

impl TransferLog {
    fn push(&mut self, kind: TransferKind, layer: usize, slot: Option<(usize, usize)>) {
        self.events.push(TransferEvent {
            seq: self.events.len(),
            kind,
            layer,
            expert: slot.map(|s| s.0),
            ordinal: slot.map(|s| s.1),
        });
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn layer_events(&self, layer: usize) -> impl Iterator<Item = &TransferEvent> {
        self.events.iter().filter(move |e| e.layer == layer)
    }

    pub fn count(&self, kind: TransferKind) -> usize {
        self.events.iter().filter(|e| e.kind == kind).count()
    }

    /// Columns: `event,layer,expert,ordinal,seq`.
    pub fn write_csv(&self, out: impl Write) -> Result<()> {
        let mut writer = csv::Writer::from_writer(out);
        for e in &self.events {
            writer.serialize(EventRow {
                event: e.kind,
                layer: e.layer,
                expert: e.expert,
                ordinal: e.ordinal,
                seq: e.seq,
            })?;
        }
        writer.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }
}

fn usable_caps(
    plan: &ReplicaPlan,
    demand: &BTreeMap<usize, usize>,
    layer: usize,
    capacity: usize,
) -> Option<BTreeMap<usize, usize>> {
    let caps = plan.layers.get(layer)?;
    if !demand.keys().all(|e| caps.get(e).is_some_and(|&c| c >= 1)) {
        return None;
    }
    let total: usize = demand.keys().map(|e| caps[e]).sum();
    (total <= capacity).then(|| demand.keys().map(|&e| (e, caps[&e])).collect())
}

/// Places one layer, appending its transfers to `log`.
fn place_layer(
    state: &mut DeviceState,
    table: &HashTable,
    plan: &ReplicaPlan,
    layer: usize,
    log: &mut TransferLog,
) -> Result<LayerPlacement> {
    let row = table.assignment.get(layer).ok_or_else(|| {
        Error::Placement(format!("table has no layer {layer}"))
    })?;
    let demand = &table.replica_count[layer];
    if layer >= state.layers.len() {
        return Err(Error::Placement(format!("device has no layer {layer}")));
    }
    let capacity = state.capacity;

    let (caps, fallback) = match usable_caps(plan, demand, layer, capacity) {
        Some(caps) => (caps, false),
        None => {
            log.push(TransferKind::Fallback, layer, None);
            (demand.keys().map(|&e| (e, 1)).collect(), true)
        }
    };

    // drop experts this batch does not use and replicas above the cap
    let resident = &mut state.layers[layer];
    let mut kept = Vec::with_capacity(resident.len());
    for &(e, o) in resident.iter() {
        if !caps.contains_key(&e) {
            log.push(TransferKind::Offload, layer, Some((e, o)));
        } else {
            kept.push((e, o));
        }
    }
    for (&e, &cap) in &caps {
        let mut ordinals: Vec<usize> = kept.iter().filter(|s| s.0 == e).map(|s| s.1).collect();
        ordinals.sort_unstable();
        for &o in ordinals.iter().skip(cap).rev() {
            log.push(TransferKind::Offload, layer, Some((e, o)));
            kept.retain(|&s| s != (e, o));
        }
    }
    *resident = kept;

    if demand.len() > capacity {
        return Ok(place_in_waves(state, row, layer, log));
    }

    let resident = &mut state.layers[layer];
    let mut ordinals: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for &(e, o) in resident.iter() {
        ordinals.entry(e).or_default().push(o);
    }
    for list in ordinals.values_mut() {
        list.sort_unstable();
    }
    let mut served: BTreeMap<usize, usize> = BTreeMap::new();
    let mut token_pairs = Vec::with_capacity(row.len());
    for &e in row {
        let k = served.entry(e).or_insert(0);
        let list = ordinals.entry(e).or_default();
        let ordinal = if list.is_empty() {
            log.push(TransferKind::Load, layer, Some((e, 0)));
            resident.push((e, 0));
            list.push(0);
            0
        } else if *k < list.len() {
            list[*k]
        } else if list.len() < caps[&e] {
            let o = list.len();
            log.push(TransferKind::Replicate, layer, Some((e, o)));
            resident.push((e, o));
            list.push(o);
            o
        } else {
            list[*k % list.len()]
        };
        *k += 1;
        token_pairs.push((e, ordinal));
    }

    let index: BTreeMap<(usize, usize), usize> =
        resident.iter().enumerate().map(|(i, &s)| (s, i)).collect();
    Ok(LayerPlacement {
        slots: resident.iter().map(|&(e, o)| Slot::new(e, o)).collect(),
        token_slots: token_pairs.iter().map(|p| index[p]).collect(),
        fallback,
    })
}

/// Runs a layer whose distinct experts exceed the capacity as a sequence of
/// waves, each holding at most `capacity` single-replica experts.
fn place_in_waves(
    state: &mut DeviceState,
    row: &[usize],
    layer: usize,
    log: &mut TransferLog,
) -> LayerPlacement {
    let capacity = state.capacity;
    let resident = &mut state.layers[layer];
    let mut order: Vec<usize> = resident.iter().map(|&(e, _)| e).collect();
    for &e in row {
        if !order.contains(&e) {
            order.push(e);
        }
    }

    let mut slots = Vec::with_capacity(order.len());
    for (wave, group) in order.chunks(capacity).enumerate() {
        if wave > 0 {
            for &(e, o) in resident.iter() {
                log.push(TransferKind::Offload, layer, Some((e, o)));
            }
            resident.clear();
        }
        for &e in group {
            if !resident.contains(&(e, 0)) {
                log.push(TransferKind::Load, layer, Some((e, 0)));
                resident.push((e, 0));
            }
            slots.push(Slot {
                expert: e,
                ordinal: 0,
                wave,
            });
        }
    }
    let index: BTreeMap<usize, usize> = slots.iter().enumerate().map(|(i, s)| (s.expert, i)).collect();
    LayerPlacement {
        token_slots: row.iter().map(|e| index[e]).collect(),
        slots,
        fallback: true,
    }
}

/// Places a single layer and returns only that layer's transfers.
pub fn apply_layer(
    state: &mut DeviceState,
    table: &HashTable,
    plan: &ReplicaPlan,
    layer: usize,
) -> Result<(LayerPlacement, TransferLog)> {
    let mut log = TransferLog::default();
    let placement = place_layer(state, table, plan, layer, &mut log)?;
    Ok((placement, log))
}

/// Places every layer of a batch in order.
pub fn apply_batch(
    state: &mut DeviceState,
    table: &HashTable,
    plan: &ReplicaPlan,
) -> Result<(Placement, TransferLog)> {
    if table.num_layers() != state.layers.len() {
        return Err(Error::Placement(format!(
            "table has {} layers, device has {}",
            table.num_layers(),
            state.layers.len()
        )));
    }
    let mut log = TransferLog::default();
    let layers = (0..table.num_layers())
        .map(|layer| {
            place_layer(state, table, plan, layer, &mut log).map_err(|e| match e {
                Error::Placement(msg) => Error::Placement(format!("layer {layer}: {msg}")),
                other => other,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((Placement { layers }, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::planner::plan_all_layers;

    fn table(rows: Vec<Vec<usize>>, experts: usize) -> HashTable {
        HashTable::from_assignment(0, experts, rows).unwrap()
    }

    #[test]
    fn two_hot_experts_get_a_slot_per_token() {
        let row: Vec<usize> = (0..64).map(|s| s % 2).collect();
        let t = table(vec![row], 64);
        let plan = plan_all_layers(&t, 64).unwrap();
        let mut state = DeviceState::empty(1, 64);
        let (lp, log) = apply_layer(&mut state, &t, &plan, 0).unwrap();
        assert_eq!(log.count(TransferKind::Load), 2);
        assert_eq!(log.count(TransferKind::Replicate), 62);
        assert_eq!(log.events.len(), 64);
        let distinct: BTreeSet<usize> = lp.token_slots.iter().copied().collect();
        assert_eq!(distinct.len(), 64);
    }

    #[test]
    fn repeated_table_reuses_every_slot() {
        let row: Vec<usize> = vec![0, 1, 1, 3, 0, 0, 2, 1];
        let t = table(vec![row.clone(), row], 4);
        let plan = plan_all_layers(&t, 6).unwrap();
        let mut state = DeviceState::empty(2, 6);
        let (first, log) = apply_batch(&mut state, &t, &plan).unwrap();
        assert!(!log.is_empty());
        let (second, log) = apply_batch(&mut state, &t, &plan).unwrap();
        assert!(log.is_empty(), "{log:?}");
        assert_eq!(first, second);
    }

    #[test]
    fn over_cap_tokens_round_robin() {
        let t = table(vec![vec![0; 5]], 2);
        let plan = ReplicaPlan {
            capacity: 4,
            layers: vec![BTreeMap::from([(0, 2)])],
        };
        let mut state = DeviceState::empty(1, 4);
        let (lp, log) = apply_layer(&mut state, &t, &plan, 0).unwrap();
        let ordinals: Vec<usize> = lp.token_slots.iter().map(|&i| lp.slots[i].ordinal).collect();
        assert_eq!(ordinals, vec![0, 1, 0, 1, 0]);
        assert_eq!(log.count(TransferKind::Load), 1);
        assert_eq!(log.count(TransferKind::Replicate), 1);
    }

    #[test]
    fn unused_and_surplus_replicas_are_offloaded() {
        let mut state = DeviceState::empty(1, 8);
        let first = table(vec![vec![0, 0, 0, 0, 1, 2]], 4);
        let plan = plan_all_layers(&first, 8).unwrap();
        apply_layer(&mut state, &first, &plan, 0).unwrap();
        assert_eq!(state.resident(0).len(), 6);

        let second = table(vec![vec![0, 0, 3, 3, 3, 3]], 4);
        let plan = plan_all_layers(&second, 8).unwrap();
        let (lp, log) = apply_layer(&mut state, &second, &plan, 0).unwrap();
        let offloaded: Vec<(usize, usize)> = log
            .events
            .iter()
            .filter(|e| e.kind == TransferKind::Offload)
            .map(|e| (e.expert.unwrap(), e.ordinal.unwrap()))
            .collect();
        assert_eq!(offloaded, vec![(1, 0), (2, 0), (0, 3), (0, 2)]);
        assert_eq!(state.host_set(0, 4), BTreeSet::from([1, 2]));
        for (s, &e) in second.assignment[0].iter().enumerate() {
            assert_eq!(lp.token_expert(s), e);
        }
    }

    #[test]
    fn unusable_plan_falls_back_to_distinct_replicas() {
        let t = table(vec![vec![0, 0, 1, 1, 2, 2]], 4);
        let plan = ReplicaPlan {
            capacity: 3,
            layers: vec![BTreeMap::from([(0, 2), (1, 2)])],
        };
        let mut state = DeviceState::empty(1, 3);
        let (lp, log) = apply_layer(&mut state, &t, &plan, 0).unwrap();
        assert!(lp.fallback);
        assert_eq!(log.events[0].kind, TransferKind::Fallback);
        assert_eq!(lp.slots.len(), 3);
        assert_eq!(lp.token_slots, vec![0, 0, 1, 1, 2, 2]);
    }

    #[test]
    fn too_many_experts_run_in_waves() {
        let t = table(vec![vec![0, 1, 2, 3, 4, 0]], 5);
        let plan = ReplicaPlan::distinct_only(&t, 2);
        let mut state = DeviceState::empty(1, 2);
        let (lp, log) = apply_layer(&mut state, &t, &plan, 0).unwrap();
        assert!(lp.fallback);
        assert_eq!(lp.num_waves(), 3);
        for (s, &e) in t.assignment[0].iter().enumerate() {
            assert_eq!(lp.token_expert(s), e);
        }
        for wave in 0..3 {
            assert!(lp.slots.iter().filter(|s| s.wave == wave).count() <= 2);
        }
        assert_eq!(log.count(TransferKind::Load), 5);
        assert_eq!(log.count(TransferKind::Offload), 4);
        assert!(state.resident(0).len() <= 2);
    }

    #[test]
    fn transfer_log_csv_columns() {
        let t = table(vec![vec![1, 1]], 2);
        let plan = plan_all_layers(&t, 2).unwrap();
        let mut state = DeviceState::empty(1, 2);
        let (_, log) = apply_layer(&mut state, &t, &plan, 0).unwrap();
        let mut buf = Vec::new();
        log.write_csv(&mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "event,layer,expert,ordinal,seq\nload,0,1,0,0\nreplicate,0,1,1,1\n"
        );
    }
}
