//! Capacity-capped replica planning.
//!
//! Replica demand is the number of tokens predicted for each expert. When a
//! layer's total demand does not fit in `C` slots, every demanded expert first
//! gets one replica. The remaining slots are then split evenly across the
//! experts whose demand is still unmet, repeating the split while it hands out
//! at least one slot per expert and never giving an expert more than its
//! demand. Slots left after that go one each to the experts with the largest
//! unmet demand (ties to the lower index).

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::predictor::HashTable;

/// Expert index → replica (or token) count.
pub type ExpertCounts = BTreeMap<usize, usize>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReplicaPlan {
    pub capacity: usize,
    /// Per layer, capped replica count of every demanded expert.
    pub layers: Vec<ExpertCounts>,
}

impl ReplicaPlan {
    /// One replica per demanded expert, ignoring capacity.
    pub fn distinct_only(table: &HashTable, capacity: usize) -> Self {
        Self {
            capacity,
            layers: table
                .replica_count
                .iter()
                .map(|counts| counts.keys().map(|&e| (e, 1)).collect())
                .collect(),
        }
    }

    pub fn cap(&self, layer: usize, expert: usize) -> usize {
        self.layers
            .get(layer)
            .and_then(|l| l.get(&expert))
            .copied()
            .unwrap_or(0)
    }

    pub fn total(&self, layer: usize) -> usize {
        self.layers.get(layer).map_or(0, |l| l.values().sum())
    }
}

/// Histogram of the predicted experts of one layer.
pub fn demand_counts(table: &HashTable, layer: usize) -> Result<ExpertCounts> {
    let row = table.assignment.get(layer).ok_or_else(|| {
        Error::Config(format!(
            "layer {layer} out of range for {} layers",
            table.num_layers()
        ))
    })?;
    let mut counts = ExpertCounts::new();
    for &e in row {
        *counts.entry(e).or_insert(0) += 1;
    }
    Ok(counts)
}

/// Caps `demand` to `capacity` slots. `layer` only labels the error.
pub fn cap_replicas(demand: &ExpertCounts, capacity: usize, layer: usize) -> Result<ExpertCounts> {
    if capacity < 1 {
        return Err(Error::Config("capacity must be at least 1".into()));
    }
    let demand: Vec<(usize, usize)> = demand
        .iter()
        .filter(|&(_, &d)| d > 0)
        .map(|(&e, &d)| (e, d))
        .collect();
    let total: usize = demand.iter().map(|&(_, d)| d).sum();
    if total <= capacity {
        return Ok(demand.into_iter().collect());
    }
    let distinct = demand.len();
    if capacity < distinct {
        return Err(Error::InfeasibleCapacity {
            layer,
            distinct,
            capacity,
        });
    }

    let mut counts: Vec<usize> = vec![1; distinct];
    let mut remaining = capacity - distinct;
    loop {
        let unmet: Vec<usize> = (0..distinct).filter(|&i| counts[i] < demand[i].1).collect();
        if unmet.is_empty() {
            break;
        }
        let share = remaining / unmet.len();
        if share == 0 {
            let mut order = unmet;
            // stable sort keeps lower expert indices first among equal unmet demand
            order.sort_by_key(|&i| std::cmp::Reverse(demand[i].1 - counts[i]));
            for &i in order.iter().take(remaining) {
                counts[i] += 1;
            }
            break;
        }
        for &i in &unmet {
            let grant = share.min(demand[i].1 - counts[i]);
            counts[i] += grant;
            remaining -= grant;
        }
    }

    Ok(demand
        .iter()
        .zip(counts)
        .map(|(&(e, _), c)| (e, c))
        .collect())
}

pub fn plan_all_layers(table: &HashTable, capacity: usize) -> Result<ReplicaPlan> {
    let layers = (0..table.num_layers())
        .map(|layer| cap_replicas(&demand_counts(table, layer)?, capacity, layer))
        .collect::<Result<Vec<_>>>()?;
    Ok(ReplicaPlan { capacity, layers })
}
