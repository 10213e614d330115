//! Expert predictor and per-batch hash tables.
//!
//! A stack of SRU layers runs over the token sequence of a batch. One linear
//! head per MoE layer scores the experts; sparsemax over the scores picks the
//! predicted expert. The predictions for a batch form a [`HashTable`].

pub mod sparsemax;
pub mod sru;
pub mod train;

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::distr::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::router::argmax_lowest;
use crate::workload::Batch;

pub use sparsemax::sparsemax;
pub use sru::{sru_cell, sru_forward};
pub use train::{train_predictor, TrainConfig, TrainedPredictor};

pub const DEFAULT_SRU_LAYERS: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SruLayer {
    pub w: Array2<f64>,
    pub w_f: Array2<f64>,
    pub w_r: Array2<f64>,
    pub b_f: Array1<f64>,
    pub b_r: Array1<f64>,
}

impl SruLayer {
    pub fn zeros(d: usize) -> Self {
        Self {
            w: Array2::zeros((d, d)),
            w_f: Array2::zeros((d, d)),
            w_r: Array2::zeros((d, d)),
            b_f: Array1::zeros(d),
            b_r: Array1::zeros(d),
        }
    }
}

/// Linear scorer over the experts of one MoE layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingHead {
    /// `E × d_model`
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SruParams {
    pub layers: Vec<SruLayer>,
    /// One head per MoE layer.
    pub heads: Vec<RoutingHead>,
}

impl SruParams {
    /// Uniform initialization in `[-1/sqrt(d), 1/sqrt(d)]` for every entry.
    pub fn init(
        d_model: usize,
        num_sru_layers: usize,
        num_moe_layers: usize,
        num_experts: usize,
        seed: u64,
    ) -> Result<Self> {
        if d_model == 0 || num_moe_layers == 0 || num_experts == 0 {
            return Err(Error::Config(
                "predictor needs positive width, layer and expert counts".into(),
            ));
        }
        let bound = 1.0 / (d_model as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bounds");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut matrix =
            |rows, cols| Array2::from_shape_simple_fn((rows, cols), || dist.sample(&mut rng));
        let layers = (0..num_sru_layers)
            .map(|_| SruLayer {
                w: matrix(d_model, d_model),
                w_f: matrix(d_model, d_model),
                w_r: matrix(d_model, d_model),
                b_f: matrix(1, d_model).into_shape_with_order(d_model).unwrap(),
                b_r: matrix(1, d_model).into_shape_with_order(d_model).unwrap(),
            })
            .collect();
        let heads = (0..num_moe_layers)
            .map(|_| RoutingHead {
                weights: matrix(num_experts, d_model),
                bias: matrix(1, num_experts).into_shape_with_order(num_experts).unwrap(),
            })
            .collect();
        Ok(Self { layers, heads })
    }

    pub fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        for t in out.tensors_mut() {
            t.fill(0.0);
        }
        out
    }

    pub fn d_model(&self) -> usize {
        self.heads.first().map_or(0, |h| h.weights.ncols())
    }

    pub fn num_experts(&self) -> usize {
        self.heads.first().map_or(0, |h| h.weights.nrows())
    }

    pub fn num_moe_layers(&self) -> usize {
        self.heads.len()
    }

    /// Every parameter tensor as a flat slice, in a fixed order.
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.push(l.w.as_slice().expect("standard layout"));
            out.push(l.w_f.as_slice().expect("standard layout"));
            out.push(l.w_r.as_slice().expect("standard layout"));
            out.push(l.b_f.as_slice().expect("standard layout"));
            out.push(l.b_r.as_slice().expect("standard layout"));
        }
        for h in &self.heads {
            out.push(h.weights.as_slice().expect("standard layout"));
            out.push(h.bias.as_slice().expect("standard layout"));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            out.push(l.w.as_slice_mut().expect("standard layout"));
            out.push(l.w_f.as_slice_mut().expect("standard layout"));
            out.push(l.w_r.as_slice_mut().expect("standard layout"));
            out.push(l.b_f.as_slice_mut().expect("standard layout"));
            out.push(l.b_r.as_slice_mut().expect("standard layout"));
        }
        for h in &mut self.heads {
            out.push(h.weights.as_slice_mut().expect("standard layout"));
            out.push(h.bias.as_slice_mut().expect("standard layout"));
        }
        out
    }

    /// Human-readable name of each tensor returned by [`Self::tensors`].
    pub fn tensor_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        for i in 0..self.layers.len() {
            for name in ["W", "W_f", "W_r", "b_f", "b_r"] {
                out.push(format!("sru[{i}].{name}"));
            }
        }
        for i in 0..self.heads.len() {
            out.push(format!("head[{i}].weights"));
            out.push(format!("head[{i}].bias"));
        }
        out
    }

    fn validate(&self) -> Result<()> {
        let (e, d) = self
            .heads
            .first()
            .map(|h| h.weights.dim())
            .ok_or_else(|| Error::Config("predictor has no heads".into()))?;
        for l in &self.layers {
            let square = (d, d);
            if l.w.dim() != square
                || l.w_f.dim() != square
                || l.w_r.dim() != square
                || l.b_f.len() != d
                || l.b_r.len() != d
            {
                return Err(Error::Config("sru layer shapes do not match width".into()));
            }
        }
        for h in &self.heads {
            if h.weights.dim() != (e, d) || h.bias.len() != e {
                return Err(Error::Config("head shapes are inconsistent".into()));
            }
        }
        if self.tensors().iter().any(|t| t.iter().any(|v| !v.is_finite())) {
            return Err(Error::Numeric("predictor has non-finite parameters".into()));
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        serde_json::to_writer(&mut out, self)?;
        out.write_all(b"\n")?;
        out.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
            _ => Error::Io(e),
        })?;
        let params: Self = serde_json::from_reader(BufReader::new(file))?;
        params.validate()?;
        Ok(params)
    }
}

/// Predicted expert of every `(layer, token)` of one batch plus the replica
/// demand it implies.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HashTable {
    pub batch: usize,
    pub num_experts: usize,
    /// `L × B`
    pub assignment: Vec<Vec<usize>>,
    /// Per layer, tokens assigned to each expert that appears in the row.
    pub replica_count: Vec<BTreeMap<usize, usize>>,
}

impl HashTable {
    pub fn from_assignment(
        batch: usize,
        num_experts: usize,
        assignment: Vec<Vec<usize>>,
    ) -> Result<Self> {
        let tokens = assignment.first().map_or(0, Vec::len);
        let mut replica_count = Vec::with_capacity(assignment.len());
        for (layer, row) in assignment.iter().enumerate() {
            if row.len() != tokens {
                return Err(Error::Config(format!(
                    "layer {layer} has {} tokens, expected {tokens}",
                    row.len()
                )));
            }
            let mut counts = BTreeMap::new();
            for &e in row {
                if e >= num_experts {
                    return Err(Error::Config(format!(
                        "layer {layer} assigns expert {e} of {num_experts}"
                    )));
                }
                *counts.entry(e).or_insert(0) += 1;
            }
            replica_count.push(counts);
        }
        Ok(Self {
            batch,
            num_experts,
            assignment,
            replica_count,
        })
    }

    pub fn num_layers(&self) -> usize {
        self.assignment.len()
    }

    pub fn num_tokens(&self) -> usize {
        self.assignment.first().map_or(0, Vec::len)
    }
}

/// Produces the hash table of a batch.
pub trait HashBuilder: Sync {
    fn build(&self, batch: &Batch) -> Result<HashTable>;
}

/// Copies the ground-truth routing; a perfect predictor.
#[derive(Debug, Clone, Copy)]
pub struct OracleHashBuilder {
    pub num_experts: usize,
}

impl HashBuilder for OracleHashBuilder {
    fn build(&self, batch: &Batch) -> Result<HashTable> {
        HashTable::from_assignment(batch.index, self.num_experts, batch.oracle_routing.clone())
    }
}

impl HashBuilder for SruParams {
    fn build(&self, batch: &Batch) -> Result<HashTable> {
        predict_batch(batch, self)
    }
}

/// Head scores (`B × E`) of every MoE layer.
pub fn head_logits(hidden: &Array2<f64>, params: &SruParams) -> Vec<Array2<f64>> {
    params
        .heads
        .iter()
        .map(|h| hidden.dot(&h.weights.t()) + &h.bias)
        .collect()
}

pub fn predict_batch(batch: &Batch, params: &SruParams) -> Result<HashTable> {
    if batch.embeddings.ncols() != params.d_model() {
        return Err(Error::Config(format!(
            "batch width {} does not match predictor width {}",
            batch.embeddings.ncols(),
            params.d_model()
        )));
    }
    let hidden = sru_forward(&batch.embeddings, &params.layers)?;
    let assignment = head_logits(&hidden, params)
        .iter()
        .map(|scores| {
            scores
                .rows()
                .into_iter()
                .map(|row| {
                    let p = sparsemax(row.as_slice().expect("standard layout"))?;
                    Ok(argmax_lowest(p.as_slice()))
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    HashTable::from_assignment(batch.index, params.num_experts(), assignment)
}

/// Fraction of `(layer, token)` cells where the prediction matches `oracle`.
pub fn evaluate_accuracy(predicted: &HashTable, oracle: &[Vec<usize>]) -> Result<f64> {
    if predicted.assignment.len() != oracle.len()
        || predicted
            .assignment
            .iter()
            .zip(oracle)
            .any(|(a, b)| a.len() != b.len())
    {
        return Err(Error::Config(
            "predicted and oracle tables differ in shape".into(),
        ));
    }
    let cells: usize = oracle.iter().map(Vec::len).sum();
    if cells == 0 {
        return Err(Error::Config("cannot score an empty table".into()));
    }
    let hits: usize = predicted
        .assignment
        .iter()
        .zip(oracle)
        .map(|(a, b)| a.iter().zip(b).filter(|(x, y)| x == y).count())
        .sum();
    Ok(hits as f64 / cells as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_follow_the_assignment() {
        let table = HashTable::from_assignment(0, 4, vec![vec![2, 2, 2, 2]]).unwrap();
        assert_eq!(table.replica_count[0], BTreeMap::from([(2, 4)]));
        let table = HashTable::from_assignment(0, 4, vec![vec![0, 1, 2, 3]]).unwrap();
        assert!(table.replica_count[0].values().all(|&c| c == 1));
        assert!(HashTable::from_assignment(0, 4, vec![vec![4]]).is_err());
        assert!(HashTable::from_assignment(0, 4, vec![vec![0, 1], vec![0]]).is_err());
    }

    #[test]
    fn accuracy_counts_matching_cells() {
        let truth = vec![vec![0, 1, 2, 3], vec![3, 2, 1, 0]];
        let same = HashTable::from_assignment(0, 4, truth.clone()).unwrap();
        assert_eq!(evaluate_accuracy(&same, &truth).unwrap(), 1.0);
        let disjoint =
            HashTable::from_assignment(0, 4, vec![vec![1, 2, 3, 0], vec![0, 3, 2, 1]]).unwrap();
        assert_eq!(evaluate_accuracy(&disjoint, &truth).unwrap(), 0.0);
        let half =
            HashTable::from_assignment(0, 4, vec![vec![0, 1, 3, 0], vec![3, 2, 2, 1]]).unwrap();
        assert_eq!(evaluate_accuracy(&half, &truth).unwrap(), 0.5);
        assert!(evaluate_accuracy(&half, &truth[..1]).is_err());
    }

    #[test]
    fn predictions_land_on_the_head_argmax() {
        let mut params = SruParams::init(4, 2, 1, 3, 9).unwrap();
        params.heads[0].weights.fill(0.0);
        params.heads[0].bias = ndarray::array![0.0, 2.0, 1.0];
        let batch = Batch {
            index: 3,
            embeddings: Array2::from_elem((4, 4), 0.25),
            oracle_routing: vec![vec![1; 4]],
        };
        let table = predict_batch(&batch, &params).unwrap();
        assert_eq!(table.batch, 3);
        assert_eq!(table.assignment, vec![vec![1; 4]]);
        assert_eq!(table.replica_count[0], BTreeMap::from([(1, 4)]));
    }

    #[test]
    fn params_round_trip_through_json() {
        let params = SruParams::init(3, 2, 2, 4, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.json");
        params.save(&path).unwrap();
        assert_eq!(SruParams::load(&path).unwrap(), params);
    }
}
