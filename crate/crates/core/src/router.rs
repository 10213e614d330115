//! Miniature top-1 MoE forward pass.
//!
//! Each layer routes a token by argmax over `router · x` (no bias, lowest
//! index wins ties) and applies the chosen expert's feed-forward block
//! `V · relu(U · x)`. The expert output is added to the token before the next
//! layer routes it.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1};
use rand::distr::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::placement::Placement;
use crate::workload::{RoutingGeometry, RoutingTrace};

const EXPERT_STREAM: u64 = 3;

/// Feed-forward weights of one expert.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertWeights {
    /// `d_ff × d_model`
    pub up: Array2<f64>,
    /// `d_model × d_ff`
    pub down: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyMoeParams {
    /// Per layer, `E × d_model` router weights.
    pub routers: Vec<Array2<f64>>,
    /// Per layer, one entry per expert.
    pub experts: Vec<Vec<ExpertWeights>>,
}

impl ToyMoeParams {
    pub fn new(routers: Vec<Array2<f64>>, experts: Vec<Vec<ExpertWeights>>) -> Result<Self> {
        let params = Self { routers, experts };
        params.validate()?;
        Ok(params)
    }

    /// Random expert weights on top of the trace's router geometry.
    pub fn generate(geometry: &RoutingGeometry, d_ff: usize, seed: u64) -> Result<Self> {
        let (num_experts, d_model) = geometry.centroids.dim();
        if d_ff == 0 {
            return Err(Error::Config("d_ff must be at least 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(EXPERT_STREAM);
        let up_bound = 1.0 / (d_model as f64).sqrt();
        let down_bound = 1.0 / (d_ff as f64).sqrt();
        let up_dist = Uniform::new_inclusive(-up_bound, up_bound).expect("finite bounds");
        let down_dist = Uniform::new_inclusive(-down_bound, down_bound).expect("finite bounds");

        let num_layers = geometry.layer_perms.len();
        let routers = (0..num_layers).map(|l| geometry.router_weights(l)).collect();
        let experts = (0..num_layers)
            .map(|_| {
                (0..num_experts)
                    .map(|_| ExpertWeights {
                        up: Array2::from_shape_simple_fn((d_ff, d_model), || {
                            up_dist.sample(&mut rng)
                        }),
                        down: Array2::from_shape_simple_fn((d_model, d_ff), || {
                            down_dist.sample(&mut rng)
                        }),
                    })
                    .collect()
            })
            .collect();
        Self::new(routers, experts)
    }

    pub fn for_trace(trace: &RoutingTrace, d_ff: usize) -> Result<Self> {
        Self::generate(&trace.geometry(), d_ff, trace.meta.seed)
    }

    pub fn num_layers(&self) -> usize {
        self.routers.len()
    }

    pub fn num_experts(&self) -> usize {
        self.routers.first().map_or(0, |r| r.nrows())
    }

    pub fn d_model(&self) -> usize {
        self.routers.first().map_or(0, |r| r.ncols())
    }

    fn validate(&self) -> Result<()> {
        if self.routers.is_empty() || self.routers.len() != self.experts.len() {
            return Err(Error::Config(format!(
                "{} routers for {} expert layers",
                self.routers.len(),
                self.experts.len()
            )));
        }
        let (e, d) = self.routers[0].dim();
        if e == 0 || d == 0 {
            return Err(Error::Config("router has no experts or zero width".into()));
        }
        for (layer, (router, experts)) in self.routers.iter().zip(&self.experts).enumerate() {
            if router.dim() != (e, d) {
                return Err(Error::Config(format!(
                    "layer {layer} router is {:?}, expected ({e}, {d})",
                    router.dim()
                )));
            }
            if experts.len() != e {
                return Err(Error::Config(format!(
                    "layer {layer} has {} experts, expected {e}",
                    experts.len()
                )));
            }
            for (k, w) in experts.iter().enumerate() {
                let d_ff = w.up.nrows();
                if w.up.ncols() != d || w.down.dim() != (d, d_ff) {
                    return Err(Error::Config(format!(
                        "layer {layer} expert {k} has mismatched FFN shapes"
                    )));
                }
                if w.up.iter().chain(w.down.iter()).any(|v| !v.is_finite()) {
                    return Err(Error::Numeric(format!(
                        "layer {layer} expert {k} has non-finite weights"
                    )));
                }
            }
            if router.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!("layer {layer} router is non-finite")));
            }
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

/// Router logits, one dot product per expert row.
pub fn logits(weights: &Array2<f64>, x: &Array1<f64>) -> Array1<f64> {
    weights.rows().into_iter().map(|row| row.dot(x)).collect()
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax_lowest<'a>(values: impl Into<ArrayView1<'a, f64>>) -> usize {
    let values = values.into();
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub fn route_top1(layer: usize, embedding: &Array1<f64>, params: &ToyMoeParams) -> Result<usize> {
    let router = params.routers.get(layer).ok_or_else(|| {
        Error::Config(format!(
            "layer {layer} out of range for {} layers",
            params.num_layers()
        ))
    })?;
    if embedding.len() != router.ncols() {
        return Err(Error::Config(format!(
            "embedding width {} does not match router width {}",
            embedding.len(),
            router.ncols()
        )));
    }
    if embedding.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite embedding".into()));
    }
    Ok(argmax_lowest(&logits(router, embedding)))
}

/// `down · relu(up · x)`
pub fn expert_forward(
    embedding: &Array1<f64>,
    up: &Array2<f64>,
    down: &Array2<f64>,
) -> Result<Array1<f64>> {
    if up.ncols() != embedding.len() || down.ncols() != up.nrows() {
        return Err(Error::Config(format!(
            "expert shapes up {:?} down {:?} do not fit input width {}",
            up.dim(),
            down.dim(),
            embedding.len()
        )));
    }
    let hidden = up.dot(embedding).mapv(|v| v.max(0.0));
    Ok(down.dot(&hidden))
}

/// Which expert instance serves each token.
#[derive(Debug, Clone, Copy)]
pub enum Dispatch<'a> {
    /// Route with [`route_top1`], every expert resident once.
    Dense,
    /// Use the slots of a placement; each slot holds a copy of its expert.
    Placed(&'a Placement),
}

/// Runs a `B × d_model` batch through every layer.
pub fn moe_forward(
    embeddings: &Array2<f64>,
    params: &ToyMoeParams,
    dispatch: Dispatch<'_>,
) -> Result<Array2<f64>> {
    if embeddings.ncols() != params.d_model() {
        return Err(Error::Config(format!(
            "batch width {} does not match model width {}",
            embeddings.ncols(),
            params.d_model()
        )));
    }
    if let Dispatch::Placed(placement) = dispatch {
        if placement.layers.len() != params.num_layers() {
            return Err(Error::Placement(format!(
                "placement covers {} layers, model has {}",
                placement.layers.len(),
                params.num_layers()
            )));
        }
    }

    let mut state = embeddings.clone();
    for layer in 0..params.num_layers() {
        let replicas: Option<Vec<ExpertWeights>> = match dispatch {
            Dispatch::Dense => None,
            Dispatch::Placed(placement) => {
                let lp = &placement.layers[layer];
                if lp.token_slots.len() != embeddings.nrows() {
                    return Err(Error::Placement(format!(
                        "layer {layer} maps {} tokens, batch has {}",
                        lp.token_slots.len(),
                        embeddings.nrows()
                    )));
                }
                let copies = lp
                    .slots
                    .iter()
                    .map(|slot| {
                        params.experts[layer]
                            .get(slot.expert)
                            .cloned()
                            .ok_or_else(|| {
                                Error::Placement(format!(
                                    "layer {layer} slot holds unknown expert {}",
                                    slot.expert
                                ))
                            })
                    })
                    .collect::<Result<Vec<_>>>()?;
                Some(copies)
            }
        };

        for (s, mut row) in state.rows_mut().into_iter().enumerate() {
            let x = row.to_owned();
            let weights = match (&replicas, dispatch) {
                (Some(copies), Dispatch::Placed(placement)) => {
                    let slot = placement.layers[layer].token_slots[s];
                    copies.get(slot).ok_or_else(|| {
                        Error::Placement(format!(
                            "layer {layer} token {s} assigned to non-resident slot {slot}"
                        ))
                    })?
                }
                _ => &params.experts[layer][route_top1(layer, &x, params)?],
            };
            let y = expert_forward(&x, &weights.up, &weights.down)?;
            row += &y;
        }
    }
    Ok(state)
}

/// Expert chosen by the dense forward pass for every `(layer, token)`.
pub fn dense_routing(embeddings: &Array2<f64>, params: &ToyMoeParams) -> Result<Vec<Vec<usize>>> {
    let mut state = embeddings.clone();
    let mut routing = Vec::with_capacity(params.num_layers());
    for layer in 0..params.num_layers() {
        let mut row_experts = Vec::with_capacity(state.nrows());
        for mut row in state.rows_mut() {
            let x = row.to_owned();
            let e = route_top1(layer, &x, params)?;
            let weights = &params.experts[layer][e];
            row += &expert_forward(&x, &weights.up, &weights.down)?;
            row_experts.push(e);
        }
        routing.push(row_experts);
    }
    Ok(routing)
}
