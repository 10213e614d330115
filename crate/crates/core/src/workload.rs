//! Synthetic skewed routing traces.
//!
//! A trace is a sequence of token batches. Every token carries an embedding
//! and the expert the toy router picks for it at each MoE layer. Embeddings are
//! drawn around per-expert centroids so that routing the embedding through the
//! layer's router reproduces the recorded expert exactly.
//!
//! Traces are stored as JSON lines: one header record followed by one record
//! per token in `(batch, position)` order. Floats are written in shortest
//! round-trip decimal form, so a write/read cycle is bit-exact.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::router;

pub const TRACE_FORMAT: &str = "moe-routing-trace";
pub const TRACE_VERSION: &str = "1";

/// Default per-coordinate standard deviation of the embedding noise.
pub const DEFAULT_NOISE: f64 = 0.3;

/// Smallest router margin accepted for a sampled embedding.
const MIN_MARGIN: f64 = 1e-6;

const GEOMETRY_STREAM: u64 = 1;
const SAMPLING_STREAM: u64 = 2;

/// Dimensions of the MoE model being simulated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelShape {
    pub num_layers: usize,
    pub experts_per_layer: usize,
    pub d_model: usize,
    pub batch_size: usize,
}

impl ModelShape {
    pub const DEFAULT_BATCH_SIZE: usize = 64;

    pub fn new(num_layers: usize, experts_per_layer: usize, d_model: usize) -> Self {
        Self {
            num_layers,
            experts_per_layer,
            d_model,
            batch_size: Self::DEFAULT_BATCH_SIZE,
        }
    }

    pub fn with_batch_size(mut self, batch_size: usize) -> Self {
        self.batch_size = batch_size;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_layers < 1 {
            return Err(Error::Config("num_layers must be at least 1".into()));
        }
        if self.experts_per_layer < 2 {
            return Err(Error::Config("experts_per_layer must be at least 2".into()));
        }
        if self.d_model < 2 {
            return Err(Error::Config("d_model must be at least 2".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        Ok(())
    }
}

/// How expert popularity is drawn when generating a trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scenario {
    /// Layer-0 experts drawn i.i.d. from a Zipf distribution over a seeded
    /// popularity order.
    Zipf,
    /// Every batch splits its tokens evenly between the two most popular
    /// experts of each layer.
    TwoHot,
}

/// Generation parameters recorded alongside a trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceMeta {
    pub scenario: Scenario,
    pub skew: f64,
    pub seed: u64,
    pub noise: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub index: usize,
    /// `batch_size × d_model` token embeddings.
    pub embeddings: Array2<f64>,
    /// `num_layers × batch_size` ground-truth expert per token.
    pub oracle_routing: Vec<Vec<usize>>,
}

impl Batch {
    pub fn num_tokens(&self) -> usize {
        self.embeddings.nrows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoutingTrace {
    pub shape: ModelShape,
    pub meta: TraceMeta,
    pub batches: Vec<Batch>,
}

impl RoutingTrace {
    /// Router geometry the trace's routing was generated from.
    pub fn geometry(&self) -> RoutingGeometry {
        RoutingGeometry::generate(&self.shape, self.meta.seed)
    }

    /// Splits off the trailing batches, e.g. for a held-out evaluation set.
    pub fn split_at(&self, train_batches: usize) -> (RoutingTrace, RoutingTrace) {
        let cut = train_batches.min(self.batches.len());
        let head = RoutingTrace {
            shape: self.shape,
            meta: self.meta,
            batches: self.batches[..cut].to_vec(),
        };
        let tail = RoutingTrace {
            shape: self.shape,
            meta: self.meta,
            batches: self.batches[cut..].to_vec(),
        };
        (head, tail)
    }

    pub fn num_tokens(&self) -> usize {
        self.batches.iter().map(Batch::num_tokens).sum()
    }

    /// Checks every batch against the trace shape.
    pub fn validate(&self) -> Result<()> {
        self.shape.validate()?;
        if self.batches.is_empty() {
            return Err(Error::Config("trace has no batches".into()));
        }
        for batch in &self.batches {
            let (rows, cols) = batch.embeddings.dim();
            if rows != self.shape.batch_size || cols != self.shape.d_model {
                return Err(Error::Config(format!(
                    "batch {} embeddings are {rows}x{cols}, expected {}x{}",
                    batch.index, self.shape.batch_size, self.shape.d_model
                )));
            }
            if batch.oracle_routing.len() != self.shape.num_layers {
                return Err(Error::Config(format!(
                    "batch {} routes {} layers, expected {}",
                    batch.index,
                    batch.oracle_routing.len(),
                    self.shape.num_layers
                )));
            }
            for row in &batch.oracle_routing {
                if row.len() != rows {
                    return Err(Error::Config(format!(
                        "batch {} routing row has {} tokens, expected {rows}",
                        batch.index,
                        row.len()
                    )));
                }
                if let Some(e) = row.iter().find(|&&e| e >= self.shape.experts_per_layer) {
                    return Err(Error::Config(format!(
                        "batch {} routes to expert {e} but the layer has {}",
                        batch.index, self.shape.experts_per_layer
                    )));
                }
            }
            if batch.embeddings.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!(
                    "batch {} has non-finite embeddings",
                    batch.index
                )));
            }
        }
        Ok(())
    }
}

/// Seeded router geometry shared by the trace generator and the toy model.
///
/// Layer 0 routes by dot product against `centroids`. Layer `l` uses the same
/// rows permuted by `layer_perms[l]`, so the layer-`l` expert of a token is
/// `layer_perms[l][layer-0 expert]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingGeometry {
    /// `E × d_model`, every row scaled to norm `sqrt(d_model)`.
    pub centroids: Array2<f64>,
    /// `popularity[rank]` is the layer-0 expert with that popularity rank.
    pub popularity: Vec<usize>,
    /// `layer_perms[l][e]` maps a layer-0 expert to its layer-`l` expert.
    pub layer_perms: Vec<Vec<usize>>,
}

impl RoutingGeometry {
    pub fn generate(shape: &ModelShape, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(GEOMETRY_STREAM);
        let (e, d) = (shape.experts_per_layer, shape.d_model);

        let mut centroids: Array2<f64> =
            Array2::from_shape_simple_fn((e, d), || StandardNormal.sample(&mut rng));
        let target = (d as f64).sqrt();
        for mut row in centroids.rows_mut() {
            let norm = row.dot(&row).sqrt();
            row.mapv_inplace(|v| v * target / norm);
        }

        let mut popularity: Vec<usize> = (0..e).collect();
        popularity.shuffle(&mut rng);

        let mut layer_perms = Vec::with_capacity(shape.num_layers);
        layer_perms.push((0..e).collect());
        for _ in 1..shape.num_layers {
            let mut perm: Vec<usize> = (0..e).collect();
            perm.shuffle(&mut rng);
            layer_perms.push(perm);
        }

        Self {
            centroids,
            popularity,
            layer_perms,
        }
    }

    /// Router weights (`E × d_model`) of `layer`.
    pub fn router_weights(&self, layer: usize) -> Array2<f64> {
        let perm = &self.layer_perms[layer];
        let mut weights = Array2::zeros(self.centroids.dim());
        for (source, &target) in perm.iter().enumerate() {
            weights.row_mut(target).assign(&self.centroids.row(source));
        }
        weights
    }
}

/// Generates a Zipf-skewed trace with [`DEFAULT_NOISE`].
pub fn generate_trace(
    shape: ModelShape,
    num_batches: usize,
    skew: f64,
    seed: u64,
) -> Result<RoutingTrace> {
    TraceBuilder::new(shape, num_batches, seed).skew(skew).build()
}

/// Generates the two-hot-expert trace: every layer of every batch sends half
/// of its tokens to each of two experts.
pub fn generate_two_hot_trace(
    shape: ModelShape,
    num_batches: usize,
    seed: u64,
) -> Result<RoutingTrace> {
    TraceBuilder::new(shape, num_batches, seed)
        .scenario(Scenario::TwoHot)
        .build()
}

#[derive(Debug, Clone)]
pub struct TraceBuilder {
    shape: ModelShape,
    num_batches: usize,
    meta: TraceMeta,
}

impl TraceBuilder {
    pub fn new(shape: ModelShape, num_batches: usize, seed: u64) -> Self {
        Self {
            shape,
            num_batches,
            meta: TraceMeta {
                scenario: Scenario::Zipf,
                skew: 1.0,
                seed,
                noise: DEFAULT_NOISE,
            },
        }
    }

    pub fn skew(mut self, skew: f64) -> Self {
        self.meta.skew = skew;
        self
    }

    pub fn noise(mut self, noise: f64) -> Self {
        self.meta.noise = noise;
        self
    }

    pub fn scenario(mut self, scenario: Scenario) -> Self {
        self.meta.scenario = scenario;
        self
    }

    pub fn build(self) -> Result<RoutingTrace> {
        let Self {
            shape,
            num_batches,
            meta,
        } = self;
        shape.validate()?;
        if num_batches < 1 {
            return Err(Error::Config("num_batches must be at least 1".into()));
        }
        if !(meta.skew >= 0.0 && meta.skew.is_finite()) {
            return Err(Error::Config(format!(
                "skew must be a finite value >= 0, got {}",
                meta.skew
            )));
        }
        if !(meta.noise >= 0.0 && meta.noise.is_finite()) {
            return Err(Error::Config(format!(
                "noise must be a finite value >= 0, got {}",
                meta.noise
            )));
        }

        let geometry = RoutingGeometry::generate(&shape, meta.seed);
        let mut rng = ChaCha8Rng::seed_from_u64(meta.seed);
        rng.set_stream(SAMPLING_STREAM);

        let weights: Vec<f64> = (0..shape.experts_per_layer)
            .map(|rank| (rank as f64 + 1.0).powf(-meta.skew))
            .collect();
        let zipf = WeightedIndex::new(&weights)
            .map_err(|e| Error::Config(format!("invalid popularity weights: {e}")))?;

        let mut batches = Vec::with_capacity(num_batches);
        for index in 0..num_batches {
            let base: Vec<usize> = match meta.scenario {
                Scenario::Zipf => (0..shape.batch_size)
                    .map(|_| geometry.popularity[zipf.sample(&mut rng)])
                    .collect(),
                Scenario::TwoHot => {
                    let (a, b) = (geometry.popularity[0], geometry.popularity[1]);
                    let half = shape.batch_size.div_ceil(2);
                    let mut experts: Vec<usize> = (0..shape.batch_size)
                        .map(|s| if s < half { a } else { b })
                        .collect();
                    experts.shuffle(&mut rng);
                    experts
                }
            };

            let mut embeddings = Array2::zeros((shape.batch_size, shape.d_model));
            for (s, &expert) in base.iter().enumerate() {
                let x = sample_embedding(&geometry.centroids, expert, meta.noise, &mut rng);
                embeddings.row_mut(s).assign(&x);
            }

            let oracle_routing = geometry
                .layer_perms
                .iter()
                .map(|perm| base.iter().map(|&e| perm[e]).collect())
                .collect();

            batches.push(Batch {
                index,
                embeddings,
                oracle_routing,
            });
        }

        Ok(RoutingTrace {
            shape,
            meta,
            batches,
        })
    }
}

/// Samples `centroid + noise`, resampling until the router picks `expert`
/// with a strictly positive margin.
fn sample_embedding(
    centroids: &Array2<f64>,
    expert: usize,
    noise: f64,
    rng: &mut ChaCha8Rng,
) -> Array1<f64> {
    let centroid = centroids.row(expert);
    loop {
        let x = centroid.mapv(|c| {
            let z: f64 = StandardNormal.sample(rng);
            c + noise * z
        });
        let logits = router::logits(centroids, &x);
        let margin = logits
            .iter()
            .enumerate()
            .filter(|&(k, _)| k != expert)
            .map(|(_, &v)| logits[expert] - v)
            .fold(f64::INFINITY, f64::min);
        if margin > MIN_MARGIN {
            return x;
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct TraceHeader {
    format: String,
    version: String,
    num_layers: usize,
    experts_per_layer: usize,
    d_model: usize,
    batch_size: usize,
    num_batches: usize,
    scenario: Scenario,
    skew: f64,
    seed: u64,
    noise: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct TokenRecord {
    batch: usize,
    position: usize,
    embedding: Vec<f64>,
    experts: Vec<usize>,
}

pub fn write_trace(trace: &RoutingTrace, path: impl AsRef<Path>) -> Result<()> {
    let mut out = BufWriter::new(File::create(path.as_ref())?);
    write_trace_to(trace, &mut out)?;
    out.flush()?;
    Ok(())
}

pub fn write_trace_to(trace: &RoutingTrace, out: &mut impl Write) -> Result<()> {
    let header = TraceHeader {
        format: TRACE_FORMAT.to_string(),
        version: TRACE_VERSION.to_string(),
        num_layers: trace.shape.num_layers,
        experts_per_layer: trace.shape.experts_per_layer,
        d_model: trace.shape.d_model,
        batch_size: trace.shape.batch_size,
        num_batches: trace.batches.len(),
        scenario: trace.meta.scenario,
        skew: trace.meta.skew,
        seed: trace.meta.seed,
        noise: trace.meta.noise,
    };
    serde_json::to_writer(&mut *out, &header)?;
    out.write_all(b"\n")?;
    for batch in &trace.batches {
        for (position, row) in batch.embeddings.rows().into_iter().enumerate() {
            let record = TokenRecord {
                batch: batch.index,
                position,
                embedding: row.to_vec(),
                experts: batch.oracle_routing.iter().map(|l| l[position]).collect(),
            };
            serde_json::to_writer(&mut *out, &record)?;
            out.write_all(b"\n")?;
        }
    }
    Ok(())
}

pub fn read_trace(path: impl AsRef<Path>) -> Result<RoutingTrace> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
        _ => Error::Io(e),
    })?;
    read_trace_from(BufReader::new(file))
}

pub fn read_trace_from(reader: impl BufRead) -> Result<RoutingTrace> {
    let mut lines = reader.lines();
    let parse = |line: usize, message: String| Error::Parse { line, message };

    let first = lines
        .next()
        .ok_or_else(|| parse(1, "empty file, expected a header record".into()))??;
    let header: TraceHeader =
        serde_json::from_str(&first).map_err(|e| parse(1, format!("bad header: {e}")))?;
    if header.format != TRACE_FORMAT {
        return Err(parse(1, format!("unknown format {:?}", header.format)));
    }
    if header.version != TRACE_VERSION {
        return Err(parse(1, format!("unsupported version {:?}", header.version)));
    }
    let shape = ModelShape {
        num_layers: header.num_layers,
        experts_per_layer: header.experts_per_layer,
        d_model: header.d_model,
        batch_size: header.batch_size,
    };
    shape.validate().map_err(|e| Error::Validation {
        line: 1,
        message: e.to_string(),
    })?;
    if header.num_batches < 1 {
        return Err(Error::Validation {
            line: 1,
            message: "num_batches must be at least 1".into(),
        });
    }

    let mut batches = Vec::with_capacity(header.num_batches);
    let mut line_no = 1;
    for b in 0..header.num_batches {
        let mut embeddings = Array2::zeros((shape.batch_size, shape.d_model));
        let mut routing = vec![vec![0usize; shape.batch_size]; shape.num_layers];
        for s in 0..shape.batch_size {
            line_no += 1;
            let text = lines.next().ok_or_else(|| {
                parse(
                    line_no,
                    format!("unexpected end of file, expected token {s} of batch {b}"),
                )
            })??;
            let record: TokenRecord = serde_json::from_str(&text)
                .map_err(|e| parse(line_no, format!("bad token record: {e}")))?;
            if record.batch != b || record.position != s {
                return Err(parse(
                    line_no,
                    format!(
                        "expected batch {b} position {s}, found batch {} position {}",
                        record.batch, record.position
                    ),
                ));
            }
            let invalid = |message: String| Error::Validation {
                line: line_no,
                message,
            };
            if record.embedding.len() != shape.d_model {
                return Err(invalid(format!(
                    "embedding has {} values, expected {}",
                    record.embedding.len(),
                    shape.d_model
                )));
            }
            if record.experts.len() != shape.num_layers {
                return Err(invalid(format!(
                    "token routes {} layers, expected {}",
                    record.experts.len(),
                    shape.num_layers
                )));
            }
            if let Some(&e) = record
                .experts
                .iter()
                .find(|&&e| e >= shape.experts_per_layer)
            {
                return Err(invalid(format!(
                    "expert index {e} out of range for {} experts",
                    shape.experts_per_layer
                )));
            }
            embeddings
                .row_mut(s)
                .assign(&Array1::from_vec(record.embedding));
            for (layer, &e) in record.experts.iter().enumerate() {
                routing[layer][s] = e;
            }
        }
        batches.push(Batch {
            index: b,
            embeddings,
            oracle_routing: routing,
        });
    }
    if let Some(extra) = lines.next() {
        let extra = extra?;
        if !extra.trim().is_empty() {
            return Err(parse(line_no + 1, "trailing record after last batch".into()));
        }
    }

    Ok(RoutingTrace {
        shape,
        meta: TraceMeta {
            scenario: header.scenario,
            skew: header.skew,
            seed: header.seed,
            noise: header.noise,
        },
        batches,
    })
}
