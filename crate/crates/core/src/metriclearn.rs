//! Linear embedding head trained with a triplet loss.
//!
//! The model is a single fully-connected projection followed by L2
//! normalization on top of frozen descriptor features. Gradients are derived
//! analytically (hinge, pairwise distances, normalization) and applied with a
//! self-contained Adam optimizer; training is bit-reproducible for a fixed
//! seed.

use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::Point3;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::association::{mine_triplets, Frame, FrameId, LocationId, MatchPair, NeighborhoodSpec};
use crate::seed::derive_seed;

/// Output dimensionality used throughout the pipeline.
pub const EMBEDDING_DIM: usize = 128;

const MODEL_MAGIC: &[u8; 4] = b"EMB1";
const MODEL_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("feature has dimension {got}, model expects {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("embedding is degenerate: pre-normalization norm {norm:.3e}")]
    DegenerateEmbedding { norm: f64 },
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("training data has no proposals with features")]
    NoFeatures,
    #[error("model file is corrupt: {0}")]
    CorruptModel(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Linear projection plus L2 normalization; maps `input_dim` features to
/// unit-norm `output_dim` embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingModel {
    /// Row-major `output_dim x input_dim`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub input_dim: usize,
    pub output_dim: usize,
}

impl EmbeddingModel {
    /// Seeded initialization: weights uniform in ±1/sqrt(input_dim), zero bias.
    pub fn init(input_dim: usize, output_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 1.0 / (input_dim as f64).sqrt();
        let weights = (0..input_dim * output_dim)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        Self {
            weights,
            bias: vec![0.0; output_dim],
            input_dim,
            output_dim,
        }
    }

    fn forward_into(&self, feature: &[f64], z: &mut [f64]) {
        debug_assert_eq!(feature.len(), self.input_dim);
        for (o, zo) in z.iter_mut().enumerate() {
            let row = &self.weights[o * self.input_dim..(o + 1) * self.input_dim];
            let mut acc = self.bias[o];
            for (w, f) in row.iter().zip(feature) {
                acc += w * f;
            }
            *zo = acc;
        }
    }

    /// Serializes the model: magic, version, dims, then weights row-major and
    /// bias as little-endian f64.
    pub fn save(&self, path: &Path) -> Result<(), MetricError> {
        let mut buf = Vec::with_capacity(16 + 8 * (self.weights.len() + self.bias.len()));
        buf.extend_from_slice(MODEL_MAGIC);
        buf.extend_from_slice(&MODEL_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.input_dim as u32).to_le_bytes());
        buf.extend_from_slice(&(self.output_dim as u32).to_le_bytes());
        for w in &self.weights {
            buf.extend_from_slice(&w.to_le_bytes());
        }
        for b in &self.bias {
            buf.extend_from_slice(&b.to_le_bytes());
        }
        let mut file = std::fs::File::create(path)?;
        file.write_all(&buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, MetricError> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        if bytes.len() < 16 || &bytes[0..4] != MODEL_MAGIC {
            return Err(MetricError::CorruptModel("bad magic".into()));
        }
        let take_u32 = |off: usize| u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
        let version = take_u32(4);
        if version != MODEL_VERSION {
            return Err(MetricError::CorruptModel(format!(
                "unsupported version {version}"
            )));
        }
        let input_dim = take_u32(8) as usize;
        let output_dim = take_u32(12) as usize;
        let n = input_dim * output_dim + output_dim;
        if bytes.len() != 16 + 8 * n {
            return Err(MetricError::CorruptModel(format!(
                "expected {} bytes of parameters, found {}",
                8 * n,
                bytes.len() - 16
            )));
        }
        let mut vals = Vec::with_capacity(n);
        for chunk in bytes[16..].chunks_exact(8) {
            vals.push(f64::from_le_bytes(chunk.try_into().unwrap()));
        }
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(MetricError::CorruptModel("non-finite parameter".into()));
        }
        let bias = vals.split_off(input_dim * output_dim);
        Ok(Self {
            weights: vals,
            bias,
            input_dim,
            output_dim,
        })
    }
}

/// Embeds a feature vector: `(W f + b) / ||W f + b||`.
pub fn embed(model: &EmbeddingModel, feature: &[f64]) -> Result<Vec<f64>, MetricError> {
    if feature.len() != model.input_dim {
        return Err(MetricError::DimensionMismatch {
            expected: model.input_dim,
            got: feature.len(),
        });
    }
    let mut z = vec![0.0; model.output_dim];
    model.forward_into(feature, &mut z);
    let norm = z.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm <= 1e-12 {
        return Err(MetricError::DegenerateEmbedding { norm });
    }
    for v in &mut z {
        *v /= norm;
    }
    Ok(z)
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Hinge loss of one triplet of feature vectors:
/// `max(||e(a) - e(p)|| - ||e(a) - e(n)|| + margin, 0)`.
pub fn triplet_loss(
    model: &EmbeddingModel,
    anchor: &[f64],
    positive: &[f64],
    negative: &[f64],
    margin: f64,
) -> Result<f64, MetricError> {
    let ea = embed(model, anchor)?;
    let ep = embed(model, positive)?;
    let en = embed(model, negative)?;
    Ok((euclidean(&ea, &ep) - euclidean(&ea, &en) + margin).max(0.0))
}

/// Gradient of the summed triplet loss with respect to (weights, bias).
#[derive(Debug, Clone)]
pub struct Gradient {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Gradient {
    fn zeros(model: &EmbeddingModel) -> Self {
        Self {
            weights: vec![0.0; model.weights.len()],
            bias: vec![0.0; model.bias.len()],
        }
    }
}

/// A batch of triplets as borrowed feature vectors (anchor, positive,
/// negative).
pub type FeatureTriplet<'a> = (&'a [f64], &'a [f64], &'a [f64]);

/// Computes the summed loss over a batch of triplets and its exact gradient.
///
/// Triplets whose hinge is inactive contribute zero; the kink itself uses the
/// zero subgradient, as does the distance gradient when two embeddings
/// coincide exactly.
pub fn loss_gradient(
    model: &EmbeddingModel,
    triplets: &[FeatureTriplet<'_>],
    margin: f64,
) -> Result<(f64, Gradient), MetricError> {
    let out = model.output_dim;
    let mut grad = Gradient::zeros(model);
    let mut total_loss = 0.0;

    let mut z = vec![0.0; 3 * out];
    let mut e = vec![0.0; 3 * out];
    let mut norms = [0.0; 3];
    let mut g_e = vec![0.0; 3 * out];
    let mut g_z = vec![0.0; out];

    for &(fa, fp, fn_) in triplets {
        let feats = [fa, fp, fn_];
        for (role, feat) in feats.iter().enumerate() {
            if feat.len() != model.input_dim {
                return Err(MetricError::DimensionMismatch {
                    expected: model.input_dim,
                    got: feat.len(),
                });
            }
            let zr = &mut z[role * out..(role + 1) * out];
            model.forward_into(feat, zr);
            let norm = zr.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm <= 1e-12 {
                return Err(MetricError::DegenerateEmbedding { norm });
            }
            norms[role] = norm;
            for (ev, zv) in e[role * out..(role + 1) * out].iter_mut().zip(zr.iter()) {
                *ev = zv / norm;
            }
        }

        let (ea, ep, en) = (&e[0..out], &e[out..2 * out], &e[2 * out..3 * out]);
        let d_ap = euclidean(ea, ep);
        let d_an = euclidean(ea, en);
        let active = d_ap - d_an + margin;
        if active <= 0.0 {
            continue;
        }
        total_loss += active;

        // dL/de for each role; unit difference vectors guard zero distances.
        g_e.iter_mut().for_each(|v| *v = 0.0);
        for o in 0..out {
            let u_ap = if d_ap > 0.0 { (ea[o] - ep[o]) / d_ap } else { 0.0 };
            let u_an = if d_an > 0.0 { (ea[o] - en[o]) / d_an } else { 0.0 };
            g_e[o] = u_ap - u_an; // anchor
            g_e[out + o] = -u_ap; // positive
            g_e[2 * out + o] = u_an; // negative
        }

        // Backprop through normalization and the linear layer:
        // g_z = (g_e - (g_e . e) e) / ||z||, then dW += g_z f^T, db += g_z.
        for (role, feat) in feats.iter().enumerate() {
            let er = &e[role * out..(role + 1) * out];
            let ger = &g_e[role * out..(role + 1) * out];
            let dot: f64 = ger.iter().zip(er).map(|(g, ev)| g * ev).sum();
            for o in 0..out {
                g_z[o] = (ger[o] - dot * er[o]) / norms[role];
            }
            for o in 0..out {
                let gz = g_z[o];
                if gz == 0.0 {
                    continue;
                }
                let row = &mut grad.weights[o * model.input_dim..(o + 1) * model.input_dim];
                for (gw, f) in row.iter_mut().zip(*feat) {
                    *gw += gz * f;
                }
                grad.bias[o] += gz;
            }
        }
    }
    Ok((total_loss, grad))
}

/// Adam accumulators shaped like the model parameters.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub m_weights: Vec<f64>,
    pub v_weights: Vec<f64>,
    pub m_bias: Vec<f64>,
    pub v_bias: Vec<f64>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(model: &EmbeddingModel) -> Self {
        Self {
            m_weights: vec![0.0; model.weights.len()],
            v_weights: vec![0.0; model.weights.len()],
            m_bias: vec![0.0; model.bias.len()],
            v_bias: vec![0.0; model.bias.len()],
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// One Adam update with bias correction at the given effective learning rate.
pub fn adam_step(
    state: &mut AdamState,
    model: &mut EmbeddingModel,
    grad: &Gradient,
    lr_effective: f64,
) {
    assert_eq!(grad.weights.len(), model.weights.len());
    assert_eq!(grad.bias.len(), model.bias.len());
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);

    let update = |theta: &mut [f64], m: &mut [f64], v: &mut [f64], g: &[f64]| {
        for i in 0..theta.len() {
            m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g[i];
            v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            theta[i] -= lr_effective * m_hat / (v_hat.sqrt() + state.epsilon);
        }
    };
    update(
        &mut model.weights,
        &mut state.m_weights,
        &mut state.v_weights,
        &grad.weights,
    );
    update(
        &mut model.bias,
        &mut state.m_bias,
        &mut state.v_bias,
        &grad.bias,
    );
}

/// Training hyperparameters.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub margin: f64,
    pub learning_rate: f64,
    pub lr_decay: f64,
    pub decay_interval: usize,
    pub steps: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            margin: 1.0,
            learning_rate: 1e-4,
            lr_decay: 0.94,
            decay_interval: 1000,
            steps: 2000,
            seed: 0,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<(), MetricError> {
        if !(self.margin > 0.0) {
            return Err(MetricError::InvalidConfig("margin must be positive".into()));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(MetricError::InvalidConfig(
                "decay must lie in (0, 1]".into(),
            ));
        }
        if self.decay_interval == 0 {
            return Err(MetricError::InvalidConfig(
                "decay interval must be at least 1".into(),
            ));
        }
        if !(self.learning_rate > 0.0) {
            return Err(MetricError::InvalidConfig(
                "learning rate must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Stepwise learning-rate schedule: `lr * decay^floor(step / interval)`.
pub fn effective_learning_rate(config: &TrainConfig, step: usize) -> f64 {
    config.learning_rate * config.lr_decay.powi((step / config.decay_interval) as i32)
}

/// One row of the loss trace.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    pub step: usize,
    pub lr_effective: f64,
    pub loss: f64,
    pub triplets_in_batch: usize,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: EmbeddingModel,
    pub trace: Vec<TraceRecord>,
    pub skipped_steps: usize,
}

/// Trains the embedding on precomputed matches.
///
/// Each step samples one grid location (seeded), takes the frames of that
/// location and its neighbors as the batch, mines that batch's triplets with
/// a per-step seed, and applies one Adam update of the summed loss. Steps
/// whose batch yields no triplets are skipped and counted.
pub fn train(
    frames: &[Frame],
    matches: &[MatchPair],
    neighborhood: &NeighborhoodSpec,
    config: &TrainConfig,
) -> Result<TrainOutcome, MetricError> {
    config.validate()?;
    let input_dim = frames
        .iter()
        .flat_map(|f| f.proposals.first())
        .map(|p| p.feature.len())
        .next()
        .ok_or(MetricError::NoFeatures)?;

    let mut model = EmbeddingModel::init(input_dim, EMBEDDING_DIM, derive_seed(config.seed, 0));
    let mut state = AdamState::new(&model);
    let mut trace = Vec::with_capacity(config.steps);
    let mut skipped = 0usize;

    // Location centers (all orientations at a location share one center).
    let mut centers: BTreeMap<LocationId, Point3<f64>> = BTreeMap::new();
    for f in frames {
        centers.entry(f.location_id).or_insert_with(|| f.pose.center());
    }
    let locations: Vec<LocationId> = centers.keys().copied().collect();
    if locations.is_empty() {
        return Err(MetricError::NoFeatures);
    }

    let frame_location: HashMap<FrameId, LocationId> =
        frames.iter().map(|f| (f.id, f.location_id)).collect();

    // Matches available when a given location is the batch center.
    let batch_matches: Vec<Vec<MatchPair>> = locations
        .iter()
        .map(|&center_loc| {
            let c = &centers[&center_loc];
            let in_batch: std::collections::BTreeSet<LocationId> = centers
                .iter()
                .filter(|(loc, center)| {
                    neighborhood.location_neighbors((center_loc, c), (**loc, center))
                })
                .map(|(loc, _)| *loc)
                .collect();
            matches
                .iter()
                .filter(|m| {
                    in_batch.contains(&frame_location[&m.a.frame_id])
                        && in_batch.contains(&frame_location[&m.b.frame_id])
                })
                .copied()
                .collect()
        })
        .collect();

    let frame_by_id: HashMap<FrameId, &Frame> = frames.iter().map(|f| (f.id, f)).collect();

    for step in 0..config.steps {
        let mut step_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 1 + step as u64));
        let loc_idx = step_rng.random_range(0..locations.len());
        let triplet_seed: u64 = step_rng.random();
        let triplets = mine_triplets(&batch_matches[loc_idx], frames, triplet_seed);
        let lr_effective = effective_learning_rate(config, step);

        if triplets.is_empty() {
            skipped += 1;
            trace.push(TraceRecord {
                step,
                lr_effective,
                loss: 0.0,
                triplets_in_batch: 0,
            });
            continue;
        }

        let features: Vec<FeatureTriplet<'_>> = triplets
            .iter()
            .map(|t| {
                let feat = |r: &crate::association::ProposalRef| -> &[f64] {
                    frame_by_id[&r.frame_id].proposals[r.index].feature.as_slice()
                };
                (feat(&t.anchor), feat(&t.positive), feat(&t.negative))
            })
            .collect();
        let (loss, grad) = loss_gradient(&model, &features, config.margin)?;
        adam_step(&mut state, &mut model, &grad, lr_effective);
        trace.push(TraceRecord {
            step,
            lr_effective,
            loss,
            triplets_in_batch: triplets.len(),
        });
    }

    Ok(TrainOutcome {
        model,
        trace,
        skipped_steps: skipped,
    })
}
