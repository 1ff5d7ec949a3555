//! The trajectory prediction model: motion encoder, optional map encoders,
//! fusion, masked lane classifier, and a transformer decoder that emits
//! positions either autoregressively or in a single teacher-forced pass.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::ModelSample;
use crate::geometry::Point2;
use crate::lane::from_agent_frame;
use crate::nn::{
    causal_mask, glorot, positional_encoding, DecoderLayer, EncoderLayer, LayerNorm, Linear,
    Mlp, Parameterized,
};
use crate::tensor::{
    load_checkpoint, save_checkpoint, CheckpointError, Optimizer, Tensor, TensorError,
};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("config sidecar: {0}")]
    Sidecar(serde_json::Error),
    #[error("checkpoint is missing tensor {0}")]
    MissingTensor(String),
    #[error("checkpoint tensor {0} has the wrong shape")]
    ShapeMismatch(String),
    #[error("bad config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MapMode {
    None,
    Occupancy,
    Lane,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegressionMode {
    /// Predictions are fed back as decoder input, in training and inference.
    Ar,
    /// Training teacher-forces the shifted ground truth through one causal
    /// pass; inference still rolls out autoregressively.
    Nar,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub ff_dim: usize,
    pub map_mode: MapMode,
    pub regression_mode: RegressionMode,
    /// Output width of each map encoder.
    pub map_fc_dim: usize,
    /// Loss blend: `alpha * mse + (1 - alpha) * ce`.
    pub alpha: f64,
    pub history_frames: usize,
    pub horizon_frames: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 64,
            n_heads: 4,
            enc_layers: 2,
            dec_layers: 2,
            ff_dim: 128,
            map_mode: MapMode::Lane,
            regression_mode: RegressionMode::Ar,
            map_fc_dim: 32,
            alpha: 0.5,
            history_frames: 4,
            horizon_frames: 12,
            seed: 42,
        }
    }
}

impl ModelConfig {
    /// Full-size configuration; far too slow for tests, kept for reference.
    pub fn full_size() -> Self {
        ModelConfig {
            d_model: 512,
            n_heads: 8,
            enc_layers: 6,
            dec_layers: 6,
            ff_dim: 2048,
            ..ModelConfig::default()
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::Config(m.into()));
        if self.d_model == 0 || self.d_model % self.n_heads != 0 {
            return bad("d_model must be a positive multiple of n_heads");
        }
        if self.enc_layers == 0 || self.dec_layers == 0 {
            return bad("need at least one encoder and decoder layer");
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad("alpha must lie in [0, 1]");
        }
        if self.history_frames < 2 || self.horizon_frames == 0 {
            return bad("history needs >= 2 frames and horizon >= 1");
        }
        Ok(())
    }
}

/// Occupancy patch side length the occupancy encoder is built for.
pub const RASTER_CELLS: usize = 64;
/// Coordinates span tens of meters; feeding them in raw saturates the
/// classifier softmax at initialization and stalls its gradients. All
/// coordinate inputs are multiplied by this scale, and generator outputs are
/// divided by it, so predictions and losses stay in meters.
pub const COORD_SCALE: f64 = 0.1;
const OCC_CHANNELS: [usize; 5] = [1, 4, 8, 8, 8];
const OCC_FILTERS: [usize; 4] = [5, 5, 5, 3];
const OCC_STRIDES: [usize; 4] = [2, 2, 1, 1];
/// Spatial sizes 64 -> 30 -> 13 -> 9 -> 7 under the filters above.
const OCC_FINAL_SPATIAL: usize = 7;

const LANE_CONV_CHANNELS: usize = 8;
const LANE_CONV_FILTER: usize = 3;
const LANE_CONV_STRIDE: usize = 2;
/// 18 lane points -> 8 under filter 3 stride 2.
const LANE_CONV_OUT_LEN: usize = 8;

const CLASSIFIER_HIDDEN: usize = 256;
const GENERATOR_HIDDEN: usize = 256;

struct OccupancyEncoder {
    kernels: Vec<Tensor>,
    fc: Linear,
    norm: LayerNorm,
}

impl OccupancyEncoder {
    fn new(rng: &mut ChaCha8Rng, map_fc_dim: usize) -> Self {
        let kernels = (0..4)
            .map(|i| {
                let (ci, co, f) = (OCC_CHANNELS[i], OCC_CHANNELS[i + 1], OCC_FILTERS[i]);
                Tensor::parameter(
                    vec![co, ci, f, f],
                    glorot(rng, ci * f * f, co, co * ci * f * f),
                )
            })
            .collect();
        let flat = OCC_CHANNELS[4] * OCC_FINAL_SPATIAL * OCC_FINAL_SPATIAL;
        OccupancyEncoder {
            kernels,
            fc: Linear::new(rng, flat, map_fc_dim),
            norm: LayerNorm::new(map_fc_dim),
        }
    }

    fn forward(&self, raster: &Tensor) -> Result<Tensor, TensorError> {
        let mut x = raster.clone();
        for (k, stride) in self.kernels.iter().zip(OCC_STRIDES) {
            x = x.conv2d(k, stride)?.relu();
        }
        let flat = x.numel();
        self.norm.forward(&self.fc.forward(&x.reshape(vec![flat]))?.relu())
    }
}

impl Parameterized for OccupancyEncoder {
    fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        for (i, k) in self.kernels.iter().enumerate() {
            out.push((format!("{prefix}.conv{i}"), k.clone()));
        }
        self.fc.collect_params(&format!("{prefix}.fc"), out);
        self.norm.collect_params(&format!("{prefix}.norm"), out);
    }
}

/// One shared convolution and FC applied to each candidate lane.
struct LaneEncoder {
    kernel: Tensor,
    fc: Linear,
    norm: LayerNorm,
}

impl LaneEncoder {
    fn new(rng: &mut ChaCha8Rng, map_fc_dim: usize) -> Self {
        let kernel = Tensor::parameter(
            vec![LANE_CONV_CHANNELS, 2, LANE_CONV_FILTER],
            glorot(
                rng,
                2 * LANE_CONV_FILTER,
                LANE_CONV_CHANNELS,
                LANE_CONV_CHANNELS * 2 * LANE_CONV_FILTER,
            ),
        );
        LaneEncoder {
            kernel,
            fc: Linear::new(rng, LANE_CONV_CHANNELS * LANE_CONV_OUT_LEN, map_fc_dim),
            norm: LayerNorm::new(map_fc_dim),
        }
    }

    /// `lane: [2, 18]` (x row, y row) -> `[map_fc_dim]`.
    fn forward(&self, lane: &Tensor) -> Result<Tensor, TensorError> {
        let h = lane.conv1d(&self.kernel, LANE_CONV_STRIDE)?.relu();
        let flat = h.numel();
        self.norm.forward(&self.fc.forward(&h.reshape(vec![flat]))?.relu())
    }
}

impl Parameterized for LaneEncoder {
    fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{prefix}.conv"), self.kernel.clone()));
        self.fc.collect_params(&format!("{prefix}.fc"), out);
        self.norm.collect_params(&format!("{prefix}.norm"), out);
    }
}

pub struct Model {
    pub cfg: ModelConfig,
    motion_in: Linear,
    encoder: Vec<EncoderLayer>,
    occupancy: Option<OccupancyEncoder>,
    lanes: Option<LaneEncoder>,
    /// Projects a lane feature into a decoder memory row.
    lane_proj: Option<Linear>,
    fuse: Linear,
    classifier: Option<Mlp>,
    dec_in: Linear,
    decoder: Vec<DecoderLayer>,
    generator: Mlp,
    pe_hist: Tensor,
}

/// Scalar loss parts; `total = alpha * mse + (1 - alpha) * ce`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossValue {
    pub total: f64,
    pub mse: f64,
    pub ce: f64,
}

/// Per-slot trajectories plus the classifier distribution. Variants without
/// a lane input produce a single trajectory in the middle slot with
/// probability one.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionOutput {
    pub trajectories_rel: [Option<Vec<Point2>>; 3],
    pub lane_probs: [f64; 3],
    pub selected: usize,
    pub selected_global: Vec<Point2>,
}

impl PredictionOutput {
    pub fn selected_rel(&self) -> &[Point2] {
        self.trajectories_rel[self.selected].as_ref().unwrap()
    }
}

/// Mean squared error between an [n, 2] prediction matrix and ground-truth
/// coordinates.
fn mse_from(pred_mat: &Tensor, gt: &[Point2]) -> Result<Tensor, ModelError> {
    let vals: Vec<f64> = gt.iter().flat_map(|p| [p.x, p.y]).collect();
    let gt_mat = Tensor::constant(vec![gt.len(), 2], vals);
    let diff = pred_mat.sub(&gt_mat)?;
    Ok(diff.elementwise_mul(&diff)?.mean_all())
}

/// Cross-entropy of the ground-truth slot under the masked, renormalized
/// classifier distribution: `ln(sum unmasked) - ln(p_gt)`.
fn masked_ce(probs: &Tensor, mask: &Tensor, gt_lane: usize) -> Result<Tensor, ModelError> {
    let z = probs.elementwise_mul(mask)?.sum_all();
    Ok(z.ln().sub(&probs.pick(gt_lane).ln())?)
}

/// Combine the loss terms: `total = alpha * mse + (1 - alpha) * ce`.
fn blend(
    mse: &Tensor,
    ce: Option<&Tensor>,
    alpha: f64,
) -> Result<(Tensor, LossValue), ModelError> {
    match ce {
        Some(ce) => {
            let total = mse.scale(alpha).add(&ce.scale(1.0 - alpha))?;
            let parts = LossValue {
                total: total.scalar_value(),
                mse: mse.scalar_value(),
                ce: ce.scalar_value(),
            };
            Ok((total, parts))
        }
        None => {
            let parts = LossValue {
                total: mse.scalar_value(),
                mse: mse.scalar_value(),
                ce: 0.0,
            };
            Ok((mse.clone(), parts))
        }
    }
}

/// The blended loss for externally supplied predictions, targets, and
/// classifier logits, built from the same operations `compute_loss` uses.
/// `gt_lane` must be an unmasked slot.
pub fn blended_loss(
    pred: &[Point2],
    gt: &[Point2],
    logits: [f64; 3],
    mask: [bool; 3],
    gt_lane: usize,
    alpha: f64,
) -> Result<LossValue, ModelError> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(ModelError::Config(
            "prediction and ground truth must have equal nonzero length".into(),
        ));
    }
    if gt_lane > 2 || !mask[gt_lane] {
        return Err(ModelError::Config("gt_lane must be an unmasked slot".into()));
    }
    let pred_vals: Vec<f64> = pred.iter().flat_map(|p| [p.x, p.y]).collect();
    let pred_mat = Tensor::constant(vec![pred.len(), 2], pred_vals);
    let mse = mse_from(&pred_mat, gt)?;
    let probs = Tensor::constant(vec![3], logits.to_vec()).softmax();
    let mask_t = Tensor::constant(
        vec![3],
        mask.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
    );
    let ce = masked_ce(&probs, &mask_t, gt_lane)?;
    Ok(blend(&mse, Some(&ce), alpha)?.1)
}

/// Zero masked entries and renormalize the rest to sum to one.
pub fn masked_renormalize(probs: [f64; 3], mask: [bool; 3]) -> [f64; 3] {
    let mut out = [0.0; 3];
    let mut z = 0.0;
    for i in 0..3 {
        if mask[i] {
            out[i] = probs[i];
            z += probs[i];
        }
    }
    for v in &mut out {
        *v /= z;
    }
    out
}

impl Model {
    pub fn new(cfg: ModelConfig) -> Result<Model, ModelError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let d = cfg.d_model;

        let motion_in = Linear::new(&mut rng, 2, d);
        let encoder = (0..cfg.enc_layers)
            .map(|_| EncoderLayer::new(&mut rng, d, cfg.n_heads, cfg.ff_dim))
            .collect();

        let (occupancy, lanes, lane_proj, classifier, fuse_in) = match cfg.map_mode {
            MapMode::None => (None, None, None, None, d),
            MapMode::Occupancy => (
                Some(OccupancyEncoder::new(&mut rng, cfg.map_fc_dim)),
                None,
                None,
                None,
                d + cfg.map_fc_dim,
            ),
            MapMode::Lane => (
                None,
                Some(LaneEncoder::new(&mut rng, cfg.map_fc_dim)),
                Some(Linear::new(&mut rng, cfg.map_fc_dim, d)),
                Some(Mlp::new(&mut rng, &[d, CLASSIFIER_HIDDEN, 3])),
                d + 3 * cfg.map_fc_dim,
            ),
        };
        let fuse = Linear::new(&mut rng, fuse_in, d);
        let dec_in = Linear::new(&mut rng, 2, d);
        let decoder = (0..cfg.dec_layers)
            .map(|_| DecoderLayer::new(&mut rng, d, cfg.n_heads, cfg.ff_dim))
            .collect();
        let generator = Mlp::new(&mut rng, &[d, GENERATOR_HIDDEN, 2]);
        let pe_hist = positional_encoding(cfg.history_frames, d);

        Ok(Model {
            cfg,
            motion_in,
            encoder,
            occupancy,
            lanes,
            lane_proj,
            fuse,
            classifier,
            dec_in,
            decoder,
            generator,
            pe_hist,
        })
    }

    /// Trainable parameters, sorted by name. Names are unique.
    pub fn params(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.motion_in.collect_params("motion_in", &mut out);
        for (i, l) in self.encoder.iter().enumerate() {
            l.collect_params(&format!("encoder.{i}"), &mut out);
        }
        if let Some(o) = &self.occupancy {
            o.collect_params("occupancy", &mut out);
        }
        if let Some(l) = &self.lanes {
            l.collect_params("lanes", &mut out);
        }
        if let Some(p) = &self.lane_proj {
            p.collect_params("lane_proj", &mut out);
        }
        self.fuse.collect_params("fuse", &mut out);
        if let Some(c) = &self.classifier {
            c.collect_params("classifier", &mut out);
        }
        self.dec_in.collect_params("dec_in", &mut out);
        for (i, l) in self.decoder.iter().enumerate() {
            l.collect_params(&format!("decoder.{i}"), &mut out);
        }
        self.generator.collect_params("generator", &mut out);
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }

    // -- encoding ----------------------------------------------------------

    fn check_sample(&self, sample: &ModelSample) -> Result<(), ModelError> {
        if sample.history_rel.len() != self.cfg.history_frames {
            return Err(ModelError::Config(format!(
                "sample has {} history frames, model expects {}",
                sample.history_rel.len(),
                self.cfg.history_frames
            )));
        }
        if self.cfg.map_mode == MapMode::Occupancy {
            match &sample.raster {
                None => {
                    return Err(ModelError::Config(
                        "occupancy variant needs rasterized samples".into(),
                    ))
                }
                Some(g) if g.size != RASTER_CELLS => {
                    return Err(ModelError::Config(format!(
                        "raster is {} cells, model expects {RASTER_CELLS}",
                        g.size
                    )))
                }
                Some(_) => {}
            }
        }
        Ok(())
    }

    fn encode_motion(&self, sample: &ModelSample) -> Result<Tensor, ModelError> {
        let h = self.cfg.history_frames;
        let vals: Vec<f64> = sample
            .history_rel
            .iter()
            .flat_map(|p| [p.x * COORD_SCALE, p.y * COORD_SCALE])
            .collect();
        let x = Tensor::constant(vec![h, 2], vals);
        let mut enc = self.motion_in.forward(&x)?.add(&self.pe_hist)?;
        for layer in &self.encoder {
            enc = layer.forward(&enc)?;
        }
        Ok(enc.row(h - 1))
    }

    fn lane_slot_tensor(sample: &ModelSample, slot: usize) -> Tensor {
        let lane = &sample.lane_input.lanes[slot];
        let mut vals = Vec::with_capacity(2 * lane.len());
        vals.extend(lane.iter().map(|p| p.x * COORD_SCALE));
        vals.extend(lane.iter().map(|p| p.y * COORD_SCALE));
        Tensor::constant(vec![2, lane.len()], vals)
    }

    /// Fused scene feature plus per-slot lane features (lane variant only).
    fn encode(&self, sample: &ModelSample) -> Result<(Tensor, Option<[Tensor; 3]>), ModelError> {
        let motion = self.encode_motion(sample)?;
        match self.cfg.map_mode {
            MapMode::None => Ok((self.fuse.forward(&motion)?, None)),
            MapMode::Occupancy => {
                let grid = sample.raster.as_ref().unwrap();
                let raster = Tensor::constant(
                    vec![1, RASTER_CELLS, RASTER_CELLS],
                    grid.as_f64(),
                );
                let occ = self.occupancy.as_ref().unwrap().forward(&raster)?;
                let fused = self.fuse.forward(&Tensor::concat(&[motion, occ], 0)?)?;
                Ok((fused, None))
            }
            MapMode::Lane => {
                let enc = self.lanes.as_ref().unwrap();
                let feats = [
                    enc.forward(&Self::lane_slot_tensor(sample, 0))?,
                    enc.forward(&Self::lane_slot_tensor(sample, 1))?,
                    enc.forward(&Self::lane_slot_tensor(sample, 2))?,
                ];
                let fused = self.fuse.forward(&Tensor::concat(
                    &[
                        motion,
                        feats[0].clone(),
                        feats[1].clone(),
                        feats[2].clone(),
                    ],
                    0,
                )?)?;
                Ok((fused, Some(feats)))
            }
        }
    }

    /// Decoder memory for one candidate: the fused feature, plus the lane's
    /// own projected feature when lanes are in play.
    fn memory(&self, fused: &Tensor, lane_feat: Option<&Tensor>) -> Result<Tensor, ModelError> {
        let rows = match lane_feat {
            Some(f) => vec![fused.clone(), self.lane_proj.as_ref().unwrap().forward(f)?],
            None => vec![fused.clone()],
        };
        Ok(Tensor::stack_rows(&rows)?)
    }

    // -- decoding ----------------------------------------------------------

    fn decode_step(&self, inputs: &Tensor, memory: &Tensor) -> Result<Tensor, ModelError> {
        let len = inputs.shape()[0];
        let mut x = self
            .dec_in
            .forward(inputs)?
            .add(&positional_encoding(len, self.cfg.d_model))?;
        let mask = causal_mask(len);
        for layer in &self.decoder {
            x = layer.forward(&x, memory, &mask)?;
        }
        Ok(x)
    }

    /// Autoregressive rollout: each emitted position is fed back in.
    fn decode_ar(&self, memory: &Tensor) -> Result<Vec<Tensor>, ModelError> {
        let mut preds: Vec<Tensor> = Vec::with_capacity(self.cfg.horizon_frames);
        let start = Tensor::constant(vec![2], vec![0.0, 0.0]);
        for t in 0..self.cfg.horizon_frames {
            let mut rows = vec![start.clone()];
            rows.extend(preds.iter().map(|p| p.scale(COORD_SCALE)));
            let inputs = Tensor::stack_rows(&rows)?;
            let out = self.decode_step(&inputs, memory)?;
            preds.push(self.generator.forward(&out.row(t))?.scale(1.0 / COORD_SCALE));
        }
        Ok(preds)
    }

    /// One teacher-forced pass over the shifted ground truth.
    fn decode_nar(&self, memory: &Tensor, gt: &[Point2]) -> Result<Vec<Tensor>, ModelError> {
        let f = self.cfg.horizon_frames;
        let mut vals = vec![0.0, 0.0];
        for p in &gt[..f - 1] {
            vals.extend([p.x * COORD_SCALE, p.y * COORD_SCALE]);
        }
        let inputs = Tensor::constant(vec![f, 2], vals);
        let out = self.decode_step(&inputs, memory)?;
        (0..f)
            .map(|t| Ok(self.generator.forward(&out.row(t))?.scale(1.0 / COORD_SCALE)))
            .collect()
    }

    // -- loss and training -------------------------------------------------

    /// Classifier cross-entropy of the ground-truth slot under the masked,
    /// renormalized distribution: `ln(sum unmasked) - ln(p_gt)`.
    fn classifier_ce(&self, fused: &Tensor, sample: &ModelSample) -> Result<Tensor, ModelError> {
        let logits = self.classifier.as_ref().unwrap().forward(fused)?;
        let probs = logits.softmax();
        let mask_vals: Vec<f64> = sample
            .lane_input
            .mask
            .as_array()
            .iter()
            .map(|&b| if b { 1.0 } else { 0.0 })
            .collect();
        let mask = Tensor::constant(vec![3], mask_vals);
        masked_ce(&probs, &mask, sample.gt_lane)
    }

    pub fn compute_loss(&self, sample: &ModelSample) -> Result<(Tensor, LossValue), ModelError> {
        self.check_sample(sample)?;
        let f = self.cfg.horizon_frames;
        if sample.future_rel.len() != f {
            return Err(ModelError::Config(format!(
                "sample has {} future frames, model expects {f}",
                sample.future_rel.len()
            )));
        }
        let (fused, lane_feats) = self.encode(sample)?;

        let lane_feat = lane_feats.as_ref().map(|fs| &fs[sample.gt_lane]);
        let memory = self.memory(&fused, lane_feat)?;
        let preds = match self.cfg.regression_mode {
            RegressionMode::Ar => self.decode_ar(&memory)?,
            RegressionMode::Nar => self.decode_nar(&memory, &sample.future_rel)?,
        };
        let pred_mat = Tensor::stack_rows(&preds)?;
        let mse = mse_from(&pred_mat, &sample.future_rel)?;
        let ce = if self.cfg.map_mode == MapMode::Lane {
            Some(self.classifier_ce(&fused, sample)?)
        } else {
            None
        };
        blend(&mse, ce.as_ref(), self.cfg.alpha)
    }

    /// One pass over the samples in shuffled mini-batches, accumulating
    /// per-sample gradients and stepping once per batch. Returns the mean
    /// loss over samples.
    pub fn train_epoch(
        &self,
        samples: &[ModelSample],
        optimizer: &mut Optimizer,
        batch_size: usize,
        shuffle_seed: u64,
    ) -> Result<LossValue, ModelError> {
        assert!(batch_size >= 1);
        assert!(!samples.is_empty(), "cannot train on zero samples");
        let mut order: Vec<usize> = (0..samples.len()).collect();
        use rand::seq::SliceRandom;
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(shuffle_seed));

        let params = self.params();
        let mut sum = LossValue::default();
        for batch in order.chunks(batch_size) {
            for &i in batch {
                let (loss, parts) = self.compute_loss(&samples[i])?;
                loss.scale(1.0 / batch.len() as f64).backward()?;
                sum.total += parts.total;
                sum.mse += parts.mse;
                sum.ce += parts.ce;
            }
            optimizer.step(&params)?;
        }
        let n = samples.len() as f64;
        Ok(LossValue {
            total: sum.total / n,
            mse: sum.mse / n,
            ce: sum.ce / n,
        })
    }

    // -- inference ---------------------------------------------------------

    /// Masked lane distribution and selected slot for a fused scene feature
    /// (shape `[d_model]`). The selected slot is always unmasked. Lane
    /// variant only.
    pub fn classify(
        &self,
        fused: &Tensor,
        mask: [bool; 3],
    ) -> Result<([f64; 3], usize), ModelError> {
        let Some(classifier) = &self.classifier else {
            return Err(ModelError::Config(
                "only the lane variant has a classifier".into(),
            ));
        };
        if !mask[1] {
            return Err(ModelError::Config("the middle slot is always real".into()));
        }
        let raw = classifier.forward(fused)?.softmax().data();
        let probs = masked_renormalize([raw[0], raw[1], raw[2]], mask);
        let mut selected = 1;
        for i in 0..3 {
            if mask[i] && probs[i] > probs[selected] {
                selected = i;
            }
        }
        Ok((probs, selected))
    }

    /// Roll out every candidate trajectory; the classifier (when present)
    /// picks the most probable unmasked slot.
    pub fn predict(&self, sample: &ModelSample) -> Result<PredictionOutput, ModelError> {
        self.check_sample(sample)?;
        let (fused, lane_feats) = self.encode(sample)?;

        let to_points = |preds: Vec<Tensor>| -> Vec<Point2> {
            preds
                .iter()
                .map(|p| {
                    let d = p.data();
                    Point2::new(d[0], d[1])
                })
                .collect()
        };

        let (trajectories_rel, lane_probs, selected) = match &lane_feats {
            None => {
                let memory = self.memory(&fused, None)?;
                let traj = to_points(self.decode_ar(&memory)?);
                let mut slots: [Option<Vec<Point2>>; 3] = [None, None, None];
                slots[1] = Some(traj);
                (slots, [0.0, 1.0, 0.0], 1)
            }
            Some(feats) => {
                let (probs, best) =
                    self.classify(&fused, sample.lane_input.mask.as_array())?;
                let mut slots: [Option<Vec<Point2>>; 3] = [None, None, None];
                for (i, feat) in feats.iter().enumerate() {
                    if sample.lane_input.mask.slot(i) {
                        let memory = self.memory(&fused, Some(feat))?;
                        slots[i] = Some(to_points(self.decode_ar(&memory)?));
                    }
                }
                (slots, probs, best)
            }
        };

        let selected_global = trajectories_rel[selected]
            .as_ref()
            .unwrap()
            .iter()
            .map(|p| from_agent_frame(p, &sample.origin, &sample.heading))
            .collect();
        Ok(PredictionOutput {
            trajectories_rel,
            lane_probs,
            selected,
            selected_global,
        })
    }

    // -- persistence -------------------------------------------------------

    /// Weights at `path`, config at `path + ".json"`.
    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        save_checkpoint(path, &self.params())?;
        let sidecar = format!("{}.json", path.display());
        let json = serde_json::to_string_pretty(&self.cfg).map_err(ModelError::Sidecar)?;
        fs::write(sidecar, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Model, ModelError> {
        let sidecar = format!("{}.json", path.display());
        let cfg: ModelConfig =
            serde_json::from_str(&fs::read_to_string(sidecar)?).map_err(ModelError::Sidecar)?;
        let model = Model::new(cfg)?;
        let mut stored: HashMap<String, (Vec<usize>, Vec<f64>)> = load_checkpoint(path)?
            .into_iter()
            .map(|(name, dims, vals)| (name, (dims, vals)))
            .collect();
        for (name, tensor) in model.params() {
            let (dims, vals) = stored
                .remove(&name)
                .ok_or_else(|| ModelError::MissingTensor(name.clone()))?;
            if dims != tensor.shape() {
                return Err(ModelError::ShapeMismatch(name));
            }
            tensor.set_data(&vals);
        }
        if let Some(name) = stored.into_keys().next() {
            return Err(ModelError::ShapeMismatch(format!("unexpected tensor {name}")));
        }
        Ok(model)
    }
}

/// Mean ADE/FDE of the selected trajectory over the samples.
pub fn evaluate(
    model: &Model,
    samples: &[ModelSample],
) -> Result<crate::metrics::HorizonReport, ModelError> {
    let mut pairs = Vec::with_capacity(samples.len());
    for s in samples {
        let out = model.predict(s)?;
        pairs.push((out.selected_rel().to_vec(), s.future_rel.clone()));
    }
    crate::metrics::HorizonReport::from_pairs(&pairs)
        .map_err(|e| ModelError::Config(e.to_string()))
}
