//! Joint stochastic optimization of the volume and the pose encoder, plus the
//! known-pose and per-image-pose baselines.

use alloc::boxed::Box;
use alloc::vec::Vec;
use core::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::adam::{Adam, AdamConfig, AdamError};
use crate::autodiff::{Graph, GraphError, Var};
use crate::encoder::{self, Activation, EncoderConfig, EncoderError, EncoderWeights};
use crate::metrics::{self, Gauge, MetricsError, PoseReport, DEFAULT_FSC_THRESHOLD};
use crate::physics::{rotation_tensor, Decoder, DecoderConfig, ImagingParams, OpticsConfig, PhysicsError, Volume};
use crate::sim::{simulation_decoder, ParticleStack};
use crate::so3::{HeadKind, RotationMatrix};
use crate::tensor::Tensor;

/// Where the rotations fed to the decoder come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    /// Encoder predictions from the images.
    Learned,
    /// Ground-truth rotations from the metadata; only the volume is fitted.
    Tomo,
    /// One free pose variable per image instead of an encoder.
    Rawad,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    /// Sum over the batch of per-image squared errors.
    Sum,
    /// The same divided by the number of pixels in the batch.
    Mean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "defaults::batch_size")]
    pub batch_size: usize,
    #[serde(default = "defaults::steps")]
    pub steps: usize,
    #[serde(default = "defaults::lr_volume")]
    pub lr_volume: f64,
    #[serde(default = "defaults::lr_encoder")]
    pub lr_encoder: f64,
    /// Rate for the per-image pose table (raw-AD mode only).
    #[serde(default = "defaults::lr_pose")]
    pub lr_pose: f64,
    #[serde(default = "defaults::beta1")]
    pub beta1: f64,
    #[serde(default = "defaults::beta2")]
    pub beta2: f64,
    #[serde(default = "defaults::eps")]
    pub eps: f64,
    #[serde(default = "defaults::head")]
    pub head: HeadKind,
    #[serde(default = "defaults::loss")]
    pub loss: LossKind,
    #[serde(default = "defaults::eval_interval")]
    pub eval_interval: usize,
    pub seed: u64,
    #[serde(default = "defaults::mode")]
    pub mode: TrainMode,
    #[serde(default = "defaults::encoder_filters")]
    pub encoder_filters: [usize; 3],
    #[serde(default = "defaults::encoder_mlp")]
    pub encoder_mlp: Vec<usize>,
    #[serde(default = "simulation_decoder")]
    pub decoder: DecoderConfig,
    /// Upper end of the uniform volume initialization.
    #[serde(default = "defaults::volume_init_max")]
    pub volume_init_max: f64,
}

mod defaults {
    use super::*;

    pub fn batch_size() -> usize {
        32
    }
    pub fn steps() -> usize {
        10_000
    }
    pub fn lr_volume() -> f64 {
        2e-2
    }
    pub fn lr_encoder() -> f64 {
        1e-4
    }
    pub fn lr_pose() -> f64 {
        1e-2
    }
    pub fn beta1() -> f64 {
        0.9
    }
    pub fn beta2() -> f64 {
        0.999
    }
    pub fn eps() -> f64 {
        1e-8
    }
    pub fn head() -> HeadKind {
        HeadKind::S2s2
    }
    pub fn loss() -> LossKind {
        LossKind::Sum
    }
    pub fn eval_interval() -> usize {
        200
    }
    pub fn mode() -> TrainMode {
        TrainMode::Learned
    }
    pub fn encoder_filters() -> [usize; 3] {
        [32, 64, 128]
    }
    pub fn encoder_mlp() -> Vec<usize> {
        alloc::vec![512, 512]
    }
    pub fn volume_init_max() -> f64 {
        0.01
    }
}

impl TrainConfig {
    pub fn new(seed: u64) -> Self {
        TrainConfig {
            batch_size: defaults::batch_size(),
            steps: defaults::steps(),
            lr_volume: defaults::lr_volume(),
            lr_encoder: defaults::lr_encoder(),
            lr_pose: defaults::lr_pose(),
            beta1: defaults::beta1(),
            beta2: defaults::beta2(),
            eps: defaults::eps(),
            head: defaults::head(),
            loss: defaults::loss(),
            eval_interval: defaults::eval_interval(),
            seed,
            mode: defaults::mode(),
            encoder_filters: defaults::encoder_filters(),
            encoder_mlp: defaults::encoder_mlp(),
            decoder: simulation_decoder(),
            volume_init_max: defaults::volume_init_max(),
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &'static str| Err(TrainError::Config(m));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.eval_interval == 0 {
            return bad("eval_interval must be at least 1");
        }
        for lr in [self.lr_volume, self.lr_encoder, self.lr_pose] {
            if !(lr >= 0.0 && lr.is_finite()) {
                return bad("learning rates must be finite and non-negative");
            }
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return bad("Adam constants need 0 <= beta < 1 and eps > 0");
        }
        if !(self.volume_init_max >= 0.0 && self.volume_init_max.is_finite()) {
            return bad("volume_init_max must be finite and non-negative");
        }
        Ok(())
    }

    pub fn encoder_config(&self, n: usize) -> EncoderConfig {
        EncoderConfig {
            n,
            filters: self.encoder_filters,
            mlp: self.encoder_mlp.clone(),
            head: self.head,
            activation: Activation::Relu,
        }
    }

    fn adam(&self, lr: f64) -> AdamConfig {
        AdamConfig { lr, beta1: self.beta1, beta2: self.beta2, eps: self.eps }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum TrainError {
    Config(&'static str),
    EmptyTrainingSplit,
    Physics(PhysicsError),
    Encoder(EncoderError),
    Metrics(MetricsError),
    Graph(GraphError),
    Optimizer(AdamError),
    /// The batch loss was NaN or infinite; `snapshot` is the state before the
    /// failing step.
    NonFiniteLoss { step: u64, loss: f64, batch: Vec<usize>, snapshot: Box<TrainState> },
}

impl fmt::Display for TrainError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrainError::Config(m) => write!(f, "training config: {m}"),
            TrainError::EmptyTrainingSplit => f.write_str("the training split is empty"),
            TrainError::Physics(e) => write!(f, "{e}"),
            TrainError::Encoder(e) => write!(f, "{e}"),
            TrainError::Metrics(e) => write!(f, "{e}"),
            TrainError::Graph(e) => write!(f, "{e}"),
            TrainError::Optimizer(e) => write!(f, "{e}"),
            TrainError::NonFiniteLoss { step, loss, batch, .. } => {
                write!(f, "loss {loss} at step {step} (batch {batch:?})")
            }
        }
    }
}

impl core::error::Error for TrainError {}

macro_rules! from_error {
    ($($t:ty => $v:ident),*) => {$(
        impl From<$t> for TrainError {
            fn from(e: $t) -> Self {
                TrainError::$v(e)
            }
        }
    )*};
}

from_error!(PhysicsError => Physics, EncoderError => Encoder, MetricsError => Metrics, GraphError => Graph, AdamError => Optimizer);

/// Everything that changes during training.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    /// Number of completed updates.
    pub step: u64,
    /// Volume `[n, n, n]`, origin at voxel `n/2`.
    pub volume: Vec<f64>,
    /// Encoder weights (learned mode).
    pub encoder: Option<EncoderWeights>,
    /// Raw head outputs per image, `[images, head_dim]` (raw-AD mode).
    pub poses: Option<Vec<f64>>,
    pub adam_volume: Adam,
    pub adam_encoder: Option<Adam>,
    pub adam_poses: Option<Adam>,
    /// Batch loss of every update, evaluated before the update.
    pub loss_history: Vec<f64>,
    rng: ChaCha8Rng,
}

/// Seeded stream `stream` of a run.
fn stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

/// Independent random raw head output whose rotation is roughly uniform.
fn random_raw_pose(head: HeadKind, r: &mut ChaCha8Rng) -> Vec<f64> {
    match head {
        HeadKind::S2s2 => (0..6).map(|_| r.sample(StandardNormal)).collect(),
        HeadKind::Euler | HeadKind::Quaternion => {
            (0..3).map(|_| r.gen_range(-core::f64::consts::PI..core::f64::consts::PI)).collect()
        }
    }
}

impl TrainState {
    pub fn init(stack: &ParticleStack, config: &TrainConfig) -> Result<Self, TrainError> {
        config.validate()?;
        let n = stack.n;
        let mut vr = stream(config.seed, 0);
        let volume = (0..n * n * n).map(|_| vr.gen_range(0.0..=config.volume_init_max)).collect();
        let adam_volume = Adam::new(config.adam(config.lr_volume), &[n * n * n]);
        let (mut encoder, mut adam_encoder, mut poses, mut adam_poses) = (None, None, None, None);
        match config.mode {
            TrainMode::Learned => {
                let ec = config.encoder_config(n);
                ec.validate()?;
                let w = EncoderWeights::init(&ec, &mut stream(config.seed, 1));
                let sizes: Vec<usize> = w.tensors().iter().map(Vec::len).collect();
                adam_encoder = Some(Adam::new(config.adam(config.lr_encoder), &sizes));
                encoder = Some(w);
            }
            TrainMode::Rawad => {
                let mut pr = stream(config.seed, 2);
                let table: Vec<f64> = (0..stack.len()).flat_map(|_| random_raw_pose(config.head, &mut pr)).collect();
                adam_poses = Some(Adam::new(config.adam(config.lr_pose), &[table.len()]));
                poses = Some(table);
            }
            TrainMode::Tomo => {}
        }
        Ok(TrainState {
            step: 0,
            volume,
            encoder,
            poses,
            adam_volume,
            adam_encoder,
            adam_poses,
            loss_history: Vec::new(),
            rng: stream(config.seed, 3),
        })
    }

    pub fn volume(&self, stack: &ParticleStack) -> Volume {
        Volume::new(stack.n, stack.pixel_size, self.volume.clone()).expect("volume stays finite")
    }
}

/// Sum of squared differences over all pixels of all images.
pub fn loss_l2(y: &[f64], y_hat: &[f64]) -> f64 {
    assert_eq!(y.len(), y_hat.len(), "loss_l2: batch sizes differ");
    y.iter().zip(y_hat).map(|(a, b)| (a - b) * (a - b)).sum()
}

fn loss_graph(g: &mut Graph, y_hat: Var, y: Var, kind: LossKind) -> Var {
    let d = g.sub(y_hat, y);
    let d2 = g.mul(d, d);
    match kind {
        LossKind::Sum => g.sum(d2),
        LossKind::Mean => g.mean(d2),
    }
}

/// Fixed inputs of a run: the data, the decoder and the configuration.
pub struct Trainer<'a> {
    stack: &'a ParticleStack,
    config: TrainConfig,
    decoder: Decoder,
    encoder: EncoderConfig,
}

/// One row of the metrics log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalRecord {
    pub step: u64,
    /// Mean batch loss over the updates since the previous row (the first
    /// batch loss for step 0).
    pub loss: f64,
    pub pose_mae_raw_deg: f64,
    pub pose_mae_aligned_deg: f64,
    pub gauge: Gauge,
    /// Resolution in angstrom at 0.143 after alignment, when a reference
    /// volume is known.
    pub fsc_resolution: Option<f64>,
    pub fsc_resolution_unaligned: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub log: Vec<EvalRecord>,
}

impl<'a> Trainer<'a> {
    pub fn new(stack: &'a ParticleStack, config: TrainConfig, optics: OpticsConfig) -> Result<Self, TrainError> {
        config.validate()?;
        if stack.n_train == 0 {
            return Err(TrainError::EmptyTrainingSplit);
        }
        let decoder = Decoder::new(stack.n, config.decoder, optics)?;
        let encoder = config.encoder_config(stack.n);
        Ok(Trainer { stack, config, decoder, encoder })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn encoder_config(&self) -> &EncoderConfig {
        &self.encoder
    }

    pub fn init_state(&self) -> Result<TrainState, TrainError> {
        TrainState::init(self.stack, &self.config)
    }

    /// Uniform draw with replacement from the training split.
    pub fn sample_batch(&self, state: &mut TrainState) -> Vec<usize> {
        (0..self.config.batch_size).map(|_| state.rng.gen_range(0..self.stack.n_train)).collect()
    }

    /// Loss of `batch` at the current state and, when `grad` is set, the
    /// gradients of the volume, encoder tensors and pose table.
    fn evaluate(&self, state: &TrainState, batch: &[usize], grad: bool) -> Result<(f64, Option<Grads>), TrainError> {
        let n = self.stack.n;
        let cfg = &self.config;
        let mut g = Graph::new();
        let vt = Tensor::real(&[n, n, n], state.volume.clone());
        let train_volume = grad && cfg.lr_volume > 0.0;
        let x = if train_volume { g.param(vt) } else { g.constant(vt) };
        let mut enc_params = Vec::new();
        let mut table = None;
        let rot = match cfg.mode {
            TrainMode::Tomo => {
                let rots: Vec<RotationMatrix> = batch.iter().map(|&i| self.stack.meta[i].rotation_matrix()).collect();
                g.constant(rotation_tensor(&rots))
            }
            TrainMode::Learned => {
                let w = state.encoder.as_ref().expect("learned mode has an encoder");
                let images: Vec<&[f64]> = batch.iter().map(|&i| self.stack.image(i)).collect();
                let imgs = g.constant(encoder::normalized_batch(&self.encoder, &images)?);
                enc_params = w.register(&self.encoder, &mut g, grad && cfg.lr_encoder > 0.0);
                let raw = encoder::encode_graph(&mut g, &self.encoder, &enc_params, imgs);
                g.rotation_head(raw, cfg.head)
            }
            TrainMode::Rawad => {
                let p = state.poses.as_ref().expect("raw-AD mode has a pose table");
                let k = cfg.head.raw_dim();
                let t = Tensor::real(&[self.stack.len(), k], p.clone());
                let t = if grad && cfg.lr_pose > 0.0 { g.param(t) } else { g.constant(t) };
                table = Some(t);
                let rows = g.gather_rows(t, batch);
                g.rotation_head(rows, cfg.head)
            }
        };
        let params: Vec<ImagingParams> = batch.iter().map(|&i| self.stack.meta[i].imaging()).collect();
        let filters = self.decoder.filters(&params);
        let fvol = self.decoder.fourier_volume(&mut g, x);
        let y_hat = self.decoder.project(&mut g, fvol, rot, &filters);
        let mut target = Vec::with_capacity(batch.len() * n * n);
        for &i in batch {
            target.extend_from_slice(self.stack.image(i));
        }
        let y = g.constant(Tensor::real(&[batch.len(), n, n], target));
        let loss = loss_graph(&mut g, y_hat, y, cfg.loss);
        let value = g.value(loss).item();
        if !grad || !value.is_finite() {
            return Ok((value, None));
        }
        let mut grads = g.backward(loss)?;
        let take = |grads: &mut crate::autodiff::Gradients, v: Var| grads.take(v).map(Tensor::into_real);
        let volume = if train_volume { take(&mut grads, x) } else { None };
        let encoder = if cfg.mode == TrainMode::Learned && cfg.lr_encoder > 0.0 {
            Some(enc_params.iter().map(|&p| take(&mut grads, p).expect("encoder gradient")).collect())
        } else {
            None
        };
        let poses = match table {
            Some(t) if cfg.lr_pose > 0.0 => take(&mut grads, t),
            _ => None,
        };
        Ok((value, Some(Grads { volume, encoder, poses })))
    }

    /// Batch loss at the current state without updating anything.
    pub fn batch_loss(&self, state: &TrainState, batch: &[usize]) -> Result<f64, TrainError> {
        Ok(self.evaluate(state, batch, false)?.0)
    }

    /// One forward/backward pass over `batch` and a simultaneous Adam update
    /// of every group with a positive rate. Returns the pre-update loss.
    pub fn train_step(&self, state: &mut TrainState, batch: &[usize]) -> Result<f64, TrainError> {
        let (loss, grads) = self.evaluate(state, batch, true)?;
        if !loss.is_finite() {
            return Err(TrainError::NonFiniteLoss {
                step: state.step,
                loss,
                batch: batch.to_vec(),
                snapshot: Box::new(state.clone()),
            });
        }
        let grads = grads.expect("gradients for a finite loss");
        grads.check_finite()?;
        if let Some(gv) = &grads.volume {
            state.adam_volume.step(&mut [&mut state.volume], &[gv])?;
        }
        if let (Some(ge), Some(w), Some(adam)) = (&grads.encoder, &mut state.encoder, &mut state.adam_encoder) {
            let refs: Vec<&[f64]> = ge.iter().map(Vec::as_slice).collect();
            let mut params: Vec<&mut [f64]> = w.tensors_mut().iter_mut().map(Vec::as_mut_slice).collect();
            adam.step(&mut params, &refs)?;
        }
        if let (Some(gp), Some(p), Some(adam)) = (&grads.poses, &mut state.poses, &mut state.adam_poses) {
            adam.step(&mut [p.as_mut_slice()], &[gp])?;
        }
        state.step += 1;
        state.loss_history.push(loss);
        Ok(loss)
    }

    /// Predicted rotation of every image of the stack.
    pub fn predict_poses(&self, state: &TrainState) -> Result<Vec<RotationMatrix>, TrainError> {
        match self.config.mode {
            TrainMode::Tomo => Ok(self.stack.meta.iter().map(|m| m.rotation_matrix()).collect()),
            TrainMode::Learned => {
                let w = state.encoder.as_ref().expect("learned mode has an encoder");
                let mut out = Vec::with_capacity(self.stack.len());
                let idx: Vec<usize> = (0..self.stack.len()).collect();
                for chunk in idx.chunks(64) {
                    let images: Vec<&[f64]> = chunk.iter().map(|&i| self.stack.image(i)).collect();
                    let preds = encoder::encode_to_rotation_batch(&self.encoder, w, &images)?;
                    out.extend(preds.into_iter().map(|p| p.rotation));
                }
                Ok(out)
            }
            TrainMode::Rawad => {
                let k = self.config.head.raw_dim();
                let p = state.poses.as_ref().expect("raw-AD mode has a pose table");
                p.chunks_exact(k)
                    .map(|raw| encoder::head_rotation(self.config.head, raw).map_err(|e| MetricsError::Poses(e).into()))
                    .collect()
            }
        }
    }

    /// Pose errors on the test split (on the training split in raw-AD mode,
    /// whose test images never receive gradient).
    pub fn evaluate_poses(&self, state: &TrainState) -> Result<PoseReport, TrainError> {
        let range = match self.config.mode {
            TrainMode::Rawad => self.stack.train_indices(),
            _ if self.stack.test_indices().is_empty() => self.stack.train_indices(),
            _ => self.stack.test_indices(),
        };
        if self.config.mode == TrainMode::Learned {
            let w = state.encoder.as_ref().expect("learned mode has an encoder");
            return Ok(metrics::evaluate_encoder(self.stack, range, &self.encoder, w)?);
        }
        let all = self.predict_poses(state)?;
        let est: Vec<RotationMatrix> = range.clone().map(|i| all[i]).collect();
        let gt: Vec<RotationMatrix> = range.map(|i| self.stack.meta[i].rotation_matrix()).collect();
        Ok(metrics::evaluate_poses(&est, &gt)?)
    }

    /// Metrics row for the current state.
    pub fn eval_record(&self, state: &TrainState, loss: f64, reference: Option<&Volume>) -> Result<EvalRecord, TrainError> {
        let poses = self.evaluate_poses(state)?;
        let (mut aligned, mut unaligned) = (None, None);
        if let Some(gt) = reference {
            let v = state.volume(self.stack);
            unaligned = Some(metrics::fsc(&v, gt)?.resolution(DEFAULT_FSC_THRESHOLD));
            let al = metrics::align_volumes(&v, gt, Some(poses.gauge))?;
            aligned = Some(metrics::fsc(&al.volume, gt)?.resolution(DEFAULT_FSC_THRESHOLD));
        }
        Ok(EvalRecord {
            step: state.step,
            loss,
            pose_mae_raw_deg: poses.raw_mae_deg,
            pose_mae_aligned_deg: poses.aligned_mae_deg,
            gauge: poses.gauge,
            fsc_resolution: aligned,
            fsc_resolution_unaligned: unaligned,
        })
    }

    /// Runs `steps` updates from `state`, appending a metrics row at step 0,
    /// every `eval_interval` steps and at the end. `on_step` sees the state
    /// after every update together with the row written at that step.
    pub fn run(
        &self,
        mut state: TrainState,
        reference: Option<&Volume>,
        mut on_step: impl FnMut(&TrainState, Option<&EvalRecord>),
    ) -> Result<TrainOutcome, TrainError> {
        let steps = self.config.steps as u64;
        let interval = self.config.eval_interval as u64;
        let mut log = Vec::new();
        // The starting row reports the loss of the first batch at the initial state.
        let probe = self.sample_batch(&mut state.clone());
        let loss = self.batch_loss(&state, &probe)?;
        let rec = self.eval_record(&state, loss, reference)?;
        log.push(rec);
        on_step(&state, Some(&rec));
        let (mut sum, mut count) = (0.0, 0usize);
        for done in 1..=steps {
            let batch = self.sample_batch(&mut state);
            sum += self.train_step(&mut state, &batch)?;
            count += 1;
            let row = if done % interval == 0 || done == steps {
                let rec = self.eval_record(&state, sum / count as f64, reference)?;
                (sum, count) = (0.0, 0);
                log.push(rec);
                Some(rec)
            } else {
                None
            };
            on_step(&state, row.as_ref());
        }
        Ok(TrainOutcome { state, log })
    }
}

struct Grads {
    volume: Option<Vec<f64>>,
    encoder: Option<Vec<Vec<f64>>>,
    poses: Option<Vec<f64>>,
}

impl Grads {
    /// Rejects the step before any group is updated.
    fn check_finite(&self) -> Result<(), AdamError> {
        let groups = self.volume.iter().chain(self.encoder.iter().flatten()).chain(self.poses.iter());
        for (tensor, g) in groups.enumerate() {
            if let Some(index) = g.iter().position(|v| !v.is_finite()) {
                return Err(AdamError::NonFiniteGradient { tensor, index });
            }
        }
        Ok(())
    }
}

/// Initializes and runs a full training job.
pub fn train(
    stack: &ParticleStack,
    config: &TrainConfig,
    optics: OpticsConfig,
    reference: Option<&Volume>,
) -> Result<TrainOutcome, TrainError> {
    let trainer = Trainer::new(stack, config.clone(), optics)?;
    let state = trainer.init_state()?;
    trainer.run(state, reference, |_, _| {})
}
