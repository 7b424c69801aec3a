//! Refinement: multi-view batches, alignment heads at intermediate blocks with
//! their own support queues, layer-wise decayed AdamW and an EMA encoder.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{DataLayout, Dataset};
use crate::encoder::{cls_tap_gradient, encode_dataset, Collect, EncoderError, EncoderInput, EncoderParams, InputLayout};
use crate::heads::{schedule_weight, EnsembleConfig, HeadError, IdHead, Mode, ScheduleKind, ScheduleSpec};
use crate::nna::{assemble_batch, nna_loss, ContrastiveBatch, NnaError};
use crate::numerics::{l2_normalize_rows_backward, Matrix, RngStream};
use crate::optim::{exempt_from_decay, warmup_cosine, AdamW, TensorHyper};
use crate::params::{axpy, manifest, Parameters};
use crate::probe::{knn_probe, KnnConfig, ProbeDataset, ProbeError};
use crate::queue::{QueueConfig, QueueError, SupportQueue};
use crate::views::{make_views, Views, ViewsConfig};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrainError {
    #[error("invalid refine config: {0}")]
    BadConfig(String),
    #[error("block index {index} outside 0..={depth}")]
    BadIndex { index: usize, depth: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite loss at step {step} (head {head})")]
    NonFiniteLoss { step: usize, head: usize },
    #[error("epoch callback failed: {0}")]
    Callback(String),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Head(#[from] HeadError),
    #[error(transparent)]
    Nna(#[from] NnaError),
    #[error(transparent)]
    Queue(#[from] QueueError),
    #[error(transparent)]
    Probe(#[from] ProbeError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RefineConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup_epochs: usize,
    pub end_lr: f64,
    pub layer_decay: f64,
    pub freeze_blocks: usize,
    pub encoder_weight_decay: f64,
    pub head_weight_decay: f64,
    pub betas: [f64; 2],
    pub temperature: f64,
    pub queue: QueueConfig,
    pub ema_momentum: f64,
    pub views: ViewsConfig,
    pub schedule: ScheduleKind,
    /// Negatives are the retrieved neighbors instead of the projections.
    pub swap_negatives: bool,
    pub init_epochs: usize,
    pub init_lr: f64,
    /// Rows used for the per-epoch k-NN check; 0 disables it.
    pub knn_subset: usize,
    pub knn: KnnConfig,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 64,
            peak_lr: 4e-4,
            warmup_epochs: 4,
            end_lr: 1e-6,
            layer_decay: 0.65,
            freeze_blocks: 0,
            encoder_weight_decay: 0.05,
            head_weight_decay: 1e-5,
            betas: [0.9, 0.95],
            temperature: 0.2,
            queue: QueueConfig::default(),
            ema_momentum: 0.9999,
            views: ViewsConfig::default(),
            schedule: ScheduleKind::Constant,
            swap_negatives: false,
            init_epochs: 5,
            init_lr: 2e-4,
            knn_subset: 400,
            knn: KnnConfig::default(),
        }
    }
}

impl RefineConfig {
    pub fn validate(&self, depth: usize) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::BadConfig(m));
        if !(self.layer_decay > 0.0 && self.layer_decay <= 1.0) {
            return bad(format!("layer_decay {} outside (0, 1]", self.layer_decay));
        }
        if self.freeze_blocks >= depth {
            return bad(format!("freeze_blocks {} must be below depth {depth}", self.freeze_blocks));
        }
        if !(0.0..=1.0).contains(&self.ema_momentum) {
            return bad(format!("ema_momentum {} outside [0, 1]", self.ema_momentum));
        }
        if self.batch_size == 0 || !(self.temperature > 0.0) {
            return bad("batch_size must be >= 1 and temperature > 0".into());
        }
        if !(self.peak_lr >= 0.0 && self.end_lr >= 0.0 && self.init_lr >= 0.0) {
            return bad("learning rates must be >= 0".into());
        }
        self.queue.validate()?;
        self.views.validate().map_err(TrainError::BadConfig)?;
        self.knn.validate()?;
        Ok(())
    }
}

/// `peak · decay^(depth − block)`; block 0 holds the embeddings.
pub fn layerwise_lr(peak: f64, decay: f64, block: usize, depth: usize) -> Result<f64, TrainError> {
    if block > depth {
        return Err(TrainError::BadIndex { index: block, depth });
    }
    Ok(peak * decay.powi((depth - block) as i32))
}

pub fn lr_schedule(step: usize, total_steps: usize, steps_per_epoch: usize, cfg: &RefineConfig) -> f64 {
    let warmup = (cfg.warmup_epochs * steps_per_epoch).min(total_steps);
    warmup_cosine(step, total_steps, warmup, cfg.peak_lr, cfg.end_lr)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmaState {
    pub shadow: EncoderParams,
    pub momentum: f64,
}

impl EmaState {
    pub fn new(params: &EncoderParams, momentum: f64) -> Self {
        Self { shadow: params.clone(), momentum }
    }
}

/// `shadow ← m·shadow + (1 − m)·params`.
pub fn ema_update(ema: &mut EmaState, params: &EncoderParams) -> Result<(), TrainError> {
    if manifest(&ema.shadow) != manifest(params) {
        return Err(TrainError::ShapeMismatch("EMA shadow and encoder differ in shape".into()));
    }
    let m = ema.momentum;
    let mut src = Vec::new();
    params.visit(&mut |_, s| src.push(s.to_vec()));
    let mut t = 0;
    ema.shadow.visit_mut(&mut |_, s| {
        for (a, b) in s.iter_mut().zip(&src[t]) {
            *a = m * *a + (1.0 - m) * b;
        }
        t += 1;
    });
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub losses: Vec<f64>,
    pub weights: Vec<f64>,
    pub nn_swap: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_losses: Vec<f64>,
    pub nn_swap: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub knn: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RefineLog {
    pub steps: Vec<StepLog>,
    pub epochs: Vec<EpochLog>,
}

/// Everything that changes during refinement; checkpointed between epochs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefineState {
    pub encoder: EncoderParams,
    pub attach: Vec<usize>,
    pub heads: Vec<IdHead>,
    pub queues: Vec<SupportQueue>,
    pub ema: EmaState,
    pub encoder_opt: AdamW,
    pub head_opts: Vec<AdamW>,
    /// Completed head-initialization epochs.
    pub init_epoch: usize,
    /// Completed refinement epochs and steps.
    pub epoch: usize,
    pub step: usize,
}

impl RefineState {
    pub fn new(
        encoder: EncoderParams,
        ensemble: &EnsembleConfig,
        cfg: &RefineConfig,
        rng: &RngStream,
    ) -> Result<Self, TrainError> {
        ensemble.validate(encoder.depth())?;
        cfg.validate(encoder.depth())?;
        let mut heads = Vec::with_capacity(ensemble.heads.len());
        let mut queues = Vec::with_capacity(ensemble.heads.len());
        for (i, h) in ensemble.heads.iter().enumerate() {
            if h.input_dim != encoder.width() {
                return Err(TrainError::ShapeMismatch(format!(
                    "head {i} expects {} features, encoder width is {}",
                    h.input_dim,
                    encoder.width()
                )));
            }
            heads.push(IdHead::new(h.clone(), &mut rng.split(0x4800 + i as u64))?);
            queues.push(SupportQueue::new(cfg.queue.capacity, h.bottleneck())?);
        }
        let [b1, b2] = cfg.betas;
        Ok(Self {
            ema: EmaState::new(&encoder, cfg.ema_momentum),
            encoder,
            attach: ensemble.attach_indices.clone(),
            head_opts: heads.iter().map(|_| AdamW::new(b1, b2, 1e-8)).collect(),
            heads,
            queues,
            encoder_opt: AdamW::new(b1, b2, 1e-8),
            init_epoch: 0,
            epoch: 0,
            step: 0,
        })
    }
}

#[derive(Clone, Copy, PartialEq)]
enum Phase {
    /// Heads only, encoder frozen, top-1 retrieval, constant learning rate.
    Init,
    Refine { progress: f64, lr: f64 },
}

fn view_input(layout: &InputLayout, data: &DataLayout, views: &[&[f64]], size: usize) -> Result<EncoderInput, EncoderError> {
    match data {
        DataLayout::Image { .. } => EncoderInput::images(layout, views, size),
        DataLayout::Vector { .. } => EncoderInput::vectors(layout, views),
    }
}

fn decay(name: &str, wd: f64) -> f64 {
    if exempt_from_decay(name) {
        0.0
    } else {
        wd
    }
}

fn train_step(
    state: &mut RefineState,
    data: &Dataset,
    rows: &[usize],
    cfg: &RefineConfig,
    phase: Phase,
    rng: &mut RngStream,
) -> Result<StepLog, TrainError> {
    let n = rows.len();
    let n_local = cfg.views.n_local;
    let layout = state.encoder.config.layout;
    let views: Vec<Views> = rows.iter().map(|&r| make_views(data.sample(r), &data.layout, &cfg.views, rng)).collect();
    let labels: Vec<u32> = rows.iter().map(|&r| data.labels[r]).collect();
    let labels2: Vec<u32> = labels.iter().chain(&labels).copied().collect();
    let (size, local_size) = match data.layout {
        DataLayout::Image { size, .. } => (size, cfg.views.local_size_for(size)),
        DataLayout::Vector { dim } => (dim, dim),
    };
    let globals: Vec<&[f64]> = (0..2).flat_map(|g| views.iter().map(move |v| v.global[g].as_slice())).collect();
    let g_input = view_input(&layout, &data.layout, &globals, size)?;
    let g_trace = state.encoder.forward(&g_input)?;
    let l_input = if n_local > 0 {
        let locals: Vec<&[f64]> = (0..n_local).flat_map(|l| views.iter().map(move |v| v.local[l].as_slice())).collect();
        Some(view_input(&layout, &data.layout, &locals, local_size)?)
    } else {
        None
    };
    let l_trace = l_input.as_ref().map(|i| state.encoder.forward(i)).transpose()?;

    let depth = state.encoder.depth();
    let mut g_taps: Vec<Option<Matrix>> = vec![None; depth];
    let mut l_taps: Vec<Option<Matrix>> = vec![None; depth];
    let (k, head_lr) = match phase {
        Phase::Init => (1, cfg.init_lr),
        Phase::Refine { lr, .. } => (cfg.queue.top_k, lr),
    };
    let spec = ScheduleSpec { kind: cfg.schedule, head_count: state.heads.len() };
    let total_rows = (2 + n_local) * n;
    let mut log = StepLog {
        step: state.step,
        epoch: state.epoch,
        lr: head_lr,
        losses: Vec::new(),
        weights: Vec::new(),
        nn_swap: Vec::new(),
    };
    for h in 0..state.heads.len() {
        let weight = match phase {
            Phase::Init => 1.0,
            Phase::Refine { progress, .. } => schedule_weight(&spec, h, progress)?,
        };
        let block = state.attach[h];
        let mut x = g_trace.cls_features(block);
        if let Some(t) = &l_trace {
            x = Matrix::vstack(&[&x, &t.cls_features(block)]);
        }
        let out = state.heads[h].forward(&x, Mode::Train)?;
        let proj_g = out.proj.slice_rows(0, 2 * n);
        let queue = &mut state.queues[h];
        let warm_start = queue.filled() < k;
        if warm_start {
            queue.enqueue_batch(&proj_g, Some(&labels2))?;
        }
        let (nn_a, _) = queue.retrieve_nn(&proj_g.slice_rows(0, n), k, rng)?;
        let (nn_b, _) = queue.retrieve_nn(&proj_g.slice_rows(n, 2 * n), k, rng)?;
        log.nn_swap.push(queue.nn_swap_accuracy(&proj_g, &labels2)?);

        // global views: each is aligned with the neighbor of the other one
        let groups: Vec<usize> = (0..2 * n).map(|i| i % n).collect();
        let batch = assemble_batch(
            &out.pred.slice_rows(0, 2 * n),
            &proj_g,
            Matrix::vstack(&[&nn_b, &nn_a]),
            cfg.temperature,
            cfg.swap_negatives,
            &groups,
        )?;
        let global = nna_loss(&batch)?;
        let share = 2.0 * n as f64 / total_rows as f64;
        let mut loss = global.loss * share;
        let mut grad = Matrix::zeros(out.pred.rows(), out.pred.cols());
        for r in 0..2 * n {
            for (g, v) in grad.row_mut(r).iter_mut().zip(global.grad_anchors.row(r)) {
                *g = v * share * weight;
            }
        }
        // local views: aligned with the neighbor of a random global view
        let share = n as f64 / total_rows as f64;
        for l in 0..n_local {
            let pick: Vec<usize> = (0..n).map(|s| rng.below(2) * n + s).collect();
            let nn_g = Matrix::vstack(&[&nn_a, &nn_b]);
            let positives = nn_g.select_rows(&pick);
            let negatives = if cfg.swap_negatives { positives.clone() } else { proj_g.select_rows(&pick) };
            let start = (2 + l) * n;
            let batch = ContrastiveBatch::new(
                out.pred.slice_rows(start, start + n),
                positives,
                negatives,
                cfg.temperature,
                ContrastiveBatch::diagonal_mask(n),
            )?;
            let local = nna_loss(&batch)?;
            loss += local.loss * share;
            for r in 0..n {
                for (g, v) in grad.row_mut(start + r).iter_mut().zip(local.grad_anchors.row(r)) {
                    *g = v * share * weight;
                }
            }
        }
        if !loss.is_finite() {
            return Err(TrainError::NonFiniteLoss { step: state.step, head: h });
        }
        log.losses.push(loss);
        log.weights.push(weight);
        if !warm_start {
            state.queues[h].enqueue_batch(&proj_g, Some(&labels2))?;
        }
        if weight == 0.0 {
            continue;
        }
        let grad_raw = l2_normalize_rows_backward(&out.pred, &out.pred_norms, &grad);
        let zero_proj = Matrix::zeros(out.proj_raw.rows(), out.proj_raw.cols());
        let (head_grads, g_in) = state.heads[h].backward(&out.cache, &grad_raw, &zero_proj)?;
        let wd = cfg.head_weight_decay;
        state.head_opts[h].step(&mut state.heads[h], &head_grads, |name| {
            Some(TensorHyper { lr: head_lr, weight_decay: decay(name, wd) })
        });
        if matches!(phase, Phase::Refine { .. }) {
            let tap = cls_tap_gradient(&g_in.slice_rows(0, 2 * n), g_trace.tokens());
            add_tap(&mut g_taps[block - 1], tap);
            if let Some(t) = &l_trace {
                let tap = cls_tap_gradient(&g_in.slice_rows(2 * n, total_rows), t.tokens());
                add_tap(&mut l_taps[block - 1], tap);
            }
        }
    }

    if let Phase::Refine { lr, .. } = phase {
        if g_taps.iter().any(Option::is_some) {
            let frozen = cfg.freeze_blocks;
            let mut grads = state.encoder.backward(&g_input, &g_trace, &g_taps, frozen)?;
            if let (Some(input), Some(trace)) = (&l_input, &l_trace) {
                let local = state.encoder.backward(input, trace, &l_taps, frozen)?;
                axpy(&mut grads, 1.0, &local);
            }
            let wd = cfg.encoder_weight_decay;
            let decay_rate = cfg.layer_decay;
            state.encoder_opt.step(&mut state.encoder, &grads, |name| {
                let block = EncoderParams::block_of(name);
                if frozen > 0 && block <= frozen {
                    return None;
                }
                let lr = layerwise_lr(lr, decay_rate, block, depth).expect("block index within depth");
                Some(TensorHyper { lr, weight_decay: decay(name, wd) })
            });
        }
        ema_update(&mut state.ema, &state.encoder)?;
    }
    Ok(log)
}

fn add_tap(slot: &mut Option<Matrix>, g: Matrix) {
    match slot {
        Some(t) => t.add_assign(&g),
        None => *slot = Some(g),
    }
}

fn batches(n: usize, batch_size: usize, rng: &mut RngStream) -> Vec<Vec<usize>> {
    let order = rng.permutation(n);
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

fn epoch_summary(epoch: usize, steps: &[StepLog], knn: Option<f64>) -> EpochLog {
    let heads = steps.first().map_or(0, |s| s.losses.len());
    let mean = |f: &dyn Fn(&StepLog) -> f64| steps.iter().map(f).sum::<f64>() / steps.len().max(1) as f64;
    EpochLog {
        epoch,
        mean_losses: (0..heads).map(|h| mean(&|s| s.losses[h])).collect(),
        nn_swap: (0..heads).map(|h| mean(&|s| s.nn_swap[h])).collect(),
        knn,
    }
}

/// k-NN accuracy of final-block features on a fixed stratified half split of
/// an evenly spaced subset of `data`.
pub fn subset_knn(encoder: &EncoderParams, data: &Dataset, rows: usize, cfg: &KnnConfig) -> Result<f64, TrainError> {
    let rows = rows.min(data.len());
    let idx: Vec<usize> = (0..rows).map(|i| i * data.len() / rows).collect();
    let (train, test) = data.subset(&idx).split(0.5, 0);
    let tr = encode_dataset(encoder, &train, Collect::FinalOnly, 256)?.remove(0);
    let te = encode_dataset(encoder, &test, Collect::FinalOnly, 256)?.remove(0);
    let k = cfg.k.min(train.len()).max(1);
    let ds = ProbeDataset::new(tr, train.labels.clone(), te, test.labels.clone())?;
    Ok(knn_probe(&ds, &KnnConfig { k, ..cfg.clone() })?)
}

/// Trains the heads on a frozen encoder with top-1 retrieval, warming the
/// queues. Continues from `state.init_epoch`.
pub fn init_heads_phase(
    state: &mut RefineState,
    data: &Dataset,
    cfg: &RefineConfig,
    rng: &RngStream,
) -> Result<Vec<EpochLog>, TrainError> {
    let mut logs = Vec::new();
    while state.init_epoch < cfg.init_epochs {
        let mut erng = rng.split(0x1_0000 + state.init_epoch as u64);
        let mut steps = Vec::new();
        for rows in batches(data.len(), cfg.batch_size, &mut erng) {
            steps.push(train_step(state, data, &rows, cfg, Phase::Init, &mut erng)?);
        }
        logs.push(epoch_summary(state.init_epoch, &steps, None));
        state.init_epoch += 1;
    }
    Ok(logs)
}

/// Refinement epochs from `state.epoch` to `cfg.epochs`; `on_epoch` runs after
/// every completed epoch (checkpointing).
pub fn refine_epochs(
    state: &mut RefineState,
    data: &Dataset,
    cfg: &RefineConfig,
    rng: &RngStream,
    on_epoch: &mut dyn FnMut(&RefineState, &EpochLog, &[StepLog]) -> Result<(), TrainError>,
) -> Result<RefineLog, TrainError> {
    cfg.validate(state.encoder.depth())?;
    let steps_per_epoch = data.len().div_ceil(cfg.batch_size);
    let total = steps_per_epoch * cfg.epochs;
    let mut log = RefineLog::default();
    while state.epoch < cfg.epochs {
        let mut erng = rng.split(0x2_0000 + state.epoch as u64);
        let mut steps = Vec::new();
        for rows in batches(data.len(), cfg.batch_size, &mut erng) {
            let lr = lr_schedule(state.step, total, steps_per_epoch, cfg);
            let progress = state.step as f64 / total.max(1) as f64;
            let s = train_step(state, data, &rows, cfg, Phase::Refine { progress, lr }, &mut erng)?;
            state.step += 1;
            steps.push(s);
        }
        let knn = if cfg.knn_subset > 0 { Some(subset_knn(&state.encoder, data, cfg.knn_subset, &cfg.knn)?) } else { None };
        let summary = epoch_summary(state.epoch, &steps, knn);
        state.epoch += 1;
        on_epoch(state, &summary, &steps)?;
        log.steps.extend(steps);
        log.epochs.push(summary);
    }
    Ok(log)
}

#[derive(Clone, Debug)]
pub struct RefineOutcome {
    pub state: RefineState,
    pub init_log: Vec<EpochLog>,
    pub log: RefineLog,
}

/// Head initialization followed by refinement.
pub fn refine(
    encoder: EncoderParams,
    ensemble: &EnsembleConfig,
    data: &Dataset,
    cfg: &RefineConfig,
    rng: &RngStream,
) -> Result<RefineOutcome, TrainError> {
    let mut state = RefineState::new(encoder, ensemble, cfg, &rng.split(1))?;
    let init_log = init_heads_phase(&mut state, data, cfg, &rng.split(2))?;
    let log = refine_epochs(&mut state, data, cfg, &rng.split(3), &mut |_, _, _| Ok(()))?;
    Ok(RefineOutcome { state, init_log, log })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_blobs, BlobDatasetConfig};
    use crate::encoder::{BlockKind, EncoderConfig};
    use crate::heads::HeadConfig;

    #[test]
    fn layerwise_examples() {
        assert_eq!(layerwise_lr(4e-4, 0.65, 12, 12).unwrap(), 4e-4);
        assert!((layerwise_lr(4e-4, 0.65, 11, 12).unwrap() - 2.6e-4).abs() < 1e-18);
        assert_eq!(layerwise_lr(4e-4, 1.0, 3, 12).unwrap(), 4e-4);
        assert!((layerwise_lr(1.0, 0.5, 0, 3).unwrap() - 0.125).abs() < 1e-18);
        assert_eq!(layerwise_lr(1.0, 0.5, 4, 3).unwrap_err(), TrainError::BadIndex { index: 4, depth: 3 });
    }

    #[test]
    fn schedule_examples() {
        let cfg = RefineConfig::default();
        assert_eq!(lr_schedule(0, 300, 10, &cfg), 0.0);
        assert_eq!(lr_schedule(40, 300, 10, &cfg), 4e-4);
        assert_eq!(lr_schedule(300, 300, 10, &cfg), 1e-6);
    }

    fn tiny_encoder(depth: usize) -> EncoderParams {
        let cfg = EncoderConfig {
            depth,
            width: 8,
            mlp_hidden: 16,
            block_kind: BlockKind::ResidualMlp,
            layout: InputLayout::Image { size: 8, channels: 1, patch_size: 2 },
        };
        EncoderParams::new(cfg, &mut RngStream::new(0)).unwrap()
    }

    #[test]
    fn ema_matches_scalar_reference() {
        let enc = tiny_encoder(1);
        let mut zero = enc.clone();
        crate::params::zero(&mut zero);
        let mut ones = enc.clone();
        crate::params::assign(&mut ones, &vec![1.0; crate::params::count(&enc)]);
        let mut ema = EmaState::new(&zero, 0.9);
        for _ in 0..3 {
            ema_update(&mut ema, &ones).unwrap();
        }
        let reference = 1.0 - 0.9f64.powi(3);
        assert!(crate::params::flatten(&ema.shadow).iter().all(|v| (v - reference).abs() < 1e-15));
        let mut still = EmaState::new(&zero, 1.0);
        ema_update(&mut still, &ones).unwrap();
        assert_eq!(still.shadow, zero);
        let mut copy = EmaState::new(&zero, 0.0);
        ema_update(&mut copy, &ones).unwrap();
        assert_eq!(copy.shadow, ones);
        assert!(matches!(ema_update(&mut copy, &tiny_encoder(2)), Err(TrainError::ShapeMismatch(_))));
    }

    fn tiny_setup(depth: usize) -> (EncoderParams, EnsembleConfig, Dataset, RefineConfig) {
        let data = generate_blobs(&BlobDatasetConfig {
            n_classes: 2,
            n_per_class: 8,
            image_size: 8,
            ..Default::default()
        })
        .unwrap();
        let enc = tiny_encoder(depth);
        let ensemble = EnsembleConfig::last_third(depth, HeadConfig::with_dims(8, 16, 4, 16));
        let cfg = RefineConfig {
            epochs: 2,
            batch_size: 8,
            warmup_epochs: 1,
            init_epochs: 1,
            queue: QueueConfig { capacity: 64, top_k: 3 },
            views: ViewsConfig { n_local: 2, ..Default::default() },
            ema_momentum: 0.5,
            knn_subset: 16,
            knn: KnnConfig { k: 3, temperature: 0.07 },
            ..Default::default()
        };
        (enc, ensemble, data, cfg)
    }

    #[test]
    fn zero_epochs_leave_encoder_and_ema() {
        let (enc, ens, data, cfg) = tiny_setup(3);
        let cfg = RefineConfig { epochs: 0, ..cfg };
        let out = refine(enc.clone(), &ens, &data, &cfg, &RngStream::new(1)).unwrap();
        assert_eq!(out.state.encoder, enc);
        assert_eq!(out.state.ema.shadow, enc);
    }

    #[test]
    fn init_phase_freezes_encoder_and_fills_queues() {
        let (enc, ens, data, cfg) = tiny_setup(3);
        let mut state = RefineState::new(enc.clone(), &ens, &cfg, &RngStream::new(1)).unwrap();
        init_heads_phase(&mut state, &data, &cfg, &RngStream::new(2)).unwrap();
        assert_eq!(state.encoder, enc);
        for q in &state.queues {
            assert_eq!(q.filled(), (2 * data.len()).min(cfg.queue.capacity));
        }
    }

    #[test]
    fn frozen_blocks_do_not_move() {
        let (enc, ens, data, cfg) = tiny_setup(3);
        let cfg = RefineConfig { freeze_blocks: 2, ..cfg };
        let out = refine(enc.clone(), &ens, &data, &cfg, &RngStream::new(1)).unwrap();
        let after = &out.state.encoder;
        assert_eq!(after.blocks[..2], enc.blocks[..2]);
        assert_eq!((after.cls_token.clone(), after.pos_embed.clone()), (enc.cls_token.clone(), enc.pos_embed.clone()));
        assert_eq!(after.patch_embed, enc.patch_embed);
        assert_ne!(after.blocks[2], enc.blocks[2]);
    }

    #[test]
    fn refine_is_deterministic() {
        let (enc, ens, data, cfg) = tiny_setup(3);
        let a = refine(enc.clone(), &ens, &data, &cfg, &RngStream::new(7)).unwrap();
        let b = refine(enc, &ens, &data, &cfg, &RngStream::new(7)).unwrap();
        assert_eq!(a.log, b.log);
        assert_eq!(a.state, b.state);
        for e in &a.log.epochs {
            assert!(e.nn_swap.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn one_hot_weights_a_single_head() {
        let (enc, _, data, cfg) = tiny_setup(3);
        let ens = EnsembleConfig::at_blocks(vec![1, 2, 3], HeadConfig::with_dims(8, 16, 4, 16));
        let cfg = RefineConfig { schedule: ScheduleKind::OneHot, ..cfg };
        let out = refine(enc, &ens, &data, &cfg, &RngStream::new(1)).unwrap();
        for s in &out.log.steps {
            assert_eq!(s.weights.iter().filter(|&&w| w != 0.0).count(), 1);
        }
    }

    #[test]
    fn resuming_matches_uninterrupted_run() {
        let (enc, ens, data, cfg) = tiny_setup(3);
        let full = refine(enc.clone(), &ens, &data, &cfg, &RngStream::new(4)).unwrap();
        let rng = RngStream::new(4);
        let mut state = RefineState::new(enc, &ens, &cfg, &rng.split(1)).unwrap();
        init_heads_phase(&mut state, &data, &cfg, &rng.split(2)).unwrap();
        let half = RefineConfig { epochs: 1, ..cfg.clone() };
        // stop after the first epoch, then continue with the full budget
        let mut saved = None;
        refine_epochs(&mut state, &data, &cfg, &rng.split(3), &mut |s, _, _| {
            if saved.is_none() {
                saved = Some(s.clone());
            }
            Ok(())
        })
        .unwrap();
        let mut resumed = saved.unwrap();
        assert_eq!(resumed.epoch, half.epochs);
        refine_epochs(&mut resumed, &data, &cfg, &rng.split(3), &mut |_, _, _| Ok(())).unwrap();
        assert_eq!(resumed, full.state);
    }

    #[test]
    fn invalid_configs() {
        let cfg = RefineConfig::default();
        assert!(RefineConfig { layer_decay: 0.0, ..cfg.clone() }.validate(4).is_err());
        assert!(RefineConfig { freeze_blocks: 4, ..cfg.clone() }.validate(4).is_err());
        assert!(RefineConfig { ema_momentum: 1.5, ..cfg.clone() }.validate(4).is_err());
        assert!(cfg.validate(4).is_ok());
    }
}
