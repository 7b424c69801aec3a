use serde::{Deserialize, Serialize};

use super::{Block, BlockCache, BlockKind, EncoderError, EncoderInput, EncoderParams};
use crate::data::Dataset;
use crate::layers::Linear;
use crate::numerics::{Matrix, RngStream};
use crate::optim::{exempt_from_decay, warmup_cosine, AdamW, TensorHyper};
use crate::params::{count, Parameters};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MimConfig {
    pub mask_ratio: f64,
    pub decoder_depth: usize,
    /// Decoder width; 0 means half the encoder width.
    pub decoder_width: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_epochs: usize,
    /// Training epochs for each decoder of the per-block probe.
    pub probe_epochs: usize,
}

impl Default for MimConfig {
    fn default() -> Self {
        Self {
            mask_ratio: 0.75,
            decoder_depth: 2,
            decoder_width: 0,
            epochs: 30,
            batch_size: 64,
            lr: 1e-3,
            weight_decay: 0.05,
            warmup_epochs: 2,
            probe_epochs: 10,
        }
    }
}

impl MimConfig {
    pub fn validate(&self) -> Result<(), EncoderError> {
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return Err(EncoderError::BadConfig(format!("mask_ratio {} outside (0, 1)", self.mask_ratio)));
        }
        if self.batch_size == 0 {
            return Err(EncoderError::BadConfig("batch_size must be >= 1".into()));
        }
        Ok(())
    }

    pub fn decoder_width_for(&self, encoder_width: usize) -> usize {
        if self.decoder_width == 0 {
            (encoder_width / 2).max(1)
        } else {
            self.decoder_width
        }
    }

    /// Visible token count for `positions` patch tokens.
    pub fn visible_count(&self, positions: usize) -> Result<usize, EncoderError> {
        let visible = ((positions as f64) * (1.0 - self.mask_ratio)).round() as usize;
        if visible < 1 || visible >= positions {
            return Err(EncoderError::DegenerateMask { visible, masked: positions.saturating_sub(visible) });
        }
        Ok(visible)
    }
}

/// Lightweight reconstruction decoder. Sees the encoded visible tokens plus a
/// shared mask token at every hidden position.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Decoder {
    pub embed: Linear,
    pub mask_token: Vec<f64>,
    /// Row 0 belongs to the class-summary token.
    pub pos_embed: Matrix,
    pub blocks: Vec<Block>,
    pub head: Linear,
}

pub struct DecoderCache {
    enc_tokens: Matrix,
    visible: Vec<Vec<usize>>,
    blocks: Vec<BlockCache>,
    last: Matrix,
}

impl Decoder {
    pub fn new(
        mim: &MimConfig,
        encoder_width: usize,
        kind: BlockKind,
        positions: usize,
        token_dim: usize,
        rng: &mut RngStream,
    ) -> Self {
        let w = mim.decoder_width_for(encoder_width);
        Self {
            embed: Linear::init(encoder_width, w, rng),
            mask_token: (0..w).map(|_| 0.02 * rng.normal()).collect(),
            pos_embed: Matrix::random_normal(positions + 1, w, 0.02, rng),
            blocks: (0..mim.decoder_depth).map(|_| Block::new(kind, w, 2 * w, rng)).collect(),
            head: Linear::init(w, token_dim, rng),
        }
    }

    pub fn positions(&self) -> usize {
        self.pos_embed.rows() - 1
    }

    /// Predicts every patch of every sample from encoder states of the
    /// class-summary token followed by the visible tokens (in `visible` order).
    pub fn forward(&self, enc_tokens: &Matrix, visible: &[Vec<usize>]) -> (Matrix, DecoderCache) {
        let samples = visible.len();
        let v = visible.first().map_or(0, Vec::len);
        let full = self.positions() + 1;
        let e = self.embed.forward(enc_tokens);
        let w = e.cols();
        let mut x = Matrix::zeros(samples * full, w);
        for (s, vis) in visible.iter().enumerate() {
            for p in 0..self.positions() {
                x.row_mut(s * full + 1 + p).copy_from_slice(&self.mask_token);
            }
            x.row_mut(s * full).copy_from_slice(e.row(s * (v + 1)));
            for (j, &p) in vis.iter().enumerate() {
                x.row_mut(s * full + 1 + p).copy_from_slice(e.row(s * (v + 1) + 1 + j));
            }
            for t in 0..full {
                let pos = self.pos_embed.row(t).to_vec();
                for (a, b) in x.row_mut(s * full + t).iter_mut().zip(pos) {
                    *a += b;
                }
            }
        }
        let mut caches = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (y, c) = b.forward(&x, full);
            caches.push(c);
            x = y;
        }
        let pred = self.head.forward(&x);
        (pred, DecoderCache { enc_tokens: enc_tokens.clone(), visible: visible.to_vec(), blocks: caches, last: x })
    }

    /// Returns parameter gradients and the gradient on the encoder states.
    pub fn backward(&self, cache: &DecoderCache, grad_pred: &Matrix) -> (Decoder, Matrix) {
        let mut grads = self.clone();
        crate::params::zero(&mut grads);
        let mut g = self.head.backward(&cache.last, grad_pred, &mut grads.head);
        for (b, (blk, c)) in self.blocks.iter().zip(&cache.blocks).enumerate().rev() {
            g = blk.backward(c, &g, &mut grads.blocks[b]);
        }
        let full = self.positions() + 1;
        let v = cache.visible.first().map_or(0, Vec::len);
        let mut g_e = Matrix::zeros(cache.enc_tokens.rows(), g.cols());
        for (s, vis) in cache.visible.iter().enumerate() {
            for t in 0..full {
                for (a, b) in grads.pos_embed.row_mut(t).iter_mut().zip(g.row(s * full + t)) {
                    *a += b;
                }
            }
            g_e.row_mut(s * (v + 1)).copy_from_slice(g.row(s * full));
            let mut is_visible = vec![false; self.positions()];
            for (j, &p) in vis.iter().enumerate() {
                is_visible[p] = true;
                g_e.row_mut(s * (v + 1) + 1 + j).copy_from_slice(g.row(s * full + 1 + p));
            }
            for (p, vis) in is_visible.iter().enumerate() {
                if !vis {
                    for (a, b) in grads.mask_token.iter_mut().zip(g.row(s * full + 1 + p)) {
                        *a += b;
                    }
                }
            }
        }
        let g_enc = self.embed.backward(&cache.enc_tokens, &g_e, &mut grads.embed);
        (grads, g_enc)
    }
}

impl Parameters for Decoder {
    fn visit(&self, f: &mut dyn FnMut(&str, &[f64])) {
        self.embed.visit("embed", f);
        f("mask_token", &self.mask_token);
        f("pos_embed", self.pos_embed.as_slice());
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&format!("blocks.{i}"), f);
        }
        self.head.visit("head", f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.embed.visit_mut("embed", f);
        f("mask_token", &mut self.mask_token);
        f("pos_embed", self.pos_embed.as_mut_slice());
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&format!("blocks.{i}"), f);
        }
        self.head.visit_mut("head", f);
    }
}

/// Random split of `positions` into sorted visible and masked sets.
pub fn mask_positions(positions: usize, visible: usize, rng: &mut RngStream) -> (Vec<usize>, Vec<usize>) {
    let perm = rng.permutation(positions);
    let mut vis = perm[..visible].to_vec();
    let mut hid = perm[visible..].to_vec();
    vis.sort_unstable();
    hid.sort_unstable();
    (vis, hid)
}

/// Mean squared error over masked patches and its gradient on `pred`.
fn masked_mse(pred: &Matrix, targets: &Matrix, masked: &[Vec<usize>], positions: usize) -> (f64, Matrix) {
    let full = positions + 1;
    let d = targets.cols();
    let total: usize = masked.iter().map(Vec::len).sum::<usize>() * d;
    let mut grad = Matrix::zeros(pred.rows(), pred.cols());
    let mut loss = 0.0;
    for (s, hid) in masked.iter().enumerate() {
        for &p in hid {
            let pr = pred.row(s * full + 1 + p);
            let tr = targets.row(s * positions + p);
            let gr = grad.row_mut(s * full + 1 + p);
            for c in 0..d {
                let diff = pr[c] - tr[c];
                loss += diff * diff;
                gr[c] = 2.0 * diff / total as f64;
            }
        }
    }
    (loss / total as f64, grad)
}

fn hyper(lr: f64, wd: f64) -> impl Fn(&str) -> Option<TensorHyper> {
    move |name: &str| Some(TensorHyper { lr, weight_decay: if exempt_from_decay(name) { 0.0 } else { wd } })
}

#[derive(Clone, Debug)]
pub struct MimOutcome {
    pub encoder: EncoderParams,
    pub decoder: Decoder,
    /// Mean masked-reconstruction loss per epoch.
    pub loss_curve: Vec<f64>,
}

/// Masked-reconstruction pre-training of a freshly initialized encoder.
pub fn mim_pretrain(
    encoder: EncoderParams,
    mim: &MimConfig,
    data: &Dataset,
    rng: &mut RngStream,
) -> Result<MimOutcome, EncoderError> {
    mim.validate()?;
    if data.is_empty() {
        return Err(EncoderError::BadConfig("empty dataset".into()));
    }
    let layout = encoder.config.layout;
    let positions = layout.positions();
    let visible = mim.visible_count(positions)?;
    let mut init_rng = rng.split(0x51);
    let mut decoder =
        Decoder::new(mim, encoder.width(), encoder.config.block_kind, positions, layout.token_dim(), &mut init_rng);
    if count(&decoder) >= count(&encoder) {
        return Err(EncoderError::BadConfig(format!(
            "decoder ({} params) must be smaller than the encoder ({} params)",
            count(&decoder),
            count(&encoder)
        )));
    }
    let mut encoder = encoder;
    let mut enc_opt = AdamW::new(0.9, 0.95, 1e-8);
    let mut dec_opt = AdamW::new(0.9, 0.95, 1e-8);
    let steps_per_epoch = data.len().div_ceil(mim.batch_size);
    let total = steps_per_epoch * mim.epochs;
    let warmup = steps_per_epoch * mim.warmup_epochs;
    let mut loss_curve = Vec::with_capacity(mim.epochs);
    let mut step = 0;
    for epoch in 0..mim.epochs {
        let order = rng.permutation(data.len());
        let mut epoch_loss = 0.0;
        for rows in order.chunks(mim.batch_size) {
            let input = EncoderInput::from_dataset(&layout, data, rows)?;
            let (vis, hid): (Vec<_>, Vec<_>) =
                (0..rows.len()).map(|_| mask_positions(positions, visible, rng)).unzip();
            let vis_input = input.select_tokens(&vis)?;
            let trace = encoder.forward(&vis_input)?;
            let enc_out = trace.outputs.last().expect("depth >= 1");
            let (pred, cache) = decoder.forward(enc_out, &vis);
            let (loss, g_pred) = masked_mse(&pred, input.patches(), &hid, positions);
            if !loss.is_finite() {
                return Err(EncoderError::NonFiniteLoss { epoch });
            }
            let (dec_grads, g_enc) = decoder.backward(&cache, &g_pred);
            let mut taps = vec![None; encoder.depth()];
            taps[encoder.depth() - 1] = Some(g_enc);
            let enc_grads = encoder.backward(&vis_input, &trace, &taps, 0)?;
            let lr = warmup_cosine(step, total, warmup, mim.lr, 0.0);
            enc_opt.step(&mut encoder, &enc_grads, hyper(lr, mim.weight_decay));
            dec_opt.step(&mut decoder, &dec_grads, hyper(lr, mim.weight_decay));
            epoch_loss += loss * rows.len() as f64;
            step += 1;
        }
        loss_curve.push(epoch_loss / data.len() as f64);
    }
    Ok(MimOutcome { encoder, decoder, loss_curve })
}

/// Trains one fresh decoder per listed block (1-based) on the frozen
/// encoder's token states after that block, then reports each decoder's
/// masked-reconstruction loss on a fixed evaluation masking of `data`.
pub fn reconstruction_probe_at(
    encoder: &EncoderParams,
    taps: &[usize],
    mim: &MimConfig,
    data: &Dataset,
    rng: &RngStream,
) -> Result<Vec<f64>, EncoderError> {
    mim.validate()?;
    if taps.iter().any(|&b| b == 0 || b > encoder.depth()) {
        return Err(EncoderError::BadConfig(format!("taps must lie in 1..={}", encoder.depth())));
    }
    let layout = encoder.config.layout;
    let positions = layout.positions();
    let visible = mim.visible_count(positions)?;
    let mut decoders: Vec<Decoder> = taps
        .iter()
        .map(|_| {
            // identical initialization per tap, so losses differ only by features
            let mut r = rng.split(0x1000);
            Decoder::new(mim, encoder.width(), encoder.config.block_kind, positions, layout.token_dim(), &mut r)
        })
        .collect();
    let mut opts: Vec<AdamW> = taps.iter().map(|_| AdamW::new(0.9, 0.95, 1e-8)).collect();
    let mut train_rng = rng.split(0x2000);
    let steps_per_epoch = data.len().div_ceil(mim.batch_size);
    let total = steps_per_epoch * mim.probe_epochs;
    let warmup = (steps_per_epoch * mim.warmup_epochs).min(total / 2);
    let mut step = 0;
    for _ in 0..mim.probe_epochs {
        let order = train_rng.permutation(data.len());
        for rows in order.chunks(mim.batch_size) {
            let input = EncoderInput::from_dataset(&layout, data, rows)?;
            let (vis, hid): (Vec<_>, Vec<_>) =
                (0..rows.len()).map(|_| mask_positions(positions, visible, &mut train_rng)).unzip();
            let vis_input = input.select_tokens(&vis)?;
            let trace = encoder.forward(&vis_input)?;
            let lr = warmup_cosine(step, total, warmup, mim.lr, 0.0);
            for ((dec, opt), &b) in decoders.iter_mut().zip(&mut opts).zip(taps) {
                let (pred, cache) = dec.forward(&trace.outputs[b - 1], &vis);
                let (_, g_pred) = masked_mse(&pred, input.patches(), &hid, positions);
                let (grads, _) = dec.backward(&cache, &g_pred);
                opt.step(dec, &grads, hyper(lr, mim.weight_decay));
            }
            step += 1;
        }
    }
    let mut eval_rng = rng.split(0x3000);
    let mut sums = vec![0.0; taps.len()];
    let all: Vec<usize> = (0..data.len()).collect();
    for rows in all.chunks(mim.batch_size) {
        let input = EncoderInput::from_dataset(&layout, data, rows)?;
        let (vis, hid): (Vec<_>, Vec<_>) =
            (0..rows.len()).map(|_| mask_positions(positions, visible, &mut eval_rng)).unzip();
        let vis_input = input.select_tokens(&vis)?;
        let trace = encoder.forward(&vis_input)?;
        for ((dec, &b), sum) in decoders.iter().zip(taps).zip(&mut sums) {
            let (pred, _) = dec.forward(&trace.outputs[b - 1], &vis);
            let (loss, _) = masked_mse(&pred, input.patches(), &hid, positions);
            *sum += loss * rows.len() as f64;
        }
    }
    Ok(sums.into_iter().map(|s| s / data.len() as f64).collect())
}

/// One reconstruction loss per encoder block.
pub fn per_block_reconstruction_probe(
    encoder: &EncoderParams,
    mim: &MimConfig,
    data: &Dataset,
    rng: &RngStream,
) -> Result<Vec<f64>, EncoderError> {
    let taps: Vec<usize> = (1..=encoder.depth()).collect();
    reconstruction_probe_at(encoder, &taps, mim, data, rng)
}

/// Consecutive differences scaled by the largest absolute difference.
pub fn relative_improvement(metric_per_block: &[f64]) -> Result<Vec<f64>, EncoderError> {
    if metric_per_block.len() < 2 {
        return Err(EncoderError::TooShort(metric_per_block.len()));
    }
    let deltas: Vec<f64> = metric_per_block.windows(2).map(|w| w[1] - w[0]).collect();
    let max = deltas.iter().fold(0.0f64, |m, d| m.max(d.abs()));
    if max == 0.0 {
        return Ok(vec![0.0; deltas.len()]);
    }
    Ok(deltas.iter().map(|d| d / max).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_blobs, BlobDatasetConfig, DataLayout};
    use crate::encoder::{EncoderConfig, InputLayout};
    use crate::numerics::{dot, finite_diff_grad, gradient_mismatch};
    use crate::params::{assign, flatten};
    use proptest::prelude::*;

    #[test]
    fn relative_improvement_examples() {
        assert_eq!(relative_improvement(&[1.0, 2.0, 3.0, 4.0]).unwrap(), vec![1.0, 1.0, 1.0]);
        assert_eq!(relative_improvement(&[0.0, 5.0, 5.0]).unwrap(), vec![1.0, 0.0]);
        assert_eq!(relative_improvement(&[10.0, 12.0, 11.0, 15.0]).unwrap(), vec![0.5, -0.25, 1.0]);
        assert_eq!(relative_improvement(&[3.0, 3.0, 3.0]).unwrap(), vec![0.0, 0.0]);
        assert_eq!(relative_improvement(&[1.0]).unwrap_err(), EncoderError::TooShort(1));
    }

    proptest! {
        #[test]
        fn relative_improvement_peaks_at_one(v in proptest::collection::vec(-100.0f64..100.0, 2..12)) {
            prop_assume!(v.windows(2).any(|w| w[0] != w[1]));
            let out = relative_improvement(&v).unwrap();
            let max = out.iter().fold(0.0f64, |m, x| m.max(x.abs()));
            prop_assert_eq!(max, 1.0);
        }
    }

    #[test]
    fn degenerate_masks_are_rejected() {
        let cfg = MimConfig { mask_ratio: 0.99, ..Default::default() };
        assert!(matches!(cfg.visible_count(16), Err(EncoderError::DegenerateMask { .. })));
        let cfg = MimConfig { mask_ratio: 0.01, ..Default::default() };
        assert!(matches!(cfg.visible_count(16), Err(EncoderError::DegenerateMask { .. })));
        assert_eq!(MimConfig::default().visible_count(16).unwrap(), 4);
    }

    #[test]
    fn decoder_gradients_match_finite_differences() {
        let mut rng = RngStream::new(4);
        let mim = MimConfig { decoder_width: 6, decoder_depth: 1, ..Default::default() };
        let dec = Decoder::new(&mim, 8, BlockKind::ResidualMlp, 4, 3, &mut rng);
        let vis = vec![vec![0, 2], vec![1, 3]];
        let enc = Matrix::random_normal(2 * 3, 8, 1.0, &mut rng);
        let w = Matrix::random_normal(2 * 5, 3, 1.0, &mut rng);
        let (_, cache) = dec.forward(&enc, &vis);
        let (grads, g_enc) = dec.backward(&cache, &w);
        let numeric = finite_diff_grad(
            |p| {
                let mut d = dec.clone();
                assign(&mut d, p);
                dot(d.forward(&enc, &vis).0.as_slice(), w.as_slice())
            },
            &flatten(&dec),
            1e-6,
        )
        .unwrap();
        assert!(gradient_mismatch(&flatten(&grads), &numeric, 1e-5, 1e-7) <= 1.0);
        let numeric_enc = finite_diff_grad(
            |p| dot(dec.forward(&Matrix::from_vec(6, 8, p.to_vec()).unwrap(), &vis).0.as_slice(), w.as_slice()),
            enc.as_slice(),
            1e-6,
        )
        .unwrap();
        assert!(gradient_mismatch(g_enc.as_slice(), &numeric_enc, 1e-5, 1e-7) <= 1.0);
    }

    fn small_setup(depth: usize) -> (EncoderParams, Dataset) {
        let data = generate_blobs(&BlobDatasetConfig {
            n_classes: 2,
            n_per_class: 8,
            image_size: 8,
            ..Default::default()
        })
        .unwrap();
        let DataLayout::Image { size, channels } = data.layout else { unreachable!() };
        let cfg = EncoderConfig {
            depth,
            width: 16,
            mlp_hidden: 32,
            block_kind: BlockKind::ResidualMlp,
            layout: InputLayout::Image { size, channels, patch_size: 2 },
        };
        (EncoderParams::new(cfg, &mut RngStream::new(1)).unwrap(), data)
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let (enc, data) = small_setup(3);
        let mim = MimConfig { epochs: 0, decoder_depth: 1, ..Default::default() };
        let out = mim_pretrain(enc.clone(), &mim, &data, &mut RngStream::new(3)).unwrap();
        assert_eq!(out.encoder, enc);
        assert!(out.loss_curve.is_empty());
    }

    #[test]
    fn pretraining_is_reproducible() {
        let (enc, data) = small_setup(3);
        let mim = MimConfig { epochs: 2, decoder_depth: 1, batch_size: 8, ..Default::default() };
        let a = mim_pretrain(enc.clone(), &mim, &data, &mut RngStream::new(3)).unwrap();
        let b = mim_pretrain(enc, &mim, &data, &mut RngStream::new(3)).unwrap();
        assert_eq!(a.loss_curve, b.loss_curve);
        assert_eq!(a.encoder, b.encoder);
    }

    #[test]
    fn identity_encoder_probe_is_flat() {
        let (mut enc, data) = small_setup(3);
        enc.zero_residuals();
        let mim = MimConfig { probe_epochs: 2, decoder_depth: 1, batch_size: 8, ..Default::default() };
        let rng = RngStream::new(9);
        let losses = per_block_reconstruction_probe(&enc, &mim, &data, &rng).unwrap();
        assert_eq!(losses.len(), 3);
        assert!(losses.iter().all(|&l| l == losses[0]), "{losses:?}");
    }

    #[test]
    fn single_block_probe_is_frozen_training() {
        let (enc, data) = small_setup(1);
        let mim = MimConfig { probe_epochs: 2, decoder_depth: 1, batch_size: 8, ..Default::default() };
        let rng = RngStream::new(9);
        let per_block = per_block_reconstruction_probe(&enc, &mim, &data, &rng).unwrap();
        let frozen = reconstruction_probe_at(&enc, &[1], &mim, &data, &rng).unwrap();
        assert_eq!(per_block, frozen);
    }
}
