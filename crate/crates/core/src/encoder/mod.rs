//! Depth-B residual encoder with a class-summary token and per-block taps,
//! plus masked-reconstruction pre-training and reconstruction probes.

mod block;
mod mim;

pub use block::{Attention, Block, BlockCache, BlockKind};
pub use mim::{
    mask_positions, mim_pretrain, per_block_reconstruction_probe, reconstruction_probe_at, relative_improvement,
    Decoder, MimConfig, MimOutcome,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{patchify, DataLayout, Dataset};
use crate::layers::Linear;
use crate::numerics::{Matrix, RngStream};
use crate::params::Parameters;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EncoderError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid config: {0}")]
    BadConfig(String),
    #[error("mask leaves {visible} visible and {masked} masked tokens")]
    DegenerateMask { visible: usize, masked: usize },
    #[error("need at least two values, got {0}")]
    TooShort(usize),
    #[error("non-finite loss at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InputLayout {
    Image { size: usize, channels: usize, patch_size: usize },
    Tokens { seq_len: usize, token_dim: usize },
}

impl InputLayout {
    /// Number of patch tokens in a full-size input.
    pub fn positions(&self) -> usize {
        match *self {
            InputLayout::Image { size, patch_size, .. } => (size / patch_size).pow(2),
            InputLayout::Tokens { seq_len, .. } => seq_len,
        }
    }

    pub fn token_dim(&self) -> usize {
        match *self {
            InputLayout::Image { channels, patch_size, .. } => patch_size * patch_size * channels,
            InputLayout::Tokens { token_dim, .. } => token_dim,
        }
    }

    pub fn grid(&self) -> Option<usize> {
        match *self {
            InputLayout::Image { size, patch_size, .. } => Some(size / patch_size),
            InputLayout::Tokens { .. } => None,
        }
    }

    /// Layout that matches a dataset.
    pub fn for_data(layout: &DataLayout, patch_size: usize, token_dim: usize) -> InputLayout {
        match *layout {
            DataLayout::Image { size, channels } => InputLayout::Image { size, channels, patch_size },
            DataLayout::Vector { dim } => InputLayout::Tokens { seq_len: dim / token_dim, token_dim },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub depth: usize,
    pub width: usize,
    pub mlp_hidden: usize,
    pub block_kind: BlockKind,
    pub layout: InputLayout,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            depth: 12,
            width: 64,
            mlp_hidden: 128,
            block_kind: BlockKind::ResidualMlp,
            layout: InputLayout::Image { size: 16, channels: 1, patch_size: 4 },
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<(), EncoderError> {
        if self.depth < 1 {
            return Err(EncoderError::BadConfig("depth must be >= 1".into()));
        }
        if self.width < 4 || self.mlp_hidden == 0 {
            return Err(EncoderError::BadConfig("width must be >= 4 and mlp_hidden >= 1".into()));
        }
        match self.layout {
            InputLayout::Image { size, channels, patch_size } => {
                if patch_size == 0 || size % patch_size != 0 || channels == 0 {
                    return Err(EncoderError::BadConfig("image size must be a multiple of patch_size".into()));
                }
            }
            InputLayout::Tokens { seq_len, token_dim } => {
                if seq_len == 0 || token_dim == 0 {
                    return Err(EncoderError::BadConfig("seq_len and token_dim must be >= 1".into()));
                }
            }
        }
        Ok(())
    }

    /// The three-regime block analysis needs early, middle and late blocks.
    pub fn validate_for_analysis(&self) -> Result<(), EncoderError> {
        self.validate()?;
        if self.depth < 3 {
            return Err(EncoderError::BadConfig("block analysis needs depth >= 3".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    pub config: EncoderConfig,
    pub patch_embed: Linear,
    pub cls_token: Vec<f64>,
    pub pos_embed: Matrix,
    pub blocks: Vec<Block>,
}

/// Positional table used by an input: the full grid, or the full grid
/// average-pooled by `factor` for smaller views.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PosGrid {
    Base,
    Pooled { factor: usize },
}

/// A batch of samples, each a sequence of patch tokens with positions.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderInput {
    samples: usize,
    patches: Matrix,
    positions: Vec<usize>,
    grid: PosGrid,
}

impl EncoderInput {
    pub fn new(samples: usize, patches: Matrix, positions: Vec<usize>, grid: PosGrid) -> Result<Self, EncoderError> {
        if samples == 0 || patches.rows() % samples != 0 || positions.len() != patches.rows() {
            return Err(EncoderError::ShapeMismatch(format!(
                "{} patch rows, {} positions for {samples} samples",
                patches.rows(),
                positions.len()
            )));
        }
        Ok(Self { samples, patches, positions, grid })
    }

    /// Full-size or downscaled square images.
    pub fn images(layout: &InputLayout, images: &[&[f64]], size: usize) -> Result<Self, EncoderError> {
        let InputLayout::Image { size: base, channels, patch_size } = *layout else {
            return Err(EncoderError::ShapeMismatch("image input for a token encoder".into()));
        };
        if size % patch_size != 0 {
            return Err(EncoderError::ShapeMismatch(format!("view size {size} not a multiple of {patch_size}")));
        }
        let grid = size / patch_size;
        let base_grid = base / patch_size;
        if grid == 0 || base_grid % grid != 0 {
            return Err(EncoderError::ShapeMismatch(format!("grid {grid} does not divide base grid {base_grid}")));
        }
        let pos = if grid == base_grid { PosGrid::Base } else { PosGrid::Pooled { factor: base_grid / grid } };
        let per = grid * grid;
        let mut patches = Matrix::zeros(images.len() * per, patch_size * patch_size * channels);
        for (s, img) in images.iter().enumerate() {
            if img.len() != size * size * channels {
                return Err(EncoderError::ShapeMismatch(format!("image {s} has {} values", img.len())));
            }
            let p = patchify(img, size, channels, patch_size);
            patches.as_mut_slice()[s * per * p.cols()..(s + 1) * per * p.cols()].copy_from_slice(p.as_slice());
        }
        let positions = (0..images.len()).flat_map(|_| 0..per).collect();
        Self::new(images.len(), patches, positions, pos)
    }

    /// Flat vectors cut into `seq_len` tokens.
    pub fn vectors(layout: &InputLayout, vectors: &[&[f64]]) -> Result<Self, EncoderError> {
        let InputLayout::Tokens { seq_len, token_dim } = *layout else {
            return Err(EncoderError::ShapeMismatch("vector input for an image encoder".into()));
        };
        let mut data = Vec::with_capacity(vectors.len() * seq_len * token_dim);
        for (s, v) in vectors.iter().enumerate() {
            if v.len() != seq_len * token_dim {
                return Err(EncoderError::ShapeMismatch(format!("vector {s} has {} values", v.len())));
            }
            data.extend_from_slice(v);
        }
        let patches = Matrix::from_vec(vectors.len() * seq_len, token_dim, data).expect("sized");
        let positions = (0..vectors.len()).flat_map(|_| 0..seq_len).collect();
        Self::new(vectors.len(), patches, positions, PosGrid::Base)
    }

    /// Full-size inputs for the listed dataset rows.
    pub fn from_dataset(layout: &InputLayout, data: &Dataset, rows: &[usize]) -> Result<Self, EncoderError> {
        let samples: Vec<&[f64]> = rows.iter().map(|&i| data.sample(i)).collect();
        match (*layout, data.layout) {
            (InputLayout::Image { size, .. }, DataLayout::Image { .. }) => Self::images(layout, &samples, size),
            (InputLayout::Tokens { .. }, DataLayout::Vector { .. }) => Self::vectors(layout, &samples),
            _ => Err(EncoderError::ShapeMismatch("dataset layout does not match encoder layout".into())),
        }
    }

    pub fn samples(&self) -> usize {
        self.samples
    }

    pub fn tokens_per_sample(&self) -> usize {
        self.patches.rows() / self.samples
    }

    pub fn patches(&self) -> &Matrix {
        &self.patches
    }

    pub fn positions(&self) -> &[usize] {
        &self.positions
    }

    /// Keeps only the listed token slots of every sample (same count each).
    pub fn select_tokens(&self, keep: &[Vec<usize>]) -> Result<Self, EncoderError> {
        let per = self.tokens_per_sample();
        let v = keep.first().map_or(0, Vec::len);
        let mut rows = Vec::with_capacity(self.samples * v);
        for (s, k) in keep.iter().enumerate() {
            if k.len() != v || k.iter().any(|&j| j >= per) {
                return Err(EncoderError::ShapeMismatch("ragged or out-of-range token selection".into()));
            }
            rows.extend(k.iter().map(|&j| s * per + j));
        }
        let positions = rows.iter().map(|&r| self.positions[r]).collect();
        Self::new(self.samples, self.patches.select_rows(&rows), positions, self.grid)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Collect {
    FinalOnly,
    PerBlock,
}

/// Everything the backward pass needs from a forward pass.
pub struct EncoderTrace {
    /// Full token states after each block.
    pub outputs: Vec<Matrix>,
    caches: Vec<BlockCache>,
    samples: usize,
    tokens: usize,
}

impl EncoderTrace {
    pub fn samples(&self) -> usize {
        self.samples
    }

    /// Tokens per sample including the class-summary token.
    pub fn tokens(&self) -> usize {
        self.tokens
    }

    /// Class-summary rows after block `block` (1-based).
    pub fn cls_features(&self, block: usize) -> Matrix {
        cls_rows(&self.outputs[block - 1], self.samples, self.tokens)
    }
}

fn cls_rows(states: &Matrix, samples: usize, tokens: usize) -> Matrix {
    let rows: Vec<usize> = (0..samples).map(|s| s * tokens).collect();
    states.select_rows(&rows)
}

/// Full-token gradient that is zero except on class-summary rows.
pub fn cls_tap_gradient(grad_cls: &Matrix, tokens: usize) -> Matrix {
    let mut g = Matrix::zeros(grad_cls.rows() * tokens, grad_cls.cols());
    for s in 0..grad_cls.rows() {
        g.row_mut(s * tokens).copy_from_slice(grad_cls.row(s));
    }
    g
}

impl EncoderParams {
    pub fn new(config: EncoderConfig, rng: &mut RngStream) -> Result<Self, EncoderError> {
        config.validate()?;
        let d = config.width;
        let patch_embed = Linear::init(config.layout.token_dim(), d, rng);
        let cls_token = (0..d).map(|_| 0.02 * rng.normal()).collect();
        let pos_embed = Matrix::random_normal(config.layout.positions(), d, 0.02, rng);
        let blocks = (0..config.depth).map(|_| Block::new(config.block_kind, d, config.mlp_hidden, rng)).collect();
        Ok(Self { config, patch_embed, cls_token, pos_embed, blocks })
    }

    pub fn depth(&self) -> usize {
        self.blocks.len()
    }

    pub fn width(&self) -> usize {
        self.config.width
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        crate::params::zero(&mut z);
        z
    }

    fn pos_table(&self, grid: PosGrid) -> Matrix {
        match grid {
            PosGrid::Base => self.pos_embed.clone(),
            PosGrid::Pooled { factor } => {
                let base = self.config.layout.grid().expect("pooled positions need an image layout");
                let g = base / factor;
                let mut out = Matrix::zeros(g * g, self.width());
                let w = 1.0 / (factor * factor) as f64;
                for y in 0..base {
                    for x in 0..base {
                        let dst = (y / factor) * g + x / factor;
                        let src = self.pos_embed.row(y * base + x).to_vec();
                        for (o, s) in out.row_mut(dst).iter_mut().zip(src) {
                            *o += w * s;
                        }
                    }
                }
                out
            }
        }
    }

    fn pos_table_backward(&self, grid: PosGrid, g_table: &Matrix, grads: &mut Matrix) {
        match grid {
            PosGrid::Base => grads.add_assign(g_table),
            PosGrid::Pooled { factor } => {
                let base = self.config.layout.grid().expect("image layout");
                let g = base / factor;
                let w = 1.0 / (factor * factor) as f64;
                for y in 0..base {
                    for x in 0..base {
                        let src = g_table.row((y / factor) * g + x / factor).to_vec();
                        for (o, s) in grads.row_mut(y * base + x).iter_mut().zip(src) {
                            *o += w * s;
                        }
                    }
                }
            }
        }
    }

    fn embed(&self, input: &EncoderInput) -> Result<Matrix, EncoderError> {
        if input.patches.cols() != self.patch_embed.in_dim() {
            return Err(EncoderError::ShapeMismatch(format!(
                "tokens have {} features, encoder expects {}",
                input.patches.cols(),
                self.patch_embed.in_dim()
            )));
        }
        let table = self.pos_table(input.grid);
        if let Some(&p) = input.positions.iter().find(|&&p| p >= table.rows()) {
            return Err(EncoderError::ShapeMismatch(format!("position {p} outside table of {}", table.rows())));
        }
        let mut emb = self.patch_embed.forward(&input.patches);
        for (r, &p) in input.positions.iter().enumerate() {
            for (e, v) in emb.row_mut(r).iter_mut().zip(table.row(p)) {
                *e += v;
            }
        }
        let per = input.tokens_per_sample();
        let tokens = per + 1;
        let mut x = Matrix::zeros(input.samples * tokens, self.width());
        for s in 0..input.samples {
            x.row_mut(s * tokens).copy_from_slice(&self.cls_token);
            for j in 0..per {
                x.row_mut(s * tokens + 1 + j).copy_from_slice(emb.row(s * per + j));
            }
        }
        Ok(x)
    }

    pub fn forward(&self, input: &EncoderInput) -> Result<EncoderTrace, EncoderError> {
        let tokens = input.tokens_per_sample() + 1;
        let mut x = self.embed(input)?;
        let mut outputs = Vec::with_capacity(self.depth());
        let mut caches = Vec::with_capacity(self.depth());
        for b in &self.blocks {
            let (y, c) = b.forward(&x, tokens);
            outputs.push(y.clone());
            caches.push(c);
            x = y;
        }
        Ok(EncoderTrace { outputs, caches, samples: input.samples, tokens })
    }

    /// Class-summary features after every block, or only after the last.
    pub fn encode(&self, input: &EncoderInput, collect: Collect) -> Result<Vec<Matrix>, EncoderError> {
        let tokens = input.tokens_per_sample() + 1;
        let mut x = self.embed(input)?;
        let mut out = Vec::new();
        for b in &self.blocks {
            x = b.forward(&x, tokens).0;
            if collect == Collect::PerBlock {
                out.push(cls_rows(&x, input.samples, tokens));
            }
        }
        if collect == Collect::FinalOnly {
            out.push(cls_rows(&x, input.samples, tokens));
        }
        Ok(out)
    }

    /// Backpropagates gradients injected at block outputs (`taps[b]` is the
    /// full-token gradient after block `b + 1`). Blocks with index below
    /// `frozen` and, when `frozen > 0`, the embeddings receive no gradient.
    pub fn backward(
        &self,
        input: &EncoderInput,
        trace: &EncoderTrace,
        taps: &[Option<Matrix>],
        frozen: usize,
    ) -> Result<EncoderParams, EncoderError> {
        if taps.len() != self.depth() || trace.caches.len() != self.depth() {
            return Err(EncoderError::ShapeMismatch("one tap slot per block is required".into()));
        }
        let mut grads = self.zeros_like();
        let rows = trace.samples * trace.tokens;
        let mut g = Matrix::zeros(rows, self.width());
        let mut any = false;
        for b in (0..self.depth()).rev() {
            if let Some(t) = &taps[b] {
                if t.shape() != g.shape() {
                    return Err(EncoderError::ShapeMismatch(format!("tap {} has shape {:?}", b + 1, t.shape())));
                }
                g.add_assign(t);
                any = true;
            }
            if b < frozen {
                return Ok(grads);
            }
            if any {
                g = self.blocks[b].backward(&trace.caches[b], &g, &mut grads.blocks[b]);
            }
        }
        if frozen > 0 || !any {
            return Ok(grads);
        }
        let per = trace.tokens - 1;
        let mut g_emb = Matrix::zeros(trace.samples * per, self.width());
        for s in 0..trace.samples {
            for (c, v) in grads.cls_token.iter_mut().zip(g.row(s * trace.tokens)) {
                *c += v;
            }
            for j in 0..per {
                g_emb.row_mut(s * per + j).copy_from_slice(g.row(s * trace.tokens + 1 + j));
            }
        }
        self.patch_embed.backward(&input.patches, &g_emb, &mut grads.patch_embed);
        let table_rows = self.pos_table(input.grid).rows();
        let mut g_table = Matrix::zeros(table_rows, self.width());
        for (r, &p) in input.positions.iter().enumerate() {
            for (o, v) in g_table.row_mut(p).iter_mut().zip(g_emb.row(r)) {
                *o += v;
            }
        }
        self.pos_table_backward(input.grid, &g_table, &mut grads.pos_embed);
        Ok(grads)
    }

    /// Zeroes every residual branch: each block becomes the identity.
    pub fn zero_residuals(&mut self) {
        self.blocks.iter_mut().for_each(Block::zero_residual);
    }

    /// Encoder block a parameter belongs to: 0 for embeddings, `b` for block `b`.
    pub fn block_of(name: &str) -> usize {
        name.strip_prefix("blocks.")
            .and_then(|rest| rest.split('.').next())
            .and_then(|i| i.parse::<usize>().ok())
            .map_or(0, |i| i + 1)
    }
}

impl Parameters for EncoderParams {
    fn visit(&self, f: &mut dyn FnMut(&str, &[f64])) {
        self.patch_embed.visit("patch_embed", f);
        f("cls_token", &self.cls_token);
        f("pos_embed", self.pos_embed.as_slice());
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&format!("blocks.{i}"), f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.patch_embed.visit_mut("patch_embed", f);
        f("cls_token", &mut self.cls_token);
        f("pos_embed", self.pos_embed.as_mut_slice());
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&format!("blocks.{i}"), f);
        }
    }
}

/// Class-summary features of every dataset row, per block or final only,
/// computed in chunks.
pub fn encode_dataset(
    params: &EncoderParams,
    data: &Dataset,
    collect: Collect,
    chunk: usize,
) -> Result<Vec<Matrix>, EncoderError> {
    let mut parts: Vec<Vec<Matrix>> = Vec::new();
    let all: Vec<usize> = (0..data.len()).collect();
    for rows in all.chunks(chunk.max(1)) {
        let input = EncoderInput::from_dataset(&params.config.layout, data, rows)?;
        parts.push(params.encode(&input, collect)?);
    }
    let n_out = parts.first().map_or(0, Vec::len);
    Ok((0..n_out)
        .map(|b| {
            let refs: Vec<&Matrix> = parts.iter().map(|p| &p[b]).collect();
            Matrix::vstack(&refs)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{dot, finite_diff_grad, gradient_mismatch};
    use crate::params::{assign, flatten};

    fn tiny(kind: BlockKind) -> EncoderConfig {
        EncoderConfig {
            depth: 2,
            width: 8,
            mlp_hidden: 12,
            block_kind: kind,
            layout: InputLayout::Image { size: 4, channels: 1, patch_size: 2 },
        }
    }

    fn images(n: usize, size: usize, rng: &mut RngStream) -> Vec<Vec<f64>> {
        (0..n).map(|_| (0..size * size).map(|_| rng.normal()).collect()).collect()
    }

    #[test]
    fn identity_blocks_repeat_embedded_input() {
        let mut rng = RngStream::new(0);
        let cfg = EncoderConfig { depth: 3, ..tiny(BlockKind::ResidualMlp) };
        let mut p = EncoderParams::new(cfg, &mut rng).unwrap();
        p.zero_residuals();
        let imgs = images(2, 4, &mut rng);
        let refs: Vec<&[f64]> = imgs.iter().map(Vec::as_slice).collect();
        let input = EncoderInput::images(&p.config.layout, &refs, 4).unwrap();
        let trace = p.forward(&input).unwrap();
        let embedded = p.embed(&input).unwrap();
        for out in &trace.outputs {
            assert_eq!(out, &embedded);
        }
    }

    #[test]
    fn final_only_is_last_per_block() {
        let mut rng = RngStream::new(2);
        let p = EncoderParams::new(EncoderConfig { depth: 3, ..tiny(BlockKind::ResidualMlp) }, &mut rng).unwrap();
        let imgs = images(3, 4, &mut rng);
        let refs: Vec<&[f64]> = imgs.iter().map(Vec::as_slice).collect();
        let input = EncoderInput::images(&p.config.layout, &refs, 4).unwrap();
        let per = p.encode(&input, Collect::PerBlock).unwrap();
        let fin = p.encode(&input, Collect::FinalOnly).unwrap();
        assert_eq!(per.len(), 3);
        assert_eq!(fin, vec![per[2].clone()]);
        assert_eq!(p.encode(&input, Collect::PerBlock).unwrap(), per);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let mut rng = RngStream::new(2);
        let p = EncoderParams::new(tiny(BlockKind::ResidualMlp), &mut rng).unwrap();
        let bad = vec![0.0; 9];
        assert!(matches!(
            EncoderInput::images(&p.config.layout, &[&bad], 4),
            Err(EncoderError::ShapeMismatch(_))
        ));
        let tokens = InputLayout::Tokens { seq_len: 2, token_dim: 3 };
        let input = EncoderInput::vectors(&tokens, &[&[0.0; 6]]).unwrap();
        assert!(matches!(p.forward(&input), Err(EncoderError::ShapeMismatch(_))));
    }

    fn gradient_check(kind: BlockKind, seed: u64, pooled: bool) {
        let mut rng = RngStream::new(seed);
        let mut cfg = tiny(kind);
        if pooled {
            cfg.layout = InputLayout::Image { size: 8, channels: 1, patch_size: 2 };
        }
        let p = EncoderParams::new(cfg.clone(), &mut rng).unwrap();
        let size = if pooled { 4 } else { 4 };
        let imgs = images(2, size, &mut rng);
        let refs: Vec<&[f64]> = imgs.iter().map(Vec::as_slice).collect();
        let input = EncoderInput::images(&cfg.layout, &refs, size).unwrap();
        let tokens = input.tokens_per_sample() + 1;
        let w1 = Matrix::random_normal(2, 8, 1.0, &mut rng);
        let w2 = Matrix::random_normal(2 * tokens, 8, 1.0, &mut rng);
        let objective = |q: &EncoderParams| {
            let t = q.forward(&input).unwrap();
            dot(t.cls_features(1).as_slice(), w1.as_slice()) + dot(t.outputs[1].as_slice(), w2.as_slice())
        };
        let trace = p.forward(&input).unwrap();
        let grads = p.backward(&input, &trace, &[Some(cls_tap_gradient(&w1, tokens)), Some(w2.clone())], 0).unwrap();
        let base = flatten(&p);
        let numeric = finite_diff_grad(
            |x| {
                let mut q = p.clone();
                assign(&mut q, x);
                objective(&q)
            },
            &base,
            1e-6,
        )
        .unwrap();
        assert!(gradient_mismatch(&flatten(&grads), &numeric, 1e-5, 1e-7) <= 1.0);
    }

    #[test]
    fn encoder_gradients_match_finite_differences() {
        for seed in 0..2 {
            gradient_check(BlockKind::ResidualMlp, seed, false);
            gradient_check(BlockKind::SingleHeadAttention, seed, false);
        }
        gradient_check(BlockKind::ResidualMlp, 7, true);
    }

    #[test]
    fn frozen_blocks_receive_no_gradient() {
        let mut rng = RngStream::new(5);
        let p = EncoderParams::new(EncoderConfig { depth: 3, ..tiny(BlockKind::ResidualMlp) }, &mut rng).unwrap();
        let imgs = images(2, 4, &mut rng);
        let refs: Vec<&[f64]> = imgs.iter().map(Vec::as_slice).collect();
        let input = EncoderInput::images(&p.config.layout, &refs, 4).unwrap();
        let trace = p.forward(&input).unwrap();
        let g = Matrix::random_normal(2 * 5, 8, 1.0, &mut rng);
        let grads = p.backward(&input, &trace, &[None, None, Some(g)], 2).unwrap();
        let mut nonzero = Vec::new();
        grads.visit(&mut |name, s| {
            if s.iter().any(|v| *v != 0.0) {
                nonzero.push(EncoderParams::block_of(name));
            }
        });
        assert!(!nonzero.is_empty());
        assert!(nonzero.iter().all(|&b| b == 3));
    }

    #[test]
    fn block_of_parses_names() {
        assert_eq!(EncoderParams::block_of("pos_embed"), 0);
        assert_eq!(EncoderParams::block_of("blocks.0.fc1.weight"), 1);
        assert_eq!(EncoderParams::block_of("blocks.11.norm1.gamma"), 12);
    }
}
