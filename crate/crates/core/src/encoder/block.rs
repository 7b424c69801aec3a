//! Pre-norm residual blocks operating on `samples × tokens` rows.
//!
//! Rows are grouped per sample: row `s * tokens + j` is token `j` of sample
//! `s`. The MLP block mixes tokens through a per-sample mean of the
//! normalized tokens that enters the hidden layer; the attention block uses
//! single-head softmax attention followed by a token-wise MLP.

use serde::{Deserialize, Serialize};

use crate::layers::{gelu_backward, gelu_matrix, LayerNorm, LayerNormCache, Linear};
use crate::numerics::{Matrix, RngStream};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    #[default]
    ResidualMlp,
    SingleHeadAttention,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Attention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub kind: BlockKind,
    pub norm1: LayerNorm,
    pub attention: Option<Attention>,
    pub norm2: Option<LayerNorm>,
    pub fc1: Linear,
    /// Context projection of the per-sample token mean (MLP blocks only).
    pub context: Option<Matrix>,
    pub fc2: Linear,
}

pub struct BlockCache {
    tokens: usize,
    ln1: LayerNormCache,
    h1: Matrix,
    context_mean: Option<Matrix>,
    attn: Option<AttnCache>,
    ln2: Option<LayerNormCache>,
    h2: Option<Matrix>,
    pre: Matrix,
    act: Matrix,
}

struct AttnCache {
    q: Matrix,
    k: Matrix,
    v: Matrix,
    probs: Vec<Matrix>,
    mixed: Matrix,
}

impl Block {
    pub fn new(kind: BlockKind, width: usize, hidden: usize, rng: &mut RngStream) -> Self {
        let fc1 = Linear::init(width, hidden, rng);
        let mut fc2 = Linear::init(hidden, width, rng);
        // small residual branches keep deep stacks close to identity at init
        fc2.weight.scale(0.5);
        match kind {
            BlockKind::ResidualMlp => Self {
                kind,
                norm1: LayerNorm::new(width),
                attention: None,
                norm2: None,
                fc1,
                context: Some(Matrix::random_normal(hidden, width, 1.0 / (width as f64).sqrt(), rng)),
                fc2,
            },
            BlockKind::SingleHeadAttention => {
                let mut out = Linear::init(width, width, rng);
                out.weight.scale(0.5);
                Self {
                    kind,
                    norm1: LayerNorm::new(width),
                    attention: Some(Attention {
                        query: Linear::init(width, width, rng),
                        key: Linear::init(width, width, rng),
                        value: Linear::init(width, width, rng),
                        out,
                    }),
                    norm2: Some(LayerNorm::new(width)),
                    fc1,
                    context: None,
                    fc2,
                }
            }
        }
    }

    pub fn width(&self) -> usize {
        self.fc2.out_dim()
    }

    /// Zeroes every residual branch so the block computes the identity.
    pub fn zero_residual(&mut self) {
        self.fc2.weight.scale(0.0);
        self.fc2.bias.iter_mut().for_each(|b| *b = 0.0);
        if let Some(a) = &mut self.attention {
            a.out.weight.scale(0.0);
            a.out.bias.iter_mut().for_each(|b| *b = 0.0);
        }
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.visit_mut("", &mut |_, s| s.iter_mut().for_each(|v| *v = 0.0));
        z
    }

    pub fn forward(&self, x: &Matrix, tokens: usize) -> (Matrix, BlockCache) {
        let samples = x.rows() / tokens;
        let (h1, ln1) = self.norm1.forward(x);
        match &self.attention {
            None => {
                let ctx = self.context.as_ref().expect("mlp block has a context projection");
                let mean = per_sample_mean(&h1, samples, tokens);
                let mut pre = self.fc1.forward(&h1);
                let ctx_term = mean.matmul_nt(ctx);
                add_per_sample(&mut pre, &ctx_term, tokens);
                let act = gelu_matrix(&pre);
                let mut y = self.fc2.forward(&act);
                y.add_assign(x);
                let cache = BlockCache {
                    tokens,
                    ln1,
                    h1,
                    context_mean: Some(mean),
                    attn: None,
                    ln2: None,
                    h2: None,
                    pre,
                    act,
                };
                (y, cache)
            }
            Some(att) => {
                let q = att.query.forward(&h1);
                let k = att.key.forward(&h1);
                let v = att.value.forward(&h1);
                let scale = 1.0 / (q.cols() as f64).sqrt();
                let mut mixed = Matrix::zeros(x.rows(), x.cols());
                let mut probs = Vec::with_capacity(samples);
                for s in 0..samples {
                    let (lo, hi) = (s * tokens, (s + 1) * tokens);
                    let qs = q.slice_rows(lo, hi);
                    let ks = k.slice_rows(lo, hi);
                    let vs = v.slice_rows(lo, hi);
                    let mut p = qs.matmul_nt(&ks);
                    p.scale(scale);
                    softmax_rows(&mut p);
                    let o = p.matmul(&vs);
                    mixed.as_mut_slice()[lo * x.cols()..hi * x.cols()].copy_from_slice(o.as_slice());
                    probs.push(p);
                }
                let mut x1 = att.out.forward(&mixed);
                x1.add_assign(x);
                let norm2 = self.norm2.as_ref().expect("attention block has a second norm");
                let (h2, ln2) = norm2.forward(&x1);
                let pre = self.fc1.forward(&h2);
                let act = gelu_matrix(&pre);
                let mut y = self.fc2.forward(&act);
                y.add_assign(&x1);
                let cache = BlockCache {
                    tokens,
                    ln1,
                    h1,
                    context_mean: None,
                    attn: Some(AttnCache { q, k, v, probs, mixed }),
                    ln2: Some(ln2),
                    h2: Some(h2),
                    pre,
                    act,
                };
                (y, cache)
            }
        }
    }

    /// Accumulates parameter gradients into `grads` and returns the input gradient.
    pub fn backward(&self, cache: &BlockCache, grad: &Matrix, grads: &mut Block) -> Matrix {
        let tokens = cache.tokens;
        let samples = grad.rows() / tokens;
        let mut gx = grad.clone();
        let g_act = self.fc2.backward(&cache.act, grad, &mut grads.fc2);
        let g_pre = gelu_backward(&cache.pre, &g_act);
        match (&self.attention, &cache.attn) {
            (None, _) => {
                let ctx = self.context.as_ref().expect("context");
                let mut gh = self.fc1.backward(&cache.h1, &g_pre, &mut grads.fc1);
                let g_ctx_in = per_sample_sum(&g_pre, samples, tokens);
                let mean = cache.context_mean.as_ref().expect("context mean");
                grads.context.as_mut().expect("context grad").add_assign(&g_ctx_in.matmul_tn(mean));
                let mut g_mean = g_ctx_in.matmul(ctx);
                g_mean.scale(1.0 / tokens as f64);
                add_per_sample(&mut gh, &g_mean, tokens);
                gx.add_assign(&self.norm1.backward(&cache.ln1, &gh, &mut grads.norm1));
            }
            (Some(att), Some(ac)) => {
                let norm2 = self.norm2.as_ref().expect("norm2");
                let gh2 = self.fc1.backward(cache.h2.as_ref().expect("h2"), &g_pre, &mut grads.fc1);
                gx.add_assign(&norm2.backward(cache.ln2.as_ref().expect("ln2"), &gh2, grads.norm2.as_mut().expect("norm2 grad")));
                // gx now holds the gradient at the attention residual output
                let ga = grads.attention.as_mut().expect("attention grad");
                let g_mixed = att.out.backward(&ac.mixed, &gx, &mut ga.out);
                let d = ac.q.cols();
                let scale = 1.0 / (d as f64).sqrt();
                let mut gq = Matrix::zeros(gx.rows(), d);
                let mut gk = Matrix::zeros(gx.rows(), d);
                let mut gv = Matrix::zeros(gx.rows(), d);
                for s in 0..samples {
                    let (lo, hi) = (s * tokens, (s + 1) * tokens);
                    let p = &ac.probs[s];
                    let go = g_mixed.slice_rows(lo, hi);
                    let vs = ac.v.slice_rows(lo, hi);
                    let qs = ac.q.slice_rows(lo, hi);
                    let ks = ac.k.slice_rows(lo, hi);
                    let gp = go.matmul_nt(&vs);
                    let gvs = p.matmul_tn(&go);
                    let mut gs = Matrix::zeros(tokens, tokens);
                    for r in 0..tokens {
                        let pr = p.row(r);
                        let gpr = gp.row(r);
                        let inner: f64 = pr.iter().zip(gpr).map(|(a, b)| a * b).sum();
                        let out = gs.row_mut(r);
                        for c in 0..tokens {
                            out[c] = pr[c] * (gpr[c] - inner) * scale;
                        }
                    }
                    let gqs = gs.matmul(&ks);
                    let gks = gs.matmul_tn(&qs);
                    gq.as_mut_slice()[lo * d..hi * d].copy_from_slice(gqs.as_slice());
                    gk.as_mut_slice()[lo * d..hi * d].copy_from_slice(gks.as_slice());
                    gv.as_mut_slice()[lo * d..hi * d].copy_from_slice(gvs.as_slice());
                }
                let mut gh1 = att.query.backward(&cache.h1, &gq, &mut ga.query);
                gh1.add_assign(&att.key.backward(&cache.h1, &gk, &mut ga.key));
                gh1.add_assign(&att.value.backward(&cache.h1, &gv, &mut ga.value));
                let g_in = self.norm1.backward(&cache.ln1, &gh1, &mut grads.norm1);
                gx.add_assign(&g_in);
            }
            (Some(_), None) => unreachable!("attention block cache without attention state"),
        }
        gx
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[f64])) {
        self.norm1.visit(&format!("{prefix}.norm1"), f);
        if let Some(a) = &self.attention {
            a.query.visit(&format!("{prefix}.attn.query"), f);
            a.key.visit(&format!("{prefix}.attn.key"), f);
            a.value.visit(&format!("{prefix}.attn.value"), f);
            a.out.visit(&format!("{prefix}.attn.out"), f);
        }
        if let Some(n) = &self.norm2 {
            n.visit(&format!("{prefix}.norm2"), f);
        }
        self.fc1.visit(&format!("{prefix}.fc1"), f);
        if let Some(c) = &self.context {
            f(&format!("{prefix}.context.weight"), c.as_slice());
        }
        self.fc2.visit(&format!("{prefix}.fc2"), f);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.norm1.visit_mut(&format!("{prefix}.norm1"), f);
        if let Some(a) = &mut self.attention {
            a.query.visit_mut(&format!("{prefix}.attn.query"), f);
            a.key.visit_mut(&format!("{prefix}.attn.key"), f);
            a.value.visit_mut(&format!("{prefix}.attn.value"), f);
            a.out.visit_mut(&format!("{prefix}.attn.out"), f);
        }
        if let Some(n) = &mut self.norm2 {
            n.visit_mut(&format!("{prefix}.norm2"), f);
        }
        self.fc1.visit_mut(&format!("{prefix}.fc1"), f);
        if let Some(c) = &mut self.context {
            f(&format!("{prefix}.context.weight"), c.as_mut_slice());
        }
        self.fc2.visit_mut(&format!("{prefix}.fc2"), f);
    }
}

fn per_sample_sum(x: &Matrix, samples: usize, tokens: usize) -> Matrix {
    let mut out = Matrix::zeros(samples, x.cols());
    for s in 0..samples {
        let dst = out.row_mut(s);
        for j in 0..tokens {
            for (d, v) in dst.iter_mut().zip(x.row(s * tokens + j)) {
                *d += v;
            }
        }
    }
    out
}

fn per_sample_mean(x: &Matrix, samples: usize, tokens: usize) -> Matrix {
    let mut out = per_sample_sum(x, samples, tokens);
    out.scale(1.0 / tokens as f64);
    out
}

fn add_per_sample(x: &mut Matrix, per_sample: &Matrix, tokens: usize) {
    for r in 0..x.rows() {
        let src = per_sample.row(r / tokens);
        for (d, v) in x.row_mut(r).iter_mut().zip(src) {
            *d += v;
        }
    }
}

fn softmax_rows(m: &mut Matrix) {
    for r in 0..m.rows() {
        let row = m.row_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        row.iter_mut().for_each(|v| *v /= sum);
    }
}
