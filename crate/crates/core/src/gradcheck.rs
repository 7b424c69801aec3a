//! Finite-difference checks of every hand-written backward pass on small
//! random instances.

use serde::Serialize;

use crate::encoder::{cls_tap_gradient, Block, BlockKind, Decoder, EncoderConfig, EncoderInput, EncoderParams, InputLayout, MimConfig};
use crate::heads::{HeadConfig, IdHead, Mode};
use crate::nna::{nna_loss, ContrastiveBatch};
use crate::numerics::{dot, finite_diff_grad, gradient_mismatch, l2_normalize_rows, l2_normalize_rows_backward, Matrix, RngStream};
use crate::params::{assign, flatten};

pub const REL_TOL: f64 = 1e-5;
pub const ABS_TOL: f64 = 1e-7;
const EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    /// Largest |analytic − numeric| / (abs + rel·|numeric|); ≤ 1 passes.
    pub worst: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.worst <= 1.0
    }
}

fn compare(name: String, analytic: &[f64], numeric: &[f64]) -> CheckResult {
    CheckResult { name, worst: gradient_mismatch(analytic, numeric, REL_TOL, ABS_TOL) }
}

fn numeric(f: impl FnMut(&[f64]) -> f64, x: &[f64]) -> Vec<f64> {
    finite_diff_grad(f, x, EPS).expect("non-empty input")
}

fn unit_rows(n: usize, d: usize, rng: &mut RngStream) -> Matrix {
    l2_normalize_rows(&Matrix::random_normal(n, d, 1.0, rng)).expect("gaussian rows are nonzero")
}

/// Alignment loss gradient with respect to the anchors.
pub fn check_nna(rng: &mut RngStream) -> CheckResult {
    let n = 2 + rng.below(6);
    let d = 3 + rng.below(8);
    let tau = [0.1, 0.2, 0.5][rng.below(3)];
    let pos = unit_rows(n, d, rng);
    let neg = unit_rows(n, d, rng);
    let mut mask = ContrastiveBatch::diagonal_mask(n);
    for (i, m) in mask.iter_mut().enumerate() {
        if i % (n + 1) != 0 && rng.bernoulli(0.2) {
            *m = true;
        }
    }
    let anchors = unit_rows(n, d, rng);
    let loss_at = |a: &[f64]| {
        let m = Matrix::from_vec(n, d, a.to_vec()).expect("sized");
        let b = ContrastiveBatch::new(m, pos.clone(), neg.clone(), tau, mask.clone()).expect("valid");
        nna_loss(&b).expect("finite").loss
    };
    let batch = ContrastiveBatch::new(anchors.clone(), pos.clone(), neg.clone(), tau, mask.clone()).expect("valid");
    let analytic = nna_loss(&batch).expect("finite").grad_anchors;
    compare(format!("nna n={n} d={d} tau={tau}"), analytic.as_slice(), &numeric(loss_at, anchors.as_slice()))
}

/// Projector and predictor (batch-statistics normalization) parameters and
/// input, under a random linear readout of both raw outputs.
pub fn check_head(rng: &mut RngStream) -> CheckResult {
    let input = 3 + rng.below(5);
    let bottleneck = 2 + rng.below(4);
    let cfg = HeadConfig::with_dims(input, 4 + rng.below(6), bottleneck, 4 + rng.below(6));
    let head = IdHead::new(cfg, rng).expect("valid head");
    let rows = 3 + rng.below(4);
    let x = Matrix::random_normal(rows, input, 1.0, rng);
    let wp = Matrix::random_normal(rows, bottleneck, 1.0, rng);
    let wq = Matrix::random_normal(rows, bottleneck, 1.0, rng);
    let objective = |h: &IdHead, x: &Matrix| {
        let out = h.clone().forward(x, Mode::Train).expect("forward");
        dot(out.pred_raw.as_slice(), wp.as_slice()) + dot(out.proj_raw.as_slice(), wq.as_slice())
    };
    let out = head.clone().forward(&x, Mode::Train).expect("forward");
    let (grads, gx) = head.backward(&out.cache, &wp, &wq).expect("backward");
    let num_p = numeric(
        |p| {
            let mut h = head.clone();
            assign(&mut h, p);
            objective(&h, &x)
        },
        &flatten(&head),
    );
    let num_x = numeric(|p| objective(&head, &Matrix::from_vec(rows, input, p.to_vec()).expect("sized")), x.as_slice());
    let analytic: Vec<f64> = flatten(&grads).into_iter().chain(gx.into_vec()).collect();
    let num: Vec<f64> = num_p.into_iter().chain(num_x).collect();
    compare(format!("head in={input} bottleneck={bottleneck} rows={rows}"), &analytic, &num)
}

/// One encoder block, parameters and input.
pub fn check_block(kind: BlockKind, rng: &mut RngStream) -> CheckResult {
    let width = 3 + rng.below(4);
    let tokens = 2 + rng.below(3);
    let samples = 1 + rng.below(2);
    let block = Block::new(kind, width, 2 * width, rng);
    let x = Matrix::random_normal(samples * tokens, width, 1.0, rng);
    let w = Matrix::random_normal(samples * tokens, width, 1.0, rng);
    let (_, cache) = block.forward(&x, tokens);
    let mut grads = block.zeros_like();
    let gx = block.backward(&cache, &w, &mut grads);
    let num_p = numeric(
        |p| {
            let mut b = block.clone();
            b.visit_mut_flat(p);
            dot(b.forward(&x, tokens).0.as_slice(), w.as_slice())
        },
        &block_flat(&block),
    );
    let num_x = numeric(
        |p| dot(block.forward(&Matrix::from_vec(x.rows(), width, p.to_vec()).expect("sized"), tokens).0.as_slice(), w.as_slice()),
        x.as_slice(),
    );
    let analytic: Vec<f64> = block_flat(&grads).into_iter().chain(gx.into_vec()).collect();
    let num: Vec<f64> = num_p.into_iter().chain(num_x).collect();
    compare(format!("block {kind:?} width={width} tokens={tokens}"), &analytic, &num)
}

fn block_flat(b: &Block) -> Vec<f64> {
    let mut out = Vec::new();
    b.visit("b", &mut |_, s| out.extend_from_slice(s));
    out
}

trait AssignFlat {
    fn visit_mut_flat(&mut self, flat: &[f64]);
}

impl AssignFlat for Block {
    fn visit_mut_flat(&mut self, flat: &[f64]) {
        let mut off = 0;
        self.visit_mut("b", &mut |_, s| {
            let n = s.len();
            s.copy_from_slice(&flat[off..off + n]);
            off += n;
        });
    }
}

/// Whole encoder, class-token taps at two blocks.
pub fn check_encoder(kind: BlockKind, rng: &mut RngStream) -> CheckResult {
    let cfg = EncoderConfig {
        depth: 3,
        width: 4,
        mlp_hidden: 6,
        block_kind: kind,
        layout: InputLayout::Image { size: 4, channels: 1, patch_size: 2 },
    };
    let enc = EncoderParams::new(cfg, rng).expect("valid encoder");
    let images: Vec<Vec<f64>> = (0..2).map(|_| (0..16).map(|_| rng.normal()).collect()).collect();
    let refs: Vec<&[f64]> = images.iter().map(Vec::as_slice).collect();
    let input = EncoderInput::images(&enc.config.layout, &refs, 4).expect("input");
    let w1 = Matrix::random_normal(2, 4, 1.0, rng);
    let w3 = Matrix::random_normal(2, 4, 1.0, rng);
    let objective = |e: &EncoderParams| {
        let t = e.forward(&input).expect("forward");
        dot(t.cls_features(1).as_slice(), w1.as_slice()) + dot(t.cls_features(3).as_slice(), w3.as_slice())
    };
    let trace = enc.forward(&input).expect("forward");
    let taps = vec![Some(cls_tap_gradient(&w1, trace.tokens())), None, Some(cls_tap_gradient(&w3, trace.tokens()))];
    let grads = enc.backward(&input, &trace, &taps, 0).expect("backward");
    let num = numeric(
        |p| {
            let mut e = enc.clone();
            assign(&mut e, p);
            objective(&e)
        },
        &flatten(&enc),
    );
    compare(format!("encoder {kind:?} depth=3"), &flatten(&grads), &num)
}

/// Reconstruction decoder, parameters and encoder states.
pub fn check_decoder(rng: &mut RngStream) -> CheckResult {
    let mim = MimConfig { decoder_width: 4, decoder_depth: 1, ..Default::default() };
    let dec = Decoder::new(&mim, 5, BlockKind::ResidualMlp, 4, 3, rng);
    let vis = vec![vec![0, 3], vec![1, 2]];
    let enc = Matrix::random_normal(6, 5, 1.0, rng);
    let w = Matrix::random_normal(10, 3, 1.0, rng);
    let (_, cache) = dec.forward(&enc, &vis);
    let (grads, g_enc) = dec.backward(&cache, &w);
    let num_p = numeric(
        |p| {
            let mut d = dec.clone();
            assign(&mut d, p);
            dot(d.forward(&enc, &vis).0.as_slice(), w.as_slice())
        },
        &flatten(&dec),
    );
    let num_x = numeric(|p| dot(dec.forward(&Matrix::from_vec(6, 5, p.to_vec()).expect("sized"), &vis).0.as_slice(), w.as_slice()), enc.as_slice());
    let analytic: Vec<f64> = flatten(&grads).into_iter().chain(g_enc.into_vec()).collect();
    let num: Vec<f64> = num_p.into_iter().chain(num_x).collect();
    compare("decoder".into(), &analytic, &num)
}

/// Head → normalization → alignment loss, as composed in a refinement step.
pub fn check_head_with_loss(rng: &mut RngStream) -> CheckResult {
    let cfg = HeadConfig::with_dims(4, 6, 3, 6);
    let head = IdHead::new(cfg, rng).expect("valid head");
    let n = 4;
    let x = Matrix::random_normal(n, 4, 1.0, rng);
    let pos = unit_rows(n, 3, rng);
    let loss_of = |h: &IdHead, x: &Matrix| {
        let out = h.clone().forward(x, Mode::Train).expect("forward");
        let neg = out.proj.clone();
        let b = ContrastiveBatch::new(out.pred.clone(), pos.clone(), neg, 0.2, ContrastiveBatch::diagonal_mask(n)).expect("batch");
        (nna_loss(&b).expect("loss"), out)
    };
    let (loss, out) = loss_of(&head, &x);
    let g_raw = l2_normalize_rows_backward(&out.pred, &out.pred_norms, &loss.grad_anchors);
    let (grads, gx) = head
        .backward(&out.cache, &g_raw, &Matrix::zeros(n, 3))
        .expect("backward");
    // negatives are stop-gradient: hold them fixed at their current value
    let frozen_neg = out.proj.clone();
    let objective = |h: &IdHead, x: &Matrix| {
        let o = h.clone().forward(x, Mode::Train).expect("forward");
        let b = ContrastiveBatch::new(o.pred, pos.clone(), frozen_neg.clone(), 0.2, ContrastiveBatch::diagonal_mask(n)).expect("batch");
        nna_loss(&b).expect("loss").loss
    };
    let num_p = numeric(
        |p| {
            let mut h = head.clone();
            assign(&mut h, p);
            objective(&h, &x)
        },
        &flatten(&head),
    );
    let num_x = numeric(|p| objective(&head, &Matrix::from_vec(n, 4, p.to_vec()).expect("sized")), x.as_slice());
    let analytic: Vec<f64> = flatten(&grads).into_iter().chain(gx.into_vec()).collect();
    let num: Vec<f64> = num_p.into_iter().chain(num_x).collect();
    compare("head+normalize+nna".into(), &analytic, &num)
}

/// `instances` randomized checks of each kind.
pub fn run_suite(seed: u64, instances: usize) -> Vec<CheckResult> {
    let base = RngStream::new(seed);
    let mut out = Vec::new();
    for i in 0..instances {
        let mut rng = base.split(i as u64);
        out.push(check_nna(&mut rng));
        out.push(check_head(&mut rng));
        out.push(check_block(BlockKind::ResidualMlp, &mut rng));
        out.push(check_block(BlockKind::SingleHeadAttention, &mut rng));
    }
    let mut rng = base.split(u64::MAX);
    out.push(check_encoder(BlockKind::ResidualMlp, &mut rng));
    out.push(check_encoder(BlockKind::SingleHeadAttention, &mut rng));
    out.push(check_decoder(&mut rng));
    out.push(check_head_with_loss(&mut rng));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes() {
        for r in run_suite(0, 3) {
            assert!(r.passed(), "{} worst {}", r.name, r.worst);
        }
    }
}
