//! Named parameter traversal shared by the optimizer, EMA, gradient checks and
//! checkpoints.

/// A model whose trainable tensors can be visited in a fixed order.
///
/// Gradients are represented by a value of the same type, so `visit` on a
/// model and on its gradient yields aligned slices.
pub trait Parameters {
    fn visit(&self, f: &mut dyn FnMut(&str, &[f64]));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64]));
}

pub fn flatten<P: Parameters + ?Sized>(p: &P) -> Vec<f64> {
    let mut out = Vec::new();
    p.visit(&mut |_, s| out.extend_from_slice(s));
    out
}

/// Overwrites every parameter from a flat buffer produced by [`flatten`].
pub fn assign<P: Parameters + ?Sized>(p: &mut P, flat: &[f64]) {
    let mut offset = 0;
    p.visit_mut(&mut |_, s| {
        s.copy_from_slice(&flat[offset..offset + s.len()]);
        offset += s.len();
    });
    assert_eq!(offset, flat.len(), "flat buffer length mismatch");
}

pub fn count<P: Parameters + ?Sized>(p: &P) -> usize {
    let mut n = 0;
    p.visit(&mut |_, s| n += s.len());
    n
}

/// `(name, len)` for every tensor in visit order.
pub fn manifest<P: Parameters + ?Sized>(p: &P) -> Vec<(String, usize)> {
    let mut out = Vec::new();
    p.visit(&mut |name, s| out.push((name.to_string(), s.len())));
    out
}

pub fn zero<P: Parameters + ?Sized>(p: &mut P) {
    p.visit_mut(&mut |_, s| s.iter_mut().for_each(|v| *v = 0.0));
}

/// `dst += scale · src`, tensor by tensor.
pub fn axpy<P: Parameters + ?Sized>(dst: &mut P, scale: f64, src: &P) {
    let flat = flatten(src);
    let mut offset = 0;
    dst.visit_mut(&mut |_, s| {
        let n = s.len();
        for (d, v) in s.iter_mut().zip(&flat[offset..offset + n]) {
            *d += scale * v;
        }
        offset += n;
    });
}
