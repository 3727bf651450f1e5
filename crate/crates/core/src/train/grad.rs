//! Hand-written backprop for the decoder layer, the LM head, and the losses.
//!
//! The training forward mirrors the inference kernels loop for loop (same
//! iteration order, same f64 accumulation) so the two paths agree bit for
//! bit; backward accumulates gradients into mirror structures.

use crate::model::{apply_rotary, silu, LayerWeights, RMS_EPS};
use crate::numkernel::{matmul, Matrix};

// ---------------------------------------------------------------------------
// Gradient mirrors
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct LayerGrads {
    pub attn_norm: Vec<f32>,
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub mlp_norm: Vec<f32>,
    pub w1: Matrix,
    pub w2: Matrix,
}

impl LayerGrads {
    pub fn zeros_like(lw: &LayerWeights) -> Self {
        Self {
            attn_norm: vec![0.0; lw.attn_norm.len()],
            wq: Matrix::zeros(lw.wq.rows, lw.wq.cols),
            wk: Matrix::zeros(lw.wk.rows, lw.wk.cols),
            wv: Matrix::zeros(lw.wv.rows, lw.wv.cols),
            wo: Matrix::zeros(lw.wo.rows, lw.wo.cols),
            mlp_norm: vec![0.0; lw.mlp_norm.len()],
            w1: Matrix::zeros(lw.w1.rows, lw.w1.cols),
            w2: Matrix::zeros(lw.w2.rows, lw.w2.cols),
        }
    }
}

// ---------------------------------------------------------------------------
// Row-wise RMS norm with activations
// ---------------------------------------------------------------------------

pub fn rmsnorm_rows(x: &Matrix, gain: &[f32]) -> (Matrix, Vec<f32>) {
    let mut out = Matrix::zeros(x.rows, x.cols);
    let mut inv_rms = vec![0.0f32; x.rows];
    for t in 0..x.rows {
        let row = x.row(t);
        let ms = row.iter().map(|&v| v as f64 * v as f64).sum::<f64>() / row.len() as f64;
        let inv = 1.0 / (ms + RMS_EPS as f64).sqrt();
        inv_rms[t] = inv as f32;
        for (o, (&v, &g)) in out.row_mut(t).iter_mut().zip(row.iter().zip(gain)) {
            *o = (v as f64 * inv) as f32 * g;
        }
    }
    (out, inv_rms)
}

/// Backward of `y = gain ⊙ x * inv_rms(x)`; accumulates `dgain` when given.
pub fn rmsnorm_rows_bwd(
    dy: &Matrix,
    x: &Matrix,
    gain: &[f32],
    inv_rms: &[f32],
    mut dgain: Option<&mut [f32]>,
) -> Matrix {
    let d = x.cols as f64;
    let mut dx = Matrix::zeros(x.rows, x.cols);
    for t in 0..x.rows {
        let r = inv_rms[t] as f64;
        let xr = x.row(t);
        let dyr = dy.row(t);
        if let Some(dg) = dgain.as_deref_mut() {
            for ((dgj, &dyj), &xj) in dg.iter_mut().zip(dyr).zip(xr) {
                *dgj += dyj * (xj as f64 * r) as f32;
            }
        }
        // w = dy ⊙ gain; dx = w*r - x * r^3/d * (w·x)
        let mut wx = 0.0f64;
        for ((&dyj, &gj), &xj) in dyr.iter().zip(gain).zip(xr) {
            wx += dyj as f64 * gj as f64 * xj as f64;
        }
        let coef = r * r * r / d * wx;
        for (dxj, ((&dyj, &gj), &xj)) in dx.row_mut(t).iter_mut().zip(dyr.iter().zip(gain).zip(xr))
        {
            *dxj = (dyj as f64 * gj as f64 * r - xj as f64 * coef) as f32;
        }
    }
    dx
}

// ---------------------------------------------------------------------------
// Decoder layer with activations
// ---------------------------------------------------------------------------

pub struct LayerActs {
    pub x_in: Matrix,
    inv_rms_a: Vec<f32>,
    n1: Matrix,
    /// Post-rotary projections.
    q: Matrix,
    k: Matrix,
    v: Matrix,
    /// Per-head causal attention probabilities, row-major LxL (zeros above
    /// the diagonal), kept in f64 for backward precision.
    probs: Vec<Vec<f64>>,
    ctx: Matrix,
    b_mid: Matrix,
    inv_rms_m: Vec<f32>,
    n2: Matrix,
    u: Matrix,
    s: Matrix,
}

/// Full causal forward of one decoder layer, keeping activations. Iteration
/// order matches the inference kernel exactly.
pub fn layer_forward_acts(
    lw: &LayerWeights,
    x: &Matrix,
    positions: &[usize],
    heads: usize,
) -> (Matrix, LayerActs) {
    let len = x.rows;
    let d = x.cols;
    let hd = d / heads;
    let (n1, inv_rms_a) = rmsnorm_rows(x, &lw.attn_norm);
    let mut q = matmul(&n1, &lw.wq).expect("dims fixed");
    let mut k = matmul(&n1, &lw.wk).expect("dims fixed");
    let v = matmul(&n1, &lw.wv).expect("dims fixed");
    for t in 0..len {
        apply_rotary(q.row_mut(t), positions[t], heads, hd);
        apply_rotary(k.row_mut(t), positions[t], heads, hd);
    }
    let scale = 1.0 / (hd as f64).sqrt();
    let mut probs = vec![vec![0.0f64; len * len]; heads];
    let mut ctx = Matrix::zeros(len, d);
    for t in 0..len {
        let mut ctx64 = vec![0.0f64; d];
        for head in 0..heads {
            let qs = &q.row(t)[head * hd..(head + 1) * hd];
            let mut scores = vec![0.0f64; t + 1];
            for (j, score) in scores.iter_mut().enumerate() {
                let ks = &k.row(j)[head * hd..(head + 1) * hd];
                let mut acc = 0.0f64;
                for (a, b) in qs.iter().zip(ks) {
                    acc += *a as f64 * *b as f64;
                }
                *score = acc * scale;
            }
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0f64;
            for s in scores.iter_mut() {
                *s = (*s - max).exp();
                sum += *s;
            }
            for (j, s) in scores.iter().enumerate() {
                let p = s / sum;
                probs[head][t * len + j] = p;
                let vs = &v.row(j)[head * hd..(head + 1) * hd];
                for (o, &xv) in ctx64[head * hd..(head + 1) * hd].iter_mut().zip(vs) {
                    *o += p * xv as f64;
                }
            }
        }
        for (o, &xv) in ctx.row_mut(t).iter_mut().zip(&ctx64) {
            *o = xv as f32;
        }
    }
    let attn_out = matmul(&ctx, &lw.wo).expect("dims fixed");
    let mut b_mid = x.clone();
    for (b, a) in b_mid.data.iter_mut().zip(&attn_out.data) {
        *b += a;
    }
    let (n2, inv_rms_m) = rmsnorm_rows(&b_mid, &lw.mlp_norm);
    let u = matmul(&n2, &lw.w1).expect("dims fixed");
    let mut s = u.clone();
    for x in s.data.iter_mut() {
        *x = silu(*x);
    }
    let mlp_out = matmul(&s, &lw.w2).expect("dims fixed");
    let mut out = b_mid.clone();
    for (o, m) in out.data.iter_mut().zip(&mlp_out.data) {
        *o += m;
    }
    let acts = LayerActs {
        x_in: x.clone(),
        inv_rms_a,
        n1,
        q,
        k,
        v,
        probs,
        ctx,
        b_mid,
        inv_rms_m,
        n2,
        u,
        s,
    };
    (out, acts)
}

/// Backward through one decoder layer; accumulates into `grads` and returns
/// the gradient w.r.t. the layer input.
pub fn layer_backward_acts(
    lw: &LayerWeights,
    acts: &LayerActs,
    dout: &Matrix,
    positions: &[usize],
    heads: usize,
    grads: &mut LayerGrads,
) -> Matrix {
    let len = acts.x_in.rows;
    let d = acts.x_in.cols;
    let hd = d / heads;
    // MLP sublayer.
    let dmlp = dout; // residual: dout flows to both mlp_out and b_mid
    add_at_b(&acts.s, dmlp, &mut grads.w2);
    let mut du = matmul_bt(dmlp, &lw.w2);
    for (dux, &ux) in du.data.iter_mut().zip(&acts.u.data) {
        *dux *= silu_grad(ux);
    }
    add_at_b(&acts.n2, &du, &mut grads.w1);
    let dn2 = matmul_bt(&du, &lw.w1);
    let mut db = rmsnorm_rows_bwd(
        &dn2,
        &acts.b_mid,
        &lw.mlp_norm,
        &acts.inv_rms_m,
        Some(&mut grads.mlp_norm),
    );
    for (b, o) in db.data.iter_mut().zip(&dout.data) {
        *b += o;
    }
    // Attention sublayer.
    add_at_b(&acts.ctx, &db, &mut grads.wo);
    let dctx = matmul_bt(&db, &lw.wo);
    let scale = 1.0 / (hd as f64).sqrt();
    let mut dq = Matrix::zeros(len, d);
    let mut dk = Matrix::zeros(len, d);
    let mut dv = Matrix::zeros(len, d);
    for head in 0..heads {
        let probs = &acts.probs[head];
        for t in 0..len {
            let dctx_h = &dctx.row(t)[head * hd..(head + 1) * hd];
            // dP[j] = dctx · v_j ; softmax backward; dS -> dq, dk.
            let mut dp = vec![0.0f64; t + 1];
            let mut dot_dp_p = 0.0f64;
            for (j, dpj) in dp.iter_mut().enumerate() {
                let vs = &acts.v.row(j)[head * hd..(head + 1) * hd];
                let mut acc = 0.0f64;
                for (a, b) in dctx_h.iter().zip(vs) {
                    acc += *a as f64 * *b as f64;
                }
                *dpj = acc;
                dot_dp_p += acc * probs[t * len + j];
            }
            for j in 0..=t {
                let p = probs[t * len + j];
                let ds = p * (dp[j] - dot_dp_p) * scale;
                if ds != 0.0 {
                    let ks = &acts.k.row(j)[head * hd..(head + 1) * hd];
                    let qs = &acts.q.row(t)[head * hd..(head + 1) * hd];
                    let dq_h = &mut dq.row_mut(t)[head * hd..(head + 1) * hd];
                    for (o, &kx) in dq_h.iter_mut().zip(ks) {
                        *o += (ds * kx as f64) as f32;
                    }
                    let dk_h = &mut dk.row_mut(j)[head * hd..(head + 1) * hd];
                    for (o, &qx) in dk_h.iter_mut().zip(qs) {
                        *o += (ds * qx as f64) as f32;
                    }
                }
                // dv_j += p * dctx
                let dv_h = &mut dv.row_mut(j)[head * hd..(head + 1) * hd];
                for (o, &cx) in dv_h.iter_mut().zip(dctx_h) {
                    *o += (p * cx as f64) as f32;
                }
            }
        }
    }
    // Undo the rotary rotation (orthogonal, so transpose = inverse).
    for t in 0..len {
        apply_rotary_inverse(dq.row_mut(t), positions[t], heads, hd);
        apply_rotary_inverse(dk.row_mut(t), positions[t], heads, hd);
    }
    add_at_b(&acts.n1, &dq, &mut grads.wq);
    add_at_b(&acts.n1, &dk, &mut grads.wk);
    add_at_b(&acts.n1, &dv, &mut grads.wv);
    let mut dn1 = matmul_bt(&dq, &lw.wq);
    let dn1_k = matmul_bt(&dk, &lw.wk);
    let dn1_v = matmul_bt(&dv, &lw.wv);
    for ((a, b), c) in dn1.data.iter_mut().zip(&dn1_k.data).zip(&dn1_v.data) {
        *a += b + c;
    }
    let mut dx = rmsnorm_rows_bwd(
        &dn1,
        &acts.x_in,
        &lw.attn_norm,
        &acts.inv_rms_a,
        Some(&mut grads.attn_norm),
    );
    for (x, b) in dx.data.iter_mut().zip(&db.data) {
        *x += b;
    }
    dx
}

/// Rotation by `-pos`, the inverse of `apply_rotary`.
pub fn apply_rotary_inverse(vec: &mut [f32], pos: usize, heads: usize, head_dim: usize) {
    let half = head_dim / 2;
    for head in 0..heads {
        let base = head * head_dim;
        for i in 0..half {
            let theta = pos as f64
                * (crate::model::ROPE_BASE as f64).powf(-2.0 * i as f64 / head_dim as f64);
            let (sin, cos) = theta.sin_cos();
            let a = vec[base + 2 * i] as f64;
            let b = vec[base + 2 * i + 1] as f64;
            vec[base + 2 * i] = (a * cos + b * sin) as f32;
            vec[base + 2 * i + 1] = (-a * sin + b * cos) as f32;
        }
    }
}

#[inline]
fn silu_grad(x: f32) -> f32 {
    let s = 1.0 / (1.0 + (-x as f64).exp());
    (s * (1.0 + x as f64 * (1.0 - s))) as f32
}

/// `grad += a^T b` without materializing the transpose.
pub fn add_at_b(a: &Matrix, b: &Matrix, grad: &mut Matrix) {
    debug_assert_eq!(a.rows, b.rows);
    debug_assert_eq!(grad.rows, a.cols);
    debug_assert_eq!(grad.cols, b.cols);
    for r in 0..a.rows {
        let arow = a.row(r);
        let brow = b.row(r);
        for (i, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let out = grad.row_mut(i);
            for (o, &bv) in out.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `a @ b^T`.
pub fn matmul_bt(a: &Matrix, b: &Matrix) -> Matrix {
    debug_assert_eq!(a.cols, b.cols);
    let mut out = Matrix::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        let arow = a.row(i);
        for j in 0..b.rows {
            let brow = b.row(j);
            let mut acc = 0.0f64;
            for (x, y) in arow.iter().zip(brow) {
                acc += *x as f64 * *y as f64;
            }
            out.row_mut(i)[j] = acc as f32;
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Head and losses
// ---------------------------------------------------------------------------

pub struct HeadActs {
    pub x: Matrix,
    pub nf: Matrix,
    pub inv_rms: Vec<f32>,
}

pub fn head_forward(final_norm: &[f32], head: &Matrix, x: &Matrix) -> (Matrix, HeadActs) {
    let (nf, inv_rms) = rmsnorm_rows(x, final_norm);
    let logits = matmul(&nf, head).expect("dims fixed");
    (logits, HeadActs { x: x.clone(), nf, inv_rms })
}

/// Backward through the head; `trainable` receives (dhead, dfinal_norm) when
/// the head is part of the trained parameters.
pub fn head_backward(
    dlogits: &Matrix,
    acts: &HeadActs,
    final_norm: &[f32],
    head: &Matrix,
    trainable: Option<(&mut Matrix, &mut [f32])>,
) -> Matrix {
    let dnf = matmul_bt(dlogits, head);
    match trainable {
        Some((dhead, dnorm)) => {
            add_at_b(&acts.nf, dlogits, dhead);
            rmsnorm_rows_bwd(&dnf, &acts.x, final_norm, &acts.inv_rms, Some(dnorm))
        }
        None => rmsnorm_rows_bwd(&dnf, &acts.x, final_norm, &acts.inv_rms, None),
    }
}

/// Weighted cross-entropy against hard labels: each entry is
/// `(row, label, weight)` and the loss is the weight-normalized mean.
/// Returns (loss, dlogits).
pub fn ce_hard(logits: &Matrix, labels: &[(usize, u32, f32)]) -> (f64, Matrix) {
    let mut dlogits = Matrix::zeros(logits.rows, logits.cols);
    let total_w: f64 = labels.iter().map(|&(_, _, w)| w as f64).sum();
    if labels.is_empty() || total_w <= 0.0 {
        return (0.0, dlogits);
    }
    let mut loss = 0.0f64;
    for &(row, label, weight) in labels {
        let w = weight as f64 / total_w;
        let lrow = logits.row(row);
        let max = lrow.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
        let mut sum = 0.0f64;
        for &x in lrow {
            sum += (x as f64 - max).exp();
        }
        let logsum = sum.ln() + max;
        loss += w * (logsum - lrow[label as usize] as f64);
        let drow = dlogits.row_mut(row);
        for (j, (&x, o)) in lrow.iter().zip(drow.iter_mut()).enumerate() {
            let p = (x as f64 - max).exp() / sum * w;
            *o += (p - if j == label as usize { w } else { 0.0 }) as f32;
        }
    }
    (loss, dlogits)
}

/// Cross-entropy against teacher distributions, mean over rows.
pub fn ce_soft(logits: &Matrix, teacher: &Matrix) -> (f64, Matrix) {
    debug_assert_eq!(logits.rows, teacher.rows);
    debug_assert_eq!(logits.cols, teacher.cols);
    let n = logits.rows.max(1) as f64;
    let mut loss = 0.0f64;
    let mut dlogits = Matrix::zeros(logits.rows, logits.cols);
    for row in 0..logits.rows {
        let lrow = logits.row(row);
        let trow = teacher.row(row);
        let max = lrow.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
        let mut sum = 0.0f64;
        for &x in lrow {
            sum += (x as f64 - max).exp();
        }
        let logsum = sum.ln() + max;
        let mut row_loss = 0.0f64;
        let drow = dlogits.row_mut(row);
        for ((&x, &p_t), o) in lrow.iter().zip(trow).zip(drow.iter_mut()) {
            let logp = x as f64 - logsum;
            row_loss -= p_t as f64 * logp;
            let p = (x as f64 - max).exp() / sum;
            *o = ((p - p_t as f64) / n) as f32;
        }
        loss += row_loss;
    }
    (loss / n, dlogits)
}

/// Smooth-L1 (transition at 1), mean over all elements.
pub fn smooth_l1(pred: &Matrix, target: &Matrix) -> (f64, Matrix) {
    debug_assert_eq!(pred.rows, target.rows);
    debug_assert_eq!(pred.cols, target.cols);
    let count = pred.data.len().max(1) as f64;
    let mut loss = 0.0f64;
    let mut dpred = Matrix::zeros(pred.rows, pred.cols);
    for ((&p, &t), o) in pred.data.iter().zip(&target.data).zip(dpred.data.iter_mut()) {
        let e = p as f64 - t as f64;
        if e.abs() < 1.0 {
            loss += 0.5 * e * e;
            *o = (e / count) as f32;
        } else {
            loss += e.abs() - 0.5;
            *o = (e.signum() / count) as f32;
        }
    }
    (loss / count, dpred)
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

/// Adam with bias correction; one (m, v) state pair per registered tensor,
/// matched by registration order.
pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    t: u64,
    states: Vec<(Vec<f32>, Vec<f32>)>,
}

impl Adam {
    pub fn new(lr: f32) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, states: Vec::new() }
    }

    /// Advance the step counter; call once before updating all tensors.
    pub fn begin_step(&mut self) {
        self.t += 1;
    }

    pub fn update(&mut self, tensor_idx: usize, param: &mut [f32], grad: &[f32]) {
        if self.states.len() <= tensor_idx {
            self.states.resize_with(tensor_idx + 1, || (Vec::new(), Vec::new()));
        }
        let (m, v) = &mut self.states[tensor_idx];
        if m.is_empty() {
            m.resize(param.len(), 0.0);
            v.resize(param.len(), 0.0);
        }
        let b1 = self.beta1;
        let b2 = self.beta2;
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        for ((p, &g), (mi, vi)) in
            param.iter_mut().zip(grad).zip(m.iter_mut().zip(v.iter_mut()))
        {
            *mi = b1 * *mi + (1.0 - b1) * g;
            *vi = b2 * *vi + (1.0 - b2) * g * g;
            let mhat = *mi / bc1;
            let vhat = *vi / bc2;
            *p -= self.lr * mhat / (vhat.sqrt() + self.eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkernel::Rng;

    #[test]
    fn rmsnorm_rows_backward_matches_finite_differences() {
        let mut rng = Rng::new(3);
        let x = Matrix::randn(3, 5, 0.8, &mut rng);
        let gain: Vec<f32> = (0..5).map(|_| 1.0 + rng.next_gaussian() as f32 * 0.1).collect();
        let dy = Matrix::randn(3, 5, 1.0, &mut rng);
        let (_, inv_rms) = rmsnorm_rows(&x, &gain);
        let mut dgain = vec![0.0f32; 5];
        let dx = rmsnorm_rows_bwd(&dy, &x, &gain, &inv_rms, Some(&mut dgain));
        // Scalar objective: sum(dy ⊙ rmsnorm(x)).
        let objective = |x: &Matrix, gain: &[f32]| -> f64 {
            let (y, _) = rmsnorm_rows(x, gain);
            y.data.iter().zip(&dy.data).map(|(&a, &b)| a as f64 * b as f64).sum()
        };
        let eps = 1e-3f32;
        for idx in 0..x.data.len() {
            let mut xp = x.clone();
            xp.data[idx] += eps;
            let mut xm = x.clone();
            xm.data[idx] -= eps;
            let fd = (objective(&xp, &gain) - objective(&xm, &gain)) / (2.0 * eps as f64);
            assert!(
                (fd - dx.data[idx] as f64).abs() < 2e-3,
                "dx[{idx}]: fd {fd} vs analytic {}",
                dx.data[idx]
            );
        }
        for idx in 0..gain.len() {
            let mut gp = gain.clone();
            gp[idx] += eps;
            let mut gm = gain.clone();
            gm[idx] -= eps;
            let fd = (objective(&x, &gp) - objective(&x, &gm)) / (2.0 * eps as f64);
            assert!((fd - dgain[idx] as f64).abs() < 2e-3);
        }
    }

    #[test]
    fn ce_hard_gradient_matches_finite_differences() {
        let mut rng = Rng::new(5);
        let logits = Matrix::randn(2, 6, 1.0, &mut rng);
        let labels = vec![(0usize, 2u32, 1.0f32), (1usize, 5u32, 0.5f32)];
        let (_, dlogits) = ce_hard(&logits, &labels);
        let eps = 1e-3f32;
        for idx in 0..logits.data.len() {
            let mut lp = logits.clone();
            lp.data[idx] += eps;
            let mut lm = logits.clone();
            lm.data[idx] -= eps;
            let fd = (ce_hard(&lp, &labels).0 - ce_hard(&lm, &labels).0) / (2.0 * eps as f64);
            assert!((fd - dlogits.data[idx] as f64).abs() < 1e-4);
        }
    }

    #[test]
    fn smooth_l1_gradient_and_values() {
        let pred = Matrix::from_vec(1, 3, vec![0.2, 3.0, -2.0]).unwrap();
        let target = Matrix::from_vec(1, 3, vec![0.0, 0.0, 0.0]).unwrap();
        let (loss, grad) = smooth_l1(&pred, &target);
        let expect = (0.5 * 0.2f64 * 0.2 + (3.0 - 0.5) + (2.0 - 0.5)) / 3.0;
        assert!((loss - expect).abs() < 1e-9);
        assert!((grad.data[0] as f64 - 0.2 / 3.0).abs() < 1e-7);
        assert!((grad.data[1] as f64 - 1.0 / 3.0).abs() < 1e-7);
        assert!((grad.data[2] as f64 + 1.0 / 3.0).abs() < 1e-7);
    }

    #[test]
    fn layer_backward_matches_finite_differences_on_weights() {
        let d = 8usize;
        let heads = 2usize;
        let mut rng = Rng::new(11);
        let lw = LayerWeights {
            attn_norm: vec![1.0; d],
            wq: Matrix::randn(d, d, 0.2, &mut rng),
            wk: Matrix::randn(d, d, 0.2, &mut rng),
            wv: Matrix::randn(d, d, 0.2, &mut rng),
            wo: Matrix::randn(d, d, 0.2, &mut rng),
            mlp_norm: vec![1.0; d],
            w1: Matrix::randn(d, 4 * d, 0.2, &mut rng),
            w2: Matrix::randn(4 * d, d, 0.2, &mut rng),
        };
        let x = Matrix::randn(4, d, 0.7, &mut rng);
        let positions: Vec<usize> = (0..4).collect();
        let dout = Matrix::randn(4, d, 0.5, &mut rng);
        let objective = |lw: &LayerWeights| -> f64 {
            let (out, _) = layer_forward_acts(lw, &x, &positions, heads);
            out.data.iter().zip(&dout.data).map(|(&a, &b)| a as f64 * b as f64).sum()
        };
        let (_, acts) = layer_forward_acts(&lw, &x, &positions, heads);
        let mut grads = LayerGrads::zeros_like(&lw);
        let dx = layer_backward_acts(&lw, &acts, &dout, &positions, heads, &mut grads);
        let eps = 1e-2f32;
        // Spot-check a handful of weight coordinates in each tensor.
        let check = |name: &str,
                         get: &dyn Fn(&LayerWeights) -> &Matrix,
                         get_mut: &dyn Fn(&mut LayerWeights) -> &mut Matrix,
                         g: &Matrix| {
            let len = get(&lw).data.len();
            for probe in 0..6 {
                let idx = (probe * 37 + 11) % len;
                let mut wp = lw.clone();
                get_mut(&mut wp).data[idx] += eps;
                let mut wm = lw.clone();
                get_mut(&mut wm).data[idx] -= eps;
                let fd = (objective(&wp) - objective(&wm)) / (2.0 * eps as f64);
                let an = g.data[idx] as f64;
                assert!(
                    (fd - an).abs() < 3e-3 * (1.0 + fd.abs().max(an.abs())),
                    "{name}[{idx}]: fd {fd} vs analytic {an}"
                );
            }
        };
        check("wq", &|l| &l.wq, &|l| &mut l.wq, &grads.wq);
        check("wk", &|l| &l.wk, &|l| &mut l.wk, &grads.wk);
        check("wv", &|l| &l.wv, &|l| &mut l.wv, &grads.wv);
        check("wo", &|l| &l.wo, &|l| &mut l.wo, &grads.wo);
        check("w1", &|l| &l.w1, &|l| &mut l.w1, &grads.w1);
        check("w2", &|l| &l.w2, &|l| &mut l.w2, &grads.w2);
        // And the input gradient.
        let objective_x = |x: &Matrix| -> f64 {
            let (out, _) = layer_forward_acts(&lw, x, &positions, heads);
            out.data.iter().zip(&dout.data).map(|(&a, &b)| a as f64 * b as f64).sum()
        };
        for probe in 0..6 {
            let idx = (probe * 13 + 3) % x.data.len();
            let mut xp = x.clone();
            xp.data[idx] += eps;
            let mut xm = x.clone();
            xm.data[idx] -= eps;
            let fd = (objective_x(&xp) - objective_x(&xm)) / (2.0 * eps as f64);
            let an = dx.data[idx] as f64;
            assert!((fd - an).abs() < 3e-3 * (1.0 + fd.abs().max(an.abs())));
        }
    }
}
