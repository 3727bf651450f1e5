//! Multi-pass joint loss for the draft model, with gradients.
//!
//! Pass 1 feeds the draft the mid-layer visual block plus fused text rows
//! built from teacher states. Each later pass rebuilds the text rows from the
//! previous pass's own hidden outputs (shift-aligned, first row anchored at
//! the teacher boundary state) while the visual block is reused unchanged.
//! Every pass pays a token loss against the teacher distributions and a
//! state-regression loss against the teacher's next states; gradients flow
//! through the recursion into earlier passes.

use crate::draft::{DraftModel, FcFuse};
use crate::error::{Error, Result};
use crate::numkernel::Matrix;

use super::grad::{
    add_at_b, ce_soft, head_backward, head_forward, layer_backward_acts, layer_forward_acts,
    matmul_bt, smooth_l1, Adam, HeadActs, LayerActs, LayerGrads,
};
use super::{LossReport, TrainExample};

#[derive(Debug, Clone)]
pub struct DraftGrads {
    pub fc_w: Matrix,
    pub fc_b: Vec<f32>,
    pub layer: LayerGrads,
}

impl DraftGrads {
    pub fn zeros_like(draft: &DraftModel) -> Self {
        Self {
            fc_w: Matrix::zeros(draft.fc.w.rows, draft.fc.w.cols),
            fc_b: vec![0.0; draft.fc.b.len()],
            layer: LayerGrads::zeros_like(&draft.layer),
        }
    }
}

/// Apply `f` to every trainable draft tensor paired with its grad, in a
/// fixed registration order. Embeddings, final norm and head stay frozen.
pub fn for_each_draft_tensor(
    draft: &mut DraftModel,
    grads: &DraftGrads,
    f: &mut impl FnMut(&mut [f32], &[f32]),
) {
    f(&mut draft.fc.w.data, &grads.fc_w.data);
    f(&mut draft.fc.b, &grads.fc_b);
    f(&mut draft.layer.attn_norm, &grads.layer.attn_norm);
    f(&mut draft.layer.wq.data, &grads.layer.wq.data);
    f(&mut draft.layer.wk.data, &grads.layer.wk.data);
    f(&mut draft.layer.wv.data, &grads.layer.wv.data);
    f(&mut draft.layer.wo.data, &grads.layer.wo.data);
    f(&mut draft.layer.mlp_norm, &grads.layer.mlp_norm);
    f(&mut draft.layer.w1.data, &grads.layer.w1.data);
    f(&mut draft.layer.w2.data, &grads.layer.w2.data);
}

pub fn adam_step_draft(adam: &mut Adam, draft: &mut DraftModel, grads: &DraftGrads) {
    adam.begin_step();
    let mut idx = 0usize;
    for_each_draft_tensor(draft, grads, &mut |param, grad| {
        adam.update(idx, param, grad);
        idx += 1;
    });
}

struct PassActs {
    cat: Matrix,
    layer: LayerActs,
    head: HeadActs,
    hidden_txt: Matrix,
    dlogits: Matrix,
    dstate: Matrix,
}

/// Forward all passes, optionally backward. Returns the per-pass losses and,
/// when `grads` is given, accumulates parameter gradients (scaled by
/// `grad_scale`).
pub fn mtp_forward_backward(
    example: &TrainExample,
    draft: &DraftModel,
    alpha: f32,
    beta: f32,
    passes: usize,
    grads: Option<(&mut DraftGrads, f32)>,
) -> Result<LossReport> {
    if passes < 1 {
        return Err(Error::InvalidArgument("mtp needs at least one pass".into()));
    }
    example.validate(draft.cfg.hidden_dim, draft.cfg.vocab_size)?;
    let l_vis = example.h_vis_mid.rows;
    let l_txt = example.e_txt.rows;
    if l_txt == 0 {
        return Err(Error::EmptySequence);
    }
    let d = draft.cfg.hidden_dim;
    let heads = draft.cfg.num_heads;
    let positions: Vec<usize> = (0..l_vis + l_txt).collect();

    let mut pass_acts: Vec<PassActs> = Vec::with_capacity(passes);
    let mut token_losses = Vec::with_capacity(passes);
    let mut state_losses = Vec::with_capacity(passes);
    let mut prev_hidden_txt: Option<Matrix> = None;

    for _pass in 0..passes {
        // Shift-aligned hidden source: teacher states on the first pass, the
        // previous pass's own outputs afterwards (row 0 stays anchored at the
        // teacher boundary state).
        let h_src = match &prev_hidden_txt {
            None => example.h_txt_prev.clone(),
            Some(prev) => {
                let mut shifted = Matrix::zeros(l_txt, d);
                shifted.row_mut(0).copy_from_slice(example.h_txt_prev.row(0));
                for i in 1..l_txt {
                    shifted.row_mut(i).copy_from_slice(prev.row(i - 1));
                }
                shifted
            }
        };
        // cat = (embedding, hidden) per text row; z = cat @ W + b.
        let mut cat = Matrix::zeros(l_txt, 2 * d);
        for i in 0..l_txt {
            cat.row_mut(i)[..d].copy_from_slice(example.e_txt.row(i));
            cat.row_mut(i)[d..].copy_from_slice(h_src.row(i));
        }
        let z = fc_forward(&cat, &draft.fc);
        let mut x = Matrix::zeros(l_vis + l_txt, d);
        for t in 0..l_vis {
            x.row_mut(t).copy_from_slice(example.h_vis_mid.row(t));
        }
        for i in 0..l_txt {
            x.row_mut(l_vis + i).copy_from_slice(z.row(i));
        }
        let (hidden, layer_acts) = layer_forward_acts(&draft.layer, &x, &positions, heads);
        let mut hidden_txt = Matrix::zeros(l_txt, d);
        for i in 0..l_txt {
            hidden_txt.row_mut(i).copy_from_slice(hidden.row(l_vis + i));
        }
        let (logits, head_acts) = head_forward(&draft.final_norm, &draft.head, &hidden_txt);
        let (t_loss, dlogits) = ce_soft(&logits, &example.teacher_dists);
        let (s_loss, dstate) = smooth_l1(&hidden_txt, &example.teacher_next);
        token_losses.push(t_loss);
        state_losses.push(s_loss);
        prev_hidden_txt = Some(hidden_txt.clone());
        pass_acts.push(PassActs { cat, layer: layer_acts, head: head_acts, hidden_txt, dlogits, dstate });
    }

    let report = LossReport::new(
        token_losses[0],
        state_losses[0],
        token_losses[1..].iter().sum(),
        state_losses[1..].iter().sum(),
        alpha,
        beta,
    );
    if !report.total.is_finite() {
        return Err(Error::Divergence(format!("mtp loss {}", report.total)));
    }

    let Some((grads, grad_scale)) = grads else {
        return Ok(report);
    };

    // Backward, last pass first; `carry` holds the gradient flowing into the
    // previous pass's text hidden rows through the recursive fusion.
    let mut carry: Option<Matrix> = None;
    for pass_idx in (0..passes).rev() {
        let acts = &pass_acts[pass_idx];
        let scale = grad_scale;
        // d hidden_txt = alpha * head path + beta * state path + carry.
        let mut dlogits = acts.dlogits.clone();
        for v in dlogits.data.iter_mut() {
            *v *= alpha * scale;
        }
        let mut dhidden_txt =
            head_backward(&dlogits, &acts.head, &draft.final_norm, &draft.head, None);
        for (o, &s) in dhidden_txt.data.iter_mut().zip(&acts.dstate.data) {
            *o += beta * scale * s;
        }
        if let Some(c) = carry.take() {
            for (o, &cv) in dhidden_txt.data.iter_mut().zip(&c.data) {
                *o += cv;
            }
        }
        // Layer backward needs the full-row gradient; visual rows get none.
        let mut dhidden = Matrix::zeros(l_vis + l_txt, d);
        for i in 0..l_txt {
            dhidden.row_mut(l_vis + i).copy_from_slice(dhidden_txt.row(i));
        }
        let dx = layer_backward_acts(
            &draft.layer,
            &acts.layer,
            &dhidden,
            &positions,
            heads,
            &mut grads.layer,
        );
        // Split off the fused text rows and run the FC backward.
        let mut dz = Matrix::zeros(l_txt, d);
        for i in 0..l_txt {
            dz.row_mut(i).copy_from_slice(dx.row(l_vis + i));
        }
        add_at_b(&acts.cat, &dz, &mut grads.fc_w);
        for i in 0..l_txt {
            for (b, &g) in grads.fc_b.iter_mut().zip(dz.row(i)) {
                *b += g;
            }
        }
        let dcat = matmul_bt(&dz, &draft.fc.w);
        if pass_idx > 0 {
            // The hidden half of cat rows 1.. came from the previous pass's
            // text hidden rows 0..l_txt-1.
            let mut c = Matrix::zeros(l_txt, d);
            for i in 1..l_txt {
                c.row_mut(i - 1).copy_from_slice(&dcat.row(i)[d..]);
            }
            carry = Some(c);
        }
        let _ = &acts.hidden_txt;
    }
    Ok(report)
}

fn fc_forward(cat: &Matrix, fc: &FcFuse) -> Matrix {
    let mut z = crate::numkernel::matmul(cat, &fc.w).expect("dims fixed");
    for i in 0..z.rows {
        for (o, &b) in z.row_mut(i).iter_mut().zip(&fc.b) {
            *o += b;
        }
    }
    z
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::draft::DraftMode;
    use crate::model::TargetModel;
    use crate::numkernel::Rng;
    use crate::testutil::tiny_cfg;

    fn tiny_example(d: usize, v: usize, l_vis: usize, l_txt: usize, seed: u64) -> TrainExample {
        let mut rng = Rng::new(seed);
        let mut dists = Matrix::zeros(l_txt, v);
        for i in 0..l_txt {
            let logits: Vec<f32> = (0..v).map(|_| rng.next_gaussian() as f32).collect();
            let p = crate::numkernel::softmax(&logits, 1.0).unwrap();
            for (o, &x) in dists.row_mut(i).iter_mut().zip(&p) {
                *o = x as f32;
            }
        }
        TrainExample {
            h_vis_mid: Matrix::randn(l_vis, d, 0.5, &mut rng),
            e_txt: Matrix::randn(l_txt, d, 0.5, &mut rng),
            h_txt_prev: Matrix::randn(l_txt, d, 0.5, &mut rng),
            teacher_dists: dists,
            teacher_next: Matrix::randn(l_txt, d, 0.5, &mut rng),
            text_tokens: (0..l_txt as u32).collect(),
        }
    }

    fn tiny_draft(seed: u64) -> DraftModel {
        let mut rng = Rng::new(seed);
        let target = TargetModel::init(tiny_cfg(), &mut rng).unwrap();
        DraftModel::init(&target, DraftMode::TrainingFullCausal, &mut rng).unwrap()
    }

    #[test]
    fn loss_report_identity_holds() {
        let draft = tiny_draft(3);
        let ex = tiny_example(16, 24, 2, 4, 5);
        let report = mtp_forward_backward(&ex, &draft, 1.0, 1.0, 2, None).unwrap();
        let expect = report.pass1_token_loss + report.pass2_token_loss + report.pass1_state_loss
            + report.pass2_state_loss;
        assert!((report.total - expect).abs() < 1e-12);
        let weighted = mtp_forward_backward(&ex, &draft, 2.0, 0.5, 2, None).unwrap();
        let expect = 2.0 * (weighted.pass1_token_loss + weighted.pass2_token_loss)
            + 0.5 * (weighted.pass1_state_loss + weighted.pass2_state_loss);
        assert!((weighted.total - expect).abs() < 1e-12);
    }

    #[test]
    fn pass_two_depends_on_pass_one_outputs() {
        // A single-pass loss differs from the second pass's: the recursion
        // actually re-enters the layer with pass-1 outputs.
        let draft = tiny_draft(7);
        let ex = tiny_example(16, 24, 2, 4, 9);
        let two = mtp_forward_backward(&ex, &draft, 1.0, 1.0, 2, None).unwrap();
        assert!(two.pass2_token_loss > 0.0);
        assert!((two.pass2_token_loss - two.pass1_token_loss).abs() > 1e-9);
    }

    #[test]
    fn fc_gradient_matches_finite_differences_d8() {
        // d=8 instance per the gradient-correctness contract: analytic FC
        // gradient of the joint loss vs central finite differences.
        let cfg = crate::model::ModelConfig {
            num_layers: 4,
            hidden_dim: 8,
            num_heads: 2,
            vocab_size: 12,
            max_positions: 64,
            visual_alphabet: 4,
        };
        let mut rng = Rng::new(11);
        let target = TargetModel::init(cfg, &mut rng).unwrap();
        let draft = DraftModel::init(&target, DraftMode::TrainingFullCausal, &mut rng).unwrap();
        let ex = tiny_example(8, 12, 3, 4, 13);
        let mut grads = DraftGrads::zeros_like(&draft);
        mtp_forward_backward(&ex, &draft, 1.0, 1.0, 2, Some((&mut grads, 1.0))).unwrap();
        let loss_of = |dr: &DraftModel| -> f64 {
            mtp_forward_backward(&ex, dr, 1.0, 1.0, 2, None).unwrap().total
        };
        let eps = 5e-3f32;
        let mut num = Vec::new();
        let mut ana = Vec::new();
        for idx in 0..draft.fc.w.data.len() {
            let mut dp = draft.clone();
            dp.fc.w.data[idx] += eps;
            let mut dm = draft.clone();
            dm.fc.w.data[idx] -= eps;
            let fd = (loss_of(&dp) - loss_of(&dm)) / (2.0 * eps as f64);
            num.push(fd);
            ana.push(grads.fc_w.data[idx] as f64);
        }
        let norm_n: f64 = num.iter().map(|x| x * x).sum::<f64>().sqrt();
        let norm_a: f64 = ana.iter().map(|x| x * x).sum::<f64>().sqrt();
        let diff: f64 =
            num.iter().zip(&ana).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        let rel = diff / norm_n.max(norm_a).max(1e-12);
        assert!(rel < 1e-3, "fc gradient relative error {rel}");
    }

    #[test]
    fn oracle_outputs_zero_state_loss_and_entropy_token_loss() {
        // Feeding the loss helpers teacher-perfect predictions pins the
        // lower bounds: zero state loss, token loss = teacher entropy.
        let ex = tiny_example(16, 24, 0, 3, 21);
        let (s_loss, _) = smooth_l1(&ex.teacher_next, &ex.teacher_next);
        assert_eq!(s_loss, 0.0);
        // Logits that reproduce the teacher distribution exactly.
        let mut logits = Matrix::zeros(3, 24);
        for i in 0..3 {
            for (o, &p) in logits.row_mut(i).iter_mut().zip(ex.teacher_dists.row(i)) {
                *o = (p as f64).max(1e-30).ln() as f32;
            }
        }
        let (t_loss, _) = ce_soft(&logits, &ex.teacher_dists);
        let entropy: f64 = (0..3)
            .map(|i| {
                ex.teacher_dists
                    .row(i)
                    .iter()
                    .filter(|&&p| p > 0.0)
                    .map(|&p| -(p as f64) * (p as f64).ln())
                    .sum::<f64>()
            })
            .sum::<f64>()
            / 3.0;
        assert!((t_loss - entropy).abs() < 1e-5);
    }
}
