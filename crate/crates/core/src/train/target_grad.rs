//! Training-side forward and backward for the target transformer.

use crate::error::{Error, Result};
use crate::model::{Item, TargetModel, TokenSequence};
use crate::numkernel::Matrix;

use super::grad::{
    head_backward, head_forward, layer_backward_acts, layer_forward_acts, HeadActs, LayerActs,
    LayerGrads,
};

pub struct TargetActs {
    positions: Vec<usize>,
    layer_acts: Vec<LayerActs>,
    head_acts: HeadActs,
}

#[derive(Debug, Clone)]
pub struct TargetGrads {
    pub embed: Matrix,
    pub layers: Vec<LayerGrads>,
    pub final_norm: Vec<f32>,
    pub head: Matrix,
}

impl TargetGrads {
    pub fn zeros_like(model: &TargetModel) -> Self {
        Self {
            embed: Matrix::zeros(model.embed.rows, model.embed.cols),
            layers: model.layers.iter().map(LayerGrads::zeros_like).collect(),
            final_norm: vec![0.0; model.final_norm.len()],
            head: Matrix::zeros(model.head.rows, model.head.cols),
        }
    }
}

/// Full-sequence training forward; keeps every layer's activations.
pub fn target_forward_train(
    model: &TargetModel,
    seq: &TokenSequence,
) -> Result<(Matrix, TargetActs)> {
    if seq.is_empty() {
        return Err(Error::EmptySequence);
    }
    seq.validate(&model.cfg)?;
    let len = seq.len();
    let d = model.cfg.hidden_dim;
    let mut x0 = Matrix::zeros(len, d);
    for (t, item) in seq.items().iter().enumerate() {
        x0.row_mut(t).copy_from_slice(&model.embed_item(item));
    }
    let positions: Vec<usize> = (0..len).collect();
    let mut layer_acts = Vec::with_capacity(model.cfg.num_layers);
    let mut x = x0;
    for lw in &model.layers {
        let (out, acts) = layer_forward_acts(lw, &x, &positions, model.cfg.num_heads);
        layer_acts.push(acts);
        x = out;
    }
    let (logits, head_acts) = head_forward(&model.final_norm, &model.head, &x);
    Ok((logits, TargetActs { positions, layer_acts, head_acts }))
}

/// Rows of the training sequence that carry next-token supervision, paired
/// with their labels and unit weights: every position whose successor is a
/// text token.
pub fn supervised_rows(seq: &TokenSequence) -> Vec<(usize, u32, f32)> {
    let mut rows = Vec::new();
    let items = seq.items();
    for t in 0..items.len().saturating_sub(1) {
        if let Item::Text { token_id } = items[t + 1] {
            rows.push((t, token_id, 1.0));
        }
    }
    rows
}

/// Backward from `dlogits`; accumulates into `grads`. Visual embedding rows
/// come from the sequence itself and receive no gradient.
pub fn target_backward(
    model: &TargetModel,
    seq: &TokenSequence,
    acts: &TargetActs,
    dlogits: &Matrix,
    grads: &mut TargetGrads,
) {
    let dx_final = head_backward(
        dlogits,
        &acts.head_acts,
        &model.final_norm,
        &model.head,
        Some((&mut grads.head, &mut grads.final_norm)),
    );
    let mut dx = dx_final;
    for (lw, (la, lg)) in model
        .layers
        .iter()
        .zip(acts.layer_acts.iter().zip(grads.layers.iter_mut()))
        .rev()
    {
        dx = layer_backward_acts(lw, la, &dx, &acts.positions, model.cfg.num_heads, lg);
    }
    for (t, item) in seq.items().iter().enumerate() {
        if let Item::Text { token_id } = item {
            let grow = grads.embed.row_mut(*token_id as usize);
            for (g, &v) in grow.iter_mut().zip(dx.row(t)) {
                *g += v;
            }
        }
    }
}

/// Apply `f` to every trainable tensor of the target paired with its grad,
/// in a fixed registration order.
pub fn for_each_target_tensor(
    model: &mut TargetModel,
    grads: &TargetGrads,
    f: &mut impl FnMut(&mut [f32], &[f32]),
) {
    f(&mut model.embed.data, &grads.embed.data);
    for (lw, lg) in model.layers.iter_mut().zip(&grads.layers) {
        f(&mut lw.attn_norm, &lg.attn_norm);
        f(&mut lw.wq.data, &lg.wq.data);
        f(&mut lw.wk.data, &lg.wk.data);
        f(&mut lw.wv.data, &lg.wv.data);
        f(&mut lw.wo.data, &lg.wo.data);
        f(&mut lw.mlp_norm, &lg.mlp_norm);
        f(&mut lw.w1.data, &lg.w1.data);
        f(&mut lw.w2.data, &lg.w2.data);
    }
    f(&mut model.final_norm, &grads.final_norm);
    f(&mut model.head.data, &grads.head.data);
}
