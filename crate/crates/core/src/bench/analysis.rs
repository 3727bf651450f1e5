//! Diagnostic experiments: layer-wise visual truncation, visual attention
//! flow, information retention curves, and the visual-pruning sweep over the
//! full-visual draft baseline.

use crate::draft::DraftModel;
use crate::error::{Error, Result};
use crate::model::{
    extract_states, AttentionRecord, LayerTrace, Modality, TargetModel, TokenSequence,
};
use crate::numkernel::{cosine_similarity, rmsnorm, vec_matmul, Matrix};
use crate::specdec::{decode, DecodeOptions, DraftInputMode};

use super::task::{gen_workload, grounded_accuracy, Workload, WorkloadData};
use super::BenchConfig;

/// Per-layer series from the diagnostic experiments.
#[derive(Debug, Clone)]
pub struct AnalysisReport {
    /// (truncation layer x, symbol-recall accuracy) for x in 0..=M.
    pub truncation: Vec<(usize, f64)>,
    /// layers x heads grid of visual attention mass at the last instruction
    /// token.
    pub attention: Matrix,
    /// Mean cosine similarity to the level-0 embedding per level, visual rows.
    pub retention_visual: Vec<f64>,
    /// Same for text rows.
    pub retention_text: Vec<f64>,
}

/// Accuracy after masking text-to-visual attention from layer x on, for
/// every x in 0..=M. Runs on untrained targets too (the series is then flat
/// chance noise).
pub fn layer_truncation_experiment(
    target: &TargetModel,
    data: &WorkloadData,
) -> Result<Vec<(usize, f64)>> {
    let mut series = Vec::with_capacity(target.cfg.num_layers + 1);
    for x in 0..=target.cfg.num_layers {
        let acc = grounded_accuracy(target, data, Some(x))?;
        series.push((x, acc));
    }
    Ok(series)
}

/// Visual attention mass received from the last instruction token, per layer
/// and head, averaged over prompts. Captured during the forward pass; the
/// trace-based recompute in [`attention_grid_from_trace`] is the independent
/// cross-check.
pub fn attention_flow_experiment(target: &TargetModel, data: &WorkloadData) -> Result<Matrix> {
    let m = target.cfg.num_layers;
    let heads = target.cfg.num_heads;
    let mut grid = Matrix::zeros(m, heads);
    if data.prompts.is_empty() {
        return Err(Error::InvalidArgument("no prompts".into()));
    }
    for prompt in &data.prompts {
        if prompt.text_len() == 0 {
            return Err(Error::InvalidArgument(
                "attention flow needs a text position to query from".into(),
            ));
        }
        let query_pos = prompt.len() - 1;
        let l_vis = prompt.visual_len();
        let mut record = Some(AttentionRecord { query_pos, probs: Vec::new() });
        target.prefill_opts(prompt, None, &mut record)?;
        let record = record.expect("record populated");
        for (layer, per_head) in record.probs.iter().enumerate() {
            for (head, probs) in per_head.iter().enumerate() {
                // Context rows of a prefill row are 0..=query_pos; the visual
                // block is the leading l_vis of them.
                let mass: f64 = probs[..l_vis].iter().map(|&p| p as f64).sum();
                grid.set(layer, head, grid.get(layer, head) + mass as f32);
            }
        }
    }
    let n = data.prompts.len() as f32;
    for v in grid.data.iter_mut() {
        *v /= n;
    }
    Ok(grid)
}

/// Recompute one query row's attention distribution at `layer` from a trace:
/// projections, rotary and softmax are re-derived from the level
/// `layer` input states rather than captured during the forward pass.
pub fn attention_row_from_trace(
    target: &TargetModel,
    trace: &LayerTrace,
    layer: usize,
    query_pos: usize,
) -> Result<Vec<Vec<f64>>> {
    let lw = &target.layers[layer];
    let heads = target.cfg.num_heads;
    let hd = target.cfg.head_dim();
    let x = &trace.levels[layer];
    let normed_q = rmsnorm(x.row(query_pos), &lw.attn_norm, crate::model::RMS_EPS)?;
    let mut q = vec_matmul(&normed_q, &lw.wq)?;
    crate::model::apply_rotary(&mut q, query_pos, heads, hd);
    let mut keys = Vec::with_capacity(query_pos + 1);
    for j in 0..=query_pos {
        let normed = rmsnorm(x.row(j), &lw.attn_norm, crate::model::RMS_EPS)?;
        let mut k = vec_matmul(&normed, &lw.wk)?;
        crate::model::apply_rotary(&mut k, j, heads, hd);
        keys.push(k);
    }
    let scale = 1.0 / (hd as f64).sqrt();
    let mut out = Vec::with_capacity(heads);
    for head in 0..heads {
        let qs = &q[head * hd..(head + 1) * hd];
        let mut scores = vec![0.0f64; query_pos + 1];
        for (j, s) in scores.iter_mut().enumerate() {
            let ks = &keys[j][head * hd..(head + 1) * hd];
            let mut acc = 0.0f64;
            for (a, b) in qs.iter().zip(ks) {
                acc += *a as f64 * *b as f64;
            }
            *s = acc * scale;
        }
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0f64;
        for s in scores.iter_mut() {
            *s = (*s - max).exp();
            sum += *s;
        }
        for s in scores.iter_mut() {
            *s /= sum;
        }
        out.push(scores);
    }
    Ok(out)
}

/// Trace-based recompute of the full attention-flow grid for one prompt.
pub fn attention_grid_from_trace(
    target: &TargetModel,
    prompt: &TokenSequence,
) -> Result<Matrix> {
    let prefill = target.prefill(prompt)?;
    let query_pos = prompt.len() - 1;
    let l_vis = prompt.visual_len();
    let m = target.cfg.num_layers;
    let heads = target.cfg.num_heads;
    let mut grid = Matrix::zeros(m, heads);
    for layer in 0..m {
        let rows = attention_row_from_trace(target, &prefill.trace, layer, query_pos)?;
        for (head, probs) in rows.iter().enumerate() {
            let mass: f64 = probs[..l_vis].iter().sum();
            grid.set(layer, head, mass as f32);
        }
    }
    Ok(grid)
}

/// Mean cosine similarity between each level's hidden states and the level-0
/// embeddings, split by modality. Level 0 compares states with themselves
/// and is 1 by definition.
pub fn retention_experiment(
    target: &TargetModel,
    data: &WorkloadData,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let m = target.cfg.num_layers;
    let mut vis = vec![0.0f64; m + 1];
    let mut txt = vec![0.0f64; m + 1];
    let mut vis_n = 0usize;
    let mut txt_n = 0usize;
    for prompt in &data.prompts {
        let prefill = target.prefill(prompt)?;
        let base = &prefill.trace.levels[0];
        for level in 0..=m {
            let states = &prefill.trace.levels[level];
            for (t, item) in prompt.items().iter().enumerate() {
                let sim = if level == 0 {
                    1.0
                } else {
                    cosine_similarity(states.row(t), base.row(t))? as f64
                };
                match item.modality() {
                    Modality::Visual => vis[level] += sim,
                    Modality::Text => txt[level] += sim,
                }
            }
        }
        vis_n += prompt.visual_len();
        txt_n += prompt.text_len();
    }
    if vis_n > 0 {
        for v in vis.iter_mut() {
            *v /= vis_n as f64;
        }
    }
    if txt_n > 0 {
        for t in txt.iter_mut() {
            *t /= txt_n as f64;
        }
    }
    Ok((vis, txt))
}

/// All three layer-series experiments over one workload.
pub fn analyze(target: &TargetModel, workload: &Workload) -> Result<AnalysisReport> {
    let data = gen_workload(&target.cfg, workload)?;
    let truncation = layer_truncation_experiment(target, &data)?;
    let attention = attention_flow_experiment(target, &data)?;
    let (retention_visual, retention_text) = retention_experiment(target, &data)?;
    Ok(AnalysisReport { truncation, attention, retention_visual, retention_text })
}

// ---------------------------------------------------------------------------
// Pruning sweep
// ---------------------------------------------------------------------------

/// Which attention signal ranks visual rows for retention.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PruneRanking {
    /// Final-layer attention of the last instruction token.
    LastInstruction,
    /// Final-layer attention averaged over all text positions.
    AllText,
}

#[derive(Debug, Clone)]
pub struct PruneResult {
    pub fraction: f64,
    pub tau: f64,
    pub draft_multiplies_per_call: f64,
}

/// Rank visual rows by the target's final-layer attention mass.
pub fn visual_attention_ranking(
    target: &TargetModel,
    prompt: &TokenSequence,
    ranking: PruneRanking,
) -> Result<Vec<f64>> {
    let l_vis = prompt.visual_len();
    let prefill = target.prefill(prompt)?;
    let layer = target.cfg.num_layers - 1;
    let query_rows: Vec<usize> = match ranking {
        PruneRanking::LastInstruction => vec![prompt.len() - 1],
        PruneRanking::AllText => (l_vis..prompt.len()).collect(),
    };
    let mut scores = vec![0.0f64; l_vis];
    for &qp in &query_rows {
        let rows = attention_row_from_trace(target, &prefill.trace, layer, qp)?;
        for probs in &rows {
            for (s, &p) in scores.iter_mut().zip(&probs[..l_vis]) {
                *s += p;
            }
        }
    }
    Ok(scores)
}

/// For each retention fraction, run the full-visual baseline draft keeping
/// only the top-ranked visual rows, and measure the accepted length.
pub fn pruning_sweep(
    target: &TargetModel,
    draft: &DraftModel,
    workload: &Workload,
    bench: &BenchConfig,
    fractions: &[f64],
    ranking: PruneRanking,
) -> Result<Vec<PruneResult>> {
    let data = gen_workload(&target.cfg, workload)?;
    let stop = data.task.as_ref().map(|t| t.tokens.eos);
    let mut out = Vec::with_capacity(fractions.len());
    for &fraction in fractions {
        if !(0.0..=1.0).contains(&fraction) {
            return Err(Error::InvalidArgument(format!("fraction {fraction} outside [0,1]")));
        }
        let mut generated = 0usize;
        let mut calls = 0usize;
        let mut draft_multiplies = 0u64;
        for (i, prompt) in data.prompts.iter().enumerate() {
            let l_vis = prompt.visual_len();
            let keep_count = ((fraction * l_vis as f64).round() as usize).min(l_vis);
            let keep_rows: Vec<usize> = if keep_count == l_vis {
                (0..l_vis).collect()
            } else {
                let scores = visual_attention_ranking(target, prompt, ranking)?;
                let mut order: Vec<usize> = (0..l_vis).collect();
                order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).expect("finite"));
                let mut kept: Vec<usize> = order.into_iter().take(keep_count).collect();
                kept.sort_unstable();
                kept
            };
            let opts = DecodeOptions {
                tree: bench.tree,
                temperature: bench.temperature,
                max_tokens: bench.max_tokens.unwrap_or(data.references[i].len() + 1).max(1),
                stop_token: stop,
                seed: bench.seed.wrapping_add(i as u64),
                draft_input: DraftInputMode::FullVisual { keep_rows: Some(keep_rows) },
            };
            let result = decode(target, draft, prompt, &opts)?;
            generated += result.stats.generated_tokens;
            calls += result.stats.target_calls;
            draft_multiplies += result.stats.draft_multiplies;
        }
        out.push(PruneResult {
            fraction,
            tau: generated as f64 / calls as f64,
            draft_multiplies_per_call: draft_multiplies as f64 / calls as f64,
        });
    }
    Ok(out)
}

/// Mid-layer/text-state extraction sanity helper used by experiments that
/// need teacher states without the training module.
pub fn states_for_prompt(
    target: &TargetModel,
    prompt: &TokenSequence,
) -> Result<(Matrix, Matrix)> {
    let prefill = target.prefill(prompt)?;
    extract_states(&prefill.trace, prompt, &target.cfg)
}
