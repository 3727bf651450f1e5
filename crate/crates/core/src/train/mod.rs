//! Training pipelines: target pretraining on the synthetic grounded task and
//! two-stage draft training (text-only, then multimodal) with the recursive
//! multi-pass joint loss.

pub mod draft_grad;
pub mod grad;
pub mod target_grad;

use serde::{Deserialize, Serialize};

use crate::draft::{DraftMode, DraftModel};
use crate::error::{Error, Result};
use crate::model::{extract_states, ModelConfig, TargetModel, TokenSequence};
use crate::numkernel::{Matrix, Rng};

pub use draft_grad::{adam_step_draft, mtp_forward_backward, DraftGrads};
pub use grad::Adam;
pub use target_grad::{
    for_each_target_tensor, supervised_rows, target_backward, target_forward_train, TargetGrads,
};

// ---------------------------------------------------------------------------
// Configuration and data types
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainStage {
    TextOnly,
    Multimodal,
}

impl std::fmt::Display for TrainStage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TrainStage::TextOnly => write!(f, "text_only"),
            TrainStage::Multimodal => write!(f, "multimodal"),
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f32,
    pub batch_size: usize,
    pub epochs: usize,
    /// Token-loss weight.
    pub alpha: f32,
    /// State-regression weight.
    pub beta: f32,
    pub seed: u64,
    pub stage: TrainStage,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !(self.alpha > 0.0) || !(self.beta > 0.0) {
            return Err(Error::InvalidArgument(
                "learning rate and loss weights must be positive".into(),
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be at least 1".into()));
        }
        Ok(())
    }
}

/// One draft-training example distilled from a target forward pass.
///
/// `h_txt_prev` is shift-aligned: row `i` holds the target's penultimate
/// state at the position preceding text token `i`. `teacher_dists` row `i`
/// scores the token at text position `i+1`; `teacher_next` row `i` is the
/// penultimate state at text position `i` (the draft's regression target).
#[derive(Debug, Clone)]
pub struct TrainExample {
    pub h_vis_mid: Matrix,
    pub e_txt: Matrix,
    pub h_txt_prev: Matrix,
    pub teacher_dists: Matrix,
    pub teacher_next: Matrix,
    pub text_tokens: Vec<u32>,
}

impl TrainExample {
    pub fn validate(&self, d: usize, vocab: usize) -> Result<()> {
        let l_txt = self.e_txt.rows;
        if self.h_txt_prev.rows != l_txt
            || self.teacher_dists.rows != l_txt
            || self.teacher_next.rows != l_txt
            || self.text_tokens.len() != l_txt
        {
            return Err(Error::DimMismatch("train example rows misaligned".into()));
        }
        if (l_txt > 0 && (self.e_txt.cols != d || self.teacher_dists.cols != vocab))
            || (self.h_vis_mid.rows > 0 && self.h_vis_mid.cols != d)
        {
            return Err(Error::DimMismatch("train example widths".into()));
        }
        for i in 0..l_txt {
            let sum: f64 = self.teacher_dists.row(i).iter().map(|&p| p as f64).sum();
            if (sum - 1.0).abs() > 1e-4 {
                return Err(Error::InvalidDistribution(format!(
                    "teacher row {i} sums to {sum}"
                )));
            }
        }
        Ok(())
    }
}

/// Per-pass loss decomposition; `total = alpha*(token) + beta*(state)` with
/// passes beyond the first folded into the `pass2` fields.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossReport {
    pub pass1_token_loss: f64,
    pub pass1_state_loss: f64,
    pub pass2_token_loss: f64,
    pub pass2_state_loss: f64,
    pub total: f64,
}

impl LossReport {
    pub fn new(p1t: f64, p1s: f64, p2t: f64, p2s: f64, alpha: f32, beta: f32) -> Self {
        Self {
            pass1_token_loss: p1t,
            pass1_state_loss: p1s,
            pass2_token_loss: p2t,
            pass2_state_loss: p2s,
            total: alpha as f64 * (p1t + p2t) + beta as f64 * (p1s + p2s),
        }
    }
}

/// JSON-lines training log record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainLogRecord {
    pub stage: String,
    pub epoch: usize,
    pub step: usize,
    pub pass1_token: f64,
    pub pass1_state: f64,
    pub pass2_token: f64,
    pub pass2_state: f64,
    pub total: f64,
}

// ---------------------------------------------------------------------------
// Teacher tracing
// ---------------------------------------------------------------------------

/// Distill draft-training examples from target forward passes.
pub fn teacher_trace(
    seqs: &[TokenSequence],
    target: &TargetModel,
) -> Result<Vec<TrainExample>> {
    let mut out = Vec::with_capacity(seqs.len());
    let d = target.cfg.hidden_dim;
    for seq in seqs {
        let prefill = target.prefill(seq)?;
        let (h_vis_mid, h_txt_penult) = extract_states(&prefill.trace, seq, &target.cfg)?;
        let l_vis = seq.visual_len();
        let text_tokens = seq.text_tokens();
        let l_txt = text_tokens.len();
        let penult = &prefill.trace.levels[target.cfg.penultimate_level()];
        let mut e_txt = Matrix::zeros(l_txt, d);
        let mut h_prev = Matrix::zeros(l_txt, d);
        let mut dists = Matrix::zeros(l_txt, target.cfg.vocab_size);
        for i in 0..l_txt {
            let abs = l_vis + i;
            e_txt.row_mut(i).copy_from_slice(&target.embed_token(text_tokens[i]));
            if abs > 0 {
                h_prev.row_mut(i).copy_from_slice(penult.row(abs - 1));
            }
            let p = crate::numkernel::softmax(prefill.logits.row(abs), 1.0)?;
            for (o, &x) in dists.row_mut(i).iter_mut().zip(&p) {
                *o = x as f32;
            }
        }
        let example = TrainExample {
            h_vis_mid,
            e_txt,
            h_txt_prev: h_prev,
            teacher_dists: dists,
            teacher_next: h_txt_penult,
            text_tokens,
        };
        example.validate(d, target.cfg.vocab_size)?;
        out.push(example);
    }
    Ok(out)
}

/// Joint multi-pass loss for one example (no gradients).
pub fn mtp_joint_loss(
    example: &TrainExample,
    draft: &DraftModel,
    alpha: f32,
    beta: f32,
    passes: usize,
) -> Result<LossReport> {
    mtp_forward_backward(example, draft, alpha, beta, passes, None)
}

// ---------------------------------------------------------------------------
// Target pretraining
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TargetLogRecord {
    pub step: usize,
    pub loss: f64,
}

/// Train a fresh target on sequences drawn from `gen`, which also supplies
/// the weighted supervision rows (`supervised_rows` gives the plain uniform
/// choice). One optimizer step per `steps`, each over `train.batch_size`
/// generated sequences.
pub fn pretrain_target(
    model_cfg: ModelConfig,
    train: &TrainConfig,
    steps: usize,
    gen: &mut dyn FnMut(&mut Rng) -> (TokenSequence, Vec<(usize, u32, f32)>),
) -> Result<(TargetModel, Vec<TargetLogRecord>)> {
    train.validate()?;
    let mut init_rng = Rng::new(train.seed);
    let mut model = TargetModel::init(model_cfg, &mut init_rng)?;
    let mut data_rng = init_rng.fork(0x6461_7461);
    let mut adam = Adam::new(train.learning_rate);
    let mut log = Vec::with_capacity(steps);
    for step in 0..steps {
        let mut grads = TargetGrads::zeros_like(&model);
        let mut batch_loss = 0.0f64;
        for _ in 0..train.batch_size {
            let (seq, labels) = gen(&mut data_rng);
            let (logits, acts) = target_forward_train(&model, &seq)?;
            let (loss, mut dlogits) = grad::ce_hard(&logits, &labels);
            let scale = 1.0 / train.batch_size as f32;
            for v in dlogits.data.iter_mut() {
                *v *= scale;
            }
            target_backward(&model, &seq, &acts, &dlogits, &mut grads);
            batch_loss += loss / train.batch_size as f64;
        }
        if !batch_loss.is_finite() {
            return Err(Error::Divergence(format!("target loss {batch_loss} at step {step}")));
        }
        adam.begin_step();
        let mut idx = 0usize;
        for_each_target_tensor(&mut model, &grads, &mut |param, grad| {
            adam.update(idx, param, grad);
            idx += 1;
        });
        log.push(TargetLogRecord { step, loss: batch_loss });
    }
    Ok((model, log))
}

// ---------------------------------------------------------------------------
// Draft training
// ---------------------------------------------------------------------------

/// One stage of draft training over fixed examples; appends log records.
pub fn train_draft_stage(
    draft: &mut DraftModel,
    cfg: &TrainConfig,
    data: &[TrainExample],
    mtp_passes: usize,
    adam: &mut Adam,
    log: &mut Vec<TrainLogRecord>,
) -> Result<()> {
    cfg.validate()?;
    if data.is_empty() || cfg.epochs == 0 {
        return Ok(());
    }
    let mut rng = Rng::new(cfg.seed ^ 0x5f37_59df);
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        rng.shuffle(&mut order);
        for chunk in order.chunks(cfg.batch_size) {
            let mut grads = DraftGrads::zeros_like(draft);
            let scale = 1.0 / chunk.len() as f32;
            let mut acc = LossReport::new(0.0, 0.0, 0.0, 0.0, cfg.alpha, cfg.beta);
            for &i in chunk {
                let report = mtp_forward_backward(
                    &data[i],
                    draft,
                    cfg.alpha,
                    cfg.beta,
                    mtp_passes,
                    Some((&mut grads, scale)),
                )?;
                acc.pass1_token_loss += report.pass1_token_loss / chunk.len() as f64;
                acc.pass1_state_loss += report.pass1_state_loss / chunk.len() as f64;
                acc.pass2_token_loss += report.pass2_token_loss / chunk.len() as f64;
                acc.pass2_state_loss += report.pass2_state_loss / chunk.len() as f64;
            }
            let acc = LossReport::new(
                acc.pass1_token_loss,
                acc.pass1_state_loss,
                acc.pass2_token_loss,
                acc.pass2_state_loss,
                cfg.alpha,
                cfg.beta,
            );
            if !acc.total.is_finite() {
                return Err(Error::Divergence(format!("draft loss {} at step {step}", acc.total)));
            }
            adam_step_draft(adam, draft, &grads);
            log.push(TrainLogRecord {
                stage: cfg.stage.to_string(),
                epoch,
                step,
                pass1_token: acc.pass1_token_loss,
                pass1_state: acc.pass1_state_loss,
                pass2_token: acc.pass2_token_loss,
                pass2_state: acc.pass2_state_loss,
                total: acc.total,
            });
            step += 1;
        }
    }
    Ok(())
}

/// Two-stage schedule: text-only examples first, then a direct switch to
/// multimodal examples carrying mid-layer visual blocks.
pub fn train_draft_two_stage(
    target: &TargetModel,
    stage1: &TrainConfig,
    stage2: &TrainConfig,
    mtp_passes: usize,
    stage1_data: &[TrainExample],
    stage2_data: &[TrainExample],
) -> Result<(DraftModel, Vec<TrainLogRecord>)> {
    let mut rng = Rng::new(stage1.seed);
    let mut draft = DraftModel::init(target, DraftMode::InferenceVata, &mut rng)?;
    let mut adam = Adam::new(stage1.learning_rate);
    let mut log = Vec::new();
    train_draft_stage(&mut draft, stage1, stage1_data, mtp_passes, &mut adam, &mut log)?;
    adam.lr = stage2.learning_rate;
    train_draft_stage(&mut draft, stage2, stage2_data, mtp_passes, &mut adam, &mut log)?;
    Ok((draft, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{random_seq, tiny_cfg};

    fn tiny_train_cfg(stage: TrainStage) -> TrainConfig {
        TrainConfig {
            learning_rate: 2e-3,
            batch_size: 4,
            epochs: 1,
            alpha: 1.0,
            beta: 1.0,
            seed: 5,
            stage,
        }
    }

    #[test]
    fn teacher_trace_alignment_and_shapes() {
        let cfg = tiny_cfg();
        let target = TargetModel::init(cfg, &mut Rng::new(3)).unwrap();
        let seq = random_seq(&cfg, 3, 5, 7);
        let examples = teacher_trace(std::slice::from_ref(&seq), &target).unwrap();
        let ex = &examples[0];
        assert_eq!(ex.h_vis_mid.rows, 3);
        assert_eq!(ex.e_txt.rows, 5);
        assert_eq!(ex.teacher_dists.rows, 5);
        assert!(ex.teacher_next.data.iter().all(|v| v.is_finite()));
        // Shift contract: the teacher distribution at row i is the target's
        // next-token distribution at absolute position 3 + i, which scores
        // the token at position 3 + i + 1.
        let prefill = target.prefill(&seq).unwrap();
        let p = crate::numkernel::softmax(prefill.logits.row(3), 1.0).unwrap();
        for (a, &b) in p.iter().zip(ex.teacher_dists.row(0)) {
            assert!((*a as f32 - b).abs() < 1e-6);
        }
        // h_txt_prev row 0 is the penultimate state at the last visual slot.
        let penult = &prefill.trace.levels[cfg.penultimate_level()];
        assert_eq!(ex.h_txt_prev.row(0), penult.row(2));
        // teacher_next row i is the penultimate state at text position i.
        assert_eq!(ex.teacher_next.row(0), penult.row(3));
    }

    #[test]
    fn teacher_trace_text_only_has_empty_visual_block() {
        let cfg = tiny_cfg();
        let target = TargetModel::init(cfg, &mut Rng::new(9)).unwrap();
        let seq = random_seq(&cfg, 0, 6, 11);
        let ex = &teacher_trace(std::slice::from_ref(&seq), &target).unwrap()[0];
        assert_eq!(ex.h_vis_mid.rows, 0);
        assert_eq!(ex.e_txt.rows, 6);
        // First text row has no predecessor: zero boundary state.
        assert!(ex.h_txt_prev.row(0).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pretrain_loss_decreases_on_fixed_batch() {
        // Overfit sanity: repeated steps on one batch strictly decrease the
        // loss over the first 10 steps.
        let cfg = tiny_cfg();
        let train = TrainConfig { batch_size: 2, ..tiny_train_cfg(TrainStage::TextOnly) };
        let seqs: Vec<TokenSequence> = (0..2).map(|i| random_seq(&cfg, 2, 6, 100 + i)).collect();
        let mut model = TargetModel::init(cfg, &mut Rng::new(17)).unwrap();
        let mut adam = Adam::new(train.learning_rate);
        let mut losses = Vec::new();
        for _ in 0..10 {
            let mut grads = TargetGrads::zeros_like(&model);
            let mut loss = 0.0;
            for seq in &seqs {
                let labels = supervised_rows(seq);
                let (logits, acts) = target_forward_train(&model, seq).unwrap();
                let (l, mut dlogits) = grad::ce_hard(&logits, &labels);
                for v in dlogits.data.iter_mut() {
                    *v *= 0.5;
                }
                target_backward(&model, seq, &acts, &dlogits, &mut grads);
                loss += l / 2.0;
            }
            losses.push(loss);
            adam.begin_step();
            let mut idx = 0;
            for_each_target_tensor(&mut model, &grads, &mut |p, g| {
                adam.update(idx, p, g);
                idx += 1;
            });
        }
        for w in losses.windows(2) {
            assert!(w[1] < w[0], "loss did not strictly decrease: {losses:?}");
        }
    }

    #[test]
    fn pretrain_is_seed_deterministic() {
        let cfg = tiny_cfg();
        let train = TrainConfig { batch_size: 2, ..tiny_train_cfg(TrainStage::TextOnly) };
        let run = || {
            let mut gen = |rng: &mut Rng| {
                let seq = random_seq(&cfg, 1, 5, rng.next_u64() % 1000);
                let labels = supervised_rows(&seq);
                (seq, labels)
            };
            pretrain_target(cfg, &train, 3, &mut gen).unwrap()
        };
        let (m1, log1) = run();
        let (m2, log2) = run();
        assert_eq!(m1.embed.data, m2.embed.data);
        assert_eq!(m1.head.data, m2.head.data);
        assert_eq!(log1.len(), log2.len());
        for (a, b) in log1.iter().zip(&log2) {
            assert_eq!(a.loss.to_bits(), b.loss.to_bits());
        }
    }

    #[test]
    fn two_stage_training_runs_and_reduces_smoothed_loss() {
        let cfg = tiny_cfg();
        let target = TargetModel::init(cfg, &mut Rng::new(23)).unwrap();
        let text_seqs: Vec<TokenSequence> =
            (0..12).map(|i| random_seq(&cfg, 0, 8, 300 + i)).collect();
        let mm_seqs: Vec<TokenSequence> =
            (0..12).map(|i| random_seq(&cfg, 3, 8, 400 + i)).collect();
        let s1 = teacher_trace(&text_seqs, &target).unwrap();
        let s2 = teacher_trace(&mm_seqs, &target).unwrap();
        let cfg1 = TrainConfig { epochs: 4, ..tiny_train_cfg(TrainStage::TextOnly) };
        let cfg2 = TrainConfig { epochs: 4, ..tiny_train_cfg(TrainStage::Multimodal) };
        let (_, log) = train_draft_two_stage(&target, &cfg1, &cfg2, 2, &s1, &s2).unwrap();
        assert!(!log.is_empty());
        let stage2: Vec<&TrainLogRecord> =
            log.iter().filter(|r| r.stage == "multimodal").collect();
        assert!(!stage2.is_empty());
        // Smoothed end-vs-start comparison within stage 2.
        let k = (stage2.len() / 3).max(1);
        let head: f64 = stage2[..k].iter().map(|r| r.total).sum::<f64>() / k as f64;
        let tail: f64 =
            stage2[stage2.len() - k..].iter().map(|r| r.total).sum::<f64>() / k as f64;
        assert!(tail < head, "stage-2 loss did not fall: {head} -> {tail}");
        // Stage-1 records exist and carry the right tag.
        assert!(log.iter().any(|r| r.stage == "text_only"));
    }

    #[test]
    fn two_stage_training_is_deterministic() {
        let cfg = tiny_cfg();
        let target = TargetModel::init(cfg, &mut Rng::new(29)).unwrap();
        let seqs: Vec<TokenSequence> = (0..6).map(|i| random_seq(&cfg, 2, 6, 500 + i)).collect();
        let data = teacher_trace(&seqs, &target).unwrap();
        let cfg1 = tiny_train_cfg(TrainStage::TextOnly);
        let cfg2 = tiny_train_cfg(TrainStage::Multimodal);
        let (d1, _) = train_draft_two_stage(&target, &cfg1, &cfg2, 2, &data, &data).unwrap();
        let (d2, _) = train_draft_two_stage(&target, &cfg1, &cfg2, 2, &data, &data).unwrap();
        assert_eq!(d1.fc.w.data, d2.fc.w.data);
        assert_eq!(d1.layer.wq.data, d2.layer.wq.data);
    }

    #[test]
    fn visual_blocks_change_trained_weights() {
        // Training with the mid-layer visual blocks vs zeroed-out blocks must
        // give different final weights on multimodal data.
        let cfg = tiny_cfg();
        let target = TargetModel::init(cfg, &mut Rng::new(31)).unwrap();
        let seqs: Vec<TokenSequence> = (0..8).map(|i| random_seq(&cfg, 3, 6, 600 + i)).collect();
        let data = teacher_trace(&seqs, &target).unwrap();
        let mut zeroed = data.clone();
        for ex in zeroed.iter_mut() {
            ex.h_vis_mid = Matrix::zeros(ex.h_vis_mid.rows, ex.h_vis_mid.cols);
        }
        let cfg2 = TrainConfig { epochs: 2, ..tiny_train_cfg(TrainStage::Multimodal) };
        let empty = TrainConfig { epochs: 0, ..cfg2 };
        let (with_vis, _) =
            train_draft_two_stage(&target, &empty, &cfg2, 2, &[], &data).unwrap();
        let (without_vis, _) =
            train_draft_two_stage(&target, &empty, &cfg2, 2, &[], &zeroed).unwrap();
        assert_ne!(with_vis.layer.wq.data, without_vis.layer.wq.data);
    }

    #[test]
    fn divergent_loss_is_reported() {
        let cfg = tiny_cfg();
        let target = TargetModel::init(cfg, &mut Rng::new(37)).unwrap();
        let seqs = vec![random_seq(&cfg, 1, 4, 700)];
        let mut data = teacher_trace(&seqs, &target).unwrap();
        data[0].h_txt_prev.data[0] = f32::NAN;
        let cfg1 = tiny_train_cfg(TrainStage::TextOnly);
        let err = train_draft_two_stage(&target, &cfg1, &cfg1, 2, &data, &[]);
        assert!(matches!(err, Err(Error::Divergence(_))));
    }
}
