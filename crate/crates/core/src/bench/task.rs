//! Synthetic grounded workload.
//!
//! Visual slots carry continuous embeddings composed of a symbol component
//! (second half of the hidden dims) plus a slot-identity marker component
//! (first half), with small seeded jitter. The trailing `informative` slots
//! use sinusoidal position-code markers so a text query can name them and so
//! moving from one slot to the next is a fixed linear map; everything before
//! is a distractor with a random marker the queries never match. The text
//! suffix names a consecutive run of `k` slots (listed in reverse, so the
//! first answer's query is adjacent to the separator) and the reference
//! continuation is the symbols stored there in run order: visual information
//! is necessary and scoreable. Long inputs are emulated by growing the
//! distractor block only, so the informative content of paired prompts is
//! byte-identical across visual lengths.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, TargetModel, TokenSequence};
use crate::numkernel::{argmax, Matrix, Rng};

pub const DEFAULT_TASK_SEED: u64 = 7777;
pub const DEFAULT_INFORMATIVE: usize = 16;
pub const DEFAULT_QUERIES: usize = 12;
pub const DEFAULT_JITTER: f32 = 0.03;

/// Norm of the informative slot codes; distractor markers are weaker so the
/// retrieval contrast survives long distractor blocks.
const MARKER_SCALE: f32 = 1.5;
const DISTRACTOR_SCALE: f32 = 0.35;

/// Text-token layout of the task vocabulary.
#[derive(Debug, Clone, Copy)]
pub struct TaskTokens {
    pub sym_base: u32,
    pub pos_base: u32,
    pub qry: u32,
    pub sep: u32,
    pub eos: u32,
}

/// Fixed seeded embedding tables plus the token layout.
#[derive(Debug, Clone)]
pub struct GroundedTask {
    pub hidden_dim: usize,
    pub alphabet: usize,
    pub informative: usize,
    pub jitter: f32,
    pub tokens: TaskTokens,
    sym_emb: Matrix,
    marker_emb: Matrix,
}

impl GroundedTask {
    pub fn new(cfg: &ModelConfig, informative: usize, jitter: f32, task_seed: u64) -> Result<Self> {
        let a = cfg.visual_alphabet;
        if informative == 0 {
            return Err(Error::InvalidArgument("need at least one informative slot".into()));
        }
        let needed = a + informative + 3;
        if needed > cfg.vocab_size {
            return Err(Error::InvalidArgument(format!(
                "task needs {needed} token ids but vocab is {}",
                cfg.vocab_size
            )));
        }
        let d = cfg.hidden_dim;
        let half = d / 2;
        let scale = 1.0 / (half as f32).sqrt();
        let mut rng = Rng::new(task_seed);
        let mut sym_emb = Matrix::zeros(a, d);
        for s in 0..a {
            for x in sym_emb.row_mut(s)[half..].iter_mut() {
                *x = rng.next_gaussian() as f32 * scale;
            }
        }
        // Sinusoidal slot codes: injective over the informative range and
        // shift-equivariant (slot j+1 is a fixed rotation of slot j).
        let pairs = half / 2;
        let code_scale = 1.0 / (pairs as f32).sqrt();
        let mut marker_emb = Matrix::zeros(informative, d);
        for m in 0..informative {
            let row = marker_emb.row_mut(m);
            for i in 0..pairs {
                let omega = 2.5f64 * (0.18f64).powf(i as f64 / (pairs.max(2) - 1) as f64);
                let theta = m as f64 * omega;
                row[2 * i] = (theta.cos() as f32) * code_scale * MARKER_SCALE;
                row[2 * i + 1] = (theta.sin() as f32) * code_scale * MARKER_SCALE;
            }
        }
        let tokens = TaskTokens {
            sym_base: 0,
            pos_base: a as u32,
            qry: (a + informative) as u32,
            sep: (a + informative + 1) as u32,
            eos: (a + informative + 2) as u32,
        };
        Ok(Self { hidden_dim: d, alphabet: a, informative, jitter, tokens, sym_emb, marker_emb })
    }

    pub fn sym_token(&self, symbol: usize) -> u32 {
        self.tokens.sym_base + symbol as u32
    }

    pub fn pos_token(&self, slot: usize) -> u32 {
        self.tokens.pos_base + slot as u32
    }

    fn slot_embedding(&self, symbol: usize, marker: Option<usize>, rng: &mut Rng) -> Vec<f32> {
        let d = self.hidden_dim;
        let half = d / 2;
        let scale = 1.0 / (half as f32).sqrt();
        let mut emb = self.sym_emb.row(symbol).to_vec();
        match marker {
            Some(m) => {
                for (e, &v) in emb[..half].iter_mut().zip(&self.marker_emb.row(m)[..half]) {
                    *e += v;
                }
            }
            None => {
                // Distractor marker the queries can never name.
                for e in emb[..half].iter_mut() {
                    *e += rng.next_gaussian() as f32 * scale * DISTRACTOR_SCALE;
                }
            }
        }
        for e in emb.iter_mut() {
            *e += rng.next_gaussian() as f32 * self.jitter;
        }
        emb
    }

    /// One prompt plus its reference continuation (symbols at the queried
    /// slots; the stop token is appended by callers that want it).
    ///
    /// The informative block and queries are drawn from a stream that does
    /// not depend on `l_vis`, so prompts generated with the same `rng_info`
    /// seed share content across visual lengths.
    pub fn gen_prompt(
        &self,
        l_vis: usize,
        queries: usize,
        rng_info: &mut Rng,
        rng_noise: &mut Rng,
    ) -> Result<(TokenSequence, Vec<u32>)> {
        if l_vis < self.informative {
            return Err(Error::InvalidArgument(format!(
                "visual length {l_vis} shorter than informative block {}",
                self.informative
            )));
        }
        if queries > self.informative {
            return Err(Error::InvalidArgument(format!(
                "{queries} queries but only {} informative slots",
                self.informative
            )));
        }
        // Informative content first, independent of l_vis.
        let symbols: Vec<usize> =
            (0..self.informative).map(|_| rng_info.next_below(self.alphabet)).collect();
        let informative_items: Vec<(Vec<f32>, usize)> = symbols
            .iter()
            .enumerate()
            .map(|(slot, &sym)| (self.slot_embedding(sym, Some(slot), rng_info), sym))
            .collect();
        // Queries name a consecutive run of slots, listed in reverse so the
        // run start is adjacent to the separator; answers go in run order.
        let run_start = rng_info.next_below(self.informative - queries + 1);
        let queried: Vec<usize> = (run_start..run_start + queries).rev().collect();

        let mut seq = TokenSequence::new();
        for _ in 0..l_vis - self.informative {
            let sym = rng_noise.next_below(self.alphabet);
            let emb = self.slot_embedding(sym, None, rng_noise);
            seq.push_visual(emb, sym)?;
        }
        for (emb, sym) in &informative_items {
            seq.push_visual(emb.clone(), *sym)?;
        }
        seq.push_text(self.tokens.qry);
        for &slot in &queried {
            seq.push_text(self.pos_token(slot));
        }
        seq.push_text(self.tokens.sep);
        let reference: Vec<u32> = (run_start..run_start + queries)
            .map(|slot| self.sym_token(symbols[slot]))
            .collect();
        Ok((seq, reference))
    }

    /// Prompt plus reference answers plus the stop token, as one sequence.
    pub fn training_sequence(
        &self,
        l_vis: usize,
        queries: usize,
        rng: &mut Rng,
    ) -> Result<TokenSequence> {
        let mut noise = rng.fork(0x6e6f_6973);
        let (mut seq, reference) = self.gen_prompt(l_vis, queries, rng, &mut noise)?;
        for tok in reference {
            seq.push_text(tok);
        }
        seq.push_text(self.tokens.eos);
        Ok(seq)
    }

    /// Weighted next-token supervision rows for a task sequence. Symbol
    /// answers carry full weight; the unpredictable query tokens are nearly
    /// muted so they do not drown the recall gradient; structural tokens sit
    /// in between.
    pub fn weighted_rows(&self, seq: &TokenSequence) -> Vec<(usize, u32, f32)> {
        use crate::model::Item;
        let mut rows = Vec::new();
        let items = seq.items();
        for t in 0..items.len().saturating_sub(1) {
            if let Item::Text { token_id } = items[t + 1] {
                let weight = if token_id < self.tokens.pos_base {
                    1.0
                } else if token_id < self.tokens.qry {
                    0.1
                } else {
                    0.5
                };
                rows.push((t, token_id, weight));
            }
        }
        rows
    }

    /// Text-only sequence over the task vocabulary (stage-1 draft data):
    /// a query-like prefix followed by random symbol tokens.
    pub fn text_only_sequence(&self, queries: usize, rng: &mut Rng) -> TokenSequence {
        let mut seq = TokenSequence::new();
        seq.push_text(self.tokens.qry);
        for _ in 0..queries {
            seq.push_text(self.pos_token(rng.next_below(self.informative)));
        }
        seq.push_text(self.tokens.sep);
        for _ in 0..queries {
            seq.push_text(self.sym_token(rng.next_below(self.alphabet)));
        }
        seq.push_text(self.tokens.eos);
        seq
    }
}

// ---------------------------------------------------------------------------
// Workloads
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WorkloadKind {
    RandomModel,
    GroundedTask,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Workload {
    pub kind: WorkloadKind,
    pub l_vis: usize,
    /// Queried slots per prompt; the prompt text length is `queries + 2`.
    pub queries: usize,
    pub num_prompts: usize,
    pub seed: u64,
    pub task_seed: u64,
    pub informative: usize,
    pub jitter: f32,
}

impl Workload {
    pub fn grounded(l_vis: usize, queries: usize, num_prompts: usize, seed: u64) -> Self {
        Self {
            kind: WorkloadKind::GroundedTask,
            l_vis,
            queries,
            num_prompts,
            seed,
            task_seed: DEFAULT_TASK_SEED,
            informative: DEFAULT_INFORMATIVE,
            jitter: DEFAULT_JITTER,
        }
    }

    pub fn random_model(l_vis: usize, text_len: usize, num_prompts: usize, seed: u64) -> Self {
        Self {
            kind: WorkloadKind::RandomModel,
            l_vis,
            queries: text_len,
            num_prompts,
            seed,
            task_seed: DEFAULT_TASK_SEED,
            informative: DEFAULT_INFORMATIVE,
            jitter: DEFAULT_JITTER,
        }
    }
}

/// Generated prompts with reference continuations.
#[derive(Debug)]
pub struct WorkloadData {
    pub prompts: Vec<TokenSequence>,
    pub references: Vec<Vec<u32>>,
    pub task: Option<GroundedTask>,
}

/// Materialize a workload; a pure function of its configuration.
pub fn gen_workload(cfg: &ModelConfig, w: &Workload) -> Result<WorkloadData> {
    let text_len = match w.kind {
        WorkloadKind::GroundedTask => w.queries + 2,
        WorkloadKind::RandomModel => w.queries,
    };
    let answers = match w.kind {
        WorkloadKind::GroundedTask => w.queries + 1,
        WorkloadKind::RandomModel => 0,
    };
    if w.l_vis + text_len + answers > cfg.max_positions {
        return Err(Error::Overlength {
            len: w.l_vis + text_len + answers,
            max: cfg.max_positions,
        });
    }
    let mut prompts = Vec::with_capacity(w.num_prompts);
    let mut references = Vec::with_capacity(w.num_prompts);
    match w.kind {
        WorkloadKind::GroundedTask => {
            let task = GroundedTask::new(cfg, w.informative, w.jitter, w.task_seed)?;
            let base = Rng::new(w.seed);
            for i in 0..w.num_prompts {
                let mut rng_info = base.fork(i as u64 * 2 + 1);
                let mut rng_noise = base.fork(i as u64 * 2 + 2);
                let (prompt, reference) =
                    task.gen_prompt(w.l_vis, w.queries, &mut rng_info, &mut rng_noise)?;
                prompts.push(prompt);
                references.push(reference);
            }
            Ok(WorkloadData { prompts, references, task: Some(task) })
        }
        WorkloadKind::RandomModel => {
            let base = Rng::new(w.seed);
            for i in 0..w.num_prompts {
                let mut rng = base.fork(i as u64 + 1);
                let mut seq = TokenSequence::new();
                for _ in 0..w.l_vis {
                    let emb: Vec<f32> = (0..cfg.hidden_dim)
                        .map(|_| rng.next_gaussian() as f32 * 0.5)
                        .collect();
                    seq.push_visual(emb, rng.next_below(cfg.visual_alphabet))?;
                }
                for _ in 0..w.queries.max(1) {
                    seq.push_text(rng.next_below(cfg.vocab_size) as u32);
                }
                prompts.push(seq);
                references.push(Vec::new());
            }
            Ok(WorkloadData { prompts, references, task: None })
        }
    }
}

/// Teacher-forced symbol-recall accuracy of `target` over grounded prompts,
/// optionally with text-to-visual attention masked from layer `x` on.
pub fn grounded_accuracy(
    target: &TargetModel,
    data: &WorkloadData,
    truncate_from: Option<usize>,
) -> Result<f64> {
    let mut correct = 0usize;
    let mut total = 0usize;
    for (prompt, reference) in data.prompts.iter().zip(&data.references) {
        if reference.is_empty() {
            continue;
        }
        let mut seq = prompt.clone();
        for &tok in reference {
            seq.push_text(tok);
        }
        let logits = match truncate_from {
            Some(x) => target.truncate_visual_from_layer(&seq, x)?,
            None => target.prefill(&seq)?.logits,
        };
        let base = prompt.len() - 1;
        for (i, &want) in reference.iter().enumerate() {
            if argmax(logits.row(base + i)) as u32 == want {
                correct += 1;
            }
            total += 1;
        }
    }
    if total == 0 {
        return Err(Error::InvalidArgument("workload has no reference answers".into()));
    }
    Ok(correct as f64 / total as f64)
}
