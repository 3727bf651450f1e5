//! Toy multimodal decoder-only target transformer.
//!
//! Accepts sequences mixing continuous visual embeddings with discrete text
//! tokens, exposes every layer's hidden states, and supports incremental
//! decoding plus batched tree verification over one KV cache. The forward
//! pass is written per position so prefill, decode and verification all run
//! the exact same kernel over the same cache layout: incremental decoding
//! reproduces full-prefill logits bit for bit.

use crate::checkpoint::{Checkpoint, CheckpointKind};
use crate::error::{Error, Result};
use crate::numkernel::{rmsnorm, vec_matmul, Matrix, Rng};

pub const RMS_EPS: f32 = 1e-5;
pub const ROPE_BASE: f32 = 10000.0;

// ---------------------------------------------------------------------------
// Configuration and sequences
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    /// Number of decoder layers (M).
    pub num_layers: usize,
    /// Hidden width (d).
    pub hidden_dim: usize,
    pub num_heads: usize,
    /// Text vocabulary size (V).
    pub vocab_size: usize,
    pub max_positions: usize,
    /// Size of the symbol alphabet carried by visual items (A).
    pub visual_alphabet: usize,
}

impl ModelConfig {
    /// Default desk-scale configuration.
    pub fn desk_default() -> Self {
        Self {
            num_layers: 8,
            hidden_dim: 64,
            num_heads: 4,
            vocab_size: 256,
            max_positions: 4608,
            visual_alphabet: 16,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_heads == 0 || self.hidden_dim % self.num_heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "hidden_dim {} must be divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            )));
        }
        if self.num_layers < 4 {
            return Err(Error::InvalidArgument(
                "num_layers must be at least 4 so the mid and penultimate layers differ".into(),
            ));
        }
        if self.vocab_size == 0 || self.max_positions == 0 {
            return Err(Error::InvalidArgument("empty vocab or zero max_positions".into()));
        }
        Ok(())
    }

    #[inline]
    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }

    /// Feed-forward width of the MLP.
    #[inline]
    pub fn ff_dim(&self) -> usize {
        4 * self.hidden_dim
    }

    /// Interaction-active mid layer used for visual state extraction.
    #[inline]
    pub fn mid_layer(&self) -> usize {
        self.num_layers / 2
    }

    /// Trace level of the second-to-last layer (input to the final layer).
    #[inline]
    pub fn penultimate_level(&self) -> usize {
        self.num_layers - 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Modality {
    Visual,
    Text,
}

/// One element of a mixed sequence.
#[derive(Debug, Clone)]
pub enum Item {
    Visual { embedding: Vec<f32>, symbol_id: usize },
    Text { token_id: u32 },
}

impl Item {
    pub fn modality(&self) -> Modality {
        match self {
            Item::Visual { .. } => Modality::Visual,
            Item::Text { .. } => Modality::Text,
        }
    }
}

/// Mixed visual+text sequence: one contiguous visual block, then text.
#[derive(Debug, Clone, Default)]
pub struct TokenSequence {
    items: Vec<Item>,
}

impl TokenSequence {
    pub fn new() -> Self {
        Self { items: Vec::new() }
    }

    pub fn push_visual(&mut self, embedding: Vec<f32>, symbol_id: usize) -> Result<()> {
        if self.text_len() > 0 {
            return Err(Error::InvalidArgument(
                "visual items must precede all text items".into(),
            ));
        }
        self.items.push(Item::Visual { embedding, symbol_id });
        Ok(())
    }

    pub fn push_text(&mut self, token_id: u32) {
        self.items.push(Item::Text { token_id });
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn items(&self) -> &[Item] {
        &self.items
    }

    pub fn visual_len(&self) -> usize {
        self.items.iter().take_while(|i| i.modality() == Modality::Visual).count()
    }

    pub fn text_len(&self) -> usize {
        self.len() - self.visual_len()
    }

    /// Token ids of the text suffix.
    pub fn text_tokens(&self) -> Vec<u32> {
        self.items
            .iter()
            .filter_map(|i| match i {
                Item::Text { token_id } => Some(*token_id),
                _ => None,
            })
            .collect()
    }

    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        if self.len() > cfg.max_positions {
            return Err(Error::Overlength { len: self.len(), max: cfg.max_positions });
        }
        let mut seen_text = false;
        for item in &self.items {
            match item {
                Item::Visual { embedding, symbol_id } => {
                    if seen_text {
                        return Err(Error::InvalidArgument("visual item after text".into()));
                    }
                    if embedding.len() != cfg.hidden_dim {
                        return Err(Error::DimMismatch(format!(
                            "visual embedding len {} vs hidden_dim {}",
                            embedding.len(),
                            cfg.hidden_dim
                        )));
                    }
                    if *symbol_id >= cfg.visual_alphabet {
                        return Err(Error::InvalidArgument(format!(
                            "symbol_id {symbol_id} out of alphabet {}",
                            cfg.visual_alphabet
                        )));
                    }
                }
                Item::Text { token_id } => {
                    seen_text = true;
                    if *token_id as usize >= cfg.vocab_size {
                        return Err(Error::InvalidArgument(format!(
                            "token_id {token_id} out of vocab {}",
                            cfg.vocab_size
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Per-layer hidden-state record of a full forward pass.
///
/// `levels[0]` is the embedded input; `levels[l]` is the output of layer `l`.
#[derive(Debug, Clone)]
pub struct LayerTrace {
    pub levels: Vec<Matrix>,
}

impl LayerTrace {
    pub fn seq_len(&self) -> usize {
        self.levels.first().map_or(0, |m| m.rows)
    }
}

// ---------------------------------------------------------------------------
// KV cache
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Default)]
struct LayerKv {
    k: Vec<f32>,
    v: Vec<f32>,
}

/// Target-side KV cache. Rows up to `committed_len` are canonical history;
/// rows past it are provisional tree nodes awaiting `commit_prefix`.
#[derive(Debug, Clone)]
pub struct TargetKVCache {
    hidden_dim: usize,
    layers: Vec<LayerKv>,
    tags: Vec<Modality>,
    positions: Vec<usize>,
    committed_len: usize,
    /// Ancestor row indices (absolute) for each provisional row.
    provisional_anc: Vec<Vec<usize>>,
}

impl TargetKVCache {
    fn new(cfg: &ModelConfig) -> Self {
        Self {
            hidden_dim: cfg.hidden_dim,
            layers: vec![LayerKv::default(); cfg.num_layers],
            tags: Vec::new(),
            positions: Vec::new(),
            committed_len: 0,
            provisional_anc: Vec::new(),
        }
    }

    /// Committed history length.
    pub fn len(&self) -> usize {
        self.committed_len
    }

    pub fn is_empty(&self) -> bool {
        self.committed_len == 0
    }

    /// Committed + provisional rows.
    pub fn total_rows(&self) -> usize {
        self.tags.len()
    }

    pub fn tags(&self) -> &[Modality] {
        &self.tags
    }

    fn push_row(&mut self, tag: Modality, pos: usize, committed: bool) {
        self.tags.push(tag);
        self.positions.push(pos);
        if committed {
            debug_assert_eq!(self.tags.len(), self.committed_len + 1);
            self.committed_len += 1;
        }
    }

    #[inline]
    pub(crate) fn k_row(&self, layer: usize, row: usize) -> &[f32] {
        let d = self.hidden_dim;
        &self.layers[layer].k[row * d..(row + 1) * d]
    }

    #[inline]
    pub(crate) fn v_row(&self, layer: usize, row: usize) -> &[f32] {
        let d = self.hidden_dim;
        &self.layers[layer].v[row * d..(row + 1) * d]
    }

    /// Keep only `keep` (indices into the provisional batch, root-to-node
    /// order) and drop every other provisional row.
    pub fn commit_prefix(&mut self, keep: &[usize]) -> Result<()> {
        let base = self.committed_len;
        let prov = self.tags.len() - base;
        for (step, &idx) in keep.iter().enumerate() {
            if idx >= prov {
                return Err(Error::InvalidArgument(format!(
                    "keep index {idx} out of {prov} provisional rows"
                )));
            }
            // A root-to-node path: row k's ancestors are exactly keep[0..k].
            let anc = &self.provisional_anc[idx];
            let expect: Vec<usize> = keep[..step].iter().map(|&j| base + j).collect();
            if anc != &expect {
                return Err(Error::InvalidArgument(
                    "keep indices do not form a root-to-node path".into(),
                ));
            }
        }
        let d = self.hidden_dim;
        for layer in &mut self.layers {
            let mut k_new = Vec::with_capacity((base + keep.len()) * d);
            let mut v_new = Vec::with_capacity((base + keep.len()) * d);
            k_new.extend_from_slice(&layer.k[..base * d]);
            v_new.extend_from_slice(&layer.v[..base * d]);
            for &idx in keep {
                let row = base + idx;
                k_new.extend_from_slice(&layer.k[row * d..(row + 1) * d]);
                v_new.extend_from_slice(&layer.v[row * d..(row + 1) * d]);
            }
            layer.k = k_new;
            layer.v = v_new;
        }
        let mut tags_new: Vec<Modality> = self.tags[..base].to_vec();
        let mut pos_new: Vec<usize> = self.positions[..base].to_vec();
        for &idx in keep {
            tags_new.push(self.tags[base + idx]);
            pos_new.push(self.positions[base + idx]);
        }
        self.tags = tags_new;
        self.positions = pos_new;
        self.committed_len = self.tags.len();
        self.provisional_anc.clear();
        Ok(())
    }

    /// Drop all provisional rows.
    pub fn rollback(&mut self) {
        self.commit_prefix(&[]).expect("empty keep cannot fail");
    }
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct LayerWeights {
    pub attn_norm: Vec<f32>,
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub mlp_norm: Vec<f32>,
    pub w1: Matrix,
    pub w2: Matrix,
}

#[derive(Debug, Clone)]
pub struct TargetModel {
    pub cfg: ModelConfig,
    /// Token embedding table, V x d.
    pub embed: Matrix,
    pub layers: Vec<LayerWeights>,
    pub final_norm: Vec<f32>,
    /// LM head, d x V.
    pub head: Matrix,
}

/// Output of one incremental step.
#[derive(Debug, Clone)]
pub struct StepOutput {
    pub logits: Vec<f32>,
    /// Hidden state at the second-to-last layer, reused by the draft.
    pub penult: Vec<f32>,
}

/// Output of a prefill pass.
#[derive(Debug)]
pub struct PrefillOutput {
    /// L x V logits, one row per input position.
    pub logits: Matrix,
    pub trace: LayerTrace,
    pub cache: TargetKVCache,
}

/// Output of a batched verification pass.
#[derive(Debug)]
pub struct VerifyOutput {
    /// One logits row per verified token.
    pub logits: Matrix,
    /// Second-to-last layer states per verified token.
    pub penult: Matrix,
}

/// Attention probabilities captured for one query row: `probs[layer][head]`
/// holds the distribution over that row's visible context.
#[derive(Debug, Clone)]
pub struct AttentionRecord {
    pub query_pos: usize,
    pub probs: Vec<Vec<Vec<f32>>>,
}

#[derive(Default)]
struct Scratch {
    normed: Vec<f32>,
    scores: Vec<f32>,
    ctx: Vec<f32>,
}

impl TargetModel {
    /// Fresh model with seeded Gaussian weights.
    pub fn init(cfg: ModelConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.hidden_dim;
        let ff = cfg.ff_dim();
        let proj_std = 0.06;
        let out_std = proj_std / (2.0 * cfg.num_layers as f32).sqrt();
        let layers = (0..cfg.num_layers)
            .map(|_| LayerWeights {
                attn_norm: vec![1.0; d],
                wq: Matrix::randn(d, d, proj_std, rng),
                wk: Matrix::randn(d, d, proj_std, rng),
                wv: Matrix::randn(d, d, proj_std, rng),
                wo: Matrix::randn(d, d, out_std, rng),
                mlp_norm: vec![1.0; d],
                w1: Matrix::randn(d, ff, proj_std, rng),
                w2: Matrix::randn(ff, d, out_std, rng),
            })
            .collect();
        Ok(Self {
            cfg,
            embed: Matrix::randn(cfg.vocab_size, d, 0.06, rng),
            layers,
            final_norm: vec![1.0; d],
            head: Matrix::randn(d, cfg.vocab_size, 0.06, rng),
        })
    }

    pub fn empty_cache(&self) -> TargetKVCache {
        TargetKVCache::new(&self.cfg)
    }

    /// Embedding of one sequence item.
    pub fn embed_item(&self, item: &Item) -> Vec<f32> {
        match item {
            Item::Visual { embedding, .. } => embedding.clone(),
            Item::Text { token_id } => self.embed.row(*token_id as usize).to_vec(),
        }
    }

    pub fn embed_token(&self, token_id: u32) -> Vec<f32> {
        self.embed.row(token_id as usize).to_vec()
    }

    /// Final norm + LM head over a hidden state.
    pub fn head_logits(&self, hidden: &[f32]) -> Vec<f32> {
        let normed = rmsnorm(hidden, &self.final_norm, RMS_EPS).expect("dims fixed");
        vec_matmul(&normed, &self.head).expect("dims fixed")
    }

    /// Full causal forward over `seq`, returning logits at every position, a
    /// fully populated trace, and the committed cache.
    pub fn prefill(&self, seq: &TokenSequence) -> Result<PrefillOutput> {
        self.prefill_opts(seq, None, &mut None)
    }

    /// Prefill with optional visual truncation and attention capture.
    ///
    /// `vis_mask_from = Some(x)` makes text queries skip visual keys at every
    /// layer `l >= x`. `attn_for` captures attention distributions for one
    /// query position.
    pub fn prefill_opts(
        &self,
        seq: &TokenSequence,
        vis_mask_from: Option<usize>,
        attn_for: &mut Option<AttentionRecord>,
    ) -> Result<PrefillOutput> {
        if seq.is_empty() {
            return Err(Error::EmptySequence);
        }
        seq.validate(&self.cfg)?;
        if let Some(x) = vis_mask_from {
            if x > self.cfg.num_layers {
                return Err(Error::InvalidArgument(format!(
                    "truncation layer {x} out of 0..={}",
                    self.cfg.num_layers
                )));
            }
        }
        let m = self.cfg.num_layers;
        let d = self.cfg.hidden_dim;
        let len = seq.len();
        let mut cache = self.empty_cache();
        let mut trace = LayerTrace {
            levels: (0..=m).map(|_| Matrix::zeros(len, d)).collect(),
        };
        let mut logits = Matrix::zeros(len, self.cfg.vocab_size);
        let mut scratch = Scratch::default();
        for (t, item) in seq.items().iter().enumerate() {
            let x0 = self.embed_item(item);
            let tag = item.modality();
            let capture = attn_for.as_mut().filter(|rec| rec.query_pos == t);
            let states = self.forward_row(
                &mut cache,
                x0,
                t,
                tag,
                true,
                &[],
                vis_mask_from,
                &mut scratch,
                capture,
            );
            for (lvl, state) in states.iter().enumerate() {
                trace.levels[lvl].row_mut(t).copy_from_slice(state);
            }
            let row_logits = self.head_logits(states.last().expect("levels populated"));
            logits.row_mut(t).copy_from_slice(&row_logits);
        }
        Ok(PrefillOutput { logits, trace, cache })
    }

    /// One autoregressive step: appends the token to the committed history.
    pub fn decode_step(&self, cache: &mut TargetKVCache, token_id: u32) -> Result<StepOutput> {
        if cache.total_rows() != cache.len() {
            return Err(Error::InvalidArgument(
                "decode_step with provisional rows pending".into(),
            ));
        }
        if cache.len() + 1 > self.cfg.max_positions {
            return Err(Error::Overlength { len: cache.len() + 1, max: self.cfg.max_positions });
        }
        if token_id as usize >= self.cfg.vocab_size {
            return Err(Error::InvalidArgument(format!("token {token_id} out of vocab")));
        }
        let pos = cache.len();
        let x0 = self.embed_token(token_id);
        let mut scratch = Scratch::default();
        let states =
            self.forward_row(cache, x0, pos, Modality::Text, true, &[], None, &mut scratch, None);
        let penult = states[self.cfg.penultimate_level()].clone();
        let logits = self.head_logits(states.last().expect("levels populated"));
        Ok(StepOutput { logits, penult })
    }

    /// Score a batch of tree tokens in one pass. `ancestor_mask[i][j]` must be
    /// true iff `j == i` or `j` is an ancestor of `i`; `positions[i]` is the
    /// absolute position of token `i`. Rows are appended provisionally; the
    /// caller later commits an accepted root-to-node path.
    pub fn verify_batch(
        &self,
        cache: &mut TargetKVCache,
        tokens: &[u32],
        ancestor_mask: &[Vec<bool>],
        positions: &[usize],
    ) -> Result<VerifyOutput> {
        let n = tokens.len();
        if n == 0 {
            return Err(Error::EmptySequence);
        }
        if ancestor_mask.len() != n
            || ancestor_mask.iter().any(|row| row.len() != n)
            || positions.len() != n
        {
            return Err(Error::MalformedMask("mask/positions shape".into()));
        }
        let base = cache.len();
        if cache.total_rows() != base {
            return Err(Error::InvalidArgument("verify_batch with provisional rows".into()));
        }
        // Validate reflexivity, ancestor closure, and position consistency.
        let mut parents: Vec<Option<usize>> = vec![None; n];
        for i in 0..n {
            if !ancestor_mask[i][i] {
                return Err(Error::MalformedMask(format!("row {i} does not include self")));
            }
            let anc: Vec<usize> =
                (0..n).filter(|&j| j != i && ancestor_mask[i][j]).collect();
            if anc.iter().any(|&j| j > i) {
                return Err(Error::MalformedMask(format!("row {i} references a later row")));
            }
            let parent = anc.iter().copied().max();
            if let Some(p) = parent {
                let parent_anc: Vec<usize> =
                    (0..n).filter(|&j| j != p && ancestor_mask[p][j]).collect();
                let mut expect = parent_anc;
                expect.push(p);
                expect.sort_unstable();
                let mut got = anc.clone();
                got.sort_unstable();
                if got != expect {
                    return Err(Error::MalformedMask(format!(
                        "row {i} is not ancestor-closed"
                    )));
                }
                if positions[i] != positions[p] + 1 {
                    return Err(Error::MalformedMask(format!(
                        "row {i} position {} does not follow parent position {}",
                        positions[i], positions[p]
                    )));
                }
            } else if positions[i] != base {
                return Err(Error::MalformedMask(format!(
                    "root row {i} position {} != committed length {base}",
                    positions[i]
                )));
            }
            parents[i] = parent;
        }
        let deepest = positions.iter().copied().max().unwrap_or(base);
        if deepest + 1 > self.cfg.max_positions {
            return Err(Error::Overlength { len: deepest + 1, max: self.cfg.max_positions });
        }

        let d = self.cfg.hidden_dim;
        let mut logits = Matrix::zeros(n, self.cfg.vocab_size);
        let mut penult = Matrix::zeros(n, d);
        let mut scratch = Scratch::default();
        for i in 0..n {
            if tokens[i] as usize >= self.cfg.vocab_size {
                return Err(Error::InvalidArgument(format!("token {} out of vocab", tokens[i])));
            }
            // Ancestors in root-to-parent order = ascending row index.
            let anc: Vec<usize> =
                (0..i).filter(|&j| ancestor_mask[i][j]).map(|j| base + j).collect();
            let x0 = self.embed_token(tokens[i]);
            let states = self.forward_row(
                cache,
                x0,
                positions[i],
                Modality::Text,
                false,
                &anc,
                None,
                &mut scratch,
                None,
            );
            cache.provisional_anc.push(anc);
            penult.row_mut(i).copy_from_slice(&states[self.cfg.penultimate_level()]);
            let row_logits = self.head_logits(states.last().expect("levels populated"));
            logits.row_mut(i).copy_from_slice(&row_logits);
        }
        Ok(VerifyOutput { logits, penult })
    }

    /// Forward pass where text queries ignore visual keys from layer `x` on.
    pub fn truncate_visual_from_layer(
        &self,
        seq: &TokenSequence,
        x: usize,
    ) -> Result<Matrix> {
        let out = self.prefill_opts(seq, Some(x), &mut None)?;
        Ok(out.logits)
    }

    /// One token through all layers against the current cache.
    ///
    /// Returns hidden states at every level (0 = embedding). Appends one K/V
    /// row per layer. `ancestors` holds absolute indices of provisional rows
    /// this row may attend to, in root-to-parent order; committed rows are
    /// always visible (subject to the visual mask).
    #[allow(clippy::too_many_arguments)]
    fn forward_row(
        &self,
        cache: &mut TargetKVCache,
        x0: Vec<f32>,
        pos: usize,
        tag: Modality,
        committed: bool,
        ancestors: &[usize],
        vis_mask_from: Option<usize>,
        scratch: &mut Scratch,
        mut attn_capture: Option<&mut AttentionRecord>,
    ) -> Vec<Vec<f32>> {
        let d = self.cfg.hidden_dim;
        let heads = self.cfg.num_heads;
        let hd = self.cfg.head_dim();
        let committed_len = cache.committed_len;
        let row_index = cache.tags.len();
        cache.push_row(tag, pos, committed);

        let mut states = Vec::with_capacity(self.cfg.num_layers + 1);
        let mut h = x0;
        states.push(h.clone());
        if let Some(rec) = attn_capture.as_deref_mut() {
            rec.probs.clear();
        }

        for (layer_idx, lw) in self.layers.iter().enumerate() {
            // Attention sublayer.
            let normed = rmsnorm(&h, &lw.attn_norm, RMS_EPS).expect("dims fixed");
            let mut q = vec_matmul(&normed, &lw.wq).expect("dims fixed");
            let mut k = vec_matmul(&normed, &lw.wk).expect("dims fixed");
            let v = vec_matmul(&normed, &lw.wv).expect("dims fixed");
            apply_rotary(&mut q, pos, heads, hd);
            apply_rotary(&mut k, pos, heads, hd);
            {
                let lkv = &mut cache.layers[layer_idx];
                lkv.k.extend_from_slice(&k);
                lkv.v.extend_from_slice(&v);
            }

            // Visible context rows: committed history, provisional ancestors,
            // then self. Iteration order matches sequential decoding exactly.
            let mask_visual =
                vis_mask_from.map_or(false, |x| layer_idx >= x) && tag == Modality::Text;
            let mut visible: Vec<usize> = Vec::with_capacity(committed_len + ancestors.len() + 1);
            for j in 0..committed_len {
                if mask_visual && cache.tags[j] == Modality::Visual {
                    continue;
                }
                visible.push(j);
            }
            visible.extend_from_slice(ancestors);
            visible.push(row_index);

            let n_vis = visible.len();
            scratch.scores.clear();
            scratch.scores.resize(heads * n_vis, 0.0);
            let scale = 1.0 / (hd as f64).sqrt();
            for (jj, &j) in visible.iter().enumerate() {
                let krow = cache.k_row(layer_idx, j);
                for head in 0..heads {
                    let qs = &q[head * hd..(head + 1) * hd];
                    let ks = &krow[head * hd..(head + 1) * hd];
                    let mut acc = 0.0f64;
                    for (a, b) in qs.iter().zip(ks) {
                        acc += *a as f64 * *b as f64;
                    }
                    scratch.scores[head * n_vis + jj] = (acc * scale) as f32;
                }
            }
            // Per-head softmax in f64.
            let mut probs = vec![0.0f64; heads * n_vis];
            for head in 0..heads {
                let row = &scratch.scores[head * n_vis..(head + 1) * n_vis];
                let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
                let mut sum = 0.0f64;
                for (jj, &s) in row.iter().enumerate() {
                    let e = (s as f64 - max).exp();
                    probs[head * n_vis + jj] = e;
                    sum += e;
                }
                for jj in 0..n_vis {
                    probs[head * n_vis + jj] /= sum;
                }
            }
            if let Some(rec) = attn_capture.as_deref_mut() {
                let mut per_head = Vec::with_capacity(heads);
                for head in 0..heads {
                    per_head.push(
                        probs[head * n_vis..(head + 1) * n_vis]
                            .iter()
                            .map(|&p| p as f32)
                            .collect(),
                    );
                }
                rec.probs.push(per_head);
            }
            scratch.ctx.clear();
            scratch.ctx.resize(d, 0.0);
            let mut ctx64 = vec![0.0f64; d];
            for (jj, &j) in visible.iter().enumerate() {
                let vrow = cache.v_row(layer_idx, j);
                for head in 0..heads {
                    let p = probs[head * n_vis + jj];
                    if p == 0.0 {
                        continue;
                    }
                    let vs = &vrow[head * hd..(head + 1) * hd];
                    let out = &mut ctx64[head * hd..(head + 1) * hd];
                    for (o, &x) in out.iter_mut().zip(vs) {
                        *o += p * x as f64;
                    }
                }
            }
            for (c, &x) in scratch.ctx.iter_mut().zip(&ctx64) {
                *c = x as f32;
            }
            let attn_out = vec_matmul(&scratch.ctx, &lw.wo).expect("dims fixed");
            for (hi, a) in h.iter_mut().zip(&attn_out) {
                *hi += a;
            }

            // MLP sublayer.
            scratch.normed.clear();
            scratch
                .normed
                .extend_from_slice(&rmsnorm(&h, &lw.mlp_norm, RMS_EPS).expect("dims fixed"));
            let mut inner = vec_matmul(&scratch.normed, &lw.w1).expect("dims fixed");
            for x in inner.iter_mut() {
                *x = silu(*x);
            }
            let mlp_out = vec_matmul(&inner, &lw.w2).expect("dims fixed");
            for (hi, m) in h.iter_mut().zip(&mlp_out) {
                *hi += m;
            }
            states.push(h.clone());
        }
        states
    }
}

/// Rotary position encoding applied in place, pairwise within each head.
pub fn apply_rotary(vec: &mut [f32], pos: usize, heads: usize, head_dim: usize) {
    let half = head_dim / 2;
    for head in 0..heads {
        let base = head * head_dim;
        for i in 0..half {
            let theta = pos as f64
                * (ROPE_BASE as f64).powf(-2.0 * i as f64 / head_dim as f64);
            let (sin, cos) = theta.sin_cos();
            let a = vec[base + 2 * i] as f64;
            let b = vec[base + 2 * i + 1] as f64;
            vec[base + 2 * i] = (a * cos - b * sin) as f32;
            vec[base + 2 * i + 1] = (a * sin + b * cos) as f32;
        }
    }
}

#[inline]
pub fn silu(x: f32) -> f32 {
    let s = 1.0 / (1.0 + (-x as f64).exp());
    (x as f64 * s) as f32
}

// ---------------------------------------------------------------------------
// Trace extraction
// ---------------------------------------------------------------------------

/// Pull the mid-layer visual states and penultimate text states out of a
/// trace: `h_vis_mid` holds level `M/2` rows at visual positions and
/// `h_txt_penult` level `M-1` rows at text positions.
pub fn extract_states(
    trace: &LayerTrace,
    seq: &TokenSequence,
    cfg: &ModelConfig,
) -> Result<(Matrix, Matrix)> {
    if trace.seq_len() != seq.len() {
        return Err(Error::DimMismatch(format!(
            "trace length {} vs sequence length {}",
            trace.seq_len(),
            seq.len()
        )));
    }
    let d = cfg.hidden_dim;
    let mid = &trace.levels[cfg.mid_layer()];
    let pen = &trace.levels[cfg.penultimate_level()];
    let l_vis = seq.visual_len();
    let l_txt = seq.text_len();
    let mut h_vis = Matrix::zeros(l_vis, d);
    let mut h_txt = Matrix::zeros(l_txt, d);
    for t in 0..l_vis {
        h_vis.row_mut(t).copy_from_slice(mid.row(t));
    }
    for t in 0..l_txt {
        h_txt.row_mut(t).copy_from_slice(pen.row(l_vis + t));
    }
    Ok((h_vis, h_txt))
}

// ---------------------------------------------------------------------------
// Checkpointing
// ---------------------------------------------------------------------------

impl TargetModel {
    pub fn to_checkpoint(&self) -> Checkpoint {
        let cfg = &self.cfg;
        let mut ckpt = Checkpoint::new(
            CheckpointKind::Target,
            [
                cfg.num_layers as u32,
                cfg.hidden_dim as u32,
                cfg.num_heads as u32,
                cfg.vocab_size as u32,
                cfg.max_positions as u32,
                cfg.visual_alphabet as u32,
            ],
        );
        ckpt.push("embed", self.embed.clone());
        for (i, lw) in self.layers.iter().enumerate() {
            ckpt.push(&format!("layers.{i}.attn_norm"), row_matrix(&lw.attn_norm));
            ckpt.push(&format!("layers.{i}.wq"), lw.wq.clone());
            ckpt.push(&format!("layers.{i}.wk"), lw.wk.clone());
            ckpt.push(&format!("layers.{i}.wv"), lw.wv.clone());
            ckpt.push(&format!("layers.{i}.wo"), lw.wo.clone());
            ckpt.push(&format!("layers.{i}.mlp_norm"), row_matrix(&lw.mlp_norm));
            ckpt.push(&format!("layers.{i}.w1"), lw.w1.clone());
            ckpt.push(&format!("layers.{i}.w2"), lw.w2.clone());
        }
        ckpt.push("final_norm", row_matrix(&self.final_norm));
        ckpt.push("head", self.head.clone());
        ckpt
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.kind != CheckpointKind::Target {
            return Err(Error::Checkpoint("not a target checkpoint".into()));
        }
        let cfg = ModelConfig {
            num_layers: ckpt.config[0] as usize,
            hidden_dim: ckpt.config[1] as usize,
            num_heads: ckpt.config[2] as usize,
            vocab_size: ckpt.config[3] as usize,
            max_positions: ckpt.config[4] as usize,
            visual_alphabet: ckpt.config[5] as usize,
        };
        cfg.validate()?;
        let mut layers = Vec::with_capacity(cfg.num_layers);
        for i in 0..cfg.num_layers {
            layers.push(LayerWeights {
                attn_norm: ckpt.get(&format!("layers.{i}.attn_norm"))?.data.clone(),
                wq: ckpt.get(&format!("layers.{i}.wq"))?.clone(),
                wk: ckpt.get(&format!("layers.{i}.wk"))?.clone(),
                wv: ckpt.get(&format!("layers.{i}.wv"))?.clone(),
                wo: ckpt.get(&format!("layers.{i}.wo"))?.clone(),
                mlp_norm: ckpt.get(&format!("layers.{i}.mlp_norm"))?.data.clone(),
                w1: ckpt.get(&format!("layers.{i}.w1"))?.clone(),
                w2: ckpt.get(&format!("layers.{i}.w2"))?.clone(),
            });
        }
        Ok(Self {
            cfg,
            embed: ckpt.get("embed")?.clone(),
            layers,
            final_norm: ckpt.get("final_norm")?.data.clone(),
            head: ckpt.get("head")?.clone(),
        })
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

fn row_matrix(v: &[f32]) -> Matrix {
    Matrix { rows: 1, cols: v.len(), data: v.to_vec() }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkernel::softmax;

    pub(crate) fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            num_layers: 4,
            hidden_dim: 16,
            num_heads: 2,
            vocab_size: 24,
            max_positions: 128,
            visual_alphabet: 4,
        }
    }

    pub(crate) fn random_seq(cfg: &ModelConfig, l_vis: usize, l_txt: usize, seed: u64) -> TokenSequence {
        let mut rng = Rng::new(seed);
        let mut seq = TokenSequence::new();
        for _ in 0..l_vis {
            let emb: Vec<f32> =
                (0..cfg.hidden_dim).map(|_| rng.next_gaussian() as f32 * 0.5).collect();
            seq.push_visual(emb, rng.next_below(cfg.visual_alphabet)).unwrap();
        }
        for _ in 0..l_txt {
            seq.push_text(rng.next_below(cfg.vocab_size) as u32);
        }
        seq
    }

    #[test]
    fn prefill_rejects_empty_and_overlength() {
        let cfg = tiny_cfg();
        let model = TargetModel::init(cfg, &mut Rng::new(1)).unwrap();
        assert!(matches!(model.prefill(&TokenSequence::new()), Err(Error::EmptySequence)));
        let seq = random_seq(&cfg, 0, cfg.max_positions + 1, 2);
        assert!(model.prefill(&seq).is_err());
    }

    #[test]
    fn single_token_logits_normalize() {
        let cfg = tiny_cfg();
        let model = TargetModel::init(cfg, &mut Rng::new(1)).unwrap();
        let seq = random_seq(&cfg, 0, 1, 3);
        let out = model.prefill(&seq).unwrap();
        assert_eq!(out.logits.rows, 1);
        assert_eq!(out.logits.cols, cfg.vocab_size);
        let p = softmax(out.logits.row(0), 1.0).unwrap();
        let sum: f64 = p.iter().map(|&x| x as f64).sum();
        assert!((sum - 1.0).abs() < 1e-6);
    }

    #[test]
    fn trace_has_m_plus_one_levels_and_mid_layer_indices() {
        let cfg = ModelConfig::desk_default();
        assert_eq!(cfg.mid_layer(), 4);
        assert_eq!(cfg.penultimate_level(), 7);
        let tiny = tiny_cfg();
        let model = TargetModel::init(tiny, &mut Rng::new(1)).unwrap();
        let seq = random_seq(&tiny, 3, 4, 5);
        let out = model.prefill(&seq).unwrap();
        assert_eq!(out.trace.levels.len(), tiny.num_layers + 1);
        // Level 0 equals the embedded input.
        for (t, item) in seq.items().iter().enumerate() {
            let emb = model.embed_item(item);
            assert_eq!(out.trace.levels[0].row(t), emb.as_slice());
        }
    }

    #[test]
    fn decode_step_matches_full_prefill() {
        let cfg = tiny_cfg();
        let model = TargetModel::init(cfg, &mut Rng::new(7)).unwrap();
        let seq = random_seq(&cfg, 2, 5, 11);
        let out = model.prefill(&seq).unwrap();
        let mut cache = out.cache;
        let tok = 13u32;
        let step = model.decode_step(&mut cache, tok).unwrap();
        let mut longer = seq.clone();
        longer.push_text(tok);
        let full = model.prefill(&longer).unwrap();
        let last = full.logits.row(longer.len() - 1);
        for (a, b) in step.logits.iter().zip(last) {
            assert!((a - b).abs() < 1e-4, "decode/prefill mismatch {a} vs {b}");
        }
        assert_eq!(cache.len(), longer.len());
    }

    #[test]
    fn decode_step_is_deterministic_under_cloned_caches() {
        let cfg = tiny_cfg();
        let model = TargetModel::init(cfg, &mut Rng::new(7)).unwrap();
        let seq = random_seq(&cfg, 1, 4, 13);
        let out = model.prefill(&seq).unwrap();
        let mut c1 = out.cache.clone();
        let mut c2 = out.cache;
        let a = model.decode_step(&mut c1, 5).unwrap();
        let b = model.decode_step(&mut c2, 5).unwrap();
        assert_eq!(a.logits, b.logits);
    }

    #[test]
    fn causality_prefix_logits_unchanged_by_suffix_perturbation() {
        let cfg = tiny_cfg();
        let model = TargetModel::init(cfg, &mut Rng::new(9)).unwrap();
        let a = random_seq(&cfg, 2, 6, 17);
        let mut b = a.clone();
        // Perturb the last token.
        let last = b.items.len() - 1;
        b.items[last] = Item::Text { token_id: 1 };
        let out_a = model.prefill(&a).unwrap();
        let out_b = model.prefill(&b).unwrap();
        for t in 0..last {
            assert_eq!(out_a.logits.row(t), out_b.logits.row(t), "position {t} changed");
        }
    }

    #[test]
    fn trace_consistency_final_layer_reproduces_logits() {
        let cfg = tiny_cfg();
        let model = TargetModel::init(cfg, &mut Rng::new(21)).unwrap();
        let seq = random_seq(&cfg, 2, 4, 23);
        let out = model.prefill(&seq).unwrap();
        // Recompute logits from the last level of the trace.
        for t in 0..seq.len() {
            let h = out.trace.levels[cfg.num_layers].row(t);
            let logits = model.head_logits(h);
            for (a, b) in logits.iter().zip(out.logits.row(t)) {
                assert!((a - b).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn verify_batch_chain_matches_sequential_decode() {
        let cfg = tiny_cfg();
        let model = TargetModel::init(cfg, &mut Rng::new(31)).unwrap();
        let seq = random_seq(&cfg, 2, 4, 37);
        let out = model.prefill(&seq).unwrap();
        let chain = [3u32, 7, 1];
        // Sequential oracle.
        let mut seq_cache = out.cache.clone();
        let mut seq_logits = Vec::new();
        for &t in &chain {
            seq_logits.push(model.decode_step(&mut seq_cache, t).unwrap().logits);
        }
        // Batched with a lower-triangular mask.
        let mut cache = out.cache;
        let n = chain.len();
        let mask: Vec<Vec<bool>> = (0..n).map(|i| (0..n).map(|j| j <= i).collect()).collect();
        let positions: Vec<usize> = (0..n).map(|i| seq.len() + i).collect();
        let ver = model.verify_batch(&mut cache, &chain, &mask, &positions).unwrap();
        for (i, expect) in seq_logits.iter().enumerate() {
            for (a, b) in ver.logits.row(i).iter().zip(expect) {
                assert!((a - b).abs() < 1e-4);
            }
        }
        // Committing the full chain reproduces the sequential cache entrywise.
        cache.commit_prefix(&[0, 1, 2]).unwrap();
        assert_eq!(cache.len(), seq_cache.len());
        for layer in 0..cfg.num_layers {
            for row in 0..cache.len() {
                for (a, b) in cache.k_row(layer, row).iter().zip(seq_cache.k_row(layer, row)) {
                    assert!((a - b).abs() < 1e-5);
                }
                for (a, b) in cache.v_row(layer, row).iter().zip(seq_cache.v_row(layer, row)) {
                    assert!((a - b).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn verify_batch_single_token_equals_decode_step() {
        let cfg = tiny_cfg();
        let model = TargetModel::init(cfg, &mut Rng::new(41)).unwrap();
        let seq = random_seq(&cfg, 1, 3, 43);
        let out = model.prefill(&seq).unwrap();
        let mut c1 = out.cache.clone();
        let step = model.decode_step(&mut c1, 9).unwrap();
        let mut c2 = out.cache;
        let ver = model
            .verify_batch(&mut c2, &[9], &[vec![true]], &[seq.len()])
            .unwrap();
        assert_eq!(ver.logits.row(0), step.logits.as_slice());
        assert_eq!(ver.penult.row(0), step.penult.as_slice());
    }

    #[test]
    fn verify_batch_siblings_match_per_branch_decode() {
        let cfg = tiny_cfg();
        let model = TargetModel::init(cfg, &mut Rng::new(51)).unwrap();
        let seq = random_seq(&cfg, 2, 3, 53);
        let out = model.prefill(&seq).unwrap();
        // Two siblings at depth 1 from the same parent state.
        let mut cache = out.cache.clone();
        let mask = vec![vec![true, false], vec![false, true]];
        let ver = model
            .verify_batch(&mut cache, &[4, 11], &mask, &[seq.len(), seq.len()])
            .unwrap();
        for (i, tok) in [4u32, 11].iter().enumerate() {
            let mut branch = out.cache.clone();
            let step = model.decode_step(&mut branch, *tok).unwrap();
            for (a, b) in ver.logits.row(i).iter().zip(&step.logits) {
                assert!((a - b).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn verify_batch_rejects_malformed_masks() {
        let cfg = tiny_cfg();
        let model = TargetModel::init(cfg, &mut Rng::new(61)).unwrap();
        let seq = random_seq(&cfg, 0, 3, 63);
        let out = model.prefill(&seq).unwrap();
        let mut cache = out.cache;
        // Missing self.
        let mask = vec![vec![false]];
        assert!(model.verify_batch(&mut cache, &[1], &mask, &[3]).is_err());
        // Not ancestor-closed: row 2 sees row 1 but not row 0 (row 1's parent).
        let mask = vec![
            vec![true, false, false],
            vec![true, true, false],
            vec![false, true, true],
        ];
        assert!(model
            .verify_batch(&mut cache, &[1, 2, 3], &mask, &[3, 4, 5])
            .is_err());
    }

    #[test]
    fn commit_prefix_empty_restores_and_length_tracks_keep() {
        let cfg = tiny_cfg();
        let model = TargetModel::init(cfg, &mut Rng::new(71)).unwrap();
        let seq = random_seq(&cfg, 1, 3, 73);
        let out = model.prefill(&seq).unwrap();
        let mut cache = out.cache;
        let pre = cache.len();
        let mask = vec![vec![true, false], vec![true, true]];
        model.verify_batch(&mut cache, &[2, 3], &mask, &[pre, pre + 1]).unwrap();
        assert_eq!(cache.total_rows(), pre + 2);
        let mut dropped = cache.clone();
        dropped.commit_prefix(&[]).unwrap();
        assert_eq!(dropped.len(), pre);
        assert_eq!(dropped.total_rows(), pre);
        cache.commit_prefix(&[0]).unwrap();
        assert_eq!(cache.len(), pre + 1);
        // Non-path keep set is rejected.
        let mut cache2 = model.prefill(&seq).unwrap().cache;
        let mask = vec![vec![true, false], vec![false, true]];
        model.verify_batch(&mut cache2, &[2, 3], &mask, &[pre, pre]).unwrap();
        assert!(cache2.commit_prefix(&[0, 1]).is_err());
    }

    #[test]
    fn extract_states_shapes_and_indices() {
        let cfg = tiny_cfg();
        let model = TargetModel::init(cfg, &mut Rng::new(81)).unwrap();
        let seq = random_seq(&cfg, 3, 5, 83);
        let out = model.prefill(&seq).unwrap();
        let (h_vis, h_txt) = extract_states(&out.trace, &seq, &cfg).unwrap();
        assert_eq!(h_vis.rows, 3);
        assert_eq!(h_txt.rows, 5);
        assert_eq!(h_vis.row(0), out.trace.levels[cfg.mid_layer()].row(0));
        assert_eq!(h_txt.row(0), out.trace.levels[cfg.penultimate_level()].row(3));
        // Empty visual block is a valid 0 x d matrix.
        let txt_only = random_seq(&cfg, 0, 4, 85);
        let out = model.prefill(&txt_only).unwrap();
        let (h_vis, h_txt) = extract_states(&out.trace, &txt_only, &cfg).unwrap();
        assert_eq!(h_vis.rows, 0);
        assert_eq!(h_txt.rows, 4);
    }

    #[test]
    fn truncate_at_m_is_bit_identical_to_full_forward() {
        let cfg = tiny_cfg();
        let model = TargetModel::init(cfg, &mut Rng::new(91)).unwrap();
        let seq = random_seq(&cfg, 4, 4, 93);
        let full = model.prefill(&seq).unwrap();
        let trunc = model.truncate_visual_from_layer(&seq, cfg.num_layers).unwrap();
        assert_eq!(full.logits.data, trunc.data);
        assert!(model.truncate_visual_from_layer(&seq, cfg.num_layers + 1).is_err());
    }

    #[test]
    fn truncate_at_zero_matches_explicit_mask_oracle() {
        let cfg = tiny_cfg();
        let model = TargetModel::init(cfg, &mut Rng::new(95)).unwrap();
        let seq = random_seq(&cfg, 4, 5, 97);
        let trunc = model.truncate_visual_from_layer(&seq, 0).unwrap();
        // Oracle: drop the visual block and re-run the text alone, offsetting
        // positions cannot reproduce rotary phases, so instead compare with a
        // forward over the same sequence where visual rows never existed for
        // text queries. Text rows at positions l_vis.. attending only to text
        // is exactly a prefill of the text suffix at shifted positions; the
        // trustworthy oracle is an independent masked recompute from embeddings.
        let oracle = reference_masked_forward(&model, &seq, 0);
        let l_vis = seq.visual_len();
        for t in l_vis..seq.len() {
            for (a, b) in trunc.row(t).iter().zip(oracle.row(t)) {
                assert!((a - b).abs() < 1e-5, "position {t}: {a} vs {b}");
            }
        }
    }

    /// Independent full-attention forward with an explicit boolean mask,
    /// written against matrices rather than the cache machinery.
    fn reference_masked_forward(model: &TargetModel, seq: &TokenSequence, x: usize) -> Matrix {
        let cfg = &model.cfg;
        let d = cfg.hidden_dim;
        let heads = cfg.num_heads;
        let hd = cfg.head_dim();
        let len = seq.len();
        let l_vis = seq.visual_len();
        let mut h: Vec<Vec<f32>> = seq.items().iter().map(|it| model.embed_item(it)).collect();
        for (layer_idx, lw) in model.layers.iter().enumerate() {
            let mut q_all = vec![vec![0.0f32; d]; len];
            let mut k_all = vec![vec![0.0f32; d]; len];
            let mut v_all = vec![vec![0.0f32; d]; len];
            for t in 0..len {
                let normed = rmsnorm(&h[t], &lw.attn_norm, RMS_EPS).unwrap();
                q_all[t] = vec_matmul(&normed, &lw.wq).unwrap();
                k_all[t] = vec_matmul(&normed, &lw.wk).unwrap();
                v_all[t] = vec_matmul(&normed, &lw.wv).unwrap();
                apply_rotary(&mut q_all[t], t, heads, hd);
                apply_rotary(&mut k_all[t], t, heads, hd);
            }
            for t in (0..len).rev() {
                let text_query = t >= l_vis;
                let masked = text_query && layer_idx >= x;
                let mut ctx = vec![0.0f64; d];
                for head in 0..heads {
                    let qs = &q_all[t][head * hd..(head + 1) * hd];
                    let mut scores = Vec::new();
                    let mut idx = Vec::new();
                    for j in 0..=t {
                        if masked && j < l_vis {
                            continue;
                        }
                        let ks = &k_all[j][head * hd..(head + 1) * hd];
                        let mut acc = 0.0f64;
                        for (a, b) in qs.iter().zip(ks) {
                            acc += *a as f64 * *b as f64;
                        }
                        scores.push(acc / (hd as f64).sqrt());
                        idx.push(j);
                    }
                    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
                    let sum: f64 = exps.iter().sum();
                    for (e, &j) in exps.iter().zip(&idx) {
                        let p = e / sum;
                        let vs = &v_all[j][head * hd..(head + 1) * hd];
                        for (o, &x) in ctx[head * hd..(head + 1) * hd].iter_mut().zip(vs) {
                            *o += p * x as f64;
                        }
                    }
                }
                let ctx32: Vec<f32> = ctx.iter().map(|&x| x as f32).collect();
                let attn_out = vec_matmul(&ctx32, &lw.wo).unwrap();
                for (hi, a) in h[t].iter_mut().zip(&attn_out) {
                    *hi += a;
                }
                let normed = rmsnorm(&h[t], &lw.mlp_norm, RMS_EPS).unwrap();
                let mut inner = vec_matmul(&normed, &lw.w1).unwrap();
                for xv in inner.iter_mut() {
                    *xv = silu(*xv);
                }
                let mlp_out = vec_matmul(&inner, &lw.w2).unwrap();
                for (hi, m) in h[t].iter_mut().zip(&mlp_out) {
                    *hi += m;
                }
            }
        }
        let mut logits = Matrix::zeros(len, cfg.vocab_size);
        for t in 0..len {
            logits.row_mut(t).copy_from_slice(&model.head_logits(&h[t]));
        }
        logits
    }

    #[test]
    fn checkpoint_roundtrip_preserves_forward() {
        let cfg = tiny_cfg();
        let model = TargetModel::init(cfg, &mut Rng::new(101)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("target.sprw");
        model.save(&path).unwrap();
        let back = TargetModel::load(&path).unwrap();
        let seq = random_seq(&cfg, 2, 3, 103);
        let a = model.prefill(&seq).unwrap();
        let b = back.prefill(&seq).unwrap();
        assert_eq!(a.logits.data, b.logits.data);
    }
}
