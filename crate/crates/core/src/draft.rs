//! Single-layer draft model.
//!
//! The draft mirrors one decoder layer of the target and shares its token
//! embedding table and LM head, frozen. Its input rows are built by fusing
//! the current token embedding with the hidden state the target produced at
//! the previous position, so the expensive visual processing stays entirely
//! on the target side. At inference the draft keeps no visual rows at all:
//! attention closes strictly over the fused text rows, which makes its
//! per-step cost and KV cache independent of the visual sequence length.
//!
//! Two attention modes exist. Training runs full causal attention over a
//! prepended block of mid-layer visual states plus the fused text rows;
//! inference rejects visual rows outright.

use crate::checkpoint::{Checkpoint, CheckpointKind};
use crate::error::{Error, Result};
use crate::model::{apply_rotary, silu, LayerWeights, TargetModel, RMS_EPS};
use crate::numkernel::{rmsnorm, vec_matmul, Matrix, Rng};

// ---------------------------------------------------------------------------
// Types
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DraftMode {
    /// Full causal attention over visual-state rows and fused text rows.
    TrainingFullCausal,
    /// Text-anchored attention; inputs and cache hold fused text rows only.
    InferenceVata,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DraftConfig {
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub vocab_size: usize,
    pub mode: DraftMode,
}

impl DraftConfig {
    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }

    pub fn ff_dim(&self) -> usize {
        4 * self.hidden_dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_heads == 0 || self.hidden_dim % self.num_heads != 0 {
            return Err(Error::InvalidArgument("hidden_dim must split across heads".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FusedTag {
    /// Mid-layer visual state from the target (training input only).
    VisualState,
    /// FC-fused (embedding, previous hidden) text row.
    FusedText,
}

/// The draft model's input sequence: an optional visual-state block followed
/// by fused text rows, with an absolute rotary position per row.
#[derive(Debug, Clone)]
pub struct FusedInput {
    pub rows: Matrix,
    pub tags: Vec<FusedTag>,
    pub positions: Vec<usize>,
}

impl FusedInput {
    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }

    pub fn visual_len(&self) -> usize {
        self.tags.iter().take_while(|t| **t == FusedTag::VisualState).count()
    }

    pub fn text_len(&self) -> usize {
        self.len() - self.visual_len()
    }

    fn row_state(&self, t: usize) -> &[f32] {
        self.rows.row(t)
    }

    fn validate(&self, d: usize) -> Result<()> {
        if self.rows.rows != self.tags.len() || self.positions.len() != self.tags.len() {
            return Err(Error::DimMismatch("fused input row/tag/position counts".into()));
        }
        if self.rows.cols != d {
            return Err(Error::DimMismatch(format!(
                "fused input width {} vs hidden_dim {d}",
                self.rows.cols
            )));
        }
        let vis = self.visual_len();
        if self.tags[vis..].iter().any(|t| *t == FusedTag::VisualState) {
            return Err(Error::InvalidArgument(
                "visual-state rows must precede fused text rows".into(),
            ));
        }
        Ok(())
    }
}

/// FC projection that fuses `(embedding, previous hidden)` down to `d`.
#[derive(Debug, Clone)]
pub struct FcFuse {
    /// 2d x d weight.
    pub w: Matrix,
    /// d bias.
    pub b: Vec<f32>,
}

impl FcFuse {
    pub fn init(d: usize, rng: &mut Rng) -> Self {
        Self { w: Matrix::randn(2 * d, d, 0.06, rng), b: vec![0.0; d] }
    }

    /// Selector that passes the embedding through unchanged.
    pub fn select_embedding(d: usize) -> Self {
        let mut w = Matrix::zeros(2 * d, d);
        for i in 0..d {
            w.set(i, i, 1.0);
        }
        Self { w, b: vec![0.0; d] }
    }

    /// Selector that passes the previous hidden state through unchanged.
    pub fn select_hidden(d: usize) -> Self {
        let mut w = Matrix::zeros(2 * d, d);
        for i in 0..d {
            w.set(d + i, i, 1.0);
        }
        Self { w, b: vec![0.0; d] }
    }
}

/// Draft-side KV cache. In inference mode it may never hold visual rows.
#[derive(Debug, Clone)]
pub struct DraftKVCache {
    hidden_dim: usize,
    mode: DraftMode,
    k: Vec<f32>,
    v: Vec<f32>,
    tags: Vec<FusedTag>,
}

impl DraftKVCache {
    pub fn new(hidden_dim: usize, mode: DraftMode) -> Self {
        Self { hidden_dim, mode, k: Vec::new(), v: Vec::new(), tags: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }

    pub fn visual_rows(&self) -> usize {
        self.tags.iter().filter(|t| **t == FusedTag::VisualState).count()
    }

    fn push(&mut self, tag: FusedTag, k: &[f32], v: &[f32]) -> Result<()> {
        if self.mode == DraftMode::InferenceVata && tag == FusedTag::VisualState {
            return Err(Error::InvalidArgument(
                "inference-mode draft cache cannot hold visual rows".into(),
            ));
        }
        self.k.extend_from_slice(k);
        self.v.extend_from_slice(v);
        self.tags.push(tag);
        Ok(())
    }

    #[inline]
    pub fn k_row(&self, i: usize) -> &[f32] {
        &self.k[i * self.hidden_dim..(i + 1) * self.hidden_dim]
    }

    #[inline]
    pub fn v_row(&self, i: usize) -> &[f32] {
        &self.v[i * self.hidden_dim..(i + 1) * self.hidden_dim]
    }
}

// ---------------------------------------------------------------------------
// Operations
// ---------------------------------------------------------------------------

/// Fuse a token embedding with the previous position's hidden state:
/// `z = FC(e ⊕ h_prev)`, concatenation ordered (embedding, hidden).
pub fn hsr_fuse(e_t: &[f32], h_prev: &[f32], fc: &FcFuse) -> Result<Vec<f32>> {
    let d = fc.w.cols;
    if e_t.len() != d || h_prev.len() != d || fc.w.rows != 2 * d || fc.b.len() != d {
        return Err(Error::DimMismatch(format!(
            "hsr_fuse wants two {d}-vectors and a {}x{d} FC",
            2 * d
        )));
    }
    let mut cat = Vec::with_capacity(2 * d);
    cat.extend_from_slice(e_t);
    cat.extend_from_slice(h_prev);
    let mut z = vec_matmul(&cat, &fc.w)?;
    for (zi, bi) in z.iter_mut().zip(&fc.b) {
        *zi += bi;
    }
    Ok(z)
}

/// Multi-head attention of one (already rotated) query over the cached text
/// rows, scaled by `1/sqrt(head_dim)`. Returns the concatenated head
/// contexts.
pub fn vata_attention(q: &[f32], cache: &DraftKVCache, num_heads: usize) -> Result<Vec<f32>> {
    if cache.is_empty() {
        return Err(Error::InvalidArgument("vata_attention over empty cache".into()));
    }
    let d = cache.hidden_dim;
    if q.len() != d || num_heads == 0 || d % num_heads != 0 {
        return Err(Error::DimMismatch("query width mismatch".into()));
    }
    let hd = d / num_heads;
    let n = cache.len();
    let scale = 1.0 / (hd as f64).sqrt();
    let mut ctx = vec![0.0f64; d];
    for head in 0..num_heads {
        let qs = &q[head * hd..(head + 1) * hd];
        let mut scores = vec![0.0f64; n];
        for (j, s) in scores.iter_mut().enumerate() {
            let ks = &cache.k_row(j)[head * hd..(head + 1) * hd];
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
        for (j, s) in scores.iter().enumerate() {
            let p = s / sum;
            let vs = &cache.v_row(j)[head * hd..(head + 1) * hd];
            for (o, &x) in ctx[head * hd..(head + 1) * hd].iter_mut().zip(vs) {
                *o += p * x as f64;
            }
        }
    }
    Ok(ctx.iter().map(|&x| x as f32).collect())
}

/// Assemble the draft's initial training input: the mid-layer visual block
/// followed by `FC(e_t ⊕ h_{t-1})` per text row. `h_txt_prev` must already be
/// shift-aligned: row `i` holds the target state at the position preceding
/// text token `i`.
pub fn build_init_input(
    h_vis_mid: &Matrix,
    e_txt: &Matrix,
    h_txt_prev: &Matrix,
    fc: &FcFuse,
) -> Result<FusedInput> {
    let d = fc.w.cols;
    if e_txt.rows != h_txt_prev.rows {
        return Err(Error::DimMismatch(format!(
            "text rows misaligned: {} embeddings vs {} hidden rows",
            e_txt.rows, h_txt_prev.rows
        )));
    }
    if (h_vis_mid.rows > 0 && h_vis_mid.cols != d)
        || (e_txt.rows > 0 && e_txt.cols != d)
        || (h_txt_prev.rows > 0 && h_txt_prev.cols != d)
    {
        return Err(Error::DimMismatch("fused input width".into()));
    }
    let l_vis = h_vis_mid.rows;
    let l_txt = e_txt.rows;
    let mut rows = Matrix::zeros(l_vis + l_txt, d);
    let mut tags = Vec::with_capacity(l_vis + l_txt);
    for t in 0..l_vis {
        rows.row_mut(t).copy_from_slice(h_vis_mid.row(t));
        tags.push(FusedTag::VisualState);
    }
    for t in 0..l_txt {
        let z = hsr_fuse(e_txt.row(t), h_txt_prev.row(t), fc)?;
        rows.row_mut(l_vis + t).copy_from_slice(&z);
        tags.push(FusedTag::FusedText);
    }
    let positions = (0..l_vis + l_txt).collect();
    Ok(FusedInput { rows, tags, positions })
}

/// Same layout as [`build_init_input`] but with the draft's own prior-pass
/// hidden states in place of the target text states; the visual block is
/// reused unchanged.
pub fn build_recursive_input(
    h_vis_mid: &Matrix,
    e_txt: &Matrix,
    h_hat: &Matrix,
    fc: &FcFuse,
) -> Result<FusedInput> {
    build_init_input(h_vis_mid, e_txt, h_hat, fc)
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct DraftModel {
    pub cfg: DraftConfig,
    pub fc: FcFuse,
    pub layer: LayerWeights,
    /// Frozen copies of the target's token embeddings, final norm and head.
    pub embed: Matrix,
    pub final_norm: Vec<f32>,
    pub head: Matrix,
}

/// Output of a batch draft forward.
#[derive(Debug, Clone)]
pub struct DraftForwardOutput {
    /// Hidden states for every input row.
    pub hidden: Matrix,
    /// Logits for the text rows only.
    pub logits: Matrix,
    /// f32 multiplies spent in the layer (excludes the head).
    pub multiplies: u64,
}

impl DraftModel {
    /// Fresh draft with seeded trainable weights; embeddings, final norm and
    /// head are copied frozen from the target.
    pub fn init(target: &TargetModel, mode: DraftMode, rng: &mut Rng) -> Result<Self> {
        let d = target.cfg.hidden_dim;
        let cfg = DraftConfig {
            hidden_dim: d,
            num_heads: target.cfg.num_heads,
            vocab_size: target.cfg.vocab_size,
            mode,
        };
        cfg.validate()?;
        let proj_std = 0.06;
        let out_std = proj_std / 2.0;
        Ok(Self {
            cfg,
            fc: FcFuse::init(d, rng),
            layer: LayerWeights {
                attn_norm: vec![1.0; d],
                wq: Matrix::randn(d, d, proj_std, rng),
                wk: Matrix::randn(d, d, proj_std, rng),
                wv: Matrix::randn(d, d, proj_std, rng),
                wo: Matrix::randn(d, d, out_std, rng),
                mlp_norm: vec![1.0; d],
                w1: Matrix::randn(d, cfg.ff_dim(), proj_std, rng),
                w2: Matrix::randn(cfg.ff_dim(), d, out_std, rng),
            },
            embed: target.embed.clone(),
            final_norm: target.final_norm.clone(),
            head: target.head.clone(),
        })
    }

    pub fn embed_token(&self, token_id: u32) -> Vec<f32> {
        self.embed.row(token_id as usize).to_vec()
    }

    /// Frozen final norm + LM head over a draft hidden state.
    pub fn head_logits(&self, hidden: &[f32]) -> Vec<f32> {
        let normed = rmsnorm(hidden, &self.final_norm, RMS_EPS).expect("dims fixed");
        vec_matmul(&normed, &self.head).expect("dims fixed")
    }

    /// Analytic f32 multiply count for one row attending `n_ctx` rows.
    pub fn row_multiplies(&self, n_ctx: usize) -> u64 {
        let d = self.cfg.hidden_dim as u64;
        let ff = self.cfg.ff_dim() as u64;
        // norm scaling (2 norms) + q/k/v + rotary(q,k) + scores + context
        // + output proj + mlp.
        4 * d + 3 * d * d + 4 * d + 2 * (n_ctx as u64) * d + d * d + 2 * d * ff
    }

    /// Multiply count of one HSR fusion.
    pub fn fuse_multiplies(&self) -> u64 {
        let d = self.cfg.hidden_dim as u64;
        2 * d * d
    }

    /// One decoder layer over the fused input. Causal attention across all
    /// rows in training mode; inference mode rejects visual rows.
    pub fn forward(&self, input: &FusedInput, mode: DraftMode) -> Result<DraftForwardOutput> {
        if input.is_empty() {
            return Err(Error::EmptySequence);
        }
        let d = self.cfg.hidden_dim;
        input.validate(d)?;
        if mode == DraftMode::InferenceVata && input.visual_len() > 0 {
            return Err(Error::InvalidArgument(
                "inference-mode draft input must contain text rows only".into(),
            ));
        }
        let mut cache = DraftKVCache::new(d, mode);
        let n = input.len();
        let mut hidden = Matrix::zeros(n, d);
        let mut multiplies = 0u64;
        for t in 0..n {
            let (h, _k, _v) = self.row_forward(
                input.row_state(t),
                input.positions[t],
                input.tags[t],
                &mut cache,
                &[],
            )?;
            multiplies += self.row_multiplies(t + 1);
            hidden.row_mut(t).copy_from_slice(&h);
        }
        let l_vis = input.visual_len();
        let l_txt = input.text_len();
        let mut logits = Matrix::zeros(l_txt, self.cfg.vocab_size);
        for t in 0..l_txt {
            logits.row_mut(t).copy_from_slice(&self.head_logits(hidden.row(l_vis + t)));
        }
        Ok(DraftForwardOutput { hidden, logits, multiplies })
    }

    /// One row through the layer, appending its K/V to `cache`; `extra_kv`
    /// holds provisional ancestor rows (tree nodes) visible to this row.
    ///
    /// Returns (hidden, k, v). The k row is already rotated to `pos`.
    pub fn row_forward(
        &self,
        z: &[f32],
        pos: usize,
        tag: FusedTag,
        cache: &mut DraftKVCache,
        extra_kv: &[(&[f32], &[f32])],
    ) -> Result<(Vec<f32>, Vec<f32>, Vec<f32>)> {
        let d = self.cfg.hidden_dim;
        let heads = self.cfg.num_heads;
        let hd = self.cfg.head_dim();
        let lw = &self.layer;
        let normed = rmsnorm(z, &lw.attn_norm, RMS_EPS)?;
        let mut q = vec_matmul(&normed, &lw.wq)?;
        let mut k = vec_matmul(&normed, &lw.wk)?;
        let v = vec_matmul(&normed, &lw.wv)?;
        apply_rotary(&mut q, pos, heads, hd);
        apply_rotary(&mut k, pos, heads, hd);

        // Context = cache rows, then ancestors, then self.
        let n_ctx = cache.len() + extra_kv.len() + 1;
        let scale = 1.0 / (hd as f64).sqrt();
        let mut ctx = vec![0.0f64; d];
        for head in 0..heads {
            let qs = &q[head * hd..(head + 1) * hd];
            let mut scores = vec![0.0f64; n_ctx];
            for (j, score) in scores.iter_mut().enumerate() {
                let krow: &[f32] = if j < cache.len() {
                    cache.k_row(j)
                } else if j < cache.len() + extra_kv.len() {
                    extra_kv[j - cache.len()].0
                } else {
                    &k
                };
                let ks = &krow[head * hd..(head + 1) * hd];
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
                let vrow: &[f32] = if j < cache.len() {
                    cache.v_row(j)
                } else if j < cache.len() + extra_kv.len() {
                    extra_kv[j - cache.len()].1
                } else {
                    &v
                };
                let vs = &vrow[head * hd..(head + 1) * hd];
                for (o, &x) in ctx[head * hd..(head + 1) * hd].iter_mut().zip(vs) {
                    *o += p * x as f64;
                }
            }
        }
        let ctx32: Vec<f32> = ctx.iter().map(|&x| x as f32).collect();
        let attn_out = vec_matmul(&ctx32, &lw.wo)?;
        let mut h: Vec<f32> = z.iter().zip(&attn_out).map(|(a, b)| a + b).collect();
        let normed2 = rmsnorm(&h, &lw.mlp_norm, RMS_EPS)?;
        let mut inner = vec_matmul(&normed2, &lw.w1)?;
        for x in inner.iter_mut() {
            *x = silu(*x);
        }
        let mlp_out = vec_matmul(&inner, &lw.w2)?;
        for (hi, m) in h.iter_mut().zip(&mlp_out) {
            *hi += m;
        }
        cache.push(tag, &k, &v)?;
        Ok((h, k, v))
    }
}

// ---------------------------------------------------------------------------
// Incremental session
// ---------------------------------------------------------------------------

/// Owns the draft-side state of one decode session: the text-row KV cache,
/// the hidden state of the newest committed row, and a multiply counter.
#[derive(Debug, Clone)]
pub struct DraftSession<'a> {
    pub model: &'a DraftModel,
    cache: DraftKVCache,
    last_hidden: Option<Vec<f32>>,
    multiplies: u64,
}

impl<'a> DraftSession<'a> {
    pub fn new(model: &'a DraftModel) -> Self {
        Self {
            model,
            cache: DraftKVCache::new(model.cfg.hidden_dim, DraftMode::InferenceVata),
            last_hidden: None,
            multiplies: 0,
        }
    }

    /// Session variant whose cache accepts visual rows (full-visual baseline).
    pub fn new_full_visual(model: &'a DraftModel) -> Self {
        Self {
            model,
            cache: DraftKVCache::new(model.cfg.hidden_dim, DraftMode::TrainingFullCausal),
            last_hidden: None,
            multiplies: 0,
        }
    }

    pub fn cache_len(&self) -> usize {
        self.cache.len()
    }

    pub fn cache_visual_rows(&self) -> usize {
        self.cache.visual_rows()
    }

    pub fn multiplies(&self) -> u64 {
        self.multiplies
    }

    pub fn reset_multiplies(&mut self) {
        self.multiplies = 0;
    }

    /// Hidden state of the most recently appended row.
    pub fn last_hidden(&self) -> Option<&[f32]> {
        self.last_hidden.as_deref()
    }

    /// Append one committed row at an explicit rotary position.
    pub fn append_row_at(&mut self, z: &[f32], tag: FusedTag, pos: usize) -> Result<()> {
        let (h, _k, _v) = self.model.row_forward(z, pos, tag, &mut self.cache, &[])?;
        self.multiplies += self.model.row_multiplies(self.cache.len());
        self.last_hidden = Some(h);
        Ok(())
    }

    /// Append one committed row at the next compacted cache position.
    pub fn append_row(&mut self, z: &[f32], tag: FusedTag) -> Result<()> {
        let pos = self.cache.len();
        self.append_row_at(z, tag, pos)
    }

    /// Append a fused text row built from `(token embedding, previous hidden)`.
    pub fn append_fused(&mut self, token_id: u32, h_prev: &[f32]) -> Result<()> {
        let e = self.model.embed_token(token_id);
        let z = hsr_fuse(&e, h_prev, &self.model.fc)?;
        self.multiplies += self.model.fuse_multiplies();
        self.append_row(&z, FusedTag::FusedText)
    }

    /// Fused-row variant with an explicit rotary position.
    pub fn append_fused_at(&mut self, token_id: u32, h_prev: &[f32], pos: usize) -> Result<()> {
        let e = self.model.embed_token(token_id);
        let z = hsr_fuse(&e, h_prev, &self.model.fc)?;
        self.multiplies += self.model.fuse_multiplies();
        self.append_row_at(&z, FusedTag::FusedText, pos)
    }

    /// Run one ephemeral tree row: attends the cache plus the given ancestor
    /// K/V rows without extending the cache.
    pub fn tree_row(
        &mut self,
        token_id: u32,
        h_parent: &[f32],
        pos: usize,
        ancestors: &[(&[f32], &[f32])],
    ) -> Result<(Vec<f32>, Vec<f32>, Vec<f32>)> {
        let e = self.model.embed_token(token_id);
        let z = hsr_fuse(&e, h_parent, &self.model.fc)?;
        self.multiplies += self.model.fuse_multiplies();
        // Ephemeral row: pop its freshly appended K/V afterwards.
        let before_k = self.cache.k.len();
        let before_v = self.cache.v.len();
        let out = self.model.row_forward(&z, pos, FusedTag::FusedText, &mut self.cache, ancestors);
        if out.is_ok() {
            self.cache.k.truncate(before_k);
            self.cache.v.truncate(before_v);
            self.cache.tags.pop();
        }
        self.multiplies += self.model.row_multiplies(self.cache.len() + ancestors.len() + 1);
        out
    }

    /// Logits for a draft hidden state (counts head multiplies).
    pub fn dist_logits(&mut self, hidden: &[f32]) -> Vec<f32> {
        let d = self.model.cfg.hidden_dim as u64;
        let v = self.model.cfg.vocab_size as u64;
        self.multiplies += 2 * d + d * v;
        self.model.head_logits(hidden)
    }
}

// ---------------------------------------------------------------------------
// Checkpointing
// ---------------------------------------------------------------------------

impl DraftModel {
    pub fn to_checkpoint(&self) -> Checkpoint {
        let cfg = &self.cfg;
        let mut ckpt = Checkpoint::new(
            CheckpointKind::Draft,
            [1, cfg.hidden_dim as u32, cfg.num_heads as u32, cfg.vocab_size as u32, 0, 0],
        );
        ckpt.push("fc.w", self.fc.w.clone());
        ckpt.push("fc.b", row_matrix(&self.fc.b));
        ckpt.push("layer.attn_norm", row_matrix(&self.layer.attn_norm));
        ckpt.push("layer.wq", self.layer.wq.clone());
        ckpt.push("layer.wk", self.layer.wk.clone());
        ckpt.push("layer.wv", self.layer.wv.clone());
        ckpt.push("layer.wo", self.layer.wo.clone());
        ckpt.push("layer.mlp_norm", row_matrix(&self.layer.mlp_norm));
        ckpt.push("layer.w1", self.layer.w1.clone());
        ckpt.push("layer.w2", self.layer.w2.clone());
        ckpt.push("embed", self.embed.clone());
        ckpt.push("final_norm", row_matrix(&self.final_norm));
        ckpt.push("head", self.head.clone());
        ckpt
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.kind != CheckpointKind::Draft {
            return Err(Error::Checkpoint("not a draft checkpoint".into()));
        }
        let cfg = DraftConfig {
            hidden_dim: ckpt.config[1] as usize,
            num_heads: ckpt.config[2] as usize,
            vocab_size: ckpt.config[3] as usize,
            mode: DraftMode::InferenceVata,
        };
        cfg.validate()?;
        Ok(Self {
            cfg,
            fc: FcFuse { w: ckpt.get("fc.w")?.clone(), b: ckpt.get("fc.b")?.data.clone() },
            layer: LayerWeights {
                attn_norm: ckpt.get("layer.attn_norm")?.data.clone(),
                wq: ckpt.get("layer.wq")?.clone(),
                wk: ckpt.get("layer.wk")?.clone(),
                wv: ckpt.get("layer.wv")?.clone(),
                wo: ckpt.get("layer.wo")?.clone(),
                mlp_norm: ckpt.get("layer.mlp_norm")?.data.clone(),
                w1: ckpt.get("layer.w1")?.clone(),
                w2: ckpt.get("layer.w2")?.clone(),
            },
            embed: ckpt.get("embed")?.clone(),
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
