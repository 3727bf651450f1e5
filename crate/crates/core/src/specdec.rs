//! Drafting/verification engine.
//!
//! One decode round: the draft grows a budgeted candidate tree from the last
//! committed token (feeding itself its own hidden states), the target scores
//! the pending root plus every tree node in a single batched pass with an
//! ancestor mask, a greedy or sampling verification walks the tree, and the
//! accepted root-to-node path is committed into the target cache while the
//! rejected rows roll back. Draft rows for committed tokens are then rebuilt
//! from the penultimate-layer states the verification pass produced.
//!
//! Greedy verification is exact: the decoded output matches vanilla greedy
//! decoding token for token. Sampling verification walks each node's drawn
//! children in draw order, accepting child `c` with probability
//! `min(1, p(c)/q(c))` against the running residual target distribution and
//! the running without-replacement draft distribution; on rejection the
//! residual subtracts the whole current draft distribution and renormalizes.
//! With children sampled without replacement at growth time this reproduces
//! the target distribution exactly.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::draft::{DraftModel, DraftSession, FusedTag};
use crate::error::{Error, Result};
use crate::model::{Item, TargetKVCache, TargetModel, TokenSequence};
use crate::numkernel::{argmax, sample_categorical, softmax, Matrix, Rng};

// ---------------------------------------------------------------------------
// Tree types
// ---------------------------------------------------------------------------

/// Candidate-tree budget, written `total-depth-width`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TreeConfig {
    pub total_tokens: usize,
    pub depth: usize,
    pub width: usize,
}

impl TreeConfig {
    pub fn new(total_tokens: usize, depth: usize, width: usize) -> Result<Self> {
        let cfg = Self { total_tokens, depth, width };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.total_tokens == 0 || self.depth == 0 || self.width == 0 {
            return Err(Error::InvalidArgument(
                "tree config fields must all be at least 1".into(),
            ));
        }
        Ok(())
    }

    /// Parse a `"30-4-8"` triple.
    pub fn parse_triple(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split('-').collect();
        if parts.len() != 3 {
            return Err(Error::InvalidArgument(format!(
                "tree config {s:?} is not a total-depth-width triple"
            )));
        }
        let nums: Vec<usize> = parts
            .iter()
            .map(|p| {
                p.parse::<usize>().map_err(|_| {
                    Error::InvalidArgument(format!("tree config field {p:?} is not a number"))
                })
            })
            .collect::<Result<_>>()?;
        Self::new(nums[0], nums[1], nums[2])
    }
}

impl std::fmt::Display for TreeConfig {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}-{}-{}", self.total_tokens, self.depth, self.width)
    }
}

impl Serialize for TreeConfig {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for TreeConfig {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        TreeConfig::parse_triple(&s).map_err(serde::de::Error::custom)
    }
}

/// One candidate node. Depth is zero-based: the root's children sit at
/// depth 0 and occupy absolute position `base_pos + depth`.
#[derive(Debug, Clone)]
pub struct TreeNode {
    pub token_id: u32,
    /// Parent node index; `None` anchors the node at the committed root.
    pub parent: Option<usize>,
    pub depth: usize,
    /// Draft probability of this token under its parent's distribution.
    pub prob: f64,
    /// Parent's cumulative log-prob plus `ln(prob)`.
    pub cum_log_prob: f64,
    /// Draft hidden state at this node's row.
    pub hidden: Vec<f32>,
    /// Draft-layer K/V rows so descendants can attend this node.
    pub kv: (Vec<f32>, Vec<f32>),
    /// Draft distribution at this node (populated when the node is expanded).
    pub dist: Option<Vec<f64>>,
    /// Tokens drawn at this node in draw order, kept in the tree or not.
    pub drawn: Vec<u32>,
}

/// Budgeted candidate tree anchored at the last committed token.
#[derive(Debug, Clone)]
pub struct DraftTree {
    pub nodes: Vec<TreeNode>,
    pub root_token: u32,
    /// Committed length the node positions count from.
    pub base_pos: usize,
    /// Draft distribution at the root.
    pub root_dist: Vec<f64>,
    /// Tokens drawn at the root in draw order.
    pub root_drawn: Vec<u32>,
}

impl DraftTree {
    /// Kept children of `parent` (`None` = root) in node-index order.
    pub fn children(&self, parent: Option<usize>) -> Vec<usize> {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| n.parent == parent)
            .map(|(i, _)| i)
            .collect()
    }

    fn drawn_at(&self, parent: Option<usize>) -> &[u32] {
        match parent {
            None => &self.root_drawn,
            Some(i) => &self.nodes[i].drawn,
        }
    }

    fn dist_at(&self, parent: Option<usize>) -> Option<&Vec<f64>> {
        match parent {
            None => Some(&self.root_dist),
            Some(i) => self.nodes[i].dist.as_ref(),
        }
    }
}

/// Linearized tree: tokens, absolute positions, and the reflexive
/// ancestor-closure mask consumed by `verify_batch`.
pub fn linearize_tree(tree: &DraftTree) -> Result<(Vec<u32>, Vec<usize>, Vec<Vec<bool>>)> {
    let n = tree.nodes.len();
    let mut tokens = Vec::with_capacity(n);
    let mut positions = Vec::with_capacity(n);
    let mut mask = vec![vec![false; n]; n];
    for (i, node) in tree.nodes.iter().enumerate() {
        if let Some(p) = node.parent {
            if p >= i {
                return Err(Error::InvalidArgument(format!(
                    "node {i} has non-topological parent link {p}"
                )));
            }
        }
        tokens.push(node.token_id);
        positions.push(tree.base_pos + node.depth);
        mask[i][i] = true;
        let mut cur = node.parent;
        while let Some(p) = cur {
            mask[i][p] = true;
            cur = tree.nodes[p].parent;
        }
    }
    Ok((tokens, positions, mask))
}

// ---------------------------------------------------------------------------
// Verification
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeOutcome {
    Accepted,
    Rejected,
    Untested,
}

/// Result of one verification walk.
#[derive(Debug, Clone)]
pub struct VerificationResult {
    /// Node indices of the accepted root-descending path.
    pub accepted_path: Vec<usize>,
    pub accepted_len: usize,
    pub bonus_token: u32,
    pub outcomes: Vec<NodeOutcome>,
}

impl VerificationResult {
    /// First token this round emits: the first accepted child or the bonus.
    pub fn first_token(&self, tree: &DraftTree) -> u32 {
        self.accepted_path
            .first()
            .map(|&i| tree.nodes[i].token_id)
            .unwrap_or(self.bonus_token)
    }
}

/// Greedy walk: follow the child matching the target argmax at each node;
/// the bonus is the argmax at the last accepted node.
///
/// `target_logits` holds one row per node plus a leading root row.
pub fn verify_greedy(tree: &DraftTree, target_logits: &Matrix) -> Result<VerificationResult> {
    let n = tree.nodes.len();
    if target_logits.rows != n + 1 {
        return Err(Error::DimMismatch(format!(
            "expected {} logits rows (root + nodes), got {}",
            n + 1,
            target_logits.rows
        )));
    }
    let mut outcomes = vec![NodeOutcome::Untested; n];
    let mut path = Vec::new();
    let mut cur: Option<usize> = None;
    loop {
        let row = cur.map_or(0, |i| i + 1);
        let want = argmax(target_logits.row(row)) as u32;
        let next = tree
            .children(cur)
            .into_iter()
            .find(|&c| tree.nodes[c].token_id == want);
        match next {
            Some(c) => {
                for sibling in tree.children(cur) {
                    outcomes[sibling] = if sibling == c {
                        NodeOutcome::Accepted
                    } else {
                        NodeOutcome::Rejected
                    };
                }
                path.push(c);
                cur = Some(c);
            }
            None => {
                for sibling in tree.children(cur) {
                    outcomes[sibling] = NodeOutcome::Rejected;
                }
                return Ok(VerificationResult {
                    accepted_len: path.len(),
                    accepted_path: path,
                    bonus_token: want,
                    outcomes,
                });
            }
        }
    }
}

/// Lossless sampling walk.
///
/// At each node the drawn children are revisited in draw order with a running
/// residual target distribution `r` (initially the node's target distribution)
/// and running draft distribution `s` (the node's draft distribution with
/// earlier-drawn siblings excluded and renormalized). A kept child `c` is
/// accepted with probability `min(1, r(c)/s(c))`; on rejection
/// `r <- normalize(max(r - s, 0))` and `c` joins the exclusions. Children
/// dropped by the budget only join the exclusions. When no child is accepted
/// the bonus is sampled from the final residual.
pub fn verify_sampling(
    tree: &DraftTree,
    target_probs: &[Vec<f64>],
    rng: &mut Rng,
) -> Result<VerificationResult> {
    let n = tree.nodes.len();
    if target_probs.len() != n + 1 {
        return Err(Error::DimMismatch(format!(
            "expected {} probability rows (root + nodes), got {}",
            n + 1,
            target_probs.len()
        )));
    }
    for row in target_probs {
        let sum: f64 = row.iter().sum();
        if row.iter().any(|&p| !(0.0..=1.0 + 1e-9).contains(&p)) || (sum - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidDistribution(format!("verification row sums to {sum}")));
        }
    }
    let mut outcomes = vec![NodeOutcome::Untested; n];
    let mut path = Vec::new();
    let mut cur: Option<usize> = None;
    let mut r: Vec<f64> = target_probs[0].clone();
    'descend: loop {
        let Some(base_q) = tree.dist_at(cur) else {
            // Unexpanded node: no drafted children to test.
            break;
        };
        let kept = tree.children(cur);
        let mut excluded_mass = 0.0f64;
        let mut excluded: Vec<u32> = Vec::new();
        for &drawn_tok in tree.drawn_at(cur) {
            let q_orig = base_q[drawn_tok as usize];
            let child = kept.iter().copied().find(|&c| tree.nodes[c].token_id == drawn_tok);
            match child {
                Some(c) => {
                    // Running draft distribution with exclusions renormalized.
                    let mass = (1.0 - excluded_mass).max(f64::MIN_POSITIVE);
                    let s_c = q_orig / mass;
                    let r_c = r[drawn_tok as usize];
                    let accept_p = if s_c <= 0.0 { 0.0 } else { (r_c / s_c).min(1.0) };
                    if rng.next_f64() < accept_p {
                        outcomes[c] = NodeOutcome::Accepted;
                        path.push(c);
                        r = target_probs[c + 1].clone();
                        cur = Some(c);
                        continue 'descend;
                    }
                    outcomes[c] = NodeOutcome::Rejected;
                    // r <- normalize(max(r - s, 0)) over the full vocabulary.
                    let mut total = 0.0f64;
                    for (x, rx) in r.iter_mut().enumerate() {
                        let s_x = if excluded.iter().any(|&e| e as usize == x) {
                            0.0
                        } else {
                            base_q[x] / mass
                        };
                        *rx = (*rx - s_x).max(0.0);
                        total += *rx;
                    }
                    if total <= 0.0 {
                        // Numerical guard: an exhausted residual means draft
                        // and target agreed on all remaining mass. Restart
                        // from the node's target distribution away from the
                        // tokens already tested or excluded.
                        r = target_probs[cur.map_or(0, |i| i + 1)].clone();
                        for &e in &excluded {
                            r[e as usize] = 0.0;
                        }
                        r[drawn_tok as usize] = 0.0;
                        let z: f64 = r.iter().sum();
                        if z > 0.0 {
                            for rx in r.iter_mut() {
                                *rx /= z;
                            }
                        }
                    } else {
                        for rx in r.iter_mut() {
                            *rx /= total;
                        }
                    }
                    excluded_mass += q_orig;
                    excluded.push(drawn_tok);
                }
                None => {
                    // Drawn but dropped by the budget: exclude without a coin.
                    excluded_mass += q_orig;
                    excluded.push(drawn_tok);
                }
            }
        }
        break;
    }
    let sum: f64 = r.iter().sum();
    let bonus = if sum <= 0.0 {
        // Degenerate residual; fall back to the current node's target argmax.
        let row = cur.map_or(0, |i| i + 1);
        target_probs[row]
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite"))
            .map(|(i, _)| i as u32)
            .expect("non-empty vocab")
    } else {
        let normed: Vec<f64> = r.iter().map(|&x| x / sum).collect();
        sample_categorical(&normed, rng)? as u32
    };
    Ok(VerificationResult {
        accepted_len: path.len(),
        accepted_path: path,
        bonus_token: bonus,
        outcomes,
    })
}

// ---------------------------------------------------------------------------
// Stats and records
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct DecodeStats {
    pub generated_tokens: usize,
    /// Target forward passes: the prefill plus one per decode round.
    pub target_calls: usize,
    /// Draft-layer row evaluations.
    pub draft_steps: usize,
    /// f32 multiplies spent in the draft (layer, fusion, and head).
    pub draft_multiplies: u64,
    pub wall_time_s: f64,
    pub decode_time_s: f64,
    pub prefill_time_s: f64,
}

impl DecodeStats {
    /// Average accepted length: generated tokens per target call.
    pub fn tau(&self) -> f64 {
        if self.target_calls == 0 {
            0.0
        } else {
            self.generated_tokens as f64 / self.target_calls as f64
        }
    }
}

/// JSON-lines record emitted per decoded prompt.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecodeRecord {
    pub prompt_id: String,
    pub tokens: Vec<u32>,
    pub tau: f64,
    pub target_calls: usize,
    pub prefill_time_s: f64,
    pub decode_time_s: f64,
    pub wall_time_s: f64,
}

/// Decoded tokens plus bookkeeping.
#[derive(Debug)]
pub struct DecodeOutput {
    pub tokens: Vec<u32>,
    pub stats: DecodeStats,
    /// Final committed target cache (prompt + generated prefix + any
    /// committed-but-unemitted tail from the final round).
    pub cache: TargetKVCache,
}

// ---------------------------------------------------------------------------
// Decode sessions
// ---------------------------------------------------------------------------

/// How the draft sees the prompt.
#[derive(Debug, Clone)]
pub enum DraftInputMode {
    /// Text-only fused rows at compacted positions; no visual rows at all.
    Sparrow,
    /// Raw visual embeddings plus fused text rows at original positions.
    /// `keep_rows` optionally restricts which visual rows survive (pruning);
    /// `None` keeps the whole block.
    FullVisual { keep_rows: Option<Vec<usize>> },
}

#[derive(Debug, Clone)]
pub struct DecodeOptions {
    pub tree: TreeConfig,
    pub temperature: f32,
    pub max_tokens: usize,
    pub stop_token: Option<u32>,
    pub seed: u64,
    pub draft_input: DraftInputMode,
}

/// One in-flight speculative decode: target cache, draft cache, the pending
/// root token, and counters. Strictly sequential; owns all mutable state.
pub struct DecodeSession<'a> {
    target: &'a TargetModel,
    pub draft_session: DraftSession<'a>,
    pub cache: TargetKVCache,
    temperature: f32,
    rng: Rng,
    /// Pending root: emitted token whose K/V are not yet in the cache.
    root_token: u32,
    /// Rotary position for the next draft-side text row.
    draft_text_pos: usize,
    pub stats: DecodeStats,
}

impl<'a> DecodeSession<'a> {
    /// Prefill the prompt on both sides and emit the first token.
    pub fn start(
        target: &'a TargetModel,
        draft: &'a DraftModel,
        prompt: &TokenSequence,
        temperature: f32,
        seed: u64,
        draft_input: &DraftInputMode,
    ) -> Result<(Self, u32)> {
        if !(temperature >= 0.0) || !temperature.is_finite() {
            return Err(Error::InvalidArgument(format!("temperature {temperature}")));
        }
        let started = Instant::now();
        let prefill = target.prefill(prompt)?;
        let prefill_time = started.elapsed().as_secs_f64();
        let mut rng = Rng::new(seed);
        let last_logits = prefill.logits.row(prompt.len() - 1);
        let first = pick_token(last_logits, temperature, &mut rng)?;

        let penult = &prefill.trace.levels[target.cfg.penultimate_level()];
        let l_vis = prompt.visual_len();
        let d = target.cfg.hidden_dim;

        let mut draft_session = match draft_input {
            DraftInputMode::Sparrow => DraftSession::new(draft),
            DraftInputMode::FullVisual { .. } => DraftSession::new_full_visual(draft),
        };
        let mut stats = DecodeStats {
            target_calls: 1,
            prefill_time_s: prefill_time,
            generated_tokens: 1,
            ..Default::default()
        };
        let mut draft_text_pos = 0usize;
        if let DraftInputMode::FullVisual { keep_rows } = draft_input {
            let keep: Vec<usize> = match keep_rows {
                Some(rows) => rows.clone(),
                None => (0..l_vis).collect(),
            };
            for &row in &keep {
                if row >= l_vis {
                    return Err(Error::InvalidArgument(format!(
                        "visual keep row {row} out of block length {l_vis}"
                    )));
                }
                let Item::Visual { embedding, .. } = &prompt.items()[row] else {
                    unreachable!("visual block is a prefix");
                };
                draft_session.append_row_at(embedding, FusedTag::VisualState, row)?;
                stats.draft_steps += 1;
            }
            draft_text_pos = l_vis;
        }
        // Fused rows for the prompt's text suffix: each row pairs the token
        // embedding with the target state at the preceding position.
        for (i, &tok) in prompt.text_tokens().iter().enumerate() {
            let abs = l_vis + i;
            let h_prev = if abs == 0 { vec![0.0; d] } else { penult.row(abs - 1).to_vec() };
            draft_session.append_fused_at(tok, &h_prev, draft_text_pos)?;
            draft_text_pos += 1;
            stats.draft_steps += 1;
        }
        // Row for the first emitted token (the pending root).
        let h_last = penult.row(prompt.len() - 1).to_vec();
        draft_session.append_fused_at(first, &h_last, draft_text_pos)?;
        draft_text_pos += 1;
        stats.draft_steps += 1;

        Ok((
            Self {
                target,
                draft_session,
                cache: prefill.cache,
                temperature,
                rng,
                root_token: first,
                draft_text_pos,
                stats,
            },
            first,
        ))
    }

    /// Grow a candidate tree from the pending root.
    ///
    /// Children are the top `width` of each expanded node's draft
    /// distribution under greedy decoding and are sampled from it without
    /// replacement under sampling; each level pools candidates globally and
    /// keeps the best by cumulative log-prob until the budget is exhausted.
    pub fn grow_tree(&mut self, cfg: &TreeConfig) -> Result<DraftTree> {
        cfg.validate()?;
        let root_hidden = self
            .draft_session
            .last_hidden()
            .ok_or(Error::EmptySequence)?
            .to_vec();
        let rank_temp = if self.temperature > 0.0 { self.temperature } else { 1.0 };
        let sampled = self.temperature > 0.0;
        let root_logits = self.draft_session.dist_logits(&root_hidden);
        let root_dist = softmax(&root_logits, rank_temp)?;
        let mut tree = DraftTree {
            nodes: Vec::new(),
            root_token: self.root_token,
            base_pos: self.cache.len() + 1,
            root_dist,
            root_drawn: Vec::new(),
        };
        // Frontier of expandable nodes; None marks the root.
        let mut frontier: Vec<Option<usize>> = vec![None];
        for level in 0..cfg.depth {
            let budget = cfg.total_tokens.saturating_sub(tree.nodes.len());
            if budget == 0 || frontier.is_empty() {
                break;
            }
            // Pool candidate children of the whole frontier.
            struct Candidate {
                parent: Option<usize>,
                token: u32,
                prob: f64,
                cum: f64,
            }
            let mut pool: Vec<Candidate> = Vec::new();
            for &parent in &frontier {
                if let Some(idx) = parent {
                    if tree.nodes[idx].dist.is_none() {
                        let hidden = tree.nodes[idx].hidden.clone();
                        let logits = self.draft_session.dist_logits(&hidden);
                        tree.nodes[idx].dist = Some(softmax(&logits, rank_temp)?);
                    }
                }
                let base = tree.dist_at(parent).expect("expanded above").clone();
                let parent_cum = parent.map_or(0.0, |i| tree.nodes[i].cum_log_prob);
                let drawn = draw_children(&base, cfg.width, sampled, &mut self.rng);
                for token in &drawn {
                    let prob = base[*token as usize];
                    pool.push(Candidate {
                        parent,
                        token: *token,
                        prob,
                        cum: parent_cum + prob.max(f64::MIN_POSITIVE).ln(),
                    });
                }
                match parent {
                    None => tree.root_drawn = drawn,
                    Some(idx) => tree.nodes[idx].drawn = drawn,
                }
            }
            // Keep the best candidates by cumulative log-prob.
            pool.sort_by(|a, b| b.cum.partial_cmp(&a.cum).expect("finite log-probs"));
            pool.truncate(cfg.width.min(budget));
            if pool.is_empty() {
                break;
            }
            let mut next_frontier = Vec::with_capacity(pool.len());
            for cand in pool {
                let parent_hidden: Vec<f32> = match cand.parent {
                    None => root_hidden.clone(),
                    Some(i) => tree.nodes[i].hidden.clone(),
                };
                // Draft-side ancestor K/V chain, root-to-parent order.
                let mut chain = Vec::new();
                let mut cur = cand.parent;
                while let Some(i) = cur {
                    chain.push(i);
                    cur = tree.nodes[i].parent;
                }
                chain.reverse();
                let ancestors: Vec<(&[f32], &[f32])> = chain
                    .iter()
                    .map(|&i| (tree.nodes[i].kv.0.as_slice(), tree.nodes[i].kv.1.as_slice()))
                    .collect();
                let pos = self.draft_text_pos + level;
                let (hidden, k, v) =
                    self.draft_session
                        .tree_row(cand.token, &parent_hidden, pos, &ancestors)?;
                self.stats.draft_steps += 1;
                tree.nodes.push(TreeNode {
                    token_id: cand.token,
                    parent: cand.parent,
                    depth: level,
                    prob: cand.prob,
                    cum_log_prob: cand.cum,
                    hidden,
                    kv: (k, v),
                    dist: None,
                    drawn: Vec::new(),
                });
                next_frontier.push(Some(tree.nodes.len() - 1));
            }
            frontier = next_frontier;
        }
        Ok(tree)
    }

    /// One draft-grow / target-verify / commit round. Returns the tokens this
    /// round emits (accepted path plus bonus, uncut).
    pub fn round(&mut self, cfg: &TreeConfig) -> Result<Vec<u32>> {
        let tree = self.grow_tree(cfg)?;
        let (tokens, positions, mask) = linearize_tree(&tree)?;
        // Verification batch: the pending root leads, then the tree rows.
        let n = tokens.len();
        let mut vtokens = Vec::with_capacity(n + 1);
        vtokens.push(self.root_token);
        vtokens.extend_from_slice(&tokens);
        let mut vmask = vec![vec![false; n + 1]; n + 1];
        vmask[0][0] = true;
        for i in 0..n {
            vmask[i + 1][0] = true;
            vmask[i + 1][i + 1] = true;
            for j in 0..n {
                if mask[i][j] {
                    vmask[i + 1][j + 1] = true;
                }
            }
        }
        // The tree's base_pos already counts the pending root, so node rows
        // sit at cache.len() + 1 + depth.
        let mut vpositions = Vec::with_capacity(n + 1);
        vpositions.push(self.cache.len());
        vpositions.extend(positions.iter().copied());

        let verify = self.target.verify_batch(&mut self.cache, &vtokens, &vmask, &vpositions)?;
        self.stats.target_calls += 1;

        let result = if self.temperature == 0.0 {
            verify_greedy(&tree, &verify.logits)?
        } else {
            let probs: Vec<Vec<f64>> = (0..verify.logits.rows)
                .map(|i| softmax(verify.logits.row(i), self.temperature))
                .collect::<Result<_>>()?;
            verify_sampling(&tree, &probs, &mut self.rng)?
        };

        // Commit the root row plus the accepted path.
        let mut keep = vec![0usize];
        keep.extend(result.accepted_path.iter().map(|&i| i + 1));
        self.cache.commit_prefix(&keep)?;

        // Refresh draft rows for the newly committed tokens from the target
        // states the verification pass produced, then seat the bonus as the
        // next pending root.
        let mut emitted = Vec::with_capacity(result.accepted_len + 1);
        let mut h_prev = verify.penult.row(0).to_vec();
        for &node_idx in &result.accepted_path {
            let tok = tree.nodes[node_idx].token_id;
            self.draft_session.append_fused_at(tok, &h_prev, self.draft_text_pos)?;
            self.draft_text_pos += 1;
            self.stats.draft_steps += 1;
            h_prev = verify.penult.row(node_idx + 1).to_vec();
            emitted.push(tok);
        }
        self.draft_session.append_fused_at(result.bonus_token, &h_prev, self.draft_text_pos)?;
        self.draft_text_pos += 1;
        self.stats.draft_steps += 1;
        self.root_token = result.bonus_token;
        emitted.push(result.bonus_token);
        Ok(emitted)
    }
}

fn pick_token(logits: &[f32], temperature: f32, rng: &mut Rng) -> Result<u32> {
    if temperature == 0.0 {
        Ok(argmax(logits) as u32)
    } else {
        let p = softmax(logits, temperature)?;
        Ok(sample_categorical(&p, rng)? as u32)
    }
}

/// Draw up to `width` distinct children from a draft distribution: the top
/// entries under greedy growth, a without-replacement sample otherwise.
fn draw_children(dist: &[f64], width: usize, sampled: bool, rng: &mut Rng) -> Vec<u32> {
    if sampled {
        let mut remaining = dist.to_vec();
        let mut drawn = Vec::with_capacity(width);
        for _ in 0..width.min(dist.len()) {
            let mass: f64 = remaining.iter().sum();
            if mass <= 1e-12 {
                break;
            }
            let normed: Vec<f64> = remaining.iter().map(|&x| x / mass).collect();
            let c = sample_categorical(&normed, rng).expect("valid renormalized dist");
            drawn.push(c as u32);
            remaining[c] = 0.0;
        }
        drawn
    } else {
        let mut idx: Vec<usize> = (0..dist.len()).collect();
        idx.sort_by(|&a, &b| dist[b].partial_cmp(&dist[a]).expect("finite probs"));
        idx.into_iter().take(width).map(|i| i as u32).collect()
    }
}

// ---------------------------------------------------------------------------
// Top-level decode loops
// ---------------------------------------------------------------------------

/// Tree-based speculative decoding.
pub fn decode(
    target: &TargetModel,
    draft: &DraftModel,
    prompt: &TokenSequence,
    opts: &DecodeOptions,
) -> Result<DecodeOutput> {
    opts.tree.validate()?;
    if opts.max_tokens == 0 {
        return Ok(DecodeOutput {
            tokens: Vec::new(),
            stats: DecodeStats::default(),
            cache: target.empty_cache(),
        });
    }
    let started = Instant::now();
    let (mut session, first) = DecodeSession::start(
        target,
        draft,
        prompt,
        opts.temperature,
        opts.seed,
        &opts.draft_input,
    )?;
    let mut tokens = vec![first];
    let mut stopped = opts.stop_token == Some(first);
    while !stopped && tokens.len() < opts.max_tokens {
        let emitted = session.round(&opts.tree)?;
        for tok in emitted {
            tokens.push(tok);
            session.stats.generated_tokens += 1;
            if opts.stop_token == Some(tok) || tokens.len() >= opts.max_tokens {
                stopped = true;
                break;
            }
        }
    }
    let mut stats = session.stats;
    stats.draft_multiplies = session.draft_session.multiplies();
    stats.wall_time_s = started.elapsed().as_secs_f64();
    stats.decode_time_s = stats.wall_time_s - stats.prefill_time_s;
    Ok(DecodeOutput { tokens, stats, cache: session.cache })
}

/// Vanilla autoregressive decoding; the baseline for speedup ratios.
pub fn vanilla_decode(
    target: &TargetModel,
    prompt: &TokenSequence,
    temperature: f32,
    max_tokens: usize,
    stop_token: Option<u32>,
    seed: u64,
) -> Result<DecodeOutput> {
    if !(temperature >= 0.0) || !temperature.is_finite() {
        return Err(Error::InvalidArgument(format!("temperature {temperature}")));
    }
    if max_tokens == 0 {
        return Ok(DecodeOutput {
            tokens: Vec::new(),
            stats: DecodeStats::default(),
            cache: target.empty_cache(),
        });
    }
    let started = Instant::now();
    let prefill = target.prefill(prompt)?;
    let prefill_time = started.elapsed().as_secs_f64();
    let mut rng = Rng::new(seed);
    let mut cache = prefill.cache;
    let mut stats = DecodeStats {
        target_calls: 1,
        prefill_time_s: prefill_time,
        ..Default::default()
    };
    let mut tokens = Vec::with_capacity(max_tokens);
    let mut logits = prefill.logits.row(prompt.len() - 1).to_vec();
    loop {
        let tok = pick_token(&logits, temperature, &mut rng)?;
        tokens.push(tok);
        stats.generated_tokens += 1;
        if stop_token == Some(tok) || tokens.len() >= max_tokens {
            break;
        }
        let step = target.decode_step(&mut cache, tok)?;
        stats.target_calls += 1;
        logits = step.logits;
    }
    stats.wall_time_s = started.elapsed().as_secs_f64();
    stats.decode_time_s = stats.wall_time_s - stats.prefill_time_s;
    Ok(DecodeOutput { tokens, stats, cache })
}
