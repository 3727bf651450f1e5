//! Flat key=value configuration with CLI overrides.
//!
//! Lines are `key = value`; `#` starts a comment. Unknown keys are rejected.

use std::collections::BTreeMap;
use std::path::Path;

use sparrow_core::model::ModelConfig;

#[derive(Debug, Clone)]
pub struct Config {
    pub model: ModelConfig,
    pub seed: u64,
    // Synthetic task.
    pub task_seed: u64,
    pub task_informative: usize,
    pub task_queries: usize,
    pub task_jitter: f32,
    // Target pretraining.
    pub target_steps: usize,
    pub target_batch: usize,
    pub target_lr: f32,
    /// Pretraining curriculum: (steps, visual lengths) phases. The retrieval
    /// circuit forms on short distractor blocks; later phases harden the
    /// attention contrast on longer ones.
    pub target_curriculum: Vec<(usize, Vec<usize>)>,
    // Draft training.
    pub draft_examples: usize,
    pub draft_batch: usize,
    pub draft_lr: f32,
    pub draft_alpha: f32,
    pub draft_beta: f32,
    pub draft_stage1_epochs: usize,
    pub draft_stage2_epochs: usize,
    pub draft_mtp_depth: usize,
    pub draft_l_vis: usize,
    // Decoding / benchmarking.
    pub tree: String,
    pub temperature: f32,
    pub max_tokens: usize,
    pub bench_l_vis_sweep: Vec<usize>,
    pub bench_prompts: usize,
    pub bench_reps: usize,
    pub bench_parallel: bool,
    pub prune_fractions: Vec<f64>,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            model: ModelConfig::desk_default(),
            seed: 0,
            task_seed: sparrow_core::bench::DEFAULT_TASK_SEED,
            task_informative: sparrow_core::bench::DEFAULT_INFORMATIVE,
            task_queries: sparrow_core::bench::DEFAULT_QUERIES,
            task_jitter: sparrow_core::bench::DEFAULT_JITTER,
            target_steps: 0, // derived from the curriculum
            target_batch: 8,
            target_lr: 3e-3,
            target_curriculum: vec![
                (300, vec![24, 48]),
                (80, vec![48, 96, 192]),
                (45, vec![192, 384]),
            ],
            draft_examples: 2000,
            draft_batch: 16,
            draft_lr: 1.5e-3,
            draft_alpha: 1.0,
            draft_beta: 1.0,
            draft_stage1_epochs: 3,
            draft_stage2_epochs: 3,
            draft_mtp_depth: 2,
            draft_l_vis: 64,
            tree: "30-4-8".to_string(),
            temperature: 0.0,
            max_tokens: 17,
            bench_l_vis_sweep: vec![64, 512, 1536, 4096],
            bench_prompts: 8,
            bench_reps: 5,
            bench_parallel: false,
            prune_fractions: vec![0.0, 0.25, 0.5, 1.0],
        }
    }
}

/// `steps:len,len;steps:len,...` phases.
fn parse_curriculum(v: &str) -> Result<Vec<(usize, Vec<usize>)>, String> {
    v.split(';')
        .map(|phase| {
            let (steps, lens) =
                phase.split_once(':').ok_or_else(|| format!("phase {phase:?}: want steps:lens"))?;
            let steps = steps.trim().parse::<usize>().map_err(|e| format!("{phase:?}: {e}"))?;
            let lens = parse_usize_list(lens)?;
            if lens.is_empty() {
                return Err(format!("phase {phase:?} has no lengths"));
            }
            Ok((steps, lens))
        })
        .collect()
}

impl Config {
    /// Total pretraining steps: the explicit override or the curriculum sum.
    pub fn target_total_steps(&self) -> usize {
        if self.target_steps > 0 {
            self.target_steps
        } else {
            self.target_curriculum.iter().map(|(n, _)| n).sum()
        }
    }
}

fn parse_usize_list(v: &str) -> Result<Vec<usize>, String> {
    v.split(',')
        .map(|s| s.trim().parse::<usize>().map_err(|e| format!("{v:?}: {e}")))
        .collect()
}

fn parse_f64_list(v: &str) -> Result<Vec<f64>, String> {
    v.split(',')
        .map(|s| s.trim().parse::<f64>().map_err(|e| format!("{v:?}: {e}")))
        .collect()
}

impl Config {
    /// Apply one `key = value` assignment; unknown keys are an error.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        macro_rules! num {
            () => {
                value.trim().parse().map_err(|e| format!("{key}={value}: {e}"))?
            };
        }
        match key {
            "seed" => self.seed = num!(),
            "model.num_layers" => self.model.num_layers = num!(),
            "model.hidden_dim" => self.model.hidden_dim = num!(),
            "model.num_heads" => self.model.num_heads = num!(),
            "model.vocab_size" => self.model.vocab_size = num!(),
            "model.max_positions" => self.model.max_positions = num!(),
            "model.visual_alphabet" => self.model.visual_alphabet = num!(),
            "task.seed" => self.task_seed = num!(),
            "task.informative" => self.task_informative = num!(),
            "task.queries" => self.task_queries = num!(),
            "task.jitter" => self.task_jitter = num!(),
            "train_target.steps" => self.target_steps = num!(),
            "train_target.batch_size" => self.target_batch = num!(),
            "train_target.learning_rate" => self.target_lr = num!(),
            "train_target.curriculum" => self.target_curriculum = parse_curriculum(value)?,
            "train_draft.examples" => self.draft_examples = num!(),
            "train_draft.batch_size" => self.draft_batch = num!(),
            "train_draft.learning_rate" => self.draft_lr = num!(),
            "train_draft.alpha" => self.draft_alpha = num!(),
            "train_draft.beta" => self.draft_beta = num!(),
            "train_draft.stage1_epochs" => self.draft_stage1_epochs = num!(),
            "train_draft.stage2_epochs" => self.draft_stage2_epochs = num!(),
            "train_draft.mtp_depth" => self.draft_mtp_depth = num!(),
            "train_draft.l_vis" => self.draft_l_vis = num!(),
            "decode.tree" => self.tree = value.trim().to_string(),
            "decode.temperature" => self.temperature = num!(),
            "decode.max_tokens" => self.max_tokens = num!(),
            "bench.l_vis_sweep" => self.bench_l_vis_sweep = parse_usize_list(value)?,
            "bench.prompts" => self.bench_prompts = num!(),
            "bench.reps" => self.bench_reps = num!(),
            "bench.parallel" => {
                self.bench_parallel =
                    value.trim().parse().map_err(|e| format!("{key}={value}: {e}"))?
            }
            "bench.prune_fractions" => self.prune_fractions = parse_f64_list(value)?,
            other => return Err(format!("unknown config key {other:?}")),
        }
        Ok(())
    }

    pub fn apply_text(&mut self, text: &str) -> Result<(), String> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(format!("line {}: expected key = value", lineno + 1));
            };
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| format!("config {}: {e}", path.display()))?;
        let mut cfg = Self::default();
        cfg.apply_text(&text)?;
        Ok(cfg)
    }

    /// Render the effective configuration as key=value text.
    pub fn to_text(&self) -> String {
        let mut map: BTreeMap<&str, String> = BTreeMap::new();
        map.insert("seed", self.seed.to_string());
        map.insert("model.num_layers", self.model.num_layers.to_string());
        map.insert("model.hidden_dim", self.model.hidden_dim.to_string());
        map.insert("model.num_heads", self.model.num_heads.to_string());
        map.insert("model.vocab_size", self.model.vocab_size.to_string());
        map.insert("model.max_positions", self.model.max_positions.to_string());
        map.insert("model.visual_alphabet", self.model.visual_alphabet.to_string());
        map.insert("task.seed", self.task_seed.to_string());
        map.insert("task.informative", self.task_informative.to_string());
        map.insert("task.queries", self.task_queries.to_string());
        map.insert("task.jitter", self.task_jitter.to_string());
        map.insert("train_target.steps", self.target_steps.to_string());
        map.insert("train_target.batch_size", self.target_batch.to_string());
        map.insert("train_target.learning_rate", self.target_lr.to_string());
        map.insert(
            "train_target.curriculum",
            self.target_curriculum
                .iter()
                .map(|(n, ls)| format!("{n}:{}", join(ls)))
                .collect::<Vec<_>>()
                .join(";"),
        );
        map.insert("train_draft.examples", self.draft_examples.to_string());
        map.insert("train_draft.batch_size", self.draft_batch.to_string());
        map.insert("train_draft.learning_rate", self.draft_lr.to_string());
        map.insert("train_draft.alpha", self.draft_alpha.to_string());
        map.insert("train_draft.beta", self.draft_beta.to_string());
        map.insert("train_draft.stage1_epochs", self.draft_stage1_epochs.to_string());
        map.insert("train_draft.stage2_epochs", self.draft_stage2_epochs.to_string());
        map.insert("train_draft.mtp_depth", self.draft_mtp_depth.to_string());
        map.insert("train_draft.l_vis", self.draft_l_vis.to_string());
        map.insert("decode.tree", self.tree.clone());
        map.insert("decode.temperature", self.temperature.to_string());
        map.insert("decode.max_tokens", self.max_tokens.to_string());
        map.insert("bench.l_vis_sweep", join(&self.bench_l_vis_sweep));
        map.insert("bench.prompts", self.bench_prompts.to_string());
        map.insert("bench.reps", self.bench_reps.to_string());
        map.insert("bench.parallel", self.bench_parallel.to_string());
        map.insert(
            "bench.prune_fractions",
            self.prune_fractions.iter().map(|f| f.to_string()).collect::<Vec<_>>().join(","),
        );
        let mut out = String::new();
        for (k, v) in map {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }
}

fn join(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_assignments_comments_and_rejects_unknown_keys() {
        let mut cfg = Config::default();
        cfg.apply_text("# comment\ntrain_target.steps = 5\nbench.l_vis_sweep = 8, 16\n").unwrap();
        assert_eq!(cfg.target_steps, 5);
        assert_eq!(cfg.bench_l_vis_sweep, vec![8, 16]);
        assert!(cfg.apply_text("no_such_key = 1").is_err());
        assert!(cfg.apply_text("garbage line").is_err());
        assert!(cfg.apply_text("train_target.steps = abc").is_err());
    }

    #[test]
    fn roundtrips_through_text() {
        let mut cfg = Config::default();
        cfg.set("seed", "42").unwrap();
        cfg.set("decode.tree", "25-5-8").unwrap();
        let text = cfg.to_text();
        let mut back = Config::default();
        back.apply_text(&text).unwrap();
        assert_eq!(back.seed, 42);
        assert_eq!(back.tree, "25-5-8");
        assert_eq!(back.bench_l_vis_sweep, cfg.bench_l_vis_sweep);
    }
}
