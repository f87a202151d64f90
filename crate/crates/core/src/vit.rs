//! Micro vision transformer with key/value prompt injection.
//!
//! Prompt tokens are layer-normed and projected to keys and values
//! alongside the image tokens, but never enter the query stream, so every
//! block maps `N+1` tokens to `N+1` tokens regardless of prompt length.
//! Shared prompts are re-injected fresh at every layer; group prompts from
//! the pool are added to the last `L−K` layers during the second phase,
//! which resumes from the activations cached after block `K`.

use std::collections::{BTreeMap, HashMap};

use rand::Rng;

use crate::error::{Error, Result};
use crate::image::{Image, CHANNELS};
use crate::rng::{truncated_normal_tensor, xavier_uniform};
use crate::tape::{Tape, Var, NORM_FLOOR};
use crate::tensor::Tensor;

/// Standard deviation of the truncated-normal prompt initialisation.
pub const PROMPT_INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq)]
pub struct VitConfig {
    pub image_side: usize,
    pub patch: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub ffn_dim: usize,
}

impl Default for VitConfig {
    fn default() -> Self {
        VitConfig {
            image_side: 32,
            patch: 4,
            dim: 64,
            depth: 8,
            heads: 4,
            ffn_dim: 256,
        }
    }
}

impl VitConfig {
    pub fn num_patches(&self) -> usize {
        let per_side = self.image_side / self.patch;
        per_side * per_side
    }

    pub fn tokens(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * CHANNELS
    }

    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        for (name, v) in [
            ("model.image_side", self.image_side),
            ("model.patch", self.patch),
            ("model.dim", self.dim),
            ("model.depth", self.depth),
            ("model.heads", self.heads),
            ("model.ffn_dim", self.ffn_dim),
        ] {
            if v == 0 {
                errs.push(format!("{name} must be positive"));
            }
        }
        if self.patch > 0 && self.image_side % self.patch != 0 {
            errs.push(format!(
                "model.image_side ({}) must be divisible by model.patch ({})",
                self.image_side, self.patch
            ));
        }
        if self.heads > 0 && self.dim % self.heads != 0 {
            errs.push(format!(
                "model.dim ({}) must be divisible by model.heads ({})",
                self.dim, self.heads
            ));
        }
        errs
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PromptConfig {
    /// Shared prompt length `p`.
    pub shared_len: usize,
    /// Pool size `m`.
    pub pool_size: usize,
    /// Length of each group prompt per layer.
    pub group_len: usize,
    /// Split depth `K`: group prompts enter blocks `K+1..=L`.
    pub split_depth: usize,
    /// Number of matched prompts ensembled per sample.
    pub top_k: usize,
}

impl PromptConfig {
    pub fn desk(depth: usize) -> Self {
        PromptConfig {
            shared_len: 10,
            pool_size: 20,
            group_len: 10,
            split_depth: depth / 2,
            top_k: 2,
        }
    }

    pub fn validate(&self, depth: usize) -> Vec<String> {
        let mut errs = Vec::new();
        if self.pool_size == 0 {
            errs.push("prompt.pool_size must be at least 1".into());
        }
        if self.split_depth == 0 || self.split_depth >= depth {
            errs.push(format!(
                "prompt.split_depth ({}) must satisfy 1 <= K < model.depth ({depth})",
                self.split_depth
            ));
        }
        if self.top_k == 0 || self.top_k > self.pool_size {
            errs.push(format!(
                "prompt.top_k ({}) must satisfy 1 <= k <= prompt.pool_size ({})",
                self.top_k, self.pool_size
            ));
        }
        errs
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub ln1_gamma: Tensor,
    pub ln1_beta: Tensor,
    pub w_q: Tensor,
    pub b_q: Tensor,
    pub w_k: Tensor,
    pub b_k: Tensor,
    pub w_v: Tensor,
    pub b_v: Tensor,
    pub w_o: Tensor,
    pub b_o: Tensor,
    pub ln2_gamma: Tensor,
    pub ln2_beta: Tensor,
    pub w_ff1: Tensor,
    pub b_ff1: Tensor,
    pub w_ff2: Tensor,
    pub b_ff2: Tensor,
}

const BLOCK_FIELDS: [&str; 16] = [
    "ln1.gamma", "ln1.beta", "attn.w_q", "attn.b_q", "attn.w_k", "attn.b_k", "attn.w_v", "attn.b_v",
    "attn.w_o", "attn.b_o", "ln2.gamma", "ln2.beta", "ffn.w1", "ffn.b1", "ffn.w2", "ffn.b2",
];

impl Block {
    fn init(cfg: &VitConfig, rng: &mut impl Rng) -> Self {
        let d = cfg.dim;
        let f = cfg.ffn_dim;
        Block {
            ln1_gamma: Tensor::full(&[d], 1.0),
            ln1_beta: Tensor::zeros(&[d]),
            w_q: xavier_uniform(d, d, rng),
            b_q: Tensor::zeros(&[d]),
            w_k: xavier_uniform(d, d, rng),
            b_k: Tensor::zeros(&[d]),
            w_v: xavier_uniform(d, d, rng),
            b_v: Tensor::zeros(&[d]),
            w_o: xavier_uniform(d, d, rng),
            b_o: Tensor::zeros(&[d]),
            ln2_gamma: Tensor::full(&[d], 1.0),
            ln2_beta: Tensor::zeros(&[d]),
            w_ff1: xavier_uniform(d, f, rng),
            b_ff1: Tensor::zeros(&[f]),
            w_ff2: xavier_uniform(f, d, rng),
            b_ff2: Tensor::zeros(&[d]),
        }
    }

    fn zeros(cfg: &VitConfig) -> Self {
        let (d, f) = (cfg.dim, cfg.ffn_dim);
        Block {
            ln1_gamma: Tensor::zeros(&[d]),
            ln1_beta: Tensor::zeros(&[d]),
            w_q: Tensor::zeros(&[d, d]),
            b_q: Tensor::zeros(&[d]),
            w_k: Tensor::zeros(&[d, d]),
            b_k: Tensor::zeros(&[d]),
            w_v: Tensor::zeros(&[d, d]),
            b_v: Tensor::zeros(&[d]),
            w_o: Tensor::zeros(&[d, d]),
            b_o: Tensor::zeros(&[d]),
            ln2_gamma: Tensor::zeros(&[d]),
            ln2_beta: Tensor::zeros(&[d]),
            w_ff1: Tensor::zeros(&[d, f]),
            b_ff1: Tensor::zeros(&[f]),
            w_ff2: Tensor::zeros(&[f, d]),
            b_ff2: Tensor::zeros(&[d]),
        }
    }

    fn fields(&self) -> [&Tensor; 16] {
        [
            &self.ln1_gamma, &self.ln1_beta, &self.w_q, &self.b_q, &self.w_k, &self.b_k, &self.w_v,
            &self.b_v, &self.w_o, &self.b_o, &self.ln2_gamma, &self.ln2_beta, &self.w_ff1,
            &self.b_ff1, &self.w_ff2, &self.b_ff2,
        ]
    }

    fn fields_mut(&mut self) -> [&mut Tensor; 16] {
        [
            &mut self.ln1_gamma, &mut self.ln1_beta, &mut self.w_q, &mut self.b_q, &mut self.w_k,
            &mut self.b_k, &mut self.w_v, &mut self.b_v, &mut self.w_o, &mut self.b_o,
            &mut self.ln2_gamma, &mut self.ln2_beta, &mut self.w_ff1, &mut self.b_ff1,
            &mut self.w_ff2, &mut self.b_ff2,
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VisionTransformer {
    pub cfg: VitConfig,
    /// `patch²·3 × d`
    pub patch_proj: Tensor,
    pub patch_bias: Tensor,
    /// `1 × d`
    pub class_token: Tensor,
    /// `N × d`
    pub pos_embed: Tensor,
    pub blocks: Vec<Block>,
}

impl VisionTransformer {
    pub fn init(cfg: &VitConfig, rng: &mut impl Rng) -> Self {
        let d = cfg.dim;
        VisionTransformer {
            cfg: cfg.clone(),
            patch_proj: xavier_uniform(cfg.patch_dim(), d, rng),
            patch_bias: Tensor::zeros(&[d]),
            class_token: truncated_normal_tensor(&[1, d], 0.02, rng),
            pos_embed: truncated_normal_tensor(&[cfg.num_patches(), d], 0.02, rng),
            blocks: (0..cfg.depth).map(|_| Block::init(cfg, rng)).collect(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("backbone.patch_proj".to_string(), &self.patch_proj),
            ("backbone.patch_bias".to_string(), &self.patch_bias),
            ("backbone.class_token".to_string(), &self.class_token),
            ("backbone.pos_embed".to_string(), &self.pos_embed),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            for (field, t) in BLOCK_FIELDS.iter().zip(b.fields()) {
                out.push((format!("backbone.blocks.{i}.{field}"), t));
            }
        }
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = vec![
            ("backbone.patch_proj".to_string(), &mut self.patch_proj),
            ("backbone.patch_bias".to_string(), &mut self.patch_bias),
            ("backbone.class_token".to_string(), &mut self.class_token),
            ("backbone.pos_embed".to_string(), &mut self.pos_embed),
        ];
        for (i, b) in self.blocks.iter_mut().enumerate() {
            for (field, t) in BLOCK_FIELDS.iter().zip(b.fields_mut()) {
                out.push((format!("backbone.blocks.{i}.{field}"), t));
            }
        }
        out
    }
}

/// Per-layer shared prompt `u`, stored as `L × p × d`.
#[derive(Clone, Debug, PartialEq)]
pub struct SharedPrompt {
    pub tokens: Tensor,
}

impl SharedPrompt {
    pub fn zeros(depth: usize, len: usize, dim: usize) -> Self {
        SharedPrompt {
            tokens: Tensor::zeros(&[depth, len, dim]),
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.shape()[1]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn depth(&self) -> usize {
        self.tokens.shape()[0]
    }
}

/// Group prompt pool: `m` keys (`m × d`) and `m` prompts of `L−K` layers
/// each (`m × (L−K)·p × d`).
#[derive(Clone, Debug, PartialEq)]
pub struct GroupPromptPool {
    pub keys: Tensor,
    pub prompts: Tensor,
    pub split_depth: usize,
    pub prompt_len: usize,
}

impl GroupPromptPool {
    pub fn size(&self) -> usize {
        self.keys.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.keys.shape()[1]
    }

    /// Number of layers that receive group prompts, `L−K`.
    pub fn layers(&self) -> usize {
        let rows_per_entry = self.prompts.shape()[1];
        if self.prompt_len == 0 {
            0
        } else {
            rows_per_entry / self.prompt_len
        }
    }

    fn rows_per_entry(&self) -> usize {
        self.prompts.shape()[1]
    }

    /// Elementwise mean of the selected prompts, `(L−K)·p × d`.
    pub fn ensemble(&self, indices: &[usize]) -> Result<Tensor> {
        if indices.is_empty() {
            return Err(Error::invalid("ensemble_prompts", "no prompt indices"));
        }
        let mut tape = Tape::new();
        let all = tape.constant(self.prompts.clone());
        let r = ensemble_on_tape(&mut tape, all, self.rows_per_entry(), self.size(), indices)?;
        Ok(tape.value(r).clone())
    }
}

fn ensemble_on_tape(tape: &mut Tape, prompts: Var, rows: usize, m: usize, indices: &[usize]) -> Result<Var> {
    if indices.is_empty() {
        return Err(Error::invalid("ensemble_prompts", "no prompt indices"));
    }
    let mut parts = Vec::with_capacity(indices.len());
    for &j in indices {
        if j >= m {
            return Err(Error::invalid("ensemble_prompts", format!("index {j} outside pool of {m}")));
        }
        parts.push(tape.slice_rows(prompts, j * rows, rows)?);
    }
    tape.mean_of(&parts)
}

/// Truncated-normal initialisation of the shared prompt (`±2σ`, σ = 0.02).
pub fn init_shared_prompt(depth: usize, len: usize, dim: usize, rng: &mut impl Rng) -> SharedPrompt {
    SharedPrompt {
        tokens: truncated_normal_tensor(&[depth, len, dim], PROMPT_INIT_STD, rng),
    }
}

/// Truncated-normal initialisation of the pool; keys are l2-normalised.
pub fn init_pool(vit: &VitConfig, prompts: &PromptConfig, rng: &mut impl Rng) -> GroupPromptPool {
    let d = vit.dim;
    let m = prompts.pool_size;
    let layers = vit.depth - prompts.split_depth;
    let mut keys = truncated_normal_tensor(&[m, d], PROMPT_INIT_STD, rng);
    for row in keys.data_mut().chunks_mut(d) {
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_FLOOR);
        row.iter_mut().for_each(|v| *v /= n);
    }
    let prompts_t = truncated_normal_tensor(&[m, layers * prompts.group_len, d], PROMPT_INIT_STD, rng);
    GroupPromptPool {
        keys,
        prompts: prompts_t,
        split_depth: prompts.split_depth,
        prompt_len: prompts.group_len,
    }
}

/// Cosine classifier weights, `C × d`.
#[derive(Clone, Debug, PartialEq)]
pub struct CosineClassifier {
    pub weight: Tensor,
}

impl CosineClassifier {
    pub fn init(classes: usize, dim: usize, rng: &mut impl Rng) -> Self {
        CosineClassifier {
            weight: truncated_normal_tensor(&[classes, dim], PROMPT_INIT_STD, rng),
        }
    }

    pub fn classes(&self) -> usize {
        self.weight.shape()[0]
    }
}

/// Plain linear head used only while pretraining the backbone.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearHead {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl LinearHead {
    pub fn init(dim: usize, classes: usize, rng: &mut impl Rng) -> Self {
        LinearHead {
            weight: xavier_uniform(dim, classes, rng),
            bias: Tensor::zeros(&[classes]),
        }
    }
}

/// Cosine similarity of `a` and `b` with the norm floor of `l2_normalize`.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_FLOOR);
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_FLOOR);
    a.iter().zip(b).map(|(x, y)| (x / na) * (y / nb)).sum()
}

/// `s_i = ⟨c/‖c‖, W_i/‖W_i‖⟩`.
pub fn cosine_scores(class_token: &[f64], weight: &Tensor) -> Result<Vec<f64>> {
    if class_token.len() != weight.cols() {
        return Err(Error::ShapeMismatch {
            op: "cosine_scores",
            left: vec![class_token.len()],
            right: weight.shape().to_vec(),
        });
    }
    Ok((0..weight.rows()).map(|i| cosine(class_token, weight.row(i))).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatchResult {
    pub indices: Vec<usize>,
    pub similarities: Vec<f64>,
}

/// Top-`k` keys by cosine similarity to `query`; ties go to the lower index.
pub fn match_prompts(query: &[f64], keys: &Tensor, k: usize) -> Result<MatchResult> {
    let m = keys.rows();
    if k == 0 || k > m {
        return Err(Error::invalid("match_prompts", format!("k = {k} with pool size {m}")));
    }
    if query.len() != keys.cols() {
        return Err(Error::ShapeMismatch {
            op: "match_prompts",
            left: vec![query.len()],
            right: keys.shape().to_vec(),
        });
    }
    // + 0.0 folds −0.0 into 0.0 so that total_cmp treats them as a tie
    let sims: Vec<f64> = (0..m).map(|i| cosine(query, keys.row(i)) + 0.0).collect();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| sims[b].total_cmp(&sims[a]).then(a.cmp(&b)));
    order.truncate(k);
    Ok(MatchResult {
        similarities: order.iter().map(|&i| sims[i]).collect(),
        indices: order,
    })
}

/// Trainable-parameter accounting.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamCount {
    pub shared: usize,
    pub pool: usize,
    pub classifier: usize,
}

impl ParamCount {
    pub fn prompts(&self) -> usize {
        self.shared + self.pool
    }
}

/// Shared prompt `L·p·d`; pool `m·((L−K)·p·d + d)`; classifier `C·d`.
pub fn count_trainable_params(vit: &VitConfig, prompts: &PromptConfig, classes: usize) -> ParamCount {
    let d = vit.dim;
    let l = vit.depth;
    ParamCount {
        shared: l * prompts.shared_len * d,
        pool: prompts.pool_size * ((l - prompts.split_depth) * prompts.group_len * d + d),
        classifier: classes * d,
    }
}

/// Which parameter groups receive gradients in a stage.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct TrainMask {
    pub backbone: bool,
    pub shared_prompt: bool,
    pub pool_keys: bool,
    pub pool_prompts: bool,
    pub classifier: bool,
    pub head: bool,
}

impl TrainMask {
    pub fn pretrain() -> Self {
        TrainMask {
            backbone: true,
            head: true,
            ..Default::default()
        }
    }

    pub fn linear_probe() -> Self {
        TrainMask {
            classifier: true,
            ..Default::default()
        }
    }

    pub fn phase1() -> Self {
        TrainMask {
            shared_prompt: true,
            classifier: true,
            ..Default::default()
        }
    }

    pub fn phase2() -> Self {
        TrainMask {
            pool_keys: true,
            pool_prompts: true,
            classifier: true,
            ..Default::default()
        }
    }

    pub fn joint() -> Self {
        TrainMask {
            shared_prompt: true,
            pool_keys: true,
            pool_prompts: true,
            classifier: true,
            ..Default::default()
        }
    }

    /// Whether the named parameter is trainable under this mask.
    pub fn allows(&self, name: &str) -> bool {
        match ParamGroup::of(name) {
            Some(ParamGroup::Backbone) => self.backbone,
            Some(ParamGroup::SharedPrompt) => self.shared_prompt,
            Some(ParamGroup::PoolKeys) => self.pool_keys,
            Some(ParamGroup::PoolPrompts) => self.pool_prompts,
            Some(ParamGroup::Classifier) => self.classifier,
            Some(ParamGroup::Head) => self.head,
            None => false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    Backbone,
    SharedPrompt,
    PoolKeys,
    PoolPrompts,
    Classifier,
    Head,
}

impl ParamGroup {
    pub fn of(name: &str) -> Option<Self> {
        Some(match name {
            n if n.starts_with("backbone.") => ParamGroup::Backbone,
            "prompt.shared" => ParamGroup::SharedPrompt,
            "pool.keys" => ParamGroup::PoolKeys,
            "pool.prompts" => ParamGroup::PoolPrompts,
            n if n.starts_with("classifier.") => ParamGroup::Classifier,
            n if n.starts_with("head.") => ParamGroup::Head,
            _ => return None,
        })
    }

    /// Weight decay applies to backbone and classifier weights, never to
    /// prompts or keys.
    pub fn decays(self) -> bool {
        matches!(self, ParamGroup::Backbone | ParamGroup::Classifier | ParamGroup::Head)
    }
}

/// Everything a stage may train or evaluate.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub vit: VisionTransformer,
    pub shared: Option<SharedPrompt>,
    pub pool: Option<GroupPromptPool>,
    pub classifier: Option<CosineClassifier>,
    pub head: Option<LinearHead>,
}

impl Model {
    pub fn backbone_only(vit: VisionTransformer) -> Self {
        Model {
            vit,
            shared: None,
            pool: None,
            classifier: None,
            head: None,
        }
    }

    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = self.vit.named();
        if let Some(s) = &self.shared {
            out.push(("prompt.shared".into(), &s.tokens));
        }
        if let Some(p) = &self.pool {
            out.push(("pool.keys".into(), &p.keys));
            out.push(("pool.prompts".into(), &p.prompts));
        }
        if let Some(c) = &self.classifier {
            out.push(("classifier.weight".into(), &c.weight));
        }
        if let Some(h) = &self.head {
            out.push(("head.weight".into(), &h.weight));
            out.push(("head.bias".into(), &h.bias));
        }
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = self.vit.named_mut();
        if let Some(s) = &mut self.shared {
            out.push(("prompt.shared".into(), &mut s.tokens));
        }
        if let Some(p) = &mut self.pool {
            out.push(("pool.keys".into(), &mut p.keys));
            out.push(("pool.prompts".into(), &mut p.prompts));
        }
        if let Some(c) = &mut self.classifier {
            out.push(("classifier.weight".into(), &mut c.weight));
        }
        if let Some(h) = &mut self.head {
            out.push(("head.weight".into(), &mut h.weight));
            out.push(("head.bias".into(), &mut h.bias));
        }
        out
    }

    pub fn to_named_map(&self) -> BTreeMap<String, Tensor> {
        self.named().into_iter().map(|(n, t)| (n, t.clone())).collect()
    }

    /// Rebuilds a model from named tensors, checking every shape against
    /// `cfg`. Errors list every mismatched tensor.
    pub fn from_named(cfg: &VitConfig, split_depth: Option<usize>, group_len: Option<usize>, map: &BTreeMap<String, Tensor>) -> Result<Self> {
        let template = VisionTransformer {
            cfg: cfg.clone(),
            patch_proj: Tensor::zeros(&[cfg.patch_dim(), cfg.dim]),
            patch_bias: Tensor::zeros(&[cfg.dim]),
            class_token: Tensor::zeros(&[1, cfg.dim]),
            pos_embed: Tensor::zeros(&[cfg.num_patches(), cfg.dim]),
            blocks: vec![Block::zeros(cfg); cfg.depth],
        };
        let mut vit = template;
        let mut problems = Vec::new();
        for (name, slot) in vit.named_mut() {
            match map.get(&name) {
                Some(t) if t.shape() == slot.shape() => *slot = t.clone(),
                Some(t) => problems.push(format!("{name}: expected {:?}, found {:?}", slot.shape(), t.shape())),
                None => problems.push(format!("{name}: missing")),
            }
        }
        let d = cfg.dim;
        fn check(problems: &mut Vec<String>, name: &str, ok: bool, t: &Tensor, expect: String) {
            if !ok {
                problems.push(format!("{name}: expected {expect}, found {:?}", t.shape()));
            }
        }
        let shared = map.get("prompt.shared").map(|t| {
            let s = t.shape();
            check(&mut problems, "prompt.shared", s.len() == 3 && s[0] == cfg.depth && s[2] == d, t, format!("[{}, p, {d}]", cfg.depth));
            SharedPrompt { tokens: t.clone() }
        });
        let pool = match (map.get("pool.keys"), map.get("pool.prompts")) {
            (Some(k), Some(p)) => {
                let ks = k.shape();
                let ps = p.shape();
                check(&mut problems, "pool.keys", ks.len() == 2 && ks[1] == d, k, format!("[m, {d}]"));
                let split = split_depth.unwrap_or(cfg.depth / 2);
                let layers = cfg.depth.saturating_sub(split);
                let glen = group_len.unwrap_or(if layers == 0 { 0 } else { ps.get(1).copied().unwrap_or(0) / layers });
                let ok = ps.len() == 3 && ks.len() == 2 && ps[0] == ks[0] && ps[1] == layers * glen && ps[2] == d;
                check(&mut problems, "pool.prompts", ok, p, format!("[m, {}, {d}]", layers * glen));
                Some(GroupPromptPool {
                    keys: k.clone(),
                    prompts: p.clone(),
                    split_depth: split,
                    prompt_len: glen,
                })
            }
            (None, None) => None,
            _ => {
                problems.push("pool.keys/pool.prompts: only one of the pair present".into());
                None
            }
        };
        let classifier = map.get("classifier.weight").map(|t| {
            let s = t.shape();
            check(&mut problems, "classifier.weight", s.len() == 2 && s[1] == d && s[0] >= 2, t, format!("[C, {d}]"));
            CosineClassifier { weight: t.clone() }
        });
        let head = match (map.get("head.weight"), map.get("head.bias")) {
            (Some(w), Some(b)) => Some(LinearHead {
                weight: w.clone(),
                bias: b.clone(),
            }),
            _ => None,
        };
        if !problems.is_empty() {
            return Err(Error::Config(format!("checkpoint does not match model config: {}", problems.join("; "))));
        }
        Ok(Model {
            vit,
            shared,
            pool,
            classifier,
            head,
        })
    }

    /// Binds every parameter to `tape`; only those allowed by `mask` are
    /// grad-flagged.
    pub fn bind(&self, tape: &mut Tape, mask: &TrainMask) -> Bound {
        let mut trainable = Vec::new();
        let mut leaf = |tape: &mut Tape, name: String, t: &Tensor| {
            let flagged = mask.allows(&name);
            let v = tape.leaf(t.clone(), flagged);
            if flagged {
                trainable.push((name, v));
            }
            v
        };
        let vit = &self.vit;
        let patch_proj = leaf(tape, "backbone.patch_proj".into(), &vit.patch_proj);
        let patch_bias = leaf(tape, "backbone.patch_bias".into(), &vit.patch_bias);
        let class_token = leaf(tape, "backbone.class_token".into(), &vit.class_token);
        let pos_embed = leaf(tape, "backbone.pos_embed".into(), &vit.pos_embed);
        let mut blocks = Vec::with_capacity(vit.blocks.len());
        for (i, b) in vit.blocks.iter().enumerate() {
            let f = b.fields();
            let mut v = [Var(0); 16];
            for (j, field) in BLOCK_FIELDS.iter().enumerate() {
                v[j] = leaf(tape, format!("backbone.blocks.{i}.{field}"), f[j]);
            }
            blocks.push(BlockVars::from_array(v));
        }
        let shared = self.shared.as_ref().map(|s| leaf(tape, "prompt.shared".into(), &s.tokens));
        let keys = self.pool.as_ref().map(|p| leaf(tape, "pool.keys".into(), &p.keys));
        let prompts = self.pool.as_ref().map(|p| leaf(tape, "pool.prompts".into(), &p.prompts));
        let classifier = self.classifier.as_ref().map(|c| leaf(tape, "classifier.weight".into(), &c.weight));
        let head = self.head.as_ref().map(|h| {
            (
                leaf(tape, "head.weight".into(), &h.weight),
                leaf(tape, "head.bias".into(), &h.bias),
            )
        });
        Bound {
            cfg: vit.cfg.clone(),
            patch_proj,
            patch_bias,
            class_token,
            pos_embed,
            blocks,
            shared,
            shared_len: self.shared.as_ref().map_or(0, SharedPrompt::len),
            keys,
            prompts,
            pool_shape: self.pool.as_ref().map(|p| (p.size(), p.rows_per_entry(), p.split_depth, p.prompt_len)),
            classifier,
            head,
            trainable,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BlockVars {
    pub ln1_gamma: Var,
    pub ln1_beta: Var,
    pub w_q: Var,
    pub b_q: Var,
    pub w_k: Var,
    pub b_k: Var,
    pub w_v: Var,
    pub b_v: Var,
    pub w_o: Var,
    pub b_o: Var,
    pub ln2_gamma: Var,
    pub ln2_beta: Var,
    pub w_ff1: Var,
    pub b_ff1: Var,
    pub w_ff2: Var,
    pub b_ff2: Var,
}

impl BlockVars {
    fn from_array(v: [Var; 16]) -> Self {
        BlockVars {
            ln1_gamma: v[0],
            ln1_beta: v[1],
            w_q: v[2],
            b_q: v[3],
            w_k: v[4],
            b_k: v[5],
            w_v: v[6],
            b_v: v[7],
            w_o: v[8],
            b_o: v[9],
            ln2_gamma: v[10],
            ln2_beta: v[11],
            w_ff1: v[12],
            b_ff1: v[13],
            w_ff2: v[14],
            b_ff2: v[15],
        }
    }
}

/// A [`Model`] bound to a tape.
pub struct Bound {
    pub cfg: VitConfig,
    pub patch_proj: Var,
    pub patch_bias: Var,
    pub class_token: Var,
    pub pos_embed: Var,
    pub blocks: Vec<BlockVars>,
    pub shared: Option<Var>,
    shared_len: usize,
    pub keys: Option<Var>,
    pub prompts: Option<Var>,
    /// (m, rows per entry, split depth, group prompt length)
    pool_shape: Option<(usize, usize, usize, usize)>,
    pub classifier: Option<Var>,
    pub head: Option<(Var, Var)>,
    /// Grad-flagged parameters in binding order.
    pub trainable: Vec<(String, Var)>,
}

/// Token stream for a batch: `batch·(N+1) × d`, class token first within
/// each sample.
#[derive(Clone, Copy, Debug)]
pub struct Activations {
    pub tokens: Var,
    pub batch: usize,
    /// Number of blocks applied so far.
    pub layer: usize,
}

/// Activations captured after block `K`, detached from any tape.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationCache {
    pub layer: usize,
    pub batch: usize,
    pub tokens: Tensor,
}

impl ActivationCache {
    /// Cache restricted to one sample of the batch.
    pub fn sample(&self, b: usize) -> ActivationCache {
        let rows = self.tokens.rows() / self.batch;
        let c = self.tokens.cols();
        let data = self.tokens.data()[b * rows * c..(b + 1) * rows * c].to_vec();
        ActivationCache {
            layer: self.layer,
            batch: 1,
            tokens: Tensor::from_parts(vec![rows, c], data),
        }
    }

    pub fn stack(parts: &[ActivationCache]) -> Result<ActivationCache> {
        let first = parts.first().ok_or_else(|| Error::invalid("cache_stack", "empty"))?;
        let mut data = Vec::new();
        let mut batch = 0;
        for p in parts {
            if p.layer != first.layer || p.tokens.cols() != first.tokens.cols() {
                return Err(Error::invalid("cache_stack", "incompatible caches"));
            }
            data.extend_from_slice(p.tokens.data());
            batch += p.batch;
        }
        let rows = data.len() / first.tokens.cols();
        Ok(ActivationCache {
            layer: first.layer,
            batch,
            tokens: Tensor::from_parts(vec![rows, first.tokens.cols()], data),
        })
    }
}

/// Non-overlapping patches of every image, one row per patch, flattened in
/// `(row, column, channel)` order: `batch·N × patch²·3`.
pub fn extract_patches(cfg: &VitConfig, images: &[Image]) -> Result<Tensor> {
    let p = cfg.patch;
    let mut data = Vec::with_capacity(images.len() * cfg.num_patches() * cfg.patch_dim());
    for img in images {
        if img.height % p != 0 || img.width % p != 0 {
            return Err(Error::invalid(
                "patch_embed",
                format!("{}x{} image not divisible by patch {p}", img.height, img.width),
            ));
        }
        if img.height != cfg.image_side || img.width != cfg.image_side {
            return Err(Error::invalid(
                "patch_embed",
                format!("{}x{} image, model expects {}x{}", img.height, img.width, cfg.image_side, cfg.image_side),
            ));
        }
        for py in 0..img.height / p {
            for px in 0..img.width / p {
                for y in 0..p {
                    let row = (py * p + y) * img.width + px * p;
                    data.extend_from_slice(&img.pixels[row * CHANNELS..(row + p) * CHANNELS]);
                }
            }
        }
    }
    let rows = data.len() / cfg.patch_dim();
    Ok(Tensor::from_parts(vec![rows, cfg.patch_dim()], data))
}

/// Patch tokens `z₀` (`batch·N × d`): projection, bias, and positional
/// embeddings.
pub fn patch_embed(tape: &mut Tape, bound: &Bound, images: &[Image]) -> Result<Var> {
    let patches = tape.constant(extract_patches(&bound.cfg, images)?);
    let proj = tape.matmul(patches, bound.patch_proj)?;
    let proj = tape.add_row(proj, bound.patch_bias)?;
    let n = bound.cfg.num_patches();
    let mut rows = Vec::with_capacity(images.len());
    for b in 0..images.len() {
        let z = tape.slice_rows(proj, b * n, n)?;
        rows.push(tape.add(z, bound.pos_embed)?);
    }
    tape.concat_rows(&rows)
}

/// `[c₀, z₀]` for every image.
pub fn embed(tape: &mut Tape, bound: &Bound, images: &[Image]) -> Result<Activations> {
    let z = patch_embed(tape, bound, images)?;
    let n = bound.cfg.num_patches();
    let mut parts = Vec::with_capacity(2 * images.len());
    for b in 0..images.len() {
        parts.push(bound.class_token);
        parts.push(tape.slice_rows(z, b * n, n)?);
    }
    let tokens = if images.is_empty() {
        tape.constant(Tensor::zeros(&[0, bound.cfg.dim]))
    } else {
        tape.concat_rows(&parts)?
    };
    Ok(Activations {
        tokens,
        batch: images.len(),
        layer: 0,
    })
}

/// One pre-norm transformer block. `prompts[b]` lists the prompt token
/// sequences appended to sample `b`'s keys and values (empty for none; an
/// empty slice means no prompts for any sample).
pub fn block_forward(tape: &mut Tape, cfg: &VitConfig, block: &BlockVars, state: Activations, prompts: &[Vec<Var>]) -> Result<Activations> {
    let d = cfg.dim;
    let t = cfg.tokens();
    let x = state.tokens;
    if !prompts.is_empty() && prompts.len() != state.batch {
        return Err(Error::invalid(
            "block_forward",
            format!("{} prompt lists for batch of {}", prompts.len(), state.batch),
        ));
    }
    let h = tape.layer_norm(x, block.ln1_gamma, block.ln1_beta)?;
    let q = tape.matmul(h, block.w_q)?;
    let q = tape.add_row(q, block.b_q)?;
    let k = tape.matmul(h, block.w_k)?;
    let k = tape.add_row(k, block.b_k)?;
    let v = tape.matmul(h, block.w_v)?;
    let v = tape.add_row(v, block.b_v)?;

    // key/value projections of each distinct prompt sequence
    let mut projected: HashMap<Var, (Var, Var)> = HashMap::new();
    let mut outs = Vec::with_capacity(state.batch);
    for b in 0..state.batch {
        let qb = tape.slice_rows(q, b * t, t)?;
        let mut kparts = vec![tape.slice_rows(k, b * t, t)?];
        let mut vparts = vec![tape.slice_rows(v, b * t, t)?];
        if let Some(segments) = prompts.get(b) {
            for &seg in segments {
                if tape.value(seg).cols() != d {
                    return Err(Error::ShapeMismatch {
                        op: "block_forward",
                        left: vec![t, d],
                        right: tape.value(seg).shape().to_vec(),
                    });
                }
                let (pk, pv) = match projected.get(&seg) {
                    Some(&kv) => kv,
                    None => {
                        let hp = tape.layer_norm(seg, block.ln1_gamma, block.ln1_beta)?;
                        let pk = tape.matmul(hp, block.w_k)?;
                        let pk = tape.add_row(pk, block.b_k)?;
                        let pv = tape.matmul(hp, block.w_v)?;
                        let pv = tape.add_row(pv, block.b_v)?;
                        projected.insert(seg, (pk, pv));
                        (pk, pv)
                    }
                };
                kparts.push(pk);
                vparts.push(pv);
            }
        }
        let kb = if kparts.len() == 1 { kparts[0] } else { tape.concat_rows(&kparts)? };
        let vb = if vparts.len() == 1 { vparts[0] } else { tape.concat_rows(&vparts)? };
        outs.push(tape.attention(qb, kb, vb, cfg.heads)?);
    }
    let attn = if outs.len() == 1 { outs[0] } else { tape.concat_rows(&outs)? };
    let proj = tape.matmul(attn, block.w_o)?;
    let proj = tape.add_row(proj, block.b_o)?;
    let x1 = tape.add(x, proj)?;

    let h2 = tape.layer_norm(x1, block.ln2_gamma, block.ln2_beta)?;
    let f = tape.matmul(h2, block.w_ff1)?;
    let f = tape.add_row(f, block.b_ff1)?;
    let f = tape.gelu(f);
    let f = tape.matmul(f, block.w_ff2)?;
    let f = tape.add_row(f, block.b_ff2)?;
    let x2 = tape.add(x1, f)?;
    Ok(Activations {
        tokens: x2,
        batch: state.batch,
        layer: state.layer + 1,
    })
}

/// Class tokens of every sample, `batch × d`.
pub fn class_tokens(tape: &mut Tape, cfg: &VitConfig, state: Activations) -> Result<Var> {
    let t = cfg.tokens();
    let idx: Vec<usize> = (0..state.batch).map(|b| b * t).collect();
    tape.select_rows(state.tokens, &idx)
}

/// Cosine classifier scores, `batch × C`.
pub fn cosine_head(tape: &mut Tape, class_tokens: Var, weight: Var) -> Result<Var> {
    let c = tape.l2_normalize(class_tokens);
    let w = tape.l2_normalize(weight);
    tape.matmul_nt(c, w)
}

fn shared_layer_prompts(tape: &mut Tape, bound: &Bound) -> Result<Vec<Option<Var>>> {
    let depth = bound.cfg.depth;
    match bound.shared {
        Some(u) => (0..depth)
            .map(|i| tape.slice_rows(u, i * bound.shared_len, bound.shared_len).map(Some))
            .collect(),
        None => Ok(vec![None; depth]),
    }
}

pub struct Phase1Output {
    pub final_state: Activations,
    /// `c_L` for every sample, `batch × d`.
    pub class_tokens: Var,
    /// Cosine scores when a classifier is bound.
    pub scores: Option<Var>,
    pub cache: Option<ActivationCache>,
}

/// All `L` blocks with the shared prompt (if bound); captures the cache
/// after block `capture_at` when given.
pub fn forward_phase1(tape: &mut Tape, bound: &Bound, images: &[Image], capture_at: Option<usize>) -> Result<Phase1Output> {
    let shared = shared_layer_prompts(tape, bound)?;
    let mut state = embed(tape, bound, images)?;
    let mut cache = None;
    for (i, block) in bound.blocks.iter().enumerate() {
        if capture_at == Some(i) {
            cache = Some(ActivationCache {
                layer: i,
                batch: state.batch,
                tokens: tape.value(state.tokens).clone(),
            });
        }
        let prompts: Vec<Vec<Var>> = match shared[i] {
            Some(u) => vec![vec![u]; state.batch],
            None => Vec::new(),
        };
        state = block_forward(tape, &bound.cfg, block, state, &prompts)?;
    }
    if capture_at == Some(bound.cfg.depth) {
        cache = Some(ActivationCache {
            layer: bound.cfg.depth,
            batch: state.batch,
            tokens: tape.value(state.tokens).clone(),
        });
    }
    let cls = class_tokens(tape, &bound.cfg, state)?;
    let scores = match bound.classifier {
        Some(w) => Some(cosine_head(tape, cls, w)?),
        None => None,
    };
    Ok(Phase1Output {
        final_state: state,
        class_tokens: cls,
        scores,
        cache,
    })
}

/// Ensembled group prompt of each sample, `(L−K)·p × d`.
pub fn ensemble_batch(tape: &mut Tape, bound: &Bound, matches: &[Vec<usize>]) -> Result<Vec<Var>> {
    let (m, rows, _, _) = bound
        .pool_shape
        .ok_or_else(|| Error::invalid("ensemble_prompts", "model has no prompt pool"))?;
    let prompts = bound.prompts.expect("pool bound");
    let mut memo: HashMap<Vec<usize>, Var> = HashMap::new();
    let mut out = Vec::with_capacity(matches.len());
    for w in matches {
        let r = match memo.get(w) {
            Some(&r) => r,
            None => {
                let r = ensemble_on_tape(tape, prompts, rows, m, w)?;
                memo.insert(w.clone(), r);
                r
            }
        };
        out.push(r);
    }
    Ok(out)
}

/// Blocks `K+1..=L` from a cached `(c_K, z_K)`, with `[u_i, r_{i−K}]`
/// appended to keys and values. Returns the final state and scores.
pub fn forward_phase2(tape: &mut Tape, bound: &Bound, cache: &ActivationCache, matches: &[Vec<usize>]) -> Result<(Activations, Var)> {
    let (_, _, split, glen) = bound
        .pool_shape
        .ok_or_else(|| Error::invalid("forward_phase2", "model has no prompt pool"))?;
    if cache.layer != split {
        return Err(Error::invalid(
            "forward_phase2",
            format!("cache taken after block {} but split depth is {split}", cache.layer),
        ));
    }
    if matches.len() != cache.batch {
        return Err(Error::invalid(
            "forward_phase2",
            format!("{} match lists for batch of {}", matches.len(), cache.batch),
        ));
    }
    let weight = bound
        .classifier
        .ok_or_else(|| Error::invalid("forward_phase2", "model has no classifier"))?;
    let shared = shared_layer_prompts(tape, bound)?;
    let ensembles = ensemble_batch(tape, bound, matches)?;
    // per-sample, per-layer slices of the ensembled prompt
    let mut group: HashMap<Var, Vec<Var>> = HashMap::new();
    for &r in &ensembles {
        if let std::collections::hash_map::Entry::Vacant(e) = group.entry(r) {
            let layers = (0..bound.cfg.depth - split)
                .map(|j| tape.slice_rows(r, j * glen, glen))
                .collect::<Result<Vec<_>>>()?;
            e.insert(layers);
        }
    }
    let tokens = tape.constant(cache.tokens.clone());
    let mut state = Activations {
        tokens,
        batch: cache.batch,
        layer: cache.layer,
    };
    for i in split..bound.cfg.depth {
        let prompts: Vec<Vec<Var>> = ensembles
            .iter()
            .map(|r| {
                let mut segs = Vec::with_capacity(2);
                if let Some(u) = shared[i] {
                    segs.push(u);
                }
                segs.push(group[r][i - split]);
                segs
            })
            .collect();
        state = block_forward(tape, &bound.cfg, &bound.blocks[i], state, &prompts)?;
    }
    let cls = class_tokens(tape, &bound.cfg, state)?;
    let scores = cosine_head(tape, cls, weight)?;
    Ok((state, scores))
}

/// `1 − (1/k)·Σ⟨q, k_w⟩` averaged over the batch; differentiable in the
/// keys only (queries are constants).
pub fn key_similarity_loss(tape: &mut Tape, bound: &Bound, queries: &Tensor, matches: &[Vec<usize>]) -> Result<Var> {
    let keys = bound
        .keys
        .ok_or_else(|| Error::invalid("key_similarity_loss", "model has no prompt pool"))?;
    let d = queries.cols();
    let mut idx = Vec::new();
    let mut qrep = Vec::new();
    for (b, w) in matches.iter().enumerate() {
        let q = queries.row(b);
        let n = q.iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_FLOOR);
        for &j in w {
            idx.push(j);
            qrep.extend(q.iter().map(|v| v / n));
        }
    }
    let total = idx.len();
    if total == 0 {
        return Err(Error::invalid("key_similarity_loss", "no matches"));
    }
    let per_sample = matches[0].len();
    let selected = tape.select_rows(keys, &idx)?;
    let normed = tape.l2_normalize(selected);
    let q = tape.constant(Tensor::from_parts(vec![total, d], qrep));
    let prod = tape.mul(normed, q)?;
    let s = tape.sum(prod);
    let scaled = tape.scale(s, -1.0 / (per_sample * matches.len()) as f64);
    Ok(tape.add_scalar(scaled, 1.0))
}

/// Logits of the pretraining head, `batch × C`.
pub fn linear_head(tape: &mut Tape, bound: &Bound, class_tokens: Var) -> Result<Var> {
    let (w, b) = bound
        .head
        .ok_or_else(|| Error::invalid("linear_head", "model has no linear head"))?;
    let z = tape.matmul(class_tokens, w)?;
    tape.add_row(z, b)
}
