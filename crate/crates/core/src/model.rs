//! The transformer stack over triple sequences: embedding table, masked
//! attention layers, pretraining and task heads, and parameter groups.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rand::RngCore;
use rand_chacha::rand_core::SeedableRng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::checkpoint::{Checkpoint, CheckpointEntry, RngState};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::sequence::{BinaryMatrix, SegmentKind, TripleSequence, N_SPECIALS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d: usize,
    pub heads: usize,
    pub layers: usize,
    /// FFN inner width as a multiple of `d`.
    pub ffn_mult: usize,
    pub init_std: f64,
    pub ln_eps: f64,
    /// Additive fill for masked attention logits.
    pub delta: f64,
    pub dropout: f64,
    /// `false` replaces every neighbourship matrix with all ones.
    pub use_matrix: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 768,
            heads: 12,
            layers: 4,
            ffn_mult: 4,
            init_std: 0.02,
            ln_eps: 1e-12,
            delta: -1e9,
            dropout: 0.0,
            use_matrix: true,
        }
    }
}

impl ModelConfig {
    pub fn toy(d: usize, heads: usize, layers: usize) -> Self {
        Self {
            d,
            heads,
            layers,
            ln_eps: 1e-5,
            ..Self::default()
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.heads.max(1)
    }

    pub fn ffn_dim(&self) -> usize {
        self.d * self.ffn_mult
    }

    /// Problems with this configuration, one message per field.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.d == 0 {
            out.push("model.d must be positive".into());
        }
        if self.heads == 0 || self.d % self.heads != 0 {
            out.push(format!("model.d ({}) must be divisible by model.heads ({})", self.d, self.heads));
        }
        if self.ffn_mult == 0 {
            out.push("model.ffn_mult must be positive".into());
        }
        if !(self.init_std > 0.0) {
            out.push("model.init_std must be positive".into());
        }
        if !(self.ln_eps > 0.0) {
            out.push("model.ln_eps must be positive".into());
        }
        if !(self.delta < 0.0) {
            out.push("model.delta must be negative".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            out.push("model.dropout must lie in [0, 1)".into());
        }
        out
    }

    /// Closed-form size of the layer stack.
    pub fn layer_param_count(&self) -> usize {
        let d = self.d;
        let f = self.ffn_dim();
        let attention = 4 * d * d;
        let ffn = d * f + f + f * d + d;
        let norms = 4 * d;
        self.layers * (attention + ffn + norms)
    }
}

/// Named parameter groups; only `Layers` transfers between graphs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ParamGroup {
    Embeddings,
    Layers,
    PretrainHeads,
    TaskHeads,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 4] = [
        ParamGroup::Embeddings,
        ParamGroup::Layers,
        ParamGroup::PretrainHeads,
        ParamGroup::TaskHeads,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::Embeddings => "embeddings",
            ParamGroup::Layers => "layers",
            ParamGroup::PretrainHeads => "pretrain_heads",
            ParamGroup::TaskHeads => "task_heads",
        }
    }
}

impl fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ParamGroup {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|g| g.name() == s)
            .ok_or_else(|| Error::Model(format!("unknown parameter group `{s}`")))
    }
}

struct Init<'a> {
    rng: &'a mut dyn RngCore,
    std: f64,
}

impl Init<'_> {
    fn normal<T: Scalar>(&mut self, shape: &[usize]) -> Tensor<T> {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0, self.std).expect("positive std");
        let data = (0..n).map(|_| T::lit(dist.sample(&mut self.rng))).collect();
        Tensor::param(data, shape).expect("shape matches")
    }

    fn constant<T: Scalar>(&mut self, shape: &[usize], v: f64) -> Tensor<T> {
        let t = Tensor::full(shape, T::lit(v));
        t.set_requires_grad(true);
        t
    }
}

/// Affine map `x·w + b`.
#[derive(Debug, Clone)]
pub struct Linear<T: Scalar> {
    pub w: Tensor<T>,
    pub b: Tensor<T>,
}

impl<T: Scalar> Linear<T> {
    fn random(init: &mut Init<'_>, fan_in: usize, fan_out: usize) -> Self {
        Self {
            w: init.normal(&[fan_in, fan_out]),
            b: init.constant(&[1, fan_out], 0.0),
        }
    }

    fn zeroed(init: &mut Init<'_>, fan_in: usize, fan_out: usize) -> Self {
        Self {
            w: init.constant(&[fan_in, fan_out], 0.0),
            b: init.constant(&[1, fan_out], 0.0),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.matmul(&self.w)?.add(&self.b)
    }

    fn push_named(&self, prefix: &str, group: ParamGroup, out: &mut Vec<NamedParam<T>>) {
        out.push((format!("{prefix}.w"), group, self.w.clone()));
        out.push((format!("{prefix}.b"), group, self.b.clone()));
    }
}

#[derive(Debug, Clone)]
pub struct LayerParams<T: Scalar> {
    /// Query, key and value projections for all heads side by side; head
    /// `h` uses columns `h·d_head .. (h+1)·d_head`.
    pub w_q: Tensor<T>,
    pub w_k: Tensor<T>,
    pub w_v: Tensor<T>,
    pub w_o: Tensor<T>,
    pub ffn_in: Linear<T>,
    pub ffn_out: Linear<T>,
    pub ln1_gamma: Tensor<T>,
    pub ln1_beta: Tensor<T>,
    pub ln2_gamma: Tensor<T>,
    pub ln2_beta: Tensor<T>,
}

impl<T: Scalar> LayerParams<T> {
    fn random(init: &mut Init<'_>, cfg: &ModelConfig) -> Self {
        let d = cfg.d;
        Self {
            w_q: init.normal(&[d, d]),
            w_k: init.normal(&[d, d]),
            w_v: init.normal(&[d, d]),
            w_o: init.normal(&[d, d]),
            ffn_in: Linear::random(init, d, cfg.ffn_dim()),
            ffn_out: Linear::random(init, cfg.ffn_dim(), d),
            ln1_gamma: init.constant(&[1, d], 1.0),
            ln1_beta: init.constant(&[1, d], 0.0),
            ln2_gamma: init.constant(&[1, d], 1.0),
            ln2_beta: init.constant(&[1, d], 0.0),
        }
    }

    fn push_named(&self, i: usize, out: &mut Vec<NamedParam<T>>) {
        let g = ParamGroup::Layers;
        let p = format!("layers.{i}");
        out.push((format!("{p}.w_q"), g, self.w_q.clone()));
        out.push((format!("{p}.w_k"), g, self.w_k.clone()));
        out.push((format!("{p}.w_v"), g, self.w_v.clone()));
        out.push((format!("{p}.w_o"), g, self.w_o.clone()));
        self.ffn_in.push_named(&format!("{p}.ffn_in"), g, out);
        self.ffn_out.push_named(&format!("{p}.ffn_out"), g, out);
        out.push((format!("{p}.ln1_gamma"), g, self.ln1_gamma.clone()));
        out.push((format!("{p}.ln1_beta"), g, self.ln1_beta.clone()));
        out.push((format!("{p}.ln2_gamma"), g, self.ln2_gamma.clone()));
        out.push((format!("{p}.ln2_beta"), g, self.ln2_beta.clone()));
    }

    /// Masked multi-head self-attention. Returns the projected output and
    /// each head's attention probabilities.
    pub fn attention(
        &self,
        h: &Tensor<T>,
        mask: &AttentionMask<T>,
        cfg: &ModelConfig,
    ) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
        let (n, d) = h.dims2();
        if mask.n != n || d != cfg.d {
            return Err(Error::shape(
                "attention",
                format!("hidden {:?} with {}x{} mask", h.shape(), mask.n, mask.n),
            ));
        }
        let dh = cfg.head_dim();
        let q = h.matmul(&self.w_q)?;
        let k = h.matmul(&self.w_k)?;
        let v = h.matmul(&self.w_v)?;
        let scale = T::lit(1.0 / (dh as f64).sqrt());
        let mut outs = Vec::with_capacity(cfg.heads);
        let mut probs = Vec::with_capacity(cfg.heads);
        for head in 0..cfg.heads {
            let (a, b) = (head * dh, (head + 1) * dh);
            let qh = q.slice_cols(a, b)?;
            let kh = k.slice_cols(a, b)?;
            let vh = v.slice_cols(a, b)?;
            let scores = qh.matmul(&kh.transpose()?)?;
            let logits = match mask.masked() {
                Some((keep, fill)) => scores.mul(keep)?.scale(scale).add(fill)?,
                None => scores.scale(scale),
            };
            let p = logits.row_softmax()?;
            outs.push(p.matmul(&vh)?);
            probs.push(p);
        }
        let cat = if outs.len() == 1 {
            outs.pop().unwrap()
        } else {
            Tensor::concat(&outs, 1)?
        };
        Ok((cat.matmul(&self.w_o)?, probs))
    }

    /// Attention and FFN sub-layers, each with residual and post layer norm.
    fn forward(
        &self,
        h: &Tensor<T>,
        mask: &AttentionMask<T>,
        cfg: &ModelConfig,
        rng: &mut Option<&mut dyn RngCore>,
    ) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
        let (attn, probs) = self.attention(h, mask, cfg)?;
        let attn = drop_maybe(attn, cfg.dropout, rng);
        let h1 = h.add(&attn)?.layer_norm(&self.ln1_gamma, &self.ln1_beta, cfg.ln_eps)?;
        let f = self.ffn_out.forward(&self.ffn_in.forward(&h1)?.relu())?;
        let f = drop_maybe(f, cfg.dropout, rng);
        let h2 = h1.add(&f)?.layer_norm(&self.ln2_gamma, &self.ln2_beta, cfg.ln_eps)?;
        Ok((h2, probs))
    }
}

fn drop_maybe<T: Scalar>(x: Tensor<T>, p: f64, rng: &mut Option<&mut dyn RngCore>) -> Tensor<T> {
    match rng {
        Some(r) if p > 0.0 => x.dropout(p, r),
        _ => x,
    }
}

/// Constant tensors implementing `(S ⊙ M)·c + (1 − M)·δ` for one sequence.
pub struct AttentionMask<T: Scalar> {
    n: usize,
    parts: Option<(Tensor<T>, Tensor<T>)>,
}

impl<T: Scalar> AttentionMask<T> {
    pub fn new(m: &BinaryMatrix, delta: f64) -> Self {
        let n = m.size();
        if m.count_ones() == n * n {
            return Self::unmasked(n);
        }
        let keep = m.to_f64();
        let fill: Vec<f64> = keep.iter().map(|&k| (1.0 - k) * delta).collect();
        Self {
            n,
            parts: Some((
                Tensor::from_f64(&keep, &[n, n]).expect("square"),
                Tensor::from_f64(&fill, &[n, n]).expect("square"),
            )),
        }
    }

    pub fn unmasked(n: usize) -> Self {
        Self { n, parts: None }
    }

    fn masked(&self) -> Option<(&Tensor<T>, &Tensor<T>)> {
        self.parts.as_ref().map(|(a, b)| (a, b))
    }
}

#[derive(Debug, Clone)]
pub struct PretrainHeads<T: Scalar> {
    pub w_mem: Tensor<T>,
    pub w_mrm: Tensor<T>,
    pub mrm_out: Linear<T>,
    pub epm_out: Linear<T>,
}

#[derive(Debug, Clone)]
pub struct ZslHeads<T: Scalar> {
    pub w_map: Tensor<T>,
    pub mlp_b: Linear<T>,
    pub mlp_v: Linear<T>,
}

#[derive(Debug, Clone)]
pub struct QaHeads<T: Scalar> {
    pub w_map: Tensor<T>,
    pub out: Linear<T>,
}

#[derive(Debug, Clone, Default)]
pub struct TaskHeads<T: Scalar> {
    pub tc: Option<Linear<T>>,
    pub zsl: Option<ZslHeads<T>>,
    pub qa: Option<QaHeads<T>>,
}

pub type NamedParam<T> = (String, ParamGroup, Tensor<T>);

/// Hidden-state roles that heads read from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    /// Leading token of the given graph segment.
    SegmentBegin(usize),
    /// First token of the prompt.
    Task,
    /// The single position with an injected feature vector.
    Injected,
    Position(usize),
}

#[derive(Debug, Clone)]
pub struct ModelParams<T: Scalar> {
    pub config: ModelConfig,
    pub vocab_size: usize,
    pub n_relations: usize,
    pub embeddings: Tensor<T>,
    pub layers: Vec<LayerParams<T>>,
    pub pretrain: PretrainHeads<T>,
    pub tasks: TaskHeads<T>,
    frozen: BTreeSet<ParamGroup>,
}

impl<T: Scalar> ModelParams<T> {
    pub fn new(
        config: ModelConfig,
        vocab_size: usize,
        n_relations: usize,
        rng: &mut dyn RngCore,
    ) -> Result<Self> {
        let problems = config.problems();
        if !problems.is_empty() {
            return Err(Error::Config(problems));
        }
        if vocab_size == 0 || n_relations == 0 {
            return Err(Error::Model("vocabulary and relation set must be non-empty".into()));
        }
        let d = config.d;
        let mut init = Init {
            rng,
            std: config.init_std,
        };
        let embeddings = init.normal(&[vocab_size, d]);
        let layers = (0..config.layers)
            .map(|_| LayerParams::random(&mut init, &config))
            .collect();
        let pretrain = PretrainHeads {
            w_mem: init.normal(&[d, d]),
            w_mrm: init.normal(&[d, d]),
            mrm_out: Linear::random(&mut init, d, n_relations),
            epm_out: Linear::random(&mut init, 2 * d, 2),
        };
        Ok(Self {
            config,
            vocab_size,
            n_relations,
            embeddings,
            layers,
            pretrain,
            tasks: TaskHeads::default(),
            frozen: BTreeSet::new(),
        })
    }

    fn init<'a>(&self, rng: &'a mut dyn RngCore) -> Init<'a> {
        Init {
            rng,
            std: self.config.init_std,
        }
    }

    /// Adds the triple-classification head, `[s_B ‖ s_T] → 2` logits. Its
    /// weights start at zero so untrained logits are `[0, 0]`.
    pub fn add_tc_head(&mut self, rng: &mut dyn RngCore) {
        let d = self.config.d;
        let mut init = self.init(rng);
        self.tasks.tc = Some(Linear::zeroed(&mut init, 2 * d, 2));
        self.sync_requires_grad();
    }

    pub fn add_zsl_head(&mut self, d_ext: usize, rng: &mut dyn RngCore) {
        let d = self.config.d;
        let mut init = self.init(rng);
        self.tasks.zsl = Some(ZslHeads {
            w_map: init.normal(&[d_ext, d]),
            mlp_b: Linear::random(&mut init, d, d),
            mlp_v: Linear::random(&mut init, d, d),
        });
        self.sync_requires_grad();
    }

    /// Adds the QA head, `[s_B ‖ s_Q ‖ R_qc] → 2` logits.
    pub fn add_qa_head(&mut self, d_ext: usize, rng: &mut dyn RngCore) {
        let d = self.config.d;
        let mut init = self.init(rng);
        self.tasks.qa = Some(QaHeads {
            w_map: init.normal(&[d_ext, d]),
            out: Linear::zeroed(&mut init, 2 * d + d_ext, 2),
        });
        self.sync_requires_grad();
    }

    /// Every parameter with its checkpoint name and group, in a fixed order.
    pub fn named_params(&self) -> Vec<NamedParam<T>> {
        let mut out = vec![(
            "embeddings".to_owned(),
            ParamGroup::Embeddings,
            self.embeddings.clone(),
        )];
        for (i, l) in self.layers.iter().enumerate() {
            l.push_named(i, &mut out);
        }
        let g = ParamGroup::PretrainHeads;
        out.push(("pretrain.w_mem".into(), g, self.pretrain.w_mem.clone()));
        out.push(("pretrain.w_mrm".into(), g, self.pretrain.w_mrm.clone()));
        self.pretrain.mrm_out.push_named("pretrain.mrm_out", g, &mut out);
        self.pretrain.epm_out.push_named("pretrain.epm_out", g, &mut out);
        let g = ParamGroup::TaskHeads;
        if let Some(tc) = &self.tasks.tc {
            tc.push_named("task.tc", g, &mut out);
        }
        if let Some(z) = &self.tasks.zsl {
            out.push(("task.zsl.w_map".into(), g, z.w_map.clone()));
            z.mlp_b.push_named("task.zsl.mlp_b", g, &mut out);
            z.mlp_v.push_named("task.zsl.mlp_v", g, &mut out);
        }
        if let Some(q) = &self.tasks.qa {
            out.push(("task.qa.w_map".into(), g, q.w_map.clone()));
            q.out.push_named("task.qa.out", g, &mut out);
        }
        out
    }

    /// Parameters the optimizer may update.
    pub fn trainable_params(&self) -> Vec<(String, Tensor<T>)> {
        self.named_params()
            .into_iter()
            .filter(|(_, g, _)| !self.frozen.contains(g))
            .map(|(n, _, t)| (n, t))
            .collect()
    }

    pub fn param_count(&self, group: ParamGroup) -> usize {
        self.named_params()
            .iter()
            .filter(|(_, g, _)| *g == group)
            .map(|(_, _, t)| t.numel())
            .sum()
    }

    pub fn frozen(&self) -> &BTreeSet<ParamGroup> {
        &self.frozen
    }

    pub fn is_frozen(&self, group: ParamGroup) -> bool {
        self.frozen.contains(&group)
    }

    /// Replaces the frozen set. Frozen parameters stop collecting gradients,
    /// so the optimizer never sees them.
    pub fn set_frozen<S: AsRef<str>>(&mut self, groups: &[S]) -> Result<()> {
        let parsed = groups
            .iter()
            .map(|g| g.as_ref().parse())
            .collect::<Result<BTreeSet<ParamGroup>>>()?;
        self.frozen = parsed;
        self.sync_requires_grad();
        Ok(())
    }

    fn sync_requires_grad(&self) {
        for (_, g, t) in self.named_params() {
            let train = !self.frozen.contains(&g);
            t.set_requires_grad(train);
            if !train {
                t.zero_grad();
            }
        }
    }

    /// Fresh random layer stack (the from-scratch mode).
    pub fn reinit_layers(&mut self, rng: &mut dyn RngCore) {
        let mut init = self.init(rng);
        let cfg = self.config.clone();
        self.layers = (0..cfg.layers)
            .map(|_| LayerParams::random(&mut init, &cfg))
            .collect();
        self.sync_requires_grad();
    }

    /// Copies the layer stack from a checkpoint taken on any vocabulary.
    pub fn transplant_layers(&mut self, ck: &Checkpoint) -> Result<()> {
        let layer_entries = ck
            .entries
            .iter()
            .filter(|e| e.group == ParamGroup::Layers.name())
            .count();
        let mine: Vec<NamedParam<T>> = self
            .named_params()
            .into_iter()
            .filter(|(_, g, _)| *g == ParamGroup::Layers)
            .collect();
        if layer_entries != mine.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {layer_entries} layer tensors, model expects {}",
                mine.len()
            )));
        }
        for (name, _, t) in mine {
            load_into(ck, &name, &t)?;
        }
        Ok(())
    }

    /// Carries the embedding table of `ck` over to this vocabulary: the
    /// special-token rows are copied and the other rows are rescaled to the
    /// standard deviation of the checkpoint table.
    pub fn transfer_embeddings(&mut self, ck: &Checkpoint) -> Result<()> {
        let e = ck
            .get("embeddings")
            .ok_or_else(|| Error::Checkpoint("missing tensor `embeddings`".into()))?;
        let d = self.config.d;
        if e.shape.len() != 2 || e.shape[1] != d || e.shape[0] < N_SPECIALS {
            return Err(Error::Checkpoint(format!(
                "embedding table of shape {:?} does not fit width {d}",
                e.shape
            )));
        }
        let spread = |v: &[f64]| {
            let n = v.len() as f64;
            let mean = v.iter().sum::<f64>() / n;
            (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt()
        };
        let mine: Vec<f64> = self.embeddings.to_f64_vec();
        let (own, target) = (spread(&mine[N_SPECIALS * d..]), spread(&e.data));
        let factor = if own > 0.0 { target / own } else { 1.0 };
        self.embeddings.update_data(|x| {
            for v in x[N_SPECIALS * d..].iter_mut() {
                *v = T::lit(v.as_f64() * factor);
            }
            for (v, &s) in x[..N_SPECIALS * d].iter_mut().zip(&e.data) {
                *v = T::lit(s);
            }
        });
        Ok(())
    }

    pub fn to_checkpoint(&self, step: u64, rng: Option<RngState>) -> Result<Checkpoint> {
        let mut meta = BTreeMap::new();
        meta.insert(
            "model_config".into(),
            serde_json::to_string(&self.config)
                .map_err(|e| Error::Checkpoint(format!("config encoding: {e}")))?,
        );
        meta.insert("vocab_size".into(), self.vocab_size.to_string());
        meta.insert("n_relations".into(), self.n_relations.to_string());
        let entries = self
            .named_params()
            .into_iter()
            .map(|(name, g, t)| CheckpointEntry {
                name,
                shape: t.shape().to_vec(),
                group: g.name().to_owned(),
                frozen: self.frozen.contains(&g),
                data: t.to_f64_vec(),
            })
            .collect();
        Ok(Checkpoint {
            step,
            rng,
            meta,
            entries,
        })
    }

    /// Rebuilds the full model, including whichever task heads it carries.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let meta = |k: &str| {
            ck.meta
                .get(k)
                .ok_or_else(|| Error::Checkpoint(format!("manifest lacks `{k}`")))
        };
        let config: ModelConfig = serde_json::from_str(meta("model_config")?)
            .map_err(|e| Error::Checkpoint(format!("model config: {e}")))?;
        let num = |k: &str| -> Result<usize> {
            meta(k)?
                .parse()
                .map_err(|_| Error::Checkpoint(format!("`{k}` is not a count")))
        };
        // values are overwritten below, so the init stream is irrelevant
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut m = Self::new(config, num("vocab_size")?, num("n_relations")?, &mut rng)?;
        if ck.get("task.tc.w").is_some() {
            m.add_tc_head(&mut rng);
        }
        if let Some(e) = ck.get("task.zsl.w_map") {
            m.add_zsl_head(e.shape[0], &mut rng);
        }
        if let Some(e) = ck.get("task.qa.w_map") {
            m.add_qa_head(e.shape[0], &mut rng);
        }
        let mine = m.named_params();
        if mine.len() != ck.entries.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} tensors, model expects {}",
                ck.entries.len(),
                mine.len()
            )));
        }
        let mut frozen = BTreeSet::new();
        for (name, g, t) in &mine {
            load_into(ck, name, t)?;
            if ck.get(name).is_some_and(|e| e.frozen) {
                frozen.insert(*g);
            }
        }
        m.frozen = frozen;
        m.sync_requires_grad();
        Ok(m)
    }

    /// Row `i` is the table entry of token `i`, except injected positions,
    /// which hold their feature vector mapped through `w_map`.
    pub fn embed(&self, seq: &TripleSequence, w_map: Option<&Tensor<T>>) -> Result<Tensor<T>> {
        let ids: Vec<usize> = seq.tokens.iter().map(|t| t.index()).collect();
        if let Some(bad) = ids.iter().find(|&&i| i >= self.vocab_size) {
            return Err(Error::Sequence(format!(
                "token {bad} outside vocabulary of {}",
                self.vocab_size
            )));
        }
        let x = self.embeddings.gather_rows(&ids)?;
        if seq.injected.is_empty() {
            return Ok(x);
        }
        let w = w_map.ok_or_else(|| {
            Error::Model("sequence has injected features but no projection was given".into())
        })?;
        let d_ext = w.dims2().0;
        let mut feats = Vec::with_capacity(seq.injected.len() * d_ext);
        let mut positions = Vec::with_capacity(seq.injected.len());
        for (p, v) in &seq.injected {
            if v.len() != d_ext {
                return Err(Error::shape(
                    "embed",
                    format!("feature of length {} for projection {:?}", v.len(), w.shape()),
                ));
            }
            positions.push(*p);
            feats.extend(v.iter().map(|&x| T::lit(x)));
        }
        let feats = Tensor::new(feats, &[positions.len(), d_ext])?;
        x.overwrite_rows(&positions, &feats.matmul(w)?)
    }

    fn mask_for(&self, seq: &TripleSequence) -> Result<AttentionMask<T>> {
        if self.config.use_matrix {
            Ok(AttentionMask::new(seq.matrix()?, self.config.delta))
        } else {
            Ok(AttentionMask::unmasked(seq.len()))
        }
    }

    fn run(
        &self,
        seq: &TripleSequence,
        w_map: Option<&Tensor<T>>,
        mut rng: Option<&mut dyn RngCore>,
        mut trace: Option<&mut Vec<Vec<Tensor<T>>>>,
    ) -> Result<Tensor<T>> {
        let mask = self.mask_for(seq)?;
        let mut h = self.embed(seq, w_map)?;
        h = drop_maybe(h, self.config.dropout, &mut rng);
        for layer in &self.layers {
            let (next, probs) = layer.forward(&h, &mask, &self.config, &mut rng)?;
            if let Some(t) = trace.as_mut() {
                t.push(probs);
            }
            h = next;
        }
        Ok(h)
    }

    /// Last-layer hidden states, one row per token.
    pub fn forward(&self, seq: &TripleSequence, w_map: Option<&Tensor<T>>) -> Result<Tensor<T>> {
        self.run(seq, w_map, None, None)
    }

    /// Forward pass with dropout drawn from `rng` when enabled.
    pub fn forward_train(
        &self,
        seq: &TripleSequence,
        w_map: Option<&Tensor<T>>,
        rng: &mut dyn RngCore,
    ) -> Result<Tensor<T>> {
        self.run(seq, w_map, Some(rng), None)
    }

    /// Forward pass that also returns every layer's per-head attention
    /// probabilities.
    pub fn forward_traced(
        &self,
        seq: &TripleSequence,
        w_map: Option<&Tensor<T>>,
    ) -> Result<(Tensor<T>, Vec<Vec<Tensor<T>>>)> {
        let mut trace = Vec::new();
        let h = self.run(seq, w_map, None, Some(&mut trace))?;
        Ok((h, trace))
    }
}

fn load_into<T: Scalar>(ck: &Checkpoint, name: &str, t: &Tensor<T>) -> Result<()> {
    let e = ck
        .get(name)
        .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
    if e.shape != t.shape() {
        return Err(Error::Checkpoint(format!(
            "tensor `{name}` has shape {:?}, model expects {:?}",
            e.shape,
            t.shape()
        )));
    }
    t.set_data(e.data.iter().map(|&v| T::lit(v)).collect())
}

/// The 1×d hidden row playing `role` in `seq`.
pub fn extract<T: Scalar>(hidden: &Tensor<T>, seq: &TripleSequence, role: Role) -> Result<Tensor<T>> {
    let pos = match role {
        Role::SegmentBegin(i) => seq
            .segments
            .iter()
            .filter(|s| s.kind == SegmentKind::Graph)
            .nth(i)
            .map(|s| s.start)
            .ok_or_else(|| Error::Model(format!("no graph segment {i}")))?,
        Role::Task => seq
            .prompt_segment()
            .map(|s| s.start)
            .ok_or_else(|| Error::Model("sequence has no prompt".into()))?,
        Role::Injected => match seq.injected.as_slice() {
            [(p, _)] => *p,
            [] => return Err(Error::Model("sequence has no injected position".into())),
            _ => return Err(Error::Model("sequence has several injected positions".into())),
        },
        Role::Position(p) => p,
    };
    let (n, _) = hidden.dims2();
    if pos >= n || n != seq.len() {
        return Err(Error::Model(format!(
            "position {pos} outside hidden states of {n} rows for a {}-token sequence",
            seq.len()
        )));
    }
    hidden.slice_rows(pos, pos + 1)
}
