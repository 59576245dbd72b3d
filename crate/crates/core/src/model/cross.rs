//! Two parent towers joined by bidirectional cross-attention.
//!
//! Parameter layout: a shared `tok_emb`, the two towers under `llm.` and
//! `img.`, cross blocks under `cross.{l}.llm.` (queries from the text tower,
//! updating it) and `cross.{l}.img.`, and `out_proj` of shape `[d, 2d]`
//! mapping the concatenated final states back to width `d`.

use super::transformer::{attention_sublayer, ffn_sublayer, init_params, BatchLayout, Tower};
use super::{infer, BoundParams, LanguageModel, ModelError, ParameterSet, Result, Trainable, Transformer, TransformerConfig};
use crate::data::TokenId;
use crate::tensor::{Graph, NodeId, Tensor, LAYER_NORM_EPS};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const BRANCH_LLM: &str = "llm";
pub const BRANCH_IMG: &str = "img";

fn default_cross_std() -> f64 {
    super::INIT_STD
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JamCrossConfig {
    /// Shared by both towers.
    pub branch: TransformerConfig,
    /// Cross blocks follow every layer `l` (1-based) with `l % insertion_every == 0`.
    /// Values above `n_layers` give two independent towers.
    pub insertion_every: usize,
    /// Adds a zero-initialized feed-forward sublayer after each cross-attention.
    #[serde(default)]
    pub cross_ffn: bool,
    #[serde(default = "default_cross_std")]
    pub cross_init_std: f64,
}

impl JamCrossConfig {
    pub fn new(branch: TransformerConfig, insertion_every: usize) -> Self {
        Self {
            branch,
            insertion_every,
            cross_ffn: false,
            cross_init_std: super::INIT_STD,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.branch.validate()?;
        if self.insertion_every == 0 {
            return Err(ModelError::Config("insertion_every must be at least 1".into()));
        }
        if !(self.cross_init_std.is_finite() && self.cross_init_std >= 0.0) {
            return Err(ModelError::Config("cross_init_std must be finite and non-negative".into()));
        }
        Ok(())
    }

    /// 0-based indices of the layers followed by a cross block.
    pub fn cross_layers(&self) -> Vec<usize> {
        (0..self.branch.n_layers)
            .filter(|l| (l + 1) % self.insertion_every == 0)
            .collect()
    }

    fn has_cross(&self, l: usize) -> bool {
        (l + 1) % self.insertion_every == 0
    }

    /// Cross-block parameter shapes: (attention projections, zero-initialized output weights).
    pub(crate) fn cross_shapes(&self) -> Vec<(String, Vec<usize>, bool)> {
        let (d, f) = (self.branch.d_model, self.branch.d_ff);
        let mut out = Vec::new();
        for l in self.cross_layers() {
            for dir in [BRANCH_LLM, BRANCH_IMG] {
                for w in ["w_q", "w_k", "w_v", "w_o"] {
                    out.push((format!("cross.{l}.{dir}.attn.{w}"), vec![d, d], w == "w_o"));
                }
                if self.cross_ffn {
                    out.push((format!("cross.{l}.{dir}.ffn.w1"), vec![f, d], false));
                    out.push((format!("cross.{l}.{dir}.ffn.w2"), vec![d, f], true));
                }
            }
        }
        out
    }

    pub(crate) fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = vec![("tok_emb".to_string(), vec![self.branch.vocab_size, self.branch.d_model])];
        out.extend(self.branch.param_shapes("llm.", false));
        out.extend(self.branch.param_shapes("img.", false));
        out.extend(self.cross_shapes().into_iter().map(|(n, s, _)| (n, s)));
        out.push(("out_proj".into(), vec![self.branch.d_model, 2 * self.branch.d_model]));
        out
    }
}

/// `0.5 · [I | I]`: the output starts as the mean of the two final states.
pub(crate) fn mean_projection(d: usize) -> Tensor {
    let mut t = Tensor::zeros(&[d, 2 * d]);
    for i in 0..d {
        t.data_mut()[i * 2 * d + i] = 0.5;
        t.data_mut()[i * 2 * d + d + i] = 0.5;
    }
    t
}

#[derive(Clone, Debug, PartialEq)]
pub struct JamCross {
    config: JamCrossConfig,
    params: ParameterSet,
}

impl JamCross {
    /// Every weight drawn at random except `out_proj`, which starts at
    /// `0.5 · [I | I]`.
    pub fn init(config: JamCrossConfig, seed: u64) -> Result<Self> {
        Self::init_with_std(config, seed, super::INIT_STD)
    }

    pub fn init_with_std(config: JamCrossConfig, seed: u64, std: f64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut shapes = config.param_shapes();
        shapes.pop();
        let mut params = init_params(&shapes, std, &mut rng);
        params.insert("out_proj", mean_projection(config.branch.d_model));
        Ok(Self { config, params })
    }

    pub fn from_params(config: JamCrossConfig, params: ParameterSet) -> Result<Self> {
        config.validate()?;
        params.check_shapes(&config.param_shapes())?;
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &JamCrossConfig {
        &self.config
    }

    pub fn into_params(self) -> ParameterSet {
        self.params
    }

    /// One tower as a standalone transformer using the shared embedding.
    pub fn branch(&self, which: &str) -> Result<Transformer> {
        let prefix = format!("{which}.");
        let mut params = ParameterSet::new();
        params.insert("tok_emb", self.params.get("tok_emb")?.clone());
        for (name, t) in self.params.iter() {
            if let Some(rest) = name.strip_prefix(&prefix) {
                params.insert(rest, t.clone());
            }
        }
        Transformer::from_params(self.config.branch, params)
    }

    fn run(
        &self,
        g: &mut Graph,
        b: &BoundParams,
        layout: &BatchLayout,
        mut record: impl FnMut(&Graph, NodeId, NodeId),
    ) -> Result<(NodeId, NodeId)> {
        let cfg = &self.config.branch;
        let llm = Tower { cfg, prefix: "llm." };
        let img = Tower { cfg, prefix: "img." };
        let mut a = llm.embed(g, b, layout)?;
        let mut c = img.embed(g, b, layout)?;
        record(g, a, c);
        let segs = &layout.segments;
        for l in 0..cfg.n_layers {
            let mut a_next = llm.layer(g, b, l, a, segs)?;
            let mut c_next = img.layer(g, b, l, c, segs)?;
            if self.config.has_cross(l) {
                let na = g.layer_norm(a, LAYER_NORM_EPS)?;
                let nc = g.layer_norm(c, LAYER_NORM_EPS)?;
                let xa = attention_sublayer(g, b, &format!("cross.{l}.llm.attn."), na, nc, cfg.n_heads, segs)?;
                let xc = attention_sublayer(g, b, &format!("cross.{l}.img.attn."), nc, na, cfg.n_heads, segs)?;
                a_next = g.add(a_next, xa)?;
                c_next = g.add(c_next, xc)?;
                if self.config.cross_ffn {
                    for (h, dir) in [(&mut a_next, BRANCH_LLM), (&mut c_next, BRANCH_IMG)] {
                        let n = g.layer_norm(*h, LAYER_NORM_EPS)?;
                        let f = ffn_sublayer(g, b, &format!("cross.{l}.{dir}.ffn."), n)?;
                        *h = g.add(*h, f)?;
                    }
                }
            }
            a = a_next;
            c = c_next;
            record(g, a, c);
        }
        Ok((a, c))
    }

    /// Residual streams of both towers after the embedding and after every
    /// layer (including its cross block).
    pub fn branch_hidden_states(&self, tokens: &[TokenId]) -> Result<(Vec<Tensor>, Vec<Tensor>)> {
        let layout = BatchLayout::new(&self.config.branch, &[tokens])?;
        let mut g = Graph::new();
        let b = BoundParams::bind(&mut g, &self.params);
        let mut llm = Vec::new();
        let mut img = Vec::new();
        self.run(&mut g, &b, &layout, |g, a, c| {
            llm.push(g.value(a).clone());
            img.push(g.value(c).clone());
        })?;
        Ok((llm, img))
    }
}

impl LanguageModel for JamCross {
    fn vocab_size(&self) -> usize {
        self.config.branch.vocab_size
    }

    fn max_seq_len(&self) -> usize {
        self.config.branch.max_seq_len
    }

    fn logits(&self, tokens: &[TokenId]) -> Result<Tensor> {
        infer(self, tokens)
    }
}

impl Trainable for JamCross {
    fn params(&self) -> &ParameterSet {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParameterSet {
        &mut self.params
    }

    fn build_logits(&self, g: &mut Graph, b: &BoundParams, batch: &[&[TokenId]]) -> Result<NodeId> {
        let layout = BatchLayout::new(&self.config.branch, batch)?;
        let (a, c) = self.run(g, b, &layout, |_, _, _| {})?;
        let na = g.layer_norm(a, LAYER_NORM_EPS)?;
        let nc = g.layer_norm(c, LAYER_NORM_EPS)?;
        let cat = g.concat_cols(na, nc)?;
        let h = g.matmul_t(cat, b.get("out_proj")?)?;
        Ok(g.matmul_t(h, b.get("tok_emb")?)?)
    }
}
