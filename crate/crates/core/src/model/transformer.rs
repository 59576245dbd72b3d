use super::{infer, BoundParams, LanguageModel, NormPlacement, ParameterSet, Result, Trainable, TransformerConfig, INIT_STD};
use crate::data::TokenId;
use crate::tensor::{Graph, NodeId, Tensor, LAYER_NORM_EPS};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Row layout of a batch: concatenated ids, per-row positions and segment lengths.
pub(crate) struct BatchLayout {
    pub ids: Vec<TokenId>,
    pub positions: Vec<usize>,
    pub segments: Vec<usize>,
}

impl BatchLayout {
    pub fn new(cfg: &TransformerConfig, batch: &[&[TokenId]]) -> Result<Self> {
        let mut ids = Vec::new();
        let mut positions = Vec::new();
        let mut segments = Vec::with_capacity(batch.len());
        for seq in batch {
            cfg.check_tokens(seq)?;
            ids.extend_from_slice(seq);
            positions.extend(0..seq.len());
            segments.push(seq.len());
        }
        if segments.is_empty() {
            return Err(super::ModelError::EmptySequence);
        }
        Ok(Self { ids, positions, segments })
    }
}

/// Multi-head attention sublayer with projections under `prefix`
/// (`{prefix}w_q` and so on). Queries come from `xq`, keys and values from `xkv`.
pub(crate) fn attention_sublayer(
    g: &mut Graph,
    b: &BoundParams,
    prefix: &str,
    xq: NodeId,
    xkv: NodeId,
    heads: usize,
    segments: &[usize],
) -> Result<NodeId> {
    let q = g.matmul_t(xq, b.get(&format!("{prefix}w_q"))?)?;
    let k = g.matmul_t(xkv, b.get(&format!("{prefix}w_k"))?)?;
    let v = g.matmul_t(xkv, b.get(&format!("{prefix}w_v"))?)?;
    let a = g.attention(q, k, v, heads, segments)?;
    Ok(g.matmul_t(a, b.get(&format!("{prefix}w_o"))?)?)
}

pub(crate) fn ffn_sublayer(g: &mut Graph, b: &BoundParams, prefix: &str, x: NodeId) -> Result<NodeId> {
    let h = g.matmul_t(x, b.get(&format!("{prefix}w1"))?)?;
    let h = g.gelu(h)?;
    Ok(g.matmul_t(h, b.get(&format!("{prefix}w2"))?)?)
}

/// One tower of blocks whose parameters live under `prefix`.
pub(crate) struct Tower<'a> {
    pub cfg: &'a TransformerConfig,
    pub prefix: &'a str,
}

impl Tower<'_> {
    pub fn embed(&self, g: &mut Graph, b: &BoundParams, layout: &BatchLayout) -> Result<NodeId> {
        let tok = g.gather(b.get("tok_emb")?, &layout.ids)?;
        let pos = g.gather(b.get(&format!("{}pos_emb", self.prefix))?, &layout.positions)?;
        Ok(g.add(tok, pos)?)
    }

    pub fn layer(&self, g: &mut Graph, b: &BoundParams, l: usize, h: NodeId, segments: &[usize]) -> Result<NodeId> {
        let attn = format!("{}layers.{l}.attn.", self.prefix);
        let ffn = format!("{}layers.{l}.ffn.", self.prefix);
        let heads = self.cfg.n_heads;
        match self.cfg.norm {
            NormPlacement::Pre => {
                let n = g.layer_norm(h, LAYER_NORM_EPS)?;
                let a = attention_sublayer(g, b, &attn, n, n, heads, segments)?;
                let h = g.add(h, a)?;
                let n = g.layer_norm(h, LAYER_NORM_EPS)?;
                let f = ffn_sublayer(g, b, &ffn, n)?;
                Ok(g.add(h, f)?)
            }
            NormPlacement::Post => {
                let a = attention_sublayer(g, b, &attn, h, h, heads, segments)?;
                let h = g.add(h, a)?;
                let h = g.layer_norm(h, LAYER_NORM_EPS)?;
                let f = ffn_sublayer(g, b, &ffn, h)?;
                let h = g.add(h, f)?;
                Ok(g.layer_norm(h, LAYER_NORM_EPS)?)
            }
        }
    }
}

pub(crate) fn init_params(shapes: &[(String, Vec<usize>)], std: f64, rng: &mut ChaCha8Rng) -> ParameterSet {
    shapes
        .iter()
        .map(|(n, s)| (n.clone(), Tensor::randn(s, std, rng)))
        .collect()
}

/// Decoder-only transformer with tied input/output embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct Transformer {
    config: TransformerConfig,
    params: ParameterSet,
}

impl Transformer {
    /// Seeded normal initialization with standard deviation [`INIT_STD`].
    pub fn init(config: TransformerConfig, seed: u64) -> Result<Self> {
        Self::init_with_std(config, seed, INIT_STD)
    }

    pub fn init_with_std(config: TransformerConfig, seed: u64, std: f64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = init_params(&config.param_shapes("", true), std, &mut rng);
        Ok(Self { config, params })
    }

    pub fn from_params(config: TransformerConfig, params: ParameterSet) -> Result<Self> {
        config.validate()?;
        params.check_shapes(&config.param_shapes("", true))?;
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &TransformerConfig {
        &self.config
    }

    pub fn into_params(self) -> ParameterSet {
        self.params
    }

    /// Residual stream after the embedding and after every layer
    /// (`n_layers + 1` tensors, each `[T, d]`).
    pub fn hidden_states(&self, tokens: &[TokenId]) -> Result<Vec<Tensor>> {
        let layout = BatchLayout::new(&self.config, &[tokens])?;
        let mut g = Graph::new();
        let b = BoundParams::bind(&mut g, &self.params);
        let tower = Tower { cfg: &self.config, prefix: "" };
        let mut h = tower.embed(&mut g, &b, &layout)?;
        let mut out = vec![g.value(h).clone()];
        for l in 0..self.config.n_layers {
            h = tower.layer(&mut g, &b, l, h, &layout.segments)?;
            out.push(g.value(h).clone());
        }
        Ok(out)
    }
}

impl LanguageModel for Transformer {
    fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    fn max_seq_len(&self) -> usize {
        self.config.max_seq_len
    }

    fn logits(&self, tokens: &[TokenId]) -> Result<Tensor> {
        infer(self, tokens)
    }
}

impl Trainable for Transformer {
    fn params(&self) -> &ParameterSet {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParameterSet {
        &mut self.params
    }

    fn build_logits(&self, g: &mut Graph, b: &BoundParams, batch: &[&[TokenId]]) -> Result<NodeId> {
        let layout = BatchLayout::new(&self.config, batch)?;
        let tower = Tower { cfg: &self.config, prefix: "" };
        let mut h = tower.embed(g, b, &layout)?;
        for l in 0..self.config.n_layers {
            h = tower.layer(g, b, l, h, &layout.segments)?;
        }
        let h = g.layer_norm(h, LAYER_NORM_EPS)?;
        Ok(g.matmul_t(h, b.get("tok_emb")?)?)
    }
}
