//! Building one model out of two parents: elementwise averaging, width
//! concatenation, and cross-attention assembly.
//!
//! Width layout for every projection `W` (stored `[out, in]`):
//!
//! ```text
//! copy:    [[W_a, W_a],      average: [[W_a, W_avg],
//!           [W_b, W_b]]                [W_b, W_avg]]
//! ```
//!
//! Embedding tables are concatenated along the hidden dimension, `[E_a | E_b]`.

use crate::data::{TokenClass, Vocabulary};
use crate::model::{
    JamCross, JamCrossConfig, JamModel, ModelError, ParameterSet, Trainable, Transformer, BRANCH_IMG, BRANCH_LLM,
};
use crate::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FusionError {
    #[error("parents differ structurally at {0:?}")]
    Structure(String),
    #[error("invalid fusion spec: {0}")]
    Spec(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T, E = FusionError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionKind {
    Uniform,
    WidthCopy,
    WidthAverage,
    Cross,
}

impl FusionKind {
    pub fn name(self) -> &'static str {
        match self {
            FusionKind::Uniform => "uniform",
            FusionKind::WidthCopy => "width_copy",
            FusionKind::WidthAverage => "width_average",
            FusionKind::Cross => "cross",
        }
    }
}

impl std::str::FromStr for FusionKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "uniform" => Ok(FusionKind::Uniform),
            "width_copy" | "width" => Ok(FusionKind::WidthCopy),
            "width_average" => Ok(FusionKind::WidthAverage),
            "cross" => Ok(FusionKind::Cross),
            other => Err(format!("unknown fusion kind {other:?}")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionSpec {
    pub kind: FusionKind,
    /// Cross only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub insertion_every: Option<usize>,
    #[serde(default)]
    pub seed: u64,
    /// Cross only: feed-forward sublayer after each cross-attention.
    #[serde(default)]
    pub cross_ffn: bool,
}

impl FusionSpec {
    pub fn new(kind: FusionKind) -> Self {
        Self {
            kind,
            insertion_every: None,
            seed: 0,
            cross_ffn: false,
        }
    }

    pub fn cross(insertion_every: usize, seed: u64) -> Self {
        Self {
            kind: FusionKind::Cross,
            insertion_every: Some(insertion_every),
            seed,
            cross_ffn: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match (self.kind, self.insertion_every) {
            (FusionKind::Cross, None) => Err(FusionError::Spec("cross fusion needs insertion_every".into())),
            (FusionKind::Cross, Some(0)) => Err(FusionError::Spec("insertion_every must be at least 1".into())),
            (FusionKind::Cross, Some(_)) => Ok(()),
            (_, Some(_)) => Err(FusionError::Spec("insertion_every applies to cross fusion only".into())),
            (_, None) if self.cross_ffn => Err(FusionError::Spec("cross_ffn applies to cross fusion only".into())),
            (_, None) => Ok(()),
        }
    }
}

fn same_structure(a: &ParameterSet, b: &ParameterSet) -> Result<()> {
    a.check_same_structure(b).map_err(|e| match e {
        ModelError::Structure(n) => FusionError::Structure(n),
        other => other.into(),
    })
}

fn zip_map(a: &ParameterSet, b: &ParameterSet, f: impl Fn(&str, &Tensor, &Tensor) -> Tensor) -> Result<ParameterSet> {
    same_structure(a, b)?;
    Ok(a.iter()
        .zip(b.iter())
        .map(|((name, ta), (_, tb))| (name.to_string(), f(name, ta, tb)))
        .collect())
}

fn average(a: &Tensor, b: &Tensor) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| 0.5 * (x + y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("mean of finite tensors is finite")
}

/// Elementwise `½a + ½b`.
pub fn merge_uniform(a: &ParameterSet, b: &ParameterSet) -> Result<ParameterSet> {
    zip_map(a, b, |_, x, y| average(x, y))
}

/// `[a | b]` along columns.
fn hconcat(a: &Tensor, b: &Tensor) -> Tensor {
    let (r, ca, cb) = (a.rows(), a.cols(), b.cols());
    let mut data = Vec::with_capacity(r * (ca + cb));
    for i in 0..r {
        data.extend_from_slice(a.row(i));
        data.extend_from_slice(b.row(i));
    }
    Tensor::new(vec![r, ca + cb], data).expect("finite")
}

/// `[[tl, tr], [bl, br]]`.
fn blocks(tl: &Tensor, tr: &Tensor, bl: &Tensor, br: &Tensor) -> Tensor {
    let top = hconcat(tl, tr);
    let bottom = hconcat(bl, br);
    let mut data = top.into_data();
    data.extend_from_slice(bottom.data());
    Tensor::new(vec![tl.rows() + bl.rows(), tl.cols() + tr.cols()], data).expect("finite")
}

fn is_embedding(name: &str) -> bool {
    name.ends_with("emb")
}

fn widen(a: &ParameterSet, b: &ParameterSet, average_right: bool) -> Result<ParameterSet> {
    zip_map(a, b, |name, wa, wb| {
        if is_embedding(name) {
            hconcat(wa, wb)
        } else if average_right {
            let avg = average(wa, wb);
            blocks(wa, &avg, wb, &avg)
        } else {
            blocks(wa, wa, wb, wb)
        }
    })
}

/// Doubled width, every block a verbatim parent copy.
pub fn widen_copy(a: &ParameterSet, b: &ParameterSet) -> Result<ParameterSet> {
    widen(a, b, false)
}

/// As [`widen_copy`], with the right-hand column blocks replaced by the mean.
pub fn widen_average(a: &ParameterSet, b: &ParameterSet) -> Result<ParameterSet> {
    widen(a, b, true)
}

fn check_parents(a: &Transformer, b: &Transformer) -> Result<()> {
    if a.config() != b.config() {
        return Err(FusionError::Structure("config".into()));
    }
    same_structure(a.params(), b.params())
}

/// Two towers carrying the parents' weights unchanged, joined by cross
/// blocks whose query/key/value projections are drawn with
/// `cross_init_std` and whose output projections start at zero.
///
/// Shared embedding rows: text ids from `llm`, image ids from `img`,
/// special tokens averaged.
pub fn build_cross(llm: &Transformer, img: &Transformer, vocab: &Vocabulary, spec: &FusionSpec) -> Result<JamCross> {
    spec.validate()?;
    check_parents(llm, img)?;
    let every = spec
        .insertion_every
        .ok_or_else(|| FusionError::Spec("cross fusion needs insertion_every".into()))?;
    let branch = *llm.config();
    if branch.vocab_size != vocab.size() {
        return Err(FusionError::Spec(format!(
            "model vocabulary {} does not match data vocabulary {}",
            branch.vocab_size,
            vocab.size()
        )));
    }
    let config = JamCrossConfig {
        cross_ffn: spec.cross_ffn,
        ..JamCrossConfig::new(branch, every)
    };
    let mut params = ParameterSet::new();
    let (ea, eb) = (llm.params().get("tok_emb")?, img.params().get("tok_emb")?);
    let d = branch.d_model;
    let mut emb = Vec::with_capacity(ea.len());
    for t in 0..branch.vocab_size {
        match vocab.classify(t) {
            Some(TokenClass::Text) => emb.extend_from_slice(ea.row(t)),
            Some(TokenClass::Image) => emb.extend_from_slice(eb.row(t)),
            _ => emb.extend(ea.row(t).iter().zip(eb.row(t)).map(|(x, y)| 0.5 * (x + y))),
        }
    }
    params.insert("tok_emb", Tensor::new(vec![branch.vocab_size, d], emb).expect("finite"));
    for (prefix, parent) in [(BRANCH_LLM, llm), (BRANCH_IMG, img)] {
        for (name, t) in parent.params().iter() {
            if name != "tok_emb" {
                params.insert(format!("{prefix}.{name}"), t.clone());
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    for (name, shape, zero) in config.cross_shapes() {
        let t = if zero {
            Tensor::zeros(&shape)
        } else {
            Tensor::randn(&shape, config.cross_init_std, &mut rng)
        };
        params.insert(name, t);
    }
    params.insert("out_proj", crate::model::mean_projection(d));
    Ok(JamCross::from_params(config, params)?)
}

/// Applies `spec` to two structurally identical parents.
pub fn fuse(a: &Transformer, b: &Transformer, vocab: &Vocabulary, spec: &FusionSpec) -> Result<JamModel> {
    spec.validate()?;
    check_parents(a, b)?;
    let model = match spec.kind {
        FusionKind::Uniform => Transformer::from_params(*a.config(), merge_uniform(a.params(), b.params())?)?.into(),
        FusionKind::WidthCopy => {
            Transformer::from_params(a.config().widened(), widen_copy(a.params(), b.params())?)?.into()
        }
        FusionKind::WidthAverage => {
            Transformer::from_params(a.config().widened(), widen_average(a.params(), b.params())?)?.into()
        }
        FusionKind::Cross => build_cross(a, b, vocab, spec)?.into(),
    };
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{cross_param_count, dense_param_count, LanguageModel, TransformerConfig};

    fn parents(seed: u64) -> (Transformer, Transformer) {
        let cfg = TransformerConfig::toy(Vocabulary::default().size());
        (Transformer::init(cfg, seed).unwrap(), Transformer::init(cfg, seed + 1000).unwrap())
    }

    #[test]
    fn merge_identities() {
        let (a, b) = parents(1);
        assert_eq!(merge_uniform(a.params(), a.params()).unwrap(), *a.params());
        let zero: ParameterSet = a.params().iter().map(|(n, t)| (n.to_string(), Tensor::zeros(t.shape()))).collect();
        let twice: ParameterSet = a
            .params()
            .iter()
            .map(|(n, t)| (n.to_string(), Tensor::new(t.shape().to_vec(), t.data().iter().map(|x| 2.0 * x).collect()).unwrap()))
            .collect();
        assert_eq!(merge_uniform(&zero, &twice).unwrap(), *a.params());
        assert_eq!(
            merge_uniform(a.params(), b.params()).unwrap(),
            merge_uniform(b.params(), a.params()).unwrap()
        );
    }

    #[test]
    fn structural_mismatch_is_reported_by_name() {
        let (a, _) = parents(1);
        let mut b = a.params().clone();
        b.insert("layers.1.ffn.w1", Tensor::zeros(&[3, 3]));
        assert_eq!(
            merge_uniform(a.params(), &b),
            Err(FusionError::Structure("layers.1.ffn.w1".into()))
        );
    }

    #[test]
    fn width_blocks_are_parent_tensors() {
        let (a, b) = parents(2);
        let d = a.config().d_model;
        let w = widen_copy(a.params(), b.params()).unwrap();
        let wq = w.get("layers.0.attn.w_q").unwrap();
        let src = a.params().get("layers.0.attn.w_q").unwrap();
        assert_eq!(&wq.block(0, 0, d, d), src);
        assert_eq!(&wq.block(0, d, d, d), src);
        assert_eq!(&wq.block(d, 0, d, d), b.params().get("layers.0.attn.w_q").unwrap());
        assert_eq!(w.get("pos_emb").unwrap().cols(), 2 * d);
    }

    #[test]
    fn width_average_differs_only_in_right_column() {
        let (a, b) = parents(3);
        let c = widen_copy(a.params(), b.params()).unwrap();
        let v = widen_average(a.params(), b.params()).unwrap();
        let m = merge_uniform(a.params(), b.params()).unwrap();
        let (d, f) = (a.config().d_model, a.config().d_ff);
        let w2c = c.get("layers.2.ffn.w2").unwrap();
        let w2v = v.get("layers.2.ffn.w2").unwrap();
        assert_eq!(w2c.block(0, 0, d, f), w2v.block(0, 0, d, f));
        assert_eq!(w2c.block(d, 0, d, f), w2v.block(d, 0, d, f));
        assert_ne!(w2c.block(0, f, d, f), w2v.block(0, f, d, f));
        assert_eq!(&w2v.block(0, f, d, f), m.get("layers.2.ffn.w2").unwrap());
        assert_eq!(&w2v.block(d, f, d, f), m.get("layers.2.ffn.w2").unwrap());
        assert_eq!(widen_copy(a.params(), a.params()), widen_average(a.params(), a.params()));
    }

    #[test]
    fn fused_models_have_expected_sizes() {
        let (a, b) = parents(4);
        let v = Vocabulary::default();
        let cfg = *a.config();
        let width = fuse(&a, &b, &v, &FusionSpec::new(FusionKind::WidthCopy)).unwrap();
        assert_eq!(width.param_count(), dense_param_count(&cfg.widened()));
        assert_eq!(width.logits(&[1, 2, 3]).unwrap().shape(), &[3, v.size()]);
        let cross = fuse(&a, &b, &v, &FusionSpec::cross(2, 0)).unwrap();
        assert_eq!(cross.param_count(), cross_param_count(&JamCrossConfig::new(cfg, 2)));
        assert!(cross.param_count() < width.param_count());
    }

    #[test]
    fn cross_keeps_parents_and_is_reproducible() {
        let (a, b) = parents(5);
        let (a0, b0) = (a.clone(), b.clone());
        let v = Vocabulary::default();
        let spec = FusionSpec::cross(2, 7);
        let m = build_cross(&a, &b, &v, &spec).unwrap();
        assert_eq!((a, b), (a0.clone(), b0.clone()));
        assert_eq!(m, build_cross(&a0, &b0, &v, &spec).unwrap());
        for (name, t) in a0.params().iter().filter(|(n, _)| *n != "tok_emb") {
            assert_eq!(m.params().get(&format!("llm.{name}")).unwrap(), t);
            assert_eq!(m.params().get(&format!("img.{name}")).unwrap(), b0.params().get(name).unwrap());
        }
        assert_eq!(m.config().cross_layers(), vec![1, 3]);
        let emb = m.params().get("tok_emb").unwrap();
        assert_eq!(emb.row(0), a0.params().get("tok_emb").unwrap().row(0));
        let img = v.image_token(0);
        assert_eq!(emb.row(img), b0.params().get("tok_emb").unwrap().row(img));
        for l in [1, 3] {
            for dir in ["llm", "img"] {
                let wo = m.params().get(&format!("cross.{l}.{dir}.attn.w_o")).unwrap();
                assert!(wo.data().iter().all(|&x| x == 0.0));
            }
        }
    }

    #[test]
    fn spec_validation() {
        assert!(FusionSpec::cross(0, 0).validate().is_err());
        assert!(FusionSpec::new(FusionKind::Cross).validate().is_err());
        let mut s = FusionSpec::new(FusionKind::Uniform);
        s.insertion_every = Some(2);
        assert!(s.validate().is_err());
    }
}
