//! Directional ablations at toy scale.
//!
//! Per seed: two parents are trained from a shared initialization (one on
//! text, one on caption pairs), every fusion variant is built from them and
//! aligned under the same budget, then the cross model is instruction-tuned
//! with and without caption data mixed in.

use super::report::{cell, Table};
use super::{evaluate_ppl, train, Phase, Result, SpanFilter, TrainConfig, TrainData, TrainError};
use crate::data::{synth_corpus, CorpusKind, MixedSequence, SynthWorld, Vocabulary};
use crate::fusion::{fuse, FusionKind, FusionSpec};
use crate::model::{JamModel, Transformer, TransformerConfig};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub seeds: Vec<u64>,
    /// Set from the surrounding run config, not from this section.
    #[serde(skip)]
    pub vocab: Vocabulary,
    #[serde(skip, default = "toy_model")]
    pub model: TransformerConfig,
    pub image_noise: f64,
    /// Training sequences per corpus kind.
    pub train_size: usize,
    /// Validation and test sequences per corpus kind.
    pub eval_size: usize,
    pub parent_steps: usize,
    pub align_steps: usize,
    pub instruct_epochs: usize,
    pub batch_tokens: usize,
    pub lr: f64,
    pub warmup_steps: usize,
    pub eval_interval: usize,
    /// Caption share of each instruct batch in the mixed run.
    pub caption_mix: f64,
    /// Insertion interval of the cross model that is instruction-tuned.
    pub instruct_every: usize,
    /// Fusion variants to run, by name; empty runs all of them.
    pub variants: Vec<String>,
    /// Skips the instruction-tuning comparison.
    pub skip_instruct: bool,
}

fn toy_model() -> TransformerConfig {
    TransformerConfig::toy(Vocabulary::default().size())
}

impl Default for AblationConfig {
    fn default() -> Self {
        let vocab = Vocabulary::default();
        Self {
            seeds: vec![0, 1, 2],
            vocab,
            model: TransformerConfig::toy(vocab.size()),
            image_noise: 0.1,
            train_size: 512,
            eval_size: 64,
            parent_steps: 300,
            align_steps: 150,
            instruct_epochs: 15,
            batch_tokens: 512,
            lr: 1e-2,
            warmup_steps: 20,
            eval_interval: 50,
            caption_mix: 0.5,
            instruct_every: 2,
            variants: Vec::new(),
            skip_instruct: false,
        }
    }
}

/// The fused variants, in report order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    Uniform,
    WidthCopy,
    WidthAverage,
    /// Cross with the given insertion interval; `None` means no cross blocks.
    Cross(Option<usize>),
}

impl Variant {
    pub fn all() -> [Variant; 7] {
        [
            Variant::Uniform,
            Variant::WidthCopy,
            Variant::WidthAverage,
            Variant::Cross(None),
            Variant::Cross(Some(1)),
            Variant::Cross(Some(2)),
            Variant::Cross(Some(4)),
        ]
    }

    pub fn name(self) -> String {
        match self {
            Variant::Uniform => "uniform".into(),
            Variant::WidthCopy => "width_copy".into(),
            Variant::WidthAverage => "width_average".into(),
            Variant::Cross(None) => "cross_none".into(),
            Variant::Cross(Some(k)) => format!("cross_every_{k}"),
        }
    }

    fn spec(self, n_layers: usize, seed: u64) -> FusionSpec {
        match self {
            Variant::Uniform => FusionSpec::new(FusionKind::Uniform),
            Variant::WidthCopy => FusionSpec::new(FusionKind::WidthCopy),
            Variant::WidthAverage => FusionSpec::new(FusionKind::WidthAverage),
            // An interval past the last layer leaves two independent towers.
            Variant::Cross(every) => FusionSpec::cross(every.unwrap_or(n_layers + 1), seed),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusionRow {
    pub variant: String,
    pub seed: u64,
    pub params: usize,
    pub text_ppl: f64,
    pub image_ppl: f64,
}

impl FusionRow {
    /// Mean of text and image perplexity.
    pub fn joint_ppl(&self) -> f64 {
        0.5 * (self.text_ppl + self.image_ppl)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InstructRow {
    pub caption_mixing: bool,
    pub seed: u64,
    /// Image perplexity on held-out caption pairs after tuning.
    pub caption_ppl: f64,
    /// Mean text/image perplexity on held-out instruct examples.
    pub instruct_ppl: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AblationReport {
    pub fusion: Vec<FusionRow>,
    pub instruct: Vec<InstructRow>,
}

/// Seeds in which `better` beats `worse` (lower is better).
fn wins(rows: &[FusionRow], better: &str, worse: &str) -> (usize, usize) {
    let by = |name: &str| -> BTreeMap<u64, f64> {
        rows.iter()
            .filter(|r| r.variant == name)
            .map(|r| (r.seed, r.joint_ppl()))
            .collect()
    };
    let (b, w) = (by(better), by(worse));
    let won = b.iter().filter(|(s, x)| w.get(s).is_some_and(|y| *x < y)).count();
    (won, b.len())
}

impl AblationReport {
    pub fn copy_beats_average(&self) -> (usize, usize) {
        wins(&self.fusion, "width_copy", "width_average")
    }

    pub fn cross_beats_uniform(&self) -> (usize, usize) {
        wins(&self.fusion, "cross_every_2", "uniform")
    }

    pub fn mixing_preserves_captions(&self) -> (usize, usize) {
        let mut by_seed: BTreeMap<u64, [Option<f64>; 2]> = BTreeMap::new();
        for r in &self.instruct {
            by_seed.entry(r.seed).or_default()[r.caption_mixing as usize] = Some(r.caption_ppl);
        }
        let won = by_seed
            .values()
            .filter(|[without, with]| matches!((with, without), (Some(a), Some(b)) if a < b))
            .count();
        (won, by_seed.len())
    }

    pub fn fusion_table(&self) -> Table {
        let mut t = Table::new(
            "Fusion ablation (held-out perplexity)",
            &["variant", "seed", "params", "text_ppl", "image_ppl", "joint_ppl"],
        );
        for r in &self.fusion {
            t.push(vec![
                r.variant.clone(),
                r.seed.to_string(),
                r.params.to_string(),
                cell(r.text_ppl),
                cell(r.image_ppl),
                cell(r.joint_ppl()),
            ]);
        }
        t
    }

    pub fn instruct_table(&self) -> Table {
        let mut t = Table::new(
            "Instruction tuning with and without caption mixing",
            &["caption_mixing", "seed", "caption_ppl", "instruct_ppl"],
        );
        for r in &self.instruct {
            t.push(vec![
                if r.caption_mixing { "yes" } else { "no" }.into(),
                r.seed.to_string(),
                cell(r.caption_ppl),
                cell(r.instruct_ppl),
            ]);
        }
        t
    }
}

struct Splits {
    train: Vec<MixedSequence>,
    val: Vec<MixedSequence>,
    test: Vec<MixedSequence>,
}

fn splits(world: &SynthWorld, kind: CorpusKind, cfg: &AblationConfig, seed: u64) -> Splits {
    let base = seed.wrapping_mul(1_000_003).wrapping_add(kind as u64 * 101);
    Splits {
        train: synth_corpus(world, kind, cfg.train_size, base),
        val: synth_corpus(world, kind, cfg.eval_size, base + 1),
        test: synth_corpus(world, kind, cfg.eval_size, base + 2),
    }
}

impl AblationConfig {
    pub fn validate(&self) -> Result<()> {
        let names: Vec<String> = Variant::all().iter().map(|v| v.name()).collect();
        if let Some(bad) = self.variants.iter().find(|v| !names.contains(v)) {
            return Err(TrainError::Config(format!("unknown variant {bad:?}; expected one of {}", names.join(", "))));
        }
        if self.seeds.is_empty() {
            return Err(TrainError::Config("at least one seed is needed".into()));
        }
        if !(0.0..1.0).contains(&self.caption_mix) {
            return Err(TrainError::Config("caption_mix must be in [0, 1)".into()));
        }
        Ok(())
    }

    fn runs(&self, v: Variant) -> bool {
        self.variants.is_empty() || self.variants.contains(&v.name())
    }

    fn train_config(&self, seed: u64, steps: usize, phase: Phase, mix: &[(CorpusKind, f64)]) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            warmup_steps: self.warmup_steps.min(steps),
            total_steps: steps,
            batch_tokens: self.batch_tokens,
            seed,
            phase,
            mixture_weights: mix.iter().copied().collect(),
            eval_interval: self.eval_interval,
            ..Default::default()
        }
    }
}

fn data(train: &[(CorpusKind, &Splits)], val: &[&Splits]) -> TrainData {
    TrainData {
        train: train.iter().map(|(k, s)| (*k, s.train.clone())).collect(),
        val: val.iter().flat_map(|s| s.val.iter().cloned()).collect(),
        ..Default::default()
    }
}

/// Runs the full suite; `progress` receives one line per finished run.
pub fn run_ablation_suite(cfg: &AblationConfig, progress: &mut dyn FnMut(&str)) -> Result<AblationReport> {
    cfg.validate()?;
    let v = &cfg.vocab;
    let mut report = AblationReport::default();
    for &seed in &cfg.seeds {
        let world = SynthWorld::new(*v, seed, cfg.image_noise);
        let text = splits(&world, CorpusKind::TextOnly, cfg, seed);
        let caps = splits(&world, CorpusKind::CaptionPairs, cfg, seed);
        let inst = splits(&world, CorpusKind::InterleavedInstruct, cfg, seed);

        let ancestor = Transformer::init(cfg.model, seed)?;
        let parent = |kind: CorpusKind, s: &Splits, salt: u64| -> Result<Transformer> {
            let mut m = ancestor.clone();
            let tc = cfg.train_config(seed ^ salt, cfg.parent_steps, Phase::Alignment, &[(kind, 1.0)]);
            train(&mut m, v, &data(&[(kind, s)], &[s]), &tc)?;
            Ok(m)
        };
        let llm = parent(CorpusKind::TextOnly, &text, 0x11)?;
        let img = parent(CorpusKind::CaptionPairs, &caps, 0x22)?;
        progress(&format!("seed {seed}: parents trained"));

        let align_mix = [(CorpusKind::TextOnly, 0.5), (CorpusKind::CaptionPairs, 0.5)];
        let align_data = data(&[(CorpusKind::TextOnly, &text), (CorpusKind::CaptionPairs, &caps)], &[&text, &caps]);
        let mut instruct_base = None;
        for variant in Variant::all().into_iter().filter(|v| cfg.runs(*v)) {
            let mut m = fuse(&llm, &img, v, &variant.spec(cfg.model.n_layers, seed))?;
            let tc = cfg.train_config(seed ^ 0x33, cfg.align_steps, Phase::Alignment, &align_mix);
            train(&mut m, v, &align_data, &tc)?;
            let row = FusionRow {
                variant: variant.name(),
                seed,
                params: m.param_count(),
                text_ppl: evaluate_ppl(&m, v, &text.test, SpanFilter::Text)?,
                image_ppl: evaluate_ppl(&m, v, &caps.test, SpanFilter::Image)?,
            };
            progress(&format!(
                "seed {seed}: {} joint ppl {:.3}",
                row.variant,
                row.joint_ppl()
            ));
            report.fusion.push(row);
            if variant == Variant::Cross(Some(cfg.instruct_every)) {
                instruct_base = Some(m);
            }
        }
        if cfg.skip_instruct {
            continue;
        }
        let base: JamModel = match instruct_base {
            Some(m) => m,
            None => fuse(&llm, &img, v, &FusionSpec::cross(cfg.instruct_every, seed))?,
        };

        let inst_tokens: usize = inst.train.iter().map(|s| s.len() + 1).sum();
        for mixing in [false, true] {
            let mix: Vec<(CorpusKind, f64)> = if mixing {
                vec![
                    (CorpusKind::InterleavedInstruct, 1.0 - cfg.caption_mix),
                    (CorpusKind::CaptionPairs, cfg.caption_mix),
                ]
            } else {
                vec![(CorpusKind::InterleavedInstruct, 1.0)]
            };
            // Both runs take the same number of steps: epochs over the instruct set at full share.
            let probe = cfg.train_config(seed, 1, Phase::Instruct, &[(CorpusKind::InterleavedInstruct, 1.0)]);
            let epoch = probe.steps_per_epoch(inst_tokens);
            let mut tc = cfg.train_config(seed ^ 0x44, epoch * cfg.instruct_epochs, Phase::Instruct, &mix);
            tc.eval_interval = epoch;
            let d = data(
                &[(CorpusKind::InterleavedInstruct, &inst), (CorpusKind::CaptionPairs, &caps)][..if mixing { 2 } else { 1 }],
                &[&inst],
            );
            let mut m = base.clone();
            train(&mut m, v, &d, &tc)?;
            let row = InstructRow {
                caption_mixing: mixing,
                seed,
                caption_ppl: evaluate_ppl(&m, v, &caps.test, SpanFilter::Image)?,
                instruct_ppl: 0.5
                    * (evaluate_ppl(&m, v, &inst.test, SpanFilter::Text)?
                        + evaluate_ppl(&m, v, &inst.test, SpanFilter::Image)?),
            };
            progress(&format!(
                "seed {seed}: instruct mixing={mixing} caption ppl {:.3}",
                row.caption_ppl
            ));
            report.instruct.push(row);
        }
    }
    Ok(report)
}
