//! Browser bindings: the sampling distribution pipeline, the width-fusion
//! block layout, and interleaved generation from a seeded toy model.
//! Every function takes and returns JSON strings so the page stays plain JS;
//! seeds are `u32` so they arrive as ordinary JS numbers.

use jam_core::data::{detokenize_report, tokenize_report, Vocabulary};
use jam_core::fusion::{widen_average, widen_copy};
use jam_core::model::{ParameterSet, Transformer, TransformerConfig};
use jam_core::sampler::{apply_temperature, cfg_mix, generate_interleaved, top_p_filter, SamplerConfig};
use jam_core::tensor::{softmax, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

// Errors cross the boundary as strings (thrown as JS exceptions).
fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn parse_vec(s: &str) -> Result<Vec<f64>, String> {
    serde_json::from_str(s).map_err(err)
}

fn probs(logits: &[f64]) -> Result<Vec<f64>, String> {
    let t = Tensor::new(vec![1, logits.len()], logits.to_vec()).map_err(err)?;
    Ok(softmax(&t).map_err(err)?.into_data())
}

/// Each stage of the decoding distribution for one step: guided logits,
/// tempered softmax, and the nucleus-filtered result.
#[wasm_bindgen]
pub fn sampling_stages(cond: &str, uncond: &str, alpha: f64, temperature: f64, top_p: f64) -> Result<String, String> {
    let (c, u) = (parse_vec(cond)?, parse_vec(uncond)?);
    if c.is_empty() {
        return Err(err("need at least one logit"));
    }
    if !(0.0..=1.0).contains(&top_p) || top_p == 0.0 {
        return Err(err("top_p must be in (0, 1]"));
    }
    let guided = cfg_mix(&c, &u, alpha).map_err(err)?;
    let tempered = probs(&apply_temperature(&guided, temperature).map_err(err)?)?;
    let nucleus = top_p_filter(&tempered, top_p);
    Ok(json!({ "guided": guided, "tempered": tempered, "nucleus": nucleus }).to_string())
}

fn labelled(rows: usize, cols: usize, base: f64) -> Tensor {
    let data = (0..rows * cols).map(|i| base + i as f64).collect();
    Tensor::new(vec![rows, cols], data).expect("finite")
}

/// Widens a pair of `rows × cols` matrices whose entries are labelled
/// `1, 2, ...` (parent A) and `101, 102, ...` (parent B), so the page can
/// colour every cell of the result by where it came from.
#[wasm_bindgen]
pub fn widen_layout(rows: usize, cols: usize, average: bool, embedding: bool) -> Result<String, String> {
    if rows == 0 || cols == 0 || rows > 16 || cols > 16 {
        return Err(err("rows and cols must be in 1..=16"));
    }
    let name = if embedding { "tok_emb" } else { "w" };
    let set = |t: Tensor| -> ParameterSet { [(name.to_string(), t)].into_iter().collect() };
    let (a, b) = (set(labelled(rows, cols, 1.0)), set(labelled(rows, cols, 101.0)));
    let wide = if average { widen_average(&a, &b) } else { widen_copy(&a, &b) }.map_err(err)?;
    let w = wide.get(name).map_err(err)?;
    let grid: Vec<Vec<f64>> = (0..w.rows()).map(|r| w.row(r).to_vec()).collect();
    Ok(json!({ "rows": w.rows(), "cols": w.cols(), "cells": grid }).to_string())
}

/// Generates from a freshly initialized toy model (weights drawn from
/// `model_seed`), so the output shows the decoding grammar rather than
/// anything learned.
#[wasm_bindgen]
pub fn generate(prompt: &str, model_seed: u32, sample_seed: u32, temperature: f64, top_p: f64, cfg_alpha: f64, max_tokens: usize) -> Result<String, String> {
    let v = Vocabulary::default();
    let model = Transformer::init(TransformerConfig::toy(v.size()), model_seed.into()).map_err(err)?;
    let prompt = tokenize_report(prompt, &v).map_err(err)?;
    let cfg = SamplerConfig {
        temperature,
        top_p,
        cfg_alpha,
        max_tokens,
        max_images: 2,
        seed: sample_seed.into(),
        ..Default::default()
    };
    let g = generate_interleaved(&model, &v, &prompt, &cfg, None).map_err(err)?;
    let out: Value = json!({
        "tokens": g.sequence.tokens(),
        "generated": g.generated,
        "images": g.sequence.image_count(),
        "report": detokenize_report(&g.sequence, &v),
    });
    Ok(out.to_string())
}

/// Seeded random logits for the distribution explorer.
#[wasm_bindgen]
pub fn random_logits(n: usize, seed: u32, scale: f64) -> String {
    let mut r = ChaCha8Rng::seed_from_u64(seed.into());
    let t = Tensor::randn(&[n.clamp(1, 64)], scale, &mut r);
    serde_json::to_string(t.data()).expect("finite floats serialize")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stages_are_distributions() {
        let s: Value = serde_json::from_str(&sampling_stages("[1,2,3,0]", "[0,0,0,0]", 2.0, 1.0, 0.5).unwrap()).unwrap();
        for key in ["tempered", "nucleus"] {
            let p: Vec<f64> = serde_json::from_value(s[key].clone()).unwrap();
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let g: Vec<f64> = serde_json::from_value(s["guided"].clone()).unwrap();
        assert_eq!(g, vec![2.0, 4.0, 6.0, 0.0]);
    }

    #[test]
    fn layout_has_parent_blocks() {
        let l: Value = serde_json::from_str(&widen_layout(2, 3, false, false).unwrap()).unwrap();
        assert_eq!(l["rows"], 4);
        assert_eq!(l["cols"], 6);
        assert_eq!(l["cells"][0], json!([1.0, 2.0, 3.0, 1.0, 2.0, 3.0]));
        assert_eq!(l["cells"][2], json!([101.0, 102.0, 103.0, 101.0, 102.0, 103.0]));
        let avg: Value = serde_json::from_str(&widen_layout(2, 3, true, false).unwrap()).unwrap();
        assert_eq!(avg["cells"][3], json!([104.0, 105.0, 106.0, 54.0, 55.0, 56.0]));
        let emb: Value = serde_json::from_str(&widen_layout(2, 3, true, true).unwrap()).unwrap();
        assert_eq!(emb["rows"], 2);
    }

    #[test]
    fn generation_is_seeded() {
        let a = generate("text: boba buba\n", 0, 1, 1.0, 0.9, 2.0, 30).unwrap();
        assert_eq!(a, generate("text: boba buba\n", 0, 1, 1.0, 0.9, 2.0, 30).unwrap());
        assert!(generate("nonsense", 0, 1, 1.0, 0.9, 2.0, 30).is_err());
    }
}
