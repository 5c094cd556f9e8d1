//! WebAssembly bindings for the static demo page in `www/`. Every export
//! takes plain numbers or comma-separated lists and returns JSON text.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

use collossl::data::normalize;
use collossl::loss::contrastive_from_logits;
use collossl::mmd::{pairwise_mmd, to_f64, KernelSpec};
use collossl::selection::inverse_mmd_weights;
use collossl::synth::{generate, SynthConfig};
use serde_json::json;
use wasm_bindgen::prelude::*;

fn parse_list(s: &str) -> Result<Vec<f64>, String> {
    s.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| t.parse::<f64>().map_err(|_| format!("'{t}' is not a number")))
        .collect()
}

fn error(msg: impl std::fmt::Display) -> String {
    json!({ "error": msg.to_string() }).to_string()
}

fn positive_index(scores: &[f64]) -> usize {
    (0..scores.len()).min_by(|&a, &b| scores[a].total_cmp(&scores[b])).unwrap_or(0)
}

/// Positive device and negative weights for a list of MMD scores.
#[wasm_bindgen]
pub fn selection_weights(scores: &str) -> String {
    let scores = match parse_list(scores) {
        Ok(s) if !s.is_empty() => s,
        Ok(_) => return error("enter at least one score"),
        Err(e) => return error(e),
    };
    if scores.iter().any(|s| !(*s >= 0.0)) {
        return error("MMD scores are non-negative");
    }
    json!({ "positive": positive_index(&scores), "weights": inverse_mmd_weights(&scores) }).to_string()
}

/// Contrastive loss of one anchor from its cosine similarities to the
/// positives and weighted negatives.
#[wasm_bindgen]
pub fn contrastive_loss(positive_sims: &str, negative_sims: &str, weights: &str, tau: f64) -> String {
    let (pos, neg, w) = match (parse_list(positive_sims), parse_list(negative_sims), parse_list(weights)) {
        (Ok(p), Ok(n), Ok(w)) => (p, n, w),
        (Err(e), _, _) | (_, Err(e), _) | (_, _, Err(e)) => return error(e),
    };
    if pos.is_empty() {
        return error("at least one positive similarity is required");
    }
    if w.len() != neg.len() {
        return error(format!("{} negatives but {} weights", neg.len(), w.len()));
    }
    if !(tau > 0.0) {
        return error("temperature must be positive");
    }
    if pos.iter().chain(&neg).any(|s| !(-1.0..=1.0).contains(s)) {
        return error("cosine similarities lie in [-1, 1]");
    }
    let pos_logits: Vec<f64> = pos.iter().map(|s| s / tau).collect();
    let neg_logits: Vec<f64> = neg.iter().zip(&w).filter(|(_, &w)| w > 0.0).map(|(s, w)| s / tau + w.ln()).collect();
    json!({ "loss": contrastive_from_logits(&pos_logits, &neg_logits) }).to_string()
}

/// Generates a small synthetic recording and scores every device against
/// `device0`. Also returns the first window's first channel per device.
#[wasm_bindgen]
pub fn synthetic_device_mmd(num_devices: usize, spread: f64, noise: f64, seed: u64) -> String {
    let cfg = SynthConfig {
        num_devices,
        num_classes: 4,
        num_subjects: 2,
        windows_per_subject_per_class: 8,
        device_transform_spread: spread,
        noise_std: noise,
        seed,
        ..Default::default()
    };
    let ds = match generate(&cfg).and_then(|ds| normalize(&ds, None)) {
        Ok((ds, _)) => ds,
        Err(e) => return error(e),
    };
    let sets: Vec<Vec<f64>> = (0..ds.num_devices()).map(|d| to_f64(ds.device_windows(d))).collect();
    let refs: Vec<&[f64]> = sets[1..].iter().map(|s| s.as_slice()).collect();
    let p = match pairwise_mmd(&sets[0], &refs, ds.window_size(), &KernelSpec::default()) {
        Ok(p) => p,
        Err(e) => return error(e),
    };
    let (w, c) = (ds.window_len(), ds.channels());
    let traces: Vec<Vec<f32>> = (0..ds.num_devices()).map(|d| (0..w).map(|i| ds.window(d, 0)[i * c]).collect()).collect();
    json!({
        "devices": ds.devices().iter().map(|d| d.device_id.clone()).collect::<Vec<_>>(),
        "mmd": p.scores,
        "bandwidth": p.bandwidth,
        "positive": positive_index(&p.scores) + 1,
        "weights": inverse_mmd_weights(&p.scores),
        "traces": traces,
        "windows": ds.num_windows(),
    })
    .to_string()
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::Value;

    fn parse(s: String) -> Value {
        serde_json::from_str(&s).unwrap()
    }

    #[test]
    fn weights_fixture() {
        let v = parse(selection_weights("0.45, 0.61, 0.67, 0.77, 0.83, 1.51"));
        assert_eq!(v["positive"], 0);
        let w: Vec<f64> = v["weights"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect();
        for (a, b) in w.iter().zip([1.0, 0.738, 0.672, 0.584, 0.542, 0.298]) {
            assert!((a - b).abs() < 1e-3, "{a} vs {b}");
        }
        assert!(parse(selection_weights("0.1, x"))["error"].is_string());
        assert!(parse(selection_weights(""))["error"].is_string());
    }

    #[test]
    fn loss_edge_cases() {
        let v = parse(contrastive_loss("0.3", "0.3", "1", 0.5));
        assert!((v["loss"].as_f64().unwrap() - 2f64.ln()).abs() < 1e-12);
        assert_eq!(parse(contrastive_loss("0.3", "", "", 0.05))["loss"], 0.0);
        assert!(parse(contrastive_loss("0.3", "0.1,0.2", "1", 0.05))["error"].is_string());
        assert!(parse(contrastive_loss("1.3", "0.1", "1", 0.05))["error"].is_string());
    }

    #[test]
    fn synthetic_mmd_shapes() {
        let v = parse(synthetic_device_mmd(4, 0.5, 0.3, 1));
        assert_eq!(v["mmd"].as_array().unwrap().len(), 3);
        assert_eq!(v["traces"].as_array().unwrap().len(), 4);
        assert_eq!(v["traces"][0].as_array().unwrap().len(), 50);
        assert!(parse(synthetic_device_mmd(1, 0.5, 0.3, 1))["error"].is_string());
    }
}
