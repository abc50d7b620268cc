//! Triplet hinge plus cross-entropy, `total = lambda_ent * e_ent +
//! lambda_tri * e_tri`, with exact gradients.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::model::{Activations, EmbeddingModel};
use crate::error::{check_index, Error, Result};
use crate::mining::{Batch, Triplet};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub margin: f64,
    pub lambda_tri: f64,
    pub lambda_ent: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            margin: 0.3,
            lambda_tri: 2.0,
            lambda_ent: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossReport {
    pub e_tri: f64,
    pub e_ent: f64,
    pub total: f64,
    pub active_triplets: usize,
}

impl LossReport {
    pub fn new(e_tri: f64, e_ent: f64, active_triplets: usize, w: &LossWeights) -> Self {
        Self {
            e_tri,
            e_ent,
            total: w.lambda_ent * e_ent + w.lambda_tri * e_tri,
            active_triplets,
        }
    }
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn check_dims(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Dimension(format!(
            "embedding dims differ: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    Ok(())
}

/// `max(0, |a - p| - |a - n| + margin)`.
pub fn triplet_loss(e_a: &[f64], e_p: &[f64], e_n: &[f64], margin: f64) -> Result<f64> {
    check_dims(e_a, e_p)?;
    check_dims(e_a, e_n)?;
    if !(margin >= 0.0) {
        return Err(Error::Config(format!("margin must be non-negative, got {margin}")));
    }
    Ok((euclidean(e_a, e_p) - euclidean(e_a, e_n) + margin).max(0.0))
}

fn log_sum_exp(z: &[f64]) -> f64 {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + z.iter().map(|&v| (v - m).exp()).sum::<f64>().ln()
}

/// `-log softmax(logits)[label]`.
pub fn cross_entropy(logits: &[f64], label: usize) -> Result<f64> {
    check_index(label, logits.len())?;
    Ok(log_sum_exp(logits) - logits[label])
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|&v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

struct Pass {
    report: LossReport,
    acts: BTreeMap<usize, Activations>,
    grad_embedding: BTreeMap<usize, Vec<f64>>,
    grad_logits: BTreeMap<usize, Vec<f64>>,
}

/// Runs the model over every image that the batch or the triplets touch and
/// evaluates the loss together with the gradients w.r.t. embeddings and
/// logits. `inputs` and `labels` cover the whole training set.
fn evaluate(
    model: &EmbeddingModel,
    inputs: &[Vec<f64>],
    labels: &[usize],
    batch: &Batch,
    triplets: &[Triplet],
    w: &LossWeights,
) -> Result<Pass> {
    let mut acts: BTreeMap<usize, Activations> = BTreeMap::new();
    let touched = batch
        .indices
        .iter()
        .copied()
        .chain(triplets.iter().flat_map(|t| [t.anchor, t.positive, t.negative]));
    for i in touched {
        if let std::collections::btree_map::Entry::Vacant(slot) = acts.entry(i) {
            check_index(i, inputs.len())?;
            slot.insert(model.activations(&inputs[i])?);
        }
    }
    let d = model.embed.outputs;
    let c = model.classifier.outputs;
    let mut grad_embedding: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    let mut grad_logits: BTreeMap<usize, Vec<f64>> = BTreeMap::new();

    let mut e_ent = 0.0;
    for &i in &batch.indices {
        check_index(i, labels.len())?;
        let logits = &acts[&i].logits;
        e_ent += cross_entropy(logits, labels[i])?;
        let g = grad_logits.entry(i).or_insert_with(|| vec![0.0; c]);
        for (k, p) in softmax(logits).into_iter().enumerate() {
            let onehot = if k == labels[i] { 1.0 } else { 0.0 };
            g[k] += w.lambda_ent * (p - onehot);
        }
    }

    let mut e_tri = 0.0;
    let mut active = 0;
    for t in triplets {
        let (ea, ep, en) = (
            &acts[&t.anchor].embedding,
            &acts[&t.positive].embedding,
            &acts[&t.negative].embedding,
        );
        let d_ap = euclidean(ea, ep);
        let d_an = euclidean(ea, en);
        let arg = d_ap - d_an + w.margin;
        if arg <= 0.0 {
            continue;
        }
        e_tri += arg;
        active += 1;
        // d|a-p|/da = (a-p)/|a-p|, zero when the norm vanishes
        let unit = |x: &[f64], y: &[f64], n: f64| -> Vec<f64> {
            if n > 0.0 {
                x.iter().zip(y).map(|(a, b)| (a - b) / n).collect()
            } else {
                vec![0.0; d]
            }
        };
        let u_ap = unit(ea, ep, d_ap);
        let u_an = unit(ea, en, d_an);
        let s = w.lambda_tri;
        for (idx, coef_ap, coef_an) in [
            (t.anchor, s, -s),
            (t.positive, -s, 0.0),
            (t.negative, 0.0, s),
        ] {
            let g = grad_embedding.entry(idx).or_insert_with(|| vec![0.0; d]);
            for k in 0..d {
                g[k] += coef_ap * u_ap[k] + coef_an * u_an[k];
            }
        }
    }

    Ok(Pass {
        report: LossReport::new(e_tri, e_ent, active, w),
        acts,
        grad_embedding,
        grad_logits,
    })
}

/// Summed triplet cost over `triplets`, summed cross-entropy over the batch.
pub fn combined_loss(
    model: &EmbeddingModel,
    inputs: &[Vec<f64>],
    labels: &[usize],
    batch: &Batch,
    triplets: &[Triplet],
    weights: &LossWeights,
) -> Result<LossReport> {
    Ok(evaluate(model, inputs, labels, batch, triplets, weights)?.report)
}

/// Loss and its exact gradient w.r.t. every model parameter.
pub fn loss_and_gradient(
    model: &EmbeddingModel,
    inputs: &[Vec<f64>],
    labels: &[usize],
    batch: &Batch,
    triplets: &[Triplet],
    weights: &LossWeights,
) -> Result<(LossReport, EmbeddingModel)> {
    let pass = evaluate(model, inputs, labels, batch, triplets, weights)?;
    let mut grads = model.zeros_like();
    let d = model.embed.outputs;
    for (&i, act) in &pass.acts {
        let mut g_emb = pass
            .grad_embedding
            .get(&i)
            .cloned()
            .unwrap_or_else(|| vec![0.0; d]);
        if let Some(g_log) = pass.grad_logits.get(&i) {
            grads.classifier.accumulate_outer(g_log, &act.embedding);
            for (g, v) in g_emb.iter_mut().zip(model.classifier.transpose_apply(g_log)) {
                *g += v;
            }
        }
        if g_emb.iter().all(|&v| v == 0.0) {
            continue;
        }
        grads.embed.accumulate_outer(&g_emb, &act.hidden);
        let g_hidden: Vec<f64> = model
            .embed
            .transpose_apply(&g_emb)
            .into_iter()
            .zip(&act.pre_hidden)
            .map(|(g, &pre)| if pre > 0.0 { g } else { 0.0 })
            .collect();
        grads.hidden.accumulate_outer(&g_hidden, &inputs[i]);
    }
    Ok((pass.report, grads))
}

/// Gradient of the combined loss.
pub fn backward(
    model: &EmbeddingModel,
    inputs: &[Vec<f64>],
    labels: &[usize],
    batch: &Batch,
    triplets: &[Triplet],
    weights: &LossWeights,
) -> Result<EmbeddingModel> {
    Ok(loss_and_gradient(model, inputs, labels, batch, triplets, weights)?.1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn hinge_values() {
        // d_ap = 1, d_an = 0.5
        let l = triplet_loss(&[0.0, 0.0], &[1.0, 0.0], &[0.0, 0.5], 0.3).unwrap();
        assert!((l - 0.8).abs() < 1e-12);
        let l = triplet_loss(&[0.0, 0.0], &[0.5, 0.0], &[0.0, 1.0], 0.3).unwrap();
        assert_eq!(l, 0.0);
        assert!(triplet_loss(&[0.0], &[0.0, 1.0], &[0.0], 0.3).is_err());
        assert!(triplet_loss(&[0.0], &[1.0], &[0.0], -0.1).is_err());
    }

    #[test]
    fn cross_entropy_values() {
        let l = cross_entropy(&[0.0; 10], 3).unwrap();
        assert!((l - 10f64.ln()).abs() < 1e-12);
        let mut z = vec![0.0; 10];
        z[2] = 100.0;
        assert!(cross_entropy(&z, 2).unwrap() < 1e-12);
        assert!(matches!(cross_entropy(&z, 10), Err(Error::Index { .. })));
    }

    #[test]
    fn large_logits_do_not_overflow() {
        let l = cross_entropy(&[1000.0, 0.0], 1).unwrap();
        assert!((l - 1000.0).abs() < 1e-9);
    }

    #[test]
    fn default_weights() {
        let w = LossWeights::default();
        assert_eq!((w.margin, w.lambda_tri, w.lambda_ent), (0.3, 2.0, 0.5));
    }

    proptest! {
        #[test]
        fn hinge_scales_with_embeddings(
            a in proptest::collection::vec(-3f64..3.0, 4),
            p in proptest::collection::vec(-3f64..3.0, 4),
            n in proptest::collection::vec(-3f64..3.0, 4),
            c in 0.01f64..10.0,
        ) {
            let scale = |v: &[f64]| v.iter().map(|x| x * c).collect::<Vec<_>>();
            let lhs = triplet_loss(&scale(&a), &scale(&p), &scale(&n), 0.3).unwrap();
            let rhs = (c * (euclidean(&a, &p) - euclidean(&a, &n)) + 0.3).max(0.0);
            prop_assert!((lhs - rhs).abs() <= 1e-9 * (1.0 + rhs.abs()));
        }
    }
}
